//! Gaussian mixture data model, densities, sampling and the unconstrained posterior.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::scalar::{log_sum_exp, Scalar};

/// Default lower bound on covariance eigenvalues.
pub const DEFAULT_COVARIANCE_FLOOR: f64 = 1e-8;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn sum_tolerance<T: Scalar>(terms: usize) -> T {
    T::c(1e-12).max(T::epsilon() * T::from_usize_lossy(terms.max(1) * 4))
}

/// A finite mixture of multivariate Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureModel<T: Scalar> {
    weights: Array1<T>,
    means: Array2<T>,
    covariances: Vec<Array2<T>>,
}

impl<T: Scalar> MixtureModel<T> {
    /// Builds a model with the default covariance floor.
    pub fn new(weights: Array1<T>, means: Array2<T>, covariances: Vec<Array2<T>>) -> Result<Self> {
        Self::with_floor(weights, means, covariances, T::c(DEFAULT_COVARIANCE_FLOOR))
    }

    /// Builds a model, raising covariance eigenvalues below `floor` to `floor`.
    pub fn with_floor(
        weights: Array1<T>,
        means: Array2<T>,
        covariances: Vec<Array2<T>>,
        floor: T,
    ) -> Result<Self> {
        let k = means.nrows();
        let d = means.ncols();
        if k == 0 {
            return Err(Error::invalid("means", "need at least one component"));
        }
        if d == 0 {
            return Err(Error::invalid("means", "dimension must be at least 1"));
        }
        if weights.len() != k {
            return Err(Error::invalid(
                "weights",
                format!("expected {k} entries, got {}", weights.len()),
            ));
        }
        if weights.iter().any(|w| !(*w >= T::zero()) || !w.is_finite()) {
            return Err(Error::invalid("weights", "entries must be finite and nonnegative"));
        }
        let total: T = weights.sum();
        if (total - T::one()).abs() > sum_tolerance::<T>(k) {
            return Err(Error::invalid("weights", format!("sum to {total}, expected 1")));
        }
        if means.iter().any(|m| !m.is_finite()) {
            return Err(Error::invalid("means", "entries must be finite"));
        }
        if covariances.len() != k {
            return Err(Error::invalid(
                "covariances",
                format!("expected {k} matrices, got {}", covariances.len()),
            ));
        }
        let mut fixed = Vec::with_capacity(k);
        for (idx, cov) in covariances.into_iter().enumerate() {
            if cov.dim() != (d, d) {
                return Err(Error::invalid(
                    "covariances",
                    format!("component {idx} has shape {:?}, expected ({d}, {d})", cov.dim()),
                ));
            }
            if cov.iter().any(|c| !c.is_finite()) {
                return Err(Error::invalid("covariances", format!("component {idx} is not finite")));
            }
            let scale = cov.iter().fold(T::one(), |m, c| m.max(c.abs()));
            if linalg::max_asymmetry(cov.view()) > sum_tolerance::<T>(d) * scale {
                return Err(Error::invalid(
                    "covariances",
                    format!("component {idx} is not symmetric"),
                ));
            }
            let (repaired, changed) = linalg::floor_eigenvalues(cov.view(), floor);
            if changed {
                log::debug!("covariance of component {idx} floored at {floor}");
            }
            fixed.push(repaired);
        }
        Ok(Self { weights, means, covariances: fixed })
    }

    /// Isotropic components `variance · I` with the given means (rows) and weights.
    pub fn isotropic(weights: Array1<T>, means: Array2<T>, variance: T) -> Result<Self> {
        let d = means.ncols();
        let covs = (0..means.nrows()).map(|_| Array2::eye(d) * variance).collect();
        Self::new(weights, means, covs)
    }

    /// The two-component model `α N(θ, 1) + (1-α) N(-θ, 1)` on the real line.
    pub fn symmetric_pair(theta: T, alpha: T) -> Result<Self> {
        let weights = Array1::from(vec![alpha, T::one() - alpha]);
        let means = Array2::from_shape_vec((2, 1), vec![theta, -theta])
            .expect("shape matches");
        Self::isotropic(weights, means, T::one())
    }

    pub fn components(&self) -> usize {
        self.means.nrows()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn weights(&self) -> ArrayView1<'_, T> {
        self.weights.view()
    }

    pub fn means(&self) -> ArrayView2<'_, T> {
        self.means.view()
    }

    pub fn mean(&self, k: usize) -> ArrayView1<'_, T> {
        self.means.row(k)
    }

    pub fn covariances(&self) -> &[Array2<T>] {
        &self.covariances
    }

    /// Returns a copy with rows of every parameter reordered by `order`
    /// (new component `j` is old component `order[j]`).
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.components() {
            return Err(Error::DimensionMismatch { expected: self.components(), got: order.len() });
        }
        let weights = order.iter().map(|&k| self.weights[k]).collect::<Array1<T>>();
        let means = self.means.select(Axis(0), order);
        let covs = order.iter().map(|&k| self.covariances[k].clone()).collect();
        Ok(Self { weights, means, covariances: covs })
    }

    pub(crate) fn from_parts_unchecked(
        weights: Array1<T>,
        means: Array2<T>,
        covariances: Vec<Array2<T>>,
    ) -> Self {
        Self { weights, means, covariances }
    }

    /// Per-component log densities, a K×n matrix with entry `(k, i) = log N(y_i; μ_k, Σ_k)`.
    pub fn component_log_densities(&self, data: &Dataset<T>) -> Result<Array2<T>> {
        self.check_dim(data.dim())?;
        let k = self.components();
        let n = data.len();
        let d = self.dim();
        let mut out = Array2::<T>::zeros((k, n));
        let half = T::c(0.5);
        let base = T::c(LN_2PI) * T::from_usize_lossy(d) * half;
        let mut centered = Array1::<T>::zeros(d);
        for (c, cov) in self.covariances.iter().enumerate() {
            let l = linalg::cholesky(cov.view())?;
            let log_det = linalg::log_det_from_cholesky(l.view());
            let mean = self.means.row(c);
            for (i, y) in data.points().outer_iter().enumerate() {
                centered.assign(&(&y - &mean));
                let z = linalg::forward_substitute(l.view(), centered.view());
                let quad: T = z.iter().map(|v| *v * *v).sum();
                out[[c, i]] = -half * quad - half * log_det - base;
            }
        }
        Ok(out)
    }

    /// `log(weight_k) + log N(y_i; μ_k, Σ_k)` for every component and point.
    pub fn log_joint_kernel(&self, data: &Dataset<T>) -> Result<Array2<T>> {
        let mut kernel = self.component_log_densities(data)?;
        for (mut row, &w) in kernel.outer_iter_mut().zip(self.weights.iter()) {
            let lw = w.ln();
            row.mapv_inplace(|v| v + lw);
        }
        Ok(kernel)
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got });
        }
        Ok(())
    }
}

/// Observed points, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T: Scalar> {
    points: Array2<T>,
    seed: u64,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(points: Array2<T>, seed: u64) -> Result<Self> {
        if points.nrows() == 0 {
            return Err(Error::Empty("dataset has no points"));
        }
        if points.ncols() == 0 {
            return Err(Error::invalid("points", "dimension must be at least 1"));
        }
        if let Some(pos) = points.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(
                "points",
                format!("non-finite value in row {}", pos / points.ncols()),
            ));
        }
        Ok(Self { points, seed })
    }

    /// One-dimensional dataset from a slice of values.
    pub fn from_values(values: &[T]) -> Result<Self> {
        let points = Array2::from_shape_vec((values.len(), 1), values.to_vec())
            .expect("shape matches");
        Self::new(points, 0)
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn points(&self) -> ArrayView2<'_, T> {
        self.points.view()
    }

    pub fn point(&self, i: usize) -> ArrayView1<'_, T> {
        self.points.row(i)
    }

    /// Subset of rows, keeping the seed.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        Self::new(self.points.select(Axis(0), rows), self.seed)
    }

    /// Appends the reflection `-y` of every point, producing a dataset that is
    /// exactly symmetric about the origin.
    pub fn with_reflections(&self) -> Self {
        let neg = self.points.mapv(|v| -v);
        let stacked = ndarray::concatenate(Axis(0), &[self.points.view(), neg.view()])
            .expect("same width");
        Self { points: stacked, seed: self.seed }
    }
}

/// Column-stochastic K×n matrix of component-membership probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities<T: Scalar> {
    pub matrix: Array2<T>,
}

impl<T: Scalar> Responsibilities<T> {
    pub fn components(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn len(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.ncols() == 0
    }

    /// Total responsibility per component.
    pub fn totals(&self) -> Array1<T> {
        self.matrix.sum_axis(Axis(1))
    }
}

/// `log Σ_k w_k N(y; μ_k, Σ_k)`.
pub fn log_density<T: Scalar>(model: &MixtureModel<T>, y: ArrayView1<T>) -> Result<T> {
    let point = y.to_owned().insert_axis(Axis(0));
    let data = Dataset::new(point, 0).map_err(|_| Error::invalid("y", "point must be finite"))?;
    let kernel = model.log_joint_kernel(&data)?;
    Ok(log_sum_exp(kernel.column(0).iter().copied()))
}

/// Mean negative log-likelihood of the data under the model.
pub fn negative_log_likelihood<T: Scalar>(model: &MixtureModel<T>, data: &Dataset<T>) -> Result<T> {
    if data.is_empty() {
        return Err(Error::Empty("dataset has no points"));
    }
    let kernel = model.log_joint_kernel(data)?;
    Ok(nll_from_kernel(kernel.view()))
}

pub(crate) fn nll_from_kernel<T: Scalar>(kernel: ArrayView2<T>) -> T {
    let n = kernel.ncols();
    let total: T = kernel
        .axis_iter(Axis(1))
        .map(|col| log_sum_exp(col.iter().copied()))
        .sum();
    -total / T::from_usize_lossy(n)
}

/// Draws `n` points: a component index by weight, then a Gaussian draw.
pub fn sample<T: Scalar>(model: &MixtureModel<T>, n: usize, seed: u64) -> Result<Dataset<T>> {
    sample_with_labels(model, n, seed).map(|(data, _)| data)
}

/// As [`sample`], also returning the component index of every point.
pub fn sample_with_labels<T: Scalar>(
    model: &MixtureModel<T>,
    n: usize,
    seed: u64,
) -> Result<(Dataset<T>, Vec<usize>)> {
    if n == 0 {
        return Err(Error::Empty("sample size must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = model.dim();
    let factors = model
        .covariances()
        .iter()
        .map(|c| linalg::cholesky(c.view()))
        .collect::<Result<Vec<_>>>()?;
    let cumulative: Vec<f64> = model
        .weights()
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w.as_f64();
            Some(*acc)
        })
        .collect();
    let mut points = Array2::<T>::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    let mut z = Array1::<T>::zeros(d);
    for i in 0..n {
        let u: f64 = rng.gen();
        let k = cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(model.components() - 1);
        for zj in z.iter_mut() {
            let g: f64 = rng.sample(StandardNormal);
            *zj = T::c(g);
        }
        let draw = factors[k].dot(&z) + &model.mean(k);
        points.row_mut(i).assign(&draw);
        labels.push(k);
    }
    Ok((Dataset::new(points, seed)?, labels))
}

/// Posterior component probabilities under the model's own weights.
pub fn vanilla_posterior<T: Scalar>(
    model: &MixtureModel<T>,
    data: &Dataset<T>,
) -> Result<Responsibilities<T>> {
    let kernel = model.log_joint_kernel(data)?;
    posterior_from_kernel(kernel)
}

/// Normalizes each column of a log-kernel into probabilities.
pub(crate) fn posterior_from_kernel<T: Scalar>(kernel: Array2<T>) -> Result<Responsibilities<T>> {
    posterior_and_nll(kernel).map(|(r, _)| r)
}

/// Column-normalizes a log-kernel in place, also returning the mean negative
/// log of the column normalizers.
pub(crate) fn posterior_and_nll<T: Scalar>(mut kernel: Array2<T>) -> Result<(Responsibilities<T>, T)> {
    let n = kernel.ncols();
    let mut total = T::zero();
    for (i, mut col) in kernel.axis_iter_mut(Axis(1)).enumerate() {
        let max = col.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        if !max.is_finite() {
            return Err(Error::Underflow { point: i });
        }
        let mut sum = T::zero();
        for v in col.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        let inv = sum.recip();
        col.mapv_inplace(|v| v * inv);
        total = total + max + sum.ln();
    }
    Ok((Responsibilities { matrix: kernel }, -total / T::from_usize_lossy(n)))
}

/// JSON document layout for a mixture: `{K, d, weights, means, covariances}`,
/// with every covariance flattened row-major.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MixtureDocument {
    #[serde(rename = "K")]
    pub k: usize,
    pub d: usize,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<f64>>,
}

impl<T: Scalar> From<&MixtureModel<T>> for MixtureDocument {
    fn from(model: &MixtureModel<T>) -> Self {
        MixtureDocument {
            k: model.components(),
            d: model.dim(),
            weights: model.weights.iter().map(|w| w.as_f64()).collect(),
            means: model
                .means
                .outer_iter()
                .map(|r| r.iter().map(|v| v.as_f64()).collect())
                .collect(),
            covariances: model
                .covariances
                .iter()
                .map(|c| c.iter().map(|v| v.as_f64()).collect())
                .collect(),
        }
    }
}

impl MixtureDocument {
    pub fn into_model<T: Scalar>(self) -> Result<MixtureModel<T>> {
        let (k, d) = (self.k, self.d);
        if self.weights.len() != k {
            return Err(Error::invalid(
                "weights",
                format!("expected K={k} entries, got {}", self.weights.len()),
            ));
        }
        if self.means.len() != k || self.means.iter().any(|m| m.len() != d) {
            return Err(Error::invalid("means", format!("expected {k} vectors of length {d}")));
        }
        if self.covariances.len() != k || self.covariances.iter().any(|c| c.len() != d * d) {
            return Err(Error::invalid(
                "covariances",
                format!("expected {k} row-major arrays of length {}", d * d),
            ));
        }
        let weights = self.weights.iter().map(|&w| T::c(w)).collect::<Array1<T>>();
        let flat: Vec<T> = self.means.iter().flatten().map(|&v| T::c(v)).collect();
        let means = Array2::from_shape_vec((k, d), flat).expect("validated shape");
        let covs = self
            .covariances
            .iter()
            .map(|c| {
                Array2::from_shape_vec((d, d), c.iter().map(|&v| T::c(v)).collect())
                    .expect("validated shape")
            })
            .collect();
        MixtureModel::new(weights, means, covs)
    }
}

impl<T: Scalar> MixtureModel<T> {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&MixtureDocument::from(self)).expect("plain data serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: MixtureDocument = serde_json::from_str(text)?;
        doc.into_model()
    }
}

impl<T: Scalar> Dataset<T> {
    /// Writes one point per row, comma separated, no header.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
        for row in self.points.outer_iter() {
            w.write_record(row.iter().map(|v| format!("{}", v.as_f64())))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads one point per row; a leading non-numeric row is treated as a header.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(reader);
        let mut values = Vec::new();
        let mut width = None;
        let mut rows = 0;
        for (line, record) in r.records().enumerate() {
            let record = record?;
            let parsed: std::result::Result<Vec<f64>, _> =
                record.iter().map(|s| s.parse::<f64>()).collect();
            let parsed = match parsed {
                Ok(p) => p,
                Err(_) if line == 0 => continue,
                Err(e) => return Err(Error::Parse(format!("row {}: {e}", line + 1))),
            };
            match width {
                None => width = Some(parsed.len()),
                Some(w) if w != parsed.len() => {
                    return Err(Error::Parse(format!(
                        "row {} has {} columns, expected {w}",
                        line + 1,
                        parsed.len()
                    )))
                }
                _ => {}
            }
            values.extend(parsed.into_iter().map(T::c));
            rows += 1;
        }
        let width = width.ok_or(Error::Empty("dataset has no points"))?;
        let points = Array2::from_shape_vec((rows, width), values).expect("validated shape");
        Dataset::new(points, 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn normal_pdf(y: f64, m: f64) -> f64 {
        (-(y - m) * (y - m) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt()
    }

    #[test]
    fn standard_normal_log_density_at_mode() {
        let m = MixtureModel::isotropic(array![1.0_f64], array![[0.0]], 1.0).unwrap();
        let v = log_density(&m, array![0.0].view()).unwrap();
        assert!((v + 0.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn symmetric_pair_log_density_values() {
        let m = MixtureModel::symmetric_pair(1.0_f64, 0.5).unwrap();
        let v = log_density(&m, array![0.0].view()).unwrap();
        assert!((v + 1.418_938_533_204_672_7).abs() < 1e-12);

        let m = MixtureModel::symmetric_pair(1.0_f64, 0.7).unwrap();
        let direct = (0.7 * normal_pdf(0.5, 1.0) + 0.3 * normal_pdf(0.5, -1.0)).ln();
        let v = log_density(&m, array![0.5].view()).unwrap();
        assert!((v - direct).abs() < 1e-12);
    }

    #[test]
    fn log_density_survives_far_points() {
        let m = MixtureModel::symmetric_pair(30.0_f64, 0.5).unwrap();
        let v = log_density(&m, array![-60.0].view()).unwrap();
        assert!(v.is_finite());
        let err = log_density(&m, array![0.0, 1.0].view()).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn nll_of_duplicated_data_is_unchanged() {
        let m = MixtureModel::symmetric_pair(1.3_f64, 0.6).unwrap();
        let one = Dataset::from_values(&[0.4]).unwrap();
        let two = Dataset::from_values(&[0.4, 0.4]).unwrap();
        let a = negative_log_likelihood(&m, &one).unwrap();
        let b = negative_log_likelihood(&m, &two).unwrap();
        assert!((a - b).abs() < 1e-14);
        let std = MixtureModel::isotropic(array![1.0_f64], array![[0.0]], 1.0).unwrap();
        let zero = Dataset::from_values(&[0.0]).unwrap();
        assert!((negative_log_likelihood(&std, &zero).unwrap() - 0.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn nll_matches_direct_summation_for_equal_pair() {
        let m = MixtureModel::isotropic(array![0.5_f64, 0.5], array![[-1.0], [1.0]], 1.0).unwrap();
        let ys = [-2.1, -0.3, 0.0, 0.8, 2.6];
        let data = Dataset::from_values(&ys).unwrap();
        let direct = -ys
            .iter()
            .map(|&y| (0.5 * normal_pdf(y, -1.0) + 0.5 * normal_pdf(y, 1.0)).ln())
            .sum::<f64>()
            / 5.0;
        assert!((negative_log_likelihood(&m, &data).unwrap() - direct).abs() < 1e-13);
    }

    #[test]
    fn sampling_is_deterministic_and_has_right_moments() {
        let m = MixtureModel::isotropic(array![1.0_f64], array![[0.0]], 1.0).unwrap();
        let a = sample(&m, 100_000, 7).unwrap();
        let b = sample(&m, 100_000, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.seed(), 7);
        let xs = a.points();
        let mean = xs.sum() / 100_000.0;
        let var = xs.mapv(|v| (v - mean) * (v - mean)).sum() / 100_000.0;
        assert!(mean.abs() < 0.02);
        assert!((var - 1.0).abs() < 0.05);
    }

    #[test]
    fn sampled_component_fraction_tracks_weight() {
        let m = MixtureModel::symmetric_pair(1.0_f64, 0.7).unwrap();
        let (_, labels) = sample_with_labels(&m, 100_000, 11).unwrap();
        let frac = labels.iter().filter(|&&k| k == 0).count() as f64 / 100_000.0;
        assert!((frac - 0.7).abs() < 0.01);
    }

    #[test]
    fn posterior_examples() {
        let same = MixtureModel::isotropic(array![0.5_f64, 0.5], array![[0.3], [0.3]], 1.0).unwrap();
        let data = Dataset::from_values(&[-1.0, 0.0, 4.0]).unwrap();
        let r = vanilla_posterior(&same, &data).unwrap();
        assert!(r.matrix.iter().all(|&v| (v - 0.5).abs() < 1e-15));

        let onesided = MixtureModel::isotropic(array![1.0_f64, 0.0], array![[0.0], [2.0]], 1.0).unwrap();
        let r = vanilla_posterior(&onesided, &data).unwrap();
        assert!(r.matrix.row(0).iter().all(|&v| v == 1.0));

        let pair = MixtureModel::symmetric_pair(1.0_f64, 0.7).unwrap();
        let r = vanilla_posterior(&pair, &Dataset::from_values(&[0.0]).unwrap()).unwrap();
        assert!((r.matrix[[0, 0]] - 0.7).abs() < 1e-15 && (r.matrix[[1, 0]] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn invalid_models_are_rejected() {
        let bad = MixtureModel::isotropic(array![0.6_f64, 0.3], array![[0.0], [1.0]], 1.0);
        match bad {
            Err(Error::Invalid { field, .. }) => assert_eq!(field, "weights"),
            other => panic!("unexpected {other:?}"),
        }
        let asym = MixtureModel::new(
            array![1.0_f64],
            array![[0.0, 0.0]],
            vec![array![[1.0, 0.5], [0.2, 1.0]]],
        );
        assert!(asym.is_err());
    }

    #[test]
    fn singular_covariance_is_floored() {
        let m = MixtureModel::new(array![1.0_f64], array![[0.0, 0.0]], vec![array![[1.0, 1.0], [1.0, 1.0]]])
            .unwrap();
        assert!(linalg::min_eigenvalue(m.covariances()[0].view()) >= 1e-8 - 1e-15);
    }

    #[test]
    fn json_and_csv_round_trip() {
        let m = MixtureModel::new(
            array![0.25_f64, 0.75],
            array![[0.0, 1.0], [2.0, -1.0]],
            vec![array![[1.0, 0.2], [0.2, 2.0]], Array2::eye(2)],
        )
        .unwrap();
        let back: MixtureModel<f64> = MixtureModel::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);
        assert!(m.to_json().contains("\"K\": 2"));

        let data = sample(&m, 20, 3).unwrap();
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        let read: Dataset<f64> = Dataset::read_csv(buf.as_slice()).unwrap();
        assert_eq!(read.points(), data.points());
    }

    #[test]
    fn works_in_single_precision() {
        let m = MixtureModel::symmetric_pair(1.0_f32, 0.5).unwrap();
        let v = log_density(&m, array![0.0_f32].view()).unwrap();
        assert!((v + 1.418_938_5).abs() < 1e-5);
    }
}
