//! Estimation-error and segmentation-quality metrics.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::mixture::MixtureModel;
use crate::scalar::Scalar;
use crate::sinkhorn::{solve, SinkhornSettings};

/// Largest support handled by [`w2_squared_exact`].
pub const EXACT_MAX_ATOMS: usize = 12;

/// A finitely supported probability measure: `Σ_k m_k δ(x_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMixture<T: Scalar> {
    atoms: Array2<T>,
    masses: Array1<T>,
}

impl<T: Scalar> DiscreteMixture<T> {
    pub fn new(atoms: Array2<T>, masses: Array1<T>) -> Result<Self> {
        let k = atoms.nrows();
        if k == 0 {
            return Err(Error::Empty("atoms"));
        }
        if masses.len() != k {
            return Err(Error::DimensionMismatch { expected: k, got: masses.len() });
        }
        if masses.iter().any(|m| !(*m >= T::zero())) || atoms.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("masses", "must be nonnegative and finite"));
        }
        let tol = 1e-12_f64.max(8.0 * T::epsilon().as_f64() * k as f64);
        if (masses.sum().as_f64() - 1.0).abs() > tol {
            return Err(Error::invalid("masses", "must sum to one"));
        }
        Ok(Self { atoms, masses })
    }

    /// Equal masses on the given atoms.
    pub fn uniform(atoms: Array2<T>) -> Result<Self> {
        let k = atoms.nrows();
        let m = T::one() / T::from_usize_lossy(k.max(1));
        Self::new(atoms, Array1::from_elem(k, m))
    }

    /// Component means weighted by mixing weights.
    pub fn from_model(model: &MixtureModel<T>) -> Self {
        Self { atoms: model.means().to_owned(), masses: model.weights().to_owned() }
    }

    pub fn len(&self) -> usize {
        self.masses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masses.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.atoms.ncols()
    }

    pub fn atoms(&self) -> ArrayView2<'_, T> {
        self.atoms.view()
    }

    pub fn masses(&self) -> ArrayView1<'_, T> {
        self.masses.view()
    }

    fn is_uniform(&self) -> bool {
        let m = T::one() / T::from_usize_lossy(self.len());
        self.masses.iter().all(|&v| (v - m).abs() <= T::c(1e-12))
    }
}

fn squared_distance<T: Scalar>(a: ArrayView1<T>, b: ArrayView1<T>) -> T {
    a.iter().zip(b.iter()).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

fn cost_matrix<T: Scalar>(a: ArrayView2<T>, b: ArrayView2<T>) -> Array2<T> {
    Array2::from_shape_fn((a.nrows(), b.nrows()), |(i, j)| squared_distance(a.row(i), b.row(j)))
}

/// Minimum-cost perfect assignment for a square cost matrix; returns, for each
/// row, its column.
pub fn assignment<T: Scalar>(cost: ArrayView2<T>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "assignment needs a square cost matrix");
    // Shortest augmenting path with potentials, 1-based with a virtual column 0.
    let inf = T::infinity();
    let mut u = vec![T::zero(); n + 1];
    let mut v = vec![T::zero(); n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] = u[owner[j]] + delta;
                    v[j] = v[j] - delta;
                } else {
                    minv[j] = minv[j] - delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut result = vec![0; n];
    for j in 1..=n {
        if owner[j] > 0 {
            result[owner[j] - 1] = j - 1;
        }
    }
    result
}

/// Exact transport cost between general discrete marginals, by successive
/// shortest augmenting paths on the bipartite flow network.
fn transport_cost<T: Scalar>(cost: &Array2<T>, a: ArrayView1<T>, b: ArrayView1<T>) -> T {
    let (m, n) = cost.dim();
    let mut supply: Vec<T> = a.to_vec();
    let mut demand: Vec<T> = b.to_vec();
    let mut flow = Array2::<T>::zeros((m, n));
    let eps = T::c(1e-15);
    // Relaxations must beat the current label by a margin, so floating-point
    // ties cannot create zero-cost cycles in the predecessor graph.
    let scale = cost.iter().fold(T::zero(), |m, &c| m.max(c.abs()));
    let slack = scale * T::c(1e-13);
    for _ in 0..(4 * (m + n) * (m + n) + 16) {
        if supply.iter().all(|&s| s <= eps) || demand.iter().all(|&d| d <= eps) {
            break;
        }
        // Bellman-Ford over rows (0..m) and columns (m..m+n) from every open source.
        let inf = T::infinity();
        let mut dist = vec![inf; m + n];
        let mut prev = vec![usize::MAX; m + n];
        for i in 0..m {
            if supply[i] > eps {
                dist[i] = T::zero();
            }
        }
        for _ in 0..(m + n) {
            let mut changed = false;
            for i in 0..m {
                if dist[i] == inf {
                    continue;
                }
                for j in 0..n {
                    let d = dist[i] + cost[[i, j]];
                    if d < dist[m + j] - slack {
                        dist[m + j] = d;
                        prev[m + j] = i;
                        changed = true;
                    }
                }
            }
            for j in 0..n {
                if dist[m + j] == inf {
                    continue;
                }
                for i in 0..m {
                    if flow[[i, j]] > T::zero() {
                        let d = dist[m + j] - cost[[i, j]];
                        if d < dist[i] - slack {
                            dist[i] = d;
                            prev[i] = m + j;
                            changed = true;
                        }
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let target = (0..n)
            .filter(|&j| demand[j] > eps && dist[m + j] < inf)
            .min_by(|&x, &y| dist[m + x].partial_cmp(&dist[m + y]).expect("finite distances"));
        let Some(target) = target else { break };
        // Trace back and find the bottleneck.
        let mut path = Vec::new();
        let mut node = m + target;
        while prev[node] != usize::MAX && path.len() <= m + n {
            path.push(node);
            node = prev[node];
        }
        if path.len() > m + n {
            break;
        }
        let source = node;
        let mut amount = supply[source].min(demand[target]);
        let mut cur = m + target;
        for &next in path.iter().skip(1).chain(std::iter::once(&source)) {
            if cur < m {
                // Reverse arc from column `next` back to row `cur`.
                amount = amount.min(flow[[cur, next - m]]);
            }
            cur = next;
        }
        let mut cur = m + target;
        for &next in path.iter().skip(1).chain(std::iter::once(&source)) {
            if cur >= m {
                flow[[next, cur - m]] = flow[[next, cur - m]] + amount;
            } else {
                flow[[cur, next - m]] = flow[[cur, next - m]] - amount;
            }
            cur = next;
        }
        supply[source] = supply[source] - amount;
        demand[target] = demand[target] - amount;
    }
    flow.iter().zip(cost.iter()).map(|(&f, &c)| f * c).sum()
}

/// Exact squared 2-Wasserstein distance with squared Euclidean ground cost.
///
/// Uniform equal-size supports go through the assignment problem; anything
/// else through an exact min-cost flow. Supports larger than
/// [`EXACT_MAX_ATOMS`] are rejected.
pub fn w2_squared_exact<T: Scalar>(a: &DiscreteMixture<T>, b: &DiscreteMixture<T>) -> Result<T> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch { expected: a.dim(), got: b.dim() });
    }
    let largest = a.len().max(b.len());
    if largest > EXACT_MAX_ATOMS {
        return Err(Error::TooLarge { max: EXACT_MAX_ATOMS, got: largest });
    }
    let cost = cost_matrix(a.atoms(), b.atoms());
    if a.len() == b.len() && a.is_uniform() && b.is_uniform() {
        let perm = assignment(cost.view());
        let total: T = perm.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
        return Ok(total / T::from_usize_lossy(a.len()));
    }
    Ok(transport_cost(&cost, a.masses(), b.masses()))
}

/// Transport term `⟨C, π⟩` of the entropic optimal plan with regularization
/// `regularization` after `iterations` Sinkhorn rounds.
///
/// Atoms with zero mass are dropped; tiny positive masses are fine.
pub fn w2_squared_entropic<T: Scalar>(
    a: &DiscreteMixture<T>,
    b: &DiscreteMixture<T>,
    regularization: T,
    iterations: usize,
) -> Result<T> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch { expected: a.dim(), got: b.dim() });
    }
    if !(regularization > T::zero()) {
        return Err(Error::invalid("regularization", "must be positive"));
    }
    let keep = |m: &DiscreteMixture<T>| -> Vec<usize> { (0..m.len()).filter(|&k| m.masses[k] > T::zero()).collect() };
    let (ka, kb) = (keep(a), keep(b));
    let atoms_a = a.atoms.select(ndarray::Axis(0), &ka);
    let atoms_b = b.atoms.select(ndarray::Axis(0), &kb);
    let cost = cost_matrix(atoms_a.view(), atoms_b.view());
    let log_gibbs = cost.mapv(|c| -c / regularization);
    let settings = SinkhornSettings::with_iterations(iterations.max(1));
    let coupling = solve(
        log_gibbs.view(),
        a.masses.select(ndarray::Axis(0), &ka).view(),
        b.masses.select(ndarray::Axis(0), &kb).view(),
        &settings,
        None,
    )?;
    Ok(coupling.plan.iter().zip(cost.iter()).map(|(&p, &c)| p * c).sum())
}

fn check_pair<T: Scalar>(centers: ArrayView2<T>, truth: ArrayView2<T>) -> Result<()> {
    if centers.nrows() != truth.nrows() {
        return Err(Error::DimensionMismatch { expected: truth.nrows(), got: centers.nrows() });
    }
    if centers.ncols() != truth.ncols() {
        return Err(Error::DimensionMismatch { expected: truth.ncols(), got: centers.ncols() });
    }
    if truth.nrows() == 0 {
        return Err(Error::Empty("centers"));
    }
    Ok(())
}

/// Fraction of components whose center lies within `radius` of the truth,
/// measured on the first three (spatial) coordinates. The ball is closed.
pub fn accuracy<T: Scalar>(centers: ArrayView2<T>, truth: ArrayView2<T>, radius: T) -> Result<T> {
    check_pair(centers, truth)?;
    let spatial = truth.ncols().min(3);
    let r2 = radius * radius;
    let hits = (0..truth.nrows())
        .filter(|&k| {
            let d: T = (0..spatial).map(|j| (centers[[k, j]] - truth[[k, j]]).powi(2)).sum();
            d <= r2
        })
        .count();
    Ok(T::from_usize_lossy(hits) / T::from_usize_lossy(truth.nrows()))
}

/// Mean squared Euclidean distance between matched centers, over all coordinates.
pub fn mse<T: Scalar>(centers: ArrayView2<T>, truth: ArrayView2<T>) -> Result<T> {
    check_pair(centers, truth)?;
    let total: T = (0..truth.nrows()).map(|k| squared_distance(centers.row(k), truth.row(k))).sum();
    Ok(total / T::from_usize_lossy(truth.nrows()))
}

/// Reorders `centers` so that row `k` is the center assigned to `truth` row `k`
/// by minimum total squared distance.
pub fn match_to_truth<T: Scalar>(centers: ArrayView2<T>, truth: ArrayView2<T>) -> Result<Array2<T>> {
    check_pair(centers, truth)?;
    let perm = assignment(cost_matrix(truth, centers).view());
    Ok(centers.select(ndarray::Axis(0), &perm))
}

/// First index whose error is strictly below `factor` times the final error.
///
/// Falls back to the final index when no earlier entry qualifies.
pub fn convergence_iteration<T: Scalar>(errors: &[T], factor: T) -> Result<usize> {
    let last = *errors.last().ok_or(Error::Empty("error sequence"))?;
    let threshold = factor * last;
    Ok(errors.iter().position(|&e| e < threshold).unwrap_or(errors.len() - 1))
}

/// Mass-weighted squared distance from each true atom to its nearest estimate.
///
/// Unlike the Wasserstein error this ignores the estimated weights and cannot
/// see two true atoms sharing one estimate.
pub fn nearest_center_error<T: Scalar>(truth: &DiscreteMixture<T>, estimate: ArrayView2<T>) -> Result<T> {
    if estimate.ncols() != truth.dim() {
        return Err(Error::DimensionMismatch { expected: truth.dim(), got: estimate.ncols() });
    }
    if estimate.nrows() == 0 {
        return Err(Error::Empty("estimate"));
    }
    Ok((0..truth.len())
        .map(|i| {
            let nearest = estimate
                .outer_iter()
                .map(|c| squared_distance(truth.atoms.row(i), c))
                .fold(T::infinity(), T::min);
            truth.masses[i] * nearest
        })
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    fn brute_force(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let k = a.nrows();
        permutations(k)
            .into_iter()
            .map(|p| (0..k).map(|i| squared_distance(a.row(i), b.row(p[i]))).sum::<f64>() / k as f64)
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn single_atoms_give_squared_distance() {
        let a = DiscreteMixture::new(array![[1.0, 2.0]], array![1.0]).unwrap();
        let b = DiscreteMixture::new(array![[-2.0, 6.0]], array![1.0]).unwrap();
        assert_eq!(w2_squared_exact(&a, &b).unwrap(), 25.0);
    }

    #[test]
    fn rejects_oversized_and_mismatched() {
        let big = DiscreteMixture::uniform(Array2::<f64>::zeros((13, 1))).unwrap();
        assert!(matches!(w2_squared_exact(&big, &big), Err(Error::TooLarge { .. })));
        let a = DiscreteMixture::uniform(Array2::<f64>::zeros((2, 1))).unwrap();
        let b = DiscreteMixture::uniform(Array2::<f64>::zeros((2, 2))).unwrap();
        assert!(w2_squared_exact(&a, &b).is_err());
        assert!(DiscreteMixture::new(array![[0.0], [1.0]], array![0.5, 0.4]).is_err());
    }

    #[test]
    fn flow_solver_matches_hand_solution() {
        // Mass 0.7 at 0 and 0.3 at 1 against 0.5 at 0 and 0.5 at 1: move 0.2 by one unit.
        let a: DiscreteMixture<f64> = DiscreteMixture::new(array![[0.0], [1.0]], array![0.7, 0.3]).unwrap();
        let b = DiscreteMixture::new(array![[0.0], [1.0]], array![0.5, 0.5]).unwrap();
        assert!((w2_squared_exact(&a, &b).unwrap() - 0.2).abs() < 1e-14);
        let c: DiscreteMixture<f64> = DiscreteMixture::new(array![[0.0], [2.0], [5.0]], array![0.2, 0.3, 0.5]).unwrap();
        let d = DiscreteMixture::new(array![[1.0], [4.0]], array![0.6, 0.4]).unwrap();
        // Monotone coupling in 1-D: 0.2@0→1, 0.3@2→1, 0.1@5→1, 0.4@5→4.
        let want = 0.2 * 1.0 + 0.3 * 1.0 + 0.1 * 16.0 + 0.4 * 1.0;
        assert!((w2_squared_exact(&c, &d).unwrap() - want).abs() < 1e-13);
    }

    #[test]
    fn entropic_limits() {
        let a: DiscreteMixture<f64> = DiscreteMixture::uniform(array![[-3.0], [3.0]]).unwrap();
        assert!(w2_squared_entropic(&a, &a, 1e-4, 100).unwrap() < 1e-3);
        let b = DiscreteMixture::uniform(array![[-2.5], [2.2]]).unwrap();
        let exact = w2_squared_exact(&a, &b).unwrap();
        let ent = w2_squared_entropic(&a, &b, 0.1, 1000).unwrap();
        assert!((ent - exact).abs() <= 0.05 * exact);
        let collapsed = DiscreteMixture::new(array![[0.0], [7.0]], array![1.0 - 1e-10, 1e-10]).unwrap();
        assert!(w2_squared_entropic(&collapsed, &a, 0.1, 1000).unwrap().is_finite());
    }

    #[test]
    fn accuracy_and_mse_examples() {
        let truth = Array2::from_shape_fn((5, 6), |(k, j)| (k * 10 + j) as f64);
        assert_eq!(accuracy(truth.view(), truth.view(), 3.0).unwrap(), 1.0);
        let mut moved = truth.clone();
        moved[[2, 0]] += 10.0;
        assert!((accuracy(moved.view(), truth.view(), 3.0).unwrap() - 0.8).abs() < 1e-15);
        let mut edge = truth.clone();
        edge[[1, 1]] += 3.0;
        assert_eq!(accuracy(edge.view(), truth.view(), 3.0).unwrap(), 1.0);
        // Color coordinates do not count toward accuracy.
        let mut colored = truth.clone();
        colored[[0, 4]] += 100.0;
        assert_eq!(accuracy(colored.view(), truth.view(), 3.0).unwrap(), 1.0);
        assert_eq!(mse(truth.view(), truth.view()).unwrap(), 0.0);
        let one = array![[1.0, 2.0, 2.0]];
        assert_eq!(mse(one.view(), Array2::zeros((1, 3)).view()).unwrap(), 9.0);
        assert!(accuracy(one.view(), truth.view(), 3.0).is_err());
    }

    #[test]
    fn matching_recovers_permutation() {
        let truth = array![[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]];
        let shuffled = array![[0.1, 5.0], [0.0, 0.2], [4.9, 0.0]];
        let matched = match_to_truth(shuffled.view(), truth.view()).unwrap();
        assert_eq!(matched, array![[0.0, 0.2], [4.9, 0.0], [0.1, 5.0]]);
    }

    #[test]
    fn convergence_iteration_examples() {
        assert_eq!(convergence_iteration(&[8.0, 4.0, 2.0, 1.0], 1.5).unwrap(), 3);
        assert_eq!(convergence_iteration(&[2.0, 2.0, 2.0], 1.5).unwrap(), 0);
        assert_eq!(convergence_iteration(&[0.0, 0.0, 0.0], 1.5).unwrap(), 2);
        assert_eq!(convergence_iteration(&[10.0, 1.4, 1.0], 1.5).unwrap(), 1);
        assert!(convergence_iteration::<f64>(&[], 1.5).is_err());
    }

    #[test]
    fn nearest_center_error_ignores_label_switching() {
        let truth: DiscreteMixture<f64> = DiscreteMixture::new(array![[-3.0, 0.0], [0.0, 0.0], [2.0, 0.0]], array![0.5, 0.3, 0.2]).unwrap();
        let est = array![[2.0, 0.0], [-3.0, 0.0], [0.0, 0.0]];
        assert_eq!(nearest_center_error(&truth, est.view()).unwrap(), 0.0);
        let merged = array![[-3.0, 0.0], [-3.0, 0.0], [1.0, 0.0]];
        assert!((nearest_center_error(&truth, merged.view()).unwrap() - 0.5).abs() < 1e-15);
    }

    fn atoms(k: usize, d: usize) -> impl Strategy<Value = Array2<f64>> {
        proptest::collection::vec(-5.0..5.0f64, k * d).prop_map(move |v| Array2::from_shape_vec((k, d), v).unwrap())
    }

    fn masses(k: usize) -> impl Strategy<Value = Array1<f64>> {
        proptest::collection::vec(0.05..1.0f64, k).prop_map(|v| {
            let s: f64 = v.iter().sum();
            Array1::from_iter(v.into_iter().map(|x| x / s))
        })
    }

    proptest! {
        #[test]
        fn exact_matches_permutation_oracle(a in atoms(4, 2), b in atoms(4, 2)) {
            let got = w2_squared_exact(&DiscreteMixture::uniform(a.clone()).unwrap(), &DiscreteMixture::uniform(b.clone()).unwrap()).unwrap();
            prop_assert!((got - brute_force(&a, &b)).abs() < 1e-10);
        }

        #[test]
        fn flow_and_assignment_agree_on_uniform_masses(a in atoms(3, 2), b in atoms(3, 2)) {
            let cost = cost_matrix(a.view(), b.view());
            let u = Array1::from_elem(3, 1.0 / 3.0);
            let flow = transport_cost(&cost, u.view(), u.view());
            prop_assert!((flow - brute_force(&a, &b)).abs() < 1e-10);
        }

        #[test]
        fn exact_is_a_metric(x in atoms(3, 2), y in atoms(2, 2), z in atoms(4, 2), mx in masses(3), my in masses(2), mz in masses(4)) {
            let (x, y, z) = (
                DiscreteMixture::new(x, mx).unwrap(),
                DiscreteMixture::new(y, my).unwrap(),
                DiscreteMixture::new(z, mz).unwrap(),
            );
            let d = |p: &DiscreteMixture<f64>, q: &DiscreteMixture<f64>| w2_squared_exact(p, q).unwrap();
            prop_assert!(d(&x, &x) < 1e-12);
            prop_assert!((d(&x, &y) - d(&y, &x)).abs() < 1e-10);
            prop_assert!(d(&x, &z).sqrt() <= d(&x, &y).sqrt() + d(&y, &z).sqrt() + 1e-9);
        }

        #[test]
        fn accuracy_and_mse_are_translation_invariant(c in atoms(3, 6), t in atoms(3, 6), shift in proptest::collection::vec(-10.0..10.0f64, 6)) {
            let s = Array1::from(shift);
            let (c2, t2) = (&c + &s, &t + &s);
            prop_assert_eq!(accuracy(c.view(), t.view(), 3.0).unwrap(), accuracy(c2.view(), t2.view(), 3.0).unwrap());
            prop_assert!((mse(c.view(), t.view()).unwrap() - mse(c2.view(), t2.view()).unwrap()).abs() < 1e-9);
        }
    }
}
