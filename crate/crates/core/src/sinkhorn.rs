//! Entropic optimal transport between the mixing weights and the empirical
//! measure of the data, solved by Sinkhorn row/column normalizations.
//!
//! Plans are parameterized as `π[k, i] = a_k b_i exp(f_k + g_i + log G[k, i])`,
//! where `a` are the row marginals (mixing weights), `b` the column marginals and
//! `log G` the negative cost. For the E-step, `log G[k, i] = log q_k(y_i)`, so the
//! row potentials `f` are exactly the semi-dual variables and the plan factors as
//! a posterior under the tilted weights `α_k ∝ a_k exp(f_k)`.
//!
//! Normalizations run on a rescaled kernel whose scalings are periodically
//! absorbed into the log potentials, so nothing overflows however large the costs.

use std::io::Write;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::{Dataset, MixtureModel};
use crate::scalar::{log_sum_exp, Scalar};

/// Iteration controls for the solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SinkhornSettings {
    /// Number of row+column normalization rounds (at least 1).
    pub max_iterations: usize,
    /// Stop early once the largest marginal deviation falls below this value.
    /// Zero runs every iteration.
    pub marginal_tolerance: f64,
    /// Reuse the previous E-step's row potentials as the starting point.
    pub warm_start: bool,
}

impl Default for SinkhornSettings {
    fn default() -> Self {
        Self { max_iterations: 200, marginal_tolerance: 0.0, warm_start: false }
    }
}

impl SinkhornSettings {
    pub fn with_iterations(max_iterations: usize) -> Self {
        Self { max_iterations, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::invalid("sinkhorn.max_iterations", "must be at least 1"));
        }
        if !(self.marginal_tolerance >= 0.0) {
            return Err(Error::invalid("sinkhorn.marginal_tolerance", "must be nonnegative"));
        }
        Ok(())
    }
}

/// A transport plan together with its dual potentials and solver diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling<T: Scalar> {
    /// K×n plan with total mass one.
    pub plan: Array2<T>,
    /// Row potentials `f` (the semi-dual variable `w`).
    pub row_potentials: Array1<T>,
    /// Column potentials `g`.
    pub col_potentials: Array1<T>,
    pub iterations_run: usize,
    /// Largest absolute deviation of any row or column sum from its target.
    pub marginal_error: T,
}

#[derive(Serialize)]
struct CouplingDiagnostics {
    row_potentials: Vec<f64>,
    col_potentials: Vec<f64>,
    iterations_run: usize,
    marginal_error: f64,
}

impl<T: Scalar> Coupling<T> {
    /// Writes the plan as CSV, one row per component.
    pub fn write_plan_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
        for row in self.plan.outer_iter() {
            w.write_record(row.iter().map(|v| format!("{:e}", v.as_f64())))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Potentials and diagnostics as a JSON document.
    pub fn diagnostics_json(&self) -> String {
        let doc = CouplingDiagnostics {
            row_potentials: self.row_potentials.iter().map(|v| v.as_f64()).collect(),
            col_potentials: self.col_potentials.iter().map(|v| v.as_f64()).collect(),
            iterations_run: self.iterations_run,
            marginal_error: self.marginal_error.as_f64(),
        };
        serde_json::to_string_pretty(&doc).expect("plain data serializes")
    }
}

// Scalings outside this band are folded into the log potentials.
const ABSORB_BOUND: f64 = 1e60;

/// General log-domain Sinkhorn solver for marginals `row_marginal` × `col_marginal`
/// and Gibbs kernel `exp(log_gibbs)`.
///
/// Starts from zero potentials, or from `initial_row` when given. Each iteration
/// normalizes rows, then columns, so column sums are exact on return.
pub fn solve<T: Scalar>(
    log_gibbs: ArrayView2<T>,
    row_marginal: ArrayView1<T>,
    col_marginal: ArrayView1<T>,
    settings: &SinkhornSettings,
    initial_row: Option<ArrayView1<T>>,
) -> Result<Coupling<T>> {
    settings.validate()?;
    let (k, n) = log_gibbs.dim();
    if k == 0 {
        return Err(Error::Empty("transport problem has no rows"));
    }
    if n == 0 {
        return Err(Error::Empty("transport problem has no columns"));
    }
    if row_marginal.len() != k {
        return Err(Error::DimensionMismatch { expected: k, got: row_marginal.len() });
    }
    if col_marginal.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: col_marginal.len() });
    }
    for ((r, c), v) in log_gibbs.indexed_iter() {
        if !v.is_finite() {
            return Err(Error::NonFiniteKernel { row: r, col: c });
        }
    }
    if row_marginal.iter().chain(col_marginal.iter()).any(|m| !(*m > T::zero()) || !m.is_finite()) {
        return Err(Error::invalid("marginals", "entries must be positive and finite"));
    }

    let log_a = row_marginal.mapv(|v| v.ln());
    let log_b = col_marginal.mapv(|v| v.ln());
    let mut f = Array1::<T>::zeros(k);
    let mut g = Array1::<T>::zeros(n);
    let mut state = Scaled::new(k, n);

    if let Some(init) = initial_row {
        if init.len() != k {
            return Err(Error::DimensionMismatch { expected: k, got: init.len() });
        }
        f.assign(&init);
        exact_col_update(log_gibbs, &log_a, &f, &mut g);
    }
    state.rebuild(log_gibbs, &log_a, &log_b, &f, &g);

    let bound = T::c(ABSORB_BOUND);
    let tol = T::c(settings.marginal_tolerance);
    // Column sums are exact right after a column update, so the row residual
    // computed at the top of the next pass is the full marginal error.
    let mut cols_exact = initial_row.is_some();
    let mut row_sums = Array1::<T>::zeros(k);
    let mut col_sums = Array1::<T>::zeros(n);
    let mut iterations = 0;
    while iterations < settings.max_iterations {
        let mut needs_exact_row = false;
        for r in 0..k {
            let s: T = state.kernel.row(r).iter().zip(state.v.iter()).map(|(&kv, &v)| kv * v).sum();
            if !(s > T::min_positive_value()) || !s.is_finite() {
                needs_exact_row = true;
                break;
            }
            row_sums[r] = s;
        }
        if cols_exact && !needs_exact_row && tol > T::zero() {
            let residual = (0..k).fold(T::zero(), |m, r| m.max((state.u[r] * row_sums[r] - row_marginal[r]).abs()));
            if residual < tol {
                break;
            }
        }
        iterations += 1;
        if needs_exact_row {
            state.absorb(&mut f, &mut g);
            exact_row_update(log_gibbs, &log_b, &mut f, &g);
            state.rebuild(log_gibbs, &log_a, &log_b, &f, &g);
        } else {
            for r in 0..k {
                state.u[r] = row_marginal[r] / row_sums[r];
            }
        }
        col_sums.fill(T::zero());
        for r in 0..k {
            let u = state.u[r];
            col_sums.zip_mut_with(&state.kernel.row(r), |acc, &kv| *acc = *acc + kv * u);
        }
        let mut needs_exact_col = false;
        for i in 0..n {
            let s = col_sums[i];
            if !(s > T::min_positive_value()) || !s.is_finite() {
                needs_exact_col = true;
                break;
            }
            state.v[i] = col_marginal[i] / s;
        }
        if needs_exact_col {
            state.absorb(&mut f, &mut g);
            exact_col_update(log_gibbs, &log_a, &f, &mut g);
            state.rebuild(log_gibbs, &log_a, &log_b, &f, &g);
        } else if state.out_of_band(bound) {
            state.absorb(&mut f, &mut g);
            state.rebuild(log_gibbs, &log_a, &log_b, &f, &g);
        }
        cols_exact = true;
    }
    state.absorb(&mut f, &mut g);
    state.rebuild(log_gibbs, &log_a, &log_b, &f, &g);
    let marginal_error = state.marginal_error(row_marginal, col_marginal);
    Ok(Coupling {
        plan: state.kernel,
        row_potentials: f,
        col_potentials: g,
        iterations_run: iterations,
        marginal_error,
    })
}

/// Rescaled kernel `exp(log a + log b + f + g + log G)` with pending scalings `u`, `v`.
struct Scaled<T: Scalar> {
    kernel: Array2<T>,
    u: Array1<T>,
    v: Array1<T>,
}

impl<T: Scalar> Scaled<T> {
    fn new(k: usize, n: usize) -> Self {
        Self { kernel: Array2::zeros((k, n)), u: Array1::ones(k), v: Array1::ones(n) }
    }

    fn rebuild(
        &mut self,
        log_gibbs: ArrayView2<T>,
        log_a: &Array1<T>,
        log_b: &Array1<T>,
        f: &Array1<T>,
        g: &Array1<T>,
    ) {
        for ((r, c), out) in self.kernel.indexed_iter_mut() {
            *out = (log_a[r] + log_b[c] + f[r] + g[c] + log_gibbs[[r, c]]).exp();
        }
        self.u.fill(T::one());
        self.v.fill(T::one());
    }

    fn absorb(&mut self, f: &mut Array1<T>, g: &mut Array1<T>) {
        for (fr, &u) in f.iter_mut().zip(self.u.iter()) {
            *fr = *fr + u.ln();
        }
        for (gc, &v) in g.iter_mut().zip(self.v.iter()) {
            *gc = *gc + v.ln();
        }
        self.u.fill(T::one());
        self.v.fill(T::one());
    }

    fn out_of_band(&self, bound: T) -> bool {
        let lo = bound.recip();
        self.u.iter().chain(self.v.iter()).any(|&s| s > bound || s < lo)
    }

    fn marginal_error(&self, rows: ArrayView1<T>, cols: ArrayView1<T>) -> T {
        let (k, n) = self.kernel.dim();
        let mut worst = T::zero();
        let mut col_sums = Array1::<T>::zeros(n);
        for r in 0..k {
            let mut row_sum = T::zero();
            for c in 0..n {
                let p = self.kernel[[r, c]] * self.u[r] * self.v[c];
                row_sum = row_sum + p;
                col_sums[c] = col_sums[c] + p;
            }
            worst = worst.max((row_sum - rows[r]).abs());
        }
        for c in 0..n {
            worst = worst.max((col_sums[c] - cols[c]).abs());
        }
        worst
    }
}

fn exact_row_update<T: Scalar>(
    log_gibbs: ArrayView2<T>,
    log_b: &Array1<T>,
    f: &mut Array1<T>,
    g: &Array1<T>,
) {
    for (r, row) in log_gibbs.outer_iter().enumerate() {
        let lse = log_sum_exp(row.iter().zip(log_b.iter()).zip(g.iter()).map(|((&l, &b), &gc)| l + b + gc));
        f[r] = -lse;
    }
}

fn exact_col_update<T: Scalar>(
    log_gibbs: ArrayView2<T>,
    log_a: &Array1<T>,
    f: &Array1<T>,
    g: &mut Array1<T>,
) {
    for (c, col) in log_gibbs.axis_iter(Axis(1)).enumerate() {
        let lse = log_sum_exp(col.iter().zip(log_a.iter()).zip(f.iter()).map(|((&l, &a), &fr)| l + a + fr));
        g[c] = -lse;
    }
}

fn check_simplex<T: Scalar>(weights: ArrayView1<T>) -> Result<()> {
    let total: T = weights.sum();
    let tol = T::c(1e-10).max(T::epsilon() * T::from_usize_lossy(4 * weights.len()));
    if (total - T::one()).abs() > tol {
        return Err(Error::invalid("weights", format!("sum to {total}, expected 1")));
    }
    Ok(())
}

/// Constrained E-step: entropic transport between `weights` and the uniform
/// empirical measure, with `log_kernel[k, i] = log(weights_k q_k(y_i))`.
pub fn sinkhorn_estep<T: Scalar>(
    log_kernel: ArrayView2<T>,
    weights: ArrayView1<T>,
    settings: &SinkhornSettings,
) -> Result<Coupling<T>> {
    sinkhorn_estep_from(log_kernel, weights, settings, None)
}

/// As [`sinkhorn_estep`], optionally warm-started from previous row potentials.
pub fn sinkhorn_estep_from<T: Scalar>(
    log_kernel: ArrayView2<T>,
    weights: ArrayView1<T>,
    settings: &SinkhornSettings,
    initial_row: Option<ArrayView1<T>>,
) -> Result<Coupling<T>> {
    let (k, n) = log_kernel.dim();
    if k == 0 || n == 0 {
        return Err(Error::Empty("E-step needs at least one component and one point"));
    }
    if weights.len() != k {
        return Err(Error::DimensionMismatch { expected: k, got: weights.len() });
    }
    check_simplex(weights)?;
    let mut log_gibbs = log_kernel.to_owned();
    for (mut row, &w) in log_gibbs.outer_iter_mut().zip(weights.iter()) {
        let lw = w.ln();
        row.mapv_inplace(|v| v - lw);
    }
    let uniform = Array1::from_elem(n, T::one() / T::from_usize_lossy(n));
    solve(log_gibbs.view(), weights, uniform.view(), settings, initial_row)
}

/// Tilted weights `α_k ∝ weights_k exp(f_k)` from the coupling's row potentials.
pub fn tilted_weights<T: Scalar>(coupling: &Coupling<T>, weights: ArrayView1<T>) -> Array1<T> {
    let logits: Array1<T> = coupling
        .row_potentials
        .iter()
        .zip(weights.iter())
        .map(|(&f, &w)| f + w.ln())
        .collect();
    let lse = log_sum_exp(logits.iter().copied());
    logits.mapv(|v| (v - lse).exp())
}

/// Semi-dual objective `Σ_k w_k a_k − (1/n) Σ_i log Σ_k exp(w_k + log_kernel[k, i])`.
///
/// Concave in `w`; its maximum is the empirical entropic loss.
pub fn semi_dual_value<T: Scalar>(
    log_kernel: ArrayView2<T>,
    weights: ArrayView1<T>,
    row_potentials: ArrayView1<T>,
) -> T {
    let n = log_kernel.ncols();
    let linear: T = row_potentials.iter().zip(weights.iter()).map(|(&w, &a)| w * a).sum();
    let total: T = log_kernel
        .axis_iter(Axis(1))
        .map(|col| log_sum_exp(col.iter().zip(row_potentials.iter()).map(|(&l, &w)| l + w)))
        .sum();
    linear - total / T::from_usize_lossy(n)
}

/// Empirical entropic-OT loss of `model` on `data`, evaluated through the semi-dual
/// at the solver's row potentials.
pub fn empirical_entropic_loss<T: Scalar>(
    model: &MixtureModel<T>,
    data: &Dataset<T>,
    settings: &SinkhornSettings,
) -> Result<T> {
    let kernel = model.log_joint_kernel(data)?;
    let coupling = sinkhorn_estep(kernel.view(), model.weights(), settings)?;
    Ok(semi_dual_value(kernel.view(), model.weights(), coupling.row_potentials.view()))
}
