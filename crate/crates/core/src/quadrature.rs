//! One-dimensional quadrature against Gaussian weights.
//!
//! Two rules are provided. Adaptive Gauss–Kronrod (7/15) is the default: the
//! population integrands contain a logistic transition whose width shrinks
//! like `1/θ`, which fixed Gauss–Hermite rules resolve poorly once `|θ|` grows
//! past a few units. Gauss–Hermite is kept for smooth integrands and for
//! cross-checks.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Half-width, in standard deviations, of the window integrated around each
/// Gaussian component. The neglected tail mass is below `1e-37`.
pub const WINDOW: f64 = 13.0;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];
// Gauss weights for the odd-indexed Kronrod nodes.
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum QuadratureRule {
    /// Adaptive Gauss–Kronrod with an absolute error target.
    Adaptive { tolerance: f64 },
    /// Fixed Gauss–Hermite rule applied per Gaussian component.
    GaussHermite { nodes: usize },
}

impl Default for QuadratureRule {
    fn default() -> Self {
        QuadratureRule::Adaptive { tolerance: 1e-13 }
    }
}

const MAX_DEPTH: u32 = 40;

fn kronrod_panel<T: Scalar, F: Fn(T) -> T>(f: &F, a: T, b: T) -> (T, T) {
    let half = (b - a) * T::c(0.5);
    let center = (a + b) * T::c(0.5);
    let fc = f(center);
    let mut kronrod = fc * T::c(WGK[7]);
    let mut gauss = fc * T::c(WG[3]);
    for j in 0..7 {
        let dx = half * T::c(XGK[j]);
        let pair = f(center - dx) + f(center + dx);
        kronrod = kronrod + pair * T::c(WGK[j]);
        if j % 2 == 1 {
            gauss = gauss + pair * T::c(WG[j / 2]);
        }
    }
    (kronrod * half, ((kronrod - gauss) * half).abs())
}

fn adapt<T: Scalar, F: Fn(T) -> T>(f: &F, a: T, b: T, whole: (T, T), tol: T, depth: u32) -> T {
    let (value, err) = whole;
    if err <= tol || depth >= MAX_DEPTH {
        return value;
    }
    let mid = (a + b) * T::c(0.5);
    if mid <= a || mid >= b {
        return value;
    }
    let left = kronrod_panel(f, a, mid);
    let right = kronrod_panel(f, mid, b);
    let half_tol = tol * T::c(0.5);
    adapt(f, a, mid, left, half_tol, depth + 1) + adapt(f, mid, b, right, half_tol, depth + 1)
}

/// Adaptive Gauss–Kronrod integral of `f` over `[a, b]` with absolute error
/// target `tol`.
pub fn integrate<T: Scalar, F: Fn(T) -> T>(f: F, a: T, b: T, tol: T) -> T {
    if a == b {
        return T::zero();
    }
    let whole = kronrod_panel(&f, a, b);
    adapt(&f, a, b, whole, tol, 0)
}

/// Like [`integrate`], but splits `[a, b]` at the given interior points first.
pub fn integrate_with_breaks<T: Scalar, F: Fn(T) -> T>(f: F, a: T, b: T, breaks: &[T], tol: T) -> T {
    let mut cuts: Vec<T> = breaks.iter().copied().filter(|&x| x > a && x < b).collect();
    cuts.sort_by(|x, y| x.partial_cmp(y).expect("finite breakpoints"));
    let mut edges = Vec::with_capacity(cuts.len() + 2);
    edges.push(a);
    edges.extend(cuts);
    edges.push(b);
    let pieces = T::from_usize_lossy(edges.len() - 1);
    edges
        .windows(2)
        .map(|w| integrate(&f, w[0], w[1], tol / pieces))
        .sum()
}

/// Nodes and weights of the `n`-point Gauss–Hermite rule for the weight
/// `exp(-x²)`, ordered from largest to smallest node.
///
/// Nodes start from the eigenvalues of the Jacobi matrix and are polished by
/// Newton steps on the orthonormal recurrence, which also yields the weights.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n > 0, "rule needs at least one node");
    let jacobi = ndarray::Array2::from_shape_fn((n, n), |(i, j)| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64 / 2.0).sqrt()
        } else {
            0.0
        }
    });
    let (values, _) = crate::linalg::symmetric_eigen(jacobi.view());
    let mut x: Vec<f64> = values.to_vec();
    x.sort_by(|a, b| b.partial_cmp(a).expect("finite eigenvalues"));
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let nf = n as f64;
    let mut w = vec![0.0; n];
    for (z, wi) in x.iter_mut().zip(w.iter_mut()) {
        let mut pp = 0.0;
        for _ in 0..8 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = *z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let step = p1 / pp;
            *z -= step;
            if step.abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        *wi = 2.0 / (pp * pp);
    }
    (x, w)
}

/// Expectation of `f(Y)` for `Y ~ N(mean, 1)`.
///
/// `breaks` marks points where `f` changes quickly; only the adaptive rule
/// uses them.
pub fn gaussian_expectation<T: Scalar, F: Fn(T) -> T>(
    f: F,
    mean: T,
    breaks: &[T],
    rule: &QuadratureRule,
    hermite: Option<&(Vec<f64>, Vec<f64>)>,
) -> T {
    match rule {
        QuadratureRule::Adaptive { tolerance } => {
            let g = |y: T| {
                let z = y - mean;
                f(y) * T::c(INV_SQRT_2PI) * (-(z * z) * T::c(0.5)).exp()
            };
            let window = T::c(WINDOW);
            integrate_with_breaks(g, mean - window, mean + window, breaks, T::c(*tolerance))
        }
        QuadratureRule::GaussHermite { nodes } => {
            let owned;
            let (x, w) = match hermite {
                Some(rule) => rule,
                None => {
                    owned = gauss_hermite(*nodes);
                    &owned
                }
            };
            let scale = T::c(std::f64::consts::SQRT_2);
            let norm = T::c(std::f64::consts::PI.sqrt().recip());
            x.iter()
                .zip(w.iter())
                .map(|(&xi, &wi)| T::c(wi) * f(mean + scale * T::c(xi)))
                .sum::<T>()
                * norm
        }
    }
}
