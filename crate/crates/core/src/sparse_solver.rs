//! ℓ1 machinery and least-squares baselines.
//!
//! Basis pursuit denoise, `min ‖c‖₁ s.t. ‖Ac − b‖₂ ≤ σ`, is solved by
//! root-finding on the Pareto curve `φ(τ) = ‖A c_τ − b‖₂` where `c_τ` solves
//! the LASSO problem `min ‖Ac − b‖₂ s.t. ‖c‖₁ ≤ τ`. Each LASSO is solved by
//! spectral projected gradient with a non-monotone line search; the LASSO
//! dual supplies both the stopping gap and `φ'(τ) = −‖Aᵀr‖∞ / ‖r‖₂`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::linalg::{dot, norm1, norm2, norm_inf, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BpdnConfig {
    /// Residual bound; zero means basis pursuit.
    pub sigma: f64,
    pub max_outer: usize,
    /// Projected-gradient iterations allowed per LASSO solve.
    pub max_inner: usize,
    /// Relative tolerance on `|‖r‖ − σ|`.
    pub tol_residual: f64,
    /// Relative duality-gap tolerance for a LASSO solve.
    pub tol_gap: f64,
}

impl Default for BpdnConfig {
    fn default() -> Self {
        Self {
            sigma: 0.0,
            max_outer: 40,
            max_inner: 10_000,
            tol_residual: 1e-6,
            tol_gap: 1e-9,
        }
    }
}

impl BpdnConfig {
    pub fn with_sigma(sigma: f64) -> Self {
        Self {
            sigma,
            ..Self::default()
        }
    }
}

/// Euclidean projection onto `{w : ‖w‖₁ ≤ τ}` by soft-thresholding at the
/// level found from the sorted magnitudes.
pub fn project_l1_ball(v: &[f64], tau: f64) -> Vec<f64> {
    assert!(tau >= 0.0, "ball radius must be non-negative");
    if norm1(v) <= tau {
        return v.to_vec();
    }
    if tau == 0.0 {
        return vec![0.0; v.len()];
    }
    let mut mags: Vec<f64> = v.iter().map(|x| x.abs()).filter(|&x| x > 0.0).collect();
    mags.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut csum = 0.0;
    let mut theta = 0.0;
    for (k, &u) in mags.iter().enumerate() {
        csum += u;
        let t = (csum - tau) / (k + 1) as f64;
        if u > t {
            theta = t;
        } else {
            break;
        }
    }
    v.iter()
        .map(|&x| x.signum() * (x.abs() - theta).max(0.0))
        .collect()
}

#[derive(Clone, Debug)]
pub struct LassoSolution {
    pub x: Vec<f64>,
    pub residual_norm: f64,
    /// `‖Aᵀr‖∞`, the dual variable of the ℓ1 constraint.
    pub dual_norm: f64,
    pub gap: f64,
    pub rel_gap: f64,
    pub iterations: usize,
    pub converged: bool,
}

struct SpgState {
    x: Vec<f64>,
    r: Vec<f64>,
    g: Vec<f64>,
    f: f64,
    step: f64,
}

const STEP_MIN: f64 = 1e-16;
const STEP_MAX: f64 = 1e5;
const NONMONOTONE_MEMORY: usize = 3;
const ARMIJO: f64 = 1e-4;

impl SpgState {
    fn new(a: &Matrix, b: &[f64], x: Vec<f64>, tau: f64) -> Self {
        let x = project_l1_ball(&x, tau);
        let ax = a.matvec(&x);
        let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
        let g: Vec<f64> = a.tr_matvec(&r).into_iter().map(|v| -v).collect();
        let f = 0.5 * dot(&r, &r);
        let probe = project_l1_ball(
            &x.iter().zip(&g).map(|(xi, gi)| xi - gi).collect::<Vec<_>>(),
            tau,
        );
        let dx = norm_inf(&probe.iter().zip(&x).map(|(p, q)| p - q).collect::<Vec<_>>());
        let step = if dx > 0.0 { (1.0 / dx).clamp(STEP_MIN, STEP_MAX) } else { 1.0 };
        Self { x, r, g, f, step }
    }

    /// `(‖Aᵀr‖∞, gap, gap / max(1, f))`. The gap `r·r − b·r + τ‖Aᵀr‖∞` is
    /// evaluated as `x·g + τ‖g‖∞`, which is the same quantity without the
    /// cancellation between `r·r` and `b·r` at small residuals.
    fn dual(&self, tau: f64) -> (f64, f64, f64) {
        let lambda = norm_inf(&self.g);
        let gap = (dot(&self.x, &self.g) + tau * lambda).max(0.0);
        (lambda, gap, gap / self.f.max(1.0))
    }
}

/// Spectral projected gradient on the LASSO, stopping once the relative gap
/// satisfies `stop(gap, rel_gap, ‖r‖)` or `max_iters` is spent.
fn spg_lasso(
    a: &Matrix,
    b: &[f64],
    tau: f64,
    state: &mut SpgState,
    max_iters: usize,
    mut stop: impl FnMut(f64, f64, f64) -> bool,
) -> (usize, bool) {
    let mut history = [state.f; NONMONOTONE_MEMORY];
    let mut slot = 0;
    for iter in 0..=max_iters {
        let (_, gap, rel_gap) = state.dual(tau);
        if stop(gap, rel_gap, (2.0 * state.f).sqrt()) {
            return (iter, true);
        }
        if iter == max_iters {
            return (iter, false);
        }
        let f_max = history.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut alpha = 1.0;
        let (x_new, r_new, f_new) = loop {
            let trial: Vec<f64> = state
                .x
                .iter()
                .zip(&state.g)
                .map(|(xi, gi)| xi - alpha * state.step * gi)
                .collect();
            let x_new = project_l1_ball(&trial, tau);
            let gtd: f64 = state
                .g
                .iter()
                .zip(x_new.iter().zip(&state.x))
                .map(|(gi, (xn, xo))| gi * (xn - xo))
                .sum();
            let ax = a.matvec(&x_new);
            let r_new: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
            let f_new = 0.5 * dot(&r_new, &r_new);
            if f_new <= f_max + ARMIJO * gtd || alpha < 1e-10 || gtd >= 0.0 {
                break (x_new, r_new, f_new);
            }
            alpha *= 0.5;
        };
        let g_new: Vec<f64> = a.tr_matvec(&r_new).into_iter().map(|v| -v).collect();
        let (mut sts, mut sty) = (0.0, 0.0);
        for i in 0..x_new.len() {
            let s = x_new[i] - state.x[i];
            let y = g_new[i] - state.g[i];
            sts += s * s;
            sty += s * y;
        }
        state.step = if sty <= 0.0 {
            STEP_MAX
        } else {
            (sts / sty).clamp(STEP_MIN, STEP_MAX)
        };
        let stalled = sts == 0.0;
        state.x = x_new;
        state.r = r_new;
        state.g = g_new;
        state.f = f_new;
        slot = (slot + 1) % NONMONOTONE_MEMORY;
        history[slot] = f_new;
        if stalled {
            let (_, gap, rel_gap) = state.dual(tau);
            return (iter + 1, stop(gap, rel_gap, (2.0 * state.f).sqrt()));
        }
    }
    unreachable!()
}

fn lasso_solution(state: SpgState, tau: f64, iterations: usize, converged: bool) -> LassoSolution {
    let (dual_norm, gap, rel_gap) = state.dual(tau);
    LassoSolution {
        residual_norm: norm2(&state.r),
        x: state.x,
        dual_norm,
        gap,
        rel_gap,
        iterations,
        converged,
    }
}

/// `min ‖Ac − b‖₂ s.t. ‖c‖₁ ≤ τ`, stopping at relative duality gap
/// `cfg.tol_gap` or after `cfg.max_inner` iterations (flagged).
pub fn solve_lasso(a: &Matrix, b: &[f64], tau: f64, cfg: &BpdnConfig) -> LassoSolution {
    assert_eq!(a.rows(), b.len(), "row count mismatch");
    assert!(tau >= 0.0, "ball radius must be non-negative");
    let mut state = SpgState::new(a, b, vec![0.0; a.cols()], tau);
    let tol = cfg.tol_gap;
    let (iters, ok) = spg_lasso(a, b, tau, &mut state, cfg.max_inner, |_, rel, _| rel <= tol);
    lasso_solution(state, tau, iters, ok)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParetoPoint {
    pub tau: f64,
    pub residual_norm: f64,
}

#[derive(Clone, Debug)]
pub struct BpdnSolution {
    pub x: Vec<f64>,
    pub residual_norm: f64,
    pub tau: f64,
    pub converged: bool,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    /// `(τ, ‖r‖)` after each LASSO solve.
    pub pareto: Vec<ParetoPoint>,
}

/// Basis pursuit denoise by Newton root-finding on the Pareto curve.
///
/// The residual tolerance is `max(tol_residual · σ, 1e-10 · ‖b‖)`; for `σ = 0`
/// (basis pursuit) the solve succeeds once `‖r‖ ≤ 1e-10 · ‖b‖`.
pub fn solve_bpdn(a: &Matrix, b: &[f64], cfg: &BpdnConfig) -> BpdnSolution {
    assert_eq!(a.rows(), b.len(), "row count mismatch");
    assert!(cfg.sigma >= 0.0, "sigma must be non-negative");
    let bnorm = norm2(b);
    let zero = |converged| BpdnSolution {
        x: vec![0.0; a.cols()],
        residual_norm: bnorm,
        tau: 0.0,
        converged,
        outer_iterations: 0,
        inner_iterations: 0,
        pareto: vec![ParetoPoint {
            tau: 0.0,
            residual_norm: bnorm,
        }],
    };
    if bnorm == 0.0 || cfg.sigma >= bnorm {
        return zero(true);
    }
    let target = cfg.sigma;
    let floor = 1e-10 * bnorm;
    let tol_r = cfg.tol_residual;
    let done = |rnorm: f64, rel_gap: f64| {
        if target <= floor {
            rnorm <= floor
        } else {
            (rnorm - target).abs() <= (tol_r * target).max(floor) && rel_gap <= tol_r.max(cfg.tol_gap)
        }
    };

    let mut tau = 0.0;
    let mut state = SpgState::new(a, b, vec![0.0; a.cols()], tau);
    let mut pareto = vec![ParetoPoint {
        tau,
        residual_norm: bnorm,
    }];
    let mut inner_total = 0;
    let mut converged = false;
    let mut outer = 0;
    while outer < cfg.max_outer {
        let (lambda, gap, rel_gap) = state.dual(tau);
        let rnorm = norm2(&state.r);
        if outer > 0 && done(rnorm, rel_gap) {
            converged = true;
            break;
        }
        if lambda == 0.0 {
            // r is orthogonal to range(A): no τ can shrink the residual.
            break;
        }
        outer += 1;
        // For basis pursuit, step to the dual lower bound bᵀr/λ on τ_BP. It
        // equals the Newton step for an exact LASSO solve and never overshoots
        // for an inexact one; past τ_BP the LASSO minimizer is no longer
        // ℓ1-minimal. For σ > 0 an overshoot is undone by the next step.
        let newton = (rnorm - target) * rnorm;
        let step = if target <= floor { (newton - gap).max(0.0) } else { newton };
        tau = (tau + step / lambda).max(0.0);
        state = SpgState::new(a, b, std::mem::take(&mut state.x), tau);
        let tol_gap = cfg.tol_gap;
        let (iters, _) = spg_lasso(a, b, tau, &mut state, cfg.max_inner, |gap, rel, rn| {
            // Loose solves far from the root. Near it the gap must be small
            // enough to resolve ‖r‖ to within the residual tolerance.
            let f = 0.5 * rn * rn;
            let far = 0.1 * (f - 0.5 * target * target).abs();
            let near = (tol_gap * f.max(1.0)).min(0.1 * tol_r * target * rn);
            done(rn, rel) || gap <= far.max(near)
        });
        inner_total += iters;
        pareto.push(ParetoPoint {
            tau,
            residual_norm: norm2(&state.r),
        });
        if target <= floor && norm2(&state.r) > floor {
            // Every τ so far is a lower bound on the optimum, so an exactly
            // feasible point with ‖x‖₁ ≤ τ(1 + tol) is optimal to tolerance.
            if let Some(x) = polish_support(a, b, &state.x, floor, tau * (1.0 + tol_r)) {
                tau = norm1(&x);
                state = SpgState::new(a, b, x, tau);
                converged = true;
                break;
            }
        }
    }
    if !converged {
        let (_, _, rel_gap) = state.dual(tau);
        converged = done(norm2(&state.r), rel_gap);
    }
    BpdnSolution {
        residual_norm: norm2(&state.r),
        x: state.x,
        tau,
        converged,
        outer_iterations: outer,
        inner_iterations: inner_total,
        pareto,
    }
}

/// Least squares on the numerical support of `x`, accepted when it reaches
/// the residual `floor` within the ℓ1 budget.
fn polish_support(a: &Matrix, b: &[f64], x: &[f64], floor: f64, budget: f64) -> Option<Vec<f64>> {
    let xmax = norm_inf(x);
    if xmax == 0.0 {
        return None;
    }
    [1e-8, 1e-6, 1e-4].iter().find_map(|&rel| {
        let support: Vec<usize> = (0..x.len()).filter(|&i| x[i].abs() > rel * xmax).collect();
        if support.len() > a.rows() {
            return None;
        }
        let ls = least_squares(&a.select_columns(&support), b);
        if ls.rank < support.len() {
            return None;
        }
        let mut full = vec![0.0; x.len()];
        for (&i, &v) in support.iter().zip(&ls.x) {
            full[i] = v;
        }
        let ax = a.matvec(&full);
        let r = norm2(&b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect::<Vec<_>>());
        (r <= floor && norm1(&full) <= budget).then_some(full)
    })
}

#[derive(Clone, Debug)]
pub struct LeastSquares {
    pub x: Vec<f64>,
    pub rank: usize,
}

/// Minimum-norm least squares through a truncated SVD.
pub fn least_squares(a: &Matrix, b: &[f64]) -> LeastSquares {
    assert_eq!(a.rows(), b.len(), "row count mismatch");
    if a.cols() == 0 {
        return LeastSquares { x: Vec::new(), rank: 0 };
    }
    if a.rows() == 0 {
        return LeastSquares {
            x: vec![0.0; a.cols()],
            rank: 0,
        };
    }
    let svd = a.to_nalgebra().svd(true, true);
    let smax = svd.singular_values.max();
    let eps = smax * a.rows().max(a.cols()) as f64 * f64::EPSILON;
    let rank = svd.singular_values.iter().filter(|&&s| s > eps).count();
    let x = if rank == 0 {
        vec![0.0; a.cols()]
    } else {
        svd.solve(&DVector::from_column_slice(b), eps)
            .expect("U and V were computed")
            .as_slice()
            .to_vec()
    };
    LeastSquares { x, rank }
}

pub fn min_norm_least_squares(a: &Matrix, b: &[f64]) -> Vec<f64> {
    least_squares(a, b).x
}

/// Sequentially thresholded least squares: alternate least squares on the
/// active columns with zeroing every coefficient below `lambda`, until the
/// active set stops changing.
pub fn sequential_threshold_ls(a: &Matrix, b: &[f64], lambda: f64, max_iters: usize) -> Vec<f64> {
    assert!(lambda > 0.0, "threshold must be positive");
    let mut c = min_norm_least_squares(a, b);
    let mut active: Vec<usize> = (0..a.cols()).collect();
    for _ in 0..max_iters {
        let keep: Vec<usize> = active
            .iter()
            .copied()
            .filter(|&i| c[i].abs() >= lambda)
            .collect();
        if keep.is_empty() {
            return vec![0.0; a.cols()];
        }
        if keep == active {
            break;
        }
        let sub = min_norm_least_squares(&a.select_columns(&keep), b);
        c = vec![0.0; a.cols()];
        for (&i, v) in keep.iter().zip(sub) {
            c[i] = v;
        }
        active = keep;
    }
    c
}

#[derive(Clone, Debug)]
pub struct DebiasResult {
    pub coefficients: Vec<f64>,
    /// False when the restricted matrix was rank deficient and the
    /// minimum-norm solution was used instead.
    pub full_rank: bool,
}

/// Ordinary least squares on the columns of an identified support.
pub fn debias(a_restricted: &Matrix, b: &[f64]) -> DebiasResult {
    let ls = least_squares(a_restricted, b);
    DebiasResult {
        full_rank: ls.rank == a_restricted.cols(),
        coefficients: ls.x,
    }
}

/// `{i : |c_i| > τ_supp · ‖c‖∞}`.
pub fn support_of(c: &[f64], tau_supp: f64) -> Vec<usize> {
    let cmax = norm_inf(c);
    if cmax == 0.0 {
        return Vec::new();
    }
    let cut = tau_supp * cmax;
    c.iter()
        .enumerate()
        .filter(|(_, v)| v.abs() > cut)
        .map(|(i, _)| i)
        .collect()
}
