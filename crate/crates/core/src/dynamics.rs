//! Test systems, the generic quadratic vector field, an adaptive
//! Dormand–Prince integrator, and burst generation from random initial
//! conditions.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dictionary::{num_columns, Basis, BasisIndex, Frame};
use crate::linalg::Matrix;
use crate::rng::stream_rng;
use crate::{Error, Result};

/// Coefficients of a quadratic vector field, one sparse column per component.
///
/// Column `j` lists `(term, coefficient)` pairs in dictionary order with
/// zeros omitted, which keeps `n = 1000` systems (501501 terms per
/// component) cheap to hold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticModel {
    n: usize,
    terms: Vec<Vec<(BasisIndex, f64)>>,
    pub basis: Basis,
    pub frame: Frame,
}

impl QuadraticModel {
    /// Builds a monomial, original-frame model. Repeated terms are summed and
    /// `Quad(j, i)` is folded onto `Quad(i, j)`.
    pub fn from_terms(n: usize, columns: Vec<Vec<(BasisIndex, f64)>>) -> Result<Self> {
        if columns.len() != n {
            return Err(Error::Shape(format!(
                "{} coefficient columns for n = {n}",
                columns.len()
            )));
        }
        let terms = columns
            .into_iter()
            .map(|col| {
                let mut acc: BTreeMap<BasisIndex, f64> = BTreeMap::new();
                for (idx, v) in col {
                    let idx = match idx {
                        BasisIndex::Quad(i, j) => BasisIndex::quad(i, j),
                        other => other,
                    };
                    let in_range = match idx {
                        BasisIndex::Const => true,
                        BasisIndex::Lin(i) => i < n,
                        BasisIndex::Quad(_, j) => j < n,
                    };
                    if !in_range {
                        return Err(Error::InvalidArgument(format!(
                            "term {idx} out of range for n = {n}"
                        )));
                    }
                    *acc.entry(idx).or_insert(0.0) += v;
                }
                Ok(acc.into_iter().filter(|(_, v)| *v != 0.0).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            n,
            terms,
            basis: Basis::Monomial,
            frame: Frame::Original,
        })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            terms: vec![Vec::new(); n],
            basis: Basis::Monomial,
            frame: Frame::Original,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn num_columns(&self) -> usize {
        num_columns(self.n)
    }

    pub fn terms(&self, component: usize) -> &[(BasisIndex, f64)] {
        &self.terms[component]
    }

    pub fn support(&self, component: usize) -> Vec<BasisIndex> {
        self.terms[component].iter().map(|&(b, _)| b).collect()
    }

    pub fn sparsity(&self, component: usize) -> usize {
        self.terms[component].len()
    }

    pub fn coefficient(&self, component: usize, idx: BasisIndex) -> f64 {
        self.terms[component]
            .iter()
            .find(|(b, _)| *b == idx)
            .map_or(0.0, |&(_, v)| v)
    }

    /// Coefficients of `component` over an arbitrary column list.
    pub fn column_on(&self, component: usize, columns: &[BasisIndex]) -> Vec<f64> {
        columns
            .iter()
            .map(|&c| self.coefficient(component, c))
            .collect()
    }

    /// Full length-`N` coefficient column.
    pub fn dense_column(&self, component: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.num_columns()];
        for &(b, v) in &self.terms[component] {
            out[b.position(self.n)] = v;
        }
        out
    }
}

/// Evaluates a monomial, original-frame model at `x`.
pub fn quadratic_rhs(model: &QuadraticModel, x: &[f64]) -> Result<Vec<f64>> {
    if model.basis != Basis::Monomial || model.frame != Frame::Original {
        return Err(Error::InvalidArgument(
            "quadratic_rhs needs a monomial model in the original frame".into(),
        ));
    }
    if x.len() != model.n {
        return Err(Error::Shape(format!(
            "state of length {} for model of dimension {}",
            x.len(),
            model.n
        )));
    }
    Ok(model
        .terms
        .iter()
        .map(|col| {
            col.iter()
                .map(|&(b, v)| {
                    v * match b {
                        BasisIndex::Const => 1.0,
                        BasisIndex::Lin(i) => x[i],
                        BasisIndex::Quad(i, j) => x[i] * x[j],
                    }
                })
                .sum()
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SystemKind {
    Lorenz96 { forcing: f64 },
    Fisher { gamma: f64 },
    Custom { model: QuadraticModel },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub kind: SystemKind,
    pub n: usize,
}

impl SystemSpec {
    pub fn lorenz96(n: usize, forcing: f64) -> Result<Self> {
        if n <= 3 {
            return Err(Error::InvalidSystem(format!(
                "Lorenz 96 needs n > 3, got {n}"
            )));
        }
        Ok(Self {
            kind: SystemKind::Lorenz96 { forcing },
            n,
        })
    }

    pub fn fisher(n: usize, gamma: f64) -> Result<Self> {
        if n < 3 {
            return Err(Error::InvalidSystem(format!(
                "Fisher lattice needs n >= 3, got {n}"
            )));
        }
        Ok(Self {
            kind: SystemKind::Fisher { gamma },
            n,
        })
    }

    pub fn custom(model: QuadraticModel) -> Self {
        Self {
            n: model.dim(),
            kind: SystemKind::Custom { model },
        }
    }

    pub fn rhs(&self, x: &[f64]) -> Result<Vec<f64>> {
        match &self.kind {
            SystemKind::Lorenz96 { forcing } => lorenz96_rhs(x, *forcing),
            SystemKind::Fisher { gamma } => fisher_rhs(x, *gamma),
            SystemKind::Custom { model } => quadratic_rhs(model, x),
        }
    }

    fn rhs_into(&self, x: &[f64], out: &mut [f64]) {
        match &self.kind {
            SystemKind::Lorenz96 { forcing } => lorenz96_into(x, *forcing, out),
            SystemKind::Fisher { gamma } => fisher_into(x, *gamma, out),
            SystemKind::Custom { model } => {
                out.copy_from_slice(&quadratic_rhs(model, x).expect("validated model"))
            }
        }
    }
}

fn lorenz96_into(x: &[f64], forcing: f64, out: &mut [f64]) {
    let n = x.len();
    for k in 0..n {
        let km2 = x[(k + n - 2) % n];
        let km1 = x[(k + n - 1) % n];
        let kp1 = x[(k + 1) % n];
        out[k] = (kp1 - km2) * km1 - x[k] + forcing;
    }
}

fn fisher_into(x: &[f64], gamma: f64, out: &mut [f64]) {
    let n = x.len();
    for k in 0..n {
        let km1 = x[(k + n - 1) % n];
        let kp1 = x[(k + 1) % n];
        out[k] = kp1 - 2.0 * x[k] + km1 + gamma * (x[k] - x[k] * x[k]);
    }
}

/// `dx_k/dt = -x_{k-2} x_{k-1} + x_{k-1} x_{k+1} - x_k + F`, periodic.
pub fn lorenz96_rhs(x: &[f64], forcing: f64) -> Result<Vec<f64>> {
    if x.len() <= 3 {
        return Err(Error::InvalidSystem(format!(
            "Lorenz 96 needs n > 3, got {}",
            x.len()
        )));
    }
    let mut out = vec![0.0; x.len()];
    lorenz96_into(x, forcing, &mut out);
    Ok(out)
}

/// Discrete periodic Fisher–KPP: `x_{k+1} - 2x_k + x_{k-1} + γ(x_k - x_k²)`.
pub fn fisher_rhs(x: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if x.len() < 3 {
        return Err(Error::InvalidSystem(format!(
            "Fisher lattice needs n >= 3, got {}",
            x.len()
        )));
    }
    let mut out = vec![0.0; x.len()];
    fisher_into(x, gamma, &mut out);
    Ok(out)
}

/// Ground-truth coefficients of a built-in system (custom models pass through).
pub fn true_model(spec: &SystemSpec) -> QuadraticModel {
    let n = spec.n;
    let columns = match &spec.kind {
        SystemKind::Custom { model } => return model.clone(),
        SystemKind::Lorenz96 { forcing } => (0..n)
            .map(|j| {
                let (jm2, jm1, jp1) = ((j + n - 2) % n, (j + n - 1) % n, (j + 1) % n);
                vec![
                    (BasisIndex::Const, *forcing),
                    (BasisIndex::Lin(j), -1.0),
                    (BasisIndex::quad(jm2, jm1), -1.0),
                    (BasisIndex::quad(jm1, jp1), 1.0),
                ]
            })
            .collect(),
        SystemKind::Fisher { gamma } => (0..n)
            .map(|j| {
                vec![
                    (BasisIndex::Lin((j + n - 1) % n), 1.0),
                    (BasisIndex::Lin(j), -2.0 + gamma),
                    (BasisIndex::Lin((j + 1) % n), 1.0),
                    (BasisIndex::Quad(j, j), -gamma),
                ]
            })
            .collect(),
    };
    QuadraticModel::from_terms(n, columns).expect("built-in terms are in range")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rk45Options {
    /// Shared absolute and relative tolerance.
    pub tol: f64,
    pub max_steps: usize,
}

impl Default for Rk45Options {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_steps: 5_000_000,
        }
    }
}

// Dormand–Prince 5(4); the systems are autonomous so the nodes c_i are unused.
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

/// Adaptive Dormand–Prince stepper for autonomous systems. Output times are
/// hit by clipping the step, never by interpolation.
struct Stepper<'a, F> {
    rhs: F,
    opts: &'a Rk45Options,
    k: [Vec<f64>; 7],
    tmp: Vec<f64>,
    x_new: Vec<f64>,
    h: f64,
    err_prev: f64,
    steps: usize,
}

impl<'a, F: FnMut(&[f64], &mut [f64])> Stepper<'a, F> {
    fn new(rhs: F, n: usize, opts: &'a Rk45Options) -> Self {
        Self {
            rhs,
            opts,
            k: std::array::from_fn(|_| vec![0.0; n]),
            tmp: vec![0.0; n],
            x_new: vec![0.0; n],
            h: 0.0,
            err_prev: 1e-4,
            steps: 0,
        }
    }

    fn weighted_norm(&self, a: &[f64], x: &[f64], y: &[f64]) -> f64 {
        let tol = self.opts.tol;
        let s: f64 = a
            .iter()
            .zip(x.iter().zip(y))
            .map(|(e, (xi, yi))| {
                let w = tol + tol * xi.abs().max(yi.abs());
                (e / w).powi(2)
            })
            .sum();
        (s / a.len().max(1) as f64).sqrt()
    }

    fn initial_step(&mut self, x: &[f64], span: f64) -> f64 {
        (self.rhs)(x, &mut self.k[0]);
        let d0 = self.weighted_norm(x, x, x);
        let d1 = self.weighted_norm(&self.k[0], x, x);
        let h = if d0 < 1e-5 || d1 < 1e-5 {
            1e-6
        } else {
            0.01 * d0 / d1
        };
        h.min(span.abs())
    }

    /// Advances `x` (with `k[0] = f(x)` already valid) from `t` to `t_end`.
    fn advance(&mut self, x: &mut [f64], t: &mut f64, t_end: f64) -> Result<()> {
        let dir = (t_end - *t).signum();
        const SAFETY: f64 = 0.9;
        const BETA: f64 = 0.04;
        let alpha = 0.2 - 0.75 * BETA;
        let mut rejected = false;
        while (t_end - *t) * dir > 0.0 {
            if self.steps >= self.opts.max_steps {
                return Err(Error::IntegrationFailure {
                    time: *t,
                    reason: "step budget exhausted".into(),
                });
            }
            let remaining = (t_end - *t).abs();
            let clipped = self.h >= remaining;
            let h = dir * self.h.min(remaining);
            if self.h < 1e-14 * t.abs().max(1.0) {
                return Err(Error::IntegrationFailure {
                    time: *t,
                    reason: "step size underflow".into(),
                });
            }
            self.stage(x, h);
            let err = {
                let mut e = std::mem::take(&mut self.tmp);
                for i in 0..x.len() {
                    e[i] = h
                        * (E1 * self.k[0][i]
                            + E3 * self.k[2][i]
                            + E4 * self.k[3][i]
                            + E5 * self.k[4][i]
                            + E6 * self.k[5][i]
                            + E7 * self.k[6][i]);
                }
                let v = self.weighted_norm(&e, x, &self.x_new);
                self.tmp = e;
                v
            };
            self.steps += 1;
            if !err.is_finite() || self.x_new.iter().any(|v| !v.is_finite()) {
                self.h *= 0.2;
                rejected = true;
                continue;
            }
            if err <= 1.0 {
                *t = if clipped { t_end } else { *t + h };
                x.copy_from_slice(&self.x_new);
                self.k.swap(0, 6);
                let mut fac = err.max(1e-10).powf(-alpha) * self.err_prev.powf(BETA) * SAFETY;
                fac = fac.clamp(0.2, 10.0);
                if rejected {
                    fac = fac.min(1.0);
                }
                // A clipped step says nothing about the natural step length.
                if !clipped || fac < 1.0 {
                    self.h = h.abs() * fac;
                }
                self.err_prev = err.max(1e-4);
                rejected = false;
            } else {
                self.h = h.abs() * (SAFETY * err.powf(-alpha)).max(0.2);
                rejected = true;
            }
        }
        Ok(())
    }

    fn stage(&mut self, x: &[f64], h: f64) {
        let n = x.len();
        let [k1, k2, k3, k4, k5, k6, k7] = &mut self.k;
        let tmp = &mut self.tmp;
        for i in 0..n {
            tmp[i] = x[i] + h * A21 * k1[i];
        }
        (self.rhs)(tmp, k2);
        for i in 0..n {
            tmp[i] = x[i] + h * (A31 * k1[i] + A32 * k2[i]);
        }
        (self.rhs)(tmp, k3);
        for i in 0..n {
            tmp[i] = x[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        (self.rhs)(tmp, k4);
        for i in 0..n {
            tmp[i] = x[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        (self.rhs)(tmp, k5);
        for i in 0..n {
            tmp[i] = x[i]
                + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        (self.rhs)(tmp, k6);
        for i in 0..n {
            self.x_new[i] = x[i]
                + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
        }
        (self.rhs)(&self.x_new, k7);
    }
}

/// Integrates `x' = rhs(x)` and returns the `m` states at `t0 + i * dt_out`.
/// `rhs` writes `f(x)` into its second argument.
pub fn integrate_rk45<F>(
    rhs: F,
    x0: &[f64],
    t0: f64,
    dt_out: f64,
    m: usize,
    opts: &Rk45Options,
) -> Result<Matrix>
where
    F: FnMut(&[f64], &mut [f64]),
{
    if !(dt_out > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "output spacing must be positive, got {dt_out}"
        )));
    }
    if m == 0 {
        return Err(Error::InvalidArgument("need at least one output sample".into()));
    }
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tolerance must be positive, got {}",
            opts.tol
        )));
    }
    integrate_grid(rhs, x0, t0, dt_out, m, opts)
}

/// Signed-direction variant shared by forward sampling and the backward
/// offsets of fine-step differencing.
fn integrate_grid<F>(
    rhs: F,
    x0: &[f64],
    t0: f64,
    dt_out: f64,
    m: usize,
    opts: &Rk45Options,
) -> Result<Matrix>
where
    F: FnMut(&[f64], &mut [f64]),
{
    let n = x0.len();
    let mut out = Matrix::zeros(m, n);
    out.row_mut(0).copy_from_slice(x0);
    if m == 1 {
        return Ok(out);
    }
    let mut stepper = Stepper::new(rhs, n, opts);
    let mut x = x0.to_vec();
    let mut t = t0;
    stepper.h = stepper.initial_step(&x, dt_out);
    for i in 1..m {
        let target = t0 + i as f64 * dt_out;
        stepper.advance(&mut x, &mut t, target)?;
        out.row_mut(i).copy_from_slice(&x);
    }
    Ok(out)
}

/// Where burst velocities come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VelocitySource {
    /// The true right-hand side evaluated at each sampled state.
    ExactObserved,
    /// Three-point differencing along the burst itself.
    FiniteDifference,
    /// Central differences on an auxiliary grid around each sample.
    FineStepFd,
}

/// One initialization's snapshot sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Burst {
    pub index: usize,
    pub t0: f64,
    pub dt: f64,
    pub states: Matrix,
    pub velocities: Option<Matrix>,
    pub velocity_source: VelocitySource,
    /// Estimated absolute error of each velocity entry, when the source
    /// provides one (fine-step differences do).
    pub velocity_error: Option<Matrix>,
}

impl Burst {
    pub fn samples(&self) -> usize {
        self.states.rows()
    }

    pub fn dim(&self) -> usize {
        self.states.cols()
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitBox {
    pub lo: f64,
    pub hi: f64,
}

impl Default for InitBox {
    fn default() -> Self {
        Self { lo: -1.0, hi: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BurstOptions {
    pub bursts: usize,
    pub samples: usize,
    pub dt: f64,
    pub init: InitBox,
    pub velocity: VelocitySource,
    pub seed: u64,
    pub rk: Rk45Options,
    /// Spacing of the auxiliary grid for [`VelocitySource::FineStepFd`];
    /// `dt / 100` when unset.
    pub dt_fine: Option<f64>,
}

/// Draws `bursts` i.i.d. uniform initial conditions and integrates each one.
///
/// Burst `k` draws its initial condition from stream `k` of `seed`, so any
/// burst can be regenerated on its own. Finite-difference velocities are left
/// empty; see [`crate::differentiation::fill_fd_velocities`].
pub fn generate_bursts(spec: &SystemSpec, opts: &BurstOptions) -> Result<Vec<Burst>> {
    if opts.bursts == 0 || opts.samples == 0 {
        return Err(Error::InvalidArgument(
            "need at least one burst of at least one sample".into(),
        ));
    }
    if opts.velocity == VelocitySource::FiniteDifference && opts.samples < 3 {
        return Err(Error::InsufficientSamples {
            required: 3,
            got: opts.samples,
        });
    }
    if !(opts.init.hi > opts.init.lo) {
        return Err(Error::InvalidArgument(format!(
            "empty initialization box [{}, {}]",
            opts.init.lo, opts.init.hi
        )));
    }
    if let SystemKind::Custom { model } = &spec.kind {
        if model.basis != Basis::Monomial || model.frame != Frame::Original {
            return Err(Error::InvalidArgument(
                "custom systems must be monomial models in the original frame".into(),
            ));
        }
    }
    // Validates dimension constraints of the built-ins.
    spec.rhs(&vec![0.0; spec.n])?;

    (0..opts.bursts)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream_rng(opts.seed, k as u64);
            let x0: Vec<f64> = (0..spec.n)
                .map(|_| opts.init.lo + (opts.init.hi - opts.init.lo) * rng.random::<f64>())
                .collect();
            simulate_burst(spec, k, &x0, opts).map_err(|e| Error::Burst {
                burst: k,
                source: Box::new(e),
            })
        })
        .collect()
}

/// Integrates a single burst from `x0` and fills velocities per `opts.velocity`.
pub fn simulate_burst(spec: &SystemSpec, index: usize, x0: &[f64], opts: &BurstOptions) -> Result<Burst> {
    let rhs = |x: &[f64], out: &mut [f64]| spec.rhs_into(x, out);
    let states = integrate_rk45(rhs, x0, 0.0, opts.dt, opts.samples, &opts.rk)?;
    let mut velocity_error = None;
    let velocities = match opts.velocity {
        VelocitySource::FiniteDifference => None,
        VelocitySource::ExactObserved => {
            let mut v = Matrix::zeros(states.rows(), states.cols());
            for i in 0..states.rows() {
                spec.rhs_into(states.row(i), v.row_mut(i));
            }
            Some(v)
        }
        VelocitySource::FineStepFd => {
            let h = opts.dt_fine.unwrap_or(opts.dt / 100.0);
            if !(h > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "fine step must be positive, got {h}"
                )));
            }
            let mut v = Matrix::zeros(states.rows(), states.cols());
            let mut err = Matrix::zeros(states.rows(), states.cols());
            for i in 0..states.rows() {
                let x = states.row(i);
                let fwd = integrate_grid(rhs, x, 0.0, h, 3, &opts.rk)?;
                let bwd = integrate_grid(rhs, x, 0.0, -h, 3, &opts.rk)?;
                for k in 0..states.cols() {
                    let d1 = (fwd[(1, k)] - bwd[(1, k)]) / (2.0 * h);
                    let d2 = (fwd[(2, k)] - bwd[(2, k)]) / (4.0 * h);
                    v[(i, k)] = d1;
                    // Richardson: the O(h²) error of d1 is (d2 − d1) / 3.
                    err[(i, k)] = (d2 - d1).abs() / 3.0;
                }
            }
            velocity_error = Some(err);
            Some(v)
        }
    };
    Ok(Burst {
        index,
        t0: 0.0,
        dt: opts.dt,
        states,
        velocities,
        velocity_source: opts.velocity,
        velocity_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn opts(k: usize, m: usize, dt: f64, velocity: VelocitySource) -> BurstOptions {
        BurstOptions {
            bursts: k,
            samples: m,
            dt,
            init: InitBox::default(),
            velocity,
            seed: 11,
            rk: Rk45Options::default(),
            dt_fine: None,
        }
    }

    #[test]
    fn lorenz96_examples() {
        assert!(lorenz96_rhs(&[0.0; 6], 8.0).unwrap().iter().all(|&v| v == 8.0));
        assert!(lorenz96_rhs(&[8.0; 6], 8.0).unwrap().iter().all(|&v| v == 0.0));
        let f = lorenz96_rhs(&[1.0, 2.0, 3.0, 4.0, 5.0], 8.0).unwrap();
        assert_eq!(f[2], 11.0);
        assert!(matches!(lorenz96_rhs(&[0.0; 3], 8.0), Err(Error::InvalidSystem(_))));
    }

    #[test]
    fn fisher_examples() {
        assert!(fisher_rhs(&[0.0; 5], 0.3).unwrap().iter().all(|&v| v == 0.0));
        assert!(fisher_rhs(&[1.0; 5], 0.3).unwrap().iter().all(|&v| v == 0.0));
        let f = fisher_rhs(&[1.0, 0.0, 0.0, 0.0], 0.1).unwrap();
        assert_abs_diff_eq!(f[0], -2.0, epsilon = 1e-15);
        assert!(matches!(fisher_rhs(&[0.0; 2], 0.1), Err(Error::InvalidSystem(_))));
    }

    #[test]
    fn true_models() {
        let spec = SystemSpec::fisher(200, 0.1).unwrap();
        let m = true_model(&spec);
        assert_eq!(m.terms(0).len(), 4);
        assert_abs_diff_eq!(m.coefficient(0, BasisIndex::Lin(0)), -1.9, epsilon = 1e-15);
        assert_eq!(m.coefficient(0, BasisIndex::Lin(1)), 1.0);
        assert_eq!(m.coefficient(0, BasisIndex::Lin(199)), 1.0);
        assert_eq!(m.coefficient(0, BasisIndex::Quad(0, 0)), -0.1);

        let m = true_model(&SystemSpec::fisher(10, 0.0).unwrap());
        assert!((0..10).all(|j| m.sparsity(j) == 3));

        let spec = SystemSpec::lorenz96(50, 8.0).unwrap();
        let m = true_model(&spec);
        for j in 0..50 {
            let mut vals: Vec<f64> = m.terms(j).iter().map(|t| t.1).collect();
            vals.sort_by(f64::total_cmp);
            assert_eq!(vals, vec![-1.0, -1.0, 1.0, 8.0]);
        }
        assert_eq!(m.coefficient(0, BasisIndex::Quad(1, 49)), 1.0);
        assert_eq!(m.coefficient(0, BasisIndex::Quad(48, 49)), -1.0);
    }

    #[test]
    fn quadratic_rhs_edge_cases() {
        let z = QuadraticModel::zeros(4);
        assert_eq!(quadratic_rhs(&z, &[1.0, 2.0, 3.0, 4.0]).unwrap(), vec![0.0; 4]);
        let b = [0.5, -1.0, 2.0];
        let m = QuadraticModel::from_terms(
            3,
            b.iter().map(|&v| vec![(BasisIndex::Const, v)]).collect(),
        )
        .unwrap();
        assert_eq!(quadratic_rhs(&m, &[7.0, 8.0, 9.0]).unwrap(), b.to_vec());
        let mut wrong = m.clone();
        wrong.basis = Basis::Legendre;
        assert!(quadratic_rhs(&wrong, &[0.0; 3]).is_err());
    }

    #[test]
    fn rk45_exponential_decay() {
        let o = Rk45Options {
            tol: 1e-10,
            ..Default::default()
        };
        let s = integrate_rk45(|x, f| f[0] = -x[0], &[1.0], 0.0, 0.1, 11, &o).unwrap();
        assert_abs_diff_eq!(s[(10, 0)], (-1.0f64).exp(), epsilon = 1e-8);
    }

    #[test]
    fn rk45_zero_field_and_fixed_point() {
        let s = integrate_rk45(|_, f| f.fill(0.0), &[1.0, -2.0], 0.0, 0.5, 4, &Default::default()).unwrap();
        for i in 0..4 {
            assert_eq!(s.row(i), &[1.0, -2.0]);
        }
        let fp = vec![8.0; 10];
        let s = integrate_rk45(
            |x, f| lorenz96_into(x, 8.0, f),
            &fp,
            0.0,
            0.1,
            5,
            &Default::default(),
        )
        .unwrap();
        assert!(s.as_slice().iter().all(|v| (v - 8.0).abs() < 1e-9));
    }

    #[test]
    fn rk45_rejects_bad_arguments() {
        let f = |_: &[f64], o: &mut [f64]| o.fill(0.0);
        assert!(integrate_rk45(f, &[0.0], 0.0, 0.0, 3, &Default::default()).is_err());
        assert!(integrate_rk45(f, &[0.0], 0.0, 0.1, 0, &Default::default()).is_err());
    }

    #[test]
    fn rk45_reports_blow_up() {
        let res = integrate_rk45(|x, f| f[0] = x[0] * x[0], &[1.0], 0.0, 0.5, 4, &Default::default());
        match res {
            Err(Error::IntegrationFailure { time, .. }) => assert!(time > 0.9 && time <= 1.0),
            other => panic!("expected failure, got {other:?}"),
        }
    }

    #[test]
    fn burst_shapes_and_determinism() {
        let spec = SystemSpec::lorenz96(50, 8.0).unwrap();
        let o = opts(3, 5, 0.01, VelocitySource::FiniteDifference);
        let a = generate_bursts(&spec, &o).unwrap();
        assert_eq!(a.len(), 3);
        assert!(a.iter().all(|b| b.states.shape() == (5, 50) && b.velocities.is_none()));
        let b = generate_bursts(&spec, &o).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.states.row(0), y.states.row(0));
        }
        assert!(a.iter().all(|b| b.states.row(0).iter().all(|v| (-1.0..=1.0).contains(v))));
    }

    #[test]
    fn exact_velocities_match_rhs() {
        let spec = SystemSpec::lorenz96(8, 8.0).unwrap();
        let bursts = generate_bursts(&spec, &opts(2, 4, 0.05, VelocitySource::ExactObserved)).unwrap();
        for b in &bursts {
            let v = b.velocities.as_ref().unwrap();
            for i in 0..4 {
                assert_eq!(v.row(i), lorenz96_rhs(b.states.row(i), 8.0).unwrap().as_slice());
            }
        }
    }

    #[test]
    fn fine_step_velocities_are_accurate() {
        let spec = SystemSpec::lorenz96(8, 8.0).unwrap();
        let mut o = opts(1, 4, 0.2, VelocitySource::FineStepFd);
        o.dt_fine = Some(1e-3);
        let b = &generate_bursts(&spec, &o).unwrap()[0];
        let v = b.velocities.as_ref().unwrap();
        for i in 0..4 {
            let exact = lorenz96_rhs(b.states.row(i), 8.0).unwrap();
            for (a, e) in v.row(i).iter().zip(&exact) {
                assert!((a - e).abs() < 1e-4, "{a} vs {e}");
            }
        }
    }

    #[test]
    fn finite_difference_mode_needs_three_samples() {
        let spec = SystemSpec::fisher(5, 0.1).unwrap();
        assert!(matches!(
            generate_bursts(&spec, &opts(1, 2, 0.01, VelocitySource::FiniteDifference)),
            Err(Error::InsufficientSamples { .. })
        ));
    }
}
