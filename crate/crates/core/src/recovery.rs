//! End-to-end identification: assemble the dictionary for a sampling
//! strategy, solve one basis-pursuit-denoise problem per component, read off
//! the support, debias on the monomial dictionary, and score against ground
//! truth.

use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dictionary::{
    assemble_dictionary, change_basis, eval_column, localized_columns, pullback_affine,
    AffineTransform, Basis, BasisIndex, DictionaryMatrix, Frame, RowMeta, RowSelection,
};
use crate::differentiation::{add_noise_to_bursts, fill_fd_velocities, rel_l2_error, NoiseSpec};
use crate::dynamics::{
    generate_bursts, true_model, Burst, BurstOptions, InitBox, QuadraticModel, Rk45Options,
    SystemSpec, VelocitySource,
};
use crate::linalg::{norm2, Matrix};
use crate::rng::derive_seed;
use crate::sparse_solver::{debias, solve_bpdn, support_of, BpdnConfig};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Many short bursts from i.i.d. uniform initializations.
    RandomBursts,
    /// Random bursts with each component restricted to a periodic window.
    Localized,
    /// One long trajectory sampled at a coarse spacing.
    SingleTrajectory,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaPolicy {
    /// Pick σ from the velocity source; see [`auto_sigma`].
    Auto,
    /// The automatic choice multiplied by a safety factor.
    AutoScaled(f64),
    /// Fixed residual bound, in the units of the assembled system.
    Explicit(f64),
}

/// Which coordinate frame the dictionary is evaluated in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FramePolicy {
    /// Raw states.
    Original,
    /// Map the initialization box onto `[-1, 1]^n` (a no-op for `[-1, 1]`).
    InitBox,
    /// Map the smallest cube containing all sampled states onto `[-1, 1]^n`.
    DataBox,
}

#[derive(Clone, Debug)]
pub struct RecoveryConfig {
    pub system: SystemSpec,
    pub strategy: Strategy,
    pub bursts: usize,
    pub samples: usize,
    pub dt: f64,
    pub basis: Basis,
    pub ell: Option<usize>,
    pub rows: RowSelection,
    pub velocity: VelocitySource,
    pub dt_fine: Option<f64>,
    pub init: InitBox,
    pub frame: FramePolicy,
    pub sigma: SigmaPolicy,
    pub tau_supp: f64,
    /// Largest relative ℓ2 error (as a fraction) still counted as success.
    pub rel_tol: f64,
    /// State noise in percent; `None` and `Some(0.0)` are equivalent.
    pub noise: Option<f64>,
    pub seed: u64,
    /// Constant of the effective burst-count bound.
    pub c_eff: f64,
    pub debias: bool,
    pub solver: BpdnConfig,
    pub rk: Rk45Options,
    /// Zero-based components to recover; all when `None`.
    pub components: Option<Vec<usize>>,
}

impl RecoveryConfig {
    /// Random-burst defaults: Legendre dictionary, all samples, finite
    /// differences, `[-1, 1]` initializations.
    pub fn new(system: SystemSpec, bursts: usize, samples: usize, dt: f64) -> Self {
        Self {
            system,
            strategy: Strategy::RandomBursts,
            bursts,
            samples,
            dt,
            basis: Basis::Legendre,
            ell: None,
            rows: RowSelection::AllSamples,
            velocity: VelocitySource::FiniteDifference,
            dt_fine: None,
            init: InitBox::default(),
            frame: FramePolicy::InitBox,
            sigma: SigmaPolicy::Auto,
            tau_supp: 1e-3,
            rel_tol: 0.01,
            noise: None,
            seed: 0,
            c_eff: 3.2,
            debias: true,
            solver: BpdnConfig::default(),
            rk: Rk45Options::default(),
            components: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.strategy {
            Strategy::Localized if self.ell.is_none() => {
                return Err(Error::Config("localized strategy needs a window width".into()))
            }
            Strategy::SingleTrajectory if self.bursts != 1 => {
                return Err(Error::Config(format!(
                    "single-trajectory strategy uses exactly one burst, got {}",
                    self.bursts
                )))
            }
            _ => {}
        }
        if let Some(ell) = self.ell {
            if ell % 2 == 0 || ell == 0 || ell > self.system.n {
                return Err(Error::Config(format!(
                    "window width {ell} must be odd and at most n = {}",
                    self.system.n
                )));
            }
        }
        if !(self.tau_supp >= 0.0) || !(self.rel_tol > 0.0) {
            return Err(Error::Config("support threshold and success tolerance must be positive".into()));
        }
        if let Some(r) = self.noise {
            if !(r >= 0.0) {
                return Err(Error::Config(format!("noise ratio must be non-negative, got {r}")));
            }
        }
        if let Some(cs) = &self.components {
            if let Some(&j) = cs.iter().find(|&&j| j >= self.system.n) {
                return Err(Error::Config(format!(
                    "component {} out of range for n = {}",
                    j + 1,
                    self.system.n
                )));
            }
        }
        Ok(())
    }

    pub fn burst_options(&self) -> BurstOptions {
        BurstOptions {
            bursts: self.bursts,
            samples: self.samples,
            dt: self.dt,
            init: self.init,
            velocity: self.velocity,
            seed: derive_seed(self.seed, &[BURST_STREAM]),
            rk: self.rk,
            dt_fine: self.dt_fine,
        }
    }
}

const BURST_STREAM: u64 = 0;
const NOISE_STREAM: u64 = 1;

#[derive(Clone, Debug, Serialize)]
pub struct ComponentResult {
    pub component: usize,
    pub columns: Vec<BasisIndex>,
    /// Solver output in the dictionary's basis and frame.
    pub raw: Vec<f64>,
    /// Monomial, original-frame coefficients before debiasing.
    pub pre_debias: Vec<f64>,
    /// Final monomial, original-frame coefficients.
    pub coefficients: Vec<f64>,
    pub support: Vec<BasisIndex>,
    pub sigma: f64,
    pub converged: bool,
    /// Inner solver iterations summed over all Pareto steps.
    pub iterations: usize,
    pub debias_full_rank: Option<bool>,
    pub rel_l2: Option<f64>,
    pub success: Option<bool>,
}

impl ComponentResult {
    pub fn coefficient(&self, idx: BasisIndex) -> f64 {
        self.columns
            .iter()
            .position(|&c| c == idx)
            .map_or(0.0, |p| self.coefficients[p])
    }

    pub fn pre_debias_coefficient(&self, idx: BasisIndex) -> f64 {
        self.columns
            .iter()
            .position(|&c| c == idx)
            .map_or(0.0, |p| self.pre_debias[p])
    }

    /// Columns of the `k` largest-magnitude final coefficients, in dictionary order.
    pub fn top_k(&self, k: usize) -> Vec<BasisIndex> {
        let mut order: Vec<usize> = (0..self.coefficients.len()).collect();
        order.sort_by(|&a, &b| {
            self.coefficients[b]
                .abs()
                .total_cmp(&self.coefficients[a].abs())
                .then(a.cmp(&b))
        });
        let mut top: Vec<BasisIndex> = order
            .into_iter()
            .take(k)
            .filter(|&p| self.coefficients[p] != 0.0)
            .map(|p| self.columns[p])
            .collect();
        top.sort();
        top
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RecoveryResult {
    pub components: Vec<ComponentResult>,
    pub wall_time: Duration,
    /// Rows and columns of the (largest) dictionary solved.
    pub shape: (usize, usize),
}

impl RecoveryResult {
    pub fn component(&self, j: usize) -> Option<&ComponentResult> {
        self.components.iter().find(|c| c.component == j)
    }

    pub fn all_successful(&self) -> bool {
        self.components.iter().all(|c| c.success == Some(true))
    }
}

/// Inputs of one component's solve. `raw_states` and `raw_velocity` are the
/// original-frame data aligned with the dictionary rows; debiasing fits them.
pub struct ComponentInput<'a> {
    pub dictionary: &'a DictionaryMatrix,
    pub velocity: &'a [f64],
    pub raw_states: &'a Matrix,
    pub raw_velocity: &'a [f64],
    pub component: usize,
    pub sigma: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct ComponentOptions {
    pub tau_supp: f64,
    pub debias: bool,
    pub solver: BpdnConfig,
}

/// BPDN solve → monomial original-frame coefficients → support → optional
/// least-squares debiasing on that support.
pub fn recover_component(input: &ComponentInput<'_>, opts: &ComponentOptions) -> Result<ComponentResult> {
    let dict = input.dictionary;
    let rows = dict.values.rows();
    if input.velocity.len() != rows || input.raw_velocity.len() != rows || input.raw_states.rows() != rows {
        return Err(Error::Shape(format!(
            "dictionary has {rows} rows but velocity data has {} / {} / {}",
            input.velocity.len(),
            input.raw_velocity.len(),
            input.raw_states.rows()
        )));
    }
    let cfg = BpdnConfig {
        sigma: input.sigma,
        ..opts.solver
    };
    let sol = solve_bpdn(&dict.values, input.velocity, &cfg);
    let mono = change_basis(&dict.columns, &sol.x, dict.basis, Basis::Monomial)?;
    let pre = match &dict.frame {
        Frame::UnitBox(t) => pullback_affine(&dict.columns, &mono, t, input.component)?,
        Frame::Original => mono,
    };
    let initial_support = support_of(&pre, opts.tau_supp);

    let (coefficients, debias_full_rank) = if opts.debias && !initial_support.is_empty() {
        let cols: Vec<BasisIndex> = initial_support.iter().map(|&p| dict.columns[p]).collect();
        let mut a = Matrix::zeros(rows, cols.len());
        for i in 0..rows {
            let x = input.raw_states.row(i);
            for (dst, &c) in a.row_mut(i).iter_mut().zip(&cols) {
                *dst = eval_column(Basis::Monomial, c, x);
            }
        }
        let d = debias(&a, input.raw_velocity);
        let mut full = vec![0.0; pre.len()];
        for (&p, v) in initial_support.iter().zip(d.coefficients) {
            full[p] = v;
        }
        (full, Some(d.full_rank))
    } else {
        (pre.clone(), None)
    };
    let support = support_of(&coefficients, opts.tau_supp)
        .into_iter()
        .map(|p| dict.columns[p])
        .collect();

    Ok(ComponentResult {
        component: input.component,
        columns: dict.columns.clone(),
        raw: sol.x,
        pre_debias: pre,
        coefficients,
        support,
        sigma: input.sigma,
        converged: sol.converged,
        iterations: sol.inner_iterations,
        debias_full_rank,
        rel_l2: None,
        success: None,
    })
}

/// True iff the thresholded support of `recovered` equals the nonzero pattern
/// of `truth` and the relative ℓ2 error is at most `rel_tol` (a fraction).
pub fn evaluate_success(recovered: &[f64], truth: &[f64], tau_supp: f64, rel_tol: f64) -> bool {
    let true_support: Vec<usize> = truth
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(i, _)| i)
        .collect();
    if support_of(recovered, tau_supp) != true_support {
        return false;
    }
    match rel_l2_error(recovered, truth) {
        Ok(pct) => pct <= rel_tol * 100.0,
        Err(_) => true_support.is_empty(),
    }
}

/// Velocity-error bound used when σ is not given explicitly.
///
/// * exact velocities: `1e-8 · ‖v‖`
/// * finite differences: `κ · dt · √R` with `κ` half the median magnitude of
///   the second derivative, estimated from second differences of the
///   component along each burst
/// * fine-step differences: the root sum of squares of the per-entry
///   Richardson error estimates over the dictionary rows
///
/// `chain` is the velocity scale factor of the dictionary frame and
/// `velocity` the (scaled) right-hand side; the result is never below
/// `1e-8 · ‖v‖`.
pub fn auto_sigma(
    source: VelocitySource,
    bursts: &[Burst],
    rows: &[RowMeta],
    component: usize,
    chain: f64,
    velocity: &[f64],
) -> f64 {
    let floor = 1e-8 * norm2(velocity);
    let estimate = match source {
        VelocitySource::ExactObserved => 0.0,
        VelocitySource::FiniteDifference => {
            let mut second: Vec<f64> = bursts
                .iter()
                .flat_map(|b| {
                    let s = &b.states;
                    (1..s.rows().saturating_sub(1)).map(move |i| {
                        (s[(i + 1, component)] - 2.0 * s[(i, component)] + s[(i - 1, component)]).abs()
                    })
                })
                .collect();
            if second.is_empty() {
                return floor;
            }
            second.sort_by(f64::total_cmp);
            let median = second[second.len() / 2];
            let dt = bursts[0].dt;
            let kappa = chain * median / (2.0 * dt * dt);
            kappa * dt * (rows.len() as f64).sqrt()
        }
        VelocitySource::FineStepFd => {
            let sq: f64 = rows
                .iter()
                .filter_map(|m| {
                    bursts[m.burst]
                        .velocity_error
                        .as_ref()
                        .map(|e| e[(m.sample, component)].powi(2))
                })
                .sum();
            chain * sq.sqrt()
        }
    };
    estimate.max(floor)
}

fn frame_transform(cfg: &RecoveryConfig, bursts: &[Burst]) -> Result<Option<AffineTransform>> {
    let n = cfg.system.n;
    match cfg.frame {
        FramePolicy::Original => Ok(None),
        FramePolicy::InitBox => {
            if cfg.init.lo == -1.0 && cfg.init.hi == 1.0 {
                Ok(None)
            } else {
                AffineTransform::uniform(n, cfg.init.lo, cfg.init.hi).map(Some)
            }
        }
        FramePolicy::DataBox => {
            let (lo, hi) = bursts
                .iter()
                .flat_map(|b| b.states.as_slice().iter())
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            AffineTransform::uniform(n, lo, hi).map(Some)
        }
    }
}

/// Runs the identification on already-simulated bursts. Noise (if any) is
/// added to the states first, then missing velocities are estimated by
/// finite differences.
pub fn recover_system(mut bursts: Vec<Burst>, cfg: &RecoveryConfig) -> Result<RecoveryResult> {
    let start = Instant::now();
    cfg.validate()?;
    if bursts.is_empty() {
        return Err(Error::InvalidArgument("no bursts".into()));
    }
    if let Some(ratio) = cfg.noise.filter(|&r| r > 0.0) {
        add_noise_to_bursts(
            &mut bursts,
            &NoiseSpec {
                ratio,
                seed: derive_seed(cfg.seed, &[NOISE_STREAM]),
            },
        )?;
    }
    if bursts.iter().any(|b| b.velocities.is_none()) {
        fill_fd_velocities(&mut bursts)?;
    }
    let source = bursts[0].velocity_source;
    let transform = frame_transform(cfg, &bursts)?;
    let n = cfg.system.n;
    let truth = true_model(&cfg.system);
    let components: Vec<usize> = cfg.components.clone().unwrap_or_else(|| (0..n).collect());
    let opts = ComponentOptions {
        tau_supp: cfg.tau_supp,
        debias: cfg.debias,
        solver: cfg.solver,
    };

    // Original-frame states and velocities, row-aligned with the dictionary.
    let raw = {
        let (probe, vel) = assemble_dictionary(&bursts, Basis::Monomial, Some(&[]), cfg.rows, None)?;
        let mut states = Matrix::zeros(probe.rows_meta.len(), n);
        for (r, meta) in probe.rows_meta.iter().enumerate() {
            states
                .row_mut(r)
                .copy_from_slice(bursts[meta.burst].states.row(meta.sample));
        }
        (states, vel)
    };

    let shared = match cfg.strategy {
        Strategy::Localized => None,
        _ => Some(assemble_dictionary(&bursts, cfg.basis, None, cfg.rows, transform.as_ref())?),
    };

    let solve_one = |j: usize| -> Result<ComponentResult> {
        let local;
        let (dict, v) = match &shared {
            Some((d, v)) => (d, v),
            None => {
                let cols = localized_columns(j, cfg.ell.expect("validated"), n)?;
                local = assemble_dictionary(&bursts, cfg.basis, Some(&cols), cfg.rows, transform.as_ref())?;
                (&local.0, &local.1)
            }
        };
        let vj = v.column(j);
        let chain = transform.as_ref().map_or(1.0, |t| t.scale(j));
        let sigma = match cfg.sigma {
            SigmaPolicy::Explicit(s) => s,
            SigmaPolicy::Auto => auto_sigma(source, &bursts, &dict.rows_meta, j, chain, &vj),
            SigmaPolicy::AutoScaled(f) => f * auto_sigma(source, &bursts, &dict.rows_meta, j, chain, &vj),
        };
        let raw_v = raw.1.column(j);
        let mut res = recover_component(
            &ComponentInput {
                dictionary: dict,
                velocity: &vj,
                raw_states: &raw.0,
                raw_velocity: &raw_v,
                component: j,
                sigma,
            },
            &opts,
        )?;
        score(&mut res, &truth, cfg);
        Ok(res)
    };

    let results: Vec<ComponentResult> = components
        .par_iter()
        .map(|&j| solve_one(j))
        .collect::<Result<_>>()?;

    let shape = match &shared {
        Some((d, _)) => d.shape(),
        None => (
            raw.0.rows(),
            crate::dictionary::num_columns(cfg.ell.expect("validated")),
        ),
    };
    Ok(RecoveryResult {
        components: results,
        wall_time: start.elapsed(),
        shape,
    })
}

fn score(res: &mut ComponentResult, truth: &QuadraticModel, cfg: &RecoveryConfig) {
    let t = truth.column_on(res.component, &res.columns);
    // Truth outside a localized window would make the comparison meaningless.
    let covered = truth
        .terms(res.component)
        .iter()
        .all(|(b, _)| res.columns.contains(b));
    if !covered {
        res.success = Some(false);
        return;
    }
    res.rel_l2 = rel_l2_error(&res.coefficients, &t).ok();
    // Non-converged solves count as failures even when the model looks right.
    res.success = Some(res.converged && evaluate_success(&res.coefficients, &t, cfg.tau_supp, cfg.rel_tol));
}

/// Simulates bursts for `cfg` and runs [`recover_system`] on them.
pub fn run_recovery(cfg: &RecoveryConfig) -> Result<RecoveryResult> {
    cfg.validate()?;
    let bursts = generate_bursts(&cfg.system, &cfg.burst_options())?;
    recover_system(bursts, cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundMode {
    /// `⌈9 c s ln N ln(1/ε)⌉`
    Theoretical,
    /// `⌈c s ln N⌉`, the empirical operating point.
    Effective,
}

/// Number of bursts prescribed by the recovery bound.
pub fn required_bursts(s: usize, n_columns: usize, eps: f64, mode: BoundMode, c: f64) -> Result<usize> {
    if s == 0 || n_columns <= s {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= s < N, got s = {s}, N = {n_columns}"
        )));
    }
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(Error::InvalidArgument(format!("failure probability must lie in (0, 1], got {eps}")));
    }
    let base = c * s as f64 * (n_columns as f64).ln();
    let k = match mode {
        BoundMode::Theoretical => 9.0 * base * (1.0 / eps).ln(),
        BoundMode::Effective => base,
    };
    // Absorb rounding noise so exact products do not round up a whole burst.
    Ok((k - 1e-9 * k.abs()).ceil().max(0.0) as usize)
}

/// Outcome of one Monte Carlo trial of a single component.
pub fn trial_success(cfg: &RecoveryConfig, trial_seed: u64) -> bool {
    let mut c = cfg.clone();
    c.seed = trial_seed;
    match run_recovery(&c) {
        Ok(r) => r.all_successful(),
        Err(_) => false,
    }
}

/// Smallest `K` in `k_start..=k_max` for which all `trials` trials succeed.
/// Trial `t` at burst count `K` uses seed `derive_seed(seed, [K, t])`.
pub fn min_bursts_search(
    cfg: &RecoveryConfig,
    k_start: usize,
    k_max: usize,
    trials: usize,
    seed: u64,
) -> Option<usize> {
    (k_start.max(1)..=k_max).find(|&k| {
        let mut c = cfg.clone();
        c.bursts = k;
        (0..trials)
            .into_par_iter()
            .all(|t| trial_success(&c, derive_seed(seed, &[k as u64, t as u64])))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bound_examples() {
        assert_eq!(required_bursts(5, 20301, 0.5, BoundMode::Effective, 3.2).unwrap(), 159);
        // ratio 2.1 is the rounded value of 25 / (5 ln 11)
        assert_eq!(required_bursts(5, 11, 0.5, BoundMode::Effective, 2.1).unwrap(), 26);
        let c = 25.0 / (5.0 * 11f64.ln());
        assert_eq!(required_bursts(5, 11, 0.5, BoundMode::Effective, c).unwrap(), 25);
        assert_eq!(required_bursts(4, 1326, 1.0, BoundMode::Theoretical, 1.0).unwrap(), 0);
        assert!(required_bursts(0, 10, 0.1, BoundMode::Effective, 1.0).is_err());
        assert!(required_bursts(3, 3, 0.1, BoundMode::Effective, 1.0).is_err());
    }

    #[test]
    fn success_criterion() {
        let truth = [0.0, -1.9, 1.0, 0.0, 1.0, -0.1];
        assert!(evaluate_success(&truth, &truth, 1e-3, 0.01));
        let mut spurious = truth;
        spurious[3] = 0.5 * 1.9;
        assert!(!evaluate_success(&spurious, &truth, 1e-3, 0.01));
        let table = [0.0, -1.901, 1.000, 0.0, 0.999, -0.098];
        assert!(evaluate_success(&table, &truth, 1e-3, 0.01));
    }

    #[test]
    fn config_validation() {
        let sys = SystemSpec::lorenz96(10, 8.0).unwrap();
        let mut c = RecoveryConfig::new(sys, 5, 3, 0.01);
        assert!(c.validate().is_ok());
        c.strategy = Strategy::Localized;
        assert!(c.validate().is_err());
        c.ell = Some(4);
        assert!(c.validate().is_err());
        c.ell = Some(5);
        assert!(c.validate().is_ok());
        c.strategy = Strategy::SingleTrajectory;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_velocity_gives_empty_support() {
        let bursts: Vec<Burst> = (0..3)
            .map(|k| Burst {
                index: k,
                t0: 0.0,
                dt: 0.1,
                states: Matrix::from_rows(&[[0.1 * k as f64, 0.2], [0.3, -0.4]]).unwrap(),
                velocities: Some(Matrix::zeros(2, 2)),
                velocity_source: VelocitySource::ExactObserved,
                velocity_error: None,
            })
            .collect();
        let (dict, v) =
            assemble_dictionary(&bursts, Basis::Legendre, None, RowSelection::AllSamples, None).unwrap();
        let raw = Matrix::from_rows(&(0..6).map(|r| bursts[r / 2].states.row(r % 2).to_vec()).collect::<Vec<_>>()).unwrap();
        let res = recover_component(
            &ComponentInput {
                dictionary: &dict,
                velocity: &v.column(0),
                raw_states: &raw,
                raw_velocity: &v.column(0),
                component: 0,
                sigma: 0.0,
            },
            &ComponentOptions {
                tau_supp: 1e-3,
                debias: true,
                solver: BpdnConfig::default(),
            },
        )
        .unwrap();
        assert!(res.coefficients.iter().all(|&c| c == 0.0));
        assert!(res.support.is_empty());
    }
}
