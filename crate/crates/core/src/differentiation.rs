//! Finite-difference velocities, state-noise injection at an exact noise
//! ratio, and the relative error metrics used to score recoveries.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{Burst, VelocitySource};
use crate::linalg::{norm2, sub, Matrix};
use crate::rng::stream_rng;
use crate::{Error, Result};

/// Gaussian state noise at `ratio` percent of the data norm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub ratio: f64,
    pub seed: u64,
}

/// Three-point velocity estimate: forward difference on the first row,
/// backward on the last, central elsewhere.
pub fn fd_velocity(states: &Matrix, dt: f64) -> Result<Matrix> {
    let (m, n) = states.shape();
    if m < 3 {
        return Err(Error::InsufficientSamples { required: 3, got: m });
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sample spacing must be positive, got {dt}"
        )));
    }
    let mut v = Matrix::zeros(m, n);
    for k in 0..n {
        v[(0, k)] = (states[(1, k)] - states[(0, k)]) / dt;
        v[(m - 1, k)] = (states[(m - 1, k)] - states[(m - 2, k)]) / dt;
        for i in 1..m - 1 {
            v[(i, k)] = (states[(i + 1, k)] - states[(i - 1, k)]) / (2.0 * dt);
        }
    }
    Ok(v)
}

/// Replaces the velocities of every burst with [`fd_velocity`] estimates.
pub fn fill_fd_velocities(bursts: &mut [Burst]) -> Result<()> {
    for b in bursts {
        let v = fd_velocity(&b.states, b.dt).map_err(|e| Error::Burst {
            burst: b.index,
            source: Box::new(e),
        })?;
        b.velocities = Some(v);
        b.velocity_source = VelocitySource::FiniteDifference;
        b.velocity_error = None;
    }
    Ok(())
}

/// `Y = X + η` with i.i.d. standard Gaussian `η` rescaled so that
/// `noise_ratio(X, Y)` equals `spec.ratio` (Frobenius norms).
pub fn add_state_noise(x: &Matrix, spec: &NoiseSpec) -> Result<Matrix> {
    if !(spec.ratio >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "noise ratio must be non-negative, got {}",
            spec.ratio
        )));
    }
    if spec.ratio == 0.0 {
        return Ok(x.clone());
    }
    let xnorm = x.frobenius_norm();
    if xnorm == 0.0 {
        return Err(Error::ZeroNorm("state matrix"));
    }
    let mut rng = stream_rng(spec.seed, 0);
    let eta: Vec<f64> = (0..x.as_slice().len())
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let scale = spec.ratio / 100.0 * xnorm / norm2(&eta);
    let data = x
        .as_slice()
        .iter()
        .zip(&eta)
        .map(|(a, e)| a + scale * e)
        .collect();
    Matrix::from_vec(x.rows(), x.cols(), data)
}

/// Corrupts the states of all bursts jointly: the stacked burst-major state
/// matrix gets noise at the requested ratio, then is split back.
pub fn add_noise_to_bursts(bursts: &mut [Burst], spec: &NoiseSpec) -> Result<()> {
    if spec.ratio == 0.0 {
        return Ok(());
    }
    let parts: Vec<&Matrix> = bursts.iter().map(|b| &b.states).collect();
    let stacked = Matrix::vstack(&parts)?;
    let noisy = add_state_noise(&stacked, spec)?;
    let mut row = 0;
    for b in bursts {
        for i in 0..b.states.rows() {
            b.states.row_mut(i).copy_from_slice(noisy.row(row));
            row += 1;
        }
    }
    Ok(())
}

/// `‖X − Y‖_F / ‖X‖_F × 100`.
pub fn noise_ratio(x: &Matrix, y: &Matrix) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::Shape("noise ratio of differently shaped matrices".into()));
    }
    let xnorm = x.frobenius_norm();
    if xnorm == 0.0 {
        return Err(Error::ZeroNorm("reference state matrix"));
    }
    Ok(norm2(&sub(x.as_slice(), y.as_slice())) / xnorm * 100.0)
}

/// `‖c − c_true‖₂ / ‖c_true‖₂ × 100`.
pub fn rel_l2_error(c: &[f64], c_true: &[f64]) -> Result<f64> {
    if c.len() != c_true.len() {
        return Err(Error::Shape(format!(
            "comparing {} coefficients against {}",
            c.len(),
            c_true.len()
        )));
    }
    let denom = norm2(c_true);
    if denom == 0.0 {
        return Err(Error::ZeroNorm("reference coefficient vector"));
    }
    Ok(norm2(&sub(c, c_true)) / denom * 100.0)
}
