//! Property checks shared by the property tests and the acceptance harness.
//! Each returns a short report on success and a description of the first
//! violation otherwise.

#![allow(dead_code)]

use dynrec_core::dictionary::{
    all_columns, change_basis, evaluate_polynomial, legendre_row, monomial_row, pullback_affine,
    AffineTransform, Basis,
};
use dynrec_core::differentiation::fd_velocity;
use dynrec_core::linalg::{norm1, norm2, Matrix};
use dynrec_core::sparse_solver::{project_l1_ball, solve_bpdn, BpdnConfig};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform_point(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-1.0..=1.0)).collect()
}

pub fn bos_bound() -> Check {
    let mut r = rng(11);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let n = r.random_range(1..=6);
        let x = uniform_point(&mut r, n);
        worst = legendre_row(&x).iter().fold(worst, |m, v| m.max(v.abs()));
    }
    if worst <= 3.0 + 1e-12 {
        Ok(format!("max |phi| = {worst:.6}"))
    } else {
        Err(format!("max |phi| = {worst}"))
    }
}

/// Three-point Gauss-Legendre rule on [-1, 1] with weights normalized to the
/// uniform probability measure.
const GAUSS3: [(f64, f64); 3] = [
    (-0.774_596_669_241_483_4, 5.0 / 18.0),
    (0.0, 8.0 / 18.0),
    (0.774_596_669_241_483_4, 5.0 / 18.0),
];

pub fn gram_identity() -> Check {
    let mut worst = 0.0f64;
    for n in 1..=3usize {
        let cols = all_columns(n).len();
        let mut gram = vec![0.0; cols * cols];
        for flat in 0..3usize.pow(n as u32) {
            let mut w = 1.0;
            let mut x = vec![0.0; n];
            let mut k = flat;
            for xi in x.iter_mut() {
                let (node, weight) = GAUSS3[k % 3];
                *xi = node;
                w *= weight;
                k /= 3;
            }
            let row = legendre_row(&x);
            for a in 0..cols {
                for b in 0..cols {
                    gram[a * cols + b] += w * row[a] * row[b];
                }
            }
        }
        for a in 0..cols {
            for b in 0..cols {
                let target = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((gram[a * cols + b] - target).abs());
            }
        }
    }
    if worst <= 1e-12 {
        Ok(format!("max |G - I| = {worst:.2e}"))
    } else {
        Err(format!("max |G - I| = {worst:.3e}"))
    }
}

pub fn change_basis_consistency() -> Check {
    let mut r = rng(12);
    let mut round_trip = 0.0f64;
    let mut rows = 0.0f64;
    for _ in 0..200 {
        let n = r.random_range(1..=5);
        let cols = all_columns(n);
        let c: Vec<f64> = (0..cols.len()).map(|_| r.random_range(-2.0..2.0)).collect();
        let leg = change_basis(&cols, &c, Basis::Monomial, Basis::Legendre).map_err(|e| e.to_string())?;
        let back = change_basis(&cols, &leg, Basis::Legendre, Basis::Monomial).map_err(|e| e.to_string())?;
        round_trip = c.iter().zip(&back).fold(round_trip, |m, (a, b)| m.max((a - b).abs()));

        // column k of T is the monomial expansion of the k-th Legendre function
        let x = uniform_point(&mut r, n);
        let mono = monomial_row(&x);
        let target = legendre_row(&x);
        for (k, &want) in target.iter().enumerate() {
            let mut e = vec![0.0; cols.len()];
            e[k] = 1.0;
            let t_col = change_basis(&cols, &e, Basis::Legendre, Basis::Monomial).map_err(|e| e.to_string())?;
            let got: f64 = mono.iter().zip(&t_col).map(|(a, b)| a * b).sum();
            rows = rows.max((got - want).abs());
        }
    }
    if round_trip <= 1e-14 && rows <= 1e-13 {
        Ok(format!("round trip {round_trip:.1e}, row identity {rows:.1e}"))
    } else {
        Err(format!("round trip {round_trip:.3e}, row identity {rows:.3e}"))
    }
}

pub fn pullback_consistency() -> Check {
    let mut r = rng(13);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = r.random_range(1..=5);
        let lo: Vec<f64> = (0..n).map(|_| r.random_range(-5.0..1.0)).collect();
        let hi: Vec<f64> = lo.iter().map(|l| l + r.random_range(0.1..6.0)).collect();
        let tf = AffineTransform::new(lo.clone(), hi.clone()).map_err(|e| e.to_string())?;
        let cols = all_columns(n);
        let g: Vec<f64> = (0..cols.len()).map(|_| r.random_range(-2.0..2.0)).collect();
        let comp = r.random_range(0..n);
        let f = pullback_affine(&cols, &g, &tf, comp).map_err(|e| e.to_string())?;
        for _ in 0..5 {
            let x: Vec<f64> = (0..n).map(|i| r.random_range(lo[i]..=hi[i])).collect();
            let lhs = evaluate_polynomial(Basis::Monomial, &cols, &f, &x);
            let rhs = evaluate_polynomial(Basis::Monomial, &cols, &g, &tf.forward(&x)) / tf.scale(comp);
            // scale of the terms being summed, so cancellation is not counted
            let abs_f: Vec<f64> = f.iter().map(|v| v.abs()).collect();
            let x_abs: Vec<f64> = x.iter().map(|v| v.abs()).collect();
            let scale = evaluate_polynomial(Basis::Monomial, &cols, &abs_f, &x_abs).max(1.0);
            worst = worst.max((lhs - rhs).abs() / scale);
        }
    }
    if worst <= 1e-12 {
        Ok(format!("max error {worst:.1e}"))
    } else {
        Err(format!("max error {worst:.3e}"))
    }
}

fn log_slope(hs: &[f64], errs: &[f64]) -> f64 {
    let xs: Vec<f64> = hs.iter().map(|h| h.ln()).collect();
    let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

pub fn fd_order() -> Check {
    let hs = [0.1, 0.05, 0.025, 0.0125, 0.00625];
    let (mut interior, mut endpoint) = (Vec::new(), Vec::new());
    let t0 = 0.3;
    for &h in &hs {
        let x = Matrix::from_rows(&(0..5).map(|i| [(t0 + i as f64 * h).sin()]).collect::<Vec<_>>())
            .map_err(|e| e.to_string())?;
        let v = fd_velocity(&x, h).map_err(|e| e.to_string())?;
        interior.push((v[(2, 0)] - (t0 + 2.0 * h).cos()).abs());
        endpoint.push((v[(0, 0)] - t0.cos()).abs());
    }
    let (si, se) = (log_slope(&hs, &interior), log_slope(&hs, &endpoint));
    if (si - 2.0).abs() <= 0.1 && (se - 1.0).abs() <= 0.1 {
        Ok(format!("interior slope {si:.3}, endpoint slope {se:.3}"))
    } else {
        Err(format!("interior slope {si:.3}, endpoint slope {se:.3}"))
    }
}

/// Soft-thresholding level with `||S_theta(v)||_1 = tau`, by bisection.
fn threshold_level(v: &[f64], tau: f64) -> f64 {
    let mass = |t: f64| v.iter().map(|x| (x.abs() - t).max(0.0)).sum::<f64>();
    let (mut lo, mut hi) = (0.0, norm_inf_slice(v));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mass(mid) > tau {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn norm_inf_slice(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn projection_matches_threshold_search() -> Check {
    let mut r = rng(16);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let n = r.random_range(1..=50);
        let v: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
        let tau = r.random_range(0.0..1.2) * norm1(&v);
        let p = project_l1_ball(&v, tau);
        if norm1(&p) > tau * (1.0 + 1e-12) {
            return Err(format!("||w||_1 = {} exceeds tau = {tau}", norm1(&p)));
        }
        let theta = if norm1(&v) <= tau { 0.0 } else { threshold_level(&v, tau) };
        for (pi, vi) in p.iter().zip(&v) {
            worst = worst.max((pi - vi.signum() * (vi.abs() - theta).max(0.0)).abs());
        }
    }
    if worst <= 1e-10 {
        Ok(format!("max deviation {worst:.1e}"))
    } else {
        Err(format!("max deviation {worst:.3e}"))
    }
}

pub fn projection_matches_brute_force() -> Check {
    // The projection onto the l1 ball minimizes ||w - v|| over the ball; compare
    // with the best of many random feasible points and with the KKT structure.
    let mut r = rng(14);
    for case in 0..200 {
        let n = r.random_range(1..=6);
        let v: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
        let tau = r.random_range(0.05..4.0);
        let p = project_l1_ball(&v, tau);
        let dist = |w: &[f64]| norm2(&w.iter().zip(&v).map(|(a, b)| a - b).collect::<Vec<_>>());
        if norm1(&p) > tau * (1.0 + 1e-12) {
            return Err(format!("case {case}: projection leaves the ball"));
        }
        let dp = dist(&p);
        for _ in 0..2000 {
            let mut w: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
            let s = norm1(&w);
            let radius = tau * r.random_range(0.0f64..=1.0).sqrt();
            w.iter_mut().for_each(|x| *x *= radius / s);
            if dist(&w) < dp - 1e-12 {
                return Err(format!("case {case}: found a closer feasible point"));
            }
        }
        // perturbing along the ball surface never helps
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let mut w = p.clone();
                let eps = 1e-6;
                w[i] += eps * p[i].signum();
                w[j] -= eps * p[j].signum();
                if norm1(&w) <= tau * (1.0 + 1e-12) && dist(&w) < dp - 1e-12 {
                    return Err(format!("case {case}: local improvement exists"));
                }
            }
        }
    }
    Ok("200 instances".into())
}

fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// `min ||c||_1` subject to `A c = b` by enumerating basic solutions.
fn basis_pursuit_oracle(a: &DMatrix<f64>, b: &DVector<f64>) -> f64 {
    let (m, n) = a.shape();
    let mut best = f64::INFINITY;
    for s in subsets(n, m) {
        let sub = DMatrix::from_fn(m, m, |i, j| a[(i, s[j])]);
        if let Some(inv) = sub.clone().try_inverse() {
            if sub.determinant().abs() < 1e-10 {
                continue;
            }
            best = best.min((inv * b).lp_norm(1));
        }
    }
    best
}

/// Distance from `b` to the polytope `tau * conv{±a_k}`, found by projecting
/// onto the affine hull of every vertex subset of size at most `m`.
fn polytope_distance(a: &DMatrix<f64>, b: &DVector<f64>, tau: f64) -> f64 {
    let (m, n) = a.shape();
    let verts: Vec<DVector<f64>> = (0..n)
        .flat_map(|k| {
            let col = a.column(k).into_owned() * tau;
            [col.clone(), -col]
        })
        .collect();
    let mut best = f64::INFINITY;
    for k in 1..=m.min(verts.len()) {
        for s in subsets(verts.len(), k) {
            let v0 = &verts[s[0]];
            if k == 1 {
                best = best.min((b - v0).norm());
                continue;
            }
            let d = DMatrix::from_fn(m, k - 1, |i, j| verts[s[j + 1]][i] - v0[i]);
            let g = d.transpose() * &d;
            if g.determinant().abs() < 1e-14 {
                continue;
            }
            let Some(mu) = g.lu().solve(&(d.transpose() * (b - v0))) else {
                continue;
            };
            if mu.iter().any(|&x| x < -1e-13) || mu.sum() > 1.0 + 1e-13 {
                continue;
            }
            best = best.min((b - v0 - &d * mu).norm());
        }
    }
    best
}

/// `min ||c||_1` subject to `||A c - b|| <= sigma`.
fn bpdn_oracle(a: &DMatrix<f64>, b: &DVector<f64>, sigma: f64) -> f64 {
    let tau_bp = basis_pursuit_oracle(a, b);
    if sigma == 0.0 {
        return tau_bp;
    }
    if b.norm() <= sigma {
        return 0.0;
    }
    let (mut lo, mut hi) = (0.0, tau_bp);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if polytope_distance(a, b, mid) > sigma {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

pub fn bpdn_matches_oracle() -> Check {
    let mut r = rng(15);
    let mut worst = 0.0f64;
    let mut infeasible = 0;
    let mut converged = 0;
    for case in 0..50 {
        let m = r.random_range(1..=3);
        let n = r.random_range(m + 1..=6);
        let data: Vec<f64> = (0..m * n).map(|_| r.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..m).map(|_| r.random_range(-1.0..1.0)).collect();
        let sigma = if case % 3 == 0 { 0.0 } else { r.random_range(0.05..0.5) * norm2(&b) };
        let am = Matrix::from_vec(m, n, data.clone()).map_err(|e| e.to_string())?;
        let sol = solve_bpdn(&am, &b, &BpdnConfig::with_sigma(sigma));
        let oracle = bpdn_oracle(
            &DMatrix::from_row_slice(m, n, &data),
            &DVector::from_column_slice(&b),
            sigma,
        );
        if !sol.converged {
            continue;
        }
        converged += 1;
        let res = norm2(&am.matvec(&sol.x).iter().zip(&b).map(|(x, y)| x - y).collect::<Vec<_>>());
        let bound = if sigma == 0.0 { 1e-10 * norm2(&b) } else { sigma };
        if res > bound * (1.0 + 1e-6) {
            infeasible += 1;
        }
        worst = worst.max((norm1(&sol.x) - oracle).abs() / oracle.max(1e-300));
    }
    let msg = format!("{converged}/50 converged, max rel l1 gap {worst:.2e}, infeasible {infeasible}");
    if worst <= 1e-6 && infeasible == 0 && converged > 0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}
