//! Phase factors for the single-aux signal processor.
//!
//! Rotation: `R(theta, phi, lambda) = [[e^{i(lambda+phi)} c, e^{i phi} s], [e^{i lambda} s, -c]]`.
//! Signal: `A = diag(z, 1)` with `z = e^{i tau}`. The product
//! `R_L A R_{L-1} ... A R_0 |0>` equals `(P(z), Q(z))` with polynomials of
//! degree `L`. The circuit uses `A` for the first `K` gates and
//! `diag(1, 1/z) = A / z` for the rest, so the aux `|0>` amplitude is
//! `z^{-(L-K)} P(z)`. With `L = 2m`, `K = m` and `P(z) = z^m f(z)` that is `f(tau)`.

use std::f64::consts::PI;

use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::numkit::C64;

use super::poly::TrigPolynomial;

const STRIP_TOL: f64 = 1e-10;
const MIN_GRID: usize = 1 << 14;
const MAX_GRID: usize = 1 << 22;

#[derive(Clone, Debug, PartialEq)]
pub struct QspAngles {
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
    pub lambda: f64,
    /// Number of leading gates that use the aux-`|0>` controlled rotation.
    pub anti_count: usize,
}

impl QspAngles {
    pub fn gate_count(&self) -> usize {
        self.theta.len() - 1
    }

    /// Aux rotation applied before gate `j` (or after the last gate when `j = L`).
    pub fn rotation(&self, j: usize) -> [[C64; 2]; 2] {
        let lambda = if j == 0 { self.lambda } else { 0.0 };
        rotation(self.theta[j], self.phi[j], lambda)
    }
}

pub fn rotation(theta: f64, phi: f64, lambda: f64) -> [[C64; 2]; 2] {
    let (s, c) = theta.sin_cos();
    [
        [C64::from_polar(c, lambda + phi), C64::from_polar(s, phi)],
        [C64::from_polar(s, lambda), C64::new(-c, 0.0)],
    ]
}

/// Aux `|0>` amplitude of the circuit with every density exponential replaced
/// by the scalar `e^{+-i tau}`.
pub fn scalar_response(angles: &QspAngles, tau: f64) -> C64 {
    let z = C64::from_polar(1.0, tau);
    let apply = |r: [[C64; 2]; 2], v: [C64; 2]| [r[0][0] * v[0] + r[0][1] * v[1], r[1][0] * v[0] + r[1][1] * v[1]];
    let mut v = apply(angles.rotation(0), [C64::new(1.0, 0.0), C64::new(0.0, 0.0)]);
    for j in 1..=angles.gate_count() {
        if j <= angles.anti_count {
            v[0] *= z;
        } else {
            v[1] /= z;
        }
        v = apply(angles.rotation(j), v);
    }
    v[0]
}

/// Coefficients of the complementary polynomial `Q` with `|P|^2 + |Q|^2 = 1`
/// on the unit circle, from the outer function of `sqrt(1 - |P|^2)`.
pub fn complementary(p: &[C64]) -> Result<Vec<C64>> {
    let deg = p.len() - 1;
    let mut n = MIN_GRID.max((64 * (deg + 1)).next_power_of_two());
    loop {
        let q = outer_complement(p, n)?;
        let residual = complement_residual(p, &q);
        if residual < 1e-11 {
            return Ok(q);
        }
        if n >= MAX_GRID {
            return Err(Error::PhaseSynthesis(format!("complement residual {residual:.2e} at grid {n}")));
        }
        n *= 2;
    }
}

fn outer_complement(p: &[C64], n: usize) -> Result<Vec<C64>> {
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    // values on z_k = e^{2 pi i k / n}
    let mut vals = vec![C64::new(0.0, 0.0); n];
    vals[..p.len()].copy_from_slice(p);
    inv.process(&mut vals);
    let mut excess = 0.0f64;
    for v in vals.iter_mut() {
        let gap = 1.0 - v.norm_sqr();
        excess = excess.max(-gap);
        if gap <= 0.0 {
            return Err(Error::PhaseSynthesis(format!(
                "|f| reaches {:.6}, no complement exists (excess {:.2e})",
                v.norm(),
                (-gap).max(0.0)
            )));
        }
        *v = C64::new(0.5 * gap.ln(), 0.0);
    }
    // Fourier coefficients of log|Q|, then keep the analytic half
    fwd.process(&mut vals);
    let scale = 1.0 / n as f64;
    for (j, v) in vals.iter_mut().enumerate() {
        *v *= scale;
        if j == 0 || j == n / 2 {
        } else if j < n / 2 {
            *v *= 2.0;
        } else {
            *v = C64::new(0.0, 0.0);
        }
    }
    inv.process(&mut vals);
    for v in vals.iter_mut() {
        *v = v.exp();
    }
    fwd.process(&mut vals);
    Ok(vals[..p.len()].iter().map(|v| v * scale).collect())
}

fn eval_poly(c: &[C64], z: C64) -> C64 {
    c.iter().rev().fold(C64::new(0.0, 0.0), |acc, v| acc * z + v)
}

fn complement_residual(p: &[C64], q: &[C64]) -> f64 {
    let pts = 4 * p.len() + 64;
    (0..pts)
        .map(|k| {
            let z = C64::from_polar(1.0, 2.0 * PI * k as f64 / pts as f64);
            (eval_poly(p, z).norm_sqr() + eval_poly(q, z).norm_sqr() - 1.0).abs()
        })
        .fold(0.0, f64::max)
}

/// Layer-stripping from an exact complementary pair of equal length.
pub fn angles_from_pair(p: &[C64], q: &[C64], anti_count: usize) -> Result<QspAngles> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::PhaseSynthesis("polynomial pair must have equal nonzero length".into()));
    }
    let mut p = p.to_vec();
    let mut q = q.to_vec();
    let deg = p.len() - 1;
    let mut theta = vec![0.0; deg + 1];
    let mut phi = vec![0.0; deg + 1];
    for d in (1..=deg).rev() {
        let lead = p[d].norm_sqr() + q[d].norm_sqr();
        let tail = p[0].norm_sqr() + q[0].norm_sqr();
        let (t, f) = if lead >= tail {
            // e^{-i phi} s p_d = c q_d
            ((q[d].norm()).atan2(p[d].norm()), p[d].arg() - q[d].arg())
        } else {
            // e^{-i phi} c p_0 = -s q_0
            ((p[0].norm()).atan2(q[0].norm()), p[0].arg() - q[0].arg() - PI)
        };
        let (s, c) = t.sin_cos();
        let e = C64::from_polar(1.0, -f);
        // R^dag = [[e^{-i phi} c, s], [e^{-i phi} s, -c]]
        let first: Vec<C64> = p.iter().zip(&q).map(|(a, b)| e * c * a + b * s).collect();
        let second: Vec<C64> = p.iter().zip(&q).map(|(a, b)| e * s * a - b * c).collect();
        let scale = lead.max(tail).sqrt().max(1e-300);
        if first[0].norm() > STRIP_TOL.max(1e-8 * scale) || second[d].norm() > STRIP_TOL.max(1e-8 * scale) {
            return Err(Error::PhaseSynthesis(format!(
                "deflation failed at degree {d}: residuals {:.2e}, {:.2e}",
                first[0].norm(),
                second[d].norm()
            )));
        }
        p = first[1..].to_vec();
        q = second[..d].to_vec();
        theta[d] = t;
        phi[d] = f;
    }
    let (a, b) = (p[0], q[0]);
    let norm = (a.norm_sqr() + b.norm_sqr()).sqrt();
    if (norm - 1.0).abs() > 1e-8 {
        return Err(Error::PhaseSynthesis(format!("final layer has norm {norm}")));
    }
    theta[0] = b.norm().atan2(a.norm());
    let lambda = if b.norm() > 1e-300 { b.arg() } else { 0.0 };
    phi[0] = a.arg() - lambda;
    Ok(QspAngles { theta, phi, lambda, anti_count })
}

/// Phase factors that reproduce `f` on the aux `|0>` amplitude.
pub fn poly_to_angles(f: &TrigPolynomial) -> Result<QspAngles> {
    let m = f.degree();
    let p: Vec<C64> = f.coeffs().to_vec();
    if m == 0 {
        let a = p[0];
        if a.norm() > 1.0 + 1e-12 {
            return Err(Error::PhaseSynthesis(format!("|f| exceeds 1 by {:.2e}", a.norm() - 1.0)));
        }
        let b = C64::new((1.0 - a.norm_sqr()).max(0.0).sqrt(), 0.0);
        return angles_from_pair(&[a], &[b], 0);
    }
    let q = complementary(&p)?;
    let angles = angles_from_pair(&p, &q, m)?;
    let worst = TrigPolynomial::grid(512)
        .into_iter()
        .map(|t| (scalar_response(&angles, t) - f.eval(t)).norm())
        .fold(0.0, f64::max);
    if worst > 1e-6 {
        return Err(Error::PhaseSynthesis(format!("scalar check residual {worst:.2e}")));
    }
    Ok(angles)
}
