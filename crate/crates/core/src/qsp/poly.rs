use std::f64::consts::{PI, SQRT_2};

use statrs::function::erf::erfc_inv;

use crate::error::{Error, Result};
use crate::numkit::C64;

/// Points used by every dense grid check.
pub const GRID_POINTS: usize = 10_000;
const DEGREE_CAP: usize = 10_000;
/// Truncation ripple allowed, as a fraction of the flatness. Keeping it well
/// below the flatness leaves eigenphases inside the flat zones nearly exact.
const RIPPLE_FRACTION: f64 = 1.0 / 64.0;

/// Periodic step: 1 on `(s, s + pi)`, 0 on `(s - pi, s)`, with transition
/// zones of half-width `halfwidth` around both edges.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSpec {
    pub shift: f64,
    pub halfwidth: f64,
    pub flatness: f64,
}

impl StepSpec {
    pub fn new(shift: f64, halfwidth: f64, flatness: f64) -> Result<Self> {
        if !(halfwidth > 0.0 && halfwidth < 0.5) {
            return Err(Error::InvalidParameter(format!("step halfwidth {halfwidth} outside (0, 1/2)")));
        }
        if !(shift - halfwidth > 0.0 && shift + halfwidth < PI) {
            return Err(Error::InvalidParameter(format!(
                "transition zone ({}, {}) leaves (0, pi)",
                shift - halfwidth,
                shift + halfwidth
            )));
        }
        if !(flatness > 0.0 && flatness < 0.5) {
            return Err(Error::InvalidParameter(format!("flatness {flatness} outside (0, 1/2)")));
        }
        Ok(Self { shift, halfwidth, flatness })
    }

    /// Step centered between two phases, with the zone filling the middle half of the gap.
    pub fn between(lo: f64, hi: f64, flatness: f64) -> Result<Self> {
        if !(hi > lo) {
            return Err(Error::Infeasible(format!("phases {lo} and {hi} are not ordered")));
        }
        Self::new((lo + hi) / 2.0, (hi - lo) / 4.0, flatness)
    }

    /// `tau - s` reduced to `[-pi, pi)`.
    fn offset(&self, tau: f64) -> f64 {
        (tau - self.shift + PI).rem_euclid(2.0 * PI) - PI
    }

    pub fn step(&self, tau: f64) -> f64 {
        if self.offset(tau) > 0.0 { 1.0 } else { 0.0 }
    }

    pub fn in_transition(&self, tau: f64) -> bool {
        let o = self.offset(tau);
        o.abs() < self.halfwidth || (PI - o.abs()) < self.halfwidth
    }
}

/// `f(tau) = sum_j c_j e^{i j tau}` for `j` in `-degree..=degree`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrigPolynomial {
    coeffs: Vec<C64>,
}

impl TrigPolynomial {
    pub fn new(coeffs: Vec<C64>) -> Result<Self> {
        if coeffs.len() % 2 == 0 {
            return Err(Error::InvalidParameter("trig polynomial needs 2L+1 coefficients".into()));
        }
        Ok(Self { coeffs })
    }

    pub fn constant(c: C64) -> Self {
        Self { coeffs: vec![c] }
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() / 2
    }

    /// Coefficient of `e^{i j tau}`.
    pub fn coeff(&self, j: i64) -> C64 {
        let idx = j + self.degree() as i64;
        if idx < 0 || idx as usize >= self.coeffs.len() {
            C64::new(0.0, 0.0)
        } else {
            self.coeffs[idx as usize]
        }
    }

    pub fn coeffs(&self) -> &[C64] {
        &self.coeffs
    }

    pub fn eval(&self, tau: f64) -> C64 {
        let m = self.degree() as i64;
        let z = C64::from_polar(1.0, tau);
        let mut acc = C64::new(0.0, 0.0);
        for c in self.coeffs.iter().rev() {
            acc = acc * z + c;
        }
        acc * C64::from_polar(1.0, -(m as f64) * tau)
    }

    pub fn grid(points: usize) -> Vec<f64> {
        (0..points).map(|g| -PI + 2.0 * PI * g as f64 / points as f64).collect()
    }

    pub fn max_abs(&self, points: usize) -> f64 {
        Self::grid(points).into_iter().map(|t| self.eval(t).norm()).fold(0.0, f64::max)
    }

    /// Largest `|f - step|` on grid points outside the transition zones.
    pub fn flatness_error(&self, spec: &StepSpec, points: usize) -> f64 {
        Self::grid(points)
            .into_iter()
            .filter(|&t| !spec.in_transition(t))
            .map(|t| (self.eval(t) - spec.step(t)).norm())
            .fold(0.0, f64::max)
    }
}

fn smoothing_width(spec: &StepSpec) -> f64 {
    spec.halfwidth / (SQRT_2 * erfc_inv(spec.flatness / 2.0))
}

/// Upper bound on the harmonics of the smoothed square wave beyond order `m`.
fn truncation_ripple(width: f64, m: usize) -> f64 {
    let mut tail = 0.0;
    for j in (m + 1)..=(100 * DEGREE_CAP) {
        let jf = j as f64;
        let term = 2.0 / (jf * PI) * (-(jf * width).powi(2) / 2.0).exp();
        tail += term;
        if term < 1e-18 {
            break;
        }
    }
    tail
}

/// Gaussian-smoothed square wave truncated at the minimal passing degree.
///
/// The smoothing width puts a tail of `delta / 4` at the zone edges, the
/// dropped harmonics sum to at most `delta / 64`, and the result is scaled by
/// `1 - eta` so the modulus stays strictly below one.
pub fn build_step_poly(spec: &StepSpec) -> Result<TrigPolynomial> {
    let delta = spec.flatness;
    let width = smoothing_width(spec);
    let eta = (delta / 4.0).min(1e-4);
    let center = spec.shift + PI / 2.0;
    let grid = TrigPolynomial::grid(GRID_POINTS);
    let keep: Vec<bool> = grid.iter().map(|&t| !spec.in_transition(t)).collect();
    let target: Vec<f64> = grid.iter().map(|&t| spec.step(t)).collect();
    let cosu: Vec<f64> = grid.iter().map(|&t| (t - center).cos()).collect();

    // real amplitudes of cos(j u), j = 0..=m
    let amps = |m: usize| -> Vec<f64> {
        (0..=m)
            .map(|j| {
                if j == 0 {
                    0.5
                } else {
                    let jf = j as f64;
                    2.0 * (jf * PI / 2.0).sin() / (jf * PI) * (-(jf * width).powi(2) / 2.0).exp()
                }
            })
            .collect()
    };
    // returns (passes, scale, achieved deviation)
    let check = |m: usize| -> (bool, f64, f64) {
        if truncation_ripple(width, m) > RIPPLE_FRACTION * delta {
            return (false, 1.0, f64::INFINITY);
        }
        let a = amps(m);
        let mut vals = vec![0.0; grid.len()];
        for (g, v) in vals.iter_mut().enumerate() {
            let c1 = cosu[g];
            let (mut prev, mut cur) = (1.0, c1);
            let mut acc = a[0];
            for aj in a.iter().skip(1) {
                acc += aj * cur;
                let next = 2.0 * c1 * cur - prev;
                prev = cur;
                cur = next;
            }
            *v = acc;
        }
        let peak = vals.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        let scale = (1.0 - eta) / peak.max(1.0);
        let dev = vals
            .iter()
            .zip(&target)
            .zip(&keep)
            .filter(|(_, k)| **k)
            .map(|((v, t), _)| (v * scale - t).abs())
            .fold(0.0f64, f64::max);
        (dev <= delta, scale, dev)
    };

    let mut hi = 1usize;
    let mut last = check(hi);
    while !last.0 {
        if hi >= DEGREE_CAP {
            return Err(Error::Infeasible(format!(
                "step polynomial reaches deviation {:.3e} > {delta} at degree cap {DEGREE_CAP}",
                last.2
            )));
        }
        hi = (hi * 2).min(DEGREE_CAP);
        last = check(hi);
    }
    let mut lo = hi / 2;
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if check(mid).0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let (_, scale, _) = check(hi);
    let a = amps(hi);
    let mut coeffs = vec![C64::new(0.0, 0.0); 2 * hi + 1];
    coeffs[hi] = C64::new(a[0] * scale, 0.0);
    for j in 1..=hi {
        let c = C64::from_polar(a[j] * scale / 2.0, -(j as f64) * center);
        coeffs[hi + j] = c;
        coeffs[hi - j] = c.conj();
    }
    TrigPolynomial::new(coeffs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reference_spec_fits_within_forty() {
        let spec = StepSpec::new(PI / 2.0, 0.3, 0.1).unwrap();
        let f = build_step_poly(&spec).unwrap();
        assert!(f.degree() <= 40, "degree {}", f.degree());
        assert!(f.max_abs(GRID_POINTS) <= 1.0 + 1e-9);
        assert!(f.flatness_error(&spec, GRID_POINTS) <= 0.1);
    }

    #[test]
    fn flat_zone_values() {
        let spec = StepSpec::new(0.7, 0.2, 0.05).unwrap();
        let f = build_step_poly(&spec).unwrap();
        let hi = f.eval(spec.shift + PI / 2.0);
        let lo = f.eval(spec.shift - PI / 2.0);
        assert!(hi.re >= 1.0 - 0.05 && hi.norm() <= 1.0);
        assert!(lo.norm() <= 0.05);
        assert!(hi.im.abs() < 1e-12);
    }

    #[test]
    fn halving_width_doubles_degree() {
        for delta in [0.1, 0.02] {
            let a = build_step_poly(&StepSpec::new(1.0, 0.3, delta).unwrap()).unwrap().degree();
            let b = build_step_poly(&StepSpec::new(1.0, 0.15, delta).unwrap()).unwrap().degree();
            let ratio = b as f64 / a as f64;
            assert!((1.6..=2.6).contains(&ratio), "delta {delta}: {a} -> {b}");
        }
    }

    #[test]
    fn degree_is_minimal_for_the_construction() {
        let spec = StepSpec::new(0.5, 0.25, 0.025).unwrap();
        let f = build_step_poly(&spec).unwrap();
        let m = f.degree();
        let lower: Vec<C64> = f.coeffs()[1..f.coeffs().len() - 1].to_vec();
        let g = TrigPolynomial::new(lower).unwrap();
        assert_eq!(g.degree(), m - 1);
        let width = smoothing_width(&spec);
        assert!(truncation_ripple(width, m) <= 0.025 * RIPPLE_FRACTION);
        let ripple_fails = truncation_ripple(width, m - 1) > 0.025 * RIPPLE_FRACTION;
        assert!(ripple_fails || g.flatness_error(&spec, GRID_POINTS) > 0.025 * 0.9);
    }

    #[test]
    fn spec_validation() {
        assert!(StepSpec::new(0.1, 0.2, 0.1).is_err());
        assert!(StepSpec::new(1.0, 0.6, 0.1).is_err());
        assert!(StepSpec::between(0.5, 0.2, 0.1).is_err());
        let s = StepSpec::between(0.1, 0.9, 0.05).unwrap();
        assert!((s.shift - 0.5).abs() < 1e-15 && (s.halfwidth - 0.2).abs() < 1e-15);
        assert!(s.in_transition(0.45) && s.in_transition(0.5 + PI - 0.1) && !s.in_transition(0.9));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn built_polynomials_meet_grid_contract(
            shift in 0.6f64..2.5,
            halfwidth in 0.1f64..0.45,
            delta in 0.01f64..0.2,
        ) {
            let spec = StepSpec::new(shift, halfwidth, delta).unwrap();
            let f = build_step_poly(&spec).unwrap();
            prop_assert!(f.max_abs(GRID_POINTS) <= 1.0 + 1e-9);
            prop_assert!(f.flatness_error(&spec, GRID_POINTS) <= delta);
            for t in TrigPolynomial::grid(257) {
                prop_assert!(f.eval(t).im.abs() < 1e-10);
            }
        }
    }
}
