//! Classical comparison: direct-detection tomography, eigenvector
//! perturbation, closed-form sampling complexities and resource counts.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numkit::{eigh, ComplexMatrix, DensityOperator, PureState, C64, I, ONE};

/// Single-copy projective measurement design.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Design {
    /// Computational basis plus, for every pair `i < j`, the bases that swap
    /// `e_i, e_j` for `(e_i +- e_j)/sqrt 2` and `(e_i +- i e_j)/sqrt 2`.
    Pairwise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reconstructor {
    LinearInversion,
    DilutedMle,
}

impl Reconstructor {
    pub fn as_str(self) -> &'static str {
        match self {
            Reconstructor::LinearInversion => "linear_inversion",
            Reconstructor::DilutedMle => "diluted_mle",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Copies {
    /// Exact outcome probabilities.
    Analytic,
    Finite(u64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TomographyConfig {
    pub copies: Copies,
    pub design: Design,
    pub reconstructor: Reconstructor,
    pub seed: u64,
    pub stream: u64,
    pub mle_max_iterations: usize,
    pub mle_tolerance: f64,
    pub mle_dilution: f64,
}

impl TomographyConfig {
    pub fn new(copies: Copies, reconstructor: Reconstructor, seed: u64) -> Self {
        Self {
            copies,
            design: Design::Pairwise,
            reconstructor,
            seed,
            stream: 0,
            mle_max_iterations: 2000,
            mle_tolerance: 1e-10,
            mle_dilution: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Setting {
    Computational,
    /// Outcome `i` is `(e_i + phase e_j)/sqrt 2`, outcome `j` the minus sign.
    Pair { i: usize, j: usize, phase: C64 },
}

fn settings(design: Design, dim: usize) -> Vec<Setting> {
    match design {
        Design::Pairwise => {
            let mut out = vec![Setting::Computational];
            for i in 0..dim {
                for j in i + 1..dim {
                    out.push(Setting::Pair { i, j, phase: ONE });
                    out.push(Setting::Pair { i, j, phase: I });
                }
            }
            out
        }
    }
}

fn outcome_probs(rho: &ComplexMatrix, setting: Setting) -> Vec<f64> {
    let d = rho.rows();
    let mut p: Vec<f64> = (0..d).map(|k| rho.get(k, k).re).collect();
    if let Setting::Pair { i, j, phase } = setting {
        let mean = 0.5 * (rho.get(i, i).re + rho.get(j, j).re);
        let cross = (phase * rho.get(i, j)).re;
        p[i] = mean + cross;
        p[j] = mean - cross;
    }
    p.iter_mut().for_each(|v| *v = v.max(0.0));
    p
}

/// Adds `w |v><v|` for outcome `k` of a setting.
fn add_projector(acc: &mut ComplexMatrix, setting: Setting, k: usize, w: f64) {
    match setting {
        Setting::Pair { i, j, phase } if k == i || k == j => {
            let s = if k == i { 1.0 } else { -1.0 };
            acc.add_at(i, i, C64::new(0.5 * w, 0.0));
            acc.add_at(j, j, C64::new(0.5 * w, 0.0));
            acc.add_at(i, j, phase.conj() * (0.5 * s * w));
            acc.add_at(j, i, phase * (0.5 * s * w));
        }
        _ => acc.add_at(k, k, C64::new(w, 0.0)),
    }
}

/// Rank of the frame spanned by the design's projectors, in real parameters.
pub fn frame_rank(design: Design, dim: usize) -> usize {
    let n = dim * dim;
    let mut gram = DMatrix::<f64>::zeros(n, n);
    let mut coords = vec![0.0; n];
    for s in settings(design, dim) {
        for k in 0..dim {
            let mut p = ComplexMatrix::zeros(dim, dim);
            add_projector(&mut p, s, k, 1.0);
            let mut idx = 0;
            for a in 0..dim {
                coords[idx] = p.get(a, a).re;
                idx += 1;
                for b in a + 1..dim {
                    coords[idx] = p.get(a, b).re * std::f64::consts::SQRT_2;
                    coords[idx + 1] = p.get(a, b).im * std::f64::consts::SQRT_2;
                    idx += 2;
                }
            }
            for x in 0..n {
                if coords[x] != 0.0 {
                    for y in 0..n {
                        gram[(x, y)] += coords[x] * coords[y];
                    }
                }
            }
        }
    }
    let eig = SymmetricEigen::new(gram);
    let top = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(*v));
    eig.eigenvalues.iter().filter(|v| **v > 1e-10 * top).count()
}

/// Per-setting outcome frequencies.
fn frequencies(rho: &DensityOperator, design: Design, copies: Copies, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    let set = settings(design, rho.dim());
    let per = match copies {
        Copies::Analytic => None,
        Copies::Finite(m) => {
            if m < set.len() as u64 {
                return Err(Error::InvalidParameter(format!("{m} copies cannot cover {} settings", set.len())));
            }
            Some(m)
        }
    };
    let ns = set.len() as u64;
    set.iter()
        .enumerate()
        .map(|(idx, &s)| {
            let p = outcome_probs(rho.matrix(), s);
            let Some(m) = per else { return Ok(p) };
            let n = m / ns + u64::from((idx as u64) < m % ns);
            let mut left = n;
            let mut mass = p.iter().sum::<f64>();
            let mut f = vec![0.0; p.len()];
            for (k, pk) in p.iter().enumerate() {
                if left == 0 || mass <= 0.0 {
                    break;
                }
                let q = (pk / mass).clamp(0.0, 1.0);
                let c = Binomial::new(left, q).map_err(|e| Error::InvalidParameter(e.to_string()))?.sample(rng);
                f[k] = c as f64 / n as f64;
                left -= c;
                mass -= pk;
            }
            Ok(f)
        })
        .collect()
}

fn linear_inversion(freq: &[Vec<f64>], set: &[Setting], dim: usize) -> ComplexMatrix {
    let mut m = ComplexMatrix::zeros(dim, dim);
    let mut diag = vec![(0.0, 0usize); dim];
    for (s, f) in set.iter().zip(freq) {
        for (k, slot) in diag.iter_mut().enumerate() {
            let touched = matches!(s, Setting::Pair { i, j, .. } if *i == k || *j == k);
            if !touched {
                slot.0 += f[k];
                slot.1 += 1;
            }
        }
        if let Setting::Pair { i, j, phase } = *s {
            // f+ - f- = 2 Re(phase rho_ij)
            let v = 0.5 * (f[i] - f[j]);
            let cur = m.get(i, j);
            let upd = if phase == ONE { C64::new(v, cur.im) } else { C64::new(cur.re, -v) };
            m.set(i, j, upd);
            m.set(j, i, upd.conj());
        }
    }
    for (k, (sum, count)) in diag.into_iter().enumerate() {
        m.set(k, k, C64::new(sum / count as f64, 0.0));
    }
    m
}

/// Clips negative eigenvalues and renormalizes.
pub fn project_to_density(m: &ComplexMatrix) -> Result<DensityOperator> {
    let e = eigh(&m.symmetrized())?;
    let clipped: Vec<f64> = e.values.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = clipped.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidDensity("reconstruction has no positive eigenvalue".into()));
    }
    let d = m.rows();
    let mut out = ComplexMatrix::zeros(d, d);
    for (k, w) in clipped.iter().enumerate() {
        if *w > 0.0 {
            let v = e.vector(k);
            out.axpy(C64::new(w / total, 0.0), &ComplexMatrix::outer(&v, &v))?;
        }
    }
    DensityOperator::new(out.symmetrized())
}

/// Fixed-point iteration started from the projected linear inversion,
/// mixed with a little of the identity so no outcome has zero weight.
fn diluted_mle(freq: &[Vec<f64>], set: &[Setting], dim: usize, cfg: &TomographyConfig) -> Result<(ComplexMatrix, usize)> {
    let ns = set.len() as f64;
    let start = project_to_density(&linear_inversion(freq, set, dim))?;
    let mut rho = start.matrix().scale_real(1.0 - 1e-6);
    rho.axpy(C64::new(1e-6 / dim as f64, 0.0), &ComplexMatrix::identity(dim))?;
    for it in 0..cfg.mle_max_iterations {
        let mut r = ComplexMatrix::zeros(dim, dim);
        for (s, f) in set.iter().zip(freq) {
            let p = outcome_probs(&rho, *s);
            for k in 0..dim {
                if f[k] > 0.0 {
                    add_projector(&mut r, *s, k, f[k] / p[k].max(1e-12) / ns);
                }
            }
        }
        let mut step = ComplexMatrix::identity(dim);
        step.axpy(C64::new(cfg.mle_dilution, 0.0), &r)?;
        let next = step.matmul(&rho)?.matmul(&step.adjoint())?;
        let next = next.scale_real(1.0 / next.trace().re).symmetrized();
        let change = next.sub(&rho)?.max_abs();
        rho = next;
        if change < cfg.mle_tolerance {
            return Ok((rho, it + 1));
        }
    }
    Ok((rho, cfg.mle_max_iterations))
}

#[derive(Clone, Debug)]
pub struct TomographyResult {
    pub rho_bar: DensityOperator,
    /// `||rho_bar - rho||_1`
    pub trace_error: f64,
    pub iterations: usize,
}

pub fn simulate_tomography(rho: &DensityOperator, cfg: &TomographyConfig) -> Result<TomographyResult> {
    let d = rho.dim();
    let set = settings(cfg.design, d);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(cfg.stream);
    let freq = frequencies(rho, cfg.design, cfg.copies, &mut rng)?;
    let (raw, iterations) = match cfg.reconstructor {
        Reconstructor::LinearInversion => (linear_inversion(&freq, &set, d), 0),
        Reconstructor::DilutedMle => diluted_mle(&freq, &set, d, cfg)?,
    };
    let rho_bar = project_to_density(&raw)?;
    let trace_error = rho_bar.matrix().sub(rho.matrix())?.trace_norm_hermitian()?;
    Ok(TomographyResult { rho_bar, trace_error, iterations })
}

/// One tracked eigenvector, 0 being the top one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EigenDeviation {
    pub index: usize,
    /// Phase-aligned `|| V_k - V_k(rho_bar) ||`.
    pub vector_error: f64,
    pub value_error: f64,
    /// `eps_tom / gap`, absent when the gap vanishes.
    pub bound: Option<f64>,
    pub ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EigenErrorReport {
    pub eps_tom: f64,
    pub tracked: Vec<EigenDeviation>,
}

impl EigenErrorReport {
    pub fn max_vector_error(&self) -> f64 {
        self.tracked.iter().map(|t| t.vector_error).fold(0.0, f64::max)
    }
}

/// `|| a - e^{i phi} b ||` minimized over `phi`.
pub fn aligned_distance(a: &[C64], b: &[C64]) -> f64 {
    let ov = crate::numkit::inner(a, b);
    let phase = if ov.norm() > 0.0 { ov.conj() / ov.norm() } else { ONE };
    a.iter().zip(b).map(|(x, y)| (x - y * phase).norm_sqr()).sum::<f64>().sqrt()
}

/// Deviations of the top `tracked` eigenvectors. Each one is paired with
/// the eigenvector of `rho_bar` it overlaps most, so crossings in the
/// perturbed spectrum do not swap labels.
pub fn eigen_error(rho: &DensityOperator, rho_bar: &DensityOperator, tracked: usize) -> Result<EigenErrorReport> {
    let d = rho.dim();
    if rho_bar.dim() != d || tracked == 0 || tracked > d {
        return Err(Error::Dimension(format!("cannot track {tracked} eigenvectors of a {d}-dim pair")));
    }
    let eps_tom = rho_bar.matrix().sub(rho.matrix())?.trace_norm_hermitian()?;
    let e = rho.spectrum()?;
    let f = rho_bar.spectrum()?;
    let mut out = Vec::with_capacity(tracked);
    for t in 0..tracked {
        let k = d - 1 - t;
        let v = e.vector(k);
        let (best, _) = (0..d)
            .map(|j| (j, crate::numkit::inner(&v, &f.vector(j)).norm()))
            .fold((0, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        let gap = (0..d).filter(|&j| j != k).map(|j| (e.values[k] - e.values[j]).abs()).fold(f64::INFINITY, f64::min);
        let vector_error = aligned_distance(&v, &f.vector(best));
        let bound = (gap > 1e-12).then(|| eps_tom / gap);
        out.push(EigenDeviation {
            index: t,
            vector_error,
            value_error: (e.values[k] - f.values[best]).abs(),
            bound,
            ratio: bound.filter(|b| *b > 0.0).map(|b| vector_error / b),
        });
    }
    Ok(EigenErrorReport { eps_tom, tracked: out })
}

/// Random rank-2 state `r V1 + (1-r) V2`, plus its eigenvectors.
pub fn rank_two_state(dim: usize, r: f64, rng: &mut ChaCha8Rng) -> Result<(DensityOperator, [PureState; 3])> {
    if dim < 3 {
        return Err(Error::Dimension("need three orthogonal directions".into()));
    }
    let mut basis: Vec<PureState> = Vec::with_capacity(3);
    while basis.len() < 3 {
        let mut v = PureState::random(dim, rng).into_amps();
        for b in &basis {
            let ov = crate::numkit::inner(b.amps(), &v);
            v.iter_mut().zip(b.amps()).for_each(|(x, y)| *x -= ov * y);
        }
        if let Ok(p) = PureState::new(v) {
            basis.push(p);
        }
    }
    let mut m = ComplexMatrix::zeros(dim, dim);
    m.axpy(C64::new(r, 0.0), &basis[0].projector())?;
    m.axpy(C64::new(1.0 - r, 0.0), &basis[1].projector())?;
    let [a, b, c]: [PureState; 3] = basis.try_into().expect("three vectors");
    Ok((DensityOperator::new(m)?, [a, b, c]))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DkCell {
    pub r: f64,
    pub eps_tom: f64,
    /// Absent when `eps_tom >= 1 - r`.
    pub ratio: Option<f64>,
}

/// Ratio of the actual deviation of `V_2` to `eps_tom / (1 - r)` under
/// `rho_pert = (1 - eps) rho + eps |V+><V+|`, `V+ = (V_pert + V_2)/sqrt 2`.
pub fn dk_cell(r: f64, eps_tom: f64, dim: usize, seed: u64) -> Result<DkCell> {
    if !(eps_tom > 0.0 && eps_tom < 1.0 - r) {
        return Ok(DkCell { r, eps_tom, ratio: None });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rho, [_, v2, vp]) = rank_two_state(dim, r, &mut rng)?;
    let plus: Vec<C64> = vp.amps().iter().zip(v2.amps()).map(|(a, b)| (a + b) / 2f64.sqrt()).collect();
    let plus = PureState::new(plus)?;
    let pert = DensityOperator::mixture(&[(1.0 - eps_tom, &rho), (eps_tom, &DensityOperator::from_pure(&plus))])?;
    let report = eigen_error(&rho, &pert, 2)?;
    Ok(DkCell { r, eps_tom, ratio: Some(report.tracked[1].vector_error / (eps_tom / (1.0 - r))) })
}

/// Grid over `r` and over `eps_tom` given as fractions of `1 - r`.
pub fn dk_experiment(r_grid: &[f64], fractions: &[f64], dim: usize, seed: u64) -> Result<Vec<DkCell>> {
    let cells: Vec<(f64, f64)> =
        r_grid.iter().flat_map(|&r| fractions.iter().map(move |&f| (r, f * (1.0 - r)))).collect();
    cells.par_iter().enumerate().map(|(i, &(r, e))| dk_cell(r, e, dim, seed.wrapping_add(i as u64))).collect()
}

pub fn dk_csv(cells: &[DkCell]) -> String {
    let mut out = String::from("r,eps_tom,ratio\n");
    for c in cells {
        let ratio = c.ratio.map_or("skipped".to_string(), |v| format!("{v:e}"));
        let _ = writeln!(out, "{:e},{:e},{}", c.r, c.eps_tom, ratio);
    }
    out
}

/// Multipliers for the hidden constants of every closed form.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ComplexityConstants {
    pub qsp: f64,
    pub qsp_noisy: f64,
    pub tom: f64,
    pub tom_full: f64,
    pub two_stage: f64,
    pub alt_scheme: f64,
}

impl Default for ComplexityConstants {
    fn default() -> Self {
        Self { qsp: 1.0, qsp_noisy: 1.0, tom: 1.0, tom_full: 1.0, two_stage: 1.0, alt_scheme: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ComplexityParams {
    pub n: usize,
    pub r: f64,
    pub gamma: f64,
    pub eps_st: f64,
    pub constants: ComplexityConstants,
}

impl ComplexityParams {
    pub fn new(n: usize, r: f64, gamma: f64, eps_st: f64) -> Result<Self> {
        if !(eps_st > 0.0 && eps_st < 1.0) || !(r > 0.5 && r < 1.0) || !(0.0..1.0).contains(&gamma) || n < 1 {
            return Err(Error::InvalidParameter(format!("complexity params N={n}, r={r}, gamma={gamma}, eps={eps_st}")));
        }
        Ok(Self { n, r, gamma, eps_st, constants: ComplexityConstants::default() })
    }
}

/// Closed forms with natural logarithms; `delta` is taken equal to `eps_st`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ComplexityRow {
    pub params: ComplexityParams,
    pub m_qsp_free: f64,
    pub m_qsp_noisy: f64,
    pub m_tom_rank2: f64,
    pub m_tom_full: f64,
    pub two_stage: f64,
    pub alt_scheme: f64,
    /// Quantum cost for the row's noise level.
    pub m_qsp: f64,
    /// Tomography cost for the row's noise level.
    pub m_tom: f64,
    pub ratio: f64,
}

pub fn complexity_row(p: ComplexityParams) -> ComplexityRow {
    let c = p.constants;
    let (eps, r, g) = (p.eps_st, p.r, p.gamma);
    let n = p.n as f64;
    let log = (1.0 / eps).ln();
    let gap = 1.0 - r;
    let m_qsp_free = c.qsp * log * log / (gap * eps.powi(3));
    // the noisy form carries (1-r)^-3 and does not reduce to the free one at gamma = 0
    let m_qsp_noisy = if g == 0.0 {
        m_qsp_free
    } else {
        c.qsp_noisy * log * log / ((1.0 - g).powi(2) * gap.powi(3) * eps.powi(3))
    };
    let m_tom_rank2 = c.tom * 4.0 * n * n * (1.0 / (eps * gap)).ln() / (eps * eps * gap * gap);
    let m_tom_full = c.tom_full * n.powi(6) / (eps * eps * gap * gap);
    let two_stage = c.two_stage * (1.0 + (1.0 - g).powi(-2) * gap.powi(-2)) * log * log / eps;
    let alt_scheme = c.alt_scheme * log.powi(4) * (gap + g * r - g / (n * n)).powi(2)
        / (eps * eps * ((2.0 * r - 1.0) * (1.0 - g) * gap).powi(2));
    let (m_qsp, m_tom) = if g == 0.0 { (m_qsp_free, m_tom_rank2) } else { (m_qsp_noisy, m_tom_full) };
    ComplexityRow { params: p, m_qsp_free, m_qsp_noisy, m_tom_rank2, m_tom_full, two_stage, alt_scheme, m_qsp, m_tom, ratio: m_tom / m_qsp }
}

pub fn complexity_tables(grid: &[ComplexityParams]) -> Vec<ComplexityRow> {
    grid.iter().map(|p| complexity_row(*p)).collect()
}

pub const COMPLEXITY_HEADER: &str = "N,r,gamma,eps_st,m_qsp,m_tom,ratio,c_qsp,c_qsp_noisy,c_tom,c_tom_full,c_two_stage,c_alt_scheme,m_qsp_free,m_qsp_noisy,m_tom_rank2,m_tom_full,two_stage,alt_scheme,delta,log_base";

pub fn complexity_csv(rows: &[ComplexityRow]) -> String {
    let mut out = format!("{COMPLEXITY_HEADER}\n");
    for row in rows {
        let p = row.params;
        let c = p.constants;
        let _ = writeln!(
            out,
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{},{},{},{},{},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},e",
            p.n, p.r, p.gamma, p.eps_st, row.m_qsp, row.m_tom, row.ratio,
            c.qsp, c.qsp_noisy, c.tom, c.tom_full, c.two_stage, c.alt_scheme,
            row.m_qsp_free, row.m_qsp_noisy, row.m_tom_rank2, row.m_tom_full, row.two_stage, row.alt_scheme, p.eps_st,
        );
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResourceReport {
    pub n: usize,
    pub eps_st: f64,
    pub gate_constant: f64,
    pub snr: f64,
    pub pixel_qubits: u64,
    pub memory_qubits: u64,
    pub compression_gates: u64,
    pub processing_gates: u64,
    pub total_gates: u64,
    pub gate_error_threshold: f64,
}

/// Qubit and gate counts; the error threshold assumes one gate error ruins
/// a run, divided by the SNR.
pub fn resource_counts(n: usize, eps_st: f64, gate_constant: f64, snr: f64) -> Result<ResourceReport> {
    if n < 2 {
        return Err(Error::InvalidParameter(format!("N = {n} must be at least 2")));
    }
    if !(eps_st > 0.0 && eps_st < 1.0) || !(snr > 0.0) || !(gate_constant > 0.0) {
        return Err(Error::InvalidParameter(format!("eps = {eps_st}, snr = {snr}, c = {gate_constant}")));
    }
    let log2n = (n as f64).log2();
    let register = (2.0 * log2n - 1e-12).ceil() as u64;
    let compression_gates = ((n * n) as f64 * log2n - 1e-9).ceil() as u64;
    let per_register = (gate_constant * (1.0 / eps_st).ln().powi(2) / eps_st - 1e-9).ceil() as u64;
    let processing_gates = per_register * register;
    let total_gates = compression_gates + processing_gates;
    Ok(ResourceReport {
        n,
        eps_st,
        gate_constant,
        snr,
        pixel_qubits: (n * n) as u64,
        memory_qubits: 5 * register + 1,
        compression_gates,
        processing_gates,
        total_gates,
        gate_error_threshold: 1.0 / (total_gates as f64 * snr),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TomographyRow {
    pub dim: usize,
    pub copies: u64,
    pub trace_error: f64,
    pub eigvec_error: f64,
    pub seed: u64,
}

/// Rank-2 states with top eigenvalue `r`; one row per `(dim, M)` cell.
pub fn tomography_sweep(dims: &[usize], copies: &[u64], r: f64, reconstructor: Reconstructor, seed: u64) -> Result<Vec<TomographyRow>> {
    let cells: Vec<(usize, u64)> = dims.iter().flat_map(|&d| copies.iter().map(move |&m| (d, m))).collect();
    cells
        .par_iter()
        .enumerate()
        .map(|(i, &(dim, m))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(dim as u64);
            let (rho, _) = rank_two_state(dim, r, &mut rng)?;
            let mut cfg = TomographyConfig::new(Copies::Finite(m), reconstructor, seed);
            cfg.stream = i as u64 + 1;
            let res = simulate_tomography(&rho, &cfg)?;
            let report = eigen_error(&rho, &res.rho_bar, 2)?;
            Ok(TomographyRow { dim, copies: m, trace_error: res.trace_error, eigvec_error: report.max_vector_error(), seed })
        })
        .collect()
}

pub fn tomography_csv(rows: &[TomographyRow]) -> String {
    let mut out = String::from("dim,M,trace_error,eigvec_error,seed\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{:e},{:e},{}", r.dim, r.copies, r.trace_error, r.eigvec_error, r.seed);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qpca::loglog_slope;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    fn state(dim: usize, seed: u64) -> DensityOperator {
        rank_two_state(dim, 0.8, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap().0
    }

    #[test]
    fn design_is_informationally_complete() {
        for d in [2, 3, 4, 6] {
            assert_eq!(frame_rank(Design::Pairwise, d), d * d);
        }
    }

    #[test]
    fn analytic_limit_is_exact() {
        let rho = state(5, 1);
        for rec in [Reconstructor::LinearInversion, Reconstructor::DilutedMle] {
            let res = simulate_tomography(&rho, &TomographyConfig::new(Copies::Analytic, rec, 0)).unwrap();
            let tol = if rec == Reconstructor::LinearInversion { 1e-10 } else { 1e-3 };
            assert!(res.trace_error < tol, "{}: {}", rec.as_str(), res.trace_error);
        }
    }

    #[test]
    fn linear_inversion_error_scales_as_shot_noise() {
        let rho = state(16, 2);
        let ms = [20_000u64, 80_000, 320_000, 1_280_000];
        let errs: Vec<f64> = ms
            .iter()
            .map(|&m| {
                (0..4)
                    .map(|s| {
                        let mut cfg = TomographyConfig::new(Copies::Finite(m), Reconstructor::LinearInversion, 3);
                        cfg.stream = s;
                        simulate_tomography(&rho, &cfg).unwrap().trace_error
                    })
                    .sum::<f64>()
                    / 4.0
            })
            .collect();
        let xs: Vec<f64> = ms.iter().map(|&m| m as f64).collect();
        let slope = loglog_slope(&xs, &errs);
        assert!((slope + 0.5).abs() <= 0.1, "slope {slope}, errors {errs:?}");
    }

    #[test]
    fn error_grows_with_dimension() {
        let errs: Vec<f64> = [4usize, 16, 64]
            .iter()
            .map(|&d| {
                let cfg = TomographyConfig::new(Copies::Finite(400_000), Reconstructor::LinearInversion, 4);
                simulate_tomography(&state(d, 5), &cfg).unwrap().trace_error
            })
            .collect();
        assert!(errs[0] < errs[1] && errs[1] < errs[2], "{errs:?}");
    }

    #[test]
    fn mle_is_a_valid_density_and_close() {
        let rho = state(4, 6);
        let cfg = TomographyConfig::new(Copies::Finite(50_000), Reconstructor::DilutedMle, 7);
        let res = simulate_tomography(&rho, &cfg).unwrap();
        assert!(res.trace_error < 0.1, "{}", res.trace_error);
        assert!((res.rho_bar.matrix().trace().re - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_states_have_no_deviation() {
        let rho = state(4, 8);
        let rep = eigen_error(&rho, &rho, 2).unwrap();
        assert!(rep.eps_tom < 1e-12);
        for t in &rep.tracked {
            assert!(t.vector_error < 1e-7 && t.value_error < 1e-12);
        }
    }

    #[test]
    fn perturbation_ratio_is_bounded() {
        let cell = dk_cell(0.8, 0.05, 4, 9).unwrap();
        let ratio = cell.ratio.unwrap();
        assert!(ratio > 0.0 && ratio <= 1.01, "{ratio}");
        assert!(dk_cell(0.8, 0.25, 4, 9).unwrap().ratio.is_none());
    }

    #[test]
    fn small_perturbation_limit_is_finite() {
        let a = dk_cell(0.7, 1e-6, 3, 1).unwrap().ratio.unwrap();
        let b = dk_cell(0.7, 1e-7, 3, 1).unwrap().ratio.unwrap();
        assert!((a - b).abs() < 1e-3 && a > 0.0 && a <= 1.0, "{a} {b}");
    }

    #[test]
    fn table_values_at_the_reference_point() {
        let free = complexity_row(ComplexityParams::new(10, 10.0 / 11.0, 0.0, 0.1).unwrap());
        let noisy = complexity_row(ComplexityParams::new(10, 10.0 / 11.0, 1e-3, 0.1).unwrap());
        assert!(free.ratio >= 1e2 && (free.ratio - 390.0).abs() < 5.0, "{}", free.ratio);
        assert!(noisy.ratio >= 1e3 && (noisy.ratio - 1711.0).abs() < 10.0, "{}", noisy.ratio);
        assert_eq!(free.m_qsp_noisy, free.m_qsp_free);
    }

    #[test]
    fn complexity_monotonicity() {
        let at = |n, eps| complexity_row(ComplexityParams::new(n, 0.9, 0.0, eps).unwrap());
        assert!(at(10, 0.1).m_tom_rank2 > at(5, 0.1).m_tom_rank2);
        assert_eq!(at(10, 0.1).m_qsp_free, at(5, 0.1).m_qsp_free);
        assert!(at(10, 0.05).m_qsp_free > at(10, 0.1).m_qsp_free);
        assert!(at(10, 0.05).m_tom_rank2 > at(10, 0.1).m_tom_rank2);
    }

    #[test]
    fn resource_reference_counts() {
        let rep = resource_counts(10, 0.1, 1.0, 10.0).unwrap();
        assert_eq!(rep.pixel_qubits, 100);
        assert_eq!(rep.memory_qubits, 36);
        assert_eq!(rep.compression_gates, 333);
        assert_eq!(rep.processing_gates, 54 * 7);
        assert!((1e-4..=1e-3).contains(&rep.gate_error_threshold), "{}", rep.gate_error_threshold);
        assert_eq!(resource_counts(2, 0.1, 1.0, 10.0).unwrap().memory_qubits, 11);
        assert!(resource_counts(1, 0.1, 1.0, 10.0).is_err());
    }

    #[test]
    fn csv_headers() {
        assert!(dk_csv(&[]).starts_with("r,eps_tom,ratio\n"));
        assert!(tomography_csv(&[]).starts_with("dim,M,trace_error,eigvec_error,seed\n"));
        assert!(complexity_csv(&[]).starts_with("N,r,gamma,eps_st,m_qsp,m_tom,ratio,"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn reconstructions_are_density_operators(seed in 0u64..1000, m in 2_000u64..20_000) {
            let rho = state(4, seed);
            let cfg = TomographyConfig::new(Copies::Finite(m), Reconstructor::LinearInversion, seed);
            let res = simulate_tomography(&rho, &cfg).unwrap();
            let e = res.rho_bar.spectrum().unwrap();
            prop_assert!(e.values.iter().all(|v| *v >= -1e-12));
            prop_assert!((res.rho_bar.matrix().trace().re - 1.0).abs() < 1e-10);
            let rep = eigen_error(&rho, &res.rho_bar, 2).unwrap();
            for t in &rep.tracked {
                prop_assert!(t.value_error <= rep.eps_tom + 1e-10);
            }
        }

        #[test]
        fn davis_kahan_bound_holds(r in 0.55f64..0.95, frac in 0.01f64..0.99) {
            let cell = dk_cell(r, frac * (1.0 - r), 3, 0).unwrap();
            prop_assert!(cell.ratio.unwrap() <= 1.0 + 1e-6);
        }

        #[test]
        fn ratios_finite_and_positive(n in 2usize..40, r in 0.51f64..0.999, eps in 0.01f64..0.5, noisy in proptest::bool::ANY) {
            let row = complexity_row(ComplexityParams::new(n, r, if noisy { 1e-3 } else { 0.0 }, eps).unwrap());
            prop_assert!(row.ratio.is_finite() && row.ratio > 0.0);
        }
    }
}
