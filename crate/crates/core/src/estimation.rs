//! Per-source observables from eigenbasis samples.
//!
//! The two source states `psi_1`, `psi_2` (relative phase fixed so that
//! `<psi_1|psi_2> = h >= 0`) and the eigenvectors `V_1`, `V_2` of
//! `rho = b psi_1 psi_1^+ + (1-b) psi_2 psi_2^+` are related by a real 2x2
//! matrix determined by `(r, b)`. Expectations on `V_k` and the off-diagonal
//! `<V_1|O|V_2>` therefore determine `<psi_k|O|psi_k>`.
//!
//! SWAP-test branches are never built as two-register matrices. For
//! `X = a (x) b` the branch-`j` expectation of `A (x) B` is
//! `1/4 [Tr(Aa)Tr(Bb) + Tr(Ab)Tr(Ba) +- (w Tr(BaAb) + w* Tr(AaBb))]`.

use std::fmt::Write as _;

use rand_distr::{Binomial, Distribution};
use rand::Rng;

use crate::error::{Error, Result};
use crate::kv::{KvDoc, KvWriter};
use crate::numkit::{eigh, ComplexMatrix, DensityOperator, Eigh, PureState, C64, ONE, ZERO};
use crate::qsp::FilterLabel;

/// Overlap `h` below which the sources count as orthogonal.
const ORTHOGONAL_H: f64 = 1e-9;
/// Default floor on `|<V_1|O_ref|V_2>|` before dividing by it.
pub const KAPPA_FLOOR: f64 = 1e-3;
/// Default floor on block-encoding post-selection success.
pub const SUCCESS_FLOOR: f64 = 1e-3;
/// Grid points for the b root scan.
pub const B_SCAN_POINTS: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct EigenModel {
    pub r: f64,
    pub b: f64,
    pub h: f64,
    pub a: f64,
    /// `c_tilde[j][k]`: coefficient of `psi_j` in `V_k`.
    pub c_tilde: [[f64; 2]; 2],
    /// `c[j][k]`: coefficient of `V_k` in `psi_j`.
    pub c: [[f64; 2]; 2],
    pub norms: [f64; 2],
}

/// Eigen-model from the top eigenvalue and the brightness fraction.
pub fn solve_model(r: f64, b: f64) -> Result<EigenModel> {
    if !(r > 0.5 && r <= 1.0) {
        return Err(Error::InvalidParameter(format!("r = {r} must lie in (1/2, 1]")));
    }
    if !(b > 0.0 && b < 1.0) {
        return Err(Error::InvalidParameter(format!("b = {b} must lie in (0, 1)")));
    }
    let d = r * (1.0 - r);
    let mut h2 = d / (b * (b - 1.0)) + 1.0;
    if (-1e-12..0.0).contains(&h2) {
        h2 = 0.0;
    }
    if !(0.0..1.0).contains(&h2) {
        return Err(Error::Infeasible(format!("(r, b) = ({r}, {b}) gives h^2 = {h2} outside [0, 1)")));
    }
    let h = h2.sqrt();
    let a = 1.0 - h2;
    let rk = [r, 1.0 - r];
    let (c_tilde, norms) = if h < ORTHOGONAL_H {
        // V_1 is the brighter source
        let perm = if b >= 0.5 { [[1.0, 0.0], [0.0, 1.0]] } else { [[0.0, 1.0], [1.0, 0.0]] };
        (perm, [1.0, 1.0])
    } else {
        let mut ct = [[0.0; 2]; 2];
        let mut norms = [0.0; 2];
        for k in 0..2 {
            let n = ((rk[k] + a * (b - 1.0)).powi(2) + a * h2 * (b - 1.0).powi(2)).powf(-0.5);
            ct[0][k] = n * (rk[k] - (1.0 - b));
            ct[1][k] = n * h * (1.0 - b);
            norms[k] = n;
        }
        (ct, norms)
    };
    let det = c_tilde[0][0] * c_tilde[1][1] - c_tilde[0][1] * c_tilde[1][0];
    if det.abs() < 1e-14 {
        return Err(Error::Degenerate(format!("eigenvector coefficients are singular at (r, b) = ({r}, {b})")));
    }
    // c = (c_tilde^-1)^T
    let inv = [[c_tilde[1][1] / det, -c_tilde[0][1] / det], [-c_tilde[1][0] / det, c_tilde[0][0] / det]];
    let c = [[inv[0][0], inv[1][0]], [inv[0][1], inv[1][1]]];
    Ok(EigenModel { r, b, h, a, c_tilde, c, norms })
}

impl EigenModel {
    /// `rho` in the orthonormal basis built from the sources.
    pub fn rho_in_source_basis(&self) -> [[f64; 2]; 2] {
        let (b, h, a) = (self.b, self.h, self.a);
        let off = h * a.sqrt() * (1.0 - b);
        [[b + (1.0 - b) * h * h, off], [off, (1.0 - b) * a]]
    }

    pub fn dump(&self) -> String {
        let mut w = KvWriter::new();
        w.put("r", format!("{:?}", self.r)).put("b", format!("{:?}", self.b)).put("h", format!("{:?}", self.h));
        w.put("a", format!("{:?}", self.a));
        for j in 0..2 {
            for k in 0..2 {
                w.put(&format!("c_tilde_{}{}", j + 1, k + 1), format!("{:?}", self.c_tilde[j][k]));
                w.put(&format!("c_{}{}", j + 1, k + 1), format!("{:?}", self.c[j][k]));
            }
        }
        w.put("norm_1", format!("{:?}", self.norms[0])).put("norm_2", format!("{:?}", self.norms[1]));
        w.finish()
    }

    /// Reads a dump back; the coefficients are recomputed and checked.
    pub fn load(text: &str) -> Result<Self> {
        let mut doc = KvDoc::parse(text)?;
        let r: f64 = doc.require("r")?;
        let b: f64 = doc.require("b")?;
        let model = solve_model(r, b)?;
        let h: f64 = doc.require("h")?;
        for key in doc.keys().map(str::to_string).collect::<Vec<_>>() {
            doc.take_raw(&key);
        }
        doc.finish()?;
        if (h - model.h).abs() > 1e-10 {
            return Err(Error::Parse { line: 0, msg: format!("stored h = {h} disagrees with (r, b)") });
        }
        Ok(model)
    }
}

/// Hermitian observable scaled to spectral norm at most one.
#[derive(Clone, Debug)]
pub struct Observable {
    pub name: String,
    matrix: ComplexMatrix,
    /// Multiplying a scaled expectation by `scale` restores physical units.
    pub scale: f64,
    spectrum: Eigh,
}

impl Observable {
    pub fn new(name: &str, matrix: ComplexMatrix) -> Result<Self> {
        let e = eigh(&matrix)?;
        let norm = e.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scale = norm.max(1.0);
        let matrix = matrix.symmetrized().scale_real(1.0 / scale);
        let spectrum = Eigh { values: e.values.iter().map(|v| v / scale).collect(), vectors: e.vectors };
        Ok(Self { name: name.to_string(), matrix, scale, spectrum })
    }

    pub fn identity(dim: usize) -> Self {
        Self::new("identity", ComplexMatrix::identity(dim)).expect("identity is Hermitian")
    }

    /// Random Hermitian matrix with entries uniform in the unit square.
    pub fn random<R: Rng + ?Sized>(name: &str, dim: usize, rng: &mut R) -> Self {
        let a = ComplexMatrix::from_fn(dim, dim, |_, _| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        Self::new(name, a.add(&a.adjoint()).expect("square").scale_real(0.5)).expect("Hermitian by construction")
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    /// Scaled matrix, spectral norm at most one.
    pub fn matrix(&self) -> &ComplexMatrix {
        &self.matrix
    }

    pub fn spectrum(&self) -> &Eigh {
        &self.spectrum
    }

    /// Scaled expectation on a density operator.
    pub fn expectation(&self, state: &DensityOperator) -> Result<f64> {
        Ok(state.expectation(&self.matrix)?.re)
    }

    pub fn squared(&self) -> Result<Self> {
        Self::new(&format!("{}^2", self.name), self.matrix.matmul(&self.matrix)?)
    }
}

/// Which procedure produced an overlap entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OverlapSource {
    Direct,
    BlockEncoding,
    SwapProtocol,
    Exact,
}

impl OverlapSource {
    pub fn as_str(self) -> &'static str {
        match self {
            OverlapSource::Direct => "direct",
            OverlapSource::BlockEncoding => "block_encoding",
            OverlapSource::SwapProtocol => "swap_protocol",
            OverlapSource::Exact => "exact",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Self::Direct),
            "block_encoding" => Ok(Self::BlockEncoding),
            "swap_protocol" => Ok(Self::SwapProtocol),
            "exact" => Ok(Self::Exact),
            other => Err(Error::Parse { line: 0, msg: format!("unknown overlap source {other:?}") }),
        }
    }
}

/// Overlaps of one observable in the eigenbasis, physical units.
#[derive(Clone, Debug, PartialEq)]
pub struct OverlapSet {
    pub v11: f64,
    pub v22: f64,
    pub v12: C64,
    pub source: [OverlapSource; 3],
}

impl OverlapSet {
    /// Exact overlaps against explicit eigenvectors.
    pub fn exact(o: &Observable, v1: &PureState, v2: &PureState) -> Result<Self> {
        let m = o.matrix().scale_real(o.scale);
        Ok(Self {
            v11: v1.expectation(&m)?.re,
            v22: v2.expectation(&m)?.re,
            v12: m.sandwich(v1.amps(), v2.amps())?,
            source: [OverlapSource::Exact; 3],
        })
    }

    /// `|v12|^2 <= v11 v22` for positive semidefinite observables.
    pub fn cauchy_schwarz_gap(&self) -> f64 {
        self.v11 * self.v22 - self.v12.norm_sqr()
    }

    pub fn dump(&self) -> String {
        KvWriter::new()
            .put("v11", format!("{:?}", self.v11))
            .put("v22", format!("{:?}", self.v22))
            .put("v12_re", format!("{:?}", self.v12.re))
            .put("v12_im", format!("{:?}", self.v12.im))
            .put("source_v11", self.source[0].as_str())
            .put("source_v22", self.source[1].as_str())
            .put("source_v12", self.source[2].as_str())
            .finish()
    }

    pub fn load(text: &str) -> Result<Self> {
        let mut doc = KvDoc::parse(text)?;
        let set = Self {
            v11: doc.require("v11")?,
            v22: doc.require("v22")?,
            v12: C64::new(doc.require("v12_re")?, doc.require("v12_im")?),
            source: [
                OverlapSource::parse(&doc.require::<String>("source_v11")?)?,
                OverlapSource::parse(&doc.require::<String>("source_v22")?)?,
                OverlapSource::parse(&doc.require::<String>("source_v12")?)?,
            ],
        };
        doc.finish()?;
        Ok(set)
    }
}

/// `<psi_k|O|psi_k>` for source `which` (0 or 1).
pub fn reconstruct_observable(model: &EigenModel, overlaps: &OverlapSet, which: usize) -> f64 {
    let c1 = model.c[which][0];
    let c2 = model.c[which][1];
    c1 * c1 * overlaps.v11 + c2 * c2 * overlaps.v22 + 2.0 * c1 * c2 * overlaps.v12.re
}

/// Top eigenvalue estimate from filter labels. Labels other than V1/V2 are ignored.
pub fn estimate_r(labels: &[FilterLabel]) -> Result<(f64, f64)> {
    let v1 = labels.iter().filter(|l| **l == FilterLabel::V1).count();
    let v2 = labels.iter().filter(|l| **l == FilterLabel::V2).count();
    let m = v1 + v2;
    if m < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 sorted labels, got {m}")));
    }
    let r = v1 as f64 / m as f64;
    Ok((r, (r * (1.0 - r) / m as f64).sqrt()))
}

/// Mean and standard error of a sample.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SampleMean {
    pub mean: f64,
    pub stderr: f64,
    pub count: u64,
}

impl SampleMean {
    pub fn exact(mean: f64) -> Self {
        Self { mean, stderr: 0.0, count: 0 }
    }

    fn from_sums(sum: f64, sum_sq: f64, count: u64) -> Self {
        if count == 0 {
            return Self { mean: f64::NAN, stderr: f64::NAN, count };
        }
        let n = count as f64;
        let mean = sum / n;
        let var = if count > 1 { ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0) } else { 0.0 };
        Self { mean, stderr: (var / n).sqrt(), count }
    }
}

/// Outcome distribution of a projective measurement of `o` on `state`.
fn single_outcomes(o: &Observable, state: &DensityOperator) -> Result<Vec<f64>> {
    let e = o.spectrum();
    (0..o.dim()).map(|i| Ok(state.matrix().sandwich(&e.vector(i), &e.vector(i))?.re.max(0.0))).collect()
}

/// Measures `o` on `shots` copies of `state`.
pub fn measure<R: Rng + ?Sized>(o: &Observable, state: &DensityOperator, shots: u64, rng: &mut R) -> Result<SampleMean> {
    let probs = single_outcomes(o, state)?;
    let counts = multinomial(&probs, shots, rng)?;
    let (mut s, mut s2) = (0.0, 0.0);
    for (c, v) in counts.iter().zip(&o.spectrum().values) {
        s += *c as f64 * v;
        s2 += *c as f64 * v * v;
    }
    Ok(SampleMean::from_sums(s, s2, shots))
}

/// Largest count handed to one binomial draw; the `rand_distr` sampler
/// panics from `2^31` upward when the mean is small.
const BINOMIAL_CHUNK: u64 = 1 << 30;

fn binomial<R: Rng + ?Sized>(n: u64, p: f64, rng: &mut R) -> u64 {
    let p = p.clamp(0.0, 1.0);
    let (mut left, mut hits) = (n, 0);
    while left > 0 {
        let take = left.min(BINOMIAL_CHUNK);
        hits += Binomial::new(take, p).map_or(0, |b| b.sample(rng));
        left -= take;
    }
    hits
}

/// Outcome counts of `n` draws, one conditional binomial per outcome.
fn multinomial<R: Rng + ?Sized>(probs: &[f64], n: u64, rng: &mut R) -> Result<Vec<u64>> {
    let total: f64 = probs.iter().map(|p| p.max(0.0)).sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::Degenerate(format!("outcome weights sum to {total}")));
    }
    let (mut left, mut mass) = (n, total);
    let mut counts = Vec::with_capacity(probs.len());
    for p in probs {
        let p = p.max(0.0);
        let c = if left == 0 || mass <= 0.0 { 0 } else { binomial(left, p / mass, rng) };
        counts.push(c);
        left -= c;
        mass -= p;
    }
    if left > 0 {
        // rounding leftovers go to the heaviest outcome
        let top = probs.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map_or(0, |(i, _)| i);
        counts[top] += left;
    }
    Ok(counts)
}

/// The two post-measurement branches of a SWAP test on `a (x) b` with
/// ancilla phase `omega`.
#[derive(Clone, Debug)]
pub struct SwapBranches {
    a: DensityOperator,
    b: DensityOperator,
    omega: C64,
}

impl SwapBranches {
    pub fn new(a: &DensityOperator, b: &DensityOperator, omega: C64) -> Result<Self> {
        if a.dim() != b.dim() {
            return Err(Error::Dimension("swap test registers differ in dimension".into()));
        }
        if (omega.norm() - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!("|omega| = {} != 1", omega.norm())));
        }
        Ok(Self { a: a.clone(), b: b.clone(), omega })
    }

    fn sign(branch: usize) -> f64 {
        if branch == 0 { 1.0 } else { -1.0 }
    }

    /// Unnormalized `Tr[(A (x) B) X_branch]`.
    fn weighted(&self, branch: usize, oa: &ComplexMatrix, ob: &ComplexMatrix) -> Result<C64> {
        let (a, b) = (self.a.matrix(), self.b.matrix());
        let t1 = oa.matmul(a)?.trace() * ob.matmul(b)?.trace();
        let t2 = oa.matmul(b)?.trace() * ob.matmul(a)?.trace();
        let cross1 = ob.matmul(a)?.matmul(oa)?.matmul(b)?.trace();
        let cross2 = oa.matmul(a)?.matmul(ob)?.matmul(b)?.trace();
        let w = self.omega * Self::sign(branch);
        Ok((t1 + t2 + w * cross1 + w.conj() * cross2) * 0.25)
    }

    pub fn probability(&self, branch: usize) -> f64 {
        let tr = self.a.matrix().matmul(self.b.matrix()).expect("same dim").trace();
        0.5 * (1.0 + Self::sign(branch) * (self.omega * tr).re)
    }

    /// Normalized expectation of `A (x) B` in a branch.
    pub fn expectation(&self, branch: usize, oa: &ComplexMatrix, ob: &ComplexMatrix) -> Result<f64> {
        let p = self.probability(branch);
        if p <= 0.0 {
            return Err(Error::Degenerate(format!("swap branch {branch} has zero probability")));
        }
        Ok(self.weighted(branch, oa, ob)?.re / p)
    }

    /// Joint outcome table of measuring `oa` on the first register and `ob`
    /// on the second in a branch; row-major over eigen-indices.
    fn joint_outcomes(&self, branch: usize, oa: &Observable, ob: &Observable) -> Result<Vec<f64>> {
        let d = oa.dim();
        let ea = &oa.spectrum().vectors;
        let fb = &ob.spectrum().vectors;
        let (a, b) = (self.a.matrix(), self.b.matrix());
        let diag = |basis: &ComplexMatrix, m: &ComplexMatrix| -> Result<Vec<f64>> {
            let t = basis.adjoint().matmul(m)?.matmul(basis)?;
            Ok((0..d).map(|i| t.get(i, i).re).collect())
        };
        let alpha = diag(ea, a)?;
        let beta = diag(fb, b)?;
        let alpha_b = diag(ea, b)?;
        let beta_a = diag(fb, a)?;
        let g = fb.adjoint().matmul(a)?.matmul(ea)?;
        let hm = ea.adjoint().matmul(b)?.matmul(fb)?;
        let w = self.omega * Self::sign(branch);
        let mut table = Vec::with_capacity(d * d);
        for i in 0..d {
            for j in 0..d {
                let cross = 2.0 * (w * g.get(j, i) * hm.get(i, j)).re;
                table.push((0.25 * (alpha[i] * beta[j] + alpha_b[i] * beta_a[j] + cross)).max(0.0));
            }
        }
        Ok(table)
    }

    /// Runs `shots` SWAP tests and measures `oa (x) ob` on every outcome in
    /// `branch`. Returns the branch count and the product mean.
    pub fn sample_product<R: Rng + ?Sized>(
        &self,
        branch: usize,
        oa: &Observable,
        ob: &Observable,
        shots: u64,
        rng: &mut R,
    ) -> Result<(u64, SampleMean)> {
        let table = self.joint_outcomes(branch, oa, ob)?;
        let d = oa.dim();
        let p = self.probability(branch);
        let hits = binomial(shots, p, rng);
        let counts = multinomial(&table, hits, rng)?;
        let (mut s, mut s2) = (0.0, 0.0);
        for (idx, c) in counts.iter().enumerate().filter(|(_, c)| **c > 0) {
            let v = oa.spectrum().values[idx / d] * ob.spectrum().values[idx % d];
            s += *c as f64 * v;
            s2 += *c as f64 * v * v;
        }
        Ok((hits, SampleMean::from_sums(s, s2, hits)))
    }

    /// Two-register branch state, for small dimensions and tests.
    pub fn density(&self, branch: usize) -> Result<ComplexMatrix> {
        let d = self.a.dim();
        let x = self.a.matrix().kron(self.b.matrix())?;
        let swap = crate::qpca::SwapOperator::new(d)?.matrix;
        let w = self.omega * Self::sign(branch);
        let k = ComplexMatrix::identity(d * d).add(&swap.scale(w))?;
        let m = k.matmul(&x)?.matmul(&k.adjoint())?.scale_real(0.25);
        let p = self.probability(branch);
        Ok(m.scale_real(1.0 / p))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SwapTestResult {
    pub p0: f64,
    pub p0_hat: f64,
    pub zeros: u64,
    pub shots: u64,
}

impl SwapTestResult {
    pub fn stderr(&self) -> f64 {
        (self.p0 * (1.0 - self.p0) / self.shots as f64).sqrt()
    }
}

/// SWAP test statistics plus access to the post-measurement branches.
pub fn swap_test<R: Rng + ?Sized>(
    a: &DensityOperator,
    b: &DensityOperator,
    omega: C64,
    shots: u64,
    rng: &mut R,
) -> Result<(SwapTestResult, SwapBranches)> {
    let branches = SwapBranches::new(a, b, omega)?;
    let p0 = branches.probability(0);
    let zeros = binomial(shots, p0, rng);
    let p0_hat = if shots > 0 { zeros as f64 / shots as f64 } else { f64::NAN };
    Ok((SwapTestResult { p0, p0_hat, zeros, shots }, branches))
}

/// Exact expectations or finite shots.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EstimationMode {
    Analytic,
    Shots(u64),
}

impl EstimationMode {
    pub fn label(self) -> &'static str {
        match self {
            EstimationMode::Analytic => "analytic",
            EstimationMode::Shots(_) => "shot",
        }
    }

    fn shots(self) -> u64 {
        match self {
            EstimationMode::Analytic => 0,
            EstimationMode::Shots(n) => n,
        }
    }
}

/// Phase information about `<V_1|O_ref|V_2>` that sampling cannot provide.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PhasePrior {
    /// The overlap is real with the given sign.
    Real(f64),
    /// The overlap has the given argument.
    Phase(f64),
}

impl PhasePrior {
    fn apply(self, magnitude: f64) -> C64 {
        match self {
            PhasePrior::Real(sign) => C64::new(magnitude.copysign(sign), 0.0),
            PhasePrior::Phase(phi) => C64::from_polar(magnitude, phi),
        }
    }
}

fn observe<R: Rng + ?Sized>(o: &Observable, state: &DensityOperator, mode: EstimationMode, rng: &mut R) -> Result<SampleMean> {
    match mode {
        EstimationMode::Analytic => Ok(SampleMean::exact(o.expectation(state)?)),
        EstimationMode::Shots(n) => measure(o, state, n, rng),
    }
}

fn branch_product<R: Rng + ?Sized>(
    sw: &SwapBranches,
    branch: usize,
    oa: &Observable,
    ob: &Observable,
    mode: EstimationMode,
    rng: &mut R,
) -> Result<SampleMean> {
    match mode {
        EstimationMode::Analytic => Ok(SampleMean::exact(sw.expectation(branch, oa.matrix(), ob.matrix())?)),
        EstimationMode::Shots(n) => Ok(sw.sample_product(branch, oa, ob, n, rng)?.1),
    }
}

/// Result of the block-encoding estimate of `<V_1|O_ref|V_2>`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KappaEstimate {
    /// Physical units, phase from the prior.
    pub kappa: C64,
    pub magnitude: SampleMean,
    pub success_predicted: f64,
    pub success_observed: f64,
}

/// `|<V_1|O_ref|V_2>|` from post-selected `O_ref V_1 (x) O_ref V_1` and the
/// symmetric branch of `SW_1(V_1, rho)`, with the phase supplied by `prior`.
pub fn block_encode_offdiag<R: Rng + ?Sized>(
    v1: &DensityOperator,
    rho: &DensityOperator,
    o_ref: &Observable,
    r: f64,
    prior: PhasePrior,
    mode: EstimationMode,
    rng: &mut R,
) -> Result<KappaEstimate> {
    let o11 = observe(o_ref, v1, mode, rng)?.mean;
    let n2 = observe(&o_ref.squared()?, v1, mode, rng)?.mean;
    let success = n2 * n2;
    if success < SUCCESS_FLOOR {
        return Err(Error::Degenerate(format!(
            "post-selection success {success:.3e} below {SUCCESS_FLOOR:e}; expect {:.1}x more attempts",
            1.0 / success.max(f64::MIN_POSITIVE)
        )));
    }
    if o11.abs() < 1e-12 {
        return Err(Error::Degenerate("<V1|O_ref|V1> vanishes; the overlap prefactor is undefined".into()));
    }
    // |V_M> = O_ref V_1 (x) O_ref V_1 / n2
    let u = o_ref.matrix().matmul(v1.matrix())?.matmul(o_ref.matrix())?.scale_real(1.0 / n2);
    let sw = SwapBranches::new(v1, rho, ONE)?;
    let (fidelity, success_observed, p0) = match mode {
        EstimationMode::Analytic => (sw.expectation(0, &u, &u)?, success, sw.probability(0)),
        EstimationMode::Shots(n) => {
            let inner = sw.expectation(0, &u, &u)?;
            let p_branch = sw.probability(0);
            let ok = binomial(n, success, rng);
            let branch = binomial(ok, p_branch, rng);
            let zeros = binomial(branch, 0.5 * (1.0 + inner), rng);
            if branch == 0 {
                return Err(Error::Degenerate("no post-selected symmetric branches observed".into()));
            }
            (2.0 * zeros as f64 / branch as f64 - 1.0, ok as f64 / n as f64, branch as f64 / ok.max(1) as f64)
        }
    };
    // F p0 n2^2 / o11^2 = r o11^2 + (1 - r) |kappa|^2
    let k2_raw = (fidelity * p0 * n2 * n2 / (o11 * o11) - r * o11 * o11) / (1.0 - r);
    if k2_raw < 0.0 && matches!(mode, EstimationMode::Shots(_)) {
        return Err(Error::Degenerate(format!(
            "|<V1|O_ref|V2>|^2 estimate {k2_raw:.3e} is negative; raise shots or sharpen the r estimate"
        )));
    }
    let k2 = k2_raw.max(0.0);
    let magnitude = SampleMean { mean: k2.sqrt() * o_ref.scale, stderr: 0.0, count: mode.shots() };
    Ok(KappaEstimate {
        kappa: prior.apply(k2.sqrt() * o_ref.scale),
        magnitude,
        success_predicted: success,
        success_observed,
    })
}

/// Intermediate quantities of the reference protocol, scaled units.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolTrace {
    pub o11: SampleMean,
    pub m0: SampleMean,
    pub m1: SampleMean,
    pub e_anti: SampleMean,
    pub h_i: f64,
    pub h_1: f64,
    pub t: f64,
}

/// Overlaps of `o` from the reference overlaps of `o_ref`, using only
/// `V_1` copies and copies of `rho`.
pub fn reference_protocol<R: Rng + ?Sized>(
    v1: &DensityOperator,
    rho: &DensityOperator,
    model: &EigenModel,
    o_ref: &Observable,
    ref_overlaps: &OverlapSet,
    o: &Observable,
    mode: EstimationMode,
    rng: &mut R,
) -> Result<(OverlapSet, ProtocolTrace)> {
    let r = model.r;
    let kref = ref_overlaps.v12 / o_ref.scale;
    if kref.norm() < KAPPA_FLOOR {
        return Err(Error::Degenerate(format!(
            "|<V1|O_ref|V2>| = {:.3e} below {KAPPA_FLOOR:e}; relative errors are amplified by at least {:.1e}",
            kref.norm(),
            1.0 / KAPPA_FLOOR
        )));
    }
    let ref11 = ref_overlaps.v11 / o_ref.scale;
    let ref22 = ref_overlaps.v22 / o_ref.scale;
    if ref11.abs() < 1e-12 {
        return Err(Error::Degenerate("<V1|O_ref|V1> vanishes; <V2|O|V2> cannot be separated".into()));
    }

    let o11 = observe(o, v1, mode, rng)?;
    let swi = SwapBranches::new(v1, rho, C64::new(0.0, 1.0))?;
    let e0 = branch_product(&swi, 0, o_ref, o, mode, rng)?;
    let e1 = branch_product(&swi, 1, o_ref, o, mode, rng)?;
    let strip = |e: SampleMean| SampleMean {
        mean: 2.0 * (e.mean - r * ref11 * o11.mean) / (1.0 - r),
        stderr: 2.0 * e.stderr / (1.0 - r),
        count: e.count,
    };
    let (m0, m1) = (strip(e0), strip(e1));
    let h_i = (m0.mean - m1.mean) / 2.0;
    let t = (m0.mean + m1.mean) / 2.0;
    let o22 = (t - o11.mean * ref22) / ref11;

    // antisymmetric branch of SW_1(rho, rho) is W_{-1}: <.> = (T - h_1) / 2
    let sw1 = SwapBranches::new(rho, rho, ONE)?;
    let e_anti = branch_product(&sw1, 1, o_ref, o, mode, rng)?;
    let h_1 = t - 2.0 * e_anti.mean;
    let kint = C64::new(h_1, h_i) / (kref.conj() * 2.0);

    let s = o.scale;
    let set = OverlapSet {
        v11: o11.mean * s,
        v22: o22 * s,
        v12: kint * s,
        source: [OverlapSource::Direct, OverlapSource::SwapProtocol, OverlapSource::SwapProtocol],
    };
    Ok((set, ProtocolTrace { o11, m0, m1, e_anti, h_i, h_1, t }))
}

/// One candidate brightness fraction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BRoot {
    pub b: f64,
    pub residual: f64,
    pub m_psi1: f64,
    pub m_c: f64,
    /// At least one of `M_c != 0` or `M_psi1 != F(M_psi1)` holds.
    pub nontrivial: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BEstimate {
    pub roots: Vec<BRoot>,
    pub ambiguous: bool,
}

impl BEstimate {
    pub fn unique(&self) -> Option<f64> {
        if self.ambiguous || self.roots.len() != 1 { None } else { Some(self.roots[0].b) }
    }
}

/// Brightness fraction from a known relation `M_{psi_2} = F(M_{psi_1})` for
/// the observable whose eigenbasis overlaps are `overlaps`.
pub fn estimate_b(r: f64, overlaps: &OverlapSet, f: impl Fn(f64) -> f64, tol: f64) -> Result<BEstimate> {
    if !(r > 0.5 && r < 1.0) {
        return Err(Error::InvalidParameter(format!("r = {r} must lie in (1/2, 1)")));
    }
    let lo = 1.0 - r;
    let hi = r;
    let eval = |b: f64| -> Option<(f64, f64, f64)> {
        let model = solve_model(r, b).ok()?;
        let x = reconstruct_observable(&model, overlaps, 0);
        let y = reconstruct_observable(&model, overlaps, 1);
        let c = model.c;
        let mc = c[0][0] * c[1][0] * overlaps.v11
            + c[0][1] * c[1][1] * overlaps.v22
            + (c[0][0] * c[1][1] + c[0][1] * c[1][0]) * overlaps.v12.re;
        Some((f(x) - y, x, mc))
    };
    let step = (hi - lo) / B_SCAN_POINTS as f64;
    let grid: Vec<(f64, Option<(f64, f64, f64)>)> = (0..=B_SCAN_POINTS)
        .map(|i| {
            // stay off the endpoints, where the sources become orthogonal
            let b = (lo + i as f64 * step).clamp(lo + 1e-9, hi - 1e-9);
            (b, eval(b))
        })
        .collect();
    let flat = grid.iter().filter(|(_, v)| matches!(v, Some((g, _, _)) if g.abs() < tol)).count();
    let mut roots = Vec::new();
    for w in grid.windows(2) {
        let (Some((g0, _, _)), Some((g1, _, _))) = (w[0].1, w[1].1) else { continue };
        let exact = g0 == 0.0;
        if !(exact || g0 * g1 < 0.0) {
            continue;
        }
        let (mut a, mut b) = (w[0].0, w[1].0);
        if !exact {
            let mut ga = g0;
            for _ in 0..100 {
                let m = 0.5 * (a + b);
                let gm = eval(m).map(|v| v.0).unwrap_or(f64::NAN);
                if gm == 0.0 || !gm.is_finite() {
                    a = m;
                    b = m;
                    break;
                }
                if ga * gm < 0.0 {
                    b = m;
                } else {
                    a = m;
                    ga = gm;
                }
            }
        }
        let root = if exact { a } else { 0.5 * (a + b) };
        if let Some((g, x, mc)) = eval(root) {
            roots.push(BRoot { b: root, residual: g.abs(), m_psi1: x, m_c: mc, nontrivial: mc.abs() > tol || (x - f(x)).abs() > tol });
        }
    }
    let ambiguous = roots.len() != 1 || flat > B_SCAN_POINTS / 10 || roots.iter().any(|r| !r.nontrivial);
    Ok(BEstimate { roots, ambiguous })
}

/// One row of the estimation report.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub quantity: String,
    pub estimate: f64,
    pub stderr: f64,
    pub shots: u64,
    pub mode: String,
    pub seed: u64,
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from("quantity,estimate,stderr,shots,mode,seed\n");
    for r in rows {
        let _ = writeln!(out, "{},{:e},{:e},{},{},{}", r.quantity, r.estimate, r.stderr, r.shots, r.mode, r.seed);
    }
    out
}

/// Exact `V_1`, `V_2` of a density operator.
pub fn top_eigenvectors(rho: &DensityOperator) -> Result<(PureState, PureState)> {
    let e = rho.spectrum()?;
    let d = rho.dim();
    if d < 2 {
        return Err(Error::Dimension("need at least two dimensions".into()));
    }
    Ok((PureState::new(e.vector(d - 1))?, PureState::new(e.vector(d - 2))?))
}

/// Eigenvectors in the real-coefficient convention, from explicit sources.
pub fn model_eigenvectors(model: &EigenModel, psi1: &PureState, psi2: &PureState) -> Result<(PureState, PureState)> {
    let build = |k: usize| -> Result<PureState> {
        let amps: Vec<C64> = psi1
            .amps()
            .iter()
            .zip(psi2.amps())
            .map(|(x, y)| x * model.c_tilde[0][k] + y * model.c_tilde[1][k])
            .collect();
        PureState::new(amps)
    };
    Ok((build(0)?, build(1)?))
}

/// Argument of `<V_1|O|V_2>` in the real-coefficient convention, from
/// explicit sources. Validation runs use this as the phase prior.
pub fn phase_from_sources(model: &EigenModel, psi1: &PureState, psi2: &PureState, o: &Observable) -> Result<PhasePrior> {
    let (v1, v2) = model_eigenvectors(model, psi1, psi2)?;
    let k = o.matrix().sandwich(v1.amps(), v2.amps())?;
    Ok(if k.im.abs() < 1e-14 * k.norm().max(1.0) { PhasePrior::Real(if k.re >= 0.0 { 1.0 } else { -1.0 }) } else { PhasePrior::Phase(k.arg()) })
}

/// Zero-phase placeholder for unused entries.
pub const NO_OVERLAP: C64 = ZERO;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics::mix_sources;
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Sources with a prescribed real overlap `h`.
    fn sources_with_overlap(dim: usize, h: f64, seed: u64) -> (PureState, PureState) {
        let mut g = rng(seed);
        let a = PureState::random(dim, &mut g);
        let raw = PureState::random(dim, &mut g);
        let ov = a.inner(&raw);
        let perp: Vec<C64> = raw.amps().iter().zip(a.amps()).map(|(x, y)| x - ov * y).collect();
        let perp = PureState::new(perp).unwrap();
        let amps: Vec<C64> = a.amps().iter().zip(perp.amps()).map(|(x, y)| x * h + y * (1.0 - h * h).sqrt()).collect();
        (a, PureState::new(amps).unwrap())
    }

    #[test]
    fn equal_brightness_closed_form() {
        let m = solve_model(0.8, 0.5).unwrap();
        assert!((m.h - 0.6).abs() < 1e-10);
    }

    #[test]
    fn orthogonal_limit_is_identity() {
        let m = solve_model(0.7, 0.7).unwrap();
        assert!(m.h < 1e-6);
        assert!((m.c_tilde[0][0].abs() - 1.0).abs() < 1e-6 && m.c_tilde[1][0].abs() < 1e-6);
        let m = solve_model(0.7, 0.3).unwrap();
        assert!((m.c_tilde[1][0].abs() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn inconsistent_pair_is_rejected() {
        assert!(matches!(solve_model(0.6, 0.9), Err(Error::Infeasible(_))));
        assert!(solve_model(0.5, 0.7).is_err());
        assert!(solve_model(0.8, 1.0).is_err());
    }

    #[test]
    fn round_trip_through_density_operator() {
        for (seed, b, h) in [(1, 0.9, 0.4), (2, 0.7, 0.8), (3, 0.55, 0.1)] {
            let (p1, p2) = sources_with_overlap(6, h, seed);
            let (_, truth) = mix_sources(&p1, &p2, b).unwrap();
            let m = solve_model(truth.r, b).unwrap();
            assert!((m.h - truth.h).abs() < 1e-8, "h {} vs {}", m.h, truth.h);
        }
    }

    #[test]
    fn model_matches_spectrum_and_inverse() {
        let m = solve_model(0.85, 0.8).unwrap();
        let rho = m.rho_in_source_basis();
        let tr = rho[0][0] + rho[1][1];
        let det = rho[0][0] * rho[1][1] - rho[0][1] * rho[1][0];
        let disc = (tr * tr / 4.0 - det).sqrt();
        assert!((tr / 2.0 + disc - 0.85).abs() < 1e-10);
        assert!((tr / 2.0 - disc - 0.15).abs() < 1e-10);
        for l in 0..2 {
            for k in 0..2 {
                let s: f64 = (0..2).map(|j| m.c[j][l] * m.c_tilde[j][k]).sum();
                assert!((s - if l == k { 1.0 } else { 0.0 }).abs() < 1e-10);
            }
        }
        assert!((m.r * (1.0 - m.r) - m.b * (1.0 - m.b) * (1.0 - m.h * m.h)).abs() < 1e-10);
    }

    #[test]
    fn reconstruction_of_identity_and_projector() {
        let (p1, p2) = sources_with_overlap(5, 0.5, 4);
        let (_, truth) = mix_sources(&p1, &p2, 0.8).unwrap();
        let m = solve_model(truth.r, 0.8).unwrap();
        let (v1, v2) = model_eigenvectors(&m, &truth.psi1, &truth.psi2).unwrap();
        let id = OverlapSet::exact(&Observable::identity(5), &v1, &v2).unwrap();
        for k in 0..2 {
            assert!((reconstruct_observable(&m, &id, k) - 1.0).abs() < 1e-10);
        }
        let proj = Observable::new("P1", v1.projector()).unwrap();
        let set = OverlapSet::exact(&proj, &v1, &v2).unwrap();
        for k in 0..2 {
            assert!((reconstruct_observable(&m, &set, k) - m.c[k][0].powi(2)).abs() < 1e-10);
        }
    }

    #[test]
    fn exact_overlaps_reproduce_source_expectations() {
        let (p1, p2) = sources_with_overlap(6, 0.3, 5);
        let (_, truth) = mix_sources(&p1, &p2, 0.75).unwrap();
        let m = solve_model(truth.r, 0.75).unwrap();
        let (v1, v2) = model_eigenvectors(&m, &truth.psi1, &truth.psi2).unwrap();
        let o = Observable::random("O", 6, &mut rng(6));
        let set = OverlapSet::exact(&o, &v1, &v2).unwrap();
        let phys = o.matrix().scale_real(o.scale);
        let direct = truth.psi2.expectation(&phys).unwrap().re;
        assert!((reconstruct_observable(&m, &set, 1) - direct).abs() < 1e-10);
    }

    #[test]
    fn estimate_r_arithmetic() {
        let mut labels = vec![FilterLabel::V1; 9000];
        labels.extend(vec![FilterLabel::V2; 1000]);
        let (r, se) = estimate_r(&labels).unwrap();
        assert!((r - 0.9).abs() < 1e-15 && (se - 0.003).abs() < 1e-12);
        assert_eq!(estimate_r(&[FilterLabel::V1; 3]).unwrap().0, 1.0);
        assert!(estimate_r(&[]).is_err());
    }

    #[test]
    fn swap_test_limits() {
        let mut g = rng(7);
        let a = PureState::random(4, &mut g);
        let pa = DensityOperator::from_pure(&a);
        let (res, _) = swap_test(&pa, &pa, ONE, 10, &mut g).unwrap();
        assert!((res.p0 - 1.0).abs() < 1e-12);
        let b = PureState::basis(4, 0);
        let c = PureState::basis(4, 1);
        let (res, _) = swap_test(&DensityOperator::from_pure(&b), &DensityOperator::from_pure(&c), ONE, 10, &mut g).unwrap();
        assert!((res.p0 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn swap_test_on_mixed_pair() {
        let rho = DensityOperator::new(ComplexMatrix::diag(&[0.9, 0.1, 0.0])).unwrap();
        let (res, _) = swap_test(&rho, &rho, ONE, 10_000, &mut rng(8)).unwrap();
        assert!((res.p0 - 0.91).abs() < 1e-12);
        assert!((res.p0_hat - 0.91).abs() < 3.0 * res.stderr());
    }

    #[test]
    fn branch_formulas_match_two_register_states() {
        let mut g = rng(9);
        let d = 3;
        let a = DensityOperator::normalized(
            PureState::random(d, &mut g).projector().add(&PureState::random(d, &mut g).projector().scale_real(0.5)).unwrap(),
        )
        .unwrap();
        let b = DensityOperator::from_pure(&PureState::random(d, &mut g));
        let oa = Observable::random("A", d, &mut g);
        let ob = Observable::random("B", d, &mut g);
        let sw = SwapBranches::new(&a, &b, C64::from_polar(1.0, 0.7)).unwrap();
        let op = oa.matrix().kron(ob.matrix()).unwrap();
        for branch in 0..2 {
            let rho = sw.density(branch).unwrap();
            assert!((rho.trace().re - 1.0).abs() < 1e-12);
            let want = op.matmul(&rho).unwrap().trace().re;
            assert!((sw.expectation(branch, oa.matrix(), ob.matrix()).unwrap() - want).abs() < 1e-12);
            let table = sw.joint_outcomes(branch, &oa, &ob).unwrap();
            let total: f64 = table.iter().sum();
            assert!((total - sw.probability(branch)).abs() < 1e-12);
        }
    }

    #[test]
    fn antisymmetric_branch_of_rho_rho_is_a_singlet() {
        let rho = DensityOperator::new(ComplexMatrix::diag(&[0.8, 0.2])).unwrap();
        let sw = SwapBranches::new(&rho, &rho, ONE).unwrap();
        assert!((sw.probability(1) - 0.8 * 0.2).abs() < 1e-12);
        let m = sw.density(1).unwrap();
        // (|01> - |10>)/sqrt(2)
        assert!((m.get(1, 1).re - 0.5).abs() < 1e-12 && (m.get(1, 2).re + 0.5).abs() < 1e-12);
        assert!(m.get(0, 0).norm() < 1e-12 && m.get(3, 3).norm() < 1e-12);
    }

    fn scene(dim: usize, b: f64, h: f64, seed: u64) -> (DensityOperator, crate::optics::TruthRecord, EigenModel) {
        let (p1, p2) = sources_with_overlap(dim, h, seed);
        let (rho, truth) = mix_sources(&p1, &p2, b).unwrap();
        let model = solve_model(truth.r, b).unwrap();
        (rho, truth, model)
    }

    #[test]
    fn block_encoding_of_identity_is_zero() {
        let (rho, _, model) = scene(4, 0.8, 0.5, 10);
        let (v1, _) = top_eigenvectors(&rho).unwrap();
        let v1 = DensityOperator::from_pure(&v1);
        let k = block_encode_offdiag(&v1, &rho, &Observable::identity(4), model.r, PhasePrior::Real(1.0), EstimationMode::Analytic, &mut rng(0))
            .unwrap();
        assert!(k.kappa.norm() < 1e-7, "{}", k.kappa);
    }

    #[test]
    fn block_encoding_magnitude_and_success_rate() {
        let (rho, truth, model) = scene(4, 0.85, 0.4, 11);
        let (v1, v2) = top_eigenvectors(&rho).unwrap();
        let o = Observable::random("O_ref", 4, &mut rng(12));
        let want = o.matrix().sandwich(v1.amps(), v2.amps()).unwrap().norm() * o.scale;
        let v1d = DensityOperator::from_pure(&v1);
        let prior = phase_from_sources(&model, &truth.psi1, &truth.psi2, &o).unwrap();
        let k = block_encode_offdiag(&v1d, &rho, &o, model.r, prior, EstimationMode::Analytic, &mut rng(0)).unwrap();
        assert!((k.kappa.norm() - want).abs() < 1e-8, "{} vs {want}", k.kappa.norm());
        let shots = 40_000;
        let k = block_encode_offdiag(&v1d, &rho, &o, model.r, prior, EstimationMode::Shots(shots), &mut rng(13)).unwrap();
        let p = k.success_predicted;
        let sigma = (p * (1.0 - p) / shots as f64).sqrt();
        assert!((k.success_observed - p).abs() < 3.0 * sigma + 0.01, "{} vs {p}", k.success_observed);
    }

    fn analytic_pipeline(dim: usize, seed: u64) -> (f64, f64) {
        let mut g = rng(seed);
        let b = g.gen_range(0.55..0.95);
        let h = g.gen_range(0.05..0.9);
        let (rho, truth, model) = scene(dim, b, h, seed + 1000);
        let (v1, v2) = top_eigenvectors(&rho).unwrap();
        let o_ref = Observable::random("O_ref", dim, &mut g);
        let o = Observable::random("O", dim, &mut g);
        let v1d = DensityOperator::from_pure(&v1);
        let v2d = DensityOperator::from_pure(&v2);
        let prior = phase_from_sources(&model, &truth.psi1, &truth.psi2, &o_ref).unwrap();
        let k = block_encode_offdiag(&v1d, &rho, &o_ref, model.r, prior, EstimationMode::Analytic, &mut g).unwrap();
        let ref_set = OverlapSet {
            v11: o_ref.expectation(&v1d).unwrap() * o_ref.scale,
            v22: o_ref.expectation(&v2d).unwrap() * o_ref.scale,
            v12: k.kappa,
            source: [OverlapSource::Direct, OverlapSource::Direct, OverlapSource::BlockEncoding],
        };
        let (set, _) = reference_protocol(&v1d, &rho, &model, &o_ref, &ref_set, &o, EstimationMode::Analytic, &mut g).unwrap();
        let phys = o.matrix().scale_real(o.scale);
        let direct = truth.psi2.expectation(&phys).unwrap().re;
        (reconstruct_observable(&model, &set, 1), direct)
    }

    #[test]
    fn analytic_pipeline_reproduces_source_expectation() {
        for seed in 0..10 {
            let (got, want) = analytic_pipeline(5, seed);
            assert!((got - want).abs() < 1e-8, "seed {seed}: {got} vs {want}");
        }
    }

    #[test]
    fn equal_observables_have_no_imaginary_part() {
        let (rho, _, model) = scene(4, 0.8, 0.5, 14);
        let (v1, v2) = top_eigenvectors(&rho).unwrap();
        let o = Observable::random("O", 4, &mut rng(15));
        let ref_set = OverlapSet::exact(&o, &v1, &v2).unwrap();
        let v1d = DensityOperator::from_pure(&v1);
        let (_, trace) = reference_protocol(&v1d, &rho, &model, &o, &ref_set, &o, EstimationMode::Analytic, &mut rng(0)).unwrap();
        assert!(trace.h_i.abs() < 1e-10, "h_i = {}", trace.h_i);
    }

    #[test]
    fn b_from_functional_prior() {
        let (_, truth, model) = scene(5, 0.7, 0.5, 15);
        let (v1, v2) = model_eigenvectors(&model, &truth.psi1, &truth.psi2).unwrap();
        let o = Observable::random("O_F", 5, &mut rng(16));
        let phys = o.matrix().scale_real(o.scale);
        let x = truth.psi1.expectation(&phys).unwrap().re;
        let y = truth.psi2.expectation(&phys).unwrap().re;
        let set = OverlapSet::exact(&o, &v1, &v2).unwrap();
        let est = estimate_b(model.r, &set, |m| m * y / x, 1e-9).unwrap();
        let hit = est.roots.iter().find(|r| (r.b - 0.7).abs() < 0.01).expect("root near 0.7");
        assert!(hit.residual < 1e-8);
    }

    #[test]
    fn identity_relation_is_ambiguous() {
        let (_, truth, model) = scene(4, 0.7, 0.5, 17);
        let (v1, v2) = model_eigenvectors(&model, &truth.psi1, &truth.psi2).unwrap();
        let set = OverlapSet::exact(&Observable::identity(4), &v1, &v2).unwrap();
        let est = estimate_b(model.r, &set, |m| m, 1e-9).unwrap();
        assert!(est.ambiguous);
        assert_eq!(est.unique(), None);
    }

    #[test]
    fn overlap_and_model_dumps_round_trip() {
        let set = OverlapSet { v11: 0.3, v22: -0.1, v12: C64::new(0.05, -0.02), source: [OverlapSource::Direct, OverlapSource::SwapProtocol, OverlapSource::BlockEncoding] };
        assert_eq!(OverlapSet::load(&set.dump()).unwrap(), set);
        let m = solve_model(0.9, 0.8).unwrap();
        assert_eq!(EigenModel::load(&m.dump()).unwrap(), m);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn model_invariants(r in 0.51f64..0.99, t in 0.01f64..0.99) {
            // any b strictly between 1-r and r is consistent
            let b = (1.0 - r) + t * (2.0 * r - 1.0);
            let m = solve_model(r, b).unwrap();
            prop_assert!((r * (1.0 - r) / (b * (b - 1.0)) + 1.0 - m.h * m.h).abs() < 1e-10);
            for l in 0..2 {
                for k in 0..2 {
                    let s: f64 = (0..2).map(|j| m.c[j][l] * m.c_tilde[j][k]).sum();
                    let want = if l == k { 1.0 } else { 0.0 };
                    prop_assert!((s - want).abs() < 1e-8);
                }
            }
        }

        #[test]
        fn psd_overlaps_obey_cauchy_schwarz(seed in any::<u64>()) {
            let mut g = rng(seed);
            let a = ComplexMatrix::from_fn(4, 4, |_, _| C64::new(g.gen_range(-1.0..1.0), g.gen_range(-1.0..1.0)));
            let o = Observable::new("psd", a.matmul(&a.adjoint()).unwrap()).unwrap();
            let v1 = PureState::random(4, &mut g);
            let raw = PureState::random(4, &mut g);
            let ov = v1.inner(&raw);
            let v2 = PureState::new(raw.amps().iter().zip(v1.amps()).map(|(x, y)| x - ov * y).collect()).unwrap();
            let set = OverlapSet::exact(&o, &v1, &v2).unwrap();
            prop_assert!(set.cauchy_schwarz_gap() >= -1e-8);
        }
    }
}
