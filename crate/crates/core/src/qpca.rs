//! Density-matrix exponentiation from copies of a state.
//!
//! Each step couples a memory register with a fresh copy of `rho` through
//! `exp(i theta S)` and discards the copy. Since `S^2 = I` the coupling is
//! `cos(theta) I + i sin(theta) S`, and the partial trace over the copy has a
//! closed form:
//!
//! `Tr_2[W_a (X (x) rho) W_b^dag] = a0 b0* X + a0 b1* X rho + a1 b0* rho X + a1 b1* Tr(X) rho`
//!
//! for `W = w0 I + w1 S`. Every channel below is built from that identity,
//! which costs `O(d^3)` per step instead of `O(d^6)`.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numkit::{eigh, herm_exp, trace_distance, ComplexMatrix, DensityOperator, PureState, C64, I, ONE, ZERO};

/// SWAP on two `dim`-dimensional registers.
#[derive(Clone, Debug)]
pub struct SwapOperator {
    pub dim: usize,
    pub matrix: ComplexMatrix,
}

impl SwapOperator {
    pub fn new(dim: usize) -> Result<Self> {
        let n = dim * dim;
        if n * n > crate::numkit::KRON_MAX_ENTRIES {
            return Err(Error::TooLarge { entries: n * n, cap: crate::numkit::KRON_MAX_ENTRIES });
        }
        let mut m = ComplexMatrix::zeros(n, n);
        for i in 0..dim {
            for j in 0..dim {
                m.set(j * dim + i, i * dim + j, ONE);
            }
        }
        Ok(Self { dim, matrix: m })
    }
}

/// `exp(i x S) = cos(x) I + i sin(x) S`
pub fn exp_swap(dim: usize, x: f64) -> Result<ComplexMatrix> {
    let s = SwapOperator::new(dim)?;
    let mut out = ComplexMatrix::identity(dim * dim).scale_real(x.cos());
    out.axpy(I * x.sin(), &s.matrix)?;
    Ok(out)
}

/// Coefficients `(w0, w1)` of `W = w0 I + w1 S`.
pub type SwapCoeffs = (C64, C64);

pub const IDENTITY_COEFFS: SwapCoeffs = (ONE, ZERO);

/// `exp(i theta S)`
pub fn swap_rotation(theta: f64) -> SwapCoeffs {
    (C64::new(theta.cos(), 0.0), I * theta.sin())
}

/// Partial trace over the copy of `W_a (X (x) rho) W_b^dag`.
pub fn swap_channel_block(x: &ComplexMatrix, rho: &ComplexMatrix, wa: SwapCoeffs, wb: SwapCoeffs) -> Result<ComplexMatrix> {
    let (a0, a1) = wa;
    let (b0, b1) = (wb.0.conj(), wb.1.conj());
    let mut out = x.scale(a0 * b0);
    if a0 * b1 != ZERO {
        out.axpy(a0 * b1, &x.matmul(rho)?)?;
    }
    if a1 * b0 != ZERO {
        out.axpy(a1 * b0, &rho.matmul(x)?)?;
    }
    if a1 * b1 != ZERO {
        out.axpy(a1 * b1 * x.trace(), rho)?;
    }
    Ok(out)
}

/// Number of steps for total angle `x` at density `k`.
pub fn step_count(x: f64, k: f64) -> u64 {
    if x <= 0.0 {
        return 0;
    }
    (x * k - 1e-9).ceil().max(1.0) as u64
}

/// Step angles: `1/k` each, with the last one shortened so they sum to `x`.
pub fn step_angles(x: f64, k: f64) -> Vec<f64> {
    let n = step_count(x, k);
    (0..n).map(|j| if j + 1 < n { 1.0 / k } else { x - (n - 1) as f64 / k }).collect()
}

/// Fresh copies of a state, counted.
#[derive(Clone, Debug)]
pub struct PhotonSource {
    rho: DensityOperator,
    weights: Vec<f64>,
    vectors: Vec<PureState>,
}

impl PhotonSource {
    pub fn new(rho: DensityOperator) -> Result<Self> {
        let e = rho.spectrum()?;
        let total: f64 = e.values.iter().sum();
        let weights = e.values.iter().map(|v| v / total).collect();
        let vectors = (0..rho.dim()).map(|k| PureState::new(e.vector(k))).collect::<Result<_>>()?;
        Ok(Self { rho, weights, vectors })
    }

    pub fn rho(&self) -> &DensityOperator {
        &self.rho
    }

    pub fn dim(&self) -> usize {
        self.rho.dim()
    }

    /// Eigen-ensemble of `rho`, ascending weights.
    pub fn ensemble(&self) -> (&[f64], &[PureState]) {
        (&self.weights, &self.vectors)
    }

    fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let mut u: f64 = rng.gen();
        for (k, w) in self.weights.iter().enumerate() {
            if u < *w {
                return k;
            }
            u -= w;
        }
        self.weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
    }
}

/// Per-trial stream of copies. The counter never resets.
#[derive(Clone, Debug)]
pub struct PhotonStream {
    source: Arc<PhotonSource>,
    consumed: u64,
    budget: Option<u64>,
    rng: ChaCha8Rng,
}

impl PhotonStream {
    pub fn new(source: Arc<PhotonSource>, seed: u64) -> Self {
        Self { source, consumed: 0, budget: None, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Stream `trial` of the generator seeded with `master`.
    pub fn for_trial(source: Arc<PhotonSource>, master: u64, trial: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(master);
        rng.set_stream(trial);
        Self { source, consumed: 0, budget: None, rng }
    }

    pub fn with_budget(mut self, budget: u64) -> Self {
        self.budget = Some(budget);
        self
    }

    pub fn consumed(&self) -> u64 {
        self.consumed
    }

    pub fn source(&self) -> &PhotonSource {
        &self.source
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Accounts for `n` copies.
    pub fn draw_many(&mut self, n: u64) -> Result<()> {
        if let Some(b) = self.budget {
            if self.consumed + n > b {
                self.consumed = b;
                return Err(Error::StreamExhausted(b));
            }
        }
        self.consumed += n;
        Ok(())
    }

    /// One copy as a density operator.
    pub fn draw(&mut self) -> Result<&DensityOperator> {
        self.draw_many(1)?;
        Ok(self.source.rho())
    }

    /// One copy as the index of an eigen-ensemble member.
    pub fn draw_index(&mut self) -> Result<usize> {
        self.draw_many(1)?;
        Ok(self.source.sample_index(&mut self.rng))
    }

    /// One copy as a pure state sampled from the eigen-ensemble.
    pub fn draw_pure(&mut self) -> Result<&PureState> {
        self.draw_many(1)?;
        let k = self.source.sample_index(&mut self.rng);
        Ok(&self.source.vectors[k])
    }
}

/// `Tr_1[exp(-i theta S)(rho (x) sigma) exp(i theta S)]`
pub fn lloyd_rotate(sigma: &ComplexMatrix, rho: &ComplexMatrix, theta: f64) -> Result<ComplexMatrix> {
    let w = (C64::new(theta.cos(), 0.0), -I * theta.sin());
    swap_channel_block(sigma, rho, w, w)
}

/// One step at angle `1/k`.
pub fn lloyd_step(sigma: &DensityOperator, rho: &DensityOperator, k: f64) -> Result<DensityOperator> {
    if sigma.dim() != rho.dim() {
        return Err(Error::Dimension("lloyd_step operands differ in dimension".into()));
    }
    if !(k >= 1.0) {
        return Err(Error::InvalidParameter(format!("k = {k} < 1")));
    }
    Ok(DensityOperator::from_matrix_unchecked(lloyd_rotate(sigma.matrix(), rho.matrix(), 1.0 / k)?))
}

/// Approximates `exp(-i x rho) sigma exp(i x rho)` from `ceil(x k)` copies.
pub fn approx_exp_rho(
    sigma: &DensityOperator,
    x: f64,
    k: f64,
    stream: &mut PhotonStream,
) -> Result<(DensityOperator, u64)> {
    if !(x >= 0.0) || !x.is_finite() {
        return Err(Error::InvalidParameter(format!("x = {x} must be finite and nonnegative")));
    }
    let start = stream.consumed();
    let mut m = sigma.matrix().clone();
    for theta in step_angles(x, k) {
        let rho = stream.draw()?.matrix().clone();
        m = lloyd_rotate(&m, &rho, theta)?;
    }
    Ok((DensityOperator::from_matrix_unchecked(m), stream.consumed() - start))
}

/// Which aux value triggers the rotation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    /// `exp(+i x rho)` when the aux is `|0>`.
    Anti,
    /// `exp(-i x rho)` when the aux is `|1>`.
    Direct,
}

impl Control {
    /// Swap coefficients on aux branches 0 and 1 for one step.
    pub fn branch_coeffs(self, theta: f64) -> [SwapCoeffs; 2] {
        match self {
            Control::Anti => [swap_rotation(theta), IDENTITY_COEFFS],
            Control::Direct => [IDENTITY_COEFFS, swap_rotation(-theta)],
        }
    }

    pub fn sign(self) -> i32 {
        match self {
            Control::Anti => 1,
            Control::Direct => -1,
        }
    }
}

/// Aux qubit and memory register, aux-major.
#[derive(Clone, Debug)]
pub struct JointState {
    mem_dim: usize,
    m: ComplexMatrix,
}

impl JointState {
    pub fn product(aux: &ComplexMatrix, memory: &DensityOperator) -> Result<Self> {
        if aux.rows() != 2 || aux.cols() != 2 {
            return Err(Error::Dimension("aux must be a qubit".into()));
        }
        Ok(Self { mem_dim: memory.dim(), m: aux.kron(memory.matrix())? })
    }

    pub fn from_matrix(mem_dim: usize, m: ComplexMatrix) -> Result<Self> {
        if m.rows() != 2 * mem_dim || !m.is_square() {
            return Err(Error::Dimension(format!("joint matrix {}x{} for memory {mem_dim}", m.rows(), m.cols())));
        }
        Ok(Self { mem_dim, m })
    }

    pub fn mem_dim(&self) -> usize {
        self.mem_dim
    }

    pub fn matrix(&self) -> &ComplexMatrix {
        &self.m
    }

    pub fn block(&self, a: usize, b: usize) -> ComplexMatrix {
        let d = self.mem_dim;
        ComplexMatrix::from_fn(d, d, |i, j| self.m.get(a * d + i, b * d + j))
    }

    pub fn set_block(&mut self, a: usize, b: usize, x: &ComplexMatrix) {
        let d = self.mem_dim;
        for i in 0..d {
            for j in 0..d {
                self.m.set(a * d + i, b * d + j, x.get(i, j));
            }
        }
    }

    pub fn trace(&self) -> f64 {
        self.m.trace().re
    }

    pub fn aux_reduced(&self) -> ComplexMatrix {
        self.m.partial_trace(2, self.mem_dim, 0).expect("joint dims are consistent")
    }

    pub fn memory_reduced(&self) -> ComplexMatrix {
        self.m.partial_trace(2, self.mem_dim, 1).expect("joint dims are consistent")
    }

    /// One controlled step with a fresh copy `rho`.
    pub fn controlled_step(&mut self, rho: &ComplexMatrix, control: Control, theta: f64) -> Result<()> {
        let w = control.branch_coeffs(theta);
        let mut blocks = [[ComplexMatrix::zeros(0, 0), ComplexMatrix::zeros(0, 0)], [ComplexMatrix::zeros(0, 0), ComplexMatrix::zeros(0, 0)]];
        for a in 0..2 {
            for b in 0..2 {
                blocks[a][b] = swap_channel_block(&self.block(a, b), rho, w[a], w[b])?;
            }
        }
        for (a, row) in blocks.iter().enumerate() {
            for (b, x) in row.iter().enumerate() {
                self.set_block(a, b, x);
            }
        }
        Ok(())
    }
}

/// Controlled density-matrix exponentiation from `ceil(x k)` copies.
pub fn controlled_exp_rho(
    joint: &JointState,
    x: f64,
    control: Control,
    k: f64,
    stream: &mut PhotonStream,
) -> Result<JointState> {
    let mut out = joint.clone();
    for theta in step_angles(x, k) {
        let rho = stream.draw()?.matrix().clone();
        out.controlled_step(&rho, control, theta)?;
    }
    Ok(out)
}

/// Exact controlled unitary acting on the joint state, for oracles.
pub fn exact_controlled(joint: &JointState, rho: &DensityOperator, x: f64, control: Control) -> Result<JointState> {
    let d = joint.mem_dim();
    let (branch, t) = match control {
        Control::Anti => (0, -x),
        Control::Direct => (1, x),
    };
    let u = herm_exp(rho.matrix(), t)?;
    let mut full = ComplexMatrix::identity(2 * d);
    for i in 0..d {
        for j in 0..d {
            full.set(branch * d + i, branch * d + j, u.get(i, j));
        }
    }
    let m = full.matmul(joint.matrix())?.matmul(&full.adjoint())?;
    JointState::from_matrix(d, m)
}

/// Pure aux-major state for trajectory simulation.
#[derive(Clone, Debug)]
pub struct Trajectory {
    mem_dim: usize,
    amps: Vec<C64>,
}

impl Trajectory {
    pub fn new(aux: [C64; 2], memory: &PureState) -> Self {
        let d = memory.dim();
        let mut amps = vec![ZERO; 2 * d];
        for a in 0..2 {
            for i in 0..d {
                amps[a * d + i] = aux[a] * memory.amps()[i];
            }
        }
        Self { mem_dim: d, amps }
    }

    pub fn amps(&self) -> &[C64] {
        &self.amps
    }

    /// One controlled step with a pure copy `phi`, then a computational-basis
    /// measurement of the copy.
    pub fn controlled_step<R: Rng + ?Sized>(&mut self, phi: &PureState, control: Control, theta: f64, rng: &mut R) {
        let d = self.mem_dim;
        let w = control.branch_coeffs(theta);
        let phi = phi.amps();
        // joint amplitudes [a][i][j], copy index j last
        let mut joint = vec![ZERO; 2 * d * d];
        for a in 0..2 {
            let (w0, w1) = w[a];
            let psi = &self.amps[a * d..(a + 1) * d];
            for i in 0..d {
                for j in 0..d {
                    joint[(a * d + i) * d + j] = w0 * psi[i] * phi[j] + w1 * psi[j] * phi[i];
                }
            }
        }
        let mut probs = vec![0.0; d];
        for a in 0..2 {
            for i in 0..d {
                for j in 0..d {
                    probs[j] += joint[(a * d + i) * d + j].norm_sqr();
                }
            }
        }
        let total: f64 = probs.iter().sum();
        let mut u = rng.gen::<f64>() * total;
        let mut outcome = d - 1;
        for (j, p) in probs.iter().enumerate() {
            if u < *p {
                outcome = j;
                break;
            }
            u -= p;
        }
        let norm = probs[outcome].sqrt();
        for a in 0..2 {
            for i in 0..d {
                self.amps[a * d + i] = joint[(a * d + i) * d + outcome] / norm;
            }
        }
    }

    pub fn density(&self) -> ComplexMatrix {
        ComplexMatrix::outer(&self.amps, &self.amps)
    }
}

/// Trajectory version of `controlled_exp_rho`.
pub fn controlled_exp_rho_trajectory(
    traj: &mut Trajectory,
    x: f64,
    control: Control,
    k: f64,
    stream: &mut PhotonStream,
) -> Result<()> {
    for theta in step_angles(x, k) {
        let phi = stream.draw_pure()?.clone();
        traj.controlled_step(&phi, control, theta, stream.rng());
    }
    Ok(())
}

/// One row of the step-error sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorSweepRow {
    pub dim: usize,
    pub k: f64,
    pub x: f64,
    pub trace_error: f64,
    pub photons: u64,
}

/// Trace distance between `approx_exp_rho` and exact conjugation for a random
/// rank-2 `rho` and random pure `sigma` in each dimension.
pub fn error_sweep(dims: &[usize], ks: &[f64], x: f64, seed: u64) -> Result<Vec<ErrorSweepRow>> {
    let mut rows = Vec::new();
    for &dim in dims {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ dim as u64);
        let (rho, sigma) = random_pair(dim, &mut rng)?;
        let exact = exact_conjugation(&sigma, &rho, x)?;
        let source = Arc::new(PhotonSource::new(rho.clone())?);
        for &k in ks {
            let mut stream = PhotonStream::new(source.clone(), seed);
            let (approx, photons) = approx_exp_rho(&sigma, x, k, &mut stream)?;
            rows.push(ErrorSweepRow { dim, k, x, trace_error: trace_distance(&approx, &exact)?, photons });
        }
    }
    Ok(rows)
}

/// Random rank-2 `rho` with distinct weights and a random pure `sigma`.
pub fn random_pair<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Result<(DensityOperator, DensityOperator)> {
    let a = PureState::random(dim, rng);
    let b = PureState::random(dim, rng);
    let w: f64 = rng.gen_range(0.6..0.9);
    let mut m = a.projector().scale_real(w);
    m.axpy(C64::new(1.0 - w, 0.0), &b.projector())?;
    let rho = DensityOperator::new(m)?;
    let sigma = DensityOperator::from_pure(&PureState::random(dim, rng));
    Ok((rho, sigma))
}

/// `exp(-i x rho) sigma exp(i x rho)`
pub fn exact_conjugation(sigma: &DensityOperator, rho: &DensityOperator, x: f64) -> Result<DensityOperator> {
    let u = herm_exp(rho.matrix(), x)?;
    Ok(DensityOperator::from_matrix_unchecked(u.matmul(sigma.matrix())?.matmul(&u.adjoint())?))
}

pub fn error_sweep_csv(rows: &[ErrorSweepRow]) -> String {
    let mut out = String::from("dim,k,x,trace_error,photons\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{:e},{}", r.dim, r.k, r.x, r.trace_error, r.photons);
    }
    out
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    cov / var
}

/// Eigenvectors of `rho` for the two largest eigenvalues, largest first.
pub fn top_two(rho: &DensityOperator) -> Result<[(f64, PureState); 2]> {
    let e = eigh(rho.matrix())?;
    let n = rho.dim();
    Ok([
        (e.values[n - 1], PureState::new(e.vector(n - 1))?),
        (e.values[n - 2], PureState::new(e.vector(n - 2))?),
    ])
}
