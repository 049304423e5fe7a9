//! Fourier-optics source states and their pixelation.
//!
//! A point source at object-plane coordinates `(xi, nu)` produces a complex
//! field on the detector given by the pupil kernel evaluated at
//! `(u / z_i + xi / z_o, v / z_i + nu / z_o)` times two quadratic phases.
//! The kernel is the Fourier transform of the complex pupil, computed once on
//! a zero-padded FFT grid and bilinearly interpolated afterwards.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rustfft::FftPlanner;
use statrs::function::erf::erf;

use crate::error::{Error, Result};
use crate::kv::KvDoc;
use crate::numkit::{gauss_legendre, inner, ComplexMatrix, DensityOperator, PureState, C64, ZERO};

pub const DEFAULT_PAD_FACTOR: usize = 4;
pub const DEFAULT_QUAD_ORDER: usize = 8;
pub const ORACLE_QUAD_ORDER: usize = 16;
pub const DEFAULT_ETA_FLOOR: f64 = 1e-6;
/// Pupil window side relative to the aperture diameter.
const PUPIL_WINDOW_MARGIN: f64 = 1.1;

/// Sampled complex pupil plus the propagation geometry.
#[derive(Clone, Debug)]
pub struct PupilFunction {
    pub wavelength: f64,
    pub z_o: f64,
    pub z_i: f64,
    samples: usize,
    pitch: f64,
    transmission: Vec<f64>,
    phase: Vec<f64>,
    pad_factor: usize,
}

impl PupilFunction {
    /// Clear circular aperture of the given radius, centered in a window of
    /// `samples x samples` points.
    pub fn circular(wavelength: f64, z_o: f64, z_i: f64, radius: f64, samples: usize) -> Result<Self> {
        for (name, v) in [("wavelength", wavelength), ("z_o", z_o), ("z_i", z_i), ("pupil radius", radius)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        if samples < 4 {
            return Err(Error::InvalidParameter(format!("pupil_samples {samples} < 4")));
        }
        let pitch = 2.0 * radius * PUPIL_WINDOW_MARGIN / (samples - 1) as f64;
        let c = (samples - 1) as f64 / 2.0;
        let mut transmission = vec![0.0; samples * samples];
        for j in 0..samples {
            for l in 0..samples {
                let x = (j as f64 - c) * pitch;
                let y = (l as f64 - c) * pitch;
                if x * x + y * y <= radius * radius {
                    transmission[j * samples + l] = 1.0;
                }
            }
        }
        Self::from_samples(wavelength, z_o, z_i, samples, pitch, transmission, vec![0.0; samples * samples])
    }

    pub fn from_samples(
        wavelength: f64,
        z_o: f64,
        z_i: f64,
        samples: usize,
        pitch: f64,
        transmission: Vec<f64>,
        phase: Vec<f64>,
    ) -> Result<Self> {
        if transmission.len() != samples * samples || phase.len() != samples * samples {
            return Err(Error::Dimension(format!("pupil arrays must hold {samples}x{samples} values")));
        }
        if transmission.iter().chain(&phase).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite pupil sample".into()));
        }
        let edge = (0..samples).flat_map(|k| {
            [(0, k), (samples - 1, k), (k, 0), (k, samples - 1)].into_iter()
        });
        for (j, l) in edge {
            if transmission[j * samples + l] != 0.0 {
                return Err(Error::InvalidParameter(
                    "pupil transmission must vanish on the window boundary".into(),
                ));
            }
        }
        let phase = phase.into_iter().map(wrap_phase).collect();
        Ok(Self { wavelength, z_o, z_i, samples, pitch, transmission, phase, pad_factor: DEFAULT_PAD_FACTOR })
    }

    pub fn with_phase_mask(mut self, mask: Vec<f64>) -> Result<Self> {
        if mask.len() != self.samples * self.samples {
            return Err(Error::Dimension(format!(
                "phase mask has {} values, pupil has {}",
                mask.len(),
                self.samples * self.samples
            )));
        }
        if mask.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite phase mask value".into()));
        }
        self.phase = mask.into_iter().map(wrap_phase).collect();
        Ok(self)
    }

    pub fn with_pad_factor(mut self, pad: usize) -> Result<Self> {
        if pad < 2 {
            return Err(Error::InvalidParameter(format!("pad factor {pad} < 2")));
        }
        self.pad_factor = pad;
        Ok(self)
    }

    /// Multiplies the transmission, keeping the phase.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.transmission.iter_mut().for_each(|t| *t *= factor);
        out
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn pitch(&self) -> f64 {
        self.pitch
    }

    pub fn wavenumber(&self) -> f64 {
        2.0 * PI / self.wavelength
    }

    /// `integral |P|^2 dx dy`
    pub fn energy(&self) -> f64 {
        self.transmission.iter().map(|t| t * t).sum::<f64>() * self.pitch * self.pitch
    }

    /// Norm of the detector field of any source, by Parseval.
    pub fn field_norm(&self) -> f64 {
        self.energy().sqrt() / (self.wavelength * self.z_o)
    }
}

fn wrap_phase(p: f64) -> f64 {
    let w = (p + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI { -PI } else { w }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceLabel {
    Star,
    Exoplanet,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointSource {
    pub xi: f64,
    pub nu: f64,
    pub label: SourceLabel,
}

impl PointSource {
    pub fn new(xi: f64, nu: f64, label: SourceLabel) -> Result<Self> {
        if !xi.is_finite() || !nu.is_finite() {
            return Err(Error::InvalidParameter("source coordinates must be finite".into()));
        }
        Ok(Self { xi, nu, label })
    }
}

/// Pupil kernel tabulated on the padded FFT grid.
#[derive(Clone, Debug)]
pub struct PsfKernel {
    pupil: PupilFunction,
    size: usize,
    /// Spacing of the kernel grid in the `p` (and `q`) coordinate.
    step: f64,
    /// Centered grid, index `(a + size/2) * size + (c + size/2)`.
    grid: Vec<C64>,
}

impl PsfKernel {
    pub fn new(pupil: &PupilFunction) -> Self {
        let n = pupil.samples;
        let m = n * pupil.pad_factor;
        let mut buf = vec![ZERO; m * m];
        for j in 0..n {
            for l in 0..n {
                let t = pupil.transmission[j * n + l];
                if t != 0.0 {
                    buf[j * m + l] = C64::from_polar(t, pupil.phase[j * n + l]);
                }
            }
        }
        let fft = FftPlanner::<f64>::new().plan_fft_forward(m);
        for row in buf.chunks_mut(m) {
            fft.process(row);
        }
        let mut col = vec![ZERO; m];
        for l in 0..m {
            for a in 0..m {
                col[a] = buf[a * m + l];
            }
            fft.process(&mut col);
            for a in 0..m {
                buf[a * m + l] = col[a];
            }
        }
        let half = (m / 2) as i64;
        let area = pupil.pitch * pupil.pitch;
        let shift = PI * (n as f64 - 1.0) / m as f64;
        let mut grid = vec![ZERO; m * m];
        for a in -half..half {
            for c in -half..half {
                let src = (a.rem_euclid(m as i64) as usize) * m + c.rem_euclid(m as i64) as usize;
                let corr = C64::from_polar(area, shift * (a + c) as f64);
                grid[((a + half) as usize) * m + (c + half) as usize] = buf[src] * corr;
            }
        }
        Self { pupil: pupil.clone(), size: m, step: pupil.wavelength / (m as f64 * pupil.pitch), grid }
    }

    pub fn pupil(&self) -> &PupilFunction {
        &self.pupil
    }

    /// Largest `|p|` the grid can interpolate.
    pub fn max_frequency(&self) -> f64 {
        (self.size as f64 / 2.0 - 2.0) * self.step
    }

    fn check_nyquist(&self, p: f64) -> Result<()> {
        if p.abs() > self.max_frequency() {
            let required = self.pupil.wavelength * (self.size as f64 / 2.0 - 2.0) / (self.size as f64 * p.abs());
            return Err(Error::Undersampled { spacing: self.pupil.pitch, required });
        }
        Ok(())
    }

    /// Kernel value at `(p, q)` by bilinear interpolation.
    pub fn kernel(&self, p: f64, q: f64) -> Result<C64> {
        self.check_nyquist(p)?;
        self.check_nyquist(q)?;
        let half = (self.size / 2) as f64;
        let ta = p / self.step + half;
        let tc = q / self.step + half;
        let (a0, c0) = (ta.floor(), tc.floor());
        let (fa, fc) = (ta - a0, tc - c0);
        let (a0, c0) = (a0 as usize, c0 as usize);
        let g = |a: usize, c: usize| self.grid[a * self.size + c];
        Ok(g(a0, c0) * ((1.0 - fa) * (1.0 - fc))
            + g(a0 + 1, c0) * (fa * (1.0 - fc))
            + g(a0, c0 + 1) * ((1.0 - fa) * fc)
            + g(a0 + 1, c0 + 1) * (fa * fc))
    }

    /// Detector coordinates in `(lo, hi)` where the interpolated kernel has a
    /// kink along one axis, for a source at object coordinate `offset`.
    pub fn cell_edges(&self, offset: f64, lo: f64, hi: f64) -> Vec<f64> {
        let z_i = self.pupil.z_i;
        let shift = offset / self.pupil.z_o;
        let first = ((lo / z_i + shift) / self.step).floor() as i64;
        let last = ((hi / z_i + shift) / self.step).ceil() as i64;
        (first..=last).map(|j| z_i * (j as f64 * self.step - shift)).filter(|u| *u > lo && *u < hi).collect()
    }

    /// Detector field of `source` at `(u, v)`, with both quadratic phases and
    /// the physical prefactor.
    pub fn field_at(&self, source: &PointSource, u: f64, v: f64) -> Result<C64> {
        let pp = &self.pupil;
        let k = pp.wavenumber();
        let kval = self.kernel(u / pp.z_i + source.xi / pp.z_o, v / pp.z_i + source.nu / pp.z_o)?;
        let phase = k * (source.xi * source.xi + source.nu * source.nu) / (2.0 * pp.z_o)
            + k * (u * u + v * v) / (2.0 * pp.z_i);
        let pref = 1.0 / (pp.wavelength * pp.wavelength * pp.z_o * pp.z_i);
        Ok(kval * C64::from_polar(pref, phase))
    }

    /// Field normalized to unit energy over the whole detector plane.
    pub fn wavefunction_at(&self, source: &PointSource, u: f64, v: f64) -> Result<C64> {
        Ok(self.field_at(source, u, v)? / self.pupil.field_norm())
    }
}

/// Complex point spread function at a list of detector points.
pub fn psf_field(pupil: &PupilFunction, source: &PointSource, points: &[(f64, f64)]) -> Result<Vec<C64>> {
    let kernel = PsfKernel::new(pupil);
    points.iter().map(|&(u, v)| kernel.field_at(source, u, v)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ModeProfile {
    /// Constant `1 / pitch` over the pixel.
    FlatTop,
    /// Gaussian centered on the pixel, truncated to it and renormalized.
    /// Width is given as a fraction of the pitch.
    Gaussian { width_fraction: f64 },
}

impl ModeProfile {
    /// Profile value at offset `(dx, dy)` from the pixel center.
    pub fn value(&self, pitch: f64, dx: f64, dy: f64) -> f64 {
        match *self {
            ModeProfile::FlatTop => 1.0 / pitch,
            ModeProfile::Gaussian { width_fraction } => {
                let s = width_fraction * pitch;
                // integral of exp(-x^2/s^2) over one pixel side
                let side = s * PI.sqrt() * erf(pitch / (2.0 * s));
                (-(dx * dx + dy * dy) / (2.0 * s * s)).exp() / side
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct PixelGrid {
    pub side: usize,
    pub pitch: f64,
    pub origin: (f64, f64),
    pub profile: ModeProfile,
    pub quad_order: usize,
}

impl PixelGrid {
    pub fn new(side: usize, pitch: f64) -> Result<Self> {
        if side == 0 {
            return Err(Error::InvalidParameter("grid side must be positive".into()));
        }
        if !(pitch > 0.0 && pitch.is_finite()) {
            return Err(Error::InvalidParameter(format!("pixel pitch must be positive, got {pitch}")));
        }
        Ok(Self { side, pitch, origin: (0.0, 0.0), profile: ModeProfile::FlatTop, quad_order: DEFAULT_QUAD_ORDER })
    }

    pub fn with_profile(mut self, profile: ModeProfile) -> Result<Self> {
        if let ModeProfile::Gaussian { width_fraction } = profile {
            if !(width_fraction > 0.0) {
                return Err(Error::InvalidParameter("gaussian width must be positive".into()));
            }
        }
        self.profile = profile;
        Ok(self)
    }

    pub fn with_quad_order(mut self, order: usize) -> Self {
        self.quad_order = order.max(1);
        self
    }

    pub fn dim(&self) -> usize {
        self.side * self.side
    }

    pub fn index(&self, m: usize, n: usize) -> usize {
        m * self.side + n
    }

    pub fn center(&self, m: usize, n: usize) -> (f64, f64) {
        let c = (self.side as f64 - 1.0) / 2.0;
        (self.origin.0 + (m as f64 - c) * self.pitch, self.origin.1 + (n as f64 - c) * self.pitch)
    }

    /// Half-width of the grid footprint along each axis.
    pub fn half_extent(&self) -> f64 {
        self.side as f64 * self.pitch / 2.0
    }

    /// `integral |phi|^2` over one pixel by tensor Gauss-Legendre quadrature.
    pub fn profile_norm(&self, order: usize) -> f64 {
        let (x, w) = gauss_legendre(order);
        let h = self.pitch / 2.0;
        let mut acc = 0.0;
        for (xi, wi) in x.iter().zip(&w) {
            for (yj, wj) in x.iter().zip(&w) {
                let v = self.profile.value(self.pitch, xi * h, yj * h);
                acc += wi * wj * v * v;
            }
        }
        acc * h * h
    }
}

#[derive(Clone, Debug)]
pub struct PixelatedState {
    pub state: PureState,
    /// Detection efficiency, the squared norm before normalization.
    pub eta: f64,
}

impl PixelatedState {
    pub fn norm_deficit(&self) -> f64 {
        1.0 - self.eta
    }
}

/// Projects a detector field onto the pixel modes.
pub fn pixelate(field: impl Fn(f64, f64) -> Result<C64>, grid: &PixelGrid, eta_floor: f64) -> Result<PixelatedState> {
    pixelate_paneled(field, grid, eta_floor, |_, _, _| Vec::new())
}

/// Splits `[lo, hi]` at the sorted interior points of `breaks`.
fn panels(lo: f64, hi: f64, mut breaks: Vec<f64>) -> Vec<(f64, f64)> {
    breaks.retain(|b| *b > lo && *b < hi);
    breaks.sort_by(f64::total_cmp);
    let mut edges = vec![lo];
    edges.extend(breaks);
    edges.push(hi);
    edges.windows(2).map(|w| (w[0], w[1])).collect()
}

/// Like [`pixelate`], with each pixel split into tensor panels at the points
/// returned by `breaks(axis, lo, hi)` where the field is not smooth.
pub fn pixelate_paneled(
    field: impl Fn(f64, f64) -> Result<C64>,
    grid: &PixelGrid,
    eta_floor: f64,
    breaks: impl Fn(usize, f64, f64) -> Vec<f64>,
) -> Result<PixelatedState> {
    let (x, w) = gauss_legendre(grid.quad_order);
    let h = grid.pitch / 2.0;
    let mut amps = Vec::with_capacity(grid.dim());
    for m in 0..grid.side {
        for n in 0..grid.side {
            let (cx, cy) = grid.center(m, n);
            let px = panels(cx - h, cx + h, breaks(0, cx - h, cx + h));
            let py = panels(cy - h, cy + h, breaks(1, cy - h, cy + h));
            let mut acc = ZERO;
            for &(x0, x1) in &px {
                let (mx, hx) = ((x0 + x1) / 2.0, (x1 - x0) / 2.0);
                for &(y0, y1) in &py {
                    let (my, hy) = ((y0 + y1) / 2.0, (y1 - y0) / 2.0);
                    let mut panel = ZERO;
                    for (xi, wi) in x.iter().zip(&w) {
                        for (yj, wj) in x.iter().zip(&w) {
                            let (u, v) = (mx + xi * hx, my + yj * hy);
                            let phi = grid.profile.value(grid.pitch, u - cx, v - cy);
                            panel += field(u, v)? * (wi * wj * phi);
                        }
                    }
                    acc += panel * (hx * hy);
                }
            }
            amps.push(acc);
        }
    }
    let eta: f64 = amps.iter().map(|a| a.norm_sqr()).sum();
    if !(eta >= eta_floor) {
        return Err(Error::LowEfficiency(eta));
    }
    Ok(PixelatedState { state: PureState::new(amps)?, eta })
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub sources: [PointSource; 2],
    pub b: f64,
    pub delta_vac: f64,
    pub gamma: f64,
    pub pupil: PupilFunction,
    pub grid: PixelGrid,
    pub renormalize_b_by_eta: bool,
    pub eta_floor: f64,
}

pub const SCENE_KEYS: &[&str] = &[
    "lambda_m",
    "z_o_m",
    "z_i_m",
    "pupil_radius_m",
    "pupil_samples",
    "grid_n",
    "pixel_pitch_m",
    "source1_xi_m",
    "source1_nu_m",
    "source2_xi_m",
    "source2_nu_m",
    "b",
    "delta_vac",
    "gamma",
    "phase_mask_file",
    "renormalize_b_by_eta",
];

impl Scene {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.b) {
            return Err(Error::InvalidParameter(format!("b = {} outside [0, 1]", self.b)));
        }
        if !(self.delta_vac > 0.0 && self.delta_vac <= 1.0) {
            return Err(Error::InvalidParameter(format!("delta_vac = {} outside (0, 1]", self.delta_vac)));
        }
        NoiseModel::new(self.gamma)?;
        Ok(())
    }

    /// Takes the scene keys out of `doc`. Relative mask paths resolve against `base_dir`.
    pub fn from_kv(doc: &mut KvDoc, base_dir: &Path) -> Result<Self> {
        let lambda: f64 = doc.require("lambda_m")?;
        let z_o: f64 = doc.require("z_o_m")?;
        let z_i: f64 = doc.require("z_i_m")?;
        let radius: f64 = doc.require("pupil_radius_m")?;
        let samples: usize = doc.require("pupil_samples")?;
        let side: usize = doc.require("grid_n")?;
        let pitch: f64 = doc.require("pixel_pitch_m")?;
        let s1 = PointSource::new(doc.require("source1_xi_m")?, doc.require("source1_nu_m")?, SourceLabel::Star)?;
        let s2 = PointSource::new(doc.require("source2_xi_m")?, doc.require("source2_nu_m")?, SourceLabel::Exoplanet)?;
        let b: f64 = doc.require("b")?;
        let delta_vac: f64 = doc.take("delta_vac")?.unwrap_or(1.0);
        let gamma: f64 = doc.take("gamma")?.unwrap_or(0.0);
        let renormalize_b_by_eta: bool = doc.take("renormalize_b_by_eta")?.unwrap_or(false);
        let mut pupil = PupilFunction::circular(lambda, z_o, z_i, radius, samples)?;
        if let Some(mask_path) = doc.take_raw("phase_mask_file").filter(|p| !p.is_empty()) {
            let path = base_dir.join(mask_path);
            let text = std::fs::read_to_string(&path)?;
            pupil = pupil.with_phase_mask(parse_matrix(&text, samples)?)?;
        }
        let scene = Scene {
            sources: [s1, s2],
            b,
            delta_vac,
            gamma,
            pupil,
            grid: PixelGrid::new(side, pitch)?,
            renormalize_b_by_eta,
            eta_floor: DEFAULT_ETA_FLOOR,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut doc = KvDoc::parse(&text)?;
        let scene = Self::from_kv(&mut doc, path.parent().unwrap_or(Path::new(".")))?;
        doc.finish()?;
        Ok(scene)
    }
}

/// Whitespace-separated `side x side` matrix of reals.
pub fn parse_matrix(text: &str, side: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(side * side);
    let mut rows = 0;
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<f64>().map_err(|e| Error::Parse { line: idx + 1, msg: e.to_string() }))
            .collect::<Result<_>>()?;
        if vals.len() != side {
            return Err(Error::Parse { line: idx + 1, msg: format!("expected {side} values, got {}", vals.len()) });
        }
        out.extend(vals);
        rows += 1;
    }
    if rows != side {
        return Err(Error::Parse { line: 0, msg: format!("expected {side} rows, got {rows}") });
    }
    Ok(out)
}

/// Ground truth about a scene. Only test oracles and validation reports read it.
#[derive(Clone, Debug)]
pub struct TruthRecord {
    pub psi1: PureState,
    pub psi2: PureState,
    pub h: f64,
    pub b: f64,
    pub r: f64,
    pub eta: [f64; 2],
}

pub fn source_state(kernel: &PsfKernel, source: &PointSource, grid: &PixelGrid, eta_floor: f64) -> Result<PixelatedState> {
    pixelate_paneled(|u, v| kernel.wavefunction_at(source, u, v), grid, eta_floor, |axis, lo, hi| {
        kernel.cell_edges(if axis == 0 { source.xi } else { source.nu }, lo, hi)
    })
}

/// Heralded two-source state and its truth record.
pub fn build_rho(scene: &Scene) -> Result<(DensityOperator, TruthRecord)> {
    scene.validate()?;
    let kernel = PsfKernel::new(&scene.pupil);
    let p1 = source_state(&kernel, &scene.sources[0], &scene.grid, scene.eta_floor)?;
    let p2 = source_state(&kernel, &scene.sources[1], &scene.grid, scene.eta_floor)?;
    let b = if scene.renormalize_b_by_eta {
        scene.b * p1.eta / (scene.b * p1.eta + (1.0 - scene.b) * p2.eta)
    } else {
        scene.b
    };
    let (rho, mut truth) = mix_sources(&p1.state, &p2.state, b)?;
    truth.eta = [p1.eta, p2.eta];
    Ok((rho, truth))
}

/// `b |psi1><psi1| + (1-b) |psi2><psi2|` with the phase of `psi2` rotated so
/// that `<psi1|psi2>` is real and nonnegative.
pub fn mix_sources(psi1: &PureState, psi2: &PureState, b: f64) -> Result<(DensityOperator, TruthRecord)> {
    if psi1.dim() != psi2.dim() {
        return Err(Error::Dimension("source states differ in dimension".into()));
    }
    let ov = inner(psi1.amps(), psi2.amps());
    let psi2 = if ov.norm() > 0.0 { psi2.with_phase(ov.conj() / ov.norm()) } else { psi2.clone() };
    let h = inner(psi1.amps(), psi2.amps()).re.max(0.0);
    let d = psi1.dim();
    let mut m = ComplexMatrix::zeros(d, d);
    m.axpy(C64::new(b, 0.0), &psi1.projector())?;
    m.axpy(C64::new(1.0 - b, 0.0), &psi2.projector())?;
    let rho = DensityOperator::new(m)?;
    let r = *rho.spectrum()?.values.last().unwrap_or(&1.0);
    Ok((rho, TruthRecord { psi1: psi1.clone(), psi2, h, b, r, eta: [1.0, 1.0] }))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseModel {
    pub gamma: f64,
}

impl NoiseModel {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::InvalidParameter(format!("gamma = {gamma} outside [0, 1)")));
        }
        Ok(Self { gamma })
    }
}

/// `(1 - gamma) rho + gamma I / d`. Accepts `gamma = 1` as the fully mixed limit.
pub fn apply_noise(rho: &DensityOperator, gamma: f64) -> Result<DensityOperator> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidParameter(format!("gamma = {gamma} outside [0, 1]")));
    }
    let d = rho.dim();
    let mut m = rho.matrix().scale_real(1.0 - gamma);
    for i in 0..d {
        m.add_at(i, i, C64::new(gamma / d as f64, 0.0));
    }
    Ok(DensityOperator::from_matrix_unchecked(m))
}

/// CSV dump of a pixelated state: `m,n,re,im`.
pub fn state_csv(state: &PureState, side: usize) -> String {
    let mut out = String::from("m,n,re,im\n");
    for m in 0..side {
        for n in 0..side {
            let a = state.amps()[m * side + n];
            let _ = writeln!(out, "{m},{n},{:e},{:e}", a.re, a.im);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_pupil() -> PupilFunction {
        PupilFunction::circular(1e-6, 1e3, 1.0, 5e-3, 64).unwrap()
    }

    fn on_axis() -> PointSource {
        PointSource::new(0.0, 0.0, SourceLabel::Star).unwrap()
    }

    /// Bessel J1 by its integral representation.
    fn bessel_j1(z: f64) -> f64 {
        let (x, w) = gauss_legendre(64);
        let h = PI / 2.0;
        x.iter().zip(&w).map(|(xi, wi)| {
            let t = h * (xi + 1.0);
            wi * (t - z * t.sin()).cos()
        }).sum::<f64>() * h / PI
    }

    #[test]
    fn on_axis_kernel_follows_airy_profile() {
        let pupil = test_pupil();
        let kernel = PsfKernel::new(&pupil);
        let k0 = kernel.kernel(0.0, 0.0).unwrap();
        assert!((k0.re - pupil.energy()).abs() / pupil.energy() < 1e-12);
        let radius = 5e-3;
        let kr = pupil.wavenumber() * radius;
        for i in 1..40 {
            let p = i as f64 * 1e-5;
            let z = kr * p;
            let airy = 2.0 * bessel_j1(z) / z;
            let got = kernel.kernel(p, 0.0).unwrap() / k0;
            assert!((got.re - airy).abs() < 2.5e-2, "p {p}: {got} vs {airy}");
        }
    }

    #[test]
    fn on_axis_modulus_has_grid_symmetry() {
        let kernel = PsfKernel::new(&test_pupil());
        let s = on_axis();
        for &(u, v) in &[(3e-5, 7e-5), (1.2e-4, -4e-5), (2e-5, 2e-5)] {
            let a = kernel.field_at(&s, u, v).unwrap().norm();
            for &(uu, vv) in &[(-u, v), (u, -v), (-u, -v), (v, u), (-v, u)] {
                let b = kernel.field_at(&s, uu, vv).unwrap().norm();
                assert!((a - b).abs() <= 1e-6 * a.max(1e-300), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn field_is_linear_in_pupil() {
        let pupil = test_pupil();
        let s = PointSource::new(1e-3, -2e-3, SourceLabel::Star).unwrap();
        let pts = [(1e-5, 2e-5), (-4e-5, 0.0)];
        let a = psf_field(&pupil, &s, &pts).unwrap();
        let b = psf_field(&pupil.scaled(2.0), &s, &pts).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x * 2.0 - y).norm() < 1e-12 * y.norm());
        }
    }

    #[test]
    fn source_shift_moves_intensity_by_magnification() {
        let pupil = test_pupil();
        let kernel = PsfKernel::new(&pupil);
        let step = 5e-6;
        let n = 81i64;
        let profile = |s: &PointSource| -> Vec<f64> {
            (0..n).map(|i| kernel.field_at(s, (i - n / 2) as f64 * step, 0.0).unwrap().norm()).collect()
        };
        let base = profile(&on_axis());
        let xi0 = 2e-2; // image shift -z_i xi0 / z_o = -2e-5 m = -4 samples
        let moved = profile(&PointSource::new(xi0, 0.0, SourceLabel::Exoplanet).unwrap());
        let best = (-10i64..=10)
            .max_by(|&a, &b| {
                let xc = |s: i64| -> f64 {
                    (0..n).filter_map(|i| {
                        let j = i + s;
                        (0..n).contains(&j).then(|| base[i as usize] * moved[j as usize])
                    }).sum()
                };
                xc(a).total_cmp(&xc(b))
            })
            .unwrap();
        let expected = -pupil.z_i * xi0 / pupil.z_o / step;
        assert!((best as f64 - expected).abs() <= 1.0, "shift {best} vs {expected}");
    }

    #[test]
    fn nyquist_violation_reports_required_spacing() {
        let kernel = PsfKernel::new(&test_pupil());
        let far = kernel.max_frequency() * 1.5 * kernel.pupil().z_i;
        match kernel.field_at(&on_axis(), far, 0.0) {
            Err(Error::Undersampled { spacing, required }) => assert!(required < spacing),
            other => panic!("expected undersampling error, got {other:?}"),
        }
    }

    #[test]
    fn flat_top_field_of_one_pixel_gives_basis_state() {
        let grid = PixelGrid::new(3, 1e-5).unwrap();
        let (cx, cy) = grid.center(0, 0);
        let h = grid.pitch / 2.0;
        let field = |u: f64, v: f64| -> Result<C64> {
            let inside = (u - cx).abs() <= h && (v - cy).abs() <= h;
            Ok(if inside { C64::new(1.0 / grid.pitch, 0.0) } else { ZERO })
        };
        let px = pixelate(field, &grid, DEFAULT_ETA_FLOOR).unwrap();
        assert!((px.eta - 1.0).abs() < 1e-12);
        assert!((px.state.amps()[0].re - 1.0).abs() < 1e-12);
    }

    #[test]
    fn captured_energy_matches_riemann_oracle_and_grows_with_grid() {
        // unit-modulus field on an 8x8-pixel square, normalized
        let pitch = 1e-5;
        let half = 4.0 * pitch;
        let amp = 1.0 / (2.0 * half);
        let field = move |u: f64, v: f64| -> Result<C64> {
            Ok(if u.abs() < half && v.abs() < half { C64::new(amp, 0.0) } else { ZERO })
        };
        let mut last = 0.0;
        for side in [2usize, 4, 6, 8, 10] {
            let grid = PixelGrid::new(side, pitch).unwrap();
            let eta = pixelate(field, &grid, 0.0).unwrap().eta;
            // Riemann sum of |field|^2 over the footprint on a 4x finer lattice
            let cells = side * 4 * 8;
            let dx = 2.0 * grid.half_extent() / cells as f64;
            let mut oracle = 0.0;
            for i in 0..cells {
                for j in 0..cells {
                    let u = -grid.half_extent() + (i as f64 + 0.5) * dx;
                    let v = -grid.half_extent() + (j as f64 + 0.5) * dx;
                    oracle += field(u, v).unwrap().norm_sqr() * dx * dx;
                }
            }
            assert!((eta - oracle).abs() < 1e-9, "side {side}: {eta} vs {oracle}");
            assert!(eta >= last - 1e-15);
            last = eta;
        }
        assert!((last - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mirror_sources_give_reflected_states() {
        let pupil = test_pupil();
        let kernel = PsfKernel::new(&pupil);
        let grid = PixelGrid::new(4, 4e-5).unwrap();
        let a = PointSource::new(3e-2, -1e-2, SourceLabel::Star).unwrap();
        let b = PointSource::new(-3e-2, 1e-2, SourceLabel::Exoplanet).unwrap();
        let sa = source_state(&kernel, &a, &grid, DEFAULT_ETA_FLOOR).unwrap();
        let sb = source_state(&kernel, &b, &grid, DEFAULT_ETA_FLOOR).unwrap();
        let n = grid.side;
        for m in 0..n {
            for k in 0..n {
                let x = sa.state.amps()[grid.index(m, k)];
                let y = sb.state.amps()[grid.index(n - 1 - m, n - 1 - k)];
                assert!((x - y).norm() < 1e-8);
            }
        }
    }

    #[test]
    fn profiles_are_normalized() {
        for profile in [ModeProfile::FlatTop, ModeProfile::Gaussian { width_fraction: 0.3 }] {
            let grid = PixelGrid::new(2, 3e-5).unwrap().with_profile(profile).unwrap();
            assert!((grid.profile_norm(ORACLE_QUAD_ORDER) - 1.0).abs() < 1e-8, "{profile:?}");
        }
    }

    #[test]
    fn pixelation_is_stable_under_quadrature_refinement() {
        let scene = crate::experiments::default_scene(4).unwrap();
        let kernel = PsfKernel::new(&scene.pupil);
        let coarse = source_state(&kernel, &scene.sources[0], &scene.grid, 0.0).unwrap();
        let fine_grid = scene.grid.clone().with_quad_order(ORACLE_QUAD_ORDER);
        let fine = source_state(&kernel, &scene.sources[0], &fine_grid, 0.0).unwrap();
        assert!(coarse.eta <= 1.0 + 1e-9);
        let scale = coarse.eta.sqrt();
        for (a, b) in coarse.state.amps().iter().zip(fine.state.amps()) {
            assert!(((a - b) * scale).norm() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn missed_detector_is_an_error() {
        let scene = crate::experiments::default_scene(2).unwrap();
        let kernel = PsfKernel::new(&scene.pupil);
        let far = PointSource::new(scene.pupil.z_o * 2e-3, 0.0, SourceLabel::Star).unwrap();
        assert!(matches!(
            source_state(&kernel, &far, &scene.grid, DEFAULT_ETA_FLOOR),
            Err(Error::LowEfficiency(_))
        ));
    }

    #[test]
    fn rho_spectrum_for_equal_brightness() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(9);
        let a = PureState::random(6, &mut rng);
        let b = PureState::random(6, &mut rng);
        let (rho, truth) = mix_sources(&a, &b, 0.5).unwrap();
        let ev = rho.spectrum().unwrap().values;
        assert!((ev[5] - (1.0 + truth.h) / 2.0).abs() < 1e-12);
        assert!((ev[4] - (1.0 - truth.h) / 2.0).abs() < 1e-12);
        assert!(ev[3].abs() < 1e-10);
        let raw = inner(truth.psi1.amps(), truth.psi2.amps());
        assert!(raw.im.abs() < 1e-12 && raw.re >= 0.0);
    }

    #[test]
    fn pure_and_orthogonal_limits() {
        let (rho, truth) = mix_sources(&PureState::basis(4, 0), &PureState::basis(4, 3), 1.0).unwrap();
        assert!((truth.r - 1.0).abs() < 1e-12);
        assert!((rho.purity() - 1.0).abs() < 1e-12);
        let (rho, truth) = mix_sources(&PureState::basis(4, 1), &PureState::basis(4, 2), 0.7).unwrap();
        let e = rho.spectrum().unwrap();
        assert!((e.values[3] - 0.7).abs() < 1e-12 && (e.values[2] - 0.3).abs() < 1e-12);
        assert!((crate::numkit::fidelity_pure(&PureState::new(e.vector(3)).unwrap(), &truth.psi1) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn noise_shifts_top_eigenvalue() {
        let d = 16;
        let psi1 = PureState::basis(d, 0);
        let mut amps = vec![ZERO; d];
        amps[0] = C64::new(0.3, 0.0);
        amps[1] = C64::new(0.9539392014169456, 0.0);
        let psi2 = PureState::new(amps).unwrap();
        // choose b so that r = 0.9 for h = 0.3
        let h: f64 = 0.3;
        let b = 0.5 + 0.5 * (1.0 - 0.36 / (1.0 - h * h)).sqrt();
        let (rho, truth) = mix_sources(&psi1, &psi2, b).unwrap();
        assert!((truth.r - 0.9).abs() < 1e-12);
        let noisy = apply_noise(&rho, 1e-3).unwrap();
        let top = *noisy.spectrum().unwrap().values.last().unwrap();
        assert!((top - 0.8991625).abs() < 1e-12);
        assert_eq!(apply_noise(&rho, 0.0).unwrap().matrix(), rho.matrix());
        let mixed = apply_noise(&rho, 1.0).unwrap();
        assert!(mixed.matrix().sub(DensityOperator::maximally_mixed(d).matrix()).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn phase_mask_wraps_and_file_parses() {
        assert_eq!(wrap_phase(PI), -PI);
        assert!((wrap_phase(3.0 * PI + 0.1) - (-PI + 0.1)).abs() < 1e-12);
        let m = parse_matrix("1 2\n3,4\n", 2).unwrap();
        assert_eq!(m, vec![1.0, 2.0, 3.0, 4.0]);
        assert!(parse_matrix("1 2 3\n", 2).is_err());
    }
}
