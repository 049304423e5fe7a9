use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use psfsort::baseline::{
    complexity_csv, complexity_tables, dk_csv, dk_experiment, resource_counts, tomography_csv, tomography_sweep,
    ComplexityParams, Reconstructor,
};
use psfsort::estimation::{report_csv, EstimationMode};
use psfsort::experiments::{
    default_scene, estimate_pipeline, filter_sweep, selftest, EstimateConfig, ObservableSpec, PriorSpec, SupplyMode,
    TrialRunner,
};
use psfsort::kv::{KvDoc, KvWriter};
use psfsort::optics::{build_rho, state_csv, SCENE_KEYS};
use psfsort::qpca::PhotonSource;
use psfsort::qsp::sweep_csv;
use psfsort::Scene;

#[derive(Parser, Debug)]
#[command(name = "psfsort", version, about = "Batch experiments for eigenbasis sorting of two point sources")]
struct Cli {
    /// key = value file with scene and experiment settings
    #[arg(long, global = true, env = "PSFSORT_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, global = true, env = "PSFSORT_SEED")]
    seed: Option<u64>,
    #[arg(long, global = true, env = "PSFSORT_TRIALS")]
    trials: Option<u64>,
    #[arg(long, global = true, value_enum, env = "PSFSORT_MODE")]
    mode: Option<Mode>,
    #[arg(long, global = true, env = "PSFSORT_OUT", default_value = "out")]
    out: PathBuf,
    /// Worker threads; results do not depend on it
    #[arg(long, global = true, env = "PSFSORT_WORKERS")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Ideal,
    Circuit,
    Analytic,
    Shot,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Build the scene and dump the spectrum and source states
    Scene,
    /// Filter trials over a list of error budgets
    Filter,
    /// End-to-end estimate of a weak-source expectation value
    Estimate,
    /// Tomography baseline sweep
    Tomography,
    /// Eigenvector perturbation grid
    DavisKahan,
    /// Photon-cost comparison grid
    Complexity,
    /// Qubit and gate counts
    Resources,
    /// Fast invariant checks
    Selftest,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Scene => "scene",
            Command::Filter => "filter",
            Command::Estimate => "estimate",
            Command::Tomography => "tomography",
            Command::DavisKahan => "davis-kahan",
            Command::Complexity => "complexity",
            Command::Resources => "resources",
            Command::Selftest => "selftest",
        }
    }
}

/// Resolved settings. Everything written here is hashed into the manifest.
struct Run {
    doc: KvDoc,
    manifest: KvWriter,
    out: PathBuf,
    hash: String,
    seed: u64,
    trials: Option<u64>,
    mode: Option<Mode>,
    runner: TrialRunner,
}

impl Run {
    /// Takes an optional key, records the value used.
    fn get<T>(&mut self, key: &str, default: T) -> Result<T>
    where
        T: std::str::FromStr + std::fmt::Display,
        T::Err: std::fmt::Display,
    {
        let v = self.doc.take(key)?.unwrap_or(default);
        self.manifest.put(key, &v);
        Ok(v)
    }

    fn list<T>(&mut self, key: &str, default: &str) -> Result<Vec<T>>
    where
        T: std::str::FromStr,
        T::Err: std::fmt::Display,
    {
        let raw = self.doc.take_raw(key).unwrap_or_else(|| default.to_string());
        self.manifest.put(key, &raw);
        raw.split(',')
            .map(|t| t.trim().parse::<T>().map_err(|e| anyhow::anyhow!("{key}: {e}")))
            .collect()
    }

    /// Rejects leftover keys and writes the manifest.
    fn seal(&mut self) -> Result<()> {
        std::mem::take(&mut self.doc).finish()?;
        let text = self.manifest.finish();
        self.hash = hex::encode(Sha256::digest(text.as_bytes()));
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        fs::write(self.out.join("manifest.txt"), text)?;
        Ok(())
    }

    fn write(&self, name: &str, body: &str) -> Result<()> {
        let path = self.out.join(name);
        fs::write(&path, format!("# manifest_sha256 = {}\n{body}", self.hash))
            .with_context(|| format!("writing {}", path.display()))?;
        println!("wrote {}", path.display());
        Ok(())
    }
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let (doc, base_dir) = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            (KvDoc::parse(&text)?, path.parent().map(Path::to_path_buf).unwrap_or_default())
        }
        None => (KvDoc::default(), PathBuf::from(".")),
    };
    let mut run = Run {
        doc,
        manifest: KvWriter::new(),
        out: cli.out.clone(),
        hash: String::new(),
        seed: 0,
        trials: None,
        mode: cli.mode,
        runner: TrialRunner::new(0, 1),
    };
    run.manifest.put("command", cli.command.name()).put("version", env!("CARGO_PKG_VERSION"));
    let from_file_seed: Option<u64> = run.doc.take("seed")?;
    let from_file_trials: Option<u64> = run.doc.take("trials")?;
    run.seed = cli.seed.or(from_file_seed).unwrap_or(1);
    run.trials = cli.trials.or(from_file_trials);
    let workers = cli.workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    run.runner = TrialRunner::new(run.seed, workers);
    run.manifest.put("seed", run.seed);

    match cli.command {
        Command::Scene => scene_cmd(&mut run, &base_dir),
        Command::Filter => filter_cmd(&mut run, &base_dir),
        Command::Estimate => estimate_cmd(&mut run, &base_dir),
        Command::Tomography => tomography_cmd(&mut run),
        Command::DavisKahan => dk_cmd(&mut run),
        Command::Complexity => complexity_cmd(&mut run),
        Command::Resources => resources_cmd(&mut run),
        Command::Selftest => selftest_cmd(&mut run),
    }
}

/// A full scene description when `lambda_m` is present, otherwise the
/// default two-source scene with optional `grid_n` and `gamma`.
fn load_scene(run: &mut Run, base_dir: &Path) -> Result<Scene> {
    if run.doc.contains("lambda_m") {
        let mut sub = run.doc.split_off(SCENE_KEYS);
        for (k, v) in sub.iter() {
            run.manifest.put(k, v);
        }
        let scene = Scene::from_kv(&mut sub, base_dir)?;
        sub.finish()?;
        Ok(scene)
    } else {
        let side: usize = run.get("grid_n", 4)?;
        let gamma: f64 = run.get("gamma", 0.0)?;
        let mut scene = default_scene(side)?;
        scene.gamma = gamma;
        scene.validate()?;
        Ok(scene)
    }
}

fn scene_cmd(run: &mut Run, base_dir: &Path) -> Result<()> {
    let scene = load_scene(run, base_dir)?;
    run.seal()?;
    let (rho, truth) = build_rho(&scene)?;
    let side = scene.grid.side;
    let spectrum = rho.spectrum()?;
    let mut csv = String::from("index,eigenvalue\n");
    for (i, v) in spectrum.values.iter().rev().enumerate() {
        csv.push_str(&format!("{i},{v:e}\n"));
    }
    run.write("spectrum.csv", &csv)?;
    run.write("psi1.csv", &state_csv(&truth.psi1, side))?;
    run.write("psi2.csv", &state_csv(&truth.psi2, side))?;
    let mut t = String::from("quantity,value\n");
    for (k, v) in [("r", truth.r), ("b", truth.b), ("h", truth.h), ("eta1", truth.eta[0]), ("eta2", truth.eta[1])] {
        t.push_str(&format!("{k},{v:e}\n"));
    }
    run.write("truth.csv", &t)?;
    println!("r = {:.6}  h = {:.6}  eta = ({:.4}, {:.4})", truth.r, truth.h, truth.eta[0], truth.eta[1]);
    Ok(())
}

fn supply_of(run: &mut Run, default: &str) -> Result<SupplyMode> {
    let from_flag = match run.mode {
        Some(Mode::Ideal) => Some("ideal"),
        Some(Mode::Circuit) => Some("circuit"),
        _ => None,
    };
    let file: Option<String> = run.doc.take_raw("supply");
    let value = from_flag.map(str::to_string).or(file).unwrap_or_else(|| default.to_string());
    run.manifest.put("supply", &value);
    Ok(value.parse()?)
}

fn filter_cmd(run: &mut Run, base_dir: &Path) -> Result<()> {
    let scene = load_scene(run, base_dir)?;
    let supply = supply_of(run, "circuit")?;
    let eps: Vec<f64> = run.list("eps", "0.2,0.1,0.05,0.025")?;
    let delta: f64 = run.get("delta", 0.05)?;
    let r_prior_raw = run.doc.take_raw("r_prior");
    let trials = run.trials.unwrap_or(2000);
    run.manifest.put("trials", trials);
    run.manifest.put("r_prior", r_prior_raw.as_deref().unwrap_or("truth"));
    run.seal()?;
    let (rho, truth) = build_rho(&scene)?;
    let r_prior = match r_prior_raw {
        Some(v) => v.parse().context("r_prior")?,
        None => truth.r,
    };
    let noisy = psfsort::optics::apply_noise(&rho, scene.gamma)?;
    let source = Arc::new(PhotonSource::new(noisy)?);
    let rows = filter_sweep(source, truth.r, r_prior, scene.gamma, &eps, delta, supply, trials, &run.runner)?;
    run.write("filter_sweep.csv", &sweep_csv(&rows))
}

fn estimate_cmd(run: &mut Run, base_dir: &Path) -> Result<()> {
    let scene = load_scene(run, base_dir)?;
    let supply = supply_of(run, "circuit")?;
    let shots: u64 = run.get("shots", 1_000_000_000_000)?;
    let est_file: Option<String> = run.doc.take_raw("estimation");
    let est = match run.mode {
        Some(Mode::Analytic) => "analytic".to_string(),
        Some(Mode::Shot) => "shot".to_string(),
        _ => est_file.unwrap_or_else(|| "shot".into()),
    };
    run.manifest.put("estimation", &est);
    let estimation = match est.as_str() {
        "analytic" => EstimationMode::Analytic,
        "shot" => EstimationMode::Shots(shots),
        other => bail!("unknown estimation mode {other:?}"),
    };
    let eps: f64 = run.get("eps", 0.05)?;
    let delta: f64 = run.get("delta", 0.002)?;
    let r_prior: Option<f64> = run.doc.take("r_prior")?;
    run.manifest.put("r_prior", r_prior.map_or("nominal".to_string(), |v| v.to_string()));
    let phase_prior: PriorSpec = run.get("phase_prior", PriorSpec::Truth)?;
    let o_ref: ObservableSpec = run.get("o_ref", ObservableSpec::CentroidX)?;
    let o: ObservableSpec = run.get("observable", ObservableSpec::CentroidX)?;
    let trials = run.trials.unwrap_or(100_000);
    run.manifest.put("trials", trials);
    run.seal()?;
    let (rho, truth) = build_rho(&scene)?;
    let cfg = EstimateConfig { eps, delta, r_prior, trials, supply, estimation, phase_prior, o_ref, o };
    let report = estimate_pipeline(&rho, &truth, scene.gamma, &cfg, &run.runner)?;
    run.write("estimate.csv", &report_csv(&report.rows))?;
    println!(
        "weak source <O>: estimate {:.6}, truth {:.6}",
        report.psi2_estimate, report.psi2_truth
    );
    Ok(())
}

fn tomography_cmd(run: &mut Run) -> Result<()> {
    let dims: Vec<usize> = run.list("dims", "4,16")?;
    let copies: Vec<u64> = run.list("copies", "1000,10000,100000")?;
    let r: f64 = run.get("r", 0.9)?;
    let recon_raw: String = run.get("reconstructor", "linear_inversion".to_string())?;
    let reconstructor = match (run.mode, recon_raw.as_str()) {
        (_, "linear_inversion") => Reconstructor::LinearInversion,
        (_, "diluted_mle") => Reconstructor::DilutedMle,
        (_, other) => bail!("unknown reconstructor {other:?}"),
    };
    run.seal()?;
    let rows = tomography_sweep(&dims, &copies, r, reconstructor, run.seed)?;
    run.write("tomography_sweep.csv", &tomography_csv(&rows))
}

fn dk_cmd(run: &mut Run) -> Result<()> {
    let r_grid: Vec<f64> = run.list("r_grid", "0.55,0.6,0.65,0.7,0.75,0.8,0.85,0.9,0.95")?;
    let fractions: Vec<f64> = run.list("eps_fractions", "0.02,0.05,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")?;
    let dim: usize = run.get("dim", 16)?;
    run.seal()?;
    let cells = dk_experiment(&r_grid, &fractions, dim, run.seed)?;
    run.write("dk_ratio.csv", &dk_csv(&cells))
}

fn complexity_cmd(run: &mut Run) -> Result<()> {
    let ns: Vec<usize> = run.list("n", "2,4,6,8,10,12,14,16,18,20")?;
    let rs: Vec<f64> = run.list("r", "0.55,0.6,0.65,0.7,0.75,0.8,0.85,0.9,0.909090909090909,0.95")?;
    let gammas: Vec<f64> = run.list("gamma", "0,0.001")?;
    let eps: Vec<f64> = run.list("eps_st", "0.1")?;
    run.seal()?;
    let mut grid = Vec::new();
    for &g in &gammas {
        for &e in &eps {
            for &n in &ns {
                for &r in &rs {
                    grid.push(ComplexityParams::new(n, r, g, e)?);
                }
            }
        }
    }
    run.write("complexity_grid.csv", &complexity_csv(&complexity_tables(&grid)))
}

fn resources_cmd(run: &mut Run) -> Result<()> {
    let n: usize = run.get("n", 10)?;
    let eps: f64 = run.get("eps_st", 0.1)?;
    let c: f64 = run.get("gate_constant", 1.0)?;
    let snr: f64 = run.get("snr", 10.0)?;
    run.seal()?;
    let r = resource_counts(n, eps, c, snr)?;
    let body = format!(
        "N,eps_st,gate_constant,snr,pixel_qubits,memory_qubits,compression_gates,processing_gates,total_gates,gate_error_threshold\n\
         {},{:e},{},{},{},{},{},{},{},{:e}\n",
        r.n, r.eps_st, r.gate_constant, r.snr, r.pixel_qubits, r.memory_qubits, r.compression_gates,
        r.processing_gates, r.total_gates, r.gate_error_threshold
    );
    run.write("resources.csv", &body)?;
    println!(
        "{} pixel qubits, {} memory qubits, {} gates, threshold {:.2e}",
        r.pixel_qubits, r.memory_qubits, r.total_gates, r.gate_error_threshold
    );
    Ok(())
}

fn selftest_cmd(run: &mut Run) -> Result<()> {
    run.seal()?;
    let checks = selftest();
    let mut body = String::from("check,passed,detail\n");
    for c in &checks {
        println!("{:<32} {}  {}", c.name, if c.passed { "ok  " } else { "FAIL" }, c.detail);
        body.push_str(&format!("{},{},{}\n", c.name, c.passed, c.detail.replace(',', ";")));
    }
    run.write("selftest.csv", &body)?;
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        bail!("{failed} self-test checks failed");
    }
    Ok(())
}
