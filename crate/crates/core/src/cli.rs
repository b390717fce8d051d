//! The `wgflow` command line.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{fingerprint, operator_config_text, Checkpoint};
use crate::config::{load_config, FamilyConfig, LoadedConfig, TrainMode};
use crate::energy::{evaluate_energy, EnergySpec};
use crate::error::{Error, Result};
use crate::geometry::{chamfer_distance, ParticleEnsemble};
use crate::operator::{JkoModel, NeuralOperator, OperatorParams};
use crate::oracles::{
    gaussian_kl, integrate_particle_ode, relative_errors, ring_cloud, ring_radius_with_nodes,
    BarenblattSpec, ErrorReport, RING_NODES,
};
use crate::training::{
    generate_trajectory, keyed_rng, learn_to_evolve, train_baseline, Event, GenerateOptions, InitialFamilySpec,
    LedgerRow, TrainObserver,
};

pub const CONFIG_FILE: &str = "config.toml";
pub const LEDGER_FILE: &str = "ledger.csv";
pub const EVENTS_FILE: &str = "events.log";
pub const CHECKPOINT_FILE: &str = "checkpoint.wgf";
pub const MANIFEST_FILE: &str = "manifest.toml";

/// Points in the reference ring used for Chamfer comparisons.
const RING_POINTS: usize = 1024;

#[derive(Debug, Parser)]
#[command(name = "wgflow", version, about = "Train and evaluate learned JKO operators")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config entry, e.g. `--set train.budget=10`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Base directory for every relative path.
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,
    /// Validate and report what would happen without writing anything.
    #[arg(long, global = true)]
    pub dry_run: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an operator; writes a new run directory.
    Train {
        /// Run directory to create (must not exist).
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Apply a trained operator repeatedly.
    Rollout(RolloutArgs),
    /// Score a rollout directory against a reference.
    Eval {
        /// Directory holding `state_*.txt` files.
        #[arg(long)]
        trajectory: PathBuf,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(subcommand)]
        reference: EvalReference,
    },
    /// Reference solutions.
    #[command(subcommand)]
    Oracle(OracleCommand),
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub steps: usize,
    /// Initial ensemble file; otherwise drawn from the config's family.
    #[arg(long)]
    pub initial: Option<PathBuf>,
    /// Points to draw when sampling the initial density.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Barenblatt constant for the initial profile (Barenblatt families only).
    #[arg(long = "c")]
    pub c: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Force recentering on; the config value is used otherwise.
    #[arg(long)]
    pub recenter: bool,
    /// Output directory (must not exist).
    #[arg(long, default_value = "rollout")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum EvalReference {
    /// Relative L1/Linf against a Barenblatt profile.
    Barenblatt {
        #[arg(long)]
        d: usize,
        #[arg(long)]
        m: f64,
        #[arg(long = "c")]
        c: f64,
        #[arg(long, default_value_t = 1e-3)]
        t0: f64,
        #[arg(long)]
        dt: f64,
    },
    /// Chamfer distance to the equilibrium ring centred at each state's mean.
    Ring {
        #[arg(long)]
        p: f64,
        #[arg(long)]
        q: f64,
    },
    /// Energy per state, using the energy of `--config`.
    Energy,
}

#[derive(Debug, Subcommand)]
pub enum OracleCommand {
    Barenblatt {
        #[arg(long)]
        d: usize,
        #[arg(long)]
        m: f64,
        #[arg(long = "c")]
        c: f64,
        #[arg(long)]
        t: f64,
        #[arg(long, default_value_t = 1e-3)]
        t0: f64,
        #[arg(long, default_value_t = 1024)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "barenblatt.txt")]
        out: PathBuf,
    },
    Ring {
        #[arg(long)]
        p: f64,
        #[arg(long)]
        q: f64,
        #[arg(long, default_value_t = RING_NODES)]
        nodes: usize,
        /// Also write a ring point cloud (CSV) here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = RING_POINTS)]
        n: usize,
    },
    /// Integrate the interacting-particle ODE from a uniform square.
    Ode {
        #[arg(long)]
        p: f64,
        #[arg(long)]
        q: f64,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        t: f64,
        #[arg(long, default_value_t = 0.01)]
        h: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// KL divergence between two Gaussians; covariances as `a,b;c,d`.
    Kl {
        #[arg(long, allow_hyphen_values = true)]
        mean0: String,
        #[arg(long, allow_hyphen_values = true)]
        cov0: String,
        #[arg(long, allow_hyphen_values = true)]
        mean1: String,
        #[arg(long, allow_hyphen_values = true)]
        cov1: String,
    },
}

/// Record of a training run, written last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub status: String,
    pub seed: u64,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub config: String,
    pub config_hash: String,
    pub operator_fingerprint: String,
    pub checkpoints: Vec<String>,
    pub artifacts: Vec<String>,
    pub global_steps: usize,
    pub outer_iters: usize,
}

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn resolve(workdir: &Path, p: &Path) -> PathBuf {
    workdir.join(p)
}

fn loaded(g: &GlobalArgs) -> Result<LoadedConfig> {
    let path = g
        .config
        .as_ref()
        .ok_or_else(|| Error::config("this command needs --config"))?;
    load_config(&resolve(&g.workdir, path), &g.overrides)
}

fn fresh_dir(path: &Path) -> Result<()> {
    if path.exists() {
        return Err(Error::config(format!(
            "{} already exists; runs are immutable, choose a new directory",
            path.display()
        )));
    }
    std::fs::create_dir_all(path)?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Train { out } => cmd_train(g, out),
        Command::Rollout(args) => cmd_rollout(g, args),
        Command::Eval { trajectory, out, reference } => cmd_eval(g, trajectory, out.as_deref(), reference),
        Command::Oracle(cmd) => cmd_oracle(g, cmd),
    }
}

struct RunWriter {
    dir: PathBuf,
    config_text: String,
    ledger: csv::Writer<BufWriter<File>>,
    events: BufWriter<File>,
    checkpoints: usize,
}

impl RunWriter {
    fn checkpoint_path(&self) -> PathBuf {
        self.dir.join(CHECKPOINT_FILE)
    }

    fn save(&mut self, model: &dyn JkoModel) -> Result<()> {
        let ck = Checkpoint {
            config_text: self.config_text.clone(),
            params: OperatorParams {
                names: model.param_names(),
                tensors: model.params().to_vec(),
            },
        };
        let tmp = self.dir.join(format!("{CHECKPOINT_FILE}.tmp"));
        ck.write_file(&tmp)?;
        std::fs::rename(&tmp, self.checkpoint_path())?;
        self.checkpoints += 1;
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.ledger.flush()?;
        self.events.flush()?;
        Ok(())
    }
}

impl TrainObserver for RunWriter {
    fn event(&mut self, event: &Event) -> Result<()> {
        writeln!(self.events, "{}", event.to_line())?;
        Ok(())
    }

    fn ledger(&mut self, rows: &[LedgerRow]) -> Result<()> {
        for r in rows {
            self.ledger.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
        }
        Ok(())
    }

    fn checkpoint(&mut self, model: &dyn JkoModel, _outer: usize, _global: usize) -> Result<()> {
        self.save(model)
    }
}

fn cmd_train(g: &GlobalArgs, out: &Path) -> Result<()> {
    let cfg = loaded(g)?;
    let train = cfg.config.train_config(&g.workdir)?;
    let op_text = operator_config_text(&cfg.config.operator)?;
    if g.dry_run {
        print!("{}", cfg.text);
        if !cfg.text.ends_with('\n') {
            println!();
        }
        println!("# config hash {}", cfg.fingerprint());
        return Ok(());
    }
    let dir = resolve(&g.workdir, out);
    fresh_dir(&dir)?;
    let started = now();
    std::fs::write(dir.join(CONFIG_FILE), &cfg.text)?;
    let mut model = NeuralOperator::new(cfg.config.operator.clone())?;
    let mut writer = RunWriter {
        dir: dir.clone(),
        config_text: op_text.clone(),
        ledger: csv::Writer::from_writer(BufWriter::new(File::create(dir.join(LEDGER_FILE))?)),
        events: BufWriter::new(File::create(dir.join(EVENTS_FILE))?),
        checkpoints: 0,
    };
    let result = match cfg.config.train.mode {
        TrainMode::LearnToEvolve => learn_to_evolve(&mut model, &train, &mut writer),
        TrainMode::Baseline => {
            let data = cfg.config.baseline_data(&train)?;
            train_baseline(&mut model, &train, &data, &mut writer)
        }
    };
    // On abort the model holds the last parameters that passed the finite check.
    if result.is_err() {
        writer.save(&model)?;
    }
    writer.finish()?;
    let (status, steps, outers) = match &result {
        Ok(o) => ("completed".to_string(), o.global_steps, o.outer_iters),
        Err(e) => (format!("aborted: {e}"), 0, 0),
    };
    let manifest = RunManifest {
        status,
        seed: train.seed,
        started_unix: started,
        finished_unix: now(),
        config: CONFIG_FILE.into(),
        config_hash: cfg.fingerprint(),
        operator_fingerprint: fingerprint(&op_text),
        checkpoints: vec![CHECKPOINT_FILE.into()],
        artifacts: vec![CONFIG_FILE.into(), LEDGER_FILE.into(), EVENTS_FILE.into(), CHECKPOINT_FILE.into()],
        global_steps: steps,
        outer_iters: outers,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(dir.join(MANIFEST_FILE), text)?;
    let outcome = result?;
    println!(
        "trained {} inner steps over {} outer iterations; run directory {}",
        outcome.global_steps,
        outcome.outer_iters,
        dir.display()
    );
    Ok(())
}

impl FamilyConfig {
    fn with_points(&self, n: usize) -> Result<FamilyConfig> {
        let mut f = self.clone();
        match &mut f {
            FamilyConfig::Fixed { from: Some(inner), .. } => {
                return Ok(FamilyConfig::Fixed {
                    path: None,
                    from: Some(Box::new(inner.with_points(n)?)),
                    resample_points: true,
                })
            }
            FamilyConfig::Fixed { .. } => {
                return Err(Error::config("--samples cannot resize an ensemble read from a file"))
            }
            FamilyConfig::UniformBox(b) => b.points = n,
            FamilyConfig::UniformRectTri(r) => r.points = n,
            FamilyConfig::Barenblatt(b) => b.points = n,
            FamilyConfig::GaussianMix(gm) => gm.points = n,
        }
        Ok(f)
    }
}

fn state_name(step: usize) -> String {
    format!("state_{step:04}.txt")
}

fn read_states(dir: &Path) -> Result<Vec<ParticleEnsemble>> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("state_") && n.ends_with(".txt"))
        })
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Format(format!("{} holds no state_*.txt files", dir.display())));
    }
    names.iter().map(ParticleEnsemble::read_file).collect()
}

fn ring_chamfer(state: &ParticleEnsemble, radius: f64) -> Result<f64> {
    if state.dim() != 2 {
        return Err(Error::structural(format!("ring reference is 2-dimensional, state is {}-dimensional", state.dim())));
    }
    let ring = ring_cloud(state.mean().view(), radius, RING_POINTS);
    chamfer_distance(state.points(), ring.view())
}

fn cmd_rollout(g: &GlobalArgs, args: &RolloutArgs) -> Result<()> {
    let cfg = loaded(g)?;
    let ck = Checkpoint::read_file(resolve(&g.workdir, &args.checkpoint))?;
    let expected = cfg.config.operator_fingerprint()?;
    if ck.fingerprint() != expected {
        return Err(Error::config(format!(
            "checkpoint/config mismatch: checkpoint operator fingerprint {}, config operator fingerprint {expected}",
            ck.fingerprint()
        )));
    }
    if args.steps == 0 {
        return Err(Error::config("--steps must be >= 1"));
    }
    let model = ck.into_operator()?;
    let mut config = cfg.config.clone();
    if let Some(n) = args.samples {
        config.family = config.family.with_points(n)?;
    }
    let train = config.train_config(&g.workdir)?;
    let seed = args.seed.unwrap_or(train.seed);
    let (energy, cond) = train.energy.sample(&mut keyed_rng(seed, 0, 0, "rollout-energy"))?;
    let mut rng = keyed_rng(seed, 0, 0, "rollout-initial");
    let mut barenblatt = None;
    let initial = match (&args.initial, &train.family) {
        (Some(p), _) => ParticleEnsemble::read_file(resolve(&g.workdir, p))?,
        (None, InitialFamilySpec::Barenblatt(b)) => {
            let c = args.c.unwrap_or_else(|| {
                if b.c_range[0] == b.c_range[1] {
                    b.c_range[0]
                } else {
                    rng.gen_range(b.c_range[0]..b.c_range[1])
                }
            });
            let spec = BarenblattSpec::new(b.m_exponent, b.dim, c, b.t0)?;
            barenblatt = Some(spec);
            spec.sample_centered(0.0, b.points, b.landmarks, &mut rng)?
        }
        (None, family) => family.sample(&mut rng)?,
    };
    if initial.dim() != model.dim() {
        return Err(Error::structural(format!(
            "initial ensemble is {}-dimensional, operator is {}-dimensional",
            initial.dim(),
            model.dim()
        )));
    }
    let opts = GenerateOptions {
        recenter: args.recenter || train.recenter,
    };
    if g.dry_run {
        println!(
            "would roll out {} steps from {} points (recenter = {}) into {}",
            args.steps,
            initial.len(),
            opts.recenter,
            resolve(&g.workdir, &args.out).display()
        );
        return Ok(());
    }
    let traj = generate_trajectory(&model, initial, cond, energy.clone(), args.steps, opts)?;
    let dir = resolve(&g.workdir, &args.out);
    fresh_dir(&dir)?;
    for s in &traj.states {
        s.write_file(dir.join(state_name(s.step())))?;
    }
    let ring = match energy {
        EnergySpec::Interaction { p, q } if model.dim() == 2 => Some(ring_radius_with_nodes(p, q, RING_NODES)?),
        _ => None,
    };
    let mut w = csv::Writer::from_path(dir.join("summary.csv")).map_err(|e| Error::Format(e.to_string()))?;
    let mut header = vec!["step", "t", "energy"];
    if barenblatt.is_some() {
        header.extend(["L1", "Linf"]);
    }
    if ring.is_some() {
        header.push("chamfer_ring");
    }
    w.write_record(&header).map_err(|e| Error::Format(e.to_string()))?;
    for s in &traj.states {
        let t = s.step() as f64 * train.dt;
        let mut rec = vec![s.step().to_string(), format!("{t:e}"), format!("{:e}", evaluate_energy(&energy, s)?)];
        if let Some(spec) = &barenblatt {
            let (l1, linf) = relative_errors(s, spec, t)?;
            rec.extend([format!("{l1:e}"), format!("{linf:e}")]);
        }
        if let Some(r) = ring {
            rec.push(format!("{:e}", ring_chamfer(s, r)?));
        }
        w.write_record(&rec).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    if let Some((step, particle)) = traj.truncated {
        return Err(Error::Generation { step, index: particle });
    }
    println!("wrote {} states to {}", traj.states.len(), dir.display());
    Ok(())
}

fn emit(out: Option<&Path>, g: &GlobalArgs, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(resolve(&g.workdir, p), text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_eval(g: &GlobalArgs, trajectory: &Path, out: Option<&Path>, reference: &EvalReference) -> Result<()> {
    let states = read_states(&resolve(&g.workdir, trajectory))?;
    let mut buf = Vec::new();
    match reference {
        EvalReference::Barenblatt { d, m, c, t0, dt } => {
            let spec = BarenblattSpec::new(*m, *d, *c, *t0)?;
            let mut report = ErrorReport::default();
            for s in &states {
                let t = s.step() as f64 * dt;
                let (l1, linf) = relative_errors(s, &spec, t)?;
                report.push(t, l1, linf);
            }
            report.write_csv(&mut buf)?;
        }
        EvalReference::Ring { p, q } => {
            let r = ring_radius_with_nodes(*p, *q, RING_NODES)?;
            let values = states.iter().map(|s| ring_chamfer(s, r)).collect::<Result<Vec<_>>>()?;
            let mut w = csv::WriterBuilder::new().flexible(true).from_writer(&mut buf);
            w.write_record(["step", "chamfer_ring"]).map_err(|e| Error::Format(e.to_string()))?;
            for (s, v) in states.iter().zip(&values) {
                w.write_record([s.step().to_string(), format!("{v:e}")])
                    .map_err(|e| Error::Format(e.to_string()))?;
            }
            let ratio = values[0] / values[values.len() - 1];
            w.write_record(["radius", "initial_over_final"]).map_err(|e| Error::Format(e.to_string()))?;
            w.write_record([format!("{r:e}"), format!("{ratio:e}")])
                .map_err(|e| Error::Format(e.to_string()))?;
            w.flush()?;
        }
        EvalReference::Energy => {
            let cfg = loaded(g)?;
            let train = cfg.config.train_config(&g.workdir)?;
            let energy = match &train.energy {
                crate::training::EnergyFamily::Fixed(spec) => spec.clone(),
                _ => return Err(Error::config("energy traces need a fixed energy in the config")),
            };
            let values = states
                .iter()
                .map(|s| evaluate_energy(&energy, s))
                .collect::<Result<Vec<_>>>()?;
            let max_rise = values.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
            let mut w = csv::WriterBuilder::new().flexible(true).from_writer(&mut buf);
            w.write_record(["step", "energy"]).map_err(|e| Error::Format(e.to_string()))?;
            for (s, v) in states.iter().zip(&values) {
                w.write_record([s.step().to_string(), format!("{v:e}")])
                    .map_err(|e| Error::Format(e.to_string()))?;
            }
            w.write_record(["max_rise"]).map_err(|e| Error::Format(e.to_string()))?;
            w.write_record([format!("{max_rise:e}")]).map_err(|e| Error::Format(e.to_string()))?;
            w.flush()?;
        }
    }
    if g.dry_run {
        println!("evaluated {} states; nothing written", states.len());
        return Ok(());
    }
    emit(out, g, &String::from_utf8_lossy(&buf))
}

fn parse_vector(s: &str) -> Result<Array1<f64>> {
    s.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| Error::config(format!("bad number `{v}` in `{s}`"))))
        .collect::<Result<Vec<_>>>()
        .map(Array1::from)
}

fn parse_matrix(s: &str) -> Result<Array2<f64>> {
    let rows = s.split(';').map(parse_vector).collect::<Result<Vec<_>>>()?;
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::config(format!("ragged matrix `{s}`")));
    }
    Ok(Array2::from_shape_fn((rows.len(), cols), |(i, j)| rows[i][j]))
}

fn cmd_oracle(g: &GlobalArgs, cmd: &OracleCommand) -> Result<()> {
    match cmd {
        OracleCommand::Barenblatt {
            d,
            m,
            c,
            t,
            t0,
            n,
            seed,
            out,
        } => {
            let spec = BarenblattSpec::new(*m, *d, *c, *t0)?;
            let e = spec.sample(*t, *n, &mut keyed_rng(*seed, 0, 0, "oracle-barenblatt"))?;
            println!("support radius {:.10}", spec.support_radius(*t));
            if !g.dry_run {
                e.write_file(resolve(&g.workdir, out))?;
            }
        }
        OracleCommand::Ring { p, q, nodes, out, n } => {
            let r = ring_radius_with_nodes(*p, *q, *nodes)?;
            println!("{r:.10}");
            if let (Some(out), false) = (out, g.dry_run) {
                write_points(&resolve(&g.workdir, out), &ring_cloud(Array1::zeros(2).view(), r, *n))?;
            }
        }
        OracleCommand::Ode {
            p,
            q,
            n,
            t,
            h,
            seed,
            out,
        } => {
            let mut rng = keyed_rng(*seed, 0, 0, "oracle-ode");
            let x0 = Array2::from_shape_fn((*n, 2), |_| rng.gen_range(-1.0..1.0));
            let steps = (t / h).round() as usize;
            let x = integrate_particle_ode(x0.view(), *p, *q, *h, steps)?;
            let c = x.mean_axis(ndarray::Axis(0)).unwrap();
            let mean_r = x.outer_iter().map(|row| (&row - &c).dot(&(&row - &c)).sqrt()).sum::<f64>() / *n as f64;
            println!("mean radius {mean_r:.10}");
            if let (Some(out), false) = (out, g.dry_run) {
                write_points(&resolve(&g.workdir, out), &x)?;
            }
        }
        OracleCommand::Kl { mean0, cov0, mean1, cov1 } => {
            let kl = gaussian_kl(
                parse_vector(mean0)?.view(),
                parse_matrix(cov0)?.view(),
                parse_vector(mean1)?.view(),
                parse_matrix(cov1)?.view(),
            )?;
            println!("{kl:.12e}");
        }
    }
    Ok(())
}

fn write_points(path: &Path, x: &Array2<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    let header: Vec<String> = (0..x.ncols()).map(|j| format!("x{j}")).collect();
    w.write_record(&header).map_err(|e| Error::Format(e.to_string()))?;
    for row in x.outer_iter() {
        w.write_record(row.iter().map(|v| format!("{v:.16e}")))
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
