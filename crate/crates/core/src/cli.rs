//! `graphdiff` command-line interface.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{DatasetKind, Phase, RunConfig};
use crate::data::{self, DatasetManifest, GraphSample};
use crate::error::Result;
use crate::metrics::{self, MmdRow};
use crate::samplers::{self, NetScore, SamplerMethod};
use crate::train::Trainer;

#[derive(Debug, Parser)]
#[command(name = "graphdiff", version, about = "Score-based diffusion for graph generation")]
pub struct Cli {
    /// Output root; overrides `run.out_dir`.
    #[arg(long, global = true, env = "GRAPHDIFF_OUT")]
    pub out: Option<PathBuf>,

    /// Flat `section.key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Config override `section.key=value`; repeatable, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,

    /// Global seed (`run.seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate or ingest a dataset and write the train/val/test split.
    GenData(GenDataArgs),
    /// Train the score network.
    Train(TrainArgs),
    /// Generate graphs from a checkpoint.
    Sample(SampleArgs),
    /// Compare generated graphs against the test split.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum DatasetArg {
    CommunitySmall,
    Er,
    EdgeList,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, value_enum)]
    pub dataset: Option<DatasetArg>,
    /// Edge-list file for `--dataset edge_list`.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub count: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Total training steps (`train.total_steps`).
    #[arg(long)]
    pub steps: Option<u64>,
    /// Continue from the existing checkpoint.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum MethodArg {
    Em,
    Pc,
    OdeFixed,
    OdeAdaptive,
}

impl From<MethodArg> for SamplerMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Em => SamplerMethod::Em,
            MethodArg::Pc => SamplerMethod::Pc,
            MethodArg::OdeFixed => SamplerMethod::OdeFixed,
            MethodArg::OdeAdaptive => SamplerMethod::OdeAdaptive,
        }
    }
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    /// RK4 step size (`sampler.ode_step_size`).
    #[arg(long)]
    pub step_size: Option<f64>,
    /// Adaptive solver tolerance (`sampler.ode_error_tol`).
    #[arg(long)]
    pub tol: Option<f64>,
    /// SDE discretization steps (`sampler.num_steps`).
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 1024)]
    pub count: usize,
    /// Defaults to `<out>/train/checkpoint.bin`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output name under `<out>/samples/`; defaults to the method name.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum BaselineArg {
    Er,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Generated graphs; defaults to `<out>/samples/<name>.txt`.
    #[arg(long)]
    pub samples: Option<PathBuf>,
    /// Sample set name under `<out>/samples/`.
    #[arg(long, default_value = "pc")]
    pub name: String,
    /// Reference graphs; defaults to the test split.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Training graphs for the train/test row and baselines.
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub baseline: Vec<BaselineArg>,
}

/// Output directory layout of one run.
#[derive(Debug, Clone)]
pub struct RunDirs {
    pub root: PathBuf,
}

impl RunDirs {
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn train(&self) -> PathBuf {
        self.root.join("train")
    }
    pub fn samples(&self) -> PathBuf {
        self.root.join("samples")
    }
    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.train().join("checkpoint.bin")
    }
}

fn resolve_config(cli: &Cli) -> Result<(RunConfig, RunDirs)> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    match &cli.command {
        Command::GenData(a) => {
            if let Some(d) = a.dataset {
                cfg.data.kind = match d {
                    DatasetArg::CommunitySmall => DatasetKind::CommunitySmall,
                    DatasetArg::Er => DatasetKind::Er,
                    DatasetArg::EdgeList => DatasetKind::EdgeList,
                };
            }
            if let Some(p) = &a.input {
                cfg.data.path = Some(p.clone());
            }
            if let Some(c) = a.count {
                cfg.data.count = c;
            }
        }
        Command::Train(a) => {
            if let Some(s) = a.steps {
                cfg.train.total_steps = s;
            }
        }
        Command::Sample(a) => {
            if let Some(m) = a.method {
                cfg.sampler.method = m.into();
            }
            if let Some(h) = a.step_size {
                cfg.sampler.ode_step_size = h;
            }
            if let Some(t) = a.tol {
                cfg.sampler.ode_error_tol = t;
            }
            if let Some(s) = a.steps {
                cfg.sampler.num_steps = s;
            }
        }
        Command::Eval(_) => {}
    }
    for s in &cli.set {
        cfg.set_assignment(s)?;
    }
    if let Some(out) = &cli.out {
        cfg.run.out_dir = out.clone();
    }
    cfg.validate()?;
    let dirs = RunDirs {
        root: cfg.run.out_dir.clone(),
    };
    Ok((cfg, dirs))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub fn cmd_gen_data(cfg: &RunConfig, dirs: &RunDirs) -> Result<DatasetManifest> {
    let seed = cfg.phase_seed(Phase::Data);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let graphs = match cfg.data.kind {
        DatasetKind::CommunitySmall => data::gen_community_small(cfg.data.count, &mut rng),
        DatasetKind::Er => data::gen_er(cfg.data.count, cfg.data.er_nodes, cfg.data.er_p, &mut rng)?,
        DatasetKind::EdgeList => {
            let path = cfg.data.path.as_ref().expect("validated");
            data::load_edge_lists(path, cfg.data.strict)?
        }
    };
    let split = data::make_split(&graphs, crate::derive_seed(seed, 1))?;
    let dir = dirs.data();
    fs::create_dir_all(&dir)?;
    data::write_graphs(dir.join("all.txt"), &graphs)?;
    data::write_graphs(dir.join("train.txt"), &split.train)?;
    data::write_graphs(dir.join("val.txt"), &split.val)?;
    data::write_graphs(dir.join("test.txt"), &split.test)?;
    let manifest = DatasetManifest::new(&cfg.data.kind.to_string(), cfg.run.seed, &graphs, &split);
    write_json(&dir.join("manifest.json"), &manifest)?;
    fs::write(dir.join("config.txt"), cfg.to_kv()?)?;
    info!(
        "wrote {} graphs ({} train / {} val / {} test) to {}",
        graphs.len(),
        split.train.len(),
        split.val.len(),
        split.test.len(),
        dir.display()
    );
    Ok(manifest)
}

/// Reads the split written by `gen-data`.
pub fn load_split(dirs: &RunDirs) -> Result<data::DatasetSplit> {
    let dir = dirs.data();
    let read = |name: &str| data::load_edge_lists(dir.join(name), true);
    let train = read("train.txt")?;
    let node_counts = data::NodeCountDistribution::from_graphs(&train)?;
    Ok(data::DatasetSplit {
        val: read("val.txt")?,
        test: read("test.txt")?,
        train,
        node_counts,
    })
}

pub fn cmd_train(cfg: &RunConfig, dirs: &RunDirs, resume: bool) -> Result<Checkpoint> {
    let split = load_split(dirs)?;
    let dir = dirs.train();
    fs::create_dir_all(&dir)?;
    let ck_path = dirs.checkpoint();
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = cfg.phase_seed(Phase::Train);
    let mut trainer = if resume {
        let ck = Checkpoint::load(&ck_path)?;
        let mut t = Trainer::from_checkpoint(&ck)?;
        // only the horizon may change on resume
        t.cfg.total_steps = train_cfg.total_steps;
        info!("resuming at step {}", t.step);
        t
    } else {
        let mut pgsn = cfg.pgsn.clone();
        let largest = split.train.iter().map(GraphSample::n).max().unwrap_or(1);
        if pgsn.max_nodes < largest {
            info!("raising pgsn.max_nodes from {} to {largest}", pgsn.max_nodes);
            pgsn.max_nodes = largest;
        }
        Trainer::new(pgsn, train_cfg, cfg.sde)?
    };
    let mut echo = cfg.clone();
    echo.pgsn = trainer.net.config().clone();
    echo.train = trainer.cfg.clone();
    fs::write(dir.join("config.txt"), echo.to_kv()?)?;
    let log_path = dir.join("log.ndjson");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(resume)
        .write(true)
        .truncate(!resume)
        .open(&log_path)?;
    info!(
        "training {} parameters for {} steps",
        trainer.net.params().num_scalars(),
        trainer.cfg.total_steps
    );
    let records = trainer.fit(&split, Some(&ck_path), &mut log)?;
    log.flush()?;
    if let Some(last) = records.last() {
        info!("step {} loss {:.5} val {:?}", last.step, last.loss, last.val_loss);
    }
    // fit saves on the last step; make sure a checkpoint exists even for zero-step runs
    if !ck_path.exists() {
        trainer.checkpoint()?.save(&ck_path)?;
    }
    Checkpoint::load(&ck_path)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleManifest {
    pub checkpoint: PathBuf,
    pub checkpoint_step: u64,
    #[serde(flatten)]
    pub generation: samplers::GenerationManifest,
}

pub fn cmd_sample(
    cfg: &RunConfig,
    dirs: &RunDirs,
    count: usize,
    checkpoint: Option<&Path>,
    name: Option<&str>,
) -> Result<(Vec<GraphSample>, SampleManifest)> {
    let ck_path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| dirs.checkpoint());
    let ck = Checkpoint::load(&ck_path)?;
    let trainer = Trainer::from_checkpoint(&ck)?;
    let net = trainer.ema_network()?;
    let dist = match &ck.node_counts {
        Some(d) => d.clone(),
        None => load_split(dirs)?.node_counts,
    };
    let mut sampler = cfg.sampler.clone();
    sampler.seed = cfg.phase_seed(Phase::Sample);
    let score = NetScore { net: &net, sde: ck.sde };
    let (graphs, generation) = samplers::generate(&score, &dist, count, &sampler, &ck.sde)?;
    let dir = dirs.samples();
    fs::create_dir_all(&dir)?;
    let name = name.map(str::to_string).unwrap_or_else(|| sampler.method.to_string());
    data::write_graphs(dir.join(format!("{name}.txt")), &graphs)?;
    let manifest = SampleManifest {
        checkpoint: ck_path,
        checkpoint_step: ck.step,
        generation,
    };
    write_json(&dir.join(format!("{name}.manifest.json")), &manifest)?;
    info!(
        "{} graphs with {} (NFE {}) in {:.1}s",
        graphs.len(),
        manifest.generation.method,
        manifest.generation.nfe,
        manifest.generation.wall_time_total
    );
    Ok((graphs, manifest))
}

/// ER graphs with the MLE edge probability and node counts drawn from `train`.
pub fn er_baseline_graphs(train: &[GraphSample], count: usize, seed: u64) -> Result<Vec<GraphSample>> {
    let p = metrics::er_baseline(train)?;
    let dist = data::NodeCountDistribution::from_graphs(train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let n = samplers::sample_node_count(&dist, &mut rng)?;
        out.extend(data::gen_er(1, n, p, &mut rng)?);
    }
    Ok(out)
}

pub fn cmd_eval(cfg: &RunConfig, dirs: &RunDirs, args: &EvalArgs) -> Result<metrics::MmdReport> {
    let samples = args
        .samples
        .clone()
        .unwrap_or_else(|| dirs.samples().join(format!("{}.txt", args.name)));
    let test_path = args.test.clone().unwrap_or_else(|| dirs.data().join("test.txt"));
    let train_path = args.train.clone().unwrap_or_else(|| dirs.data().join("train.txt"));
    let generated = data::load_edge_lists(&samples, true)?;
    let test = data::load_edge_lists(&test_path, true)?;
    let train = data::load_edge_lists(&train_path, true)?;
    let mut report = metrics::evaluate(&generated, &test, &train)?;
    for b in &args.baseline {
        match b {
            BaselineArg::Er => {
                let er = er_baseline_graphs(&train, generated.len(), cfg.phase_seed(Phase::Eval))?;
                report.baselines.push(("ER".into(), MmdRow::compare(&er, &test)?));
            }
        }
    }
    let dir = dirs.eval();
    fs::create_dir_all(&dir)?;
    let stem = samples
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| args.name.clone());
    fs::write(dir.join(format!("{stem}.report.txt")), report.to_string())?;
    fs::write(dir.join(format!("{stem}.report.kv")), report.to_kv())?;
    write_json(&dir.join(format!("{stem}.report.json")), &report)?;
    Ok(report)
}

/// Runs a parsed command line; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                2
            } else {
                1
            }
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    let (cfg, dirs) = resolve_config(cli)?;
    match &cli.command {
        Command::GenData(_) => {
            let m = cmd_gen_data(&cfg, &dirs)?;
            println!(
                "{} graphs, nodes {}..={} (mean {:.2}), written to {}",
                m.count,
                m.min_nodes,
                m.max_nodes,
                m.mean_nodes,
                dirs.data().display()
            );
        }
        Command::Train(a) => {
            let ck = cmd_train(&cfg, &dirs, a.resume)?;
            println!("checkpoint at step {} written to {}", ck.step, dirs.checkpoint().display());
        }
        Command::Sample(a) => {
            let (graphs, m) = cmd_sample(&cfg, &dirs, a.count, a.checkpoint.as_deref(), a.name.as_deref())?;
            println!(
                "{} graphs, method {}, NFE {}, {:.4}s per graph",
                graphs.len(),
                m.generation.method,
                m.generation.nfe,
                m.generation.wall_time_per_graph
            );
        }
        Command::Eval(a) => {
            let report = cmd_eval(&cfg, &dirs, a)?;
            print!("{report}");
        }
    }
    Ok(())
}
