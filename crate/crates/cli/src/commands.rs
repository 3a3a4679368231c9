use crate::config::PipelineConfig;
use crate::{CliError, Common};
use clap::{Args, ValueEnum};
use mocurate::annotate::{evaluate, train_annotator};
use mocurate::checkpoint::{config_hash, file_hash, Checkpoint};
use mocurate::data::{load_dataset, load_labels_dir, normalize_dataset, save_dataset, save_labels_dir, LabelMatrix, MotionDataset};
use mocurate::experiments::{benchmark_config, 
    ablation_table, budget_sweep, embed_dataset, run_ablation, summarize, summary_csv, Embeddings, Selection, SweepInputs,
    RAW_FRAMES,
};
use mocurate::pretrain::{pretrain_with, write_loss_csv, PretrainError};
use mocurate::rank::{fps_oracle, prefix, random_ranking, rank, raw_features, Budget, Ranking};
use mocurate::synth::{self, BenchmarkConfig};
use serde::Serialize;
use std::collections::BTreeMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

fn rt(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

fn resolve(common: &Common) -> Result<PipelineConfig, CliError> {
    let mut cfg = PipelineConfig::load(common.config.as_deref(), &common.overrides)?;
    if let Some(d) = &common.dataset {
        cfg.dataset = Some(d.clone());
    }
    if let Some(o) = &common.out {
        cfg.out = Some(o.clone());
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn out_dir(cfg: &PipelineConfig) -> Result<PathBuf, CliError> {
    let out = cfg.out.clone().ok_or_else(|| invalid("no output directory given (--out or config key `out`)"))?;
    fs::create_dir_all(&out).map_err(|e| rt(format!("{}: {e}", out.display())))?;
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(v).map_err(rt)?;
    fs::write(path, text + "\n").map_err(|e| rt(format!("{}: {e}", path.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

/// Raw and normalised dataset.
fn datasets(cfg: &PipelineConfig) -> Result<(MotionDataset, MotionDataset), CliError> {
    let path = cfg.require(&cfg.dataset, "dataset")?;
    let raw = load_dataset(path).map_err(invalid)?;
    let norm = normalize_dataset(&raw, &cfg.normalize_for(&raw)).map_err(invalid)?;
    Ok((raw, norm))
}

fn existing(path: &Option<PathBuf>, name: &str) -> Result<PathBuf, CliError> {
    let p = path.clone().ok_or_else(|| invalid(format!("--{name} is required")))?;
    if !p.exists() {
        return Err(invalid(format!("{name} {} does not exist", p.display())));
    }
    Ok(p)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load(path).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn embed(ckpt: &Checkpoint, ds: &MotionDataset, cfg: &PipelineConfig) -> Result<Embeddings, CliError> {
    let window = if cfg.embed_window == 0 { ckpt.config.augmentation.n_ds } else { cfg.embed_window };
    embed_dataset(&ckpt.encoder(), ds, &ckpt.config.augmentation, window).map_err(rt)
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    config_hash: String,
    seed: u64,
    config: &'a PipelineConfig,
    versions: BTreeMap<&'static str, &'static str>,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

/// Provenance: config hash, seed, crate versions and input file hashes.
fn write_run(out: &Path, command: &str, cfg: &PipelineConfig, inputs: &[&Path], outputs: &[&str]) -> Result<(), CliError> {
    let mut hashes = BTreeMap::new();
    for p in inputs {
        if p.is_file() {
            hashes.insert(p.display().to_string(), file_hash(p).map_err(rt)?);
        }
    }
    let versions = BTreeMap::from([
        ("mocurate-cli", env!("CARGO_PKG_VERSION")),
        ("mocurate", mocurate::VERSION),
        ("mocurate-service", mocurate_service::VERSION),
    ]);
    write_json(
        &out.join("run.json"),
        &RunRecord {
            command,
            config_hash: config_hash(cfg),
            seed: cfg.seed,
            config: cfg,
            versions,
            inputs: hashes,
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
        },
    )
}

// --- synth ------------------------------------------------------------------

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub sequences: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Two-class clockwise/counter-clockwise arm circles instead of the
    /// eight-class benchmark.
    #[arg(long)]
    pub arm_circles: bool,
    /// Frames per sequence for `--arm-circles`.
    #[arg(long, default_value_t = 240)]
    pub frames: usize,
}

pub fn synth(a: SynthArgs) -> Result<(), CliError> {
    let bench = if a.arm_circles {
        synth::arm_circles(a.sequences, a.frames, 120.0, a.seed)
    } else {
        synth::generate(&BenchmarkConfig {
            sequences: a.sequences,
            seed: a.seed,
            ..BenchmarkConfig::default()
        })
    };
    save_dataset(&bench.dataset, &a.out).map_err(rt)?;
    save_labels_dir(bench.labels.values(), a.out.join("labels")).map_err(rt)?;
    write_json(&a.out.join("classes.json"), &bench.classes)?;
    let bc = benchmark_config();
    let cfg = PipelineConfig {
        dataset: Some(a.out.clone()),
        labels: Some(a.out.join("labels")),
        classes: Some(a.out.join("classes.json")),
        normalize: Some(bc.normalize),
        pretrain: bc.pretrain,
        ..PipelineConfig::default()
    };
    write_json(&a.out.join("pipeline.json"), &cfg)?;
    println!("wrote {} sequences to {}", bench.dataset.len(), a.out.display());
    Ok(())
}

// --- pretrain ---------------------------------------------------------------

#[derive(Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: Common,
}

pub fn pretrain(a: PretrainArgs) -> Result<(), CliError> {
    let cfg = resolve(&a.common)?;
    let (_, ds) = datasets(&cfg)?;
    let out = out_dir(&cfg)?;
    let mut pcfg = cfg.pretrain.clone();
    pcfg.schedule.seed = cfg.seed;
    pcfg.augmentation.seed = cfg.seed;
    let steps = pcfg.schedule.epochs * ds.len();
    let result = pretrain_with(&ds, &pcfg, |r| {
        if (r.step + 1) % ds.len() == 0 {
            log::info!("epoch {} step {}/{steps} loss {:.4}", r.epoch + 1, r.step + 1, r.total);
        }
    });
    let output = match result {
        Ok(o) => o,
        Err(e @ PretrainError::Divergence { .. }) => return Err(CliError::Divergence(e.to_string())),
        Err(e) => return Err(invalid(e)),
    };
    let ckpt_path = out.join("checkpoint.mockpt");
    Checkpoint::from_output(&pcfg, &output).save(&ckpt_path).map_err(rt)?;
    let csv = fs::File::create(out.join("loss.csv")).map_err(rt)?;
    write_loss_csv(&output.curve, std::io::BufWriter::new(csv)).map_err(rt)?;
    write_run(&out, "pretrain", &cfg, &[], &["checkpoint.mockpt", "loss.csv"])?;
    println!("checkpoint {} sha256 {}", ckpt_path.display(), file_hash(&ckpt_path).map_err(rt)?);
    Ok(())
}

// --- rank -------------------------------------------------------------------

#[derive(Args)]
pub struct RankArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Farthest-point ordering instead of the discriminator ranking.
    #[arg(long)]
    pub oracle_fps: bool,
    /// Rank on length-resampled raw coordinates instead of learned features.
    #[arg(long)]
    pub raw_features: bool,
}

pub fn ranking_for(a: &RankArgs, cfg: &PipelineConfig, ds: &MotionDataset) -> Result<Ranking, CliError> {
    let table = if a.raw_features {
        raw_features(ds, RAW_FRAMES).map_err(rt)?
    } else {
        let ckpt = load_checkpoint(&existing(&a.checkpoint, "checkpoint")?)?;
        embed(&ckpt, ds, cfg)?.sequence_table().map_err(rt)?
    };
    if a.oracle_fps {
        let start = random_ranking(table.ids(), cfg.seed).order[0].clone();
        let mut r = fps_oracle(&table, &start).map_err(rt)?;
        r.seed = cfg.seed;
        Ok(r)
    } else {
        rank(&table, &cfg.discriminator, cfg.seed).map_err(rt)
    }
}

pub fn rank_command(a: RankArgs) -> Result<(), CliError> {
    let cfg = resolve(&a.common)?;
    let (_, ds) = datasets(&cfg)?;
    let out = out_dir(&cfg)?;
    let ranking = ranking_for(&a, &cfg, &ds)?;
    write_json(&out.join("ranking.json"), &ranking)?;
    let inputs: Vec<&Path> = a.checkpoint.iter().map(PathBuf::as_path).collect();
    write_run(&out, "rank", &cfg, &inputs, &["ranking.json"])?;
    println!("ranked {} sequences", ranking.len());
    Ok(())
}

// --- annotate ---------------------------------------------------------------

#[derive(Args)]
pub struct AnnotateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub ranking: Option<PathBuf>,
    /// Human labels; must cover the ranked prefix. Defaults to the config's `labels`.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Fraction in (0, 1] or a sequence count; defaults to the config's `budget`.
    #[arg(long)]
    pub budget: Option<String>,
    /// Ground truth for the predicted sequences; emits `eval.json`.
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

fn parse_budget(s: &str) -> Result<Budget, CliError> {
    if let Ok(k) = s.parse::<usize>() {
        return Ok(Budget::Count(k));
    }
    let f = match s.strip_suffix('%') {
        Some(p) => p.parse::<f64>().map(|v| v / 100.0),
        None => s.parse::<f64>(),
    };
    f.map(Budget::Fraction).map_err(|_| invalid(format!("budget {s:?} is not a count, fraction or percentage")))
}

pub fn annotate(a: AnnotateArgs) -> Result<(), CliError> {
    let cfg = resolve(&a.common)?;
    let (_, ds) = datasets(&cfg)?;
    let out = out_dir(&cfg)?;
    let ranking_path = existing(&a.ranking, "ranking")?;
    let ranking: Ranking = read_json(&ranking_path)?;
    if !ranking.is_permutation_of(&ds.ids()) {
        return Err(invalid("ranking does not order the dataset's ids"));
    }
    let budget = match &a.budget {
        Some(b) => parse_budget(b)?,
        None => cfg.budget,
    };
    let head = prefix(&ranking, budget).map_err(invalid)?;
    let labels_dir = match &a.labels {
        Some(p) => existing(&Some(p.clone()), "labels")?,
        None => cfg.require(&cfg.labels, "labels")?.to_owned(),
    };
    let mut all = load_labels_dir(&labels_dir).map_err(invalid)?;
    let missing: Vec<&String> = head.iter().filter(|id| !all.contains_key(*id)).collect();
    if !missing.is_empty() {
        let list: Vec<&str> = missing.iter().map(|s| s.as_str()).collect();
        return Err(invalid(format!(
            "budget needs labels for {} of the first {} ranked sequences; missing: {}",
            missing.len(),
            head.len(),
            list.join(", ")
        )));
    }
    let train: BTreeMap<String, LabelMatrix> = head.iter().map(|id| (id.clone(), all.remove(id).expect("checked"))).collect();
    let ckpt_path = existing(&a.checkpoint, "checkpoint")?;
    let ckpt = load_checkpoint(&ckpt_path)?;
    let emb = embed(&ckpt, &ds, &cfg)?;
    let ann = train_annotator(&emb.frames, &train, &cfg.annotator).map_err(invalid)?;
    let mut predictions = BTreeMap::new();
    for (id, f) in &emb.frames {
        if !train.contains_key(id) {
            predictions.insert(id.clone(), ann.predict(id, f, cfg.annotator.threshold).map_err(rt)?);
        }
    }
    save_labels_dir(predictions.values(), out.join("predictions")).map_err(rt)?;
    let mut outputs = vec!["predictions/"];
    if let Some(t) = &a.truth {
        let truth_all = load_labels_dir(existing(&Some(t.clone()), "truth")?).map_err(invalid)?;
        let truth: BTreeMap<String, LabelMatrix> = predictions
            .keys()
            .map(|id| {
                truth_all
                    .get(id)
                    .cloned()
                    .map(|l| (id.clone(), l))
                    .ok_or_else(|| invalid(format!("no ground truth for {id}")))
            })
            .collect::<Result<_, _>>()?;
        let report = evaluate(&predictions, &truth).map_err(invalid)?;
        write_json(&out.join("eval.json"), &report)?;
        println!("micro-F1 {:.4} macro-F1 {:.4}", report.micro_f1, report.macro_f1);
        outputs.push("eval.json");
    }
    write_run(&out, "annotate", &cfg, &[&ckpt_path, &ranking_path], &outputs)?;
    println!(
        "trained on {} sequences ({} frames) in {:.2}s, predicted {}",
        train.len(),
        ann.train_frames,
        ann.train_seconds,
        predictions.len()
    );
    Ok(())
}

// --- robustness ----------------------------------------------------------------

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SelectionArg {
    Ranked,
    RankedRaw,
    Farthest,
    Random,
}

impl From<SelectionArg> for Selection {
    fn from(s: SelectionArg) -> Self {
        match s {
            SelectionArg::Ranked => Selection::Ranked,
            SelectionArg::RankedRaw => Selection::RankedRaw,
            SelectionArg::Farthest => Selection::Farthest,
            SelectionArg::Random => Selection::Random,
        }
    }
}

#[derive(Args)]
pub struct RobustnessArgs {
    #[command(flatten)]
    pub common: Common,
    /// Reuse a checkpoint instead of pretraining.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Comma-separated budgets, e.g. `1%,5%,10%,20%`.
    #[arg(long, value_delimiter = ',')]
    pub budgets: Vec<String>,
    /// Seeds 0..n; defaults to the config's `seeds`.
    #[arg(long)]
    pub n_seeds: Option<u64>,
    #[arg(long, value_enum, default_value = "ranked")]
    pub selection: SelectionArg,
}

fn checkpoint_or_pretrain(path: &Option<PathBuf>, cfg: &PipelineConfig, ds: &MotionDataset) -> Result<Checkpoint, CliError> {
    match path {
        Some(p) => load_checkpoint(&existing(&Some(p.clone()), "checkpoint")?),
        None => {
            let mut pcfg = cfg.pretrain.clone();
            pcfg.schedule.seed = cfg.seed;
            pcfg.augmentation.seed = cfg.seed;
            let out = pretrain_with(ds, &pcfg, |_| {}).map_err(|e| match e {
                PretrainError::Divergence { .. } => CliError::Divergence(e.to_string()),
                e => invalid(e),
            })?;
            Ok(Checkpoint::from_output(&pcfg, &out))
        }
    }
}

pub fn robustness(a: RobustnessArgs) -> Result<(), CliError> {
    let cfg = resolve(&a.common)?;
    let (_, ds) = datasets(&cfg)?;
    let out = out_dir(&cfg)?;
    let truth = load_labels_dir(cfg.require(&cfg.labels, "labels")?).map_err(invalid)?;
    let budgets = if a.budgets.is_empty() {
        cfg.budgets.clone()
    } else {
        a.budgets.iter().map(|b| parse_budget(b)).collect::<Result<_, _>>()?
    };
    let seeds: Vec<u64> = match a.n_seeds {
        Some(n) => (0..n).collect(),
        None => cfg.seeds.clone(),
    };
    let ckpt = checkpoint_or_pretrain(&a.checkpoint, &cfg, &ds)?;
    let emb = embed(&ckpt, &ds, &cfg)?;
    let inputs = SweepInputs {
        embeddings: &emb,
        truth: &truth,
        dataset: Some(&ds),
        discriminator: &cfg.discriminator,
        annotator: &cfg.annotator,
    };
    let rows = budget_sweep(&inputs, a.selection.into(), &budgets, &seeds).map_err(invalid)?;
    let summary = summarize(&rows);
    fs::write(out.join("robustness.csv"), summary_csv(&summary)).map_err(rt)?;
    let mut runs = String::from("budget,labelled,seed,micro_f1,macro_f1\n");
    for r in &rows {
        runs.push_str(&format!("{},{},{},{},{}\n", r.budget, r.labelled, r.seed, r.micro_f1, r.macro_f1));
    }
    fs::write(out.join("robustness_runs.csv"), runs).map_err(rt)?;
    let inputs: Vec<&Path> = a.checkpoint.iter().map(PathBuf::as_path).collect();
    write_run(&out, "robustness", &cfg, &inputs, &["robustness.csv", "robustness_runs.csv"])?;
    for s in &summary {
        println!("budget {:.4}: micro-F1 {:.4} ± {:.4} over {} seeds", s.budget, s.mean_micro_f1, s.std_micro_f1, s.runs);
    }
    Ok(())
}

// --- ablation -----------------------------------------------------------------

#[derive(Args)]
pub struct AblationArgs {
    #[command(flatten)]
    pub common: Common,
    /// Seeds 0..n; defaults to the config's `seeds`.
    #[arg(long)]
    pub n_seeds: Option<u64>,
}

pub fn ablation(a: AblationArgs) -> Result<(), CliError> {
    let cfg = resolve(&a.common)?;
    let (_, ds) = datasets(&cfg)?;
    let out = out_dir(&cfg)?;
    let truth = load_labels_dir(cfg.require(&cfg.labels, "labels")?).map_err(invalid)?;
    let classes: BTreeMap<String, usize> = read_json(cfg.require(&cfg.classes, "classes")?)?;
    let seeds: Vec<u64> = match a.n_seeds {
        Some(n) => (0..n).collect(),
        None => cfg.seeds.clone(),
    };
    let rows = run_ablation(&ds, &truth, &classes, &cfg.experiment(&ds), &seeds, cfg.budget).map_err(|e| match e {
        mocurate::experiments::ExperimentError::Pretrain(p @ PretrainError::Divergence { .. }) => CliError::Divergence(p.to_string()),
        e => invalid(e),
    })?;
    let mut runs = String::from("name,seed,micro_f1,macro_f1,probe_accuracy\n");
    for r in &rows {
        runs.push_str(&format!("{},{},{},{},{}\n", r.name, r.seed, r.micro_f1, r.macro_f1, r.probe_accuracy));
    }
    fs::write(out.join("ablation_runs.csv"), runs).map_err(rt)?;
    let mut table = String::from("name,seeds,mean_micro_f1,mean_macro_f1,mean_probe_accuracy\n");
    for r in ablation_table(&rows) {
        table.push_str(&format!("{},{},{},{},{}\n", r.name, r.seed, r.micro_f1, r.macro_f1, r.probe_accuracy));
        println!("{:<20} micro {:.4} macro {:.4} probe {:.4}", r.name, r.micro_f1, r.macro_f1, r.probe_accuracy);
    }
    fs::write(out.join("ablation.csv"), table).map_err(rt)?;
    write_run(&out, "ablation", &cfg, &[], &["ablation.csv", "ablation_runs.csv"])
}

// --- serve ----------------------------------------------------------------------

#[derive(Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, env = "MOCURATE_CHECKPOINT")]
    pub checkpoint: Option<PathBuf>,
    /// Ranking JSON; ranked from the checkpoint when absent.
    #[arg(long, env = "MOCURATE_RANKING")]
    pub ranking: Option<PathBuf>,
    /// Service config (class list, annotator) re-read by `POST /reload`.
    #[arg(long, env = "MOCURATE_SERVICE_CONFIG")]
    pub service_config: Option<PathBuf>,
    /// Directory where submitted labels are kept across restarts.
    #[arg(long, env = "MOCURATE_SESSION_DIR")]
    pub session_dir: Option<PathBuf>,
    #[arg(long, env = "MOCURATE_HOST", default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, env = "MOCURATE_PORT", default_value_t = 8080)]
    pub port: u16,
}

pub fn serve(a: ServeArgs) -> Result<(), CliError> {
    let cfg = resolve(&a.common)?;
    let (raw, ds) = datasets(&cfg)?;
    let ckpt = load_checkpoint(&existing(&a.checkpoint, "checkpoint")?)?;
    let emb = embed(&ckpt, &ds, &cfg)?;
    let ranking = match &a.ranking {
        Some(p) => read_json(&existing(&Some(p.clone()), "ranking")?)?,
        None => rank(&emb.sequence_table().map_err(rt)?, &cfg.discriminator, cfg.seed).map_err(rt)?,
    };
    let service_cfg = match &a.service_config {
        Some(p) => mocurate_service::ServiceConfig::load(p).map_err(invalid)?,
        None => mocurate_service::ServiceConfig {
            class_names: None,
            annotator: cfg.annotator.clone(),
        },
    };
    let mut session = mocurate_service::Session::new(raw, emb.frames, ranking, service_cfg).map_err(invalid)?;
    if let Some(p) = &a.service_config {
        session = session.with_config_path(p);
    }
    if let Some(d) = &a.session_dir {
        session = session.with_session_dir(d).map_err(invalid)?;
    }
    let addr: SocketAddr = format!("{}:{}", a.host, a.port).parse().map_err(|e| invalid(format!("address: {e}")))?;
    let runtime = tokio::runtime::Runtime::new().map_err(rt)?;
    runtime.block_on(mocurate_service::serve(session, addr)).map_err(rt)
}
