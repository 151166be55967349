//! The `mca` command line: `gen`, `build-space`, `train`, `eval`, `audit`
//! and `bench`.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
//! Training flags mirror [`TrainConfig`] fields in kebab-case and are applied
//! over `--config` file values, which are applied over the defaults.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::diagnostics::{audit_run, bound_constants, BoundInputs};
use crate::embedding_io::{
    load_embeddings, read_sidecar, save_embeddings, write_sidecar, DatasetBundle, EmbeddingMatrix, SidecarMeta,
    VocabularyBundle,
};
use crate::error::{McaError, Result};
use crate::losses_grad::EntropySign;
use crate::metrics::MetricReport;
use crate::model_core::{load_params, save_params, ModelParams};
use crate::pseudo_label_bench::{bench_csv, mean_final, run_bench, BenchConfig};
use crate::semantic_space::{build_semantic_space, SemanticSpace};
use crate::synthetic_gen::{generate, SynthConfig};
use crate::taxonomy::format_taxonomy;
use crate::trainer::{
    evaluate, holdout_split, init_seed, loss_log_csv, predict, run_epochs, TrainConfig, TrainContext,
    TrainSnapshot, TrainState,
};

#[derive(Parser, Debug)]
#[command(name = "mca", version, about = "Image clustering by multi-level cross-modal alignment")]
struct Cli {
    /// Worker threads; results are identical for any value.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Log more (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic paired dataset with known clusters.
    Gen(GenArgs),
    /// Filter a vocabulary into a semantic space.
    BuildSpace(SpaceArgs),
    /// Train the cluster heads and write a run directory.
    Train(TrainArgs),
    /// Score a checkpoint against labelled images.
    Eval(EvalArgs),
    /// Measure the bound assumptions and constants of a finished run.
    Audit(AuditArgs),
    /// Compare SMP, PMCP and MCA pseudo-labels over several seeds.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    c: Option<usize>,
    #[arg(long)]
    n_img: Option<usize>,
    #[arg(long)]
    words_per_cluster: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    misalignment_rate: Option<f64>,
    #[arg(long)]
    lineage_weight: Option<f64>,
    #[arg(long)]
    taxonomy_depth: Option<u32>,
    #[arg(long)]
    leaf_min_depth: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(short, long)]
    out: PathBuf,
}

/// Embedding inputs. A prebuilt `--space` replaces `--words` plus `--taxonomy`.
#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Inputs {
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    words: Option<PathBuf>,
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    #[arg(long)]
    space: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
struct TrainFlags {
    /// `key=value` lines applied before the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    c: Option<usize>,
    #[arg(long)]
    k_i: Option<usize>,
    #[arg(long)]
    k_s: Option<usize>,
    #[arg(long)]
    k_p: Option<usize>,
    #[arg(long)]
    tau_ia: Option<f64>,
    #[arg(long)]
    tau_pa: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    lambda_a: Option<f64>,
    #[arg(long)]
    lambda_pa: Option<f64>,
    #[arg(long)]
    lambda_sa: Option<f64>,
    #[arg(long)]
    gamma_r: Option<usize>,
    #[arg(long)]
    gamma_h: Option<u32>,
    #[arg(long)]
    rho_u: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// `adam` or `sgd`.
    #[arg(long)]
    optimizer: Option<String>,
    /// `batch` or `full`.
    #[arg(long)]
    prototype_scope: Option<String>,
    /// Use the balance term with its printed sign, which rewards collapse.
    #[arg(long)]
    paper_literal_entropy: bool,
    #[arg(long)]
    no_bias: bool,
}

impl TrainFlags {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| McaError::io(path, e))?;
            cfg.apply_kv_text(&text)?;
        }
        let numeric: [(&str, Option<String>); 17] = [
            ("lr", self.lr.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("c", self.c.map(|v| v.to_string())),
            ("k_i", self.k_i.map(|v| v.to_string())),
            ("k_s", self.k_s.map(|v| v.to_string())),
            ("k_p", self.k_p.map(|v| v.to_string())),
            ("tau_ia", self.tau_ia.map(|v| v.to_string())),
            ("tau_pa", self.tau_pa.map(|v| v.to_string())),
            ("eta", self.eta.map(|v| v.to_string())),
            ("lambda_a", self.lambda_a.map(|v| v.to_string())),
            ("lambda_pa", self.lambda_pa.map(|v| v.to_string())),
            ("lambda_sa", self.lambda_sa.map(|v| v.to_string())),
            ("gamma_r", self.gamma_r.map(|v| v.to_string())),
            ("gamma_h", self.gamma_h.map(|v| v.to_string())),
            ("rho_u", self.rho_u.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
        ];
        for (key, value) in numeric {
            if let Some(v) = value {
                cfg.apply_kv(key, &v)?;
            }
        }
        if let Some(v) = &self.optimizer {
            cfg.apply_kv("optimizer", v)?;
        }
        if let Some(v) = &self.prototype_scope {
            cfg.apply_kv("prototype_scope", v)?;
        }
        if self.paper_literal_entropy {
            cfg.entropy_sign = EntropySign::Literal;
        }
        if self.no_bias {
            cfg.use_bias = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct SpaceArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    train: TrainFlags,
    /// Fraction of images held out for evaluation.
    #[arg(long, default_value_t = 0.0)]
    holdout: f64,
    /// Write `checkpoints/epoch_NNN.mcap` every this many epochs.
    #[arg(long, default_value_t = 1)]
    checkpoint_every: usize,
    #[arg(long)]
    run_dir: PathBuf,
    /// Continue from `state.json` in the run directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    images: PathBuf,
    /// Metrics CSV.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// `id,cluster` CSV of predictions.
    #[arg(long)]
    assignments: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AuditArgs {
    #[arg(long)]
    run_dir: PathBuf,
    /// Defaults to `final.mcap` in the run directory.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    #[arg(long, default_value_t = 1.0)]
    l_is: f64,
    #[arg(long, default_value_t = 1.0)]
    l_i: f64,
    /// Defaults to the largest raw image norm.
    #[arg(long)]
    m_u: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    c_const: f64,
    /// Defaults to `audit.csv` in the run directory.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(short, long)]
    out: PathBuf,
}

/// Everything needed to replay a run; written as `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub inputs: serde_json::Value,
    pub holdout: f64,
    pub checkpoint_every: usize,
    pub config: TrainConfig,
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code. Errors are reported on standard error.
pub fn dispatch<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    let outcome = match cli.workers {
        Some(0) => Err(McaError::InvalidArgument("--workers must be >= 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| McaError::InvalidArgument(format!("thread pool: {e}")))
            .and_then(|pool| pool.install(|| run(cli.command))),
        None => run(cli.command),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Gen(a) => cmd_gen(a),
        Command::BuildSpace(a) => cmd_build_space(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Audit(a) => cmd_audit(a),
        Command::Bench(a) => cmd_bench(a),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| McaError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| McaError::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| McaError::io(path, e))
}

fn to_json<S: Serialize>(value: &S) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable value");
    s.push('\n');
    s
}

/// Images plus sidecar; the cluster count falls back to `c` when the
/// sidecar does not give one.
fn load_dataset(path: &Path, c: usize) -> Result<DatasetBundle<f64>> {
    let images = load_embeddings::<f64>(path)?;
    let meta = read_sidecar(path)?.unwrap_or_default();
    let c = meta
        .c
        .or_else(|| meta.labels.as_ref().and_then(|l| l.iter().max().map(|m| m + 1)))
        .unwrap_or(c);
    DatasetBundle::new(images, meta.labels, c)
}

fn load_space(inputs: &Inputs, dataset: &DatasetBundle<f64>, cfg: &TrainConfig) -> Result<SemanticSpace<f64>> {
    if let Some(path) = &inputs.space {
        return Ok(SemanticSpace::from_embeddings(load_embeddings(path)?));
    }
    let (Some(words), Some(taxonomy)) = (&inputs.words, &inputs.taxonomy) else {
        return Err(McaError::InvalidArgument(
            "pass --space, or both --words and --taxonomy".into(),
        ));
    };
    let vocab = VocabularyBundle::<f64>::load(words, taxonomy)?;
    let space = build_semantic_space(dataset, &vocab, &cfg.space_config())?;
    if space.is_empty() {
        return Err(McaError::Empty("semantic space kept no words".into()));
    }
    Ok(space)
}

fn save_space(space: &SemanticSpace<f64>, path: &Path) -> Result<()> {
    save_embeddings(&space.kept_embeddings, path)?;
    write_sidecar(
        path,
        &SidecarMeta {
            ids: Some(space.kept_words.clone()),
            ..SidecarMeta::default()
        },
    )
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let mut cfg = SynthConfig::default();
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { cfg.$f = v; })* };
    }
    set!(c, n_img, words_per_cluster, d, separation, noise, misalignment_rate, lineage_weight, taxonomy_depth, leaf_min_depth, seed);
    let data = generate::<f64>(&cfg)?;
    let out = &a.out;
    data.dataset.save(out.join("images.mcae"))?;
    let words = out.join("words.mcae");
    save_embeddings(&data.vocabulary.embeddings, &words)?;
    write_sidecar(
        &words,
        &SidecarMeta {
            ids: Some(data.vocabulary.words.clone()),
            ..SidecarMeta::default()
        },
    )?;
    write_text(&out.join("taxonomy.tsv"), &format_taxonomy(&data.vocabulary.taxonomy))?;
    write_text(&out.join("truth.json"), &to_json(&data.truth))?;
    write_text(
        &out.join("manifest.json"),
        &to_json(&serde_json::json!({
            "command": "gen",
            "version": env!("CARGO_PKG_VERSION"),
            "config": cfg,
        })),
    )?;
    println!(
        "wrote {} images, {} words to {}",
        data.dataset.images.n(),
        data.vocabulary.m(),
        out.display()
    );
    Ok(())
}

fn cmd_build_space(a: SpaceArgs) -> Result<()> {
    let cfg = a.train.resolve()?;
    let dataset = load_dataset(&a.inputs.images, cfg.c)?;
    let space = load_space(&a.inputs, &dataset, &cfg)?;
    save_space(&space, &a.out.join("space.mcae"))?;
    write_text(&a.out.join("provenance.csv"), &space.provenance_csv())?;
    let report = space.report().to_string();
    write_text(&a.out.join("report.txt"), &report)?;
    let manifest = RunManifest {
        command: "build-space".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        inputs: serde_json::to_value(&a.inputs).expect("inputs serialize"),
        holdout: 0.0,
        checkpoint_every: 0,
        config: cfg,
    };
    write_text(&a.out.join("manifest.json"), &to_json(&manifest))?;
    print!("{report}");
    Ok(())
}

const METRICS_HEADER: &str = "split,epoch,acc,nmi,ari\n";

fn metrics_row(split: &str, epoch: usize, r: &MetricReport) -> String {
    format!("{split},{epoch},{},{},{}\n", r.acc, r.nmi, r.ari)
}

/// Keeps the header and the rows at or before `epoch`.
fn truncate_metrics(text: &str, epoch: usize) -> String {
    let mut out = String::from(METRICS_HEADER);
    for line in text.lines().skip(1) {
        let e = line.split(',').nth(1).and_then(|s| s.parse::<usize>().ok());
        if line.starts_with("train,") && e.is_some_and(|e| e <= epoch) {
            out.push_str(line);
            out.push('\n');
        }
    }
    out
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = a.train.resolve()?;
    if !(0.0..1.0).contains(&a.holdout) {
        return Err(McaError::InvalidArgument("--holdout must be in [0, 1)".into()));
    }
    if a.checkpoint_every == 0 {
        return Err(McaError::InvalidArgument("--checkpoint-every must be >= 1".into()));
    }
    let dir = &a.run_dir;
    let manifest = RunManifest {
        command: "train".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        inputs: serde_json::to_value(&a.inputs).expect("inputs serialize"),
        holdout: a.holdout,
        checkpoint_every: a.checkpoint_every,
        config: cfg.clone(),
    };
    let state_path = dir.join("state.json");
    let metrics_path = dir.join("metrics.csv");
    let resumed: Option<TrainSnapshot> = if a.resume {
        let old: RunManifest = serde_json::from_str(&read_text(&dir.join("manifest.json"))?)
            .map_err(|e| McaError::Metadata(format!("manifest.json: {e}")))?;
        let same = RunManifest {
            config: TrainConfig { epochs: cfg.epochs, ..old.config.clone() },
            ..old
        };
        if same != manifest {
            return Err(McaError::InvalidArgument(
                "resume flags differ from the run's manifest (only --epochs may change)".into(),
            ));
        }
        let snap = serde_json::from_str(&read_text(&state_path)?)
            .map_err(|e| McaError::Metadata(format!("state.json: {e}")))?;
        Some(snap)
    } else {
        None
    };

    let full = load_dataset(&a.inputs.images, cfg.c)?;
    let (train_rows, test_rows) = holdout_split(full.images.n(), a.holdout, cfg.seed);
    let train_ds = full.select(&train_rows);
    let space = load_space(&a.inputs, &train_ds, &cfg)?;
    let ctx = TrainContext::new(&train_ds.images, &space, &cfg)?;

    let mut state = match &resumed {
        Some(snap) => TrainState::from_snapshot(snap, &cfg)?,
        None => TrainState::new(ModelParams::init(cfg.c, ctx.images.d(), init_seed(cfg.seed)), &cfg),
    };
    if state.params.c() != cfg.c || state.params.d() != ctx.images.d() {
        return Err(McaError::Shape("state.json does not match the data".into()));
    }
    write_text(&dir.join("manifest.json"), &to_json(&manifest))?;
    save_space(&space, &dir.join("space.mcae"))?;
    write_text(&dir.join("provenance.csv"), &space.provenance_csv())?;
    let mut metrics = if resumed.is_some() {
        truncate_metrics(&read_text(&metrics_path).unwrap_or_default(), state.epoch)
    } else {
        METRICS_HEADER.to_string()
    };
    write_text(&metrics_path, &metrics)?;
    log::info!(
        "training on {} images, {} words, from epoch {}",
        ctx.n(),
        space.len(),
        state.epoch
    );

    let labels = train_ds.labels.clone();
    let outcome = run_epochs(&ctx, &cfg, &mut state, |ctx, st| {
        if let Some(truth) = &labels {
            let pred = ctx.assignments(&st.params)?.hard_labels();
            metrics.push_str(&metrics_row("train", st.epoch, &MetricReport::compute(&pred, truth)?));
            write_text(&metrics_path, &metrics)?;
        }
        if st.epoch % a.checkpoint_every == 0 {
            save_params(&st.params, dir.join("checkpoints").join(format!("epoch_{:03}.mcap", st.epoch)))?;
        }
        write_text(&state_path, &to_json(&st.snapshot()))?;
        write_text(&dir.join("train_log.csv"), &loss_log_csv(&st.history))?;
        if let Some(l) = st.history.last() {
            log::info!("epoch {} step {} loss {}", st.epoch, st.step, l.l_total);
        }
        Ok(())
    });
    if let Err(e) = outcome {
        if e.is_numeric() {
            save_params(&state.params, dir.join("last_good.mcap"))?;
            write_text(&state_path, &to_json(&state.snapshot()))?;
            write_text(&dir.join("train_log.csv"), &loss_log_csv(&state.history))?;
            log::error!("stopped at step {}; last good parameters in last_good.mcap", state.step);
        }
        return Err(e);
    }

    save_params(&state.params, dir.join("final.mcap"))?;
    let pred = ctx.assignments(&state.params)?.hard_labels();
    let mut csv = String::from("id,cluster\n");
    for (id, k) in ctx.images.ids().iter().zip(&pred) {
        writeln!(csv, "{id},{k}").expect("string write");
    }
    write_text(&dir.join("assignments.csv"), &csv)?;
    let final_loss = state.history.last().map_or(f64::NAN, |l| l.l_total);
    println!("trained {} epochs ({} steps), final loss {final_loss}", state.epoch, state.step);
    if let Some(truth) = &labels {
        let r = MetricReport::compute(&pred, truth)?;
        println!("train: {r}");
    }
    if !test_rows.is_empty() && full.labels.is_some() {
        let r = evaluate(&state.params, &full.select(&test_rows))?;
        metrics.push_str(&metrics_row("test", state.epoch, &r));
        write_text(&metrics_path, &metrics)?;
        println!("test: {r}");
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let params = load_params::<f64>(&a.params)?;
    let dataset = load_dataset(&a.images, params.c())?;
    if dataset.images.d() != params.d() {
        return Err(McaError::Shape(format!(
            "checkpoint has d = {} but images have d = {}",
            params.d(),
            dataset.images.d()
        )));
    }
    if let Some(path) = &a.assignments {
        let pred = predict(&params, &dataset.images)?;
        let mut csv = String::from("id,cluster\n");
        for (id, k) in dataset.images.ids().iter().zip(&pred) {
            writeln!(csv, "{id},{k}").expect("string write");
        }
        write_text(path, &csv)?;
    }
    let report = evaluate(&params, &dataset)?;
    println!("{report}");
    if let Some(path) = &a.out {
        write_text(path, &report.to_csv())?;
    }
    Ok(())
}

fn cmd_audit(a: AuditArgs) -> Result<()> {
    let dir = &a.run_dir;
    let manifest: RunManifest = serde_json::from_str(&read_text(&dir.join("manifest.json"))?)
        .map_err(|e| McaError::Metadata(format!("manifest.json: {e}")))?;
    let inputs: Inputs = serde_json::from_value(manifest.inputs.clone())
        .map_err(|e| McaError::Metadata(format!("manifest inputs: {e}")))?;
    let cfg = manifest.config;
    let params = load_params::<f64>(a.params.clone().unwrap_or_else(|| dir.join("final.mcap")))?;
    let full = load_dataset(&inputs.images, cfg.c)?;
    let (train_rows, _) = holdout_split(full.images.n(), manifest.holdout, cfg.seed);
    let train_ds = full.select(&train_rows);
    let space = load_space(&inputs, &train_ds, &cfg)?;
    let ctx = TrainContext::new(&train_ds.images, &space, &cfg)?;
    if params.c() != cfg.c || params.d() != ctx.images.d() {
        return Err(McaError::Shape("checkpoint does not match the run".into()));
    }
    let audit = audit_run(&ctx, &params)?;
    let m_u = a.m_u.unwrap_or_else(|| max_row_norm(&train_ds.images));
    let inputs = BoundInputs {
        n: ctx.n(),
        m: ctx.words.n(),
        d: ctx.images.d(),
        c: cfg.c,
        tau_ia: cfg.tau_ia,
        tau_pa: cfg.tau_pa,
        eta: cfg.eta,
        lambda_a: cfg.lambda_a,
        lambda_pa: cfg.lambda_pa,
        lambda_sa: cfg.lambda_sa,
        l_is: a.l_is,
        l_i: a.l_i,
        m_u,
        c_const: a.c_const,
        delta: a.delta,
    };
    let report = bound_constants(&audit, &inputs).inspect_err(|_| {
        println!(
            "mu_I {}\nmu_C {}\nmu_p {}\nk_I' {}",
            audit.mu_i, audit.mu_c, audit.mu_p, audit.k_i_prime
        )
    })?;
    println!("{report}");
    write_text(&a.out.unwrap_or_else(|| dir.join("audit.csv")), &report.to_csv())
}

fn max_row_norm(m: &EmbeddingMatrix<f64>) -> f64 {
    m.data()
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt())
        .fold(0.0, f64::max)
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let cfg = a.train.resolve()?;
    let dataset = load_dataset(&a.inputs.images, cfg.c)?;
    let space = load_space(&a.inputs, &dataset, &cfg)?;
    let bench = BenchConfig {
        train: cfg.clone(),
        repeats: a.repeats,
    };
    let runs = run_bench(&dataset, &space, &bench)?;
    write_text(&a.out.join("bench.csv"), &bench_csv(&runs))?;
    let manifest = serde_json::json!({
        "command": "bench",
        "version": env!("CARGO_PKG_VERSION"),
        "inputs": a.inputs,
        "repeats": a.repeats,
        "config": cfg,
    });
    write_text(&a.out.join("manifest.json"), &to_json(&manifest))?;
    println!("method,mean_final_acc");
    for (method, acc) in mean_final(&runs) {
        println!("{method},{acc}");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.txt");
        fs::write(&path, "lr = 0.5\nepochs=3\n# comment\nlambda-sa=2\n").unwrap();
        let flags = TrainFlags {
            config: Some(path),
            epochs: Some(7),
            no_bias: true,
            ..TrainFlags::default()
        };
        let cfg = flags.resolve().unwrap();
        assert_eq!(cfg.lr, 0.5);
        assert_eq!(cfg.epochs, 7);
        assert_eq!(cfg.lambda_sa, 2.0);
        assert!(!cfg.use_bias);
    }

    #[test]
    fn float_flags_survive_the_text_roundtrip() {
        let flags = TrainFlags {
            tau_ia: Some(0.1 + 0.2),
            ..TrainFlags::default()
        };
        assert_eq!(flags.resolve().unwrap().tau_ia, 0.1 + 0.2);
    }

    #[test]
    fn bad_optimizer_is_a_usage_error() {
        let flags = TrainFlags {
            optimizer: Some("lbfgs".into()),
            ..TrainFlags::default()
        };
        assert_eq!(flags.resolve().unwrap_err().exit_code(), 1);
    }

    #[test]
    fn metrics_truncation_drops_later_and_test_rows() {
        let text = "split,epoch,acc,nmi,ari\ntrain,1,0.5,0,0\ntrain,2,0.6,0,0\ntest,2,0.7,0,0\n";
        assert_eq!(truncate_metrics(text, 1), "split,epoch,acc,nmi,ari\ntrain,1,0.5,0,0\n");
    }

    #[test]
    fn unknown_flag_and_help_codes() {
        assert_eq!(dispatch(["mca", "train", "--bogus"]), 1);
        assert_eq!(dispatch(["mca", "--help"]), 0);
        assert_eq!(dispatch(["mca"]), 1);
    }
}
