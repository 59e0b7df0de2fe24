use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use gazetune::data::synthetic::{generate_population, SyntheticPopulationConfig};
use gazetune::data::{leave_one_out_split, Corpus, Layout, Split};
use gazetune::metrics::{aggregate, render_csv, render_markdown, MethodRuns, MetricsReport, SessionEval};
use gazetune::microvlm::{MicroVlm, ModelConfig};
use gazetune::personalization::PromptState;
use gazetune::probing::Operator;
use gazetune::tuning::{
    evaluate, initial_state, prepare, pretrain_backbone, run_protocol, train, Ablation, EpochLog, LossConfig,
    PretrainConfig, TrainConfig,
};

/// Relative paths on the command line are resolved against this directory when set.
const OUT_ROOT_ENV: &str = "GAZETUNE_OUT";
const RECORD_VERSION: u32 = 1;
const EPS: f64 = 1e-8;

const RUN_FILE: &str = "run.json";
const BACKBONE_FILE: &str = "backbone.json";
const PROMPTS_FILE: &str = "prompts.json";
const TRACE_FILE: &str = "trace.jsonl";
const SPLIT_FILE: &str = "split.json";
const METRICS_FILE: &str = "metrics.json";

#[derive(Parser)]
#[command(name = "gazetune", version, about = "Gaze-aligned personalised soft prompts for a micro vision-language model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic gaze corpus together with its ground-truth sidecar.
    Synth(SynthArgs),
    /// Train personalised prompts on a corpus with a frozen backbone.
    Train(TrainArgs),
    /// Evaluate a trained run on its held-out sessions and dump slot heatmaps.
    Eval(EvalArgs),
    /// Train and evaluate over a grid of one hyperparameter and several seeds.
    Sweep(SweepArgs),
    /// Aggregate evaluated runs into a mean ± std table with significance stars.
    Report(ReportArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// TOML run configuration; command-line flags override it.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Output directory for the corpus.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    sessions: Option<usize>,
    #[arg(long)]
    prototypes: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Overwrite an existing corpus.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    operator: Option<Operator>,
    /// Switch off one ingredient; repeatable (rand-sp, shared-z, no-omega, no-attn, no-ntp).
    #[arg(long = "ablation", value_name = "NAME")]
    ablations: Vec<Ablation>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    num_prompts: Option<usize>,
    #[arg(long)]
    soft_tokens: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Frozen backbone checkpoint; without it a backbone is pre-trained first.
    #[arg(long, value_name = "FILE")]
    backbone: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Corpus directory.
    #[arg(long)]
    data: PathBuf,
    /// Run directory for checkpoints, trace and metrics.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
    /// Write a prompt checkpoint every K epochs (0: initial and final only).
    #[arg(long, default_value_t = 0, value_name = "K")]
    checkpoint_every: usize,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    /// Probe with a different operator than the one used in training.
    #[arg(long)]
    operator: Option<Operator>,
    /// Also write grayscale PGM heatmaps over the patch grid.
    #[arg(long)]
    pgm: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum SweepParam {
    Lambda,
    NumPrompts,
    SoftTokens,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    data: PathBuf,
    /// Output directory for `sweep.csv` and the resolved configuration.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    param: SweepParam,
    /// Comma-separated grid values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    /// Seeds 0..N per grid value.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[command(flatten)]
    flags: TrainFlags,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Evaluated run directories.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Output directory for `table.md`, `table.csv` and `table.json`.
    #[arg(long)]
    out: PathBuf,
    /// Metrics to tabulate (default: all).
    #[arg(long, value_delimiter = ',')]
    metrics: Vec<String>,
    #[arg(long)]
    force: bool,
}

/// The full configuration of a command, as read from TOML.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
    loss: LossConfig,
    pretrain: PretrainConfig,
    synth: SyntheticPopulationConfig,
}

impl RunConfig {
    fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))
            .invalid()?;
        toml::from_str(&text)
            .with_context(|| format!("parsing {}", path.display()))
            .invalid()
    }

    fn apply(&mut self, f: &TrainFlags) {
        let t = &mut self.train;
        if let Some(v) = f.seed {
            t.seed = v;
        }
        if let Some(v) = f.epochs {
            t.epochs = v;
        }
        if let Some(v) = f.operator {
            t.probe.operator = v;
        }
        if let Some(v) = f.num_prompts {
            t.num_prompts = v;
        }
        if let Some(v) = f.soft_tokens {
            t.soft_tokens = v;
        }
        if let Some(v) = f.learning_rate {
            t.learning_rate = v;
        }
        if let Some(v) = f.lambda {
            self.loss.lambda = v;
        }
        if let Some(v) = f.gamma {
            self.loss.gamma = v;
        }
        for a in &f.ablations {
            a.apply(&mut self.train, &mut self.loss);
        }
    }

    fn validate(&self) -> anyhow::Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.synth.validate().map_err(|e| anyhow!("synth: {e}"))?;
        self.pretrain.population.validate().map_err(|e| anyhow!("pretrain: {e}"))?;
        if self.train.soft_tokens > self.model.max_soft_tokens {
            return Err(anyhow!(
                "soft_tokens {} exceeds the model's max_soft_tokens {}",
                self.train.soft_tokens,
                self.model.max_soft_tokens
            ));
        }
        if self.loss.use_attn_loss && !self.train.probe.differentiable {
            return Err(anyhow!("the alignment loss needs probe.differentiable = true"));
        }
        Ok(())
    }
}

/// `run.json`: what a training run was started with.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunRecord {
    format_version: u32,
    method: String,
    seed: u64,
    ablations: Vec<Ablation>,
    data: PathBuf,
    config: RunConfig,
}

/// `metrics.json`: one evaluated run.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalRecord {
    format_version: u32,
    method: String,
    seed: u64,
    operator: Operator,
    metrics: Vec<String>,
    backbone: MetricsReport,
    tuned: MetricsReport,
    config: RunConfig,
}

#[derive(Debug, Serialize)]
struct SweepRecord<'a> {
    format_version: u32,
    param: SweepParam,
    values: &'a [f64],
    seeds: u64,
    config: &'a RunConfig,
}

enum Failure {
    Invalid(anyhow::Error),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

trait Invalid<T> {
    fn invalid(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Invalid<T> for Result<T, E> {
    fn invalid(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Invalid(e.into()))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Sweep(a) => sweep(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn resolve(path: &Path) -> PathBuf {
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if path.is_relative() => Path::new(&root).join(path),
        _ => path.to_path_buf(),
    }
}

/// Refuses to reuse a non-empty directory unless `force` is set.
fn prepare_out_dir(dir: &Path, force: bool) -> Result<(), Failure> {
    let occupied = fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false);
    if occupied && !force {
        return Err(Failure::Invalid(anyhow!(
            "{} already exists and is not empty (use --force to overwrite)",
            dir.display()
        )));
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn method_name(ablations: &[Ablation]) -> String {
    if ablations.is_empty() {
        "gazetune".into()
    } else {
        let names: Vec<&str> = ablations.iter().map(|a| a.name()).collect();
        format!("gazetune[{}]", names.join(","))
    }
}

fn synth(a: SynthArgs) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(a.config.config.as_deref())?;
    let s = &mut cfg.synth;
    if let Some(v) = a.users {
        s.num_users = v;
    }
    if let Some(v) = a.sessions {
        s.num_sessions = v;
    }
    if let Some(v) = a.prototypes {
        s.num_prototypes = v;
    }
    if let Some(v) = a.noise {
        s.noise = v;
    }
    if let Some(v) = a.seed {
        s.seed = v;
    }
    cfg.synth.validate().map_err(|e| Failure::Invalid(anyhow!(e)))?;
    let out = resolve(&a.out);
    prepare_out_dir(&out, a.force)?;
    let (corpus, truth) = generate_population(&cfg.synth).map_err(|e| anyhow!(e))?;
    corpus.save(&out)?;
    write_json(&out.join("ground_truth.json"), &truth)?;
    eprintln!(
        "wrote {} sessions from {} users to {}",
        corpus.sessions.len(),
        corpus.users.len(),
        out.display()
    );
    Ok(())
}

fn load_corpus(dir: &Path) -> Result<Corpus, Failure> {
    Corpus::load(dir)
        .with_context(|| format!("loading corpus {}", dir.display()))
        .invalid()
}

/// Loads `--backbone` or pre-trains a fresh one; `cfg.model` follows the result.
fn obtain_backbone(cfg: &mut RunConfig, path: Option<&Path>) -> Result<MicroVlm, Failure> {
    if let Some(p) = path {
        let p = resolve(p);
        let model = MicroVlm::load(&p)
            .with_context(|| format!("loading backbone {}", p.display()))
            .invalid()?;
        if model.config() != &cfg.model {
            eprintln!("note: using the model configuration stored in {}", p.display());
            cfg.model = model.config().clone();
        }
        return Ok(model);
    }
    eprintln!("pre-training backbone ({} warm-up epochs)", cfg.pretrain.warmup.epochs);
    let (model, trace) = pretrain_backbone(&cfg.model, &cfg.pretrain)?;
    if let Some(last) = trace.last() {
        eprintln!("backbone warm-up click loss {last:.4}");
    }
    Ok(model)
}

fn train_cmd(a: TrainArgs) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(a.config.config.as_deref())?;
    cfg.apply(&a.flags);
    cfg.validate().invalid()?;
    let data = resolve(&a.data);
    let corpus = load_corpus(&data)?;
    let out = resolve(&a.out);
    prepare_out_dir(&out, a.force)?;
    let model = obtain_backbone(&mut cfg, a.flags.backbone.as_deref())?;
    model.save(&out.join(BACKBONE_FILE))?;

    let tc = cfg.train.clone();
    let lc = cfg.loss.clone();
    let split = leave_one_out_split(&corpus, tc.seed);
    write_json(&out.join(SPLIT_FILE), &split)?;
    let record = RunRecord {
        format_version: RECORD_VERSION,
        method: method_name(&a.flags.ablations),
        seed: tc.seed,
        ablations: a.flags.ablations.clone(),
        data: fs::canonicalize(&data).unwrap_or(data),
        config: cfg,
    };
    write_json(&out.join(RUN_FILE), &record)?;

    let sessions: Vec<_> = split.train.iter().map(|&i| corpus.sessions[i].clone()).collect();
    let train_set = prepare(&model, &corpus, &sessions, tc.soft_tokens, lc.epsilon).invalid()?;
    let mut state = initial_state(&model, &corpus, &tc).invalid()?;
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).with_context(|| format!("creating {}", ckpt_dir.display()))?;
    state.save(&ckpt_dir.join("epoch_0000.json"))?;

    let trace_path = out.join(TRACE_FILE);
    let mut trace = fs::File::create(&trace_path).with_context(|| format!("creating {}", trace_path.display()))?;
    let every = a.checkpoint_every;
    let mut on_epoch = |log: &EpochLog, s: &PromptState| -> Result<(), String> {
        let line = serde_json::to_string(log).map_err(|e| e.to_string())?;
        writeln!(trace, "{line}").map_err(|e| format!("{}: {e}", trace_path.display()))?;
        eprintln!(
            "epoch {:>3}  L_total {:.5}  ({} ms)",
            log.epoch, log.total, log.wall_ms
        );
        if every > 0 && log.epoch.is_multiple_of(every) {
            s.save(&ckpt_dir.join(format!("epoch_{:04}.json", log.epoch)))
                .map_err(|e| e.to_string())?;
        }
        Ok(())
    };
    train(&model, &train_set, &mut state, &tc, &lc, &mut on_epoch)?;
    state.save(&out.join(PROMPTS_FILE))?;
    eprintln!("wrote run to {}", out.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<(), Failure> {
    let run = resolve(&a.run);
    let record: RunRecord = read_json(&run.join(RUN_FILE)).invalid()?;
    let mut cfg = record.config;
    if let Some(op) = a.operator {
        if op != cfg.train.probe.operator {
            eprintln!(
                "warning: run was trained with {}, evaluating with {op}",
                cfg.train.probe.operator
            );
            cfg.train.probe.operator = op;
        }
    }
    let corpus = load_corpus(&record.data)?;
    let model = MicroVlm::load(&run.join(BACKBONE_FILE)).invalid()?;
    let state = PromptState::load(&run.join(PROMPTS_FILE)).invalid()?;
    let split: Split = read_json(&run.join(SPLIT_FILE)).invalid()?;

    let sessions: Vec<_> = split.test.iter().map(|&i| corpus.sessions[i].clone()).collect();
    let test_set = prepare(&model, &corpus, &sessions, cfg.train.soft_tokens, cfg.loss.epsilon).invalid()?;
    let probe = &cfg.train.probe;
    let backbone = evaluate(&model, &test_set, None, probe)?;
    let tuned = evaluate(&model, &test_set, Some(&state), probe)?;

    let heat = run.join("heatmaps");
    fs::create_dir_all(&heat).with_context(|| format!("creating {}", heat.display()))?;
    for ((b, t), s) in backbone.iter().zip(&tuned).zip(&sessions) {
        let layout = corpus
            .layout(&s.layout)
            .ok_or_else(|| anyhow!("unknown layout {}", s.layout))?;
        let path = heat.join(format!("{}.csv", b.session));
        fs::write(&path, heatmap_csv(layout, b, t)).with_context(|| format!("writing {}", path.display()))?;
        if a.pgm {
            for (tag, values) in [("backbone", &b.relevance), ("gaze", &b.gaze), ("tuned", &t.relevance)] {
                let path = heat.join(format!("{}_{tag}.pgm", b.session));
                fs::write(&path, heatmap_pgm(layout, values)?).with_context(|| format!("writing {}", path.display()))?;
            }
        }
    }

    let eval = EvalRecord {
        format_version: RECORD_VERSION,
        method: record.method,
        seed: record.seed,
        operator: probe.operator,
        metrics: MetricsReport::METRICS.iter().map(|m| m.to_string()).collect(),
        backbone: MetricsReport::from_sessions(&backbone, EPS)?,
        tuned: MetricsReport::from_sessions(&tuned, EPS)?,
        config: cfg,
    };
    write_json(&run.join(METRICS_FILE), &eval)?;
    eprintln!(
        "{} sessions: KL {:.4} -> {:.4}, accuracy {:.4} -> {:.4}",
        tuned.len(),
        eval.backbone.kl,
        eval.tuned.kl,
        eval.backbone.accuracy,
        eval.tuned.accuracy
    );
    Ok(())
}

/// One row per slot: geometry, gaze, both relevance distributions, click
/// probabilities and the clicked flag.
fn heatmap_csv(layout: &Layout, backbone: &SessionEval, tuned: &SessionEval) -> String {
    let mut out = String::from("slot,x,y,w,h,gaze,backbone,tuned,backbone_prob,tuned_prob,clicked\n");
    for (n, r) in layout.slots.iter().enumerate() {
        let _ = writeln!(
            out,
            "{n},{},{},{},{},{},{},{},{},{},{}",
            r.x,
            r.y,
            r.w,
            r.h,
            backbone.gaze[n],
            backbone.relevance[n],
            tuned.relevance[n],
            backbone.probs[n],
            tuned.probs[n],
            u8::from(backbone.click == n)
        );
    }
    out
}

/// Plain PGM over the patch grid, each patch shaded by its slot's value
/// relative to the largest slot value.
fn heatmap_pgm(layout: &Layout, values: &[f64]) -> anyhow::Result<String> {
    let map = layout.patch_slot_map()?;
    let [rows, cols] = layout.patch_grid;
    let max = values.iter().copied().fold(0.0, f64::max);
    let mut out = format!("P2\n{cols} {rows}\n255\n");
    for r in 0..rows {
        let line: Vec<String> = (0..cols)
            .map(|c| {
                let v = map[r * cols + c].map_or(0.0, |s| values[s]);
                let shade = if max > 0.0 { (255.0 * v / max).round() } else { 0.0 };
                format!("{}", shade as u8)
            })
            .collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    Ok(out)
}

fn sweep(a: SweepArgs) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(a.config.config.as_deref())?;
    cfg.apply(&a.flags);
    cfg.validate().invalid()?;
    let mut grid = Vec::with_capacity(a.values.len());
    for &v in &a.values {
        let mut c = cfg.clone();
        match a.param {
            SweepParam::Lambda => c.loss.lambda = v,
            SweepParam::NumPrompts | SweepParam::SoftTokens => {
                if v.fract() != 0.0 || v < 1.0 {
                    return Err(Failure::Invalid(anyhow!("{v} is not a positive integer")));
                }
                if a.param == SweepParam::NumPrompts {
                    c.train.num_prompts = v as usize;
                } else {
                    c.train.soft_tokens = v as usize;
                }
            }
        }
        c.validate().with_context(|| format!("grid value {v}")).invalid()?;
        grid.push((v, c));
    }
    let corpus = load_corpus(&resolve(&a.data))?;
    let out = resolve(&a.out);
    prepare_out_dir(&out, a.force)?;
    let model = obtain_backbone(&mut cfg, a.flags.backbone.as_deref())?;
    write_json(
        &out.join("config.json"),
        &SweepRecord {
            format_version: RECORD_VERSION,
            param: a.param,
            values: &a.values,
            seeds: a.seeds,
            config: &cfg,
        },
    )?;

    let param = match a.param {
        SweepParam::Lambda => "lambda",
        SweepParam::NumPrompts => "num_prompts",
        SweepParam::SoftTokens => "soft_tokens",
    };
    let mut csv = String::from("param,value,seed,kl,accuracy\n");
    for (v, c) in &grid {
        for seed in 0..a.seeds {
            let mut tc = c.train.clone();
            tc.seed = seed;
            let run = run_protocol(&model, &corpus, &tc, &c.loss, &mut |_, _| Ok(()))?;
            let r = MetricsReport::from_sessions(&run.tuned, EPS)?;
            eprintln!("{param} = {v}, seed {seed}: KL {:.4}, accuracy {:.4}", r.kl, r.accuracy);
            let _ = writeln!(csv, "{param},{v},{seed},{},{}", r.kl, r.accuracy);
        }
    }
    let path = out.join("sweep.csv");
    fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn report(a: ReportArgs) -> Result<(), Failure> {
    let mut records = Vec::with_capacity(a.runs.len());
    for r in &a.runs {
        let path = resolve(r).join(METRICS_FILE);
        let rec: EvalRecord = read_json(&path).invalid()?;
        records.push(rec);
    }
    let first = &records[0];
    for r in &records[1..] {
        if r.metrics != first.metrics {
            return Err(Failure::Invalid(anyhow!("runs report different metric sets")));
        }
        if r.operator != first.operator {
            return Err(Failure::Invalid(anyhow!(
                "runs mix probing operators ({} and {})",
                first.operator,
                r.operator
            )));
        }
    }
    let metrics: Vec<String> = if a.metrics.is_empty() {
        first.metrics.clone()
    } else {
        for m in &a.metrics {
            if !first.metrics.contains(m) {
                return Err(Failure::Invalid(anyhow!("unknown metric {m}")));
            }
        }
        a.metrics.clone()
    };

    // backbone rows are shared by every run with the same seed
    let mut backbone: BTreeMap<u64, MetricsReport> = BTreeMap::new();
    let mut methods: BTreeMap<String, BTreeMap<u64, MetricsReport>> = BTreeMap::new();
    for r in &records {
        backbone.entry(r.seed).or_insert_with(|| r.backbone.clone());
        let seeds = methods.entry(r.method.clone()).or_default();
        if seeds.insert(r.seed, r.tuned.clone()).is_some() {
            return Err(Failure::Invalid(anyhow!("method {} has two runs with seed {}", r.method, r.seed)));
        }
    }
    let mut runs = vec![MethodRuns {
        name: "backbone".into(),
        reports: backbone.values().cloned().collect(),
    }];
    let backbone_seeds: BTreeSet<u64> = backbone.keys().copied().collect();
    for (name, seeds) in methods {
        if seeds.keys().copied().collect::<BTreeSet<_>>() != backbone_seeds {
            eprintln!("note: {name} covers fewer seeds than the backbone; no t-test for it");
        }
        runs.push(MethodRuns {
            name,
            reports: seeds.into_values().collect(),
        });
    }
    let names: Vec<&str> = metrics.iter().map(String::as_str).collect();
    let table = aggregate(&runs, 0, &names).invalid()?;

    let out = resolve(&a.out);
    prepare_out_dir(&out, a.force)?;
    let md = render_markdown(&table);
    fs::write(out.join("table.md"), &md).context("writing table.md")?;
    fs::write(out.join("table.csv"), render_csv(&table)).context("writing table.csv")?;
    write_json(&out.join("table.json"), &table)?;
    print!("{md}");
    Ok(())
}
