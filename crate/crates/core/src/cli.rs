//! Command-line entry point. Exit status: 0 success, 1 validation error
//! (bad flags, missing or invalid inputs), 2 runtime failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::autodiff::Precision;
use crate::checks::{run_trials, tolerance};
use crate::config::{ConfigError, RunConfig};
use crate::dataset::{build_dataset, read_dataset, write_dataset, DatasetError, DatasetPlan};
use crate::eval::{
    evaluate_model_by_tier, run_ablation, zero_shot_eval, AblationAxis, EvalError, RobustnessReport, TaskStats,
};
use crate::losses::{ConsNorm, GroupGradMode};
use crate::model::{load_checkpoint, ModelError};
use crate::synth::{DomainShiftSpec, SceneSpec};
use crate::text::{PromptError, TemplateBank};
use crate::trainer::{train, TaskSelection, TrainError};

#[derive(Parser, Debug)]
#[command(
    name = "pgat",
    version,
    about = "Prompt-group-aware training for text-guided segmentation on synthetic nuclei"
)]
pub struct Cli {
    /// Global seed; overrides the seed of any loaded config.
    #[arg(long, global = true, env = "PGAT_SEED")]
    pub seed: Option<u64>,
    /// Threads used for evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Train one model from a run config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Multi-seed ablation along one axis.
    Ablate(StudyArgs),
    /// Baseline vs full method on domain-shift presets.
    Zeroshot(ZeroshotArgs),
    /// Gradient check on random loss-bearing graphs.
    Gradcheck(GradcheckArgs),
    /// Collect run directories into one CSV.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub scenes: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Prompts per stored group.
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    /// Domain-shift preset applied to every scene.
    #[arg(long)]
    pub shift: Option<String>,
    /// Scene distribution as JSON; overrides --size.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Template bank JSON.
    #[arg(long)]
    pub templates: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Training dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// w-differentiable or fully-detached.
    #[arg(long)]
    pub grad_mode: Option<GroupGradMode>,
    /// mean-per-pixel or sum.
    #[arg(long)]
    pub cons_norm: Option<ConsNorm>,
    /// t1, t2 or both.
    #[arg(long)]
    pub tasks: Option<TaskSelection>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Print the per-tier table instead of per-task means.
    #[arg(long)]
    pub by_tier: bool,
    /// Also write the full report, with per-item scores, as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct StudyArgs {
    /// loss-design, beta or k.
    #[arg(long)]
    pub axis: String,
    /// Run config; the built-in desk-scale study when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of seeds (0..N); overrides the config.
    #[arg(long)]
    pub seeds: Option<u64>,
}

#[derive(Args, Debug)]
pub struct ZeroshotArgs {
    #[arg(long, value_delimiter = ',', default_value = "density,size,noise")]
    pub presets: Vec<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seeds: Option<u64>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value = "f64")]
    pub precision: Precision,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(long)]
    pub runs: PathBuf,
    /// Output CSV path, `-` for standard output.
    #[arg(long, default_value = "-")]
    pub out: String,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<PromptError> for CliError {
    fn from(e: PromptError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io { .. } | DatasetError::Corrupt { .. } | DatasetError::Manifest(_) => {
                CliError::Validation(e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io { .. } | ModelError::Checkpoint(_) | ModelError::Config(_) => {
                CliError::Validation(e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Validation(e.to_string()),
            TrainError::Dataset(d) => d.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::UnknownAxis(_) | EvalError::MissingTier { .. } | EvalError::NoSeeds | EvalError::Synth(_) => {
                CliError::Validation(e.to_string())
            }
            EvalError::Dataset(d) => d.into(),
            EvalError::Train(t) => t.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    let seed = cli.seed;
    let workers = cli.workers.max(1);
    match cli.command {
        Command::GenData(a) => gen_data(a, seed.unwrap_or(0)),
        Command::Train(a) => train_cmd(a, seed),
        Command::Eval(a) => eval_cmd(a, workers),
        Command::Ablate(a) => ablate_cmd(a, seed),
        Command::Zeroshot(a) => zeroshot_cmd(a, seed),
        Command::Gradcheck(a) => gradcheck_cmd(a, seed.unwrap_or(0)),
        Command::Report(a) => report_cmd(a),
    }
}

fn gen_data(a: GenDataArgs, seed: u64) -> Result<(), CliError> {
    let bank = match &a.templates {
        Some(p) => TemplateBank::load(p)?,
        None => TemplateBank::default(),
    };
    bank.audit()?;
    let spec = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?;
            serde_json::from_str::<SceneSpec>(&text)
                .map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?
        }
        None => SceneSpec::with_size(a.size),
    };
    let shift = a
        .shift
        .as_deref()
        .map(DomainShiftSpec::preset)
        .transpose()
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let plan = DatasetPlan {
        n_scenes: a.scenes,
        spec,
        shift,
        seed,
        k: a.k,
    };
    let ds = build_dataset(&plan, &bank).map_err(|e| match e {
        DatasetError::Synth(s) => CliError::Validation(s.to_string()),
        other => other.into(),
    })?;
    write_dataset(&a.out, &ds)?;
    eprintln!(
        "wrote {} scenes and {} groups to {}",
        ds.scenes.len(),
        ds.groups.len(),
        a.out.display()
    );
    Ok(())
}

fn train_cmd(a: TrainArgs, seed: Option<u64>) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(&a.config)?;
    let t = &mut cfg.train;
    if let Some(s) = seed {
        t.seed = s;
    }
    if let Some(d) = a.data {
        t.dataset = Some(d);
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.k {
        t.k = v;
    }
    if let Some(v) = a.tau {
        t.loss.tau = v;
    }
    if let Some(v) = a.lambda {
        t.loss.lambda = v;
    }
    if let Some(v) = a.beta {
        t.loss.beta = v;
    }
    if let Some(v) = a.grad_mode {
        t.loss.group_grad_mode = v;
    }
    if let Some(v) = a.cons_norm {
        t.loss.cons_norm = v;
    }
    if let Some(v) = a.tasks {
        t.tasks = v;
    }
    if let Some(v) = a.checkpoint_every {
        t.checkpoint_every = v;
    }
    cfg.validate()?;
    let data = cfg
        .train
        .dataset
        .clone()
        .ok_or_else(|| CliError::Validation("no dataset: set train.dataset or pass --data".into()))?;
    if !data.is_dir() {
        return Err(CliError::Validation(format!(
            "{}: dataset directory not found",
            data.display()
        )));
    }
    create_dir(&a.out)?;
    cfg.save(&a.out.join("run_config.json"))?;
    let out = train(&cfg.train, &a.out)?;
    eprintln!(
        "trained {} steps; mean seg loss {:.4} (first epoch) -> {:.4} (last epoch); outputs in {}",
        out.summary.steps,
        out.summary.mean_seg_first_epoch,
        out.summary.mean_seg_last_epoch,
        a.out.display()
    );
    Ok(())
}

fn task_line(t: &TaskStats) -> String {
    format!("{},{},{:.6},{:.6}", t.task, t.n, t.mean, t.cross_tier_std)
}

fn eval_cmd(a: EvalArgs, workers: usize) -> Result<(), CliError> {
    let model = load_checkpoint(&a.checkpoint, None)?;
    let ds = read_dataset(&a.data)?;
    let report: RobustnessReport = evaluate_model_by_tier(&model, &ds, workers)?;
    let mut stdout = std::io::stdout().lock();
    if a.by_tier {
        let _ = write!(stdout, "{}", report.to_csv());
    } else {
        let _ = writeln!(stdout, "# {}\ntask,n,mean_dice,cross_tier_std", report.convention);
        for t in &report.tasks {
            let _ = writeln!(stdout, "{}", task_line(t));
        }
    }
    if let Some(p) = a.out {
        write_file(&p, &serde_json::to_string_pretty(&report).expect("report serializes"))?;
    }
    Ok(())
}

fn study_run_config(path: Option<&Path>, seed: Option<u64>, seeds: Option<u64>) -> Result<RunConfig, CliError> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::desk_study(),
    };
    if let Some(n) = seeds {
        let base = seed.unwrap_or(0);
        cfg.study.seeds = (base..base + n).collect();
    } else if let Some(s) = seed {
        let n = cfg.study.seeds.len() as u64;
        cfg.study.seeds = (s..s + n).collect();
    }
    if cfg.study.seeds.is_empty() {
        return Err(CliError::Validation("at least one seed is required".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ablate_cmd(a: StudyArgs, seed: Option<u64>) -> Result<(), CliError> {
    let axis: AblationAxis = a.axis.parse()?;
    let cfg = study_run_config(a.config.as_deref(), seed, a.seeds)?;
    let bank = cfg.bank()?;
    create_dir(&a.out)?;
    cfg.save(&a.out.join("run_config.json"))?;
    let table = run_ablation(&cfg.study_config(), axis, &bank)?;
    let csv = table.to_csv();
    write_file(&a.out.join("ablation.csv"), &csv)?;
    write_file(
        &a.out.join("ablation.json"),
        &serde_json::to_string_pretty(&table).expect("table serializes"),
    )?;
    print!("{csv}");
    Ok(())
}

fn zeroshot_cmd(a: ZeroshotArgs, seed: Option<u64>) -> Result<(), CliError> {
    for p in &a.presets {
        DomainShiftSpec::preset(p).map_err(|e| CliError::Validation(e.to_string()))?;
    }
    let cfg = study_run_config(a.config.as_deref(), seed, a.seeds)?;
    let bank = cfg.bank()?;
    create_dir(&a.out)?;
    cfg.save(&a.out.join("run_config.json"))?;
    let presets: Vec<&str> = a.presets.iter().map(String::as_str).collect();
    let table = zero_shot_eval(&cfg.study_config(), &presets, &bank)?;
    let csv = table.to_csv();
    write_file(&a.out.join("zeroshot.csv"), &csv)?;
    write_file(
        &a.out.join("zeroshot.json"),
        &serde_json::to_string_pretty(&table).expect("table serializes"),
    )?;
    print!("{csv}");
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs, seed: u64) -> Result<(), CliError> {
    if a.trials == 0 {
        return Err(CliError::Validation("--trials must be positive".into()));
    }
    let checks = run_trials(a.trials, seed, a.precision).map_err(runtime)?;
    let worst = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    let tol = tolerance(a.precision);
    println!(
        "max relative error {worst:.3e} over {} graphs (tolerance {tol:e})",
        checks.len()
    );
    if worst <= tol {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "gradient check failed: {worst:.3e} > {tol:e}"
        )))
    }
}

fn json_number_rows(run: &str, kind: &str, value: &serde_json::Value, prefix: &str, out: &mut Vec<String>) {
    match value {
        serde_json::Value::Number(n) => out.push(format!("{run},{kind},{prefix},{n}")),
        serde_json::Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                json_number_rows(run, kind, v, &key, out);
            }
        }
        _ => {}
    }
}

fn report_cmd(a: ReportArgs) -> Result<(), CliError> {
    if !a.runs.is_dir() {
        return Err(CliError::Validation(format!("{}: not a directory", a.runs.display())));
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(&a.runs)
        .map_err(runtime)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.push(a.runs.clone());
    dirs.sort();
    let mut rows = vec!["run,kind,metric,value".to_string()];
    for dir in &dirs {
        let run = dir
            .file_name()
            .map_or_else(|| ".".into(), |n| n.to_string_lossy().into_owned());
        let read = |name: &str| -> Option<serde_json::Value> {
            let text = std::fs::read_to_string(dir.join(name)).ok()?;
            serde_json::from_str(&text).ok()
        };
        if let Some(v) = read("summary.json") {
            json_number_rows(&run, "train", &v, "", &mut rows);
        }
        if let Some(v) = read("ablation.json") {
            if let Ok(t) = serde_json::from_value::<crate::eval::AblationTable>(v) {
                for c in &t.cells {
                    for (metric, vals) in [
                        ("low_t1", &c.low_t1),
                        ("low_t2", &c.low_t2),
                        ("t2_cross_tier_std", &c.cross_tier_std_t2),
                    ] {
                        rows.push(format!(
                            "{run},ablation,{}.{metric}.mean,{}",
                            c.label,
                            crate::eval::mean(vals)
                        ));
                        rows.push(format!(
                            "{run},ablation,{}.{metric}.std,{}",
                            c.label,
                            crate::eval::std_dev(vals)
                        ));
                    }
                }
            }
        }
        if let Some(v) = read("zeroshot.json") {
            if let Ok(t) = serde_json::from_value::<crate::eval::ZeroShotTable>(v) {
                for r in &t.rows {
                    rows.push(format!("{run},zeroshot,{}.{}.mean,{}", r.method, r.preset, r.mean));
                    rows.push(format!("{run},zeroshot,{}.{}.std,{}", r.method, r.preset, r.std));
                }
            }
        }
        if let Some(v) = read("report.json") {
            if let Ok(r) = serde_json::from_value::<RobustnessReport>(v) {
                for s in &r.tiers {
                    rows.push(format!("{run},eval,{}.{}.mean,{}", s.task, s.tier.name(), s.mean));
                }
            }
        }
    }
    let csv = rows.join("\n") + "\n";
    if a.out == "-" {
        print!("{csv}");
    } else {
        write_file(Path::new(&a.out), &csv)?;
    }
    Ok(())
}
