use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use pemcompose::adapter::{weighted_compose, AdapterCheckpoint, CompositionMode, WeightVector};
use pemcompose::eval::{evaluate, evaluate_baseline};
use pemcompose::mbti::Trait;
use pemcompose::model::BaseModel;
use pemcompose::pipeline::{run_pipeline, PipelineConfig};
use pemcompose::sweep::sweep;
use pemcompose::tasks::{
    gen_pretrain_dataset, gen_questionnaire, gen_trait_dataset_with, questionnaire_samples, read_jsonl, vocab_map,
    write_jsonl, LabeledSample, Questionnaire,
};
use pemcompose::tensor::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointKind};
use pemcompose::train::{pretrain_base, train_adapter, AdapterKind};

/// Compose trait adapters into personalities over a tiny transformer.
#[derive(Debug, Parser)]
#[command(name = "pemcompose", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Pipeline configuration as JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed_data: Option<u64>,
    #[arg(long)]
    seed_model: Option<u64>,
    #[arg(long)]
    seed_train: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the trait datasets, pretraining corpus, questionnaire and vocabulary.
    GenData(Common),
    /// Pretrain the base model and write base.pem.bin.
    Pretrain(Common),
    /// Train one trait adapter against a base checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: PathBuf,
        #[arg(long = "trait")]
        trait_id: Trait,
        #[arg(long)]
        kind: Option<AdapterKind>,
    },
    /// Weighted composition of four adapters.
    Compose {
        #[arg(long, num_args = 1.., required = true)]
        adapters: Vec<PathBuf>,
        #[arg(long, num_args = 1.., required = true, allow_negative_numbers = true)]
        weights: Vec<f64>,
        #[arg(long)]
        mode: Option<CompositionMode>,
        /// Output file, or a directory to write composed.pem.bin into.
        #[arg(long)]
        out: PathBuf,
    },
    /// Search the simplex grid for the best weights for one personality.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: PathBuf,
        #[arg(long, num_args = 4, required = true)]
        adapters: Vec<PathBuf>,
        #[arg(long)]
        target: String,
        #[arg(long)]
        mode: Option<CompositionMode>,
    },
    /// Run the questionnaire and write an evaluation report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: PathBuf,
        /// Adapter checkpoint; without it the no-adapter baseline is scored.
        #[arg(long)]
        adapter: Option<PathBuf>,
        #[arg(long)]
        target: Option<String>,
        /// Questionnaire JSON lines; generated from --seed-data otherwise.
        #[arg(long)]
        questionnaire: Option<PathBuf>,
    },
    /// Print checkpoint metadata, tensor shapes and fingerprint.
    Inspect { path: PathBuf },
    /// Run everything and write the summary tables.
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        kind: Option<AdapterKind>,
        #[arg(long)]
        mode: Option<CompositionMode>,
        #[arg(long)]
        sweep: bool,
    },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Lib(pemcompose::Error),
}

impl From<pemcompose::Error> for CliError {
    fn from(e: pemcompose::Error) -> Self {
        CliError::Lib(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Lib(e) if e.is_io() => 3,
            CliError::Lib(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Lib(pemcompose::Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> CliResult {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_samples(path: &Path, samples: &[LabeledSample]) -> CliResult {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    write_jsonl(samples, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| io_err(path, e))
}

fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> CliResult {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    Ok(write_checkpoint(ckpt, path)?)
}

fn json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("value serializes") + "\n"
}

fn resolve(common: &Common) -> CliResult<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            PipelineConfig::from_json(&text)?
        }
        None => PipelineConfig::default(),
    };
    if let Some(s) = common.seed_data {
        cfg.seeds.data = s;
    }
    if let Some(s) = common.seed_model {
        cfg.seeds.model = s;
    }
    if let Some(s) = common.seed_train {
        cfg.seeds.train = s;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.to_string_lossy().into_owned();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_base(path: &Path) -> CliResult<BaseModel> {
    Ok(BaseModel::from_checkpoint(&read_checkpoint(path)?)?)
}

fn load_adapter(path: &Path) -> CliResult<AdapterCheckpoint> {
    Ok(AdapterCheckpoint::from_checkpoint(&read_checkpoint(path)?)?)
}

fn stamp(ckpt: &mut Checkpoint, cfg: &PipelineConfig) {
    ckpt.metadata.insert("resolved_config", serde_json::to_string(cfg).expect("config serializes"));
}

fn gen_data(common: &Common) -> CliResult {
    let cfg = resolve(common)?;
    let out = Path::new(&cfg.out_dir).join("data");
    for t in Trait::ALL {
        let ds = gen_trait_dataset_with(t, cfg.seeds.data, &cfg.task_options());
        write_samples(&out.join(format!("trait_{t}.jsonl")), &ds.samples)?;
    }
    write_samples(
        &out.join("pretrain.jsonl"),
        &gen_pretrain_dataset(cfg.seeds.data, cfg.pretrain_samples)?,
    )?;
    write_samples(
        &out.join("questionnaire.jsonl"),
        &questionnaire_samples(&gen_questionnaire(cfg.seeds.data)),
    )?;
    write_text(&out.join("vocab.json"), &json(&vocab_map()))?;
    write_text(&out.join("config.json"), &json(&cfg))?;
    println!("{}", out.display());
    Ok(())
}

fn pretrain(common: &Common) -> CliResult {
    let cfg = resolve(common)?;
    let data = gen_pretrain_dataset(cfg.seeds.data, cfg.pretrain_samples)?;
    let (base, report) = pretrain_base(&cfg.model, cfg.seeds.model, &data, &cfg.pretrain_config())?;
    info!("pretrain accuracy {:.3}", report.final_accuracy);
    let mut ckpt = base.to_checkpoint();
    stamp(&mut ckpt, &cfg);
    let path = Path::new(&cfg.out_dir).join("base.pem.bin");
    save_checkpoint(&path, &ckpt)?;
    println!("{} {}", path.display(), base.fingerprint());
    Ok(())
}

fn train(common: &Common, base: &Path, t: Trait, kind: Option<AdapterKind>) -> CliResult {
    let cfg = resolve(common)?;
    let kind = kind.unwrap_or(cfg.kinds[0]);
    let base = load_base(base)?;
    let ds = gen_trait_dataset_with(t, cfg.seeds.data, &cfg.task_options());
    let (adapter, report) = train_adapter(&base, kind, &ds, &cfg.adapter_config(t))?;
    info!("{kind} {t} accuracy {:.3}", report.final_accuracy);
    let mut ckpt = adapter.to_checkpoint()?;
    stamp(&mut ckpt, &cfg);
    let path = Path::new(&cfg.out_dir).join(format!("{kind}_{t}.pem.bin"));
    save_checkpoint(&path, &ckpt)?;
    println!("{}", path.display());
    Ok(())
}

fn compose(adapters: &[PathBuf], weights: &[f64], mode: Option<CompositionMode>, out: &Path) -> CliResult {
    if adapters.len() != 4 {
        return Err(CliError::Usage(format!("--adapters takes 4 paths, got {}", adapters.len())));
    }
    if weights.len() != adapters.len() {
        return Err(CliError::Usage(format!(
            "--weights takes one value per adapter: {} adapters, {} weights",
            adapters.len(),
            weights.len()
        )));
    }
    let loaded = adapters.iter().map(|p| load_adapter(p)).collect::<CliResult<Vec<_>>>()?;
    let w = WeightVector::new(weights.to_vec())?;
    let composed = weighted_compose(&loaded, &w, mode.unwrap_or_default())?;
    let mut ckpt = composed.to_checkpoint()?;
    let inputs: Vec<String> = adapters.iter().map(|p| p.display().to_string()).collect();
    ckpt.metadata.insert("composed_paths", inputs.join(","));
    let path = if out.is_dir() { out.join("composed.pem.bin") } else { out.to_path_buf() };
    save_checkpoint(&path, &ckpt)?;
    println!("{}", path.display());
    Ok(())
}

fn run_sweep(common: &Common, base: &Path, adapters: &[PathBuf], target: &str, mode: Option<CompositionMode>) -> CliResult {
    let cfg = resolve(common)?;
    let mode = mode.unwrap_or(cfg.mode);
    let base = load_base(base)?;
    let loaded = adapters.iter().map(|p| load_adapter(p)).collect::<CliResult<Vec<_>>>()?;
    let q = gen_questionnaire(cfg.seeds.data);
    let result = sweep(&loaded, target, &base, &q, mode, cfg.granularity)?;
    let dir = Path::new(&cfg.out_dir);
    let code = result.target.clone();
    let mut artifact = serde_json::to_value(&result).expect("sweep result serializes");
    artifact["config"] = serde_json::to_value(&cfg).expect("config serializes");
    write_text(&dir.join(format!("sweep_{code}.json")), &json(&artifact))?;
    if let Some(best) = &result.composed {
        let mut ckpt = best.to_checkpoint()?;
        stamp(&mut ckpt, &cfg);
        save_checkpoint(&dir.join(format!("sweep_{code}.pem.bin")), &ckpt)?;
    }
    println!(
        "{code} best {:?} objective {:.2} (equal weights {:.2})",
        result.best_weights.as_slice(),
        result.best_objective,
        result.baseline_objective
    );
    Ok(())
}

fn read_questionnaire(path: &Path) -> CliResult<Questionnaire> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let samples = read_jsonl(BufReader::new(file))?;
    Ok(Questionnaire {
        statements: samples.into_iter().map(|s| s.statement).collect(),
    })
}

fn eval(
    common: &Common,
    base: &Path,
    adapter: Option<&Path>,
    target: Option<&str>,
    questionnaire: Option<&Path>,
) -> CliResult {
    let cfg = resolve(common)?;
    let base = load_base(base)?;
    let q = match questionnaire {
        Some(p) => read_questionnaire(p)?,
        None => gen_questionnaire(cfg.seeds.data),
    };
    let (report, name) = match adapter {
        Some(p) => {
            let a = load_adapter(p)?;
            let stem = p.file_name().map(|n| n.to_string_lossy().replace(".pem.bin", "")).unwrap_or_default();
            (evaluate(&base, Some(&a), &q, target)?, format!("report_{stem}.json"))
        }
        None => {
            (evaluate_baseline(&base, &q, target)?, "report_baseline.json".to_owned())
        }
    };
    let mut value = serde_json::to_value(&report).expect("report serializes");
    value["config"] = serde_json::to_value(&cfg).expect("config serializes");
    let path = Path::new(&cfg.out_dir).join(name);
    write_text(&path, &json(&value))?;
    let scores: Vec<String> = report
        .dichotomies
        .iter()
        .map(|d| format!("{}={:.0}", d.dichotomy.first(), d.score_first))
        .collect();
    println!("{} {} -> {}", report.predicted, scores.join(" "), path.display());
    Ok(())
}

fn inspect(path: &Path) -> CliResult {
    let ckpt = read_checkpoint(path)?;
    for (k, v) in ckpt.metadata.as_map() {
        println!("{k}: {v}");
    }
    let mut total = 0;
    for (name, t) in ckpt.tensors() {
        println!("{name} {:?} {}", t.shape(), t.dtype().as_str());
        total += t.numel();
    }
    println!("tensors: {} ({total} values)", ckpt.len());
    let fp = ckpt.backbone_fingerprint();
    if ckpt.metadata.kind()? == CheckpointKind::Base {
        println!("fingerprint: {fp}");
    } else {
        println!("base fingerprint: {}", ckpt.metadata.base_fingerprint()?);
    }
    Ok(())
}

fn pipeline(common: &Common, kind: Option<AdapterKind>, mode: Option<CompositionMode>, do_sweep: bool) -> CliResult {
    let mut cfg = resolve(common)?;
    if let Some(k) = kind {
        cfg.kinds = vec![k];
    }
    if let Some(m) = mode {
        cfg.mode = m;
    }
    cfg.sweep |= do_sweep;
    let run = run_pipeline(&cfg)?;
    let dir = Path::new(&cfg.out_dir);
    let mut base = run.base.to_checkpoint();
    stamp(&mut base, &cfg);
    save_checkpoint(&dir.join("base.pem.bin"), &base)?;
    for ((kind, t), a) in &run.adapters {
        let mut ckpt = a.to_checkpoint()?;
        stamp(&mut ckpt, &cfg);
        save_checkpoint(&dir.join("adapters").join(format!("{kind}_{t}.pem.bin")), &ckpt)?;
    }
    write_text(&dir.join("summary.json"), &(run.summary.to_json() + "\n"))?;
    let text = run.summary.to_text();
    write_text(&dir.join("summary.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match &cli.command {
        Command::GenData(c) => gen_data(c),
        Command::Pretrain(c) => pretrain(c),
        Command::Train {
            common,
            base,
            trait_id,
            kind,
        } => train(common, base, *trait_id, *kind),
        Command::Compose {
            adapters,
            weights,
            mode,
            out,
        } => compose(adapters, weights, *mode, out),
        Command::Sweep {
            common,
            base,
            adapters,
            target,
            mode,
        } => run_sweep(common, base, adapters, target, *mode),
        Command::Eval {
            common,
            base,
            adapter,
            target,
            questionnaire,
        } => eval(common, base, adapter.as_deref(), target.as_deref(), questionnaire.as_deref()),
        Command::Inspect { path } => inspect(path),
        Command::Pipeline {
            common,
            kind,
            mode,
            sweep,
        } => pipeline(common, *kind, *mode, *sweep),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("pemcompose: {}", first.trim_start_matches("error: "));
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pemcompose: {}", e.to_string().replace('\n', " "));
            ExitCode::from(e.exit_code())
        }
    }
}
