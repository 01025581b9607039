use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use mlmsda::config::{DatasetSource, RunConfig};
use mlmsda::data::{save_dataset, MultiDomainDataset, RingBenchmark, DATASET_VERSION};
use mlmsda::evaluation::{
    ablation_jobs, aggregate_ablation, check_compatible, dump_features, evaluate, run_ablation_job, AblationJob,
    InferenceMode, JobResult,
};
use mlmsda::model::{load_checkpoint, save_checkpoint};
use mlmsda::training::train_with;

const WORKERS_ENV: &str = "MLMSDA_WORKERS";

#[derive(Parser)]
#[command(name = "mlmsda", version, about = "Mutual-learning multi-source domain adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset file and a manifest next to it.
    Generate(GenerateArgs),
    /// Train one model; writes a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Train and score the full model and its ablated variants over several seeds.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path).with_context(|| format!("reading config {}", path.display()))?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Run directory; overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Train on a dataset file instead of the configured dataset.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Also write a checkpoint every N epochs (0 = final only).
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset file; the configured dataset is used when omitted.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value = "ensemble", value_parser = parse_mode)]
    mode: InferenceMode,
    /// Report file; the same JSON is printed to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write extractor features as CSV.
    #[arg(long)]
    dump_features: Option<PathBuf>,
    /// Subnetwork whose features are dumped (default: guidance).
    #[arg(long)]
    subnet: Option<usize>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_mode(s: &str) -> Result<InferenceMode, String> {
    s.parse().map_err(|e: mlmsda::Error| e.to_string())
}

fn load_dataset_for(cfg: &RunConfig, override_path: Option<&Path>) -> Result<MultiDomainDataset> {
    let source = match override_path {
        Some(p) => DatasetSource::File { path: p.to_path_buf() },
        None => cfg.dataset.clone(),
    };
    if let DatasetSource::File { path } = &source {
        if !path.exists() {
            bail!("dataset file {} does not exist", path.display());
        }
    }
    source.load(None).context("loading dataset")
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    format_version: u32,
    ring: RingBenchmark,
}

fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let DatasetSource::Ring(mut spec) = cfg.dataset else {
        bail!("generate needs a ring dataset spec, the config points at a file");
    };
    if let Some(seed) = args.config.seed {
        spec.seed = seed;
    }
    let ds = spec.generate()?;
    save_dataset(&ds, &args.out)?;
    let manifest = DatasetManifest {
        format_version: DATASET_VERSION,
        ring: spec,
    };
    let manifest_path = manifest_path(&args.out);
    fs::write(&manifest_path, toml::to_string(&manifest)?)?;
    eprintln!("wrote {} and {}", args.out.display(), manifest_path.display());
    Ok(())
}

fn manifest_path(dataset: &Path) -> PathBuf {
    let mut name = dataset.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.toml");
    dataset.with_file_name(name)
}

#[derive(Serialize)]
struct Timing<'a> {
    epoch: usize,
    seconds: f64,
    config_hash: &'a str,
}

fn write_resolved_config(cfg: &RunConfig, hash: &str, path: &Path) -> Result<()> {
    fs::write(path, format!("# config_hash = \"{hash}\"\n{}", cfg.to_toml()?))?;
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = args.config.load()?;
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    if let Some(path) = &args.dataset {
        let path = fs::canonicalize(path).with_context(|| format!("dataset file {}", path.display()))?;
        cfg.dataset = DatasetSource::File { path };
    }
    let ds = load_dataset_for(&cfg, None)?;
    let model = cfg.init_model(&ds)?;
    let hash = cfg.config_hash();

    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir)?;
    write_resolved_config(&cfg, &hash, &dir.join("config.toml"))?;
    let mut metrics = BufWriter::new(File::create(dir.join("metrics.jsonl"))?);
    let mut timings = BufWriter::new(File::create(dir.join("timings.jsonl"))?);
    if args.checkpoint_every > 0 {
        fs::create_dir_all(dir.join("checkpoints"))?;
    }

    let outcome = train_with(model, &ds, &cfg, |end| {
        let r = end.record;
        serde_json::to_writer(&mut metrics, r)?;
        metrics.write_all(b"\n")?;
        metrics.flush()?;
        serde_json::to_writer(
            &mut timings,
            &Timing {
                epoch: r.epoch,
                seconds: end.seconds,
                config_hash: &hash,
            },
        )?;
        timings.write_all(b"\n")?;
        timings.flush()?;
        if args.checkpoint_every > 0 && (r.epoch + 1) % args.checkpoint_every == 0 {
            save_checkpoint(
                end.model,
                &hash,
                dir.join(format!("checkpoints/epoch-{:03}.ckpt", r.epoch + 1)),
            )?;
        }
        eprintln!(
            "epoch {:>3}  lr {:.4}  l_c {:.4}  l_adv {:.4}  l_m {:.4}  target acc {:.4}",
            r.epoch, r.learning_rate, r.l_c, r.l_adv, r.l_m, r.accuracy
        );
        Ok(())
    })?;
    save_checkpoint(&outcome.model, &hash, dir.join("final.ckpt"))?;
    eprintln!("run written to {}", dir.display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let (model, hash) =
        load_checkpoint(&args.checkpoint).with_context(|| format!("checkpoint {}", args.checkpoint.display()))?;
    let ds = load_dataset_for(&cfg, args.dataset.as_deref())?;
    check_compatible(&model, &ds)?;
    let report = evaluate(&model, &ds, args.mode, cfg.seed, &hash)?;
    let text = serde_json::to_string_pretty(&report)? + "\n";
    print!("{text}");
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| args.checkpoint.with_file_name(format!("eval-{}.json", args.mode)));
    fs::write(&out, &text)?;
    if let Some(path) = &args.dump_features {
        let subnet = args.subnet.unwrap_or(model.guidance_index());
        dump_features(&model, &ds, subnet, &hash, path)?;
    }
    Ok(())
}

fn worker_count() -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => {
            let n: usize = v
                .parse()
                .with_context(|| format!("{WORKERS_ENV}={v:?} is not a count"))?;
            if n == 0 {
                bail!("{WORKERS_ENV} must be >= 1");
            }
            Ok(n)
        }
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let mut cfg = args.config.load()?;
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    if args.seeds.is_empty() {
        bail!("--seeds needs at least one seed");
    }
    let ds = load_dataset_for(&cfg, None)?;
    cfg.check_dataset(&ds)?;
    let dir = cfg.output_dir.clone();
    let jobs_dir = dir.join("jobs");
    fs::create_dir_all(&jobs_dir)?;
    write_resolved_config(&cfg, &cfg.config_hash(), &dir.join("config.toml"))?;

    let pool = rayon::ThreadPoolBuilder::new().num_threads(worker_count()?).build()?;
    let outcomes: Vec<(AblationJob, Result<JobResult>)> = pool.install(|| {
        ablation_jobs(&args.seeds)
            .into_par_iter()
            .map(|job| (job, run_or_resume(&cfg, &ds, job, &jobs_dir)))
            .collect()
    });

    let mut failed: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    let mut results = Vec::new();
    for (job, outcome) in outcomes {
        match outcome {
            Ok(r) => results.push(r),
            Err(e) => failed
                .entry(job.variant.as_str())
                .or_default()
                .push(format!("seed {}: {e:#}", job.seed)),
        }
    }
    if !failed.is_empty() {
        for (variant, errors) in &failed {
            for e in errors {
                eprintln!("variant {variant} failed, {e}");
            }
        }
        bail!("{} ablation variant(s) failed", failed.len());
    }
    let table = aggregate_ablation(&cfg, &args.seeds, &results)?;
    fs::write(dir.join("ablation.tsv"), table.to_tsv())?;
    fs::write(dir.join("ablation.json"), serde_json::to_string_pretty(&table)? + "\n")?;
    print!("{}", table.to_tsv());
    Ok(())
}

/// Reuses a cached result when one with a matching config hash exists.
fn run_or_resume(cfg: &RunConfig, ds: &MultiDomainDataset, job: AblationJob, jobs_dir: &Path) -> Result<JobResult> {
    let path = jobs_dir.join(format!("{}.json", job.key()));
    let expected_hash = job.variant.config(cfg, job.seed).config_hash();
    if let Ok(text) = fs::read_to_string(&path) {
        if let Ok(cached) = serde_json::from_str::<JobResult>(&text) {
            if cached.job == job && cached.config_hash == expected_hash {
                eprintln!("{}: cached", job.key());
                return Ok(cached);
            }
        }
    }
    let result = run_ablation_job(cfg, ds, job)?;
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, serde_json::to_string_pretty(&result)? + "\n")?;
    fs::rename(&tmp, &path)?;
    eprintln!("{}: ensemble {:.4}", job.key(), result.target_accuracy.ensemble);
    Ok(result)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
