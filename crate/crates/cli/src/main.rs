//! `ppssl` command-line front end.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Command as Process, ExitCode, Stdio};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ppssl::ais::teacher::{description_hash, write_cache};
use ppssl::ais::{parse_descriptions, CacheKey, CacheProvider, FixtureProvider, TeacherProvider, DEFAULT_CORPUS};
use ppssl::data::{generate_synthetic, Manifest, Split};
use ppssl::eval::{embed_dataset, linear_probe, retrieval_eval, FeatureSet, ProbeConfig};
use ppssl::trainer::fit::FIXTURE_SEED;
use ppssl::trainer::{fit, teacher_from_config, Checkpoint, FitOptions, TrainConfig};
use ppssl::{Error, Result};

#[derive(Parser)]
#[command(name = "ppssl", version, about = "Self-supervised pretraining for fine-grained recognition")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set optim.epochs=2`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic fine-grained dataset and its manifest.
    MakeSynthetic {
        /// Output directory (default: `<run_dir>/data`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build a teacher embedding cache for the manifest and the corpus.
    CacheTeacher(CacheArgs),
    /// Pretrain and write checkpoints and metrics.
    Train {
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Export inference features of one split.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Output PPSE file (default: `<run_dir>/features/<split>.ppse`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank-1, rank-5 and mAP on the test split.
    EvalRetrieval {
        #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
        features: Option<PathBuf>,
        #[arg(long, requires = "features")]
        labels: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Linear probe top-1 and top-5.
    EvalProbe {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write z′, w, saliency and overlay heatmaps for sampled test images.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct CacheArgs {
    /// Validate and copy an existing PPSE cache (with its `.index` sidecar).
    #[arg(long)]
    from: Option<PathBuf>,
    /// Shell command that reads `img<TAB>id<TAB>path` / `txt<TAB>hash<TAB>text`
    /// lines on stdin and prints one whitespace-separated vector per line.
    #[arg(long)]
    command: Option<String>,
    /// Use the built-in deterministic fixture teacher.
    #[arg(long)]
    fixture: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

/// `<root>/<timestamp>-seed<seed>`, where root is `PPSSL_RUN_DIR` or
/// `run.out_dir`.
fn create_run_dir(cfg: &TrainConfig) -> Result<PathBuf> {
    let root = std::env::var_os("PPSSL_RUN_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(&cfg.run.out_dir));
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S%.3f");
    let base = format!("{stamp}-seed{}", cfg.run.seed);
    let mut dir = root.join(&base);
    let mut n = 1;
    while dir.exists() {
        dir = root.join(format!("{base}-{n}"));
        n += 1;
    }
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    cfg.write_snapshot(dir.join("config.toml"))?;
    println!("run_dir={}", dir.display());
    Ok(dir)
}

fn load_manifest(cfg: &TrainConfig) -> Result<Manifest> {
    if cfg.data.manifest.is_empty() {
        return Err(Error::config("data.manifest is not set"));
    }
    Manifest::load(&cfg.data.manifest)
}

fn corpus_descriptions(cfg: &TrainConfig) -> Result<Vec<String>> {
    if cfg.ais.corpus.is_empty() {
        Ok(parse_descriptions(DEFAULT_CORPUS))
    } else {
        ppssl::ais::load_descriptions(&cfg.ais.corpus)
    }
}

fn parse_vector(line: &str, lineno: usize) -> Result<Vec<f32>> {
    line.split_whitespace()
        .map(|t| {
            t.parse::<f32>().map_err(|_| Error::Parse {
                file: "<teacher command output>".into(),
                line: lineno,
                msg: format!("`{t}` is not a number"),
            })
        })
        .collect()
}

fn run_external(cmd: &str, requests: &[(CacheKey, String)]) -> Result<Vec<Vec<f32>>> {
    let mut child = Process::new("sh")
        .arg("-c")
        .arg(cmd)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .map_err(|e| Error::External(format!("cannot start `{cmd}`: {e}")))?;
    let mut stdin = child.stdin.take().expect("piped stdin");
    let input: String = requests.iter().map(|(k, payload)| format!("{k}\t{payload}\n")).collect();
    let writer = std::thread::spawn(move || stdin.write_all(input.as_bytes()));
    let stdout = child.stdout.take().expect("piped stdout");
    let mut rows = Vec::with_capacity(requests.len());
    for (i, line) in BufReader::new(stdout).lines().enumerate() {
        let line = line.map_err(|e| Error::External(format!("reading `{cmd}` output: {e}")))?;
        if !line.trim().is_empty() {
            rows.push(parse_vector(&line, i + 1)?);
        }
    }
    let status = child.wait().map_err(|e| Error::External(e.to_string()))?;
    writer
        .join()
        .expect("writer thread")
        .map_err(|e| Error::External(format!("writing to `{cmd}`: {e}")))?;
    if !status.success() {
        return Err(Error::External(format!("`{cmd}` exited with {status}")));
    }
    if rows.len() != requests.len() {
        return Err(Error::External(format!(
            "`{cmd}` returned {} vectors for {} inputs",
            rows.len(),
            requests.len()
        )));
    }
    Ok(rows)
}

fn cache_teacher(cfg: &TrainConfig, args: &CacheArgs, run_dir: &Path) -> Result<()> {
    let manifest = load_manifest(cfg)?;
    let descriptions = corpus_descriptions(cfg)?;
    let out = run_dir.join("teacher.ppse");
    if let Some(src) = &args.from {
        let cache = CacheProvider::load(src)?;
        let missing: Vec<String> = manifest
            .records
            .iter()
            .map(|r| CacheKey::Image(r.source_id))
            .chain(descriptions.iter().map(|d| CacheKey::text(d)))
            .filter(|k| !cache.contains(k))
            .map(|k| k.to_string().replace('\t', " "))
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingEmbedding(format!("{} keys, first `{}`", missing.len(), missing[0])));
        }
        for ext in ["", ".index"] {
            let from = PathBuf::from(format!("{}{ext}", src.display()));
            let to = PathBuf::from(format!("{}{ext}", out.display()));
            fs::copy(&from, &to).map_err(|e| Error::io(&from, e))?;
        }
    } else {
        let mut requests: Vec<(CacheKey, String)> = manifest
            .records
            .iter()
            .map(|r| (CacheKey::Image(r.source_id), r.path.display().to_string()))
            .collect();
        requests.extend(descriptions.iter().map(|d| (CacheKey::Text(description_hash(d)), d.clone())));
        let rows = if let Some(cmd) = &args.command {
            run_external(cmd, &requests)?
        } else {
            let fixture = FixtureProvider::new(cfg.ais.fixture_dim, FIXTURE_SEED);
            let mut rows = Vec::with_capacity(requests.len());
            for r in &manifest.records {
                rows.push(fixture.image_embedding(r.source_id, &r.load_rgb()?)?);
            }
            for d in &descriptions {
                rows.push(fixture.text_embedding(d)?);
            }
            rows
        };
        let dim = rows.first().map_or(0, Vec::len);
        let entries: Vec<(CacheKey, Vec<f32>)> = requests.into_iter().map(|(k, _)| k).zip(rows).collect();
        write_cache(&out, dim, &entries)?;
    }
    let check = CacheProvider::load(&out)?;
    println!("teacher_cache={} rows={} dim={}", out.display(), check.len(), check.embed_dim());
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

fn features_for(ck: &Checkpoint, manifest: &Manifest, split: Split) -> Result<FeatureSet> {
    let cfg = &ck.config;
    embed_dataset(
        &ck.model.state.student,
        &ck.model.ais.psi,
        manifest,
        split,
        &cfg.data.augment,
        cfg.optim.batch_size,
    )
}

fn print_retrieval(fs: &FeatureSet, run_dir: &Path) -> Result<()> {
    let report = retrieval_eval(fs)?;
    print!("{}", report.to_text());
    let path = run_dir.join("retrieval.json");
    fs::write(&path, report.to_json().to_string()).map_err(|e| Error::io(&path, e))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = TrainConfig::resolve(cli.config.as_deref(), &cli.overrides)?;
    match &cli.command {
        Command::MakeSynthetic { out } => {
            let run_dir = create_run_dir(&cfg)?;
            let out = out.clone().unwrap_or_else(|| run_dir.join("data"));
            let manifest = generate_synthetic(&cfg.synthetic, &out)?;
            println!("manifest={}", manifest.display());
        }
        Command::CacheTeacher(args) => {
            let run_dir = create_run_dir(&cfg)?;
            cache_teacher(&cfg, args, &run_dir)?;
        }
        Command::Train { resume } => {
            let manifest = load_manifest(&cfg)?;
            let teacher = teacher_from_config(&cfg)?;
            let run_dir = match resume {
                // Continue inside the run that produced the checkpoint.
                Some(ck) => ck
                    .parent()
                    .and_then(Path::parent)
                    .map(Path::to_path_buf)
                    .ok_or_else(|| Error::config("cannot locate the run directory of --resume"))?,
                None => create_run_dir(&cfg)?,
            };
            if resume.is_some() {
                println!("run_dir={}", run_dir.display());
            }
            let outcome = fit(
                &cfg,
                &manifest,
                teacher.as_ref(),
                &run_dir,
                &FitOptions {
                    resume: resume.clone(),
                    stop_after_epochs: None,
                },
            )?;
            println!("checkpoint={}", outcome.final_checkpoint.display());
            println!("steps={} seconds={:.1}", outcome.metrics.len(), outcome.elapsed.as_secs_f64());
        }
        Command::Embed { checkpoint, split, out } => {
            let ck = load_checkpoint(checkpoint)?;
            cfg.model = ck.config.model.clone();
            let run_dir = create_run_dir(&cfg)?;
            let manifest = load_manifest(&cfg)?;
            let split: Split = (*split).into();
            let fs_ = features_for(&ck, &manifest, split)?;
            let out = out.clone().unwrap_or_else(|| run_dir.join("features").join(format!("{split}.ppse")));
            if let Some(parent) = out.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            fs_.write(&out)?;
            println!("features={} rows={} dim={}", out.display(), fs_.len(), fs_.dim);
        }
        Command::EvalRetrieval { features, labels, checkpoint } => {
            let run_dir = create_run_dir(&cfg)?;
            let fs_ = match (features, checkpoint) {
                (Some(f), _) => FeatureSet::read(f, labels.as_deref())?,
                (None, Some(c)) => features_for(&load_checkpoint(c)?, &load_manifest(&cfg)?, Split::Test)?,
                (None, None) => unreachable!("clap requires one of the two"),
            };
            print_retrieval(&fs_, &run_dir)?;
        }
        Command::EvalProbe { checkpoint } => {
            let run_dir = create_run_dir(&cfg)?;
            let ck = load_checkpoint(checkpoint)?;
            let manifest = load_manifest(&cfg)?;
            let train = features_for(&ck, &manifest, Split::Train)?;
            let test = features_for(&ck, &manifest, Split::Test)?;
            let r = linear_probe(
                &train,
                &test,
                &ProbeConfig {
                    fraction: cfg.run.probe_fraction,
                    seed: cfg.run.seed,
                    epochs: cfg.run.probe_epochs,
                    lr: cfg.run.probe_lr,
                },
            )?;
            println!("top1 {:.2}\ntop5 {:.2}\ntrain_samples {}", r.top1, r.top5, r.train_samples);
            let path = run_dir.join("probe.json");
            let json = serde_json::json!({
                "top1": r.top1,
                "top5": r.top5,
                "fraction": cfg.run.probe_fraction,
                "train_samples": r.train_samples,
            });
            fs::write(&path, json.to_string()).map_err(|e| Error::io(&path, e))?;
        }
        Command::Visualize { checkpoint, out } => {
            let run_dir = create_run_dir(&cfg)?;
            let ck = load_checkpoint(checkpoint)?;
            let manifest = load_manifest(&cfg)?;
            let out = out.clone().unwrap_or_else(|| run_dir.join("viz"));
            let files = ppssl::viz::visualize(&ck, &manifest, &out, cfg.run.viz_samples, cfg.run.seed)?;
            println!("viz_dir={} files={}", out.display(), files.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', "; ");
            eprintln!("error kind={}: {msg}", e.kind());
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
