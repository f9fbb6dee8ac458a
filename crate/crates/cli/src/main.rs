//! `mvlt` command-line entry point.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use mvlt_core::checkpoint::Checkpoint;
use mvlt_core::config::{key_help, RunConfig};
use mvlt_core::data::{generate_synthetic, SyntheticSpec};
use mvlt_core::eval::{
    build_candidate_sets, evaluate_recognition, evaluate_retrieval, mig_dump, write_csv,
};
use mvlt_core::gradcheck::{end_to_end_finite, head_suite, primitive_suite, GRAD_TOLERANCE};
use mvlt_core::model::{CheckpointHeader, Mvlt};
use mvlt_core::rng::rng_for;
use mvlt_core::text::Vocab;
use mvlt_core::train::{finetune_category, pretrain, pretrain_accuracy, RunOutput, FINAL_CHECKPOINT};
use mvlt_core::{Error, ParamStore};

/// Environment variable naming the directory that holds run directories.
const RUN_ROOT_VAR: &str = "MVLT_RUN_ROOT";
const ACCURACY_BATCHES: usize = 8;

#[derive(Parser, Debug)]
#[command(name = "mvlt", version, about = "Masked vision-language transformer for fashion retrieval and recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// TOML run configuration; keys not given take their defaults.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// `--key=value` overrides of configuration keys.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(clap::Args, Debug)]
struct WithCheckpoint {
    /// Model checkpoint to load.
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic catalogue as PNG files plus a manifest.
    Synth(Common),
    /// Pre-train with reconstruction, matching and masked-language losses.
    Pretrain {
        /// Start from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a category head on top of a checkpoint.
    Finetune(WithCheckpoint),
    /// Zero-shot text/image retrieval with the matching head.
    EvalRetrieval(WithCheckpoint),
    /// Category recognition with a fine-tuned head.
    EvalRecognition(WithCheckpoint),
    /// Mask every image, reconstruct it, and dump PNGs with scores.
    Reconstruct(WithCheckpoint),
    /// Finite-difference checks of every primitive and loss head.
    GradCheck {
        /// Random instances per primitive.
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[command(flatten)]
        common: Common,
    },
}

fn after_help() -> String {
    format!(
        "Configuration keys (set in --config or as --key=value):\n{}\nRun directories go under ${RUN_ROOT_VAR} (default ./runs).\n\
         Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or flag, 3 failed threshold.",
        key_help()
    )
}

/// Failure categories mapped to exit codes.
#[derive(Debug)]
enum Failure {
    Invalid(String),
    Threshold(String),
    Other(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<Error>() {
            Some(Error::Config(_) | Error::InvalidArgument(_)) => Failure::Invalid(format!("{e:#}")),
            _ => Failure::Other(e),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::from(anyhow::Error::new(e))
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

/// Splits `--key=value` (or bare `--flag`, meaning true) arguments.
fn parse_overrides(args: &[String]) -> Outcome<Vec<(String, String)>> {
    args.iter()
        .map(|a| {
            let body = a
                .strip_prefix("--")
                .ok_or_else(|| Failure::Invalid(format!("unexpected argument `{a}`; overrides take the form --key=value")))?;
            let (k, v) = body.split_once('=').unwrap_or((body, "true"));
            Ok((k.replace('-', "_"), v.to_string()))
        })
        .collect()
}

fn load_config(common: &Common, base: Option<&str>) -> Outcome<RunConfig> {
    let text = match (&common.config, base) {
        (Some(path), _) => fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
        (None, Some(archived)) => archived.to_string(),
        (None, None) => String::new(),
    };
    let overrides = parse_overrides(&common.overrides)?;
    let cfg = RunConfig::parse(&text, &overrides).map_err(|e| match common.config.as_deref() {
        Some(p) => Failure::Invalid(format!("{}: {e}", p.display())),
        None => Failure::from(e),
    })?;
    Ok(cfg)
}

/// Creates `<root>/<timestamp>-seed<seed>`, adding a suffix on collision.
fn run_dir(cfg: &RunConfig, command: &str) -> anyhow::Result<PathBuf> {
    let root = std::env::var_os(RUN_ROOT_VAR).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
    fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = format!("{stamp}-seed{}-{command}", cfg.seed);
    for n in 0.. {
        let name = if n == 0 { base.clone() } else { format!("{base}-{n}") };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => {
                fs::write(dir.join("config.toml"), cfg.to_toml())?;
                log::info!("run directory {}", dir.display());
                return Ok(dir);
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e).with_context(|| format!("creating {}", dir.display())),
        }
    }
    unreachable!()
}

fn write_report(dir: &Path, name: &str, text: &str) -> anyhow::Result<()> {
    print!("{text}");
    fs::write(dir.join(name), text)?;
    Ok(())
}

fn check_threshold(label: &str, value: f64, min: Option<f64>) -> Outcome<()> {
    match min {
        Some(m) if value < m => Err(Failure::Threshold(format!("{label} {value:.4} is below the required {m}"))),
        _ => Ok(()),
    }
}

struct Loaded {
    model: Mvlt,
    store: ParamStore,
    header: CheckpointHeader,
    vocab: Vocab,
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Loaded> {
    let ckpt = Checkpoint::load(path)?;
    let (model, store, header) = Mvlt::from_checkpoint(&ckpt)?;
    let vocab = Vocab::from_text(&header.vocab, path)?;
    Ok(Loaded {
        model,
        store,
        header,
        vocab,
    })
}

fn synth(common: &Common) -> Outcome<()> {
    let cfg = load_config(common, None)?;
    let dir = run_dir(&cfg, "synth")?;
    let manifest = generate_synthetic(&dir.join("data"), cfg.synth_products, cfg.image_size, &SyntheticSpec::default(), cfg.seed)?;
    println!("{}", manifest.display());
    Ok(())
}

fn run_pretrain(init: Option<&Path>, common: &Common) -> Outcome<()> {
    let cfg = load_config(common, None)?;
    let dataset = cfg.dataset()?;
    let vocab = cfg.vocab(&dataset)?;
    let model_cfg = cfg.model_config(&vocab)?;
    let (model, mut store) = Mvlt::new(&model_cfg, cfg.seed)?;
    if let Some(path) = init {
        let report = mvlt_core::checkpoint::load_matching(&mut store, &Checkpoint::load(path)?);
        log::info!("initialized from {}: {report:?}", path.display());
    }
    let dir = run_dir(&cfg, "pretrain")?;
    vocab.save(&dir.join("vocab.txt"))?;
    let settings = cfg.pretrain_settings();
    let run_toml = cfg.to_toml();
    let out = RunOutput {
        dir: &dir,
        run_config: &run_toml,
        vocab: &vocab,
    };
    let history = pretrain(&model, &mut store, &dataset, &vocab, &settings, Some(&out))?;
    let mut text = format!(
        "pre-trained {} steps on {} products ({} parameters)\n",
        history.len(),
        dataset.len(),
        store.num_elements()
    );
    if let Some(last) = history.last() {
        text += &format!(
            "final loss {:.4} (mir {:.4}, itm {:.4}, mlm {:.4})\n",
            last.total, last.mir, last.itm, last.mlm
        );
    }
    let wants_accuracy = cfg.min_itm_accuracy.is_some() || cfg.min_mlm_accuracy.is_some();
    let mut accuracy = None;
    if wants_accuracy {
        let acc = pretrain_accuracy(&model, &store, &dataset, &vocab, &settings, ACCURACY_BATCHES, cfg.seed)?;
        text += &format!(
            "ITM accuracy {:.4} over {} pairs, MLM accuracy {:.4} over {} tokens\n",
            acc.itm, acc.itm_pairs, acc.mlm, acc.mlm_tokens
        );
        accuracy = Some(acc);
    }
    text += &format!("checkpoint {}\n", dir.join("checkpoints").join(FINAL_CHECKPOINT).display());
    write_report(&dir, "pretrain.txt", &text)?;
    if let Some(acc) = accuracy {
        check_threshold("ITM accuracy", acc.itm, cfg.min_itm_accuracy)?;
        check_threshold("MLM accuracy", acc.mlm, cfg.min_mlm_accuracy)?;
    }
    Ok(())
}

fn run_finetune(args: &WithCheckpoint) -> Outcome<()> {
    let Loaded {
        mut model,
        mut store,
        header,
        vocab,
    } = load_checkpoint(&args.checkpoint)?;
    let cfg = load_config(&args.common, Some(&header.run))?;
    let dataset = cfg.dataset()?;
    let dir = run_dir(&cfg, "finetune")?;
    let report = finetune_category(&mut model, &mut store, &dataset, &vocab, cfg.granularity, &cfg.finetune_settings())?;
    let ckpt_dir = dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(anyhow::Error::from)?;
    let ckpt_path = ckpt_dir.join(FINAL_CHECKPOINT);
    model.checkpoint(&store, &cfg.to_toml(), &vocab.to_text()).save(&ckpt_path)?;
    let rec = evaluate_recognition(&model, &store, &dataset, &vocab, cfg.granularity)?;
    let text = format!(
        "fine-tuned {} head for {} steps, final loss {:.4}, training accuracy {:.4}\n{}checkpoint {}\n",
        cfg.granularity,
        report.losses.len(),
        report.losses.last().copied().unwrap_or(f64::NAN as _),
        report.train_accuracy,
        rec.to_text(cfg.granularity.as_str()),
        ckpt_path.display()
    );
    write_report(&dir, "finetune.txt", &text)?;
    check_threshold("accuracy", rec.accuracy, cfg.min_accuracy)
}

fn run_retrieval(args: &WithCheckpoint) -> Outcome<()> {
    let Loaded {
        model,
        store,
        header,
        vocab,
    } = load_checkpoint(&args.checkpoint)?;
    let cfg = load_config(&args.common, Some(&header.run))?;
    let dataset = cfg.dataset()?;
    let dir = run_dir(&cfg, "eval-retrieval")?;
    let sets = build_candidate_sets(&dataset, &cfg.candidate_options(), &mut rng_for(cfg.seed, "candidates", 0))?;
    let (report, outcomes) = evaluate_retrieval(&model, &store, &dataset, &vocab, &sets)?;
    write_csv(&dir.join("retrieval_sets.csv"), &outcomes)?;
    write_csv(&dir.join("retrieval.csv"), std::slice::from_ref(&report))?;
    write_report(&dir, "retrieval.txt", &format!("{}\n", report.to_text()))?;
    check_threshold("R@1", report.r1, cfg.min_recall_at_1)
}

fn run_recognition(args: &WithCheckpoint) -> Outcome<()> {
    let Loaded {
        model,
        store,
        header,
        vocab,
    } = load_checkpoint(&args.checkpoint)?;
    let cfg = load_config(&args.common, Some(&header.run))?;
    if model.head(cfg.granularity).is_none() {
        return Err(Failure::Invalid(format!(
            "checkpoint {} has no {} head; run finetune first",
            args.checkpoint.display(),
            cfg.granularity
        )));
    }
    let dataset = cfg.dataset()?;
    let dir = run_dir(&cfg, "eval-recognition")?;
    let rec = evaluate_recognition(&model, &store, &dataset, &vocab, cfg.granularity)?;
    write_csv(&dir.join("recognition.csv"), std::slice::from_ref(&rec))?;
    let names = match cfg.granularity {
        mvlt_core::model::Granularity::Main => &dataset.main_names,
        mvlt_core::model::Granularity::Sub => &dataset.sub_names,
    };
    let per_class: Vec<_> = names.iter().cloned().zip(rec.per_class_f1.iter().copied()).collect();
    write_csv(&dir.join("recognition_per_class.csv"), &per_class)?;
    write_report(&dir, "recognition.txt", &rec.to_text(cfg.granularity.as_str()))?;
    check_threshold("accuracy", rec.accuracy, cfg.min_accuracy)
}

fn run_reconstruct(args: &WithCheckpoint) -> Outcome<()> {
    let Loaded {
        model,
        store,
        header,
        vocab,
    } = load_checkpoint(&args.checkpoint)?;
    let cfg = load_config(&args.common, Some(&header.run))?;
    let dataset = cfg.dataset()?;
    let dir = run_dir(&cfg, "reconstruct")?;
    let out = dir.join("images");
    let rows = mig_dump(&model, &store, &dataset, &vocab, &cfg.mig_settings(), &out)?;
    let mean = rows.iter().map(|r| r.smooth_l1).sum::<f64>() / rows.len().max(1) as f64;
    write_report(
        &dir,
        "reconstruct.txt",
        &format!("reconstructed {} images, mean smooth-l1 {mean:.5}\n{}\n", rows.len(), out.display()),
    )?;
    Ok(())
}

fn run_grad_check(instances: usize, common: &Common) -> Outcome<()> {
    let cfg = load_config(common, None)?;
    if instances == 0 {
        return Err(Failure::Invalid("--instances must be positive".into()));
    }
    let mut outcomes = primitive_suite(cfg.seed, instances)?;
    outcomes.extend(head_suite(cfg.seed, instances)?);
    let mut failed = Vec::new();
    for o in &outcomes {
        let verdict = if o.passed() { "ok" } else { "FAIL" };
        println!("{:<24} {:>3} instances  max rel err {:.3e}  {verdict}", o.name, o.instances, o.max_rel_error);
        if !o.passed() {
            failed.push(o.name);
        }
    }
    let finite = end_to_end_finite(cfg.seed)?;
    println!("{:<24} {}", "toy model gradients", if finite { "finite" } else { "NON-FINITE" });
    println!("tolerance {GRAD_TOLERANCE:.0e}");
    if !finite {
        failed.push("toy model gradients");
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Threshold(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn run(cli: Cli) -> Outcome<()> {
    match &cli.command {
        Command::Synth(c) => synth(c),
        Command::Pretrain { init, common } => run_pretrain(init.as_deref(), common),
        Command::Finetune(a) => run_finetune(a),
        Command::EvalRetrieval(a) => run_retrieval(a),
        Command::EvalRecognition(a) => run_recognition(a),
        Command::Reconstruct(a) => run_reconstruct(a),
        Command::GradCheck { instances, common } => run_grad_check(*instances, common),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let help = after_help();
    let mut cmd = Cli::command().after_help(help.clone());
    let names: Vec<String> = cmd.get_subcommands().map(|c| c.get_name().to_string()).collect();
    for name in names {
        cmd = cmd.mut_subcommand(name, |c| c.after_help(help.clone()));
    }
    let cli = match cmd.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Threshold(msg)) => {
            eprintln!("threshold failed: {msg}");
            ExitCode::from(3)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
