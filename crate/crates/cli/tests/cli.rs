use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TOY: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/toy.toml");

fn mvlt(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvlt"))
        .args(args)
        .env("MVLT_RUN_ROOT", root)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn only_run(root: &Path, suffix: &str) -> PathBuf {
    let runs: Vec<PathBuf> = fs::read_dir(root)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_string_lossy().ends_with(suffix))
        .collect();
    assert_eq!(runs.len(), 1, "{runs:?}");
    runs[0].clone()
}

#[test]
fn unknown_flag_exits_2_naming_it() {
    let root = tempfile::tempdir().unwrap();
    let out = mvlt(root.path(), &["pretrain", "-c", TOY, "--learning_rate=0.1"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("learning_rate"), "{}", stderr(&out));
    let out = mvlt(root.path(), &["pretrain", "--frobnicate"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("frobnicate"));
    assert_eq!(code(&mvlt(root.path(), &["no-such-command"])), 2);
}

#[test]
fn incompatible_alpha_is_a_validation_error() {
    let root = tempfile::tempdir().unwrap();
    let out = mvlt(root.path(), &["pretrain", "-c", TOY, "--alpha=3"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("alpha"));
    assert!(fs::read_dir(root.path()).unwrap().next().is_none());
}

#[test]
fn help_lists_every_key() {
    let root = tempfile::tempdir().unwrap();
    for args in [&["--help"][..], &["pretrain", "--help"]] {
        let out = mvlt(root.path(), args);
        assert_eq!(code(&out), 0);
        let text = stdout(&out);
        for (key, default, _) in mvlt_core::config::KEY_DOCS {
            assert!(text.contains(key), "{key} missing");
            assert!(text.contains(&format!("[default: {default}]")), "{key} default missing");
        }
    }
}

#[test]
fn zero_step_pretrain_writes_initial_checkpoint() {
    let root = tempfile::tempdir().unwrap();
    let out = mvlt(root.path(), &["pretrain", "-c", TOY, "--steps=0"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let run = only_run(root.path(), "seed2024-pretrain");
    let name = run.file_name().unwrap().to_string_lossy().into_owned();
    assert!(name.chars().take(8).all(|c| c.is_ascii_digit()), "{name}");
    assert!(run.join("checkpoints/final.ckpt").is_file());
    assert!(run.join("vocab.txt").is_file());
    let archived = fs::read_to_string(run.join("config.toml")).unwrap();
    let cfg = mvlt_core::config::RunConfig::parse(&archived, &[]).unwrap();
    assert_eq!(cfg.steps, 0);
    assert_eq!(cfg.image_size, 32);
}

#[test]
fn grad_check_passes_on_toy_config() {
    let root = tempfile::tempdir().unwrap();
    let out = mvlt(root.path(), &["grad-check", "-c", TOY]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    let text = stdout(&out);
    for op in mvlt_core::gradcheck::PRIMITIVES.iter().chain(mvlt_core::gradcheck::LOSS_HEADS.iter()) {
        let line = text.lines().find(|l| l.split_whitespace().next() == Some(op)).unwrap_or_else(|| panic!("{op}"));
        assert!(line.contains("max rel err") && line.ends_with("ok"), "{line}");
    }
}

#[test]
fn pipeline_from_pretrain_to_evaluation() {
    let root = tempfile::tempdir().unwrap();
    let small = ["-c", TOY, "--synth_products=12", "--batch_size=4"];
    let pre = |extra: &[&str]| {
        let args: Vec<&str> = ["pretrain"].iter().chain(&small).chain(extra).copied().collect();
        mvlt(root.path(), &args)
    };
    let out = pre(&["--steps=3", "--min_itm_accuracy=1.01"]);
    assert_eq!(code(&out), 3, "threshold above 1 cannot pass");
    assert!(stdout(&out).contains("ITM accuracy"));
    let out = pre(&["--steps=3", "--seed=5"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ckpt = only_run(root.path(), "seed5-pretrain").join("checkpoints/final.ckpt");
    let ckpt = ckpt.to_str().unwrap();

    let out = mvlt(root.path(), &["eval-recognition", "--checkpoint", ckpt]);
    assert_eq!(code(&out), 2, "no head before fine-tuning");

    let out = mvlt(root.path(), &["eval-retrieval", "--checkpoint", ckpt, "--negative_pool=all-products", "--n_neg=5"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let run = only_run(root.path(), "eval-retrieval");
    assert!(stdout(&out).starts_with("TIR: R@1"));
    let sets = fs::read_to_string(run.join("retrieval_sets.csv")).unwrap();
    assert_eq!(sets.lines().next(), Some("query,candidates,rank"));
    assert!(sets.lines().skip(1).all(|l| l.split(',').nth(1) == Some("6")));
    let out = mvlt(root.path(), &["eval-retrieval", "--checkpoint", ckpt, "--min_recall_at_1=100.01"]);
    assert_eq!(code(&out), 3);

    let out = mvlt(root.path(), &["finetune", "--checkpoint", ckpt, "--finetune_steps=3"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let tuned = only_run(root.path(), "finetune").join("checkpoints/final.ckpt");
    let out = mvlt(root.path(), &["eval-recognition", "--checkpoint", tuned.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).starts_with("main: accuracy"));

    let out = mvlt(root.path(), &["reconstruct", "--checkpoint", ckpt]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let images = only_run(root.path(), "reconstruct").join("images");
    let csv = fs::read_to_string(images.join("scores.csv")).unwrap();
    let pngs = fs::read_dir(&images).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png")).count();
    assert_eq!(pngs, 3 * (csv.lines().count() - 1));
}

#[test]
fn archived_config_reproduces_the_run() {
    let root = tempfile::tempdir().unwrap();
    let args = ["pretrain", "-c", TOY, "--synth_products=8", "--batch_size=2", "--steps=3"];
    assert_eq!(code(&mvlt(root.path(), &args)), 0);
    let first = only_run(root.path(), "pretrain");
    let archived = first.join("config.toml");
    let other = tempfile::tempdir().unwrap();
    let out = mvlt(other.path(), &["pretrain", "-c", archived.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let second = only_run(other.path(), "pretrain");
    for file in ["metrics.csv", "checkpoints/final.ckpt", "vocab.txt"] {
        assert_eq!(fs::read(first.join(file)).unwrap(), fs::read(second.join(file)).unwrap(), "{file}");
    }
}

#[test]
fn synth_writes_a_loadable_manifest() {
    let root = tempfile::tempdir().unwrap();
    let out = mvlt(root.path(), &["synth", "--synth_products=5", "--image_size=32", "--alpha=2"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let manifest = PathBuf::from(stdout(&out).trim());
    let ds = mvlt_core::data::Dataset::load(&manifest, 32).unwrap();
    assert_eq!(ds.len(), 5);
    let out = mvlt(
        root.path(),
        &["pretrain", "-c", TOY, &format!("--manifest={}", manifest.display()), "--steps=1", "--batch_size=2"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}
