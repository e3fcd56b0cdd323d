use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ctxdub::data::store::{read_corpus, read_manifest, read_matrix};
use tempfile::TempDir;

const SMALL: &str = r#"
k_list = [1, 4]

[data]
seed = 3
count = 6
held_out = 2
[data.shape]
vocab = 12
d_lip = 6
d_face = 4
n_mels = 8
min_phonemes = 2
max_phonemes = 5
min_frames_per_phoneme = 1
max_frames_per_phoneme = 2

[model]
dim = 8
n_heads = 2
ffn_dim = 16
descriptors = 3
postnet_dim = 8
postnet_kernel = 3

[train]
batch_size = 2
stage1_steps = 3
stage2_steps = 4
save_every = 2
"#;

fn ctxdub(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctxdub")).args(args).output().expect("binary runs")
}

struct Run {
    dir: TempDir,
    config: PathBuf,
}

impl Run {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, config).unwrap();
        Self { dir, config: path }
    }

    fn out(&self) -> &Path {
        self.dir.path()
    }

    fn run(&self, cmd: &str, extra: &[&str]) -> Output {
        let mut args = vec![cmd, "--config", self.config.to_str().unwrap(), "--out", self.out().to_str().unwrap()];
        args.extend_from_slice(extra);
        ctxdub(&args)
    }

    fn ok(&self, cmd: &str, extra: &[&str]) -> String {
        let o = self.run(cmd, extra);
        assert!(o.status.success(), "{cmd} failed: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    }

    fn trained(&self) -> PathBuf {
        self.ok("gen-data", &[]);
        self.ok("train", &[]);
        self.out().join("checkpoints/stage2.ckpt")
    }
}

fn tree_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn gen_data_is_byte_identical_per_seed() {
    let a = Run::new(SMALL);
    let b = Run::new(SMALL);
    a.ok("gen-data", &[]);
    b.ok("gen-data", &[]);
    assert_eq!(tree_bytes(&a.out().join("data")), tree_bytes(&b.out().join("data")));
    let corpus = read_corpus(&a.out().join("data")).unwrap();
    assert_eq!(corpus.samples.len(), 6);
    assert!(!read_manifest(&a.out().join("data")).unwrap().is_empty());

    let c = Run::new(SMALL);
    c.ok("gen-data", &["--seed", "4"]);
    assert_ne!(tree_bytes(&a.out().join("data")), tree_bytes(&c.out().join("data")));
}

#[test]
fn config_errors_exit_with_2() {
    let bad_key = Run::new("[model]\nwidth = 3\n");
    assert_eq!(bad_key.run("gen-data", &[]).status.code(), Some(2));
    let bad_ratio = Run::new("[data]\nsr = 16000\nhs = 150\nfps = 25\n");
    assert_eq!(bad_ratio.run("gen-data", &[]).status.code(), Some(2));
    let run = Run::new(SMALL);
    assert_eq!(run.run("gen-data", &["--k", "0"]).status.code(), Some(2));
    assert_eq!(run.run("evaluate", &[]).status.code(), Some(1));
}

#[test]
fn train_writes_logs_and_checkpoints() {
    let run = Run::new(SMALL);
    let stage2 = run.trained();
    assert!(stage2.exists());
    let ckpts = run.out().join("checkpoints");
    for name in ["stage1.ckpt", "step000002.ckpt", "step000004.ckpt", "step000006.ckpt"] {
        assert!(ckpts.join(name).exists(), "{name} missing");
    }
    let log = fs::read_to_string(run.out().join("loss_log.jsonl")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 7);
    assert!(lines[0].contains("\"stage\":1") && lines[6].contains("\"stage\":2") && lines[6].contains("\"step\":7"));
    assert!(fs::read_to_string(run.out().join("config.toml")).unwrap().contains("stage2_steps = 4"));

    let again = run.ok("train", &["--checkpoint", ckpts.join("step000004.ckpt").to_str().unwrap()]);
    assert!(again.contains("step 7"));
    let log = fs::read_to_string(run.out().join("loss_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 7);
    assert_eq!(log.lines().take(4).collect::<Vec<_>>(), lines[..4]);
}

#[test]
fn incompatible_checkpoint_exits_with_4() {
    let run = Run::new(SMALL);
    let ckpt = run.trained();
    let other = Run::new(&SMALL.replace("dim = 8", "dim = 12"));
    other.ok("gen-data", &[]);
    let o = other.run("synthesize", &["--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));

    let corrupt = run.out().join("corrupt.ckpt");
    let mut bytes = fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    fs::write(&corrupt, bytes).unwrap();
    assert_eq!(run.run("evaluate", &["--checkpoint", corrupt.to_str().unwrap()]).status.code(), Some(4));
}

#[test]
fn synthesis_matches_current_lengths_and_is_deterministic() {
    let run = Run::new(SMALL);
    let ckpt = run.trained();
    let ck = ckpt.to_str().unwrap();
    run.ok("synthesize", &["--checkpoint", ck, "--split", "all"]);
    let corpus = read_corpus(&run.out().join("data")).unwrap();
    let n = corpus.frame_cfg.n();
    let mut first = Vec::new();
    for (i, s) in corpus.samples.iter().enumerate() {
        let m = read_matrix(&run.out().join(format!("synth/{}.arr", ctxdub::data::synth::Corpus::sample_id(i)))).unwrap();
        assert_eq!(m.shape(), (n * s.current.lip_feats.rows(), 8));
        first.push(m);
    }
    run.ok("synthesize", &["--checkpoint", ck, "--split", "all"]);
    let again: Vec<_> = (0..6)
        .map(|i| read_matrix(&run.out().join(format!("synth/{}.arr", ctxdub::data::synth::Corpus::sample_id(i)))).unwrap())
        .collect();
    assert_eq!(first, again);

    run.ok("synthesize", &["--checkpoint", ck, "--split", "all", "--no-cad-context"]);
    let ablated = read_matrix(&run.out().join(format!("synth/{}.arr", ctxdub::data::synth::Corpus::sample_id(0)))).unwrap();
    assert_ne!(ablated, first[0]);
}

#[test]
fn evaluation_reports_one_row_per_sample() {
    let run = Run::new(SMALL);
    let ckpt = run.trained();
    run.ok("evaluate", &["--checkpoint", ckpt.to_str().unwrap()]);
    let tsv = fs::read_to_string(run.out().join("eval.tsv")).unwrap();
    let lines: Vec<&str> = tsv.lines().collect();
    assert_eq!(lines[0], "id\tgpe\tffe");
    assert_eq!(lines.len(), 1 + 2 + 1);
    assert!(lines.last().unwrap().starts_with("mean\t"));

    run.ok("evaluate", &["--reference", "--split", "train"]);
    let tsv = fs::read_to_string(run.out().join("eval.tsv")).unwrap();
    let rows: Vec<&str> = tsv.lines().skip(1).collect();
    assert_eq!(rows.len(), 4 + 1);
    for row in rows {
        let cols: Vec<&str> = row.split('\t').collect();
        assert_eq!(&cols[1..], ["0.0000", "0.0000"], "{row}");
    }
}

#[test]
fn k_sweep_writes_a_row_per_k() {
    let run = Run::new(SMALL);
    run.ok("gen-data", &[]);
    let out = run.ok("k-sweep", &["--no-two-stage"]);
    let tsv = fs::read_to_string(run.out().join("k_sweep.tsv")).unwrap();
    assert_eq!(out, tsv);
    let lines: Vec<&str> = tsv.lines().collect();
    assert_eq!(lines[0], "k\tgpe\tffe\tl_sum");
    assert_eq!(lines.iter().skip(1).map(|l| l.split('\t').next().unwrap()).collect::<Vec<_>>(), ["1", "4"]);
}
