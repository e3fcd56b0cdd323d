use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context as _, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ctxdub::checkpoint::Checkpoint;
use ctxdub::config::{Preset, RunConfig};
use ctxdub::data::store::{read_corpus, write_corpus, write_matrix};
use ctxdub::data::synth::{generate_synthetic_corpus, Corpus};
use ctxdub::error::Error;
use ctxdub::experiment::{evaluate, k_sweep, synthesize_sample, EvalReport, EvalRow};
use ctxdub::metrics::pitch_from_mel;
use ctxdub::model::Model;
use ctxdub::prosody::ProsodyTrack;
use ctxdub::training::{prepare_all, Trainer};

/// Context-aware video dubbing: synthetic data, training, synthesis and
/// evaluation.
#[derive(Parser)]
#[command(name = "ctxdub", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus under <out>/data.
    GenData(Common),
    /// Train (stage 1 on single sentences, then stage 2 with context).
    Train(Common),
    /// Write current-sentence mels for a corpus split under <out>/synth.
    Synthesize(Common),
    /// Score a checkpoint with GPE/FFE and write <out>/eval.tsv.
    Evaluate(Common),
    /// Train and evaluate once per K and write <out>/k_sweep.tsv.
    KSweep(Common),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    HeldOut,
    All,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds both data generation and training.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Corpus directory (default: <out>/data).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Maximum context length in phonemes per neighbouring sentence.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_parser = ["toy", "paper"])]
    preset: Option<String>,
    #[arg(long)]
    no_prev: bool,
    #[arg(long)]
    no_fol: bool,
    #[arg(long)]
    no_cpp: bool,
    #[arg(long)]
    no_cda_context: bool,
    #[arg(long)]
    no_cad_context: bool,
    #[arg(long)]
    no_two_stage: bool,
    /// Checkpoint to resume from (train) or to use (synthesize, evaluate).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "held-out")]
    split: Split,
    /// Score the ground-truth mels instead of a checkpoint (evaluate only).
    #[arg(long)]
    reference: bool,
}

impl Common {
    fn run_config(&self) -> Result<RunConfig, Error> {
        let preset = self.preset.as_deref().map(str::parse::<Preset>).transpose()?;
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path, preset)?,
            None => RunConfig::preset(preset.unwrap_or(Preset::Toy)),
        };
        if let Some(seed) = self.seed {
            cfg.data.seed = seed;
            cfg.train.seed = seed;
        }
        if let Some(k) = self.k {
            cfg.context.k = k;
        }
        cfg.context.use_prev &= !self.no_prev;
        cfg.context.use_fol &= !self.no_fol;
        cfg.ablation.no_cpp |= self.no_cpp;
        cfg.ablation.no_cda_context |= self.no_cda_context;
        cfg.ablation.no_cad_context |= self.no_cad_context;
        cfg.two_stage &= !self.no_two_stage;
        cfg.validate()?;
        Ok(cfg)
    }

    fn data_dir(&self) -> PathBuf {
        self.data.clone().unwrap_or_else(|| self.out.join("data"))
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::InvalidConfig(_) | Error::InvalidShapeConfig(_) | Error::NonIntegerRatio(_)) => 2,
        Some(Error::DivergenceDetected { .. }) => 3,
        Some(Error::IncompatibleCheckpoint(_)) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(c) => gen_data(c),
        Command::Train(c) => train(c),
        Command::Synthesize(c) => synthesize(c),
        Command::Evaluate(c) => evaluate_cmd(c),
        Command::KSweep(c) => sweep(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen_data(c: &Common) -> Result<()> {
    let cfg = c.run_config()?;
    let corpus = generate_synthetic_corpus(cfg.data.seed, cfg.data.count, cfg.data.frame()?, cfg.data.shape)?;
    corpus.validate()?;
    let dir = c.data_dir();
    create_dir(&dir)?;
    write_corpus(&dir, &corpus)?;
    read_corpus(&dir)?;
    println!("wrote {} samples to {}", corpus.samples.len(), dir.display());
    Ok(())
}

fn load_corpus(c: &Common, cfg: &RunConfig) -> Result<(Corpus, Corpus)> {
    let corpus = read_corpus(&c.data_dir())?;
    if corpus.shape != cfg.data.shape || corpus.frame_cfg != cfg.data.frame()? {
        return Err(Error::InvalidConfig("corpus on disk was generated with different shapes or rates".into()).into());
    }
    if cfg.data.held_out >= corpus.samples.len() {
        return Err(Error::InvalidConfig(format!(
            "held_out = {} leaves no training samples out of {}",
            cfg.data.held_out,
            corpus.samples.len()
        ))
        .into());
    }
    Ok(corpus.split_tail(cfg.data.held_out))
}

fn pick_split(c: &Common, train: Corpus, held: Corpus) -> Corpus {
    match c.split {
        Split::Train => train,
        Split::HeldOut => held,
        Split::All => Corpus { samples: [train.samples, held.samples].concat(), ..train },
    }
}

fn train(c: &Common) -> Result<()> {
    let cfg = c.run_config()?;
    let (train_set, _) = load_corpus(c, &cfg)?;
    let ckpt_dir = c.out.join("checkpoints");
    create_dir(&ckpt_dir)?;
    write_text(&c.out.join("config.toml"), &cfg.to_toml())?;

    let single = prepare_all(&train_set.sentences(), &cfg.context);
    let context = prepare_all(&train_set, &cfg.context);
    let stage1_end = if cfg.two_stage { cfg.train.stage1_steps } else { 0 };
    let total = stage1_end + cfg.train.stage2_steps;

    let mut trainer = match &c.checkpoint {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let model = Model::new(cfg.model, cfg.train.seed)?;
            Trainer::from_checkpoint(model, &ckpt, cfg.train, cfg.ablation)?
        }
        None => Trainer::new(Model::new(cfg.model, cfg.train.seed)?, cfg.train, cfg.ablation)?,
    };
    let log_path = c.out.join("loss_log.jsonl");
    // One line per step, so a resumed run keeps the first `step` lines.
    let mut log_text: String = match &c.checkpoint {
        Some(_) => fs::read_to_string(&log_path)
            .unwrap_or_default()
            .lines()
            .take(trainer.step as usize)
            .flat_map(|l| [l, "\n"])
            .collect(),
        None => String::new(),
    };

    let save = |t: &Trainer| t.checkpoint().save(&ckpt_dir.join(format!("step{:06}.ckpt", t.step)));
    let outcome = (|| -> Result<(), Error> {
        if trainer.stage == 1 && cfg.two_stage && trainer.step < stage1_end {
            trainer.run(&single, stage1_end - trainer.step, save)?;
        }
        if trainer.stage == 1 {
            let stage1_path = ckpt_dir.join("stage1.ckpt");
            if cfg.two_stage {
                trainer.checkpoint().save(&stage1_path)?;
                let log = std::mem::take(&mut trainer.log);
                trainer = Trainer::stage2_from(&Checkpoint::load(&stage1_path)?, cfg.train, cfg.ablation)?;
                trainer.log = log;
            } else {
                trainer.begin_stage2();
            }
        }
        trainer.run(&context, total.saturating_sub(trainer.step), save)
    })();

    for rec in &trainer.log {
        log_text.push_str(&rec.to_line());
        log_text.push('\n');
    }
    write_text(&log_path, &log_text)?;
    if let Err(e) = outcome {
        let path = ckpt_dir.join("last_good.ckpt");
        trainer.checkpoint().save(&path)?;
        eprintln!("saved last good state to {}", path.display());
        return Err(e.into());
    }
    let final_path = ckpt_dir.join(format!("stage{}.ckpt", trainer.stage));
    trainer.checkpoint().save(&final_path)?;
    if let Some(last) = trainer.log.last() {
        println!("step {} l_sum {:.6}", last.step, last.loss.l_sum);
    }
    println!("wrote {}", final_path.display());
    Ok(())
}

fn load_model(c: &Common, cfg: &RunConfig) -> Result<Model> {
    let Some(path) = &c.checkpoint else { bail!(Error::InvalidConfig("--checkpoint is required".into())) };
    let mut model = Model::new(cfg.model, 0)?;
    Checkpoint::load(path)?.restore(&mut model, None)?;
    Ok(model)
}

fn synthesize(c: &Common) -> Result<()> {
    let cfg = c.run_config()?;
    let model = load_model(c, &cfg)?;
    let (train_set, held) = load_corpus(c, &cfg)?;
    let offset = if c.split == Split::HeldOut { train_set.samples.len() } else { 0 };
    let split = pick_split(c, train_set, held);
    let dir = c.out.join("synth");
    create_dir(&dir)?;
    for i in 0..split.samples.len() {
        let mel = synthesize_sample(&model, &split, i, &cfg.context, cfg.ablation)?;
        write_matrix(&dir.join(format!("{}.arr", Corpus::sample_id(offset + i))), &mel)?;
    }
    println!("wrote {} mels to {}", split.samples.len(), dir.display());
    Ok(())
}

fn evaluate_cmd(c: &Common) -> Result<()> {
    let cfg = c.run_config()?;
    let (train_set, held) = load_corpus(c, &cfg)?;
    let offset = if c.split == Split::HeldOut { train_set.samples.len() } else { 0 };
    let split = pick_split(c, train_set, held);
    let mut report = if c.reference {
        reference_report(&split)?
    } else {
        evaluate(&load_model(c, &cfg)?, &split, &cfg.context, cfg.ablation)?
    };
    for (i, row) in report.rows.iter_mut().enumerate() {
        row.id = Corpus::sample_id(offset + i);
    }
    create_dir(&c.out)?;
    write_text(&c.out.join("eval.tsv"), &report.to_tsv())?;
    let (gpe, ffe) = report.mean();
    println!("mean gpe {gpe:.4} ffe {ffe:.4} over {} samples", report.rows.len());
    Ok(())
}

/// Ground truth scored against itself, through the same mel decoding path.
fn reference_report(split: &Corpus) -> Result<EvalReport> {
    let map = split.stats.pitch_map.as_ref();
    let rows = split
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let hyp = pitch_from_mel(&s.current.mel, map)?;
            let (gpe, ffe) = ctxdub::experiment::compare_tracks(&ProsodyTrack::pitch(s.current.pitch.clone()), &hyp)?;
            Ok(EvalRow { id: Corpus::sample_id(i), gpe, ffe })
        })
        .collect::<Result<Vec<_>, Error>>()?;
    Ok(EvalReport { rows })
}

fn sweep(c: &Common) -> Result<()> {
    let cfg = c.run_config()?;
    let (train_set, held) = load_corpus(c, &cfg)?;
    let model = Model::new(cfg.model, cfg.train.seed)?;
    let report = k_sweep(&model, &train_set, &held, &cfg.context, &cfg.k_list, cfg.train, cfg.ablation, cfg.two_stage)?;
    create_dir(&c.out)?;
    write_text(&c.out.join("k_sweep.tsv"), &report.to_tsv())?;
    print!("{}", report.to_tsv());
    Ok(())
}
