//! Subcommand orchestration. Exit codes: 0 success, 1 usage error, 2 data or
//! configuration contract violation, 3 numerical failure.

use std::cell::RefCell;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::{checkpoint_dtype, load_checkpoint, save_checkpoint, ScalarCodec};
use crate::config::load_config;
use crate::error::{contract, CliError, Result};
use crate::exports::{
    write_ablation_csv, write_correlation_csvs, write_embeddings, write_eval_csv, AblationRow,
    AmrProbeWriter, TrainLogWriter, AMR_PROBE_FILE, TRAIN_LOG_FILE,
};
use crate::manifest::{load_manifest, DatasetManifest};
use crate::records::{load_dataset, load_split};
use crate::synth::{generate_to_dir, SynthSpec};
use mmer_core::data::{Dataset, Sample};
use mmer_core::gradcheck;
use mmer_core::model::{Model, ModelConfig};
use mmer_core::nn::ForwardMode;
use mmer_core::train::{apply_checkpoint, evaluate_model, train, Checkpoint};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Parser, Debug)]
#[command(
    name = "mmer",
    version,
    about = "Multi-modal multi-label emotion recognition: data generation, training, evaluation, and diagnostics"
)]
pub struct Cli {
    /// Overrides the seed from the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Directory for generated artifacts (logs, checkpoints, exports).
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,

    /// Element precision for model parameters and checkpoints.
    #[arg(long, global = true, value_enum, default_value_t = Precision::F64)]
    pub precision: Precision,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a seeded synthetic dataset (manifest + binary splits).
    GenSynth(GenSynthArgs),
    /// Train on a dataset; writes train_log.csv, amr_probe.csv, checkpoint.bin.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Run the ablation grid and write a comparison CSV.
    Ablate(AblateArgs),
    /// Export per-head label correlation matrices as CSV.
    ExportCorrelations(ExportCorrelationsArgs),
    /// Export fused representations of probe samples as raw matrices.
    ExportEmbeddings(ExportEmbeddingsArgs),
    /// Verify analytic gradients against central finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Args, Debug)]
pub struct GenSynthArgs {
    /// Output directory for manifest.json and the split files.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub visual_dim: usize,
    #[arg(long, default_value_t = 8)]
    pub audio_dim: usize,
    #[arg(long, default_value_t = 12)]
    pub text_dim: usize,
    /// Sets all three sequence lengths at once.
    #[arg(long)]
    pub len: Option<usize>,
    #[arg(long, default_value_t = 10)]
    pub visual_len: usize,
    #[arg(long, default_value_t = 10)]
    pub audio_len: usize,
    #[arg(long, default_value_t = 10)]
    pub text_len: usize,
    /// Store per-record native lengths instead of one aligned length.
    #[arg(long)]
    pub unaligned: bool,
    #[arg(long, default_value_t = 6)]
    pub labels: usize,
    #[arg(long, default_value_t = 200)]
    pub train: usize,
    #[arg(long, default_value_t = 50)]
    pub valid: usize,
    #[arg(long, default_value_t = 50)]
    pub test: usize,
    #[arg(long, default_value_t = 0.5)]
    pub noise: f64,
    #[arg(long, default_value_t = 3.0)]
    pub amplitude: f64,
    #[arg(long, default_value_t = 0.3)]
    pub base_rate: f64,
    #[arg(long, default_value_t = 0.4)]
    pub cooccur_boost: f64,
    /// How many modalities each label's pattern spans (1..=3).
    #[arg(long, default_value_t = 2)]
    pub pattern_modalities: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Manifest file or dataset directory.
    #[arg(long)]
    pub manifest: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Optional CSV report path.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output CSV (defaults to <out-dir>/ablation.csv).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExportCorrelationsArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Export raw pre-softmax scores instead of row-softmaxed influences.
    #[arg(long)]
    pub raw: bool,
}

#[derive(Args, Debug)]
pub struct ExportEmbeddingsArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "valid")]
    pub split: String,
    /// How many samples to export.
    #[arg(long, default_value_t = 32)]
    pub count: usize,
    /// Output file (defaults to <out-dir>/embeddings.bin).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradCheckArgs {
    /// Seed for the randomized check inputs.
    #[arg(long, default_value_t = 20240)]
    pub check_seed: u64,
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenSynth(args) => gen_synth(&cli, args),
        Command::Train(args) => match cli.precision {
            Precision::F64 => train_cmd::<f64>(&cli, args),
            Precision::F32 => train_cmd::<f32>(&cli, args),
        },
        Command::Eval(args) => match cli.precision {
            Precision::F64 => eval_cmd::<f64>(&cli, args),
            Precision::F32 => eval_cmd::<f32>(&cli, args),
        },
        Command::Ablate(args) => match cli.precision {
            Precision::F64 => ablate_cmd::<f64>(&cli, args),
            Precision::F32 => ablate_cmd::<f32>(&cli, args),
        },
        Command::ExportCorrelations(args) => match cli.precision {
            Precision::F64 => export_correlations_cmd::<f64>(&cli, args),
            Precision::F32 => export_correlations_cmd::<f32>(&cli, args),
        },
        Command::ExportEmbeddings(args) => match cli.precision {
            Precision::F64 => export_embeddings_cmd::<f64>(&cli, args),
            Precision::F32 => export_embeddings_cmd::<f32>(&cli, args),
        },
        Command::GradCheck(args) => grad_check_cmd(args),
    }
}

fn load_setup<S: ScalarCodec>(
    cli: &Cli,
    config_path: &PathBuf,
    manifest_path: &PathBuf,
) -> Result<(ModelConfig, DatasetManifest, PathBuf, Dataset<S>)> {
    let mut config = load_config(config_path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let (manifest, dir) = load_manifest(manifest_path)?;
    let dataset = load_dataset::<S>(&manifest, &dir)?;
    Ok((config, manifest, dir, dataset))
}

fn build_model<S: ScalarCodec>(
    config: ModelConfig,
    manifest: &DatasetManifest,
) -> Result<Model<S>> {
    Model::new(config, manifest.dims()).map_err(CliError::from)
}

fn gen_synth(cli: &Cli, args: &GenSynthArgs) -> Result<()> {
    let (visual_len, audio_len, text_len) = match args.len {
        Some(n) => (n, n, n),
        None => (args.visual_len, args.audio_len, args.text_len),
    };
    let spec = SynthSpec {
        visual_dim: args.visual_dim,
        audio_dim: args.audio_dim,
        text_dim: args.text_dim,
        visual_len,
        audio_len,
        text_len,
        aligned: !args.unaligned,
        labels: args.labels,
        train: args.train,
        valid: args.valid,
        test: args.test,
        noise: args.noise,
        amplitude: args.amplitude,
        base_rate: args.base_rate,
        cooccur_boost: args.cooccur_boost,
        pattern_modalities: args.pattern_modalities,
    };
    let seed = cli.seed.unwrap_or(0);
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| cli.out_dir.join("dataset"));
    let manifest = generate_to_dir(&spec, seed, &out)?;
    println!(
        "generated {} ({} instances, {} labels, {}) in {}",
        manifest.name,
        manifest.instance_count,
        manifest.label_names.len(),
        if spec.aligned { "aligned" } else { "unaligned" },
        out.display()
    );
    Ok(())
}

/// Shared by train and ablate: run one training with CSV logging, return the
/// best checkpoint plus validation/test metrics at that checkpoint.
pub fn run_training<S: ScalarCodec>(
    config: ModelConfig,
    manifest: &DatasetManifest,
    dataset: &Dataset<S>,
    out_dir: &PathBuf,
    quiet: bool,
) -> Result<(Checkpoint<S>, mmer_core::metrics::EvalReport, Option<mmer_core::metrics::EvalReport>)>
{
    fs::create_dir_all(out_dir)?;
    let model = build_model::<S>(config, manifest)?;
    let probe: Vec<Sample<S>> = dataset
        .valid
        .iter()
        .take(64)
        .map(|s| Sample {
            visual: s.visual.clone(),
            audio: s.audio.clone(),
            text: s.text.clone(),
            labels: s.labels.clone(),
        })
        .collect();

    let mut log = TrainLogWriter::create(&out_dir.join(TRAIN_LOG_FILE))?;
    let mut probe_log = AmrProbeWriter::create(&out_dir.join(AMR_PROBE_FILE))?;
    let observer_error: RefCell<Option<CliError>> = RefCell::new(None);

    let outcome = train(&model, dataset, &mut |stats, live_model| {
        let mut io = || -> Result<()> {
            log.append(stats)?;
            let probe_stats = live_model.discriminator_probe(&probe)?;
            probe_log.append(stats.epoch, &probe_stats)?;
            Ok(())
        };
        if let Err(e) = io() {
            *observer_error.borrow_mut() = Some(e);
            return false;
        }
        if !quiet {
            println!(
                "epoch {:>4}  L_All {:>12.6}  L_ml {:>12.6}  val micro-F1 {:.4}",
                stats.epoch, stats.losses.total, stats.losses.ml, stats.val.micro_f1
            );
        }
        true
    })?;
    if let Some(e) = observer_error.into_inner() {
        return Err(e);
    }

    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    save_checkpoint(&ckpt_path, &outcome.best)?;

    if let Some(reason) = outcome.aborted {
        return Err(CliError::Numerical(format!(
            "training aborted ({reason}); last-good checkpoint kept at {}",
            ckpt_path.display()
        )));
    }

    // metrics at the best checkpoint
    let best_model = build_model::<S>(config, manifest)?;
    apply_checkpoint(&best_model, &outcome.best)?;
    let val = evaluate_model(&best_model, &dataset.valid)?;
    let test = if dataset.test.is_empty() {
        None
    } else {
        Some(evaluate_model(&best_model, &dataset.test)?)
    };
    Ok((outcome.best, val, test))
}

fn train_cmd<S: ScalarCodec>(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let (config, manifest, _dir, dataset) = load_setup::<S>(cli, &args.config, &args.manifest)?;
    let started = Instant::now();
    let (best, val, test) = run_training(config, &manifest, &dataset, &cli.out_dir, false)?;
    println!(
        "best epoch {}: val acc {:.4} p {:.4} r {:.4} micro-F1 {:.4}",
        best.epoch, val.accuracy, val.precision, val.recall, val.micro_f1
    );
    if let Some(t) = test {
        println!(
            "test at best: acc {:.4} p {:.4} r {:.4} micro-F1 {:.4}",
            t.accuracy, t.precision, t.recall, t.micro_f1
        );
    }
    println!(
        "wrote {}, {}, {} in {:.1}s",
        cli.out_dir.join(TRAIN_LOG_FILE).display(),
        cli.out_dir.join(AMR_PROBE_FILE).display(),
        cli.out_dir.join(CHECKPOINT_FILE).display(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

fn restore_model<S: ScalarCodec>(
    cli: &Cli,
    config_path: &PathBuf,
    manifest_path: &PathBuf,
    checkpoint_path: &PathBuf,
) -> Result<(Model<S>, DatasetManifest, PathBuf)> {
    let mut config = load_config(config_path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let (manifest, dir) = load_manifest(manifest_path)?;
    let dtype = checkpoint_dtype(checkpoint_path)?;
    if dtype != S::NAME {
        return Err(contract(format!(
            "checkpoint {} holds {dtype} values; rerun with --precision {dtype}",
            checkpoint_path.display()
        )));
    }
    let ck = load_checkpoint::<S>(checkpoint_path)?;
    let model = build_model::<S>(config, &manifest)?;
    apply_checkpoint(&model, &ck)?;
    Ok((model, manifest, dir))
}

fn eval_cmd<S: ScalarCodec>(cli: &Cli, args: &EvalArgs) -> Result<()> {
    let (model, manifest, dir) =
        restore_model::<S>(cli, &args.config, &args.manifest, &args.checkpoint)?;
    let samples = load_split::<S>(&manifest, &dir, &args.split)?;
    if samples.is_empty() {
        return Err(contract(format!("split {} is empty", args.split)));
    }
    let report = evaluate_model(&model, &samples)?;
    println!(
        "{}: acc {:.4} p {:.4} r {:.4} micro-F1 {:.4}",
        args.split, report.accuracy, report.precision, report.recall, report.micro_f1
    );
    if let Some(path) = &args.report {
        write_eval_csv(path, &args.split, &report)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// The ablation grid: row name plus the flag edits applied to the base
/// configuration (whose own ablation flags are reset first).
pub fn ablation_grid() -> Vec<(&'static str, fn(&mut ModelConfig))> {
    vec![
        ("wo_amr", |c| c.ablation.disable_amr = true),
        ("psi_vtac", |c| {
            c.ablation.fusion_order = mmer_core::fusion::FusionOrder::parse("vtac").expect("order")
        }),
        ("psi_atvc", |c| {
            c.ablation.fusion_order = mmer_core::fusion::FusionOrder::parse("atvc").expect("order")
        }),
        ("wo_mte", |c| c.ablation.disable_token_embeddings = true),
        ("identical_head", |c| c.ablation.identical_head = true),
        ("w_le", |c| {
            c.ablation.disable_label_correlation = true;
            c.ablation.disable_label_modal_attention = true;
        }),
        ("w_le_lc", |c| {
            c.ablation.disable_label_modal_attention = true;
        }),
        ("full", |_| {}),
    ]
}

fn ablate_cmd<S: ScalarCodec>(cli: &Cli, args: &AblateArgs) -> Result<()> {
    let (base_config, manifest, _dir, dataset) =
        load_setup::<S>(cli, &args.config, &args.manifest)?;
    let out_path = args
        .out
        .clone()
        .unwrap_or_else(|| cli.out_dir.join("ablation.csv"));
    fs::create_dir_all(&cli.out_dir)?;

    let mut rows = Vec::new();
    for (name, edit) in ablation_grid() {
        let mut config = base_config;
        config.ablation = Default::default();
        edit(&mut config);
        let row_dir = cli.out_dir.join(format!("ablate_{name}"));
        println!("ablation row {name} ...");
        let (_, val, test) = run_training::<S>(config, &manifest, &dataset, &row_dir, true)?;
        println!(
            "  {name}: val micro-F1 {:.4}{}",
            val.micro_f1,
            test.map(|t| format!(", test micro-F1 {:.4}", t.micro_f1))
                .unwrap_or_default()
        );
        rows.push(AblationRow {
            name: name.to_string(),
            val,
            test,
        });
    }
    write_ablation_csv(&out_path, &rows)?;
    println!("wrote {}", out_path.display());
    Ok(())
}

fn export_correlations_cmd<S: ScalarCodec>(
    cli: &Cli,
    args: &ExportCorrelationsArgs,
) -> Result<()> {
    let (model, manifest, _dir) =
        restore_model::<S>(cli, &args.config, &args.manifest, &args.checkpoint)?;
    let correlations = model.label_correlations()?;
    let paths = write_correlation_csvs(
        &cli.out_dir,
        &correlations,
        &manifest.label_names,
        args.raw,
    )?;
    println!(
        "wrote {} correlation matrices under {}",
        paths.len(),
        cli.out_dir.display()
    );
    Ok(())
}

fn export_embeddings_cmd<S: ScalarCodec>(cli: &Cli, args: &ExportEmbeddingsArgs) -> Result<()> {
    let (model, manifest, dir) =
        restore_model::<S>(cli, &args.config, &args.manifest, &args.checkpoint)?;
    let samples = load_split::<S>(&manifest, &dir, &args.split)?;
    if samples.is_empty() {
        return Err(contract(format!("split {} is empty", args.split)));
    }
    let mut mats = Vec::new();
    let mut mode = ForwardMode::Eval;
    for sample in samples.iter().take(args.count) {
        let mut tape = mmer_core::Tape::new();
        let out = model.forward_sample(&mut tape, sample, &mut mode)?;
        let (rows, cols) = out.fused.dims2();
        let data: Vec<f32> = out.fused.to_vec().iter().map(|v| v.to_f64() as f32).collect();
        mats.push((rows, cols, data));
    }
    fs::create_dir_all(&cli.out_dir)?;
    let out_path = args
        .out
        .clone()
        .unwrap_or_else(|| cli.out_dir.join("embeddings.bin"));
    write_embeddings(&out_path, &mats)?;
    println!("wrote {} fused matrices to {}", mats.len(), out_path.display());
    Ok(())
}

fn grad_check_cmd(args: &GradCheckArgs) -> Result<()> {
    let started = Instant::now();
    let mut all = gradcheck::primitive_suite(args.check_seed)?;
    all.extend(gradcheck::composite_check(args.check_seed)?);
    all.extend(gradcheck::full_model_check(args.check_seed)?);
    let mut failed = 0;
    for r in &all {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        if !r.passed() {
            failed += 1;
        }
        println!(
            "{status}  {:<40} max_err {:>12.3e}  tol {:>8.0e}",
            r.name, r.max_err, r.tolerance
        );
    }
    println!(
        "{} checks, {} failed, {:.2}s",
        all.len(),
        failed,
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        return Err(CliError::Numerical(format!(
            "{failed} gradient checks failed"
        )));
    }
    Ok(())
}
