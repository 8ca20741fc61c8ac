use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::{concatenate, Array2, ArrayView2, Axis};

use tpa_core::afpe::{build_base_sequences, encode_positions, PositionEncoderParams};
use tpa_core::analysis::{estimate_period, export_heatmap, lag_similarity, self_similarity, sequence_matrix};
use tpa_core::config::RunConfig;
use tpa_core::container::{read_container, write_container, TensorMap};
use tpa_core::decompose::trend_seasonal;
use tpa_core::features::{FeatureSequence, ModelInput};
use tpa_core::gradcheck::{run_gradcheck, DEFAULT_INSTANCES};
use tpa_core::nn::{Activation, Linear};
use tpa_core::pipeline::eval::evaluate;
use tpa_core::pipeline::model::ModelParams;
use tpa_core::pipeline::train::train_toy;
use tpa_core::pipeline::FrameStage;
use tpa_core::run::{save_run, CONFIG_FILE};
use tpa_core::synth::{build_corpus, gen_identity, gen_sequence, SequenceSpec, SynthConfig};
use tpa_core::{Result, TpaError};

/// Periodic sequence embedding toolkit.
#[derive(Parser)]
#[command(name = "tpa", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fourier basis and position table dumps
    #[command(subcommand)]
    Afpe(AfpeCommand),
    /// Split every tensor of a container into trend and seasonal parts along its last axis
    Decompose(DecomposeArgs),
    /// Synthetic data generation
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Train a model and save checkpoint, metrics and manifest
    Train(TrainArgs),
    /// Gallery/probe retrieval accuracy of a checkpoint
    Eval(EvalArgs),
    /// Periodicity analysis of sequences and learned features
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Compare analytic gradients with finite differences
    Gradcheck(GradcheckArgs),
}

#[derive(Subcommand)]
enum AfpeCommand {
    /// Write the sampled basis (and optionally the encoded table) to a container
    Dump(AfpeDumpArgs),
}

#[derive(Args)]
struct AfpeDumpArgs {
    #[arg(long)]
    seq_len: usize,
    #[arg(long)]
    td: usize,
    #[arg(long)]
    out: PathBuf,
    /// container with `hidden.w`, `hidden.b`, `output.w`, `output.b`
    /// (a model checkpoint with a `position.` prefix also works)
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, default_value = "gelu")]
    activation: String,
}

#[derive(Args)]
struct DecomposeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    window: usize,
    #[arg(long)]
    out_trend: PathBuf,
    #[arg(long)]
    out_seasonal: PathBuf,
}

#[derive(Subcommand)]
enum SynthCommand {
    /// Write synthetic sequences and a manifest (path, id, view, phase, period per line)
    Gen(SynthGenArgs),
}

#[derive(Args)]
struct SynthGenArgs {
    #[arg(long)]
    ids: usize,
    #[arg(long)]
    seqs_per_id: usize,
    #[arg(long)]
    out: PathBuf,
    /// run configuration supplying shapes, periods, noise and data seed
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// extra `key=value` overrides applied after the file
    #[arg(long = "set")]
    overrides: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// defaults to the config.txt stored next to the checkpoint
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    Pre,
    Post,
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Frame self-similarity heatmap of a model's per-frame features
    Similarity(SimilarityArgs),
    /// Estimated period of a raw sequence
    Period(PeriodArgs),
}

#[derive(Args)]
struct SimilarityArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    seq: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "post")]
    stage: Stage,
}

#[derive(Args)]
struct PeriodArgs {
    #[arg(long)]
    seq: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_INSTANCES)]
    instances: usize,
}

fn afpe_dump(a: &AfpeDumpArgs) -> Result<()> {
    let bases = build_base_sequences(a.seq_len, a.td)?;
    let mut out = TensorMap::new();
    out.insert("bases".into(), bases.values.clone().into_dyn());
    if let Some(path) = &a.params {
        let map = read_container(path)?;
        let get = |name: &str| -> Result<Array2<f64>> {
            let t = map
                .get(name)
                .or_else(|| map.get(&format!("position.{name}")))
                .ok_or_else(|| TpaError::domain(format!("{} has no {name} tensor", path.display())))?;
            t.clone()
                .into_dimensionality()
                .map_err(|_| TpaError::domain(format!("{name} must be a matrix")))
        };
        let activation = Activation::parse(&a.activation)
            .ok_or_else(|| TpaError::domain(format!("unknown activation {:?}", a.activation)))?;
        let params = PositionEncoderParams {
            hidden: Linear {
                w: get("hidden.w")?,
                b: get("hidden.b")?,
            },
            output: Linear {
                w: get("output.w")?,
                b: get("output.b")?,
            },
            activation,
        };
        let table = encode_positions(&bases, &params)?;
        out.insert("table".into(), table.values.into_dyn());
    }
    write_container(&out, &a.out)?;
    println!("wrote {} (k = {:?})", a.out.display(), bases.k_indices);
    Ok(())
}

fn decompose(a: &DecomposeArgs) -> Result<()> {
    let map = read_container(&a.input)?;
    let mut trend = TensorMap::new();
    let mut seasonal = TensorMap::new();
    for (name, t) in &map {
        let d = trend_seasonal(t, a.window)?;
        trend.insert(name.clone(), d.trend);
        seasonal.insert(name.clone(), d.seasonal);
    }
    write_container(&trend, &a.out_trend)?;
    write_container(&seasonal, &a.out_seasonal)?;
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map(RunConfig::load).unwrap_or_else(|| Ok(RunConfig::default()))
}

fn synth_gen(a: &SynthGenArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let scfg = SynthConfig::from_run(&cfg);
    fs::create_dir_all(&a.out).map_err(|e| TpaError::io(&a.out, e))?;
    let mut manifest = String::new();
    for id in 0..a.ids {
        let identity = gen_identity(cfg.data_seed.wrapping_mul(1_000_003).wrapping_add(id as u64), id, &scfg)?;
        for k in 0..a.seqs_per_id {
            let seed = cfg.data_seed ^ (((id as u64) << 20) | k as u64);
            let spec = SequenceSpec {
                view: k % cfg.views.max(1),
                phase: (seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 33) as usize % identity.period,
                noise_sigma: cfg.noise,
                length: cfg.seq_len,
                seed,
            };
            let seq = gen_sequence(&identity, &spec, &scfg)?;
            let name = format!("seq_{id:04}_{k:03}.tnsc");
            write_container(&seq.to_tensor_map(), &a.out.join(&name))?;
            manifest.push_str(&format!("{name} {id} {} {} {}\n", spec.view, spec.phase, identity.period));
        }
    }
    let path = a.out.join("manifest.txt");
    fs::write(&path, manifest).map_err(|e| TpaError::io(&path, e))?;
    println!("wrote {} sequences to {}", a.ids * a.seqs_per_id, a.out.display());
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    cfg.apply(&a.overrides.join("\n"))?;
    let corpus = build_corpus(&cfg)?;
    let outcome = train_toy(&corpus, &cfg)?;
    save_run(&a.out, &cfg, &outcome.model, &outcome.log)?;
    if let Some(last) = outcome.log.last() {
        println!("step {} loss {:.4}", last.step, last.loss_total);
    }
    if let Some(e) = &outcome.final_eval {
        println!("held-out rank-1 {:.4}", e.rank1());
    }
    Ok(())
}

/// The explicit config, else `config.txt` next to the checkpoint, else defaults.
fn model_config(model: &Path, explicit: Option<&Path>) -> Result<RunConfig> {
    if let Some(p) = explicit {
        return RunConfig::load(p);
    }
    let sibling = model.parent().map(|d| d.join(CONFIG_FILE));
    match sibling {
        Some(p) if p.exists() => RunConfig::load(&p),
        _ => Ok(RunConfig::default()),
    }
}

fn load_model(model: &Path, config: Option<&Path>) -> Result<(RunConfig, ModelParams)> {
    let cfg = model_config(model, config)?;
    let params = ModelParams::from_tensor_map(&cfg, &read_container(model)?)?;
    Ok((cfg, params))
}

fn eval(a: &EvalArgs) -> Result<()> {
    let (cfg, model) = load_model(&a.model, a.config.as_deref())?;
    let corpus = build_corpus(&cfg)?;
    let r = evaluate(&model, &corpus.gallery, &corpus.probe)?;
    for (k, acc) in &r.rank_k_accuracy {
        println!("rank-{k} {acc:.4}");
    }
    println!("excluded probes {}", r.excluded_probes);
    Ok(())
}

fn load_sequence(path: &Path) -> Result<FeatureSequence> {
    FeatureSequence::from_tensor_map(&read_container(path)?)
}

fn similarity(a: &SimilarityArgs) -> Result<()> {
    let (_, model) = load_model(&a.model, a.config.as_deref())?;
    let seq = load_sequence(&a.seq)?;
    let period = seq.ground_truth_period;
    let stage = match a.stage {
        Stage::Pre => FrameStage::Pre,
        Stage::Post => FrameStage::Post,
    };
    let parts = model.frame_features(&ModelInput::Features(seq), stage)?;
    let views: Vec<ArrayView2<f64>> = parts.iter().map(|p| p.view()).collect();
    let frames = concatenate(Axis(1), &views).map_err(|e| TpaError::domain(e.to_string()))?;
    let matrix = self_similarity(&frames)?;
    let (csv, pgm) = export_heatmap(&matrix, &a.out)?;
    println!("wrote {} and {}", csv.display(), pgm.display());
    match estimate_period(&frames) {
        Some(p) => println!("estimated period {p}"),
        None => println!("estimated period none"),
    }
    if let Some(p) = period {
        if let Some(s) = lag_similarity(&frames, p) {
            println!("similarity at lag {p}: {s:.4}");
        }
    }
    Ok(())
}

fn period(a: &PeriodArgs) -> Result<()> {
    let seq = load_sequence(&a.seq)?;
    match estimate_period(&sequence_matrix(&seq)) {
        Some(p) => println!("{p}"),
        None => println!("none"),
    }
    Ok(())
}

/// Returns whether every check passed.
fn gradcheck(a: &GradcheckArgs) -> Result<bool> {
    let report = run_gradcheck(a.seed, a.instances)?;
    for m in report.modules.iter().chain(std::iter::once(&report.end_to_end)) {
        println!(
            "{:<20} max relative error {:.2e} (limit {:.0e}, {} instances) {}",
            m.name,
            m.max_error,
            m.tolerance,
            m.instances,
            if m.passed() { "ok" } else { "FAILED" }
        );
    }
    println!("elapsed {:.1}s", report.elapsed.as_secs_f64());
    Ok(report.passed())
}

fn dispatch(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Afpe(AfpeCommand::Dump(a)) => afpe_dump(a).map(|_| true),
        Command::Decompose(a) => decompose(a).map(|_| true),
        Command::Synth(SynthCommand::Gen(a)) => synth_gen(a).map(|_| true),
        Command::Train(a) => train(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::Analyze(AnalyzeCommand::Similarity(a)) => similarity(a).map(|_| true),
        Command::Analyze(AnalyzeCommand::Period(a)) => period(a).map(|_| true),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
