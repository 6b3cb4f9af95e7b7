use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod spectrogram;

/// Raw-waveform flow matching: preprocessing, training, generation, evaluation
/// and curation.
#[derive(Debug, Parser)]
#[command(name = "rawflow", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Lift a WAV file into the training amplitude domain.
    Preprocess(PreprocessArgs),
    /// Train a model from a flat TOML config.
    Train(TrainArgs),
    /// Sample clips from a checkpoint for each row of an event manifest.
    Generate(GenerateArgs),
    /// Compare generated and reference WAV directories.
    Evaluate(EvaluateArgs),
    /// Segment, filter, augment and balance a labelled source manifest.
    Curate(CurateArgs),
    /// Verify model gradients against central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    pub input: PathBuf,
    pub output: PathBuf,
    /// Lift scale s_a.
    #[arg(long, default_value_t = 3.0)]
    pub scale: f64,
    /// Target RMS before clamping.
    #[arg(long, default_value_t = 0.33)]
    pub r_star: f64,
    /// Skip RMS normalization; only clamp and scale.
    #[arg(long)]
    pub no_rms: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Flat TOML config; built-in toy settings when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override a config key, `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, default_value_t = 100)]
    pub log_every: u64,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// One `class t1,t2,...` line per clip (`-` for no events).
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long = "cfg", default_value_t = 4.5)]
    pub cfg_scale: f64,
    #[arg(long, default_value = "vt2a")]
    pub mode: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Use the live weights instead of the EMA weights.
    #[arg(long)]
    pub live: bool,
    #[arg(long, default_value_t = -23.0, allow_hyphen_values = true)]
    pub target_lufs: f64,
    #[arg(long)]
    pub no_normalize: bool,
    #[arg(long)]
    pub no_png: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub generated: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long, default_value = "mel")]
    pub embedder: String,
    /// `file<TAB>label` lines naming the class of each reference clip.
    #[arg(long)]
    pub ref_labels: Option<PathBuf>,
    /// Write the report here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CurateArgs {
    /// `path<TAB>label` lines; paths are relative to the manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    pub max_silence: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub silence_threshold: f64,
    #[arg(long, default_value_t = 8.0)]
    pub clip_secs: f64,
    /// Two overlapping chunks from sources too short for a second segment.
    #[arg(long)]
    pub augment: bool,
    /// Balance accepted clips to this many items.
    #[arg(long)]
    pub balance_target: Option<usize>,
    /// `label<TAB>weight` reference histogram; uniform over seen labels when omitted.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write accepted clips as WAV files here.
    #[arg(long)]
    pub clips_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// `toy` (d=16, heads=2, one joint and one fused block, C=8, D=4) or `tiny`.
    #[arg(long, default_value = "toy")]
    pub dims: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Corrupt one analytic gradient to confirm the check can fail.
    #[arg(long, hide = true)]
    pub inject_bad_grad: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Preprocess(a) => commands::preprocess(&a),
        Command::Train(a) => commands::train(&a),
        Command::Generate(a) => commands::generate(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Curate(a) => commands::curate(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
