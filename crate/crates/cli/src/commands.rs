use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use rawflow::audio::{
    amplitude_lift, clamp_and_scale, integrated_loudness, normalize_loudness, read_wav, rms, write_wav,
    write_wav_f32, LiftConfig, WaveformBuffer,
};
use rawflow::conditioning::{parse_event_manifest, ConditionBundle};
use rawflow::curate::{
    augment_overlap, balance_categories, parse_source_manifest, segment_stream, ClipRecord, FilterRules,
    RejectReason,
};
use rawflow::eval::{evaluate_sets, MelEmbedder};
use rawflow::flow::SamplerConfig;
use rawflow::generate::{grid_to_waveform, sample_grid, ClipMeta, GenerateMode};
use rawflow::gradcheck::{gradcheck_with, GradcheckConfig};
use rawflow::model::{checkpoint_digest, load_checkpoint, save_checkpoint};
use rawflow::train::{train as run_training, TrainConfig};

use crate::spectrogram;
use crate::{CurateArgs, EvaluateArgs, GenerateArgs, GradcheckArgs, PreprocessArgs, TrainArgs};

#[derive(Debug)]
pub enum CliError {
    /// Bad input, configuration or I/O. Exit code 2.
    Usage(String),
    /// Numeric failure or a failed verification. Exit code 1.
    Failure(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => 2,
            Self::Failure(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usage(m) | Self::Failure(m) => f.write_str(m),
        }
    }
}

impl From<rawflow::Error> for CliError {
    fn from(e: rawflow::Error) -> Self {
        match e {
            rawflow::Error::Numeric(_) | rawflow::Error::Invariant(_) => Self::Failure(e.to_string()),
            _ => Self::Usage(e.to_string()),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn io_err(path: &Path, e: impl fmt::Display) -> CliError {
    CliError::Usage(format!("{}: {e}", path.display()))
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn create_dir(path: &Path) -> CliResult {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn load_wav(path: &Path) -> CliResult<WaveformBuffer> {
    read_wav(path).map_err(|e| io_err(path, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("plain data serializes")
}

#[derive(Serialize)]
struct PreprocessSidecar {
    rms_before: f64,
    rms_after: f64,
    sample_rate: u32,
    samples: usize,
    scale: f64,
    r_star: Option<f64>,
}

pub fn preprocess(a: &PreprocessArgs) -> CliResult {
    let input = load_wav(&a.input)?;
    let lift = LiftConfig { r_star: a.r_star, s_a: a.scale, ..LiftConfig::default() };
    lift.validate()?;
    let out = if a.no_rms { clamp_and_scale(&input, a.scale) } else { amplitude_lift(&input, &lift) };
    // Lifted samples exceed ±1, so the file is written as float.
    write_wav_f32(&out, &a.output).map_err(|e| io_err(&a.output, e))?;
    let sidecar = PreprocessSidecar {
        rms_before: rms(&input),
        rms_after: rms(&out),
        sample_rate: out.sample_rate(),
        samples: out.len(),
        scale: a.scale,
        r_star: (!a.no_rms).then_some(a.r_star),
    };
    let mut side = a.output.clone().into_os_string();
    side.push(".json");
    write_text(Path::new(&side), &to_json(&sidecar))
}

#[derive(Serialize)]
struct TrainSummary {
    steps: u64,
    first10_loss: f64,
    last100_loss: f64,
    seconds: f64,
    checkpoint: PathBuf,
    checkpoint_sha256: String,
}

pub fn train(a: &TrainArgs) -> CliResult {
    let text = match &a.config {
        Some(p) => read_text(p)?,
        None => TrainConfig::toy().to_toml()?,
    };
    let mut overrides = a.overrides.clone();
    if let Some(seed) = a.seed {
        overrides.push(format!("seed={seed}"));
    }
    let cfg = TrainConfig::from_toml(&text, &overrides)?;
    create_dir(&a.out)?;
    write_text(&a.out.join("config.toml"), &cfg.to_toml()?)?;

    let items = cfg.items()?;
    let csv_path = a.out.join("loss.csv");
    let mut csv = String::from("step,lr,loss,grad_norm\n");
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    let start = Instant::now();
    let result = run_training(&cfg, &items, |s| {
        csv.push_str(&format!("{},{:e},{:e},{:e}\n", s.step, s.lr, s.loss, s.grad_norm));
        losses.push(s.loss);
        if !a.quiet && (s.step == 1 || s.step % a.log_every.max(1) == 0 || s.step == cfg.steps) {
            eprintln!("step {:>6}  loss {:.5}  grad {:.4}  lr {:.2e}", s.step, s.loss, s.grad_norm, s.lr);
        }
    });
    // The log is kept even when training aborts, so the failing step is visible.
    write_text(&csv_path, &csv)?;
    let state = result?;

    let ck_path = a.out.join("checkpoint.rwfl");
    let bytes = save_checkpoint(&ck_path, &state.checkpoint(&cfg)?).map_err(|e| io_err(&ck_path, e))?;
    let mean = |s: &[f64]| if s.is_empty() { f64::NAN } else { s.iter().sum::<f64>() / s.len() as f64 };
    let summary = TrainSummary {
        steps: state.step,
        first10_loss: mean(&losses[..losses.len().min(10)]),
        last100_loss: mean(&losses[losses.len().saturating_sub(100)..]),
        seconds: start.elapsed().as_secs_f64(),
        checkpoint: ck_path,
        checkpoint_sha256: checkpoint_digest(&bytes),
    };
    println!("{}", to_json(&summary));
    Ok(())
}

#[derive(Serialize)]
struct GeneratedClip {
    file: String,
    class_id: usize,
    event_times: Vec<f64>,
    /// Loudness after normalization; absent when the clip is too short to measure.
    lufs: Option<f64>,
}

#[derive(Serialize)]
struct GenerateSummary {
    mode: GenerateMode,
    steps: usize,
    cfg_scale: f64,
    seed: u64,
    weights: &'static str,
    clips: Vec<GeneratedClip>,
}

pub fn generate(a: &GenerateArgs) -> CliResult {
    let mode: GenerateMode = a.mode.parse()?;
    let sampler = SamplerConfig { steps: a.steps, cfg_scale: a.cfg_scale, ..SamplerConfig::default() };
    sampler.validate()?;
    let ck = load_checkpoint(&a.checkpoint).map_err(|e| match e {
        rawflow::Error::Io(io) => io_err(&a.checkpoint, io),
        other => other.into(),
    })?;
    let meta = ClipMeta::from_checkpoint(&ck)?;
    let model = if a.live {
        ck.live_model()?
            .ok_or_else(|| CliError::Usage("checkpoint holds no live weights".into()))?
    } else {
        ck.model.clone()
    };
    let cond_cfg = model.config().cond;
    let events = parse_event_manifest(&read_text(&a.manifest)?, meta.clip_len)?;
    create_dir(&a.out)?;

    let tokens = meta.tokens(model.config().patch);
    let mut clips = Vec::with_capacity(events.len());
    for (i, ev) in events.iter().enumerate() {
        let bundle = ConditionBundle::synthesize(ev, &cond_cfg)?;
        // One stream per row, so a row's output does not depend on its neighbours.
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64));
        let grid = sample_grid(&model, &bundle, mode, &sampler, tokens, &mut rng)?;
        let mut wave = grid_to_waveform(grid, meta.clip_samples, meta.sample_rate, meta.s_a)?;
        let mut lufs = None;
        if !a.no_normalize && wave.duration_secs() >= 0.4 {
            wave = normalize_loudness(&wave, a.target_lufs)?;
            lufs = Some(integrated_loudness(&wave)?).filter(|l| l.is_finite());
        }
        let name = format!("clip_{i:04}");
        let wav_path = a.out.join(format!("{name}.wav"));
        write_wav(&wave, &wav_path).map_err(|e| io_err(&wav_path, e))?;
        if !a.no_png {
            spectrogram::write_png(&wave, &a.out.join(format!("{name}.png"))).map_err(CliError::Usage)?;
        }
        clips.push(GeneratedClip {
            file: format!("{name}.wav"),
            class_id: ev.class_id,
            event_times: ev.event_times.clone(),
            lufs,
        });
    }
    let summary = GenerateSummary {
        mode,
        steps: a.steps,
        cfg_scale: a.cfg_scale,
        seed: a.seed,
        weights: if a.live { "live" } else { "ema" },
        clips,
    };
    write_text(&a.out.join("generate.json"), &to_json(&summary))?;
    if summary.clips.iter().any(|c| c.lufs.is_none()) && !a.no_normalize {
        eprintln!("note: clips shorter than 400 ms are written without loudness normalization");
    }
    Ok(())
}

fn wav_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    if files.is_empty() {
        return Err(io_err(dir, "no WAV files"));
    }
    files.sort();
    Ok(files)
}

pub fn evaluate(a: &EvaluateArgs) -> CliResult {
    if !matches!(a.embedder.as_str(), "mel" | MelEmbedder::NAME) {
        return Err(CliError::Usage(format!("unknown embedder `{}` (available: mel)", a.embedder)));
    }
    let gen_files = wav_files(&a.generated)?;
    let ref_files = wav_files(&a.reference)?;
    let gen = gen_files.iter().map(|p| load_wav(p)).collect::<CliResult<Vec<_>>>()?;
    let refs = ref_files.iter().map(|p| load_wav(p)).collect::<CliResult<Vec<_>>>()?;

    let labels = match &a.ref_labels {
        None => None,
        Some(path) => {
            let by_file: BTreeMap<String, String> = parse_source_manifest(&read_text(path)?)?.into_iter().collect();
            let names: Vec<String> = by_file.values().cloned().collect::<std::collections::BTreeSet<_>>().into_iter().collect();
            let ids = ref_files
                .iter()
                .map(|p| {
                    let f = p.file_name().unwrap_or_default().to_string_lossy().to_string();
                    let l = by_file.get(&f).ok_or_else(|| CliError::Usage(format!("no label for reference clip {f}")))?;
                    Ok(names.iter().position(|n| n == l).expect("label drawn from the same map"))
                })
                .collect::<CliResult<Vec<_>>>()?;
            Some((ids, names.len()))
        }
    };
    let report = evaluate_sets(&gen, &refs, labels.as_ref().map(|(ids, k)| (ids.as_slice(), *k)))?;
    let json = to_json(&report);
    if let Some(out) = &a.out {
        write_text(out, &json)?;
    }
    println!("{json}");
    Ok(())
}

fn read_reference(path: &Path) -> CliResult<BTreeMap<String, f64>> {
    let mut map = BTreeMap::new();
    for (label, weight) in parse_source_manifest(&read_text(path)?)? {
        let w: f64 = weight
            .parse()
            .map_err(|_| CliError::Usage(format!("{}: weight `{weight}` for `{label}` is not a number", path.display())))?;
        map.insert(label, w);
    }
    Ok(map)
}

#[derive(Serialize)]
struct CurateSummary {
    sources: usize,
    clips: usize,
    accepted: usize,
    augmented_sources: usize,
    balance_shortfall: Option<usize>,
}

pub fn curate(a: &CurateArgs) -> CliResult {
    let rules = FilterRules {
        max_silence_fraction: a.max_silence,
        silence_amp_threshold: a.silence_threshold,
        ..FilterRules::default()
    };
    rules.validate()?;
    let sources = parse_source_manifest(&read_text(&a.manifest)?)?;
    let base = a.manifest.parent().unwrap_or(Path::new("."));

    let mut clips: Vec<ClipRecord> = Vec::new();
    let mut augmented = 0;
    for (rel, label) in &sources {
        let buf = load_wav(&base.join(rel))?;
        let segs = segment_stream(rel, label, &buf, a.clip_secs)?;
        if a.augment && segs.len() == 1 {
            if let Ok(pair) = augment_overlap(rel, label, &buf) {
                clips.extend(pair);
                augmented += 1;
                continue;
            }
        }
        clips.extend(segs);
    }
    rules.apply(&mut clips)?;

    let mut shortfall = None;
    if let Some(target) = a.balance_target {
        let accepted: Vec<usize> = (0..clips.len()).filter(|&i| clips[i].accepted()).collect();
        if !accepted.is_empty() {
            let pool: Vec<ClipRecord> = accepted.iter().map(|&i| clips[i].clone()).collect();
            let reference = match &a.reference {
                Some(p) => read_reference(p)?,
                None => pool.iter().map(|c| (c.label.clone(), 1.0)).collect(),
            };
            let out = balance_categories(&pool, &reference, target, a.seed)?;
            let keep: std::collections::BTreeSet<usize> = out.indices.iter().map(|&j| accepted[j]).collect();
            for &i in &accepted {
                if !keep.contains(&i) {
                    clips[i].rejection = Some(RejectReason::Unbalanced);
                }
            }
            if out.shortfall > 0 {
                eprintln!("warning: balancing fell {} clips short of the target {target}", out.shortfall);
            }
            shortfall = Some(out.shortfall);
        }
    }

    let mut text = String::from("# source\toffset\tduration\tlabel\tstatus\treason\n");
    for c in &clips {
        text.push_str(&c.manifest_line());
        text.push('\n');
    }
    write_text(&a.out, &text)?;

    if let Some(dir) = &a.clips_dir {
        create_dir(dir)?;
        for (i, c) in clips.iter().enumerate().filter(|(_, c)| c.accepted()) {
            let path = dir.join(format!("clip_{i:05}_{}.wav", c.label));
            write_wav_f32(&c.audio, &path).map_err(|e| io_err(&path, e))?;
        }
    }
    let summary = CurateSummary {
        sources: sources.len(),
        clips: clips.len(),
        accepted: clips.iter().filter(|c| c.accepted()).count(),
        augmented_sources: augmented,
        balance_shortfall: shortfall,
    };
    println!("{}", to_json(&summary));
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> CliResult {
    let mut cfg = GradcheckConfig { seed: a.seed, ..GradcheckConfig::default() };
    match a.dims.as_str() {
        "toy" => {}
        "tiny" => {
            cfg.model.d = 8;
            cfg.model.cond.n_clip = 3;
            cfg.model.cond.n_sync = 5;
            cfg.model.cond.d_visual = 4;
            cfg.model.cond.d_sync = 4;
            cfg.model.cond.d_text = 4;
            cfg.tokens = 5;
        }
        other => return Err(CliError::Usage(format!("unknown dims `{other}` (toy or tiny)"))),
    }
    let inject = a.inject_bad_grad;
    let report = gradcheck_with(&cfg, |name, g| {
        if inject && name == "out.conv.w" {
            g.data_mut()[0] += 1e-2 * (1.0 + g.data()[0].abs());
        }
    })?;
    let json = to_json(&report);
    if let Some(out) = &a.out {
        write_text(out, &json)?;
    }
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(stdout, "{json}");
    if report.passed {
        Ok(())
    } else {
        Err(CliError::Failure(format!(
            "max relative error {:.3e} exceeds {:.0e}",
            report.max_rel_err, report.tolerance
        )))
    }
}
