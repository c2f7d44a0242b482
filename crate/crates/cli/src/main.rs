use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fusion_vad::data::{
    load_dataset, parse_rttm, serialize_rttm, write_features, write_manifest, ManifestEntry, Split, SynthSpec,
    Timeline, Utterance,
};
use fusion_vad::dsp::{AudioBuffer, MfccConfig, MfccExtractor};
use fusion_vad::eval::{aggregate, binarize, export_timelines, score_file, BinarizeConfig};
use fusion_vad::exec::Exec;
use fusion_vad::model::{build_model, count_params, load_model, save_model, FusionConfig, FusionMode};
use fusion_vad::tensor::AdamConfig;
use fusion_vad::trainer::{predict, train, TrainConfig};
use serde::Serialize;

mod run_manifest;

use run_manifest::RunManifest;

#[derive(Parser)]
#[command(name = "fvad", version, about = "Voice activity detection with MFCC / pre-trained feature fusion")]
struct Cli {
    /// Worker threads (1 = sequential).
    #[arg(long, global = true, env = "FVAD_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract MFCC feature files from 16 kHz WAV audio.
    ExtractMfcc(ExtractArgs),
    /// Generate the synthetic two-stream benchmark.
    Synth(SynthArgs),
    /// Train a model and keep the best dev-AUC checkpoint.
    Train(TrainArgs),
    /// Score a model (or a hypothesis RTTM) against the reference.
    Eval(EvalArgs),
    /// Print analytic parameter counts per block.
    CountParams(CountArgs),
    /// Draw reference and hypothesis timelines for one file.
    Plot(PlotArgs),
}

#[derive(Args, Serialize)]
struct ExtractArgs {
    #[arg(long, conflicts_with = "wav_dir", required_unless_present = "wav_dir")]
    wav: Option<PathBuf>,
    #[arg(long)]
    wav_dir: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 13)]
    n_mfcc: usize,
    #[arg(long, default_value_t = 40)]
    n_mels: usize,
    #[arg(long, default_value_t = 25.0)]
    window_ms: f64,
    #[arg(long, default_value_t = 20.0)]
    hop_ms: f64,
    #[arg(long, default_value_t = 0.97)]
    preemphasis: f64,
}

#[derive(Args, Serialize)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = SynthSpec::default().n_files)]
    n_files: usize,
    #[arg(long, default_value_t = SynthSpec::default().file_s)]
    file_s: f64,
    #[arg(long, default_value_t = SynthSpec::default().speech_density)]
    speech_density: f64,
    #[arg(long, default_value_t = SynthSpec::default().noise_burst_rate)]
    noise_burst_rate: f64,
    #[arg(long, default_value_t = SynthSpec::default().ptm_dropout)]
    ptm_dropout: f64,
    #[arg(long, default_value_t = SynthSpec::default().d_mfcc_like)]
    d_mfcc_like: usize,
    #[arg(long, default_value_t = SynthSpec::default().d_ptm_like)]
    d_ptm_like: usize,
}

#[derive(Args, Serialize, Clone)]
struct ModelDims {
    #[arg(long, default_value_t = 128)]
    d_model: usize,
    #[arg(long, default_value_t = 2)]
    n_heads: usize,
    #[arg(long, default_value_t = 128)]
    lstm_hidden: usize,
    #[arg(long, default_value_t = 2)]
    lstm_layers: usize,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Reference RTTM (default: reference.rttm beside the manifest).
    #[arg(long)]
    rttm: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    fusion: FusionMode,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 2.0)]
    chunk_s: f64,
    #[arg(long, default_value_t = 5)]
    patience: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = AdamConfig::default().lr)]
    lr: f64,
    /// Expected MFCC dimension (checked against the features).
    #[arg(long)]
    d_mfcc: Option<usize>,
    /// Expected PTM dimension (checked against the features).
    #[arg(long)]
    d_ptm: Option<usize>,
    #[command(flatten)]
    dims: ModelDims,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    /// Checkpoint to score; not needed with --hyp-rttm.
    #[arg(long, required_unless_present = "hyp_rttm")]
    model: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    rttm: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Score this RTTM as the hypothesis instead of running a model.
    #[arg(long)]
    hyp_rttm: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    onset: f64,
    #[arg(long, default_value_t = 0.5)]
    offset: f64,
    #[arg(long, default_value_t = 0.0)]
    min_on_s: f64,
    #[arg(long, default_value_t = 0.0)]
    min_off_s: f64,
    #[arg(long, default_value_t = 2.0)]
    chunk_s: f64,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args, Serialize)]
struct CountArgs {
    #[arg(long, value_parser = parse_mode)]
    fusion: FusionMode,
    #[arg(long)]
    d_mfcc: usize,
    #[arg(long)]
    d_ptm: usize,
    #[command(flatten)]
    dims: ModelDims,
}

#[derive(Args, Serialize)]
struct PlotArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    rttm: Option<PathBuf>,
    #[arg(long)]
    file_id: String,
    /// NAME=CHECKPOINT, repeatable; lanes keep this order.
    #[arg(long = "model", value_parser = parse_named)]
    models: Vec<(String, PathBuf)>,
    /// NAME=RTTM, repeatable; drawn after the model lanes.
    #[arg(long = "hyp-rttm", value_parser = parse_named)]
    hyp_rttms: Vec<(String, PathBuf)>,
    #[arg(long, default_value_t = 0.5)]
    onset: f64,
    #[arg(long, default_value_t = 0.5)]
    offset: f64,
    #[arg(long, default_value_t = 2.0)]
    chunk_s: f64,
    #[arg(long)]
    out: PathBuf,
}

fn parse_mode(s: &str) -> std::result::Result<FusionMode, String> {
    s.parse().map_err(|e: fusion_vad::Error| e.to_string())
}

fn parse_named(s: &str) -> std::result::Result<(String, PathBuf), String> {
    let (name, path) = s.split_once('=').ok_or_else(|| format!("expected NAME=PATH, got {s:?}"))?;
    Ok((name.to_string(), PathBuf::from(path)))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numerical = e.chain().any(|c| matches!(c.downcast_ref(), Some(fusion_vad::Error::Numerical(_))));
            ExitCode::from(if numerical { 3 } else { 2 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let exec = configure_threads(cli.threads)?;
    match cli.command {
        Command::ExtractMfcc(a) => cmd_extract(a, exec),
        Command::Synth(a) => cmd_synth(a, exec),
        Command::Train(a) => cmd_train(a, exec),
        Command::Eval(a) => cmd_eval(a, exec),
        Command::CountParams(a) => cmd_count_params(a),
        Command::Plot(a) => cmd_plot(a),
    }
}

fn configure_threads(threads: Option<usize>) -> Result<Exec> {
    match threads {
        Some(0) => bail!("--threads must be at least 1"),
        Some(1) => Ok(Exec::Sequential),
        #[cfg(feature = "parallel")]
        Some(n) => {
            rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring thread pool")?;
            Ok(Exec::Parallel)
        }
        #[cfg(not(feature = "parallel"))]
        Some(_) => {
            log::warn!("built without the parallel feature; running sequentially");
            Ok(Exec::Sequential)
        }
        None if Exec::parallel_available() => Ok(Exec::Parallel),
        None => Ok(Exec::Sequential),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn cmd_extract(a: ExtractArgs, exec: Exec) -> Result<()> {
    let cfg = MfccConfig {
        n_coeffs: a.n_mfcc,
        n_mels: a.n_mels,
        window_ms: a.window_ms,
        hop_ms: a.hop_ms,
        preemphasis: a.preemphasis,
        ..MfccConfig::default()
    };
    let extractor = MfccExtractor::new(cfg)?;
    let inputs: Vec<PathBuf> = match (&a.wav, &a.wav_dir) {
        (Some(w), _) => vec![w.clone()],
        (None, Some(d)) => {
            let mut v: Vec<PathBuf> = fs::read_dir(d)
                .with_context(|| format!("cannot read directory {}", d.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
                .collect();
            v.sort();
            if v.is_empty() {
                bail!("no wav files found in {}", d.display());
            }
            v
        }
        (None, None) => unreachable!("clap requires one input"),
    };
    create_dir(&a.out)?;
    let mut manifest = RunManifest::new("extract-mfcc", None, &a)?;
    for wav in &inputs {
        let audio = AudioBuffer::read_wav(wav).with_context(|| format!("reading {}", wav.display()))?;
        let feats = extractor.extract_with(&audio, exec).with_context(|| format!("extracting {}", wav.display()))?;
        let stem = wav.file_stem().ok_or_else(|| anyhow!("{} has no file name", wav.display()))?;
        let out = a.out.join(stem).with_extension("fvad");
        write_features(&out, &feats)?;
        manifest.add_input(wav)?;
        println!("{} T={} D={}", out.display(), feats.frames(), feats.dim());
    }
    manifest.write(&a.out.join("run.json"))
}

fn cmd_synth(a: SynthArgs, exec: Exec) -> Result<()> {
    let spec = SynthSpec {
        seed: a.seed,
        n_files: a.n_files,
        file_s: a.file_s,
        speech_density: a.speech_density,
        noise_burst_rate: a.noise_burst_rate,
        ptm_dropout: a.ptm_dropout,
        d_mfcc_like: a.d_mfcc_like,
        d_ptm_like: a.d_ptm_like,
    };
    let files = fusion_vad::data::synth::generate_synthetic_with(&spec, exec)?;
    create_dir(&a.out)?;
    let mut refs = BTreeMap::new();
    let mut hidden = BTreeMap::new();
    let mut entries = Vec::new();
    for f in &files {
        let u = &f.utterance;
        let mfcc = format!("{}.mfcc.fvad", u.file_id);
        let ptm = format!("{}.ptm.fvad", u.file_id);
        write_features(&a.out.join(&mfcc), u.mfcc.as_ref().expect("synthetic files have both streams"))?;
        write_features(&a.out.join(&ptm), u.ptm.as_ref().expect("synthetic files have both streams"))?;
        refs.insert(u.file_id.clone(), u.reference.clone());
        hidden.insert(u.file_id.clone(), serde_json::json!({ "bursts": f.bursts, "dropouts": f.dropouts }));
        entries.push(ManifestEntry {
            file_id: u.file_id.clone(),
            wav: None,
            mfcc_path: Some(mfcc),
            ptm_path: Some(ptm),
            rttm_key: u.file_id.clone(),
            split: u.split,
        });
    }
    fs::write(a.out.join("reference.rttm"), serialize_rttm(&refs))?;
    fs::write(a.out.join("hidden.json"), serde_json::to_string_pretty(&hidden)? + "\n")?;
    write_manifest(&a.out.join("manifest.jsonl"), &entries)?;
    RunManifest::new("synth", Some(a.seed), &spec)?.write(&a.out.join("run.json"))?;
    println!("wrote {} files to {}", files.len(), a.out.display());
    Ok(())
}

fn rttm_path(manifest: &Path, rttm: &Option<PathBuf>) -> PathBuf {
    rttm.clone().unwrap_or_else(|| manifest.parent().unwrap_or(Path::new(".")).join("reference.rttm"))
}

/// Stream width shared by every file, or an error naming the odd one out.
fn stream_dim(utts: &[Utterance], pick: impl Fn(&Utterance) -> Option<usize>, name: &str) -> Result<Option<usize>> {
    let mut dim = None;
    for u in utts {
        match (dim, pick(u)) {
            (_, None) => return Ok(None),
            (None, Some(d)) => dim = Some(d),
            (Some(a), Some(b)) if a != b => bail!("{name} dimension differs between files: {a} vs {b} ({})", u.file_id),
            _ => {}
        }
    }
    Ok(dim)
}

fn cmd_train(a: TrainArgs, exec: Exec) -> Result<()> {
    let rttm = rttm_path(&a.manifest, &a.rttm);
    let train_set = load_dataset(&a.manifest, Some(&rttm), Some(Split::Train))?;
    let dev_set = load_dataset(&a.manifest, Some(&rttm), Some(Split::Dev))?;
    if train_set.is_empty() || dev_set.is_empty() {
        bail!("manifest needs nonempty train and dev splits ({} train, {} dev files)", train_set.len(), dev_set.len());
    }
    let all: Vec<Utterance> = train_set.iter().chain(&dev_set).cloned().collect();
    let d_mfcc = stream_dim(&all, |u| u.mfcc.as_ref().map(|m| m.dim()), "mfcc")?;
    let d_ptm = stream_dim(&all, |u| u.ptm.as_ref().map(|m| m.dim()), "ptm")?;
    for (name, used, expected, found) in
        [("mfcc", a.fusion.uses_mfcc(), a.d_mfcc, d_mfcc), ("ptm", a.fusion.uses_ptm(), a.d_ptm, d_ptm)]
    {
        if !used {
            continue;
        }
        let found = found.ok_or(fusion_vad::Error::MissingStream(name))?;
        if let Some(e) = expected.filter(|&e| e != found) {
            bail!("{name} dimension mismatch: --d-{name} {e} but features have {found}");
        }
    }
    let cfg = FusionConfig {
        mode: a.fusion,
        d_mfcc: if a.fusion.uses_mfcc() { d_mfcc.unwrap_or(0) } else { a.d_mfcc.or(d_mfcc).unwrap_or(0) },
        d_ptm: if a.fusion.uses_ptm() { d_ptm.unwrap_or(0) } else { a.d_ptm.or(d_ptm).unwrap_or(0) },
        d_model: a.dims.d_model,
        n_heads: a.dims.n_heads,
        lstm_hidden: a.dims.lstm_hidden,
        lstm_layers: a.dims.lstm_layers,
    };
    let tc = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        chunk_s: a.chunk_s,
        patience: a.patience,
        seed: a.seed,
        optimizer: AdamConfig { lr: a.lr, ..AdamConfig::default() },
        exec,
    };
    let init = build_model(&cfg, a.seed)?;
    let out = train(&cfg, init, &train_set, &dev_set, &tc)?;
    create_dir(&a.out)?;
    save_model(&a.out.join("best.fvck"), &out.params, &cfg)?;
    fs::write(a.out.join("trainlog.json"), serde_json::to_string_pretty(&out.log)? + "\n")?;
    let mut manifest =
        RunManifest::new("train", Some(a.seed), serde_json::json!({ "model": cfg, "train": tc, "args": &a }))?;
    manifest.add_input(&a.manifest)?;
    manifest.add_input(&rttm)?;
    manifest.write(&a.out.join("run.json"))?;
    println!("best_epoch={} val_auc={:.6}", out.log.best_epoch, out.log.best_val_auc);
    Ok(())
}

fn cmd_eval(a: EvalArgs, exec: Exec) -> Result<()> {
    let split: Split = a.split.parse()?;
    let bc = BinarizeConfig { onset: a.onset, offset: a.offset, min_on_s: a.min_on_s, min_off_s: a.min_off_s };
    bc.validate()?;
    let rttm = rttm_path(&a.manifest, &a.rttm);
    let utts = load_dataset(&a.manifest, Some(&rttm), Some(split))?;
    if utts.is_empty() {
        bail!("manifest has no {split} split");
    }
    let mut manifest = RunManifest::new("eval", None, &a)?;
    manifest.add_input(&a.manifest)?;
    manifest.add_input(&rttm)?;
    let hyps: Vec<Timeline> = if let Some(h) = &a.hyp_rttm {
        let text = fs::read_to_string(h).with_context(|| format!("cannot read {}", h.display()))?;
        let map = parse_rttm(&text)?;
        manifest.add_input(h)?;
        utts.iter().map(|u| map.get(&u.file_id).cloned().unwrap_or_default()).collect()
    } else {
        let path = a.model.as_ref().expect("clap requires --model without --hyp-rttm");
        let (params, cfg) = load_model(path)?;
        manifest.add_input(path)?;
        let scores: Vec<_> =
            exec.map(&utts, |u| predict(&params, &cfg, u, a.chunk_s)).into_iter().collect::<Result<_, _>>()?;
        scores.iter().map(|s| binarize(s, &bc)).collect()
    };
    let per_file =
        utts.iter().zip(&hyps).map(|(u, h)| score_file(&u.file_id, &u.reference, h, u.duration_s())).collect();
    let report = aggregate(per_file)?;
    if let Some(dir) = a.report.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    fs::write(&a.report, serde_json::to_string_pretty(&report)? + "\n")
        .with_context(|| format!("cannot write {}", a.report.display()))?;
    manifest.write(&a.report.with_extension("run.json"))?;
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_count_params(a: CountArgs) -> Result<()> {
    let cfg = FusionConfig {
        mode: a.fusion,
        d_mfcc: a.d_mfcc,
        d_ptm: a.d_ptm,
        d_model: a.dims.d_model,
        n_heads: a.dims.n_heads,
        lstm_hidden: a.dims.lstm_hidden,
        lstm_layers: a.dims.lstm_layers,
    };
    let c = count_params(&cfg)?;
    println!("{:<10} {:>12}", "block", "params");
    for (name, n) in &c.blocks {
        println!("{name:<10} {n:>12}");
    }
    println!("{:<10} {:>12}", "total", c.total);
    Ok(())
}

fn cmd_plot(a: PlotArgs) -> Result<()> {
    let rttm = rttm_path(&a.manifest, &a.rttm);
    let utt = load_dataset(&a.manifest, Some(&rttm), None)?
        .into_iter()
        .find(|u| u.file_id == a.file_id)
        .ok_or_else(|| anyhow!("file {:?} is not in {}", a.file_id, a.manifest.display()))?;
    let bc = BinarizeConfig { onset: a.onset, offset: a.offset, ..BinarizeConfig::default() };
    bc.validate()?;
    let mut manifest = RunManifest::new("plot", None, &a)?;
    manifest.add_input(&a.manifest)?;
    manifest.add_input(&rttm)?;
    let mut hyps = Vec::new();
    for (name, path) in &a.models {
        let (params, cfg) = load_model(path)?;
        manifest.add_input(path)?;
        hyps.push((name.clone(), binarize(&predict(&params, &cfg, &utt, a.chunk_s)?, &bc)));
    }
    for (name, path) in &a.hyp_rttms {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        manifest.add_input(path)?;
        hyps.push((name.clone(), parse_rttm(&text)?.remove(&a.file_id).unwrap_or_default()));
    }
    let plot = export_timelines(&utt.reference, &hyps, utt.duration_s());
    create_dir(&a.out)?;
    let svg = a.out.join(format!("{}.svg", a.file_id));
    fs::write(&svg, &plot.svg)?;
    fs::write(a.out.join(format!("{}.json", a.file_id)), serde_json::to_string_pretty(&plot.to_json())? + "\n")?;
    manifest.write(&a.out.join("run.json"))?;
    println!("{}", svg.display());
    Ok(())
}
