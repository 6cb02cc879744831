//! `phaseforge`: phase reconstruction from amplitude spectra.

mod methods;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use methods::{Method, MethodOptions, Runner};
use phaseforge::corpus::{gen_synthetic, load_dir, Split, SynthKind, SynthSpec};
use phaseforge::criteria::{write_report_csv, MetricReport, MetricRow};
use phaseforge::kv::KeyValues;
use phaseforge::spectral::{read_pfspec, read_wav, stft, write_pfspec, write_wav, AnalysisConfig};
use phaseforge::training::{load_generator, Stage, TrainConfig, TrainState, LOG_HEADER};

#[derive(Parser)]
#[command(name = "phaseforge", version, about = "Speech phase reconstruction from amplitude spectra")]
struct Cli {
    /// Worker threads (overrides PHASEFORGE_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with train/valid/test splits.
    GenData(GenDataArgs),
    /// Dump the log-amplitude and phase spectra of a WAV file.
    Analyze(AnalyzeArgs),
    /// Rebuild a waveform from an amplitude spectrum.
    Reconstruct(ReconstructArgs),
    /// Train the prior or refinement stage.
    Train(TrainArgs),
    /// Score a method against reference recordings.
    Eval(EvalArgs),
    /// Describe a checkpoint, spectrum file or the built-in presets.
    Info(InfoArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Paper,
    Desk,
}

#[derive(Args, Clone)]
struct AnalysisArgs {
    /// Analysis preset: paper (1024-point FFT) or desk (128-point FFT).
    #[arg(long, value_enum, default_value = "paper")]
    preset: Preset,
    #[arg(long)]
    win: Option<usize>,
    #[arg(long)]
    hop: Option<usize>,
    #[arg(long)]
    fft: Option<usize>,
}

impl AnalysisArgs {
    fn config(&self, sample_rate: Option<u32>) -> Result<AnalysisConfig> {
        let mut c = match self.preset {
            Preset::Paper => AnalysisConfig::paper(),
            Preset::Desk => AnalysisConfig::desk(),
        };
        c.win_len = self.win.unwrap_or(c.win_len);
        c.hop_len = self.hop.unwrap_or(c.hop_len);
        c.fft_size = self.fft.unwrap_or(c.fft_size);
        if let Some(sr) = sample_rate {
            c.sample_rate = sr;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    n_utts: usize,
    #[arg(long, default_value_t = 1.0)]
    duration: f64,
    /// harmonic, chirp or noise_mix.
    #[arg(long, default_value = "harmonic")]
    kind: SynthKind,
    #[arg(long, default_value_t = 0)]
    valid: usize,
    #[arg(long, default_value_t = 0)]
    test: usize,
    #[arg(long, default_value_t = 16000)]
    sample_rate: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    analysis: AnalysisArgs,
}

#[derive(Args, Clone)]
struct MethodArgs {
    /// gla, raar, prior, sp-nspp, sp-nspp-iter-<k> or natural.
    #[arg(long)]
    method: Method,
    /// Iterations for gla and raar.
    #[arg(long, default_value_t = 100)]
    iters: usize,
    /// RAAR relaxation.
    #[arg(long, default_value_t = 0.9)]
    beta: f64,
    /// Start gla/raar from seeded random phase instead of zero phase.
    #[arg(long)]
    random_init: bool,
    /// Prior-stage checkpoint for neural methods.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Refinement checkpoints in application order (repeatable).
    #[arg(long = "refine-ckpt")]
    refine_ckpt: Vec<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    analysis: AnalysisArgs,
}

impl MethodArgs {
    fn runner(&self) -> Result<Runner> {
        Runner::new(MethodOptions {
            method: self.method,
            iters: self.iters,
            beta: self.beta,
            random_init: self.random_init,
            seed: self.seed,
            ckpt: self.ckpt.clone(),
            refine_ckpts: self.refine_ckpt.clone(),
            analysis: self.analysis.config(None)?,
        })
    }
}

#[derive(Args)]
struct ReconstructArgs {
    /// WAV file or PFSPEC dump.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Reference WAV; prints the SNR of the output against it.
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    #[command(flatten)]
    method: MethodArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = ["prior", "refine"])]
    stage: String,
    /// key=value training config; missing keys take the desk defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of training WAV files.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Final checkpoint of the prior stage (required for refine).
    #[arg(long)]
    prior_ckpt: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Overrides the config's epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    /// Overrides the config's seed (which defaults to 0).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Method inputs: WAV files or PFSPEC dumps named `<id>.wav` / `<id>.pfspec`.
    #[arg(long)]
    data: PathBuf,
    /// Reference WAV files named `<id>.wav`.
    #[arg(long)]
    ref_data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    method: MethodArgs,
}

#[derive(Args)]
struct InfoArgs {
    /// Checkpoint to describe.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// PFSPEC or WAV file to describe.
    #[arg(long = "in")]
    input: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli.threads.or_else(phaseforge::threads_from_env);
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::FAILURE;
        }
    }
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Analyze(a) => analyze(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Info(a) => info(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn gen_data(a: GenDataArgs) -> Result<ExitCode> {
    let corpus = gen_synthetic(&SynthSpec {
        n_utts: a.n_utts,
        duration_s: a.duration,
        seed: a.seed,
        kind: a.kind,
        sample_rate: a.sample_rate,
    })?;
    let splits = corpus.split(a.valid, a.test)?;
    fs::create_dir_all(&a.out)?;
    for c in &splits {
        let name = c.split.name();
        c.write_dir(&a.out.join(name))?;
        fs::write(a.out.join(format!("{name}.txt")), c.manifest())?;
    }
    println!(
        "wrote {} train, {} valid, {} test utterances to {}",
        splits[0].len(),
        splits[1].len(),
        splits[2].len(),
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn analyze(a: AnalyzeArgs) -> Result<ExitCode> {
    let w = read_wav(&a.input)?;
    let cfg = a.analysis.config(Some(w.sample_rate))?;
    let s = stft(&w, &cfg)?;
    let f = File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut out = BufWriter::new(f);
    write_pfspec(&mut out, &s)?;
    out.flush()?;
    println!("{} frames x {} bins", s.frames(), s.bins());
    Ok(ExitCode::SUCCESS)
}

fn reconstruct(a: ReconstructArgs) -> Result<ExitCode> {
    let runner = a.method.runner()?;
    let spec = runner.read_input(&a.input)?;
    let wav = runner.run(&spec)?;
    write_wav(&a.out, &wav)?;
    if let Some(r) = &a.reference {
        let reference = read_wav(r)?;
        let snr = phaseforge::criteria::snr_db(&wav.samples, &reference.samples);
        println!("{}\tsnr_db={snr:.4}", a.out.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn train(a: TrainArgs) -> Result<ExitCode> {
    let stage: Stage = a.stage.parse()?;
    let kv = match &a.config {
        Some(p) => KeyValues::read(p).with_context(|| format!("reading {}", p.display()))?,
        None => KeyValues::new(),
    };
    let mut cfg = TrainConfig::from_kv(&kv, Some(stage))?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    let prior = match (stage, &a.prior_ckpt) {
        (Stage::Refine, None) => bail!("the refine stage needs --prior-ckpt"),
        (Stage::Prior, Some(_)) => bail!("--prior-ckpt only applies to the refine stage"),
        (Stage::Refine, Some(p)) => {
            let (m, analysis) = load_generator(p).with_context(|| format!("loading {}", p.display()))?;
            if analysis != cfg.analysis {
                bail!("prior checkpoint analysis {analysis:?} differs from config {:?}", cfg.analysis);
            }
            Some(m)
        }
        (Stage::Prior, None) => None,
    };
    let corpus = load_dir(&a.data, Split::Train)?;
    fs::create_dir_all(&a.out)?;
    cfg.to_kv().write(&a.out.join("config.txt"))?;
    let mut model_kv = KeyValues::new();
    cfg.backbone.to_kv(&mut model_kv);
    model_kv.write(&a.out.join("model.txt"))?;

    let mut state = match &a.resume {
        Some(p) => TrainState::resume(p, cfg).with_context(|| format!("resuming from {}", p.display()))?,
        None => TrainState::new(cfg)?,
    };
    let log_path = a.out.join("train_log.csv");
    let mut log = BufWriter::new(File::create(&log_path)?);
    writeln!(log, "{LOG_HEADER}")?;
    for l in &state.log {
        writeln!(log, "{}", l.csv_line())?;
    }
    log.flush()?;
    let out = a.out.clone();
    state.run(&corpus, prior.as_ref(), cfg.epochs, |st| {
        let l = st.log.last().expect("epoch logged");
        writeln!(log, "{}", l.csv_line())?;
        log.flush()?;
        if cfg.checkpoint_every > 0 && st.epoch % cfg.checkpoint_every == 0 {
            st.checkpoint(&out.join(format!("epoch_{:05}.pfckpt", st.epoch)))?;
        }
        Ok(())
    })?;
    let final_path = a.out.join("final.pfckpt");
    state.checkpoint(&final_path)?;
    println!(
        "trained {} stage for {} epochs; checkpoint {}",
        stage,
        state.epoch,
        final_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn input_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for e in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let p = e?.path();
        let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if p.is_file() && matches!(ext.as_deref(), Some("wav") | Some("pfspec")) {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let runner = a.method.runner()?;
    let files = input_files(&a.data)?;
    let score = |path: &PathBuf| -> Result<MetricReport> {
        let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let ref_path = a.ref_data.join(format!("{id}.wav"));
        if !ref_path.is_file() {
            bail!("missing reference {}", ref_path.display());
        }
        let reference = read_wav(&ref_path)?;
        let spec = runner.read_input(path)?;
        let est = runner.run(&spec)?;
        Ok(MetricReport::from_waveforms(&est, &reference, runner.analysis())?)
    };
    let rows: Vec<MetricRow> = files
        .par_iter()
        .map(|p| MetricRow {
            utt: p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string(),
            result: score(p).map_err(|e| format!("{e:#}")),
        })
        .collect();
    let f = File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut w = BufWriter::new(f);
    write_report_csv(&mut w, &rows)?;
    w.flush()?;
    let failed: Vec<&MetricRow> = rows.iter().filter(|r| r.result.is_err()).collect();
    for r in &failed {
        if let Err(e) = &r.result {
            eprintln!("{}: {e}", r.utt);
        }
    }
    println!("scored {} of {} files into {}", rows.len() - failed.len(), rows.len(), a.out.display());
    Ok(if failed.is_empty() && !rows.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn info(a: InfoArgs) -> Result<ExitCode> {
    println!("phaseforge {}", env!("CARGO_PKG_VERSION"));
    if let Some(p) = &a.ckpt {
        let (m, an) = load_generator(p).with_context(|| format!("loading {}", p.display()))?;
        let c = m.config();
        println!(
            "checkpoint {}: {} model, {} blocks, {} channels, hidden {}, kernel {}, {} bins, {} parameters",
            p.display(),
            if c.conditioned { "refinement" } else { "prior" },
            c.n_blocks,
            c.channels,
            c.block_hidden,
            c.kernel,
            c.bins,
            m.num_params()
        );
        println!(
            "analysis: {} Hz, win {}, hop {}, fft {}",
            an.sample_rate, an.win_len, an.hop_len, an.fft_size
        );
    }
    if let Some(p) = &a.input {
        let is_wav = p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav"));
        if is_wav {
            let w = read_wav(p)?;
            println!("{}: {} samples at {} Hz", p.display(), w.len(), w.sample_rate);
        } else {
            let s = read_pfspec(File::open(p)?)?;
            println!(
                "{}: {} frames x {} bins, {} Hz, win {}, hop {}, fft {}",
                p.display(),
                s.frames(),
                s.bins(),
                s.config.sample_rate,
                s.config.win_len,
                s.config.hop_len,
                s.config.fft_size
            );
        }
    }
    if a.ckpt.is_none() && a.input.is_none() {
        for (name, c) in [("paper", AnalysisConfig::paper()), ("desk", AnalysisConfig::desk())] {
            println!(
                "preset {name}: {} Hz, win {}, hop {}, fft {} ({} bins)",
                c.sample_rate,
                c.win_len,
                c.hop_len,
                c.fft_size,
                c.bins()
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}
