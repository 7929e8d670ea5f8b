use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use genhance::cli::{exit_code, EnhanceOptions, PipelineConfig, Run, RunDir};
use genhance::eval::{plot_spectrograms, PlotConfig};
use genhance::fmse::Ablation;
use genhance::infer::{FlowSettings, OdeMethod};
use genhance::saslm::Phase;
use genhance::{AudioBuffer, Error, Result};

#[derive(Parser)]
#[command(name = "genhance", version, about = "Generative speech enhancement pipeline")]
struct Cli {
    /// Pipeline config (TOML). Defaults to the run's config.snapshot, then the toy profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory. Defaults to $GENHANCE_RUN_ROOT/<run_name> or runs/<run_name>.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Override the global seed every stage seed is derived from.
    #[arg(long, global = true)]
    global_seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct FlowArgs {
    #[arg(long)]
    nfe: Option<usize>,
    /// Classifier-free guidance strength.
    #[arg(long = "cfg")]
    cfg_strength: Option<f64>,
    /// Sway coefficient in [-1, 0].
    #[arg(long, allow_hyphen_values = true)]
    sway: Option<f64>,
    /// Seed of the initial noise.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    method: Option<Method>,
    /// Drop semantic conditioning at inference.
    #[arg(long)]
    no_semantic: bool,
    /// Use checkpoints/fmse-<TAG>.ckpt.
    #[arg(long)]
    tag: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Euler,
    Midpoint,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Toy,
    Small,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    Lm,
    Encoder,
}

#[derive(Subcommand)]
enum Command {
    /// Build clean/degraded pairs and the pair manifest.
    Simulate {
        #[arg(long)]
        clean_dir: Option<PathBuf>,
        #[arg(long)]
        asset_dir: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        p_noise: Option<f64>,
        #[arg(long)]
        p_reverb: Option<f64>,
        #[arg(long)]
        p_clip: Option<f64>,
        #[arg(long)]
        p_bandlimit: Option<f64>,
        /// Noise-only degradation at a fixed SNR instead of sampled recipes.
        #[arg(long, allow_hyphen_values = true)]
        snr_db: Option<f64>,
        /// Sample full recipes even if the config fixes a noise-only SNR.
        #[arg(long, conflicts_with = "snr_db")]
        random_recipes: bool,
    },
    /// Train the k-means codebook and tokenize the clean corpus.
    TokenizerTrain {
        #[arg(long)]
        k: Option<usize>,
    },
    /// Train the token language model.
    SaslmTrain {
        #[arg(long, value_enum)]
        phase: PhaseArg,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Train the flow-matching mel model.
    FmTrain {
        #[arg(long)]
        no_degrad_mask: bool,
        #[arg(long)]
        no_semantic: bool,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Save as checkpoints/fmse-<TAG>.ckpt.
        #[arg(long)]
        tag: Option<String>,
    },
    /// Enhance one file.
    Enhance {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
        /// Clean reference of the same speaker (at most 10 s).
        #[arg(long)]
        prompt: Option<PathBuf>,
        #[arg(long)]
        no_prompt_tokens: bool,
        #[command(flatten)]
        flow: FlowArgs,
    },
    /// Enhance and score every item of a manifest.
    Evaluate {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        no_plots: bool,
        #[command(flatten)]
        flow: FlowArgs,
    },
    /// Grid over NFE, guidance strength and sway.
    SweepInfer {
        #[arg(long, value_delimiter = ',')]
        nfe: Option<Vec<usize>>,
        #[arg(long = "cfg", value_delimiter = ',')]
        cfg_strength: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        sway: Option<Vec<f64>>,
        #[arg(long)]
        repeats: Option<usize>,
        /// Condition on clean tokens instead of language-model output.
        #[arg(long)]
        oracle_tokens: bool,
    },
    /// Stack spectrograms of WAV files into one PNG.
    Plot {
        #[arg(long = "out")]
        output: PathBuf,
        /// LABEL=PATH pairs, drawn top to bottom.
        #[arg(required = true)]
        inputs: Vec<String>,
    },
    /// Run every stage from simulation to evaluation.
    Pipeline,
    /// Print a config profile as TOML.
    PrintConfig {
        #[arg(long, value_enum, default_value = "toy")]
        profile: Profile,
    },
}

fn flow_settings(base: FlowSettings, a: &FlowArgs) -> FlowSettings {
    FlowSettings {
        nfe: a.nfe.unwrap_or(base.nfe),
        cfg_strength: a.cfg_strength.unwrap_or(base.cfg_strength),
        sway: a.sway.unwrap_or(base.sway),
        seed: a.seed.unwrap_or(base.seed),
        method: match a.method {
            Some(Method::Euler) => OdeMethod::Euler,
            Some(Method::Midpoint) => OdeMethod::Midpoint,
            None => base.method,
        },
    }
}

fn enhance_options(cfg: &PipelineConfig, a: &FlowArgs) -> EnhanceOptions {
    EnhanceOptions {
        settings: flow_settings(cfg.infer.flow, a),
        no_semantic: a.no_semantic,
        no_prompt_tokens: false,
        fmse_tag: a.tag.clone(),
        plots: true,
    }
}

fn open_run(cli: &Cli) -> Result<Run> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let dir = RunDir::resolve(cli.run_dir.clone(), &cfg.run_name);
    if cli.config.is_none() && dir.config_snapshot().exists() {
        cfg = PipelineConfig::load(dir.config_snapshot())?;
    }
    if let Some(seed) = cli.global_seed {
        cfg.seed = seed;
    }
    Run::new(dir, cfg)
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::PrintConfig { profile } => {
            let cfg = match profile {
                Profile::Toy => PipelineConfig::toy(),
                Profile::Small => PipelineConfig::small(),
            };
            print!("{}", cfg.to_toml()?);
            return Ok(());
        }
        Command::Plot { output, inputs } => {
            let mut audios = Vec::new();
            for spec in inputs {
                let (label, path) = spec
                    .split_once('=')
                    .ok_or_else(|| Error::invalid(format!("expected LABEL=PATH, got `{spec}`")))?;
                audios.push((label.to_uppercase(), AudioBuffer::read_wav(path)?));
            }
            let refs: Vec<(&str, &AudioBuffer)> = audios.iter().map(|(l, a)| (l.as_str(), a)).collect();
            return plot_spectrograms(&refs, output, &PlotConfig::default());
        }
        _ => {}
    }

    let mut run = open_run(&cli)?;
    match cli.command {
        Command::Simulate {
            clean_dir,
            asset_dir,
            count,
            p_noise,
            p_reverb,
            p_clip,
            p_bandlimit,
            snr_db,
            random_recipes,
        } => {
            let c = &mut run.cfg;
            c.corpus.clean_dir = clean_dir.or(c.corpus.clean_dir.take());
            c.simulate.asset_dir = asset_dir.or(c.simulate.asset_dir.take());
            c.corpus.n_utterances = count.unwrap_or(c.corpus.n_utterances);
            let p = &mut c.simulate.probs;
            p.noise = p_noise.unwrap_or(p.noise);
            p.reverb = p_reverb.unwrap_or(p.reverb);
            p.clip = p_clip.unwrap_or(p.clip);
            p.bandlimit = p_bandlimit.unwrap_or(p.bandlimit);
            if random_recipes {
                c.simulate.noise_only_snr_db = None;
            }
            if snr_db.is_some() {
                c.simulate.noise_only_snr_db = snr_db;
            }
            run.cfg.validate()?;
            let records = run.simulate()?;
            println!("{} pairs -> {}", records.len(), run.dir.pairs_manifest().display());
        }
        Command::TokenizerTrain { k } => {
            if let Some(k) = k {
                run.cfg.tokenizer.k = k;
                run.cfg.saslm.model.k = k;
                run.cfg.fmse.model.k = k;
            }
            run.cfg.validate()?;
            let cb = run.train_tokenizer()?;
            println!("codebook K={} D={} -> {}", cb.k(), cb.dim(), run.dir.tokenizer_ckpt().display());
        }
        Command::SaslmTrain { phase, steps, lr } => {
            let (phase, optim) = match phase {
                PhaseArg::Lm => (Phase::LmOnly, &mut run.cfg.saslm.lm),
                PhaseArg::Encoder => (Phase::EncoderFinetune, &mut run.cfg.saslm.encoder),
            };
            optim.steps = steps.unwrap_or(optim.steps);
            optim.peak_lr = lr.unwrap_or(optim.peak_lr);
            run.cfg.validate()?;
            let curve = run.train_saslm(phase)?;
            if let Some(last) = curve.last() {
                println!("{} steps, loss {:.4}, accuracy {:.3}", curve.len(), last.loss, last.accuracy);
            }
        }
        Command::FmTrain {
            no_degrad_mask,
            no_semantic,
            steps,
            lr,
            tag,
        } => {
            let f = &mut run.cfg.fmse;
            f.optim.steps = steps.unwrap_or(f.optim.steps);
            f.optim.peak_lr = lr.unwrap_or(f.optim.peak_lr);
            let ablation = Ablation {
                no_degrad_mask: no_degrad_mask || f.ablation.no_degrad_mask,
                no_semantic: no_semantic || f.ablation.no_semantic,
            };
            run.cfg.validate()?;
            let curve = run.train_fm(ablation, tag.as_deref())?;
            if let (Some(first), Some(last)) = (curve.first(), curve.last()) {
                println!("{} steps, loss {:.4} -> {:.4}", curve.len(), first.loss, last.loss);
            }
        }
        Command::Enhance {
            input,
            output,
            prompt,
            no_prompt_tokens,
            flow,
        } => {
            let mut opts = enhance_options(&run.cfg, &flow);
            opts.no_prompt_tokens = no_prompt_tokens;
            run.enhance_file(&input, &output, prompt.as_deref(), &opts)?;
            println!("{}", output.display());
        }
        Command::Evaluate { manifest, no_plots, flow } => {
            let mut opts = enhance_options(&run.cfg, &flow);
            opts.plots = !no_plots;
            let report = run.evaluate(manifest.as_deref(), &opts)?;
            for (k, v) in &report.aggregate {
                if let Some(v) = v {
                    println!("{k:>14} {v:.4}");
                }
            }
        }
        Command::SweepInfer {
            nfe,
            cfg_strength,
            sway,
            repeats,
            oracle_tokens,
        } => {
            let mut grid = run.cfg.sweep.clone();
            grid.nfe = nfe.unwrap_or(grid.nfe);
            grid.cfg_strength = cfg_strength.unwrap_or(grid.cfg_strength);
            grid.sway = sway.unwrap_or(grid.sway);
            grid.repeats = repeats.unwrap_or(grid.repeats);
            let rows = run.sweep(&grid, oracle_tokens)?;
            println!("{} rows -> {}", rows.len(), run.dir.reports().join("sweep.csv").display());
        }
        Command::Pipeline => {
            let report = run.pipeline()?;
            for (k, v) in &report.aggregate {
                if let Some(v) = v {
                    println!("{k:>14} {v:.4}");
                }
            }
        }
        Command::PrintConfig { .. } | Command::Plot { .. } => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
