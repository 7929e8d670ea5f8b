//! Pipeline stages over a run directory.

use std::collections::BTreeMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::checkpoint::{
    codebook_checkpoint, codebook_from_checkpoint, fmse_checkpoint, fmse_from_checkpoint, saslm_checkpoint,
    saslm_from_checkpoint, Checkpoint, Component,
};
use super::config::{derive_seed, PipelineConfig};
use crate::audio::{AudioBuffer, ACOUSTIC_RATE_HZ, TOKEN_RATE_HZ};
use crate::degrade::{
    read_manifest, sample_recipe, simulate_pair, write_manifest, AssetBank, DegradationRecipe, NoiseParams, PairRecord,
};
use crate::dsp::{resample, GriffinLim};
use crate::error::{Error, Result};
use crate::eval::{estoi, lsd, plot_spectrograms, si_sdr, token_error_rate, MetricReport, PlotConfig};
use crate::fmse::{train_fmse, write_flow_curve, Ablation, Fmse, FmseExample, FmseTrainConfig, FlowCurvePoint};
use crate::infer::{acoustic_mel, enhance, run_sweep, write_sweep_csv, EnhanceRequest, FlowSettings, Models, SweepGrid, SweepItem, SweepRow};
use crate::saslm::{train_phase, write_curve, CurvePoint, Phase, Saslm, SaslmExample, SaslmTrainConfig};
use crate::synth;
use crate::tokenizer::{train_codebook, Codebook, Tokenizer};

/// Environment variable naming the directory under which runs are created.
pub const RUN_ROOT_ENV: &str = "GENHANCE_RUN_ROOT";

/// Paths of one run.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// `explicit`, else `$GENHANCE_RUN_ROOT/<run_name>`, else `runs/<run_name>`.
    pub fn resolve(explicit: Option<PathBuf>, run_name: &str) -> Self {
        if let Some(p) = explicit {
            return Self::new(p);
        }
        let base = std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
        Self::new(base.join(run_name))
    }

    pub fn config_snapshot(&self) -> PathBuf {
        self.root.join("config.snapshot")
    }
    pub fn manifests(&self) -> PathBuf {
        self.root.join("manifests")
    }
    pub fn pairs_manifest(&self) -> PathBuf {
        self.manifests().join("pairs.jsonl")
    }
    pub fn tokens_manifest(&self) -> PathBuf {
        self.manifests().join("tokens.jsonl")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn tokenizer_ckpt(&self) -> PathBuf {
        self.checkpoints().join("tokenizer.ckpt")
    }
    pub fn saslm_ckpt(&self) -> PathBuf {
        self.checkpoints().join("saslm.ckpt")
    }
    pub fn fmse_ckpt(&self, tag: Option<&str>) -> PathBuf {
        self.checkpoints().join(match tag {
            Some(t) => format!("fmse-{t}.ckpt"),
            None => "fmse.ckpt".into(),
        })
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
    pub fn plots(&self) -> PathBuf {
        self.root.join("plots")
    }
    pub fn audio(&self, kind: &str) -> PathBuf {
        self.root.join("audio").join(kind)
    }

    pub fn create_layout(&self) -> Result<()> {
        for d in [self.manifests(), self.checkpoints(), self.reports(), self.plots()] {
            std::fs::create_dir_all(d)?;
        }
        Ok(())
    }

    /// Paths in manifests are stored relative to the run root.
    pub fn absolute(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }
}

fn require(path: &Path, stage: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            stage: stage.into(),
            path: path.to_path_buf(),
        })
    }
}

/// A configured run.
#[derive(Debug, Clone)]
pub struct Run {
    pub dir: RunDir,
    pub cfg: PipelineConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenRecord {
    pub id: String,
    pub tokens: Vec<u32>,
}

/// A manifest row with its audio loaded.
#[derive(Debug, Clone)]
pub struct LoadedPair {
    pub id: String,
    pub clean: AudioBuffer,
    pub degraded: AudioBuffer,
}

pub fn pair_id(record: &PairRecord) -> String {
    record
        .clean_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Short content hash used to identify checkpoints in reports.
fn file_id(path: &Path) -> Result<String> {
    let digest = Sha256::digest(std::fs::read(path)?);
    Ok(digest[..6].iter().map(|b| format!("{b:02x}")).collect())
}

impl Run {
    pub fn new(dir: RunDir, cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { dir, cfg })
    }

    fn seed(&self, stage: &str) -> u64 {
        derive_seed(self.cfg.seed, stage)
    }

    fn begin(&self) -> Result<()> {
        self.dir.create_layout()?;
        std::fs::write(self.dir.config_snapshot(), self.cfg.to_toml()?)?;
        Ok(())
    }

    fn asset_bank(&self) -> Result<AssetBank> {
        match &self.cfg.simulate.asset_dir {
            Some(dir) => {
                let bank = AssetBank::load(dir)?;
                if bank.noises.is_empty() {
                    return Err(Error::MissingAsset(format!("{}/noises/*.wav", dir.display())));
                }
                Ok(bank)
            }
            None => AssetBank::synthetic(self.seed("assets"), ACOUSTIC_RATE_HZ, self.cfg.simulate.noise_s),
        }
    }

    fn clean_corpus(&self) -> Result<Vec<(String, AudioBuffer)>> {
        let c = &self.cfg.corpus;
        match &c.clean_dir {
            Some(dir) => {
                let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
                    .collect();
                paths.sort();
                if paths.is_empty() {
                    return Err(Error::MissingAsset(format!("{}/*.wav", dir.display())));
                }
                paths
                    .iter()
                    .take(c.n_utterances)
                    .map(|p| {
                        let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                        Ok((id, resample(&AudioBuffer::read_wav(p)?, ACOUSTIC_RATE_HZ)?))
                    })
                    .collect()
            }
            None => (0..c.n_utterances)
                .map(|i| {
                    let speaker = synth::Speaker::from_seed(i as u64 % c.n_speakers);
                    let audio = synth::utterance(self.seed(&format!("utterance-{i}")), speaker, c.duration_s, ACOUSTIC_RATE_HZ)?;
                    Ok((format!("utt{i:03}"), audio))
                })
                .collect(),
        }
    }

    fn recipe(&self, i: usize, bank: &AssetBank) -> Result<DegradationRecipe> {
        let seed = self.seed(&format!("recipe-{i}"));
        match self.cfg.simulate.noise_only_snr_db {
            Some(snr_db) => {
                let ids: Vec<&String> = bank.noises.keys().collect();
                let mut r = DegradationRecipe::identity(seed);
                r.noise = Some(NoiseParams {
                    noise_id: ids[i % ids.len()].clone(),
                    snr_db,
                });
                Ok(r)
            }
            None => sample_recipe(seed, &self.cfg.simulate.probs, bank),
        }
    }

    /// Build clean/degraded pairs and the pair manifest.
    pub fn simulate(&self) -> Result<Vec<PairRecord>> {
        self.begin()?;
        let bank = self.asset_bank()?;
        let corpus = self.clean_corpus()?;
        let (clean_dir, degraded_dir) = (self.dir.audio("clean"), self.dir.audio("degraded"));
        std::fs::create_dir_all(&clean_dir)?;
        std::fs::create_dir_all(&degraded_dir)?;
        let mut records = Vec::with_capacity(corpus.len());
        for (i, (id, clean)) in corpus.iter().enumerate() {
            let pair = simulate_pair(clean, &bank, &self.recipe(i, &bank)?)?;
            let clean_rel = PathBuf::from("audio/clean").join(format!("{id}.wav"));
            let degraded_rel = PathBuf::from("audio/degraded").join(format!("{id}.wav"));
            pair.clean.write_wav(self.dir.absolute(&clean_rel))?;
            pair.degraded.write_wav(self.dir.absolute(&degraded_rel))?;
            records.push(pair.record(clean_rel, degraded_rel));
        }
        write_manifest(self.dir.pairs_manifest(), &records)?;
        log::info!("simulated {} pairs", records.len());
        Ok(records)
    }

    pub fn load_pairs(&self, manifest: Option<&Path>) -> Result<Vec<LoadedPair>> {
        let path = manifest.map(Path::to_path_buf).unwrap_or_else(|| self.dir.pairs_manifest());
        require(&path, "simulate")?;
        read_manifest(&path)?
            .iter()
            .map(|r| {
                Ok(LoadedPair {
                    id: pair_id(r),
                    clean: AudioBuffer::read_wav(self.dir.absolute(&r.clean_path))?,
                    degraded: AudioBuffer::read_wav(self.dir.absolute(&r.degraded_path))?,
                })
            })
            .collect()
    }

    /// Fit the k-means codebook on the clean side and tokenize every clean item.
    pub fn train_tokenizer(&self) -> Result<Codebook> {
        let pairs = self.load_pairs(None)?;
        self.begin()?;
        let clean16: Vec<AudioBuffer> = pairs.iter().map(|p| resample(&p.clean, TOKEN_RATE_HZ)).collect::<Result<_>>()?;
        let cb = train_codebook(&clean16, self.cfg.tokenizer.k, self.seed("tokenizer"), &self.cfg.tokenizer.mel)?;
        codebook_checkpoint(&cb)?.save(self.dir.tokenizer_ckpt())?;
        let tokens: Vec<TokenRecord> = pairs
            .iter()
            .zip(&clean16)
            .map(|(p, a)| {
                Ok(TokenRecord {
                    id: p.id.clone(),
                    tokens: cb.tokenize(a)?.ids,
                })
            })
            .collect::<Result<_>>()?;
        write_jsonl(&self.dir.tokens_manifest(), &tokens)?;
        Ok(cb)
    }

    pub fn load_codebook(&self) -> Result<Codebook> {
        let path = self.dir.tokenizer_ckpt();
        require(&path, "tokenizer-train")?;
        let cb = codebook_from_checkpoint(&Checkpoint::load_as(&path, Component::Tokenizer)?)?;
        if cb.mel != self.cfg.tokenizer.mel {
            return Err(Error::Config(format!(
                "tokenizer checkpoint uses mel profile `{}`, config requests `{}`",
                cb.mel.name, self.cfg.tokenizer.mel.name
            )));
        }
        Ok(cb)
    }

    /// Clean-speech tokens keyed by item id.
    pub fn load_tokens(&self) -> Result<BTreeMap<String, Vec<u32>>> {
        let path = self.dir.tokens_manifest();
        require(&path, "tokenizer-train")?;
        Ok(read_jsonl::<TokenRecord>(&path)?.into_iter().map(|r| (r.id, r.tokens)).collect())
    }

    fn tokens_for(tokens: &BTreeMap<String, Vec<u32>>, id: &str) -> Result<Vec<u32>> {
        tokens.get(id).cloned().ok_or_else(|| Error::MissingArtifact {
            stage: "tokenizer-train".into(),
            path: PathBuf::from(format!("manifests/tokens.jsonl#{id}")),
        })
    }

    pub fn train_saslm(&self, phase: Phase) -> Result<Vec<CurvePoint>> {
        let pairs = self.load_pairs(None)?;
        let tokens = self.load_tokens()?;
        let s = &self.cfg.saslm;
        let mut model = match phase {
            Phase::LmOnly => Saslm::new(s.model.clone(), self.seed("saslm-init"), DType::F32)?,
            Phase::EncoderFinetune => self.load_saslm_from("saslm-train --phase lm")?,
        };
        if model.cfg.k != self.cfg.tokenizer.k {
            return Err(Error::Config("saslm checkpoint vocabulary differs from the tokenizer".into()));
        }
        self.begin()?;
        let data: Vec<SaslmExample> = pairs
            .iter()
            .map(|p| {
                Ok(SaslmExample {
                    features: Saslm::features(&p.degraded)?,
                    targets: Self::tokens_for(&tokens, &p.id)?,
                })
            })
            .collect::<Result<_>>()?;
        let (optim, name) = match phase {
            Phase::LmOnly => (s.lm.clone(), "lm"),
            Phase::EncoderFinetune => (s.encoder.clone(), "encoder"),
        };
        let tc = SaslmTrainConfig {
            optim,
            encoder_lr_scale: s.encoder_lr_scale,
            seed: self.seed(&format!("saslm-{name}")),
            stop_accuracy: s.stop_accuracy,
        };
        let curve = train_phase(&mut model, &data, phase, &tc)?;
        saslm_checkpoint(&model)?.save(self.dir.saslm_ckpt())?;
        write_curve(self.dir.reports().join(format!("saslm_{name}_curve.csv")), &curve)?;
        Ok(curve)
    }

    fn load_saslm_from(&self, stage: &str) -> Result<Saslm> {
        let path = self.dir.saslm_ckpt();
        require(&path, stage)?;
        saslm_from_checkpoint(&Checkpoint::load_as(&path, Component::Saslm)?)
    }

    pub fn load_saslm(&self) -> Result<Saslm> {
        self.load_saslm_from("saslm-train")
    }

    /// Flow-matching training on clean mels, degraded mels and clean tokens.
    pub fn train_fm(&self, ablation: Ablation, tag: Option<&str>) -> Result<Vec<FlowCurvePoint>> {
        let pairs = self.load_pairs(None)?;
        let tokens = self.load_tokens()?;
        self.begin()?;
        let f = &self.cfg.fmse;
        let data: Vec<FmseExample> = pairs
            .iter()
            .map(|p| {
                Ok(FmseExample {
                    clean: acoustic_mel(&p.clean)?,
                    degraded: acoustic_mel(&p.degraded)?,
                    tokens: Self::tokens_for(&tokens, &p.id)?,
                })
            })
            .collect::<Result<_>>()?;
        let mut model = Fmse::new(f.model.clone(), self.seed("fmse-init"), DType::F32)?;
        let tc = FmseTrainConfig {
            optim: f.optim.clone(),
            masks: f.masks.clone(),
            ablation,
            seed: self.seed("fm-train"),
        };
        let curve = train_fmse(&mut model, &data, &tc)?;
        fmse_checkpoint(&model, &f.mel)?.save(self.dir.fmse_ckpt(tag))?;
        let name = tag.map_or("fmse_curve.csv".to_string(), |t| format!("fmse-{t}_curve.csv"));
        write_flow_curve(self.dir.reports().join(name), &curve)?;
        Ok(curve)
    }

    /// Load the flow model, refusing a mel profile other than the configured one.
    pub fn load_fmse(&self, tag: Option<&str>) -> Result<Fmse> {
        let path = self.dir.fmse_ckpt(tag);
        require(&path, "fm-train")?;
        let (model, mel) = fmse_from_checkpoint(&Checkpoint::load_as(&path, Component::Fmse)?)?;
        if mel != self.cfg.fmse.mel {
            return Err(Error::Config(format!(
                "flow checkpoint was trained on mel profile `{}` but the request uses `{}`",
                mel.name, self.cfg.fmse.mel.name
            )));
        }
        Ok(model)
    }

    pub fn vocoder(&self) -> GriffinLim {
        GriffinLim {
            n_iters: self.cfg.infer.griffin_lim_iters,
        }
    }

    /// Enhance every manifest item and score it against its clean reference.
    pub fn evaluate(&self, manifest: Option<&Path>, opts: &EnhanceOptions) -> Result<MetricReport> {
        let pairs = self.load_pairs(manifest)?;
        let tokens = self.load_tokens()?;
        let cb = self.load_codebook()?;
        let saslm = self.load_saslm()?;
        let fmse = self.load_fmse(opts.fmse_tag.as_deref())?;
        self.begin()?;
        let models = Models {
            saslm: &saslm,
            fmse: &fmse,
            tokenizer: &cb,
        };
        let vocoder = self.vocoder();
        let suffix = opts.fmse_tag.as_ref().map_or(String::new(), |t| format!("-{t}"));
        let out_dir = self.dir.audio(&format!("enhanced{suffix}"));
        std::fs::create_dir_all(&out_dir)?;

        let mut report = MetricReport::default();
        for p in &pairs {
            let mut req = EnhanceRequest::new(p.degraded.clone());
            req.settings = opts.settings;
            req.no_semantic = opts.no_semantic;
            let out = enhance(&req, &models, &vocoder)?;
            out.audio.write_wav(out_dir.join(format!("{}.wav", p.id)))?;

            let clean = resample(&p.clean, ACOUSTIC_RATE_HZ)?;
            let degraded = resample(&p.degraded, ACOUSTIC_RATE_HZ)?;
            let clean_mel = acoustic_mel(&clean)?;
            let clean_tokens = Self::tokens_for(&tokens, &p.id)?;
            let mut m = BTreeMap::new();
            m.insert("si_sdr".to_string(), si_sdr(&clean, &out.audio)?);
            m.insert("estoi".to_string(), estoi(&clean, &out.audio)?);
            m.insert("lsd".to_string(), lsd(&clean_mel, &out.mel.values)?);
            m.insert("input_si_sdr".to_string(), si_sdr(&clean, &degraded)?);
            m.insert("input_estoi".to_string(), estoi(&clean, &degraded)?);
            m.insert("input_lsd".to_string(), lsd(&clean_mel, &acoustic_mel(&degraded)?)?);
            m.insert("ter".to_string(), token_error_rate(&clean_tokens, &out.purified.ids));
            report.push(p.id.clone(), m);

            if opts.plots {
                plot_spectrograms(
                    &[("clean", &clean), ("degraded", &degraded), ("enhanced", &out.audio)],
                    self.dir.plots().join(format!("{}{suffix}.png", p.id)),
                    &PlotConfig::default(),
                )?;
            }
        }
        report.finalize();
        let s = opts.settings;
        let meta = &mut report.metadata;
        meta.insert("nfe".into(), s.nfe.to_string());
        meta.insert("cfg_strength".into(), s.cfg_strength.to_string());
        meta.insert("sway".into(), s.sway.to_string());
        meta.insert("seed".into(), s.seed.to_string());
        meta.insert("method".into(), format!("{:?}", s.method).to_lowercase());
        meta.insert("no_semantic".into(), opts.no_semantic.to_string());
        meta.insert("tokenizer_ckpt".into(), file_id(&self.dir.tokenizer_ckpt())?);
        meta.insert("saslm_ckpt".into(), file_id(&self.dir.saslm_ckpt())?);
        meta.insert("fmse_ckpt".into(), file_id(&self.dir.fmse_ckpt(opts.fmse_tag.as_deref()))?);
        report.write_json(self.dir.reports().join(format!("metrics{suffix}.json")))?;
        report.write_csv(self.dir.reports().join(format!("metrics{suffix}.csv")))?;
        Ok(report)
    }

    /// Enhance one file with the run's checkpoints.
    pub fn enhance_file(&self, input: &Path, output: &Path, prompt: Option<&Path>, opts: &EnhanceOptions) -> Result<()> {
        let cb = self.load_codebook()?;
        let saslm = self.load_saslm()?;
        let fmse = self.load_fmse(opts.fmse_tag.as_deref())?;
        let mut req = EnhanceRequest::new(AudioBuffer::read_wav(input)?);
        req.prompt = prompt.map(AudioBuffer::read_wav).transpose()?;
        req.settings = opts.settings;
        req.no_semantic = opts.no_semantic;
        req.no_prompt_tokens = opts.no_prompt_tokens;
        let models = Models {
            saslm: &saslm,
            fmse: &fmse,
            tokenizer: &cb,
        };
        let out = enhance(&req, &models, &self.vocoder())?;
        out.audio.write_wav(output)?;
        log::info!(
            "{} -> {} ({} frames, {} tokens, flow {:.1} ms)",
            input.display(),
            output.display(),
            out.mel.n_frames(),
            out.purified.len(),
            out.flow_time.as_secs_f64() * 1e3
        );
        Ok(())
    }

    /// Sweep the inference grid over the manifest items. Tokens come from the
    /// language model unless `oracle_tokens` is set.
    pub fn sweep(&self, grid: &SweepGrid, oracle_tokens: bool) -> Result<Vec<SweepRow>> {
        let pairs = self.load_pairs(None)?;
        let tokens = self.load_tokens()?;
        let fmse = self.load_fmse(None)?;
        let saslm = if oracle_tokens { None } else { Some(self.load_saslm()?) };
        self.begin()?;
        let items: Vec<SweepItem> = pairs
            .iter()
            .map(|p| {
                let toks = match &saslm {
                    Some(m) => m.purify(&p.degraded)?.ids,
                    None => Self::tokens_for(&tokens, &p.id)?,
                };
                Ok(SweepItem {
                    id: p.id.clone(),
                    clean_mel: acoustic_mel(&p.clean)?,
                    degraded_mel: acoustic_mel(&p.degraded)?,
                    tokens: toks,
                })
            })
            .collect::<Result<_>>()?;
        let rows = run_sweep(&fmse, &items, grid, self.cfg.infer.flow.seed)?;
        write_sweep_csv(self.dir.reports().join("sweep.csv"), &rows)?;
        Ok(rows)
    }

    /// Every stage in order, ending with evaluation at the configured settings.
    pub fn pipeline(&self) -> Result<MetricReport> {
        self.simulate()?;
        self.train_tokenizer()?;
        self.train_saslm(Phase::LmOnly)?;
        if self.cfg.saslm.encoder.steps > 0 {
            self.train_saslm(Phase::EncoderFinetune)?;
        }
        self.train_fm(self.cfg.fmse.ablation, None)?;
        self.evaluate(None, &EnhanceOptions::from_config(&self.cfg))
    }
}

#[derive(Debug, Clone)]
pub struct EnhanceOptions {
    pub settings: FlowSettings,
    pub no_semantic: bool,
    pub no_prompt_tokens: bool,
    /// Use `checkpoints/fmse-<tag>.ckpt` instead of the default flow model.
    pub fmse_tag: Option<String>,
    pub plots: bool,
}

impl EnhanceOptions {
    pub fn from_config(cfg: &PipelineConfig) -> Self {
        Self {
            settings: cfg.infer.flow,
            no_semantic: false,
            no_prompt_tokens: false,
            fmse_tag: None,
            plots: true,
        }
    }
}
