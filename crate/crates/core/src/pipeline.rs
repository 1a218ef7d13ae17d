//! Wiring of the modules into one reproducible experiment rooted at
//! `paths.root`. Every artifact has a fixed location, and loaders report a
//! missing artifact as [`Error::Prerequisite`] naming the command that
//! produces it.

use std::path::{Path, PathBuf};

use crate::backbones::{pretrain_decoder, DecoderPretrainReport, SynthSfm, ToyDecoder};
use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::corpus::{generate_corpus, read_corpus, split, Sample, Split};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, ContextSource, EvalReport};
use crate::probe::{run_probe, EetReport};
use crate::projector::ProjectorModel;
use crate::targets::{cache_key, precompute_targets, read_cache, Vocab};
use crate::training::{
    log_text, prepare_samples, train_stage1, train_stage2, use_cached_targets, PreparedSample, RunOptions,
    TrainOutcome,
};

pub const CONFIG_FILE: &str = "config.toml";
pub const DECODER_FILE: &str = "decoder.smck";
pub const PROJECTOR_FILE: &str = "projector.smck";
pub const LOG_FILE: &str = "train.log";

/// A validated, seed-resolved experiment.
#[derive(Debug)]
pub struct Pipeline {
    pub config: ExperimentConfig,
    pub vocab: Vocab,
    pub sfm: SynthSfm,
}

impl Pipeline {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        let config = config.resolved();
        config.validate()?;
        let vocab = Vocab::synthetic(config.decoder.content_words)?;
        let sfm = SynthSfm::new(config.sfm.clone(), vocab.len())?;
        Ok(Self { config, vocab, sfm })
    }

    fn path(&self, p: &Path) -> PathBuf {
        self.config.paths.resolve(p)
    }

    pub fn root(&self) -> &Path {
        &self.config.paths.root
    }

    pub fn corpus_path(&self) -> PathBuf {
        self.path(&self.config.paths.corpus)
    }

    pub fn targets_cache_path(&self) -> PathBuf {
        self.path(&self.config.paths.targets_cache)
    }

    pub fn decoder_dir(&self) -> PathBuf {
        self.path(&self.config.paths.decoder)
    }

    pub fn stage1_dir(&self) -> PathBuf {
        self.path(&self.config.paths.stage1)
    }

    /// One directory per σ, so task-specific and task-agnostic runs coexist.
    pub fn stage2_dir(&self) -> PathBuf {
        self.path(&self.config.paths.stage2)
            .join(format!("sigma-{}", self.config.stage2.sigma))
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.path(&self.config.paths.reports)
    }

    /// Writes the resolved config next to a command's outputs.
    pub fn write_config(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(CONFIG_FILE);
        std::fs::write(&path, self.config.to_toml()?)?;
        Ok(path)
    }

    pub fn synth(&self) -> Result<Vec<Sample>> {
        generate_corpus(&self.config.corpus, &self.vocab)
    }

    pub fn load_corpus(&self) -> Result<Vec<Sample>> {
        let path = self.corpus_path();
        require(&path, "synth")?;
        read_corpus(&path)
    }

    pub fn train_split(corpus: &[Sample]) -> Vec<Sample> {
        split(corpus, Split::Train)
    }

    pub fn test_split(corpus: &[Sample]) -> Vec<Sample> {
        split(corpus, Split::Test)
    }

    /// Pretrains and freezes the decoder. With a factored embedding the
    /// basis is the frontend's acoustic table.
    pub fn pretrain_decoder(&self, corpus: &[Sample]) -> Result<(ToyDecoder, DecoderPretrainReport)> {
        let basis = (self.config.decoder.embed_rank > 0).then(|| self.sfm.acoustic_table());
        pretrain_decoder(
            &Self::train_split(corpus),
            &Self::test_split(corpus),
            self.config.decoder.clone(),
            basis,
            &self.config.decoder_pretrain,
        )
    }

    pub fn decoder_path(&self) -> PathBuf {
        self.decoder_dir().join(DECODER_FILE)
    }

    pub fn load_decoder(&self) -> Result<ToyDecoder> {
        let path = self.decoder_path();
        require(&path, "pretrain-decoder")?;
        let dec = ToyDecoder::from_checkpoint(self.config.decoder.clone(), &Checkpoint::load(&path)?)?;
        if let Some(basis) = dec.basis() {
            if basis != self.sfm.acoustic_table() {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "{} was trained against a different sfm; rerun pretrain-decoder",
                    path.display()
                )));
            }
        }
        Ok(dec)
    }

    /// Training samples with targets from the cache, rebuilding the cache
    /// when it is missing or keyed to other inputs.
    pub fn prepare_training(&self, corpus: &[Sample], dec: &ToyDecoder) -> Result<Vec<PreparedSample>> {
        let train = Self::train_split(corpus);
        let table = dec.embed_table();
        let (mut data, skipped) = prepare_samples(
            &train,
            &self.vocab,
            &self.sfm,
            &self.config.projector,
            table,
            self.config.stage1.on_length_mismatch,
        )?;
        if !skipped.is_empty() {
            log::warn!("{} training samples skipped for length", skipped.len());
        }
        let path = self.targets_cache_path();
        let key = cache_key(&self.vocab, table, &self.config.projector, &self.sfm);
        let cached = match read_cache(&path, &key) {
            Ok(c) => c,
            Err(e @ (Error::StaleCache(_) | Error::Io(_) | Error::Truncated(_))) => {
                log::info!("rebuilding target cache ({e})");
                if let Some(dir) = path.parent() {
                    std::fs::create_dir_all(dir)?;
                }
                precompute_targets(&train, &self.vocab, table, &self.config.projector, &self.sfm, &path)?;
                read_cache(&path, &key)?
            }
            Err(e) => return Err(e),
        };
        let used = use_cached_targets(&mut data, cached)?;
        log::info!("{used} of {} targets served from cache", data.len());
        Ok(data)
    }

    /// Stage 1 from a fresh projector, or from `run.resume`.
    pub fn stage1(&self, data: &[PreparedSample], run: &RunOptions) -> Result<(ProjectorModel, TrainOutcome)> {
        let mut proj = ProjectorModel::new(self.config.projector.clone())?;
        let out = train_stage1(&mut proj, data, &self.config.stage1, run)?;
        Ok((proj, out))
    }

    pub fn stage1_path(&self) -> PathBuf {
        self.stage1_dir().join(PROJECTOR_FILE)
    }

    pub fn stage2_path(&self) -> PathBuf {
        self.stage2_dir().join(PROJECTOR_FILE)
    }

    /// Projector weights from `path`; `producer` names the command that
    /// writes it.
    pub fn load_projector(&self, path: &Path, producer: &str) -> Result<ProjectorModel> {
        require(path, producer)?;
        let mut proj = ProjectorModel::new(self.config.projector.clone())?;
        Checkpoint::load(path)?.restore(&mut proj.params, None, None)?;
        Ok(proj)
    }

    pub fn stage2(
        &self,
        projector: &mut ProjectorModel,
        dec: &ToyDecoder,
        data: &[PreparedSample],
        run: &RunOptions,
    ) -> Result<TrainOutcome> {
        train_stage2(projector, dec, data, &self.config.stage2, run)
    }

    /// Held-out evaluation through `projector`, or with oracle embeddings.
    pub fn evaluate(&self, projector: Option<&ProjectorModel>, dec: &ToyDecoder, corpus: &[Sample]) -> Result<EvalReport> {
        let source = match projector {
            Some(projector) => ContextSource::Projector {
                projector,
                sfm: &self.sfm,
            },
            None => ContextSource::Oracle,
        };
        evaluate(source, dec, &Self::test_split(corpus), self.config.eval)
    }

    pub fn probe(&self, dec: &ToyDecoder, corpus: &[Sample]) -> Result<EetReport> {
        run_probe(dec, &Self::test_split(corpus), &self.config.probe)
    }
}

/// Saves final weights and the step log of a training run into `dir`.
pub fn save_run(dir: &Path, projector: &ProjectorModel, out: &TrainOutcome, hash: [u8; 32]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let step = out.logs.last().map(|l| l.step).unwrap_or(0);
    let path = dir.join(PROJECTOR_FILE);
    Checkpoint::capture(&projector.params, Some(&out.optimizer), step, hash).save(&path)?;
    std::fs::write(dir.join(LOG_FILE), log_text(&out.logs))?;
    Ok(path)
}

/// Newest `*.smck` checkpoint in `dir` other than the final weights.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut found: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|e| e == "smck") && p.file_name().is_some_and(|n| n != PROJECTOR_FILE)
        })
        .collect();
    // Step numbers are zero-padded, so name order is step order.
    found.sort();
    Ok(found.pop())
}

fn require(path: &Path, producer: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Prerequisite(format!(
            "{} not found; run `{producer}` first",
            path.display()
        )))
    }
}
