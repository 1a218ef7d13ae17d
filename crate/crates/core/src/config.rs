//! Experiment configuration: one TOML document with a section per module.
//!
//! Unknown keys are errors. Every check that spans two sections runs in
//! [`ExperimentConfig::validate`] before any work starts, and failures name
//! the offending field path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbones::{DecoderConfig, DecoderPretrainConfig, SynthSfmConfig};
use crate::checkpoint::config_hash;
use crate::corpus::CorpusConfig;
use crate::error::{Error, Result};
use crate::metrics::EvalOptions;
use crate::probe::ProbeConfig;
use crate::projector::{output_length, ProjectorConfig};
use crate::seed;
use crate::targets::FIRST_CONTENT;
use crate::training::{Stage1Config, Stage2Config};

/// Output locations. Relative entries are resolved against `root`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub root: PathBuf,
    pub corpus: PathBuf,
    pub targets_cache: PathBuf,
    pub decoder: PathBuf,
    pub stage1: PathBuf,
    pub stage2: PathBuf,
    pub reports: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            root: "runs/default".into(),
            corpus: "corpus.tsv".into(),
            targets_cache: "targets.smtc".into(),
            decoder: "decoder".into(),
            stage1: "stage1".into(),
            stage2: "stage2".into(),
            reports: "reports".into(),
        }
    }
}

impl PathsConfig {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed. When set, every section seed is derived from it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub corpus: CorpusConfig,
    pub sfm: SynthSfmConfig,
    pub projector: ProjectorConfig,
    pub decoder: DecoderConfig,
    pub decoder_pretrain: DecoderPretrainConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub probe: ProbeConfig,
    pub eval: EvalOptions,
    pub paths: PathsConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(toml_error_path(&e), e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config("<root>", e.to_string()))
    }

    /// SHA-256 of the serialised config; stored in checkpoints.
    pub fn hash(&self) -> Result<[u8; 32]> {
        Ok(config_hash(&self.to_toml()?))
    }

    /// Applies `section.field=value` overrides. Values are parsed as TOML
    /// and fall back to plain strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut root = toml::Value::try_from(self).map_err(|e| Error::config("<root>", e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (path, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::config(o, "override must look like section.field=value"))?;
            let path = path.trim();
            set_path(&mut root, path, parse_value(raw.trim()))?;
        }
        let text = toml::to_string(&root).map_err(|e| Error::config("<root>", e.to_string()))?;
        Self::from_toml(&text)
    }

    /// Returns the config with section seeds derived from the master seed,
    /// which is then cleared. Without a master seed this is a clone.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        if let Some(s) = c.seed.take() {
            c.corpus.seed = seed::mix(s, 1);
            c.sfm.seed = seed::mix(s, 2);
            c.projector.init_seed = seed::mix(s, 3);
            c.decoder.init_seed = seed::mix(s, 4);
            c.decoder_pretrain.seed = seed::mix(s, 5);
            c.stage1.seed = seed::mix(s, 6);
            c.stage2.seed = seed::mix(s, 7);
            c.probe.seed = seed::mix(s, 8);
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.sfm.validate()?;
        self.projector.validate()?;
        self.decoder.validate()?;
        self.decoder_pretrain.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.probe.validate()?;
        if self.eval.max_tokens == 0 {
            return Err(Error::config("eval.max_tokens", "must be positive"));
        }
        if self.sfm.d_in != self.projector.d_in {
            return Err(Error::config(
                "projector.d_in",
                format!("{} does not match sfm.d_in {}", self.projector.d_in, self.sfm.d_in),
            ));
        }
        if self.projector.d_out != self.decoder.d_model {
            return Err(Error::config(
                "projector.d_out",
                format!("{} does not match decoder.d_model {}", self.projector.d_out, self.decoder.d_model),
            ));
        }
        if self.decoder.embed_rank != 0 && self.decoder.embed_rank != self.sfm.d_in {
            return Err(Error::config(
                "decoder.embed_rank",
                format!("must be 0 or sfm.d_in ({}), got {}", self.sfm.d_in, self.decoder.embed_rank),
            ));
        }
        if self.decoder_pretrain.max_words < self.corpus.max_words {
            return Err(Error::config(
                "decoder_pretrain.max_words",
                format!("{} is below corpus.max_words {}", self.decoder_pretrain.max_words, self.corpus.max_words),
            ));
        }
        let words = self.corpus.min_words..=self.corpus.max_words;
        self.sfm.check_feasible(&self.projector, words)?;
        let longest = self.longest_averaged_len();
        if longest > self.stage1.batch_cap {
            return Err(Error::config(
                "stage1.batch_cap",
                format!("{} is below the longest averaged utterance ({longest} frames)", self.stage1.batch_cap),
            ));
        }
        // Stage 2 feeds [TASK] + L projected rows + [SEP] + the transcript.
        let positions = output_length(longest, &self.projector)? + 2 + self.corpus.max_words;
        if positions > self.decoder.max_positions {
            return Err(Error::config(
                "decoder.max_positions",
                format!("{} is below the longest stage-2 sequence ({positions} positions)", self.decoder.max_positions),
            ));
        }
        Ok(())
    }

    /// Averaged frame count of the longest utterance the corpus can produce.
    pub fn longest_averaged_len(&self) -> usize {
        let raw = self.corpus.max_words * self.sfm.repeat_range[1] + self.sfm.tail_range[1];
        raw.div_ceil(self.projector.avg_factor)
    }

    /// Vocabulary size implied by the decoder section.
    pub fn vocab_size(&self) -> usize {
        self.decoder.content_words + FIRST_CONTENT as usize
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(root: &mut toml::Value, path: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::config(parts[..i].join("."), "is not a section"))?;
        if i + 1 == parts.len() {
            // Optional fields (the master seed) are absent until set.
            if !table.contains_key(*part) && !(i == 0 && *part == "seed") {
                return Err(Error::config(path, "unknown field"));
            }
            table.insert(part.to_string(), value);
            return Ok(());
        }
        cur = table
            .get_mut(*part)
            .ok_or_else(|| Error::config(parts[..=i].join("."), "unknown section"))?;
    }
    Err(Error::config(path, "empty override path"))
}

/// Best-effort dotted path for a deserialisation error.
fn toml_error_path(e: &toml::de::Error) -> String {
    let msg = e.message();
    // serde reports unknown fields as "unknown field `x`, expected ...".
    if let Some(rest) = msg.strip_prefix("unknown field `") {
        if let Some(end) = rest.find('`') {
            return rest[..end].to_string();
        }
    }
    "<config>".to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let text = c.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml("[stage1]\nalhpa = 3.0\n").unwrap_err();
        assert!(matches!(err, Error::Config { .. }), "{err}");
        assert!(err.to_string().contains("alhpa"), "{err}");
    }

    #[test]
    fn partial_files_take_defaults() {
        let c = ExperimentConfig::from_toml("seed = 9\n[stage2]\nsigma = 0.0\n[stage1.schedule]\nbase_lr = 0.5\n").unwrap();
        assert_eq!(c.seed, Some(9));
        assert_eq!(c.stage2.sigma, 0.0);
        assert_eq!(c.stage2.steps, Stage2Config::default().steps);
        assert_eq!(c.stage1.schedule.base_lr, 0.5);
        assert_eq!(c.stage1.schedule.total_steps, Stage1Config::default().schedule.total_steps);
    }

    #[test]
    fn overrides_use_dotted_paths() {
        let c = ExperimentConfig::default()
            .with_overrides(&["stage1.alpha=7", "stage1.schedule.base_lr=2e-3", "paths.root=\"/tmp/x\""])
            .unwrap();
        assert_eq!(c.stage1.alpha, 7.0);
        assert_eq!(c.stage1.schedule.base_lr, 2e-3);
        assert_eq!(c.paths.root, PathBuf::from("/tmp/x"));
        let err = ExperimentConfig::default().with_overrides(&["stage1.alhpa=7"]).unwrap_err();
        assert!(err.to_string().contains("stage1.alhpa"), "{err}");
        let err = ExperimentConfig::default().with_overrides(&["stage9.alpha=7"]).unwrap_err();
        assert!(err.to_string().contains("stage9"), "{err}");
    }

    #[test]
    fn sigma_changes_the_hash() {
        let a = ExperimentConfig::default();
        let b = a.with_overrides(&["stage2.sigma=0"]).unwrap();
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }

    #[test]
    fn cross_section_checks_name_fields() {
        let cases = [
            ("projector.d_in=8", "projector.d_in"),
            ("projector.d_out=32", "projector.d_out"),
            ("decoder.embed_rank=4", "decoder.embed_rank"),
            ("stage1.batch_cap=16", "stage1.batch_cap"),
            ("sfm.repeat_range=[2, 3]", "sfm.repeat_range"),
        ];
        for (o, field) in cases {
            let c = ExperimentConfig::default().with_overrides(&[o]).unwrap();
            let err = c.validate().unwrap_err();
            assert!(err.to_string().contains(field), "{o}: {err}");
        }
    }

    #[test]
    fn master_seed_derives_section_seeds() {
        let c = ExperimentConfig::default().with_overrides(&["seed=3"]).unwrap();
        let r = c.resolved();
        assert_eq!(r.seed, None);
        assert_ne!(r.stage1.seed, ExperimentConfig::default().stage1.seed);
        assert_eq!(r, c.resolved());
    }
}
