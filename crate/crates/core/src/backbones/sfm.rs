//! Synthetic speech frontend. Each token becomes a run of noisy copies of
//! its fixed acoustic vector, so the token sequence behind any frame
//! sequence is known exactly. Utterances end in a run of silence frames,
//! which use the acoustic row of the pad token.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projector::{average_frames, output_length, ProjectorConfig};
use crate::seed;
use crate::targets::{Vocab, PAD};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSfmConfig {
    pub d_in: usize,
    /// Inclusive range of frames emitted per token.
    pub repeat_range: [usize; 2],
    /// Inclusive range of trailing silence frames.
    pub tail_range: [usize; 2],
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSfmConfig {
    fn default() -> Self {
        Self {
            d_in: 16,
            repeat_range: [7, 9],
            tail_range: [16, 24],
            noise_sigma: 0.05,
            seed: 11,
        }
    }
}

impl SynthSfmConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.repeat_range;
        if lo == 0 || lo > hi {
            return Err(Error::config("sfm.repeat_range", format!("need 1 <= min <= max, got [{lo}, {hi}]")));
        }
        let [tlo, thi] = self.tail_range;
        if tlo > thi {
            return Err(Error::config("sfm.tail_range", format!("need min <= max, got [{tlo}, {thi}]")));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("sfm.noise_sigma", "must be finite and >= 0"));
        }
        if self.d_in == 0 {
            return Err(Error::config("sfm.d_in", "must be positive"));
        }
        Ok(())
    }

    /// Checks that every sentence length in `words` yields room for its
    /// tokens plus one pad, even when every token gets the minimum repeat
    /// and the tail is as short as allowed.
    pub fn check_feasible(&self, projector: &ProjectorConfig, words: std::ops::RangeInclusive<usize>) -> Result<()> {
        for n in words {
            let t_avg = (n * self.repeat_range[0] + self.tail_range[0]).div_ceil(projector.avg_factor);
            let ok = output_length(t_avg, projector).map(|l| l > n).unwrap_or(false);
            if !ok {
                return Err(Error::config(
                    "sfm.repeat_range",
                    format!(
                        "a {n}-word sentence at minimum repeat {} and tail {} does not leave room for {n} tokens plus a pad",
                        self.repeat_range[0], self.tail_range[0]
                    ),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthSfm {
    pub config: SynthSfmConfig,
    acoustic: Tensor,
}

impl SynthSfm {
    pub fn new(config: SynthSfmConfig, vocab_size: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(config.seed, 0xac05);
        let acoustic = Tensor::randn(&[vocab_size, config.d_in], 1.0, &mut rng);
        Ok(Self { config, acoustic })
    }

    pub fn acoustic_table(&self) -> &Tensor {
        &self.acoustic
    }

    pub fn vocab_size(&self) -> usize {
        self.acoustic.rows()
    }

    /// Bytes identifying everything that affects generated frames.
    pub fn config_fingerprint(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::new();
        let fields = [
            c.d_in,
            c.repeat_range[0],
            c.repeat_range[1],
            c.tail_range[0],
            c.tail_range[1],
            self.vocab_size(),
        ];
        for v in fields.into_iter().map(|v| v as u64).chain([c.seed]) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&c.noise_sigma.to_bits().to_le_bytes());
        out
    }

    /// Frames for `ids`; deterministic in `(config.seed, sample_seed)`.
    pub fn synth_speech(&self, ids: &[u32], sample_seed: u64) -> Result<Tensor> {
        let d = self.config.d_in;
        let [lo, hi] = self.config.repeat_range;
        let mut rng = seed::rng(self.config.seed, sample_seed);
        let noise = Normal::new(0.0, self.config.noise_sigma).map_err(|e| Error::Argument(e.to_string()))?;
        let mut data = Vec::new();
        let mut rows = 0;
        if let Some(id) = ids.iter().find(|&&id| Vocab::is_reserved(id) || id as usize >= self.vocab_size()) {
            return Err(Error::Argument(format!("token id {id} has no acoustic realisation")));
        }
        let [tlo, thi] = self.config.tail_range;
        let runs: Vec<(u32, usize)> = ids.iter().map(|&id| (id, rng.random_range(lo..=hi))).collect();
        let tail = rng.random_range(tlo..=thi);
        for (id, r) in runs.into_iter().chain([(PAD, tail)]) {
            let base = self.acoustic.row(id as usize);
            for _ in 0..r {
                data.extend(base.iter().map(|&b| {
                    if self.config.noise_sigma > 0.0 {
                        b + noise.sample(&mut rng)
                    } else {
                        b
                    }
                }));
            }
            rows += r;
        }
        Tensor::from_rows(rows, d, data)
    }

    /// Frames after averaging, ready for the projector.
    pub fn averaged(&self, ids: &[u32], sample_seed: u64, factor: usize) -> Result<Tensor> {
        average_frames(&self.synth_speech(ids, sample_seed)?, factor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sfm(lo: usize, hi: usize, sigma: f64) -> SynthSfm {
        let cfg = SynthSfmConfig {
            repeat_range: [lo, hi],
            tail_range: [0, 0],
            noise_sigma: sigma,
            ..Default::default()
        };
        SynthSfm::new(cfg, 20).unwrap()
    }

    #[test]
    fn zero_noise_fixed_repeat_copies_rows() {
        let s = sfm(8, 8, 0.0);
        let f = s.synth_speech(&[5], 1).unwrap();
        assert_eq!(f.rows(), 8);
        for r in 0..8 {
            assert_eq!(f.row(r), s.acoustic_table().row(5));
        }
    }

    #[test]
    fn length_is_sum_of_repeats_and_deterministic() {
        let s = sfm(8, 12, 0.05);
        let a = s.synth_speech(&[5, 6, 7], 42).unwrap();
        let b = s.synth_speech(&[5, 6, 7], 42).unwrap();
        assert_eq!(a, b);
        assert!((24..=36).contains(&a.rows()));
        assert_ne!(a, s.synth_speech(&[5, 6, 7], 43).unwrap());
    }

    #[test]
    fn tail_uses_the_pad_row() {
        let cfg = SynthSfmConfig {
            repeat_range: [8, 8],
            tail_range: [3, 3],
            noise_sigma: 0.0,
            ..Default::default()
        };
        let s = SynthSfm::new(cfg, 20).unwrap();
        let f = s.synth_speech(&[5, 6], 0).unwrap();
        assert_eq!(f.rows(), 19);
        assert_eq!(f.row(18), s.acoustic_table().row(PAD as usize));
        assert_eq!(f.row(15), s.acoustic_table().row(6));
    }

    #[test]
    fn reserved_ids_are_rejected() {
        assert!(matches!(sfm(8, 8, 0.0).synth_speech(&[1], 0), Err(Error::Argument(_))));
    }

    #[test]
    fn feasibility_check() {
        let p = ProjectorConfig::default();
        let ok = SynthSfmConfig::default();
        ok.check_feasible(&p, 3..=8).unwrap();
        let tight = SynthSfmConfig {
            repeat_range: [8, 12],
            tail_range: [0, 4],
            ..Default::default()
        };
        assert!(tight.check_feasible(&p, 1..=8).is_err());
    }
}
