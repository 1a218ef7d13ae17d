//! Embedding noise probe.
//!
//! For a noise degree `d`, every dimension of every transcript embedding gets
//! `r·d` added, with `r` drawn uniformly from 1..=9 per dimension. The frozen
//! decoder repeats the noisy sequence and the corpus WER is recorded. The
//! embedding error threshold (EET) is the largest degree whose WER, and that
//! of every smaller degree, stays within `tolerance` of the clean WER. The
//! stage-1 MSE target is `(mse_scale · EET)²`.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbones::ToyDecoder;
use crate::corpus::Sample;
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::seed;
use crate::targets::normalize;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DegreeScale {
    /// Degrees are multiplied by the mean L2 norm of the embedding rows.
    EmbeddingNorm,
    /// Degrees are multiplied by the RMS of the embedding table entries.
    EmbeddingRms,
    /// Degrees are used as given.
    Absolute,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub degrees: Vec<f64>,
    pub samples: usize,
    pub seed: u64,
    pub max_tokens: usize,
    pub scale: DegreeScale,
    /// Draw a random sign per dimension as well as a magnitude.
    pub symmetric: bool,
    /// Allowed WER increase over clean, in WER points.
    pub tolerance: f64,
    pub mse_scale: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            // The toy decoder shrugs off 1e-1·RMS, so the ladder starts a
            // decade higher to bracket the threshold.
            degrees: vec![0.0, 1.0, 1e-1, 1e-2, 1e-3, 1e-4],
            samples: 200,
            seed: 3,
            max_tokens: 150,
            scale: DegreeScale::EmbeddingRms,
            symmetric: false,
            tolerance: 1.0,
            mse_scale: 1e3,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.degrees.is_empty() {
            return Err(Error::config("probe.degrees", "must not be empty"));
        }
        for (i, d) in self.degrees.iter().enumerate() {
            if !(*d >= 0.0 && d.is_finite()) {
                return Err(Error::config("probe.degrees", format!("degree {d} must be finite and >= 0")));
            }
            if self.degrees[..i].contains(d) {
                return Err(Error::config("probe.degrees", format!("degree {d} listed twice")));
            }
        }
        if self.samples == 0 || self.max_tokens == 0 {
            return Err(Error::config("probe.samples", "samples and max_tokens must be positive"));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::config("probe.tolerance", "must be >= 0"));
        }
        if !(self.mse_scale > 0.0) {
            return Err(Error::config("probe.mse_scale", "must be positive"));
        }
        Ok(())
    }
}

/// Adds `r·degree` (r uniform in 1..=9, per element) to every entry.
/// Degree 0 returns an exact copy.
pub fn inject_noise<R: Rng + ?Sized>(embeddings: &Tensor, degree: f64, symmetric: bool, rng: &mut R) -> Tensor {
    let mut out = embeddings.clone();
    if degree == 0.0 {
        return out;
    }
    for v in out.data_mut() {
        let r = rng.random_range(1..=9) as f64;
        let sign = if symmetric && rng.random::<bool>() { -1.0 } else { 1.0 };
        *v += sign * r * degree;
    }
    out
}

/// Mean L2 norm of the table's rows.
pub fn embedding_norm(table: &Tensor) -> f64 {
    (0..table.rows())
        .map(|r| table.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
        .sum::<f64>()
        / table.rows() as f64
}

/// Root mean square over all entries of the table.
pub fn embedding_rms(table: &Tensor) -> f64 {
    (table.sum_squares() / table.len() as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRow {
    pub degree: f64,
    /// Degree after scaling, in embedding units.
    pub absolute: f64,
    pub wer: f64,
    pub cer: f64,
    pub truncations: usize,
    pub hypotheses: Vec<Vec<u32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EetReport {
    pub rows: Vec<ProbeRow>,
    pub clean_wer: f64,
    pub rms: f64,
    /// Multiplier applied to the nominal degrees.
    pub unit: f64,
    /// Absolute EET, if some positive degree stays within tolerance.
    pub eet: Option<f64>,
    pub mse_target: Option<f64>,
}

impl EetReport {
    pub fn table(&self) -> String {
        let mut s = String::from("degree\tabsolute\twer\tcer\ttruncations\n");
        for r in &self.rows {
            let _ = writeln!(s, "{}\t{:e}\t{:.2}\t{:.2}\t{}", r.degree, r.absolute, r.wer, r.cer, r.truncations);
        }
        s
    }

    pub fn summary(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "none".into());
        format!(
            "clean_wer={} rms={} unit={} eet={} mse_target={}",
            self.clean_wer,
            self.rms,
            self.unit,
            fmt(self.eet),
            fmt(self.mse_target)
        )
    }
}

/// Runs the noise ladder over the first `cfg.samples` of `samples`.
pub fn run_probe(dec: &ToyDecoder, samples: &[Sample], cfg: &ProbeConfig) -> Result<EetReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Argument("probe corpus is empty".into()));
    }
    let samples = &samples[..cfg.samples.min(samples.len())];
    let ids: Vec<Vec<u32>> = samples
        .iter()
        .map(|s| dec.vocab.tokenize(&s.transcript))
        .collect::<Result<_>>()?;
    let rms = embedding_rms(dec.embed_table());
    let unit = match cfg.scale {
        DegreeScale::EmbeddingNorm => embedding_norm(dec.embed_table()),
        DegreeScale::EmbeddingRms => rms,
        DegreeScale::Absolute => 1.0,
    };
    let mut rows = Vec::with_capacity(cfg.degrees.len());
    for (di, &degree) in cfg.degrees.iter().enumerate() {
        let absolute = degree * unit;
        let mut items = Vec::with_capacity(samples.len());
        let mut hyps = Vec::with_capacity(samples.len());
        for (s, toks) in samples.iter().zip(&ids) {
            let mut rng = seed::rng(seed::mix(cfg.seed, di as u64), s.id);
            let clean = dec.embed_ids(toks);
            let noisy = inject_noise(&clean, absolute, cfg.symmetric, &mut rng);
            let out = dec.greedy_decode(&dec.context(&noisy)?, cfg.max_tokens)?;
            let hyp = normalize(&dec.vocab.detokenize(out.words()));
            items.push((s.id, normalize(&s.transcript), hyp, out.truncated));
            hyps.push(out.words().to_vec());
        }
        let rep = EvalReport::from_pairs(items);
        rows.push(ProbeRow {
            degree,
            absolute,
            wer: rep.wer,
            cer: rep.cer,
            truncations: rep.truncations,
            hypotheses: hyps,
        });
    }
    let clean_wer = match rows.iter().find(|r| r.degree == 0.0) {
        Some(r) => r.wer,
        None => {
            let items = samples
                .iter()
                .zip(&ids)
                .map(|(s, t)| {
                    let out = dec.greedy_decode(&dec.context(&dec.embed_ids(t))?, cfg.max_tokens)?;
                    Ok((s.id, normalize(&s.transcript), normalize(&dec.vocab.detokenize(out.words())), out.truncated))
                })
                .collect::<Result<Vec<_>>>()?;
            EvalReport::from_pairs(items).wer
        }
    };
    let mut positive: Vec<&ProbeRow> = rows.iter().filter(|r| r.degree > 0.0).collect();
    positive.sort_by(|a, b| a.degree.total_cmp(&b.degree));
    let mut eet = None;
    for r in positive {
        if r.wer <= clean_wer + cfg.tolerance {
            eet = Some(r.absolute);
        } else {
            break;
        }
    }
    Ok(EetReport {
        clean_wer,
        rms,
        unit,
        mse_target: eet.map(|e| (cfg.mse_scale * e).powi(2)),
        eet,
        rows,
    })
}
