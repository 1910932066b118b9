//! Irregular-series dataset handling: the NDJSON record format, synthetic
//! generators, global time normalization, deterministic splitting and
//! padded batching.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::tpc::IrregularBatch;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// One irregular multivariate series. `values` and `observed` are m rows of
/// length `times.len()`; a zero in `observed` means the entry is missing and
/// the stored value must be 0.0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesRecord {
    pub id: String,
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub observed: Vec<Vec<u8>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step_labels: Option<Vec<usize>>,
}

impl SeriesRecord {
    pub fn channels(&self) -> usize {
        self.values.len()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn observed_count(&self) -> usize {
        self.observed
            .iter()
            .map(|row| row.iter().filter(|&&o| o != 0).count())
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.times.len();
        if self.values.is_empty() {
            return Err(Error::validation(format!(
                "record {}: no channels",
                self.id
            )));
        }
        if self.values.len() != self.observed.len() {
            return Err(Error::validation(format!(
                "record {}: {} value rows vs {} observed rows",
                self.id,
                self.values.len(),
                self.observed.len()
            )));
        }
        for (values, observed) in self.values.iter().zip(&self.observed) {
            if values.len() != l || observed.len() != l {
                return Err(Error::validation(format!(
                    "record {}: row length differs from times length {l}",
                    self.id
                )));
            }
            for (j, (&v, &o)) in values.iter().zip(observed).enumerate() {
                if o != 0 && o != 1 {
                    return Err(Error::validation(format!(
                        "record {}: observed flag {o} at step {j} is not 0/1",
                        self.id
                    )));
                }
                if o == 0 && v != 0.0 {
                    return Err(Error::validation(format!(
                        "record {}: missing entry at step {j} stores non-zero value {v}",
                        self.id
                    )));
                }
                if !v.is_finite() {
                    return Err(Error::validation(format!(
                        "record {}: non-finite value at step {j}",
                        self.id
                    )));
                }
            }
        }
        if self.times.windows(2).any(|w| !(w[0] <= w[1])) {
            return Err(Error::validation(format!(
                "record {}: times not sorted",
                self.id
            )));
        }
        if let Some(sl) = &self.step_labels {
            if sl.len() != l {
                return Err(Error::validation(format!(
                    "record {}: {} step labels for {l} steps",
                    self.id,
                    sl.len()
                )));
            }
        }
        Ok(())
    }
}

/// Parameters of the synthetic RBF-smoothed interpolation dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_samples: usize,
    pub grid_len: usize,
    pub t_range: [f64; 2],
    pub n_ref: usize,
    pub rbf_bandwidth: f64,
    pub n_observed: usize,
    pub split: Vec<f64>,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_samples: 1000,
            grid_len: 100,
            t_range: [0.0, 1.0],
            n_ref: 10,
            rbf_bandwidth: 100.0,
            n_observed: 20,
            split: vec![0.8, 0.2],
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_observed > self.grid_len {
            return Err(Error::config(format!(
                "n_observed {} exceeds grid_len {}",
                self.n_observed, self.grid_len
            )));
        }
        if self.rbf_bandwidth <= 0.0 {
            return Err(Error::config("rbf_bandwidth must be positive".to_string()));
        }
        if self.n_ref < 1 || self.grid_len < 2 {
            return Err(Error::config(
                "need n_ref >= 1 and grid_len >= 2".to_string(),
            ));
        }
        if !(self.t_range[0] < self.t_range[1]) {
            return Err(Error::config("t_range must be increasing".to_string()));
        }
        let total: f64 = self.split.iter().sum();
        if self.split.is_empty()
            || self.split.iter().any(|&f| f <= 0.0)
            || (total - 1.0).abs() > 1e-9
        {
            return Err(Error::config(format!(
                "split fractions must be positive and sum to 1, got {:?}",
                self.split
            )));
        }
        Ok(())
    }
}

/// Normalized RBF weights of each reference point at query time `t`,
/// computed in softmax form so extreme bandwidths stay finite. The weights
/// form a partition of unity.
pub fn rbf_weights(t: f64, ref_times: &[f64], bandwidth: f64) -> Vec<f64> {
    let logits: Vec<f64> = ref_times
        .iter()
        .map(|&r| -bandwidth * (t - r) * (t - r))
        .collect();
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
    let mut w: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Ground-truth curve plus its irregular subsample for one synthetic record.
struct SyntheticDraw {
    grid_values: Vec<f64>,
    picked: Vec<usize>,
}

fn draw_synthetic_sample(cfg: &SyntheticConfig, rng: &mut Rng) -> SyntheticDraw {
    let ref_times = linspace(cfg.t_range[0], cfg.t_range[1], cfg.n_ref);
    let ref_values: Vec<f64> = (0..cfg.n_ref).map(|_| rng.normal(0.0, 1.0)).collect();
    let grid = linspace(cfg.t_range[0], cfg.t_range[1], cfg.grid_len);
    let grid_values: Vec<f64> = grid
        .iter()
        .map(|&t| {
            rbf_weights(t, &ref_times, cfg.rbf_bandwidth)
                .iter()
                .zip(&ref_values)
                .map(|(w, v)| w * v)
                .sum()
        })
        .collect();
    let picked = rng.sample_indices(cfg.grid_len, cfg.n_observed);
    SyntheticDraw {
        grid_values,
        picked,
    }
}

/// Smooth quasi-periodic curves from RBF-weighted standard-normal reference
/// values, irregularly subsampled. Returns the observed records plus the
/// full-grid ground-truth records (same ids, fully observed).
pub fn generate_synthetic(
    cfg: &SyntheticConfig,
    rng: &mut Rng,
) -> Result<(Vec<SeriesRecord>, Vec<SeriesRecord>)> {
    cfg.validate()?;
    let grid = linspace(cfg.t_range[0], cfg.t_range[1], cfg.grid_len);
    let mut observed_records = Vec::with_capacity(cfg.n_samples);
    let mut truth_records = Vec::with_capacity(cfg.n_samples);
    for i in 0..cfg.n_samples {
        let draw = draw_synthetic_sample(cfg, rng);
        let id = format!("syn-{i:05}");
        observed_records.push(SeriesRecord {
            id: id.clone(),
            times: draw.picked.iter().map(|&j| grid[j]).collect(),
            values: vec![draw.picked.iter().map(|&j| draw.grid_values[j]).collect()],
            observed: vec![vec![1; cfg.n_observed]],
            label: None,
            step_labels: None,
        });
        truth_records.push(SeriesRecord {
            id,
            times: grid.clone(),
            values: vec![draw.grid_values],
            observed: vec![vec![1; cfg.grid_len]],
            label: None,
            step_labels: None,
        });
    }
    Ok((observed_records, truth_records))
}

/// Parameters of the two-frequency classification dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TwoFreqConfig {
    pub n_samples: usize,
    pub grid_len: usize,
    pub n_observed: usize,
    pub freq0: f64,
    pub freq1: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for TwoFreqConfig {
    fn default() -> Self {
        TwoFreqConfig {
            n_samples: 1000,
            grid_len: 100,
            n_observed: 20,
            freq0: 2.0,
            freq1: 3.0,
            noise_std: 0.1,
            seed: 0,
        }
    }
}

/// Balanced two-class dataset: unit-amplitude sinusoids at freq0 vs freq1
/// over [0, 1], random phase, irregularly subsampled, additive Gaussian
/// noise on the observed values.
pub fn generate_synthetic_classification(
    cfg: &TwoFreqConfig,
    rng: &mut Rng,
) -> Result<Vec<SeriesRecord>> {
    if cfg.n_observed > cfg.grid_len {
        return Err(Error::config(format!(
            "n_observed {} exceeds grid_len {}",
            cfg.n_observed, cfg.grid_len
        )));
    }
    let grid = linspace(0.0, 1.0, cfg.grid_len);
    let mut records = Vec::with_capacity(cfg.n_samples);
    for i in 0..cfg.n_samples {
        let label = i % 2;
        let freq = if label == 0 { cfg.freq0 } else { cfg.freq1 };
        let phase = rng.uniform(0.0, std::f64::consts::TAU);
        let picked = rng.sample_indices(cfg.grid_len, cfg.n_observed);
        let values: Vec<f64> = picked
            .iter()
            .map(|&j| {
                (std::f64::consts::TAU * freq * grid[j] + phase).sin()
                    + rng.normal(0.0, cfg.noise_std)
            })
            .collect();
        records.push(SeriesRecord {
            id: format!("freq-{i:05}"),
            times: picked.iter().map(|&j| grid[j]).collect(),
            values: vec![values],
            observed: vec![vec![1; cfg.n_observed]],
            label: Some(label),
            step_labels: None,
        });
    }
    rng.shuffle(&mut records);
    Ok(records)
}

/// Affine map taking raw dataset times into [0, 1], kept for inversion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeMap {
    pub t_min: f64,
    pub t_max: f64,
}

impl TimeMap {
    pub fn apply(&self, t: f64) -> f64 {
        if self.t_max == self.t_min {
            0.0
        } else {
            (t - self.t_min) / (self.t_max - self.t_min)
        }
    }

    pub fn invert(&self, u: f64) -> f64 {
        self.t_min + u * (self.t_max - self.t_min)
    }
}

/// Rescales every record's times into [0, 1] using the dataset-global
/// min/max, returning the map for inversion. Keeps exp/sinh/cosh kernel
/// arguments in a safe range.
pub fn normalize_times(records: &mut [SeriesRecord]) -> TimeMap {
    let mut t_min = f64::INFINITY;
    let mut t_max = f64::NEG_INFINITY;
    for r in records.iter() {
        for &t in &r.times {
            t_min = t_min.min(t);
            t_max = t_max.max(t);
        }
    }
    if !t_min.is_finite() || !t_max.is_finite() {
        return TimeMap {
            t_min: 0.0,
            t_max: 0.0,
        };
    }
    let map = TimeMap { t_min, t_max };
    for r in records.iter_mut() {
        for t in &mut r.times {
            *t = map.apply(*t);
        }
    }
    map
}

/// Deterministic shuffled split by fractions that must sum to one. Every
/// part must end up non-empty.
pub fn split(
    records: &[SeriesRecord],
    fractions: &[f64],
    rng: &mut Rng,
) -> Result<Vec<Vec<SeriesRecord>>> {
    let total: f64 = fractions.iter().sum();
    if fractions.is_empty() || (total - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!(
            "split fractions must sum to 1, got {fractions:?}"
        )));
    }
    let n = records.len();
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut parts = Vec::with_capacity(fractions.len());
    let mut start = 0usize;
    let mut cum = 0.0;
    for (i, &f) in fractions.iter().enumerate() {
        cum += f;
        let end = if i + 1 == fractions.len() {
            n
        } else {
            (cum * n as f64).round() as usize
        };
        if end <= start {
            return Err(Error::config(format!(
                "split fraction {f} yields an empty part for {n} records"
            )));
        }
        parts.push(
            order[start..end]
                .iter()
                .map(|&k| records[k].clone())
                .collect(),
        );
        start = end;
    }
    Ok(parts)
}

/// Packs records into padded batches. Each batch is padded to its own max
/// length or to `pad_to`, whichever is larger; padded slots repeat the last
/// timestamp and carry an all-zero observed mask.
pub fn batchify(
    records: &[SeriesRecord],
    batch_size: usize,
    pad_to: Option<usize>,
) -> Result<Vec<IrregularBatch>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size must be positive".to_string()));
    }
    if records.is_empty() {
        return Ok(Vec::new());
    }
    let m = records[0].channels();
    let mut batches = Vec::new();
    for chunk in records.chunks(batch_size) {
        let bsz = chunk.len();
        let mut l = chunk.iter().map(|r| r.len()).max().unwrap_or(0);
        if let Some(p) = pad_to {
            l = l.max(p);
        }
        let mut values = Tensor::zeros(&[bsz, m, l]);
        let mut observed = Tensor::zeros(&[bsz, m, l]);
        let mut times = Tensor::zeros(&[bsz, l]);
        let mut valid_len = Vec::with_capacity(bsz);
        for (b, r) in chunk.iter().enumerate() {
            if r.channels() != m {
                return Err(Error::validation(format!(
                    "record {}: {} channels, batch expects {m}",
                    r.id,
                    r.channels()
                )));
            }
            r.validate()?;
            let rl = r.len();
            valid_len.push(rl);
            let last_t = *r.times.last().unwrap_or(&0.0);
            for j in 0..l {
                times.data_mut()[b * l + j] = if j < rl { r.times[j] } else { last_t };
            }
            for li in 0..m {
                for j in 0..rl {
                    values.data_mut()[(b * m + li) * l + j] = r.values[li][j];
                    observed.data_mut()[(b * m + li) * l + j] = f64::from(r.observed[li][j]);
                }
            }
        }
        batches.push(IrregularBatch::new(values, observed, times, valid_len)?);
    }
    Ok(batches)
}

/// Reads one record per NDJSON line, validating structure and invariants.
pub fn read_ndjson(path: &Path) -> Result<Vec<SeriesRecord>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SeriesRecord = serde_json::from_str(&line)
            .map_err(|e| Error::parse(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        record.validate()?;
        records.push(record);
    }
    Ok(records)
}

/// Writes records as UTF-8 NDJSON with LF line endings. Floating-point
/// values use the shortest representation that round-trips exactly, so
/// write-then-read is the identity.
pub fn write_ndjson(records: &[SeriesRecord], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut writer = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut writer, r)
            .map_err(|e| Error::parse(format!("serializing record {}: {e}", r.id)))?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}
