//! Multivariate series ingestion, chronological splits, z-score normalization,
//! sliding windows and synthetic multi-period series.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fmt;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// Train/validation/test fractions, summing to one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ratios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Ratios {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let r = Self { train, val, test };
        if [train, val, test]
            .iter()
            .any(|v| !v.is_finite() || *v < 0.0)
        {
            return Err(Error::Config(format!(
                "split ratios must be non-negative, got {r}"
            )));
        }
        if (train + val + test - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios must sum to 1, got {r}"
            )));
        }
        Ok(r)
    }

    /// Normalizes raw parts such as `7:1:2`.
    pub fn from_parts(train: f64, val: f64, test: f64) -> Result<Self> {
        let total = train + val + test;
        if total.is_nan() || total <= 0.0 {
            return Err(Error::Config(
                "split ratio parts must have a positive sum".into(),
            ));
        }
        Self::new(train / total, val / total, test / total)
    }
}

impl Default for Ratios {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl fmt::Display for Ratios {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.train, self.val, self.test)
    }
}

impl FromStr for Ratios {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(':')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("ratios must look like a:b:c, got {s:?}")))?;
        match parts[..] {
            [a, b, c] => Self::from_parts(a, b, c),
            _ => Err(Error::Config(format!(
                "ratios must have three parts, got {s:?}"
            ))),
        }
    }
}

/// Row ranges of each split. A split whose ratio is zero is empty.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitBounds {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl SplitBounds {
    pub fn range(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => self.train.clone(),
            Split::Val => self.val.clone(),
            Split::Test => self.test.clone(),
        }
    }

    /// Splits that hold no rows.
    pub fn empty_splits(&self) -> Vec<Split> {
        [Split::Train, Split::Val, Split::Test]
            .into_iter()
            .filter(|s| self.range(*s).is_empty())
            .collect()
    }
}

fn floor_share(ratio: f64, n: usize) -> usize {
    // The epsilon keeps exact products such as 0.7 · 100 from flooring to 69.
    ((ratio * n as f64) + 1e-9).floor() as usize
}

/// Train gets the first `⌊r_train·N⌋` rows, validation the next `⌊r_val·N⌋`,
/// test the remainder. Every split with a non-zero ratio must fit at least one
/// `(input_len + horizon)` window.
pub fn chronological_split(
    n: usize,
    ratios: Ratios,
    input_len: usize,
    horizon: usize,
) -> Result<SplitBounds> {
    let ratios = Ratios::new(ratios.train, ratios.val, ratios.test)?;
    let train_end = floor_share(ratios.train, n).min(n);
    let val_end = (train_end + floor_share(ratios.val, n)).min(n);
    let bounds = SplitBounds {
        train: 0..train_end,
        val: train_end..val_end,
        test: val_end..n,
    };
    let need = input_len + horizon;
    for (split, ratio) in [
        (Split::Train, ratios.train),
        (Split::Val, ratios.val),
        (Split::Test, ratios.test),
    ] {
        let len = bounds.range(split).len();
        if ratio > 0.0 && len < need {
            return Err(Error::Config(format!(
                "{split} split has {len} rows but one window needs {need} (input {input_len} + horizon {horizon})"
            )));
        }
    }
    Ok(bounds)
}

/// Per-channel z-score statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    /// Constant channels carry std 1.
    pub std: Vec<f64>,
    /// Channels whose fitted std was zero.
    pub constant: Vec<bool>,
}

impl Scaler {
    /// Fits on the rows `rows` of an `(N × D)` row-major array.
    pub fn fit(values: &[f64], channels: usize, rows: Range<usize>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Data("cannot fit a scaler on an empty split".into()));
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; channels];
        for r in rows.clone() {
            for (m, v) in mean
                .iter_mut()
                .zip(&values[r * channels..(r + 1) * channels])
            {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; channels];
        for r in rows {
            for c in 0..channels {
                let d = values[r * channels + c] - mean[c];
                var[c] += d * d;
            }
        }
        let mut std = Vec::with_capacity(channels);
        let mut constant = Vec::with_capacity(channels);
        for v in var {
            let s = (v / n).sqrt();
            constant.push(s == 0.0);
            std.push(if s == 0.0 { 1.0 } else { s });
        }
        Ok(Self {
            mean,
            std,
            constant,
        })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize_in_place(&self, values: &mut [f64]) {
        let d = self.channels();
        for (i, v) in values.iter_mut().enumerate() {
            let c = i % d;
            *v = (*v - self.mean[c]) / self.std[c];
        }
    }

    pub fn denormalize_in_place(&self, values: &mut [f64]) {
        let d = self.channels();
        for (i, v) in values.iter_mut().enumerate() {
            let c = i % d;
            *v = *v * self.std[c] + self.mean[c];
        }
    }

    /// Maps an `(L × D)` tensor back to raw units.
    pub fn denormalize(&self, t: &Tensor) -> Tensor {
        let mut out = t.clone();
        self.denormalize_in_place(out.values_mut());
        out
    }

    pub fn normalize(&self, t: &Tensor) -> Tensor {
        let mut out = t.clone();
        self.normalize_in_place(out.values_mut());
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeriesDataset {
    channels: Vec<String>,
    timestamps: Option<Vec<String>>,
    values: Vec<f64>,
    splits: Option<SplitBounds>,
    scaler: Option<Scaler>,
}

impl SeriesDataset {
    /// `values` is `(N × D)` row-major with `D = channels.len()`.
    pub fn new(
        channels: Vec<String>,
        timestamps: Option<Vec<String>>,
        values: Vec<f64>,
    ) -> Result<Self> {
        let d = channels.len();
        if d == 0 {
            return Err(Error::Data("dataset has no channels".into()));
        }
        if !values.len().is_multiple_of(d) {
            return Err(Error::Data(format!(
                "{} values do not form rows of {d} channels",
                values.len()
            )));
        }
        let n = values.len() / d;
        if let Some(ts) = &timestamps {
            if ts.len() != n {
                return Err(Error::Data(format!("{} timestamps for {n} rows", ts.len())));
            }
        }
        Ok(Self {
            channels,
            timestamps,
            values,
            splits: None,
            scaler: None,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channels
    }

    pub fn timestamps(&self) -> Option<&[String]> {
        self.timestamps.as_deref()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let d = self.num_channels();
        &self.values[t * d..(t + 1) * d]
    }

    pub fn splits(&self) -> Option<&SplitBounds> {
        self.splits.as_ref()
    }

    pub fn scaler(&self) -> Option<&Scaler> {
        self.scaler.as_ref()
    }

    /// Rows `range` as an `(len × D)` tensor.
    pub fn slice(&self, range: Range<usize>) -> Result<Tensor> {
        let d = self.num_channels();
        if range.is_empty() || range.end > self.len() {
            return Err(Error::Data(format!(
                "row range {range:?} outside 0..{}",
                self.len()
            )));
        }
        Ok(Tensor::new(
            vec![range.len(), d],
            self.values[range.start * d..range.end * d].to_vec(),
        )?)
    }

    /// Attaches chronological split boundaries.
    pub fn with_splits(mut self, ratios: Ratios, input_len: usize, horizon: usize) -> Result<Self> {
        self.splits = Some(chronological_split(self.len(), ratios, input_len, horizon)?);
        Ok(self)
    }

    /// Z-scores every split with statistics fitted on the train split only.
    pub fn normalized(&self) -> Result<Self> {
        let splits = self
            .splits
            .as_ref()
            .ok_or_else(|| Error::Config("split the dataset before normalizing".into()))?;
        let scaler = Scaler::fit(&self.values, self.num_channels(), splits.train.clone())?;
        let mut values = self.values.clone();
        scaler.normalize_in_place(&mut values);
        Ok(Self {
            values,
            scaler: Some(scaler),
            ..self.clone()
        })
    }

    /// Sliding windows over one split.
    pub fn windows(
        &self,
        split: Split,
        input_len: usize,
        horizon: usize,
        stride: usize,
    ) -> Result<WindowSet<'_>> {
        let range = self
            .splits
            .as_ref()
            .map(|s| s.range(split))
            .ok_or_else(|| Error::Config("dataset has no split boundaries".into()))?;
        WindowSet::new(self, range, split, input_len, horizon, stride)
    }
}

/// One `(input, target)` pair; the target immediately follows the input.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    /// Absolute row index of the first input row.
    pub start: usize,
    pub input: Tensor,
    pub target: Tensor,
}

/// Lazily materialized sliding windows over a contiguous row range.
#[derive(Clone, Debug)]
pub struct WindowSet<'a> {
    ds: &'a SeriesDataset,
    range: Range<usize>,
    input_len: usize,
    horizon: usize,
    stride: usize,
    count: usize,
}

impl<'a> WindowSet<'a> {
    pub fn new(
        ds: &'a SeriesDataset,
        range: Range<usize>,
        split: Split,
        input_len: usize,
        horizon: usize,
        stride: usize,
    ) -> Result<Self> {
        if input_len == 0 || horizon == 0 || stride == 0 {
            return Err(Error::Config(
                "input length, horizon and window stride must be positive".into(),
            ));
        }
        let need = input_len + horizon;
        if range.len() < need {
            return Err(Error::Config(format!(
                "{split} split has {} rows but one window needs {need}",
                range.len()
            )));
        }
        let count = (range.len() - need) / stride + 1;
        Ok(Self {
            ds,
            range,
            input_len,
            horizon,
            stride,
            count,
        })
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn range(&self) -> Range<usize> {
        self.range.clone()
    }

    pub fn dataset(&self) -> &'a SeriesDataset {
        self.ds
    }

    pub fn get(&self, i: usize) -> WindowSample {
        assert!(i < self.count, "window {i} out of {}", self.count);
        let start = self.range.start + i * self.stride;
        let split = start + self.input_len;
        WindowSample {
            start,
            input: self.ds.slice(start..split).expect("window inside dataset"),
            target: self
                .ds
                .slice(split..split + self.horizon)
                .expect("window inside dataset"),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = WindowSample> + '_ {
        (0..self.count).map(move |i| self.get(i))
    }
}

/// Window count for a split of `len` rows.
pub fn window_count(len: usize, input_len: usize, horizon: usize, stride: usize) -> usize {
    if len < input_len + horizon || stride == 0 {
        0
    } else {
        (len - input_len - horizon) / stride + 1
    }
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

pub fn load_csv(path: &Path) -> Result<SeriesDataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Parses `date,<channel>,…` CSV. The first column is kept as an opaque label.
pub fn read_csv<R: Read>(reader: R) -> Result<SeriesDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        None => return Err(Error::Data("empty file".into())),
        Some(h) => h.map_err(|e| Error::Data(format!("line 1: {e}")))?,
    };
    if header.len() < 2 {
        return Err(Error::Data(
            "header needs a timestamp column and at least one channel".into(),
        ));
    }
    let channels: Vec<String> = header.iter().skip(1).map(str::to_owned).collect();
    let d = channels.len();

    let mut timestamps = Vec::new();
    let mut seen = HashSet::new();
    let mut values = Vec::new();
    for (i, rec) in records.enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Data(format!("line {line}: {e}")))?;
        if rec.len() != d + 1 {
            return Err(Error::Data(format!(
                "line {line}: expected {} cells, found {}",
                d + 1,
                rec.len()
            )));
        }
        let ts = rec[0].to_owned();
        if !seen.insert(ts.clone()) {
            return Err(Error::Data(format!(
                "line {line}: duplicate timestamp {ts:?}"
            )));
        }
        for (c, cell) in rec.iter().skip(1).enumerate() {
            if cell.is_empty() {
                return Err(Error::Data(format!(
                    "line {line}: missing value for {}",
                    channels[c]
                )));
            }
            let v: f64 = cell.parse().map_err(|_| {
                Error::Data(format!(
                    "line {line}: non-numeric value {cell:?} for {}",
                    channels[c]
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "line {line}: non-finite value for {}",
                    channels[c]
                )));
            }
            values.push(v);
        }
        timestamps.push(ts);
    }
    if timestamps.is_empty() {
        return Err(Error::Data("no data rows".into()));
    }
    SeriesDataset::new(channels, Some(timestamps), values)
}

pub fn write_csv<W: Write>(ds: &SeriesDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let to_err = |e: csv::Error| Error::Data(format!("csv write failed: {e}"));
    let mut header = vec!["date".to_owned()];
    header.extend(ds.channels.iter().cloned());
    w.write_record(&header).map_err(to_err)?;
    for t in 0..ds.len() {
        let ts = ds
            .timestamps
            .as_ref()
            .map(|ts| ts[t].clone())
            .unwrap_or_else(|| t.to_string());
        let mut rec = vec![ts];
        rec.extend(ds.row(t).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(to_err)?;
    }
    w.flush()
        .map_err(|e| Error::Data(format!("csv write failed: {e}")))?;
    Ok(())
}

pub fn save_csv(ds: &SeriesDataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(ds, std::io::BufWriter::new(file))
}

// ---------------------------------------------------------------------------
// Synthetic series
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sinusoid {
    pub amplitude: f64,
    pub period: f64,
    /// Radians.
    #[serde(default)]
    pub phase: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n: usize,
    pub channels: usize,
    pub sinusoids: Vec<Sinusoid>,
    #[serde(default)]
    pub slope: f64,
    #[serde(default)]
    pub noise_std: f64,
    /// Extra phase added to every sinusoid per channel index, so channels differ.
    #[serde(default)]
    pub channel_phase_step: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticSpec {
    /// Daily/weekly analog: periods 24 and 168 with amplitudes 1.0 and 0.5,
    /// 2,000 steps over two phase-shifted channels.
    pub fn multiscale(noise_std: f64, seed: u64) -> Self {
        Self {
            n: 2000,
            channels: 2,
            sinusoids: vec![
                Sinusoid {
                    amplitude: 1.0,
                    period: 24.0,
                    phase: 0.0,
                },
                Sinusoid {
                    amplitude: 0.5,
                    period: 168.0,
                    phase: 0.0,
                },
            ],
            slope: 0.0,
            noise_std,
            channel_phase_step: PI / 3.0,
            seed,
        }
    }
}

/// Noise-free value of channel `c` at step `t`.
pub fn synthetic_value(spec: &SyntheticSpec, t: usize, c: usize) -> f64 {
    let tf = t as f64;
    let shift = spec.channel_phase_step * c as f64;
    let seasonal: f64 = spec
        .sinusoids
        .iter()
        .map(|s| s.amplitude * (2.0 * PI * tf / s.period + s.phase + shift).sin())
        .sum();
    seasonal + spec.slope * tf
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SeriesDataset> {
    if spec.n == 0 || spec.channels == 0 {
        return Err(Error::Config(
            "synthetic series needs n > 0 and channels > 0".into(),
        ));
    }
    if spec
        .sinusoids
        .iter()
        .any(|s| s.period.is_nan() || s.period <= 0.0)
    {
        return Err(Error::Config("sinusoid periods must be positive".into()));
    }
    let noise = Normal::new(0.0, spec.noise_std)
        .map_err(|e| Error::Config(format!("invalid noise std {}: {e}", spec.noise_std)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut values = Vec::with_capacity(spec.n * spec.channels);
    for t in 0..spec.n {
        for c in 0..spec.channels {
            let mut v = synthetic_value(spec, t, c);
            if spec.noise_std > 0.0 {
                v += noise.sample(&mut rng);
            }
            values.push(v);
        }
    }
    let channels = (0..spec.channels).map(|c| format!("ch{c}")).collect();
    let timestamps = (0..spec.n).map(|t| t.to_string()).collect();
    SeriesDataset::new(channels, Some(timestamps), values)
}
