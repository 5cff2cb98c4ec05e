//! Dataset ingestion, normalisation, stratified splitting and the synthetic
//! three-pattern generator.
//!
//! On disk a dataset is a directory with two files:
//!
//! * `meta.json`: `{"t": 64, "c": 8, "classes": ["a", "b"], "name": "x", "version": 1}`
//! * `samples.csv`: header `sample_id,label,t,v0,...,v{C-1}`, exactly `T`
//!   consecutive rows per sample with `t` counting up from 0. Labels are class
//!   names from `meta.json`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// Row-major `[T, C]`.
    pub values: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    All,
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub t: usize,
    pub c: usize,
    pub classes: Vec<String>,
    pub samples: Vec<Sample>,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    t: usize,
    c: usize,
    classes: Vec<String>,
    name: String,
    version: u32,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Replace non-finite or empty values with 0 instead of rejecting the row.
    pub impute_zero: bool,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Copy holding the samples at `idx`, in that order.
    pub fn subset(&self, idx: &[usize], split: Split) -> Dataset {
        Dataset {
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            split,
            ..self.header()
        }
    }

    fn header(&self) -> Dataset {
        Dataset {
            name: self.name.clone(),
            t: self.t,
            c: self.c,
            classes: self.classes.clone(),
            samples: Vec::new(),
            split: self.split,
        }
    }

    /// `[B, T, C]` inputs and labels for the samples at `idx`.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(idx.len() * self.t * self.c);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(&self.samples[i].values);
            labels.push(self.samples[i].label);
        }
        let x = Tensor::new([idx.len(), self.t, self.c], data).expect("sample shapes are validated on construction");
        (x, labels)
    }
}

fn parse_value(field: &str) -> f64 {
    if field.trim().is_empty() {
        f64::NAN
    } else {
        field.trim().parse().unwrap_or(f64::NAN)
    }
}

pub fn load_dataset(dir: &Path, opts: LoadOptions) -> Result<Dataset> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: Meta = serde_json::from_str(&text).map_err(|e| Error::data(&meta_path, e.to_string()))?;
    if meta.version != FORMAT_VERSION {
        return Err(Error::data(&meta_path, format!("unsupported version {}", meta.version)));
    }
    if meta.t == 0 || meta.c == 0 || meta.classes.is_empty() {
        return Err(Error::data(&meta_path, "t, c and classes must be non-empty"));
    }
    let class_index: HashMap<&str, usize> = meta.classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    if class_index.len() != meta.classes.len() {
        return Err(Error::data(&meta_path, "duplicate class names"));
    }

    let csv_path = dir.join("samples.csv");
    let file = fs::File::open(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let bad = |line: u64, detail: String| Error::data(&csv_path, format!("line {line}: {detail}"));

    let expected: Vec<String> = ["sample_id", "label", "t"]
        .into_iter()
        .map(String::from)
        .chain((0..meta.c).map(|i| format!("v{i}")))
        .collect();
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| bad(1, e.to_string()))?
        .iter()
        .map(String::from)
        .collect();
    if header != expected {
        return Err(bad(
            1,
            format!("header {header:?} does not match expected {expected:?}"),
        ));
    }

    let mut samples: Vec<Sample> = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut rejected: Vec<String> = Vec::new();
    let mut current: Option<(Sample, usize)> = None;

    let finish = |cur: Option<(Sample, usize)>, samples: &mut Vec<Sample>| -> Result<()> {
        if let Some((s, rows)) = cur {
            if rows != meta.t {
                return Err(Error::data(
                    &csv_path,
                    format!("sample {} has {rows} time steps, expected {}", s.id, meta.t),
                ));
            }
            samples.push(s);
        }
        Ok(())
    };

    for record in reader.records() {
        let record = record.map_err(|e| Error::data(&csv_path, e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != expected.len() {
            return Err(bad(
                line,
                format!("{} fields, expected {}", record.len(), expected.len()),
            ));
        }
        let id = &record[0];
        let label = *class_index
            .get(&record[1])
            .ok_or_else(|| bad(line, format!("unknown label {:?}", &record[1])))?;
        let step: usize = record[2]
            .trim()
            .parse()
            .map_err(|_| bad(line, format!("invalid time index {:?}", &record[2])))?;

        let continues = matches!(&current, Some((s, _)) if s.id == id);
        if !continues {
            finish(current.take(), &mut samples)?;
            if seen.insert(id.to_string(), line as usize).is_some() {
                return Err(bad(line, format!("sample {id} rows are not contiguous")));
            }
            current = Some((
                Sample {
                    id: id.to_string(),
                    values: Vec::with_capacity(meta.t * meta.c),
                    label,
                },
                0,
            ));
        }
        let (sample, rows) = current.as_mut().expect("set above");
        if sample.label != label {
            return Err(bad(line, format!("sample {id} changes label")));
        }
        if step != *rows {
            return Err(bad(line, format!("sample {id}: time index {step}, expected {rows}")));
        }
        if *rows >= meta.t {
            return Err(bad(line, format!("sample {id} has more than {} time steps", meta.t)));
        }
        for (k, field) in record.iter().skip(3).enumerate() {
            let v = parse_value(field);
            if v.is_finite() {
                sample.values.push(v);
            } else if opts.impute_zero {
                sample.values.push(0.0);
            } else {
                rejected.push(format!("line {line} (sample {id}, v{k}): {field:?}"));
                sample.values.push(0.0);
            }
        }
        *rows += 1;
    }
    finish(current, &mut samples)?;

    if !rejected.is_empty() {
        let shown: Vec<&str> = rejected.iter().take(20).map(String::as_str).collect();
        let more = rejected.len().saturating_sub(shown.len());
        let tail = if more > 0 {
            format!("; and {more} more")
        } else {
            String::new()
        };
        return Err(Error::data(
            &csv_path,
            format!(
                "{} non-finite values (pass --impute-zero to replace them with 0): {}{tail}",
                rejected.len(),
                shown.join("; ")
            ),
        ));
    }
    if samples.is_empty() {
        return Err(Error::data(&csv_path, "no samples"));
    }

    Ok(Dataset {
        name: meta.name,
        t: meta.t,
        c: meta.c,
        classes: meta.classes,
        samples,
        split: Split::All,
    })
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = Meta {
        t: ds.t,
        c: ds.c,
        classes: ds.classes.clone(),
        name: ds.name.clone(),
        version: FORMAT_VERSION,
    };
    let meta_path = dir.join("meta.json");
    let mut text = serde_json::to_string_pretty(&meta)?;
    text.push('\n');
    fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;

    let csv_path = dir.join("samples.csv");
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(&csv_path)
        .map_err(|e| Error::data(&csv_path, e.to_string()))?;
    let csv_err = |e: csv::Error| Error::data(&csv_path, e.to_string());
    let mut row: Vec<String> = vec!["sample_id".into(), "label".into(), "t".into()];
    row.extend((0..ds.c).map(|i| format!("v{i}")));
    w.write_record(&row).map_err(csv_err)?;
    for s in &ds.samples {
        for (step, values) in s.values.chunks(ds.c).enumerate() {
            row.clear();
            row.push(s.id.clone());
            row.push(ds.classes[s.label].clone());
            row.push(step.to_string());
            row.extend(values.iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))
}

/// Splits `n` items by `fractions` with largest-remainder rounding; ties go to
/// the earlier share.
fn apportion(n: usize, fractions: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = n - counts.iter().sum::<usize>().min(n);
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .total_cmp(&(exact[a] - exact[a].floor()))
            .then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

fn indices_by_class(ds: &Dataset) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); ds.n_classes()];
    for (i, s) in ds.samples.iter().enumerate() {
        by_class[s.label].push(i);
    }
    by_class
}

/// Per-class stratified partition into train, validation and test.
pub fn stratified_split(ds: &Dataset, fractions: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let parts = stratified_partition(ds, &fractions, seed)?;
    let [train, val, test]: [Vec<usize>; 3] = parts.try_into().expect("three fractions");
    Ok((
        ds.subset(&train, Split::Train),
        ds.subset(&val, Split::Val),
        ds.subset(&test, Split::Test),
    ))
}

/// Index sets for any number of stratified shares, each sorted ascending.
pub fn stratified_partition(ds: &Dataset, fractions: &[f64], seed: u64) -> Result<Vec<Vec<usize>>> {
    if fractions.iter().any(|f| f.is_nan() || *f <= 0.0) {
        return Err(Error::Config(format!(
            "split fractions must all be > 0, got {fractions:?}"
        )));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions must sum to 1, got {total}")));
    }
    let mut rng = rng::stream(seed, "split");
    let mut parts = vec![Vec::new(); fractions.len()];
    for (class, mut idx) in indices_by_class(ds).into_iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        if idx.len() < fractions.len() {
            return Err(Error::Input(format!(
                "class {:?} has {} samples, fewer than the {} splits; merge it with another class or drop it",
                ds.classes[class],
                idx.len(),
                fractions.len()
            )));
        }
        idx.shuffle(&mut rng);
        let mut start = 0;
        for (part, n) in parts.iter_mut().zip(apportion(idx.len(), fractions)) {
            part.extend_from_slice(&idx[start..start + n]);
            start += n;
        }
    }
    parts.iter_mut().for_each(|p| p.sort_unstable());
    Ok(parts)
}

/// `n` samples with class proportions kept, in shuffled order.
pub fn stratified_sample(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n > ds.len() {
        return Err(Error::Input(format!("cannot sample {n} from {} samples", ds.len())));
    }
    let mut rng = rng::stream(seed, "sample");
    let by_class = indices_by_class(ds);
    let shares: Vec<f64> = by_class.iter().map(|c| c.len() as f64 / ds.len() as f64).collect();
    let quota = apportion(n, &shares);
    let mut picked = Vec::with_capacity(n);
    for (mut idx, q) in by_class.into_iter().zip(quota) {
        idx.shuffle(&mut rng);
        picked.extend_from_slice(&idx[..q.min(idx.len())]);
    }
    picked.shuffle(&mut rng);
    Ok(ds.subset(&picked, ds.split))
}

/// Per-channel z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-8;

impl NormalizationStats {
    pub fn compute(ds: &Dataset) -> Self {
        let c = ds.c;
        let mut sum = vec![0.0; c];
        let mut count = 0usize;
        for s in &ds.samples {
            for row in s.values.chunks(c) {
                sum.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                count += 1;
            }
        }
        let n = count.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let mut sq = vec![0.0; c];
        for s in &ds.samples {
            for row in s.values.chunks(c) {
                for ((a, v), m) in sq.iter_mut().zip(row).zip(&mean) {
                    *a += (v - m).powi(2);
                }
            }
        }
        let std = sq.iter().map(|s| (s / n).sqrt().max(STD_FLOOR)).collect();
        Self { mean, std }
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        if self.mean.len() != ds.c {
            return Err(Error::Input(format!(
                "normalisation stats cover {} channels, dataset has {}",
                self.mean.len(),
                ds.c
            )));
        }
        let mut out = ds.clone();
        for s in &mut out.samples {
            for row in s.values.chunks_mut(ds.c) {
                for ((v, m), sd) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                    *v = (*v - m) / sd;
                }
            }
        }
        Ok(out)
    }
}

/// Z-scores `ds` with `stats`, or with its own statistics when none are given.
pub fn normalize(ds: &Dataset, stats: Option<&NormalizationStats>) -> Result<(Dataset, NormalizationStats)> {
    let stats = stats.cloned().unwrap_or_else(|| NormalizationStats::compute(ds));
    Ok((stats.apply(ds)?, stats))
}

pub const SYNTH_CLASSES: [&str; 3] = ["periodic", "correlated", "sequential"];

/// Frequency (cycles per window) carried by channel 0 of the periodic class.
pub fn synth_primary_frequency(t: usize) -> usize {
    (t / 8).max(2)
}

/// Frequencies of every channel of the periodic class. Channel 0 gets the
/// primary one; the rest get distinct others so channels stay uncorrelated.
pub fn synth_channel_frequencies(t: usize, c: usize) -> Vec<usize> {
    let f0 = synth_primary_frequency(t);
    let others: Vec<usize> = (1..t / 2).filter(|&f| f != f0).collect();
    let mut out = vec![f0];
    out.extend((0..c.saturating_sub(1)).map(|i| others[i % others.len()]));
    out
}

/// Motif length of the sequential class.
pub fn synth_motif_len(t: usize) -> usize {
    (t / 8).max(4)
}

/// The fixed per-channel motif of the sequential class, row-major `[L, C]`.
pub fn synth_motif(t: usize, c: usize) -> Vec<f64> {
    let len = synth_motif_len(t);
    let mut m = Vec::with_capacity(len * c);
    for step in 0..len {
        let u = step as f64 / (len - 1) as f64;
        for ch in 0..c {
            let sign = if ch % 2 == 0 { 1.0 } else { -1.0 };
            let phase = std::f64::consts::PI * ch as f64 / c as f64;
            m.push(2.0 * sign * (2.0 * std::f64::consts::PI * u + phase).sin());
        }
    }
    m
}

/// Three-class generator with one dominant pattern per class:
///
/// * `periodic`: every channel a sine with its own fixed frequency and a
///   random phase; channel 0 is the strongest and sets the dominant period.
/// * `correlated`: one latent burst signal mixed into every channel with
///   random weights.
/// * `sequential`: a fixed motif at a random offset in noise.
pub fn synth_moe_dataset(n_per_class: usize, t: usize, c: usize, seed: u64) -> Result<Dataset> {
    if t < 16 || c < 4 || n_per_class == 0 {
        return Err(Error::Input(format!(
            "synthetic data needs T >= 16, C >= 4 and n_per_class >= 1 (got {t}, {c}, {n_per_class})"
        )));
    }
    let mut rng = rng::stream(seed, "synth");
    let noise = Normal::new(0.0, 0.1).expect("valid sigma");
    let tau = 2.0 * std::f64::consts::PI;
    let freqs = synth_channel_frequencies(t, c);
    let motif = synth_motif(t, c);
    let motif_len = synth_motif_len(t);

    let mut samples = Vec::with_capacity(3 * n_per_class);
    for label in 0..3 {
        for _ in 0..n_per_class {
            let mut v = vec![0.0; t * c];
            match label {
                0 => {
                    for (ch, &f) in freqs.iter().enumerate() {
                        let amp = if ch == 0 { 1.5 } else { 1.0 };
                        let phase = rng.random_range(0.0..tau);
                        for step in 0..t {
                            v[step * c + ch] = amp * (tau * f as f64 * step as f64 / t as f64 + phase).sin();
                        }
                    }
                }
                1 => {
                    let width = (t as f64 / 32.0).max(1.0);
                    let mut latent = vec![0.0; t];
                    for _ in 0..3 {
                        let centre = rng.random_range(0.0..t as f64);
                        let height = rng.random_range(1.0..2.0);
                        for (step, l) in latent.iter_mut().enumerate() {
                            *l += height * (-(step as f64 - centre).powi(2) / (2.0 * width * width)).exp();
                        }
                    }
                    for ch in 0..c {
                        let mag = rng.random_range(0.5..1.5);
                        let w = if rng.random::<bool>() { mag } else { -mag };
                        for (step, l) in latent.iter().enumerate() {
                            v[step * c + ch] = w * l;
                        }
                    }
                }
                _ => {
                    let offset = rng.random_range(0..=t - motif_len);
                    for step in 0..motif_len {
                        for ch in 0..c {
                            v[(offset + step) * c + ch] = motif[step * c + ch];
                        }
                    }
                }
            }
            for x in &mut v {
                *x += noise.sample(&mut rng);
            }
            samples.push(Sample {
                id: format!("s{:05}", samples.len()),
                values: v,
                label,
            });
        }
    }
    Ok(Dataset {
        name: "synth_moe".into(),
        t,
        c,
        classes: SYNTH_CLASSES.iter().map(|s| s.to_string()).collect(),
        samples,
        split: Split::All,
    })
}
