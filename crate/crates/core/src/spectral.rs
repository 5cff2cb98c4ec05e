//! Dominant-period detection and the 1D ↔ 2D period folding used by the
//! periodicity expert.
//!
//! A window of length `T` and a period `P` fold into a `P × ceil(T/P)` grid:
//! rows index the position inside a cycle, columns index successive cycles.
//! The tail is zero-padded when `P` does not divide `T`, and unfolding drops
//! the padding again.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Amplitudes under this are treated as "no periodicity at all".
pub const SILENT_AMPLITUDE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct PeriodSet {
    /// Distinct periods, strongest first.
    pub periods: Vec<usize>,
    /// FFT bin each period came from (`period = T / frequency`, floored).
    pub frequencies: Vec<usize>,
    /// Mean spectral amplitude of each bin, descending.
    pub amplitudes: Vec<f64>,
}

impl PeriodSet {
    pub fn len(&self) -> usize {
        self.periods.len()
    }

    pub fn is_empty(&self) -> bool {
        self.periods.is_empty()
    }

    /// Whole-window fallback used when the input carries no periodic energy.
    pub fn fallback(t: usize) -> Self {
        Self {
            periods: vec![t],
            frequencies: vec![1],
            amplitudes: vec![0.0],
        }
    }

    /// Softmax over the amplitudes; the fusion weights of the per-period branches.
    pub fn weights(&self) -> Vec<f64> {
        let max = self.amplitudes.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = self.amplitudes.iter().map(|a| (a - max).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }
}

/// Accumulates `|rfft(series)|` for every channel of a `[T, d]` block.
struct SpectrumAccumulator {
    fft: std::sync::Arc<dyn rustfft::Fft<f64>>,
    buf: Vec<Complex64>,
    sums: Vec<f64>,
    series: usize,
}

impl SpectrumAccumulator {
    fn new(t: usize) -> Result<Self> {
        if t < 4 {
            return Err(Error::Input(format!("period detection needs T >= 4, got {t}")));
        }
        Ok(Self {
            fft: FftPlanner::new().plan_fft_forward(t),
            buf: vec![Complex64::default(); t],
            sums: vec![0.0; t / 2 + 1],
            series: 0,
        })
    }

    /// `block` is row-major `[T, d]`.
    fn add_block(&mut self, block: &[f64], d: usize) {
        for c in 0..d {
            for (i, z) in self.buf.iter_mut().enumerate() {
                *z = Complex64::new(block[i * d + c], 0.0);
            }
            self.fft.process(&mut self.buf);
            for (s, z) in self.sums.iter_mut().zip(&self.buf) {
                *s += z.norm();
            }
            self.series += 1;
        }
    }

    fn mean(self) -> Vec<f64> {
        let n = self.series.max(1) as f64;
        self.sums.into_iter().map(|s| s / n).collect()
    }
}

/// DFT magnitude per frequency bin `0..=T/2` of a `[T, d]` series, averaged over channels.
/// Bin 0 is the DC term; callers looking for periods skip it.
pub fn fft_amplitudes(h: &Tensor) -> Result<Tensor> {
    let [t, d] = h.shape() else {
        return Err(Error::dim(
            "fft_amplitudes",
            format!("expected [T, d], got {:?}", h.shape()),
        ));
    };
    let mut acc = SpectrumAccumulator::new(*t)?;
    acc.add_block(h.data(), *d);
    let amps = acc.mean();
    Tensor::new([amps.len()], amps)
}

/// Mean amplitude spectrum of a `[B, T, d]` batch, over samples and channels.
pub fn batch_amplitudes(batch: &Tensor) -> Result<Vec<f64>> {
    let [b, t, d] = batch.shape() else {
        return Err(Error::dim(
            "detect_periods",
            format!("expected [B, T, d], got {:?}", batch.shape()),
        ));
    };
    let mut acc = SpectrumAccumulator::new(*t)?;
    for block in batch.data().chunks(t * d).take(*b) {
        acc.add_block(block, *d);
    }
    Ok(acc.mean())
}

/// Top-`k` periods of a `[B, T, d]` batch from its mean amplitude spectrum.
///
/// DC is ignored, equal amplitudes prefer the lower frequency, and bins that
/// floor to the same period collapse onto the stronger one, so fewer than `k`
/// periods can come back.
pub fn detect_periods(batch: &Tensor, k: usize) -> Result<PeriodSet> {
    if k == 0 {
        return Err(Error::Config("period count k must be >= 1".into()));
    }
    let t = batch.shape().get(1).copied().unwrap_or(0);
    let amps = batch_amplitudes(batch)?;
    Ok(select_periods(&amps, t, k))
}

/// Period selection on a precomputed spectrum with `T/2 + 1` bins.
pub fn select_periods(amps: &[f64], t: usize, k: usize) -> PeriodSet {
    let mut bins: Vec<usize> = (1..amps.len()).collect();
    if bins.iter().all(|&f| amps[f] < SILENT_AMPLITUDE) {
        return PeriodSet::fallback(t);
    }
    // Stable sort keeps ascending frequency among equal amplitudes.
    bins.sort_by(|&a, &b| amps[b].total_cmp(&amps[a]));
    let mut set = PeriodSet {
        periods: Vec::with_capacity(k),
        frequencies: Vec::with_capacity(k),
        amplitudes: Vec::with_capacity(k),
    };
    for &f in bins.iter().take(k) {
        let p = t / f;
        if !set.periods.contains(&p) {
            set.periods.push(p);
            set.frequencies.push(f);
            set.amplitudes.push(amps[f]);
        }
    }
    set
}

fn fold_check(t: usize, period: usize) -> Result<usize> {
    if period < 2 || period > t {
        return Err(Error::Input(format!("period {period} outside [2, {t}]")));
    }
    Ok(t.div_ceil(period))
}

/// Folds one `[T, d]` series into `[d, P, ceil(T/P)]`: channel-major, row =
/// position within the cycle, column = cycle index.
pub fn reshape_to_2d(h: &Tensor, period: usize) -> Result<Tensor> {
    let [t, d] = h.shape() else {
        return Err(Error::dim(
            "reshape_to_2d",
            format!("expected [T, d], got {:?}", h.shape()),
        ));
    };
    let (t, d) = (*t, *d);
    let cols = fold_check(t, period)?;
    let mut out = vec![0.0; d * period * cols];
    for step in 0..t {
        let (col, row) = (step / period, step % period);
        for c in 0..d {
            out[(c * period + row) * cols + col] = h.data()[step * d + c];
        }
    }
    Tensor::new([d, period, cols], out)
}

/// Inverse of [`reshape_to_2d`], dropping the tail padding to recover `t` steps.
pub fn reshape_from_2d(x: &Tensor, t: usize) -> Result<Tensor> {
    let [d, period, cols] = x.shape() else {
        return Err(Error::dim(
            "reshape_from_2d",
            format!("expected [d, P, n], got {:?}", x.shape()),
        ));
    };
    let (d, period, cols) = (*d, *period, *cols);
    if t == 0 || t.div_ceil(period) != cols {
        return Err(Error::Input(format!(
            "grid {period}x{cols} cannot hold exactly {t} steps"
        )));
    }
    let mut out = vec![0.0; t * d];
    for step in 0..t {
        let (col, row) = (step / period, step % period);
        for c in 0..d {
            out[step * d + c] = x.data()[(c * period + row) * cols + col];
        }
    }
    Tensor::new([t, d], out)
}

/// Differentiable batched fold: `[B, T, d]` → `[B, d, P, ceil(T/P)]`.
pub fn fold_periods(g: &mut Graph, h: Var, period: usize) -> Result<Var> {
    let [b, t, d] = *g.shape(h) else {
        return Err(Error::dim(
            "fold_periods",
            format!("expected [B, T, d], got {:?}", g.shape(h)),
        ));
    };
    let cols = fold_check(t, period)?;
    let padded = if cols * period == t {
        h
    } else {
        g.pad_tail(h, 1, cols * period)?
    };
    let grid = g.reshape(padded, &[b, cols, period, d])?;
    g.permute(grid, &[0, 3, 2, 1])
}

/// Differentiable batched unfold: `[B, d, P, n]` → `[B, t, d]`.
pub fn unfold_periods(g: &mut Graph, x: Var, t: usize) -> Result<Var> {
    let [b, d, period, cols] = *g.shape(x) else {
        return Err(Error::dim(
            "unfold_periods",
            format!("expected [B, d, P, n], got {:?}", g.shape(x)),
        ));
    };
    if period * cols < t {
        return Err(Error::Input(format!("grid {period}x{cols} shorter than {t} steps")));
    }
    let seq = g.permute(x, &[0, 3, 2, 1])?;
    let seq = g.reshape(seq, &[b, cols * period, d])?;
    if cols * period == t {
        Ok(seq)
    } else {
        g.narrow(seq, 1, 0, t)
    }
}
