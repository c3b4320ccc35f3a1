//! Noise schedules: sqrt initialization, forward corruption, posterior
//! algebra and the loss-driven per-position schedule update.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::Tensor;
use crate::scalar::Scalar;

pub const BETA_MIN: f64 = 1e-5;
pub const BETA_MAX: f64 = 0.999;
/// Training steps between adaptive schedule updates.
pub const ADAPT_EVERY: u64 = 2000;

/// A block of knowledge slots: row `n` is the `d`-dimensional latent of
/// slot `n`, tagged with the diffusion step it belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBlock<T> {
    pub data: Tensor<T>,
    pub t: usize,
}

impl<T: Scalar> LatentBlock<T> {
    pub fn new(data: Tensor<T>, t: usize) -> Result<Self> {
        if data.shape().len() != 2 {
            return Err(Error::Shape(format!("latent block must be 2-d, got {:?}", data.shape())));
        }
        Ok(Self { data, t })
    }

    pub fn zeros(n_slots: usize, d: usize) -> Self {
        Self { data: Tensor::zeros(&[n_slots, d]), t: 0 }
    }

    pub fn n_slots(&self) -> usize {
        self.data.rows()
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    pub fn slot(&self, n: usize) -> &[T] {
        self.data.row(n)
    }

    pub fn all_finite(&self) -> bool {
        self.data.all_finite()
    }
}

/// Per-step (and optionally per-slot-position) cumulative signal retention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    /// Total diffusion steps `T`.
    pub steps: usize,
    /// Offset `s` of the sqrt initialization.
    pub offset: f64,
    /// Noise standard-deviation amplification `A`.
    pub amp: f64,
    /// `alpha_bar[n][t]`, `t = 0..=T`. A single row is shared by every position.
    pub alpha_bar: Vec<Vec<f64>>,
}

/// Turns a raw `ᾱ` curve into one whose per-step `β` lies in
/// `[BETA_MIN, BETA_MAX]`, recomputing `ᾱ` cumulatively from `ᾱ_0`.
fn clamp_cumulative(raw: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(raw.len());
    let a0 = raw[0].clamp(1.0 - BETA_MAX, 1.0 - BETA_MIN);
    out.push(a0);
    for t in 1..raw.len() {
        let beta = if raw[t - 1] > 0.0 { 1.0 - raw[t] / raw[t - 1] } else { BETA_MAX };
        let beta = if beta.is_finite() { beta.clamp(BETA_MIN, BETA_MAX) } else { BETA_MAX };
        out.push(out[t - 1] * (1.0 - beta));
    }
    out
}

/// Pool-adjacent-violators fit of a non-increasing sequence.
fn isotonic_decreasing(values: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(values.len());
    for &v in values {
        blocks.push((v, 1));
        while blocks.len() >= 2 {
            let (m2, c2) = blocks[blocks.len() - 1];
            let (m1, c1) = blocks[blocks.len() - 2];
            if m1 >= m2 {
                break;
            }
            blocks.pop();
            let last = blocks.last_mut().expect("len >= 1");
            *last = ((m1 * c1 as f64 + m2 * c2 as f64) / (c1 + c2) as f64, c1 + c2);
        }
    }
    blocks.into_iter().flat_map(|(m, c)| std::iter::repeat_n(m, c)).collect()
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

impl NoiseSchedule {
    /// `ᾱ_t = 1 − sqrt(t/T + s)`, then clamped so every `β_t` lies in
    /// `[1e-5, 0.999]`. Every position shares one row.
    pub fn sqrt(steps: usize, offset: f64, amp: f64) -> Result<Self> {
        if steps < 1 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if offset <= 0.0 {
            return Err(Error::Config(format!("sqrt offset must be positive, got {offset}")));
        }
        if amp < 1.0 {
            return Err(Error::Config(format!("noise amplification must be >= 1, got {amp}")));
        }
        let raw: Vec<f64> = (0..=steps).map(|t| 1.0 - (t as f64 / steps as f64 + offset).sqrt()).collect();
        Ok(Self { steps, offset, amp, alpha_bar: vec![clamp_cumulative(&raw)] })
    }

    /// Raw (unclamped) sqrt curve value, for inspection.
    pub fn raw_sqrt_alpha_bar(steps: usize, offset: f64, t: usize) -> f64 {
        1.0 - (t as f64 / steps as f64 + offset).sqrt()
    }

    pub fn n_rows(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn is_shared(&self) -> bool {
        self.alpha_bar.len() == 1
    }

    fn row(&self, n: usize) -> &[f64] {
        &self.alpha_bar[n.min(self.alpha_bar.len() - 1)]
    }

    pub fn alpha_bar(&self, t: usize, n: usize) -> f64 {
        self.row(n)[t]
    }

    /// `β_t = 1 − ᾱ_t/ᾱ_{t−1}`; `β_0 = 1 − ᾱ_0`.
    pub fn beta(&self, t: usize, n: usize) -> f64 {
        let row = self.row(n);
        if t == 0 {
            1.0 - row[0]
        } else {
            1.0 - row[t] / row[t - 1]
        }
    }

    pub fn alpha(&self, t: usize, n: usize) -> f64 {
        1.0 - self.beta(t, n)
    }

    fn check_step(&self, t: usize, min: usize) -> Result<()> {
        if t < min || t > self.steps {
            return Err(Error::Input(format!("step {t} outside {min}..={}", self.steps)));
        }
        Ok(())
    }

    /// One forward step: `N(√(1−β_t)·z, β_t·A²·I)`, per-position `β`.
    pub fn forward_step<T: Scalar, R: Rng>(&self, z_prev: &LatentBlock<T>, t: usize, rng: &mut R) -> Result<LatentBlock<T>> {
        self.check_step(t, 1)?;
        let mut out = z_prev.data.clone();
        for n in 0..out.rows() {
            let beta = self.beta(t, n);
            let (mean_scale, std) = ((1.0 - beta).sqrt(), beta.sqrt() * self.amp);
            for v in out.row_mut(n) {
                *v = T::of(mean_scale * v.as_f64() + std * normal(rng));
            }
        }
        LatentBlock::new(out, t)
    }

    /// Closed-form corruption: `N(√ᾱ_t·z0, (1−ᾱ_t)·A²·I)`.
    pub fn forward_jump<T: Scalar, R: Rng>(&self, z0: &LatentBlock<T>, t: usize, rng: &mut R) -> Result<LatentBlock<T>> {
        self.check_step(t, 0)?;
        let mut out = z0.data.clone();
        for n in 0..out.rows() {
            let ab = self.alpha_bar(t, n);
            let (mean_scale, std) = (ab.sqrt(), (1.0 - ab).sqrt() * self.amp);
            for v in out.row_mut(n) {
                *v = T::of(mean_scale * v.as_f64() + std * normal(rng));
            }
        }
        LatentBlock::new(out, t)
    }

    /// Posterior `q(z_{t−1} | z_t, z_0)`: mean block and per-position variance.
    pub fn posterior_params<T: Scalar>(
        &self,
        z_t: &LatentBlock<T>,
        z0: &LatentBlock<T>,
        t: usize,
    ) -> Result<(LatentBlock<T>, Vec<f64>)> {
        if t == 0 {
            return Err(Error::Input("posterior is undefined at step 0".into()));
        }
        self.check_step(t, 1)?;
        if z_t.data.shape() != z0.data.shape() {
            return Err(Error::Shape(format!("{:?} vs {:?}", z_t.data.shape(), z0.data.shape())));
        }
        let mut mean = z_t.data.clone();
        let mut var = Vec::with_capacity(mean.rows());
        for n in 0..mean.rows() {
            let (ab_t, ab_prev) = (self.alpha_bar(t, n), self.alpha_bar(t - 1, n));
            let beta = self.beta(t, n);
            let c0 = ab_prev.sqrt() * beta / (1.0 - ab_t);
            let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
            for (m, z) in mean.row_mut(n).iter_mut().zip(z0.slot(n)) {
                *m = T::of(c0 * z.as_f64() + ct * m.as_f64());
            }
            var.push((1.0 - ab_prev) / (1.0 - ab_t) * beta);
        }
        Ok((LatentBlock::new(mean, t - 1)?, var))
    }

    /// Checks the schedule invariants; returns the first violation.
    pub fn validate(&self) -> Result<()> {
        for (n, row) in self.alpha_bar.iter().enumerate() {
            if row.len() != self.steps + 1 {
                return Err(Error::Config(format!("row {n} has {} entries", row.len())));
            }
            for t in 0..=self.steps {
                if !(row[t] > 0.0 && row[t] < 1.0) {
                    return Err(Error::Config(format!("alpha_bar[{n}][{t}] = {} outside (0,1)", row[t])));
                }
                if t > 0 {
                    let beta = 1.0 - row[t] / row[t - 1];
                    if row[t] >= row[t - 1] || !(BETA_MIN * (1.0 - 1e-9)..=BETA_MAX * (1.0 + 1e-12)).contains(&beta) {
                        return Err(Error::Config(format!("beta[{n}][{t}] = {beta} violates bounds")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Audit dump: a JSON array of `ᾱ` rows.
    pub fn dump_rows(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.alpha_bar)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Running per-(step, position) diffusion losses over one update window.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveState {
    steps: usize,
    positions: usize,
    sums: Vec<Vec<f64>>,
    counts: Vec<Vec<u32>>,
    pub steps_in_window: u64,
    pub cadence: u64,
}

impl AdaptiveState {
    pub fn new(steps: usize, positions: usize) -> Self {
        Self {
            steps,
            positions,
            sums: vec![vec![0.0; steps + 1]; positions],
            counts: vec![vec![0; steps + 1]; positions],
            steps_in_window: 0,
            cadence: ADAPT_EVERY,
        }
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn record(&mut self, t: usize, n: usize, loss: f64) {
        if t <= self.steps && n < self.positions && loss.is_finite() && loss >= 0.0 {
            self.sums[n][t] += loss;
            self.counts[n][t] += 1;
        }
    }

    /// Marks the end of a training step; true when the window is complete.
    pub fn tick(&mut self) -> bool {
        self.steps_in_window += 1;
        self.steps_in_window >= self.cadence
    }

    pub fn reset(&mut self) {
        for row in &mut self.sums {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
        for row in &mut self.counts {
            row.iter_mut().for_each(|v| *v = 0);
        }
        self.steps_in_window = 0;
    }

    /// Mean loss at `(t, n)`, if recorded.
    pub fn mean(&self, t: usize, n: usize) -> Option<f64> {
        let c = self.counts[n][t];
        (c > 0).then(|| self.sums[n][t] / c as f64)
    }

    /// Losses for `t = 1..=T` at position `n`; gaps are linearly interpolated
    /// between recorded steps (held constant beyond them). `None` when fewer
    /// than two steps were recorded.
    pub fn filled_curve(&self, n: usize) -> Option<Vec<f64>> {
        let known: Vec<(usize, f64)> = (1..=self.steps).filter_map(|t| self.mean(t, n).map(|l| (t, l))).collect();
        if known.len() < 2 {
            return None;
        }
        let mut out = Vec::with_capacity(self.steps);
        let mut j = 0;
        for t in 1..=self.steps {
            while j + 1 < known.len() && known[j + 1].0 <= t {
                j += 1;
            }
            let v = if t <= known[0].0 {
                known[0].1
            } else if j + 1 >= known.len() {
                known[known.len() - 1].1
            } else {
                let (t0, l0) = known[j];
                let (t1, l1) = known[j + 1];
                l0 + (l1 - l0) * (t - t0) as f64 / (t1 - t0) as f64
            };
            out.push(v);
        }
        Some(out)
    }
}

/// Piecewise-linear map through `(loss_t, ᾱ_t)`: the first segment (in step
/// order) whose loss range brackets `value` is used; outside the recorded
/// range the endpoint `ᾱ` is returned.
fn interpolate(losses: &[f64], alpha: &[f64], value: f64) -> f64 {
    for i in 1..losses.len() {
        let (l0, l1) = (losses[i - 1], losses[i]);
        let (lo, hi) = if l0 <= l1 { (l0, l1) } else { (l1, l0) };
        if value >= lo && value <= hi {
            if (l1 - l0).abs() < f64::EPSILON * l0.abs().max(1.0) {
                return alpha[i];
            }
            return (alpha[i] - alpha[i - 1]) / (l1 - l0) * (value - l0) + alpha[i - 1];
        }
    }
    let (imin, imax) = losses.iter().enumerate().fold((0, 0), |(a, b), (i, &l)| {
        (if l < losses[a] { i } else { a }, if l > losses[b] { i } else { b })
    });
    if value < losses[imin] {
        alpha[imin]
    } else {
        alpha[imax]
    }
}

/// Re-fits every position's schedule so its recorded losses become evenly
/// spaced over steps `1..=T`. Positions with fewer than two distinct loss
/// values keep their schedule. `ᾱ_0` is never changed.
pub fn adapt_schedule(state: &AdaptiveState, sched: &NoiseSchedule) -> NoiseSchedule {
    let positions = state.positions().max(1);
    let mut rows = Vec::with_capacity(positions);
    for n in 0..positions {
        let current: Vec<f64> = sched.row(n).to_vec();
        let Some(losses) = state.filled_curve(n) else {
            rows.push(current);
            continue;
        };
        let (lmin, lmax) = losses.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &l| (a.min(l), b.max(l)));
        if !(lmax > lmin) {
            rows.push(current);
            continue;
        }
        let alpha = &current[1..];
        let steps = losses.len();
        let mut raw = Vec::with_capacity(steps + 1);
        raw.push(current[0]);
        for i in 0..steps {
            let target = if steps == 1 { lmin } else { lmin + (lmax - lmin) * i as f64 / (steps - 1) as f64 };
            raw.push(interpolate(&losses, alpha, target).clamp(1e-12, 1.0 - 1e-12));
        }
        let mono = isotonic_decreasing(&raw[1..]);
        let mut fitted = vec![raw[0]];
        fitted.extend(mono);
        rows.push(clamp_cumulative(&fitted));
    }
    NoiseSchedule { steps: sched.steps, offset: sched.offset, amp: sched.amp, alpha_bar: rows }
}
