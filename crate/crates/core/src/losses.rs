//! Training objectives.
//!
//! The combined objective is `λ·bce(d, b) + hard(s, g, d) + ohem(s, g)`:
//!
//! * `ohem`: cross-entropy averaged over the pixels whose ground-truth
//!   probability is below a threshold, falling back to the largest
//!   `ceil(valid · min_kept_fraction)` losses when too few qualify.
//! * `bce`: binary cross-entropy between the indicator map `d` and the edge
//!   map `b`.
//! * `hard`: among valid pixels with `d > t_b`, the `K` with the smallest
//!   ground-truth probability (`K = min(candidates, ceil(valid · keep))`),
//!   averaged cross-entropy. The `d > t_b` filter is not differentiated.
//!
//! Rank ties are broken by flat pixel index so selections are deterministic.

use crate::autodiff::{Tape, Var};
use crate::config;
use crate::edge::EdgeMap;
use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE_INDEX};
use crate::tensor::{Element, Tensor};

/// Clamp applied to probabilities before taking logs in `bce`.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub t_b: f64,
    pub hard_keep_fraction: f64,
    pub ohem_prob_threshold: f64,
    pub ohem_min_kept_fraction: f64,
    pub ignore_index: u8,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 25.0,
            t_b: 0.8,
            hard_keep_fraction: 1.0 / 16.0,
            ohem_prob_threshold: 0.7,
            ohem_min_kept_fraction: 1.0 / 16.0,
            ignore_index: IGNORE_INDEX,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let frac = |v: f64| v > 0.0 && v <= 1.0;
        if !(self.t_b > 0.0 && self.t_b < 1.0) {
            return Err(Error::Config(format!("t_b = {} must lie in (0, 1)", self.t_b)));
        }
        if !frac(self.hard_keep_fraction) || !frac(self.ohem_min_kept_fraction) {
            return Err(Error::Config("keep fractions must lie in (0, 1]".into()));
        }
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::Config(format!("lambda = {} must be positive", self.lambda)));
        }
        if !(self.ohem_prob_threshold > 0.0 && self.ohem_prob_threshold <= 1.0) {
            return Err(Error::Config("ohem_prob_threshold must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// Apply one `key = value` setting. Returns `false` for foreign keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "lambda" => self.lambda = config::scalar(key, value)?,
            "t_b" => self.t_b = config::scalar(key, value)?,
            "hard_keep_fraction" => self.hard_keep_fraction = config::scalar(key, value)?,
            "ohem_prob_threshold" => self.ohem_prob_threshold = config::scalar(key, value)?,
            "ohem_min_kept_fraction" => self.ohem_min_kept_fraction = config::scalar(key, value)?,
            "ignore_index" => self.ignore_index = config::scalar(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_text(&self) -> String {
        format!(
            "lambda = {}\nt_b = {}\nhard_keep_fraction = {}\nohem_prob_threshold = {}\n\
             ohem_min_kept_fraction = {}\nignore_index = {}\n",
            self.lambda,
            self.t_b,
            self.hard_keep_fraction,
            self.ohem_prob_threshold,
            self.ohem_min_kept_fraction,
            self.ignore_index
        )
    }
}

/// Per-pixel cross-entropy values, detached from the tape.
#[derive(Clone, Debug)]
pub struct PixelLosses {
    /// `−log softmax(logits)_{g_i}` per pixel; 0 where ignored.
    pub loss: Vec<f64>,
    pub valid: Vec<bool>,
}

impl PixelLosses {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Ground-truth probability `exp(−loss)`.
    pub fn gt_prob(&self, i: usize) -> f64 {
        (-self.loss[i]).exp()
    }
}

/// Indices sorted by loss descending, ties by index ascending.
fn rank_by_loss(candidates: &mut [usize], loss: &[f64]) {
    candidates.sort_by(|&a, &b| loss[b].total_cmp(&loss[a]).then(a.cmp(&b)));
}

fn keep_count(valid: usize, fraction: f64) -> usize {
    (valid as f64 * fraction).ceil() as usize
}

/// Pixels kept by online hard example mining, in ascending index order.
pub fn ohem_select(px: &PixelLosses, cfg: &LossConfig) -> Vec<usize> {
    let valid: Vec<usize> = (0..px.loss.len()).filter(|&i| px.valid[i]).collect();
    if valid.is_empty() {
        return valid;
    }
    let min_kept = keep_count(valid.len(), cfg.ohem_min_kept_fraction).min(valid.len());
    let hard: Vec<usize> = valid.iter().copied().filter(|&i| px.gt_prob(i) < cfg.ohem_prob_threshold).collect();
    if hard.len() >= min_kept {
        return hard;
    }
    let mut ranked = valid;
    rank_by_loss(&mut ranked, &px.loss);
    ranked.truncate(min_kept);
    ranked.sort_unstable();
    ranked
}

/// Pixels kept by edge-guided hard pixel mining, in ascending index order.
pub fn hard_select(px: &PixelLosses, indicator: &[f64], cfg: &LossConfig) -> Vec<usize> {
    let mut candidates: Vec<usize> = (0..px.loss.len()).filter(|&i| px.valid[i] && indicator[i] > cfg.t_b).collect();
    let k = keep_count(px.valid_count(), cfg.hard_keep_fraction).min(candidates.len());
    rank_by_loss(&mut candidates, &px.loss);
    candidates.truncate(k);
    candidates.sort_unstable();
    candidates
}

fn pixel_losses<T: Element>(logp: &Tensor<T>, labels: &LabelMap, ignore: u8) -> PixelLosses {
    let [n, c, h, w] = logp.dims();
    let plane = h * w;
    let mut loss = vec![0.0; n * plane];
    let mut valid = vec![false; n * plane];
    for i in 0..n {
        for p in 0..plane {
            let g = labels.data()[i * plane + p];
            if g == ignore {
                continue;
            }
            loss[i * plane + p] = -logp.data()[(i * c + g as usize) * plane + p].as_f64();
            valid[i * plane + p] = true;
        }
    }
    PixelLosses { loss, valid }
}

impl<T: Element> Tape<T> {
    /// `Σ_i weight_i · (−logp[i, g_i])` over flat pixel indices `i`.
    fn weighted_nll(&mut self, logp: Var, labels: &LabelMap, picks: Vec<(usize, f64)>) -> Result<Var> {
        let [_, c, h, w] = self.shape(logp).0;
        let plane = h * w;
        let flat: Vec<(usize, f64)> = picks
            .into_iter()
            .map(|(i, wt)| {
                let (n, p) = (i / plane, i % plane);
                ((n * c + labels.data()[i] as usize) * plane + p, wt)
            })
            .collect();
        let lp = self.value(logp).data();
        let value: f64 = flat.iter().map(|&(j, wt)| -wt * lp[j].as_f64()).sum::<f64>() + 0.0;
        let len = lp.len();
        Ok(self.record(Tensor::scalar(T::from_f64(value)), &[logp], move |args| {
            let mut g = vec![0.0; len];
            for &(j, wt) in &flat {
                g[j] -= wt * args.grad[0];
            }
            vec![Some(g)]
        }))
    }

    fn prepare_ce(&mut self, logits: Var, labels: &LabelMap, ignore: u8) -> Result<(Var, PixelLosses)> {
        let dims = self.shape(logits).0;
        labels.check_matches(dims, "cross entropy")?;
        labels.validate(dims[1], ignore)?;
        let logp = self.log_softmax_channel(logits)?;
        let px = pixel_losses(self.value(logp), labels, ignore);
        Ok((logp, px))
    }

    fn mean_nll(&mut self, logp: Var, labels: &LabelMap, kept: &[usize]) -> Result<Var> {
        let wt = if kept.is_empty() { 0.0 } else { 1.0 / kept.len() as f64 };
        self.weighted_nll(logp, labels, kept.iter().map(|&i| (i, wt)).collect())
    }
}

/// Per-pixel cross-entropy together with its mean over non-ignored pixels.
pub fn cross_entropy_pixelwise<T: Element>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &LabelMap,
    ignore: u8,
) -> Result<(PixelLosses, Var)> {
    let (logp, px) = tape.prepare_ce(logits, labels, ignore)?;
    let kept: Vec<usize> = (0..px.loss.len()).filter(|&i| px.valid[i]).collect();
    let mean = tape.mean_nll(logp, labels, &kept)?;
    Ok((px, mean))
}

pub fn ohem_ce<T: Element>(tape: &mut Tape<T>, logits: Var, labels: &LabelMap, cfg: &LossConfig) -> Result<Var> {
    let (logp, px) = tape.prepare_ce(logits, labels, cfg.ignore_index)?;
    let kept = ohem_select(&px, cfg);
    tape.mean_nll(logp, labels, &kept)
}

/// `mean(−[b·log d + (1 − b)·log(1 − d)])` with `d` clamped to
/// `[PROB_CLAMP, 1 − PROB_CLAMP]`; the clamp blocks the gradient.
pub fn bce<T: Element>(tape: &mut Tape<T>, d: Var, edges: &EdgeMap) -> Result<Var> {
    let dims = tape.shape(d).0;
    if dims != edges.dims() {
        return Err(Error::shape(format!("bce: indicator {:?} vs edge map {:?}", dims, edges.dims())));
    }
    let b: Vec<f64> = edges.data().iter().map(|&v| v as f64).collect();
    let count = b.len().max(1) as f64;
    let value: f64 = tape
        .value(d)
        .data()
        .iter()
        .zip(&b)
        .map(|(dv, bv)| {
            let dv = dv.as_f64();
            -(bv * dv.max(PROB_CLAMP).ln() + (1.0 - bv) * (1.0 - dv).max(PROB_CLAMP).ln())
        })
        .sum::<f64>()
        / count;
    Ok(tape.record(Tensor::scalar(T::from_f64(value)), &[d], move |args| {
        let g0 = args.grad[0] / count;
        let grad = args.inputs[0]
            .data()
            .iter()
            .zip(&b)
            .map(|(dv, bv)| {
                let dv = dv.as_f64();
                let pos = if dv > PROB_CLAMP { -bv / dv } else { 0.0 };
                let neg = if 1.0 - dv > PROB_CLAMP { (1.0 - bv) / (1.0 - dv) } else { 0.0 };
                g0 * (pos + neg)
            })
            .collect();
        vec![Some(grad)]
    }))
}

pub fn hard_pixel_loss<T: Element>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &LabelMap,
    d: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    let ds = tape.shape(d).0;
    let ls = tape.shape(logits).0;
    if ds != [ls[0], 1, ls[2], ls[3]] {
        return Err(Error::shape(format!("hard loss: indicator {ds:?} vs logits {ls:?}")));
    }
    let indicator: Vec<f64> = tape.value(d).data().iter().map(|v| v.as_f64()).collect();
    let (logp, px) = tape.prepare_ce(logits, labels, cfg.ignore_index)?;
    let kept = hard_select(&px, &indicator, cfg);
    tape.mean_nll(logp, labels, &kept)
}

/// Scalar values of the loss terms, for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub bce: f64,
    pub hard: f64,
    pub ohem: f64,
}

/// `λ·bce + hard + ohem`.
pub fn total_loss<T: Element>(
    tape: &mut Tape<T>,
    logits: Var,
    d: Var,
    edges: &EdgeMap,
    labels: &LabelMap,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    let l_bce = bce(tape, d, edges)?;
    let l_hard = hard_pixel_loss(tape, logits, labels, d, cfg)?;
    let l_ohem = ohem_ce(tape, logits, labels, cfg)?;
    let weighted = tape.scale(l_bce, cfg.lambda);
    let spatial = tape.add(weighted, l_hard)?;
    let total = tape.add(spatial, l_ohem)?;
    let val = |t: &Tape<T>, v: Var| t.value(v).data()[0].as_f64();
    let breakdown = LossBreakdown {
        total: val(tape, total),
        bce: val(tape, l_bce),
        hard: val(tape, l_hard),
        ohem: val(tape, l_ohem),
    };
    Ok((total, breakdown))
}

/// Objective without the spatial terms: `ohem` alone.
pub fn context_loss<T: Element>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &LabelMap,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    let l = ohem_ce(tape, logits, labels, cfg)?;
    let v = tape.value(l).data()[0].as_f64();
    Ok((l, LossBreakdown { total: v, bce: 0.0, hard: 0.0, ohem: v }))
}
