//! Optimizer, schedule, the training loop, evaluation and the ablation run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::Tape;
use crate::config::{self, parse_entries};
use crate::data::{augment, AugmentConfig, Sample};
use crate::edge::{extract_edge_map, EdgeMap};
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::losses::{context_loss, total_loss, LossBreakdown, LossConfig};
use crate::metrics::{ConfusionMatrix, MiouReport};
use crate::model::{count_flops, Alignment, Layout, Model, ModelConfig, ParameterSet};
use crate::nn::BnMode;
use crate::rng::Prng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub total_iters: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub seed: u64,
    /// Validate every this many iterations; 0 validates only after the last.
    pub eval_every: usize,
    pub crop: (usize, usize),
    pub augment: bool,
    pub scale_range: (f64, f64),
    pub hflip_prob: f64,
    pub edge_thickness: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_iters: 300,
            batch_size: 8,
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            poly_power: 0.9,
            seed: 0,
            eval_every: 0,
            crop: (64, 64),
            augment: true,
            scale_range: (0.5, 2.0),
            hflip_prob: 0.5,
            edge_thickness: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.total_iters == 0 {
            return bad("total_iters must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) {
            return bad("base_lr must be finite and non-negative, momentum in [0, 1)");
        }
        if !(self.weight_decay.is_finite()
            && self.weight_decay >= 0.0
            && self.poly_power.is_finite()
            && self.poly_power > 0.0)
        {
            return bad("weight_decay must be non-negative and poly_power positive");
        }
        if self.edge_thickness == 0 {
            return bad("edge_thickness must be at least 1");
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi) || !(0.0..=1.0).contains(&self.hflip_prob) {
            return bad("scale range must satisfy 0 < min <= max and hflip_prob lie in [0, 1]");
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "total_iters" => self.total_iters = config::scalar(key, value)?,
            "batch_size" => self.batch_size = config::scalar(key, value)?,
            "base_lr" => self.base_lr = config::scalar(key, value)?,
            "momentum" => self.momentum = config::scalar(key, value)?,
            "weight_decay" => self.weight_decay = config::scalar(key, value)?,
            "poly_power" => self.poly_power = config::scalar(key, value)?,
            "seed" => self.seed = config::scalar(key, value)?,
            "eval_every" => self.eval_every = config::scalar(key, value)?,
            "crop" => self.crop = config::parse_size(value)?,
            "augment" => self.augment = config::boolean(key, value)?,
            "scale_min" => self.scale_range.0 = config::scalar(key, value)?,
            "scale_max" => self.scale_range.1 = config::scalar(key, value)?,
            "hflip_prob" => self.hflip_prob = config::scalar(key, value)?,
            "edge_thickness" => self.edge_thickness = config::scalar(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_text(&self) -> String {
        format!(
            "total_iters = {}\nbatch_size = {}\nbase_lr = {}\nmomentum = {}\nweight_decay = {}\n\
             poly_power = {}\nseed = {}\neval_every = {}\ncrop = {}x{}\naugment = {}\n\
             scale_min = {}\nscale_max = {}\nhflip_prob = {}\nedge_thickness = {}\n",
            self.total_iters,
            self.batch_size,
            self.base_lr,
            self.momentum,
            self.weight_decay,
            self.poly_power,
            self.seed,
            self.eval_every,
            self.crop.0,
            self.crop.1,
            self.augment,
            self.scale_range.0,
            self.scale_range.1,
            self.hflip_prob,
            self.edge_thickness,
        )
    }

    fn augment_config(&self) -> AugmentConfig {
        AugmentConfig { scale_range: self.scale_range, crop: self.crop, hflip_prob: self.hflip_prob }
    }
}

/// Model, optimizer and loss settings read from one config file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { model: ModelConfig::desk(), train: TrainConfig::default(), loss: LossConfig::default() }
    }
}

impl RunConfig {
    /// Start from the defaults and apply every line of `text`.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for e in parse_entries(text)? {
            let known = cfg.model.set(&e.key, &e.value)?
                || cfg.train.set(&e.key, &e.value)?
                || cfg.loss.set(&e.key, &e.value)?;
            if !known {
                return Err(Error::Config(format!("line {}: unknown key `{}`", e.line, e.key)));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path).map_err(Error::at(path))?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()
    }

    pub fn to_text(&self) -> String {
        format!("{}{}{}", self.model.to_text(), self.train.to_text(), self.loss.to_text())
    }
}

/// `base_lr · (1 − iter / total_iters)^poly_power`.
pub fn poly_lr(iter: usize, cfg: &TrainConfig) -> Result<f64> {
    if iter > cfg.total_iters {
        return Err(Error::invalid(format!("iteration {iter} beyond total_iters {}", cfg.total_iters)));
    }
    Ok(cfg.base_lr * (1.0 - iter as f64 / cfg.total_iters as f64).powf(cfg.poly_power))
}

/// Conv weights decay; batch-norm affine parameters and biases do not.
pub fn decays(name: &str) -> bool {
    name.ends_with(".weight")
}

pub type Velocity = BTreeMap<String, Tensor<f32>>;

/// One SGD step with momentum:
/// `g' = g + wd·p` (decaying parameters only), `v ← μ·v + g'`, `p ← p − lr·v`.
///
/// Every gradient is checked before anything is modified, so a non-finite
/// gradient leaves `params` and `velocity` untouched.
pub fn sgd_momentum_step(
    params: &mut ParameterSet<f32>,
    grads: &BTreeMap<String, Vec<f64>>,
    velocity: &mut Velocity,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    for (name, t) in &params.tensors {
        let g = grads.get(name).ok_or_else(|| Error::invalid(format!("no gradient for `{name}`")))?;
        if g.len() != t.len() {
            return Err(Error::shape(format!("gradient for `{name}` has {} values, parameter {}", g.len(), t.len())));
        }
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of `{name}` at index {i}")));
        }
    }
    for (name, t) in params.tensors.iter_mut() {
        let g = &grads[name];
        let v =
            velocity.entry(name.clone()).or_insert_with(|| Tensor::zeros(t.shape()).expect("shape already allocated"));
        let wd = if decays(name) { cfg.weight_decay } else { 0.0 };
        for ((p, vel), &gv) in t.data_mut().iter_mut().zip(v.data_mut()).zip(g) {
            let g2 = gv + wd * *p as f64;
            let nv = cfg.momentum * *vel as f64 + g2;
            *vel = nv as f32;
            *p = (*p as f64 - lr * nv) as f32;
        }
    }
    Ok(())
}

/// Batch composition and augmentation seeds for a training run.
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: Prng,
}

impl BatchSampler {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut s = Self { order: (0..len).collect(), cursor: len, rng: Prng::derived(seed, 1) };
        s.refill();
        s
    }

    fn refill(&mut self) {
        self.rng.shuffle(&mut self.order);
        self.cursor = 0;
    }

    /// Next `size` indices; the order is reshuffled whenever it runs out.
    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.refill();
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

/// A stacked batch and its supervision targets.
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: LabelMap,
    pub edges: EdgeMap,
}

impl Batch {
    pub fn from_samples(samples: &[Sample], edge_thickness: usize) -> Result<Self> {
        let images: Vec<Tensor<f32>> = samples.iter().map(|s| s.image.clone()).collect();
        let labels: Vec<LabelMap> = samples.iter().map(|s| s.labels.clone()).collect();
        let labels = LabelMap::stack(&labels)?;
        let edges = extract_edge_map(&labels, edge_thickness)?;
        Ok(Self { images: Tensor::stack_batch(&images)?, labels, edges })
    }
}

/// Forward, loss, backward and one optimizer step on `batch`.
pub fn train_step(
    model: &mut Model<f32>,
    velocity: &mut Velocity,
    batch: &Batch,
    run: &RunConfig,
    lr: f64,
) -> Result<LossBreakdown> {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(batch.images.clone());
    let stats_before = model.params.batchnorm.clone();
    let (out, vars) = model.forward(&mut tape, x, BnMode::Train)?;
    let (loss, breakdown) = if model.cfg.spatial_loss_enabled {
        total_loss(&mut tape, out.logits, out.indicator, &batch.edges, &batch.labels, &run.loss)?
    } else {
        context_loss(&mut tape, out.logits, &batch.labels, &run.loss)?
    };
    if !breakdown.total.is_finite() {
        model.params.batchnorm = stats_before;
        return Err(Error::NonFinite(format!("loss {:?}", breakdown)));
    }
    let grads = tape.backward(loss)?;
    let grads: BTreeMap<String, Vec<f64>> = vars.iter().map(|(k, &v)| (k.clone(), grads.get_or_zeros(v))).collect();
    if let Err(e) = sgd_momentum_step(&mut model.params, &grads, velocity, lr, &run.train) {
        model.params.batchnorm = stats_before;
        return Err(e);
    }
    Ok(breakdown)
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    /// Iterations completed.
    pub iter: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub val_miou: Option<f64>,
}

pub const CSV_HEADER: &str = "iter,lr,loss_total,loss_bce,loss_hard,loss_ohem,val_miou";

impl LogRow {
    pub fn to_csv(&self) -> String {
        let val = self.val_miou.map(|v| format!("{v:.6}")).unwrap_or_default();
        format!(
            "{},{:.8},{:.6},{:.6},{:.6},{:.6},{}",
            self.iter, self.lr, self.loss.total, self.loss.bce, self.loss.hard, self.loss.ohem, val
        )
    }
}

/// Model and optimizer state; after a failed step it still holds the last
/// good values.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model<f32>,
    pub velocity: Velocity,
    pub iteration: usize,
}

impl TrainState {
    pub fn new(run: &RunConfig) -> Result<Self> {
        run.validate()?;
        Ok(Self { model: Model::new(run.model.clone(), run.train.seed)?, velocity: Velocity::new(), iteration: 0 })
    }
}

/// Run `run.train.total_iters` steps, calling `log` after each one.
///
/// Batches come from a seeded shuffle of `train_set`; every sample gets its
/// own augmentation seed derived from the run seed and its batch position.
pub fn train(
    state: &mut TrainState,
    run: &RunConfig,
    train_set: &[Sample],
    val_set: Option<&[Sample]>,
    mut log: impl FnMut(&LogRow) -> Result<()>,
) -> Result<()> {
    run.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    for s in train_set {
        s.labels.validate(run.model.num_classes, run.loss.ignore_index)?;
    }
    let tc = &run.train;
    let aug = tc.augment_config();
    let mut sampler = BatchSampler::new(train_set.len(), tc.seed);
    for _ in 0..state.iteration.min(tc.total_iters) {
        sampler.next_batch(tc.batch_size);
    }
    while state.iteration < tc.total_iters {
        let it = state.iteration;
        let idx = sampler.next_batch(tc.batch_size);
        let samples = idx
            .iter()
            .enumerate()
            .map(|(j, &i)| {
                if tc.augment {
                    let seed = Prng::derived(tc.seed, (2 << 32) | (it * tc.batch_size + j) as u64).next_u64();
                    augment(&train_set[i], seed, &aug)
                } else {
                    Ok(train_set[i].clone())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let batch = Batch::from_samples(&samples, tc.edge_thickness)?;
        let lr = poly_lr(it, tc)?;
        let loss = train_step(&mut state.model, &mut state.velocity, &batch, run, lr)?;
        state.iteration += 1;
        let due =
            state.iteration == tc.total_iters || (tc.eval_every > 0 && state.iteration.is_multiple_of(tc.eval_every));
        let val_miou = match val_set {
            Some(v) if due => Some(evaluate(&mut state.model, v, run.loss.ignore_index)?.miou),
            _ => None,
        };
        log(&LogRow { iter: state.iteration, lr, loss, val_miou })?;
    }
    Ok(())
}

/// Eval-mode prediction of every sample, scored into one confusion matrix.
pub fn confusion(model: &mut Model<f32>, samples: &[Sample], ignore: u8) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.cfg.num_classes);
    for s in samples {
        let pred = model.predict(&s.image)?;
        cm.accumulate(&pred, s.labels.data(), ignore)?;
    }
    Ok(cm)
}

pub fn evaluate(model: &mut Model<f32>, samples: &[Sample], ignore: u8) -> Result<MiouReport> {
    Ok(confusion(model, samples, ignore)?.report())
}

/// The six ablation configurations: label, alignment, spatial loss.
pub const ABLATION_ROWS: [(&str, Alignment, bool); 6] = [
    ("CP + SP (baseline)", Alignment::None, false),
    ("CP + SP + GFAM (CP→SP)", Alignment::GfamCpToSp, false),
    ("CP + SP + GFAM (SP→CP)", Alignment::GfamSpToCp, false),
    ("CP + SP + FAM (bidirection)", Alignment::FamBidirectional, false),
    ("CP + SP + GFAM (bidirection)", Alignment::GfamBidirectional, false),
    ("CP + SP + GFAM (bidirection) + SL", Alignment::GfamBidirectional, true),
];

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub model: ModelConfig,
    pub miou: f64,
    pub params: usize,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub input: (usize, usize),
}

impl AblationTable {
    fn row(&self, alignment: Alignment) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.model.alignment == alignment)
    }

    /// MAC overhead of bidirectional gated alignment over the baseline.
    pub fn gfam_overhead(&self) -> Option<f64> {
        let base = self.row(Alignment::None)?.macs as f64;
        Some(self.row(Alignment::GfamBidirectional)?.macs as f64 / base - 1.0)
    }

    /// `params(GFAM bidirectional) − params(FAM bidirectional)`.
    pub fn gate_parameter_delta(&self) -> Option<i64> {
        Some(
            self.row(Alignment::GfamBidirectional)?.params as i64
                - self.row(Alignment::FamBidirectional)?.params as i64,
        )
    }

    pub fn render(&self) -> String {
        let base = self.rows.first().map_or(0.0, |r| r.miou);
        let width = self.rows.iter().map(|r| r.label.chars().count()).max().unwrap_or(6).max(6);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>8}  {:>8}  {:>10}  {:>12}", "Method", "mIoU(%)", "Δ(%)", "params", "MACs");
        for (i, r) in self.rows.iter().enumerate() {
            let delta = if i == 0 { "-".to_string() } else { format!("{:+.2}", 100.0 * (r.miou - base)) };
            let pad = width - r.label.chars().count();
            let _ = writeln!(
                s,
                "{}{}  {:>8.2}  {:>8}  {:>10}  {:>12}",
                r.label,
                " ".repeat(pad),
                100.0 * r.miou,
                delta,
                r.params,
                r.macs
            );
        }
        if let Some(o) = self.gfam_overhead() {
            let _ = writeln!(s, "\nGFAM (bidirection) MAC overhead over baseline: {:.3}%", 100.0 * o);
        }
        if let Some(d) = self.gate_parameter_delta() {
            let _ = writeln!(s, "GFAM - FAM parameter delta: {d}");
        }
        let _ = writeln!(s, "input {}x{}", self.input.0, self.input.1);
        s
    }
}

/// Train every ablation configuration from `run` under the same seed and
/// budget and score it on `eval_set`.
pub fn ablate(
    run: &RunConfig,
    train_set: &[Sample],
    eval_set: &[Sample],
    mut progress: impl FnMut(&str, &LogRow),
) -> Result<AblationTable> {
    let input = run.train.crop;
    let mut rows = Vec::new();
    for (label, alignment, spatial_loss) in ABLATION_ROWS {
        let mut cfg = run.clone();
        cfg.model.alignment = alignment;
        cfg.model.spatial_loss_enabled = spatial_loss;
        let mut state = TrainState::new(&cfg)?;
        train(&mut state, &cfg, train_set, None, |row| {
            progress(label, row);
            Ok(())
        })?;
        let report = evaluate(&mut state.model, eval_set, cfg.loss.ignore_index)?;
        rows.push(AblationRow {
            label: label.to_string(),
            params: Layout::for_config(&cfg.model).num_parameters(),
            macs: count_flops(&cfg.model, input.0, input.1)?.total(),
            model: cfg.model,
            miou: report.miou,
        });
    }
    Ok(AblationTable { rows, input })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_schedule_points() {
        let cfg = TrainConfig { total_iters: 1000, ..Default::default() };
        assert_eq!(poly_lr(0, &cfg).unwrap(), 0.01);
        assert_eq!(poly_lr(1000, &cfg).unwrap(), 0.0);
        assert!((poly_lr(500, &cfg).unwrap() - 0.0053589).abs() < 1e-6);
        assert!(poly_lr(1001, &cfg).is_err());
    }

    fn one_param(v: Vec<f32>) -> ParameterSet<f32> {
        let n = v.len();
        ParameterSet {
            tensors: [("w.weight".to_string(), Tensor::from_vec((1, 1, 1, n), v).unwrap())].into(),
            batchnorm: BTreeMap::new(),
        }
    }

    #[test]
    fn zero_gradient_fixed_point() {
        let mut p = one_param(vec![1.0, -2.0]);
        let cfg = TrainConfig { weight_decay: 0.0, ..Default::default() };
        let g = [("w.weight".to_string(), vec![0.0, 0.0])].into();
        let mut v = Velocity::new();
        sgd_momentum_step(&mut p, &g, &mut v, 0.1, &cfg).unwrap();
        assert_eq!(p.get("w.weight").unwrap().data(), &[1.0, -2.0]);
    }

    #[test]
    fn plain_gradient_descent() {
        let mut p = one_param(vec![1.0]);
        let cfg = TrainConfig { weight_decay: 0.0, momentum: 0.0, ..Default::default() };
        let g = [("w.weight".to_string(), vec![0.5])].into();
        sgd_momentum_step(&mut p, &g, &mut Velocity::new(), 0.1, &cfg).unwrap();
        assert!((p.get("w.weight").unwrap().data()[0] - 0.95).abs() < 1e-7);
    }

    #[test]
    fn momentum_unroll() {
        let mut p = one_param(vec![0.0]);
        let cfg = TrainConfig { weight_decay: 0.0, momentum: 0.9, ..Default::default() };
        let g: BTreeMap<_, _> = [("w.weight".to_string(), vec![2.0])].into();
        let mut v = Velocity::new();
        for _ in 0..2 {
            sgd_momentum_step(&mut p, &g, &mut v, 0.01, &cfg).unwrap();
        }
        let expect = -0.01 * 2.0 * (1.0 + 1.9);
        assert!((p.get("w.weight").unwrap().data()[0] as f64 - expect).abs() < 1e-6);
    }

    #[test]
    fn decay_only_on_weights() {
        assert!(decays("head.fuse.conv.weight"));
        assert!(!decays("head.fuse.bn.gamma"));
        assert!(!decays("indicator.bias"));
    }

    #[test]
    fn nan_gradient_leaves_state_untouched() {
        let mut p = one_param(vec![1.0, 2.0]);
        let before = p.clone();
        let g = [("w.weight".to_string(), vec![0.1, f64::NAN])].into();
        let mut v = Velocity::new();
        let err = sgd_momentum_step(&mut p, &g, &mut v, 0.1, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(p, before);
        assert!(v.is_empty());
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = BatchSampler::new(5, 3);
        let mut seen: Vec<usize> = (0..5).flat_map(|_| s.next_batch(1)).collect();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn run_config_text() {
        let cfg = RunConfig::from_text("total_iters = 5\nalignment = none\nlambda = 10\ncrop = 32x32\n").unwrap();
        assert_eq!(cfg.train.total_iters, 5);
        assert_eq!(cfg.model.alignment, Alignment::None);
        assert_eq!(cfg.loss.lambda, 10.0);
        assert_eq!(RunConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        assert!(RunConfig::from_text("totl_iters = 5").is_err());
        assert!(RunConfig::from_text("total_iters = 0").is_err());
    }

    #[test]
    fn csv_row_format() {
        let row = LogRow {
            iter: 3,
            lr: 0.01,
            loss: LossBreakdown { total: 1.5, bce: 0.02, hard: 0.5, ohem: 0.5 },
            val_miou: None,
        };
        let line = row.to_csv();
        assert_eq!(line.split(',').count(), CSV_HEADER.split(',').count());
        assert!(line.ends_with(','));
    }
}
