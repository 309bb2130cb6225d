//! The two-path segmentation network.
//!
//! * spatial path: three `3×3` stride-2 conv + BN + ReLU layers (1/8 scale);
//! * context path: stride-2 stem, four residual stages of stride 2 (1/32),
//!   pyramid pooling, then a `1×1` projection to the spatial width that is
//!   upsampled to 1/8;
//! * optional flow alignment in either or both directions;
//! * fusion by channel concatenation, a `3×3` conv + BN + ReLU, a `1×1`
//!   classifier and a ×8 bilinear upsample;
//! * an indicator head `sigmoid(1×1 conv(spatial))`, also upsampled ×8.
//!
//! Parameters live in a [`ParameterSet`] keyed by dot-separated names. Every
//! forward pass binds them onto a fresh tape with [`bind_parameters`].

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::config::{self, Entry};
use crate::error::{Error, Result};
use crate::flow::{self, AlignVars, Aligned, ConvVars, WarpMode};
use crate::nn::{BnMode, RunningStats, BN_EPS, BN_MOMENTUM};
use crate::rng::Prng;
use crate::tensor::{Element, Tensor};

/// Which alignment modules sit between the two paths.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Alignment {
    /// Plain concatenation.
    None,
    /// Gated module producing an aligned spatial feature.
    GfamCpToSp,
    /// Gated module producing an aligned context feature.
    GfamSpToCp,
    FamBidirectional,
    #[default]
    GfamBidirectional,
}

impl Alignment {
    pub const ALL: [Alignment; 5] = [
        Alignment::None,
        Alignment::GfamCpToSp,
        Alignment::GfamSpToCp,
        Alignment::FamBidirectional,
        Alignment::GfamBidirectional,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Alignment::None => "none",
            Alignment::GfamCpToSp => "gfam_cp_to_sp",
            Alignment::GfamSpToCp => "gfam_sp_to_cp",
            Alignment::FamBidirectional => "fam_bidirectional",
            Alignment::GfamBidirectional => "gfam_bidirectional",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.as_str() == s)
    }

    /// `[cp_to_sp, sp_to_cp]`: `None` when absent, `Some(gated)` otherwise.
    pub fn modules(self) -> [Option<bool>; 2] {
        match self {
            Alignment::None => [None, None],
            Alignment::GfamCpToSp => [Some(true), None],
            Alignment::GfamSpToCp => [None, Some(true)],
            Alignment::FamBidirectional => [Some(false), Some(false)],
            Alignment::GfamBidirectional => [Some(true), Some(true)],
        }
    }
}

/// Alignment module names, also used as parameter prefixes and file suffixes.
pub const DIRECTIONS: [&str; 2] = ["cp_to_sp", "sp_to_cp"];

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub spatial_widths: [usize; 3],
    pub context_stem_width: usize,
    pub context_stage_widths: [usize; 4],
    pub blocks_per_stage: usize,
    pub ppm_bins: Vec<usize>,
    pub alignment: Alignment,
    pub spatial_loss_enabled: bool,
    pub warp_mode: WarpMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 5,
            spatial_widths: [16, 32, 64],
            context_stem_width: 16,
            context_stage_widths: [16, 32, 64, 128],
            blocks_per_stage: 1,
            ppm_bins: vec![1, 2, 3, 6],
            alignment: Alignment::GfamBidirectional,
            spatial_loss_enabled: true,
            warp_mode: WarpMode::WarpTarget,
        }
    }
}

impl ModelConfig {
    /// Desk-scale preset for 64×64 inputs: pyramid bins that fit the 2×2
    /// context feature, a narrower spatial path and a wider context path so
    /// the two alignment modules stay under 1% of the total MACs.
    pub fn desk() -> Self {
        Self {
            spatial_widths: [16, 32, 32],
            context_stage_widths: [32, 64, 128, 256],
            ppm_bins: vec![1, 2],
            ..Self::default()
        }
    }

    pub fn sp_channels(&self) -> usize {
        self.spatial_widths[2]
    }

    pub fn cp_channels(&self) -> usize {
        self.context_stage_widths[3]
    }

    pub fn ppm_branch_channels(&self) -> usize {
        (self.cp_channels() / self.ppm_bins.len().max(1)).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::Config(format!("num_classes = {} not in [2, 255]", self.num_classes)));
        }
        let widths = self
            .spatial_widths
            .iter()
            .chain(&self.context_stage_widths)
            .chain(std::iter::once(&self.context_stem_width));
        if widths.into_iter().any(|&w| w == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::Config("blocks_per_stage must be at least 1".into()));
        }
        if self.ppm_bins.is_empty() || self.ppm_bins.contains(&0) {
            return Err(Error::Config("ppm_bins must be a non-empty list of positive sizes".into()));
        }
        Ok(())
    }

    /// Apply one `key = value` setting. Returns `false` for keys that belong
    /// to another section.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "num_classes" => self.num_classes = config::scalar(key, value)?,
            "spatial_widths" => self.spatial_widths = config::fixed(key, value)?,
            "context_stem_width" => self.context_stem_width = config::scalar(key, value)?,
            "context_stage_widths" => self.context_stage_widths = config::fixed(key, value)?,
            "blocks_per_stage" => self.blocks_per_stage = config::scalar(key, value)?,
            "ppm_bins" => self.ppm_bins = config::list(key, value)?,
            "alignment" => {
                self.alignment =
                    Alignment::parse(value).ok_or_else(|| Error::Config(format!("unknown alignment {value:?}")))?
            }
            "spatial_loss" => self.spatial_loss_enabled = config::boolean(key, value)?,
            "warp_mode" => {
                self.warp_mode =
                    WarpMode::parse(value).ok_or_else(|| Error::Config(format!("unknown warp_mode {value:?}")))?
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Canonical text form; parsing it back with [`ModelConfig::from_entries`]
    /// gives an equal config.
    pub fn to_text(&self) -> String {
        format!(
            "num_classes = {}\nspatial_widths = {}\ncontext_stem_width = {}\n\
             context_stage_widths = {}\nblocks_per_stage = {}\nppm_bins = {}\n\
             alignment = {}\nspatial_loss = {}\nwarp_mode = {}\n",
            self.num_classes,
            config::join(&self.spatial_widths),
            self.context_stem_width,
            config::join(&self.context_stage_widths),
            self.blocks_per_stage,
            config::join(&self.ppm_bins),
            self.alignment.as_str(),
            self.spatial_loss_enabled,
            self.warp_mode.as_str(),
        )
    }

    pub fn from_entries(entries: &[Entry]) -> Result<Self> {
        let mut cfg = Self::default();
        for e in entries {
            if !cfg.set(&e.key, &e.value)? {
                return Err(Error::Config(format!("line {}: unknown model key `{}`", e.line, e.key)));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 of [`ModelConfig::to_text`].
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_text().as_bytes()).into()
    }
}

/// Initial indicator bias: `logit(0.1)`, roughly the share of edge pixels in
/// a 64×64 scene. With a zero weight the indicator starts at that prior, so
/// the weighted edge loss does not swamp the segmentation gradient early on.
pub const INDICATOR_PRIOR_LOGIT: f64 = -2.197_224_577_336_219_6;

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    He {
        fan_in: usize,
    },
    Zeros,
    Ones,
    Const(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: [usize; 4],
    pub init: Init,
}

/// Every parameter and batch-norm layer a config needs, sorted by name.
#[derive(Clone, Debug, Default)]
pub struct Layout {
    pub params: Vec<ParamSpec>,
    pub batchnorms: Vec<(String, usize)>,
}

impl Layout {
    pub fn for_config(cfg: &ModelConfig) -> Self {
        let mut l = Layout::default();
        let [s1, s2, s3] = cfg.spatial_widths;
        let mut prev = 3;
        for (i, w) in [s1, s2, s3].into_iter().enumerate() {
            l.conv_bn(&format!("spatial.{i}"), prev, w, 3);
            prev = w;
        }

        l.conv_bn("context.stem", 3, cfg.context_stem_width, 3);
        let mut prev = cfg.context_stem_width;
        for (s, &w) in cfg.context_stage_widths.iter().enumerate() {
            for b in 0..cfg.blocks_per_stage {
                let p = format!("context.stage{}.block{b}", s + 1);
                l.conv_bn(&format!("{p}.conv1"), prev, w, 3);
                l.conv_bn(&format!("{p}.conv2"), w, w, 3);
                if b == 0 {
                    l.conv_bn(&format!("{p}.proj"), prev, w, 1);
                }
                prev = w;
            }
        }
        let (c_cp, branch) = (cfg.cp_channels(), cfg.ppm_branch_channels());
        for (k, _) in cfg.ppm_bins.iter().enumerate() {
            l.conv_bias(&format!("context.ppm.branch{k}"), c_cp, branch, 1, true);
        }
        l.conv_bn("context.ppm.fuse", c_cp + branch * cfg.ppm_bins.len(), c_cp, 3);
        let c_sp = cfg.sp_channels();
        l.conv_bn("context.out", c_cp, c_sp, 1);

        for (dir, gated) in DIRECTIONS.iter().zip(cfg.alignment.modules()) {
            if let Some(gated) = gated {
                l.conv_bias(&format!("align.{dir}.flow"), 2 * c_sp, 2, 3, false);
                if gated {
                    l.conv_bias(&format!("align.{dir}.gate"), c_sp, 1, 3, false);
                }
            }
        }

        l.conv_bn("head.fuse", 2 * c_sp, c_sp, 3);
        l.conv_bias("head.classifier", c_sp, cfg.num_classes, 1, true);
        l.conv_bias("indicator", c_sp, 1, 1, false);
        l.params.last_mut().expect("indicator bias").init = Init::Const(INDICATOR_PRIOR_LOGIT);

        l.params.sort_by(|a, b| a.name.cmp(&b.name));
        l.batchnorms.sort();
        l
    }

    /// Bias-free conv (`{prefix}.conv.weight`) followed by `{prefix}.bn`.
    fn conv_bn(&mut self, prefix: &str, ic: usize, oc: usize, k: usize) {
        self.params.push(ParamSpec {
            name: format!("{prefix}.conv.weight"),
            dims: [oc, ic, k, k],
            init: Init::He { fan_in: ic * k * k },
        });
        self.params.push(ParamSpec { name: format!("{prefix}.bn.gamma"), dims: [1, oc, 1, 1], init: Init::Ones });
        self.params.push(ParamSpec { name: format!("{prefix}.bn.beta"), dims: [1, oc, 1, 1], init: Init::Zeros });
        self.batchnorms.push((format!("{prefix}.bn"), oc));
    }

    /// Conv with bias; `he = false` zero-initializes the weight.
    fn conv_bias(&mut self, prefix: &str, ic: usize, oc: usize, k: usize, he: bool) {
        let init = if he { Init::He { fan_in: ic * k * k } } else { Init::Zeros };
        self.params.push(ParamSpec { name: format!("{prefix}.weight"), dims: [oc, ic, k, k], init });
        self.params.push(ParamSpec { name: format!("{prefix}.bias"), dims: [1, oc, 1, 1], init: Init::Zeros });
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.dims.iter().product::<usize>()).sum()
    }
}

/// Named parameters and batch-norm running statistics. Maps iterate in name
/// order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet<T: Element = f32> {
    pub tensors: BTreeMap<String, Tensor<T>>,
    pub batchnorm: BTreeMap<String, RunningStats<T>>,
}

impl<T: Element> ParameterSet<T> {
    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.get(name).ok_or_else(|| Error::invalid(format!("no parameter named `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors.get_mut(name).ok_or_else(|| Error::invalid(format!("no parameter named `{name}`")))
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Element>(&self) -> ParameterSet<U> {
        ParameterSet {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            batchnorm: self.batchnorm.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Error unless names and shapes match `layout` exactly.
    pub fn check_layout(&self, layout: &Layout) -> Result<()> {
        if self.tensors.len() != layout.params.len() || self.batchnorm.len() != layout.batchnorms.len() {
            return Err(Error::invalid(format!(
                "parameter set has {} tensors / {} batch norms, config expects {} / {}",
                self.tensors.len(),
                self.batchnorm.len(),
                layout.params.len(),
                layout.batchnorms.len()
            )));
        }
        for p in &layout.params {
            let dims = self.get(&p.name)?.dims();
            if dims != p.dims {
                return Err(Error::shape(format!("{}: {:?} where {:?} expected", p.name, dims, p.dims)));
            }
        }
        for (name, c) in &layout.batchnorms {
            match self.batchnorm.get(name) {
                Some(st) if st.channels() == *c && st.var.len() == *c => {}
                _ => return Err(Error::invalid(format!("batch norm `{name}` missing or mis-sized"))),
            }
        }
        Ok(())
    }
}

/// He-normal conv weights, BN `γ = 1, β = 0`, zero biases and zero
/// alignment convs. Normals are drawn in parameter-name order.
pub fn init_parameters<T: Element>(cfg: &ModelConfig, seed: u64) -> Result<ParameterSet<T>> {
    cfg.validate()?;
    let layout = Layout::for_config(cfg);
    let mut rng = Prng::new(seed);
    let mut tensors = BTreeMap::new();
    for p in &layout.params {
        let t = match p.init {
            Init::He { fan_in } => Tensor::randn_with(p.dims, &mut rng, (2.0 / fan_in as f64).sqrt())?,
            Init::Zeros => Tensor::zeros(p.dims)?,
            Init::Ones => Tensor::ones(p.dims)?,
            Init::Const(v) => Tensor::full(p.dims, T::from_f64(v))?,
        };
        tensors.insert(p.name.clone(), t);
    }
    let batchnorm = layout.batchnorms.iter().map(|(n, c)| (n.clone(), RunningStats::new(*c))).collect();
    Ok(ParameterSet { tensors, batchnorm })
}

pub type ParamVars = BTreeMap<String, Var>;

/// Record every parameter on `tape`, as a gradient leaf when `trainable`.
pub fn bind_parameters<T: Element>(tape: &mut Tape<T>, params: &ParameterSet<T>, trainable: bool) -> ParamVars {
    params
        .tensors
        .iter()
        .map(|(name, t)| {
            let v = if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
            (name.clone(), v)
        })
        .collect()
}

/// What one forward pass produced.
#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    /// `(n, num_classes, h, w)`.
    pub logits: Var,
    /// Indicator `d`, `(n, 1, h, w)` in `(0, 1)`.
    pub indicator: Var,
    /// Spatial feature at 1/8.
    pub spatial: Var,
    /// Projected context feature, upsampled to 1/8.
    pub context: Var,
    pub cp_to_sp: Option<Aligned>,
    pub sp_to_cp: Option<Aligned>,
}

/// Tape, bound parameters and BN state threaded through one forward pass.
pub struct Net<'a, T: Element> {
    pub tape: &'a mut Tape<T>,
    pub vars: &'a ParamVars,
    pub stats: &'a mut BTreeMap<String, RunningStats<T>>,
    pub mode: BnMode,
}

impl<T: Element> Net<'_, T> {
    fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::invalid(format!("parameter `{name}` is not bound")))
    }

    fn conv(&mut self, prefix: &str, x: Var, stride: usize, bias: bool) -> Result<Var> {
        let w = self.var(&format!("{prefix}.weight"))?;
        let b = if bias { Some(self.var(&format!("{prefix}.bias"))?) } else { None };
        let k = self.tape.shape(w).h();
        self.tape.conv2d(x, w, b, stride, k / 2)
    }

    fn bn(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.var(&format!("{prefix}.gamma"))?;
        let beta = self.var(&format!("{prefix}.beta"))?;
        let stats =
            self.stats.get_mut(prefix).ok_or_else(|| Error::invalid(format!("no running stats for `{prefix}`")))?;
        self.tape.batchnorm2d(x, gamma, beta, stats, self.mode, BN_MOMENTUM, BN_EPS)
    }

    /// `bn(conv(x))`, no activation.
    fn conv_bn(&mut self, prefix: &str, x: Var, stride: usize) -> Result<Var> {
        let y = self.conv(&format!("{prefix}.conv"), x, stride, false)?;
        self.bn(&format!("{prefix}.bn"), y)
    }

    fn conv_bn_relu(&mut self, prefix: &str, x: Var, stride: usize) -> Result<Var> {
        let y = self.conv_bn(prefix, x, stride)?;
        Ok(self.tape.relu(y))
    }

    fn conv_vars(&self, prefix: &str) -> Result<ConvVars> {
        Ok(ConvVars { weight: self.var(&format!("{prefix}.weight"))?, bias: self.var(&format!("{prefix}.bias"))? })
    }

    /// `relu(bn2(conv2(relu(bn1(conv1(x))))) + shortcut(x))`.
    pub fn residual_block(&mut self, prefix: &str, x: Var, stride: usize, project: bool) -> Result<Var> {
        let y = self.conv_bn_relu(&format!("{prefix}.conv1"), x, stride)?;
        let y = self.conv_bn(&format!("{prefix}.conv2"), y, 1)?;
        let shortcut = if project { self.conv_bn(&format!("{prefix}.proj"), x, stride)? } else { x };
        let sum = self.tape.add(y, shortcut)?;
        Ok(self.tape.relu(sum))
    }
}

fn check_divisible<T: Element>(tape: &Tape<T>, x: Var, by: usize, what: &str) -> Result<()> {
    let s = tape.shape(x);
    if s.c() != 3 {
        return Err(Error::shape(format!("{what}: expected a 3-channel image, got {} channels", s.c())));
    }
    if s.h() == 0 || s.w() == 0 || !s.h().is_multiple_of(by) || !s.w().is_multiple_of(by) {
        return Err(Error::shape(format!("{what}: input {}x{} is not divisible by {by}", s.h(), s.w())));
    }
    Ok(())
}

/// Three stride-2 conv + BN + ReLU layers; output at 1/8 scale.
pub fn spatial_path_forward<T: Element>(net: &mut Net<'_, T>, x: Var) -> Result<Var> {
    check_divisible(net.tape, x, 8, "spatial path")?;
    let mut y = x;
    for i in 0..3 {
        y = net.conv_bn_relu(&format!("spatial.{i}"), y, 2)?;
    }
    Ok(y)
}

/// Stem and residual stages; output at 1/32 scale, before pyramid pooling.
pub fn context_backbone_forward<T: Element>(net: &mut Net<'_, T>, x: Var, cfg: &ModelConfig) -> Result<Var> {
    check_divisible(net.tape, x, 32, "context path")?;
    let mut y = net.conv_bn_relu("context.stem", x, 2)?;
    for s in 1..=4 {
        for b in 0..cfg.blocks_per_stage {
            let stride = if b == 0 { 2 } else { 1 };
            y = net.residual_block(&format!("context.stage{s}.block{b}"), y, stride, b == 0)?;
        }
    }
    Ok(y)
}

/// Pyramid pooling: per bin, pool → `1×1` conv + ReLU → upsample; then
/// concatenate with the input and fuse back to its width.
pub fn pyramid_pooling<T: Element>(net: &mut Net<'_, T>, x: Var, cfg: &ModelConfig) -> Result<Var> {
    let s = net.tape.shape(x);
    let mut cat = x;
    for (k, &bins) in cfg.ppm_bins.iter().enumerate() {
        let pooled = net.tape.adaptive_avg_pool(x, bins)?;
        let y = net.conv(&format!("context.ppm.branch{k}"), pooled, 1, true)?;
        let y = net.tape.relu(y);
        let y = net.tape.bilinear_resize(y, s.h(), s.w(), true)?;
        cat = net.tape.concat_channels(cat, y)?;
    }
    net.conv_bn_relu("context.ppm.fuse", cat, 1)
}

/// Backbone followed by pyramid pooling; `(n, c_cp, h/32, w/32)`.
pub fn context_path_forward<T: Element>(net: &mut Net<'_, T>, x: Var, cfg: &ModelConfig) -> Result<Var> {
    let y = context_backbone_forward(net, x, cfg)?;
    pyramid_pooling(net, y, cfg)
}

pub fn bialignnet_forward<T: Element>(net: &mut Net<'_, T>, x: Var, cfg: &ModelConfig) -> Result<ModelOutput> {
    check_divisible(net.tape, x, 32, "model")?;
    let s = net.tape.shape(x);
    let (h, w) = (s.h(), s.w());

    let sp = spatial_path_forward(net, x)?;
    let cp = context_path_forward(net, x, cfg)?;
    let cp = net.conv_bn_relu("context.out", cp, 1)?;
    let cp = net.tape.bilinear_resize(cp, h / 8, w / 8, true)?;

    let [to_sp, to_cp] = cfg.alignment.modules();
    let align = |net: &mut Net<'_, T>, dir: &str, gated: Option<bool>, src: Var, tgt: Var| {
        gated
            .map(|gated| {
                let params = AlignVars {
                    flow: net.conv_vars(&format!("align.{dir}.flow"))?,
                    gate: if gated { Some(net.conv_vars(&format!("align.{dir}.gate"))?) } else { None },
                };
                flow::align(net.tape, src, tgt, &params, cfg.warp_mode)
            })
            .transpose()
    };
    let cp_to_sp = align(net, DIRECTIONS[0], to_sp, cp, sp)?;
    let sp_to_cp = align(net, DIRECTIONS[1], to_cp, sp, cp)?;
    let fused_sp = cp_to_sp.map_or(sp, |a| a.output);
    let fused_cp = sp_to_cp.map_or(cp, |a| a.output);

    let cat = net.tape.concat_channels(fused_sp, fused_cp)?;
    let y = net.conv_bn_relu("head.fuse", cat, 1)?;
    let y = net.conv("head.classifier", y, 1, true)?;
    let logits = net.tape.bilinear_resize(y, h, w, true)?;

    let d = net.conv("indicator", sp, 1, true)?;
    let d = net.tape.sigmoid(d);
    let indicator = net.tape.bilinear_resize(d, h, w, true)?;

    Ok(ModelOutput { logits, indicator, spatial: sp, context: cp, cp_to_sp, sp_to_cp })
}

/// A config and its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Element = f32> {
    pub cfg: ModelConfig,
    pub params: ParameterSet<T>,
}

impl<T: Element> Model<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_parameters(&cfg, seed)?;
        Ok(Self { cfg, params })
    }

    pub fn from_parts(cfg: ModelConfig, params: ParameterSet<T>) -> Result<Self> {
        cfg.validate()?;
        params.check_layout(&Layout::for_config(&cfg))?;
        Ok(Self { cfg, params })
    }

    /// Bind parameters (trainable in train mode) and run the network on `x`.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: BnMode) -> Result<(ModelOutput, ParamVars)> {
        let vars = bind_parameters(tape, &self.params, mode == BnMode::Train);
        let mut net = Net { tape, vars: &vars, stats: &mut self.params.batchnorm, mode };
        let out = bialignnet_forward(&mut net, x, &self.cfg)?;
        Ok((out, vars))
    }

    /// Eval-mode class prediction per pixel (ties resolve to the lower id).
    pub fn predict(&mut self, image: &Tensor<T>) -> Result<Vec<u8>> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let (out, _) = self.forward(&mut tape, x, BnMode::Eval)?;
        Ok(argmax_channels(tape.value(out.logits)))
    }
}

/// Per-pixel index of the largest channel, first index on ties.
pub fn argmax_channels<T: Element>(logits: &Tensor<T>) -> Vec<u8> {
    let [n, c, h, w] = logits.dims();
    let plane = h * w;
    let d = logits.data();
    let mut out = Vec::with_capacity(n * plane);
    for i in 0..n {
        for p in 0..plane {
            let mut best = 0;
            for k in 1..c {
                if d[(i * c + k) * plane + p] > d[(i * c + best) * plane + p] {
                    best = k;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

/// Multiply-accumulate counts per module.
///
/// Conventions: a `k×k` conv costs `k²·in·out` per output pixel (bias adds
/// are free); batch norm, the gate product and average pooling cost one per
/// element touched; bilinear resize and warping cost four per output value.
/// Activations, additions and concatenation are free.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FlopReport {
    pub modules: Vec<(String, u64)>,
}

impl FlopReport {
    pub fn total(&self) -> u64 {
        self.modules.iter().map(|(_, v)| v).sum()
    }

    pub fn get(&self, module: &str) -> u64 {
        self.modules.iter().filter(|(m, _)| m == module).map(|(_, v)| v).sum()
    }

    /// Sum over modules whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> u64 {
        self.modules.iter().filter(|(m, _)| m.starts_with(prefix)).map(|(_, v)| v).sum()
    }
}

/// MACs of a conv with `k×k` kernel producing an `oh×ow` map.
pub fn conv_macs(k: usize, ic: usize, oc: usize, oh: usize, ow: usize) -> u64 {
    (k * k * ic * oc * oh * ow) as u64
}

pub fn count_flops(cfg: &ModelConfig, input_h: usize, input_w: usize) -> Result<FlopReport> {
    cfg.validate()?;
    if input_h == 0 || input_w == 0 || !input_h.is_multiple_of(32) || !input_w.is_multiple_of(32) {
        return Err(Error::shape(format!("count_flops: input {input_h}x{input_w} is not divisible by 32")));
    }
    let conv_bn = |k, ic, oc, h: usize, w: usize| conv_macs(k, ic, oc, h, w) + (oc * h * w) as u64;
    let mut r = FlopReport::default();

    let (mut h, mut w, mut c) = (input_h, input_w, 3);
    let mut sp = 0;
    for &oc in &cfg.spatial_widths {
        (h, w) = (h / 2, w / 2);
        sp += conv_bn(3, c, oc, h, w);
        c = oc;
    }
    r.modules.push(("spatial".into(), sp));

    let (mut h, mut w) = (input_h / 2, input_w / 2);
    let mut cp = conv_bn(3, 3, cfg.context_stem_width, h, w);
    let mut c = cfg.context_stem_width;
    for &oc in &cfg.context_stage_widths {
        (h, w) = (h / 2, w / 2);
        for b in 0..cfg.blocks_per_stage {
            cp += conv_bn(3, c, oc, h, w) + conv_bn(3, oc, oc, h, w);
            if b == 0 {
                cp += conv_bn(1, c, oc, h, w);
            }
            c = oc;
        }
    }
    r.modules.push(("context.backbone".into(), cp));

    let (c_cp, branch) = (cfg.cp_channels(), cfg.ppm_branch_channels());
    let mut ppm = 0;
    for &bins in &cfg.ppm_bins {
        ppm += (c_cp * h * w) as u64 + conv_macs(1, c_cp, branch, bins, bins) + (4 * branch * h * w) as u64;
    }
    ppm += conv_bn(3, c_cp + branch * cfg.ppm_bins.len(), c_cp, h, w);
    r.modules.push(("context.ppm".into(), ppm));

    let c_sp = cfg.sp_channels();
    let (h8, w8) = (input_h / 8, input_w / 8);
    let proj = conv_bn(1, c_cp, c_sp, h, w) + (4 * c_sp * h8 * w8) as u64;
    r.modules.push(("context.out".into(), proj));

    let plane = (h8 * w8) as u64;
    for (dir, gated) in DIRECTIONS.iter().zip(cfg.alignment.modules()) {
        if let Some(gated) = gated {
            let mut m = conv_macs(3, 2 * c_sp, 2, h8, w8) + 4 * c_sp as u64 * plane;
            if gated {
                m += conv_macs(3, c_sp, 1, h8, w8) + 2 * plane;
            }
            r.modules.push((format!("align.{dir}"), m));
        }
    }

    let full = (input_h * input_w) as u64;
    let head = conv_bn(3, 2 * c_sp, c_sp, h8, w8)
        + conv_macs(1, c_sp, cfg.num_classes, h8, w8)
        + 4 * cfg.num_classes as u64 * full;
    r.modules.push(("head".into(), head));
    r.modules.push(("indicator".into(), conv_macs(1, c_sp, 1, h8, w8) + 4 * full));
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_input(n: usize, seed: u64) -> Tensor<f32> {
        Tensor::randn((n, 3, 64, 64), seed, 1.0).unwrap()
    }

    #[test]
    fn alignment_names_round_trip() {
        for a in Alignment::ALL {
            assert_eq!(Alignment::parse(a.as_str()), Some(a));
        }
        assert_eq!(Alignment::parse("bidirectional"), None);
    }

    #[test]
    fn config_text_round_trip() {
        let cfg = ModelConfig {
            alignment: Alignment::FamBidirectional,
            warp_mode: WarpMode::WarpSource,
            ..ModelConfig::desk()
        };
        let back = ModelConfig::from_entries(&config::parse_entries(&cfg.to_text()).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
        assert_ne!(ModelConfig::default().digest(), cfg.digest());
    }

    #[test]
    fn unknown_model_key() {
        let e = config::parse_entries("num_clases = 4").unwrap();
        assert!(ModelConfig::from_entries(&e).is_err());
    }

    #[test]
    fn spatial_path_parameter_count() {
        // 3·3·3·16 + 2·16, 3·3·16·32 + 2·32, 3·3·32·64 + 2·64
        let expect = (432 + 32) + (4608 + 64) + (18432 + 128);
        let layout = Layout::for_config(&ModelConfig::default());
        let got: usize = layout
            .params
            .iter()
            .filter(|p| p.name.starts_with("spatial."))
            .map(|p| p.dims.iter().product::<usize>())
            .sum();
        assert_eq!(got, expect);
    }

    #[test]
    fn init_is_deterministic_and_follows_rules() {
        let cfg = ModelConfig::desk();
        let a = init_parameters::<f32>(&cfg, 3).unwrap();
        let b = init_parameters::<f32>(&cfg, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_parameters::<f32>(&cfg, 4).unwrap());
        for (name, t) in &a.tensors {
            if name.starts_with("align.") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
            if name.ends_with(".gamma") {
                assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
            }
        }
        assert_eq!(a.num_parameters(), Layout::for_config(&cfg).num_parameters());
    }

    #[test]
    fn he_init_scale() {
        let cfg = ModelConfig::desk();
        let p = init_parameters::<f64>(&cfg, 1).unwrap();
        let w = p.get("head.fuse.conv.weight").unwrap();
        let var = w.data().iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        let expect = 2.0 / (9.0 * 64.0);
        assert!((var / expect - 1.0).abs() < 0.05, "{var} vs {expect}");
    }

    #[test]
    fn output_shapes() {
        let mut model = Model::<f32>::new(ModelConfig::desk(), 0).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(desk_input(2, 1));
        let (out, _) = model.forward(&mut tape, x, BnMode::Train).unwrap();
        assert_eq!(tape.shape(out.logits).0, [2, 5, 64, 64]);
        assert_eq!(tape.shape(out.indicator).0, [2, 1, 64, 64]);
        assert_eq!(tape.shape(out.spatial).0, [2, 32, 8, 8]);
        assert_eq!(tape.shape(out.context).0, [2, 32, 8, 8]);
        let d = tape.value(out.indicator);
        assert!(d.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn path_scales() {
        let cfg = ModelConfig::desk();
        let mut params = init_parameters::<f32>(&cfg, 0).unwrap();
        let mut tape = Tape::new();
        let vars = bind_parameters(&mut tape, &params, false);
        let x = tape.constant(desk_input(1, 2));
        let mut net = Net { tape: &mut tape, vars: &vars, stats: &mut params.batchnorm, mode: BnMode::Eval };
        let sp = spatial_path_forward(&mut net, x).unwrap();
        let pre = context_backbone_forward(&mut net, x, &cfg).unwrap();
        let cp = pyramid_pooling(&mut net, pre, &cfg).unwrap();
        assert_eq!(tape.shape(sp).0, [1, 32, 8, 8]);
        assert_eq!(tape.shape(pre).0, [1, 256, 2, 2]);
        assert_eq!(tape.shape(cp).0, [1, 256, 2, 2]);
    }

    #[test]
    fn default_bins_do_not_fit_small_inputs() {
        let mut model = Model::<f32>::new(ModelConfig::default(), 0).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(desk_input(1, 1));
        assert!(model.forward(&mut tape, x, BnMode::Eval).is_err());
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn((1, 3, 192, 192), 1, 1.0).unwrap());
        assert!(model.forward(&mut tape, x, BnMode::Eval).is_ok());
    }

    #[test]
    fn indivisible_input() {
        let mut model = Model::<f32>::new(ModelConfig::desk(), 0).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros((1, 3, 48, 64)).unwrap());
        assert!(model.forward(&mut tape, x, BnMode::Eval).is_err());
    }

    #[test]
    fn zero_second_conv_block_is_projection() {
        let cfg = ModelConfig::desk();
        let mut params = init_parameters::<f64>(&cfg, 5).unwrap();
        let name = "context.stage2.block0.conv2.conv.weight";
        params.get_mut(name).unwrap().data_mut().fill(0.0);
        let x0 = Tensor::<f64>::randn((2, 32, 8, 8), 6, 1.0).unwrap();
        let mut tape = Tape::new();
        let vars = bind_parameters(&mut tape, &params, false);
        let x = tape.constant(x0);
        let mut net = Net { tape: &mut tape, vars: &vars, stats: &mut params.batchnorm, mode: BnMode::Train };
        let y = net.residual_block("context.stage2.block0", x, 2, true).unwrap();
        let p = net.conv_bn("context.stage2.block0.proj", x, 2).unwrap();
        let p = tape.relu(p);
        assert_eq!(tape.value(y).data(), tape.value(p).data());
    }

    #[test]
    fn single_conv_macs() {
        assert_eq!(conv_macs(3, 16, 16, 8, 8), 147456);
    }

    #[test]
    fn conv_macs_scale_with_width() {
        let cfg = ModelConfig::desk();
        let a = count_flops(&cfg, 64, 64).unwrap();
        let b = count_flops(&cfg, 64, 128).unwrap();
        assert_eq!(2 * a.get("spatial"), b.get("spatial"));
        assert_eq!(2 * a.get("head"), b.get("head"));
        assert!(count_flops(&cfg, 60, 64).is_err());
    }

    #[test]
    fn fam_gfam_parameter_delta() {
        let base = ModelConfig::desk();
        let fam = Layout::for_config(&ModelConfig { alignment: Alignment::FamBidirectional, ..base.clone() });
        let gfam = Layout::for_config(&ModelConfig { alignment: Alignment::GfamBidirectional, ..base.clone() });
        let gate = 2 * (9 * base.sp_channels() + 1);
        assert_eq!(gfam.num_parameters() - fam.num_parameters(), gate);
    }

    #[test]
    fn eval_forward_is_idempotent() {
        let mut model = Model::<f32>::new(ModelConfig::desk(), 2).unwrap();
        let img = desk_input(1, 3);
        assert_eq!(model.predict(&img).unwrap(), model.predict(&img).unwrap());
    }

    #[test]
    fn argmax_ties_pick_lower_class() {
        let t = Tensor::<f32>::from_vec((1, 3, 1, 2), vec![1.0, 0.0, 1.0, 2.0, 0.5, 2.0]).unwrap();
        assert_eq!(argmax_channels(&t), vec![0, 1]);
    }
}
