//! Named gradient checks over every differentiable operator, the losses and
//! the assembled model, all on `Tape<f64>`.

use crate::autodiff::{Tape, Var};
use crate::edge::EdgeMap;
use crate::error::{Error, Result};
use crate::flow::{apply_gate, make_flow_field, ConvVars, FlowField};
use crate::labels::LabelMap;
use crate::losses::{bce, cross_entropy_pixelwise, hard_pixel_loss, ohem_ce, total_loss, LossConfig};
use crate::model::{bialignnet_forward, bind_parameters, init_parameters, Alignment, ModelConfig, Net, ParameterSet};
use crate::nn::{BnMode, RunningStats, BN_EPS, BN_MOMENTUM};
use crate::rng::Prng;
use crate::tensor::{Shape, Tensor};

use super::{finite_diff_check_at, GradCheckReport};

/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-3;

/// Step for smooth functions.
const EPS_SMOOTH: f64 = 1e-4;
/// Step for piecewise functions, small enough not to cross a kink.
const EPS_KINKED: f64 = 1e-6;
/// Step for losses with a data-dependent pixel selection: small enough to
/// keep the selection fixed, large enough that roundoff stays below the
/// tolerance for gradients near 1e-7.
const EPS_SELECT: f64 = 1e-5;

/// Operator groups accepted by [`run`].
pub const OPS: [&str; 17] = [
    "conv",
    "batchnorm",
    "relu",
    "sigmoid",
    "resize",
    "pool",
    "log_softmax",
    "concat",
    "make_flow_field",
    "apply_gate",
    "warp",
    "cross_entropy",
    "ohem_ce",
    "hard_pixel_loss",
    "bce",
    "total_loss",
    "model",
];

/// One checked (operator, input) pair.
#[derive(Clone, Debug)]
pub struct CaseResult {
    pub op: &'static str,
    pub input: String,
    pub report: GradCheckReport,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error <= TOLERANCE
    }

    pub fn render(&self) -> String {
        format!(
            "{:<6} {:<16} {:<28} max rel err {:.3e} over {} coords",
            if self.passed() { "PASS" } else { "FAIL" },
            self.op,
            self.input,
            self.report.max_rel_error,
            self.report.coords_checked
        )
    }
}

type Loss = Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var>>;

struct Case {
    input: String,
    x: Tensor<f64>,
    eps: f64,
    /// Limit on checked coordinates, spread evenly over the tensor.
    max_coords: usize,
    f: Loss,
}

impl Case {
    fn new(input: &str, x: Tensor<f64>, eps: f64, f: Loss) -> Self {
        Self { input: input.into(), x, eps, max_coords: usize::MAX, f }
    }
}

fn coords(len: usize, limit: usize) -> Vec<usize> {
    if len <= limit {
        return (0..len).collect();
    }
    (0..limit).map(|k| k * len / limit).collect()
}

fn randn(shape: impl Into<Shape>, seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, seed, 1.0).expect("small shape")
}

fn uniform(shape: impl Into<Shape>, seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let shape = shape.into();
    let mut rng = Prng::new(seed);
    let data = (0..shape.numel()).map(|_| rng.uniform_in(lo, hi)).collect();
    Tensor::from_vec(shape, data).expect("small shape")
}

/// Reduce any output to a scalar through fixed random weights.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = randn(tape.shape(y), seed);
    tape.weighted_sum(y, &w)
}

fn random_labels(n: usize, h: usize, w: usize, classes: u8, seed: u64) -> LabelMap {
    let mut rng = Prng::new(seed);
    let data =
        (0..n * h * w).map(|_| if rng.uniform() < 0.1 { 255 } else { rng.below(classes as usize) as u8 }).collect();
    LabelMap::new(n, h, w, data).expect("consistent dims")
}

fn cases(op: &str) -> Result<Vec<Case>> {
    let x4 = || randn((2, 4, 8, 8), 11);
    let c = match op {
        "conv" => {
            let w = randn((3, 4, 3, 3), 12).map(|v| v * 0.3);
            let b = randn((1, 3, 1, 1), 13);
            let (w1, b1) = (w.clone(), b.clone());
            let (x2, b2) = (x4(), b.clone());
            let (x3, w3) = (x4(), w.clone());
            vec![
                Case::new(
                    "input",
                    x4(),
                    EPS_SMOOTH,
                    Box::new(move |t, x| {
                        let (w, b) = (t.constant(w1.clone()), t.constant(b1.clone()));
                        let y = t.conv2d(x, w, Some(b), 1, 1)?;
                        project(t, y, 1)
                    }),
                ),
                Case::new(
                    "weight (stride 2)",
                    w,
                    EPS_SMOOTH,
                    Box::new(move |t, w| {
                        let (x, b) = (t.constant(x2.clone()), t.constant(b2.clone()));
                        let y = t.conv2d(x, w, Some(b), 2, 1)?;
                        project(t, y, 2)
                    }),
                ),
                Case::new(
                    "bias",
                    b,
                    EPS_SMOOTH,
                    Box::new(move |t, b| {
                        let (x, w) = (t.constant(x3.clone()), t.constant(w3.clone()));
                        let y = t.conv2d(x, w, Some(b), 1, 0)?;
                        project(t, y, 3)
                    }),
                ),
            ]
        }
        "batchnorm" => {
            let gamma = uniform((1, 4, 1, 1), 14, 0.5, 1.5);
            let beta = randn((1, 4, 1, 1), 15);
            let bn = |mode: BnMode, which: usize, g: Tensor<f64>, b: Tensor<f64>, x: Tensor<f64>| -> Loss {
                Box::new(move |t, v| {
                    let mut stats = RunningStats::<f64>::new(4);
                    stats.var.iter_mut().enumerate().for_each(|(i, s)| *s = 0.5 + i as f64);
                    let mut ins = [t.constant(x.clone()), t.constant(g.clone()), t.constant(b.clone())];
                    ins[which] = v;
                    let y = t.batchnorm2d(ins[0], ins[1], ins[2], &mut stats, mode, BN_MOMENTUM, BN_EPS)?;
                    project(t, y, 4)
                })
            };
            vec![
                Case::new("input (train)", x4(), EPS_SMOOTH, bn(BnMode::Train, 0, gamma.clone(), beta.clone(), x4())),
                Case::new(
                    "gamma (train)",
                    gamma.clone(),
                    EPS_SMOOTH,
                    bn(BnMode::Train, 1, gamma.clone(), beta.clone(), x4()),
                ),
                Case::new(
                    "beta (train)",
                    beta.clone(),
                    EPS_SMOOTH,
                    bn(BnMode::Train, 2, gamma.clone(), beta.clone(), x4()),
                ),
                Case::new("input (eval)", x4(), EPS_SMOOTH, bn(BnMode::Eval, 0, gamma, beta, x4())),
            ]
        }
        "relu" => {
            // Keep every value at least 0.05 away from the kink.
            let x = x4().map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v });
            vec![Case::new(
                "input",
                x,
                EPS_KINKED,
                Box::new(|t, x| {
                    let y = t.relu(x);
                    project(t, y, 5)
                }),
            )]
        }
        "sigmoid" => vec![Case::new(
            "input",
            x4().map(|v| 3.0 * v),
            EPS_SMOOTH,
            Box::new(|t, x| {
                let y = t.sigmoid(x);
                project(t, y, 6)
            }),
        )],
        "resize" => vec![
            Case::new(
                "upsample 5x5 to 8x8",
                randn((2, 4, 5, 5), 16),
                EPS_SMOOTH,
                Box::new(|t, x| {
                    let y = t.bilinear_resize(x, 8, 8, true)?;
                    project(t, y, 7)
                }),
            ),
            Case::new(
                "downsample 8x8 to 3x5",
                x4(),
                EPS_SMOOTH,
                Box::new(|t, x| {
                    let y = t.bilinear_resize(x, 3, 5, true)?;
                    project(t, y, 8)
                }),
            ),
        ],
        "pool" => vec![
            Case::new(
                "bins 3 on 8x8",
                x4(),
                EPS_SMOOTH,
                Box::new(|t, x| {
                    let y = t.adaptive_avg_pool(x, 3)?;
                    project(t, y, 9)
                }),
            ),
            Case::new(
                "bins 1",
                x4(),
                EPS_SMOOTH,
                Box::new(|t, x| {
                    let y = t.adaptive_avg_pool(x, 1)?;
                    project(t, y, 10)
                }),
            ),
        ],
        "log_softmax" => vec![Case::new(
            "input",
            x4().map(|v| 2.0 * v),
            EPS_SMOOTH,
            Box::new(|t, x| {
                let y = t.log_softmax_channel(x)?;
                project(t, y, 11)
            }),
        )],
        "concat" => {
            let other = randn((2, 2, 8, 8), 17);
            vec![Case::new(
                "first operand",
                x4(),
                EPS_SMOOTH,
                Box::new(move |t, x| {
                    let b = t.constant(other.clone());
                    let cat = t.concat_channels(x, b)?;
                    let y = t.slice_channels(cat, 2, 3)?;
                    project(t, y, 12)
                }),
            )]
        }
        "make_flow_field" => {
            let source = randn((2, 4, 4, 4), 18);
            let target = x4();
            let weight = randn((2, 8, 3, 3), 19).map(|v| 0.2 * v);
            let bias = randn((1, 2, 1, 1), 20);
            let flow = |which: usize, s: Tensor<f64>, g: Tensor<f64>, w: Tensor<f64>, b: Tensor<f64>| -> Loss {
                Box::new(move |t, v| {
                    let mut ins = [t.constant(s.clone()), t.constant(g.clone()), t.constant(w.clone())];
                    ins[which] = v;
                    let bias = t.constant(b.clone());
                    let (f, _, _) = make_flow_field(t, ins[0], ins[1], ConvVars { weight: ins[2], bias })?;
                    project(t, f.var(), 13)
                })
            };
            vec![
                Case::new(
                    "source (4x4)",
                    source.clone(),
                    EPS_SMOOTH,
                    flow(0, source.clone(), target.clone(), weight.clone(), bias.clone()),
                ),
                Case::new(
                    "target (8x8)",
                    target.clone(),
                    EPS_SMOOTH,
                    flow(1, source.clone(), target.clone(), weight.clone(), bias.clone()),
                ),
                Case::new("flow conv weight", weight.clone(), EPS_SMOOTH, flow(2, source, target, weight, bias)),
            ]
        }
        "apply_gate" => {
            let flow = randn((2, 2, 8, 8), 21);
            let target = x4();
            let weight = randn((1, 4, 3, 3), 22).map(|v| 0.3 * v);
            let bias = randn((1, 1, 1, 1), 23);
            let gate = |which: usize, f: Tensor<f64>, g: Tensor<f64>, w: Tensor<f64>, b: Tensor<f64>| -> Loss {
                Box::new(move |t, v| {
                    let mut ins = [t.constant(f.clone()), t.constant(g.clone()), t.constant(w.clone())];
                    ins[which] = v;
                    let bias = t.constant(b.clone());
                    let field = FlowField::new(t, ins[0])?;
                    let (gated, _) = apply_gate(t, field, ins[1], ConvVars { weight: ins[2], bias })?;
                    project(t, gated.var(), 14)
                })
            };
            vec![
                Case::new(
                    "flow",
                    flow.clone(),
                    EPS_SMOOTH,
                    gate(0, flow.clone(), target.clone(), weight.clone(), bias.clone()),
                ),
                Case::new(
                    "target",
                    target.clone(),
                    EPS_SMOOTH,
                    gate(1, flow.clone(), target.clone(), weight.clone(), bias.clone()),
                ),
                Case::new("gate conv weight", weight.clone(), EPS_SMOOTH, gate(2, flow, target, weight, bias)),
            ]
        }
        "warp" => {
            let feature = x4();
            let flow = interior_flow(2, 8, 8, 24);
            let (f1, g2) = (flow.clone(), feature.clone());
            vec![
                Case::new(
                    "feature",
                    feature,
                    EPS_KINKED,
                    Box::new(move |t, x| {
                        let g = t.constant(f1.clone());
                        let y = t.warp_bilinear(x, FlowField::new(t, g)?)?;
                        project(t, y, 15)
                    }),
                ),
                Case::new(
                    "flow (fractional)",
                    flow,
                    EPS_KINKED,
                    Box::new(move |t, g| {
                        let x = t.constant(g2.clone());
                        let y = t.warp_bilinear(x, FlowField::new(t, g)?)?;
                        project(t, y, 16)
                    }),
                ),
            ]
        }
        "cross_entropy" => {
            let labels = random_labels(2, 8, 8, 4, 25);
            vec![Case::new(
                "logits",
                x4(),
                EPS_SMOOTH,
                Box::new(move |t, x| Ok(cross_entropy_pixelwise(t, x, &labels, 255)?.1)),
            )]
        }
        "ohem_ce" => {
            let labels = random_labels(2, 8, 8, 4, 26);
            let cfg = LossConfig::default();
            vec![Case::new(
                "logits",
                x4().map(|v| 2.0 * v),
                EPS_SELECT,
                Box::new(move |t, x| ohem_ce(t, x, &labels, &cfg)),
            )]
        }
        "hard_pixel_loss" => {
            let labels = random_labels(2, 8, 8, 4, 27);
            let d = indicator(28);
            let cfg = LossConfig { hard_keep_fraction: 0.25, ..LossConfig::default() };
            vec![Case::new(
                "logits",
                x4().map(|v| 2.0 * v),
                EPS_SELECT,
                Box::new(move |t, x| {
                    let d = t.constant(d.clone());
                    hard_pixel_loss(t, x, &labels, d, &cfg)
                }),
            )]
        }
        "bce" => {
            let edges = random_edges(29);
            vec![Case::new("indicator", indicator(30), EPS_KINKED, Box::new(move |t, d| bce(t, d, &edges)))]
        }
        "total_loss" => {
            let labels = random_labels(2, 8, 8, 4, 31);
            let edges = random_edges(32);
            let logits = x4().map(|v| 2.0 * v);
            let d = indicator(33);
            let cfg = check_loss_config();
            let (l2, e2, lg2, cfg2) = (labels.clone(), edges.clone(), logits.clone(), cfg.clone());
            let d1 = d.clone();
            vec![
                Case::new(
                    "logits",
                    logits,
                    EPS_SELECT,
                    Box::new(move |t, x| {
                        let d = t.constant(d1.clone());
                        Ok(total_loss(t, x, d, &edges, &labels, &cfg)?.0)
                    }),
                ),
                Case::new(
                    "indicator",
                    d,
                    EPS_SELECT,
                    Box::new(move |t, d| {
                        let x = t.constant(lg2.clone());
                        Ok(total_loss(t, x, d, &e2, &l2, &cfg2)?.0)
                    }),
                ),
            ]
        }
        "model" => model_cases()?,
        other => {
            return Err(Error::invalid(format!("unknown gradcheck op `{other}`; expected one of {}", OPS.join(", "))))
        }
    };
    Ok(c)
}

/// `λ = 1` keeps the objective near unity so that difference roundoff stays
/// well below the tolerance even for the smallest gradient entries; a larger
/// keep fraction makes the hard-pixel term select more than one pixel.
fn check_loss_config() -> LossConfig {
    LossConfig { lambda: 1.0, hard_keep_fraction: 0.25, ..LossConfig::default() }
}

/// Flow whose sample points all land strictly inside the grid and at least
/// 0.1 away from integer coordinates.
fn interior_flow(n: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
    let mut rng = Prng::new(seed);
    let mut flow = Tensor::<f64>::zeros((n, 2, h, w)).expect("small shape");
    let plane = h * w;
    for b in 0..n {
        for p in 0..plane {
            let (y, x) = ((p / w) as f64, (p % w) as f64);
            for (ch, pos, size) in [(0, x, w), (1, y, h)] {
                let whole = rng.range_inclusive(0, size - 2) as f64;
                let frac = rng.uniform_in(0.1, 0.9);
                flow.data_mut()[(b * 2 + ch) * plane + p] = whole + frac - pos;
            }
        }
    }
    flow
}

/// Indicator values in (0.02, 0.98) kept at least 0.01 away from the 0.8
/// mining threshold.
fn indicator(seed: u64) -> Tensor<f64> {
    uniform((2, 1, 8, 8), seed, 0.02, 0.98).map(|v| if (v - 0.8).abs() < 0.01 { v + 0.02 } else { v })
}

fn random_edges(seed: u64) -> EdgeMap {
    random_edges_sized(2, 8, 8, seed)
}

/// A narrow model at 64×64 whose zero-initialized alignment convs are
/// replaced by small random weights so every path carries gradient.
fn model_cases() -> Result<Vec<Case>> {
    let cfg = ModelConfig {
        num_classes: 3,
        spatial_widths: [4, 4, 4],
        context_stem_width: 4,
        context_stage_widths: [4, 4, 4, 4],
        blocks_per_stage: 1,
        ppm_bins: vec![1, 2],
        alignment: Alignment::GfamBidirectional,
        ..ModelConfig::default()
    };
    let mut params: ParameterSet<f64> = init_parameters(&cfg, 7)?;
    let mut rng = Prng::new(8);
    for (name, t) in params.tensors.iter_mut() {
        if name.starts_with("align.") || name == "indicator.weight" {
            *t = Tensor::randn_with(t.shape(), &mut rng, 0.3)?;
        }
    }
    let image = uniform((2, 3, 64, 64), 34, 0.0, 1.0);
    let labels = random_labels(2, 64, 64, 3, 35);
    let edges = random_edges_sized(2, 64, 64, 36);

    let forward = |which: Option<&'static str>| -> Loss {
        let (cfg, params, image, labels, edges) =
            (cfg.clone(), params.clone(), image.clone(), labels.clone(), edges.clone());
        Box::new(move |t, v| {
            let mut vars = bind_parameters(t, &params, false);
            let x = match which {
                Some(name) => {
                    vars.insert(name.to_string(), v);
                    t.constant(image.clone())
                }
                None => v,
            };
            let mut stats = params.batchnorm.clone();
            let mut net = Net { tape: t, vars: &vars, stats: &mut stats, mode: BnMode::Train };
            let out = bialignnet_forward(&mut net, x, &cfg)?;
            let loss_cfg = check_loss_config();
            Ok(total_loss(t, out.logits, out.indicator, &edges, &labels, &loss_cfg)?.0)
        })
    };
    let mut cases = vec![Case { max_coords: 48, ..Case::new("input image", image.clone(), EPS_SELECT, forward(None)) }];
    for name in [
        "spatial.0.conv.weight",
        "context.stem.conv.weight",
        "context.ppm.branch0.weight",
        "align.cp_to_sp.flow.weight",
        "align.sp_to_cp.gate.weight",
        "head.fuse.bn.gamma",
        "head.classifier.weight",
        "indicator.bias",
    ] {
        let x = params.get(name)?.clone();
        cases.push(Case { max_coords: 24, ..Case::new(name, x, EPS_KINKED, forward(Some(name))) });
    }
    Ok(cases)
}

fn random_edges_sized(n: usize, h: usize, w: usize, seed: u64) -> EdgeMap {
    let mut rng = Prng::new(seed);
    EdgeMap::new(n, h, w, (0..n * h * w).map(|_| (rng.uniform() < 0.3) as u8).collect()).expect("consistent dims")
}

/// Run the checks for one operator group, or all of them.
pub fn run(op: Option<&str>) -> Result<Vec<CaseResult>> {
    let ops: Vec<&'static str> = match op {
        None => OPS.to_vec(),
        Some(name) => match OPS.iter().find(|&&o| o == name) {
            Some(o) => vec![*o],
            None => {
                return Err(Error::invalid(format!(
                    "unknown gradcheck op `{name}`; expected one of {}",
                    OPS.join(", ")
                )))
            }
        },
    };
    let mut out = Vec::new();
    for op in ops {
        for case in cases(op)? {
            let idx = coords(case.x.len(), case.max_coords);
            let report = finite_diff_check_at(&case.f, &case.x, case.eps, &idx)?;
            out.push(CaseResult { op, input: case.input, report });
        }
    }
    Ok(out)
}
