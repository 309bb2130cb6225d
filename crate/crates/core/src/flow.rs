//! Flow-based feature alignment.
//!
//! A source feature and a target feature are brought to a common resolution,
//! concatenated and convolved into a two-channel flow field `(dx, dy)` in
//! pixel units. An optional pixel-wise gate, `sigmoid(conv(target))`, scales
//! the flow. The chosen feature is then resampled at `p + flow(p)` with
//! bilinear interpolation over the four integer neighbours of the sample
//! point. Sample points outside the image are clamped to the border, so a
//! zero flow is the exact identity everywhere.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{lerp, Tap};
use crate::tensor::{Element, Tensor};

/// Which feature the gated flow resamples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum WarpMode {
    /// Resample the target feature (the default).
    #[default]
    WarpTarget,
    /// Resample the source feature instead.
    WarpSource,
}

impl WarpMode {
    pub fn as_str(self) -> &'static str {
        match self {
            WarpMode::WarpTarget => "warp_target",
            WarpMode::WarpSource => "warp_source",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "warp_target" => Some(WarpMode::WarpTarget),
            "warp_source" => Some(WarpMode::WarpSource),
            _ => None,
        }
    }
}

/// A two-channel tensor of per-pixel `(dx, dy)` displacements in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlowField(Var);

impl FlowField {
    pub fn new<T: Element>(tape: &Tape<T>, v: Var) -> Result<Self> {
        let c = tape.shape(v).c();
        if c != 2 {
            return Err(Error::shape(format!("flow field needs 2 channels, got {c}")));
        }
        Ok(FlowField(v))
    }

    pub fn var(self) -> Var {
        self.0
    }
}

/// A convolution's weight and bias, already recorded on the tape.
#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
}

/// Parameters of one alignment module. `gate: None` is the ungated variant.
#[derive(Clone, Copy, Debug)]
pub struct AlignVars {
    /// `3×3`, `2·c → 2`.
    pub flow: ConvVars,
    /// `3×3`, `c → 1`.
    pub gate: Option<ConvVars>,
}

/// Everything an alignment module produced, kept for inspection and dumps.
#[derive(Clone, Copy, Debug)]
pub struct Aligned {
    pub output: Var,
    pub flow: FlowField,
    pub gated_flow: FlowField,
    pub gate: Option<Var>,
}

/// Bilinearly upsample whichever input is smaller so both share the larger
/// spatial size.
pub fn match_resolution<T: Element>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<(Var, Var)> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa.n() != sb.n() {
        return Err(Error::shape(format!("batch mismatch: {} vs {}", sa.n(), sb.n())));
    }
    let (h, w) = (sa.h().max(sb.h()), sa.w().max(sb.w()));
    let a = if (sa.h(), sa.w()) == (h, w) { a } else { tape.bilinear_resize(a, h, w, true)? };
    let b = if (sb.h(), sb.w()) == (h, w) { b } else { tape.bilinear_resize(b, h, w, true)? };
    Ok((a, b))
}

fn conv3x3<T: Element>(tape: &mut Tape<T>, x: Var, conv: ConvVars) -> Result<Var> {
    let [_, _, kh, kw] = tape.shape(conv.weight).0;
    tape.conv2d(x, conv.weight, Some(conv.bias), 1, kh.max(kw) / 2)
}

/// `conv(cat(source, target))` at the common resolution. Returns the flow and
/// the resolution-matched `(source, target)` pair.
pub fn make_flow_field<T: Element>(
    tape: &mut Tape<T>,
    source: Var,
    target: Var,
    flow_conv: ConvVars,
) -> Result<(FlowField, Var, Var)> {
    let (source, target) = match_resolution(tape, source, target)?;
    let cat = tape.concat_channels(source, target)?;
    let flow = conv3x3(tape, cat, flow_conv)?;
    Ok((FlowField::new(tape, flow)?, source, target))
}

/// `sigmoid(conv(target)) ⊙ flow`, with the one-channel gate broadcast over
/// both flow channels. Returns the gated flow and the gate.
pub fn apply_gate<T: Element>(
    tape: &mut Tape<T>,
    flow: FlowField,
    target: Var,
    gate_conv: ConvVars,
) -> Result<(FlowField, Var)> {
    let (sf, st) = (tape.shape(flow.var()), tape.shape(target));
    if (sf.h(), sf.w()) != (st.h(), st.w()) {
        return Err(Error::shape(format!("gate: flow is {}x{} but target is {}x{}", sf.h(), sf.w(), st.h(), st.w())));
    }
    let pre = conv3x3(tape, target, gate_conv)?;
    let gate = tape.sigmoid(pre);
    let gated = tape.mul_elem(flow.var(), gate)?;
    Ok((FlowField::new(tape, gated)?, gate))
}

/// Full alignment module. With a gate this is the gated module; without, the
/// plain flow alignment.
pub fn align<T: Element>(
    tape: &mut Tape<T>,
    source: Var,
    target: Var,
    params: &AlignVars,
    mode: WarpMode,
) -> Result<Aligned> {
    let (flow, source, target) = make_flow_field(tape, source, target, params.flow)?;
    let (gated_flow, gate) = match params.gate {
        Some(g) => {
            let (gf, gate) = apply_gate(tape, flow, target, g)?;
            (gf, Some(gate))
        }
        None => (flow, None),
    };
    let warped = match mode {
        WarpMode::WarpTarget => target,
        WarpMode::WarpSource => source,
    };
    let output = tape.warp_bilinear(warped, gated_flow)?;
    Ok(Aligned { output, flow, gated_flow, gate })
}

/// Gated flow alignment.
pub fn gfam<T: Element>(
    tape: &mut Tape<T>,
    source: Var,
    target: Var,
    params: &AlignVars,
    mode: WarpMode,
) -> Result<Aligned> {
    if params.gate.is_none() {
        return Err(Error::invalid("gfam needs gate convolution parameters"));
    }
    align(tape, source, target, params, mode)
}

/// Ungated flow alignment; any gate parameters are ignored.
pub fn fam<T: Element>(
    tape: &mut Tape<T>,
    source: Var,
    target: Var,
    flow: ConvVars,
    mode: WarpMode,
) -> Result<Aligned> {
    align(tape, source, target, &AlignVars { flow, gate: None }, mode)
}

/// Per output pixel: the two taps and whether each axis was clamped.
#[derive(Clone, Copy)]
struct Sample {
    x: Tap,
    y: Tap,
    x_free: bool,
    y_free: bool,
}

impl<T: Element> Tape<T> {
    /// `out(p) = Σ w_q · f(q)` over the four integer neighbours `q` of
    /// `p + flow(p)`, with out-of-range coordinates clamped to the border.
    pub fn warp_bilinear(&mut self, f: Var, flow: FlowField) -> Result<Var> {
        let flow_v = flow.var();
        let (sf, sg) = (self.shape(f), self.shape(flow_v));
        if sg.n() != sf.n() || sg.h() != sf.h() || sg.w() != sf.w() {
            return Err(Error::shape(format!("warp: flow {:?} does not cover feature {:?}", sg.0, sf.0)));
        }
        let (n, c, h, w) = (sf.n(), sf.c(), sf.h(), sf.w());
        let plane = h * w;
        let samples: Vec<Sample> = {
            let g = self.value(flow_v).data();
            let mut v = Vec::with_capacity(n * plane);
            for i in 0..n {
                for y in 0..h {
                    for x in 0..w {
                        let p = y * w + x;
                        let px = x as f64 + g[(i * 2) * plane + p].as_f64();
                        let py = y as f64 + g[(i * 2 + 1) * plane + p].as_f64();
                        v.push(Sample {
                            x: Tap::at(px, w),
                            y: Tap::at(py, h),
                            x_free: px >= 0.0 && px <= (w - 1) as f64,
                            y_free: py >= 0.0 && py <= (h - 1) as f64,
                        });
                    }
                }
            }
            v
        };
        let mut out = Vec::with_capacity(sf.numel());
        {
            let fd = self.value(f).data();
            for i in 0..n {
                for ch in 0..c {
                    let img = &fd[(i * c + ch) * plane..(i * c + ch + 1) * plane];
                    for s in &samples[i * plane..(i + 1) * plane] {
                        let (fx, fy) = (T::from_f64(s.x.frac), T::from_f64(s.y.frac));
                        let top = lerp(img[s.y.i0 * w + s.x.i0], img[s.y.i0 * w + s.x.i1], fx);
                        let bot = lerp(img[s.y.i1 * w + s.x.i0], img[s.y.i1 * w + s.x.i1], fx);
                        out.push(lerp(top, bot, fy));
                    }
                }
            }
        }
        let out = Tensor::from_vec(sf, out)?;
        Ok(self.record(out, &[f, flow_v], move |args| {
            let fd = args.inputs[0].data();
            let mut gf = args.needs[0].then(|| vec![0.0; n * c * plane]);
            let mut gflow = args.needs[1].then(|| vec![0.0; n * 2 * plane]);
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * plane;
                    for (p, s) in samples[i * plane..(i + 1) * plane].iter().enumerate() {
                        let g = args.grad[base + p];
                        if g == 0.0 {
                            continue;
                        }
                        let (wx, wy) = (s.x.frac, s.y.frac);
                        let (a, b) = (base + s.y.i0 * w + s.x.i0, base + s.y.i0 * w + s.x.i1);
                        let (cc, d) = (base + s.y.i1 * w + s.x.i0, base + s.y.i1 * w + s.x.i1);
                        if let Some(gf) = gf.as_mut() {
                            gf[a] += g * (1.0 - wy) * (1.0 - wx);
                            gf[b] += g * (1.0 - wy) * wx;
                            gf[cc] += g * wy * (1.0 - wx);
                            gf[d] += g * wy * wx;
                        }
                        if let Some(gflow) = gflow.as_mut() {
                            let (va, vb) = (fd[a].as_f64(), fd[b].as_f64());
                            let (vc, vd) = (fd[cc].as_f64(), fd[d].as_f64());
                            if s.x_free {
                                gflow[(i * 2) * plane + p] += g * ((1.0 - wy) * (vb - va) + wy * (vd - vc));
                            }
                            if s.y_free {
                                gflow[(i * 2 + 1) * plane + p] += g * ((1.0 - wx) * (vc - va) + wx * (vd - vb));
                            }
                        }
                    }
                }
            }
            vec![gf, gflow]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_flow(n: usize, h: usize, w: usize, dx: f32, dy: f32) -> Tensor {
        let mut t = Tensor::zeros((n, 2, h, w)).unwrap();
        let plane = h * w;
        for i in 0..n {
            for p in 0..plane {
                t.data_mut()[(i * 2) * plane + p] = dx;
                t.data_mut()[(i * 2 + 1) * plane + p] = dy;
            }
        }
        t
    }

    fn ramp(w: usize, h: usize) -> Tensor {
        let data = (0..h).flat_map(|_| (0..w).map(|x| x as f32)).collect();
        Tensor::from_vec((1, 1, h, w), data).unwrap()
    }

    #[test]
    fn zero_flow_is_identity() {
        let f0 = Tensor::<f32>::randn((2, 3, 5, 6), 1, 1.0).unwrap();
        let mut tape = Tape::new();
        let f = tape.constant(f0.clone());
        let g = tape.constant(constant_flow(2, 5, 6, 0.0, 0.0));
        let flow = FlowField::new(&tape, g).unwrap();
        let y = tape.warp_bilinear(f, flow).unwrap();
        assert_eq!(tape.value(y).data(), f0.data());
    }

    #[test]
    fn unit_shift_on_ramp() {
        let mut tape = Tape::<f32>::new();
        let f = tape.constant(ramp(6, 3));
        let g = tape.constant(constant_flow(1, 3, 6, 1.0, 0.0));
        let y = tape.warp_bilinear(f, FlowField::new(&tape, g).unwrap()).unwrap();
        let v = tape.value(y);
        for row in 0..3 {
            for x in 0..5 {
                assert_eq!(v.at(0, 0, row, x), x as f32 + 1.0);
            }
            assert_eq!(v.at(0, 0, row, 5), 5.0);
        }
    }

    #[test]
    fn half_shift_on_ramp() {
        let mut tape = Tape::<f32>::new();
        let f = tape.constant(ramp(6, 2));
        let g = tape.constant(constant_flow(1, 2, 6, 0.5, 0.0));
        let y = tape.warp_bilinear(f, FlowField::new(&tape, g).unwrap()).unwrap();
        let v = tape.value(y);
        for x in 0..5 {
            assert_eq!(v.at(0, 0, 1, x), x as f32 + 0.5);
        }
    }

    #[test]
    fn flow_must_have_two_channels() {
        let mut tape = Tape::<f32>::new();
        let g = tape.constant(Tensor::zeros((1, 3, 2, 2)).unwrap());
        assert!(FlowField::new(&tape, g).is_err());
    }

    #[test]
    fn warp_rejects_mismatched_flow() {
        let mut tape = Tape::<f32>::new();
        let f = tape.constant(Tensor::zeros((1, 1, 4, 4)).unwrap());
        let g = tape.constant(constant_flow(1, 3, 4, 0.0, 0.0));
        assert!(tape.warp_bilinear(f, FlowField::new(&tape, g).unwrap()).is_err());
    }

    fn zero_conv(tape: &mut Tape<f32>, out_c: usize, in_c: usize) -> ConvVars {
        ConvVars {
            weight: tape.param(Tensor::zeros((out_c, in_c, 3, 3)).unwrap()),
            bias: tape.param(Tensor::zeros((1, out_c, 1, 1)).unwrap()),
        }
    }

    #[test]
    fn zero_flow_conv_gives_zero_field() {
        let mut tape = Tape::<f32>::new();
        let fs = tape.constant(Tensor::randn((1, 4, 2, 2), 1, 1.0).unwrap());
        let ft = tape.constant(Tensor::randn((1, 4, 8, 8), 2, 1.0).unwrap());
        let conv = zero_conv(&mut tape, 2, 8);
        let (flow, _, _) = make_flow_field(&mut tape, fs, ft, conv).unwrap();
        let v = tape.value(flow.var());
        assert_eq!(v.dims(), [1, 2, 8, 8]);
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn batch_mismatch_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let fs = tape.constant(Tensor::zeros((2, 4, 4, 4)).unwrap());
        let ft = tape.constant(Tensor::zeros((1, 4, 4, 4)).unwrap());
        let conv = zero_conv(&mut tape, 2, 8);
        assert!(make_flow_field(&mut tape, fs, ft, conv).is_err());
    }

    #[test]
    fn zero_gate_halves_flow() {
        let mut tape = Tape::<f32>::new();
        let g0 = Tensor::randn((1, 2, 4, 4), 3, 1.0).unwrap();
        let g = tape.constant(g0.clone());
        let ft = tape.constant(Tensor::randn((1, 3, 4, 4), 4, 1.0).unwrap());
        let gate = zero_conv(&mut tape, 1, 3);
        let field = FlowField::new(&tape, g).unwrap();
        let (gated, _) = apply_gate(&mut tape, field, ft, gate).unwrap();
        for (a, b) in tape.value(gated.var()).data().iter().zip(g0.data()) {
            assert_eq!(*a, 0.5 * b);
        }
    }

    #[test]
    fn saturated_gates() {
        for (bias, expect_identity) in [(30.0f32, false), (-60.0, true)] {
            let mut tape = Tape::<f32>::new();
            let g0 = Tensor::randn((1, 2, 4, 4), 3, 1.0).unwrap();
            let g = tape.constant(g0.clone());
            let ft = tape.constant(Tensor::randn((1, 3, 4, 4), 4, 1.0).unwrap());
            let gate = ConvVars {
                weight: tape.param(Tensor::zeros((1, 3, 3, 3)).unwrap()),
                bias: tape.param(Tensor::full((1, 1, 1, 1), bias).unwrap()),
            };
            let field = FlowField::new(&tape, g).unwrap();
            let (gated, _) = apply_gate(&mut tape, field, ft, gate).unwrap();
            for (a, b) in tape.value(gated.var()).data().iter().zip(g0.data()) {
                if expect_identity {
                    assert!(a.abs() < 1e-6);
                } else {
                    assert!((a - b).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn gate_resolution_mismatch() {
        let mut tape = Tape::<f32>::new();
        let g = tape.constant(Tensor::zeros((1, 2, 4, 4)).unwrap());
        let ft = tape.constant(Tensor::zeros((1, 3, 8, 8)).unwrap());
        let gate = zero_conv(&mut tape, 1, 3);
        let field = FlowField::new(&tape, g).unwrap();
        assert!(apply_gate(&mut tape, field, ft, gate).is_err());
    }

    #[test]
    fn zero_params_give_identity_of_resized_target() {
        let mut tape = Tape::<f32>::new();
        let fs = tape.constant(Tensor::randn((1, 4, 8, 8), 1, 1.0).unwrap());
        let ft = tape.constant(Tensor::randn((1, 4, 4, 4), 2, 1.0).unwrap());
        let params = AlignVars { flow: zero_conv(&mut tape, 2, 8), gate: Some(zero_conv(&mut tape, 1, 4)) };
        let out = gfam(&mut tape, fs, ft, &params, WarpMode::WarpTarget).unwrap();
        let resized = tape.bilinear_resize(ft, 8, 8, true).unwrap();
        assert_eq!(tape.shape(out.output).0, [1, 4, 8, 8]);
        assert_eq!(tape.value(out.output).data(), tape.value(resized).data());
    }

    #[test]
    fn warp_source_mode_resamples_source() {
        let mut tape = Tape::<f32>::new();
        let fs0 = Tensor::randn((1, 4, 4, 4), 1, 1.0).unwrap();
        let fs = tape.constant(fs0.clone());
        let ft = tape.constant(Tensor::randn((1, 4, 4, 4), 2, 1.0).unwrap());
        let flow = zero_conv(&mut tape, 2, 8);
        let out = fam(&mut tape, fs, ft, flow, WarpMode::WarpSource).unwrap();
        assert_eq!(tape.value(out.output).data(), fs0.data());
    }
}
