//! Image dumps of a model's prediction, flow fields, gates and indicator.

use std::fs;
use std::path::{Path, PathBuf};

use crate::autodiff::Tape;
use crate::data::{class_color, encode_gray, encode_rgb, quantize, Sample};
use crate::error::{Error, Result};
use crate::model::{argmax_channels, Model, DIRECTIONS};
use crate::nn::BnMode;
use crate::tensor::Tensor;

/// `round(255·v)` for each value, clamped to `[0, 1]`.
pub fn gray_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().map(|&v| quantize(v)).collect()
}

/// Interleaved palette colours of a label map.
pub fn palette_rgb(labels: &[u8]) -> Vec<u8> {
    labels.iter().flat_map(|&c| class_color(c as usize).map(|v| quantize(v as f32))).collect()
}

/// HSV colour wheel of a `(1, 2, h, w)` flow: hue is the direction, value is
/// the magnitude relative to the largest one, saturation is full. A constant
/// field therefore renders as a uniform image.
pub fn flow_rgb(flow: &Tensor<f32>) -> Result<Vec<u8>> {
    let [n, c, h, w] = flow.dims();
    if n != 1 || c != 2 {
        return Err(Error::shape(format!("flow image needs (1, 2, h, w), got {:?}", flow.dims())));
    }
    let plane = h * w;
    let (dx, dy) = flow.data().split_at(plane);
    let mags: Vec<f64> = dx.iter().zip(dy).map(|(&x, &y)| (x as f64).hypot(y as f64)).collect();
    let max = mags.iter().cloned().fold(0.0, f64::max);
    let mut out = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        let hue = (dy[p] as f64).atan2(dx[p] as f64).rem_euclid(std::f64::consts::TAU) / std::f64::consts::TAU;
        let value = if max > 0.0 { mags[p] / max } else { 0.0 };
        out.extend(hsv_to_rgb(hue, 1.0, value).map(|v| quantize(v as f32)));
    }
    Ok(out)
}

/// `h`, `s`, `v` in `[0, 1]`.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h * 6.0).rem_euclid(6.0);
    let sector = h6.floor();
    let f = h6 - sector;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector as u8 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Eval-mode forward on one sample, then write into `dir`:
///
/// * `prediction.ppm`: predicted classes in the dataset palette
/// * `flow_<dir>.ppm`: the flow each alignment module warps with
/// * `gate_<dir>.pgm`: gate maps of gated modules
/// * `indicator.pgm`: the edge indicator
///
/// Returns the written paths.
pub fn dump_visuals(model: &mut Model<f32>, sample: &Sample, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(Error::at(dir))?;
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(sample.image.clone());
    let (out, _) = model.forward(&mut tape, x, BnMode::Eval)?;
    let mut written = Vec::new();
    let mut write = |name: String, bytes: Vec<u8>| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(Error::at(&path))?;
        written.push(path);
        Ok(())
    };

    let (h, w) = (sample.height(), sample.width());
    let pred = argmax_channels(tape.value(out.logits));
    write("prediction.ppm".into(), encode_rgb(h, w, &palette_rgb(&pred))?)?;

    for (name, aligned) in DIRECTIONS.iter().zip([out.cp_to_sp, out.sp_to_cp]) {
        let Some(a) = aligned else { continue };
        let flow = tape.value(a.gated_flow.var());
        let [_, _, fh, fw] = flow.dims();
        write(format!("flow_{name}.ppm"), encode_rgb(fh, fw, &flow_rgb(flow)?)?)?;
        if let Some(g) = a.gate {
            let gate = tape.value(g);
            let [_, _, gh, gw] = gate.dims();
            write(format!("gate_{name}.pgm"), encode_gray(gh, gw, &gray_bytes(gate.data()))?)?;
        }
    }

    let d = tape.value(out.indicator);
    write("indicator.pgm".into(), encode_gray(h, w, &gray_bytes(d.data()))?)?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_flow_is_uniform() {
        let rgb = flow_rgb(&Tensor::zeros((1, 2, 3, 4)).unwrap()).unwrap();
        assert!(rgb.chunks(3).all(|px| px == [0, 0, 0]));
    }

    #[test]
    fn constant_flow_is_uniform() {
        let mut f = Tensor::<f32>::zeros((1, 2, 2, 2)).unwrap();
        f.data_mut()[..4].fill(1.5);
        f.data_mut()[4..].fill(-0.5);
        let rgb = flow_rgb(&f).unwrap();
        assert!(rgb.chunks(3).all(|px| px == &rgb[..3]));
        assert_ne!(&rgb[..3], &[0, 0, 0]);
    }

    #[test]
    fn hue_follows_direction() {
        assert_eq!(hsv_to_rgb(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]);
        assert_eq!(hsv_to_rgb(1.0 / 3.0, 1.0, 1.0), [0.0, 1.0, 0.0]);
        assert_eq!(hsv_to_rgb(2.0 / 3.0, 1.0, 1.0), [0.0, 0.0, 1.0]);
    }

    #[test]
    fn gate_encoding() {
        assert_eq!(gray_bytes(&[0.0, 0.5, 1.0, 0.2]), vec![0, 128, 255, 51]);
    }
}
