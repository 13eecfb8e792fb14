//! Gradient-weighted class-activation saliency.
//!
//! The class score is the sum of the chosen class's strongest logits (the
//! top cells per detection scale), which keeps the score focused on actual
//! detections and exactly invariant to constant logit shifts. Channel
//! weights follow the higher-order gradient formulation with the usual
//! first-order reduction: with g the gradient of the score w.r.t. the
//! target layer's activations A,
//!
//! ```text
//! alpha = g^2 / (2 g^2 + sum_spatial(A) * g^3 + eps)
//! w_k   = sum_spatial(alpha * relu(g))
//! heat  = relu(sum_k w_k A_k),  normalized to [0, 1], bilinearly upsampled
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::Model;
use crate::tensor::ops::resize_bilinear;
use crate::tensor::tape::Tape;
use crate::tensor::{FeatureMap, Scalar};

/// Heat values in `[0, 1]` at input resolution.
pub struct SaliencyMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub class_id: usize,
    pub layer_base: usize,
}

impl SaliencyMap {
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Location of the hottest pixel (first in row-major order on ties).
    pub fn peak(&self) -> (usize, usize) {
        let mut best = (0usize, 0usize);
        let mut best_v = f64::NEG_INFINITY;
        for y in 0..self.height {
            for x in 0..self.width {
                let v = self.at(y, x);
                if v > best_v {
                    best_v = v;
                    best = (y, x);
                }
            }
        }
        best
    }
}

/// Saliency for `class_id` at the output of base node `layer_base`
/// (defaults to the node feeding the stride-8 head).
pub fn gradcam_pp<T: Scalar>(
    model: &Model<T>,
    image: &FeatureMap<T>,
    class_id: usize,
    layer_base: Option<usize>,
) -> Result<SaliencyMap> {
    if class_id >= model.num_classes {
        return Err(Error::InvalidArg(format!(
            "class {class_id} out of range ({} classes)",
            model.num_classes
        )));
    }
    let base = layer_base.unwrap_or_else(|| model.default_saliency_base());
    let exec = model
        .exec_of_base(base)
        .ok_or_else(|| Error::UnsupportedLayer(format!("node {base} does not exist")))?;

    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, image, false)?;
    let act_id = pass.node_outputs[exec]
        .ok_or_else(|| Error::UnsupportedLayer(format!("node {base} has no spatial output")))?;

    // class score: this class's top-3 logits per scale (selection by value,
    // so a constant logit shift picks the same cells)
    let mut parts = Vec::new();
    for &(_, cls) in &pass.det.scales {
        let ch = tape.slice_channels(cls, class_id, 1)?;
        let v = tape.value(ch);
        let mut order: Vec<usize> = (0..v.numel()).collect();
        order.sort_by(|&a, &b| v.data()[b].partial_cmp(&v.data()[a]).unwrap());
        let mut mask = FeatureMap::zeros(v.shape());
        for &i in order.iter().take(3) {
            mask.data_mut()[i] = T::one();
        }
        let m = tape.leaf(mask);
        let picked = tape.mul(ch, m)?;
        parts.push(tape.sum_all(picked));
    }
    let score = tape.add_n(&parts)?;
    let grads = tape.backward(score)?;

    let act = tape.value(act_id);
    let [_, c, h, w] = act.shape();
    let zero_map = FeatureMap::zeros(act.shape());
    let grad = grads.get(act_id).unwrap_or(&zero_map);

    let eps = 1e-12f64;
    let mut heat = vec![0.0f64; h * w];
    for k in 0..c {
        let a = act.channel(0, k);
        let g = grad.channel(0, k);
        let sum_a: f64 = a
            .iter()
            .map(|&v| num_traits::NumCast::from(v).unwrap_or(0.0))
            .sum();
        let mut wk = 0.0f64;
        for i in 0..h * w {
            let gi: f64 = num_traits::NumCast::from(g[i]).unwrap_or(0.0);
            if gi == 0.0 {
                continue;
            }
            let g2 = gi * gi;
            let alpha = g2 / (2.0 * g2 + sum_a * g2 * gi + eps);
            wk += alpha * gi.max(0.0);
        }
        for i in 0..h * w {
            let ai: f64 = num_traits::NumCast::from(a[i]).unwrap_or(0.0);
            heat[i] += wk * ai;
        }
    }
    for v in heat.iter_mut() {
        *v = v.max(0.0);
    }

    // upsample to input resolution, then normalize so the peak is exactly 1
    let small = FeatureMap::new([1, 1, h, w], heat)?;
    let (ih, iw) = (image.height(), image.width());
    let big = resize_bilinear(&small, ih, iw);
    let mut values = big.into_data();
    let peak = values.iter().copied().fold(0.0f64, f64::max);
    if peak > 0.0 {
        for v in values.iter_mut() {
            *v = (*v / peak).clamp(0.0, 1.0);
        }
    }
    Ok(SaliencyMap { width: iw, height: ih, values, class_id, layer_base: base })
}

/// Black -> red -> yellow -> white ramp.
fn colormap(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    [
        (3.0 * v).min(1.0),
        (3.0 * v - 1.0).clamp(0.0, 1.0),
        (3.0 * v - 2.0).clamp(0.0, 1.0),
    ]
}

pub fn write_heatmap_png(map: &SaliencyMap, path: &Path) -> Result<()> {
    let mut img = image::RgbImage::new(map.width as u32, map.height as u32);
    for y in 0..map.height {
        for x in 0..map.width {
            let c = colormap(map.at(y, x));
            img.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([
                    (c[0] * 255.0) as u8,
                    (c[1] * 255.0) as u8,
                    (c[2] * 255.0) as u8,
                ]),
            );
        }
    }
    img.save(path)?;
    Ok(())
}

/// Heat blended over the source image.
pub fn write_overlay_png<T: Scalar>(
    image: &FeatureMap<T>,
    map: &SaliencyMap,
    path: &Path,
) -> Result<()> {
    let [_, c, h, w] = image.shape();
    if c != 3 || h != map.height || w != map.width {
        return Err(Error::InvalidArg(
            "overlay needs a 3-channel image matching the saliency size".into(),
        ));
    }
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = map.at(y, x);
            let heat = colormap(v);
            let a = 0.55 * v;
            let px = |ch: usize| {
                let src: f64 = num_traits::NumCast::from(image.at(0, ch, y, x)).unwrap_or(0.0);
                (((1.0 - a) * src + a * heat[ch]).clamp(0.0, 1.0) * 255.0) as u8
            };
            img.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_model, GraphConfig, TOY_CONFIG_64};
    use crate::rng::StreamRng;

    fn toy_model(seed: u64) -> Model<f64> {
        build_model(&GraphConfig::parse(TOY_CONFIG_64).unwrap(), seed).unwrap()
    }

    fn random_image(seed: u64) -> FeatureMap<f64> {
        let mut rng = StreamRng::new(seed, 99);
        FeatureMap::from_fn([1, 3, 64, 64], |_, _, _, _| rng.uniform_in(0.0, 1.0))
    }

    #[test]
    fn values_stay_in_unit_range_and_peak_is_one() {
        let model = toy_model(4);
        let map = gradcam_pp(&model, &random_image(1), 0, None).unwrap();
        assert!(map.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let max = map.values.iter().copied().fold(0.0f64, f64::max);
        assert!(max == 0.0 || (max - 1.0).abs() < 1e-9);
    }

    #[test]
    fn constant_head_gives_zero_map() {
        let mut model = toy_model(4);
        // freeze the class branches to constants: zero weights and biases
        model.visit_params_mut(&mut |name, p| {
            if name.contains(".cls") {
                for v in p.data_mut() {
                    *v = 0.0;
                }
            }
        });
        let map = gradcam_pp(&model, &random_image(2), 1, None).unwrap();
        assert!(map.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invariant_to_constant_logit_shift() {
        let model = toy_model(9);
        let img = random_image(3);
        let before = gradcam_pp(&model, &img, 0, None).unwrap();
        let mut shifted = toy_model(9);
        shifted.visit_params_mut(&mut |name, p| {
            if name.contains(".cls") && name.ends_with(".head.bias") {
                for v in p.data_mut() {
                    *v += 3.0;
                }
            }
        });
        let after = gradcam_pp(&shifted, &img, 0, None).unwrap();
        for (a, b) in before.values.iter().zip(&after.values) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn bad_class_and_layer_are_rejected() {
        let model = toy_model(4);
        assert!(gradcam_pp(&model, &random_image(1), 9, None).is_err());
        // detect node has no spatial output
        let detect_base = model.config.nodes.len() - 1;
        assert!(gradcam_pp(&model, &random_image(1), 0, Some(detect_base)).is_err());
    }
}
