//! Adam optimizer and the desk-scale training loop.
//!
//! One master seed drives shuffling and augmentation through dedicated
//! counter-based streams, so identical (config, data, seed) runs produce
//! identical metrics byte for byte.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::data::{hflip_sample, Sample};
use crate::detection::{assign_targets, detection_loss, GtBox, LossWeights};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::graph::Model;
use crate::rng::{streams, StreamRng};
use crate::tensor::tape::Tape;
use crate::tensor::{real, FeatureMap, Scalar};

/// Adam with per-tensor first/second moment state keyed by parameter name.
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: u64,
    state: HashMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr: real(lr),
            beta1: real(0.9),
            beta2: real(0.999),
            eps: real(1e-8),
            step: 0,
            state: HashMap::new(),
        }
    }

    /// Apply one update over every parameter with a gradient.
    pub fn step(&mut self, model: &mut Model<T>, grads: &HashMap<String, FeatureMap<T>>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let state = &mut self.state;
        model.visit_params_mut(&mut |name, p| {
            let Some(g) = grads.get(&name) else { return };
            let (m, v) = state
                .entry(name)
                .or_insert_with(|| (vec![T::zero(); p.numel()], vec![T::zero(); p.numel()]));
            for ((pi, &gi), (mi, vi)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi = *pi - lr * mhat / (vhat.sqrt() + eps);
            }
        });
    }
}

/// Training knobs. Pinned defaults are printed in run manifests.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub loss_weights: [f64; 3],
    pub hflip: bool,
    /// Decode floor for per-epoch metric evaluation.
    pub decode_conf_thr: f64,
    pub nms_iou_thr: f64,
    /// Operating point for the reported precision/recall columns.
    pub pr_conf_thr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            lr: 0.01,
            seed: 0,
            loss_weights: [7.5, 0.5, 1.5],
            hflip: false,
            decode_conf_thr: 0.001,
            nms_iou_thr: 0.6,
            pr_conf_thr: 0.25,
        }
    }
}

/// One line of the per-epoch metrics file.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub box_loss: f64,
    pub cls_loss: f64,
    pub dfl_loss: f64,
    pub precision: f64,
    pub recall: f64,
    pub map50: f64,
    pub map50_95: f64,
}

impl EpochMetrics {
    pub fn tsv_header() -> &'static str {
        "epoch\tbox_loss\tcls_loss\tdfl_loss\tprecision\trecall\tmap50\tmap50_95"
    }

    pub fn tsv_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.epoch,
            self.box_loss,
            self.cls_loss,
            self.dfl_loss,
            self.precision,
            self.recall,
            self.map50,
            self.map50_95
        )
    }

    pub fn weighted_total(&self, w: [f64; 3]) -> f64 {
        w[0] * self.box_loss + w[1] * self.cls_loss + w[2] * self.dfl_loss
    }
}

pub struct TrainRun {
    pub epochs: Vec<EpochMetrics>,
    pub diagnostics: Vec<String>,
}

/// Decode + NMS every sample (in parallel) and score against its labels.
pub fn evaluate_model<T: Scalar>(
    model: &Model<T>,
    samples: &[Sample<T>],
    decode_conf_thr: f64,
    nms_iou_thr: f64,
    pr_conf_thr: f64,
) -> Result<EvalReport> {
    let dets: Vec<_> = samples
        .par_iter()
        .map(|s| {
            model
                .predict(&s.image, decode_conf_thr, nms_iou_thr)
                .map(|mut per_image| per_image.remove(0))
        })
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<Vec<GtBox>> = samples.iter().map(|s| s.labels.clone()).collect();
    Ok(evaluate(&dets, &gts, model.num_classes, pr_conf_thr, 0.5))
}

/// Full-corpus training loop: shuffled minibatches, Adam updates, and one
/// metrics row per epoch (losses are epoch means of the unweighted parts;
/// P/R/mAP are measured on the training corpus itself at desk scale).
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    samples: &[Sample<T>],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainRun> {
    if samples.is_empty() {
        return Err(Error::InvalidArg("training needs at least one sample".into()));
    }
    let shape = samples[0].image.shape();
    for s in samples {
        if s.image.shape() != shape {
            return Err(Error::Shape(format!(
                "all training images must share a shape: {:?} vs {:?}",
                shape,
                s.image.shape()
            )));
        }
    }
    let (h, w) = (shape[2], shape[3]);
    let weights = LossWeights {
        box_w: real::<T>(cfg.loss_weights[0]),
        cls_w: real::<T>(cfg.loss_weights[1]),
        dfl_w: real::<T>(cfg.loss_weights[2]),
    };
    let mut adam = Adam::new(cfg.lr);
    let mut shuffle_rng = StreamRng::new(cfg.seed, streams::SHUFFLE);
    let mut aug_rng = StreamRng::new(cfg.seed, streams::AUGMENT);
    let mut run = TrainRun { epochs: Vec::with_capacity(cfg.epochs), diagnostics: Vec::new() };

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        shuffle_rng.shuffle(&mut order);

        let mut part_sums = [0.0f64; 3];
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut images = FeatureMap::zeros([chunk.len(), 3, h, w]);
            let mut gts: Vec<Vec<GtBox>> = Vec::with_capacity(chunk.len());
            for (bi, &si) in chunk.iter().enumerate() {
                let flipped;
                let s = if cfg.hflip && aug_rng.uniform() < 0.5 {
                    flipped = hflip_sample(&samples[si]);
                    &flipped
                } else {
                    &samples[si]
                };
                let plane = 3 * h * w;
                images.data_mut()[bi * plane..(bi + 1) * plane].copy_from_slice(s.image.data());
                gts.push(s.labels.clone());
            }
            let (assignment, diags) = assign_targets::<T>(
                &gts,
                (h, w),
                &model.strides,
                model.num_classes,
                model.reg_max,
            )?;
            if epoch == 1 {
                run.diagnostics.extend(diags);
            }
            let mut tape = Tape::new();
            let pass = model.forward(&mut tape, &images, true)?;
            let box_ids: Vec<_> = pass.det.scales.iter().map(|&(b, _)| b).collect();
            let cls_ids: Vec<_> = pass.det.scales.iter().map(|&(_, c)| c).collect();
            let (total, parts) = detection_loss(
                &mut tape,
                &box_ids,
                &cls_ids,
                &assignment,
                model.reg_max,
                weights,
            )?;
            let mut grads = tape.backward(total)?;
            let mut by_name: HashMap<String, FeatureMap<T>> = HashMap::new();
            for (name, id) in &pass.trace.entries {
                if let Some(g) = grads.take(*id) {
                    by_name.insert(name.clone(), g);
                }
            }
            adam.step(model, &by_name);
            part_sums[0] += num_traits::NumCast::from(parts.box_loss).unwrap_or(0.0);
            part_sums[1] += num_traits::NumCast::from(parts.cls_loss).unwrap_or(0.0);
            part_sums[2] += num_traits::NumCast::from(parts.dfl_loss).unwrap_or(0.0);
            batches += 1;
        }

        // refresh running statistics against the current weights before
        // switching to inference mode for the epoch metrics
        let calib: Vec<FeatureMap<T>> = order
            .chunks(cfg.batch_size.max(1))
            .take(4)
            .map(|chunk| {
                let mut images = FeatureMap::zeros([chunk.len(), 3, h, w]);
                let plane = 3 * h * w;
                for (bi, &si) in chunk.iter().enumerate() {
                    images.data_mut()[bi * plane..(bi + 1) * plane]
                        .copy_from_slice(samples[si].image.data());
                }
                images
            })
            .collect();
        model.recalibrate_bn(&calib)?;

        let report = evaluate_model(
            model,
            samples,
            cfg.decode_conf_thr,
            cfg.nms_iou_thr,
            cfg.pr_conf_thr,
        )?;
        let nb = batches.max(1) as f64;
        let metrics = EpochMetrics {
            epoch,
            box_loss: part_sums[0] / nb,
            cls_loss: part_sums[1] / nb,
            dfl_loss: part_sums[2] / nb,
            precision: report.mean_precision,
            recall: report.mean_recall,
            map50: report.map50,
            map50_95: report.map50_95,
        };
        on_epoch(&metrics);
        run.epochs.push(metrics);
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_corpus, SynthSpec};
    use crate::graph::{build_model, GraphConfig, TOY_CONFIG_64};

    #[test]
    fn two_epochs_on_tiny_corpus_reduce_total_loss() {
        let cfg = GraphConfig::parse(TOY_CONFIG_64).unwrap();
        let mut model = build_model::<f32>(&cfg, 3).unwrap();
        let spec = SynthSpec { n_images: 16, ..Default::default() };
        let samples = synth_corpus::<f32>(12, &spec);
        let tc = TrainConfig { epochs: 2, batch_size: 8, ..Default::default() };
        let run = train(&mut model, &samples, &tc, |_| {}).unwrap();
        assert_eq!(run.epochs.len(), 2);
        let t1 = run.epochs[0].weighted_total(tc.loss_weights);
        let t2 = run.epochs[1].weighted_total(tc.loss_weights);
        assert!(t2 < t1, "loss should drop: {t1} -> {t2}");
    }

    #[test]
    fn training_is_deterministic_given_seed() {
        let cfg = GraphConfig::parse(TOY_CONFIG_64).unwrap();
        let spec = SynthSpec { n_images: 8, ..Default::default() };
        let samples = synth_corpus::<f32>(7, &spec);
        let tc = TrainConfig { epochs: 1, batch_size: 4, seed: 5, ..Default::default() };
        let mut m1 = build_model::<f32>(&cfg, 5).unwrap();
        let r1 = train(&mut m1, &samples, &tc, |_| {}).unwrap();
        let mut m2 = build_model::<f32>(&cfg, 5).unwrap();
        let r2 = train(&mut m2, &samples, &tc, |_| {}).unwrap();
        assert_eq!(r1.epochs, r2.epochs);
        let lines1: Vec<String> = r1.epochs.iter().map(|e| e.tsv_line()).collect();
        let lines2: Vec<String> = r2.epochs.iter().map(|e| e.tsv_line()).collect();
        assert_eq!(lines1, lines2);
    }
}
