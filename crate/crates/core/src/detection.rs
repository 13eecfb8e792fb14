//! Box geometry, distribution-focal decoding, detection losses, target
//! assignment and non-maximum suppression.
//!
//! Box branches emit `4 * R` logits per cell laid out side-major
//! (`channel = side * R + bin`, sides ordered left/top/right/bottom), each a
//! distribution over integer distances in stride units decoded by
//! expectation. Class branches emit one logit per class.

use crate::error::{Error, Result};
use crate::tensor::ops::sigmoid;
use crate::tensor::{real, FeatureMap, Scalar};

/// Distribution bins per box side.
pub const DEFAULT_REG_MAX: usize = 16;

/// Normalized `max(w, h)` size bands routing ground truth to the three
/// detection scales: below the first bound to stride 8, between to stride 16,
/// above the second to stride 32.
pub const SIZE_BANDS: [f64; 2] = [0.25, 0.50];

/// Loss weighting, printed in every run header.
#[derive(Clone, Copy, Debug)]
pub struct LossWeights<T> {
    pub box_w: T,
    pub cls_w: T,
    pub dfl_w: T,
}

impl<T: Scalar> Default for LossWeights<T> {
    fn default() -> Self {
        LossWeights {
            box_w: real(7.5),
            cls_w: real(0.5),
            dfl_w: real(1.5),
        }
    }
}

/// One scored, decoded detection in normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectionBox {
    pub class_id: usize,
    pub confidence: f64,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl DetectionBox {
    pub fn new(class_id: usize, confidence: f64, cx: f64, cy: f64, w: f64, h: f64) -> Self {
        DetectionBox { class_id, confidence, cx, cy, w, h }
    }

    #[inline]
    pub fn x1(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    #[inline]
    pub fn y1(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    #[inline]
    pub fn x2(&self) -> f64 {
        self.cx + self.w / 2.0
    }

    #[inline]
    pub fn y2(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }
}

/// One ground-truth box in normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GtBox {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl GtBox {
    pub fn as_detection(&self) -> DetectionBox {
        DetectionBox::new(self.class_id, 1.0, self.cx, self.cy, self.w, self.h)
    }
}

/// Intersection over union; 0 for disjoint or degenerate boxes.
pub fn iou(a: &DetectionBox, b: &DetectionBox) -> f64 {
    let iw = (a.x2().min(b.x2()) - a.x1().max(b.x1())).max(0.0);
    let ih = (a.y2().min(b.y2()) - a.y1().max(b.y1())).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Expectation of the softmax distribution over bin indices 0..R-1.
pub fn dfl_expect<T: Scalar>(logits: &[T]) -> T {
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    p.iter()
        .enumerate()
        .map(|(k, &v)| real::<T>(k as f64) * v)
        .sum()
}

/// Interpolated cross-entropy against the two bracketing integer bins.
pub fn dfl_loss_side<T: Scalar>(logits: &[T], target: T) -> Result<T> {
    let r = logits.len();
    let hi = real::<T>((r - 1) as f64);
    if target < T::zero() || target > hi {
        return Err(Error::InvalidArg(format!(
            "dfl target {target} outside [0, {}]",
            r - 1
        )));
    }
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    let lo_bin = target.floor();
    let lo = <usize as num_traits::NumCast>::from(lo_bin).unwrap().min(r - 2);
    let wl = real::<T>((lo + 1) as f64) - target;
    let wu = target - real::<T>(lo as f64);
    Ok(-(wl * p[lo].ln() + wu * p[lo + 1].ln()))
}

fn softmax_in_place<T: Scalar>(xs: &mut [T]) {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for v in xs.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in xs.iter_mut() {
        *v = *v / z;
    }
}

/// Greedy per-class suppression. Deterministic: candidates are visited in
/// (confidence desc, class asc, cx asc) order and a candidate is dropped when
/// it overlaps an already kept box of its class above `iou_thr`.
pub fn nms(boxes: &[DetectionBox], iou_thr: f64, conf_thr: f64) -> Vec<DetectionBox> {
    let mut cand: Vec<&DetectionBox> = boxes.iter().filter(|b| b.confidence >= conf_thr).collect();
    cand.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then(a.class_id.cmp(&b.class_id))
            .then(a.cx.total_cmp(&b.cx))
    });
    let mut kept: Vec<DetectionBox> = Vec::new();
    'outer: for c in cand {
        for k in &kept {
            if k.class_id == c.class_id && iou(k, c) > iou_thr {
                continue 'outer;
            }
        }
        kept.push(*c);
    }
    kept
}

// ---------------------------------------------------------------------------
// Target assignment
// ---------------------------------------------------------------------------

/// A cell that received a ground-truth box.
#[derive(Clone, Debug)]
pub struct AssignedCell<T> {
    pub n: usize,
    pub y: usize,
    pub x: usize,
    /// Ground truth as (x1, y1, x2, y2) in grid (stride) units.
    pub gt_grid: [T; 4],
    /// Target distances (l, t, r, b) from the cell center, stride units,
    /// clamped to the representable bin range.
    pub dists: [T; 4],
}

/// Targets for one detection scale.
pub struct ScaleAssignment<T> {
    pub stride: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub cells: Vec<AssignedCell<T>>,
    /// (N, num_classes, grid_h, grid_w) with 1 at assigned cells' class.
    pub cls_target: FeatureMap<T>,
}

pub struct Assignment<T> {
    pub scales: Vec<ScaleAssignment<T>>,
    pub num_assigned: usize,
}

/// Center + size-band assignment.
///
/// Each ground truth is routed to one scale by its normalized `max(w, h)`
/// (see [`SIZE_BANDS`]) and assigned to every cell of that scale whose center
/// falls inside the box; if no center does, the cell containing the box
/// center is used. A cell contested by several boxes keeps the smallest one.
/// Out-of-range boxes are rejected with a per-box diagnostic.
pub fn assign_targets<T: Scalar>(
    gts: &[Vec<GtBox>],
    resolution: (usize, usize),
    strides: &[usize],
    num_classes: usize,
    reg_max: usize,
) -> Result<(Assignment<T>, Vec<String>)> {
    let (img_h, img_w) = resolution;
    let batch = gts.len();
    let mut diagnostics = Vec::new();
    // candidate per cell: (gt area, gt index) -> smaller area wins
    let mut winners: Vec<std::collections::HashMap<(usize, usize, usize), (f64, usize, GtBox)>> =
        strides.iter().map(|_| Default::default()).collect();

    for (n, image_gts) in gts.iter().enumerate() {
        for (gi, gt) in image_gts.iter().enumerate() {
            let ok = gt.w > 0.0
                && gt.h > 0.0
                && gt.cx - gt.w / 2.0 >= -1e-6
                && gt.cy - gt.h / 2.0 >= -1e-6
                && gt.cx + gt.w / 2.0 <= 1.0 + 1e-6
                && gt.cy + gt.h / 2.0 <= 1.0 + 1e-6
                && gt.class_id < num_classes;
            if !ok {
                diagnostics.push(format!(
                    "image {n} box {gi}: rejected (class {} cx {:.4} cy {:.4} w {:.4} h {:.4})",
                    gt.class_id, gt.cx, gt.cy, gt.w, gt.h
                ));
                continue;
            }
            let size = gt.w.max(gt.h);
            let si = if size < SIZE_BANDS[0] {
                0
            } else if size < SIZE_BANDS[1] {
                1
            } else {
                2
            };
            let si = si.min(strides.len() - 1);
            let stride = strides[si];
            let (gh, gw) = (img_h / stride, img_w / stride);
            let x1 = (gt.cx - gt.w / 2.0) * img_w as f64;
            let y1 = (gt.cy - gt.h / 2.0) * img_h as f64;
            let x2 = (gt.cx + gt.w / 2.0) * img_w as f64;
            let y2 = (gt.cy + gt.h / 2.0) * img_h as f64;
            let mut any = false;
            for y in 0..gh {
                let py = (y as f64 + 0.5) * stride as f64;
                if py < y1 || py > y2 {
                    continue;
                }
                for x in 0..gw {
                    let px = (x as f64 + 0.5) * stride as f64;
                    if px < x1 || px > x2 {
                        continue;
                    }
                    any = true;
                    claim(&mut winners[si], (n, y, x), gt, gi);
                }
            }
            if !any {
                // fall back to the cell containing the box center
                let x = ((gt.cx * img_w as f64 / stride as f64) as usize).min(gw - 1);
                let y = ((gt.cy * img_h as f64 / stride as f64) as usize).min(gh - 1);
                claim(&mut winners[si], (n, y, x), gt, gi);
            }
        }
    }

    let mut scales = Vec::with_capacity(strides.len());
    let mut num_assigned = 0;
    for (si, &stride) in strides.iter().enumerate() {
        let (gh, gw) = (img_h / stride, img_w / stride);
        let mut cls_target = FeatureMap::zeros([batch, num_classes, gh, gw]);
        let mut cells = Vec::new();
        let mut keys: Vec<_> = winners[si].keys().copied().collect();
        keys.sort_unstable();
        for key in keys {
            let (n, y, x) = key;
            let (_, _, gt) = winners[si][&key];
            let px = (x as f64 + 0.5) * stride as f64;
            let py = (y as f64 + 0.5) * stride as f64;
            let s = stride as f64;
            let gx1 = (gt.cx - gt.w / 2.0) * img_w as f64 / s;
            let gy1 = (gt.cy - gt.h / 2.0) * img_h as f64 / s;
            let gx2 = (gt.cx + gt.w / 2.0) * img_w as f64 / s;
            let gy2 = (gt.cy + gt.h / 2.0) * img_h as f64 / s;
            let max_d = (reg_max - 1) as f64 - 0.01;
            let dists = [
                (px / s - gx1).clamp(0.0, max_d),
                (py / s - gy1).clamp(0.0, max_d),
                (gx2 - px / s).clamp(0.0, max_d),
                (gy2 - py / s).clamp(0.0, max_d),
            ];
            *cls_target.at_mut(n, gt.class_id, y, x) = T::one();
            cells.push(AssignedCell {
                n,
                y,
                x,
                gt_grid: [real(gx1), real(gy1), real(gx2), real(gy2)],
                dists: [real(dists[0]), real(dists[1]), real(dists[2]), real(dists[3])],
            });
            num_assigned += 1;
        }
        scales.push(ScaleAssignment { stride, grid_h: gh, grid_w: gw, cells, cls_target });
    }
    Ok((Assignment { scales, num_assigned }, diagnostics))
}

fn claim(
    map: &mut std::collections::HashMap<(usize, usize, usize), (f64, usize, GtBox)>,
    key: (usize, usize, usize),
    gt: &GtBox,
    gi: usize,
) {
    let area = gt.w * gt.h;
    match map.get(&key) {
        Some(&(best_area, best_gi, _)) if (best_area, best_gi) <= (area, gi) => {}
        _ => {
            map.insert(key, (area, gi, *gt));
        }
    }
}

// ---------------------------------------------------------------------------
// Fused loss ops (recorded on the tape)
// ---------------------------------------------------------------------------

pub mod loss_ops {
    use super::*;

    /// Binary cross-entropy with logits, summed over the map, scaled by `norm`.
    pub struct BceData<T> {
        pub target: FeatureMap<T>,
        pub norm: T,
    }

    impl<T: Scalar> BceData<T> {
        pub fn forward(&self, x: &FeatureMap<T>) -> Result<T> {
            x.same_shape(&self.target, "bce target")?;
            let one = T::one();
            let mut loss = T::zero();
            for (&xi, &ti) in x.data().iter().zip(self.target.data()) {
                // stable formulation: max(x,0) - x*t + ln(1 + exp(-|x|))
                loss += xi.max(T::zero()) - xi * ti + (one + (-xi.abs()).exp()).ln();
            }
            Ok(loss * self.norm)
        }

        pub(crate) fn backward(&self, x: &FeatureMap<T>, upstream: T) -> FeatureMap<T> {
            let mut dx = x.clone();
            for (d, &ti) in dx.data_mut().iter_mut().zip(self.target.data()) {
                *d = (sigmoid(*d) - ti) * self.norm * upstream;
            }
            dx
        }
    }

    /// Distribution focal loss over the assigned cells of one scale:
    /// mean over the four sides of the interpolated cross-entropy,
    /// summed over cells, scaled by `norm`.
    pub struct DflData<T> {
        pub cells: Vec<AssignedCell<T>>,
        pub reg_max: usize,
        pub norm: T,
    }

    impl<T: Scalar> DflData<T> {
        pub fn forward(&self, x: &FeatureMap<T>) -> Result<T> {
            let r = self.reg_max;
            check_box_map(x, r)?;
            let quarter = real::<T>(0.25);
            let mut loss = T::zero();
            for cell in &self.cells {
                for side in 0..4 {
                    let logits = gather_bins(x, cell, side, r);
                    loss += dfl_loss_side(&logits, cell.dists[side])? * quarter;
                }
            }
            Ok(loss * self.norm)
        }

        pub(crate) fn backward(&self, x: &FeatureMap<T>, upstream: T) -> FeatureMap<T> {
            let r = self.reg_max;
            let mut dx = FeatureMap::zeros(x.shape());
            let quarter = real::<T>(0.25);
            let scale = self.norm * upstream * quarter;
            for cell in &self.cells {
                for side in 0..4 {
                    let mut p = gather_bins(x, cell, side, r);
                    softmax_in_place(&mut p);
                    let t = cell.dists[side];
                    let lo = <usize as num_traits::NumCast>::from(t.floor()).unwrap().min(r - 2);
                    let wl = real::<T>((lo + 1) as f64) - t;
                    let wu = t - real::<T>(lo as f64);
                    for (k, &pk) in p.iter().enumerate() {
                        let mut g = pk;
                        if k == lo {
                            g -= wl;
                        }
                        if k == lo + 1 {
                            g -= wu;
                        }
                        *dx.at_mut(cell.n, side * r + k, cell.y, cell.x) += g * scale;
                    }
                }
            }
            dx
        }
    }

    /// Complete-IoU loss over the assigned cells of one scale. Box sides are
    /// decoded from the bin distributions by expectation inside the op, so
    /// gradients flow back into the logits.
    pub struct CiouData<T> {
        pub cells: Vec<AssignedCell<T>>,
        pub reg_max: usize,
        pub norm: T,
    }

    impl<T: Scalar> CiouData<T> {
        /// Returns the loss and, per cell, d(1 - ciou)/d(side distance).
        pub fn forward(&self, x: &FeatureMap<T>) -> Result<(T, Vec<[T; 4]>)> {
            let r = self.reg_max;
            check_box_map(x, r)?;
            let mut loss = T::zero();
            let mut saved = Vec::with_capacity(self.cells.len());
            for cell in &self.cells {
                let mut dist = [T::zero(); 4];
                for (side, d) in dist.iter_mut().enumerate() {
                    let logits = gather_bins(x, cell, side, r);
                    *d = dfl_expect(&logits);
                }
                let cx = real::<T>(cell.x as f64 + 0.5);
                let cy = real::<T>(cell.y as f64 + 0.5);
                let c = ciou_dual(dist, cell.gt_grid, cx, cy);
                loss += (T::one() - c.v) * self.norm;
                saved.push([-c.d[0], -c.d[1], -c.d[2], -c.d[3]]);
            }
            Ok((loss, saved))
        }

        pub(crate) fn backward(
            &self,
            x: &FeatureMap<T>,
            saved: &[[T; 4]],
            upstream: T,
        ) -> FeatureMap<T> {
            let r = self.reg_max;
            let mut dx = FeatureMap::zeros(x.shape());
            for (cell, dldist) in self.cells.iter().zip(saved) {
                for side in 0..4 {
                    let mut p = gather_bins(x, cell, side, r);
                    softmax_in_place(&mut p);
                    let e: T = p
                        .iter()
                        .enumerate()
                        .map(|(k, &v)| real::<T>(k as f64) * v)
                        .sum();
                    // d E / d logit_k = p_k (k - E)
                    let g0 = dldist[side] * self.norm * upstream;
                    for (k, &pk) in p.iter().enumerate() {
                        *dx.at_mut(cell.n, side * r + k, cell.y, cell.x) +=
                            g0 * pk * (real::<T>(k as f64) - e);
                    }
                }
            }
            dx
        }
    }

    fn check_box_map<T: Scalar>(x: &FeatureMap<T>, reg_max: usize) -> Result<()> {
        if x.channels() != 4 * reg_max {
            return Err(Error::DimMismatch {
                axis: "channels",
                expected: 4 * reg_max,
                got: x.channels(),
                context: "box distribution map",
            });
        }
        Ok(())
    }

    fn gather_bins<T: Scalar>(
        x: &FeatureMap<T>,
        cell: &AssignedCell<T>,
        side: usize,
        reg_max: usize,
    ) -> Vec<T> {
        (0..reg_max)
            .map(|k| x.at(cell.n, side * reg_max + k, cell.y, cell.x))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// CIoU via forward-mode duals
// ---------------------------------------------------------------------------

/// Value plus partials w.r.t. the four decoded side distances.
#[derive(Clone, Copy, Debug)]
struct Dual4<T> {
    v: T,
    d: [T; 4],
}

impl<T: Scalar> Dual4<T> {
    fn k(v: T) -> Self {
        Dual4 { v, d: [T::zero(); 4] }
    }

    fn var(v: T, i: usize) -> Self {
        let mut d = [T::zero(); 4];
        d[i] = T::one();
        Dual4 { v, d }
    }

    fn add(self, o: Self) -> Self {
        Dual4 {
            v: self.v + o.v,
            d: [
                self.d[0] + o.d[0],
                self.d[1] + o.d[1],
                self.d[2] + o.d[2],
                self.d[3] + o.d[3],
            ],
        }
    }

    fn sub(self, o: Self) -> Self {
        Dual4 {
            v: self.v - o.v,
            d: [
                self.d[0] - o.d[0],
                self.d[1] - o.d[1],
                self.d[2] - o.d[2],
                self.d[3] - o.d[3],
            ],
        }
    }

    fn mul(self, o: Self) -> Self {
        Dual4 {
            v: self.v * o.v,
            d: [
                self.d[0] * o.v + self.v * o.d[0],
                self.d[1] * o.v + self.v * o.d[1],
                self.d[2] * o.v + self.v * o.d[2],
                self.d[3] * o.v + self.v * o.d[3],
            ],
        }
    }

    fn div(self, o: Self) -> Self {
        let inv = T::one() / o.v;
        let q = self.v * inv;
        Dual4 {
            v: q,
            d: [
                (self.d[0] - q * o.d[0]) * inv,
                (self.d[1] - q * o.d[1]) * inv,
                (self.d[2] - q * o.d[2]) * inv,
                (self.d[3] - q * o.d[3]) * inv,
            ],
        }
    }

    fn max(self, o: Self) -> Self {
        if self.v >= o.v {
            self
        } else {
            o
        }
    }

    fn min(self, o: Self) -> Self {
        if self.v <= o.v {
            self
        } else {
            o
        }
    }

    fn atan(self) -> Self {
        let f = T::one() / (T::one() + self.v * self.v);
        Dual4 {
            v: self.v.atan(),
            d: [self.d[0] * f, self.d[1] * f, self.d[2] * f, self.d[3] * f],
        }
    }

    fn sqr(self) -> Self {
        self.mul(self)
    }
}

/// Complete IoU between the box decoded from distances `(l, t, r, b)` around
/// a cell center and a ground-truth box, both in grid units. The aspect-ratio
/// penalty coefficient is differentiated through (no detaching), so the value
/// and gradient agree with finite differences.
fn ciou_dual<T: Scalar>(dist: [T; 4], gt: [T; 4], cx: T, cy: T) -> Dual4<T> {
    let eps = real::<T>(1e-7);
    let l = Dual4::var(dist[0], 0);
    let t = Dual4::var(dist[1], 1);
    let r = Dual4::var(dist[2], 2);
    let b = Dual4::var(dist[3], 3);
    let cx = Dual4::k(cx);
    let cy = Dual4::k(cy);
    let x1 = cx.sub(l);
    let y1 = cy.sub(t);
    let x2 = cx.add(r);
    let y2 = cy.add(b);
    let (gx1, gy1, gx2, gy2) = (
        Dual4::k(gt[0]),
        Dual4::k(gt[1]),
        Dual4::k(gt[2]),
        Dual4::k(gt[3]),
    );
    let zero = Dual4::k(T::zero());
    let w = x2.sub(x1);
    let h = y2.sub(y1);
    let gw = gx2.sub(gx1);
    let gh = gy2.sub(gy1);

    let iw = x2.min(gx2).sub(x1.max(gx1)).max(zero);
    let ih = y2.min(gy2).sub(y1.max(gy1)).max(zero);
    let inter = iw.mul(ih);
    let union = w.mul(h).add(gw.mul(gh)).sub(inter).add(Dual4::k(eps));
    let iou = inter.div(union);

    let pcx = x1.add(x2).mul(Dual4::k(real(0.5)));
    let pcy = y1.add(y2).mul(Dual4::k(real(0.5)));
    let gcx = gx1.add(gx2).mul(Dual4::k(real(0.5)));
    let gcy = gy1.add(gy2).mul(Dual4::k(real(0.5)));
    let rho2 = pcx.sub(gcx).sqr().add(pcy.sub(gcy).sqr());

    let cw = x2.max(gx2).sub(x1.min(gx1));
    let ch = y2.max(gy2).sub(y1.min(gy1));
    let c2 = cw.sqr().add(ch.sqr()).add(Dual4::k(eps));

    let four_over_pi2 = real::<T>(4.0 / (std::f64::consts::PI * std::f64::consts::PI));
    let g_ratio = Dual4::k((gt[2] - gt[0]) / (gt[3] - gt[1] + eps)).atan();
    let p_ratio = w.div(h.add(Dual4::k(eps))).atan();
    let v = g_ratio.sub(p_ratio).sqr().mul(Dual4::k(four_over_pi2));
    let one = Dual4::k(T::one());
    let alpha = v.div(one.sub(iou).add(v).add(Dual4::k(eps)));

    iou.sub(rho2.div(c2)).sub(alpha.mul(v))
}

// ---------------------------------------------------------------------------
// Composed detection loss
// ---------------------------------------------------------------------------

use crate::tensor::tape::{Tape, ValueId};
use loss_ops::{BceData, CiouData, DflData};

/// Unweighted loss parts plus the exact weighted total.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown<T> {
    pub box_loss: T,
    pub cls_loss: T,
    pub dfl_loss: T,
    pub weights: LossWeights<T>,
}

impl<T: Scalar> LossBreakdown<T> {
    pub fn total(&self) -> T {
        self.weights.box_w * self.box_loss
            + self.weights.cls_w * self.cls_loss
            + self.weights.dfl_w * self.dfl_loss
    }
}

/// Record box/class/DFL losses for all scales on the tape and return the
/// weighted total plus the numeric breakdown.
///
/// `box_ids`/`cls_ids` are the per-scale head outputs aligned with
/// `assignment.scales`. Sums over cells are normalized by the total number of
/// assigned cells across scales.
pub fn detection_loss<T: Scalar>(
    tape: &mut Tape<T>,
    box_ids: &[ValueId],
    cls_ids: &[ValueId],
    assignment: &Assignment<T>,
    reg_max: usize,
    weights: LossWeights<T>,
) -> Result<(ValueId, LossBreakdown<T>)> {
    if box_ids.len() != assignment.scales.len() || cls_ids.len() != assignment.scales.len() {
        return Err(Error::InvalidArg(
            "head outputs do not match assignment scales".into(),
        ));
    }
    let norm = T::one() / real::<T>(assignment.num_assigned.max(1) as f64);
    let mut box_parts = Vec::new();
    let mut cls_parts = Vec::new();
    let mut dfl_parts = Vec::new();
    for (si, scale) in assignment.scales.iter().enumerate() {
        box_parts.push(tape.ciou_loss(
            box_ids[si],
            CiouData { cells: scale.cells.clone(), reg_max, norm },
        )?);
        dfl_parts.push(tape.dfl_loss(
            box_ids[si],
            DflData { cells: scale.cells.clone(), reg_max, norm },
        )?);
        cls_parts.push(tape.bce_loss(
            cls_ids[si],
            BceData { target: scale.cls_target.clone(), norm },
        )?);
    }
    let box_l = tape.add_n(&box_parts)?;
    let cls_l = tape.add_n(&cls_parts)?;
    let dfl_l = tape.add_n(&dfl_parts)?;
    let wb = tape.scale(box_l, weights.box_w);
    let wc = tape.scale(cls_l, weights.cls_w);
    let wd = tape.scale(dfl_l, weights.dfl_w);
    let total = tape.add_n(&[wb, wc, wd])?;
    let breakdown = LossBreakdown {
        box_loss: tape.value(box_l).scalar_value(),
        cls_loss: tape.value(cls_l).scalar_value(),
        dfl_loss: tape.value(dfl_l).scalar_value(),
        weights,
    };
    Ok((total, breakdown))
}

/// Decode raw head outputs into per-image detection lists (no suppression).
pub fn decode_detections<T: Scalar>(
    box_maps: &[&FeatureMap<T>],
    cls_maps: &[&FeatureMap<T>],
    strides: &[usize],
    resolution: (usize, usize),
    conf_thr: f64,
) -> Vec<Vec<DetectionBox>> {
    let batch = box_maps.first().map(|m| m.batch()).unwrap_or(0);
    let (img_h, img_w) = (resolution.0 as f64, resolution.1 as f64);
    let mut out = vec![Vec::new(); batch];
    for (si, (&bm, &cm)) in box_maps.iter().zip(cls_maps).enumerate() {
        let reg_max = bm.channels() / 4;
        let nc = cm.channels();
        let stride = strides[si] as f64;
        let [n, _, gh, gw] = bm.shape();
        for ni in 0..n {
            for y in 0..gh {
                for x in 0..gw {
                    let mut best_c = 0;
                    let mut best_s = f64::NEG_INFINITY;
                    for c in 0..nc {
                        let s = <f64 as num_traits::NumCast>::from(cm.at(ni, c, y, x)).unwrap();
                        if s > best_s {
                            best_s = s;
                            best_c = c;
                        }
                    }
                    let conf = 1.0 / (1.0 + (-best_s).exp());
                    if conf < conf_thr {
                        continue;
                    }
                    let mut dist = [0.0f64; 4];
                    for (side, d) in dist.iter_mut().enumerate() {
                        let logits: Vec<T> = (0..reg_max)
                            .map(|k| bm.at(ni, side * reg_max + k, y, x))
                            .collect();
                        *d = <f64 as num_traits::NumCast>::from(dfl_expect(&logits)).unwrap();
                    }
                    let px = (x as f64 + 0.5) * stride;
                    let py = (y as f64 + 0.5) * stride;
                    let x1 = ((px - dist[0] * stride) / img_w).clamp(0.0, 1.0);
                    let y1 = ((py - dist[1] * stride) / img_h).clamp(0.0, 1.0);
                    let x2 = ((px + dist[2] * stride) / img_w).clamp(0.0, 1.0);
                    let y2 = ((py + dist[3] * stride) / img_h).clamp(0.0, 1.0);
                    out[ni].push(DetectionBox::new(
                        best_c,
                        conf,
                        (x1 + x2) / 2.0,
                        (y1 + y2) / 2.0,
                        x2 - x1,
                        y2 - y1,
                    ));
                }
            }
        }
    }
    out
}
