//! Reverse-mode gradient tape.
//!
//! Ops append nodes in execution order, which is already a topological order,
//! so the backward pass is a single reverse sweep accumulating each value's
//! gradient from all of its consumers. A tape is confined to one thread;
//! values are immutable once recorded.

use super::ops::{self, Activation, EltwiseOp};
use super::{FeatureMap, Scalar};
use crate::attention::{self, SimAmConfig};
use crate::detection::loss_ops::{BceData, CiouData, DflData};
use crate::error::{Error, Result};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ValueId(pub(crate) usize);

enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        x: ValueId,
        w: ValueId,
        bias: Option<ValueId>,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        mean: Vec<T>,
        var: Vec<T>,
        eps: T,
        through_stats: bool,
    },
    Eltwise {
        a: ValueId,
        b: ValueId,
        op: EltwiseOp,
    },
    Act {
        x: ValueId,
        kind: Activation,
    },
    MaxPool {
        x: ValueId,
        argmax: Vec<u32>,
    },
    Upsample {
        x: ValueId,
        factor: usize,
    },
    Concat {
        xs: Vec<ValueId>,
    },
    SliceChannels {
        x: ValueId,
        start: usize,
    },
    Reshape {
        x: ValueId,
    },
    TransposeLast2 {
        x: ValueId,
    },
    Matmul {
        a: ValueId,
        b: ValueId,
    },
    SoftmaxLast {
        x: ValueId,
    },
    SumAll {
        x: ValueId,
    },
    Scale {
        x: ValueId,
        factor: T,
    },
    AddN {
        xs: Vec<ValueId>,
    },
    SimamRefine {
        x: ValueId,
        cfg: SimAmConfig<T>,
    },
    BceLoss {
        x: ValueId,
        data: BceData<T>,
    },
    DflLoss {
        x: ValueId,
        data: DflData<T>,
    },
    CiouLoss {
        x: ValueId,
        data: CiouData<T>,
        /// d(loss)/d(decoded side distance), saved by the forward pass.
        saved: Vec<[T; 4]>,
    },
}

struct Node<T: Scalar> {
    value: FeatureMap<T>,
    op: Op<T>,
}

/// Record of parameter leaves registered during one forward pass, in
/// registration order. The optimizer pairs these with [`Gradients`].
#[derive(Default)]
pub struct ParamTrace {
    pub entries: Vec<(String, ValueId)>,
}

impl ParamTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, name: &str, id: ValueId) {
        self.entries.push((name.to_string(), id));
    }
}

/// Gradients for every tape value, indexed by [`ValueId`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<FeatureMap<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ValueId) -> Option<&FeatureMap<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: ValueId) -> Option<FeatureMap<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: FeatureMap<T>, op: Op<T>) -> ValueId {
        debug_assert!(value.all_finite(), "non-finite value recorded on tape");
        self.nodes.push(Node { value, op });
        ValueId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: ValueId) -> &FeatureMap<T> {
        &self.nodes[id.0].value
    }

    pub fn check(&self, id: ValueId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::UnknownValue(id.0));
        }
        Ok(())
    }

    pub fn leaf(&mut self, value: FeatureMap<T>) -> ValueId {
        self.push(value, Op::Leaf)
    }

    pub fn conv2d(
        &mut self,
        x: ValueId,
        w: ValueId,
        bias: Option<ValueId>,
        stride: usize,
        padding: usize,
    ) -> Result<ValueId> {
        let out = ops::conv2d(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        Ok(self.push(out, Op::Conv2d { x, w, bias, stride, padding }))
    }

    /// Batch norm over given per-channel statistics.
    ///
    /// In training mode pass the batch statistics and `through_stats = true`;
    /// in inference mode pass frozen running statistics with
    /// `through_stats = false`.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        mean: Vec<T>,
        var: Vec<T>,
        eps: T,
        through_stats: bool,
    ) -> Result<ValueId> {
        let c = self.value(x).channels();
        if mean.len() != c || var.len() != c || self.value(gamma).numel() != c {
            return Err(Error::DimMismatch {
                axis: "channels",
                expected: c,
                got: mean.len(),
                context: "batch norm statistics",
            });
        }
        let out = ops::batch_norm_apply(
            self.value(x),
            &mean,
            &var,
            self.value(gamma),
            self.value(beta),
            eps,
        );
        Ok(self.push(
            out,
            Op::BatchNorm { x, gamma, beta, mean, var, eps, through_stats },
        ))
    }

    pub fn eltwise(&mut self, a: ValueId, b: ValueId, op: EltwiseOp) -> Result<ValueId> {
        let out = ops::eltwise(self.value(a), self.value(b), op)?;
        Ok(self.push(out, Op::Eltwise { a, b, op }))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.eltwise(a, b, EltwiseOp::Add)
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.eltwise(a, b, EltwiseOp::Mul)
    }

    pub fn activation(&mut self, x: ValueId, kind: Activation) -> ValueId {
        let out = ops::apply_activation(self.value(x), kind);
        self.push(out, Op::Act { x, kind })
    }

    pub fn maxpool2d(&mut self, x: ValueId, k: usize, stride: usize, padding: usize) -> Result<ValueId> {
        let (out, argmax) = ops::maxpool2d(self.value(x), k, stride, padding)?;
        Ok(self.push(out, Op::MaxPool { x, argmax }))
    }

    pub fn upsample_nearest(&mut self, x: ValueId, factor: usize) -> Result<ValueId> {
        let out = ops::upsample_nearest(self.value(x), factor)?;
        Ok(self.push(out, Op::Upsample { x, factor }))
    }

    pub fn concat_channels(&mut self, xs: &[ValueId]) -> Result<ValueId> {
        let maps: Vec<&FeatureMap<T>> = xs.iter().map(|&id| self.value(id)).collect();
        let out = ops::concat_channels(&maps)?;
        Ok(self.push(out, Op::Concat { xs: xs.to_vec() }))
    }

    pub fn slice_channels(&mut self, x: ValueId, start: usize, len: usize) -> Result<ValueId> {
        let out = ops::slice_channels(self.value(x), start, len)?;
        Ok(self.push(out, Op::SliceChannels { x, start }))
    }

    pub fn reshape(&mut self, x: ValueId, shape: [usize; 4]) -> Result<ValueId> {
        let v = self.value(x);
        if shape.iter().product::<usize>() != v.numel() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {:?} changes element count",
                v.shape(),
                shape
            )));
        }
        let out = FeatureMap::new(shape, v.data().to_vec())?;
        Ok(self.push(out, Op::Reshape { x }))
    }

    pub fn transpose_last2(&mut self, x: ValueId) -> ValueId {
        let out = ops::transpose_last2(self.value(x));
        self.push(out, Op::TransposeLast2 { x })
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Matmul { a, b }))
    }

    pub fn softmax_last(&mut self, x: ValueId) -> ValueId {
        let out = ops::softmax_last(self.value(x));
        self.push(out, Op::SoftmaxLast { x })
    }

    pub fn sum_all(&mut self, x: ValueId) -> ValueId {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(FeatureMap::scalar(s), Op::SumAll { x })
    }

    pub fn scale(&mut self, x: ValueId, factor: T) -> ValueId {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale { x, factor })
    }

    pub fn add_n(&mut self, xs: &[ValueId]) -> Result<ValueId> {
        if xs.is_empty() {
            return Err(Error::InvalidArg("add_n of zero inputs".into()));
        }
        let mut out = self.value(xs[0]).clone();
        for &x in &xs[1..] {
            self.value(xs[0]).same_shape(self.value(x), "add_n")?;
            for (a, b) in out.data_mut().iter_mut().zip(self.value(x).data()) {
                *a += *b;
            }
        }
        Ok(self.push(out, Op::AddN { xs: xs.to_vec() }))
    }

    pub fn simam_refine(&mut self, x: ValueId, cfg: SimAmConfig<T>) -> Result<ValueId> {
        let out = attention::simam_refine(self.value(x), &cfg)?;
        Ok(self.push(out, Op::SimamRefine { x, cfg }))
    }

    /// Binary cross-entropy with logits, summed and scaled by `data.norm`.
    pub fn bce_loss(&mut self, x: ValueId, data: BceData<T>) -> Result<ValueId> {
        let loss = data.forward(self.value(x))?;
        Ok(self.push(FeatureMap::scalar(loss), Op::BceLoss { x, data }))
    }

    /// Distribution focal loss over assigned cells.
    pub fn dfl_loss(&mut self, x: ValueId, data: DflData<T>) -> Result<ValueId> {
        let loss = data.forward(self.value(x))?;
        Ok(self.push(FeatureMap::scalar(loss), Op::DflLoss { x, data }))
    }

    /// Complete-IoU box loss over assigned cells (decodes the bin
    /// distributions by expectation internally).
    pub fn ciou_loss(&mut self, x: ValueId, data: CiouData<T>) -> Result<ValueId> {
        let (loss, saved) = data.forward(self.value(x))?;
        Ok(self.push(FeatureMap::scalar(loss), Op::CiouLoss { x, data, saved }))
    }

    /// Reverse sweep from a scalar loss. Returns gradients for every value
    /// reachable from the loss, keyed by [`ValueId`].
    pub fn backward(&self, loss: ValueId) -> Result<Gradients<T>> {
        self.check(loss)?;
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.numel()));
        }
        let mut grads: Vec<Option<FeatureMap<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(FeatureMap::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Conv2d { x, w, bias, stride, padding } => {
                    let (dx, dw, db) = ops::conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        &g,
                        *stride,
                        *padding,
                        bias.is_some(),
                    );
                    acc(&mut grads[x.0], dx);
                    acc(&mut grads[w.0], dw);
                    if let (Some(b), Some(db)) = (bias, db) {
                        acc(&mut grads[b.0], db);
                    }
                }
                Op::BatchNorm { x, gamma, beta, mean, var, eps, through_stats } => {
                    let (dx, dgamma, dbeta) = ops::batch_norm_backward(
                        self.value(*x),
                        mean,
                        var,
                        self.value(*gamma),
                        *eps,
                        &g,
                        *through_stats,
                    );
                    acc(&mut grads[x.0], dx);
                    acc(&mut grads[gamma.0], dgamma);
                    acc(&mut grads[beta.0], dbeta);
                }
                Op::Eltwise { a, b, op } => {
                    let bshape = self.value(*b).shape();
                    match op {
                        EltwiseOp::Add => {
                            acc(&mut grads[a.0], g.clone());
                            acc(&mut grads[b.0], ops::reduce_to_shape(&g, bshape));
                        }
                        EltwiseOp::Mul => {
                            let da = ops::eltwise(&g, self.value(*b), EltwiseOp::Mul)
                                .expect("shapes validated at record time");
                            acc(&mut grads[a.0], da);
                            let ga = ops::eltwise(&g, self.value(*a), EltwiseOp::Mul)
                                .expect("shapes validated at record time");
                            acc(&mut grads[b.0], ops::reduce_to_shape(&ga, bshape));
                        }
                    }
                }
                Op::Act { x, kind } => {
                    let xv = self.value(*x);
                    let mut dx = g.clone();
                    for (d, &xi) in dx.data_mut().iter_mut().zip(xv.data()) {
                        *d *= ops::activation_derivative(xi, *kind);
                    }
                    acc(&mut grads[x.0], dx);
                }
                Op::MaxPool { x, argmax } => {
                    let dx = ops::maxpool2d_backward(self.value(*x).shape(), argmax, &g);
                    acc(&mut grads[x.0], dx);
                }
                Op::Upsample { x, factor } => {
                    let dx = ops::upsample_nearest_backward(self.value(*x).shape(), *factor, &g);
                    acc(&mut grads[x.0], dx);
                }
                Op::Concat { xs } => {
                    let mut start = 0;
                    for &xid in xs {
                        let c = self.value(xid).channels();
                        let dx = ops::slice_channels(&g, start, c)
                            .expect("concat slices validated at record time");
                        acc(&mut grads[xid.0], dx);
                        start += c;
                    }
                }
                Op::SliceChannels { x, start } => {
                    let xv = self.value(*x);
                    let mut dx = FeatureMap::zeros(xv.shape());
                    for n in 0..g.batch() {
                        for c in 0..g.channels() {
                            dx.channel_mut(n, start + c).copy_from_slice(g.channel(n, c));
                        }
                    }
                    acc(&mut grads[x.0], dx);
                }
                Op::Reshape { x } => {
                    let dx = FeatureMap::new(self.value(*x).shape(), g.data().to_vec())
                        .expect("reshape preserves element count");
                    acc(&mut grads[x.0], dx);
                }
                Op::TransposeLast2 { x } => {
                    acc(&mut grads[x.0], ops::transpose_last2(&g));
                }
                Op::Matmul { a, b } => {
                    let bt = ops::transpose_last2(self.value(*b));
                    let da = ops::matmul(&g, &bt).expect("shapes validated at record time");
                    acc(&mut grads[a.0], da);
                    let at = ops::transpose_last2(self.value(*a));
                    let db = ops::matmul(&at, &g).expect("shapes validated at record time");
                    acc(&mut grads[b.0], db);
                }
                Op::SoftmaxLast { x } => {
                    let dx = ops::softmax_last_backward(&self.nodes[i].value, &g);
                    acc(&mut grads[x.0], dx);
                }
                Op::SumAll { x } => {
                    let dx = FeatureMap::full(self.value(*x).shape(), g.scalar_value());
                    acc(&mut grads[x.0], dx);
                }
                Op::Scale { x, factor } => {
                    acc(&mut grads[x.0], g.map(|v| v * *factor));
                }
                Op::AddN { xs } => {
                    for &xid in xs {
                        acc(&mut grads[xid.0], g.clone());
                    }
                }
                Op::SimamRefine { x, cfg } => {
                    let dx = attention::simam_refine_backward(self.value(*x), cfg, &g);
                    acc(&mut grads[x.0], dx);
                }
                Op::BceLoss { x, data } => {
                    let dx = data.backward(self.value(*x), g.scalar_value());
                    acc(&mut grads[x.0], dx);
                }
                Op::DflLoss { x, data } => {
                    let dx = data.backward(self.value(*x), g.scalar_value());
                    acc(&mut grads[x.0], dx);
                }
                Op::CiouLoss { x, data, saved } => {
                    let dx = data.backward(self.value(*x), saved, g.scalar_value());
                    acc(&mut grads[x.0], dx);
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn acc<T: Scalar>(slot: &mut Option<FeatureMap<T>>, delta: FeatureMap<T>) {
    match slot {
        Some(g) => {
            debug_assert_eq!(g.shape(), delta.shape(), "gradient shape drift");
            for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += *b;
            }
        }
        None => *slot = Some(delta),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::real;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(FeatureMap::from_fn([1, 2, 2, 2], |_, c, h, w| {
            (c + h + w) as f64
        }));
        let loss = tape.sum_all(x);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn quadratic_gradient_is_two_x() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(FeatureMap::from_fn([1, 1, 2, 3], |_, _, h, w| {
            (h * 3 + w) as f64 - 2.0
        }));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();
        let gx = grads.get(x).unwrap();
        for (g, &v) in gx.data().iter().zip(tape.value(x).data()) {
            assert!((g - 2.0 * v).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_nonscalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(FeatureMap::zeros([1, 1, 2, 2]));
        assert!(matches!(
            tape.backward(x),
            Err(crate::error::Error::NonScalarLoss(4))
        ));
    }

    #[test]
    fn value_not_on_tape_is_reported() {
        let tape = Tape::<f64>::new();
        assert!(matches!(
            tape.backward(ValueId(3)),
            Err(crate::error::Error::UnknownValue(3))
        ));
    }

    #[test]
    fn gradient_fans_in_from_multiple_consumers() {
        // loss = sum(x*x) + sum(x) => dx = 2x + 1
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(FeatureMap::from_fn([1, 1, 1, 4], |_, _, _, w| w as f64));
        let sq = tape.mul(x, x).unwrap();
        let l1 = tape.sum_all(sq);
        let l2 = tape.sum_all(x);
        let loss = tape.add_n(&[l1, l2]).unwrap();
        let grads = tape.backward(loss).unwrap();
        for (g, &v) in grads.get(x).unwrap().data().iter().zip(tape.value(x).data()) {
            assert!((g - (2.0 * v + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn scale_and_concat_backward() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(FeatureMap::full([1, 1, 2, 2], 1.0));
        let b = tape.leaf(FeatureMap::full([1, 2, 2, 2], 2.0));
        let cat = tape.concat_channels(&[a, b]).unwrap();
        let scaled = tape.scale(cat, real(3.0));
        let loss = tape.sum_all(scaled);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(a).unwrap().data().iter().all(|&v| v == 3.0));
        assert!(grads.get(b).unwrap().data().iter().all(|&v| v == 3.0));
    }
}
