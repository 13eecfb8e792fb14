//! Detector building blocks: ConvBNAct, CSP bottleneck stacks (C3K2), fast
//! spatial pyramid pooling (SPPF), the split-transform-merge attention block
//! (C2PSA) and the three-scale anchor-free detect head.
//!
//! Internals the architecture figure leaves open are pinned here once and
//! treated as the kit's reference definitions: batch norm uses eps 1e-3 and
//! momentum 0.03, SiLU is the activation throughout, bottlenecks are pairs of
//! 3x3 convolutions with a residual, and the PSA unit is plain multi-head
//! self-attention over the flattened spatial grid followed by a two-layer
//! feed-forward, both with residuals.

use std::sync::Mutex;

use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::tensor::ops::{batch_stats, Activation};
use crate::tensor::tape::{ParamTrace, Tape, ValueId};
use crate::tensor::{real, FeatureMap, Scalar};

pub const BN_EPS: f64 = 1e-3;
pub const BN_MOMENTUM: f64 = 0.03;
/// Class-logit bias prior: sigmoid(-4.595) ~ 0.01 positive rate at init.
pub const CLS_BIAS_INIT: f64 = -4.595;
pub const BOX_BIAS_INIT: f64 = 1.0;

fn he_normal<T: Scalar>(
    shape: [usize; 4],
    fan_in: usize,
    rng: &mut StreamRng,
) -> FeatureMap<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    FeatureMap::from_fn(shape, |_, _, _, _| real::<T>(rng.normal() * std))
}

/// Plain convolution layer; weights `(Cout, Cin, k, k)`, optional bias.
pub struct Conv2dLayer<T> {
    pub name: String,
    pub weight: FeatureMap<T>,
    pub bias: Option<FeatureMap<T>>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2dLayer<T> {
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        with_bias: bool,
        rng: &mut StreamRng,
    ) -> Self {
        let weight = he_normal([cout, cin, k, k], cin * k * k, rng);
        let bias = with_bias.then(|| FeatureMap::per_channel(vec![T::zero(); cout]));
        Conv2dLayer {
            name: name.to_string(),
            weight,
            bias,
            stride,
            padding: k / 2,
        }
    }

    pub fn set_bias_value(&mut self, v: f64) {
        if let Some(b) = &mut self.bias {
            for x in b.data_mut() {
                *x = real(v);
            }
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, tape: &mut Tape<T>, trace: &mut ParamTrace, x: ValueId) -> Result<ValueId> {
        let w = tape.leaf(self.weight.clone());
        trace.record(&format!("{}.weight", self.name), w);
        let b = self.bias.as_ref().map(|b| {
            let id = tape.leaf(b.clone());
            trace.record(&format!("{}.bias", self.name), id);
            id
        });
        tape.conv2d(x, w, b, self.stride, self.padding)
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(String, &FeatureMap<T>)) {
        f(format!("{}.weight", self.name), &self.weight);
        if let Some(b) = &self.bias {
            f(format!("{}.bias", self.name), b);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut FeatureMap<T>)) {
        f(format!("{}.weight", self.name), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(format!("{}.bias", self.name), b);
        }
    }

    pub fn out_shape(&self, input: [usize; 4]) -> [usize; 4] {
        let [n, _, h, w] = input;
        let [cout, _, kh, kw] = self.weight.shape();
        [
            n,
            cout,
            (h + 2 * self.padding - kh) / self.stride + 1,
            (w + 2 * self.padding - kw) / self.stride + 1,
        ]
    }

    pub fn macs(&self, input: [usize; 4]) -> u64 {
        let [cout, cin, kh, kw] = self.weight.shape();
        let out = self.out_shape(input);
        (cout * cin * kh * kw) as u64 * (out[2] * out[3]) as u64
    }
}

struct BnRunning<T> {
    mean: Vec<T>,
    var: Vec<T>,
    updates: u64,
}

/// Per-channel batch norm with tracked running statistics. Training mode
/// normalizes with batch statistics and folds them into the running buffers;
/// inference mode uses the frozen buffers.
pub struct BatchNorm2d<T> {
    pub name: String,
    pub gamma: FeatureMap<T>,
    pub beta: FeatureMap<T>,
    running: Mutex<BnRunning<T>>,
    pub eps: T,
    pub momentum: T,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm2d {
            name: name.to_string(),
            gamma: FeatureMap::per_channel(vec![T::one(); channels]),
            beta: FeatureMap::per_channel(vec![T::zero(); channels]),
            running: Mutex::new(BnRunning {
                mean: vec![T::zero(); channels],
                var: vec![T::one(); channels],
                updates: 0,
            }),
            eps: real(BN_EPS),
            momentum: real(BN_MOMENTUM),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        trace: &mut ParamTrace,
        x: ValueId,
        train: bool,
    ) -> Result<ValueId> {
        let g = tape.leaf(self.gamma.clone());
        trace.record(&format!("{}.gamma", self.name), g);
        let b = tape.leaf(self.beta.clone());
        trace.record(&format!("{}.beta", self.name), b);
        let (mean, var) = if train {
            let (m, v) = batch_stats(tape.value(x));
            let mut run = self.running.lock().unwrap();
            run.updates += 1;
            // warmup schedule: running average of everything seen so far
            // until 1/t decays to the pinned EMA momentum
            let eff = self.momentum.max(T::one() / real(run.updates as f64));
            let om = T::one() - eff;
            for (r, &bm) in run.mean.iter_mut().zip(&m) {
                *r = *r * om + bm * eff;
            }
            for (r, &bv) in run.var.iter_mut().zip(&v) {
                *r = *r * om + bv * eff;
            }
            (m, v)
        } else {
            let run = self.running.lock().unwrap();
            (run.mean.clone(), run.var.clone())
        };
        tape.batch_norm(x, g, b, mean, var, self.eps, train)
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(String, &FeatureMap<T>)) {
        f(format!("{}.gamma", self.name), &self.gamma);
        f(format!("{}.beta", self.name), &self.beta);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut FeatureMap<T>)) {
        f(format!("{}.gamma", self.name), &mut self.gamma);
        f(format!("{}.beta", self.name), &mut self.beta);
    }

    pub fn visit_buffers(&self, f: &mut dyn FnMut(String, Vec<T>)) {
        let run = self.running.lock().unwrap();
        f(format!("{}.running_mean", self.name), run.mean.clone());
        f(format!("{}.running_var", self.name), run.var.clone());
    }

    /// Install restored statistics; they count as fully warmed up.
    pub fn set_buffers(&self, mean: Vec<T>, var: Vec<T>) {
        let mut run = self.running.lock().unwrap();
        run.mean = mean;
        run.var = var;
        run.updates = run.updates.max(1_000_000);
    }

    /// Restart the warmup schedule; the next training forwards re-estimate
    /// the running statistics from scratch (used for recalibration).
    pub fn reset_running(&self) {
        self.running.lock().unwrap().updates = 0;
    }

    pub fn buffer_names(&self) -> (String, String) {
        (
            format!("{}.running_mean", self.name),
            format!("{}.running_var", self.name),
        )
    }
}

/// Convolution -> batch norm -> activation (SiLU unless overridden).
pub struct ConvBnAct<T> {
    pub conv: Conv2dLayer<T>,
    pub bn: BatchNorm2d<T>,
    pub act: Activation,
}

impl<T: Scalar> ConvBnAct<T> {
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut StreamRng,
    ) -> Self {
        ConvBnAct {
            conv: Conv2dLayer::new(&format!("{name}.conv"), cin, cout, k, stride, false, rng),
            bn: BatchNorm2d::new(&format!("{name}.bn"), cout),
            act: Activation::Silu,
        }
    }

    pub fn no_act(mut self) -> Self {
        self.act = Activation::Identity;
        self
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        trace: &mut ParamTrace,
        x: ValueId,
        train: bool,
    ) -> Result<ValueId> {
        let y = self.conv.forward(tape, trace, x)?;
        let y = self.bn.forward(tape, trace, y, train)?;
        Ok(tape.activation(y, self.act))
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(String, &FeatureMap<T>)) {
        self.conv.visit_params(f);
        self.bn.visit_params(f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut FeatureMap<T>)) {
        self.conv.visit_params_mut(f);
        self.bn.visit_params_mut(f);
    }

    pub fn visit_bns(&self, f: &mut dyn FnMut(&BatchNorm2d<T>)) {
        f(&self.bn);
    }

    pub fn out_shape(&self, input: [usize; 4]) -> [usize; 4] {
        self.conv.out_shape(input)
    }

    pub fn macs(&self, input: [usize; 4]) -> u64 {
        self.conv.macs(input)
    }
}

/// Two 3x3 conv-bn-act units with a residual connection.
pub struct Bottleneck<T> {
    pub cv1: ConvBnAct<T>,
    pub cv2: ConvBnAct<T>,
}

impl<T: Scalar> Bottleneck<T> {
    pub fn new(name: &str, channels: usize, rng: &mut StreamRng) -> Self {
        Bottleneck {
            cv1: ConvBnAct::new(&format!("{name}.cv1"), channels, channels, 3, 1, rng),
            cv2: ConvBnAct::new(&format!("{name}.cv2"), channels, channels, 3, 1, rng),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        trace: &mut ParamTrace,
        x: ValueId,
        train: bool,
    ) -> Result<ValueId> {
        let y = self.cv1.forward(tape, trace, x, train)?;
        let y = self.cv2.forward(tape, trace, y, train)?;
        tape.add(x, y)
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(String, &FeatureMap<T>)) {
        self.cv1.visit_params(f);
        self.cv2.visit_params(f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut FeatureMap<T>)) {
        self.cv1.visit_params_mut(f);
        self.cv2.visit_params_mut(f);
    }

    pub fn visit_bns(&self, f: &mut dyn FnMut(&BatchNorm2d<T>)) {
        self.cv1.visit_bns(f);
        self.cv2.visit_bns(f);
    }

    pub fn macs(&self, input: [usize; 4]) -> u64 {
        self.cv1.macs(input) + self.cv2.macs(self.cv1.out_shape(input))
    }
}

/// CSP split: a 1x1 projection, one passthrough half, one half through
/// `repeat` bottlenecks, concat, 1x1 fuse. On odd hidden widths the extra
/// channel goes to the bottleneck path.
pub struct C3k2Block<T> {
    pub cv1: ConvBnAct<T>,
    pub bottlenecks: Vec<Bottleneck<T>>,
    pub cv2: ConvBnAct<T>,
    pub split: usize,
    pub out_channels: usize,
}

impl<T: Scalar> C3k2Block<T> {
    pub fn new(name: &str, cin: usize, cout: usize, repeat: usize, rng: &mut StreamRng) -> Self {
        let hidden = cout;
        let split = hidden / 2;
        let branch = hidden - split;
        let cv1 = ConvBnAct::new(&format!("{name}.cv1"), cin, hidden, 1, 1, rng);
        let bottlenecks = (0..repeat)
            .map(|i| Bottleneck::new(&format!("{name}.m{i}"), branch, rng))
            .collect();
        let cv2 = ConvBnAct::new(&format!("{name}.cv2"), hidden, cout, 1, 1, rng);
        C3k2Block { cv1, bottlenecks, cv2, split, out_channels: cout }
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        trace: &mut ParamTrace,
        x: ValueId,
        train: bool,
    ) -> Result<ValueId> {
        let y = self.cv1.forward(tape, trace, x, train)?;
        let hidden = tape.value(y).channels();
        let a = tape.slice_channels(y, 0, self.split)?;
        let mut b = tape.slice_channels(y, self.split, hidden - self.split)?;
        for m in &self.bottlenecks {
            b = m.forward(tape, trace, b, train)?;
        }
        let cat = tape.concat_channels(&[a, b])?;
        self.cv2.forward(tape, trace, cat, train)
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(String, &FeatureMap<T>)) {
        self.cv1.visit_params(f);
        for m in &self.bottlenecks {
            m.visit_params(f);
        }
        self.cv2.visit_params(f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut FeatureMap<T>)) {
        self.cv1.visit_params_mut(f);
        for m in &mut self.bottlenecks {
            m.visit_params_mut(f);
        }
        self.cv2.visit_params_mut(f);
    }

    pub fn visit_bns(&self, f: &mut dyn FnMut(&BatchNorm2d<T>)) {
        self.cv1.visit_bns(f);
        for m in &self.bottlenecks {
            m.visit_bns(f);
        }
        self.cv2.visit_bns(f);
    }

    pub fn out_shape(&self, input: [usize; 4]) -> [usize; 4] {
        [input[0], self.out_channels, input[2], input[3]]
    }

    pub fn macs(&self, input: [usize; 4]) -> u64 {
        let mid = self.cv1.out_shape(input);
        let branch_shape = [mid[0], mid[1] - self.split, mid[2], mid[3]];
        let mut total = self.cv1.macs(input) + self.cv2.macs(mid);
        for m in &self.bottlenecks {
            total += m.macs(branch_shape);
        }
        total
    }
}

/// 1x1 reduce, three cascaded stride-1 k=5 max pools, concat of the four
/// maps, 1x1 fuse. Spatial size preserved.
pub struct SppfBlock<T> {
    pub cv1: ConvBnAct<T>,
    pub cv2: ConvBnAct<T>,
    pub pool_k: usize,
    pub out_channels: usize,
}

impl<T: Scalar> SppfBlock<T> {
    pub fn new(name: &str, cin: usize, cout: usize, rng: &mut StreamRng) -> Self {
        let hidden = (cin / 2).max(1);
        SppfBlock {
            cv1: ConvBnAct::new(&format!("{name}.cv1"), cin, hidden, 1, 1, rng),
            cv2: ConvBnAct::new(&format!("{name}.cv2"), hidden * 4, cout, 1, 1, rng),
            pool_k: 5,
            out_channels: cout,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        trace: &mut ParamTrace,
        x: ValueId,
        train: bool,
    ) -> Result<ValueId> {
        let y = self.cv1.forward(tape, trace, x, train)?;
        let p1 = tape.maxpool2d(y, self.pool_k, 1, self.pool_k / 2)?;
        let p2 = tape.maxpool2d(p1, self.pool_k, 1, self.pool_k / 2)?;
        let p3 = tape.maxpool2d(p2, self.pool_k, 1, self.pool_k / 2)?;
        let cat = tape.concat_channels(&[y, p1, p2, p3])?;
        self.cv2.forward(tape, trace, cat, train)
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(String, &FeatureMap<T>)) {
        self.cv1.visit_params(f);
        self.cv2.visit_params(f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut FeatureMap<T>)) {
        self.cv1.visit_params_mut(f);
        self.cv2.visit_params_mut(f);
    }

    pub fn visit_bns(&self, f: &mut dyn FnMut(&BatchNorm2d<T>)) {
        self.cv1.visit_bns(f);
        self.cv2.visit_bns(f);
    }

    pub fn out_shape(&self, input: [usize; 4]) -> [usize; 4] {
        [input[0], self.out_channels, input[2], input[3]]
    }

    pub fn macs(&self, input: [usize; 4]) -> u64 {
        let mid = self.cv1.out_shape(input);
        let cat = [mid[0], mid[1] * 4, mid[2], mid[3]];
        self.cv1.macs(input) + self.cv2.macs(cat)
    }
}

/// Multi-head self-attention over the flattened H*W grid.
///
/// Channels must divide evenly into `heads`. Scores are scaled by
/// `1/sqrt(head_dim)` and softmaxed per query position.
pub fn spatial_self_attention<T: Scalar>(
    tape: &mut Tape<T>,
    q: ValueId,
    k: ValueId,
    v: ValueId,
    heads: usize,
) -> Result<ValueId> {
    let [n, c, h, w] = tape.value(q).shape();
    if heads == 0 || c % heads != 0 {
        return Err(Error::DimMismatch {
            axis: "channels",
            expected: heads.max(1),
            got: c,
            context: "attention channels not divisible by head count",
        });
    }
    let d = c / heads;
    let m = h * w;
    let qh = tape.reshape(q, [n, heads, d, m])?;
    let kh = tape.reshape(k, [n, heads, d, m])?;
    let vh = tape.reshape(v, [n, heads, d, m])?;
    let qt = tape.transpose_last2(qh); // (n, heads, m, d)
    let scores = tape.matmul(qt, kh)?; // (n, heads, m, m)
    let scores = tape.scale(scores, real::<T>(1.0 / (d as f64).sqrt()));
    let attn = tape.softmax_last(scores);
    let vt = tape.transpose_last2(vh); // (n, heads, m, d)
    let out = tape.matmul(attn, vt)?; // (n, heads, m, d)
    let out = tape.transpose_last2(out); // (n, heads, d, m)
    tape.reshape(out, [n, c, h, w])
}

/// One PSA unit: self-attention plus a feed-forward, both residual.
pub struct PsaUnit<T> {
    pub q: Conv2dLayer<T>,
    pub k: Conv2dLayer<T>,
    pub v: Conv2dLayer<T>,
    pub proj: Conv2dLayer<T>,
    pub ffn1: ConvBnAct<T>,
    pub ffn2: ConvBnAct<T>,
    pub heads: usize,
}

impl<T: Scalar> PsaUnit<T> {
    pub fn new(name: &str, channels: usize, heads: usize, rng: &mut StreamRng) -> Self {
        PsaUnit {
            q: Conv2dLayer::new(&format!("{name}.q"), channels, channels, 1, 1, true, rng),
            k: Conv2dLayer::new(&format!("{name}.k"), channels, channels, 1, 1, true, rng),
            v: Conv2dLayer::new(&format!("{name}.v"), channels, channels, 1, 1, true, rng),
            proj: Conv2dLayer::new(&format!("{name}.proj"), channels, channels, 1, 1, true, rng),
            ffn1: ConvBnAct::new(&format!("{name}.ffn1"), channels, channels * 2, 1, 1, rng),
            ffn2: ConvBnAct::new(&format!("{name}.ffn2"), channels * 2, channels, 1, 1, rng)
                .no_act(),
            heads,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        trace: &mut ParamTrace,
        x: ValueId,
        train: bool,
    ) -> Result<ValueId> {
        let q = self.q.forward(tape, trace, x)?;
        let k = self.k.forward(tape, trace, x)?;
        let v = self.v.forward(tape, trace, x)?;
        let a = spatial_self_attention(tape, q, k, v, self.heads)?;
        let a = self.proj.forward(tape, trace, a)?;
        let x = tape.add(x, a)?;
        let f = self.ffn1.forward(tape, trace, x, train)?;
        let f = self.ffn2.forward(tape, trace, f, train)?;
        tape.add(x, f)
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(String, &FeatureMap<T>)) {
        self.q.visit_params(f);
        self.k.visit_params(f);
        self.v.visit_params(f);
        self.proj.visit_params(f);
        self.ffn1.visit_params(f);
        self.ffn2.visit_params(f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut FeatureMap<T>)) {
        self.q.visit_params_mut(f);
        self.k.visit_params_mut(f);
        self.v.visit_params_mut(f);
        self.proj.visit_params_mut(f);
        self.ffn1.visit_params_mut(f);
        self.ffn2.visit_params_mut(f);
    }

    pub fn visit_bns(&self, f: &mut dyn FnMut(&BatchNorm2d<T>)) {
        self.ffn1.visit_bns(f);
        self.ffn2.visit_bns(f);
    }

    pub fn macs(&self, input: [usize; 4]) -> u64 {
        let [_, c, h, w] = input;
        let m = (h * w) as u64;
        let convs = self.q.macs(input)
            + self.k.macs(input)
            + self.v.macs(input)
            + self.proj.macs(input)
            + self.ffn1.macs(input)
            + self.ffn2.macs(self.ffn1.out_shape(input));
        // attention matrix products: scores (M^2 d per head) + weighted sum
        let attn = 2 * m * m * c as u64;
        convs + attn
    }
}

/// Split-transform-merge attention block: 1x1 projection, one passthrough
/// half, one half through `repeat` PSA units, concat, 1x1 fuse.
pub struct C2psaBlock<T> {
    pub cv1: ConvBnAct<T>,
    pub units: Vec<PsaUnit<T>>,
    pub cv2: ConvBnAct<T>,
    pub split: usize,
    pub out_channels: usize,
}

impl<T: Scalar> C2psaBlock<T> {
    pub fn new(name: &str, cin: usize, cout: usize, repeat: usize, rng: &mut StreamRng) -> Self {
        let hidden = cout;
        let split = hidden / 2;
        let branch = hidden - split;
        let mut heads = (branch / 32).max(1);
        if branch % heads != 0 {
            heads = 1;
        }
        let cv1 = ConvBnAct::new(&format!("{name}.cv1"), cin, hidden, 1, 1, rng);
        let units = (0..repeat)
            .map(|i| PsaUnit::new(&format!("{name}.m{i}"), branch, heads, rng))
            .collect();
        let cv2 = ConvBnAct::new(&format!("{name}.cv2"), hidden, cout, 1, 1, rng);
        C2psaBlock { cv1, units, cv2, split, out_channels: cout }
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        trace: &mut ParamTrace,
        x: ValueId,
        train: bool,
    ) -> Result<ValueId> {
        let y = self.cv1.forward(tape, trace, x, train)?;
        let hidden = tape.value(y).channels();
        let a = tape.slice_channels(y, 0, self.split)?;
        let mut b = tape.slice_channels(y, self.split, hidden - self.split)?;
        for u in &self.units {
            b = u.forward(tape, trace, b, train)?;
        }
        let cat = tape.concat_channels(&[a, b])?;
        self.cv2.forward(tape, trace, cat, train)
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(String, &FeatureMap<T>)) {
        self.cv1.visit_params(f);
        for u in &self.units {
            u.visit_params(f);
        }
        self.cv2.visit_params(f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut FeatureMap<T>)) {
        self.cv1.visit_params_mut(f);
        for u in &mut self.units {
            u.visit_params_mut(f);
        }
        self.cv2.visit_params_mut(f);
    }

    pub fn visit_bns(&self, f: &mut dyn FnMut(&BatchNorm2d<T>)) {
        self.cv1.visit_bns(f);
        for u in &self.units {
            u.visit_bns(f);
        }
        self.cv2.visit_bns(f);
    }

    pub fn out_shape(&self, input: [usize; 4]) -> [usize; 4] {
        [input[0], self.out_channels, input[2], input[3]]
    }

    pub fn macs(&self, input: [usize; 4]) -> u64 {
        let mid = self.cv1.out_shape(input);
        let branch_shape = [mid[0], mid[1] - self.split, mid[2], mid[3]];
        let mut total = self.cv1.macs(input) + self.cv2.macs(mid);
        for u in &self.units {
            total += u.macs(branch_shape);
        }
        total
    }
}

/// Per-scale raw predictions: `(box distribution logits, class logits)`.
pub struct DetectOut {
    pub scales: Vec<(ValueId, ValueId)>,
    pub strides: Vec<usize>,
}

struct DetectBranch<T> {
    cv1: ConvBnAct<T>,
    cv2: ConvBnAct<T>,
    head: Conv2dLayer<T>,
}

impl<T: Scalar> DetectBranch<T> {
    fn new(
        name: &str,
        cin: usize,
        mid: usize,
        cout: usize,
        bias_init: f64,
        rng: &mut StreamRng,
    ) -> Self {
        let cv1 = ConvBnAct::new(&format!("{name}.cv1"), cin, mid, 3, 1, rng);
        let cv2 = ConvBnAct::new(&format!("{name}.cv2"), mid, mid, 3, 1, rng);
        let mut head = Conv2dLayer::new(&format!("{name}.head"), mid, cout, 1, 1, true, rng);
        head.set_bias_value(bias_init);
        DetectBranch { cv1, cv2, head }
    }

    fn forward(
        &self,
        tape: &mut Tape<T>,
        trace: &mut ParamTrace,
        x: ValueId,
        train: bool,
    ) -> Result<ValueId> {
        let y = self.cv1.forward(tape, trace, x, train)?;
        let y = self.cv2.forward(tape, trace, y, train)?;
        self.head.forward(tape, trace, y)
    }

    fn visit_params(&self, f: &mut dyn FnMut(String, &FeatureMap<T>)) {
        self.cv1.visit_params(f);
        self.cv2.visit_params(f);
        self.head.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut FeatureMap<T>)) {
        self.cv1.visit_params_mut(f);
        self.cv2.visit_params_mut(f);
        self.head.visit_params_mut(f);
    }

    fn visit_bns(&self, f: &mut dyn FnMut(&BatchNorm2d<T>)) {
        self.cv1.visit_bns(f);
        self.cv2.visit_bns(f);
    }

    fn macs(&self, input: [usize; 4]) -> u64 {
        let s1 = self.cv1.out_shape(input);
        let s2 = self.cv2.out_shape(s1);
        self.cv1.macs(input) + self.cv2.macs(s1) + self.head.macs(s2)
    }
}

/// Anchor-free three-scale head: per scale, one branch emits `4 * reg_max`
/// box-distribution logits and one emits `num_classes` class logits per cell.
pub struct DetectHead<T> {
    box_branches: Vec<DetectBranch<T>>,
    cls_branches: Vec<DetectBranch<T>>,
    pub num_classes: usize,
    pub reg_max: usize,
    pub strides: Vec<usize>,
}

impl<T: Scalar> DetectHead<T> {
    pub fn new(
        name: &str,
        in_channels: &[usize],
        strides: &[usize],
        num_classes: usize,
        reg_max: usize,
        rng: &mut StreamRng,
    ) -> Self {
        let cb = (in_channels[0] / 4).max(16);
        let cc = (in_channels[0] / 2).max(num_classes.min(100));
        let mut box_branches = Vec::new();
        let mut cls_branches = Vec::new();
        for (i, &cin) in in_channels.iter().enumerate() {
            box_branches.push(DetectBranch::new(
                &format!("{name}.box{i}"),
                cin,
                cb,
                4 * reg_max,
                BOX_BIAS_INIT,
                rng,
            ));
            cls_branches.push(DetectBranch::new(
                &format!("{name}.cls{i}"),
                cin,
                cc,
                num_classes,
                CLS_BIAS_INIT,
                rng,
            ));
        }
        DetectHead {
            box_branches,
            cls_branches,
            num_classes,
            reg_max,
            strides: strides.to_vec(),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        trace: &mut ParamTrace,
        inputs: &[ValueId],
        train: bool,
    ) -> Result<DetectOut> {
        if inputs.len() != self.box_branches.len() {
            return Err(Error::InvalidArg(format!(
                "detect head expects {} inputs, got {}",
                self.box_branches.len(),
                inputs.len()
            )));
        }
        let mut scales = Vec::new();
        for (i, &x) in inputs.iter().enumerate() {
            let b = self.box_branches[i].forward(tape, trace, x, train)?;
            let c = self.cls_branches[i].forward(tape, trace, x, train)?;
            scales.push((b, c));
        }
        Ok(DetectOut { scales, strides: self.strides.clone() })
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(String, &FeatureMap<T>)) {
        for b in &self.box_branches {
            b.visit_params(f);
        }
        for c in &self.cls_branches {
            c.visit_params(f);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut FeatureMap<T>)) {
        for b in &mut self.box_branches {
            b.visit_params_mut(f);
        }
        for c in &mut self.cls_branches {
            c.visit_params_mut(f);
        }
    }

    pub fn visit_bns(&self, f: &mut dyn FnMut(&BatchNorm2d<T>)) {
        for b in &self.box_branches {
            b.visit_bns(f);
        }
        for c in &self.cls_branches {
            c.visit_bns(f);
        }
    }

    pub fn macs(&self, inputs: &[[usize; 4]]) -> u64 {
        let mut total = 0;
        for (i, &shape) in inputs.iter().enumerate() {
            total += self.box_branches[i].macs(shape) + self.cls_branches[i].macs(shape);
        }
        total
    }
}

/// Sum of learnable parameter elements reported by a visitor.
pub fn count_params<T: Scalar>(visit: impl FnOnce(&mut dyn FnMut(String, &FeatureMap<T>))) -> usize {
    let mut total = 0;
    visit(&mut |_, p| total += p.numel());
    total
}
