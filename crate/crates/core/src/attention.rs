//! The two parameter-free attention modules.
//!
//! # SimAM
//!
//! Each neuron `t` of a channel is scored by the closed-form minimum of a
//! linear-separability energy against its surrounding neurons:
//!
//! ```text
//! e(w, b) = (1/(M-1)) * sum_i (-1 - (w x_i + b))^2 + (1 - (w t + b))^2 + lambda w^2
//! ```
//!
//! whose minimum over `(w, b)` is
//!
//! ```text
//! e* = 4 (sigma^2 + lambda) / ((t - mu)^2 + 2 sigma^2 + 2 lambda)
//! ```
//!
//! with `mu`/`sigma^2` the leave-one-out moments of the channel. The refined
//! map is `X' = sigmoid(1/E) * X`. The minimizer is
//! `w = +2(t - mu) / ((t - mu)^2 + 2 sigma^2 + 2 lambda)`, `b = -(t + mu) w / 2`.
//!
//! Note the sign of `w`: some published statements of this solution carry a
//! leading minus, which does not satisfy the stationarity conditions of the
//! energy above; the positive form here does, and `e*` is even in `(t - mu)`
//! either way, so the refined map is unaffected.
//!
//! # SPAB
//!
//! Three stacked channel-preserving bias-free convolutions produce `H` from
//! the block input `O_prev`; an odd "symmetric" activation of `H` gates the
//! residual-augmented map:
//!
//! ```text
//! V = sigma_a(H),  U = O_prev + H,  O = U * V
//! ```
//!
//! SimAM holds zero learnable parameters; SPAB holds exactly `3 C^2 k^2`.

use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::tensor::ops::{channel_moments, sigmoid, Activation, MomentsMode};
use crate::tensor::tape::{ParamTrace, Tape, ValueId};
use crate::tensor::{real, FeatureMap, Scalar};

/// Default energy regularizer when a config does not pin one.
pub const DEFAULT_LAMBDA: f64 = 1e-4;

/// SimAM configuration. `lambda` must be strictly positive so the energy
/// denominator stays positive even on constant channels.
#[derive(Clone, Copy, Debug)]
pub struct SimAmConfig<T> {
    pub lambda: T,
    pub mode: MomentsMode,
}

impl<T: Scalar> SimAmConfig<T> {
    pub fn new(lambda: T, mode: MomentsMode) -> Result<Self> {
        if !(lambda > T::zero()) || !lambda.is_finite() {
            return Err(Error::InvalidArg(format!(
                "simam lambda must be strictly positive, got {lambda}"
            )));
        }
        Ok(SimAmConfig { lambda, mode })
    }
}

impl<T: Scalar> Default for SimAmConfig<T> {
    fn default() -> Self {
        SimAmConfig {
            lambda: real(DEFAULT_LAMBDA),
            mode: MomentsMode::LeaveOneOut,
        }
    }
}

/// Per-neuron statistics and energies of one refinement pass.
pub struct SimAmStats<T> {
    pub mu: FeatureMap<T>,
    pub sigma2: FeatureMap<T>,
    pub e_star: FeatureMap<T>,
    pub importance: FeatureMap<T>,
}

/// Closed-form minimal energy for one neuron.
#[inline]
pub fn simam_energy<T: Scalar>(t: T, mu: T, sigma2: T, lambda: T) -> T {
    let d2 = (t - mu) * (t - mu);
    let four = real::<T>(4.0);
    let two = real::<T>(2.0);
    four * (sigma2 + lambda) / (d2 + two * sigma2 + two * lambda)
}

/// The minimizing linear transform `(w, b)` for one neuron.
#[inline]
pub fn simam_optimal_params<T: Scalar>(t: T, mu: T, sigma2: T, lambda: T) -> (T, T) {
    let two = real::<T>(2.0);
    let d = t - mu;
    let w = two * d / (d * d + two * sigma2 + two * lambda);
    let b = -(t + mu) * w / two;
    (w, b)
}

/// Literal evaluation of the separability energy at `(w, b)` for a target
/// neuron `t` with its surrounding values. This is the defining objective the
/// closed forms above minimize.
pub fn simam_energy_explicit<T: Scalar>(w: T, b: T, t: T, surround: &[T], lambda: T) -> T {
    let one = T::one();
    let m1 = real::<T>(surround.len() as f64);
    let surround_term: T = surround
        .iter()
        .map(|&x| {
            let r = -one - (w * x + b);
            r * r
        })
        .sum();
    let rt = one - (w * t + b);
    surround_term / m1 + rt * rt + lambda * w * w
}

/// Per-neuron moments, minimal energies and importances for a feature map.
pub fn simam_stats<T: Scalar>(x: &FeatureMap<T>, cfg: &SimAmConfig<T>) -> Result<SimAmStats<T>> {
    let (mu, sigma2) = channel_moments(x, cfg.mode)?;
    let [n, c, h, w] = x.shape();
    let mut e_star = FeatureMap::zeros(x.shape());
    let mut importance = FeatureMap::zeros(x.shape());
    let whole = matches!(cfg.mode, MomentsMode::WholeChannel);
    for ni in 0..n {
        for ci in 0..c {
            let xs = x.channel(ni, ci);
            let es = e_star.channel_mut(ni, ci);
            for i in 0..h * w {
                let (m, v) = if whole {
                    (mu.at(ni, ci, 0, 0), sigma2.at(ni, ci, 0, 0))
                } else {
                    (mu.channel(ni, ci)[i], sigma2.channel(ni, ci)[i])
                };
                es[i] = simam_energy(xs[i], m, v, cfg.lambda);
            }
            let es = e_star.channel(ni, ci).to_vec();
            for (imp, e) in importance.channel_mut(ni, ci).iter_mut().zip(es) {
                *imp = T::one() / e;
            }
        }
    }
    Ok(SimAmStats { mu, sigma2, e_star, importance })
}

/// `X' = sigmoid(1/E) * X`. Shape-preserving, zero learnable parameters.
pub fn simam_refine<T: Scalar>(x: &FeatureMap<T>, cfg: &SimAmConfig<T>) -> Result<FeatureMap<T>> {
    let stats = simam_stats(x, cfg)?;
    let mut out = x.clone();
    for (o, imp) in out.data_mut().iter_mut().zip(stats.importance.data()) {
        *o = *o * sigmoid(*imp);
    }
    Ok(out)
}

/// Per-neuron attention scales `sigmoid(1/e*)` without applying them.
pub fn simam_scales<T: Scalar>(x: &FeatureMap<T>, cfg: &SimAmConfig<T>) -> Result<FeatureMap<T>> {
    let stats = simam_stats(x, cfg)?;
    Ok(stats.importance.map(sigmoid))
}

/// Backward pass of [`simam_refine`].
///
/// The scale of every neuron depends on the whole channel through the
/// moments, so the Jacobian is dense within a channel; the sums below reduce
/// it to O(M) per channel. Let `c_j = dout_j * x_j * g_j (1 - g_j)` with
/// `g_j = sigmoid(imp_j)`; then for leave-one-out moments
///
/// ```text
/// d imp_j / d x_i = K_j [ (x_i - mu_j)(1 - 2 imp_j) - d_j / 2 ]   (i != j)
/// d imp_i / d x_i = d_i / (2 (v_i + lambda))
/// K_j = 1 / ((M - 1)(v_j + lambda))
/// ```
pub(crate) fn simam_refine_backward<T: Scalar>(
    x: &FeatureMap<T>,
    cfg: &SimAmConfig<T>,
    dout: &FeatureMap<T>,
) -> FeatureMap<T> {
    let stats = simam_stats(x, cfg).expect("shape validated on forward");
    let [n, c, h, w] = x.shape();
    let m = h * w;
    let lambda = cfg.lambda;
    let half = real::<T>(0.5);
    let one = T::one();
    let two = real::<T>(2.0);
    let mut dx = FeatureMap::zeros(x.shape());

    for ni in 0..n {
        for ci in 0..c {
            let xs = x.channel(ni, ci);
            let gs = dout.channel(ni, ci);
            let imps = stats.importance.channel(ni, ci);
            match cfg.mode {
                MomentsMode::LeaveOneOut => {
                    let mus = stats.mu.channel(ni, ci);
                    let vs = stats.sigma2.channel(ni, ci);
                    let m1 = real::<T>((m - 1) as f64);
                    // c_j and the channel-wide sums of A_j, B_j
                    let mut sum_a = T::zero();
                    let mut sum_b = T::zero();
                    let mut a = vec![T::zero(); m];
                    let mut b = vec![T::zero(); m];
                    for j in 0..m {
                        let g = sigmoid(imps[j]);
                        let cj = gs[j] * xs[j] * g * (one - g);
                        let k = one / (m1 * (vs[j] + lambda));
                        let one_m2i = one - two * imps[j];
                        let dj = xs[j] - mus[j];
                        b[j] = cj * k * one_m2i;
                        a[j] = -cj * k * (mus[j] * one_m2i + dj * half);
                        sum_a += a[j];
                        sum_b += b[j];
                    }
                    let dxc = dx.channel_mut(ni, ci);
                    for i in 0..m {
                        let g = sigmoid(imps[i]);
                        let ci_ = gs[i] * xs[i] * g * (one - g);
                        let di = xs[i] - mus[i];
                        let diag = ci_ * di / (two * (vs[i] + lambda));
                        dxc[i] = gs[i] * g
                            + diag
                            + (sum_a - a[i])
                            + (sum_b - b[i]) * xs[i];
                    }
                }
                MomentsMode::WholeChannel => {
                    let mu = stats.mu.at(ni, ci, 0, 0);
                    let v = stats.sigma2.at(ni, ci, 0, 0);
                    let mf = real::<T>(m as f64);
                    let vl = v + lambda;
                    let mut sum_c = T::zero();
                    let mut sum_cd = T::zero();
                    let mut sum_ci = T::zero();
                    let mut cj = vec![T::zero(); m];
                    for j in 0..m {
                        let g = sigmoid(imps[j]);
                        let c_ = gs[j] * xs[j] * g * (one - g);
                        cj[j] = c_;
                        sum_c += c_;
                        sum_cd += c_ * (xs[j] - mu);
                        sum_ci += c_ * imps[j];
                    }
                    let dxc = dx.channel_mut(ni, ci);
                    for i in 0..m {
                        let g = sigmoid(imps[i]);
                        let di = xs[i] - mu;
                        let four = real::<T>(4.0);
                        let term = (two * cj[i] * di - two * sum_cd / mf
                            + four * di * sum_c / mf)
                            / (four * vl)
                            - two * di * sum_ci / (mf * vl);
                        dxc[i] = gs[i] * g + term;
                    }
                }
            }
        }
    }
    dx
}

/// Swift parameter-free attention block: three bias-free channel-preserving
/// convolutions, an odd gating activation, and a residual product.
pub struct SpabLayer<T> {
    pub name: String,
    /// Conv weights, each `(C, C, k, k)`, bias-free.
    pub weights: [FeatureMap<T>; 3],
    pub kernel: usize,
    /// Applied after the first two convolutions.
    pub inner_act: Activation,
    /// The symmetric gating activation; must be odd.
    pub attn_act: Activation,
}

impl<T: Scalar> SpabLayer<T> {
    pub fn new(name: &str, channels: usize, kernel: usize, rng: &mut StreamRng) -> Self {
        let std = (2.0 / (channels * kernel * kernel) as f64).sqrt();
        let mut mk = || {
            FeatureMap::from_fn([channels, channels, kernel, kernel], |_, _, _, _| {
                real::<T>(rng.normal() * std)
            })
        };
        let weights = [mk(), mk(), mk()];
        SpabLayer {
            name: name.to_string(),
            weights,
            kernel,
            inner_act: Activation::Silu,
            attn_act: Activation::SymmetricSigmoid,
        }
    }

    /// Identity-kernel block used by tests: every conv maps x to itself.
    pub fn identity(name: &str, channels: usize) -> Self {
        let mk = || {
            FeatureMap::from_fn([channels, channels, 3, 3], |co, ci, h, w| {
                if co == ci && h == 1 && w == 1 {
                    T::one()
                } else {
                    T::zero()
                }
            })
        };
        SpabLayer {
            name: name.to_string(),
            weights: [mk(), mk(), mk()],
            kernel: 3,
            inner_act: Activation::Identity,
            attn_act: Activation::SymmetricSigmoid,
        }
    }

    pub fn channels(&self) -> usize {
        self.weights[0].shape()[0]
    }

    /// Learnable parameter count: `3 C^2 k^2`, bias-free.
    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.numel()).sum()
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        trace: &mut ParamTrace,
        x: ValueId,
    ) -> Result<ValueId> {
        let c = tape.value(x).channels();
        if c != self.channels() {
            return Err(Error::DimMismatch {
                axis: "channels",
                expected: self.channels(),
                got: c,
                context: "spab input",
            });
        }
        let pad = self.kernel / 2;
        let mut h = x;
        for (i, w) in self.weights.iter().enumerate() {
            let wid = tape.leaf(w.clone());
            trace.record(&format!("{}.cv{}.weight", self.name, i), wid);
            h = tape.conv2d(h, wid, None, 1, pad)?;
            if i < 2 {
                h = tape.activation(h, self.inner_act);
            }
        }
        let v = tape.activation(h, self.attn_act);
        let u = tape.add(x, h)?;
        tape.mul(u, v)
    }

    pub fn for_each_param(&self, f: &mut dyn FnMut(String, &FeatureMap<T>)) {
        for (i, w) in self.weights.iter().enumerate() {
            f(format!("{}.cv{}.weight", self.name, i), w);
        }
    }

    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(String, &mut FeatureMap<T>)) {
        for (i, w) in self.weights.iter_mut().enumerate() {
            f(format!("{}.cv{}.weight", self.name, i), w);
        }
    }
}
