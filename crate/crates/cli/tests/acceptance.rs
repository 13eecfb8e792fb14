//! Acceptance suite: one test per criterion, each printing a pass/fail line
//! (run with `--nocapture` to see them stream).
//!
//! Headline detection scores from full-scale GPU training are not
//! reproducible at desk scale, so acceptance is property- and oracle-based:
//! closed forms against numeric minimizers, analytic gradients against
//! central differences, metrics against a brute-force staircase, accounting
//! against hand counts, and a small synthetic training smoke test.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use ecoweed_core::attention::{simam_energy, simam_optimal_params, SimAmConfig, SpabLayer};
use ecoweed_core::data::{synth_corpus, Checkpoint, SynthSpec};
use ecoweed_core::detection::{
    assign_targets, detection_loss, loss_ops, AssignedCell, GtBox, LossWeights,
};
use ecoweed_core::eval::{average_precision, match_detections};
use ecoweed_core::explain::gradcam_pp;
use ecoweed_core::gradcheck::{central_diff, max_rel_error};
use ecoweed_core::graph::{build_model, GraphConfig, Model, TOY_CONFIG_64};
use ecoweed_core::rng::StreamRng;
use ecoweed_core::tensor::ops::{Activation, EltwiseOp, MomentsMode};
use ecoweed_core::train::{train, EpochMetrics, TrainConfig};
use ecoweed_core::{FeatureMap, ParamTrace, Tape, ValueId};

fn report(criterion: usize, pass: bool, details: &str) {
    println!(
        "criterion {criterion:>2} [{}] {details}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} failed: {details}");
}

// ---------------------------------------------------------------------------
// 1. SimAM closed form vs numeric minimization of the energy
// ---------------------------------------------------------------------------

/// Literal evaluation of the separability energy (written independently of
/// the library's closed forms).
fn energy_literal(w: f64, b: f64, t: f64, surround: &[f64], lambda: f64) -> f64 {
    let m1 = surround.len() as f64;
    let s: f64 = surround
        .iter()
        .map(|&x| {
            let r = -1.0 - (w * x + b);
            r * r
        })
        .sum();
    let rt = 1.0 - (w * t + b);
    s / m1 + rt * rt + lambda * w * w
}

/// Coordinate descent with exact parabola-fit line minimization plus a
/// pattern move along each sweep's total displacement (Powell-style). The
/// energy is a strictly convex quadratic, so every line minimization is
/// exact and the pattern move handles ill-conditioned (small lambda) cases;
/// only the literal objective is ever evaluated.
fn numeric_min_energy(t: f64, surround: &[f64], lambda: f64) -> f64 {
    let f = |w: f64, b: f64| energy_literal(w, b, t, surround, lambda);
    // exact minimizer of the quadratic along (dw, db) through (w, b)
    let line_min = |w: f64, b: f64, dw: f64, db: f64| -> (f64, f64) {
        let (lo, mid, hi) = (f(w - dw, b - db), f(w, b), f(w + dw, b + db));
        let denom = lo - 2.0 * mid + hi;
        if denom > 0.0 {
            let alpha = -(hi - lo) / (2.0 * denom);
            (w + alpha * dw, b + alpha * db)
        } else {
            (w, b)
        }
    };
    let (mut w, mut b) = (0.0, 0.0);
    for _ in 0..40 {
        let (w0, b0) = (w, b);
        (w, b) = line_min(w, b, 0.5, 0.0);
        (w, b) = line_min(w, b, 0.0, 0.5);
        let (dw, db) = (w - w0, b - b0);
        if dw.abs() + db.abs() > 1e-300 {
            (w, b) = line_min(w, b, dw, db);
        }
    }
    f(w, b)
}

#[test]
fn criterion_01_simam_energy_oracle() {
    let started = Instant::now();
    let mut rng = StreamRng::new(20240, 1);
    let mut worst_energy = 0.0f64;
    let mut worst_at_params = 0.0f64;
    for _ in 0..1000 {
        let m_minus_1 = 1 + rng.below(63);
        let surround: Vec<f64> = (0..m_minus_1).map(|_| rng.uniform_in(-2.0, 2.0)).collect();
        let t = rng.uniform_in(-2.0, 2.0);
        let lambda = rng.uniform_in(1e-4, 1.0);
        let mu = surround.iter().sum::<f64>() / surround.len() as f64;
        let var =
            surround.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / surround.len() as f64;

        let closed = simam_energy(t, mu, var, lambda);
        let numeric = numeric_min_energy(t, &surround, lambda);
        worst_energy = worst_energy.max((closed - numeric).abs() / numeric.abs());

        let (w, b) = simam_optimal_params(t, mu, var, lambda);
        let at_params = energy_literal(w, b, t, &surround, lambda);
        worst_at_params = worst_at_params.max((at_params - closed).abs() / closed.abs());
    }
    let elapsed = started.elapsed();
    report(
        1,
        worst_energy < 1e-6 && worst_at_params < 1e-9 && elapsed < Duration::from_secs(10),
        &format!(
            "closed form vs numeric minimizer: rel {worst_energy:.2e} (<1e-6), energy at (w,b): rel {worst_at_params:.2e} (<1e-9), {:.2}s (<10s)",
            elapsed.as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------------------
// 2-3. Accounting invariances
// ---------------------------------------------------------------------------

/// Random but valid detector graph: the reference topology with randomized
/// widths, repeats and kernels.
fn random_config(rng: &mut StreamRng) -> GraphConfig {
    let mut w = |base: usize| -> usize { base.max(8) / 8 * 8 + 8 * rng.below(3) };
    let (c0, c1, c2, c3, c4, c5) = (w(8), w(16), w(16), w(24), w(32), w(40));
    drop(w);
    let (r2, r4, r10) = (rng.below(3), rng.below(3), rng.below(3));
    let k0 = [3, 5][rng.below(2)];
    let text = format!(
        "ecoweednet-graph v1\nresolution 64\nclasses {classes}\nspab\nsimam\nnodes\n\
         0 conv from=-1 c={c0} k={k0} s=2\n\
         1 conv from=-1 c={c1} k=3 s=2\n\
         2 c3k2 from=-1 c={c1} r={r2}\n\
         3 conv from=-1 c={c2} k=3 s=2\n\
         4 c3k2 from=-1 c={c2} r={r4}\n\
         5 conv from=-1 c={c3} k=3 s=2\n\
         6 c3k2 from=-1 c={c3} r=1\n\
         7 conv from=-1 c={c4} k=3 s=2\n\
         8 c3k2 from=-1 c={c4} r=1\n\
         9 sppf from=-1 c={c4}\n\
         10 c2psa from=-1 c={c4} r={r10}\n\
         11 upsample from=-1 s=2\n\
         12 concat from=-1,6\n\
         13 c3k2 from=-1 c={c3} r=1\n\
         14 upsample from=-1 s=2\n\
         15 concat from=-1,4\n\
         16 c3k2 from=-1 c={c2} r=1\n\
         17 conv from=-1 c={c2} k=3 s=2\n\
         18 concat from=-1,13\n\
         19 c3k2 from=-1 c={c5} r=1\n\
         20 conv from=-1 c={c5} k=3 s=2\n\
         21 concat from=-1,10\n\
         22 c3k2 from=-1 c={c4} r=1\n\
         23 detect from=16,19,22\n",
        classes = 1 + rng.below(12),
    );
    GraphConfig::parse(&text).expect("generated config is valid")
}

#[test]
fn criterion_02_simam_insertion_is_free() {
    let mut rng = StreamRng::new(88, 2);
    let mut checked = 0usize;
    for _ in 0..20 {
        let cfg = random_config(&mut rng);
        let base = build_model::<f32>(&cfg, 0).unwrap().summary(64).unwrap();
        for idx in 0..cfg.nodes.len() - 1 {
            let with = cfg.with_attention(&[], &[idx]);
            let s = build_model::<f32>(&with, 0).unwrap().summary(64).unwrap();
            assert_eq!(s.total_params, base.total_params, "params changed at {idx}");
            assert_eq!(s.total_macs, base.total_macs, "macs changed at {idx}");
            checked += 1;
        }
    }
    report(
        2,
        true,
        &format!("20 random configs x {checked} SimAM insertions: dParams = 0 and dGFLOPs = 0 exactly"),
    );
}

#[test]
fn criterion_03_spab_insertion_costs_27_c_squared() {
    // conv chain whose node outputs carry exactly the channel widths to probe
    let mut all_ok = true;
    let mut details = Vec::new();
    for c in [8usize, 16, 32, 64] {
        let text = format!(
            "ecoweednet-graph v1\nresolution 64\nclasses 2\nspab\nsimam\nnodes\n\
             0 conv from=-1 c={c} k=3 s=2\n\
             1 conv from=-1 c={c} k=3 s=2\n\
             2 conv from=-1 c=16 k=3 s=2\n\
             3 conv from=-1 c=24 k=3 s=2\n\
             4 conv from=-1 c=32 k=3 s=2\n\
             5 detect from=2,3,4\n"
        );
        let cfg = GraphConfig::parse(&text).unwrap();
        let p0 = build_model::<f32>(&cfg, 0).unwrap().summary(64).unwrap().total_params;
        let with = cfg.with_attention(&[1], &[]);
        let p1 = build_model::<f32>(&with, 0).unwrap().summary(64).unwrap().total_params;
        let delta = p1 - p0;
        let expect = 3 * c * c * 9;
        all_ok &= delta == expect;
        details.push(format!("C={c}: +{delta} (expect {expect})"));
    }
    report(3, all_ok, &format!("SPAB insertion deltas exact: {}", details.join(", ")));
}

#[test]
fn criterion_04_reference_scale_accounting() {
    let base_cfg = GraphConfig::parse(ecoweed_core::graph::REFERENCE_CONFIG_640).unwrap();
    let base = build_model::<f32>(&base_cfg, 0).unwrap().summary(640).unwrap();
    let best_cfg = GraphConfig::parse(ecoweed_core::graph::BEST_CONFIG_640).unwrap();
    let best = build_model::<f32>(&best_cfg, 0).unwrap().summary(640).unwrap();
    let bp = base.total_params as f64;
    let pp = best.total_params as f64;
    let gg = best.gflops();
    let ok = (2.6e6 * 0.85..=2.6e6 * 1.15).contains(&bp)
        && (2.78e6 * 0.85..=2.78e6 * 1.15).contains(&pp)
        && (9.3 * 0.8..=9.3 * 1.2).contains(&gg);
    report(
        4,
        ok,
        &format!(
            "baseline {bp:.0} params (2.6M +/- 15%), best row {pp:.0} params (2.78M +/- 15%), {gg:.2} GFLOPs (9.3 +/- 20%)"
        ),
    );
}

// ---------------------------------------------------------------------------
// 5. Gradient integrity
// ---------------------------------------------------------------------------

fn rand_map(rng: &mut StreamRng, shape: [usize; 4], lo: f64, hi: f64) -> FeatureMap<f64> {
    FeatureMap::from_fn(shape, |_, _, _, _| rng.uniform_in(lo, hi))
}

/// FD-check one op: gradient of `dot(op(inputs), probe)` w.r.t. every input
/// element, against central differences of the rebuilt forward value.
fn check_op(
    name: &str,
    inputs: &[FeatureMap<f64>],
    probe_seed: u64,
    build: &dyn Fn(&mut Tape<f64>, &[ValueId]) -> ValueId,
) -> f64 {
    let forward = |maps: &[FeatureMap<f64>]| -> (f64, Option<Vec<Vec<f64>>>) {
        let mut tape = Tape::new();
        let ids: Vec<ValueId> = maps.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = build(&mut tape, &ids);
        let mut prng = StreamRng::new(probe_seed, 7);
        let probe = FeatureMap::from_fn(tape.value(out).shape(), |_, _, _, _| {
            prng.uniform_in(-1.0, 1.0)
        });
        let p = tape.leaf(probe);
        let prod = tape.mul(out, p).unwrap();
        let loss = tape.sum_all(prod);
        (tape.value(loss).scalar_value(), {
            let grads = tape.backward(loss).unwrap();
            Some(
                ids.iter()
                    .map(|&id| {
                        grads
                            .get(id)
                            .map(|g| g.data().to_vec())
                            .unwrap_or_else(|| vec![0.0; tape.value(id).numel()])
                    })
                    .collect(),
            )
        })
    };
    let (_, analytic) = forward(inputs);
    let analytic = analytic.unwrap();

    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let flat: Vec<f64> = input.data().to_vec();
        let mut f = |xs: &[f64]| -> f64 {
            let mut maps = inputs.to_vec();
            maps[i] = FeatureMap::new(input.shape(), xs.to_vec()).unwrap();
            let mut tape = Tape::new();
            let ids: Vec<ValueId> = maps.iter().map(|m| tape.leaf(m.clone())).collect();
            let out = build(&mut tape, &ids);
            let mut prng = StreamRng::new(probe_seed, 7);
            let probe = FeatureMap::from_fn(tape.value(out).shape(), |_, _, _, _| {
                prng.uniform_in(-1.0, 1.0)
            });
            let p = tape.leaf(probe);
            let prod = tape.mul(out, p).unwrap();
            let loss = tape.sum_all(prod);
            tape.value(loss).scalar_value()
        };
        let numeric = central_diff(&mut f, &flat, 1e-4);
        let err = max_rel_error(&analytic[i], &numeric, 1e-3);
        if err > worst {
            worst = err;
        }
    }
    eprintln!("  gradcheck {name}: max rel err {worst:.3e}");
    worst
}

#[test]
fn criterion_05_gradient_integrity() {
    let started = Instant::now();
    let mut rng = StreamRng::new(314, 5);
    let mut worst: Vec<(String, f64)> = Vec::new();
    let push = |name: &str, err: f64, worst: &mut Vec<(String, f64)>| {
        worst.push((name.to_string(), err));
    };

    // convolution variants
    let x = rand_map(&mut rng, [2, 3, 5, 5], -2.0, 2.0);
    let w = rand_map(&mut rng, [4, 3, 3, 3], -1.0, 1.0);
    let b = rand_map(&mut rng, [1, 4, 1, 1], -0.5, 0.5);
    let e = check_op("conv k3 s1 p1 + bias", &[x, w, b], 11, &|t, ids| {
        t.conv2d(ids[0], ids[1], Some(ids[2]), 1, 1).unwrap()
    });
    push("conv3", e, &mut worst);
    let x = rand_map(&mut rng, [1, 2, 6, 6], -2.0, 2.0);
    let w = rand_map(&mut rng, [3, 2, 2, 2], -1.0, 1.0);
    let e = check_op("conv k2 s2 p0", &[x, w], 12, &|t, ids| {
        t.conv2d(ids[0], ids[1], None, 2, 0).unwrap()
    });
    push("conv2s2", e, &mut worst);

    // batch norm, both modes
    let x = rand_map(&mut rng, [2, 3, 4, 4], -2.0, 2.0);
    let g = rand_map(&mut rng, [1, 3, 1, 1], 0.5, 1.5);
    let be = rand_map(&mut rng, [1, 3, 1, 1], -0.5, 0.5);
    let e = check_op("batchnorm train", &[x.clone(), g.clone(), be.clone()], 13, &|t, ids| {
        let (m, v) = ecoweed_core::tensor::ops::batch_stats(t.value(ids[0]));
        t.batch_norm(ids[0], ids[1], ids[2], m, v, 1e-3, true).unwrap()
    });
    push("bn train", e, &mut worst);
    let e = check_op("batchnorm infer", &[x, g, be], 14, &|t, ids| {
        t.batch_norm(ids[0], ids[1], ids[2], vec![0.1, -0.2, 0.3], vec![1.1, 0.7, 0.9], 1e-3, false)
            .unwrap()
    });
    push("bn infer", e, &mut worst);

    // elementwise with and without broadcast
    let a = rand_map(&mut rng, [2, 3, 3, 3], -2.0, 2.0);
    let bb = rand_map(&mut rng, [2, 3, 3, 3], -2.0, 2.0);
    let e = check_op("eltwise mul", &[a.clone(), bb], 15, &|t, ids| {
        t.eltwise(ids[0], ids[1], EltwiseOp::Mul).unwrap()
    });
    push("mul", e, &mut worst);
    let s = rand_map(&mut rng, [1, 3, 1, 1], -1.0, 1.0);
    let e = check_op("eltwise add bcast", &[a.clone(), s.clone()], 16, &|t, ids| {
        t.eltwise(ids[0], ids[1], EltwiseOp::Add).unwrap()
    });
    push("add bcast", e, &mut worst);
    let e = check_op("eltwise mul bcast", &[a, s], 17, &|t, ids| {
        t.eltwise(ids[0], ids[1], EltwiseOp::Mul).unwrap()
    });
    push("mul bcast", e, &mut worst);

    // activations
    for (name, kind) in [
        ("sigmoid", Activation::Sigmoid),
        ("silu", Activation::Silu),
        ("symmetric sigmoid", Activation::SymmetricSigmoid),
    ] {
        let x = rand_map(&mut rng, [1, 2, 4, 4], -2.0, 2.0);
        let e = check_op(name, &[x], 18, &|t, ids| t.activation(ids[0], kind));
        push(name, e, &mut worst);
    }

    // pooling / resampling / shape ops
    let x = rand_map(&mut rng, [1, 2, 6, 6], -2.0, 2.0);
    let e = check_op("maxpool k2 s2", &[x], 19, &|t, ids| {
        t.maxpool2d(ids[0], 2, 2, 0).unwrap()
    });
    push("maxpool", e, &mut worst);
    let x = rand_map(&mut rng, [1, 2, 5, 5], -2.0, 2.0);
    let e = check_op("maxpool k3 s1 p1", &[x], 20, &|t, ids| {
        t.maxpool2d(ids[0], 3, 1, 1).unwrap()
    });
    push("maxpool pad", e, &mut worst);
    let x = rand_map(&mut rng, [1, 3, 3, 3], -2.0, 2.0);
    let e = check_op("upsample x2", &[x], 21, &|t, ids| {
        t.upsample_nearest(ids[0], 2).unwrap()
    });
    push("upsample", e, &mut worst);
    let a = rand_map(&mut rng, [1, 2, 3, 3], -2.0, 2.0);
    let b2 = rand_map(&mut rng, [1, 3, 3, 3], -2.0, 2.0);
    let e = check_op("concat+slice", &[a, b2], 22, &|t, ids| {
        let cat = t.concat_channels(&[ids[0], ids[1]]).unwrap();
        t.slice_channels(cat, 1, 3).unwrap()
    });
    push("concat/slice", e, &mut worst);
    let x = rand_map(&mut rng, [1, 4, 2, 3], -2.0, 2.0);
    let e = check_op("reshape+transpose", &[x], 23, &|t, ids| {
        let r = t.reshape(ids[0], [1, 2, 2, 6]).unwrap();
        t.transpose_last2(r)
    });
    push("reshape/transpose", e, &mut worst);

    // matmul / softmax / attention composite
    let a = rand_map(&mut rng, [1, 2, 3, 4], -1.0, 1.0);
    let b3 = rand_map(&mut rng, [1, 2, 4, 2], -1.0, 1.0);
    let e = check_op("matmul", &[a, b3], 24, &|t, ids| {
        t.matmul(ids[0], ids[1]).unwrap()
    });
    push("matmul", e, &mut worst);
    let x = rand_map(&mut rng, [1, 1, 3, 5], -2.0, 2.0);
    let e = check_op("softmax", &[x], 25, &|t, ids| t.softmax_last(ids[0]));
    push("softmax", e, &mut worst);
    let q = rand_map(&mut rng, [1, 4, 3, 3], -1.0, 1.0);
    let k = rand_map(&mut rng, [1, 4, 3, 3], -1.0, 1.0);
    let v = rand_map(&mut rng, [1, 4, 3, 3], -1.0, 1.0);
    let e = check_op("spatial attention", &[q, k, v], 26, &|t, ids| {
        ecoweed_core::blocks::spatial_self_attention(t, ids[0], ids[1], ids[2], 2).unwrap()
    });
    push("attention", e, &mut worst);

    // simam refine, both moment modes
    for (name, mode) in [
        ("simam loo", MomentsMode::LeaveOneOut),
        ("simam whole", MomentsMode::WholeChannel),
    ] {
        let x = rand_map(&mut rng, [1, 2, 3, 3], -2.0, 2.0);
        let cfg = SimAmConfig::new(0.01, mode).unwrap();
        let e = check_op(name, &[x], 27, &|t, ids| t.simam_refine(ids[0], cfg).unwrap());
        push(name, e, &mut worst);
    }

    // spab block end to end
    let mut srng = StreamRng::new(5, 5);
    let spab = SpabLayer::<f64>::new("spab", 3, 3, &mut srng);
    let x = rand_map(&mut rng, [1, 3, 4, 4], -1.5, 1.5);
    let e = check_op("spab", &[x], 28, &|t, ids| {
        let mut trace = ParamTrace::new();
        spab.forward(t, &mut trace, ids[0]).unwrap()
    });
    push("spab", e, &mut worst);

    // fused losses
    let reg_max = 4;
    let gts = vec![vec![
        GtBox { class_id: 0, cx: 0.45, cy: 0.52, w: 0.30, h: 0.42 },
        GtBox { class_id: 1, cx: 0.7, cy: 0.4, w: 0.55, h: 0.62 },
    ]];
    let (assignment, _) = assign_targets::<f64>(&gts, (32, 32), &[8, 16, 32], 2, reg_max).unwrap();
    for (si, scale) in assignment.scales.iter().enumerate() {
        if scale.cells.is_empty() {
            continue;
        }
        let shape = [1, 4 * reg_max, scale.grid_h, scale.grid_w];
        let x = rand_map(&mut rng, shape, -1.5, 1.5);
        let cells: Vec<AssignedCell<f64>> = scale.cells.clone();
        let cells2 = cells.clone();
        let e = check_op(&format!("ciou loss s{si}"), &[x.clone()], 29, &|t, ids| {
            t.ciou_loss(
                ids[0],
                loss_ops::CiouData { cells: cells.clone(), reg_max, norm: 0.5 },
            )
            .unwrap()
        });
        push("ciou", e, &mut worst);
        let e = check_op(&format!("dfl loss s{si}"), &[x], 30, &|t, ids| {
            t.dfl_loss(
                ids[0],
                loss_ops::DflData { cells: cells2.clone(), reg_max, norm: 0.5 },
            )
            .unwrap()
        });
        push("dfl", e, &mut worst);
        let cls_shape = [1, 2, scale.grid_h, scale.grid_w];
        let x = rand_map(&mut rng, cls_shape, -2.0, 2.0);
        let target = scale.cls_target.clone();
        let e = check_op(&format!("bce loss s{si}"), &[x], 31, &|t, ids| {
            t.bce_loss(ids[0], loss_ops::BceData { target: target.clone(), norm: 0.3 })
                .unwrap()
        });
        push("bce", e, &mut worst);
    }

    // composed model loss: image coordinates and sampled weight coordinates
    let cfg = GraphConfig::parse(TOY_CONFIG_64).unwrap();
    let model = build_model::<f64>(&cfg, 21).unwrap();
    let mut irng = StreamRng::new(9, 9);
    let image = FeatureMap::from_fn([1, 3, 32, 32], |_, _, _, _| irng.uniform_in(0.0, 1.0));
    struct LossPass {
        value: f64,
        tape: Tape<f64>,
        trace: ParamTrace,
        image_id: ValueId,
        total: ValueId,
    }
    let loss_of = |model: &Model<f64>, image: &FeatureMap<f64>| -> LossPass {
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, image, false).unwrap();
        let box_ids: Vec<ValueId> = pass.det.scales.iter().map(|&(b, _)| b).collect();
        let cls_ids: Vec<ValueId> = pass.det.scales.iter().map(|&(_, c)| c).collect();
        let (total, _) = detection_loss(
            &mut tape,
            &box_ids,
            &cls_ids,
            &assignment,
            model.reg_max,
            LossWeights::default(),
        )
        .unwrap();
        let value = tape.value(total).scalar_value();
        LossPass { value, tape, trace: pass.trace, image_id: pass.image, total }
    };
    let full = loss_of(&model, &image);
    let grads = full.tape.backward(full.total).unwrap();
    let trace = full.trace;

    // image coordinates
    let image_grad = grads.get(full.image_id).expect("image gradient");
    let mut coord_rng = StreamRng::new(77, 1);
    let mut worst_model = 0.0f64;
    for _ in 0..24 {
        let ci = coord_rng.below(image.numel());
        let mut bumped = image.clone();
        let h = 1e-4;
        bumped.data_mut()[ci] += h;
        let hi = loss_of(&model, &bumped).value;
        bumped.data_mut()[ci] -= 2.0 * h;
        let lo = loss_of(&model, &bumped).value;
        let fd = (hi - lo) / (2.0 * h);
        let an = image_grad.data()[ci];
        worst_model = worst_model.max((an - fd).abs() / an.abs().max(fd.abs()).max(1e-3));
    }
    // sampled weight coordinates via the parameter trace
    let grad_by_name: HashMap<String, Vec<f64>> = trace
        .entries
        .iter()
        .filter_map(|(n, id)| grads.get(*id).map(|g| (n.clone(), g.data().to_vec())))
        .collect();
    let mut model = model;
    let mut names: Vec<String> = grad_by_name.keys().cloned().collect();
    names.sort();
    for _ in 0..24 {
        let name = names[coord_rng.below(names.len())].clone();
        let an_vec = &grad_by_name[&name];
        let ci = coord_rng.below(an_vec.len());
        let h = 1e-4;
        let bump = |delta: f64, model: &mut Model<f64>| {
            model.visit_params_mut(&mut |n, p| {
                if n == name {
                    p.data_mut()[ci] += delta;
                }
            });
        };
        bump(h, &mut model);
        let hi = loss_of(&model, &image).value;
        bump(-2.0 * h, &mut model);
        let lo = loss_of(&model, &image).value;
        bump(h, &mut model);
        let fd = (hi - lo) / (2.0 * h);
        let an = an_vec[ci];
        worst_model = worst_model.max((an - fd).abs() / an.abs().max(fd.abs()).max(1e-3));
    }
    push("composed loss", worst_model, &mut worst);

    let max = worst.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let elapsed = started.elapsed();
    let (worst_name, _) = worst
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap()
        .clone();
    report(
        5,
        max < 1e-4 && elapsed < Duration::from_secs(60),
        &format!(
            "{} op checks + composed loss: max rel err {max:.3e} (<1e-4, worst: {worst_name}), {:.1}s (<60s)",
            worst.len(),
            elapsed.as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------------------
// 6. Metric oracle
// ---------------------------------------------------------------------------

/// Point-by-point PR staircase: precision envelope by literal scan over all
/// later points, integrated over recall increments.
fn ap_bruteforce(pairs: &[(f64, bool)], n_gt: usize) -> f64 {
    if n_gt == 0 || pairs.is_empty() {
        return 0.0;
    }
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n = sorted.len();
    let mut prec = vec![0.0; n];
    let mut rec = vec![0.0; n];
    let mut tp = 0;
    for i in 0..n {
        if sorted[i].1 {
            tp += 1;
        }
        prec[i] = tp as f64 / (i + 1) as f64;
        rec[i] = tp as f64 / n_gt as f64;
    }
    let mut ap = 0.0;
    for i in 0..n {
        let r_prev = if i == 0 { 0.0 } else { rec[i - 1] };
        if rec[i] > r_prev {
            let mut env = 0.0f64;
            for j in i..n {
                env = env.max(prec[j]);
            }
            ap += (rec[i] - r_prev) * env;
        }
    }
    ap
}

#[test]
fn criterion_06_metric_oracle() {
    // hand-traced examples hold exactly
    assert_eq!(average_precision(&[(0.9, true), (0.8, false)], 1), 1.0);
    assert_eq!(average_precision(&[(0.9, false), (0.8, true)], 1), 0.5);
    assert_eq!(average_precision(&[], 5), 0.0);

    let mut rng = StreamRng::new(606, 6);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let n_det = rng.below(13);
        let n_gt_boxes = 1 + rng.below(6);
        let classes = 1 + rng.below(3);
        let gts: Vec<GtBox> = (0..n_gt_boxes)
            .map(|_| GtBox {
                class_id: rng.below(classes),
                cx: rng.uniform_in(0.2, 0.8),
                cy: rng.uniform_in(0.2, 0.8),
                w: rng.uniform_in(0.05, 0.4),
                h: rng.uniform_in(0.05, 0.4),
            })
            .collect();
        let dets: Vec<ecoweed_core::detection::DetectionBox> = (0..n_det)
            .map(|_| {
                // half the detections perturb a ground truth, half are noise
                if rng.uniform() < 0.5 && !gts.is_empty() {
                    let g = gts[rng.below(gts.len())];
                    ecoweed_core::detection::DetectionBox::new(
                        g.class_id,
                        rng.uniform(),
                        (g.cx + rng.uniform_in(-0.05, 0.05)).clamp(0.0, 1.0),
                        (g.cy + rng.uniform_in(-0.05, 0.05)).clamp(0.0, 1.0),
                        (g.w * rng.uniform_in(0.8, 1.2)).min(1.0),
                        (g.h * rng.uniform_in(0.8, 1.2)).min(1.0),
                    )
                } else {
                    ecoweed_core::detection::DetectionBox::new(
                        rng.below(classes),
                        rng.uniform(),
                        rng.uniform_in(0.1, 0.9),
                        rng.uniform_in(0.1, 0.9),
                        rng.uniform_in(0.05, 0.3),
                        rng.uniform_in(0.05, 0.3),
                    )
                }
            })
            .collect();
        let (matched, _) = match_detections(&dets, &gts, 0.5);
        for class in 0..classes {
            let pairs: Vec<(f64, bool)> = matched
                .iter()
                .filter(|m| m.class_id == class)
                .map(|m| (m.confidence, m.tp))
                .collect();
            let n_gt = gts.iter().filter(|g| g.class_id == class).count();
            let got = average_precision(&pairs, n_gt);
            let want = ap_bruteforce(&pairs, n_gt);
            worst = worst.max((got - want).abs());
        }
    }
    report(
        6,
        worst < 1e-9,
        &format!("500 random scenes: AP vs brute-force staircase, max abs diff {worst:.2e} (<1e-9); hand traces exact"),
    );
}

// ---------------------------------------------------------------------------
// 7-8. Training smoke tests (runs shared between criteria)
// ---------------------------------------------------------------------------

const SMOKE_IMAGES: usize = 200;
const SMOKE_EPOCHS: usize = 30;
const SMOKE_CORPUS_SEED: u64 = 1234;

struct SmokeRun {
    metrics: Vec<EpochMetrics>,
    wall: Duration,
}

fn smoke_cache() -> &'static Mutex<HashMap<(bool, u64), &'static SmokeRun>> {
    static CACHE: OnceLock<Mutex<HashMap<(bool, u64), &'static SmokeRun>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Train the toy config (with or without the pinned attention indices) on
/// the shared smoke corpus. Results are cached; the guard also serializes
/// the heavy runs so they do not fight over cores.
fn smoke_run(with_attention: bool, seed: u64) -> &'static SmokeRun {
    let mut cache = smoke_cache().lock().unwrap();
    if let Some(run) = cache.get(&(with_attention, seed)) {
        return run;
    }
    let base = GraphConfig::parse(TOY_CONFIG_64).unwrap();
    let cfg = if with_attention {
        base.with_attention(&[1, 3], &[8, 11, 15])
    } else {
        base
    };
    let mut model = build_model::<f32>(&cfg, seed).unwrap();
    let samples = synth_corpus::<f32>(
        SMOKE_CORPUS_SEED,
        &SynthSpec { n_images: SMOKE_IMAGES, ..Default::default() },
    );
    let tc = TrainConfig { epochs: SMOKE_EPOCHS, lr: 0.02, seed, ..Default::default() };
    let started = Instant::now();
    let run = train(&mut model, &samples, &tc, |_| {}).unwrap();
    let result: &'static SmokeRun = Box::leak(Box::new(SmokeRun {
        metrics: run.epochs,
        wall: started.elapsed(),
    }));
    cache.insert((with_attention, seed), result);
    result
}

#[test]
fn criterion_07_training_smoke() {
    let run = smoke_run(true, 0);
    let best = run
        .metrics
        .iter()
        .max_by(|a, b| a.map50.total_cmp(&b.map50))
        .unwrap();
    let first = &run.metrics[0];
    let halved = |a: f64, b: f64| b <= 0.5 * a;
    let losses_halved = halved(first.box_loss, best.box_loss)
        && halved(first.cls_loss, best.cls_loss)
        && halved(first.dfl_loss, best.dfl_loss);
    let ok = best.map50 >= 0.80 && run.wall < Duration::from_secs(1800) && losses_halved;
    report(
        7,
        ok,
        &format!(
            "200-image synthetic corpus: best mAP50 {:.3} at epoch {} (>=0.80 within 30), wall {:.0}s (<1800s), losses epoch1->best: box {:.3}->{:.3}, cls {:.3}->{:.3}, dfl {:.3}->{:.3} (each halved)",
            best.map50,
            best.epoch,
            run.wall.as_secs_f64(),
            first.box_loss,
            best.box_loss,
            first.cls_loss,
            best.cls_loss,
            first.dfl_loss,
            best.dfl_loss
        ),
    );
}

#[test]
fn criterion_08_simam_does_not_hurt() {
    let mut lines = Vec::new();
    let mut ok = true;
    for seed in [0u64, 1, 2] {
        let with = smoke_run(true, seed);
        let without = smoke_run(false, seed);
        let best = |r: &SmokeRun| {
            r.metrics
                .iter()
                .map(|m| m.map50)
                .fold(f64::NEG_INFINITY, f64::max)
        };
        let (a, f) = (best(with), best(without));
        ok &= a >= f - 0.02;
        lines.push(format!("seed {seed}: simam {a:.3} vs free {f:.3}"));
    }
    report(
        8,
        ok,
        &format!("pinned-attention config within 0.02 of attention-free: {}", lines.join("; ")),
    );
}

// ---------------------------------------------------------------------------
// 9. Saliency sanity
// ---------------------------------------------------------------------------

#[test]
fn criterion_09_saliency_peak_inside_box() {
    // overfit a small model on single-blob images
    let spec = SynthSpec {
        n_images: 50,
        boxes_per_image: (1, 1),
        size_range: (0.35, 0.6),
        ..Default::default()
    };
    let samples = synth_corpus::<f32>(77, &spec);
    let cfg = GraphConfig::parse(TOY_CONFIG_64).unwrap().with_attention(&[], &[8, 11, 15]);
    let mut model = build_model::<f32>(&cfg, 3).unwrap();
    let tc = TrainConfig { epochs: 30, lr: 0.02, seed: 3, ..Default::default() };
    train(&mut model, &samples, &tc, |_| {}).unwrap();

    let mut hits = 0usize;
    let mut in_range = true;
    for s in &samples {
        let gt = s.labels[0];
        let map = gradcam_pp(&model, &s.image, gt.class_id, None).unwrap();
        in_range &= map.values.iter().all(|&v| (0.0..=1.0).contains(&v));
        let (py, px) = map.peak();
        let fx = (px as f64 + 0.5) / map.width as f64;
        let fy = (py as f64 + 0.5) / map.height as f64;
        let inside = fx >= gt.cx - gt.w / 2.0
            && fx <= gt.cx + gt.w / 2.0
            && fy >= gt.cy - gt.h / 2.0
            && fy <= gt.cy + gt.h / 2.0;
        if inside {
            hits += 1;
        }
    }
    report(
        9,
        hits * 100 >= 80 * samples.len() && in_range,
        &format!(
            "peak heat pixel inside GT box on {hits}/{} samples (>=80%), all values in [0,1]: {in_range}",
            samples.len()
        ),
    );
}

// ---------------------------------------------------------------------------
// 10. Determinism end to end (through the CLI binary)
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_determinism() {
    let bin = env!("CARGO_BIN_EXE_ecoweed");
    let dir = std::env::temp_dir().join(format!("ecoweed_acceptance_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    let cfg_path = dir.join("toy.cfg");
    std::fs::write(&cfg_path, TOY_CONFIG_64).unwrap();

    let run = |args: &[&str]| {
        let out = std::process::Command::new(bin)
            .args(args)
            .env("ECOWEED_THREADS", "2")
            .output()
            .expect("spawn cli");
        assert!(
            out.status.success(),
            "cli failed: {:?}\n{}",
            args,
            String::from_utf8_lossy(&out.stderr)
        );
    };
    let cfg_s = cfg_path.to_str().unwrap();

    for tag in ["a", "b"] {
        let out = dir.join(format!("train_{tag}"));
        run(&[
            "train",
            "--config",
            cfg_s,
            "--out",
            out.to_str().unwrap(),
            "--synthetic",
            "--synth-images",
            "16",
            "--epochs",
            "2",
            "--seed",
            "7",
        ]);
    }
    let m_a = std::fs::read(dir.join("train_a/metrics.tsv")).unwrap();
    let m_b = std::fs::read(dir.join("train_b/metrics.tsv")).unwrap();
    let metrics_identical = m_a == m_b;
    let manifest_identical = std::fs::read(dir.join("train_a/manifest.txt")).unwrap()
        == std::fs::read(dir.join("train_b/manifest.txt")).unwrap();
    let ckpt_identical = std::fs::read(dir.join("train_a/checkpoint.bin")).unwrap()
        == std::fs::read(dir.join("train_b/checkpoint.bin")).unwrap();

    // checkpoint round trip is bit-identical
    let ck = Checkpoint::read(&dir.join("train_a/checkpoint.bin")).unwrap();
    let rt = dir.join("roundtrip.bin");
    ck.write(&rt).unwrap();
    let roundtrip_identical =
        std::fs::read(dir.join("train_a/checkpoint.bin")).unwrap() == std::fs::read(&rt).unwrap();

    for tag in ["a", "b"] {
        let out = dir.join(format!("eval_{tag}"));
        run(&[
            "eval",
            "--checkpoint",
            dir.join("train_a/checkpoint.bin").to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--synthetic",
            "--synth-images",
            "16",
            "--seed",
            "7",
        ]);
    }
    let eval_identical = std::fs::read(dir.join("eval_a/report.kv")).unwrap()
        == std::fs::read(dir.join("eval_b/report.kv")).unwrap()
        && std::fs::read(dir.join("eval_a/confusion.tsv")).unwrap()
            == std::fs::read(dir.join("eval_b/confusion.tsv")).unwrap();

    for tag in ["a", "b"] {
        let out = dir.join(format!("split_{tag}"));
        run(&[
            "split",
            "--kfolds",
            "5",
            "--seed",
            "7",
            "--out",
            out.to_str().unwrap(),
            "--synthetic",
            "--synth-images",
            "20",
        ]);
    }
    let mut split_identical = true;
    for i in 0..5 {
        for part in ["train", "val"] {
            split_identical &= std::fs::read(dir.join(format!("split_a/fold_{i}_{part}.txt")))
                .unwrap()
                == std::fs::read(dir.join(format!("split_b/fold_{i}_{part}.txt"))).unwrap();
        }
    }

    report(
        10,
        metrics_identical
            && manifest_identical
            && ckpt_identical
            && roundtrip_identical
            && eval_identical
            && split_identical,
        &format!(
            "byte-identical reruns: metrics {metrics_identical}, manifest {manifest_identical}, checkpoint {ckpt_identical}, roundtrip {roundtrip_identical}, eval {eval_identical}, folds {split_identical}"
        ),
    );
}
