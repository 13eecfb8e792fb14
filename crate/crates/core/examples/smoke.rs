use ecoweed_core::data::{synth_corpus, SynthSpec};
use ecoweed_core::graph::{build_model, GraphConfig, TOY_CONFIG_64};
use ecoweed_core::train::{train, TrainConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(30);
    let n_images: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(200);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.01);
    let seed: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0);
    let cfg = GraphConfig::parse(TOY_CONFIG_64).unwrap();
    let mut model = build_model::<f32>(&cfg, seed).unwrap();
    let spec = SynthSpec { n_images, ..Default::default() };
    let samples = synth_corpus::<f32>(1234, &spec);
    let tc = TrainConfig { epochs, lr, seed, ..Default::default() };
    let t0 = Instant::now();
    let _ = train(&mut model, &samples, &tc, |m| {
        println!(
            "epoch {:>2}  box {:.4}  cls {:.4}  dfl {:.4}  P {:.3}  R {:.3}  mAP50 {:.3}  mAP50-95 {:.3}  [{:.1}s]",
            m.epoch, m.box_loss, m.cls_loss, m.dfl_loss, m.precision, m.recall, m.map50, m.map50_95,
            t0.elapsed().as_secs_f64()
        );
    })
    .unwrap();
}
