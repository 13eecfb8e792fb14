use ecoweed_core::data::{synth_corpus, SynthSpec};
use ecoweed_core::explain::gradcam_pp;
use ecoweed_core::graph::{build_model, GraphConfig, TOY_CONFIG_64};
use ecoweed_core::train::{train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(30);
    let layer: Option<usize> = args.get(2).and_then(|s| s.parse().ok());
    let spec = SynthSpec {
        n_images: 50, boxes_per_image: (1, 1), size_range: (0.35, 0.6), ..Default::default()
    };
    let samples = synth_corpus::<f32>(77, &spec);
    let cfg = GraphConfig::parse(TOY_CONFIG_64).unwrap().with_attention(&[], &[8, 11, 15]);
    let mut model = build_model::<f32>(&cfg, 3).unwrap();
    let tc = TrainConfig { epochs, lr: 0.02, seed: 3, ..Default::default() };
    let run = train(&mut model, &samples, &tc, |_| {}).unwrap();
    let mut hits = 0;
    for (i, s) in samples.iter().enumerate() {
        let gt = s.labels[0];
        let map = gradcam_pp(&model, &s.image, gt.class_id, layer).unwrap();
        let (py, px) = map.peak();
        let fx = (px as f64 + 0.5) / map.width as f64;
        let fy = (py as f64 + 0.5) / map.height as f64;
        let inside = fx >= gt.cx - gt.w / 2.0 && fx <= gt.cx + gt.w / 2.0
            && fy >= gt.cy - gt.h / 2.0 && fy <= gt.cy + gt.h / 2.0;
        if inside { hits += 1; }
        if i < 3 {
            println!("sample {i}: class {} box x[{:.2},{:.2}] y[{:.2},{:.2}] peak ({fx:.2},{fy:.2}) inside={inside}",
                gt.class_id, gt.cx - gt.w/2.0, gt.cx + gt.w/2.0, gt.cy - gt.h/2.0, gt.cy + gt.h/2.0);
            // coarse 8x8 view of the heat
            for yy in 0..8 {
                let row: String = (0..8).map(|xx| {
                    let v = map.at(yy * 8 + 4, xx * 8 + 4);
                    char::from_digit((v * 9.0).round() as u32, 10).unwrap_or('9')
                }).collect();
                println!("   {row}");
            }
        }
    }
    println!("epochs {epochs} layer {layer:?}: mAP50 {:.3}, peak-in-box {hits}/50", run.epochs.last().unwrap().map50);
}
