use ecoweed_core::graph::{build_model, GraphConfig, TOY_CONFIG_64};
use ecoweed_core::{FeatureMap, Tape};

fn main() {
    let cfg = GraphConfig::parse(TOY_CONFIG_64).unwrap();
    let model = build_model::<f32>(&cfg, 0).unwrap();
    let mut tape = Tape::new();
    let img = FeatureMap::from_fn([2, 3, 64, 64], |_, c, h, w| ((c + h * w) as f32 * 0.01).sin());
    let _ = model.forward(&mut tape, &img, true).unwrap();
    let mut printed = 0;
    model.visit_buffers(&mut |name, data| {
        if printed < 4 {
            println!("{name}: {:?}", &data[..data.len().min(3)]);
            printed += 1;
        }
    });
}
