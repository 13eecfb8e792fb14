use ecoweed_core::graph::*;
fn main() {
    for (name, text) in [("baseline", REFERENCE_CONFIG_640), ("best", BEST_CONFIG_640)] {
        let cfg = GraphConfig::parse(text).unwrap();
        let m = build_model::<f32>(&cfg, 0).unwrap();
        let s = m.summary(640).unwrap();
        println!("{name}: {} params ({:.3}M), {:.3} GFLOPs", s.total_params, s.total_params as f64/1e6, s.gflops());
    }
    let cfg = GraphConfig::parse(TOY_CONFIG_64).unwrap();
    let m = build_model::<f32>(&cfg, 0).unwrap();
    let s = m.summary(64).unwrap();
    println!("toy: {} params, {:.4} GFLOPs, {} MMACs", s.total_params, s.gflops(), s.total_macs/1_000_000);
}
