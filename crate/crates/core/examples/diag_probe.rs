use recon_core::graph::Graph;
use recon_core::model::{Model, ModelConfig};
use recon_core::nn::{adam_step, apply_grads, ParamSet};
use recon_core::oracle::ShapeOracle;
use recon_core::pointgrid::GridKind;
use recon_core::trainer::sample_training_pair;
use recon_core::Rng;
use std::time::Instant;

fn main() {
    let cfg = ModelConfig { kind: GridKind::Triplane, r: 16, d: 8, l: 8, k: 16, heads: 4, k_conv: 16 };
    let mut model = Model::<f32>::new(cfg, 7).unwrap();
    let oracle = ShapeOracle::preset("sphere").unwrap();
    let mut rng = Rng::new(11);
    let batch = sample_training_pair(&oracle, 512, 128, 0.005, 0.5, 0.05, &mut rng).unwrap();
    let targets: Vec<f32> = batch.targets.iter().map(|&t| t as f32).collect();
    let parts = model.partitions(&batch.pc).unwrap();
    let lr: f32 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3e-3);
    let t0 = Instant::now();
    for step in 0..100 {
        let mut g = Graph::new();
        let lat = model.encode(&mut g, &batch.pc, &parts).unwrap();
        let logits = model.decode(&mut g, &batch.pc, &lat, &batch.queries).unwrap();
        let loss = g.bce_with_logits(logits, &targets).unwrap();
        let lv = g.value(loss).item();
        if step % 20 == 0 { println!("step {step}: loss {lv:.4}"); }
        let grads = g.backward(loss).unwrap();
        apply_grads(&mut model, &grads).unwrap();
        adam_step(&mut model.params_mut(), lr as f64, (0.9, 0.999), 1e-8).unwrap();
    }
    println!("120 memorization steps in {:.1}s", t0.elapsed().as_secs_f64());
}
