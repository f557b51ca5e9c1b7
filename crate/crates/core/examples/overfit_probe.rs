use recon_core::model::{Model, ModelConfig};
use recon_core::oracle::ShapeOracle;
use recon_core::pointgrid::GridKind;
use recon_core::surface::field_iou;
use recon_core::trainer::{train, TrainConfig};
use std::time::Instant;

fn main() {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(400);
    let m: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(1024);
    let lr: f64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(2e-3);
    let shape = std::env::args().nth(4).unwrap_or_else(|| "sphere".into());
    let cfg = ModelConfig { kind: GridKind::Triplane, r: 16, d: 8, l: 8, k: 16, heads: 4, k_conv: 16 };
    let mut model = Model::<f32>::new(cfg, 7).unwrap();
    let oracle = ShapeOracle::preset(&shape).unwrap();
    let tcfg = TrainConfig { steps, lr, n_points: 512, m_queries: m, seed: 11, log_every: 1000, ..TrainConfig::default() };
    let t0 = Instant::now();
    let out = std::env::temp_dir().join("overfit_probe");
    let res = train(&mut model, &tcfg, &oracle, &out).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!("{shape}: {steps} steps x M={m} lr={lr} in {:.0}s ({:.3} s/step)", dt, dt / steps as f64);
    for (i, l) in res.losses.iter().enumerate() {
        if i % (steps / 8).max(1) == 0 || i + 1 == res.losses.len() { println!("  step {i}: loss {l:.4}"); }
    }
    let iou = field_iou(&model, &res.pc, &oracle, 10_000, 99).unwrap();
    println!("  field IoU (10k probes): {:.4}", iou);

    let t1 = Instant::now();
    let grid = recon_core::surface::eval_occupancy_grid(&model, &res.pc, 64, 8192).unwrap();
    let mesh = recon_core::surface::marching_cubes(&grid, 0.5).unwrap();
    let mesh_world = mesh.to_world(&res.pc.transform);
    println!("  mesh: {} verts {} tris, manifold={} [{:.0}s grid+mc]",
        mesh_world.vertices.len(), mesh_world.triangles.len(), mesh_world.is_closed_manifold(), t1.elapsed().as_secs_f64());
    let rep = recon_core::surface::metrics(&mesh_world, &recon_core::surface::GroundTruth::Oracle(&oracle), 10_000, 7).unwrap();
    println!("  metrics: iou {:.4} chamfer {:.3} nc {:.4} fscore {:.4}", rep.iou, rep.chamfer_l1, rep.nc, rep.fscore);
}
