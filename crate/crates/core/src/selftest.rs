//! Runtime invariant suite behind the `selftest` CLI command: oracle
//! equivalences, exact symmetries, loss arithmetic, file-format roundtrips,
//! and a quick gradient check. Green here is the release gate.

use crate::attention::{partitions_for, rope_embed, AttentionBlock, DsptBlock, RopeConfig};
use crate::graph::Graph;
use crate::model::{toy_config, Model};
use crate::nn::ParamSet;

use crate::pointgrid::{
    self, normalize_points, GridKind, PointCloud, WorldTransform,
};
use crate::surface::{marching_cubes, OccupancyGrid};
use crate::{Error, Result, Rng, Tensor};

pub struct CheckOutcome {
    pub name: &'static str,
    pub result: Result<()>,
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::invalid(msg.into()))
    }
}

fn rand_coords(n: usize, rng: &mut Rng) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| [rng.next_f64(), rng.next_f64(), rng.next_f64()])
        .collect()
}

fn check_knn_vs_brute() -> Result<()> {
    let mut rng = Rng::new(101);
    let pts = rand_coords(800, &mut rng);
    for _ in 0..10 {
        let q = [rng.next_f64(), rng.next_f64(), rng.next_f64()];
        let got = pointgrid::knn_indices(q, &pts, 24)?;
        let mut all: Vec<(f64, usize)> = pts
            .iter()
            .enumerate()
            .map(|(i, p)| {
                (
                    (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2),
                    i,
                )
            })
            .collect();
        all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let want: Vec<usize> = all[..24].iter().map(|&(_, i)| i).collect();
        ensure(got == want, "knn disagrees with brute-force oracle")?;
    }
    Ok(())
}

#[allow(clippy::single_range_in_vec_init)]
fn check_windowed_vs_dense() -> Result<()> {
    let mut rng = Rng::new(102);
    let n = 12;
    let dim = 12;
    let coords = rand_coords(n, &mut rng);
    let pc = PointCloud::from_normalized(coords.clone(), WorldTransform::IDENTITY)?;
    let dspt = DsptBlock::<f64>::new("st", dim, 2, &mut rng)?;
    let feats = Tensor::from_fn(&[n, dim], |_| rng.uniform(-1.0, 1.0));

    // L = 1: sorted single window equals global dense attention per axis.
    let parts = partitions_for(&pc, 1)?;
    let mut g = Graph::new();
    let fv = g.constant(feats.clone());
    let windowed = dspt.forward(&mut g, &pc, fv, &parts)?;
    let windowed = g.value(windowed).clone();

    let mut cur = feats;
    for (block, part) in dspt.axis_blocks.iter().zip(parts.iter()) {
        let mut g2 = Graph::new();
        let sc: Vec<[f64; 3]> = part.sorted_index().iter().map(|&i| coords[i]).collect();
        let fv = g2.constant(cur.clone());
        let sorted = g2.gather_rows(fv, part.sorted_index())?;
        let windows = [0..n];
        let out = block.forward_windows(&mut g2, sorted, &sc, &windows)?;
        let out = part.unsort(&mut g2, out)?;
        cur = g2.value(out).clone();
    }
    let err = crate::tensor::max_abs_diff(&windowed, &cur);
    ensure(err <= 1e-5, format!("windowed vs dense attention: {err}"))
}

fn check_scatter_mean_vs_double_loop() -> Result<()> {
    let mut rng = Rng::new(103);
    let coords = rand_coords(64, &mut rng);
    let pc = PointCloud::from_normalized(coords.clone(), WorldTransform::IDENTITY)?;
    let feats = Tensor::<f64>::from_fn(&[64, 3], |_| rng.uniform(-1.0, 1.0));
    let r = 4;
    let mut g = Graph::new();
    let f = g.constant(feats.clone());
    let grid = pointgrid::point_to_grid(&mut g, f, &pc, r, GridKind::Triplane)?;
    let got = g.value(grid);
    let cell_of = |v: f64| ((v * r as f64) as isize).clamp(0, r as isize - 1) as usize;
    for (plane, &(a0, a1)) in pointgrid::PLANE_AXES.iter().enumerate() {
        for i in 0..r {
            for j in 0..r {
                for c in 0..3 {
                    let mut sum = 0.0;
                    let mut count = 0usize;
                    for (pt, p) in coords.iter().enumerate() {
                        if cell_of(p[a0]) == i && cell_of(p[a1]) == j {
                            sum += feats.data()[pt * 3 + c];
                            count += 1;
                        }
                    }
                    let want = if count == 0 { 0.0 } else { sum / count as f64 };
                    let got_v = got.data()[((plane * 3 + c) * r + i) * r + j];
                    ensure(
                        (got_v - want).abs() < 1e-12,
                        format!("scatter-mean cell ({plane},{i},{j},{c}): {got_v} vs {want}"),
                    )?;
                }
            }
        }
    }
    Ok(())
}

fn check_interpolation_vs_corner_weights() -> Result<()> {
    let mut rng = Rng::new(104);
    let r = 5;
    let d = 2;
    let grid_t = Tensor::<f64>::from_fn(&[1, d, r, r, r], |_| rng.uniform(-1.0, 1.0));
    let mut g = Graph::new();
    let grid = g.constant(grid_t.clone());
    let pts = rand_coords(30, &mut rng);
    let out = pointgrid::interpolate(&mut g, grid, &pts, GridKind::Voxel)?;
    let got = g.value(out);
    for (qi, &p) in pts.iter().enumerate() {
        for c in 0..d {
            let mut want = 0.0;
            let taps = |v: f64| {
                let u = v * r as f64 - 0.5;
                let i0 = u.floor();
                [(i0 as isize, 1.0 - (u - i0)), (i0 as isize + 1, u - i0)]
            };
            for (ix, wx) in taps(p[0]) {
                for (iy, wy) in taps(p[1]) {
                    for (iz, wz) in taps(p[2]) {
                        let (ix, iy, iz) = (
                            ix.clamp(0, r as isize - 1) as usize,
                            iy.clamp(0, r as isize - 1) as usize,
                            iz.clamp(0, r as isize - 1) as usize,
                        );
                        want += wx * wy * wz * grid_t.data()[((c * r + ix) * r + iy) * r + iz];
                    }
                }
            }
            let got_v = got.data()[qi * d + c];
            ensure(
                (got_v - want).abs() <= 1e-6,
                format!("interpolation query {qi} ch {c}: {got_v} vs {want}"),
            )?;
        }
    }
    Ok(())
}

fn check_partition_bijection() -> Result<()> {
    let mut rng = Rng::new(105);
    let coords = rand_coords(103, &mut rng);
    let pc = PointCloud::from_normalized(coords, WorldTransform::IDENTITY)?;
    for axis in pointgrid::Axis::ALL {
        let part = pointgrid::sort_and_split(&pc, axis, 11)?;
        let mut seen = [false; 103];
        for &i in part.sorted_index() {
            ensure(!seen[i], "index repeated in partition")?;
            seen[i] = true;
        }
        ensure(seen.iter().all(|&s| s), "partition missed an index")?;
        let sizes: Vec<usize> = part.windows().map(|w| w.len()).collect();
        let (mn, mx) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
        ensure(mx - mn <= 1, "window sizes differ by more than one")?;
    }
    Ok(())
}

fn check_encoder_permutation_equivariance() -> Result<()> {
    let model = Model::<f64>::new(toy_config(), 31)?;
    let mut rng = Rng::new(106);
    let n = 20;
    let coords = rand_coords(n, &mut rng);
    let pc = PointCloud::from_normalized(coords.clone(), WorldTransform::IDENTITY)?;

    let run = |pc: &PointCloud| -> Result<(Tensor<f64>, Tensor<f64>)> {
        let mut g = Graph::inference();
        let parts = model.partitions(pc)?;
        let lat = model.encode(&mut g, pc, &parts)?;
        Ok((g.value(lat.t_tilde).clone(), g.value(lat.c_tilde).clone()))
    };
    let (t0, c0) = run(&pc)?;
    let perm: Vec<usize> = (0..n).rev().collect();
    let pcoords: Vec<[f64; 3]> = perm.iter().map(|&i| coords[i]).collect();
    let pc2 = PointCloud::from_normalized(pcoords, WorldTransform::IDENTITY)?;
    let (t1, c1) = run(&pc2)?;
    ensure(t0 == t1, "grid latent changed under permutation")?;
    let d = c0.shape()[1];
    for (new_row, &orig) in perm.iter().enumerate() {
        for ch in 0..d {
            ensure(
                c1.row(new_row)[ch] == c0.row(orig)[ch],
                "point latent rows not equivariant",
            )?;
        }
    }
    Ok(())
}

fn check_rope_translation_invariance() -> Result<()> {
    let mut rng = Rng::new(107);
    let cfg = RopeConfig::for_dim(16)?;
    let block = AttentionBlock::<f64>::new("b", 16, 2, &mut rng)?;
    let x = Tensor::from_fn(&[5, 16], |_| rng.uniform(-1.0, 1.0));
    let coords = rand_coords(5, &mut rng);
    let t = [0.11, -0.07, 0.19];
    let shifted: Vec<[f64; 3]> = coords
        .iter()
        .map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]])
        .collect();
    let weights = |cs: &[[f64; 3]]| -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let q = block.wq.forward(&mut g, xv)?;
        let k = block.wk.forward(&mut g, xv)?;
        let q = rope_embed(&mut g, q, cs, &cfg)?;
        let k = rope_embed(&mut g, k, cs, &cfg)?;
        let logits = g.matmul_nt(q, k)?;
        let w = g.softmax(logits)?;
        Ok(g.value(w).data().to_vec())
    };
    let a = weights(&coords)?;
    let b = weights(&shifted)?;
    for (x, y) in a.iter().zip(&b) {
        ensure(
            (x - y).abs() <= 1e-5,
            format!("attention weights moved under translation: {x} vs {y}"),
        )?;
    }
    Ok(())
}

fn check_loss_arithmetic() -> Result<()> {
    let mut g = Graph::<f64>::new();
    let logits = g.constant(Tensor::zeros(&[10]));
    let targets: Vec<f64> = (0..10).map(|i| f64::from(i % 2 == 0)).collect();
    let loss = g.bce_with_logits(logits, &targets)?;
    ensure(
        (g.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-6,
        "uniform bce is not ln 2",
    )?;

    let probs: [f64; 3] = [0.9, 0.2, 0.5];
    let logits: Vec<f64> = probs.iter().map(|p| (p / (1.0 - p)).ln()).collect();
    let mut g = Graph::<f64>::new();
    let lv = g.constant(Tensor::from_vec(&[3], logits)?);
    let loss = g.bce_with_logits(lv, &[1.0, 0.0, 1.0])?;
    let expected = -(0.9f64.ln() + 0.8f64.ln() + 0.5f64.ln()) / 3.0;
    ensure(
        (g.value(loss).item() - expected).abs() < 1e-4,
        "three-sample bce hand case failed",
    )?;

    ensure(
        crate::trainer::cosine_lr(0, 10, 1e-3, 0.0) == 1e-3,
        "cosine start",
    )?;
    ensure(
        crate::trainer::cosine_lr(10, 10, 1e-3, 0.0).abs() < 1e-19,
        "cosine end",
    )?;
    Ok(())
}

fn check_roundtrips() -> Result<()> {
    let dir = std::env::temp_dir().join("recon_selftest");
    std::fs::create_dir_all(&dir)?;

    // DPTC bit-exactness (f32 payload).
    let mut rng = Rng::new(108);
    let pts: Vec<[f64; 3]> = (0..64)
        .map(|_| {
            [
                rng.uniform(-2.0, 2.0) as f32 as f64,
                rng.uniform(-2.0, 2.0) as f32 as f64,
                rng.uniform(-2.0, 2.0) as f32 as f64,
            ]
        })
        .collect();
    let p1 = dir.join("a.dptc");
    let p2 = dir.join("b.dptc");
    pointgrid::write_dptc(&p1, &pts, None)?;
    let (back, _) = pointgrid::read_dptc(&p1)?;
    pointgrid::write_dptc(&p2, &back, None)?;
    ensure(std::fs::read(&p1)? == std::fs::read(&p2)?, "dptc not bit-stable")?;

    // Config JSON roundtrip.
    let cfg = crate::config::RunConfig {
        model: toy_config(),
        train: crate::trainer::TrainConfig {
            steps: 5,
            n_points: 64,
            seed: 1,
            ..Default::default()
        },
        data: crate::config::DataSpec::OracleName("torus".into()),
        output_dir: "out".into(),
    };
    let back = crate::config::RunConfig::from_json(&cfg.to_json()?)?;
    ensure(back == cfg, "config roundtrip not identity")?;

    // Checkpoint roundtrip through a toy model.
    let model = Model::<f32>::new(toy_config(), 3)?;
    let ck = dir.join("m.dtck");
    model.save(&ck, false)?;
    let loaded = Model::<f32>::load(&ck)?;
    for (a, b) in model.params().iter().zip(loaded.params()) {
        ensure(a.value == b.value, "checkpoint altered a parameter")?;
    }
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}

fn check_normalization_roundtrip() -> Result<()> {
    let mut rng = Rng::new(109);
    let raw: Vec<[f64; 3]> = (0..100)
        .map(|_| {
            [
                rng.uniform(-5.0, 3.0),
                rng.uniform(0.0, 40.0),
                rng.uniform(-1.0, -0.5),
            ]
        })
        .collect();
    let pc = normalize_points(&raw, 0.1)?;
    for (n, w) in pc.coords().iter().zip(&raw) {
        let back = pc.transform.to_world(*n);
        for a in 0..3 {
            ensure(
                (back[a] - w[a]).abs() < 1e-6,
                "normalize/to_world roundtrip drift",
            )?;
        }
    }
    Ok(())
}

fn check_marching_cubes_manifold() -> Result<()> {
    let grid = OccupancyGrid::from_fn(24, |p| {
        let d2 = (p[0] - 0.5).powi(2) + (p[1] - 0.5).powi(2) + (p[2] - 0.5).powi(2);
        f64::from(d2 <= 0.09)
    });
    let mesh = marching_cubes(&grid, 0.5)?;
    ensure(!mesh.is_empty(), "sphere mesh empty")?;
    ensure(mesh.is_closed_manifold(), "sphere mesh not manifold")
}

fn check_quick_gradients() -> Result<()> {
    // Spot-check a few ops; the full per-op sweep runs in `gradcheck`.
    let mut rng = Rng::new(110);
    for name in ["matmul", "softmax", "layer_norm"] {
        let rep = match name {
            "matmul" => crate::gradcheck::check_fn(
                name,
                &[
                    Tensor::from_fn(&[3, 4], |_| rng.uniform(-1.0, 1.0)),
                    Tensor::from_fn(&[4, 2], |_| rng.uniform(-1.0, 1.0)),
                ],
                None,
                &mut rng,
                |g, v| {
                    let y = g.matmul(v[0], v[1])?;
                    Ok(g.sum_all(y))
                },
            )?,
            "softmax" => crate::gradcheck::check_fn(
                name,
                &[Tensor::from_fn(&[4, 5], |_| rng.uniform(-1.0, 1.0))],
                None,
                &mut rng,
                |g, v| {
                    let y = g.softmax(v[0])?;
                    let w = g.constant(Tensor::from_fn(&[4, 5], |i| 0.1 * i as f64));
                    let p = g.mul(y, w)?;
                    Ok(g.sum_all(p))
                },
            )?,
            _ => crate::gradcheck::check_fn(
                name,
                &[Tensor::from_fn(&[4, 6], |_| rng.uniform(-1.0, 1.0))],
                None,
                &mut rng,
                |g, v| {
                    let y = g.layer_norm(v[0])?;
                    let w = g.constant(Tensor::from_fn(&[4, 6], |i| 0.2 + 0.05 * i as f64));
                    let p = g.mul(y, w)?;
                    Ok(g.sum_all(p))
                },
            )?,
        };
        ensure(rep.pass, rep.line())?;
    }
    Ok(())
}

/// Run every invariant check, reporting one outcome per check.
pub fn run_all() -> Vec<CheckOutcome> {
    macro_rules! checks {
        ($(($name:literal, $f:expr)),+ $(,)?) => {
            vec![$(CheckOutcome { name: $name, result: $f() }),+]
        };
    }
    checks![
        ("knn_vs_brute_force", check_knn_vs_brute),
        ("windowed_vs_dense_attention", check_windowed_vs_dense),
        ("scatter_mean_vs_double_loop", check_scatter_mean_vs_double_loop),
        ("interpolation_vs_corner_weights", check_interpolation_vs_corner_weights),
        ("window_partition_bijection", check_partition_bijection),
        ("encoder_permutation_equivariance", check_encoder_permutation_equivariance),
        ("rope_translation_invariance", check_rope_translation_invariance),
        ("loss_and_schedule_arithmetic", check_loss_arithmetic),
        ("file_format_roundtrips", check_roundtrips),
        ("normalization_roundtrip", check_normalization_roundtrip),
        ("marching_cubes_manifold", check_marching_cubes_manifold),
        ("gradient_spot_checks", check_quick_gradients),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selftest_is_green() {
        for outcome in run_all() {
            if let Err(e) = &outcome.result {
                panic!("{} failed: {e}", outcome.name);
            }
        }
    }
}
