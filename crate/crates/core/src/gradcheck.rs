//! Central finite-difference verification of analytic gradients.
//!
//! Every check runs in f64 with step h = 1e-4 and passes when the relative
//! error `|a − n| / max(1, |a|, |n|)` stays at or below 1e-5 on every probed
//! element. Inputs near kinks (relu, max pooling) are drawn away from the
//! non-differentiable set.

use crate::attention::{rope_embed, RopeConfig};
use crate::graph::{Graph, Var};
use crate::pointgrid::{self, GridKind, PointCloud, WorldTransform};
use crate::{Result, Rng, Tensor};

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub probes: usize,
    pub pass: bool,
}

impl CheckReport {
    pub fn line(&self) -> String {
        format!(
            "{:<34} {}  max rel err {:.3e} over {} probes",
            self.name,
            if self.pass { "PASS" } else { "FAIL" },
            self.max_rel_err,
            self.probes
        )
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1.0_f64.max(a.abs()).max(n.abs())
}

/// Compare analytic gradients of `build` (a scalar-valued function of the
/// inputs) against central finite differences. Probes every element when
/// `max_probes_per_input` is `None`, otherwise a random subset per input.
pub fn check_fn(
    name: &str,
    inputs: &[Tensor<f64>],
    max_probes_per_input: Option<usize>,
    rng: &mut Rng,
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Result<CheckReport> {
    // Analytic pass.
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| grads.of_var(v).expect("leaf gradient").to_vec())
        .collect();

    let eval = |probe_input: usize, elem: usize, delta: f64| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut t = t.clone();
                if i == probe_input {
                    t.data_mut()[elem] += delta;
                }
                g.leaf(t, false)
            })
            .collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut max_err = 0.0f64;
    let mut probes = 0usize;
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let elems: Vec<usize> = match max_probes_per_input {
            Some(k) if k < n => {
                let mut set = std::collections::BTreeSet::new();
                while set.len() < k {
                    set.insert(rng.uniform_usize(n));
                }
                set.into_iter().collect()
            }
            _ => (0..n).collect(),
        };
        for e in elems {
            let plus = eval(i, e, FD_STEP)?;
            let minus = eval(i, e, -FD_STEP)?;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = rel_err(analytic[i][e], numeric);
            max_err = max_err.max(err);
            probes += 1;
        }
    }
    Ok(CheckReport {
        name: name.to_string(),
        max_rel_err: max_err,
        probes,
        pass: max_err <= FD_TOL,
    })
}

fn rand_tensor(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0))
}

/// Random values kept away from zero so relu-style kinks cannot sit inside
/// a finite-difference step.
fn rand_tensor_offside(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v = rng.uniform(0.05, 1.0);
        if rng.next_f64() < 0.5 {
            v
        } else {
            -v
        }
    })
}

fn rand_coords(n: usize, rng: &mut Rng) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| [rng.next_f64(), rng.next_f64(), rng.next_f64()])
        .collect()
}

/// Scalarize a tensor output with fixed weights so every output element
/// influences the loss.
fn weighted_sum(g: &mut Graph<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(weights.clone());
    let prod = g.mul(y, w)?;
    Ok(g.sum_all(prod))
}

/// Finite-difference checks for every differentiable op in the graph,
/// each over several random input draws (at least 20 probes per op).
pub fn op_suite(seed: u64) -> Result<Vec<CheckReport>> {
    let rng = Rng::new(seed);
    let mut reports: Vec<CheckReport> = Vec::new();
    let trials = 3;

    macro_rules! check {
        ($name:expr, $inputs:expr, $probes:expr, $build:expr) => {{
            let mut worst: Option<CheckReport> = None;
            for t in 0..trials {
                let mut trial_rng = rng.fork(t as u64 + 1000 * reports.len() as u64);
                let inputs = $inputs(&mut trial_rng);
                let rep = check_fn($name, &inputs, $probes, &mut trial_rng, $build)?;
                worst = Some(match worst {
                    Some(w) if w.max_rel_err >= rep.max_rel_err => CheckReport {
                        probes: w.probes + rep.probes,
                        ..w
                    },
                    Some(w) => CheckReport {
                        probes: w.probes + rep.probes,
                        ..rep
                    },
                    None => rep,
                });
            }
            reports.push(worst.unwrap());
        }};
    }

    check!(
        "add",
        |r: &mut Rng| vec![rand_tensor(&[3, 4], r), rand_tensor(&[3, 4], r)],
        None,
        |g, v| {
            let y = g.add(v[0], v[1])?;
            let w = Tensor::from_fn(&[3, 4], |i| 0.3 + 0.1 * i as f64);
            weighted_sum(g, y, &w)
        }
    );
    check!(
        "sub",
        |r: &mut Rng| vec![rand_tensor(&[3, 4], r), rand_tensor(&[3, 4], r)],
        None,
        |g, v| {
            let y = g.sub(v[0], v[1])?;
            let w = Tensor::from_fn(&[3, 4], |i| 0.9 - 0.05 * i as f64);
            weighted_sum(g, y, &w)
        }
    );
    check!(
        "mul",
        |r: &mut Rng| vec![rand_tensor(&[3, 4], r), rand_tensor(&[3, 4], r)],
        None,
        |g, v| {
            let y = g.mul(v[0], v[1])?;
            Ok(g.sum_all(y))
        }
    );
    check!(
        "mul_scalar",
        |r: &mut Rng| vec![rand_tensor(&[8], r)],
        None,
        |g, v| {
            let y = g.mul_scalar(v[0], -1.7);
            Ok(g.sum_all(y))
        }
    );
    check!(
        "add_row",
        |r: &mut Rng| vec![rand_tensor(&[4, 3], r), rand_tensor(&[3], r)],
        None,
        |g, v| {
            let y = g.add_row(v[0], v[1])?;
            let w = Tensor::from_fn(&[4, 3], |i| (i as f64).sin() + 1.2);
            weighted_sum(g, y, &w)
        }
    );
    check!(
        "mul_row",
        |r: &mut Rng| vec![rand_tensor(&[4, 3], r), rand_tensor(&[3], r)],
        None,
        |g, v| {
            let y = g.mul_row(v[0], v[1])?;
            let w = Tensor::from_fn(&[4, 3], |i| (i as f64).cos() - 0.4);
            weighted_sum(g, y, &w)
        }
    );
    check!(
        "matmul",
        |r: &mut Rng| vec![rand_tensor(&[4, 3], r), rand_tensor(&[3, 5], r)],
        None,
        |g, v| {
            let y = g.matmul(v[0], v[1])?;
            let w = Tensor::from_fn(&[4, 5], |i| 0.2 + 0.07 * i as f64);
            weighted_sum(g, y, &w)
        }
    );
    check!(
        "matmul_nt",
        |r: &mut Rng| vec![rand_tensor(&[4, 3], r), rand_tensor(&[5, 3], r)],
        None,
        |g, v| {
            let y = g.matmul_nt(v[0], v[1])?;
            let w = Tensor::from_fn(&[4, 5], |i| 0.2 - 0.03 * i as f64);
            weighted_sum(g, y, &w)
        }
    );
    check!(
        "relu",
        |r: &mut Rng| vec![rand_tensor_offside(&[6, 4], r)],
        None,
        |g, v| {
            let y = g.relu(v[0]);
            let w = Tensor::from_fn(&[6, 4], |i| 0.5 + 0.02 * i as f64);
            weighted_sum(g, y, &w)
        }
    );
    check!(
        "sigmoid",
        |r: &mut Rng| vec![rand_tensor(&[6, 4], r)],
        None,
        |g, v| {
            let y = g.sigmoid(v[0]);
            let w = Tensor::from_fn(&[6, 4], |i| 1.0 - 0.01 * i as f64);
            weighted_sum(g, y, &w)
        }
    );
    check!(
        "softmax",
        |r: &mut Rng| vec![rand_tensor(&[5, 7], r)],
        None,
        |g, v| {
            let y = g.softmax(v[0])?;
            let w = Tensor::from_fn(&[5, 7], |i| (0.3 * i as f64).sin());
            weighted_sum(g, y, &w)
        }
    );
    check!(
        "layer_norm",
        |r: &mut Rng| vec![rand_tensor(&[5, 8], r)],
        None,
        |g, v| {
            let y = g.layer_norm(v[0])?;
            let w = Tensor::from_fn(&[5, 8], |i| (0.2 * i as f64).cos() + 0.1);
            weighted_sum(g, y, &w)
        }
    );
    check!(
        "conv2d",
        |r: &mut Rng| vec![
            rand_tensor(&[2, 3, 5, 4], r),
            rand_tensor(&[2, 3, 3, 3], r),
            rand_tensor(&[2], r),
        ],
        Some(30),
        |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]))?;
            let w = Tensor::from_fn(&[2, 2, 5, 4], |i| (0.1 * i as f64).sin());
            weighted_sum(g, y, &w)
        }
    );
    check!(
        "conv2d_1x1",
        |r: &mut Rng| vec![rand_tensor(&[2, 3, 4, 4], r), rand_tensor(&[2, 3, 1, 1], r)],
        Some(30),
        |g, v| {
            let y = g.conv2d(v[0], v[1], None)?;
            let w = Tensor::from_fn(&[2, 2, 4, 4], |i| 0.4 - 0.01 * i as f64);
            weighted_sum(g, y, &w)
        }
    );
    check!(
        "conv_transpose2d",
        |r: &mut Rng| vec![
            rand_tensor(&[2, 3, 3, 4], r),
            rand_tensor(&[3, 2, 2, 2], r),
            rand_tensor(&[2], r),
        ],
        Some(30),
        |g, v| {
            let y = g.conv_transpose2d(v[0], v[1], Some(v[2]))?;
            let w = Tensor::from_fn(&[2, 2, 6, 8], |i| (0.05 * i as f64).cos());
            weighted_sum(g, y, &w)
        }
    );
    check!(
        "maxpool2d",
        |r: &mut Rng| vec![rand_tensor(&[2, 2, 4, 6], r)],
        Some(30),
        |g, v| {
            let y = g.maxpool2d(v[0])?;
            let w = Tensor::from_fn(&[2, 2, 2, 3], |i| 0.7 + 0.03 * i as f64);
            weighted_sum(g, y, &w)
        }
    );
    check!(
        "conv3d",
        |r: &mut Rng| vec![
            rand_tensor(&[1, 2, 4, 3, 4], r),
            rand_tensor(&[2, 2, 3, 3, 3], r),
            rand_tensor(&[2], r),
        ],
        Some(24),
        |g, v| {
            let y = g.conv3d(v[0], v[1], Some(v[2]))?;
            let w = Tensor::from_fn(&[1, 2, 4, 3, 4], |i| (0.11 * i as f64).sin());
            weighted_sum(g, y, &w)
        }
    );
    check!(
        "conv_transpose3d",
        |r: &mut Rng| vec![
            rand_tensor(&[1, 2, 2, 3, 2], r),
            rand_tensor(&[2, 2, 2, 2, 2], r),
            rand_tensor(&[2], r),
        ],
        Some(24),
        |g, v| {
            let y = g.conv_transpose3d(v[0], v[1], Some(v[2]))?;
            let w = Tensor::from_fn(&[1, 2, 4, 6, 4], |i| 0.2 + 0.01 * i as f64);
            weighted_sum(g, y, &w)
        }
    );
    check!(
        "maxpool3d",
        |r: &mut Rng| vec![rand_tensor(&[1, 2, 4, 4, 2], r)],
        Some(24),
        |g, v| {
            let y = g.maxpool3d(v[0])?;
            let w = Tensor::from_fn(&[1, 2, 2, 2, 1], |i| 0.8 - 0.05 * i as f64);
            weighted_sum(g, y, &w)
        }
    );
    check!(
        "gather_rows",
        |r: &mut Rng| vec![rand_tensor(&[6, 3], r)],
        None,
        |g, v| {
            let y = g.gather_rows(v[0], &[5, 0, 2, 2, 4])?;
            let w = Tensor::from_fn(&[5, 3], |i| (0.4 * i as f64).sin() + 0.2);
            weighted_sum(g, y, &w)
        }
    );
    check!(
        "scatter_add_rows",
        |r: &mut Rng| vec![rand_tensor(&[5, 3], r)],
        None,
        |g, v| {
            let y = g.scatter_add_rows(v[0], &[1, 1, 0, 3, 2], 4)?;
            let w = Tensor::from_fn(&[4, 3], |i| 0.6 - 0.02 * i as f64);
            weighted_sum(g, y, &w)
        }
    );
    check!(
        "max_rows_grouped",
        |r: &mut Rng| vec![rand_tensor(&[8, 3], r)],
        None,
        |g, v| {
            let y = g.max_rows_grouped(v[0], 4)?;
            let w = Tensor::from_fn(&[2, 3], |i| 0.5 + 0.09 * i as f64);
            weighted_sum(g, y, &w)
        }
    );
    check!(
        "concat",
        |r: &mut Rng| vec![rand_tensor(&[3, 2], r), rand_tensor(&[3, 4], r)],
        None,
        |g, v| {
            let y = g.concat(&[v[0], v[1]], 1)?;
            let w = Tensor::from_fn(&[3, 6], |i| (0.15 * i as f64).cos());
            weighted_sum(g, y, &w)
        }
    );
    check!(
        "narrow",
        |r: &mut Rng| vec![rand_tensor(&[4, 6], r)],
        None,
        |g, v| {
            let y = g.narrow(v[0], 1, 2, 3)?;
            let w = Tensor::from_fn(&[4, 3], |i| 0.3 + 0.04 * i as f64);
            weighted_sum(g, y, &w)
        }
    );
    check!(
        "transpose2d",
        |r: &mut Rng| vec![rand_tensor(&[3, 5], r)],
        None,
        |g, v| {
            let y = g.transpose2d(v[0])?;
            let w = Tensor::from_fn(&[5, 3], |i| 0.2 * (i as f64) - 1.0);
            weighted_sum(g, y, &w)
        }
    );
    check!(
        "reshape_mean_all",
        |r: &mut Rng| vec![rand_tensor(&[2, 6], r)],
        None,
        |g, v| {
            let y = g.reshape(v[0], &[3, 4])?;
            Ok(g.mean_all(y))
        }
    );
    check!(
        "rope",
        |r: &mut Rng| vec![rand_tensor(&[5, 12], r)],
        None,
        |g, v| {
            let cfg = RopeConfig::for_dim(12)?;
            let mut crng = Rng::new(77);
            let coords = rand_coords(5, &mut crng);
            let y = rope_embed(g, v[0], &coords, &cfg)?;
            let w = Tensor::from_fn(&[5, 12], |i| (0.21 * i as f64).sin() + 0.3);
            weighted_sum(g, y, &w)
        }
    );
    check!(
        "interpolate_triplane",
        |r: &mut Rng| vec![rand_tensor(&[3, 2, 4, 4], r)],
        Some(40),
        |g, v| {
            let mut crng = Rng::new(31);
            let coords = rand_coords(6, &mut crng);
            let y = pointgrid::interpolate(g, v[0], &coords, GridKind::Triplane)?;
            let w = Tensor::from_fn(&[6, 2], |i| 0.5 + 0.11 * i as f64);
            weighted_sum(g, y, &w)
        }
    );
    check!(
        "interpolate_voxel",
        |r: &mut Rng| vec![rand_tensor(&[1, 2, 4, 4, 4], r)],
        Some(40),
        |g, v| {
            let mut crng = Rng::new(32);
            let coords = rand_coords(6, &mut crng);
            let y = pointgrid::interpolate(g, v[0], &coords, GridKind::Voxel)?;
            let w = Tensor::from_fn(&[6, 2], |i| 0.5 - 0.07 * i as f64);
            weighted_sum(g, y, &w)
        }
    );
    check!(
        "point_to_grid_triplane",
        |r: &mut Rng| vec![rand_tensor(&[10, 2], r)],
        None,
        |g, v| {
            let mut crng = Rng::new(33);
            let pc =
                PointCloud::from_normalized(rand_coords(10, &mut crng), WorldTransform::IDENTITY)?;
            let y = pointgrid::point_to_grid(g, v[0], &pc, 3, GridKind::Triplane)?;
            let w = Tensor::from_fn(&[3, 2, 3, 3], |i| (0.09 * i as f64).sin());
            weighted_sum(g, y, &w)
        }
    );
    check!(
        "point_to_grid_voxel",
        |r: &mut Rng| vec![rand_tensor(&[10, 2], r)],
        None,
        |g, v| {
            let mut crng = Rng::new(34);
            let pc =
                PointCloud::from_normalized(rand_coords(10, &mut crng), WorldTransform::IDENTITY)?;
            let y = pointgrid::point_to_grid(g, v[0], &pc, 3, GridKind::Voxel)?;
            let w = Tensor::from_fn(&[1, 2, 3, 3, 3], |i| (0.13 * i as f64).cos());
            weighted_sum(g, y, &w)
        }
    );
    check!(
        "grouped_logits",
        |r: &mut Rng| vec![rand_tensor(&[3, 8], r), rand_tensor(&[12, 8], r)],
        None,
        |g, v| {
            let y = g.grouped_logits(v[0], v[1], 4, 2)?;
            let w = Tensor::from_fn(&[6, 4], |i| 0.25 + 0.08 * i as f64);
            weighted_sum(g, y, &w)
        }
    );
    check!(
        "grouped_weighted_sum",
        |r: &mut Rng| vec![rand_tensor(&[6, 4], r), rand_tensor(&[12, 8], r)],
        None,
        |g, v| {
            let y = g.grouped_weighted_sum(v[0], v[1], 2)?;
            let w = Tensor::from_fn(&[3, 8], |i| (0.17 * i as f64).sin() - 0.2);
            weighted_sum(g, y, &w)
        }
    );
    check!(
        "window_logits",
        |r: &mut Rng| vec![rand_tensor(&[12, 8], r), rand_tensor(&[12, 8], r)],
        None,
        |g, v| {
            let y = g.window_logits(v[0], v[1], 4, 2)?;
            let w = Tensor::from_fn(&[24, 4], |i| 0.3 + 0.02 * i as f64);
            weighted_sum(g, y, &w)
        }
    );
    check!(
        "window_weighted_sum",
        |r: &mut Rng| vec![rand_tensor(&[24, 4], r), rand_tensor(&[12, 8], r)],
        None,
        |g, v| {
            let y = g.window_weighted_sum(v[0], v[1], 4, 2)?;
            let w = Tensor::from_fn(&[12, 8], |i| (0.19 * i as f64).sin() + 0.4);
            weighted_sum(g, y, &w)
        }
    );
    check!(
        "bce_with_logits",
        |r: &mut Rng| vec![rand_tensor(&[9], r)],
        None,
        |g, v| {
            let targets = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0];
            g.bce_with_logits(v[0], &targets)
        }
    );
    check!(
        "plane_exchange",
        |r: &mut Rng| vec![rand_tensor(&[3, 2, 4, 4], r)],
        Some(40),
        |g, v| {
            let y = g.plane_exchange(v[0])?;
            let w = Tensor::from_fn(&[3, 6, 4, 4], |i| (0.05 * i as f64).sin() + 0.1);
            weighted_sum(g, y, &w)
        }
    );

    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_finite_difference_check() {
        let reports = op_suite(2024).unwrap();
        assert!(reports.len() >= 25);
        for r in &reports {
            assert!(r.probes >= 20, "{}: only {} probes", r.name, r.probes);
            assert!(r.pass, "{}", r.line());
        }
    }

    #[test]
    fn check_fn_catches_wrong_gradient() {
        let mut rng = Rng::new(1);
        // A build whose forward value disagrees between the analytic pass
        // (first call) and the probe passes must be flagged.
        let x = Tensor::<f64>::from_fn(&[4], |_| rng.uniform(0.5, 1.0));
        let flip = std::cell::Cell::new(false);
        let rep = check_fn("inconsistent", &[x], None, &mut rng, move |g, v| {
            let first = !flip.get();
            flip.set(true);
            let y = if first {
                g.mul(v[0], v[0])?
            } else {
                let two = g.mul_scalar(v[0], 2.0);
                g.mul(two, v[0])?
            };
            Ok(g.sum_all(y))
        })
        .unwrap();
        assert!(!rep.pass, "inconsistent build should fail: {}", rep.line());
    }
}
