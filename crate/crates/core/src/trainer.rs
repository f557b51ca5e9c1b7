//! Training: binary cross entropy from logits, cosine learning-rate
//! schedule, noisy-cloud and query sampling against an analytic oracle, and
//! the seeded training loop.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::graph::Graph;
use crate::model::Model;
use crate::nn::{self, ParamSet};
use crate::oracle::ShapeOracle;
use crate::pointgrid::{normalize_points, PointCloud};
use crate::{Error, Result, Rng, Scalar};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Optimizer steps (one cloud + one query batch per step).
    pub steps: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub lr_min: f64,
    /// Input points sampled per cloud.
    pub n_points: usize,
    /// Query points per iteration.
    #[serde(default = "default_m")]
    pub m_queries: usize,
    /// Std of the Gaussian noise on input points, as a fraction of the
    /// unit cube.
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
    /// Fraction of queries drawn near the surface (the rest are uniform in
    /// the unit cube).
    #[serde(default = "default_near_fraction")]
    pub near_surface_fraction: f64,
    /// Std of the near-surface query offset, in normalized units.
    #[serde(default = "default_near_sigma")]
    pub near_surface_sigma: f64,
    pub seed: u64,
    /// Resample the input cloud every step instead of freezing one noisy
    /// observation (the reconstruct-one-scan setting).
    #[serde(default)]
    pub resample_points: bool,
    /// Optional global-norm gradient clip for NaN recovery.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Log every n-th step (1 = every step).
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

fn default_lr() -> f64 {
    1e-4
}
fn default_m() -> usize {
    2048
}
fn default_noise() -> f64 {
    0.005
}
fn default_near_fraction() -> f64 {
    0.5
}
fn default_near_sigma() -> f64 {
    0.05
}
fn default_log_every() -> usize {
    1
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            lr: 1e-4,
            lr_min: 0.0,
            n_points: 3000,
            m_queries: 2048,
            noise_sigma: 0.005,
            near_surface_fraction: 0.5,
            near_surface_sigma: 0.05,
            seed: 0,
            resample_points: false,
            grad_clip: None,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.n_points == 0 || self.m_queries == 0 {
            return Err(Error::invalid("train config: steps/n_points/m_queries must be positive"));
        }
        if self.noise_sigma < 0.0 || !(0.0..=1.0).contains(&self.near_surface_fraction) {
            return Err(Error::invalid("train config: bad noise or query mix"));
        }
        if self.lr < 0.0 || self.lr_min < 0.0 || self.lr_min > self.lr {
            return Err(Error::invalid("train config: bad learning rates"));
        }
        Ok(())
    }
}

/// Cosine annealing: lr_min + (lr_max - lr_min)(1 + cos(pi step/total))/2.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> f64 {
    debug_assert!(step <= total_steps);
    if total_steps == 0 {
        return lr_max;
    }
    let t = step as f64 / total_steps as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// One training sample: a normalized noisy observation of the oracle plus a
/// query batch with analytic occupancy targets.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub raw_points: Vec<[f64; 3]>,
    pub pc: PointCloud,
    /// Query coordinates in the normalized frame of `pc`.
    pub queries: Vec<[f64; 3]>,
    /// Occupancy bits (0.0 / 1.0).
    pub targets: Vec<f64>,
}

/// Surface samples with per-coordinate Gaussian noise, in oracle units.
pub fn sample_noisy_cloud(
    oracle: &ShapeOracle,
    n: usize,
    noise_sigma: f64,
    rng: &mut Rng,
) -> Vec<[f64; 3]> {
    let (pts, _) = oracle.surface_samples(n, rng);
    pts.into_iter()
        .map(|p| {
            [
                p[0] + rng.normal_scaled(0.0, noise_sigma),
                p[1] + rng.normal_scaled(0.0, noise_sigma),
                p[2] + rng.normal_scaled(0.0, noise_sigma),
            ]
        })
        .collect()
}

/// Queries in the normalized frame of `pc`: a near-surface fraction around
/// oracle surface samples, the rest uniform in the unit cube. Targets come
/// from the analytic oracle evaluated in world coordinates.
pub fn sample_queries(
    oracle: &ShapeOracle,
    pc: &PointCloud,
    m: usize,
    near_fraction: f64,
    near_sigma: f64,
    rng: &mut Rng,
) -> (Vec<[f64; 3]>, Vec<f64>) {
    let n_near = (m as f64 * near_fraction).round() as usize;
    let mut queries = Vec::with_capacity(m);
    for i in 0..m {
        let q = if i < n_near {
            let (s, _) = oracle.surface_sample_one(rng);
            let sn = pc.transform.to_normalized(s);
            [
                (sn[0] + rng.normal_scaled(0.0, near_sigma)).clamp(0.0, 1.0),
                (sn[1] + rng.normal_scaled(0.0, near_sigma)).clamp(0.0, 1.0),
                (sn[2] + rng.normal_scaled(0.0, near_sigma)).clamp(0.0, 1.0),
            ]
        } else {
            [rng.next_f64(), rng.next_f64(), rng.next_f64()]
        };
        queries.push(q);
    }
    let targets = queries
        .iter()
        .map(|&q| f64::from(oracle.occupancy(pc.transform.to_world(q))))
        .collect();
    (queries, targets)
}

/// Full sampling step: noisy cloud, normalization, queries, targets.
pub fn sample_training_pair(
    oracle: &ShapeOracle,
    n: usize,
    m: usize,
    noise_sigma: f64,
    near_fraction: f64,
    near_sigma: f64,
    rng: &mut Rng,
) -> Result<TrainingBatch> {
    let raw_points = sample_noisy_cloud(oracle, n, noise_sigma, rng);
    let pc = normalize_points(&raw_points, 0.1)?;
    let (queries, targets) = sample_queries(oracle, &pc, m, near_fraction, near_sigma, rng);
    Ok(TrainingBatch {
        raw_points,
        pc,
        queries,
        targets,
    })
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub wallclock: f64,
}

#[derive(Debug)]
pub struct TrainResult {
    pub losses: Vec<f64>,
    pub best_loss: f64,
    pub best_step: usize,
    pub checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub log_path: PathBuf,
    /// The (last) training cloud, for immediate reconstruction.
    pub pc: PointCloud,
}

/// Seeded training loop. Loss is logged per step as JSON lines; checkpoints
/// are written at the end (latest and best-loss parameters). A NaN loss
/// aborts with a diagnostic dump of the offending batch.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    cfg: &TrainConfig,
    oracle: &ShapeOracle,
    out_dir: &Path,
) -> Result<TrainResult> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let log_path = out_dir.join("train_log.jsonl");
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path)?);

    let mut rng = Rng::new(cfg.seed);
    let started = Instant::now();

    let mut batch = sample_training_pair(
        oracle,
        cfg.n_points,
        cfg.m_queries,
        cfg.noise_sigma,
        cfg.near_surface_fraction,
        cfg.near_surface_sigma,
        &mut rng,
    )?;
    let mut partitions = model.partitions(&batch.pc)?;

    let mut losses = Vec::with_capacity(cfg.steps);
    let mut best_loss = f64::INFINITY;
    let mut best_step = 0;
    let mut best_params: Vec<crate::Tensor<T>> =
        model.params().iter().map(|p| p.value.clone()).collect();

    for step in 0..cfg.steps {
        if cfg.resample_points {
            batch = sample_training_pair(
                oracle,
                cfg.n_points,
                cfg.m_queries,
                cfg.noise_sigma,
                cfg.near_surface_fraction,
                cfg.near_surface_sigma,
                &mut rng,
            )?;
            partitions = model.partitions(&batch.pc)?;
        } else {
            let (q, t) = sample_queries(
                oracle,
                &batch.pc,
                cfg.m_queries,
                cfg.near_surface_fraction,
                cfg.near_surface_sigma,
                &mut rng,
            );
            batch.queries = q;
            batch.targets = t;
        }

        let mut g = Graph::new();
        let latents = model.encode(&mut g, &batch.pc, &partitions)?;
        let logits = model.decode(&mut g, &batch.pc, &latents, &batch.queries)?;
        let targets: Vec<T> = batch.targets.iter().map(|&t| T::from_f64(t)).collect();
        let loss_var = g.bce_with_logits(logits, &targets)?;
        let loss = g.value(loss_var).item().to_f64();

        if !loss.is_finite() {
            let dump = out_dir.join(format!("nan_batch_step{step}.json"));
            let payload = serde_json::json!({
                "step": step,
                "raw_points": batch.raw_points,
                "queries": batch.queries,
                "targets": batch.targets,
            });
            std::fs::write(&dump, serde_json::to_vec_pretty(&payload)?)?;
            return Err(Error::invalid(format!(
                "non-finite loss at step {step}; offending batch dumped to {}",
                dump.display()
            )));
        }

        let grads = g.backward(loss_var)?;
        nn::apply_grads(model, &grads)?;
        if let Some(max_norm) = cfg.grad_clip {
            nn::clip_grad_norm(&mut model.params_mut(), max_norm);
        }
        let lr = cosine_lr(step, cfg.steps, cfg.lr, cfg.lr_min);
        nn::adam_step(&mut model.params_mut(), lr, (0.9, 0.999), 1e-8)?;

        losses.push(loss);
        if loss < best_loss {
            best_loss = loss;
            best_step = step;
            for (copy, p) in best_params.iter_mut().zip(model.params()) {
                *copy = p.value.clone();
            }
        }
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            let entry = StepLog {
                step,
                loss,
                lr,
                wallclock: started.elapsed().as_secs_f64(),
            };
            serde_json::to_writer(&mut log, &entry)?;
            log.write_all(b"\n")?;
        }
    }
    log.flush()?;

    let checkpoint = out_dir.join("ckpt_latest.dtck");
    model.save(&checkpoint, true)?;

    // Best-loss parameters, written from the stored copy.
    let best_checkpoint = out_dir.join("ckpt_best.dtck");
    {
        let mut snapshot = model.clone();
        for (p, copy) in snapshot.params_mut().into_iter().zip(&best_params) {
            p.value = copy.clone();
        }
        snapshot.save(&best_checkpoint, false)?;
    }

    Ok(TrainResult {
        losses,
        best_loss,
        best_step,
        checkpoint,
        best_checkpoint,
        log_path,
        pc: batch.pc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{toy_config, Model};

    #[test]
    fn bce_uniform_logits_is_ln2() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(crate::Tensor::zeros(&[16]));
        let targets: Vec<f64> = (0..16).map(|i| f64::from(i % 2 == 0)).collect();
        let loss = g.bce_with_logits(logits, &targets).unwrap();
        assert!((g.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn bce_confident_predictions_vanish() {
        let mut g = Graph::<f64>::new();
        let logits =
            g.constant(crate::Tensor::from_vec(&[4], vec![20.0, -20.0, 20.0, -20.0]).unwrap());
        let targets = vec![1.0, 0.0, 1.0, 0.0];
        let loss = g.bce_with_logits(logits, &targets).unwrap();
        assert!(g.value(loss).item() < 1e-8);
    }

    #[test]
    fn bce_three_sample_hand_case() {
        // Probabilities (0.9, 0.2, 0.5) with targets (1, 0, 1):
        // loss = -(ln 0.9 + ln 0.8 + ln 0.5)/3, recomputed independently.
        let probs: [f64; 3] = [0.9, 0.2, 0.5];
        let targets = [1.0, 0.0, 1.0];
        let logits: Vec<f64> = probs.iter().map(|p| (p / (1.0 - p)).ln()).collect();
        let expected = -(0.9f64.ln() + 0.8f64.ln() + 0.5f64.ln()) / 3.0;

        let mut g = Graph::<f64>::new();
        let lv = g.constant(crate::Tensor::from_vec(&[3], logits).unwrap());
        let loss = g.bce_with_logits(lv, &targets).unwrap();
        assert!((g.value(loss).item() - expected).abs() < 1e-4);
        assert!((expected - 0.3405).abs() < 1e-4);
    }

    #[test]
    fn bce_stable_for_extreme_logits() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(crate::Tensor::from_vec(&[4], vec![-50.0, 50.0, -50.0, 50.0]).unwrap());
        let targets = vec![1.0, 0.0, 0.0, 1.0];
        let loss = g.bce_with_logits(logits, &targets).unwrap();
        assert!(g.value(loss).item().is_finite());
    }

    #[test]
    fn cosine_schedule_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 1e-4, 0.0), 1e-4);
        assert!(cosine_lr(100, 100, 1e-4, 0.0).abs() < 1e-20);
        assert!((cosine_lr(50, 100, 1e-4, 0.0) - 5e-5).abs() < 1e-12);
    }

    #[test]
    fn cosine_schedule_non_increasing() {
        let mut prev = f64::INFINITY;
        for step in 0..=500 {
            let lr = cosine_lr(step, 500, 3e-4, 1e-6);
            assert!(lr <= prev + 1e-18);
            prev = lr;
        }
    }

    #[test]
    fn zero_noise_sphere_samples_on_radius() {
        let oracle = ShapeOracle::Sphere {
            center: [0.5; 3],
            radius: 0.3,
        };
        let mut rng = Rng::new(1);
        let pts = sample_noisy_cloud(&oracle, 200, 0.0, &mut rng);
        for p in pts {
            let r = ((p[0] - 0.5).powi(2) + (p[1] - 0.5).powi(2) + (p[2] - 0.5).powi(2)).sqrt();
            assert!((r - 0.3).abs() < 1e-6);
        }
    }

    #[test]
    fn uniform_query_positive_fraction_matches_volume() {
        // Box of volume v: fraction of positive targets within 3 sigma of
        // the binomial expectation (uniform queries only).
        let oracle = ShapeOracle::Box {
            center: [0.5; 3],
            half_extents: [0.3, 0.25, 0.2],
        };
        let mut rng = Rng::new(2);
        let batch =
            sample_training_pair(&oracle, 400, 20_000, 0.0, 0.0, 0.05, &mut rng).unwrap();
        // Volume in the normalized frame: the bbox is rescaled into
        // [0.05, 0.95] on the longest axis, so compute via the transform.
        let m = batch.targets.len() as f64;
        let frac = batch.targets.iter().sum::<f64>() / m;
        let mut inside = 0usize;
        let probes = 200_000;
        let mut prng = Rng::new(3);
        for _ in 0..probes {
            let q = [prng.next_f64(), prng.next_f64(), prng.next_f64()];
            if oracle.occupancy(batch.pc.transform.to_world(q)) {
                inside += 1;
            }
        }
        let v = inside as f64 / probes as f64;
        let sigma = (v * (1.0 - v) / m).sqrt();
        assert!(
            (frac - v).abs() < 3.5 * sigma + 1e-3,
            "frac {frac} vs volume {v} (sigma {sigma})"
        );
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let oracle = ShapeOracle::preset("torus").unwrap();
        let mut a = Rng::new(77);
        let mut b = Rng::new(77);
        let ba = sample_training_pair(&oracle, 100, 64, 0.005, 0.5, 0.05, &mut a).unwrap();
        let bb = sample_training_pair(&oracle, 100, 64, 0.005, 0.5, 0.05, &mut b).unwrap();
        assert_eq!(ba.raw_points, bb.raw_points);
        assert_eq!(ba.queries, bb.queries);
        assert_eq!(ba.targets, bb.targets);
    }

    #[test]
    fn lr_zero_keeps_parameters() {
        let mut model = Model::<f32>::new(toy_config(), 5).unwrap();
        let before: Vec<Vec<f32>> = model
            .params()
            .iter()
            .map(|p| p.value.data().to_vec())
            .collect();
        let oracle = ShapeOracle::preset("sphere").unwrap();
        let cfg = TrainConfig {
            steps: 3,
            lr: 0.0,
            n_points: 32,
            m_queries: 16,
            seed: 1,
            log_every: 10,
            ..TrainConfig::default()
        };
        let dir = std::env::temp_dir().join("recon_train_lr0");
        train(&mut model, &cfg, &oracle, &dir).unwrap();
        for (p, b) in model.params().iter().zip(&before) {
            assert_eq!(p.value.data(), b.as_slice(), "{} moved", p.name);
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn initial_loss_near_ln2_on_balanced_targets() {
        let model = Model::<f32>::new(toy_config(), 6).unwrap();
        let oracle = ShapeOracle::preset("sphere").unwrap();
        let mut rng = Rng::new(9);
        let batch = sample_training_pair(&oracle, 64, 256, 0.005, 0.5, 0.05, &mut rng).unwrap();
        // Balance the target set exactly by construction.
        let mut queries = Vec::new();
        let mut targets = Vec::new();
        let (mut pos, mut neg) = (0, 0);
        for (q, t) in batch.queries.iter().zip(&batch.targets) {
            if *t > 0.5 && pos < 64 {
                pos += 1;
                queries.push(*q);
                targets.push(1.0f32);
            }
            if *t < 0.5 && neg < 64 {
                neg += 1;
                queries.push(*q);
                targets.push(0.0f32);
            }
        }
        assert!(pos >= 32 && neg >= 32, "unbalanced draw: {pos}/{neg}");
        let mut g = Graph::new();
        let logits = model.forward(&mut g, &batch.pc, &queries).unwrap();
        let loss = g.bce_with_logits(logits, &targets).unwrap();
        let l = g.value(loss).item() as f64;
        assert!((0.6..=0.8).contains(&l), "initial loss {l}");
    }

    #[test]
    fn seeded_training_is_bit_reproducible() {
        let oracle = ShapeOracle::preset("sphere").unwrap();
        let cfg = TrainConfig {
            steps: 4,
            lr: 1e-3,
            n_points: 48,
            m_queries: 32,
            seed: 123,
            log_every: 10,
            ..TrainConfig::default()
        };
        let run = |dir: &str| -> (Vec<f64>, Vec<Vec<f32>>) {
            let mut model = Model::<f32>::new(toy_config(), 42).unwrap();
            let out = std::env::temp_dir().join(dir);
            let res = train(&mut model, &cfg, &oracle, &out).unwrap();
            let params = model
                .params()
                .iter()
                .map(|p| p.value.data().to_vec())
                .collect();
            std::fs::remove_dir_all(&out).ok();
            (res.losses, params)
        };
        let (la, pa) = run("recon_det_a");
        let (lb, pb) = run("recon_det_b");
        assert_eq!(la, lb, "loss curves differ");
        assert_eq!(pa, pb, "parameter trajectories differ");
    }
}
