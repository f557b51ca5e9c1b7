//! The full reconstruction model: point-conv stem, dual-latent U-Net, and
//! implicit decoder, with checkpoint persistence.

use std::path::Path;

use crate::attention::partitions_for;
use crate::decoder::{iid_forward, IidWeights};
use crate::encoder::{DualLatentUNet, PointEncoder, UNetConfig};
use crate::graph::{Graph, Var};
use crate::nn::{self, ParamSet, Parameter};
use crate::pointgrid::{GridKind, PointCloud, WindowPartition};
use crate::{Error, Result, Rng, Scalar};

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: GridKind,
    /// Grid latent resolution (cells per axis); divisible by 4.
    pub r: usize,
    /// Latent channel width.
    pub d: usize,
    /// Number of windows per axis in the point transformer.
    pub l: usize,
    /// Neighbors per query in the decoder.
    pub k: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    /// Neighborhood size of the point-conv stem.
    #[serde(default = "default_k_conv")]
    pub k_conv: usize,
}

fn default_heads() -> usize {
    4
}

fn default_k_conv() -> usize {
    16
}

impl Default for ModelConfig {
    /// Object-scale defaults: triplane latents at R=64, d=32, L=25 windows,
    /// K=32 decoder neighbors.
    fn default() -> Self {
        ModelConfig {
            kind: GridKind::Triplane,
            r: 64,
            d: 32,
            l: 25,
            k: 32,
            heads: 4,
            k_conv: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r < 4 || self.r % 4 != 0 {
            return Err(Error::invalid(format!(
                "model config: r = {} must be a positive multiple of 4",
                self.r
            )));
        }
        for (name, v) in [
            ("d", self.d),
            ("l", self.l),
            ("k", self.k),
            ("heads", self.heads),
            ("k_conv", self.k_conv),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("model config: {name} must be positive")));
            }
        }
        if self.d % self.heads != 0 || (self.d / self.heads) % 2 != 0 {
            return Err(Error::invalid(format!(
                "model config: d = {} must split into {} heads of even size",
                self.d, self.heads
            )));
        }
        Ok(())
    }
}

/// Refined latents of one encoded cloud, alive inside a graph.
pub struct EncodedLatents {
    pub t_tilde: Var,
    pub c_tilde: Var,
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub point_encoder: PointEncoder<T>,
    pub unet: DualLatentUNet<T>,
    pub iid: IidWeights<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(seed);
        let point_encoder = PointEncoder::new("enc", cfg.d, cfg.k_conv, cfg.r, cfg.kind, &mut rng);
        let unet = DualLatentUNet::new(
            "unet",
            UNetConfig {
                d: cfg.d,
                r: cfg.r,
                kind: cfg.kind,
                heads: cfg.heads,
            },
            &mut rng,
        )?;
        let iid = IidWeights::new("iid", cfg.d, cfg.kind, cfg.heads, &mut rng)?;
        let model = Model {
            cfg,
            point_encoder,
            unet,
            iid,
        };
        nn::validate_unique_names(&model.params())?;
        Ok(model)
    }

    /// Window partitions for a cloud, computed once and recycled by every
    /// transformer layer of a forward pass.
    pub fn partitions(&self, pc: &PointCloud) -> Result<[WindowPartition; 3]> {
        let l = self.cfg.l.min(pc.len());
        partitions_for(pc, l)
    }

    /// Run the dual latent encoder, producing the refined latents.
    pub fn encode(
        &self,
        g: &mut Graph<T>,
        pc: &PointCloud,
        partitions: &[WindowPartition; 3],
    ) -> Result<EncodedLatents> {
        let (c, t) = self.point_encoder.forward(g, pc)?;
        let (t_tilde, c_tilde) = self.unet.forward(g, pc, partitions, c, t)?;
        Ok(EncodedLatents { t_tilde, c_tilde })
    }

    /// Occupancy logits for queries against already-encoded latents.
    pub fn decode(
        &self,
        g: &mut Graph<T>,
        pc: &PointCloud,
        latents: &EncodedLatents,
        queries: &[[f64; 3]],
    ) -> Result<Var> {
        iid_forward(
            g,
            &self.iid,
            latents.t_tilde,
            pc,
            latents.c_tilde,
            queries,
            self.cfg.k.min(pc.len()),
        )
    }

    /// Full forward pass: encode the cloud, decode the queries.
    pub fn forward(&self, g: &mut Graph<T>, pc: &PointCloud, queries: &[[f64; 3]]) -> Result<Var> {
        let partitions = self.partitions(pc)?;
        let latents = self.encode(g, pc, &partitions)?;
        self.decode(g, pc, &latents, queries)
    }

    pub fn n_params(&self) -> usize {
        self.params().iter().map(|p| p.value.numel()).sum()
    }

    /// Save parameters (and optimizer state when `with_optimizer`), plus a
    /// meta record encoding the architecture so checkpoints are
    /// self-describing.
    pub fn save<P: AsRef<Path>>(&self, path: P, with_optimizer: bool) -> Result<()> {
        let mut records: Vec<(String, crate::Tensor<T>)> = vec![(
            "__meta.config".to_string(),
            crate::Tensor::from_vec(
                &[7],
                vec![
                    T::from_f64(match self.cfg.kind {
                        GridKind::Triplane => 0.0,
                        GridKind::Voxel => 1.0,
                    }),
                    T::from_usize(self.cfg.r),
                    T::from_usize(self.cfg.d),
                    T::from_usize(self.cfg.l),
                    T::from_usize(self.cfg.k),
                    T::from_usize(self.cfg.heads),
                    T::from_usize(self.cfg.k_conv),
                ],
            )?,
        )];
        for p in self.params() {
            records.push((p.name.clone(), p.value.clone()));
            if with_optimizer {
                records.push((
                    format!("{}#m", p.name),
                    crate::Tensor::from_vec(p.value.shape(), p.adam_m.clone())?,
                ));
                records.push((
                    format!("{}#v", p.name),
                    crate::Tensor::from_vec(p.value.shape(), p.adam_v.clone())?,
                ));
                records.push((
                    format!("{}#t", p.name),
                    crate::Tensor::from_vec(&[1], vec![T::from_f64(p.step as f64)])?,
                ));
            }
        }
        let refs: Vec<(&str, &crate::Tensor<T>)> =
            records.iter().map(|(n, t)| (n.as_str(), t)).collect();
        nn::write_checkpoint(path, &refs)
    }

    /// Rebuild a model from a checkpoint written by [`Model::save`].
    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let records = nn::read_checkpoint(path)?;
        let meta = records
            .iter()
            .find(|(n, _)| n == "__meta.config")
            .ok_or_else(|| Error::Checkpoint("missing __meta.config record".into()))?;
        let m: Vec<f64> = meta.1.cast::<f64>().into_data();
        if m.len() != 7 {
            return Err(Error::Checkpoint("malformed __meta.config".into()));
        }
        let cfg = ModelConfig {
            kind: if m[0] == 0.0 {
                GridKind::Triplane
            } else {
                GridKind::Voxel
            },
            r: m[1] as usize,
            d: m[2] as usize,
            l: m[3] as usize,
            k: m[4] as usize,
            heads: m[5] as usize,
            k_conv: m[6] as usize,
        };
        let mut model = Model::new(cfg, 0)?;
        nn::load_params(&records, &mut model.params_mut())?;
        Ok(model)
    }
}

impl<T: Scalar> ParamSet<T> for Model<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        let mut v = self.point_encoder.params();
        v.extend(self.unet.params());
        v.extend(self.iid.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = self.point_encoder.params_mut();
        v.extend(self.unet.params_mut());
        v.extend(self.iid.params_mut());
        v
    }
}

/// Toy configuration used across the test suites.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        kind: GridKind::Triplane,
        r: 8,
        d: 8,
        l: 4,
        k: 4,
        heads: 2,
        k_conv: 8,
    }
}
