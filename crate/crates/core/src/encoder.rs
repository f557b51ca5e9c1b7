//! Dual latent encoder: a four-layer point-convolution stem producing
//! initial point and grid latents, the dual latent layer (DLL) refining
//! both in parallel, and the U-shaped stack of DLLs.

use crate::attention::DsptBlock;
use crate::graph::{Graph, Var};
use crate::nn::{Conv2dLayer, Conv3dLayer, LayerNorm, Linear, Mlp, ParamSet, Parameter, UpConvLayer};
use crate::pointgrid::{self, GridKind, PointCloud, WindowPartition};
use crate::{Error, Result, Rng, Scalar};

/// Grid convolution that dispatches on latent flavor (planes vs volume).
#[derive(Debug, Clone)]
pub enum GridConv<T: Scalar> {
    Planar(Conv2dLayer<T>),
    Volumetric(Conv3dLayer<T>),
}

impl<T: Scalar> GridConv<T> {
    pub fn new(
        prefix: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        kind: GridKind,
        rng: &mut Rng,
    ) -> Self {
        Self::with_gain(prefix, c_in, c_out, k, kind, 1.0, rng)
    }

    pub fn with_gain(
        prefix: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        kind: GridKind,
        gain: f64,
        rng: &mut Rng,
    ) -> Self {
        match kind {
            GridKind::Triplane => {
                GridConv::Planar(Conv2dLayer::with_gain(prefix, c_in, c_out, k, gain, rng))
            }
            GridKind::Voxel => {
                GridConv::Volumetric(Conv3dLayer::with_gain(prefix, c_in, c_out, k, gain, rng))
            }
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        match self {
            GridConv::Planar(c) => c.forward(g, x),
            GridConv::Volumetric(c) => c.forward(g, x),
        }
    }
}

impl<T: Scalar> ParamSet<T> for GridConv<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        match self {
            GridConv::Planar(c) => c.params(),
            GridConv::Volumetric(c) => c.params(),
        }
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        match self {
            GridConv::Planar(c) => c.params_mut(),
            GridConv::Volumetric(c) => c.params_mut(),
        }
    }
}

/// Two 3x3 convolutions with ReLU and a residual connection (1x1 projection
/// when widths differ); weights are shared across the three planes by
/// construction since planes ride the batch axis.
#[derive(Debug, Clone)]
pub struct GridResBlock<T: Scalar> {
    pub c1: GridConv<T>,
    pub c2: GridConv<T>,
    pub proj: Option<GridConv<T>>,
}

impl<T: Scalar> GridResBlock<T> {
    pub fn new(prefix: &str, c_in: usize, c_out: usize, kind: GridKind, rng: &mut Rng) -> Self {
        GridResBlock {
            c1: GridConv::with_gain(
                &format!("{prefix}.c1"),
                c_in,
                c_out,
                3,
                kind,
                std::f64::consts::SQRT_2,
                rng,
            ),
            c2: GridConv::new(&format!("{prefix}.c2"), c_out, c_out, 3, kind, rng),
            proj: (c_in != c_out)
                .then(|| GridConv::new(&format!("{prefix}.proj"), c_in, c_out, 1, kind, rng)),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = self.c1.forward(g, x)?;
        let h = g.relu(h);
        let y = self.c2.forward(g, h)?;
        let skip = match &self.proj {
            Some(p) => p.forward(g, x)?,
            None => x,
        };
        g.add(y, skip)
    }
}

impl<T: Scalar> ParamSet<T> for GridResBlock<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        let mut v = self.c1.params();
        v.extend(self.c2.params());
        if let Some(p) = &self.proj {
            v.extend(p.params());
        }
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = self.c1.params_mut();
        v.extend(self.c2.params_mut());
        if let Some(p) = &mut self.proj {
            v.extend(p.params_mut());
        }
        v
    }
}

/// Cross-plane feature exchange for triplanes: each plane is concatenated
/// with the two other planes' mean maps over their non-shared axis (aligned
/// by the shared axis) and convolved back to `d` channels.
#[derive(Debug, Clone)]
pub struct ThreeDAwareConv<T: Scalar> {
    pub conv: Conv2dLayer<T>,
}

impl<T: Scalar> ThreeDAwareConv<T> {
    pub fn new(prefix: &str, d: usize, rng: &mut Rng) -> Self {
        ThreeDAwareConv {
            conv: Conv2dLayer::new(&format!("{prefix}.conv"), 3 * d, d, 3, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, t: Var) -> Result<Var> {
        let s = g.shape(t);
        if s.len() != 4 || s[0] != 3 {
            return Err(Error::invalid(format!(
                "three_d_aware_conv: expected a triplane latent, got {s:?}"
            )));
        }
        let exchanged = g.plane_exchange(t)?;
        self.conv.forward(g, exchanged)
    }
}

impl<T: Scalar> ParamSet<T> for ThreeDAwareConv<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        self.conv.params()
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.conv.params_mut()
    }
}

// ───────────────────────── point encoder ─────────────────────────

/// Point convolution: per neighbor, the neighbor feature is concatenated
/// with an MLP of the relative position, mapped by a linear layer, and
/// max-aggregated over the k nearest neighbors. A residual connection is
/// added when input and output widths match.
#[derive(Debug, Clone)]
pub struct PointConvLayer<T: Scalar> {
    pub d_in: usize,
    pub d_out: usize,
    pub pos_mlp: Mlp<T>,
    pub merge: Linear<T>,
}

impl<T: Scalar> PointConvLayer<T> {
    pub fn new(prefix: &str, d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        PointConvLayer {
            d_in,
            d_out,
            pos_mlp: Mlp::new(&format!("{prefix}.pos"), 3, d_out, d_out, rng),
            merge: Linear::new(&format!("{prefix}.merge"), d_in + d_out, d_out, true, rng),
        }
    }

    /// `neighbors` holds k indices per point, row-major. `feats` carries the
    /// previous layer's output; the first layer passes `None` and neighbor
    /// coordinates serve as input features.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        pc: &PointCloud,
        feats: Option<Var>,
        neighbors: &[usize],
        k: usize,
    ) -> Result<Var> {
        let n = pc.len();
        debug_assert_eq!(neighbors.len(), n * k);

        let mut rel = Vec::with_capacity(n * k * 3);
        for (i, &nbr) in neighbors.iter().enumerate() {
            let center = pc.point(i / k);
            let p = pc.point(nbr);
            rel.extend([
                T::from_f64(p[0] - center[0]),
                T::from_f64(p[1] - center[1]),
                T::from_f64(p[2] - center[2]),
            ]);
        }
        let rel = g.constant(crate::Tensor::from_vec(&[n * k, 3], rel)?);
        let pos = self.pos_mlp.forward(g, rel)?;

        let nbr_feats = match feats {
            Some(f) => g.gather_rows(f, neighbors)?,
            None => {
                let mut data = Vec::with_capacity(n * k * 3);
                for &nbr in neighbors {
                    data.extend(pc.point(nbr).iter().map(|&v| T::from_f64(v)));
                }
                g.constant(crate::Tensor::from_vec(&[n * k, 3], data)?)
            }
        };
        let merged = g.concat(&[nbr_feats, pos], 1)?;
        let merged = self.merge.forward(g, merged)?;
        let out = g.max_rows_grouped(merged, k)?;
        match feats {
            Some(f) if self.d_in == self.d_out => g.add(out, f),
            _ => Ok(out),
        }
    }
}

impl<T: Scalar> ParamSet<T> for PointConvLayer<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        let mut v = self.pos_mlp.params();
        v.extend(self.merge.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = self.pos_mlp.params_mut();
        v.extend(self.merge.params_mut());
        v
    }
}

/// Four-layer point-convolution stem: the first layer lifts coordinates to
/// d features, three more refine with residuals, then scatter-mean
/// quantization produces the initial grid latent.
#[derive(Debug, Clone)]
pub struct PointEncoder<T: Scalar> {
    pub layers: Vec<PointConvLayer<T>>,
    pub k_conv: usize,
    pub r: usize,
    pub kind: GridKind,
}

impl<T: Scalar> PointEncoder<T> {
    pub fn new(
        prefix: &str,
        d: usize,
        k_conv: usize,
        r: usize,
        kind: GridKind,
        rng: &mut Rng,
    ) -> Self {
        let mut layers = Vec::with_capacity(4);
        layers.push(PointConvLayer::new(&format!("{prefix}.l0"), 3, d, rng));
        for i in 1..4 {
            layers.push(PointConvLayer::new(&format!("{prefix}.l{i}"), d, d, rng));
        }
        PointEncoder {
            layers,
            k_conv,
            r,
            kind,
        }
    }

    /// Produces (point latents C, grid latent T).
    pub fn forward(&self, g: &mut Graph<T>, pc: &PointCloud) -> Result<(Var, Var)> {
        let n = pc.len();
        if n < self.k_conv {
            return Err(Error::invalid(format!(
                "point_encoder: {n} points < neighborhood size {}",
                self.k_conv
            )));
        }
        // One neighbor table per cloud, shared by all four layers.
        let coords = pc.coords();
        let neighbors: Vec<usize> = crate::exec::map_range(n, n * n, |i| {
            pointgrid::knn_indices(coords[i], coords, self.k_conv).expect("k <= n")
        })
        .into_iter()
        .flatten()
        .collect();

        let mut c: Option<Var> = None;
        for layer in &self.layers {
            c = Some(layer.forward(g, pc, c, &neighbors, self.k_conv)?);
        }
        let c = c.unwrap();
        let t = pointgrid::point_to_grid(g, c, pc, self.r, self.kind)?;
        Ok((c, t))
    }
}

impl<T: Scalar> ParamSet<T> for PointEncoder<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

// ───────────────────────── dual latent layer ─────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resample {
    None,
    /// 2x max pooling of both grid streams at the end of the layer.
    Down,
    /// 2x transposed-convolution upsampling of both grid streams.
    Up,
}

#[derive(Debug, Clone, Copy)]
pub struct DllConfig {
    pub d_in: usize,
    pub d_out: usize,
    pub resample: Resample,
    pub kind: GridKind,
    pub heads: usize,
}

/// One dual latent layer. Grid and point latents are refined in parallel:
/// the grid stream through a residual conv block, a skip-merge with the
/// carried stream and (for triplanes) cross-plane exchange; the point stream
/// through a linear lift, a grid-to-point injection, and the three-axis
/// sorted-window transformer. The refined points are scattered back onto the
/// grid, convolved to fill sparse cells, and merged residually.
#[derive(Debug, Clone)]
pub struct DualLatentLayer<T: Scalar> {
    pub cfg: DllConfig,
    pub convnet: GridResBlock<T>,
    pub tbar_conv: GridConv<T>,
    pub aware: Option<ThreeDAwareConv<T>>,
    pub c_linear: Linear<T>,
    /// Norm on grid features entering the point stream.
    pub g2p_norm: LayerNorm<T>,
    pub g2p_mlp: Mlp<T>,
    pub dspt: DsptBlock<T>,
    /// Norm on point features entering the grid stream.
    pub p2g_norm: LayerNorm<T>,
    pub p2g_conv: GridConv<T>,
    pub up_t: Option<UpConvLayer<T>>,
    pub up_tbar: Option<UpConvLayer<T>>,
}

impl<T: Scalar> DualLatentLayer<T> {
    pub fn new(prefix: &str, cfg: DllConfig, rng: &mut Rng) -> Result<Self> {
        let three_d = cfg.kind == GridKind::Voxel;
        Ok(DualLatentLayer {
            convnet: GridResBlock::new(&format!("{prefix}.convnet"), cfg.d_in, cfg.d_out, cfg.kind, rng),
            tbar_conv: GridConv::new(&format!("{prefix}.tbar"), cfg.d_in, cfg.d_out, 3, cfg.kind, rng),
            aware: (cfg.kind == GridKind::Triplane)
                .then(|| ThreeDAwareConv::new(&format!("{prefix}.aware"), cfg.d_out, rng)),
            c_linear: Linear::new(&format!("{prefix}.clin"), cfg.d_in, cfg.d_out, true, rng),
            g2p_norm: LayerNorm::new(&format!("{prefix}.g2p_norm"), cfg.d_out),
            g2p_mlp: Mlp::new(&format!("{prefix}.g2p"), cfg.d_out, cfg.d_out, cfg.d_out, rng),
            dspt: DsptBlock::new(&format!("{prefix}.dspt"), cfg.d_out, cfg.heads, rng)?,
            p2g_norm: LayerNorm::new(&format!("{prefix}.p2g_norm"), cfg.d_out),
            p2g_conv: GridConv::new(&format!("{prefix}.p2g"), cfg.d_out, cfg.d_out, 3, cfg.kind, rng),
            up_t: (cfg.resample == Resample::Up)
                .then(|| UpConvLayer::new(&format!("{prefix}.up_t"), cfg.d_out, cfg.d_out, three_d, rng)),
            up_tbar: (cfg.resample == Resample::Up)
                .then(|| UpConvLayer::new(&format!("{prefix}.up_tbar"), cfg.d_out, cfg.d_out, three_d, rng)),
            cfg,
        })
    }

    fn grid_resolution(&self, g: &Graph<T>, t: Var) -> usize {
        let s = g.shape(t);
        s[s.len() - 1]
    }

    fn pool(&self, g: &mut Graph<T>, t: Var) -> Result<Var> {
        match self.cfg.kind {
            GridKind::Triplane => g.maxpool2d(t),
            GridKind::Voxel => g.maxpool3d(t),
        }
    }

    /// Returns (T', T̄', C'); T̄' feeds the next layer's skip input.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        pc: &PointCloud,
        partitions: &[WindowPartition; 3],
        t: Var,
        tbar: Var,
        c: Var,
    ) -> Result<(Var, Var, Var)> {
        let t1 = self.convnet.forward(g, t)?;
        let tb = self.tbar_conv.forward(g, tbar)?;
        let merged = g.add(t1, tb)?;
        let tbar_ref = match &self.aware {
            Some(aware) => aware.forward(g, merged)?,
            None => merged,
        };

        let c1 = self.c_linear.forward(g, c)?;
        let r = self.grid_resolution(g, tbar_ref);
        let from_grid = pointgrid::interpolate(g, tbar_ref, pc.coords(), self.cfg.kind)?;
        let from_grid = self.g2p_norm.forward(g, from_grid)?;
        let from_grid = self.g2p_mlp.forward(g, from_grid)?;
        let c2 = g.add(c1, from_grid)?;
        let c_out = self.dspt.forward(g, pc, c2, partitions)?;

        let c_proj = self.p2g_norm.forward(g, c_out)?;
        let proj = pointgrid::point_to_grid(g, c_proj, pc, r, self.cfg.kind)?;
        let proj = self.p2g_conv.forward(g, proj)?;
        let t_out = g.add(proj, tbar_ref)?;

        let (t_out, tbar_out) = match self.cfg.resample {
            Resample::None => (t_out, tbar_ref),
            Resample::Down => (self.pool(g, t_out)?, self.pool(g, tbar_ref)?),
            Resample::Up => (
                self.up_t.as_ref().unwrap().forward(g, t_out)?,
                self.up_tbar.as_ref().unwrap().forward(g, tbar_ref)?,
            ),
        };
        Ok((t_out, tbar_out, c_out))
    }
}

impl<T: Scalar> ParamSet<T> for DualLatentLayer<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        let mut v = self.convnet.params();
        v.extend(self.tbar_conv.params());
        if let Some(a) = &self.aware {
            v.extend(a.params());
        }
        v.extend(self.c_linear.params());
        v.extend(self.g2p_norm.params());
        v.extend(self.g2p_mlp.params());
        v.extend(self.dspt.params());
        v.extend(self.p2g_norm.params());
        v.extend(self.p2g_conv.params());
        if let Some(u) = &self.up_t {
            v.extend(u.params());
        }
        if let Some(u) = &self.up_tbar {
            v.extend(u.params());
        }
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = self.convnet.params_mut();
        v.extend(self.tbar_conv.params_mut());
        if let Some(a) = &mut self.aware {
            v.extend(a.params_mut());
        }
        v.extend(self.c_linear.params_mut());
        v.extend(self.g2p_norm.params_mut());
        v.extend(self.g2p_mlp.params_mut());
        v.extend(self.dspt.params_mut());
        v.extend(self.p2g_norm.params_mut());
        v.extend(self.p2g_conv.params_mut());
        if let Some(u) = &mut self.up_t {
            v.extend(u.params_mut());
        }
        if let Some(u) = &mut self.up_tbar {
            v.extend(u.params_mut());
        }
        v
    }
}

// ───────────────────────── UNet of DLLs ─────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct UNetConfig {
    pub d: usize,
    pub r: usize,
    pub kind: GridKind,
    pub heads: usize,
}

/// Seven dual latent layers: three down (widths d, 2d, 4d with pooling on
/// the second and third), a mid layer at 8d, and three up layers back to d
/// (upsampling on the first and second). The skip stream T̄ carries between
/// consecutive layers; the first layer receives T̄ = T.
#[derive(Debug, Clone)]
pub struct DualLatentUNet<T: Scalar> {
    pub cfg: UNetConfig,
    pub stages: Vec<DualLatentLayer<T>>,
}

/// (input multiple, output multiple, resample) for the seven stages.
pub const STAGE_PLAN: [(usize, usize, Resample); 7] = [
    (1, 1, Resample::None),
    (1, 2, Resample::Down),
    (2, 4, Resample::Down),
    (4, 8, Resample::None),
    (8, 4, Resample::Up),
    (4, 2, Resample::Up),
    (2, 1, Resample::None),
];

impl<T: Scalar> DualLatentUNet<T> {
    pub fn new(prefix: &str, cfg: UNetConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.r % 4 != 0 {
            return Err(Error::invalid(format!(
                "unet: grid resolution {} must be divisible by 4",
                cfg.r
            )));
        }
        let stages = STAGE_PLAN
            .iter()
            .enumerate()
            .map(|(i, &(m_in, m_out, resample))| {
                DualLatentLayer::new(
                    &format!("{prefix}.dll{i}"),
                    DllConfig {
                        d_in: cfg.d * m_in,
                        d_out: cfg.d * m_out,
                        resample,
                        kind: cfg.kind,
                        heads: cfg.heads,
                    },
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DualLatentUNet { cfg, stages })
    }

    /// Refines (C, T) into (T̃, C̃); T̃ returns at the input resolution.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        pc: &PointCloud,
        partitions: &[WindowPartition; 3],
        c: Var,
        t: Var,
    ) -> Result<(Var, Var)> {
        let mut cur_t = t;
        let mut tbar = t;
        let mut cur_c = c;
        for stage in &self.stages {
            let (t2, tbar2, c2) = stage.forward(g, pc, partitions, cur_t, tbar, cur_c)?;
            cur_t = t2;
            tbar = tbar2;
            cur_c = c2;
        }
        Ok((cur_t, cur_c))
    }
}

impl<T: Scalar> ParamSet<T> for DualLatentUNet<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        self.stages.iter().flat_map(|s| s.params()).collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.stages.iter_mut().flat_map(|s| s.params_mut()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::partitions_for;
    use crate::pointgrid::{normalize_points, PointCloud, WorldTransform};
    use crate::{Graph, Tensor};

    fn toy_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = Rng::new(seed);
        let coords: Vec<[f64; 3]> = (0..n)
            .map(|_| [rng.next_f64(), rng.next_f64(), rng.next_f64()])
            .collect();
        PointCloud::from_normalized(coords, WorldTransform::IDENTITY).unwrap()
    }

    #[test]
    fn point_encoder_output_shapes() {
        let mut rng = Rng::new(1);
        let (n, d, r) = (40, 8, 8);
        let enc = PointEncoder::<f64>::new("enc", d, 8, r, GridKind::Triplane, &mut rng);
        let pc = toy_cloud(n, 2);
        let mut g = Graph::new();
        let (c, t) = enc.forward(&mut g, &pc).unwrap();
        assert_eq!(g.shape(c), &[n, d]);
        assert_eq!(g.shape(t), &[3, d, r, r]);
    }

    #[test]
    fn point_encoder_rejects_tiny_clouds() {
        let mut rng = Rng::new(1);
        let enc = PointEncoder::<f64>::new("enc", 8, 16, 8, GridKind::Triplane, &mut rng);
        let pc = toy_cloud(8, 3);
        let mut g = Graph::new();
        assert!(enc.forward(&mut g, &pc).is_err());
    }

    #[test]
    fn point_encoder_identical_points_identical_features() {
        let mut rng = Rng::new(4);
        let enc = PointEncoder::<f64>::new("enc", 8, 4, 8, GridKind::Triplane, &mut rng);
        // Two coincident points in a small cloud.
        let mut coords = vec![
            [0.2, 0.3, 0.4],
            [0.7, 0.6, 0.5],
            [0.4, 0.8, 0.2],
            [0.6, 0.1, 0.9],
            [0.25, 0.35, 0.45],
            [0.75, 0.65, 0.55],
        ];
        coords.push(coords[0]);
        let pc = PointCloud::from_normalized(coords, WorldTransform::IDENTITY).unwrap();
        let mut g = Graph::new();
        let (c, _) = enc.forward(&mut g, &pc).unwrap();
        let cv = g.value(c);
        for ch in 0..8 {
            assert_eq!(cv.row(0)[ch], cv.row(6)[ch]);
        }
    }

    #[test]
    fn point_encoder_invariant_to_world_translation() {
        // Rigid translation before normalization leaves normalized
        // coordinates, and therefore (C, T), unchanged.
        let mut rng = Rng::new(5);
        let raw: Vec<[f64; 3]> = (0..32)
            .map(|_| {
                [
                    rng.uniform(-1.0, 1.0),
                    rng.uniform(2.0, 3.0),
                    rng.uniform(0.0, 0.5),
                ]
            })
            .collect();
        let shifted: Vec<[f64; 3]> = raw
            .iter()
            .map(|p| [p[0] + 11.0, p[1] - 4.0, p[2] + 0.25])
            .collect();
        let enc = PointEncoder::<f64>::new("enc", 8, 8, 8, GridKind::Triplane, &mut rng);

        let run = |pts: &[[f64; 3]]| -> (Tensor<f64>, Tensor<f64>) {
            let pc = normalize_points(pts, 0.1).unwrap();
            let mut g = Graph::new();
            let (c, t) = enc.forward(&mut g, &pc).unwrap();
            (g.value(c).clone(), g.value(t).clone())
        };
        let (c0, t0) = run(&raw);
        let (c1, t1) = run(&shifted);
        assert!(crate::tensor::max_abs_diff(&c0, &c1) < 1e-9);
        assert!(crate::tensor::max_abs_diff(&t0, &t1) < 1e-9);
    }

    #[test]
    fn three_d_aware_zero_in_zero_out() {
        let mut rng = Rng::new(6);
        let aware = ThreeDAwareConv::<f64>::new("aw", 4, &mut rng);
        let mut g = Graph::new();
        let t = g.constant(Tensor::zeros(&[3, 4, 6, 6]));
        let out = aware.forward(&mut g, t).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn three_d_aware_rejects_voxels() {
        let mut rng = Rng::new(6);
        let aware = ThreeDAwareConv::<f64>::new("aw", 4, &mut rng);
        let mut g = Graph::new();
        let v = g.constant(Tensor::zeros(&[1, 4, 4, 4, 4]));
        assert!(aware.forward(&mut g, v).is_err());
    }

    #[test]
    fn three_d_aware_exchanges_information() {
        // A feature present only on the xy plane must reach the xz and yz
        // outputs through the reduced maps.
        let mut rng = Rng::new(7);
        let d = 2;
        let r = 4;
        let mut aware = ThreeDAwareConv::<f64>::new("aw", d, &mut rng);
        // Nonzero weights everywhere so the exchange is visible.
        for w in aware.conv.w.value.data_mut() {
            *w = 0.2;
        }
        let mut t = Tensor::<f64>::zeros(&[3, d, r, r]);
        t.data_mut()[5] = 3.0; // plane 0, channel 0
        let mut g = Graph::new();
        let tv = g.constant(t);
        let out = aware.forward(&mut g, tv).unwrap();
        let od = g.value(out);
        let plane_energy = |p: usize| -> f64 {
            od.data()[p * d * r * r..(p + 1) * d * r * r]
                .iter()
                .map(|v| v.abs())
                .sum()
        };
        assert!(plane_energy(1) > 0.0, "xz plane saw nothing");
        assert!(plane_energy(2) > 0.0, "yz plane saw nothing");
    }

    /// Swapping the x and y axes of the input maps plane xy to its
    /// transpose and exchanges planes xz and yz. With spatially symmetric
    /// kernels whose second and third channel blocks are tied, the layer
    /// output must transform the same way. (The pre-conv exchange tensor is
    /// checked exactly; the conv needs the weight symmetry.)
    #[test]
    fn three_d_aware_axis_swap_symmetry() {
        let mut rng = Rng::new(8);
        let d = 2;
        let r = 4;
        let mut aware = ThreeDAwareConv::<f64>::new("aw", d, &mut rng);
        {
            let w = &mut aware.conv.w.value;
            let (co, ci) = (d, 3 * d);
            let mut sym = w.clone();
            for o in 0..co {
                for c in 0..ci {
                    for a in 0..3 {
                        for b in 0..3 {
                            let v = 0.5
                                * (w.data()[((o * ci + c) * 3 + a) * 3 + b]
                                    + w.data()[((o * ci + c) * 3 + b) * 3 + a]);
                            sym.data_mut()[((o * ci + c) * 3 + a) * 3 + b] = v;
                        }
                    }
                }
            }
            // Tie the two exchanged channel blocks.
            for o in 0..co {
                for c in 0..d {
                    for ab in 0..9 {
                        let v = sym.data()[((o * ci + d + c) * 9) + ab];
                        sym.data_mut()[((o * ci + 2 * d + c) * 9) + ab] = v;
                    }
                }
            }
            *w = sym;
        }

        let t = Tensor::<f64>::from_fn(&[3, d, r, r], |_| rng.uniform(-1.0, 1.0));
        // Swap x and y: plane xy transposes, planes xz and yz swap.
        let mut tsw = Tensor::<f64>::zeros(&[3, d, r, r]);
        for c in 0..d {
            for i in 0..r {
                for j in 0..r {
                    let v = t.data()[(c * r + i) * r + j];
                    tsw.data_mut()[(c * r + j) * r + i] = v;
                    let vxz = t.data()[((d + c) * r + i) * r + j];
                    tsw.data_mut()[((2 * d + c) * r + i) * r + j] = vxz;
                    let vyz = t.data()[((2 * d + c) * r + i) * r + j];
                    tsw.data_mut()[((d + c) * r + i) * r + j] = vyz;
                }
            }
        }

        let run = |input: Tensor<f64>| -> Tensor<f64> {
            let mut g = Graph::new();
            let tv = g.constant(input);
            let out = aware.forward(&mut g, tv).unwrap();
            g.value(out).clone()
        };
        let base = run(t);
        let swapped = run(tsw);
        for c in 0..d {
            for i in 0..r {
                for j in 0..r {
                    let want_xy = base.data()[(c * r + i) * r + j];
                    let got_xy = swapped.data()[(c * r + j) * r + i];
                    assert!((want_xy - got_xy).abs() < 1e-9);
                    let want_xz = base.data()[((d + c) * r + i) * r + j];
                    let got_xz = swapped.data()[((2 * d + c) * r + i) * r + j];
                    assert!((want_xz - got_xz).abs() < 1e-9);
                }
            }
        }
    }

    fn dll_cfg(d_in: usize, d_out: usize, resample: Resample) -> DllConfig {
        DllConfig {
            d_in,
            d_out,
            resample,
            kind: GridKind::Triplane,
            heads: 2,
        }
    }

    #[test]
    fn dll_zero_latents_zero_outputs() {
        let mut rng = Rng::new(9);
        let dll = DualLatentLayer::<f64>::new("dll", dll_cfg(4, 4, Resample::None), &mut rng).unwrap();
        let pc = toy_cloud(12, 10);
        let parts = partitions_for(&pc, 3).unwrap();
        let mut g = Graph::new();
        let t = g.constant(Tensor::zeros(&[3, 4, 8, 8]));
        let c = g.constant(Tensor::zeros(&[12, 4]));
        let (t2, tbar2, c2) = dll.forward(&mut g, &pc, &parts, t, t, c).unwrap();
        for v in [t2, tbar2, c2] {
            assert!(g.value(v).data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn dll_down_stage_shapes() {
        let mut rng = Rng::new(11);
        let (n, r, d) = (16, 8, 4);
        let dll =
            DualLatentLayer::<f64>::new("dll", dll_cfg(d, 2 * d, Resample::Down), &mut rng).unwrap();
        let pc = toy_cloud(n, 12);
        let parts = partitions_for(&pc, 4).unwrap();
        let mut g = Graph::new();
        let t = g.constant(Tensor::zeros(&[3, d, r, r]));
        let c = g.constant(Tensor::zeros(&[n, d]));
        let (t2, tbar2, c2) = dll.forward(&mut g, &pc, &parts, t, t, c).unwrap();
        assert_eq!(g.shape(t2), &[3, 2 * d, r / 2, r / 2]);
        assert_eq!(g.shape(tbar2), &[3, 2 * d, r / 2, r / 2]);
        assert_eq!(g.shape(c2), &[n, 2 * d]);
    }

    #[test]
    fn dll_gradients_match_finite_differences() {
        // Toy-size DLL driven by a scalar head; checks flow through every
        // sub-path (grid, exchange, point, attention, scatter).
        let mut rng = Rng::new(13);
        let (n, r, d) = (16, 8, 4);
        let dll = DualLatentLayer::<f64>::new("dll", dll_cfg(d, d, Resample::None), &mut rng).unwrap();
        let pc = toy_cloud(n, 14);
        let parts = partitions_for(&pc, 4).unwrap();

        let t0 = Tensor::<f64>::from_fn(&[3, d, r, r], |_| rng.uniform(-0.5, 0.5));
        let c0 = Tensor::<f64>::from_fn(&[n, d], |_| rng.uniform(-0.5, 0.5));
        let rep = crate::gradcheck::check_fn(
            "dll_forward",
            &[t0, c0],
            Some(12),
            &mut rng,
            |g, v| {
                let (t2, tbar2, c2) = dll.forward(g, &pc, &parts, v[0], v[0], v[1])?;
                let wt = Tensor::from_fn(g.shape(t2), |i| (0.1 * i as f64).sin());
                let wb = Tensor::from_fn(g.shape(tbar2), |i| (0.07 * i as f64).cos());
                let wc = Tensor::from_fn(g.shape(c2), |i| 0.2 + 0.01 * i as f64);
                let wtv = g.constant(wt);
                let wbv = g.constant(wb);
                let wcv = g.constant(wc);
                let a = g.mul(t2, wtv)?;
                let b = g.mul(tbar2, wbv)?;
                let cc = g.mul(c2, wcv)?;
                let sa = g.sum_all(a);
                let sb = g.sum_all(b);
                let sc = g.sum_all(cc);
                let s = g.add(sa, sb)?;
                g.add(s, sc)
            },
        )
        .unwrap();
        assert!(rep.pass, "{}", rep.line());
    }

    #[test]
    fn unet_rejects_bad_resolution() {
        let mut rng = Rng::new(15);
        let cfg = UNetConfig {
            d: 4,
            r: 6,
            kind: GridKind::Triplane,
            heads: 2,
        };
        assert!(DualLatentUNet::<f64>::new("unet", cfg, &mut rng).is_err());
    }

    #[test]
    fn unet_toy_forward_shapes_and_finiteness() {
        let mut rng = Rng::new(16);
        let (n, r, d) = (24, 8, 4);
        let cfg = UNetConfig {
            d,
            r,
            kind: GridKind::Triplane,
            heads: 2,
        };
        let unet = DualLatentUNet::<f64>::new("unet", cfg, &mut rng).unwrap();
        let pc = toy_cloud(n, 17);
        let parts = partitions_for(&pc, 4).unwrap();
        let mut g = Graph::new();
        let t = g.constant(Tensor::from_fn(&[3, d, r, r], |_| rng.uniform(-0.5, 0.5)));
        let c = g.constant(Tensor::from_fn(&[n, d], |_| rng.uniform(-0.5, 0.5)));
        let (t_tilde, c_tilde) = unet.forward(&mut g, &pc, &parts, c, t).unwrap();
        // T̃ comes back at the input resolution and width.
        assert_eq!(g.shape(t_tilde), &[3, d, r, r]);
        assert_eq!(g.shape(c_tilde), &[n, d]);
        assert!(g.value(t_tilde).is_finite());
        assert!(g.value(c_tilde).is_finite());
    }

    #[test]
    fn unet_stage_widths_follow_plan() {
        let widths: Vec<(usize, usize)> = STAGE_PLAN.iter().map(|&(i, o, _)| (i, o)).collect();
        assert_eq!(
            widths,
            vec![(1, 1), (1, 2), (2, 4), (4, 8), (8, 4), (4, 2), (2, 1)]
        );
        // Exactly three down stages, one mid, three up.
        let downs = STAGE_PLAN
            .iter()
            .filter(|(_, _, r)| *r == Resample::Down)
            .count();
        let ups = STAGE_PLAN
            .iter()
            .filter(|(_, _, r)| *r == Resample::Up)
            .count();
        assert_eq!((downs, ups), (2, 2)); // resolution drops at down 2-3, rises at up 1-2
    }

    #[test]
    fn unet_voxel_toy_forward() {
        let mut rng = Rng::new(18);
        let (n, r, d) = (20, 8, 4);
        let cfg = UNetConfig {
            d,
            r,
            kind: GridKind::Voxel,
            heads: 2,
        };
        let unet = DualLatentUNet::<f64>::new("unet", cfg, &mut rng).unwrap();
        let pc = toy_cloud(n, 19);
        let parts = partitions_for(&pc, 4).unwrap();
        let mut g = Graph::new();
        let t = g.constant(Tensor::from_fn(&[1, d, r, r, r], |_| rng.uniform(-0.5, 0.5)));
        let c = g.constant(Tensor::from_fn(&[n, d], |_| rng.uniform(-0.5, 0.5)));
        let (t_tilde, c_tilde) = unet.forward(&mut g, &pc, &parts, c, t).unwrap();
        assert_eq!(g.shape(t_tilde), &[1, d, r, r, r]);
        assert_eq!(g.shape(c_tilde), &[n, d]);
        assert!(g.value(t_tilde).is_finite());
    }
}
