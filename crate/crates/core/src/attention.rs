//! Rotary position embedding for 3D points, windowed multi-head
//! self-attention, the per-axis sorted-window transformer block, and the
//! single-token-update attention used by the implicit decoder.

use crate::graph::{Graph, Var};
use crate::nn::{LayerNorm, Linear, Mlp, ParamSet, Parameter};
use crate::pointgrid::{PointCloud, WindowPartition};
use crate::{Error, Result, Rng, Scalar};

/// Channel layout of the 3D rotary embedding.
///
/// The feature dimension is split into three equal axis groups of
/// `group = 2·⌊dim/6⌋` channels (the largest even size that fits three
/// groups); channels past `3·group` are left unrotated. Within a group,
/// consecutive channel pairs are rotated by `θ_j · coord_axis` with
/// `θ_j = base^(−2j/group)`. Rotation is applied on the concatenated
/// pre-head dimension; pairs never straddle a head boundary as long as the
/// head dim is even, so per-head attention logits stay functions of
/// coordinate differences only.
#[derive(Debug, Clone, Copy)]
pub struct RopeConfig {
    pub dim: usize,
    pub group: usize,
    pub base: f64,
}

impl RopeConfig {
    /// `group` is 0 for dims below 6; the embedding is then the identity
    /// (no channels rotated), which keeps tiny verification models usable.
    pub fn for_dim(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("rope: zero feature dim"));
        }
        Ok(RopeConfig {
            dim,
            group: 2 * (dim / 6),
            base: 10_000.0,
        })
    }

    /// Frequencies per rotation pair: θ_j = base^(−2j/group).
    fn frequencies(&self) -> Vec<f64> {
        (0..self.group / 2)
            .map(|j| self.base.powf(-2.0 * j as f64 / self.group as f64))
            .collect()
    }
}

/// Rotate query/key channels by coordinate-dependent angles (norm
/// preserving). `x` is (n, dim); `coords` supplies one 3D point per row.
pub fn rope_embed<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    coords: &[[f64; 3]],
    cfg: &RopeConfig,
) -> Result<Var> {
    let s = g.shape(x);
    if s.len() != 2 || s[1] != cfg.dim {
        return Err(Error::invalid(format!(
            "rope_embed: input {s:?} does not match configured dim {}",
            cfg.dim
        )));
    }
    if s[0] != coords.len() {
        return Err(Error::invalid(format!(
            "rope_embed: {} rows vs {} coordinates",
            s[0],
            coords.len()
        )));
    }
    if cfg.group == 0 {
        return Ok(x);
    }
    let freqs = cfg.frequencies();
    let mut angles = Vec::with_capacity(coords.len() * 3 * freqs.len());
    for &p in coords {
        for axis in 0..3 {
            for &f in &freqs {
                angles.push(T::from_f64(f * p[axis]));
            }
        }
    }
    g.rope_raw(x, angles, cfg.group)
}

/// One transformer block: multi-head self-attention with RoPE on query and
/// key plus a ReLU MLP with hidden width 4·dim, each behind a residual with
/// a pre-sublayer layer norm (stable to optimize at this stack depth
/// without warmup).
#[derive(Debug, Clone)]
pub struct AttentionBlock<T: Scalar> {
    pub dim: usize,
    pub heads: usize,
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
    pub norm_attn: LayerNorm<T>,
    pub norm_ffn: LayerNorm<T>,
    pub ffn: Mlp<T>,
    pub rope: RopeConfig,
}

impl<T: Scalar> AttentionBlock<T> {
    pub fn new(prefix: &str, dim: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::invalid(format!(
                "attention: dim {dim} not divisible by {heads} heads"
            )));
        }
        if (dim / heads) % 2 != 0 {
            return Err(Error::invalid(format!(
                "attention: head dim {} must be even for rotary pairs",
                dim / heads
            )));
        }
        // Residual branches start small (gain 1/4 on their output
        // projections) so the deep stack behaves like a shallow one early
        // in training.
        Ok(AttentionBlock {
            dim,
            heads,
            wq: Linear::new(&format!("{prefix}.wq"), dim, dim, true, rng),
            wk: Linear::new(&format!("{prefix}.wk"), dim, dim, true, rng),
            wv: Linear::new(&format!("{prefix}.wv"), dim, dim, true, rng),
            wo: Linear::with_gain(&format!("{prefix}.wo"), dim, dim, true, 0.25, rng),
            norm_attn: LayerNorm::new(&format!("{prefix}.norm_attn"), dim),
            norm_ffn: LayerNorm::new(&format!("{prefix}.norm_ffn"), dim),
            ffn: {
                let mut ffn = Mlp::new(&format!("{prefix}.ffn"), dim, 4 * dim, dim, rng);
                ffn.fc2 =
                    Linear::with_gain(&format!("{prefix}.ffn.fc2"), 4 * dim, dim, true, 0.25, rng);
                ffn
            },
            rope: RopeConfig::for_dim(dim)?,
        })
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Raw multi-head attention over row windows (no residual/norm/FFN).
    /// `x` rows must already be in window order; `windows` are contiguous
    /// row ranges; `coords` is row-aligned with `x`. Uniform windows take a
    /// fused batched path; uneven ones fall back to per-window slices (the
    /// two agree, see the equivalence tests).
    pub fn attend_windows(
        &self,
        g: &mut Graph<T>,
        x: Var,
        coords: &[[f64; 3]],
        windows: &[std::ops::Range<usize>],
    ) -> Result<Var> {
        let q = self.wq.forward(g, x)?;
        let k = self.wk.forward(g, x)?;
        let v = self.wv.forward(g, x)?;
        let q = rope_embed(g, q, coords, &self.rope)?;
        let k = rope_embed(g, k, coords, &self.rope)?;

        let n = g.shape(x)[0];
        let wsize = windows.first().map(|w| w.len()).unwrap_or(0);
        let uniform = wsize > 0
            && n == wsize * windows.len()
            && windows.iter().all(|w| w.len() == wsize)
            && windows
                .iter()
                .enumerate()
                .all(|(i, w)| w.start == i * wsize);
        let attn = if uniform {
            let logits = g.window_logits(q, k, wsize, self.heads)?;
            let weights = g.softmax(logits)?;
            g.window_weighted_sum(weights, v, wsize, self.heads)?
        } else {
            let hd = self.head_dim();
            let scale = T::from_f64(1.0 / (hd as f64).sqrt());
            let mut window_outputs = Vec::with_capacity(windows.len());
            for w in windows {
                let (start, len) = (w.start, w.len());
                let qw = g.narrow(q, 0, start, len)?;
                let kw = g.narrow(k, 0, start, len)?;
                let vw = g.narrow(v, 0, start, len)?;
                let mut head_outputs = Vec::with_capacity(self.heads);
                for h in 0..self.heads {
                    let qh = g.narrow(qw, 1, h * hd, hd)?;
                    let kh = g.narrow(kw, 1, h * hd, hd)?;
                    let vh = g.narrow(vw, 1, h * hd, hd)?;
                    let logits = g.matmul_nt(qh, kh)?;
                    let logits = g.mul_scalar(logits, scale);
                    let weights = g.softmax(logits)?;
                    head_outputs.push(g.matmul(weights, vh)?);
                }
                window_outputs.push(g.concat(&head_outputs, 1)?);
            }
            g.concat(&window_outputs, 0)?
        };
        self.wo.forward(g, attn)
    }

    /// The per-window sliced attention path, regardless of uniformity
    /// (used by equivalence tests).
    pub fn attend_windows_sliced(
        &self,
        g: &mut Graph<T>,
        x: Var,
        coords: &[[f64; 3]],
        windows: &[std::ops::Range<usize>],
    ) -> Result<Var> {
        let q = self.wq.forward(g, x)?;
        let k = self.wk.forward(g, x)?;
        let v = self.wv.forward(g, x)?;
        let q = rope_embed(g, q, coords, &self.rope)?;
        let k = rope_embed(g, k, coords, &self.rope)?;
        let hd = self.head_dim();
        let scale = T::from_f64(1.0 / (hd as f64).sqrt());
        let mut window_outputs = Vec::with_capacity(windows.len());
        for w in windows {
            let (start, len) = (w.start, w.len());
            let qw = g.narrow(q, 0, start, len)?;
            let kw = g.narrow(k, 0, start, len)?;
            let vw = g.narrow(v, 0, start, len)?;
            let mut head_outputs = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let qh = g.narrow(qw, 1, h * hd, hd)?;
                let kh = g.narrow(kw, 1, h * hd, hd)?;
                let vh = g.narrow(vw, 1, h * hd, hd)?;
                let logits = g.matmul_nt(qh, kh)?;
                let logits = g.mul_scalar(logits, scale);
                let weights = g.softmax(logits)?;
                head_outputs.push(g.matmul(weights, vh)?);
            }
            window_outputs.push(g.concat(&head_outputs, 1)?);
        }
        let attn = g.concat(&window_outputs, 0)?;
        self.wo.forward(g, attn)
    }

    /// Full block over windows: pre-norm attention with residual, then
    /// pre-norm FFN with residual.
    pub fn forward_windows(
        &self,
        g: &mut Graph<T>,
        x: Var,
        coords: &[[f64; 3]],
        windows: &[std::ops::Range<usize>],
    ) -> Result<Var> {
        let normed = self.norm_attn.forward(g, x)?;
        let attn = self.attend_windows(g, normed, coords, windows)?;
        let h = g.add(x, attn)?;
        let hn = self.norm_ffn.forward(g, h)?;
        let f = self.ffn.forward(g, hn)?;
        g.add(h, f)
    }

    /// One attention step over per-query sequences {z0, z1..zK} in which
    /// only the z0 token is produced; the other elements are left to the
    /// caller unchanged. `z0` is (M, dim); `z` is (M·K, dim) or absent (K=0,
    /// where the update degenerates to projections and FFN of z0 alone).
    pub fn token_update(
        &self,
        g: &mut Graph<T>,
        z0: Var,
        z: Option<Var>,
        query_coords: &[[f64; 3]],
        nbr_coords: &[[f64; 3]],
    ) -> Result<Var> {
        let m = g.shape(z0)[0];
        let k_nbr = match z {
            Some(z) => {
                let zs = g.shape(z);
                if zs[0] % m != 0 {
                    return Err(Error::invalid(format!(
                        "token_update: {} neighbor rows not a multiple of {m} queries",
                        zs[0]
                    )));
                }
                zs[0] / m
            }
            None => 0,
        };
        if nbr_coords.len() != m * k_nbr || query_coords.len() != m {
            return Err(Error::invalid("token_update: coordinate count mismatch"));
        }
        let group = k_nbr + 1;

        // Interleave into per-query sequences: row q·(K+1) is z0, the rest
        // are the neighbor tokens.
        let z0n = self.norm_attn.forward(g, z0)?;
        let (seq, seq_coords) = if let Some(z) = z {
            let zn = self.norm_attn.forward(g, z)?;
            let z0_pos: Vec<usize> = (0..m).map(|q| q * group).collect();
            let z_pos: Vec<usize> = (0..m * k_nbr)
                .map(|i| (i / k_nbr) * group + 1 + i % k_nbr)
                .collect();
            let s0 = g.scatter_add_rows(z0n, &z0_pos, m * group)?;
            let s1 = g.scatter_add_rows(zn, &z_pos, m * group)?;
            let seq = g.add(s0, s1)?;
            let mut coords = vec![[0.0; 3]; m * group];
            for q in 0..m {
                coords[q * group] = query_coords[q];
                for j in 0..k_nbr {
                    coords[q * group + 1 + j] = nbr_coords[q * k_nbr + j];
                }
            }
            (seq, coords)
        } else {
            (z0n, query_coords.to_vec())
        };

        let q = self.wq.forward(g, z0n)?;
        let q = rope_embed(g, q, query_coords, &self.rope)?;
        let k = self.wk.forward(g, seq)?;
        let k = rope_embed(g, k, &seq_coords, &self.rope)?;
        let v = self.wv.forward(g, seq)?;

        let logits = g.grouped_logits(q, k, group, self.heads)?;
        let weights = g.softmax(logits)?;
        let attn = g.grouped_weighted_sum(weights, v, self.heads)?;
        let attn = self.wo.forward(g, attn)?;

        let h = g.add(z0, attn)?;
        let hn = self.norm_ffn.forward(g, h)?;
        let f = self.ffn.forward(g, hn)?;
        g.add(h, f)
    }
}

impl<T: Scalar> ParamSet<T> for AttentionBlock<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        let mut v = self.wq.params();
        v.extend(self.wk.params());
        v.extend(self.wv.params());
        v.extend(self.wo.params());
        v.extend(self.norm_attn.params());
        v.extend(self.norm_ffn.params());
        v.extend(self.ffn.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = self.wq.params_mut();
        v.extend(self.wk.params_mut());
        v.extend(self.wv.params_mut());
        v.extend(self.wo.params_mut());
        v.extend(self.norm_attn.params_mut());
        v.extend(self.norm_ffn.params_mut());
        v.extend(self.ffn.params_mut());
        v
    }
}

/// Sorted-window transformer over the three axes: for each of x, y, z the
/// point features are sorted along the axis, split into equal windows,
/// attended within windows, and restored to the original order. Sorting
/// indices are computed once per cloud and recycled across layers.
#[derive(Debug, Clone)]
pub struct DsptBlock<T: Scalar> {
    pub axis_blocks: Vec<AttentionBlock<T>>,
}

impl<T: Scalar> DsptBlock<T> {
    pub fn new(prefix: &str, dim: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        let axis_blocks = ["x", "y", "z"]
            .iter()
            .map(|a| AttentionBlock::new(&format!("{prefix}.{a}"), dim, heads, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(DsptBlock { axis_blocks })
    }

    /// `partitions` must hold the x, y, z partitions of `pc` (in that
    /// order), typically computed once per cloud.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        pc: &PointCloud,
        c: Var,
        partitions: &[WindowPartition; 3],
    ) -> Result<Var> {
        let n = pc.len();
        if g.shape(c)[0] != n {
            return Err(Error::invalid(format!(
                "dspt: {} feature rows vs {n} points",
                g.shape(c)[0]
            )));
        }
        let mut c = c;
        for (block, part) in self.axis_blocks.iter().zip(partitions) {
            let sorted = g.gather_rows(c, part.sorted_index())?;
            let coords: Vec<[f64; 3]> = part
                .sorted_index()
                .iter()
                .map(|&i| pc.point(i))
                .collect();
            let windows: Vec<std::ops::Range<usize>> = part.windows().collect();
            let out = block.forward_windows(g, sorted, &coords, &windows)?;
            c = part.unsort(g, out)?;
        }
        Ok(c)
    }
}

impl<T: Scalar> ParamSet<T> for DsptBlock<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        self.axis_blocks.iter().flat_map(|b| b.params()).collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.axis_blocks
            .iter_mut()
            .flat_map(|b| b.params_mut())
            .collect()
    }
}

/// The three per-axis window partitions of a cloud, in x, y, z order.
pub fn partitions_for(pc: &PointCloud, l: usize) -> Result<[WindowPartition; 3]> {
    use crate::pointgrid::{sort_and_split, Axis};
    Ok([
        sort_and_split(pc, Axis::X, l)?,
        sort_and_split(pc, Axis::Y, l)?,
        sort_and_split(pc, Axis::Z, l)?,
    ])
}

#[cfg(test)]
#[allow(clippy::single_range_in_vec_init, clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::pointgrid::{PointCloud, WorldTransform};
    use crate::{Graph, Tensor};

    fn rand_coords(n: usize, rng: &mut Rng) -> Vec<[f64; 3]> {
        (0..n)
            .map(|_| [rng.next_f64(), rng.next_f64(), rng.next_f64()])
            .collect()
    }

    #[test]
    fn rope_zero_coords_is_identity() {
        let cfg = RopeConfig::for_dim(12).unwrap();
        let mut rng = Rng::new(1);
        let x = Tensor::<f64>::from_fn(&[5, 12], |_| rng.uniform(-1.0, 1.0));
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = rope_embed(&mut g, xv, &[[0.0; 3]; 5], &cfg).unwrap();
        assert_eq!(g.value(y).data(), x.data());
    }

    #[test]
    fn rope_preserves_row_norms() {
        let cfg = RopeConfig::for_dim(16).unwrap(); // group 4; channels 12..16 unrotated
        let mut rng = Rng::new(2);
        let x = Tensor::<f64>::from_fn(&[20, 16], |_| rng.uniform(-2.0, 2.0));
        let coords = rand_coords(20, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = rope_embed(&mut g, xv, &coords, &cfg).unwrap();
        let yd = g.value(y);
        for i in 0..20 {
            let nx: f64 = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny: f64 = yd.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((nx - ny).abs() <= 1e-6 * nx.max(1.0), "{nx} vs {ny}");
        }
    }

    #[test]
    fn rope_below_six_channels_is_identity() {
        let cfg = RopeConfig::for_dim(4).unwrap();
        assert_eq!(cfg.group, 0);
        let mut rng = Rng::new(40);
        let x = Tensor::<f64>::from_fn(&[3, 4], |_| rng.uniform(-1.0, 1.0));
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = rope_embed(&mut g, xv, &rand_coords(3, &mut rng), &cfg).unwrap();
        assert_eq!(g.value(y).data(), x.data());
    }

    #[test]
    fn rope_depends_only_on_relative_position() {
        let cfg = RopeConfig::for_dim(18).unwrap();
        let mut rng = Rng::new(3);
        for _ in 0..10 {
            let q = Tensor::<f64>::from_fn(&[1, 18], |_| rng.uniform(-1.0, 1.0));
            let k = Tensor::<f64>::from_fn(&[1, 18], |_| rng.uniform(-1.0, 1.0));
            let a = [rng.next_f64(), rng.next_f64(), rng.next_f64()];
            let b = [rng.next_f64(), rng.next_f64(), rng.next_f64()];
            let t = [
                rng.uniform(-0.3, 0.3),
                rng.uniform(-0.3, 0.3),
                rng.uniform(-0.3, 0.3),
            ];
            let dot = |qa: [f64; 3], kb: [f64; 3]| -> f64 {
                let mut g = Graph::new();
                let qv = g.constant(q.clone());
                let kv = g.constant(k.clone());
                let qr = rope_embed(&mut g, qv, &[qa], &cfg).unwrap();
                let kr = rope_embed(&mut g, kv, &[kb], &cfg).unwrap();
                g.value(qr)
                    .data()
                    .iter()
                    .zip(g.value(kr).data())
                    .map(|(x, y)| x * y)
                    .sum()
            };
            let base = dot(a, b);
            let shifted = dot(
                [a[0] + t[0], a[1] + t[1], a[2] + t[2]],
                [b[0] + t[0], b[1] + t[1], b[2] + t[2]],
            );
            assert!((base - shifted).abs() < 1e-5, "{base} vs {shifted}");
        }
    }

    #[test]
    fn single_token_window_is_value_projection() {
        let mut rng = Rng::new(4);
        let block = AttentionBlock::<f64>::new("blk", 12, 2, &mut rng).unwrap();
        let x = Tensor::<f64>::from_fn(&[1, 12], |_| rng.uniform(-1.0, 1.0));
        let coords = rand_coords(1, &mut rng);

        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let got = block.attend_windows(&mut g, xv, &coords, &[0..1]).unwrap();

        // softmax over one element is 1: attention reduces to Wo(Wv x).
        let mut g2 = Graph::<f64>::new();
        let xv2 = g2.constant(x);
        let v = block.wv.forward(&mut g2, xv2).unwrap();
        let want = block.wo.forward(&mut g2, v).unwrap();
        for (a, b) in g.value(got).data().iter().zip(g2.value(want).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_tokens_get_identical_outputs() {
        let mut rng = Rng::new(5);
        let block = AttentionBlock::<f64>::new("blk", 12, 2, &mut rng).unwrap();
        let row: Vec<f64> = (0..12).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let mut data = row.clone();
        data.extend_from_slice(&row);
        let x = Tensor::from_vec(&[2, 12], data).unwrap();
        let p = [0.3, 0.4, 0.5];
        let mut g = Graph::new();
        let xv = g.constant(x);
        let out = block.forward_windows(&mut g, xv, &[p, p], &[0..2]).unwrap();
        let od = g.value(out);
        for c in 0..12 {
            assert_eq!(od.row(0)[c], od.row(1)[c]);
        }
    }

    /// Dense single-window multi-head attention computed independently,
    /// row by row, against the composed implementation.
    #[test]
    fn windowed_attention_matches_dense_oracle() {
        let mut rng = Rng::new(6);
        let (n, dim, heads) = (7, 12, 2);
        let block = AttentionBlock::<f64>::new("blk", dim, heads, &mut rng).unwrap();
        let x = Tensor::<f64>::from_fn(&[n, dim], |_| rng.uniform(-1.0, 1.0));
        let coords = rand_coords(n, &mut rng);

        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let got = block.attend_windows(&mut g, xv, &coords, &[0..n]).unwrap();
        let got = g.value(got).clone();

        // Oracle: explicit projections, rotations, softmax per row.
        let hd = dim / heads;
        let project = |lin: &Linear<f64>, rows: &Tensor<f64>| -> Vec<Vec<f64>> {
            let w = &lin.w.value;
            let b = lin.b.as_ref().unwrap();
            (0..rows.shape()[0])
                .map(|i| {
                    (0..dim)
                        .map(|o| {
                            let mut acc = b.value.data()[o];
                            for c in 0..dim {
                                acc += rows.row(i)[c] * w.data()[c * dim + o];
                            }
                            acc
                        })
                        .collect()
                })
                .collect()
        };
        let rot = |v: &mut [f64], p: [f64; 3], cfg: &RopeConfig| {
            let pairs = cfg.group / 2;
            for (axis, &coord) in p.iter().enumerate() {
                for j in 0..pairs {
                    let ang = cfg.base.powf(-2.0 * j as f64 / cfg.group as f64) * coord;
                    let (s, c) = ang.sin_cos();
                    let i0 = axis * cfg.group + 2 * j;
                    let (a, b) = (v[i0], v[i0 + 1]);
                    v[i0] = a * c - b * s;
                    v[i0 + 1] = a * s + b * c;
                }
            }
        };
        let mut q = project(&block.wq, &x);
        let mut k = project(&block.wk, &x);
        let v = project(&block.wv, &x);
        for i in 0..n {
            rot(&mut q[i], coords[i], &block.rope);
            rot(&mut k[i], coords[i], &block.rope);
        }
        let mut attn = vec![vec![0.0f64; dim]; n];
        for i in 0..n {
            for h in 0..heads {
                let mut logits = vec![0.0f64; n];
                for (j, logit) in logits.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for c in h * hd..(h + 1) * hd {
                        acc += q[i][c] * k[j][c];
                    }
                    *logit = acc / (hd as f64).sqrt();
                }
                let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let z: f64 = exps.iter().sum();
                for c in h * hd..(h + 1) * hd {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += exps[j] / z * v[j][c];
                    }
                    attn[i][c] = acc;
                }
            }
        }
        for i in 0..n {
            for o in 0..dim {
                let mut acc = block.wo.b.as_ref().unwrap().value.data()[o];
                for c in 0..dim {
                    acc += attn[i][c] * block.wo.w.value.data()[c * dim + o];
                }
                let gv = got.row(i)[o];
                assert!((gv - acc).abs() < 1e-5, "row {i} ch {o}: {gv} vs {acc}");
            }
        }
    }

    #[test]
    fn token_update_k0_is_projection_and_ffn() {
        let mut rng = Rng::new(7);
        let block = AttentionBlock::<f64>::new("blk", 12, 2, &mut rng).unwrap();
        let z0 = Tensor::<f64>::from_fn(&[3, 12], |_| rng.uniform(-1.0, 1.0));
        let coords = rand_coords(3, &mut rng);

        let mut g = Graph::new();
        let zv = g.constant(z0.clone());
        let got = block.token_update(&mut g, zv, None, &coords, &[]).unwrap();

        // Expected: z0 + Wo(Wv(norm z0)), then the pre-norm FFN residual —
        // the attention weight over the single token is 1.
        let mut g2 = Graph::<f64>::new();
        let zv2 = g2.constant(z0);
        let zn = block.norm_attn.forward(&mut g2, zv2).unwrap();
        let v = block.wv.forward(&mut g2, zn).unwrap();
        let proj = block.wo.forward(&mut g2, v).unwrap();
        let h = g2.add(zv2, proj).unwrap();
        let hn = block.norm_ffn.forward(&mut g2, h).unwrap();
        let f = block.ffn.forward(&mut g2, hn).unwrap();
        let want = g2.add(h, f).unwrap();
        for (a, b) in g.value(got).data().iter().zip(g2.value(want).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// Full self-attention over each {z0, neighbors} sequence, restricted to
    /// the first output row, must match the fused token update.
    #[test]
    fn token_update_matches_dense_oracle() {
        let mut rng = Rng::new(8);
        let (m, k_nbr, dim, heads) = (4, 5, 12, 2);
        let block = AttentionBlock::<f64>::new("blk", dim, heads, &mut rng).unwrap();
        let z0 = Tensor::<f64>::from_fn(&[m, dim], |_| rng.uniform(-1.0, 1.0));
        let z = Tensor::<f64>::from_fn(&[m * k_nbr, dim], |_| rng.uniform(-1.0, 1.0));
        let qc = rand_coords(m, &mut rng);
        let nc = rand_coords(m * k_nbr, &mut rng);

        let mut g = Graph::new();
        let z0v = g.constant(z0.clone());
        let zv = g.constant(z.clone());
        let got = block.token_update(&mut g, z0v, Some(zv), &qc, &nc).unwrap();
        let got = g.value(got).clone();

        for q in 0..m {
            // Sequence for this query through the windowed path (itself
            // pinned against the dense oracle above); row 0 is z0.
            let mut seq = z0.row(q).to_vec();
            let mut coords = vec![qc[q]];
            for j in 0..k_nbr {
                seq.extend_from_slice(z.row(q * k_nbr + j));
                coords.push(nc[q * k_nbr + j]);
            }
            let seq = Tensor::from_vec(&[k_nbr + 1, dim], seq).unwrap();
            let mut g2 = Graph::new();
            let sv = g2.constant(seq);
            let full = block
                .forward_windows(&mut g2, sv, &coords, &[0..k_nbr + 1])
                .unwrap();
            let want = g2.value(full);
            for c in 0..dim {
                let a = got.row(q)[c];
                let b = want.row(0)[c];
                assert!((a - b).abs() < 1e-9, "query {q} ch {c}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn dspt_every_window_singleton_means_no_mixing() {
        let mut rng = Rng::new(9);
        let n = 6;
        let dim = 12;
        let coords = rand_coords(n, &mut rng);
        let pc = PointCloud::from_normalized(coords, WorldTransform::IDENTITY).unwrap();
        let dspt = DsptBlock::<f64>::new("dspt", dim, 2, &mut rng).unwrap();
        let parts = partitions_for(&pc, n).unwrap();

        let feats = Tensor::<f64>::from_fn(&[n, dim], |_| rng.uniform(-1.0, 1.0));
        let run = |f: &Tensor<f64>| -> Tensor<f64> {
            let mut g = Graph::new();
            let fv = g.constant(f.clone());
            let out = dspt.forward(&mut g, &pc, fv, &parts).unwrap();
            g.value(out).clone()
        };
        let base = run(&feats);
        // Change one point's features; every other row stays bit-identical.
        let mut bumped = feats.clone();
        for c in 0..dim {
            bumped.data_mut()[3 * dim + c] += 0.7;
        }
        let moved = run(&bumped);
        for i in 0..n {
            if i == 3 {
                continue;
            }
            for c in 0..dim {
                assert_eq!(base.row(i)[c], moved.row(i)[c], "row {i} mixed");
            }
        }
    }

    #[test]
    fn dspt_is_permutation_equivariant() {
        let mut rng = Rng::new(10);
        let n = 14;
        let dim = 12;
        let coords = rand_coords(n, &mut rng);
        let feats = Tensor::<f64>::from_fn(&[n, dim], |_| rng.uniform(-1.0, 1.0));
        let dspt = DsptBlock::<f64>::new("dspt", dim, 2, &mut rng).unwrap();

        let run = |coords: Vec<[f64; 3]>, feats: Tensor<f64>| -> Tensor<f64> {
            let pc = PointCloud::from_normalized(coords, WorldTransform::IDENTITY).unwrap();
            let parts = partitions_for(&pc, 4).unwrap();
            let mut g = Graph::new();
            let fv = g.constant(feats);
            let out = dspt.forward(&mut g, &pc, fv, &parts).unwrap();
            g.value(out).clone()
        };

        let base = run(coords.clone(), feats.clone());

        let perm: Vec<usize> = {
            let mut p: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                let j = rng.uniform_usize(i + 1);
                p.swap(i, j);
            }
            p
        };
        let pcoords: Vec<[f64; 3]> = perm.iter().map(|&i| coords[i]).collect();
        let mut pdata = Vec::with_capacity(n * dim);
        for &i in &perm {
            pdata.extend_from_slice(feats.row(i));
        }
        let pfeats = Tensor::from_vec(&[n, dim], pdata).unwrap();
        let permuted = run(pcoords, pfeats);

        // output(π·input) == π·output(input), exactly.
        for (new_row, &orig) in perm.iter().enumerate() {
            for c in 0..dim {
                assert_eq!(
                    permuted.row(new_row)[c],
                    base.row(orig)[c],
                    "row {new_row}/{orig}"
                );
            }
        }
    }

    #[test]
    fn dspt_single_window_equals_global_attention() {
        let mut rng = Rng::new(11);
        let n = 9;
        let dim = 12;
        let coords = rand_coords(n, &mut rng);
        let pc = PointCloud::from_normalized(coords.clone(), WorldTransform::IDENTITY).unwrap();
        let dspt = DsptBlock::<f64>::new("dspt", dim, 2, &mut rng).unwrap();
        let parts = partitions_for(&pc, 1).unwrap();
        let feats = Tensor::<f64>::from_fn(&[n, dim], |_| rng.uniform(-1.0, 1.0));

        let mut g = Graph::new();
        let fv = g.constant(feats.clone());
        let got = dspt.forward(&mut g, &pc, fv, &parts).unwrap();
        let got = g.value(got).clone();

        // Same computation with one explicit dense window per axis.
        let mut cur = feats;
        for (block, part) in dspt.axis_blocks.iter().zip(parts.iter()) {
            let mut g2 = Graph::new();
            let sorted_idx = part.sorted_index();
            let sorted_coords: Vec<[f64; 3]> = sorted_idx.iter().map(|&i| coords[i]).collect();
            let fv = g2.constant(cur.clone());
            let sorted = g2.gather_rows(fv, sorted_idx).unwrap();
            let out = block
                .forward_windows(&mut g2, sorted, &sorted_coords, &[0..n])
                .unwrap();
            let out = part.unsort(&mut g2, out).unwrap();
            cur = g2.value(out).clone();
        }
        for (a, b) in got.data().iter().zip(cur.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    /// The fused uniform-window path and the per-window sliced path are the
    /// same function.
    #[test]
    fn fused_and_sliced_window_paths_agree() {
        let mut rng = Rng::new(21);
        let (n, dim, heads) = (12, 12, 2);
        let block = AttentionBlock::<f64>::new("blk", dim, heads, &mut rng).unwrap();
        let x = Tensor::<f64>::from_fn(&[n, dim], |_| rng.uniform(-1.0, 1.0));
        let coords = rand_coords(n, &mut rng);
        let windows: Vec<std::ops::Range<usize>> = vec![0..4, 4..8, 8..12];

        let mut g1 = Graph::new();
        let xv = g1.constant(x.clone());
        let fused = block.attend_windows(&mut g1, xv, &coords, &windows).unwrap();
        let mut g2 = Graph::new();
        let xv = g2.constant(x);
        let sliced = block
            .attend_windows_sliced(&mut g2, xv, &coords, &windows)
            .unwrap();
        for (a, b) in g1.value(fused).data().iter().zip(g2.value(sliced).data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn attention_weights_invariant_under_global_translation() {
        // Logits depend only on coordinate differences; shifting the whole
        // cloud leaves softmax weights unchanged.
        let mut rng = Rng::new(12);
        let (n, dim, heads) = (6, 12, 2);
        let block = AttentionBlock::<f64>::new("blk", dim, heads, &mut rng).unwrap();
        let x = Tensor::<f64>::from_fn(&[n, dim], |_| rng.uniform(-1.0, 1.0));
        let coords = rand_coords(n, &mut rng);
        let t = [0.17, -0.21, 0.05];
        let shifted: Vec<[f64; 3]> = coords
            .iter()
            .map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]])
            .collect();

        let weights_for = |cs: &[[f64; 3]]| -> Vec<f64> {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let q = block.wq.forward(&mut g, xv).unwrap();
            let k = block.wk.forward(&mut g, xv).unwrap();
            let q = rope_embed(&mut g, q, cs, &block.rope).unwrap();
            let k = rope_embed(&mut g, k, cs, &block.rope).unwrap();
            let hd = dim / heads;
            let mut all = Vec::new();
            for h in 0..heads {
                let qh = g.narrow(q, 1, h * hd, hd).unwrap();
                let kh = g.narrow(k, 1, h * hd, hd).unwrap();
                let logits = g.matmul_nt(qh, kh).unwrap();
                let logits = g.mul_scalar(logits, 1.0 / (hd as f64).sqrt());
                let w = g.softmax(logits).unwrap();
                all.extend_from_slice(g.value(w).data());
            }
            all
        };
        let a = weights_for(&coords);
        let b = weights_for(&shifted);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-5, "{x} vs {y}");
        }
    }
}
