//! Integrated implicit decoder: occupancy logits for arbitrary query
//! coordinates from the refined dual latents.
//!
//! Per query q the decoder interpolates the grid latent into a 2d query
//! feature, gathers the K nearest point latents with their own interpolated
//! grid features as neighbor tokens, and refines the query token through
//! four attention passes in which only the query token is updated. A final
//! linear layer yields the occupancy logit; probabilities are sigmoids of
//! logits and taken inside the loss during training.

use crate::attention::AttentionBlock;
use crate::graph::{Graph, Var};
use crate::nn::{LayerNorm, Linear, ParamSet, Parameter};
use crate::pointgrid::{self, GridKind, PointCloud};
use crate::{Error, Result, Rng, Scalar};

#[derive(Debug, Clone)]
pub struct IidWeights<T: Scalar> {
    pub d: usize,
    pub kind: GridKind,
    /// d -> 2d projection of the interpolated query feature (weight only).
    pub input_proj: Linear<T>,
    /// Exactly four attention blocks over (K+1)-token sequences at width 2d.
    pub blocks: Vec<AttentionBlock<T>>,
    /// Final norm before the head; keeps the logit scale independent of the
    /// residual-stream magnitude.
    pub norm_out: LayerNorm<T>,
    /// 2d -> 1 output head (zero-initialized bias).
    pub out_proj: Linear<T>,
}

impl<T: Scalar> IidWeights<T> {
    pub fn new(
        prefix: &str,
        d: usize,
        kind: GridKind,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let blocks = (0..4)
            .map(|i| AttentionBlock::new(&format!("{prefix}.attn{i}"), 2 * d, heads, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(IidWeights {
            d,
            kind,
            input_proj: Linear::new(&format!("{prefix}.in"), d, 2 * d, false, rng),
            blocks,
            norm_out: LayerNorm::new(&format!("{prefix}.norm_out"), 2 * d),
            // Small head gain keeps untrained logits near zero (initial
            // loss close to ln 2) while still passing gradient upstream.
            out_proj: Linear::with_gain(&format!("{prefix}.out"), 2 * d, 1, true, 0.25, rng),
        })
    }
}

impl<T: Scalar> ParamSet<T> for IidWeights<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        let mut v = self.input_proj.params();
        for b in &self.blocks {
            v.extend(b.params());
        }
        v.extend(self.norm_out.params());
        v.extend(self.out_proj.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = self.input_proj.params_mut();
        for b in &mut self.blocks {
            v.extend(b.params_mut());
        }
        v.extend(self.norm_out.params_mut());
        v.extend(self.out_proj.params_mut());
        v
    }
}

/// Occupancy logits for a batch of query coordinates (in normalized space).
/// `t_tilde` and `c_tilde` are the refined latents of `pc`; `k` neighbors
/// are taken per query. Returns an (M,) logit tensor node.
pub fn iid_forward<T: Scalar>(
    g: &mut Graph<T>,
    w: &IidWeights<T>,
    t_tilde: Var,
    pc: &PointCloud,
    c_tilde: Var,
    queries: &[[f64; 3]],
    k: usize,
) -> Result<Var> {
    let n = pc.len();
    let m = queries.len();
    if m == 0 {
        return Err(Error::invalid("iid_forward: empty query batch"));
    }
    if k == 0 || k > n {
        return Err(Error::invalid(format!(
            "iid_forward: k = {k} with {n} points"
        )));
    }
    if g.shape(c_tilde) != [n, w.d] {
        return Err(Error::invalid(format!(
            "iid_forward: point latents {:?} vs (N={n}, d={})",
            g.shape(c_tilde),
            w.d
        )));
    }

    // Query feature from the grid latent.
    let q_feat = pointgrid::interpolate(g, t_tilde, queries, w.kind)?;
    let mut z0 = w.input_proj.forward(g, q_feat)?;

    // K nearest neighbors per query (parallel; deterministic output order).
    let coords = pc.coords();
    let nbr_idx: Vec<usize> = crate::exec::map_range(m, m * n, |qi| {
        pointgrid::knn_indices(queries[qi], coords, k).expect("k <= n")
    })
    .into_iter()
    .flatten()
    .collect();
    let nbr_coords: Vec<[f64; 3]> = nbr_idx.iter().map(|&i| pc.point(i)).collect();

    // Neighbor integrated features: point latents ++ their grid features.
    let c_nbr = g.gather_rows(c_tilde, &nbr_idx)?;
    let t_nbr = pointgrid::interpolate(g, t_tilde, &nbr_coords, w.kind)?;
    let z = g.concat(&[c_nbr, t_nbr], 1)?;

    // Four passes, each updating only the query token.
    for block in &w.blocks {
        z0 = block.token_update(g, z0, Some(z), queries, &nbr_coords)?;
    }

    let z0 = w.norm_out.forward(g, z0)?;
    let logits = w.out_proj.forward(g, z0)?;
    g.reshape(logits, &[m])
}
