//! Geometry primitives bridging point and grid latents: unit-cube
//! normalization, point-to-grid scatter, grid-to-point interpolation, KNN,
//! and the sorted window partition used by the point transformer.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::graph::{Graph, Tap, Var};
use crate::{Error, Result, Scalar, Tensor};

/// Sort axis for the window partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }
}

/// Grid latent flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    Triplane,
    Voxel,
}

/// Triplane plane order is fixed: (xy, xz, yz).
pub const PLANE_AXES: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

/// Uniform scale + offset between world coordinates and the unit cube.
#[derive(Debug, Clone, Copy)]
pub struct WorldTransform {
    pub scale: f64,
    pub center: [f64; 3],
}

impl WorldTransform {
    pub const IDENTITY: WorldTransform = WorldTransform {
        scale: 1.0,
        center: [0.5, 0.5, 0.5],
    };

    pub fn to_world(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - 0.5) / self.scale + self.center[0],
            (p[1] - 0.5) / self.scale + self.center[1],
            (p[2] - 0.5) / self.scale + self.center[2],
        ]
    }

    pub fn to_normalized(&self, p: [f64; 3]) -> [f64; 3] {
        [
            0.5 + (p[0] - self.center[0]) * self.scale,
            0.5 + (p[1] - self.center[1]) * self.scale,
            0.5 + (p[2] - self.center[2]) * self.scale,
        ]
    }
}

/// A point cloud normalized into the unit cube, with the inverse transform
/// back to the original units.
#[derive(Debug, Clone)]
pub struct PointCloud {
    coords: Vec<[f64; 3]>,
    pub transform: WorldTransform,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[[f64; 3]] {
        &self.coords
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        self.coords[i]
    }

    /// Coordinates flattened row-major into the requested precision.
    pub fn coords_flat<T: Scalar>(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.coords.len() * 3);
        for p in &self.coords {
            out.extend(p.iter().map(|&v| T::from_f64(v)));
        }
        out
    }

    /// Construct directly from already-normalized coordinates in [0,1]³.
    pub fn from_normalized(coords: Vec<[f64; 3]>, transform: WorldTransform) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::invalid("point cloud must contain at least one point"));
        }
        for p in &coords {
            for &v in p {
                if !(-1e-9..=1.0 + 1e-9).contains(&v) {
                    return Err(Error::invalid(format!(
                        "normalized coordinate {v} outside the unit cube"
                    )));
                }
            }
        }
        Ok(PointCloud { coords, transform })
    }
}

/// Map raw world points into [pad/2, 1-pad/2]³, preserving aspect ratio: the
/// longest bounding-box axis spans the full padded range and the others are
/// centered. A cloud with zero extent on every axis maps to the cube center
/// (by convention, so a single repeated point stays representable).
pub fn normalize_points(raw: &[[f64; 3]], padding: f64) -> Result<PointCloud> {
    if raw.is_empty() {
        return Err(Error::invalid("normalize_points: empty input"));
    }
    if !(0.0..1.0).contains(&padding) {
        return Err(Error::invalid(format!("normalize_points: bad padding {padding}")));
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in raw {
        for a in 0..3 {
            if !p[a].is_finite() {
                return Err(Error::invalid("normalize_points: non-finite coordinate"));
            }
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let center = [
        0.5 * (lo[0] + hi[0]),
        0.5 * (lo[1] + hi[1]),
        0.5 * (lo[2] + hi[2]),
    ];
    let extent = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(hi[2] - lo[2]);
    let scale = if extent > 0.0 { (1.0 - padding) / extent } else { 1.0 };
    let transform = WorldTransform { scale, center };
    let coords = raw
        .iter()
        .map(|&p| {
            let mut n = transform.to_normalized(p);
            // Guard against last-ulp spill outside the cube.
            for v in n.iter_mut() {
                *v = v.clamp(0.0, 1.0);
            }
            n
        })
        .collect();
    Ok(PointCloud { coords, transform })
}

// ───────────────────────── window partition ─────────────────────────

/// Sorted window partition: a permutation into axis-sorted order plus window
/// boundaries with sizes differing by at most one.
#[derive(Debug, Clone)]
pub struct WindowPartition {
    pub axis: Axis,
    sorted_index: Vec<usize>,
    inverse_index: Vec<usize>,
    window_bounds: Vec<usize>,
}

impl WindowPartition {
    pub fn sorted_index(&self) -> &[usize] {
        &self.sorted_index
    }

    pub fn inverse_index(&self) -> &[usize] {
        &self.inverse_index
    }

    pub fn window_bounds(&self) -> &[usize] {
        &self.window_bounds
    }

    pub fn n_windows(&self) -> usize {
        self.window_bounds.len() - 1
    }

    /// Half-open row ranges of each window in the sorted order.
    pub fn windows(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        self.window_bounds
            .windows(2)
            .map(|w| w[0]..w[1])
    }

    /// Restore sorted-order feature rows to the original point order.
    pub fn unsort_rows<T: Scalar>(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        if features.rank() != 2 || features.shape()[0] != self.sorted_index.len() {
            return Err(Error::invalid(format!(
                "unsort: got {:?}, expected {} rows",
                features.shape(),
                self.sorted_index.len()
            )));
        }
        let d = features.shape()[1];
        let mut out = vec![T::ZERO; features.numel()];
        for (sorted_row, &orig) in self.sorted_index.iter().enumerate() {
            out[orig * d..(orig + 1) * d]
                .copy_from_slice(&features.data()[sorted_row * d..(sorted_row + 1) * d]);
        }
        Tensor::from_vec(features.shape(), out)
    }

    /// Graph-level unsort (gather by the inverse permutation).
    pub fn unsort<T: Scalar>(&self, g: &mut Graph<T>, features: Var) -> Result<Var> {
        if g.shape(features)[0] != self.sorted_index.len() {
            return Err(Error::invalid(format!(
                "unsort: got {:?}, expected {} rows",
                g.shape(features),
                self.sorted_index.len()
            )));
        }
        g.gather_rows(features, &self.inverse_index)
    }
}

/// Stable sort by the chosen axis coordinate (ties keep original order),
/// split into `l` windows: the first N mod L windows hold ⌈N/L⌉ points, the
/// rest ⌊N/L⌋.
pub fn sort_and_split(pc: &PointCloud, axis: Axis, l: usize) -> Result<WindowPartition> {
    let n = pc.len();
    if l == 0 || l > n {
        return Err(Error::invalid(format!(
            "sort_and_split: {l} windows for {n} points"
        )));
    }
    let a = axis.index();
    let mut sorted_index: Vec<usize> = (0..n).collect();
    // Coordinates are validated finite, so total order is safe.
    sorted_index.sort_by(|&i, &j| {
        pc.coords[i][a]
            .partial_cmp(&pc.coords[j][a])
            .unwrap()
            .then(i.cmp(&j))
    });
    let mut inverse_index = vec![0usize; n];
    for (sorted_row, &orig) in sorted_index.iter().enumerate() {
        inverse_index[orig] = sorted_row;
    }
    let big = n.div_ceil(l);
    let small = n / l;
    let n_big = n % l;
    let mut window_bounds = Vec::with_capacity(l + 1);
    let mut acc = 0;
    window_bounds.push(0);
    for w in 0..l {
        acc += if w < n_big { big } else { small };
        window_bounds.push(acc);
    }
    debug_assert_eq!(acc, n);
    Ok(WindowPartition {
        axis,
        sorted_index,
        inverse_index,
        window_bounds,
    })
}

// ───────────────────────── KNN ─────────────────────────

/// Indices of the `k` nearest points to `q`, ascending by distance with ties
/// broken by smaller index. Brute force; fine at desk scale.
pub fn knn_indices(q: [f64; 3], points: &[[f64; 3]], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > points.len() {
        return Err(Error::invalid(format!(
            "knn: k = {k} with {} points",
            points.len()
        )));
    }
    // (distance², index) max-heap of the current best k.
    let mut heap: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for (i, p) in points.iter().enumerate() {
        let dx = p[0] - q[0];
        let dy = p[1] - q[1];
        let dz = p[2] - q[2];
        let d2 = dx * dx + dy * dy + dz * dz;
        if heap.len() < k {
            heap.push((d2, i));
            if heap.len() == k {
                heap.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(b.1.cmp(&a.1)));
            }
        } else if d2 < heap[0].0 || (d2 == heap[0].0 && i < heap[0].1) {
            heap[0] = (d2, i);
            // Restore descending order of the small buffer.
            let mut j = 0;
            while j + 1 < k
                && (heap[j].0 < heap[j + 1].0
                    || (heap[j].0 == heap[j + 1].0 && heap[j].1 < heap[j + 1].1))
            {
                heap.swap(j, j + 1);
                j += 1;
            }
        }
    }
    if heap.len() < k {
        heap.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(b.1.cmp(&a.1)));
    }
    heap.reverse();
    Ok(heap.into_iter().map(|(_, i)| i).collect())
}

/// KNN against a normalized cloud, returning neighbor coordinates too.
pub fn knn(q: [f64; 3], pc: &PointCloud, k: usize) -> Result<(Vec<usize>, Vec<[f64; 3]>)> {
    let idx = knn_indices(q, pc.coords(), k)?;
    let coords = idx.iter().map(|&i| pc.coords[i]).collect();
    Ok((idx, coords))
}

// ───────────────────────── point -> grid ─────────────────────────

fn cell_of(v: f64, r: usize) -> usize {
    ((v * r as f64) as isize).clamp(0, r as isize - 1) as usize
}

/// Point indices sorted lexicographically by coordinate (ties by index).
/// Scatter reductions accumulate in this order, so clouds with distinct
/// coordinates produce bit-identical grids under any input permutation.
pub fn canonical_order(pc: &PointCloud) -> Vec<usize> {
    let mut order: Vec<usize> = (0..pc.len()).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (pc.coords[a], pc.coords[b]);
        pa.partial_cmp(&pb).unwrap().then(a.cmp(&b))
    });
    order
}

/// Compact cell ids per point and reciprocal occupancy counts for the
/// nearest-cell scatter stencil. Triplane yields 3 ids per point
/// (plane-major), voxel one.
fn scatter_cells(pc: &PointCloud, r: usize, kind: GridKind) -> (Vec<usize>, Vec<f64>, usize) {
    match kind {
        GridKind::Triplane => {
            let spatial = r * r;
            let mut cells = Vec::with_capacity(pc.len() * 3);
            let mut counts = vec![0usize; 3 * spatial];
            for p in pc.coords() {
                for (plane, &(a0, a1)) in PLANE_AXES.iter().enumerate() {
                    let id = plane * spatial + cell_of(p[a0], r) * r + cell_of(p[a1], r);
                    cells.push(id);
                    counts[id] += 1;
                }
            }
            let inv = counts
                .iter()
                .map(|&c| if c == 0 { 0.0 } else { 1.0 / c as f64 })
                .collect();
            (cells, inv, spatial)
        }
        GridKind::Voxel => {
            let spatial = r * r * r;
            let mut cells = Vec::with_capacity(pc.len());
            let mut counts = vec![0usize; spatial];
            for p in pc.coords() {
                let id = (cell_of(p[0], r) * r + cell_of(p[1], r)) * r + cell_of(p[2], r);
                cells.push(id);
                counts[id] += 1;
            }
            let inv = counts
                .iter()
                .map(|&c| if c == 0 { 0.0 } else { 1.0 / c as f64 })
                .collect();
            (cells, inv, spatial)
        }
    }
}

/// Scatter-mean point features into a grid latent. Each point contributes to
/// the nearest cell of each plane (triplane) or of the volume (voxel); empty
/// cells stay zero. Output layout is (3, d, R, R) or (1, d, R, R, R).
pub fn point_to_grid<T: Scalar>(
    g: &mut Graph<T>,
    feats: Var,
    pc: &PointCloud,
    r: usize,
    kind: GridKind,
) -> Result<Var> {
    let fs = g.shape(feats);
    if fs.len() != 2 || fs[0] != pc.len() {
        return Err(Error::invalid(format!(
            "point_to_grid: features {fs:?} vs {} points",
            pc.len()
        )));
    }
    let d = fs[1];
    let (cells, inv, spatial) = scatter_cells(pc, r, kind);
    let inv: Vec<T> = inv.into_iter().map(T::from_f64).collect();
    // Accumulate in canonical coordinate order: permutation-invariant
    // rounding (see `canonical_order`).
    let order = canonical_order(pc);
    let feats = g.gather_rows(feats, &order)?;
    let per_row = match kind {
        GridKind::Triplane => 3,
        GridKind::Voxel => 1,
    };
    let mut cells_sorted = Vec::with_capacity(cells.len());
    for &row in &order {
        cells_sorted.extend_from_slice(&cells[row * per_row..(row + 1) * per_row]);
    }
    match kind {
        GridKind::Triplane => g.scatter_mean_grid_raw(
            feats,
            cells_sorted,
            3,
            spatial,
            d * spatial,
            spatial,
            inv,
            &[3, d, r, r],
        ),
        GridKind::Voxel => g.scatter_mean_grid_raw(
            feats,
            cells_sorted,
            1,
            spatial,
            d * spatial,
            spatial,
            inv,
            &[1, d, r, r, r],
        ),
    }
}

/// Sum-reduction scatter on plain tensors (the linear adjoint of
/// [`gather_nearest_grid`]; used by adjointness checks and tests).
pub fn scatter_sum_grid<T: Scalar>(
    feats: &Tensor<T>,
    pc: &PointCloud,
    r: usize,
    kind: GridKind,
) -> Result<Tensor<T>> {
    if feats.rank() != 2 || feats.shape()[0] != pc.len() {
        return Err(Error::invalid("scatter_sum_grid: shape mismatch"));
    }
    let d = feats.shape()[1];
    let (cells, _, spatial) = scatter_cells(pc, r, kind);
    let per_row = cells.len() / pc.len();
    let (shape, chan_stride): (Vec<usize>, usize) = match kind {
        GridKind::Triplane => (vec![3, d, r, r], spatial),
        GridKind::Voxel => (vec![1, d, r, r, r], spatial),
    };
    let mut out = Tensor::zeros(&shape);
    let od = out.data_mut();
    for &row in &canonical_order(pc) {
        let frow = feats.row(row);
        for &cell in &cells[row * per_row..(row + 1) * per_row] {
            let base = (cell / spatial) * d * spatial + cell % spatial;
            for (c, &f) in frow.iter().enumerate() {
                od[base + c * chan_stride] += f;
            }
        }
    }
    Ok(out)
}

/// Nearest-cell gather on plain tensors: per point, the feature of the cell
/// it would scatter into, summed over planes for triplanes.
pub fn gather_nearest_grid<T: Scalar>(
    grid: &Tensor<T>,
    pc: &PointCloud,
    r: usize,
    kind: GridKind,
) -> Result<Tensor<T>> {
    let d = grid.shape()[1];
    let (cells, _, spatial) = scatter_cells(pc, r, kind);
    let per_row = cells.len() / pc.len();
    let gd = grid.data();
    let mut out = Tensor::zeros(&[pc.len(), d]);
    let od = out.data_mut();
    for (row, rcells) in cells.chunks(per_row).enumerate() {
        for &cell in rcells {
            let base = (cell / spatial) * d * spatial + cell % spatial;
            for c in 0..d {
                od[row * d + c] += gd[base + c * spatial];
            }
        }
    }
    Ok(out)
}

// ───────────────────────── grid -> point ─────────────────────────

fn bilinear_taps(v: f64, r: usize) -> [(usize, f64); 2] {
    // Samples live at cell centers (i + 0.5) / R with edge clamping.
    let u = v * r as f64 - 0.5;
    let i0 = u.floor();
    let f = u - i0;
    let i0i = i0 as isize;
    let a = i0i.clamp(0, r as isize - 1) as usize;
    let b = (i0i + 1).clamp(0, r as isize - 1) as usize;
    [(a, 1.0 - f), (b, f)]
}

fn clamp_unit(p: [f64; 3]) -> [f64; 3] {
    debug_assert!(
        p.iter().all(|&v| (-1e-6..=1.0 + 1e-6).contains(&v)),
        "interpolation point {p:?} outside the unit cube"
    );
    [
        p[0].clamp(0.0, 1.0),
        p[1].clamp(0.0, 1.0),
        p[2].clamp(0.0, 1.0),
    ]
}

/// Interpolate grid latents at 3D locations. Triplanes are sampled
/// bilinearly on each plane's 2D projection and the three vectors summed;
/// voxels are sampled trilinearly. Sampling is at cell centers with edge
/// clamping. Returns a (len(coords), d) node.
pub fn interpolate<T: Scalar>(
    g: &mut Graph<T>,
    grid: Var,
    coords: &[[f64; 3]],
    kind: GridKind,
) -> Result<Var> {
    let s = g.shape(grid).to_vec();
    match kind {
        GridKind::Triplane => {
            if s.len() != 4 || s[0] != 3 || s[2] != s[3] {
                return Err(Error::invalid(format!("interpolate: bad triplane {s:?}")));
            }
            let (d, r) = (s[1], s[2]);
            let spatial = r * r;
            let mut taps = Vec::with_capacity(coords.len() * 12);
            for &p in coords {
                let p = clamp_unit(p);
                for (plane, &(a0, a1)) in PLANE_AXES.iter().enumerate() {
                    let ti = bilinear_taps(p[a0], r);
                    let tj = bilinear_taps(p[a1], r);
                    for &(i, wi) in &ti {
                        for &(j, wj) in &tj {
                            taps.push(Tap {
                                base: plane * d * spatial + i * r + j,
                                w: T::from_f64(wi * wj),
                            });
                        }
                    }
                }
            }
            g.grid_sample_raw(grid, taps, 12, spatial, coords.len(), d)
        }
        GridKind::Voxel => {
            if s.len() != 5 || s[0] != 1 || s[2] != s[3] || s[3] != s[4] {
                return Err(Error::invalid(format!("interpolate: bad voxel {s:?}")));
            }
            let (d, r) = (s[1], s[2]);
            let spatial = r * r * r;
            let mut taps = Vec::with_capacity(coords.len() * 8);
            for &p in coords {
                let p = clamp_unit(p);
                let tx = bilinear_taps(p[0], r);
                let ty = bilinear_taps(p[1], r);
                let tz = bilinear_taps(p[2], r);
                for &(i, wi) in &tx {
                    for &(j, wj) in &ty {
                        for &(k, wk) in &tz {
                            taps.push(Tap {
                                base: (i * r + j) * r + k,
                                w: T::from_f64(wi * wj * wk),
                            });
                        }
                    }
                }
            }
            g.grid_sample_raw(grid, taps, 8, spatial, coords.len(), d)
        }
    }
}

// ───────────────────────── DPTC point cloud files ─────────────────────────

const DPTC_MAGIC: &[u8; 4] = b"DPTC";

/// Write a raw (world-space) point cloud: magic "DPTC", u32 N, then N
/// little-endian f32 triples, optionally followed by N normal triples.
pub fn write_dptc<P: AsRef<Path>>(
    path: P,
    points: &[[f64; 3]],
    normals: Option<&[[f64; 3]]>,
) -> Result<()> {
    if let Some(n) = normals {
        if n.len() != points.len() {
            return Err(Error::invalid("write_dptc: normals length mismatch"));
        }
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(DPTC_MAGIC)?;
    w.write_all(&(points.len() as u32).to_le_bytes())?;
    for p in points {
        for &v in p {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    if let Some(normals) = normals {
        for n in normals {
            for &v in n {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a DPTC file; the normals section is present iff bytes remain after
/// the coordinates.
#[allow(clippy::type_complexity)]
pub fn read_dptc<P: AsRef<Path>>(path: P) -> Result<(Vec<[f64; 3]>, Option<Vec<[f64; 3]>>)> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DPTC_MAGIC {
        return Err(Error::invalid("not a DPTC file"));
    }
    let mut n4 = [0u8; 4];
    r.read_exact(&mut n4)?;
    let n = u32::from_le_bytes(n4) as usize;
    let mut read_triples = |count: usize| -> Result<Vec<[f64; 3]>> {
        let mut out = Vec::with_capacity(count);
        let mut b = [0u8; 4];
        for _ in 0..count {
            let mut p = [0.0f64; 3];
            for v in p.iter_mut() {
                r.read_exact(&mut b)?;
                *v = f32::from_le_bytes(b) as f64;
            }
            out.push(p);
        }
        Ok(out)
    };
    let points = read_triples(n)?;
    // Normals are present iff a second section follows.
    let normals = match read_triples(n) {
        Ok(ns) => Some(ns),
        Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::UnexpectedEof => None,
        Err(e) => return Err(e),
    };
    Ok((points, normals))
}

#[cfg(test)]
#[allow(clippy::identity_op)]
mod tests {
    use super::*;
    use crate::Rng;

    fn random_cloud(n: usize, seed: u64) -> Vec<[f64; 3]> {
        let mut rng = Rng::new(seed);
        (0..n)
            .map(|_| {
                [
                    rng.uniform(-3.0, 5.0),
                    rng.uniform(10.0, 11.0),
                    rng.uniform(-0.2, 0.9),
                ]
            })
            .collect()
    }

    #[test]
    fn normalize_roundtrip() {
        let raw = random_cloud(200, 1);
        let pc = normalize_points(&raw, 0.1).unwrap();
        for (p, orig) in pc.coords().iter().zip(&raw) {
            for &v in p {
                assert!((0.0..=1.0).contains(&v));
            }
            let w = pc.transform.to_world(*p);
            for a in 0..3 {
                assert!((w[a] - orig[a]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn normalize_fixpoint() {
        // A cloud already spanning [pad/2, 1-pad/2] symmetrically on every
        // axis is untouched.
        let raw = vec![
            [0.05, 0.05, 0.05],
            [0.95, 0.95, 0.95],
            [0.3, 0.6, 0.5],
        ];
        let pc = normalize_points(&raw, 0.1).unwrap();
        for (p, orig) in pc.coords().iter().zip(&raw) {
            for a in 0..3 {
                assert!((p[a] - orig[a]).abs() < 1e-6, "{p:?} vs {orig:?}");
            }
        }
    }

    #[test]
    fn normalize_degenerate_point_goes_to_center() {
        let raw = vec![[7.0, -2.0, 3.0]; 4];
        let pc = normalize_points(&raw, 0.1).unwrap();
        for p in pc.coords() {
            assert_eq!(*p, [0.5, 0.5, 0.5]);
        }
        let w = pc.transform.to_world([0.5, 0.5, 0.5]);
        assert_eq!(w, [7.0, -2.0, 3.0]);
    }

    #[test]
    fn window_sizes_differ_by_at_most_one() {
        let raw = random_cloud(10, 3);
        let pc = normalize_points(&raw, 0.1).unwrap();
        let part = sort_and_split(&pc, Axis::Y, 3).unwrap();
        let sizes: Vec<usize> = part.windows().map(|r| r.len()).collect();
        assert_eq!(sizes, vec![4, 3, 3]);
    }

    #[test]
    fn window_partition_100_by_25() {
        let raw = random_cloud(100, 4);
        let pc = normalize_points(&raw, 0.1).unwrap();
        let part = sort_and_split(&pc, Axis::X, 25).unwrap();
        assert_eq!(part.n_windows(), 25);
        for r in part.windows() {
            assert_eq!(r.len(), 4);
        }
    }

    #[test]
    fn sort_is_stable_on_ties() {
        let coords = vec![[0.5, 0.1, 0.2], [0.5, 0.9, 0.3], [0.5, 0.2, 0.8]];
        let pc = PointCloud::from_normalized(coords, WorldTransform::IDENTITY).unwrap();
        let part = sort_and_split(&pc, Axis::X, 1).unwrap();
        assert_eq!(part.sorted_index(), &[0, 1, 2]);
    }

    #[test]
    fn partition_is_bijection() {
        let raw = random_cloud(57, 5);
        let pc = normalize_points(&raw, 0.1).unwrap();
        for axis in Axis::ALL {
            let part = sort_and_split(&pc, axis, 7).unwrap();
            let mut seen = [false; 57];
            for &i in part.sorted_index() {
                assert!(!seen[i]);
                seen[i] = true;
            }
            assert!(seen.iter().all(|&s| s));
        }
    }

    #[test]
    fn unsort_roundtrip() {
        let raw = random_cloud(33, 6);
        let pc = normalize_points(&raw, 0.1).unwrap();
        let part = sort_and_split(&pc, Axis::Z, 5).unwrap();
        let mut rng = Rng::new(7);
        let feats = Tensor::<f64>::from_fn(&[33, 4], |_| rng.uniform(-1.0, 1.0));
        // Bring into sorted order, then restore.
        let mut sorted = vec![0.0; feats.numel()];
        for (row, &orig) in part.sorted_index().iter().enumerate() {
            sorted[row * 4..(row + 1) * 4].copy_from_slice(feats.row(orig));
        }
        let sorted = Tensor::from_vec(&[33, 4], sorted).unwrap();
        let restored = part.unsort_rows(&sorted).unwrap();
        assert_eq!(restored, feats);
    }

    #[test]
    fn knn_exact_match_and_line_case() {
        let coords = vec![[0.1, 0.5, 0.5], [0.2, 0.5, 0.5], [0.3, 0.5, 0.5]];
        let pc = PointCloud::from_normalized(coords, WorldTransform::IDENTITY).unwrap();
        let (idx, _) = knn([0.2, 0.5, 0.5], &pc, 1).unwrap();
        assert_eq!(idx, vec![1]);
        let (idx, _) = knn([0.21, 0.5, 0.5], &pc, 2).unwrap();
        assert_eq!(idx, vec![1, 2]);
    }

    #[test]
    fn knn_k_too_large_errors() {
        let pc = PointCloud::from_normalized(vec![[0.5; 3]], WorldTransform::IDENTITY).unwrap();
        assert!(knn([0.5; 3], &pc, 2).is_err());
    }

    fn brute_knn(q: [f64; 3], points: &[[f64; 3]], k: usize) -> Vec<usize> {
        let mut all: Vec<(f64, usize)> = points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                (d2, i)
            })
            .collect();
        all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        all.truncate(k);
        all.into_iter().map(|(_, i)| i).collect()
    }

    #[test]
    fn knn_matches_brute_force() {
        let mut rng = Rng::new(11);
        let points: Vec<[f64; 3]> = (0..1000)
            .map(|_| [rng.next_f64(), rng.next_f64(), rng.next_f64()])
            .collect();
        for trial in 0..20 {
            let q = [rng.next_f64(), rng.next_f64(), rng.next_f64()];
            let got = knn_indices(q, &points, 32).unwrap();
            let want = brute_knn(q, &points, 32);
            assert_eq!(got, want, "trial {trial}");
        }
    }

    #[test]
    fn knn_permutation_invariant_as_a_set() {
        let mut rng = Rng::new(13);
        let points: Vec<[f64; 3]> = (0..200)
            .map(|_| [rng.next_f64(), rng.next_f64(), rng.next_f64()])
            .collect();
        let q = [0.4, 0.6, 0.5];
        let base: std::collections::BTreeSet<_> = knn_indices(q, &points, 16)
            .unwrap()
            .into_iter()
            .map(|i| format!("{:?}", points[i]))
            .collect();
        let mut perm: Vec<[f64; 3]> = points.clone();
        perm.reverse();
        let permuted: std::collections::BTreeSet<_> = knn_indices(q, &perm, 16)
            .unwrap()
            .into_iter()
            .map(|i| format!("{:?}", perm[i]))
            .collect();
        assert_eq!(base, permuted);
    }

    #[test]
    fn point_to_grid_single_point_single_cell() {
        let pc = PointCloud::from_normalized(vec![[0.5; 3]], WorldTransform::IDENTITY).unwrap();
        let mut g = Graph::<f64>::new();
        let f = g.constant(Tensor::from_vec(&[1, 2], vec![3.0, -1.0]).unwrap());
        let grid = point_to_grid(&mut g, f, &pc, 4, GridKind::Triplane).unwrap();
        let gv = g.value(grid);
        assert_eq!(gv.shape(), &[3, 2, 4, 4]);
        for plane in 0..3 {
            for c in 0..2 {
                let mut nonzero = 0;
                for i in 0..4 {
                    for j in 0..4 {
                        let v = gv.data()[((plane * 2 + c) * 4 + i) * 4 + j];
                        if v != 0.0 {
                            nonzero += 1;
                            assert_eq!(v, if c == 0 { 3.0 } else { -1.0 });
                            assert_eq!((i, j), (2, 2));
                        }
                    }
                }
                assert_eq!(nonzero, 1);
            }
        }
    }

    #[test]
    fn point_to_grid_mean_of_two() {
        let coords = vec![[0.51, 0.52, 0.55], [0.53, 0.54, 0.58]];
        let pc = PointCloud::from_normalized(coords, WorldTransform::IDENTITY).unwrap();
        let mut g = Graph::<f64>::new();
        let f = g.constant(Tensor::from_vec(&[2, 1], vec![1.0, 5.0]).unwrap());
        let grid = point_to_grid(&mut g, f, &pc, 2, GridKind::Voxel).unwrap();
        let gv = g.value(grid);
        let cell = (1 * 2 + 1) * 2 + 1; // both points in the (1,1,1) cell
        assert_eq!(gv.data()[cell], 3.0);
    }

    #[test]
    fn point_to_grid_matches_double_loop_oracle() {
        let mut rng = Rng::new(21);
        let coords: Vec<[f64; 3]> = (0..64)
            .map(|_| [rng.next_f64(), rng.next_f64(), rng.next_f64()])
            .collect();
        let pc = PointCloud::from_normalized(coords.clone(), WorldTransform::IDENTITY).unwrap();
        let feats = Tensor::<f64>::from_fn(&[64, 3], |_| rng.uniform(-1.0, 1.0));
        let r = 4;

        let mut g = Graph::<f64>::new();
        let f = g.constant(feats.clone());
        let grid = point_to_grid(&mut g, f, &pc, r, GridKind::Triplane).unwrap();
        let got = g.value(grid);

        // Naive per-cell oracle: mean of contributing features.
        for (plane, &(a0, a1)) in PLANE_AXES.iter().enumerate() {
            for i in 0..r {
                for j in 0..r {
                    for c in 0..3 {
                        let mut sum = 0.0;
                        let mut count = 0usize;
                        for (pt, p) in coords.iter().enumerate() {
                            if cell_of(p[a0], r) == i && cell_of(p[a1], r) == j {
                                sum += feats.data()[pt * 3 + c];
                                count += 1;
                            }
                        }
                        let want = if count == 0 { 0.0 } else { sum / count as f64 };
                        let got_v = got.data()[((plane * 3 + c) * r + i) * r + j];
                        assert!((got_v - want).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn interpolate_constant_grid_partition_of_unity() {
        let mut g = Graph::<f64>::new();
        let tri = g.constant(Tensor::full(&[3, 2, 4, 4], 1.5));
        let vox = g.constant(Tensor::full(&[1, 2, 4, 4, 4], 1.5));
        let pts = [[0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [0.37, 0.81, 0.06]];
        let t_out = interpolate(&mut g, tri, &pts, GridKind::Triplane).unwrap();
        let v_out = interpolate(&mut g, vox, &pts, GridKind::Voxel).unwrap();
        for &v in g.value(t_out).data() {
            assert!((v - 4.5).abs() < 1e-12); // 3 planes x constant
        }
        for &v in g.value(v_out).data() {
            assert!((v - 1.5).abs() < 1e-12);
        }
    }

    #[test]
    fn interpolate_voxel_cell_center_exact() {
        let r = 4;
        let mut vals = Tensor::<f64>::zeros(&[1, 1, r, r, r]);
        let mut rng = Rng::new(3);
        for v in vals.data_mut() {
            *v = rng.uniform(-2.0, 2.0);
        }
        let want = vals.data()[(2 * r + 1) * r + 3];
        let mut g = Graph::<f64>::new();
        let grid = g.constant(vals);
        let p = [
            (2.0 + 0.5) / r as f64,
            (1.0 + 0.5) / r as f64,
            (3.0 + 0.5) / r as f64,
        ];
        let out = interpolate(&mut g, grid, &[p], GridKind::Voxel).unwrap();
        assert!((g.value(out).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn interpolate_matches_corner_weight_oracle() {
        let r = 5;
        let d = 2;
        let mut rng = Rng::new(31);
        let grid_t = Tensor::<f64>::from_fn(&[3, d, r, r], |_| rng.uniform(-1.0, 1.0));
        let mut g = Graph::<f64>::new();
        let grid = g.constant(grid_t.clone());
        let pts: Vec<[f64; 3]> = (0..40)
            .map(|_| [rng.next_f64(), rng.next_f64(), rng.next_f64()])
            .collect();
        let out = interpolate(&mut g, grid, &pts, GridKind::Triplane).unwrap();
        let got = g.value(out);

        // Independent corner-weight enumeration.
        for (qi, &p) in pts.iter().enumerate() {
            for c in 0..d {
                let mut want = 0.0;
                for (plane, &(a0, a1)) in PLANE_AXES.iter().enumerate() {
                    let u = p[a0] * r as f64 - 0.5;
                    let v = p[a1] * r as f64 - 0.5;
                    let (i0, j0) = (u.floor(), v.floor());
                    let (fi, fj) = (u - i0, v - j0);
                    for (di, wi) in [(0, 1.0 - fi), (1, fi)] {
                        for (dj, wj) in [(0, 1.0 - fj), (1, fj)] {
                            let i = (i0 as isize + di).clamp(0, r as isize - 1) as usize;
                            let j = (j0 as isize + dj).clamp(0, r as isize - 1) as usize;
                            want += wi * wj * grid_t.data()[((plane * d + c) * r + i) * r + j];
                        }
                    }
                }
                let got_v = got.data()[qi * d + c];
                assert!((got_v - want).abs() < 1e-6, "{got_v} vs {want}");
            }
        }
    }

    #[test]
    fn scatter_sum_is_adjoint_of_nearest_gather() {
        // dot(scatter_sum(v), w_grid) == dot(v, gather_nearest(w_grid))
        let mut rng = Rng::new(41);
        let coords: Vec<[f64; 3]> = (0..50)
            .map(|_| [rng.next_f64(), rng.next_f64(), rng.next_f64()])
            .collect();
        let pc = PointCloud::from_normalized(coords, WorldTransform::IDENTITY).unwrap();
        let d = 3;
        let r = 4;
        for kind in [GridKind::Triplane, GridKind::Voxel] {
            let feats = Tensor::<f64>::from_fn(&[50, d], |_| rng.uniform(-1.0, 1.0));
            let shape: Vec<usize> = match kind {
                GridKind::Triplane => vec![3, d, r, r],
                GridKind::Voxel => vec![1, d, r, r, r],
            };
            let w_grid = Tensor::<f64>::from_fn(&shape, |_| rng.uniform(-1.0, 1.0));
            let scattered = scatter_sum_grid(&feats, &pc, r, kind).unwrap();
            let gathered = gather_nearest_grid(&w_grid, &pc, r, kind).unwrap();
            let lhs: f64 = scattered
                .data()
                .iter()
                .zip(w_grid.data())
                .map(|(a, b)| a * b)
                .sum();
            let rhs: f64 = feats
                .data()
                .iter()
                .zip(gathered.data())
                .map(|(a, b)| a * b)
                .sum();
            assert!((lhs - rhs).abs() < 1e-6, "{kind:?}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn dptc_roundtrip_bit_identical() {
        let dir = std::env::temp_dir().join("recon_dptc_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("cloud.dptc");
        let mut rng = Rng::new(2);
        // f32-representable values so the roundtrip is bit-exact.
        let pts: Vec<[f64; 3]> = (0..100)
            .map(|_| {
                [
                    rng.uniform(-4.0, 4.0) as f32 as f64,
                    rng.uniform(-4.0, 4.0) as f32 as f64,
                    rng.uniform(-4.0, 4.0) as f32 as f64,
                ]
            })
            .collect();
        let normals: Vec<[f64; 3]> = (0..100)
            .map(|_| {
                let v = rng.unit_vector();
                [v[0] as f32 as f64, v[1] as f32 as f64, v[2] as f32 as f64]
            })
            .collect();
        write_dptc(&path, &pts, Some(&normals)).unwrap();
        let (rp, rn) = read_dptc(&path).unwrap();
        assert_eq!(rp, pts);
        assert_eq!(rn.unwrap(), normals);

        write_dptc(&path, &pts, None).unwrap();
        let (rp2, rn2) = read_dptc(&path).unwrap();
        assert_eq!(rp2, pts);
        assert!(rn2.is_none());
        std::fs::remove_file(&path).ok();
    }
}
