//! Dense occupancy evaluation, marching-cubes mesh extraction, mesh I/O,
//! and surface reconstruction metrics (IoU, Chamfer-L1 x100, normal
//! consistency, F-score@1%).

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::OnceLock;

use crate::graph::Graph;
use crate::model::Model;
use crate::oracle::ShapeOracle;
use crate::pointgrid::{PointCloud, WorldTransform};
use crate::{Error, Result, Rng, Scalar};

/// Occupancy probabilities sampled on a regular G³ lattice of cell centers
/// (position of cell i is (i + 0.5)/G), in normalized coordinates.
#[derive(Debug, Clone)]
pub struct OccupancyGrid {
    pub g: usize,
    /// Row-major (x, y, z): index (ix·G + iy)·G + iz.
    pub values: Vec<f64>,
}

impl OccupancyGrid {
    pub fn from_fn(g: usize, mut f: impl FnMut([f64; 3]) -> f64) -> Self {
        let mut values = Vec::with_capacity(g * g * g);
        for ix in 0..g {
            for iy in 0..g {
                for iz in 0..g {
                    values.push(f(cell_center(g, ix, iy, iz)));
                }
            }
        }
        OccupancyGrid { g, values }
    }

    pub fn at(&self, ix: usize, iy: usize, iz: usize) -> f64 {
        self.values[(ix * self.g + iy) * self.g + iz]
    }
}

pub fn cell_center(g: usize, ix: usize, iy: usize, iz: usize) -> [f64; 3] {
    [
        (ix as f64 + 0.5) / g as f64,
        (iy as f64 + 0.5) / g as f64,
        (iz as f64 + 0.5) / g as f64,
    ]
}

/// All G³ cell-center coordinates in grid order.
pub fn grid_queries(g: usize) -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(g * g * g);
    for ix in 0..g {
        for iy in 0..g {
            for iz in 0..g {
                out.push(cell_center(g, ix, iy, iz));
            }
        }
    }
    out
}

/// Evaluate the model's occupancy probability at every cell center, in
/// chunks of at most `chunk` queries. Chunking is an implementation detail:
/// per-query evaluation is independent, so results are identical to an
/// unchunked pass. The cloud is encoded once.
pub fn eval_occupancy_grid<T: Scalar>(
    model: &Model<T>,
    pc: &PointCloud,
    g: usize,
    chunk: usize,
) -> Result<OccupancyGrid> {
    if g < 2 {
        return Err(Error::invalid("eval_occupancy_grid: G must be at least 2"));
    }
    let chunk = chunk.max(1);
    let (t_tilde, c_tilde) = encode_to_tensors(model, pc)?;
    let queries = grid_queries(g);
    let n_chunks = queries.len().div_ceil(chunk);
    let chunks: Vec<Result<Vec<f64>>> =
        crate::exec::map_range(n_chunks, usize::MAX, |ci| {
            let lo = ci * chunk;
            let hi = (lo + chunk).min(queries.len());
            decode_probabilities(model, pc, &t_tilde, &c_tilde, &queries[lo..hi])
        });
    let mut values = Vec::with_capacity(queries.len());
    for c in chunks {
        values.extend(c?);
    }
    Ok(OccupancyGrid { g, values })
}

/// Encode a cloud once and extract the latent tensors for repeated decoding.
pub fn encode_to_tensors<T: Scalar>(
    model: &Model<T>,
    pc: &PointCloud,
) -> Result<(crate::Tensor<T>, crate::Tensor<T>)> {
    let mut g = Graph::inference();
    let partitions = model.partitions(pc)?;
    let latents = model.encode(&mut g, pc, &partitions)?;
    Ok((
        g.value(latents.t_tilde).clone(),
        g.value(latents.c_tilde).clone(),
    ))
}

/// Decode occupancy probabilities for queries against extracted latents.
pub fn decode_probabilities<T: Scalar>(
    model: &Model<T>,
    pc: &PointCloud,
    t_tilde: &crate::Tensor<T>,
    c_tilde: &crate::Tensor<T>,
    queries: &[[f64; 3]],
) -> Result<Vec<f64>> {
    let mut g = Graph::inference();
    let t = g.constant(t_tilde.clone());
    let c = g.constant(c_tilde.clone());
    let logits = crate::decoder::iid_forward(
        &mut g,
        &model.iid,
        t,
        pc,
        c,
        queries,
        model.cfg.k.min(pc.len()),
    )?;
    let probs = g.sigmoid(logits);
    Ok(g.value(probs).data().iter().map(|v| v.to_f64()).collect())
}

// ───────────────────────── marching cubes ─────────────────────────
//
// Cube corners are numbered by coordinate bits: corner i sits at
// (i&1, (i>>1)&1, (i>>2)&1) relative to the cube origin. Edge e = axis*4+k
// runs along `axis` from base corner BASES[axis][k]. The per-configuration
// triangulation below is generated from marching-squares face rules with a
// fixed choice on ambiguous (diagonal) faces, which makes patches of
// adjacent cubes agree on their shared face and the extracted surface
// watertight by construction.

const EDGE_AXIS_BASES: [[u8; 4]; 3] = [
    [0, 2, 4, 6], // edges along x from corners with x-bit 0
    [0, 1, 4, 5], // along y
    [0, 1, 2, 3], // along z
];

fn edge_endpoints(e: usize) -> (u8, u8) {
    let axis = e / 4;
    let base = EDGE_AXIS_BASES[axis][e % 4];
    (base, base | (1 << axis))
}

fn corner_pos(c: u8) -> [f64; 3] {
    [
        f64::from(c & 1),
        f64::from((c >> 1) & 1),
        f64::from((c >> 2) & 1),
    ]
}

/// Face segments for one cube face under a fixed marching-squares rule.
/// `face` is (axis, side). Returns ordered segments (from, to) between edge
/// ids, oriented so the inside region lies to the left when viewed from
/// outside the cube.
fn face_segments(config: u8, axis: usize, side: usize) -> Vec<(u8, u8)> {
    let (u, v) = (((axis + 1) % 3), ((axis + 2) % 3));
    // Face corners in 2D (ub, vb) layout.
    let corner = |ub: u8, vb: u8| -> u8 {
        let mut c = (side as u8) << axis;
        c |= ub << u;
        c |= vb << v;
        c
    };
    let inside = |c: u8| config >> c & 1 == 1;
    // The four face edges as cube-edge ids, keyed by their 2D role.
    let edge_id = |a: usize, base: u8| -> u8 {
        let k = EDGE_AXIS_BASES[a].iter().position(|&b| b == base).unwrap();
        (a * 4 + k) as u8
    };
    // bottom: along u at v=0; top: along u at v=1; left: along v at u=0;
    // right: along v at u=1.
    let bottom = edge_id(u, corner(0, 0));
    let top = edge_id(u, corner(0, 1));
    let left = edge_id(v, corner(0, 0));
    let right = edge_id(v, corner(1, 0));

    let c00 = inside(corner(0, 0));
    let c10 = inside(corner(1, 0));
    let c01 = inside(corner(0, 1));
    let c11 = inside(corner(1, 1));

    // Segments oriented with inside on the left in the (u, v) frame when the
    // face normal (axis, pointing out of the cube) completes a right-handed
    // system; flip below when it does not.
    let mut segs: Vec<(u8, u8)> = Vec::new();
    let mut seg = |a: u8, b: u8| segs.push((a, b));
    match (c00, c10, c11, c01) {
        (false, false, false, false) | (true, true, true, true) => {}
        // one inside corner: cut it off, keeping it on the left.
        (true, false, false, false) => seg(left, bottom),
        (false, true, false, false) => seg(bottom, right),
        (false, false, true, false) => seg(right, top),
        (false, false, false, true) => seg(top, left),
        // one outside corner (reverse of the above).
        (false, true, true, true) => seg(bottom, left),
        (true, false, true, true) => seg(right, bottom),
        (true, true, false, true) => seg(top, right),
        (true, true, true, false) => seg(left, top),
        // two adjacent inside corners.
        (true, true, false, false) => seg(left, right),
        (false, true, true, false) => seg(bottom, top),
        (false, false, true, true) => seg(right, left),
        (true, false, false, true) => seg(top, bottom),
        // diagonal (ambiguous): fixed rule, separate the inside corners.
        (true, false, true, false) => {
            seg(left, bottom);
            seg(right, top);
        }
        (false, true, false, true) => {
            seg(bottom, right);
            seg(top, left);
        }
    }
    // Outward-facing handedness: the (u, v, axis-out) frame is right-handed
    // iff (u, v, axis) is an even permutation and side == 1, or an odd
    // permutation and side == 0. (u, v) = (axis+1, axis+2) is always an even
    // permutation, so flip when side == 0.
    if side == 0 {
        for s in segs.iter_mut() {
            *s = (s.1, s.0);
        }
    }
    segs
}

/// The closed vertex rings of one configuration, as cyclic edge-id lists.
fn config_rings(config: u8) -> Vec<Vec<u8>> {
    // Collect oriented boundary segments from all six faces.
    let mut next: HashMap<u8, u8> = HashMap::new();
    for axis in 0..3 {
        for side in 0..2 {
            for (a, b) in face_segments(config, axis, side) {
                next.insert(a, b);
            }
        }
    }
    let mut rings = Vec::new();
    let mut visited: Vec<u8> = Vec::new();
    let mut starts: Vec<u8> = next.keys().copied().collect();
    starts.sort_unstable();
    for start in starts {
        if visited.contains(&start) {
            continue;
        }
        let mut ring = vec![start];
        let mut cur = next[&start];
        while cur != start {
            ring.push(cur);
            cur = next[&cur];
        }
        visited.extend_from_slice(&ring);
        rings.push(ring);
    }
    rings
}

/// The two cube faces containing a given edge.
fn edge_faces(e: usize) -> [u8; 2] {
    let axis = e / 4;
    let base = EDGE_AXIS_BASES[axis][e % 4];
    let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
    [
        (u * 2) as u8 + (base >> u & 1),
        (v * 2) as u8 + (base >> v & 1),
    ]
}

fn share_face(a: u8, b: u8) -> bool {
    let (fa, fb) = (edge_faces(a as usize), edge_faces(b as usize));
    fa.iter().any(|f| fb.contains(f))
}

/// Triangulate a ring using only chords whose endpoints lie on no common
/// cube face. Such chords are invisible to every neighboring cube (which
/// shares only the vertices of one face), so patch interiors can never
/// collide across cubes and the extracted surface is watertight by
/// construction. Interval DP over the cyclic polygon.
fn triangulate_ring(ring: &[u8]) -> Option<Vec<[u8; 3]>> {
    let n = ring.len();
    if n == 3 {
        return Some(vec![[ring[0], ring[1], ring[2]]]);
    }
    // ok(i, j): the pair may bound a sub-polygon (ring edge or legal chord).
    let ok = |i: usize, j: usize| -> bool {
        let (lo, hi) = (i.min(j), i.max(j));
        hi - lo == 1 || (lo == 0 && hi == n - 1) || !share_face(ring[lo], ring[hi])
    };
    fn solve(
        i: usize,
        j: usize,
        ring: &[u8],
        ok: &dyn Fn(usize, usize) -> bool,
        memo: &mut HashMap<(usize, usize), Option<Vec<[u8; 3]>>>,
    ) -> Option<Vec<[u8; 3]>> {
        if j - i < 2 {
            return Some(Vec::new());
        }
        if let Some(hit) = memo.get(&(i, j)) {
            return hit.clone();
        }
        let mut result = None;
        for k in i + 1..j {
            if !ok(i, k) || !ok(k, j) {
                continue;
            }
            if let (Some(left), Some(right)) = (
                solve(i, k, ring, ok, memo),
                solve(k, j, ring, ok, memo),
            ) {
                let mut tris = vec![[ring[i], ring[k], ring[j]]];
                tris.extend(left);
                tris.extend(right);
                result = Some(tris);
                break;
            }
        }
        memo.insert((i, j), result.clone());
        result
    }
    let mut memo = HashMap::new();
    solve(0, n - 1, ring, &ok, &mut memo)
}

/// Triangulations (as triples of edge ids) for each of the 256 corner
/// configurations.
fn mc_table() -> &'static Vec<Vec<[u8; 3]>> {
    static TABLE: OnceLock<Vec<Vec<[u8; 3]>>> = OnceLock::new();
    TABLE.get_or_init(|| {
        (0u16..256)
            .map(|config| {
                let mut tris = Vec::new();
                for ring in config_rings(config as u8) {
                    let patch = triangulate_ring(&ring).unwrap_or_else(|| {
                        panic!("no face-safe triangulation for ring {ring:?}")
                    });
                    tris.extend(patch);
                }
                tris
            })
            .collect()
    })
}

/// Triangle mesh with optional per-vertex normals.
#[derive(Debug, Clone, Default)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[u32; 3]>,
    pub normals: Option<Vec<[f64; 3]>>,
}

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    /// Every undirected edge is shared by exactly two triangles.
    pub fn is_closed_manifold(&self) -> bool {
        if self.triangles.is_empty() {
            return false;
        }
        let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
        for t in &self.triangles {
            for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                let key = (a.min(b), a.max(b));
                *counts.entry(key).or_insert(0) += 1;
            }
        }
        counts.values().all(|&c| c == 2)
    }

    /// Every directed edge appears exactly once (consistent orientation).
    pub fn is_consistently_oriented(&self) -> bool {
        let mut seen = std::collections::HashSet::new();
        for t in &self.triangles {
            for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                if !seen.insert((a, b)) {
                    return false;
                }
            }
        }
        true
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        let (pa, pb, pc) = (
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        );
        0.5 * cross_norm(sub(pb, pa), sub(pc, pa))
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    pub fn face_normal(&self, t: usize) -> [f64; 3] {
        let [a, b, c] = self.triangles[t];
        let (pa, pb, pc) = (
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        );
        normalize(cross(sub(pb, pa), sub(pc, pa)))
    }

    /// Area-weighted surface samples with face normals.
    pub fn sample_surface(&self, n: usize, rng: &mut Rng) -> (Vec<[f64; 3]>, Vec<[f64; 3]>) {
        assert!(!self.triangles.is_empty(), "sampling an empty mesh");
        let mut cumulative = Vec::with_capacity(self.triangles.len());
        let mut acc = 0.0;
        for t in 0..self.triangles.len() {
            acc += self.triangle_area(t);
            cumulative.push(acc);
        }
        let total = acc;
        let mut pts = Vec::with_capacity(n);
        let mut normals = Vec::with_capacity(n);
        for _ in 0..n {
            let pick = rng.uniform(0.0, total);
            let t = cumulative.partition_point(|&c| c < pick).min(self.triangles.len() - 1);
            let [a, b, c] = self.triangles[t];
            let (pa, pb, pc) = (
                self.vertices[a as usize],
                self.vertices[b as usize],
                self.vertices[c as usize],
            );
            let (r1, r2) = (rng.next_f64(), rng.next_f64());
            let s = r1.sqrt();
            let (wa, wb, wc) = (1.0 - s, s * (1.0 - r2), s * r2);
            pts.push([
                wa * pa[0] + wb * pb[0] + wc * pc[0],
                wa * pa[1] + wb * pb[1] + wc * pc[1],
                wa * pa[2] + wb * pb[2] + wc * pc[2],
            ]);
            normals.push(self.face_normal(t));
        }
        (pts, normals)
    }

    /// Map vertices (and leave normals direction-only rescaled) through the
    /// normalized-to-world transform.
    pub fn to_world(&self, tf: &WorldTransform) -> Mesh {
        Mesh {
            vertices: self.vertices.iter().map(|&v| tf.to_world(v)).collect(),
            triangles: self.triangles.clone(),
            normals: self.normals.clone(),
        }
    }
}

/// Standard marching cubes at the given iso level. Vertices are linearly
/// interpolated along lattice edges and deduplicated on shared edges; a
/// field with no sign change yields an empty mesh.
pub fn marching_cubes(grid: &OccupancyGrid, iso: f64) -> Result<Mesh> {
    let g = grid.g;
    if g < 2 {
        return Err(Error::invalid("marching_cubes: G must be at least 2"));
    }
    let table = mc_table();
    let inside = |ix: usize, iy: usize, iz: usize| grid.at(ix, iy, iz) > iso;

    let mut vertices: Vec<[f64; 3]> = Vec::new();
    let mut normals_grad: Vec<[f64; 3]> = Vec::new();
    let mut triangles: Vec<[u32; 3]> = Vec::new();
    let mut edge_vertex: HashMap<usize, u32> = HashMap::new();

    let sample_pos = |i: usize, j: usize, k: usize| cell_center(g, i, j, k);

    // Central-difference field gradient for per-vertex normals.
    let grad = |i: usize, j: usize, k: usize| -> [f64; 3] {
        let v = |a: isize, b: isize, c: isize| -> f64 {
            let (a, b, c) = (
                a.clamp(0, g as isize - 1) as usize,
                b.clamp(0, g as isize - 1) as usize,
                c.clamp(0, g as isize - 1) as usize,
            );
            grid.at(a, b, c)
        };
        let (i, j, k) = (i as isize, j as isize, k as isize);
        [
            v(i + 1, j, k) - v(i - 1, j, k),
            v(i, j + 1, k) - v(i, j - 1, k),
            v(i, j, k + 1) - v(i, j, k - 1),
        ]
    };

    for cx in 0..g - 1 {
        for cy in 0..g - 1 {
            for cz in 0..g - 1 {
                let mut config = 0u8;
                for c in 0..8u8 {
                    let p = corner_pos(c);
                    if inside(cx + p[0] as usize, cy + p[1] as usize, cz + p[2] as usize) {
                        config |= 1 << c;
                    }
                }
                let tris = &table[config as usize];
                if tris.is_empty() {
                    continue;
                }
                let mut cube_edge_vertex = [u32::MAX; 12];
                for t in tris {
                    let mut ids = [0u32; 3];
                    for (slot, &e) in t.iter().enumerate() {
                        let e = e as usize;
                        if cube_edge_vertex[e] == u32::MAX {
                            let (ca, cb) = edge_endpoints(e);
                            let (pa, pb) = (corner_pos(ca), corner_pos(cb));
                            let (ia, ja, ka) = (
                                cx + pa[0] as usize,
                                cy + pa[1] as usize,
                                cz + pa[2] as usize,
                            );
                            let (ib, jb, kb) = (
                                cx + pb[0] as usize,
                                cy + pb[1] as usize,
                                cz + pb[2] as usize,
                            );
                            // Global edge key: min endpoint sample + axis.
                            let axis = e / 4;
                            let key = (((ia * g) + ja) * g + ka) * 3 + axis;
                            let vid = *edge_vertex.entry(key).or_insert_with(|| {
                                let va = grid.at(ia, ja, ka);
                                let vb = grid.at(ib, jb, kb);
                                let t = ((iso - va) / (vb - va)).clamp(0.0, 1.0);
                                let a = sample_pos(ia, ja, ka);
                                let b = sample_pos(ib, jb, kb);
                                vertices.push([
                                    a[0] + t * (b[0] - a[0]),
                                    a[1] + t * (b[1] - a[1]),
                                    a[2] + t * (b[2] - a[2]),
                                ]);
                                let ga = grad(ia, ja, ka);
                                let gb = grad(ib, jb, kb);
                                // Field increases toward the inside; the
                                // outward normal is the negated gradient.
                                normals_grad.push(normalize([
                                    -(ga[0] + t * (gb[0] - ga[0])),
                                    -(ga[1] + t * (gb[1] - ga[1])),
                                    -(ga[2] + t * (gb[2] - ga[2])),
                                ]));
                                (vertices.len() - 1) as u32
                            });
                            cube_edge_vertex[e] = vid;
                        }
                        ids[slot] = cube_edge_vertex[e];
                    }
                    // Degenerate (zero-area) triangles can only arise from
                    // repeated vertex ids; drop them.
                    if ids[0] != ids[1] && ids[1] != ids[2] && ids[0] != ids[2] {
                        triangles.push(ids);
                    }
                }
            }
        }
    }
    Ok(Mesh {
        vertices,
        triangles,
        normals: Some(normals_grad),
    })
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn cross_norm(a: [f64; 3], b: [f64; 3]) -> f64 {
    let c = cross(a, b);
    (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt()
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if n < 1e-20 {
        [0.0, 0.0, 1.0]
    } else {
        [v[0] / n, v[1] / n, v[2] / n]
    }
}

// ───────────────────────── OBJ I/O ─────────────────────────

/// Wavefront OBJ export: v/vn/f records with 1-based indices.
pub fn write_obj<P: AsRef<Path>>(path: P, mesh: &Mesh) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for v in &mesh.vertices {
        writeln!(w, "v {} {} {}", v[0], v[1], v[2])?;
    }
    if let Some(normals) = &mesh.normals {
        for n in normals {
            writeln!(w, "vn {} {} {}", n[0], n[1], n[2])?;
        }
    }
    for t in &mesh.triangles {
        if mesh.normals.is_some() {
            writeln!(
                w,
                "f {}//{} {}//{} {}//{}",
                t[0] + 1,
                t[0] + 1,
                t[1] + 1,
                t[1] + 1,
                t[2] + 1,
                t[2] + 1
            )?;
        } else {
            writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Minimal OBJ import: v, vn and triangular f records (v, v/vt, v//vn,
/// v/vt/vn forms). Polygons are fan-triangulated.
pub fn read_obj<P: AsRef<Path>>(path: P) -> Result<Mesh> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut vertices = Vec::new();
    let mut normals = Vec::new();
    let mut triangles: Vec<[u32; 3]> = Vec::new();
    for line in r.lines() {
        let line = line?;
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let mut v = [0.0; 3];
                for x in v.iter_mut() {
                    *x = it
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| Error::invalid("obj: malformed vertex"))?;
                }
                vertices.push(v);
            }
            Some("vn") => {
                let mut v = [0.0; 3];
                for x in v.iter_mut() {
                    *x = it
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| Error::invalid("obj: malformed normal"))?;
                }
                normals.push(v);
            }
            Some("f") => {
                let idx: Vec<u32> = it
                    .map(|tok| {
                        let first = tok.split('/').next().unwrap_or(tok);
                        first
                            .parse::<i64>()
                            .map_err(|_| Error::invalid("obj: malformed face index"))
                            .map(|i| (i - 1) as u32)
                    })
                    .collect::<Result<_>>()?;
                if idx.len() < 3 {
                    return Err(Error::invalid("obj: face with fewer than 3 vertices"));
                }
                for i in 1..idx.len() - 1 {
                    triangles.push([idx[0], idx[i], idx[i + 1]]);
                }
            }
            _ => {}
        }
    }
    for t in &triangles {
        for &i in t {
            if i as usize >= vertices.len() {
                return Err(Error::IndexOutOfBounds {
                    op: "read_obj",
                    index: i as usize,
                    len: vertices.len(),
                });
            }
        }
    }
    let normals = (normals.len() == vertices.len()).then_some(normals);
    Ok(Mesh {
        vertices,
        triangles,
        normals,
    })
}

// ───────────────────────── inside testing ─────────────────────────

/// Point-in-mesh testing by z-column ray parity against a watertight mesh.
/// Columns are jittered off lattice-aligned geometry to dodge edge hits.
pub struct MeshInsideTester {
    res: usize,
    columns: Vec<Vec<f64>>,
    jitter: (f64, f64),
}

impl MeshInsideTester {
    pub fn new(mesh: &Mesh, res: usize) -> Self {
        let jitter = (0.5 + 1.2345678e-4, 0.5 + 2.3456789e-4);
        let mut columns = vec![Vec::new(); res * res];
        for t in 0..mesh.triangles.len() {
            let [a, b, c] = mesh.triangles[t];
            let (pa, pb, pc) = (
                mesh.vertices[a as usize],
                mesh.vertices[b as usize],
                mesh.vertices[c as usize],
            );
            let min_x = pa[0].min(pb[0]).min(pc[0]);
            let max_x = pa[0].max(pb[0]).max(pc[0]);
            let min_y = pa[1].min(pb[1]).min(pc[1]);
            let max_y = pa[1].max(pb[1]).max(pc[1]);
            let lo_i = ((min_x * res as f64 - jitter.0).floor().max(0.0)) as usize;
            let hi_i = ((max_x * res as f64 - jitter.0).ceil()).min(res as f64 - 1.0) as usize;
            let lo_j = ((min_y * res as f64 - jitter.1).floor().max(0.0)) as usize;
            let hi_j = ((max_y * res as f64 - jitter.1).ceil()).min(res as f64 - 1.0) as usize;
            for i in lo_i..=hi_i {
                for j in lo_j..=hi_j {
                    let x = (i as f64 + jitter.0) / res as f64;
                    let y = (j as f64 + jitter.1) / res as f64;
                    // 2D barycentric point-in-triangle in the xy plane.
                    let d = (pb[1] - pc[1]) * (pa[0] - pc[0])
                        + (pc[0] - pb[0]) * (pa[1] - pc[1]);
                    if d.abs() < 1e-18 {
                        continue;
                    }
                    let wa = ((pb[1] - pc[1]) * (x - pc[0]) + (pc[0] - pb[0]) * (y - pc[1])) / d;
                    let wb = ((pc[1] - pa[1]) * (x - pc[0]) + (pa[0] - pc[0]) * (y - pc[1])) / d;
                    let wc = 1.0 - wa - wb;
                    if wa < 0.0 || wb < 0.0 || wc < 0.0 {
                        continue;
                    }
                    let z = wa * pa[2] + wb * pb[2] + wc * pc[2];
                    columns[i * res + j].push(z);
                }
            }
        }
        for col in columns.iter_mut() {
            col.sort_by(|a, b| a.partial_cmp(b).unwrap());
        }
        MeshInsideTester {
            res,
            columns,
            jitter,
        }
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let i = ((p[0] * self.res as f64 - self.jitter.0).round().max(0.0) as usize)
            .min(self.res - 1);
        let j = ((p[1] * self.res as f64 - self.jitter.1).round().max(0.0) as usize)
            .min(self.res - 1);
        let col = &self.columns[i * self.res + j];
        let below = col.partition_point(|&z| z < p[2]);
        below % 2 == 1
    }
}

// ───────────────────────── metrics ─────────────────────────

pub enum GroundTruth<'a> {
    Oracle(&'a ShapeOracle),
    Mesh(&'a Mesh),
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MetricReport {
    pub iou: f64,
    pub chamfer_l1: f64,
    pub nc: f64,
    pub fscore: f64,
    pub n_samples: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// F-score distance threshold: 1% of the unit cube.
pub const FSCORE_THRESHOLD: f64 = 0.01;
/// Uniform probes for IoU estimation.
pub const IOU_PROBES: usize = 100_000;
/// Column resolution of the mesh inside-tester.
const INSIDE_RES: usize = 256;

/// Nearest-neighbor distance and index from each query into `points`.
fn nearest(queries: &[[f64; 3]], points: &[[f64; 3]]) -> Vec<(f64, usize)> {
    crate::exec::map_range(queries.len(), queries.len().saturating_mul(points.len()), |qi| {
        let q = queries[qi];
        let mut best = (f64::INFINITY, 0usize);
        for (i, p) in points.iter().enumerate() {
            let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
            if d2 < best.0 {
                best = (d2, i);
            }
        }
        (best.0.sqrt(), best.1)
    })
}

/// Surface reconstruction metrics between a predicted mesh and ground
/// truth, computed from `n_samples` area-weighted surface samples per side
/// and 100k uniform occupancy probes. Chamfer-L1 is the symmetric mean
/// closest-point distance x100; normal consistency is the mean absolute
/// dot of matched unit normals; F-score uses the 1% threshold.
pub fn metrics(
    pred: &Mesh,
    gt: &GroundTruth,
    n_samples: usize,
    seed: u64,
) -> Result<MetricReport> {
    let root = Rng::new(seed);
    let mut warnings = Vec::new();

    let (gt_pts, gt_normals) = match gt {
        GroundTruth::Oracle(o) => o.surface_samples(n_samples, &mut root.fork(1)),
        GroundTruth::Mesh(m) => {
            if m.is_empty() {
                return Err(Error::invalid("metrics: empty ground-truth mesh"));
            }
            m.sample_surface(n_samples, &mut root.fork(1))
        }
    };

    if pred.is_empty() {
        // Worst-case bounds: nothing predicted.
        warnings.push("empty predicted mesh; chamfer/f-score are worst-case bounds".into());
        return Ok(MetricReport {
            iou: 0.0,
            chamfer_l1: 100.0 * 3.0f64.sqrt(),
            nc: 0.0,
            fscore: 0.0,
            n_samples,
            seed,
            warnings,
        });
    }

    // Same stream as the ground-truth draw: metrics of a mesh against
    // itself then compare identical sample sets and come out exact.
    let (pred_pts, pred_normals) = pred.sample_surface(n_samples, &mut root.fork(1));

    // Bidirectional closest points.
    let fwd = nearest(&pred_pts, &gt_pts);
    let bwd = nearest(&gt_pts, &pred_pts);

    let mean_fwd: f64 = fwd.iter().map(|(d, _)| d).sum::<f64>() / n_samples as f64;
    let mean_bwd: f64 = bwd.iter().map(|(d, _)| d).sum::<f64>() / n_samples as f64;
    let chamfer_l1 = 100.0 * 0.5 * (mean_fwd + mean_bwd);

    let nc_fwd: f64 = fwd
        .iter()
        .enumerate()
        .map(|(i, (_, j))| dot_abs(pred_normals[i], gt_normals[*j]))
        .sum::<f64>()
        / n_samples as f64;
    let nc_bwd: f64 = bwd
        .iter()
        .enumerate()
        .map(|(i, (_, j))| dot_abs(gt_normals[i], pred_normals[*j]))
        .sum::<f64>()
        / n_samples as f64;
    let nc = 0.5 * (nc_fwd + nc_bwd);

    let precision =
        fwd.iter().filter(|(d, _)| *d <= FSCORE_THRESHOLD).count() as f64 / n_samples as f64;
    let recall =
        bwd.iter().filter(|(d, _)| *d <= FSCORE_THRESHOLD).count() as f64 / n_samples as f64;
    let fscore = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };

    // IoU from uniform occupancy probes.
    let pred_tester = MeshInsideTester::new(pred, INSIDE_RES);
    let gt_tester = match gt {
        GroundTruth::Mesh(m) => Some(MeshInsideTester::new(m, INSIDE_RES)),
        GroundTruth::Oracle(_) => None,
    };
    let mut probe_rng = root.fork(3);
    let (mut inter, mut union) = (0usize, 0usize);
    for _ in 0..IOU_PROBES {
        let p = [
            probe_rng.next_f64(),
            probe_rng.next_f64(),
            probe_rng.next_f64(),
        ];
        let in_pred = pred_tester.contains(p);
        let in_gt = match gt {
            GroundTruth::Oracle(o) => o.occupancy(p),
            GroundTruth::Mesh(_) => gt_tester.as_ref().unwrap().contains(p),
        };
        if in_pred && in_gt {
            inter += 1;
        }
        if in_pred || in_gt {
            union += 1;
        }
    }
    let iou = if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    };

    Ok(MetricReport {
        iou,
        chamfer_l1,
        nc,
        fscore,
        n_samples,
        seed,
        warnings,
    })
}

fn dot_abs(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).abs()
}

/// Occupancy-field IoU of a model against the oracle at uniform probes in
/// the normalized cube (thresholded at 0.5).
pub fn field_iou<T: Scalar>(
    model: &Model<T>,
    pc: &PointCloud,
    oracle: &ShapeOracle,
    probes: usize,
    seed: u64,
) -> Result<f64> {
    let (t_tilde, c_tilde) = encode_to_tensors(model, pc)?;
    let mut rng = Rng::new(seed);
    let queries: Vec<[f64; 3]> = (0..probes)
        .map(|_| [rng.next_f64(), rng.next_f64(), rng.next_f64()])
        .collect();
    let chunk = 4096;
    let n_chunks = queries.len().div_ceil(chunk);
    let probs: Vec<Result<Vec<f64>>> = crate::exec::map_range(n_chunks, usize::MAX, |ci| {
        let lo = ci * chunk;
        let hi = (lo + chunk).min(queries.len());
        decode_probabilities(model, pc, &t_tilde, &c_tilde, &queries[lo..hi])
    });
    let mut inter = 0usize;
    let mut union = 0usize;
    let mut qi = 0usize;
    for chunk in probs {
        for p in chunk? {
            let in_pred = p > 0.5;
            let in_gt = oracle.occupancy(pc.transform.to_world(queries[qi]));
            if in_pred && in_gt {
                inter += 1;
            }
            if in_pred || in_gt {
                union += 1;
            }
            qi += 1;
        }
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}
