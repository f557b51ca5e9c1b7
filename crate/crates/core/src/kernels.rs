//! Raw slice-level compute kernels shared by the autodiff graph ops.
//!
//! All kernels accumulate into their output buffer (callers zero-fill fresh
//! outputs), which lets forward and backward passes share them. Parallel
//! variants assign each output row/plane to exactly one task with sequential
//! inner accumulation, so results do not depend on thread count.

use crate::exec;
use crate::Scalar;

/// C (m,n) += A (m,k) · B (k,n)
pub fn matmul<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    exec::for_each_chunk_mut(c, n, m * k * n, |i, c_row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    });
}

/// C (m,n) += A (m,k) · Bᵀ where B is (n,k)
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    exec::for_each_chunk_mut(c, n, m * k * n, |i, c_row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, cv) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::ZERO;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *cv += acc;
        }
    });
}

/// C (k,n) += Aᵀ · G where A is (m,k), G is (m,n)
pub fn matmul_tn<T: Scalar>(a: &[T], g: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    exec::for_each_chunk_mut(c, n, m * k * n, |p, c_row| {
        for i in 0..m {
            let av = a[i * k + p];
            let g_row = &g[i * n..(i + 1) * n];
            for (cv, &gv) in c_row.iter_mut().zip(g_row) {
                *cv += av * gv;
            }
        }
    });
}

/// Shape bookkeeping for batched 2D convolutions (stride 1, pad = k/2).
#[derive(Debug, Clone, Copy)]
pub struct Conv2dDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl Conv2dDims {
    pub fn pad(&self) -> usize {
        self.k / 2
    }
}

/// out (B,O,H,W) += conv2d(x (B,C,H,W), w (O,C,k,k)) + bias
pub fn conv2d<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, out: &mut [T], d: Conv2dDims) {
    let (hw, kk) = (d.h * d.w, d.k * d.k);
    let p = d.pad() as isize;
    let work = d.batch * d.c_out * hw * d.c_in * kk;
    exec::for_each_chunk_mut(out, hw, work, |bo, plane| {
        let (b, o) = (bo / d.c_out, bo % d.c_out);
        if let Some(bias) = bias {
            let bv = bias[o];
            for v in plane.iter_mut() {
                *v += bv;
            }
        }
        for c in 0..d.c_in {
            let xp = &x[(b * d.c_in + c) * hw..(b * d.c_in + c + 1) * hw];
            let wk = &w[(o * d.c_in + c) * kk..(o * d.c_in + c + 1) * kk];
            for dy in 0..d.k {
                for dx in 0..d.k {
                    let wv = wk[dy * d.k + dx];
                    let (oy, ox) = (dy as isize - p, dx as isize - p);
                    let y0 = (-oy).max(0) as usize;
                    let y1 = (d.h as isize).min(d.h as isize - oy) as usize;
                    let x0 = (-ox).max(0) as usize;
                    let x1 = (d.w as isize).min(d.w as isize - ox) as usize;
                    for y in y0..y1 {
                        let src = ((y as isize + oy) as usize) * d.w + (x0 as isize + ox) as usize;
                        let dst = y * d.w + x0;
                        let n = x1 - x0;
                        let (xs, os) = (&xp[src..src + n], &mut plane[dst..dst + n]);
                        for (ov, &xv) in os.iter_mut().zip(xs) {
                            *ov += wv * xv;
                        }
                    }
                }
            }
        }
    });
}

/// Gradients of [`conv2d`] with respect to input, weights and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    g: &[T],
    gx: &mut [T],
    gw: &mut [T],
    gb: Option<&mut [T]>,
    d: Conv2dDims,
) {
    let (hw, kk) = (d.h * d.w, d.k * d.k);
    let p = d.pad() as isize;
    let work = d.batch * d.c_in * hw * d.c_out * kk;

    // d loss / d x: correlate the upstream gradient with the flipped kernel.
    exec::for_each_chunk_mut(gx, hw, work, |bc, plane| {
        let (b, c) = (bc / d.c_in, bc % d.c_in);
        for o in 0..d.c_out {
            let gp = &g[(b * d.c_out + o) * hw..(b * d.c_out + o + 1) * hw];
            let wk = &w[(o * d.c_in + c) * kk..(o * d.c_in + c + 1) * kk];
            for dy in 0..d.k {
                for dx in 0..d.k {
                    let wv = wk[dy * d.k + dx];
                    // out[y,x] consumed x[y+dy-p, x+dx-p]; invert the offset.
                    let (oy, ox) = (p - dy as isize, p - dx as isize);
                    let y0 = (-oy).max(0) as usize;
                    let y1 = (d.h as isize).min(d.h as isize - oy) as usize;
                    let x0 = (-ox).max(0) as usize;
                    let x1 = (d.w as isize).min(d.w as isize - ox) as usize;
                    for y in y0..y1 {
                        let src = ((y as isize + oy) as usize) * d.w + (x0 as isize + ox) as usize;
                        let dst = y * d.w + x0;
                        let n = x1 - x0;
                        for (ov, &gv) in plane[dst..dst + n].iter_mut().zip(&gp[src..src + n]) {
                            *ov += wv * gv;
                        }
                    }
                }
            }
        }
    });

    // d loss / d w
    exec::for_each_chunk_mut(gw, d.c_in * kk, work, |o, gw_o| {
        for b in 0..d.batch {
            let gp = &g[(b * d.c_out + o) * hw..(b * d.c_out + o + 1) * hw];
            for c in 0..d.c_in {
                let xp = &x[(b * d.c_in + c) * hw..(b * d.c_in + c + 1) * hw];
                for dy in 0..d.k {
                    for dx in 0..d.k {
                        let (oy, ox) = (dy as isize - p, dx as isize - p);
                        let y0 = (-oy).max(0) as usize;
                        let y1 = (d.h as isize).min(d.h as isize - oy) as usize;
                        let x0 = (-ox).max(0) as usize;
                        let x1 = (d.w as isize).min(d.w as isize - ox) as usize;
                        let mut acc = T::ZERO;
                        for y in y0..y1 {
                            let src =
                                ((y as isize + oy) as usize) * d.w + (x0 as isize + ox) as usize;
                            let dst = y * d.w + x0;
                            let n = x1 - x0;
                            for (&gv, &xv) in gp[dst..dst + n].iter().zip(&xp[src..src + n]) {
                                acc += gv * xv;
                            }
                        }
                        gw_o[c * kk + dy * d.k + dx] += acc;
                    }
                }
            }
        }
    });

    if let Some(gb) = gb {
        for b in 0..d.batch {
            for o in 0..d.c_out {
                let gp = &g[(b * d.c_out + o) * hw..(b * d.c_out + o + 1) * hw];
                let mut acc = T::ZERO;
                for &gv in gp {
                    acc += gv;
                }
                gb[o] += acc;
            }
        }
    }
}

/// Shape bookkeeping for batched 3D convolutions (stride 1, pad = k/2).
#[derive(Debug, Clone, Copy)]
pub struct Conv3dDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub dep: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

/// out (B,O,D,H,W) += conv3d(x (B,C,D,H,W), w (O,C,k,k,k)) + bias
pub fn conv3d<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, out: &mut [T], d: Conv3dDims) {
    let vol = d.dep * d.h * d.w;
    let kkk = d.k * d.k * d.k;
    let p = (d.k / 2) as isize;
    let work = d.batch * d.c_out * vol * d.c_in * kkk;
    exec::for_each_chunk_mut(out, vol, work, |bo, plane| {
        let (b, o) = (bo / d.c_out, bo % d.c_out);
        if let Some(bias) = bias {
            let bv = bias[o];
            for v in plane.iter_mut() {
                *v += bv;
            }
        }
        for c in 0..d.c_in {
            let xp = &x[(b * d.c_in + c) * vol..(b * d.c_in + c + 1) * vol];
            let wk = &w[(o * d.c_in + c) * kkk..(o * d.c_in + c + 1) * kkk];
            for (zi, plane_z) in plane.chunks_mut(d.h * d.w).enumerate() {
                for dz in 0..d.k {
                    let sz = zi as isize + dz as isize - p;
                    if sz < 0 || sz >= d.dep as isize {
                        continue;
                    }
                    let xz = &xp[sz as usize * d.h * d.w..(sz as usize + 1) * d.h * d.w];
                    for dy in 0..d.k {
                        for dx in 0..d.k {
                            let wv = wk[(dz * d.k + dy) * d.k + dx];
                            let (oy, ox) = (dy as isize - p, dx as isize - p);
                            let y0 = (-oy).max(0) as usize;
                            let y1 = (d.h as isize).min(d.h as isize - oy) as usize;
                            let x0 = (-ox).max(0) as usize;
                            let x1 = (d.w as isize).min(d.w as isize - ox) as usize;
                            for y in y0..y1 {
                                let src = ((y as isize + oy) as usize) * d.w
                                    + (x0 as isize + ox) as usize;
                                let dst = y * d.w + x0;
                                let n = x1 - x0;
                                for (ov, &xv) in
                                    plane_z[dst..dst + n].iter_mut().zip(&xz[src..src + n])
                                {
                                    *ov += wv * xv;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Gradients of [`conv3d`]. Implemented via the adjoint relation: the input
/// gradient is a conv3d of the upstream gradient with the flipped kernel.
pub fn conv3d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    g: &[T],
    gx: &mut [T],
    gw: &mut [T],
    gb: Option<&mut [T]>,
    d: Conv3dDims,
) {
    let vol = d.dep * d.h * d.w;
    let kkk = d.k * d.k * d.k;

    // Flip kernel spatially and swap in/out channels, then reuse the forward.
    let mut wflip = vec![T::ZERO; w.len()];
    for o in 0..d.c_out {
        for c in 0..d.c_in {
            for dz in 0..d.k {
                for dy in 0..d.k {
                    for dx in 0..d.k {
                        let src = ((o * d.c_in + c) * kkk) + (dz * d.k + dy) * d.k + dx;
                        let dst = ((c * d.c_out + o) * kkk)
                            + ((d.k - 1 - dz) * d.k + (d.k - 1 - dy)) * d.k
                            + (d.k - 1 - dx);
                        wflip[dst] = w[src];
                    }
                }
            }
        }
    }
    let dims_gx = Conv3dDims {
        c_in: d.c_out,
        c_out: d.c_in,
        ..d
    };
    conv3d(g, &wflip, None, gx, dims_gx);

    let work = d.batch * d.c_out * vol * d.c_in * kkk;
    exec::for_each_chunk_mut(gw, d.c_in * kkk, work, |o, gw_o| {
        let p = (d.k / 2) as isize;
        for b in 0..d.batch {
            let gp = &g[(b * d.c_out + o) * vol..(b * d.c_out + o + 1) * vol];
            for c in 0..d.c_in {
                let xp = &x[(b * d.c_in + c) * vol..(b * d.c_in + c + 1) * vol];
                for dz in 0..d.k {
                    for dy in 0..d.k {
                        for dx in 0..d.k {
                            let mut acc = T::ZERO;
                            for z in 0..d.dep {
                                let sz = z as isize + dz as isize - p;
                                if sz < 0 || sz >= d.dep as isize {
                                    continue;
                                }
                                for y in 0..d.h {
                                    let sy = y as isize + dy as isize - p;
                                    if sy < 0 || sy >= d.h as isize {
                                        continue;
                                    }
                                    for xx in 0..d.w {
                                        let sx = xx as isize + dx as isize - p;
                                        if sx < 0 || sx >= d.w as isize {
                                            continue;
                                        }
                                        acc += gp[(z * d.h + y) * d.w + xx]
                                            * xp[(sz as usize * d.h + sy as usize) * d.w
                                                + sx as usize];
                                    }
                                }
                            }
                            gw_o[c * kkk + (dz * d.k + dy) * d.k + dx] += acc;
                        }
                    }
                }
            }
        }
    });

    if let Some(gb) = gb {
        for b in 0..d.batch {
            for o in 0..d.c_out {
                let gp = &g[(b * d.c_out + o) * vol..(b * d.c_out + o + 1) * vol];
                let mut acc = T::ZERO;
                for &gv in gp {
                    acc += gv;
                }
                gb[o] += acc;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_variants_agree_with_naive() {
        let mut rng = crate::Rng::new(5);
        let (m, k, n) = (7, 5, 9);
        let a: Vec<f64> = (0..m * k).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let want = naive_matmul(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        matmul(&a, &b, &mut c, m, k, n);
        assert_eq!(c, want);

        // A · Bᵀ with B stored transposed.
        let mut bt = vec![0.0; k * n];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c2 = vec![0.0; m * n];
        matmul_nt(&a, &bt, &mut c2, m, k, n);
        for (x, y) in c2.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        // Aᵀ · G with A stored transposed.
        let mut at = vec![0.0; m * k];
        for i in 0..m {
            for p in 0..k {
                at[i * k + p] = a[i * k + p];
            }
        }
        let g: Vec<f64> = (0..m * n).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let mut c3 = vec![0.0; k * n];
        matmul_tn(&at, &g, &mut c3, m, k, n);
        let mut want3 = vec![0.0; k * n];
        for p in 0..k {
            for j in 0..n {
                for i in 0..m {
                    want3[p * n + j] += a[i * k + p] * g[i * n + j];
                }
            }
        }
        for (x, y) in c3.iter().zip(&want3) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    // Direct hand-loop convolution oracle, independent of the kernel's
    // blocked loop structure.
    fn naive_conv2d(x: &[f64], w: &[f64], d: Conv2dDims) -> Vec<f64> {
        let mut out = vec![0.0; d.batch * d.c_out * d.h * d.w];
        let p = d.pad() as isize;
        for b in 0..d.batch {
            for o in 0..d.c_out {
                for y in 0..d.h as isize {
                    for xx in 0..d.w as isize {
                        let mut acc = 0.0;
                        for c in 0..d.c_in {
                            for dy in 0..d.k as isize {
                                for dx in 0..d.k as isize {
                                    let (sy, sx) = (y + dy - p, xx + dx - p);
                                    if sy < 0
                                        || sy >= d.h as isize
                                        || sx < 0
                                        || sx >= d.w as isize
                                    {
                                        continue;
                                    }
                                    acc += x[((b * d.c_in + c) * d.h + sy as usize) * d.w
                                        + sx as usize]
                                        * w[((o * d.c_in + c) * d.k + dy as usize) * d.k
                                            + dx as usize];
                                }
                            }
                        }
                        out[((b * d.c_out + o) * d.h + y as usize) * d.w + xx as usize] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_one_hot_box() {
        // All-ones 3x3 kernel on a one-hot 5x5 input: a 3x3 box of ones
        // centered at the hot pixel.
        let d = Conv2dDims {
            batch: 1,
            c_in: 1,
            c_out: 1,
            h: 5,
            w: 5,
            k: 3,
        };
        let mut x = vec![0.0f64; 25];
        x[2 * 5 + 2] = 1.0;
        let w = vec![1.0f64; 9];
        let mut out = vec![0.0; 25];
        conv2d(&x, &w, None, &mut out, d);
        for y in 0..5 {
            for xx in 0..5 {
                let inside = (1..=3).contains(&y) && (1..=3).contains(&xx);
                assert_eq!(out[y * 5 + xx], if inside { 1.0 } else { 0.0 });
            }
        }
        assert_eq!(out, naive_conv2d(&x, &w, d));
    }

    #[test]
    fn conv2d_matches_naive_random() {
        let mut rng = crate::Rng::new(17);
        for k in [1usize, 3] {
            let d = Conv2dDims {
                batch: 2,
                c_in: 3,
                c_out: 4,
                h: 6,
                w: 5,
                k,
            };
            let x: Vec<f64> = (0..d.batch * d.c_in * d.h * d.w)
                .map(|_| rng.uniform(-1.0, 1.0))
                .collect();
            let w: Vec<f64> = (0..d.c_out * d.c_in * k * k)
                .map(|_| rng.uniform(-1.0, 1.0))
                .collect();
            let mut out = vec![0.0; d.batch * d.c_out * d.h * d.w];
            conv2d(&x, &w, None, &mut out, d);
            let want = naive_conv2d(&x, &w, d);
            for (a, b) in out.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv3d_center_tap_is_identity() {
        let d = Conv3dDims {
            batch: 1,
            c_in: 1,
            c_out: 1,
            dep: 4,
            h: 4,
            w: 4,
            k: 3,
        };
        let mut rng = crate::Rng::new(2);
        let x: Vec<f64> = (0..64).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let mut w = vec![0.0f64; 27];
        w[13] = 1.0; // center of the 3x3x3 kernel
        let mut out = vec![0.0; 64];
        conv3d(&x, &w, None, &mut out, d);
        for (a, b) in out.iter().zip(&x) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
