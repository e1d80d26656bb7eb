//! Same-padded 3x3x3 convolution kernels over `[T, H, W, C]` buffers.
//!
//! The input is zero-padded once and read through strided matrix views, so
//! no patch matrix is ever built. The input gradient is the forward
//! convolution of the output gradient with the adjoint kernel.

use alloc::vec;
use alloc::vec::Vec;

pub const K: usize = 3;
pub const TAPS: usize = K * K * K;

/// `c[m,n] = beta*c + a[m,k] * b[k,n]` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Copy `x` into a zero border of one voxel on each side:
/// `[T+2, H+2, W+2, C]`.
fn pad(x: &[f64], dims: [usize; 4]) -> Vec<f64> {
    let [t, h, w, c] = dims;
    let (hp, wp) = (h + 2, w + 2);
    let mut out = vec![0.0; (t + 2) * hp * wp * c];
    for tt in 0..t {
        for y in 0..h {
            let src = (tt * h + y) * w * c;
            let dst = (((tt + 1) * hp + y + 1) * wp + 1) * c;
            out[dst..dst + w * c].copy_from_slice(&x[src..src + w * c]);
        }
    }
    out
}

/// Number of padded-grid output positions that reach the last real voxel.
fn grid_len(dims: [usize; 4]) -> usize {
    let [t, h, w, _] = dims;
    ((t - 1) * (h + 2) + h - 1) * (w + 2) + w
}

/// Convolution evaluated on the padded grid: position `p = (t*(H+2) + y)*(W+2) + x`
/// holds output `(t, y, x)` when `y < H` and `x < W`, and junk otherwise.
/// For a fixed `(kt, ky)` the three `kx` taps of every position form a
/// row of a matrix with row stride `C` over the padded buffer, so the
/// whole convolution is nine matrix products.
fn conv_grid(xp: &[f64], dims: [usize; 4], w: &[f64], cout: usize) -> Vec<f64> {
    let [_, h, wd, c] = dims;
    let m = grid_len(dims);
    let plane = (h + 2) * (wd + 2) * c;
    let mut out = vec![0.0; m * cout];
    for kt in 0..K {
        for ky in 0..K {
            let base = kt * plane + ky * (wd + 2) * c;
            let wb = (kt * K + ky) * K * c * cout;
            gemm(m, K * c, cout, &xp[base..], c, 1, &w[wb..], cout, 1, 1.0, &mut out, cout, 1);
        }
    }
    out
}

fn gather_grid(grid: &[f64], dims: [usize; 4], cout: usize, bias: Option<&[f64]>) -> Vec<f64> {
    let [t, h, w, _] = dims;
    let mut out = vec![0.0; t * h * w * cout];
    for tt in 0..t {
        for y in 0..h {
            let src = (tt * (h + 2) + y) * (w + 2) * cout;
            let dst = (tt * h + y) * w * cout;
            out[dst..dst + w * cout].copy_from_slice(&grid[src..src + w * cout]);
        }
    }
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(cout) {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
    }
    out
}

pub fn conv3d_forward(x: &[f64], dims: [usize; 4], w: &[f64], b: &[f64], cout: usize) -> Vec<f64> {
    let grid = conv_grid(&pad(x, dims), dims, w, cout);
    gather_grid(&grid, dims, cout, Some(b))
}

/// Kernel of the adjoint convolution: taps reversed, channels swapped.
fn adjoint_kernel(w: &[f64], cin: usize, cout: usize) -> Vec<f64> {
    let mut out = vec![0.0; w.len()];
    for tap in 0..TAPS {
        let src = (TAPS - 1 - tap) * cin * cout;
        let dst = tap * cout * cin;
        for i in 0..cin {
            for o in 0..cout {
                out[dst + o * cin + i] = w[src + i * cout + o];
            }
        }
    }
    out
}

/// Accumulate gradients for a convolution given the output gradient `g`.
/// `dx` is skipped when `None`.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_backward(
    x: &[f64],
    dims: [usize; 4],
    w: &[f64],
    cout: usize,
    g: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let [t, h, wd, c] = dims;
    if let Some(db) = db {
        for row in g.chunks_exact(cout) {
            for (d, v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
    }
    if let Some(dw) = dw {
        // Output gradient laid out on the padded grid, zero at junk slots.
        let m = grid_len(dims);
        let mut gg = vec![0.0; m * cout];
        for tt in 0..t {
            for y in 0..h {
                let dst = (tt * (h + 2) + y) * (wd + 2) * cout;
                let src = (tt * h + y) * wd * cout;
                gg[dst..dst + wd * cout].copy_from_slice(&g[src..src + wd * cout]);
            }
        }
        let xp = pad(x, dims);
        let plane = (h + 2) * (wd + 2) * c;
        for kt in 0..K {
            for ky in 0..K {
                let base = kt * plane + ky * (wd + 2) * c;
                let wb = (kt * K + ky) * K * c * cout;
                gemm(K * c, m, cout, &xp[base..], 1, c, &gg, cout, 1, 1.0, &mut dw[wb..], cout, 1);
            }
        }
    }
    if let Some(dx) = dx {
        let gdims = [t, h, wd, cout];
        let grid = conv_grid(&pad(g, gdims), gdims, &adjoint_kernel(w, c, cout), c);
        let d = gather_grid(&grid, gdims, c, None);
        for (a, b) in dx.iter_mut().zip(&d) {
            *a += b;
        }
    }
}

#[cfg(test)]
pub(crate) fn conv3d_direct(x: &[f64], dims: [usize; 4], w: &[f64], b: &[f64], cout: usize) -> Vec<f64> {
    let [t, h, wd, c] = dims;
    let mut out = vec![0.0; t * h * wd * cout];
    for tt in 0..t {
        for y in 0..h {
            for xx in 0..wd {
                for o in 0..cout {
                    let mut acc = b[o];
                    for kt in 0..3 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let st = tt as isize + kt as isize - 1;
                                let sy = y as isize + ky as isize - 1;
                                let sx = xx as isize + kx as isize - 1;
                                if st < 0 || sy < 0 || sx < 0 || st >= t as isize || sy >= h as isize || sx >= wd as isize {
                                    continue;
                                }
                                for ci in 0..c {
                                    let xi = (((st as usize * h + sy as usize) * wd) + sx as usize) * c + ci;
                                    let wi = ((((kt * 3 + ky) * 3 + kx) * c) + ci) * cout + o;
                                    acc += x[xi] * w[wi];
                                }
                            }
                        }
                    }
                    out[((tt * h + y) * wd + xx) * cout + o] = acc;
                }
            }
        }
    }
    out
}
