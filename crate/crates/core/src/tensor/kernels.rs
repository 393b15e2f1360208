//! Slice-level numeric kernels.
//!
//! Accumulation order is fixed: dot products keep eight partial sums that
//! are folded left to right, everything else walks memory in row-major order.

use crate::scalar::Scalar;

const LANES: usize = 8;

#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [S::zero(); LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let xa = &a[c * LANES..(c + 1) * LANES];
        let xb = &b[c * LANES..(c + 1) * LANES];
        for l in 0..LANES {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = S::zero();
    for i in chunks * LANES..a.len() {
        tail += a[i] * b[i];
    }
    let mut s = S::zero();
    for v in acc {
        s += v;
    }
    s + tail
}

#[inline]
pub fn sum<S: Scalar>(a: &[S]) -> S {
    let mut acc = [S::zero(); LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        for l in 0..LANES {
            acc[l] += a[c * LANES + l];
        }
    }
    let mut tail = S::zero();
    for &x in &a[chunks * LANES..] {
        tail += x;
    }
    let mut s = S::zero();
    for v in acc {
        s += v;
    }
    s + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy<S: Scalar>(alpha: S, x: &[S], y: &mut [S]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[m,n] += a[m,k] · b[k,n]`
pub fn gemm_nn<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            axpy(av, &b[p * n..(p + 1) * n], row);
        }
    }
}

/// `out[m,n] += a[m,k] · b[n,k]ᵀ`
pub fn gemm_nt<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[m,n] += a[k,m]ᵀ · b[k,n]`
pub fn gemm_tn<S: Scalar>(a: &[S], b: &[S], out: &mut [S], k: usize, m: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            axpy(a[p * m + i], brow, &mut out[i * n..(i + 1) * n]);
        }
    }
}

pub fn transpose<S: Scalar>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Geometry of a non-overlapping 3D patch grid over a `[C, T, H, W]` volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub ts: usize,
    pub ss: usize,
}

impl PatchGrid {
    pub fn grid(&self) -> (usize, usize, usize) {
        (self.frames / self.ts, self.height / self.ss, self.width / self.ss)
    }

    pub fn patches(&self) -> usize {
        let (t, h, w) = self.grid();
        t * h * w
    }

    /// Elements per patch, `C·ts·ss·ss`.
    pub fn patch_len(&self) -> usize {
        self.channels * self.ts * self.ss * self.ss
    }

    pub fn divides(&self) -> bool {
        self.ts > 0
            && self.ss > 0
            && self.frames % self.ts == 0
            && self.height % self.ss == 0
            && self.width % self.ss == 0
            && self.frames >= self.ts
            && self.height >= self.ss
            && self.width >= self.ss
    }

    /// Flat volume index of element `j` of patch `p`.
    ///
    /// Patches are ordered time-major, then rows, then columns; inside a patch
    /// the order is channel, frame offset, row offset, column offset.
    #[inline]
    pub fn volume_index(&self, p: usize, j: usize) -> usize {
        let (_, gh, gw) = self.grid();
        let (pt, rem) = (p / (gh * gw), p % (gh * gw));
        let (ph, pw) = (rem / gw, rem % gw);
        let per_c = self.ts * self.ss * self.ss;
        let c = j / per_c;
        let r = j % per_c;
        let dt = r / (self.ss * self.ss);
        let dy = (r / self.ss) % self.ss;
        let dx = r % self.ss;
        let t = pt * self.ts + dt;
        let y = ph * self.ss + dy;
        let x = pw * self.ss + dx;
        ((c * self.frames + t) * self.height + y) * self.width + x
    }

    /// For every patch-matrix element (row-major `[P, patch_len]`), the volume index it reads.
    pub fn index_map(&self) -> Vec<usize> {
        let k = self.patch_len();
        (0..self.patches() * k)
            .map(|i| self.volume_index(i / k, i % k))
            .collect()
    }
}

/// Gathers a `[C, T, H, W]` volume into a `[P, C·ts·ss·ss]` patch matrix.
pub fn im2col<S: Scalar>(x: &[S], g: &PatchGrid) -> Vec<S> {
    let k = g.patch_len();
    let mut out = Vec::with_capacity(g.patches() * k);
    for p in 0..g.patches() {
        for j in 0..k {
            out.push(x[g.volume_index(p, j)]);
        }
    }
    out
}

/// Scatter-adds a patch matrix back into a zeroed `[C, T, H, W]` volume.
pub fn col2im<S: Scalar>(cols: &[S], g: &PatchGrid) -> Vec<S> {
    let k = g.patch_len();
    let mut out = vec![S::zero(); g.channels * g.frames * g.height * g.width];
    for p in 0..g.patches() {
        for j in 0..k {
            out[g.volume_index(p, j)] += cols[p * k + j];
        }
    }
    out
}
