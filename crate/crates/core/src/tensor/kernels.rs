//! Raw slice kernels behind the graph ops.
//!
//! Layout is always `[batch, length, channels]` row-major. Strided
//! convolutions use "same" zero padding: an input of length `L` and stride
//! `s` produces exactly `L / s` outputs, with the total padding split so the
//! left side gets the smaller half.

use super::Scalar;

/// Geometry shared by a strided convolution and its transpose.
///
/// `long` is the length of the high-resolution side (conv input, transposed
/// conv output), `short = long / stride` the low-resolution side.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub long: usize,
    pub short: usize,
    pub stride: usize,
    pub kernel: usize,
    pub pad_left: usize,
}

impl ConvGeom {
    pub fn new(batch: usize, long: usize, stride: usize, kernel: usize) -> Option<Self> {
        if stride == 0 || kernel == 0 || long % stride != 0 {
            return None;
        }
        let short = long / stride;
        let total = ((short - 1) * stride + kernel).saturating_sub(long);
        Some(Self {
            batch,
            long,
            short,
            stride,
            kernel,
            pad_left: total / 2,
        })
    }
}

/// Clipped signal span covered by patch `o`: `(first tap, first position, count)`.
#[inline]
fn span(g: &ConvGeom, o: usize) -> (usize, usize, usize) {
    let start = (o * g.stride) as isize - g.pad_left as isize;
    let j0 = (-start).max(0) as usize;
    let t0 = start.max(0) as usize;
    let end = (start + g.kernel as isize).min(g.long as isize) as usize;
    (j0, t0, end.saturating_sub(t0))
}

/// Patch rows handled per chunk so the patch buffer stays cache resident.
fn chunk_rows(width: usize) -> usize {
    ((1 << 16) / width.max(1)).max(256)
}

/// Gathers patch rows `rows` (global index `b·short + o`) of
/// `[batch, long, channels]` into `cols`, one `kernel·channels` row each.
fn im2col_rows<T: Scalar>(x: &[T], g: &ConvGeom, channels: usize, rows: std::ops::Range<usize>, cols: &mut [T]) {
    let width = g.kernel * channels;
    cols.fill(T::zero());
    for (r, row) in rows.zip(cols.chunks_exact_mut(width)) {
        let (b, o) = (r / g.short, r % g.short);
        let xb = &x[b * g.long * channels..(b + 1) * g.long * channels];
        let (j0, t0, n) = span(g, o);
        row[j0 * channels..(j0 + n) * channels].copy_from_slice(&xb[t0 * channels..(t0 + n) * channels]);
    }
}

/// Adjoint of [`im2col_rows`]: scatter-adds patch rows into `out`.
fn col2im_rows<T: Scalar>(cols: &[T], g: &ConvGeom, channels: usize, rows: std::ops::Range<usize>, out: &mut [T]) {
    let width = g.kernel * channels;
    for (r, row) in rows.zip(cols.chunks_exact(width)) {
        let (b, o) = (r / g.short, r % g.short);
        let ob = &mut out[b * g.long * channels..(b + 1) * g.long * channels];
        let (j0, t0, n) = span(g, o);
        let dst = &mut ob[t0 * channels..(t0 + n) * channels];
        for (d, &s) in dst.iter_mut().zip(&row[j0 * channels..(j0 + n) * channels]) {
            *d += s;
        }
    }
}

/// Gathers `[batch·short, kernel·channels]` patches from `[batch, long, channels]`.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, channels: usize, cols: &mut Vec<T>) {
    cols.clear();
    cols.resize(g.batch * g.short * g.kernel * channels, T::zero());
    im2col_rows(x, g, channels, 0..g.batch * g.short, cols);
}

/// Adjoint of [`im2col`]: scatter-adds patches back into `[batch, long, channels]`.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, channels: usize, out: &mut [T]) {
    col2im_rows(cols, g, channels, 0..g.batch * g.short, out);
}

/// Runs `f(rows, patch_buffer)` over consecutive row chunks.
fn for_chunks<T: Scalar>(g: &ConvGeom, width: usize, mut f: impl FnMut(std::ops::Range<usize>, &mut [T])) {
    let m = g.batch * g.short;
    let step = chunk_rows(width);
    let mut buf = vec![T::zero(); step.min(m) * width];
    let mut r0 = 0;
    while r0 < m {
        let r1 = (r0 + step).min(m);
        f(r0..r1, &mut buf[..(r1 - r0) * width]);
        r0 = r1;
    }
}

/// Strided cross-correlation. `kernel` is `[k, cin, cout]`.
pub fn conv1d_forward<T: Scalar>(x: &[T], kernel: &[T], g: &ConvGeom, cin: usize, cout: usize) -> Vec<T> {
    let width = g.kernel * cin;
    let mut out = vec![T::zero(); g.batch * g.short * cout];
    for_chunks(g, width, |rows, cols| {
        im2col_rows(x, g, cin, rows.clone(), cols);
        let dst = &mut out[rows.start * cout..rows.end * cout];
        T::gemm(rows.len(), width, cout, cols, false, kernel, false, dst, false);
    });
    out
}

/// Gradients of [`conv1d_forward`]; either output may be skipped.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_backward<T: Scalar>(
    x: &[T],
    kernel: &[T],
    dout: &[T],
    g: &ConvGeom,
    cin: usize,
    cout: usize,
    mut dx: Option<&mut [T]>,
    mut dk: Option<&mut [T]>,
) {
    let width = g.kernel * cin;
    for_chunks(g, width, |rows, cols| {
        let d = &dout[rows.start * cout..rows.end * cout];
        if let Some(dk) = dk.as_deref_mut() {
            im2col_rows(x, g, cin, rows.clone(), cols);
            T::gemm(width, rows.len(), cout, cols, true, d, false, dk, true);
        }
        if let Some(dx) = dx.as_deref_mut() {
            T::gemm(rows.len(), cout, width, d, false, kernel, true, cols, false);
            col2im_rows(cols, g, cin, rows, dx);
        }
    });
}

/// Transposed strided convolution (exact adjoint of [`conv1d_forward`] with
/// the same kernel buffer). `kernel` is `[k, cout, cin]`, input is
/// `[batch, short, cin]`, output `[batch, long, cout]`.
pub fn conv_transpose1d_forward<T: Scalar>(
    y: &[T],
    kernel: &[T],
    g: &ConvGeom,
    cin: usize,
    cout: usize,
) -> Vec<T> {
    let width = g.kernel * cout;
    let mut out = vec![T::zero(); g.batch * g.long * cout];
    for_chunks(g, width, |rows, cols| {
        let src = &y[rows.start * cin..rows.end * cin];
        T::gemm(rows.len(), cin, width, src, false, kernel, true, cols, false);
        col2im_rows(cols, g, cout, rows, &mut out);
    });
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose1d_backward<T: Scalar>(
    y: &[T],
    kernel: &[T],
    dout: &[T],
    g: &ConvGeom,
    cin: usize,
    cout: usize,
    mut dy: Option<&mut [T]>,
    mut dk: Option<&mut [T]>,
) {
    let width = g.kernel * cout;
    for_chunks(g, width, |rows, dcols| {
        im2col_rows(dout, g, cout, rows.clone(), dcols);
        if let Some(dy) = dy.as_deref_mut() {
            let dst = &mut dy[rows.start * cin..rows.end * cin];
            T::gemm(rows.len(), width, cin, dcols, false, kernel, false, dst, true);
        }
        if let Some(dk) = dk.as_deref_mut() {
            let src = &y[rows.start * cin..rows.end * cin];
            T::gemm(width, rows.len(), cin, dcols, true, src, false, dk, true);
        }
    });
}

/// Reflects an index into `[0, len)` without repeating the edge sample.
pub fn reflect(i: isize, len: usize) -> usize {
    let n = len as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut r = i.rem_euclid(period);
    if r >= n {
        r = period - r;
    }
    r as usize
}

/// Per-sample source positions for a phase shuffle of `shifts`.
pub fn phase_shuffle_index(shifts: &[isize], len: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(shifts.len() * len);
    for &s in shifts {
        for t in 0..len {
            idx.push(reflect(t as isize + s, len));
        }
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_lengths() {
        let g = ConvGeom::new(1, 8192, 4, 25).unwrap();
        assert_eq!(g.short, 2048);
        assert_eq!(g.pad_left, 10);
        let g = ConvGeom::new(1, 4, 2, 1).unwrap();
        assert_eq!((g.short, g.pad_left), (2, 0));
        assert!(ConvGeom::new(1, 10, 4, 3).is_none());
    }

    #[test]
    fn stride_two_pick_with_scale() {
        let g = ConvGeom::new(1, 4, 2, 1).unwrap();
        let out = conv1d_forward(&[1.0f64, 2.0, 3.0, 4.0], &[2.0], &g, 1, 1);
        assert_eq!(out, vec![2.0, 6.0]);
    }

    #[test]
    fn reflection_rule() {
        assert_eq!(reflect(4, 4), 2);
        assert_eq!(reflect(-1, 4), 1);
        assert_eq!(reflect(-2, 4), 2);
        assert_eq!(reflect(5, 4), 1);
        let idx = phase_shuffle_index(&[1], 4);
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
        assert_eq!(y, vec![2.0, 3.0, 4.0, 3.0]);
    }
}
