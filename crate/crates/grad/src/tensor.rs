//! Dense row-major `f32` tensors and the kernels behind every graph op.

use std::fmt;
use std::sync::Arc;

use crate::par;

/// Sentinel index used by [`Tensor::gather`]: the output element is zero.
pub const PAD_INDEX: u32 = u32::MAX;

/// An immutable, cheaply clonable dense tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f32> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = acc;
        acc *= shape[d];
    }
    strides
}

/// Numpy-style broadcast of two shapes, or `None` when incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(
            numel(&shape),
            data.len(),
            "tensor shape {shape:?} does not match {} elements",
            data.len()
        );
        Self { shape, data: Arc::new(data) }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Self::new(shape.to_vec(), vec![value; numel(shape)])
    }

    pub fn scalar(value: f32) -> Self {
        Self::new(Vec::new(), vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.data.as_ref().clone()
    }

    /// Consume into the backing buffer, copying only when shared.
    pub fn into_vec(self) -> Vec<f32> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| shared.as_ref().clone())
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            numel(shape),
            self.numel(),
            "cannot reshape {:?} into {shape:?}",
            self.shape
        );
        Tensor { shape: shape.to_vec(), data: Arc::clone(&self.data) }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32 + Send + Sync) -> Tensor {
        Tensor::new(self.shape.clone(), par::map(&self.data, f))
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32 + Send + Sync) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip: shape mismatch");
        Tensor::new(self.shape.clone(), par::zip(&self.data, &other.data, f))
    }

    pub fn sum(&self) -> f32 {
        self.data.iter().sum()
    }

    /// Sum accumulated in `f64`.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn sq_norm_f64(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Expand to `shape` following numpy broadcasting rules.
    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor {
        if self.shape == shape {
            return self.clone();
        }
        let rank = shape.len();
        assert!(self.rank() <= rank, "broadcast_to: rank {:?} -> {shape:?}", self.shape);
        let own = contiguous_strides(&self.shape);
        let offset = rank - self.rank();
        let mut strides = vec![0; rank];
        for d in 0..self.rank() {
            let src = self.shape[d];
            let dst = shape[d + offset];
            assert!(
                src == dst || src == 1,
                "cannot broadcast {:?} to {shape:?}",
                self.shape
            );
            strides[d + offset] = if src == 1 && dst != 1 { 0 } else { own[d] };
        }
        Tensor::new(shape.to_vec(), strided_copy(&self.data, shape, &strides))
    }

    /// Sum over broadcast dimensions so the result has `shape`.
    pub fn sum_to(&self, shape: &[usize]) -> Tensor {
        if self.shape == shape {
            return self.clone();
        }
        Tensor::new(shape.to_vec(), reduce_to(&self.data, &self.shape, shape))
    }

    pub fn permute(&self, axes: &[usize]) -> Tensor {
        assert_eq!(axes.len(), self.rank(), "permute: axes {axes:?} vs {:?}", self.shape);
        let own = contiguous_strides(&self.shape);
        let shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let strides: Vec<usize> = axes.iter().map(|&a| own[a]).collect();
        Tensor::new(shape.clone(), strided_copy(&self.data, &shape, &strides))
    }

    /// Swap the last two axes.
    pub fn transpose_last(&self) -> Tensor {
        let r = self.rank();
        assert!(r >= 2, "transpose_last on rank {r}");
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(&axes)
    }

    /// `out[i] = self[index[i]]`, or zero where the index is [`PAD_INDEX`].
    pub fn gather(&self, index: &[u32], shape: &[usize]) -> Tensor {
        assert_eq!(index.len(), numel(shape), "gather: index length vs shape {shape:?}");
        let src = &self.data;
        let mut out = vec![0.0f32; index.len()];
        let chunk = 4096;
        par::for_each_chunk_mut(&mut out, chunk, index.len(), |ci, o| {
            let base = ci * chunk;
            for (j, v) in o.iter_mut().enumerate() {
                let ix = index[base + j];
                if ix != PAD_INDEX {
                    *v = src[ix as usize];
                }
            }
        });
        Tensor::new(shape.to_vec(), out)
    }

    /// Adjoint of [`Tensor::gather`]: accumulate `self[i]` into `out[index[i]]`.
    pub fn scatter_add(&self, index: &[u32], shape: &[usize]) -> Tensor {
        assert_eq!(index.len(), self.numel(), "scatter_add: index length mismatch");
        let mut out = vec![0.0f32; numel(shape)];
        for (&ix, &v) in index.iter().zip(self.data.iter()) {
            if ix != PAD_INDEX {
                out[ix as usize] += v;
            }
        }
        Tensor::new(shape.to_vec(), out)
    }

    /// Batched matrix product over matching leading dimensions.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (ra, rb) = (self.rank(), other.rank());
        assert!(ra >= 2 && ra == rb, "matmul: ranks {:?} x {:?}", self.shape, other.shape);
        let batch_a = &self.shape[..ra - 2];
        let batch_b = &other.shape[..rb - 2];
        assert_eq!(batch_a, batch_b, "matmul: batch dims {:?} x {:?}", self.shape, other.shape);
        let (m, k) = (self.shape[ra - 2], self.shape[ra - 1]);
        let (k2, n) = (other.shape[rb - 2], other.shape[rb - 1]);
        assert_eq!(k, k2, "matmul: inner dims {:?} x {:?}", self.shape, other.shape);
        let batch = numel(batch_a);
        let out = matmul_kernel(&self.data, &other.data, batch, m, k, n);
        let mut shape = batch_a.to_vec();
        shape.push(m);
        shape.push(n);
        Tensor::new(shape, out)
    }

    /// Maximum along the last axis, keeping it with size one.
    pub fn max_last(&self) -> Tensor {
        let d = *self.shape.last().expect("max_last on scalar");
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = 1;
        let out: Vec<f32> = self
            .data
            .chunks(d)
            .map(|row| row.iter().copied().fold(f32::NEG_INFINITY, f32::max))
            .collect();
        Tensor::new(shape, out)
    }

    /// Index of the maximum along the last axis, one per row.
    pub fn argmax_last(&self) -> Vec<usize> {
        let d = *self.shape.last().expect("argmax_last on scalar");
        self.data
            .chunks(d)
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}

/// Merge adjacent dims that `strides` walks contiguously and drop unit
/// dims. Row-major iteration order over the result is unchanged.
fn coalesce(shape: &[usize], strides: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut sh: Vec<usize> = Vec::with_capacity(shape.len());
    let mut st: Vec<usize> = Vec::with_capacity(shape.len());
    for (&n, &s) in shape.iter().zip(strides) {
        if n == 1 {
            continue;
        }
        match (sh.last_mut(), st.last()) {
            (Some(pn), Some(&ps)) if ps == s * n => {
                *pn *= n;
                *st.last_mut().unwrap() = s;
            }
            _ => {
                sh.push(n);
                st.push(s);
            }
        }
    }
    if sh.is_empty() {
        sh.push(1);
        st.push(0);
    }
    (sh, st)
}

/// Copy `src` viewed through `strides` into a contiguous buffer of `shape`.
pub(crate) fn strided_copy(src: &[f32], shape: &[usize], strides: &[usize]) -> Vec<f32> {
    let total = numel(shape);
    if total == 0 {
        return Vec::new();
    }
    let (shape, strides) = coalesce(shape, strides);
    let rank = shape.len();
    let inner = shape[rank - 1];
    let inner_stride = strides[rank - 1];
    if rank == 1 && inner_stride == 1 {
        return src[..total].to_vec();
    }
    let outer_shape = &shape[..rank - 1];
    let outer_strides = &strides[..rank - 1];
    let row_offset = |row: usize| -> usize {
        let mut rem = row;
        let mut off = 0;
        for d in (0..outer_shape.len()).rev() {
            let i = rem % outer_shape[d];
            rem /= outer_shape[d];
            off += i * outer_strides[d];
        }
        off
    };
    if !par::active() || total < par::PAR_THRESHOLD {
        let mut out = Vec::with_capacity(total);
        let mut idx = vec![0usize; rank - 1];
        let mut base = 0usize;
        for _ in 0..total / inner {
            match inner_stride {
                0 => out.extend(std::iter::repeat_n(src[base], inner)),
                1 => out.extend_from_slice(&src[base..base + inner]),
                _ => out.extend((0..inner).map(|j| src[base + j * inner_stride])),
            }
            let mut d = rank - 1;
            while d > 0 {
                d -= 1;
                idx[d] += 1;
                base += outer_strides[d];
                if idx[d] < outer_shape[d] {
                    break;
                }
                base -= outer_strides[d] * idx[d];
                idx[d] = 0;
            }
        }
        return out;
    }
    let mut out = vec![0.0f32; total];
    let rows_per_chunk = (4096 / inner).max(1);
    par::for_each_chunk_mut(&mut out, rows_per_chunk * inner, total, |ci, o| {
        let first_row = ci * rows_per_chunk;
        for (r, dst) in o.chunks_mut(inner).enumerate() {
            let base = row_offset(first_row + r);
            match inner_stride {
                0 => dst.fill(src[base]),
                1 => dst.copy_from_slice(&src[base..base + inner]),
                _ => {
                    for (j, v) in dst.iter_mut().enumerate() {
                        *v = src[base + j * inner_stride];
                    }
                }
            }
        }
    });
    out
}

/// Sum `src` of `in_shape` down to `out_shape` (right-aligned broadcast dims).
pub(crate) fn reduce_to(src: &[f32], in_shape: &[usize], out_shape: &[usize]) -> Vec<f32> {
    let rank = in_shape.len();
    assert!(out_shape.len() <= rank, "sum_to: {in_shape:?} -> {out_shape:?}");
    let offset = rank - out_shape.len();
    let own = contiguous_strides(out_shape);
    let mut strides = vec![0usize; rank];
    for d in 0..out_shape.len() {
        let (src_d, dst_d) = (in_shape[d + offset], out_shape[d]);
        assert!(
            src_d == dst_d || dst_d == 1,
            "cannot sum {in_shape:?} to {out_shape:?}"
        );
        strides[d + offset] = if dst_d == 1 && src_d != 1 { 0 } else { own[d] };
    }
    let mut out = vec![0.0f32; numel(out_shape)];
    if src.is_empty() {
        return out;
    }
    if rank == 0 {
        out[0] = src[0];
        return out;
    }
    let (in_shape, strides) = coalesce(in_shape, &strides);
    let rank = in_shape.len();
    let inner = in_shape[rank - 1];
    let inner_stride = strides[rank - 1];
    let mut idx = vec![0usize; rank - 1];
    let mut base = 0usize;
    for row in src.chunks(inner) {
        if inner_stride == 0 {
            let s: f32 = row.iter().sum();
            out[base] += s;
        } else {
            for (j, &v) in row.iter().enumerate() {
                out[base + j * inner_stride] += v;
            }
        }
        // advance the odometer over the outer dims
        let mut d = rank - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            base += strides[d];
            if idx[d] < in_shape[d] {
                break;
            }
            base -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    out
}

fn sgemm_block(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements in row-major
    // layout, which is what the strides below describe.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn matmul_kernel(
    a: &[f32],
    b: &[f32],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<f32> {
    let mut out = vec![0.0f32; batch * m * n];
    let work = batch * m * n * k.max(1);
    if batch > 1 {
        par::for_each_chunk_mut(&mut out, m * n, work, |bi, c| {
            sgemm_block(
                &a[bi * m * k..(bi + 1) * m * k],
                &b[bi * k * n..(bi + 1) * k * n],
                c,
                m,
                k,
                n,
            );
        });
    } else {
        // split rows so large single products also spread across workers
        let rows = if par::active() && work >= par::PAR_THRESHOLD { 64 } else { m.max(1) };
        par::for_each_chunk_mut(&mut out, rows * n, work, |ci, c| {
            let r0 = ci * rows;
            let mr = c.len() / n.max(1);
            sgemm_block(&a[r0 * k..(r0 + mr) * k], b, c, mr, k, n);
        });
    }
    out
}
