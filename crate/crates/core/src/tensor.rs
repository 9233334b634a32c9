//! Dense float64 tensors, image resampling and the fixed upsampling operator
//! used by the distillation loss.
//!
//! Images are stored row-major as `[H, W, C]` (channels last). Every
//! resampling method is expressed as a sparse linear map from source pixels
//! to destination pixels; [`resize`] and [`UpsampleOp`] share that
//! construction, so bilinear resizing and operator application agree bit for
//! bit.
//!
//! Pixel convention: half-pixel centers (`align_corners = false`). Source
//! coordinate of destination index `d` is `(d + 0.5) * src / dst - 0.5`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_mismatch, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(invalid(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_mismatch(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(shape_mismatch(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// `self += other * scale`, elementwise.
    pub fn add_scaled(&mut self, other: &Tensor, scale: f64) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_mismatch(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b * scale;
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Extents of an `[H, W, C]` image.
    pub fn hwc(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(shape_mismatch(format!(
                "expected [H, W, C] image, got {:?}",
                self.shape
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interp {
    Nearest,
    Bilinear,
    Bicubic,
    Area,
}

impl Interp {
    pub fn name(self) -> &'static str {
        match self {
            Interp::Nearest => "nearest",
            Interp::Bilinear => "bilinear",
            Interp::Bicubic => "bicubic",
            Interp::Area => "area",
        }
    }
}

impl std::str::FromStr for Interp {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(Interp::Nearest),
            "bilinear" => Ok(Interp::Bilinear),
            "bicubic" => Ok(Interp::Bicubic),
            "area" => Ok(Interp::Area),
            other => Err(invalid(format!("unknown interpolation method `{other}`"))),
        }
    }
}

/// One-dimensional resampling taps: for each destination index, the source
/// indices and weights that contribute to it. Duplicate indices are merged
/// and zero weights dropped.
fn axis_taps(src: usize, dst: usize, method: Interp) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    let last = src - 1;
    (0..dst)
        .map(|d| {
            let mut taps: Vec<(usize, f64)> = Vec::with_capacity(4);
            let mut push = |i: usize, w: f64| {
                if w == 0.0 {
                    return;
                }
                match taps.iter_mut().find(|(j, _)| *j == i) {
                    Some(t) => t.1 += w,
                    None => taps.push((i, w)),
                }
            };
            match method {
                Interp::Nearest => {
                    let i = (((d as f64) + 0.5) * scale).floor() as usize;
                    push(i.min(last), 1.0);
                }
                Interp::Bilinear => {
                    let s = (((d as f64) + 0.5) * scale - 0.5).max(0.0);
                    let i0 = (s.floor() as usize).min(last);
                    let i1 = (i0 + 1).min(last);
                    if i0 == i1 {
                        push(i0, 1.0);
                    } else {
                        let f = s - i0 as f64;
                        push(i0, 1.0 - f);
                        push(i1, f);
                    }
                }
                Interp::Bicubic => {
                    let s = ((d as f64) + 0.5) * scale - 0.5;
                    let base = s.floor();
                    let t = s - base;
                    let w = catmull_rom_weights(t);
                    for (k, wk) in w.iter().enumerate() {
                        let i = (base as i64 - 1 + k as i64).clamp(0, last as i64) as usize;
                        push(i, *wk);
                    }
                }
                Interp::Area => {
                    let lo = d as f64 * scale;
                    let hi = (d + 1) as f64 * scale;
                    let first = lo.floor() as usize;
                    let end = (hi.ceil() as usize).min(src);
                    for i in first..end {
                        let overlap = (hi.min((i + 1) as f64) - lo.max(i as f64)).max(0.0);
                        push(i, overlap / scale);
                    }
                }
            }
            taps
        })
        .collect()
}

/// Catmull-Rom cubic convolution weights (a = -0.5) for taps at offsets
/// -1, 0, 1, 2 from `floor(s)`, with fractional part `t`.
fn catmull_rom_weights(t: f64) -> [f64; 4] {
    const A: f64 = -0.5;
    let near = |x: f64| ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0;
    let far = |x: f64| ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A;
    [far(t + 1.0), near(t), near(1.0 - t), far(2.0 - t)]
}

/// Sparse row representation of a 2-D resampling map between pixel grids.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct SparseRows {
    src_h: usize,
    src_w: usize,
    dst_h: usize,
    dst_w: usize,
    offsets: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
}

impl SparseRows {
    fn build(src_h: usize, src_w: usize, dst_h: usize, dst_w: usize, method: Interp) -> Self {
        let ty = axis_taps(src_h, dst_h, method);
        let tx = axis_taps(src_w, dst_w, method);
        let mut offsets = Vec::with_capacity(dst_h * dst_w + 1);
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        offsets.push(0);
        for row_taps in &ty {
            for col_taps in &tx {
                for &(iy, wy) in row_taps {
                    for &(ix, wx) in col_taps {
                        cols.push(iy * src_w + ix);
                        weights.push(wy * wx);
                    }
                }
                offsets.push(cols.len());
            }
        }
        Self {
            src_h,
            src_w,
            dst_h,
            dst_w,
            offsets,
            cols,
            weights,
        }
    }

    fn src_len(&self) -> usize {
        self.src_h * self.src_w
    }

    fn dst_len(&self) -> usize {
        self.dst_h * self.dst_w
    }

    fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.offsets[r]..self.offsets[r + 1];
        self.cols[span.clone()]
            .iter()
            .copied()
            .zip(self.weights[span].iter().copied())
    }

    /// `dst = M · src` for `channels` interleaved channels.
    fn apply(&self, src: &[f64], channels: usize, dst: &mut [f64]) {
        debug_assert_eq!(src.len(), self.src_len() * channels);
        debug_assert_eq!(dst.len(), self.dst_len() * channels);
        for r in 0..self.dst_len() {
            let out = &mut dst[r * channels..(r + 1) * channels];
            out.fill(0.0);
            for (col, w) in self.row(r) {
                let inp = &src[col * channels..(col + 1) * channels];
                for (o, v) in out.iter_mut().zip(inp) {
                    *o += w * v;
                }
            }
        }
    }

    /// `src_grad += Mᵀ · dst_grad`.
    fn apply_transpose_add(&self, dst_grad: &[f64], channels: usize, src_grad: &mut [f64]) {
        for r in 0..self.dst_len() {
            let g = &dst_grad[r * channels..(r + 1) * channels];
            for (col, w) in self.row(r) {
                let acc = &mut src_grad[col * channels..(col + 1) * channels];
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += w * v;
                }
            }
        }
    }
}

/// Resize an `[H, W, C]` image.
pub fn resize(img: &Tensor, dst_h: usize, dst_w: usize, method: Interp) -> Result<Tensor> {
    let (h, w, c) = img.hwc()?;
    if dst_h == 0 || dst_w == 0 {
        return Err(invalid("zero destination extent"));
    }
    let map = SparseRows::build(h, w, dst_h, dst_w, method);
    let mut out = vec![0.0; dst_h * dst_w * c];
    map.apply(img.data(), c, &mut out);
    Tensor::new(vec![dst_h, dst_w, c], out)
}

/// Fixed bilinear upsampling operator between two heatmap grids.
///
/// Maps a flattened `(src_h·src_w) × C` heatmap to `(dst_h·dst_w) × C`.
/// Never learnable; rows are partitions of unity with at most four taps.
#[derive(Clone, Debug, PartialEq)]
pub struct UpsampleOp {
    rows: SparseRows,
}

impl UpsampleOp {
    pub fn src_extent(&self) -> (usize, usize) {
        (self.rows.src_h, self.rows.src_w)
    }

    pub fn dst_extent(&self) -> (usize, usize) {
        (self.rows.dst_h, self.rows.dst_w)
    }

    pub fn src_len(&self) -> usize {
        self.rows.src_len()
    }

    pub fn dst_len(&self) -> usize {
        self.rows.dst_len()
    }

    /// Nonzero `(column, weight)` pairs of one destination row.
    pub fn row(&self, r: usize) -> Vec<(usize, f64)> {
        self.rows.row(r).collect()
    }

    /// Row-major dense `(dst_h·dst_w) × (src_h·src_w)` matrix.
    pub fn dense(&self) -> Vec<f64> {
        let n = self.src_len();
        let mut m = vec![0.0; self.dst_len() * n];
        for r in 0..self.dst_len() {
            for (col, w) in self.rows.row(r) {
                m[r * n + col] += w;
            }
        }
        m
    }

    /// Apply to a raw channel-interleaved buffer, writing into `dst`.
    pub fn apply_slice(&self, src: &[f64], channels: usize, dst: &mut [f64]) {
        self.rows.apply(src, channels, dst);
    }

    /// Accumulate the adjoint `Uᵀ g` into `src_grad`.
    pub fn adjoint_add(&self, dst_grad: &[f64], channels: usize, src_grad: &mut [f64]) {
        self.rows.apply_transpose_add(dst_grad, channels, src_grad);
    }
}

pub fn build_upsample_op(
    src_h: usize,
    src_w: usize,
    dst_h: usize,
    dst_w: usize,
) -> Result<UpsampleOp> {
    if src_h == 0 || src_w == 0 || dst_h == 0 || dst_w == 0 {
        return Err(invalid("zero extent"));
    }
    if dst_h < src_h || dst_w < src_w {
        return Err(invalid(format!(
            "upsampling operator cannot shrink {src_h}x{src_w} to {dst_h}x{dst_w}"
        )));
    }
    Ok(UpsampleOp {
        rows: SparseRows::build(src_h, src_w, dst_h, dst_w, Interp::Bilinear),
    })
}

/// Apply `op` to a flattened `[(src_h·src_w), C]` tensor.
pub fn apply_upsample(op: &UpsampleOp, flat: &Tensor) -> Result<Tensor> {
    let (n, c) = match flat.shape() {
        [n, c] => (*n, *c),
        [n] => (*n, 1),
        other => {
            return Err(shape_mismatch(format!(
                "expected [pixels, channels], got {other:?}"
            )))
        }
    };
    if n != op.src_len() {
        return Err(shape_mismatch(format!(
            "operator expects {} source pixels, got {n}",
            op.src_len()
        )));
    }
    let mut out = vec![0.0; op.dst_len() * c];
    op.apply_slice(flat.data(), c, &mut out);
    Tensor::new(vec![op.dst_len(), c], out)
}
