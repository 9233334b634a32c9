//! Heatmap regressors.
//!
//! [`ModelParams`] drives a small resolution-agnostic encoder: a stride-P
//! patch embedding, a 3×3 depthwise positional convolution added to the
//! embedding, residual depthwise/pointwise blocks, and a 1×1 head producing
//! K heatmaps at 1/P of the input resolution. Nothing in the parameter shapes
//! depends on the input size.
//!
//! [`LinearModel`] freezes a random instance of that encoder and treats its
//! last-block features as a fixed feature map, leaving only a linear head.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::data::{build_pyramid, Resolution, SyntheticSample};
use crate::error::{invalid, shape_mismatch, Error, Result};
use crate::tensor::{build_upsample_op, Tensor, UpsampleOp};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Patch size P (also the heatmap stride).
    pub patch: usize,
    /// Hidden width D.
    pub width: usize,
    pub blocks: usize,
    /// Keypoint count K.
    pub keypoints: usize,
    pub in_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch: 4,
            width: 16,
            blocks: 2,
            keypoints: 5,
            in_channels: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.width == 0 || self.keypoints == 0 || self.in_channels == 0 {
            return Err(invalid("model extents must be positive"));
        }
        Ok(())
    }

    /// Ordered parameter layout: names and shapes.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (p, d) = (self.patch, self.width);
        let mut v = vec![
            ("patch_embed".to_string(), vec![p, p, self.in_channels, d]),
            ("gpe".to_string(), vec![3, 3, d]),
        ];
        for b in 0..self.blocks {
            v.push((format!("block{b}.dw"), vec![3, 3, d]));
            v.push((format!("block{b}.pw"), vec![d, d]));
        }
        v.push(("head".to_string(), vec![d, self.keypoints]));
        v
    }

    pub fn param_count(&self) -> usize {
        self.layout()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    fn fan_in(shape: &[usize]) -> usize {
        match shape {
            [kh, kw, ci, _] => kh * kw * ci,
            [kh, kw, _] => kh * kw,
            [ci, _] => *ci,
            _ => 1,
        }
    }
}

/// Named, ordered parameter tensors exchanged between clients and server.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    entries: Vec<(String, Tensor)>,
}

impl ModelParams {
    /// Uniform(-s, s) init with s = 1/sqrt(fan_in).
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = config
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                let s = 1.0 / (ModelConfig::fan_in(&shape) as f64).sqrt();
                let t = Tensor::from_fn(&shape, |_| rng.gen_range(-s..s));
                (name, t)
            })
            .collect();
        Self { entries }
    }

    pub fn zeros(config: &ModelConfig) -> Self {
        let entries = config
            .layout()
            .into_iter()
            .map(|(name, shape)| (name, Tensor::zeros(&shape)))
            .collect();
        Self { entries }
    }

    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.entries
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    /// Rebuild named form from a flat vector laid out like `self`.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.len() {
            return Err(shape_mismatch(format!(
                "flat vector has {} values, model has {}",
                flat.len(),
                self.len()
            )));
        }
        let mut off = 0;
        let entries = self
            .entries
            .iter()
            .map(|(n, t)| {
                let chunk = flat[off..off + t.len()].to_vec();
                off += t.len();
                Ok((n.clone(), Tensor::new(t.shape().to_vec(), chunk)?))
            })
            .collect::<Result<_>>()?;
        Ok(Self { entries })
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, x), (b, y))| a == b && x.shape() == y.shape())
    }

    pub fn sq_norm(&self) -> f64 {
        self.entries.iter().map(|(_, t)| t.sq_norm()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }
}

/// Parameter leaves of one model on a tape, in layout order.
#[derive(Clone, Debug)]
pub struct ParamNodes {
    pub ids: Vec<NodeId>,
    blocks: usize,
}

impl ParamNodes {
    fn patch(&self) -> NodeId {
        self.ids[0]
    }

    fn gpe(&self) -> NodeId {
        self.ids[1]
    }

    fn block(&self, b: usize) -> (NodeId, NodeId) {
        (self.ids[2 + 2 * b], self.ids[3 + 2 * b])
    }

    fn head(&self) -> NodeId {
        self.ids[2 + 2 * self.blocks]
    }
}

/// Register every parameter tensor as a trainable leaf.
pub fn attach_params(tape: &mut Tape, params: &ModelParams, config: &ModelConfig) -> Result<ParamNodes> {
    let expected = config.layout();
    if params.entries.len() != expected.len()
        || params
            .entries
            .iter()
            .zip(&expected)
            .any(|((n, t), (en, es))| n != en || t.shape() != es.as_slice())
    {
        return Err(shape_mismatch("parameters do not match model configuration"));
    }
    let ids = params
        .entries
        .iter()
        .map(|(_, t)| tape.param(t.clone()))
        .collect();
    Ok(ParamNodes {
        ids,
        blocks: config.blocks,
    })
}

#[derive(Clone, Debug)]
pub struct ForwardNodes {
    /// `[N, H/P, W/P, K]`
    pub heatmap: NodeId,
    /// Last-block features `[N, H/P, W/P, D]`.
    pub features: NodeId,
    /// Input of every ReLU, in block order.
    pub pre_activations: Vec<NodeId>,
}

/// Record the encoder on `tape` for a `[N, H, W, C]` input node.
pub fn forward(
    tape: &mut Tape,
    nodes: &ParamNodes,
    config: &ModelConfig,
    input: NodeId,
) -> Result<ForwardNodes> {
    let shape = tape.value(input).shape().to_vec();
    if shape.len() != 4 || shape[1] % config.patch != 0 || shape[2] % config.patch != 0 {
        return Err(invalid(format!(
            "input {shape:?} not divisible by patch size {}",
            config.patch
        )));
    }
    let e = tape.conv2d(input, nodes.patch(), config.patch, 0)?;
    let pos = tape.depthwise_conv3x3(e, nodes.gpe())?;
    let mut h = tape.add(e, pos)?;
    let mut pre_activations = Vec::with_capacity(config.blocks);
    for b in 0..config.blocks {
        let (dw, pw) = nodes.block(b);
        let u = tape.depthwise_conv3x3(h, dw)?;
        pre_activations.push(u);
        let u = tape.relu(u);
        let u = tape.pointwise_conv1x1(u, pw)?;
        h = tape.add(h, u)?;
    }
    let heatmap = tape.pointwise_conv1x1(h, nodes.head())?;
    Ok(ForwardNodes {
        heatmap,
        features: h,
        pre_activations,
    })
}

/// Stack `[H, W, C]` images into one `[N, H, W, C]` batch.
pub fn stack(images: &[&Tensor]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| invalid("cannot stack an empty batch"))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(first.len() * images.len());
    for img in images {
        if img.shape() != shape.as_slice() {
            return Err(shape_mismatch("batch images differ in shape"));
        }
        data.extend_from_slice(img.data());
    }
    let mut full = vec![images.len()];
    full.extend(shape);
    Tensor::new(full, data)
}

/// Inference on a `[N, H, W, C]` batch; returns `(heatmaps, features)`.
pub fn predict_batch(
    params: &ModelParams,
    config: &ModelConfig,
    batch: Tensor,
) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let nodes = attach_params(&mut tape, params, config)?;
    let x = tape.constant(batch);
    let out = forward(&mut tape, &nodes, config, x)?;
    Ok((
        tape.value(out.heatmap).clone(),
        tape.value(out.features).clone(),
    ))
}

/// Heatmaps for one `[H, W, C]` image: `[H/P, W/P, K]`.
pub fn forward_heatmap(params: &ModelParams, config: &ModelConfig, img: &Tensor) -> Result<Tensor> {
    let (h, w, c) = img.hwc()?;
    let batch = img.clone().reshape(&[1, h, w, c])?;
    let (hm, _) = predict_batch(params, config, batch)?;
    let s = hm.shape().to_vec();
    hm.reshape(&s[1..])
}

/// One row of an embedding export.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub resolution: Resolution,
    pub sample_id: u64,
    pub features: Vec<f64>,
}

/// Spatially mean-pooled last-block features, one row per (resolution, sample).
pub fn export_embeddings(
    params: &ModelParams,
    config: &ModelConfig,
    samples: &[SyntheticSample],
    resolutions: &[Resolution],
) -> Result<Vec<EmbeddingRow>> {
    let mut rows = Vec::with_capacity(samples.len() * resolutions.len());
    for &res in resolutions {
        for s in samples {
            let img = crate::tensor::resize(&s.image, res.h, res.w, crate::tensor::Interp::Bilinear)?;
            let (h, w, c) = img.hwc()?;
            let (_, feats) = predict_batch(params, config, img.reshape(&[1, h, w, c])?)?;
            let d = config.width;
            let cells = feats.len() / d;
            let mut pooled = vec![0.0; d];
            for cell in feats.data().chunks(d) {
                for (p, v) in pooled.iter_mut().zip(cell) {
                    *p += v;
                }
            }
            pooled.iter_mut().for_each(|p| *p /= cells as f64);
            rows.push(EmbeddingRow {
                resolution: res,
                sample_id: s.sample_id,
                features: pooled,
            });
        }
    }
    Ok(rows)
}

/// Frozen features of one sample: `psi[i]` is `d × (m_i·K)` for level `i`.
#[derive(Clone, Debug)]
pub struct LinearSample {
    pub sample_id: u64,
    pub psi: Vec<DMatrix<f64>>,
    /// Level-0 target heatmap, flattened `[pixels, K]`.
    pub target: DVector<f64>,
}

/// One client's linear last-layer model over frozen encoder features.
#[derive(Clone, Debug)]
pub struct LinearModel {
    pub dim: usize,
    pub keypoints: usize,
    /// Heatmap grids per resolution level, level 0 first.
    pub grids: Vec<Resolution>,
    /// `ups[i - 1]` lifts the level-`i` grid to the level-`(i-1)` grid.
    pub ups: Vec<UpsampleOp>,
    pub samples: Vec<LinearSample>,
    /// Enforced spectral-norm bound on every feature matrix.
    pub m_phi: f64,
}

impl LinearModel {
    pub fn levels(&self) -> usize {
        self.grids.len()
    }

    /// Dense level-`i` → level-`(i-1)` operator acting on `[pixels, K]` vectors.
    pub fn up_matrix(&self, i: usize) -> DMatrix<f64> {
        kron_identity(&self.ups[i - 1], self.keypoints)
    }

    /// `(ψ^{(i)}_j)ᵀ w`.
    pub fn linear_forward(&self, j: usize, i: usize, w: &DVector<f64>) -> Result<DVector<f64>> {
        let s = self
            .samples
            .get(j)
            .ok_or_else(|| Error::OutOfRange(format!("sample {j}")))?;
        let psi = s
            .psi
            .get(i)
            .ok_or_else(|| Error::OutOfRange(format!("level {i}")))?;
        if w.len() != psi.nrows() {
            return Err(shape_mismatch(format!(
                "weight has {} entries, features have {}",
                w.len(),
                psi.nrows()
            )));
        }
        Ok(psi.tr_mul(w))
    }
}

/// Dense `U ⊗ I_K` for channel-interleaved heatmaps.
pub fn kron_identity(op: &UpsampleOp, k: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(op.dst_len() * k, op.src_len() * k);
    for r in 0..op.dst_len() {
        for (c, w) in op.row(r) {
            for ch in 0..k {
                m[(r * k + ch, c * k + ch)] += w;
            }
        }
    }
    m
}

/// One client's data for [`build_linear_models`].
pub struct LinearShard<'a> {
    pub samples: &'a [SyntheticSample],
    /// Image resolutions per level, native first, strictly decreasing.
    pub resolutions: &'a [Resolution],
}

/// Build frozen-feature linear models for several clients from one random
/// encoder. All feature matrices share one rescaling so the largest spectral
/// norm equals `m_phi`.
pub fn build_linear_models(
    shards: &[LinearShard<'_>],
    config: &ModelConfig,
    seed: u64,
    m_phi: f64,
) -> Result<Vec<LinearModel>> {
    if shards.is_empty() || shards.iter().any(|s| s.samples.is_empty()) {
        return Err(invalid("linear model needs a nonempty dataset"));
    }
    if !(m_phi > 0.0) {
        return Err(invalid("m_phi must be positive"));
    }
    let encoder = ModelParams::init(config, seed);
    let (d, k, p) = (config.width, config.keypoints, config.patch);
    let mut models = Vec::with_capacity(shards.len());
    let mut max_norm: f64 = 0.0;
    for shard in shards {
        let grids: Vec<Resolution> = shard
            .resolutions
            .iter()
            .map(|r| Resolution::new(r.h / p, r.w / p))
            .collect();
        let ups = grids
            .windows(2)
            .map(|g| build_upsample_op(g[1].h, g[1].w, g[0].h, g[0].w))
            .collect::<Result<Vec<_>>>()?;
        let mut samples = Vec::with_capacity(shard.samples.len());
        for s in shard.samples {
            let pyr = build_pyramid(&s.image, shard.resolutions)?;
            let mut psi = Vec::with_capacity(pyr.levels.len());
            for img in &pyr.levels {
                let (h, w, c) = img.hwc()?;
                let (_, feats) =
                    predict_batch(&encoder, config, img.clone().reshape(&[1, h, w, c])?)?;
                let m = feats.len() / d;
                let mut mat = DMatrix::zeros(d * k, m * k);
                for px in 0..m {
                    for ch in 0..d {
                        let v = feats.data()[px * d + ch];
                        for kk in 0..k {
                            mat[(ch * k + kk, px * k + kk)] = v;
                        }
                    }
                }
                max_norm = max_norm.max(spectral_norm(&mat));
                psi.push(mat);
            }
            let target = DVector::from_column_slice(s.target.data());
            samples.push(LinearSample {
                sample_id: s.sample_id,
                psi,
                target,
            });
        }
        models.push(LinearModel {
            dim: d * k,
            keypoints: k,
            grids,
            ups,
            samples,
            m_phi,
        });
    }
    if max_norm > 0.0 {
        let scale = m_phi / max_norm;
        for m in &mut models {
            for s in &mut m.samples {
                for psi in &mut s.psi {
                    *psi *= scale;
                }
            }
        }
    }
    Ok(models)
}

pub fn build_linear_model(
    samples: &[SyntheticSample],
    config: &ModelConfig,
    seed: u64,
    m_phi: f64,
    resolutions: &[Resolution],
) -> Result<LinearModel> {
    let mut v = build_linear_models(
        &[LinearShard {
            samples,
            resolutions,
        }],
        config,
        seed,
        m_phi,
    )?;
    Ok(v.remove(0))
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    // ‖M‖₂² = λ_max(M Mᵀ) on the smaller side.
    let g = if m.nrows() <= m.ncols() {
        m * m.transpose()
    } else {
        m.transpose() * m
    };
    let eig = nalgebra::SymmetricEigen::new(g);
    eig.eigenvalues.iter().cloned().fold(0.0, f64::max).sqrt()
}
