//! The end-to-end trainable pipeline.
//!
//! Raw features flow through the token encoder and the two projections
//! into the shared space; the supervision mode selects which objectives
//! run on top; gradients flow back through pooling, renormalization and
//! the projections into every trainable tensor. `ModelParams` doubles as
//! the gradient container (`zeros_like` + the fixed `to_flat` ordering the
//! optimizer uses).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{
    init_affine, project_video, projection_backward, toy_text_encode, toy_text_encode_backward,
    DecoderParams, ProjectionParams, TokenSequence,
};
use crate::error::{Error, Result};
use crate::grounding::{grounding_loss, GrounderParams, GroundingSample};
use crate::numerics::{Affine, Mat};
use crate::objectives::{
    gt_caption_loss, gt_clip_contrastive_loss, pool_batch, support_caption_loss,
    support_contrastive_loss, total_loss, BatchItem, EmbeddingBatch, GradKey, LossBundle,
    LossWeights,
};
use crate::rng::{derived_rng, stream};
use crate::supportset::{ConvParams, PoolingMethod, PoolingParams, SupportConstruction, SupportSetSpec};

/// Which supervision runs on top of the base grounding loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SupervisionMode {
    /// Grounding loss only.
    Baseline,
    /// Plus the GT-clip contrastive/caption objectives.
    GtClip,
    /// Plus the support-set contrastive/caption objectives.
    SupportSet,
}

impl SupervisionMode {
    pub const ALL: [SupervisionMode; 3] =
        [SupervisionMode::Baseline, SupervisionMode::GtClip, SupervisionMode::SupportSet];

    pub fn as_str(&self) -> &'static str {
        match self {
            SupervisionMode::Baseline => "baseline",
            SupervisionMode::GtClip => "gtc",
            SupervisionMode::SupportSet => "ss",
        }
    }
}

impl std::str::FromStr for SupervisionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" => Ok(SupervisionMode::Baseline),
            "gtc" => Ok(SupervisionMode::GtClip),
            "ss" => Ok(SupervisionMode::SupportSet),
            other => Err(Error::InvalidParameter(format!(
                "unknown mode '{other}' (expected baseline, gtc or ss)"
            ))),
        }
    }
}

impl std::fmt::Display for SupervisionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which auxiliary objectives are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectiveToggles {
    pub contrast: bool,
    pub caption: bool,
}

impl ObjectiveToggles {
    pub fn both() -> Self {
        ObjectiveToggles { contrast: true, caption: true }
    }
}

/// Static dimensions of the pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Shared-space dimension D.
    pub dim: usize,
    pub dim_video: usize,
    pub dim_text: usize,
    pub vocab_size: usize,
    /// Padded clip count for FC/Conv pooling.
    pub t_max: usize,
}

/// All trainable tensors, plus the support-set spec whose FC/Conv weights
/// are themselves trainable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub proj: ProjectionParams,
    /// Transformation layer producing the GT-clip caption context.
    pub caption_map: Affine,
    pub decoder: DecoderParams,
    pub grounder: GrounderParams,
    pub support: SupportSetSpec,
}

impl ModelParams {
    /// Seeded init: every affine uniform in +-1/sqrt(fan_in).
    pub fn init(
        dims: &ModelDims,
        construction: SupportConstruction,
        method: PoolingMethod,
        tau: f64,
        seed: u64,
    ) -> Self {
        let mut rng = derived_rng(seed, &[stream::PARAMS]);
        let proj = ProjectionParams::init(dims.dim_video, dims.dim_text, dims.dim, &mut rng);
        let caption_map = init_affine(dims.dim, dims.dim, &mut rng);
        let decoder = DecoderParams::init(dims.dim, dims.vocab_size, dims.dim_text, &mut rng);
        let grounder = GrounderParams::init(dims.dim, &mut rng);
        let params = match method {
            PoolingMethod::FullyConnected => PoolingParams {
                method,
                tau,
                t_max: dims.t_max,
                fc: Some(init_affine(dims.dim, dims.t_max * dims.dim, &mut rng)),
                conv: None,
            },
            PoolingMethod::Conv => {
                let bound = 1.0 / (3.0 * dims.dim as f64).sqrt();
                let mut conv = ConvParams::zeros(dims.dim);
                for tap in conv.kernel.iter_mut() {
                    for v in tap.data_mut() {
                        *v = rng.random_range(-bound..bound);
                    }
                }
                for v in conv.bias.iter_mut() {
                    *v = rng.random_range(-bound..bound);
                }
                PoolingParams { method, tau, t_max: dims.t_max, fc: None, conv: Some(conv) }
            }
            _ => PoolingParams::non_parametric(method, tau),
        };
        ModelParams {
            proj,
            caption_map,
            decoder,
            grounder,
            support: SupportSetSpec { construction, params },
        }
    }

    /// Same structure with every trainable entry zeroed; the gradient
    /// container.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |v| *v = 0.0);
        z
    }

    /// Visit every trainable scalar in a fixed order.
    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut f64)) {
        for v in self.proj.video.weight.data_mut() {
            f(v);
        }
        for v in self.proj.video.bias.iter_mut() {
            f(v);
        }
        for v in self.proj.text.weight.data_mut() {
            f(v);
        }
        for v in self.proj.text.bias.iter_mut() {
            f(v);
        }
        for v in self.caption_map.weight.data_mut() {
            f(v);
        }
        for v in self.caption_map.bias.iter_mut() {
            f(v);
        }
        for v in self.decoder.output.weight.data_mut() {
            f(v);
        }
        for v in self.decoder.output.bias.iter_mut() {
            f(v);
        }
        for v in self.decoder.token_table.data_mut() {
            f(v);
        }
        for v in self.grounder.fuse.weight.data_mut() {
            f(v);
        }
        for v in self.grounder.fuse.bias.iter_mut() {
            f(v);
        }
        if let Some(fc) = self.support.params.fc.as_mut() {
            for v in fc.weight.data_mut() {
                f(v);
            }
            for v in fc.bias.iter_mut() {
                f(v);
            }
        }
        if let Some(conv) = self.support.params.conv.as_mut() {
            for tap in conv.kernel.iter_mut() {
                for v in tap.data_mut() {
                    f(v);
                }
            }
            for v in conv.bias.iter_mut() {
                f(v);
            }
        }
    }

    pub fn n_trainable(&self) -> usize {
        let mut n = 0;
        let mut probe = self.clone();
        probe.visit_mut(&mut |_| n += 1);
        n
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_trainable());
        let mut probe = self.clone();
        probe.visit_mut(&mut |v| out.push(*v));
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut i = 0;
        self.visit_mut(&mut |v| {
            *v = flat[i];
            i += 1;
        });
        assert_eq!(i, flat.len(), "flat parameter vector has the wrong length");
    }
}

/// Mode, toggles, weights and the normalization convention.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub mode: SupervisionMode,
    pub toggles: ObjectiveToggles,
    pub weights: LossWeights,
    pub normalize_embeddings: bool,
}

/// The per-component loss values of one forward pass.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct StepLosses {
    pub grounding: f64,
    pub contrast: f64,
    pub caption: f64,
    pub total: f64,
}

/// A batch of samples embedded into the shared space, with everything the
/// backward pass needs.
pub struct EmbeddedBatch<'a> {
    pub batch: EmbeddingBatch,
    pub sentences: Vec<TokenSequence>,
    /// The raw samples (projection inputs).
    samples: Vec<&'a GroundingSample>,
    /// Sentence features before the text projection.
    g: Vec<Vec<f64>>,
    /// Affine outputs before row normalization.
    x_prenorm: Vec<Mat>,
    y_prenorm: Vec<Vec<f64>>,
}

/// Run the encoders over a batch of samples.
pub fn embed<'a>(
    params: &ModelParams,
    samples: &[&'a GroundingSample],
    normalize: bool,
) -> Result<EmbeddedBatch<'a>> {
    if samples.is_empty() {
        return Err(Error::InvalidParameter("empty sample batch".into()));
    }
    let mut items = Vec::with_capacity(samples.len());
    let mut sentences = Vec::with_capacity(samples.len());
    let mut g_all = Vec::with_capacity(samples.len());
    let mut x_prenorm = Vec::with_capacity(samples.len());
    let mut y_prenorm = Vec::with_capacity(samples.len());
    for s in samples {
        let g = toy_text_encode(&s.tokens, &params.decoder.token_table)?;
        let y_pre = params.proj.text.apply(&g)?;
        let y = if normalize { crate::numerics::l2_normalize(&y_pre)? } else { y_pre.clone() };
        let x_pre = project_video(&s.features, &params.proj.video, false)?;
        let x = if normalize {
            project_video(&s.features, &params.proj.video, true)?
        } else {
            x_pre.clone()
        };
        items.push(BatchItem { clips: x, text: y, gt: s.gt });
        sentences.push(s.tokens.clone());
        g_all.push(g);
        x_prenorm.push(x_pre);
        y_prenorm.push(y_pre);
    }
    Ok(EmbeddedBatch {
        batch: EmbeddingBatch::from_parts(items, normalize)?,
        sentences,
        samples: samples.to_vec(),
        g: g_all,
        x_prenorm,
        y_prenorm,
    })
}

/// Evaluate the configured objectives on an embedded batch. Returns the
/// component values and the combined bundle with embedding-level and
/// parameter-level gradients.
pub fn compute_losses(
    params: &ModelParams,
    cfg: &ObjectiveConfig,
    embedded: &EmbeddedBatch,
) -> Result<(StepLosses, LossBundle)> {
    cfg.weights.validate()?;
    let batch = &embedded.batch;
    let l_vg = grounding_loss(batch, &params.grounder)?;
    let zero = LossBundle::zero();
    let (l_contrast, l_caption) = match cfg.mode {
        SupervisionMode::Baseline => (zero.clone(), zero),
        SupervisionMode::GtClip => {
            let c = if cfg.toggles.contrast {
                gt_clip_contrastive_loss(batch, &cfg.weights)?
            } else {
                zero.clone()
            };
            let p = if cfg.toggles.caption {
                gt_caption_loss(batch, &embedded.sentences, &params.caption_map, &params.decoder)?
            } else {
                zero
            };
            (c, p)
        }
        SupervisionMode::SupportSet => {
            if cfg.toggles.contrast || cfg.toggles.caption {
                let pooled = pool_batch(batch, &params.support)?;
                let c = if cfg.toggles.contrast {
                    support_contrastive_loss(&pooled, batch, &params.support, &cfg.weights)?
                } else {
                    zero.clone()
                };
                let p = if cfg.toggles.caption {
                    support_caption_loss(
                        batch,
                        &pooled,
                        &params.support,
                        &embedded.sentences,
                        &params.decoder,
                    )?
                } else {
                    zero
                };
                (c, p)
            } else {
                (zero.clone(), zero)
            }
        }
    };
    let total = total_loss(&l_vg, &l_contrast, &l_caption, &cfg.weights);
    let losses = StepLosses {
        grounding: l_vg.value,
        contrast: l_contrast.value,
        caption: l_caption.value,
        total: total.value,
    };
    Ok((losses, total))
}

/// Chain embedding-level gradients through normalization, the projections
/// and the token encoder, and collect parameter-level gradients into a
/// `ModelParams`-shaped container.
pub fn backprop_to_params(
    params: &ModelParams,
    embedded: &EmbeddedBatch,
    bundle: &LossBundle,
    normalize: bool,
) -> Result<ModelParams> {
    let mut grads = params.zeros_like();
    for (key, grad) in &bundle.grads {
        match *key {
            GradKey::DecoderWeight => grads.decoder.output.weight.add_scaled(grad, 1.0),
            GradKey::DecoderBias => add_row(&mut grads.decoder.output.bias, grad),
            GradKey::CaptionMapWeight => grads.caption_map.weight.add_scaled(grad, 1.0),
            GradKey::CaptionMapBias => add_row(&mut grads.caption_map.bias, grad),
            GradKey::GrounderWeight => grads.grounder.fuse.weight.add_scaled(grad, 1.0),
            GradKey::GrounderBias => add_row(&mut grads.grounder.fuse.bias, grad),
            GradKey::FcPoolWeight => {
                let fc = grads.support.params.fc.as_mut().ok_or_else(|| {
                    Error::InvalidParameter("fc pooling gradient without fc parameters".into())
                })?;
                fc.weight.add_scaled(grad, 1.0);
            }
            GradKey::FcPoolBias => {
                let fc = grads.support.params.fc.as_mut().ok_or_else(|| {
                    Error::InvalidParameter("fc pooling gradient without fc parameters".into())
                })?;
                add_row(&mut fc.bias, grad);
            }
            GradKey::ConvPoolKernel(tap) => {
                let conv = grads.support.params.conv.as_mut().ok_or_else(|| {
                    Error::InvalidParameter("conv pooling gradient without conv parameters".into())
                })?;
                conv.kernel[tap].add_scaled(grad, 1.0);
            }
            GradKey::ConvPoolBias => {
                let conv = grads.support.params.conv.as_mut().ok_or_else(|| {
                    Error::InvalidParameter("conv pooling gradient without conv parameters".into())
                })?;
                add_row(&mut conv.bias, grad);
            }
            GradKey::ClipEmbeddings(i) => {
                let item = embedded.batch.item(i);
                let pre = &embedded.x_prenorm[i];
                for t in 0..grad.rows() {
                    let upstream = grad.row(t);
                    if upstream.iter().all(|v| *v == 0.0) {
                        continue;
                    }
                    // raw feature row is the projection input
                    let feature_row = embedded.samples[i].features.row(t);
                    let normalized = if normalize { Some(item.clips.row(t)) } else { None };
                    projection_backward(
                        feature_row,
                        pre.row(t),
                        normalized,
                        &params.proj.video,
                        upstream,
                        &mut grads.proj.video.weight,
                        &mut grads.proj.video.bias,
                    );
                }
            }
            GradKey::TextEmbedding(i) => {
                let item = embedded.batch.item(i);
                let upstream = grad.row(0);
                let normalized = if normalize { Some(item.text.as_slice()) } else { None };
                let dg = projection_backward(
                    &embedded.g[i],
                    &embedded.y_prenorm[i],
                    normalized,
                    &params.proj.text,
                    upstream,
                    &mut grads.proj.text.weight,
                    &mut grads.proj.text.bias,
                );
                toy_text_encode_backward(
                    &embedded.sentences[i],
                    &dg,
                    &mut grads.decoder.token_table,
                );
            }
            GradKey::CaptionContext(_) => {
                return Err(Error::InvalidParameter(
                    "unchained caption context gradient reached the parameter backward".into(),
                ))
            }
        }
    }
    Ok(grads)
}

impl<'a> EmbeddedBatch<'a> {
    pub fn g(&self, i: usize) -> &[f64] {
        &self.g[i]
    }

    pub fn samples(&self) -> &[&'a GroundingSample] {
        &self.samples
    }
}

/// One full forward/backward pass over a batch of raw samples.
pub fn forward_backward(
    params: &ModelParams,
    cfg: &ObjectiveConfig,
    samples: &[&GroundingSample],
) -> Result<(StepLosses, ModelParams)> {
    let embedded = embed(params, samples, cfg.normalize_embeddings)?;
    let (losses, bundle) = compute_losses(params, cfg, &embedded)?;
    let grads = backprop_to_params(params, &embedded, &bundle, cfg.normalize_embeddings)?;
    Ok((losses, grads))
}

fn add_row(dst: &mut [f64], grad: &Mat) {
    debug_assert_eq!(grad.rows(), 1);
    for (d, g) in dst.iter_mut().zip(grad.row(0)) {
        *d += g;
    }
}
