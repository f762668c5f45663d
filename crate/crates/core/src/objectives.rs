//! The supervision objectives and their analytic gradients.
//!
//! Four losses over a mini-batch of clip/text embeddings in the shared
//! space, plus their weighted combination:
//!
//! - ground-truth clip contrastive (multiple-instance NCE): per item i,
//!   `-log( sum_P e^{x.y/tau} / (sum_P e^{x.y/tau} + sum_N e^{x'.y'/tau}) )`
//!   where P pairs every GT clip of video i with its text, and N pairs the
//!   background clips of i and every clip of every other batch item with
//!   that same text;
//! - support contrastive: per item i,
//!   `-log( e^{w_i.Y_i/tau} / sum_j e^{w_i.Y_j/tau} )` where w_i is the
//!   support-set pooled embedding;
//! - caption: mean per-token negative log-likelihood of the sentence under
//!   a bag-of-words head over the generation context, averaged over the
//!   batch; the context is either the GT-clip mean mapped through a
//!   transformation layer or the pooled support embedding;
//! - total: `L_vg + lambda1 * contrast + lambda2 * caption`.
//!
//! Both contrastive losses are computed through log-sum-exp so the
//! no-negatives cases are exactly zero, and every loss returns gradients
//! for each embedding and parameter it touches. Gradients flow through the
//! pooling functions (and the pooled-embedding renormalization when the
//! batch is normalized), so a support loss populates gradients for clip
//! embeddings, text embeddings and any parametric pooling weights.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encoders::{DecoderParams, TokenSequence};
use crate::error::{Error, Result};
use crate::numerics::{dot, l2_norm, l2_normalize, log_sum_exp, normalize_backward, Affine, Mat};
use crate::supportset::{
    build_support_set, pool_support, pool_support_backward, GroundTruthInterval, PooledEmbedding,
    SupportSet, SupportSetSpec,
};

/// One batch item: clip embeddings X (T x D), text embedding Y (D) and the
/// ground-truth interval.
#[derive(Clone, Debug)]
pub struct BatchItem {
    pub clips: Mat,
    pub text: Vec<f64>,
    pub gt: GroundTruthInterval,
}

/// A mini-batch of embedded video/text pairs.
#[derive(Clone, Debug)]
pub struct EmbeddingBatch {
    items: Vec<BatchItem>,
    dim: usize,
    normalized: bool,
}

impl EmbeddingBatch {
    /// Build a batch, optionally normalizing every clip row and text
    /// embedding to unit length first.
    pub fn new(mut items: Vec<BatchItem>, normalize: bool) -> Result<Self> {
        if normalize {
            for item in items.iter_mut() {
                for t in 0..item.clips.rows() {
                    let unit = l2_normalize(item.clips.row(t))?;
                    item.clips.row_mut(t).copy_from_slice(&unit);
                }
                item.text = l2_normalize(&item.text)?;
            }
        }
        Self::from_parts(items, normalize)
    }

    /// Wrap embeddings that are already in their final space. `normalized`
    /// records whether the unit-norm convention is in force (it controls
    /// whether pooled embeddings are renormalized inside the support
    /// contrastive objective).
    pub fn from_parts(items: Vec<BatchItem>, normalized: bool) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::InvalidParameter("empty batch".into()));
        }
        let dim = items[0].text.len();
        for (i, item) in items.iter().enumerate() {
            if item.text.len() != dim || item.clips.cols() != dim {
                return Err(Error::ShapeMismatch(format!(
                    "batch item {i} does not have embedding dim {dim}"
                )));
            }
            if item.clips.rows() == 0 {
                return Err(Error::Data(format!("batch item {i} has no clips")));
            }
            if item.gt.end_clip() >= item.clips.rows() {
                return Err(Error::Data(format!(
                    "batch item {i}: ground truth exceeds {} clips",
                    item.clips.rows()
                )));
            }
            if !item.clips.is_finite() || item.text.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("batch item {i} has non-finite values")));
            }
        }
        Ok(EmbeddingBatch { items, dim, normalized })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        false // non-empty is enforced at construction
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn items(&self) -> &[BatchItem] {
        &self.items
    }

    pub fn item(&self, i: usize) -> &BatchItem {
        &self.items[i]
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }
}

/// Loss combination weights and the shared softmax temperature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64, tau: f64) -> Result<Self> {
        let w = LossWeights { lambda1, lambda2, tau };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::InvalidParameter("lambda weights must be >= 0".into()));
        }
        if self.tau <= 0.0 || !self.tau.is_finite() {
            return Err(Error::InvalidParameter(format!("tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Positive and negative (item, clip) index pairs for the GT-clip
/// contrastive objective, per batch item.
#[derive(Clone, Debug)]
pub struct ContrastivePairSets {
    /// Per item i: GT clips of video i, each paired with text i.
    pub positives: Vec<Vec<(usize, usize)>>,
    /// Per item i: background clips of i and all clips of j != i, each
    /// paired with text i.
    pub negatives: Vec<Vec<(usize, usize)>>,
}

/// Enumerate the contrastive pair sets of a batch.
pub fn contrastive_pairs(batch: &EmbeddingBatch) -> ContrastivePairSets {
    let b = batch.len();
    let mut positives = Vec::with_capacity(b);
    let mut negatives = Vec::with_capacity(b);
    for i in 0..b {
        let item = batch.item(i);
        let pos: Vec<(usize, usize)> = item.gt.clips().map(|t| (i, t)).collect();
        let mut neg: Vec<(usize, usize)> =
            (0..item.clips.rows()).filter(|t| !item.gt.contains(*t)).map(|t| (i, t)).collect();
        for (j, other) in batch.items().iter().enumerate() {
            if j == i {
                continue;
            }
            neg.extend((0..other.clips.rows()).map(|t| (j, t)));
        }
        positives.push(pos);
        negatives.push(neg);
    }
    ContrastivePairSets { positives, negatives }
}

/// Where a caption generation context came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContextSource {
    /// Mean over ground-truth clips mapped through the transformation layer.
    GtConcat,
    /// The support-set pooled embedding, used as-is.
    SupportPooled,
}

/// The embedding a sentence is generated from.
#[derive(Clone, Debug)]
pub struct CaptionContext {
    pub w: Vec<f64>,
    pub source: ContextSource,
    /// For `GtConcat`: the mean over GT clips (the transformation layer's
    /// input), kept for the backward pass.
    pub basis: Option<Vec<f64>>,
}

/// Identifies one gradient target inside a `LossBundle`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GradKey {
    /// d/dX_i, same shape as the item's clip matrix.
    ClipEmbeddings(usize),
    /// d/dY_i as a 1 x D row.
    TextEmbedding(usize),
    /// d/dw_i for a caption context, 1 x D.
    CaptionContext(usize),
    CaptionMapWeight,
    CaptionMapBias,
    DecoderWeight,
    DecoderBias,
    FcPoolWeight,
    FcPoolBias,
    /// One of the three convolution taps.
    ConvPoolKernel(usize),
    ConvPoolBias,
    GrounderWeight,
    GrounderBias,
}

/// A scalar loss with gradients for every embedding/parameter it touches.
#[derive(Clone, Debug, Default)]
pub struct LossBundle {
    pub value: f64,
    pub grads: BTreeMap<GradKey, Mat>,
}

impl LossBundle {
    pub fn zero() -> Self {
        LossBundle { value: 0.0, grads: BTreeMap::new() }
    }

    /// Accumulate into the gradient for `key`, creating it if absent.
    pub fn add_grad(&mut self, key: GradKey, grad: &Mat, alpha: f64) {
        match self.grads.get_mut(&key) {
            Some(existing) => existing.add_scaled(grad, alpha),
            None => {
                let mut g = Mat::zeros(grad.rows(), grad.cols());
                g.add_scaled(grad, alpha);
                self.grads.insert(key, g);
            }
        }
    }

    pub fn add_row_grad(&mut self, key: GradKey, row: &[f64], alpha: f64) {
        self.add_grad(key, &Mat::from_vec(1, row.len(), row.to_vec()), alpha);
    }

    /// self += alpha * other.
    pub fn accumulate(&mut self, other: &LossBundle, alpha: f64) {
        self.value += alpha * other.value;
        for (key, grad) in &other.grads {
            self.add_grad(*key, grad, alpha);
        }
    }

    pub fn grad(&self, key: GradKey) -> Option<&Mat> {
        self.grads.get(&key)
    }

    pub fn check_finite(&self, label: &str) -> Result<()> {
        if !self.value.is_finite() {
            return Err(Error::NonFinite(format!("{label} loss value is {}", self.value)));
        }
        for (key, grad) in &self.grads {
            if !grad.is_finite() {
                return Err(Error::NonFinite(format!("{label} gradient for {key:?}")));
            }
        }
        Ok(())
    }
}

/// GT-clip contrastive objective (multiple-instance NCE over the batch).
///
/// Computed as `lse(all logits) - lse(positive logits)` per item, which is
/// exactly zero when the negative set is empty.
pub fn gt_clip_contrastive_loss(batch: &EmbeddingBatch, weights: &LossWeights) -> Result<LossBundle> {
    weights.validate()?;
    let tau = weights.tau;
    let pairs = contrastive_pairs(batch);
    let mut bundle = LossBundle::zero();
    for i in 0..batch.len() {
        let y = &batch.item(i).text;
        let pos = &pairs.positives[i];
        if pos.is_empty() {
            return Err(Error::DegenerateInput(format!(
                "batch item {i} has no positive pairs (degenerate ground truth)"
            )));
        }
        let neg = &pairs.negatives[i];
        let logit = |&(j, t): &(usize, usize)| dot(batch.item(j).clips.row(t), y) / tau;
        let pos_logits: Vec<f64> = pos.iter().map(logit).collect();
        let mut all_logits = pos_logits.clone();
        all_logits.extend(neg.iter().map(logit));

        let lse_all = log_sum_exp(&all_logits)?;
        let lse_pos = log_sum_exp(&pos_logits)?;
        bundle.value += lse_all - lse_pos;

        // d loss_i / d logit_k = softmax_all(k) - [k positive] softmax_pos(k)
        for (k, &(j, t)) in pos.iter().chain(neg.iter()).enumerate() {
            let mut coeff = (all_logits[k] - lse_all).exp();
            if k < pos.len() {
                coeff -= (pos_logits[k] - lse_pos).exp();
            }
            if coeff == 0.0 {
                continue;
            }
            let x = batch.item(j).clips.row(t);
            let mut gx = Mat::zeros(batch.item(j).clips.rows(), batch.dim());
            let row = gx.row_mut(t);
            for d in 0..batch.dim() {
                row[d] = coeff * y[d] / tau;
            }
            bundle.add_grad(GradKey::ClipEmbeddings(j), &gx, 1.0);
            let gy: Vec<f64> = x.iter().map(|v| coeff * v / tau).collect();
            bundle.add_row_grad(GradKey::TextEmbedding(i), &gy, 1.0);
        }
    }
    bundle.check_finite("gt-clip contrastive")?;
    Ok(bundle)
}

/// A support set together with its pooled embedding, for one batch item.
#[derive(Clone, Debug)]
pub struct SupportPooling {
    pub support: SupportSet,
    pub pooled: PooledEmbedding,
}

/// Build the support set and pooled embedding for every batch item.
pub fn pool_batch(batch: &EmbeddingBatch, spec: &SupportSetSpec) -> Result<Vec<SupportPooling>> {
    batch
        .items()
        .iter()
        .map(|item| {
            let support = build_support_set(item.clips.rows(), &item.gt, spec.construction)?;
            let clips: Vec<&[f64]> =
                support.clip_indices().iter().map(|&c| item.clips.row(c)).collect();
            let pooled = pool_support(&clips, &item.text, &spec.params)?;
            Ok(SupportPooling { support, pooled })
        })
        .collect()
}

/// Run a pooling backward pass for item `i` and scatter the results into
/// the bundle under the batch-level keys.
fn chain_through_pooling(
    bundle: &mut LossBundle,
    batch: &EmbeddingBatch,
    spec: &SupportSetSpec,
    i: usize,
    pooling: &SupportPooling,
    upstream: &[f64],
) -> Result<()> {
    let item = batch.item(i);
    let clips: Vec<&[f64]> =
        pooling.support.clip_indices().iter().map(|&c| item.clips.row(c)).collect();
    let pgrads =
        pool_support_backward(&clips, &item.text, &spec.params, &pooling.pooled, upstream)?;

    let mut gx = Mat::zeros(item.clips.rows(), batch.dim());
    for (slot, &clip) in pooling.support.clip_indices().iter().enumerate() {
        gx.row_mut(clip).copy_from_slice(&pgrads.clips[slot]);
    }
    bundle.add_grad(GradKey::ClipEmbeddings(i), &gx, 1.0);
    if let Some(gy) = &pgrads.y {
        bundle.add_row_grad(GradKey::TextEmbedding(i), gy, 1.0);
    }
    if let Some(gw) = &pgrads.fc_weight {
        bundle.add_grad(GradKey::FcPoolWeight, gw, 1.0);
    }
    if let Some(gb) = &pgrads.fc_bias {
        bundle.add_row_grad(GradKey::FcPoolBias, gb, 1.0);
    }
    if let Some(gk) = &pgrads.conv_kernel {
        for (tap, g) in gk.iter().enumerate() {
            bundle.add_grad(GradKey::ConvPoolKernel(tap), g, 1.0);
        }
    }
    if let Some(gb) = &pgrads.conv_bias {
        bundle.add_row_grad(GradKey::ConvPoolBias, gb, 1.0);
    }
    Ok(())
}

/// Pooled embeddings as they enter the support objectives: renormalized to
/// unit length when the batch is normalized, as-is otherwise. Returns the
/// effective embedding and the pre-normalization norm.
fn effective_pooled(batch: &EmbeddingBatch, pooled: &PooledEmbedding) -> Result<(Vec<f64>, f64)> {
    let norm = l2_norm(&pooled.w_bar);
    if batch.is_normalized() {
        if norm <= 1e-12 {
            return Err(Error::DegenerateInput(
                "pooled embedding has near-zero norm; cannot renormalize".into(),
            ));
        }
        Ok((pooled.w_bar.iter().map(|v| v / norm).collect(), norm))
    } else {
        Ok((pooled.w_bar.clone(), norm))
    }
}

/// Support-set contrastive objective: each pooled embedding against its own
/// text versus every other text in the batch.
pub fn support_contrastive_loss(
    pooled: &[SupportPooling],
    batch: &EmbeddingBatch,
    spec: &SupportSetSpec,
    weights: &LossWeights,
) -> Result<LossBundle> {
    weights.validate()?;
    if pooled.len() != batch.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} pooled embeddings for a batch of {}",
            pooled.len(),
            batch.len()
        )));
    }
    let tau = weights.tau;
    let b = batch.len();
    let mut bundle = LossBundle::zero();
    for i in 0..b {
        let (u, prenorm) = effective_pooled(batch, &pooled[i].pooled)?;
        let logits: Vec<f64> =
            (0..b).map(|j| dot(&u, &batch.item(j).text) / tau).collect();
        let lse = log_sum_exp(&logits)?;
        bundle.value += lse - logits[i];

        let mut du = vec![0.0; batch.dim()];
        for j in 0..b {
            let mut coeff = (logits[j] - lse).exp();
            if j == i {
                coeff -= 1.0;
            }
            if coeff == 0.0 {
                continue;
            }
            let yj = &batch.item(j).text;
            for d in 0..batch.dim() {
                du[d] += coeff * yj[d] / tau;
            }
            let gy: Vec<f64> = u.iter().map(|v| coeff * v / tau).collect();
            bundle.add_row_grad(GradKey::TextEmbedding(j), &gy, 1.0);
        }
        let dw = if batch.is_normalized() {
            normalize_backward(&du, &u, prenorm)
        } else {
            du
        };
        chain_through_pooling(&mut bundle, batch, spec, i, &pooled[i], &dw)?;
    }
    bundle.check_finite("support contrastive")?;
    Ok(bundle)
}

/// Caption objective: mean per-token negative log-likelihood of each
/// sentence under the bag-of-words head, averaged over the batch.
/// Gradients stop at the contexts and the decoder; callers chain contexts
/// onward.
pub fn caption_loss(
    contexts: &[CaptionContext],
    sentences: &[TokenSequence],
    decoder: &DecoderParams,
) -> Result<LossBundle> {
    if contexts.len() != sentences.len() || contexts.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} contexts for {} sentences",
            contexts.len(),
            sentences.len()
        )));
    }
    let b = contexts.len();
    let vocab = decoder.vocab_size();
    let mut bundle = LossBundle::zero();
    let mut grad_w = Mat::zeros(vocab, decoder.output.in_dim());
    let mut grad_b = vec![0.0; vocab];
    for (i, (ctx, sentence)) in contexts.iter().zip(sentences).enumerate() {
        sentence.check_vocab(vocab)?;
        let logits = decoder.output.apply(&ctx.w)?;
        let lse = log_sum_exp(&logits)?;
        let m = sentence.len() as f64;
        let nll: f64 = sentence.tokens().iter().map(|&t| lse - logits[t]).sum();
        bundle.value += nll / (m * b as f64);

        let mut counts = vec![0.0; vocab];
        for &t in sentence.tokens() {
            counts[t] += 1.0;
        }
        let dlogits: Vec<f64> = (0..vocab)
            .map(|v| ((logits[v] - lse).exp() - counts[v] / m) / b as f64)
            .collect();
        let dw = decoder.output.backward(&ctx.w, &dlogits, &mut grad_w, &mut grad_b);
        bundle.add_row_grad(GradKey::CaptionContext(i), &dw, 1.0);
    }
    bundle.add_grad(GradKey::DecoderWeight, &grad_w, 1.0);
    bundle.add_row_grad(GradKey::DecoderBias, &grad_b, 1.0);
    bundle.check_finite("caption")?;
    Ok(bundle)
}

/// Build the generation context for one batch item.
///
/// `GtConcat` averages the GT clip embeddings and applies the
/// transformation layer; `SupportPooled` uses the pooled embedding as-is.
pub fn make_caption_context(
    item: &BatchItem,
    mode: ContextSource,
    pooled: Option<&PooledEmbedding>,
    caption_map: &Affine,
) -> Result<CaptionContext> {
    match mode {
        ContextSource::GtConcat => {
            let dim = item.clips.cols();
            let mut basis = vec![0.0; dim];
            for t in item.gt.clips() {
                let row = item.clips.row(t);
                for d in 0..dim {
                    basis[d] += row[d];
                }
            }
            let len = item.gt.len() as f64;
            basis.iter_mut().for_each(|v| *v /= len);
            let w = caption_map.apply(&basis)?;
            Ok(CaptionContext { w, source: ContextSource::GtConcat, basis: Some(basis) })
        }
        ContextSource::SupportPooled => {
            let pooled = pooled.ok_or_else(|| {
                Error::InvalidParameter("support-pooled context requires a pooled embedding".into())
            })?;
            Ok(CaptionContext {
                w: pooled.w_bar.clone(),
                source: ContextSource::SupportPooled,
                basis: None,
            })
        }
    }
}

/// Caption objective over GT-clip contexts, with gradients chained back to
/// the clip embeddings and the transformation layer.
pub fn gt_caption_loss(
    batch: &EmbeddingBatch,
    sentences: &[TokenSequence],
    caption_map: &Affine,
    decoder: &DecoderParams,
) -> Result<LossBundle> {
    let contexts: Vec<CaptionContext> = batch
        .items()
        .iter()
        .map(|item| make_caption_context(item, ContextSource::GtConcat, None, caption_map))
        .collect::<Result<_>>()?;
    let mut bundle = caption_loss(&contexts, sentences, decoder)?;

    let mut grad_w = Mat::zeros(caption_map.out_dim(), caption_map.in_dim());
    let mut grad_b = vec![0.0; caption_map.out_dim()];
    for (i, ctx) in contexts.iter().enumerate() {
        let Some(dctx) = bundle.grads.remove(&GradKey::CaptionContext(i)) else {
            continue;
        };
        let basis = ctx.basis.as_ref().expect("gt context always has a basis");
        let dbasis = caption_map.backward(basis, dctx.row(0), &mut grad_w, &mut grad_b);

        let item = batch.item(i);
        let mut gx = Mat::zeros(item.clips.rows(), batch.dim());
        let scale = 1.0 / item.gt.len() as f64;
        for t in item.gt.clips() {
            let row = gx.row_mut(t);
            for d in 0..batch.dim() {
                row[d] = scale * dbasis[d];
            }
        }
        bundle.add_grad(GradKey::ClipEmbeddings(i), &gx, 1.0);
    }
    bundle.add_grad(GradKey::CaptionMapWeight, &grad_w, 1.0);
    bundle.add_row_grad(GradKey::CaptionMapBias, &grad_b, 1.0);
    bundle.check_finite("gt caption")?;
    Ok(bundle)
}

/// Caption objective over support-pooled contexts, with gradients chained
/// through the pooling functions.
pub fn support_caption_loss(
    batch: &EmbeddingBatch,
    pooled: &[SupportPooling],
    spec: &SupportSetSpec,
    sentences: &[TokenSequence],
    decoder: &DecoderParams,
) -> Result<LossBundle> {
    if pooled.len() != batch.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} pooled embeddings for a batch of {}",
            pooled.len(),
            batch.len()
        )));
    }
    let identity = Affine::identity(batch.dim());
    let contexts: Vec<CaptionContext> = batch
        .items()
        .iter()
        .zip(pooled)
        .map(|(item, sp)| {
            make_caption_context(item, ContextSource::SupportPooled, Some(&sp.pooled), &identity)
        })
        .collect::<Result<_>>()?;
    let mut bundle = caption_loss(&contexts, sentences, decoder)?;
    for i in 0..batch.len() {
        let Some(dctx) = bundle.grads.remove(&GradKey::CaptionContext(i)) else {
            continue;
        };
        chain_through_pooling(&mut bundle, batch, spec, i, &pooled[i], dctx.row(0))?;
    }
    bundle.check_finite("support caption")?;
    Ok(bundle)
}

/// Weighted combination `L_vg + lambda1 * contrast + lambda2 * caption`.
/// A weight of exactly zero skips its term entirely, so a disabled
/// objective leaves no trace in either the value or the gradient keys.
pub fn total_loss(
    l_vg: &LossBundle,
    l_contrast: &LossBundle,
    l_caption: &LossBundle,
    weights: &LossWeights,
) -> LossBundle {
    let mut total = l_vg.clone();
    if weights.lambda1 != 0.0 {
        total.accumulate(l_contrast, weights.lambda1);
    }
    if weights.lambda2 != 0.0 {
        total.accumulate(l_caption, weights.lambda2);
    }
    total
}

/// GT-clip supervision: the contrastive and caption objectives over GT
/// clips, summed unweighted.
pub fn gt_supervision_suite(
    batch: &EmbeddingBatch,
    sentences: &[TokenSequence],
    caption_map: &Affine,
    decoder: &DecoderParams,
    weights: &LossWeights,
) -> Result<LossBundle> {
    let contrastive = gt_clip_contrastive_loss(batch, weights)?;
    let caption = gt_caption_loss(batch, sentences, caption_map, decoder)?;
    let mut suite = contrastive;
    suite.accumulate(&caption, 1.0);
    Ok(suite)
}
