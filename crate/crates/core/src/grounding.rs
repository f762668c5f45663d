//! Desk-scale grounding substrate: a synthetic planted-entity dataset, a
//! minimal proposal grounder providing the base grounding loss, and the
//! usual temporal evaluation metrics (IoU, NMS, Rank n@m).
//!
//! The synthetic world plants shared entity vectors in every clip of a
//! video and an action vector only inside the ground-truth span, so the
//! "same entities appear inside and outside the ground truth" situation
//! the support-set objectives are built for is reproducible on demand.

use rand::seq::index::sample as index_sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, sigmoid, softplus, Affine, Mat};
use crate::objectives::{EmbeddingBatch, GradKey, LossBundle};
use crate::rng::{derived_rng, stream};
use crate::supportset::GroundTruthInterval;
use crate::encoders::TokenSequence;

/// One video/text pair with raw features, tokens and the annotated span.
#[derive(Clone, Debug)]
pub struct GroundingSample {
    pub video_id: String,
    /// Clip features, T x D_v.
    pub features: Mat,
    pub tokens: TokenSequence,
    /// Annotated span in seconds.
    pub gt_seconds: (f64, f64),
    pub clip_duration_s: f64,
    /// The span converted to clip indices.
    pub gt: GroundTruthInterval,
}

impl GroundingSample {
    /// Seconds -> clips: start = floor(t_s/dur), end = ceil(t_e/dur) - 1,
    /// both clamped to the video; the clip interval covers the annotation.
    pub fn new(
        video_id: String,
        features: Mat,
        tokens: TokenSequence,
        gt_seconds: (f64, f64),
        clip_duration_s: f64,
    ) -> Result<Self> {
        let t = features.rows();
        let horizon = t as f64 * clip_duration_s;
        let (ts, te) = gt_seconds;
        if !(ts >= 0.0 && ts < te && te <= horizon + 1e-9) {
            return Err(Error::Data(format!(
                "{video_id}: span [{ts}, {te}]s outside [0, {horizon}]s"
            )));
        }
        let start = ((ts / clip_duration_s).floor() as usize).min(t - 1);
        let end_raw = (te / clip_duration_s).ceil() as usize;
        let end = end_raw.saturating_sub(1).clamp(start, t - 1);
        let gt = GroundTruthInterval::new(start, end, t)?;
        Ok(GroundingSample { video_id, features, tokens, gt_seconds, clip_duration_s, gt })
    }

    pub fn n_clips(&self) -> usize {
        self.features.rows()
    }

    pub fn duration_s(&self) -> f64 {
        self.n_clips() as f64 * self.clip_duration_s
    }
}

/// A candidate span in clip indices with its score.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub start_clip: usize,
    pub end_clip: usize,
    pub score: f64,
}

impl Proposal {
    /// The proposal as a half-open interval in seconds.
    pub fn seconds(&self, clip_duration_s: f64) -> (f64, f64) {
        (
            self.start_clip as f64 * clip_duration_s,
            (self.end_clip + 1) as f64 * clip_duration_s,
        )
    }
}

/// Configuration of the synthetic planted-entity world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorldConfig {
    pub n_entities: usize,
    pub n_actions: usize,
    pub dim_video: usize,
    pub dim_text: usize,
    pub t_clips: usize,
    pub vocab_size: usize,
    pub noise_sigma: f64,
    pub entities_per_video: usize,
    pub gt_fraction: (f64, f64),
    pub clip_duration_s: f64,
}

impl SyntheticWorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_entities == 0
            || self.n_actions == 0
            || self.dim_video == 0
            || self.t_clips == 0
            || self.entities_per_video == 0
        {
            return Err(Error::InvalidParameter("synthetic world counts must be positive".into()));
        }
        if self.entities_per_video > self.n_entities {
            return Err(Error::InvalidParameter(format!(
                "entities_per_video {} exceeds n_entities {}",
                self.entities_per_video, self.n_entities
            )));
        }
        if self.vocab_size < self.n_entities + self.n_actions {
            return Err(Error::InvalidParameter(format!(
                "vocab_size {} cannot hold {} entities + {} actions",
                self.vocab_size, self.n_entities, self.n_actions
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidParameter("noise_sigma must be >= 0".into()));
        }
        let (lo, hi) = self.gt_fraction;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "gt_fraction ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1"
            )));
        }
        if self.clip_duration_s <= 0.0 {
            return Err(Error::InvalidParameter("clip_duration_s must be > 0".into()));
        }
        Ok(())
    }

    /// Token id of an action; entities use their own index.
    pub fn action_token(&self, action: usize) -> usize {
        self.n_entities + action
    }
}

/// The fixed random unit vectors entities and actions are planted with.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub entity_vectors: Mat,
    pub action_vectors: Mat,
}

fn random_unit_vector(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = crate::numerics::l2_norm(&v);
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// The world vectors for a seed; depends only on (cfg dims, seed).
pub fn synthesize_world(cfg: &SyntheticWorldConfig, seed: u64) -> Result<SyntheticWorld> {
    cfg.validate()?;
    let mut rng = derived_rng(seed, &[stream::WORLD]);
    let mut entity_vectors = Mat::zeros(cfg.n_entities, cfg.dim_video);
    for e in 0..cfg.n_entities {
        entity_vectors.row_mut(e).copy_from_slice(&random_unit_vector(cfg.dim_video, &mut rng));
    }
    let mut action_vectors = Mat::zeros(cfg.n_actions, cfg.dim_video);
    for a in 0..cfg.n_actions {
        action_vectors.row_mut(a).copy_from_slice(&random_unit_vector(cfg.dim_video, &mut rng));
    }
    Ok(SyntheticWorld { entity_vectors, action_vectors })
}

/// Generate `n` samples. Every clip carries the sum of the sampled entity
/// vectors plus Gaussian noise; clips inside the ground truth additionally
/// carry the action vector. The token sequence lists the entity tokens
/// followed by the action token. Deterministic in (cfg, seed, index).
pub fn generate_synthetic_dataset(
    cfg: &SyntheticWorldConfig,
    seed: u64,
    n: usize,
) -> Result<Vec<GroundingSample>> {
    let world = synthesize_world(cfg, seed)?;
    (0..n).map(|i| generate_sample(cfg, &world, seed, i as u64)).collect()
}

fn generate_sample(
    cfg: &SyntheticWorldConfig,
    world: &SyntheticWorld,
    seed: u64,
    index: u64,
) -> Result<GroundingSample> {
    let mut rng = derived_rng(seed, &[stream::SAMPLE, index]);
    let t = cfg.t_clips;

    let entities = index_sample(&mut rng, cfg.n_entities, cfg.entities_per_video).into_vec();
    let action = rng.random_range(0..cfg.n_actions);
    let (lo, hi) = cfg.gt_fraction;
    let frac = if lo < hi { rng.random_range(lo..hi) } else { lo };
    let gt_len = ((frac * t as f64).round() as usize).clamp(1, t);
    let gt_start = if gt_len < t { rng.random_range(0..=t - gt_len) } else { 0 };
    let gt_end = gt_start + gt_len - 1;

    let mut features = Mat::zeros(t, cfg.dim_video);
    for clip in 0..t {
        let row = features.row_mut(clip);
        for &e in &entities {
            let ev = world.entity_vectors.row(e);
            for d in 0..cfg.dim_video {
                row[d] += ev[d];
            }
        }
        if clip >= gt_start && clip <= gt_end {
            let av = world.action_vectors.row(action);
            for d in 0..cfg.dim_video {
                row[d] += av[d];
            }
        }
        if cfg.noise_sigma > 0.0 {
            for d in 0..cfg.dim_video {
                let z: f64 = StandardNormal.sample(&mut rng);
                row[d] += cfg.noise_sigma * z;
            }
        }
    }

    let mut token_ids = entities.clone();
    token_ids.push(cfg.action_token(action));
    let tokens = TokenSequence::new(token_ids)?;
    let gt_seconds = (
        gt_start as f64 * cfg.clip_duration_s,
        (gt_end + 1) as f64 * cfg.clip_duration_s,
    );
    GroundingSample::new(format!("synthetic-{index}"), features, tokens, gt_seconds, cfg.clip_duration_s)
}

/// All (start, end) spans with 0 <= start <= end < t; count t(t+1)/2.
pub fn enumerate_proposals(t: usize) -> Vec<Proposal> {
    let mut out = Vec::with_capacity(t * (t + 1) / 2);
    for start in 0..t {
        for end in start..t {
            out.push(Proposal { start_clip: start, end_clip: end, score: 0.0 });
        }
    }
    out
}

/// The minimal proposal grounder: the proposal embedding is the mean of
/// its clips, fused with the text by a Hadamard product, scored by an
/// affine map and a sigmoid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrounderParams {
    /// D -> 1 scoring head over the fused embedding.
    pub fuse: Affine,
}

impl GrounderParams {
    pub fn init(dim: usize, rng: &mut impl Rng) -> Self {
        GrounderParams { fuse: crate::encoders::init_affine(1, dim, rng) }
    }
}

/// Mean of the clip rows over [start, end], and per-proposal fused logits.
fn proposal_logit(
    clips: &Mat,
    text: &[f64],
    grounder: &GrounderParams,
    prop: &Proposal,
) -> (Vec<f64>, Vec<f64>, f64) {
    let dim = clips.cols();
    let mut mean = vec![0.0; dim];
    for t in prop.start_clip..=prop.end_clip {
        let row = clips.row(t);
        for d in 0..dim {
            mean[d] += row[d];
        }
    }
    let len = (prop.end_clip - prop.start_clip + 1) as f64;
    mean.iter_mut().for_each(|v| *v /= len);
    let fused: Vec<f64> = mean.iter().zip(text).map(|(m, y)| m * y).collect();
    let logit = dot(grounder.fuse.weight.row(0), &fused) + grounder.fuse.bias[0];
    (mean, fused, logit)
}

/// Score every proposal of a video against a text embedding.
pub fn score_proposals(clips: &Mat, text: &[f64], grounder: &GrounderParams) -> Result<Vec<Proposal>> {
    if text.len() != clips.cols() || grounder.fuse.in_dim() != clips.cols() {
        return Err(Error::ShapeMismatch("grounder dims do not match embeddings".into()));
    }
    let mut proposals = enumerate_proposals(clips.rows());
    for p in proposals.iter_mut() {
        let (_, _, logit) = proposal_logit(clips, text, grounder, p);
        p.score = sigmoid(logit);
    }
    Ok(proposals)
}

/// Regression target for a proposal: its IoU with the ground truth,
/// linearly rescaled so IoU 0.5 maps to 0 and IoU 1.0 maps to 1.
pub fn proposal_target(prop: &Proposal, gt: &GroundTruthInterval) -> f64 {
    let iou = temporal_iou(
        (prop.start_clip as f64, prop.end_clip as f64 + 1.0),
        (gt.start_clip() as f64, gt.end_clip() as f64 + 1.0),
    );
    ((iou - 0.5) / 0.5).clamp(0.0, 1.0)
}

/// Binary cross entropy of every proposal's score against its rescaled-IoU
/// target, averaged per item and over the batch, with gradients for the
/// clip/text embeddings and the grounder head.
pub fn grounding_loss(batch: &EmbeddingBatch, grounder: &GrounderParams) -> Result<LossBundle> {
    let b = batch.len();
    let dim = batch.dim();
    if grounder.fuse.in_dim() != dim {
        return Err(Error::ShapeMismatch("grounder head does not match embedding dim".into()));
    }
    let mut bundle = LossBundle::zero();
    let mut grad_w = Mat::zeros(1, dim);
    let mut grad_b = vec![0.0; 1];
    for i in 0..b {
        let item = batch.item(i);
        let proposals = enumerate_proposals(item.clips.rows());
        let n_props = proposals.len() as f64;
        let item_scale = 1.0 / (n_props * b as f64);
        let mut gx = Mat::zeros(item.clips.rows(), dim);
        let mut gy = vec![0.0; dim];
        for prop in &proposals {
            let (mean, fused, logit) = proposal_logit(&item.clips, &item.text, grounder, prop);
            let target = proposal_target(prop, &item.gt);
            // bce(logit, target) = softplus(logit) - target * logit
            bundle.value += item_scale * (softplus(logit) - target * logit);
            let dlogit = item_scale * (sigmoid(logit) - target);

            grad_b[0] += dlogit;
            let w_row = grounder.fuse.weight.row(0);
            let gw_row = grad_w.row_mut(0);
            let len = (prop.end_clip - prop.start_clip + 1) as f64;
            for d in 0..dim {
                gw_row[d] += dlogit * fused[d];
                // through the Hadamard product
                let dfused = dlogit * w_row[d];
                gy[d] += dfused * mean[d];
                let dmean = dfused * item.text[d];
                for t in prop.start_clip..=prop.end_clip {
                    gx.row_mut(t)[d] += dmean / len;
                }
            }
        }
        bundle.add_grad(GradKey::ClipEmbeddings(i), &gx, 1.0);
        bundle.add_row_grad(GradKey::TextEmbedding(i), &gy, 1.0);
    }
    bundle.add_grad(GradKey::GrounderWeight, &grad_w, 1.0);
    bundle.add_row_grad(GradKey::GrounderBias, &grad_b, 1.0);
    bundle.check_finite("grounding")?;
    Ok(bundle)
}

/// Interval IoU: |a n b| / |a u b|, zero for disjoint intervals or a
/// zero-length union. Intervals are (start, end) with start <= end in any
/// consistent unit.
pub fn temporal_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy non-maximum suppression: repeatedly keep the highest-scoring
/// remaining proposal and drop everything with IoU >= threshold against a
/// kept one. Ties break by earlier start, then shorter span, then input
/// order.
pub fn nms(proposals: &[Proposal], threshold: f64) -> Result<Vec<Proposal>> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "nms threshold must be in (0, 1], got {threshold}"
        )));
    }
    let mut order: Vec<usize> = (0..proposals.len()).collect();
    order.sort_by(|&a, &b| {
        let pa = &proposals[a];
        let pb = &proposals[b];
        pb.score
            .partial_cmp(&pa.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(pa.start_clip.cmp(&pb.start_clip))
            .then((pa.end_clip - pa.start_clip).cmp(&(pb.end_clip - pb.start_clip)))
            .then(a.cmp(&b))
    });
    let mut kept: Vec<Proposal> = Vec::new();
    for idx in order {
        let cand = proposals[idx];
        let span = (cand.start_clip as f64, cand.end_clip as f64 + 1.0);
        let overlaps = kept.iter().any(|k| {
            temporal_iou(span, (k.start_clip as f64, k.end_clip as f64 + 1.0)) >= threshold
        });
        if !overlaps {
            kept.push(cand);
        }
    }
    Ok(kept)
}

/// Whether any of the top-n ranked predictions reaches IoU >= m with the
/// ground truth. Predictions must already be sorted by score descending.
pub fn rank_n_at_m(predictions: &[(f64, f64)], gt: (f64, f64), n: usize, m: f64) -> Result<bool> {
    if n < 1 {
        return Err(Error::InvalidParameter("rank n must be >= 1".into()));
    }
    if !(m > 0.0 && m <= 1.0) {
        return Err(Error::InvalidParameter(format!("rank m must be in (0, 1], got {m}")));
    }
    Ok(predictions.iter().take(n).any(|p| temporal_iou(*p, gt) >= m))
}

/// Mean of `rank_n_at_m` over a set of queries.
pub fn rank_rate(per_query: &[(Vec<(f64, f64)>, (f64, f64))], n: usize, m: f64) -> Result<f64> {
    if per_query.is_empty() {
        return Err(Error::InvalidParameter("rank rate over zero queries".into()));
    }
    let mut hits = 0usize;
    for (preds, gt) in per_query {
        if rank_n_at_m(preds, *gt, n, m)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / per_query.len() as f64)
}

/// Fraction of matched pairs whose similarity reaches each threshold.
pub fn recall_high_related(similarities: &[f64], thresholds: &[f64]) -> Vec<f64> {
    thresholds
        .iter()
        .map(|&thr| {
            if similarities.is_empty() {
                0.0
            } else {
                similarities.iter().filter(|&&s| s >= thr).count() as f64 / similarities.len() as f64
            }
        })
        .collect()
}

/// Default similarity thresholds for the recall curves.
pub const RECALL_THRESHOLDS: [f64; 3] = [0.02, 0.04, 0.06];

/// Evaluation artifacts for one model/dataset pair.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    /// One row per (n, m): the Rank n@m rate.
    pub rank_table: Vec<RankCell>,
    /// Recall-at-similarity-threshold per variant.
    pub recall_curves: Vec<RecallCurve>,
    /// 2-D histogram of successful predictions over (start fraction,
    /// duration fraction), row-major bins.
    pub interval_histogram: IntervalHistogram,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankCell {
    pub n: usize,
    pub m: f64,
    pub rate: f64,
}

/// Which clips contribute to the video/text similarity of a pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SimilarityVariant {
    /// Mean over all clips.
    Video,
    /// Mean over ground-truth clips.
    GroundTruth,
}

impl SimilarityVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            SimilarityVariant::Video => "video",
            SimilarityVariant::GroundTruth => "gt",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecallCurve {
    pub variant: String,
    pub thresholds: Vec<f64>,
    pub recalls: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IntervalHistogram {
    pub bins_per_axis: usize,
    /// counts[start_bin * bins + duration_bin]
    pub counts: Vec<u64>,
}

impl IntervalHistogram {
    pub fn new(bins_per_axis: usize) -> Self {
        IntervalHistogram { bins_per_axis, counts: vec![0; bins_per_axis * bins_per_axis] }
    }

    /// Record one successful prediction given in fractions of the video.
    pub fn record(&mut self, start_fraction: f64, duration_fraction: f64) {
        let clamp_bin = |f: f64| -> usize {
            ((f * self.bins_per_axis as f64) as usize).min(self.bins_per_axis - 1)
        };
        let s = clamp_bin(start_fraction.clamp(0.0, 1.0));
        let d = clamp_bin(duration_fraction.clamp(0.0, 1.0));
        self.counts[s * self.bins_per_axis + d] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}
