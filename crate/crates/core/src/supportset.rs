//! Support-set construction and pooling.
//!
//! A support set is the subset of a video's clips that gets pooled into a
//! single query-conditioned embedding w. Three constructions (whole video,
//! ground-truth clips only, background clips only) cross six pooling
//! functions (cross-attention, self-attention, fully-connected,
//! convolution, max-pool, average-pool) to form the 3x6 ablation grid.
//!
//! Every pooling function has a matching `*_backward` that propagates an
//! upstream gradient dL/dw to the clips (and, for cross-attention, to the
//! query embedding; for FC/Conv, to the layer parameters). These are the
//! chain-rule links the contrastive and caption objectives use.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, l2_norm, stable_softmax, Affine, Mat, ProbabilityVec};

/// Inclusive clip-index interval [start_clip, end_clip].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthInterval {
    start_clip: usize,
    end_clip: usize,
}

impl GroundTruthInterval {
    pub fn new(start_clip: usize, end_clip: usize, t: usize) -> Result<Self> {
        if start_clip > end_clip || end_clip >= t {
            return Err(Error::Data(format!(
                "ground-truth interval [{start_clip}, {end_clip}] invalid for {t} clips"
            )));
        }
        Ok(GroundTruthInterval { start_clip, end_clip })
    }

    pub fn start_clip(&self) -> usize {
        self.start_clip
    }

    pub fn end_clip(&self) -> usize {
        self.end_clip
    }

    pub fn len(&self) -> usize {
        self.end_clip - self.start_clip + 1
    }

    pub fn is_empty(&self) -> bool {
        false // start <= end is enforced at construction
    }

    pub fn contains(&self, clip: usize) -> bool {
        clip >= self.start_clip && clip <= self.end_clip
    }

    pub fn clips(&self) -> impl Iterator<Item = usize> {
        self.start_clip..=self.end_clip
    }
}

/// Which clips of a video form the support set for its text query.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SupportConstruction {
    /// All clips in the video (`v-ss`).
    Video,
    /// Ground-truth clips only (`gt-ss`).
    GroundTruth,
    /// Background clips only (`non-gt-ss`).
    Background,
}

impl SupportConstruction {
    pub const ALL: [SupportConstruction; 3] =
        [SupportConstruction::Video, SupportConstruction::GroundTruth, SupportConstruction::Background];

    pub fn as_str(&self) -> &'static str {
        match self {
            SupportConstruction::Video => "v-ss",
            SupportConstruction::GroundTruth => "gt-ss",
            SupportConstruction::Background => "non-gt-ss",
        }
    }
}

impl std::str::FromStr for SupportConstruction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "v-ss" => Ok(SupportConstruction::Video),
            "gt-ss" => Ok(SupportConstruction::GroundTruth),
            "non-gt-ss" => Ok(SupportConstruction::Background),
            other => Err(Error::InvalidParameter(format!(
                "unknown construction '{other}' (expected v-ss, gt-ss or non-gt-ss)"
            ))),
        }
    }
}

impl std::fmt::Display for SupportConstruction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How the support set is pooled to a single embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolingMethod {
    CrossAttention,
    SelfAttention,
    FullyConnected,
    Conv,
    MaxPool,
    AvgPool,
}

impl PoolingMethod {
    pub const ALL: [PoolingMethod; 6] = [
        PoolingMethod::CrossAttention,
        PoolingMethod::SelfAttention,
        PoolingMethod::FullyConnected,
        PoolingMethod::Conv,
        PoolingMethod::MaxPool,
        PoolingMethod::AvgPool,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PoolingMethod::CrossAttention => "ca",
            PoolingMethod::SelfAttention => "sa",
            PoolingMethod::FullyConnected => "fc",
            PoolingMethod::Conv => "conv",
            PoolingMethod::MaxPool => "mp",
            PoolingMethod::AvgPool => "ap",
        }
    }

    /// FC and Conv carry trainable parameters.
    pub fn is_parametric(&self) -> bool {
        matches!(self, PoolingMethod::FullyConnected | PoolingMethod::Conv)
    }
}

impl std::str::FromStr for PoolingMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ca" => Ok(PoolingMethod::CrossAttention),
            "sa" => Ok(PoolingMethod::SelfAttention),
            "fc" => Ok(PoolingMethod::FullyConnected),
            "conv" => Ok(PoolingMethod::Conv),
            "mp" => Ok(PoolingMethod::MaxPool),
            "ap" => Ok(PoolingMethod::AvgPool),
            other => Err(Error::InvalidParameter(format!(
                "unknown pooling method '{other}' (expected ca, sa, fc, conv, mp or ap)"
            ))),
        }
    }
}

impl std::fmt::Display for PoolingMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An ordered set of clip indices into one video's embedding matrix.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportSet {
    clip_indices: Vec<usize>,
    construction: SupportConstruction,
}

impl SupportSet {
    pub fn clip_indices(&self) -> &[usize] {
        &self.clip_indices
    }

    pub fn construction(&self) -> SupportConstruction {
        self.construction
    }

    pub fn len(&self) -> usize {
        self.clip_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clip_indices.is_empty()
    }
}

/// Select the support clips for one video.
///
/// The background construction fails when the ground truth covers the whole
/// video: an empty support set would otherwise be silently substituted and
/// corrupt any ablation built on top.
pub fn build_support_set(
    t: usize,
    gt: &GroundTruthInterval,
    construction: SupportConstruction,
) -> Result<SupportSet> {
    if t == 0 {
        return Err(Error::InvalidParameter("video with zero clips".into()));
    }
    if gt.end_clip() >= t {
        return Err(Error::Data(format!(
            "ground truth ends at clip {} but video has {} clips",
            gt.end_clip(),
            t
        )));
    }
    let clip_indices: Vec<usize> = match construction {
        SupportConstruction::Video => (0..t).collect(),
        SupportConstruction::GroundTruth => gt.clips().collect(),
        SupportConstruction::Background => (0..t).filter(|c| !gt.contains(*c)).collect(),
    };
    if clip_indices.is_empty() {
        return Err(Error::DegenerateInput(
            "non-gt-ss support set is empty: ground truth covers the whole video".into(),
        ));
    }
    Ok(SupportSet { clip_indices, construction })
}

/// A support set pooled down to one embedding. `attention` is present for
/// the two attention poolings and satisfies w = sum_t attention_t * x_t.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PooledEmbedding {
    pub w_bar: Vec<f64>,
    pub attention: Option<ProbabilityVec>,
}

/// Intermediates of self-attention pooling: the pairwise similarity matrix
/// Q (clips x clips, scaled by 1/tau) and its row sums z.
#[derive(Clone, Debug)]
pub struct SelfAttentionIntermediate {
    pub q: Mat,
    pub z: Vec<f64>,
}

/// Convolution over the clip axis: width-3 kernel, stride 1, same padding,
/// then a mean over the true-length positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvParams {
    /// Three taps, each mapping a D-dim clip row to D output channels.
    pub kernel: Vec<Mat>,
    pub bias: Vec<f64>,
}

impl ConvParams {
    pub fn zeros(dim: usize) -> Self {
        ConvParams { kernel: vec![Mat::zeros(dim, dim); 3], bias: vec![0.0; dim] }
    }
}

/// Parameters selecting and configuring a pooling function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolingParams {
    pub method: PoolingMethod,
    /// Temperature for the attention poolings.
    pub tau: f64,
    /// Fixed clip count FC/Conv pad or truncate to.
    pub t_max: usize,
    pub fc: Option<Affine>,
    pub conv: Option<ConvParams>,
}

impl PoolingParams {
    pub fn non_parametric(method: PoolingMethod, tau: f64) -> Self {
        PoolingParams { method, tau, t_max: 0, fc: None, conv: None }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        match self.method {
            PoolingMethod::CrossAttention | PoolingMethod::SelfAttention => {
                if self.tau <= 0.0 || !self.tau.is_finite() {
                    return Err(Error::InvalidParameter(format!(
                        "attention pooling needs tau > 0, got {}",
                        self.tau
                    )));
                }
            }
            PoolingMethod::FullyConnected => {
                let fc = self
                    .fc
                    .as_ref()
                    .ok_or_else(|| Error::InvalidParameter("fc pooling without weights".into()))?;
                if self.t_max == 0 {
                    return Err(Error::InvalidParameter("fc pooling needs t_max >= 1".into()));
                }
                if fc.out_dim() != dim || fc.in_dim() != self.t_max * dim {
                    return Err(Error::ShapeMismatch(format!(
                        "fc pooling weights are {}x{}, expected {}x{}",
                        fc.out_dim(),
                        fc.in_dim(),
                        dim,
                        self.t_max * dim
                    )));
                }
            }
            PoolingMethod::Conv => {
                let conv = self
                    .conv
                    .as_ref()
                    .ok_or_else(|| Error::InvalidParameter("conv pooling without kernel".into()))?;
                if self.t_max == 0 {
                    return Err(Error::InvalidParameter("conv pooling needs t_max >= 1".into()));
                }
                if conv.kernel.len() != 3
                    || conv.kernel.iter().any(|k| k.rows() != dim || k.cols() != dim)
                    || conv.bias.len() != dim
                {
                    return Err(Error::ShapeMismatch(
                        "conv pooling kernel must be 3 taps of DxD plus a D bias".into(),
                    ));
                }
            }
            PoolingMethod::MaxPool | PoolingMethod::AvgPool => {}
        }
        Ok(())
    }
}

/// One cell of the construction x pooling grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportSetSpec {
    pub construction: SupportConstruction,
    pub params: PoolingParams,
}

/// Gradients flowing out of a pooling function.
#[derive(Clone, Debug)]
pub struct PoolGrads {
    /// dL/dx_t, aligned with the input clip order.
    pub clips: Vec<Vec<f64>>,
    /// dL/dy; present only for cross-attention.
    pub y: Option<Vec<f64>>,
    pub fc_weight: Option<Mat>,
    pub fc_bias: Option<Vec<f64>>,
    pub conv_kernel: Option<Vec<Mat>>,
    pub conv_bias: Option<Vec<f64>>,
}

impl PoolGrads {
    fn zeros(n_clips: usize, dim: usize) -> Self {
        PoolGrads {
            clips: vec![vec![0.0; dim]; n_clips],
            y: None,
            fc_weight: None,
            fc_bias: None,
            conv_kernel: None,
            conv_bias: None,
        }
    }
}

fn require_clips(clips: &[&[f64]]) -> Result<usize> {
    if clips.is_empty() {
        return Err(Error::DegenerateInput("pooling over zero clips".into()));
    }
    let dim = clips[0].len();
    if clips.iter().any(|c| c.len() != dim) {
        return Err(Error::ShapeMismatch("clips of unequal dimension".into()));
    }
    Ok(dim)
}

/// Attention over clips from their cosine similarity to the query, then a
/// weighted average: a_t = softmax_t(cos(x_t, y)/tau), w = sum_t a_t x_t.
pub fn pool_cross_attention(clips: &[&[f64]], y: &[f64], tau: f64) -> Result<PooledEmbedding> {
    let dim = require_clips(clips)?;
    if y.len() != dim {
        return Err(Error::ShapeMismatch(format!("query dim {} vs clip dim {}", y.len(), dim)));
    }
    let mut cosines = Vec::with_capacity(clips.len());
    for c in clips {
        cosines.push(crate::numerics::cosine_similarity(c, y)?);
    }
    let attention = stable_softmax(&cosines, tau)?;
    let w_bar = weighted_average(clips, attention.as_slice());
    Ok(PooledEmbedding { w_bar, attention: Some(attention) })
}

/// Backward of `pool_cross_attention`: returns dL/dclips and dL/dy for an
/// upstream dL/dw.
pub fn cross_attention_backward(
    clips: &[&[f64]],
    y: &[f64],
    tau: f64,
    attention: &[f64],
    upstream: &[f64],
) -> Result<PoolGrads> {
    let dim = require_clips(clips)?;
    let n = clips.len();
    let ny = l2_norm(y);
    if ny <= 0.0 {
        return Err(Error::DegenerateInput("cosine of a zero vector".into()));
    }
    let mut grads = PoolGrads::zeros(n, dim);
    let mut grad_y = vec![0.0; dim];

    // dL/da_t and the softmax chain dL/du_t = a_t (s_t - sum_r a_r s_r)
    let s: Vec<f64> = clips.iter().map(|c| dot(upstream, c)).collect();
    let s_mean: f64 = attention.iter().zip(&s).map(|(a, v)| a * v).sum();
    for t in 0..n {
        let nx = l2_norm(clips[t]);
        if nx <= 0.0 {
            return Err(Error::DegenerateInput("cosine of a zero vector".into()));
        }
        let cos_t = dot(clips[t], y) / (nx * ny);
        let du = attention[t] * (s[t] - s_mean) / tau;
        let gc = &mut grads.clips[t];
        for d in 0..dim {
            // direct path through the weighted average
            gc[d] += attention[t] * upstream[d];
            // cosine path: dc/dx = y/(|x||y|) - c x/|x|^2
            gc[d] += du * (y[d] / (nx * ny) - cos_t * clips[t][d] / (nx * nx));
            // dc/dy = x/(|x||y|) - c y/|y|^2
            grad_y[d] += du * (clips[t][d] / (nx * ny) - cos_t * y[d] / (ny * ny));
        }
    }
    grads.y = Some(grad_y);
    Ok(grads)
}

/// Pairwise similarity matrix of the support clips and its row sums.
pub fn self_attention_intermediate(clips: &[&[f64]], tau: f64) -> Result<SelfAttentionIntermediate> {
    require_clips(clips)?;
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::InvalidParameter(format!("tau must be > 0, got {tau}")));
    }
    let n = clips.len();
    let mut q = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            q.row_mut(i)[j] = dot(clips[i], clips[j]) / tau;
        }
    }
    let z: Vec<f64> = (0..n).map(|i| q.row(i).iter().sum()).collect();
    Ok(SelfAttentionIntermediate { q, z })
}

/// Attention from the row sums of the pairwise similarity matrix:
/// a = softmax(z), w = sum_t a_t x_t. The temperature is already inside Q,
/// so the softmax itself runs at temperature 1.
pub fn pool_self_attention(clips: &[&[f64]], tau: f64) -> Result<PooledEmbedding> {
    let inter = self_attention_intermediate(clips, tau)?;
    let attention = stable_softmax(&inter.z, 1.0)?;
    let w_bar = weighted_average(clips, attention.as_slice());
    Ok(PooledEmbedding { w_bar, attention: Some(attention) })
}

/// Backward of `pool_self_attention`.
pub fn self_attention_backward(
    clips: &[&[f64]],
    tau: f64,
    attention: &[f64],
    upstream: &[f64],
) -> Result<PoolGrads> {
    let dim = require_clips(clips)?;
    let n = clips.len();
    let mut grads = PoolGrads::zeros(n, dim);

    let s: Vec<f64> = clips.iter().map(|c| dot(upstream, c)).collect();
    let s_mean: f64 = attention.iter().zip(&s).map(|(a, v)| a * v).sum();
    let dz: Vec<f64> = (0..n).map(|t| attention[t] * (s[t] - s_mean)).collect();

    // z_s = x_s . total / tau with total = sum_r x_r, so
    // dL/dx_t = a_t g + (dz_t * total + sum_s dz_s x_s) / tau
    let mut total = vec![0.0; dim];
    for c in clips {
        for d in 0..dim {
            total[d] += c[d];
        }
    }
    let mut weighted_clip_sum = vec![0.0; dim];
    for (t, c) in clips.iter().enumerate() {
        for d in 0..dim {
            weighted_clip_sum[d] += dz[t] * c[d];
        }
    }
    for t in 0..n {
        let gc = &mut grads.clips[t];
        for d in 0..dim {
            gc[d] += attention[t] * upstream[d];
            gc[d] += (dz[t] * total[d] + weighted_clip_sum[d]) / tau;
        }
    }
    Ok(grads)
}

/// Pad or truncate the clip sequence to `t_max` rows (zero padding).
fn padded_input(clips: &[&[f64]], t_max: usize, dim: usize) -> (Vec<f64>, usize) {
    let valid = clips.len().min(t_max);
    let mut flat = vec![0.0; t_max * dim];
    for (t, c) in clips.iter().take(valid).enumerate() {
        flat[t * dim..(t + 1) * dim].copy_from_slice(c);
    }
    (flat, valid)
}

/// FC or Conv pooling. FC flattens the padded clip sequence and applies an
/// affine map to dimension D. Conv slides a width-3 kernel over the clip
/// axis with same padding and averages the outputs at the true-length
/// positions.
pub fn pool_parametric(clips: &[&[f64]], params: &PoolingParams) -> Result<PooledEmbedding> {
    let dim = require_clips(clips)?;
    params.validate(dim)?;
    match params.method {
        PoolingMethod::FullyConnected => {
            let fc = params.fc.as_ref().unwrap();
            let (flat, _) = padded_input(clips, params.t_max, dim);
            let w_bar = fc.apply(&flat)?;
            Ok(PooledEmbedding { w_bar, attention: None })
        }
        PoolingMethod::Conv => {
            let conv = params.conv.as_ref().unwrap();
            let (flat, valid) = padded_input(clips, params.t_max, dim);
            let row = |p: isize| -> Option<&[f64]> {
                if p < 0 || p as usize >= params.t_max {
                    None
                } else {
                    Some(&flat[p as usize * dim..(p as usize + 1) * dim])
                }
            };
            let mut w_bar = vec![0.0; dim];
            for pos in 0..valid {
                for (k, tap) in conv.kernel.iter().enumerate() {
                    if let Some(r) = row(pos as isize + k as isize - 1) {
                        for d in 0..dim {
                            w_bar[d] += dot(tap.row(d), r);
                        }
                    }
                }
                for d in 0..dim {
                    w_bar[d] += conv.bias[d];
                }
            }
            for v in w_bar.iter_mut() {
                *v /= valid as f64;
            }
            Ok(PooledEmbedding { w_bar, attention: None })
        }
        other => Err(Error::InvalidParameter(format!(
            "pool_parametric expects fc or conv, got {other}"
        ))),
    }
}

/// Backward of `pool_parametric`.
pub fn parametric_backward(
    clips: &[&[f64]],
    params: &PoolingParams,
    upstream: &[f64],
) -> Result<PoolGrads> {
    let dim = require_clips(clips)?;
    params.validate(dim)?;
    let n = clips.len();
    let mut grads = PoolGrads::zeros(n, dim);
    match params.method {
        PoolingMethod::FullyConnected => {
            let fc = params.fc.as_ref().unwrap();
            let (flat, valid) = padded_input(clips, params.t_max, dim);
            let mut gw = Mat::zeros(fc.out_dim(), fc.in_dim());
            let mut gb = vec![0.0; fc.out_dim()];
            let gflat = fc.backward(&flat, upstream, &mut gw, &mut gb);
            for t in 0..valid {
                grads.clips[t].copy_from_slice(&gflat[t * dim..(t + 1) * dim]);
            }
            grads.fc_weight = Some(gw);
            grads.fc_bias = Some(gb);
        }
        PoolingMethod::Conv => {
            let conv = params.conv.as_ref().unwrap();
            let (flat, valid) = padded_input(clips, params.t_max, dim);
            let scale = 1.0 / valid as f64;
            let mut gk = vec![Mat::zeros(dim, dim); 3];
            let mut gb = vec![0.0; dim];
            let mut gflat = vec![0.0; params.t_max * dim];
            for pos in 0..valid {
                for d in 0..dim {
                    gb[d] += scale * upstream[d];
                }
                for (k, tap) in conv.kernel.iter().enumerate() {
                    let p = pos as isize + k as isize - 1;
                    if p < 0 || p as usize >= params.t_max {
                        continue;
                    }
                    let src = &flat[p as usize * dim..(p as usize + 1) * dim];
                    let dst = &mut gflat[p as usize * dim..(p as usize + 1) * dim];
                    for d in 0..dim {
                        let g = scale * upstream[d];
                        let krow = tap.row(d);
                        let gkrow = gk[k].row_mut(d);
                        for c in 0..dim {
                            gkrow[c] += g * src[c];
                            dst[c] += g * krow[c];
                        }
                    }
                }
            }
            for t in 0..valid.min(n) {
                grads.clips[t].copy_from_slice(&gflat[t * dim..(t + 1) * dim]);
            }
            grads.conv_kernel = Some(gk);
            grads.conv_bias = Some(gb);
        }
        other => {
            return Err(Error::InvalidParameter(format!(
                "parametric_backward expects fc or conv, got {other}"
            )))
        }
    }
    Ok(grads)
}

/// Coordinate-wise max or mean over the clips.
pub fn pool_reduce(clips: &[&[f64]], method: PoolingMethod) -> Result<PooledEmbedding> {
    let dim = require_clips(clips)?;
    let w_bar = match method {
        PoolingMethod::MaxPool => {
            let mut out = clips[0].to_vec();
            for c in &clips[1..] {
                for d in 0..dim {
                    if c[d] > out[d] {
                        out[d] = c[d];
                    }
                }
            }
            out
        }
        PoolingMethod::AvgPool => {
            let mut out = vec![0.0; dim];
            for c in clips {
                for d in 0..dim {
                    out[d] += c[d];
                }
            }
            let n = clips.len() as f64;
            out.iter_mut().for_each(|v| *v /= n);
            out
        }
        other => {
            return Err(Error::InvalidParameter(format!(
                "pool_reduce expects mp or ap, got {other}"
            )))
        }
    };
    Ok(PooledEmbedding { w_bar, attention: None })
}

/// Backward of `pool_reduce`. Max routes each coordinate's gradient to the
/// first clip attaining the maximum.
pub fn reduce_backward(
    clips: &[&[f64]],
    method: PoolingMethod,
    upstream: &[f64],
) -> Result<PoolGrads> {
    let dim = require_clips(clips)?;
    let n = clips.len();
    let mut grads = PoolGrads::zeros(n, dim);
    match method {
        PoolingMethod::MaxPool => {
            for d in 0..dim {
                let mut best = 0;
                for t in 1..n {
                    if clips[t][d] > clips[best][d] {
                        best = t;
                    }
                }
                grads.clips[best][d] += upstream[d];
            }
        }
        PoolingMethod::AvgPool => {
            let scale = 1.0 / n as f64;
            for t in 0..n {
                for d in 0..dim {
                    grads.clips[t][d] += scale * upstream[d];
                }
            }
        }
        other => {
            return Err(Error::InvalidParameter(format!(
                "reduce_backward expects mp or ap, got {other}"
            )))
        }
    }
    Ok(grads)
}

/// Dispatch to the pooling function selected by `params`. `y` is the query
/// embedding; only cross-attention reads it.
pub fn pool_support(clips: &[&[f64]], y: &[f64], params: &PoolingParams) -> Result<PooledEmbedding> {
    match params.method {
        PoolingMethod::CrossAttention => pool_cross_attention(clips, y, params.tau),
        PoolingMethod::SelfAttention => pool_self_attention(clips, params.tau),
        PoolingMethod::FullyConnected | PoolingMethod::Conv => pool_parametric(clips, params),
        PoolingMethod::MaxPool | PoolingMethod::AvgPool => pool_reduce(clips, params.method),
    }
}

/// Backward counterpart of `pool_support`.
pub fn pool_support_backward(
    clips: &[&[f64]],
    y: &[f64],
    params: &PoolingParams,
    pooled: &PooledEmbedding,
    upstream: &[f64],
) -> Result<PoolGrads> {
    match params.method {
        PoolingMethod::CrossAttention => {
            let att = pooled
                .attention
                .as_ref()
                .ok_or_else(|| Error::InvalidParameter("missing attention for ca backward".into()))?;
            cross_attention_backward(clips, y, params.tau, att.as_slice(), upstream)
        }
        PoolingMethod::SelfAttention => {
            let att = pooled
                .attention
                .as_ref()
                .ok_or_else(|| Error::InvalidParameter("missing attention for sa backward".into()))?;
            self_attention_backward(clips, params.tau, att.as_slice(), upstream)
        }
        PoolingMethod::FullyConnected | PoolingMethod::Conv => {
            parametric_backward(clips, params, upstream)
        }
        PoolingMethod::MaxPool | PoolingMethod::AvgPool => {
            reduce_backward(clips, params.method, upstream)
        }
    }
}

fn weighted_average(clips: &[&[f64]], weights: &[f64]) -> Vec<f64> {
    let dim = clips[0].len();
    let mut out = vec![0.0; dim];
    for (c, w) in clips.iter().zip(weights) {
        for d in 0..dim {
            out[d] += w * c[d];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_gradient, relative_error};
    use proptest::prelude::*;

    fn views(rows: &[Vec<f64>]) -> Vec<&[f64]> {
        rows.iter().map(|r| r.as_slice()).collect()
    }

    #[test]
    fn build_v_ss_covers_all_clips() {
        let gt = GroundTruthInterval::new(2, 4, 8).unwrap();
        let s = build_support_set(8, &gt, SupportConstruction::Video).unwrap();
        assert_eq!(s.clip_indices(), &[0, 1, 2, 3, 4, 5, 6, 7]);
    }

    #[test]
    fn build_gt_ss_is_the_interval() {
        let gt = GroundTruthInterval::new(2, 4, 8).unwrap();
        let s = build_support_set(8, &gt, SupportConstruction::GroundTruth).unwrap();
        assert_eq!(s.clip_indices(), &[2, 3, 4]);
    }

    #[test]
    fn build_non_gt_ss_full_cover_errors() {
        let gt = GroundTruthInterval::new(0, 7, 8).unwrap();
        let err = build_support_set(8, &gt, SupportConstruction::Background);
        assert!(matches!(err, Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn build_non_gt_ss_is_complement() {
        let gt = GroundTruthInterval::new(2, 4, 8).unwrap();
        let s = build_support_set(8, &gt, SupportConstruction::Background).unwrap();
        assert_eq!(s.clip_indices(), &[0, 1, 5, 6, 7]);
    }

    #[test]
    fn interval_rejects_bad_bounds() {
        assert!(GroundTruthInterval::new(4, 2, 8).is_err());
        assert!(GroundTruthInterval::new(0, 8, 8).is_err());
    }

    #[test]
    fn ca_identical_clips_uniform_attention() {
        let rows = vec![vec![0.6, 0.8]; 5];
        let pooled = pool_cross_attention(&views(&rows), &[1.0, 0.0], 1.0).unwrap();
        for a in pooled.attention.as_ref().unwrap().as_slice() {
            assert!((a - 0.2).abs() < 1e-12);
        }
        assert!((pooled.w_bar[0] - 0.6).abs() < 1e-12);
        assert!((pooled.w_bar[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn ca_two_clip_derived_values() {
        // cosines are (1, 0), attention = (e/(e+1), 1/(e+1))
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let pooled = pool_cross_attention(&views(&rows), &[1.0, 0.0], 1.0).unwrap();
        let e = std::f64::consts::E;
        let expected = e / (e + 1.0);
        let att = pooled.attention.as_ref().unwrap();
        assert!((att.as_slice()[0] - expected).abs() < 1e-12);
        assert!((att.as_slice()[1] - (1.0 - expected)).abs() < 1e-12);
        assert!((pooled.w_bar[0] - expected).abs() < 1e-12);
        assert!((pooled.w_bar[1] - (1.0 - expected)).abs() < 1e-12);
    }

    #[test]
    fn ca_low_temperature_selects_argmax() {
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let pooled = pool_cross_attention(&views(&rows), &[1.0, 0.0], 0.01).unwrap();
        let att = pooled.attention.as_ref().unwrap();
        assert!((att.as_slice()[0] - 1.0).abs() < 1e-9);
        assert!(att.as_slice()[1] < 1e-9);
        assert!((pooled.w_bar[0] - 1.0).abs() < 1e-9);
        assert!(pooled.w_bar[1].abs() < 1e-9);
    }

    #[test]
    fn sa_identical_clips_uniform() {
        let rows = vec![vec![0.3, -0.4]; 4];
        let pooled = pool_self_attention(&views(&rows), 1.0).unwrap();
        for a in pooled.attention.as_ref().unwrap().as_slice() {
            assert!((a - 0.25).abs() < 1e-12);
        }
        assert!((pooled.w_bar[0] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn sa_single_clip_identity() {
        let rows = vec![vec![0.1, 0.9]];
        let pooled = pool_self_attention(&views(&rows), 1.0).unwrap();
        assert_eq!(pooled.attention.as_ref().unwrap().as_slice(), &[1.0]);
        assert_eq!(pooled.w_bar, vec![0.1, 0.9]);
    }

    #[test]
    fn sa_matches_straight_line_re_derivation() {
        let rows = vec![vec![1.0, 0.0], vec![0.9, 0.1], vec![0.0, 1.0]];
        let tau = 1.0;
        let pooled = pool_self_attention(&views(&rows), tau).unwrap();

        // independent re-derivation with plain loops
        let n = rows.len();
        let mut z = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                let mut d = 0.0;
                for k in 0..2 {
                    d += rows[i][k] * rows[j][k];
                }
                z[i] += d / tau;
            }
        }
        let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = z.iter().map(|v| (v - zmax).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let expected_att: Vec<f64> = exps.iter().map(|e| e / sum).collect();
        let mut expected_w = vec![0.0; 2];
        for (i, row) in rows.iter().enumerate() {
            for d in 0..2 {
                expected_w[d] += expected_att[i] * row[d];
            }
        }

        let att = pooled.attention.as_ref().unwrap().as_slice();
        for (a, e) in att.iter().zip(&expected_att) {
            assert!((a - e).abs() < 1e-9);
        }
        for (w, e) in pooled.w_bar.iter().zip(&expected_w) {
            assert!((w - e).abs() < 1e-9);
        }
    }

    #[test]
    fn sa_intermediate_q_is_symmetric() {
        let rows = vec![vec![0.4, 0.2, -0.1], vec![-0.3, 0.8, 0.5], vec![0.9, -0.6, 0.2]];
        let inter = self_attention_intermediate(&views(&rows), 0.1).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((inter.q.row(i)[j] - inter.q.row(j)[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn fc_averaging_weights_equal_mean() {
        let dim = 3;
        let t = 4;
        let mut fc = Affine::zeros(dim, t * dim);
        for block in 0..t {
            for d in 0..dim {
                fc.weight.row_mut(d)[block * dim + d] = 1.0 / t as f64;
            }
        }
        let params = PoolingParams {
            method: PoolingMethod::FullyConnected,
            tau: 1.0,
            t_max: t,
            fc: Some(fc),
            conv: None,
        };
        let rows: Vec<Vec<f64>> =
            (0..t).map(|i| (0..dim).map(|d| (i * dim + d) as f64 * 0.1).collect()).collect();
        let pooled = pool_parametric(&views(&rows), &params).unwrap();
        let mean = pool_reduce(&views(&rows), PoolingMethod::AvgPool).unwrap();
        for (a, b) in pooled.w_bar.iter().zip(&mean.w_bar) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(pooled.attention.is_none());
    }

    #[test]
    fn conv_identity_center_tap_equals_mean() {
        let dim = 3;
        let mut conv = ConvParams::zeros(dim);
        conv.kernel[1] = Affine::identity(dim).weight;
        let params = PoolingParams {
            method: PoolingMethod::Conv,
            tau: 1.0,
            t_max: 5,
            fc: None,
            conv: Some(conv),
        };
        let rows = vec![vec![1.0, 0.0, 2.0], vec![0.0, 1.0, -2.0], vec![0.5, 0.5, 0.0]];
        let pooled = pool_parametric(&views(&rows), &params).unwrap();
        let mean = pool_reduce(&views(&rows), PoolingMethod::AvgPool).unwrap();
        for (a, b) in pooled.w_bar.iter().zip(&mean.w_bar) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn fc_random_matches_naive_loop() {
        let mut rng = crate::rng::derived_rng(11, &[99]);
        use rand::Rng;
        let dim = 4;
        let t = 3;
        let mut fc = Affine::zeros(dim, t * dim);
        for v in fc.weight.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        for v in fc.bias.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let rows: Vec<Vec<f64>> = (0..t)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let params = PoolingParams {
            method: PoolingMethod::FullyConnected,
            tau: 1.0,
            t_max: t,
            fc: Some(fc.clone()),
            conv: None,
        };
        let pooled = pool_parametric(&views(&rows), &params).unwrap();
        // naive loop oracle
        let mut flat = Vec::new();
        for r in &rows {
            flat.extend_from_slice(r);
        }
        for o in 0..dim {
            let mut acc = fc.bias[o];
            for (i, x) in flat.iter().enumerate() {
                acc += fc.weight.row(o)[i] * x;
            }
            assert!((pooled.w_bar[o] - acc).abs() < 1e-9);
        }
    }

    #[test]
    fn reduce_examples() {
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let mp = pool_reduce(&views(&rows), PoolingMethod::MaxPool).unwrap();
        assert_eq!(mp.w_bar, vec![1.0, 1.0]);
        let ap = pool_reduce(&views(&rows), PoolingMethod::AvgPool).unwrap();
        assert_eq!(ap.w_bar, vec![0.5, 0.5]);
        let single = vec![vec![0.3, -0.7]];
        assert_eq!(pool_reduce(&views(&single), PoolingMethod::MaxPool).unwrap().w_bar, single[0]);
        assert_eq!(pool_reduce(&views(&single), PoolingMethod::AvgPool).unwrap().w_bar, single[0]);
    }

    /// Shared harness: finite-difference check of a pooling backward against
    /// the scalar probe L = probe . w_bar.
    fn check_pool_gradient(method: PoolingMethod, n_clips: usize, dim: usize, seed: u64) {
        use rand::Rng;
        let mut rng = crate::rng::derived_rng(seed, &[method as u64, n_clips as u64]);
        let rows: Vec<Vec<f64>> = (0..n_clips)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let y: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let probe: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut params = PoolingParams::non_parametric(method, 0.7);
        if method == PoolingMethod::FullyConnected {
            let mut fc = Affine::zeros(dim, n_clips * dim);
            for v in fc.weight.data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            params = PoolingParams { method, tau: 1.0, t_max: n_clips, fc: Some(fc), conv: None };
        }
        if method == PoolingMethod::Conv {
            let mut conv = ConvParams::zeros(dim);
            for tap in conv.kernel.iter_mut() {
                for v in tap.data_mut() {
                    *v = rng.random_range(-1.0..1.0);
                }
            }
            params = PoolingParams { method, tau: 1.0, t_max: n_clips, fc: None, conv: Some(conv) };
        }

        let flat: Vec<f64> = rows.iter().flatten().cloned().collect();
        let f = |vars: &[f64]| {
            let r: Vec<Vec<f64>> =
                (0..n_clips).map(|t| vars[t * dim..(t + 1) * dim].to_vec()).collect();
            let v: Vec<&[f64]> = r.iter().map(|x| x.as_slice()).collect();
            let pooled = pool_support(&v, &y, &params).unwrap();
            dot(&probe, &pooled.w_bar)
        };
        let numeric = finite_diff_gradient(f, &flat, 1e-6).unwrap();

        let v = views(&rows);
        let pooled = pool_support(&v, &y, &params).unwrap();
        let grads = pool_support_backward(&v, &y, &params, &pooled, &probe).unwrap();
        let analytic: Vec<f64> = grads.clips.iter().flatten().cloned().collect();
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!(relative_error(*a, *n) < 1e-6, "{method}: {a} vs {n}");
        }
    }

    #[test]
    fn pooling_backwards_match_finite_differences() {
        for method in PoolingMethod::ALL {
            check_pool_gradient(method, 4, 3, 31);
            check_pool_gradient(method, 1, 3, 32);
        }
    }

    #[test]
    fn ca_backward_y_gradient_matches_finite_differences() {
        use rand::Rng;
        let mut rng = crate::rng::derived_rng(5, &[1]);
        let dim = 4;
        let rows: Vec<Vec<f64>> =
            (0..3).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let y: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let probe: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v = views(&rows);
        let f = |yy: &[f64]| {
            let pooled = pool_cross_attention(&v, yy, 0.5).unwrap();
            dot(&probe, &pooled.w_bar)
        };
        let numeric = finite_diff_gradient(f, &y, 1e-6).unwrap();
        let pooled = pool_cross_attention(&v, &y, 0.5).unwrap();
        let grads =
            cross_attention_backward(&v, &y, 0.5, pooled.attention.as_ref().unwrap().as_slice(), &probe)
                .unwrap();
        for (a, n) in grads.y.as_ref().unwrap().iter().zip(&numeric) {
            assert!(relative_error(*a, *n) < 1e-6, "{a} vs {n}");
        }
    }

    #[test]
    fn construction_and_pooling_names_round_trip() {
        for c in SupportConstruction::ALL {
            assert_eq!(c.as_str().parse::<SupportConstruction>().unwrap(), c);
        }
        for p in PoolingMethod::ALL {
            assert_eq!(p.as_str().parse::<PoolingMethod>().unwrap(), p);
        }
        assert!("xx".parse::<PoolingMethod>().is_err());
    }

    proptest! {
        /// Attention reconstruction: w = sum a_t x_t within 1e-9, and w lies
        /// in the convex hull coordinate bounds of the clips.
        #[test]
        fn attention_reconstruction_identity(
            seed in 0u64..5000,
            n in 1usize..6,
            dim in 2usize..5,
        ) {
            use rand::Rng;
            let mut rng = crate::rng::derived_rng(seed, &[7]);
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0f64)).collect())
                .collect();
            prop_assume!(rows.iter().all(|r| l2_norm(r) > 1e-3));
            let y: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            prop_assume!(l2_norm(&y) > 1e-3);
            let v: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
            for pooled in [
                pool_cross_attention(&v, &y, 0.3).unwrap(),
                pool_self_attention(&v, 0.3).unwrap(),
            ] {
                let att = pooled.attention.as_ref().unwrap().as_slice();
                let sum: f64 = att.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-9);
                for d in 0..dim {
                    let recon: f64 = (0..n).map(|t| att[t] * rows[t][d]).sum();
                    prop_assert!((recon - pooled.w_bar[d]).abs() < 1e-9);
                    let lo = rows.iter().map(|r| r[d]).fold(f64::INFINITY, f64::min);
                    let hi = rows.iter().map(|r| r[d]).fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(pooled.w_bar[d] >= lo - 1e-9 && pooled.w_bar[d] <= hi + 1e-9);
                }
            }
        }

        /// CA attention only sees cosines, so positively rescaling a single
        /// clip or the query does not change it.
        #[test]
        fn ca_attention_scale_invariance(
            seed in 0u64..5000,
            scale in 0.01..50.0f64,
            which in 0usize..3,
        ) {
            use rand::Rng;
            let mut rng = crate::rng::derived_rng(seed, &[8]);
            let rows: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0f64)).collect())
                .collect();
            prop_assume!(rows.iter().all(|r| l2_norm(r) > 1e-3));
            let y: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            prop_assume!(l2_norm(&y) > 1e-3);

            let v: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
            let base = pool_cross_attention(&v, &y, 0.4).unwrap();

            let mut scaled_rows = rows.clone();
            scaled_rows[which].iter_mut().for_each(|x| *x *= scale);
            let sv: Vec<&[f64]> = scaled_rows.iter().map(|r| r.as_slice()).collect();
            let scaled_clip = pool_cross_attention(&sv, &y, 0.4).unwrap();

            let sy: Vec<f64> = y.iter().map(|x| x * scale).collect();
            let scaled_y = pool_cross_attention(&v, &sy, 0.4).unwrap();

            let ba = base.attention.as_ref().unwrap().as_slice();
            for (b, s) in ba.iter().zip(scaled_clip.attention.as_ref().unwrap().as_slice()) {
                prop_assert!((b - s).abs() < 1e-9);
            }
            for (b, s) in ba.iter().zip(scaled_y.attention.as_ref().unwrap().as_slice()) {
                prop_assert!((b - s).abs() < 1e-9);
            }
        }

        /// SA attention equals a softmax re-derived from Q's row sums.
        #[test]
        fn sa_attention_matches_q_re_derivation(
            seed in 0u64..5000,
            tau in 0.05..2.0f64,
        ) {
            use rand::Rng;
            let mut rng = crate::rng::derived_rng(seed, &[9]);
            let rows: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0f64)).collect())
                .collect();
            let v: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
            let pooled = pool_self_attention(&v, tau).unwrap();
            let inter = self_attention_intermediate(&v, tau).unwrap();
            let rederived = stable_softmax(&inter.z, 1.0).unwrap();
            for (a, b) in pooled
                .attention
                .as_ref()
                .unwrap()
                .as_slice()
                .iter()
                .zip(rederived.as_slice())
            {
                prop_assert_eq!(*a, *b);
            }
        }
    }

    /// Smoke over the full 3x6 grid: every construction x pooling pair
    /// produces a finite embedding of the right dimension.
    #[test]
    fn full_grid_produces_finite_outputs() {
        use rand::Rng;
        let mut rng = crate::rng::derived_rng(99, &[3]);
        let t = 6;
        let dim = 4;
        let rows: Vec<Vec<f64>> =
            (0..t).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let y: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gt = GroundTruthInterval::new(2, 3, t).unwrap();
        for construction in SupportConstruction::ALL {
            let support = build_support_set(t, &gt, construction).unwrap();
            let clips: Vec<&[f64]> =
                support.clip_indices().iter().map(|&c| rows[c].as_slice()).collect();
            for method in PoolingMethod::ALL {
                let params = match method {
                    PoolingMethod::FullyConnected => {
                        let mut fc = Affine::zeros(dim, t * dim);
                        for v in fc.weight.data_mut() {
                            *v = rng.random_range(-0.5..0.5);
                        }
                        PoolingParams { method, tau: 0.1, t_max: t, fc: Some(fc), conv: None }
                    }
                    PoolingMethod::Conv => {
                        let mut conv = ConvParams::zeros(dim);
                        for tap in conv.kernel.iter_mut() {
                            for v in tap.data_mut() {
                                *v = rng.random_range(-0.5..0.5);
                            }
                        }
                        PoolingParams { method, tau: 0.1, t_max: t, fc: None, conv: Some(conv) }
                    }
                    _ => PoolingParams::non_parametric(method, 0.1),
                };
                let pooled = pool_support(&clips, &y, &params).unwrap();
                assert_eq!(pooled.w_bar.len(), dim, "{construction}/{method}");
                assert!(pooled.w_bar.iter().all(|v| v.is_finite()), "{construction}/{method}");
            }
        }
    }
}
