//! Desk-scale encoder stand-ins.
//!
//! Precomputed clip features and a bag-of-words token encoder replace the
//! heavyweight video/text backbones; two affine projections map both sides
//! into the shared D-dimensional space, and an affine head over that space
//! produces vocabulary logits for the caption objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{l2_norm, l2_normalize, normalize_backward, Affine, Mat};
use crate::objectives::CaptionContext;

/// Raw per-sample features before projection: clip features F (T x D_v)
/// and a sentence feature G (D_l).
#[derive(Clone, Debug)]
pub struct RawFeatures {
    pub clips: Mat,
    pub sentence: Vec<f64>,
}

/// The two projections into the shared space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionParams {
    /// Video projection, D_v -> D.
    pub video: Affine,
    /// Text projection, D_l -> D.
    pub text: Affine,
}

impl ProjectionParams {
    pub fn init(dim_video: usize, dim_text: usize, dim: usize, rng: &mut impl Rng) -> Self {
        ProjectionParams {
            video: init_affine(dim, dim_video, rng),
            text: init_affine(dim, dim_text, rng),
        }
    }
}

/// Affine with entries uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
pub fn init_affine(out_dim: usize, in_dim: usize, rng: &mut impl Rng) -> Affine {
    let bound = 1.0 / (in_dim as f64).sqrt();
    let mut a = Affine::zeros(out_dim, in_dim);
    for v in a.weight.data_mut() {
        *v = rng.random_range(-bound..bound);
    }
    for v in a.bias.iter_mut() {
        *v = rng.random_range(-bound..bound);
    }
    a
}

/// A sentence as vocabulary ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    tokens: Vec<usize>,
}

impl TokenSequence {
    pub fn new(tokens: Vec<usize>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Data("empty token sequence".into()));
        }
        Ok(TokenSequence { tokens })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // non-empty is enforced at construction
    }

    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        if let Some(bad) = self.tokens.iter().find(|t| **t >= vocab_size) {
            return Err(Error::Data(format!(
                "token id {bad} out of vocabulary (size {vocab_size})"
            )));
        }
        Ok(())
    }
}

/// Caption head parameters: vocabulary logits from the generation context,
/// plus the token embedding table feeding the toy text encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams {
    /// D -> vocab logits.
    pub output: Affine,
    /// vocab x D_l token embeddings.
    pub token_table: Mat,
}

impl DecoderParams {
    pub fn init(dim: usize, vocab_size: usize, dim_text: usize, rng: &mut impl Rng) -> Self {
        let output = init_affine(vocab_size, dim, rng);
        let bound = 1.0 / (dim_text as f64).sqrt();
        let mut token_table = Mat::zeros(vocab_size, dim_text);
        for v in token_table.data_mut() {
            *v = rng.random_range(-bound..bound);
        }
        DecoderParams { output, token_table }
    }

    pub fn vocab_size(&self) -> usize {
        self.output.out_dim()
    }
}

/// Project clip features row-wise into the shared space, optionally
/// normalizing each row to unit length.
pub fn project_video(features: &Mat, psi: &Affine, normalize: bool) -> Result<Mat> {
    if features.cols() != psi.in_dim() {
        return Err(Error::ShapeMismatch(format!(
            "video features have dim {}, projection expects {}",
            features.cols(),
            psi.in_dim()
        )));
    }
    let mut out = Mat::zeros(features.rows(), psi.out_dim());
    for t in 0..features.rows() {
        let mut row = psi.apply(features.row(t))?;
        if normalize {
            row = l2_normalize(&row)?;
        }
        out.row_mut(t).copy_from_slice(&row);
    }
    Ok(out)
}

/// Project a sentence feature into the shared space.
pub fn project_text(sentence: &[f64], phi: &Affine, normalize: bool) -> Result<Vec<f64>> {
    let out = phi.apply(sentence)?;
    if normalize {
        l2_normalize(&out)
    } else {
        Ok(out)
    }
}

/// Backward through projection + optional row normalization. Accumulates
/// dL/dW and dL/db into `grad`; returns dL/dinput.
pub fn projection_backward(
    input: &[f64],
    prenorm: &[f64],
    normalized: Option<&[f64]>,
    affine: &Affine,
    upstream: &[f64],
    grad_weight: &mut Mat,
    grad_bias: &mut [f64],
) -> Vec<f64> {
    let up = match normalized {
        Some(unit) => normalize_backward(upstream, unit, l2_norm(prenorm)),
        None => upstream.to_vec(),
    };
    affine.backward(input, &up, grad_weight, grad_bias)
}

/// Mean of the token embedding rows. Bag-of-words on purpose: the caption
/// objective only needs a differentiable sentence feature, not word order.
pub fn toy_text_encode(tokens: &TokenSequence, table: &Mat) -> Result<Vec<f64>> {
    tokens.check_vocab(table.rows())?;
    let dim = table.cols();
    let mut out = vec![0.0; dim];
    for &t in tokens.tokens() {
        let row = table.row(t);
        for d in 0..dim {
            out[d] += row[d];
        }
    }
    let m = tokens.len() as f64;
    out.iter_mut().for_each(|v| *v /= m);
    Ok(out)
}

/// Backward of `toy_text_encode`: scatter dL/dG uniformly onto the rows of
/// the token table.
pub fn toy_text_encode_backward(tokens: &TokenSequence, upstream: &[f64], grad_table: &mut Mat) {
    let m = tokens.len() as f64;
    for &t in tokens.tokens() {
        let row = grad_table.row_mut(t);
        for d in 0..upstream.len() {
            row[d] += upstream[d] / m;
        }
    }
}

/// Vocabulary logits for a generation context; the caller applies the
/// stable softmax.
pub fn decode_token_logits(context: &CaptionContext, decoder: &DecoderParams) -> Result<Vec<f64>> {
    decoder.output.apply(&context.w)
}
