//! Finite-difference verification of every analytic gradient.
//!
//! For each objective the suite builds random instances, flattens the
//! variables the objective differentiates (clip and text embeddings plus
//! any parameters it touches), and compares the analytic gradient against
//! central differences coordinate by coordinate. The support objectives
//! and the combined objective are checked on every cell of the
//! construction x pooling grid; an end-to-end variant differentiates the
//! whole pipeline with respect to every trainable parameter, projections
//! and token table included.
//!
//! Max-pool cells get a guard: instances where two support clips nearly
//! tie on some coordinate are resampled, since central differences
//! straddle the max kink there and measure nothing.

use rand::Rng;
use rayon::prelude::*;

use crate::encoders::{init_affine, DecoderParams, TokenSequence};
use crate::error::Result;
use crate::grounding::{grounding_loss, GrounderParams, SyntheticWorldConfig};
use crate::model::{
    compute_losses, embed, forward_backward, ModelDims, ModelParams, ObjectiveConfig,
    ObjectiveToggles, SupervisionMode,
};
use crate::numerics::{finite_diff_gradient, relative_error, Affine, Mat};
use crate::objectives::{
    gt_caption_loss, gt_clip_contrastive_loss, pool_batch, support_caption_loss,
    support_contrastive_loss, total_loss, BatchItem, EmbeddingBatch, GradKey, LossBundle,
    LossWeights,
};
use crate::rng::{derived_rng, stream};
use crate::supportset::{
    build_support_set, ConvParams, GroundTruthInterval, PoolingMethod, PoolingParams,
    SupportConstruction, SupportSetSpec,
};

/// Suite settings. Defaults: h = 1e-5, tolerance 1e-4.
#[derive(Clone, Copy, Debug)]
pub struct SuiteConfig {
    /// Seeds per grid cell for the support objectives (and per objective
    /// for the cell-independent ones).
    pub seeds_per_cell: usize,
    /// Seeds per cell for the end-to-end parameter check.
    pub end_to_end_seeds: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig { seeds_per_cell: 100, end_to_end_seeds: 3, step: 1e-5, tolerance: 1e-4 }
    }
}

/// Worst relative error observed for one objective on one grid cell.
#[derive(Clone, Debug)]
pub struct ObjectiveReport {
    pub objective: &'static str,
    /// None for objectives that do not depend on the grid cell.
    pub cell: Option<(SupportConstruction, PoolingMethod)>,
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

impl ObjectiveReport {
    pub fn cell_label(&self) -> String {
        match self.cell {
            Some((c, m)) => format!("{c}+{m}"),
            None => "all".to_string(),
        }
    }
}

/// Outcome of the whole suite.
#[derive(Clone, Debug)]
pub struct SuiteSummary {
    pub reports: Vec<ObjectiveReport>,
    pub tolerance: f64,
}

impl SuiteSummary {
    pub fn max_rel_error(&self) -> f64 {
        self.reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

struct Instance {
    batch: EmbeddingBatch,
    sentences: Vec<TokenSequence>,
    decoder: DecoderParams,
    caption_map: Affine,
    grounder: GrounderParams,
    spec: SupportSetSpec,
    weights: LossWeights,
}

const VOCAB: usize = 8;

fn random_sizes(rng: &mut impl Rng) -> (usize, usize, usize) {
    let b = if rng.random_range(0..2) == 0 { 2 } else { 4 };
    let t = if rng.random_range(0..2) == 0 { 4 } else { 8 };
    let d = if rng.random_range(0..2) == 0 { 8 } else { 16 };
    (b, t, d)
}

fn random_items(rng: &mut impl Rng, b: usize, t: usize, d: usize) -> Vec<BatchItem> {
    (0..b)
        .map(|_| {
            let clips =
                Mat::from_vec(t, d, (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect());
            let text: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            // always leave at least one background clip so every
            // construction is valid
            let len = rng.random_range(1..=t / 2);
            let start = rng.random_range(0..=t - len - 1);
            BatchItem {
                clips,
                text,
                gt: GroundTruthInterval::new(start, start + len - 1, t).unwrap(),
            }
        })
        .collect()
}

/// Smallest per-coordinate gap between the top two values over the support
/// clips; used to reject instances where max-pool sits on a kink.
fn min_maxpool_gap(batch: &EmbeddingBatch, construction: SupportConstruction) -> f64 {
    let mut min_gap = f64::INFINITY;
    for item in batch.items() {
        let support = build_support_set(item.clips.rows(), &item.gt, construction).unwrap();
        if support.len() < 2 {
            continue;
        }
        for d in 0..item.clips.cols() {
            let mut best = f64::NEG_INFINITY;
            let mut second = f64::NEG_INFINITY;
            for &c in support.clip_indices() {
                let v = item.clips.row(c)[d];
                if v > best {
                    second = best;
                    best = v;
                } else if v > second {
                    second = v;
                }
            }
            min_gap = min_gap.min(best - second);
        }
    }
    min_gap
}

fn random_instance(
    seed: u64,
    tag: u64,
    cell: (SupportConstruction, PoolingMethod),
) -> Instance {
    let (construction, method) = cell;
    let mut attempt = 0u64;
    loop {
        let mut rng = derived_rng(seed, &[stream::GRADCHECK, tag, attempt]);
        let (b, t, d) = random_sizes(&mut rng);
        let items = random_items(&mut rng, b, t, d);
        let batch = EmbeddingBatch::new(items, true).unwrap();
        if method == PoolingMethod::MaxPool && min_maxpool_gap(&batch, construction) < 1e-3 {
            attempt += 1;
            continue;
        }
        let sentences: Vec<TokenSequence> = (0..b)
            .map(|_| {
                let len = rng.random_range(1..5);
                TokenSequence::new((0..len).map(|_| rng.random_range(0..VOCAB)).collect()).unwrap()
            })
            .collect();
        let decoder = DecoderParams {
            output: init_affine(VOCAB, d, &mut rng),
            token_table: Mat::zeros(VOCAB, 4),
        };
        let caption_map = init_affine(d, d, &mut rng);
        let grounder = GrounderParams::init(d, &mut rng);
        let params = match method {
            PoolingMethod::FullyConnected => PoolingParams {
                method,
                tau: 0.1,
                t_max: t,
                fc: Some(init_affine(d, t * d, &mut rng)),
                conv: None,
            },
            PoolingMethod::Conv => {
                let mut conv = ConvParams::zeros(d);
                let bound = 1.0 / (3.0 * d as f64).sqrt();
                for tap in conv.kernel.iter_mut() {
                    for v in tap.data_mut() {
                        *v = rng.random_range(-bound..bound);
                    }
                }
                PoolingParams { method, tau: 0.1, t_max: t, fc: None, conv: Some(conv) }
            }
            _ => PoolingParams::non_parametric(method, 0.1),
        };
        return Instance {
            batch,
            sentences,
            decoder,
            caption_map,
            grounder,
            spec: SupportSetSpec { construction, params },
            weights: LossWeights::new(0.1, 0.1, 0.1).unwrap(),
        };
    }
}

/// Which variable blocks a probe differentiates.
#[derive(Clone, Copy, Default)]
struct Blocks {
    clips_and_text: bool,
    decoder: bool,
    caption_map: bool,
    grounder: bool,
    pooling: bool,
}

fn flatten(inst: &Instance, blocks: Blocks) -> Vec<f64> {
    let mut out = Vec::new();
    if blocks.clips_and_text {
        for item in inst.batch.items() {
            out.extend_from_slice(item.clips.data());
        }
        for item in inst.batch.items() {
            out.extend_from_slice(&item.text);
        }
    }
    if blocks.decoder {
        out.extend_from_slice(inst.decoder.output.weight.data());
        out.extend_from_slice(&inst.decoder.output.bias);
    }
    if blocks.caption_map {
        out.extend_from_slice(inst.caption_map.weight.data());
        out.extend_from_slice(&inst.caption_map.bias);
    }
    if blocks.grounder {
        out.extend_from_slice(inst.grounder.fuse.weight.data());
        out.extend_from_slice(&inst.grounder.fuse.bias);
    }
    if blocks.pooling {
        if let Some(fc) = &inst.spec.params.fc {
            out.extend_from_slice(fc.weight.data());
            out.extend_from_slice(&fc.bias);
        }
        if let Some(conv) = &inst.spec.params.conv {
            for tap in &conv.kernel {
                out.extend_from_slice(tap.data());
            }
            out.extend_from_slice(&conv.bias);
        }
    }
    out
}

fn rebuild(inst: &Instance, blocks: Blocks, vars: &[f64]) -> Instance {
    let mut out = Instance {
        batch: inst.batch.clone(),
        sentences: inst.sentences.clone(),
        decoder: inst.decoder.clone(),
        caption_map: inst.caption_map.clone(),
        grounder: inst.grounder.clone(),
        spec: inst.spec.clone(),
        weights: inst.weights,
    };
    let mut k = 0;
    let mut take = |n: usize| {
        let s = &vars[k..k + n];
        k += n;
        s
    };
    if blocks.clips_and_text {
        let mut items: Vec<BatchItem> = inst.batch.items().to_vec();
        for item in items.iter_mut() {
            let n = item.clips.data().len();
            item.clips =
                Mat::from_vec(item.clips.rows(), item.clips.cols(), take(n).to_vec());
        }
        for item in items.iter_mut() {
            item.text = take(item.text.len()).to_vec();
        }
        out.batch = EmbeddingBatch::from_parts(items, true).unwrap();
    }
    if blocks.decoder {
        let (r, c) = (inst.decoder.output.weight.rows(), inst.decoder.output.weight.cols());
        out.decoder.output.weight = Mat::from_vec(r, c, take(r * c).to_vec());
        out.decoder.output.bias = take(r).to_vec();
    }
    if blocks.caption_map {
        let (r, c) = (inst.caption_map.weight.rows(), inst.caption_map.weight.cols());
        out.caption_map.weight = Mat::from_vec(r, c, take(r * c).to_vec());
        out.caption_map.bias = take(r).to_vec();
    }
    if blocks.grounder {
        let (r, c) = (inst.grounder.fuse.weight.rows(), inst.grounder.fuse.weight.cols());
        out.grounder.fuse.weight = Mat::from_vec(r, c, take(r * c).to_vec());
        out.grounder.fuse.bias = take(r).to_vec();
    }
    if blocks.pooling {
        if let Some(fc) = &inst.spec.params.fc {
            let (r, c) = (fc.weight.rows(), fc.weight.cols());
            let weight = Mat::from_vec(r, c, take(r * c).to_vec());
            let bias = take(r).to_vec();
            out.spec.params.fc = Some(Affine { weight, bias });
        }
        if let Some(conv) = &inst.spec.params.conv {
            let d = conv.bias.len();
            let mut kernel = Vec::with_capacity(3);
            for _ in 0..3 {
                kernel.push(Mat::from_vec(d, d, take(d * d).to_vec()));
            }
            let bias = take(d).to_vec();
            out.spec.params.conv = Some(ConvParams { kernel, bias });
        }
    }
    debug_assert_eq!(k, vars.len());
    out
}

fn analytic_flat(inst: &Instance, blocks: Blocks, bundle: &LossBundle) -> Vec<f64> {
    let mut out = Vec::new();
    let grad_or_zeros = |key: GradKey, rows: usize, cols: usize, out: &mut Vec<f64>| {
        match bundle.grad(key) {
            Some(g) => out.extend_from_slice(g.data()),
            None => out.extend(std::iter::repeat(0.0).take(rows * cols)),
        }
    };
    if blocks.clips_and_text {
        for (i, item) in inst.batch.items().iter().enumerate() {
            grad_or_zeros(GradKey::ClipEmbeddings(i), item.clips.rows(), item.clips.cols(), &mut out);
        }
        for (i, item) in inst.batch.items().iter().enumerate() {
            grad_or_zeros(GradKey::TextEmbedding(i), 1, item.text.len(), &mut out);
        }
    }
    if blocks.decoder {
        let (r, c) = (inst.decoder.output.weight.rows(), inst.decoder.output.weight.cols());
        grad_or_zeros(GradKey::DecoderWeight, r, c, &mut out);
        grad_or_zeros(GradKey::DecoderBias, 1, r, &mut out);
    }
    if blocks.caption_map {
        let (r, c) = (inst.caption_map.weight.rows(), inst.caption_map.weight.cols());
        grad_or_zeros(GradKey::CaptionMapWeight, r, c, &mut out);
        grad_or_zeros(GradKey::CaptionMapBias, 1, r, &mut out);
    }
    if blocks.grounder {
        let (r, c) = (inst.grounder.fuse.weight.rows(), inst.grounder.fuse.weight.cols());
        grad_or_zeros(GradKey::GrounderWeight, r, c, &mut out);
        grad_or_zeros(GradKey::GrounderBias, 1, r, &mut out);
    }
    if blocks.pooling {
        if let Some(fc) = &inst.spec.params.fc {
            grad_or_zeros(GradKey::FcPoolWeight, fc.weight.rows(), fc.weight.cols(), &mut out);
            grad_or_zeros(GradKey::FcPoolBias, 1, fc.bias.len(), &mut out);
        }
        if let Some(conv) = &inst.spec.params.conv {
            let d = conv.bias.len();
            for tap in 0..3 {
                grad_or_zeros(GradKey::ConvPoolKernel(tap), d, d, &mut out);
            }
            grad_or_zeros(GradKey::ConvPoolBias, 1, d, &mut out);
        }
    }
    out
}

fn eval_objective(objective: &'static str, inst: &Instance) -> f64 {
    match objective {
        "gt-contrastive" => gt_clip_contrastive_loss(&inst.batch, &inst.weights).unwrap().value,
        "gt-caption" => {
            gt_caption_loss(&inst.batch, &inst.sentences, &inst.caption_map, &inst.decoder)
                .unwrap()
                .value
        }
        "grounding" => grounding_loss(&inst.batch, &inst.grounder).unwrap().value,
        "support-contrastive" => {
            let pooled = pool_batch(&inst.batch, &inst.spec).unwrap();
            support_contrastive_loss(&pooled, &inst.batch, &inst.spec, &inst.weights)
                .unwrap()
                .value
        }
        "support-caption" => {
            let pooled = pool_batch(&inst.batch, &inst.spec).unwrap();
            support_caption_loss(&inst.batch, &pooled, &inst.spec, &inst.sentences, &inst.decoder)
                .unwrap()
                .value
        }
        "combined" => combined_bundle(inst).value,
        other => panic!("unknown objective {other}"),
    }
}

/// The combined objective in support-set mode: grounding + weighted
/// support contrastive + weighted support caption.
fn combined_bundle(inst: &Instance) -> LossBundle {
    let l_vg = grounding_loss(&inst.batch, &inst.grounder).unwrap();
    let pooled = pool_batch(&inst.batch, &inst.spec).unwrap();
    let l_c = support_contrastive_loss(&pooled, &inst.batch, &inst.spec, &inst.weights).unwrap();
    let l_p =
        support_caption_loss(&inst.batch, &pooled, &inst.spec, &inst.sentences, &inst.decoder)
            .unwrap();
    total_loss(&l_vg, &l_c, &l_p, &inst.weights)
}

fn bundle_for(objective: &'static str, inst: &Instance) -> LossBundle {
    match objective {
        "gt-contrastive" => gt_clip_contrastive_loss(&inst.batch, &inst.weights).unwrap(),
        "gt-caption" => {
            gt_caption_loss(&inst.batch, &inst.sentences, &inst.caption_map, &inst.decoder).unwrap()
        }
        "grounding" => grounding_loss(&inst.batch, &inst.grounder).unwrap(),
        "support-contrastive" => {
            let pooled = pool_batch(&inst.batch, &inst.spec).unwrap();
            support_contrastive_loss(&pooled, &inst.batch, &inst.spec, &inst.weights).unwrap()
        }
        "support-caption" => {
            let pooled = pool_batch(&inst.batch, &inst.spec).unwrap();
            support_caption_loss(&inst.batch, &pooled, &inst.spec, &inst.sentences, &inst.decoder)
                .unwrap()
        }
        "combined" => combined_bundle(inst),
        other => panic!("unknown objective {other}"),
    }
}

fn blocks_for(objective: &'static str) -> Blocks {
    match objective {
        "gt-contrastive" => Blocks { clips_and_text: true, ..Default::default() },
        "gt-caption" => Blocks {
            clips_and_text: true,
            decoder: true,
            caption_map: true,
            ..Default::default()
        },
        "grounding" => Blocks { clips_and_text: true, grounder: true, ..Default::default() },
        "support-contrastive" => {
            Blocks { clips_and_text: true, pooling: true, ..Default::default() }
        }
        "support-caption" => {
            Blocks { clips_and_text: true, decoder: true, pooling: true, ..Default::default() }
        }
        "combined" => Blocks {
            clips_and_text: true,
            decoder: true,
            grounder: true,
            pooling: true,
            ..Default::default()
        },
        other => panic!("unknown objective {other}"),
    }
}

/// Check one objective on one instance; returns (max rel error, coords).
fn check_instance(objective: &'static str, inst: &Instance, step: f64) -> Result<(f64, usize)> {
    let blocks = blocks_for(objective);
    let vars = flatten(inst, blocks);
    let bundle = bundle_for(objective, inst);
    let analytic = analytic_flat(inst, blocks, &bundle);
    let f = |v: &[f64]| eval_objective(objective, &rebuild(inst, blocks, v));
    let numeric = finite_diff_gradient(f, &vars, step)?;
    let mut max_err = 0.0f64;
    for (a, n) in analytic.iter().zip(&numeric) {
        max_err = max_err.max(relative_error(*a, *n));
    }
    Ok((max_err, vars.len()))
}

const CELL_OBJECTIVES: [&str; 3] = ["support-contrastive", "support-caption", "combined"];
const GLOBAL_OBJECTIVES: [&str; 3] = ["gt-contrastive", "gt-caption", "grounding"];

/// End-to-end check: central differences over every trainable parameter of
/// the full pipeline against the analytic parameter gradients.
fn check_end_to_end(
    seed: u64,
    tag: u64,
    cell: (SupportConstruction, PoolingMethod),
    step: f64,
) -> Result<(f64, usize)> {
    let (construction, method) = cell;
    let dims = ModelDims { dim: 8, dim_video: 10, dim_text: 6, vocab_size: 9, t_max: 6 };
    let world = SyntheticWorldConfig {
        n_entities: 4,
        n_actions: 3,
        dim_video: dims.dim_video,
        dim_text: dims.dim_text,
        t_clips: 6,
        vocab_size: dims.vocab_size,
        noise_sigma: 0.3,
        entities_per_video: 2,
        gt_fraction: (0.2, 0.5),
        clip_duration_s: 1.0,
    };
    let cfg = ObjectiveConfig {
        mode: SupervisionMode::SupportSet,
        toggles: ObjectiveToggles::both(),
        weights: LossWeights::new(0.1, 0.1, 0.1).unwrap(),
        normalize_embeddings: true,
    };
    let mut attempt = 0u64;
    loop {
        let data = crate::grounding::generate_synthetic_dataset(
            &world,
            seed ^ (0xE2E ^ tag.wrapping_add(attempt).wrapping_mul(0x9E37)),
            3,
        )?;
        let samples: Vec<&crate::grounding::GroundingSample> = data.iter().collect();
        let params =
            ModelParams::init(&dims, construction, method, 0.1, seed.wrapping_add(tag));
        if method == PoolingMethod::MaxPool {
            let embedded = embed(&params, &samples, true)?;
            if min_maxpool_gap(&embedded.batch, construction) < 1e-3 {
                attempt += 1;
                continue;
            }
        }
        let (_, grads) = forward_backward(&params, &cfg, &samples)?;
        let analytic = grads.to_flat();
        let vars = params.to_flat();
        let f = |v: &[f64]| {
            let mut p = params.clone();
            p.set_flat(v);
            let embedded = embed(&p, &samples, cfg.normalize_embeddings).unwrap();
            compute_losses(&p, &cfg, &embedded).unwrap().0.total
        };
        let numeric = finite_diff_gradient(f, &vars, step)?;
        let mut max_err = 0.0f64;
        for (a, n) in analytic.iter().zip(&numeric) {
            max_err = max_err.max(relative_error(*a, *n));
        }
        return Ok((max_err, vars.len()));
    }
}

/// Run the whole suite. Deterministic in `seed`; parallel over instances
/// (the max-reduction is order-independent).
pub fn run_suite(cfg: &SuiteConfig, seed: u64) -> Result<SuiteSummary> {
    let mut reports = Vec::new();

    // cell-independent objectives
    let global: Result<Vec<ObjectiveReport>> = GLOBAL_OBJECTIVES
        .par_iter()
        .map(|&objective| {
            let worst = (0..cfg.seeds_per_cell)
                .into_par_iter()
                .map(|k| {
                    let inst = random_instance(
                        seed,
                        hash_tag(objective, 0, k as u64),
                        (SupportConstruction::Video, PoolingMethod::AvgPool),
                    );
                    check_instance(objective, &inst, cfg.step)
                })
                .try_reduce(|| (0.0, 0), |a, b| Ok((a.0.max(b.0), a.1.max(b.1))))?;
            Ok(ObjectiveReport {
                objective,
                cell: None,
                max_rel_error: worst.0,
                coords_checked: worst.1,
            })
        })
        .collect();
    reports.extend(global?);

    // grid cells
    let mut cells = Vec::new();
    for construction in SupportConstruction::ALL {
        for method in PoolingMethod::ALL {
            cells.push((construction, method));
        }
    }
    let cell_reports: Result<Vec<Vec<ObjectiveReport>>> = cells
        .par_iter()
        .map(|&cell| {
            let mut out = Vec::new();
            for objective in CELL_OBJECTIVES {
                let worst = (0..cfg.seeds_per_cell)
                    .into_par_iter()
                    .map(|k| {
                        let inst = random_instance(
                            seed,
                            hash_tag(objective, cell_tag(cell), k as u64),
                            cell,
                        );
                        check_instance(objective, &inst, cfg.step)
                    })
                    .try_reduce(|| (0.0, 0), |a, b| Ok((a.0.max(b.0), a.1.max(b.1))))?;
                out.push(ObjectiveReport {
                    objective,
                    cell: Some(cell),
                    max_rel_error: worst.0,
                    coords_checked: worst.1,
                });
            }
            let worst = (0..cfg.end_to_end_seeds)
                .into_par_iter()
                .map(|k| check_end_to_end(seed, hash_tag("e2e", cell_tag(cell), k as u64), cell, cfg.step))
                .try_reduce(|| (0.0, 0), |a, b| Ok((a.0.max(b.0), a.1.max(b.1))))?;
            out.push(ObjectiveReport {
                objective: "end-to-end",
                cell: Some(cell),
                max_rel_error: worst.0,
                coords_checked: worst.1,
            });
            Ok(out)
        })
        .collect();
    for group in cell_reports? {
        reports.extend(group);
    }

    Ok(SuiteSummary { reports, tolerance: cfg.tolerance })
}

fn cell_tag(cell: (SupportConstruction, PoolingMethod)) -> u64 {
    (cell.0 as u64) * 16 + cell.1 as u64 + 1
}

fn hash_tag(objective: &str, cell: u64, k: u64) -> u64 {
    let mut h = 1469598103934665603u64; // FNV offset
    for b in objective.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(1099511628211);
    }
    h ^ (cell << 32) ^ k
}
