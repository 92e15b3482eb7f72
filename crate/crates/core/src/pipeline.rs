//! Toy end-to-end VideoQA: scorer -> relaxed top-k -> answer generator -> cross-entropy.
//!
//! The generator softly gates every frame feature with the relaxed k-hot
//! weights, so the answer loss reaches the scorer parameters. Inference swaps
//! the relaxation for a hard top-k' selection.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ParamId, ParameterStore, Primitive, Shape, Tensor};
use crate::error::{Error, Result};
use crate::sampler::{self, hard_topk, k_hot, relaxed_topk, SamplerConfig, SelectionMode, SelectionResult};
use crate::scoring::{
    lecun_matrix, score_frames, FrameSet, Mechanisms, QuestionEmbedding, ScoreBreakdown, ScoreNodes,
    ScorerDims, ScorerParams,
};

#[derive(Debug, Clone, PartialEq)]
pub struct VideoQAInstance {
    pub frames: FrameSet,
    pub question: QuestionEmbedding,
    /// Candidate answer embeddings, each of the question dimension.
    pub options: Vec<Vec<f64>>,
    pub answer_index: usize,
    pub planted_keyframes: Option<Vec<usize>>,
}

impl VideoQAInstance {
    pub fn validate(&self) -> Result<()> {
        let what = || format!("instance {}", self.frames.video_id);
        if self.options.len() < 2 {
            return Err(Error::Validation {
                what: what(),
                detail: "need at least two options".into(),
            });
        }
        if self.answer_index >= self.options.len() {
            return Err(Error::Validation {
                what: what(),
                detail: format!(
                    "answer index {} out of range for {} options",
                    self.answer_index,
                    self.options.len()
                ),
            });
        }
        for (n, o) in self.options.iter().enumerate() {
            if o.len() != self.question.dim() || o.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation {
                    what: what(),
                    detail: format!("option {n} has wrong dimension or non-finite entries"),
                });
            }
        }
        if let Some(p) = &self.planted_keyframes {
            if p.iter().any(|&i| i >= self.frames.len()) {
                return Err(Error::Validation {
                    what: what(),
                    detail: "planted keyframe index out of range".into(),
                });
            }
        }
        Ok(())
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }
}

/// Parameter handles of the answer generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeneratorParams {
    pub pool_w: ParamId,
    pub pool_b: ParamId,
    pub question_w: ParamId,
    pub question_b: ParamId,
    pub joint_w: ParamId,
    pub joint_b: ParamId,
    pub option_w: ParamId,
    pub option_b: ParamId,
}

impl GeneratorParams {
    pub const PREFIX: &'static str = "generator.";
    const NAMES: [&'static str; 8] = [
        "pool_w",
        "pool_b",
        "question_w",
        "question_b",
        "joint_w",
        "joint_b",
        "option_w",
        "option_b",
    ];

    fn shapes(dims: ScorerDims) -> [Shape; 8] {
        let ScorerDims { d_v, d_t, d_h, .. } = dims;
        [
            Shape::Matrix(d_h, d_v),
            Shape::Vector(d_h),
            Shape::Matrix(d_h, d_t),
            Shape::Vector(d_h),
            Shape::Matrix(d_h, 2 * d_h),
            Shape::Vector(d_h),
            Shape::Matrix(d_h, d_t),
            Shape::Vector(d_h),
        ]
    }

    pub fn init<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        dims: ScorerDims,
        rng: &mut R,
    ) -> Result<Self> {
        let shapes = Self::shapes(dims);
        let mut ids = Vec::with_capacity(8);
        for (name, shape) in Self::NAMES.iter().zip(shapes) {
            let value = match shape {
                Shape::Matrix(r, c) => lecun_matrix(r, c, rng),
                s => Tensor::zeros(s),
            };
            ids.push(store.insert(format!("{}{name}", Self::PREFIX), value)?);
        }
        Ok(Self::from_ids(&ids))
    }

    fn from_ids(ids: &[ParamId]) -> Self {
        GeneratorParams {
            pool_w: ids[0],
            pool_b: ids[1],
            question_w: ids[2],
            question_b: ids[3],
            joint_w: ids[4],
            joint_b: ids[5],
            option_w: ids[6],
            option_b: ids[7],
        }
    }

    /// Looks up generator parameters by name and checks their shapes against `dims`.
    pub fn from_store(store: &ParameterStore, dims: ScorerDims) -> Result<Self> {
        let ids = Self::NAMES
            .iter()
            .map(|n| {
                let name = format!("{}{n}", Self::PREFIX);
                store
                    .id(&name)
                    .ok_or_else(|| Error::contract(format!("missing parameter {name}")))
            })
            .collect::<Result<Vec<_>>>()?;
        for (&id, want) in ids.iter().zip(Self::shapes(dims)) {
            let got = store.shape(id);
            if got != want {
                return Err(Error::Shape {
                    op: "generator parameters",
                    left: got,
                    right: want,
                });
            }
        }
        Ok(Self::from_ids(&ids))
    }

    pub fn ids(&self) -> [ParamId; 8] {
        [
            self.pool_w,
            self.pool_b,
            self.question_w,
            self.question_b,
            self.joint_w,
            self.joint_b,
            self.option_w,
            self.option_b,
        ]
    }
}

/// Scorer and generator parameters sharing one store.
#[derive(Debug, Clone)]
pub struct Model {
    pub store: ParameterStore,
    pub scorer: ScorerParams,
    pub generator: GeneratorParams,
    pub mechanisms: Mechanisms,
}

impl Model {
    pub fn new(dims: ScorerDims, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let scorer = ScorerParams::init(&mut store, dims, &mut rng)?;
        let generator = GeneratorParams::init(&mut store, dims, &mut rng)?;
        Ok(Model {
            store,
            scorer,
            generator,
            mechanisms: Mechanisms::ALL,
        })
    }

    pub fn from_store(store: ParameterStore, mechanisms: Mechanisms) -> Result<Self> {
        let scorer = ScorerParams::from_store(&store)?;
        let generator = GeneratorParams::from_store(&store, scorer.dims)?;
        Ok(Model {
            store,
            scorer,
            generator,
            mechanisms,
        })
    }

    pub fn dims(&self) -> ScorerDims {
        self.scorer.dims
    }

    fn check_instance(&self, inst: &VideoQAInstance) -> Result<()> {
        inst.validate()?;
        let dims = self.dims();
        if inst.frames.dim() != dims.d_v || inst.question.dim() != dims.d_t {
            return Err(Error::Shape {
                op: "model input",
                left: Shape::Matrix(inst.frames.dim(), inst.question.dim()),
                right: Shape::Matrix(dims.d_v, dims.d_t),
            });
        }
        Ok(())
    }
}

/// Logits over the options given per-frame gate weights (a vector node of length M).
///
/// `pooled = sum_i w_i tanh(P h_i + b) / k`,
/// `joint = tanh(J [pooled; tanh(Q q + c)] + d)`, `logit_n = joint . (O a_n + e)`.
pub fn answer_logits(
    g: &mut Graph,
    store: &ParameterStore,
    params: &GeneratorParams,
    instance: &VideoQAInstance,
    weights: NodeId,
    k: usize,
) -> Result<NodeId> {
    let m = instance.num_frames();
    if g.shape(weights) != Shape::Vector(m) {
        return Err(Error::Shape {
            op: "answer_logits",
            left: g.shape(weights),
            right: Shape::Vector(m),
        });
    }
    if k == 0 {
        return Err(Error::contract("answer_logits needs k >= 1"));
    }
    let [pool_w, pool_b, question_w, question_b, joint_w, joint_b, option_w, option_b] =
        params.ids().map(|id| g.param(store, id));

    let mut terms = Vec::with_capacity(m);
    for i in 0..m {
        let h = g.constant_vector(instance.frames.row(i).to_vec());
        let feat = g.affine_tanh(pool_w, pool_b, h)?;
        let w = g.element(weights, i)?;
        terms.push(g.scalar_mul(w, feat)?);
    }
    let pooled = g.add_all(&terms)?;
    let pooled = g.scale(pooled, 1.0 / k as f64)?;

    let q = g.constant_vector(instance.question.vector().to_vec());
    let qp = g.affine_tanh(question_w, question_b, q)?;
    let both = g.concat(&[pooled, qp])?;
    let joint = g.affine_tanh(joint_w, joint_b, both)?;

    let logits = instance
        .options
        .iter()
        .map(|a| {
            let a = g.constant_vector(a.clone());
            let proj = g.matvec(option_w, a)?;
            let proj = g.add(proj, option_b)?;
            g.dot(joint, proj)
        })
        .collect::<Result<Vec<_>>>()?;
    g.concat(&logits)
}

/// Softmax cross-entropy against the correct option. The only training objective.
pub fn loss(g: &mut Graph, logits: NodeId, answer_index: usize) -> Result<NodeId> {
    g.cross_entropy(logits, answer_index)
}

/// How frames are chosen for the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrameSelector {
    /// Aggregate of the enabled scoring mechanisms.
    Scored,
    /// Evenly spaced frames.
    Uniform,
    /// Seeded uniform draw without replacement.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub sampler: SamplerConfig,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mechanisms: Mechanisms,
    pub selector: FrameSelector,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            sampler: SamplerConfig::default(),
            learning_rate: 0.1,
            epochs: 10,
            batch_size: 16,
            seed: 0,
            mechanisms: Mechanisms::ALL,
            selector: FrameSelector::Scored,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::contract(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::contract("epochs and batch size must be at least 1"));
        }
        if !(self.sampler.tau > 0.0) {
            return Err(Error::domain("train config", "tau must be > 0"));
        }
        if self.sampler.k == 0 {
            return Err(Error::contract("k must be at least 1"));
        }
        if self.selector == FrameSelector::Scored {
            self.mechanisms.check()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StepReport {
    pub step: usize,
    pub mean_loss: f64,
    /// L2 norm of the gradient over all scorer / generator tensors.
    pub scorer_grad_norm: f64,
    pub generator_grad_norm: f64,
    /// Per-tensor gradient norms keyed by parameter name.
    pub grad_norms: BTreeMap<String, f64>,
}

/// One instance's forward pass on its own graph.
#[derive(Debug)]
pub struct InstanceGraph {
    pub graph: Graph,
    pub loss: NodeId,
    pub logits: NodeId,
    pub selection: SelectionResult,
    pub scores: Option<ScoreNodes>,
}

impl InstanceGraph {
    /// Number of cross-entropy nodes on the graph.
    pub fn loss_nodes(&self) -> usize {
        self.graph
            .count_ops(|p| matches!(p, Primitive::CrossEntropy { .. }))
    }
}

/// Evenly spaced indices `floor((2j + 1) M / 2k)`; the identity when `k = M`.
pub fn uniform_indices(m: usize, k: usize) -> Result<Vec<usize>> {
    sampler::check_k(k, m)?;
    Ok((0..k).map(|j| (2 * j + 1) * m / (2 * k)).collect())
}

/// `k` distinct indices drawn uniformly, ascending.
pub fn random_indices<R: Rng + ?Sized>(m: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    sampler::check_k(k, m)?;
    let mut idx: Vec<usize> = (0..m).collect();
    idx.shuffle(rng);
    let mut picked = idx[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

fn fixed_selection(m: usize, indices: Vec<usize>, mode: SelectionMode) -> SelectionResult {
    SelectionResult {
        relaxed_weights: k_hot(m, &indices),
        indices,
        mode,
        tau: 0.0,
        seed: None,
    }
}

/// Training-time forward pass for one instance.
pub fn instance_forward<R: Rng + ?Sized>(
    model: &Model,
    inst: &VideoQAInstance,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<InstanceGraph> {
    let mut g = Graph::new();
    let m = inst.num_frames();
    let k = config.sampler.k;
    let (selection, weights, scores) = match config.selector {
        FrameSelector::Scored => {
            let nodes = score_frames(
                &mut g,
                &model.store,
                &model.scorer,
                &inst.frames,
                &inst.question,
                config.mechanisms,
            )?;
            let sel = relaxed_topk(&mut g, &nodes.aggregate, &config.sampler, rng)?;
            (sel.result, sel.weights, Some(nodes))
        }
        FrameSelector::Uniform => {
            let sel = fixed_selection(m, uniform_indices(m, k)?, SelectionMode::TrainDeterministic);
            let w = g.constant_vector(sel.relaxed_weights.clone());
            (sel, w, None)
        }
        FrameSelector::Random => {
            let sel = fixed_selection(m, random_indices(m, k, rng)?, SelectionMode::TrainStochastic);
            let w = g.constant_vector(sel.relaxed_weights.clone());
            (sel, w, None)
        }
    };
    let logits = answer_logits(&mut g, &model.store, &model.generator, inst, weights, k)?;
    let loss = loss(&mut g, logits, inst.answer_index)?;
    Ok(InstanceGraph {
        graph: g,
        loss,
        logits,
        selection,
        scores,
    })
}

/// One gradient-descent update on the mean loss of `batch`.
pub fn training_step<R: Rng + ?Sized>(
    model: &mut Model,
    batch: &[&VideoQAInstance],
    config: &TrainConfig,
    rng: &mut R,
    step: usize,
) -> Result<StepReport> {
    config.validate()?;
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    for inst in batch {
        model.check_instance(inst)?;
        sampler::check_k(config.sampler.k, inst.num_frames())?;
    }

    model.store.zero_grad();
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for inst in batch {
        let mut ig = instance_forward(model, inst, config, rng)?;
        total += ig.graph.scalar_value(ig.loss);
        let scaled = ig.graph.scale(ig.loss, scale)?;
        ig.graph.backward(scaled, &mut model.store)?;
    }

    let mut grad_norms = BTreeMap::new();
    for (_, p) in model.store.iter() {
        grad_norms.insert(p.name.clone(), p.grad.norm());
    }
    let module_norm = |ids: &[ParamId]| {
        ids.iter()
            .map(|&id| model.store.grad_norm(id).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let scorer_grad_norm = module_norm(&model.scorer.ids());
    let generator_grad_norm = module_norm(&model.generator.ids());

    if config.learning_rate > 0.0 {
        model.store.sgd_step(config.learning_rate);
    }
    Ok(StepReport {
        step,
        mean_loss: total * scale,
        scorer_grad_norm,
        generator_grad_norm,
        grad_norms,
    })
}

/// Runs `config.epochs` passes over `data` in seeded shuffled mini-batches.
/// `on_step` sees every step report as it is produced.
pub fn train(
    model: &mut Model,
    data: &[VideoQAInstance],
    config: &TrainConfig,
    mut on_step: impl FnMut(&StepReport),
) -> Result<Vec<StepReport>> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::contract("empty training set"));
    }
    for inst in data {
        model.check_instance(inst)?;
        sampler::check_k(config.sampler.k, inst.num_frames())?;
    }
    model.mechanisms = config.mechanisms;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut reports = Vec::new();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&VideoQAInstance> = chunk.iter().map(|&i| &data[i]).collect();
            let r = training_step(model, &batch, config, &mut rng, reports.len())?;
            on_step(&r);
            reports.push(r);
        }
    }
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Inference {
    pub answer: usize,
    pub logits: Vec<f64>,
    pub selection: SelectionResult,
    pub scores: ScoreBreakdown,
}

/// Deterministic inference: hard top-k' over the aggregate scores, logits over
/// the exact k'-hot gates, argmax answer with ties toward the lower option.
pub fn infer(model: &Model, inst: &VideoQAInstance, k_prime: usize) -> Result<Inference> {
    model.check_instance(inst)?;
    sampler::check_k(k_prime, inst.num_frames())?;
    let mut g = Graph::new();
    let nodes = score_frames(
        &mut g,
        &model.store,
        &model.scorer,
        &inst.frames,
        &inst.question,
        model.mechanisms,
    )?;
    let scores = nodes.breakdown(&g);
    let selection = hard_topk(&scores.aggregate, k_prime)?;
    let (answer, logits) = answer_with_selection(model, inst, &selection.indices)?;
    Ok(Inference {
        answer,
        logits,
        selection,
        scores,
    })
}

/// Answer using an externally chosen frame subset (exact k-hot gates).
pub fn answer_with_selection(
    model: &Model,
    inst: &VideoQAInstance,
    indices: &[usize],
) -> Result<(usize, Vec<f64>)> {
    let m = inst.num_frames();
    sampler::check_k(indices.len(), m)?;
    if indices.iter().any(|&i| i >= m) {
        return Err(Error::contract("selected frame index out of range"));
    }
    let mut g = Graph::new();
    let w = g.constant_vector(k_hot(m, indices));
    let logits = answer_logits(&mut g, &model.store, &model.generator, inst, w, indices.len())?;
    let logits = g.value(logits).data().to_vec();
    Ok((argmax(&logits), logits))
}

/// Index of the largest value, ties toward the lower index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use rand_distr::{Distribution, Normal};

    use super::*;
    use crate::autodiff::grad_check;

    fn small_dims() -> ScorerDims {
        ScorerDims {
            d_v: 6,
            d_t: 4,
            d_h: 5,
            d_p: 3,
        }
    }

    fn random_instance(seed: u64, m: usize, n: usize, dims: ScorerDims) -> VideoQAInstance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nd = Normal::new(0.0, 1.0).unwrap();
        let mut v = |len: usize| (0..len).map(|_| nd.sample(&mut rng)).collect::<Vec<f64>>();
        let rows: Vec<Vec<f64>> = (0..m).map(|_| v(dims.d_v)).collect();
        let q = v(dims.d_t);
        let options = (0..n).map(|_| v(dims.d_t)).collect();
        VideoQAInstance {
            frames: FrameSet::from_rows(format!("v{seed}"), &rows).unwrap(),
            question: QuestionEmbedding::new("q", q).unwrap(),
            options,
            answer_index: (seed as usize) % n,
            planted_keyframes: None,
        }
    }

    #[test]
    fn zero_generator_gives_uniform_logits() {
        let dims = small_dims();
        let mut model = Model::new(dims, 1).unwrap();
        for id in model.generator.ids() {
            let shape = model.store.shape(id);
            model.store.set_value(id, Tensor::zeros(shape)).unwrap();
        }
        let inst = random_instance(3, 6, 5, dims);
        let (_, logits) = answer_with_selection(&model, &inst, &[0, 2]).unwrap();
        assert!(logits.iter().all(|&l| l == 0.0));
        let mut g = Graph::new();
        let l = g.constant_vector(logits);
        let ce = loss(&mut g, l, 2).unwrap();
        assert!((g.scalar_value(ce) - 1.609_437_912_434_100_3).abs() < 1e-15);
    }

    #[test]
    fn k_hot_pooling_is_mean_of_selected_frames() {
        let dims = small_dims();
        let model = Model::new(dims, 2).unwrap();
        let inst = random_instance(4, 6, 3, dims);
        let (_, a) = answer_with_selection(&model, &inst, &[1, 4]).unwrap();
        // same result from an instance holding only the selected frames and all-ones gates
        let rows: Vec<Vec<f64>> = [1, 4].iter().map(|&i| inst.frames.row(i).to_vec()).collect();
        let sub = VideoQAInstance {
            frames: FrameSet::from_rows("sub", &rows).unwrap(),
            ..inst.clone()
        };
        let (_, b) = answer_with_selection(&model, &sub, &[0, 1]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn logits_match_straight_line_reevaluation() {
        let dims = small_dims();
        let model = Model::new(dims, 11).unwrap();
        let inst = random_instance(5, 4, 3, dims);
        let w = [0.7, 0.0, 1.2, 0.1];
        let mut g = Graph::new();
        let wn = g.constant_vector(w.to_vec());
        let node = answer_logits(&mut g, &model.store, &model.generator, &inst, wn, 2).unwrap();
        let got = g.value(node).data().to_vec();

        let val = |id| model.store.value(id).data().to_vec();
        let p = model.generator;
        let affine = |w: &[f64], b: &[f64], x: &[f64]| -> Vec<f64> {
            b.iter()
                .enumerate()
                .map(|(r, bv)| bv + (0..x.len()).map(|c| w[r * x.len() + c] * x[c]).sum::<f64>())
                .collect()
        };
        let mut pooled = vec![0.0; dims.d_h];
        for (i, wi) in w.iter().enumerate() {
            let f = affine(&val(p.pool_w), &val(p.pool_b), inst.frames.row(i));
            for (acc, v) in pooled.iter_mut().zip(f) {
                *acc += wi * v.tanh() / 2.0;
            }
        }
        let qp: Vec<f64> = affine(&val(p.question_w), &val(p.question_b), inst.question.vector())
            .into_iter()
            .map(f64::tanh)
            .collect();
        let both: Vec<f64> = pooled.into_iter().chain(qp).collect();
        let joint: Vec<f64> = affine(&val(p.joint_w), &val(p.joint_b), &both)
            .into_iter()
            .map(f64::tanh)
            .collect();
        for (n, opt) in inst.options.iter().enumerate() {
            let proj = affine(&val(p.option_w), &val(p.option_b), opt);
            let want: f64 = joint.iter().zip(&proj).map(|(a, b)| a * b).sum();
            assert!((got[n] - want).abs() < 1e-13, "{} vs {want}", got[n]);
        }
    }

    #[test]
    fn weight_length_mismatch_is_a_shape_error() {
        let dims = small_dims();
        let model = Model::new(dims, 1).unwrap();
        let inst = random_instance(1, 4, 3, dims);
        let mut g = Graph::new();
        let w = g.constant_vector(vec![1.0; 3]);
        assert!(matches!(
            answer_logits(&mut g, &model.store, &model.generator, &inst, w, 2),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn loss_limits_and_monotonicity() {
        let mut g = Graph::new();
        let l = g.constant_vector(vec![50.0, 0.0, 0.0]);
        let ce = loss(&mut g, l, 0).unwrap();
        assert!(g.scalar_value(ce) < 1e-6);
        let mut prev = f64::INFINITY;
        for x in [-1.0, 0.0, 0.5, 2.0] {
            let l = g.constant_vector(vec![x, 0.3, -0.2]);
            let ce = loss(&mut g, l, 0).unwrap();
            assert!(g.scalar_value(ce) < prev);
            prev = g.scalar_value(ce);
        }
        assert!(matches!(loss(&mut g, l, 3), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_untouched() {
        let dims = small_dims();
        let mut model = Model::new(dims, 4).unwrap();
        let before = model.store.clone();
        let inst = random_instance(9, 6, 3, dims);
        let config = TrainConfig {
            sampler: SamplerConfig::stochastic(2, 0.5),
            learning_rate: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = training_step(&mut model, &[&inst], &config, &mut rng, 0).unwrap();
        assert!(r.mean_loss.is_finite() && r.mean_loss > 0.0);
        for ((_, a), (_, b)) in before.iter().zip(model.store.iter()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
    }

    #[test]
    fn empty_scorer_and_oversized_k_are_rejected_before_mutation() {
        let dims = small_dims();
        let mut model = Model::new(dims, 4).unwrap();
        let before = model.store.clone();
        let inst = random_instance(9, 6, 3, dims);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let empty = TrainConfig {
            sampler: SamplerConfig::stochastic(2, 0.5),
            mechanisms: Mechanisms::with_ablated("qfs,qfm,ifd").unwrap(),
            ..Default::default()
        };
        let err = training_step(&mut model, &[&inst], &empty, &mut rng, 0).unwrap_err();
        assert!(err.to_string().contains("empty scorer"));
        let big_k = TrainConfig {
            sampler: SamplerConfig::stochastic(7, 0.5),
            ..Default::default()
        };
        let small = random_instance(2, 8, 3, dims);
        let err = training_step(&mut model, &[&small, &inst], &big_k, &mut rng, 0).unwrap_err();
        assert!(err.to_string().contains("exceeds frame count"));
        for ((_, a), (_, b)) in before.iter().zip(model.store.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn gradients_reach_exactly_the_unmasked_mechanisms() {
        let dims = small_dims();
        let inst = random_instance(21, 6, 3, dims);
        for ablate in ["", "qfs", "qfm", "ifd", "qfs,qfm"] {
            let mech = Mechanisms::with_ablated(ablate).unwrap();
            let mut model = Model::new(dims, 8).unwrap();
            let config = TrainConfig {
                sampler: SamplerConfig::stochastic(2, 0.5),
                mechanisms: mech,
                learning_rate: 0.0,
                ..Default::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let r = training_step(&mut model, &[&inst], &config, &mut rng, 0).unwrap();
            let s = model.scorer;
            let mut used: Vec<ParamId> = Vec::new();
            if mech.qfs {
                used.extend(s.qfs_ids());
            }
            if mech.qfm {
                used.extend(s.qfm_ids());
            }
            for id in s.ids() {
                let n = model.store.grad_norm(id);
                if used.contains(&id) {
                    assert!(n > 0.0, "{ablate}: {} has zero gradient", model.store.get(id).name);
                } else {
                    assert_eq!(n, 0.0, "{ablate}: {} should be masked", model.store.get(id).name);
                }
            }
            assert!(r.generator_grad_norm > 0.0);
        }
    }

    #[test]
    fn one_loss_node_per_instance() {
        let dims = small_dims();
        let model = Model::new(dims, 1).unwrap();
        let inst = random_instance(1, 6, 3, dims);
        let config = TrainConfig {
            sampler: SamplerConfig::stochastic(3, 0.1),
            ..Default::default()
        };
        let ig = instance_forward(&model, &inst, &config, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(ig.loss_nodes(), 1);
        assert_eq!(ig.graph.len() - 1, ig.loss.index());
    }

    #[test]
    fn pipeline_loss_gradient_matches_finite_differences() {
        let dims = small_dims();
        let mut model = Model::new(dims, 13).unwrap();
        let inst = random_instance(14, 6, 3, dims);
        let config = TrainConfig {
            sampler: SamplerConfig::stochastic(2, 0.5),
            ..Default::default()
        };
        let (generator, scorer) = (model.generator, model.scorer);
        let ids: Vec<ParamId> = scorer.ids().to_vec();
        let report = grad_check(
            |g, store| {
                let nodes = score_frames(g, store, &scorer, &inst.frames, &inst.question, Mechanisms::ALL)?;
                let mut rng = ChaCha8Rng::seed_from_u64(99);
                let sel = relaxed_topk(g, &nodes.aggregate, &config.sampler, &mut rng)?;
                let logits = answer_logits(g, store, &generator, &inst, sel.weights, 2)?;
                loss(g, logits, inst.answer_index)
            },
            &mut model.store,
            Some(&ids),
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:#?}");
    }

    #[test]
    fn single_instance_overfits() {
        let dims = small_dims();
        let mut model = Model::new(dims, 5).unwrap();
        let inst = random_instance(6, 8, 4, dims);
        let config = TrainConfig {
            sampler: SamplerConfig::stochastic(3, 0.1),
            learning_rate: 0.5,
            epochs: 200,
            batch_size: 1,
            ..Default::default()
        };
        let reports = train(&mut model, std::slice::from_ref(&inst), &config, |_| {}).unwrap();
        assert!(reports.last().unwrap().mean_loss < 0.05, "{}", reports.last().unwrap().mean_loss);
    }

    #[test]
    fn inference_is_deterministic_and_uses_all_frames_at_k_equals_m() {
        let dims = small_dims();
        let model = Model::new(dims, 5).unwrap();
        let inst = random_instance(7, 6, 4, dims);
        let a = infer(&model, &inst, 6).unwrap();
        let b = infer(&model, &inst, 6).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.selection.indices, (0..6).collect::<Vec<_>>());
        assert!(infer(&model, &inst, 7).is_err());
        let c = infer(&model, &inst, 2).unwrap();
        assert_eq!(c.selection.indices.len(), 2);
        assert_eq!(c.selection.mode, SelectionMode::Inference);
    }

    #[test]
    fn baseline_index_helpers() {
        assert_eq!(uniform_indices(32, 8).unwrap(), vec![2, 6, 10, 14, 18, 22, 26, 30]);
        assert_eq!(uniform_indices(5, 5).unwrap(), vec![0, 1, 2, 3, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = random_indices(10, 4, &mut rng).unwrap();
        assert_eq!(r.len(), 4);
        assert!(r.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(argmax(&[0.1, 0.5, 0.5]), 1);
    }
}
