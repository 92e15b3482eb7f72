//! Synthetic VideoQA benchmark with planted keyframes and a redundancy trap.
//!
//! Every dataset draws one random orthonormal basis of the frame space. Its
//! first `d_t` columns (`Phi_q`) carry question content, the next `d_t`
//! (`Phi_a`) carry answer content, and an optional last column `mu` is a
//! question-independent keyframe marker. Per instance:
//!
//! * planted frames: `alpha Phi_q q + eta mu + beta Phi_a a* + rho xi_i + sigma e_i`;
//! * redundancy cluster: near-copies of one frame
//!   `alpha Phi_q q + eta mu + beta Phi_a z + rho xi`, which looks like a
//!   keyframe but says nothing about the answer;
//! * decoys: `alpha Phi_q q + beta Phi_a z + rho xi` (no marker);
//! * salient distractors: `alpha Phi_q q' + eta mu + beta Phi_a z + rho xi`
//!   with `q'` an unrelated random question;
//! * every other frame: isotropic noise of unit expected norm.
//!
//! `xi` are random unit scene directions, `e` Gaussian noise of unit expected
//! norm, and `z` a random unit direction orthogonal to every option. Outside
//! the planted frames the option directions are projected out entirely.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::pipeline::{
    answer_with_selection, argmax, infer, random_indices, train, uniform_indices, FrameSelector,
    Model, TrainConfig, VideoQAInstance,
};
use crate::scoring::{pairwise_similarity, FrameSet, Mechanisms, QuestionEmbedding, ScorerDims};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub videos: usize,
    /// Frames per video.
    pub frames: usize,
    /// Answer options per question.
    pub options: usize,
    /// Planted keyframes per question.
    pub planted: usize,
    pub cluster_size: usize,
    /// Question-aligned frames without the keyframe marker.
    pub decoys: usize,
    /// Marked frames unrelated to the question.
    pub salient: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub d_v: usize,
    pub d_t: usize,
    /// Weight of the question direction in planted and cluster frames.
    pub question_weight: f64,
    /// Weight of the answer direction in planted frames.
    pub answer_weight: f64,
    /// Weight of the per-frame scene direction.
    pub scene_weight: f64,
    /// Weight of the question-independent keyframe marker; 0 disables it.
    pub marker_weight: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            videos: 200,
            frames: 32,
            options: 5,
            planted: 3,
            cluster_size: 6,
            decoys: 0,
            salient: 0,
            noise_sigma: 0.05,
            seed: 0,
            d_v: 64,
            d_t: 32,
            question_weight: 1.0,
            answer_weight: 1.0,
            scene_weight: 1.0,
            marker_weight: 0.0,
        }
    }
}

impl BenchConfig {
    /// The ablation benchmark: every mechanism has a distractor only it can reject.
    pub fn adversarial() -> Self {
        BenchConfig {
            decoys: 4,
            salient: 4,
            marker_weight: 1.0,
            d_v: 40,
            d_t: 16,
            ..BenchConfig::default()
        }
    }

    pub fn with_dims(mut self, dims: ScorerDims) -> Self {
        self.d_v = dims.d_v;
        self.d_t = dims.d_t;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::contract(format!("bench config: {msg}")));
        if self.videos == 0 {
            return fail("need at least one video".into());
        }
        if self.planted == 0 || self.planted >= self.frames {
            return fail(format!(
                "planted keyframes r = {} must satisfy 1 <= r < M = {}",
                self.planted, self.frames
            ));
        }
        let structured = self.planted + self.cluster_size + self.decoys + self.salient;
        if structured > self.frames {
            return fail(format!(
                "r + cluster + decoys + salient = {structured} exceeds M = {}",
                self.frames
            ));
        }
        if self.options < 2 || self.options >= self.d_t {
            return fail(format!(
                "options N = {} must satisfy 2 <= N < d_t = {}",
                self.options, self.d_t
            ));
        }
        let need = 2 * self.d_t + usize::from(self.marker_weight > 0.0);
        if self.d_v < need {
            return fail(format!("d_v = {} must be at least {need}", self.d_v));
        }
        let weights = [
            self.noise_sigma,
            self.question_weight,
            self.answer_weight,
            self.scene_weight,
            self.marker_weight,
        ];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) || self.answer_weight == 0.0 {
            return fail("signal weights must be finite and non-negative, answer weight positive".into());
        }
        Ok(())
    }
}

/// A generated benchmark together with its answer subspace.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: BenchConfig,
    pub instances: Vec<VideoQAInstance>,
    /// Columns of `Phi_a`, each of length `d_v`.
    pub answer_basis: Vec<Vec<f64>>,
}

impl Dataset {
    /// SHA-256 over every stored value (bit patterns) and label, hex encoded.
    pub fn hash(&self) -> String {
        dataset_hash(&self.instances)
    }

    /// Splits off the last `test` instances as a held-out set.
    pub fn split(&self, test: usize) -> Result<(&[VideoQAInstance], &[VideoQAInstance])> {
        if test == 0 || test >= self.instances.len() {
            return Err(Error::contract(format!(
                "test split {test} must be in 1..{}",
                self.instances.len()
            )));
        }
        Ok(self.instances.split_at(self.instances.len() - test))
    }

    /// Answer read straight off the planted frames: the option with the
    /// largest inner product with `Phi_a^T mean(planted)`.
    pub fn oracle_answer(&self, inst: &VideoQAInstance) -> Result<usize> {
        let planted = inst
            .planted_keyframes
            .as_ref()
            .ok_or_else(|| Error::contract("instance has no planted keyframes"))?;
        let d_v = inst.frames.dim();
        let mut mean = vec![0.0; d_v];
        for &i in planted {
            for (m, v) in mean.iter_mut().zip(inst.frames.row(i)) {
                *m += v / planted.len() as f64;
            }
        }
        let readout: Vec<f64> = self.answer_basis.iter().map(|c| dot(c, &mean)).collect();
        let scores: Vec<f64> = inst.options.iter().map(|a| dot(a, &readout)).collect();
        Ok(argmax(&scores))
    }

    /// Fraction of instances the oracle selector and readout answer correctly.
    pub fn oracle_accuracy(&self) -> Result<f64> {
        let mut correct = 0;
        for inst in &self.instances {
            if self.oracle_answer(inst)? == inst.answer_index {
                correct += 1;
            }
        }
        Ok(correct as f64 / self.instances.len() as f64)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    loop {
        let v = gaussian(rng, n);
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Gram-Schmidt on Gaussian draws: `count` orthonormal vectors of length `n`,
/// the first `fixed.len()` of which are `fixed` (assumed orthonormal).
fn orthonormal<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    count: usize,
    fixed: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = fixed.to_vec();
    while out.len() < count {
        let mut v = gaussian(rng, n);
        for _ in 0..2 {
            for b in &out {
                let c = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-6 {
            out.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    out
}

/// `sum_j coeffs_j * columns_j`.
fn embed(columns: &[Vec<f64>], coeffs: &[f64], d_v: usize) -> Vec<f64> {
    let mut out = vec![0.0; d_v];
    for (c, col) in coeffs.iter().zip(columns) {
        out.iter_mut().zip(col).for_each(|(o, x)| *o += c * x);
    }
    out
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += a * x);
}

/// Generates `config.videos` instances, deterministic in `config.seed`.
pub fn generate_dataset(config: &BenchConfig) -> Result<Dataset> {
    config.validate()?;
    let BenchConfig {
        frames: m,
        options: n,
        planted: r,
        d_v,
        d_t,
        ..
    } = *config;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let with_marker = config.marker_weight > 0.0;
    let basis = orthonormal(&mut rng, d_v, 2 * d_t + usize::from(with_marker), &[]);
    let (phi_q, rest) = basis.split_at(d_t);
    let (phi_a, marker) = rest.split_at(d_t);
    let marker = marker.first().cloned().unwrap_or_else(|| vec![0.0; d_v]);
    let noise_scale = 1.0 / (d_v as f64).sqrt();

    let mut instances = Vec::with_capacity(config.videos);
    for v in 0..config.videos {
        let q = unit(&mut rng, d_t);
        let options = orthonormal(&mut rng, d_t, n, &[]);
        let answer = rng.random_range(0..n);

        let mut positions: Vec<usize> = (0..m).collect();
        positions.shuffle(&mut rng);
        let (planted, rest) = positions.split_at(r);
        let (cluster, rest) = rest.split_at(config.cluster_size);
        let (decoys, rest) = rest.split_at(config.decoys);
        let (salient, noise) = rest.split_at(config.salient);
        let mut planted = planted.to_vec();
        planted.sort_unstable();

        let q_part = embed(phi_q, &q, d_v);
        // answer content orthogonal to every option
        let uninformative = |rng: &mut ChaCha8Rng| {
            let v = orthonormal(rng, d_t, n + 1, &options);
            v[n].clone()
        };
        let frame = |rng: &mut ChaCha8Rng, question: Option<&[f64]>, marked: bool, answer_dir: Option<&[f64]>| {
            let mut f = vec![0.0; d_v];
            if let Some(qp) = question {
                axpy(&mut f, config.question_weight, qp);
            }
            if marked {
                axpy(&mut f, config.marker_weight, &marker);
            }
            let z = match answer_dir {
                Some(a) => a.to_vec(),
                None => uninformative(rng),
            };
            axpy(&mut f, config.answer_weight, &embed(phi_a, &z, d_v));
            axpy(&mut f, config.scene_weight, &unit(rng, d_v));
            // scene directions must not leak the answer outside planted frames
            if answer_dir.is_none() {
                for o in &options {
                    let dir = embed(phi_a, o, d_v);
                    let c = dot(&f, &dir);
                    axpy(&mut f, -c, &dir);
                }
            }
            f
        };
        let jitter = |rng: &mut ChaCha8Rng, mut f: Vec<f64>| {
            axpy(&mut f, config.noise_sigma * noise_scale, &gaussian(rng, d_v));
            f
        };

        let mut rows: Vec<Vec<f64>> = vec![Vec::new(); m];
        for &i in &planted {
            let f = frame(&mut rng, Some(&q_part), true, Some(&options[answer]));
            rows[i] = jitter(&mut rng, f);
        }
        let base = frame(&mut rng, Some(&q_part), true, None);
        for &i in cluster {
            rows[i] = jitter(&mut rng, base.clone());
        }
        for &i in decoys {
            let f = frame(&mut rng, Some(&q_part), false, None);
            rows[i] = jitter(&mut rng, f);
        }
        for &i in salient {
            // marked, but about some other question
            let other = embed(phi_q, &unit(&mut rng, d_t), d_v);
            let f = frame(&mut rng, Some(&other), true, None);
            rows[i] = jitter(&mut rng, f);
        }
        for &i in noise {
            rows[i] = gaussian(&mut rng, d_v).into_iter().map(|x| x * noise_scale).collect();
        }

        instances.push(VideoQAInstance {
            frames: FrameSet::from_rows(format!("video-{v:05}"), &rows)?,
            question: QuestionEmbedding::new(format!("question-{v:05}"), q)?,
            options,
            answer_index: answer,
            planted_keyframes: Some(planted),
        });
    }
    Ok(Dataset {
        config: *config,
        instances,
        answer_basis: phi_a.to_vec(),
    })
}

/// SHA-256 of the dataset contents, hex encoded.
pub fn dataset_hash(instances: &[VideoQAInstance]) -> String {
    let mut h = Sha256::new();
    let mut put = |vals: &[f64]| {
        h.update((vals.len() as u64).to_le_bytes());
        for v in vals {
            h.update(v.to_bits().to_le_bytes());
        }
    };
    for inst in instances {
        put(inst.frames.embeddings().data());
        put(inst.question.vector());
        for o in &inst.options {
            put(o);
        }
        put(&[inst.answer_index as f64]);
        let planted: Vec<f64> = inst
            .planted_keyframes
            .iter()
            .flatten()
            .map(|&i| i as f64)
            .collect();
        put(&planted);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchMetrics {
    pub keyframe_recall: f64,
    pub answer_accuracy: f64,
    pub redundancy: f64,
    pub instances: usize,
}

/// Fraction of the planted keyframes present in `selected`.
pub fn keyframe_recall(selected: &[usize], planted: &[usize]) -> f64 {
    if planted.is_empty() {
        return 0.0;
    }
    let hit = planted.iter().filter(|p| selected.contains(p)).count();
    hit as f64 / planted.len() as f64
}

/// Mean pairwise cosine similarity over distinct selected frames; 0 for fewer than two.
pub fn redundancy(frames: &FrameSet, selected: &[usize]) -> f64 {
    if selected.len() < 2 {
        return 0.0;
    }
    let s = pairwise_similarity(frames);
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (a, &i) in selected.iter().enumerate() {
        for &j in &selected[a + 1..] {
            total += s.row(i)[j];
            pairs += 1;
        }
    }
    total / pairs as f64
}

#[derive(Default)]
struct Tally {
    recall: f64,
    correct: usize,
    redundancy: f64,
    n: usize,
}

impl Tally {
    fn add(&mut self, inst: &VideoQAInstance, selected: &[usize], answer: usize) {
        if let Some(p) = &inst.planted_keyframes {
            self.recall += keyframe_recall(selected, p);
        }
        self.correct += usize::from(answer == inst.answer_index);
        self.redundancy += redundancy(&inst.frames, selected);
        self.n += 1;
    }

    fn finish(self) -> BenchMetrics {
        let n = self.n.max(1) as f64;
        BenchMetrics {
            keyframe_recall: self.recall / n,
            answer_accuracy: self.correct as f64 / n,
            redundancy: self.redundancy / n,
            instances: self.n,
        }
    }
}

/// Runs [`infer`] on every instance and aggregates the metrics.
pub fn evaluate(model: &Model, data: &[VideoQAInstance], k_prime: usize) -> Result<BenchMetrics> {
    evaluate_with(model, data, k_prime, FrameSelector::Scored, 0)
}

/// Like [`evaluate`], but frames may come from a fixed baseline selector.
/// `seed` drives the random selector only.
pub fn evaluate_with(
    model: &Model,
    data: &[VideoQAInstance],
    k_prime: usize,
    selector: FrameSelector,
    seed: u64,
) -> Result<BenchMetrics> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = Tally::default();
    for inst in data {
        let (selected, answer) = match selector {
            FrameSelector::Scored => {
                let out = infer(model, inst, k_prime)?;
                (out.selection.indices, out.answer)
            }
            FrameSelector::Uniform | FrameSelector::Random => {
                let m = inst.num_frames();
                let idx = if selector == FrameSelector::Uniform {
                    uniform_indices(m, k_prime)?
                } else {
                    random_indices(m, k_prime, &mut rng)?
                };
                let (answer, _) = answer_with_selection(model, inst, &idx)?;
                (idx, answer)
            }
        };
        tally.add(inst, &selected, answer);
    }
    Ok(tally.finish())
}

/// Metrics for an explicit selection per instance, answered by `model`.
pub fn evaluate_selections(
    model: &Model,
    data: &[VideoQAInstance],
    selections: &[Vec<usize>],
) -> Result<BenchMetrics> {
    if selections.len() != data.len() {
        return Err(Error::contract("one selection per instance required"));
    }
    let mut tally = Tally::default();
    for (inst, sel) in data.iter().zip(selections) {
        let (answer, _) = answer_with_selection(model, inst, sel)?;
        tally.add(inst, sel, answer);
    }
    Ok(tally.finish())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    WithoutQfs,
    WithoutQfm,
    WithoutIfd,
    Uniform,
    Random,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::WithoutQfs,
        Variant::WithoutQfm,
        Variant::WithoutIfd,
        Variant::Uniform,
        Variant::Random,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WithoutQfs => "w/o QFS",
            Variant::WithoutQfm => "w/o QFM",
            Variant::WithoutIfd => "w/o IFD",
            Variant::Uniform => "uniform",
            Variant::Random => "random",
        }
    }

    pub fn selector(self) -> FrameSelector {
        match self {
            Variant::Uniform => FrameSelector::Uniform,
            Variant::Random => FrameSelector::Random,
            _ => FrameSelector::Scored,
        }
    }

    pub fn mechanisms(self) -> Mechanisms {
        let mut m = Mechanisms::ALL;
        match self {
            Variant::WithoutQfs => m.qfs = false,
            Variant::WithoutQfm => m.qfm = false,
            Variant::WithoutIfd => m.ifd = false,
            _ => {}
        }
        m
    }
}

/// Training and evaluation settings shared by every ablation variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSettings {
    pub train: TrainConfig,
    pub dims: ScorerDims,
    pub test_videos: usize,
    pub k_prime: usize,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub dataset_hash: String,
    pub metrics: BenchMetrics,
    pub final_loss: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct VariantRow {
    pub variant: Variant,
    pub label: String,
    /// Seed-averaged metrics.
    pub mean: BenchMetrics,
    pub per_seed: Vec<SeedResult>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationTable {
    pub rows: Vec<VariantRow>,
}

impl AblationTable {
    pub fn row(&self, v: Variant) -> Option<&VariantRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    /// Every variant saw the same data for each seed.
    pub fn paired(&self) -> bool {
        let mut by_seed: BTreeMap<u64, &str> = BTreeMap::new();
        self.rows.iter().flat_map(|r| &r.per_seed).all(|s| {
            *by_seed.entry(s.seed).or_insert(&s.dataset_hash) == s.dataset_hash.as_str()
        })
    }

    /// Fixed-width text rendering.
    pub fn summary(&self) -> String {
        let mut out = format!(
            "{:<10} {:>8} {:>9} {:>11}\n",
            "variant", "recall", "accuracy", "redundancy"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<10} {:>8.4} {:>9.4} {:>11.4}\n",
                r.label, r.mean.keyframe_recall, r.mean.answer_accuracy, r.mean.redundancy
            ));
        }
        out
    }
}

/// Trains and evaluates each variant on the same per-seed dataset.
///
/// For seed `s` the dataset uses `bench.seed = s`, the model is initialised
/// from `s`, and training shuffles with `s`; the last `test_videos` instances
/// are held out. `on_row` sees each (variant, seed) result as it completes.
pub fn run_ablation(
    bench: &BenchConfig,
    settings: &AblationSettings,
    mut on_result: impl FnMut(Variant, &SeedResult),
) -> Result<AblationTable> {
    if settings.seeds.is_empty() || settings.variants.is_empty() {
        return Err(Error::contract("ablation needs at least one seed and one variant"));
    }
    let bench = bench.with_dims(settings.dims);
    let mut per_variant: BTreeMap<Variant, Vec<SeedResult>> = BTreeMap::new();
    for &seed in &settings.seeds {
        let data = generate_dataset(&BenchConfig { seed, ..bench })?;
        let hash = data.hash();
        let (train_set, test_set) = data.split(settings.test_videos)?;
        for &variant in &settings.variants {
            let config = TrainConfig {
                seed,
                mechanisms: variant.mechanisms(),
                selector: variant.selector(),
                ..settings.train
            };
            let mut model = Model::new(settings.dims, seed)?;
            let reports = train(&mut model, train_set, &config, |_| {})?;
            let metrics = evaluate_with(&model, test_set, settings.k_prime, variant.selector(), seed)?;
            let result = SeedResult {
                seed,
                dataset_hash: hash.clone(),
                metrics,
                final_loss: reports.last().map_or(f64::NAN, |r| r.mean_loss),
            };
            on_result(variant, &result);
            per_variant.entry(variant).or_default().push(result);
        }
    }
    let rows = settings
        .variants
        .iter()
        .map(|&variant| {
            let per_seed = per_variant.remove(&variant).unwrap_or_default();
            let n = per_seed.len() as f64;
            let avg = |f: fn(&BenchMetrics) -> f64| per_seed.iter().map(|s| f(&s.metrics)).sum::<f64>() / n;
            let mean = BenchMetrics {
                keyframe_recall: avg(|m| m.keyframe_recall),
                answer_accuracy: avg(|m| m.answer_accuracy),
                redundancy: avg(|m| m.redundancy),
                instances: per_seed.iter().map(|s| s.metrics.instances).sum(),
            };
            VariantRow {
                variant,
                label: variant.label().to_string(),
                mean,
                per_seed,
            }
        })
        .collect();
    Ok(AblationTable { rows })
}
