//! From aggregate scores to selected frames.
//!
//! Training uses a successive-softmax relaxation of top-k over (optionally
//! Gumbel-perturbed) scores so that the selection stays differentiable;
//! inference keeps the k highest scores. Every returned index list is
//! ascending, i.e. in temporal order.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax, Graph, NodeId};
use crate::error::{Error, Result};

/// Uniform draws are clamped to `[GUMBEL_CLAMP, 1 - GUMBEL_CLAMP]` before the double log.
pub const GUMBEL_CLAMP: f64 = 1e-12;
/// Floor inside `log(1 - a)` when updating the relaxation mask.
pub const LOG_MASK_FLOOR: f64 = 1e-12;

pub const DEFAULT_K: usize = 8;
pub const DEFAULT_TAU: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMode {
    TrainStochastic,
    TrainDeterministic,
    Inference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Strictly ascending frame indices.
    pub indices: Vec<usize>,
    /// Relaxed k-hot vector (training) or exact k-hot indicator (inference).
    pub relaxed_weights: Vec<f64>,
    pub mode: SelectionMode,
    pub tau: f64,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub k: usize,
    pub tau: f64,
    pub stochastic: bool,
    pub gumbel_clamp: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            k: DEFAULT_K,
            tau: DEFAULT_TAU,
            stochastic: true,
            gumbel_clamp: GUMBEL_CLAMP,
        }
    }
}

impl SamplerConfig {
    pub fn deterministic(k: usize, tau: f64) -> Self {
        SamplerConfig {
            k,
            tau,
            stochastic: false,
            ..Default::default()
        }
    }

    pub fn stochastic(k: usize, tau: f64) -> Self {
        SamplerConfig {
            k,
            tau,
            stochastic: true,
            ..Default::default()
        }
    }
}

pub(crate) fn check_k(k: usize, m: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::contract("k must be at least 1"));
    }
    if k > m {
        return Err(Error::contract(format!(
            "requested k exceeds frame count M (k = {k}, M = {m})"
        )));
    }
    Ok(())
}

fn check_tau(op: &'static str, tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(op, format!("temperature {tau} must be > 0")))
    }
}

fn check_finite(op: &'static str, scores: &[f64]) -> Result<()> {
    match scores.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::domain(op, format!("score {i} is not finite"))),
        None => Ok(()),
    }
}

/// `p_i = exp(S_i / tau) / sum_j exp(S_j / tau)`.
pub fn selection_probabilities(scores: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_tau("selection_probabilities", tau)?;
    check_finite("selection_probabilities", scores)?;
    if scores.is_empty() {
        return Err(Error::contract("selection_probabilities needs at least one score"));
    }
    Ok(softmax(scores, tau))
}

/// Ascending indices of the `k` largest keys; equal keys favour the earlier index.
pub fn top_k_indices(keys: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by(|&a, &b| match keys[b].total_cmp(&keys[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    let mut picked: Vec<usize> = order.into_iter().take(k).collect();
    picked.sort_unstable();
    picked
}

/// Draws `m` uniforms from `rng`, clamped away from 0 and 1.
pub fn draw_uniforms<R: Rng + ?Sized>(rng: &mut R, m: usize, clamp: f64) -> Vec<f64> {
    (0..m)
        .map(|_| rng.random::<f64>().clamp(clamp, 1.0 - clamp))
        .collect()
}

/// Standard Gumbel noise `-ln(-ln u)` from clamped uniforms.
pub fn gumbel_from_uniforms(uniforms: &[f64], clamp: f64) -> Vec<f64> {
    uniforms
        .iter()
        .map(|&u| -(-u.clamp(clamp, 1.0 - clamp).ln()).ln())
        .collect()
}

/// Weighted sampling without replacement via Gumbel-top-k over keys
/// `S_i / tau + g_i`. For `k = 1` the inclusion law is exactly the softmax
/// of `S / tau`.
pub fn wrs_indices<R: Rng + ?Sized>(
    scores: &[f64],
    k: usize,
    tau: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let uniforms = draw_uniforms(rng, scores.len(), GUMBEL_CLAMP);
    wrs_indices_from_uniforms(scores, k, tau, &uniforms)
}

/// [`wrs_indices`] with the uniform draws supplied by the caller.
pub fn wrs_indices_from_uniforms(
    scores: &[f64],
    k: usize,
    tau: f64,
    uniforms: &[f64],
) -> Result<Vec<usize>> {
    check_k(k, scores.len())?;
    check_tau("wrs_indices", tau)?;
    check_finite("wrs_indices", scores)?;
    if uniforms.len() != scores.len() {
        return Err(Error::contract("one uniform draw per score is required"));
    }
    let g = gumbel_from_uniforms(uniforms, GUMBEL_CLAMP);
    let keys: Vec<f64> = scores.iter().zip(&g).map(|(s, gi)| s / tau + gi).collect();
    Ok(top_k_indices(&keys, k))
}

/// Weighted reservoir sampling with keys `u_i^(1 / w_i)`.
pub fn efraimidis_indices(weights: &[f64], k: usize, uniforms: &[f64]) -> Result<Vec<usize>> {
    check_k(k, weights.len())?;
    if uniforms.len() != weights.len() {
        return Err(Error::contract("one uniform draw per weight is required"));
    }
    if let Some(i) = weights.iter().position(|w| !(*w > 0.0) || !w.is_finite()) {
        return Err(Error::domain(
            "efraimidis_indices",
            format!("weight {i} = {} is not positive", weights[i]),
        ));
    }
    if let Some(i) = uniforms.iter().position(|u| !(*u > 0.0 && *u < 1.0)) {
        return Err(Error::domain(
            "efraimidis_indices",
            format!("uniform {i} = {} is outside (0, 1)", uniforms[i]),
        ));
    }
    let keys: Vec<f64> = weights
        .iter()
        .zip(uniforms)
        .map(|(w, u)| u.powf(1.0 / w))
        .collect();
    Ok(top_k_indices(&keys, k))
}

/// A relaxed selection whose weights stay attached to the graph.
#[derive(Debug, Clone)]
pub struct RelaxedSelection {
    pub result: SelectionResult,
    /// Vector node holding the relaxed k-hot weights.
    pub weights: NodeId,
}

/// Successive-softmax relaxation of top-k.
///
/// Keys are `r = S + tau * g` in stochastic mode (so that `r / tau` is the
/// Gumbel-top-k key of [`wrs_indices`]) and `r = S` otherwise. With a mask
/// `m` starting at zero, each of `k` rounds computes
/// `a = softmax((r + m) / tau)` and then `m += log(max(1 - a, 1e-12))`;
/// the weights are the sum of the `k` softmax vectors. Discrete indices are
/// the top-k of `r`.
pub fn relaxed_topk<R: Rng + ?Sized>(
    g: &mut Graph,
    scores: &[NodeId],
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<RelaxedSelection> {
    let m = scores.len();
    check_k(config.k, m)?;
    check_tau("relaxed_topk", config.tau)?;
    let score_vec = g.concat(scores)?;
    check_finite("relaxed_topk", g.value(score_vec).data())?;

    let keys = if config.stochastic {
        let u = draw_uniforms(rng, m, config.gumbel_clamp);
        let noise: Vec<f64> = gumbel_from_uniforms(&u, config.gumbel_clamp)
            .into_iter()
            .map(|v| config.tau * v)
            .collect();
        let noise = g.constant_vector(noise);
        g.add(score_vec, noise)?
    } else {
        score_vec
    };

    let ones = g.constant_vector(vec![1.0; m]);
    let mut mask = g.constant_vector(vec![0.0; m]);
    let mut rounds = Vec::with_capacity(config.k);
    for j in 0..config.k {
        let masked = g.add(keys, mask)?;
        let a = g.softmax(masked, config.tau)?;
        rounds.push(a);
        if j + 1 < config.k {
            let rest = g.sub(ones, a)?;
            let rest = g.clamp_min(rest, LOG_MASK_FLOOR)?;
            let log_rest = g.log(rest)?;
            mask = g.add(mask, log_rest)?;
        }
    }
    let weights = g.add_all(&rounds)?;
    let indices = top_k_indices(g.value(keys).data(), config.k);
    let result = SelectionResult {
        indices,
        relaxed_weights: g.value(weights).data().to_vec(),
        mode: if config.stochastic {
            SelectionMode::TrainStochastic
        } else {
            SelectionMode::TrainDeterministic
        },
        tau: config.tau,
        seed: None,
    };
    Ok(RelaxedSelection { result, weights })
}

/// [`relaxed_topk`] on plain values, on a throwaway graph.
pub fn relaxed_topk_values<R: Rng + ?Sized>(
    scores: &[f64],
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<SelectionResult> {
    let mut g = Graph::new();
    let nodes: Vec<NodeId> = scores.iter().map(|&s| g.constant_scalar(s)).collect();
    Ok(relaxed_topk(&mut g, &nodes, config, rng)?.result)
}

/// The `k` highest scores, ties toward earlier frames, as an exact k-hot selection.
pub fn hard_topk(scores: &[f64], k: usize) -> Result<SelectionResult> {
    check_k(k, scores.len())?;
    check_finite("hard_topk", scores)?;
    let indices = top_k_indices(scores, k);
    Ok(SelectionResult {
        relaxed_weights: k_hot(scores.len(), &indices),
        indices,
        mode: SelectionMode::Inference,
        tau: 0.0,
        seed: None,
    })
}

pub fn k_hot(m: usize, indices: &[usize]) -> Vec<f64> {
    let mut w = vec![0.0; m];
    for &i in indices {
        w[i] = 1.0;
    }
    w
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{grad_check, ParameterStore, Tensor};

    #[test]
    fn probabilities_examples() {
        assert_eq!(selection_probabilities(&[1.0, 1.0], 0.3).unwrap(), vec![0.5, 0.5]);
        let p = selection_probabilities(&[2.0, 0.0], 1.0).unwrap();
        // mpmath, 40 digits: e^2/(e^2+1), 1/(e^2+1)
        assert!((p[0] - 0.880_797_077_977_882_4).abs() < 1e-15);
        assert!((p[1] - 0.119_202_922_022_117_56).abs() < 1e-15);
        let q = selection_probabilities(&[3.0, 1.0], 1.0).unwrap();
        assert!((p[0] - q[0]).abs() < 1e-15 && (p[1] - q[1]).abs() < 1e-15);
        assert!(matches!(selection_probabilities(&[1.0], 0.0), Err(Error::Domain { .. })));
        assert!(matches!(
            selection_probabilities(&[1.0, f64::NAN], 1.0),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn k_larger_than_m_is_a_contract_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = wrs_indices(&[1.0, 2.0], 3, 1.0, &mut rng).unwrap_err();
        assert!(err.to_string().contains("requested k exceeds frame count M"));
        assert!(hard_topk(&[1.0], 2).is_err());
        assert!(relaxed_topk_values(&[1.0, 2.0], &SamplerConfig::deterministic(3, 0.1), &mut rng)
            .is_err());
        assert!(relaxed_topk_values(&[1.0, 2.0], &SamplerConfig::deterministic(1, 0.0), &mut rng)
            .is_err());
        assert!(efraimidis_indices(&[1.0], 2, &[0.5]).is_err());
    }

    #[test]
    fn wrs_takes_everything_when_k_equals_m() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            assert_eq!(wrs_indices(&[0.3, -2.0, 5.0, 1.0], 4, 0.1, &mut rng).unwrap(), vec![0, 1, 2, 3]);
        }
        assert_eq!(efraimidis_indices(&[1.0, 2.0, 3.0], 3, &[0.1, 0.2, 0.3]).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn dominant_weight_always_wins() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scores = [0.0, 1e6, 0.5, -0.2];
        for _ in 0..10_000 {
            assert_eq!(wrs_indices(&scores, 1, 0.1, &mut rng).unwrap(), vec![1]);
        }
    }

    #[test]
    fn efraimidis_equal_weights_follow_uniforms() {
        assert_eq!(efraimidis_indices(&[1.0; 3], 1, &[0.9, 0.1, 0.5]).unwrap(), vec![0]);
        assert!(matches!(
            efraimidis_indices(&[1.0, 0.0], 1, &[0.5, 0.5]),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn wrs_frequencies_follow_softmax() {
        // oracle: mpmath softmax of (2, 0, 1)
        let expected = [0.665_240_955_774_821_9, 0.090_030_573_170_380_46, 0.244_728_471_054_797_64];
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[wrs_indices(&[2.0, 0.0, 1.0], 1, 1.0, &mut rng).unwrap()[0]] += 1;
        }
        for (c, p) in counts.iter().zip(expected) {
            let sd = (p * (1.0 - p) / n as f64).sqrt();
            assert!(((*c as f64 / n as f64) - p).abs() < 3.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn relaxed_topk_low_temperature_example() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = relaxed_topk_values(&[5.0, 1.0, 3.0], &SamplerConfig::deterministic(2, 0.001), &mut rng)
            .unwrap();
        assert_eq!(r.indices, vec![0, 2]);
        for (w, t) in r.relaxed_weights.iter().zip([1.0, 0.0, 1.0]) {
            assert!((w - t).abs() < 1e-3);
        }
        assert_eq!(r.mode, SelectionMode::TrainDeterministic);
    }

    #[test]
    fn relaxed_weights_can_exceed_one_at_moderate_temperature() {
        // the successive-softmax relaxation does not cap entries at 1
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = [0.1 * 9f64.ln(), 0.0];
        let r = relaxed_topk_values(&s, &SamplerConfig::deterministic(2, 0.1), &mut rng).unwrap();
        assert!((r.relaxed_weights[0] - 0.9).abs() < 1e-6);
        assert!((r.relaxed_weights[1] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn hard_topk_examples() {
        assert_eq!(hard_topk(&[0.1, 0.9, 0.5, 0.7], 2).unwrap().indices, vec![1, 3]);
        let tie = hard_topk(&[0.4; 4], 2).unwrap();
        assert_eq!(tie.indices, vec![0, 1]);
        assert_eq!(tie.relaxed_weights, vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(hard_topk(&[1.0, 2.0, 3.0], 3).unwrap().indices, vec![0, 1, 2]);
    }

    #[test]
    fn relaxed_weights_gradient_matches_finite_differences() {
        let mut store = ParameterStore::new();
        let s = store
            .insert("scores", Tensor::vector(vec![0.3, 1.1, -0.4, 0.8, 0.05]))
            .unwrap();
        let c = [0.7, -1.3, 0.2, 2.0, -0.5];
        for stochastic in [false, true] {
            let config = SamplerConfig {
                k: 2,
                tau: 0.5,
                stochastic,
                ..Default::default()
            };
            let report = grad_check(
                |g, st| {
                    let mut rng = ChaCha8Rng::seed_from_u64(77);
                    let v = g.param(st, s);
                    let nodes = (0..5).map(|i| g.element(v, i)).collect::<Result<Vec<_>>>()?;
                    let sel = relaxed_topk(g, &nodes, &config, &mut rng)?;
                    let cv = g.constant_vector(c.to_vec());
                    g.dot(sel.weights, cv)
                },
                &mut store,
                None,
                1e-6,
                1e-4,
            )
            .unwrap();
            assert!(report.passed, "{report:?}");
            assert!(report.params[0].analytic_norm > 1e-3);
        }
    }

    #[test]
    fn determinism_with_equal_seeds() {
        let scores = [0.2, 0.9, -0.1, 0.4, 0.4, 1.3];
        let cfg = SamplerConfig::stochastic(3, 0.1);
        let a = relaxed_topk_values(&scores, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = relaxed_topk_values(&scores, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            a.relaxed_weights.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.relaxed_weights.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    fn distinct_scores() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-3.0f64..3.0, 2..12).prop_filter("distinct", |v| {
            let mut s = v.clone();
            s.sort_by(f64::total_cmp);
            s.windows(2).all(|w| w[1] - w[0] > 1e-6)
        })
    }

    proptest! {
        #[test]
        fn selections_are_ascending_with_mass_k(
            scores in prop::collection::vec(-3.0f64..3.0, 1..16),
            k_frac in 0.0f64..1.0, tau in 0.01f64..3.0, seed in any::<u64>(), stochastic in any::<bool>(),
        ) {
            let m = scores.len();
            let k = 1 + ((m - 1) as f64 * k_frac) as usize;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = SamplerConfig { k, tau, stochastic, ..Default::default() };
            let r = relaxed_topk_values(&scores, &cfg, &mut rng).unwrap();
            let h = hard_topk(&scores, k).unwrap();
            let w = wrs_indices(&scores, k, tau, &mut rng).unwrap();
            for idx in [&r.indices, &h.indices, &w] {
                prop_assert_eq!(idx.len(), k);
                prop_assert!(idx.windows(2).all(|p| p[0] < p[1]));
                prop_assert!(idx.iter().all(|&i| i < m));
            }
            let mass: f64 = r.relaxed_weights.iter().sum();
            prop_assert!((mass - k as f64).abs() < 1e-6);
            prop_assert!(r.relaxed_weights.iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn shift_invariance(scores in prop::collection::vec(-3.0f64..3.0, 1..10), c in -20.0f64..20.0,
                            tau in 0.05f64..2.0, seed in any::<u64>()) {
            let shifted: Vec<f64> = scores.iter().map(|s| s + c).collect();
            let p = selection_probabilities(&scores, tau).unwrap();
            let q = selection_probabilities(&shifted, tau).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            let k = 1 + scores.len() / 2;
            let u = draw_uniforms(&mut ChaCha8Rng::seed_from_u64(seed), scores.len(), GUMBEL_CLAMP);
            prop_assert_eq!(hard_topk(&scores, k).unwrap().indices, hard_topk(&shifted, k).unwrap().indices);
            // keys shift by c / tau, but only up to rounding; compare away from exact ties
            let a = wrs_indices_from_uniforms(&scores, k, tau, &u).unwrap();
            let b = wrs_indices_from_uniforms(&shifted, k, tau, &u).unwrap();
            let keys: Vec<f64> = scores.iter().zip(gumbel_from_uniforms(&u, GUMBEL_CLAMP)).map(|(s, g)| s / tau + g).collect();
            let mut sorted = keys.clone();
            sorted.sort_by(|x, y| y.total_cmp(x));
            let gap = if k < sorted.len() { sorted[k - 1] - sorted[k] } else { f64::INFINITY };
            if gap > 1e-9 {
                prop_assert_eq!(a, b);
            }
        }

        #[test]
        fn deterministic_relaxation_tracks_hard_topk(scores in distinct_scores(), k_frac in 0.0f64..1.0) {
            let m = scores.len();
            let k = 1 + ((m - 1) as f64 * k_frac) as usize;
            let hard = hard_topk(&scores, k).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            for tau in [1.0, 0.1, 0.01, 0.001] {
                let r = relaxed_topk_values(&scores, &SamplerConfig::deterministic(k, tau), &mut rng).unwrap();
                prop_assert_eq!(&r.indices, &hard.indices);
            }
        }

        #[test]
        fn efraimidis_matches_gumbel_keys(scores in prop::collection::vec(-2.0f64..2.0, 1..10),
                                          tau in 0.5f64..2.0, k_frac in 0.0f64..1.0, seed in any::<u64>()) {
            let m = scores.len();
            let k = 1 + ((m - 1) as f64 * k_frac) as usize;
            let u = draw_uniforms(&mut ChaCha8Rng::seed_from_u64(seed), m, GUMBEL_CLAMP);
            let w: Vec<f64> = scores.iter().map(|s| (s / tau).exp()).collect();
            prop_assert_eq!(efraimidis_indices(&w, k, &u).unwrap(),
                            wrs_indices_from_uniforms(&scores, k, tau, &u).unwrap());
        }
    }
}
