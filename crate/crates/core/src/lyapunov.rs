//! Error propagation through the residual stream: perturbation injection,
//! relative error energy V(t), contraction decomposition, multi-layer
//! bounds, and the Pre-LN sufficient condition.
//!
//! A trace records stations: the post-injection embedding (station 0) and
//! the post-residual state after each block. Transition t covers the step
//! into layer t's output; transition 0 is the embedding-to-layer-0
//! expansion, and transitions 1.. are the inter-layer steps that summary
//! statistics (rho_max, contracting counts) are taken over.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{forward, ForwardOpts, HiddenStates, ModelWeights};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Norms at one residual-stream station. V = e_norm^2 / h_norm^2 is the
/// relative error energy; all norms are Frobenius over the full sequence.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Station {
    pub h_norm: f64,
    pub e_norm: f64,
    pub v: f64,
}

/// One transition t -> t+1: rho = V(t+1)/V(t), alpha^2 the squared hidden
/// growth, beta^2 the squared error growth. rho * alpha^2 = beta^2 is an
/// algebraic identity of the definitions.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Transition {
    pub layer: usize,
    pub rho: f64,
    pub alpha2: f64,
    pub beta2: f64,
    pub defined: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LyapunovTrace {
    pub epsilon: f64,
    pub seed: u64,
    pub stations: Vec<Station>,
    pub transitions: Vec<Transition>,
}

impl LyapunovTrace {
    /// V at the injection station; equals epsilon^2 by construction of the
    /// perturbation normalization.
    pub fn v0(&self) -> f64 {
        self.stations[0].v
    }

    /// Max contraction factor over the inter-layer transitions (t >= 1).
    pub fn rho_max(&self) -> Option<f64> {
        self.transitions[1..]
            .iter()
            .filter(|t| t.defined)
            .map(|t| t.rho)
            .fold(None, |acc, r| Some(acc.map_or(r, |a: f64| a.max(r))))
    }

    /// (contracting, total) over the inter-layer transitions.
    pub fn contracting(&self) -> (usize, usize) {
        let total = self.transitions.len().saturating_sub(1);
        let contracting = self.transitions[1..]
            .iter()
            .filter(|t| t.defined && t.rho < 1.0)
            .count();
        (contracting, total)
    }

    /// Fraction of inter-layer transitions that amplify (rho >= 1).
    pub fn f_amp(&self) -> f64 {
        let (contracting, total) = self.contracting();
        if total == 0 {
            0.0
        } else {
            (total - contracting) as f64 / total as f64
        }
    }
}

/// Injects a seeded isotropic Gaussian perturbation at the embedding,
/// normalized so ||delta||_F / ||h_emb||_F = epsilon, and traces both
/// forwards.
pub fn trace(
    weights: &ModelWeights,
    tokens: &[u32],
    epsilon: f64,
    seed: u64,
) -> Result<LyapunovTrace> {
    if !(epsilon > 0.0) {
        return Err(Error::invalid("epsilon must be > 0"));
    }
    let (clean, perturbed) = traced_pair(weights, tokens, epsilon, seed)?;
    Ok(trace_from_states(&clean, &perturbed, epsilon, seed))
}

/// Runs the clean and perturbed forwards and returns both hidden traces.
pub fn traced_pair(
    weights: &ModelWeights,
    tokens: &[u32],
    epsilon: f64,
    seed: u64,
) -> Result<(HiddenStates, HiddenStates)> {
    let mut opts = ForwardOpts::plain();
    opts.record_hidden = true;
    let clean = forward(weights, tokens, &mut opts)?
        .hidden
        .expect("hidden requested");

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut delta = Matrix::from_fn(tokens.len(), weights.config.d_model, |_, _| {
        StandardNormal.sample(&mut rng)
    });
    let h_norm = clean.embedding.frobenius_norm();
    let d_norm = delta.frobenius_norm();
    if d_norm == 0.0 || h_norm == 0.0 {
        return Err(Error::invalid("degenerate embedding or perturbation norm"));
    }
    delta = delta.scale(epsilon * h_norm / d_norm);

    let mut opts2 = ForwardOpts::plain();
    opts2.record_hidden = true;
    opts2.inject_embedding = Some(&delta);
    let perturbed = forward(weights, tokens, &mut opts2)?
        .hidden
        .expect("hidden requested");
    Ok((clean, perturbed))
}

/// Builds the trace from recorded station matrices.
pub fn trace_from_states(
    clean: &HiddenStates,
    perturbed: &HiddenStates,
    epsilon: f64,
    seed: u64,
) -> LyapunovTrace {
    let mut stations = Vec::with_capacity(clean.layers.len() + 1);
    let push_station = |stations: &mut Vec<Station>, h: &Matrix, hp: &Matrix| {
        let h_norm = h.frobenius_norm();
        let e_norm = hp.sub(h).frobenius_norm();
        let v = (e_norm / h_norm).powi(2);
        stations.push(Station { h_norm, e_norm, v });
    };
    push_station(&mut stations, &clean.embedding, &perturbed.embedding);
    for (h, hp) in clean.layers.iter().zip(&perturbed.layers) {
        push_station(&mut stations, h, hp);
    }
    let transitions = transitions_from_stations(&stations);
    LyapunovTrace {
        epsilon,
        seed,
        stations,
        transitions,
    }
}

fn transitions_from_stations(stations: &[Station]) -> Vec<Transition> {
    stations
        .windows(2)
        .enumerate()
        .map(|(layer, w)| {
            let (prev, next) = (w[0], w[1]);
            let defined = prev.e_norm > 0.0 && prev.h_norm > 0.0 && next.h_norm > 0.0;
            if !defined {
                return Transition {
                    layer,
                    rho: f64::NAN,
                    alpha2: f64::NAN,
                    beta2: f64::NAN,
                    defined,
                };
            }
            Transition {
                layer,
                rho: next.v / prev.v,
                alpha2: (next.h_norm / prev.h_norm).powi(2),
                beta2: (next.e_norm / prev.e_norm).powi(2),
                defined,
            }
        })
        .collect()
}

/// Recomputes the per-transition decomposition from the stored station
/// norms. Transitions with zero error norm are flagged undefined.
pub fn decompose(trace: &LyapunovTrace) -> Vec<Transition> {
    transitions_from_stations(&trace.stations)
}

/// Linear and geometric multi-layer error bounds. The geometric bound
/// c_max (1 - rho^n) / (1 - rho) applies for rho < 1 only; rho >= 1 is
/// reported as inapplicable.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MultiLayerBounds {
    pub linear: f64,
    pub geometric: Option<f64>,
}

pub fn multilayer_bounds(n: usize, rho: f64, c_max: f64) -> Result<MultiLayerBounds> {
    if n == 0 {
        return Err(Error::invalid("layer count must be >= 1"));
    }
    if !(rho >= 0.0) || !(c_max >= 0.0) {
        return Err(Error::invalid("rho and c_max must be >= 0"));
    }
    let linear = n as f64 * c_max;
    let geometric = if rho < 1.0 {
        // Horner accumulation of the partial geometric sum keeps the result
        // at or below n even at rho close to 1.
        let mut sum = 1.0;
        for _ in 1..n {
            sum = 1.0 + rho * sum;
        }
        Some(c_max * sum)
    } else {
        None
    };
    Ok(MultiLayerBounds { linear, geometric })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ContractionCheck {
    pub contracts: bool,
    pub rho_bound: f64,
}

/// The contraction condition: the hidden state growing faster than the
/// error (beta < alpha) bounds rho by (beta/alpha)^2 < 1.
pub fn contraction_condition(alpha: f64, beta: f64) -> Result<ContractionCheck> {
    if !(alpha > 0.0) || !(beta >= 0.0) {
        return Err(Error::invalid("requires alpha > 0 and beta >= 0"));
    }
    let ratio = beta / alpha;
    Ok(ContractionCheck {
        contracts: beta < alpha,
        rho_bound: ratio * ratio,
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PrelnCondition {
    pub holds: bool,
    pub rho_implied: f64,
}

/// Sufficient condition for contraction in a Pre-LN block: with sublayer
/// gain g, residual alignment cos(theta), and error-map Lipschitz bound L,
/// contraction follows when 1 + 2 g cos(theta) + g^2 > (1 + L)^2. The
/// implied factor is (1+L)^2 over that denominator; a non-positive
/// denominator reports the condition as failed.
pub fn preln_sufficient(g: f64, cos_theta: f64, l: f64) -> Result<PrelnCondition> {
    if !(g >= 0.0) || !(l >= 0.0) || !(-1.0..=1.0).contains(&cos_theta) {
        return Err(Error::invalid(
            "requires g >= 0, L >= 0, |cos_theta| <= 1",
        ));
    }
    let denom = 1.0 + 2.0 * g * cos_theta + g * g;
    let numer = (1.0 + l) * (1.0 + l);
    if denom <= 0.0 {
        return Ok(PrelnCondition {
            holds: false,
            rho_implied: f64::INFINITY,
        });
    }
    Ok(PrelnCondition {
        holds: denom > numer,
        rho_implied: numer / denom,
    })
}

/// Per-layer sublayer gain, residual alignment, and empirical error-map
/// Lipschitz estimate, treating one full block as the sublayer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerGain {
    pub layer: usize,
    pub g: f64,
    pub cos_theta: f64,
    pub lipschitz: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GainAlignment {
    pub layers: Vec<LayerGain>,
}

/// Gains and alignments from recorded station matrices: g and cos(theta)
/// from the clean trajectory's block increments, L as the increment
/// difference between the perturbed and clean runs over the incoming error.
pub fn gain_alignment_from_states(
    clean: &HiddenStates,
    perturbed: &HiddenStates,
) -> GainAlignment {
    let mut layers = Vec::with_capacity(clean.layers.len());
    let mut h_in = &clean.embedding;
    let mut hp_in = &perturbed.embedding;
    for (layer, (h_out, hp_out)) in clean.layers.iter().zip(&perturbed.layers).enumerate() {
        let delta_clean = h_out.sub(h_in);
        let delta_pert = hp_out.sub(hp_in);
        let e_in = hp_in.sub(h_in);

        let h_norm = h_in.frobenius_norm();
        let d_norm = delta_clean.frobenius_norm();
        let g = if h_norm > 0.0 { d_norm / h_norm } else { 0.0 };
        let inner: f64 = h_in
            .data()
            .iter()
            .zip(delta_clean.data())
            .map(|(a, b)| a * b)
            .sum();
        let cos_theta = if h_norm > 0.0 && d_norm > 0.0 {
            (inner / (h_norm * d_norm)).clamp(-1.0, 1.0)
        } else {
            0.0
        };
        let e_norm = e_in.frobenius_norm();
        let lipschitz = if e_norm > 0.0 {
            delta_pert.sub(&delta_clean).frobenius_norm() / e_norm
        } else {
            0.0
        };
        layers.push(LayerGain {
            layer,
            g,
            cos_theta,
            lipschitz,
        });
        h_in = h_out;
        hp_in = hp_out;
    }
    GainAlignment { layers }
}

/// Measures gain/alignment/Lipschitz along a perturbed trajectory.
pub fn measure_gain_alignment(
    weights: &ModelWeights,
    tokens: &[u32],
    epsilon: f64,
    seed: u64,
) -> Result<GainAlignment> {
    let (clean, perturbed) = traced_pair(weights, tokens, epsilon, seed)?;
    Ok(gain_alignment_from_states(&clean, &perturbed))
}

/// Per-layer error-tolerance budget from downstream contraction: layer t is
/// weighted by the inverse of prod_{s>t} min(rho_s, 1), normalized to sum 1.
/// Amplifying transitions are capped at 1 so downstream amplification never
/// increases upstream tolerance.
pub fn budget(trace: &LyapunovTrace) -> Result<Vec<f64>> {
    let n_layers = trace.transitions.len();
    for t in &trace.transitions {
        if !t.defined {
            return Err(Error::UndefinedTransition(t.layer));
        }
    }
    let mut raw = vec![0.0; n_layers];
    for layer in 0..n_layers {
        let mut product = 1.0;
        for s in (layer + 1)..n_layers {
            product *= trace.transitions[s].rho.min(1.0);
        }
        raw[layer] = 1.0 / product;
    }
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|b| b / total).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_tokens, synth_model, ModelConfig};

    fn station(h: f64, e: f64) -> Station {
        Station {
            h_norm: h,
            e_norm: e,
            v: (e / h) * (e / h),
        }
    }

    fn trace_of(stations: Vec<Station>) -> LyapunovTrace {
        let transitions = transitions_from_stations(&stations);
        LyapunovTrace {
            epsilon: 0.01,
            seed: 0,
            stations,
            transitions,
        }
    }

    #[test]
    fn v0_equals_epsilon_squared() {
        let w = synth_model(&ModelConfig::tiny(), 1).unwrap();
        let tokens = generate_tokens(101, 48, 3);
        for eps in [0.001, 0.01, 0.1] {
            let tr = trace(&w, &tokens, eps, 7).unwrap();
            let rel = (tr.v0() - eps * eps).abs() / (eps * eps);
            assert!(rel < 1e-6, "V(0) = {} at eps {eps}", tr.v0());
        }
    }

    #[test]
    fn identity_rho_alpha_beta_holds() {
        let w = synth_model(&ModelConfig::tiny(), 2).unwrap();
        let tokens = generate_tokens(101, 64, 5);
        for seed in [1u64, 2] {
            let tr = trace(&w, &tokens, 0.01, seed).unwrap();
            assert_eq!(tr.transitions.len(), 4);
            for t in &tr.transitions {
                assert!(t.defined);
                let lhs = t.rho * t.alpha2;
                assert!(
                    (lhs - t.beta2).abs() <= 1e-10 * t.beta2,
                    "layer {}: rho*alpha2 = {lhs}, beta2 = {}",
                    t.layer,
                    t.beta2
                );
            }
        }
        // Two seeds give different perturbations, hence different traces.
        let a = trace(&w, &tokens, 0.01, 1).unwrap();
        let b = trace(&w, &tokens, 0.01, 2).unwrap();
        assert_ne!(a.transitions[0].rho, b.transitions[0].rho);
    }

    #[test]
    fn trace_is_deterministic() {
        let w = synth_model(&ModelConfig::tiny(), 3).unwrap();
        let tokens = generate_tokens(101, 32, 9);
        let a = trace(&w, &tokens, 0.05, 11).unwrap();
        let b = trace(&w, &tokens, 0.05, 11).unwrap();
        for (sa, sb) in a.stations.iter().zip(&b.stations) {
            assert_eq!(sa.h_norm.to_bits(), sb.h_norm.to_bits());
            assert_eq!(sa.e_norm.to_bits(), sb.e_norm.to_bits());
        }
    }

    #[test]
    fn decompose_hand_case() {
        // Hidden norm doubles, error stays: alpha2 = 4, beta2 = 1, rho = 0.25.
        let tr = trace_of(vec![station(1.0, 0.1), station(2.0, 0.1)]);
        let d = decompose(&tr);
        assert!((d[0].alpha2 - 4.0).abs() < 1e-12);
        assert!((d[0].beta2 - 1.0).abs() < 1e-12);
        assert!((d[0].rho - 0.25).abs() < 1e-12);
    }

    #[test]
    fn zero_error_flags_undefined() {
        let tr = trace_of(vec![station(1.0, 0.0), station(2.0, 0.1)]);
        let d = decompose(&tr);
        assert!(!d[0].defined);
        assert!(budget(&tr).is_err());
    }

    #[test]
    fn multilayer_bounds_values() {
        let b = multilayer_bounds(10, 0.5, 1.0).unwrap();
        assert_eq!(b.linear, 10.0);
        assert!((b.geometric.unwrap() - 1.998046875).abs() < 1e-12);

        let b0 = multilayer_bounds(7, 0.0, 3.0).unwrap();
        assert_eq!(b0.geometric.unwrap(), 3.0);

        let b12 = multilayer_bounds(12, 0.96, 1.0).unwrap();
        let ratio = b12.geometric.unwrap() / b12.linear;
        assert!((ratio - 0.807).abs() < 5e-4, "ratio {ratio}");

        assert!(multilayer_bounds(5, 1.0, 1.0).unwrap().geometric.is_none());
        assert!(multilayer_bounds(5, 1.5, 1.0).unwrap().geometric.is_none());
    }

    #[test]
    fn geometric_never_exceeds_linear_or_limit() {
        for i in 0..500 {
            let n = 1 + (i * 7) % 64;
            let rho = (i as f64 * 0.887).fract() * 0.9999999;
            let c = 0.1 + (i as f64 * 0.313).fract() * 5.0;
            let b = multilayer_bounds(n, rho, c).unwrap();
            let g = b.geometric.unwrap();
            assert!(g <= b.linear, "n={n} rho={rho}: {g} > {}", b.linear);
            assert!(g <= c / (1.0 - rho) + 1e-9);
        }
    }

    #[test]
    fn contraction_condition_cases() {
        let c = contraction_condition(2.0, 1.0).unwrap();
        assert!(c.contracts);
        assert!((c.rho_bound - 0.25).abs() < 1e-12);

        let boundary = contraction_condition(1.5, 1.5).unwrap();
        assert!(!boundary.contracts);
        assert_eq!(boundary.rho_bound, 1.0);

        for i in 0..1000 {
            let alpha = 0.01 + (i as f64 * 0.731).fract() * 4.0;
            let beta = (i as f64 * 0.417).fract() * 4.0;
            let r = contraction_condition(alpha, beta).unwrap();
            assert_eq!(r.contracts, r.rho_bound < 1.0);
        }
    }

    #[test]
    fn preln_sufficient_cases() {
        let p = preln_sufficient(1.0, 1.0, 0.5).unwrap();
        assert!(p.holds);
        assert!((p.rho_implied - 0.5625).abs() < 1e-12);

        // L = 0: holds iff 2 g cos_theta + g^2 > 0.
        let q = preln_sufficient(0.5, 0.1, 0.0).unwrap();
        assert!(q.holds);
        let q2 = preln_sufficient(0.0, 1.0, 0.0).unwrap();
        assert!(!q2.holds, "g = 0 gives equality, not strict inequality");

        // Denominator can reach zero at g = 1, cos_theta = -1.
        let z = preln_sufficient(1.0, -1.0, 0.0).unwrap();
        assert!(!z.holds);

        for gi in 0..20 {
            for ci in 0..20 {
                for li in 0..20 {
                    let g = gi as f64 * 0.2;
                    let cos_theta = -1.0 + ci as f64 * (2.0 / 19.0);
                    let l = li as f64 * 0.15;
                    let r = preln_sufficient(g, cos_theta, l).unwrap();
                    if r.holds {
                        assert!(r.rho_implied < 1.0);
                    }
                }
            }
        }
    }

    #[test]
    fn identity_sublayer_gain() {
        // Stations where each block adds exactly h (output = 2 h): g = 1,
        // cos_theta = 1.
        let emb = Matrix::from_fn(3, 4, |i, j| (i * 4 + j) as f64 + 1.0);
        let l1 = emb.scale(2.0);
        let clean = HiddenStates {
            embedding: emb.clone(),
            layers: vec![l1.clone()],
        };
        let pert = HiddenStates {
            embedding: emb.scale(1.001),
            layers: vec![l1.scale(1.001)],
        };
        let ga = gain_alignment_from_states(&clean, &pert);
        assert!((ga.layers[0].g - 1.0).abs() < 1e-12);
        assert!((ga.layers[0].cos_theta - 1.0).abs() < 1e-12);
    }

    #[test]
    fn preln_condition_implies_measured_contraction() {
        let w = synth_model(&ModelConfig::tiny(), 4).unwrap();
        let tokens = generate_tokens(101, 64, 13);
        let tr = trace(&w, &tokens, 0.01, 17).unwrap();
        let ga = measure_gain_alignment(&w, &tokens, 0.01, 17).unwrap();
        for (layer, gain) in ga.layers.iter().enumerate() {
            let cond = preln_sufficient(gain.g, gain.cos_theta, gain.lipschitz).unwrap();
            if cond.holds {
                let measured = tr.transitions[layer].rho;
                assert!(
                    measured < 1.0,
                    "layer {layer}: condition holds but rho = {measured}"
                );
            }
        }
    }

    #[test]
    fn budget_uniform_and_weighted() {
        let even = trace_of(vec![
            station(1.0, 0.1),
            station(1.0, 0.1),
            station(1.0, 0.1),
            station(1.0, 0.1),
        ]);
        let b = budget(&even).unwrap();
        assert_eq!(b.len(), 3);
        for v in &b {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }

        // rho = 0.5 on every transition, 3 layers: budgets (4, 2, 1)/7.
        let halving = trace_of(vec![
            station(1.0, 0.4),
            station(1.0, 0.4 / 2f64.sqrt()),
            station(1.0, 0.4 / 2.0),
            station(1.0, 0.4 / (2.0 * 2f64.sqrt())),
        ]);
        let b2 = budget(&halving).unwrap();
        assert!((b2[0] - 4.0 / 7.0).abs() < 1e-9, "{b2:?}");
        assert!((b2[1] - 2.0 / 7.0).abs() < 1e-9);
        assert!((b2[2] - 1.0 / 7.0).abs() < 1e-9);
        let sum: f64 = b2.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn budget_caps_amplifying_transitions() {
        let tr = trace_of(vec![
            station(1.0, 0.1),
            station(1.0, 0.05),
            station(1.0, 0.5),
            station(1.0, 0.5),
        ]);
        // Transition 1 amplifies strongly; capped at 1 it must not grant
        // layer 0 extra tolerance.
        let b = budget(&tr).unwrap();
        assert!(b[0] >= b[1], "{b:?}");
        assert!((b[1] - b[2]).abs() < 1e-12);
    }
}
