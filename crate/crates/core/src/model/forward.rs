//! Forward passes of the forecaster, on tape (for training) and as
//! value-level wrappers (for inspection and inference).

use ndarray::Array1;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::ModelError;
use crate::gaussian::{GaussianDist, GaussianForecastSet};
use crate::tape::{Tape, Var};

use super::{AttnVars, BoundModel, DecoderVars, EncoderVars, GruVars, ModelState, ReferenceSet};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Gaussian embedding with elementwise std.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDist {
    pub mu: Array1<f64>,
    pub sigma: Array1<f64>,
}

/// Where the embedding sample comes from: the variational head during
/// training, the encoder prior at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleSource {
    Posterior,
    Prior,
}

/// All random draws of one forward pass, fixed up front so a pass is a
/// deterministic function of the parameters.
#[derive(Debug, Clone)]
pub struct NoisePlan {
    pub eps_u: Vec<Array1<f64>>,
    pub eps_z: Vec<Array1<f64>>,
    /// Per node, one uniform per reference for set inclusion.
    pub uniforms: Vec<Vec<f64>>,
    /// When set, correlation sets are taken as given (used by gradient
    /// checks so set membership cannot flip under parameter perturbation).
    pub frozen_sets: Option<Vec<Vec<usize>>>,
}

impl NoisePlan {
    pub fn sample(rng: &mut ChaCha12Rng, n_nodes: usize, n_refs: usize, d_u: usize) -> Self {
        let mut normal_vec = |d: usize| -> Array1<f64> {
            (0..d).map(|_| StandardNormal.sample(rng)).collect()
        };
        let eps_u = (0..n_nodes).map(|_| normal_vec(d_u)).collect();
        let eps_z = (0..n_nodes).map(|_| normal_vec(d_u)).collect();
        let uniforms = (0..n_nodes)
            .map(|_| (0..n_refs).map(|_| rng.gen::<f64>()).collect())
            .collect();
        NoisePlan {
            eps_u,
            eps_z,
            uniforms,
            frozen_sets: None,
        }
    }
}

/// Sampled latent values of one pass.
#[derive(Debug, Clone)]
pub struct LatentTrace {
    pub u: Vec<Array1<f64>>,
    pub z_local: Vec<Array1<f64>>,
    pub z_global: Array1<f64>,
    pub correlation_sets: Vec<Vec<usize>>,
    pub attention_weights: Array1<f64>,
}

/// Output of [`raw_forecast_pass`].
pub struct RawPass {
    /// Raw means over all nodes (N-vector var).
    pub mu_hat: Var,
    /// Raw stds over all nodes (N-vector var).
    pub sigma_hat: Var,
    /// Latent ELBO terms `sum_i [log q_i(u_i) - log P(z_i|.) - log P(u_i|y)]`
    /// (length-1 var; zero for prior sampling).
    pub latent_penalty: Var,
    pub trace: LatentTrace,
}

impl RawPass {
    pub fn forecast_set(&self, tape: &Tape) -> GaussianForecastSet {
        let mu = tape.value(self.mu_hat);
        let sigma = tape.value(self.sigma_hat);
        GaussianForecastSet::new(
            mu.iter()
                .zip(sigma.iter())
                .map(|(&mu, &sigma)| GaussianDist { mu, sigma })
                .collect(),
        )
    }
}

fn gru_step(tape: &mut Tape, g: &GruVars, x: f64, h: Var) -> Var {
    let z_pre = tape.gate_affine(g.w_z, x, g.u_z, h, g.b_z);
    let z = tape.sigmoid(z_pre);
    let r_pre = tape.gate_affine(g.w_r, x, g.u_r, h, g.b_r);
    let r = tape.sigmoid(r_pre);
    let gated = tape.mul(r, h);
    let h_pre = tape.gate_affine(g.w_h, x, g.u_h, gated, g.b_h);
    let h_tilde = tape.tanh(h_pre);
    let zh_old = tape.mul(z, h);
    let zh_new = tape.mul(z, h_tilde);
    let kept = tape.sub(h, zh_old);
    tape.add(kept, zh_new)
}

/// Attention-pooled summary of a var sequence: softmax over additive scores.
fn attention_pool(tape: &mut Tape, attn: &AttnVars, items: &[Var]) -> (Var, Var) {
    let scores: Vec<Var> = items
        .iter()
        .map(|&item| tape.attn_score(attn.w, attn.b, attn.v, item))
        .collect();
    let stacked = tape.stack(&scores);
    let alpha = tape.softmax(stacked);
    let pooled = tape.weighted_sum(alpha, items);
    (pooled, alpha)
}

/// Encoder output on tape.
pub struct EncodedSeq {
    /// Attention-pooled bidirectional hidden state (2 d_u).
    pub pooled: Var,
    /// Prior embedding mean (d_u).
    pub mu: Var,
    /// Prior embedding std (d_u, strictly positive).
    pub sigma: Var,
}

/// Bidirectional recurrent pass with attention pooling and Gaussian heads.
pub fn encode_on_tape(
    tape: &mut Tape,
    enc: &EncoderVars,
    d_u: usize,
    seq: &[f64],
) -> Result<EncodedSeq, ModelError> {
    if seq.is_empty() {
        return Err(ModelError::EmptySequence);
    }
    debug_assert!(seq.iter().all(|x| x.is_finite()), "encoder input must be finite");
    let mut h = tape.constant(Array1::zeros(d_u));
    let mut fwd = Vec::with_capacity(seq.len());
    for &x in seq {
        h = gru_step(tape, &enc.gru_fwd, x, h);
        fwd.push(h);
    }
    let mut h = tape.constant(Array1::zeros(d_u));
    let mut bwd = vec![h; seq.len()];
    for (t, &x) in seq.iter().enumerate().rev() {
        h = gru_step(tape, &enc.gru_bwd, x, h);
        bwd[t] = h;
    }
    let combined: Vec<Var> = fwd
        .iter()
        .zip(&bwd)
        .map(|(&f, &b)| tape.concat(&[f, b]))
        .collect();
    let (pooled, _) = attention_pool(tape, &enc.pool, &combined);
    let mu = enc.head_mu.apply(tape, pooled);
    let sigma_pre = enc.head_sigma.apply(tape, pooled);
    let sigma_sp = tape.softplus(sigma_pre);
    let sigma = tape.add_const(sigma_sp, 1e-6);
    Ok(EncodedSeq { pooled, mu, sigma })
}

/// Variational head over the encoder's pooled hidden state.
pub fn posterior_on_tape(
    tape: &mut Tape,
    bound: &BoundModel,
    pooled: Var,
) -> (Var, Var) {
    let hidden_pre = bound.posterior.hidden.apply(tape, pooled);
    let hidden = tape.tanh(hidden_pre);
    let mu = bound.posterior.head_mu.apply(tape, hidden);
    let sigma_pre = bound.posterior.head_sigma.apply(tape, hidden);
    let sigma_sp = tape.softplus(sigma_pre);
    let sigma = tape.add_const(sigma_sp, 1e-6);
    (mu, sigma)
}

/// Prior embedding distribution of a sequence (deterministic).
pub fn encode(state: &ModelState, seq: &[f64]) -> Result<EmbeddingDist, ModelError> {
    let mut tape = Tape::new();
    let bound = BoundModel::bind(&mut tape, state);
    let enc = encode_on_tape(&mut tape, &bound.encoder, state.config.d_u, seq)?;
    Ok(EmbeddingDist {
        mu: tape.value(enc.mu).clone(),
        sigma: tape.value(enc.sigma).clone(),
    })
}

/// Variational posterior distribution of a sequence (deterministic).
pub fn variational_posterior(state: &ModelState, seq: &[f64]) -> Result<EmbeddingDist, ModelError> {
    let mut tape = Tape::new();
    let bound = BoundModel::bind(&mut tape, state);
    let enc = encode_on_tape(&mut tape, &bound.encoder, state.config.d_u, seq)?;
    let (mu, sigma) = posterior_on_tape(&mut tape, &bound, enc.pooled);
    Ok(EmbeddingDist {
        mu: tape.value(mu).clone(),
        sigma: tape.value(sigma).clone(),
    })
}

/// Reparameterized sample `mu + sigma * noise`.
pub fn sample_embedding(dist: &EmbeddingDist, noise: &Array1<f64>) -> Array1<f64> {
    assert_eq!(noise.len(), dist.mu.len());
    &dist.mu + &(&dist.sigma * noise)
}

/// Independently includes each reference with probability
/// `exp(-kappa * ||u - ref_j||^2)`, given one uniform draw per reference.
/// Falls back to the single nearest reference when the draw is empty.
pub fn correlation_set_from_uniforms(
    u: &Array1<f64>,
    reference_means: &[Array1<f64>],
    kappa: f64,
    uniforms: &[f64],
) -> Vec<usize> {
    assert!(kappa > 0.0);
    assert_eq!(reference_means.len(), uniforms.len());
    assert!(!reference_means.is_empty());
    let mut set = Vec::new();
    let mut nearest = 0usize;
    let mut nearest_d2 = f64::INFINITY;
    for (j, r) in reference_means.iter().enumerate() {
        let diff = u - r;
        let d2 = diff.dot(&diff);
        if d2 < nearest_d2 {
            nearest_d2 = d2;
            nearest = j;
        }
        if uniforms[j] < (-kappa * d2).exp() {
            set.push(j);
        }
    }
    if set.is_empty() {
        set.push(nearest);
    }
    set
}

/// [`correlation_set_from_uniforms`] with uniforms drawn from `rng`.
pub fn build_correlation_set(
    u: &Array1<f64>,
    reference_means: &[Array1<f64>],
    kappa: f64,
    rng: &mut ChaCha12Rng,
) -> Vec<usize> {
    let uniforms: Vec<f64> = (0..reference_means.len()).map(|_| rng.gen()).collect();
    correlation_set_from_uniforms(u, reference_means, kappa, &uniforms)
}

/// Local-latent distribution for a correlation set:
/// mean `sum_j NN1(ref_j)`, std `exp(sum_j NN2(ref_j))` elementwise.
pub fn local_latent(
    state: &ModelState,
    set: &[usize],
    refs: &ReferenceSet,
) -> Result<EmbeddingDist, ModelError> {
    if set.is_empty() {
        return Err(ModelError::EmptyCorrelationSet);
    }
    let mut tape = Tape::new();
    let bound = BoundModel::bind(&mut tape, state);
    let ref_vars: Vec<Var> = refs
        .means
        .iter()
        .map(|m| tape.constant(m.clone()))
        .collect();
    let nets = reference_nets(&mut tape, &bound, &ref_vars);
    let (mean, log_std) = sum_over_set(&mut tape, &nets, set);
    let std = tape.exp(log_std);
    Ok(EmbeddingDist {
        mu: tape.value(mean).clone(),
        sigma: tape.value(std).clone(),
    })
}

/// Attention-combined global latent over node embeddings; weights sum to 1.
pub fn global_latent(
    state: &ModelState,
    embeddings: &[Array1<f64>],
) -> (Array1<f64>, Array1<f64>) {
    assert!(!embeddings.is_empty());
    let mut tape = Tape::new();
    let bound = BoundModel::bind(&mut tape, state);
    let vars: Vec<Var> = embeddings
        .iter()
        .map(|u| tape.constant(u.clone()))
        .collect();
    let (z, beta) = attention_pool(&mut tape, &bound.global_attn, &vars);
    (tape.value(z).clone(), tape.value(beta).clone())
}

/// Per-reference `(NN1, NN2)` outputs, computed once per pass and summed
/// over each node's correlation set.
fn reference_nets(tape: &mut Tape, bound: &BoundModel, ref_vars: &[Var]) -> Vec<(Var, Var)> {
    ref_vars
        .iter()
        .map(|&r| {
            let shared_pre = bound.sdcg.shared.apply(tape, r);
            let shared = tape.tanh(shared_pre);
            let mean = bound.sdcg.out_mean.apply(tape, shared);
            let log_std = bound.sdcg.out_logstd.apply(tape, shared);
            (mean, log_std)
        })
        .collect()
}

fn sum_over_set(tape: &mut Tape, nets: &[(Var, Var)], set: &[usize]) -> (Var, Var) {
    let mut mean = nets[set[0]].0;
    let mut log_std = nets[set[0]].1;
    for &j in &set[1..] {
        mean = tape.add(mean, nets[j].0);
        log_std = tape.add(log_std, nets[j].1);
    }
    (mean, log_std)
}

fn decode_on_tape(
    tape: &mut Tape,
    dec: &DecoderVars,
    u: Var,
    z_local: Var,
    z_global: Var,
) -> (Var, Var) {
    let e = tape.concat(&[u, z_local, z_global]);
    let h1_pre = dec.l1.apply(tape, e);
    let h1 = tape.tanh(h1_pre);
    let h2_pre = dec.l2.apply(tape, h1);
    let h2 = tape.tanh(h2_pre);
    let mu = dec.head_mu.apply(tape, h2);
    let sigma_pre = dec.head_sigma.apply(tape, h2);
    let sigma_sp = tape.softplus(sigma_pre);
    let sigma = tape.add_const(sigma_sp, 1e-6);
    (mu, sigma)
}

/// Raw forecast distribution from latents through a node's decoder.
pub fn decode_raw(
    state: &ModelState,
    u: &Array1<f64>,
    z_local: &Array1<f64>,
    z_global: &Array1<f64>,
    node_id: usize,
) -> Result<GaussianDist, ModelError> {
    if node_id == 0 || node_id > state.config.n_nodes {
        return Err(ModelError::UnknownNode(node_id));
    }
    let mut tape = Tape::new();
    let bound = BoundModel::bind(&mut tape, state);
    let u = tape.constant(u.clone());
    let zl = tape.constant(z_local.clone());
    let zg = tape.constant(z_global.clone());
    let (mu, sigma) = decode_on_tape(&mut tape, bound.decoder_for(node_id - 1), u, zl, zg);
    Ok(GaussianDist {
        mu: tape.scalar(mu),
        sigma: tape.scalar(sigma),
    })
}

/// Gaussian log-density of a reparameterized sample, expressed through the
/// std vector only (`sample = mu + sigma * eps`, so the quadratic term is a
/// constant `||eps||^2`).
fn log_density_at_own_sample(tape: &mut Tape, log_sigma_sum: Var, eps: &Array1<f64>, d: usize) -> Var {
    let neg = tape.scale_const(log_sigma_sum, -1.0);
    tape.add_const(neg, -0.5 * eps.dot(eps) - 0.5 * d as f64 * LN_2PI)
}

/// Full forward passes sharing one encoding: encode every node once, then
/// for each noise plan sample embeddings, realize correlation sets, build
/// local and global latents, and decode raw Gaussians.
///
/// `windows[i]` is node `i + 1`'s input slice. Training passes sample the
/// embedding from the variational head and accumulate the latent ELBO
/// terms; inference passes sample from the encoder prior.
pub fn raw_forecast_passes(
    tape: &mut Tape,
    bound: &BoundModel,
    d_u: usize,
    windows: &[Vec<f64>],
    refs: &ReferenceSet,
    plans: &[NoisePlan],
    source: SampleSource,
) -> Result<Vec<RawPass>, ModelError> {
    let n = windows.len();
    assert!(!refs.is_empty());

    let ref_vars: Vec<Var> = refs
        .means
        .iter()
        .map(|m| tape.constant(m.clone()))
        .collect();
    let nets = reference_nets(tape, bound, &ref_vars);

    // Encoding and the sampling distributions are plan-independent.
    let mut encoded = Vec::with_capacity(n);
    for window in windows {
        encoded.push(encode_on_tape(tape, &bound.encoder, d_u, window)?);
    }
    let dists: Vec<(Var, Var)> = encoded
        .iter()
        .map(|enc| match source {
            SampleSource::Posterior => posterior_on_tape(tape, bound, enc.pooled),
            SampleSource::Prior => (enc.mu, enc.sigma),
        })
        .collect();

    let mut passes = Vec::with_capacity(plans.len());
    for plan in plans {
        assert_eq!(plan.eps_u.len(), n);
        let mut u_vars = Vec::with_capacity(n);
        let mut traces_u = Vec::with_capacity(n);
        let mut penalties = Vec::new();
        let mut sets = Vec::with_capacity(n);
        let mut z_vars = Vec::with_capacity(n);
        let mut z_values = Vec::with_capacity(n);

        for (i, enc) in encoded.iter().enumerate() {
            let (mu, sigma) = dists[i];
            let eps = tape.constant(plan.eps_u[i].clone());
            let scaled = tape.mul(sigma, eps);
            let u = tape.add(mu, scaled);
            u_vars.push(u);
            traces_u.push(tape.value(u).clone());

            if source == SampleSource::Posterior {
                // log q_i(u_i) - log P(u_i | y): the q term via its own
                // sample, the prior term evaluated at that sample.
                let ln_q = tape.ln(sigma);
                let ln_q_sum = tape.sum(ln_q);
                let lq = log_density_at_own_sample(tape, ln_q_sum, &plan.eps_u[i], d_u);

                let ln_p = tape.ln(enc.sigma);
                let ln_p_sum = tape.sum(ln_p);
                let neg_ln_p = tape.scale_const(ln_p_sum, -1.0);
                let diff = tape.sub(u, enc.mu);
                let sq = tape.mul(diff, diff);
                let var_p = tape.mul(enc.sigma, enc.sigma);
                let ratio = tape.div(sq, var_p);
                let ratio_sum = tape.sum(ratio);
                let quad = tape.scale_const(ratio_sum, -0.5);
                let lp = tape.add(neg_ln_p, quad);
                let lp = tape.add_const(lp, -0.5 * d_u as f64 * LN_2PI);

                let q_minus_p = tape.sub(lq, lp);
                penalties.push(q_minus_p);
            }
        }

        // Correlation sets and local latents.
        for (i, &u) in u_vars.iter().enumerate() {
            let set = match &plan.frozen_sets {
                Some(sets) => sets[i].clone(),
                None => correlation_set_from_uniforms(
                    tape.value(u),
                    &refs.means,
                    bound.kappa,
                    &plan.uniforms[i],
                ),
            };
            let (mean, log_std) = sum_over_set(tape, &nets, &set);
            let std = tape.exp(log_std);
            let eps = tape.constant(plan.eps_z[i].clone());
            let scaled = tape.mul(std, eps);
            let z = tape.add(mean, scaled);
            z_values.push(tape.value(z).clone());
            z_vars.push(z);
            if source == SampleSource::Posterior {
                // minus log P(z_i | u_i, refs) at its own sample
                let log_std_sum = tape.sum(log_std);
                let lz = log_density_at_own_sample(tape, log_std_sum, &plan.eps_z[i], d_u);
                let neg = tape.scale_const(lz, -1.0);
                penalties.push(neg);
            }
            sets.push(set);
        }

        // Global latent over all sampled embeddings.
        let (z_global, beta) = attention_pool(tape, &bound.global_attn, &u_vars);

        // Decode every node.
        let mut mu_parts = Vec::with_capacity(n);
        let mut sigma_parts = Vec::with_capacity(n);
        for i in 0..n {
            let (mu, sigma) =
                decode_on_tape(tape, bound.decoder_for(i), u_vars[i], z_vars[i], z_global);
            mu_parts.push(mu);
            sigma_parts.push(sigma);
        }
        let mu_hat = tape.stack(&mu_parts);
        let sigma_hat = tape.stack(&sigma_parts);

        let latent_penalty = if penalties.is_empty() {
            tape.scalar_const(0.0)
        } else {
            let mut acc = penalties[0];
            for &p in &penalties[1..] {
                acc = tape.add(acc, p);
            }
            acc
        };

        passes.push(RawPass {
            mu_hat,
            sigma_hat,
            latent_penalty,
            trace: LatentTrace {
                u: traces_u,
                z_local: z_values,
                z_global: tape.value(z_global).clone(),
                correlation_sets: sets,
                attention_weights: tape.value(beta).clone(),
            },
        });
    }
    Ok(passes)
}

/// Single-plan convenience wrapper around [`raw_forecast_passes`].
pub fn raw_forecast_pass(
    tape: &mut Tape,
    bound: &BoundModel,
    d_u: usize,
    windows: &[Vec<f64>],
    refs: &ReferenceSet,
    plan: &NoisePlan,
    source: SampleSource,
) -> Result<RawPass, ModelError> {
    let mut passes = raw_forecast_passes(
        tape,
        bound,
        d_u,
        windows,
        refs,
        std::slice::from_ref(plan),
        source,
    )?;
    Ok(passes.pop().expect("one plan yields one pass"))
}

/// Encodes every node's full-length sequence into the cached reference set.
pub fn compute_reference_set(
    state: &ModelState,
    sequences: &[Vec<f64>],
) -> Result<ReferenceSet, ModelError> {
    let mut means = Vec::with_capacity(sequences.len());
    let mut stds = Vec::with_capacity(sequences.len());
    for seq in sequences {
        let dist = encode(state, seq)?;
        means.push(dist.mu);
        stds.push(dist.sigma);
    }
    Ok(ReferenceSet { means, stds })
}
