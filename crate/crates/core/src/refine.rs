//! Refinement of raw forecast parameters across the hierarchy.
//!
//! Each node's refined mean blends its own raw mean with a learned linear
//! combination of all raw means, gated by `gamma_i = sigmoid(w_hat_i)`; the
//! refined standard deviation rescales the raw one by a bounded gate of all
//! raw parameters. Both maps are differentiable and exposed in a plain-f64
//! form and a tape form for training.

use ndarray::{Array1, Array2};

use crate::gaussian::{GaussianDist, GaussianForecastSet};
use crate::hierarchy::Hierarchy;
use crate::tape::{sigmoid_f, Tape, Var};

/// Learnable refinement parameters over N nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinementParams {
    /// Gate logits, one per node.
    pub w_hat: Array1<f64>,
    /// Mixing weights; row i holds w_i over all raw means.
    pub w: Array2<f64>,
    /// Row i weighs raw means inside the std gate.
    pub v1: Array2<f64>,
    /// Row i weighs raw stds inside the std gate.
    pub v2: Array2<f64>,
    /// Std-gate biases, one per node.
    pub b: Array1<f64>,
    /// Positive constant bounding refined stds at `c * sigma_hat`.
    pub c: f64,
}

impl RefinementParams {
    /// Neutral initialization: gamma = 0.5 everywhere, uniform mixing,
    /// centered std gate.
    pub fn init(n: usize, c: f64) -> Self {
        assert!(c > 0.0);
        RefinementParams {
            w_hat: Array1::zeros(n),
            w: Array2::from_elem((n, n), 1.0 / n as f64),
            v1: Array2::zeros((n, n)),
            v2: Array2::zeros((n, n)),
            b: Array1::zeros(n),
            c,
        }
    }

    /// Configuration that reproduces raw forecasts: saturated gates and a
    /// centered std gate with c = 2.
    pub fn identity(n: usize) -> Self {
        let mut params = Self::init(n, 2.0);
        params.w_hat.fill(20.0);
        params
    }

    pub fn node_count(&self) -> usize {
        self.w_hat.len()
    }
}

/// Refined mean and gate for one node: `gamma_i = sigmoid(w_hat_i)`,
/// `mu_i = gamma_i mu_hat_i + (1 - gamma_i) w_i . mu_hat`.
pub fn refine_mean(raw_means: &[f64], node_id: usize, params: &RefinementParams) -> (f64, f64) {
    let i = node_id - 1;
    let gamma = sigmoid_f(params.w_hat[i]);
    let mixed: f64 = params
        .w
        .row(i)
        .iter()
        .zip(raw_means)
        .map(|(w, m)| w * m)
        .sum();
    (gamma * raw_means[i] + (1.0 - gamma) * mixed, gamma)
}

/// Refined std for one node:
/// `sigma_i = c sigma_hat_i sigmoid(v1_i . mu_hat + v2_i . sigma_hat + b_i)`,
/// strictly inside `(0, c * sigma_hat_i)`.
pub fn refine_std(
    raw_means: &[f64],
    raw_stds: &[f64],
    node_id: usize,
    params: &RefinementParams,
) -> f64 {
    let i = node_id - 1;
    let pre: f64 = params
        .v1
        .row(i)
        .iter()
        .zip(raw_means)
        .map(|(v, m)| v * m)
        .sum::<f64>()
        + params
            .v2
            .row(i)
            .iter()
            .zip(raw_stds)
            .map(|(v, s)| v * s)
            .sum::<f64>()
        + params.b[i];
    params.c * raw_stds[i] * sigmoid_f(pre)
}

/// Applies [`refine_mean`] and [`refine_std`] to every node.
pub fn refine_all(
    raw: &GaussianForecastSet,
    params: &RefinementParams,
) -> (GaussianForecastSet, Vec<f64>) {
    let n = raw.node_count();
    assert_eq!(n, params.node_count());
    let raw_means: Vec<f64> = raw.dists().iter().map(|d| d.mu).collect();
    let raw_stds: Vec<f64> = raw.dists().iter().map(|d| d.sigma).collect();
    let mut dists = Vec::with_capacity(n);
    let mut gammas = Vec::with_capacity(n);
    for id in 1..=n {
        let (mu, gamma) = refine_mean(&raw_means, id, params);
        let sigma = refine_std(&raw_means, &raw_stds, id, params);
        dists.push(GaussianDist { mu, sigma });
        gammas.push(gamma);
    }
    (GaussianForecastSet::new(dists), gammas)
}

/// Refinement parameters registered as tape leaves.
#[derive(Debug, Clone, Copy)]
pub struct RefineVars {
    pub w_hat: Var,
    pub w: Var,
    pub v1: Var,
    pub v2: Var,
    pub b: Var,
}

impl RefineVars {
    pub fn bind(tape: &mut Tape, params: &RefinementParams) -> Self {
        RefineVars {
            w_hat: tape.vec_param(&params.w_hat),
            w: tape.mat_param(&params.w),
            v1: tape.mat_param(&params.v1),
            v2: tape.mat_param(&params.v2),
            b: tape.vec_param(&params.b),
        }
    }

    /// Paths paired with vars, matching [`RefinementParams`] visitation order.
    pub fn bound_paths(&self) -> Vec<(&'static str, Var)> {
        vec![
            ("refine.w_hat", self.w_hat),
            ("refine.w", self.w),
            ("refine.v1", self.v1),
            ("refine.v2", self.v2),
            ("refine.b", self.b),
        ]
    }
}

/// Tape version of [`refine_all`] over N-vectors of raw means and stds.
/// Returns `(mu, sigma, gamma)` vector vars.
pub fn refine_on_tape(
    tape: &mut Tape,
    vars: RefineVars,
    mu_hat: Var,
    sigma_hat: Var,
    c: f64,
) -> (Var, Var, Var) {
    let gamma = tape.sigmoid(vars.w_hat);
    let own = tape.mul(gamma, mu_hat);
    let mixed = tape.matvec(vars.w, mu_hat);
    let neg_gamma = tape.scale_const(gamma, -1.0);
    let one_minus = tape.add_const(neg_gamma, 1.0);
    let cross = tape.mul(one_minus, mixed);
    let mu = tape.add(own, cross);

    let pre_mu = tape.matvec(vars.v1, mu_hat);
    let pre_sigma = tape.matvec(vars.v2, sigma_hat);
    let pre = tape.add(pre_mu, pre_sigma);
    let pre = tape.add(pre, vars.b);
    let gate = tape.sigmoid(pre);
    let scaled = tape.mul(sigma_hat, gate);
    let sigma = tape.scale_const(scaled, c);
    (mu, sigma, gamma)
}

/// Node scope for gamma statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GammaScope {
    All,
    Leaves,
    Internal,
}

/// Mean and population standard deviation of the gates over a node scope.
pub fn mean_gamma(gammas: &[f64], h: &Hierarchy, scope: GammaScope) -> (f64, f64) {
    assert_eq!(gammas.len(), h.node_count());
    let ids: Vec<usize> = match scope {
        GammaScope::All => (1..=h.node_count()).collect(),
        GammaScope::Leaves => h.leaves(),
        GammaScope::Internal => h.internal_nodes(),
    };
    let n = ids.len() as f64;
    let mean = ids.iter().map(|&id| gammas[id - 1]).sum::<f64>() / n;
    let var = ids
        .iter()
        .map(|&id| (gammas[id - 1] - mean).powi(2))
        .sum::<f64>()
        / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::build_hierarchy;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn random_params(n: usize, c: f64, rng: &mut ChaCha12Rng) -> RefinementParams {
        RefinementParams {
            w_hat: Array1::from_shape_fn(n, |_| rng.gen_range(-2.0..2.0)),
            w: Array2::from_shape_fn((n, n), |_| rng.gen_range(-1.0..1.0)),
            v1: Array2::from_shape_fn((n, n), |_| rng.gen_range(-0.5..0.5)),
            v2: Array2::from_shape_fn((n, n), |_| rng.gen_range(-0.5..0.5)),
            b: Array1::from_shape_fn(n, |_| rng.gen_range(-1.0..1.0)),
            c,
        }
    }

    fn random_raw(n: usize, rng: &mut ChaCha12Rng) -> GaussianForecastSet {
        GaussianForecastSet::new(
            (0..n)
                .map(|_| GaussianDist {
                    mu: rng.gen_range(-3.0..3.0),
                    sigma: rng.gen_range(0.2..2.0),
                })
                .collect(),
        )
    }

    #[test]
    fn saturated_gate_passes_raw_mean_through() {
        let mut params = RefinementParams::init(3, 5.0);
        params.w_hat.fill(20.0);
        let (mu, gamma) = refine_mean(&[1.0, 2.0, 3.0], 2, &params);
        assert!(gamma > 1.0 - 1e-8);
        assert!((mu - 2.0).abs() < 1e-7);
    }

    #[test]
    fn one_hot_self_mixing_is_identity() {
        let mut params = RefinementParams::init(3, 5.0);
        params.w = Array2::eye(3);
        for id in 1..=3 {
            let (mu, gamma) = refine_mean(&[1.0, 2.0, 3.0], id, &params);
            assert!((gamma - 0.5).abs() < 1e-12);
            assert!((mu - id as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn neutral_gate_uniform_mixing_hand_case() {
        let mut params = RefinementParams::init(3, 5.0);
        params.w.row_mut(0).fill(1.0);
        let (mu, _) = refine_mean(&[1.0, 2.0, 3.0], 1, &params);
        assert!((mu - 3.5).abs() < 1e-12);
    }

    #[test]
    fn centered_std_gate_with_c2_is_identity() {
        let params = RefinementParams::init(3, 2.0);
        let sigma = refine_std(&[1.0, 2.0, 3.0], &[0.5, 1.5, 2.5], 2, &params);
        assert!((sigma - 1.5).abs() < 1e-12);
    }

    #[test]
    fn large_bias_saturates_to_upper_bound() {
        let mut params = RefinementParams::init(2, 5.0);
        params.b.fill(50.0);
        let sigma = refine_std(&[0.0, 0.0], &[1.0, 2.0], 2, &params);
        assert!((sigma - 10.0).abs() < 1e-9);
    }

    #[test]
    fn identity_configuration_reproduces_raw() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let raw = random_raw(6, &mut rng);
        let params = RefinementParams::identity(6);
        let (refined, gammas) = refine_all(&raw, &params);
        for id in 1..=6 {
            assert!((refined.get(id).mu - raw.get(id).mu).abs() < 1e-6);
            assert!((refined.get(id).sigma - raw.get(id).sigma).abs() < 1e-6);
            assert!(gammas[id - 1] > 1.0 - 1e-6);
        }
    }

    #[test]
    fn gates_and_stds_respect_open_bounds() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        for _ in 0..50 {
            let params = random_params(5, 3.0, &mut rng);
            let raw = random_raw(5, &mut rng);
            let (refined, gammas) = refine_all(&raw, &params);
            for id in 1..=5 {
                assert!(gammas[id - 1] > 0.0 && gammas[id - 1] < 1.0);
                let upper = params.c * raw.get(id).sigma;
                assert!(refined.get(id).sigma > 0.0 && refined.get(id).sigma < upper);
            }
        }
    }

    #[test]
    fn mean_is_linear_in_raw_means() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let params = random_params(4, 5.0, &mut rng);
        let a: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let (s, t) = (1.7, -0.6);
        let combo: Vec<f64> = a.iter().zip(&b).map(|(x, y)| s * x + t * y).collect();
        for id in 1..=4 {
            let (ma, _) = refine_mean(&a, id, &params);
            let (mb, _) = refine_mean(&b, id, &params);
            let (mc, _) = refine_mean(&combo, id, &params);
            assert!((mc - (s * ma + t * mb)).abs() < 1e-10);
        }
    }

    #[test]
    fn cross_gradient_of_mean_is_scaled_mixing_weight() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let params = random_params(4, 5.0, &mut rng);
        let raw: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let i = 2usize; // node id 3
        let mut tape = Tape::new();
        let vars = RefineVars::bind(&mut tape, &params);
        let mu_hat = tape.vec_param(&Array1::from_vec(raw.clone()));
        let sig_hat = tape.constant(Array1::from_elem(4, 1.0));
        let (mu, _, _) = refine_on_tape(&mut tape, vars, mu_hat, sig_hat, params.c);
        let mu_i = tape.index(mu, i);
        let grads = tape.backward(mu_i);
        let g = grads.vec_grad(&tape, mu_hat);
        let gamma = sigmoid_f(params.w_hat[i]);
        for j in 0..4 {
            if j == i {
                continue;
            }
            let expect = (1.0 - gamma) * params.w[(i, j)];
            assert!((g[j] - expect).abs() < 1e-10, "j {j}: {} vs {expect}", g[j]);
        }
    }

    #[test]
    fn tape_refinement_matches_plain_and_fd() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let n = 4;
        let params = random_params(n, 3.0, &mut rng);
        let raw = random_raw(n, &mut rng);
        let raw_means: Vec<f64> = raw.dists().iter().map(|d| d.mu).collect();
        let raw_stds: Vec<f64> = raw.dists().iter().map(|d| d.sigma).collect();

        // scalar objective: sum(mu) + sum(sigma)
        let eval = |p: &RefinementParams| {
            let (refined, _) = refine_all(&raw, p);
            refined.dists().iter().map(|d| d.mu + d.sigma).sum::<f64>()
        };

        let mut tape = Tape::new();
        let vars = RefineVars::bind(&mut tape, &params);
        let mu_hat = tape.vec_param(&Array1::from_vec(raw_means.clone()));
        let sig_hat = tape.vec_param(&Array1::from_vec(raw_stds.clone()));
        let (mu, sigma, _) = refine_on_tape(&mut tape, vars, mu_hat, sig_hat, params.c);

        // tape values agree with the plain implementation
        let (plain, _) = refine_all(&raw, &params);
        for id in 1..=n {
            assert!((tape.value(mu)[id - 1] - plain.get(id).mu).abs() < 1e-12);
            assert!((tape.value(sigma)[id - 1] - plain.get(id).sigma).abs() < 1e-12);
        }

        let sm = tape.sum(mu);
        let ss = tape.sum(sigma);
        let loss = tape.add(sm, ss);
        let grads = tape.backward(loss);

        // finite differences over every parameter tensor
        let h = 1e-6;
        let check = |fd: f64, an: f64, what: &str| {
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!((fd - an).abs() / denom < 1e-4, "{what}: fd {fd} vs {an}");
        };
        let g_what = grads.vec_grad(&tape, vars.w_hat);
        for i in 0..n {
            let mut lo = params.clone();
            let mut hi = params.clone();
            lo.w_hat[i] -= h;
            hi.w_hat[i] += h;
            check((eval(&hi) - eval(&lo)) / (2.0 * h), g_what[i], "w_hat");
        }
        let g_w = grads.mat_grad(&tape, vars.w);
        let g_v1 = grads.mat_grad(&tape, vars.v1);
        let g_v2 = grads.mat_grad(&tape, vars.v2);
        for r in 0..n {
            for c in 0..n {
                for (name, g_m) in [("w", &g_w), ("v1", &g_v1), ("v2", &g_v2)] {
                    let mut lo = params.clone();
                    let mut hi = params.clone();
                    let (lo_m, hi_m) = match name {
                        "w" => (&mut lo.w, &mut hi.w),
                        "v1" => (&mut lo.v1, &mut hi.v1),
                        _ => (&mut lo.v2, &mut hi.v2),
                    };
                    lo_m[(r, c)] -= h;
                    hi_m[(r, c)] += h;
                    check((eval(&hi) - eval(&lo)) / (2.0 * h), g_m[(r, c)], name);
                }
            }
        }
        let g_b = grads.vec_grad(&tape, vars.b);
        for i in 0..n {
            let mut lo = params.clone();
            let mut hi = params.clone();
            lo.b[i] -= h;
            hi.b[i] += h;
            check((eval(&hi) - eval(&lo)) / (2.0 * h), g_b[i], "b");
        }
        // and w.r.t. the raw inputs themselves
        let g_mu = grads.vec_grad(&tape, mu_hat);
        let g_sig = grads.vec_grad(&tape, sig_hat);
        let f = |d: Vec<GaussianDist>| {
            let (r, _) = refine_all(&GaussianForecastSet::new(d), &params);
            r.dists().iter().map(|d| d.mu + d.sigma).sum::<f64>()
        };
        for i in 0..n {
            let mut lo = raw.dists().to_vec();
            let mut hi = raw.dists().to_vec();
            lo[i].mu -= h;
            hi[i].mu += h;
            check((f(hi) - f(lo)) / (2.0 * h), g_mu[i], "mu_hat");
            let mut lo = raw.dists().to_vec();
            let mut hi = raw.dists().to_vec();
            lo[i].sigma -= h;
            hi[i].sigma += h;
            check((f(hi) - f(lo)) / (2.0 * h), g_sig[i], "sigma_hat");
        }
    }

    #[test]
    fn gamma_statistics_over_scopes() {
        let h = build_hierarchy(&[(1, 2, 1.0), (1, 3, 1.0)]).unwrap();
        let (mean, std) = mean_gamma(&[0.5, 0.5, 0.5], &h, GammaScope::All);
        assert_eq!((mean, std), (0.5, 0.0));
        let (mean, _) = mean_gamma(&[0.2, 0.4, 0.6], &h, GammaScope::All);
        assert!((mean - 0.4).abs() < 1e-12);
        let (leaf_mean, _) = mean_gamma(&[0.2, 0.4, 0.6], &h, GammaScope::Leaves);
        assert!((leaf_mean - 0.5).abs() < 1e-12);
        let (int_mean, int_std) = mean_gamma(&[0.2, 0.4, 0.6], &h, GammaScope::Internal);
        assert_eq!((int_mean, int_std), (0.2, 0.0));
    }
}
