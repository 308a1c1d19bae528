//! The neural-process forecaster producing raw per-node Gaussians.
//!
//! Components: a probabilistic sequence encoder (bidirectional GRU with
//! attention pooling and Gaussian heads), a stochastic correlation set over
//! cached reference embeddings, a local latent per node, a global latent
//! pooled over all node embeddings, and per-node feed-forward decoders.
//! Decoder parameters are per-node by default and shared in the
//! all-shared ablation; everything else is shared across nodes.

mod forward;

pub use forward::{
    build_correlation_set, compute_reference_set, correlation_set_from_uniforms, decode_raw,
    encode, global_latent, local_latent, raw_forecast_pass, raw_forecast_passes,
    sample_embedding, variational_posterior, EmbeddingDist, LatentTrace, NoisePlan, RawPass,
    SampleSource,
};

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::refine::{RefineVars, RefinementParams};
use crate::rng::derive_rng;
use crate::tape::{Tape, Var};

/// Bias giving `softplus(b) = 1`, used so std heads start near 1.
const SOFTPLUS_UNIT_BIAS: f64 = 0.541_324_854_612_918_3;

/// Structural hyperparameters of the forecaster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of hierarchy nodes N.
    pub n_nodes: usize,
    /// Embedding width (also the GRU hidden width per direction).
    pub d_u: usize,
    /// Correlation-set bandwidth.
    pub kappa: f64,
    /// One decoder shared by all nodes instead of one per node.
    pub shared_decoder: bool,
    /// Refinement std bound constant.
    pub c: f64,
}

impl ModelConfig {
    /// Full-size profile: 60-unit embeddings.
    pub fn standard(n_nodes: usize) -> Self {
        ModelConfig {
            n_nodes,
            d_u: 60,
            kappa: 1.0,
            shared_decoder: false,
            c: 5.0,
        }
    }

    /// Small profile for tests and desk-scale experiments.
    pub fn tiny(n_nodes: usize) -> Self {
        ModelConfig {
            d_u: 8,
            ..Self::standard(n_nodes)
        }
    }
}

/// A dense layer `y = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    fn init(out_dim: usize, in_dim: usize, rng: &mut ChaCha12Rng) -> Self {
        let k = 1.0 / (in_dim as f64).sqrt();
        Linear {
            w: Array2::from_shape_fn((out_dim, in_dim), |_| rng.gen_range(-k..k)),
            b: Array1::zeros(out_dim),
        }
    }
}

/// One direction of a GRU over scalar inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    pub w_z: Array2<f64>,
    pub u_z: Array2<f64>,
    pub b_z: Array1<f64>,
    pub w_r: Array2<f64>,
    pub u_r: Array2<f64>,
    pub b_r: Array1<f64>,
    pub w_h: Array2<f64>,
    pub u_h: Array2<f64>,
    pub b_h: Array1<f64>,
}

impl GruParams {
    fn init(d: usize, rng: &mut ChaCha12Rng) -> Self {
        let k = 1.0 / (d as f64).sqrt();
        let mut mat = |rows: usize, cols: usize| {
            Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-k..k))
        };
        GruParams {
            w_z: mat(d, 1),
            u_z: mat(d, d),
            b_z: Array1::zeros(d),
            w_r: mat(d, 1),
            u_r: mat(d, d),
            b_r: Array1::zeros(d),
            w_h: mat(d, 1),
            u_h: mat(d, d),
            b_h: Array1::zeros(d),
        }
    }
}

/// Additive attention pooling: score_t = v . tanh(W x_t + b).
#[derive(Debug, Clone, PartialEq)]
pub struct AttnPool {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub v: Array1<f64>,
}

impl AttnPool {
    fn init(attn_dim: usize, in_dim: usize, rng: &mut ChaCha12Rng) -> Self {
        let k_in = 1.0 / (in_dim as f64).sqrt();
        let k_a = 1.0 / (attn_dim as f64).sqrt();
        AttnPool {
            w: Array2::from_shape_fn((attn_dim, in_dim), |_| rng.gen_range(-k_in..k_in)),
            b: Array1::zeros(attn_dim),
            v: Array1::from_shape_fn(attn_dim, |_| rng.gen_range(-k_a..k_a)),
        }
    }
}

/// Shared sequence encoder: bidirectional GRU, attention pooling, and
/// Gaussian embedding heads.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub gru_fwd: GruParams,
    pub gru_bwd: GruParams,
    pub pool: AttnPool,
    pub head_mu: Linear,
    pub head_sigma: Linear,
}

/// Variational head over the encoder's pooled hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorParams {
    pub hidden: Linear,
    pub head_mu: Linear,
    pub head_sigma: Linear,
}

/// Local-latent networks over reference embeddings; the first layer is
/// shared between the mean and log-std nets.
#[derive(Debug, Clone, PartialEq)]
pub struct SdcgParams {
    pub shared: Linear,
    pub out_mean: Linear,
    pub out_logstd: Linear,
}

/// Per-node decoder: three layers over concat(u, z_local, z_global).
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub l1: Linear,
    pub l2: Linear,
    pub head_mu: Linear,
    pub head_sigma: Linear,
}

impl DecoderParams {
    fn init(d: usize, rng: &mut ChaCha12Rng) -> Self {
        let mut dec = DecoderParams {
            l1: Linear::init(d, 3 * d, rng),
            l2: Linear::init(d, d, rng),
            head_mu: Linear::init(1, d, rng),
            head_sigma: Linear::init(1, d, rng),
        };
        dec.head_sigma.b[0] = SOFTPLUS_UNIT_BIAS;
        dec
    }
}

/// Cached embedding distributions of the full-length training sequences,
/// one per node; refreshed at each epoch start.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSet {
    pub means: Vec<Array1<f64>>,
    pub stds: Vec<Array1<f64>>,
}

impl ReferenceSet {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }
}

/// All learnable state plus the cached reference embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub encoder: EncoderParams,
    pub posterior: PosteriorParams,
    pub sdcg: SdcgParams,
    pub global_attn: AttnPool,
    /// One entry per node, or exactly one when `config.shared_decoder`.
    pub decoders: Vec<DecoderParams>,
    pub refine: RefinementParams,
    pub reference: Option<ReferenceSet>,
}

impl ModelState {
    /// Fresh state with reproducible initialization.
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let d = config.d_u;
        let mut rng = derive_rng(seed, &[0x1217]);
        let mut encoder = EncoderParams {
            gru_fwd: GruParams::init(d, &mut rng),
            gru_bwd: GruParams::init(d, &mut rng),
            pool: AttnPool::init(d, 2 * d, &mut rng),
            head_mu: Linear::init(d, 2 * d, &mut rng),
            head_sigma: Linear::init(d, 2 * d, &mut rng),
        };
        encoder.head_sigma.b.fill(SOFTPLUS_UNIT_BIAS);
        let mut posterior = PosteriorParams {
            hidden: Linear::init(d, 2 * d, &mut rng),
            head_mu: Linear::init(d, d, &mut rng),
            head_sigma: Linear::init(d, d, &mut rng),
        };
        posterior.head_sigma.b.fill(SOFTPLUS_UNIT_BIAS);
        let sdcg = SdcgParams {
            shared: Linear::init(d, d, &mut rng),
            out_mean: Linear::init(d, d, &mut rng),
            out_logstd: Linear::init(d, d, &mut rng),
        };
        let global_attn = AttnPool::init(d, d, &mut rng);
        let decoder_count = if config.shared_decoder { 1 } else { config.n_nodes };
        let decoders = (0..decoder_count)
            .map(|_| DecoderParams::init(d, &mut rng))
            .collect();
        let refine = RefinementParams::init(config.n_nodes, config.c);
        ModelState {
            config,
            encoder,
            posterior,
            sdcg,
            global_attn,
            decoders,
            refine,
            reference: None,
        }
    }

    /// Decoder responsible for a 0-based node index.
    pub fn decoder_index(&self, node_idx: usize) -> usize {
        if self.config.shared_decoder {
            0
        } else {
            node_idx
        }
    }

    /// Total number of scalar parameters in the decoders.
    pub fn decoder_param_count(&self) -> usize {
        let mut count = 0;
        for dec in &self.decoders {
            for lin in [&dec.l1, &dec.l2, &dec.head_mu, &dec.head_sigma] {
                count += lin.w.len() + lin.b.len();
            }
        }
        count
    }

    /// Visits every parameter tensor in a stable order.
    pub fn visit(&self, f: &mut dyn FnMut(&str, ParamView)) {
        visit_encoder(&self.encoder, f);
        visit_posterior(&self.posterior, f);
        visit_sdcg(&self.sdcg, f);
        visit_attn("global_attn", &self.global_attn, f);
        for (i, dec) in self.decoders.iter().enumerate() {
            visit_decoder(i, dec, f);
        }
        f("refine.w_hat", ParamView::Vec(&self.refine.w_hat));
        f("refine.w", ParamView::Mat(&self.refine.w));
        f("refine.v1", ParamView::Mat(&self.refine.v1));
        f("refine.v2", ParamView::Mat(&self.refine.v2));
        f("refine.b", ParamView::Vec(&self.refine.b));
    }

    /// Mutable visitation in the same order as [`ModelState::visit`].
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamViewMut)) {
        visit_encoder_mut(&mut self.encoder, f);
        visit_posterior_mut(&mut self.posterior, f);
        visit_sdcg_mut(&mut self.sdcg, f);
        visit_attn_mut("global_attn", &mut self.global_attn, f);
        for (i, dec) in self.decoders.iter_mut().enumerate() {
            visit_decoder_mut(i, dec, f);
        }
        f("refine.w_hat", ParamViewMut::Vec(&mut self.refine.w_hat));
        f("refine.w", ParamViewMut::Mat(&mut self.refine.w));
        f("refine.v1", ParamViewMut::Mat(&mut self.refine.v1));
        f("refine.v2", ParamViewMut::Mat(&mut self.refine.v2));
        f("refine.b", ParamViewMut::Vec(&mut self.refine.b));
    }
}

/// Read-only view of one parameter tensor.
pub enum ParamView<'a> {
    Vec(&'a Array1<f64>),
    Mat(&'a Array2<f64>),
}

/// Mutable view of one parameter tensor.
pub enum ParamViewMut<'a> {
    Vec(&'a mut Array1<f64>),
    Mat(&'a mut Array2<f64>),
}

fn visit_linear(path: &str, lin: &Linear, f: &mut dyn FnMut(&str, ParamView)) {
    f(&format!("{path}.w"), ParamView::Mat(&lin.w));
    f(&format!("{path}.b"), ParamView::Vec(&lin.b));
}

fn visit_linear_mut(path: &str, lin: &mut Linear, f: &mut dyn FnMut(&str, ParamViewMut)) {
    f(&format!("{path}.w"), ParamViewMut::Mat(&mut lin.w));
    f(&format!("{path}.b"), ParamViewMut::Vec(&mut lin.b));
}

fn visit_gru(path: &str, gru: &GruParams, f: &mut dyn FnMut(&str, ParamView)) {
    f(&format!("{path}.w_z"), ParamView::Mat(&gru.w_z));
    f(&format!("{path}.u_z"), ParamView::Mat(&gru.u_z));
    f(&format!("{path}.b_z"), ParamView::Vec(&gru.b_z));
    f(&format!("{path}.w_r"), ParamView::Mat(&gru.w_r));
    f(&format!("{path}.u_r"), ParamView::Mat(&gru.u_r));
    f(&format!("{path}.b_r"), ParamView::Vec(&gru.b_r));
    f(&format!("{path}.w_h"), ParamView::Mat(&gru.w_h));
    f(&format!("{path}.u_h"), ParamView::Mat(&gru.u_h));
    f(&format!("{path}.b_h"), ParamView::Vec(&gru.b_h));
}

fn visit_gru_mut(path: &str, gru: &mut GruParams, f: &mut dyn FnMut(&str, ParamViewMut)) {
    f(&format!("{path}.w_z"), ParamViewMut::Mat(&mut gru.w_z));
    f(&format!("{path}.u_z"), ParamViewMut::Mat(&mut gru.u_z));
    f(&format!("{path}.b_z"), ParamViewMut::Vec(&mut gru.b_z));
    f(&format!("{path}.w_r"), ParamViewMut::Mat(&mut gru.w_r));
    f(&format!("{path}.u_r"), ParamViewMut::Mat(&mut gru.u_r));
    f(&format!("{path}.b_r"), ParamViewMut::Vec(&mut gru.b_r));
    f(&format!("{path}.w_h"), ParamViewMut::Mat(&mut gru.w_h));
    f(&format!("{path}.u_h"), ParamViewMut::Mat(&mut gru.u_h));
    f(&format!("{path}.b_h"), ParamViewMut::Vec(&mut gru.b_h));
}

fn visit_attn(path: &str, attn: &AttnPool, f: &mut dyn FnMut(&str, ParamView)) {
    f(&format!("{path}.w"), ParamView::Mat(&attn.w));
    f(&format!("{path}.b"), ParamView::Vec(&attn.b));
    f(&format!("{path}.v"), ParamView::Vec(&attn.v));
}

fn visit_attn_mut(path: &str, attn: &mut AttnPool, f: &mut dyn FnMut(&str, ParamViewMut)) {
    f(&format!("{path}.w"), ParamViewMut::Mat(&mut attn.w));
    f(&format!("{path}.b"), ParamViewMut::Vec(&mut attn.b));
    f(&format!("{path}.v"), ParamViewMut::Vec(&mut attn.v));
}

fn visit_encoder(enc: &EncoderParams, f: &mut dyn FnMut(&str, ParamView)) {
    visit_gru("encoder.gru_fwd", &enc.gru_fwd, f);
    visit_gru("encoder.gru_bwd", &enc.gru_bwd, f);
    visit_attn("encoder.pool", &enc.pool, f);
    visit_linear("encoder.head_mu", &enc.head_mu, f);
    visit_linear("encoder.head_sigma", &enc.head_sigma, f);
}

fn visit_encoder_mut(enc: &mut EncoderParams, f: &mut dyn FnMut(&str, ParamViewMut)) {
    visit_gru_mut("encoder.gru_fwd", &mut enc.gru_fwd, f);
    visit_gru_mut("encoder.gru_bwd", &mut enc.gru_bwd, f);
    visit_attn_mut("encoder.pool", &mut enc.pool, f);
    visit_linear_mut("encoder.head_mu", &mut enc.head_mu, f);
    visit_linear_mut("encoder.head_sigma", &mut enc.head_sigma, f);
}

fn visit_posterior(post: &PosteriorParams, f: &mut dyn FnMut(&str, ParamView)) {
    visit_linear("posterior.hidden", &post.hidden, f);
    visit_linear("posterior.head_mu", &post.head_mu, f);
    visit_linear("posterior.head_sigma", &post.head_sigma, f);
}

fn visit_posterior_mut(post: &mut PosteriorParams, f: &mut dyn FnMut(&str, ParamViewMut)) {
    visit_linear_mut("posterior.hidden", &mut post.hidden, f);
    visit_linear_mut("posterior.head_mu", &mut post.head_mu, f);
    visit_linear_mut("posterior.head_sigma", &mut post.head_sigma, f);
}

fn visit_sdcg(sdcg: &SdcgParams, f: &mut dyn FnMut(&str, ParamView)) {
    visit_linear("sdcg.shared", &sdcg.shared, f);
    visit_linear("sdcg.out_mean", &sdcg.out_mean, f);
    visit_linear("sdcg.out_logstd", &sdcg.out_logstd, f);
}

fn visit_sdcg_mut(sdcg: &mut SdcgParams, f: &mut dyn FnMut(&str, ParamViewMut)) {
    visit_linear_mut("sdcg.shared", &mut sdcg.shared, f);
    visit_linear_mut("sdcg.out_mean", &mut sdcg.out_mean, f);
    visit_linear_mut("sdcg.out_logstd", &mut sdcg.out_logstd, f);
}

fn visit_decoder(i: usize, dec: &DecoderParams, f: &mut dyn FnMut(&str, ParamView)) {
    visit_linear(&format!("decoder.{i}.l1"), &dec.l1, f);
    visit_linear(&format!("decoder.{i}.l2"), &dec.l2, f);
    visit_linear(&format!("decoder.{i}.head_mu"), &dec.head_mu, f);
    visit_linear(&format!("decoder.{i}.head_sigma"), &dec.head_sigma, f);
}

fn visit_decoder_mut(i: usize, dec: &mut DecoderParams, f: &mut dyn FnMut(&str, ParamViewMut)) {
    visit_linear_mut(&format!("decoder.{i}.l1"), &mut dec.l1, f);
    visit_linear_mut(&format!("decoder.{i}.l2"), &mut dec.l2, f);
    visit_linear_mut(&format!("decoder.{i}.head_mu"), &mut dec.head_mu, f);
    visit_linear_mut(&format!("decoder.{i}.head_sigma"), &mut dec.head_sigma, f);
}

/// A [`Linear`] registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub w: Var,
    pub b: Var,
}

impl LinearVars {
    fn bind(tape: &mut Tape, lin: &Linear) -> Self {
        LinearVars {
            w: tape.mat_param(&lin.w),
            b: tape.vec_param(&lin.b),
        }
    }

    /// `W x + b`.
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Var {
        let y = tape.matvec(self.w, x);
        tape.add(y, self.b)
    }
}

/// GRU parameters registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub w_z: Var,
    pub u_z: Var,
    pub b_z: Var,
    pub w_r: Var,
    pub u_r: Var,
    pub b_r: Var,
    pub w_h: Var,
    pub u_h: Var,
    pub b_h: Var,
}

impl GruVars {
    fn bind(tape: &mut Tape, gru: &GruParams) -> Self {
        GruVars {
            w_z: tape.mat_param(&gru.w_z),
            u_z: tape.mat_param(&gru.u_z),
            b_z: tape.vec_param(&gru.b_z),
            w_r: tape.mat_param(&gru.w_r),
            u_r: tape.mat_param(&gru.u_r),
            b_r: tape.vec_param(&gru.b_r),
            w_h: tape.mat_param(&gru.w_h),
            u_h: tape.mat_param(&gru.u_h),
            b_h: tape.vec_param(&gru.b_h),
        }
    }
}

/// Attention pooling parameters registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct AttnVars {
    pub w: Var,
    pub b: Var,
    pub v: Var,
}

impl AttnVars {
    fn bind(tape: &mut Tape, attn: &AttnPool) -> Self {
        AttnVars {
            w: tape.mat_param(&attn.w),
            b: tape.vec_param(&attn.b),
            v: tape.vec_param(&attn.v),
        }
    }
}

/// Encoder parameters registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    pub gru_fwd: GruVars,
    pub gru_bwd: GruVars,
    pub pool: AttnVars,
    pub head_mu: LinearVars,
    pub head_sigma: LinearVars,
}

/// Posterior parameters registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct PosteriorVars {
    pub hidden: LinearVars,
    pub head_mu: LinearVars,
    pub head_sigma: LinearVars,
}

/// Correlation-net parameters registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct SdcgVars {
    pub shared: LinearVars,
    pub out_mean: LinearVars,
    pub out_logstd: LinearVars,
}

/// Decoder parameters registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct DecoderVars {
    pub l1: LinearVars,
    pub l2: LinearVars,
    pub head_mu: LinearVars,
    pub head_sigma: LinearVars,
}

/// Whole model registered on one tape, with path bookkeeping so gradients
/// map back onto [`ModelState`] tensors.
pub struct BoundModel {
    pub encoder: EncoderVars,
    pub posterior: PosteriorVars,
    pub sdcg: SdcgVars,
    pub global_attn: AttnVars,
    pub decoders: Vec<DecoderVars>,
    pub refine: RefineVars,
    pub kappa: f64,
    pub c: f64,
    pub shared_decoder: bool,
    paths: Vec<(String, Var)>,
}

impl BoundModel {
    pub fn bind(tape: &mut Tape, state: &ModelState) -> Self {
        let mut paths = Vec::new();
        let encoder = EncoderVars {
            gru_fwd: GruVars::bind(tape, &state.encoder.gru_fwd),
            gru_bwd: GruVars::bind(tape, &state.encoder.gru_bwd),
            pool: AttnVars::bind(tape, &state.encoder.pool),
            head_mu: LinearVars::bind(tape, &state.encoder.head_mu),
            head_sigma: LinearVars::bind(tape, &state.encoder.head_sigma),
        };
        record_gru(&mut paths, "encoder.gru_fwd", &encoder.gru_fwd);
        record_gru(&mut paths, "encoder.gru_bwd", &encoder.gru_bwd);
        record_attn(&mut paths, "encoder.pool", &encoder.pool);
        record_linear(&mut paths, "encoder.head_mu", &encoder.head_mu);
        record_linear(&mut paths, "encoder.head_sigma", &encoder.head_sigma);

        let posterior = PosteriorVars {
            hidden: LinearVars::bind(tape, &state.posterior.hidden),
            head_mu: LinearVars::bind(tape, &state.posterior.head_mu),
            head_sigma: LinearVars::bind(tape, &state.posterior.head_sigma),
        };
        record_linear(&mut paths, "posterior.hidden", &posterior.hidden);
        record_linear(&mut paths, "posterior.head_mu", &posterior.head_mu);
        record_linear(&mut paths, "posterior.head_sigma", &posterior.head_sigma);

        let sdcg = SdcgVars {
            shared: LinearVars::bind(tape, &state.sdcg.shared),
            out_mean: LinearVars::bind(tape, &state.sdcg.out_mean),
            out_logstd: LinearVars::bind(tape, &state.sdcg.out_logstd),
        };
        record_linear(&mut paths, "sdcg.shared", &sdcg.shared);
        record_linear(&mut paths, "sdcg.out_mean", &sdcg.out_mean);
        record_linear(&mut paths, "sdcg.out_logstd", &sdcg.out_logstd);

        let global_attn = AttnVars::bind(tape, &state.global_attn);
        record_attn(&mut paths, "global_attn", &global_attn);

        let mut decoders = Vec::with_capacity(state.decoders.len());
        for (i, dec) in state.decoders.iter().enumerate() {
            let vars = DecoderVars {
                l1: LinearVars::bind(tape, &dec.l1),
                l2: LinearVars::bind(tape, &dec.l2),
                head_mu: LinearVars::bind(tape, &dec.head_mu),
                head_sigma: LinearVars::bind(tape, &dec.head_sigma),
            };
            record_linear(&mut paths, &format!("decoder.{i}.l1"), &vars.l1);
            record_linear(&mut paths, &format!("decoder.{i}.l2"), &vars.l2);
            record_linear(&mut paths, &format!("decoder.{i}.head_mu"), &vars.head_mu);
            record_linear(&mut paths, &format!("decoder.{i}.head_sigma"), &vars.head_sigma);
            decoders.push(vars);
        }

        let refine = RefineVars::bind(tape, &state.refine);
        for (path, var) in refine.bound_paths() {
            paths.push((path.to_string(), var));
        }

        BoundModel {
            encoder,
            posterior,
            sdcg,
            global_attn,
            decoders,
            refine,
            kappa: state.config.kappa,
            c: state.config.c,
            shared_decoder: state.config.shared_decoder,
            paths,
        }
    }

    pub fn decoder_for(&self, node_idx: usize) -> &DecoderVars {
        if self.shared_decoder {
            &self.decoders[0]
        } else {
            &self.decoders[node_idx]
        }
    }

    /// `(path, var)` pairs in binding order.
    pub fn paths(&self) -> &[(String, Var)] {
        &self.paths
    }
}

fn record_linear(paths: &mut Vec<(String, Var)>, path: &str, vars: &LinearVars) {
    paths.push((format!("{path}.w"), vars.w));
    paths.push((format!("{path}.b"), vars.b));
}

fn record_gru(paths: &mut Vec<(String, Var)>, path: &str, vars: &GruVars) {
    paths.push((format!("{path}.w_z"), vars.w_z));
    paths.push((format!("{path}.u_z"), vars.u_z));
    paths.push((format!("{path}.b_z"), vars.b_z));
    paths.push((format!("{path}.w_r"), vars.w_r));
    paths.push((format!("{path}.u_r"), vars.u_r));
    paths.push((format!("{path}.b_r"), vars.b_r));
    paths.push((format!("{path}.w_h"), vars.w_h));
    paths.push((format!("{path}.u_h"), vars.u_h));
    paths.push((format!("{path}.b_h"), vars.b_h));
}

fn record_attn(paths: &mut Vec<(String, Var)>, path: &str, vars: &AttnVars) {
    paths.push((format!("{path}.w"), vars.w));
    paths.push((format!("{path}.b"), vars.b));
    paths.push((format!("{path}.v"), vars.v));
}
