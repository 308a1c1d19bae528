//! Training: the ELBO likelihood loss, the total objective with coherency
//! regularization, pre-training on raw forecasts, the main loop with early
//! stopping, ablation variants, and backtesting-based config selection.
//!
//! Batches are organized as full-hierarchy windows: one batch item is a
//! shared `(t1, t2)` input window across all N nodes, so the coherency loss
//! always sees a complete forecast set. Each item's noise is derived from
//! `(seed, phase, epoch, t1, t2)`, so losses do not depend on batch
//! composition.

use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::TrainError;
use crate::gaussian::crps_gaussian;
use crate::hierarchy::Hierarchy;
use crate::model::{BoundModel, ModelConfig, ModelState, NoisePlan, ParamViewMut, ReferenceSet, SampleSource};
use crate::panel::{GroupedWindow, TimeSeriesPanel, WindowSet};
use crate::refine::{refine_all, refine_on_tape};
use crate::rng::derive_rng;
use crate::tape::{Tape, Var};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_7;

const TAG_PLAN: u64 = 0x70;
const TAG_SHUFFLE: u64 = 0x71;

/// Ablation variants of the training routine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Per-node decoders, both losses.
    Full,
    /// All parameters shared, including the decoder.
    PGlobal,
    /// Full training, then per-node decoder fine-tuning on likelihood only.
    PFinetune,
    /// Likelihood only; the coherency loss is never evaluated.
    PNocoherent,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::PGlobal => "p_global",
            Variant::PFinetune => "p_finetune",
            Variant::PNocoherent => "p_nocoherent",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = TrainError;
    fn from_str(s: &str) -> Result<Self, TrainError> {
        match s {
            "full" => Ok(Variant::Full),
            "p_global" => Ok(Variant::PGlobal),
            "p_finetune" => Ok(Variant::PFinetune),
            "p_nocoherent" => Ok(Variant::PNocoherent),
            other => Err(TrainError::UnknownVariant(other.to_string())),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// All knobs of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Coherency-loss weight.
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Early-stopping patience in epochs.
    pub patience: usize,
    /// Forecast horizon.
    pub tau: usize,
    /// Correlation-set bandwidth.
    pub kappa: f64,
    /// Refinement std bound constant.
    pub c: f64,
    /// Reparameterization samples per batch item.
    pub mc_samples_train: usize,
    pub variant: Variant,
    pub seed: u64,
    /// Embedding width.
    pub d_u: usize,
    /// Minimum input-window length.
    pub min_len: usize,
    /// Likelihood-only epochs on raw outputs before the main loop.
    pub pretrain_epochs: usize,
    /// Decoder-only epochs appended by the fine-tune variant.
    pub finetune_epochs: usize,
    /// Window groups visited per epoch (0 = all).
    pub windows_per_epoch: usize,
    /// Monte-Carlo passes per validation point.
    pub val_samples: usize,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    /// Upper bound on full-history input length (0 = unlimited).
    pub max_context: usize,
}

impl TrainConfig {
    /// Paper-scale defaults (60-unit embeddings, patience 150).
    pub fn standard(tau: usize, seed: u64) -> Self {
        TrainConfig {
            lambda: 1.0,
            learning_rate: 0.001,
            batch_size: 50,
            max_epochs: 600,
            patience: 150,
            tau,
            kappa: 1.0,
            c: 5.0,
            mc_samples_train: 1,
            variant: Variant::Full,
            seed,
            d_u: 60,
            min_len: 5,
            pretrain_epochs: 40,
            finetune_epochs: 60,
            windows_per_epoch: 0,
            val_samples: 8,
            grad_clip: 10.0,
            max_context: 0,
        }
    }

    /// Small profile for tests and desk-scale experiments.
    pub fn tiny(tau: usize, seed: u64) -> Self {
        TrainConfig {
            batch_size: 10,
            max_epochs: 30,
            patience: 10,
            d_u: 8,
            pretrain_epochs: 6,
            finetune_epochs: 8,
            windows_per_epoch: 120,
            max_context: 60,
            ..Self::standard(tau, seed)
        }
    }

    fn model_config(&self, n_nodes: usize) -> ModelConfig {
        ModelConfig {
            n_nodes,
            d_u: self.d_u,
            kappa: self.kappa,
            shared_decoder: self.variant == Variant::PGlobal,
            c: self.c,
        }
    }
}

/// One epoch's loss summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub l1: f64,
    pub l2: f64,
    pub total: f64,
    pub val_crps: f64,
}

/// Loss trajectory of a training run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub rows: Vec<EpochRow>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// How many times the coherency loss was evaluated during training.
    pub l2_evaluations: usize,
}

impl TrainHistory {
    /// CSV with header `epoch,l1,l2,total,val_crps`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,l1,l2,total,val_crps\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                row.epoch, row.l1, row.l2, row.total, row.val_crps
            ));
        }
        out
    }
}

/// `L = L1 + lambda * L2`.
pub fn total_loss(l1: f64, l2: f64, lambda: f64) -> f64 {
    l1 + lambda * l2
}

/// Parameter gradient, matching the shape of its tensor.
#[derive(Debug, Clone)]
pub enum GradTensor {
    Vec(Array1<f64>),
    Mat(Array2<f64>),
}

impl GradTensor {
    fn sq_norm(&self) -> f64 {
        match self {
            GradTensor::Vec(a) => a.iter().map(|v| v * v).sum(),
            GradTensor::Mat(a) => a.iter().map(|v| v * v).sum(),
        }
    }

    fn scale(&mut self, factor: f64) {
        match self {
            GradTensor::Vec(a) => *a *= factor,
            GradTensor::Mat(a) => *a *= factor,
        }
    }
}

/// Which parameters a phase updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ParamFilter {
    All,
    /// Everything except the refinement parameters.
    ForecasterOnly,
    DecodersOnly,
}

impl ParamFilter {
    fn admits(&self, path: &str) -> bool {
        match self {
            ParamFilter::All => true,
            ParamFilter::ForecasterOnly => !path.starts_with("refine."),
            ParamFilter::DecodersOnly => path.starts_with("decoder."),
        }
    }
}

/// Adam with bias correction, state keyed by parameter path.
struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: usize,
    moments: BTreeMap<String, (GradTensor, GradTensor)>,
}

impl Adam {
    fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    fn apply(&mut self, state: &mut ModelState, grads: &BTreeMap<String, GradTensor>) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let moments = &mut self.moments;
        state.visit_mut(&mut |path, view| {
            let Some(grad) = grads.get(path) else { return };
            match (view, grad) {
                (ParamViewMut::Vec(param), GradTensor::Vec(g)) => {
                    let slot = moments.entry(path.to_string()).or_insert_with(|| {
                        (
                            GradTensor::Vec(Array1::zeros(g.len())),
                            GradTensor::Vec(Array1::zeros(g.len())),
                        )
                    });
                    let (GradTensor::Vec(m), GradTensor::Vec(v)) = (&mut slot.0, &mut slot.1)
                    else {
                        unreachable!()
                    };
                    for i in 0..g.len() {
                        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                        param[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                    }
                }
                (ParamViewMut::Mat(param), GradTensor::Mat(g)) => {
                    let slot = moments.entry(path.to_string()).or_insert_with(|| {
                        (
                            GradTensor::Mat(Array2::zeros(g.dim())),
                            GradTensor::Mat(Array2::zeros(g.dim())),
                        )
                    });
                    let (GradTensor::Mat(m), GradTensor::Mat(v)) = (&mut slot.0, &mut slot.1)
                    else {
                        unreachable!()
                    };
                    for ((i, j), gv) in g.indexed_iter() {
                        m[(i, j)] = b1 * m[(i, j)] + (1.0 - b1) * gv;
                        v[(i, j)] = b2 * v[(i, j)] + (1.0 - b2) * gv * gv;
                        param[(i, j)] -= lr * (m[(i, j)] / bc1) / ((v[(i, j)] / bc2).sqrt() + eps);
                    }
                }
                _ => panic!("gradient shape mismatch at {path}"),
            }
        });
    }
}

/// Constant matrices that express the coherency loss as matrix algebra:
/// internal-row selection, weighted child-mean sums, squared-weight sums.
pub struct CoherencyMats {
    select_internal: Rc<Array2<f64>>,
    child_mu: Rc<Array2<f64>>,
    child_var: Rc<Array2<f64>>,
    pub n_internal: usize,
}

impl CoherencyMats {
    pub fn new(h: &Hierarchy) -> Self {
        let internal = h.internal_nodes();
        let n = h.node_count();
        let mut select = Array2::zeros((internal.len(), n));
        let mut child_mu = Array2::zeros((internal.len(), n));
        let mut child_var = Array2::zeros((internal.len(), n));
        for (r, &i) in internal.iter().enumerate() {
            select[(r, i - 1)] = 1.0;
            for &(c, w) in h.children(i) {
                child_mu[(r, c - 1)] = w;
                child_var[(r, c - 1)] = w * w;
            }
        }
        CoherencyMats {
            select_internal: Rc::new(select),
            child_mu: Rc::new(child_mu),
            child_var: Rc::new(child_var),
            n_internal: internal.len(),
        }
    }
}

/// Coherency loss on tape over refined N-vectors of means and stds.
pub fn coherency_on_tape(tape: &mut Tape, mats: &CoherencyMats, mu: Var, sigma: Var) -> Var {
    let mu_int = tape.const_matvec(mats.select_internal.clone(), mu);
    let agg_mu = tape.const_matvec(mats.child_mu.clone(), mu);
    let gap = tape.sub(mu_int, agg_mu);
    let gap_sq = tape.mul(gap, gap);

    let var_all = tape.mul(sigma, sigma);
    let sig_int = tape.const_matvec(mats.select_internal.clone(), sigma);
    let var_int = tape.mul(sig_int, sig_int);
    let agg_var = tape.const_matvec(mats.child_var.clone(), var_all);

    let num1 = tape.add(var_int, gap_sq);
    let den1 = tape.scale_const(agg_var, 2.0);
    let term1 = tape.div(num1, den1);
    let num2 = tape.add(agg_var, gap_sq);
    let den2 = tape.scale_const(var_int, 2.0);
    let term2 = tape.div(num2, den2);
    let terms = tape.add(term1, term2);
    tape.sum(terms)
}

/// What one batch pass computed.
struct BatchLoss {
    l1: Var,
    l2: Option<Var>,
}

/// Builds the batch loss on a tape. Each group contributes (per sample) a
/// masked Gaussian NLL of its targets plus latent ELBO terms; group losses
/// are averaged over samples and the batch.
#[allow(clippy::too_many_arguments)]
fn build_batch_loss(
    tape: &mut Tape,
    bound: &BoundModel,
    d_u: usize,
    panel: &TimeSeriesPanel,
    groups: &[GroupedWindow],
    tau: usize,
    refs: &ReferenceSet,
    plans: &[Vec<NoisePlan>],
    use_refined: bool,
    coherency: Option<&CoherencyMats>,
) -> Result<BatchLoss, TrainError> {
    let n = panel.node_count();
    let mut item_l1 = Vec::new();
    let mut item_l2 = Vec::new();
    for (g_idx, group) in groups.iter().enumerate() {
        let windows: Vec<Vec<f64>> = (1..=n)
            .map(|id| filled_slice(panel, id, group.t1, group.t2))
            .collect();
        let target_t = group.t2 + tau;
        let mut target = Array1::zeros(n);
        let mut weight = Array1::zeros(n);
        for &id in &group.nodes {
            target[id - 1] = panel.value(id, target_t);
            weight[id - 1] = 1.0;
        }
        let mut sample_l1 = Vec::new();
        let mut sample_l2 = Vec::new();
        for plan in &plans[g_idx] {
            let pass = crate::model::raw_forecast_pass(
                tape,
                bound,
                d_u,
                &windows,
                refs,
                plan,
                SampleSource::Posterior,
            )?;
            let (mu, sigma) = if use_refined {
                let (mu, sigma, _) =
                    refine_on_tape(tape, bound.refine, pass.mu_hat, pass.sigma_hat, bound.c);
                (mu, sigma)
            } else {
                (pass.mu_hat, pass.sigma_hat)
            };
            // masked NLL: w_i * [ln sigma_i + (y_i - mu_i)^2 / (2 sigma_i^2) + ln sqrt(2 pi)]
            let y = tape.constant(target.clone());
            let w = tape.constant(weight.clone());
            let diff = tape.sub(y, mu);
            let sq = tape.mul(diff, diff);
            let var = tape.mul(sigma, sigma);
            let var2 = tape.scale_const(var, 2.0);
            let quad = tape.div(sq, var2);
            let ln_sigma = tape.ln(sigma);
            let per_node = tape.add(ln_sigma, quad);
            let per_node = tape.add_const(per_node, LN_SQRT_2PI);
            let masked = tape.mul(w, per_node);
            let nll = tape.sum(masked);
            let l1 = tape.add(nll, pass.latent_penalty);
            sample_l1.push(l1);
            if let Some(mats) = coherency {
                sample_l2.push(coherency_on_tape(tape, mats, mu, sigma));
            }
        }
        item_l1.push(mean_of(tape, &sample_l1));
        if coherency.is_some() {
            item_l2.push(mean_of(tape, &sample_l2));
        }
    }
    let l1 = mean_of(tape, &item_l1);
    let l2 = coherency.map(|_| mean_of(tape, &item_l2));
    Ok(BatchLoss { l1, l2 })
}

fn mean_of(tape: &mut Tape, items: &[Var]) -> Var {
    let mut acc = items[0];
    for &item in &items[1..] {
        acc = tape.add(acc, item);
    }
    tape.scale_const(acc, 1.0 / items.len() as f64)
}

/// First index of a context window ending at `origin` under a length cap.
pub fn context_start(origin: usize, max_context: usize) -> usize {
    if max_context == 0 {
        0
    } else {
        (origin + 1).saturating_sub(max_context)
    }
}

/// Input slice with unobserved cells forward-filled (then zero-filled).
pub fn filled_slice(panel: &TimeSeriesPanel, id: usize, t1: usize, t2: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(t2 - t1 + 1);
    let mut last = 0.0;
    for t in t1..=t2 {
        if panel.observed(id, t) {
            last = panel.value(id, t);
        }
        out.push(last);
    }
    out
}

/// Single-sample (or `mc_samples`-sample) estimate of the likelihood loss
/// over a set of window groups, under refined or raw outputs.
pub fn elbo_loss(
    state: &ModelState,
    panel: &TimeSeriesPanel,
    groups: &[GroupedWindow],
    tau: usize,
    refs: &ReferenceSet,
    use_refined: bool,
    seed: u64,
    mc_samples: usize,
) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let bound = BoundModel::bind(&mut tape, state);
    let plans = plans_for_groups(state, refs, groups, seed, 0, mc_samples);
    let loss = build_batch_loss(
        &mut tape,
        &bound,
        state.config.d_u,
        panel,
        groups,
        tau,
        refs,
        &plans,
        use_refined,
        None,
    )?;
    Ok(tape.scalar(loss.l1))
}

/// Per-item noise plans, derived from the item's window coordinates so the
/// same item always draws the same noise within an epoch.
fn plans_for_groups(
    state: &ModelState,
    refs: &ReferenceSet,
    groups: &[GroupedWindow],
    seed: u64,
    epoch: usize,
    mc_samples: usize,
) -> Vec<Vec<NoisePlan>> {
    let n = state.config.n_nodes;
    groups
        .iter()
        .map(|g| {
            (0..mc_samples)
                .map(|s| {
                    let mut rng = derive_rng(
                        seed,
                        &[TAG_PLAN, epoch as u64, g.t1 as u64, g.t2 as u64, s as u64],
                    );
                    NoisePlan::sample(&mut rng, n, refs.len(), state.config.d_u)
                })
                .collect()
        })
        .collect()
}

/// Batch loss value for a fixed set of noise plans (used by checks that
/// perturb parameters under frozen noise).
#[allow(clippy::too_many_arguments)]
pub fn batch_loss_value(
    state: &ModelState,
    panel: &TimeSeriesPanel,
    groups: &[GroupedWindow],
    tau: usize,
    refs: &ReferenceSet,
    plans: &[Vec<NoisePlan>],
    lambda: f64,
    use_refined: bool,
    with_coherency: Option<&CoherencyMats>,
) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let bound = BoundModel::bind(&mut tape, state);
    let loss = build_batch_loss(
        &mut tape,
        &bound,
        state.config.d_u,
        panel,
        groups,
        tau,
        refs,
        plans,
        use_refined,
        with_coherency,
    )?;
    let l1 = tape.scalar(loss.l1);
    let l2 = loss.l2.map(|v| tape.scalar(v)).unwrap_or(0.0);
    Ok(total_loss(l1, l2, lambda))
}

/// Analytic gradients of [`batch_loss_value`] keyed by parameter path.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss_grads(
    state: &ModelState,
    panel: &TimeSeriesPanel,
    groups: &[GroupedWindow],
    tau: usize,
    refs: &ReferenceSet,
    plans: &[Vec<NoisePlan>],
    lambda: f64,
    use_refined: bool,
    with_coherency: Option<&CoherencyMats>,
) -> Result<(f64, BTreeMap<String, GradTensor>), TrainError> {
    let mut tape = Tape::new();
    let bound = BoundModel::bind(&mut tape, state);
    let loss = build_batch_loss(
        &mut tape,
        &bound,
        state.config.d_u,
        panel,
        groups,
        tau,
        refs,
        plans,
        use_refined,
        with_coherency,
    )?;
    let total = match loss.l2 {
        Some(l2) => {
            let scaled = tape.scale_const(l2, lambda);
            tape.add(loss.l1, scaled)
        }
        None => loss.l1,
    };
    let value = tape.scalar(total);
    let grads = tape.backward(total);
    let kinds = tensor_kinds(state);
    let mut by_path = BTreeMap::new();
    for (path, var) in bound.paths() {
        let grad = match kinds[path] {
            TensorKind::Vec => GradTensor::Vec(grads.vec_grad(&tape, *var)),
            TensorKind::Mat => GradTensor::Mat(grads.mat_grad(&tape, *var)),
        };
        by_path.insert(path.clone(), grad);
    }
    Ok((value, by_path))
}

#[derive(Clone, Copy)]
enum TensorKind {
    Vec,
    Mat,
}

fn tensor_kinds(state: &ModelState) -> BTreeMap<String, TensorKind> {
    let mut kinds = BTreeMap::new();
    state.visit(&mut |p, view| {
        let kind = match view {
            crate::model::ParamView::Vec(_) => TensorKind::Vec,
            crate::model::ParamView::Mat(_) => TensorKind::Mat,
        };
        kinds.insert(p.to_string(), kind);
    });
    kinds
}

/// Applies a variant's structural change to a fresh state.
pub fn apply_variant(mut state: ModelState, variant: Variant) -> ModelState {
    if variant == Variant::PGlobal && state.decoders.len() > 1 {
        state.decoders.truncate(1);
        state.config.shared_decoder = true;
    }
    state
}

/// One training phase over grouped windows.
struct Phase {
    tag: u64,
    epochs: usize,
    use_refined: bool,
    lambda: f64,
    compute_l2: bool,
    filter: ParamFilter,
    early_stop: bool,
}

/// Shared state of a fit in progress.
struct Trainer<'a> {
    panel: &'a TimeSeriesPanel,
    groups: Vec<GroupedWindow>,
    mats: CoherencyMats,
    config: &'a TrainConfig,
    /// Validation targets: `(origin t2, target index)`.
    val_points: Vec<(usize, usize)>,
}

impl<'a> Trainer<'a> {
    fn reference_sequences(&self) -> Vec<Vec<f64>> {
        let t_end = self.panel.len() - 1;
        let start = context_start(t_end, self.config.max_context);
        (1..=self.panel.node_count())
            .map(|id| filled_slice(self.panel, id, start, t_end))
            .collect()
    }

    /// Mean closed-form CRPS of refined forecasts over the validation
    /// window, averaged over `val_samples` prior-sampled passes.
    fn validation_crps(
        &self,
        state: &ModelState,
        refs: &ReferenceSet,
        refined_outputs: bool,
    ) -> Result<f64, TrainError> {
        let n = self.panel.node_count();
        let mut total = 0.0;
        let mut count = 0usize;
        for &(origin, target_t) in &self.val_points {
            let start = context_start(origin, self.config.max_context);
            let windows: Vec<Vec<f64>> = (1..=n)
                .map(|id| filled_slice(self.panel, id, start, origin))
                .collect();
            let plans: Vec<NoisePlan> = (0..self.config.val_samples)
                .map(|s| {
                    let mut rng = derive_rng(
                        self.config.seed,
                        &[0x7a, origin as u64, target_t as u64, s as u64],
                    );
                    NoisePlan::sample(&mut rng, n, refs.len(), state.config.d_u)
                })
                .collect();
            let mut tape = Tape::new();
            let bound = BoundModel::bind(&mut tape, state);
            let passes = crate::model::raw_forecast_passes(
                &mut tape,
                &bound,
                state.config.d_u,
                &windows,
                refs,
                &plans,
                SampleSource::Prior,
            )?;
            for pass in passes {
                let raw = pass.forecast_set(&tape);
                let scored = if refined_outputs {
                    refine_all(&raw, &state.refine).0
                } else {
                    raw
                };
                for id in 1..=n {
                    if self.panel.observed(id, target_t) {
                        total += crps_gaussian(scored.get(id), self.panel.value(id, target_t));
                        count += 1;
                    }
                }
            }
        }
        Ok(total / count.max(1) as f64)
    }

    fn run_phase(
        &self,
        state: &mut ModelState,
        phase: &Phase,
        history: &mut TrainHistory,
    ) -> Result<(), TrainError> {
        let mut adam = Adam::new(self.config.learning_rate);
        let kinds = tensor_kinds(state);
        let mut best_val = f64::INFINITY;
        let mut best_state: Option<ModelState> = None;
        let mut best_epoch = 0usize;
        for epoch in 0..phase.epochs {
            let refs = crate::model::compute_reference_set(state, &self.reference_sequences())?;
            state.reference = Some(refs.clone());

            // visit order: shuffled groups, optionally subsampled
            let mut order: Vec<usize> = (0..self.groups.len()).collect();
            let mut shuffle_rng =
                derive_rng(self.config.seed, &[TAG_SHUFFLE, phase.tag, epoch as u64]);
            use rand::seq::SliceRandom;
            order.shuffle(&mut shuffle_rng);
            if self.config.windows_per_epoch > 0 {
                order.truncate(self.config.windows_per_epoch);
            }

            let mut epoch_l1 = 0.0;
            let mut epoch_l2 = 0.0;
            let mut batches = 0usize;
            for (batch_idx, chunk) in order.chunks(self.config.batch_size.max(1)).enumerate() {
                let groups: Vec<GroupedWindow> =
                    chunk.iter().map(|&i| self.groups[i].clone()).collect();
                let plans = plans_for_groups(
                    state,
                    &refs,
                    &groups,
                    self.config.seed ^ phase.tag,
                    epoch,
                    self.config.mc_samples_train,
                );
                let mut tape = Tape::new();
                let bound = BoundModel::bind(&mut tape, state);
                let loss = build_batch_loss(
                    &mut tape,
                    &bound,
                    state.config.d_u,
                    self.panel,
                    &groups,
                    self.config.tau,
                    &refs,
                    &plans,
                    phase.use_refined,
                    if phase.compute_l2 { Some(&self.mats) } else { None },
                )?;
                let l1_value = tape.scalar(loss.l1);
                let (total, l2_value) = match loss.l2 {
                    Some(l2) => {
                        history.l2_evaluations += 1;
                        let scaled = tape.scale_const(l2, phase.lambda);
                        (tape.add(loss.l1, scaled), tape.scalar(l2))
                    }
                    None => (loss.l1, 0.0),
                };
                let total_value = tape.scalar(total);
                if !total_value.is_finite() {
                    return Err(TrainError::NaNLoss {
                        epoch,
                        batch: batch_idx,
                    });
                }
                let grads = tape.backward(total);
                let mut by_path: BTreeMap<String, GradTensor> = BTreeMap::new();
                let mut sq_norm = 0.0;
                for (path, var) in bound.paths() {
                    if !phase.filter.admits(path) {
                        continue;
                    }
                    let grad = match kinds[path] {
                        TensorKind::Vec => GradTensor::Vec(grads.vec_grad(&tape, *var)),
                        TensorKind::Mat => GradTensor::Mat(grads.mat_grad(&tape, *var)),
                    };
                    sq_norm += grad.sq_norm();
                    by_path.insert(path.clone(), grad);
                }
                drop(tape);
                let norm = sq_norm.sqrt();
                if norm > self.config.grad_clip {
                    let factor = self.config.grad_clip / norm;
                    for grad in by_path.values_mut() {
                        grad.scale(factor);
                    }
                }
                adam.apply(state, &by_path);
                epoch_l1 += l1_value;
                epoch_l2 += l2_value;
                batches += 1;
            }
            let l1 = epoch_l1 / batches.max(1) as f64;
            let l2 = epoch_l2 / batches.max(1) as f64;

            let refs = crate::model::compute_reference_set(state, &self.reference_sequences())?;
            let val = self.validation_crps(state, &refs, phase.use_refined)?;
            history.rows.push(EpochRow {
                epoch: history.rows.len(),
                l1,
                l2,
                total: total_loss(l1, l2, phase.lambda),
                val_crps: val,
            });
            if phase.early_stop {
                if val < best_val {
                    best_val = val;
                    best_epoch = epoch;
                    history.best_epoch = history.rows.len() - 1;
                    let mut snapshot = state.clone();
                    snapshot.reference = Some(refs);
                    best_state = Some(snapshot);
                }
                if epoch - best_epoch >= self.config.patience {
                    history.stopped_early = true;
                    break;
                }
            }
        }
        if phase.early_stop {
            if let Some(best) = best_state {
                *state = best;
            }
        } else {
            let refs = crate::model::compute_reference_set(state, &self.reference_sequences())?;
            state.reference = Some(refs);
            history.best_epoch = history.rows.len().saturating_sub(1);
        }
        Ok(())
    }
}

const PHASE_PRETRAIN: u64 = 1;
const PHASE_MAIN: u64 = 2;
const PHASE_FINETUNE: u64 = 3;

/// Likelihood-only pre-training of the forecaster on raw outputs; the
/// refinement parameters are untouched.
pub fn pretrain(
    state: &mut ModelState,
    panel: &TimeSeriesPanel,
    hierarchy: &Hierarchy,
    windows: &WindowSet,
    config: &TrainConfig,
) -> Result<TrainHistory, TrainError> {
    let trainer = Trainer::new(panel, hierarchy, windows, config)?;
    let mut history = TrainHistory::default();
    trainer.run_phase(
        state,
        &Phase {
            tag: PHASE_PRETRAIN,
            epochs: config.pretrain_epochs,
            use_refined: false,
            lambda: 0.0,
            compute_l2: false,
            filter: ParamFilter::ForecasterOnly,
            early_stop: false,
        },
        &mut history,
    )?;
    Ok(history)
}

impl<'a> Trainer<'a> {
    fn new(
        panel: &'a TimeSeriesPanel,
        hierarchy: &Hierarchy,
        windows: &WindowSet,
        config: &'a TrainConfig,
    ) -> Result<Self, TrainError> {
        let groups = windows.grouped();
        if groups.is_empty() {
            return Err(TrainError::NoWindows("empty window set".to_string()));
        }
        let t_len = panel.len();
        let tau = config.tau;
        let val_points: Vec<(usize, usize)> = (0..tau)
            .map(|k| {
                let target = t_len - tau + k;
                (target - tau, target)
            })
            .collect();
        Ok(Trainer {
            panel,
            groups,
            mats: CoherencyMats::new(hierarchy),
            config,
            val_points,
        })
    }
}

/// Main end-to-end training per the configured variant. Assumes
/// [`pretrain`] already ran (unless deliberately skipped).
pub fn train(
    state: &mut ModelState,
    panel: &TimeSeriesPanel,
    hierarchy: &Hierarchy,
    windows: &WindowSet,
    config: &TrainConfig,
) -> Result<TrainHistory, TrainError> {
    let trainer = Trainer::new(panel, hierarchy, windows, config)?;
    let mut history = TrainHistory::default();
    let lambda = match config.variant {
        Variant::PNocoherent => 0.0,
        _ => config.lambda,
    };
    let compute_l2 = config.variant != Variant::PNocoherent;
    trainer.run_phase(
        state,
        &Phase {
            tag: PHASE_MAIN,
            epochs: config.max_epochs,
            use_refined: true,
            lambda,
            compute_l2,
            filter: ParamFilter::All,
            early_stop: true,
        },
        &mut history,
    )?;
    if config.variant == Variant::PFinetune {
        trainer.run_phase(
            state,
            &Phase {
                tag: PHASE_FINETUNE,
                epochs: config.finetune_epochs,
                use_refined: true,
                lambda: 0.0,
                compute_l2: false,
                filter: ParamFilter::DecodersOnly,
                early_stop: true,
            },
            &mut history,
        )?;
    }
    Ok(history)
}

/// Everything a completed fit produces.
pub struct FitOutput {
    pub state: ModelState,
    pub pretrain_history: TrainHistory,
    pub history: TrainHistory,
}

/// Initializes a variant-shaped state, pre-trains, and trains on an
/// already-preprocessed panel. Training windows stop `2 tau` before the end
/// so the validation window stays unseen.
pub fn fit(
    panel: &TimeSeriesPanel,
    hierarchy: &Hierarchy,
    config: &TrainConfig,
) -> Result<FitOutput, TrainError> {
    let t_len = panel.len();
    if t_len < 2 * config.tau + config.min_len + 1 {
        return Err(TrainError::NoWindows(format!(
            "panel length {t_len} too short for tau {}",
            config.tau
        )));
    }
    let t_max = t_len - 1 - 2 * config.tau;
    let windows = crate::panel::make_windows(panel, config.tau, config.min_len, t_max)?;
    let state = ModelState::init(config.model_config(panel.node_count()), config.seed);
    let mut state = apply_variant(state, config.variant);
    let pretrain_history = pretrain(&mut state, panel, hierarchy, &windows, config)?;
    let history = train(&mut state, panel, hierarchy, &windows, config)?;
    Ok(FitOutput {
        state,
        pretrain_history,
        history,
    })
}

/// Trains each candidate on data up to `T - tau` and scores mean CRPS on
/// the held-out last window; returns the best candidate (ties broken by
/// lower lambda, then lower learning rate).
pub fn backtest_select(
    candidates: &[TrainConfig],
    panel: &TimeSeriesPanel,
    hierarchy: &Hierarchy,
) -> Result<(TrainConfig, Vec<f64>), TrainError> {
    assert!(!candidates.is_empty());
    let mut scores = Vec::with_capacity(candidates.len());
    for config in candidates {
        let truncated = panel.truncated(panel.len() - config.tau);
        let fit_out = fit(&truncated, hierarchy, config)?;
        let score = holdout_crps(&fit_out.state, panel, config)?;
        scores.push(score);
    }
    let mut best = 0usize;
    for i in 1..candidates.len() {
        let better = (scores[i], candidates[i].lambda, candidates[i].learning_rate)
            < (scores[best], candidates[best].lambda, candidates[best].learning_rate);
        if better {
            best = i;
        }
    }
    Ok((candidates[best].clone(), scores))
}

/// Mean closed-form CRPS over the last `tau` targets of `panel`.
fn holdout_crps(
    state: &ModelState,
    panel: &TimeSeriesPanel,
    config: &TrainConfig,
) -> Result<f64, TrainError> {
    let n = panel.node_count();
    let t_len = panel.len();
    let refs = state
        .reference
        .clone()
        .expect("trained state carries reference embeddings");
    let mut total = 0.0;
    let mut count = 0usize;
    for k in 0..config.tau {
        let target_t = t_len - config.tau + k;
        let origin = target_t - config.tau;
        let start = context_start(origin, config.max_context);
        let windows: Vec<Vec<f64>> = (1..=n)
            .map(|id| filled_slice(panel, id, start, origin))
            .collect();
        let plans: Vec<NoisePlan> = (0..config.val_samples)
            .map(|s| {
                let mut rng = derive_rng(config.seed, &[0x7b, target_t as u64, s as u64]);
                NoisePlan::sample(&mut rng, n, refs.len(), state.config.d_u)
            })
            .collect();
        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, state);
        let passes = crate::model::raw_forecast_passes(
            &mut tape,
            &bound,
            state.config.d_u,
            &windows,
            &refs,
            &plans,
            SampleSource::Prior,
        )?;
        for pass in passes {
            let raw = pass.forecast_set(&tape);
            let (refined, _) = refine_all(&raw, &state.refine);
            for id in 1..=n {
                if panel.observed(id, target_t) {
                    total += crps_gaussian(refined.get(id), panel.value(id, target_t));
                    count += 1;
                }
            }
        }
    }
    Ok(total / count.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::coherency_loss;
    use crate::gaussian::{GaussianDist, GaussianForecastSet};
    use crate::hierarchy::build_hierarchy;
    use crate::panel::{generate_synthetic, make_windows, preprocess, Consistency, PreprocessMode};
    use rand::Rng;

    #[test]
    fn total_loss_composition() {
        assert_eq!(total_loss(1.0, 2.0, 0.0), 1.0);
        assert_eq!(total_loss(1.0, 2.0, 0.5), 2.0);
        // linear in lambda
        let a = total_loss(0.7, 1.3, 2.0);
        let b = total_loss(0.7, 1.3, 4.0);
        assert!((b - a - 2.0 * 1.3).abs() < 1e-12);
    }

    #[test]
    fn variant_parsing_round_trips() {
        for v in [
            Variant::Full,
            Variant::PGlobal,
            Variant::PFinetune,
            Variant::PNocoherent,
        ] {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!(matches!(
            "bogus".parse::<Variant>(),
            Err(TrainError::UnknownVariant(_))
        ));
    }

    #[test]
    fn coherency_on_tape_matches_closed_form() {
        let h = build_hierarchy(&[(1, 2, 0.5), (1, 3, 1.5), (2, 4, 1.0), (2, 5, 0.7)]).unwrap();
        let mats = CoherencyMats::new(&h);
        let mut rng = derive_rng(3, &[1]);
        for _ in 0..20 {
            let dists: Vec<GaussianDist> = (0..5)
                .map(|_| GaussianDist {
                    mu: rng.gen_range(-2.0..2.0),
                    sigma: rng.gen_range(0.3..2.0),
                })
                .collect();
            let set = GaussianForecastSet::new(dists.clone());
            let expect = coherency_loss(&h, &set).unwrap();
            let mut tape = Tape::new();
            let mu = tape.constant(dists.iter().map(|d| d.mu).collect());
            let sigma = tape.constant(dists.iter().map(|d| d.sigma).collect());
            let loss = coherency_on_tape(&mut tape, &mats, mu, sigma);
            assert!((tape.scalar(loss) - expect).abs() < 1e-10);
        }
    }

    fn tiny_setup(
        consistency: Consistency,
        seed: u64,
    ) -> (crate::hierarchy::Hierarchy, TimeSeriesPanel, TrainConfig) {
        let (h, panel) = generate_synthetic(4, 2, 60, consistency, 0.1, seed);
        let (panel, h) = preprocess(&panel, &h, PreprocessMode::Standard, None).unwrap();
        let mut config = TrainConfig::tiny(3, seed);
        config.d_u = 6;
        config.max_epochs = 8;
        config.patience = 8;
        config.pretrain_epochs = 4;
        config.windows_per_epoch = 60;
        config.batch_size = 10;
        config.max_context = 40;
        (h, panel, config)
    }

    #[test]
    fn elbo_is_independent_of_duplication_and_composition() {
        let (h, panel, config) = tiny_setup(Consistency::Strong, 0);
        let windows = make_windows(&panel, config.tau, config.min_len, panel.len() - 1 - 2 * config.tau).unwrap();
        let groups = windows.grouped();
        let state = ModelState::init(config.model_config(panel.node_count()), 0);
        let trainer = Trainer::new(&panel, &h, &windows, &config).unwrap();
        let refs = crate::model::compute_reference_set(&state, &trainer.reference_sequences()).unwrap();
        let some: Vec<GroupedWindow> = groups[..4].to_vec();
        let l1 = elbo_loss(&state, &panel, &some, config.tau, &refs, true, 7, 1).unwrap();
        let mut doubled = some.clone();
        doubled.extend(some.iter().cloned());
        let l1_doubled = elbo_loss(&state, &panel, &doubled, config.tau, &refs, true, 7, 1).unwrap();
        assert!(
            (l1 - l1_doubled).abs() < 1e-12,
            "duplicated batch changed the mean: {l1} vs {l1_doubled}"
        );
        assert!(l1.is_finite());
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        // tiny model: d_u = 4, N = 3 nodes
        let (h, panel) = generate_synthetic(2, 2, 40, Consistency::Weak, 0.1, 5);
        let (panel, h) = preprocess(&panel, &h, PreprocessMode::Standard, None).unwrap();
        assert_eq!(h.node_count(), 3);
        let mut config = TrainConfig::tiny(2, 5);
        config.d_u = 4;
        let state = ModelState::init(config.model_config(3), 5);
        let windows = make_windows(&panel, 2, 5, panel.len() - 1 - 4).unwrap();
        let groups: Vec<GroupedWindow> = windows.grouped()[..2].to_vec();
        let trainer = Trainer::new(&panel, &h, &windows, &config).unwrap();
        let refs = crate::model::compute_reference_set(&state, &trainer.reference_sequences()).unwrap();
        let mats = CoherencyMats::new(&h);

        // realize plans once, then freeze the correlation sets they chose
        let mut plans = plans_for_groups(&state, &refs, &groups, 9, 0, 1);
        for (g_idx, group_plans) in plans.iter_mut().enumerate() {
            for plan in group_plans.iter_mut() {
                let mut tape = Tape::new();
                let bound = BoundModel::bind(&mut tape, &state);
                let windows_in: Vec<Vec<f64>> = (1..=3)
                    .map(|id| filled_slice(&panel, id, groups[g_idx].t1, groups[g_idx].t2))
                    .collect();
                let pass = crate::model::raw_forecast_pass(
                    &mut tape,
                    &bound,
                    4,
                    &windows_in,
                    &refs,
                    plan,
                    SampleSource::Posterior,
                )
                .unwrap();
                plan.frozen_sets = Some(pass.trace.correlation_sets.clone());
            }
        }

        let (value, grads) = batch_loss_grads(
            &state, &panel, &groups, 2, &refs, &plans, 0.8, true, Some(&mats),
        )
        .unwrap();
        assert!(value.is_finite());

        // spot-check a spread of parameter components with central FD
        let mut rng = derive_rng(10, &[4]);
        let paths: Vec<String> = grads.keys().cloned().collect();
        let mut checked = 0;
        for path in paths {
            if rng.gen::<f64>() > 0.25 {
                continue;
            }
            let grad = &grads[&path];
            let h_step = 1e-5;
            let (fd, an) = {
                let (idx, an) = match grad {
                    GradTensor::Vec(g) => {
                        let i = rng.gen_range(0..g.len());
                        ((i, 0, true), g[i])
                    }
                    GradTensor::Mat(g) => {
                        let r = rng.gen_range(0..g.nrows());
                        let c = rng.gen_range(0..g.ncols());
                        ((r, c, false), g[(r, c)])
                    }
                };
                let perturb = |delta: f64| {
                    let mut s = state.clone();
                    s.visit_mut(&mut |p, view| {
                        if p == path {
                            match view {
                                ParamViewMut::Vec(a) => a[idx.0] += delta,
                                ParamViewMut::Mat(a) => a[(idx.0, idx.1)] += delta,
                            }
                        }
                    });
                    batch_loss_value(
                        &s, &panel, &groups, 2, &refs, &plans, 0.8, true, Some(&mats),
                    )
                    .unwrap()
                };
                ((perturb(h_step) - perturb(-h_step)) / (2.0 * h_step), an)
            };
            let denom = fd.abs().max(an.abs()).max(1e-6);
            assert!(
                (fd - an).abs() / denom < 1e-3,
                "{path}: fd {fd} vs analytic {an}"
            );
            checked += 1;
        }
        assert!(checked >= 10, "too few components checked: {checked}");
    }

    #[test]
    fn pretrain_improves_raw_validation_and_isolates_refinement() {
        for seed in 0..3 {
            let (h, panel, config) = tiny_setup(Consistency::Strong, seed);
            let windows =
                make_windows(&panel, config.tau, config.min_len, panel.len() - 1 - 2 * config.tau)
                    .unwrap();
            let mut state = ModelState::init(config.model_config(panel.node_count()), seed);
            let refine_before = state.refine.clone();
            let trainer = Trainer::new(&panel, &h, &windows, &config).unwrap();
            let refs0 =
                crate::model::compute_reference_set(&state, &trainer.reference_sequences()).unwrap();
            let before = trainer.validation_crps(&state, &refs0, false).unwrap();
            pretrain(&mut state, &panel, &h, &windows, &config).unwrap();
            let refs1 =
                crate::model::compute_reference_set(&state, &trainer.reference_sequences()).unwrap();
            let after = trainer.validation_crps(&state, &refs1, false).unwrap();
            assert!(
                after <= before,
                "seed {seed}: validation crps rose from {before} to {after}"
            );
            assert_eq!(state.refine, refine_before);
        }
    }

    #[test]
    fn training_is_deterministic_and_decreases_loss() {
        let (h, panel, config) = tiny_setup(Consistency::Strong, 1);
        let run = || {
            let out = fit(&panel, &h, &config).unwrap();
            out.history
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "same seed must reproduce bit-identical history");
        assert!(a.rows.last().unwrap().total <= a.rows.first().unwrap().total);
    }

    #[test]
    fn nocoherent_never_evaluates_l2_and_shares_pretrain() {
        let (h, panel, mut config) = tiny_setup(Consistency::Strong, 2);
        config.variant = Variant::PNocoherent;
        let out = fit(&panel, &h, &config).unwrap();
        assert_eq!(out.history.l2_evaluations, 0);
        assert!(out.history.rows.iter().all(|r| r.l2 == 0.0));

        // pretraining does not depend on the variant
        let windows =
            make_windows(&panel, config.tau, config.min_len, panel.len() - 1 - 2 * config.tau)
                .unwrap();
        let mut s1 = ModelState::init(config.model_config(panel.node_count()), 2);
        pretrain(&mut s1, &panel, &h, &windows, &config).unwrap();
        let mut full_cfg = config.clone();
        full_cfg.variant = Variant::Full;
        let mut s2 = ModelState::init(full_cfg.model_config(panel.node_count()), 2);
        pretrain(&mut s2, &panel, &h, &windows, &full_cfg).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn global_variant_shares_one_decoder() {
        let (_, panel, mut config) = tiny_setup(Consistency::Strong, 3);
        config.variant = Variant::PGlobal;
        let state = ModelState::init(config.model_config(panel.node_count()), 3);
        let state = apply_variant(state, config.variant);
        assert_eq!(state.decoders.len(), 1);
        let mut full_cfg = config.clone();
        full_cfg.variant = Variant::Full;
        let per_node = apply_variant(
            ModelState::init(full_cfg.model_config(panel.node_count()), 3),
            Variant::Full,
        );
        assert_eq!(
            per_node.decoder_param_count(),
            panel.node_count() * state.decoder_param_count()
        );
    }

    #[test]
    fn finetune_touches_only_decoders_after_main_phase() {
        let (h, panel, mut config) = tiny_setup(Consistency::Strong, 4);
        config.variant = Variant::PFinetune;
        config.finetune_epochs = 2;
        // run the shared prefix (pretrain + main) with the full variant
        let mut full_cfg = config.clone();
        full_cfg.variant = Variant::Full;
        let full_out = fit(&panel, &h, &full_cfg).unwrap();
        let fine_out = fit(&panel, &h, &config).unwrap();
        // encoder parameters agree between full and finetuned runs
        let mut diffs = Vec::new();
        let mut full_params: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        full_out.state.visit(&mut |path, view| {
            let data = match view {
                crate::model::ParamView::Vec(a) => a.to_vec(),
                crate::model::ParamView::Mat(a) => a.iter().copied().collect(),
            };
            full_params.insert(path.to_string(), data);
        });
        fine_out.state.visit(&mut |path, view| {
            let data = match view {
                crate::model::ParamView::Vec(a) => a.to_vec(),
                crate::model::ParamView::Mat(a) => a.iter().copied().collect(),
            };
            if full_params[path] != data {
                diffs.push(path.to_string());
            }
        });
        assert!(!diffs.is_empty(), "fine-tuning should change decoders");
        assert!(
            diffs.iter().all(|p| p.starts_with("decoder.")),
            "unexpected non-decoder changes: {diffs:?}"
        );
    }

    #[test]
    fn backtest_single_candidate_is_identity() {
        let (h, panel, config) = tiny_setup(Consistency::Strong, 5);
        let (winner, scores) = backtest_select(std::slice::from_ref(&config), &panel, &h).unwrap();
        assert_eq!(winner, config);
        assert_eq!(scores.len(), 1);
        // a duplicated winner keeps the selection stable
        let (winner2, _) = backtest_select(&[config.clone(), config.clone()], &panel, &h).unwrap();
        assert_eq!(winner2, config);
    }
}
