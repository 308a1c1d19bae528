//! Forecast generation, per-level metric reports, and the
//! missing-recent-values robustness protocol.

use rand_distr::{Distribution, StandardNormal};

use crate::error::EvalError;
use crate::gaussian::{crps_from_samples, fit_gaussian, interval_score, GaussianDist, GaussianForecastSet};
use crate::hierarchy::Hierarchy;
use crate::model::{BoundModel, ModelState, NoisePlan, ReferenceSet, SampleSource};
use crate::panel::{mask_hfmv, TimeSeriesPanel};
use crate::refine::refine_all;
use crate::rng::derive_rng;
use crate::tape::Tape;
use crate::train::{context_start, filled_slice};

const TAG_FORECAST: u64 = 0x46;
const TAG_HFMV: u64 = 0x48;

/// Monte-Carlo forecast for one node: refined-distribution samples in the
/// original data scale, plus the Gaussian fitted to them.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeForecast {
    pub samples: Vec<f64>,
    pub fitted: GaussianDist,
}

/// Forecast-time knobs.
#[derive(Debug, Clone, Copy)]
pub struct ForecastOptions {
    /// Monte-Carlo passes.
    pub samples: usize,
    /// Context-length cap (0 = unlimited).
    pub max_context: usize,
    pub seed: u64,
}

/// Refined forecast sets (normalized scale), one per Monte-Carlo pass, from
/// input windows ending at `origin`.
fn refined_passes(
    state: &ModelState,
    panel: &TimeSeriesPanel,
    origin: usize,
    n_passes: usize,
    seed: u64,
    tags: &[u64],
    max_context: usize,
) -> Result<Vec<GaussianForecastSet>, EvalError> {
    let n = panel.node_count();
    let refs: &ReferenceSet = state
        .reference
        .as_ref()
        .expect("state must carry reference embeddings (train or load first)");
    let start = context_start(origin, max_context);
    let windows: Vec<Vec<f64>> = (1..=n)
        .map(|id| filled_slice(panel, id, start, origin))
        .collect();
    let mut rng = derive_rng(seed, tags);
    let plans: Vec<NoisePlan> = (0..n_passes)
        .map(|_| NoisePlan::sample(&mut rng, n, refs.len(), state.config.d_u))
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
    Ok(passes
        .into_iter()
        .map(|pass| refine_all(&pass.forecast_set(&tape), &state.refine).0)
        .collect())
}

/// Draws one value per node from each refined pass (normalized scale).
fn sample_passes(
    passes: &[GaussianForecastSet],
    n: usize,
    seed: u64,
    tags: &[u64],
) -> Vec<Vec<f64>> {
    let mut rng = derive_rng(seed, tags);
    let mut samples = vec![Vec::with_capacity(passes.len()); n];
    for set in passes {
        for id in 1..=n {
            let dist = set.get(id);
            let eps: f64 = StandardNormal.sample(&mut rng);
            samples[id - 1].push(dist.mu + dist.sigma * eps);
        }
    }
    samples
}

/// `samples` Monte-Carlo passes from windows ending at `origin`; per pass a
/// refined distribution is sampled once per node. Samples are mapped back
/// to the original scale and a Gaussian is fitted per node.
pub fn forecast(
    state: &ModelState,
    panel: &TimeSeriesPanel,
    origin: usize,
    opts: &ForecastOptions,
) -> Result<Vec<NodeForecast>, EvalError> {
    let n = panel.node_count();
    let passes = refined_passes(
        state,
        panel,
        origin,
        opts.samples,
        opts.seed,
        &[TAG_FORECAST, origin as u64],
        opts.max_context,
    )?;
    let samples = sample_passes(&passes, n, opts.seed, &[TAG_FORECAST, origin as u64, 1]);
    collect_forecasts(samples, panel)
}

fn collect_forecasts(
    samples: Vec<Vec<f64>>,
    panel: &TimeSeriesPanel,
) -> Result<Vec<NodeForecast>, EvalError> {
    samples
        .into_iter()
        .enumerate()
        .map(|(idx, raw)| {
            let denorm: Vec<f64> = raw
                .into_iter()
                .map(|v| panel.denormalize(idx + 1, v))
                .collect();
            let fitted = fit_gaussian(&denorm)?;
            Ok(NodeForecast {
                samples: denorm,
                fitted,
            })
        })
        .collect()
}

/// Per-level and overall CRPS / interval-score summary.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// `(level, mean crps, mean interval score)` per depth level.
    pub per_level: Vec<(usize, f64, f64)>,
    /// Means over all nodes.
    pub overall: (f64, f64),
    /// `(node id, crps, interval score)` per node.
    pub per_node: Vec<(usize, f64, f64)>,
    pub n_samples: usize,
    /// Interval half-width used for the interval score.
    pub half_width: f64,
}

impl MetricsReport {
    /// CSV with header `scope,level_or_node,crps,interval_score`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scope,level_or_node,crps,interval_score\n");
        out.push_str(&format!("overall,all,{},{}\n", self.overall.0, self.overall.1));
        for &(level, crps, is) in &self.per_level {
            out.push_str(&format!("level,{level},{crps},{is}\n"));
        }
        for &(node, crps, is) in &self.per_node {
            out.push_str(&format!("node,{node},{crps},{is}\n"));
        }
        out
    }
}

/// Scores forecasts against per-node truths: sample-based CRPS and the
/// fitted-Gaussian interval score, aggregated per level and overall.
pub fn evaluate(
    forecasts: &[NodeForecast],
    truth: &[f64],
    h: &Hierarchy,
    half_width: f64,
) -> Result<MetricsReport, EvalError> {
    if forecasts.len() != h.node_count() || truth.len() != h.node_count() {
        return Err(EvalError::ShapeMismatch(format!(
            "{} forecasts, {} truths, {} nodes",
            forecasts.len(),
            truth.len(),
            h.node_count()
        )));
    }
    let mut per_node = Vec::with_capacity(forecasts.len());
    for (idx, fc) in forecasts.iter().enumerate() {
        let crps = crps_from_samples(&fc.samples, truth[idx])?;
        let is = interval_score(fc.fitted, truth[idx], half_width);
        per_node.push((idx + 1, crps, is));
    }
    let mean =
        |vals: &[(usize, f64, f64)]| -> (f64, f64) {
            let n = vals.len() as f64;
            (
                vals.iter().map(|v| v.1).sum::<f64>() / n,
                vals.iter().map(|v| v.2).sum::<f64>() / n,
            )
        };
    let overall = mean(&per_node);
    let per_level = h
        .levels()
        .iter()
        .enumerate()
        .map(|(l, ids)| {
            let rows: Vec<(usize, f64, f64)> =
                ids.iter().map(|&id| per_node[id - 1]).collect();
            let (crps, is) = mean(&rows);
            (l + 1, crps, is)
        })
        .collect();
    Ok(MetricsReport {
        per_level,
        overall,
        per_node,
        n_samples: forecasts.first().map(|f| f.samples.len()).unwrap_or(0),
        half_width,
    })
}

/// Pooled standard deviation of horizon-`tau` persistence residuals over
/// the first `t_end + 1` steps, in the original scale. The interval score
/// needs a half-width; this ties it to the data's own variability.
pub fn default_half_width(panel: &TimeSeriesPanel, tau: usize, t_end: usize) -> f64 {
    let mut acc = 0.0;
    let mut count = 0usize;
    for id in 1..=panel.node_count() {
        for t in tau..=t_end {
            if panel.observed(id, t) && panel.observed(id, t - tau) {
                let diff = panel.denormalize(id, panel.value(id, t))
                    - panel.denormalize(id, panel.value(id, t - tau));
                acc += diff * diff;
                count += 1;
            }
        }
    }
    if count == 0 {
        1.0
    } else {
        (acc / count as f64).sqrt().max(1e-6)
    }
}

/// Outcome of the missing-recent-values protocol at one masking level.
#[derive(Debug, Clone, PartialEq)]
pub struct HfmvResult {
    pub k_percent: f64,
    pub baseline: MetricsReport,
    pub masked: MetricsReport,
    /// `100 * (crps_masked - crps_baseline) / crps_baseline`.
    pub pct_degradation: f64,
    pub iterations: usize,
}

/// Protocol knobs for [`run_hfmv`].
#[derive(Debug, Clone, Copy)]
pub struct HfmvOptions {
    /// Recent window length whose cells may be masked.
    pub rho: usize,
    /// Percentage of recent cells masked.
    pub k_percent: f64,
    /// Forecast horizon.
    pub tau: usize,
    /// Monte-Carlo imputation rounds.
    pub iterations: usize,
    /// Forecast samples per round.
    pub samples_per_round: usize,
    pub max_context: usize,
    pub seed: u64,
}

/// Masks recent cells, imputes them from the model's own predictive
/// distributions (in time order, so later imputations condition on earlier
/// ones), forecasts the final target, and pools samples over rounds.
/// Reports degradation against a baseline with no masking and identical
/// seeds; `k = 0` reproduces the baseline bit-exactly.
pub fn run_hfmv(
    state: &ModelState,
    panel: &TimeSeriesPanel,
    h: &Hierarchy,
    opts: &HfmvOptions,
) -> Result<HfmvResult, EvalError> {
    let t_len = panel.len();
    let target_t = t_len - 1;
    let origin = target_t - opts.tau;
    let truth: Vec<f64> = (1..=panel.node_count())
        .map(|id| panel.denormalize(id, panel.value(id, target_t)))
        .collect();
    let half_width = default_half_width(panel, opts.tau, origin);

    let input = panel.truncated(origin + 1);
    let masked_input = mask_hfmv(&input, opts.rho, opts.k_percent, opts.seed);

    let baseline_samples = hfmv_rounds(state, &input, origin, opts)?;
    let masked_samples = hfmv_rounds(state, &masked_input, origin, opts)?;

    let baseline_fc = collect_forecasts(baseline_samples, panel)?;
    let masked_fc = collect_forecasts(masked_samples, panel)?;
    let baseline = evaluate(&baseline_fc, &truth, h, half_width)?;
    let masked = evaluate(&masked_fc, &truth, h, half_width)?;
    let pct_degradation = if baseline.overall.0 > 0.0 {
        100.0 * (masked.overall.0 - baseline.overall.0) / baseline.overall.0
    } else {
        0.0
    };
    Ok(HfmvResult {
        k_percent: opts.k_percent,
        baseline,
        masked,
        pct_degradation,
        iterations: opts.iterations,
    })
}

/// Pooled normalized-scale forecast samples over all imputation rounds.
fn hfmv_rounds(
    state: &ModelState,
    input: &TimeSeriesPanel,
    origin: usize,
    opts: &HfmvOptions,
) -> Result<Vec<Vec<f64>>, EvalError> {
    let n = input.node_count();
    let mut pooled: Vec<Vec<f64>> = vec![Vec::new(); n];
    for round in 0..opts.iterations {
        let mut scratch = input.clone();
        // impute masked cells in increasing time order
        let cells = scratch.masked_cells();
        let mut times: Vec<usize> = cells.iter().map(|&(_, t)| t).collect();
        times.dedup();
        for t in times {
            let impute_origin = t - opts.tau;
            let passes = refined_passes(
                state,
                &scratch,
                impute_origin,
                1,
                opts.seed,
                &[TAG_HFMV, round as u64, t as u64],
                opts.max_context,
            )?;
            let draws = sample_passes(&passes, n, opts.seed, &[TAG_HFMV, round as u64, t as u64, 1]);
            for &(id, cell_t) in cells.iter().filter(|&&(_, ct)| ct == t) {
                scratch.fill_cell(id, cell_t, draws[id - 1][0]);
            }
        }
        // forecast the target from the completed input
        let passes = refined_passes(
            state,
            &scratch,
            origin,
            opts.samples_per_round,
            opts.seed,
            &[TAG_HFMV, round as u64, 0xf0],
            opts.max_context,
        )?;
        let samples = sample_passes(&passes, n, opts.seed, &[TAG_HFMV, round as u64, 0xf1]);
        for id in 1..=n {
            pooled[id - 1].extend(&samples[id - 1]);
        }
    }
    Ok(pooled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::build_hierarchy;
    use crate::model::{compute_reference_set, ModelConfig};
    use crate::panel::{generate_synthetic, preprocess, Consistency, PreprocessMode};
    use rand::Rng;

    fn forecasts_from_dist(dist: GaussianDist, n: usize, samples: usize, seed: u64) -> Vec<NodeForecast> {
        let mut rng = derive_rng(seed, &[9]);
        (0..n)
            .map(|_| {
                let s: Vec<f64> = (0..samples)
                    .map(|_| {
                        let eps: f64 = StandardNormal.sample(&mut rng);
                        dist.mu + dist.sigma * eps
                    })
                    .collect();
                let fitted = fit_gaussian(&s).unwrap();
                NodeForecast { samples: s, fitted }
            })
            .collect()
    }

    #[test]
    fn evaluate_standard_normal_truth_zero() {
        let h = build_hierarchy(&[(1, 2, 1.0), (1, 3, 1.0)]).unwrap();
        let fcs = forecasts_from_dist(GaussianDist { mu: 0.0, sigma: 1.0 }, 3, 100_000, 1);
        let report = evaluate(&fcs, &[0.0, 0.0, 0.0], &h, 1.0).unwrap();
        assert!((report.overall.0 - 0.2337).abs() < 0.01, "crps {}", report.overall.0);
        // overall equals the mean of per-node values exactly
        let mean: f64 =
            report.per_node.iter().map(|r| r.1).sum::<f64>() / report.per_node.len() as f64;
        assert!((report.overall.0 - mean).abs() < 1e-12);
    }

    #[test]
    fn evaluate_single_node_hierarchy() {
        let h = Hierarchy::single();
        let fcs = forecasts_from_dist(GaussianDist { mu: 1.0, sigma: 0.5 }, 1, 500, 2);
        let report = evaluate(&fcs, &[1.2], &h, 0.8).unwrap();
        assert_eq!(report.per_level.len(), 1);
        assert_eq!(report.per_node.len(), 1);
        assert_eq!(report.overall.0, report.per_node[0].1);
        assert_eq!(report.overall.0, report.per_level[0].1);
    }

    #[test]
    fn evaluate_is_permutation_invariant() {
        // relabeling the two leaves consistently leaves aggregates unchanged
        let h = build_hierarchy(&[(1, 2, 1.0), (1, 3, 1.0)]).unwrap();
        let mut rng = derive_rng(3, &[1]);
        let mut fcs = Vec::new();
        for _ in 0..3 {
            let mu = rng.gen_range(-1.0..1.0);
            let s: Vec<f64> = (0..200)
                .map(|_| {
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    mu + 0.7 * eps
                })
                .collect();
            let fitted = fit_gaussian(&s).unwrap();
            fcs.push(NodeForecast { samples: s, fitted });
        }
        let truth = [0.3, -0.4, 0.9];
        let report = evaluate(&fcs, &truth, &h, 1.0).unwrap();
        let swapped_fcs = vec![fcs[0].clone(), fcs[2].clone(), fcs[1].clone()];
        let swapped_truth = [truth[0], truth[2], truth[1]];
        let swapped = evaluate(&swapped_fcs, &swapped_truth, &h, 1.0).unwrap();
        assert!((report.overall.0 - swapped.overall.0).abs() < 1e-12);
        assert!((report.per_level[1].1 - swapped.per_level[1].1).abs() < 1e-12);
    }

    #[test]
    fn evaluate_rejects_shape_mismatch() {
        let h = build_hierarchy(&[(1, 2, 1.0), (1, 3, 1.0)]).unwrap();
        let fcs = forecasts_from_dist(GaussianDist { mu: 0.0, sigma: 1.0 }, 2, 50, 4);
        assert!(matches!(
            evaluate(&fcs, &[0.0, 0.0], &h, 1.0),
            Err(EvalError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn metrics_csv_has_level_and_overall_rows() {
        let h = build_hierarchy(&[(1, 2, 1.0), (1, 3, 1.0), (2, 4, 1.0)]).unwrap();
        let fcs = forecasts_from_dist(GaussianDist { mu: 0.0, sigma: 1.0 }, 4, 50, 5);
        let report = evaluate(&fcs, &[0.0; 4], &h, 1.0).unwrap();
        let csv = report.to_csv();
        let level_rows = csv.lines().filter(|l| l.starts_with("level,")).count();
        let overall_rows = csv.lines().filter(|l| l.starts_with("overall,")).count();
        assert_eq!(level_rows, h.depth());
        assert_eq!(overall_rows, 1);
    }

    fn prepared_state() -> (Hierarchy, TimeSeriesPanel, ModelState) {
        let (h, panel) = generate_synthetic(4, 2, 50, Consistency::Weak, 0.1, 7);
        let (panel, h) = preprocess(&panel, &h, PreprocessMode::Standard, None).unwrap();
        let mut state = ModelState::init(
            ModelConfig {
                n_nodes: h.node_count(),
                d_u: 6,
                kappa: 1.0,
                shared_decoder: false,
                c: 5.0,
            },
            7,
        );
        let seqs: Vec<Vec<f64>> = (1..=panel.node_count())
            .map(|id| filled_slice(&panel, id, 0, panel.len() - 6))
            .collect();
        state.reference = Some(compute_reference_set(&state, &seqs).unwrap());
        (h, panel, state)
    }

    #[test]
    fn forecast_covers_nodes_and_is_deterministic() {
        let (_, panel, state) = prepared_state();
        let opts = ForecastOptions {
            samples: 10,
            max_context: 30,
            seed: 3,
        };
        let origin = panel.len() - 4;
        let a = forecast(&state, &panel, origin, &opts).unwrap();
        let b = forecast(&state, &panel, origin, &opts).unwrap();
        assert_eq!(a.len(), panel.node_count());
        assert_eq!(a, b);
        assert!(a.iter().all(|f| f.samples.len() == 10));
        let other = forecast(
            &state,
            &panel,
            origin,
            &ForecastOptions { seed: 4, ..opts },
        )
        .unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn forecast_mean_tracks_refined_mean_with_frozen_latents() {
        // one pass's refined distribution, sampled many times, concentrates
        // on its own mean
        let (_, panel, state) = prepared_state();
        let origin = panel.len() - 4;
        let passes = refined_passes(&state, &panel, origin, 1, 5, &[1], 0).unwrap();
        let n = panel.node_count();
        let s = 10_000;
        let sets: Vec<GaussianForecastSet> = (0..s).map(|_| passes[0].clone()).collect();
        let samples = sample_passes(&sets, n, 5, &[2]);
        for id in 1..=n {
            let dist = passes[0].get(id);
            let mean = samples[id - 1].iter().sum::<f64>() / s as f64;
            let bound = 3.0 * dist.sigma / (s as f64).sqrt();
            assert!(
                (mean - dist.mu).abs() < bound,
                "node {id}: {mean} vs {} +- {bound}",
                dist.mu
            );
        }
    }

    #[test]
    fn hfmv_zero_masking_reproduces_baseline_exactly() {
        let (h, panel, state) = prepared_state();
        let opts = HfmvOptions {
            rho: 5,
            k_percent: 0.0,
            tau: 3,
            iterations: 2,
            samples_per_round: 6,
            max_context: 30,
            seed: 11,
        };
        let result = run_hfmv(&state, &panel, &h, &opts).unwrap();
        assert_eq!(result.pct_degradation, 0.0);
        assert_eq!(result.baseline, result.masked);
    }

    #[test]
    fn hfmv_pooled_sample_count_scales_with_iterations() {
        let (h, panel, state) = prepared_state();
        let base = HfmvOptions {
            rho: 4,
            k_percent: 20.0,
            tau: 3,
            iterations: 1,
            samples_per_round: 5,
            max_context: 30,
            seed: 13,
        };
        let one = run_hfmv(&state, &panel, &h, &base).unwrap();
        let eight = run_hfmv(
            &state,
            &panel,
            &h,
            &HfmvOptions {
                iterations: 8,
                ..base
            },
        )
        .unwrap();
        assert_eq!(one.masked.n_samples * 8, eight.masked.n_samples);
        assert_eq!(eight.iterations, 8);
    }
}
