//! Hierarchical time-series panels: file ingestion, preprocessing, synthetic
//! generation with controllable consistency, training-window construction,
//! and recent-history masking for the missing-data protocol.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::DataError;
use crate::hierarchy::{aggregate_bottom_up, build_hierarchy, Hierarchy};
use crate::rng::derive_rng;

/// N aligned series over T steps with an observation mask and normalization
/// metadata. Immutable in normal use; imputation works on scratch copies.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesPanel {
    values: Array2<f64>,
    mask: Array2<bool>,
    node_names: Vec<String>,
    /// Per-node `(offset, scale)` of the applied transform, indexed by
    /// id - 1; `Some` once preprocessed. Original = stored * scale + offset.
    normalization: Option<Vec<(f64, f64)>>,
    phi_rescaled: bool,
}

impl TimeSeriesPanel {
    /// Builds a fully observed panel from a dense value matrix.
    pub fn from_values(values: Array2<f64>, node_names: Vec<String>) -> Self {
        let mask = Array2::from_elem(values.dim(), true);
        Self::new(values, mask, node_names)
    }

    pub fn new(values: Array2<f64>, mask: Array2<bool>, node_names: Vec<String>) -> Self {
        assert_eq!(values.nrows(), node_names.len());
        assert_eq!(values.dim(), mask.dim());
        assert!(values.ncols() >= 2, "panel must cover at least two steps");
        TimeSeriesPanel {
            values,
            mask,
            node_names,
            normalization: None,
            phi_rescaled: false,
        }
    }

    pub fn node_count(&self) -> usize {
        self.values.nrows()
    }

    /// Number of time steps T.
    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Value of 1-based node `id` at time `t` (NaN where unobserved).
    pub fn value(&self, id: usize, t: usize) -> f64 {
        self.values[(id - 1, t)]
    }

    pub fn observed(&self, id: usize, t: usize) -> bool {
        self.mask[(id - 1, t)]
    }

    pub fn node_names(&self) -> &[String] {
        &self.node_names
    }

    pub fn normalization(&self) -> Option<&[(f64, f64)]> {
        self.normalization.as_deref()
    }

    pub fn phi_rescaled(&self) -> bool {
        self.phi_rescaled
    }

    /// Observed input slice `[t1, t2]` for a node; unobserved cells are NaN.
    pub fn slice(&self, id: usize, t1: usize, t2: usize) -> Vec<f64> {
        (t1..=t2).map(|t| self.value(id, t)).collect()
    }

    /// Restriction to the first `t_len` steps.
    pub fn truncated(&self, t_len: usize) -> TimeSeriesPanel {
        assert!(t_len >= 2 && t_len <= self.len());
        let mut out = self.clone();
        out.values = self.values.slice(ndarray::s![.., ..t_len]).to_owned();
        out.mask = self.mask.slice(ndarray::s![.., ..t_len]).to_owned();
        out
    }

    /// Writes a value and marks the cell observed (used by imputation).
    pub fn fill_cell(&mut self, id: usize, t: usize, value: f64) {
        self.values[(id - 1, t)] = value;
        self.mask[(id - 1, t)] = true;
    }

    /// Cells currently unobserved, in (time, node) order.
    pub fn masked_cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for t in 0..self.len() {
            for id in 1..=self.node_count() {
                if !self.observed(id, t) {
                    out.push((id, t));
                }
            }
        }
        out
    }

    /// Applies a stored per-node `(offset, scale)` transform, marking the
    /// panel preprocessed (used when evaluating under a checkpointed
    /// transform instead of recomputing statistics).
    pub fn apply_normalization(&self, norm: &[(f64, f64)], phi_rescaled: bool) -> TimeSeriesPanel {
        assert_eq!(norm.len(), self.node_count());
        assert!(self.normalization.is_none(), "panel already preprocessed");
        let mut out = self.clone();
        for id in 1..=self.node_count() {
            let (offset, scale) = norm[id - 1];
            for t in 0..self.len() {
                out.values[(id - 1, t)] = (self.values[(id - 1, t)] - offset) / scale;
            }
        }
        out.normalization = Some(norm.to_vec());
        out.phi_rescaled = phi_rescaled;
        out
    }

    /// Maps a stored value back to the original scale of node `id`.
    pub fn denormalize(&self, id: usize, value: f64) -> f64 {
        match &self.normalization {
            Some(norm) => {
                let (offset, scale) = norm[id - 1];
                value * scale + offset
            }
            None => value,
        }
    }
}

/// Reads a panel from CSV with header `node,time,value`.
///
/// Rows may be sparse; absent cells get `mask = false`. Node fields must
/// match hierarchy names (or 1-based ids).
pub fn load_panel(path: &Path, h: &Hierarchy) -> Result<TimeSeriesPanel, DataError> {
    let file = std::fs::File::open(path).map_err(|e| DataError::Io(e.to_string()))?;
    let reader = std::io::BufReader::new(file);
    let lookup: BTreeMap<&str, usize> = h
        .edges()
        .iter()
        .flat_map(|&(p, c, _)| [p, c])
        .chain([h.root_id()])
        .map(|id| (h.name_of(id), id))
        .collect();
    let mut rows: Vec<(usize, usize, f64)> = Vec::new();
    let mut t_max = 0usize;
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| DataError::Io(e.to_string()))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if idx == 0 {
            if line != "node,time,value" {
                return Err(DataError::Parse {
                    line: 1,
                    msg: format!("expected header node,time,value, got {line:?}"),
                });
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(DataError::Parse {
                line: idx + 1,
                msg: format!("expected 3 fields, got {}", fields.len()),
            });
        }
        let node = *lookup
            .get(fields[0].trim())
            .ok_or_else(|| DataError::UnknownNode(fields[0].trim().to_string()))?;
        let t: i64 = fields[1].trim().parse().map_err(|_| DataError::Parse {
            line: idx + 1,
            msg: format!("bad time {:?}", fields[1]),
        })?;
        if t < 0 {
            return Err(DataError::NonMonotoneTime(t));
        }
        let value: f64 = fields[2].trim().parse().map_err(|_| DataError::Parse {
            line: idx + 1,
            msg: format!("bad value {:?}", fields[2]),
        })?;
        if !value.is_finite() {
            return Err(DataError::Parse {
                line: idx + 1,
                msg: format!("non-finite value {value}"),
            });
        }
        t_max = t_max.max(t as usize);
        rows.push((node, t as usize, value));
    }
    let t_len = t_max + 1;
    if t_len < 2 {
        return Err(DataError::ShapeMismatch(
            "panel must cover at least two steps".to_string(),
        ));
    }
    let n = h.node_count();
    let mut values = Array2::from_elem((n, t_len), f64::NAN);
    let mut mask = Array2::from_elem((n, t_len), false);
    for (node, t, value) in rows {
        if mask[(node - 1, t)] {
            return Err(DataError::NonMonotoneTime(t as i64));
        }
        values[(node - 1, t)] = value;
        mask[(node - 1, t)] = true;
    }
    let names = (1..=n).map(|id| h.name_of(id).to_string()).collect();
    Ok(TimeSeriesPanel::new(values, mask, names))
}

/// Writes the observed cells of a panel as CSV with header `node,time,value`.
pub fn write_panel_csv(panel: &TimeSeriesPanel, path: &Path) -> Result<(), DataError> {
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| DataError::Io(e.to_string()))?,
    );
    let mut write = || -> std::io::Result<()> {
        writeln!(out, "node,time,value")?;
        for id in 1..=panel.node_count() {
            for t in 0..panel.len() {
                if panel.observed(id, t) {
                    writeln!(out, "{},{},{}", panel.node_names()[id - 1], t, panel.value(id, t))?;
                }
            }
        }
        Ok(())
    };
    write().map_err(|e| DataError::Io(e.to_string()))
}

/// How a panel should be transformed before training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PreprocessMode {
    /// Z-score leaves over the training range, divide internal series by
    /// child count, and rescale a summation hierarchy's weights to 1/|C_i|.
    Standard,
    /// Values arrive normalized already; record identity metadata only.
    PreNormalized,
}

/// Applies the preprocessing transform, returning the transformed panel and
/// the (possibly reweighted) hierarchy.
///
/// Statistics are computed over the first `train_len` steps only (the whole
/// panel when `None`) so later ranges cannot leak into them.
pub fn preprocess(
    panel: &TimeSeriesPanel,
    h: &Hierarchy,
    mode: PreprocessMode,
    train_len: Option<usize>,
) -> Result<(TimeSeriesPanel, Hierarchy), DataError> {
    if panel.normalization.is_some() {
        return Err(DataError::AlreadyPreprocessed);
    }
    if panel.node_count() != h.node_count() {
        return Err(DataError::ShapeMismatch(format!(
            "panel has {} nodes, hierarchy has {}",
            panel.node_count(),
            h.node_count()
        )));
    }
    let mut out = panel.clone();
    if mode == PreprocessMode::PreNormalized {
        out.normalization = Some(vec![(0.0, 1.0); panel.node_count()]);
        return Ok((out, h.clone()));
    }
    let t_train = train_len.unwrap_or(panel.len()).min(panel.len());
    let mut norm = vec![(0.0, 1.0); panel.node_count()];
    for id in 1..=panel.node_count() {
        if h.is_leaf(id) {
            let obs: Vec<f64> = (0..t_train)
                .filter(|&t| panel.observed(id, t))
                .map(|t| panel.value(id, t))
                .collect();
            if obs.len() < 2 {
                return Err(DataError::ZeroVarianceLeaf(id));
            }
            let mean = obs.iter().sum::<f64>() / obs.len() as f64;
            let var =
                obs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (obs.len() - 1) as f64;
            if var <= 0.0 {
                return Err(DataError::ZeroVarianceLeaf(id));
            }
            let std = var.sqrt();
            for t in 0..panel.len() {
                out.values[(id - 1, t)] = (panel.value(id, t) - mean) / std;
            }
            norm[id - 1] = (mean, std);
        } else {
            let scale = h.children(id).len() as f64;
            for t in 0..panel.len() {
                out.values[(id - 1, t)] = panel.value(id, t) / scale;
            }
            norm[id - 1] = (0.0, scale);
        }
    }
    out.normalization = Some(norm);
    let h_out = if h.is_sum_hierarchy() {
        out.phi_rescaled = true;
        h.with_uniform_child_weights()
    } else {
        h.clone()
    };
    Ok((out, h_out))
}

/// Which consistency regime a synthetic panel should follow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Consistency {
    /// Internal nodes derived exactly from leaves; relations hold exactly.
    Strong,
    /// Independent Gaussian observation noise added to every node after
    /// aggregation.
    Weak,
}

impl std::str::FromStr for Consistency {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "strong" => Ok(Consistency::Strong),
            "weak" => Ok(Consistency::Weak),
            other => Err(format!("unknown consistency {other:?} (expected strong|weak)")),
        }
    }
}

/// Generates a balanced hierarchy and a panel of seasonal-plus-AR(1) leaves.
///
/// Leaves share one seasonal signal and carry node-specific trend and AR(1)
/// noise; internal nodes are exact bottom-up aggregates. Weak mode then adds
/// independent observation noise to every node. Bit-reproducible per seed.
pub fn generate_synthetic(
    n_leaves: usize,
    depth: usize,
    t_len: usize,
    consistency: Consistency,
    leaf_noise_std: f64,
    seed: u64,
) -> (Hierarchy, TimeSeriesPanel) {
    assert!(n_leaves >= 2, "need at least two leaves");
    assert!(depth >= 2, "need depth of at least two");
    assert!(t_len >= 20, "need at least 20 steps");

    let h = balanced_tree(n_leaves, depth);
    let mut signal_rng = derive_rng(seed, &[0x5159]);
    let leaves = h.leaves();

    let period = signal_rng.gen_range(12.0..36.0);
    let phase = signal_rng.gen_range(0.0..std::f64::consts::TAU);
    let ar_noise = Normal::new(0.0, 0.35).unwrap();

    let mut values = Array2::zeros((h.node_count(), t_len));
    for &leaf in &leaves {
        let level = signal_rng.gen_range(1.0..4.0);
        let amp = signal_rng.gen_range(0.6..1.8);
        let slope = signal_rng.gen_range(-1.0..1.0);
        let ar = signal_rng.gen_range(0.5..0.9);
        let mut e = 0.0;
        for t in 0..t_len {
            e = ar * e + ar_noise.sample(&mut signal_rng);
            let seasonal = (std::f64::consts::TAU * t as f64 / period + phase).sin();
            values[(leaf - 1, t)] = level + amp * seasonal + slope * t as f64 / t_len as f64 + e;
        }
    }
    for t in 0..t_len {
        let leaf_map: BTreeMap<usize, f64> =
            leaves.iter().map(|&l| (l, values[(l - 1, t)])).collect();
        let all = aggregate_bottom_up(&h, &leaf_map).expect("leaves cover the tree");
        for id in h.internal_nodes() {
            values[(id - 1, t)] = all[id - 1];
        }
    }
    if consistency == Consistency::Weak {
        let mut noise_rng = derive_rng(seed, &[0x0b5e]);
        let unit = Normal::new(0.0, 1.0).unwrap();
        for id in 1..=h.node_count() {
            for t in 0..t_len {
                values[(id - 1, t)] += leaf_noise_std * unit.sample(&mut noise_rng);
            }
        }
    }
    let names = (1..=h.node_count()).map(|id| id.to_string()).collect();
    (h.clone(), TimeSeriesPanel::from_values(values, names))
}

/// Roughly balanced tree with the requested leaf count and depth; weights 1.
fn balanced_tree(n_leaves: usize, depth: usize) -> Hierarchy {
    // Level sizes interpolate geometrically from 1 to n_leaves.
    let mut sizes = vec![1usize];
    for k in 1..depth {
        let frac = k as f64 / (depth - 1) as f64;
        let size = (n_leaves as f64).powf(frac).round() as usize;
        sizes.push(size.max(sizes[k - 1]).min(n_leaves));
    }
    *sizes.last_mut().unwrap() = n_leaves;

    let mut edges = Vec::new();
    let mut next_id = 1usize;
    let mut prev_level = vec![1usize];
    next_id += 1;
    for &size in &sizes[1..] {
        let mut level = Vec::with_capacity(size);
        for i in 0..size {
            let parent = prev_level[i % prev_level.len()];
            edges.push((parent, next_id, 1.0));
            level.push(next_id);
            next_id += 1;
        }
        prev_level = level;
    }
    build_hierarchy(&edges).expect("generated tree is valid")
}

/// A training window: input `[t1, t2]` for one node, target at `t2 + tau`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowItem {
    pub node: usize,
    pub t1: usize,
    pub t2: usize,
}

/// Enumerated training windows for a panel at one horizon.
#[derive(Debug, Clone)]
pub struct WindowSet {
    pub items: Vec<WindowItem>,
    pub tau: usize,
}

impl WindowSet {
    /// Target time index of an item.
    pub fn target_index(&self, item: &WindowItem) -> usize {
        item.t2 + self.tau
    }

    /// Windows grouped by shared `(t1, t2)`, listing the nodes present.
    pub fn grouped(&self) -> Vec<GroupedWindow> {
        let mut map: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for item in &self.items {
            map.entry((item.t1, item.t2)).or_default().push(item.node);
        }
        map.into_iter()
            .map(|((t1, t2), nodes)| GroupedWindow { t1, t2, nodes })
            .collect()
    }
}

/// All nodes sharing one `(t1, t2)` input window.
#[derive(Debug, Clone)]
pub struct GroupedWindow {
    pub t1: usize,
    pub t2: usize,
    /// Nodes whose target at `t2 + tau` is observed.
    pub nodes: Vec<usize>,
}

/// Enumerates all windows `(t1, t2)` with `t2 <= t_max`, length >= `min_len`,
/// and an observed target at `t2 + tau`.
pub fn make_windows(
    panel: &TimeSeriesPanel,
    tau: usize,
    min_len: usize,
    t_max: usize,
) -> Result<WindowSet, DataError> {
    assert!(tau >= 1, "horizon must be at least 1");
    assert!(
        t_max + tau <= panel.len(),
        "t_max + tau must stay within the panel"
    );
    let min_len = min_len.max(1);
    let t2_cap = t_max.min(panel.len() - 1 - tau);
    let mut items = Vec::new();
    for node in 1..=panel.node_count() {
        for t2 in 0..=t2_cap {
            if t2 + 1 < min_len {
                continue;
            }
            if !panel.observed(node, t2 + tau) {
                continue;
            }
            for t1 in 0..=(t2 + 1 - min_len) {
                items.push(WindowItem { node, t1, t2 });
            }
        }
    }
    if items.is_empty() {
        return Err(DataError::EmptyWindowSet);
    }
    Ok(WindowSet { items, tau })
}

/// Masks `round(k% * N * rho)` cells uniformly among the last `rho` steps.
///
/// Earlier cells are never touched; deterministic given the seed.
pub fn mask_hfmv(
    panel: &TimeSeriesPanel,
    rho: usize,
    k_percent: f64,
    seed: u64,
) -> TimeSeriesPanel {
    assert!(rho >= 1 && rho <= panel.len());
    assert!((0.0..=100.0).contains(&k_percent));
    let t_len = panel.len();
    let cells: Vec<(usize, usize)> = (t_len - rho..t_len)
        .flat_map(|t| (1..=panel.node_count()).map(move |id| (id, t)))
        .collect();
    let n_masked = (k_percent / 100.0 * cells.len() as f64).round() as usize;
    let mut rng = derive_rng(seed, &[0x6153]);
    let mut chosen = cells;
    chosen.shuffle(&mut rng);
    chosen.truncate(n_masked);
    let mut out = panel.clone();
    for (id, t) in chosen {
        out.mask[(id - 1, t)] = false;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::consistency_report;

    fn tiny_hierarchy() -> Hierarchy {
        build_hierarchy(&[(1, 2, 1.0), (1, 3, 1.0)]).unwrap()
    }

    #[test]
    fn load_complete_panel() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let mut body = String::from("node,time,value\n");
        for id in 1..=3 {
            for t in 0..4 {
                body.push_str(&format!("{id},{t},{}\n", (id * 10 + t) as f64));
            }
        }
        std::fs::write(&path, body).unwrap();
        let panel = load_panel(&path, &tiny_hierarchy()).unwrap();
        assert_eq!(panel.node_count(), 3);
        assert_eq!(panel.len(), 4);
        assert!((0..4).all(|t| (1..=3).all(|id| panel.observed(id, t))));
    }

    #[test]
    fn load_sparse_panel_masks_missing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let mut body = String::from("node,time,value\n");
        for id in 1..=3 {
            for t in 0..4 {
                if id == 2 && t == 3 {
                    continue;
                }
                body.push_str(&format!("{id},{t},1.0\n"));
            }
        }
        std::fs::write(&path, body).unwrap();
        let panel = load_panel(&path, &tiny_hierarchy()).unwrap();
        assert!(!panel.observed(2, 3));
        assert!(panel.observed(2, 2));
    }

    #[test]
    fn load_unknown_node_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        std::fs::write(&path, "node,time,value\n9,0,1.0\n9,1,1.0\n").unwrap();
        assert!(matches!(
            load_panel(&path, &tiny_hierarchy()),
            Err(DataError::UnknownNode(_))
        ));
    }

    #[test]
    fn panel_csv_round_trip() {
        let (h, panel) = generate_synthetic(4, 2, 24, Consistency::Strong, 0.0, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        write_panel_csv(&panel, &path).unwrap();
        let loaded = load_panel(&path, &h).unwrap();
        assert_eq!(panel, loaded);
    }

    #[test]
    fn preprocess_zscores_leaves() {
        let h = tiny_hierarchy();
        let values = ndarray::arr2(&[[6.0, 12.0, 18.0], [2.0, 4.0, 6.0], [4.0, 8.0, 12.0]]);
        let panel = TimeSeriesPanel::from_values(values, vec!["1".into(), "2".into(), "3".into()]);
        let (out, h2) = preprocess(&panel, &h, PreprocessMode::Standard, None).unwrap();
        // leaf 2: [2,4,6] -> mean 4, sample std 2
        assert!((out.value(2, 0) + 1.0).abs() < 1e-12);
        assert!((out.value(2, 1)).abs() < 1e-12);
        assert!((out.value(2, 2) - 1.0).abs() < 1e-12);
        // internal node divided by child count, weights rescaled
        assert!((out.value(1, 0) - 3.0).abs() < 1e-12);
        assert_eq!(h2.children(1), &[(2, 0.5), (3, 0.5)]);
        assert!(out.phi_rescaled());
    }

    #[test]
    fn preprocess_internal_divided_by_four_children() {
        let h = build_hierarchy(&[(1, 2, 1.0), (1, 3, 1.0), (1, 4, 1.0), (1, 5, 1.0)]).unwrap();
        let mut values = Array2::zeros((5, 2));
        values[(0, 0)] = 8.0;
        values[(0, 1)] = 12.0;
        for id in 2..=5 {
            values[(id - 1, 0)] = 1.0;
            values[(id - 1, 1)] = 2.0;
        }
        let names = (1..=5).map(|i| i.to_string()).collect();
        let panel = TimeSeriesPanel::from_values(values, names);
        let (out, h2) = preprocess(&panel, &h, PreprocessMode::Standard, None).unwrap();
        assert!((out.value(1, 0) - 2.0).abs() < 1e-12);
        assert!((out.value(1, 1) - 3.0).abs() < 1e-12);
        assert_eq!(h2.children(1)[0].1, 0.25);
    }

    #[test]
    fn preprocess_prenormalized_is_identity() {
        let (h, panel) = generate_synthetic(4, 2, 24, Consistency::Strong, 0.0, 9);
        let (out, h2) = preprocess(&panel, &h, PreprocessMode::PreNormalized, None).unwrap();
        for id in 1..=panel.node_count() {
            for t in 0..panel.len() {
                assert_eq!(out.value(id, t), panel.value(id, t));
            }
        }
        assert_eq!(h.edges(), h2.edges());
    }

    #[test]
    fn preprocess_rejects_double_application() {
        let (h, panel) = generate_synthetic(4, 2, 24, Consistency::Strong, 0.0, 9);
        let (out, _) = preprocess(&panel, &h, PreprocessMode::Standard, None).unwrap();
        assert!(matches!(
            preprocess(&out, &h, PreprocessMode::Standard, None),
            Err(DataError::AlreadyPreprocessed)
        ));
    }

    #[test]
    fn preprocess_rejects_constant_leaf() {
        let h = tiny_hierarchy();
        let values = ndarray::arr2(&[[2.0, 2.0], [1.0, 1.0], [1.0, 2.0]]);
        let panel = TimeSeriesPanel::from_values(values, vec!["1".into(), "2".into(), "3".into()]);
        assert!(matches!(
            preprocess(&panel, &h, PreprocessMode::Standard, None),
            Err(DataError::ZeroVarianceLeaf(2))
        ));
    }

    #[test]
    fn preprocess_inverse_recovers_leaves() {
        let (h, panel) = generate_synthetic(6, 3, 40, Consistency::Weak, 0.1, 17);
        let (out, _) = preprocess(&panel, &h, PreprocessMode::Standard, None).unwrap();
        for &leaf in &h.leaves() {
            for t in 0..panel.len() {
                let back = out.denormalize(leaf, out.value(leaf, t));
                let orig = panel.value(leaf, t);
                assert!(
                    (back - orig).abs() <= 1e-10 * orig.abs().max(1.0),
                    "leaf {leaf} t {t}: {back} vs {orig}"
                );
            }
        }
    }

    #[test]
    fn synthetic_strong_is_exactly_consistent() {
        let (h, panel) = generate_synthetic(8, 3, 60, Consistency::Strong, 0.0, 0);
        let report = consistency_report(&h, &panel).unwrap();
        assert!(report.overall_rms < 1e-9, "rms {}", report.overall_rms);
    }

    #[test]
    fn synthetic_weak_with_zero_noise_matches_strong() {
        let (_, strong) = generate_synthetic(5, 3, 30, Consistency::Strong, 0.0, 4);
        let (_, weak) = generate_synthetic(5, 3, 30, Consistency::Weak, 0.0, 4);
        assert_eq!(strong, weak);
    }

    #[test]
    fn synthetic_weak_noise_rms_band() {
        // Empirical band for noise std 0.1, depth 3, 8 leaves; frozen from
        // the generator's first observed runs over seeds 0..=4.
        for seed in 0..5 {
            let (h, panel) = generate_synthetic(8, 3, 200, Consistency::Weak, 0.1, seed);
            let report = consistency_report(&h, &panel).unwrap();
            assert!(
                report.overall_rms > 0.05 && report.overall_rms < 0.3,
                "seed {seed}: rms {}",
                report.overall_rms
            );
        }
    }

    #[test]
    fn synthetic_is_bit_reproducible() {
        let (h1, p1) = generate_synthetic(6, 3, 50, Consistency::Weak, 0.2, 11);
        let (h2, p2) = generate_synthetic(6, 3, 50, Consistency::Weak, 0.2, 11);
        assert_eq!(h1, h2);
        assert_eq!(p1, p2);
    }

    #[test]
    fn window_count_matches_enumeration() {
        let values = Array2::zeros((1, 10));
        let panel = TimeSeriesPanel::from_values(values, vec!["1".into()]);
        let ws = make_windows(&panel, 1, 3, 9).unwrap();
        assert_eq!(ws.items.len(), 28);
    }

    #[test]
    fn window_masked_target_skipped() {
        let values = Array2::zeros((1, 10));
        let mut mask = Array2::from_elem((1, 10), true);
        mask[(0, 5)] = false;
        let panel = TimeSeriesPanel::new(values, mask, vec!["1".into()]);
        let ws = make_windows(&panel, 1, 3, 9).unwrap();
        // all windows with t2 = 4 (target 5) are gone: t1 in 0..=2
        assert_eq!(ws.items.len(), 28 - 3);
        assert!(ws.items.iter().all(|w| w.t2 != 4));
    }

    #[test]
    fn window_horizon_too_large_is_empty() {
        let values = Array2::zeros((1, 6));
        let panel = TimeSeriesPanel::from_values(values, vec!["1".into()]);
        assert!(matches!(
            make_windows(&panel, 5, 6, 1),
            Err(DataError::EmptyWindowSet)
        ));
    }

    #[test]
    fn hfmv_zero_percent_is_identity() {
        let (_, panel) = generate_synthetic(4, 2, 30, Consistency::Strong, 0.0, 2);
        let masked = mask_hfmv(&panel, 5, 0.0, 7);
        assert_eq!(panel, masked);
    }

    #[test]
    fn hfmv_masks_exact_count_in_recent_region() {
        let h = balanced_tree(9, 2);
        let values = Array2::zeros((h.node_count(), 40));
        let names = (1..=h.node_count()).map(|i| i.to_string()).collect();
        let panel = TimeSeriesPanel::from_values(values, names);
        assert_eq!(panel.node_count(), 10);
        let masked = mask_hfmv(&panel, 5, 10.0, 3);
        let cells = masked.masked_cells();
        assert_eq!(cells.len(), 5); // round(0.10 * 10 * 5)
        assert!(cells.iter().all(|&(_, t)| t >= 35));
    }

    #[test]
    fn hfmv_never_touches_earlier_cells() {
        let (_, panel) = generate_synthetic(6, 3, 50, Consistency::Weak, 0.1, 5);
        for seed in 0..5 {
            let masked = mask_hfmv(&panel, 5, 50.0, seed);
            for t in 0..45 {
                for id in 1..=panel.node_count() {
                    assert_eq!(panel.observed(id, t), masked.observed(id, t));
                }
            }
        }
    }

    #[test]
    fn hfmv_is_deterministic() {
        let (_, panel) = generate_synthetic(6, 3, 50, Consistency::Weak, 0.1, 5);
        assert_eq!(mask_hfmv(&panel, 5, 20.0, 9), mask_hfmv(&panel, 5, 20.0, 9));
    }
}
