//! Hierarchy tree over time-series nodes with weighted aggregation relations.
//!
//! Node ids are 1-based contiguous integers with the root fixed at id 1.
//! Levels are depths from the root (root = level 1). The structure is
//! immutable after construction and safe for concurrent reads.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{DataError, HierarchyError};
use crate::panel::TimeSeriesPanel;

/// A rooted tree of N nodes with per-edge aggregation weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Hierarchy {
    n: usize,
    edges: Vec<(usize, usize, f64)>,
    /// Ordered child list per node, indexed by id - 1.
    children: Vec<Vec<(usize, f64)>>,
    /// Parent id per node (None for the root), indexed by id - 1.
    parent: Vec<Option<usize>>,
    /// Level per node (root = 1), indexed by id - 1.
    level: Vec<usize>,
    /// External name per node, indexed by id - 1.
    names: Vec<String>,
}

/// Validates an edge list and derives the child map, parents, and levels.
///
/// Node ids must be contiguous integers `1..=N` with root 1. Rejects cycles,
/// unreachable nodes, multiple parents, and zero or non-finite weights.
pub fn build_hierarchy(edges: &[(usize, usize, f64)]) -> Result<Hierarchy, HierarchyError> {
    if edges.is_empty() {
        return Err(HierarchyError::EmptyEdges);
    }
    let mut max_id = 0;
    for &(p, c, w) in edges {
        if !(w.is_finite() && w != 0.0) {
            return Err(HierarchyError::ZeroWeight {
                parent: p,
                child: c,
                weight: w,
            });
        }
        if p == 0 || c == 0 {
            return Err(HierarchyError::NonContiguousIds { id: 0, n: 0 });
        }
        max_id = max_id.max(p).max(c);
    }
    let n = max_id;
    let mut seen = vec![false; n];
    for &(p, c, _) in edges {
        seen[p - 1] = true;
        seen[c - 1] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(HierarchyError::NonContiguousIds { id: missing + 1, n });
    }

    let mut children: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    let mut parent: Vec<Option<usize>> = vec![None; n];
    for &(p, c, w) in edges {
        if parent[c - 1].is_some() {
            return Err(HierarchyError::MultiParent(c));
        }
        parent[c - 1] = Some(p);
        children[p - 1].push((c, w));
    }

    let roots: Vec<usize> = (1..=n).filter(|&id| parent[id - 1].is_none()).collect();
    if roots.is_empty() {
        return Err(HierarchyError::Cycle(1));
    }
    if roots[0] != 1 || parent[0].is_some() {
        return Err(HierarchyError::Disconnected(roots[0]));
    }

    // BFS from the root; anything unreached is either in a cycle or detached.
    let mut level = vec![0usize; n];
    let mut queue = vec![1usize];
    level[0] = 1;
    let mut head = 0;
    while head < queue.len() {
        let id = queue[head];
        head += 1;
        for &(c, _) in &children[id - 1] {
            level[c - 1] = level[id - 1] + 1;
            queue.push(c);
        }
    }
    if queue.len() != n {
        let unreached = (1..=n).find(|&id| level[id - 1] == 0).unwrap();
        // Walk the parent chain; revisiting a node means a cycle.
        let mut cursor = unreached;
        for _ in 0..=n {
            match parent[cursor - 1] {
                Some(p) if p == unreached => return Err(HierarchyError::Cycle(unreached)),
                Some(p) => cursor = p,
                None => break,
            }
        }
        return Err(HierarchyError::Disconnected(unreached));
    }

    let names = (1..=n).map(|id| id.to_string()).collect();
    Ok(Hierarchy {
        n,
        edges: edges.to_vec(),
        children,
        parent,
        level,
        names,
    })
}

impl Hierarchy {
    /// A degenerate one-node hierarchy (no relations).
    pub fn single() -> Self {
        Hierarchy {
            n: 1,
            edges: Vec::new(),
            children: vec![Vec::new()],
            parent: vec![None],
            level: vec![1],
            names: vec!["1".to_string()],
        }
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn root_id(&self) -> usize {
        1
    }

    pub fn edges(&self) -> &[(usize, usize, f64)] {
        &self.edges
    }

    /// Ordered `(child, weight)` list of 1-based node `id`.
    pub fn children(&self, id: usize) -> &[(usize, f64)] {
        &self.children[id - 1]
    }

    pub fn parent(&self, id: usize) -> Option<usize> {
        self.parent[id - 1]
    }

    pub fn is_leaf(&self, id: usize) -> bool {
        self.children[id - 1].is_empty()
    }

    pub fn leaves(&self) -> Vec<usize> {
        (1..=self.n).filter(|&id| self.is_leaf(id)).collect()
    }

    pub fn internal_nodes(&self) -> Vec<usize> {
        (1..=self.n).filter(|&id| !self.is_leaf(id)).collect()
    }

    /// Depth from the root; the root is level 1.
    pub fn level_of(&self, id: usize) -> usize {
        self.level[id - 1]
    }

    /// Number of levels (max depth).
    pub fn depth(&self) -> usize {
        *self.level.iter().max().unwrap()
    }

    /// Node ids grouped by level, `result[l - 1]` holding level `l`.
    pub fn levels(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.depth()];
        for id in 1..=self.n {
            out[self.level[id - 1] - 1].push(id);
        }
        out
    }

    /// Node ids ordered so every child precedes its parent.
    pub fn reverse_topological(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = (1..=self.n).collect();
        ids.sort_by(|a, b| self.level[b - 1].cmp(&self.level[a - 1]).then(a.cmp(b)));
        ids
    }

    pub fn name_of(&self, id: usize) -> &str {
        &self.names[id - 1]
    }

    pub fn set_names(&mut self, names: Vec<String>) {
        assert_eq!(names.len(), self.n);
        self.names = names;
    }

    /// Replaces each edge weight with `1 / |C_parent|`.
    pub fn with_uniform_child_weights(&self) -> Hierarchy {
        let mut out = self.clone();
        for id in 1..=self.n {
            let count = out.children[id - 1].len();
            if count == 0 {
                continue;
            }
            let w = 1.0 / count as f64;
            for entry in &mut out.children[id - 1] {
                entry.1 = w;
            }
        }
        out.edges = out
            .edges
            .iter()
            .map(|&(p, c, _)| (p, c, 1.0 / self.children[p - 1].len() as f64))
            .collect();
        out
    }

    /// True when every edge weight is exactly 1 (plain summation hierarchy).
    pub fn is_sum_hierarchy(&self) -> bool {
        self.edges.iter().all(|&(_, _, w)| w == 1.0)
    }
}

/// Computes every internal node bottom-up from leaf values.
///
/// Returns values for all nodes (indexed by id - 1); the result satisfies
/// every aggregation relation exactly.
pub fn aggregate_bottom_up(
    h: &Hierarchy,
    leaf_values: &BTreeMap<usize, f64>,
) -> Result<Vec<f64>, HierarchyError> {
    let mut values = vec![f64::NAN; h.node_count()];
    for id in h.leaves() {
        match leaf_values.get(&id) {
            Some(&v) => values[id - 1] = v,
            None => return Err(HierarchyError::MissingLeaf(id)),
        }
    }
    for id in h.reverse_topological() {
        if h.is_leaf(id) {
            continue;
        }
        values[id - 1] = h
            .children(id)
            .iter()
            .map(|&(c, w)| w * values[c - 1])
            .sum();
    }
    Ok(values)
}

/// Per-internal-node aggregation residuals of a panel.
#[derive(Debug, Clone)]
pub struct ConsistencyReport {
    /// Internal node ids, ascending.
    pub internal_ids: Vec<usize>,
    /// Residual series per internal node, aligned with `internal_ids`;
    /// NaN where any involved cell is masked.
    pub residuals: Vec<Vec<f64>>,
    /// Root-mean-square residual per internal node.
    pub per_node_rms: Vec<f64>,
    /// Root-mean-square over all internal nodes and times.
    pub overall_rms: f64,
}

/// Residuals `r_i(t) = y_i(t) - sum_j w_ij y_j(t)` for every internal node.
pub fn consistency_report(
    h: &Hierarchy,
    panel: &TimeSeriesPanel,
) -> Result<ConsistencyReport, HierarchyError> {
    if panel.node_count() != h.node_count() {
        return Err(HierarchyError::ShapeMismatch(format!(
            "panel has {} nodes, hierarchy has {}",
            panel.node_count(),
            h.node_count()
        )));
    }
    let t_len = panel.len();
    let internal_ids = h.internal_nodes();
    let mut residuals = Vec::with_capacity(internal_ids.len());
    let mut per_node_rms = Vec::with_capacity(internal_ids.len());
    let mut total_sq = 0.0;
    let mut total_count = 0usize;
    for &id in &internal_ids {
        let mut series = Vec::with_capacity(t_len);
        let mut sq = 0.0;
        let mut count = 0usize;
        for t in 0..t_len {
            let observed = panel.observed(id, t)
                && h.children(id).iter().all(|&(c, _)| panel.observed(c, t));
            if !observed {
                series.push(f64::NAN);
                continue;
            }
            let agg: f64 = h
                .children(id)
                .iter()
                .map(|&(c, w)| w * panel.value(c, t))
                .sum();
            let r = panel.value(id, t) - agg;
            series.push(r);
            sq += r * r;
            count += 1;
        }
        per_node_rms.push(if count == 0 { 0.0 } else { (sq / count as f64).sqrt() });
        total_sq += sq;
        total_count += count;
        residuals.push(series);
    }
    let overall_rms = if total_count == 0 {
        0.0
    } else {
        (total_sq / total_count as f64).sqrt()
    };
    Ok(ConsistencyReport {
        internal_ids,
        residuals,
        per_node_rms,
        overall_rms,
    })
}

/// Reads a hierarchy from CSV with header `parent,child,weight`.
///
/// Arbitrary string ids are remapped to contiguous 1-based ids (root = 1,
/// then breadth-first in file order); original ids are kept as node names.
/// Files that already use `1..=N` with root 1 keep their numbering.
pub fn read_hierarchy_csv(path: &Path) -> Result<Hierarchy, DataError> {
    let file = std::fs::File::open(path).map_err(|e| DataError::Io(e.to_string()))?;
    let reader = std::io::BufReader::new(file);
    let mut raw_edges: Vec<(String, String, f64)> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| DataError::Io(e.to_string()))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if idx == 0 {
            if line != "parent,child,weight" {
                return Err(DataError::Parse {
                    line: 1,
                    msg: format!("expected header parent,child,weight, got {line:?}"),
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
        let weight: f64 = fields[2].trim().parse().map_err(|_| DataError::Parse {
            line: idx + 1,
            msg: format!("bad weight {:?}", fields[2]),
        })?;
        raw_edges.push((fields[0].trim().to_string(), fields[1].trim().to_string(), weight));
    }
    if raw_edges.is_empty() {
        return Err(DataError::Parse {
            line: 0,
            msg: "no edges".to_string(),
        });
    }

    let (edges, names) = remap_ids(&raw_edges).map_err(|msg| DataError::Parse { line: 0, msg })?;
    let mut h = build_hierarchy(&edges).map_err(|e| DataError::Parse {
        line: 0,
        msg: e.to_string(),
    })?;
    h.set_names(names);
    Ok(h)
}

/// Maps string node ids onto contiguous 1-based integers.
fn remap_ids(raw: &[(String, String, f64)]) -> Result<(Vec<(usize, usize, f64)>, Vec<String>), String> {
    let mut ids: Vec<&str> = Vec::new();
    for (p, c, _) in raw {
        if !ids.contains(&p.as_str()) {
            ids.push(p);
        }
        if !ids.contains(&c.as_str()) {
            ids.push(c);
        }
    }
    let n = ids.len();
    // Keep native numbering when the file already uses 1..=N with root 1.
    let numeric: Option<Vec<usize>> = ids
        .iter()
        .map(|s| s.parse::<usize>().ok().filter(|&v| v >= 1 && v <= n))
        .collect();
    if let Some(nums) = numeric {
        let mut sorted = nums.clone();
        sorted.sort_unstable();
        if sorted == (1..=n).collect::<Vec<_>>() {
            let lookup: BTreeMap<&str, usize> =
                ids.iter().zip(nums.iter()).map(|(s, &v)| (*s, v)).collect();
            let edges = raw
                .iter()
                .map(|(p, c, w)| (lookup[p.as_str()], lookup[c.as_str()], *w))
                .collect();
            let mut names = vec![String::new(); n];
            for (s, &v) in &lookup {
                names[v - 1] = s.to_string();
            }
            return Ok((edges, names));
        }
    }
    // Otherwise assign by breadth-first traversal from the unique root.
    let children_of = |id: &str| -> Vec<&str> {
        raw.iter()
            .filter(|(p, _, _)| p == id)
            .map(|(_, c, _)| c.as_str())
            .collect()
    };
    let has_parent = |id: &str| raw.iter().any(|(_, c, _)| c == id);
    let roots: Vec<&str> = ids.iter().copied().filter(|id| !has_parent(id)).collect();
    if roots.len() != 1 {
        return Err(format!("expected exactly one root, found {}", roots.len()));
    }
    let mut order: Vec<&str> = vec![roots[0]];
    let mut head = 0;
    while head < order.len() {
        let id = order[head];
        head += 1;
        for c in children_of(id) {
            if !order.contains(&c) {
                order.push(c);
            }
        }
    }
    if order.len() != n {
        return Err("hierarchy file contains unreachable nodes".to_string());
    }
    let lookup: BTreeMap<&str, usize> = order
        .iter()
        .enumerate()
        .map(|(i, s)| (*s, i + 1))
        .collect();
    let edges = raw
        .iter()
        .map(|(p, c, w)| (lookup[p.as_str()], lookup[c.as_str()], *w))
        .collect();
    let names = order.iter().map(|s| s.to_string()).collect();
    Ok((edges, names))
}

/// Writes a hierarchy as CSV with header `parent,child,weight`.
pub fn write_hierarchy_csv(h: &Hierarchy, path: &Path) -> Result<(), DataError> {
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| DataError::Io(e.to_string()))?,
    );
    let mut write = || -> std::io::Result<()> {
        writeln!(out, "parent,child,weight")?;
        for &(p, c, w) in h.edges() {
            writeln!(out, "{},{},{}", h.name_of(p), h.name_of(c), w)?;
        }
        Ok(())
    };
    write().map_err(|e| DataError::Io(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn smallest_internal_node() {
        let h = build_hierarchy(&[(1, 2, 1.0), (1, 3, 1.0)]).unwrap();
        assert_eq!(h.node_count(), 3);
        assert_eq!(h.children(1), &[(2, 1.0), (3, 1.0)]);
        assert_eq!(h.leaves(), vec![2, 3]);
        assert_eq!(h.internal_nodes(), vec![1]);
    }

    #[test]
    fn two_cycle_rejected() {
        assert!(matches!(
            build_hierarchy(&[(1, 2, 1.0), (2, 1, 1.0)]),
            Err(HierarchyError::Cycle(_))
        ));
    }

    #[test]
    fn five_node_two_level_tree() {
        let h = build_hierarchy(&[(1, 2, 0.5), (1, 3, 0.5), (2, 4, 1.0), (2, 5, 1.0)]).unwrap();
        assert_eq!(h.node_count(), 5);
        assert_eq!(h.internal_nodes(), vec![1, 2]);
        assert_eq!(h.leaves(), vec![3, 4, 5]);
        assert_eq!(h.levels(), vec![vec![1], vec![2, 3], vec![4, 5]]);
        assert_eq!(h.depth(), 3);
    }

    #[test]
    fn multi_parent_rejected() {
        assert!(matches!(
            build_hierarchy(&[(1, 3, 1.0), (2, 3, 1.0), (1, 2, 1.0)]),
            Err(HierarchyError::MultiParent(3))
        ));
    }

    #[test]
    fn disconnected_rejected() {
        assert!(matches!(
            build_hierarchy(&[(1, 2, 1.0), (3, 4, 1.0)]),
            Err(HierarchyError::Disconnected(3))
        ));
    }

    #[test]
    fn detached_cycle_rejected() {
        assert!(matches!(
            build_hierarchy(&[(1, 2, 1.0), (3, 4, 1.0), (4, 3, 1.0)]),
            Err(HierarchyError::Cycle(_))
        ));
    }

    #[test]
    fn zero_weight_rejected() {
        assert!(matches!(
            build_hierarchy(&[(1, 2, 0.0)]),
            Err(HierarchyError::ZeroWeight { .. })
        ));
    }

    #[test]
    fn aggregate_simple_sum() {
        let h = build_hierarchy(&[(1, 2, 1.0), (1, 3, 1.0)]).unwrap();
        let leaves = BTreeMap::from([(2, 1.0), (3, 2.0)]);
        let values = aggregate_bottom_up(&h, &leaves).unwrap();
        assert_eq!(values[0], 3.0);
    }

    #[test]
    fn aggregate_weighted_sum() {
        let h = build_hierarchy(&[(1, 2, 0.5), (1, 3, 0.5)]).unwrap();
        let leaves = BTreeMap::from([(2, 4.0), (3, 8.0)]);
        let values = aggregate_bottom_up(&h, &leaves).unwrap();
        assert_eq!(values[0], 6.0);
    }

    #[test]
    fn aggregate_two_levels() {
        let h = build_hierarchy(&[(1, 2, 0.5), (1, 3, 0.5), (2, 4, 1.0), (2, 5, 1.0)]).unwrap();
        let leaves = BTreeMap::from([(3, 2.0), (4, 1.0), (5, 3.0)]);
        let values = aggregate_bottom_up(&h, &leaves).unwrap();
        assert_eq!(values[1], 4.0);
        assert_eq!(values[0], 0.5 * 4.0 + 0.5 * 2.0);
    }

    #[test]
    fn aggregate_missing_leaf_rejected() {
        let h = build_hierarchy(&[(1, 2, 1.0), (1, 3, 1.0)]).unwrap();
        let leaves = BTreeMap::from([(2, 1.0)]);
        assert!(matches!(
            aggregate_bottom_up(&h, &leaves),
            Err(HierarchyError::MissingLeaf(3))
        ));
    }

    #[test]
    fn aggregate_is_linear_on_random_trees() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        for _ in 0..20 {
            let n = rng.gen_range(3..=50);
            let edges: Vec<(usize, usize, f64)> = (2..=n)
                .map(|c| {
                    let p = rng.gen_range(1..c);
                    (p, c, rng.gen_range(0.2..2.0))
                })
                .collect();
            let h = build_hierarchy(&edges).unwrap();
            let leaves = h.leaves();
            let x: BTreeMap<usize, f64> =
                leaves.iter().map(|&l| (l, rng.gen_range(-3.0..3.0))).collect();
            let y: BTreeMap<usize, f64> =
                leaves.iter().map(|&l| (l, rng.gen_range(-3.0..3.0))).collect();
            let (a, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let combined: BTreeMap<usize, f64> = leaves
                .iter()
                .map(|&l| (l, a * x[&l] + b * y[&l]))
                .collect();
            let vx = aggregate_bottom_up(&h, &x).unwrap();
            let vy = aggregate_bottom_up(&h, &y).unwrap();
            let vc = aggregate_bottom_up(&h, &combined).unwrap();
            for i in 0..n {
                assert!((vc[i] - (a * vx[i] + b * vy[i])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn csv_round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        let edges = [(1, 2, 0.5), (1, 3, 0.5), (2, 4, 1.0), (2, 5, 1.0)];
        let h = build_hierarchy(&edges).unwrap();
        write_hierarchy_csv(&h, &path).unwrap();
        let h2 = read_hierarchy_csv(&path).unwrap();
        assert_eq!(h.edges(), h2.edges());
        let dump1 = std::fs::read(&path).unwrap();
        write_hierarchy_csv(&h2, &path).unwrap();
        assert_eq!(dump1, std::fs::read(&path).unwrap());
    }

    #[test]
    fn csv_string_ids_remapped_breadth_first() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        std::fs::write(&path, "parent,child,weight\ntotal,east,1\ntotal,west,1\neast,ne,1\n")
            .unwrap();
        let h = read_hierarchy_csv(&path).unwrap();
        assert_eq!(h.node_count(), 4);
        assert_eq!(h.name_of(1), "total");
        assert_eq!(h.name_of(2), "east");
        assert_eq!(h.children(2), &[(4, 1.0)]);
        assert_eq!(h.name_of(4), "ne");
    }
}
