//! Areal adjacency structure shared by every spatial prior in this crate.
//!
//! A [`RegionGraph`] is an undirected simple graph over named regions. The
//! spatial precision matrices built from it require a connected graph, so
//! connectivity is enforced at construction unless the caller explicitly
//! opts into keeping the largest component.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::{Arc, OnceLock};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::car::CarContext;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("line {line}: expected two region ids, found {found} tokens")]
    MalformedLine { line: usize, found: usize },
    #[error("line {line}: self-loop on region '{id}'")]
    SelfLoop { line: usize, id: String },
    #[error("line {line}: duplicate edge '{a}' -- '{b}'")]
    DuplicateEdge { line: usize, a: String, b: String },
    #[error("region '{id}' has degree 0")]
    IsolatedRegion { id: String },
    #[error("graph has {components} connected components; spatial priors need a connected graph")]
    Disconnected { components: usize },
    #[error("edge references unknown region index {index} (only {n} regions)")]
    UnknownRegion { index: usize, n: usize },
    #[error("graph has no regions")]
    Empty,
}

/// Undirected simple graph over named regions.
///
/// Region indices follow first appearance in the edge list, which also fixes
/// the row/column order of every matrix built on the graph.
#[derive(Debug)]
pub struct RegionGraph {
    region_ids: Vec<String>,
    id_index: HashMap<String, usize>,
    neighbors: Vec<Vec<usize>>,
    edges: Vec<(usize, usize)>,
    pub(crate) car_ctx: OnceLock<Arc<CarContext>>,
}

impl PartialEq for RegionGraph {
    fn eq(&self, other: &Self) -> bool {
        self.region_ids == other.region_ids && self.edges == other.edges
    }
}

/// Connected-component labels for an edge set over `n` nodes. Labels are
/// 0-based and assigned in order of lowest contained node index.
pub fn component_labels(n: usize, edges: &[(usize, usize)]) -> Vec<usize> {
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut label = vec![usize::MAX; n];
    let mut next = 0;
    for start in 0..n {
        if label[start] != usize::MAX {
            continue;
        }
        let mut stack = vec![start];
        label[start] = next;
        while let Some(u) = stack.pop() {
            for &v in &adj[u] {
                if label[v] == usize::MAX {
                    label[v] = next;
                    stack.push(v);
                }
            }
        }
        next += 1;
    }
    label
}

impl RegionGraph {
    /// Builds a graph from explicit parts. `edges` hold 0-based indices into
    /// `region_ids`. Every region must appear in at least one edge and the
    /// graph must be connected.
    pub fn from_parts(region_ids: Vec<String>, edges: Vec<(usize, usize)>) -> Result<Self, GraphError> {
        let n = region_ids.len();
        if n == 0 {
            return Err(GraphError::Empty);
        }
        let mut neighbors = vec![Vec::new(); n];
        let mut canon = Vec::with_capacity(edges.len());
        let mut seen = std::collections::HashSet::new();
        for (line, &(a, b)) in edges.iter().enumerate() {
            if a >= n || b >= n {
                return Err(GraphError::UnknownRegion { index: a.max(b), n });
            }
            if a == b {
                return Err(GraphError::SelfLoop {
                    line: line + 1,
                    id: region_ids[a].clone(),
                });
            }
            let e = (a.min(b), a.max(b));
            if !seen.insert(e) {
                return Err(GraphError::DuplicateEdge {
                    line: line + 1,
                    a: region_ids[e.0].clone(),
                    b: region_ids[e.1].clone(),
                });
            }
            canon.push(e);
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for (i, ns) in neighbors.iter().enumerate() {
            if ns.is_empty() {
                return Err(GraphError::IsolatedRegion {
                    id: region_ids[i].clone(),
                });
            }
        }
        let labels = component_labels(n, &canon);
        let comps = labels.iter().copied().max().map_or(0, |m| m + 1);
        if comps > 1 {
            return Err(GraphError::Disconnected { components: comps });
        }
        for ns in &mut neighbors {
            ns.sort_unstable();
        }
        canon.sort_unstable();
        let id_index = region_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        Ok(RegionGraph {
            region_ids,
            id_index,
            neighbors,
            edges: canon,
            car_ctx: OnceLock::new(),
        })
    }

    /// Parses the plain-text edge list format: one edge per line as two
    /// whitespace-separated region ids, `#` starts a comment, blank lines are
    /// skipped. Region indices follow first appearance.
    pub fn from_edge_list_text(text: &str) -> Result<Self, GraphError> {
        let (ids, edges) = parse_edge_lines(text)?;
        Self::from_parts(ids, edges)
    }

    /// Like [`from_edge_list_text`](Self::from_edge_list_text) but keeps only
    /// the largest connected component instead of failing on a disconnected
    /// graph. Returns the kept graph and the ids that were dropped. Ties on
    /// component size keep the component containing the earliest region.
    pub fn from_edge_list_text_largest_component(
        text: &str,
    ) -> Result<(Self, Vec<String>), GraphError> {
        let (ids, edges) = parse_edge_lines(text)?;
        let labels = component_labels(ids.len(), &edges);
        let comps = labels.iter().copied().max().map_or(0, |m| m + 1);
        if comps <= 1 {
            return Ok((Self::from_parts(ids, edges)?, Vec::new()));
        }
        let mut sizes = vec![0usize; comps];
        for &l in &labels {
            sizes[l] += 1;
        }
        let keep = (0..comps).max_by_key(|&c| (sizes[c], std::cmp::Reverse(c))).unwrap();
        let mut new_index = vec![usize::MAX; ids.len()];
        let mut kept_ids = Vec::new();
        let mut dropped = Vec::new();
        for (i, id) in ids.iter().enumerate() {
            if labels[i] == keep {
                new_index[i] = kept_ids.len();
                kept_ids.push(id.clone());
            } else {
                dropped.push(id.clone());
            }
        }
        let kept_edges: Vec<(usize, usize)> = edges
            .iter()
            .filter(|&&(a, b)| labels[a] == keep && labels[b] == keep)
            .map(|&(a, b)| (new_index[a], new_index[b]))
            .collect();
        Ok((Self::from_parts(kept_ids, kept_edges)?, dropped))
    }

    /// Rectangular lattice with rook adjacency; region ids are `r<i>c<j>`,
    /// indexed row-major.
    pub fn lattice(rows: usize, cols: usize) -> Self {
        let mut ids = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                ids.push(format!("r{r}c{c}"));
            }
        }
        let mut edges = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                if c + 1 < cols {
                    edges.push((i, i + 1));
                }
                if r + 1 < rows {
                    edges.push((i, i + cols));
                }
            }
        }
        Self::from_parts(ids, edges).expect("lattice construction is always valid")
    }

    pub fn n_regions(&self) -> usize {
        self.region_ids.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn region_ids(&self) -> &[String] {
        &self.region_ids
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.id_index.get(id).copied()
    }

    pub fn neighbors_of(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn neighbor_lists(&self) -> &[Vec<usize>] {
        &self.neighbors
    }

    /// Canonical edge list, each pair ordered and the list sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    /// Histogram of node degrees as (degree, count), ascending.
    pub fn degree_histogram(&self) -> Vec<(usize, usize)> {
        let mut counts: HashMap<usize, usize> = HashMap::new();
        for ns in &self.neighbors {
            *counts.entry(ns.len()).or_insert(0) += 1;
        }
        let mut out: Vec<(usize, usize)> = counts.into_iter().collect();
        out.sort_unstable();
        out
    }

    /// Serializes back to edge-list text.
    ///
    /// Edges are ordered so that region first appearances follow index
    /// order, which makes parsing the output reproduce the graph with
    /// identical indices. Such an ordering exists whenever every region is
    /// adjacent to some lower-indexed region (always the case for graphs
    /// built by [`from_edge_list_text`](Self::from_edge_list_text) or
    /// [`lattice`](Self::lattice)); otherwise edges are emitted in canonical
    /// order and only the id/edge structure survives the round trip.
    pub fn to_edge_list_text(&self) -> String {
        let n = self.region_ids.len();
        let mut introduced = vec![false; n];
        introduced[0] = true;
        let mut used = vec![false; self.edges.len()];
        let edge_pos: HashMap<(usize, usize), usize> = self
            .edges
            .iter()
            .enumerate()
            .map(|(i, &e)| (e, i))
            .collect();
        let mut seq: Vec<(usize, usize)> = Vec::with_capacity(self.edges.len());
        let mut ok = true;
        for t in 1..n {
            if introduced[t] {
                continue;
            }
            match self.neighbors[t].iter().copied().find(|&k| introduced[k]) {
                Some(k) => {
                    let pos = edge_pos[&(k.min(t), k.max(t))];
                    used[pos] = true;
                    seq.push((k, t));
                    introduced[t] = true;
                }
                None => {
                    ok = false;
                    break;
                }
            }
        }
        let mut out = String::new();
        if ok {
            for (a, b) in seq {
                let _ = writeln!(out, "{} {}", self.region_ids[a], self.region_ids[b]);
            }
            for (i, &(a, b)) in self.edges.iter().enumerate() {
                if !used[i] {
                    let _ = writeln!(out, "{} {}", self.region_ids[a], self.region_ids[b]);
                }
            }
        } else {
            for &(a, b) in &self.edges {
                let _ = writeln!(out, "{} {}", self.region_ids[a], self.region_ids[b]);
            }
        }
        out
    }

    /// SHA-256 over region ids (in index order) and the canonical edge list.
    /// Trained decoder artifacts store this to refuse mismatched graphs.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for id in &self.region_ids {
            hasher.update(id.as_bytes());
            hasher.update([0u8]);
        }
        hasher.update([1u8]);
        for &(a, b) in &self.edges {
            hasher.update((a as u64).to_le_bytes());
            hasher.update((b as u64).to_le_bytes());
        }
        let digest = hasher.finalize();
        let mut hex = String::with_capacity(64);
        for byte in digest {
            let _ = write!(hex, "{byte:02x}");
        }
        hex
    }
}

fn parse_edge_lines(text: &str) -> Result<(Vec<String>, Vec<(usize, usize)>), GraphError> {
    let mut ids: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut edges: Vec<(usize, usize)> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let content = raw.split('#').next().unwrap_or("");
        let tokens: Vec<&str> = content.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        if tokens.len() != 2 {
            return Err(GraphError::MalformedLine {
                line,
                found: tokens.len(),
            });
        }
        if tokens[0] == tokens[1] {
            return Err(GraphError::SelfLoop {
                line,
                id: tokens[0].to_string(),
            });
        }
        let mut idx = |tok: &str| -> usize {
            if let Some(&i) = index.get(tok) {
                i
            } else {
                let i = ids.len();
                ids.push(tok.to_string());
                index.insert(tok.to_string(), i);
                i
            }
        };
        let a = idx(tokens[0]);
        let b = idx(tokens[1]);
        let e = (a.min(b), a.max(b));
        if !seen.insert(e) {
            return Err(GraphError::DuplicateEdge {
                line,
                a: ids[e.0].clone(),
                b: ids[e.1].clone(),
            });
        }
        edges.push((a, b));
    }
    if ids.is_empty() {
        return Err(GraphError::Empty);
    }
    Ok((ids, edges))
}
