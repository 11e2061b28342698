//! Directed graph substrate.
//!
//! An edge `(src, dst)` means `src` can interfere with `dst`: `src` belongs to
//! the in-neighbor set of `dst`. Self-loops are never stored; the implicit
//! self-loop only shows up in the augmented degree `deg_tilde = |N_i| + 1`
//! and in the message-passing neighborhoods built by [`DirectedGraph::neighborhood_index`].

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use crate::ag::EdgeIndex;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct DirectedGraph {
    n: usize,
    edges: Vec<(usize, usize)>,
    in_neighbors: Vec<Vec<usize>>,
    deg_tilde: Vec<usize>,
    reach: OnceLock<ReachSet>,
}

/// For every node `i`, the sorted list of other nodes with a directed path into `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReachSet {
    sets: Vec<Vec<usize>>,
}

impl ReachSet {
    pub fn of(&self, i: usize) -> &[usize] {
        &self.sets[i]
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }
}

impl PartialEq for DirectedGraph {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n && self.edges == other.edges
    }
}

impl DirectedGraph {
    /// Validated construction; duplicate edges are merged and self-loops rejected.
    pub fn from_edge_list(pairs: &[(usize, usize)], n: usize) -> Result<Self> {
        for (line, &(s, d)) in pairs.iter().enumerate() {
            if s >= n || d >= n {
                return Err(Error::Graph(format!(
                    "edge {} ({s}, {d}) out of range for {n} nodes",
                    line + 1
                )));
            }
            if s == d {
                return Err(Error::Graph(format!("edge {} is a self-loop on {s}", line + 1)));
            }
        }
        let mut edges = pairs.to_vec();
        edges.sort_unstable();
        edges.dedup();
        let mut in_neighbors = vec![Vec::new(); n];
        for &(s, d) in &edges {
            in_neighbors[d].push(s);
        }
        for list in &mut in_neighbors {
            list.sort_unstable();
        }
        let deg_tilde = in_neighbors.iter().map(|l| l.len() + 1).collect();
        Ok(Self {
            n,
            edges,
            in_neighbors,
            deg_tilde,
            reach: OnceLock::new(),
        })
    }

    pub fn empty(n: usize) -> Self {
        Self::from_edge_list(&[], n).expect("empty graph is valid")
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Deduplicated edges sorted by `(src, dst)`.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn in_neighbors(&self, i: usize) -> &[usize] {
        &self.in_neighbors[i]
    }

    pub fn deg_tilde(&self) -> &[usize] {
        &self.deg_tilde
    }

    /// Transitive-closure predecessors, computed on first use.
    pub fn reach_sets(&self) -> &ReachSet {
        self.reach.get_or_init(|| {
            let mut sets = Vec::with_capacity(self.n);
            let mut seen = vec![usize::MAX; self.n];
            let mut queue = VecDeque::new();
            for i in 0..self.n {
                let mut found = Vec::new();
                seen[i] = i;
                queue.push_back(i);
                while let Some(v) = queue.pop_front() {
                    for &u in &self.in_neighbors[v] {
                        if seen[u] != i {
                            seen[u] = i;
                            found.push(u);
                            queue.push_back(u);
                        }
                    }
                }
                // a cycle through i reaches i itself, which is excluded
                found.retain(|&k| k != i);
                found.sort_unstable();
                sets.push(found);
            }
            ReachSet { sets }
        })
    }

    /// Message-passing index over `N_i ∪ {i}` (self edge included).
    pub fn neighborhood_index(&self) -> Arc<EdgeIndex> {
        let mut pairs = self.edges.clone();
        pairs.extend((0..self.n).map(|i| (i, i)));
        Arc::new(EdgeIndex::new(self.n, &pairs).expect("graph edges are in range"))
    }

    /// Message-passing index over `N_i` only.
    pub fn inbound_index(&self) -> Arc<EdgeIndex> {
        Arc::new(EdgeIndex::new(self.n, &self.edges).expect("graph edges are in range"))
    }

    /// Reads a `src<TAB>dst` edge list with `#` comments.
    pub fn read_edge_file(path: &Path, n: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_edge_list(&text, n, &path.display().to_string())
    }

    pub fn parse_edge_list(text: &str, n: usize, label: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Ingest {
                path: label.to_string(),
                line: lineno + 1,
                msg,
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 2 {
                return Err(err(format!("expected `src<TAB>dst`, got {line:?}")));
            }
            let parse = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| err(format!("invalid node id {s:?}")))
            };
            let (s, d) = (parse(fields[0])?, parse(fields[1])?);
            if s >= n || d >= n {
                return Err(err(format!("node id out of range for {n} nodes")));
            }
            if s == d {
                return Err(err(format!("self-loop on {s}")));
            }
            pairs.push((s, d));
        }
        Self::from_edge_list(&pairs, n)
    }

    pub fn to_edge_list_string(&self) -> String {
        let mut out = String::from("# src\tdst\n");
        for &(s, d) in &self.edges {
            let _ = writeln!(out, "{s}\t{d}");
        }
        out
    }

    pub fn write_edge_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_edge_list_string())?;
        Ok(())
    }
}
