use crate::error::{Error, Result};

/// Edge list grouped by destination, used by the message-passing primitives.
///
/// Edge `e` carries a message from `src[e]` into `dst[e]`. Edges are sorted
/// by destination, then source, so the edges entering node `i` occupy
/// `offsets[i]..offsets[i + 1]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeIndex {
    n: usize,
    src: Vec<usize>,
    dst: Vec<usize>,
    offsets: Vec<usize>,
    self_edge: Vec<Option<usize>>,
}

impl EdgeIndex {
    /// Builds the index from `(src, dst)` pairs over `n` nodes.
    pub fn new(n: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut sorted: Vec<(usize, usize)> = Vec::with_capacity(pairs.len());
        for &(s, d) in pairs {
            if s >= n || d >= n {
                return Err(Error::Graph(format!(
                    "edge ({s}, {d}) out of range for {n} nodes"
                )));
            }
            sorted.push((d, s));
        }
        sorted.sort_unstable();
        sorted.dedup();
        let mut offsets = vec![0usize; n + 1];
        for &(d, _) in &sorted {
            offsets[d + 1] += 1;
        }
        for i in 0..n {
            offsets[i + 1] += offsets[i];
        }
        let dst: Vec<usize> = sorted.iter().map(|&(d, _)| d).collect();
        let src: Vec<usize> = sorted.iter().map(|&(_, s)| s).collect();
        let mut self_edge = vec![None; n];
        for (e, (&s, &d)) in src.iter().zip(&dst).enumerate() {
            if s == d {
                self_edge[d] = Some(e);
            }
        }
        Ok(Self {
            n,
            src,
            dst,
            offsets,
            self_edge,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    pub fn num_edges(&self) -> usize {
        self.src.len()
    }

    pub fn src(&self) -> &[usize] {
        &self.src
    }

    pub fn dst(&self) -> &[usize] {
        &self.dst
    }

    /// Edge positions entering node `i`.
    pub fn incoming(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn self_edge(&self, i: usize) -> Option<usize> {
        self.self_edge[i]
    }

    pub fn has_all_self_edges(&self) -> bool {
        self.self_edge.iter().all(Option::is_some)
    }
}
