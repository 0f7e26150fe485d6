//! Residual-stream computation graph: nodes, letter-resolved sinks and edges.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use super::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Node {
    Input,
    Head { layer: usize, head: usize },
    Mlp { layer: usize },
    Logits,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Letter {
    Q,
    K,
    V,
}

impl Letter {
    pub const ALL: [Letter; 3] = [Letter::Q, Letter::K, Letter::V];

    pub fn as_char(self) -> char {
        match self {
            Letter::Q => 'q',
            Letter::K => 'k',
            Letter::V => 'v',
        }
    }
}

impl Node {
    pub fn layer(self) -> Option<usize> {
        match self {
            Node::Head { layer, .. } | Node::Mlp { layer } => Some(layer),
            Node::Input | Node::Logits => None,
        }
    }

    /// Position in the topological stage order: input, a0, m0, a1, m1, …, logits.
    pub fn stage(self, n_layers: usize) -> usize {
        match self {
            Node::Input => 0,
            Node::Head { layer, .. } => 2 * layer + 1,
            Node::Mlp { layer } => 2 * layer + 2,
            Node::Logits => 2 * n_layers + 1,
        }
    }

    /// Stage normalized to `[0, 1]`: input is 0, logits is 1.
    pub fn depth(self, n_layers: usize) -> f64 {
        self.stage(n_layers) as f64 / (2 * n_layers + 1) as f64
    }
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Node::Input => f.write_str("input"),
            Node::Head { layer, head } => write!(f, "a{layer}.h{head}"),
            Node::Mlp { layer } => write!(f, "m{layer}"),
            Node::Logits => f.write_str("logits"),
        }
    }
}

/// The input side of a node. Attention heads expose one sink per letter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SinkId {
    pub node: Node,
    pub letter: Option<Letter>,
}

impl fmt::Display for SinkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.letter {
            Some(l) => write!(f, "{}⟨{}⟩", self.node, l.as_char()),
            None => write!(f, "{}", self.node),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    /// Index into [`ComputationGraph::sources`].
    pub source: usize,
    /// Index into [`ComputationGraph::sinks`].
    pub sink: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComputationGraph {
    n_layers: usize,
    n_heads: usize,
    sources: Vec<Node>,
    sinks: Vec<SinkId>,
    edges: Vec<Edge>,
    /// For each sink: index of its first incoming edge.
    sink_offsets: Vec<usize>,
    /// For each sink: how many sources (a prefix of `sources`) feed it.
    sink_fan_in: Vec<usize>,
}

impl ComputationGraph {
    /// Enumerates the graph for an architecture.
    ///
    /// Edges are grouped by sink in topological order; within a sink the
    /// sources appear in topological order. A sink reads every source that is
    /// computed strictly before it, so heads of one layer do not feed each
    /// other and heads precede the MLP of their layer.
    pub fn build(cfg: &ModelConfig) -> Self {
        Self::with_shape(cfg.n_layers, cfg.n_heads)
    }

    pub fn with_shape(n_layers: usize, n_heads: usize) -> Self {
        let mut sources = Vec::new();
        let mut sinks = Vec::new();
        let mut sink_fan_in = Vec::new();
        sources.push(Node::Input);
        for layer in 0..n_layers {
            let available = sources.len();
            for head in 0..n_heads {
                for letter in Letter::ALL {
                    sinks.push(SinkId {
                        node: Node::Head { layer, head },
                        letter: Some(letter),
                    });
                    sink_fan_in.push(available);
                }
            }
            for head in 0..n_heads {
                sources.push(Node::Head { layer, head });
            }
            sinks.push(SinkId {
                node: Node::Mlp { layer },
                letter: None,
            });
            sink_fan_in.push(sources.len());
            sources.push(Node::Mlp { layer });
        }
        sinks.push(SinkId {
            node: Node::Logits,
            letter: None,
        });
        sink_fan_in.push(sources.len());

        let mut edges = Vec::new();
        let mut sink_offsets = Vec::with_capacity(sinks.len());
        for (sink, &fan_in) in sink_fan_in.iter().enumerate() {
            sink_offsets.push(edges.len());
            edges.extend((0..fan_in).map(|source| Edge { source, sink }));
        }
        ComputationGraph {
            n_layers,
            n_heads,
            sources,
            sinks,
            edges,
            sink_offsets,
            sink_fan_in,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn sources(&self) -> &[Node] {
        &self.sources
    }

    pub fn sinks(&self) -> &[SinkId] {
        &self.sinks
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// All nodes in topological order (sources followed by logits).
    pub fn nodes(&self) -> Vec<Node> {
        let mut v = self.sources.clone();
        v.push(Node::Logits);
        v
    }

    pub fn fan_in(&self, sink: usize) -> usize {
        self.sink_fan_in[sink]
    }

    /// Edges entering `sink`, as a contiguous index range.
    pub fn edges_into(&self, sink: usize) -> core::ops::Range<usize> {
        let start = self.sink_offsets[sink];
        start..start + self.sink_fan_in[sink]
    }

    pub fn edge_index(&self, source: usize, sink: usize) -> Option<usize> {
        (source < self.sink_fan_in.get(sink).copied()?).then(|| self.sink_offsets[sink] + source)
    }

    pub fn source_index(&self, node: Node) -> Option<usize> {
        self.sources.iter().position(|&n| n == node)
    }

    pub fn sink_index(&self, sink: SinkId) -> Option<usize> {
        self.sinks.iter().position(|&s| s == sink)
    }

    pub fn edge_source(&self, edge: usize) -> Node {
        self.sources[self.edges[edge].source]
    }

    pub fn edge_sink(&self, edge: usize) -> SinkId {
        self.sinks[self.edges[edge].sink]
    }

    /// Canonical rendering, e.g. `m6→a7.h2⟨v⟩` or `m10→logits`.
    pub fn edge_name(&self, edge: usize) -> String {
        format!("{}→{}", self.edge_source(edge), self.edge_sink(edge))
    }

    pub fn edge_by_name(&self, name: &str) -> Option<usize> {
        (0..self.edges.len()).find(|&e| self.edge_name(e) == name)
    }

    /// FNV-1a hash of the canonical edge list; identifies the graph in files.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for e in 0..self.edges.len() {
            for b in self.edge_name(e).bytes().chain(core::iter::once(b'\n')) {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}
