//! Skeleton graphs: thinning, graph extraction and label recovery.

mod extract;
mod thin;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{make_transform, LabelVolume, Voxel};

pub use extract::extract_graph;
pub use thin::{is_deletable, is_simple, thin, Skeleton};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: usize,
    /// Representative voxel.
    pub voxel: Voxel,
    /// Normalized model-space position of `voxel`.
    pub coord: [f64; 3],
    pub label: u8,
    /// All skeleton voxels merged into this node; more than one only for
    /// junction clusters.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub members: Vec<Voxel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub id: usize,
    pub u: usize,
    pub v: usize,
    pub label: u8,
    /// Interior voxels from the `u` end to the `v` end, endpoints excluded.
    pub path: Vec<Voxel>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SkeletonGraph {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
    #[serde(skip)]
    adjacency: Vec<Vec<usize>>,
}

impl SkeletonGraph {
    pub fn new(nodes: Vec<GraphNode>, edges: Vec<GraphEdge>) -> Result<Self> {
        let mut adjacency = vec![Vec::new(); nodes.len()];
        for e in &edges {
            for n in [e.u, e.v] {
                if n >= nodes.len() {
                    return Err(Error::DanglingEdge { edge: e.id, node: n });
                }
            }
            if e.u == e.v {
                return Err(Error::Invalid(format!("edge {} is a self-loop", e.id)));
            }
            adjacency[e.u].push(e.v);
            adjacency[e.v].push(e.u);
        }
        for a in &mut adjacency {
            a.sort_unstable();
        }
        Ok(Self { nodes, edges, adjacency })
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Neighbour list per node; parallel edges appear once per edge.
    pub fn adjacency(&self) -> &[Vec<usize>] {
        &self.adjacency
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adjacency[node].len()
    }

    /// Sorted, de-duplicated neighbour lists with a self-loop on every node.
    pub fn attention_adjacency(&self) -> Vec<Vec<usize>> {
        self.adjacency
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let mut s: BTreeSet<usize> = a.iter().copied().collect();
                s.insert(i);
                s.into_iter().collect()
            })
            .collect()
    }

    pub fn node_coords(&self) -> Vec<[f64; 3]> {
        self.nodes.iter().map(|n| n.coord).collect()
    }

    pub fn node_labels(&self) -> Vec<u8> {
        self.nodes.iter().map(|n| n.label).collect()
    }

    pub fn edge_labels(&self) -> Vec<u8> {
        self.edges.iter().map(|e| e.label).collect()
    }

    pub fn edge_endpoints(&self) -> Vec<[usize; 2]> {
        self.edges.iter().map(|e| [e.u, e.v]).collect()
    }

    /// Total voxels owned by nodes (cluster members) and edge paths.
    pub fn voxel_count(&self) -> usize {
        let nodes: usize = self.nodes.iter().map(|n| n.members.len().max(1)).sum();
        nodes + self.edges.iter().map(|e| e.path.len()).sum::<usize>()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: SkeletonGraph = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        SkeletonGraph::new(raw.nodes, raw.edges)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self).expect("graph serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Smallest class with the highest count; `None` on empty input.
pub fn majority_label(labels: impl IntoIterator<Item = u8>) -> Option<u8> {
    let mut counts = [0usize; 256];
    let mut any = false;
    for l in labels {
        counts[l as usize] += 1;
        any = true;
    }
    if !any {
        return None;
    }
    let mut best = 0;
    for l in 1..256 {
        if counts[l] > counts[best] {
            best = l;
        }
    }
    Some(best as u8)
}

/// Labels nodes from their voxel and edges by majority over their path.
///
/// Edges with an empty path take the majority of their two endpoint labels.
pub fn recover_labels(mut graph: SkeletonGraph, vol: &LabelVolume) -> Result<SkeletonGraph> {
    let read = |v: Voxel| -> Result<u8> {
        if (0..3).any(|a| v[a] >= vol.dims()[a]) {
            return Err(Error::VoxelOnBackground(v));
        }
        match vol.get(v) {
            0 => Err(Error::VoxelOnBackground(v)),
            l => Ok(l),
        }
    };
    for node in &mut graph.nodes {
        for &m in &node.members {
            read(m)?;
        }
        node.label = read(node.voxel)?;
    }
    for i in 0..graph.edges.len() {
        let labels = graph.edges[i].path.iter().map(|&v| read(v)).collect::<Result<Vec<u8>>>()?;
        let label = if labels.is_empty() {
            let e = &graph.edges[i];
            majority_label([graph.nodes[e.u].label, graph.nodes[e.v].label])
        } else {
            majority_label(labels)
        };
        graph.edges[i].label = label.expect("non-empty label list");
    }
    Ok(graph)
}

/// Thin, extract and label: the full preprocessing for one volume.
pub fn skeletonize(vol: &LabelVolume) -> Result<SkeletonGraph> {
    let transform = make_transform(vol)?;
    let skel = thin(vol);
    let graph = extract_graph(&skel, &transform);
    recover_labels(graph, vol)
}
