use std::collections::BTreeSet;

use super::thin::{neighbor_offsets, Skeleton};
use super::{GraphEdge, GraphNode, SkeletonGraph};
use crate::volume::{CoordTransform, Voxel};

const NONE: usize = usize::MAX;

struct Builder {
    voxels: Vec<Voxel>,
    nbrs: Vec<Vec<usize>>,
    node_of: Vec<usize>,
    visited: Vec<bool>,
    members: Vec<Vec<usize>>,
    edges: Vec<(usize, usize, Vec<usize>)>,
    direct: BTreeSet<(usize, usize)>,
}

impl Builder {
    fn new_node(&mut self, members: Vec<usize>) -> usize {
        let id = self.members.len();
        for &m in &members {
            self.node_of[m] = id;
        }
        self.members.push(members);
        id
    }

    fn direct_edge(&mut self, a: usize, b: usize) {
        if self.direct.insert((a.min(b), a.max(b))) {
            self.edges.push((a, b, Vec::new()));
        }
    }

    fn add_edge(&mut self, a: usize, b: usize, path: Vec<usize>) {
        if path.is_empty() {
            self.direct_edge(a, b);
        } else {
            self.edges.push((a, b, path));
        }
    }

    /// Follows the degree-2 chain starting at `first` (entered from `from`).
    fn walk(&mut self, from: usize, first: usize) -> (Option<usize>, Vec<usize>) {
        let mut path = vec![first];
        self.visited[first] = true;
        let (mut prev, mut cur) = (from, first);
        loop {
            let next = self.nbrs[cur].iter().copied().find(|&x| x != prev);
            let Some(next) = next else {
                return (None, path);
            };
            if self.node_of[next] != NONE {
                return (Some(self.node_of[next]), path);
            }
            if self.visited[next] {
                return (None, path);
            }
            self.visited[next] = true;
            path.push(next);
            prev = cur;
            cur = next;
        }
    }

    fn trace_from(&mut self, a: usize) {
        let members = self.members[a].clone();
        for m in members {
            let nbrs = self.nbrs[m].clone();
            for q in nbrs {
                let owner = self.node_of[q];
                if owner == a {
                    continue;
                }
                if owner != NONE {
                    if a < owner {
                        self.direct_edge(a, owner);
                    }
                    continue;
                }
                if self.visited[q] {
                    continue;
                }
                let (end, path) = self.walk(m, q);
                match end {
                    Some(b) if b != a => self.add_edge(a, b, path),
                    _ => {
                        // Loop back onto the start node: split at the middle voxel.
                        let mid = path.len() / 2;
                        let c = self.new_node(vec![path[mid]]);
                        self.add_edge(a, c, path[..mid].to_vec());
                        self.add_edge(c, a, path[mid + 1..].to_vec());
                    }
                }
            }
        }
    }
}

fn representative(voxels: &[Voxel], members: &[usize]) -> usize {
    let n = members.len() as f64;
    let centroid: [f64; 3] = std::array::from_fn(|a| members.iter().map(|&m| voxels[m][a] as f64).sum::<f64>() / n);
    let d2 = |m: usize| (0..3).map(|a| (voxels[m][a] as f64 - centroid[a]).powi(2)).sum::<f64>();
    *members.iter().min_by(|&&x, &&y| d2(x).partial_cmp(&d2(y)).unwrap().then(x.cmp(&y))).unwrap()
}

/// Builds the bifurcation/endpoint graph of a skeleton.
///
/// Nodes are voxels whose 26-neighbour count is not 2; adjacent junction
/// voxels merge into one node placed at the member nearest their centroid.
/// Each maximal chain of degree-2 voxels becomes one edge. Pure cycles get a
/// node at their first voxel in scan order, and any chain returning to its
/// own start node is split by a node at its middle voxel.
pub fn extract_graph(skel: &Skeleton, transform: &CoordTransform) -> SkeletonGraph {
    let voxels = skel.voxels();
    let n = voxels.len();
    let dims = skel.dims();
    let flat = |v: [i64; 3]| v[0] as usize + dims[0] * (v[1] as usize + dims[1] * v[2] as usize);
    let mut slot = vec![NONE; dims.iter().product()];
    for (i, v) in voxels.iter().enumerate() {
        slot[v[0] + dims[0] * (v[1] + dims[1] * v[2])] = i;
    }
    let nbrs: Vec<Vec<usize>> = voxels
        .iter()
        .map(|v| {
            neighbor_offsets()
                .iter()
                .filter_map(|o| {
                    let q = [v[0] as i64 + o[0], v[1] as i64 + o[1], v[2] as i64 + o[2]];
                    skel.contains(q).then(|| slot[flat(q)])
                })
                .collect()
        })
        .collect();

    let mut b = Builder {
        voxels,
        nbrs,
        node_of: vec![NONE; n],
        visited: vec![false; n],
        members: Vec::new(),
        edges: Vec::new(),
        direct: BTreeSet::new(),
    };

    for i in 0..n {
        let deg = b.nbrs[i].len();
        if deg == 2 || b.node_of[i] != NONE {
            continue;
        }
        let mut members = vec![i];
        if deg >= 3 {
            let mut stack = vec![i];
            let mut seen = BTreeSet::from([i]);
            while let Some(c) = stack.pop() {
                for &q in &b.nbrs[c] {
                    if b.nbrs[q].len() >= 3 && seen.insert(q) {
                        stack.push(q);
                    }
                }
            }
            members = seen.into_iter().collect();
        }
        b.new_node(members);
    }

    let mut a = 0;
    while a < b.members.len() {
        b.trace_from(a);
        a += 1;
    }
    for i in 0..n {
        if b.node_of[i] == NONE && !b.visited[i] {
            let c = b.new_node(vec![i]);
            while a < b.members.len() {
                b.trace_from(a);
                a += 1;
            }
            debug_assert!(c < a);
        }
    }

    let nodes = b
        .members
        .iter()
        .enumerate()
        .map(|(id, members)| {
            let rep = representative(&b.voxels, members);
            let voxel = b.voxels[rep];
            GraphNode {
                id,
                voxel,
                coord: transform.voxel_to_normalized(voxel),
                label: 0,
                members: if members.len() > 1 { members.iter().map(|&m| b.voxels[m]).collect() } else { Vec::new() },
            }
        })
        .collect();
    let edges = b
        .edges
        .iter()
        .enumerate()
        .map(|(id, (u, v, path))| GraphEdge {
            id,
            u: *u,
            v: *v,
            label: 0,
            path: path.iter().map(|&p| b.voxels[p]).collect(),
        })
        .collect();
    SkeletonGraph::new(nodes, edges).expect("extracted edges reference existing nodes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::thin;
    use crate::volume::LabelVolume;

    fn graph_of(dims: [usize; 3], voxels: &[Voxel]) -> SkeletonGraph {
        extract_graph(&Skeleton::from_voxels(dims, voxels), &CoordTransform::identity())
    }

    fn check_partition(g: &SkeletonGraph, skel_len: usize) {
        assert_eq!(g.voxel_count(), skel_len);
        let mut all: Vec<Voxel> = Vec::new();
        for n in &g.nodes {
            if n.members.is_empty() {
                all.push(n.voxel);
            } else {
                all.extend(&n.members);
            }
        }
        for e in &g.edges {
            all.extend(&e.path);
        }
        all.sort();
        all.dedup();
        assert_eq!(all.len(), skel_len, "every voxel owned exactly once");
    }

    #[test]
    fn straight_segment_is_two_nodes_one_edge() {
        let vox: Vec<Voxel> = (0..10).map(|x| [x + 1, 1, 1]).collect();
        let g = graph_of([12, 3, 3], &vox);
        assert_eq!(g.num_nodes(), 2);
        assert_eq!(g.num_edges(), 1);
        assert_eq!(g.edges[0].path.len(), 8);
        check_partition(&g, 10);
    }

    #[test]
    fn y_shape_has_three_tips_and_a_junction() {
        let c = [10usize, 10, 10];
        let mut vox = vec![c];
        for i in 1..=8 {
            vox.push([c[0] - i, c[1], c[2]]);
            vox.push([c[0] + i, c[1] + i, c[2]]);
            vox.push([c[0] + i, c[1] - i, c[2]]);
        }
        let g = graph_of([21, 21, 21], &vox);
        assert_eq!(g.num_nodes(), 4);
        assert_eq!(g.num_edges(), 3);
        let junction = g.nodes.iter().find(|n| n.voxel == c).unwrap();
        assert_eq!(g.degree(junction.id), 3);
        for e in &g.edges {
            assert_eq!(e.path.len(), 7);
        }
        check_partition(&g, vox.len());
    }

    #[test]
    fn empty_skeleton_gives_empty_graph() {
        let g = graph_of([4, 4, 4], &[]);
        assert!(g.is_empty());
        assert_eq!(g.num_edges(), 0);
    }

    #[test]
    fn pure_cycle_gets_nodes_and_no_self_loops() {
        // 8-voxel diamond in the z=1 plane; every voxel has two neighbours.
        let ring = [[3, 1, 1], [4, 2, 1], [5, 3, 1], [4, 4, 1], [3, 5, 1], [2, 4, 1], [1, 3, 1], [2, 2, 1]];
        let g = graph_of([7, 7, 3], &ring);
        assert_eq!(g.num_nodes(), 2);
        assert_eq!(g.num_edges(), 2);
        assert!(g.edges.iter().all(|e| e.u != e.v));
        assert_eq!(g.nodes[0].voxel, [3, 1, 1]);
        check_partition(&g, ring.len());
    }

    #[test]
    fn thick_junction_cluster_merges_into_one_node() {
        // Plus sign in a plane: centre and its four arms' first voxels all
        // have degree >= 3 under 26-adjacency.
        let mut vox = vec![[5usize, 5, 1]];
        for i in 1..=4 {
            vox.push([5 + i, 5, 1]);
            vox.push([5 - i, 5, 1]);
            vox.push([5, 5 + i, 1]);
            vox.push([5, 5 - i, 1]);
        }
        let g = graph_of([11, 11, 3], &vox);
        let tips = g.nodes.iter().filter(|n| g.degree(n.id) == 1).count();
        assert_eq!(tips, 4);
        let junctions: Vec<_> = g.nodes.iter().filter(|n| g.degree(n.id) >= 3).collect();
        assert_eq!(junctions.len(), 1);
        assert_eq!(junctions[0].voxel, [5, 5, 1]);
        check_partition(&g, vox.len());
    }

    #[test]
    fn thinned_tube_graph_partition_holds() {
        let mut v = LabelVolume::zeros([30, 11, 11], [1.0; 3], 1);
        for x in 2..28 {
            for y in 3..8 {
                for z in 3..8 {
                    if (y as i32 - 5).pow(2) + (z as i32 - 5).pow(2) <= 4 {
                        v.set([x, y, z], 1);
                    }
                }
            }
        }
        let skel = thin(&v);
        let g = extract_graph(&skel, &CoordTransform::identity());
        check_partition(&g, skel.len());
        for n in &g.nodes {
            assert_ne!(g.degree(n.id), 2);
        }
    }
}
