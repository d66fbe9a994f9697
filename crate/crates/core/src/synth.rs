//! Procedural labeled branching-tube volumes.
//!
//! A tree is a trunk followed by `depth` levels of bifurcations. Each branch
//! is a two-piece polyline (slightly bent) swept with a linearly tapering
//! radius. The two children of a branch are deliberately unequal: the
//! "major" child is longer, thicker and deflects less, so branches keep
//! recognizable identities under rotation. Classes are split recursively
//! over the subtrees; the trunk alone carries the highest class `C`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{GraphEdge, GraphNode, SkeletonGraph};
use crate::volume::{make_transform, save_volume, LabelVolume, Voxel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchShape {
    /// Child length as a fraction of the parent's.
    pub length_ratio: [f64; 2],
    /// Child end radius as a fraction of the parent's end radius.
    pub radius_ratio: f64,
    /// Deflection from the parent direction, degrees.
    pub angle_deg: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeSpec {
    pub seed: u64,
    pub depth: usize,
    pub grid: usize,
    pub num_classes: u8,
    /// Trunk length as a fraction of the grid size.
    pub trunk_length: [f64; 2],
    /// Trunk start radius in voxels.
    pub trunk_radius: [f64; 2],
    /// Shortest branch, as a fraction of the grid size.
    pub min_length: f64,
    /// End radius over start radius along one branch.
    pub taper: f64,
    pub major: BranchShape,
    pub minor: BranchShape,
    /// Rotation of the bifurcation plane between levels, degrees.
    pub plane_twist_deg: [f64; 2],
    /// Lateral offset of a branch's midpoint, as a fraction of its length.
    pub bend: f64,
    pub min_radius: f64,
    pub max_retries: usize,
}

impl BranchShape {
    fn mid_length(&self) -> f64 {
        0.5 * (self.length_ratio[0] + self.length_ratio[1])
    }
}

impl Default for TreeSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            depth: 4,
            grid: 64,
            num_classes: 8,
            trunk_length: [0.17, 0.2],
            trunk_radius: [2.5, 3.0],
            min_length: 0.1,
            taper: 0.9,
            major: BranchShape { length_ratio: [0.85, 0.95], radius_ratio: 0.85, angle_deg: [10.0, 22.0] },
            minor: BranchShape { length_ratio: [0.55, 0.65], radius_ratio: 0.72, angle_deg: [45.0, 60.0] },
            plane_twist_deg: [75.0, 105.0],
            bend: 0.08,
            min_radius: 1.0,
            max_retries: 200,
        }
    }
}

impl TreeSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 1 {
            return bad("num_classes must be at least 1".into());
        }
        if self.depth > 0 {
            if self.num_classes < 2 {
                return bad("branching trees need at least 2 classes".into());
            }
            if self.depth < 63 && (1u64 << self.depth) < (self.num_classes as u64 - 1) {
                return bad(format!(
                    "depth {} has {} leaves, too few for {} branch classes",
                    self.depth,
                    1u64 << self.depth,
                    self.num_classes - 1
                ));
            }
        }
        if self.grid < 8 {
            return bad("grid must be at least 8".into());
        }
        for r in [self.trunk_length, self.trunk_radius, self.major.length_ratio, self.minor.length_ratio] {
            if !(r[0] > 0.0 && r[0] <= r[1]) {
                return bad(format!("invalid range {r:?}"));
            }
        }
        if !(self.major.radius_ratio > 0.0 && self.minor.radius_ratio > 0.0) {
            return bad("radius ratios must be positive".into());
        }
        if self.min_radius <= 0.0 || self.max_retries == 0 {
            return bad("min_radius and max_retries must be positive".into());
        }
        Ok(())
    }
}

type V3 = [f64; 3];

fn add(a: V3, b: V3) -> V3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}
fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}
fn mul(a: V3, s: f64) -> V3 {
    [a[0] * s, a[1] * s, a[2] * s]
}
fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}
fn cross(a: V3, b: V3) -> V3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}
fn norm(a: V3) -> V3 {
    mul(a, 1.0 / dot(a, a).sqrt())
}

/// Rotates `v` about unit axis `k` by `angle` radians.
fn rotate(v: V3, k: V3, angle: f64) -> V3 {
    let (s, c) = angle.sin_cos();
    add(add(mul(v, c), mul(cross(k, v), s)), mul(k, dot(k, v) * (1.0 - c)))
}

/// One branch of the generated tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub id: usize,
    pub parent: Option<usize>,
    pub level: usize,
    pub label: u8,
    pub start: V3,
    pub mid: V3,
    pub end: V3,
    pub radius_start: f64,
    pub radius_end: f64,
}

impl Branch {
    /// The two straight pieces as `(a, b, radius_a, radius_b)`.
    pub fn pieces(&self) -> [(V3, V3, f64, f64); 2] {
        let rm = 0.5 * (self.radius_start + self.radius_end);
        [(self.start, self.mid, self.radius_start, rm), (self.mid, self.end, rm, self.radius_end)]
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedTree {
    pub volume: LabelVolume,
    /// Centerline graph: nodes at the trunk top, bifurcations and tips.
    pub graph: SkeletonGraph,
    pub branches: Vec<Branch>,
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..=r[1])
    }
}

fn any_perpendicular(d: V3) -> V3 {
    let a = if d[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    norm(cross(d, a))
}

/// Class groups: the branch takes `classes[0]`; children split the list.
fn assign_labels(branches: &mut [Branch], children: &[Vec<usize>], b: usize, classes: &[u8]) {
    branches[b].label = classes[0];
    let ch = &children[b];
    if ch.is_empty() {
        return;
    }
    let (left, right) = if classes.len() == 1 { (classes, classes) } else { classes.split_at(classes.len() / 2) };
    assign_labels(branches, children, ch[0], left);
    assign_labels(branches, children, ch[1], right);
}

fn build_branches(spec: &TreeSpec, rng: &mut ChaCha8Rng) -> (Vec<Branch>, Vec<Vec<usize>>) {
    let g = spec.grid as f64;
    let trunk_len = uniform(rng, spec.trunk_length) * g;
    let r0 = uniform(rng, spec.trunk_radius);
    let tilt = rng.gen_range(0.0..0.12);
    let azimuth = rng.gen_range(0.0..std::f64::consts::TAU);
    let dir = norm([tilt * azimuth.cos(), tilt * azimuth.sin(), -1.0]);
    let start = [g * 0.5 + rng.gen_range(-0.05..0.05) * g, g * 0.5 + rng.gen_range(-0.05..0.05) * g, g - 3.0 - r0];
    // (start, direction, plane reference, length, start radius, level, parent)
    let mut queue = vec![(start, dir, any_perpendicular(dir), trunk_len, r0, 0usize, None::<usize>)];
    let mut branches: Vec<Branch> = Vec::new();
    let mut children: Vec<Vec<usize>> = Vec::new();
    let mut head = 0;
    while head < queue.len() {
        let (s, d, u, len, rs, level, parent) = queue[head];
        head += 1;
        let id = branches.len();
        let re = (rs * spec.taper).max(spec.min_radius);
        let end = add(s, mul(d, len));
        let bend_dir = rotate(u, d, rng.gen_range(0.0..std::f64::consts::TAU));
        let mid = add(mul(add(s, end), 0.5), mul(bend_dir, spec.bend * len * rng.gen_range(0.5..1.0)));
        branches.push(Branch {
            id,
            parent,
            level,
            label: 0,
            start: s,
            mid,
            end,
            radius_start: rs.max(spec.min_radius),
            radius_end: re,
        });
        children.push(Vec::new());
        if let Some(p) = parent {
            children[p].push(id);
        }
        if level == spec.depth {
            continue;
        }
        let out_dir = norm(sub(end, mid));
        let twist = uniform(rng, spec.plane_twist_deg).to_radians();
        let plane = norm(rotate(u, out_dir, twist));
        let plane = norm(sub(plane, mul(out_dir, dot(plane, out_dir))));
        // The floors would make deep siblings identical; the major child
        // keeps its nominal lead over the minor one instead.
        let (major, minor) = (&spec.major, &spec.minor);
        let minor_len = (len * uniform(rng, minor.length_ratio)).max(spec.min_length * g);
        let major_len =
            (len * uniform(rng, major.length_ratio)).max(minor_len * major.mid_length() / minor.mid_length());
        let minor_r = (re * minor.radius_ratio).max(spec.min_radius);
        let major_r = (re * major.radius_ratio).max(minor_r * major.radius_ratio / minor.radius_ratio);
        for (shape, sign, cl, cr) in [(major, 1.0, major_len, major_r), (minor, -1.0, minor_len, minor_r)] {
            let theta = uniform(rng, shape.angle_deg).to_radians();
            let cd = norm(add(mul(out_dir, theta.cos()), mul(plane, sign * theta.sin())));
            let cu = norm(sub(plane, mul(cd, dot(plane, cd))));
            queue.push((end, cd, cu, cl, cr, level + 1, Some(id)));
        }
    }
    (branches, children)
}

fn fits(spec: &TreeSpec, branches: &[Branch]) -> bool {
    let hi = spec.grid as f64 - 2.0;
    branches.iter().all(|b| {
        b.pieces().iter().all(|&(a, c, ra, rc)| {
            (0..3).all(|k| a[k] - ra >= 1.0 && a[k] + ra <= hi && c[k] - rc >= 1.0 && c[k] + rc <= hi)
        })
    })
}

/// Squared distance from `p` to segment `a→b` and the segment parameter.
fn segment_dist2(p: V3, a: V3, b: V3) -> (f64, f64) {
    let ab = sub(b, a);
    let l2 = dot(ab, ab);
    let t = if l2 == 0.0 { 0.0 } else { (dot(sub(p, a), ab) / l2).clamp(0.0, 1.0) };
    let q = add(a, mul(ab, t));
    let d = sub(p, q);
    (dot(d, d), t)
}

/// Sweeps the tubes and labels each covered voxel by its nearest axis piece
/// (ties to the smaller piece id).
fn rasterize(spec: &TreeSpec, branches: &[Branch]) -> LabelVolume {
    let n = spec.grid;
    let mut vol = LabelVolume::zeros([n; 3], [1.0; 3], spec.num_classes);
    let pieces: Vec<(V3, V3, f64, f64, u8)> = branches
        .iter()
        .flat_map(|b| b.pieces().into_iter().map(move |(a, c, ra, rc)| (a, c, ra, rc, b.label)))
        .collect();
    let rmax = pieces.iter().map(|p| p.2.max(p.3)).fold(0.0, f64::max);
    let mut best = vec![(f64::INFINITY, u8::MAX); n * n * n];
    let mut inside = vec![false; n * n * n];
    for &(a, c, ra, rc, label) in &pieces {
        let lo: [usize; 3] = std::array::from_fn(|k| (a[k].min(c[k]) - rmax).floor().max(0.0) as usize);
        let hi: [usize; 3] = std::array::from_fn(|k| ((a[k].max(c[k]) + rmax).ceil() as usize).min(n - 1));
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    let p = [x as f64, y as f64, z as f64];
                    let (d2, t) = segment_dist2(p, a, c);
                    let i = x + n * (y + n * z);
                    let r = ra + t * (rc - ra);
                    if d2 <= r * r {
                        inside[i] = true;
                    }
                    if d2 < best[i].0 {
                        best[i] = (d2, label);
                    }
                }
            }
        }
    }
    for i in 0..n * n * n {
        if inside[i] {
            let v = vol.voxel_of(i);
            vol.set(v, best[i].1);
        }
    }
    vol
}

fn round_voxel(p: V3, n: usize) -> Voxel {
    std::array::from_fn(|k| (p[k].round().max(0.0) as usize).min(n - 1))
}

fn centerline_graph(vol: &LabelVolume, branches: &[Branch], n: usize) -> Result<SkeletonGraph> {
    let transform = make_transform(vol)?;
    let node = |id: usize, p: V3, label: u8| {
        let voxel = round_voxel(p, n);
        GraphNode { id, voxel, coord: transform.voxel_to_normalized(voxel), label, members: Vec::new() }
    };
    // Node 0 is the trunk top; branch b ends at node b + 1.
    let mut nodes = vec![node(0, branches[0].start, branches[0].label)];
    let mut edges = Vec::new();
    for b in branches {
        nodes.push(node(b.id + 1, b.end, b.label));
        let u = b.parent.map_or(0, |p| p + 1);
        edges.push(GraphEdge { id: b.id, u, v: b.id + 1, label: b.label, path: Vec::new() });
    }
    SkeletonGraph::new(nodes, edges)
}

/// Deterministic tree for `spec.seed`; out-of-grid geometry is redrawn from
/// the next random stream, up to `max_retries` times.
pub fn generate_tree(spec: &TreeSpec) -> Result<GeneratedTree> {
    spec.validate()?;
    for attempt in 0..spec.max_retries {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(attempt as u64);
        let (mut branches, children) = build_branches(spec, &mut rng);
        if !fits(spec, &branches) {
            continue;
        }
        let c = spec.num_classes;
        branches[0].label = c;
        if let [a, b] = children[0][..] {
            let classes: Vec<u8> = (1..c).collect();
            let (l, r) = classes.split_at(classes.len() / 2);
            assign_labels(&mut branches, &children, a, l);
            assign_labels(&mut branches, &children, b, r);
        }
        let volume = rasterize(spec, &branches);
        let graph = centerline_graph(&volume, &branches, spec.grid)?;
        return Ok(GeneratedTree { volume, graph, branches });
    }
    Err(Error::GeometryRejected(spec.max_retries))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeEntry {
    pub id: usize,
    pub volume: String,
    pub graph: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub trees: Vec<TreeEntry>,
    pub split: Split,
    pub spec: TreeSpec,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

pub fn tree_seed(base_seed: u64, index: usize) -> u64 {
    base_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
}

/// 10% validation and 20% test (both rounded down), the rest training,
/// over a seeded shuffle of `0..n`.
pub fn split_ids(n: usize, base_seed: u64) -> Split {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(u64::MAX);
    let mut ids: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(ids.as_mut_slice(), &mut rng);
    let n_val = n / 10;
    let n_test = n / 5;
    let n_train = n - n_val - n_test;
    let mut split = Split {
        train: ids[..n_train].to_vec(),
        val: ids[n_train..n_train + n_val].to_vec(),
        test: ids[n_train + n_val..].to_vec(),
    };
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    split
}

/// Writes `n` trees plus `manifest.json` into `out_dir`.
pub fn generate_dataset(
    n: usize,
    base_seed: u64,
    spec: &TreeSpec,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let trees = (0..n)
        .into_par_iter()
        .map(|i| {
            let seed = tree_seed(base_seed, i);
            let tree = generate_tree(&TreeSpec { seed, ..spec.clone() })?;
            let volume = format!("tree_{i:03}.json");
            let graph = format!("tree_{i:03}_graph.json");
            save_volume(&tree.volume, out_dir.join(&volume))?;
            tree.graph.save(out_dir.join(&graph))?;
            Ok(TreeEntry { id: i, volume, graph, seed })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest { trees, split: split_ids(n, base_seed), spec: spec.clone() };
    let path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
