//! Exact nearest-neighbour and ball queries plus inverse-distance propagation.
//!
//! Every query is exact: results equal a brute-force scan ordered by
//! `(squared distance, point id)`, with distances computed the same way.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

pub type Point<T> = [T; 3];

const LEAF_SIZE: usize = 12;
const NONE: usize = usize::MAX;

#[inline]
pub fn dist2<T: Real>(a: &Point<T>, b: &Point<T>) -> T {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropagationConfig {
    pub k: usize,
    pub epsilon: f64,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self { k: 3, epsilon: 1e-9 }
    }
}

impl PropagationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("propagation k must be at least 1".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("propagation epsilon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct KdNode<T> {
    lo: Point<T>,
    hi: Point<T>,
    start: usize,
    end: usize,
    left: usize,
    right: usize,
}

/// Immutable kd-tree over a point set.
#[derive(Debug, Clone)]
pub struct SpatialIndex<T> {
    points: Vec<Point<T>>,
    order: Vec<usize>,
    nodes: Vec<KdNode<T>>,
}

/// A `(point id, distance)` pair returned by [`SpatialIndex::knn`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor<T> {
    pub id: usize,
    pub distance: T,
}

#[inline]
fn before<T: Real>(d: T, id: usize, other_d: T, other_id: usize) -> bool {
    d < other_d || (d == other_d && id < other_id)
}

impl<T: Real> SpatialIndex<T> {
    pub fn build(points: Vec<Point<T>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyPointSet);
        }
        if points.iter().any(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::NonFinite("point coordinates".into()));
        }
        let mut index = Self { order: (0..points.len()).collect(), points, nodes: Vec::new() };
        index.build_node(0, index.points.len());
        Ok(index)
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let mut lo = [T::infinity(); 3];
        let mut hi = [T::neg_infinity(); 3];
        for &i in &self.order[start..end] {
            let p = self.points[i];
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let id = self.nodes.len();
        self.nodes.push(KdNode { lo, hi, start, end, left: NONE, right: NONE });
        if end - start > LEAF_SIZE {
            let axis = (0..3).max_by(|&a, &b| (hi[a] - lo[a]).partial_cmp(&(hi[b] - lo[b])).unwrap()).unwrap();
            if hi[axis] > lo[axis] {
                let mid = start + (end - start) / 2;
                let points = &self.points;
                self.order[start..end].select_nth_unstable_by(mid - start, |&x, &y| {
                    points[x][axis].partial_cmp(&points[y][axis]).unwrap()
                });
                let left = self.build_node(start, mid);
                let right = self.build_node(mid, end);
                self.nodes[id].left = left;
                self.nodes[id].right = right;
            }
        }
        id
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point<T>] {
        &self.points
    }

    /// Conservative lower bound on the squared distance from `q` to a node box.
    #[inline]
    fn box_bound(&self, node: usize, q: &Point<T>) -> T {
        let n = &self.nodes[node];
        let mut s = T::zero();
        for a in 0..3 {
            let d = if q[a] < n.lo[a] {
                n.lo[a] - q[a]
            } else if q[a] > n.hi[a] {
                q[a] - n.hi[a]
            } else {
                T::zero()
            };
            s += d * d;
        }
        // Shave a few ulps so rounding can never prune an exact tie.
        s * (T::one() - T::epsilon() * T::from_f64_lossy(16.0))
    }

    /// The `k` nearest points, ascending by distance, ties broken by smaller id.
    pub fn knn(&self, q: &Point<T>, k: usize) -> Result<Vec<Neighbor<T>>> {
        if k > self.points.len() {
            return Err(Error::TooFewPoints { k, available: self.points.len() });
        }
        let mut best: Vec<(T, usize)> = Vec::with_capacity(k + 1);
        if k > 0 {
            self.knn_visit(0, q, k, &mut best);
        }
        Ok(best.into_iter().map(|(d2, id)| Neighbor { id, distance: d2.sqrt() }).collect())
    }

    fn knn_visit(&self, node: usize, q: &Point<T>, k: usize, best: &mut Vec<(T, usize)>) {
        let n = &self.nodes[node];
        if n.left == NONE {
            for &id in &self.order[n.start..n.end] {
                let d2 = dist2(q, &self.points[id]);
                if best.len() == k {
                    let (wd, wid) = best[k - 1];
                    if !before(d2, id, wd, wid) {
                        continue;
                    }
                    best.pop();
                }
                let pos = best.partition_point(|&(bd, bid)| before(bd, bid, d2, id));
                best.insert(pos, (d2, id));
            }
            return;
        }
        let (a, b) = (n.left, n.right);
        let (ba, bb) = (self.box_bound(a, q), self.box_bound(b, q));
        let (first, fb, second, sb) = if ba <= bb { (a, ba, b, bb) } else { (b, bb, a, ba) };
        for (child, bound) in [(first, fb), (second, sb)] {
            if best.len() == k && bound > best[k - 1].0 {
                continue;
            }
            self.knn_visit(child, q, k, best);
        }
    }

    /// Points with distance `<= radius`, the nearest `max_count` of them
    /// (ties by id), ascending by distance.
    pub fn ball_query(&self, q: &Point<T>, radius: T, max_count: usize) -> Vec<Neighbor<T>> {
        let mut found: Vec<(T, usize)> = Vec::new();
        let r2 = radius * radius * (T::one() + T::epsilon() * T::from_f64_lossy(16.0));
        let mut stack = vec![0usize];
        while let Some(node) = stack.pop() {
            if self.box_bound(node, q) > r2 {
                continue;
            }
            let n = &self.nodes[node];
            if n.left == NONE {
                for &id in &self.order[n.start..n.end] {
                    let d2 = dist2(q, &self.points[id]);
                    if d2.sqrt() <= radius {
                        found.push((d2, id));
                    }
                }
            } else {
                stack.push(n.left);
                stack.push(n.right);
            }
        }
        found.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap().then(x.1.cmp(&y.1)));
        found.truncate(max_count);
        found.into_iter().map(|(d2, id)| Neighbor { id, distance: d2.sqrt() }).collect()
    }

    pub fn ball_query_ids(&self, q: &Point<T>, radius: T, max_count: usize) -> Vec<usize> {
        self.ball_query(q, radius, max_count).into_iter().map(|n| n.id).collect()
    }
}

/// Normalized reciprocal-distance weights.
///
/// When any distance is `<= epsilon` the nearest such neighbour (first on
/// ties) receives weight 1 and all others 0.
pub fn idw_weights<T: Real>(distances: &[T], epsilon: T) -> Vec<T> {
    let mut hit: Option<usize> = None;
    for (j, &d) in distances.iter().enumerate() {
        if d <= epsilon && hit.is_none_or(|h| d < distances[h]) {
            hit = Some(j);
        }
    }
    if let Some(h) = hit {
        let mut w = vec![T::zero(); distances.len()];
        w[h] = T::one();
        return w;
    }
    let inv: Vec<T> = distances.iter().map(|&d| T::one() / d.max(epsilon)).collect();
    let total: T = inv.iter().copied().sum();
    inv.into_iter().map(|v| v / total).collect()
}

/// Inverse-distance weighted combination of `k` neighbour feature rows
/// (`neighbor_features` is row-major `k × dim`).
pub fn idw_propagate<T: Real>(
    neighbor_features: &[T],
    dim: usize,
    distances: &[T],
    cfg: &PropagationConfig,
) -> Result<Vec<T>> {
    if distances.is_empty() {
        return Err(Error::Shape("idw needs at least one neighbour".into()));
    }
    if neighbor_features.len() != distances.len() * dim {
        return Err(Error::Shape(format!(
            "{} feature values for {} neighbours of width {dim}",
            neighbor_features.len(),
            distances.len()
        )));
    }
    let w = idw_weights(distances, T::from_f64_lossy(cfg.epsilon));
    let mut out = vec![T::zero(); dim];
    for (j, &wj) in w.iter().enumerate() {
        if wj == T::zero() {
            continue;
        }
        for (o, &f) in out.iter_mut().zip(&neighbor_features[j * dim..(j + 1) * dim]) {
            *o += wj * f;
        }
    }
    Ok(out)
}

/// Sparse row-stochastic interpolation matrix: row `i` mixes source rows
/// `indices[offsets[i]..offsets[i+1]]` with the matching `weights`.
#[derive(Debug, Clone, PartialEq)]
pub struct Interpolation<T> {
    pub offsets: Vec<usize>,
    pub indices: Vec<usize>,
    pub weights: Vec<T>,
}

impl<T: Real> Interpolation<T> {
    pub fn rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn row(&self, i: usize) -> (&[usize], &[T]) {
        let r = self.offsets[i]..self.offsets[i + 1];
        (&self.indices[r.clone()], &self.weights[r])
    }

    /// Applies the plan to row-major `src` with `dim` columns.
    pub fn apply(&self, src: &[T], dim: usize) -> Vec<T> {
        let mut out = vec![T::zero(); self.rows() * dim];
        for (r, o) in out.chunks_exact_mut(dim.max(1)).enumerate().take(self.rows()) {
            let (ids, ws) = self.row(r);
            for (&j, &w) in ids.iter().zip(ws) {
                for (ov, &sv) in o.iter_mut().zip(&src[j * dim..(j + 1) * dim]) {
                    *ov += w * sv;
                }
            }
        }
        out
    }

    /// Each output row is the plain average of the listed source rows.
    pub fn mean_of(groups: &[Vec<usize>]) -> Self {
        let mut offsets = vec![0];
        let mut indices = Vec::new();
        let mut weights = Vec::new();
        for g in groups {
            let w = T::one() / T::from_usize(g.len().max(1)).unwrap();
            for &i in g {
                indices.push(i);
                weights.push(w);
            }
            offsets.push(indices.len());
        }
        Self { offsets, indices, weights }
    }

    /// One-hot selection of source rows.
    pub fn select(rows: &[usize]) -> Self {
        Self { offsets: (0..=rows.len()).collect(), indices: rows.to_vec(), weights: vec![T::one(); rows.len()] }
    }
}

/// IDW interpolation plan from `index` points onto `queries` using the
/// `min(k, index.len())` nearest neighbours of each query.
pub fn idw_plan<T: Real>(index: &SpatialIndex<T>, queries: &[Point<T>], cfg: &PropagationConfig) -> Interpolation<T> {
    let k = cfg.k.min(index.len());
    let eps = T::from_f64_lossy(cfg.epsilon);
    let rows: Vec<(Vec<usize>, Vec<T>)> = queries
        .par_iter()
        .map(|q| {
            let nn = index.knn(q, k).expect("k clamped to index size");
            let d: Vec<T> = nn.iter().map(|n| n.distance).collect();
            (nn.iter().map(|n| n.id).collect(), idw_weights(&d, eps))
        })
        .collect();
    let mut offsets = Vec::with_capacity(rows.len() + 1);
    offsets.push(0);
    let mut indices = Vec::with_capacity(rows.len() * k);
    let mut weights = Vec::with_capacity(rows.len() * k);
    for (ids, w) in rows {
        indices.extend(ids);
        weights.extend(w);
        offsets.push(indices.len());
    }
    Interpolation { offsets, indices, weights }
}
