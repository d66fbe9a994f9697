//! Point-set and skeleton-graph encoders producing the initial features.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Groups, Var};
use super::layers::{GatLayer, Linear, Mlp};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::spatial::{dist2, idw_plan, Interpolation, Point, PropagationConfig, SpatialIndex};

/// One set-abstraction level: `M / ratio` centroids, each pooling at most
/// `max_points` points of the previous level within `radius`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaLevel {
    pub ratio: usize,
    pub radius: f64,
    pub max_points: usize,
    pub widths: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub point_levels: Vec<SaLevel>,
    /// Widths of each feature-propagation MLP on the way back up.
    pub fp_widths: Vec<usize>,
    pub graph_layers: usize,
    pub heads: usize,
    pub head_width: usize,
    pub out_width: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            point_levels: vec![
                SaLevel { ratio: 8, radius: 0.1, max_points: 32, widths: vec![32, 64] },
                SaLevel { ratio: 32, radius: 0.2, max_points: 32, widths: vec![64, 128] },
            ],
            fp_widths: vec![128, 128],
            graph_layers: 11,
            heads: 4,
            head_width: 32,
            out_width: 128,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.point_levels.is_empty() {
            return bad("point encoder needs at least one level");
        }
        if self.point_levels.iter().any(|l| l.ratio == 0 || l.max_points == 0 || l.widths.is_empty() || l.radius <= 0.0)
        {
            return bad("set-abstraction levels need ratio, max_points, radius and widths > 0");
        }
        if self.fp_widths.last() != Some(&self.out_width) {
            return bad("last feature-propagation width must equal out_width");
        }
        if self.graph_layers == 0 || self.heads * self.head_width != self.out_width {
            return bad("graph encoder needs >= 1 layer and heads * head_width == out_width");
        }
        Ok(())
    }

    /// Smallest point count the point encoder accepts.
    pub fn min_points(&self) -> usize {
        self.point_levels.iter().map(|l| l.ratio).max().unwrap_or(1)
    }
}

/// Farthest-point sampling starting at index 0; ties pick the smaller id.
pub fn farthest_point_sample<T: Real>(points: &[Point<T>], n: usize) -> Result<Vec<usize>> {
    if n > points.len() {
        return Err(Error::TooFewPoints { k: n, available: points.len() });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut chosen = Vec::with_capacity(n);
    let mut best = vec![T::infinity(); points.len()];
    let mut cur = 0;
    for _ in 0..n {
        chosen.push(cur);
        let c = points[cur];
        let mut next = 0;
        let mut far = T::neg_infinity();
        for (j, (b, p)) in best.iter_mut().zip(points).enumerate() {
            let d = dist2(&c, p);
            if d < *b {
                *b = d;
            }
            if *b > far {
                far = *b;
                next = j;
            }
        }
        cur = next;
    }
    Ok(chosen)
}

struct LevelPlan<T> {
    /// Rows of the previous level's features feeding each group member.
    gather: Arc<Interpolation<T>>,
    /// Member position relative to its centroid, one row per group member.
    rel: Tensor<T>,
    pool: Groups,
}

/// Input-dependent structure of one point-encoder pass: sampled centroids,
/// ball groups, and upsampling weights. Reusable across forward passes on
/// the same coordinates.
pub struct PointPlan<T> {
    coords: Tensor<T>,
    levels: Vec<LevelPlan<T>>,
    /// `ups[i]` interpolates level `i + 1` centroid features onto level `i`.
    ups: Vec<Arc<Interpolation<T>>>,
    /// Centroid indices into the input points, per level.
    pub centroids: Vec<Vec<usize>>,
}

impl<T: Real> PointPlan<T> {
    pub fn new(points: &[Point<T>], cfg: &EncoderConfig) -> Result<Self> {
        let m = points.len();
        if m == 0 {
            return Err(Error::EmptyPointSet);
        }
        let prop = PropagationConfig::default();
        let mut src: Vec<Point<T>> = points.to_vec();
        let mut src_ids: Vec<usize> = (0..m).collect();
        let mut src_index = SpatialIndex::build(src.clone())?;
        let mut levels = Vec::new();
        let mut ups = Vec::new();
        let mut centroids = Vec::new();
        for lvl in &cfg.point_levels {
            let n = m / lvl.ratio;
            if n == 0 || n > src.len() {
                return Err(Error::TooFewPoints { k: lvl.ratio.max(n), available: m });
            }
            let picked = farthest_point_sample(&src, n)?;
            let radius = T::from_f64_lossy(lvl.radius);
            let mut members = Vec::new();
            let mut offsets = vec![0];
            let mut rel = Vec::new();
            for &c in &picked {
                let cp = src[c];
                for j in src_index.ball_query_ids(&cp, radius, lvl.max_points) {
                    members.push(j);
                    rel.push([src[j][0] - cp[0], src[j][1] - cp[1], src[j][2] - cp[2]]);
                }
                offsets.push(members.len());
            }
            let pool = Groups { offsets, indices: (0..members.len()).collect() };
            let next: Vec<Point<T>> = picked.iter().map(|&c| src[c]).collect();
            let next_index = SpatialIndex::build(next.clone())?;
            ups.push(Arc::new(idw_plan(&next_index, &src, &prop)));
            levels.push(LevelPlan {
                gather: Arc::new(Interpolation::select(&members)),
                rel: Tensor::from_points(&rel),
                pool,
            });
            src_ids = picked.iter().map(|&c| src_ids[c]).collect();
            centroids.push(src_ids.clone());
            src = next;
            src_index = next_index;
        }
        Ok(Self { coords: Tensor::from_points(points), levels, ups, centroids })
    }

    pub fn num_points(&self) -> usize {
        self.coords.rows()
    }
}

/// Hierarchical set-abstraction encoder with inverse-distance upsampling.
#[derive(Debug, Clone)]
pub struct PointEncoder {
    sa: Vec<Mlp>,
    fp: Vec<Mlp>,
    /// Per-point classifier used when the encoder is trained on its own.
    pub seg_head: Linear,
    pub out_width: usize,
}

impl PointEncoder {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &EncoderConfig,
        num_classes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut sa = Vec::new();
        let mut level_widths = Vec::new();
        let mut prev = 0;
        for (i, lvl) in cfg.point_levels.iter().enumerate() {
            let mut dims = vec![3 + prev];
            dims.extend(&lvl.widths);
            sa.push(Mlp::new(store, &format!("{name}.sa{i}"), &dims, true, rng)?);
            prev = *lvl.widths.last().unwrap();
            level_widths.push(prev);
        }
        let mut fp = Vec::new();
        let mut cur = prev;
        for i in (0..cfg.point_levels.len()).rev() {
            let skip = if i == 0 { 3 } else { level_widths[i - 1] };
            let mut dims = vec![cur + skip];
            dims.extend(&cfg.fp_widths);
            fp.push(Mlp::new(store, &format!("{name}.fp{i}"), &dims, true, rng)?);
            cur = cfg.out_width;
        }
        let seg_head = Linear::new(store, &format!("{name}.seg"), cfg.out_width, num_classes, rng)?;
        Ok(Self { sa, fp, seg_head, out_width: cfg.out_width })
    }

    /// Per-point features, `M × out_width`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, plan: &PointPlan<T>) -> Result<Var> {
        let mut level_feats: Vec<Var> = Vec::new();
        for (lp, mlp) in plan.levels.iter().zip(&self.sa) {
            let rel = g.input(lp.rel.clone());
            let x = match level_feats.last() {
                Some(&f) => {
                    let gathered = g.interp(f, lp.gather.clone())?;
                    g.concat(&[rel, gathered])?
                }
                None => rel,
            };
            let h = mlp.forward(g, store, x)?;
            level_feats.push(g.max_pool(h, &lp.pool)?);
        }
        let mut cur = *level_feats.last().unwrap();
        for (step, mlp) in self.fp.iter().enumerate() {
            let i = plan.levels.len() - 1 - step;
            let up = g.interp(cur, plan.ups[i].clone())?;
            let skip = if i == 0 { g.input(plan.coords.clone()) } else { level_feats[i - 1] };
            let x = g.concat(&[up, skip])?;
            cur = mlp.forward(g, store, x)?;
        }
        Ok(cur)
    }
}

/// Stack of graph-attention layers over node coordinates, with residual
/// connections wherever input and output widths agree and ELU after each
/// layer.
#[derive(Debug, Clone)]
pub struct GraphEncoder {
    layers: Vec<GatLayer>,
    pub seg_head: Linear,
    pub out_width: usize,
}

impl GraphEncoder {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &EncoderConfig,
        num_classes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut layers = Vec::new();
        let mut prev = 3;
        for i in 0..cfg.graph_layers {
            layers.push(GatLayer::new(store, &format!("{name}.gat{i}"), prev, cfg.heads, cfg.head_width, rng)?);
            prev = cfg.out_width;
        }
        let seg_head = Linear::new(store, &format!("{name}.seg"), cfg.out_width, num_classes, rng)?;
        Ok(Self { layers, seg_head, out_width: cfg.out_width })
    }

    /// Node features, `N × out_width`, from node coordinates (`N × 3`).
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        coords: Var,
        adj: &Arc<Groups>,
    ) -> Result<Var> {
        let mut x = coords;
        for layer in &self.layers {
            let mut y = layer.forward(g, store, x, adj)?;
            if g.shape(y) == g.shape(x) {
                y = g.add(y, x)?;
            }
            x = g.elu(y);
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            point_levels: vec![
                SaLevel { ratio: 4, radius: 0.4, max_points: 8, widths: vec![8] },
                SaLevel { ratio: 16, radius: 0.8, max_points: 8, widths: vec![8] },
            ],
            fp_widths: vec![8],
            graph_layers: 2,
            heads: 2,
            head_width: 4,
            out_width: 8,
        }
    }

    fn cloud(rng: &mut ChaCha8Rng, m: usize) -> Vec<Point<f64>> {
        (0..m).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect()
    }

    #[test]
    fn fps_matches_brute_force_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts = cloud(&mut rng, 50);
        let got = farthest_point_sample(&pts, 10).unwrap();
        let mut want = vec![0usize];
        while want.len() < 10 {
            let score = |j: usize| want.iter().map(|&c| dist2(&pts[c], &pts[j])).fold(f64::INFINITY, f64::min);
            let next = (0..pts.len()).fold(0, |b, j| if score(j) > score(b) { j } else { b });
            want.push(next);
        }
        assert_eq!(got, want);
        assert!(farthest_point_sample(&pts, 51).is_err());
    }

    #[test]
    fn identical_points_give_identical_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = small_cfg();
        let mut store = ParamStore::<f64>::new();
        let enc = PointEncoder::new(&mut store, "point", &cfg, 4, &mut rng).unwrap();
        let pts = vec![[0.25, -0.5, 0.1]; 32];
        let plan = PointPlan::new(&pts, &cfg).unwrap();
        let mut g = Graph::new();
        let out = enc.forward(&mut g, &store, &plan).unwrap();
        let v = g.value(out);
        assert_eq!(v.shape(), [32, 8]);
        for r in 1..32 {
            assert_eq!(v.row(r), v.row(0));
        }
    }

    #[test]
    fn permuted_input_permutes_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = small_cfg();
        let mut store = ParamStore::<f64>::new();
        let enc = PointEncoder::new(&mut store, "point", &cfg, 4, &mut rng).unwrap();
        let pts = cloud(&mut rng, 64);
        // Keep point 0 in place: sampling starts there.
        let mut perm: Vec<usize> = (1..64).collect();
        perm.reverse();
        perm.insert(0, 0);
        let shuffled: Vec<_> = perm.iter().map(|&i| pts[i]).collect();
        let run = |p: &[Point<f64>]| {
            let plan = PointPlan::new(p, &cfg).unwrap();
            let mut g = Graph::new();
            let out = enc.forward(&mut g, &store, &plan).unwrap();
            g.value(out).clone()
        };
        let a = run(&pts);
        let b = run(&shuffled);
        for (new, &old) in perm.iter().enumerate() {
            assert_eq!(b.row(new), a.row(old));
        }
    }

    #[test]
    fn too_few_points_is_an_error() {
        let cfg = small_cfg();
        let pts = vec![[0.0; 3]; 15];
        assert!(matches!(PointPlan::<f64>::new(&pts, &cfg), Err(Error::TooFewPoints { .. })));
    }

    #[test]
    fn default_config_produces_128_wide_features_for_6000_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = EncoderConfig::default();
        let mut store = ParamStore::<f32>::new();
        let enc = PointEncoder::new(&mut store, "point", &cfg, 19, &mut rng).unwrap();
        let pts: Vec<Point<f32>> =
            (0..6000).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
        let plan = PointPlan::new(&pts, &cfg).unwrap();
        assert_eq!(plan.centroids[0].len(), 750);
        assert_eq!(plan.centroids[1].len(), 187);
        let mut g = Graph::new();
        let out = enc.forward(&mut g, &store, &plan).unwrap();
        assert_eq!(g.shape(out), [6000, 128]);
        assert!(g.value(out).all_finite());
    }

    #[test]
    fn graph_encoder_output_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = small_cfg();
        let mut store = ParamStore::<f64>::new();
        let enc = GraphEncoder::new(&mut store, "graph", &cfg, 4, &mut rng).unwrap();
        let adj = Arc::new(Groups::from_lists(&[vec![0, 1], vec![0, 1, 2], vec![1, 2]]));
        let mut g = Graph::new();
        let x = g.input(Tensor::from_points(&cloud(&mut rng, 3)));
        let out = enc.forward(&mut g, &store, x, &adj).unwrap();
        assert_eq!(g.shape(out), [3, 8]);
    }
}
