//! Point-graph fusion backbone with point, node and edge heads.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    EncoderConfig, GatLayer, Graph, GraphEncoder, Groups, Linear, Mlp, ParamStore, PointEncoder, PointPlan, Tensor, Var,
};
use crate::scalar::Real;
use crate::spatial::{idw_plan, Interpolation, Point, PropagationConfig, SpatialIndex};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub num_layers: usize,
    pub width: usize,
    pub ball_radius: f64,
    pub max_ball_points: usize,
    pub k: usize,
    pub num_classes: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { num_layers: 3, width: 128, ball_radius: 0.1, max_ball_points: 24, k: 3, num_classes: 19 }
    }
}

impl FusionConfig {
    pub fn validate(&self, enc: &EncoderConfig) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::Config("fusion needs at least one layer".into()));
        }
        if self.width != enc.out_width {
            return Err(Error::Config(format!(
                "fusion width {} differs from encoder output width {}",
                self.width, enc.out_width
            )));
        }
        if !self.width.is_multiple_of(enc.heads) {
            return Err(Error::Config("fusion width must be divisible by the head count".into()));
        }
        if self.k == 0 || self.max_ball_points == 0 || self.ball_radius <= 0.0 || self.num_classes == 0 {
            return Err(Error::Config("fusion k, ball size, radius and classes must be positive".into()));
        }
        Ok(())
    }

    pub fn propagation(&self) -> PropagationConfig {
        PropagationConfig { k: self.k, ..PropagationConfig::default() }
    }
}

/// In-ball point ids per node: at most `cap` points within `radius`,
/// nearest first; an empty ball falls back to the single nearest point.
pub fn ball_groups<T: Real>(
    index: &SpatialIndex<T>,
    nodes: &[Point<T>],
    radius: T,
    cap: usize,
) -> Result<Vec<Vec<usize>>> {
    nodes
        .iter()
        .map(|c| {
            let ids = index.ball_query_ids(c, radius, cap);
            if ids.is_empty() {
                Ok(vec![index.knn(c, 1)?[0].id])
            } else {
                Ok(ids)
            }
        })
        .collect()
}

/// Input-dependent neighbourhood structure for one backbone pass.
pub struct Prepared<T> {
    pub point_plan: PointPlan<T>,
    pub node_coords: Tensor<T>,
    pub adjacency: Arc<Groups>,
    /// Points pooled into each node.
    pub ball: Groups,
    /// Node features interpolated onto points.
    pub node_to_point: Arc<Interpolation<T>>,
    /// Average of the two endpoint rows per edge.
    pub edge_mean: Arc<Interpolation<T>>,
    pub num_edges: usize,
}

impl<T: Real> Prepared<T> {
    /// `adjacency` must list every node's neighbours including itself.
    pub fn new(
        points: &[Point<T>],
        nodes: &[Point<T>],
        adjacency: &[Vec<usize>],
        edges: &[[usize; 2]],
        enc: &EncoderConfig,
        cfg: &FusionConfig,
    ) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::EmptyGraph);
        }
        if adjacency.len() != nodes.len() {
            return Err(Error::Shape(format!("{} adjacency lists for {} nodes", adjacency.len(), nodes.len())));
        }
        for (i, e) in edges.iter().enumerate() {
            if let Some(&n) = e.iter().find(|&&n| n >= nodes.len()) {
                return Err(Error::DanglingEdge { edge: i, node: n });
            }
        }
        let point_plan = PointPlan::new(points, enc)?;
        let point_index = SpatialIndex::build(points.to_vec())?;
        let node_index = SpatialIndex::build(nodes.to_vec())?;
        let ball = Groups::from_lists(&ball_groups(
            &point_index,
            nodes,
            T::from_f64_lossy(cfg.ball_radius),
            cfg.max_ball_points,
        )?);
        let node_to_point = Arc::new(idw_plan(&node_index, points, &cfg.propagation()));
        let edge_mean = Arc::new(Interpolation::mean_of(&edges.iter().map(|e| e.to_vec()).collect::<Vec<_>>()));
        Ok(Self {
            point_plan,
            node_coords: Tensor::from_points(nodes),
            adjacency: Arc::new(Groups::from_lists(adjacency)),
            ball,
            node_to_point,
            edge_mean,
            num_edges: edges.len(),
        })
    }

    pub fn num_points(&self) -> usize {
        self.point_plan.num_points()
    }

    pub fn num_nodes(&self) -> usize {
        self.node_coords.rows()
    }
}

/// One point-to-graph plus graph-to-point exchange.
#[derive(Debug, Clone)]
pub struct FusionLayer {
    pub f1: Mlp,
    pub gat: GatLayer,
    pub f2: Mlp,
}

impl FusionLayer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            f1: Mlp::new(store, &format!("{name}.f1"), &[width, width, width], true, rng)?,
            gat: GatLayer::new(store, &format!("{name}.gat"), 2 * width, heads, width / heads, rng)?,
            f2: Mlp::new(store, &format!("{name}.f2"), &[2 * width, width, width], true, rng)?,
        })
    }

    /// Column-wise max of `F1` over each node's in-ball points.
    pub fn pooled_node_features<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        p_prev: Var,
        prep: &Prepared<T>,
    ) -> Result<Var> {
        let h = self.f1.forward(g, store, p_prev)?;
        g.max_pool(h, &prep.ball)
    }

    /// Graph convolution over `[pooled, g_prev]`, then ReLU.
    pub fn node_update<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        pooled: Var,
        g_prev: Var,
        prep: &Prepared<T>,
    ) -> Result<Var> {
        let x = g.concat(&[pooled, g_prev])?;
        let y = self.gat.forward(g, store, x, &prep.adjacency)?;
        Ok(g.relu(y))
    }

    pub fn point_to_graph<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        p_prev: Var,
        g_prev: Var,
        prep: &Prepared<T>,
    ) -> Result<Var> {
        let pooled = self.pooled_node_features(g, store, p_prev, prep)?;
        self.node_update(g, store, pooled, g_prev, prep)
    }

    /// `F2([idw(g_prev), p_prev])` per point.
    pub fn graph_to_point<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        p_prev: Var,
        g_prev: Var,
        prep: &Prepared<T>,
    ) -> Result<Var> {
        let fp = g.interp(g_prev, prep.node_to_point.clone())?;
        let x = g.concat(&[fp, p_prev])?;
        self.f2.forward(g, store, x)
    }
}

/// Handles into the forward graph for one backbone pass.
#[derive(Debug, Clone)]
pub struct PgnOutput {
    pub point_logits: Var,
    pub node_logits: Var,
    /// `None` when the graph has no edges.
    pub edge_logits: Option<Var>,
    pub point_stages: Vec<Var>,
    pub node_stages: Vec<Var>,
}

#[derive(Debug)]
pub struct Pgn {
    pub encoder_cfg: EncoderConfig,
    pub cfg: FusionConfig,
    pub point_encoder: PointEncoder,
    pub graph_encoder: GraphEncoder,
    pub layers: Vec<FusionLayer>,
    pub point_head: Mlp,
    pub node_gat: GatLayer,
    pub node_out: Linear,
    pub edge_head: Mlp,
    invocations: AtomicUsize,
}

pub const POINT_ENCODER: &str = "point";
pub const GRAPH_ENCODER: &str = "graph";

impl Pgn {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        encoder_cfg: &EncoderConfig,
        cfg: &FusionConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate(encoder_cfg)?;
        let c = cfg.num_classes;
        let d = cfg.width;
        let point_encoder = PointEncoder::new(store, POINT_ENCODER, encoder_cfg, c, rng)?;
        let graph_encoder = GraphEncoder::new(store, GRAPH_ENCODER, encoder_cfg, c, rng)?;
        let layers = (0..cfg.num_layers)
            .map(|i| FusionLayer::new(store, &format!("fuse{i}"), d, encoder_cfg.heads, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            encoder_cfg: encoder_cfg.clone(),
            cfg: cfg.clone(),
            point_encoder,
            graph_encoder,
            layers,
            point_head: Mlp::new(store, "head.point", &[d, c], false, rng)?,
            node_gat: GatLayer::new(store, "head.node_gat", d, encoder_cfg.heads, d / encoder_cfg.heads, rng)?,
            node_out: Linear::new(store, "head.node", d, c, rng)?,
            edge_head: Mlp::new(store, "head.edge", &[d, d, c], false, rng)?,
            invocations: AtomicUsize::new(0),
        })
    }

    /// Number of completed [`Pgn::forward`] calls.
    pub fn invocations(&self) -> usize {
        self.invocations.load(Ordering::Relaxed)
    }

    pub fn reset_invocations(&self) {
        self.invocations.store(0, Ordering::Relaxed);
    }

    /// Encoder outputs `P⁽⁰⁾` and `G⁽⁰⁾`.
    pub fn encode<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, prep: &Prepared<T>) -> Result<(Var, Var)> {
        let p0 = self.point_encoder.forward(g, store, &prep.point_plan)?;
        let coords = g.input(prep.node_coords.clone());
        let g0 = self.graph_encoder.forward(g, store, coords, &prep.adjacency)?;
        Ok((p0, g0))
    }

    /// Edge logits from the average of each edge's endpoint features.
    pub fn edge_logits<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        node_feats: Var,
        prep: &Prepared<T>,
    ) -> Result<Option<Var>> {
        if prep.num_edges == 0 {
            return Ok(None);
        }
        let mean = g.interp(node_feats, prep.edge_mean.clone())?;
        Ok(Some(self.edge_head.forward(g, store, mean)?))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, prep: &Prepared<T>) -> Result<PgnOutput> {
        let (mut p, mut n) = self.encode(g, store, prep)?;
        let mut point_stages = vec![p];
        let mut node_stages = vec![n];
        for layer in &self.layers {
            let n_next = layer.point_to_graph(g, store, p, n, prep)?;
            let p_next = layer.graph_to_point(g, store, p, n, prep)?;
            p = p_next;
            n = n_next;
            point_stages.push(p);
            node_stages.push(n);
        }
        let point_logits = self.point_head.forward(g, store, p)?;
        let nh = self.node_gat.forward(g, store, n, &prep.adjacency)?;
        let nh = g.relu(nh);
        let node_logits = self.node_out.forward(g, store, nh)?;
        let edge_logits = self.edge_logits(g, store, n, prep)?;
        self.invocations.fetch_add(1, Ordering::Relaxed);
        Ok(PgnOutput { point_logits, node_logits, edge_logits, point_stages, node_stages })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::SaLevel;
    use crate::spatial::dist2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_configs() -> (EncoderConfig, FusionConfig) {
        let enc = EncoderConfig {
            point_levels: vec![
                SaLevel { ratio: 4, radius: 0.5, max_points: 6, widths: vec![6] },
                SaLevel { ratio: 8, radius: 1.0, max_points: 6, widths: vec![6] },
            ],
            fp_widths: vec![8],
            graph_layers: 2,
            heads: 2,
            head_width: 4,
            out_width: 8,
        };
        let fus = FusionConfig { num_layers: 2, width: 8, ball_radius: 0.4, max_ball_points: 5, k: 3, num_classes: 4 };
        (enc, fus)
    }

    fn cloud(rng: &mut ChaCha8Rng, m: usize) -> Vec<Point<f64>> {
        (0..m).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect()
    }

    fn path_graph(n: usize) -> (Vec<Vec<usize>>, Vec<[usize; 2]>) {
        let adj = (0..n)
            .map(|i| {
                let mut l = vec![i];
                if i > 0 {
                    l.insert(0, i - 1);
                }
                if i + 1 < n {
                    l.push(i + 1);
                }
                l
            })
            .collect();
        (adj, (1..n).map(|i| [i - 1, i]).collect())
    }

    #[test]
    fn forward_shapes_and_stage_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (enc, fus) = tiny_configs();
        let mut store = ParamStore::<f64>::new();
        let pgn = Pgn::new(&mut store, &enc, &fus, &mut rng).unwrap();
        let pts = cloud(&mut rng, 40);
        let nodes = cloud(&mut rng, 5);
        let (adj, edges) = path_graph(5);
        let prep = Prepared::new(&pts, &nodes, &adj, &edges, &enc, &fus).unwrap();
        let mut g = Graph::new();
        let out = pgn.forward(&mut g, &store, &prep).unwrap();
        assert_eq!(g.shape(out.point_logits), [40, 4]);
        assert_eq!(g.shape(out.node_logits), [5, 4]);
        assert_eq!(g.shape(out.edge_logits.unwrap()), [4, 4]);
        assert_eq!(out.point_stages.len(), 3);
        assert_eq!(out.node_stages.len(), 3);
        assert_eq!(pgn.invocations(), 1);
    }

    #[test]
    fn ball_pool_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (enc, fus) = tiny_configs();
        let mut store = ParamStore::<f64>::new();
        let pgn = Pgn::new(&mut store, &enc, &fus, &mut rng).unwrap();
        let pts = cloud(&mut rng, 48);
        let mut nodes = cloud(&mut rng, 6);
        nodes.push([5.0, 5.0, 5.0]); // empty ball: nearest-point fallback
        let (adj, edges) = path_graph(7);
        let prep = Prepared::new(&pts, &nodes, &adj, &edges, &enc, &fus).unwrap();
        let feats = Tensor::from_vec(48, 8, (0..48 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let layer = &pgn.layers[0];
        let mut g = Graph::new();
        let p = g.input(feats.clone());
        let pooled = layer.pooled_node_features(&mut g, &store, p, &prep).unwrap();
        let pooled = g.value(pooled).clone();

        for (ni, c) in nodes.iter().enumerate() {
            let mut inside: Vec<(f64, usize)> = pts
                .iter()
                .enumerate()
                .filter(|(_, q)| dist2(c, q).sqrt() <= fus.ball_radius)
                .map(|(j, q)| (dist2(c, q), j))
                .collect();
            inside.sort_by(|a, b| a.partial_cmp(b).unwrap());
            inside.truncate(fus.max_ball_points);
            if inside.is_empty() {
                let j =
                    (0..pts.len()).min_by(|&a, &b| dist2(c, &pts[a]).partial_cmp(&dist2(c, &pts[b])).unwrap()).unwrap();
                inside.push((0.0, j));
            }
            let mut want = vec![f64::NEG_INFINITY; 8];
            for &(_, j) in &inside {
                let mut g1 = Graph::new();
                let x = g1.input(Tensor::from_vec(1, 8, feats.row(j).to_vec()).unwrap());
                let y = layer.f1.forward(&mut g1, &store, x).unwrap();
                for (w, &v) in want.iter_mut().zip(g1.value(y).row(0)) {
                    *w = w.max(v);
                }
            }
            for (a, b) in pooled.row(ni).iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn graph_to_point_exact_hit_and_equidistant_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (enc, fus) = tiny_configs();
        let mut store = ParamStore::<f64>::new();
        let pgn = Pgn::new(&mut store, &enc, &fus, &mut rng).unwrap();
        let mut pts = cloud(&mut rng, 40);
        let nodes = vec![[0.5, 0.0, 0.0], [-0.5, 0.0, 0.0]];
        pts[3] = nodes[1];
        pts[7] = [0.0, 0.9, 0.0];
        let adj = vec![vec![0, 1], vec![0, 1]];
        let prep = Prepared::new(&pts, &nodes, &adj, &[[0, 1]], &enc, &fus).unwrap();
        let (r3, w3) = prep.node_to_point.row(3);
        assert_eq!(w3[r3.iter().position(|&i| i == 1).unwrap()], 1.0);
        let (_, w7) = prep.node_to_point.row(7);
        assert_eq!(w7, &[0.5, 0.5]);
        let _ = pgn;
    }

    #[test]
    fn edge_logits_ignore_endpoint_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (enc, fus) = tiny_configs();
        let mut store = ParamStore::<f64>::new();
        let pgn = Pgn::new(&mut store, &enc, &fus, &mut rng).unwrap();
        let pts = cloud(&mut rng, 40);
        let nodes = cloud(&mut rng, 3);
        let adj = vec![vec![0, 1], vec![0, 1, 2], vec![1, 2]];
        let feats = Tensor::from_vec(3, 8, (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let run = |edges: &[[usize; 2]]| {
            let prep = Prepared::new(&pts, &nodes, &adj, edges, &enc, &fus).unwrap();
            let mut g = Graph::new();
            let n = g.input(feats.clone());
            let e = pgn.edge_logits(&mut g, &store, n, &prep).unwrap().unwrap();
            g.value(e).clone()
        };
        assert_eq!(run(&[[0, 1], [1, 2]]), run(&[[1, 0], [2, 1]]));
    }

    #[test]
    fn dangling_edge_and_empty_graph_are_rejected() {
        let (enc, fus) = tiny_configs();
        let pts = vec![[0.0f64; 3]; 16];
        assert!(matches!(
            Prepared::new(&pts, &[[0.0; 3]], &[vec![0]], &[[0, 3]], &enc, &fus),
            Err(Error::DanglingEdge { edge: 0, node: 3 })
        ));
        assert!(matches!(Prepared::new(&pts, &[], &[], &[], &enc, &fus), Err(Error::EmptyGraph)));
    }
}
