//! Implicit point head: classify arbitrary coordinates from cached
//! multi-stage point features, and dense reconstruction built on it.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, Pgn, PgnOutput, Prepared};
use crate::nn::{load_checkpoint, EncoderConfig, Graph, Mlp, ParamStore, Tensor, Var};
use crate::scalar::Real;
use crate::skeleton::{extract_graph, skeletonize, thin, SkeletonGraph};
use crate::spatial::{idw_plan, Interpolation, Point, PropagationConfig, SpatialIndex};
use crate::volume::{make_transform, CoordTransform, LabelVolume, Voxel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImplicitConfig {
    /// Hidden widths of `H`; the class count is appended.
    pub hidden: Vec<usize>,
    /// Stages fed to `H`, ascending; `None` means all of `0..=l`.
    #[serde(default)]
    pub stages: Option<Vec<usize>>,
    /// Points per backbone pass.
    pub sample_points: usize,
    /// Queries evaluated per batch during reconstruction.
    pub query_chunk: usize,
}

impl Default for ImplicitConfig {
    fn default() -> Self {
        Self { hidden: vec![256, 128], stages: None, sample_points: 6000, query_chunk: 16384 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub implicit: ImplicitConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.fusion.validate(&self.encoder)?;
        self.stage_mask()?;
        if self.implicit.sample_points < self.encoder.min_points() || self.implicit.query_chunk == 0 {
            return Err(Error::Config("sample_points below encoder minimum or zero query_chunk".into()));
        }
        Ok(())
    }

    pub fn stage_mask(&self) -> Result<Vec<usize>> {
        let all: Vec<usize> = (0..=self.fusion.num_layers).collect();
        let mask = self.implicit.stages.clone().unwrap_or(all);
        if mask.is_empty() {
            return Err(Error::Config("implicit stage mask is empty".into()));
        }
        if mask.windows(2).any(|w| w[0] >= w[1]) || *mask.last().unwrap() > self.fusion.num_layers {
            return Err(Error::Config("stage mask must be ascending within 0..=num_layers".into()));
        }
        Ok(mask)
    }

    pub fn num_classes(&self) -> usize {
        self.fusion.num_classes
    }
}

/// Multi-stage point features with a spatial index over their coordinates.
pub struct FeatureCache<T> {
    pub index: SpatialIndex<T>,
    pub features: Tensor<T>,
}

impl<T: Real> FeatureCache<T> {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.features.cols()
    }
}

/// Concatenates the stages listed in `mask` (ascending) row by row.
pub fn build_cache<T: Real>(stages: &[Tensor<T>], coords: &[Point<T>], mask: &[usize]) -> Result<FeatureCache<T>> {
    if mask.is_empty() {
        return Err(Error::Config("empty stage mask".into()));
    }
    if let Some(&s) = mask.iter().find(|&&s| s >= stages.len()) {
        return Err(Error::Config(format!("stage {s} requested, {} available", stages.len())));
    }
    let m = coords.len();
    if mask.iter().any(|&s| stages[s].rows() != m) {
        return Err(Error::Shape("stage rows differ from coordinate count".into()));
    }
    let width: usize = mask.iter().map(|&s| stages[s].cols()).sum();
    let mut features = Tensor::zeros(m, width);
    for r in 0..m {
        let mut c0 = 0;
        for &s in mask {
            let row = stages[s].row(r);
            features.row_mut(r)[c0..c0 + row.len()].copy_from_slice(row);
            c0 += row.len();
        }
    }
    Ok(FeatureCache { index: SpatialIndex::build(coords.to_vec())?, features })
}

/// `H` applied to IDW-propagated cache features, computed literally.
pub fn implicit_query<T: Real>(
    cache: &FeatureCache<T>,
    head: &Mlp,
    store: &ParamStore<T>,
    queries: &[Point<T>],
    prop: &PropagationConfig,
) -> Result<Tensor<T>> {
    let plan = idw_plan(&cache.index, queries, prop);
    let z = plan.apply(cache.features.data(), cache.width());
    let mut g = Graph::new();
    let x = g.input(Tensor::from_vec(queries.len(), cache.width(), z)?);
    let y = head.forward(&mut g, store, x)?;
    Ok(g.value(y).clone())
}

/// Cache with the first layer of `H` already applied to every cached row.
///
/// IDW propagation is linear, so interpolating `z·W₁` equals `(Σ w z)·W₁`;
/// this moves the widest matrix product from per-query to per-cached-point.
pub struct ImplicitPredictor<T> {
    index: SpatialIndex<T>,
    projected: Tensor<T>,
    prop: PropagationConfig,
}

impl<T: Real> ImplicitPredictor<T> {
    pub fn new(cache: FeatureCache<T>, head: &Mlp, store: &ParamStore<T>, prop: PropagationConfig) -> Result<Self> {
        let first = &head.layers[0];
        let w = store.value(first.w);
        if w.rows() != cache.width() {
            return Err(Error::Shape(format!("H expects width {}, cache has {}", w.rows(), cache.width())));
        }
        let (m, k, n) = (cache.len(), w.rows(), w.cols());
        let mut projected = Tensor::zeros(m, n);
        T::gemm(m, k, n, T::one(), cache.features.data(), false, w.data(), false, T::zero(), projected.data_mut());
        Ok(Self { index: cache.index, projected, prop })
    }

    /// Class logits for each query, evaluated in parallel chunks.
    pub fn logits(&self, head: &Mlp, store: &ParamStore<T>, queries: &[Point<T>], chunk: usize) -> Result<Tensor<T>> {
        let c = head.out_dim();
        let parts: Vec<Result<Vec<T>>> =
            queries.par_chunks(chunk.max(1)).map(|q| self.chunk_logits(head, store, q)).collect();
        let mut data = Vec::with_capacity(queries.len() * c);
        for p in parts {
            data.extend(p?);
        }
        Tensor::from_vec(queries.len(), c, data)
    }

    fn chunk_logits(&self, head: &Mlp, store: &ParamStore<T>, queries: &[Point<T>]) -> Result<Vec<T>> {
        let plan = idw_plan(&self.index, queries, &self.prop);
        let h = plan.apply(self.projected.data(), self.projected.cols());
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(queries.len(), self.projected.cols(), h)?);
        let first = &head.layers[0];
        let b = g.param(store, first.b);
        let mut y = g.add_row(x, b)?;
        let last = head.layers.len() - 1;
        if last > 0 || head.relu_last {
            y = g.relu(y);
        }
        for (i, l) in head.layers.iter().enumerate().skip(1) {
            y = l.forward(&mut g, store, y)?;
            if i < last || head.relu_last {
                y = g.relu(y);
            }
        }
        Ok(g.value(y).data().to_vec())
    }

    /// Arg-max label (`1..=C`) per query.
    pub fn labels(&self, head: &Mlp, store: &ParamStore<T>, queries: &[Point<T>], chunk: usize) -> Result<Vec<u8>> {
        Ok(logits_to_labels(&self.logits(head, store, queries, chunk)?))
    }
}

/// Arg-max per row mapped to labels `1..=C` (ties to the smaller class).
pub fn logits_to_labels<T: Real>(logits: &Tensor<T>) -> Vec<u8> {
    logits.argmax_rows().into_iter().map(|c| (c + 1) as u8).collect()
}

/// Foreground voxels of a volume with their normalized coordinates and the
/// volume's skeleton graph.
#[derive(Debug, Clone)]
pub struct Scene<T> {
    pub transform: CoordTransform,
    pub voxels: Vec<Voxel>,
    /// Ground-truth labels (all 1 when built without labels).
    pub labels: Vec<u8>,
    pub coords: Vec<Point<T>>,
    pub graph: SkeletonGraph,
}

impl<T: Real> Scene<T> {
    /// With `labeled`, graph labels are recovered from the volume; otherwise
    /// only the binary foreground is looked at.
    pub fn from_volume(vol: &LabelVolume, labeled: bool) -> Result<Self> {
        let transform = make_transform(vol)?;
        let graph = if labeled { skeletonize(vol)? } else { extract_graph(&thin(vol), &transform) };
        let fg = vol.foreground_voxels();
        let voxels: Vec<Voxel> = fg.iter().map(|&(v, _)| v).collect();
        let labels = if labeled { fg.iter().map(|&(_, l)| l).collect() } else { vec![1; fg.len()] };
        let coords = voxels.iter().map(|&v| to_point(transform.voxel_to_normalized(v))).collect();
        Ok(Self { transform, voxels, labels, coords, graph })
    }

    pub fn node_coords(&self) -> Vec<Point<T>> {
        self.graph.node_coords().into_iter().map(to_point).collect()
    }
}

pub fn to_point<T: Real>(p: [f64; 3]) -> Point<T> {
    p.map(T::from_f64_lossy)
}

/// `m` indices into `0..n`: a uniform draw without replacement when
/// `n >= m`, otherwise every index once plus uniform draws for the rest.
pub fn sample_indices(n: usize, m: usize, rng: &mut impl Rng) -> Vec<usize> {
    if n >= m {
        return rand::seq::index::sample(rng, n, m).into_vec();
    }
    let mut out: Vec<usize> = (0..n).collect();
    out.extend((n..m).map(|_| rng.gen_range(0..n)));
    out
}

/// One training or evaluation instance for the full model.
pub struct ModelInput<T> {
    pub points: Vec<Point<T>>,
    pub prep: Prepared<T>,
}

/// Ground truth for [`Ipgn::loss`]; labels are class indices (`label - 1`).
pub struct Targets<T> {
    pub points: Arc<Vec<usize>>,
    pub nodes: Arc<Vec<usize>>,
    pub edges: Arc<Vec<usize>>,
    /// IDW plan from the sampled points to the implicit queries.
    pub query_plan: Option<Arc<Interpolation<T>>>,
    pub queries: Arc<Vec<usize>>,
}

/// Loss terms of one step, already reduced to scalars.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct LossParts {
    pub point: f64,
    pub node: f64,
    pub edge: f64,
    pub implicit: f64,
}

/// Point-graph backbone plus implicit head.
#[derive(Debug)]
pub struct Ipgn {
    pub cfg: ModelConfig,
    pub pgn: Pgn,
    pub head: Mlp,
    stage_mask: Vec<usize>,
}

pub const IMPLICIT_HEAD: &str = "implicit";

impl Ipgn {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let pgn = Pgn::new(store, &cfg.encoder, &cfg.fusion, rng)?;
        let stage_mask = cfg.stage_mask()?;
        let mut dims = vec![stage_mask.len() * cfg.fusion.width];
        dims.extend(&cfg.implicit.hidden);
        dims.push(cfg.num_classes());
        let head = Mlp::new(store, IMPLICIT_HEAD, &dims, false, rng)?;
        Ok(Self { cfg: cfg.clone(), pgn, head, stage_mask })
    }

    /// Rebuilds the model described by a checkpoint and loads its weights.
    pub fn load<T: Real>(path: impl AsRef<Path>) -> Result<(Self, ParamStore<T>)> {
        let (cfg, saved): (ModelConfig, ParamStore<T>) = load_checkpoint(path)?;
        let mut store = ParamStore::new();
        let model = Ipgn::new(&mut store, &cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        if store.len() != saved.len() {
            return Err(Error::Invalid(format!("checkpoint holds {} tensors, model has {}", saved.len(), store.len())));
        }
        store.load_values_from(&saved)?;
        Ok((model, store))
    }

    pub fn stage_mask(&self) -> &[usize] {
        &self.stage_mask
    }

    pub fn propagation(&self) -> PropagationConfig {
        self.cfg.fusion.propagation()
    }

    /// Builds the backbone input for sampled points of a scene.
    pub fn input<T: Real>(
        &self,
        points: Vec<Point<T>>,
        graph: &SkeletonGraph,
        nodes: &[Point<T>],
    ) -> Result<ModelInput<T>> {
        let prep = Prepared::new(
            &points,
            nodes,
            &graph.attention_adjacency(),
            &graph.edge_endpoints(),
            &self.cfg.encoder,
            &self.cfg.fusion,
        )?;
        Ok(ModelInput { points, prep })
    }

    /// Concatenated selected stages as a differentiable value.
    pub fn stage_features<T: Real>(&self, g: &mut Graph<T>, out: &PgnOutput) -> Result<Var> {
        let parts: Vec<Var> = self.stage_mask.iter().map(|&s| out.point_stages[s]).collect();
        g.concat(&parts)
    }

    /// Unweighted sum of mean cross-entropies over points, nodes, edges and
    /// implicit queries.
    pub fn loss<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        input: &ModelInput<T>,
        targets: &Targets<T>,
    ) -> Result<(Var, LossParts, PgnOutput)> {
        let out = self.pgn.forward(g, store, &input.prep)?;
        let mut parts = LossParts::default();
        let lp = g.cross_entropy(out.point_logits, targets.points.clone())?;
        parts.point = g.value(lp).item().as_f64();
        let ln = g.cross_entropy(out.node_logits, targets.nodes.clone())?;
        parts.node = g.value(ln).item().as_f64();
        let mut total = g.add(lp, ln)?;
        if let Some(e) = out.edge_logits {
            let le = g.cross_entropy(e, targets.edges.clone())?;
            parts.edge = g.value(le).item().as_f64();
            total = g.add(total, le)?;
        }
        if let Some(plan) = &targets.query_plan {
            if plan.rows() > 0 {
                let z = self.stage_features(g, &out)?;
                let zq = g.interp(z, plan.clone())?;
                let logits = self.head.forward(g, store, zq)?;
                let li = g.cross_entropy(logits, targets.queries.clone())?;
                parts.implicit = g.value(li).item().as_f64();
                total = g.add(total, li)?;
            }
        }
        Ok((total, parts, out))
    }

    /// Runs the backbone once and returns its outputs as plain tensors.
    pub fn infer<T: Real>(&self, store: &ParamStore<T>, input: &ModelInput<T>) -> Result<Inference<T>> {
        let mut g = Graph::new();
        let out = self.pgn.forward(&mut g, store, &input.prep)?;
        let take = |v: Var| g.value(v).clone();
        Ok(Inference {
            point_logits: take(out.point_logits),
            node_logits: take(out.node_logits),
            edge_logits: out.edge_logits.map(take),
            point_stages: out.point_stages.iter().map(|&v| take(v)).collect(),
        })
    }

    pub fn predictor<T: Real>(
        &self,
        store: &ParamStore<T>,
        input: &ModelInput<T>,
        inference: &Inference<T>,
    ) -> Result<ImplicitPredictor<T>> {
        let cache = build_cache(&inference.point_stages, &input.points, &self.stage_mask)?;
        ImplicitPredictor::new(cache, &self.head, store, self.propagation())
    }
}

/// Backbone outputs detached from the autodiff graph.
pub struct Inference<T> {
    pub point_logits: Tensor<T>,
    pub node_logits: Tensor<T>,
    pub edge_logits: Option<Tensor<T>>,
    pub point_stages: Vec<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub volume: LabelVolume,
    pub backbone_passes: usize,
}

fn write_labels(vol: &LabelVolume, voxels: &[Voxel], labels: &[u8], num_classes: usize) -> LabelVolume {
    let mut out = LabelVolume::zeros(vol.dims(), vol.spacing(), num_classes as u8);
    for (&v, &l) in voxels.iter().zip(labels) {
        out.set(v, l);
    }
    out
}

/// Labels every foreground voxel from one backbone pass on a sampled subset.
///
/// Only the binary foreground of `vol` is used. Sampling is driven by `rng`.
pub fn reconstruct_dense<T: Real>(
    vol: &LabelVolume,
    model: &Ipgn,
    store: &ParamStore<T>,
    rng: &mut impl Rng,
) -> Result<Reconstruction> {
    let scene = Scene::<T>::from_volume(&vol.binarized(), false)?;
    reconstruct_scene(vol, &scene, model, store, rng)
}

/// One backbone pass on `M` sampled voxels, then implicit labels for every
/// voxel of the scene. Also returns the backbone outputs.
pub fn implicit_labels<T: Real>(
    scene: &Scene<T>,
    model: &Ipgn,
    store: &ParamStore<T>,
    rng: &mut impl Rng,
) -> Result<(Vec<u8>, Inference<T>)> {
    let picked = sample_indices(scene.coords.len(), model.cfg.implicit.sample_points, rng);
    let points = picked.iter().map(|&i| scene.coords[i]).collect();
    let input = model.input(points, &scene.graph, &scene.node_coords())?;
    let inference = model.infer(store, &input)?;
    let predictor = model.predictor(store, &input, &inference)?;
    let labels = predictor.labels(&model.head, store, &scene.coords, model.cfg.implicit.query_chunk)?;
    Ok((labels, inference))
}

pub fn reconstruct_scene<T: Real>(
    vol: &LabelVolume,
    scene: &Scene<T>,
    model: &Ipgn,
    store: &ParamStore<T>,
    rng: &mut impl Rng,
) -> Result<Reconstruction> {
    let before = model.pgn.invocations();
    let (labels, _) = implicit_labels(scene, model, store, rng)?;
    Ok(Reconstruction {
        volume: write_labels(vol, &scene.voxels, &labels, model.cfg.num_classes()),
        backbone_passes: model.pgn.invocations() - before,
    })
}

/// Baseline: run the backbone on disjoint groups of `M` foreground voxels
/// (a seeded random partition; the last group is padded by repeating its
/// own members) and label each voxel from its own group's point logits.
pub fn repeated_inference_reconstruct<T: Real>(
    vol: &LabelVolume,
    model: &Ipgn,
    store: &ParamStore<T>,
    rng: &mut impl Rng,
) -> Result<Reconstruction> {
    let scene = Scene::<T>::from_volume(&vol.binarized(), false)?;
    repeated_inference_scene(vol, &scene, model, store, rng)
}

pub fn repeated_inference_scene<T: Real>(
    vol: &LabelVolume,
    scene: &Scene<T>,
    model: &Ipgn,
    store: &ParamStore<T>,
    rng: &mut impl Rng,
) -> Result<Reconstruction> {
    let before = model.pgn.invocations();
    let f = scene.coords.len();
    let m = model.cfg.implicit.sample_points;
    let order = sample_indices(f, f, rng);
    let nodes = scene.node_coords();
    let mut labels = vec![0u8; f];
    for group in order.chunks(m) {
        let padded: Vec<usize> = (0..m).map(|i| group[i % group.len()]).collect();
        let points = padded.iter().map(|&i| scene.coords[i]).collect();
        let input = model.input(points, &scene.graph, &nodes)?;
        let inference = model.infer(store, &input)?;
        let pred = logits_to_labels(&inference.point_logits);
        for (&voxel, &l) in group.iter().zip(&pred) {
            labels[voxel] = l;
        }
    }
    Ok(Reconstruction {
        volume: write_labels(vol, &scene.voxels, &labels, model.cfg.num_classes()),
        backbone_passes: model.pgn.invocations() - before,
    })
}

/// Fixed colours for labels 1..=19 (label 0 is never exported).
pub const PALETTE: [[u8; 3]; 19] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
    [170, 255, 195],
    [128, 128, 0],
    [255, 215, 180],
    [0, 0, 128],
];

pub fn palette_color(label: u8) -> [u8; 3] {
    PALETTE[(label.max(1) as usize - 1) % PALETTE.len()]
}

/// ASCII PLY with one coloured vertex per foreground voxel (voxel indices).
pub fn write_ply(vol: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let fg = vol.foreground_voxels();
    let mut s = String::new();
    writeln!(s, "ply\nformat ascii 1.0\nelement vertex {}", fg.len()).unwrap();
    s.push_str("property float x\nproperty float y\nproperty float z\n");
    s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\nproperty uchar label\nend_header\n");
    for (v, l) in fg {
        let c = palette_color(l);
        writeln!(s, "{} {} {} {} {} {} {l}", v[0], v[1], v[2], c[0], c[1], c[2]).unwrap();
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// `x,y,z,true,pred` for every voxel that is foreground in either volume.
pub fn write_csv(pred: &LabelVolume, truth: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if pred.dims() != truth.dims() {
        return Err(Error::Shape(format!("prediction dims {:?}, truth dims {:?}", pred.dims(), truth.dims())));
    }
    let mut s = String::from("x,y,z,true,pred\n");
    for i in 0..pred.len() {
        let (p, t) = (pred.data()[i], truth.data()[i]);
        if p != 0 || t != 0 {
            let v = pred.voxel_of(i);
            writeln!(s, "{},{},{},{t},{p}", v[0], v[1], v[2]).unwrap();
        }
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::nn::SaLevel;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_model_config(classes: usize) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                point_levels: vec![
                    SaLevel { ratio: 4, radius: 0.3, max_points: 6, widths: vec![6] },
                    SaLevel { ratio: 8, radius: 0.6, max_points: 6, widths: vec![6] },
                ],
                fp_widths: vec![8],
                graph_layers: 2,
                heads: 2,
                head_width: 4,
                out_width: 8,
            },
            fusion: FusionConfig {
                num_layers: 2,
                width: 8,
                ball_radius: 0.3,
                max_ball_points: 5,
                k: 3,
                num_classes: classes,
            },
            implicit: ImplicitConfig { hidden: vec![12, 10], stages: None, sample_points: 64, query_chunk: 50 },
        }
    }

    fn tube_volume() -> LabelVolume {
        let mut v = LabelVolume::zeros([24, 9, 9], [1.0; 3], 3);
        for x in 2..22 {
            for y in 3..6 {
                for z in 3..6 {
                    v.set([x, y, z], if x < 12 { 1 } else { 2 });
                }
            }
        }
        v
    }

    #[test]
    fn cache_width_follows_stage_mask() {
        let coords = vec![[0.0f64; 3]; 2];
        let stages: Vec<Tensor<f64>> = (0..4).map(|s| Tensor::filled(2, 128, s as f64)).collect();
        assert_eq!(build_cache(&stages, &coords, &[3]).unwrap().width(), 128);
        let all = build_cache(&stages, &coords, &[0, 1, 2, 3]).unwrap();
        assert_eq!(all.width(), 512);
        assert_eq!(all.features.at(1, 128 * 2 + 5), 2.0);
        assert!(build_cache(&stages, &coords, &[]).is_err());
        let one = build_cache(
            &stages[..1].iter().map(|t| Tensor::from_vec(1, 128, t.row(0).to_vec()).unwrap()).collect::<Vec<_>>(),
            &coords[..1],
            &[0],
        )
        .unwrap();
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn query_at_cached_point_is_exact_and_predictor_agrees_with_literal_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = tiny_model_config(3);
        let mut store = ParamStore::<f64>::new();
        let model = Ipgn::new(&mut store, &cfg, &mut rng).unwrap();
        for (_, p) in store.clone().iter() {
            if p.name.ends_with(".b") {
                let id = store.id(&p.name).unwrap();
                for v in store.get_mut(id).value.data_mut() {
                    *v = rng.gen_range(-0.3..0.3);
                }
            }
        }
        let coords: Vec<Point<f64>> =
            (0..30).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
        let stages: Vec<Tensor<f64>> = (0..3)
            .map(|_| Tensor::from_vec(30, 8, (0..240).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
            .collect();
        let cache = build_cache(&stages, &coords, model.stage_mask()).unwrap();
        let prop = model.propagation();
        let hit = implicit_query(&cache, &model.head, &store, &coords[4..5], &prop).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(1, 24, cache.features.row(4).to_vec()).unwrap());
        let y = model.head.forward(&mut g, &store, x).unwrap();
        assert_eq!(&hit, g.value(y));

        let queries: Vec<Point<f64>> =
            (0..40).map(|_| [rng.gen_range(-1.2..1.2), rng.gen_range(-1.2..1.2), rng.gen_range(-1.2..1.2)]).collect();
        let literal = implicit_query(&cache, &model.head, &store, &queries, &prop).unwrap();
        let cache = build_cache(&stages, &coords, model.stage_mask()).unwrap();
        let fast = ImplicitPredictor::new(cache, &model.head, &store, prop).unwrap();
        let got = fast.logits(&model.head, &store, &queries, 7).unwrap();
        for (a, b) in literal.data().iter().zip(got.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn equidistant_identical_features_match_either_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = tiny_model_config(3);
        let mut store = ParamStore::<f64>::new();
        let model = Ipgn::new(&mut store, &cfg, &mut rng).unwrap();
        let coords = vec![[-0.5, 0.0, 0.0], [0.5, 0.0, 0.0]];
        let row: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let stage = Tensor::from_rows(&[row.clone(), row]).unwrap();
        let stages = vec![stage.clone(), stage.clone(), stage];
        let cache = build_cache(&stages, &coords, model.stage_mask()).unwrap();
        let prop = model.propagation();
        let mid = implicit_query(&cache, &model.head, &store, &[[0.0, 0.3, 0.0]], &prop).unwrap();
        let at = implicit_query(&cache, &model.head, &store, &coords[..1], &prop).unwrap();
        for (a, b) in mid.data().iter().zip(at.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_reconstruction_labels_exactly_the_foreground_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = tiny_model_config(3);
        let mut store = ParamStore::<f32>::new();
        let model = Ipgn::new(&mut store, &cfg, &mut rng).unwrap();
        let vol = tube_volume();
        let rec = reconstruct_dense(&vol, &model, &store, &mut rng).unwrap();
        assert_eq!(rec.backbone_passes, 1);
        assert_eq!(rec.volume.dims(), vol.dims());
        for (a, b) in rec.volume.data().iter().zip(vol.data()) {
            assert_eq!(*a != 0, *b != 0);
            assert!(*a <= 3);
        }
        let fg = vol.foreground_count();
        let rep = repeated_inference_reconstruct(&vol, &model, &store, &mut rng).unwrap();
        assert_eq!(rep.backbone_passes, fg.div_ceil(64));
        for (a, b) in rep.volume.data().iter().zip(vol.data()) {
            assert_eq!(*a != 0, *b != 0);
        }
    }

    #[test]
    fn freespace_queries_far_away_still_get_a_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = tiny_model_config(3);
        let mut store = ParamStore::<f32>::new();
        let model = Ipgn::new(&mut store, &cfg, &mut rng).unwrap();
        let scene = Scene::<f32>::from_volume(&tube_volume(), false).unwrap();
        let picked = sample_indices(scene.coords.len(), 64, &mut rng);
        let input =
            model.input(picked.iter().map(|&i| scene.coords[i]).collect(), &scene.graph, &scene.node_coords()).unwrap();
        let inf = model.infer(&store, &input).unwrap();
        let pred = model.predictor(&store, &input, &inf).unwrap();
        let labels = pred.labels(&model.head, &store, &[[50.0, -40.0, 9.0], [0.0; 3]], 16).unwrap();
        assert!(labels.iter().all(|&l| (1..=3).contains(&l)));
    }

    #[test]
    fn sampling_covers_everything_when_short() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = sample_indices(5, 12, &mut rng);
        assert_eq!(s.len(), 12);
        assert_eq!(&s[..5], &[0, 1, 2, 3, 4]);
        let s = sample_indices(100, 10, &mut rng);
        let mut d = s.clone();
        d.sort();
        d.dedup();
        assert_eq!(d.len(), 10);
    }

    #[test]
    fn exports_write_one_row_per_voxel() {
        let vol = tube_volume();
        let dir = tempfile::tempdir().unwrap();
        write_ply(&vol, dir.path().join("a.ply")).unwrap();
        write_csv(&vol, &vol, dir.path().join("a.csv")).unwrap();
        let ply = fs::read_to_string(dir.path().join("a.ply")).unwrap();
        assert!(ply.contains(&format!("element vertex {}", vol.foreground_count())));
        let csv = fs::read_to_string(dir.path().join("a.csv")).unwrap();
        assert_eq!(csv.lines().count(), vol.foreground_count() + 1);
    }

    #[test]
    fn checkpoint_round_trip_rebuilds_the_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = tiny_model_config(3);
        let mut store = ParamStore::<f32>::new();
        let _model = Ipgn::new(&mut store, &cfg, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        crate::nn::save_checkpoint(&p, &cfg, &store).unwrap();
        let (back, bstore) = Ipgn::load::<f32>(&p).unwrap();
        assert_eq!(back.cfg, cfg);
        for ((_, a), (_, b)) in store.iter().zip(bstore.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
    }
}
