//! Encoder pretraining and joint training of the full model.
//!
//! Training runs one tree per optimizer step. Phase one trains the point
//! encoder and the graph encoder separately, each with its own linear
//! classifier; phase two freezes both and trains everything else.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{GRAPH_ENCODER, POINT_ENCODER};
use crate::implicit::{sample_indices, Ipgn, ModelConfig, ModelInput, Scene, Targets};
use crate::nn::{
    adam_step, clip_grad_norm, grad_check, save_checkpoint, AdamConfig, GradCheckReport, Graph, Groups, ParamStore,
    PointPlan, Tensor, Var,
};
use crate::scalar::Real;
use crate::spatial::{idw_plan, Interpolation, Point, SpatialIndex};
use crate::synth::DatasetManifest;
use crate::volume::load_volume;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub epochs: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Rotation about the vertical axis, uniform in ±this many degrees.
    pub max_rotation_deg: f64,
    /// Per-axis translation, uniform in ±this.
    pub max_shift: f64,
    pub scale: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { enabled: true, max_rotation_deg: 180.0, max_shift: 0.1, scale: [0.9, 1.1] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub point_encoder: Phase,
    pub graph_encoder: Phase,
    pub joint: Phase,
    /// Learning rates halve every this many epochs.
    pub lr_halving: usize,
    /// Points per training step (`M`).
    pub sample_points: usize,
    /// Extra foreground points per step for the implicit head (`M'`); zero
    /// drops the implicit term.
    pub implicit_points: usize,
    pub augment: AugmentConfig,
    pub adam: AdamConfig,
    /// Largest global gradient norm per step; zero disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            point_encoder: Phase { epochs: 120, lr: 0.002 },
            graph_encoder: Phase { epochs: 240, lr: 0.02 },
            joint: Phase { epochs: 100, lr: 0.01 },
            lr_halving: 45,
            sample_points: 6000,
            implicit_points: 2000,
            augment: AugmentConfig::default(),
            adam: AdamConfig::default(),
            grad_clip: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Settings sized for the 64³ synthetic trees on one CPU core. The
    /// graph encoder diverges at the default rate on these small graphs.
    pub fn desk() -> Self {
        Self { sample_points: 2048, graph_encoder: Phase { epochs: 240, lr: 0.005 }, grad_clip: 1.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in
            [("point_encoder", self.point_encoder), ("graph_encoder", self.graph_encoder), ("joint", self.joint)]
        {
            if !(p.lr.is_finite() && p.lr >= 0.0) {
                return Err(Error::Config(format!("{name} learning rate must be finite and non-negative")));
            }
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return Err(Error::Config("grad_clip must be finite and non-negative".into()));
        }
        if self.lr_halving == 0 || self.sample_points == 0 {
            return Err(Error::Config("lr_halving and sample_points must be positive".into()));
        }
        let a = &self.augment;
        if !(a.max_rotation_deg >= 0.0 && a.max_shift >= 0.0 && 0.0 < a.scale[0] && a.scale[0] <= a.scale[1]) {
            return Err(Error::Config("augmentation ranges must be non-negative with 0 < scale[0] <= scale[1]".into()));
        }
        Ok(())
    }
}

/// Learning rate for 1-based `epoch`: `base` halved every `interval` epochs.
pub fn lr_at(base: f64, epoch: usize, interval: usize) -> f64 {
    base * 0.5f64.powi((epoch.saturating_sub(1) / interval.max(1)) as i32)
}

/// Scale, then rotate about the vertical (z) axis, then shift.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augmentation {
    pub angle: f64,
    pub shift: [f64; 3],
    pub scale: f64,
}

impl Augmentation {
    pub fn identity() -> Self {
        Self { angle: 0.0, shift: [0.0; 3], scale: 1.0 }
    }

    pub fn sample(cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        if !cfg.enabled {
            return Self::identity();
        }
        let r = cfg.max_rotation_deg.to_radians();
        let s = cfg.max_shift;
        Self {
            angle: rng.gen_range(-r..=r),
            shift: [rng.gen_range(-s..=s), rng.gen_range(-s..=s), rng.gen_range(-s..=s)],
            scale: rng.gen_range(cfg.scale[0]..=cfg.scale[1]),
        }
    }

    pub fn apply<T: Real>(&self, p: Point<T>) -> Point<T> {
        let [x, y, z] = p.map(|c| c.as_f64() * self.scale);
        let (sin, cos) = self.angle.sin_cos();
        [x * cos - y * sin + self.shift[0], x * sin + y * cos + self.shift[1], z + self.shift[2]].map(T::from_f64_lossy)
    }
}

/// Applies one transform drawn from `seed` to both points and graph nodes.
pub fn augment<T: Real>(
    points: &[Point<T>],
    nodes: &[Point<T>],
    cfg: &AugmentConfig,
    seed: u64,
) -> (Vec<Point<T>>, Vec<Point<T>>, Augmentation) {
    let aug = Augmentation::sample(cfg, &mut ChaCha8Rng::seed_from_u64(seed));
    let map = |ps: &[Point<T>]| ps.iter().map(|&p| aug.apply(p)).collect();
    (map(points), map(nodes), aug)
}

/// Labeled scenes for the listed trees of a dataset directory.
pub fn load_scenes<T: Real>(dir: impl AsRef<Path>, manifest: &DatasetManifest, ids: &[usize]) -> Result<Vec<Scene<T>>> {
    let dir = dir.as_ref();
    ids.par_iter()
        .map(|&id| {
            let entry = manifest
                .trees
                .iter()
                .find(|t| t.id == id)
                .ok_or_else(|| Error::Invalid(format!("tree {id} missing from manifest")))?;
            Scene::from_volume(&load_volume(dir.join(&entry.volume))?, true)
        })
        .collect()
}

/// Train and validation scenes of a dataset.
pub struct TrainData<T> {
    pub train: Vec<Scene<T>>,
    pub val: Vec<Scene<T>>,
}

impl<T: Real> TrainData<T> {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = DatasetManifest::load(dir.join("manifest.json"))?;
        Ok(Self {
            train: load_scenes(dir, &manifest, &manifest.split.train)?,
            val: load_scenes(dir, &manifest, &manifest.split.val)?,
        })
    }
}

fn class_targets(labels: impl IntoIterator<Item = u8>) -> Arc<Vec<usize>> {
    Arc::new(labels.into_iter().map(|l| l as usize - 1).collect())
}

/// Everything one step of any phase needs for one tree.
pub struct Batch<T> {
    pub points: Vec<Point<T>>,
    pub nodes: Vec<Point<T>>,
    pub point_labels: Arc<Vec<usize>>,
    pub node_labels: Arc<Vec<usize>>,
    pub edge_labels: Arc<Vec<usize>>,
    pub queries: Vec<Point<T>>,
    pub query_labels: Arc<Vec<usize>>,
}

/// Samples `m` points and `m_implicit` fresh query points of `scene` and
/// applies `aug` to points, queries and graph nodes alike.
pub fn sample_batch<T: Real>(
    scene: &Scene<T>,
    m: usize,
    m_implicit: usize,
    aug: &Augmentation,
    rng: &mut impl Rng,
) -> Batch<T> {
    let n = scene.coords.len();
    let picked = sample_indices(n, m, rng);
    let queried = if m_implicit > 0 { sample_indices(n, m_implicit, rng) } else { Vec::new() };
    let at = |ids: &[usize]| ids.iter().map(|&i| aug.apply(scene.coords[i])).collect();
    Batch {
        points: at(&picked),
        nodes: scene.node_coords().into_iter().map(|p| aug.apply(p)).collect(),
        point_labels: class_targets(picked.iter().map(|&i| scene.labels[i])),
        node_labels: class_targets(scene.graph.node_labels()),
        edge_labels: class_targets(scene.graph.edge_labels()),
        queries: at(&queried),
        query_labels: class_targets(queried.iter().map(|&i| scene.labels[i])),
    }
}

/// Backbone input plus loss targets for a batch.
pub fn model_step<T: Real>(model: &Ipgn, scene: &Scene<T>, batch: Batch<T>) -> Result<(ModelInput<T>, Targets<T>)> {
    let query_plan = if batch.queries.is_empty() {
        None
    } else {
        let index = SpatialIndex::build(batch.points.clone())?;
        Some(Arc::new(idw_plan(&index, &batch.queries, &model.propagation())))
    };
    let input = model.input(batch.points, &scene.graph, &batch.nodes)?;
    let targets = Targets {
        points: batch.point_labels,
        nodes: batch.node_labels,
        edges: batch.edge_labels,
        query_plan,
        queries: batch.query_labels,
    };
    Ok((input, targets))
}

/// Validation accuracies in percent; `None` where a phase has no such output.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ValScores {
    pub point: Option<f64>,
    pub node: Option<f64>,
    pub edge: Option<f64>,
}

impl ValScores {
    fn mean(&self) -> f64 {
        let xs: Vec<f64> = [self.point, self.node, self.edge].into_iter().flatten().collect();
        if xs.is_empty() {
            0.0
        } else {
            xs.iter().sum::<f64>() / xs.len() as f64
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val: ValScores,
}

#[derive(Debug, Clone, Serialize)]
pub struct PhaseSummary {
    pub name: String,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val: ValScores,
    pub final_train_accuracy: Option<f64>,
    /// Wall time; kept out of serialized reports so they stay reproducible.
    #[serde(skip)]
    pub seconds: f64,
}

const CSV_HEADER: &str = "epoch,lr,train_loss,val_point_acc,val_node_acc,val_edge_acc";

fn csv_field(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.4}")).unwrap_or_default()
}

struct CsvLog(Option<BufWriter<File>>);

impl CsvLog {
    fn create(path: Option<PathBuf>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self(None));
        };
        let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
        writeln!(w, "{CSV_HEADER}").map_err(|e| Error::io(&path, e))?;
        Ok(Self(Some(w)))
    }

    fn row(&mut self, e: &EpochLog) -> Result<()> {
        if let Some(w) = &mut self.0 {
            let line = format!(
                "{},{},{:.6},{},{},{}",
                e.epoch,
                e.lr,
                e.train_loss,
                csv_field(e.val.point),
                csv_field(e.val.node),
                csv_field(e.val.edge)
            );
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::io("training log", e))?;
        }
        Ok(())
    }
}

fn percent_correct<T: Real>(logits: &Tensor<T>, targets: &[usize]) -> f64 {
    let pred = logits.argmax_rows();
    let hits = pred.iter().zip(targets).filter(|(p, t)| p == t).count();
    100.0 * hits as f64 / targets.len().max(1) as f64
}

/// What one phase trains: the loss of a batch and per-output predictions.
trait PhaseTask<T: Real> {
    type Prepared;
    fn prepare(&self, scene: &Scene<T>, batch: Batch<T>) -> Result<Self::Prepared>;
    /// Scalar loss plus logits/targets pairs for the point, node and edge outputs.
    fn forward(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        prep: &Self::Prepared,
    ) -> Result<(Var, [Option<(Var, Arc<Vec<usize>>)>; 3])>;
    fn implicit_points(&self) -> usize {
        0
    }
}

struct PointTask<'a> {
    model: &'a Ipgn,
}

impl<T: Real> PhaseTask<T> for PointTask<'_> {
    type Prepared = (PointPlan<T>, Arc<Vec<usize>>);

    fn prepare(&self, _: &Scene<T>, batch: Batch<T>) -> Result<Self::Prepared> {
        Ok((PointPlan::new(&batch.points, &self.model.cfg.encoder)?, batch.point_labels))
    }

    fn forward(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        (plan, labels): &Self::Prepared,
    ) -> Result<(Var, [Option<(Var, Arc<Vec<usize>>)>; 3])> {
        let enc = &self.model.pgn.point_encoder;
        let feats = enc.forward(g, store, plan)?;
        let logits = enc.seg_head.forward(g, store, feats)?;
        let loss = g.cross_entropy(logits, labels.clone())?;
        Ok((loss, [Some((logits, labels.clone())), None, None]))
    }
}

struct GraphTask<'a> {
    model: &'a Ipgn,
}

struct GraphPrepared<T> {
    coords: Tensor<T>,
    adjacency: Arc<Groups>,
    edge_mean: Arc<Interpolation<T>>,
    nodes: Arc<Vec<usize>>,
    edges: Arc<Vec<usize>>,
}

impl<T: Real> PhaseTask<T> for GraphTask<'_> {
    type Prepared = GraphPrepared<T>;

    fn prepare(&self, scene: &Scene<T>, batch: Batch<T>) -> Result<Self::Prepared> {
        if batch.nodes.is_empty() {
            return Err(Error::EmptyGraph);
        }
        let ends: Vec<Vec<usize>> = scene.graph.edge_endpoints().iter().map(|e| e.to_vec()).collect();
        Ok(GraphPrepared {
            coords: Tensor::from_points(&batch.nodes),
            adjacency: Arc::new(Groups::from_lists(&scene.graph.attention_adjacency())),
            edge_mean: Arc::new(Interpolation::mean_of(&ends)),
            nodes: batch.node_labels,
            edges: batch.edge_labels,
        })
    }

    fn forward(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        p: &Self::Prepared,
    ) -> Result<(Var, [Option<(Var, Arc<Vec<usize>>)>; 3])> {
        let enc = &self.model.pgn.graph_encoder;
        let coords = g.input(p.coords.clone());
        let feats = enc.forward(g, store, coords, &p.adjacency)?;
        let node_logits = enc.seg_head.forward(g, store, feats)?;
        let mut loss = g.cross_entropy(node_logits, p.nodes.clone())?;
        let mut edge = None;
        if !p.edges.is_empty() {
            let mean = g.interp(feats, p.edge_mean.clone())?;
            let edge_logits = enc.seg_head.forward(g, store, mean)?;
            let le = g.cross_entropy(edge_logits, p.edges.clone())?;
            loss = g.add(loss, le)?;
            edge = Some((edge_logits, p.edges.clone()));
        }
        Ok((loss, [None, Some((node_logits, p.nodes.clone())), edge]))
    }
}

struct JointTask<'a> {
    model: &'a Ipgn,
    implicit_points: usize,
}

impl<T: Real> PhaseTask<T> for JointTask<'_> {
    type Prepared = (ModelInput<T>, Targets<T>);

    fn prepare(&self, scene: &Scene<T>, batch: Batch<T>) -> Result<Self::Prepared> {
        model_step(self.model, scene, batch)
    }

    fn forward(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        (input, targets): &Self::Prepared,
    ) -> Result<(Var, [Option<(Var, Arc<Vec<usize>>)>; 3])> {
        let (loss, _, out) = self.model.loss(g, store, input, targets)?;
        Ok((
            loss,
            [
                Some((out.point_logits, targets.points.clone())),
                Some((out.node_logits, targets.nodes.clone())),
                out.edge_logits.map(|e| (e, targets.edges.clone())),
            ],
        ))
    }

    fn implicit_points(&self) -> usize {
        self.implicit_points
    }
}

/// Mean accuracies of each output over prepared validation batches.
fn validate<T: Real, P: PhaseTask<T>>(task: &P, store: &ParamStore<T>, val: &[P::Prepared]) -> Result<ValScores> {
    let mut sums = [0.0f64; 3];
    let mut counts = [0usize; 3];
    for prep in val {
        let mut g = Graph::new();
        let (_, outs) = task.forward(&mut g, store, prep)?;
        for (k, o) in outs.iter().enumerate() {
            if let Some((v, t)) = o {
                sums[k] += percent_correct(g.value(*v), t);
                counts[k] += 1;
            }
        }
    }
    let avg = |k: usize| (counts[k] > 0).then(|| sums[k] / counts[k] as f64);
    Ok(ValScores { point: avg(0), node: avg(1), edge: avg(2) })
}

/// Where a phase writes its artifacts; all optional.
#[derive(Debug, Clone, Default)]
pub struct PhaseOutput {
    pub log: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[allow(clippy::too_many_arguments)]
fn run_phase<T: Real, P: PhaseTask<T>>(
    name: &str,
    task: &P,
    phase: Phase,
    cfg: &TrainConfig,
    model: &Ipgn,
    store: &mut ParamStore<T>,
    data: &TrainData<T>,
    stream: u64,
    out: &PhaseOutput,
) -> Result<PhaseSummary> {
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let mut val_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    val_rng.set_stream(stream + 1000);
    let val: Vec<P::Prepared> = data
        .val
        .iter()
        .map(|s| {
            let batch = sample_batch(s, cfg.sample_points, 0, &Augmentation::identity(), &mut val_rng);
            task.prepare(s, batch)
        })
        .collect::<Result<_>>()?;
    store.reset_optimizer();
    let mut log = CsvLog::create(out.log.clone())?;
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, ValScores, ParamStore<T>)> = None;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut train_acc = None;
    for epoch in 1..=phase.epochs {
        let lr = lr_at(phase.lr, epoch, cfg.lr_halving);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let last_epoch = epoch == phase.epochs;
        let (mut hits, mut seen) = (0.0, 0usize);
        for &i in &order {
            let scene = &data.train[i];
            let aug = Augmentation::sample(&cfg.augment, &mut rng);
            let batch = sample_batch(scene, cfg.sample_points, task.implicit_points(), &aug, &mut rng);
            let prep = task.prepare(scene, batch)?;
            let mut g = Graph::new();
            let (loss, outs) = task.forward(&mut g, store, &prep)?;
            let value = g.value(loss).item().as_f64();
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, loss: value });
            }
            if last_epoch {
                if let Some((v, t)) = outs.iter().flatten().next() {
                    hits += percent_correct(g.value(*v), t);
                    seen += 1;
                }
            }
            total += value;
            store.zero_grad();
            g.backward(loss, store)?;
            if cfg.grad_clip > 0.0 {
                clip_grad_norm(store, cfg.grad_clip);
            }
            adam_step(store, lr, &cfg.adam);
        }
        if last_epoch && seen > 0 {
            train_acc = Some(hits / seen as f64);
        }
        let train_loss = total / order.len().max(1) as f64;
        let scores = validate(task, store, &val)?;
        let entry = EpochLog { epoch, lr, train_loss, val: scores };
        log.row(&entry)?;
        log::info!(
            "{name} epoch {epoch}: lr {lr:.5} loss {train_loss:.4} val {:?}/{:?}/{:?}",
            scores.point,
            scores.node,
            scores.edge
        );
        epochs.push(entry);
        let score = scores.mean();
        if best.as_ref().is_none_or(|b| score > b.0) {
            best = Some((score, epoch, scores, store.clone()));
        }
    }
    let (best_epoch, best_val) = match best {
        Some((_, e, s, snapshot)) => {
            store.load_values_from(&snapshot)?;
            (e, s)
        }
        None => (0, ValScores::default()),
    };
    if let Some(path) = &out.checkpoint {
        save_checkpoint(path, &model.cfg, store)?;
    }
    Ok(PhaseSummary {
        name: name.to_string(),
        epochs,
        best_epoch,
        best_val,
        final_train_accuracy: train_acc,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn only_trainable<T: Real>(store: &mut ParamStore<T>, prefix: &str) {
    store.set_trainable("", false);
    store.set_trainable(prefix, true);
}

fn prefix(name: &str) -> String {
    format!("{name}.")
}

/// Trains the point encoder on per-point labels, then the graph encoder on
/// node and edge labels, each with its own classifier. Each keeps the
/// weights of its best validation epoch.
pub fn train_encoders<T: Real>(
    model: &Ipgn,
    store: &mut ParamStore<T>,
    data: &TrainData<T>,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<Vec<PhaseSummary>> {
    cfg.validate()?;
    let outputs = |stem: &str, ckpt: bool| PhaseOutput {
        log: out_dir.map(|d| d.join(format!("{stem}_log.csv"))),
        checkpoint: out_dir.filter(|_| ckpt).map(|d| d.join("encoders.json")),
    };
    only_trainable(store, &prefix(POINT_ENCODER));
    let point = run_phase(
        "point",
        &PointTask { model },
        cfg.point_encoder,
        cfg,
        model,
        store,
        data,
        1,
        &outputs("point", false),
    )?;
    only_trainable(store, &prefix(GRAPH_ENCODER));
    let graph = run_phase(
        "graph",
        &GraphTask { model },
        cfg.graph_encoder,
        cfg,
        model,
        store,
        data,
        2,
        &outputs("graph", true),
    )?;
    store.set_trainable("", true);
    Ok(vec![point, graph])
}

/// Freezes both encoders and trains fusion layers, heads and the implicit
/// head together; keeps the best validation epoch.
pub fn train_ipgn<T: Real>(
    model: &Ipgn,
    store: &mut ParamStore<T>,
    data: &TrainData<T>,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<PhaseSummary> {
    cfg.validate()?;
    store.set_trainable("", true);
    store.set_trainable(&prefix(POINT_ENCODER), false);
    store.set_trainable(&prefix(GRAPH_ENCODER), false);
    let out = PhaseOutput {
        log: out_dir.map(|d| d.join("train_log.csv")),
        checkpoint: out_dir.map(|d| d.join("model.json")),
    };
    let task = JointTask { model, implicit_points: cfg.implicit_points };
    let summary = run_phase("joint", &task, cfg.joint, cfg, model, store, data, 3, &out);
    store.set_trainable("", true);
    summary
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub phases: Vec<PhaseSummary>,
    pub num_train: usize,
    pub num_val: usize,
    pub num_params: usize,
    #[serde(skip)]
    pub seconds: f64,
}

/// Both phases from a fresh model; writes `encoders.json`, `model.json` and
/// the per-phase CSV logs into `out_dir` when given.
pub fn train_all<T: Real>(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    data: &TrainData<T>,
    out_dir: Option<&Path>,
) -> Result<(Ipgn, ParamStore<T>, TrainSummary)> {
    let start = std::time::Instant::now();
    if let Some(d) = out_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    if data.train.is_empty() {
        return Err(Error::Invalid("no training trees".into()));
    }
    let mut store = ParamStore::new();
    let model = Ipgn::new(&mut store, model_cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let mut phases = train_encoders(&model, &mut store, data, cfg, out_dir)?;
    phases.push(train_ipgn(&model, &mut store, data, cfg, out_dir)?);
    let summary = TrainSummary {
        phases,
        num_train: data.train.len(),
        num_val: data.val.len(),
        num_params: store.num_scalars(),
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((model, store, summary))
}

/// Moves every weight off its initialization. Attention vectors start so
/// small that the softmax is nearly uniform and their gradients sink into
/// the rounding noise of the loss, so they are redrawn at a larger scale.
fn perturb(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let attention = store.get(id).name.contains(".att_");
        for w in store.get_mut(id).value.data_mut() {
            if attention {
                *w = rng.gen_range(-1.0..1.0);
            } else {
                *w += rng.gen_range(-0.05..0.05);
            }
        }
    }
}

/// Central-difference check of the complete joint loss (point, node, edge
/// and implicit terms) in `f64`. Every weight is jittered off its
/// initialization first: zero biases put ReLU inputs of zero offsets exactly
/// on the kink, where differences are meaningless.
pub fn gradcheck_ipgn(
    model_cfg: &ModelConfig,
    scene: &Scene<f64>,
    implicit_points: usize,
    seed: u64,
    tolerance: f64,
    max_per_param: usize,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let model = Ipgn::new(&mut store, model_cfg, &mut rng)?;
    perturb(&mut store, &mut rng);
    let batch =
        sample_batch(scene, model_cfg.implicit.sample_points, implicit_points, &Augmentation::identity(), &mut rng);
    let (input, targets) = model_step(&model, scene, batch)?;
    grad_check(
        &mut store,
        |s| {
            let mut g = Graph::new();
            let (loss, _, _) = model.loss(&mut g, s, &input, &targets)?;
            Ok((g, loss))
        },
        tolerance,
        max_per_param,
    )
}

/// Gradient check of one layer type in isolation.
#[derive(Debug, Clone, Serialize)]
pub struct LayerCheck {
    pub layer: String,
    pub report: GradCheckReport,
}

/// Checks each building block on its own: linear, MLP, graph attention, the
/// two encoders, both halves of a fusion layer and the implicit head. Inputs
/// are parameters too, so input gradients are covered, and every block is
/// scored with cross-entropy against random labels.
pub fn gradcheck_layers(
    model_cfg: &ModelConfig,
    scene: &Scene<f64>,
    implicit_points: usize,
    seed: u64,
    tolerance: f64,
    max_per_param: usize,
) -> Result<Vec<LayerCheck>> {
    model_cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = sample_batch(
        scene,
        model_cfg.implicit.sample_points,
        implicit_points.max(1),
        &Augmentation::identity(),
        &mut rng,
    );
    let queries = batch.queries.clone();
    let probe = Ipgn::new(&mut ParamStore::<f64>::new(), model_cfg, &mut rng)?;
    let (input, _) = model_step(&probe, scene, batch)?;
    let query_plan = Arc::new(idw_plan(&SpatialIndex::build(input.points.clone())?, &queries, &probe.propagation()));
    let prep = Arc::new(input.prep);
    let (m, n) = (prep.num_points(), prep.num_nodes());
    let d = model_cfg.fusion.width;
    let enc = &model_cfg.encoder;
    let heads = enc.heads;
    let stages = probe.stage_mask().len();

    type Block = Box<dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>>;
    let mut checks = Vec::new();
    let mut run = |name: &str, store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, block: Block| -> Result<()> {
        perturb(store, rng);
        let mut g = Graph::new();
        let out = block(&mut g, store)?;
        let [rows, cols] = g.shape(out);
        let labels = Arc::new((0..rows).map(|_| rng.gen_range(0..cols)).collect::<Vec<_>>());
        let report = grad_check(
            store,
            |s| {
                let mut g = Graph::new();
                let y = block(&mut g, s)?;
                let l = g.cross_entropy(y, labels.clone())?;
                Ok((g, l))
            },
            tolerance,
            max_per_param,
        )?;
        checks.push(LayerCheck { layer: name.into(), report });
        Ok(())
    };
    let rand_input = |store: &mut ParamStore<f64>, name: &str, r: usize, c: usize, rng: &mut ChaCha8Rng| {
        store.add(name, Tensor::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())?)
    };

    let mut s = ParamStore::new();
    let x = rand_input(&mut s, "x", n, d, &mut rng)?;
    let lin = crate::nn::Linear::new(&mut s, "linear", d, model_cfg.num_classes(), &mut rng)?;
    run(
        "linear",
        &mut s,
        &mut rng,
        Box::new(move |g, s| {
            let xv = g.param(s, x);
            lin.forward(g, s, xv)
        }),
    )?;

    let mut s = ParamStore::new();
    let x = rand_input(&mut s, "x", n, d, &mut rng)?;
    let mlp = crate::nn::Mlp::new(&mut s, "mlp", &[d, d, model_cfg.num_classes()], false, &mut rng)?;
    run(
        "mlp",
        &mut s,
        &mut rng,
        Box::new(move |g, s| {
            let xv = g.param(s, x);
            mlp.forward(g, s, xv)
        }),
    )?;

    let mut s = ParamStore::new();
    let x = rand_input(&mut s, "x", n, d, &mut rng)?;
    let gat = crate::nn::GatLayer::new(&mut s, "gat", d, heads, d / heads, &mut rng)?;
    let adj = prep.adjacency.clone();
    run(
        "graph_attention",
        &mut s,
        &mut rng,
        Box::new(move |g, s| {
            let xv = g.param(s, x);
            gat.forward(g, s, xv, &adj)
        }),
    )?;

    let mut s = ParamStore::new();
    let pe = crate::nn::PointEncoder::new(&mut s, "point", enc, model_cfg.num_classes(), &mut rng)?;
    let plan = prep.clone();
    run("point_encoder", &mut s, &mut rng, Box::new(move |g, s| pe.forward(g, s, &plan.point_plan)))?;

    let mut s = ParamStore::new();
    let ge = crate::nn::GraphEncoder::new(&mut s, "graph", enc, model_cfg.num_classes(), &mut rng)?;
    let (adj, coords) = (prep.adjacency.clone(), prep.node_coords.clone());
    run(
        "graph_encoder",
        &mut s,
        &mut rng,
        Box::new(move |g, s| {
            let c = g.input(coords.clone());
            ge.forward(g, s, c, &adj)
        }),
    )?;

    for half in ["point_to_graph", "graph_to_point"] {
        let mut s = ParamStore::new();
        let p = rand_input(&mut s, "p", m, d, &mut rng)?;
        let q = rand_input(&mut s, "g", n, d, &mut rng)?;
        let layer = crate::fusion::FusionLayer::new(&mut s, "fuse", d, heads, &mut rng)?;
        let prep = prep.clone();
        let to_graph = half == "point_to_graph";
        run(
            half,
            &mut s,
            &mut rng,
            Box::new(move |g, s| {
                let (pv, gv) = (g.param(s, p), g.param(s, q));
                if to_graph {
                    layer.point_to_graph(g, s, pv, gv, &prep)
                } else {
                    layer.graph_to_point(g, s, pv, gv, &prep)
                }
            }),
        )?;
    }

    let mut s = ParamStore::new();
    let z = rand_input(&mut s, "z", m, stages * d, &mut rng)?;
    let mut dims = vec![stages * d];
    dims.extend(&model_cfg.implicit.hidden);
    dims.push(model_cfg.num_classes());
    let head = crate::nn::Mlp::new(&mut s, "implicit", &dims, false, &mut rng)?;
    run(
        "implicit_head",
        &mut s,
        &mut rng,
        Box::new(move |g, s| {
            let zv = g.param(s, z);
            let zq = g.interp(zv, query_plan.clone())?;
            head.forward(g, s, zq)
        }),
    )?;
    Ok(checks)
}
