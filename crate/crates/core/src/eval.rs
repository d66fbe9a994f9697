//! Segmentation metrics, the nearest-graph-element baseline and the
//! reconstruction speed benchmark.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::implicit::{implicit_labels, logits_to_labels, reconstruct_scene, repeated_inference_scene, Ipgn, Scene};
use crate::nn::ParamStore;
use crate::scalar::Real;
use crate::skeleton::SkeletonGraph;
use crate::spatial::SpatialIndex;
use crate::volume::{LabelVolume, Voxel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiceMode {
    Micro,
    Macro,
}

/// Percentage of entries whose prediction matches, skipping entries whose
/// true label is in `ignore`.
pub fn accuracy(pred: &[u8], truth: &[u8], ignore: &[u8]) -> Result<f64> {
    check_lengths(pred, truth)?;
    let mut total = 0usize;
    let mut correct = 0usize;
    for (&p, &t) in pred.iter().zip(truth) {
        if ignore.contains(&t) {
            continue;
        }
        total += 1;
        correct += (p == t) as usize;
    }
    if total == 0 {
        return Err(Error::Invalid("every entry is ignored".into()));
    }
    Ok(100.0 * correct as f64 / total as f64)
}

fn check_lengths(pred: &[u8], truth: &[u8]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    Ok(())
}

/// True positives, false positives and false negatives per listed class.
fn confusion(pred: &[u8], truth: &[u8], classes: &[u8]) -> Vec<[usize; 3]> {
    let mut slot = [usize::MAX; 256];
    for (i, &c) in classes.iter().enumerate() {
        slot[c as usize] = i;
    }
    let mut counts = vec![[0usize; 3]; classes.len()];
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            if slot[t as usize] != usize::MAX {
                counts[slot[t as usize]][0] += 1;
            }
            continue;
        }
        if slot[p as usize] != usize::MAX {
            counts[slot[p as usize]][1] += 1;
        }
        if slot[t as usize] != usize::MAX {
            counts[slot[t as usize]][2] += 1;
        }
    }
    counts
}

fn ratio(tp: usize, fp: usize, fn_: usize) -> Option<f64> {
    let den = 2 * tp + fp + fn_;
    (den > 0).then(|| 100.0 * 2.0 * tp as f64 / den as f64)
}

/// Dice per listed class; `None` where the class occurs in neither input.
pub fn per_class_dice(pred: &[u8], truth: &[u8], classes: &[u8]) -> Result<Vec<Option<f64>>> {
    check_lengths(pred, truth)?;
    Ok(confusion(pred, truth, classes).iter().map(|&[tp, fp, fn_]| ratio(tp, fp, fn_)).collect())
}

/// Micro dice pools counts over `classes`; macro averages per-class dice over
/// the classes that occur in either input. Both are 100 when no listed
/// class occurs at all.
pub fn dice(pred: &[u8], truth: &[u8], classes: &[u8], mode: DiceMode) -> Result<f64> {
    check_lengths(pred, truth)?;
    if classes.is_empty() {
        return Err(Error::Invalid("dice needs at least one class".into()));
    }
    let counts = confusion(pred, truth, classes);
    Ok(match mode {
        DiceMode::Micro => {
            let sum = counts.iter().fold([0; 3], |a, c| [a[0] + c[0], a[1] + c[1], a[2] + c[2]]);
            ratio(sum[0], sum[1], sum[2]).unwrap_or(100.0)
        }
        DiceMode::Macro => {
            let present: Vec<f64> = counts.iter().filter_map(|&[tp, fp, fn_]| ratio(tp, fp, fn_)).collect();
            if present.is_empty() {
                100.0
            } else {
                present.iter().sum::<f64>() / present.len() as f64
            }
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphMetrics {
    pub node_accuracy: f64,
    pub node_dice: f64,
    pub edge_accuracy: f64,
    /// `None` for graphs without edges.
    pub edge_dice: Option<f64>,
    pub num_nodes: usize,
    pub num_edges: usize,
}

/// Node and edge accuracy plus micro dice over `classes`, for two labelings
/// of the same graph.
pub fn graph_metrics(pred: &SkeletonGraph, truth: &SkeletonGraph, classes: &[u8]) -> Result<GraphMetrics> {
    if pred.num_nodes() != truth.num_nodes() || pred.num_edges() != truth.num_edges() {
        return Err(Error::TopologyMismatch(format!(
            "{} nodes / {} edges against {} / {}",
            pred.num_nodes(),
            pred.num_edges(),
            truth.num_nodes(),
            truth.num_edges()
        )));
    }
    if pred.edge_endpoints() != truth.edge_endpoints() {
        return Err(Error::TopologyMismatch("edge endpoints differ".into()));
    }
    let (pn, tn) = (pred.node_labels(), truth.node_labels());
    let (pe, te) = (pred.edge_labels(), truth.edge_labels());
    let edge_accuracy = if te.is_empty() { 100.0 } else { accuracy(&pe, &te, &[])? };
    Ok(GraphMetrics {
        node_accuracy: accuracy(&pn, &tn, &[])?,
        node_dice: dice(&pn, &tn, classes, DiceMode::Micro)?,
        edge_accuracy,
        edge_dice: if te.is_empty() { None } else { Some(dice(&pe, &te, classes, DiceMode::Micro)?) },
        num_nodes: tn.len(),
        num_edges: te.len(),
    })
}

/// Graph elements as voxel lists: nodes first (by id), then edges.
fn graph_elements(graph: &SkeletonGraph) -> Vec<(u8, Vec<Voxel>)> {
    let nodes = graph.nodes.iter().map(|n| {
        let voxels = if n.members.is_empty() { vec![n.voxel] } else { n.members.clone() };
        (n.label, voxels)
    });
    let edges = graph.edges.iter().map(|e| (e.label, e.path.clone()));
    nodes.chain(edges).collect()
}

/// Labels each foreground voxel of `vol` with the label of the nearest
/// graph element (node voxels and edge-path voxels), ties to the smaller
/// element id with nodes numbered before edges.
pub fn dilate_graph_prediction(graph: &SkeletonGraph, vol: &LabelVolume) -> Result<LabelVolume> {
    if graph.is_empty() {
        return Err(Error::EmptyGraph);
    }
    let spacing = vol.spacing();
    let phys = |v: Voxel| -> [f64; 3] { std::array::from_fn(|a| v[a] as f64 * spacing[a]) };
    let mut points = Vec::new();
    let mut owner = Vec::new();
    for (label, voxels) in graph_elements(graph) {
        for v in voxels {
            points.push(phys(v));
            owner.push(label);
        }
    }
    let index = SpatialIndex::build(points)?;
    let num_classes = graph.nodes.iter().map(|n| n.label).chain(graph.edges.iter().map(|e| e.label)).max().unwrap_or(1);
    let mut out = LabelVolume::zeros(vol.dims(), spacing, vol.num_classes().max(num_classes));
    for (v, _) in vol.foreground_voxels() {
        let nearest = index.knn(&phys(v), 1)?;
        out.set(v, owner[nearest[0].id]);
    }
    Ok(out)
}

/// Which classes the headline dice numbers cover.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    /// Classes pooled into micro dice; `None` means `1..C` (every class but
    /// the trunk class `C`).
    #[serde(default)]
    pub micro_classes: Option<Vec<u8>>,
}

impl EvalOptions {
    pub fn micro_classes(&self, num_classes: u8) -> Vec<u8> {
        match &self.micro_classes {
            Some(c) => c.clone(),
            None if num_classes > 1 => (1..num_classes).collect(),
            None => vec![1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub point_accuracy: f64,
    pub micro_dice: f64,
    pub micro_classes: Vec<u8>,
    pub macro_dice: f64,
    /// Dice per class `1..=C`; `None` where the class occurs nowhere.
    pub per_class_dice: Vec<Option<f64>>,
    pub num_voxels: usize,
    pub num_classes: u8,
    pub graph: Option<GraphMetrics>,
}

/// Compares two label volumes over the true foreground.
pub fn evaluate_volumes(pred: &LabelVolume, truth: &LabelVolume, opts: &EvalOptions) -> Result<EvalReport> {
    if pred.dims() != truth.dims() {
        return Err(Error::Shape(format!("prediction dims {:?}, truth dims {:?}", pred.dims(), truth.dims())));
    }
    let (mut p, mut t) = (Vec::new(), Vec::new());
    for (&a, &b) in pred.data().iter().zip(truth.data()) {
        if b != 0 {
            p.push(a);
            t.push(b);
        }
    }
    evaluate_labels(&p, &t, truth.num_classes().max(pred.num_classes()), opts)
}

/// Metrics over paired foreground labels.
pub fn evaluate_labels(pred: &[u8], truth: &[u8], num_classes: u8, opts: &EvalOptions) -> Result<EvalReport> {
    let all: Vec<u8> = (1..=num_classes).collect();
    let micro_classes = opts.micro_classes(num_classes);
    Ok(EvalReport {
        point_accuracy: accuracy(pred, truth, &[0])?,
        micro_dice: dice(pred, truth, &micro_classes, DiceMode::Micro)?,
        micro_classes,
        macro_dice: dice(pred, truth, &all, DiceMode::Macro)?,
        per_class_dice: per_class_dice(pred, truth, &all)?,
        num_voxels: truth.len(),
        num_classes,
        graph: None,
    })
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "voxels        {}\naccuracy      {:.2}\nmicro dice    {:.2}  (classes {:?})\nmacro dice    {:.2}\n",
            self.num_voxels, self.point_accuracy, self.micro_dice, self.micro_classes, self.macro_dice
        );
        for (i, d) in self.per_class_dice.iter().enumerate() {
            match d {
                Some(d) => s += &format!("  class {:>2}    {d:.2}\n", i + 1),
                None => s += &format!("  class {:>2}    -\n", i + 1),
            }
        }
        if let Some(g) = &self.graph {
            s += &format!(
                "node accuracy {:.2}\nnode dice     {:.2}\nedge accuracy {:.2}\n",
                g.node_accuracy, g.node_dice, g.edge_accuracy
            );
        }
        s
    }

    /// `accuracy,micro_dice,macro_dice,voxels` without a header.
    pub fn csv_row(&self) -> String {
        format!("{:.4},{:.4},{:.4},{}", self.point_accuracy, self.micro_dice, self.macro_dice, self.num_voxels)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchEntry {
    pub name: String,
    pub foreground: usize,
    /// Graph extraction, shared by both methods and not part of the timings.
    pub preprocess_seconds: f64,
    pub implicit_seconds: f64,
    pub repeated_seconds: f64,
    pub speedup: f64,
    pub implicit_passes: usize,
    pub repeated_passes: usize,
    pub implicit_accuracy: f64,
    pub repeated_accuracy: f64,
    pub accuracy_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub runs: usize,
    pub sample_points: usize,
    pub threads: usize,
    pub entries: Vec<BenchEntry>,
}

impl BenchReport {
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<16} {:>9} {:>10} {:>10} {:>8} {:>7} {:>8} {:>8}\n",
            "volume", "voxels", "implicit", "repeated", "speedup", "passes", "acc imp", "acc rep"
        );
        for e in &self.entries {
            s += &format!(
                "{:<16} {:>9} {:>9.3}s {:>9.3}s {:>7.2}x {:>3}/{:<3} {:>8.2} {:>8.2}\n",
                e.name,
                e.foreground,
                e.implicit_seconds,
                e.repeated_seconds,
                e.speedup,
                e.implicit_passes,
                e.repeated_passes,
                e.implicit_accuracy,
                e.repeated_accuracy
            );
        }
        s
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Times implicit against repeated-inference reconstruction on labeled
/// volumes, `runs` times each, serially. Graph extraction happens before the
/// timers start; every run reuses the same sampling seed.
pub fn bench_reconstruction<T: Real>(
    model: &Ipgn,
    store: &ParamStore<T>,
    volumes: &[(String, LabelVolume)],
    runs: usize,
    seed: u64,
) -> Result<BenchReport> {
    if runs == 0 {
        return Err(Error::Config("bench needs at least one run".into()));
    }
    let mut entries = Vec::new();
    for (name, vol) in volumes {
        let t0 = Instant::now();
        let scene = Scene::<T>::from_volume(&vol.binarized(), false)?;
        let preprocess_seconds = t0.elapsed().as_secs_f64();
        let truth: Vec<u8> = scene.voxels.iter().map(|&v| vol.get(v)).collect();
        let timed = |repeated: bool| -> Result<(f64, usize, f64)> {
            let mut times = Vec::with_capacity(runs);
            let mut last = None;
            for _ in 0..runs {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let start = Instant::now();
                let rec = if repeated {
                    repeated_inference_scene(vol, &scene, model, store, &mut rng)?
                } else {
                    reconstruct_scene(vol, &scene, model, store, &mut rng)?
                };
                times.push(start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE));
                last = Some(rec);
            }
            let rec = last.unwrap();
            let pred: Vec<u8> = scene.voxels.iter().map(|&v| rec.volume.get(v)).collect();
            Ok((median(times), rec.backbone_passes, accuracy(&pred, &truth, &[0])?))
        };
        let (implicit_seconds, implicit_passes, implicit_accuracy) = timed(false)?;
        let (repeated_seconds, repeated_passes, repeated_accuracy) = timed(true)?;
        log::info!("bench {name}: implicit {implicit_seconds:.3}s, repeated {repeated_seconds:.3}s");
        entries.push(BenchEntry {
            name: name.clone(),
            foreground: scene.voxels.len(),
            preprocess_seconds,
            implicit_seconds,
            repeated_seconds,
            speedup: repeated_seconds / implicit_seconds,
            implicit_passes,
            repeated_passes,
            implicit_accuracy,
            repeated_accuracy,
            accuracy_gap: (implicit_accuracy - repeated_accuracy).abs(),
        });
    }
    Ok(BenchReport {
        runs,
        sample_points: model.cfg.implicit.sample_points,
        threads: rayon::current_num_threads(),
        entries,
    })
}

/// Scores for one held-out tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeEval {
    pub name: String,
    pub voxels: usize,
    pub implicit_accuracy: f64,
    pub repeated_accuracy: f64,
    pub node_accuracy: f64,
    pub edge_accuracy: f64,
    /// Nearest-graph-element labels from the predicted graph labels.
    pub dilation_accuracy: f64,
    /// The same with ground-truth graph labels.
    pub dilation_truth_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub trees: usize,
    /// Implicit reconstruction pooled over all trees, with graph metrics.
    pub implicit: EvalReport,
    pub repeated_accuracy: f64,
    /// |implicit − repeated| point accuracy, percentage points.
    pub consistency_gap: f64,
    pub majority_class: u8,
    /// Accuracy of always predicting the most frequent class.
    pub majority_baseline: f64,
    pub dilation_accuracy: f64,
    pub dilation_truth_accuracy: f64,
    pub per_tree: Vec<TreeEval>,
}

fn labels_at(vol: &LabelVolume, voxels: &[Voxel]) -> Vec<u8> {
    voxels.iter().map(|&v| vol.get(v)).collect()
}

fn with_labels(graph: &SkeletonGraph, nodes: &[u8], edges: &[u8]) -> SkeletonGraph {
    let mut g = graph.clone();
    for (n, &l) in g.nodes.iter_mut().zip(nodes) {
        n.label = l;
    }
    for (e, &l) in g.edges.iter_mut().zip(edges) {
        e.label = l;
    }
    g
}

/// Reconstructs every labeled volume both ways and scores the results.
///
/// The model only sees the binary foreground and its skeleton graph; labels
/// are used for scoring. Each tree draws its samples from `seed` and its
/// position in `volumes`.
pub fn evaluate_dataset<T: Real>(
    model: &Ipgn,
    store: &ParamStore<T>,
    volumes: &[(String, LabelVolume)],
    opts: &EvalOptions,
    seed: u64,
) -> Result<DatasetReport> {
    if volumes.is_empty() {
        return Err(Error::Invalid("no volumes to evaluate".into()));
    }
    let num_classes = model.cfg.num_classes() as u8;
    let mut pooled = [Vec::new(), Vec::new()];
    let mut nodes = [Vec::new(), Vec::new()];
    let mut edges = [Vec::new(), Vec::new()];
    let mut repeated_hits = 0usize;
    let mut dilation_hits = [0usize; 2];
    let mut per_tree = Vec::new();
    for (i, (name, vol)) in volumes.iter().enumerate() {
        let scene = Scene::<T>::from_volume(vol, true)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let (pred, inference) = implicit_labels(&scene, model, store, &mut rng)?;
        let repeated = repeated_inference_scene(vol, &scene, model, store, &mut rng)?;
        let repeated = labels_at(&repeated.volume, &scene.voxels);
        let node_pred = logits_to_labels(&inference.node_logits);
        let edge_pred = inference.edge_logits.as_ref().map(logits_to_labels).unwrap_or_default();
        let graph_pred = with_labels(&scene.graph, &node_pred, &edge_pred);
        let gm = graph_metrics(&graph_pred, &scene.graph, &opts.micro_classes(num_classes))?;
        let dilated = labels_at(&dilate_graph_prediction(&graph_pred, vol)?, &scene.voxels);
        let dilated_truth = labels_at(&dilate_graph_prediction(&scene.graph, vol)?, &scene.voxels);
        let truth = &scene.labels;
        let hits = |p: &[u8]| p.iter().zip(truth).filter(|(a, b)| a == b).count();
        repeated_hits += hits(&repeated);
        dilation_hits[0] += hits(&dilated);
        dilation_hits[1] += hits(&dilated_truth);
        per_tree.push(TreeEval {
            name: name.clone(),
            voxels: truth.len(),
            implicit_accuracy: accuracy(&pred, truth, &[0])?,
            repeated_accuracy: accuracy(&repeated, truth, &[0])?,
            node_accuracy: gm.node_accuracy,
            edge_accuracy: gm.edge_accuracy,
            dilation_accuracy: accuracy(&dilated, truth, &[0])?,
            dilation_truth_accuracy: accuracy(&dilated_truth, truth, &[0])?,
        });
        pooled[0].extend(pred);
        pooled[1].extend_from_slice(truth);
        nodes[0].extend(node_pred);
        nodes[1].extend(scene.graph.node_labels());
        edges[0].extend(edge_pred);
        edges[1].extend(scene.graph.edge_labels());
    }
    let total = pooled[1].len() as f64;
    let mut implicit = evaluate_labels(&pooled[0], &pooled[1], num_classes, opts)?;
    let micro = opts.micro_classes(num_classes);
    implicit.graph = Some(GraphMetrics {
        node_accuracy: accuracy(&nodes[0], &nodes[1], &[])?,
        node_dice: dice(&nodes[0], &nodes[1], &micro, DiceMode::Micro)?,
        edge_accuracy: if edges[1].is_empty() { 100.0 } else { accuracy(&edges[0], &edges[1], &[])? },
        edge_dice: if edges[1].is_empty() { None } else { Some(dice(&edges[0], &edges[1], &micro, DiceMode::Micro)?) },
        num_nodes: nodes[1].len(),
        num_edges: edges[1].len(),
    });
    let mut hist = [0usize; 256];
    for &l in &pooled[1] {
        hist[l as usize] += 1;
    }
    // Ties go to the smaller class.
    let majority_class = (1..=255u8).rev().max_by_key(|&c| hist[c as usize]).unwrap_or(1);
    let repeated_accuracy = 100.0 * repeated_hits as f64 / total;
    Ok(DatasetReport {
        trees: volumes.len(),
        consistency_gap: (implicit.point_accuracy - repeated_accuracy).abs(),
        implicit,
        repeated_accuracy,
        majority_class,
        majority_baseline: 100.0 * hist[majority_class as usize] as f64 / total,
        dilation_accuracy: 100.0 * dilation_hits[0] as f64 / total,
        dilation_truth_accuracy: 100.0 * dilation_hits[1] as f64 / total,
        per_tree,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::{GraphEdge, GraphNode};
    use rand::Rng;

    fn brute_accuracy(p: &[u8], t: &[u8], ignore: &[u8]) -> f64 {
        let kept: Vec<usize> = (0..t.len()).filter(|&i| !ignore.contains(&t[i])).collect();
        100.0 * kept.iter().filter(|&&i| p[i] == t[i]).count() as f64 / kept.len() as f64
    }

    #[test]
    fn accuracy_basic_cases() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3], &[]).unwrap(), 100.0);
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 4, 3], &[]).unwrap(), 50.0);
        assert_eq!(accuracy(&[5, 2], &[0, 2], &[0]).unwrap(), 100.0);
        assert!(matches!(accuracy(&[1], &[1, 2], &[]), Err(Error::Shape(_))));
        assert!(matches!(accuracy(&[1], &[0], &[0]), Err(Error::Invalid(_))));
    }

    #[test]
    fn accuracy_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let n = rng.gen_range(1..60);
            let p: Vec<u8> = (0..n).map(|_| rng.gen_range(0..5)).collect();
            let mut t: Vec<u8> = (0..n).map(|_| rng.gen_range(0..5)).collect();
            t[0] = 1;
            assert_eq!(accuracy(&p, &t, &[0]).unwrap(), brute_accuracy(&p, &t, &[0]));
        }
    }

    #[test]
    fn dice_hand_example() {
        let (p, t) = ([1, 1, 2, 2], [1, 2, 1, 2]);
        assert_eq!(dice(&p, &t, &[1, 2], DiceMode::Micro).unwrap(), 50.0);
        assert_eq!(dice(&p, &t, &[1, 2], DiceMode::Macro).unwrap(), 50.0);
        assert_eq!(dice(&p, &p, &[1, 2], DiceMode::Micro).unwrap(), 100.0);
        assert_eq!(dice(&p, &p, &[1, 2], DiceMode::Macro).unwrap(), 100.0);
        assert_eq!(dice(&[1, 1], &[2, 2], &[1, 2], DiceMode::Micro).unwrap(), 0.0);
        assert_eq!(dice(&[1, 1], &[2, 2], &[1, 2], DiceMode::Macro).unwrap(), 0.0);
        assert!(dice(&p, &t, &[], DiceMode::Micro).is_err());
    }

    #[test]
    fn macro_dice_skips_absent_classes() {
        // Class 3 never occurs; class 1 is perfect, class 2 has dice 2/3.
        let p = [1, 2, 2];
        let t = [1, 2, 1];
        let per = per_class_dice(&p, &t, &[1, 2, 3]).unwrap();
        assert_eq!(per[2], None);
        let want = (per[0].unwrap() + per[1].unwrap()) / 2.0;
        assert!((dice(&p, &t, &[1, 2, 3], DiceMode::Macro).unwrap() - want).abs() < 1e-12);
        assert!((per[1].unwrap() - 200.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn micro_dice_over_all_classes_equals_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let n = rng.gen_range(1..200);
            let p: Vec<u8> = (0..n).map(|_| rng.gen_range(1..8)).collect();
            let t: Vec<u8> = (0..n).map(|_| rng.gen_range(1..8)).collect();
            let all: Vec<u8> = (1..8).collect();
            let d = dice(&p, &t, &all, DiceMode::Micro).unwrap();
            assert!((d - accuracy(&p, &t, &[]).unwrap()).abs() < 1e-9);
        }
    }

    fn line_graph(labels: &[u8], edge_labels: &[u8]) -> SkeletonGraph {
        let nodes = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| GraphNode {
                id: i,
                voxel: [i * 2, 0, 0],
                coord: [i as f64, 0.0, 0.0],
                label: l,
                members: vec![],
            })
            .collect();
        let edges = edge_labels
            .iter()
            .enumerate()
            .map(|(i, &l)| GraphEdge { id: i, u: i, v: i + 1, label: l, path: vec![[i * 2 + 1, 0, 0]] })
            .collect();
        SkeletonGraph::new(nodes, edges).unwrap()
    }

    #[test]
    fn graph_metrics_cases() {
        let t = line_graph(&[1, 2, 2], &[1, 2]);
        let m = graph_metrics(&t, &t, &[1, 2]).unwrap();
        assert_eq!((m.node_accuracy, m.edge_accuracy), (100.0, 100.0));
        let p = line_graph(&[1, 2, 2], &[1, 1]);
        let m = graph_metrics(&p, &t, &[1, 2]).unwrap();
        assert_eq!(m.edge_accuracy, 50.0);
        assert_eq!(m.node_accuracy, 100.0);
        let other = line_graph(&[1, 2], &[1]);
        assert!(matches!(graph_metrics(&other, &t, &[1, 2]), Err(Error::TopologyMismatch(_))));
    }

    #[test]
    fn graph_metrics_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.gen_range(2..12);
            let mut lab = |k: usize| -> Vec<u8> { (0..k).map(|_| rng.gen_range(1..4)).collect() };
            let (tn, te, pn, pe) = (lab(n), lab(n - 1), lab(n), lab(n - 1));
            let m = graph_metrics(&line_graph(&pn, &pe), &line_graph(&tn, &te), &[1, 2, 3]).unwrap();
            assert_eq!(m.node_accuracy, brute_accuracy(&pn, &tn, &[]));
            assert_eq!(m.edge_accuracy, brute_accuracy(&pe, &te, &[]));
        }
    }

    #[test]
    fn dilation_single_node_labels_everything() {
        let mut vol = LabelVolume::zeros([4, 4, 4], [1.0; 3], 3);
        for v in [[0, 0, 0], [3, 3, 3], [1, 2, 0]] {
            vol.set(v, 1);
        }
        let g = SkeletonGraph::new(
            vec![GraphNode { id: 0, voxel: [0, 0, 0], coord: [0.0; 3], label: 3, members: vec![] }],
            vec![],
        )
        .unwrap();
        let out = dilate_graph_prediction(&g, &vol).unwrap();
        assert!(out.foreground_voxels().iter().all(|&(_, l)| l == 3));
        assert_eq!(out.foreground_count(), 3);
        let empty = SkeletonGraph::new(vec![], vec![]).unwrap();
        assert!(matches!(dilate_graph_prediction(&empty, &vol), Err(Error::EmptyGraph)));
    }

    #[test]
    fn dilation_edge_voxel_takes_edge_label() {
        let g = line_graph(&[1, 1], &[2]);
        let mut vol = LabelVolume::zeros([4, 2, 2], [1.0; 3], 2);
        for x in 0..3 {
            vol.set([x, 0, 0], 1);
        }
        let out = dilate_graph_prediction(&g, &vol).unwrap();
        assert_eq!(out.get([1, 0, 0]), 2);
        assert_eq!(out.get([0, 0, 0]), 1);
    }

    #[test]
    fn dilation_matches_brute_force_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n = rng.gen_range(2..6);
            let nodes: Vec<GraphNode> = (0..n)
                .map(|i| GraphNode {
                    id: i,
                    voxel: [rng.gen_range(0..10), rng.gen_range(0..10), rng.gen_range(0..10)],
                    coord: [0.0; 3],
                    label: rng.gen_range(1..5),
                    members: vec![],
                })
                .collect();
            let edges: Vec<GraphEdge> = (0..n - 1)
                .map(|i| GraphEdge {
                    id: i,
                    u: i,
                    v: i + 1,
                    label: rng.gen_range(1..5),
                    path: (0..3).map(|_| [rng.gen_range(0..10), rng.gen_range(0..10), rng.gen_range(0..10)]).collect(),
                })
                .collect();
            let g = SkeletonGraph::new(nodes, edges).unwrap();
            let mut vol = LabelVolume::zeros([10, 10, 10], [1.0, 1.0, 2.0], 4);
            for _ in 0..100 {
                vol.set([rng.gen_range(0..10), rng.gen_range(0..10), rng.gen_range(0..10)], 1);
            }
            let out = dilate_graph_prediction(&g, &vol).unwrap();
            let elements = graph_elements(&g);
            for (v, _) in vol.foreground_voxels() {
                let mut best = (f64::INFINITY, 0u8);
                for (label, voxels) in &elements {
                    for w in voxels {
                        let d: f64 = (0..3).map(|a| ((v[a] as f64 - w[a] as f64) * vol.spacing()[a]).powi(2)).sum();
                        if d < best.0 {
                            best = (d, *label);
                        }
                    }
                }
                assert_eq!(out.get(v), best.1);
            }
        }
    }

    #[test]
    fn report_bounds_and_counts() {
        let t = [1u8, 2, 3, 3, 1];
        let p = [1u8, 2, 3, 1, 1];
        let r = evaluate_labels(&p, &t, 3, &EvalOptions::default()).unwrap();
        assert_eq!(r.num_voxels, 5);
        assert_eq!(r.micro_classes, vec![1, 2]);
        for x in [r.point_accuracy, r.micro_dice, r.macro_dice] {
            assert!((0.0..=100.0).contains(&x));
        }
        assert_eq!(r.point_accuracy, 80.0);
    }

    #[test]
    fn median_of_three() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0]), 2.5);
    }
}
