//! Staged training: the mesh-edge GNN, then the policy on the action loss,
//! then the success classifier on top of the frozen policy.

mod checkpoint;

pub use checkpoint::{Checkpoint, Stage, STAGE_TENSOR};

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cloth_sim::DepthImage;
use crate::error::{contract, Error, Result};
use crate::graph::{mesh_edge_labels, EdgeGnn, GraphObservation};
use crate::lang::Language;
use crate::model::{action_loss, argmax, PolicyModel, SUCCESS_PREFIX, WIDTH};
use crate::oracle::{derive_seed, make_targets, Demonstration, SupervisionTargets};
use crate::spatial::Vec3;
use crate::tensor::{AdamConfig, AdamState, ParamId, ParamStore, Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f32,
    pub batch: usize,
    pub edge_epochs: usize,
    pub policy_epochs: usize,
    pub success_epochs: usize,
    pub seed: u64,
    pub workers: usize,
    /// Every `holdout_every`-th demonstration is kept out for F1/accuracy reports.
    pub holdout_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            batch: 16,
            edge_epochs: 20,
            policy_epochs: 100,
            success_epochs: 20,
            seed: 0,
            workers: 1,
            holdout_every: 10,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch == 0 || self.workers == 0 || self.holdout_every < 2 {
            return Err(contract(format!("invalid training configuration {self:?}")));
        }
        Ok(())
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| contract(format!("cannot start worker pool: {e}")))
    }
}

/// Splits demonstrations into (training, held-out) by index.
pub fn holdout_split(demos: &[Demonstration], every: usize) -> (Vec<&Demonstration>, Vec<&Demonstration>) {
    let (held, train): (Vec<_>, Vec<_>) = demos.iter().enumerate().partition(|(i, _)| i % every == every - 1);
    (train.into_iter().map(|p| p.1).collect(), held.into_iter().map(|p| p.1).collect())
}

type Grads = Vec<(ParamId, Vec<f32>)>;

const EDGE_STREAM: u64 = 0x6564_6765;
const POLICY_STREAM: u64 = 0x706f_6c69;
const SUCCESS_STREAM: u64 = 0x7375_6363;

/// Minibatch Adam over `samples`. Per-sample gradients are computed on the
/// pool and summed in sample order, so results do not depend on the worker
/// count. Returns the mean loss of every epoch.
fn fit<S: Sync>(
    store: &mut ParamStore,
    samples: &[S],
    epochs: usize,
    cfg: &TrainConfig,
    stream: u64,
    label: &str,
    loss_grad: impl Fn(&ParamStore, &S) -> Result<(f32, Grads)> + Sync,
) -> Result<Vec<f32>> {
    if samples.is_empty() {
        return Err(contract(format!("{label}: no training samples")));
    }
    let pool = cfg.pool()?;
    let adam_cfg = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };
    let mut adam = AdamState::new(store);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, stream, 0, 0));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        for batch in order.chunks(cfg.batch) {
            let frozen: &ParamStore = store;
            let results: Vec<Result<(f32, Grads)>> =
                pool.install(|| batch.par_iter().map(|&i| loss_grad(frozen, &samples[i])).collect());
            store.zero_grad();
            let scale = 1.0 / batch.len() as f32;
            for r in results {
                let (loss, grads) = r?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite { op: "training loss" });
                }
                total += loss as f64;
                for (id, mut g) in grads {
                    g.iter_mut().for_each(|v| *v *= scale);
                    store.accumulate_grad(id, &g)?;
                }
            }
            adam.step(store, &adam_cfg)?;
        }
        let mean = (total / samples.len() as f64) as f32;
        log::info!("{label} epoch {}/{epochs}: loss {mean:.6}", epoch + 1);
        losses.push(mean);
    }
    Ok(losses)
}


/// One graph with rest-distance mesh labels.
#[derive(Clone, Debug)]
pub struct EdgeSample {
    pub nodes: Vec<Vec3>,
    pub edges: Vec<(usize, usize)>,
    pub labels: Vec<bool>,
}

impl EdgeSample {
    pub fn from_graph(graph: &GraphObservation, demo: &Demonstration, positions: &[Vec3]) -> Result<Self> {
        let labels = mesh_edge_labels(graph, &demo.state_at(positions)?)?;
        Ok(Self { nodes: graph.nodes.clone(), edges: graph.collision_edges.clone(), labels })
    }
}

/// Every observed graph of a demonstration (pre-action steps, failed
/// attempts and the completed fold), so flat and folded states both appear.
pub fn edge_samples<'a>(demos: impl IntoIterator<Item = &'a Demonstration>) -> Result<Vec<EdgeSample>> {
    let mut out = Vec::new();
    for d in demos {
        for s in d.steps.iter().chain(&d.negatives) {
            out.push(EdgeSample::from_graph(&s.graph, d, &s.raw_positions)?);
        }
        let (_, g) = d.terminal_observation()?;
        out.push(EdgeSample::from_graph(&g, d, &d.oracle_final_positions)?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BinaryStats {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl BinaryStats {
    pub fn add(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total().max(1) as f64
    }

    /// F1 of the positive class; 1 when there are no positives to find and none predicted.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

/// Confusion counts of the mesh-edge classifier at probability 0.5.
pub fn edge_stats(gnn: &EdgeGnn, samples: &[EdgeSample]) -> Result<BinaryStats> {
    let mut stats = BinaryStats::default();
    for s in samples {
        let (probs, _) = gnn.forward(&s.nodes, &s.edges)?;
        for (p, &l) in probs.iter().zip(&s.labels) {
            stats.add(*p > 0.5, l);
        }
    }
    Ok(stats)
}

#[derive(Clone, Debug)]
pub struct EdgeReport {
    pub losses: Vec<f32>,
    pub heldout: BinaryStats,
}

pub fn train_edge_gnn_on(train: &[EdgeSample], heldout: &[EdgeSample], cfg: &TrainConfig) -> Result<(EdgeGnn, EdgeReport)> {
    cfg.validate()?;
    let mut gnn = EdgeGnn::new(derive_seed(cfg.seed, EDGE_STREAM, 1, 0));
    let usable: Vec<&EdgeSample> = train.iter().filter(|s| !s.edges.is_empty()).collect();
    let mut store = std::mem::take(&mut gnn.store);
    let losses = fit(&mut store, &usable, cfg.edge_epochs, cfg, EDGE_STREAM, "edge-gnn", |store, s| {
        let mut tape = Tape::new();
        let out = gnn.forward_tape(&mut tape, store, &s.nodes, &s.edges)?;
        let logits = out.edge_logits.ok_or_else(|| contract("edge sample without edges"))?;
        let targets = Tensor::from_fn(&[s.labels.len()], |i| if s.labels[i] { 1.0 } else { 0.0 });
        let l = tape.bce_with_logits(logits, &targets)?;
        let l = tape.mean(l)?;
        Ok((tape.value(l).item(), tape.param_gradients(l)?))
    })?;
    gnn.store = store;
    gnn.store.set_all_requires_grad(false);
    let heldout = edge_stats(&gnn, heldout)?;
    log::info!("edge-gnn held-out F1 {:.4} accuracy {:.4}", heldout.f1(), heldout.accuracy());
    Ok((gnn, EdgeReport { losses, heldout }))
}

/// Stage 1 on demonstrations; every `holdout_every`-th demo is held out.
pub fn train_edge_gnn(demos: &[Demonstration], cfg: &TrainConfig) -> Result<(EdgeGnn, EdgeReport)> {
    if demos.is_empty() {
        return Err(contract("edge GNN training needs at least one demonstration"));
    }
    let (train, held) = holdout_split(demos, cfg.holdout_every);
    train_edge_gnn_on(&edge_samples(train)?, &edge_samples(held)?, cfg)
}

// ------------------------------------------------------------------ policy

/// A policy input with its supervision.
#[derive(Clone, Debug)]
pub struct PolicySample {
    pub tokens: Vec<u16>,
    pub depth: DepthImage,
    pub graph: GraphObservation,
    pub targets: SupervisionTargets,
}

/// Every pre-action step, with graph latents from the frozen `gnn`.
pub fn policy_samples<'a>(demos: impl IntoIterator<Item = &'a Demonstration>, gnn: &EdgeGnn) -> Result<Vec<PolicySample>> {
    let mut out = Vec::new();
    for d in demos {
        for s in &d.steps {
            let mut graph = s.graph.clone();
            gnn.annotate(&mut graph)?;
            out.push(PolicySample {
                tokens: d.instruction.tokens.to_vec(),
                depth: s.depth.clone(),
                graph,
                targets: make_targets(s, false),
            });
        }
    }
    Ok(out)
}

fn policy_loss_grad(model: &PolicyModel, store: &ParamStore, s: &PolicySample) -> Result<(f32, Grads)> {
    let mut tape = Tape::new();
    let v = model.forward_tape(&mut tape, store, &s.tokens, &s.depth, &s.graph)?;
    let l = action_loss(&mut tape, &v, &s.targets.q_pick_gt, &s.targets.q_place_gt)?;
    Ok((tape.value(l).item(), tape.param_gradients(l)?))
}

/// Mean action loss of `model` over `samples` without updating anything.
pub fn policy_loss(model: &PolicyModel, samples: &[PolicySample]) -> Result<f32> {
    let mut total = 0.0f64;
    for s in samples {
        let mut tape = Tape::new();
        let v = model.forward_tape(&mut tape, &model.store, &s.tokens, &s.depth, &s.graph)?;
        let l = action_loss(&mut tape, &v, &s.targets.q_pick_gt, &s.targets.q_place_gt)?;
        total += tape.value(l).item() as f64;
    }
    Ok((total / samples.len().max(1) as f64) as f32)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActionAccuracy {
    /// Fraction of samples whose pick argmax is the target node.
    pub pick: f64,
    /// Fraction of samples whose place argmax is within `2` pixels (Chebyshev) of the target peak.
    pub place_within_2px: f64,
}

pub fn action_accuracy(model: &PolicyModel, samples: &[PolicySample]) -> Result<ActionAccuracy> {
    let (mut pick, mut place) = (0usize, 0usize);
    for s in samples {
        let out = model.forward(&s.tokens, &s.depth, &s.graph)?;
        pick += usize::from(argmax(&out.q_pick) == argmax(&s.targets.q_pick_gt));
        let n = s.depth.width;
        let (a, b) = (argmax(&out.q_place), argmax(&s.targets.q_place_gt));
        let dr = (a / n).abs_diff(b / n);
        let dc = (a % n).abs_diff(b % n);
        place += usize::from(dr.max(dc) <= 2);
    }
    let n = samples.len().max(1) as f64;
    Ok(ActionAccuracy { pick: pick as f64 / n, place_within_2px: place as f64 / n })
}

#[derive(Clone, Debug)]
pub struct PolicyReport {
    pub losses: Vec<f32>,
}

/// Stage 2: minimizes the action loss; the success classifier is untouched.
pub fn train_policy_on(model: &mut PolicyModel, samples: &[PolicySample], cfg: &TrainConfig) -> Result<PolicyReport> {
    cfg.validate()?;
    let mut store = std::mem::take(&mut model.store);
    store.set_all_requires_grad(true);
    store.set_requires_grad(SUCCESS_PREFIX, false);
    let m: &PolicyModel = model;
    let result = fit(&mut store, samples, cfg.policy_epochs, cfg, POLICY_STREAM, "policy", |st, s| {
        policy_loss_grad(m, st, s)
    });
    store.set_all_requires_grad(true);
    model.store = store;
    Ok(PolicyReport { losses: result? })
}

pub fn new_policy(cfg: &TrainConfig) -> Result<PolicyModel> {
    PolicyModel::new(Language::builtin().vocab.len(), derive_seed(cfg.seed, POLICY_STREAM, 1, 0))
}

/// Stage 2 on demonstrations with a frozen edge GNN.
pub fn train_policy(demos: &[Demonstration], gnn: &EdgeGnn, cfg: &TrainConfig) -> Result<(PolicyModel, PolicyReport)> {
    if demos.is_empty() {
        return Err(contract("policy training needs at least one demonstration"));
    }
    let samples = policy_samples(demos, gnn)?;
    let mut model = new_policy(cfg)?;
    let report = train_policy_on(&mut model, &samples, cfg)?;
    Ok((model, report))
}

// -------------------------------------------------------- success classifier

/// Observation labeled as completed (`true`) or not.
#[derive(Clone, Debug)]
pub struct SuccessSample {
    pub tokens: Vec<u16>,
    pub depth: DepthImage,
    pub graph: GraphObservation,
    pub label: bool,
}

/// The completed fold is the positive; pre-action observations and failed
/// attempts are negatives.
pub fn success_samples<'a>(demos: impl IntoIterator<Item = &'a Demonstration>, gnn: &EdgeGnn) -> Result<Vec<SuccessSample>> {
    let mut out = Vec::new();
    for d in demos {
        let tokens = d.instruction.tokens.to_vec();
        let (depth, mut graph) = d.terminal_observation()?;
        gnn.annotate(&mut graph)?;
        out.push(SuccessSample { tokens: tokens.clone(), depth, graph, label: true });
        for s in d.steps.iter().chain(&d.negatives) {
            let mut graph = s.graph.clone();
            gnn.annotate(&mut graph)?;
            out.push(SuccessSample { tokens: tokens.clone(), depth: s.depth.clone(), graph, label: false });
        }
    }
    Ok(out)
}

/// Frozen-encoder head outputs of every sample, `3 * WIDTH` values each.
fn head_features(model: &PolicyModel, samples: &[SuccessSample], cfg: &TrainConfig) -> Result<Vec<Vec<f32>>> {
    cfg.pool()?.install(|| {
        samples
            .par_iter()
            .map(|s| Ok(model.forward(&s.tokens, &s.depth, &s.graph)?.head_outputs))
            .collect()
    })
}

fn success_stats(model: &PolicyModel, features: &[Vec<f32>], labels: &[bool]) -> Result<BinaryStats> {
    let mut stats = BinaryStats::default();
    for (f, &l) in features.iter().zip(labels) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 3 * WIDTH], f.clone())?);
        let z = model.success_head(&mut tape, &model.store, x)?;
        stats.add(tape.value(z).item() > 0.0, l);
    }
    Ok(stats)
}

#[derive(Clone, Debug)]
pub struct SuccessReport {
    pub losses: Vec<f32>,
    pub heldout: BinaryStats,
}

/// Stage 3: only the success MLP is updated. The encoder is frozen, so head
/// outputs are computed once and the classifier is fit on them.
pub fn train_success_on(
    model: &mut PolicyModel,
    train: &[SuccessSample],
    heldout: &[SuccessSample],
    cfg: &TrainConfig,
) -> Result<SuccessReport> {
    cfg.validate()?;
    let has = |v: bool| train.iter().any(|s| s.label == v);
    if !has(false) || !has(true) {
        return Err(contract("success classifier needs both positive and negative samples"));
    }
    let feats = head_features(model, train, cfg)?;
    let pairs: Vec<(Vec<f32>, bool)> = feats.into_iter().zip(train.iter().map(|s| s.label)).collect();
    let mut store = std::mem::take(&mut model.store);
    store.set_all_requires_grad(false);
    store.set_requires_grad(SUCCESS_PREFIX, true);
    let m: &PolicyModel = model;
    let result = fit(&mut store, &pairs, cfg.success_epochs, cfg, SUCCESS_STREAM, "success", |st, (f, label)| {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 3 * WIDTH], f.clone())?);
        let z = m.success_head(&mut tape, st, x)?;
        let l = tape.bce_with_logits(z, &Tensor::full(&[1], if *label { 1.0 } else { 0.0 }))?;
        let l = tape.mean(l)?;
        Ok((tape.value(l).item(), tape.param_gradients(l)?))
    });
    store.set_all_requires_grad(true);
    model.store = store;
    let losses = result?;
    let hf = head_features(model, heldout, cfg)?;
    let labels: Vec<bool> = heldout.iter().map(|s| s.label).collect();
    let heldout = success_stats(model, &hf, &labels)?;
    log::info!("success held-out accuracy {:.4}", heldout.accuracy());
    Ok(SuccessReport { losses, heldout })
}

/// Stage 3 on demonstrations; every `holdout_every`-th demo is held out.
pub fn train_success_classifier(
    demos: &[Demonstration],
    gnn: &EdgeGnn,
    model: &mut PolicyModel,
    cfg: &TrainConfig,
) -> Result<SuccessReport> {
    let (train, held) = holdout_split(demos, cfg.holdout_every);
    let train = success_samples(train, gnn)?;
    let held = success_samples(held, gnn)?;
    train_success_on(model, &train, &held, cfg)
}

// ------------------------------------------------------------- checkpoints

pub fn save_edge_gnn(gnn: &EdgeGnn, path: &Path) -> Result<()> {
    Checkpoint::from_stores(Stage::EdgeGnn, &[&gnn.store]).save(path)
}

pub fn load_edge_gnn(path: &Path) -> Result<EdgeGnn> {
    let ck = Checkpoint::load(path)?;
    let mut gnn = EdgeGnn::new(0);
    ck.restore(&mut [&mut gnn.store])?;
    gnn.store.set_all_requires_grad(false);
    Ok(gnn)
}

/// Saves the edge GNN together with the policy so one file drives rollouts.
pub fn save_policy(gnn: &EdgeGnn, model: &PolicyModel, stage: Stage, path: &Path) -> Result<()> {
    Checkpoint::from_stores(stage, &[&gnn.store, &model.store]).save(path)
}

pub fn load_policy(path: &Path) -> Result<(EdgeGnn, PolicyModel, Stage)> {
    let ck = Checkpoint::load(path)?;
    if ck.stage == Stage::EdgeGnn {
        return Err(contract(format!("{} holds only an edge GNN", path.display())));
    }
    let mut gnn = EdgeGnn::new(0);
    let mut model = PolicyModel::new(Language::builtin().vocab.len(), 0)?;
    ck.restore(&mut [&mut gnn.store, &mut model.store])?;
    gnn.store.set_all_requires_grad(false);
    Ok((gnn, model, ck.stage))
}
