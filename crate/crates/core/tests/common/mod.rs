//! Helpers shared by the integration test targets: a random computation
//! graph generator with a central-difference gradient oracle, and random
//! cloth observations.

#![allow(dead_code)]

use langfold::cloth_sim::{execute_pick_place, spawn, DepthImage, PickPlaceAction, SpawnConfig};
use langfold::graph::{EdgeGnn, GraphObservation};
use langfold::model::PolicyModel;
use langfold::tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// One operation applied to the running value `h` of shape `[rows, cols]`.
#[derive(Clone, Debug)]
enum Step {
    MatMul { w: ParamId, transposed: bool },
    AddRow(ParamId),
    Relu,
    Gelu,
    Sigmoid,
    Tanh,
    Softmax,
    LayerNorm { gamma: ParamId, beta: ParamId },
    Mul(ParamId),
    Sub(ParamId),
    Scale(f64),
    ConcatRows(ParamId),
    ConcatCols(ParamId),
    Transpose,
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    /// `[r, c]` viewed as one channel, conv to 2 channels, upsampled, viewed back.
    ConvUp { w: ParamId, b: ParamId },
    Gather(Vec<usize>),
    Scatter { idx: Vec<usize>, rows: usize },
}

#[derive(Clone, Debug)]
enum Reduce {
    Sum,
    Mean,
    Max,
    Bce(Tensor<f64>),
}

/// A randomly generated differentiable program over a small parameter store.
#[derive(Clone, Debug)]
pub struct RandomGraph {
    pub store: ParamStore<f64>,
    input: ParamId,
    steps: Vec<Step>,
    reduce: Reduce,
}

const MAX_SIDE: usize = 12;

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

impl RandomGraph {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let mut n = 0;
        let mut add = |store: &mut ParamStore<f64>, t: Tensor<f64>| {
            n += 1;
            store.insert(format!("p{n}"), t).unwrap()
        };
        let (mut r, mut c) = (rng.random_range(2..5), rng.random_range(2..6));
        let input = add(&mut store, normal(&mut rng, &[r, c], 1.0));
        let mut steps = Vec::new();
        for _ in 0..rng.random_range(3..9) {
            let step = match rng.random_range(0..19) {
                0 | 1 => {
                    let out = rng.random_range(2..7);
                    let transposed = rng.random_bool(0.5);
                    let shape = if transposed { [out, c] } else { [c, out] };
                    c = out;
                    Step::MatMul { w: add(&mut store, normal(&mut rng, &shape, 0.6)), transposed }
                }
                2 => Step::AddRow(add(&mut store, normal(&mut rng, &[c], 0.5))),
                3 => Step::Relu,
                4 => Step::Gelu,
                5 => Step::Sigmoid,
                6 => Step::Tanh,
                7 => Step::Softmax,
                8 => {
                    let gamma = add(&mut store, Tensor::from_fn(&[c], |_| 1.0 + rng.random_range(-0.3..0.3)));
                    let beta = add(&mut store, normal(&mut rng, &[c], 0.2));
                    Step::LayerNorm { gamma, beta }
                }
                9 => Step::Mul(add(&mut store, normal(&mut rng, &[r, c], 1.0))),
                10 => Step::Sub(add(&mut store, normal(&mut rng, &[r, c], 1.0))),
                11 => Step::Scale(rng.random_range(-2.0..2.0)),
                12 if r < MAX_SIDE => {
                    let extra = rng.random_range(1..3);
                    r += extra;
                    Step::ConcatRows(add(&mut store, normal(&mut rng, &[extra, c], 1.0)))
                }
                13 if c < MAX_SIDE => {
                    let extra = rng.random_range(1..3);
                    c += extra;
                    Step::ConcatCols(add(&mut store, normal(&mut rng, &[r, extra], 1.0)))
                }
                14 => {
                    std::mem::swap(&mut r, &mut c);
                    Step::Transpose
                }
                15 if r > 1 => {
                    let len = rng.random_range(1..r);
                    let start = rng.random_range(0..=r - len);
                    r = len;
                    Step::SliceRows(start, len)
                }
                16 if c > 1 => {
                    let len = rng.random_range(1..c);
                    let start = rng.random_range(0..=c - len);
                    c = len;
                    Step::SliceCols(start, len)
                }
                17 if r * 4 <= MAX_SIDE && c * 2 <= MAX_SIDE => {
                    let w = add(&mut store, normal(&mut rng, &[2, 1, 3, 3], 0.4));
                    let b = add(&mut store, normal(&mut rng, &[2], 0.1));
                    r *= 4;
                    c *= 2;
                    Step::ConvUp { w, b }
                }
                18 => {
                    if rng.random_bool(0.5) {
                        let len = rng.random_range(1..=r + 2);
                        let idx = (0..len).map(|_| rng.random_range(0..r)).collect();
                        r = len;
                        Step::Gather(idx)
                    } else {
                        let rows = rng.random_range(1..=r + 1);
                        let idx = (0..r).map(|_| rng.random_range(0..rows)).collect();
                        r = rows;
                        Step::Scatter { idx, rows }
                    }
                }
                _ => Step::Tanh,
            };
            steps.push(step);
        }
        let reduce = match rng.random_range(0..4) {
            0 => Reduce::Sum,
            1 => Reduce::Mean,
            2 => Reduce::Max,
            _ => Reduce::Bce(Tensor::from_fn(&[r * c], |_| rng.random_range(0.0..1.0))),
        };
        Self { store, input, steps, reduce }
    }

    pub fn parameter_count(&self) -> usize {
        self.store.numel()
    }

    /// Records the program on a fresh tape and returns the scalar loss.
    pub fn loss(&self, store: &ParamStore<f64>) -> (Tape<f64>, Var) {
        let mut t = Tape::<f64>::new();
        let mut h = t.param(store, self.input);
        for step in &self.steps {
            h = match step {
                Step::MatMul { w, transposed } => {
                    let w = t.param(store, *w);
                    t.matmul_t(h, w, false, *transposed)
                }
                Step::AddRow(b) => {
                    let b = t.param(store, *b);
                    t.add_row(h, b)
                }
                Step::Relu => t.relu(h),
                Step::Gelu => t.gelu(h),
                Step::Sigmoid => t.sigmoid(h),
                Step::Tanh => t.tanh(h),
                Step::Softmax => t.softmax(h),
                Step::LayerNorm { gamma, beta } => {
                    let (g, b) = (t.param(store, *gamma), t.param(store, *beta));
                    t.layer_norm(h, g, b, 1e-5)
                }
                Step::Mul(p) => {
                    let p = t.param(store, *p);
                    t.mul(h, p)
                }
                Step::Sub(p) => {
                    let p = t.param(store, *p);
                    t.sub(p, h)
                }
                Step::Scale(s) => t.scale(h, *s),
                Step::ConcatRows(p) => {
                    let p = t.param(store, *p);
                    t.concat_rows(&[h, p])
                }
                Step::ConcatCols(p) => {
                    let p = t.param(store, *p);
                    t.concat_cols(&[p, h])
                }
                Step::Transpose => t.transpose(h),
                Step::SliceRows(s, l) => t.slice_rows(h, *s, *l),
                Step::SliceCols(s, l) => t.slice_cols(h, *s, *l),
                Step::ConvUp { w, b } => {
                    let shape = t.shape(h).to_vec();
                    let x = t.reshape(h, &[1, shape[0], shape[1]]).unwrap();
                    let (w, b) = (t.param(store, *w), t.param(store, *b));
                    let y = t.conv3x3(x, w, b).unwrap();
                    let y = t.upsample2x(y).unwrap();
                    t.reshape(y, &[shape[0] * 4, shape[1] * 2])
                }
                Step::Gather(idx) => t.gather_rows(h, idx),
                Step::Scatter { idx, rows } => t.scatter_add_rows(h, idx, *rows),
            }
            .unwrap_or_else(|e| panic!("{step:?}: {e}"));
        }
        let loss = match &self.reduce {
            Reduce::Sum => t.sum(h),
            Reduce::Mean => t.mean(h),
            Reduce::Max => t.max(h),
            Reduce::Bce(y) => {
                let l = t.bce_with_logits(h, y).unwrap();
                t.mean(l)
            }
        }
        .unwrap();
        (t, loss)
    }
}

/// Largest elementwise violation of `|ad - fd| <= max(rel * |fd|, abs)` over
/// every parameter element, using central differences with step `h`.
/// Values above 1 mean the check fails.
pub fn finite_difference_violation(graph: &RandomGraph, h: f64, rel: f64, abs: f64) -> f64 {
    let (tape, loss) = graph.loss(&graph.store);
    let mut analytic = graph.store.clone();
    tape.backward(loss, &mut analytic).unwrap();
    let mut worst: f64 = 0.0;
    let mut probe = graph.store.clone();
    let ids: Vec<ParamId> = graph.store.iter().map(|p| graph.store.id(&p.name).unwrap()).collect();
    for id in ids {
        for i in 0..probe.get(id).value.len() {
            let x0 = probe.get(id).value.data()[i];
            let mut at = |x: f64| {
                probe.get_mut(id).value.data_mut()[i] = x;
                let (t, l) = graph.loss(&probe);
                t.value(l).item()
            };
            let fd = (at(x0 + h) - at(x0 - h)) / (2.0 * h);
            probe.get_mut(id).value.data_mut()[i] = x0;
            let ad = analytic.get(id).grad.data()[i];
            let tol = (rel * fd.abs()).max(abs);
            worst = worst.max((ad - fd).abs() / tol);
        }
    }
    worst
}

/// A freshly initialised policy with its zero-initialised output conv and
/// biases perturbed, so every head depends on its inputs.
pub fn perturbed_policy(vocab: usize, seed: u64) -> PolicyModel {
    let mut m = PolicyModel::new(vocab, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for p in m.store.iter_mut() {
        if p.name.starts_with("place.conv3") || p.name.ends_with(".bias") {
            p.value.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.05..0.05));
        }
    }
    m
}

/// Spawned cloth, optionally after one random corner-ish fold, observed and
/// annotated by `gnn`.
pub fn random_observation(seed: u64, gnn: &EdgeGnn) -> (DepthImage, GraphObservation) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = spawn(&SpawnConfig::default(), seed).unwrap();
    if rng.random_bool(0.5) {
        let corner = state.corner_indices()[rng.random_range(0..4)];
        let p = state.positions[corner];
        let centre = state.centroid();
        let t = rng.random_range(0.3..0.9);
        let action = PickPlaceAction {
            pick_xy: [p[0], p[1]],
            place_xy: [p[0] + t * (centre[0] - p[0]), p[1] + t * (centre[1] - p[1])],
        };
        state = execute_pick_place(&state, &action).unwrap().0;
    }
    let (depth, mut graph) = GraphObservation::observe(&state, rng.random()).unwrap();
    gnn.annotate(&mut graph).unwrap();
    (depth, graph)
}
