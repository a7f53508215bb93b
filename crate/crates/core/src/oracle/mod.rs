//! Scripted demonstrators with privileged particle access, supervision
//! targets and dataset generation.
//!
//! The oracle acts through the same quantized action space as the policy:
//! it picks at the graph node nearest its target particle and places at the
//! centre of the pixel containing its target point.

mod ldom;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use ldom::{read_dataset, read_dataset_bytes, write_dataset, write_dataset_bytes};

use crate::cloth_sim::{
    execute_pick_place, render_positions, spawn, Camera, ClothState, DepthImage, PickPlaceAction, SpawnConfig,
};
use crate::error::{Error, Result};
use crate::graph::GraphObservation;
use crate::lang::{Direction, Instruction, Language, TaskSpec, TaskType};
use crate::spatial::{dist, Vec3};

/// Standard deviation of the place heatmap, pixels.
pub const TARGET_SIGMA: f32 = 1.5;
/// A pick node must lie this close to the oracle's pick particle.
pub const PICK_NODE_TOLERANCE: f32 = 0.02;
pub const MAX_RESAMPLES: u64 = 3;
/// Range of the place offset used to produce failed-attempt negatives.
const NEGATIVE_OFFSET: (f32, f32) = (0.06, 0.15);

/// One observation and the oracle action taken from it.
#[derive(Clone, Debug, PartialEq)]
pub struct DemoStep {
    pub depth: DepthImage,
    pub graph: GraphObservation,
    pub pick_node: usize,
    pub place_pixel: (usize, usize),
    /// Particle positions at observation time.
    pub raw_positions: Vec<Vec3>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Demonstration {
    pub instruction: Instruction,
    pub steps: Vec<DemoStep>,
    /// Positions after the last action has settled; the goal reference.
    pub oracle_final_positions: Vec<Vec3>,
    /// Non-terminal observations that only serve the success classifier.
    pub negatives: Vec<DemoStep>,
}

impl Demonstration {
    /// The flat initial configuration doubles as the rest configuration.
    pub fn rest_positions(&self) -> &[Vec3] {
        &self.steps[0].raw_positions
    }

    pub fn state_at(&self, positions: &[Vec3]) -> Result<ClothState> {
        ClothState::on_grid(positions.to_vec(), self.rest_positions().to_vec())
    }

    /// Observation of the completed fold (the classifier's positive).
    pub fn terminal_observation(&self) -> Result<(DepthImage, GraphObservation)> {
        observe_positions(&self.oracle_final_positions, 0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupervisionTargets {
    pub q_pick_gt: Vec<f32>,
    pub q_place_gt: Vec<f32>,
    pub success_label: bool,
}

/// A particle to grasp and the point to bring it to.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleMove {
    pub particle: usize,
    pub place_xy: [f32; 2],
}

fn xy(p: Vec3) -> [f32; 2] {
    [p[0], p[1]]
}

fn midpoint(a: Vec3, b: Vec3) -> [f32; 2] {
    [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0]
}

/// Reflection of `p` across the line through `a` and `b`.
pub fn mirror_across(p: [f32; 2], a: [f32; 2], b: [f32; 2]) -> [f32; 2] {
    let d = [b[0] - a[0], b[1] - a[1]];
    let t = ((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / (d[0] * d[0] + d[1] * d[1]);
    let foot = [a[0] + t * d[0], a[1] + t * d[1]];
    [2.0 * foot[0] - p[0], 2.0 * foot[1] - p[1]]
}

/// Scripted moves for `task`, computed once from the initial state.
pub fn plan(task: TaskSpec, initial: &ClothState) -> Vec<OracleMove> {
    use Direction::*;
    let [bl, br, tl, tr] = initial.corner_indices();
    let pos = |i: usize| initial.positions[i];
    let corner = |d: Direction| match d {
        BottomLeft => bl,
        BottomRight => br,
        TopLeft => tl,
        _ => tr,
    };
    let opposite = |d: Direction| match d {
        BottomLeft => tr,
        BottomRight => tl,
        TopLeft => br,
        _ => bl,
    };
    let dir = task.direction();
    match task.task_type() {
        TaskType::CornerFold => {
            let c = initial.centroid();
            vec![OracleMove { particle: corner(dir), place_xy: [c[0], c[1]] }]
        }
        TaskType::TriangleFold => vec![OracleMove { particle: corner(dir), place_xy: xy(pos(opposite(dir))) }],
        TaskType::HalfFold => {
            let (moving, line) = match dir {
                LeftOverRight => ([bl, tl], (midpoint(pos(bl), pos(br)), midpoint(pos(tl), pos(tr)))),
                RightOverLeft => ([br, tr], (midpoint(pos(bl), pos(br)), midpoint(pos(tl), pos(tr)))),
                TopOverBottom => ([tl, tr], (midpoint(pos(bl), pos(tl)), midpoint(pos(br), pos(tr)))),
                _ => ([bl, br], (midpoint(pos(bl), pos(tl)), midpoint(pos(br), pos(tr)))),
            };
            moving
                .iter()
                .map(|&p| OracleMove { particle: p, place_xy: mirror_across(xy(pos(p)), line.0, line.1) })
                .collect()
        }
    }
}

/// Renders positions and builds the graph with the given sampling seed.
pub fn observe_positions(positions: &[Vec3], seed: u64) -> Result<(DepthImage, GraphObservation)> {
    let depth = render_positions(positions);
    let graph = GraphObservation::from_positions(positions, &depth, seed)?;
    Ok((depth, graph))
}

/// Observes `state` and finds the node nearest `particle`, resampling the
/// graph when no node lies within [`PICK_NODE_TOLERANCE`].
pub fn observe_for_pick(state: &ClothState, particle: usize) -> Result<(DepthImage, GraphObservation, usize)> {
    let target = state.positions[particle];
    for seed in 0..=MAX_RESAMPLES {
        let (depth, graph) = observe_positions(&state.positions, seed)?;
        let (node, d) = graph
            .nodes
            .iter()
            .enumerate()
            .map(|(i, &n)| (i, dist(n, target)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("graphs have nodes");
        if d <= PICK_NODE_TOLERANCE {
            return Ok((depth, graph, node));
        }
    }
    Err(Error::DatasetGeneration(format!(
        "no graph node within {PICK_NODE_TOLERANCE} m of particle {particle} after {MAX_RESAMPLES} resamples"
    )))
}

/// Pick at a node, place at the centre of the pixel containing `place_xy`.
pub fn quantized_action(graph: &GraphObservation, node: usize, place_xy: [f32; 2]) -> (PickPlaceAction, (usize, usize)) {
    let cam = Camera::default();
    let pixel = cam.pixel_of_clamped(place_xy);
    let action = PickPlaceAction { pick_xy: xy(graph.nodes[node]), place_xy: cam.world_of(pixel.0, pixel.1) }.clamped();
    (action, pixel)
}

pub fn initial_state(spawn_seed: u64) -> Result<ClothState> {
    spawn(&SpawnConfig::default(), spawn_seed)
}

/// Runs the oracle from `initial`; returns the observed steps and the final state.
pub fn run_oracle(task: TaskSpec, initial: &ClothState) -> Result<(Vec<DemoStep>, ClothState)> {
    let mut state = initial.clone();
    let mut steps = Vec::new();
    for mv in plan(task, initial) {
        let (depth, graph, node) = observe_for_pick(&state, mv.particle)?;
        let (action, place_pixel) = quantized_action(&graph, node, mv.place_xy);
        let raw_positions = state.positions.clone();
        let (next, grasped) = execute_pick_place(&state, &action)?;
        if !grasped {
            return Err(Error::DatasetGeneration(format!("oracle missed its grasp on {task}")));
        }
        steps.push(DemoStep { depth, graph, pick_node: node, place_pixel, raw_positions });
        state = next;
    }
    Ok((steps, state))
}

/// Goal positions for `task` from the spawn `spawn_seed`.
pub fn reference_positions(task: TaskSpec, spawn_seed: u64) -> Result<Vec<Vec3>> {
    let (_, fin) = run_oracle(task, &initial_state(spawn_seed)?)?;
    Ok(fin.positions)
}

/// One demonstration plus a failed-attempt negative: the first oracle move
/// with its place point displaced by 6 to 15 cm.
pub fn demonstrate(task: TaskSpec, instruction: Instruction, spawn_seed: u64) -> Result<Demonstration> {
    if instruction.task != task {
        return Err(Error::DatasetGeneration(format!("instruction describes {}, not {task}", instruction.task)));
    }
    let initial = initial_state(spawn_seed)?;
    let (steps, fin) = run_oracle(task, &initial)?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spawn_seed, 0x6e65_6761, 0, 0));
    let first = plan(task, &initial)[0];
    let angle = rng.random_range(0.0..std::f32::consts::TAU);
    let reach = rng.random_range(NEGATIVE_OFFSET.0..NEGATIVE_OFFSET.1);
    let place = [first.place_xy[0] + reach * angle.cos(), first.place_xy[1] + reach * angle.sin()];
    let (_, graph, node) = observe_for_pick(&initial, first.particle)?;
    let (action, _) = quantized_action(&graph, node, place);
    let (failed, _) = execute_pick_place(&initial, &action)?;
    let (depth, graph) = observe_positions(&failed.positions, 0)?;
    let negative = DemoStep { depth, graph, pick_node: 0, place_pixel: (0, 0), raw_positions: failed.positions };

    Ok(Demonstration { instruction, steps, oracle_final_positions: fin.positions, negatives: vec![negative] })
}

/// One-hot pick target and Gaussian place heatmap for a recorded step.
pub fn make_targets(step: &DemoStep, success_label: bool) -> SupervisionTargets {
    let mut q_pick_gt = vec![0.0; step.graph.nodes.len()];
    q_pick_gt[step.pick_node] = 1.0;
    SupervisionTargets { q_pick_gt, q_place_gt: gaussian_heatmap(step.place_pixel, TARGET_SIGMA), success_label }
}

/// `exp(-d²/2σ²)` around `center` on the camera grid.
pub fn gaussian_heatmap(center: (usize, usize), sigma: f32) -> Vec<f32> {
    let n = Camera::default().size;
    let s2 = 2.0 * sigma * sigma;
    (0..n * n)
        .map(|i| {
            let dr = (i / n) as f32 - center.0 as f32;
            let dc = (i % n) as f32 - center.1 as f32;
            (-(dr * dr + dc * dc) / s2).exp()
        })
        .collect()
}

/// SplitMix64-style mixing of a base seed with a stream tag and two indices.
pub fn derive_seed(base: u64, tag: u64, a: u64, b: u64) -> u64 {
    let mut z = base ^ tag.rotate_left(17) ^ a.rotate_left(31) ^ b.rotate_left(47);
    for _ in 0..2 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

const TRAIN_STREAM: u64 = 0x7472_6169_6e;

/// Spawn redraws allowed per demonstration or evaluation slot.
pub const SPAWN_ATTEMPTS: u64 = 8;

/// Spawn seed of the `i`-th training demonstration of `task` on its
/// `attempt`-th draw.
pub fn training_spawn_seed(seed: u64, task: TaskSpec, i: usize, attempt: u64) -> u64 {
    let code = (task.task_type().code() as u64) << 8 | task.direction().code() as u64;
    derive_seed(seed, TRAIN_STREAM, code, i as u64 | attempt << 32)
}

/// Calls `f` with the seeds `seed_of(0)`, `seed_of(1)`, ... until the
/// oracle completes. A spawn where the oracle finds no graph node on its
/// target particle is redrawn rather than aborting the whole run.
pub fn with_feasible_spawn<T>(seed_of: impl Fn(u64) -> u64, f: impl Fn(u64) -> Result<T>) -> Result<T> {
    let mut last = String::new();
    for attempt in 0..SPAWN_ATTEMPTS {
        match f(seed_of(attempt)) {
            Err(Error::DatasetGeneration(m)) => last = m,
            other => return other,
        }
    }
    Err(Error::DatasetGeneration(format!("no feasible spawn in {SPAWN_ATTEMPTS} draws; last: {last}")))
}

/// Builds `n_per_task` demonstrations for every training (task, direction)
/// pair, with seen instructions assigned round-robin. Output order depends
/// only on the arguments, never on `workers`.
pub fn build_demonstrations(n_per_task: usize, seed: u64, workers: usize) -> Result<Vec<Demonstration>> {
    let lang = Language::builtin();
    let splits = lang.build_splits(seed);
    let mut jobs = Vec::new();
    for task in TaskSpec::training_tasks() {
        let seen = splits.seen_for(task);
        for i in 0..n_per_task {
            jobs.push((task, seen[i % seen.len()].clone(), i));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::DatasetGeneration(e.to_string()))?;
    pool.install(|| {
        jobs.into_par_iter()
            .map(|(task, ins, i)| {
                with_feasible_spawn(|a| training_spawn_seed(seed, task, i, a), |s| demonstrate(task, ins.clone(), s))
            })
            .collect()
    })
}

/// Generates the dataset and writes it to `path` in the LDOM format.
pub fn generate_dataset(n_per_task: usize, seed: u64, path: &Path, workers: usize) -> Result<Vec<Demonstration>> {
    let demos = build_demonstrations(n_per_task, seed, workers)?;
    write_dataset(path, &demos)?;
    Ok(demos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::Split;

    fn corner_bl() -> TaskSpec {
        TaskSpec::new(TaskType::CornerFold, Direction::BottomLeft).unwrap()
    }

    #[test]
    fn flat_corner_fold_picks_the_corner_and_places_at_centre() {
        let s = spawn(&SpawnConfig::fixed(), 0).unwrap();
        let moves = plan(corner_bl(), &s);
        assert_eq!(moves.len(), 1);
        assert_eq!(moves[0].particle, s.corner_indices()[0]);
        let c = s.centroid();
        assert!((moves[0].place_xy[0] - c[0]).abs() < 1e-6 && (moves[0].place_xy[1] - c[1]).abs() < 1e-6);
        let (_, g, node) = observe_for_pick(&s, moves[0].particle).unwrap();
        assert_eq!(g.nodes[node], s.positions[moves[0].particle]);
    }

    #[test]
    fn half_fold_targets_mirror_corners() {
        let s = spawn(&SpawnConfig::fixed(), 0).unwrap();
        let [bl, br, tl, tr] = s.corner_indices();
        let task = TaskSpec::new(TaskType::HalfFold, Direction::LeftOverRight).unwrap();
        let moves = plan(task, &s);
        assert_eq!(moves.len(), 2);
        assert_eq!((moves[0].particle, moves[1].particle), (bl, tl));
        for (m, partner) in moves.iter().zip([br, tr]) {
            let p = s.positions[partner];
            assert!((m.place_xy[0] - p[0]).abs() < 1e-3 && (m.place_xy[1] - p[1]).abs() < 1e-3);
        }
    }

    #[test]
    fn mirror_is_an_involution() {
        let (a, b) = ([0.1, -0.2], [0.3, 0.25]);
        let p = [0.05, 0.07];
        let q = mirror_across(mirror_across(p, a, b), a, b);
        assert!((p[0] - q[0]).abs() < 1e-6 && (p[1] - q[1]).abs() < 1e-6);
    }

    #[test]
    fn targets_are_valid() {
        let lang = Language::builtin();
        let task = corner_bl();
        let demo = demonstrate(task, lang.instruction(task, 0).unwrap(), 11).unwrap();
        let t = make_targets(&demo.steps[0], false);
        assert_eq!(t.q_pick_gt.iter().sum::<f32>(), 1.0);
        let peak = t.q_place_gt.iter().copied().fold(0.0, f32::max);
        assert_eq!(peak, 1.0);
        let (r, c) = demo.steps[0].place_pixel;
        assert_eq!(t.q_place_gt[r * 64 + c], 1.0);
        assert!(t.q_place_gt.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn heatmap_falls_below_threshold_at_three_sigma() {
        let h = gaussian_heatmap((32, 20), TARGET_SIGMA);
        let closed_form = |d: f32| (-(d * d) / (2.0 * TARGET_SIGMA * TARGET_SIGMA)).exp();
        assert!(closed_form(3.0 * TARGET_SIGMA) < 0.012);
        // every pixel at least 3σ from the peak
        for (i, &v) in h.iter().enumerate() {
            let d = (((i / 64) as f32 - 32.0).powi(2) + ((i % 64) as f32 - 20.0).powi(2)).sqrt();
            if d >= 3.0 * TARGET_SIGMA {
                assert!(v < 0.012);
            }
            assert!((v - closed_form(d)).abs() < 1e-6);
        }
    }

    #[test]
    fn half_fold_demonstrations_have_two_steps() {
        let lang = Language::builtin();
        let task = TaskSpec::new(TaskType::HalfFold, Direction::TopOverBottom).unwrap();
        let demo = demonstrate(task, lang.instruction(task, 2).unwrap(), 5).unwrap();
        assert_eq!(demo.steps.len(), 2);
        assert_eq!(demo.instruction.split, Split::SeenInstr);
        assert_eq!(demo.negatives.len(), 1);
    }

    #[test]
    fn oracle_is_reproducible() {
        let task = TaskSpec::new(TaskType::TriangleFold, Direction::BottomRight).unwrap();
        assert_eq!(reference_positions(task, 3).unwrap(), reference_positions(task, 3).unwrap());
    }

    #[test]
    fn mismatched_instruction_is_rejected() {
        let lang = Language::builtin();
        let other = TaskSpec::new(TaskType::TriangleFold, Direction::BottomLeft).unwrap();
        assert!(demonstrate(corner_bl(), lang.instruction(other, 0).unwrap(), 0).is_err());
    }
}
