//! Closed-loop rollouts, the mean-particle-error success metric and
//! split-wise evaluation reports.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cloth_sim::{execute_pick_place, write_pgm16, Camera, ClothState, PickPlaceAction};
use crate::error::{contract, Result};
use crate::graph::{EdgeGnn, GraphObservation};
use crate::lang::{Instruction, Language, Split, TaskType};
use crate::model::{classify_success, select_action, PolicyModel, PolicyOutput};
use crate::oracle::{
    derive_seed, initial_state, observe_for_pick, observe_positions, plan, quantized_action, reference_positions,
    with_feasible_spawn,
};
use crate::spatial::Vec3;

/// Success threshold on the mean particle error, one rest spacing of the grid.
pub const SUCCESS_THRESHOLD: f32 = 0.02;
pub const DEFAULT_HORIZON: usize = 4;
/// Graph sampling seed used for every closed-loop observation.
pub const OBSERVATION_SEED: u64 = 0;
const EVAL_STREAM: u64 = 0x6576_616c;

/// Mean Euclidean distance between corresponding particles, and whether it
/// is below [`SUCCESS_THRESHOLD`].
pub fn success_metric(achieved: &[Vec3], reference: &[Vec3]) -> Result<(f32, bool)> {
    if achieved.len() != reference.len() || achieved.is_empty() {
        return Err(contract(format!(
            "metric needs matching non-empty particle sets, got {} and {}",
            achieved.len(),
            reference.len()
        )));
    }
    let total: f64 = achieved
        .iter()
        .zip(reference)
        .map(|(a, b)| (0..3).map(|k| (a[k] as f64 - b[k] as f64).powi(2)).sum::<f64>().sqrt())
        .sum();
    let error = (total / achieved.len() as f64) as f32;
    Ok((error, error < SUCCESS_THRESHOLD))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Decision {
    /// The policy (or its classifier) declares the task complete.
    Stop,
    Act(PickPlaceAction),
}

/// What a policy saw and decided at one step.
#[derive(Clone, Debug)]
pub struct StepTrace {
    pub decision: Decision,
    pub output: Option<PolicyOutput>,
    pub graph: Option<GraphObservation>,
}

/// Everything a policy may look at when choosing an action. Only the oracle
/// uses the privileged simulator state.
pub struct EpisodeContext<'a> {
    pub instruction: &'a Instruction,
    pub initial: &'a ClothState,
    pub state: &'a ClothState,
    pub step: usize,
    pub spawn_seed: u64,
    /// When false the policy must not stop early.
    pub classifier_gated: bool,
}

pub trait Policy: Sync {
    fn name(&self) -> &str;
    fn act(&self, ctx: &EpisodeContext) -> Result<StepTrace>;
}

/// The scripted expert, acting in the same quantized action space.
pub struct OraclePolicy;

impl Policy for OraclePolicy {
    fn name(&self) -> &str {
        "oracle"
    }

    fn act(&self, ctx: &EpisodeContext) -> Result<StepTrace> {
        let moves = plan(ctx.instruction.task, ctx.initial);
        let Some(mv) = moves.get(ctx.step) else {
            return Ok(StepTrace { decision: Decision::Stop, output: None, graph: None });
        };
        let (_, graph, node) = observe_for_pick(ctx.state, mv.particle)?;
        let (action, _) = quantized_action(&graph, node, mv.place_xy);
        Ok(StepTrace { decision: Decision::Act(action), output: None, graph: Some(graph) })
    }
}

/// Trained edge GNN and policy.
pub struct LearnedPolicy {
    pub gnn: EdgeGnn,
    pub model: PolicyModel,
}

impl Policy for LearnedPolicy {
    fn name(&self) -> &str {
        "learned"
    }

    fn act(&self, ctx: &EpisodeContext) -> Result<StepTrace> {
        let (depth, mut graph) = observe_positions(&ctx.state.positions, OBSERVATION_SEED)?;
        self.gnn.annotate(&mut graph)?;
        let out = self.model.forward(&ctx.instruction.tokens, &depth, &graph)?;
        let decision = if ctx.classifier_gated && classify_success(&out) {
            Decision::Stop
        } else {
            Decision::Act(select_action(&out, &graph, &depth.camera).action)
        };
        Ok(StepTrace { decision, output: Some(out), graph: Some(graph) })
    }
}

/// Argmax over uniformly random heatmaps; never stops early. The floor
/// every learned cell has to beat.
pub struct RandomPolicy {
    pub seed: u64,
}

impl Policy for RandomPolicy {
    fn name(&self) -> &str {
        "random"
    }

    fn act(&self, ctx: &EpisodeContext) -> Result<StepTrace> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, ctx.spawn_seed, ctx.step as u64, 0));
        let (depth, graph) = observe_positions(&ctx.state.positions, OBSERVATION_SEED)?;
        let out = PolicyOutput {
            q_pick: (0..graph.nodes.len()).map(|_| rng.random()).collect(),
            q_place: (0..depth.values.len()).map(|_| rng.random()).collect(),
            success_logit: f32::NEG_INFINITY,
            head_outputs: Vec::new(),
        };
        let action = select_action(&out, &graph, &depth.camera).action;
        Ok(StepTrace { decision: Decision::Act(action), output: Some(out), graph: Some(graph) })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RolloutOptions {
    pub horizon: usize,
    pub classifier_gated: bool,
    /// Keep per-step heatmaps for export.
    pub record: bool,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        Self { horizon: DEFAULT_HORIZON, classifier_gated: true, record: false }
    }
}

#[derive(Clone, Debug)]
pub struct EpisodeResult {
    pub instruction: Instruction,
    pub spawn_seed: u64,
    /// Pick-and-place actions executed (grasp misses included).
    pub steps: usize,
    pub actions: Vec<PickPlaceAction>,
    pub error: f32,
    pub success: bool,
    pub classifier_stop: bool,
    pub final_positions: Vec<Vec3>,
    pub traces: Vec<StepTrace>,
}

/// Runs `policy` from the spawn `spawn_seed` and scores the result against
/// `reference` positions.
pub fn rollout_against(
    policy: &dyn Policy,
    instruction: &Instruction,
    spawn_seed: u64,
    reference: &[Vec3],
    opts: &RolloutOptions,
) -> Result<EpisodeResult> {
    let initial = initial_state(spawn_seed)?;
    let mut state = initial.clone();
    let mut actions = Vec::new();
    let mut traces = Vec::new();
    let mut classifier_stop = false;
    for step in 0..opts.horizon {
        let ctx = EpisodeContext {
            instruction,
            initial: &initial,
            state: &state,
            step,
            spawn_seed,
            classifier_gated: opts.classifier_gated,
        };
        let trace = policy.act(&ctx)?;
        let decision = trace.decision;
        if opts.record {
            traces.push(trace);
        }
        match decision {
            Decision::Stop => {
                classifier_stop = true;
                break;
            }
            Decision::Act(a) => {
                let a = a.clamped();
                state = execute_pick_place(&state, &a)?.0;
                actions.push(a);
            }
        }
    }
    let (error, success) = success_metric(&state.positions, reference)?;
    Ok(EpisodeResult {
        instruction: instruction.clone(),
        spawn_seed,
        steps: actions.len(),
        actions,
        error,
        success,
        classifier_stop,
        final_positions: state.positions,
        traces,
    })
}

/// [`rollout_against`] with the reference from a fresh oracle run on the same spawn.
pub fn rollout(policy: &dyn Policy, instruction: &Instruction, spawn_seed: u64, opts: &RolloutOptions) -> Result<EpisodeResult> {
    let reference = reference_positions(instruction.task, spawn_seed)?;
    rollout_against(policy, instruction, spawn_seed, &reference, opts)
}

/// One evaluation episode: its cell, instruction and spawn.
#[derive(Clone, Debug)]
pub struct EpisodeSpec {
    pub task_type: TaskType,
    pub split: Split,
    pub instruction: Instruction,
    pub spawn_seed: u64,
}

/// The fixed episode list of a suite plus the oracle reference of each, so
/// several policies can be scored on identical episodes.
#[derive(Clone, Debug)]
pub struct Suite {
    pub seed: u64,
    pub episodes_per_cell: usize,
    pub episodes: Vec<EpisodeSpec>,
    pub references: Vec<Vec<Vec3>>,
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| contract(format!("cannot start worker pool: {e}")))
}

impl Suite {
    /// `n_per_cell` episodes for every task type × split, instructions
    /// round-robin, spawn seeds derived from `seed`.
    pub fn build(n_per_cell: usize, seed: u64, workers: usize) -> Result<Self> {
        Self::build_for(&TaskType::ALL, n_per_cell, seed, workers)
    }

    pub fn build_for(task_types: &[TaskType], n_per_cell: usize, seed: u64, workers: usize) -> Result<Self> {
        let splits = Language::builtin().build_splits(seed);
        let mut slots = Vec::new();
        for &tt in task_types {
            for split in Split::ALL {
                let pool = splits.get(tt, split);
                for e in 0..n_per_cell {
                    slots.push((tt, split, pool[e % pool.len()].clone(), e as u64));
                }
            }
        }
        let built = pool(workers)?.install(|| {
            slots
                .into_par_iter()
                .map(|(tt, split, instruction, e)| {
                    let cell = (tt.code() as u64) << 8 | split as u64;
                    let seed_of = |a: u64| derive_seed(seed, EVAL_STREAM, cell, e | a << 32);
                    let (spawn_seed, reference) = with_feasible_spawn(seed_of, |s| {
                        Ok((s, reference_positions(instruction.task, s)?))
                    })?;
                    Ok((EpisodeSpec { task_type: tt, split, instruction, spawn_seed }, reference))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let (episodes, references) = built.into_iter().unzip();
        Ok(Self { seed, episodes_per_cell: n_per_cell, episodes, references })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub task_type: TaskType,
    pub split: Split,
    pub episodes: usize,
    pub successes: usize,
    pub mean_error: f64,
}

impl CellResult {
    pub fn rate_pct(&self) -> f64 {
        100.0 * self.successes as f64 / self.episodes.max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub policy: String,
    pub seed: u64,
    pub horizon: usize,
    pub classifier_gated: bool,
    pub cells: Vec<CellResult>,
}

pub const CSV_HEADER: &str = "task,split,episodes,successes,rate_pct,mean_error_m";

impl EvalReport {
    pub fn cell(&self, task_type: TaskType, split: Split) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.task_type == task_type && c.split == split)
    }

    /// Success rate over all episodes, in percent.
    pub fn grand_mean_pct(&self) -> f64 {
        let n: usize = self.cells.iter().map(|c| c.episodes).sum();
        let s: usize = self.cells.iter().map(|c| c.successes).sum();
        100.0 * s as f64 / n.max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.1},{:.6}",
                c.task_type.name(),
                c.split.name(),
                c.episodes,
                c.successes,
                c.rate_pct(),
                c.mean_error
            );
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "policy: {}  seed: {}  horizon: {}  classifier-gated: {}", self.policy, self.seed, self.horizon, self.classifier_gated);
        let _ = writeln!(
            out,
            "success: mean particle error < {SUCCESS_THRESHOLD} m (one rest spacing of the simulated grid)"
        );
        let _ = writeln!(out, "{:<10} {:<20} {:>8} {:>9} {:>8} {:>12}", "task", "split", "episodes", "successes", "rate %", "mean err m");
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{:<10} {:<20} {:>8} {:>9} {:>8.1} {:>12.6}",
                c.task_type.name(),
                c.split.name(),
                c.episodes,
                c.successes,
                c.rate_pct(),
                c.mean_error
            );
        }
        let _ = writeln!(out, "grand mean: {:.1}%", self.grand_mean_pct());
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Runs every episode of `suite`; results are independent of `workers`.
pub fn evaluate_episodes(policy: &dyn Policy, suite: &Suite, opts: &RolloutOptions, workers: usize) -> Result<Vec<EpisodeResult>> {
    let opts = RolloutOptions { record: false, ..*opts };
    pool(workers)?.install(|| {
        suite
            .episodes
            .par_iter()
            .zip(&suite.references)
            .map(|(e, r)| rollout_against(policy, &e.instruction, e.spawn_seed, r, &opts))
            .collect()
    })
}

pub fn summarize(policy: &dyn Policy, suite: &Suite, opts: &RolloutOptions, results: &[EpisodeResult]) -> EvalReport {
    let mut cells: Vec<CellResult> = Vec::new();
    for (e, r) in suite.episodes.iter().zip(results) {
        let idx = match cells.iter().position(|c| c.task_type == e.task_type && c.split == e.split) {
            Some(i) => i,
            None => {
                cells.push(CellResult { task_type: e.task_type, split: e.split, episodes: 0, successes: 0, mean_error: 0.0 });
                cells.len() - 1
            }
        };
        let c = &mut cells[idx];
        c.episodes += 1;
        c.successes += usize::from(r.success);
        c.mean_error += r.error as f64;
    }
    for c in &mut cells {
        c.mean_error /= c.episodes.max(1) as f64;
    }
    EvalReport {
        policy: policy.name().to_string(),
        seed: suite.seed,
        horizon: opts.horizon,
        classifier_gated: opts.classifier_gated,
        cells,
    }
}

pub fn evaluate_suite(policy: &dyn Policy, suite: &Suite, opts: &RolloutOptions, workers: usize) -> Result<EvalReport> {
    let results = evaluate_episodes(policy, suite, opts, workers)?;
    Ok(summarize(policy, suite, opts, &results))
}

/// Writes a place heatmap as a 16-bit PGM, probabilities mapped onto `[0, 65535]`.
pub fn export_place_heatmap(q_place: &[f32], camera: &Camera, path: &Path) -> Result<()> {
    write_pgm16(path, camera.size, camera.size, q_place)
}

/// Writes `node,x,y,probability` rows, one per graph node.
pub fn export_pick_heatmap(q_pick: &[f32], graph: &GraphObservation, path: &Path) -> Result<()> {
    if q_pick.len() != graph.nodes.len() {
        return Err(contract(format!("{} pick probabilities for {} nodes", q_pick.len(), graph.nodes.len())));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "node,x,y,probability")?;
    for (i, (p, n)) in q_pick.iter().zip(&graph.nodes).enumerate() {
        writeln!(f, "{i},{},{},{p}", n[0], n[1])?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::{Direction, TaskSpec};

    struct AlwaysDone;

    impl Policy for AlwaysDone {
        fn name(&self) -> &str {
            "always-done"
        }
        fn act(&self, _: &EpisodeContext) -> Result<StepTrace> {
            Ok(StepTrace { decision: Decision::Stop, output: None, graph: None })
        }
    }

    fn instruction(tt: TaskType, d: Direction) -> Instruction {
        Language::builtin().instruction(TaskSpec::new(tt, d).unwrap(), 0).unwrap()
    }

    #[test]
    fn metric_closed_forms() {
        let a: Vec<Vec3> = (0..10).map(|i| [i as f32 * 0.01, 0.0, 0.01]).collect();
        assert_eq!(success_metric(&a, &a).unwrap(), (0.0, true));
        let b: Vec<Vec3> = a.iter().map(|p| [p[0] + 0.03, p[1] + 0.04, p[2]]).collect();
        let (e, ok) = success_metric(&b, &a).unwrap();
        assert!((e - 0.05).abs() < 1e-6 && !ok);
        assert!(success_metric(&a[..3], &a).is_err());
    }

    /// First spawn from `base` on which every task in `tasks` is foldable.
    fn feasible_seed(base: u64, tasks: &[TaskSpec]) -> u64 {
        with_feasible_spawn(
            |a| base + a,
            |s| tasks.iter().try_for_each(|&t| reference_positions(t, s).map(drop)).map(|_| s),
        )
        .unwrap()
    }

    #[test]
    fn oracle_rollout_reproduces_its_reference() {
        let ins = instruction(TaskType::HalfFold, Direction::TopOverBottom);
        let seed = feasible_seed(17, &[ins.task]);
        let r = rollout(&OraclePolicy, &ins, seed, &RolloutOptions::default()).unwrap();
        assert!(r.success && r.error < 1e-6);
        assert_eq!(r.steps, 2);
        assert!(r.classifier_stop);
    }

    #[test]
    fn always_done_scores_the_untouched_cloth() {
        let tasks: Vec<_> = TaskType::ALL.iter().map(|&tt| instruction(tt, tt.training_directions()[0])).collect();
        let seed = feasible_seed(3, &tasks.iter().map(|i| i.task).collect::<Vec<_>>());
        for ins in tasks {
            let tt = ins.task.task_type();
            let r = rollout(&AlwaysDone, &ins, seed, &RolloutOptions::default()).unwrap();
            assert_eq!(r.steps, 0);
            let reference = reference_positions(ins.task, seed).unwrap();
            let untouched = success_metric(&initial_state(seed).unwrap().positions, &reference).unwrap();
            assert_eq!((r.error, r.success), untouched);
            // A corner fold moves only an eighth of the cloth, so leaving the
            // cloth alone already lands under the threshold; the larger folds do not.
            assert_eq!(r.success, tt == TaskType::CornerFold, "{tt}: error {}", r.error);
        }
    }

    #[test]
    fn suite_report_is_deterministic_and_complete() {
        let suite = Suite::build(1, 5, 1).unwrap();
        let opts = RolloutOptions::default();
        let a = evaluate_suite(&OraclePolicy, &suite, &opts, 1).unwrap();
        let b = evaluate_suite(&OraclePolicy, &Suite::build(1, 5, 2).unwrap(), &opts, 2).unwrap();
        assert_eq!(a.cells.len(), 9);
        assert!(a.cells.iter().all(|c| c.successes == c.episodes));
        assert_eq!(a.to_csv(), b.to_csv());
        assert!(a.to_csv().starts_with(CSV_HEADER));
        let random = evaluate_suite(&RandomPolicy { seed: 1 }, &suite, &opts, 1).unwrap();
        assert!(random.grand_mean_pct() <= 100.0);
    }

    #[test]
    fn heatmap_exports() {
        let dir = tempfile::tempdir().unwrap();
        let cam = Camera::default();
        let mut q = vec![0.25f32; 4096];
        let path = dir.path().join("u.pgm");
        export_place_heatmap(&q, &cam, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = b"P5\n64 64\n65535\n".len();
        let samples: Vec<u16> = bytes[header..].chunks(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
        assert!(samples.iter().all(|&s| s == samples[0]));
        q[40 * 64 + 9] = 0.9;
        export_place_heatmap(&q, &cam, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let samples: Vec<u16> = bytes[header..].chunks(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
        assert_eq!(crate::model::argmax(&samples.iter().map(|&s| s as f32).collect::<Vec<_>>()), 40 * 64 + 9);

        let (_, g) = observe_positions(&initial_state(0).unwrap().positions, 0).unwrap();
        let csv = dir.path().join("p.csv");
        export_pick_heatmap(&vec![0.5; g.nodes.len()], &g, &csv).unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        assert_eq!(text.lines().count(), g.nodes.len() + 1);
    }
}
