//! Visible connectivity graph: farthest-point downsampling of the visible
//! particles, proximity edges, and a message-passing classifier that tells
//! true mesh adjacency apart from fold-induced proximity.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cloth_sim::{render_depth, visible_among, ClothState, DepthImage};
use crate::error::{contract, Result};
use crate::nn::{Linear, Mlp};
use crate::spatial::{dist, SpatialHash, Vec3};
use crate::tensor::{ParamStore, Real, Tape, Tensor, Var};

/// Nodes per graph.
pub const NODES: usize = 128;
/// Proximity threshold for collision edges, about 1.5x the spacing of
/// 128 farthest-point samples on the nominal cloth.
pub const EDGE_RADIUS: f32 = 0.06;
/// Width of node and edge latents.
pub const GNN_WIDTH: usize = 64;
pub const GNN_ROUNDS: usize = 3;
/// Positions are divided by this before entering the network.
const FEATURE_SCALE: f32 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct GraphObservation {
    pub nodes: Vec<Vec3>,
    pub source_particles: Vec<usize>,
    pub collision_edges: Vec<(usize, usize)>,
    /// Predicted mesh-edge probability per collision edge; empty until annotated.
    pub mesh_edge_prob: Vec<f32>,
    /// `[NODES, GNN_WIDTH]` latents; zeros until annotated.
    pub node_latents: Tensor,
}

impl GraphObservation {
    /// Samples nodes from the particles visible in `depth` and connects them.
    pub fn from_state(state: &ClothState, depth: &DepthImage, seed: u64) -> Result<Self> {
        Self::from_positions(&state.positions, depth, seed)
    }

    pub fn from_positions(positions: &[Vec3], depth: &DepthImage, seed: u64) -> Result<Self> {
        let visible = visible_among(positions, depth);
        let points: Vec<Vec3> = visible.iter().map(|&i| positions[i]).collect();
        let (nodes, picked) = downsample(&points, NODES, seed)?;
        let source_particles = picked.iter().map(|&k| visible[k]).collect();
        Ok(Self::from_nodes(nodes, source_particles))
    }

    /// Renders `state` and builds its graph.
    pub fn observe(state: &ClothState, seed: u64) -> Result<(DepthImage, Self)> {
        let depth = render_depth(state);
        let graph = Self::from_state(state, &depth, seed)?;
        Ok((depth, graph))
    }

    pub fn from_nodes(nodes: Vec<Vec3>, source_particles: Vec<usize>) -> Self {
        let collision_edges = nearby_edges(&nodes, EDGE_RADIUS);
        let k = nodes.len().max(1);
        Self {
            nodes,
            source_particles,
            collision_edges,
            mesh_edge_prob: Vec::new(),
            node_latents: Tensor::zeros(&[k, GNN_WIDTH]),
        }
    }

    /// Reorders nodes so that new node `i` is old node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut inv = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let nodes: Vec<Vec3> = perm.iter().map(|&o| self.nodes[o]).collect();
        let source_particles = perm.iter().map(|&o| self.source_particles[o]).collect();
        let mut edges: Vec<((usize, usize), f32)> = self
            .collision_edges
            .iter()
            .enumerate()
            .map(|(e, &(a, b))| {
                let (x, y) = (inv[a], inv[b]);
                ((x.min(y), x.max(y)), self.mesh_edge_prob.get(e).copied().unwrap_or(0.0))
            })
            .collect();
        edges.sort_by(|p, q| p.0.cmp(&q.0));
        let w = self.node_latents.cols();
        let lat = self.node_latents.data();
        let node_latents = Tensor::from_fn(&[perm.len(), w], |i| lat[perm[i / w] * w + i % w]);
        Self {
            nodes,
            source_particles,
            collision_edges: edges.iter().map(|e| e.0).collect(),
            mesh_edge_prob: if self.mesh_edge_prob.is_empty() { Vec::new() } else { edges.iter().map(|e| e.1).collect() },
            node_latents,
        }
    }
}

/// Farthest-point sampling of `k` points. The first pick is the point ranked
/// `seed mod n` by distance to the centroid (seed 0: the nearest one). With
/// fewer than `k` points the sampled order repeats cyclically. Returns the
/// nodes and their indices into `points`.
pub fn downsample(points: &[Vec3], k: usize, seed: u64) -> Result<(Vec<Vec3>, Vec<usize>)> {
    let n = points.len();
    if n == 0 {
        return Err(contract("cannot downsample an empty visible set"));
    }
    let inv = 1.0 / n as f32;
    let centroid = points.iter().fold([0.0f32; 3], |c, p| [c[0] + p[0] * inv, c[1] + p[1] * inv, c[2] + p[2] * inv]);
    let mut ranked: Vec<usize> = (0..n).collect();
    ranked.sort_by(|&a, &b| dist(points[a], centroid).total_cmp(&dist(points[b], centroid)).then(a.cmp(&b)));
    let start = ranked[(seed % n as u64) as usize];

    let take = k.min(n);
    let mut order = Vec::with_capacity(take);
    let mut nearest = vec![f32::INFINITY; n];
    let mut current = start;
    for _ in 0..take {
        order.push(current);
        let pc = points[current];
        let mut best = (f32::NEG_INFINITY, 0);
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(dist(points[i], pc));
            if *d > best.0 {
                best = (*d, i);
            }
        }
        current = best.1;
    }
    let idx: Vec<usize> = (0..k).map(|j| order[j % take]).collect();
    Ok((idx.iter().map(|&i| points[i]).collect(), idx))
}

/// All pairs `(i, j)`, `i < j`, strictly closer than `radius`, sorted.
pub fn nearby_edges(nodes: &[Vec3], radius: f32) -> Vec<(usize, usize)> {
    if nodes.is_empty() {
        return Vec::new();
    }
    SpatialHash::new(nodes, radius).pairs_within(nodes, radius)
}

/// True for edges whose endpoints were also within [`EDGE_RADIUS`] in the
/// flat rest configuration.
pub fn mesh_edge_labels(graph: &GraphObservation, state: &ClothState) -> Result<Vec<bool>> {
    let n = state.particle_count();
    if graph.source_particles.iter().any(|&p| p >= n) {
        return Err(contract("graph refers to particles outside the state"));
    }
    Ok(graph
        .collision_edges
        .iter()
        .map(|&(a, b)| {
            let (pa, pb) = (graph.source_particles[a], graph.source_particles[b]);
            dist(state.rest_positions[pa], state.rest_positions[pb]) <= EDGE_RADIUS
        })
        .collect())
}

#[derive(Clone, Copy, Debug)]
struct Round {
    edge: Mlp,
    node: Mlp,
}

/// Message-passing mesh-edge classifier.
#[derive(Clone, Debug)]
pub struct EdgeGnn {
    pub store: ParamStore,
    node_enc: Mlp,
    edge_enc: Mlp,
    rounds: Vec<Round>,
    edge_head: Linear,
    latent_head: Linear,
}

/// Graph tensors produced by [`EdgeGnn::forward_tape`].
pub struct GnnVars {
    /// `[E, 1]` edge logits, absent for an edgeless graph.
    pub edge_logits: Option<Var>,
    /// `[K, GNN_WIDTH]`.
    pub latents: Var,
}

impl EdgeGnn {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w = GNN_WIDTH;
        let std = |fan_in: usize| (1.0 / fan_in as f32).sqrt();
        let mut mlp = |store: &mut ParamStore, name: &str, i: usize| {
            Mlp::new(store, name, i, w, w, std(i.max(w)), &mut rng).expect("unique names")
        };
        let node_enc = mlp(&mut store, "gnn.node_enc", 3);
        let edge_enc = mlp(&mut store, "gnn.edge_enc", 4);
        let rounds = (0..GNN_ROUNDS)
            .map(|r| Round {
                edge: mlp(&mut store, &format!("gnn.round{r}.edge"), 2 * w),
                node: mlp(&mut store, &format!("gnn.round{r}.node"), 2 * w),
            })
            .collect();
        let edge_head = Linear::with_std(&mut store, "gnn.edge_head", w, 1, std(w), &mut rng).expect("unique");
        let latent_head = Linear::with_std(&mut store, "gnn.latent_head", w, w, std(w), &mut rng).expect("unique");
        Self { store, node_enc, edge_enc, rounds, edge_head, latent_head }
    }

    /// Records the forward pass. Node features are centroid-relative
    /// positions; edge features are per-axis absolute offsets and the
    /// distance, so both are invariant to translation and to swapping the
    /// endpoints of an edge.
    pub fn forward_tape<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        nodes: &[Vec3],
        edges: &[(usize, usize)],
    ) -> Result<GnnVars> {
        let k = nodes.len();
        if k == 0 {
            return Err(contract("graph has no nodes"));
        }
        let inv = 1.0 / k as f64;
        let mut c = [0.0f64; 3];
        for p in nodes {
            for a in 0..3 {
                c[a] += p[a] as f64 * inv;
            }
        }
        let scale = 1.0 / FEATURE_SCALE as f64;
        let node_feat = Tensor::from_fn(&[k, 3], |i| T::lit((nodes[i / 3][i % 3] as f64 - c[i % 3]) * scale));
        let x = tape.constant(node_feat);
        let mut h = self.node_enc.forward(tape, store, x)?;

        let mut e = if edges.is_empty() {
            None
        } else {
            let feat = Tensor::from_fn(&[edges.len(), 4], |i| {
                let (a, b) = edges[i / 4];
                let d = [
                    (nodes[b][0] - nodes[a][0]) as f64,
                    (nodes[b][1] - nodes[a][1]) as f64,
                    (nodes[b][2] - nodes[a][2]) as f64,
                ];
                let v = match i % 4 {
                    3 => (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt(),
                    j => d[j].abs(),
                };
                T::lit(v * scale)
            });
            let f = tape.constant(feat);
            Some(self.edge_enc.forward(tape, store, f)?)
        };
        let src: Vec<usize> = edges.iter().map(|e| e.0).collect();
        let dst: Vec<usize> = edges.iter().map(|e| e.1).collect();
        let both: Vec<usize> = src.iter().chain(&dst).copied().collect();

        for round in &self.rounds {
            let msg = match e {
                Some(ev) => {
                    let hs = tape.gather_rows(h, &src)?;
                    let hd = tape.gather_rows(h, &dst)?;
                    let pair = tape.add(hs, hd)?;
                    let inp = tape.concat_cols(&[ev, pair])?;
                    let upd = round.edge.forward(tape, store, inp)?;
                    let ev = tape.add(ev, upd)?;
                    e = Some(ev);
                    let twice = tape.concat_rows(&[ev, ev])?;
                    tape.scatter_add_rows(twice, &both, k)?
                }
                None => tape.constant(Tensor::zeros(&[k, GNN_WIDTH])),
            };
            let inp = tape.concat_cols(&[h, msg])?;
            let upd = round.node.forward(tape, store, inp)?;
            h = tape.add(h, upd)?;
        }
        let edge_logits = match e {
            Some(ev) => Some(self.edge_head.forward(tape, store, ev)?),
            None => None,
        };
        let latents = self.latent_head.forward(tape, store, h)?;
        Ok(GnnVars { edge_logits, latents })
    }

    /// Edge probabilities and node latents for `graph`.
    pub fn forward(&self, nodes: &[Vec3], edges: &[(usize, usize)]) -> Result<(Vec<f32>, Tensor)> {
        let mut tape = Tape::new();
        let out = self.forward_tape(&mut tape, &self.store, nodes, edges)?;
        let probs = match out.edge_logits {
            Some(l) => {
                let s = tape.sigmoid(l)?;
                tape.value(s).data().to_vec()
            }
            None => Vec::new(),
        };
        Ok((probs, tape.value(out.latents).clone()))
    }

    /// Fills `mesh_edge_prob` and `node_latents` of `graph`.
    pub fn annotate(&self, graph: &mut GraphObservation) -> Result<()> {
        let (p, l) = self.forward(&graph.nodes, &graph.collision_edges)?;
        graph.mesh_edge_prob = p;
        graph.node_latents = l;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloth_sim::{spawn, SpawnConfig};
    use rand::Rng;

    fn random_nodes(rng: &mut ChaCha8Rng, n: usize, extent: f32) -> Vec<Vec3> {
        (0..n)
            .map(|_| [rng.random_range(-extent..extent), rng.random_range(-extent..extent), rng.random_range(0.0..0.05)])
            .collect()
    }

    #[test]
    fn downsample_full_set_is_a_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = random_nodes(&mut rng, 20, 0.2);
        let (_, idx) = downsample(&pts, 20, 0).unwrap();
        let mut sorted = idx.clone();
        sorted.sort();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn downsample_separates_clusters() {
        let pts = vec![
            [0.0, 0.0, 0.0],
            [0.01, 0.0, 0.0],
            [0.0, 0.01, 0.0],
            [1.0, 1.0, 0.0],
            [1.01, 1.0, 0.0],
            [1.0, 1.01, 0.0],
        ];
        let (_, idx) = downsample(&pts, 2, 0).unwrap();
        assert!(idx[0] < 3 && idx[1] >= 3 || idx[0] >= 3 && idx[1] < 3, "{idx:?}");
    }

    #[test]
    fn downsample_cycles_and_rejects_empty() {
        let pts = vec![[0.0, 0.0, 0.0], [0.1, 0.0, 0.0]];
        let (nodes, idx) = downsample(&pts, 5, 0).unwrap();
        assert_eq!(nodes.len(), 5);
        assert_eq!(idx[0], idx[2]);
        assert_eq!(idx[1], idx[3]);
        assert!(downsample(&[], 4, 0).is_err());
    }

    #[test]
    fn edge_boundaries() {
        assert_eq!(nearby_edges(&[[0.1, 0.1, 0.0], [0.1, 0.1, 0.0]], EDGE_RADIUS), vec![(0, 1)]);
        let line: Vec<Vec3> = (0..5).map(|i| [i as f32 * 0.25, 0.0, 0.0]).collect();
        assert!(nearby_edges(&line, 0.25).is_empty());
    }

    #[test]
    fn hashed_edges_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let pts = random_nodes(&mut rng, NODES, 0.15);
            let mut brute = Vec::new();
            for i in 0..pts.len() {
                for j in i + 1..pts.len() {
                    if dist(pts[i], pts[j]) < EDGE_RADIUS {
                        brute.push((i, j));
                    }
                }
            }
            assert_eq!(nearby_edges(&pts, EDGE_RADIUS), brute);
        }
    }

    #[test]
    fn flat_cloth_edges_are_all_mesh_edges() {
        let s = spawn(&SpawnConfig::fixed(), 0).unwrap();
        let (_, g) = GraphObservation::observe(&s, 0).unwrap();
        assert_eq!(g.nodes.len(), NODES);
        let labels = mesh_edge_labels(&g, &s).unwrap();
        assert!(labels.iter().all(|&l| l));
    }

    #[test]
    fn duplicate_nodes_are_labelled_mesh_edges() {
        let s = spawn(&SpawnConfig::fixed(), 0).unwrap();
        let g = GraphObservation::from_nodes(vec![s.positions[3], s.positions[3]], vec![3, 3]);
        assert_eq!(mesh_edge_labels(&g, &s).unwrap(), vec![true]);
    }

    #[test]
    fn edgeless_graph_runs_through_the_gnn() {
        let gnn = EdgeGnn::new(0);
        let (p, l) = gnn.forward(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]], &[]).unwrap();
        assert!(p.is_empty());
        assert_eq!(l.shape(), &[2, GNN_WIDTH]);
    }

    #[test]
    fn gnn_is_translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = random_nodes(&mut rng, 60, 0.1);
        let edges = nearby_edges(&pts, EDGE_RADIUS);
        assert!(!edges.is_empty());
        let gnn = EdgeGnn::new(3);
        let (p0, l0) = gnn.forward(&pts, &edges).unwrap();
        let moved: Vec<Vec3> = pts.iter().map(|p| [p[0] + 0.13, p[1] - 0.07, p[2] + 0.02]).collect();
        let (p1, l1) = gnn.forward(&moved, &edges).unwrap();
        for (a, b) in p0.iter().zip(&p1) {
            assert!((a - b).abs() < 1e-5);
        }
        for (a, b) in l0.data().iter().zip(l1.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn gnn_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts = random_nodes(&mut rng, 60, 0.1);
        let mut g = GraphObservation::from_nodes(pts, (0..60).collect());
        let gnn = EdgeGnn::new(5);
        gnn.annotate(&mut g).unwrap();
        let mut perm: Vec<usize> = (0..60).collect();
        perm.reverse();
        perm.swap(3, 40);
        let expected = g.permuted(&perm);
        let mut actual = GraphObservation::from_nodes(expected.nodes.clone(), expected.source_particles.clone());
        gnn.annotate(&mut actual).unwrap();
        assert_eq!(actual.collision_edges, expected.collision_edges);
        for (a, b) in actual.mesh_edge_prob.iter().zip(&expected.mesh_edge_prob) {
            assert!((a - b).abs() < 1e-5);
        }
        for (a, b) in actual.node_latents.data().iter().zip(expected.node_latents.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}
