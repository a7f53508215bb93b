//! Multi-modal transformer policy: language, depth-patch and graph tokens are
//! fused by a pre-norm encoder and decoded into a per-node pick heatmap, a
//! per-pixel place heatmap and a success logit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cloth_sim::{Camera, DepthImage, PickPlaceAction};
use crate::error::{contract, Result};
use crate::graph::{GraphObservation, GNN_WIDTH, NODES};
use crate::lang::MAX_TOKENS;
use crate::nn::{truncated_normal, Linear, Mlp, INIT_STD};
use crate::tensor::{ParamId, ParamStore, Real, Tape, Tensor, Var};

pub const WIDTH: usize = 128;
pub const LAYERS: usize = 4;
pub const HEADS: usize = 4;
pub const MLP_WIDTH: usize = 256;
pub const IMAGE_SIZE: usize = 64;
pub const PATCH: usize = 8;
/// Patches per image side.
pub const PATCH_GRID: usize = IMAGE_SIZE / PATCH;
pub const PATCHES: usize = PATCH_GRID * PATCH_GRID;
pub const LANG_TOKENS: usize = MAX_TOKENS + 1;
pub const IMAGE_TOKENS: usize = PATCHES + 1;
pub const GRAPH_TOKENS: usize = NODES + 1;
pub const TOTAL_TOKENS: usize = LANG_TOKENS + IMAGE_TOKENS + GRAPH_TOKENS;
/// Channel widths of the place decoder, from the encoder width down to one map.
pub const DECODER_CHANNELS: [usize; 5] = [WIDTH, 64, 32, 16, 1];
/// Prefix shared by all success-classifier parameters.
pub const SUCCESS_PREFIX: &str = "success.";
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str) -> Result<Self> {
        Ok(Self {
            gamma: store.insert(format!("{name}.gamma"), Tensor::full(&[WIDTH], 1.0))?,
            beta: store.insert(format!("{name}.beta"), Tensor::zeros(&[WIDTH]))?,
        })
    }

    fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, T::lit(LN_EPS))
    }
}

#[derive(Clone, Copy, Debug)]
struct Block {
    ln1: Norm,
    qkv: Linear,
    proj: Linear,
    ln2: Norm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

/// All trainable tensors of the policy, addressed by name in `store`.
#[derive(Clone, Debug)]
pub struct PolicyModel {
    pub store: ParamStore,
    vocab_size: usize,
    token_embedding: ParamId,
    lang_head: ParamId,
    image_head: ParamId,
    graph_head: ParamId,
    lang_pos: ParamId,
    image_pos: ParamId,
    lang_type: ParamId,
    image_type: ParamId,
    graph_type: ParamId,
    patch_proj: Linear,
    graph_proj: Linear,
    blocks: Vec<Block>,
    final_norm: Norm,
    pick_head: Linear,
    place_convs: Vec<Conv>,
    success: Mlp,
}

/// Tape handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct PolicyVars {
    /// `[NODES, 1]`.
    pub pick_logits: Var,
    /// `[1, 64, 64]`.
    pub place_logits: Var,
    /// `[1, 1]`.
    pub success_logit: Var,
    /// `[3, WIDTH]` encoder outputs at the language, image and graph head tokens.
    pub heads: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyOutput {
    pub q_pick: Vec<f32>,
    /// Row-major 64×64.
    pub q_place: Vec<f32>,
    pub success_logit: f32,
    pub head_outputs: Vec<f32>,
}

impl PolicyModel {
    pub fn new(vocab_size: usize, seed: u64) -> Result<Self> {
        if vocab_size == 0 {
            return Err(contract("vocabulary is empty"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let table = |s: &mut ParamStore, name: &str, rows: usize, rng: &mut ChaCha8Rng| {
            s.insert(name, truncated_normal(rng, &[rows, WIDTH], INIT_STD))
        };
        let token_embedding = table(&mut s, "embed.tokens", vocab_size, &mut rng)?;
        let lang_head = table(&mut s, "embed.lang_head", 1, &mut rng)?;
        let image_head = table(&mut s, "embed.image_head", 1, &mut rng)?;
        let graph_head = table(&mut s, "embed.graph_head", 1, &mut rng)?;
        let lang_pos = table(&mut s, "embed.lang_pos", LANG_TOKENS, &mut rng)?;
        let image_pos = table(&mut s, "embed.image_pos", IMAGE_TOKENS, &mut rng)?;
        let lang_type = table(&mut s, "embed.lang_type", 1, &mut rng)?;
        let image_type = table(&mut s, "embed.image_type", 1, &mut rng)?;
        let graph_type = table(&mut s, "embed.graph_type", 1, &mut rng)?;
        let patch_proj = Linear::new(&mut s, "embed.patch_proj", PATCH * PATCH, WIDTH, &mut rng)?;
        let graph_proj = Linear::new(&mut s, "embed.graph_proj", GNN_WIDTH, WIDTH, &mut rng)?;
        let blocks = (0..LAYERS)
            .map(|l| {
                let n = format!("encoder.{l}");
                Ok(Block {
                    ln1: Norm::new(&mut s, &format!("{n}.ln1"))?,
                    qkv: Linear::new(&mut s, &format!("{n}.qkv"), WIDTH, 3 * WIDTH, &mut rng)?,
                    proj: Linear::new(&mut s, &format!("{n}.proj"), WIDTH, WIDTH, &mut rng)?,
                    ln2: Norm::new(&mut s, &format!("{n}.ln2"))?,
                    fc1: Linear::new(&mut s, &format!("{n}.fc1"), WIDTH, MLP_WIDTH, &mut rng)?,
                    fc2: Linear::new(&mut s, &format!("{n}.fc2"), MLP_WIDTH, WIDTH, &mut rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let final_norm = Norm::new(&mut s, "encoder.final_norm")?;
        let pick_head = Linear::new(&mut s, "pick_head", WIDTH, 1, &mut rng)?;
        let mut place_convs = Vec::new();
        for i in 0..DECODER_CHANNELS.len() - 1 {
            let (cin, cout) = (DECODER_CHANNELS[i], DECODER_CHANNELS[i + 1]);
            let last = i + 2 == DECODER_CHANNELS.len();
            let w = if last {
                Tensor::zeros(&[cout, cin, 3, 3])
            } else {
                truncated_normal(&mut rng, &[cout, cin, 3, 3], INIT_STD)
            };
            place_convs.push(Conv {
                w: s.insert(format!("place.conv{i}.weight"), w)?,
                b: s.insert(format!("place.conv{i}.bias"), Tensor::zeros(&[cout]))?,
            });
        }
        let success = Mlp::new(&mut s, &format!("{SUCCESS_PREFIX}mlp"), 3 * WIDTH, WIDTH, 1, INIT_STD, &mut rng)?;
        Ok(Self {
            store: s,
            vocab_size,
            token_embedding,
            lang_head,
            image_head,
            graph_head,
            lang_pos,
            image_pos,
            lang_type,
            image_type,
            graph_type,
            patch_proj,
            graph_proj,
            blocks,
            final_norm,
            pick_head,
            place_convs,
            success,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn parameter_count(&self) -> usize {
        self.store.numel()
    }

    /// `[head; token rows] + positions`, `[LANG_TOKENS, WIDTH]`.
    pub fn embed_language<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, tokens: &[u16]) -> Result<Var> {
        if tokens.len() != MAX_TOKENS {
            return Err(contract(format!("expected {MAX_TOKENS} token ids, got {}", tokens.len())));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(contract(format!("token id {t} outside a vocabulary of {}", self.vocab_size)));
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let table = tape.param(store, self.token_embedding);
        let words = tape.gather_rows(table, &ids)?;
        let head = tape.param(store, self.lang_head);
        let seq = tape.concat_rows(&[head, words])?;
        let pos = tape.param(store, self.lang_pos);
        tape.add(seq, pos)
    }

    /// Row-major 8×8 patches projected to the model width, `[IMAGE_TOKENS, WIDTH]`.
    pub fn embed_image<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, depth: &DepthImage) -> Result<Var> {
        if depth.height != IMAGE_SIZE || depth.width != IMAGE_SIZE || depth.values.len() != IMAGE_SIZE * IMAGE_SIZE {
            return Err(contract(format!(
                "expected a {IMAGE_SIZE}x{IMAGE_SIZE} depth image, got {}x{}",
                depth.height, depth.width
            )));
        }
        let pp = PATCH * PATCH;
        let patches = Tensor::from_fn(&[PATCHES, pp], |i| {
            let (p, k) = (i / pp, i % pp);
            let (row, col) = ((p / PATCH_GRID) * PATCH + k / PATCH, (p % PATCH_GRID) * PATCH + k % PATCH);
            T::lit(depth.values[row * IMAGE_SIZE + col] as f64)
        });
        let x = tape.constant(patches);
        let proj = self.patch_proj.forward(tape, store, x)?;
        let head = tape.param(store, self.image_head);
        let seq = tape.concat_rows(&[head, proj])?;
        let pos = tape.param(store, self.image_pos);
        tape.add(seq, pos)
    }

    /// `[head; projected node latents]` with no positional term, `[GRAPH_TOKENS, WIDTH]`.
    pub fn embed_graph<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        graph: &GraphObservation,
    ) -> Result<Var> {
        let lat = &graph.node_latents;
        if graph.nodes.len() != NODES || lat.shape() != [NODES, GNN_WIDTH] {
            return Err(contract(format!(
                "expected {NODES} nodes with {GNN_WIDTH}-wide latents, got {} nodes and latents {:?}",
                graph.nodes.len(),
                lat.shape()
            )));
        }
        let x = tape.constant(lat.cast());
        let proj = self.graph_proj.forward(tape, store, x)?;
        let head = tape.param(store, self.graph_head);
        tape.concat_rows(&[head, proj])
    }

    fn attention<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, b: &Block, x: Var) -> Result<Var> {
        let hd = WIDTH / HEADS;
        let qkv = b.qkv.forward(tape, store, x)?;
        let scale = T::lit(1.0 / (hd as f64).sqrt());
        let mut heads = Vec::with_capacity(HEADS);
        for h in 0..HEADS {
            let q = tape.slice_cols(qkv, h * hd, hd)?;
            let k = tape.slice_cols(qkv, WIDTH + h * hd, hd)?;
            let v = tape.slice_cols(qkv, 2 * WIDTH + h * hd, hd)?;
            let s = tape.matmul_t(q, k, false, true)?;
            let s = tape.scale(s, scale)?;
            let a = tape.softmax(s)?;
            heads.push(tape.matmul(a, v)?);
        }
        let cat = tape.concat_cols(&heads)?;
        b.proj.forward(tape, store, cat)
    }

    /// Fuses the three token sequences and runs the encoder and all heads.
    pub fn forward_tape<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        tokens: &[u16],
        depth: &DepthImage,
        graph: &GraphObservation,
    ) -> Result<PolicyVars> {
        let zs = self.embed_language(tape, store, tokens)?;
        let zi = self.embed_image(tape, store, depth)?;
        let zg = self.embed_graph(tape, store, graph)?;
        let st = tape.param(store, self.lang_type);
        let it = tape.param(store, self.image_type);
        let gt = tape.param(store, self.graph_type);
        let zs = tape.add_row(zs, st)?;
        let zi = tape.add_row(zi, it)?;
        let zg = tape.add_row(zg, gt)?;
        let mut z = tape.concat_rows(&[zs, zi, zg])?;

        for b in &self.blocks {
            let h = b.ln1.forward(tape, store, z)?;
            let a = self.attention(tape, store, b, h)?;
            z = tape.add(z, a)?;
            let h = b.ln2.forward(tape, store, z)?;
            let h = b.fc1.forward(tape, store, h)?;
            let h = tape.gelu(h)?;
            let h = b.fc2.forward(tape, store, h)?;
            z = tape.add(z, h)?;
        }
        let z = self.final_norm.forward(tape, store, z)?;

        let graph_start = LANG_TOKENS + IMAGE_TOKENS;
        let node_tokens = tape.slice_rows(z, graph_start + 1, NODES)?;
        let pick_logits = self.pick_head.forward(tape, store, node_tokens)?;

        let patch_tokens = tape.slice_rows(z, LANG_TOKENS + 1, PATCHES)?;
        let grid = tape.transpose(patch_tokens)?;
        let mut x = tape.reshape(grid, &[WIDTH, PATCH_GRID, PATCH_GRID])?;
        let n_conv = self.place_convs.len();
        for (i, c) in self.place_convs.iter().enumerate() {
            let w = tape.param(store, c.w);
            let bias = tape.param(store, c.b);
            x = tape.conv3x3(x, w, bias)?;
            if i + 1 < n_conv {
                x = tape.relu(x)?;
                x = tape.upsample2x(x)?;
            }
        }
        let place_logits = x;

        let s = tape.slice_rows(z, 0, 1)?;
        let i = tape.slice_rows(z, LANG_TOKENS, 1)?;
        let g = tape.slice_rows(z, graph_start, 1)?;
        let heads = tape.concat_rows(&[s, i, g])?;
        let flat = tape.reshape(heads, &[1, 3 * WIDTH])?;
        let success_logit = self.success_head(tape, store, flat)?;
        Ok(PolicyVars { pick_logits, place_logits, success_logit, heads })
    }

    /// Success logits `[N, 1]` from flattened head outputs `[N, 3 * WIDTH]`.
    pub fn success_head<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, heads: Var) -> Result<Var> {
        self.success.forward(tape, store, heads)
    }

    pub fn forward(&self, tokens: &[u16], depth: &DepthImage, graph: &GraphObservation) -> Result<PolicyOutput> {
        let mut tape = Tape::new();
        let v = self.forward_tape(&mut tape, &self.store, tokens, depth, graph)?;
        let qp = tape.sigmoid(v.pick_logits)?;
        let ql = tape.sigmoid(v.place_logits)?;
        Ok(PolicyOutput {
            q_pick: tape.value(qp).data().to_vec(),
            q_place: tape.value(ql).data().to_vec(),
            success_logit: tape.value(v.success_logit).item(),
            head_outputs: tape.value(v.heads).data().to_vec(),
        })
    }
}

/// Sum of the mean per-element BCE of the pick and place heatmaps.
pub fn action_loss<T: Real>(tape: &mut Tape<T>, vars: &PolicyVars, q_pick_gt: &[f32], q_place_gt: &[f32]) -> Result<Var> {
    let pick_gt = Tensor::from_fn(&[q_pick_gt.len()], |i| T::lit(q_pick_gt[i] as f64));
    let place_gt = Tensor::from_fn(&[q_place_gt.len()], |i| T::lit(q_place_gt[i] as f64));
    let a = tape.bce_with_logits(vars.pick_logits, &pick_gt)?;
    let a = tape.mean(a)?;
    let b = tape.bce_with_logits(vars.place_logits, &place_gt)?;
    let b = tape.mean(b)?;
    tape.add(a, b)
}

/// Index of the first maximum.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Pick node and place pixel chosen from a forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Selection {
    pub pick_node: usize,
    pub place_pixel: (usize, usize),
    pub action: PickPlaceAction,
}

/// Maximum-probability node and pixel; ties go to the lowest index and the
/// row-major first pixel.
pub fn select_action(output: &PolicyOutput, graph: &GraphObservation, camera: &Camera) -> Selection {
    let pick_node = argmax(&output.q_pick);
    let p = argmax(&output.q_place);
    let place_pixel = (p / camera.size, p % camera.size);
    let n = graph.nodes[pick_node];
    let action = PickPlaceAction { pick_xy: [n[0], n[1]], place_xy: camera.world_of(place_pixel.0, place_pixel.1) }.clamped();
    Selection { pick_node, place_pixel, action }
}

/// True when the classifier probability is strictly above one half.
pub fn classify_success(output: &PolicyOutput) -> bool {
    output.success_logit > 0.0
}
