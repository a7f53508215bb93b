//! Position-based-dynamics square cloth on a table, with a top-down
//! pick-and-place primitive, orthographic depth rendering and a visibility
//! query.
//!
//! World frame: table plane `z = 0`, x to the right, y away from the viewer
//! (up in the image). The workspace is the square `[-0.4, 0.4]²` metres.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Error, Result};
use crate::spatial::{dist, dist_xy, SpatialHash, Vec3};

pub const GRID_ROWS: usize = 25;
pub const GRID_COLS: usize = 25;
pub const NOMINAL_SIDE: f32 = 0.48;
pub const PARTICLE_RADIUS: f32 = 0.01;
pub const DT: f32 = 0.01;
pub const GRAVITY: f32 = 9.8;
pub const SOLVER_ITERATIONS: usize = 15;
/// Fraction of velocity removed every step.
pub const DAMPING: f32 = 0.02;
/// Cloth-on-table friction coefficient. The static limit scales with the
/// per-step penetration depth, which is tiny for resting cloth, so this sits
/// well above textbook values to keep the lower layer from being dragged.
pub const FRICTION: f32 = 3.0;
/// Cloth-on-cloth friction coefficient; high enough that folds hold.
pub const CLOTH_FRICTION: f32 = 2.0;
/// Distance kept between non-neighbouring particles (cloth thickness).
pub const SELF_COLLISION_DIST: f32 = 2.0 * PARTICLE_RADIUS;
/// Pairs closer than this in the rest grid never collide with each other.
const SELF_COLLISION_REST_EXCLUSION: f32 = 0.05;

pub const WORKSPACE_HALF: f32 = 0.4;
pub const IMAGE_SIZE: usize = 64;
pub const DEPTH_CAP: f32 = 0.1;
pub const VISIBILITY_EPS: f32 = 0.005;

pub const GRASP_RADIUS: f32 = 0.015;
pub const LIFT_HEIGHT: f32 = 0.08;
pub const PLACE_HEIGHT: f32 = 3.0 * PARTICLE_RADIUS;
pub const LIFT_STEPS: usize = 20;
pub const MOVE_STEPS: usize = 120;
pub const LOWER_STEPS: usize = 20;
pub const RELEASE_SETTLE_STEPS: usize = 100;

/// Ranges for randomising the initial cloth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpawnConfig {
    /// Side length is drawn uniformly from this interval.
    pub side: (f32, f32),
    /// Centre offset drawn uniformly from `[-max, max]` on each axis.
    pub max_offset: f32,
    /// Yaw drawn uniformly from `[-max, max]` degrees.
    pub max_yaw_deg: f32,
    pub settle_steps: usize,
}

impl Default for SpawnConfig {
    fn default() -> Self {
        Self {
            side: (0.40, 0.52),
            max_offset: 0.06,
            max_yaw_deg: 10.0,
            settle_steps: 200,
        }
    }
}

impl SpawnConfig {
    /// Centred, axis-aligned cloth of the nominal side.
    pub fn fixed() -> Self {
        Self {
            side: (NOMINAL_SIDE, NOMINAL_SIDE),
            max_offset: 0.0,
            max_yaw_deg: 0.0,
            ..Self::default()
        }
    }
}

/// Full simulator state.
#[derive(Clone, Debug, PartialEq)]
pub struct ClothState {
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
    pub rest_positions: Vec<Vec3>,
    pub mesh_edges: Vec<(usize, usize)>,
    pub rest_lengths: Vec<f32>,
    pub grasped: Option<usize>,
    /// Kinematic target of the grasped particle.
    pub gripper: Vec3,
    pub grid_dims: (usize, usize),
}

/// Top-down pick and place, both points in world metres.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PickPlaceAction {
    pub pick_xy: [f32; 2],
    pub place_xy: [f32; 2],
}

impl PickPlaceAction {
    pub fn in_workspace(&self) -> bool {
        in_workspace(self.pick_xy) && in_workspace(self.place_xy)
    }

    pub fn clamped(self) -> Self {
        Self {
            pick_xy: clamp_to_workspace(self.pick_xy),
            place_xy: clamp_to_workspace(self.place_xy),
        }
    }
}

pub fn in_workspace(p: [f32; 2]) -> bool {
    p.iter().all(|v| v.is_finite() && v.abs() <= WORKSPACE_HALF)
}

pub fn clamp_to_workspace(p: [f32; 2]) -> [f32; 2] {
    [
        p[0].clamp(-WORKSPACE_HALF, WORKSPACE_HALF),
        p[1].clamp(-WORKSPACE_HALF, WORKSPACE_HALF),
    ]
}

/// Orthographic top-down camera over the workspace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub half_extent: f32,
    pub size: usize,
}

impl Default for Camera {
    fn default() -> Self {
        Self {
            half_extent: WORKSPACE_HALF,
            size: IMAGE_SIZE,
        }
    }
}

impl Camera {
    pub fn meters_per_pixel(&self) -> f32 {
        2.0 * self.half_extent / self.size as f32
    }

    /// World xy of a pixel centre. Row 0 is the far (+y) edge.
    pub fn world_of(&self, row: usize, col: usize) -> [f32; 2] {
        let m = self.meters_per_pixel();
        [
            -self.half_extent + (col as f32 + 0.5) * m,
            self.half_extent - (row as f32 + 0.5) * m,
        ]
    }

    /// Pixel containing a world point, if inside the image.
    pub fn pixel_of(&self, xy: [f32; 2]) -> Option<(usize, usize)> {
        let m = self.meters_per_pixel();
        let c = ((xy[0] + self.half_extent) / m).floor();
        let r = ((self.half_extent - xy[1]) / m).floor();
        let n = self.size as f32;
        if c < 0.0 || r < 0.0 || c >= n || r >= n {
            return None;
        }
        Some((r as usize, c as usize))
    }

    /// Like [`Camera::pixel_of`] but clamps points on or past the border.
    pub fn pixel_of_clamped(&self, xy: [f32; 2]) -> (usize, usize) {
        let m = self.meters_per_pixel();
        let max = (self.size - 1) as f32;
        let c = ((xy[0] + self.half_extent) / m).floor().clamp(0.0, max);
        let r = ((self.half_extent - xy[1]) / m).floor().clamp(0.0, max);
        (r as usize, c as usize)
    }
}

/// Normalised top-down height map (`0` is bare table, `1` is [`DEPTH_CAP`]).
#[derive(Clone, Debug, PartialEq)]
pub struct DepthImage {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    pub camera: Camera,
}

impl DepthImage {
    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    /// Writes a binary 16-bit PGM (big-endian samples, maxval 65535).
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        write_pgm16(path, self.width, self.height, &self.values)
    }
}

/// Writes `values` (clamped to `[0, 1]`) as a binary 16-bit PGM.
pub fn write_pgm16(path: &Path, width: usize, height: usize, values: &[f32]) -> Result<()> {
    if values.len() != width * height {
        return Err(contract(format!(
            "{} values for a {width}x{height} image",
            values.len()
        )));
    }
    let mut buf = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for &v in values {
        let s = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        buf.extend_from_slice(&s.to_be_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

fn grid_edges(rows: usize, cols: usize) -> Vec<(usize, usize)> {
    let idx = |r: usize, c: usize| r * cols + c;
    let mut edges = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if c + 1 < cols {
                edges.push((idx(r, c), idx(r, c + 1)));
            }
            if r + 1 < rows {
                edges.push((idx(r, c), idx(r + 1, c)));
            }
            if r + 1 < rows && c + 1 < cols {
                edges.push((idx(r, c), idx(r + 1, c + 1)));
                edges.push((idx(r, c + 1), idx(r + 1, c)));
            }
        }
    }
    edges
}

impl ClothState {
    /// Builds a state from explicit particles; `rest_positions` defaults to
    /// the current positions. Used by tests and small experiments.
    pub fn from_particles(
        positions: Vec<Vec3>,
        rest_positions: Option<Vec<Vec3>>,
        mesh_edges: Vec<(usize, usize)>,
        grid_dims: (usize, usize),
    ) -> Result<Self> {
        let n = positions.len();
        let rest = rest_positions.unwrap_or_else(|| positions.clone());
        if rest.len() != n || grid_dims.0 * grid_dims.1 != n {
            return Err(contract("particle count does not match rest positions / grid"));
        }
        if mesh_edges.iter().any(|&(a, b)| a >= n || b >= n || a == b) {
            return Err(contract("mesh edge refers to an invalid particle"));
        }
        let rest_lengths = mesh_edges.iter().map(|&(a, b)| dist(rest[a], rest[b])).collect();
        Ok(Self {
            velocities: vec![[0.0; 3]; n],
            positions,
            rest_positions: rest,
            mesh_edges,
            rest_lengths,
            grasped: None,
            gripper: [0.0; 3],
            grid_dims,
        })
    }

    /// State on the standard grid with explicit rest positions; velocities
    /// are zero.
    pub fn on_grid(positions: Vec<Vec3>, rest_positions: Vec<Vec3>) -> Result<Self> {
        Self::from_particles(positions, Some(rest_positions), grid_edges(GRID_ROWS, GRID_COLS), (GRID_ROWS, GRID_COLS))
    }

    pub fn particle_count(&self) -> usize {
        self.positions.len()
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.grid_dims.1 + col
    }

    /// Grid corner particles as (bottom-left, bottom-right, top-left, top-right).
    pub fn corner_indices(&self) -> [usize; 4] {
        let (r, c) = self.grid_dims;
        [self.index(0, 0), self.index(0, c - 1), self.index(r - 1, 0), self.index(r - 1, c - 1)]
    }

    pub fn centroid(&self) -> Vec3 {
        let n = self.positions.len() as f32;
        let mut c = [0.0; 3];
        for p in &self.positions {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|v| v / n)
    }

    pub fn max_speed(&self) -> f32 {
        self.velocities
            .iter()
            .map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt())
            .fold(0.0, f32::max)
    }

    pub fn kinetic_energy(&self) -> f64 {
        self.velocities
            .iter()
            .map(|v| 0.5 * (v[0] as f64).powi(2) + 0.5 * (v[1] as f64).powi(2) + 0.5 * (v[2] as f64).powi(2))
            .sum()
    }

    pub fn min_z(&self) -> f32 {
        self.positions.iter().map(|p| p[2]).fold(f32::INFINITY, f32::min)
    }
}

/// Spawns a flat cloth, deterministic in `(config, seed)`, and lets it settle.
pub fn spawn(config: &SpawnConfig, seed: u64) -> Result<ClothState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng, lo: f32, hi: f32| if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let side = draw(&mut rng, config.side.0, config.side.1);
    let off_x = draw(&mut rng, -config.max_offset, config.max_offset);
    let off_y = draw(&mut rng, -config.max_offset, config.max_offset);
    let yaw = draw(&mut rng, -config.max_yaw_deg, config.max_yaw_deg).to_radians();
    if !(side > 0.0) {
        return Err(Error::Spawn(format!("invalid side length {side}")));
    }

    let (rows, cols) = (GRID_ROWS, GRID_COLS);
    let spacing = side / (cols - 1) as f32;
    let (sin, cos) = yaw.sin_cos();
    let mut positions = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let lx = (c as f32 - (cols - 1) as f32 / 2.0) * spacing;
            let ly = (r as f32 - (rows - 1) as f32 / 2.0) * spacing;
            positions.push([cos * lx - sin * ly + off_x, sin * lx + cos * ly + off_y, PARTICLE_RADIUS]);
        }
    }
    let limit = WORKSPACE_HALF - PARTICLE_RADIUS;
    if positions.iter().any(|p| p[0].abs() > limit || p[1].abs() > limit) {
        return Err(Error::Spawn(format!(
            "cloth of side {side:.3} m at ({off_x:.3}, {off_y:.3}) leaves the workspace"
        )));
    }
    let mut state = ClothState::from_particles(positions, None, grid_edges(rows, cols), (rows, cols))?;
    for _ in 0..config.settle_steps {
        step(&mut state);
    }
    Ok(state)
}

/// Advances the simulation by one fixed step of [`DT`].
pub fn step(state: &mut ClothState) {
    let n = state.positions.len();
    let mut inv_mass = vec![1.0f32; n];
    let mut pred = state.positions.clone();
    for i in 0..n {
        if Some(i) == state.grasped {
            inv_mass[i] = 0.0;
            pred[i] = state.gripper;
            continue;
        }
        let v = &mut state.velocities[i];
        v[2] -= GRAVITY * DT;
        for k in 0..3 {
            v[k] *= 1.0 - DAMPING;
            pred[i][k] += v[k] * DT;
        }
    }

    let contacts = self_collision_pairs(state, &pred);
    let mut ground_push = vec![0.0f32; n];
    for _ in 0..SOLVER_ITERATIONS {
        for (e, &(a, b)) in state.mesh_edges.iter().enumerate() {
            project_distance(&mut pred, &inv_mass, a, b, state.rest_lengths[e], false);
        }
        for &(a, b) in &contacts {
            let push = project_distance(&mut pred, &inv_mass, a, b, SELF_COLLISION_DIST, true);
            if push > 0.0 {
                contact_friction(&mut pred, &state.positions, &inv_mass, a, b, CLOTH_FRICTION * push);
            }
        }
        for i in 0..n {
            if pred[i][2] < PARTICLE_RADIUS && inv_mass[i] > 0.0 {
                ground_push[i] += PARTICLE_RADIUS - pred[i][2];
                pred[i][2] = PARTICLE_RADIUS;
            }
        }
    }

    for i in 0..n {
        if ground_push[i] > 0.0 && inv_mass[i] > 0.0 {
            // Coulomb friction on the tangential displacement of this step
            let dx = pred[i][0] - state.positions[i][0];
            let dy = pred[i][1] - state.positions[i][1];
            let t = (dx * dx + dy * dy).sqrt();
            let limit = FRICTION * ground_push[i];
            if t <= limit {
                pred[i][0] = state.positions[i][0];
                pred[i][1] = state.positions[i][1];
            } else {
                let s = limit / t;
                pred[i][0] -= dx * s;
                pred[i][1] -= dy * s;
            }
        }
        for k in 0..3 {
            state.velocities[i][k] = (pred[i][k] - state.positions[i][k]) / DT;
        }
        state.positions[i] = pred[i];
    }
}

/// Projects `‖p_b − p_a‖ = rest`; returns the magnitude of the correction.
fn project_distance(pred: &mut [Vec3], inv_mass: &[f32], a: usize, b: usize, rest: f32, only_push: bool) -> f32 {
    let w = inv_mass[a] + inv_mass[b];
    if w == 0.0 {
        return 0.0;
    }
    let d = [pred[b][0] - pred[a][0], pred[b][1] - pred[a][1], pred[b][2] - pred[a][2]];
    let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    if len < 1e-9 || (only_push && len >= rest) {
        return 0.0;
    }
    let c = (len - rest) / (len * w);
    for k in 0..3 {
        pred[a][k] += inv_mass[a] * c * d[k];
        pred[b][k] -= inv_mass[b] * c * d[k];
    }
    (len - rest).abs()
}

/// Coulomb friction between two touching particles: cancels (static) or
/// shortens (kinetic) their relative tangential displacement this step.
fn contact_friction(pred: &mut [Vec3], prev: &[Vec3], inv_mass: &[f32], a: usize, b: usize, limit: f32) {
    let w = inv_mass[a] + inv_mass[b];
    if w == 0.0 {
        return;
    }
    let mut nrm = [pred[b][0] - pred[a][0], pred[b][1] - pred[a][1], pred[b][2] - pred[a][2]];
    let len = (nrm[0] * nrm[0] + nrm[1] * nrm[1] + nrm[2] * nrm[2]).sqrt();
    if len < 1e-9 {
        return;
    }
    nrm.iter_mut().for_each(|v| *v /= len);
    let mut rel = [0.0f32; 3];
    for k in 0..3 {
        rel[k] = (pred[a][k] - prev[a][k]) - (pred[b][k] - prev[b][k]);
    }
    let dn = rel[0] * nrm[0] + rel[1] * nrm[1] + rel[2] * nrm[2];
    let mut tan = [0.0f32; 3];
    for k in 0..3 {
        tan[k] = rel[k] - dn * nrm[k];
    }
    let t = (tan[0] * tan[0] + tan[1] * tan[1] + tan[2] * tan[2]).sqrt();
    if t < 1e-12 {
        return;
    }
    let s = if t <= limit { 1.0 } else { limit / t };
    for k in 0..3 {
        let corr = tan[k] * s / w;
        pred[a][k] -= inv_mass[a] * corr;
        pred[b][k] += inv_mass[b] * corr;
    }
}

fn self_collision_pairs(state: &ClothState, pred: &[Vec3]) -> Vec<(usize, usize)> {
    let reach = 1.5 * SELF_COLLISION_DIST;
    let hash = SpatialHash::new(pred, reach);
    hash.pairs_within(pred, reach)
        .into_iter()
        .filter(|&(a, b)| dist(state.rest_positions[a], state.rest_positions[b]) > SELF_COLLISION_REST_EXCLUSION)
        .collect()
}

/// Topmost particle within [`GRASP_RADIUS`] of `xy` (ties: lowest index).
pub fn grasp_candidate(state: &ClothState, xy: [f32; 2]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &p) in state.positions.iter().enumerate() {
        if dist_xy(p, xy) <= GRASP_RADIUS && best.is_none_or(|b| p[2] > state.positions[b][2]) {
            best = Some(i);
        }
    }
    best
}

/// Runs the pick-and-place primitive. Returns the resulting state and
/// whether a particle was grasped; on a miss the state is returned unchanged.
pub fn execute_pick_place(state: &ClothState, action: &PickPlaceAction) -> Result<(ClothState, bool)> {
    if !action.in_workspace() {
        return Err(contract(format!("action {action:?} lies outside the workspace")));
    }
    let Some(idx) = grasp_candidate(state, action.pick_xy) else {
        return Ok((state.clone(), false));
    };
    let mut s = state.clone();
    let start = s.positions[idx];
    s.grasped = Some(idx);
    s.gripper = start;

    for k in 1..=LIFT_STEPS {
        let t = k as f32 / LIFT_STEPS as f32;
        s.gripper = [start[0], start[1], start[2] + (LIFT_HEIGHT - start[2]) * t];
        step(&mut s);
    }
    let top = s.gripper;
    for k in 1..=MOVE_STEPS {
        let t = k as f32 / MOVE_STEPS as f32;
        s.gripper = [
            top[0] + (action.place_xy[0] - top[0]) * t,
            top[1] + (action.place_xy[1] - top[1]) * t,
            LIFT_HEIGHT,
        ];
        step(&mut s);
    }
    for k in 1..=LOWER_STEPS {
        let t = k as f32 / LOWER_STEPS as f32;
        s.gripper[2] = LIFT_HEIGHT + (PLACE_HEIGHT - LIFT_HEIGHT) * t;
        step(&mut s);
    }
    s.grasped = None;
    for _ in 0..RELEASE_SETTLE_STEPS {
        step(&mut s);
    }
    Ok((s, true))
}

/// Z-buffer splat of particle discs, keeping the highest particle per pixel.
pub fn render_depth(state: &ClothState) -> DepthImage {
    render_positions(&state.positions)
}

pub fn render_positions(positions: &[Vec3]) -> DepthImage {
    let cam = Camera::default();
    let size = cam.size;
    let mpp = cam.meters_per_pixel();
    let mut values = vec![0.0f32; size * size];
    let reach = (PARTICLE_RADIUS / mpp).ceil() as isize + 1;
    for p in positions {
        let h = (p[2].max(0.0) / DEPTH_CAP).min(1.0);
        let (r0, c0) = cam.pixel_of_clamped([p[0], p[1]]);
        for r in (r0 as isize - reach)..=(r0 as isize + reach) {
            for c in (c0 as isize - reach)..=(c0 as isize + reach) {
                if r < 0 || c < 0 || r >= size as isize || c >= size as isize {
                    continue;
                }
                let w = cam.world_of(r as usize, c as usize);
                if dist_xy(*p, w) <= PARTICLE_RADIUS {
                    let v = &mut values[r as usize * size + c as usize];
                    if h > *v {
                        *v = h;
                    }
                }
            }
        }
    }
    DepthImage {
        height: size,
        width: size,
        values,
        camera: cam,
    }
}

/// Particles whose height reaches the depth buffer at their own pixel
/// (within [`VISIBILITY_EPS`]).
pub fn visible_particles(state: &ClothState, depth: &DepthImage) -> Vec<usize> {
    visible_among(&state.positions, depth)
}

pub fn visible_among(positions: &[Vec3], depth: &DepthImage) -> Vec<usize> {
    positions
        .iter()
        .enumerate()
        .filter(|(_, p)| {
            let (r, c) = depth.camera.pixel_of_clamped([p[0], p[1]]);
            let surface = depth.at(r, c) * DEPTH_CAP;
            p[2].min(DEPTH_CAP) >= surface - VISIBILITY_EPS
        })
        .map(|(i, _)| i)
        .collect()
}
