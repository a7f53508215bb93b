//! Simulator, renderer and graph labels on a real half fold.

use langfold::cloth_sim::{
    execute_pick_place, render_depth, spawn, visible_particles, Camera, ClothState, SpawnConfig, DEPTH_CAP, PARTICLE_RADIUS,
};
use langfold::graph::{mesh_edge_labels, GraphObservation, EDGE_RADIUS};
use langfold::lang::{Direction, TaskSpec, TaskType};
use langfold::oracle::run_oracle;
use langfold::spatial::dist;

fn flat() -> ClothState {
    spawn(&SpawnConfig::fixed(), 0).unwrap()
}

fn half_folded(flat: &ClothState) -> ClothState {
    let task = TaskSpec::new(TaskType::HalfFold, Direction::TopOverBottom).unwrap();
    run_oracle(task, flat).unwrap().1
}

/// Particles that stayed put during the fold and are roofed over: every
/// quadrant around them holds a particle at least one thickness higher
/// within one grid spacing, and their own pixel centre lies inside one of
/// those particles' discs. Discs on a grid leave small diagonal holes, so
/// the second condition is what "fully covered" means for a splat render.
fn covered_lower_layer(before: &ClothState, after: &ClothState) -> Vec<usize> {
    let spacing = dist(before.rest_positions[0], before.rest_positions[1]);
    let camera = Camera::default();
    let p = &after.positions;
    (0..p.len())
        .filter(|&i| dist(before.positions[i], p[i]) < 0.02)
        .filter(|&i| {
            let (r, c) = camera.pixel_of_clamped([p[i][0], p[i][1]]);
            let centre = camera.world_of(r, c);
            let mut quadrants = [false; 4];
            let mut roofed = false;
            for q in p.iter().filter(|q| q[2] > p[i][2] + 2.0 * PARTICLE_RADIUS) {
                let (dx, dy) = (q[0] - p[i][0], q[1] - p[i][1]);
                if dx.hypot(dy) <= spacing {
                    quadrants[usize::from(dx >= 0.0) + 2 * usize::from(dy >= 0.0)] = true;
                }
                roofed |= (q[0] - centre[0]).hypot(q[1] - centre[1]) <= PARTICLE_RADIUS;
            }
            roofed && quadrants.iter().all(|&q| q)
        })
        .collect()
}

fn surface_height(depth_value: f32) -> f32 {
    depth_value * DEPTH_CAP + PARTICLE_RADIUS
}

#[test]
fn double_layer_reads_two_thicknesses() {
    let before = flat();
    let after = half_folded(&before);
    let single = surface_height(render_depth(&before).values.iter().copied().fold(0.0, f32::max));
    let depth = render_depth(&after);
    let interior = covered_lower_layer(&before, &after);
    assert!(interior.len() >= 10, "only {} covered interior particles", interior.len());
    let mut ratios: Vec<f32> = interior
        .iter()
        .map(|&i| {
            let (r, c) = depth.camera.pixel_of_clamped([after.positions[i][0], after.positions[i][1]]);
            surface_height(depth.at(r, c)) / single
        })
        .collect();
    ratios.sort_by(f32::total_cmp);
    let median = ratios[ratios.len() / 2];
    assert!((1.7..=2.3).contains(&median), "median surface ratio {median}");
    assert!(ratios[0] > 1.5, "a covered pixel reads only {} thicknesses", ratios[0]);
}

#[test]
fn covered_lower_layer_is_invisible() {
    let before = flat();
    let after = half_folded(&before);
    let visible = visible_particles(&after, &render_depth(&after));
    let interior = covered_lower_layer(&before, &after);
    assert!(!interior.is_empty());
    for i in interior {
        assert!(!visible.contains(&i), "lower-layer particle {i} is visible");
    }
    assert!(!visible.is_empty());
}

#[test]
fn folding_lowers_the_mesh_edge_fraction() {
    let before = flat();
    let after = half_folded(&before);
    let fraction = |s: &ClothState| {
        let (_, g) = GraphObservation::observe(s, 0).unwrap();
        let labels = mesh_edge_labels(&g, s).unwrap();
        labels.iter().filter(|&&l| l).count() as f64 / labels.len() as f64
    };
    assert_eq!(fraction(&before), 1.0);
    let folded = fraction(&after);
    assert!(folded < 1.0, "fraction after fold {folded}");
}

#[test]
fn cross_layer_edges_are_not_mesh_edges() {
    let before = flat();
    let after = half_folded(&before);
    let moved = |i: usize| dist(before.positions[i], after.positions[i]) > 0.1;
    let (_, g) = GraphObservation::observe(&after, 0).unwrap();
    let labels = mesh_edge_labels(&g, &after).unwrap();
    let mut cross = 0;
    for (&(a, b), &label) in g.collision_edges.iter().zip(&labels) {
        let (pa, pb) = (g.source_particles[a], g.source_particles[b]);
        let rest = dist(after.rest_positions[pa], after.rest_positions[pb]);
        assert_eq!(label, rest <= EDGE_RADIUS, "edge ({a}, {b})");
        if moved(pa) != moved(pb) && rest > 0.2 {
            cross += 1;
            assert!(!label, "edge across the fold ({pa}, {pb}) labelled as mesh");
        }
    }
    assert!(cross > 0, "no edge joins the two layers");
}

#[test]
fn pick_and_place_is_bit_reproducible() {
    let s = spawn(&SpawnConfig::default(), 9).unwrap();
    let c = s.positions[s.corner_indices()[0]];
    let action = langfold::cloth_sim::PickPlaceAction { pick_xy: [c[0], c[1]], place_xy: [0.0, 0.0] };
    let a = execute_pick_place(&s, &action).unwrap();
    let b = execute_pick_place(&s, &action).unwrap();
    assert!(a.1);
    assert_eq!(a.0, b.0);
    assert!(a.0.min_z() >= -1e-6);
}
