mod common;

use std::collections::BTreeMap;

use common::world::{episode, line_world, small_world, Fixture};
use vln_hijack::agent::{PolicyParams, Vocabulary};
use vln_hijack::attack::{
    attack_loss, best_checkpoint, build_attack_instance, optimize_attack, AttackConfig, AttackInstance, AttackMode,
    AttackProblem, AttackSetup, AttackedObservations, ObjectViews, Rejection,
};
use vln_hijack::eval::{evaluate_instance, Reference};
use vln_hijack::render::FaceMask;
use vln_hijack::worldgen::TextureAtlas;

fn vocab() -> Vocabulary {
    Vocabulary::default()
}

fn fixture() -> (Fixture, Vec<AttackInstance>) {
    let fx = small_world(3, 240);
    let inst = fx.instances(AttackMode::Trajectory, 2);
    assert!(!inst.is_empty(), "fixture world yields no attack instance");
    (fx, inst)
}

/// Value indices of every channel of the given texels.
fn channels(texels: Vec<usize>) -> Vec<usize> {
    texels.into_iter().flat_map(|t| [3 * t, 3 * t + 1, 3 * t + 2]).collect()
}

fn quick(iterations: usize, epsilon: f64) -> AttackConfig {
    AttackConfig {
        iterations,
        checkpoint_every: 10,
        batch_size: 4,
        epsilon,
        lr: 0.05,
        ..AttackConfig::default()
    }
}

#[test]
fn zero_policy_stop_loss_is_log_of_action_count() {
    let (scene, graph) = line_world(4, 2.0);
    let train: Vec<_> = (0..5).map(|i| episode(10 + i, &[0, 1, 2])).collect();
    let inst = AttackInstance {
        id: 99,
        env_id: 0,
        mode: AttackMode::Stop,
        test_episode: episode(99, &[3, 2, 1, 0]),
        attack_object: 0,
        category: scene.object(0).unwrap().category,
        coverage: 0.5,
        v_atk: 1,
        attack_trajectory: Vec::new(),
        train_split: train[..4].to_vec(),
        val_split: train[4..].to_vec(),
    };
    inst.validate(&graph).unwrap();
    let p = PolicyParams::zeros(vocab().len(), 8);
    let spec = common::world::small_spec();
    let (loss, grad) = attack_loss(&p, &vocab(), &scene, &graph, &inst, &train, 1, &spec).unwrap();
    assert!((loss - 3f64.ln()).abs() < 1e-12, "{loss}");
    assert!(grad.is_zero());
}

#[test]
fn gradient_is_confined_to_the_object_and_matches_finite_differences() {
    let (fx, instances) = fixture();
    let inst = &instances[0];
    let p = PolicyParams::random(vocab().len(), 16, 11);
    let clean = fx.observations();
    let views = ObjectViews::build(&fx.scene, &fx.graph, inst.attack_object, &fx.spec).unwrap();
    let batch = &inst.train_split[..inst.train_split.len().min(4)];
    let problem = AttackProblem::new(&p, &vocab(), &fx.scene, &fx.graph, &clean, &views, inst, batch, 3).unwrap();
    let idx: Vec<usize> = (0..batch.len()).collect();
    let (_, grad) = problem.loss(&fx.scene.atlas, &idx).unwrap();
    let masked = channels(FaceMask::for_object(&fx.scene, inst.attack_object).unwrap().texels(&fx.scene));
    let inside: std::collections::HashSet<usize> = masked.iter().copied().collect();
    for (i, g) in grad.values.iter().enumerate() {
        if !inside.contains(&i) {
            assert_eq!(*g, 0.0, "texel {i} outside the object has gradient");
        }
    }
    let live: Vec<usize> = masked.iter().copied().filter(|&i| grad.values[i] != 0.0).collect();
    assert!(live.len() >= 16);
    let h = 1e-3;
    let mut worst: f64 = 0.0;
    for k in 0..16 {
        let i = live[k * live.len() / 16];
        let eval = |delta: f64| -> (f64, f64) {
            let mut a = fx.scene.atlas.clone();
            let v = a.texels()[i];
            a.texels_mut()[i] = (v as f64 + delta) as f32;
            let actual = a.texels()[i] as f64 - v as f64;
            (problem.loss(&a, &idx).unwrap().0, actual)
        };
        let ((lp, dp), (lm, dm)) = (eval(h), eval(-h));
        let fd = (lp - lm) / (dp - dm);
        let g = grad.values[i];
        worst = worst.max((fd - g).abs() / fd.abs().max(g.abs()).max(1e-8));
    }
    assert!(worst <= 1e-3, "max relative error {worst}");
}

fn setup<'a>(fx: &'a Fixture, p: &'a PolicyParams, v: &'a Vocabulary, clean: &'a dyn vln_hijack::agent::ObservationSource) -> AttackSetup<'a> {
    AttackSetup {
        params: p,
        vocab: v,
        scene: &fx.scene,
        graph: &fx.graph,
        clean,
        spec: &fx.spec,
    }
}

#[test]
fn every_step_respects_the_budget_and_params_stay_frozen() {
    let (fx, instances) = fixture();
    let inst = &instances[0];
    let p = PolicyParams::random(vocab().len(), 16, 2);
    let before = p.to_bytes(None);
    let v = vocab();
    let clean = fx.observations();
    let original = fx.scene.atlas.clone();
    let masked: std::collections::HashSet<usize> =
        channels(FaceMask::for_object(&fx.scene, inst.attack_object).unwrap().texels(&fx.scene))
            .into_iter()
            .collect();
    let eps = 0.3;
    let mut steps = 0;
    let mut moved = false;
    let mut check = |_: usize, a: &TextureAtlas| {
        steps += 1;
        for (i, (&x, &o)) in a.texels().iter().zip(original.texels()).enumerate() {
            assert!((0.0..=1.0).contains(&x));
            if masked.contains(&i) {
                assert!((x as f64 - o as f64).abs() <= eps + 1e-9);
                moved |= x != o;
            } else {
                assert_eq!(x.to_bits(), o.to_bits());
            }
        }
    };
    optimize_attack(&setup(&fx, &p, &v, &clean), inst, &quick(40, eps), &mut check).unwrap();
    assert_eq!(steps, 40);
    assert!(moved);
    assert_eq!(p.to_bytes(None), before);
}

#[test]
fn runs_are_deterministic_for_a_seed() {
    let (fx, instances) = fixture();
    let p = PolicyParams::random(vocab().len(), 16, 2);
    let v = vocab();
    let clean = fx.observations();
    let s = setup(&fx, &p, &v, &clean);
    let a = optimize_attack(&s, &instances[0], &quick(20, 0.3), &mut |_, _| {}).unwrap();
    let b = optimize_attack(&s, &instances[0], &quick(20, 0.3), &mut |_, _| {}).unwrap();
    assert_eq!(a.atlas, b.atlas);
    assert_eq!(a.checkpoints, b.checkpoints);
}

#[test]
fn zero_budget_is_a_no_op() {
    let (fx, instances) = fixture();
    let inst = &instances[0];
    let p = PolicyParams::random(vocab().len(), 16, 2);
    let v = vocab();
    let clean = fx.observations();
    let run = optimize_attack(&setup(&fx, &p, &v, &clean), inst, &quick(20, 0.0), &mut |_, _| {}).unwrap();
    assert_eq!(run.atlas, fx.scene.atlas);
    let views = ObjectViews::build(&fx.scene, &fx.graph, inst.attack_object, &fx.spec).unwrap();
    let attacked = AttackedObservations::new(&clean, &views, &run.atlas);
    for r in [Reference::Attack, Reference::Original] {
        let a = evaluate_instance(&p, &v, &fx.graph, &attacked, inst, &inst.train_split, r).unwrap();
        let b = evaluate_instance(&p, &v, &fx.graph, &clean, inst, &inst.train_split, r).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }
}

#[test]
fn single_episode_attack_lowers_its_loss() {
    let (fx, instances) = fixture();
    let mut inst = instances[0].clone();
    inst.train_split.truncate(1);
    let p = PolicyParams::random(vocab().len(), 16, 6);
    let v = vocab();
    let clean = fx.observations();
    let mut last = fx.scene.atlas.clone();
    optimize_attack(&setup(&fx, &p, &v, &clean), &inst, &quick(30, 0.5), &mut |_, a| last = a.clone()).unwrap();
    let views = ObjectViews::build(&fx.scene, &fx.graph, inst.attack_object, &fx.spec).unwrap();
    let problem =
        AttackProblem::new(&p, &v, &fx.scene, &fx.graph, &clean, &views, &inst, &inst.train_split, 3).unwrap();
    let before = problem.loss(&fx.scene.atlas, &[0]).unwrap().0;
    let after = problem.loss(&last, &[0]).unwrap().0;
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn empty_validation_split_is_an_error() {
    let (fx, instances) = fixture();
    let mut inst = instances[0].clone();
    inst.val_split.clear();
    let p = PolicyParams::random(vocab().len(), 8, 2);
    let v = vocab();
    let clean = fx.observations();
    assert!(optimize_attack(&setup(&fx, &p, &v, &clean), &inst, &quick(10, 0.3), &mut |_, _| {}).is_err());
}

#[test]
fn best_checkpoint_ties_keep_the_earliest() {
    assert_eq!(best_checkpoint(&[0.2, 0.9, 0.9, 0.4]), Some(1));
    assert_eq!(best_checkpoint(&[]), None);
}

fn candidates(entries: &[(usize, usize, f64)]) -> BTreeMap<usize, Vec<(usize, f64)>> {
    let mut m: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
    for &(node, obj, cov) in entries {
        m.entry(node).or_default().push((obj, cov));
    }
    m
}

#[test]
fn four_supporting_episodes_are_not_enough() {
    let (scene, graph) = line_world(6, 2.0);
    let test = episode(1, &[0, 1, 2, 3, 4, 5]);
    let cands = candidates(&[(1, 0, 0.5)]);
    let four: Vec<_> = (0..4).map(|i| episode(10 + i, &[3, 2, 1, 0])).collect();
    let r = build_attack_instance(&test, &four, &scene, &graph, &cands, AttackMode::Stop).unwrap();
    assert_eq!(r.unwrap_err(), Rejection::NoCandidate);
    let five: Vec<_> = (0..5).map(|i| episode(10 + i, &[3, 2, 1, 0])).collect();
    let inst = build_attack_instance(&test, &five, &scene, &graph, &cands, AttackMode::Stop)
        .unwrap()
        .unwrap();
    assert_eq!((inst.v_atk, inst.attack_object), (1, 0));
    assert_eq!(inst.train_split.len() + inst.val_split.len(), 5);
    assert!(inst.attack_trajectory.is_empty());
}

#[test]
fn guide_matching_episodes_do_not_count_as_support() {
    let (scene, graph) = line_world(6, 2.0);
    let test = episode(1, &[0, 1, 2, 3, 4, 5]);
    let cands = candidates(&[(1, 0, 0.5)]);
    let mut train: Vec<_> = (0..4).map(|i| episode(10 + i, &[3, 2, 1, 0])).collect();
    train.push(episode(20, &[0, 1, 2]));
    let r = build_attack_instance(&test, &train, &scene, &graph, &cands, AttackMode::Trajectory).unwrap();
    assert_eq!(r.unwrap_err(), Rejection::NoCandidate);
}

#[test]
fn larger_visibility_wins() {
    let (scene, graph) = line_world(6, 2.0);
    let test = episode(1, &[0, 1, 2, 3, 4, 5]);
    let cands = candidates(&[(1, 0, 0.45), (2, 1, 0.62)]);
    let train: Vec<_> = (0..6).map(|i| episode(10 + i, &[4, 3, 2, 1, 0])).collect();
    let inst = build_attack_instance(&test, &train, &scene, &graph, &cands, AttackMode::Trajectory)
        .unwrap()
        .unwrap();
    assert_eq!((inst.v_atk, inst.attack_object, inst.coverage), (2, 1, 0.62));
    let goal = graph.position(*inst.attack_trajectory.last().unwrap());
    assert!(goal.distance(graph.position(5)) >= 3.0);
    assert_eq!(inst.attack_trajectory[0], 2);
}

#[test]
fn no_far_goal_is_rejected() {
    let (scene, graph) = line_world(6, 0.5);
    let test = episode(1, &[0, 1, 2, 3, 4, 5]);
    let cands = candidates(&[(1, 0, 0.5)]);
    let train: Vec<_> = (0..5).map(|i| episode(10 + i, &[3, 2, 1, 0])).collect();
    let r = build_attack_instance(&test, &train, &scene, &graph, &cands, AttackMode::Trajectory).unwrap();
    assert_eq!(r.unwrap_err(), Rejection::NoFarGoal);
}
