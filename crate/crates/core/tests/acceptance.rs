//! Acceptance suite. Runs the default pipeline once in a scratch directory,
//! then checks each criterion and prints one PASS/FAIL line per criterion.
//! Exits non-zero when any criterion fails.

mod common;

use std::error::Error;
use std::f64::consts::PI;
use std::path::Path;
use std::time::Instant;

use common::{camera, fd_texel, random_scene, rng, ImageLoss};
use rand::seq::SliceRandom;
use rand::Rng;
use vln_hijack::agent::{PolicyParams, RenderedObservations, Vocabulary};
use vln_hijack::attack::{
    optimize_attack, AttackConfig, AttackInstance, AttackMode, AttackProblem, AttackSetup, AttackedObservations,
    ObjectViews,
};
use vln_hijack::eval::{dtw, evaluate_instance, ndtw, success, Reference};
use vln_hijack::math::Vec3;
use vln_hijack::pipeline::{
    load_instances, load_params, load_worlds, read_json, run, AblationDoc, Command, CompetenceDoc, EvalDoc, Layout,
    RunConfig, Split, Stage, WorldDoc,
};
use vln_hijack::render::{backprop_to_texture, rasterize, shade, FaceMask};
use vln_hijack::worldgen::TextureAtlas;

type Res<T> = Result<T, Box<dyn Error>>;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Res<Outcome> {
    Ok(Outcome {
        passed,
        detail: detail.into(),
    })
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn pipeline_config(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.run.out_dir = out.to_path_buf();
    cfg.ablation.instances = 5;
    cfg.ablation.epsilon = vec![0.1, 0.5];
    cfg.ablation.iterations = vec![300, 900];
    cfg.ablation.steps_rendered = vec![cfg.attack.steps_rendered];
    cfg.ablation.instructions = vec![vln_hijack::worldgen::INSTRUCTIONS_PER_TRAJECTORY];
    cfg
}

fn with_mode(cfg: &RunConfig, mode: AttackMode) -> RunConfig {
    let mut c = cfg.clone();
    c.attack.mode = mode;
    c
}

fn run_pipeline(cfg: &RunConfig) -> Res<()> {
    run(Command::GenWorld, cfg)?;
    run(Command::TrainAgent, cfg)?;
    for mode in [AttackMode::Stop, AttackMode::Trajectory] {
        let c = with_mode(cfg, mode);
        for command in [Command::BuildAttacks, Command::Attack, Command::Eval] {
            run(command, &c)?;
        }
    }
    let c = with_mode(cfg, AttackMode::Trajectory);
    run(Command::Ablate, &c)?;
    run(Command::Report, &c)?;
    Ok(())
}

/// Trained agent, its world and the trajectory-mode instances.
struct Trained {
    params: PolicyParams,
    world: WorldDoc,
    instances: Vec<AttackInstance>,
}

impl Trained {
    fn load(cfg: &RunConfig) -> Res<Self> {
        let cfg = with_mode(cfg, AttackMode::Trajectory);
        let world = load_worlds(&cfg)?.remove(0);
        Ok(Self {
            params: load_params(&cfg)?,
            instances: load_instances(&cfg)?
                .into_iter()
                .filter(|i| i.env_id == world.env_id)
                .collect(),
            world,
        })
    }
}

/// A loaded run plus clean observations of its world.
struct Ctx<'a> {
    params: &'a PolicyParams,
    world: &'a WorldDoc,
    instances: &'a [AttackInstance],
    obs: RenderedObservations<'a>,
}

impl<'a> Ctx<'a> {
    fn new(t: &'a Trained, cfg: &RunConfig) -> Res<Self> {
        Ok(Self {
            params: &t.params,
            world: &t.world,
            instances: &t.instances,
            obs: RenderedObservations::new(&t.world.scene, &t.world.graph, &cfg.render)?,
        })
    }

    fn setup<'b>(&'b self, vocab: &'b Vocabulary, cfg: &'b RunConfig) -> AttackSetup<'b> {
        AttackSetup {
            params: self.params,
            vocab,
            scene: &self.world.scene,
            graph: &self.world.graph,
            clean: &self.obs,
            spec: &cfg.render,
        }
    }

    fn first(&self) -> Res<&AttackInstance> {
        Ok(self.instances.first().ok_or("pipeline produced no trajectory instance")?)
    }
}

fn c1_render_gradient() -> Res<Outcome> {
    let mut r = rng(1001);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for _ in 0..10 {
        let scene = random_scene(&mut r, 30, 6, 16);
        let (w, h) = (scene.atlas.width(), scene.atlas.height());
        let views: Vec<_> = (0..4)
            .map(|k| rasterize(&scene, &camera(k as f64 * PI / 2.0, r.gen_range(-0.4..0.4), 16)))
            .collect();
        let losses: Vec<ImageLoss> = views.iter().map(|_| ImageLoss::random(&mut r, 16 * 16 * 3)).collect();
        let mask = FaceMask::all(scene.faces.len());
        let mut grad = vec![0.0; w * h * 3];
        for (buf, loss) in views.iter().zip(&losses) {
            let img = shade(buf, &scene.atlas);
            let g = backprop_to_texture(buf, &loss.grad(&img.pixels), &mask, w, h)?;
            for (a, b) in grad.iter_mut().zip(&g.values) {
                *a += b;
            }
        }
        let total = |imgs: &[Vec<f64>]| -> f64 { imgs.iter().zip(&losses).map(|(p, l)| l.value(p)).sum() };
        let mut live: Vec<usize> = (0..grad.len()).filter(|&i| grad[i] != 0.0).collect();
        live.shuffle(&mut r);
        for &t in live.iter().take(64) {
            let fd = fd_texel(&views, &scene.atlas, t, 1e-3, &total);
            worst = worst.max(rel_err(grad[t], fd));
            checked += 1;
        }
    }
    outcome(
        worst <= 1e-3 && checked >= 10 * 64,
        format!("{checked} texels on 10 scenes, max relative error {worst:.2e}"),
    )
}

fn c2_chain_gradient(t: &Ctx, cfg: &RunConfig) -> Res<Outcome> {
    let vocab = Vocabulary::default();
    let inst = t.first()?;
    let (scene, graph) = (&t.world.scene, &t.world.graph);
    let views = ObjectViews::build(scene, graph, inst.attack_object, &cfg.render)?;
    let batch = &inst.train_split[..inst.train_split.len().min(4)];
    let problem = AttackProblem::new(
        t.params,
        &vocab,
        scene,
        graph,
        &t.obs,
        &views,
        inst,
        batch,
        cfg.attack.steps_rendered,
    )?;
    let idx: Vec<usize> = (0..batch.len()).collect();
    let (_, grad) = problem.loss(&scene.atlas, &idx)?;
    let mut live: Vec<usize> = (0..grad.values.len()).filter(|&i| grad.values[i] != 0.0).collect();
    if live.len() < 16 {
        return outcome(false, format!("only {} texels with a gradient", live.len()));
    }
    live.shuffle(&mut rng(1002));
    let h = 1e-3;
    let mut worst: f64 = 0.0;
    for &i in &live[..16] {
        let eval = |delta: f64| -> Res<(f64, f64)> {
            let mut a = scene.atlas.clone();
            let v = a.texels()[i];
            a.texels_mut()[i] = (v as f64 + delta).clamp(0.0, 1.0) as f32;
            let actual = a.texels()[i] as f64 - v as f64;
            Ok((problem.loss(&a, &idx)?.0, actual))
        };
        let ((lp, dp), (lm, dm)) = (eval(h)?, eval(-h)?);
        worst = worst.max(rel_err(grad.values[i], (lp - lm) / (dp - dm)));
    }
    outcome(worst <= 1e-3, format!("16 texels, max relative error {worst:.2e}"))
}

/// Minimum cost over every monotone alignment, by exhaustive recursion.
fn brute_dtw(p: &[Vec3], q: &[Vec3], i: usize, j: usize) -> f64 {
    let c = p[i].distance(q[j]);
    if i + 1 == p.len() && j + 1 == q.len() {
        return c;
    }
    let mut best = f64::INFINITY;
    if i + 1 < p.len() {
        best = best.min(brute_dtw(p, q, i + 1, j));
    }
    if j + 1 < q.len() {
        best = best.min(brute_dtw(p, q, i, j + 1));
    }
    if i + 1 < p.len() && j + 1 < q.len() {
        best = best.min(brute_dtw(p, q, i + 1, j + 1));
    }
    c + best
}

fn c3_metric_oracles() -> Res<Outcome> {
    let mut r = rng(1003);
    let mut worst: f64 = 0.0;
    let mut self_ndtw: f64 = 0.0;
    for _ in 0..500 {
        let pos: Vec<Vec3> = (0..8)
            .map(|_| Vec3::new(r.gen_range(-10.0..10.0), r.gen_range(-10.0..10.0), 0.0))
            .collect();
        let mut path = || -> Vec<usize> { (0..r.gen_range(1..=6)).map(|_| r.gen_range(0..8)).collect() };
        let (p, q) = (path(), path());
        let at = |x: &[usize]| -> Vec<Vec3> { x.iter().map(|&n| pos[n]).collect() };
        let b = brute_dtw(&at(&p), &at(&q), 0, 0);
        worst = worst.max((dtw(&p, &q, &pos)? - b).abs() / b.max(1.0));
        self_ndtw = self_ndtw.max((ndtw(&p, &p, &pos)? - 1.0).abs());
    }
    let line = [Vec3::ZERO, Vec3::new(3.0, 0.0, 0.0), Vec3::new(3.0 + 1e-9, 0.0, 0.0)];
    let boundary = success(&[1], &[0], &line)? && !success(&[2], &[0], &line)?;
    outcome(
        worst <= 1e-9 && self_ndtw <= 1e-12 && boundary,
        format!(
            "500 pairs, max dtw deviation {worst:.1e}, |ndtw(P,P) - 1| {self_ndtw:.1e}, 3.0 m inclusive: {boundary}"
        ),
    )
}

fn c4_budget(t: &Ctx, cfg: &RunConfig) -> Res<Outcome> {
    let vocab = Vocabulary::default();
    let inst = t.first()?;
    let before = t.params.to_bytes(None);
    let original = t.world.scene.atlas.clone();
    let mask = FaceMask::for_object(&t.world.scene, inst.attack_object)?;
    let mut masked = vec![false; original.texels().len()];
    for texel in mask.texels(&t.world.scene) {
        masked[3 * texel..3 * texel + 3].fill(true);
    }
    let eps = cfg.attack.epsilon;
    let mut violations = 0usize;
    let mut worst: f64 = 0.0;
    let mut steps = 0;
    let mut check = |_: usize, a: &TextureAtlas| {
        steps += 1;
        for (i, (&x, &o)) in a.texels().iter().zip(original.texels()).enumerate() {
            let dev = (x as f64 - o as f64).abs();
            let ok = (0.0..=1.0).contains(&x)
                && if masked[i] {
                    dev <= eps + 1e-9
                } else {
                    x.to_bits() == o.to_bits()
                };
            if masked[i] {
                worst = worst.max(dev);
            }
            violations += !ok as usize;
        }
    };
    let config = AttackConfig {
        iterations: 300,
        ..cfg.attack.clone()
    };
    let run = optimize_attack(&t.setup(&vocab, cfg), inst, &config, &mut check)?;
    let frozen = t.params.to_bytes(None) == before;
    outcome(
        violations == 0 && frozen && steps == 300 && run.checkpoints.len() == 300 / config.checkpoint_every,
        format!(
            "{steps} steps checked, {violations} violations, max masked deviation {worst:.4} (eps {eps}), params frozen: {frozen}"
        ),
    )
}

fn c5_competence(cfg: &RunConfig) -> Res<Outcome> {
    let c: CompetenceDoc = read_json(&Layout::new(&cfg.run.out_dir).competence(), &cfg.stage_hash(Stage::Agent))?;
    let c = c.competence;
    outcome(
        c.episodes >= 100 && c.sr_pct >= 80.0 && c.ndtw >= 0.75,
        format!("{} held-out episodes, SR {:.1}%, nDTW {:.3}", c.episodes, c.sr_pct, c.ndtw),
    )
}

fn eval_doc(cfg: &RunConfig, mode: AttackMode) -> Res<EvalDoc> {
    let c = with_mode(cfg, mode);
    Ok(read_json(&Layout::new(&c.run.out_dir).evaluation(mode), &c.stage_hash(Stage::Attack))?)
}

/// Per-instance attacked minus unattacked value of `metric`.
fn deltas(doc: &EvalDoc, split: Split, reference: Reference, metric: &dyn Fn(&vln_hijack::eval::MetricsReport) -> f64) -> Vec<f64> {
    doc.instances
        .iter()
        .filter_map(|i| Some(metric(i.get(split, true, reference)?) - metric(i.get(split, false, reference)?)))
        .collect()
}

fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    x.iter().sum::<f64>() / x.len() as f64
}

/// One-sided sign test: probability of at least this many positive
/// differences among the non-zero ones under a fair coin.
fn sign_test(d: &[f64]) -> f64 {
    let n = d.iter().filter(|&&x| x != 0.0).count();
    let k = d.iter().filter(|&&x| x > 0.0).count();
    let mut tail = 0.0;
    let mut c = 1.0;
    for i in 0..=n {
        if i >= k {
            tail += c;
        }
        c = c * (n - i) as f64 / (i + 1) as f64;
    }
    tail / 2f64.powi(n as i32)
}

fn c6_stop(cfg: &RunConfig) -> Res<Outcome> {
    let doc = eval_doc(cfg, AttackMode::Stop)?;
    let stop = |r: &vln_hijack::eval::MetricsReport| r.stop_rate_pct;
    let train = mean(&deltas(&doc, Split::Train, Reference::Attack, &stop));
    let test = mean(&deltas(&doc, Split::Test, Reference::Attack, &stop));
    let n = doc.instances.len();
    outcome(
        n >= 10 && train >= 50.0 && test >= 20.0,
        format!("{n} instances, stop rate delta train {train:+.1} pts, held-out {test:+.1} pts"),
    )
}

fn c7_trajectory(cfg: &RunConfig) -> Res<Outcome> {
    let doc = eval_doc(cfg, AttackMode::Trajectory)?;
    let d_ndtw = deltas(&doc, Split::Train, Reference::Attack, &|r| r.mean_ndtw());
    let d_sr = mean(&deltas(&doc, Split::Train, Reference::Attack, &|r| r.sr_pct));
    let p = sign_test(&d_ndtw);
    let n = doc.instances.len();
    let m = mean(&d_ndtw);
    outcome(
        n >= 10 && m >= 0.10 && d_sr >= 10.0 && p < 0.05,
        format!("{n} instances, train nDTW delta {m:+.3}, attack-goal SR delta {d_sr:+.1} pts, sign test p = {p:.3}"),
    )
}

fn c8_disruption(cfg: &RunConfig) -> Res<Outcome> {
    let doc = eval_doc(cfg, AttackMode::Trajectory)?;
    let d = mean(&deltas(&doc, Split::Test, Reference::Original, &|r| r.sr_pct));
    outcome(
        d <= -10.0,
        format!("{} held-out episodes, SR vs original delta {d:+.1} pts", doc.instances.len()),
    )
}

fn c9_ablation(cfg: &RunConfig) -> Res<Outcome> {
    let c = with_mode(cfg, AttackMode::Trajectory);
    let doc: AblationDoc = read_json(&Layout::new(&c.run.out_dir).ablation(), &c.stage_hash(Stage::Ablation))?;
    let at = |variable: &str, value: f64| -> (usize, f64) {
        let v: Vec<f64> = doc
            .rows
            .iter()
            .filter(|r| r.variable == variable && r.value == value)
            .map(|r| r.attacked_ndtw)
            .collect();
        (v.len(), mean(&v))
    };
    let (e1, e5) = (at("epsilon", 0.1), at("epsilon", 0.5));
    let (i3, i9) = (at("iterations", 300.0), at("iterations", 900.0));
    let sizes = [e1.0, e5.0, i3.0, i9.0].iter().all(|&n| n == 5);
    outcome(
        sizes && e5.1 >= e1.1 && i9.1 >= i3.1,
        format!(
            "5 instances, nDTW eps 0.1 {:.4} / 0.5 {:.4}, iterations 300 {:.4} / 900 {:.4}",
            e1.1, e5.1, i3.1, i9.1
        ),
    )
}

fn c10_no_op(t: &Ctx, cfg: &RunConfig) -> Res<Outcome> {
    let vocab = Vocabulary::default();
    let inst = t.first()?;
    let config = AttackConfig {
        epsilon: 0.0,
        ..cfg.attack.clone()
    };
    let run = optimize_attack(&t.setup(&vocab, cfg), inst, &config, &mut |_, _| {})?;
    let views = ObjectViews::build(&t.world.scene, &t.world.graph, inst.attack_object, &cfg.render)?;
    let attacked = AttackedObservations::new(&t.obs, &views, &run.atlas);
    let mut identical = run.atlas == t.world.scene.atlas;
    for split in Split::ALL {
        for reference in [Reference::Attack, Reference::Original] {
            let eps = split.episodes(inst);
            let a = evaluate_instance(t.params, &vocab, &t.world.graph, &attacked, inst, &eps, reference)?;
            let b = evaluate_instance(t.params, &vocab, &t.world.graph, &t.obs, inst, &eps, reference)?;
            identical &= serde_json::to_vec(&a)? == serde_json::to_vec(&b)?;
        }
    }
    outcome(identical, format!("atlas and 6 reports bitwise identical: {identical}"))
}

fn c11_throughput(t: &Ctx, cfg: &RunConfig) -> Res<Outcome> {
    let vocab = Vocabulary::default();
    let inst = t.first()?;
    let config = AttackConfig {
        batch_size: 4,
        iterations: 300,
        ..cfg.attack.clone()
    };
    let started = Instant::now();
    optimize_attack(&t.setup(&vocab, cfg), inst, &config, &mut |_, _| {})?;
    let secs = started.elapsed().as_secs_f64();
    outcome(
        secs <= 600.0 && cfg.render.width == 32 && cfg.render.height == 32,
        format!(
            "{}x{} sub-images, batch 4, 300 iterations in {secs:.1} s",
            cfg.render.width, cfg.render.height
        ),
    )
}

fn main() {
    let dir = tempfile::tempdir().expect("scratch directory");
    let cfg = pipeline_config(dir.path());
    let started = Instant::now();
    let pipeline = run_pipeline(&cfg);
    println!("pipeline: {:.0} s", started.elapsed().as_secs_f64());
    let trained = match &pipeline {
        Ok(()) => Trained::load(&cfg).map_err(|e| e.to_string()),
        Err(e) => Err(format!("pipeline failed: {e}")),
    };
    let ctx = trained
        .as_ref()
        .map_err(String::clone)
        .and_then(|t| Ctx::new(t, &cfg).map_err(|e| e.to_string()));
    let needs = |f: &dyn Fn(&Ctx) -> Res<Outcome>| -> Res<Outcome> {
        match &ctx {
            Ok(t) => f(t),
            Err(e) => Err(e.clone().into()),
        }
    };
    let criteria: Vec<(&str, Box<dyn Fn() -> Res<Outcome> + '_>)> = vec![
        ("render gradient", Box::new(c1_render_gradient)),
        ("full-chain gradient", Box::new(|| needs(&|t| c2_chain_gradient(t, &cfg)))),
        ("metric oracles", Box::new(c3_metric_oracles)),
        ("budget invariants", Box::new(|| needs(&|t| c4_budget(t, &cfg)))),
        ("agent competence", Box::new(|| c5_competence(&cfg))),
        ("stop-attack effect", Box::new(|| c6_stop(&cfg))),
        ("trajectory-attack effect", Box::new(|| c7_trajectory(&cfg))),
        ("instruction-following disruption", Box::new(|| c8_disruption(&cfg))),
        ("ablation monotonicity", Box::new(|| c9_ablation(&cfg))),
        ("no-op equivalence", Box::new(|| needs(&|t| c10_no_op(t, &cfg)))),
        ("throughput", Box::new(|| needs(&|t| c11_throughput(t, &cfg)))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let (passed, detail) = match check() {
            Ok(o) => (o.passed, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += !passed as usize;
        println!(
            "criterion {:>2} {:<34} {} ({}; {:.1} s)",
            i + 1,
            name,
            if passed { "PASS" } else { "FAIL" },
            detail,
            started.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
