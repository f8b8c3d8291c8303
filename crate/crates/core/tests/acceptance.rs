//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Run alone with `cargo test --test acceptance`.

mod common;

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use common::{
    brute_force_scores, finite_difference, grad_case, injected_record, max_relative_error, plan_path, reference_adamw,
    Scalar, TINY_PLAN,
};
use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use viny::backbone::{count_parameters, BackboneParams, ModelConfig};
use viny::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Manifest};
use viny::exprunner::{emit_plot, plan_cells, run_grid, ExperimentPlan, GridOptions, PlotKind, RunRecord, Store};
use viny::metrics::{accumulate, miou, ConfusionCounts};
use viny::model::{gradient, Model};
use viny::objectives::{mim_loss, sample_mask, ClsHead, Head, ReconHead, SegHead, Trimap};
use viny::optim::{optimizer_step, OptimConfig, OptimState, Phase, PhaseConfig};
use viny::params::ParamSet;

const GRAD_STEP: f64 = 1e-3;
const GRAD_FLOOR: f64 = 1e-4;
const GRAD_TOL: f64 = 1e-3;
const GRAD_BUDGET_SECS: f64 = 120.0;
const COUNT_BUDGET_SECS: f64 = 1.0;
const MASK_DRAWS: usize = 10_000;
const METRIC_PAIRS: usize = 1_000;
const METRIC_TOL: f64 = 1e-12;
const OPTIM_TOL: f64 = 1e-7;
const DESK_MARGIN_PP: f64 = 1.0;
const DESK_LOSS_RATIO: f64 = 0.6;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn parameter_counts() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig::default();
    let analytic = cfg.analytic_param_count();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let backbone = BackboneParams::<f32>::init(cfg, &mut rng).map_err(|e| e.to_string())?;
    let traversed = count_parameters(&backbone);
    let cls = count_parameters(&Head::Classify(ClsHead::<f32>::zeros(&cfg, 2)));
    let seg = count_parameters(&Head::Segment(SegHead::<f32>::zeros(&cfg)));
    let secs = start.elapsed().as_secs_f64();
    ensure(
        analytic == 4_842_880
            && traversed == analytic
            && traversed + cls == 4_843_138
            && traversed + seg == 4_941_952
            && secs < COUNT_BUDGET_SECS,
        format!(
            "backbone {analytic} (traversal {traversed}), +2-way head {}, +segmentation head {}, {secs:.2}s",
            traversed + cls,
            traversed + seg
        ),
    )
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let mut worst = Vec::new();
    let mut ok = true;
    for objective in ["mim", "classify", "segment"] {
        let case = grad_case(objective, 17);
        let analytic = gradient(&case.model, &case.images.view(), case.targets()).map_err(|e| e.to_string())?;
        let numeric = finite_difference(&case, GRAD_STEP);
        let (err, path) = max_relative_error(&analytic, &numeric, GRAD_FLOOR);
        ok &= err <= GRAD_TOL;
        worst.push(format!("{objective} {err:.1e} ({path})"));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(
        ok && secs < GRAD_BUDGET_SECS,
        format!("max rel err {} <= {GRAD_TOL:e}, {secs:.1}s", worst.join(", ")),
    )
}

fn mask_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut wrong = 0;
    let mut hits = [0usize; 64];
    for _ in 0..MASK_DRAWS {
        let m = sample_mask(&mut rng, 64, 0.5).map_err(|e| e.to_string())?;
        wrong += (m.count() != 32) as usize;
        m.masked_indices().for_each(|i| hits[i] += 1);
    }
    let freq = |h: usize| h as f64 / MASK_DRAWS as f64;
    let (lo, hi) = hits
        .iter()
        .fold((1.0f64, 0.0f64), |(lo, hi), &h| (lo.min(freq(h)), hi.max(freq(h))));

    let mut bit_changes = 0;
    for trial in 0..100 {
        let mask = sample_mask(&mut rng, 64, 0.5).map_err(|e| e.to_string())?;
        let pred = Array2::from_shape_fn((64, 48), |_| rng.random_range(-1.0f32..1.0));
        let target = Array2::from_shape_fn((64, 48), |_| rng.random_range(0.0f32..1.0));
        let base = mim_loss(&pred.view(), &target.view(), &mask).map_err(|e| e.to_string())?;
        let (mut p2, mut t2) = (pred.clone(), target.clone());
        for i in (0..64).filter(|&i| !mask.as_slice()[i]) {
            p2.row_mut(i).mapv_inplace(|v| v + trial as f32 + 0.5);
            t2.row_mut(i).mapv_inplace(|v| 1.0 - v);
        }
        let moved = mim_loss(&p2.view(), &t2.view(), &mask).map_err(|e| e.to_string())?;
        bit_changes += (base.to_bits() != moved.to_bits()) as usize;
    }
    ensure(
        wrong == 0 && bit_changes == 0 && lo >= 0.46 && hi <= 0.54,
        format!(
            "{MASK_DRAWS} draws with popcount != 32: {wrong}; per-position frequency in [{lo:.3}, {hi:.3}]; \
             loss changed under unmasked perturbation: {bit_changes}/100"
        ),
    )
}

fn metric_oracle() -> Outcome {
    let truth = Trimap::new(array![[0, 0], [1, 1]]).unwrap();
    let pred = Trimap::new(array![[0, 1], [1, 1]]).unwrap();
    let mut c = ConfusionCounts::default();
    accumulate(&pred, &truth, &mut c).map_err(|e| e.to_string())?;
    let worked = miou(&c).map_err(|e| e.to_string())?;
    let worked_ok = (worked.miou - 175.0 / 3.0).abs() < METRIC_TOL && worked.accuracy == 75.0;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..METRIC_PAIRS {
        let p: Vec<u8> = (0..64).map(|_| rng.random_range(0..3)).collect();
        let t: Vec<u8> = (0..64).map(|_| rng.random_range(0..3)).collect();
        let mut c = ConfusionCounts::default();
        accumulate(
            &Trimap::new(Array2::from_shape_vec((8, 8), p.clone()).unwrap()).unwrap(),
            &Trimap::new(Array2::from_shape_vec((8, 8), t.clone()).unwrap()).unwrap(),
            &mut c,
        )
        .map_err(|e| e.to_string())?;
        let r = miou(&c).map_err(|e| e.to_string())?;
        let (acc, m) = brute_force_scores(&p, &t);
        worst = worst
            .max((r.accuracy - acc).abs() / acc.max(1e-300))
            .max((r.miou - m).abs() / m.max(1e-300));
    }
    ensure(
        worked_ok && worst <= METRIC_TOL,
        format!(
            "worked 2x2 mIoU {:.4}%; {METRIC_PAIRS} random 8x8 pairs, max rel err {worst:.1e}",
            worked.miou
        ),
    )
}

fn optimizer_and_schedule() -> Outcome {
    let step = |theta: f64, g: f64, lr: f64, wd: f64| -> f64 {
        let mut p = Scalar(theta);
        let mut st = OptimState::new(&p);
        optimizer_step(&mut p, &Scalar(g), &mut st, &OptimConfig::new(lr, wd), lr).expect("finite step");
        p.0
    };
    let cases = [
        (step(1.0, 1.0, 0.1, 0.0), 0.9),
        (step(1.0, -3.0, 0.1, 0.0), 1.1),
        (step(1.0, 0.0, 0.1, 0.0), 1.0),
        (step(1.0, 0.0, 0.1, 0.05), 0.995),
        (
            step(2.0, 0.5, 1e-3, 1e-4),
            reference_adamw(2.0, &[0.5], 1e-3, 1e-4, 0.9, 0.999, 1e-8),
        ),
    ];
    let worst = cases.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let pre = PhaseConfig::defaults(Phase::Pretrain);
    let ft = PhaseConfig::defaults(Phase::Finetune);
    let lrs = [pre.lr_at(0), pre.lr_at(50), pre.lr_at(85), ft.lr_at(95)];
    let exact = lrs == [1e-4, 1e-5, 1e-6, 2.5e-4];
    ensure(
        worst <= OPTIM_TOL && exact,
        format!(
            "single-step max err {worst:.1e}; pre-train lr {:e} -> {:e} -> {:e}; fine-tune epoch 95 lr {:e}",
            lrs[0], lrs[1], lrs[2], lrs[3]
        ),
    )
}

fn bits<P: ParamSet<f32>>(p: &P) -> Vec<u32> {
    let mut out = Vec::new();
    p.visit(&mut |_, v, _| out.extend(v.iter().map(|x| x.to_bits())));
    out
}

fn checkpoint_round_trip() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let backbone = BackboneParams::<f32>::init(cfg, &mut rng).map_err(|e| e.to_string())?;
    let model = Model::new(backbone, Head::Recon(ReconHead::init(&cfg, &mut rng)));
    let mut state = OptimState::new(&model);
    state.step = 7;
    state.first.iter_mut().flatten().for_each(|m| *m = rng.random());
    state.second.iter_mut().flatten().for_each(|v| *v = rng.random());
    let path = dir.path().join("pretrain.ckpt");
    let ckpt = Checkpoint::from_model(&model, Manifest::new(cfg, Some(Phase::Pretrain), 99, 9), Some(&state));
    save_checkpoint(&path, &ckpt).map_err(|e| e.to_string())?;

    let loaded = load_checkpoint(&path).map_err(|e| e.to_string())?;
    let optim_ok = loaded.optim.as_ref() == Some(&state);
    let restored = loaded.clone().into_model().map_err(|e| e.to_string())?;
    let exact = bits(&restored) == bits(&model) && optim_ok;

    let seg = loaded.clone().with_head(Head::Segment(SegHead::zeros(&cfg)));
    let cls = loaded.with_head(Head::Classify(ClsHead::zeros(&cfg, 2)));
    let backbone_kept = bits(&seg.backbone) == bits(&model.backbone);
    let (n_seg, n_cls) = (count_parameters(&seg), count_parameters(&cls));
    ensure(
        exact && backbone_kept && n_seg == 4_842_880 + 99_072 && n_cls == 4_843_138,
        format!(
            "bit-exact parameters and optimizer state: {exact}; head swap to segmentation {n_seg} = 4842880 + 99072, \
             to 2-way classifier {n_cls}"
        ),
    )
}

struct DeskOutcome {
    outcome: Outcome,
    store: Option<(tempfile::TempDir, ExperimentPlan)>,
}

fn miou_by_cell(records: &[RunRecord]) -> BTreeMap<(usize, usize, usize), f64> {
    records
        .iter()
        .filter_map(|r| {
            let m = r.metrics.as_ref().filter(|_| r.is_complete())?;
            Some(((r.key.pretrain_size, r.key.finetune_size, r.key.run), m.miou))
        })
        .collect()
}

fn desk_run() -> DeskOutcome {
    let fail = |e: String| DeskOutcome {
        outcome: Err(e),
        store: None,
    };
    let plan = match ExperimentPlan::load(&plan_path("desk.toml")) {
        Ok(p) => p,
        Err(e) => return fail(e.to_string()),
    };
    let dir = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => return fail(e.to_string()),
    };
    let start = Instant::now();
    let store = match Store::open(dir.path()) {
        Ok(s) => s,
        Err(e) => return fail(e.to_string()),
    };
    let summary = match run_grid(&plan, &store, GridOptions { resume: true, jobs: 1 }) {
        Ok(s) => s,
        Err(e) => return fail(e.to_string()),
    };
    let secs = start.elapsed().as_secs_f64();
    let cells = miou_by_cell(&summary.records);
    let runs = plan.runs_per_cell;
    let (small, large) = (plan.finetune_sizes[0], plan.finetune_sizes[1]);

    let mut lines = Vec::new();
    let mut trend_ok = true;
    for &pt in &plan.pretrain_sizes {
        let rising = (0..runs)
            .filter(|&r| match (cells.get(&(pt, small, r)), cells.get(&(pt, large, r))) {
                (Some(a), Some(b)) => b > a,
                _ => false,
            })
            .count();
        trend_ok &= rising * 3 >= runs * 2;
        lines.push(format!(
            "(a) pre-train {pt}: mIoU rises {small}->{large} in {rising}/{runs} runs"
        ));
    }

    let (base, pre) = (plan.pretrain_sizes[0], plan.pretrain_sizes[1]);
    let mut diffs = Vec::new();
    for r in 0..runs {
        if let (Some(b), Some(p)) = (cells.get(&(base, small, r)), cells.get(&(pre, small, r))) {
            diffs.push(p - b);
        }
    }
    let within = diffs.iter().filter(|d| **d >= -DESK_MARGIN_PP).count();
    let margin_ok = within * 3 >= runs * 2;
    let shown: Vec<String> = diffs.iter().map(|d| format!("{d:+.2}")).collect();
    lines.push(format!(
        "(b) fine-tune {small}: pre-trained minus baseline mIoU [{}] pp, {within}/{runs} >= -{DESK_MARGIN_PP}",
        shown.join(", ")
    ));

    let mut ratios = BTreeMap::new();
    for r in summary.records.iter().filter(|r| r.key.pretrain_size > 0) {
        let pre: Vec<f64> = r
            .history
            .iter()
            .filter(|e| e.phase == Phase::Pretrain)
            .map(|e| e.mean_loss)
            .collect();
        if let (Some(first), Some(last)) = (pre.first(), pre.last()) {
            ratios.insert(r.key.run, last / first);
        }
    }
    let loss_ok = !ratios.is_empty() && ratios.values().all(|&q| q < DESK_LOSS_RATIO);
    let shown: Vec<String> = ratios.values().map(|q| format!("{q:.3}")).collect();
    lines.push(format!(
        "(c) final/first pre-training loss [{}] < {DESK_LOSS_RATIO}",
        shown.join(", ")
    ));

    let complete = summary.failed == 0 && cells.len() == plan_cells(&plan).len();
    let detail = format!(
        "{} cells in {:.0}s, {} pre-training runs\n      {}",
        cells.len(),
        secs,
        summary.pretrain_runs,
        lines.join("\n      ")
    );
    DeskOutcome {
        outcome: ensure(complete && trend_ok && margin_ok && loss_ok, detail),
        store: Some((dir, plan)),
    }
}

fn grid_bookkeeping(desk: Option<&(tempfile::TempDir, ExperimentPlan)>) -> Outcome {
    let full = ExperimentPlan::load(&plan_path("full.toml")).map_err(|e| e.to_string())?;
    let n_full = plan_cells(&full).len();

    let scratch;
    let (root, plan) = match desk {
        Some((dir, plan)) => (dir.path().to_path_buf(), plan.clone()),
        None => {
            scratch = tempfile::tempdir().map_err(|e| e.to_string())?;
            let plan = ExperimentPlan::from_toml_str(TINY_PLAN).map_err(|e| e.to_string())?;
            let store = Store::open(scratch.path()).map_err(|e| e.to_string())?;
            run_grid(&plan, &store, GridOptions { resume: true, jobs: 1 }).map_err(|e| e.to_string())?;
            (scratch.path().to_path_buf(), plan)
        }
    };
    let store = Store::open(&root).map_err(|e| e.to_string())?;
    let before = store.records().map_err(|e| e.to_string())?;
    let victim = before.last().ok_or("no records to delete")?.clone();
    store.delete_record(&victim.config_hash).map_err(|e| e.to_string())?;
    let resumed = run_grid(&plan, &store, GridOptions { resume: true, jobs: 1 }).map_err(|e| e.to_string())?;
    let redone = store.read_record(&victim.config_hash).map_err(|e| e.to_string())?;
    let same = redone.as_ref().and_then(|r| r.metrics.clone()) == victim.metrics;

    let injected = tempfile::tempdir().map_err(|e| e.to_string())?;
    let inj = Store::open(injected.path()).map_err(|e| e.to_string())?;
    inj.write_record(&injected_record(45000, true, 250, 0, 74.65, 48.92))
        .map_err(|e| e.to_string())?;
    inj.write_record(&injected_record(45000, false, 250, 0, 77.44, 52.73))
        .map_err(|e| e.to_string())?;
    let plot = emit_plot(&inj, PlotKind::Delta).map_err(|e| e.to_string())?;
    let delta = plot
        .series
        .first()
        .and_then(|s| s.points.first())
        .map(|p| p.mean)
        .unwrap_or(f64::NAN);

    ensure(
        n_full == 144
            && resumed.trained == 1
            && resumed.skipped == before.len() - 1
            && same
            && (delta + 3.81).abs() < 1e-9,
        format!(
            "full plan {n_full} cells; resume after deleting {} retrained {} skipped {} (same metrics: {same}); \
             delta 48.92 - 52.73 = {delta:.2}",
            victim.key, resumed.trained, resumed.skipped
        ),
    )
}

fn report(name: &str, outcome: &Outcome) -> bool {
    match outcome {
        Ok(detail) => println!("PASS  {name}: {detail}"),
        Err(detail) => println!("FAIL  {name}: {detail}"),
    }
    outcome.is_ok()
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let mut ok = true;
    ok &= report("parameter counts", &parameter_counts());
    ok &= report("gradient check", &gradient_check());
    ok &= report("mask properties", &mask_properties());
    ok &= report("metric oracle", &metric_oracle());
    ok &= report("optimizer and schedule", &optimizer_and_schedule());
    ok &= report("checkpoint round trip", &checkpoint_round_trip());
    let desk = desk_run();
    ok &= report("desk-scale run", &desk.outcome);
    ok &= report("grid bookkeeping", &grid_bookkeeping(desk.store.as_ref()));
    if ok {
        println!("acceptance: all criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: at least one criterion failed");
        ExitCode::FAILURE
    }
}
