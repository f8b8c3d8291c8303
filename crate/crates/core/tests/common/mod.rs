//! Independent oracles shared by integration tests.
#![allow(dead_code)]

use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use viny::backbone::{BackboneParams, ModelConfig};
use viny::exprunner::store::{CellSeeds, RecordMetrics, Status};
use viny::exprunner::{CellKey, RunRecord};
use viny::model::{Model, Targets};
use viny::objectives::{ClsHead, Head, MaskPattern, ReconHead, SegHead, Trimap};
use viny::params::{ParamSet, Visitor};

pub fn shrunken_config() -> ModelConfig {
    ModelConfig {
        image_size: 32,
        patch_size: 16,
        dim: 8,
        depth: 1,
        heads: 2,
        head_dim: 4,
        mlp_dim: 16,
        channels: 3,
    }
}

pub struct GradCase {
    pub model: Model<f64>,
    pub images: Array4<f64>,
    pub masks: Vec<MaskPattern>,
    pub labels: Vec<usize>,
    pub trimaps: Vec<Trimap>,
}

impl GradCase {
    pub fn targets(&self) -> Targets<'_> {
        match self.model.head {
            Head::Recon(_) => Targets::Reconstruct(&self.masks),
            Head::Classify(_) => Targets::Classify(&self.labels),
            Head::Segment(_) => Targets::Segment(&self.trimaps),
        }
    }
}

/// Random shrunken-model case for one objective (`"mim"`, `"classify"`,
/// `"segment"`). The reconstruction head bias is pushed to ±3 so every
/// residual stays far from the kink of the absolute value.
pub fn grad_case(objective: &str, seed: u64) -> GradCase {
    let cfg = shrunken_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut backbone = BackboneParams::<f64>::init(cfg, &mut rng).unwrap();
    // Evaluate at a generic point: with 0.02-scale tokens the class row has
    // near-zero variance and the layer norm curvature swamps central differences.
    backbone.pos_embed.mapv_inplace(|_| rng.random_range(-1.0..1.0));
    backbone.cls_token.mapv_inplace(|_| rng.random_range(-1.0..1.0));
    let head = match objective {
        "mim" => {
            let mut h = ReconHead::init(&cfg, &mut rng);
            h.mask_token.mapv_inplace(|_| rng.random_range(-1.0..1.0));
            let bias = h.proj.bias.as_mut().unwrap();
            for (i, b) in bias.iter_mut().enumerate() {
                *b = if i % 2 == 0 { 3.0 } else { -3.0 };
            }
            Head::Recon(h)
        }
        "classify" => Head::Classify(ClsHead::init(&cfg, 6, &mut rng)),
        "segment" => Head::Segment(SegHead::init(&cfg, &mut rng)),
        other => panic!("unknown objective {other}"),
    };
    let batch = 2;
    let images = Array4::from_shape_fn((batch, 3, 32, 32), |_| rng.random::<f64>());
    let masks = vec![
        MaskPattern::from_bools(vec![true, false, false, true]),
        MaskPattern::from_bools(vec![false, true, true, false]),
    ];
    let labels = vec![1, 4];
    let trimaps = (0..batch)
        .map(|_| Trimap::new(Array2::from_shape_fn((32, 32), |_| rng.random_range(0..3u8))).unwrap())
        .collect();
    GradCase {
        model: Model::new(backbone, head),
        images,
        masks,
        labels,
        trimaps,
    }
}

/// Central differences over every scalar of the model, using only forward
/// loss evaluations.
pub fn finite_difference(case: &GradCase, step: f64) -> Vec<(String, Vec<f64>)> {
    let mut model = case.model.clone();
    let mut shapes = Vec::new();
    model.visit(&mut |p, v, _| shapes.push((p.to_string(), v.len())));
    let mut out = Vec::new();
    for (t, (path, len)) in shapes.iter().enumerate() {
        let mut g = Vec::with_capacity(*len);
        for j in 0..*len {
            let plus = eval_perturbed(&mut model, case, t, j, step);
            let minus = eval_perturbed(&mut model, case, t, j, -step);
            g.push((plus - minus) / (2.0 * step));
        }
        out.push((path.clone(), g));
    }
    out
}

fn eval_perturbed(model: &mut Model<f64>, case: &GradCase, tensor: usize, index: usize, delta: f64) -> f64 {
    nudge(model, tensor, index, delta);
    let loss = model.loss(&case.images.view(), case.targets()).unwrap();
    nudge(model, tensor, index, -delta);
    loss
}

fn nudge(model: &mut Model<f64>, tensor: usize, index: usize, delta: f64) {
    let mut t = 0;
    model.visit_mut(&mut |_, v| {
        if t == tensor {
            v[index] += delta;
        }
        t += 1;
    });
}

/// Relative error with the denominator floored at `floor`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest elementwise relative error between analytic and numeric gradients,
/// with the offending path.
pub fn max_relative_error(analytic: &Model<f64>, numeric: &[(String, Vec<f64>)], floor: f64) -> (f64, String) {
    let mut worst = (0.0, String::new());
    let mut t = 0;
    analytic.visit(&mut |path, v, _| {
        let (npath, nv) = &numeric[t];
        assert_eq!(path, npath);
        for (a, n) in v.iter().zip(nv.iter()) {
            let e = relative_error(*a, *n, floor);
            if e > worst.0 {
                worst = (e, path.to_string());
            }
        }
        t += 1;
    });
    worst
}

/// Brute-force tri-map scores over flat label slices: per class, walks the
/// pixels once counting intersection and union directly. Returns
/// `(accuracy %, mIoU %)` with never-seen classes left out of the mean.
pub fn brute_force_scores(pred: &[u8], truth: &[u8]) -> (f64, f64) {
    let correct = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    let accuracy = 100.0 * correct as f64 / pred.len() as f64;
    let mut ious = Vec::new();
    for class in 0..3u8 {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&p, &t) in pred.iter().zip(truth) {
            let (a, b) = (p == class, t == class);
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union > 0 {
            ious.push(100.0 * inter as f64 / union as f64);
        }
    }
    (accuracy, ious.iter().sum::<f64>() / ious.len() as f64)
}

/// Textbook Adam with decoupled decay on one scalar, iterated over `grads`.
pub fn reference_adamw(theta0: f64, grads: &[f64], lr: f64, wd: f64, b1: f64, b2: f64, eps: f64) -> f64 {
    let (mut theta, mut m, mut v) = (theta0, 0.0, 0.0);
    for (i, &g) in grads.iter().enumerate() {
        let t = (i + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1.powi(t));
        let v_hat = v / (1.0 - b2.powi(t));
        theta -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * theta);
    }
    theta
}

/// One learnable scalar, for driving the optimizer directly.
pub struct Scalar(pub f64);

impl ParamSet<f64> for Scalar {
    fn visit(&self, f: &mut Visitor<'_, f64>) {
        f("w", std::slice::from_ref(&self.0), &[1]);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("w", std::slice::from_mut(&mut self.0));
    }
}

/// A complete record carrying only the key and metrics, as if a run had
/// produced them.
pub fn injected_record(pt: usize, it: bool, ft: usize, run: usize, acc: f64, miou: f64) -> RunRecord {
    RunRecord {
        key: CellKey {
            pretrain_size: pt,
            intermediate: it,
            finetune_size: ft,
            run,
        },
        config_hash: format!("{pt}-{it}-{ft}-{run}"),
        plan_name: "injected".into(),
        runs_expected: 3,
        status: Status::Complete,
        failure: None,
        seeds: CellSeeds {
            init: 0,
            pretrain: 0,
            pretrain_data: 0,
            intermediate: 0,
            finetune: 0,
            finetune_data: 0,
        },
        metrics: Some(RecordMetrics {
            accuracy: acc,
            miou,
            iou_fg: None,
            iou_bg: None,
            iou_unknown: None,
            precision: [None; 3],
            n_pixels: 1,
        }),
        history: Vec::new(),
        wall_clock_secs: Default::default(),
        checkpoints: Vec::new(),
    }
}

/// Smallest plan that exercises every phase of a cell: one pre-training
/// size, no intermediate phase, one fine-tuning size, one run.
pub const TINY_PLAN: &str = r#"
name = "tiny"
seed = 7
pretrain_sizes = [8]
intermediate = "off"
finetune_sizes = [4]
runs_per_cell = 1
holdout_size = 4

[model]
image_size = 16
patch_size = 8
dim = 8
depth = 1
heads = 2
head_dim = 4
mlp_dim = 16

[datasets.pretrain]
source = { synthetic = 8 }
kind = "unlabeled"

[datasets.finetune]
source = { synthetic = 8 }
kind = "segmentation"

[phases.pretrain]
epochs = 2
batch_size = 4
milestones = [1]

[phases.finetune]
epochs = 2
batch_size = 4
milestones = [1]
"#;

pub fn plan_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("plans")
        .join(name)
}
