//! Grid execution with cached upstream phases and hash-keyed resume.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::plan::{CellKey, ExperimentPlan};
use super::store::{write_atomic, CellSeeds, FailureInfo, RecordMetrics, RunRecord, Status, Store, RECORD_VERSION};
use crate::backbone::{BackboneParams, ModelConfig};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Manifest};
use crate::data::{split_holdout, subsample, DatasetSpec, Sample};
use crate::error::{Error, Result};
use crate::metrics::AccuracyMode;
use crate::model::Model;
use crate::objectives::{ClsHead, Head, ReconHead, SegHead, NUM_SCENE_CLASSES};
use crate::optim::{Phase, PhaseConfig};
use crate::train::{evaluate, train_phase, EpochRecord};

/// Seed for one purpose, a pure function of its inputs.
pub fn derive_seed(base: u64, label: &str, parts: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    for p in parts {
        h.update(p.to_le_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("digest has 32 bytes"))
}

fn hash_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("fingerprints serialize");
    hex::encode(Sha256::digest(bytes))
}

pub fn cell_seeds(plan: &ExperimentPlan, key: &CellKey) -> CellSeeds {
    let base = plan.seed;
    let upstream_run = if plan.reseed_pretrain { key.run } else { 0 } as u64;
    let (pt, ft, run) = (key.pretrain_size as u64, key.finetune_size as u64, key.run as u64);
    CellSeeds {
        init: derive_seed(base, "init", &[upstream_run]),
        pretrain: derive_seed(base, "pretrain", &[pt, upstream_run]),
        pretrain_data: derive_seed(base, "pretrain-data", &[pt, upstream_run]),
        intermediate: derive_seed(base, "intermediate", &[run]),
        finetune: derive_seed(base, "finetune", &[ft, run]),
        finetune_data: derive_seed(base, "finetune-data", &[ft, run]),
    }
}

#[derive(Serialize)]
struct PretrainFingerprint<'a> {
    version: u32,
    model: &'a ModelConfig,
    size: usize,
    dataset: Option<&'a DatasetSpec>,
    phase: Option<PhaseConfig>,
    init_seed: u64,
    seed: u64,
    data_seed: u64,
}

#[derive(Serialize)]
struct IntermediateFingerprint<'a> {
    version: u32,
    upstream: &'a str,
    dataset: Option<&'a DatasetSpec>,
    phase: PhaseConfig,
    seed: u64,
}

#[derive(Serialize)]
struct CellFingerprint<'a> {
    version: u32,
    key: &'a CellKey,
    upstream: &'a str,
    dataset: &'a DatasetSpec,
    phase: PhaseConfig,
    holdout_size: usize,
    holdout_seed: u64,
    accuracy_mode: AccuracyMode,
    seeds: &'a CellSeeds,
}

/// A cell with its resolved seeds and content hashes.
#[derive(Clone, Debug, PartialEq)]
pub struct CellPlan {
    pub key: CellKey,
    pub seeds: CellSeeds,
    /// Identifies the pre-trained backbone this cell starts from.
    pub pretrain_hash: String,
    /// Identifies the backbone entering fine-tuning.
    pub upstream_hash: String,
    pub config_hash: String,
}

pub fn plan_cells(plan: &ExperimentPlan) -> Vec<CellPlan> {
    plan.cells()
        .into_iter()
        .map(|key| {
            let seeds = cell_seeds(plan, &key);
            let pretrained = key.pretrain_size > 0;
            let pretrain_hash = hash_json(&PretrainFingerprint {
                version: RECORD_VERSION,
                model: &plan.model,
                size: key.pretrain_size,
                dataset: plan.datasets.pretrain.as_ref().filter(|_| pretrained),
                phase: pretrained.then(|| plan.phase_config(Phase::Pretrain)),
                init_seed: seeds.init,
                seed: if pretrained { seeds.pretrain } else { 0 },
                data_seed: if pretrained { seeds.pretrain_data } else { 0 },
            });
            let upstream_hash = if key.intermediate {
                hash_json(&IntermediateFingerprint {
                    version: RECORD_VERSION,
                    upstream: &pretrain_hash,
                    dataset: plan.datasets.intermediate.as_ref(),
                    phase: plan.phase_config(Phase::Intermediate),
                    seed: seeds.intermediate,
                })
            } else {
                pretrain_hash.clone()
            };
            let config_hash = hash_json(&CellFingerprint {
                version: RECORD_VERSION,
                key: &key,
                upstream: &upstream_hash,
                dataset: &plan.datasets.finetune,
                phase: plan.phase_config(Phase::Finetune),
                holdout_size: plan.holdout_size,
                holdout_seed: plan.holdout_seed,
                accuracy_mode: plan.accuracy_mode,
                seeds: &seeds,
            });
            CellPlan {
                key,
                seeds,
                pretrain_hash,
                upstream_hash,
                config_hash,
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridOptions {
    /// Skip cells whose complete record is already stored.
    pub resume: bool,
    /// Worker threads; cells sharing a pre-trained backbone stay on one worker.
    pub jobs: usize,
}

impl Default for GridOptions {
    fn default() -> Self {
        Self { resume: true, jobs: 1 }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GridSummary {
    pub trained: usize,
    pub skipped: usize,
    pub failed: usize,
    /// Cells left alone because another process held their lock.
    pub locked: usize,
    pub pretrain_runs: usize,
    pub intermediate_runs: usize,
    /// Stored records of every plan cell after the run, in cell order.
    pub records: Vec<RunRecord>,
}

struct Lazy<T>(Mutex<Option<Arc<T>>>);

impl<T> Lazy<T> {
    fn new() -> Self {
        Self(Mutex::new(None))
    }

    fn get(&self, init: impl FnOnce() -> Result<T>) -> Result<Arc<T>> {
        let mut slot = self.0.lock().expect("pool lock poisoned");
        if let Some(v) = &*slot {
            return Ok(v.clone());
        }
        let v = Arc::new(init()?);
        *slot = Some(v.clone());
        Ok(v)
    }
}

/// Sidecar of a cached phase: what it cost and how the loss went.
#[derive(Serialize, Deserialize)]
struct PhaseArtifact {
    history: Vec<EpochRecord>,
    secs: f64,
}

struct Upstream {
    backbone: BackboneParams<f32>,
    history: Vec<EpochRecord>,
    wall_clock: BTreeMap<Phase, f64>,
    checkpoints: Vec<String>,
}

struct Ctx<'a> {
    plan: &'a ExperimentPlan,
    store: &'a Store,
    pretrain_pool: Lazy<Vec<Sample>>,
    intermediate_pool: Lazy<Vec<Sample>>,
    finetune_pool: Lazy<(Vec<Sample>, Vec<Sample>)>,
    pretrain_runs: AtomicUsize,
    intermediate_runs: AtomicUsize,
}

fn resolve_checked(spec: &DatasetSpec, cfg: &ModelConfig) -> Result<Vec<Sample>> {
    let samples = spec.resolve(cfg.image_size)?;
    for s in &samples {
        s.validate(cfg.channels, cfg.image_size)?;
    }
    Ok(samples)
}

impl Ctx<'_> {
    fn pretrain_pool(&self) -> Result<Arc<Vec<Sample>>> {
        self.pretrain_pool.get(|| {
            let spec = self
                .plan
                .datasets
                .pretrain
                .as_ref()
                .ok_or_else(|| Error::Plan("no pre-training dataset".into()))?;
            resolve_checked(spec, &self.plan.model)
        })
    }

    fn intermediate_pool(&self) -> Result<Arc<Vec<Sample>>> {
        self.intermediate_pool.get(|| {
            let spec = self
                .plan
                .datasets
                .intermediate
                .as_ref()
                .ok_or_else(|| Error::Plan("no intermediate dataset".into()))?;
            resolve_checked(spec, &self.plan.model)
        })
    }

    /// `(train, test)` of the fine-tuning corpus.
    fn finetune_pool(&self) -> Result<Arc<(Vec<Sample>, Vec<Sample>)>> {
        self.finetune_pool.get(|| {
            let all = resolve_checked(&self.plan.datasets.finetune, &self.plan.model)?;
            split_holdout(&all, self.plan.holdout_size, self.plan.holdout_seed)
        })
    }

    fn load_cached(&self, name: &str) -> Option<(BackboneParams<f32>, PhaseArtifact)> {
        let ckpt_path = self.store.resolve(&Store::checkpoint_rel(name));
        let side_path = ckpt_path.with_extension("json");
        if !ckpt_path.exists() || !side_path.exists() {
            return None;
        }
        let loaded = load_checkpoint(&ckpt_path).and_then(|c| {
            let text = std::fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
            let side: PhaseArtifact = serde_json::from_str(&text).map_err(|e| Error::Store(e.to_string()))?;
            Ok((c.backbone, side))
        });
        match loaded {
            Ok(v) if v.0.config == self.plan.model => Some(v),
            Ok(_) => {
                log::warn!("{name}: cached model config differs, retraining");
                None
            }
            Err(e) => {
                log::warn!("{name}: unusable cache ({e}), retraining");
                None
            }
        }
    }

    fn save_cached(
        &self,
        name: &str,
        backbone: &BackboneParams<f32>,
        phase: Phase,
        seed: u64,
        art: &PhaseArtifact,
    ) -> Result<()> {
        let ckpt = Checkpoint {
            manifest: Manifest::new(backbone.config, Some(phase), art.history.len(), seed),
            backbone: backbone.clone(),
            head: None,
            optim: None,
        };
        let path = self.store.resolve(&Store::checkpoint_rel(name));
        let side = serde_json::to_vec(art).map_err(|e| Error::Store(e.to_string()))?;
        write_atomic(&path.with_extension("json"), &side)?;
        save_checkpoint(&path, &ckpt)
    }

    fn pretrained(&self, cell: &CellPlan) -> Result<Upstream> {
        let mut rng = ChaCha8Rng::seed_from_u64(cell.seeds.init);
        let init = BackboneParams::init(self.plan.model, &mut rng)?;
        if cell.key.pretrain_size == 0 {
            return Ok(Upstream {
                backbone: init,
                history: Vec::new(),
                wall_clock: BTreeMap::new(),
                checkpoints: Vec::new(),
            });
        }
        let name = format!("pretrain-{}", &cell.pretrain_hash[..16]);
        let (backbone, art) = match self.load_cached(&name) {
            Some(hit) => {
                log::info!("{}: reusing {name}", cell.key);
                hit
            }
            None => {
                let pool = self.pretrain_pool()?;
                let data = subsample(&pool, cell.key.pretrain_size, cell.seeds.pretrain_data)?;
                let mut rng = ChaCha8Rng::seed_from_u64(cell.seeds.pretrain);
                let head = Head::Recon(ReconHead::init(&self.plan.model, &mut rng));
                let mut model = Model::new(init, head);
                let start = Instant::now();
                log::info!("{}: pre-training on {} images", cell.key, data.len());
                let history = train_phase(&mut model, &data, &self.plan.phase_config(Phase::Pretrain), &mut rng)?;
                let art = PhaseArtifact {
                    history,
                    secs: start.elapsed().as_secs_f64(),
                };
                self.save_cached(&name, &model.backbone, Phase::Pretrain, cell.seeds.pretrain, &art)?;
                self.pretrain_runs.fetch_add(1, Ordering::Relaxed);
                (model.backbone, art)
            }
        };
        Ok(Upstream {
            backbone,
            wall_clock: BTreeMap::from([(Phase::Pretrain, art.secs)]),
            history: art.history,
            checkpoints: vec![Store::checkpoint_rel(&name)],
        })
    }

    fn upstream(&self, cell: &CellPlan) -> Result<Upstream> {
        if !cell.key.intermediate {
            return self.pretrained(cell);
        }
        let name = format!("intermediate-{}", &cell.upstream_hash[..16]);
        let (backbone, art, mut up) = match self.load_cached(&name) {
            Some((backbone, art)) => {
                log::info!("{}: reusing {name}", cell.key);
                let up = self.pretrained(cell)?;
                (backbone, art, up)
            }
            None => {
                let up = self.pretrained(cell)?;
                let pool = self.intermediate_pool()?;
                let mut rng = ChaCha8Rng::seed_from_u64(cell.seeds.intermediate);
                let head = Head::Classify(ClsHead::init(&self.plan.model, NUM_SCENE_CLASSES, &mut rng));
                let mut model = Model::new(up.backbone.clone(), head);
                let start = Instant::now();
                log::info!("{}: intermediate training on {} images", cell.key, pool.len());
                let history = train_phase(
                    &mut model,
                    &pool,
                    &self.plan.phase_config(Phase::Intermediate),
                    &mut rng,
                )?;
                let art = PhaseArtifact {
                    history,
                    secs: start.elapsed().as_secs_f64(),
                };
                self.save_cached(
                    &name,
                    &model.backbone,
                    Phase::Intermediate,
                    cell.seeds.intermediate,
                    &art,
                )?;
                self.intermediate_runs.fetch_add(1, Ordering::Relaxed);
                (model.backbone, art, up)
            }
        };
        up.backbone = backbone;
        up.history.extend(art.history);
        up.wall_clock.insert(Phase::Intermediate, art.secs);
        up.checkpoints.push(Store::checkpoint_rel(&name));
        Ok(up)
    }

    fn run_cell(&self, cell: &CellPlan) -> Result<RunRecord> {
        let mut up = self.upstream(cell)?;
        let pool = self.finetune_pool()?;
        let (train, test) = (&pool.0, &pool.1);
        let data = subsample(train, cell.key.finetune_size, cell.seeds.finetune_data)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cell.seeds.finetune);
        let head = Head::Segment(SegHead::init(&self.plan.model, &mut rng));
        let mut model = Model::new(up.backbone, head);
        let start = Instant::now();
        log::info!("{}: fine-tuning on {} images", cell.key, data.len());
        let phase = self.plan.phase_config(Phase::Finetune);
        let history = train_phase(&mut model, &data, &phase, &mut rng)?;
        let report = evaluate(&model, test, self.plan.eval_batch_size, self.plan.accuracy_mode)?;
        up.wall_clock.insert(Phase::Finetune, start.elapsed().as_secs_f64());
        up.history.extend(history);
        if self.plan.save_finetuned {
            let rel = Store::checkpoint_rel(&format!("finetune-{}", &cell.config_hash[..16]));
            let manifest = Manifest::new(
                self.plan.model,
                Some(Phase::Finetune),
                phase.epochs,
                cell.seeds.finetune,
            );
            save_checkpoint(
                &self.store.resolve(&rel),
                &Checkpoint::from_model(&model, manifest, None),
            )?;
            up.checkpoints.push(rel);
        }
        log::info!("{}: accuracy {:.2} mIoU {:.2}", cell.key, report.accuracy, report.miou);
        Ok(RunRecord {
            key: cell.key,
            config_hash: cell.config_hash.clone(),
            plan_name: self.plan.name.clone(),
            runs_expected: self.plan.runs_per_cell,
            status: Status::Complete,
            failure: None,
            seeds: cell.seeds,
            metrics: Some(RecordMetrics::from(&report)),
            history: up.history,
            wall_clock_secs: up.wall_clock,
            checkpoints: up.checkpoints,
        })
    }
}

enum Outcome {
    Trained,
    Failed,
    Locked,
}

/// Runs every pending cell of `plan`, writing one record per cell.
///
/// A failing cell is stored with its error and the grid moves on. With
/// `resume`, cells whose complete record exists are skipped.
pub fn run_grid(plan: &ExperimentPlan, store: &Store, opts: GridOptions) -> Result<GridSummary> {
    plan.validate()?;
    let cells = plan_cells(plan);
    let mut summary = GridSummary::default();
    let mut pending = Vec::new();
    for cell in &cells {
        if opts.resume && store.is_complete(&cell.config_hash)? {
            summary.skipped += 1;
        } else {
            pending.push(cell);
        }
    }

    // Cells sharing a pre-trained backbone form one sequential group.
    let mut groups: BTreeMap<&str, Vec<&CellPlan>> = BTreeMap::new();
    for cell in pending {
        groups.entry(cell.pretrain_hash.as_str()).or_default().push(cell);
    }
    let mut groups: Vec<Vec<&CellPlan>> = groups.into_values().collect();
    groups.sort_by_key(|g| g[0].key);

    let ctx = Ctx {
        plan,
        store,
        pretrain_pool: Lazy::new(),
        intermediate_pool: Lazy::new(),
        finetune_pool: Lazy::new(),
        pretrain_runs: AtomicUsize::new(0),
        intermediate_runs: AtomicUsize::new(0),
    };
    let next = AtomicUsize::new(0);
    let outcomes = Mutex::new(Vec::new());
    let work = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        let Some(group) = groups.get(i) else { break };
        for cell in group {
            let outcome = execute(&ctx, cell);
            outcomes.lock().expect("outcome lock poisoned").push(outcome);
        }
    };
    let jobs = opts.jobs.clamp(1, groups.len().max(1));
    if jobs == 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(work);
            }
        });
    }

    for outcome in outcomes.into_inner().expect("outcome lock poisoned") {
        match outcome {
            Outcome::Trained => summary.trained += 1,
            Outcome::Failed => summary.failed += 1,
            Outcome::Locked => summary.locked += 1,
        }
    }
    summary.pretrain_runs = ctx.pretrain_runs.load(Ordering::Relaxed);
    summary.intermediate_runs = ctx.intermediate_runs.load(Ordering::Relaxed);
    for cell in &cells {
        if let Some(r) = store.read_record(&cell.config_hash)? {
            summary.records.push(r);
        }
    }
    Ok(summary)
}

fn execute(ctx: &Ctx<'_>, cell: &CellPlan) -> Outcome {
    let lock = match ctx.store.try_lock(&cell.config_hash) {
        Ok(Some(lock)) => lock,
        Ok(None) => {
            log::warn!("{}: locked by another runner, skipping", cell.key);
            return Outcome::Locked;
        }
        Err(e) => {
            log::error!("{}: {e}", cell.key);
            return Outcome::Failed;
        }
    };
    let (record, outcome) = match ctx.run_cell(cell) {
        Ok(r) => (r, Outcome::Trained),
        Err(e) => {
            log::error!("{}: failed: {e}", cell.key);
            let record = RunRecord {
                key: cell.key,
                config_hash: cell.config_hash.clone(),
                plan_name: ctx.plan.name.clone(),
                runs_expected: ctx.plan.runs_per_cell,
                status: Status::Failed,
                failure: Some(FailureInfo {
                    category: e.category().into(),
                    message: e.to_string(),
                }),
                seeds: cell.seeds,
                metrics: None,
                history: Vec::new(),
                wall_clock_secs: BTreeMap::new(),
                checkpoints: Vec::new(),
            };
            (record, Outcome::Failed)
        }
    };
    let outcome = match ctx.store.write_record(&record) {
        Ok(()) => outcome,
        Err(e) => {
            log::error!("{}: could not store record: {e}", cell.key);
            Outcome::Failed
        }
    };
    drop(lock);
    outcome
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_are_pure_and_distinct() {
        assert_eq!(derive_seed(1, "a", &[2, 3]), derive_seed(1, "a", &[2, 3]));
        assert_ne!(derive_seed(1, "a", &[2, 3]), derive_seed(1, "a", &[3, 2]));
        assert_ne!(derive_seed(1, "a", &[2]), derive_seed(1, "b", &[2]));
        assert_ne!(derive_seed(1, "a", &[2]), derive_seed(2, "a", &[2]));
    }
}
