//! Per-phase training loop and segmentation evaluation.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{stack_images, Label, Sample};
use crate::error::{Error, Result};
use crate::metrics::{accumulate, miou_with, AccuracyMode, ConfusionCounts, MetricsReport};
use crate::model::{Model, Targets};
use crate::objectives::{sample_mask, Head, MaskPattern, Trimap};
use crate::optim::{optimizer_step, OptimState, Phase, PhaseConfig};

/// One row of a phase's loss history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    pub mean_loss: f64,
}

fn expected_head(phase: Phase) -> &'static str {
    match phase {
        Phase::Pretrain => "recon",
        Phase::Intermediate => "classify",
        Phase::Finetune => "segment",
    }
}

fn check_labels(dataset: &[Sample], head: &Head<f32>) -> Result<()> {
    for (i, s) in dataset.iter().enumerate() {
        let ok = match head {
            Head::Recon(_) => true,
            Head::Classify(h) => matches!(s.label, Label::Class(c) if c < h.classes()),
            Head::Segment(_) => matches!(s.label, Label::Trimap(_)),
        };
        if !ok {
            return Err(Error::Label(format!(
                "sample {i} has label {:?}, unusable for a {} head",
                s.label,
                head.kind()
            )));
        }
    }
    Ok(())
}

/// Trains backbone and head jointly for `phase.epochs` epochs of shuffled
/// minibatches. Masks are drawn fresh for every image in every epoch. All
/// randomness comes from `rng`, so equal seeds give equal histories.
pub fn train_phase<R: Rng + ?Sized>(
    model: &mut Model<f32>,
    dataset: &[Sample],
    phase: &PhaseConfig,
    rng: &mut R,
) -> Result<Vec<EpochRecord>> {
    phase.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data(format!("empty dataset for the {} phase", phase.phase)));
    }
    if model.head.kind() != expected_head(phase.phase) {
        return Err(Error::Config(format!(
            "{} phase needs a {} head, model has {}",
            phase.phase,
            expected_head(phase.phase),
            model.head.kind()
        )));
    }
    check_labels(dataset, &model.head)?;

    let np = model.config().num_patches();
    let mut state = OptimState::new(model);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(phase.epochs);

    for epoch in 0..phase.epochs {
        let lr = phase.lr_at(epoch);
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(phase.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &dataset[i]).collect();
            let images = stack_images(batch.iter().copied());
            let (loss, grad) = match &model.head {
                Head::Recon(_) => {
                    let masks = (0..batch.len())
                        .map(|_| sample_mask(rng, np, phase.mask_ratio))
                        .collect::<Result<Vec<MaskPattern>>>()?;
                    model.loss_and_grad(&images.view(), Targets::Reconstruct(&masks))?
                }
                Head::Classify(_) => {
                    let labels: Vec<usize> = batch
                        .iter()
                        .map(|s| match s.label {
                            Label::Class(c) => c,
                            _ => unreachable!("labels checked"),
                        })
                        .collect();
                    model.loss_and_grad(&images.view(), Targets::Classify(&labels))?
                }
                Head::Segment(_) => {
                    let truths: Vec<Trimap> = batch
                        .iter()
                        .map(|s| match &s.label {
                            Label::Trimap(t) => t.clone(),
                            _ => unreachable!("labels checked"),
                        })
                        .collect();
                    model.loss_and_grad(&images.view(), Targets::Segment(&truths))?
                }
            };
            optimizer_step(model, &grad, &mut state, &phase.optim, lr)?;
            loss_sum += loss as f64 * batch.len() as f64;
        }
        let mean_loss = loss_sum / dataset.len() as f64;
        log::info!("{} epoch {epoch}: lr {lr:.3e} loss {mean_loss:.5}", phase.phase);
        history.push(EpochRecord {
            epoch,
            phase: phase.phase,
            lr,
            mean_loss,
        });
    }
    Ok(history)
}

/// Pixel accuracy and mIoU of a segmentation model over `test`.
pub fn evaluate(model: &Model<f32>, test: &[Sample], batch_size: usize, mode: AccuracyMode) -> Result<MetricsReport> {
    let mut counts = ConfusionCounts::default();
    for chunk in test.chunks(batch_size.max(1)) {
        let images = stack_images(chunk);
        let preds = model.predict_trimaps(&images.view())?;
        for (pred, sample) in preds.iter().zip(chunk) {
            let Label::Trimap(truth) = &sample.label else {
                return Err(Error::Label("evaluation sample without tri-map".into()));
            };
            accumulate(pred, truth, &mut counts)?;
        }
    }
    miou_with(&counts, mode)
}
