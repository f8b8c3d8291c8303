//! Backbone + head composition and the differentiation entry point.

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView4, Axis};

use crate::backbone::{patchify_batch, unpatchify, BackboneParams, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{cast, Real};
use crate::objectives::{
    cross_entropy_grad, disassemble_logits, mim_loss_grad, predict_trimap, segment_loss_grad, Head, MaskPattern,
    Trimap, NUM_TRIMAP_CLASSES,
};
use crate::params::{ParamSet, Visitor};

/// Per-image supervision for one minibatch.
#[derive(Clone, Copy, Debug)]
pub enum Targets<'a> {
    Reconstruct(&'a [MaskPattern]),
    Classify(&'a [usize]),
    Segment(&'a [Trimap]),
}

impl Targets<'_> {
    fn len(&self) -> usize {
        match self {
            Targets::Reconstruct(m) => m.len(),
            Targets::Classify(l) => l.len(),
            Targets::Segment(t) => t.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub backbone: BackboneParams<T>,
    pub head: Head<T>,
}

impl<T: Real> ParamSet<T> for Model<T> {
    fn visit(&self, f: &mut Visitor<'_, T>) {
        self.backbone.visit(f);
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [T])) {
        self.backbone.visit_mut(f);
        self.head.visit_mut(f);
    }
}

impl<T: Real> Model<T> {
    pub fn new(backbone: BackboneParams<T>, head: Head<T>) -> Self {
        Self { backbone, head }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.backbone.config
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            backbone: self.backbone.zeros_like(),
            head: self.head.zeros_like(),
        }
    }

    /// Mean loss over the batch.
    pub fn loss(&self, images: &ArrayView4<T>, targets: Targets<'_>) -> Result<T> {
        Ok(self.run(images, targets, false)?.0)
    }

    /// Mean loss over the batch and its gradient with respect to every
    /// parameter of the backbone and the head.
    pub fn loss_and_grad(&self, images: &ArrayView4<T>, targets: Targets<'_>) -> Result<(T, Model<T>)> {
        let (loss, grad) = self.run(images, targets, true)?;
        let grad = grad.expect("requested");
        if let Some(path) = grad.first_non_finite() {
            return Err(Error::NonFinite(format!("gradient of {path}")));
        }
        Ok((loss, grad))
    }

    /// Predicted tri-maps for a batch (segmentation head only).
    pub fn predict_trimaps(&self, images: &ArrayView4<T>) -> Result<Vec<Trimap>> {
        let Head::Segment(head) = &self.head else {
            return Err(Error::Config(format!(
                "cannot segment with a {} head",
                self.head.kind()
            )));
        };
        let cfg = *self.config();
        let features = self.backbone.encode(images)?;
        let rows = patch_rows(&features, &cfg);
        let per_patch = head.proj.forward(&rows.view());
        let np = cfg.num_patches();
        (0..features.len_of(Axis(0)))
            .map(|b| {
                let logits = unpatchify(
                    &per_patch.slice(s![b * np..(b + 1) * np, ..]),
                    cfg.patch_size,
                    NUM_TRIMAP_CLASSES,
                    cfg.image_size,
                )?;
                Ok(predict_trimap(&logits.view()))
            })
            .collect()
    }

    fn run(&self, images: &ArrayView4<T>, targets: Targets<'_>, want_grad: bool) -> Result<(T, Option<Model<T>>)> {
        let batch = images.len_of(Axis(0));
        if batch == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        if targets.len() != batch {
            return Err(Error::Shape(format!("{} targets for {batch} images", targets.len())));
        }
        let cfg = *self.config();
        let (np, tokens, d) = (cfg.num_patches(), cfg.tokens(), cfg.dim);
        let inv_batch = T::one() / cast::<T>(batch as f64);

        let masking = match (&self.head, targets) {
            (Head::Recon(h), Targets::Reconstruct(masks)) => Some((masks, &h.mask_token)),
            (Head::Classify(_), Targets::Classify(_)) | (Head::Segment(_), Targets::Segment(_)) => None,
            (head, _) => {
                return Err(Error::Config(format!("targets do not match the {} head", head.kind())));
            }
        };
        let (features, cache) = self.backbone.forward(images, masking)?;
        let mut d_features = Array3::<T>::zeros((batch, tokens, d));
        let mut grad_head = self.head.zeros_like();
        let mut total = T::zero();

        match (&self.head, targets) {
            (Head::Recon(head), Targets::Reconstruct(masks)) => {
                let rows = patch_rows(&features, &cfg);
                let pred = head.proj.forward(&rows.view());
                let target = patchify_batch(images, &cfg)?;
                let mut d_pred = Array2::zeros(pred.raw_dim());
                for (b, mask) in masks.iter().enumerate() {
                    let r = b * np..(b + 1) * np;
                    let (l, g) = mim_loss_grad(&pred.slice(s![r.clone(), ..]), &target.slice(s![r.clone(), ..]), mask)?;
                    total += l;
                    d_pred.slice_mut(s![r, ..]).assign(&(g * inv_batch));
                }
                if want_grad {
                    let Head::Recon(gh) = &mut grad_head else {
                        unreachable!()
                    };
                    let d_rows = head.proj.backward(&rows.view(), &d_pred.view(), &mut gh.proj);
                    scatter_patch_rows(&mut d_features, &d_rows.view(), np);
                }
            }
            (Head::Classify(head), Targets::Classify(labels)) => {
                let cls_rows = features.slice(s![.., 0, ..]).to_owned();
                let logits = head.proj.forward(&cls_rows.view());
                let mut d_logits = Array2::zeros(logits.raw_dim());
                for (b, &label) in labels.iter().enumerate() {
                    let (l, g) = cross_entropy_grad(&logits.row(b), label)?;
                    total += l;
                    d_logits.row_mut(b).assign(&(g * inv_batch));
                }
                if want_grad {
                    let Head::Classify(gh) = &mut grad_head else {
                        unreachable!()
                    };
                    let d_cls = head.proj.backward(&cls_rows.view(), &d_logits.view(), &mut gh.proj);
                    d_features.slice_mut(s![.., 0, ..]).assign(&d_cls);
                }
            }
            (Head::Segment(head), Targets::Segment(truths)) => {
                let rows = patch_rows(&features, &cfg);
                let per_patch = head.proj.forward(&rows.view());
                let mut d_per_patch = Array2::zeros(per_patch.raw_dim());
                for (b, truth) in truths.iter().enumerate() {
                    let r = b * np..(b + 1) * np;
                    let logits = unpatchify(
                        &per_patch.slice(s![r.clone(), ..]),
                        cfg.patch_size,
                        NUM_TRIMAP_CLASSES,
                        cfg.image_size,
                    )?;
                    let (l, g) = segment_loss_grad(&logits.view(), truth)?;
                    total += l;
                    let g_rows = disassemble_logits(&g.view(), cfg.patch_size)?;
                    d_per_patch.slice_mut(s![r, ..]).assign(&(g_rows * inv_batch));
                }
                if want_grad {
                    let Head::Segment(gh) = &mut grad_head else {
                        unreachable!()
                    };
                    let d_rows = head.proj.backward(&rows.view(), &d_per_patch.view(), &mut gh.proj);
                    scatter_patch_rows(&mut d_features, &d_rows.view(), np);
                }
            }
            _ => unreachable!("head/target pairing checked above"),
        }

        let loss = total * inv_batch;
        if !loss.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        if !want_grad {
            return Ok((loss, None));
        }
        let mut grad_backbone = self.backbone.zeros_like();
        let d_mask_token = self.backbone.backward(&cache, &d_features.view(), &mut grad_backbone);
        if let Head::Recon(gh) = &mut grad_head {
            gh.mask_token += &d_mask_token;
        }
        Ok((
            loss,
            Some(Model {
                backbone: grad_backbone,
                head: grad_head,
            }),
        ))
    }
}

/// Per-parameter gradient of the batch loss. Fails on any non-finite entry,
/// naming the offending parameter path.
pub fn gradient<T: Real>(model: &Model<T>, images: &ArrayView4<T>, targets: Targets<'_>) -> Result<Model<T>> {
    Ok(model.loss_and_grad(images, targets)?.1)
}

/// Patch rows of every image stacked as `(B·P, dim)`.
fn patch_rows<T: Real>(features: &Array3<T>, cfg: &ModelConfig) -> Array2<T> {
    let (b, _, d) = features.dim();
    features
        .slice(s![.., 1.., ..])
        .to_owned()
        .into_shape_with_order((b * cfg.num_patches(), d))
        .expect("patch rows are contiguous after to_owned")
}

fn scatter_patch_rows<T: Real>(d_features: &mut Array3<T>, d_rows: &ArrayView2<T>, np: usize) {
    for (b, mut img) in d_features.outer_iter_mut().enumerate() {
        img.slice_mut(s![1.., ..])
            .assign(&d_rows.slice(s![b * np..(b + 1) * np, ..]));
    }
}
