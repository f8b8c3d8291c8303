//! Task objectives: masked patch reconstruction, scene classification and
//! tri-map segmentation.
//!
//! Each loss comes in two flavours: a plain value function, and a `*_grad`
//! variant returning the gradient with respect to the head output. Training
//! goes through the `*_grad` variants, so both share one implementation.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{patchify, unpatchify, ModelConfig, TOKEN_INIT_STD};
use crate::error::{Error, Result};
use crate::nn::{cast, log_sum_exp, normal_vec, softmax_in_place, Affine, Real};
use crate::params::{visit_affine, visit_affine_mut, ParamSet, Visitor};

/// Masking ratio used for pre-training.
pub const MASK_RATIO: f64 = 0.5;
/// Number of intermediate classification classes.
pub const NUM_SCENE_CLASSES: usize = 6;
/// Tri-map classes: foreground, background, unknown.
pub const NUM_TRIMAP_CLASSES: usize = 3;

pub const FOREGROUND: u8 = 0;
pub const BACKGROUND: u8 = 1;
pub const UNKNOWN: u8 = 2;

/// Per-image boolean patch mask; `true` means the patch is hidden.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPattern {
    mask: Vec<bool>,
    ratio: f64,
}

impl MaskPattern {
    pub fn from_bools(mask: Vec<bool>) -> Self {
        let ratio = if mask.is_empty() {
            0.0
        } else {
            mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64
        };
        Self { mask, ratio }
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.mask
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn masked_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i)
    }
}

/// Number of patches hidden for a given ratio: `round(ratio · num_patches)`.
pub fn masked_count(num_patches: usize, ratio: f64) -> usize {
    (ratio * num_patches as f64).round() as usize
}

/// Draws exactly `round(ratio · num_patches)` positions uniformly without
/// replacement.
pub fn sample_mask<R: Rng + ?Sized>(rng: &mut R, num_patches: usize, ratio: f64) -> Result<MaskPattern> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Mask(format!("ratio {ratio} outside [0, 1]")));
    }
    let k = masked_count(num_patches, ratio);
    let mut mask = vec![false; num_patches];
    for i in index::sample(rng, num_patches, k) {
        mask[i] = true;
    }
    Ok(MaskPattern { mask, ratio })
}

/// Per-pixel tri-map labels: 0 foreground, 1 background, 2 unknown.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trimap {
    labels: Array2<u8>,
}

impl Trimap {
    pub fn new(labels: Array2<u8>) -> Result<Self> {
        if let Some(bad) = labels.iter().find(|&&v| v as usize >= NUM_TRIMAP_CLASSES) {
            return Err(Error::Label(format!("tri-map value {bad} outside {{0,1,2}}")));
        }
        Ok(Self { labels })
    }

    pub fn labels(&self) -> &Array2<u8> {
        &self.labels
    }

    pub fn dim(&self) -> (usize, usize) {
        self.labels.dim()
    }

    /// Which of the three classes occur at least once.
    pub fn classes_present(&self) -> [bool; NUM_TRIMAP_CLASSES] {
        let mut present = [false; NUM_TRIMAP_CLASSES];
        self.labels.iter().for_each(|&v| present[v as usize] = true);
        present
    }
}

/// Linear pixel predictor for masked patches, plus the learned mask token
/// that replaces hidden patch embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconHead<T> {
    pub mask_token: Array1<T>,
    pub proj: Affine<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClsHead<T> {
    pub proj: Affine<T>,
}

/// Maps each patch row to `patch_size² · 3` logits.
#[derive(Clone, Debug, PartialEq)]
pub struct SegHead<T> {
    pub proj: Affine<T>,
}

impl<T: Real> ReconHead<T> {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        Self {
            mask_token: normal_vec(rng, cfg.dim, TOKEN_INIT_STD),
            proj: Affine::init(cfg.dim, cfg.patch_dim(), true, rng),
        }
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            mask_token: Array1::zeros(cfg.dim),
            proj: Affine::zeros(cfg.dim, cfg.patch_dim(), true),
        }
    }
}

impl<T: Real> ClsHead<T> {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, classes: usize, rng: &mut R) -> Self {
        Self {
            proj: Affine::init(cfg.dim, classes, true, rng),
        }
    }

    pub fn zeros(cfg: &ModelConfig, classes: usize) -> Self {
        Self {
            proj: Affine::zeros(cfg.dim, classes, true),
        }
    }

    pub fn classes(&self) -> usize {
        self.proj.fan_out()
    }
}

impl<T: Real> SegHead<T> {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        Self {
            proj: Affine::init(cfg.dim, seg_width(cfg), true, rng),
        }
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            proj: Affine::zeros(cfg.dim, seg_width(cfg), true),
        }
    }
}

fn seg_width(cfg: &ModelConfig) -> usize {
    cfg.patch_size * cfg.patch_size * NUM_TRIMAP_CLASSES
}

/// The task head attached on top of the backbone.
#[derive(Clone, Debug, PartialEq)]
pub enum Head<T> {
    Recon(ReconHead<T>),
    Classify(ClsHead<T>),
    Segment(SegHead<T>),
}

impl<T: Real> Head<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            Head::Recon(_) => "recon",
            Head::Classify(_) => "classify",
            Head::Segment(_) => "segment",
        }
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            Head::Recon(h) => Head::Recon(ReconHead {
                mask_token: Array1::zeros(h.mask_token.len()),
                proj: Affine::zeros(h.proj.fan_in(), h.proj.fan_out(), true),
            }),
            Head::Classify(h) => Head::Classify(ClsHead {
                proj: Affine::zeros(h.proj.fan_in(), h.proj.fan_out(), true),
            }),
            Head::Segment(h) => Head::Segment(SegHead {
                proj: Affine::zeros(h.proj.fan_in(), h.proj.fan_out(), true),
            }),
        }
    }
}

impl<T: Real> ParamSet<T> for Head<T> {
    fn visit(&self, f: &mut Visitor<'_, T>) {
        match self {
            Head::Recon(h) => {
                f(
                    "head.recon.mask_token",
                    h.mask_token.as_slice().expect("standard layout"),
                    h.mask_token.shape(),
                );
                visit_affine("head.recon.proj", &h.proj, f);
            }
            Head::Classify(h) => visit_affine("head.classify.proj", &h.proj, f),
            Head::Segment(h) => visit_affine("head.segment.proj", &h.proj, f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [T])) {
        match self {
            Head::Recon(h) => {
                f(
                    "head.recon.mask_token",
                    h.mask_token.as_slice_mut().expect("standard layout"),
                );
                visit_affine_mut("head.recon.proj", &mut h.proj, f);
            }
            Head::Classify(h) => visit_affine_mut("head.classify.proj", &mut h.proj, f),
            Head::Segment(h) => visit_affine_mut("head.segment.proj", &mut h.proj, f),
        }
    }
}

/// Mean absolute error over the pixels of masked patches only.
pub fn mim_loss<T: Real>(pred: &ArrayView2<T>, target: &ArrayView2<T>, mask: &MaskPattern) -> Result<T> {
    Ok(mim_loss_grad(pred, target, mask)?.0)
}

/// [`mim_loss`] and its gradient with respect to `pred`. Rows of unmasked
/// patches get an exactly-zero gradient.
pub fn mim_loss_grad<T: Real>(
    pred: &ArrayView2<T>,
    target: &ArrayView2<T>,
    mask: &MaskPattern,
) -> Result<(T, Array2<T>)> {
    if pred.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    if mask.len() != pred.nrows() {
        return Err(Error::Mask(format!(
            "mask length {} for {} patches",
            mask.len(),
            pred.nrows()
        )));
    }
    let k = mask.count();
    if k == 0 {
        return Err(Error::Mask("no masked patch; reconstruction loss is undefined".into()));
    }
    let norm = cast::<T>((k * pred.ncols()) as f64);
    let mut grad = Array2::zeros(pred.raw_dim());
    let mut total = T::zero();
    for i in mask.masked_indices() {
        for ((g, &p), &t) in grad.row_mut(i).iter_mut().zip(pred.row(i)).zip(target.row(i)) {
            let r = p - t;
            total += r.abs();
            *g = if r > T::zero() {
                T::one() / norm
            } else if r < T::zero() {
                -T::one() / norm
            } else {
                T::zero()
            };
        }
    }
    Ok((total / norm, grad))
}

/// Softmax cross-entropy of a logit vector against `label`; returns the loss
/// and `softmax − onehot`.
pub fn cross_entropy_grad<T: Real>(logits: &ArrayView1<T>, label: usize) -> Result<(T, Array1<T>)> {
    if label >= logits.len() {
        return Err(Error::Label(format!("label {label} outside 0..{}", logits.len())));
    }
    let mut row = logits.to_vec();
    let loss = log_sum_exp(&row) - logits[label];
    softmax_in_place(&mut row);
    row[label] -= T::one();
    Ok((loss, Array1::from(row)))
}

/// Cross-entropy of the class-token row of one image's features.
pub fn classify_loss<T: Real>(features: &ArrayView2<T>, head: &ClsHead<T>, label: usize) -> Result<T> {
    let logits = head.proj.forward(&features.slice(s![0..1, ..]));
    Ok(cross_entropy_grad(&logits.row(0), label)?.0)
}

/// Per-pixel logits `(3, H, W)` (class-major) for one image's features. The
/// class-token row is skipped; each patch row's head output is laid out
/// exactly like [`patchify`] lays out pixels, with the class index taking
/// the place of the channel.
pub fn segment_logits<T: Real>(features: &ArrayView2<T>, head: &SegHead<T>, cfg: &ModelConfig) -> Result<Array3<T>> {
    if features.nrows() != cfg.tokens() {
        return Err(Error::Shape(format!(
            "{} feature rows, expected {}",
            features.nrows(),
            cfg.tokens()
        )));
    }
    let per_patch = head.proj.forward(&features.slice(s![1.., ..]));
    unpatchify(&per_patch.view(), cfg.patch_size, NUM_TRIMAP_CLASSES, cfg.image_size)
}

/// Maps a `(3, H, W)` logit gradient back to per-patch rows (inverse of the
/// assembly in [`segment_logits`]).
pub fn disassemble_logits<T: Real>(logits: &ArrayView3<T>, patch_size: usize) -> Result<Array2<T>> {
    patchify(logits, patch_size)
}

/// Mean per-pixel softmax cross-entropy over all pixels and all three classes.
pub fn segment_loss<T: Real>(logits: &ArrayView3<T>, truth: &Trimap) -> Result<T> {
    Ok(segment_loss_grad(logits, truth)?.0)
}

pub fn segment_loss_grad<T: Real>(logits: &ArrayView3<T>, truth: &Trimap) -> Result<(T, Array3<T>)> {
    let (c, h, w) = logits.dim();
    if c != NUM_TRIMAP_CLASSES || (h, w) != truth.dim() {
        return Err(Error::Shape(format!(
            "logits {:?} vs tri-map {:?}",
            logits.dim(),
            truth.dim()
        )));
    }
    let norm = cast::<T>((h * w) as f64);
    let mut grad = Array3::zeros(logits.raw_dim());
    let mut total = T::zero();
    let mut buf = [T::zero(); NUM_TRIMAP_CLASSES];
    for y in 0..h {
        for x in 0..w {
            for (k, b) in buf.iter_mut().enumerate() {
                *b = logits[[k, y, x]];
            }
            let label = truth.labels[[y, x]] as usize;
            total += log_sum_exp(&buf) - buf[label];
            softmax_in_place(&mut buf);
            buf[label] -= T::one();
            for (k, &b) in buf.iter().enumerate() {
                grad[[k, y, x]] = b / norm;
            }
        }
    }
    Ok((total / norm, grad))
}

/// Per-pixel argmax; ties go to the lowest class index.
pub fn predict_trimap<T: Real>(logits: &ArrayView3<T>) -> Trimap {
    let (c, h, w) = logits.dim();
    let labels = Array2::from_shape_fn((h, w), |(y, x)| {
        let mut best = 0;
        for k in 1..c {
            if logits[[k, y, x]] > logits[[best, y, x]] {
                best = k;
            }
        }
        best as u8
    });
    Trimap { labels }
}
