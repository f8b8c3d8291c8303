//! Layer primitives with explicit forward/backward passes.
//!
//! Every layer works on row-major token matrices `(rows, width)`. Backward
//! passes accumulate parameter gradients into a gradient value of the same
//! type as the layer (`+=`), and return the gradient with respect to the
//! layer input.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, NdFloat, Zip};
use num_traits::FromPrimitive;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Floating point type the model can run in (`f32` for training, `f64` for
/// gradient checks).
pub trait Real: NdFloat + FromPrimitive {}

impl Real for f32 {}
impl Real for f64 {}

#[inline]
pub fn cast<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("f64 is representable")
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Affine map `y = x W + b` with `W` stored as `(in, out)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine<T> {
    pub weight: Array2<T>,
    pub bias: Option<Array1<T>>,
}

impl<T: Real> Affine<T> {
    pub fn zeros(fan_in: usize, fan_out: usize, with_bias: bool) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: with_bias.then(|| Array1::zeros(fan_out)),
        }
    }

    /// Truncated (±2σ) zero-mean normal weights with variance `1 / fan_in`,
    /// zero bias.
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, with_bias: bool, rng: &mut R) -> Self {
        let mut layer = Self::zeros(fan_in, fan_out, with_bias);
        let std = 1.0 / (fan_in as f64).sqrt();
        layer
            .weight
            .iter_mut()
            .for_each(|w| *w = cast(truncated_normal(rng, std)));
        layer
    }

    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, |b| b.len())
    }

    pub fn forward(&self, x: &ArrayView2<T>) -> Array2<T> {
        let mut y = x.dot(&self.weight);
        if let Some(b) = &self.bias {
            y += b;
        }
        y
    }

    /// Accumulates `dW += xᵀ dy`, `db += Σ dy` into `grad` and returns `dy Wᵀ`.
    pub fn backward(&self, x: &ArrayView2<T>, dy: &ArrayView2<T>, grad: &mut Affine<T>) -> Array2<T> {
        self.accumulate_grad(x, dy, grad);
        dy.dot(&self.weight.t())
    }

    /// Parameter gradient only, for layers whose input needs no gradient.
    pub fn accumulate_grad(&self, x: &ArrayView2<T>, dy: &ArrayView2<T>, grad: &mut Affine<T>) {
        general_mat_mul(T::one(), &x.t(), dy, T::one(), &mut grad.weight);
        if let Some(gb) = grad.bias.as_mut() {
            *gb += &dy.sum_axis(Axis(0));
        }
    }
}

pub(crate) fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    let normal = Normal::new(0.0, std).expect("std is finite and positive");
    loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            return v;
        }
    }
}

pub(crate) fn normal_vec<T: Real, R: Rng + ?Sized>(rng: &mut R, len: usize, std: f64) -> Array1<T> {
    let normal = Normal::new(0.0, std).expect("std is finite and positive");
    Array1::from_iter((0..len).map(|_| cast(normal.sample(rng))))
}

/// Per-row normalization with learned scale and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<T> {
    pub scale: Array1<T>,
    pub shift: Array1<T>,
}

pub struct LayerNormCache<T> {
    xhat: Array2<T>,
    inv_std: Array1<T>,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(width: usize) -> Self {
        Self {
            scale: Array1::ones(width),
            shift: Array1::zeros(width),
        }
    }

    pub fn zeros(width: usize) -> Self {
        Self {
            scale: Array1::zeros(width),
            shift: Array1::zeros(width),
        }
    }

    pub fn num_params(&self) -> usize {
        self.scale.len() + self.shift.len()
    }

    pub fn forward(&self, x: &ArrayView2<T>) -> (Array2<T>, LayerNormCache<T>) {
        let width = cast::<T>(x.ncols() as f64);
        let eps = cast::<T>(LAYER_NORM_EPS);
        let mut xhat = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, is) in xhat.outer_iter_mut().zip(inv_std.iter_mut()) {
            let mean = row.sum() / width;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().fold(T::zero(), |acc, &v| acc + v * v) / width;
            let r = T::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| v * r);
            *is = r;
        }
        let y = &xhat * &self.scale + &self.shift;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache<T>, dy: &ArrayView2<T>, grad: &mut LayerNorm<T>) -> Array2<T> {
        grad.scale += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.shift += &dy.sum_axis(Axis(0));
        let width = cast::<T>(dy.ncols() as f64);
        let mut dx = dy * &self.scale;
        for ((mut row, xhat), &r) in dx
            .outer_iter_mut()
            .zip(cache.xhat.outer_iter())
            .zip(cache.inv_std.iter())
        {
            let mean_d = row.sum() / width;
            let mean_dx = row.iter().zip(xhat.iter()).fold(T::zero(), |a, (&d, &h)| a + d * h) / width;
            Zip::from(&mut row)
                .and(&xhat)
                .for_each(|d, &h| *d = r * (*d - mean_d - h * mean_dx));
        }
        dx
    }

    /// Parameter gradient only (input gradient not needed).
    pub fn accumulate_grad(&self, cache: &LayerNormCache<T>, dy: &ArrayView2<T>, grad: &mut LayerNorm<T>) {
        grad.scale += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.shift += &dy.sum_axis(Axis(0));
    }
}

// tanh approximation of the Gaussian error linear unit
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

pub fn gelu<T: Real>(u: T) -> T {
    let k = cast::<T>(GELU_K);
    let c = cast::<T>(GELU_C);
    let half = cast::<T>(0.5);
    half * u * (T::one() + (k * (u + c * u * u * u)).tanh())
}

pub fn gelu_grad<T: Real>(u: T) -> T {
    let k = cast::<T>(GELU_K);
    let c = cast::<T>(GELU_C);
    let half = cast::<T>(0.5);
    let three = cast::<T>(3.0);
    let t = (k * (u + c * u * u * u)).tanh();
    half * (T::one() + t) + half * u * (T::one() - t * t) * k * (T::one() + three * c * u * u)
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `ln Σ exp(row)` computed stably.
pub fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let sum = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp());
    max + sum.ln()
}

/// Shape of the fused multi-head attention input.
#[derive(Clone, Copy, Debug)]
pub struct AttentionShape {
    pub batch: usize,
    pub tokens: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttentionShape {
    fn inner(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Scaled dot-product attention over a fused `(batch·tokens, 3·heads·head_dim)`
/// projection laid out as `[q | k | v]`, each block split into heads.
/// Returns the concatenated head outputs and the attention probabilities
/// (one `tokens × tokens` matrix per image and head).
pub fn attention_forward<T: Real>(qkv: &ArrayView2<T>, shape: AttentionShape) -> (Array2<T>, Vec<Array2<T>>) {
    let AttentionShape {
        batch,
        tokens,
        heads,
        head_dim,
    } = shape;
    let inner = shape.inner();
    let scale = cast::<T>(1.0 / (head_dim as f64).sqrt());
    let mut out = Array2::zeros((batch * tokens, inner));
    let mut probs = Vec::with_capacity(batch * heads);
    for b in 0..batch {
        let rows = b * tokens..(b + 1) * tokens;
        for h in 0..heads {
            let c = h * head_dim;
            let q = qkv.slice(s![rows.clone(), c..c + head_dim]);
            let k = qkv.slice(s![rows.clone(), inner + c..inner + c + head_dim]);
            let v = qkv.slice(s![rows.clone(), 2 * inner + c..2 * inner + c + head_dim]);
            let mut p = q.dot(&k.t());
            p *= scale;
            for mut row in p.outer_iter_mut() {
                softmax_in_place(row.as_slice_mut().expect("owned rows are contiguous"));
            }
            out.slice_mut(s![rows.clone(), c..c + head_dim]).assign(&p.dot(&v));
            probs.push(p);
        }
    }
    (out, probs)
}

pub fn attention_backward<T: Real>(
    qkv: &ArrayView2<T>,
    probs: &[Array2<T>],
    dout: &ArrayView2<T>,
    shape: AttentionShape,
) -> Array2<T> {
    let AttentionShape {
        batch,
        tokens,
        heads,
        head_dim,
    } = shape;
    let inner = shape.inner();
    let scale = cast::<T>(1.0 / (head_dim as f64).sqrt());
    let mut dqkv = Array2::zeros(qkv.raw_dim());
    for b in 0..batch {
        let rows = b * tokens..(b + 1) * tokens;
        for h in 0..heads {
            let c = h * head_dim;
            let p = &probs[b * heads + h];
            let q = qkv.slice(s![rows.clone(), c..c + head_dim]);
            let k = qkv.slice(s![rows.clone(), inner + c..inner + c + head_dim]);
            let v = qkv.slice(s![rows.clone(), 2 * inner + c..2 * inner + c + head_dim]);
            let d_o = dout.slice(s![rows.clone(), c..c + head_dim]);

            let dv = p.t().dot(&d_o);
            let mut ds = d_o.dot(&v.t());
            for (mut ds_row, p_row) in ds.outer_iter_mut().zip(p.outer_iter()) {
                let dot = ds_row
                    .iter()
                    .zip(p_row.iter())
                    .fold(T::zero(), |a, (&d, &pp)| a + d * pp);
                Zip::from(&mut ds_row)
                    .and(&p_row)
                    .for_each(|d, &pp| *d = pp * (*d - dot) * scale);
            }
            let dq = ds.dot(&k);
            let dk = ds.t().dot(&q);
            dqkv.slice_mut(s![rows.clone(), c..c + head_dim]).assign(&dq);
            dqkv.slice_mut(s![rows.clone(), inner + c..inner + c + head_dim])
                .assign(&dk);
            dqkv.slice_mut(s![rows.clone(), 2 * inner + c..2 * inner + c + head_dim])
                .assign(&dv);
        }
    }
    dqkv
}
