//! Uniform access to named parameter tensors.
//!
//! Canonical paths look like `blocks.3.qkv.weight`; the same traversal order
//! is used by the optimizer, checkpoints and gradient checks.

use crate::nn::{Affine, LayerNorm, Real};

/// Callback receiving `(path, values, shape)`.
pub type Visitor<'a, T> = dyn FnMut(&str, &[T], &[usize]) + 'a;

pub trait ParamSet<T> {
    /// Visits every tensor as `(path, values, shape)` in canonical order.
    fn visit(&self, f: &mut Visitor<'_, T>);

    /// Mutable traversal in the same order as [`ParamSet::visit`].
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [T]));

    fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, v, _| n += v.len());
        n
    }

    fn paths(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |p, _, _| out.push(p.to_string()));
        out
    }

    /// First path holding a NaN or infinity, if any.
    fn first_non_finite(&self) -> Option<String>
    where
        T: Real,
    {
        let mut found = None;
        self.visit(&mut |p, v, _| {
            if found.is_none() && v.iter().any(|x| !x.is_finite()) {
                found = Some(p.to_string());
            }
        });
        found
    }
}

pub(crate) fn visit_affine<T: Real>(prefix: &str, layer: &Affine<T>, f: &mut Visitor<'_, T>) {
    f(
        &format!("{prefix}.weight"),
        contiguous(layer.weight.as_slice()),
        layer.weight.shape(),
    );
    if let Some(b) = &layer.bias {
        f(&format!("{prefix}.bias"), contiguous(b.as_slice()), b.shape());
    }
}

pub(crate) fn visit_affine_mut<T: Real>(prefix: &str, layer: &mut Affine<T>, f: &mut dyn FnMut(&str, &mut [T])) {
    f(&format!("{prefix}.weight"), contiguous_mut(layer.weight.as_slice_mut()));
    if let Some(b) = &mut layer.bias {
        f(&format!("{prefix}.bias"), contiguous_mut(b.as_slice_mut()));
    }
}

pub(crate) fn visit_norm<T: Real>(prefix: &str, layer: &LayerNorm<T>, f: &mut Visitor<'_, T>) {
    f(
        &format!("{prefix}.scale"),
        contiguous(layer.scale.as_slice()),
        layer.scale.shape(),
    );
    f(
        &format!("{prefix}.shift"),
        contiguous(layer.shift.as_slice()),
        layer.shift.shape(),
    );
}

pub(crate) fn visit_norm_mut<T: Real>(prefix: &str, layer: &mut LayerNorm<T>, f: &mut dyn FnMut(&str, &mut [T])) {
    f(&format!("{prefix}.scale"), contiguous_mut(layer.scale.as_slice_mut()));
    f(&format!("{prefix}.shift"), contiguous_mut(layer.shift.as_slice_mut()));
}

pub(crate) fn contiguous<T>(s: Option<&[T]>) -> &[T] {
    s.expect("parameter tensors are kept in standard layout")
}

pub(crate) fn contiguous_mut<T>(s: Option<&mut [T]>) -> &mut [T] {
    s.expect("parameter tensors are kept in standard layout")
}
