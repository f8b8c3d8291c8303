//! The tiny vision transformer backbone.
//!
//! Layout of one forward pass over a batch of `B` images:
//!
//! ```text
//! patches (B·P, C·p²) ─ norm ─ affine ─ norm ─┐
//!                            (mask token swap) │
//! tokens  (B·(P+1), dim) = [cls; patches] + pos
//! block × depth:  x += out(attn(qkv(norm(x))))
//!                 x += mlp_out(gelu(mlp_in(norm(x))))
//! features = norm(x)
//! ```
//!
//! Parameter count per component (`d` = dim, `pd` = patch_dim, `i` = heads·head_dim):
//!
//! | component        | scalars                                   |
//! |------------------|-------------------------------------------|
//! | patch embedding  | `2·pd + pd·d + d + 2·d`                   |
//! | positions        | `(P+1)·d`                                 |
//! | class token      | `d`                                       |
//! | one block        | `2d + 3·d·i + (i·d + d) + 2d + (d·m + m) + (m·d + d)` |
//! | final norm       | `2·d`                                     |

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, ArrayView4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    attention_backward, attention_forward, gelu, gelu_grad, normal_vec, Affine, AttentionShape, LayerNorm,
    LayerNormCache, Real,
};
use crate::objectives::MaskPattern;
use crate::params::{visit_affine, visit_affine_mut, visit_norm, visit_norm_mut, ParamSet, Visitor};

/// Standard deviation of the class, position and mask token initializers.
pub const TOKEN_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub mlp_dim: usize,
    pub channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            patch_size: 16,
            dim: 128,
            depth: 12,
            heads: 8,
            head_dim: 64,
            mlp_dim: 512,
            channels: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("dim", self.dim),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("mlp_dim", self.mlp_dim),
            ("channels", self.channels),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn inner_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn attention_shape(&self, batch: usize) -> AttentionShape {
        AttentionShape {
            batch,
            tokens: self.tokens(),
            heads: self.heads,
            head_dim: self.head_dim,
        }
    }

    /// Closed-form learnable scalar count of one encoder block.
    pub fn block_param_count(&self) -> usize {
        let (d, i, m) = (self.dim, self.inner_dim(), self.mlp_dim);
        let attn_norm = 2 * d;
        let qkv = d * 3 * i;
        let out = i * d + d;
        let mlp_norm = 2 * d;
        let mlp_in = d * m + m;
        let mlp_out = m * d + d;
        attn_norm + qkv + out + mlp_norm + mlp_in + mlp_out
    }

    /// Closed-form learnable scalar count of the patch embedding.
    pub fn patch_embed_param_count(&self) -> usize {
        let (d, pd) = (self.dim, self.patch_dim());
        2 * pd + (pd * d + d) + 2 * d
    }

    /// Closed-form learnable scalar count of the backbone (no head, no mask token).
    pub fn analytic_param_count(&self) -> usize {
        let d = self.dim;
        self.patch_embed_param_count() + self.tokens() * d + d + self.depth * self.block_param_count() + 2 * d
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub attn_norm: LayerNorm<T>,
    pub qkv: Affine<T>,
    pub out_proj: Affine<T>,
    pub mlp_norm: LayerNorm<T>,
    pub mlp_in: Affine<T>,
    pub mlp_out: Affine<T>,
}

impl<T: Real> Block<T> {
    fn zeros(cfg: &ModelConfig) -> Self {
        let (d, i, m) = (cfg.dim, cfg.inner_dim(), cfg.mlp_dim);
        Self {
            attn_norm: LayerNorm::zeros(d),
            qkv: Affine::zeros(d, 3 * i, false),
            out_proj: Affine::zeros(i, d, true),
            mlp_norm: LayerNorm::zeros(d),
            mlp_in: Affine::zeros(d, m, true),
            mlp_out: Affine::zeros(m, d, true),
        }
    }

    fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let (d, i, m) = (cfg.dim, cfg.inner_dim(), cfg.mlp_dim);
        Self {
            attn_norm: LayerNorm::new(d),
            qkv: Affine::init(d, 3 * i, false, rng),
            out_proj: Affine::init(i, d, true, rng),
            mlp_norm: LayerNorm::new(d),
            mlp_in: Affine::init(d, m, true, rng),
            mlp_out: Affine::init(m, d, true, rng),
        }
    }
}

/// Every learnable tensor of the backbone. Gradients use the same type.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams<T> {
    pub config: ModelConfig,
    pub patch_norm_in: LayerNorm<T>,
    pub patch_proj: Affine<T>,
    pub patch_norm_out: LayerNorm<T>,
    pub pos_embed: Array2<T>,
    pub cls_token: Array1<T>,
    pub blocks: Vec<Block<T>>,
    pub final_norm: LayerNorm<T>,
}

/// Encoder output, shape `(batch, num_patches + 1, dim)`. Row 0 of each
/// image is the class token; rows `1..` are patches in row-major order.
pub type TokenFeatures<T> = Array3<T>;

impl<T: Real> BackboneParams<T> {
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d, pd) = (config.dim, config.patch_dim());
        let patch_norm_in = LayerNorm::new(pd);
        let patch_proj = Affine::init(pd, d, true, rng);
        let patch_norm_out = LayerNorm::new(d);
        let pos_embed = normal_vec(rng, config.tokens() * d, TOKEN_INIT_STD)
            .into_shape_with_order((config.tokens(), d))
            .expect("length matches");
        let cls_token = normal_vec(rng, d, TOKEN_INIT_STD);
        let blocks = (0..config.depth).map(|_| Block::init(&config, rng)).collect();
        Ok(Self {
            config,
            patch_norm_in,
            patch_proj,
            patch_norm_out,
            pos_embed,
            cls_token,
            blocks,
            final_norm: LayerNorm::new(d),
        })
    }

    /// All-zero tensors with the shapes of `config` (gradient accumulator).
    pub fn zeros(config: ModelConfig) -> Self {
        let (d, pd) = (config.dim, config.patch_dim());
        Self {
            config,
            patch_norm_in: LayerNorm::zeros(pd),
            patch_proj: Affine::zeros(pd, d, true),
            patch_norm_out: LayerNorm::zeros(d),
            pos_embed: Array2::zeros((config.tokens(), d)),
            cls_token: Array1::zeros(d),
            blocks: (0..config.depth).map(|_| Block::zeros(&config)).collect(),
            final_norm: LayerNorm::zeros(d),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config)
    }

    /// Features for a batch `(B, C, H, W)` of images.
    pub fn encode(&self, images: &ArrayView4<T>) -> Result<TokenFeatures<T>> {
        Ok(self.forward(images, None)?.0)
    }

    /// Like [`BackboneParams::encode`], but embedded patches selected by each
    /// image's mask are replaced by `mask_token` before positions are added.
    pub fn encode_masked(
        &self,
        images: &ArrayView4<T>,
        masks: &[MaskPattern],
        mask_token: &Array1<T>,
    ) -> Result<TokenFeatures<T>> {
        Ok(self.forward(images, Some((masks, mask_token)))?.0)
    }

    pub(crate) fn forward(
        &self,
        images: &ArrayView4<T>,
        masking: Option<(&[MaskPattern], &Array1<T>)>,
    ) -> Result<(TokenFeatures<T>, EncodeCache<T>)> {
        let cfg = &self.config;
        let batch = images.len_of(Axis(0));
        let (np, tokens, d) = (cfg.num_patches(), cfg.tokens(), cfg.dim);
        let patches = patchify_batch(images, cfg)?;

        let (h0, ln_in) = self.patch_norm_in.forward(&patches.view());
        let h1 = self.patch_proj.forward(&h0.view());
        let (mut embedded, ln_out) = self.patch_norm_out.forward(&h1.view());

        let mut masked_rows = Vec::new();
        if let Some((masks, token)) = masking {
            if masks.len() != batch {
                return Err(Error::Mask(format!("{} masks for a batch of {batch}", masks.len())));
            }
            if token.len() != d {
                return Err(Error::Shape(format!(
                    "mask token has width {}, expected {d}",
                    token.len()
                )));
            }
            for (b, mask) in masks.iter().enumerate() {
                if mask.len() != np {
                    return Err(Error::Mask(format!("mask length {} but {np} patches", mask.len())));
                }
                for i in mask.masked_indices() {
                    let row = b * np + i;
                    embedded.row_mut(row).assign(token);
                    masked_rows.push(row);
                }
            }
        }

        let mut x = Array2::zeros((batch * tokens, d));
        for b in 0..batch {
            let base = b * tokens;
            x.row_mut(base).assign(&(&self.cls_token + &self.pos_embed.row(0)));
            let mut rows = x.slice_mut(s![base + 1..base + tokens, ..]);
            rows.assign(&embedded.slice(s![b * np..(b + 1) * np, ..]));
            rows += &self.pos_embed.slice(s![1.., ..]);
        }

        let shape = cfg.attention_shape(batch);
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (a, ln1) = block.attn_norm.forward(&x.view());
            let qkv = block.qkv.forward(&a.view());
            let (attn, probs) = attention_forward(&qkv.view(), shape);
            x += &block.out_proj.forward(&attn.view());

            let (bn, ln2) = block.mlp_norm.forward(&x.view());
            let u = block.mlp_in.forward(&bn.view());
            let g = u.mapv(gelu);
            x += &block.mlp_out.forward(&g.view());
            block_caches.push(BlockCache {
                ln1,
                a,
                qkv,
                probs,
                attn,
                ln2,
                bn,
                u,
                g,
            });
        }

        let (out, ln_final) = self.final_norm.forward(&x.view());
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encoder output features".into()));
        }
        let features = out
            .into_shape_with_order((batch, tokens, d))
            .expect("row count is batch·tokens");
        let cache = EncodeCache {
            batch,
            ln_in,
            h0,
            ln_out,
            masked_rows,
            blocks: block_caches,
            ln_final,
        };
        Ok((features, cache))
    }

    /// Backpropagates `d_features` through the encoder, accumulating into
    /// `grad`. Returns the gradient with respect to the mask token (zero when
    /// no masking was applied).
    pub(crate) fn backward(
        &self,
        cache: &EncodeCache<T>,
        d_features: &ArrayView3<T>,
        grad: &mut BackboneParams<T>,
    ) -> Array1<T> {
        let cfg = &self.config;
        let batch = cache.batch;
        let (np, tokens, d) = (cfg.num_patches(), cfg.tokens(), cfg.dim);
        let d_out = d_features
            .to_owned()
            .into_shape_with_order((batch * tokens, d))
            .expect("row count is batch·tokens");
        let mut dx = self
            .final_norm
            .backward(&cache.ln_final, &d_out.view(), &mut grad.final_norm);

        let shape = cfg.attention_shape(batch);
        for ((block, bc), bg) in self
            .blocks
            .iter()
            .zip(cache.blocks.iter())
            .zip(grad.blocks.iter_mut())
            .rev()
        {
            let dg = block.mlp_out.backward(&bc.g.view(), &dx.view(), &mut bg.mlp_out);
            let du = &dg * &bc.u.mapv(gelu_grad);
            let dbn = block.mlp_in.backward(&bc.bn.view(), &du.view(), &mut bg.mlp_in);
            dx += &block.mlp_norm.backward(&bc.ln2, &dbn.view(), &mut bg.mlp_norm);

            let dattn = block.out_proj.backward(&bc.attn.view(), &dx.view(), &mut bg.out_proj);
            let dqkv = attention_backward(&bc.qkv.view(), &bc.probs, &dattn.view(), shape);
            let da = block.qkv.backward(&bc.a.view(), &dqkv.view(), &mut bg.qkv);
            dx += &block.attn_norm.backward(&bc.ln1, &da.view(), &mut bg.attn_norm);
        }

        let mut d_embedded = Array2::zeros((batch * np, d));
        for b in 0..batch {
            let base = b * tokens;
            let cls_row = dx.row(base);
            grad.cls_token += &cls_row;
            grad.pos_embed.row_mut(0).scaled_add(T::one(), &cls_row);
            let rows = dx.slice(s![base + 1..base + tokens, ..]);
            grad.pos_embed.slice_mut(s![1.., ..]).scaled_add(T::one(), &rows);
            d_embedded.slice_mut(s![b * np..(b + 1) * np, ..]).assign(&rows);
        }

        let mut d_mask_token = Array1::zeros(d);
        for &row in &cache.masked_rows {
            d_mask_token += &d_embedded.row(row);
            d_embedded.row_mut(row).fill(T::zero());
        }

        let dh1 = self
            .patch_norm_out
            .backward(&cache.ln_out, &d_embedded.view(), &mut grad.patch_norm_out);
        let dh0 = self
            .patch_proj
            .backward(&cache.h0.view(), &dh1.view(), &mut grad.patch_proj);
        self.patch_norm_in
            .accumulate_grad(&cache.ln_in, &dh0.view(), &mut grad.patch_norm_in);
        d_mask_token
    }

    /// Converts every tensor to another precision.
    pub fn cast<U: Real>(&self) -> BackboneParams<U> {
        let mut out = BackboneParams::<U>::zeros(self.config);
        let mut flat = Vec::new();
        self.visit(&mut |_, v, _| flat.push(v.to_vec()));
        let mut i = 0;
        out.visit_mut(&mut |_, v| {
            for (dst, src) in v.iter_mut().zip(flat[i].iter()) {
                *dst = U::from_f64(src.to_f64().expect("finite cast")).expect("finite cast");
            }
            i += 1;
        });
        out
    }
}

pub(crate) struct BlockCache<T> {
    ln1: LayerNormCache<T>,
    a: Array2<T>,
    qkv: Array2<T>,
    probs: Vec<Array2<T>>,
    attn: Array2<T>,
    ln2: LayerNormCache<T>,
    bn: Array2<T>,
    u: Array2<T>,
    g: Array2<T>,
}

pub(crate) struct EncodeCache<T> {
    batch: usize,
    ln_in: LayerNormCache<T>,
    h0: Array2<T>,
    ln_out: LayerNormCache<T>,
    masked_rows: Vec<usize>,
    blocks: Vec<BlockCache<T>>,
    ln_final: LayerNormCache<T>,
}

impl<T: Real> ParamSet<T> for BackboneParams<T> {
    fn visit(&self, f: &mut Visitor<'_, T>) {
        visit_norm("patch_embed.norm_in", &self.patch_norm_in, f);
        visit_affine("patch_embed.proj", &self.patch_proj, f);
        visit_norm("patch_embed.norm_out", &self.patch_norm_out, f);
        f(
            "pos_embed",
            self.pos_embed.as_slice().expect("standard layout"),
            self.pos_embed.shape(),
        );
        f(
            "cls_token",
            self.cls_token.as_slice().expect("standard layout"),
            self.cls_token.shape(),
        );
        for (i, b) in self.blocks.iter().enumerate() {
            visit_norm(&format!("blocks.{i}.attn_norm"), &b.attn_norm, f);
            visit_affine(&format!("blocks.{i}.qkv"), &b.qkv, f);
            visit_affine(&format!("blocks.{i}.out_proj"), &b.out_proj, f);
            visit_norm(&format!("blocks.{i}.mlp_norm"), &b.mlp_norm, f);
            visit_affine(&format!("blocks.{i}.mlp_in"), &b.mlp_in, f);
            visit_affine(&format!("blocks.{i}.mlp_out"), &b.mlp_out, f);
        }
        visit_norm("final_norm", &self.final_norm, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [T])) {
        visit_norm_mut("patch_embed.norm_in", &mut self.patch_norm_in, f);
        visit_affine_mut("patch_embed.proj", &mut self.patch_proj, f);
        visit_norm_mut("patch_embed.norm_out", &mut self.patch_norm_out, f);
        f("pos_embed", self.pos_embed.as_slice_mut().expect("standard layout"));
        f("cls_token", self.cls_token.as_slice_mut().expect("standard layout"));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            visit_norm_mut(&format!("blocks.{i}.attn_norm"), &mut b.attn_norm, f);
            visit_affine_mut(&format!("blocks.{i}.qkv"), &mut b.qkv, f);
            visit_affine_mut(&format!("blocks.{i}.out_proj"), &mut b.out_proj, f);
            visit_norm_mut(&format!("blocks.{i}.mlp_norm"), &mut b.mlp_norm, f);
            visit_affine_mut(&format!("blocks.{i}.mlp_in"), &mut b.mlp_in, f);
            visit_affine_mut(&format!("blocks.{i}.mlp_out"), &mut b.mlp_out, f);
        }
        visit_norm_mut("final_norm", &mut self.final_norm, f);
    }
}

/// Exact number of learnable scalars held by `params`.
pub fn count_parameters<T: Real, P: ParamSet<T>>(params: &P) -> usize {
    params.num_scalars()
}

/// Splits a `(C, H, W)` image into `(H/p)·(W/p)` flattened patches.
///
/// Patches are ordered row-major over the patch grid. Within a patch the
/// vector index is `c·p² + y·p + x` (channel-major, then row, then column).
pub fn patchify<T: Real>(image: &ArrayView3<T>, patch_size: usize) -> Result<Array2<T>> {
    let (c, h, w) = image.dim();
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::Shape(format!(
            "image {h}x{w} is not divisible into {patch_size}-pixel patches"
        )));
    }
    let (gh, gw) = (h / patch_size, w / patch_size);
    let p2 = patch_size * patch_size;
    let mut out = Array2::zeros((gh * gw, c * p2));
    for gy in 0..gh {
        for gx in 0..gw {
            let mut row = out.row_mut(gy * gw + gx);
            for ch in 0..c {
                for y in 0..patch_size {
                    for x in 0..patch_size {
                        row[ch * p2 + y * patch_size + x] = image[[ch, gy * patch_size + y, gx * patch_size + x]];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`] for a `(channels, size, size)` image.
pub fn unpatchify<T: Real>(
    patches: &ArrayView2<T>,
    patch_size: usize,
    channels: usize,
    image_size: usize,
) -> Result<Array3<T>> {
    let p2 = patch_size * patch_size;
    if patch_size == 0 || !image_size.is_multiple_of(patch_size) {
        return Err(Error::Shape(format!(
            "image size {image_size} not divisible by patch {patch_size}"
        )));
    }
    let g = image_size / patch_size;
    if patches.dim() != (g * g, channels * p2) {
        return Err(Error::Shape(format!(
            "patch matrix {:?} does not match {g}x{g} grid of {} values",
            patches.dim(),
            channels * p2
        )));
    }
    let mut out = Array3::zeros((channels, image_size, image_size));
    for gy in 0..g {
        for gx in 0..g {
            let row = patches.row(gy * g + gx);
            for ch in 0..channels {
                for y in 0..patch_size {
                    for x in 0..patch_size {
                        out[[ch, gy * patch_size + y, gx * patch_size + x]] = row[ch * p2 + y * patch_size + x];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Patchifies a whole batch into `(B·P, patch_dim)` rows.
pub fn patchify_batch<T: Real>(images: &ArrayView4<T>, cfg: &ModelConfig) -> Result<Array2<T>> {
    let (b, c, h, w) = images.dim();
    if c != cfg.channels || h != cfg.image_size || w != cfg.image_size {
        return Err(Error::Shape(format!(
            "images are {c}x{h}x{w}, model expects {}x{}x{}",
            cfg.channels, cfg.image_size, cfg.image_size
        )));
    }
    let np = cfg.num_patches();
    let mut out = Array2::zeros((b * np, cfg.patch_dim()));
    for (i, img) in images.outer_iter().enumerate() {
        out.slice_mut(s![i * np..(i + 1) * np, ..])
            .assign(&patchify(&img, cfg.patch_size)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array4, Axis};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
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

    fn random_images(rng: &mut ChaCha8Rng, b: usize, cfg: &ModelConfig) -> Array4<f64> {
        Array4::from_shape_fn((b, cfg.channels, cfg.image_size, cfg.image_size), |_| {
            rng.random::<f64>()
        })
    }

    #[test]
    fn default_counts() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.num_patches(), 64);
        assert_eq!(cfg.patch_dim(), 768);
        assert_eq!(cfg.inner_dim(), 512);
        assert_eq!(cfg.patch_embed_param_count(), 100_224);
        assert_eq!(cfg.block_param_count(), 394_496);
        assert_eq!(cfg.analytic_param_count(), 4_842_880);
    }

    #[test]
    fn init_rejects_indivisible_image() {
        let cfg = ModelConfig {
            image_size: 30,
            ..small()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            BackboneParams::<f32>::init(cfg, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn patchify_default_shape_and_constant_image() {
        let img = Array3::<f32>::from_elem((3, 128, 128), 0.25);
        let p = patchify(&img.view(), 16).unwrap();
        assert_eq!(p.dim(), (64, 768));
        for row in p.outer_iter() {
            assert_eq!(row, p.row(0));
        }
    }

    #[test]
    fn patchify_rejects_bad_size() {
        let img = Array3::<f32>::zeros((3, 20, 20));
        assert!(patchify(&img.view(), 16).is_err());
        let cfg = ModelConfig::default();
        let batch = Array4::<f32>::zeros((1, 3, 64, 64));
        assert!(patchify_batch(&batch.view(), &cfg).is_err());
    }

    #[test]
    fn patch_order_is_row_major_channel_major() {
        let img = Array3::from_shape_fn((2, 4, 4), |(c, y, x)| (c * 100 + y * 10 + x) as f64);
        let p = patchify(&img.view(), 2).unwrap();
        // patch 1 = top row, second column; first value is channel 0, pixel (0, 2)
        assert_eq!(p[[1, 0]], 2.0);
        // channel 1 block starts at index 4
        assert_eq!(p[[1, 4]], 102.0);
        // patch 2 = second row, first column; pixel (1,1) within patch -> (3,1)
        assert_eq!(p[[2, 3]], 31.0);
    }

    #[test]
    fn encode_shapes_and_batch_permutation() {
        let cfg = small();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = BackboneParams::<f64>::init(cfg, &mut rng).unwrap();
        let images = random_images(&mut rng, 3, &cfg);
        let f = params.encode(&images.view()).unwrap();
        assert_eq!(f.dim(), (3, cfg.tokens(), cfg.dim));

        let permuted = images.select(Axis(0), &[2, 0, 1]);
        let fp = params.encode(&permuted.view()).unwrap();
        for (dst, src) in [(0, 2), (1, 0), (2, 1)] {
            let diff = (&fp.index_axis(Axis(0), dst) - &f.index_axis(Axis(0), src)).mapv(f64::abs);
            assert!(diff.iter().all(|&d| d < 1e-12));
        }
    }

    #[test]
    fn identical_images_give_identical_rows() {
        let cfg = small();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = BackboneParams::<f32>::init(cfg, &mut rng).unwrap();
        let one = Array4::from_shape_fn((1, 3, 32, 32), |_| rng.random::<f32>());
        let two = ndarray::concatenate(Axis(0), &[one.view(), one.view()]).unwrap();
        let f = params.encode(&two.view()).unwrap();
        assert_eq!(f.index_axis(Axis(0), 0), f.index_axis(Axis(0), 1));
        assert_eq!(f, params.encode(&two.view()).unwrap());
    }

    #[test]
    fn masking_semantics() {
        let cfg = small();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = BackboneParams::<f64>::init(cfg, &mut rng).unwrap();
        let token = normal_vec(&mut rng, cfg.dim, 0.02);
        let a = random_images(&mut rng, 1, &cfg);
        let b = random_images(&mut rng, 1, &cfg);

        let none = [MaskPattern::from_bools(vec![false; 4])];
        assert_eq!(
            params.encode_masked(&a.view(), &none, &token).unwrap(),
            params.encode(&a.view()).unwrap()
        );

        let all = [MaskPattern::from_bools(vec![true; 4])];
        assert_eq!(
            params.encode_masked(&a.view(), &all, &token).unwrap(),
            params.encode_masked(&b.view(), &all, &token).unwrap()
        );

        let short = [MaskPattern::from_bools(vec![true; 3])];
        assert!(matches!(
            params.encode_masked(&a.view(), &short, &token),
            Err(Error::Mask(_))
        ));
    }

    #[test]
    fn masking_is_local_without_blocks() {
        let cfg = ModelConfig { depth: 0, ..small() };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = BackboneParams::<f64>::init(cfg, &mut rng).unwrap();
        let token = normal_vec(&mut rng, cfg.dim, 0.02);
        let img = random_images(&mut rng, 1, &cfg);
        let mask = [MaskPattern::from_bools(vec![false, false, true, false])];
        let plain = params.encode(&img.view()).unwrap();
        let masked = params.encode_masked(&img.view(), &mask, &token).unwrap();
        for row in 0..cfg.tokens() {
            let same = plain.slice(s![0, row, ..]) == masked.slice(s![0, row, ..]);
            assert_eq!(same, row != 3, "row {row}");
        }
    }

    #[test]
    fn cast_round_trip_f32_f64() {
        let cfg = small();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = BackboneParams::<f32>::init(cfg, &mut rng).unwrap();
        assert_eq!(p.cast::<f64>().cast::<f32>(), p);
        assert_eq!(count_parameters(&p), cfg.analytic_param_count());
    }
}
