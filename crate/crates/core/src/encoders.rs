//! Trainable visual transformer, frozen text transformer and the
//! text-to-visual projection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn;

/// Reserved start-of-sequence id. Vocabularies put `<sos>` on line 0.
pub const SOS_ID: usize = 0;
/// Reserved end-of-sequence id. Vocabularies put `<eos>` on line 1.
pub const EOS_ID: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch: usize,
    pub stride: usize,
    /// visual (and fused) width d_v
    pub d_v: usize,
    /// text encoder width d_t
    pub d_t: usize,
    pub heads: usize,
    pub visual_layers: usize,
    pub text_layers: usize,
    pub vocab_size: usize,
    /// longest caption, excluding SOS/EOS
    pub max_text_len: usize,
    /// feed-forward hidden width as a multiple of the block width
    pub ffn_mult: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_height: 32,
            image_width: 16,
            patch: 8,
            stride: 8,
            d_v: 64,
            d_t: 32,
            heads: 4,
            visual_layers: 2,
            text_layers: 1,
            vocab_size: 64,
            max_text_len: 12,
            ffn_mult: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("encoder: {m}")));
        if self.patch == 0 || self.patch > self.image_height.min(self.image_width) {
            return fail(format!("patch {} must be in 1..=min(H, W)", self.patch));
        }
        if self.stride == 0 {
            return fail("stride must be >= 1".into());
        }
        if self.heads == 0 || !self.d_v.is_multiple_of(self.heads) || !self.d_t.is_multiple_of(self.heads) {
            return fail(format!("d_v {} and d_t {} must be divisible by heads {}", self.d_v, self.d_t, self.heads));
        }
        if self.vocab_size < 3 || self.max_text_len == 0 || self.ffn_mult == 0 {
            return fail("vocab_size >= 3, max_text_len >= 1 and ffn_mult >= 1 required".into());
        }
        Ok(())
    }

    /// Patch grid (rows, cols).
    pub fn grid(&self) -> (usize, usize) {
        patch_grid(self.image_height, self.image_width, self.patch, self.stride)
    }

    /// Number of image patches N.
    pub fn num_patches(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }
}

pub fn patch_grid(height: usize, width: usize, patch: usize, stride: usize) -> (usize, usize) {
    ((height - patch) / stride + 1, (width - patch) / stride + 1)
}

/// Cut an image into (possibly overlapping) square patches, row-major.
///
/// Returns an N x (patch * patch * 3) matrix; each row is the patch's pixels
/// in (y, x, channel) order.
pub fn patchify(image: &Image, patch: usize, stride: usize) -> Result<Tensor> {
    if patch == 0 || stride == 0 {
        return Err(Error::Config("patch and stride must be positive".into()));
    }
    if image.height < patch || image.width < patch {
        return Err(Error::Data(format!(
            "image {}x{} is smaller than patch {patch}",
            image.height, image.width
        )));
    }
    let (gr, gc) = patch_grid(image.height, image.width, patch, stride);
    let dim = patch * patch * 3;
    let mut data = Vec::with_capacity(gr * gc * dim);
    for pr in 0..gr {
        for pc in 0..gc {
            for dy in 0..patch {
                let y = pr * stride + dy;
                let o = (y * image.width + pc * stride) * 3;
                data.extend_from_slice(&image.data[o..o + patch * 3]);
            }
        }
    }
    Ok(Tensor::matrix(gr * gc, dim, data))
}

pub fn init_visual<G: Rng>(store: &mut ParamStore, rng: &mut G, cfg: &EncoderConfig) {
    let d = cfg.d_v;
    nn::init_linear(store, rng, "visual.patch", cfg.patch_dim(), d, true);
    store.insert_normal(rng, "visual.cls", 1, d, 0.02, true);
    store.insert_normal(rng, "visual.pos", cfg.num_patches() + 1, d, 0.02, true);
    for i in 0..cfg.visual_layers {
        nn::init_block(store, rng, &format!("visual.block{i}"), d, d * cfg.ffn_mult, true);
    }
    nn::init_layer_norm(store, "visual.ln_f", d, true);
}

/// Visual sequence `[CLS, v1..vN]`, (N+1) x d_v.
pub fn visual_encode(g: &mut Graph, store: &ParamStore, cfg: &EncoderConfig, patches: &Tensor) -> Result<Var> {
    if patches.rows() != cfg.num_patches() || patches.cols() != cfg.patch_dim() {
        return Err(Error::Data(format!(
            "patch matrix {:?} does not match config ({} x {})",
            patches.shape(),
            cfg.num_patches(),
            cfg.patch_dim()
        )));
    }
    let x = g.constant(patches.clone())?;
    let tokens = nn::linear(g, store, "visual.patch", x)?;
    let cls = g.param(store, "visual.cls")?;
    let seq = g.concat_rows(&[cls, tokens])?;
    let pos = g.param(store, "visual.pos")?;
    let mut h = g.add(seq, pos)?;
    for i in 0..cfg.visual_layers {
        h = nn::block(g, store, &format!("visual.block{i}"), h, cfg.heads)?;
    }
    Ok(nn::layer_norm(g, store, "visual.ln_f", h)?)
}

pub fn init_text<G: Rng>(store: &mut ParamStore, rng: &mut G, cfg: &EncoderConfig) {
    let d = cfg.d_t;
    store.insert_normal(rng, "text.tok", cfg.vocab_size, d, 1.0, false);
    store.insert_normal(rng, "text.pos", cfg.max_text_len + 2, d, 0.02, false);
    for i in 0..cfg.text_layers {
        nn::init_block(store, rng, &format!("text.block{i}"), d, d * cfg.ffn_mult, false);
    }
    nn::init_layer_norm(store, "text.ln_f", d, false);
}

/// Frozen text encoder: `[SOS, t1..tM, EOS]` as an (M+2) x d_t constant.
pub fn text_encode(store: &ParamStore, cfg: &EncoderConfig, ids: &[usize]) -> Result<Tensor> {
    if ids.len() > cfg.max_text_len {
        return Err(Error::Data(format!("caption length {} exceeds max {}", ids.len(), cfg.max_text_len)));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
        return Err(Error::Data(format!("token id {bad} out of vocabulary (size {})", cfg.vocab_size)));
    }
    let mut seq = Vec::with_capacity(ids.len() + 2);
    seq.push(SOS_ID);
    seq.extend_from_slice(ids);
    seq.push(EOS_ID);
    let mut g = Graph::new();
    let tok = g.param(store, "text.tok")?;
    let emb = g.embedding(tok, &seq)?;
    let pos_all = g.param(store, "text.pos")?;
    let pos = g.slice_rows(pos_all, 0, seq.len())?;
    let mut h = g.add(emb, pos)?;
    for i in 0..cfg.text_layers {
        h = nn::block(&mut g, store, &format!("text.block{i}"), h, cfg.heads)?;
    }
    let out = nn::layer_norm(&mut g, store, "text.ln_f", h)?;
    Ok(g.value(out).clone())
}

pub fn init_projection<G: Rng>(store: &mut ParamStore, rng: &mut G, cfg: &EncoderConfig) {
    nn::init_linear(store, rng, "text_proj", cfg.d_t, cfg.d_v, true);
}

/// Shared trainable d_t -> d_v map applied to every token.
pub fn project_text(g: &mut Graph, store: &ParamStore, cfg: &EncoderConfig, seq: Var) -> Result<Var> {
    if g.value(seq).cols() != cfg.d_t {
        return Err(Error::Data(format!("text width {} does not match d_t {}", g.value(seq).cols(), cfg.d_t)));
    }
    Ok(nn::linear(g, store, "text_proj", seq)?)
}
