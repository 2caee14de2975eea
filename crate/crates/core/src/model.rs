//! Full network: encoders, dual-branch cross-modal module, pooling and
//! identity classifiers, plus checkpoint I/O.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::crossmodal::{self, CrossModalConfig};
use crate::diffpool::{self, Pooled};
use crate::encoders::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn;
use crate::synthdata::derive_seed;

pub const HEAD_BACKBONE: &str = "head.backbone";
pub const HEAD_FG_TEXT: &str = "head.fg_text";
pub const HEAD_FG_VISUAL: &str = "head.fg_visual";
pub const INDEX_FILE: &str = "index.json";

const STREAM_VISUAL: u64 = 0x7669;
const STREAM_TEXT: u64 = 0x7478;
const STREAM_CROSS: u64 = 0x636d;
const STREAM_HEADS: u64 = 0x6864;

/// Which parts of the forward pass to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    pub cross_modal: bool,
    pub background: bool,
    pub mask: bool,
    pub inverted_mask: bool,
}

impl ForwardOptions {
    pub const BACKBONE_ONLY: Self = Self { cross_modal: false, background: false, mask: false, inverted_mask: false };

    fn check(&self) -> Result<()> {
        if (self.background || self.mask) && !self.cross_modal {
            return Err(Error::Config("background branch and masking need the cross-modal module".into()));
        }
        if self.mask && !self.background {
            return Err(Error::Config("masking needs the background branch".into()));
        }
        Ok(())
    }
}

/// One sample ready for the network: patches and frozen text encodings.
#[derive(Clone, Debug)]
pub struct SampleInput {
    pub patches: Tensor,
    /// `[SOS, fg tokens, EOS]` from the frozen text encoder, (M+2) x d_t
    pub fg_text: Tensor,
    pub bg_text: Tensor,
}

/// Graph nodes of one sample's features, all 1 x d_v.
#[derive(Clone, Copy, Debug)]
pub struct SampleFeatures {
    pub backbone: Var,
    /// foreground text feature; `(EOS + pooled) / 2` when masking
    pub fg_text: Option<Var>,
    pub fg_visual: Option<Var>,
    pub bg_text: Option<Var>,
    pub bg_visual: Option<Var>,
    pub w_fg: Option<Var>,
    pub w_bg: Option<Var>,
    pub pooled: Option<Pooled>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub encoder: EncoderConfig,
    pub crossmodal: CrossModalConfig,
    pub num_classes: usize,
    pub store: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct CheckpointIndex {
    encoder: EncoderConfig,
    crossmodal: CrossModalConfig,
    num_classes: usize,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
    trainable: bool,
}

impl Model {
    /// Initialize every parameter from `seed`. Values are rounded to `f32`
    /// so checkpoints round-trip exactly.
    pub fn init(encoder: &EncoderConfig, crossmodal: &CrossModalConfig, num_classes: usize, seed: u64) -> Result<Self> {
        encoder.validate()?;
        if crossmodal.heads == 0 || !encoder.d_v.is_multiple_of(crossmodal.heads) {
            return Err(Error::Config(format!(
                "crossmodal: d_v {} not divisible by {} heads",
                encoder.d_v, crossmodal.heads
            )));
        }
        if num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 identities, got {num_classes}")));
        }
        let mut store = ParamStore::new();
        let rng = |stream| ChaCha8Rng::seed_from_u64(derive_seed(seed, stream));
        encoders::init_visual(&mut store, &mut rng(STREAM_VISUAL), encoder);
        encoders::init_text(&mut store, &mut rng(STREAM_TEXT), encoder);
        let mut r = rng(STREAM_CROSS);
        encoders::init_projection(&mut store, &mut r, encoder);
        crossmodal::init_crossmodal(&mut store, &mut r, crossmodal, encoder.d_v, encoder.d_v * encoder.ffn_mult);
        let mut r = rng(STREAM_HEADS);
        for head in [HEAD_BACKBONE, HEAD_FG_TEXT, HEAD_FG_VISUAL] {
            nn::init_linear(&mut store, &mut r, head, encoder.d_v, num_classes, true);
        }
        store.round_to_f32();
        Ok(Self { encoder: encoder.clone(), crossmodal: crossmodal.clone(), num_classes, store })
    }

    pub fn text_names(&self) -> Vec<String> {
        self.store.names().filter(|n| n.starts_with("text.")).cloned().collect()
    }

    /// Build a [`SampleInput`], reusing text encodings from `cache`.
    pub fn prepare(
        &self,
        patches: Tensor,
        fg_tokens: &[usize],
        bg_tokens: &[usize],
        cache: &mut HashMap<Vec<usize>, Tensor>,
    ) -> Result<SampleInput> {
        let mut encode = |ids: &[usize]| -> Result<Tensor> {
            if let Some(t) = cache.get(ids) {
                return Ok(t.clone());
            }
            let t = encoders::text_encode(&self.store, &self.encoder, ids)?;
            cache.insert(ids.to_vec(), t.clone());
            Ok(t)
        };
        Ok(SampleInput { patches, fg_text: encode(fg_tokens)?, bg_text: encode(bg_tokens)? })
    }

    pub fn forward(&self, g: &mut Graph, input: &SampleInput, opts: ForwardOptions) -> Result<SampleFeatures> {
        forward_sample(g, &self.store, &self.encoder, &self.crossmodal, input, opts)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut tensors = Vec::with_capacity(self.store.len());
        for (name, p) in self.store.iter() {
            let file = format!("{name}.fbt");
            let path = dir.join(&file);
            let mut buf = Vec::new();
            p.value.write_fbt(&mut buf).map_err(|e| Error::io(&path, e))?;
            fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
            tensors.push(TensorEntry { name: name.clone(), file, shape: p.value.shape().to_vec(), trainable: p.trainable });
        }
        let index = CheckpointIndex {
            encoder: self.encoder.clone(),
            crossmodal: self.crossmodal.clone(),
            num_classes: self.num_classes,
            tensors,
        };
        let path = dir.join(INDEX_FILE);
        fs::write(&path, serde_json::to_string_pretty(&index)? + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(INDEX_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: CheckpointIndex = serde_json::from_str(&text)?;
        let mut store = ParamStore::new();
        for t in &index.tensors {
            let path = dir.join(&t.file);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let value = Tensor::read_fbt(&bytes[..]).map_err(|e| Error::io(&path, e))?;
            if value.shape() != t.shape.as_slice() {
                return Err(Error::Data(format!("{}: shape {:?}, index says {:?}", path.display(), value.shape(), t.shape)));
            }
            store.insert(t.name.clone(), value, t.trainable);
        }
        let model = Self { encoder: index.encoder, crossmodal: index.crossmodal, num_classes: index.num_classes, store };
        let expected = Self::init(&model.encoder, &model.crossmodal, model.num_classes, 0)?;
        for (name, p) in expected.store.iter() {
            match model.store.get(name) {
                Some(q) if q.value.shape() == p.value.shape() => {}
                Some(q) => {
                    return Err(Error::Data(format!("checkpoint tensor {name} has shape {:?}, expected {:?}", q.value.shape(), p.value.shape())))
                }
                None => return Err(Error::Data(format!("checkpoint is missing tensor {name}"))),
            }
        }
        if model.store.len() != expected.store.len() {
            return Err(Error::Data("checkpoint has unexpected tensors".into()));
        }
        Ok(model)
    }
}

/// Encoders, cross-modal module and pooling for one sample.
pub fn forward_sample(
    g: &mut Graph,
    store: &ParamStore,
    enc: &EncoderConfig,
    cm: &CrossModalConfig,
    input: &SampleInput,
    opts: ForwardOptions,
) -> Result<SampleFeatures> {
    opts.check()?;
    let visual = encoders::visual_encode(g, store, enc, &input.patches)?;
    let backbone = crossmodal::select_global(g, visual, crossmodal::GlobalToken::Cls)?;
    let mut out = SampleFeatures {
        backbone,
        fg_text: None,
        fg_visual: None,
        bg_text: None,
        bg_visual: None,
        w_fg: None,
        w_bg: None,
        pooled: None,
    };
    if !opts.cross_modal {
        return Ok(out);
    }
    let t_fg = g.constant(input.fg_text.clone())?;
    let t_fg = encoders::project_text(g, store, enc, t_fg)?;
    let fg = crossmodal::branch_forward(g, store, cm, visual, t_fg)?;
    out.fg_visual = Some(fg.visual_global);
    out.fg_text = Some(fg.text_global);
    out.w_fg = Some(fg.attn);
    if opts.background {
        let t_bg = g.constant(input.bg_text.clone())?;
        let t_bg = encoders::project_text(g, store, enc, t_bg)?;
        let bg = crossmodal::branch_forward(g, store, cm, visual, t_bg)?;
        out.bg_visual = Some(bg.visual_global);
        out.bg_text = Some(bg.text_global);
        out.w_bg = Some(bg.attn);
        if opts.mask {
            if g.value(fg.attn).cols() != g.value(bg.attn).cols() {
                // token counts differ: compare over the shared prefix
                let m = g.value(fg.attn).cols().min(g.value(bg.attn).cols());
                let wf = g.slice_cols(fg.attn, 0, m)?;
                let wb = g.slice_cols(bg.attn, 0, m)?;
                let toks = g.slice_rows(fg.text_tokens, 0, m)?;
                out.pooled = Some(diffpool::differential_pool(g, wf, wb, toks, opts.inverted_mask)?);
            } else {
                out.pooled = Some(diffpool::differential_pool(g, fg.attn, bg.attn, fg.text_tokens, opts.inverted_mask)?);
            }
            let pooled = out.pooled.expect("set above").feature;
            let sum = g.add(fg.text_global, pooled)?;
            out.fg_text = Some(g.scale(sum, 0.5)?);
        }
    }
    Ok(out)
}

/// Identity logits for a stack of feature rows.
pub fn classify(g: &mut Graph, store: &ParamStore, head: &str, features: Var) -> Result<Var> {
    Ok(nn::linear(g, store, head, features)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (EncoderConfig, CrossModalConfig) {
        let enc = EncoderConfig { d_v: 16, d_t: 8, heads: 2, ffn_mult: 2, ..EncoderConfig::default() };
        (enc, CrossModalConfig { heads: 2, stack_layers: 1 })
    }

    fn input(model: &Model, fg: &[usize], bg: &[usize]) -> SampleInput {
        let n = model.encoder.num_patches();
        let d = model.encoder.patch_dim();
        let patches = Tensor::matrix(n, d, (0..n * d).map(|i| ((i * 37 % 101) as f64) / 101.0).collect());
        model.prepare(patches, fg, bg, &mut HashMap::new()).unwrap()
    }

    const FULL: ForwardOptions = ForwardOptions { cross_modal: true, background: true, mask: true, inverted_mask: false };

    #[test]
    fn init_is_seeded_and_f32_exact() {
        let (enc, cm) = tiny();
        let a = Model::init(&enc, &cm, 4, 3).unwrap();
        let b = Model::init(&enc, &cm, 4, 3).unwrap();
        let c = Model::init(&enc, &cm, 4, 4).unwrap();
        assert_eq!(a.store, b.store);
        assert_ne!(a.store, c.store);
        for (_, p) in a.store.iter() {
            assert!(p.value.data().iter().all(|&v| v == v as f32 as f64));
        }
        assert!(a.text_names().iter().all(|n| !a.store.get(n).unwrap().trainable));
    }

    #[test]
    fn feature_shapes() {
        let (enc, cm) = tiny();
        let model = Model::init(&enc, &cm, 4, 0).unwrap();
        let x = input(&model, &[2, 3, 4], &[5, 6]);
        let mut g = Graph::new();
        let f = model.forward(&mut g, &x, FULL).unwrap();
        for v in [Some(f.backbone), f.fg_text, f.fg_visual, f.bg_text, f.bg_visual] {
            assert_eq!(g.value(v.unwrap()).shape(), &[1, 16]);
        }
        assert_eq!(g.value(f.w_fg.unwrap()).shape(), &[8, 3]);
        assert_eq!(g.value(f.w_bg.unwrap()).shape(), &[8, 2]);
        assert_eq!(g.value(f.pooled.unwrap().mask).shape(), &[1, 2]);
        let mut g2 = Graph::new();
        let b = model.forward(&mut g2, &x, ForwardOptions::BACKBONE_ONLY).unwrap();
        assert_eq!(g2.value(b.backbone), g.value(f.backbone));
        assert!(b.fg_text.is_none());
    }

    #[test]
    fn invalid_option_combinations_fail() {
        let (enc, cm) = tiny();
        let model = Model::init(&enc, &cm, 4, 0).unwrap();
        let x = input(&model, &[2], &[3]);
        let bad = ForwardOptions { cross_modal: true, background: false, mask: true, inverted_mask: false };
        assert!(model.forward(&mut Graph::new(), &x, bad).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let (enc, cm) = tiny();
        let model = Model::init(&enc, &cm, 5, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path()).unwrap();
        let back = Model::load(dir.path()).unwrap();
        assert_eq!(back.store, model.store);
        assert_eq!(back.num_classes, 5);
        let first = fs::read(dir.path().join(INDEX_FILE)).unwrap();
        back.save(dir.path()).unwrap();
        assert_eq!(fs::read(dir.path().join(INDEX_FILE)).unwrap(), first);
    }

    #[test]
    fn checkpoint_missing_tensor_fails() {
        let (enc, cm) = tiny();
        let model = Model::init(&enc, &cm, 5, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path()).unwrap();
        fs::remove_file(dir.path().join("text_proj.w.fbt")).unwrap();
        assert!(Model::load(dir.path()).is_err());
    }
}
