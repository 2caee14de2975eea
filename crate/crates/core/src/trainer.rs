//! Optimization: warmup + cosine schedule, Adam with decoupled weight
//! decay, PK-batch training loop and gradient verification.
//!
//! Each sample gets its own graph (encoders, cross-modal module, pooling);
//! the batch losses run on a second graph over the stacked feature rows.
//! The batch backward pass yields per-row feature gradients that seed each
//! sample graph, and parameter gradients are summed in sample order.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{directional_check, finite_diff_check, AutodiffError, FdReport, Graph, ParamStore, Tensor, Var};
use crate::config::Config;
use crate::crossmodal::CrossModalConfig;
use crate::encoders::{patchify, EncoderConfig};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{total_loss, FeatureBundle, LossBreakdown, LossConfig};
use crate::model::{self, forward_sample, ForwardOptions, Model, SampleInput};
use crate::synthdata::{self, derive_seed, Corpus, PkSampler, SampleRecord};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub epochs: usize,
    pub warmup: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// identities per batch
    pub p: usize,
    /// instances per identity
    pub k: usize,
    /// run directory (log, checkpoint, config echo)
    pub out: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { base_lr: 3e-4, epochs: 30, warmup: 5, weight_decay: 1e-4, seed: 0, p: 8, k: 4, out: "run".into() }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(Error::Config(format!("train: base_lr must be > 0, got {}", self.base_lr)));
        }
        if self.warmup >= self.epochs {
            return Err(Error::Config(format!("train: need 0 <= warmup < epochs, got {} and {}", self.warmup, self.epochs)));
        }
        if self.p < 2 || self.k < 2 {
            return Err(Error::Config("train: p and k must both be >= 2".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("train: weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Per-epoch learning rate: linear warmup from `0.001 * base` to `base`,
/// then cosine decay to `0.01 * base` at the last epoch.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    let (e, w, n) = (epoch, cfg.warmup, cfg.epochs);
    if e >= n {
        return Err(Error::Config(format!("epoch {e} out of range 0..{n}")));
    }
    let base = cfg.base_lr;
    if e < w {
        return Ok(base * (0.001 + (1.0 - 0.001) * e as f64 / w as f64));
    }
    if n - 1 == w {
        return Ok(base);
    }
    let t = (e - w) as f64 / (n - 1 - w) as f64;
    Ok(base * (0.01 + (1.0 - 0.01) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

/// One Adam update. Decay `p -= lr * wd * p` is applied before the Adam
/// delta; frozen parameters and parameters without a gradient are skipped.
pub fn adam_step(store: &mut ParamStore, grads: &BTreeMap<String, Tensor>, state: &mut AdamState, lr: f64, weight_decay: f64) -> Result<()> {
    for (name, g) in grads {
        let p = store.get(name).ok_or_else(|| AutodiffError::UnknownParam(name.clone()))?;
        if p.value.shape() != g.shape() {
            return Err(Error::Data(format!("gradient for {name} has shape {:?}, parameter {:?}", g.shape(), p.value.shape())));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (name, g) in grads {
        let p = store.get_mut(name).expect("checked above");
        if !p.trainable {
            continue;
        }
        let n = g.len();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
            *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w -= lr * weight_decay * *w;
            *w -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

pub fn forward_options(loss: &LossConfig) -> ForwardOptions {
    ForwardOptions {
        cross_modal: loss.needs_cross_modal(),
        background: loss.needs_background(),
        mask: loss.mask,
        inverted_mask: loss.inverted_mask,
    }
}

/// Loss breakdown and (optionally) parameter gradients for one batch.
pub fn batch_loss(
    store: &ParamStore,
    enc: &EncoderConfig,
    cm: &CrossModalConfig,
    loss: &LossConfig,
    inputs: &[&SampleInput],
    labels: &[usize],
    want_grad: bool,
) -> Result<(LossBreakdown, BTreeMap<String, Tensor>)> {
    if inputs.len() != labels.len() || inputs.is_empty() {
        return Err(Error::Data(format!("{} inputs for {} labels", inputs.len(), labels.len())));
    }
    let opts = forward_options(loss);
    let mut graphs = Vec::with_capacity(inputs.len());
    let mut feats = Vec::with_capacity(inputs.len());
    for input in inputs {
        let mut g = Graph::new();
        feats.push(forward_sample(&mut g, store, enc, cm, input, opts)?);
        graphs.push(g);
    }

    let mut bg = Graph::new();
    let kinds: [fn(&model::SampleFeatures) -> Option<Var>; 5] = [
        |f| Some(f.backbone),
        |f| f.fg_text,
        |f| f.fg_visual,
        |f| f.bg_text,
        |f| f.bg_visual,
    ];
    let mut leaves: [Option<Var>; 5] = [None; 5];
    for (slot, kind) in leaves.iter_mut().zip(kinds) {
        if kind(&feats[0]).is_none() {
            continue;
        }
        let mut data = Vec::new();
        for (g, f) in graphs.iter().zip(&feats) {
            data.extend_from_slice(g.value(kind(f).expect("uniform options")).data());
        }
        let rows = inputs.len();
        let cols = data.len() / rows;
        *slot = Some(bg.leaf(Tensor::matrix(rows, cols, data), want_grad)?);
    }
    let backbone = leaves[0].expect("backbone always present");
    let logits = |g: &mut Graph, head: &str, x: Option<Var>| -> Result<Option<Var>> {
        match x {
            Some(x) if loss.cross_modal || head == model::HEAD_BACKBONE => Ok(Some(model::classify(g, store, head, x)?)),
            _ => Ok(None),
        }
    };
    let bundle = FeatureBundle {
        labels: labels.to_vec(),
        backbone,
        backbone_logits: logits(&mut bg, model::HEAD_BACKBONE, Some(backbone))?.expect("backbone head"),
        fg_text: leaves[1],
        fg_visual: leaves[2],
        fg_text_logits: logits(&mut bg, model::HEAD_FG_TEXT, leaves[1])?,
        fg_visual_logits: logits(&mut bg, model::HEAD_FG_VISUAL, leaves[2])?,
        bg_text: leaves[3],
        bg_visual: leaves[4],
    };
    let (total, breakdown) = total_loss(&mut bg, &bundle, loss)?;
    if !breakdown.total.is_finite() {
        return Err(AutodiffError::NonFinite { op: "total_loss", node: total.index() }.into());
    }
    let mut grads = BTreeMap::new();
    if !want_grad {
        return Ok((breakdown, grads));
    }
    bg.backward(total)?;
    grads = bg.param_grads();
    let feature_grads: Vec<Option<Tensor>> = leaves.iter().map(|l| l.and_then(|v| bg.grad(v).cloned())).collect();
    for (i, (g, f)) in graphs.iter_mut().zip(&feats).enumerate() {
        let mut seeds = Vec::new();
        for (kind, fg) in kinds.iter().zip(&feature_grads) {
            if let (Some(v), Some(fg)) = (kind(f), fg) {
                seeds.push((v, Tensor::row_vector(fg.row(i).to_vec())));
            }
        }
        if seeds.is_empty() {
            continue;
        }
        g.backward_with(&seeds)?;
        for (name, pg) in g.param_grads() {
            match grads.get_mut(&name) {
                Some(acc) => acc.data_mut().iter_mut().zip(pg.data()).for_each(|(a, b)| *a += b),
                None => {
                    grads.insert(name, pg);
                }
            }
        }
    }
    Ok((breakdown, grads))
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    #[serde(flatten)]
    pub losses: LossBreakdown,
    pub lr: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<LogRecord>,
}

/// Read and patchify every record's image and encode its captions.
pub fn load_inputs(model: &Model, corpus: &Corpus, records: &[SampleRecord]) -> Result<Vec<SampleInput>> {
    let enc = &model.encoder;
    let mut cache = HashMap::new();
    records
        .iter()
        .map(|r| {
            let img = Image::read_ppm(&corpus.image_path(r))?;
            if img.height != enc.image_height || img.width != enc.image_width {
                return Err(Error::Data(format!(
                    "{} is {}x{}, encoder expects {}x{}",
                    r.image, img.height, img.width, enc.image_height, enc.image_width
                )));
            }
            model.prepare(patchify(&img, enc.patch, enc.stride)?, &r.fg_tokens, &r.bg_tokens, &mut cache)
        })
        .collect()
}

/// Train on identities `< data.train_ids` of `corpus`. Log lines are
/// written to `log` as they are produced.
pub fn train<W: Write>(cfg: &Config, corpus: &Corpus, mut log: W) -> Result<TrainOutcome> {
    cfg.validate()?;
    let tc = &cfg.train;
    let records = corpus.train_records(cfg.data.train_ids);
    let sampler = PkSampler::new(&records, tc.p, tc.k, tc.seed)?;
    let mut model = Model::init(&cfg.encoder, &cfg.crossmodal, sampler.num_classes(), tc.seed)?;
    let inputs = load_inputs(&model, corpus, &records)?;
    let mut state = AdamState::default();
    let mut history = Vec::new();
    let mut step = 0;
    for epoch in 0..tc.epochs {
        let lr = lr_at(epoch, tc)?;
        for batch in sampler.epoch(epoch)? {
            let batch_inputs: Vec<&SampleInput> = batch.indices.iter().map(|&i| &inputs[i]).collect();
            let (losses, grads) = batch_loss(&model.store, &model.encoder, &model.crossmodal, &cfg.loss, &batch_inputs, &batch.labels, true)
                .map_err(|e| match e {
                    Error::Autodiff(e @ AutodiffError::NonFinite { .. }) => Error::NonFiniteLoss { step, detail: e.to_string() },
                    e => e,
                })?;
            adam_step(&mut model.store, &grads, &mut state, lr, tc.weight_decay)?;
            model.store.round_to_f32();
            if let Some((name, _)) = model.store.iter().find(|(_, p)| !p.value.is_finite()) {
                return Err(Error::NonFiniteLoss { step, detail: format!("parameter {name} became non-finite") });
            }
            let rec = LogRecord { step, losses, lr };
            let mut line = serde_json::to_vec(&rec)?;
            line.push(b'\n');
            log.write_all(&line).map_err(|e| Error::io("<train log>", e))?;
            history.push(rec);
            step += 1;
        }
    }
    log.flush().map_err(|e| Error::io("<train log>", e))?;
    Ok(TrainOutcome { model, log: history })
}

/// Train and write `train_log.jsonl`, `checkpoint/` and `config.json` under `out`.
pub fn train_to_dir(cfg: &Config, corpus: &Corpus, out: &Path) -> Result<TrainOutcome> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log_path = out.join(LOG_FILE);
    let file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let outcome = train(cfg, corpus, std::io::BufWriter::new(file))?;
    outcome.model.save(&out.join(CHECKPOINT_DIR))?;
    let cfg_path = out.join("config.json");
    fs::write(&cfg_path, cfg.to_json_pretty()? + "\n").map_err(|e| Error::io(&cfg_path, e))?;
    Ok(outcome)
}

/// Options of the finite-difference check.
#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub eps: f64,
    /// random per-scalar coordinates, in addition to one direction per tensor
    pub coords: usize,
    /// check every trainable scalar (slow beyond toy sizes)
    pub exhaustive: bool,
    pub batch_ids: usize,
    pub batch_k: usize,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { eps: 1e-6, coords: 512, exhaustive: false, batch_ids: 2, batch_k: 4 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub trainable_tensors: usize,
    pub trainable_scalars: usize,
    pub batch: usize,
    pub directional: FdReport,
    pub coordinates: FdReport,
    pub max_rel_error: f64,
}

/// Finite-difference check of the total loss on an in-memory batch
/// rendered from the data section (`batch_ids` identities x `batch_k`).
pub fn gradient_check(cfg: &Config, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    cfg.validate()?;
    let enc = &cfg.encoder;
    let data = synthdata::CorpusConfig { image_height: enc.image_height, image_width: enc.image_width, ..cfg.data.clone() };
    let vocab = synthdata::build_vocab(data.num_scenes);
    if vocab.len() > enc.vocab_size {
        return Err(Error::Config(format!("vocabulary of {} words exceeds encoder.vocab_size {}", vocab.len(), enc.vocab_size)));
    }
    let model = Model::init(enc, &cfg.crossmodal, opts.batch_ids.max(2), cfg.train.seed)?;
    let mut cache = HashMap::new();
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for pid in 0..opts.batch_ids {
        for j in 0..opts.batch_k {
            let r = synthdata::render_sample(&data, pid * data.images_per_id + j % data.images_per_id);
            let fg = vocab.tokenize(&synthdata::foreground_caption(r.pid), enc.max_text_len)?;
            let bg = vocab.tokenize(&synthdata::background_caption(r.scene, r.occluded), enc.max_text_len)?;
            inputs.push(model.prepare(patchify(&r.image, enc.patch, enc.stride)?, &fg, &bg, &mut cache)?);
            labels.push(pid);
        }
    }
    let refs: Vec<&SampleInput> = inputs.iter().collect();
    let loss_fn = |store: &ParamStore, want: bool| -> Result<(f64, BTreeMap<String, Tensor>)> {
        let (br, grads) = batch_loss(store, enc, &cfg.crossmodal, &cfg.loss, &refs, &labels, want)?;
        Ok((br.total, grads))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.train.seed, 0x6663));
    let directional = directional_check(loss_fn, &model.store, opts.eps, &mut rng)?;
    let names = model.store.trainable_names();
    let coordinates = if opts.exhaustive {
        finite_diff_check(loss_fn, &model.store, None, opts.eps)?
    } else {
        use rand::Rng;
        let mut coords = Vec::with_capacity(opts.coords);
        // every tensor at least once, then uniform over tensors
        for i in 0..opts.coords {
            let name = if i < names.len() { &names[i] } else { &names[rng.random_range(0..names.len())] };
            let n = model.store.get(name).expect("param").value.len();
            coords.push((name.clone(), rng.random_range(0..n)));
        }
        finite_diff_check(loss_fn, &model.store, Some(&coords), opts.eps)?
    };
    let trainable_scalars = names.iter().map(|n| model.store.get(n).expect("param").value.len()).sum();
    Ok(GradcheckReport {
        trainable_tensors: names.len(),
        trainable_scalars,
        batch: inputs.len(),
        max_rel_error: directional.max_rel_error.max(coordinates.max_rel_error),
        directional,
        coordinates,
    })
}
