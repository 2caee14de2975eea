//! Retrieval evaluation (mAP, CMC), foreground/background separation
//! statistics and attention-map export.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::{ForwardOptions, Model, SampleInput};
use crate::synthdata::{Corpus, SampleRecord};
use crate::trainer::load_inputs;

/// Retrieval embedding built from a sample's features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Composition {
    /// visual-encoder CLS only (no captions needed)
    Backbone,
    /// foreground visual-query CLS
    Cross,
    /// backbone ⊕ fg visual ⊕ fg text, each block normalized
    Concat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub composition: Composition,
    /// first images of every test identity (manifest order) used as queries
    pub queries_per_id: usize,
    /// worker threads for extraction and ranking; 0 = all cores
    pub threads: usize,
    /// checkpoint directory; empty means `<train.out>/checkpoint`
    pub checkpoint: String,
    /// also compute fg/bg separation statistics (needs background captions)
    pub separation: bool,
    /// seeds per configuration in `ablate`
    pub ablate_seeds: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            composition: Composition::Concat,
            queries_per_id: 2,
            threads: 1,
            checkpoint: String::new(),
            separation: true,
            ablate_seeds: 5,
        }
    }
}

/// Features of an evaluation split with identity/camera labels.
#[derive(Clone, Debug, PartialEq)]
pub struct GallerySet {
    /// one L2-normalized embedding per row
    pub features: Tensor,
    pub pids: Vec<usize>,
    /// -1 disables same-camera exclusion for that query
    pub camids: Vec<i64>,
    pub is_query: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    /// row of the query in the gallery set
    pub index: usize,
    pub ap: f64,
    /// 1-based rank of the first correct match
    pub first_hit: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    #[serde(rename = "mAP")]
    pub map: f64,
    /// CMC at ranks 1, 5, 10
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub num_queries: usize,
    pub num_gallery: usize,
    /// queries without any valid match
    pub skipped: usize,
    pub per_query: Vec<QueryResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationStats {
    pub intra_fg: f64,
    pub intra_bg: f64,
    pub inter: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub retrieval: Retrieval,
    pub separation: Option<SeparationStats>,
    pub composition: Composition,
    pub config: Config,
}

/// Per-sample features from one extraction pass.
#[derive(Clone, Debug)]
pub struct Extracted {
    pub embeddings: Tensor,
    pub fg_text: Option<Tensor>,
    pub fg_visual: Option<Tensor>,
    pub bg_text: Option<Tensor>,
    pub bg_visual: Option<Tensor>,
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Eval(format!("thread pool: {e}")))
}

fn l2_normalize(v: &mut [f64]) -> Result<()> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return Err(Error::Eval("zero embedding cannot be normalized".into()));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(())
}

fn stack(rows: Vec<Vec<f64>>) -> Tensor {
    let cols = rows[0].len();
    let n = rows.len();
    Tensor::matrix(n, cols, rows.into_iter().flatten().collect())
}

/// Forward every input and build its retrieval embedding.
///
/// Samples are independent, so the result does not depend on `threads`.
pub fn extract_features(
    model: &Model,
    inputs: &[SampleInput],
    composition: Composition,
    loss: &LossConfig,
    with_separation: bool,
    threads: usize,
) -> Result<Extracted> {
    if inputs.is_empty() {
        return Err(Error::Eval("no samples to extract".into()));
    }
    let cross = composition != Composition::Backbone || with_separation;
    let opts = ForwardOptions {
        cross_modal: cross,
        background: cross && (loss.mask || with_separation),
        mask: cross && loss.mask,
        inverted_mask: loss.inverted_mask,
    };
    type Row = (Vec<f64>, [Option<Vec<f64>>; 4]);
    let one = |input: &SampleInput| -> Result<Row> {
        let mut g = Graph::new();
        let f = model.forward(&mut g, input, opts)?;
        let get = |v: Option<crate::autodiff::Var>| v.map(|v| g.value(v).data().to_vec());
        let mut parts = match composition {
            Composition::Backbone => vec![get(Some(f.backbone)).expect("backbone")],
            Composition::Cross => vec![get(f.fg_visual).expect("cross features")],
            Composition::Concat => vec![
                get(Some(f.backbone)).expect("backbone"),
                get(f.fg_visual).expect("cross features"),
                get(f.fg_text).expect("cross features"),
            ],
        };
        for p in &mut parts {
            l2_normalize(p)?;
        }
        let mut emb: Vec<f64> = parts.concat();
        l2_normalize(&mut emb)?;
        Ok((emb, [get(f.fg_text), get(f.fg_visual), get(f.bg_text), get(f.bg_visual)]))
    };
    let rows: Vec<Row> = pool(threads)?.install(|| inputs.par_iter().map(one).collect::<Result<Vec<_>>>())?;
    let mut emb = Vec::with_capacity(rows.len());
    let mut cols: [Vec<Vec<f64>>; 4] = Default::default();
    for (e, extra) in rows {
        emb.push(e);
        for (c, x) in cols.iter_mut().zip(extra) {
            if let Some(x) = x {
                c.push(x);
            }
        }
    }
    let n = emb.len();
    let [ft, fv, bt, bv] = cols.map(|c| (c.len() == n).then(|| stack(c)));
    Ok(Extracted { embeddings: stack(emb), fg_text: ft, fg_visual: fv, bg_text: bt, bg_visual: bv })
}

/// Mark the first `per_id` records of every identity as queries.
pub fn split_queries(records: &[SampleRecord], per_id: usize) -> Vec<bool> {
    let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
    records
        .iter()
        .map(|r| {
            let c = seen.entry(r.pid).or_default();
            *c += 1;
            *c <= per_id
        })
        .collect()
}

fn query_result(gallery: &GallerySet, gal: &[usize], q: usize) -> Option<QueryResult> {
    let f = &gallery.features;
    let qrow = f.row(q);
    let (qpid, qcam) = (gallery.pids[q], gallery.camids[q]);
    let mut ranked: Vec<(f64, usize)> = gal
        .iter()
        .filter(|&&j| !(qcam >= 0 && gallery.pids[j] == qpid && gallery.camids[j] == qcam))
        .map(|&j| {
            let dot: f64 = qrow.iter().zip(f.row(j)).map(|(a, b)| a * b).sum();
            (1.0 - dot, j)
        })
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    let mut first_hit = 0;
    for (r, &(_, j)) in ranked.iter().enumerate() {
        if gallery.pids[j] == qpid {
            hits += 1;
            precision_sum += hits as f64 / (r + 1) as f64;
            if first_hit == 0 {
                first_hit = r + 1;
            }
        }
    }
    (hits > 0).then(|| QueryResult { index: q, ap: precision_sum / hits as f64, first_hit })
}

/// Cosine ranking of the gallery for every query with cross-camera
/// exclusion, averaged into mAP and CMC@{1,5,10}.
pub fn map_cmc(gallery: &GallerySet, threads: usize) -> Result<Retrieval> {
    let n = gallery.features.rows();
    if gallery.pids.len() != n || gallery.camids.len() != n || gallery.is_query.len() != n {
        return Err(Error::Eval("gallery labels do not match feature rows".into()));
    }
    let queries: Vec<usize> = (0..n).filter(|&i| gallery.is_query[i]).collect();
    let gal: Vec<usize> = (0..n).filter(|&i| !gallery.is_query[i]).collect();
    if queries.is_empty() {
        return Err(Error::Eval("empty query set".into()));
    }
    let results: Vec<Option<QueryResult>> =
        pool(threads)?.install(|| queries.par_iter().map(|&q| query_result(gallery, &gal, q)).collect());
    let per_query: Vec<QueryResult> = results.into_iter().flatten().collect();
    let skipped = queries.len() - per_query.len();
    if per_query.is_empty() {
        return Err(Error::Eval("no query has a valid gallery match".into()));
    }
    let valid = per_query.len() as f64;
    let cmc = |k: usize| per_query.iter().filter(|r| r.first_hit <= k).count() as f64 / valid;
    Ok(Retrieval {
        map: per_query.iter().map(|r| r.ap).sum::<f64>() / valid,
        rank1: cmc(1),
        rank5: cmc(5),
        rank10: cmc(10),
        num_queries: queries.len(),
        num_gallery: gal.len(),
        skipped,
        per_query,
    })
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Eval("zero feature vector in separation statistics".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Mean cosine of (fg text, fg visual), (bg text, bg visual) and of every
/// fg feature against every bg feature of the same sample.
pub fn separation_stats(ft: &Tensor, fv: &Tensor, bt: &Tensor, bv: &Tensor) -> Result<SeparationStats> {
    let n = ft.rows();
    if n < 2 || [fv, bt, bv].iter().any(|t| t.rows() != n || t.cols() != ft.cols()) {
        return Err(Error::Eval(format!("separation statistics need >= 2 aligned samples, got {n}")));
    }
    let (mut intra_fg, mut intra_bg, mut inter) = (0.0, 0.0, 0.0);
    for i in 0..n {
        intra_fg += cosine(ft.row(i), fv.row(i))?;
        intra_bg += cosine(bt.row(i), bv.row(i))?;
        let mut s = 0.0;
        for f in [ft.row(i), fv.row(i)] {
            for b in [bt.row(i), bv.row(i)] {
                s += cosine(f, b)?;
            }
        }
        inter += s / 4.0;
    }
    let n = n as f64;
    Ok(SeparationStats { intra_fg: intra_fg / n, intra_bg: intra_bg / n, inter: inter / n })
}

pub fn checkpoint_dir(cfg: &Config) -> std::path::PathBuf {
    if cfg.eval.checkpoint.is_empty() {
        Path::new(&cfg.train.out).join(crate::trainer::CHECKPOINT_DIR)
    } else {
        Path::new(&cfg.eval.checkpoint).into()
    }
}

/// Evaluate `model` on identities `>= data.train_ids` of `corpus`.
pub fn evaluate(cfg: &Config, model: &Model, corpus: &Corpus) -> Result<(EvalReport, GallerySet)> {
    let records = corpus.test_records(cfg.data.train_ids);
    if records.is_empty() {
        return Err(Error::Eval(format!("no test identities (>= {}) in the manifest", cfg.data.train_ids)));
    }
    let inputs = load_inputs(model, corpus, &records)?;
    evaluate_inputs(cfg, model, &records, &inputs)
}

pub fn evaluate_inputs(cfg: &Config, model: &Model, records: &[SampleRecord], inputs: &[SampleInput]) -> Result<(EvalReport, GallerySet)> {
    let ec = &cfg.eval;
    let ex = extract_features(model, inputs, ec.composition, &cfg.loss, ec.separation, ec.threads)?;
    let gallery = GallerySet {
        features: ex.embeddings.clone(),
        pids: records.iter().map(|r| r.pid).collect(),
        camids: records.iter().map(|r| r.camid).collect(),
        is_query: split_queries(records, ec.queries_per_id),
    };
    let retrieval = map_cmc(&gallery, ec.threads)?;
    let separation = match (&ex.fg_text, &ex.fg_visual, &ex.bg_text, &ex.bg_visual) {
        (Some(ft), Some(fv), Some(bt), Some(bv)) if ec.separation => Some(separation_stats(ft, fv, bt, bv)?),
        _ => None,
    };
    Ok((EvalReport { retrieval, separation, composition: ec.composition, config: cfg.clone() }, gallery))
}

/// Attention maps and derived quantities for one image.
#[derive(Clone, Debug)]
pub struct AttentionExport {
    /// N x M
    pub w_fg: Tensor,
    pub w_bg: Tensor,
    /// 1 x M
    pub similarity: Tensor,
    pub mask: Tensor,
    /// patch grid rows x cols, row sums of `w_fg`
    pub saliency: Tensor,
}

pub fn attention_maps(model: &Model, input: &SampleInput, loss: &LossConfig) -> Result<AttentionExport> {
    let opts = ForwardOptions { cross_modal: true, background: true, mask: true, inverted_mask: loss.inverted_mask };
    let mut g = Graph::new();
    let f = model.forward(&mut g, input, opts)?;
    let w_fg = g.value(f.w_fg.expect("fg map")).clone();
    let pooled = f.pooled.expect("mask requested");
    let (gr, gc) = model.encoder.grid();
    let sal: Vec<f64> = (0..w_fg.rows()).map(|r| w_fg.row(r).iter().sum()).collect();
    Ok(AttentionExport {
        w_bg: g.value(f.w_bg.expect("bg map")).clone(),
        similarity: g.value(pooled.similarity).clone(),
        mask: g.value(pooled.mask).clone(),
        saliency: Tensor::matrix(gr, gc, sal),
        w_fg,
    })
}

/// CSV with a header row of column indices.
pub fn to_csv(t: &Tensor) -> String {
    let header: Vec<String> = (0..t.cols()).map(|j| j.to_string()).collect();
    let mut out = header.join(",");
    out.push('\n');
    for r in 0..t.rows() {
        let row: Vec<String> = t.row(r).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Write `W_f.csv`, `W_b.csv`, `s.csv`, `m.csv` and `saliency.csv` into `dir`.
pub fn attn_export(model: &Model, input: &SampleInput, loss: &LossConfig, dir: &Path) -> Result<AttentionExport> {
    let ex = attention_maps(model, input, loss)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, t) in [("W_f", &ex.w_fg), ("W_b", &ex.w_bg), ("s", &ex.similarity), ("m", &ex.mask), ("saliency", &ex.saliency)] {
        let path = dir.join(format!("{name}.csv"));
        fs::write(&path, to_csv(t)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(ex)
}
