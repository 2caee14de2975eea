//! Transformer building blocks over [`Graph`] with named parameters.

use rand::Rng;

use crate::autodiff::{AutodiffError, Graph, ParamStore, Var};

type R<T> = Result<T, AutodiffError>;

pub fn init_linear<G: Rng>(store: &mut ParamStore, rng: &mut G, prefix: &str, fan_in: usize, fan_out: usize, trainable: bool) {
    store.insert_normal(rng, &format!("{prefix}.w"), fan_in, fan_out, (1.0 / fan_in as f64).sqrt(), trainable);
    store.insert_filled(&format!("{prefix}.b"), 1, fan_out, 0.0, trainable);
}

pub fn linear(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> R<Var> {
    let w = g.param(store, &format!("{prefix}.w"))?;
    let b = g.param(store, &format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize, trainable: bool) {
    store.insert_filled(&format!("{prefix}.gamma"), 1, dim, 1.0, trainable);
    store.insert_filled(&format!("{prefix}.beta"), 1, dim, 0.0, trainable);
}

pub fn layer_norm(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> R<Var> {
    let gamma = g.param(store, &format!("{prefix}.gamma"))?;
    let beta = g.param(store, &format!("{prefix}.beta"))?;
    g.layer_norm(x, gamma, beta)
}

pub fn init_attention<G: Rng>(store: &mut ParamStore, rng: &mut G, prefix: &str, dim: usize, trainable: bool) {
    for p in ["q", "k", "v", "o"] {
        init_linear(store, rng, &format!("{prefix}.{p}"), dim, dim, trainable);
    }
}

/// Multi-head scaled dot-product attention (no residual).
///
/// Returns the projected output and, when `want_map`, the head-averaged
/// post-softmax attention matrix (|query| x |kv|).
pub fn attention(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    query: Var,
    kv: Var,
    heads: usize,
    want_map: bool,
) -> R<(Var, Option<Var>)> {
    let dim = g.value(query).cols();
    if g.value(kv).cols() != dim {
        return Err(AutodiffError::Shape {
            op: "attention",
            detail: format!("query width {dim}, key/value width {}", g.value(kv).cols()),
        });
    }
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(AutodiffError::Shape { op: "attention", detail: format!("width {dim} not divisible by {heads} heads") });
    }
    let q = linear(g, store, &format!("{prefix}.q"), query)?;
    let k = linear(g, store, &format!("{prefix}.k"), kv)?;
    let v = linear(g, store, &format!("{prefix}.v"), kv)?;
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut map: Option<Var> = None;
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, (h + 1) * dh)?,
                g.slice_cols(k, h * dh, (h + 1) * dh)?,
                g.slice_cols(v, h * dh, (h + 1) * dh)?,
            )
        };
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale)?;
        let a = g.softmax(scores)?;
        if want_map {
            map = Some(match map {
                None => a,
                Some(m) => g.add(m, a)?,
            });
        }
        outs.push(g.matmul(a, vh)?);
    }
    let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    let out = linear(g, store, &format!("{prefix}.o"), cat)?;
    let map = match map {
        Some(m) if heads > 1 => Some(g.scale(m, 1.0 / heads as f64)?),
        m => m,
    };
    Ok((out, map))
}

pub fn init_block<G: Rng>(store: &mut ParamStore, rng: &mut G, prefix: &str, dim: usize, ffn_dim: usize, trainable: bool) {
    init_layer_norm(store, &format!("{prefix}.ln1"), dim, trainable);
    init_attention(store, rng, &format!("{prefix}.attn"), dim, trainable);
    init_layer_norm(store, &format!("{prefix}.ln2"), dim, trainable);
    init_linear(store, rng, &format!("{prefix}.ffn1"), dim, ffn_dim, trainable);
    init_linear(store, rng, &format!("{prefix}.ffn2"), ffn_dim, dim, trainable);
}

/// Pre-norm self-attention + feed-forward block with residuals.
pub fn block(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var, heads: usize) -> R<Var> {
    let h = layer_norm(g, store, &format!("{prefix}.ln1"), x)?;
    let (a, _) = attention(g, store, &format!("{prefix}.attn"), h, h, heads, false)?;
    let x = g.add(x, a)?;
    let h = layer_norm(g, store, &format!("{prefix}.ln2"), x)?;
    let h = linear(g, store, &format!("{prefix}.ffn1"), h)?;
    let h = g.gelu(h)?;
    let h = linear(g, store, &format!("{prefix}.ffn2"), h)?;
    g.add(x, h)
}
