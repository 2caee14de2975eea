//! Dual-branch cross-modal attention.
//!
//! One cross-attention weight set and one self-attention stack serve all
//! four paths: (visual query, fg text), (fg text query, visual),
//! (visual query, bg text), (bg text query, visual).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrossModalConfig {
    pub heads: usize,
    /// depth of the shared self-attention + feed-forward stack
    pub stack_layers: usize,
}

impl Default for CrossModalConfig {
    fn default() -> Self {
        Self { heads: 4, stack_layers: 4 }
    }
}

pub const CROSS_PREFIX: &str = "cross.";
pub const STACK_PREFIX: &str = "stack.";

pub fn init_crossmodal<G: Rng>(store: &mut ParamStore, rng: &mut G, cfg: &CrossModalConfig, dim: usize, ffn_dim: usize) {
    nn::init_layer_norm(store, "cross.ln_q", dim, true);
    nn::init_layer_norm(store, "cross.ln_kv", dim, true);
    nn::init_attention(store, rng, "cross.attn", dim, true);
    for i in 0..cfg.stack_layers {
        nn::init_block(store, rng, &format!("stack.block{i}"), dim, ffn_dim, true);
    }
    nn::init_layer_norm(store, "stack.ln_f", dim, true);
}

/// Scalar count of one cross-attention block and one self-attention stack.
pub fn expected_census(cfg: &CrossModalConfig, dim: usize, ffn_dim: usize) -> (usize, usize) {
    let ln = 2 * dim;
    let attn = 4 * (dim * dim + dim);
    let cross = 2 * ln + attn;
    let block = 2 * ln + attn + (dim * ffn_dim + ffn_dim) + (ffn_dim * dim + dim);
    (cross, cfg.stack_layers * block + ln)
}

/// Pre-norm cross-attention with residual: `query + MHA(LN(query), LN(kv))`.
///
/// Returns the fused sequence and the head-averaged |query| x |kv| attention map.
pub fn cross_attention(g: &mut Graph, store: &ParamStore, cfg: &CrossModalConfig, query: Var, kv: Var) -> Result<(Var, Var)> {
    if g.value(query).cols() != g.value(kv).cols() {
        return Err(Error::Data(format!(
            "cross-attention width mismatch: query {}, key/value {}",
            g.value(query).cols(),
            g.value(kv).cols()
        )));
    }
    let q = nn::layer_norm(g, store, "cross.ln_q", query)?;
    let k = nn::layer_norm(g, store, "cross.ln_kv", kv)?;
    let (a, map) = nn::attention(g, store, "cross.attn", q, k, cfg.heads, true)?;
    let fused = g.add(query, a)?;
    Ok((fused, map.expect("attention map requested")))
}

/// Cross-attention followed by the shared stack.
pub fn path_forward(g: &mut Graph, store: &ParamStore, cfg: &CrossModalConfig, query: Var, kv: Var) -> Result<(Var, Var)> {
    let (mut h, map) = cross_attention(g, store, cfg, query, kv)?;
    for i in 0..cfg.stack_layers {
        h = nn::block(g, store, &format!("stack.block{i}"), h, cfg.heads)?;
    }
    Ok((nn::layer_norm(g, store, "stack.ln_f", h)?, map))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GlobalToken {
    /// first slot, visual-query paths
    Cls,
    /// last slot, text-query paths
    Eos,
}

pub fn select_global(g: &mut Graph, seq: Var, kind: GlobalToken) -> Result<Var> {
    let n = g.value(seq).rows();
    if g.value(seq).is_empty() || n == 0 {
        return Err(Error::Data("select_global on empty sequence".into()));
    }
    let i = match kind {
        GlobalToken::Cls => 0,
        GlobalToken::Eos => n - 1,
    };
    Ok(g.slice_rows(seq, i, i + 1)?)
}

/// Outputs of one semantic branch (foreground or background).
#[derive(Clone, Copy, Debug)]
pub struct BranchOutput {
    /// EOS of the text-query path (F^T)
    pub text_global: Var,
    /// CLS of the visual-query path (F^V)
    pub visual_global: Var,
    /// patch rows x real-token columns of the visual-query attention map (N x M)
    pub attn: Var,
    /// the M real-token outputs of the text-query path
    pub text_tokens: Var,
}

/// Run both paths of one branch. `visual` is `[CLS, v1..vN]`, `text` is
/// `[SOS, t1..tM, EOS]`, both already d_v wide.
pub fn branch_forward(g: &mut Graph, store: &ParamStore, cfg: &CrossModalConfig, visual: Var, text: Var) -> Result<BranchOutput> {
    let n = g.value(visual).rows();
    let t = g.value(text).rows();
    if n < 2 || t < 3 {
        return Err(Error::Data(format!("branch needs >= 1 patch and >= 1 token, got {} and {}", n.saturating_sub(1), t.saturating_sub(2))));
    }
    let (v_out, v_map) = path_forward(g, store, cfg, visual, text)?;
    let (t_out, _) = path_forward(g, store, cfg, text, visual)?;
    let rows = g.slice_rows(v_map, 1, n)?;
    let attn = g.slice_cols(rows, 1, t - 1)?;
    Ok(BranchOutput {
        text_global: select_global(g, t_out, GlobalToken::Eos)?,
        visual_global: select_global(g, v_out, GlobalToken::Cls)?,
        attn,
        text_tokens: g.slice_rows(t_out, 1, t - 1)?,
    })
}

/// The four global features, both attention maps and the foreground text-query tokens.
#[derive(Clone, Copy, Debug)]
pub struct CrossModalOutput {
    pub f_fg_text: Var,
    pub f_fg_visual: Var,
    pub f_bg_text: Var,
    pub f_bg_visual: Var,
    pub w_fg: Var,
    pub w_bg: Var,
    pub fg_text_tokens: Var,
}

pub fn dual_branch_forward(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &CrossModalConfig,
    v_fg: Var,
    t_fg: Var,
    v_bg: Var,
    t_bg: Var,
) -> Result<CrossModalOutput> {
    let fg = branch_forward(g, store, cfg, v_fg, t_fg)?;
    let bg = branch_forward(g, store, cfg, v_bg, t_bg)?;
    Ok(CrossModalOutput {
        f_fg_text: fg.text_global,
        f_fg_visual: fg.visual_global,
        f_bg_text: bg.text_global,
        f_bg_visual: bg.visual_global,
        w_fg: fg.attn,
        w_bg: bg.attn,
        fg_text_tokens: fg.text_tokens,
    })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{finite_diff_check, Tensor};

    fn setup(dim: usize, layers: usize, seed: u64) -> (ParamStore, CrossModalConfig) {
        let cfg = CrossModalConfig { heads: 2, stack_layers: layers };
        let mut store = ParamStore::new();
        init_crossmodal(&mut store, &mut ChaCha8Rng::seed_from_u64(seed), &cfg, dim, 2 * dim);
        (store, cfg)
    }

    fn rand_seq(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn identical_keys_split_attention_evenly() {
        let (store, cfg) = setup(4, 0, 0);
        let mut g = Graph::new();
        let q = g.constant(Tensor::matrix(1, 4, vec![0.3, -0.2, 0.9, 0.1])).unwrap();
        let kv = g.constant(Tensor::matrix(2, 4, vec![1.0, 2.0, -1.0, 0.5, 1.0, 2.0, -1.0, 0.5])).unwrap();
        let (_, map) = cross_attention(&mut g, &store, &cfg, q, kv).unwrap();
        let w = g.value(map).data();
        assert!((w[0] - 0.5).abs() < 1e-12 && (w[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (store, cfg) = setup(8, 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let q = g.constant(rand_seq(&mut rng, 5, 8)).unwrap();
        let kv = g.constant(rand_seq(&mut rng, 7, 8)).unwrap();
        let (_, map) = cross_attention(&mut g, &store, &cfg, q, kv).unwrap();
        let m = g.value(map);
        assert_eq!(m.shape(), &[5, 7]);
        for r in 0..5 {
            assert!((m.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let bad = g.constant(rand_seq(&mut rng, 3, 4)).unwrap();
        assert!(cross_attention(&mut g, &store, &cfg, q, bad).is_err());
    }

    #[test]
    fn fd_through_attention() {
        let (store, cfg) = setup(4, 1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (qv, kvv) = (rand_seq(&mut rng, 3, 4), rand_seq(&mut rng, 5, 4));
        let loss = |s: &ParamStore, _: bool| -> Result<(f64, BTreeMap<String, Tensor>)> {
            let mut g = Graph::new();
            let q = g.constant(qv.clone())?;
            let kv = g.constant(kvv.clone())?;
            let (out, map) = path_forward(&mut g, s, &cfg, q, kv)?;
            let a = g.mean(out)?;
            let m2 = g.mul(map, map)?;
            let b = g.sum(m2)?;
            let l = g.add(a, b)?;
            g.backward(l)?;
            Ok((g.value(l).item(), g.param_grads()))
        };
        let rep = finite_diff_check(loss, &store, None, 1e-6).unwrap();
        assert!(rep.max_rel_error <= 1e-4, "{rep:?}");
    }

    #[test]
    fn globals_pick_first_and_last_slots() {
        let mut g = Graph::new();
        let seq = g.constant(Tensor::matrix(9, 2, (0..18).map(|i| i as f64).collect())).unwrap();
        let cls = select_global(&mut g, seq, GlobalToken::Cls).unwrap();
        assert_eq!(g.value(cls).data(), &[0.0, 1.0]);
        let t = g.constant(Tensor::matrix(7, 2, (0..14).map(|i| i as f64).collect())).unwrap();
        let eos = select_global(&mut g, t, GlobalToken::Eos).unwrap();
        assert_eq!(g.value(eos).data(), &[12.0, 13.0]);
    }

    #[test]
    fn census_counts_one_block_and_one_stack() {
        let (store, cfg) = setup(8, 4, 0);
        let (cross, stack) = expected_census(&cfg, 8, 16);
        assert_eq!(store.scalar_count(CROSS_PREFIX), cross);
        assert_eq!(store.scalar_count(STACK_PREFIX), stack);
        assert_eq!(store.len(), 2 + 2 + 8 + 4 * 16 + 2);
    }

    #[test]
    fn branch_swap_is_exact() {
        let (store, cfg) = setup(8, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (vf, tf, vb, tb) = (rand_seq(&mut rng, 9, 8), rand_seq(&mut rng, 7, 8), rand_seq(&mut rng, 9, 8), rand_seq(&mut rng, 5, 8));
        let run = |a: &Tensor, b: &Tensor, c: &Tensor, d: &Tensor| {
            let mut g = Graph::new();
            let (a, b, c, d) = (g.constant(a.clone()).unwrap(), g.constant(b.clone()).unwrap(), g.constant(c.clone()).unwrap(), g.constant(d.clone()).unwrap());
            let o = dual_branch_forward(&mut g, &store, &cfg, a, b, c, d).unwrap();
            [o.f_fg_text, o.f_fg_visual, o.f_bg_text, o.f_bg_visual, o.w_fg, o.w_bg].map(|v| g.value(v).clone())
        };
        let x = run(&vf, &tf, &vb, &tb);
        let y = run(&vb, &tb, &vf, &tf);
        assert_eq!(x[0], y[2]);
        assert_eq!(x[1], y[3]);
        assert_eq!(x[4], y[5]);
        assert_eq!(x[4].shape(), &[8, 5]);
        assert_eq!(x[5].shape(), &[8, 3]);
        let same = run(&vf, &tf, &vf, &tf);
        assert_eq!(same[0], same[2]);
        assert_eq!(same[1], same[3]);
        assert_eq!(same[4], same[5]);
    }
}
