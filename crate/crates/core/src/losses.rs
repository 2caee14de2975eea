//! Identity, triplet and foreground/background diversity objectives.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mining {
    /// hardest positive and hardest negative per anchor
    BatchHard,
    /// every valid (anchor, positive, negative)
    AllValid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub margin: f64,
    pub lambda: f64,
    pub mining: Mining,
    /// ID + triplet terms on the foreground cross-modal features
    pub cross_modal: bool,
    /// differential pooling feeds the foreground text feature
    pub mask: bool,
    /// pool with `1 - m` instead of `m`
    pub inverted_mask: bool,
    /// with lambda = 0, still run the background branch so the diversity
    /// terms can be logged (they never reach the gradient)
    pub log_div: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 0.3,
            lambda: 0.5,
            mining: Mining::BatchHard,
            cross_modal: true,
            mask: true,
            inverted_mask: false,
            log_div: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("loss: margin {} and lambda {} must be >= 0", self.margin, self.lambda)));
        }
        Ok(())
    }

    /// Whether the background branch must be run during training.
    pub fn needs_background(&self) -> bool {
        self.mask || self.lambda > 0.0 || (self.cross_modal && self.log_div)
    }

    /// Whether the cross-modal module runs at all during training.
    pub fn needs_cross_modal(&self) -> bool {
        self.cross_modal || self.mask || self.lambda > 0.0
    }
}

/// Mean softmax cross-entropy.
pub fn id_loss(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    Ok(g.cross_entropy(logits, labels)?)
}

/// Mean of `max(d(a,p) - d(a,n) + margin, 0)` with squared Euclidean `d`.
pub fn triplet_loss(g: &mut Graph, features: Var, labels: &[usize], margin: f64, mining: Mining) -> Result<Var> {
    let b = g.value(features).rows();
    if labels.len() != b {
        return Err(Error::Data(format!("{b} features, {} labels", labels.len())));
    }
    let dist = g.pairwise_sq_dist(features)?;
    let d = g.value(dist).clone();
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    match mining {
        Mining::BatchHard => {
            for a in 0..b {
                let hardest_pos = (0..b)
                    .filter(|&p| p != a && labels[p] == labels[a])
                    .fold(None, |best: Option<usize>, p| match best {
                        Some(q) if d.at(a, q) >= d.at(a, p) => Some(q),
                        _ => Some(p),
                    });
                let hardest_neg = (0..b)
                    .filter(|&n| labels[n] != labels[a])
                    .fold(None, |best: Option<usize>, n| match best {
                        Some(q) if d.at(a, q) <= d.at(a, n) => Some(q),
                        _ => Some(n),
                    });
                if let (Some(p), Some(n)) = (hardest_pos, hardest_neg) {
                    pos.push((a, p));
                    neg.push((a, n));
                }
            }
        }
        Mining::AllValid => {
            for a in 0..b {
                for p in (0..b).filter(|&p| p != a && labels[p] == labels[a]) {
                    for n in (0..b).filter(|&n| labels[n] != labels[a]) {
                        pos.push((a, p));
                        neg.push((a, n));
                    }
                }
            }
        }
    }
    if pos.is_empty() {
        return Err(Error::Data("batch admits no valid triplet".into()));
    }
    let dp = g.gather(dist, &pos)?;
    let dn = g.gather(dist, &neg)?;
    let diff = g.sub(dp, dn)?;
    let shifted = g.offset(diff, margin)?;
    let hinge = g.relu(shifted)?;
    Ok(g.mean(hinge)?)
}

fn check_same(g: &Graph, vars: &[Var]) -> Result<()> {
    let s = g.value(vars[0]).shape();
    if vars.iter().any(|&v| g.value(v).shape() != s) {
        return Err(Error::Data("diversity inputs differ in shape".into()));
    }
    Ok(())
}

/// Batch mean of the sum over the four (positive pair | two negatives) tuples
/// `{(fT,fV|bT,bV), (bT,bV|fT,fV), (fV,fT|bT,bV), (bV,bT|fT,fV)}`; each tuple
/// contributes `0.5 * [hinge(d(a,b) - d(a,c) + m) + hinge(d(a,b) - d(a,d) + m)]`.
pub fn tri_div_loss(g: &mut Graph, fg_text: Var, fg_visual: Var, bg_text: Var, bg_visual: Var, margin: f64) -> Result<Var> {
    check_same(g, &[fg_text, fg_visual, bg_text, bg_visual])?;
    let tuples = [
        (fg_text, fg_visual, bg_text, bg_visual),
        (bg_text, bg_visual, fg_text, fg_visual),
        (fg_visual, fg_text, bg_text, bg_visual),
        (bg_visual, bg_text, fg_text, fg_visual),
    ];
    let mut total: Option<Var> = None;
    for (a, p, n1, n2) in tuples {
        let dp = g.sq_dist_rows(a, p)?;
        let mut term: Option<Var> = None;
        for n in [n1, n2] {
            let dn = g.sq_dist_rows(a, n)?;
            let diff = g.sub(dp, dn)?;
            let shifted = g.offset(diff, margin)?;
            let h = g.relu(shifted)?;
            term = Some(match term {
                None => h,
                Some(t) => g.add(t, h)?,
            });
        }
        let half = g.scale(term.expect("two negatives"), 0.5)?;
        total = Some(match total {
            None => half,
            Some(t) => g.add(t, half)?,
        });
    }
    Ok(g.mean(total.expect("four tuples"))?)
}

/// Batch mean of `(1 - cos(fT, fV)) + (1 - cos(bT, bV))`.
pub fn con_loss(g: &mut Graph, fg_text: Var, fg_visual: Var, bg_text: Var, bg_visual: Var) -> Result<Var> {
    check_same(g, &[fg_text, fg_visual, bg_text, bg_visual])?;
    let zero_err = |e: crate::autodiff::AutodiffError| match e {
        crate::autodiff::AutodiffError::ZeroNorm { row, .. } => Error::Data(format!("zero feature vector in sample {row}")),
        e => e.into(),
    };
    let cf = g.cosine_rows(fg_text, fg_visual).map_err(zero_err)?;
    let cb = g.cosine_rows(bg_text, bg_visual).map_err(zero_err)?;
    let s = g.add(cf, cb)?;
    let neg = g.scale(s, -1.0)?;
    let per = g.offset(neg, 2.0)?;
    Ok(g.mean(per)?)
}

pub fn div_loss(g: &mut Graph, tri_div: Var, con: Var) -> Result<Var> {
    Ok(g.add(tri_div, con)?)
}

/// Per-sample features and classifier logits for one batch.
#[derive(Clone, Debug)]
pub struct FeatureBundle {
    pub labels: Vec<usize>,
    pub backbone: Var,
    pub backbone_logits: Var,
    /// foreground text feature (already combined with the pooled feature when masking)
    pub fg_text: Option<Var>,
    pub fg_visual: Option<Var>,
    pub fg_text_logits: Option<Var>,
    pub fg_visual_logits: Option<Var>,
    pub bg_text: Option<Var>,
    pub bg_visual: Option<Var>,
}

/// Scalar value of every loss term; `None` where a term was not computed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "L_ID")]
    pub id: f64,
    #[serde(rename = "L_Tri")]
    pub tri: f64,
    #[serde(rename = "L_ID_C")]
    pub id_c: Option<f64>,
    #[serde(rename = "L_Tri_C")]
    pub tri_c: Option<f64>,
    #[serde(rename = "L_tridiv")]
    pub tri_div: Option<f64>,
    #[serde(rename = "L_con")]
    pub con: Option<f64>,
    pub total: f64,
}

/// `L_ID + L_Tri + L_ID^C + L_Tri^C + lambda * L_div`.
///
/// The cross-modal terms sum over the fg-text and fg-visual streams. With
/// `lambda == 0` the diversity terms are still evaluated when background
/// features are present, but are left out of the returned graph node.
pub fn total_loss(g: &mut Graph, bundle: &FeatureBundle, cfg: &LossConfig) -> Result<(Var, LossBreakdown)> {
    let labels = &bundle.labels;
    let l_id = id_loss(g, bundle.backbone_logits, labels)?;
    let l_tri = triplet_loss(g, bundle.backbone, labels, cfg.margin, cfg.mining)?;
    let mut total = g.add(l_id, l_tri)?;
    let mut br = LossBreakdown { id: g.value(l_id).item(), tri: g.value(l_tri).item(), ..Default::default() };

    if cfg.cross_modal {
        let missing = || Error::Data("cross-modal loss enabled but cross-modal features missing".into());
        let (ft, fv) = (bundle.fg_text.ok_or_else(missing)?, bundle.fg_visual.ok_or_else(missing)?);
        let (lt, lv) = (bundle.fg_text_logits.ok_or_else(missing)?, bundle.fg_visual_logits.ok_or_else(missing)?);
        let id_t = id_loss(g, lt, labels)?;
        let id_v = id_loss(g, lv, labels)?;
        let id_c = g.add(id_t, id_v)?;
        let tri_t = triplet_loss(g, ft, labels, cfg.margin, cfg.mining)?;
        let tri_v = triplet_loss(g, fv, labels, cfg.margin, cfg.mining)?;
        let tri_c = g.add(tri_t, tri_v)?;
        br.id_c = Some(g.value(id_c).item());
        br.tri_c = Some(g.value(tri_c).item());
        total = g.add(total, id_c)?;
        total = g.add(total, tri_c)?;
    }

    if let (Some(ft), Some(fv), Some(bt), Some(bv)) = (bundle.fg_text, bundle.fg_visual, bundle.bg_text, bundle.bg_visual) {
        let td = tri_div_loss(g, ft, fv, bt, bv, cfg.margin)?;
        let con = con_loss(g, ft, fv, bt, bv)?;
        br.tri_div = Some(g.value(td).item());
        br.con = Some(g.value(con).item());
        if cfg.lambda > 0.0 {
            let div = div_loss(g, td, con)?;
            let weighted = g.scale(div, cfg.lambda)?;
            total = g.add(total, weighted)?;
        }
    } else if cfg.lambda > 0.0 {
        return Err(Error::Data("diversity loss enabled but background features missing".into()));
    }
    br.total = g.value(total).item();
    Ok((total, br))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::Tensor;

    fn mat(g: &mut Graph, rows: Vec<Vec<f64>>) -> Var {
        let c = rows[0].len();
        let r = rows.len();
        g.constant(Tensor::matrix(r, c, rows.into_iter().flatten().collect())).unwrap()
    }

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Vec<Vec<f64>> {
        (0..r).map(|_| (0..c).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    fn sqd(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    }

    #[test]
    fn id_loss_closed_forms() {
        let mut g = Graph::new();
        let perfect = mat(&mut g, vec![vec![0.0, 800.0, 0.0]]);
        let l = id_loss(&mut g, perfect, &[1]).unwrap();
        assert!(g.value(l).item().abs() < 1e-12);
        let uniform = mat(&mut g, vec![vec![0.7; 4], vec![-2.0; 4]]);
        let l = id_loss(&mut g, uniform, &[0, 3]).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);
        assert!(id_loss(&mut g, uniform, &[0, 4]).is_err());
    }

    #[test]
    fn id_loss_matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = rand_mat(&mut rng, 6, 5);
        let labels: Vec<usize> = (0..6).map(|i| (i * 3) % 5).collect();
        let oracle: f64 = logits
            .iter()
            .zip(&labels)
            .map(|(row, &y)| {
                let z: f64 = row.iter().map(|v| v.exp()).sum();
                -(row[y].exp() / z).ln()
            })
            .sum::<f64>()
            / 6.0;
        let mut g = Graph::new();
        let x = mat(&mut g, logits);
        let l = id_loss(&mut g, x, &labels).unwrap();
        assert!((g.value(l).item() - oracle).abs() < 1e-6);
    }

    #[test]
    fn triplet_examples() {
        let mut g = Graph::new();
        // anchor, positive, negative (two ids)
        let f = mat(&mut g, vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 2.0]]);
        let l = triplet_loss(&mut g, f, &[0, 0, 1], 0.3, Mining::AllValid).unwrap();
        // anchor 0: max(1-4+0.3,0)=0; anchor 1: d(1,0)=1, d(1,2)=5 -> 0
        assert_eq!(g.value(l).item(), 0.0);

        let f = mat(&mut g, vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![1.0, 0.0]]);
        let dist = g.pairwise_sq_dist(f).unwrap();
        let dp = g.gather(dist, &[(0, 1)]).unwrap();
        let dn = g.gather(dist, &[(0, 2)]).unwrap();
        let diff = g.sub(dp, dn).unwrap();
        assert!((g.value(diff).item() + 0.3 - 3.3).abs() < 1e-12);
    }

    #[test]
    fn triplet_requires_valid_triplet() {
        let mut g = Graph::new();
        let f = mat(&mut g, vec![vec![0.0], vec![1.0]]);
        assert!(triplet_loss(&mut g, f, &[0, 1], 0.3, Mining::BatchHard).is_err());
        assert!(triplet_loss(&mut g, f, &[0, 0], 0.3, Mining::AllValid).is_err());
    }

    #[test]
    fn all_valid_triplet_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let feats = rand_mat(&mut rng, 16, 5);
        let labels: Vec<usize> = (0..16).map(|i| i / 4).collect();
        let (mut sum, mut n) = (0.0, 0usize);
        let (mut worst, mut hard_sum) = (0.0f64, 0.0);
        for a in 0..16 {
            let mut hp = f64::MIN;
            let mut hn = f64::MAX;
            for p in 0..16 {
                if p == a || labels[p] != labels[a] {
                    continue;
                }
                hp = hp.max(sqd(&feats[a], &feats[p]));
                for q in 0..16 {
                    if labels[q] == labels[a] {
                        continue;
                    }
                    hn = hn.min(sqd(&feats[a], &feats[q]));
                    let t = (sqd(&feats[a], &feats[p]) - sqd(&feats[a], &feats[q]) + 0.3).max(0.0);
                    worst = worst.max(t);
                    sum += t;
                    n += 1;
                }
            }
            hard_sum += (hp - hn + 0.3).max(0.0);
        }
        let mut g = Graph::new();
        let f = mat(&mut g, feats);
        let all = triplet_loss(&mut g, f, &labels, 0.3, Mining::AllValid).unwrap();
        assert!((g.value(all).item() - sum / n as f64).abs() < 1e-6);
        let hard = triplet_loss(&mut g, f, &labels, 0.3, Mining::BatchHard).unwrap();
        assert!((g.value(hard).item() - hard_sum / 16.0).abs() < 1e-9);
        assert!(g.value(hard).item() <= worst + 1e-12);
    }

    fn four(g: &mut Graph, a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, c: Vec<Vec<f64>>, d: Vec<Vec<f64>>) -> [Var; 4] {
        [mat(g, a), mat(g, b), mat(g, c), mat(g, d)]
    }

    #[test]
    fn tri_div_examples() {
        let mut g = Graph::new();
        let [ft, fv, bt, bv] = four(&mut g, vec![vec![1.0, 0.0]], vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]], vec![vec![0.0, 1.0]]);
        let l = tri_div_loss(&mut g, ft, fv, bt, bv, 0.3).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let x = vec![vec![0.4, -0.2, 0.9]];
        let [a, b, c, d] = four(&mut g, x.clone(), x.clone(), x.clone(), x);
        let l = tri_div_loss(&mut g, a, b, c, d, 0.3).unwrap();
        assert!((g.value(l).item() - 1.2).abs() < 1e-12);
    }

    #[test]
    fn tri_div_matches_per_tuple_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (ft, fv, bt, bv) = (rand_mat(&mut rng, 5, 4), rand_mat(&mut rng, 5, 4), rand_mat(&mut rng, 5, 4), rand_mat(&mut rng, 5, 4));
        let m = 0.3;
        let mut oracle = 0.0;
        for i in 0..5 {
            let h = |a: &[f64], b: &[f64], c: &[f64], d: &[f64]| {
                0.5 * ((sqd(a, b) - sqd(a, c) + m).max(0.0) + (sqd(a, b) - sqd(a, d) + m).max(0.0))
            };
            oracle += h(&ft[i], &fv[i], &bt[i], &bv[i])
                + h(&bt[i], &bv[i], &ft[i], &fv[i])
                + h(&fv[i], &ft[i], &bt[i], &bv[i])
                + h(&bv[i], &bt[i], &ft[i], &fv[i]);
        }
        oracle /= 5.0;
        let mut g = Graph::new();
        let [a, b, c, d] = four(&mut g, ft, fv, bt, bv);
        let l = tri_div_loss(&mut g, a, b, c, d, m).unwrap();
        assert!((g.value(l).item() - oracle).abs() < 1e-6);
        // swapping foreground and background leaves the loss unchanged
        let s = tri_div_loss(&mut g, c, d, a, b, m).unwrap();
        assert!((g.value(s).item() - g.value(l).item()).abs() < 1e-12);
    }

    #[test]
    fn con_examples() {
        let mut g = Graph::new();
        let [a, b, c, d] = four(&mut g, vec![vec![1.0, 2.0]], vec![vec![1.0, 2.0]], vec![vec![3.0, 1.0]], vec![vec![3.0, 1.0]]);
        let l = con_loss(&mut g, a, b, c, d).unwrap();
        assert!(g.value(l).item().abs() < 1e-12);
        let [a, b, c, d] = four(&mut g, vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]], vec![vec![0.0, 2.0]], vec![vec![3.0, 0.0]]);
        let l = con_loss(&mut g, a, b, c, d).unwrap();
        assert!((g.value(l).item() - 2.0).abs() < 1e-12);
        let [a, b, c, d] = four(&mut g, vec![vec![1.0, 1.0]], vec![vec![-2.0, -2.0]], vec![vec![0.5, 1.0]], vec![vec![0.5, 1.0]]);
        let l = con_loss(&mut g, a, b, c, d).unwrap();
        assert!((g.value(l).item() - 2.0).abs() < 1e-12);
        let [a, b, c, d] = four(&mut g, vec![vec![0.0, 0.0]], vec![vec![1.0, 0.0]], vec![vec![1.0, 0.0]], vec![vec![1.0, 0.0]]);
        assert!(con_loss(&mut g, a, b, c, d).is_err());
    }

    #[test]
    fn div_is_additive() {
        let mut g = Graph::new();
        let t = g.constant(Tensor::scalar(1.2)).unwrap();
        let c = g.constant(Tensor::scalar(2.0)).unwrap();
        let d = div_loss(&mut g, t, c).unwrap();
        assert!((g.value(d).item() - 3.2).abs() < 1e-12);
        let z = g.constant(Tensor::scalar(0.0)).unwrap();
        let d = div_loss(&mut g, z, z).unwrap();
        assert_eq!(g.value(d).item(), 0.0);
    }

    fn random_bundle(g: &mut Graph, rng: &mut ChaCha8Rng) -> FeatureBundle {
        let labels: Vec<usize> = (0..8).map(|i| i / 2).collect();
        let mut m = |r, c| mat(g, rand_mat(rng, r, c));
        FeatureBundle {
            backbone: m(8, 6),
            backbone_logits: m(8, 4),
            fg_text: Some(m(8, 6)),
            fg_visual: Some(m(8, 6)),
            fg_text_logits: Some(m(8, 4)),
            fg_visual_logits: Some(m(8, 4)),
            bg_text: Some(m(8, 6)),
            bg_visual: Some(m(8, 6)),
            labels,
        }
    }

    #[test]
    fn total_is_sum_of_breakdown() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::new();
        let b = random_bundle(&mut g, &mut rng);
        let cfg = LossConfig::default();
        let (t, br) = total_loss(&mut g, &b, &cfg).unwrap();
        let recomputed = br.id + br.tri + br.id_c.unwrap() + br.tri_c.unwrap() + 0.5 * (br.tri_div.unwrap() + br.con.unwrap());
        assert!((g.value(t).item() - recomputed).abs() < 1e-9);
        assert_eq!(g.value(t).item(), br.total);

        let off = LossConfig { lambda: 0.0, ..cfg };
        let (t0, br0) = total_loss(&mut g, &b, &off).unwrap();
        assert!((g.value(t0).item() - (br0.id + br0.tri + br0.id_c.unwrap() + br0.tri_c.unwrap())).abs() < 1e-12);
        assert!(br0.tri_div.is_some());
    }

    #[test]
    fn lambda_scales_diversity_only() {
        // orthonormal fT, fV, bT, bV: every squared distance is 2, so each
        // tuple contributes m (tri-div = 4m = 1.2) and con = 1 + 1 = 2
        let mut g = Graph::new();
        let backbone = mat(&mut g, vec![vec![0.0, 0.0], vec![0.0, 0.0], vec![5.0, 5.0], vec![5.0, 5.0]]);
        let logits = mat(&mut g, vec![vec![900.0, 0.0], vec![900.0, 0.0], vec![0.0, 900.0], vec![0.0, 900.0]]);
        let e = |g: &mut Graph, k: usize| {
            let mut row = vec![0.0; 4];
            row[k] = 1.0;
            mat(g, vec![row; 4])
        };
        let (ft, fv, bt, bv) = (e(&mut g, 0), e(&mut g, 1), e(&mut g, 2), e(&mut g, 3));
        let b = FeatureBundle {
            labels: vec![0, 0, 1, 1],
            backbone,
            backbone_logits: logits,
            fg_text: Some(ft),
            fg_visual: Some(fv),
            fg_text_logits: None,
            fg_visual_logits: None,
            bg_text: Some(bt),
            bg_visual: Some(bv),
        };
        let cfg = LossConfig { cross_modal: false, ..LossConfig::default() };
        let (total, br) = total_loss(&mut g, &b, &cfg).unwrap();
        assert!(br.id.abs() < 1e-12 && br.tri == 0.0);
        assert!((br.tri_div.unwrap() - 1.2).abs() < 1e-12);
        assert!((br.con.unwrap() - 2.0).abs() < 1e-12);
        assert!((g.value(total).item() - 1.6).abs() < 1e-12);
    }
}
