//! Loss-component ablation: baseline, +cross-modal, +div, +div+mask.

use std::fmt::Write as _;

use serde::Serialize;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::evaluator::{evaluate_inputs, Composition, EvalReport};
use crate::synthdata::Corpus;
use crate::trainer::{load_inputs, train};

pub const ROW_NAMES: [&str; 4] = ["baseline", "+cross-modal", "+div", "+div+mask"];

/// The four configurations derived from `base`. Only the component
/// switches and the retrieval embedding differ.
pub fn ablation_configs(base: &Config) -> Result<Vec<(&'static str, Config)>> {
    if !(base.loss.lambda > 0.0) {
        return Err(Error::Config("ablation needs loss.lambda > 0 for the +div rows".into()));
    }
    let make = |cross: bool, lambda: f64, mask: bool| {
        let mut c = base.clone();
        c.loss.cross_modal = cross;
        c.loss.lambda = lambda;
        c.loss.mask = mask;
        c.loss.log_div = false;
        if !cross {
            c.eval.composition = Composition::Backbone;
            c.eval.separation = false;
        }
        c
    };
    let l = base.loss.lambda;
    Ok(ROW_NAMES.into_iter().zip([make(false, 0.0, false), make(true, 0.0, false), make(true, l, false), make(true, l, true)]).collect())
}

#[derive(Clone, Debug, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub intra_fg: Option<f64>,
    pub intra_bg: Option<f64>,
    pub inter: Option<f64>,
    pub first_loss: f64,
    pub last_loss: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub cross_modal: bool,
    pub lambda: f64,
    pub mask: bool,
    pub composition: Composition,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub intra_fg: Option<f64>,
    pub intra_bg: Option<f64>,
    pub inter: Option<f64>,
    pub runs: Vec<SeedResult>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn mean_opt(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = xs.collect();
    v.filter(|v| !v.is_empty()).map(|v| mean(v.into_iter()))
}

/// Train and evaluate one configuration for one seed.
pub fn run_one(cfg: &Config, corpus: &Corpus) -> Result<(SeedResult, EvalReport)> {
    let outcome = train(cfg, corpus, std::io::sink())?;
    let records = corpus.test_records(cfg.data.train_ids);
    let inputs = load_inputs(&outcome.model, corpus, &records)?;
    let (report, _) = evaluate_inputs(cfg, &outcome.model, &records, &inputs)?;
    let r = &report.retrieval;
    let sep = report.separation.as_ref();
    let res = SeedResult {
        seed: cfg.train.seed,
        map: r.map,
        rank1: r.rank1,
        rank5: r.rank5,
        rank10: r.rank10,
        intra_fg: sep.map(|s| s.intra_fg),
        intra_bg: sep.map(|s| s.intra_bg),
        inter: sep.map(|s| s.inter),
        first_loss: outcome.log.first().map_or(f64::NAN, |l| l.losses.total),
        last_loss: outcome.log.last().map_or(f64::NAN, |l| l.losses.total),
    };
    Ok((res, report))
}

/// Run every configuration for every seed. `progress` is called after each run.
pub fn run_ablation(base: &Config, corpus: &Corpus, seeds: &[u64], mut progress: impl FnMut(&str, &SeedResult)) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    for (name, cfg) in ablation_configs(base)? {
        let mut runs = Vec::new();
        for &seed in seeds {
            let mut c = cfg.clone();
            c.train.seed = seed;
            let (res, _) = run_one(&c, corpus)?;
            progress(name, &res);
            runs.push(res);
        }
        rows.push(AblationRow {
            name: name.to_string(),
            cross_modal: cfg.loss.cross_modal,
            lambda: cfg.loss.lambda,
            mask: cfg.loss.mask,
            composition: cfg.eval.composition,
            map: mean(runs.iter().map(|r| r.map)),
            rank1: mean(runs.iter().map(|r| r.rank1)),
            rank5: mean(runs.iter().map(|r| r.rank5)),
            rank10: mean(runs.iter().map(|r| r.rank10)),
            intra_fg: mean_opt(runs.iter().map(|r| r.intra_fg)),
            intra_bg: mean_opt(runs.iter().map(|r| r.intra_bg)),
            inter: mean_opt(runs.iter().map(|r| r.inter)),
            runs,
        });
    }
    Ok(AblationTable { seeds: seeds.to_vec(), rows })
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Aligned text table of the seed means, in percent.
    pub fn to_text(&self) -> String {
        let pct = |v: f64| format!("{:.2}", 100.0 * v);
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        let header = ["config", "X-modal", "lambda", "mask", "mAP", "R-1", "R-5", "R-10", "intra_fg", "inter"];
        let mut cells: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
        for r in &self.rows {
            cells.push(vec![
                r.name.clone(),
                if r.cross_modal { "yes" } else { "no" }.into(),
                format!("{}", r.lambda),
                if r.mask { "yes" } else { "no" }.into(),
                pct(r.map),
                pct(r.rank1),
                pct(r.rank5),
                pct(r.rank10),
                opt(r.intra_fg),
                opt(r.inter),
            ]);
        }
        let widths: Vec<usize> = (0..header.len()).map(|j| cells.iter().map(|c| c[j].len()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for row in &cells {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(j, (c, &w))| if j == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        let _ = writeln!(out, "means over {} seed(s): {:?}", self.seeds.len(), self.seeds);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_rows_match_component_grid() {
        let rows = ablation_configs(&Config::default()).unwrap();
        let grid: Vec<(bool, bool, bool)> = rows.iter().map(|(_, c)| (c.loss.cross_modal, c.loss.lambda > 0.0, c.loss.mask)).collect();
        assert_eq!(grid, vec![(false, false, false), (true, false, false), (true, true, false), (true, true, true)]);
        assert_eq!(rows[0].1.eval.composition, Composition::Backbone);
        assert!(rows.iter().all(|(_, c)| c.validate().is_ok()));
    }

    #[test]
    fn zero_lambda_base_is_rejected() {
        let mut c = Config::default();
        c.loss.lambda = 0.0;
        assert!(ablation_configs(&c).is_err());
    }
}
