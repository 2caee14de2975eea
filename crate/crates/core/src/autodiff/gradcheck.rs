//! Central finite-difference verification of analytic gradients.

use std::collections::BTreeMap;

use rand::Rng;

use super::{AutodiffError, ParamStore, Tensor};

/// Result of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct FdReport {
    /// max |g_ad - g_fd| / max(1, |g_ad|, |g_fd|)
    pub max_rel_error: f64,
    /// Parameter name and flat index (or direction label) of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

fn rel_err(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / 1f64.max(ad.abs()).max(fd.abs())
}

fn base_eval<F, E>(loss_fn: &mut F, store: &ParamStore) -> Result<BTreeMap<String, Tensor>, E>
where
    F: FnMut(&ParamStore, bool) -> Result<(f64, BTreeMap<String, Tensor>), E>,
    E: From<AutodiffError>,
{
    let (v1, grads) = loss_fn(store, true)?;
    let (v2, _) = loss_fn(store, false)?;
    if v1.to_bits() != v2.to_bits() {
        return Err(AutodiffError::NonDeterministic(v1, v2).into());
    }
    Ok(grads)
}

/// Compare analytic gradients with central differences at the given
/// `(parameter, flat index)` coordinates, or at every scalar of every
/// trainable parameter when `coords` is `None`.
///
/// `loss_fn(store, with_grad)` returns the loss and, when `with_grad`,
/// the gradient for every trainable parameter.
pub fn finite_diff_check<F, E>(
    mut loss_fn: F,
    store: &ParamStore,
    coords: Option<&[(String, usize)]>,
    eps: f64,
) -> Result<FdReport, E>
where
    F: FnMut(&ParamStore, bool) -> Result<(f64, BTreeMap<String, Tensor>), E>,
    E: From<AutodiffError>,
{
    assert!(eps > 0.0, "eps must be positive");
    let grads = base_eval(&mut loss_fn, store)?;
    let all: Vec<(String, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = store
                .iter()
                .filter(|(_, p)| p.trainable)
                .flat_map(|(n, p)| (0..p.value.len()).map(move |i| (n.clone(), i)))
                .collect();
            &all
        }
    };
    let mut work = store.clone();
    let mut report = FdReport { max_rel_error: 0.0, worst: None, checked: 0 };
    for (name, idx) in coords {
        let orig = store.get(name).ok_or_else(|| AutodiffError::UnknownParam(name.clone()))?.value.data()[*idx];
        let set = |w: &mut ParamStore, v: f64| w.get_mut(name).expect("param").value.data_mut()[*idx] = v;
        set(&mut work, orig + eps);
        let (up, _) = loss_fn(&work, false)?;
        set(&mut work, orig - eps);
        let (down, _) = loss_fn(&work, false)?;
        set(&mut work, orig);
        let fd = (up - down) / (2.0 * eps);
        let ad = grads.get(name).map_or(0.0, |g| g.data()[*idx]);
        let e = rel_err(ad, fd);
        report.checked += 1;
        if e >= report.max_rel_error {
            report.max_rel_error = e;
            report.worst = Some((name.clone(), *idx));
        }
    }
    Ok(report)
}

/// Check the directional derivative along one random direction per
/// trainable tensor: every scalar of every tensor contributes.
pub fn directional_check<F, E, R>(mut loss_fn: F, store: &ParamStore, eps: f64, rng: &mut R) -> Result<FdReport, E>
where
    F: FnMut(&ParamStore, bool) -> Result<(f64, BTreeMap<String, Tensor>), E>,
    E: From<AutodiffError>,
    R: Rng,
{
    let grads = base_eval(&mut loss_fn, store)?;
    let mut report = FdReport { max_rel_error: 0.0, worst: None, checked: 0 };
    let names = store.trainable_names();
    for (i, name) in names.iter().enumerate() {
        let base = store.get(name).expect("param").value.clone();
        let dir: Vec<f64> = (0..base.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ad: f64 = grads.get(name).map_or(0.0, |g| g.data().iter().zip(&dir).map(|(a, b)| a * b).sum());
        let mut work = store.clone();
        let mut shifted = |sign: f64| -> Result<f64, E> {
            let p = work.get_mut(name).expect("param");
            for ((w, b), d) in p.value.data_mut().iter_mut().zip(base.data()).zip(&dir) {
                *w = b + sign * eps * d;
            }
            Ok(loss_fn(&work, false)?.0)
        };
        let up = shifted(1.0)?;
        let down = shifted(-1.0)?;
        let fd = (up - down) / (2.0 * eps);
        let e = rel_err(ad, fd);
        report.checked += 1;
        if e >= report.max_rel_error {
            report.max_rel_error = e;
            report.worst = Some((name.clone(), i));
        }
    }
    Ok(report)
}
