use crate::error::{Error, Result};

/// Equal error rate (percent) and the threshold where it occurs.
///
/// Thresholds run over the sorted union of all scores. At threshold `t`,
/// FRR is the fraction of targets below `t` and FAR the fraction of
/// nontargets at or above it. The EER is read where FRR − FAR turns
/// non-negative, interpolating linearly from the previous threshold; past the
/// highest score FRR is 1 and FAR 0.
pub fn compute_eer(targets: &[f64], nontargets: &[f64]) -> Result<(f64, f64)> {
    if targets.is_empty() || nontargets.is_empty() {
        return Err(Error::invalid(
            "compute_eer",
            "need at least one target and one nontarget score",
        ));
    }
    if targets.iter().chain(nontargets).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("score passed to compute_eer".into()));
    }
    let mut tar = targets.to_vec();
    let mut non = nontargets.to_vec();
    tar.sort_by(f64::total_cmp);
    non.sort_by(f64::total_cmp);
    let mut all: Vec<f64> = tar.iter().chain(&non).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();

    let (nt, nn) = (tar.len() as f64, non.len() as f64);
    // cursors: targets strictly below t, nontargets strictly below t
    let (mut it, mut in_) = (0usize, 0usize);
    let mut prev: Option<(f64, f64, f64)> = None; // (t, frr, far)
    for &t in &all {
        while it < tar.len() && tar[it] < t {
            it += 1;
        }
        while in_ < non.len() && non[in_] < t {
            in_ += 1;
        }
        let frr = it as f64 / nt;
        let far = (non.len() - in_) as f64 / nn;
        if frr - far >= 0.0 {
            return Ok(crossing(prev, (t, frr, far)));
        }
        prev = Some((t, frr, far));
    }
    let (t, frr, far) = prev.expect("at least one threshold");
    // beyond every score: nothing accepted
    let d0 = frr - far;
    let alpha = -d0 / (1.0 - d0);
    Ok((100.0 * (frr + alpha * (1.0 - frr)), t))
}

fn crossing(prev: Option<(f64, f64, f64)>, cur: (f64, f64, f64)) -> (f64, f64) {
    let (t1, frr1, far1) = cur;
    match prev {
        None => (100.0 * frr1.max(far1), t1),
        Some((t0, frr0, far0)) => {
            let d0 = frr0 - far0;
            let d1 = frr1 - far1;
            let alpha = -d0 / (d1 - d0);
            let eer = frr0 + alpha * (frr1 - frr0);
            (100.0 * eer, t0 + alpha * (t1 - t0))
        }
    }
}
