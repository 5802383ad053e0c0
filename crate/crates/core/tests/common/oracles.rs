//! Brute-force reference implementations kept independent of the library.

/// Miss and false-alarm rates of "accept when score >= t", by direct counting.
pub fn rates_at(bona: &[f64], spoof: &[f64], t: f64) -> (f64, f64) {
    let miss = bona.iter().filter(|&&s| s < t).count() as f64 / bona.len() as f64;
    let fa = spoof.iter().filter(|&&s| s >= t).count() as f64 / spoof.len() as f64;
    (miss, fa)
}

/// Every distinct score plus +inf, ascending.
pub fn candidate_thresholds(bona: &[f64], spoof: &[f64]) -> Vec<f64> {
    let mut t: Vec<f64> = bona.iter().chain(spoof).copied().collect();
    t.sort_by(|a, b| a.partial_cmp(b).unwrap());
    t.dedup();
    t.push(f64::INFINITY);
    t
}

/// EER by sweeping every candidate threshold and interpolating linearly
/// across the first sign change of `fa - miss`.
pub fn eer_sweep(bona: &[f64], spoof: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = candidate_thresholds(bona, spoof).into_iter().map(|t| rates_at(bona, spoof, t)).collect();
    for k in 0..pts.len() {
        let (m1, f1) = pts[k];
        if f1 <= m1 {
            if f1 == m1 || k == 0 {
                return m1;
            }
            let (m0, f0) = pts[k - 1];
            // solve m0 + x (m1 - m0) = f0 + x (f1 - f0)
            let x = (f0 - m0) / ((f0 - m0) - (f1 - m1));
            return m0 + x * (m1 - m0);
        }
    }
    unreachable!("the +inf threshold always has fa <= miss")
}

/// Normalized t-DCF of the evaluation plan, minimized over thresholds.
/// `costs` = [p_target, p_nontarget, p_spoof, c_miss_asv, c_fa_asv, c_miss_cm, c_fa_cm],
/// `asv` = (p_miss_asv, p_fa_asv, p_miss_spoof_asv).
pub fn min_tdcf_reference(bona: &[f64], spoof: &[f64], asv: (f64, f64, f64), costs: [f64; 7]) -> f64 {
    let [p_tar, p_non, p_spoof, c_miss_asv, c_fa_asv, c_miss_cm, c_fa_cm] = costs;
    let (pm_asv, pfa_asv, pm_spoof_asv) = asv;
    let c1 = p_tar * (c_miss_cm - c_miss_asv * pm_asv) - p_non * c_fa_asv * pfa_asv;
    let c2 = c_fa_cm * p_spoof * (1.0 - pm_spoof_asv);
    let mut best = f64::INFINITY;
    for t in candidate_thresholds(bona, spoof) {
        let (pm, pfa) = rates_at(bona, spoof, t);
        let tdcf = c1 * pm + c2 * pfa;
        let norm = if c1 < c2 { c1 } else { c2 };
        best = best.min(tdcf / norm);
    }
    best
}
