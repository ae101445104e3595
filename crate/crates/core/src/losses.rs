//! Training objective: pixel-wise cross-entropy, online hard-example mining
//! over the top-k highest-loss pixels, per-class Dice overlap, and the
//! combined total loss — all with analytic gradients w.r.t. logits.
//!
//! All reductions pool every pixel of the batch and run in a fixed
//! (sample, raster, class) accumulation order so single-threaded results are
//! bitwise reproducible.

use serde::{Deserialize, Serialize};

use crate::datamodel::{LabelMask, LogitMap, ProbabilityMap};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OhemConfig {
    /// Absolute hard-set size. When unset, k = round(k_ratio · crop pixels).
    #[serde(default)]
    pub k: Option<usize>,
    /// Fraction of per-crop pixels kept when `k` is unset.
    #[serde(default = "default_k_ratio")]
    pub k_ratio: f64,
    /// Keep at least this many pixels even when k resolves smaller.
    #[serde(default = "default_min_kept")]
    pub min_kept: usize,
}

fn default_k_ratio() -> f64 {
    0.1
}

fn default_min_kept() -> usize {
    1
}

impl Default for OhemConfig {
    fn default() -> Self {
        OhemConfig {
            k: None,
            k_ratio: default_k_ratio(),
            min_kept: default_min_kept(),
        }
    }
}

impl OhemConfig {
    pub fn effective_k(&self, crop_pixels: usize) -> usize {
        match self.k {
            Some(k) => k,
            None => ((self.k_ratio * crop_pixels as f64).round() as usize).max(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(k) = self.k {
            if k == 0 {
                return Err(Error::Config("ohem k must be >= 1".into()));
            }
        }
        if self.k_ratio <= 0.0 || self.k_ratio > 1.0 {
            return Err(Error::Config(format!(
                "ohem k_ratio must be in (0,1], got {}",
                self.k_ratio
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DiceConfig {
    /// Smoothing added to numerator and denominator; keeps absent classes at
    /// Dice 1 (zero loss) instead of 0/0.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Optional per-class weights; uniform when unset.
    #[serde(default)]
    pub class_weights: Option<Vec<f64>>,
}

fn default_epsilon() -> f64 {
    1.0
}

impl Default for DiceConfig {
    fn default() -> Self {
        DiceConfig {
            epsilon: default_epsilon(),
            class_weights: None,
        }
    }
}

impl DiceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon <= 0.0 {
            return Err(Error::Config(format!(
                "dice epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        if let Some(w) = &self.class_weights {
            if w.iter().any(|&v| v < 0.0) || w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::Config("dice class_weights must be non-negative with positive sum".into()));
            }
        }
        Ok(())
    }
}

/// Scalar losses for one step. `loss_total` is exactly
/// `loss_ohem + loss_dice`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub loss_ohem: f64,
    pub loss_dice: f64,
    pub loss_total: f64,
    pub kept_pixel_count: usize,
    pub per_class_dice: Vec<f64>,
}

/// Per-pixel cross-entropy values; `valid[i]` is false for ignore pixels,
/// which are excluded from every downstream reduction.
#[derive(Debug, Clone)]
pub struct CeMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl CeMap {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

fn check_pair(logits: &LogitMap, labels: &LabelMask) -> Result<()> {
    if logits.height != labels.height || logits.width != labels.width {
        return Err(Error::Shape(format!(
            "logits {}x{} and labels {}x{} differ",
            logits.height, logits.width, labels.height, labels.width
        )));
    }
    logits.validate_finite()
}

/// loss_p = -log softmax(logits_p)[y_p], stable via max subtraction.
pub fn pixel_ce_map(logits: &LogitMap, labels: &LabelMask, ignore_id: u8) -> Result<CeMap> {
    check_pair(logits, labels)?;
    let c = logits.num_classes;
    let n = logits.height * logits.width;
    let mut values = vec![0.0; n];
    let mut valid = vec![false; n];
    for px in 0..n {
        let y = labels.data[px];
        if y == ignore_id {
            continue;
        }
        if (y as usize) >= c {
            return Err(Error::Validation(format!(
                "label {} out of range at pixel (row {}, col {})",
                y,
                px / logits.width,
                px % logits.width
            )));
        }
        let row = &logits.data[px * c..(px + 1) * c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let logsum = row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln() + max;
        values[px] = logsum - row[y as usize];
        valid[px] = true;
    }
    Ok(CeMap {
        height: logits.height,
        width: logits.width,
        values,
        valid,
    })
}

/// Indices of the k highest values among valid entries, ties broken by
/// ascending index; returned sorted ascending. `k` is capped at the valid
/// count. Errors when no entry is valid.
pub fn ohem_select(values: &[f64], valid: &[bool], k: usize) -> Result<Vec<usize>> {
    let mut order: Vec<usize> = (0..values.len()).filter(|&i| valid[i]).collect();
    if order.is_empty() {
        return Err(Error::Validation(
            "ohem selection on an empty batch: zero valid pixels".into(),
        ));
    }
    // Descending by loss; the stable sort keeps ascending index among ties.
    order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).expect("finite losses"));
    order.truncate(k.min(order.len()));
    order.sort_unstable();
    Ok(order)
}

/// Hard-example-mined cross-entropy: mean CE over the top-k hardest valid
/// pixels of the batch, with gradient (softmax − onehot)/|K| on selected
/// pixels and exactly zero elsewhere. The selection is treated as constant
/// during differentiation.
pub struct OhemOutput {
    pub loss: f64,
    /// Per-sample gradients w.r.t. logits, same layout as `LogitMap::data`.
    pub grads: Vec<Vec<f64>>,
    pub kept: usize,
}

pub fn ohem_loss(
    logits: &[LogitMap],
    labels: &[LabelMask],
    cfg: &OhemConfig,
    ignore_id: u8,
) -> Result<OhemOutput> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::Shape(format!(
            "batch of {} logit maps vs {} label masks",
            logits.len(),
            labels.len()
        )));
    }
    let ce_maps: Vec<CeMap> = logits
        .iter()
        .zip(labels)
        .map(|(lg, lb)| pixel_ce_map(lg, lb, ignore_id))
        .collect::<Result<_>>()?;

    // Flatten the batch in sample-major order for a global ranking.
    let mut values = Vec::new();
    let mut valid = Vec::new();
    let mut offsets = vec![0usize];
    for m in &ce_maps {
        values.extend_from_slice(&m.values);
        valid.extend_from_slice(&m.valid);
        offsets.push(values.len());
    }

    let crop_pixels = logits[0].height * logits[0].width;
    let valid_count = valid.iter().filter(|v| **v).count();
    let k = cfg
        .effective_k(crop_pixels)
        .max(cfg.min_kept)
        .min(valid_count.max(1));
    let selected = ohem_select(&values, &valid, k)?;
    let kept = selected.len();

    let sum: f64 = selected.iter().map(|&i| values[i]).sum();
    let loss = sum / kept as f64;

    // Gradient only on selected pixels; softmax recomputed there.
    let mut grads: Vec<Vec<f64>> = logits.iter().map(|lg| vec![0.0; lg.data.len()]).collect();
    let scale = 1.0 / kept as f64;
    for &gi in &selected {
        let sample = offsets.partition_point(|&o| o <= gi) - 1;
        let px = gi - offsets[sample];
        let lg = &logits[sample];
        let c = lg.num_classes;
        let row = &lg.data[px * c..(px + 1) * c];
        let y = labels[sample].data[px] as usize;
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let g = &mut grads[sample][px * c..(px + 1) * c];
        for kcls in 0..c {
            let p = (row[kcls] - max).exp() / denom;
            g[kcls] = scale * (p - if kcls == y { 1.0 } else { 0.0 });
        }
    }
    Ok(OhemOutput { loss, grads, kept })
}

/// Softmax over the class axis at every pixel.
pub fn softmax_map(logits: &LogitMap) -> Result<ProbabilityMap> {
    logits.validate_finite()?;
    let c = logits.num_classes;
    let mut out = ProbabilityMap::zeros(logits.height, logits.width, c);
    for px in 0..logits.height * logits.width {
        let row = &logits.data[px * c..(px + 1) * c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for k in 0..c {
            let e = (row[k] - max).exp();
            out.data[px * c + k] = e;
            denom += e;
        }
        for k in 0..c {
            out.data[px * c + k] /= denom;
        }
    }
    Ok(out)
}

/// Smoothed per-class Dice over the pooled batch:
/// (2·Σ p·g + ε) / (Σ p + Σ g + ε), ignore pixels excluded from all sums.
pub fn dice_per_class(
    probs: &[ProbabilityMap],
    labels: &[LabelMask],
    cfg: &DiceConfig,
    ignore_id: u8,
) -> Result<Vec<f64>> {
    let (num, den, _) = dice_sums(probs, labels, cfg, ignore_id)?;
    Ok(num.iter().zip(&den).map(|(n, d)| n / d).collect())
}

/// Returns per-class (numerator, denominator) of the smoothed Dice plus the
/// per-class intersection sums needed by the gradient.
fn dice_sums(
    probs: &[ProbabilityMap],
    labels: &[LabelMask],
    cfg: &DiceConfig,
    ignore_id: u8,
) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    cfg.validate()?;
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::Shape(format!(
            "batch of {} probability maps vs {} label masks",
            probs.len(),
            labels.len()
        )));
    }
    let c = probs[0].num_classes;
    let mut sum_pg = vec![0.0; c];
    let mut sum_p = vec![0.0; c];
    let mut sum_g = vec![0.0; c];
    let mut valid_total = 0usize;
    for (pm, lb) in probs.iter().zip(labels) {
        if pm.height != lb.height || pm.width != lb.width || pm.num_classes != c {
            return Err(Error::Shape(format!(
                "probability map {}x{}x{} does not match labels {}x{}",
                pm.height, pm.width, pm.num_classes, lb.height, lb.width
            )));
        }
        for px in 0..pm.height * pm.width {
            let y = lb.data[px];
            if y == ignore_id {
                continue;
            }
            if (y as usize) >= c {
                return Err(Error::Validation(format!(
                    "label {} out of range at pixel (row {}, col {})",
                    y,
                    px / pm.width,
                    px % pm.width
                )));
            }
            valid_total += 1;
            for k in 0..c {
                sum_p[k] += pm.data[px * c + k];
            }
            sum_pg[y as usize] += pm.data[px * c + y as usize];
            sum_g[y as usize] += 1.0;
        }
    }
    let num: Vec<f64> = (0..c).map(|k| 2.0 * sum_pg[k] + cfg.epsilon).collect();
    let den: Vec<f64> = (0..c).map(|k| sum_p[k] + sum_g[k] + cfg.epsilon).collect();
    Ok((num, den, valid_total))
}

pub struct DiceOutput {
    pub loss: f64,
    /// Per-sample gradients w.r.t. logits (propagated through softmax).
    pub grads: Vec<Vec<f64>>,
    pub per_class: Vec<f64>,
}

/// L_Dice = 1 − weighted mean of per-class Dice; gradient w.r.t. logits via
/// dL/dz_k = p_k (dL/dp_k − Σ_c dL/dp_c p_c) at each pixel.
pub fn dice_loss(
    probs: &[ProbabilityMap],
    labels: &[LabelMask],
    cfg: &DiceConfig,
    ignore_id: u8,
) -> Result<DiceOutput> {
    let (num, den, _) = dice_sums(probs, labels, cfg, ignore_id)?;
    let c = probs[0].num_classes;
    let weights: Vec<f64> = cfg
        .class_weights
        .clone()
        .unwrap_or_else(|| vec![1.0; c]);
    if weights.len() != c {
        return Err(Error::Config(format!(
            "dice class_weights has {} entries for {} classes",
            weights.len(),
            c
        )));
    }
    let wsum: f64 = weights.iter().sum();
    let per_class: Vec<f64> = num.iter().zip(&den).map(|(n, d)| n / d).collect();
    let loss = 1.0
        - per_class
            .iter()
            .zip(&weights)
            .map(|(d, w)| d * w)
            .sum::<f64>()
            / wsum;

    // dL/dDice_c = -w_c / W;
    // dDice_c/dp_{i,c} = (2 g_{i,c} den_c − num_c) / den_c²; the −num_c term
    // applies to every class column because Σp appears in every denominator.
    let mut grads: Vec<Vec<f64>> = probs.iter().map(|pm| vec![0.0; pm.data.len()]).collect();
    for (b, (pm, lb)) in probs.iter().zip(labels).enumerate() {
        for px in 0..pm.height * pm.width {
            let y = lb.data[px];
            if y == ignore_id {
                continue;
            }
            let p = &pm.data[px * c..(px + 1) * c];
            // dL/dp_k for this pixel.
            let mut dldp = vec![0.0; c];
            for k in 0..c {
                let g_ik = if k == y as usize { 1.0 } else { 0.0 };
                let ddice_dp = (2.0 * g_ik * den[k] - num[k]) / (den[k] * den[k]);
                dldp[k] = -(weights[k] / wsum) * ddice_dp;
            }
            let dot: f64 = (0..c).map(|k| dldp[k] * p[k]).sum();
            let g = &mut grads[b][px * c..(px + 1) * c];
            for k in 0..c {
                g[k] = p[k] * (dldp[k] - dot);
            }
        }
    }
    Ok(DiceOutput {
        loss,
        grads,
        per_class,
    })
}

/// L_total = L_Dice + L_OHEM with summed gradients.
pub fn total_loss(
    logits: &[LogitMap],
    labels: &[LabelMask],
    ohem_cfg: &OhemConfig,
    dice_cfg: &DiceConfig,
    ignore_id: u8,
) -> Result<(LossReport, Vec<Vec<f64>>)> {
    ohem_cfg.validate()?;
    dice_cfg.validate()?;
    let ohem = ohem_loss(logits, labels, ohem_cfg, ignore_id)?;
    let probs: Vec<ProbabilityMap> = logits.iter().map(softmax_map).collect::<Result<_>>()?;
    let dice = dice_loss(&probs, labels, dice_cfg, ignore_id)?;

    let mut grads = ohem.grads;
    for (g, d) in grads.iter_mut().zip(&dice.grads) {
        for (a, b) in g.iter_mut().zip(d) {
            *a += b;
        }
    }
    let report = LossReport {
        loss_ohem: ohem.loss,
        loss_dice: dice.loss,
        loss_total: ohem.loss + dice.loss,
        kept_pixel_count: ohem.kept,
        per_class_dice: dice.per_class,
    };
    if !report.loss_total.is_finite() {
        return Err(Error::Validation(format!(
            "non-finite total loss: ohem {} dice {}",
            report.loss_ohem, report.loss_dice
        )));
    }
    Ok((report, grads))
}

/// Mean cross-entropy over all valid pixels (the plain-CE baseline objective);
/// identical to OHEM with k = N.
pub fn mean_ce_loss(
    logits: &[LogitMap],
    labels: &[LabelMask],
    ignore_id: u8,
) -> Result<OhemOutput> {
    let cfg = OhemConfig {
        k: Some(usize::MAX),
        k_ratio: 1.0,
        min_kept: 1,
    };
    ohem_loss(logits, labels, &cfg, ignore_id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::IGNORE_ID;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_instance(
        seed: u64,
        h: usize,
        w: usize,
        c: usize,
        ignore_frac: f64,
    ) -> (LogitMap, LabelMask) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut logits = LogitMap::zeros(h, w, c);
        for v in logits.data.iter_mut() {
            *v = rng.random_range(-2.0..2.0);
        }
        let mut labels = LabelMask::filled(h, w, 0);
        for v in labels.data.iter_mut() {
            *v = if rng.random_range(0.0..1.0) < ignore_frac {
                IGNORE_ID
            } else {
                rng.random_range(0..c as u8)
            };
        }
        (logits, labels)
    }

    #[test]
    fn uniform_logits_cost_ln_c() {
        let logits = LogitMap::zeros(2, 2, 11);
        let labels = LabelMask::filled(2, 2, 4);
        let ce = pixel_ce_map(&logits, &labels, IGNORE_ID).unwrap();
        for (&v, &ok) in ce.values.iter().zip(&ce.valid) {
            assert!(ok);
            assert!((v - (11f64).ln()).abs() < 1e-12, "{v}");
        }
        assert!(((11f64).ln() - 2.3978952727983707).abs() < 1e-12);
    }

    #[test]
    fn huge_margin_correct_logits_cost_zero() {
        let mut logits = LogitMap::zeros(1, 2, 3);
        logits.data = vec![50.0, 0.0, 0.0, 0.0, 0.0, 50.0];
        let labels = LabelMask {
            height: 1,
            width: 2,
            data: vec![0, 2],
        };
        let ce = pixel_ce_map(&logits, &labels, IGNORE_ID).unwrap();
        assert!(ce.values.iter().all(|&v| v < 1e-12));
    }

    #[test]
    fn hand_set_logits_match_softmax_oracle() {
        // 2x2 map, 2 classes; direct 64-bit softmax computation per pixel.
        let logits = LogitMap {
            height: 2,
            width: 2,
            num_classes: 2,
            data: vec![0.3, -0.7, 1.5, 2.0, -1.0, -1.0, 4.0, 0.0],
        };
        let labels = LabelMask {
            height: 2,
            width: 2,
            data: vec![0, 1, 0, 1],
        };
        let ce = pixel_ce_map(&logits, &labels, IGNORE_ID).unwrap();
        for px in 0..4 {
            let z = &logits.data[px * 2..px * 2 + 2];
            let y = labels.data[px] as usize;
            let p = z[y].exp() / (z[0].exp() + z[1].exp());
            assert!((ce.values[px] - (-p.ln())).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_logits_identify_pixel() {
        let mut logits = LogitMap::zeros(2, 3, 2);
        logits.data[2 * 2 + 1] = f64::NAN; // pixel index 2 = (row 0, col 2)
        let labels = LabelMask::filled(2, 3, 0);
        let err = pixel_ce_map(&logits, &labels, IGNORE_ID)
            .unwrap_err()
            .to_string();
        assert!(err.contains("row 0") && err.contains("col 2"), "{err}");
    }

    #[test]
    fn select_matches_sort_oracle() {
        let values = [2.0, 0.5, 1.0, 3.0];
        let valid = [true; 4];
        assert_eq!(ohem_select(&values, &valid, 2).unwrap(), vec![0, 3]);
        // k >= N saturates to all valid indices.
        assert_eq!(ohem_select(&values, &valid, 10).unwrap(), vec![0, 1, 2, 3]);
        // Ties break by ascending raster index.
        let flat = [1.0, 1.0, 1.0, 1.0];
        assert_eq!(ohem_select(&flat, &valid, 2).unwrap(), vec![0, 1]);
    }

    #[test]
    fn select_rejects_empty_batch() {
        let err = ohem_select(&[1.0, 2.0], &[false, false], 1)
            .unwrap_err()
            .to_string();
        assert!(err.contains("empty batch"), "{err}");
    }

    #[test]
    fn ohem_value_from_selection_oracle() {
        // Losses [2.0, 0.5, 1.0, 3.0] with k=2 -> (3.0 + 2.0)/2 = 2.5.
        // Labels are class 0; logits arranged so CE hits those exact values.
        let c = 2;
        let targets = [2.0f64, 0.5, 1.0, 3.0];
        let mut logits = LogitMap::zeros(1, 4, c);
        for (px, &t) in targets.iter().enumerate() {
            // CE = ln(1 + e^(z1 - z0)); choose z0 = 0, z1 = ln(e^t - 1).
            logits.data[px * c] = 0.0;
            logits.data[px * c + 1] = (t.exp() - 1.0).ln();
        }
        let labels = LabelMask {
            height: 1,
            width: 4,
            data: vec![0; 4],
        };
        let cfg = OhemConfig {
            k: Some(2),
            ..Default::default()
        };
        let out = ohem_loss(
            std::slice::from_ref(&logits),
            std::slice::from_ref(&labels),
            &cfg,
            IGNORE_ID,
        )
        .unwrap();
        assert_eq!(out.kept, 2);
        assert!((out.loss - 2.5).abs() < 1e-12, "{}", out.loss);
        // Gradient exactly zero on the two unselected pixels.
        assert!(out.grads[0][1 * c..2 * c].iter().all(|&g| g == 0.0));
        assert!(out.grads[0][2 * c..3 * c].iter().all(|&g| g == 0.0));
        assert!(out.grads[0][0..c].iter().any(|&g| g != 0.0));
    }

    #[test]
    fn k_saturation_equals_mean_ce() {
        for seed in 0..20 {
            let (logits, labels) = random_instance(seed, 5, 7, 4, 0.2);
            let cfg = OhemConfig {
                k: Some(usize::MAX),
                ..Default::default()
            };
            let out = ohem_loss(
                std::slice::from_ref(&logits),
                std::slice::from_ref(&labels),
                &cfg,
                IGNORE_ID,
            )
            .unwrap();
            let ce = pixel_ce_map(&logits, &labels, IGNORE_ID).unwrap();
            let sum: f64 = ce
                .values
                .iter()
                .zip(&ce.valid)
                .filter(|(_, ok)| **ok)
                .map(|(v, _)| v)
                .sum();
            let mean = sum / ce.valid_count() as f64;
            assert!((out.loss - mean).abs() < 1e-12);
            assert_eq!(out.kept, ce.valid_count());
        }
    }

    #[test]
    fn topk_mean_non_increasing_in_k() {
        let (logits, labels) = random_instance(77, 8, 8, 3, 0.1);
        let mut last = f64::INFINITY;
        for k in 1..=60 {
            let cfg = OhemConfig {
                k: Some(k),
                ..Default::default()
            };
            let out = ohem_loss(
                std::slice::from_ref(&logits),
                std::slice::from_ref(&labels),
                &cfg,
                IGNORE_ID,
            )
            .unwrap();
            assert!(out.loss <= last + 1e-12, "k={k}: {} > {last}", out.loss);
            last = out.loss;
        }
    }

    #[test]
    fn perfect_prediction_dice_is_one() {
        let c = 3;
        let mut probs = ProbabilityMap::zeros(2, 2, c);
        let labels = LabelMask {
            height: 2,
            width: 2,
            data: vec![0, 1, 2, 1],
        };
        for px in 0..4 {
            probs.data[px * c + labels.data[px] as usize] = 1.0;
        }
        // With epsilon the smoothed value approaches 1; use a tiny epsilon.
        let cfg = DiceConfig {
            epsilon: 1e-9,
            class_weights: None,
        };
        let dice = dice_per_class(
            std::slice::from_ref(&probs),
            std::slice::from_ref(&labels),
            &cfg,
            IGNORE_ID,
        )
        .unwrap();
        for d in &dice {
            assert!((d - 1.0).abs() < 1e-8, "{d}");
        }
        let out = dice_loss(
            std::slice::from_ref(&probs),
            std::slice::from_ref(&labels),
            &cfg,
            IGNORE_ID,
        )
        .unwrap();
        assert!(out.loss.abs() < 1e-8);
    }

    #[test]
    fn absent_class_contributes_zero_loss() {
        // Class 2 absent from prediction mass and labels: Dice = eps/eps = 1.
        let c = 3;
        let mut probs = ProbabilityMap::zeros(1, 2, c);
        probs.data = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        let labels = LabelMask {
            height: 1,
            width: 2,
            data: vec![0, 1],
        };
        let dice = dice_per_class(
            std::slice::from_ref(&probs),
            std::slice::from_ref(&labels),
            &DiceConfig::default(),
            IGNORE_ID,
        )
        .unwrap();
        assert_eq!(dice[2], 1.0);
    }

    #[test]
    fn dice_sums_match_enumeration_oracle() {
        // 3x3 map, 2 classes, hand-set probabilities; sums accumulated by
        // explicit per-pixel enumeration.
        let c = 2;
        let mut probs = ProbabilityMap::zeros(3, 3, c);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for px in 0..9 {
            let p: f64 = rng.random_range(0.05..0.95);
            probs.data[px * c] = p;
            probs.data[px * c + 1] = 1.0 - p;
        }
        let mut labels = LabelMask::filled(3, 3, 0);
        for (i, v) in labels.data.iter_mut().enumerate() {
            *v = if i == 4 { IGNORE_ID } else { (i % 2) as u8 };
        }
        let eps = 1.0;
        // Oracle.
        let mut sum_pg = [0.0; 2];
        let mut sum_p = [0.0; 2];
        let mut sum_g = [0.0; 2];
        for px in 0..9 {
            let y = labels.data[px];
            if y == IGNORE_ID {
                continue;
            }
            for k in 0..2 {
                sum_p[k] += probs.data[px * c + k];
            }
            sum_pg[y as usize] += probs.data[px * c + y as usize];
            sum_g[y as usize] += 1.0;
        }
        let expect: Vec<f64> = (0..2)
            .map(|k| (2.0 * sum_pg[k] + eps) / (sum_p[k] + sum_g[k] + eps))
            .collect();
        let got = dice_per_class(
            std::slice::from_ref(&probs),
            std::slice::from_ref(&labels),
            &DiceConfig::default(),
            IGNORE_ID,
        )
        .unwrap();
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_probs_single_class_closed_form() {
        // Uniform probabilities with one class covering all N pixels and
        // eps -> 0: Dice = 2(N/C) / (N/C + N) = 2/(1+C).
        let c = 4;
        let n = 25;
        let mut probs = ProbabilityMap::zeros(5, 5, c);
        for v in probs.data.iter_mut() {
            *v = 1.0 / c as f64;
        }
        let labels = LabelMask::filled(5, 5, 2);
        let cfg = DiceConfig {
            epsilon: 1e-12,
            class_weights: None,
        };
        let dice = dice_per_class(
            std::slice::from_ref(&probs),
            std::slice::from_ref(&labels),
            &cfg,
            IGNORE_ID,
        )
        .unwrap();
        let expect = 2.0 / (1.0 + c as f64);
        assert!((dice[2] - expect).abs() < 1e-9, "{} vs {expect}", dice[2]);
        let _ = n;
    }

    /// Central finite-difference oracle for d loss / d logits.
    fn fd_logit_grad(
        loss_of: &dyn Fn(&[LogitMap]) -> f64,
        logits: &[LogitMap],
        step: f64,
    ) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for b in 0..logits.len() {
            let mut g = vec![0.0; logits[b].data.len()];
            for i in 0..logits[b].data.len() {
                let mut plus: Vec<LogitMap> = logits.to_vec();
                plus[b].data[i] += step;
                let mut minus: Vec<LogitMap> = logits.to_vec();
                minus[b].data[i] -= step;
                g[i] = (loss_of(&plus) - loss_of(&minus)) / (2.0 * step);
            }
            out.push(g);
        }
        out
    }

    fn max_rel_err(analytic: &[Vec<f64>], fd: &[Vec<f64>]) -> f64 {
        let mut worst: f64 = 0.0;
        for (a, f) in analytic.iter().zip(fd) {
            for (&x, &y) in a.iter().zip(f) {
                let scale = x.abs().max(y.abs()).max(1e-6);
                worst = worst.max((x - y).abs() / scale);
            }
        }
        worst
    }

    #[test]
    fn dice_gradient_matches_finite_differences() {
        let (logits, labels) = random_instance(21, 4, 4, 3, 0.1);
        let cfg = DiceConfig::default();
        let probs = vec![softmax_map(&logits).unwrap()];
        let labels_v = vec![labels];
        let out = dice_loss(&probs, &labels_v, &cfg, IGNORE_ID).unwrap();
        let loss_of = |lg: &[LogitMap]| {
            let p: Vec<ProbabilityMap> = lg.iter().map(|l| softmax_map(l).unwrap()).collect();
            dice_loss(&p, &labels_v, &cfg, IGNORE_ID).unwrap().loss
        };
        let fd = fd_logit_grad(&loss_of, std::slice::from_ref(&logits), 1e-5);
        let err = max_rel_err(&out.grads, &fd);
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn ohem_gradient_matches_finite_differences() {
        let (logits, labels) = random_instance(31, 4, 4, 3, 0.0);
        let labels_v = vec![labels];
        let cfg = OhemConfig {
            k: Some(5),
            ..Default::default()
        };
        let out = ohem_loss(std::slice::from_ref(&logits), &labels_v, &cfg, IGNORE_ID).unwrap();
        let loss_of = |lg: &[LogitMap]| ohem_loss(lg, &labels_v, &cfg, IGNORE_ID).unwrap().loss;
        let fd = fd_logit_grad(&loss_of, std::slice::from_ref(&logits), 1e-6);
        let err = max_rel_err(&out.grads, &fd);
        assert!(err < 1e-5, "max rel err {err}");
    }

    #[test]
    fn total_loss_is_exact_sum_with_summed_gradient() {
        let (logits, labels) = random_instance(41, 4, 4, 3, 0.1);
        let labels_v = vec![labels];
        let ohem_cfg = OhemConfig {
            k: Some(6),
            ..Default::default()
        };
        let dice_cfg = DiceConfig::default();
        let (report, grads) =
            total_loss(std::slice::from_ref(&logits), &labels_v, &ohem_cfg, &dice_cfg, IGNORE_ID)
                .unwrap();
        assert_eq!(report.loss_total, report.loss_ohem + report.loss_dice);

        let loss_of = |lg: &[LogitMap]| {
            total_loss(lg, &labels_v, &ohem_cfg, &dice_cfg, IGNORE_ID)
                .unwrap()
                .0
                .loss_total
        };
        let fd = fd_logit_grad(&loss_of, std::slice::from_ref(&logits), 1e-5);
        let err = max_rel_err(&grads, &fd);
        assert!(err < 1e-5, "max rel err {err}");
    }

    #[test]
    fn batch_pooling_ranks_across_samples() {
        // Two 1x2 samples; hardest pixels sit in different samples.
        let c = 2;
        let mk = |t0: f64, t1: f64| {
            let mut lg = LogitMap::zeros(1, 2, c);
            for (px, t) in [t0, t1].into_iter().enumerate() {
                lg.data[px * c + 1] = (t.exp() - 1.0).ln();
            }
            lg
        };
        let logits = vec![mk(3.0, 0.5), mk(2.0, 1.0)];
        let labels = vec![
            LabelMask {
                height: 1,
                width: 2,
                data: vec![0, 0],
            },
            LabelMask {
                height: 1,
                width: 2,
                data: vec![0, 0],
            },
        ];
        let cfg = OhemConfig {
            k: Some(2),
            ..Default::default()
        };
        let out = ohem_loss(&logits, &labels, &cfg, IGNORE_ID).unwrap();
        assert!((out.loss - 2.5).abs() < 1e-12);
        // Selected pixels: sample 0 pixel 0 and sample 1 pixel 0.
        assert!(out.grads[0][0..c].iter().any(|&g| g != 0.0));
        assert!(out.grads[1][0..c].iter().any(|&g| g != 0.0));
        assert!(out.grads[0][c..2 * c].iter().all(|&g| g == 0.0));
        assert!(out.grads[1][c..2 * c].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn scalar_losses_invariant_under_pixel_permutation() {
        let (logits, labels) = random_instance(51, 4, 4, 3, 0.1);
        let cfg_o = OhemConfig {
            k: Some(5),
            ..Default::default()
        };
        let cfg_d = DiceConfig::default();
        let (rep, _) = total_loss(
            std::slice::from_ref(&logits),
            std::slice::from_ref(&labels),
            &cfg_o,
            &cfg_d,
            IGNORE_ID,
        )
        .unwrap();

        // Reverse the raster order of pixels in both logits and labels.
        let c = logits.num_classes;
        let n = 16;
        let mut rlogits = LogitMap::zeros(4, 4, c);
        let mut rlabels = LabelMask::filled(4, 4, 0);
        for px in 0..n {
            let src = n - 1 - px;
            rlogits.data[px * c..(px + 1) * c].copy_from_slice(&logits.data[src * c..(src + 1) * c]);
            rlabels.data[px] = labels.data[src];
        }
        let (rep2, _) = total_loss(
            std::slice::from_ref(&rlogits),
            std::slice::from_ref(&rlabels),
            &cfg_o,
            &cfg_d,
            IGNORE_ID,
        )
        .unwrap();
        assert!((rep.loss_ohem - rep2.loss_ohem).abs() < 1e-12);
        assert!((rep.loss_dice - rep2.loss_dice).abs() < 1e-12);
        // CE map permutes identically.
        let ce = pixel_ce_map(&logits, &labels, IGNORE_ID).unwrap();
        let rce = pixel_ce_map(&rlogits, &rlabels, IGNORE_ID).unwrap();
        for px in 0..n {
            assert_eq!(ce.values[px], rce.values[n - 1 - px]);
        }
    }

    #[test]
    fn scalar_losses_invariant_under_class_relabeling() {
        let (logits, labels) = random_instance(61, 4, 4, 3, 0.1);
        let perm = [2usize, 0, 1];
        let c = 3;
        let mut plogits = logits.clone();
        let mut plabels = labels.clone();
        for px in 0..16 {
            for k in 0..c {
                plogits.data[px * c + perm[k]] = logits.data[px * c + k];
            }
            if labels.data[px] != IGNORE_ID {
                plabels.data[px] = perm[labels.data[px] as usize] as u8;
            }
        }
        let cfg_o = OhemConfig {
            k: Some(5),
            ..Default::default()
        };
        let cfg_d = DiceConfig::default();
        let (a, _) = total_loss(
            std::slice::from_ref(&logits),
            std::slice::from_ref(&labels),
            &cfg_o,
            &cfg_d,
            IGNORE_ID,
        )
        .unwrap();
        let (b, _) = total_loss(
            std::slice::from_ref(&plogits),
            std::slice::from_ref(&plabels),
            &cfg_o,
            &cfg_d,
            IGNORE_ID,
        )
        .unwrap();
        assert!((a.loss_ohem - b.loss_ohem).abs() < 1e-12);
        assert!((a.loss_dice - b.loss_dice).abs() < 1e-12);
    }
}
