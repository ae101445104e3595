//! Runtime oracle/invariant suite behind the `selftest` command: gradient
//! checks against central finite differences, tiling coverage, hard-example
//! selection identities, optimizer arithmetic, and determinism probes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datamodel::{generate_synthetic_scene, Image, LabelMask, SynthSpec, IGNORE_ID};
use crate::error::{Error, Result};
use crate::losses::{
    dice_loss, ohem_loss, ohem_select, pixel_ce_map, softmax_map, total_loss,
    DiceConfig, OhemConfig,
};
use crate::model::{build_model_forward, init_parameters, model_forward, ModelConfig, ParameterSet};
use crate::sampler::{sample_crop, SamplePolicy};
use crate::tiler::{plan_tiles, tiled_inference, TileModel, TileSpec};
use crate::trainer::{adamw_step, cosine_lr, OptimizerState, TrainConfig};

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, run: impl FnOnce() -> Result<String>) -> CheckResult {
    match run() {
        Ok(detail) => CheckResult {
            name,
            passed: true,
            detail,
        },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: e.to_string(),
        },
    }
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Contract(msg.into()))
    }
}

/// Runs every check; callers print one line per result.
pub fn run_all() -> Vec<CheckResult> {
    vec![
        check("tile-plan-arithmetic", tile_plan_arithmetic),
        check("tile-coverage", tile_coverage),
        check("tiled-averaging-consistency", tiled_averaging_consistency),
        check("ohem-identities", ohem_identities),
        check("loss-gradients-vs-fd", loss_gradients_vs_fd),
        check("model-gradients-vs-fd", model_gradients_vs_fd),
        check("optimizer-arithmetic", optimizer_arithmetic),
        check("sampler-bias", sampler_bias),
        check("synthetic-determinism", synthetic_determinism),
        check("forward-determinism", forward_determinism),
    ]
}

fn tile_plan_arithmetic() -> Result<String> {
    let spec = TileSpec {
        tile_size: 1024,
        stride: 768,
    };
    let grid = plan_tiles(3000, 4000, &spec)?;
    ensure(
        grid.tile_count() == 20,
        format!("expected 20 windows for 3000x4000, got {}", grid.tile_count()),
    )?;
    ensure(
        grid.overlap_counts.iter().all(|&v| v >= 1),
        "uncovered pixels in the 3000x4000 plan",
    )?;
    Ok("3000x4000 @ 1024/768 -> 20 windows, full coverage".into())
}

fn tile_coverage() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let tile = 64;
        let h = rng.random_range(tile..300);
        let w = rng.random_range(tile..300);
        let stride = rng.random_range(16..=tile);
        let spec = TileSpec {
            tile_size: tile,
            stride,
        };
        let grid = plan_tiles(h, w, &spec)?;
        let mut marked = vec![0u32; h * w];
        for &(r0, c0) in &grid.origins {
            ensure(r0 + tile <= h && c0 + tile <= w, "window out of bounds")?;
            for r in r0..r0 + tile {
                for c in c0..c0 + tile {
                    marked[r * w + c] += 1;
                }
            }
        }
        ensure(
            marked == grid.overlap_counts,
            format!("overlap counts disagree with window arithmetic at {h}x{w}/{stride}"),
        )?;
        ensure(
            marked.iter().all(|&v| v >= 1),
            format!("coverage hole at {h}x{w} stride {stride}"),
        )?;
    }
    Ok("20 randomized grids: N_ov >= 1 everywhere, counts match window arithmetic".into())
}

struct ConstantModel {
    probs: Vec<f64>,
}

impl TileModel for ConstantModel {
    fn num_classes(&self) -> usize {
        self.probs.len()
    }
    fn predict_probs(&self, tile: &Image) -> Result<crate::datamodel::ProbabilityMap> {
        let mut out =
            crate::datamodel::ProbabilityMap::zeros(tile.height, tile.width, self.probs.len());
        for px in 0..tile.height * tile.width {
            out.data[px * self.probs.len()..(px + 1) * self.probs.len()]
                .copy_from_slice(&self.probs);
        }
        Ok(out)
    }
}

fn tiled_averaging_consistency() -> Result<String> {
    let model = ConstantModel {
        probs: vec![0.15, 0.6, 0.25],
    };
    let image = Image::zeros(96, 160, 3);
    let spec = TileSpec {
        tile_size: 64,
        stride: 48,
    };
    let out = tiled_inference(&model, &image, &spec, 1)?;
    let mut max_dev: f64 = 0.0;
    for px in 0..96 * 160 {
        for (k, q) in model.probs.iter().enumerate() {
            max_dev = max_dev.max((out.data[px * 3 + k] - q).abs());
        }
    }
    ensure(max_dev <= 1e-6, format!("constant-model deviation {max_dev}"))?;
    out.validate()?;
    Ok(format!(
        "constant model: max deviation {max_dev:.2e}, rows normalized"
    ))
}

fn random_loss_instance(seed: u64, h: usize, w: usize, c: usize) -> (crate::datamodel::LogitMap, LabelMask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut logits = crate::datamodel::LogitMap::zeros(h, w, c);
    for v in logits.data.iter_mut() {
        *v = rng.random_range(-2.0..2.0);
    }
    let mut labels = LabelMask::filled(h, w, 0);
    for v in labels.data.iter_mut() {
        *v = if rng.random_range(0.0..1.0) < 0.1 {
            IGNORE_ID
        } else {
            rng.random_range(0..c as u8)
        };
    }
    (logits, labels)
}

fn ohem_identities() -> Result<String> {
    for seed in 0..100 {
        let (logits, labels) = random_loss_instance(seed, 5, 6, 4);
        let cfg = OhemConfig {
            k: Some(usize::MAX),
            ..Default::default()
        };
        let out = ohem_loss(
            std::slice::from_ref(&logits),
            std::slice::from_ref(&labels),
            &cfg,
            IGNORE_ID,
        )?;
        let ce = pixel_ce_map(&logits, &labels, IGNORE_ID)?;
        let sum: f64 = ce
            .values
            .iter()
            .zip(&ce.valid)
            .filter(|(_, ok)| **ok)
            .map(|(v, _)| v)
            .sum();
        let mean = sum / ce.valid_count() as f64;
        ensure(
            (out.loss - mean).abs() < 1e-10,
            format!("k>=N loss {} != mean CE {mean}", out.loss),
        )?;

        // Full-sort oracle including tie behavior.
        let k = 7;
        let selected = ohem_select(&ce.values, &ce.valid, k)?;
        let mut oracle: Vec<usize> = (0..ce.values.len()).filter(|&i| ce.valid[i]).collect();
        oracle.sort_by(|&a, &b| {
            ce.values[b]
                .partial_cmp(&ce.values[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        oracle.truncate(k.min(oracle.len()));
        oracle.sort_unstable();
        ensure(selected == oracle, format!("selection mismatch at seed {seed}"))?;
    }
    Ok("100 instances: k>=N equals mean CE within 1e-10; selection matches sort oracle".into())
}

/// Max relative error between analytic and FD values. Differences below
/// `fd_resolution` count as zero: a central difference at step h carries an
/// intrinsic h²-scale truncation error, so pairs inside that band carry no
/// signal about the analytic gradient.
pub fn max_rel_err(analytic: &[f64], fd: &[f64], fd_resolution: f64) -> f64 {
    analytic
        .iter()
        .zip(fd)
        .map(|(&a, &f)| {
            let diff = (a - f).abs();
            if diff < fd_resolution {
                0.0
            } else {
                diff / a.abs().max(f.abs())
            }
        })
        .fold(0.0, f64::max)
}

fn loss_gradients_vs_fd() -> Result<String> {
    let mut worst: f64 = 0.0;
    for seed in [3u64, 5, 8] {
        let (logits, labels) = random_loss_instance(seed, 4, 4, 3);
        let labels_v = vec![labels];
        let ohem_cfg = OhemConfig {
            k: Some(6),
            ..Default::default()
        };
        let dice_cfg = DiceConfig::default();

        let probs = vec![softmax_map(&logits)?];
        let dice_out = dice_loss(&probs, &labels_v, &dice_cfg, IGNORE_ID)?;
        let ohem_out = ohem_loss(std::slice::from_ref(&logits), &labels_v, &ohem_cfg, IGNORE_ID)?;
        let (_, total_grads) = total_loss(
            std::slice::from_ref(&logits),
            &labels_v,
            &ohem_cfg,
            &dice_cfg,
            IGNORE_ID,
        )?;

        let step = 1e-5;
        let mut fd_dice = vec![0.0; logits.data.len()];
        let mut fd_ohem = vec![0.0; logits.data.len()];
        let mut fd_total = vec![0.0; logits.data.len()];
        for i in 0..logits.data.len() {
            let eval = |delta: f64| -> Result<(f64, f64, f64)> {
                let mut lg = logits.clone();
                lg.data[i] += delta;
                let p = vec![softmax_map(&lg)?];
                let d = dice_loss(&p, &labels_v, &dice_cfg, IGNORE_ID)?.loss;
                let o = ohem_loss(std::slice::from_ref(&lg), &labels_v, &ohem_cfg, IGNORE_ID)?.loss;
                Ok((d, o, d + o))
            };
            let (dp, op, tp) = eval(step)?;
            let (dm, om, tm) = eval(-step)?;
            fd_dice[i] = (dp - dm) / (2.0 * step);
            fd_ohem[i] = (op - om) / (2.0 * step);
            fd_total[i] = (tp - tm) / (2.0 * step);
        }
        worst = worst
            .max(max_rel_err(&dice_out.grads[0], &fd_dice, 1e-9))
            .max(max_rel_err(&ohem_out.grads[0], &fd_ohem, 1e-9))
            .max(max_rel_err(&total_grads[0], &fd_total, 1e-9));
    }
    ensure(
        worst < 1e-5,
        format!("loss gradient max relative error {worst:.2e} >= 1e-5"),
    )?;
    Ok(format!("dice/ohem/total vs central FD: max rel err {worst:.2e}"))
}

/// Full-model parameter-gradient check on a 32x32 input: analytic gradients
/// of the total loss vs central finite differences on `samples` randomly
/// chosen parameters. Returns the max relative error observed.
///
/// Runs with k = N: the saturated objective equals mean CE + Dice and is
/// smooth, so the FD quotient at step ~1e-3 is well defined. With k < N the
/// sorted per-pixel losses sit ~1e-3 apart around the cutoff and the FD step
/// itself flips hard-set membership; the selection-constant gradient is
/// verified separately at the loss level with step 1e-5.
pub fn model_gradient_check(seed: u64, samples: usize, step: f64) -> Result<f64> {
    let cfg = ModelConfig::mit_nano(3);
    let mut params = init_parameters(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let mut image = Image::zeros(32, 32, 3);
    for v in image.data.iter_mut() {
        *v = rng.random_range(0.0..1.0);
    }
    let mut labels = LabelMask::filled(32, 32, 0);
    for v in labels.data.iter_mut() {
        *v = rng.random_range(0..3);
    }
    let labels_v = vec![labels];
    let ohem_cfg = OhemConfig {
        k: Some(usize::MAX),
        ..Default::default()
    };
    let dice_cfg = DiceConfig::default();

    let loss_of = |p: &ParameterSet| -> Result<f64> {
        let lg = model_forward(&image, &cfg, p)?;
        Ok(total_loss(
            std::slice::from_ref(&lg),
            &labels_v,
            &ohem_cfg,
            &dice_cfg,
            IGNORE_ID,
        )?
        .0
        .loss_total)
    };

    let fwd = build_model_forward(&image, &cfg, &params)?;
    let logits = fwd.logits();
    let (_, logit_grads) = total_loss(
        std::slice::from_ref(&logits),
        &labels_v,
        &ohem_cfg,
        &dice_cfg,
        IGNORE_ID,
    )?;
    let param_grads = fwd.backward(&logit_grads[0])?;
    drop(fwd);

    let mut analytic = Vec::with_capacity(samples);
    let mut fd = Vec::with_capacity(samples);
    for _ in 0..samples {
        let pi = rng.random_range(0..params.len());
        let n = params.entry(pi).data.len();
        let j = rng.random_range(0..n);
        analytic.push(param_grads[pi][j]);
        let orig = params.entry(pi).data[j];
        params.data_mut(pi)[j] = orig + step;
        let lp = loss_of(&params)?;
        params.data_mut(pi)[j] = orig - step;
        let lm = loss_of(&params)?;
        params.data_mut(pi)[j] = orig;
        fd.push((lp - lm) / (2.0 * step));
    }
    // Resolution of a step-1e-3 central difference on this loss surface.
    Ok(max_rel_err(&analytic, &fd, 1e-5))
}

fn model_gradients_vs_fd() -> Result<String> {
    let worst = model_gradient_check(2024, 50, 1e-3)?;
    ensure(
        worst < 1e-3,
        format!("model gradient max relative error {worst:.2e} >= 1e-3"),
    )?;
    Ok(format!("50 sampled parameters vs central FD: max rel err {worst:.2e}"))
}

fn optimizer_arithmetic() -> Result<String> {
    let lr0 = 6e-5;
    ensure(cosine_lr(0, 300, lr0, 0.0) == lr0, "cosine t=0 != lr0")?;
    ensure(
        (cosine_lr(300, 300, lr0, 0.0)).abs() < 1e-20,
        "cosine t=T != lr_min",
    )?;
    ensure(
        (cosine_lr(150, 300, lr0, 0.0) - lr0 / 2.0).abs() < 1e-18,
        "cosine midpoint != (lr0+lr_min)/2",
    )?;

    let cfg = TrainConfig::default();
    let mut params = ParameterSet::new();
    params.push("w", vec![1], vec![1.0]);
    let mut state = OptimizerState::zeros_like(&params);
    adamw_step(&mut params, &[vec![1.0]], &mut state, cfg.lr0, &cfg);
    let expect = 1.0 - cfg.lr0 * (1.0 / (1.0 + cfg.eps) + cfg.weight_decay);
    let got = params.get("w").unwrap().data[0];
    ensure(
        (got - expect).abs() < 1e-18,
        format!("adamw single step {got} != {expect}"),
    )?;
    Ok("cosine endpoints/midpoint and decoupled-decay step verified".into())
}

fn sampler_bias() -> Result<String> {
    let img = Image::zeros(256, 256, 1);
    let mut mask = LabelMask::filled(256, 256, 0);
    for r in 120..123 {
        for c in 120..123 {
            mask.set(r, c, 5);
        }
    }
    let pol = SamplePolicy {
        crop_size: 64,
        rare_fraction: 0.5,
        rare_set: vec![3, 4, 5],
        center_jitter: Some(0),
        per_class_uniform: false,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 10_000;
    let mut hits = 0usize;
    for _ in 0..n {
        let s = sample_crop(&img, &mask, &pol, &mut rng)?;
        if s.mask.get(32, 32) == 5 {
            hits += 1;
        }
    }
    let frac = hits as f64 / n as f64;
    ensure(
        (frac - 0.5).abs() <= 0.02,
        format!("rare-centered fraction {frac} outside 0.50 ± 0.02"),
    )?;
    Ok(format!("10,000 crops: rare-centered fraction {frac:.4}"))
}

fn synthetic_determinism() -> Result<String> {
    let spec = SynthSpec::default_11(96, 96);
    let (ia, ma) = generate_synthetic_scene(42, &spec)?;
    let (ib, mb) = generate_synthetic_scene(42, &spec)?;
    ensure(ia == ib && ma == mb, "same (seed, spec) produced different scenes")?;
    Ok("scene generation is a pure function of (seed, spec)".into())
}

fn forward_determinism() -> Result<String> {
    let cfg = ModelConfig::mit_nano(11);
    let params = init_parameters(&cfg, 1)?;
    let spec = SynthSpec::default_11(64, 64);
    let (img, _) = generate_synthetic_scene(3, &spec)?;
    let a = model_forward(&img, &cfg, &params)?;
    let b = model_forward(&img, &cfg, &params)?;
    ensure(a.data == b.data, "two forwards on identical input differ")?;
    Ok("identical (seed, config, input) gives bit-identical logits".into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        let results = run_all();
        for r in &results {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
        assert_eq!(results.len(), 10);
    }
}


