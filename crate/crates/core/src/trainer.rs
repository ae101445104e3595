//! Optimization loop: AdamW with decoupled weight decay, per-step cosine
//! annealing, class-aware batch assembly, checkpointing, and a CSV step log.
//!
//! Every random draw is derived from (seed, epoch) or (seed, step), so a run
//! can be resumed from a checkpoint and continue bit-identically to an
//! uninterrupted run.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Image, LabelMask};
use crate::error::{Error, Result};
use crate::losses::{mean_ce_loss, total_loss, DiceConfig, LossReport, OhemConfig};
use crate::model::{
    build_model_forward, save_checkpoint, CheckpointDtype, ModelConfig, ParameterSet,
};
use crate::sampler::{augment, sample_crop, AugConfig, SamplePolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Hard-example-mined cross-entropy plus Dice.
    #[default]
    OhemDice,
    /// Plain mean cross-entropy (the baseline objective).
    PlainCe,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr0")]
    pub lr0: f64,
    #[serde(default)]
    pub lr_min: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub seed: u64,
    /// Steps per epoch; defaults to one crop per training image per epoch,
    /// i.e. ceil(images / batch_size).
    #[serde(default)]
    pub steps_per_epoch: Option<usize>,
    /// Write a checkpoint every N epochs (plus the final one).
    #[serde(default = "default_ckpt_every")]
    pub checkpoint_every: usize,
    /// Optional global gradient-norm clip.
    #[serde(default)]
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub loss_mode: LossMode,
}

fn default_epochs() -> usize {
    30
}
fn default_batch() -> usize {
    2
}
fn default_lr0() -> f64 {
    6e-5
}
fn default_wd() -> f64 {
    0.01
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_ckpt_every() -> usize {
    10
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: default_epochs(),
            batch_size: default_batch(),
            lr0: default_lr0(),
            lr_min: 0.0,
            weight_decay: default_wd(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            seed: 0,
            steps_per_epoch: None,
            checkpoint_every: default_ckpt_every(),
            clip_norm: None,
            loss_mode: LossMode::OhemDice,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr0 > self.lr_min && self.lr_min >= 0.0) {
            return Err(Error::Config(format!(
                "need lr0 > lr_min >= 0, got lr0 {} lr_min {}",
                self.lr0, self.lr_min
            )));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// lr(t) = lr_min + 0.5 (lr0 − lr_min)(1 + cos(π t / T)).
pub fn cosine_lr(step: usize, total: usize, lr0: f64, lr_min: f64) -> f64 {
    let t = step as f64 / total.max(1) as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// First/second gradient moments plus the bias-correction step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn zeros_like(params: &ParameterSet) -> Self {
        OptimizerState {
            m: params.entries().iter().map(|e| vec![0.0; e.data.len()]).collect(),
            v: params.entries().iter().map(|e| vec![0.0; e.data.len()]).collect(),
            step: 0,
        }
    }

    /// Packs moments into the checkpoint container format.
    pub fn to_container(&self, params: &ParameterSet) -> ParameterSet {
        let mut c = ParameterSet::new();
        c.push("step", vec![1], vec![self.step as f64]);
        for (i, e) in params.entries().iter().enumerate() {
            c.push(format!("m.{}", e.name), e.shape.clone(), self.m[i].clone());
            c.push(format!("v.{}", e.name), e.shape.clone(), self.v[i].clone());
        }
        c
    }

    pub fn from_container(c: &ParameterSet, params: &ParameterSet) -> Result<Self> {
        let step = c
            .get("step")
            .ok_or_else(|| Error::Validation("optimizer container missing step".into()))?
            .data[0] as u64;
        let mut m = Vec::with_capacity(params.len());
        let mut v = Vec::with_capacity(params.len());
        for e in params.entries() {
            let me = c
                .get(&format!("m.{}", e.name))
                .ok_or_else(|| Error::Validation(format!("optimizer container missing m.{}", e.name)))?;
            let ve = c
                .get(&format!("v.{}", e.name))
                .ok_or_else(|| Error::Validation(format!("optimizer container missing v.{}", e.name)))?;
            m.push(me.data.clone());
            v.push(ve.data.clone());
        }
        Ok(OptimizerState { m, v, step })
    }
}

/// One decoupled-weight-decay Adam update:
/// m ← β₁m + (1−β₁)g; v ← β₂v + (1−β₂)g²; bias-corrected;
/// θ ← θ − lr·(m̂/(√v̂ + eps) + wd·θ).
pub fn adamw_step(
    params: &mut ParameterSet,
    grads: &[Vec<f64>],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, g) in grads.iter().enumerate() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let theta = params.data_mut(i);
        for j in 0..g.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            theta[j] -= lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * theta[j]);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_ohem: f64,
    pub loss_dice: f64,
    pub kept_pixels: usize,
}

pub fn log_to_csv(log: &[StepLog]) -> String {
    let mut out = String::from("step,lr,loss_total,loss_ohem,loss_dice,kept_pixels\n");
    for row in log {
        out.push_str(&format!(
            "{},{:.12e},{:.12e},{:.12e},{:.12e},{}\n",
            row.step, row.lr, row.loss_total, row.loss_ohem, row.loss_dice, row.kept_pixels
        ));
    }
    out
}

fn mix_seed(seed: u64, tag: u64, index: u64) -> u64 {
    // splitmix-style mixing keeps per-step streams independent of history.
    let mut x = seed ^ tag.wrapping_mul(0x9e3779b97f4a7c15) ^ index.wrapping_mul(0xd1342543de82ef95);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

const EPOCH_TAG: u64 = 1;
const STEP_TAG: u64 = 2;

/// The resumable training loop. `data` holds the full training split in
/// memory (desk-scale datasets are small).
pub struct Trainer<'a> {
    pub model_cfg: &'a ModelConfig,
    pub cfg: &'a TrainConfig,
    pub ohem_cfg: &'a OhemConfig,
    pub dice_cfg: &'a DiceConfig,
    pub policy: &'a SamplePolicy,
    pub aug: &'a AugConfig,
    data: &'a [(Image, LabelMask)],
    ignore_id: u8,
    pub params: ParameterSet,
    pub state: OptimizerState,
    pub step: usize,
    pub log: Vec<StepLog>,
}

impl<'a> Trainer<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        data: &'a [(Image, LabelMask)],
        model_cfg: &'a ModelConfig,
        cfg: &'a TrainConfig,
        ohem_cfg: &'a OhemConfig,
        dice_cfg: &'a DiceConfig,
        policy: &'a SamplePolicy,
        aug: &'a AugConfig,
        ignore_id: u8,
        params: ParameterSet,
        state: OptimizerState,
        step: usize,
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Validation("training dataset is empty".into()));
        }
        cfg.validate()?;
        model_cfg.validate()?;
        ohem_cfg.validate()?;
        dice_cfg.validate()?;
        policy.validate()?;
        aug.validate()?;
        Ok(Trainer {
            model_cfg,
            cfg,
            ohem_cfg,
            dice_cfg,
            policy,
            aug,
            data,
            ignore_id,
            params,
            state,
            step,
            log: Vec::new(),
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.cfg
            .steps_per_epoch
            .unwrap_or_else(|| self.data.len().div_ceil(self.cfg.batch_size))
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.epochs * self.steps_per_epoch()
    }

    /// Image indices for one step: a seeded per-epoch shuffle walked in
    /// batch-sized groups (one crop per image per epoch at default settings).
    fn batch_indices(&self, step: usize) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let epoch = step / spe;
        let pos = step % spe;
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.cfg.seed, EPOCH_TAG, epoch as u64));
        // Fisher-Yates for a stable, seed-driven permutation.
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        (0..self.cfg.batch_size)
            .map(|b| order[(pos * self.cfg.batch_size + b) % order.len()])
            .collect()
    }

    /// Runs one optimization step; returns the loss report.
    pub fn run_step(&mut self) -> Result<LossReport> {
        let step = self.step;
        let total = self.total_steps();
        // Worker 0's stream; parallel samplers would derive seed + worker_id.
        let mut rng =
            ChaCha8Rng::seed_from_u64(mix_seed(self.cfg.seed, STEP_TAG, step as u64));

        let mut images = Vec::with_capacity(self.cfg.batch_size);
        let mut masks = Vec::with_capacity(self.cfg.batch_size);
        for idx in self.batch_indices(step) {
            let (img, mask) = &self.data[idx];
            let crop = sample_crop(img, mask, self.policy, &mut rng)?;
            let (img, mask) = augment(&crop.image, &crop.mask, self.aug, &mut rng);
            images.push(img);
            masks.push(mask);
        }

        let forwards: Vec<_> = images
            .iter()
            .map(|img| build_model_forward(img, self.model_cfg, &self.params))
            .collect::<Result<_>>()?;
        let logits: Vec<_> = forwards.iter().map(|f| f.logits()).collect();

        let (report, logit_grads) = match self.cfg.loss_mode {
            LossMode::OhemDice => {
                total_loss(&logits, &masks, self.ohem_cfg, self.dice_cfg, self.ignore_id)?
            }
            LossMode::PlainCe => {
                let out = mean_ce_loss(&logits, &masks, self.ignore_id)?;
                let report = LossReport {
                    loss_ohem: out.loss,
                    loss_dice: 0.0,
                    loss_total: out.loss,
                    kept_pixel_count: out.kept,
                    per_class_dice: Vec::new(),
                };
                (report, out.grads)
            }
        };
        if !report.loss_total.is_finite() {
            return Err(Error::Validation(format!(
                "non-finite loss at step {step}"
            )));
        }

        let mut grads: Vec<Vec<f64>> = self
            .params
            .entries()
            .iter()
            .map(|e| vec![0.0; e.data.len()])
            .collect();
        for (fwd, lg) in forwards.iter().zip(&logit_grads) {
            let sample_grads = fwd.backward(lg)?;
            for (acc, g) in grads.iter_mut().zip(sample_grads) {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
        if let Some(clip) = self.cfg.clip_norm {
            clip_gradients(&mut grads, clip);
        }

        let lr = cosine_lr(step, total, self.cfg.lr0, self.cfg.lr_min);
        adamw_step(&mut self.params, &grads, &mut self.state, lr, self.cfg);
        self.log.push(StepLog {
            step,
            lr,
            loss_total: report.loss_total,
            loss_ohem: report.loss_ohem,
            loss_dice: report.loss_dice,
            kept_pixels: report.kept_pixel_count,
        });
        self.step += 1;
        Ok(report)
    }

    pub fn run_steps(&mut self, n: usize) -> Result<()> {
        for _ in 0..n {
            self.run_step()?;
        }
        Ok(())
    }
}

fn clip_gradients(grads: &mut [Vec<f64>], clip: f64) {
    let norm: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > clip {
        let scale = clip / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
}

/// Artifacts written by a full training run.
pub struct TrainResult {
    pub params: ParameterSet,
    pub state: OptimizerState,
    pub log: Vec<StepLog>,
    pub checkpoints: Vec<PathBuf>,
}

/// Orchestrates a complete run: init (or provided) weights, epoch loop,
/// periodic + final checkpoints, CSV log. With `run_dir = None` nothing is
/// written to disk.
#[allow(clippy::too_many_arguments)]
pub fn train(
    data: &[(Image, LabelMask)],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    ohem_cfg: &OhemConfig,
    dice_cfg: &DiceConfig,
    policy: &SamplePolicy,
    aug: &AugConfig,
    ignore_id: u8,
    init: ParameterSet,
    run_dir: Option<&Path>,
) -> Result<TrainResult> {
    let state = OptimizerState::zeros_like(&init);
    let mut trainer = Trainer::new(
        data, model_cfg, cfg, ohem_cfg, dice_cfg, policy, aug, ignore_id, init, state, 0,
    )?;
    let fingerprint = model_cfg.fingerprint();
    let mut checkpoints = Vec::new();
    if let Some(dir) = run_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let spe = trainer.steps_per_epoch();
    let total = trainer.total_steps();
    let mut done = 0usize;
    for epoch in 0..cfg.epochs {
        let in_epoch = spe.min(total - done);
        let outcome = trainer.run_steps(in_epoch);
        done += in_epoch;
        if let Err(e) = outcome {
            // Keep whatever checkpoints already exist; surface the step index.
            flush_artifacts(run_dir, &trainer, &fingerprint, &mut checkpoints, None)?;
            return Err(e);
        }
        if (epoch + 1) % cfg.checkpoint_every == 0 && epoch + 1 < cfg.epochs {
            flush_artifacts(
                run_dir,
                &trainer,
                &fingerprint,
                &mut checkpoints,
                Some(format!("checkpoint_epoch{:04}.dsck", epoch + 1)),
            )?;
        }
    }
    flush_artifacts(
        run_dir,
        &trainer,
        &fingerprint,
        &mut checkpoints,
        Some("checkpoint_final.dsck".to_string()),
    )?;
    Ok(TrainResult {
        params: trainer.params,
        state: trainer.state,
        log: trainer.log,
        checkpoints,
    })
}

fn flush_artifacts(
    run_dir: Option<&Path>,
    trainer: &Trainer,
    fingerprint: &str,
    checkpoints: &mut Vec<PathBuf>,
    checkpoint_name: Option<String>,
) -> Result<()> {
    let Some(dir) = run_dir else { return Ok(()) };
    if let Some(name) = checkpoint_name {
        let path = dir.join(&name);
        save_checkpoint(&trainer.params, fingerprint, CheckpointDtype::F64, &path)?;
        if name == "checkpoint_final.dsck" {
            let opt = trainer.state.to_container(&trainer.params);
            save_checkpoint(&opt, fingerprint, CheckpointDtype::F64, &dir.join("optimizer_final.dsck"))?;
        }
        checkpoints.push(path);
    }
    let log_path = dir.join("training_log.csv");
    std::fs::write(&log_path, log_to_csv(&trainer.log)).map_err(|e| Error::io(&log_path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{generate_synthetic_scene, SynthSpec, IGNORE_ID};
    use crate::model::init_parameters;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        let (lr0, lr_min) = (6e-5, 0.0);
        assert_eq!(cosine_lr(0, 100, lr0, lr_min), lr0);
        assert!((cosine_lr(100, 100, lr0, lr_min) - lr_min).abs() < 1e-20);
        let mid = cosine_lr(50, 100, lr0, lr_min);
        assert!((mid - (lr0 + lr_min) / 2.0).abs() < 1e-18);
    }

    #[test]
    fn adamw_zero_gradient_is_pure_decay() {
        let cfg = TrainConfig::default();
        let mut params = ParameterSet::new();
        params.push("w", vec![2], vec![1.0, -3.0]);
        let mut state = OptimizerState::zeros_like(&params);
        let lr = 0.01;
        adamw_step(&mut params, &[vec![0.0, 0.0]], &mut state, lr, &cfg);
        let expect = [1.0 * (1.0 - lr * cfg.weight_decay), -3.0 * (1.0 - lr * cfg.weight_decay)];
        for (got, want) in params.get("w").unwrap().data.iter().zip(&expect) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn adamw_single_step_hand_value() {
        // θ=1, g=1, defaults: m̂=1, v̂=1 → θ' = 1 − lr(1/(1+eps) + 0.01).
        let cfg = TrainConfig::default();
        let mut params = ParameterSet::new();
        params.push("w", vec![1], vec![1.0]);
        let mut state = OptimizerState::zeros_like(&params);
        let lr = cfg.lr0;
        adamw_step(&mut params, &[vec![1.0]], &mut state, lr, &cfg);
        let expect = 1.0 - lr * (1.0 / (1.0 + cfg.eps) + 0.01);
        let got = params.get("w").unwrap().data[0];
        assert!((got - expect).abs() < 1e-18, "{got} vs {expect}");
    }

    #[test]
    fn adamw_steps_are_deterministic() {
        let cfg = TrainConfig::default();
        let run = || {
            let mut params = ParameterSet::new();
            params.push("w", vec![3], vec![0.5, -0.25, 2.0]);
            let mut state = OptimizerState::zeros_like(&params);
            adamw_step(&mut params, &[vec![0.1, -0.2, 0.3]], &mut state, 1e-3, &cfg);
            adamw_step(&mut params, &[vec![0.1, -0.2, 0.3]], &mut state, 1e-3, &cfg);
            params.get("w").unwrap().data.clone()
        };
        assert_eq!(run(), run());
    }

    fn tiny_task(n_scenes: usize, size: usize) -> Vec<(Image, LabelMask)> {
        let spec = SynthSpec::default_11(size, size);
        (0..n_scenes)
            .map(|s| generate_synthetic_scene(1000 + s as u64, &spec).unwrap())
            .collect()
    }

    fn tiny_configs(steps_scale: usize) -> (ModelConfig, TrainConfig, OhemConfig, DiceConfig, SamplePolicy, AugConfig) {
        let model = ModelConfig::mit_nano(11);
        let train = TrainConfig {
            epochs: steps_scale,
            batch_size: 2,
            lr0: 2e-3,
            seed: 7,
            checkpoint_every: 1000,
            ..Default::default()
        };
        let policy = SamplePolicy {
            crop_size: 64,
            rare_fraction: 0.5,
            rare_set: vec![3, 4, 5],
            center_jitter: Some(8),
            per_class_uniform: false,
        };
        (model, train, OhemConfig::default(), DiceConfig::default(), policy, AugConfig::default())
    }

    #[test]
    fn smoke_descent_on_synthetic_task() {
        // 200 steps; the final 20-step mean total loss must sit below the
        // first 20-step mean.
        let data = tiny_task(8, 128);
        let (model_cfg, mut cfg, ohem, dice, policy, aug) = tiny_configs(1);
        cfg.steps_per_epoch = Some(200);
        let init = init_parameters(&model_cfg, cfg.seed).unwrap();
        let result = train(
            &data, &model_cfg, &cfg, &ohem, &dice, &policy, &aug, IGNORE_ID, init, None,
        )
        .unwrap();
        assert_eq!(result.log.len(), 200);
        let first: f64 = result.log[..20].iter().map(|r| r.loss_total).sum::<f64>() / 20.0;
        let last: f64 = result.log[180..].iter().map(|r| r.loss_total).sum::<f64>() / 20.0;
        assert!(
            last < first,
            "no descent: first-20 mean {first}, last-20 mean {last}"
        );
        // lr trace matches the closed form at every logged step.
        let total = result.log.len();
        for row in &result.log {
            let expect = cfg.lr_min
                + 0.5 * (cfg.lr0 - cfg.lr_min)
                    * (1.0 + (std::f64::consts::PI * row.step as f64 / total as f64).cos());
            assert!((row.lr - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn resume_from_checkpoint_is_bit_identical() {
        let data = tiny_task(4, 96);
        let (model_cfg, mut cfg, ohem, dice, policy, aug) = tiny_configs(1);
        cfg.steps_per_epoch = Some(6);
        let init = init_parameters(&model_cfg, 3).unwrap();

        // Uninterrupted: 6 steps.
        let mut full = Trainer::new(
            &data, &model_cfg, &cfg, &ohem, &dice, &policy, &aug, IGNORE_ID,
            init.clone(), OptimizerState::zeros_like(&init), 0,
        )
        .unwrap();
        full.run_steps(6).unwrap();

        // Interrupted at step 3: round-trip params + moments through the
        // checkpoint container, then continue.
        let mut first_half = Trainer::new(
            &data, &model_cfg, &cfg, &ohem, &dice, &policy, &aug, IGNORE_ID,
            init.clone(), OptimizerState::zeros_like(&init), 0,
        )
        .unwrap();
        first_half.run_steps(3).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let ck = dir.path().join("p.dsck");
        let opt = dir.path().join("o.dsck");
        save_checkpoint(&first_half.params, "fp", CheckpointDtype::F64, &ck).unwrap();
        save_checkpoint(&first_half.state.to_container(&first_half.params), "fp", CheckpointDtype::F64, &opt).unwrap();

        let (params2, _, _) = crate::model::load_checkpoint(&ck).unwrap();
        let (optc, _, _) = crate::model::load_checkpoint(&opt).unwrap();
        let state2 = OptimizerState::from_container(&optc, &params2).unwrap();
        let mut resumed = Trainer::new(
            &data, &model_cfg, &cfg, &ohem, &dice, &policy, &aug, IGNORE_ID,
            params2, state2, 3,
        )
        .unwrap();
        resumed.run_steps(3).unwrap();

        assert_eq!(full.params, resumed.params);
    }

    #[test]
    fn identical_seeds_give_identical_runs() {
        let data = tiny_task(3, 96);
        let (model_cfg, mut cfg, ohem, dice, policy, aug) = tiny_configs(2);
        cfg.steps_per_epoch = Some(2);
        let run = || {
            let init = init_parameters(&model_cfg, cfg.seed).unwrap();
            train(
                &data, &model_cfg, &cfg, &ohem, &dice, &policy, &aug, IGNORE_ID, init, None,
            )
            .unwrap()
            .params
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn plain_ce_mode_reports_zero_dice() {
        let data = tiny_task(2, 96);
        let (model_cfg, mut cfg, ohem, dice, policy, aug) = tiny_configs(1);
        cfg.steps_per_epoch = Some(1);
        cfg.loss_mode = LossMode::PlainCe;
        let init = init_parameters(&model_cfg, 1).unwrap();
        let result = train(
            &data, &model_cfg, &cfg, &ohem, &dice, &policy, &aug, IGNORE_ID, init, None,
        )
        .unwrap();
        assert_eq!(result.log[0].loss_dice, 0.0);
        assert_eq!(result.log[0].loss_total, result.log[0].loss_ohem);
        // Plain CE keeps every valid pixel.
        assert_eq!(result.log[0].kept_pixels, 2 * 64 * 64);
    }

    #[test]
    fn checkpoints_and_log_written() {
        let data = tiny_task(2, 96);
        let (model_cfg, mut cfg, ohem, dice, policy, aug) = tiny_configs(2);
        cfg.steps_per_epoch = Some(1);
        cfg.checkpoint_every = 1;
        let dir = tempfile::tempdir().unwrap();
        let init = init_parameters(&model_cfg, 1).unwrap();
        let result = train(
            &data, &model_cfg, &cfg, &ohem, &dice, &policy, &aug, IGNORE_ID, init,
            Some(dir.path()),
        )
        .unwrap();
        assert!(dir.path().join("checkpoint_epoch0001.dsck").exists());
        assert!(dir.path().join("checkpoint_final.dsck").exists());
        assert!(dir.path().join("optimizer_final.dsck").exists());
        let log = std::fs::read_to_string(dir.path().join("training_log.csv")).unwrap();
        assert!(log.starts_with("step,lr,loss_total,loss_ohem,loss_dice,kept_pixels\n"));
        assert_eq!(log.lines().count(), 1 + result.log.len());
    }
}
