//! Named parameter storage, seeded initialization, and the checkpoint
//! container.
//!
//! Checkpoint layout (little-endian throughout):
//!
//! ```text
//! magic            4 bytes  = "DSCK"
//! version          u32      = 1
//! dtype            u8       0 = f32 payloads, 1 = f64 payloads
//! fingerprint_len  u32
//! fingerprint      utf-8    (config fingerprint, sha-256 hex)
//! entry_count      u32
//! per entry:
//!   name_len  u16, name utf-8
//!   ndim      u8,  dims u32 × ndim
//!   payload   prod(dims) little-endian floats of the header dtype
//! ```
//!
//! Training checkpoints default to f64 payloads so a save/load round trip is
//! bit-exact; f32 payloads are accepted on read and available for export.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::config::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Flat, ordered collection of named weight arrays.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet {
    entries: Vec<ParamEntry>,
    by_name: BTreeMap<String, usize>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        let name = name.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "entry {name} shape/data mismatch"
        );
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, shape, data });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, idx: usize) -> &ParamEntry {
        &self.entries[idx]
    }

    pub fn data_mut(&mut self, idx: usize) -> &mut Vec<f64> {
        &mut self.entries[idx].data
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.by_name.get(name).map(|&i| &self.entries[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn total_parameters(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }
}

/// Canonical (name, shape) enumeration for a model configuration; both
/// initialization and checkpoint validation are derived from this list.
pub fn parameter_specs(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut specs = Vec::new();
    let mut cin = config.in_channels;
    for s in 0..4 {
        let dim = config.stage_dims[s];
        let merge = &config.patch_merge[s];
        specs.push((
            format!("enc.s{s}.merge.w"),
            vec![dim, cin, merge.kernel, merge.kernel],
        ));
        specs.push((format!("enc.s{s}.merge.b"), vec![dim]));
        specs.push((format!("enc.s{s}.embed_ln.g"), vec![dim]));
        specs.push((format!("enc.s{s}.embed_ln.b"), vec![dim]));
        let hidden = dim * config.mlp_ratio;
        for b in 0..config.stage_depths[s] {
            let p = format!("enc.s{s}.b{b}");
            specs.push((format!("{p}.ln1.g"), vec![dim]));
            specs.push((format!("{p}.ln1.b"), vec![dim]));
            specs.push((format!("{p}.attn.q.w"), vec![dim, dim]));
            specs.push((format!("{p}.attn.q.b"), vec![dim]));
            let sr = config.sr_ratios[s];
            if sr > 1 {
                specs.push((format!("{p}.attn.sr.w"), vec![dim, dim, sr, sr]));
                specs.push((format!("{p}.attn.sr.b"), vec![dim]));
                specs.push((format!("{p}.attn.srln.g"), vec![dim]));
                specs.push((format!("{p}.attn.srln.b"), vec![dim]));
            }
            specs.push((format!("{p}.attn.k.w"), vec![dim, dim]));
            specs.push((format!("{p}.attn.k.b"), vec![dim]));
            specs.push((format!("{p}.attn.v.w"), vec![dim, dim]));
            specs.push((format!("{p}.attn.v.b"), vec![dim]));
            specs.push((format!("{p}.attn.o.w"), vec![dim, dim]));
            specs.push((format!("{p}.attn.o.b"), vec![dim]));
            specs.push((format!("{p}.ln2.g"), vec![dim]));
            specs.push((format!("{p}.ln2.b"), vec![dim]));
            specs.push((format!("{p}.ffn.fc1.w"), vec![dim, hidden]));
            specs.push((format!("{p}.ffn.fc1.b"), vec![hidden]));
            specs.push((format!("{p}.ffn.dw.w"), vec![hidden, 3, 3]));
            specs.push((format!("{p}.ffn.dw.b"), vec![hidden]));
            specs.push((format!("{p}.ffn.fc2.w"), vec![hidden, dim]));
            specs.push((format!("{p}.ffn.fc2.b"), vec![dim]));
        }
        cin = dim;
    }
    let d = config.decoder_dim;
    for s in 0..4 {
        specs.push((format!("dec.proj{s}.w"), vec![config.stage_dims[s], d]));
        specs.push((format!("dec.proj{s}.b"), vec![d]));
    }
    specs.push(("dec.fuse.w".into(), vec![4 * d, d]));
    specs.push(("dec.fuse.b".into(), vec![d]));
    specs.push(("dec.cls.w".into(), vec![d, config.num_classes]));
    specs.push(("dec.cls.b".into(), vec![config.num_classes]));
    specs
}

/// Total scalar parameter count for a configuration.
pub fn parameter_count(config: &ModelConfig) -> usize {
    parameter_specs(config)
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

const INIT_SIGMA: f64 = 0.02;

/// Standard normal via Box-Muller; deterministic for a given rng stream.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Normal(0, sigma) truncated to ±2 sigma by resampling.
fn trunc_normal(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    loop {
        let z = normal(rng);
        if z.abs() <= 2.0 {
            return z * sigma;
        }
    }
}

/// Deterministic initialization: truncated-normal weights (σ = 0.02),
/// zero biases, unit layer-norm gains.
pub fn init_parameters(config: &ModelConfig, seed: u64) -> Result<ParameterSet> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParameterSet::new();
    for (name, shape) in parameter_specs(config) {
        let n: usize = shape.iter().product();
        let data = if name.ends_with(".b") && !name.contains("ln") && !name.contains("srln") {
            vec![0.0; n]
        } else if name.ends_with("ln.g") || name.ends_with("ln1.g") || name.ends_with("ln2.g") {
            vec![1.0; n]
        } else if name.ends_with("ln.b") || name.ends_with("ln1.b") || name.ends_with("ln2.b") {
            vec![0.0; n]
        } else {
            (0..n).map(|_| trunc_normal(&mut rng, INIT_SIGMA)).collect()
        };
        params.push(name, shape, data);
    }
    Ok(params)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointDtype {
    F32,
    F64,
}

const MAGIC: &[u8; 4] = b"DSCK";
const VERSION: u32 = 1;

pub fn save_checkpoint(
    params: &ParameterSet,
    fingerprint: &str,
    dtype: CheckpointDtype,
    path: &Path,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(match dtype {
        CheckpointDtype::F32 => 0,
        CheckpointDtype::F64 => 1,
    });
    let fp = fingerprint.as_bytes();
    buf.extend_from_slice(&(fp.len() as u32).to_le_bytes());
    buf.extend_from_slice(fp);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for e in params.entries() {
        let name = e.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(e.shape.len() as u8);
        for &d in &e.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match dtype {
            CheckpointDtype::F32 => {
                for &v in &e.data {
                    buf.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            CheckpointDtype::F64 => {
                for &v in &e.data {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ParameterSet, String, CheckpointDtype)> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(Error::Validation(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Validation(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let dtype = match cur.u8()? {
        0 => CheckpointDtype::F32,
        1 => CheckpointDtype::F64,
        other => {
            return Err(Error::Validation(format!(
                "unknown checkpoint dtype tag {other}"
            )))
        }
    };
    let fp_len = cur.u32()? as usize;
    let fingerprint = String::from_utf8(cur.take(fp_len)?.to_vec())
        .map_err(|_| Error::Validation("checkpoint fingerprint is not utf-8".into()))?;
    let count = cur.u32()? as usize;
    let mut params = ParameterSet::new();
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::Validation("checkpoint entry name is not utf-8".into()))?;
        let ndim = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        match dtype {
            CheckpointDtype::F32 => {
                for _ in 0..n {
                    data.push(f32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as f64);
                }
            }
            CheckpointDtype::F64 => {
                for _ in 0..n {
                    data.push(f64::from_le_bytes(cur.take(8)?.try_into().unwrap()));
                }
            }
        }
        params.push(name, shape, data);
    }
    Ok((params, fingerprint, dtype))
}

/// Checks a loaded set against a configuration's canonical spec list.
pub fn validate_against_config(params: &ParameterSet, config: &ModelConfig) -> Result<()> {
    let specs = parameter_specs(config);
    if specs.len() != params.len() {
        return Err(Error::Validation(format!(
            "checkpoint has {} arrays, config expects {}",
            params.len(),
            specs.len()
        )));
    }
    for (i, (name, shape)) in specs.iter().enumerate() {
        let e = params.entry(i);
        if &e.name != name || &e.shape != shape {
            return Err(Error::Validation(format!(
                "checkpoint entry {i} is {} {:?}, config expects {name} {shape:?}",
                e.name, e.shape
            )));
        }
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Validation("checkpoint truncated".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::ModelConfig;

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = ModelConfig::mit_nano(11);
        let a = init_parameters(&cfg, 5).unwrap();
        let b = init_parameters(&cfg, 5).unwrap();
        let c = init_parameters(&cfg, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn init_respects_sigma_and_special_values() {
        let cfg = ModelConfig::mit_nano(11);
        let p = init_parameters(&cfg, 1).unwrap();
        // Truncated normal: weights within ±2 sigma.
        for e in p.entries() {
            if e.name.ends_with(".w") {
                assert!(e.data.iter().all(|v| v.abs() <= 2.0 * INIT_SIGMA + 1e-12));
            }
        }
        assert!(p.get("enc.s0.b0.ln1.g").unwrap().data.iter().all(|&v| v == 1.0));
        assert!(p.get("enc.s0.merge.b").unwrap().data.iter().all(|&v| v == 0.0));
        assert!(p.get("dec.cls.b").unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn count_is_pure_function_of_config() {
        let cfg = ModelConfig::mit_nano(11);
        let p = init_parameters(&cfg, 9).unwrap();
        assert_eq!(p.total_parameters(), parameter_count(&cfg));
        // A few hundred thousand parameters at nano scale.
        assert!(p.total_parameters() > 100_000 && p.total_parameters() < 1_000_000);

        let bigger = ModelConfig {
            stage_depths: [2, 2, 2, 2],
            ..ModelConfig::mit_nano(11)
        };
        assert!(parameter_count(&bigger) > parameter_count(&cfg));
    }

    #[test]
    fn f64_checkpoint_round_trip_is_bit_exact() {
        let cfg = ModelConfig::mit_nano(4);
        let p = init_parameters(&cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dsck");
        save_checkpoint(&p, &cfg.fingerprint(), CheckpointDtype::F64, &path).unwrap();
        let (q, fp, dtype) = load_checkpoint(&path).unwrap();
        assert_eq!(dtype, CheckpointDtype::F64);
        assert_eq!(fp, cfg.fingerprint());
        assert_eq!(p, q);
        validate_against_config(&q, &cfg).unwrap();
    }

    #[test]
    fn f32_checkpoint_loads_with_narrowing() {
        let cfg = ModelConfig::mit_nano(4);
        let p = init_parameters(&cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m32.dsck");
        save_checkpoint(&p, "fp", CheckpointDtype::F32, &path).unwrap();
        let (q, _, dtype) = load_checkpoint(&path).unwrap();
        assert_eq!(dtype, CheckpointDtype::F32);
        for (a, b) in p.entries().iter().zip(q.entries()) {
            for (&x, &y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() <= f32::EPSILON as f64 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn corrupt_checkpoint_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.dsck");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
