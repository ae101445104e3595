//! Network assembly: overlapped patch merging, transformer stages with
//! spatially-reduced attention and Mix-FFN blocks, the all-MLP decoder, and
//! the end-to-end differentiable forward pass.

use crate::datamodel::{Image, LogitMap};
use crate::error::{Error, Result};

use super::config::ModelConfig;
use super::params::ParameterSet;
use super::tape::{Id, Tape};

/// Dense feature map in channel-planar layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// `data[c * H * W + r * W + col]`
    pub data: Vec<f64>,
}

/// The four encoder feature maps at 1/4, 1/8, 1/16, 1/32 of the input.
#[derive(Debug, Clone, PartialEq)]
pub struct StageFeatures {
    pub maps: [FeatureMap; 4],
}

fn feature_of(tape: &Tape, id: Id) -> FeatureMap {
    let s = tape.shape(id);
    FeatureMap {
        channels: s[0],
        height: s[1],
        width: s[2],
        data: tape.data(id).to_vec(),
    }
}

/// Builds network subgraphs on a tape, creating one leaf per parameter on
/// first use so gradients can be read back by parameter index.
struct Builder<'a> {
    tape: Tape,
    params: &'a ParameterSet,
    config: &'a ModelConfig,
    leaf_ids: Vec<Option<Id>>,
}

impl<'a> Builder<'a> {
    fn new(config: &'a ModelConfig, params: &'a ParameterSet) -> Self {
        Builder {
            tape: Tape::new(),
            params,
            config,
            leaf_ids: vec![None; params.len()],
        }
    }

    fn p(&mut self, name: &str) -> Result<Id> {
        let idx = self
            .params
            .index_of(name)
            .ok_or_else(|| Error::Contract(format!("parameter {name} missing from set")))?;
        if let Some(id) = self.leaf_ids[idx] {
            return Ok(id);
        }
        let e = self.params.entry(idx);
        let id = self.tape.leaf(e.shape.clone(), e.data.clone());
        self.leaf_ids[idx] = Some(id);
        Ok(id)
    }

    fn image_leaf(&mut self, image: &Image) -> Result<Id> {
        if image.channels != self.config.in_channels {
            return Err(Error::Shape(format!(
                "image has {} channels, model expects {}",
                image.channels, self.config.in_channels
            )));
        }
        image.validate()?;
        Ok(self.tape.leaf(
            vec![image.channels, image.height, image.width],
            image.data.clone(),
        ))
    }

    fn map_leaf(&mut self, map: &FeatureMap) -> Id {
        self.tape
            .leaf(vec![map.channels, map.height, map.width], map.data.clone())
    }

    fn merge(&mut self, x: Id, stage: usize) -> Result<Id> {
        let w = self.p(&format!("enc.s{stage}.merge.w"))?;
        let b = self.p(&format!("enc.s{stage}.merge.b"))?;
        let spec = self.config.patch_merge[stage];
        self.tape.conv2d(x, w, b, spec.stride, spec.padding)
    }

    /// One pre-norm transformer block on `[n,c]` tokens laid out over h×w.
    fn block(&mut self, x: Id, stage: usize, idx: usize, h: usize, w: usize) -> Result<Id> {
        let p = format!("enc.s{stage}.b{idx}");
        let heads = self.config.stage_heads[stage];
        let sr = self.config.sr_ratios[stage];

        // Attention branch.
        let ln1g = self.p(&format!("{p}.ln1.g"))?;
        let ln1b = self.p(&format!("{p}.ln1.b"))?;
        let t = self.tape.layer_norm(x, ln1g, ln1b)?;
        let qw = self.p(&format!("{p}.attn.q.w"))?;
        let qb = self.p(&format!("{p}.attn.q.b"))?;
        let q = self.tape.linear(t, qw, qb)?;
        let kv_in = if sr > 1 {
            let tmap = self.tape.tokens_to_map(t, h, w)?;
            let srw = self.p(&format!("{p}.attn.sr.w"))?;
            let srb = self.p(&format!("{p}.attn.sr.b"))?;
            let red = self.tape.conv2d(tmap, srw, srb, sr, 0)?;
            let rtok = self.tape.map_to_tokens(red)?;
            let sg = self.p(&format!("{p}.attn.srln.g"))?;
            let sb = self.p(&format!("{p}.attn.srln.b"))?;
            self.tape.layer_norm(rtok, sg, sb)?
        } else {
            t
        };
        let kw = self.p(&format!("{p}.attn.k.w"))?;
        let kb = self.p(&format!("{p}.attn.k.b"))?;
        let k = self.tape.linear(kv_in, kw, kb)?;
        let vw = self.p(&format!("{p}.attn.v.w"))?;
        let vb = self.p(&format!("{p}.attn.v.b"))?;
        let v = self.tape.linear(kv_in, vw, vb)?;
        let att = self.tape.attention(q, k, v, heads)?;
        let ow = self.p(&format!("{p}.attn.o.w"))?;
        let ob = self.p(&format!("{p}.attn.o.b"))?;
        let o = self.tape.linear(att, ow, ob)?;
        let x = self.tape.add(x, o)?;

        // Mix-FFN branch: linear -> depthwise 3x3 over the 2-D layout ->
        // GELU -> linear.
        let ln2g = self.p(&format!("{p}.ln2.g"))?;
        let ln2b = self.p(&format!("{p}.ln2.b"))?;
        let t2 = self.tape.layer_norm(x, ln2g, ln2b)?;
        let f1w = self.p(&format!("{p}.ffn.fc1.w"))?;
        let f1b = self.p(&format!("{p}.ffn.fc1.b"))?;
        let h1 = self.tape.linear(t2, f1w, f1b)?;
        let hmap = self.tape.tokens_to_map(h1, h, w)?;
        let dww = self.p(&format!("{p}.ffn.dw.w"))?;
        let dwb = self.p(&format!("{p}.ffn.dw.b"))?;
        let hdw = self.tape.dwconv3x3(hmap, dww, dwb)?;
        let htok = self.tape.map_to_tokens(hdw)?;
        let act = self.tape.gelu(htok);
        let f2w = self.p(&format!("{p}.ffn.fc2.w"))?;
        let f2b = self.p(&format!("{p}.ffn.fc2.b"))?;
        let h2 = self.tape.linear(act, f2w, f2b)?;
        self.tape.add(x, h2)
    }

    /// Patch merge, post-embedding layer norm, then the stage's transformer
    /// blocks; returns a map id. The norm keeps token magnitudes unit-scale
    /// across stages regardless of the merge fan-in.
    fn stage(&mut self, x: Id, stage: usize) -> Result<Id> {
        let merged = self.merge(x, stage)?;
        let (h, w) = (self.tape.shape(merged)[1], self.tape.shape(merged)[2]);
        let mut tok = self.tape.map_to_tokens(merged)?;
        let eg = self.p(&format!("enc.s{stage}.embed_ln.g"))?;
        let eb = self.p(&format!("enc.s{stage}.embed_ln.b"))?;
        tok = self.tape.layer_norm(tok, eg, eb)?;
        for b in 0..self.config.stage_depths[stage] {
            tok = self.block(tok, stage, b, h, w)?;
        }
        self.tape.tokens_to_map(tok, h, w)
    }

    fn encoder(&mut self, image: Id) -> Result<[Id; 4]> {
        let s0 = self.stage(image, 0)?;
        let s1 = self.stage(s0, 1)?;
        let s2 = self.stage(s1, 2)?;
        let s3 = self.stage(s2, 3)?;
        Ok([s0, s1, s2, s3])
    }

    /// All-MLP decoder: per-stage linear projection to a shared width,
    /// bilinear upsampling to the 1/4 grid, concatenation, linear fusion,
    /// and the class projection. Returns `[num_classes, H/4, W/4]`.
    fn decoder(&mut self, feats: &[Id; 4]) -> Result<Id> {
        let (h1, w1) = (self.tape.shape(feats[0])[1], self.tape.shape(feats[0])[2]);
        let mut upsampled = Vec::with_capacity(4);
        for (s, &f) in feats.iter().enumerate() {
            let tok = self.tape.map_to_tokens(f)?;
            let pw = self.p(&format!("dec.proj{s}.w"))?;
            let pb = self.p(&format!("dec.proj{s}.b"))?;
            let proj = self.tape.linear(tok, pw, pb)?;
            let (h, w) = (self.tape.shape(f)[1], self.tape.shape(f)[2]);
            let map = self.tape.tokens_to_map(proj, h, w)?;
            upsampled.push(if h == h1 && w == w1 {
                map
            } else {
                self.tape.upsample_bilinear(map, h1, w1)?
            });
        }
        let cat = self.tape.concat_channels(&upsampled)?;
        let tok = self.tape.map_to_tokens(cat)?;
        let fw = self.p("dec.fuse.w")?;
        let fb = self.p("dec.fuse.b")?;
        let fused = self.tape.linear(tok, fw, fb)?;
        let fused = self.tape.relu(fused);
        let cw = self.p("dec.cls.w")?;
        let cb = self.p("dec.cls.b")?;
        let logits = self.tape.linear(fused, cw, cb)?;
        self.tape.tokens_to_map(logits, h1, w1)
    }
}

fn check_divisible(image: &Image) -> Result<()> {
    if image.height % 32 != 0 || image.width % 32 != 0 {
        return Err(Error::Shape(format!(
            "input {}x{} must be divisible by 32",
            image.height, image.width
        )));
    }
    Ok(())
}

/// Overlapping strided convolution used for downsampling between stages.
/// `weight` is `[out_channels, in_channels, k, k]`, `bias` `[out_channels]`.
pub fn overlapped_patch_merge(
    input: &FeatureMap,
    spec: super::config::MergeSpec,
    out_channels: usize,
    weight: &[f64],
    bias: &[f64],
) -> Result<FeatureMap> {
    if weight.len() != out_channels * input.channels * spec.kernel * spec.kernel
        || bias.len() != out_channels
    {
        return Err(Error::Shape(format!(
            "merge weights sized {} / {} do not match [{out_channels},{},{k},{k}]",
            weight.len(),
            bias.len(),
            input.channels,
            k = spec.kernel
        )));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(
        vec![input.channels, input.height, input.width],
        input.data.clone(),
    );
    let w = tape.leaf(
        vec![out_channels, input.channels, spec.kernel, spec.kernel],
        weight.to_vec(),
    );
    let b = tape.leaf(vec![out_channels], bias.to_vec());
    let y = tape.conv2d(x, w, b, spec.stride, spec.padding)?;
    Ok(feature_of(&tape, y))
}

/// Runs one stage's transformer blocks (without the patch merge) on an
/// already-merged feature map.
pub fn transformer_stage(
    input: &FeatureMap,
    config: &ModelConfig,
    stage: usize,
    params: &ParameterSet,
) -> Result<FeatureMap> {
    config.validate()?;
    if input.channels != config.stage_dims[stage] {
        return Err(Error::Shape(format!(
            "stage {stage} expects {} channels, got {}",
            config.stage_dims[stage], input.channels
        )));
    }
    let mut b = Builder::new(config, params);
    let x = b.map_leaf(input);
    let (h, w) = (input.height, input.width);
    let mut tok = b.tape.map_to_tokens(x)?;
    for blk in 0..config.stage_depths[stage] {
        tok = b.block(tok, stage, blk, h, w)?;
    }
    let out = b.tape.tokens_to_map(tok, h, w)?;
    Ok(feature_of(&b.tape, out))
}

/// Four-stage hierarchical encoding at 1/4, 1/8, 1/16, 1/32 resolution.
pub fn encoder_forward(
    image: &Image,
    config: &ModelConfig,
    params: &ParameterSet,
) -> Result<StageFeatures> {
    config.validate()?;
    check_divisible(image)?;
    let mut b = Builder::new(config, params);
    let img = b.image_leaf(image)?;
    let feats = b.encoder(img)?;
    Ok(StageFeatures {
        maps: feats.map(|id| feature_of(&b.tape, id)),
    })
}

/// Decodes stage features into quarter-resolution logits
/// (H/4 × W/4 × num_classes).
pub fn decoder_forward(
    features: &StageFeatures,
    config: &ModelConfig,
    params: &ParameterSet,
) -> Result<LogitMap> {
    config.validate()?;
    let mut b = Builder::new(config, params);
    let ids = [
        b.map_leaf(&features.maps[0]),
        b.map_leaf(&features.maps[1]),
        b.map_leaf(&features.maps[2]),
        b.map_leaf(&features.maps[3]),
    ];
    let logits = b.decoder(&ids)?;
    Ok(map_to_logits(&b.tape, logits))
}

fn map_to_logits(tape: &Tape, id: Id) -> LogitMap {
    let s = tape.shape(id);
    let (c, h, w) = (s[0], s[1], s[2]);
    let src = tape.data(id);
    let mut out = LogitMap::zeros(h, w, c);
    for ch in 0..c {
        for px in 0..h * w {
            out.data[px * c + ch] = src[ch * h * w + px];
        }
    }
    out
}

/// Full forward pass: encoder, decoder, and bilinear ×4 upsampling of the
/// quarter-resolution logits back to input resolution.
pub fn model_forward(
    image: &Image,
    config: &ModelConfig,
    params: &ParameterSet,
) -> Result<LogitMap> {
    Ok(build_model_forward(image, config, params)?.logits())
}

/// A retained forward pass: holds the tape so gradients w.r.t. every
/// parameter can be pulled back from a logit-space gradient.
pub struct ModelForward<'a> {
    tape: Tape,
    logits_id: Id,
    params: &'a ParameterSet,
    leaf_ids: Vec<Option<Id>>,
}

pub fn build_model_forward<'a>(
    image: &Image,
    config: &ModelConfig,
    params: &'a ParameterSet,
) -> Result<ModelForward<'a>> {
    config.validate()?;
    check_divisible(image)?;
    super::params::validate_against_config(params, config)?;
    let mut b = Builder::new(config, params);
    let img = b.image_leaf(image)?;
    let feats = b.encoder(img)?;
    let quarter = b.decoder(&feats)?;
    let logits_id = b
        .tape
        .upsample_bilinear(quarter, image.height, image.width)?;
    Ok(ModelForward {
        tape: b.tape,
        logits_id,
        params,
        leaf_ids: b.leaf_ids,
    })
}

impl ModelForward<'_> {
    /// Full-resolution logits in pixel-major (class-contiguous) layout.
    pub fn logits(&self) -> LogitMap {
        map_to_logits(&self.tape, self.logits_id)
    }

    /// Backpropagates a gradient given in `LogitMap` layout; returns one
    /// gradient buffer per parameter (zeros where no gradient flowed).
    pub fn backward(&self, logit_grad: &[f64]) -> Result<Vec<Vec<f64>>> {
        let s = self.tape.shape(self.logits_id);
        let (c, h, w) = (s[0], s[1], s[2]);
        if logit_grad.len() != c * h * w {
            return Err(Error::Shape(format!(
                "logit gradient has {} entries, expected {}",
                logit_grad.len(),
                c * h * w
            )));
        }
        // HWC -> CHW seed.
        let mut seed = vec![0.0; c * h * w];
        for px in 0..h * w {
            for ch in 0..c {
                seed[ch * h * w + px] = logit_grad[px * c + ch];
            }
        }
        let grads = self.tape.backward(self.logits_id, seed);
        let out = (0..self.params.len())
            .map(|i| match self.leaf_ids[i].and_then(|id| grads[id.0].clone()) {
                Some(g) => g,
                None => vec![0.0; self.params.entry(i).data.len()],
            })
            .collect();
        Ok(out)
    }
}
