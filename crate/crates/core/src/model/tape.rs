//! Reverse-mode autodiff over a flat node tape.
//!
//! The op set is exactly what the network needs: strided convolution,
//! depthwise 3x3 convolution, token-matrix linear layers, layer norm,
//! fused multi-head attention, GELU/ReLU, residual add, bilinear upsampling,
//! channel concatenation, and the map/token layout transposes. Every op runs
//! in a fixed sequential order, so forward values and gradients are bitwise
//! reproducible.

use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Id(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        x: Id,
        w: Id,
        b: Id,
        stride: usize,
        pad: usize,
    },
    DwConv3x3 {
        x: Id,
        w: Id,
        b: Id,
    },
    Linear {
        x: Id,
        w: Id,
        b: Id,
    },
    LayerNorm {
        x: Id,
        gain: Id,
        bias: Id,
    },
    Attention {
        q: Id,
        k: Id,
        v: Id,
        heads: usize,
    },
    Gelu {
        x: Id,
    },
    Relu {
        x: Id,
    },
    Add {
        a: Id,
        b: Id,
    },
    TokensToMap {
        x: Id,
        h: usize,
        w: usize,
    },
    MapToTokens {
        x: Id,
    },
    Upsample {
        x: Id,
        oh: usize,
        ow: usize,
    },
    ConcatChannels {
        xs: Vec<Id>,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    /// Cached intermediates needed by backward (attention weights,
    /// layer-norm statistics).
    aux: Vec<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn shape(&self, id: Id) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: Id) -> &[f64] {
        &self.nodes[id.0].data
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, aux: Vec<f64>, op: Op) -> Id {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            aux,
            op,
        });
        Id(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Id {
        self.push(shape, data, Vec::new(), Op::Leaf)
    }

    fn map3(&self, id: Id) -> Result<(usize, usize, usize)> {
        let s = self.shape(id);
        if s.len() != 3 {
            return Err(Error::Shape(format!("expected [c,h,w] map, got {s:?}")));
        }
        Ok((s[0], s[1], s[2]))
    }

    fn mat2(&self, id: Id) -> Result<(usize, usize)> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(Error::Shape(format!("expected [n,c] matrix, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// Strided 2-D convolution: x [cin,h,w] * w [cout,cin,k,k] + b [cout].
    /// Output spatial size is floor((in + 2·pad − k)/stride) + 1.
    pub fn conv2d(&mut self, x: Id, w: Id, b: Id, stride: usize, pad: usize) -> Result<Id> {
        let (cin, h, wd) = self.map3(x)?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[1] != cin || ws[2] != ws[3] {
            return Err(Error::Shape(format!(
                "conv weight {ws:?} does not match input [{cin},{h},{wd}]"
            )));
        }
        let (cout, k) = (ws[0], ws[2]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::Shape(format!(
                "conv underflow: input [{cin},{h},{wd}] with pad {pad} smaller than kernel {k}x{k}"
            )));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let out = conv2d_fwd(
            self.data(x),
            (cin, h, wd),
            self.data(w),
            self.data(b),
            (cout, k),
            stride,
            pad,
            (oh, ow),
        );
        Ok(self.push(
            vec![cout, oh, ow],
            out,
            Vec::new(),
            Op::Conv2d { x, w, b, stride, pad },
        ))
    }

    /// Depthwise 3x3 convolution, stride 1, pad 1: x [c,h,w], w [c,3,3], b [c].
    pub fn dwconv3x3(&mut self, x: Id, w: Id, b: Id) -> Result<Id> {
        let (c, h, wd) = self.map3(x)?;
        let ws = self.shape(w);
        if ws != [c, 3, 3] {
            return Err(Error::Shape(format!(
                "depthwise weight {ws:?} does not match {c} channels"
            )));
        }
        let out = dwconv3x3_fwd(self.data(x), (c, h, wd), self.data(w), self.data(b));
        Ok(self.push(vec![c, h, wd], out, Vec::new(), Op::DwConv3x3 { x, w, b }))
    }

    /// Token-matrix linear layer: x [n,cin] · w [cin,cout] + b [cout].
    pub fn linear(&mut self, x: Id, w: Id, b: Id) -> Result<Id> {
        let (n, cin) = self.mat2(x)?;
        let (win, wout) = self.mat2(w)?;
        if cin != win {
            return Err(Error::Shape(format!(
                "linear: input width {cin} vs weight rows {win}"
            )));
        }
        let out = linear_fwd(self.data(x), (n, cin), self.data(w), self.data(b), wout);
        Ok(self.push(vec![n, wout], out, Vec::new(), Op::Linear { x, w, b }))
    }

    /// Layer norm over the channel axis of [n,c] tokens.
    pub fn layer_norm(&mut self, x: Id, gain: Id, bias: Id) -> Result<Id> {
        let (n, c) = self.mat2(x)?;
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(Error::Shape(format!(
                "layer norm gain/bias must be [{c}], got {:?}/{:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let (out, aux) = layer_norm_fwd(self.data(x), (n, c), self.data(gain), self.data(bias));
        Ok(self.push(vec![n, c], out, aux, Op::LayerNorm { x, gain, bias }))
    }

    /// Multi-head scaled dot-product attention.
    /// q [n,c], k [m,c], v [m,c]; heads must divide c.
    pub fn attention(&mut self, q: Id, k: Id, v: Id, heads: usize) -> Result<Id> {
        let (n, c) = self.mat2(q)?;
        let (m, ck) = self.mat2(k)?;
        let (mv, cv) = self.mat2(v)?;
        if ck != c || cv != c || mv != m {
            return Err(Error::Shape(format!(
                "attention shapes q [{n},{c}], k [{m},{ck}], v [{mv},{cv}] inconsistent"
            )));
        }
        if heads == 0 || c % heads != 0 {
            return Err(Error::Config(format!(
                "attention: {heads} heads must divide channel dim {c}"
            )));
        }
        let (out, attn) = attention_fwd(self.data(q), self.data(k), self.data(v), n, m, c, heads);
        Ok(self.push(vec![n, c], out, attn, Op::Attention { q, k, v, heads }))
    }

    pub fn gelu(&mut self, x: Id) -> Id {
        let out: Vec<f64> = self.data(x).iter().map(|&v| gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Vec::new(), Op::Gelu { x })
    }

    pub fn relu(&mut self, x: Id) -> Id {
        let out: Vec<f64> = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Vec::new(), Op::Relu { x })
    }

    pub fn add(&mut self, a: Id, b: Id) -> Result<Id> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Vec::new(), Op::Add { a, b }))
    }

    /// [h·w, c] tokens -> [c,h,w] map.
    pub fn tokens_to_map(&mut self, x: Id, h: usize, w: usize) -> Result<Id> {
        let (n, c) = self.mat2(x)?;
        if n != h * w {
            return Err(Error::Shape(format!(
                "tokens_to_map: {n} tokens cannot fill {h}x{w}"
            )));
        }
        let src = self.data(x);
        let mut out = vec![0.0; c * h * w];
        for px in 0..n {
            for ch in 0..c {
                out[ch * n + px] = src[px * c + ch];
            }
        }
        Ok(self.push(vec![c, h, w], out, Vec::new(), Op::TokensToMap { x, h, w }))
    }

    /// [c,h,w] map -> [h·w, c] tokens.
    pub fn map_to_tokens(&mut self, x: Id) -> Result<Id> {
        let (c, h, w) = self.map3(x)?;
        let n = h * w;
        let src = self.data(x);
        let mut out = vec![0.0; n * c];
        for px in 0..n {
            for ch in 0..c {
                out[px * c + ch] = src[ch * n + px];
            }
        }
        Ok(self.push(vec![n, c], out, Vec::new(), Op::MapToTokens { x }))
    }

    /// Bilinear resize with corner-aligned = false sampling:
    /// src = (dst + 0.5)·(in/out) − 0.5, edges clamped.
    pub fn upsample_bilinear(&mut self, x: Id, oh: usize, ow: usize) -> Result<Id> {
        let (c, h, w) = self.map3(x)?;
        let out = upsample_fwd(self.data(x), (c, h, w), (oh, ow));
        Ok(self.push(vec![c, oh, ow], out, Vec::new(), Op::Upsample { x, oh, ow }))
    }

    /// Concatenate maps along the channel axis; spatial sizes must agree.
    pub fn concat_channels(&mut self, xs: &[Id]) -> Result<Id> {
        if xs.is_empty() {
            return Err(Error::Shape("concat of zero maps".into()));
        }
        let (_, h, w) = self.map3(xs[0])?;
        let mut total_c = 0;
        for &id in xs {
            let (c, hh, ww) = self.map3(id)?;
            if hh != h || ww != w {
                return Err(Error::Shape(format!(
                    "concat spatial mismatch: {hh}x{ww} vs {h}x{w}"
                )));
            }
            total_c += c;
        }
        let mut out = Vec::with_capacity(total_c * h * w);
        for &id in xs {
            out.extend_from_slice(self.data(id));
        }
        Ok(self.push(
            vec![total_c, h, w],
            out,
            Vec::new(),
            Op::ConcatChannels { xs: xs.to_vec() },
        ))
    }

    /// Reverse pass from `seed_id` with upstream gradient `seed`.
    /// Returns one gradient buffer per node (None where no gradient flowed).
    pub fn backward(&self, seed_id: Id, seed: Vec<f64>) -> Vec<Option<Vec<f64>>> {
        assert_eq!(seed.len(), self.nodes[seed_id.0].data.len());
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[seed_id.0] = Some(seed);

        for i in (0..self.nodes.len()).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(gout);
                    continue;
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (cin, h, wd) = (self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2]);
                    let ws = self.shape(*w);
                    let (cout, k) = (ws[0], ws[2]);
                    let (oh, ow) = (node.shape[1], node.shape[2]);
                    let (gx, gw, gb) = conv2d_bwd(
                        &gout,
                        self.data(*x),
                        (cin, h, wd),
                        self.data(*w),
                        (cout, k),
                        *stride,
                        *pad,
                        (oh, ow),
                    );
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                    accumulate(&mut grads, *b, gb);
                }
                Op::DwConv3x3 { x, w, b } => {
                    let (c, h, wd) = (self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2]);
                    let (gx, gw, gb) =
                        dwconv3x3_bwd(&gout, self.data(*x), (c, h, wd), self.data(*w));
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Linear { x, w, b } => {
                    let (n, cin) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let cout = self.shape(*w)[1];
                    let (gx, gw, gb) =
                        linear_bwd(&gout, self.data(*x), (n, cin), self.data(*w), cout);
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                    accumulate(&mut grads, *b, gb);
                }
                Op::LayerNorm { x, gain, bias } => {
                    let (n, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let (gx, gg, gb) = layer_norm_bwd(
                        &gout,
                        self.data(*x),
                        (n, c),
                        self.data(*gain),
                        &node.aux,
                    );
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *gain, gg);
                    accumulate(&mut grads, *bias, gb);
                }
                Op::Attention { q, k, v, heads } => {
                    let (n, c) = (self.shape(*q)[0], self.shape(*q)[1]);
                    let m = self.shape(*k)[0];
                    let (gq, gk, gv) = attention_bwd(
                        &gout,
                        self.data(*q),
                        self.data(*k),
                        self.data(*v),
                        &node.aux,
                        n,
                        m,
                        c,
                        *heads,
                    );
                    accumulate(&mut grads, *q, gq);
                    accumulate(&mut grads, *k, gk);
                    accumulate(&mut grads, *v, gv);
                }
                Op::Gelu { x } => {
                    let gx: Vec<f64> = self
                        .data(*x)
                        .iter()
                        .zip(&gout)
                        .map(|(&v, &g)| g * gelu_grad(v))
                        .collect();
                    accumulate(&mut grads, *x, gx);
                }
                Op::Relu { x } => {
                    let gx: Vec<f64> = self
                        .data(*x)
                        .iter()
                        .zip(&gout)
                        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, gx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, gout.clone());
                    accumulate(&mut grads, *b, gout);
                }
                Op::TokensToMap { x, h, w } => {
                    let c = node.shape[0];
                    let n = h * w;
                    let mut gx = vec![0.0; n * c];
                    for px in 0..n {
                        for ch in 0..c {
                            gx[px * c + ch] = gout[ch * n + px];
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::MapToTokens { x } => {
                    let (c, h, w) = (self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2]);
                    let n = h * w;
                    let mut gx = vec![0.0; c * n];
                    for px in 0..n {
                        for ch in 0..c {
                            gx[ch * n + px] = gout[px * c + ch];
                        }
                    }
                    let _ = w;
                    accumulate(&mut grads, *x, gx);
                }
                Op::Upsample { x, oh, ow } => {
                    let (c, h, w) = (self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2]);
                    let gx = upsample_bwd(&gout, (c, h, w), (*oh, *ow));
                    accumulate(&mut grads, *x, gx);
                }
                Op::ConcatChannels { xs } => {
                    let (h, w) = (node.shape[1], node.shape[2]);
                    let mut offset = 0;
                    for &id in xs {
                        let c = self.shape(id)[0];
                        let len = c * h * w;
                        accumulate(&mut grads, id, gout[offset..offset + len].to_vec());
                        offset += len;
                    }
                }
            }
        }
        grads
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: Id, g: Vec<f64>) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (a, b) in existing.iter_mut().zip(&g) {
                *a += b;
            }
        }
        slot => *slot = Some(g),
    }
}

// ---- pure forward/backward kernels ----

#[allow(clippy::too_many_arguments)]
fn conv2d_fwd(
    x: &[f64],
    (cin, h, w): (usize, usize, usize),
    weight: &[f64],
    bias: &[f64],
    (cout, k): (usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    let mut out = vec![0.0; cout * oh * ow];
    for co in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[co];
                for ci in 0..cin {
                    let xi = ci * h * w;
                    let wi = (co * cin + ci) * k * k;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = xi + iy as usize * w;
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += weight[wi + ky * k + kx] * x[row + ix as usize];
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_bwd(
    gout: &[f64],
    x: &[f64],
    (cin, h, w): (usize, usize, usize),
    weight: &[f64],
    (cout, k): (usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; cin * h * w];
    let mut gw = vec![0.0; cout * cin * k * k];
    let mut gb = vec![0.0; cout];
    for co in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = gout[(co * oh + oy) * ow + ox];
                gb[co] += g;
                for ci in 0..cin {
                    let xi = ci * h * w;
                    let wi = (co * cin + ci) * k * k;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = xi + iy as usize * w;
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            gw[wi + ky * k + kx] += g * x[row + ix as usize];
                            gx[row + ix as usize] += g * weight[wi + ky * k + kx];
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

fn dwconv3x3_fwd(x: &[f64], (c, h, w): (usize, usize, usize), weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let xi = ch * h * w;
        let wi = ch * 9;
        for y in 0..h {
            for xcol in 0..w {
                let mut acc = bias[ch];
                for ky in 0..3 {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = xcol as isize + kx as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        acc += weight[wi + ky * 3 + kx] * x[xi + iy as usize * w + ix as usize];
                    }
                }
                out[xi + y * w + xcol] = acc;
            }
        }
    }
    out
}

fn dwconv3x3_bwd(
    gout: &[f64],
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    weight: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; c * h * w];
    let mut gw = vec![0.0; c * 9];
    let mut gb = vec![0.0; c];
    for ch in 0..c {
        let xi = ch * h * w;
        let wi = ch * 9;
        for y in 0..h {
            for xcol in 0..w {
                let g = gout[xi + y * w + xcol];
                gb[ch] += g;
                for ky in 0..3 {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = xcol as isize + kx as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = xi + iy as usize * w + ix as usize;
                        gw[wi + ky * 3 + kx] += g * x[src];
                        gx[src] += g * weight[wi + ky * 3 + kx];
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

fn linear_fwd(x: &[f64], (n, cin): (usize, usize), w: &[f64], b: &[f64], cout: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * cout];
    for i in 0..n {
        let xrow = &x[i * cin..(i + 1) * cin];
        let orow = &mut out[i * cout..(i + 1) * cout];
        orow.copy_from_slice(b);
        for (ci, &xv) in xrow.iter().enumerate() {
            let wrow = &w[ci * cout..(ci + 1) * cout];
            for (o, &wv) in orow.iter_mut().zip(wrow) {
                *o += xv * wv;
            }
        }
    }
    out
}

fn linear_bwd(
    gout: &[f64],
    x: &[f64],
    (n, cin): (usize, usize),
    w: &[f64],
    cout: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; n * cin];
    let mut gw = vec![0.0; cin * cout];
    let mut gb = vec![0.0; cout];
    for i in 0..n {
        let grow = &gout[i * cout..(i + 1) * cout];
        let xrow = &x[i * cin..(i + 1) * cin];
        for (o, &g) in grow.iter().enumerate() {
            gb[o] += g;
        }
        for ci in 0..cin {
            let wrow = &w[ci * cout..(ci + 1) * cout];
            let gwrow = &mut gw[ci * cout..(ci + 1) * cout];
            let xv = xrow[ci];
            let mut acc = 0.0;
            for o in 0..cout {
                acc += grow[o] * wrow[o];
                gwrow[o] += grow[o] * xv;
            }
            gx[i * cin + ci] = acc;
        }
    }
    (gx, gw, gb)
}

/// Returns (y, aux) with aux rows of (mean, rstd).
fn layer_norm_fwd(
    x: &[f64],
    (n, c): (usize, usize),
    gain: &[f64],
    bias: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; n * c];
    let mut aux = vec![0.0; n * 2];
    for i in 0..n {
        let row = &x[i * c..(i + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        aux[i * 2] = mean;
        aux[i * 2 + 1] = rstd;
        for k in 0..c {
            out[i * c + k] = (row[k] - mean) * rstd * gain[k] + bias[k];
        }
    }
    (out, aux)
}

fn layer_norm_bwd(
    gout: &[f64],
    x: &[f64],
    (n, c): (usize, usize),
    gain: &[f64],
    aux: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; n * c];
    let mut gg = vec![0.0; c];
    let mut gb = vec![0.0; c];
    for i in 0..n {
        let (mean, rstd) = (aux[i * 2], aux[i * 2 + 1]);
        let row = &x[i * c..(i + 1) * c];
        let grow = &gout[i * c..(i + 1) * c];
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for k in 0..c {
            let xhat = (row[k] - mean) * rstd;
            let dxhat = grow[k] * gain[k];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            gg[k] += grow[k] * xhat;
            gb[k] += grow[k];
        }
        let inv_c = 1.0 / c as f64;
        for k in 0..c {
            let xhat = (row[k] - mean) * rstd;
            let dxhat = grow[k] * gain[k];
            gx[i * c + k] = rstd * (dxhat - inv_c * sum_dxhat - xhat * inv_c * sum_dxhat_xhat);
        }
    }
    (gx, gg, gb)
}

/// Returns (out, attn) where attn holds the softmax matrices per head.
fn attention_fwd(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    n: usize,
    m: usize,
    c: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>) {
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; n * c];
    let mut attn = vec![0.0; heads * n * m];
    for t in 0..heads {
        let off = t * d;
        for i in 0..n {
            let arow = &mut attn[(t * n + i) * m..(t * n + i + 1) * m];
            let qrow = &q[i * c + off..i * c + off + d];
            let mut max = f64::NEG_INFINITY;
            for (j, a) in arow.iter_mut().enumerate() {
                let krow = &k[j * c + off..j * c + off + d];
                let s: f64 = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale;
                *a = s;
                if s > max {
                    max = s;
                }
            }
            let mut denom = 0.0;
            for a in arow.iter_mut() {
                *a = (*a - max).exp();
                denom += *a;
            }
            for a in arow.iter_mut() {
                *a /= denom;
            }
            let orow = &mut out[i * c + off..i * c + off + d];
            for (j, &a) in arow.iter().enumerate() {
                let vrow = &v[j * c + off..j * c + off + d];
                for (o, &vv) in orow.iter_mut().zip(vrow) {
                    *o += a * vv;
                }
            }
        }
    }
    (out, attn)
}

#[allow(clippy::too_many_arguments)]
fn attention_bwd(
    gout: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    attn: &[f64],
    n: usize,
    m: usize,
    c: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut gq = vec![0.0; n * c];
    let mut gk = vec![0.0; m * c];
    let mut gv = vec![0.0; m * c];
    let mut d_attn = vec![0.0; m];
    for t in 0..heads {
        let off = t * d;
        for i in 0..n {
            let arow = &attn[(t * n + i) * m..(t * n + i + 1) * m];
            let grow = &gout[i * c + off..i * c + off + d];
            // dV += aᵀ · gout; dA = gout · Vᵀ
            for j in 0..m {
                let vrow = &v[j * c + off..j * c + off + d];
                let gvrow = &mut gv[j * c + off..j * c + off + d];
                let mut da = 0.0;
                for x in 0..d {
                    gvrow[x] += arow[j] * grow[x];
                    da += grow[x] * vrow[x];
                }
                d_attn[j] = da;
            }
            // softmax backward: dS = A ⊙ (dA − Σ dA⊙A)
            let dot: f64 = d_attn.iter().zip(arow).map(|(a, b)| a * b).sum();
            let qrow = &q[i * c + off..i * c + off + d];
            let gqrow = &mut gq[i * c + off..i * c + off + d];
            for j in 0..m {
                let ds = arow[j] * (d_attn[j] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                let krow = &k[j * c + off..j * c + off + d];
                let gkrow = &mut gk[j * c + off..j * c + off + d];
                for x in 0..d {
                    gqrow[x] += ds * krow[x];
                    gkrow[x] += ds * qrow[x];
                }
            }
        }
    }
    (gq, gk, gv)
}

fn gelu(x: f64) -> f64 {
    const A: f64 = 0.7978845608028654; // sqrt(2/pi)
    const B: f64 = 0.044715;
    0.5 * x * (1.0 + (A * (x + B * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const A: f64 = 0.7978845608028654;
    const B: f64 = 0.044715;
    let u = A * (x + B * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * A * (1.0 + 3.0 * B * x * x)
}

/// Sample position and weights for one output index under
/// corner-aligned = false bilinear resizing.
#[inline]
fn bilinear_axis(o: usize, in_dim: usize, out_dim: usize) -> (usize, usize, f64) {
    let scale = in_dim as f64 / out_dim as f64;
    let src = (o as f64 + 0.5) * scale - 0.5;
    let i0 = src.floor();
    let frac = src - i0;
    let a = (i0 as isize).clamp(0, in_dim as isize - 1) as usize;
    let b = (i0 as isize + 1).clamp(0, in_dim as isize - 1) as usize;
    (a, b, frac)
}

fn upsample_fwd(x: &[f64], (c, h, w): (usize, usize, usize), (oh, ow): (usize, usize)) -> Vec<f64> {
    let mut out = vec![0.0; c * oh * ow];
    let cols: Vec<(usize, usize, f64)> = (0..ow).map(|o| bilinear_axis(o, w, ow)).collect();
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1, fy) = bilinear_axis(oy, h, oh);
            let orow = &mut out[(ch * oh + oy) * ow..(ch * oh + oy + 1) * ow];
            for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                orow[ox] = plane[y0 * w + x0] * (1.0 - fy) * (1.0 - fx)
                    + plane[y0 * w + x1] * (1.0 - fy) * fx
                    + plane[y1 * w + x0] * fy * (1.0 - fx)
                    + plane[y1 * w + x1] * fy * fx;
            }
        }
    }
    out
}

fn upsample_bwd(
    gout: &[f64],
    (c, h, w): (usize, usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    let mut gx = vec![0.0; c * h * w];
    let cols: Vec<(usize, usize, f64)> = (0..ow).map(|o| bilinear_axis(o, w, ow)).collect();
    for ch in 0..c {
        let gplane = &mut gx[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1, fy) = bilinear_axis(oy, h, oh);
            let grow = &gout[(ch * oh + oy) * ow..(ch * oh + oy + 1) * ow];
            for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                let g = grow[ox];
                gplane[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                gplane[y0 * w + x1] += g * (1.0 - fy) * fx;
                gplane[y1 * w + x0] += g * fy * (1.0 - fx);
                gplane[y1 * w + x1] += g * fy * fx;
            }
        }
    }
    gx
}
