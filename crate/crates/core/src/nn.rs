//! A small neural-network substrate: dense, 5×5 convolution, 2×2 max-pool,
//! flatten and ReLU recurrent layers with hand-written backpropagation,
//! squared-error and softmax cross-entropy losses, and SGD/Adam training.
//!
//! A model processes one sample at a time; batching happens in the loss and
//! training routines. Gradients of a batch are accumulated over fixed-size
//! chunks whose partial sums are added in index order, so results do not
//! depend on the number of worker threads.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn scalar(v: f64) -> Self {
        Self::vector(vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Dense { input: usize, output: usize, activation: Activation },
    /// Valid (unpadded) stride-1 convolution followed by ReLU.
    Conv2d { in_ch: usize, out_ch: usize, kernel: usize },
    MaxPool2,
    Flatten,
    /// ReLU recurrent cell with a per-step two-logit readout.
    Rnn { input: usize, hidden: usize },
}

impl LayerSpec {
    fn param_count(&self) -> usize {
        match *self {
            LayerSpec::Dense { input, output, .. } => output * input + output,
            LayerSpec::Conv2d { in_ch, out_ch, kernel } => out_ch * in_ch * kernel * kernel + out_ch,
            LayerSpec::MaxPool2 | LayerSpec::Flatten => 0,
            LayerSpec::Rnn { input, hidden } => hidden * input + hidden * hidden + hidden + 2 * hidden + 2,
        }
    }

    /// Output shape for a given input shape. A zero extent is a wildcard
    /// (sequence length).
    fn output_shape(&self, s: &[usize]) -> Result<Vec<usize>> {
        let bad = || Error::ShapeMismatch(format!("{self:?} cannot take input {s:?}"));
        match *self {
            LayerSpec::Dense { input, output, .. } => {
                if s != [input] {
                    return Err(bad());
                }
                Ok(vec![output])
            }
            LayerSpec::Conv2d { in_ch, out_ch, kernel } => {
                if s.len() != 3 || s[0] != in_ch || s[1] < kernel || s[2] < kernel {
                    return Err(bad());
                }
                Ok(vec![out_ch, s[1] - kernel + 1, s[2] - kernel + 1])
            }
            LayerSpec::MaxPool2 => {
                if s.len() != 3 || s[1] < 2 || s[2] < 2 {
                    return Err(bad());
                }
                Ok(vec![s[0], s[1] / 2, s[2] / 2])
            }
            LayerSpec::Flatten => Ok(vec![s.iter().product()]),
            LayerSpec::Rnn { input, .. } => {
                if s.len() != 2 || s[1] != input {
                    return Err(bad());
                }
                Ok(vec![s[0], 2])
            }
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Dense { input, .. } => input,
            LayerSpec::Conv2d { in_ch, kernel, .. } => in_ch * kernel * kernel,
            LayerSpec::Rnn { input, hidden } => input + hidden,
            LayerSpec::MaxPool2 | LayerSpec::Flatten => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuralModel {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    params: Vec<Vec<f64>>,
}

impl NeuralModel {
    /// Builds a model with He-normal weights and zero biases drawn from
    /// `seed`. `input_shape` may use 0 for a variable sequence length.
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidInput("model needs at least one layer".into()));
        }
        if layers.iter().any(|l| matches!(l, LayerSpec::Rnn { .. })) && layers.len() != 1 {
            return Err(Error::InvalidInput("an rnn layer must be the only layer".into()));
        }
        let mut s = input_shape.clone();
        for l in &layers {
            s = l.output_shape(&s)?;
        }
        let mut rng = seed::rng(seed);
        let params = layers
            .iter()
            .map(|l| {
                let std = (2.0 / l.fan_in() as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                let mut p = vec![0.0; l.param_count()];
                for (start, len) in weight_ranges(l) {
                    for v in &mut p[start..start + len] {
                        *v = normal.sample(&mut rng);
                    }
                }
                p
            })
            .collect();
        Ok(Self { input_shape, layers, params })
    }

    /// Multi-layer perceptron with ReLU hidden layers and a linear output.
    pub fn mlp(input: usize, hidden: &[usize], output: usize, seed: u64) -> Result<Self> {
        let mut layers = Vec::new();
        let mut prev = input;
        for &h in hidden {
            layers.push(LayerSpec::Dense { input: prev, output: h, activation: Activation::Relu });
            prev = h;
        }
        layers.push(LayerSpec::Dense { input: prev, output, activation: Activation::Identity });
        Self::new(vec![input], layers, seed)
    }

    pub fn rnn(input: usize, hidden: usize, seed: u64) -> Result<Self> {
        Self::new(vec![0, input], vec![LayerSpec::Rnn { input, hidden }], seed)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn params(&self) -> &[Vec<f64>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let ok = x.shape.len() == self.input_shape.len()
            && x.shape
                .iter()
                .zip(&self.input_shape)
                .all(|(&a, &e)| if e == 0 { a > 0 } else { a == e });
        if ok {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "model expects input {:?}, got {:?}",
                self.input_shape, x.shape
            )))
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut trace = self.trace(x);
        let shape = trace.shapes.pop().expect("output shape");
        let data = trace.acts.pop().expect("output");
        Ok(Tensor { shape, data })
    }

    fn trace(&self, x: &Tensor) -> Trace {
        let mut acts = vec![x.data.clone()];
        let mut shapes = vec![x.shape.clone()];
        let mut aux = Vec::with_capacity(self.layers.len());
        for (l, p) in self.layers.iter().zip(&self.params) {
            let s = shapes.last().unwrap();
            let out_shape = l.output_shape(s).expect("shapes validated");
            let (y, a) = layer_forward(l, p, acts.last().unwrap(), s, &out_shape);
            acts.push(y);
            shapes.push(out_shape);
            aux.push(a);
        }
        Trace { acts, shapes, aux }
    }

    fn backward(&self, trace: &Trace, gy: Vec<f64>, grads: &mut [Vec<f64>]) {
        let mut g = gy;
        for k in (0..self.layers.len()).rev() {
            let need_dx = k > 0;
            g = layer_backward(
                &self.layers[k],
                &self.params[k],
                &trace.acts[k],
                &trace.shapes[k],
                &trace.acts[k + 1],
                &trace.shapes[k + 1],
                &trace.aux[k],
                &g,
                &mut grads[k],
                need_dx,
            );
        }
    }

    /// ReLU on/off bits and pool winners for one input; used to detect
    /// non-differentiable points in gradient checks.
    fn activation_pattern(&self, x: &Tensor) -> Vec<usize> {
        let trace = self.trace(x);
        let mut pat = Vec::new();
        for (k, l) in self.layers.iter().enumerate() {
            match l {
                LayerSpec::Dense { activation: Activation::Relu, .. } | LayerSpec::Conv2d { .. } => {
                    pat.extend(trace.acts[k + 1].iter().map(|&v| usize::from(v > 0.0)))
                }
                LayerSpec::MaxPool2 => {
                    if let Aux::Pool(idx) = &trace.aux[k] {
                        pat.extend_from_slice(idx)
                    }
                }
                LayerSpec::Rnn { .. } => {
                    if let Aux::Hidden(h) = &trace.aux[k] {
                        pat.extend(h.iter().map(|&v| usize::from(v > 0.0)))
                    }
                }
                _ => {}
            }
        }
        pat
    }
}

/// `(offset, len)` of the weight blocks that receive random init.
fn weight_ranges(l: &LayerSpec) -> Vec<(usize, usize)> {
    match *l {
        LayerSpec::Dense { input, output, .. } => vec![(0, input * output)],
        LayerSpec::Conv2d { in_ch, out_ch, kernel } => vec![(0, out_ch * in_ch * kernel * kernel)],
        LayerSpec::Rnn { input, hidden } => {
            let wh = hidden * input + hidden * hidden;
            vec![(0, wh), (wh + hidden, 2 * hidden)]
        }
        _ => vec![],
    }
}

struct Trace {
    acts: Vec<Vec<f64>>,
    shapes: Vec<Vec<usize>>,
    aux: Vec<Aux>,
}

enum Aux {
    None,
    Pool(Vec<usize>),
    Hidden(Vec<f64>),
}

fn relu_inplace(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

fn layer_forward(l: &LayerSpec, p: &[f64], x: &[f64], s: &[usize], os: &[usize]) -> (Vec<f64>, Aux) {
    match *l {
        LayerSpec::Dense { input, output, activation } => {
            let (w, b) = p.split_at(input * output);
            let mut y: Vec<f64> = (0..output)
                .map(|o| b[o] + w[o * input..(o + 1) * input].iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
                .collect();
            if activation == Activation::Relu {
                relu_inplace(&mut y);
            }
            (y, Aux::None)
        }
        LayerSpec::Conv2d { in_ch, out_ch, kernel } => {
            let (h, wd) = (s[1], s[2]);
            let (oh, ow) = (os[1], os[2]);
            let (k, b) = p.split_at(out_ch * in_ch * kernel * kernel);
            let mut y = vec![0.0; out_ch * oh * ow];
            for oc in 0..out_ch {
                let out = &mut y[oc * oh * ow..(oc + 1) * oh * ow];
                out.fill(b[oc]);
                for ic in 0..in_ch {
                    let img = &x[ic * h * wd..(ic + 1) * h * wd];
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let wv = k[((oc * in_ch + ic) * kernel + ky) * kernel + kx];
                            for oy in 0..oh {
                                let row = &img[(oy + ky) * wd + kx..(oy + ky) * wd + kx + ow];
                                let orow = &mut out[oy * ow..(oy + 1) * ow];
                                for (o, i) in orow.iter_mut().zip(row) {
                                    *o += wv * i;
                                }
                            }
                        }
                    }
                }
            }
            relu_inplace(&mut y);
            (y, Aux::None)
        }
        LayerSpec::MaxPool2 => {
            let (c, h, wd) = (s[0], s[1], s[2]);
            let (oh, ow) = (os[1], os[2]);
            let mut y = vec![0.0; c * oh * ow];
            let mut idx = vec![0; c * oh * ow];
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = ch * h * wd + 2 * oy * wd + 2 * ox;
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let j = ch * h * wd + (2 * oy + dy) * wd + 2 * ox + dx;
                            if x[j] > x[best] {
                                best = j;
                            }
                        }
                        let o = (ch * oh + oy) * ow + ox;
                        y[o] = x[best];
                        idx[o] = best;
                    }
                }
            }
            (y, Aux::Pool(idx))
        }
        LayerSpec::Flatten => (x.to_vec(), Aux::None),
        LayerSpec::Rnn { input, hidden } => {
            let len = s[0];
            let r = RnnParams::split(p, input, hidden);
            let mut hs = vec![0.0; len * hidden];
            let mut y = vec![0.0; len * 2];
            for t in 0..len {
                let xt = &x[t * input..(t + 1) * input];
                let (prev, cur) = hs.split_at_mut(t * hidden);
                let cur = &mut cur[..hidden];
                for j in 0..hidden {
                    let mut a = r.bh[j];
                    a += r.wx[j * input..(j + 1) * input].iter().zip(xt).map(|(w, v)| w * v).sum::<f64>();
                    if t > 0 {
                        let hp = &prev[(t - 1) * hidden..];
                        a += r.wh[j * hidden..(j + 1) * hidden].iter().zip(hp).map(|(w, v)| w * v).sum::<f64>();
                    }
                    cur[j] = a.max(0.0);
                }
                for o in 0..2 {
                    y[t * 2 + o] =
                        r.bo[o] + r.wo[o * hidden..(o + 1) * hidden].iter().zip(cur.iter()).map(|(w, v)| w * v).sum::<f64>();
                }
            }
            (y, Aux::Hidden(hs))
        }
    }
}

struct RnnParams<'a> {
    wx: &'a [f64],
    wh: &'a [f64],
    bh: &'a [f64],
    wo: &'a [f64],
    bo: &'a [f64],
}

impl<'a> RnnParams<'a> {
    fn split(p: &'a [f64], input: usize, hidden: usize) -> Self {
        let (wx, rest) = p.split_at(hidden * input);
        let (wh, rest) = rest.split_at(hidden * hidden);
        let (bh, rest) = rest.split_at(hidden);
        let (wo, bo) = rest.split_at(2 * hidden);
        Self { wx, wh, bh, wo, bo }
    }
}

#[allow(clippy::too_many_arguments)]
fn layer_backward(
    l: &LayerSpec,
    p: &[f64],
    x: &[f64],
    s: &[usize],
    y: &[f64],
    os: &[usize],
    aux: &Aux,
    gy: &[f64],
    grad: &mut [f64],
    need_dx: bool,
) -> Vec<f64> {
    match *l {
        LayerSpec::Dense { input, output, activation } => {
            let ga: Vec<f64> = match activation {
                Activation::Relu => gy.iter().zip(y).map(|(&g, &v)| if v > 0.0 { g } else { 0.0 }).collect(),
                Activation::Identity => gy.to_vec(),
            };
            let (gw, gb) = grad.split_at_mut(input * output);
            for o in 0..output {
                if ga[o] == 0.0 {
                    continue;
                }
                gb[o] += ga[o];
                for (g, &xi) in gw[o * input..(o + 1) * input].iter_mut().zip(x) {
                    *g += ga[o] * xi;
                }
            }
            if !need_dx {
                return Vec::new();
            }
            let w = &p[..input * output];
            let mut dx = vec![0.0; input];
            for o in 0..output {
                if ga[o] == 0.0 {
                    continue;
                }
                for (d, &wv) in dx.iter_mut().zip(&w[o * input..(o + 1) * input]) {
                    *d += ga[o] * wv;
                }
            }
            dx
        }
        LayerSpec::Conv2d { in_ch, out_ch, kernel } => {
            let (h, wd) = (s[1], s[2]);
            let (oh, ow) = (os[1], os[2]);
            let ga: Vec<f64> = gy.iter().zip(y).map(|(&g, &v)| if v > 0.0 { g } else { 0.0 }).collect();
            let nk = out_ch * in_ch * kernel * kernel;
            let k = &p[..nk];
            let (gk, gb) = grad.split_at_mut(nk);
            let mut dx = if need_dx { vec![0.0; in_ch * h * wd] } else { Vec::new() };
            for oc in 0..out_ch {
                let g = &ga[oc * oh * ow..(oc + 1) * oh * ow];
                gb[oc] += g.iter().sum::<f64>();
                for ic in 0..in_ch {
                    let img = &x[ic * h * wd..(ic + 1) * h * wd];
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let ki = ((oc * in_ch + ic) * kernel + ky) * kernel + kx;
                            let mut acc = 0.0;
                            for oy in 0..oh {
                                let row = &img[(oy + ky) * wd + kx..(oy + ky) * wd + kx + ow];
                                acc += g[oy * ow..(oy + 1) * ow].iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
                            }
                            gk[ki] += acc;
                            if need_dx {
                                let wv = k[ki];
                                let d = &mut dx[ic * h * wd..(ic + 1) * h * wd];
                                for oy in 0..oh {
                                    let drow = &mut d[(oy + ky) * wd + kx..(oy + ky) * wd + kx + ow];
                                    for (dv, gv) in drow.iter_mut().zip(&g[oy * ow..(oy + 1) * ow]) {
                                        *dv += wv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            dx
        }
        LayerSpec::MaxPool2 => {
            let Aux::Pool(idx) = aux else { unreachable!("pool trace") };
            let mut dx = vec![0.0; x.len()];
            for (&i, &g) in idx.iter().zip(gy) {
                dx[i] += g;
            }
            dx
        }
        LayerSpec::Flatten => gy.to_vec(),
        LayerSpec::Rnn { input, hidden } => {
            let Aux::Hidden(hs) = aux else { unreachable!("rnn trace") };
            let len = s[0];
            let r = RnnParams::split(p, input, hidden);
            let nwx = hidden * input;
            let nwh = hidden * hidden;
            let (gwx, rest) = grad.split_at_mut(nwx);
            let (gwh, rest) = rest.split_at_mut(nwh);
            let (gbh, rest) = rest.split_at_mut(hidden);
            let (gwo, gbo) = rest.split_at_mut(2 * hidden);
            let mut dx = if need_dx { vec![0.0; x.len()] } else { Vec::new() };
            let mut dh_next = vec![0.0; hidden];
            let mut da = vec![0.0; hidden];
            for t in (0..len).rev() {
                let ht = &hs[t * hidden..(t + 1) * hidden];
                let go = &gy[t * 2..t * 2 + 2];
                for o in 0..2 {
                    gbo[o] += go[o];
                    for (g, &hv) in gwo[o * hidden..(o + 1) * hidden].iter_mut().zip(ht) {
                        *g += go[o] * hv;
                    }
                }
                for j in 0..hidden {
                    let dh = dh_next[j] + go[0] * r.wo[j] + go[1] * r.wo[hidden + j];
                    da[j] = if ht[j] > 0.0 { dh } else { 0.0 };
                }
                let xt = &x[t * input..(t + 1) * input];
                dh_next.fill(0.0);
                for j in 0..hidden {
                    let a = da[j];
                    if a == 0.0 {
                        continue;
                    }
                    gbh[j] += a;
                    for (g, &xv) in gwx[j * input..(j + 1) * input].iter_mut().zip(xt) {
                        *g += a * xv;
                    }
                    if need_dx {
                        for (d, &wv) in dx[t * input..(t + 1) * input].iter_mut().zip(&r.wx[j * input..(j + 1) * input]) {
                            *d += a * wv;
                        }
                    }
                    if t > 0 {
                        let hp = &hs[(t - 1) * hidden..t * hidden];
                        let wrow = &r.wh[j * hidden..(j + 1) * hidden];
                        for ((g, &hv), (dn, &wv)) in
                            gwh[j * hidden..(j + 1) * hidden].iter_mut().zip(hp).zip(dh_next.iter_mut().zip(wrow))
                        {
                            *g += a * hv;
                            *dn += a * wv;
                        }
                    }
                }
            }
            dx
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// Sum of squared output errors per sample.
    SquaredError,
    /// Cross-entropy of softmax rows against class-index targets, averaged
    /// over rows (sequence steps) of a sample.
    SoftmaxCrossEntropy,
}

/// Per-sample loss and its gradient with respect to the model output.
fn sample_loss(loss: Loss, out: &Tensor, target: &Tensor) -> Result<(f64, Vec<f64>)> {
    match loss {
        Loss::SquaredError => {
            if out.data.len() != target.data.len() {
                return Err(Error::ShapeMismatch(format!(
                    "output {:?} vs target {:?}",
                    out.shape, target.shape
                )));
            }
            let mut l = 0.0;
            let g = out
                .data
                .iter()
                .zip(&target.data)
                .map(|(y, t)| {
                    l += (y - t) * (y - t);
                    2.0 * (y - t)
                })
                .collect();
            Ok((l, g))
        }
        Loss::SoftmaxCrossEntropy => {
            let classes = *out.shape.last().unwrap();
            let rows = out.data.len() / classes;
            if target.data.len() != rows {
                return Err(Error::ShapeMismatch(format!(
                    "{rows} logit rows vs {} class targets",
                    target.data.len()
                )));
            }
            let mut l = 0.0;
            let mut g = vec![0.0; out.data.len()];
            for r in 0..rows {
                let z = &out.data[r * classes..(r + 1) * classes];
                let c = target.data[r];
                if c < 0.0 || c.fract() != 0.0 || c as usize >= classes {
                    return Err(Error::ShapeMismatch(format!("class target {c} outside 0..{classes}")));
                }
                let c = c as usize;
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = z.iter().map(|v| (v - m).exp()).sum();
                let lse = m + sum.ln();
                l += lse - z[c];
                for k in 0..classes {
                    let p = (z[k] - lse).exp();
                    g[r * classes + k] = (p - if k == c { 1.0 } else { 0.0 }) / rows as f64;
                }
            }
            Ok((l / rows as f64, g))
        }
    }
}

fn zero_grads(model: &NeuralModel) -> Vec<Vec<f64>> {
    model.params.iter().map(|p| vec![0.0; p.len()]).collect()
}

fn batch_loss_grad(model: &NeuralModel, batch: &[(&Tensor, &Tensor)], loss: Loss) -> Result<(f64, Vec<Vec<f64>>)> {
    let partials: Vec<Result<(f64, Vec<Vec<f64>>)>> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut grads = zero_grads(model);
            let mut total = 0.0;
            for &(x, t) in chunk {
                model.check_input(x)?;
                let trace = model.trace(x);
                let out = Tensor {
                    shape: trace.shapes.last().unwrap().clone(),
                    data: trace.acts.last().unwrap().clone(),
                };
                let (l, gy) = sample_loss(loss, &out, t)?;
                total += l;
                model.backward(&trace, gy, &mut grads);
            }
            Ok((total, grads))
        })
        .collect();
    let mut grads = zero_grads(model);
    let mut total = 0.0;
    for part in partials {
        let (l, g) = part?;
        total += l;
        for (a, b) in grads.iter_mut().zip(&g) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
    let n = batch.len() as f64;
    for g in grads.iter_mut().flatten() {
        *g /= n;
    }
    Ok((total / n, grads))
}

/// Mean batch loss and its exact gradient with respect to every parameter.
pub fn loss_and_grad(
    model: &NeuralModel,
    inputs: &[Tensor],
    targets: &[Tensor],
    loss: Loss,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if inputs.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} inputs vs {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    if inputs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let batch: Vec<_> = inputs.iter().zip(targets).collect();
    batch_loss_grad(model, &batch, loss)
}

/// Mean loss without gradients.
pub fn mean_loss(model: &NeuralModel, data: &[Sample], loss: Loss) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let parts: Vec<Result<f64>> = data
        .par_chunks(GRAD_CHUNK)
        .map(|c| {
            c.iter().try_fold(0.0, |acc, s| {
                let out = model.forward(&s.input)?;
                Ok(acc + sample_loss(loss, &out, &s.target)?.0)
            })
        })
        .collect();
    let mut total = 0.0;
    for p in parts {
        total += p?;
    }
    Ok(total / data.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Tensor,
    pub target: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss: Loss,
    pub optimizer: Optimizer,
    /// Rescales a batch gradient whose global L2 norm exceeds this value.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl TrainConfig {
    pub fn new(loss: Loss, learning_rate: f64, batch_size: usize, epochs: usize, seed: u64) -> Self {
        Self {
            learning_rate,
            batch_size,
            epochs,
            seed,
            loss,
            optimizer: Optimizer::adam(),
            clip_norm: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidInput(format!("learning rate {}", self.learning_rate)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidInput("epochs and batch size must be >= 1".into()));
        }
        Ok(())
    }
}

struct OptState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl OptState {
    fn new(model: &NeuralModel) -> Self {
        Self { m: zero_grads(model), v: zero_grads(model), t: 0 }
    }

    fn apply(&mut self, model: &mut NeuralModel, grads: &[Vec<f64>], cfg: &TrainConfig) {
        let lr = cfg.learning_rate;
        let scale = match cfg.clip_norm {
            Some(c) => {
                let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.t += 1;
        for (k, p) in model.params.iter_mut().enumerate() {
            match cfg.optimizer {
                Optimizer::Sgd => {
                    for (w, g) in p.iter_mut().zip(&grads[k]) {
                        *w -= lr * g * scale;
                    }
                }
                Optimizer::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(self.t);
                    let c2 = 1.0 - beta2.powi(self.t);
                    for i in 0..p.len() {
                        let g = grads[k][i] * scale;
                        self.m[k][i] = beta1 * self.m[k][i] + (1.0 - beta1) * g;
                        self.v[k][i] = beta2 * self.v[k][i] + (1.0 - beta2) * g * g;
                        let mh = self.m[k][i] / c1;
                        let vh = self.v[k][i] / c2;
                        p[i] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
}

fn run_epoch(model: &mut NeuralModel, data: &[Sample], order: &[usize], cfg: &TrainConfig, opt: &mut OptState, epoch: usize) -> Result<f64> {
    let mut total = 0.0;
    for idx in order.chunks(cfg.batch_size) {
        let batch: Vec<_> = idx.iter().map(|&i| (&data[i].input, &data[i].target)).collect();
        let (l, g) = batch_loss_grad(model, &batch, cfg.loss)?;
        if !l.is_finite() || g.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { epoch, loss: l });
        }
        total += l * idx.len() as f64;
        opt.apply(model, &g, cfg);
    }
    let mean = total / data.len() as f64;
    if model.params.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Diverged { epoch, loss: mean });
    }
    Ok(mean)
}

/// Trains for `cfg.epochs` passes over shuffled mini-batches.
pub fn train(model: &NeuralModel, data: &[Sample], cfg: &TrainConfig) -> Result<NeuralModel> {
    train_with_validation(model, data, &[], cfg).map(|(m, _)| m)
}

/// Like [`train`], but when `val` is nonempty returns the parameters of the
/// epoch with the lowest validation loss.
pub fn train_with_validation(
    model: &NeuralModel,
    data: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
) -> Result<(NeuralModel, TrainHistory)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = seed::rng(seed::derive_seed(cfg.seed, "nn-shuffle", 0));
    let mut model = model.clone();
    let mut opt = OptState::new(&model);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut hist = TrainHistory::default();
    let mut best = (f64::INFINITY, model.clone());
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let l = run_epoch(&mut model, data, &order, cfg, &mut opt, epoch)?;
        hist.train_loss.push(l);
        if !val.is_empty() {
            let vl = mean_loss(&model, val, cfg.loss)?;
            hist.val_loss.push(vl);
            if vl < best.0 {
                best = (vl, model.clone());
                hist.best_epoch = epoch;
            }
        }
        log::debug!("epoch {epoch}: train loss {l:.6}");
    }
    if val.is_empty() {
        hist.best_epoch = cfg.epochs - 1;
        Ok((model, hist))
    } else {
        Ok((best.1, hist))
    }
}

/// Index of the largest output (first on ties).
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
}

/// Relative error `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares analytic gradients with central differences of step `eps`.
/// When `max_coords` is set, a seeded random subset of parameters is
/// checked. Coordinates whose perturbation flips a ReLU or a pool winner are
/// skipped and counted.
pub fn gradient_check(
    model: &NeuralModel,
    inputs: &[Tensor],
    targets: &[Tensor],
    loss: Loss,
    eps: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<GradCheck> {
    let (_, grads) = loss_and_grad(model, inputs, targets, loss)?;
    let mut coords: Vec<(usize, usize)> = model
        .params
        .iter()
        .enumerate()
        .flat_map(|(k, p)| (0..p.len()).map(move |i| (k, i)))
        .collect();
    if let Some(m) = max_coords {
        if m < coords.len() {
            let mut rng = seed::rng(seed);
            coords.shuffle(&mut rng);
            coords.truncate(m);
        }
    }
    let pattern = |m: &NeuralModel| -> Vec<Vec<usize>> { inputs.iter().map(|x| m.activation_pattern(x)).collect() };
    let base_pattern = pattern(model);
    let mut report = GradCheck { checked: 0, skipped_kinks: 0, max_rel_error: 0.0 };
    let mut probe = model.clone();
    for (k, i) in coords {
        let orig = probe.params[k][i];
        probe.params[k][i] = orig + eps;
        let pp = pattern(&probe);
        let lp = batch_mean(&probe, inputs, targets, loss)?;
        probe.params[k][i] = orig - eps;
        let pm = pattern(&probe);
        let lm = batch_mean(&probe, inputs, targets, loss)?;
        probe.params[k][i] = orig;
        if pp != base_pattern || pm != base_pattern {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * eps);
        report.max_rel_error = report.max_rel_error.max(relative_error(grads[k][i], numeric));
        report.checked += 1;
    }
    Ok(report)
}

fn batch_mean(model: &NeuralModel, inputs: &[Tensor], targets: &[Tensor], loss: Loss) -> Result<f64> {
    let mut total = 0.0;
    for (x, t) in inputs.iter().zip(targets) {
        total += sample_loss(loss, &model.forward(x)?, t)?.0;
    }
    Ok(total / inputs.len() as f64)
}

/// Random tensor with entries uniform in `[-1, 1)`.
pub fn random_tensor(shape: Vec<usize>, rng: &mut seed::Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor { shape, data: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() }
}

const MODEL_MAGIC: &str = "#metastop-model v1";

fn fmt_dims(d: &[usize]) -> String {
    d.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

impl NeuralModel {
    /// Text checkpoint: header, input shape, one line per layer spec, then
    /// one line per layer of row-major parameters.
    pub fn to_checkpoint(&self) -> String {
        let mut out = format!("{MODEL_MAGIC}\ninput {}\nlayers {}\n", fmt_dims(&self.input_shape), self.layers.len());
        for l in &self.layers {
            let line = match *l {
                LayerSpec::Dense { input, output, activation } => format!(
                    "dense {input} {output} {}",
                    if activation == Activation::Relu { "relu" } else { "identity" }
                ),
                LayerSpec::Conv2d { in_ch, out_ch, kernel } => format!("conv2d {in_ch} {out_ch} {kernel}"),
                LayerSpec::MaxPool2 => "maxpool2".into(),
                LayerSpec::Flatten => "flatten".into(),
                LayerSpec::Rnn { input, hidden } => format!("rnn {input} {hidden}"),
            };
            out.push_str(&line);
            out.push('\n');
        }
        for (k, p) in self.params.iter().enumerate() {
            write!(out, "params {k} {}", p.len()).unwrap();
            for v in p {
                write!(out, " {v}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let perr = |m: String| Error::Parse(m);
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next().map(str::trim) != Some(MODEL_MAGIC) {
            return Err(perr("missing model checkpoint header".into()));
        }
        let nums = |s: &str| -> Result<Vec<usize>> {
            s.split_whitespace()
                .map(|t| t.parse().map_err(|_| perr(format!("bad integer '{t}'"))))
                .collect()
        };
        let input_line = lines.next().ok_or_else(|| perr("missing input line".into()))?;
        let input_shape = nums(input_line.strip_prefix("input").ok_or_else(|| perr("missing input line".into()))?)?;
        let count_line = lines.next().ok_or_else(|| perr("missing layers line".into()))?;
        let n: usize = count_line
            .strip_prefix("layers ")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| perr(format!("bad layers line '{count_line}'")))?;
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            let line = lines.next().ok_or_else(|| perr("truncated layer list".into()))?;
            let mut tok = line.split_whitespace();
            let kind = tok.next().unwrap_or("");
            let rest: Vec<&str> = tok.collect();
            let arg = |i: usize| -> Result<usize> {
                rest.get(i)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| perr(format!("bad layer line '{line}'")))
            };
            layers.push(match kind {
                "dense" => LayerSpec::Dense {
                    input: arg(0)?,
                    output: arg(1)?,
                    activation: match rest.get(2) {
                        Some(&"relu") => Activation::Relu,
                        Some(&"identity") => Activation::Identity,
                        _ => return Err(perr(format!("bad activation in '{line}'"))),
                    },
                },
                "conv2d" => LayerSpec::Conv2d { in_ch: arg(0)?, out_ch: arg(1)?, kernel: arg(2)? },
                "maxpool2" => LayerSpec::MaxPool2,
                "flatten" => LayerSpec::Flatten,
                "rnn" => LayerSpec::Rnn { input: arg(0)?, hidden: arg(1)? },
                _ => return Err(perr(format!("unknown layer '{kind}'"))),
            });
        }
        let mut model = NeuralModel::new(input_shape, layers, 0)?;
        for k in 0..n {
            let line = lines.next().ok_or_else(|| perr("truncated parameters".into()))?;
            let mut tok = line.split_whitespace();
            let (Some("params"), Some(idx), Some(len)) = (tok.next(), tok.next(), tok.next()) else {
                return Err(perr(format!("bad params line for layer {k}")));
            };
            if idx.parse::<usize>().ok() != Some(k) || len.parse::<usize>().ok() != Some(model.params[k].len()) {
                return Err(Error::ShapeMismatch(format!("parameter block {k} does not match its layer")));
            }
            let vals: Vec<f64> = tok
                .map(|t| t.parse().map_err(|_| perr(format!("bad number '{t}'"))))
                .collect::<Result<_>>()?;
            if vals.len() != model.params[k].len() {
                return Err(Error::ShapeMismatch(format!("layer {k}: {} values", vals.len())));
            }
            model.params[k] = vals;
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(s: u64) -> seed::Rng {
        seed::rng(s)
    }

    #[test]
    fn tensor_checks_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::zeros(vec![2, 3]).data().len(), 6);
    }

    #[test]
    fn identity_dense_passes_input_through() {
        let mut m = NeuralModel::new(
            vec![3],
            vec![LayerSpec::Dense { input: 3, output: 3, activation: Activation::Identity }],
            1,
        )
        .unwrap();
        let mut p = vec![0.0; 12];
        for i in 0..3 {
            p[i * 3 + i] = 1.0;
        }
        m.params_mut()[0] = p;
        let x = Tensor::vector(vec![0.5, -2.0, 3.0]);
        assert_eq!(m.forward(&x).unwrap(), x);
    }

    #[test]
    fn relu_of_negative_is_zero() {
        let mut m = NeuralModel::new(
            vec![2],
            vec![LayerSpec::Dense { input: 2, output: 2, activation: Activation::Relu }],
            1,
        )
        .unwrap();
        m.params_mut()[0] = vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let y = m.forward(&Tensor::vector(vec![-1.0, -3.0])).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
    }

    #[test]
    fn maxpool_picks_maximum() {
        let m = NeuralModel::new(vec![1, 2, 2], vec![LayerSpec::MaxPool2], 0).unwrap();
        let y = m.forward(&Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        assert_eq!((y.shape(), y.data()), (&[1, 1, 1][..], &[4.0][..]));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let m = NeuralModel::mlp(3, &[4], 2, 0).unwrap();
        assert!(matches!(m.forward(&Tensor::vector(vec![1.0; 4])), Err(Error::ShapeMismatch(_))));
        assert!(NeuralModel::new(vec![3], vec![LayerSpec::Dense { input: 4, output: 1, activation: Activation::Relu }], 0).is_err());
        let r = NeuralModel::rnn(1, 4, 0).unwrap();
        assert_eq!(r.forward(&Tensor::new(vec![7, 1], vec![0.1; 7]).unwrap()).unwrap().shape(), &[7, 2]);
    }

    #[test]
    fn loss_examples() {
        let out = Tensor::vector(vec![0.3, 0.3]);
        let (l, _) = sample_loss(Loss::SoftmaxCrossEntropy, &out, &Tensor::scalar(1.0)).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);

        let m = NeuralModel::mlp(2, &[3], 1, 4).unwrap();
        let x = Tensor::vector(vec![0.2, -0.4]);
        let y = m.forward(&x).unwrap();
        let (l, g) = loss_and_grad(&m, &[x], &[y], Loss::SquaredError).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().flatten().all(|&v| v == 0.0));
    }

    fn check(model: &NeuralModel, inputs: &[Tensor], targets: &[Tensor], loss: Loss, max: Option<usize>) {
        let r = gradient_check(model, inputs, targets, loss, 1e-5, max, 9).unwrap();
        assert!(r.checked > 0, "{r:?}");
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn gradients_dense_and_mlp() {
        let mut g = rng(1);
        for seed in 0..5 {
            let m = NeuralModel::mlp(4, &[6, 5], 3, seed).unwrap();
            let xs: Vec<_> = (0..3).map(|_| random_tensor(vec![4], &mut g)).collect();
            let ys: Vec<_> = (0..3).map(|_| random_tensor(vec![3], &mut g)).collect();
            check(&m, &xs, &ys, Loss::SquaredError, None);
            let m = NeuralModel::mlp(4, &[6], 2, seed).unwrap();
            let cs: Vec<_> = (0..3).map(|i| Tensor::scalar((i % 2) as f64)).collect();
            check(&m, &xs, &cs, Loss::SoftmaxCrossEntropy, None);
        }
    }

    #[test]
    fn gradients_conv_pool() {
        let mut g = rng(2);
        let layers = vec![
            LayerSpec::Conv2d { in_ch: 2, out_ch: 3, kernel: 5 },
            LayerSpec::MaxPool2,
            LayerSpec::Flatten,
            LayerSpec::Dense { input: 3 * 3 * 3, output: 1, activation: Activation::Identity },
        ];
        for seed in 0..4 {
            let m = NeuralModel::new(vec![2, 10, 10], layers.clone(), seed).unwrap();
            let xs: Vec<_> = (0..2).map(|_| random_tensor(vec![2, 10, 10], &mut g)).collect();
            let ys: Vec<_> = (0..2).map(|_| random_tensor(vec![1], &mut g)).collect();
            check(&m, &xs, &ys, Loss::SquaredError, None);
        }
    }

    #[test]
    fn gradients_rnn() {
        let mut g = rng(3);
        for seed in 0..4 {
            let m = NeuralModel::rnn(2, 5, seed).unwrap();
            let xs: Vec<_> = (0..2).map(|_| random_tensor(vec![6, 2], &mut g)).collect();
            let ys: Vec<_> = (0..2)
                .map(|_| Tensor::vector((0..6).map(|_| f64::from(g.random_range(0..2u8))).collect()))
                .collect();
            check(&m, &xs, &ys, Loss::SoftmaxCrossEntropy, None);
        }
    }

    fn naive_conv(x: &[f64], (c, h, w): (usize, usize, usize), k: &[f64], b: &[f64], oc: usize) -> Vec<f64> {
        let (oh, ow) = (h - 4, w - 4);
        let mut y = vec![0.0; oc * oh * ow];
        for o in 0..oc {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[o];
                    for i in 0..c {
                        for ky in 0..5 {
                            for kx in 0..5 {
                                acc += k[((o * c + i) * 5 + ky) * 5 + kx] * x[(i * h + oy + ky) * w + ox + kx];
                            }
                        }
                    }
                    y[(o * oh + oy) * ow + ox] = acc.max(0.0);
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_naive_reference() {
        let mut g = rng(4);
        for seed in 0..5 {
            let mut m = NeuralModel::new(vec![3, 9, 11], vec![LayerSpec::Conv2d { in_ch: 3, out_ch: 4, kernel: 5 }], seed).unwrap();
            for v in &mut m.params_mut()[0][3 * 4 * 25..] {
                *v = g.random_range(-0.5..0.5);
            }
            let x = random_tensor(vec![3, 9, 11], &mut g);
            let y = m.forward(&x).unwrap();
            let p = &m.params()[0];
            let reference = naive_conv(x.data(), (3, 9, 11), &p[..300], &p[300..], 4);
            for (a, b) in y.data().iter().zip(&reference) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let m = NeuralModel::mlp(2, &[4], 1, 3).unwrap();
        let data: Vec<Sample> = (0..10)
            .map(|i| Sample { input: Tensor::vector(vec![i as f64, 1.0]), target: Tensor::scalar(i as f64) })
            .collect();
        let mut cfg = TrainConfig::new(Loss::SquaredError, 0.0, 4, 3, 1);
        assert_eq!(train(&m, &data, &cfg).unwrap(), m);
        cfg.optimizer = Optimizer::Sgd;
        assert_eq!(train(&m, &data, &cfg).unwrap(), m);
    }

    #[test]
    fn linear_regression_recovers_slope() {
        let m = NeuralModel::new(
            vec![1],
            vec![LayerSpec::Dense { input: 1, output: 1, activation: Activation::Identity }],
            5,
        )
        .unwrap();
        let data: Vec<Sample> = (0..20)
            .map(|i| {
                let x = i as f64 / 10.0 - 1.0;
                Sample { input: Tensor::scalar(x), target: Tensor::scalar(2.0 * x) }
            })
            .collect();
        let cfg = TrainConfig::new(Loss::SquaredError, 0.05, 5, 300, 2);
        let t = train(&m, &data, &cfg).unwrap();
        assert!((t.params()[0][0] - 2.0).abs() < 1e-3, "{:?}", t.params());
    }

    #[test]
    fn separable_set_is_learned() {
        let mut g = rng(6);
        let data: Vec<Sample> = (0..100)
            .map(|_| {
                let x = random_tensor(vec![2], &mut g);
                let c = f64::from(u8::from(x.data()[0] + 0.5 * x.data()[1] > 0.1));
                Sample { input: x, target: Tensor::scalar(c) }
            })
            .collect();
        let m = NeuralModel::mlp(2, &[16], 2, 7).unwrap();
        let cfg = TrainConfig::new(Loss::SoftmaxCrossEntropy, 0.01, 10, 200, 3);
        let t = train(&m, &data, &cfg).unwrap();
        let correct = data
            .iter()
            .filter(|s| argmax(t.forward(&s.input).unwrap().data()) as f64 == s.target.data()[0])
            .count();
        assert_eq!(correct, 100);
    }

    #[test]
    fn training_is_deterministic_and_diverges_loudly() {
        let data: Vec<Sample> = (0..30)
            .map(|i| Sample { input: Tensor::vector(vec![i as f64 / 30.0, 1.0]), target: Tensor::scalar(i as f64) })
            .collect();
        let m = NeuralModel::mlp(2, &[8], 1, 1).unwrap();
        let cfg = TrainConfig::new(Loss::SquaredError, 0.01, 7, 5, 11);
        assert_eq!(train(&m, &data, &cfg).unwrap(), train(&m, &data, &cfg).unwrap());
        let mut bad = cfg.clone();
        bad.optimizer = Optimizer::Sgd;
        bad.learning_rate = 1e6;
        assert!(matches!(train(&m, &data, &bad), Err(Error::Diverged { .. })));
        assert!(matches!(train(&m, &[], &cfg), Err(Error::EmptyDataset)));
    }

    #[test]
    fn checkpoint_round_trip() {
        let layers = vec![
            LayerSpec::Conv2d { in_ch: 1, out_ch: 2, kernel: 5 },
            LayerSpec::MaxPool2,
            LayerSpec::Flatten,
            LayerSpec::Dense { input: 2 * 2 * 2, output: 3, activation: Activation::Relu },
            LayerSpec::Dense { input: 3, output: 1, activation: Activation::Identity },
        ];
        let m = NeuralModel::new(vec![1, 8, 8], layers, 42).unwrap();
        let text = m.to_checkpoint();
        assert!(text.starts_with("#metastop-model v1\n"));
        assert_eq!(NeuralModel::from_checkpoint(&text).unwrap(), m);
        let r = NeuralModel::rnn(1, 3, 1).unwrap();
        assert_eq!(NeuralModel::from_checkpoint(&r.to_checkpoint()).unwrap(), r);
        assert!(NeuralModel::from_checkpoint("garbage").is_err());
    }
}
