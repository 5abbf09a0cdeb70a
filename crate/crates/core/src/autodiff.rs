//! A small reverse-mode tape over batched `f64` tensors.
//!
//! Image tensors are laid out `[N, C, H, W]`, vectors `[N, F]`. Each
//! operation appends one node; [`Tape::backward`] walks the nodes in reverse
//! and accumulates gradients. Batch-parallel kernels reduce their parameter
//! gradients in sample order so results are identical across thread counts.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, pad: usize },
    Linear { x: Var, w: Var, b: Option<Var> },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Add(Var, Var),
    MulConst(Var, Tensor),
    Clamp { x: Var, lo: f64, hi: f64 },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Upsample2(Var),
    MeanHw(Var),
    MaxHw { x: Var, argmax: Vec<usize> },
    MeanC(Var),
    MaxC { x: Var, argmax: Vec<usize> },
    Concat(Vec<Var>),
    ScaleChannels { x: Var, m: Var },
    ScaleSpatial { x: Var, m: Var },
    Reshape(Var),
    L1Mean { x: Var, target: Tensor, start: usize, end: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`].
#[derive(Debug)]
pub struct Grads(Vec<Option<Tensor>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.0[v.0].take()
    }
}

fn dims4(t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(Error::contract(format!("expected a [N,C,H,W] tensor, got {s:?}"))),
    }
}

fn dims2(t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [n, f] => Ok((n, f)),
        ref s => Err(Error::contract(format!("expected a [N,F] tensor, got {s:?}"))),
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Stride-1 2-D convolution with symmetric zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let (n, ci, h, wd) = dims4(self.value(x))?;
        let (co, wci, kh, kw) = dims4(self.value(w))?;
        if wci != ci || kh != kw {
            return Err(Error::contract(format!(
                "conv kernel {:?} incompatible with input {:?}",
                self.value(w).shape(),
                self.value(x).shape()
            )));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::contract("conv kernel larger than padded input"));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [co] {
                return Err(Error::contract("conv bias must have one entry per output channel"));
            }
        }
        let (ho, wo) = (h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1);
        let xin = self.value(x).data();
        let wt = self.value(w).data();
        let bias = b.map(|b| self.value(b).data());
        let mut out = vec![0.0; n * co * ho * wo];
        let geom = ConvGeom { ci, h, w: wd, co, k: kh, pad, ho, wo };
        out.par_chunks_mut(co * ho * wo)
            .zip(xin.par_chunks(ci * h * wd))
            .for_each(|(o, xi)| geom.forward(xi, wt, bias, o));
        let value = Tensor::new(vec![n, co, ho, wo], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, pad }))
    }

    /// `x · wᵀ + b` with `x: [N, I]`, `w: [O, I]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, i) = dims2(self.value(x))?;
        let (o, wi) = dims2(self.value(w))?;
        if wi != i {
            return Err(Error::contract(format!(
                "linear weight {:?} incompatible with input {:?}",
                self.value(w).shape(),
                self.value(x).shape()
            )));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [o] {
                return Err(Error::contract("linear bias must have one entry per output"));
            }
        }
        let (xd, wdat) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![0.0; n * o];
        for s in 0..n {
            let row = &xd[s * i..(s + 1) * i];
            for j in 0..o {
                let wr = &wdat[j * i..(j + 1) * i];
                let mut acc = b.map_or(0.0, |b| self.value(b).data()[j]);
                for (a, c) in row.iter().zip(wr) {
                    acc += a * c;
                }
                out[s * o + j] = acc;
            }
        }
        let value = Tensor::new(vec![n, o], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0));
        self.push(v, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::exp);
        self.push(v, Op::Exp(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::contract("add needs matching shapes"));
        }
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        if self.value(x).shape() != c.shape() {
            return Err(Error::contract("mul_const needs matching shapes"));
        }
        let data = self.value(x).data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let v = Tensor::new(self.value(x).shape().to_vec(), data)?;
        Ok(self.push(v, Op::MulConst(x, c)))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(x).map(|a| a.clamp(lo, hi));
        self.push(v, Op::Clamp { x, lo, hi })
    }

    /// 2×2 max pooling, stride 2. Odd trailing rows/columns are dropped.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(x))?;
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(Error::contract("max pool needs at least a 2×2 map"));
        }
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * c * ho * wo];
        let mut argmax = vec![0usize; out.len()];
        for p in 0..n * c {
            let base = p * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    let o = p * ho * wo + oy * wo + ox;
                    out[o] = xd[best];
                    argmax[o] = best;
                }
            }
        }
        let v = Tensor::new(vec![n, c, ho, wo], out)?;
        Ok(self.push(v, Op::MaxPool2 { x, argmax }))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(x))?;
        let xd = self.value(x).data();
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * ho * wo];
        for p in 0..n * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    out[p * ho * wo + oy * wo + ox] = xd[p * h * w + (oy / 2) * w + ox / 2];
                }
            }
        }
        let v = Tensor::new(vec![n, c, ho, wo], out)?;
        Ok(self.push(v, Op::Upsample2(x)))
    }

    /// Average over the spatial extent: `[N,C,H,W] → [N,C]`.
    pub fn mean_hw(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(x))?;
        let hw = h * w;
        let out = self.value(x).data().chunks(hw).map(|s| s.iter().sum::<f64>() / hw as f64).collect();
        let v = Tensor::new(vec![n, c], out)?;
        Ok(self.push(v, Op::MeanHw(x)))
    }

    /// Maximum over the spatial extent: `[N,C,H,W] → [N,C]`.
    pub fn max_hw(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(x))?;
        let hw = h * w;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * c);
        let mut argmax = Vec::with_capacity(n * c);
        for p in 0..n * c {
            let s = &xd[p * hw..(p + 1) * hw];
            let mut best = 0;
            for (i, &v) in s.iter().enumerate() {
                if v > s[best] {
                    best = i;
                }
            }
            out.push(s[best]);
            argmax.push(p * hw + best);
        }
        let v = Tensor::new(vec![n, c], out)?;
        Ok(self.push(v, Op::MaxHw { x, argmax }))
    }

    /// Average across channels: `[N,C,H,W] → [N,1,H,W]`.
    pub fn mean_c(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(x))?;
        let hw = h * w;
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * hw];
        for s in 0..n {
            for ch in 0..c {
                let src = &xd[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                for (o, v) in out[s * hw..(s + 1) * hw].iter_mut().zip(src) {
                    *o += v;
                }
            }
        }
        for o in &mut out {
            *o /= c as f64;
        }
        let v = Tensor::new(vec![n, 1, h, w], out)?;
        Ok(self.push(v, Op::MeanC(x)))
    }

    /// Maximum across channels: `[N,C,H,W] → [N,1,H,W]`.
    pub fn max_c(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(x))?;
        let hw = h * w;
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * hw];
        let mut argmax = vec![0usize; n * hw];
        for s in 0..n {
            for p in 0..hw {
                let mut best = s * c * hw + p;
                for ch in 1..c {
                    let idx = (s * c + ch) * hw + p;
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                out[s * hw + p] = xd[best];
                argmax[s * hw + p] = best;
            }
        }
        let v = Tensor::new(vec![n, 1, h, w], out)?;
        Ok(self.push(v, Op::MaxC { x, argmax }))
    }

    /// Channel-wise concatenation of `[N,Cᵢ,H,W]` tensors.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = dims4(self.value(*parts.first().ok_or_else(|| Error::contract("empty concat"))?))?;
        let (n, _, h, w) = first;
        let mut chans = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pn, pc, ph, pw) = dims4(self.value(p))?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::contract("concat needs matching batch and spatial sizes"));
            }
            chans.push(pc);
        }
        let total: usize = chans.iter().sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total * hw);
        for s in 0..n {
            for (&p, &pc) in parts.iter().zip(&chans) {
                out.extend_from_slice(&self.value(p).data()[s * pc * hw..(s + 1) * pc * hw]);
            }
        }
        let v = Tensor::new(vec![n, total, h, w], out)?;
        Ok(self.push(v, Op::Concat(parts.to_vec())))
    }

    /// `x[n,c,:,:] * m[n,c]`.
    pub fn scale_channels(&mut self, x: Var, m: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(x))?;
        if self.value(m).shape() != [n, c] {
            return Err(Error::contract("channel map must be [N, C]"));
        }
        let hw = h * w;
        let md = self.value(m).data();
        let mut out = self.value(x).data().to_vec();
        for (p, chunk) in out.chunks_mut(hw).enumerate() {
            for v in chunk {
                *v *= md[p];
            }
        }
        let v = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(v, Op::ScaleChannels { x, m }))
    }

    /// `x[n,c,y,x] * m[n,0,y,x]`.
    pub fn scale_spatial(&mut self, x: Var, m: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(x))?;
        if self.value(m).shape() != [n, 1, h, w] {
            return Err(Error::contract("spatial map must be [N, 1, H, W]"));
        }
        let hw = h * w;
        let md = self.value(m).data();
        let mut out = self.value(x).data().to_vec();
        for s in 0..n {
            let ms = &md[s * hw..(s + 1) * hw];
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                for (v, f) in out[base..base + hw].iter_mut().zip(ms) {
                    *v *= f;
                }
            }
        }
        let v = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(v, Op::ScaleSpatial { x, m }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    /// Mean absolute difference between batch items `start..end` of `x` and
    /// `target` (which holds exactly those items). Produces a scalar.
    pub fn l1_mean(&mut self, x: Var, target: Tensor, start: usize, end: usize) -> Result<Var> {
        let xs = self.value(x).shape();
        let n = xs[0];
        if start >= end || end > n {
            return Err(Error::contract(format!("invalid batch range {start}..{end} of {n}")));
        }
        let per: usize = xs[1..].iter().product();
        if target.len() != (end - start) * per {
            return Err(Error::contract("reconstruction target shape mismatch"));
        }
        let slice = &self.value(x).data()[start * per..end * per];
        let total: f64 = slice.iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum();
        let v = Tensor::scalar(total / slice.len() as f64);
        Ok(self.push(v, Op::L1Mean { x, target, start, end }))
    }

    /// Reverse sweep starting from the given seed gradients.
    pub fn backward(&self, seeds: Vec<(Var, Tensor)>) -> Result<Grads> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            if g.shape() != self.value(v).shape() {
                return Err(Error::contract(format!(
                    "seed gradient shape {:?} does not match node shape {:?}",
                    g.shape(),
                    self.value(v).shape()
                )));
            }
            accumulate(&mut grads, v, g);
            last = last.max(v.0);
        }
        for idx in (0..=last).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Grads(grads))
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, pad } => {
                let (n, ci, h, wd) = dims4(self.value(*x))?;
                let (co, _, k, _) = dims4(self.value(*w))?;
                let (ho, wo) = (out.shape()[2], out.shape()[3]);
                let geom = ConvGeom { ci, h, w: wd, co, k, pad: *pad, ho, wo };
                let xd = self.value(*x).data();
                let wt = self.value(*w).data();
                let parts: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
                    .into_par_iter()
                    .map(|s| {
                        let gy = &g.data()[s * co * ho * wo..(s + 1) * co * ho * wo];
                        let xi = &xd[s * ci * h * wd..(s + 1) * ci * h * wd];
                        geom.backward(xi, wt, gy)
                    })
                    .collect();
                let mut dx = Vec::with_capacity(n * ci * h * wd);
                let mut dw = vec![0.0; wt.len()];
                for (dxi, dwi) in &parts {
                    dx.extend_from_slice(dxi);
                    for (a, c) in dw.iter_mut().zip(dwi) {
                        *a += c;
                    }
                }
                accumulate(grads, *x, Tensor::new(vec![n, ci, h, wd], dx)?);
                accumulate(grads, *w, Tensor::new(self.value(*w).shape().to_vec(), dw)?);
                if let Some(b) = b {
                    let mut db = vec![0.0; co];
                    for s in 0..n {
                        for (c, dbc) in db.iter_mut().enumerate() {
                            let base = (s * co + c) * ho * wo;
                            *dbc += g.data()[base..base + ho * wo].iter().sum::<f64>();
                        }
                    }
                    accumulate(grads, *b, Tensor::new(vec![co], db)?);
                }
            }
            Op::Linear { x, w, b } => {
                let (n, i) = dims2(self.value(*x))?;
                let (o, _) = dims2(self.value(*w))?;
                let (xd, wdat, gd) = (self.value(*x).data(), self.value(*w).data(), g.data());
                let mut dx = vec![0.0; n * i];
                let mut dw = vec![0.0; o * i];
                for s in 0..n {
                    for j in 0..o {
                        let gj = gd[s * o + j];
                        if gj == 0.0 {
                            continue;
                        }
                        for t in 0..i {
                            dx[s * i + t] += gj * wdat[j * i + t];
                            dw[j * i + t] += gj * xd[s * i + t];
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(vec![n, i], dx)?);
                accumulate(grads, *w, Tensor::new(vec![o, i], dw)?);
                if let Some(b) = b {
                    let mut db = vec![0.0; o];
                    for s in 0..n {
                        for j in 0..o {
                            db[j] += gd[s * o + j];
                        }
                    }
                    accumulate(grads, *b, Tensor::new(vec![o], db)?);
                }
            }
            Op::Relu(x) => {
                let d = zip_map(g, self.value(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                accumulate(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let d = zip_map(g, out, |gv, s| gv * s * (1.0 - s));
                accumulate(grads, *x, d);
            }
            Op::Exp(x) => {
                let d = zip_map(g, out, |gv, e| gv * e);
                accumulate(grads, *x, d);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::MulConst(x, c) => {
                accumulate(grads, *x, zip_map(g, c, |gv, cv| gv * cv));
            }
            Op::Clamp { x, lo, hi } => {
                let d = zip_map(g, self.value(*x), |gv, xv| if xv > *lo && xv < *hi { gv } else { 0.0 });
                accumulate(grads, *x, d);
            }
            Op::MaxPool2 { x, argmax } | Op::MaxHw { x, argmax } | Op::MaxC { x, argmax } => {
                let mut d = Tensor::zeros(self.value(*x).shape());
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    d.data_mut()[src] += gv;
                }
                accumulate(grads, *x, d);
            }
            Op::Upsample2(x) => {
                let (n, c, h, w) = dims4(self.value(*x))?;
                let (ho, wo) = (2 * h, 2 * w);
                let mut d = Tensor::zeros(&[n, c, h, w]);
                let dd = d.data_mut();
                for p in 0..n * c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            dd[p * h * w + (oy / 2) * w + ox / 2] += g.data()[p * ho * wo + oy * wo + ox];
                        }
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::MeanHw(x) => {
                let (n, c, h, w) = dims4(self.value(*x))?;
                let hw = h * w;
                let mut d = Tensor::zeros(&[n, c, h, w]);
                for (chunk, &gv) in d.data_mut().chunks_mut(hw).zip(g.data()) {
                    chunk.fill(gv / hw as f64);
                }
                accumulate(grads, *x, d);
            }
            Op::MeanC(x) => {
                let (n, c, h, w) = dims4(self.value(*x))?;
                let hw = h * w;
                let mut d = Tensor::zeros(&[n, c, h, w]);
                let dd = d.data_mut();
                for s in 0..n {
                    let gs = &g.data()[s * hw..(s + 1) * hw];
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        for (v, gv) in dd[base..base + hw].iter_mut().zip(gs) {
                            *v = gv / c as f64;
                        }
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::Concat(parts) => {
                let (n, total, h, w) = dims4(out)?;
                let hw = h * w;
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).shape()[1];
                    let mut d = Vec::with_capacity(n * pc * hw);
                    for s in 0..n {
                        let base = (s * total + offset) * hw;
                        d.extend_from_slice(&g.data()[base..base + pc * hw]);
                    }
                    accumulate(grads, p, Tensor::new(vec![n, pc, h, w], d)?);
                    offset += pc;
                }
            }
            Op::ScaleChannels { x, m } => {
                let (n, c, h, w) = dims4(self.value(*x))?;
                let hw = h * w;
                let (xd, md) = (self.value(*x).data(), self.value(*m).data());
                let mut dx = vec![0.0; n * c * hw];
                let mut dm = vec![0.0; n * c];
                for p in 0..n * c {
                    let range = p * hw..(p + 1) * hw;
                    for ((dxv, &gv), &xv) in dx[range.clone()].iter_mut().zip(&g.data()[range.clone()]).zip(&xd[range]) {
                        *dxv = gv * md[p];
                        dm[p] += gv * xv;
                    }
                }
                accumulate(grads, *x, Tensor::new(vec![n, c, h, w], dx)?);
                accumulate(grads, *m, Tensor::new(vec![n, c], dm)?);
            }
            Op::ScaleSpatial { x, m } => {
                let (n, c, h, w) = dims4(self.value(*x))?;
                let hw = h * w;
                let (xd, md) = (self.value(*x).data(), self.value(*m).data());
                let mut dx = vec![0.0; n * c * hw];
                let mut dm = vec![0.0; n * hw];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        for p in 0..hw {
                            let gv = g.data()[base + p];
                            dx[base + p] = gv * md[s * hw + p];
                            dm[s * hw + p] += gv * xd[base + p];
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(vec![n, c, h, w], dx)?);
                accumulate(grads, *m, Tensor::new(vec![n, 1, h, w], dm)?);
            }
            Op::Reshape(x) => {
                let d = g.clone().reshaped(self.value(*x).shape())?;
                accumulate(grads, *x, d);
            }
            Op::L1Mean { x, target, start, end } => {
                let xs = self.value(*x).shape();
                let per: usize = xs[1..].iter().product();
                let count = ((end - start) * per) as f64;
                let scale = g.data()[0] / count;
                let mut d = Tensor::zeros(xs);
                let xd = self.value(*x).data();
                let dd = d.data_mut();
                for (k, t) in target.data().iter().enumerate() {
                    let idx = start * per + k;
                    let diff = xd[idx] - t;
                    dd[idx] = if diff > 0.0 {
                        scale
                    } else if diff < 0.0 {
                        -scale
                    } else {
                        0.0
                    };
                }
                accumulate(grads, *x, d);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes checked by caller")
}

/// Per-sample convolution kernels.
#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    /// Output columns `ox` for which `ox + kx − pad` lands inside the input.
    #[inline]
    fn span(&self, kx: usize, full_out: usize, full_in: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx);
        let hi = (full_in + self.pad).saturating_sub(kx).min(full_out);
        (lo, hi.max(lo))
    }

    fn forward(&self, x: &[f64], wt: &[f64], bias: Option<&[f64]>, out: &mut [f64]) {
        let (k, hw_in, hw_out) = (self.k, self.h * self.w, self.ho * self.wo);
        for c in 0..self.co {
            let o = &mut out[c * hw_out..(c + 1) * hw_out];
            o.fill(bias.map_or(0.0, |b| b[c]));
            for i in 0..self.ci {
                let xi = &x[i * hw_in..(i + 1) * hw_in];
                for ky in 0..k {
                    let (oy0, oy1) = self.span(ky, self.ho, self.h);
                    for kx in 0..k {
                        let wv = wt[((c * self.ci + i) * k + ky) * k + kx];
                        let (ox0, ox1) = self.span(kx, self.wo, self.w);
                        if ox0 == ox1 {
                            continue;
                        }
                        for oy in oy0..oy1 {
                            let iy = oy + ky - self.pad;
                            let orow = &mut o[oy * self.wo + ox0..oy * self.wo + ox1];
                            let irow = &xi[iy * self.w + ox0 + kx - self.pad..];
                            for (ov, iv) in orow.iter_mut().zip(irow) {
                                *ov += wv * iv;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Returns `(dx, dw)` for one sample.
    fn backward(&self, x: &[f64], wt: &[f64], gy: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (k, hw_in, hw_out) = (self.k, self.h * self.w, self.ho * self.wo);
        let mut dx = vec![0.0; self.ci * hw_in];
        let mut dw = vec![0.0; wt.len()];
        for c in 0..self.co {
            let gc = &gy[c * hw_out..(c + 1) * hw_out];
            for i in 0..self.ci {
                let xi = &x[i * hw_in..(i + 1) * hw_in];
                let dxi = &mut dx[i * hw_in..(i + 1) * hw_in];
                for ky in 0..k {
                    let (oy0, oy1) = self.span(ky, self.ho, self.h);
                    for kx in 0..k {
                        let widx = ((c * self.ci + i) * k + ky) * k + kx;
                        let wv = wt[widx];
                        let (ox0, ox1) = self.span(kx, self.wo, self.w);
                        if ox0 == ox1 {
                            continue;
                        }
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy + ky - self.pad;
                            let grow = &gc[oy * self.wo + ox0..oy * self.wo + ox1];
                            let start = iy * self.w + ox0 + kx - self.pad;
                            let irow = &xi[start..start + grow.len()];
                            for (gv, iv) in grow.iter().zip(irow) {
                                acc += gv * iv;
                            }
                            let drow = &mut dxi[start..start + grow.len()];
                            for (dv, gv) in drow.iter_mut().zip(grow) {
                                *dv += wv * gv;
                            }
                        }
                        dw[widx] += acc;
                    }
                }
            }
        }
        (dx, dw)
    }
}
