//! Differentiable network kernels: convolutions (standard, depthwise,
//! separable), pooling (global and cross-channel), dense layers,
//! activations, channel concat and gather.
//!
//! All image tensors are N x H x W x C. Convolution kernels are
//! kh x kw x Cin x Cout. SAME padding follows the ceil(extent/stride)
//! convention with the extra pad row/column placed at the bottom/right.

use crate::error::{Error, Result};
use crate::tensor::{add_into, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    None,
}

/// Weights of one standard convolution.
#[derive(Clone, Copy)]
pub struct Conv2dParams {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: Padding,
}

impl Conv2dParams {
    pub fn new(
        tape: &Tape,
        kernel: Tensor,
        bias: Tensor,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let ks = tape.shape(kernel);
        if ks.len() != 4 {
            return Err(Error::BadShape {
                op: "conv2d",
                expected: "kh x kw x Cin x Cout kernel".into(),
                shape: ks.to_vec(),
            });
        }
        if padding == Padding::Same && (ks[0] % 2 == 0 || ks[1] % 2 == 0) {
            return Err(Error::BadShape {
                op: "conv2d",
                expected: "odd kernel extents under same padding".into(),
                shape: ks.to_vec(),
            });
        }
        let cout = ks[3];
        if tape.shape(bias) != [cout] {
            return Err(Error::BadShape {
                op: "conv2d",
                expected: format!("bias of length {}", cout),
                shape: tape.shape(bias).to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::Invalid("conv2d stride must be positive".into()));
        }
        Ok(Conv2dParams {
            kernel,
            bias,
            stride,
            padding,
        })
    }
}

/// Depthwise stage (multiplier 1) plus pointwise 1x1 stage.
#[derive(Clone, Copy)]
pub struct SeparableConv2dParams {
    pub depthwise: Tensor,
    pub dw_bias: Tensor,
    pub pointwise: Tensor,
    pub pw_bias: Tensor,
}

impl SeparableConv2dParams {
    pub fn new(
        tape: &Tape,
        depthwise: Tensor,
        dw_bias: Tensor,
        pointwise: Tensor,
        pw_bias: Tensor,
    ) -> Result<Self> {
        let ds = tape.shape(depthwise);
        if ds.len() != 3 || ds[0] % 2 == 0 || ds[1] % 2 == 0 {
            return Err(Error::BadShape {
                op: "separable_conv2d",
                expected: "odd kh x kw x Cin depthwise kernel".into(),
                shape: ds.to_vec(),
            });
        }
        let cin = ds[2];
        let ps = tape.shape(pointwise);
        if ps.len() != 4 || ps[0] != 1 || ps[1] != 1 || ps[2] != cin {
            return Err(Error::BadShape {
                op: "separable_conv2d",
                expected: format!("1 x 1 x {} x Cout pointwise kernel", cin),
                shape: ps.to_vec(),
            });
        }
        if tape.shape(dw_bias) != [cin] {
            return Err(Error::BadShape {
                op: "separable_conv2d",
                expected: format!("depthwise bias of length {}", cin),
                shape: tape.shape(dw_bias).to_vec(),
            });
        }
        if tape.shape(pw_bias) != [ps[3]] {
            return Err(Error::BadShape {
                op: "separable_conv2d",
                expected: format!("pointwise bias of length {}", ps[3]),
                shape: tape.shape(pw_bias).to_vec(),
            });
        }
        Ok(SeparableConv2dParams {
            depthwise,
            dw_bias,
            pointwise,
            pw_bias,
        })
    }
}

#[derive(Clone, Copy)]
pub struct DenseParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl DenseParams {
    pub fn new(tape: &Tape, weight: Tensor, bias: Tensor) -> Result<Self> {
        let ws = tape.shape(weight);
        if ws.len() != 2 {
            return Err(Error::BadShape {
                op: "dense",
                expected: "in x out weight".into(),
                shape: ws.to_vec(),
            });
        }
        if tape.shape(bias) != [ws[1]] {
            return Err(Error::BadShape {
                op: "dense",
                expected: format!("bias of length {}", ws[1]),
                shape: tape.shape(bias).to_vec(),
            });
        }
        Ok(DenseParams { weight, bias })
    }
}

fn dims4(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(Error::BadShape {
            op,
            expected: "rank-4 NHWC tensor".into(),
            shape: shape.to_vec(),
        });
    }
    Ok((shape[0], shape[1], shape[2], shape[3]))
}

/// Output extent and leading pad for one spatial axis.
fn conv_geometry(
    extent: usize,
    k: usize,
    stride: usize,
    padding: Padding,
) -> Result<(usize, usize)> {
    match padding {
        Padding::Same => {
            let out = extent.div_ceil(stride);
            let pad_total = ((out - 1) * stride + k).saturating_sub(extent);
            Ok((out, pad_total / 2))
        }
        Padding::Valid => {
            if extent < k {
                return Err(Error::Invalid(format!(
                    "valid padding needs extent >= kernel ({extent} < {k})"
                )));
            }
            Ok(((extent - k) / stride + 1, 0))
        }
    }
}

pub fn conv2d(tape: &mut Tape, x: Tensor, p: &Conv2dParams) -> Result<Tensor> {
    tape.check(x)?;
    tape.check(p.kernel)?;
    tape.check(p.bias)?;
    let (n, h, w, cin) = dims4("conv2d", tape.shape(x))?;
    let ks = tape.shape(p.kernel).to_vec();
    let (kh, kw, kcin, cout) = (ks[0], ks[1], ks[2], ks[3]);
    if kcin != cin {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: tape.shape(x).to_vec(),
            rhs: ks,
        });
    }
    let stride = p.stride;
    let (oh, pad_top) = conv_geometry(h, kh, stride, p.padding)?;
    let (ow, pad_left) = conv_geometry(w, kw, stride, p.padding)?;

    let xd = tape.data(x);
    let kd = tape.data(p.kernel);
    let bd = tape.data(p.bias);
    let mut out = vec![0.0; n * oh * ow * cout];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let obase = ((b * oh + oy) * ow + ox) * cout;
                out[obase..obase + cout].copy_from_slice(bd);
                for i in 0..kh {
                    let iy = (oy * stride + i) as isize - pad_top as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for j in 0..kw {
                        let ix = (ox * stride + j) as isize - pad_left as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let xbase = ((b * h + iy as usize) * w + ix as usize) * cin;
                        let kbase = (i * kw + j) * cin * cout;
                        for ci in 0..cin {
                            let xv = xd[xbase + ci];
                            if xv == 0.0 {
                                continue;
                            }
                            let krow = kbase + ci * cout;
                            for co in 0..cout {
                                out[obase + co] += xv * kd[krow + co];
                            }
                        }
                    }
                }
            }
        }
    }

    let (xid, kid, bid) = (x.id, p.kernel.id, p.bias.id);
    let bw = Box::new(move |g: &[f64], nodes: &[crate::tensor::Node], grads: &mut [Option<Vec<f64>>]| {
        let xd = &nodes[xid].data;
        let kd = &nodes[kid].data;
        let mut dx = vec![0.0; xd.len()];
        let mut dk = vec![0.0; kd.len()];
        let mut db = vec![0.0; cout];
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let obase = ((b * oh + oy) * ow + ox) * cout;
                    for co in 0..cout {
                        db[co] += g[obase + co];
                    }
                    for i in 0..kh {
                        let iy = (oy * stride + i) as isize - pad_top as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for j in 0..kw {
                            let ix = (ox * stride + j) as isize - pad_left as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let xbase = ((b * h + iy as usize) * w + ix as usize) * cin;
                            let kbase = (i * kw + j) * cin * cout;
                            for ci in 0..cin {
                                let krow = kbase + ci * cout;
                                let xv = xd[xbase + ci];
                                let mut dxv = 0.0;
                                for co in 0..cout {
                                    let gv = g[obase + co];
                                    dxv += gv * kd[krow + co];
                                    dk[krow + co] += gv * xv;
                                }
                                dx[xbase + ci] += dxv;
                            }
                        }
                    }
                }
            }
        }
        add_into(grads, xid, &dx);
        add_into(grads, kid, &dk);
        add_into(grads, bid, &db);
    });
    Ok(tape.push(out, vec![n, oh, ow, cout], Some(bw)))
}

/// Depthwise convolution, multiplier 1, stride 1, same padding. Each
/// channel is filtered independently by its own kh x kw slice.
pub fn depthwise_conv2d(tape: &mut Tape, x: Tensor, kernel: Tensor, bias: Tensor) -> Result<Tensor> {
    tape.check(x)?;
    tape.check(kernel)?;
    tape.check(bias)?;
    let (n, h, w, c) = dims4("depthwise_conv2d", tape.shape(x))?;
    let ks = tape.shape(kernel).to_vec();
    if ks.len() != 3 || ks[2] != c {
        return Err(Error::ShapeMismatch {
            op: "depthwise_conv2d",
            lhs: tape.shape(x).to_vec(),
            rhs: ks,
        });
    }
    let (kh, kw) = (ks[0], ks[1]);
    if tape.shape(bias) != [c] {
        return Err(Error::BadShape {
            op: "depthwise_conv2d",
            expected: format!("bias of length {}", c),
            shape: tape.shape(bias).to_vec(),
        });
    }
    let (_, pad_top) = conv_geometry(h, kh, 1, Padding::Same)?;
    let (_, pad_left) = conv_geometry(w, kw, 1, Padding::Same)?;

    let xd = tape.data(x);
    let kd = tape.data(kernel);
    let bd = tape.data(bias);
    let mut out = vec![0.0; n * h * w * c];
    for b in 0..n {
        for oy in 0..h {
            for ox in 0..w {
                let obase = ((b * h + oy) * w + ox) * c;
                out[obase..obase + c].copy_from_slice(bd);
                for i in 0..kh {
                    let iy = (oy + i) as isize - pad_top as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for j in 0..kw {
                        let ix = (ox + j) as isize - pad_left as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let xbase = ((b * h + iy as usize) * w + ix as usize) * c;
                        let kbase = (i * kw + j) * c;
                        for ch in 0..c {
                            out[obase + ch] += xd[xbase + ch] * kd[kbase + ch];
                        }
                    }
                }
            }
        }
    }

    let (xid, kid, bid) = (x.id, kernel.id, bias.id);
    let bw = Box::new(move |g: &[f64], nodes: &[crate::tensor::Node], grads: &mut [Option<Vec<f64>>]| {
        let xd = &nodes[xid].data;
        let kd = &nodes[kid].data;
        let mut dx = vec![0.0; xd.len()];
        let mut dk = vec![0.0; kd.len()];
        let mut db = vec![0.0; c];
        for b in 0..n {
            for oy in 0..h {
                for ox in 0..w {
                    let obase = ((b * h + oy) * w + ox) * c;
                    for ch in 0..c {
                        db[ch] += g[obase + ch];
                    }
                    for i in 0..kh {
                        let iy = (oy + i) as isize - pad_top as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for j in 0..kw {
                            let ix = (ox + j) as isize - pad_left as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let xbase = ((b * h + iy as usize) * w + ix as usize) * c;
                            let kbase = (i * kw + j) * c;
                            for ch in 0..c {
                                let gv = g[obase + ch];
                                dx[xbase + ch] += gv * kd[kbase + ch];
                                dk[kbase + ch] += gv * xd[xbase + ch];
                            }
                        }
                    }
                }
            }
        }
        add_into(grads, xid, &dx);
        add_into(grads, kid, &dk);
        add_into(grads, bid, &db);
    });
    Ok(tape.push(out, vec![n, h, w, c], Some(bw)))
}

/// Depthwise then pointwise stage; stride 1, same padding.
pub fn separable_conv2d(tape: &mut Tape, x: Tensor, p: &SeparableConv2dParams) -> Result<Tensor> {
    let dw = depthwise_conv2d(tape, x, p.depthwise, p.dw_bias)?;
    let pw = Conv2dParams {
        kernel: p.pointwise,
        bias: p.pw_bias,
        stride: 1,
        padding: Padding::Same,
    };
    conv2d(tape, dw, &pw)
}

/// Spatial mean or max per channel: N x H x W x C -> N x C.
/// Max ties resolve to the first element in row-major scan order.
pub fn global_pool(tape: &mut Tape, x: Tensor, mode: PoolMode) -> Result<Tensor> {
    tape.check(x)?;
    let (n, h, w, c) = dims4("global_pool", tape.shape(x))?;
    let hw = h * w;
    let xd = tape.data(x);
    let mut out = vec![0.0; n * c];
    let mut argmax = vec![0usize; n * c];
    for b in 0..n {
        for ch in 0..c {
            match mode {
                PoolMode::Avg => {
                    let mut s = 0.0;
                    for pix in 0..hw {
                        s += xd[(b * hw + pix) * c + ch];
                    }
                    out[b * c + ch] = s / hw as f64;
                }
                PoolMode::Max => {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = 0;
                    for pix in 0..hw {
                        let v = xd[(b * hw + pix) * c + ch];
                        if v > best {
                            best = v;
                            best_at = pix;
                        }
                    }
                    out[b * c + ch] = best;
                    argmax[b * c + ch] = best_at;
                }
            }
        }
    }
    let xid = x.id;
    let xlen = xd.len();
    let bw = Box::new(move |g: &[f64], _nodes: &[crate::tensor::Node], grads: &mut [Option<Vec<f64>>]| {
        let mut dx = vec![0.0; xlen];
        for b in 0..n {
            for ch in 0..c {
                let gv = g[b * c + ch];
                match mode {
                    PoolMode::Avg => {
                        let share = gv / hw as f64;
                        for pix in 0..hw {
                            dx[(b * hw + pix) * c + ch] += share;
                        }
                    }
                    PoolMode::Max => {
                        dx[(b * hw + argmax[b * c + ch]) * c + ch] += gv;
                    }
                }
            }
        }
        add_into(grads, xid, &dx);
    });
    Ok(tape.push(out, vec![n, c], Some(bw)))
}

/// Mean or max across channels: N x H x W x C -> N x H x W x 1.
/// Max ties resolve to the lowest channel index.
pub fn channelwise_pool(tape: &mut Tape, x: Tensor, mode: PoolMode) -> Result<Tensor> {
    tape.check(x)?;
    let (n, h, w, c) = dims4("channelwise_pool", tape.shape(x))?;
    let pixels = n * h * w;
    let xd = tape.data(x);
    let mut out = vec![0.0; pixels];
    let mut argmax = vec![0usize; pixels];
    for pix in 0..pixels {
        let base = pix * c;
        match mode {
            PoolMode::Avg => {
                out[pix] = xd[base..base + c].iter().sum::<f64>() / c as f64;
            }
            PoolMode::Max => {
                let mut best = f64::NEG_INFINITY;
                let mut best_at = 0;
                for ch in 0..c {
                    let v = xd[base + ch];
                    if v > best {
                        best = v;
                        best_at = ch;
                    }
                }
                out[pix] = best;
                argmax[pix] = best_at;
            }
        }
    }
    let xid = x.id;
    let xlen = xd.len();
    let bw = Box::new(move |g: &[f64], _nodes: &[crate::tensor::Node], grads: &mut [Option<Vec<f64>>]| {
        let mut dx = vec![0.0; xlen];
        for pix in 0..pixels {
            match mode {
                PoolMode::Avg => {
                    let share = g[pix] / c as f64;
                    for ch in 0..c {
                        dx[pix * c + ch] += share;
                    }
                }
                PoolMode::Max => {
                    dx[pix * c + argmax[pix]] += g[pix];
                }
            }
        }
        add_into(grads, xid, &dx);
    });
    Ok(tape.push(out, vec![n, h, w, 1], Some(bw)))
}

pub fn dense(tape: &mut Tape, x: Tensor, p: &DenseParams, act: Activation) -> Result<Tensor> {
    let xs = tape.shape(x);
    if xs.len() != 2 || xs[1] != tape.shape(p.weight)[0] {
        return Err(Error::ShapeMismatch {
            op: "dense",
            lhs: xs.to_vec(),
            rhs: tape.shape(p.weight).to_vec(),
        });
    }
    let z = tape.matmul(x, p.weight)?;
    let z = tape.add(z, p.bias)?;
    match act {
        Activation::Relu => relu(tape, z),
        Activation::Sigmoid => sigmoid(tape, z),
        Activation::None => Ok(z),
    }
}

pub fn relu(tape: &mut Tape, x: Tensor) -> Result<Tensor> {
    tape.check(x)?;
    let out: Vec<f64> = tape.data(x).iter().map(|&v| v.max(0.0)).collect();
    let shape = tape.shape(x).to_vec();
    let xid = x.id;
    let bw = Box::new(move |g: &[f64], nodes: &[crate::tensor::Node], grads: &mut [Option<Vec<f64>>]| {
        let xd = &nodes[xid].data;
        let mut dx = vec![0.0; xd.len()];
        for i in 0..g.len() {
            if xd[i] > 0.0 {
                dx[i] = g[i];
            }
        }
        add_into(grads, xid, &dx);
    });
    Ok(tape.push(out, shape, Some(bw)))
}

fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(tape: &mut Tape, x: Tensor) -> Result<Tensor> {
    tape.check(x)?;
    let out: Vec<f64> = tape.data(x).iter().map(|&v| sigmoid_scalar(v)).collect();
    let shape = tape.shape(x).to_vec();
    let xid = x.id;
    let yid = tape.len();
    let bw = Box::new(move |g: &[f64], nodes: &[crate::tensor::Node], grads: &mut [Option<Vec<f64>>]| {
        let y = &nodes[yid].data;
        let mut dx = vec![0.0; y.len()];
        for i in 0..g.len() {
            dx[i] = g[i] * y[i] * (1.0 - y[i]);
        }
        add_into(grads, xid, &dx);
    });
    Ok(tape.push(out, shape, Some(bw)))
}

/// Row softmax over the last axis of an N x K tensor, max-subtracted.
pub fn softmax(tape: &mut Tape, x: Tensor) -> Result<Tensor> {
    tape.check(x)?;
    let xs = tape.shape(x).to_vec();
    if xs.len() != 2 {
        return Err(Error::BadShape {
            op: "softmax",
            expected: "rank-2 N x K tensor".into(),
            shape: xs,
        });
    }
    let (n, k) = (xs[0], xs[1]);
    let xd = tape.data(x);
    if xd.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let mut out = vec![0.0; n * k];
    for row in 0..n {
        let base = row * k;
        let m = xd[base..base + k].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for i in 0..k {
            let e = (xd[base + i] - m).exp();
            out[base + i] = e;
            s += e;
        }
        for i in 0..k {
            out[base + i] /= s;
        }
    }
    let xid = x.id;
    let yid = tape.len();
    let bw = Box::new(move |g: &[f64], nodes: &[crate::tensor::Node], grads: &mut [Option<Vec<f64>>]| {
        let y = &nodes[yid].data;
        let mut dx = vec![0.0; y.len()];
        for row in 0..n {
            let base = row * k;
            let dot: f64 = (0..k).map(|i| g[base + i] * y[base + i]).sum();
            for i in 0..k {
                dx[base + i] = y[base + i] * (g[base + i] - dot);
            }
        }
        add_into(grads, xid, &dx);
    });
    Ok(tape.push(out, vec![n, k], Some(bw)))
}

/// Stack b's channels after a's: a occupies [0, Ca), b occupies [Ca, Ca+Cb).
pub fn concat_channels(tape: &mut Tape, a: Tensor, b: Tensor) -> Result<Tensor> {
    tape.check(a)?;
    tape.check(b)?;
    let (n, h, w, ca) = dims4("concat_channels", tape.shape(a))?;
    let (nb, hb, wb, cb) = dims4("concat_channels", tape.shape(b))?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::ShapeMismatch {
            op: "concat_channels",
            lhs: tape.shape(a).to_vec(),
            rhs: tape.shape(b).to_vec(),
        });
    }
    let pixels = n * h * w;
    let c = ca + cb;
    let ad = tape.data(a);
    let bd = tape.data(b);
    let mut out = vec![0.0; pixels * c];
    for pix in 0..pixels {
        out[pix * c..pix * c + ca].copy_from_slice(&ad[pix * ca..(pix + 1) * ca]);
        out[pix * c + ca..(pix + 1) * c].copy_from_slice(&bd[pix * cb..(pix + 1) * cb]);
    }
    let (aid, bid) = (a.id, b.id);
    let bw = Box::new(move |g: &[f64], _nodes: &[crate::tensor::Node], grads: &mut [Option<Vec<f64>>]| {
        let mut da = vec![0.0; pixels * ca];
        let mut db = vec![0.0; pixels * cb];
        for pix in 0..pixels {
            da[pix * ca..(pix + 1) * ca].copy_from_slice(&g[pix * c..pix * c + ca]);
            db[pix * cb..(pix + 1) * cb].copy_from_slice(&g[pix * c + ca..(pix + 1) * c]);
        }
        add_into(grads, aid, &da);
        add_into(grads, bid, &db);
    });
    Ok(tape.push(out, vec![n, h, w, c], Some(bw)))
}

/// Select channels by index (duplicates allowed): N x H x W x C -> N x H x W x len(idx).
/// Unselected channels receive zero gradient.
pub fn gather_channels(tape: &mut Tape, x: Tensor, idx: &[usize]) -> Result<Tensor> {
    tape.check(x)?;
    let (n, h, w, c) = dims4("gather_channels", tape.shape(x))?;
    if idx.is_empty() {
        return Err(Error::Invalid("gather_channels: empty index list".into()));
    }
    if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
        return Err(Error::Invalid(format!(
            "gather_channels: index {bad} out of range for {c} channels"
        )));
    }
    let m = idx.len();
    let pixels = n * h * w;
    let xd = tape.data(x);
    let mut out = vec![0.0; pixels * m];
    for pix in 0..pixels {
        for (t, &ch) in idx.iter().enumerate() {
            out[pix * m + t] = xd[pix * c + ch];
        }
    }
    let xid = x.id;
    let idx_owned: Vec<usize> = idx.to_vec();
    let xlen = xd.len();
    let bw = Box::new(move |g: &[f64], _nodes: &[crate::tensor::Node], grads: &mut [Option<Vec<f64>>]| {
        let mut dx = vec![0.0; xlen];
        for pix in 0..pixels {
            for (t, &ch) in idx_owned.iter().enumerate() {
                dx[pix * c + ch] += g[pix * m + t];
            }
        }
        add_into(grads, xid, &dx);
    });
    Ok(tape.push(out, vec![n, h, w, m], Some(bw)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_difference_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    // Plain 6-loop convolution, written independently of the kernel above.
    #[allow(clippy::too_many_arguments)]
    fn conv_oracle(
        x: &[f64],
        k: &[f64],
        b: &[f64],
        n: usize,
        h: usize,
        w: usize,
        cin: usize,
        kh: usize,
        kw: usize,
        cout: usize,
        stride: usize,
        same: bool,
    ) -> (Vec<f64>, usize, usize) {
        let (oh, ow, pt, pl) = if same {
            let oh = h.div_ceil(stride);
            let ow = w.div_ceil(stride);
            let pth = ((oh - 1) * stride + kh).saturating_sub(h);
            let ptw = ((ow - 1) * stride + kw).saturating_sub(w);
            (oh, ow, pth / 2, ptw / 2)
        } else {
            ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
        };
        let mut out = vec![0.0; n * oh * ow * cout];
        for bi in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for co in 0..cout {
                        let mut acc = b[co];
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (oy * stride + i) as isize - pt as isize;
                                let ix = (ox * stride + j) as isize - pl as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                for ci in 0..cin {
                                    acc += x[((bi * h + iy as usize) * w + ix as usize) * cin + ci]
                                        * k[((i * kw + j) * cin + ci) * cout + co];
                                }
                            }
                        }
                        out[((bi * oh + oy) * ow + ox) * cout + co] = acc;
                    }
                }
            }
        }
        (out, oh, ow)
    }

    #[test]
    fn conv_identity_1x1() {
        let mut t = Tape::new();
        let x = t.leaf((0..18).map(|i| i as f64 * 0.1).collect(), &[1, 3, 3, 2]).unwrap();
        let eye = t.leaf(vec![1.0, 0.0, 0.0, 1.0], &[1, 1, 2, 2]).unwrap();
        let bias = t.fill(0.0, &[2]).unwrap();
        let p = Conv2dParams::new(&t, eye, bias, 1, Padding::Same).unwrap();
        let y = conv2d(&mut t, x, &p).unwrap();
        assert_eq!(t.data(y), t.data(x));
    }

    #[test]
    fn conv_ones_3x3_tap_counts() {
        let mut t = Tape::new();
        let x = t.fill(1.0, &[1, 3, 3, 1]).unwrap();
        let k = t.fill(1.0, &[3, 3, 1, 1]).unwrap();
        let b = t.fill(0.0, &[1]).unwrap();
        let p = Conv2dParams::new(&t, k, b, 1, Padding::Same).unwrap();
        let y = conv2d(&mut t, x, &p).unwrap();
        assert_eq!(t.shape(y), &[1, 3, 3, 1]);
        assert_eq!(
            t.data(y),
            &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]
        );
    }

    #[test]
    fn conv_matches_loop_oracle_and_fd() {
        let mut r = rng(3);
        let x = rand_vec(&mut r, 50);
        let k = rand_vec(&mut r, 54);
        let b = rand_vec(&mut r, 3);
        let (expected, oh, ow) = conv_oracle(&x, &k, &b, 1, 5, 5, 2, 3, 3, 3, 1, true);
        assert_eq!((oh, ow), (5, 5));

        let mut t = Tape::new();
        let xt = t.leaf(x.clone(), &[1, 5, 5, 2]).unwrap();
        let kt = t.leaf(k.clone(), &[3, 3, 2, 3]).unwrap();
        let bt = t.leaf(b.clone(), &[3]).unwrap();
        let p = Conv2dParams::new(&t, kt, bt, 1, Padding::Same).unwrap();
        let y = conv2d(&mut t, xt, &p).unwrap();
        for (got, want) in t.data(y).iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12);
        }

        // FD over the input
        let (k2, b2) = (k.clone(), b.clone());
        let err = finite_difference_check(
            move |t, xt| {
                let kt = t.leaf(k2.clone(), &[3, 3, 2, 3])?;
                let bt = t.leaf(b2.clone(), &[3])?;
                let p = Conv2dParams::new(t, kt, bt, 1, Padding::Same)?;
                let y = conv2d(t, xt, &p)?;
                let sq = t.mul(y, y)?;
                t.sum(sq)
            },
            &x,
            &[1, 5, 5, 2],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "dx err {err}");

        // FD over the kernel
        let x2 = x.clone();
        let b3 = b.clone();
        let err = finite_difference_check(
            move |t, kt| {
                let xt = t.leaf(x2.clone(), &[1, 5, 5, 2])?;
                let bt = t.leaf(b3.clone(), &[3])?;
                let p = Conv2dParams::new(t, kt, bt, 1, Padding::Same)?;
                let y = conv2d(t, xt, &p)?;
                let sq = t.mul(y, y)?;
                t.sum(sq)
            },
            &k,
            &[3, 3, 2, 3],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "dk err {err}");

        // FD over the bias
        let err = finite_difference_check(
            move |t, bt| {
                let xt = t.leaf(x.clone(), &[1, 5, 5, 2])?;
                let kt = t.leaf(k.clone(), &[3, 3, 2, 3])?;
                let p = Conv2dParams::new(t, kt, bt, 1, Padding::Same)?;
                let y = conv2d(t, xt, &p)?;
                let sq = t.mul(y, y)?;
                t.sum(sq)
            },
            &b,
            &[3],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "db err {err}");
    }

    #[test]
    fn conv_same_preserves_extents_for_odd_kernels() {
        let mut r = rng(4);
        for k in [1usize, 3, 5, 7] {
            let mut t = Tape::new();
            let x = t.leaf(rand_vec(&mut r, 81), &[1, 9, 9, 1]).unwrap();
            let kt = t.leaf(rand_vec(&mut r, k * k), &[k, k, 1, 1]).unwrap();
            let bt = t.fill(0.0, &[1]).unwrap();
            let p = Conv2dParams::new(&t, kt, bt, 1, Padding::Same).unwrap();
            let y = conv2d(&mut t, x, &p).unwrap();
            assert_eq!(t.shape(y), &[1, 9, 9, 1]);
        }
    }

    #[test]
    fn conv_strided_and_valid_geometry() {
        let mut t = Tape::new();
        let x = t.fill(0.5, &[1, 5, 5, 1]).unwrap();
        let k = t.fill(1.0, &[3, 3, 1, 1]).unwrap();
        let b = t.fill(0.0, &[1]).unwrap();
        let same2 = Conv2dParams::new(&t, k, b, 2, Padding::Same).unwrap();
        let y = conv2d(&mut t, x, &same2).unwrap();
        assert_eq!(t.shape(y), &[1, 3, 3, 1]);
        let valid1 = Conv2dParams::new(&t, k, b, 1, Padding::Valid).unwrap();
        let y = conv2d(&mut t, x, &valid1).unwrap();
        assert_eq!(t.shape(y), &[1, 3, 3, 1]);
        // stride-2 strided oracle spot check against the loop oracle
        let mut r = rng(5);
        let xv = rand_vec(&mut r, 36);
        let kv = rand_vec(&mut r, 9);
        let (expected, oh, ow) = conv_oracle(&xv, &kv, &[0.25], 1, 6, 6, 1, 3, 3, 1, 2, true);
        assert_eq!((oh, ow), (3, 3));
        let xt = t.leaf(xv, &[1, 6, 6, 1]).unwrap();
        let kt = t.leaf(kv, &[3, 3, 1, 1]).unwrap();
        let bt = t.leaf(vec![0.25], &[1]).unwrap();
        let p = Conv2dParams::new(&t, kt, bt, 2, Padding::Same).unwrap();
        let y = conv2d(&mut t, xt, &p).unwrap();
        for (got, want) in t.data(y).iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_channel_mismatch_errors() {
        let mut t = Tape::new();
        let x = t.fill(0.0, &[1, 4, 4, 3]).unwrap();
        let k = t.fill(0.0, &[3, 3, 2, 4]).unwrap();
        let b = t.fill(0.0, &[4]).unwrap();
        let p = Conv2dParams::new(&t, k, b, 1, Padding::Same).unwrap();
        assert!(conv2d(&mut t, x, &p).is_err());
    }

    #[test]
    fn conv_rejects_even_kernel_same_padding() {
        let mut t = Tape::new();
        let k = t.fill(0.0, &[2, 2, 1, 1]).unwrap();
        let b = t.fill(0.0, &[1]).unwrap();
        assert!(Conv2dParams::new(&t, k, b, 1, Padding::Same).is_err());
        assert!(Conv2dParams::new(&t, k, b, 1, Padding::Valid).is_ok());
    }

    #[test]
    fn separable_identity() {
        let mut t = Tape::new();
        let x = t.leaf((0..32).map(|i| i as f64 * 0.1 - 1.0).collect(), &[1, 4, 4, 2]).unwrap();
        // depthwise 1x1 of ones = per-channel pass-through
        let dw = t.fill(1.0, &[1, 1, 2]).unwrap();
        let dwb = t.fill(0.0, &[2]).unwrap();
        let pw = t.leaf(vec![1.0, 0.0, 0.0, 1.0], &[1, 1, 2, 2]).unwrap();
        let pwb = t.fill(0.0, &[2]).unwrap();
        let p = SeparableConv2dParams::new(&t, dw, dwb, pw, pwb).unwrap();
        let y = separable_conv2d(&mut t, x, &p).unwrap();
        assert_eq!(t.data(y), t.data(x));
    }

    #[test]
    fn separable_k1_is_channel_scale() {
        let mut r = rng(6);
        let xv = rand_vec(&mut r, 27);
        let scale = [0.5, -1.5, 2.0];
        let mut t = Tape::new();
        let x = t.leaf(xv.clone(), &[1, 3, 3, 3]).unwrap();
        let dw = t.leaf(scale.to_vec(), &[1, 1, 3]).unwrap();
        let dwb = t.fill(0.0, &[3]).unwrap();
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let pw = t.leaf(eye, &[1, 1, 3, 3]).unwrap();
        let pwb = t.fill(0.0, &[3]).unwrap();
        let p = SeparableConv2dParams::new(&t, dw, dwb, pw, pwb).unwrap();
        let y = separable_conv2d(&mut t, x, &p).unwrap();
        // same thing as broadcast multiply by per-channel weights
        let st = t.leaf(scale.to_vec(), &[1, 1, 1, 3]).unwrap();
        let want = t.mul(x, st).unwrap();
        for (got, w) in t.data(y).iter().zip(t.data(want)) {
            assert!((got - w).abs() < 1e-12);
        }
    }

    #[test]
    fn separable_equals_composed_kernel() {
        // Compose depthwise D and pointwise P into one dense kernel:
        // K[i,j,ci,co] = D[i,j,ci] * P[ci,co]; bias folds through P.
        let mut r = rng(7);
        let (h, w, cin, cout, k) = (5, 4, 3, 2, 3);
        let xv = rand_vec(&mut r, h * w * cin);
        let dv = rand_vec(&mut r, k * k * cin);
        let dbv = rand_vec(&mut r, cin);
        let pv = rand_vec(&mut r, cin * cout);
        let pbv = rand_vec(&mut r, cout);

        let mut t = Tape::new();
        let x = t.leaf(xv.clone(), &[1, h, w, cin]).unwrap();
        let dw = t.leaf(dv.clone(), &[k, k, cin]).unwrap();
        let dwb = t.leaf(dbv.clone(), &[cin]).unwrap();
        let pw = t.leaf(pv.clone(), &[1, 1, cin, cout]).unwrap();
        let pwb = t.leaf(pbv.clone(), &[cout]).unwrap();
        let p = SeparableConv2dParams::new(&t, dw, dwb, pw, pwb).unwrap();
        let got = separable_conv2d(&mut t, x, &p).unwrap();

        let mut composed = vec![0.0; k * k * cin * cout];
        for i in 0..k {
            for j in 0..k {
                for ci in 0..cin {
                    for co in 0..cout {
                        composed[((i * k + j) * cin + ci) * cout + co] =
                            dv[(i * k + j) * cin + ci] * pv[ci * cout + co];
                    }
                }
            }
        }
        let mut bias = pbv.clone();
        for co in 0..cout {
            for ci in 0..cin {
                bias[co] += dbv[ci] * pv[ci * cout + co];
            }
        }
        let ckt = t.leaf(composed, &[k, k, cin, cout]).unwrap();
        let cbt = t.leaf(bias, &[cout]).unwrap();
        let cp = Conv2dParams::new(&t, ckt, cbt, 1, Padding::Same).unwrap();
        let want = conv2d(&mut t, x, &cp).unwrap();
        for (g, w) in t.data(got).iter().zip(t.data(want)) {
            assert!((g - w).abs() < 1e-10, "{g} vs {w}");
        }
    }

    #[test]
    fn separable_fd_all_params() {
        let mut r = rng(8);
        let xv = rand_vec(&mut r, 2 * 4 * 4 * 2);
        let dv = rand_vec(&mut r, 9 * 2);
        let dbv = rand_vec(&mut r, 2);
        let pv = rand_vec(&mut r, 2 * 3);
        let pbv = rand_vec(&mut r, 3);

        // `which` picks the tensor under variation; others are constants.
        let check = |which: usize, x0: &[f64], shape: &[usize]| {
            let (xv, dv, dbv, pv, pbv) =
                (xv.clone(), dv.clone(), dbv.clone(), pv.clone(), pbv.clone());
            finite_difference_check(
                move |t, var| {
                    let mk = |t: &mut Tape, slot: usize, vals: &[f64], s: &[usize]| {
                        if slot == which {
                            Ok(var)
                        } else {
                            t.leaf(vals.to_vec(), s)
                        }
                    };
                    let x = mk(t, 0, &xv, &[2, 4, 4, 2])?;
                    let dw = mk(t, 1, &dv, &[3, 3, 2])?;
                    let dwb = mk(t, 2, &dbv, &[2])?;
                    let pw = mk(t, 3, &pv, &[1, 1, 2, 3])?;
                    let pwb = mk(t, 4, &pbv, &[3])?;
                    let p = SeparableConv2dParams::new(t, dw, dwb, pw, pwb)?;
                    let y = separable_conv2d(t, x, &p)?;
                    let sq = t.mul(y, y)?;
                    t.sum(sq)
                },
                x0,
                shape,
                1e-5,
            )
            .unwrap()
        };
        assert!(check(1, &dv, &[3, 3, 2]) <= 1e-6, "depthwise");
        assert!(check(2, &dbv, &[2]) <= 1e-6, "depthwise bias");
        assert!(check(3, &pv, &[1, 1, 2, 3]) <= 1e-6, "pointwise");
        assert!(check(4, &pbv, &[3]) <= 1e-6, "pointwise bias");
    }

    #[test]
    fn global_pool_basics() {
        let mut t = Tape::new();
        let ones = t.fill(1.0, &[1, 3, 4, 5]).unwrap();
        let avg = global_pool(&mut t, ones, PoolMode::Avg).unwrap();
        assert_eq!(t.data(avg), &[1.0; 5][..]);

        let x = t.leaf(vec![1.0, 2.0, 3.0, 4.0], &[1, 2, 2, 1]).unwrap();
        let a = global_pool(&mut t, x, PoolMode::Avg).unwrap();
        let m = global_pool(&mut t, x, PoolMode::Max).unwrap();
        assert_eq!(t.data(a), &[2.5]);
        assert_eq!(t.data(m), &[4.0]);
    }

    #[test]
    fn global_pool_gradients() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0, 3.0, 4.0], &[1, 2, 2, 1]).unwrap();
        let a = global_pool(&mut t, x, PoolMode::Avg).unwrap();
        let s = t.sum(a).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.25; 4][..]);

        let m = global_pool(&mut t, x, PoolMode::Max).unwrap();
        let s = t.sum(m).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0, 0.0, 0.0, 1.0][..]);
    }

    #[test]
    fn global_max_tie_routes_to_first() {
        let mut t = Tape::new();
        let x = t.leaf(vec![7.0, 3.0, 7.0, 1.0], &[1, 2, 2, 1]).unwrap();
        let m = global_pool(&mut t, x, PoolMode::Max).unwrap();
        let s = t.sum(m).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0][..]);
    }

    #[test]
    fn global_avg_fd() {
        let mut r = rng(9);
        let xv = rand_vec(&mut r, 2 * 3 * 3 * 2);
        let err = finite_difference_check(
            |t, x| {
                let p = global_pool(t, x, PoolMode::Avg)?;
                let sq = t.mul(p, p)?;
                t.sum(sq)
            },
            &xv,
            &[2, 3, 3, 2],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6);
    }

    #[test]
    fn channelwise_pool_basics() {
        let mut t = Tape::new();
        // C=1: both modes are the identity
        let x1 = t.leaf(vec![0.1, 0.9, -0.4, 0.0], &[1, 2, 2, 1]).unwrap();
        let a = channelwise_pool(&mut t, x1, PoolMode::Avg).unwrap();
        let m = channelwise_pool(&mut t, x1, PoolMode::Max).unwrap();
        assert_eq!(t.data(a), t.data(x1));
        assert_eq!(t.data(m), t.data(x1));

        let x = t.leaf(vec![2.0, 4.0, 6.0], &[1, 1, 1, 3]).unwrap();
        let a = channelwise_pool(&mut t, x, PoolMode::Avg).unwrap();
        let m = channelwise_pool(&mut t, x, PoolMode::Max).unwrap();
        assert_eq!(t.data(a), &[4.0]);
        assert_eq!(t.data(m), &[6.0]);
    }

    #[test]
    fn channelwise_pool_matches_loop_and_fd() {
        let mut r = rng(10);
        let xv = rand_vec(&mut r, 45);
        let mut t = Tape::new();
        let x = t.leaf(xv.clone(), &[1, 3, 3, 5]).unwrap();
        let a = channelwise_pool(&mut t, x, PoolMode::Avg).unwrap();
        let m = channelwise_pool(&mut t, x, PoolMode::Max).unwrap();
        for pix in 0..9 {
            let ch = &xv[pix * 5..(pix + 1) * 5];
            let mean = ch.iter().sum::<f64>() / 5.0;
            let max = ch.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!((t.data(a)[pix] - mean).abs() < 1e-12);
            assert_eq!(t.data(m)[pix], max);
        }
        let err = finite_difference_check(
            |t, x| {
                let p = channelwise_pool(t, x, PoolMode::Avg)?;
                let sq = t.mul(p, p)?;
                t.sum(sq)
            },
            &xv,
            &[1, 3, 3, 5],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6);
    }

    #[test]
    fn dense_basics() {
        let mut t = Tape::new();
        let x = t.leaf(vec![0.3, -0.7], &[1, 2]).unwrap();
        let w0 = t.fill(0.0, &[2, 3]).unwrap();
        let b0 = t.fill(0.0, &[3]).unwrap();
        let p = DenseParams::new(&t, w0, b0).unwrap();
        let y = dense(&mut t, x, &p, Activation::Sigmoid).unwrap();
        assert_eq!(t.data(y), &[0.5, 0.5, 0.5]);

        let xr = t.leaf(vec![-1.0, 2.0], &[1, 2]).unwrap();
        let eye = t.leaf(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let bz = t.fill(0.0, &[2]).unwrap();
        let p = DenseParams::new(&t, eye, bz).unwrap();
        let y = dense(&mut t, xr, &p, Activation::Relu).unwrap();
        assert_eq!(t.data(y), &[0.0, 2.0]);
    }

    #[test]
    fn dense_fd() {
        let mut r = rng(11);
        let xv = rand_vec(&mut r, 8);
        let wv = rand_vec(&mut r, 12);
        let bv = rand_vec(&mut r, 3);
        let (wv2, bv2) = (wv.clone(), bv.clone());
        let err = finite_difference_check(
            move |t, x| {
                let w = t.leaf(wv2.clone(), &[4, 3])?;
                let b = t.leaf(bv2.clone(), &[3])?;
                let p = DenseParams::new(t, w, b)?;
                let y = dense(t, x, &p, Activation::Sigmoid)?;
                let sq = t.mul(y, y)?;
                t.sum(sq)
            },
            &xv,
            &[2, 4],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "dx err {err}");
        let xv2 = xv.clone();
        let err = finite_difference_check(
            move |t, w| {
                let x = t.leaf(xv2.clone(), &[2, 4])?;
                let b = t.leaf(bv.clone(), &[3])?;
                let p = DenseParams::new(t, w, b)?;
                let y = dense(t, x, &p, Activation::Sigmoid)?;
                let sq = t.mul(y, y)?;
                t.sum(sq)
            },
            &wv,
            &[4, 3],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "dw err {err}");
    }

    #[test]
    fn concat_channel_layout() {
        let mut t = Tape::new();
        let a = t.leaf(vec![1.0, 2.0, 10.0, 20.0], &[1, 1, 2, 2]).unwrap();
        let b = t.leaf(vec![3.0, 4.0, 5.0, 30.0, 40.0, 50.0], &[1, 1, 2, 3]).unwrap();
        let y = concat_channels(&mut t, a, b).unwrap();
        assert_eq!(t.shape(y), &[1, 1, 2, 5]);
        assert_eq!(
            t.data(y),
            &[1.0, 2.0, 3.0, 4.0, 5.0, 10.0, 20.0, 30.0, 40.0, 50.0]
        );
    }

    #[test]
    fn concat_self_doubles_channels() {
        let mut t = Tape::new();
        let x = t.leaf(vec![0.5, -1.5, 2.5, 0.0], &[1, 2, 1, 2]).unwrap();
        let y = concat_channels(&mut t, x, x).unwrap();
        assert_eq!(t.shape(y), &[1, 2, 1, 4]);
        let d = t.data(y);
        assert_eq!(&d[0..2], &d[2..4]);
        assert_eq!(&d[4..6], &d[6..8]);
        // gradient doubles through both halves
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0; 4][..]);
    }

    #[test]
    fn concat_fd_split() {
        let mut r = rng(12);
        let av = rand_vec(&mut r, 8);
        let bv = rand_vec(&mut r, 12);
        let bv2 = bv.clone();
        let err = finite_difference_check(
            move |t, a| {
                let b = t.leaf(bv2.clone(), &[1, 2, 2, 3])?;
                let y = concat_channels(t, a, b)?;
                let sq = t.mul(y, y)?;
                t.sum(sq)
            },
            &av,
            &[1, 2, 2, 2],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6);
        let err = finite_difference_check(
            move |t, b| {
                let a = t.leaf(av.clone(), &[1, 2, 2, 2])?;
                let y = concat_channels(t, a, b)?;
                let sq = t.mul(y, y)?;
                t.sum(sq)
            },
            &bv,
            &[1, 2, 2, 3],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6);
    }

    #[test]
    fn activation_values() {
        let mut t = Tape::new();
        let x = t.leaf(vec![0.0, -3.0], &[2]).unwrap();
        let s = sigmoid(&mut t, x).unwrap();
        assert_eq!(t.data(s)[0], 0.5);
        let r = relu(&mut t, x).unwrap();
        assert_eq!(t.data(r), &[0.0, 0.0]);
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut t = Tape::new();
        let x = t.leaf(vec![0.0, 0.0, 0.0], &[1, 3]).unwrap();
        let y = softmax(&mut t, x).unwrap();
        for v in t.data(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = t.leaf(vec![1000.0, 0.0], &[1, 2]).unwrap();
        let y = softmax(&mut t, big).unwrap();
        let d = t.data(y);
        assert!(d.iter().all(|v| v.is_finite()));
        assert!((d[0] - 1.0).abs() < 1e-12 && d[1] < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_in_open_interval() {
        let mut r = rng(13);
        let xv = rand_vec(&mut r, 4 * 5);
        let mut t = Tape::new();
        let x = t.leaf(xv, &[4, 5]).unwrap();
        let y = softmax(&mut t, x).unwrap();
        let d = t.data(y);
        for row in 0..4 {
            let s: f64 = d[row * 5..(row + 1) * 5].iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
        assert!(d.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn softmax_and_sigmoid_fd() {
        let mut r = rng(14);
        let xv = rand_vec(&mut r, 6);
        let err = finite_difference_check(
            |t, x| {
                let y = softmax(t, x)?;
                let w = t.leaf(vec![0.9, -0.3, 0.4, 1.2, -0.8, 0.1], &[2, 3])?;
                let wy = t.mul(y, w)?;
                t.sum(wy)
            },
            &xv,
            &[2, 3],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "softmax err {err}");
        let err = finite_difference_check(
            |t, x| {
                let y = sigmoid(t, x)?;
                let sq = t.mul(y, y)?;
                t.sum(sq)
            },
            &xv,
            &[6],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "sigmoid err {err}");
    }

    #[test]
    fn relu_fd_away_from_kink() {
        // margins keep every probe on one side of zero
        let xv = vec![0.5, -0.7, 1.3, -2.0, 0.9, -0.4];
        let err = finite_difference_check(
            |t, x| {
                let y = relu(t, x)?;
                let sq = t.mul(y, y)?;
                t.sum(sq)
            },
            &xv,
            &[6],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6);
    }

    #[test]
    fn gather_channels_select_and_grad() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[1, 1, 2, 3]).unwrap();
        let y = gather_channels(&mut t, x, &[2, 0]).unwrap();
        assert_eq!(t.shape(y), &[1, 1, 2, 2]);
        assert_eq!(t.data(y), &[3.0, 1.0, 6.0, 4.0]);
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        // channel 1 was dropped: zero gradient there
        assert_eq!(t.grad(x).unwrap(), &[1.0, 0.0, 1.0, 1.0, 0.0, 1.0][..]);

        assert!(gather_channels(&mut t, x, &[3]).is_err());
        assert!(gather_channels(&mut t, x, &[]).is_err());
    }
}
