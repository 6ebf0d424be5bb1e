//! The FCSSAM block: channel attention (CAM), dual spatial attention
//! (SAM over avg- and max-pooled descriptors), and fuzzy channel
//! selection (FCS) driven by a Richards sigmoid gate over learnable
//! per-channel weights.
//!
//! Channel flow: f_enc has C channels, the two SAM branches are
//! concatenated to 2C, and FCS keeps m = max(1, round(k * 2C)) of them
//! in their original order, each scaled by its gate value.

use crate::error::{Error, Result};
use crate::nn::{
    channelwise_pool, concat_channels, conv2d, dense, gather_channels, global_pool, relu,
    separable_conv2d, sigmoid, Activation, Conv2dParams, DenseParams, PoolMode,
    SeparableConv2dParams,
};
use crate::tensor::{Tape, Tensor};

/// Richards gate evaluation form. `Paper` is 1/(1 + e^(A*e^(-Q(a-mu))))
/// whose range for positive A, Q is (0, 0.5); `Standard` drops the outer
/// exponential: 1/(1 + A*e^(-Q(a-mu))). Ranking of channels is identical
/// under both (each is a monotone map of the same core).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateForm {
    Paper,
    Standard,
}

/// How the CAM output rejoins the spatial branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Wiring {
    /// CAM recalibrates f_enc first, then SC + SAM per branch.
    CamFirst,
    /// SC + SAM run on raw f_enc; CAM weights multiply each branch output.
    CamIntoBranches,
}

/// Squeeze-excitation MLP shared (or not) between the GAP and GMP paths.
pub struct CamParams {
    pub d1: DenseParams,
    pub d2: DenseParams,
    /// Separate GMP-path layers; `None` shares d1/d2 with the GAP path.
    pub d1_max: Option<DenseParams>,
    pub d2_max: Option<DenseParams>,
    pub r: usize,
}

impl CamParams {
    pub fn new(
        tape: &Tape,
        d1: DenseParams,
        d2: DenseParams,
        d1_max: Option<DenseParams>,
        d2_max: Option<DenseParams>,
        r: usize,
    ) -> Result<Self> {
        let c = tape.shape(d1.weight)[0];
        let squeezed = tape.shape(d1.weight)[1];
        if r == 0 || c % r != 0 || squeezed != c / r {
            return Err(Error::Invalid(format!(
                "channel attention: C={c} must be divisible by r={r} with squeeze width C/r"
            )));
        }
        if tape.shape(d2.weight) != [squeezed, c] {
            return Err(Error::BadShape {
                op: "channel_attention",
                expected: format!("{} x {} excite weight", squeezed, c),
                shape: tape.shape(d2.weight).to_vec(),
            });
        }
        if d1_max.is_some() != d2_max.is_some() {
            return Err(Error::Invalid(
                "channel attention: unshared path needs both d1_max and d2_max".into(),
            ));
        }
        if let (Some(d1m), Some(d2m)) = (&d1_max, &d2_max) {
            if tape.shape(d1m.weight) != [c, squeezed] || tape.shape(d2m.weight) != [squeezed, c] {
                return Err(Error::Invalid(
                    "channel attention: max-path layer shapes differ from avg path".into(),
                ));
            }
        }
        Ok(CamParams {
            d1,
            d2,
            d1_max,
            d2_max,
            r,
        })
    }

    pub fn channels(&self, tape: &Tape) -> usize {
        tape.shape(self.d1.weight)[0]
    }
}

/// 7x7 single-channel convolution producing the spatial attention map.
pub struct SamParams {
    pub conv: Conv2dParams,
}

impl SamParams {
    pub fn new(tape: &Tape, conv: Conv2dParams) -> Result<Self> {
        let ks = tape.shape(conv.kernel);
        if ks != [7, 7, 1, 1] {
            return Err(Error::BadShape {
                op: "spatial_attention",
                expected: "7 x 7 x 1 x 1 kernel".into(),
                shape: ks.to_vec(),
            });
        }
        Ok(SamParams { conv })
    }
}

/// Fuzzy channel selection: learnable per-channel weights alpha plus the
/// Richards gate parameters, and the retention fraction k.
pub struct FcsParams {
    pub alpha: Tensor,
    pub a: Tensor,
    pub q: Tensor,
    pub mu: Tensor,
    pub k: f64,
    pub form: GateForm,
}

impl FcsParams {
    pub fn new(
        tape: &Tape,
        alpha: Tensor,
        a: Tensor,
        q: Tensor,
        mu: Tensor,
        k: f64,
        form: GateForm,
    ) -> Result<Self> {
        if tape.shape(alpha).len() != 1 {
            return Err(Error::BadShape {
                op: "fuzzy_channel_select",
                expected: "rank-1 alpha".into(),
                shape: tape.shape(alpha).to_vec(),
            });
        }
        for (name, t) in [("A", a), ("Q", q), ("mu", mu)] {
            if tape.data(t).len() != 1 {
                return Err(Error::Invalid(format!(
                    "fuzzy_channel_select: {name} must be a single-element tensor"
                )));
            }
        }
        if !(k > 0.0 && k <= 1.0) {
            return Err(Error::Invalid(format!(
                "fuzzy_channel_select: retention k must lie in (0, 1], got {k}"
            )));
        }
        Ok(FcsParams {
            alpha,
            a,
            q,
            mu,
            k,
            form,
        })
    }

    pub fn channels(&self, tape: &Tape) -> usize {
        tape.shape(self.alpha)[0]
    }

    /// Retained channel count for M input channels.
    pub fn retained(&self, m_channels: usize) -> usize {
        retained_count(self.k, m_channels)
    }
}

pub fn retained_count(k: f64, channels: usize) -> usize {
    ((k * channels as f64).round() as usize).clamp(1, channels)
}

/// One SC block: separable conv k=1 then k=3, C filters each, with the
/// configured activation after each stage.
pub struct ScBlockParams {
    pub sep1: SeparableConv2dParams,
    pub sep3: SeparableConv2dParams,
    pub activation: Activation,
}

pub fn sc_block(tape: &mut Tape, x: Tensor, p: &ScBlockParams) -> Result<Tensor> {
    let act = |tape: &mut Tape, t: Tensor| match p.activation {
        Activation::Relu => relu(tape, t),
        Activation::Sigmoid => sigmoid(tape, t),
        Activation::None => Ok(t),
    };
    let y = separable_conv2d(tape, x, &p.sep1)?;
    let y = act(tape, y)?;
    let y = separable_conv2d(tape, y, &p.sep3)?;
    act(tape, y)
}

/// Everything FCSSAM needs, channel counts already consistent:
/// CAM over C, SC blocks C -> C, FCS alpha over 2C.
pub struct FcssamParams {
    pub cam: CamParams,
    pub sc_avg: ScBlockParams,
    pub sc_max: ScBlockParams,
    pub sam_avg: SamParams,
    pub sam_max: SamParams,
    pub fcs: FcsParams,
    pub wiring: Wiring,
}

/// Values exported for heatmap/inspection commands; tensors live on the
/// forward tape.
pub struct FcssamDiagnostics {
    pub cam_weights: Tensor,
    pub sam_avg_map: Tensor,
    pub sam_max_map: Tensor,
    pub gates: Tensor,
    pub selected: Vec<usize>,
}

/// Per-channel attention weights in (0,1): sigmoid of the summed
/// squeeze-excitation descriptors from the GAP and GMP paths.
pub fn channel_attention(tape: &mut Tape, f_enc: Tensor, p: &CamParams) -> Result<Tensor> {
    let gap = global_pool(tape, f_enc, PoolMode::Avg)?;
    let gmp = global_pool(tape, f_enc, PoolMode::Max)?;
    let h = dense(tape, gap, &p.d1, Activation::Relu)?;
    let ex_avg = dense(tape, h, &p.d2, Activation::None)?;
    let d1m = p.d1_max.as_ref().unwrap_or(&p.d1);
    let d2m = p.d2_max.as_ref().unwrap_or(&p.d2);
    let h = dense(tape, gmp, d1m, Activation::Relu)?;
    let ex_max = dense(tape, h, d2m, Activation::None)?;
    let s = tape.add(ex_max, ex_avg)?;
    sigmoid(tape, s)
}

fn spatial_attention_with_map(
    tape: &mut Tape,
    f: Tensor,
    p: &SamParams,
    mode: PoolMode,
) -> Result<(Tensor, Tensor)> {
    let pooled = channelwise_pool(tape, f, mode)?;
    let pre = conv2d(tape, pooled, &p.conv)?;
    let map = sigmoid(tape, pre)?;
    let attended = tape.mul(f, map)?;
    Ok((attended, map))
}

/// Pool channels per `mode`, 7x7 conv + sigmoid to an H x W x 1 map,
/// multiply back over all channels.
pub fn spatial_attention(tape: &mut Tape, f: Tensor, p: &SamParams, mode: PoolMode) -> Result<Tensor> {
    spatial_attention_with_map(tape, f, p, mode).map(|(attended, _)| attended)
}

/// Elementwise Richards gate over alpha.
pub fn richards_gate(
    tape: &mut Tape,
    alpha: Tensor,
    a: Tensor,
    q: Tensor,
    mu: Tensor,
    form: GateForm,
) -> Result<Tensor> {
    for t in [a, q, mu] {
        if tape.data(t).len() != 1 {
            return Err(Error::Invalid(
                "richards_gate: A, Q, mu must be single-element tensors".into(),
            ));
        }
    }
    let u = tape.sub(alpha, mu)?;
    let qu = tape.mul(u, q)?;
    let nqu = tape.neg(qu)?;
    let core = tape.exp(nqu)?;
    let z = tape.mul(core, a)?;
    match form {
        // 1/(1+e^z) = sigmoid(-z)
        GateForm::Paper => {
            let nz = tape.neg(z)?;
            sigmoid(tape, nz)
        }
        GateForm::Standard => {
            let one = tape.fill(1.0, &[1])?;
            let denom = tape.add(z, one)?;
            tape.recip(denom)
        }
    }
}

/// Indices of the m largest gate values, ties to the lower index,
/// returned in ascending (original channel) order.
pub fn select_top_channels(gates: &[f64], m: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..gates.len()).collect();
    order.sort_by(|&i, &j| {
        gates[j]
            .partial_cmp(&gates[i])
            .expect("gate values are finite")
            .then(i.cmp(&j))
    });
    order.truncate(m);
    order.sort_unstable();
    order
}

pub struct FcsOutput {
    /// N x H x W x m: retained channels in original order, gate-scaled.
    pub selected: Tensor,
    /// Gate vector over all M input channels.
    pub gates: Tensor,
    /// Ascending indices of the retained channels.
    pub indices: Vec<usize>,
}

/// Gate all channels, keep the top m by gate value, scale each retained
/// channel by its gate. Dropped channels get zero gradient; gate
/// parameters receive gradient only through retained channels.
pub fn fuzzy_channel_select(tape: &mut Tape, f: Tensor, p: &FcsParams) -> Result<FcsOutput> {
    let shape = tape.shape(f).to_vec();
    if shape.len() != 4 {
        return Err(Error::BadShape {
            op: "fuzzy_channel_select",
            expected: "rank-4 NHWC tensor".into(),
            shape,
        });
    }
    let channels = shape[3];
    if channels != p.channels(tape) {
        return Err(Error::ShapeMismatch {
            op: "fuzzy_channel_select",
            lhs: shape,
            rhs: tape.shape(p.alpha).to_vec(),
        });
    }
    let gates = richards_gate(tape, p.alpha, p.a, p.q, p.mu, p.form)?;
    let m = p.retained(channels);
    let indices = select_top_channels(tape.data(gates), m);
    let kept = gather_channels(tape, f, &indices)?;
    let g4 = tape.reshape(gates, &[1, 1, 1, channels])?;
    let g_kept = gather_channels(tape, g4, &indices)?;
    let selected = tape.mul(kept, g_kept)?;
    Ok(FcsOutput {
        selected,
        gates,
        indices,
    })
}

/// The full block. Output spatial extents equal the input's; channel
/// count is max(1, round(k * 2C)).
pub fn fcssam_forward(
    tape: &mut Tape,
    f_enc: Tensor,
    p: &FcssamParams,
) -> Result<(Tensor, FcssamDiagnostics)> {
    let shape = tape.shape(f_enc).to_vec();
    if shape.len() != 4 {
        return Err(Error::BadShape {
            op: "fcssam_forward",
            expected: "rank-4 NHWC tensor".into(),
            shape,
        });
    }
    let (n, c) = (shape[0], shape[3]);
    if c != p.cam.channels(tape) {
        return Err(Error::ShapeMismatch {
            op: "fcssam_forward",
            lhs: shape,
            rhs: tape.shape(p.cam.d1.weight).to_vec(),
        });
    }
    if p.fcs.channels(tape) != 2 * c {
        return Err(Error::ShapeMismatch {
            op: "fcssam_forward",
            lhs: vec![2 * c],
            rhs: tape.shape(p.fcs.alpha).to_vec(),
        });
    }

    let cam_weights = channel_attention(tape, f_enc, &p.cam)?;
    let cam_bcast = tape.reshape(cam_weights, &[n, 1, 1, c])?;

    let (branch_avg, map_avg, branch_max, map_max) = match p.wiring {
        Wiring::CamFirst => {
            let f_rec = tape.mul(f_enc, cam_bcast)?;
            let sa = sc_block(tape, f_rec, &p.sc_avg)?;
            let sm = sc_block(tape, f_rec, &p.sc_max)?;
            let (ba, ma) = spatial_attention_with_map(tape, sa, &p.sam_avg, PoolMode::Avg)?;
            let (bm, mm) = spatial_attention_with_map(tape, sm, &p.sam_max, PoolMode::Max)?;
            (ba, ma, bm, mm)
        }
        Wiring::CamIntoBranches => {
            let sa = sc_block(tape, f_enc, &p.sc_avg)?;
            let sm = sc_block(tape, f_enc, &p.sc_max)?;
            let (ba, ma) = spatial_attention_with_map(tape, sa, &p.sam_avg, PoolMode::Avg)?;
            let (bm, mm) = spatial_attention_with_map(tape, sm, &p.sam_max, PoolMode::Max)?;
            let ba = tape.mul(ba, cam_bcast)?;
            let bm = tape.mul(bm, cam_bcast)?;
            (ba, ma, bm, mm)
        }
    };

    let f_concat = concat_channels(tape, branch_avg, branch_max)?;
    let fcs = fuzzy_channel_select(tape, f_concat, &p.fcs)?;
    let diags = FcssamDiagnostics {
        cam_weights,
        sam_avg_map: map_avg,
        sam_max_map: map_max,
        gates: fcs.gates,
        selected: fcs.indices,
    };
    Ok((fcs.selected, diags))
}
