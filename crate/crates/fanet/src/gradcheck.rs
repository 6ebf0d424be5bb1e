//! Finite-difference verification of every differentiable op and of
//! the assembled model at desk scale. The suite is what `gradcheck`
//! runs; tests and the CLI share it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    channel_attention, fcssam_forward, fuzzy_channel_select, richards_gate, sc_block, CamParams,
    FcsParams, GateForm, SamParams, ScBlockParams, Wiring,
};
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::model::{BoundFaNet, FaNet, FaNetConfig};
use crate::nn::{
    channelwise_pool, concat_channels, conv2d, dense, depthwise_conv2d, gather_channels,
    global_pool, relu, separable_conv2d, sigmoid, softmax, Activation, Conv2dParams, DenseParams,
    Padding, PoolMode, SeparableConv2dParams,
};
use crate::tensor::{finite_difference_check, Tape, Tensor};
use crate::train::cross_entropy_loss;

pub const TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-5;
/// Central differences on a loss of magnitude ~1 resolve gradients no
/// finer than ulp(loss)/(2 eps) ~ 1e-11. Gradient entries below this
/// floor are compared absolutely, not relatively, or pure rounding
/// noise on near-zero entries would read as failure.
const GRAD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct OpCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
    /// Finite-difference passes contributing to the max (input slots
    /// times configurations).
    pub instances: usize,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values bounded away from zero, random sign. Keeps central
/// differences off the ReLU and reciprocal kinks.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v = rng.gen_range(lo..hi);
            if rng.gen::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect()
}

/// A shuffled jittered grid over (lo, hi): every pair of values is at
/// least a quarter grid step apart, so max-pool argument choices stay
/// stable under +-eps probes.
fn gapped(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let step = (hi - lo) / n as f64;
    let mut vals: Vec<f64> = (0..n)
        .map(|i| lo + (i as f64 + 0.5) * step + rng.gen_range(-0.25..0.25) * step)
        .collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.gen_range(0..=i));
    }
    vals
}

/// Reduce any tensor to a scalar with fixed non-uniform weights so the
/// probe exercises every output element with a distinct coefficient.
fn probe_sum(tape: &mut Tape, t: Tensor) -> Result<Tensor> {
    let n = tape.data(t).len();
    let shape = tape.shape(t).to_vec();
    let w: Vec<f64> = (0..n).map(|i| 0.4 + 0.3 * ((i as f64) * 0.9).sin()).collect();
    let wt = tape.leaf(w, &shape)?;
    let p = tape.mul(t, wt)?;
    tape.sum(p)
}

type Slot = (Vec<f64>, Vec<usize>);

/// One finite-difference pass per input slot; the other slots are held
/// constant. Returns the worst relative error across slots.
fn check_slots<F>(slots: &[Slot], f: F) -> Result<(f64, usize)>
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<Tensor>,
{
    let mut max_err = 0.0f64;
    for active in 0..slots.len() {
        let err = finite_difference_check(
            |tape, x| {
                let mut ts = Vec::with_capacity(slots.len());
                for (j, (data, shape)) in slots.iter().enumerate() {
                    if j == active {
                        ts.push(x);
                    } else {
                        ts.push(tape.leaf(data.clone(), shape)?);
                    }
                }
                f(tape, &ts)
            },
            &slots[active].0,
            &slots[active].1,
            EPS,
        )?;
        max_err = max_err.max(err);
    }
    Ok((max_err, slots.len()))
}

/// Finite differences over a bound model: the input tensor and every
/// parameter accepted by `filter`, against one analytic backward pass.
///
/// Bias-like parameters shift a whole channel at once, so some spatial
/// position often sits within eps of a ReLU or max-pool kink and the
/// central difference blends the two slopes. The analytic gradient
/// matches the one-sided difference taken from the kink-free side, so
/// when the central estimate disagrees the check falls back to the
/// best of {central, forward, backward}; a wrong gradient fails all
/// three.
fn check_model<L>(
    model: &FaNet,
    x0: &[f64],
    xshape: &[usize],
    filter: impl Fn(&str) -> bool,
    loss_fn: L,
) -> Result<(f64, usize)>
where
    L: Fn(&mut Tape, &BoundFaNet, Tensor) -> Result<Tensor>,
{
    let eval = |m: &FaNet, xs: &[f64]| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape)?;
        let x = tape.leaf(xs.to_vec(), xshape)?;
        let l = loss_fn(&mut tape, &bound, x)?;
        tape.scalar(l)
    };
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape)?;
    let x = tape.leaf(x0.to_vec(), xshape)?;
    let loss = loss_fn(&mut tape, &bound, x)?;
    tape.backward(loss)?;
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(GRAD_FLOOR);
    let f0 = eval(model, x0)?;
    let measure = |analytic: f64, fp: f64, fm: f64| {
        let central = rel(analytic, (fp - fm) / (2.0 * EPS));
        if central <= 0.5 * TOLERANCE {
            return central;
        }
        let forward = rel(analytic, (fp - f0) / EPS);
        let backward = rel(analytic, (f0 - fm) / EPS);
        central.min(forward).min(backward)
    };

    let mut max_err = 0.0f64;
    let mut instances = 1;
    let gx: Vec<f64> = tape
        .grad(x)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; x0.len()]);
    let mut probe = x0.to_vec();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + EPS;
        let fp = eval(model, &probe)?;
        probe[i] = orig - EPS;
        let fm = eval(model, &probe)?;
        probe[i] = orig;
        max_err = max_err.max(measure(gx[i], fp, fm));
    }

    let grads: Vec<Vec<f64>> = bound
        .tensors
        .iter()
        .zip(&model.params)
        .map(|(t, p)| {
            tape.grad(*t)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; p.value.len()])
        })
        .collect();
    let mut probe_model = model.clone();
    for (pi, p) in model.params.iter().enumerate() {
        if !filter(&p.name) {
            continue;
        }
        instances += 1;
        for j in 0..p.value.len() {
            let orig = p.value[j];
            probe_model.params[pi].value[j] = orig + EPS;
            let fp = eval(&probe_model, x0)?;
            probe_model.params[pi].value[j] = orig - EPS;
            let fm = eval(&probe_model, x0)?;
            probe_model.params[pi].value[j] = orig;
            max_err = max_err.max(measure(grads[pi][j], fp, fm));
        }
    }
    Ok((max_err, instances))
}

pub fn run_suite(seed: u64) -> Result<Vec<OpCheck>> {
    run_suite_with_fault(seed, None)
}

/// `fault` marks one op's measured error as corrupted (pushed past the
/// tolerance) so the failure path can be exercised end to end.
pub fn run_suite_with_fault(seed: u64, fault: Option<&str>) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<OpCheck> = Vec::new();
    let mut record = |name: &'static str, r: Result<(f64, usize)>| -> Result<()> {
        let (max_rel_err, instances) = r?;
        out.push(OpCheck {
            name,
            max_rel_err,
            instances,
        });
        Ok(())
    };

    // elementwise and core tape ops
    let a = uniform(&mut rng, 6, -1.0, 1.0);
    let b = uniform(&mut rng, 6, -1.0, 1.0);
    let row = uniform(&mut rng, 3, -1.0, 1.0);
    for (name, which) in [("add", 0), ("sub", 1), ("mul", 2)] {
        let apply = move |tape: &mut Tape, x: Tensor, y: Tensor| match which {
            0 => tape.add(x, y),
            1 => tape.sub(x, y),
            _ => tape.mul(x, y),
        };
        let full = check_slots(
            &[(a.clone(), vec![2, 3]), (b.clone(), vec![2, 3])],
            |tape, ts| {
                let y = apply(tape, ts[0], ts[1])?;
                probe_sum(tape, y)
            },
        )?;
        let broadcast = check_slots(
            &[(a.clone(), vec![2, 3]), (row.clone(), vec![3])],
            |tape, ts| {
                let y = apply(tape, ts[0], ts[1])?;
                probe_sum(tape, y)
            },
        )?;
        record(name, Ok((full.0.max(broadcast.0), full.1 + broadcast.1)))?;
    }

    let x6 = uniform(&mut rng, 6, -1.0, 1.0);
    record(
        "neg",
        check_slots(&[(x6.clone(), vec![2, 3])], |tape, ts| {
            let y = tape.neg(ts[0])?;
            probe_sum(tape, y)
        }),
    )?;
    record(
        "exp",
        check_slots(&[(x6.clone(), vec![6])], |tape, ts| {
            let y = tape.exp(ts[0])?;
            probe_sum(tape, y)
        }),
    )?;
    let safe = away_from_zero(&mut rng, 6, 0.4, 1.5);
    record(
        "recip",
        check_slots(&[(safe, vec![6])], |tape, ts| {
            let y = tape.recip(ts[0])?;
            probe_sum(tape, y)
        }),
    )?;
    record(
        "scale",
        check_slots(&[(x6.clone(), vec![2, 3])], |tape, ts| {
            let y = tape.scale(ts[0], 1.7)?;
            probe_sum(tape, y)
        }),
    )?;
    record(
        "reshape",
        check_slots(&[(x6.clone(), vec![2, 3])], |tape, ts| {
            let y = tape.reshape(ts[0], &[3, 2])?;
            probe_sum(tape, y)
        }),
    )?;
    record(
        "sum",
        check_slots(&[(x6.clone(), vec![6])], |tape, ts| tape.sum(ts[0])),
    )?;

    let ma = uniform(&mut rng, 12, -1.0, 1.0);
    let mb = uniform(&mut rng, 8, -1.0, 1.0);
    record(
        "matmul",
        check_slots(&[(ma, vec![3, 4]), (mb, vec![4, 2])], |tape, ts| {
            let y = tape.matmul(ts[0], ts[1])?;
            probe_sum(tape, y)
        }),
    )?;

    // activations
    let margin = away_from_zero(&mut rng, 12, 0.05, 1.0);
    record(
        "relu",
        check_slots(&[(margin, vec![3, 4])], |tape, ts| {
            let y = relu(tape, ts[0])?;
            probe_sum(tape, y)
        }),
    )?;
    let wide = uniform(&mut rng, 12, -2.0, 2.0);
    record(
        "sigmoid",
        check_slots(&[(wide.clone(), vec![3, 4])], |tape, ts| {
            let y = sigmoid(tape, ts[0])?;
            probe_sum(tape, y)
        }),
    )?;
    record(
        "softmax",
        check_slots(&[(wide, vec![3, 4])], |tape, ts| {
            let y = softmax(tape, ts[0])?;
            probe_sum(tape, y)
        }),
    )?;

    // dense, with and without a smooth activation
    let dx = uniform(&mut rng, 8, -1.0, 1.0);
    let dw = uniform(&mut rng, 12, -0.7, 0.7);
    let db = uniform(&mut rng, 3, -0.5, 0.5);
    let dense_slots = [
        (dx, vec![2, 4]),
        (dw, vec![4, 3]),
        (db, vec![3]),
    ];
    let mut dense_err = 0.0f64;
    let mut dense_n = 0;
    for act in [Activation::None, Activation::Sigmoid] {
        let (e, n) = check_slots(&dense_slots, |tape, ts| {
            let p = DenseParams::new(tape, ts[1], ts[2])?;
            let y = dense(tape, ts[0], &p, act)?;
            probe_sum(tape, y)
        })?;
        dense_err = dense_err.max(e);
        dense_n += n;
    }
    record("dense", Ok((dense_err, dense_n)))?;

    // convolutions
    let cx = uniform(&mut rng, 50, -1.0, 1.0);
    let ck = uniform(&mut rng, 54, -0.5, 0.5);
    let cb = uniform(&mut rng, 3, -0.3, 0.3);
    let conv_slots = [
        (cx, vec![1, 5, 5, 2]),
        (ck, vec![3, 3, 2, 3]),
        (cb, vec![3]),
    ];
    let mut conv_err = 0.0f64;
    let mut conv_n = 0;
    for (stride, padding) in [(1, Padding::Same), (2, Padding::Same), (1, Padding::Valid)] {
        let (e, n) = check_slots(&conv_slots, |tape, ts| {
            let p = Conv2dParams::new(tape, ts[1], ts[2], stride, padding)?;
            let y = conv2d(tape, ts[0], &p)?;
            probe_sum(tape, y)
        })?;
        conv_err = conv_err.max(e);
        conv_n += n;
    }
    record("conv2d", Ok((conv_err, conv_n)))?;

    let dwx = uniform(&mut rng, 75, -1.0, 1.0);
    let dwk = uniform(&mut rng, 27, -0.5, 0.5);
    let dwb = uniform(&mut rng, 3, -0.3, 0.3);
    record(
        "depthwise_conv2d",
        check_slots(
            &[(dwx, vec![1, 5, 5, 3]), (dwk, vec![3, 3, 3]), (dwb, vec![3])],
            |tape, ts| {
                let y = depthwise_conv2d(tape, ts[0], ts[1], ts[2])?;
                probe_sum(tape, y)
            },
        ),
    )?;

    let sx = uniform(&mut rng, 48, -1.0, 1.0);
    let sdw = uniform(&mut rng, 27, -0.5, 0.5);
    let sdb = uniform(&mut rng, 3, -0.3, 0.3);
    let spw = uniform(&mut rng, 12, -0.5, 0.5);
    let spb = uniform(&mut rng, 4, -0.3, 0.3);
    record(
        "separable_conv2d",
        check_slots(
            &[
                (sx, vec![1, 4, 4, 3]),
                (sdw, vec![3, 3, 3]),
                (sdb, vec![3]),
                (spw, vec![1, 1, 3, 4]),
                (spb, vec![4]),
            ],
            |tape, ts| {
                let p = SeparableConv2dParams::new(tape, ts[1], ts[2], ts[3], ts[4])?;
                let y = separable_conv2d(tape, ts[0], &p)?;
                probe_sum(tape, y)
            },
        ),
    )?;

    // pooling
    let px = uniform(&mut rng, 72, -1.0, 1.0);
    record(
        "global_avg_pool",
        check_slots(&[(px, vec![2, 3, 3, 4])], |tape, ts| {
            let y = global_pool(tape, ts[0], PoolMode::Avg)?;
            probe_sum(tape, y)
        }),
    )?;
    let gx = gapped(&mut rng, 72, -1.0, 1.0);
    record(
        "global_max_pool",
        check_slots(&[(gx, vec![2, 3, 3, 4])], |tape, ts| {
            let y = global_pool(tape, ts[0], PoolMode::Max)?;
            probe_sum(tape, y)
        }),
    )?;
    let cpx = uniform(&mut rng, 54, -1.0, 1.0);
    record(
        "channelwise_avg_pool",
        check_slots(&[(cpx, vec![1, 3, 3, 6])], |tape, ts| {
            let y = channelwise_pool(tape, ts[0], PoolMode::Avg)?;
            probe_sum(tape, y)
        }),
    )?;
    let cgx = gapped(&mut rng, 54, -1.0, 1.0);
    record(
        "channelwise_max_pool",
        check_slots(&[(cgx, vec![1, 3, 3, 6])], |tape, ts| {
            let y = channelwise_pool(tape, ts[0], PoolMode::Max)?;
            probe_sum(tape, y)
        }),
    )?;

    // channel plumbing
    let ca = uniform(&mut rng, 12, -1.0, 1.0);
    let cb2 = uniform(&mut rng, 8, -1.0, 1.0);
    record(
        "concat_channels",
        check_slots(
            &[(ca, vec![1, 2, 2, 3]), (cb2, vec![1, 2, 2, 2])],
            |tape, ts| {
                let y = concat_channels(tape, ts[0], ts[1])?;
                probe_sum(tape, y)
            },
        ),
    )?;
    let gx2 = uniform(&mut rng, 20, -1.0, 1.0);
    record(
        "gather_channels",
        check_slots(&[(gx2, vec![1, 2, 2, 5])], |tape, ts| {
            let y = gather_channels(tape, ts[0], &[0, 2, 4])?;
            probe_sum(tape, y)
        }),
    )?;

    // loss
    let logits = uniform(&mut rng, 12, -2.0, 2.0);
    let weights = uniform(&mut rng, 4, 0.5, 2.0);
    let mut ce_err = 0.0f64;
    let mut ce_n = 0;
    for weighted in [false, true] {
        let w = weights.clone();
        let (e, n) = check_slots(&[(logits.clone(), vec![3, 4])], |tape, ts| {
            let cw = if weighted { Some(&w[..]) } else { None };
            cross_entropy_loss(tape, ts[0], &[0, 2, 1], cw)
        })?;
        ce_err = ce_err.max(e);
        ce_n += n;
    }
    record("cross_entropy", Ok((ce_err, ce_n)))?;

    // attention pieces
    let alpha = gapped(&mut rng, 6, 0.3, 0.7);
    let a_val = vec![uniform(&mut rng, 1, 0.5, 2.0)[0]];
    let q_val = vec![uniform(&mut rng, 1, 0.5, 2.0)[0]];
    let mu_val = vec![0.5];
    let gate_slots = [
        (alpha.clone(), vec![6]),
        (a_val.clone(), vec![1]),
        (q_val.clone(), vec![1]),
        (mu_val.clone(), vec![1]),
    ];
    let mut gate_err = 0.0f64;
    let mut gate_n = 0;
    for form in [GateForm::Paper, GateForm::Standard] {
        let (e, n) = check_slots(&gate_slots, |tape, ts| {
            let y = richards_gate(tape, ts[0], ts[1], ts[2], ts[3], form)?;
            probe_sum(tape, y)
        })?;
        gate_err = gate_err.max(e);
        gate_n += n;
    }
    record("richards_gate", Ok((gate_err, gate_n)))?;

    let fenc = gapped(&mut rng, 64, -1.0, 1.0);
    let d1w = uniform(&mut rng, 8, -0.7, 0.7);
    let d1b = uniform(&mut rng, 2, -0.3, 0.3);
    let d2w = uniform(&mut rng, 8, -0.7, 0.7);
    let d2b = uniform(&mut rng, 4, -0.3, 0.3);
    record(
        "channel_attention",
        check_slots(
            &[
                (fenc.clone(), vec![1, 4, 4, 4]),
                (d1w, vec![4, 2]),
                (d1b, vec![2]),
                (d2w, vec![2, 4]),
                (d2b, vec![4]),
            ],
            |tape, ts| {
                let d1 = DenseParams::new(tape, ts[1], ts[2])?;
                let d2 = DenseParams::new(tape, ts[3], ts[4])?;
                let p = CamParams::new(tape, d1, d2, None, None, 2)?;
                let y = channel_attention(tape, ts[0], &p)?;
                probe_sum(tape, y)
            },
        ),
    )?;

    let samx = gapped(&mut rng, 48, -1.0, 1.0);
    let samk = uniform(&mut rng, 49, -0.3, 0.3);
    let samb = uniform(&mut rng, 1, -0.2, 0.2);
    let sam_slots = [
        (samx, vec![1, 4, 4, 3]),
        (samk, vec![7, 7, 1, 1]),
        (samb, vec![1]),
    ];
    let mut sam_err = 0.0f64;
    let mut sam_n = 0;
    for mode in [PoolMode::Avg, PoolMode::Max] {
        let (e, n) = check_slots(&sam_slots, |tape, ts| {
            let conv = Conv2dParams::new(tape, ts[1], ts[2], 1, Padding::Same)?;
            let p = SamParams::new(tape, conv)?;
            let y = crate::attention::spatial_attention(tape, ts[0], &p, mode)?;
            probe_sum(tape, y)
        })?;
        sam_err = sam_err.max(e);
        sam_n += n;
    }
    record("spatial_attention", Ok((sam_err, sam_n)))?;

    let scx = uniform(&mut rng, 48, -1.0, 1.0);
    let sc1d = uniform(&mut rng, 3, -0.5, 0.5);
    let sc1db = uniform(&mut rng, 3, -0.3, 0.3);
    let sc1p = uniform(&mut rng, 9, -0.5, 0.5);
    let sc1pb = uniform(&mut rng, 3, -0.3, 0.3);
    let sc3d = uniform(&mut rng, 27, -0.5, 0.5);
    let sc3db = uniform(&mut rng, 3, -0.3, 0.3);
    let sc3p = uniform(&mut rng, 9, -0.5, 0.5);
    let sc3pb = uniform(&mut rng, 3, -0.3, 0.3);
    let sc_slots = [
        (scx, vec![1, 4, 4, 3]),
        (sc1d, vec![1, 1, 3]),
        (sc1db, vec![3]),
        (sc1p, vec![1, 1, 3, 3]),
        (sc1pb, vec![3]),
        (sc3d, vec![3, 3, 3]),
        (sc3db, vec![3]),
        (sc3p, vec![1, 1, 3, 3]),
        (sc3pb, vec![3]),
    ];
    let mut sc_err = 0.0f64;
    let mut sc_n = 0;
    for act in [Activation::None, Activation::Relu] {
        let (e, n) = check_slots(&sc_slots, |tape, ts| {
            let sep1 = SeparableConv2dParams::new(tape, ts[1], ts[2], ts[3], ts[4])?;
            let sep3 = SeparableConv2dParams::new(tape, ts[5], ts[6], ts[7], ts[8])?;
            let p = ScBlockParams {
                sep1,
                sep3,
                activation: act,
            };
            let y = sc_block(tape, ts[0], &p)?;
            probe_sum(tape, y)
        })?;
        sc_err = sc_err.max(e);
        sc_n += n;
    }
    record("sc_block", Ok((sc_err, sc_n)))?;

    let fcsx = uniform(&mut rng, 54, -1.0, 1.0);
    let fcs_alpha = gapped(&mut rng, 6, 0.3, 0.7);
    let fcs_slots = [
        (fcsx, vec![1, 3, 3, 6]),
        (fcs_alpha, vec![6]),
        (a_val, vec![1]),
        (q_val, vec![1]),
        (mu_val, vec![1]),
    ];
    let mut fcs_err = 0.0f64;
    let mut fcs_n = 0;
    for form in [GateForm::Paper, GateForm::Standard] {
        let (e, n) = check_slots(&fcs_slots, |tape, ts| {
            let p = FcsParams::new(tape, ts[1], ts[2], ts[3], ts[4], 0.8, form)?;
            let out = fuzzy_channel_select(tape, ts[0], &p)?;
            probe_sum(tape, out.selected)
        })?;
        fcs_err = fcs_err.max(e);
        fcs_n += n;
    }
    record("fuzzy_channel_select", Ok((fcs_err, fcs_n)))?;

    // standalone FCSSAM over a direct feature map, all block parameters
    let fcssam_cfg = FaNetConfig {
        num_classes: 2,
        backbone: BackboneConfig {
            widths: vec![6],
            strides: vec![2],
            input_h: 16,
            input_w: 16,
        },
        reduction: 3,
        retention: 0.8,
        wiring: Wiring::CamFirst,
        gate_form: GateForm::Paper,
        sc_activation: Activation::Relu,
        cam_shared_mlp: true,
    };
    let fcssam_model = FaNet::new(fcssam_cfg, seed ^ 0x5eed)?;
    let fcssam_x = gapped(&mut rng, 8 * 8 * 6, -1.0, 1.0);
    record(
        "fcssam",
        check_model(
            &fcssam_model,
            &fcssam_x,
            &[1, 8, 8, 6],
            |name| name.starts_with("fcssam."),
            |tape, bound, x| {
                let (out, _) = fcssam_forward(tape, x, &bound.fcssam)?;
                probe_sum(tape, out)
            },
        ),
    )?;

    // the whole model, every registered parameter
    let e2e_cfg = FaNetConfig {
        num_classes: 3,
        backbone: BackboneConfig {
            widths: vec![4, 8],
            strides: vec![2, 2],
            input_h: 16,
            input_w: 16,
        },
        reduction: 4,
        retention: 0.8,
        wiring: Wiring::CamFirst,
        gate_form: GateForm::Paper,
        sc_activation: Activation::Relu,
        cam_shared_mlp: true,
    };
    let e2e_model = FaNet::new(e2e_cfg, seed ^ 0xfa43)?;
    let e2e_x = uniform(&mut rng, 2 * 16 * 16 * 3, 0.05, 0.95);
    record(
        "fanet_end_to_end",
        check_model(
            &e2e_model,
            &e2e_x,
            &[2, 16, 16, 3],
            |_| true,
            |tape, bound, x| {
                let logits = bound.forward(tape, x)?;
                cross_entropy_loss(tape, logits, &[0, 2], None)
            },
        ),
    )?;

    if let Some(op) = fault {
        match out.iter_mut().find(|c| c.name == op) {
            Some(c) => c.max_rel_err += 1.0,
            None => {
                return Err(Error::Invalid(format!(
                    "cannot inject fault: no op named `{op}`"
                )))
            }
        }
    }
    Ok(out)
}
