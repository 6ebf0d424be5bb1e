#![allow(dead_code)]

use std::path::Path;

use fanet::attention::{
    CamParams, FcsParams, FcssamParams, GateForm, SamParams, ScBlockParams, Wiring,
};
use fanet::nn::{Activation, Conv2dParams, DenseParams, Padding, SeparableConv2dParams};
use fanet::vis::write_pgm;
use fanet::{Tape, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Two-class grayscale dataset: `dark/` pixels in [0, 0.25), `light/` in [0.75, 1).
/// Trivially separable so small training budgets can reach full accuracy.
pub fn write_two_class_dataset(root: &Path, per_class: usize, side: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, lo, hi) in [("dark", 0.0, 0.25), ("light", 0.75, 1.0)] {
        let dir = root.join(name);
        std::fs::create_dir_all(&dir).unwrap();
        for i in 0..per_class {
            let px: Vec<f64> = (0..side * side).map(|_| rng.gen_range(lo..hi)).collect();
            write_pgm(&dir.join(format!("img_{i:03}.pgm")), &px, side, side).unwrap();
        }
    }
}

fn rand_leaf(tape: &mut Tape, rng: &mut ChaCha8Rng, shape: &[usize], lim: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-lim..lim)).collect();
    tape.leaf(data, shape).unwrap()
}

fn sc_block(tape: &mut Tape, rng: &mut ChaCha8Rng, c: usize) -> ScBlockParams {
    let sep = |tape: &mut Tape, rng: &mut ChaCha8Rng, ks: usize| {
        let dw = rand_leaf(tape, rng, &[ks, ks, c], 0.4);
        let dw_bias = rand_leaf(tape, rng, &[c], 0.05);
        let pw = rand_leaf(tape, rng, &[1, 1, c, c], 0.4);
        let pw_bias = rand_leaf(tape, rng, &[c], 0.05);
        SeparableConv2dParams::new(tape, dw, dw_bias, pw, pw_bias).unwrap()
    };
    ScBlockParams {
        sep1: sep(tape, rng, 1),
        sep3: sep(tape, rng, 3),
        activation: Activation::Relu,
    }
}

fn sam(tape: &mut Tape, rng: &mut ChaCha8Rng) -> SamParams {
    let kernel = rand_leaf(tape, rng, &[7, 7, 1, 1], 0.3);
    let bias = rand_leaf(tape, rng, &[1], 0.05);
    let conv = Conv2dParams::new(tape, kernel, bias, 1, Padding::Same).unwrap();
    SamParams::new(tape, conv).unwrap()
}

/// Builds a randomly initialized FCSSAM over `c`-channel input, squeeze ratio `r`,
/// retention fraction `k`. `r` must divide `c`.
pub fn build_fcssam(tape: &mut Tape, c: usize, r: usize, k: f64, seed: u64) -> FcssamParams {
    assert_eq!(c % r, 0, "squeeze ratio must divide channel count");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sq = c / r;

    let w1 = rand_leaf(tape, &mut rng, &[c, sq], 0.5);
    let b1 = rand_leaf(tape, &mut rng, &[sq], 0.05);
    let w2 = rand_leaf(tape, &mut rng, &[sq, c], 0.5);
    let b2 = rand_leaf(tape, &mut rng, &[c], 0.05);
    let d1 = DenseParams::new(tape, w1, b1).unwrap();
    let d2 = DenseParams::new(tape, w2, b2).unwrap();
    let cam = CamParams::new(tape, d1, d2, None, None, r).unwrap();

    let sc_avg = sc_block(tape, &mut rng, c);
    let sc_max = sc_block(tape, &mut rng, c);
    let sam_avg = sam(tape, &mut rng);
    let sam_max = sam(tape, &mut rng);

    // Concatenated branch output has 2c channels feeding the gate.
    let n = 2 * c;
    let mut alpha: Vec<f64> = (0..n).map(|i| 0.3 + 0.4 * (i as f64 / n as f64)).collect();
    for (i, v) in alpha.iter_mut().enumerate() {
        *v += 0.003 * ((i * 7 % 11) as f64);
    }
    let alpha = tape.leaf(alpha, &[n]).unwrap();
    let a = tape.leaf(vec![1.0], &[1]).unwrap();
    let q = tape.leaf(vec![1.0], &[1]).unwrap();
    let mu = tape.leaf(vec![0.5], &[1]).unwrap();
    let fcs = FcsParams::new(tape, alpha, a, q, mu, k, GateForm::Paper).unwrap();

    FcssamParams {
        cam,
        sc_avg,
        sc_max,
        sam_avg,
        sam_max,
        fcs,
        wiring: Wiring::CamFirst,
    }
}
