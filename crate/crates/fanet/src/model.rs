//! Full FA-Net assembly: backbone -> FCSSAM -> GAP -> dense classifier,
//! with a named-parameter registry that checkpoints and the optimizer
//! work against.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    fcssam_forward, retained_count, CamParams, FcsParams, FcssamDiagnostics,
    FcssamParams, GateForm, SamParams, ScBlockParams, Wiring,
};
use crate::backbone::{backbone_forward, bind_backbone, stage_kernel_shapes, BackboneConfig, BackboneParams};
use crate::container::Entry;
use crate::error::{Error, Result};
use crate::nn::{dense, global_pool, Activation, Conv2dParams, DenseParams, Padding, PoolMode, SeparableConv2dParams};
use crate::tensor::{Tape, Tensor};
use crate::vis::min_max_normalize;

#[derive(Clone, Debug)]
pub struct FaNetConfig {
    pub num_classes: usize,
    pub backbone: BackboneConfig,
    /// Squeeze-excitation reduction ratio r.
    pub reduction: usize,
    /// FCS retention fraction k in (0, 1].
    pub retention: f64,
    pub wiring: Wiring,
    pub gate_form: GateForm,
    /// Activation after each separable conv in the SC blocks.
    pub sc_activation: Activation,
    /// Share the CAM MLP between the GAP and GMP paths.
    pub cam_shared_mlp: bool,
}

impl FaNetConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.num_classes < 2 {
            return Err(Error::Invalid(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        let c = self.backbone.out_channels();
        if self.reduction == 0 || c % self.reduction != 0 {
            return Err(Error::Invalid(format!(
                "feature channels C={c} must be divisible by reduction r={}",
                self.reduction
            )));
        }
        if !(self.retention > 0.0 && self.retention <= 1.0) {
            return Err(Error::Invalid(format!(
                "retention k must lie in (0, 1], got {}",
                self.retention
            )));
        }
        if self.sc_activation == Activation::Sigmoid {
            return Err(Error::Invalid(
                "sc_activation must be relu or none".into(),
            ));
        }
        Ok(())
    }

    /// Channels entering FCS (after branch concat).
    pub fn concat_channels(&self) -> usize {
        2 * self.backbone.out_channels()
    }

    /// Width of the GAP feature / classifier input.
    pub fn head_inputs(&self) -> usize {
        retained_count(self.retention, self.concat_channels())
    }
}

/// One named parameter tensor.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct FaNet {
    pub config: FaNetConfig,
    pub params: Vec<Param>,
}

fn glorot(rng: &mut ChaCha8Rng, n: usize, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
}

/// (name, shape, init) for every parameter, in registry order. The
/// order is part of the model identity: binding and the optimizer both
/// rely on it.
fn param_specs(cfg: &FaNetConfig, rng: &mut ChaCha8Rng) -> Vec<Param> {
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, value: Vec<f64>| {
        out.push(Param { name, shape, value });
    };
    // backbone stages
    for (i, shape) in stage_kernel_shapes(&cfg.backbone).iter().enumerate() {
        let (kh, kw, cin, cout) = (shape[0], shape[1], shape[2], shape[3]);
        let n = kh * kw * cin * cout;
        push(
            format!("backbone.stage{i}.kernel"),
            shape.clone(),
            glorot(rng, n, kh * kw * cin, kh * kw * cout),
        );
        push(format!("backbone.stage{i}.bias"), vec![cout], vec![0.0; cout]);
    }
    let c = cfg.backbone.out_channels();
    let sq = c / cfg.reduction;
    // CAM
    let cam_mlp = |tag: &str, push: &mut dyn FnMut(String, Vec<usize>, Vec<f64>), rng: &mut ChaCha8Rng| {
        push(
            format!("fcssam.cam.d1{tag}.weight"),
            vec![c, sq],
            glorot(rng, c * sq, c, sq),
        );
        push(format!("fcssam.cam.d1{tag}.bias"), vec![sq], vec![0.0; sq]);
        push(
            format!("fcssam.cam.d2{tag}.weight"),
            vec![sq, c],
            glorot(rng, sq * c, sq, c),
        );
        push(format!("fcssam.cam.d2{tag}.bias"), vec![c], vec![0.0; c]);
    };
    cam_mlp("", &mut push, rng);
    if !cfg.cam_shared_mlp {
        cam_mlp("_max", &mut push, rng);
    }
    // SC blocks: separable conv k=1 then k=3, C filters each
    for branch in ["sc_avg", "sc_max"] {
        for k in [1usize, 3] {
            let base = format!("fcssam.{branch}.sep{k}");
            push(
                format!("{base}.depthwise"),
                vec![k, k, c],
                glorot(rng, k * k * c, k * k, k * k),
            );
            push(format!("{base}.dw_bias"), vec![c], vec![0.0; c]);
            push(
                format!("{base}.pointwise"),
                vec![1, 1, c, c],
                glorot(rng, c * c, c, c),
            );
            push(format!("{base}.pw_bias"), vec![c], vec![0.0; c]);
        }
    }
    // SAM convs
    for branch in ["sam_avg", "sam_max"] {
        push(
            format!("fcssam.{branch}.kernel"),
            vec![7, 7, 1, 1],
            glorot(rng, 49, 49, 49),
        );
        push(format!("fcssam.{branch}.bias"), vec![1], vec![0.0]);
    }
    // FCS gate
    let m2 = 2 * c;
    push(
        "fcssam.fcs.alpha".into(),
        vec![m2],
        (0..m2).map(|_| rng.gen_range(0.4..0.6)).collect(),
    );
    push("fcssam.fcs.a".into(), vec![1], vec![1.0]);
    push("fcssam.fcs.q".into(), vec![1], vec![1.0]);
    push("fcssam.fcs.mu".into(), vec![1], vec![0.5]);
    // classifier head
    let m = cfg.head_inputs();
    push(
        "head.weight".into(),
        vec![m, cfg.num_classes],
        glorot(rng, m * cfg.num_classes, m, cfg.num_classes),
    );
    push("head.bias".into(), vec![cfg.num_classes], vec![0.0; cfg.num_classes]);
    out
}

/// Tape-bound view of the model for one forward/backward pass.
pub struct BoundFaNet {
    backbone_cfg: BackboneConfig,
    backbone: BackboneParams,
    pub(crate) fcssam: FcssamParams,
    head: DenseParams,
    /// Leaves in registry order; index-aligned with `FaNet::params`.
    pub tensors: Vec<Tensor>,
}

pub struct ForwardParts {
    pub logits: Tensor,
    /// GAP features, N x m.
    pub gap: Tensor,
    pub fcssam_out: Tensor,
    pub diagnostics: FcssamDiagnostics,
}

impl FaNet {
    /// Deterministic construction: same seed and config give identical
    /// parameters.
    pub fn new(config: FaNetConfig, seed: u64) -> Result<FaNet> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = param_specs(&config, &mut rng);
        Ok(FaNet { config, params })
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn set_param(&mut self, name: &str, value: Vec<f64>) -> Result<()> {
        let idx = self
            .param_index(name)
            .ok_or_else(|| Error::Invalid(format!("no parameter named '{name}'")))?;
        if value.len() != self.params[idx].value.len() {
            return Err(Error::Invalid(format!(
                "parameter '{name}' has {} elements, got {}",
                self.params[idx].value.len(),
                value.len()
            )));
        }
        self.params[idx].value = value;
        Ok(())
    }

    /// Create leaves for every parameter on `tape` and assemble the
    /// typed layer structs.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundFaNet> {
        let mut tensors = Vec::with_capacity(self.params.len());
        let mut by_name: HashMap<&str, Tensor> = HashMap::new();
        for p in &self.params {
            let t = tape.leaf(p.value.clone(), &p.shape)?;
            tensors.push(t);
            by_name.insert(p.name.as_str(), t);
        }
        let get = |name: &str| -> Result<Tensor> {
            by_name
                .get(name)
                .copied()
                .ok_or_else(|| Error::Invalid(format!("missing bound parameter '{name}'")))
        };

        let n_stages = self.config.backbone.widths.len();
        let mut stage_binds = Vec::with_capacity(n_stages);
        for i in 0..n_stages {
            stage_binds.push((
                get(&format!("backbone.stage{i}.kernel"))?,
                get(&format!("backbone.stage{i}.bias"))?,
            ));
        }
        let backbone = bind_backbone(tape, &self.config.backbone, &stage_binds)?;

        let dense_of = |tape: &Tape, w: Tensor, b: Tensor| DenseParams::new(tape, w, b);
        let d1 = dense_of(tape, get("fcssam.cam.d1.weight")?, get("fcssam.cam.d1.bias")?)?;
        let d2 = dense_of(tape, get("fcssam.cam.d2.weight")?, get("fcssam.cam.d2.bias")?)?;
        let (d1_max, d2_max) = if self.config.cam_shared_mlp {
            (None, None)
        } else {
            (
                Some(dense_of(
                    tape,
                    get("fcssam.cam.d1_max.weight")?,
                    get("fcssam.cam.d1_max.bias")?,
                )?),
                Some(dense_of(
                    tape,
                    get("fcssam.cam.d2_max.weight")?,
                    get("fcssam.cam.d2_max.bias")?,
                )?),
            )
        };
        let cam = CamParams::new(tape, d1, d2, d1_max, d2_max, self.config.reduction)?;

        let sc_block = |tape: &Tape, branch: &str| -> Result<ScBlockParams> {
            let sep = |tape: &Tape, k: usize| -> Result<SeparableConv2dParams> {
                let base = format!("fcssam.{branch}.sep{k}");
                SeparableConv2dParams::new(
                    tape,
                    get(&format!("{base}.depthwise"))?,
                    get(&format!("{base}.dw_bias"))?,
                    get(&format!("{base}.pointwise"))?,
                    get(&format!("{base}.pw_bias"))?,
                )
            };
            Ok(ScBlockParams {
                sep1: sep(tape, 1)?,
                sep3: sep(tape, 3)?,
                activation: self.config.sc_activation,
            })
        };
        let sc_avg = sc_block(tape, "sc_avg")?;
        let sc_max = sc_block(tape, "sc_max")?;

        let sam = |tape: &Tape, branch: &str| -> Result<SamParams> {
            let conv = Conv2dParams::new(
                tape,
                get(&format!("fcssam.{branch}.kernel"))?,
                get(&format!("fcssam.{branch}.bias"))?,
                1,
                Padding::Same,
            )?;
            SamParams::new(tape, conv)
        };
        let sam_avg = sam(tape, "sam_avg")?;
        let sam_max = sam(tape, "sam_max")?;

        let fcs = FcsParams::new(
            tape,
            get("fcssam.fcs.alpha")?,
            get("fcssam.fcs.a")?,
            get("fcssam.fcs.q")?,
            get("fcssam.fcs.mu")?,
            self.config.retention,
            self.config.gate_form,
        )?;

        let head = DenseParams::new(tape, get("head.weight")?, get("head.bias")?)?;

        Ok(BoundFaNet {
            backbone_cfg: self.config.backbone.clone(),
            backbone,
            fcssam: FcssamParams {
                cam,
                sc_avg,
                sc_max,
                sam_avg,
                sam_max,
                fcs,
                wiring: self.config.wiring,
            },
            head,
            tensors,
        })
    }

    /// Logits for a batch held as raw data.
    pub fn predict(&self, images: &[f64], shape: &[usize]) -> Result<Prediction> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let x = tape.leaf(images.to_vec(), shape)?;
        let logits = bound.forward(&mut tape, x)?;
        let data = tape.data(logits);
        let k = self.config.num_classes;
        let n = data.len() / k;
        let mut labels = Vec::with_capacity(n);
        let mut probabilities = Vec::with_capacity(n);
        for row in 0..n {
            let (label, probs) = argmax_probs(&data[row * k..(row + 1) * k]);
            labels.push(label);
            probabilities.push(probs);
        }
        Ok(Prediction {
            labels,
            probabilities,
        })
    }

    /// GAP features (input to the classifier), N x m, as raw data.
    pub fn extract_gap_features(&self, images: &[f64], shape: &[usize]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let x = tape.leaf(images.to_vec(), shape)?;
        let parts = bound.forward_parts(&mut tape, x)?;
        let m = self.config.head_inputs();
        let data = tape.data(parts.gap);
        Ok(data.chunks(m).map(|c| c.to_vec()).collect())
    }

    /// Everything the explain command exports, for one image.
    pub fn extract_attention_diagnostics(
        &self,
        image: &[f64],
        shape: &[usize],
    ) -> Result<DiagnosticsExport> {
        let batch_shape: Vec<usize> = match shape.len() {
            3 => {
                let mut s = vec![1];
                s.extend_from_slice(shape);
                s
            }
            4 if shape[0] == 1 => shape.to_vec(),
            _ => {
                return Err(Error::BadShape {
                    op: "extract_attention_diagnostics",
                    expected: "a single H x W x 3 image".into(),
                    shape: shape.to_vec(),
                })
            }
        };
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let x = tape.leaf(image.to_vec(), &batch_shape)?;
        let parts = bound.forward_parts(&mut tape, x)?;
        let (map_h, map_w) = self.config.backbone.out_extents();
        let logits = tape.data(parts.logits);
        let (predicted, probabilities) = argmax_probs(logits);
        Ok(DiagnosticsExport {
            cam_weights: tape.data(parts.diagnostics.cam_weights).to_vec(),
            sam_avg_map: min_max_normalize(tape.data(parts.diagnostics.sam_avg_map)),
            sam_max_map: min_max_normalize(tape.data(parts.diagnostics.sam_max_map)),
            map_h,
            map_w,
            gate_values: tape.data(parts.diagnostics.gates).to_vec(),
            selected_indices: parts.diagnostics.selected.clone(),
            predicted,
            probabilities,
        })
    }

    // ── checkpoint serialization (parameters + config as entries) ──

    pub fn to_entries(&self) -> Vec<Entry> {
        let cfg = &self.config;
        let mut entries = vec![
            Entry::scalar("meta.num_classes", cfg.num_classes as f64),
            Entry::f64(
                "meta.input",
                vec![2],
                vec![cfg.backbone.input_h as f64, cfg.backbone.input_w as f64],
            ),
            Entry::f64(
                "meta.backbone_widths",
                vec![cfg.backbone.widths.len()],
                cfg.backbone.widths.iter().map(|&w| w as f64).collect(),
            ),
            Entry::f64(
                "meta.backbone_strides",
                vec![cfg.backbone.strides.len()],
                cfg.backbone.strides.iter().map(|&s| s as f64).collect(),
            ),
            Entry::scalar("meta.reduction", cfg.reduction as f64),
            Entry::scalar("meta.retention", cfg.retention),
            Entry::scalar(
                "meta.wiring",
                match cfg.wiring {
                    Wiring::CamFirst => 0.0,
                    Wiring::CamIntoBranches => 1.0,
                },
            ),
            Entry::scalar(
                "meta.gate_form",
                match cfg.gate_form {
                    GateForm::Paper => 0.0,
                    GateForm::Standard => 1.0,
                },
            ),
            Entry::scalar(
                "meta.sc_activation",
                match cfg.sc_activation {
                    Activation::Relu => 0.0,
                    _ => 1.0,
                },
            ),
            Entry::scalar("meta.cam_shared_mlp", if cfg.cam_shared_mlp { 1.0 } else { 0.0 }),
        ];
        for p in &self.params {
            entries.push(Entry::f64(
                format!("param.{}", p.name),
                p.shape.clone(),
                p.value.clone(),
            ));
        }
        entries
    }

    pub fn from_entries(entries: &[Entry]) -> Result<FaNet> {
        let scalar = |name: &str| -> Result<f64> {
            crate::container::lookup(entries, name)
                .and_then(|e| e.data.first().copied())
                .ok_or_else(|| {
                    Error::IncompatibleCheckpoint(format!("missing config entry '{name}'"))
                })
        };
        let vector = |name: &str| -> Result<Vec<f64>> {
            crate::container::lookup(entries, name)
                .map(|e| e.data.clone())
                .ok_or_else(|| {
                    Error::IncompatibleCheckpoint(format!("missing config entry '{name}'"))
                })
        };
        let input = vector("meta.input")?;
        if input.len() != 2 {
            return Err(Error::IncompatibleCheckpoint(
                "meta.input must have two extents".into(),
            ));
        }
        let config = FaNetConfig {
            num_classes: scalar("meta.num_classes")? as usize,
            backbone: BackboneConfig {
                widths: vector("meta.backbone_widths")?.iter().map(|&w| w as usize).collect(),
                strides: vector("meta.backbone_strides")?.iter().map(|&s| s as usize).collect(),
                input_h: input[0] as usize,
                input_w: input[1] as usize,
            },
            reduction: scalar("meta.reduction")? as usize,
            retention: scalar("meta.retention")?,
            wiring: if scalar("meta.wiring")? == 0.0 {
                Wiring::CamFirst
            } else {
                Wiring::CamIntoBranches
            },
            gate_form: if scalar("meta.gate_form")? == 0.0 {
                GateForm::Paper
            } else {
                GateForm::Standard
            },
            sc_activation: if scalar("meta.sc_activation")? == 0.0 {
                Activation::Relu
            } else {
                Activation::None
            },
            cam_shared_mlp: scalar("meta.cam_shared_mlp")? != 0.0,
        };
        // build with the right structure, then overwrite every parameter
        let mut model = FaNet::new(config, 0)?;
        for p in &mut model.params {
            let key = format!("param.{}", p.name);
            let e = crate::container::lookup(entries, &key).ok_or_else(|| {
                Error::IncompatibleCheckpoint(format!("missing parameter '{}'", p.name))
            })?;
            if e.shape != p.shape {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "parameter '{}': checkpoint shape {:?} does not match model shape {:?}",
                    p.name, e.shape, p.shape
                )));
            }
            p.value = e.data.clone();
        }
        Ok(model)
    }
}

impl BoundFaNet {
    pub fn forward(&self, tape: &mut Tape, images: Tensor) -> Result<Tensor> {
        self.forward_parts(tape, images).map(|p| p.logits)
    }

    pub fn forward_parts(&self, tape: &mut Tape, images: Tensor) -> Result<ForwardParts> {
        let f_enc = backbone_forward(tape, images, &self.backbone_cfg, &self.backbone)?;
        let (fcssam_out, diagnostics) = fcssam_forward(tape, f_enc, &self.fcssam)?;
        let gap = global_pool(tape, fcssam_out, PoolMode::Avg)?;
        let logits = dense(tape, gap, &self.head, Activation::None)?;
        Ok(ForwardParts {
            logits,
            gap,
            fcssam_out,
            diagnostics,
        })
    }
}

pub struct Prediction {
    pub labels: Vec<usize>,
    pub probabilities: Vec<Vec<f64>>,
}

/// Softmax of one logit row plus its argmax; ties go to the lowest
/// class index.
pub fn argmax_probs(logits: &[f64]) -> (usize, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    (best, probs)
}


pub struct DiagnosticsExport {
    pub cam_weights: Vec<f64>,
    pub sam_avg_map: Vec<f64>,
    pub sam_max_map: Vec<f64>,
    pub map_h: usize,
    pub map_w: usize,
    pub gate_values: Vec<f64>,
    pub selected_indices: Vec<usize>,
    pub predicted: usize,
    pub probabilities: Vec<f64>,
}
