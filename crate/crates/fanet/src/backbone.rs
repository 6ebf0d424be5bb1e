//! Small configurable CNN producing the encoded feature map f_enc, plus
//! an import path for feature maps computed elsewhere (e.g. by a real
//! pretrained backbone) in the shared container format.

use std::path::Path;

use crate::container::read_container;
use crate::error::{Error, Result};
use crate::nn::{conv2d, relu, Conv2dParams, Padding};
use crate::tensor::{Tape, Tensor};

/// Stage widths and strides. Stage i applies a 3x3 conv with
/// widths[i] filters at strides[i], then ReLU. Empty widths means the
/// image itself is the feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub input_h: usize,
    pub input_w: usize,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() != self.strides.len() {
            return Err(Error::Invalid(format!(
                "backbone: {} widths but {} strides",
                self.widths.len(),
                self.strides.len()
            )));
        }
        if let Some(&w) = self.widths.iter().find(|&&w| w == 0) {
            return Err(Error::Invalid(format!("backbone: zero stage width {w}")));
        }
        if let Some(&s) = self.strides.iter().find(|&&s| s != 1 && s != 2) {
            return Err(Error::Invalid(format!(
                "backbone: stride {s} outside {{1, 2}}"
            )));
        }
        let total: usize = self.strides.iter().product();
        if self.input_h == 0
            || self.input_w == 0
            || self.input_h % total != 0
            || self.input_w % total != 0
        {
            return Err(Error::Invalid(format!(
                "backbone: input {}x{} not divisible by total stride {total}",
                self.input_h, self.input_w
            )));
        }
        Ok(())
    }

    /// Channels of the produced feature map (3 when there are no stages).
    pub fn out_channels(&self) -> usize {
        self.widths.last().copied().unwrap_or(3)
    }

    pub fn out_extents(&self) -> (usize, usize) {
        let total: usize = self.strides.iter().product();
        (self.input_h / total, self.input_w / total)
    }
}

pub struct BackboneParams {
    pub stages: Vec<Conv2dParams>,
}

/// Stack of 3x3 conv + ReLU stages per the config.
pub fn backbone_forward(
    tape: &mut Tape,
    image: Tensor,
    cfg: &BackboneConfig,
    params: &BackboneParams,
) -> Result<Tensor> {
    let shape = tape.shape(image).to_vec();
    if shape.len() != 4 || shape[3] != 3 {
        return Err(Error::BadShape {
            op: "backbone_forward",
            expected: "N x H x W x 3 image batch".into(),
            shape,
        });
    }
    if shape[1] != cfg.input_h || shape[2] != cfg.input_w {
        return Err(Error::ShapeMismatch {
            op: "backbone_forward",
            lhs: shape,
            rhs: vec![cfg.input_h, cfg.input_w],
        });
    }
    if params.stages.len() != cfg.widths.len() {
        return Err(Error::Invalid(format!(
            "backbone: {} stage params for {} configured stages",
            params.stages.len(),
            cfg.widths.len()
        )));
    }
    let mut y = image;
    for stage in &params.stages {
        let z = conv2d(tape, y, stage)?;
        y = relu(tape, z)?;
    }
    Ok(y)
}

/// Shape of each stage kernel: 3 x 3 x Cin x Cout.
pub fn stage_kernel_shapes(cfg: &BackboneConfig) -> Vec<Vec<usize>> {
    let mut cin = 3;
    cfg.widths
        .iter()
        .map(|&cout| {
            let s = vec![3, 3, cin, cout];
            cin = cout;
            s
        })
        .collect()
}

/// Assemble stage params from tensors already on the tape, in
/// (kernel, bias) order per stage.
pub fn bind_backbone(
    tape: &Tape,
    cfg: &BackboneConfig,
    tensors: &[(Tensor, Tensor)],
) -> Result<BackboneParams> {
    let mut stages = Vec::with_capacity(tensors.len());
    for (i, &(kernel, bias)) in tensors.iter().enumerate() {
        let p = Conv2dParams::new(tape, kernel, bias, cfg.strides[i], Padding::Same)?;
        stages.push(p);
    }
    Ok(BackboneParams { stages })
}

/// Load a precomputed feature map as a constant (no-gradient leaf is
/// still a leaf; nothing feeds its gradient back anywhere).
pub fn load_feature_file(tape: &mut Tape, path: &Path) -> Result<Tensor> {
    let entries = read_container(path)?;
    if entries.len() != 1 {
        return Err(Error::Data(format!(
            "{}: expected exactly one tensor entry, found {}",
            path.display(),
            entries.len()
        )));
    }
    let e = &entries[0];
    if e.shape.len() != 4 {
        return Err(Error::Data(format!(
            "{}: feature tensor must be rank 4 (N x H x W x C), got rank {}",
            path.display(),
            e.shape.len()
        )));
    }
    tape.leaf(e.data.clone(), &e.shape)
}
