//! Flat `key = value` run configuration. One file describes a whole
//! run so experiments stay reproducible from a single artifact; flags
//! on the command line only carry paths and overrides.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use crate::attention::{GateForm, Wiring};
use crate::backbone::BackboneConfig;
use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::model::FaNetConfig;
use crate::nn::Activation;
use crate::train::TrainConfig;

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub data_root: PathBuf,
    pub out_dir: PathBuf,
    pub input_height: usize,
    pub input_width: usize,
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub reduction: usize,
    pub retention: f64,
    pub wiring: Wiring,
    pub gate_form: GateForm,
    pub sc_activation: Activation,
    pub cam_shared_mlp: bool,
    pub augment: bool,
    pub rotation_degrees: f64,
    pub shift_fraction: f64,
    pub flip_probability: f64,
    pub zoom_fraction: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub val_fraction: f64,
    /// 0 disables early stopping.
    pub early_stop_patience: usize,
    /// 0 disables periodic checkpoints (best/last are always kept).
    pub checkpoint_every: usize,
    pub class_weights: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_root: PathBuf::new(),
            out_dir: PathBuf::new(),
            input_height: 32,
            input_width: 32,
            widths: vec![8, 16],
            strides: vec![2, 2],
            reduction: 4,
            retention: 0.8,
            wiring: Wiring::CamFirst,
            gate_form: GateForm::Paper,
            sc_activation: Activation::Relu,
            cam_shared_mlp: true,
            augment: true,
            rotation_degrees: 15.0,
            shift_fraction: 0.10,
            flip_probability: 0.5,
            zoom_fraction: 0.10,
            lr: 1e-4,
            batch_size: 48,
            epochs: 50,
            seed: 0,
            val_fraction: 0.15,
            early_stop_patience: 0,
            checkpoint_every: 0,
            class_weights: false,
        }
    }
}

impl RunConfig {
    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            widths: self.widths.clone(),
            strides: self.strides.clone(),
            input_h: self.input_height,
            input_w: self.input_width,
        }
    }

    pub fn model_config(&self, num_classes: usize) -> FaNetConfig {
        FaNetConfig {
            num_classes,
            backbone: self.backbone_config(),
            reduction: self.reduction,
            retention: self.retention,
            wiring: self.wiring,
            gate_form: self.gate_form,
            sc_activation: self.sc_activation,
            cam_shared_mlp: self.cam_shared_mlp,
        }
    }

    pub fn augment_config(&self) -> Option<AugmentConfig> {
        self.augment.then(|| AugmentConfig {
            rotation_degrees: self.rotation_degrees,
            shift_fraction: self.shift_fraction,
            flip_probability: self.flip_probability,
            zoom_fraction: self.zoom_fraction,
            seed: self.seed,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
            augment: self.augment_config(),
            class_weights: self.class_weights,
            checkpoint_every: (self.checkpoint_every > 0).then_some(self.checkpoint_every),
            early_stop_patience: (self.early_stop_patience > 0).then_some(self.early_stop_patience),
        }
    }

    /// Structural validation of everything that does not need the
    /// dataset. The class count is only known after indexing, so model
    /// checks run with a placeholder of 2 here and again at bind time.
    pub fn validate(&self) -> Result<()> {
        self.model_config(2).validate()?;
        self.train_config().validate()?;
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::ConfigValue(format!(
                "val_fraction must lie in (0, 1), got {}",
                self.val_fraction
            )));
        }
        if self.data_root.as_os_str().is_empty() {
            return Err(Error::ConfigValue("data_root is required".into()));
        }
        if self.out_dir.as_os_str().is_empty() {
            return Err(Error::ConfigValue("out_dir is required".into()));
        }
        Ok(())
    }
}

fn bad(line: usize, message: String) -> Error {
    Error::Config { line, message }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| bad(line, format!("bad value for `{key}`: {e}")))
}

fn parse_bool(key: &str, value: &str, line: usize) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(bad(
            line,
            format!("bad value for `{key}`: expected true or false, got `{other}`"),
        )),
    }
}

fn parse_usize_list(key: &str, value: &str, line: usize) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|part| parse_num(key, part.trim(), line))
        .collect()
}

/// Parse and fully validate a config file. Nothing else may run until
/// this succeeds, so a bad config can never leave partial outputs.
pub fn parse_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::ConfigValue(format!("cannot read {}: {e}", path.display())))?;
    parse_run_config_str(&text)
}

pub fn parse_run_config_str(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut seen: HashSet<String> = HashSet::new();
    let mut have_root = false;
    let mut have_out = false;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| bad(line, "expected `key = value`".into()))?;
        let key = key.trim();
        let value = value.trim();
        if !seen.insert(key.to_string()) {
            return Err(bad(line, format!("duplicate key `{key}`")));
        }
        match key {
            "data_root" => {
                cfg.data_root = PathBuf::from(value);
                have_root = true;
            }
            "out_dir" => {
                cfg.out_dir = PathBuf::from(value);
                have_out = true;
            }
            "input_height" => cfg.input_height = parse_num(key, value, line)?,
            "input_width" => cfg.input_width = parse_num(key, value, line)?,
            "widths" => cfg.widths = parse_usize_list(key, value, line)?,
            "strides" => cfg.strides = parse_usize_list(key, value, line)?,
            "reduction" => cfg.reduction = parse_num(key, value, line)?,
            "retention" => cfg.retention = parse_num(key, value, line)?,
            "wiring" => {
                cfg.wiring = match value {
                    "cam_first" => Wiring::CamFirst,
                    "cam_into_branches" => Wiring::CamIntoBranches,
                    other => {
                        return Err(bad(
                            line,
                            format!(
                                "bad value for `wiring`: expected cam_first or \
                                 cam_into_branches, got `{other}`"
                            ),
                        ))
                    }
                }
            }
            "gate" => {
                cfg.gate_form = match value {
                    "paper" => GateForm::Paper,
                    "standard" => GateForm::Standard,
                    other => {
                        return Err(bad(
                            line,
                            format!("bad value for `gate`: expected paper or standard, got `{other}`"),
                        ))
                    }
                }
            }
            "sc_activation" => {
                cfg.sc_activation = match value {
                    "relu" => Activation::Relu,
                    "none" => Activation::None,
                    other => {
                        return Err(bad(
                            line,
                            format!(
                                "bad value for `sc_activation`: expected relu or none, got `{other}`"
                            ),
                        ))
                    }
                }
            }
            "cam_shared_mlp" => cfg.cam_shared_mlp = parse_bool(key, value, line)?,
            "augment" => cfg.augment = parse_bool(key, value, line)?,
            "rotation_degrees" => cfg.rotation_degrees = parse_num(key, value, line)?,
            "shift_fraction" => cfg.shift_fraction = parse_num(key, value, line)?,
            "flip_probability" => cfg.flip_probability = parse_num(key, value, line)?,
            "zoom_fraction" => cfg.zoom_fraction = parse_num(key, value, line)?,
            "lr" => cfg.lr = parse_num(key, value, line)?,
            "batch_size" => cfg.batch_size = parse_num(key, value, line)?,
            "epochs" => cfg.epochs = parse_num(key, value, line)?,
            "seed" => cfg.seed = parse_num(key, value, line)?,
            "val_fraction" => cfg.val_fraction = parse_num(key, value, line)?,
            "early_stop_patience" => cfg.early_stop_patience = parse_num(key, value, line)?,
            "checkpoint_every" => cfg.checkpoint_every = parse_num(key, value, line)?,
            "class_weights" => cfg.class_weights = parse_bool(key, value, line)?,
            unknown => return Err(bad(line, format!("unknown key `{unknown}`"))),
        }
    }
    if !have_root {
        return Err(Error::ConfigValue("data_root is required".into()));
    }
    if !have_out {
        return Err(Error::ConfigValue("out_dir is required".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}
