//! INI experiment configs.
//!
//! Every key has a default; unknown sections and keys are rejected. The
//! resolved config is rendered back to INI text that parses to the same value.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ini::Ini;
use sha2::{Digest, Sha256};

use crate::blocks::{Activation, AlphaMode, ConvKind, DownsampleMode, UpsampleMode};
use crate::data::DatasetSpec;
use crate::detector::{HeadMode, DEFAULT_NMS_IOU};
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::necks::NeckKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpsampleKind {
    HardNn,
    Sni,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub widths: Vec<usize>,
    pub depths: Vec<usize>,
    pub neck: NeckKind,
    pub neck_depth: usize,
    pub ihp_depth: usize,
    pub head: HeadMode,
    pub head_width: usize,
    pub num_classes: usize,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlocksConfig {
    pub upsample: UpsampleKind,
    pub downsample: DownsampleMode,
    pub conv: ConvKind,
    pub alpha_mode: AlphaMode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub wd: f64,
    pub seed: u64,
    pub flip: bool,
    /// Linear learning-rate ramp before the cosine decay.
    pub warmup_epochs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Existing dataset files; when unset the split is synthesized.
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub image_size: usize,
    pub train_count: usize,
    pub val_count: usize,
    pub mix: [f64; 3],
    pub noise: f64,
    pub max_objects: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub conf: f64,
    pub nms_iou: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub blocks: BlocksConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelConfig {
                widths: vec![16, 32, 64, 128, 256],
                depths: vec![0, 1, 1, 1, 1],
                neck: NeckKind::PanetSimplified,
                neck_depth: 1,
                ihp_depth: 2,
                head: HeadMode::Coupled,
                head_width: 64,
                num_classes: 3,
                activation: Activation::Silu,
            },
            blocks: BlocksConfig {
                upsample: UpsampleKind::HardNn,
                downsample: DownsampleMode::StridedConv,
                conv: ConvKind::Plain,
                alpha_mode: AlphaMode::Area,
            },
            train: TrainConfig {
                epochs: 100,
                batch: 16,
                lr: 0.01,
                momentum: 0.937,
                wd: 5e-4,
                seed: 0,
                flip: true,
                warmup_epochs: 1,
            },
            data: DataConfig {
                train: None,
                val: None,
                image_size: 64,
                train_count: 2000,
                val_count: 200,
                mix: [1.0 / 3.0; 3],
                noise: 0.05,
                max_objects: 4,
                seed: 0,
            },
            eval: EvalConfig {
                conf: 0.25,
                nms_iou: DEFAULT_NMS_IOU,
            },
        }
    }
}

fn bad(section: &str, key: &str, value: &str, expected: &str) -> Error {
    Error::config(format!("[{section}] {key} = {value:?}: expected {expected}"))
}

fn parse_num<T: std::str::FromStr>(section: &str, key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| bad(section, key, v, "a number"))
}

fn parse_list<T: std::str::FromStr>(section: &str, key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|p| parse_num(section, key, p)).collect()
}

fn parse_bool(section: &str, key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(bad(section, key, v, "true or false")),
    }
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

pub fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Silu => "silu",
        Activation::LeakyRelu => "leaky_relu",
        Activation::Identity => "identity",
    }
}

pub fn conv_name(c: ConvKind) -> &'static str {
    match c {
        ConvKind::Plain => "plain",
        ConvKind::GsConv => "gsconv",
        ConvKind::Gse1 => "gse1",
        ConvKind::Gse2 => "gse2",
    }
}

pub fn downsample_name(d: DownsampleMode) -> &'static str {
    match d {
        DownsampleMode::StridedConv => "strided_conv",
        DownsampleMode::Esd1 => "esd1",
        DownsampleMode::Esd2 => "esd2",
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::config(format!("INI syntax: {e}")))?;
        let mut cfg = ExperimentConfig::default();
        for (section, props) in ini.iter() {
            let Some(section) = section else {
                if let Some((k, _)) = props.iter().next() {
                    return Err(Error::config(format!("key {k:?} appears before any section")));
                }
                continue;
            };
            for (key, v) in props.iter() {
                cfg.set(section, key, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies one `key = value` override.
    pub fn set(&mut self, section: &str, key: &str, v: &str) -> Result<()> {
        let s = section;
        let v = v.trim();
        match (s, key) {
            ("model", "backbone_widths") => self.model.widths = parse_list(s, key, v)?,
            ("model", "backbone_depths") => self.model.depths = parse_list(s, key, v)?,
            ("model", "neck") => {
                self.model.neck =
                    NeckKind::parse(v).ok_or_else(|| bad(s, key, v, "none, ihp, fpn, panet_simplified or sa"))?
            }
            ("model", "neck_depth") => self.model.neck_depth = parse_num(s, key, v)?,
            ("model", "ihp_depth") => self.model.ihp_depth = parse_num(s, key, v)?,
            ("model", "head") => {
                self.model.head = HeadMode::parse(v).ok_or_else(|| bad(s, key, v, "coupled or decoupled"))?
            }
            ("model", "head_width") => self.model.head_width = parse_num(s, key, v)?,
            ("model", "num_classes") => self.model.num_classes = parse_num(s, key, v)?,
            ("model", "activation") => {
                self.model.activation = match v {
                    "silu" => Activation::Silu,
                    "leaky_relu" => Activation::LeakyRelu,
                    _ => return Err(bad(s, key, v, "silu or leaky_relu")),
                }
            }
            ("blocks", "upsample") => {
                self.blocks.upsample = match v {
                    "hard_nn" => UpsampleKind::HardNn,
                    "sni" => UpsampleKind::Sni,
                    _ => return Err(bad(s, key, v, "hard_nn or sni")),
                }
            }
            ("blocks", "downsample") => {
                self.blocks.downsample = match v {
                    "strided_conv" => DownsampleMode::StridedConv,
                    "esd1" => DownsampleMode::Esd1,
                    "esd2" => DownsampleMode::Esd2,
                    _ => return Err(bad(s, key, v, "strided_conv, esd1 or esd2")),
                }
            }
            ("blocks", "conv") => {
                self.blocks.conv = match v {
                    "plain" => ConvKind::Plain,
                    "gsconv" => ConvKind::GsConv,
                    "gse1" => ConvKind::Gse1,
                    "gse2" => ConvKind::Gse2,
                    _ => return Err(bad(s, key, v, "plain, gsconv, gse1 or gse2")),
                }
            }
            ("blocks", "alpha_mode") => {
                self.blocks.alpha_mode = match v {
                    "area" => AlphaMode::Area,
                    "linear" => AlphaMode::Linear,
                    _ => return Err(bad(s, key, v, "area or linear")),
                }
            }
            ("train", "epochs") => self.train.epochs = parse_num(s, key, v)?,
            ("train", "batch") => self.train.batch = parse_num(s, key, v)?,
            ("train", "lr") => self.train.lr = parse_num(s, key, v)?,
            ("train", "momentum") => self.train.momentum = parse_num(s, key, v)?,
            ("train", "wd") => self.train.wd = parse_num(s, key, v)?,
            ("train", "seed") => self.train.seed = parse_num(s, key, v)?,
            ("train", "flip") => self.train.flip = parse_bool(s, key, v)?,
            ("train", "warmup_epochs") => self.train.warmup_epochs = parse_num(s, key, v)?,
            ("data", "train") => self.data.train = (!v.is_empty()).then(|| PathBuf::from(v)),
            ("data", "val") => self.data.val = (!v.is_empty()).then(|| PathBuf::from(v)),
            ("data", "image_size") => self.data.image_size = parse_num(s, key, v)?,
            ("data", "train_count") => self.data.train_count = parse_num(s, key, v)?,
            ("data", "val_count") => self.data.val_count = parse_num(s, key, v)?,
            ("data", "mix") => {
                let m: Vec<f64> = parse_list(s, key, v)?;
                self.data.mix = m.try_into().map_err(|_| bad(s, key, v, "three fractions"))?;
            }
            ("data", "noise") => self.data.noise = parse_num(s, key, v)?,
            ("data", "max_objects") => self.data.max_objects = parse_num(s, key, v)?,
            ("data", "seed") => self.data.seed = parse_num(s, key, v)?,
            ("eval", "conf") => self.eval.conf = parse_num(s, key, v)?,
            ("eval", "nms_iou") => self.eval.nms_iou = parse_num(s, key, v)?,
            ("model" | "blocks" | "train" | "data" | "eval", _) => {
                return Err(Error::config(format!("unknown key {key:?} in [{section}]")))
            }
            _ => return Err(Error::config(format!("unknown section [{section}]"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.widths.len() != 5 || m.depths.len() != 5 {
            return Err(Error::config("backbone_widths and backbone_depths need 5 entries each"));
        }
        if m.num_classes == 0 || m.head_width == 0 {
            return Err(Error::config("num_classes and head_width must be positive"));
        }
        let t = &self.train;
        if t.batch == 0 {
            return Err(Error::config("batch must be at least 1"));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) || !(0.0..1.0).contains(&t.momentum) || !(t.wd >= 0.0) {
            return Err(Error::config("lr must be positive, momentum in [0, 1), wd non-negative"));
        }
        if !(0.0..=1.0).contains(&self.eval.conf) || !(0.0..=1.0).contains(&self.eval.nms_iou) {
            return Err(Error::config("conf and nms_iou must lie in [0, 1]"));
        }
        self.dataset_spec(0, 1).validate()
    }

    pub fn model_spec(&self) -> ModelSpec {
        let m = &self.model;
        ModelSpec {
            widths: m.widths.clone(),
            depths: m.depths.clone(),
            neck: m.neck,
            neck_depth: m.neck_depth,
            ihp_depth: m.ihp_depth,
            head: m.head,
            head_width: m.head_width,
            num_classes: m.num_classes,
            upsample: match self.blocks.upsample {
                UpsampleKind::HardNn => UpsampleMode::HardNn,
                UpsampleKind::Sni => UpsampleMode::Sni(self.blocks.alpha_mode),
            },
            downsample: self.blocks.downsample,
            conv: self.blocks.conv,
            act: m.activation,
        }
    }

    /// Synthesis spec for one split; `split` 0 is train, 1 is val.
    pub fn dataset_spec(&self, split: u64, count: usize) -> DatasetSpec {
        DatasetSpec {
            seed: self.data.seed.wrapping_mul(2).wrapping_add(split),
            count,
            image_size: self.data.image_size,
            mix: self.data.mix,
            noise: self.data.noise,
            max_objects: self.data.max_objects,
        }
    }

    /// Fully resolved config as INI text.
    pub fn render(&self) -> String {
        let m = &self.model;
        let b = &self.blocks;
        let t = &self.train;
        let d = &self.data;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut s = String::new();
        let _ = writeln!(s, "[model]");
        let _ = writeln!(s, "backbone_widths = {}", join(&m.widths));
        let _ = writeln!(s, "backbone_depths = {}", join(&m.depths));
        let _ = writeln!(s, "neck = {}", m.neck.name());
        let _ = writeln!(s, "neck_depth = {}", m.neck_depth);
        let _ = writeln!(s, "ihp_depth = {}", m.ihp_depth);
        let _ = writeln!(s, "head = {}", m.head.name());
        let _ = writeln!(s, "head_width = {}", m.head_width);
        let _ = writeln!(s, "num_classes = {}", m.num_classes);
        let _ = writeln!(s, "activation = {}", activation_name(m.activation));
        let _ = writeln!(s, "\n[blocks]");
        let _ = writeln!(
            s,
            "upsample = {}",
            match b.upsample {
                UpsampleKind::HardNn => "hard_nn",
                UpsampleKind::Sni => "sni",
            }
        );
        let _ = writeln!(s, "downsample = {}", downsample_name(b.downsample));
        let _ = writeln!(s, "conv = {}", conv_name(b.conv));
        let _ = writeln!(
            s,
            "alpha_mode = {}",
            match b.alpha_mode {
                AlphaMode::Area => "area",
                AlphaMode::Linear => "linear",
            }
        );
        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(s, "epochs = {}", t.epochs);
        let _ = writeln!(s, "batch = {}", t.batch);
        let _ = writeln!(s, "lr = {}", t.lr);
        let _ = writeln!(s, "momentum = {}", t.momentum);
        let _ = writeln!(s, "wd = {}", t.wd);
        let _ = writeln!(s, "seed = {}", t.seed);
        let _ = writeln!(s, "flip = {}", t.flip);
        let _ = writeln!(s, "warmup_epochs = {}", t.warmup_epochs);
        let _ = writeln!(s, "\n[data]");
        let _ = writeln!(s, "train = {}", path(&d.train));
        let _ = writeln!(s, "val = {}", path(&d.val));
        let _ = writeln!(s, "image_size = {}", d.image_size);
        let _ = writeln!(s, "train_count = {}", d.train_count);
        let _ = writeln!(s, "val_count = {}", d.val_count);
        let _ = writeln!(s, "mix = {}", join(&d.mix));
        let _ = writeln!(s, "noise = {}", d.noise);
        let _ = writeln!(s, "max_objects = {}", d.max_objects);
        let _ = writeln!(s, "seed = {}", d.seed);
        let _ = writeln!(s, "\n[eval]");
        let _ = writeln!(s, "conf = {}", self.eval.conf);
        let _ = writeln!(s, "nms_iou = {}", self.eval.nms_iou);
        s
    }

    /// SHA-256 of the rendered config, hex.
    pub fn hash(&self) -> String {
        Sha256::digest(self.render().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&c.render()).unwrap(), c);
    }

    #[test]
    fn overrides_apply() {
        let c = ExperimentConfig::parse(
            "[model]\nneck = sa\nhead = decoupled\n[blocks]\nupsample = sni\nconv = gse2\n[data]\nmix = 1,0,0\n",
        )
        .unwrap();
        assert_eq!(c.model.neck, NeckKind::Sa);
        assert_eq!(c.model_spec().upsample, UpsampleMode::Sni(AlphaMode::Area));
        assert_eq!(c.data.mix, [1.0, 0.0, 0.0]);
        assert_eq!(ExperimentConfig::parse(&c.render()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_and_sections_are_rejected() {
        assert!(ExperimentConfig::parse("[model]\nnek = fpn\n").is_err());
        assert!(ExperimentConfig::parse("[optim]\nlr = 1\n").is_err());
        assert!(ExperimentConfig::parse("lr = 1\n").is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(ExperimentConfig::parse("[model]\nbackbone_widths = 1,2,3\n").is_err());
        assert!(ExperimentConfig::parse("[blocks]\nupsample = bilinear\n").is_err());
        assert!(ExperimentConfig::parse("[data]\nmix = 0.5,0.5,0.5\n").is_err());
        assert!(ExperimentConfig::parse("[eval]\nconf = 2\n").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.train.seed = 1;
        assert_eq!(a.hash(), ExperimentConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
