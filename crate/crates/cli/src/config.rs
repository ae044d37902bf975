//! Run configuration: one TOML document with `[dataset] [model] [train]
//! [eval]` sections, a root seed and a format version.

use std::path::{Path, PathBuf};

use geopretrain_core::seed;
use geopretrain_nn::detection::DetTrainConfig;
use geopretrain_nn::heads::SimSiamDims;
use geopretrain_nn::segmentation::{SegHeadSpec, SegTrainConfig};
use geopretrain_nn::simsiam::SimSiamConfig;
use geopretrain_nn::supervised::SupTrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::Failure;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PretrainMode {
    Supervised,
    Simsiam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Seg,
    Det,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    /// One sub-directory per class.
    Folder,
    /// `<id>_sat.*` images with `<id>_mask.png` color masks.
    Segmentation,
    /// JSON box annotations plus an image directory.
    Detection,
    /// Generated in memory from the seed.
    #[default]
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    pub count: usize,
    pub size: u32,
    pub classes: usize,
    /// Cell size of segmentation layouts.
    pub cell: u32,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        Self {
            count: 16,
            size: 64,
            classes: 2,
            cell: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    /// Short name used in artifact names, e.g. `patternnet`.
    pub name: String,
    pub root: Option<PathBuf>,
    /// Box annotations (training set, or everything when no eval file).
    pub annotations: Option<PathBuf>,
    pub eval_annotations: Option<PathBuf>,
    /// Color table JSON; the DeepGlobe table when absent.
    pub color_table: Option<PathBuf>,
    /// Map unmatched mask colors to the unknown class instead of failing.
    pub lenient_colors: bool,
    /// Ground resolution bounds in meters per pixel, for `profile`.
    pub min_resolution: Option<f64>,
    pub max_resolution: Option<f64>,
    pub synthetic: SyntheticSection,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Synthetic,
            name: "synthetic".into(),
            root: None,
            annotations: None,
            eval_annotations: None,
            color_table: None,
            lenient_colors: false,
            min_resolution: None,
            max_resolution: None,
            synthetic: SyntheticSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorOptions {
    pub momentum: f64,
    pub weight_decay: f64,
    pub min_size: u32,
    pub max_size: u32,
    pub trainable_stages: usize,
}

impl Default for DetectorOptions {
    fn default() -> Self {
        let d = geopretrain_nn::detection::BackendOptions::default();
        Self {
            momentum: d.momentum,
            weight_decay: d.weight_decay,
            min_size: d.min_size,
            max_size: d.max_size,
            trainable_stages: d.trainable_stages,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub backbone: String,
    /// Input checkpoint: the generalist for `pretrain`, a pre-trained
    /// backbone for `finetune`, a fine-tuned model for `evaluate`.
    pub init: Option<PathBuf>,
    /// Display name in results tables; derived from the checkpoint when
    /// absent.
    pub name: Option<String>,
    pub head: Option<SegHeadSpec>,
    pub simsiam: Option<SimSiamDims>,
    pub detector: String,
    /// Program and arguments of the `external` detector.
    pub detector_command: Option<String>,
    pub detector_options: DetectorOptions,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            backbone: "resnet50".into(),
            init: None,
            name: None,
            head: None,
            simsiam: None,
            detector: "echo".into(),
            detector_command: None,
            detector_options: DetectorOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub batch_size: usize,
    pub workers: usize,
    /// Number of eval images written as `<id>_pred.png`.
    pub overlays: usize,
    /// Sliding-window tile for large images; whole-image inference if unset.
    pub tile: Option<u32>,
    pub overlap: u32,
    /// Held-out share when no separate eval annotations are given.
    pub eval_fraction: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            batch_size: 2,
            workers: 1,
            overlays: 4,
            tile: None,
            overlap: 128,
            eval_fraction: 0.2,
        }
    }
}

/// The file as written by a user. `[train]` stays untyped until the command
/// picks its schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<PretrainMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<Task>,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: toml::Table,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainSettings {
    Supervised(SupTrainConfig),
    Simsiam(SimSiamConfig),
    Seg(SegTrainConfig),
    Det(DetTrainConfig),
    None,
}

/// Component seeds fanned out from the root seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Seeds {
    pub root: u64,
    pub model: u64,
    pub train: u64,
    pub data: u64,
}

impl Seeds {
    pub fn from_root(root: u64) -> Self {
        Self {
            root,
            model: seed::derive(root, "model"),
            train: seed::derive(root, "train"),
            data: seed::derive(root, "data"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Pretrain,
    Finetune,
    Evaluate,
    Profile,
}

/// A validated configuration with every default spelled out.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub config: RunConfig,
    pub train: TrainSettings,
    pub seeds: Seeds,
}

impl Resolved {
    /// The resolved configuration as TOML; enough to rerun the command.
    pub fn to_toml(&self) -> String {
        toml::to_string(&self.config).expect("config serializes")
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Validation(anyhow::anyhow!(msg.into()))
}

/// Parses a document, without resolving it.
pub fn parse(text: &str) -> Result<RunConfig, Failure> {
    toml::from_str(text).map_err(|e| invalid(format!("config: {e}")))
}

/// Applies `key.path=value` overrides. The value is read as a TOML literal
/// and falls back to a bare string.
pub fn apply_overrides(doc: &mut toml::Table, overrides: &[String]) -> Result<(), Failure> {
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| invalid(format!("--set `{o}`: expected key=value")))?;
        let value: toml::Value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let parts: Vec<&str> = key.trim().split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(invalid(format!("--set `{o}`: empty key segment")));
        }
        let mut table = &mut *doc;
        for p in &parts[..parts.len() - 1] {
            let entry = table
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            table = entry
                .as_table_mut()
                .ok_or_else(|| invalid(format!("--set `{o}`: `{p}` is not a table")))?;
        }
        table.insert(parts[parts.len() - 1].to_string(), value);
    }
    Ok(())
}

/// Reads a config file, applies overrides and makes relative paths
/// absolute against the file's directory.
pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
    let mut doc: toml::Table = text
        .parse()
        .map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    apply_overrides(&mut doc, overrides)?;
    let mut cfg: RunConfig = toml::Value::Table(doc)
        .try_into()
        .map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let base = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let base = std::path::absolute(&base).unwrap_or(base);
    absolutize(&mut cfg, &base);
    Ok(cfg)
}

fn absolutize(cfg: &mut RunConfig, base: &Path) {
    let fix = |p: &mut Option<PathBuf>| {
        if let Some(v) = p {
            if v.is_relative() {
                *v = base.join(&*v);
            }
        }
    };
    fix(&mut cfg.dataset.root);
    fix(&mut cfg.dataset.annotations);
    fix(&mut cfg.dataset.eval_annotations);
    fix(&mut cfg.dataset.color_table);
    fix(&mut cfg.model.init);
}

fn typed<T: DeserializeOwned + Serialize>(table: &toml::Table, section: &str) -> Result<(T, toml::Table), Failure> {
    if table.contains_key("seed") {
        return Err(invalid(format!(
            "[{section}] seed: component seeds derive from the root `seed`; set that instead"
        )));
    }
    let value: T = toml::Value::Table(table.clone())
        .try_into()
        .map_err(|e| invalid(format!("[{section}] {e}")))?;
    let mut expanded = toml::Table::try_from(&value).map_err(|e| invalid(format!("[{section}] {e}")))?;
    expanded.remove("seed");
    Ok((value, expanded))
}

fn check_positive(field: &str, v: usize) -> Result<(), Failure> {
    if v == 0 {
        return Err(invalid(format!("{field} must be positive, got 0")));
    }
    Ok(())
}

/// Validates `cfg` for `command` and expands the defaults of `[train]`.
pub fn resolve(mut cfg: RunConfig, command: Command) -> Result<Resolved, Failure> {
    if cfg.format_version != FORMAT_VERSION {
        return Err(invalid(format!(
            "format_version {} is not supported (expected {FORMAT_VERSION})",
            cfg.format_version
        )));
    }
    let seeds = Seeds::from_root(cfg.seed);
    geopretrain_nn::backbone::BackboneSpec::from_variant(&cfg.model.backbone)
        .map_err(|e| invalid(format!("model.backbone: {e}")))?;
    if cfg.dataset.name.trim().is_empty() || cfg.dataset.name.contains(['/', '\\']) {
        return Err(invalid(format!("dataset.name `{}` must be a plain non-empty name", cfg.dataset.name)));
    }
    check_positive("eval.batch_size", cfg.eval.batch_size)?;
    check_positive("eval.workers", cfg.eval.workers)?;
    if !(cfg.eval.eval_fraction > 0.0 && cfg.eval.eval_fraction < 1.0) {
        return Err(invalid(format!("eval.eval_fraction must be in (0, 1), got {}", cfg.eval.eval_fraction)));
    }
    if let Some(t) = cfg.eval.tile {
        if t == 0 || t % 32 != 0 || cfg.eval.overlap >= t {
            return Err(invalid(format!(
                "eval.tile {t} must be a positive multiple of 32 above eval.overlap {}",
                cfg.eval.overlap
            )));
        }
    }
    let s = &cfg.dataset.synthetic;
    if cfg.dataset.kind == DatasetKind::Synthetic {
        check_positive("dataset.synthetic.count", s.count)?;
        check_positive("dataset.synthetic.classes", s.classes)?;
        if s.size < 32 || s.size % 32 != 0 {
            return Err(invalid(format!("dataset.synthetic.size {} must be a multiple of 32", s.size)));
        }
    } else if cfg.dataset.root.is_none() {
        return Err(invalid("dataset.root is required unless dataset.kind = \"synthetic\""));
    }

    let train = match command {
        Command::Pretrain => {
            let mode = cfg.mode.ok_or_else(|| invalid("mode: expected \"supervised\" or \"simsiam\""))?;
            if !matches!(cfg.dataset.kind, DatasetKind::Folder | DatasetKind::Synthetic) {
                return Err(invalid("pretrain needs dataset.kind = \"folder\" or \"synthetic\""));
            }
            match mode {
                PretrainMode::Supervised => {
                    let (mut t, table): (SupTrainConfig, _) = typed(&cfg.train, "train")?;
                    check_positive("train.batch_size", t.batch_size)?;
                    check_positive("train.epochs", t.epochs)?;
                    t.seed = seeds.train;
                    t.validate().map_err(|e| invalid(format!("train: {e}")))?;
                    cfg.train = table;
                    TrainSettings::Supervised(t)
                }
                PretrainMode::Simsiam => {
                    let (mut t, table): (SimSiamConfig, _) = typed(&cfg.train, "train")?;
                    check_positive("train.batch_size", t.batch_size)?;
                    check_positive("train.epochs", t.epochs)?;
                    t.seed = seeds.train;
                    t.validate().map_err(|e| invalid(format!("train: {e}")))?;
                    cfg.train = table;
                    TrainSettings::Simsiam(t)
                }
            }
        }
        Command::Finetune | Command::Evaluate => {
            let task = cfg.task.ok_or_else(|| invalid("task: expected \"seg\" or \"det\""))?;
            match task {
                Task::Seg => {
                    if !matches!(cfg.dataset.kind, DatasetKind::Segmentation | DatasetKind::Synthetic) {
                        return Err(invalid("task seg needs dataset.kind = \"segmentation\" or \"synthetic\""));
                    }
                    let (mut t, table): (SegTrainConfig, _) = typed(&cfg.train, "train")?;
                    check_positive("train.batch_size", t.batch_size)?;
                    check_positive("train.epochs", t.epochs)?;
                    if cfg.dataset.kind == DatasetKind::Synthetic {
                        if t.crop > s.size {
                            return Err(invalid(format!(
                                "train.crop {} exceeds dataset.synthetic.size {}",
                                t.crop, s.size
                            )));
                        }
                        t.validate(s.classes).map_err(|e| invalid(format!("train: {e}")))?;
                    }
                    t.seed = seeds.train;
                    cfg.train = table;
                    TrainSettings::Seg(t)
                }
                Task::Det => {
                    if !matches!(cfg.dataset.kind, DatasetKind::Detection | DatasetKind::Synthetic) {
                        return Err(invalid("task det needs dataset.kind = \"detection\" or \"synthetic\""));
                    }
                    let (mut t, table): (DetTrainConfig, _) = typed(&cfg.train, "train")?;
                    check_positive("train.batch_size", t.batch_size)?;
                    t.seed = seeds.train;
                    t.validate().map_err(|e| invalid(format!("train: {e}")))?;
                    cfg.train = table;
                    if cfg.model.detector == "external" && cfg.model.detector_command.is_none() {
                        return Err(invalid("model.detector_command is required for the external detector"));
                    }
                    TrainSettings::Det(t)
                }
            }
        }
        Command::Profile => TrainSettings::None,
    };
    if command == Command::Pretrain || command == Command::Finetune || command == Command::Evaluate {
        if cfg.model.init.is_none() {
            return Err(invalid(match command {
                Command::Pretrain => "model.init: path of the generalist checkpoint (see `init-generalist`)",
                Command::Finetune => "model.init: path of the pre-trained backbone checkpoint",
                _ => "model.init: path of the fine-tuned checkpoint",
            }));
        }
    }
    Ok(Resolved { config: cfg, train, seeds })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> RunConfig {
        parse(
            r#"
format_version = 1
seed = 3
mode = "simsiam"
[model]
backbone = "tiny"
init = "/tmp/g.ckpt"
[train]
batch_size = 8
"#,
        )
        .unwrap()
    }

    #[test]
    fn resolved_config_round_trips() {
        let r = resolve(base(), Command::Pretrain).unwrap();
        let TrainSettings::Simsiam(t) = &r.train else { panic!() };
        assert_eq!(t.batch_size, 8);
        assert_eq!(t.epochs, 400);
        assert_eq!(t.seed, seed::derive(3, "train"));
        let text = r.to_toml();
        assert!(text.contains("base_lr = 0.05"), "{text}");
        assert!(!text.contains("\nseed = ") || text.contains("\nseed = 3"));
        let again = resolve(parse(&text).unwrap(), Command::Pretrain).unwrap();
        assert_eq!(again, r);
    }

    #[test]
    fn field_level_errors() {
        let mut c = base();
        c.train.insert("batch_size".into(), 0.into());
        let e = resolve(c, Command::Pretrain).unwrap_err().to_string();
        assert!(e.contains("train.batch_size"), "{e}");

        let mut c = base();
        c.train.insert("bogus".into(), 1.into());
        let e = resolve(c, Command::Pretrain).unwrap_err().to_string();
        assert!(e.contains("bogus"), "{e}");

        let mut c = base();
        c.train.insert("seed".into(), 1.into());
        assert!(resolve(c, Command::Pretrain).unwrap_err().to_string().contains("root `seed`"));

        let e = parse("format_version = 1\n[model]\nbackbone = 3\n").unwrap_err().to_string();
        assert!(e.contains("backbone"), "{e}");
    }

    #[test]
    fn overrides_parse_literals() {
        let mut doc: toml::Table = "format_version = 1\n".parse().unwrap();
        apply_overrides(
            &mut doc,
            &["train.batch_size=4".into(), "model.backbone=tiny".into(), "train.milestones=[1, 2]".into()],
        )
        .unwrap();
        assert_eq!(doc["train"]["batch_size"].as_integer(), Some(4));
        assert_eq!(doc["model"]["backbone"].as_str(), Some("tiny"));
        assert_eq!(doc["train"]["milestones"].as_array().unwrap().len(), 2);
        assert!(apply_overrides(&mut doc, &["nokey".into()]).is_err());
    }
}
