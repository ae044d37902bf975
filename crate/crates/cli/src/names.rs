//! Model display names and artifact file names.

use geopretrain_core::checkpoint::{CheckpointMeta, Method};

use crate::config::PretrainMode;

/// `resisc45` -> `Resisc45`, `patternnet` -> `PatternNet`; other names get
/// an upper-case first letter.
pub fn dataset_display(name: &str) -> String {
    match name.to_ascii_lowercase().as_str() {
        "resisc45" => "Resisc45".into(),
        "patternnet" => "PatternNet".into(),
        "imagenet" => "ImageNet".into(),
        _ => {
            let mut c = name.chars();
            match c.next() {
                Some(f) => f.to_uppercase().chain(c).collect(),
                None => String::new(),
            }
        }
    }
}

/// `Base-Model`, `Sup-<Dataset>` or `Sim-<Dataset>`.
pub fn model_display(meta: &CheckpointMeta) -> String {
    match meta.method {
        Method::Generalist => "Base-Model".into(),
        Method::Supervised => format!("Sup-{}", dataset_display(&meta.dataset)),
        Method::Simsiam => format!("Sim-{}", dataset_display(&meta.dataset)),
    }
}

/// `sup-<dataset>.ckpt` or `sim-<dataset>.ckpt`.
pub fn pretrain_artifact(mode: PretrainMode, dataset: &str) -> String {
    let tag = match mode {
        PretrainMode::Supervised => "sup",
        PretrainMode::Simsiam => "sim",
    };
    format!("{tag}-{}.ckpt", dataset.to_ascii_lowercase())
}
