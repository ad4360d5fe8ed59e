//! Trained networks on disk: a checkpoint whose descriptor is a TOML model
//! card carrying the spec and normalization.

use std::path::Path;

use serde::{Deserialize, Serialize};

use ddnet_core::assimilator::{DaNet, DaNorm};
use ddnet_core::forecaster::{NormStats, PredNet};
use ddnet_core::netblocks::NetworkSpec;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCard {
    /// `prednet` or `danet`.
    pub kind: String,
    /// Digest of the dataset the model was trained on.
    pub dataset_digest: String,
    pub spec: NetworkSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prednet_norm: Option<NormStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub danet_norm: Option<DaNorm>,
}

fn card_of(ckpt: &Checkpoint, path: &Path, kind: &str) -> Result<ModelCard, CliError> {
    let card: ModelCard = toml::from_str(&ckpt.descriptor)
        .map_err(|e| CliError::Runtime(format!("{}: bad model card: {}", path.display(), e.message())))?;
    if card.kind != kind {
        return Err(CliError::Validation(format!(
            "{}: holds a {} model, expected {kind}",
            path.display(),
            card.kind
        )));
    }
    Ok(card)
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    }
    Ok(())
}

pub fn save_prednet(model: &PredNet, dataset_digest: &str, path: &Path) -> Result<(), CliError> {
    let card = ModelCard {
        kind: "prednet".into(),
        dataset_digest: dataset_digest.into(),
        spec: model.spec.clone(),
        prednet_norm: Some(model.norm.clone()),
        danet_norm: None,
    };
    ensure_parent(path)?;
    let ckpt = Checkpoint {
        descriptor: toml::to_string(&card).expect("card serialises"),
        weights: model.weights.clone(),
        optimizer: None,
    };
    Ok(save_checkpoint(&ckpt, path)?)
}

pub fn load_prednet(path: &Path) -> Result<(PredNet, ModelCard), CliError> {
    let ckpt = load_checkpoint(path)?;
    let card = card_of(&ckpt, path, "prednet")?;
    let norm = card
        .prednet_norm
        .clone()
        .ok_or_else(|| CliError::Runtime(format!("{}: model card lacks normalization", path.display())))?;
    Ok((PredNet::new(card.spec.clone(), ckpt.weights, norm)?, card))
}

pub fn save_danet(model: &DaNet, dataset_digest: &str, path: &Path) -> Result<(), CliError> {
    let card = ModelCard {
        kind: "danet".into(),
        dataset_digest: dataset_digest.into(),
        spec: model.spec.clone(),
        prednet_norm: None,
        danet_norm: Some(model.norm),
    };
    ensure_parent(path)?;
    let ckpt = Checkpoint {
        descriptor: toml::to_string(&card).expect("card serialises"),
        weights: model.weights.clone(),
        optimizer: None,
    };
    Ok(save_checkpoint(&ckpt, path)?)
}

pub fn load_danet(path: &Path) -> Result<(DaNet, ModelCard), CliError> {
    let ckpt = load_checkpoint(path)?;
    let card = card_of(&ckpt, path, "danet")?;
    let norm = card
        .danet_norm
        .ok_or_else(|| CliError::Runtime(format!("{}: model card lacks normalization", path.display())))?;
    Ok((DaNet::new(card.spec.clone(), ckpt.weights, norm)?, card))
}
