//! Model checkpoints as JSON: a model-type tag, the network parameters as
//! shape-headed row-major matrices, the extracted random-effect matrix and
//! the training configuration.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use anyhow::{Context, Result};
use lmmvae_core::baselines::{PcaModel, PcaOheModel, TrainedVae};
use lmmvae_core::model::TrainedLmmvae;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case")]
pub enum ModelCheckpoint {
    Lmmvae(Box<TrainedLmmvae>),
    Vae(Box<TrainedVae>),
    Pca(Box<PcaModel>),
    PcaOhe(Box<PcaOheModel>),
}

pub fn save_checkpoint(path: &Path, checkpoint: &ModelCheckpoint) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer(BufWriter::new(file), checkpoint)
        .with_context(|| format!("writing checkpoint {}", path.display()))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(BufReader::new(file))
        .with_context(|| format!("parsing checkpoint {}", path.display()))
}
