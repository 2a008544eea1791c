//! Weight checkpoint format: a JSON object with a header (layer dims, seed,
//! round) and one flat weight array laid out per layer as row-major weights
//! followed by biases.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::neural::mlp::{DenseLayer, Mlp};
use crate::neural::SplitModel;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    /// [in, out] per layer; consecutive layers must chain.
    pub layer_dims: Vec<[usize; 2]>,
    pub relu_on_output: bool,
    pub seed: u64,
    pub round: u32,
    pub weights: Vec<f64>,
}

impl Checkpoint {
    pub fn from_mlp(mlp: &Mlp, seed: u64, round: u32) -> Self {
        Self {
            layer_dims: mlp
                .layers()
                .iter()
                .map(|l| [l.in_dim(), l.out_dim()])
                .collect(),
            relu_on_output: mlp.relu_on_output(),
            seed,
            round,
            weights: mlp.flat_weights(),
        }
    }

    pub fn into_mlp(self) -> Result<Mlp> {
        if self.layer_dims.is_empty() {
            return Err(Error::InvalidCheckpoint("no layers in header".into()));
        }
        let expected: usize = self
            .layer_dims
            .iter()
            .map(|[i, o]| i.checked_mul(*o).and_then(|w| w.checked_add(*o)))
            .try_fold(0usize, |acc, len| {
                len.and_then(|l| acc.checked_add(l))
                    .ok_or_else(|| Error::InvalidCheckpoint("dims overflow".into()))
            })?;
        if expected != self.weights.len() {
            return Err(Error::InvalidCheckpoint(format!(
                "header wants {expected} parameters, payload has {}",
                self.weights.len()
            )));
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidCheckpoint("non-finite parameter".into()));
        }
        let mut layers = Vec::with_capacity(self.layer_dims.len());
        let mut offset = 0;
        for [in_dim, out_dim] in self.layer_dims {
            let w_len = in_dim * out_dim;
            let weights =
                Matrix::from_vec(in_dim, out_dim, self.weights[offset..offset + w_len].to_vec())?;
            offset += w_len;
            let biases = self.weights[offset..offset + out_dim].to_vec();
            offset += out_dim;
            layers.push(DenseLayer { weights, biases });
        }
        Mlp::from_layers(layers, self.relu_on_output)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).expect("checkpoint serializes");
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path)?;
        checkpoint_from_json(&text)
    }
}

/// Parses and structurally validates a checkpoint payload.
pub fn checkpoint_from_json(text: &str) -> Result<Checkpoint> {
    let ck: Checkpoint =
        serde_json::from_str(text).map_err(|e| Error::InvalidCheckpoint(e.to_string()))?;
    // Validate eagerly so a parsed checkpoint is always loadable.
    ck.clone().into_mlp()?;
    Ok(ck)
}

/// Client checkpoint: both halves plus the shared header fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitCheckpoint {
    pub extractor: Checkpoint,
    pub predictor: Checkpoint,
}

impl SplitCheckpoint {
    pub fn from_model(model: &SplitModel, seed: u64, round: u32) -> Self {
        Self {
            extractor: Checkpoint::from_mlp(&model.extractor, seed, round),
            predictor: Checkpoint::from_mlp(&model.predictor, seed, round),
        }
    }

    pub fn into_model(self) -> Result<SplitModel> {
        SplitModel::new(self.extractor.into_mlp()?, self.predictor.into_mlp()?)
    }
}
