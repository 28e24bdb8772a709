//! JSON model files.
//!
//! Weight blocks are stored as `{rows, cols, data}` where `data` is the
//! standard base64 encoding of the row-major little-endian IEEE-754 bytes,
//! so every float round-trips exactly.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use nalgebra::{DMatrix, RowDVector};
use serde::{Deserialize, Serialize};

use super::{Activation, Architecture, EmbeddingModel, GnnModel, Layer};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct Block {
    rows: usize,
    cols: usize,
    data: String,
}

impl Block {
    fn encode(m: &DMatrix<f64>) -> Self {
        let mut bytes = Vec::with_capacity(m.len() * 8);
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                bytes.extend_from_slice(&m[(r, c)].to_le_bytes());
            }
        }
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data: STANDARD.encode(bytes),
        }
    }

    fn decode(&self) -> Result<DMatrix<f64>> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| Error::Format(format!("bad base64 weight block: {e}")))?;
        if bytes.len() != self.rows * self.cols * 8 {
            return Err(Error::Format(format!(
                "weight block holds {} bytes, expected {}x{} floats",
                bytes.len(),
                self.rows,
                self.cols
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &values))
    }
}

#[derive(Serialize, Deserialize)]
struct LayerRepr {
    weight: Block,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    root_weight: Option<Block>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<Block>,
}

#[derive(Serialize, Deserialize)]
struct Dims {
    input: usize,
    hidden: usize,
    embedding: usize,
}

#[derive(Serialize, Deserialize)]
struct ModelRepr {
    architecture: Architecture,
    activation: Activation,
    dims: Dims,
    layers: Vec<LayerRepr>,
}

impl Serialize for GnnModel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ModelRepr {
            architecture: self.architecture,
            activation: self.activation,
            dims: Dims {
                input: self.input_dim(),
                hidden: self.hidden_dim(),
                embedding: self.embedding_dim(),
            },
            layers: self
                .layers
                .iter()
                .map(|l| LayerRepr {
                    weight: Block::encode(&l.weight),
                    root_weight: l.root_weight.as_ref().map(Block::encode),
                    bias: l
                        .bias
                        .as_ref()
                        .map(|b| Block::encode(&DMatrix::from_row_slice(1, b.len(), b.as_slice()))),
                })
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for GnnModel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let repr = ModelRepr::deserialize(d)?;
        let layers = repr
            .layers
            .iter()
            .map(|l| {
                Ok(Layer {
                    weight: l.weight.decode()?,
                    root_weight: l.root_weight.as_ref().map(Block::decode).transpose()?,
                    bias: l
                        .bias
                        .as_ref()
                        .map(|b| b.decode().map(|m| RowDVector::from_row_slice(m.as_slice())))
                        .transpose()?,
                })
            })
            .collect::<Result<Vec<_>>>()
            .map_err(D::Error::custom)?;
        let model = GnnModel::from_layers(repr.architecture, repr.activation, layers).map_err(D::Error::custom)?;
        if model.input_dim() != repr.dims.input || model.embedding_dim() != repr.dims.embedding {
            return Err(D::Error::custom("declared dims disagree with weight shapes"));
        }
        Ok(model)
    }
}

pub fn save_model(path: &Path, model: &GnnModel) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(model)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<GnnModel> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}
