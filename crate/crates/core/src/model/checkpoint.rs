//! JSON checkpoint of a trained model.
//!
//! Layout (all matrices row-major, `{"rows", "cols", "data"}`):
//!
//! ```text
//! {
//!   "format": "oodlab-checkpoint",
//!   "version": 1,
//!   "objective": { "kind": "prototype", "lambda": 0.01, "tau": 0.1 },
//!   "network": {
//!     "config": { "input_dim", "hidden", "activation", "head", "normalize_embeddings" },
//!     "layers": [ { "weights": <matrix out×in>, "bias": [..] }, .. ]
//!   },
//!   "prototypes": <matrix C×ED> | null,
//!   "train_index": { "embeddings": <matrix N×ED>, "labels": [..], "classes": C } | null
//!                  (present exactly for embedding heads)
//! }
//! ```
//!
//! Floats are written with the shortest round-trip representation and parsed
//! with correct rounding, so save → load is bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::objectives::{ObjectiveConfig, PrototypeBank};
use crate::scoring::TrainEmbeddingIndex;

use super::{Head, Layer, Network, NetworkConfig, ObjectiveState, TrainedModel, TrainingDiagnostics};

pub const CHECKPOINT_FORMAT: &str = "oodlab-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub objective: ObjectiveConfig,
    pub network: NetworkRecord,
    pub prototypes: Option<Matrix>,
    pub train_index: Option<IndexRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkRecord {
    pub config: NetworkConfig,
    pub layers: Vec<Layer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexRecord {
    pub embeddings: Matrix,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Checkpoint {
    pub fn from_model(model: &TrainedModel) -> Self {
        let prototypes = model.state.prototypes.as_ref().map(|b| b.matrix().clone());
        let train_index = model.state.train_index.as_ref().map(|i| IndexRecord {
            embeddings: i.embeddings().clone(),
            labels: i.labels().to_vec(),
            classes: i.classes(),
        });
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            objective: model.objective,
            network: NetworkRecord {
                config: model.network.config().clone(),
                layers: model.network.layers().to_vec(),
            },
            prototypes,
            train_index,
        }
    }

    /// Rebuilds the model; training diagnostics are not part of a checkpoint.
    pub fn into_model(self) -> Result<TrainedModel> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Serde(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let network = Network::from_layers(self.network.config, self.network.layers)?;
        let is_prototype = matches!(self.objective, ObjectiveConfig::Prototype { .. });
        let is_embedding = matches!(network.config().head, Head::Embedding { .. });
        if self.prototypes.is_some() != is_prototype || self.train_index.is_some() != is_embedding {
            return Err(Error::Serde(format!(
                "checkpoint state does not match objective {}",
                self.objective.tag()
            )));
        }
        let state = ObjectiveState {
            prototypes: self.prototypes.map(PrototypeBank::new).transpose()?,
            train_index: self
                .train_index
                .map(|i| TrainEmbeddingIndex::new(i.embeddings, i.labels, i.classes))
                .transpose()?,
        };
        Ok(TrainedModel {
            network,
            objective: self.objective,
            state,
            diagnostics: TrainingDiagnostics::default(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngState;
    use proptest::prelude::*;

    fn model(seed: u64, objective: ObjectiveConfig, head: Head) -> TrainedModel {
        let mut rng = RngState::new(seed);
        let network = Network::init(NetworkConfig::desk_scale(3, head), &mut rng).unwrap();
        let width = head.width();
        let prototypes = matches!(objective, ObjectiveConfig::Prototype { .. }).then(|| {
            PrototypeBank::new(Matrix::from_vec(2, width, (0..2 * width).map(|_| rng.normal()).collect()).unwrap()).unwrap()
        });
        let train_index = matches!(head, Head::Embedding { .. }).then(|| {
            TrainEmbeddingIndex::new(
                Matrix::from_vec(4, width, (0..4 * width).map(|_| rng.normal()).collect()).unwrap(),
                vec![0, 1, 1, 0],
                2,
            )
            .unwrap()
        });
        let state = ObjectiveState { prototypes, train_index };
        TrainedModel {
            network,
            objective,
            state,
            diagnostics: TrainingDiagnostics::default(),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn json_round_trip_is_bit_exact(seed in any::<u64>(), which in 0usize..3) {
            let (obj, head) = [
                (ObjectiveConfig::CrossEntropy, Head::Logits { classes: 2 }),
                (ObjectiveConfig::Prototype { lambda: 0.01, tau: 0.1 }, Head::Embedding { dim: 5 }),
                (ObjectiveConfig::Triplet { margin: 1.0, mining: crate::objectives::Mining::SemiHard }, Head::Embedding { dim: 3 }),
            ][which];
            let m = model(seed, obj, head);
            let ckpt = Checkpoint::from_model(&m);
            let back = Checkpoint::from_json(&ckpt.to_json().unwrap()).unwrap();
            prop_assert_eq!(&back, &ckpt);
            let restored = back.into_model().unwrap();
            let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
            prop_assert_eq!(bits(restored.network.flat_parameters()), bits(m.network.flat_parameters()));
            prop_assert_eq!(restored.state, m.state);
        }
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let mut ckpt = Checkpoint::from_model(&model(0, ObjectiveConfig::CrossEntropy, Head::Logits { classes: 2 }));
        ckpt.prototypes = Some(Matrix::zeros(2, 2));
        assert!(ckpt.into_model().is_err());
    }

    #[test]
    fn corrupt_matrix_is_rejected() {
        let ckpt = Checkpoint::from_model(&model(0, ObjectiveConfig::CrossEntropy, Head::Logits { classes: 2 }));
        let text = ckpt.to_json().unwrap().replacen("\"rows\":64", "\"rows\":65", 1);
        assert!(Checkpoint::from_json(&text).is_err());
    }
}
