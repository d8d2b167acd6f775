//! Predictions and OOD scores. Every score follows one convention: higher
//! means more likely out-of-distribution.
//!
//! | Objective | Prediction | Default score |
//! |-----------|------------|---------------|
//! | cross-entropy | argmax softmax(logits) | entropy |
//! | AP | argmax softmax(scores) | entropy |
//! | prototype | nearest prototype | entropy (MSP on some presets) |
//! | triplet | label of nearest train embedding | distance to nearest train embedding |

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::{Dataset, Role};
use crate::error::{invalid, Error, Result};
use crate::model::TrainedModel;
use crate::numerics::{argmax, argmin, softmax, sq_dist, Matrix, Probabilities};
use crate::objectives::{ObjectiveConfig, ObjectiveTag, PrototypeBank};

/// Scorer requested in a configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerRule {
    Msp,
    Entropy,
    Knn,
    #[default]
    Auto,
}

/// Scorer actually applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    Msp,
    Entropy,
    Knn,
}

impl ScorerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScorerKind::Msp => "msp",
            ScorerKind::Entropy => "entropy",
            ScorerKind::Knn => "knn",
        }
    }
}

impl ScorerRule {
    /// `auto` picks entropy for probability-producing objectives and 1-NN
    /// distance for triplet models; explicit rules are checked against the
    /// objective.
    pub fn resolve(self, objective: ObjectiveTag) -> Result<ScorerKind> {
        let probabilistic = objective != ObjectiveTag::Triplet;
        match self {
            ScorerRule::Auto if probabilistic => Ok(ScorerKind::Entropy),
            ScorerRule::Auto => Ok(ScorerKind::Knn),
            ScorerRule::Msp | ScorerRule::Entropy if !probabilistic => Err(Error::Config(format!(
                "scorer {self:?} needs class probabilities; triplet models only provide embeddings (use knn)"
            ))),
            ScorerRule::Msp => Ok(ScorerKind::Msp),
            ScorerRule::Entropy => Ok(ScorerKind::Entropy),
            ScorerRule::Knn if matches!(objective, ObjectiveTag::CrossEntropy | ObjectiveTag::AveragePrecision) => {
                Err(Error::Config(format!(
                    "knn scoring needs an embedding head; {objective} trains a logit head (use msp or entropy)"
                )))
            }
            ScorerRule::Knn => Ok(ScorerKind::Knn),
        }
    }
}

impl std::str::FromStr for ScorerRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "msp" => Ok(ScorerRule::Msp),
            "entropy" => Ok(ScorerRule::Entropy),
            "knn" | "1nn" => Ok(ScorerRule::Knn),
            "auto" => Ok(ScorerRule::Auto),
            other => Err(Error::Config(format!("unknown scorer {other:?}"))),
        }
    }
}

/// Ties resolve to the lowest index.
pub fn predict_argmax(p: &Probabilities) -> usize {
    argmax(p.as_slice()).expect("probabilities are nonempty")
}

/// `−max_c p_c`, in `[−1, −1/C]`.
pub fn msp_score(p: &Probabilities) -> f64 {
    -p.as_slice().iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// `−Σ p_c ln p_c` with `0·ln 0 = 0`, in `[0, ln C]`.
pub fn entropy_score(p: &Probabilities) -> f64 {
    -p.as_slice()
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// Class probabilities from raw AP scores, treated as logits.
pub fn ap_probs(scores: &[f64]) -> Result<Probabilities> {
    softmax(scores)
}

/// `p_c ∝ exp(−τ·‖e − m_c‖²)` and the nearest-prototype label.
pub fn prototype_probs(embedding: &[f64], bank: &PrototypeBank, tau: f64) -> Result<(Probabilities, usize)> {
    if !(tau > 0.0) {
        return Err(invalid("tau must be positive"));
    }
    if embedding.len() != bank.dim() {
        return Err(invalid("embedding and prototype dimensions differ"));
    }
    let dists = bank.distances(embedding);
    let logits: Vec<f64> = dists.iter().map(|d| -tau * d).collect();
    let p = softmax(&logits)?;
    let label = argmin(&dists).expect("bank is nonempty");
    Ok((p, label))
}

/// Every training embedding with its label.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainEmbeddingIndex {
    embeddings: Matrix,
    labels: Vec<usize>,
    classes: usize,
}

impl TrainEmbeddingIndex {
    pub fn new(embeddings: Matrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if embeddings.rows() == 0 {
            return Err(Error::InvalidState("train embedding index is empty".into()));
        }
        if embeddings.rows() != labels.len() {
            return Err(invalid("embeddings and labels differ in length"));
        }
        if let Some(y) = labels.iter().find(|&&y| y >= classes) {
            return Err(invalid(format!("label {y} out of range for {classes} classes")));
        }
        Ok(TrainEmbeddingIndex {
            embeddings,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Exhaustive scan; returns `(index, squared distance)`, ties to the lowest index.
    pub fn nearest(&self, query: &[f64]) -> Result<(usize, f64)> {
        if query.len() != self.dim() {
            return Err(invalid("query and index dimensions differ"));
        }
        let mut best = (0, f64::INFINITY);
        for (i, row) in self.embeddings.iter_rows().enumerate() {
            let d = sq_dist(query, row);
            if d < best.1 {
                best = (i, d);
            }
        }
        Ok(best)
    }
}

/// Label of the nearest training embedding and the squared distance to it.
pub fn knn_predict_and_score(embedding: &[f64], index: &TrainEmbeddingIndex) -> Result<(usize, f64)> {
    let (i, d) = index.nearest(embedding)?;
    Ok((index.labels[i], d))
}

/// Scores and predictions for one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub scorer: ScorerKind,
    pub role: Role,
    pub scores: Vec<f64>,
    pub predictions: Vec<usize>,
    pub true_labels: Vec<i64>,
}

impl ScoreSet {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Applies the objective's inference rule and the resolved scorer to every example.
pub fn score_dataset(model: &TrainedModel, dataset: &Dataset, rule: ScorerRule) -> Result<ScoreSet> {
    let scorer = rule.resolve(model.objective.tag())?;
    let outputs = model.network.forward(&dataset.features())?;
    let mut scores = Vec::with_capacity(dataset.len());
    let mut predictions = Vec::with_capacity(dataset.len());

    for row in outputs.iter_rows() {
        let (probs, pred) = match model.objective {
            ObjectiveConfig::CrossEntropy | ObjectiveConfig::AveragePrecision { .. } => {
                let p = ap_probs(row)?;
                let y = predict_argmax(&p);
                (Some(p), y)
            }
            ObjectiveConfig::Prototype { tau, .. } => {
                let bank = model
                    .state
                    .prototypes
                    .as_ref()
                    .ok_or_else(|| Error::InvalidState("prototype model without a prototype bank".into()))?;
                let (p, y) = prototype_probs(row, bank, tau)?;
                (Some(p), y)
            }
            ObjectiveConfig::Triplet { .. } => (None, usize::MAX),
        };
        let (score, pred) = match scorer {
            ScorerKind::Msp => (msp_score(probs.as_ref().expect("resolved for probabilistic objectives")), pred),
            ScorerKind::Entropy => (entropy_score(probs.as_ref().expect("resolved for probabilistic objectives")), pred),
            ScorerKind::Knn => {
                let index = model.state.train_index.as_ref().ok_or_else(|| {
                    Error::InvalidState("knn scoring needs the training embeddings of an embedding-head model".into())
                })?;
                let (label, dist) = knn_predict_and_score(row, index)?;
                (dist, if pred == usize::MAX { label } else { pred })
            }
        };
        if !score.is_finite() {
            return Err(Error::Numerical(format!("non-finite {} score", scorer.as_str())));
        }
        scores.push(score);
        predictions.push(pred);
    }

    Ok(ScoreSet {
        scorer,
        role: dataset.role(),
        scores,
        predictions,
        true_labels: dataset.labels(),
    })
}

/// Writes `example_id,role,score,pred,true_label` rows for each set in order.
/// `example_id` is the position within its dataset.
pub fn write_scores_csv(path: &Path, sets: &[&ScoreSet]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "example_id,role,score,pred,true_label").map_err(io)?;
    for set in sets {
        for i in 0..set.len() {
            writeln!(
                w,
                "{i},{},{:?},{},{}",
                set.role.as_str(),
                set.scores[i],
                set.predictions[i],
                set.true_labels[i]
            )
            .map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// One line of a scores file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub example_id: usize,
    pub role: Role,
    pub score: f64,
    pub pred: usize,
    pub true_label: i64,
}

/// Reads a file written by [`write_scores_csv`].
pub fn read_scores_csv(path: &Path) -> Result<Vec<ScoreRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("{other:?}"),
        },
    })?;
    let mut rows = Vec::new();
    for (i, rec) in reader.deserialize::<ScoreRow>().enumerate() {
        let row = rec.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i as u64 + 2,
            message: e.to_string(),
        })?;
        if !row.score.is_finite() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i as u64 + 2,
                message: "non-finite score".into(),
            });
        }
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngState;

    fn probs(v: &[f64]) -> Probabilities {
        Probabilities::new(v.to_vec()).unwrap()
    }

    #[test]
    fn argmax_examples() {
        assert_eq!(predict_argmax(&probs(&[0.1, 0.7, 0.2])), 1);
        assert_eq!(predict_argmax(&Probabilities::uniform(4)), 0);
        assert_eq!(predict_argmax(&probs(&[0.0, 0.0, 1.0])), 2);
    }

    #[test]
    fn msp_examples() {
        assert_eq!(msp_score(&probs(&[0.7, 0.2, 0.1])), -0.7);
        assert!((msp_score(&Probabilities::uniform(10)) + 0.1).abs() < 1e-15);
        assert_eq!(msp_score(&probs(&[0.0, 1.0])), -1.0);
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy_score(&probs(&[0.0, 1.0, 0.0])), 0.0);
        assert!((entropy_score(&Probabilities::uniform(10)) - 10f64.ln()).abs() < 1e-12);
        assert!((entropy_score(&Probabilities::uniform(10)) - 2.302585).abs() < 1e-6);
        assert!((entropy_score(&probs(&[0.5, 0.5])) - 0.6931).abs() < 1e-4);
    }

    #[test]
    fn prototype_probability_examples() {
        let bank = PrototypeBank::new(Matrix::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap()).unwrap();
        let (p, y) = prototype_probs(&[0.0, 3.0], &bank, 2.0).unwrap();
        assert_eq!(p.as_slice(), &[0.5, 0.5]);
        assert_eq!(y, 0);

        let bank = PrototypeBank::new(Matrix::from_rows(&[[0.0], [1.0]]).unwrap()).unwrap();
        let (p, y) = prototype_probs(&[0.0], &bank, 1.0).unwrap();
        assert!((p.as_slice()[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((p.as_slice()[1] - 0.268_941_421_369_995_1).abs() < 1e-12);
        assert_eq!(y, 0);
    }

    fn random_bank(rng: &mut RngState, c: usize, d: usize) -> PrototypeBank {
        PrototypeBank::new(Matrix::from_vec(c, d, (0..c * d).map(|_| rng.normal()).collect()).unwrap()).unwrap()
    }

    #[test]
    fn nearest_prototype_is_most_probable() {
        let mut rng = RngState::new(77);
        for _ in 0..1000 {
            let bank = random_bank(&mut rng, 5, 3);
            let e: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
            let (p, y) = prototype_probs(&e, &bank, 1.0).unwrap();
            assert_eq!(predict_argmax(&p), y);
        }
    }

    #[test]
    fn prototype_argmax_ignores_temperature() {
        let mut rng = RngState::new(78);
        for _ in 0..300 {
            let bank = random_bank(&mut rng, 4, 2);
            let e: Vec<f64> = (0..2).map(|_| rng.normal()).collect();
            let picks: Vec<usize> = [0.1, 1.0, 10.0]
                .iter()
                .map(|&t| predict_argmax(&prototype_probs(&e, &bank, t).unwrap().0))
                .collect();
            assert!(picks.iter().all(|&k| k == picks[0]));
        }
    }

    #[test]
    fn knn_examples() {
        let idx = TrainEmbeddingIndex::new(Matrix::from_rows(&[[0.0, 0.0], [3.0, 0.0]]).unwrap(), vec![1, 0], 2).unwrap();
        assert_eq!(knn_predict_and_score(&[3.0, 0.0], &idx).unwrap(), (0, 0.0));
        // Squared distances {4, 1}.
        assert_eq!(knn_predict_and_score(&[2.0, 0.0], &idx).unwrap(), (0, 1.0));
        // Equidistant: lowest train index wins.
        assert_eq!(knn_predict_and_score(&[1.5, 0.0], &idx).unwrap(), (1, 2.25));
        assert!(matches!(
            TrainEmbeddingIndex::new(Matrix::zeros(0, 2), vec![], 2),
            Err(Error::InvalidState(_))
        ));
    }

    #[test]
    fn knn_matches_exhaustive_scan() {
        let mut rng = RngState::new(5);
        let n = 200;
        let data: Vec<f64> = (0..n * 3).map(|_| rng.normal()).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.below(4)).collect();
        let idx = TrainEmbeddingIndex::new(Matrix::from_vec(n, 3, data.clone()).unwrap(), labels.clone(), 4).unwrap();
        for _ in 0..1000 {
            let q: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
            let dists: Vec<f64> = data.chunks(3).map(|r| r.iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum()).collect();
            let min = dists.iter().copied().fold(f64::INFINITY, f64::min);
            let first = dists.iter().position(|&d| d == min).unwrap();
            assert_eq!(knn_predict_and_score(&q, &idx).unwrap(), (labels[first], min));
        }
    }

    #[test]
    fn scores_depend_only_on_the_probability_multiset() {
        let p = probs(&[0.6, 0.3, 0.1]);
        let q = probs(&[0.1, 0.6, 0.3]);
        assert_eq!(msp_score(&p), msp_score(&q));
        assert!((entropy_score(&p) - entropy_score(&q)).abs() < 1e-15);
    }

    #[test]
    fn scorer_resolution() {
        use ObjectiveTag::*;
        assert_eq!(ScorerRule::Auto.resolve(CrossEntropy).unwrap(), ScorerKind::Entropy);
        assert_eq!(ScorerRule::Auto.resolve(AveragePrecision).unwrap(), ScorerKind::Entropy);
        assert_eq!(ScorerRule::Auto.resolve(Prototype).unwrap(), ScorerKind::Entropy);
        assert_eq!(ScorerRule::Auto.resolve(Triplet).unwrap(), ScorerKind::Knn);
        assert!(ScorerRule::Knn.resolve(CrossEntropy).is_err());
        assert!(ScorerRule::Knn.resolve(AveragePrecision).is_err());
        assert!(ScorerRule::Msp.resolve(Triplet).is_err());
        assert!(ScorerRule::Entropy.resolve(Triplet).is_err());
        assert_eq!(ScorerRule::Knn.resolve(Prototype).unwrap(), ScorerKind::Knn);
    }
}
