use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{numerical, Matrix, RngState};
use crate::objectives::{
    ap_loss, ce_batch, mine_triplets, prototype_total, triplet_batch, ObjectiveConfig, PrototypeBank,
};
use crate::scoring::TrainEmbeddingIndex;

use super::{cosine_lr, Head, Network, OptimizerConfig, SgdMomentum};

/// State an objective carries beyond the network weights.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObjectiveState {
    /// Learned class prototypes (prototype objective).
    pub prototypes: Option<PrototypeBank>,
    /// Every training embedding with its label, kept for embedding heads so
    /// nearest-neighbour inference and scoring are available.
    pub train_index: Option<TrainEmbeddingIndex>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingDiagnostics {
    /// Mean minibatch loss per epoch (pre-update values, skipped batches excluded).
    pub epoch_losses: Vec<f64>,
    /// Batches without the structure the objective needs.
    pub skipped_batches: usize,
    pub triplets: usize,
    pub fallback_triplets: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub network: Network,
    pub objective: ObjectiveConfig,
    pub state: ObjectiveState,
    pub diagnostics: TrainingDiagnostics,
}

impl TrainedModel {
    pub fn classes(&self) -> usize {
        match self.network.config().head {
            Head::Logits { classes } => classes,
            Head::Embedding { .. } => self
                .state
                .prototypes
                .as_ref()
                .map(PrototypeBank::classes)
                .or_else(|| self.state.train_index.as_ref().map(TrainEmbeddingIndex::classes))
                .unwrap_or(0),
        }
    }
}

/// Trains `network` on `dataset` for `opt.epochs` epochs of shuffled minibatches.
///
/// The learning rate follows [`cosine_lr`] per epoch. `rng` drives shuffling
/// and triplet mining only; initialise the network from a separate stream.
pub fn train(
    mut network: Network,
    dataset: &Dataset,
    objective: &ObjectiveConfig,
    opt: &OptimizerConfig,
    rng: &mut RngState,
) -> Result<TrainedModel> {
    objective.validate()?;
    opt.validate()?;
    check_compatibility(&network, dataset, objective)?;

    let features = dataset.features();
    let labels: Vec<usize> = dataset.labels().into_iter().map(|y| y as usize).collect();
    let n = labels.len();

    let mut bank = match objective {
        ObjectiveConfig::Prototype { .. } => {
            let init = network.forward(&features)?;
            Some(PrototypeBank::from_class_means(&init, &labels, dataset.classes())?)
        }
        _ => None,
    };

    let mut net_opt = SgdMomentum::from_config(network.parameter_count(), opt);
    let mut bank_opt = bank
        .as_ref()
        .map(|b| SgdMomentum::from_config(b.matrix().as_slice().len(), opt));
    let mut diag = TrainingDiagnostics::default();

    for epoch in 0..opt.epochs {
        let lr = cosine_lr(epoch, opt.epochs, opt.lr)?;
        let order = rng.permutation(n);
        let mut epoch_loss = 0.0;
        let mut used = 0usize;
        for chunk in order.chunks(opt.batch_size) {
            if chunk.len() < 2 {
                diag.skipped_batches += 1;
                log::warn!("epoch {epoch}: skipping a batch of size {}", chunk.len());
                continue;
            }
            let rows: Vec<&[f64]> = chunk.iter().map(|&i| features.row(i)).collect();
            let x = Matrix::from_rows(&rows)?;
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let cache = network.forward_cached(&x)?;
            let out = cache.output();
            if !out.is_finite() {
                return Err(numerical(format!("non-finite network outputs in epoch {epoch} (lr {lr:e})")));
            }

            let step = match *objective {
                ObjectiveConfig::CrossEntropy => Some(ce_batch(out, &y).map(|(l, g)| (l, g, None))?),
                ObjectiveConfig::AveragePrecision { delta } => {
                    ap_loss(out, &y, delta)?.map(|r| (r.loss, r.grad, None))
                }
                ObjectiveConfig::Triplet { margin, mining } => {
                    let triplets = mine_triplets(out, &y, mining, margin, rng);
                    if triplets.is_empty() {
                        None
                    } else {
                        diag.triplets += triplets.len();
                        diag.fallback_triplets += triplets.iter().filter(|t| t.selection.is_fallback()).count();
                        let (l, g) = triplet_batch(out, &triplets, margin)?;
                        Some((l, g, None))
                    }
                }
                ObjectiveConfig::Prototype { lambda, tau } => {
                    let b = bank.as_ref().expect("prototype bank initialised above");
                    let r = prototype_total(out, b, &y, lambda, tau)?;
                    Some((r.loss, r.grad_embeddings, Some(r.grad_prototypes)))
                }
            };

            let Some((loss, grad_out, grad_protos)) = step else {
                diag.skipped_batches += 1;
                log::warn!("epoch {epoch}: batch lacks the structure {:?} needs; skipped", objective.tag());
                continue;
            };
            if !loss.is_finite() {
                return Err(numerical(format!("non-finite loss in epoch {epoch}")));
            }
            network
                .backward_apply(&cache, &grad_out, &mut net_opt, lr)
                .map_err(|e| annotate(e, epoch, lr))?;
            if let (Some(b), Some(g), Some(o)) = (bank.as_mut(), grad_protos, bank_opt.as_mut()) {
                o.step(b.matrix_mut().as_mut_slice(), g.as_slice(), lr)
                    .map_err(|e| annotate(e, epoch, lr))?;
                if !b.matrix().is_finite() {
                    return Err(numerical(format!("prototypes became non-finite in epoch {epoch}")));
                }
            }
            epoch_loss += loss;
            used += 1;
        }
        diag.epoch_losses.push(if used > 0 { epoch_loss / used as f64 } else { f64::NAN });
    }

    let train_index = match network.config().head {
        Head::Embedding { .. } => {
            let embeddings = network.forward(&features)?;
            Some(TrainEmbeddingIndex::new(embeddings, labels, dataset.classes())?)
        }
        Head::Logits { .. } => None,
    };
    let state = ObjectiveState {
        prototypes: bank,
        train_index,
    };
    Ok(TrainedModel {
        network,
        objective: *objective,
        state,
        diagnostics: diag,
    })
}

fn annotate(e: Error, epoch: usize, lr: f64) -> Error {
    match e {
        Error::Numerical(m) => Error::Numerical(format!("{m} (epoch {epoch}, lr {lr:e})")),
        other => other,
    }
}

fn check_compatibility(network: &Network, dataset: &Dataset, objective: &ObjectiveConfig) -> Result<()> {
    let cfg = network.config();
    if cfg.head.family() != objective.head_family() {
        return Err(Error::Config(format!(
            "objective {} needs a {:?} head, network has {:?}",
            objective.tag(),
            objective.head_family(),
            cfg.head.family()
        )));
    }
    if let Head::Logits { classes } = cfg.head {
        if classes != dataset.classes() {
            return Err(Error::Config(format!(
                "logit head has {classes} outputs but the dataset has {} classes",
                dataset.classes()
            )));
        }
    }
    if cfg.input_dim != dataset.dim() {
        return Err(Error::Config(format!(
            "network expects {} features, dataset has {}",
            cfg.input_dim,
            dataset.dim()
        )));
    }
    if !dataset.role().is_id() || dataset.is_empty() {
        return Err(Error::InvalidInput("training needs a nonempty ID dataset".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{gen_id, MixtureSpec};
    use crate::model::NetworkConfig;
    use crate::numerics::{argmax, Stream};
    use crate::objectives::Mining;

    fn separable(sigma: f64, n: usize, seed: u64) -> Dataset {
        let spec = MixtureSpec {
            means: vec![vec![-1.0, 0.0], vec![1.0, 0.0]],
            sigma,
            per_class: n,
        };
        gen_id(&spec, &mut RngState::for_stream(seed, Stream::IdTrain)).unwrap()
    }

    fn fit(ds: &Dataset, objective: ObjectiveConfig, head: Head, opt: OptimizerConfig, seed: u64) -> TrainedModel {
        let net = Network::init(NetworkConfig::desk_scale(2, head), &mut RngState::for_stream(seed, Stream::Init)).unwrap();
        train(net, ds, &objective, &opt, &mut RngState::for_stream(seed, Stream::Train)).unwrap()
    }

    #[test]
    fn noiseless_two_class_ce_fits_perfectly() {
        let ds = separable(0.0, 20, 0);
        let m = fit(&ds, ObjectiveConfig::CrossEntropy, Head::Logits { classes: 2 }, OptimizerConfig::new(0.1, 5, 8), 0);
        let out = m.network.forward(&ds.features()).unwrap();
        for (row, y) in out.iter_rows().zip(ds.labels()) {
            assert_eq!(argmax(row), Some(y as usize));
        }
    }

    #[test]
    fn training_is_bitwise_reproducible() {
        let ds = separable(0.4, 30, 1);
        let obj = ObjectiveConfig::Triplet { margin: 1.0, mining: Mining::SemiHard };
        let a = fit(&ds, obj, Head::Embedding { dim: 4 }, OptimizerConfig::new(0.01, 3, 16), 3);
        let b = fit(&ds, obj, Head::Embedding { dim: 4 }, OptimizerConfig::new(0.01, 3, 16), 3);
        let bits = |m: &TrainedModel| m.network.flat_parameters().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.state, b.state);
    }

    #[test]
    fn full_batch_ce_loss_does_not_increase_early() {
        for seed in 0..5 {
            let ds = separable(0.2, 25, seed);
            let m = fit(&ds, ObjectiveConfig::CrossEntropy, Head::Logits { classes: 2 }, OptimizerConfig::new(0.1, 4, 50), seed);
            let l = &m.diagnostics.epoch_losses;
            assert!(l[1] <= l[0] && l[2] <= l[1], "seed {seed}: {l:?}");
        }
    }

    #[test]
    fn every_objective_produces_finite_losses() {
        let ds = separable(0.3, 20, 2);
        let cases = [
            (ObjectiveConfig::CrossEntropy, Head::Logits { classes: 2 }),
            (ObjectiveConfig::AveragePrecision { delta: 1.0 }, Head::Logits { classes: 2 }),
            (ObjectiveConfig::Triplet { margin: 1.0, mining: Mining::Random }, Head::Embedding { dim: 8 }),
            (ObjectiveConfig::Prototype { lambda: 0.01, tau: 0.1 }, Head::Embedding { dim: 8 }),
        ];
        for (obj, head) in cases {
            let m = fit(&ds, obj, head, OptimizerConfig::new(0.05, 3, 10), 2);
            assert!(m.diagnostics.epoch_losses.iter().all(|l| l.is_finite()), "{obj:?}");
        }
    }

    #[test]
    fn objective_state_matches_objective() {
        let ds = separable(0.3, 10, 4);
        let m = fit(&ds, ObjectiveConfig::Prototype { lambda: 0.01, tau: 0.1 }, Head::Embedding { dim: 3 }, OptimizerConfig::new(0.05, 2, 10), 0);
        let b = m.state.prototypes.as_ref().unwrap();
        assert_eq!((b.classes(), b.dim()), (2, 3));
        assert_eq!(m.state.train_index.as_ref().unwrap().len(), 20);
        let m = fit(&ds, ObjectiveConfig::Triplet { margin: 1.0, mining: Mining::Random }, Head::Embedding { dim: 3 }, OptimizerConfig::new(0.05, 2, 10), 0);
        assert!(m.state.prototypes.is_none());
        assert_eq!(m.state.train_index.as_ref().unwrap().len(), 20);
    }

    #[test]
    fn single_class_batches_are_skipped_for_triplet() {
        // Batches of two drawn from a 2-class set hold one class about half the time.
        let ds = separable(0.3, 6, 5);
        let m = fit(&ds, ObjectiveConfig::Triplet { margin: 1.0, mining: Mining::Random }, Head::Embedding { dim: 2 }, OptimizerConfig::new(0.01, 3, 2), 5);
        assert!(m.diagnostics.skipped_batches > 0);
    }

    #[test]
    fn head_objective_mismatch_is_rejected() {
        let ds = separable(0.3, 5, 0);
        let net = Network::init(NetworkConfig::desk_scale(2, Head::Logits { classes: 2 }), &mut RngState::new(0)).unwrap();
        let err = train(net, &ds, &ObjectiveConfig::Prototype { lambda: 0.0, tau: 1.0 }, &OptimizerConfig::new(0.1, 1, 4), &mut RngState::new(0));
        assert!(matches!(err, Err(Error::Config(_))));
        let net = Network::init(NetworkConfig::desk_scale(2, Head::Logits { classes: 3 }), &mut RngState::new(0)).unwrap();
        let err = train(net, &ds, &ObjectiveConfig::CrossEntropy, &OptimizerConfig::new(0.1, 1, 4), &mut RngState::new(0));
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn divergence_is_reported() {
        let ds = separable(0.3, 10, 0);
        let net = Network::init(NetworkConfig::desk_scale(2, Head::Embedding { dim: 4 }), &mut RngState::new(0)).unwrap();
        let res = train(
            net,
            &ds,
            &ObjectiveConfig::Triplet { margin: 1.0, mining: Mining::Random },
            &OptimizerConfig::new(1e6, 20, 4),
            &mut RngState::new(0),
        );
        assert!(matches!(res, Err(Error::Numerical(_))), "{res:?}");
    }
}
