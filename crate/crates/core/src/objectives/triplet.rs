//! Margin triplet loss on squared Euclidean distances, with random and
//! semi-hard negative selection.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::{sq_dist, Matrix, RngState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mining {
    Random,
    SemiHard,
}

/// How the negative of a mined triplet was chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    /// Uniform over all other-class examples (random mining).
    Random,
    /// Uniform over `{n : d_ap < d_an < d_ap + α}`.
    SemiHard,
    /// Semi-hard set empty: nearest negative with `d_an > d_ap`.
    FallbackBeyondPositive,
    /// Every negative is at most as far as the positive: uniform negative.
    FallbackRandom,
}

impl Selection {
    pub fn is_fallback(self) -> bool {
        matches!(self, Selection::FallbackBeyondPositive | Selection::FallbackRandom)
    }
}

/// Indices into a batch with cached squared distances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    pub d_ap: f64,
    pub d_an: f64,
    pub selection: Selection,
}

/// Gradients of one triplet's loss with respect to its three embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletGrads {
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

/// `max(0, D(a,p) − D(a,n) + α)`. The subgradient at the kink is zero.
pub fn triplet_loss(a: &[f64], p: &[f64], n: &[f64], margin: f64) -> Result<(f64, TripletGrads)> {
    if a.len() != p.len() || a.len() != n.len() {
        return Err(invalid("triplet embeddings differ in dimension"));
    }
    let value = sq_dist(a, p) - sq_dist(a, n) + margin;
    let d = a.len();
    if value <= 0.0 {
        let zero = vec![0.0; d];
        return Ok((
            0.0,
            TripletGrads {
                anchor: zero.clone(),
                positive: zero.clone(),
                negative: zero,
            },
        ));
    }
    let grads = TripletGrads {
        anchor: (0..d).map(|k| 2.0 * (n[k] - p[k])).collect(),
        positive: (0..d).map(|k| 2.0 * (p[k] - a[k])).collect(),
        negative: (0..d).map(|k| 2.0 * (a[k] - n[k])).collect(),
    };
    Ok((value, grads))
}

/// One triplet for every ordered `(anchor, positive)` pair with equal labels.
///
/// Returns an empty list when the batch has no such pair or only one class.
pub fn mine_triplets(
    embeddings: &Matrix,
    labels: &[usize],
    mining: Mining,
    margin: f64,
    rng: &mut RngState,
) -> Vec<Triplet> {
    let n = labels.len();
    debug_assert_eq!(embeddings.rows(), n);
    let mut triplets = Vec::new();
    let mut negatives = Vec::with_capacity(n);
    let mut semi_hard = Vec::with_capacity(n);

    for a in 0..n {
        negatives.clear();
        negatives.extend((0..n).filter(|&j| labels[j] != labels[a]));
        if negatives.is_empty() {
            continue;
        }
        let ea = embeddings.row(a);
        for p in (0..n).filter(|&p| p != a && labels[p] == labels[a]) {
            let d_ap = sq_dist(ea, embeddings.row(p));
            let (negative, selection) = match mining {
                Mining::Random => (negatives[rng.below(negatives.len())], Selection::Random),
                Mining::SemiHard => {
                    semi_hard.clear();
                    let mut beyond: Option<(usize, f64)> = None;
                    for &j in &negatives {
                        let d_an = sq_dist(ea, embeddings.row(j));
                        if d_an > d_ap {
                            if d_an < d_ap + margin {
                                semi_hard.push(j);
                            }
                            if beyond.is_none_or(|(_, best)| d_an < best) {
                                beyond = Some((j, d_an));
                            }
                        }
                    }
                    if !semi_hard.is_empty() {
                        (semi_hard[rng.below(semi_hard.len())], Selection::SemiHard)
                    } else if let Some((j, _)) = beyond {
                        (j, Selection::FallbackBeyondPositive)
                    } else {
                        (negatives[rng.below(negatives.len())], Selection::FallbackRandom)
                    }
                }
            };
            triplets.push(Triplet {
                anchor: a,
                positive: p,
                negative,
                d_ap,
                d_an: sq_dist(ea, embeddings.row(negative)),
                selection,
            });
        }
    }
    triplets
}

/// Mean hinge loss over `triplets` and its gradient on every embedding row.
pub fn triplet_batch(embeddings: &Matrix, triplets: &[Triplet], margin: f64) -> Result<(f64, Matrix)> {
    let mut grad = Matrix::zeros(embeddings.rows(), embeddings.cols());
    if triplets.is_empty() {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / triplets.len() as f64;
    let mut total = 0.0;
    for t in triplets {
        let (l, g) = triplet_loss(
            embeddings.row(t.anchor),
            embeddings.row(t.positive),
            embeddings.row(t.negative),
            margin,
        )?;
        if l == 0.0 {
            continue;
        }
        total += l;
        for (idx, part) in [(t.anchor, &g.anchor), (t.positive, &g.positive), (t.negative, &g.negative)] {
            for (dst, v) in grad.row_mut(idx).iter_mut().zip(part) {
                *dst += scale * v;
            }
        }
    }
    Ok((total * scale, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;

    #[test]
    fn inactive_hinge_is_zero() {
        let (l, g) = triplet_loss(&[0.0, 0.0], &[0.0, 0.0], &[1.0, 1.0], 1.0).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.anchor.iter().chain(&g.positive).chain(&g.negative).all(|v| *v == 0.0));
    }

    #[test]
    fn coincident_points_cost_the_margin() {
        let (l, _) = triplet_loss(&[0.3], &[0.3], &[0.3], 1.0).unwrap();
        assert_eq!(l, 1.0);
    }

    #[test]
    fn substitution_example() {
        // d_ap = 0.5, d_an = 1.0
        let a = [0.0, 0.0];
        let p = [0.5f64.sqrt(), 0.0];
        let n = [0.0, 1.0];
        let (l, _) = triplet_loss(&a, &p, &n, 1.0).unwrap();
        assert!((l - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kink_subgradient_is_zero() {
        // d_ap − d_an + α = 1 − 2 + 1 = 0
        let (l, g) = triplet_loss(&[0.0], &[1.0], &[2f64.sqrt()], 1.0).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.anchor.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn active_gradient_matches_finite_differences() {
        let mut rng = RngState::new(4);
        let mut checked = 0;
        while checked < 20 {
            let w: Vec<f64> = (0..9).map(|_| rng.normal()).collect();
            let f = |w: &[f64]| {
                let (l, g) = triplet_loss(&w[0..3], &w[3..6], &w[6..9], 1.0)?;
                Ok((l, [g.anchor, g.positive, g.negative].concat()))
            };
            let (l, _) = f(&w).unwrap();
            if l < 1e-3 {
                continue;
            }
            assert!(grad_check(f, &w, 1e-5).unwrap() <= 1e-5);
            checked += 1;
        }
    }

    #[test]
    fn semi_hard_set_from_enumeration() {
        // Anchor at the origin, positive at squared distance 0.3, negatives at
        // squared distances 0.2, 0.8 and 1.5. Only 0.8 lies in (0.3, 1.3).
        let e = Matrix::from_rows(&[
            vec![0.0],
            vec![0.3f64.sqrt()],
            vec![0.2f64.sqrt()],
            vec![0.8f64.sqrt()],
            vec![1.5f64.sqrt()],
        ])
        .unwrap();
        let labels = [0, 0, 1, 1, 1];
        let mut rng = RngState::new(0);
        for _ in 0..20 {
            let ts = mine_triplets(&e, &labels, Mining::SemiHard, 1.0, &mut rng);
            let t = ts.iter().find(|t| t.anchor == 0 && t.positive == 1).unwrap();
            assert_eq!(t.negative, 3);
            assert_eq!(t.selection, Selection::SemiHard);
        }
    }

    #[test]
    fn fallback_chain() {
        // Negatives at squared distances 2.0 and 3.0 from the anchor, positive at 0.1:
        // no semi-hard negative, nearest beyond the positive is index 2.
        let e = Matrix::from_rows(&[vec![0.0], vec![0.1f64.sqrt()], vec![2f64.sqrt()], vec![-(3f64.sqrt())]]).unwrap();
        let ts = mine_triplets(&e, &[0, 0, 1, 1], Mining::SemiHard, 1.0, &mut RngState::new(0));
        let t = ts.iter().find(|t| t.anchor == 0).unwrap();
        assert_eq!((t.negative, t.selection), (2, Selection::FallbackBeyondPositive));

        // Positive farther than every negative: random fallback.
        let e = Matrix::from_rows(&[vec![0.0], vec![5.0], vec![1.0]]).unwrap();
        let ts = mine_triplets(&e, &[0, 0, 1], Mining::SemiHard, 1.0, &mut RngState::new(0));
        let t = ts.iter().find(|t| t.anchor == 0).unwrap();
        assert_eq!((t.negative, t.selection), (2, Selection::FallbackRandom));
    }

    #[test]
    fn single_class_batch_yields_nothing() {
        let e = Matrix::from_rows(&[[0.0], [1.0], [2.0]]).unwrap();
        assert!(mine_triplets(&e, &[1, 1, 1], Mining::Random, 1.0, &mut RngState::new(0)).is_empty());
        // Two classes but no positive pair.
        assert!(mine_triplets(&e, &[0, 1, 2], Mining::SemiHard, 1.0, &mut RngState::new(0)).is_empty());
    }

    #[test]
    fn one_triplet_per_anchor_positive_pair() {
        let e = Matrix::from_rows(&[[0.0], [0.1], [0.2], [3.0], [3.1]]).unwrap();
        let ts = mine_triplets(&e, &[0, 0, 0, 1, 1], Mining::Random, 1.0, &mut RngState::new(0));
        // 3·2 pairs in class 0, 2·1 pairs in class 1.
        assert_eq!(ts.len(), 8);
        for t in ts {
            assert_ne!(t.anchor, t.positive);
            assert!(t.negative >= 3 || t.anchor >= 3);
        }
    }

    #[test]
    fn emitted_semi_hard_triplets_satisfy_the_constraint() {
        let mut rng = RngState::new(99);
        let rows: Vec<Vec<f64>> = (0..24).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
        let labels: Vec<usize> = (0..24).map(|i| i % 3).collect();
        let e = Matrix::from_rows(&rows).unwrap();
        for t in mine_triplets(&e, &labels, Mining::SemiHard, 1.0, &mut rng) {
            if !t.selection.is_fallback() {
                assert!(t.d_ap < t.d_an && t.d_an < t.d_ap + 1.0);
            }
        }
    }
}
