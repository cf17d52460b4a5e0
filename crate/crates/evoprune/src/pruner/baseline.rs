//! Reference channel-selection criteria the search is compared against:
//! uniform random subsets, producer-filter weight sums, a first-order
//! saliency score, and greedy minimization of the exact layer error.

use crate::fitness::direct_error;
use crate::genetic::{repair, Chromosome};
use crate::net::{LayerId, NetworkSpec};
use crate::optim::softmax_cross_entropy;
use crate::sampler::VolumeSet;
use crate::{Error, Result, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineCriterion {
    Random,
    WeightSum,
    Taylor1,
    Greedy,
}

/// Per-channel saliency snapshot for the first-order criterion:
/// `|mean over samples of activation * loss-gradient|`.
#[derive(Debug, Clone)]
pub struct TaylorStats {
    pub scores: Vec<f64>,
}

/// Captures activation/gradient statistics at the layer feeding `consumer`.
pub fn taylor_first_order_stats(
    net: &NetworkSpec,
    batch: &Tensor,
    labels: &[usize],
    consumer: &LayerId,
) -> Result<TaylorStats> {
    let consumer_idx = net.layer_index(consumer)?;
    if consumer_idx == 0 {
        return Err(Error::PruneBoundary(
            consumer.to_string(),
            "first layer has no producer".into(),
        ));
    }
    // The consumer's input feature map carries the channels being scored.
    let tap = net.layers[consumer_idx - 1].id.clone();
    let capture: BTreeSet<LayerId> = [tap.clone()].into();

    let mut probe = net.clone();
    let (logits, ctx, traces) = probe.forward_train(batch, &capture)?;
    let (_, grad_logits) = softmax_cross_entropy(&logits, labels);
    let (_, grads) = probe.backward(&ctx, &grad_logits, &BTreeMap::new(), &capture)?;

    let act = &traces[&tap];
    let grad = &grads[&tap];
    let [c, h, w] = act.chw()?;
    let n = act.batch();
    let spatial = h * w;
    let mut scores = vec![0.0; c];
    for ch in 0..c {
        let mut acc = 0.0;
        for img in 0..n {
            let base = img * c * spatial + ch * spatial;
            for s in 0..spatial {
                acc += act.data()[base + s] * grad.data()[base + s];
            }
        }
        scores[ch] = (acc / (n * spatial) as f64).abs();
    }
    Ok(TaylorStats { scores })
}

/// Inputs for [`select_baseline`]; each criterion reads only what it needs.
#[derive(Default)]
pub struct BaselineContext<'a> {
    pub channels: usize,
    /// Producer conv weight (`F x C_prev x K x K`) for the weight-sum rule.
    pub producer_weights: Option<&'a Tensor>,
    /// Volumes plus consumer parameters for the greedy rule.
    pub volumes: Option<&'a VolumeSet>,
    pub consumer_weights: Option<&'a Tensor>,
    pub consumer_bias: Option<&'a Tensor>,
    /// Saliency snapshot for the first-order rule.
    pub taylor: Option<&'a TaylorStats>,
}

fn keep_top_k(scores: &[f64], k: usize) -> Chromosome {
    // Ties resolve toward lower indices for determinism.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].partial_cmp(&scores[i]).unwrap().then(i.cmp(&j)));
    let mut bits = vec![false; scores.len()];
    for &i in order.iter().take(k) {
        bits[i] = true;
    }
    Chromosome::from_bits(bits)
}

/// Produces a popcount-`k` mask under the chosen criterion.
pub fn select_baseline(
    criterion: BaselineCriterion,
    ctx: &BaselineContext<'_>,
    k: usize,
    rng: &mut impl Rng,
) -> Result<Chromosome> {
    let c = ctx.channels;
    if k == 0 || k > c {
        return Err(Error::InvalidArgument(format!(
            "keep {k} of {c} channels"
        )));
    }
    match criterion {
        BaselineCriterion::Random => {
            Ok(repair(Chromosome::from_bits(vec![false; c]), k, rng))
        }
        BaselineCriterion::WeightSum => {
            let w = ctx.producer_weights.ok_or_else(|| {
                Error::InvalidArgument("weight-sum needs producer weights".into())
            })?;
            let filters = w.shape()[0];
            if filters != c {
                return Err(Error::ShapeMismatch(format!(
                    "{filters} producer filters vs {c} channels"
                )));
            }
            let row = w.len() / filters;
            let sums: Vec<f64> = (0..filters)
                .map(|f| w.data()[f * row..(f + 1) * row].iter().map(|v| v.abs()).sum())
                .collect();
            Ok(keep_top_k(&sums, k))
        }
        BaselineCriterion::Taylor1 => {
            let t = ctx.taylor.ok_or_else(|| {
                Error::InvalidArgument("taylor1 needs an activation/gradient snapshot".into())
            })?;
            if t.scores.len() != c {
                return Err(Error::ShapeMismatch(format!(
                    "{} scores vs {c} channels",
                    t.scores.len()
                )));
            }
            Ok(keep_top_k(&t.scores, k))
        }
        BaselineCriterion::Greedy => {
            let vs = ctx
                .volumes
                .ok_or_else(|| Error::InvalidArgument("greedy needs a volume set".into()))?;
            let w = ctx.consumer_weights.ok_or_else(|| {
                Error::InvalidArgument("greedy needs consumer weights".into())
            })?;
            let mut bits = vec![true; c];
            for _ in 0..c - k {
                let mut best: Option<(usize, f64)> = None;
                for cand in 0..c {
                    if !bits[cand] {
                        continue;
                    }
                    bits[cand] = false;
                    let e = direct_error(
                        vs,
                        w,
                        ctx.consumer_bias,
                        &Chromosome::from_bits(bits.clone()),
                    )?;
                    bits[cand] = true;
                    if best.map_or(true, |(_, be)| e < be) {
                        best = Some((cand, e));
                    }
                }
                let (drop, _) = best.expect("at least one kept channel");
                bits[drop] = false;
            }
            Ok(Chromosome::from_bits(bits))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fitness::{compute_hessian, taylor_error, volume_set_from_rows};
    use crate::genetic::{evolve, GaConfig, LayerContext};
    use crate::optim::seeded_rng;

    #[test]
    fn weight_sum_keeps_largest_filters() {
        // Three producer filters with L1 sums 5, 0.1, 3 -> keep {0, 2}.
        let w = Tensor::from_vec(&[3, 1, 1, 2], vec![2.0, -3.0, 0.1, 0.0, -1.0, 2.0]).unwrap();
        let ctx = BaselineContext {
            channels: 3,
            producer_weights: Some(&w),
            ..Default::default()
        };
        let mask = select_baseline(BaselineCriterion::WeightSum, &ctx, 2, &mut seeded_rng(0))
            .unwrap();
        assert_eq!(mask.bits(), &[true, false, true]);
    }

    #[test]
    fn random_with_full_keep_is_all_ones() {
        let ctx = BaselineContext {
            channels: 5,
            ..Default::default()
        };
        let mask =
            select_baseline(BaselineCriterion::Random, &ctx, 5, &mut seeded_rng(1)).unwrap();
        assert_eq!(mask, Chromosome::ones(5));
    }

    #[test]
    fn random_masks_have_exact_cardinality() {
        let ctx = BaselineContext {
            channels: 10,
            ..Default::default()
        };
        let mut rng = seeded_rng(2);
        for _ in 0..20 {
            let mask = select_baseline(BaselineCriterion::Random, &ctx, 4, &mut rng).unwrap();
            assert_eq!(mask.popcount(), 4);
        }
    }

    #[test]
    fn greedy_never_beats_exhaustive_but_tracks_evolve() {
        // Head-to-head on a small exhaustible space: greedy's error is at
        // least the search's best on the same fixture.
        let mut rng = seeded_rng(3);
        let c = 10;
        let d = c; // K=1 patches
        let f = 3;
        let w = Tensor::from_vec(
            &[f, d],
            (0..f * d).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect(),
        )
        .unwrap();
        let rows: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..d).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect())
            .collect();
        let vs = volume_set_from_rows(LayerId::from("l"), rows, &w, None).unwrap();
        let h = compute_hessian(&vs).unwrap();

        let ctx = BaselineContext {
            channels: c,
            volumes: Some(&vs),
            consumer_weights: Some(&w),
            ..Default::default()
        };
        let greedy_mask =
            select_baseline(BaselineCriterion::Greedy, &ctx, 5, &mut seeded_rng(4)).unwrap();
        let greedy_err = taylor_error(&h, &w, &greedy_mask).unwrap();

        let layer_ctx = LayerContext {
            hessian: &h,
            weights: &w,
            channels: c,
            rate: 0.5,
        };
        let cfg = GaConfig {
            generations: Some(100),
            ..GaConfig::default()
        };
        let res = evolve(&layer_ctx, &cfg, &mut seeded_rng(5)).unwrap();
        assert!(
            greedy_err + 1e-12 >= res.best_error,
            "greedy {greedy_err} beat evolve {}",
            res.best_error
        );
    }

    #[test]
    fn missing_context_is_an_error() {
        let ctx = BaselineContext {
            channels: 4,
            ..Default::default()
        };
        for criterion in [
            BaselineCriterion::WeightSum,
            BaselineCriterion::Taylor1,
            BaselineCriterion::Greedy,
        ] {
            assert!(select_baseline(criterion, &ctx, 2, &mut seeded_rng(0)).is_err());
        }
    }
}
