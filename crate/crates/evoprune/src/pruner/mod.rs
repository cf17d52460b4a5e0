//! Whole-model pruning: sensitivity scanning, per-group compression plans,
//! and the layer-by-layer pipeline (sample, build the quadratic form, search
//! a mask, operate, fine-tune against the frozen teacher).

pub mod baseline;
mod surgery;

pub use baseline::{
    select_baseline, taylor_first_order_stats, BaselineContext, BaselineCriterion, TaylorStats,
};
pub use surgery::{prunable_pairs, surgery, PrunePair};

use crate::data::Dataset;
use crate::distill::{default_attention_pairs, finetune_kd, DistillConfig};
use crate::fitness::compute_hessian;
use crate::genetic::{evolve, GaConfig, GenerationRecord, LayerContext};
use crate::net::{LayerId, NetworkSpec};
use crate::optim::{evaluate, seeded_stream};
use crate::sampler::{sample_volumes, SampleConfig};
use crate::stats::model_stats;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Accuracy without fine-tuning per (layer, compression rate).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub layer: LayerId,
    pub rate: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensitivityProfile {
    pub baseline_accuracy: f64,
    pub rows: Vec<SensitivityRow>,
}

impl SensitivityProfile {
    pub fn accuracy(&self, layer: &LayerId, rate: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| &r.layer == layer && r.rate == rate)
            .map(|r| r.accuracy)
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("layer,rate,accuracy\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.layer, r.rate, r.accuracy));
        }
        out
    }
}

/// For every prunable producer and every rate: search a mask, operate on a
/// copy, evaluate without fine-tuning. The input network is never mutated.
pub fn sensitivity_scan(
    net: &NetworkSpec,
    train: &Dataset,
    eval_data: &Dataset,
    rates: &[f64],
    ga: &GaConfig,
    sample: &SampleConfig,
    seed: u64,
) -> Result<SensitivityProfile> {
    if rates.is_empty() {
        return Err(Error::InvalidArgument("no rates to scan".into()));
    }
    for &r in rates {
        if !(0.0..1.0).contains(&r) {
            return Err(Error::InvalidArgument(format!("rate {r} outside [0, 1)")));
        }
    }
    let baseline_accuracy = evaluate(net, eval_data)?;
    let mut rows = Vec::new();
    for (pair_idx, pair) in prunable_pairs(net).iter().enumerate() {
        for (rate_idx, &rate) in rates.iter().enumerate() {
            let task = (pair_idx * rates.len() + rate_idx) as u64;
            let at_layer = |e: Error| Error::AtLayer {
                layer: pair.producer.to_string(),
                source: Box::new(e),
            };
            let mut sample_rng = seeded_stream(seed, 1_000 + task);
            let vs = sample_volumes(net, train, &pair.consumer, sample, &mut sample_rng)
                .map_err(at_layer)?;
            let hessian = compute_hessian(&vs).map_err(at_layer)?;
            let weights = net.conv(&pair.consumer)?.weight_matrix();
            let ctx = LayerContext {
                hessian: &hessian,
                weights: &weights,
                channels: pair.channels,
                rate,
            };
            let mut ga_rng = seeded_stream(seed, 2_000 + task);
            let res = evolve(&ctx, ga, &mut ga_rng).map_err(at_layer)?;
            let pruned = surgery(net, &pair.consumer, &res.best).map_err(at_layer)?;
            let accuracy = evaluate(&pruned, eval_data)?;
            rows.push(SensitivityRow {
                layer: pair.producer.clone(),
                rate,
                accuracy,
            });
        }
    }
    Ok(SensitivityProfile {
        baseline_accuracy,
        rows,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanGroup {
    /// Producer conv ids pruned at this group's rate.
    pub layers: Vec<LayerId>,
    pub rate: f64,
}

/// Per-layer compression rates, grouped, plus the layers left untouched.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruningPlan {
    pub groups: Vec<PlanGroup>,
    #[serde(default)]
    pub skip: Vec<LayerId>,
}

impl PruningPlan {
    /// Single group covering every prunable layer at one rate.
    pub fn uniform(net: &NetworkSpec, rate: f64) -> Self {
        PruningPlan {
            groups: vec![PlanGroup {
                layers: prunable_pairs(net).into_iter().map(|p| p.producer).collect(),
                rate,
            }],
            skip: Vec::new(),
        }
    }

    /// The classic four-group VGG-16 split: conv1-3, conv4-6, conv7-10 and
    /// conv11-12 at 60/50/40/20% (conv13 stays untouched).
    pub fn vgg16_four_groups() -> Self {
        let group = |range: std::ops::RangeInclusive<usize>, rate: f64| PlanGroup {
            layers: range.map(|i| LayerId::from(format!("conv{i}").as_str())).collect(),
            rate,
        };
        PruningPlan {
            groups: vec![
                group(1..=3, 0.6),
                group(4..=6, 0.5),
                group(7..=10, 0.4),
                group(11..=12, 0.2),
            ],
            skip: vec![LayerId::from("conv13")],
        }
    }

    pub fn validate(&self, net: &NetworkSpec) -> Result<()> {
        let pairs = prunable_pairs(net);
        let mut seen = Vec::new();
        for group in &self.groups {
            if !(0.0 < group.rate && group.rate < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "group rate {} outside (0, 1)",
                    group.rate
                )));
            }
            for layer in &group.layers {
                if seen.contains(layer) {
                    return Err(Error::InvalidArgument(format!(
                        "layer {layer} appears in more than one group"
                    )));
                }
                if self.skip.contains(layer) {
                    return Err(Error::InvalidArgument(format!(
                        "layer {layer} is both grouped and skipped"
                    )));
                }
                if !pairs.iter().any(|p| &p.producer == layer) {
                    return Err(Error::PruneBoundary(
                        layer.to_string(),
                        "not a prunable producer".into(),
                    ));
                }
                seen.push(layer.clone());
            }
        }
        Ok(())
    }

    /// `(producer, rate)` steps in the network's forward order.
    pub fn steps(&self, net: &NetworkSpec) -> Result<Vec<(LayerId, f64)>> {
        self.validate(net)?;
        let rate_of = |id: &LayerId| {
            self.groups
                .iter()
                .find(|g| g.layers.contains(id))
                .map(|g| g.rate)
        };
        Ok(prunable_pairs(net)
            .into_iter()
            .filter_map(|p| rate_of(&p.producer).map(|r| (p.producer, r)))
            .collect())
    }
}

/// Builds a plan from explicit group boundaries over the scanned layers.
/// Scanned layers not covered by any group land in the skip set.
pub fn make_plan(
    profile: &SensitivityProfile,
    boundaries: &[Vec<LayerId>],
    rates: &[f64],
) -> Result<PruningPlan> {
    if rates.is_empty() {
        return Err(Error::InvalidArgument("no rates given".into()));
    }
    if boundaries.len() != rates.len() {
        return Err(Error::InvalidArgument(format!(
            "{} groups vs {} rates",
            boundaries.len(),
            rates.len()
        )));
    }
    let mut groups = Vec::new();
    let mut seen: Vec<LayerId> = Vec::new();
    for (layers, &rate) in boundaries.iter().zip(rates) {
        for layer in layers {
            if seen.contains(layer) {
                return Err(Error::InvalidArgument(format!(
                    "layer {layer} appears in more than one group"
                )));
            }
            seen.push(layer.clone());
        }
        groups.push(PlanGroup {
            layers: layers.clone(),
            rate,
        });
    }
    let mut skip = Vec::new();
    for row in &profile.rows {
        if !seen.contains(&row.layer) && !skip.contains(&row.layer) {
            skip.push(row.layer.clone());
        }
    }
    Ok(PruningPlan { groups, skip })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    /// Epochs of teacher-guided fine-tuning after each pruned layer.
    pub inter_epochs: usize,
    pub inter_lr: f64,
    /// Extra fine-tuning after the last layer, learning rate decaying
    /// geometrically from `final_lr_start` to `final_lr_end`.
    pub final_epochs: usize,
    pub final_lr_start: f64,
    pub final_lr_end: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            inter_epochs: 1,
            inter_lr: 1e-3,
            final_epochs: 20,
            final_lr_start: 1e-3,
            final_lr_end: 1e-5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PruneOptions {
    pub ga: GaConfig,
    pub sample: SampleConfig,
    pub finetune: FinetuneConfig,
    pub distill: DistillConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerReport {
    pub producer: String,
    pub consumer: String,
    pub rate: f64,
    pub channels_before: usize,
    pub kept: usize,
    /// Keep-mask as 0/1 per channel.
    pub mask: Vec<u8>,
    pub delta_e: f64,
    pub accuracy_after: f64,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GaLog {
    pub layer: String,
    pub history: Vec<GenerationRecord>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PruneReport {
    pub baseline_params: u64,
    pub baseline_flops: u64,
    pub baseline_accuracy: f64,
    pub layers: Vec<LayerReport>,
    pub final_accuracy: f64,
    pub pruned_params: u64,
    pub pruned_flops: u64,
    pub ga_logs: Vec<GaLog>,
}

impl PruneReport {
    pub fn layers_csv(&self) -> String {
        let mut out = String::from(
            "producer,consumer,rate,channels_before,kept,delta_e,accuracy_after,params,flops\n",
        );
        for l in &self.layers {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                l.producer,
                l.consumer,
                l.rate,
                l.channels_before,
                l.kept,
                l.delta_e,
                l.accuracy_after,
                l.params,
                l.flops
            ));
        }
        out
    }
}

/// Runs the full pipeline over `net` and returns the pruned network plus a
/// report. The teacher (a frozen copy of the input) guides every fine-tuning
/// phase; the input network itself is never mutated.
pub fn prune_model(
    net: &NetworkSpec,
    plan: &PruningPlan,
    train: &Dataset,
    eval_data: &Dataset,
    opts: &PruneOptions,
) -> Result<(NetworkSpec, PruneReport)> {
    let steps = plan.steps(net)?;
    let teacher = net.clone();
    let mut student = net.clone();

    let baseline = model_stats(net)?;
    let baseline_accuracy = evaluate(net, eval_data)?;
    let mut layers = Vec::new();
    let mut ga_logs = Vec::new();

    let attention_pairs = opts
        .distill
        .pairs
        .clone()
        .unwrap_or_else(|| default_attention_pairs(net));

    for (step_idx, (producer, rate)) in steps.iter().enumerate() {
        let at_layer = |e: Error| Error::AtLayer {
            layer: producer.to_string(),
            source: Box::new(e),
        };
        // Pairs shift as surgery rewrites the student; look up fresh.
        let pair = prunable_pairs(&student)
            .into_iter()
            .find(|p| &p.producer == producer)
            .ok_or_else(|| {
                Error::PruneBoundary(producer.to_string(), "vanished during pruning".into())
            })?;

        let mut sample_rng = seeded_stream(opts.seed, 1_000 + step_idx as u64);
        let vs = sample_volumes(&student, train, &pair.consumer, &opts.sample, &mut sample_rng)
            .map_err(at_layer)?;
        let hessian = compute_hessian(&vs).map_err(at_layer)?;
        let weights = student.conv(&pair.consumer)?.weight_matrix();
        let ctx = LayerContext {
            hessian: &hessian,
            weights: &weights,
            channels: pair.channels,
            rate: *rate,
        };
        let mut ga_rng = seeded_stream(opts.seed, 2_000 + step_idx as u64);
        let res = evolve(&ctx, &opts.ga, &mut ga_rng).map_err(at_layer)?;

        student = surgery(&student, &pair.consumer, &res.best).map_err(at_layer)?;

        if opts.finetune.inter_epochs > 0 {
            let cfg = DistillConfig {
                beta: opts.distill.beta,
                pairs: Some(attention_pairs.clone()),
                epochs: opts.finetune.inter_epochs,
                optimizer: opts.distill.optimizer.with_lr(opts.finetune.inter_lr),
            };
            let mut ft_rng = seeded_stream(opts.seed, 3_000 + step_idx as u64);
            finetune_kd(&mut student, &teacher, train, &cfg, &mut ft_rng).map_err(at_layer)?;
        }

        let stats = model_stats(&student)?;
        layers.push(LayerReport {
            producer: producer.to_string(),
            consumer: pair.consumer.to_string(),
            rate: *rate,
            channels_before: pair.channels,
            kept: res.keep,
            mask: res.best.bits().iter().map(|&b| b as u8).collect(),
            delta_e: res.best_error,
            accuracy_after: evaluate(&student, eval_data)?,
            params: stats.params,
            flops: stats.flops,
        });
        ga_logs.push(GaLog {
            layer: producer.to_string(),
            history: res.history,
        });
    }

    if !steps.is_empty() && opts.finetune.final_epochs > 0 {
        let epochs = opts.finetune.final_epochs;
        let mut optimizer = opts.distill.optimizer.with_lr(opts.finetune.final_lr_start);
        if epochs > 1 && opts.finetune.final_lr_end != opts.finetune.final_lr_start {
            let m = (opts.finetune.final_lr_end / opts.finetune.final_lr_start)
                .powf(1.0 / (epochs as f64 - 1.0));
            optimizer.schedule = (1..epochs).map(|e| (e, m)).collect();
        }
        let cfg = DistillConfig {
            beta: opts.distill.beta,
            pairs: Some(attention_pairs),
            epochs,
            optimizer,
        };
        let mut ft_rng = seeded_stream(opts.seed, 4_000);
        finetune_kd(&mut student, &teacher, train, &cfg, &mut ft_rng)?;
    }

    let final_stats = model_stats(&student)?;
    let report = PruneReport {
        baseline_params: baseline.params,
        baseline_flops: baseline.flops,
        baseline_accuracy,
        layers,
        final_accuracy: evaluate(&student, eval_data)?,
        pruned_params: final_stats.params,
        pruned_flops: final_stats.flops,
        ga_logs,
    };
    Ok((student, report))
}
