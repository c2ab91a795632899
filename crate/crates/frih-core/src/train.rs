//! End-to-end optimization of both stages under one loss.

use crate::augment::{augment, hflip_mask, AugmentKind};
use crate::data::CompositeSample;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::{loss_coarse, loss_total, LossBreakdown};
use crate::model::{build_model, forward_coarse, forward_pipeline, ModelConfig, ModelParameters, ParamBinding};
use crate::optim::{adam_step, AdamState, GradMap, ADAM_EPS};
use crate::submask::{extract_submasks, SubmaskSet};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Optimization schedule and loop behavior.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Initial learning rate.
    pub lr: f64,
    /// Decay breakpoints on the 180-epoch reference scale; they shrink
    /// proportionally under a smaller epoch budget.
    pub decay_epochs: (usize, usize),
    pub decay_factor: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    /// Floor on the loss-normalizing area, in pixels.
    pub a_min: usize,
    pub seed: u64,
    /// Stop after this many optimizer steps regardless of epochs.
    pub max_steps: Option<usize>,
    /// Apply flip/crop augmentation per step.
    pub augment: bool,
    /// Reuse submasks per sample id (recomputed after crops either way).
    pub cache_submasks: bool,
    /// Train the coarse stage alone: no submasks, no cascade, loss is the
    /// coarse term only. The ablation baseline.
    pub base_only: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 180,
            lr: 0.008,
            decay_epochs: (160, 175),
            decay_factor: 10.0,
            batch_size: 4,
            beta1: 0.9,
            beta2: 0.999,
            a_min: 100,
            seed: 0,
            max_steps: None,
            augment: false,
            cache_submasks: true,
            base_only: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config {
                key: "train.epochs".into(),
                reason: "must be >= 1".into(),
            });
        }
        if self.batch_size == 0 {
            return Err(Error::Config {
                key: "train.batch_size".into(),
                reason: "must be >= 1".into(),
            });
        }
        if self.a_min == 0 {
            return Err(Error::Config {
                key: "train.a_min".into(),
                reason: "must be >= 1".into(),
            });
        }
        let (d0, d1) = self.decay_epochs;
        if !(d0 < d1 && d1 < 180) {
            return Err(Error::Config {
                key: "train.decay_epochs".into(),
                reason: format!("({d0}, {d1}) must satisfy d0 < d1 < 180 (reference scale)"),
            });
        }
        if !(self.lr > 0.0 && self.decay_factor > 1.0) {
            return Err(Error::Config {
                key: "train.lr".into(),
                reason: "lr must be positive and decay_factor > 1".into(),
            });
        }
        Ok(())
    }
}

/// Piecewise-constant schedule. Breakpoints are the reference epochs scaled
/// by epochs/180 and rounded (halves round down, matching the scaled-budget
/// contract).
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let bp = |reference: usize| (2 * reference * cfg.epochs + 179) / 360;
    let mut lr = cfg.lr;
    if epoch >= bp(cfg.decay_epochs.0) {
        lr /= cfg.decay_factor;
    }
    if epoch >= bp(cfg.decay_epochs.1) {
        lr /= cfg.decay_factor;
    }
    lr
}

/// One optimizer step's scalars, also the training-log record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub l_coarse: f64,
    pub l_refine: f64,
    pub l_total: f64,
    pub lr: f64,
}

/// Diagnostic state captured when a loss goes non-finite.
#[derive(Debug, Clone, Serialize)]
pub struct NonFiniteReport {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub sample_ids: Vec<String>,
    pub breakdowns: Vec<LossBreakdown>,
    pub param_abs_max: f32,
}

pub struct TrainOutcome {
    pub params: ModelParameters,
    pub records: Vec<StepRecord>,
}

fn param_abs_max(params: &ModelParameters) -> f32 {
    params
        .iter()
        .flat_map(|(_, t)| t.data().iter().copied())
        .fold(0.0f32, |a, v| a.max(v.abs()))
}

fn submasks_for<'a>(
    cache: &'a mut HashMap<String, SubmaskSet>,
    enabled: bool,
    sample: &CompositeSample,
    kind: AugmentKind,
    dc: f64,
) -> Result<SubmaskSet> {
    if !enabled || kind == AugmentKind::Cropped {
        return extract_submasks(&sample.composite, &sample.mask, dc);
    }
    let base = match cache.get(&sample.id) {
        Some(s) => s.clone(),
        None => {
            // Cache the unflipped extraction; flips reuse it mirrored.
            let s = extract_submasks(&sample.composite, &sample.mask, dc)?;
            let unflipped = if kind == AugmentKind::FlipOnly {
                SubmaskSet {
                    submasks: s.submasks.iter().map(hflip_mask).collect(),
                    labels: hflip_labels(&s),
                    ..s.clone()
                }
            } else {
                s
            };
            cache.insert(sample.id.clone(), unflipped.clone());
            unflipped
        }
    };
    Ok(match kind {
        AugmentKind::FlipOnly => SubmaskSet {
            submasks: base.submasks.iter().map(hflip_mask).collect(),
            labels: hflip_labels(&base),
            ..base
        },
        _ => base,
    })
}

fn hflip_labels(set: &SubmaskSet) -> Vec<u8> {
    let w = set.submasks[0].width();
    let mut labels = set.labels.clone();
    for row in labels.chunks_mut(w) {
        row.reverse();
    }
    labels
}

/// Train on `dataset` starting from `initial` (or a fresh seed-built model).
/// Per step: coarse forward, submask extraction, K refinement passes, the
/// two-part loss, one backward through both stages, one Adam update.
pub fn train(
    dataset: &[CompositeSample],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    dc: f64,
    initial: Option<ModelParameters>,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("train: empty dataset"));
    }
    let r = model_cfg.resolution();
    for s in dataset {
        s.validate()?;
        if s.resolution() != (r, r) {
            return Err(Error::invalid(format!(
                "train: sample {} is {}x{}, expected {r}x{r}",
                s.id,
                s.resolution().0,
                s.resolution().1
            )));
        }
    }

    let mut params = match initial {
        Some(p) => p,
        None => build_model(model_cfg, cfg.seed)?,
    };
    let mut adam = AdamState::new();
    let mut cache: HashMap<String, SubmaskSet> = HashMap::new();
    let mut records = Vec::new();
    let mut step = 0usize;
    let trainable = |name: &str| !cfg.base_only || name.starts_with("base.");

    'epochs: for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);

        for batch in order.chunks(cfg.batch_size) {
            let mut graph = Graph::<f32>::new();
            let binding = ParamBinding::bind(&mut graph, &params, trainable);
            let mut batch_loss = None;
            let mut breakdowns = Vec::with_capacity(batch.len());
            let mut ids = Vec::with_capacity(batch.len());

            for &si in batch {
                let (sample, kind) = if cfg.augment {
                    augment(&dataset[si], r, &mut rng)
                } else {
                    (dataset[si].clone(), AugmentKind::Unchanged)
                };
                ids.push(sample.id.clone());
                let comp = graph.constant(sample.composite.clone());
                let mask_t = graph.constant(sample.mask.to_tensor());
                let target = graph.constant(sample.target.clone());

                let (l_total, breakdown) = if cfg.base_only {
                    let fwd = forward_coarse(&mut graph, &binding, &model_cfg.base, comp, mask_t)?;
                    let lc = loss_coarse(&mut graph, fwd.coarse, target, &sample.mask, cfg.a_min)?;
                    let v = graph.value(lc).scalar_value()? as f64;
                    (
                        lc,
                        LossBreakdown {
                            l_coarse: v,
                            l_refine: 0.0,
                            l_total: v,
                            per_submask: vec![],
                        },
                    )
                } else {
                    let submasks =
                        submasks_for(&mut cache, cfg.cache_submasks, &sample, kind, dc)?;
                    let nodes =
                        forward_pipeline(&mut graph, &binding, model_cfg, comp, mask_t, &submasks)?;
                    loss_total(
                        &mut graph,
                        nodes.coarse,
                        nodes.final_image,
                        target,
                        &sample.mask,
                        &submasks,
                        cfg.a_min,
                    )?
                };
                breakdowns.push(breakdown);
                batch_loss = Some(match batch_loss {
                    None => l_total,
                    Some(acc) => graph.add(acc, l_total)?,
                });
            }

            let total = graph.scale(batch_loss.expect("non-empty batch"), 1.0 / batch.len() as f64);
            let total_value = graph.value(total).scalar_value()? as f64;
            if !total_value.is_finite() || breakdowns.iter().any(|b| !b.l_total.is_finite()) {
                return Err(Error::NonFiniteLoss(Box::new(NonFiniteReport {
                    epoch,
                    step,
                    lr,
                    sample_ids: ids,
                    breakdowns,
                    param_abs_max: param_abs_max(&params),
                })));
            }

            let mut grads = graph.backward(total)?;
            let mut grad_map = GradMap::new();
            for (name, &id) in binding.iter() {
                if let Some(g) = grads.take(id) {
                    grad_map.insert(name.clone(), g);
                }
            }
            adam_step(&mut params, &grad_map, &mut adam, lr, cfg.beta1, cfg.beta2, ADAM_EPS);

            let n = breakdowns.len() as f64;
            let record = StepRecord {
                epoch,
                step,
                l_coarse: breakdowns.iter().map(|b| b.l_coarse).sum::<f64>() / n,
                l_refine: breakdowns.iter().map(|b| b.l_refine).sum::<f64>() / n,
                l_total: breakdowns.iter().map(|b| b.l_total).sum::<f64>() / n,
                lr,
            };
            on_step(&record);
            records.push(record);
            step += 1;
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
        }
    }

    Ok(TrainOutcome { params, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthesize_composite;
    use crate::tensor::{Mask, Tensor};

    pub(crate) fn tiny_model_cfg(resolution: usize) -> ModelConfig {
        let depth = resolution.trailing_zeros() as usize;
        ModelConfig {
            base: crate::model::BaseNetConfig {
                input_resolution: resolution,
                encoder_channels: (0..depth).map(|i| 4 + 2 * i.min(2)).collect(),
            },
            cascade: crate::model::CascadeConfig {
                encoder_channels: vec![3; depth],
                fusion_head_channels: 4,
            },
        }
    }

    fn tiny_sample(resolution: usize, seed: u64) -> CompositeSample {
        let mut data = vec![0.0f32; 3 * resolution * resolution];
        for (i, v) in data.iter_mut().enumerate() {
            *v = (((i as u64).wrapping_mul(seed * 2 + 31) % 200) as f32 + 20.0) / 255.0;
        }
        let target = Tensor::new(vec![3, resolution, resolution], data).unwrap();
        let mut mask = Mask::zeros(resolution, resolution);
        for y in resolution / 4..3 * resolution / 4 {
            for x in resolution / 4..3 * resolution / 4 {
                mask.set(y, x, 1);
            }
        }
        let mut s = synthesize_composite(&target, &mask, None, seed).unwrap();
        s.id = format!("tiny-{seed}");
        s
    }

    #[test]
    fn lr_schedule_reference_and_scaled() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 0.008);
        assert_eq!(lr_at(159, &cfg), 0.008);
        assert_eq!(lr_at(160, &cfg), 0.0008);
        assert_eq!(lr_at(174, &cfg), 0.0008);
        assert!((lr_at(175, &cfg) - 0.00008).abs() < 1e-12);

        let scaled = TrainConfig {
            epochs: 18,
            ..TrainConfig::default()
        };
        // breakpoints at 16 and 17
        assert_eq!(lr_at(15, &scaled), 0.008);
        assert_eq!(lr_at(16, &scaled), 0.0008);
        assert!((lr_at(17, &scaled) - 0.00008).abs() < 1e-12);
    }

    #[test]
    fn config_validation_names_keys() {
        let bad = TrainConfig {
            a_min: 0,
            ..TrainConfig::default()
        };
        match bad.validate() {
            Err(Error::Config { key, .. }) => assert_eq!(key, "train.a_min"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn short_training_run_decreases_loss_and_stays_finite() {
        let cfg = TrainConfig {
            epochs: 40,
            max_steps: Some(40),
            batch_size: 1,
            lr: 0.004,
            seed: 0,
            ..TrainConfig::default()
        };
        let model_cfg = tiny_model_cfg(16);
        let data = vec![tiny_sample(16, 1)];
        let out = train(&data, &model_cfg, &cfg, 0.1, None, |_| {}).unwrap();
        assert_eq!(out.records.len(), 40);
        assert!(out.records.iter().all(|r| r.l_total.is_finite()));
        let first = out.records.first().unwrap().l_total;
        let last = out.records.last().unwrap().l_total;
        assert!(last < first, "no improvement: {first} -> {last}");
    }

    #[test]
    fn base_only_mode_trains_only_base_parameters() {
        let cfg = TrainConfig {
            epochs: 2,
            max_steps: Some(2),
            batch_size: 1,
            base_only: true,
            ..TrainConfig::default()
        };
        let model_cfg = tiny_model_cfg(16);
        let init = build_model(&model_cfg, 0).unwrap();
        let data = vec![tiny_sample(16, 2)];
        let out = train(&data, &model_cfg, &cfg, 0.1, Some(init.clone()), |_| {}).unwrap();
        for (name, t) in out.params.iter() {
            let same = t == init.get(name).unwrap();
            if name.starts_with("base.") {
                assert!(!same || t.data().iter().all(|&v| v == 0.0), "{name} untouched");
            } else {
                assert!(same, "{name} should be frozen");
            }
        }
        assert!(out.records.iter().all(|r| r.l_refine == 0.0));
    }

    #[test]
    fn submask_cache_is_transparent() {
        let model_cfg = tiny_model_cfg(16);
        let data = vec![tiny_sample(16, 3), tiny_sample(16, 4)];
        let run = |cache: bool| {
            let cfg = TrainConfig {
                epochs: 2,
                max_steps: Some(4),
                batch_size: 1,
                cache_submasks: cache,
                ..TrainConfig::default()
            };
            train(&data, &model_cfg, &cfg, 0.1, None, |_| {})
                .unwrap()
                .records
                .iter()
                .map(|r| r.l_total)
                .collect::<Vec<_>>()
        };
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let model_cfg = tiny_model_cfg(16);
        let cfg = TrainConfig::default();
        assert!(train(&[], &model_cfg, &cfg, 0.1, None, |_| {}).is_err());
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostics() {
        // a poisoned initial model forces a non-finite loss on step one
        let model_cfg = tiny_model_cfg(16);
        let mut init = build_model(&model_cfg, 0).unwrap();
        let name = init.names().next().unwrap().clone();
        init.get_mut(&name).unwrap().data_mut()[0] = f32::NAN;
        let cfg = TrainConfig {
            epochs: 1,
            max_steps: Some(1),
            batch_size: 1,
            ..TrainConfig::default()
        };
        let data = vec![tiny_sample(16, 5)];
        match train(&data, &model_cfg, &cfg, 0.1, Some(init), |_| {}) {
            Err(Error::NonFiniteLoss(report)) => {
                assert_eq!(report.step, 0);
                assert_eq!(report.sample_ids.len(), 1);
            }
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
    }

    #[test]
    fn training_is_reproducible_for_a_seed() {
        let model_cfg = tiny_model_cfg(16);
        let data = vec![tiny_sample(16, 6)];
        let run = || {
            let cfg = TrainConfig {
                epochs: 3,
                max_steps: Some(3),
                batch_size: 1,
                augment: true,
                ..TrainConfig::default()
            };
            train(&data, &model_cfg, &cfg, 0.1, None, |_| {})
                .unwrap()
                .records
                .iter()
                .map(|r| r.l_total)
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
