//! Training loops and the synthetic dual-task dataset.

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{joint_loss, ForwardPass, LossWeights, ModelConfig, ParamStore, ToyModel, Variant};
use super::tape::{sigmoid, Tape};
use super::AutodiffError;
use crate::alignment::{apply_scale_shift, fit_slices};
use crate::raster::Raster;

/// Inputs with disparity and binary segmentation targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Array2<f64>,
    pub disparity: Vec<f64>,
    pub seg: Vec<f64>,
    pub mask: Vec<bool>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.disparity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.disparity.is_empty()
    }

    /// Contiguous batches of `batch_size` rows. A trailing batch shorter than
    /// two rows is merged into its predecessor so every batch can be aligned.
    pub fn batches(&self, batch_size: usize) -> Vec<std::ops::Range<usize>> {
        let n = self.len();
        let size = batch_size.max(2);
        let mut out: Vec<std::ops::Range<usize>> = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + size).min(n);
            out.push(start..end);
            start = end;
        }
        if out.len() > 1 && out.last().is_some_and(|r| r.len() < 2) {
            let tail = out.pop().unwrap();
            out.last_mut().unwrap().end = tail.end;
        }
        out
    }

    pub fn slice(&self, r: std::ops::Range<usize>) -> Dataset {
        Dataset {
            inputs: self.inputs.slice(s![r.clone(), ..]).to_owned(),
            disparity: self.disparity[r.clone()].to_vec(),
            seg: self.seg[r.clone()].to_vec(),
            mask: self.mask[r].to_vec(),
        }
    }
}

/// Shape of the generated synthetic task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub samples: usize,
    pub input_dim: usize,
    pub teacher_hidden: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            samples: 96,
            input_dim: 4,
            teacher_hidden: 6,
            seed: 2023,
        }
    }
}

/// Targets produced by a random shared-trunk teacher, so the task is exactly
/// realizable by the toy model. Disparity is the teacher's regression output
/// shifted so its minimum is 1; segmentation thresholds the teacher's logit at
/// its median so both classes are balanced.
pub fn synthetic_dataset(spec: SyntheticSpec) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let inputs = Array2::from_shape_fn((spec.samples, spec.input_dim), |_| rng.random_range(-1.0..1.0));
    let mut teacher = ToyModel::new(
        ModelConfig {
            input_dim: spec.input_dim,
            hidden_dim: spec.teacher_hidden,
            trunk_layers: 1,
            variant: Variant::V2,
        },
        spec.seed ^ 0x5eed_7eac,
    );
    // Sharper teacher weights give the targets some curvature.
    for i in 0..teacher.slot_count() {
        let v = teacher.slot_value(i) * 2.5;
        teacher.set_slot_value(i, v);
    }
    let mut tape = Tape::new();
    let f = teacher.forward(&mut tape, &inputs).expect("teacher dims match inputs");
    let raw = tape.value(f.disparity);
    let lowest = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let disparity: Vec<f64> = raw.iter().map(|d| d - lowest + 1.0).collect();
    let logits: Vec<f64> = tape.value(f.seg_logits).iter().copied().collect();
    let mut sorted = logits.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    let seg = logits.iter().map(|&z| if z >= median { 1.0 } else { 0.0 }).collect();
    Dataset {
        inputs,
        disparity,
        seg,
        mask: vec![true; spec.samples],
    }
}

/// Hyperparameters of a full-data SGD pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weights: LossWeights,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            batch_size: 16,
            weights: LossWeights::default(),
        }
    }
}

/// Non-finite network outputs mean the parameters have blown up; report
/// that as divergence rather than as whatever the loss would trip over.
fn ensure_finite(tape: &Tape, f: &ForwardPass) -> Result<(), AutodiffError> {
    for var in [f.disparity, f.seg_logits] {
        if let Some(&bad) = tape.value(var).iter().find(|x| !x.is_finite()) {
            return Err(AutodiffError::Diverged(bad));
        }
    }
    Ok(())
}

/// Forward, loss, backward; gradients land on the model's trainable slots.
pub fn loss_and_grad(model: &mut ToyModel, batch: &Dataset, weights: LossWeights) -> Result<f64, AutodiffError> {
    let mut tape = Tape::new();
    let f = model.forward(&mut tape, &batch.inputs)?;
    ensure_finite(&tape, &f)?;
    let loss = joint_loss(
        &mut tape,
        f.disparity,
        &batch.disparity,
        f.seg_logits,
        &batch.seg,
        &batch.mask,
        weights,
    )?;
    tape.backward(loss)?;
    model.params.absorb_grads(&tape, &f.params);
    Ok(tape.scalar_value(loss))
}

/// Joint loss of the model over the whole dataset, no gradients.
pub fn evaluate_loss(model: &ToyModel, data: &Dataset, weights: LossWeights) -> Result<f64, AutodiffError> {
    let mut frozen = model.clone();
    frozen.params.set_all_trainable(false);
    let mut tape = Tape::new();
    let f = frozen.forward(&mut tape, &data.inputs)?;
    ensure_finite(&tape, &f)?;
    let loss = joint_loss(
        &mut tape,
        f.disparity,
        &data.disparity,
        f.seg_logits,
        &data.seg,
        &data.mask,
        weights,
    )?;
    Ok(tape.scalar_value(loss))
}

/// One pass of minibatch SGD over `data`. `after_backward` sees the model
/// after every backward, before the update. Returns the mean batch loss.
pub fn sgd_pass(
    model: &mut ToyModel,
    data: &Dataset,
    config: &SgdConfig,
    mut after_backward: impl FnMut(&ToyModel),
) -> Result<f64, AutodiffError> {
    let batches = data.batches(config.batch_size);
    let mut total = 0.0;
    for r in &batches {
        let batch = data.slice(r.clone());
        let loss = loss_and_grad(model, &batch, config.weights)?;
        if !loss.is_finite() {
            return Err(AutodiffError::Diverged(loss));
        }
        after_backward(model);
        model.sgd_step(config.learning_rate)?;
        total += loss;
    }
    Ok(total / batches.len().max(1) as f64)
}

/// Regression-only pretraining of the trunk and disparity head of a V3
/// model. The segmentation head stays frozen and bit-identical; all slots
/// are trainable again afterwards.
pub fn pretrain_trunk(
    model: &mut ToyModel,
    data: &Dataset,
    epochs: usize,
    config: &SgdConfig,
) -> Result<(), AutodiffError> {
    if model.variant() != Variant::V3 {
        return Err(AutodiffError::WrongVariant(model.variant()));
    }
    let seg_head = model.seg_head_slots();
    for i in 0..model.slot_count() {
        model.set_slot_requires_grad(i, !seg_head.contains(&i));
    }
    let regression = SgdConfig {
        weights: LossWeights { ssi: 1.0, bce: 0.0 },
        ..*config
    };
    let result = (0..epochs).try_for_each(|_| sgd_pass(model, data, &regression, |_| {}).map(|_| ()));
    model.params.set_all_trainable(true);
    model.params.clear_grads();
    result
}

/// Summary numbers of a trained model on a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskScores {
    pub joint_loss: f64,
    /// RMSE of the aligned disparity.
    pub rmse_aligned: f64,
    /// Fraction of samples whose thresholded logit matches the label.
    pub seg_accuracy: f64,
}

pub fn score(model: &ToyModel, data: &Dataset, weights: LossWeights) -> Result<TaskScores, AutodiffError> {
    let joint = evaluate_loss(model, data, weights)?;
    let mut frozen = model.clone();
    frozen.params.set_all_trainable(false);
    let mut tape = Tape::new();
    let f = frozen.forward(&mut tape, &data.inputs)?;
    let pred: Vec<f64> = tape.value(f.disparity).iter().copied().collect();
    let fit = fit_slices(&pred, &data.disparity, &data.mask)?;
    let aligned = apply_scale_shift(&Raster::row(pred), fit);
    let mut sq = 0.0;
    let mut n = 0usize;
    for ((&a, &g), &m) in aligned.as_slice().iter().zip(&data.disparity).zip(&data.mask) {
        if m {
            sq += (a - g) * (a - g);
            n += 1;
        }
    }
    let correct = tape
        .value(f.seg_logits)
        .iter()
        .zip(&data.seg)
        .filter(|(&z, &y)| (sigmoid(z) >= 0.5) == (y >= 0.5))
        .count();
    Ok(TaskScores {
        joint_loss: joint,
        rmse_aligned: (sq / n.max(1) as f64).sqrt(),
        seg_accuracy: correct as f64 / data.len().max(1) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_data() {
        let d = synthetic_dataset(SyntheticSpec {
            samples: 33,
            ..Default::default()
        });
        let b = d.batches(16);
        assert_eq!(b, vec![0..16, 16..33]);
        assert_eq!(d.batches(100), vec![0..33]);
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = synthetic_dataset(SyntheticSpec::default());
        let b = synthetic_dataset(SyntheticSpec::default());
        assert_eq!(a, b);
        let ones = a.seg.iter().filter(|&&y| y == 1.0).count();
        assert_eq!(ones, a.len() / 2);
        assert!(a.disparity.iter().all(|&d| d > 0.0));
    }

    #[test]
    fn zero_epoch_pretraining_is_identity() {
        let data = synthetic_dataset(SyntheticSpec::default());
        let v2 = ToyModel::new(ModelConfig::default(), 4);
        let mut v3 = ToyModel::new(
            ModelConfig {
                variant: Variant::V3,
                ..Default::default()
            },
            4,
        );
        pretrain_trunk(&mut v3, &data, 0, &SgdConfig::default()).unwrap();
        assert_eq!(v2.params, v3.params);
    }

    #[test]
    fn pretraining_reduces_regression_loss_and_spares_seg_head() {
        let data = synthetic_dataset(SyntheticSpec::default());
        let mut v3 = ToyModel::new(
            ModelConfig {
                variant: Variant::V3,
                ..Default::default()
            },
            4,
        );
        let regression = LossWeights { ssi: 1.0, bce: 0.0 };
        let before = evaluate_loss(&v3, &data, regression).unwrap();
        let head = v3.seg_head_slots().map(|i| v3.slot_value(i).clone());
        pretrain_trunk(&mut v3, &data, 30, &SgdConfig::default()).unwrap();
        let after = evaluate_loss(&v3, &data, regression).unwrap();
        assert!(after < before, "{after} !< {before}");
        for (k, i) in v3.seg_head_slots().into_iter().enumerate() {
            let bits: Vec<u64> = v3.slot_value(i).iter().map(|x| x.to_bits()).collect();
            let want: Vec<u64> = head[k].iter().map(|x| x.to_bits()).collect();
            assert_eq!(bits, want);
        }
        assert!((0..v3.slot_count()).all(|i| v3.slot_requires_grad(i)));
    }

    #[test]
    fn pretraining_requires_v3() {
        let data = synthetic_dataset(SyntheticSpec::default());
        let mut v2 = ToyModel::new(ModelConfig::default(), 4);
        assert_eq!(
            pretrain_trunk(&mut v2, &data, 1, &SgdConfig::default()),
            Err(AutodiffError::WrongVariant(Variant::V2))
        );
    }

    #[test]
    fn training_is_deterministic() {
        let data = synthetic_dataset(SyntheticSpec::default());
        let run = || {
            let mut m = ToyModel::new(ModelConfig::default(), 8);
            for _ in 0..5 {
                sgd_pass(&mut m, &data, &SgdConfig::default(), |_| {}).unwrap();
            }
            m.params.scalar_values().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
