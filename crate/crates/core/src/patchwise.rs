//! Block-wise ("patch-wise") training over a model's parameter list.
//!
//! The parameter slots are split into contiguous patches of `m` slots. Every
//! patch starts from the same snapshot of all parameters, trains with only
//! its own slots unfrozen, and contributes just those slots to the result.
//! After the last patch each slot holds the value its own patch produced.
//! At most `m` gradient buffers are ever live during a patch.

use std::fmt::Write as _;
use std::ops::Range;
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{evaluate_loss, sgd_pass, AutodiffError, Dataset, Matrix, ParamStore, SgdConfig, ToyModel};

#[derive(Debug, Error, PartialEq)]
pub enum PatchwiseError {
    #[error("train percentage must lie in (0, 1], got {0}")]
    InvalidPercentage(f64),
    #[error("parameter list is empty")]
    NoParameters,
    #[error("train step changed frozen slot {slot} in patch {patch}")]
    TrainStepMutatedFrozen { patch: usize, slot: usize },
    #[error("slot selection refers to slot {0}, beyond the model")]
    BadSelection(usize),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Ordered partition of `0..n` into ranges of `m` (the last may be shorter).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchPlan {
    pub n: usize,
    pub m: usize,
    pub ranges: Vec<Range<usize>>,
}

/// Patch size for `n` slots: `n * p` rounded half-up, at least 1.
pub fn patch_size(n: usize, train_percentage: f64) -> usize {
    ((n as f64 * train_percentage + 0.5).floor() as usize).clamp(1, n.max(1))
}

pub fn plan_patches(n: usize, train_percentage: f64) -> Result<PatchPlan, PatchwiseError> {
    if !(train_percentage > 0.0 && train_percentage <= 1.0) {
        return Err(PatchwiseError::InvalidPercentage(train_percentage));
    }
    if n == 0 {
        return Err(PatchwiseError::NoParameters);
    }
    let m = patch_size(n, train_percentage);
    let iterations = n.div_ceil(m);
    let ranges = (0..iterations)
        .map(|i| {
            let start = i * m;
            start..(start + m).min(n)
        })
        .collect();
    Ok(PatchPlan { n, m, ranges })
}

/// How successive patches relate to each other.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum PatchMode {
    /// Every patch restarts from the common snapshot.
    #[default]
    Snapshot,
    /// Each patch continues from the previous patch's result. Not the
    /// reference scheme; kept for comparison.
    Sequential,
}

/// Which slots take part in patch-wise training.
///
/// By default every slot does. An encoder fraction below 1 keeps only the
/// first `round(fraction * trunk_slots)` trunk slots eligible, plus every
/// non-trunk slot; the remaining trunk slots stay frozen at their snapshot.
/// This reading of an "encoder percentage" is an interpretation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotSelection {
    pub slots: Vec<usize>,
}

impl SlotSelection {
    pub fn all(n: usize) -> Self {
        Self {
            slots: (0..n).collect(),
        }
    }

    pub fn encoder_fraction(n: usize, trunk_slots: usize, fraction: f64) -> Result<Self, PatchwiseError> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(PatchwiseError::InvalidPercentage(fraction));
        }
        let trunk_slots = trunk_slots.min(n);
        let keep = ((trunk_slots as f64 * fraction + 0.5).floor() as usize).min(trunk_slots);
        Ok(Self {
            slots: (0..keep).chain(trunk_slots..n).collect(),
        })
    }
}

/// Settings of one patch-wise run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchwiseConfig {
    pub train_percentage: f64,
    pub encoder_fraction: f64,
    pub mode: PatchMode,
}

impl Default for PatchwiseConfig {
    fn default() -> Self {
        Self {
            train_percentage: 1.0,
            encoder_fraction: 1.0,
            mode: PatchMode::Snapshot,
        }
    }
}

/// Handed to the train step; records observations made during a patch.
#[derive(Debug)]
pub struct PatchProbe<'a> {
    reference: &'a [Matrix],
    active: &'a [bool],
    patch: usize,
    max_grad_buffers: usize,
    observations: usize,
    frozen_violation: Option<usize>,
    pub loss_before: Option<f64>,
    pub loss_after: Option<f64>,
}

impl PatchProbe<'_> {
    /// Record the live gradient buffers and check that every frozen slot
    /// still matches the patch's reference bit for bit.
    pub fn observe<M: ParamStore + ?Sized>(&mut self, model: &M) {
        self.observations += 1;
        self.max_grad_buffers = self.max_grad_buffers.max(model.grad_buffer_count());
        if self.frozen_violation.is_none() {
            self.frozen_violation = first_changed_frozen(model, self.reference, self.active);
        }
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn max_grad_buffers(&self) -> usize {
        self.max_grad_buffers
    }
}

fn bits_equal(a: &Matrix, b: &Matrix) -> bool {
    a.dim() == b.dim() && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn first_changed_frozen<M: ParamStore + ?Sized>(model: &M, reference: &[Matrix], active: &[bool]) -> Option<usize> {
    (0..model.slot_count()).find(|&i| !active[i] && !bits_equal(model.slot_value(i), &reference[i]))
}

/// Hex digest of every slot's value bits.
pub fn param_checksum<M: ParamStore + ?Sized>(model: &M) -> String {
    let mut h = Sha256::new();
    for i in 0..model.slot_count() {
        let v = model.slot_value(i);
        h.update((v.nrows() as u64).to_le_bytes());
        h.update((v.ncols() as u64).to_le_bytes());
        for x in v.iter() {
            h.update(x.to_bits().to_le_bytes());
        }
    }
    let digest = h.finalize();
    let mut out = String::with_capacity(16);
    for byte in &digest[..8] {
        let _ = write!(out, "{byte:02x}");
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchRecord {
    pub patch_index: usize,
    /// Range into the eligible slot list.
    pub range: Range<usize>,
    pub train_steps: usize,
    pub max_grad_buffers: usize,
    pub checksum_before: String,
    pub checksum_after: String,
    pub loss_before: Option<f64>,
    pub loss_after: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchTrainReport {
    pub m: usize,
    pub patches: Vec<PatchRecord>,
    pub wall_time: Duration,
}

/// Patch-wise training over every slot of `model`.
pub fn patchwise_train<M, F>(
    model: &mut M,
    train_percentage: f64,
    train_step: F,
) -> Result<PatchTrainReport, PatchwiseError>
where
    M: ParamStore,
    F: FnMut(&mut M, &mut PatchProbe<'_>) -> Result<(), PatchwiseError>,
{
    let selection = SlotSelection::all(model.slot_count());
    patchwise_train_selected(model, train_percentage, &selection, PatchMode::Snapshot, train_step)
}

/// Patch-wise training restricted to `selection`, in the given mode.
///
/// Slots outside the selection stay frozen at their snapshot throughout.
/// All slots are left trainable on return.
pub fn patchwise_train_selected<M, F>(
    model: &mut M,
    train_percentage: f64,
    selection: &SlotSelection,
    mode: PatchMode,
    mut train_step: F,
) -> Result<PatchTrainReport, PatchwiseError>
where
    M: ParamStore,
    F: FnMut(&mut M, &mut PatchProbe<'_>) -> Result<(), PatchwiseError>,
{
    let started = Instant::now();
    let n = model.slot_count();
    if let Some(&bad) = selection.slots.iter().find(|&&s| s >= n) {
        return Err(PatchwiseError::BadSelection(bad));
    }
    let plan = plan_patches(selection.slots.len(), train_percentage)?;
    let saved: Vec<Matrix> = (0..n).map(|i| model.slot_value(i).clone()).collect();
    let mut updated: Vec<Option<Matrix>> = vec![None; n];
    let mut patches = Vec::with_capacity(plan.ranges.len());

    for (patch_index, range) in plan.ranges.iter().enumerate() {
        let mut active = vec![false; n];
        for &slot in &selection.slots[range.clone()] {
            active[slot] = true;
        }
        for (i, &flag) in active.iter().enumerate() {
            if mode == PatchMode::Snapshot {
                model.set_slot_value(i, saved[i].clone());
            }
            model.set_slot_requires_grad(i, flag);
        }
        let reference: Vec<Matrix> = match mode {
            PatchMode::Snapshot => saved.clone(),
            PatchMode::Sequential => (0..n).map(|i| model.slot_value(i).clone()).collect(),
        };
        let checksum_before = param_checksum(model);

        let mut probe = PatchProbe {
            reference: &reference,
            active: &active,
            patch: patch_index,
            max_grad_buffers: 0,
            observations: 0,
            frozen_violation: None,
            loss_before: None,
            loss_after: None,
        };
        probe.observe(model);
        train_step(model, &mut probe)?;
        probe.observe(model);
        if let Some(slot) = probe.frozen_violation {
            return Err(PatchwiseError::TrainStepMutatedFrozen {
                patch: patch_index,
                slot,
            });
        }

        for &slot in &selection.slots[range.clone()] {
            updated[slot] = Some(model.slot_value(slot).clone());
        }
        patches.push(PatchRecord {
            patch_index,
            range: range.clone(),
            train_steps: 1,
            max_grad_buffers: probe.max_grad_buffers,
            checksum_before,
            checksum_after: param_checksum(model),
            loss_before: probe.loss_before,
            loss_after: probe.loss_after,
        });
    }

    for (i, value) in updated.into_iter().enumerate() {
        model.set_slot_value(i, value.unwrap_or_else(|| saved[i].clone()));
        model.set_slot_requires_grad(i, true);
    }
    Ok(PatchTrainReport {
        m: plan.m,
        patches,
        wall_time: started.elapsed(),
    })
}

/// Per-epoch report of [`run_patchwise_epochs`] or [`run_plain_epochs`].
#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub report: PatchTrainReport,
}

/// Repeat patch-wise training for `epochs`, each train step being one full
/// SGD pass of the joint loss over `data`.
pub fn run_patchwise_epochs(
    model: &mut ToyModel,
    config: &PatchwiseConfig,
    epochs: usize,
    data: &Dataset,
    sgd: &SgdConfig,
) -> Result<Vec<EpochReport>, PatchwiseError> {
    let selection = if config.encoder_fraction < 1.0 {
        SlotSelection::encoder_fraction(model.slot_count(), model.trunk_slot_count(), config.encoder_fraction)?
    } else {
        SlotSelection::all(model.slot_count())
    };
    let mut reports = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let report = patchwise_train_selected(model, config.train_percentage, &selection, config.mode, |m, probe| {
            full_pass(m, data, sgd, probe)
        })?;
        reports.push(EpochReport { epoch, report });
    }
    Ok(reports)
}

/// The same epochs without any patch machinery: every slot trainable, one
/// SGD pass per epoch. Reported as a single patch covering all slots.
pub fn run_plain_epochs(
    model: &mut ToyModel,
    epochs: usize,
    data: &Dataset,
    sgd: &SgdConfig,
) -> Result<Vec<EpochReport>, PatchwiseError> {
    let n = model.slot_count();
    model.params.set_all_trainable(true);
    let active = vec![true; n];
    let mut reports = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let started = Instant::now();
        let reference: Vec<Matrix> = Vec::new();
        let checksum_before = param_checksum(model);
        let mut probe = PatchProbe {
            reference: &reference,
            active: &active,
            patch: 0,
            max_grad_buffers: 0,
            observations: 0,
            frozen_violation: None,
            loss_before: None,
            loss_after: None,
        };
        full_pass(model, data, sgd, &mut probe)?;
        let record = PatchRecord {
            patch_index: 0,
            range: 0..n,
            train_steps: 1,
            max_grad_buffers: probe.max_grad_buffers,
            checksum_before,
            checksum_after: param_checksum(model),
            loss_before: probe.loss_before,
            loss_after: probe.loss_after,
        };
        model.params.clear_grads();
        reports.push(EpochReport {
            epoch,
            report: PatchTrainReport {
                m: n,
                patches: vec![record],
                wall_time: started.elapsed(),
            },
        });
    }
    Ok(reports)
}

fn full_pass(
    model: &mut ToyModel,
    data: &Dataset,
    sgd: &SgdConfig,
    probe: &mut PatchProbe<'_>,
) -> Result<(), PatchwiseError> {
    probe.loss_before = Some(evaluate_loss(model, data, sgd.weights)?);
    sgd_pass(model, data, sgd, |m| probe.observe(m))?;
    let after = evaluate_loss(model, data, sgd.weights)?;
    if !after.is_finite() {
        return Err(AutodiffError::Diverged(after).into());
    }
    probe.loss_after = Some(after);
    Ok(())
}

/// CSV header of [`reports_to_csv`].
pub const REPORT_HEADER: &str = "epoch,patch_index,start,end,loss_before,loss_after,max_grad_buffers";

fn fmt_loss(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.17e}")).unwrap_or_default()
}

/// One row per patch per epoch. Wall time is left out so the output is
/// reproducible byte for byte.
pub fn reports_to_csv(reports: &[EpochReport]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in reports {
        for p in &r.report.patches {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.epoch,
                p.patch_index,
                p.range.start,
                p.range.end,
                fmt_loss(p.loss_before),
                fmt_loss(p.loss_after),
                p.max_grad_buffers
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamSet;
    use ndarray::array;

    fn scalars(p: &ParamSet) -> Vec<f64> {
        p.scalar_values()
    }

    #[test]
    fn plan_examples() {
        let p = plan_patches(10, 0.5).unwrap();
        assert_eq!((p.m, p.ranges.clone()), (5, vec![0..5, 5..10]));
        assert_eq!(plan_patches(10, 1.0).unwrap().ranges, vec![0..10]);
        let p = plan_patches(7, 0.5).unwrap();
        assert_eq!((p.m, p.ranges), (4, vec![0..4, 4..7]));
        assert_eq!(plan_patches(3, 0.1).unwrap().m, 1);
        assert_eq!(plan_patches(5, 0.0), Err(PatchwiseError::InvalidPercentage(0.0)));
        assert_eq!(plan_patches(5, 1.5), Err(PatchwiseError::InvalidPercentage(1.5)));
        assert_eq!(plan_patches(0, 0.5), Err(PatchwiseError::NoParameters));
    }

    #[test]
    fn plus_one_trace() {
        let mut p = ParamSet::from_scalars(&[1.0, 2.0]);
        patchwise_train(&mut p, 0.5, |m: &mut ParamSet, _| {
            for i in 0..m.slot_count() {
                if m.slot_requires_grad(i) {
                    let v = m.slot_value(i) + 1.0;
                    m.set_slot_value(i, v);
                }
            }
            Ok(())
        })
        .unwrap();
        assert_eq!(scalars(&p), vec![2.0, 3.0]);
    }

    fn sum_step(m: &mut ParamSet) {
        let total: f64 = m.scalar_values().iter().sum();
        for i in 0..m.slot_count() {
            if m.slot_requires_grad(i) {
                m.set_slot_value(i, array![[total]]);
            }
        }
    }

    #[test]
    fn sum_trace_restores_snapshot() {
        let mut p = ParamSet::from_scalars(&[1.0, 2.0]);
        patchwise_train(&mut p, 0.5, |m: &mut ParamSet, _| {
            sum_step(m);
            Ok(())
        })
        .unwrap();
        assert_eq!(scalars(&p), vec![3.0, 3.0]);
    }

    #[test]
    fn sequential_mode_differs() {
        let mut p = ParamSet::from_scalars(&[1.0, 2.0]);
        patchwise_train_selected(
            &mut p,
            0.5,
            &SlotSelection::all(2),
            PatchMode::Sequential,
            |m: &mut ParamSet, _| {
                sum_step(m);
                Ok(())
            },
        )
        .unwrap();
        assert_eq!(scalars(&p), vec![3.0, 5.0]);
    }

    #[test]
    fn full_percentage_is_one_plain_step() {
        let mut a = ParamSet::from_scalars(&[0.1, -0.7, 3.3]);
        let mut b = a.clone();
        let step = |m: &mut ParamSet| {
            for i in 0..m.slot_count() {
                let v = m.slot_value(i).mapv(|x| x * 0.9 - 0.01);
                m.set_slot_value(i, v);
            }
        };
        patchwise_train(&mut a, 1.0, |m: &mut ParamSet, _| {
            step(m);
            Ok(())
        })
        .unwrap();
        step(&mut b);
        let bits = |p: &ParamSet| p.scalar_values().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn frozen_mutation_detected() {
        let mut p = ParamSet::from_scalars(&[1.0, 2.0]);
        let err = patchwise_train(&mut p, 0.5, |m: &mut ParamSet, _| {
            m.set_slot_value(1, array![[9.0]]);
            Ok(())
        })
        .unwrap_err();
        assert_eq!(err, PatchwiseError::TrainStepMutatedFrozen { patch: 0, slot: 1 });
    }

    #[test]
    fn encoder_fraction_selection() {
        let s = SlotSelection::encoder_fraction(8, 4, 0.5).unwrap();
        assert_eq!(s.slots, vec![0, 1, 4, 5, 6, 7]);
        assert_eq!(
            SlotSelection::encoder_fraction(8, 4, 1.0).unwrap(),
            SlotSelection::all(8)
        );

        let mut p = ParamSet::from_scalars(&[1.0, 2.0, 3.0, 4.0]);
        let sel = SlotSelection { slots: vec![0, 2, 3] };
        patchwise_train_selected(&mut p, 0.5, &sel, PatchMode::Snapshot, |m: &mut ParamSet, _| {
            for i in 0..m.slot_count() {
                if m.slot_requires_grad(i) {
                    let v = m.slot_value(i) * 10.0;
                    m.set_slot_value(i, v);
                }
            }
            Ok(())
        })
        .unwrap();
        assert_eq!(scalars(&p), vec![10.0, 2.0, 30.0, 40.0]);
    }

    #[test]
    fn checksum_tracks_bits() {
        let a = ParamSet::from_scalars(&[0.0]);
        let b = ParamSet::from_scalars(&[-0.0]);
        assert_ne!(param_checksum(&a), param_checksum(&b));
        assert_eq!(param_checksum(&a).len(), 16);
    }

    #[test]
    fn csv_layout() {
        let reports = vec![EpochReport {
            epoch: 0,
            report: PatchTrainReport {
                m: 2,
                patches: vec![PatchRecord {
                    patch_index: 0,
                    range: 0..2,
                    train_steps: 1,
                    max_grad_buffers: 2,
                    checksum_before: String::new(),
                    checksum_after: String::new(),
                    loss_before: Some(1.5),
                    loss_after: Some(0.25),
                }],
                wall_time: Duration::ZERO,
            },
        }];
        assert_eq!(
            reports_to_csv(&reports),
            format!("{REPORT_HEADER}\n0,0,0,2,1.50000000000000000e0,2.50000000000000000e-1,2\n")
        );
    }
}
