//! Finite-difference verification of the block's reverse-mode gradients.
//!
//! The scalar loss is the sum of all outputs. Reverse-mode gradients with
//! respect to every parameter and every input entry are compared against
//! central differences with step 1e-5, in eval mode so the normalization
//! statistics stay fixed across probes.

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    branch_backward, branch_forward, branch_forward_cached, ensemble_backward, ensemble_forward,
    ensemble_forward_cached, marmot_backward, marmot_forward, marmot_forward_cached, BranchParams,
    EnsembleParams, MArMOTParams, Mode,
};
use crate::error::{Error, Result};
use crate::nn::Param;

const FD_STEP: f64 = 1e-5;

/// Which forward to verify.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckTarget {
    Branch,
    Ensemble,
    Marmot,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over all checked entries.
    pub max_rel_err: f64,
    /// Name and flat index of the worst entry.
    pub worst: String,
    /// Total number of scalar entries compared.
    pub entries: usize,
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6)
}

fn random_input(shape: (usize, usize, usize, usize), rng: &mut impl Rng) -> Array4<f64> {
    let mut x = Array4::zeros(shape);
    for v in x.iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    x
}

/// Give the normalization layers non-trivial fixed statistics so the eval
/// path is exercised away from the identity.
fn randomize_running_stats(p: &mut BranchParams, rng: &mut impl Rng) {
    for bn in [
        &mut p.entry_norm,
        &mut p.reduce_a_norm,
        &mut p.reduce_b_norm,
        &mut p.spatial_a_norm,
        &mut p.spatial_b_norm,
    ] {
        for v in bn.running_mean.iter_mut() {
            *v = rng.gen_range(-0.3..0.3);
        }
        for v in bn.running_var.iter_mut() {
            *v = rng.gen_range(0.5..1.5);
        }
    }
}

struct EntryCheck {
    max_rel_err: f64,
    worst: String,
    entries: usize,
}

impl EntryCheck {
    fn new() -> Self {
        EntryCheck {
            max_rel_err: 0.0,
            worst: String::new(),
            entries: 0,
        }
    }

    fn record(&mut self, name: &str, idx: usize, analytic: f64, numeric: f64) -> Result<()> {
        if !analytic.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite reverse-mode gradient in {name}[{idx}]"
            )));
        }
        let e = rel_err(analytic, numeric);
        self.entries += 1;
        if e > self.max_rel_err {
            self.max_rel_err = e;
            self.worst = format!("{name}[{idx}]");
        }
        Ok(())
    }

    fn into_report(self) -> GradCheckReport {
        GradCheckReport {
            max_rel_err: self.max_rel_err,
            worst: self.worst,
            entries: self.entries,
        }
    }
}

/// Snapshot (name, gradient entries) for every parameter.
fn snapshot_grads(visit: impl FnOnce(&mut dyn FnMut(&str, &mut Param))) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    visit(&mut |name: &str, p: &mut Param| {
        out.push((name.to_string(), p.grad.iter().copied().collect()));
    });
    out
}

/// Add `delta` to one scalar entry of a named parameter.
fn shift_entry(
    visit: impl FnOnce(&mut dyn FnMut(&str, &mut Param)),
    target: &str,
    idx: usize,
    delta: f64,
) {
    visit(&mut |name: &str, p: &mut Param| {
        if name == target {
            p.value.as_slice_mut().unwrap()[idx] += delta;
        }
    });
}

/// Sweep one input tensor against its analytic gradient.
fn sweep_input(
    check: &mut EntryCheck,
    label: &str,
    input: &Array4<f64>,
    analytic: &Array4<f64>,
    mut loss_at: impl FnMut(&Array4<f64>) -> Result<f64>,
) -> Result<()> {
    let mut probe = input.clone();
    for i in 0..probe.len() {
        let orig = probe.as_slice().unwrap()[i];
        probe.as_slice_mut().unwrap()[i] = orig + FD_STEP;
        let fp = loss_at(&probe)?;
        probe.as_slice_mut().unwrap()[i] = orig - FD_STEP;
        let fm = loss_at(&probe)?;
        probe.as_slice_mut().unwrap()[i] = orig;
        let numeric = (fp - fm) / (2.0 * FD_STEP);
        check.record(label, i, analytic.as_slice().unwrap()[i], numeric)?;
    }
    Ok(())
}

/// Run the finite-difference audit for one of the three forwards.
///
/// `shape` is the input feature-map shape (batch, channels, height, width);
/// the channel count must be even for the branch and composite targets.
pub fn gradient_check(
    target: CheckTarget,
    shape: (usize, usize, usize, usize),
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match target {
        CheckTarget::Branch => check_branch(shape, &mut rng),
        CheckTarget::Ensemble => check_ensemble(shape, &mut rng),
        CheckTarget::Marmot => check_marmot(shape, &mut rng),
    }
}

fn check_branch(
    shape: (usize, usize, usize, usize),
    rng: &mut ChaCha8Rng,
) -> Result<GradCheckReport> {
    let mut p = BranchParams::new(shape.1, rng)?;
    randomize_running_stats(&mut p, rng);
    let x = random_input(shape, rng);

    let (y, cache) = branch_forward_cached(&x, &mut p, Mode::Eval)?;
    let gy = Array4::ones(y.dim());
    let dx = branch_backward(&mut p, &cache, &gy);
    let grads = snapshot_grads(|f| p.visit_params("branch", f));

    let mut check = EntryCheck::new();
    sweep_input(&mut check, "input", &x, &dx, |probe| {
        Ok(branch_forward(probe, &mut p, Mode::Eval)?.sum())
    })?;

    for (name, entries) in &grads {
        for (i, &analytic) in entries.iter().enumerate() {
            shift_entry(|f| p.visit_params("branch", f), name, i, FD_STEP);
            let fp: f64 = branch_forward(&x, &mut p, Mode::Eval)?.sum();
            shift_entry(|f| p.visit_params("branch", f), name, i, -2.0 * FD_STEP);
            let fm: f64 = branch_forward(&x, &mut p, Mode::Eval)?.sum();
            shift_entry(|f| p.visit_params("branch", f), name, i, FD_STEP);
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            check.record(name, i, analytic, numeric)?;
        }
    }
    Ok(check.into_report())
}

fn check_ensemble(
    shape: (usize, usize, usize, usize),
    rng: &mut ChaCha8Rng,
) -> Result<GradCheckReport> {
    let mut p = EnsembleParams::new(shape.1, rng);
    let f_rgb = random_input(shape, rng);
    let f_nir = random_input(shape, rng);

    let (y, cache) = ensemble_forward_cached(&f_rgb, &f_nir, &p)?;
    let gy = Array4::ones(y.dim());
    let (d_rgb, d_nir) = ensemble_backward(&mut p, &cache, &gy);
    let grads = snapshot_grads(|f| p.visit_params("ensemble", f));

    let mut check = EntryCheck::new();
    sweep_input(&mut check, "f_rgb", &f_rgb, &d_rgb, |probe| {
        Ok(ensemble_forward(probe, &f_nir, &p)?.sum())
    })?;
    sweep_input(&mut check, "f_nir", &f_nir, &d_nir, |probe| {
        Ok(ensemble_forward(&f_rgb, probe, &p)?.sum())
    })?;

    for (name, entries) in &grads {
        for (i, &analytic) in entries.iter().enumerate() {
            shift_entry(|f| p.visit_params("ensemble", f), name, i, FD_STEP);
            let fp: f64 = ensemble_forward(&f_rgb, &f_nir, &p)?.sum();
            shift_entry(|f| p.visit_params("ensemble", f), name, i, -2.0 * FD_STEP);
            let fm: f64 = ensemble_forward(&f_rgb, &f_nir, &p)?.sum();
            shift_entry(|f| p.visit_params("ensemble", f), name, i, FD_STEP);
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            check.record(name, i, analytic, numeric)?;
        }
    }
    Ok(check.into_report())
}

fn check_marmot(
    shape: (usize, usize, usize, usize),
    rng: &mut ChaCha8Rng,
) -> Result<GradCheckReport> {
    let mut p = MArMOTParams::new(shape.1, rng)?;
    randomize_running_stats(&mut p.branch_rgb, rng);
    randomize_running_stats(&mut p.branch_nir, rng);
    let x = random_input(shape, rng);

    let (y, cache) = marmot_forward_cached(&x, &mut p, Mode::Eval)?;
    let gy = Array4::ones(y.dim());
    let dx = marmot_backward(&mut p, &cache, &gy);
    let grads = snapshot_grads(|f| p.visit_params("marmot", f));

    let mut check = EntryCheck::new();
    sweep_input(&mut check, "input", &x, &dx, |probe| {
        Ok(marmot_forward(probe, &mut p, Mode::Eval)?.sum())
    })?;

    for (name, entries) in &grads {
        for (i, &analytic) in entries.iter().enumerate() {
            shift_entry(|f| p.visit_params("marmot", f), name, i, FD_STEP);
            let fp: f64 = marmot_forward(&x, &mut p, Mode::Eval)?.sum();
            shift_entry(|f| p.visit_params("marmot", f), name, i, -2.0 * FD_STEP);
            let fm: f64 = marmot_forward(&x, &mut p, Mode::Eval)?.sum();
            shift_entry(|f| p.visit_params("marmot", f), name, i, FD_STEP);
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            check.record(name, i, analytic, numeric)?;
        }
    }
    Ok(check.into_report())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ensemble_gradients_pass() {
        let report = gradient_check(CheckTarget::Ensemble, (1, 4, 2, 2), 42).unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "ensemble max rel err {} at {}",
            report.max_rel_err,
            report.worst
        );
    }

    #[test]
    fn branch_gradients_pass() {
        let report = gradient_check(CheckTarget::Branch, (1, 4, 2, 2), 42).unwrap();
        assert!(
            report.max_rel_err < 1e-3,
            "branch max rel err {} at {}",
            report.max_rel_err,
            report.worst
        );
    }

    #[test]
    fn marmot_gradients_pass() {
        let report = gradient_check(CheckTarget::Marmot, (1, 4, 2, 2), 42).unwrap();
        assert!(
            report.max_rel_err < 1e-3,
            "composite max rel err {} at {}",
            report.max_rel_err,
            report.worst
        );
    }

    #[test]
    fn zero_weight_branch_input_gradient_is_identity() {
        // With all conv weights and normalization scales zero the branch is
        // the identity, so d(sum y)/dx must be exactly one everywhere.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = BranchParams::new(4, &mut rng).unwrap();
        p.visit_params("b", &mut |_, param: &mut Param| param.value.fill(0.0));
        let x = random_input((1, 4, 2, 2), &mut rng);
        let (y, cache) = branch_forward_cached(&x, &mut p, Mode::Eval).unwrap();
        let gy = Array4::ones(y.dim());
        let dx = branch_backward(&mut p, &cache, &gy);
        for v in dx.iter() {
            assert_eq!(*v, 1.0);
        }
    }
}
