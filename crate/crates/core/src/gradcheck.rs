//! Central finite-difference checks of the hand-written gradients.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::model::{init_model, GradientSet, ModelConfig, Parameters};
use crate::objectives::{loss_clo, loss_midalign, loss_sft, TrainData};
use crate::seed::rng_for;
use crate::worldgen::{emit_training_corpora, generate_world, WorldSpec, PIVOT};

#[derive(Debug, Clone, PartialEq)]
pub struct FdConfig {
    pub step: f64,
    /// Relative tolerance for significant gradients.
    pub tol: f64,
    /// Number of significant parameters sampled.
    pub samples: usize,
    /// Gradients below this magnitude are compared in absolute terms only:
    /// there the difference quotient is dominated by rounding in the loss.
    pub significant: f64,
    pub abs_tol: f64,
    pub small_samples: usize,
    pub seed: u64,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self { step: 1e-5, tol: 1e-6, samples: 120, significant: 1e-3, abs_tol: 1e-9, small_samples: 20, seed: 42 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub name: String,
    pub checked: usize,
    pub worst_rel: f64,
    pub small_checked: usize,
    pub worst_small_abs: f64,
    /// One line per parameter outside tolerance.
    pub failures: Vec<String>,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compares `f`'s analytic gradient with central differences on sampled parameters.
pub fn check_gradients<F>(name: &str, params: &Parameters, cfg: &FdConfig, f: F) -> Result<FdReport>
where
    F: Fn(&Parameters) -> Result<(f64, GradientSet)>,
{
    let (_, grads) = f(params)?;
    let g = grads.as_slice();
    let mut significant: Vec<usize> = (0..g.len()).filter(|&i| g[i].abs() >= cfg.significant).collect();
    let mut small: Vec<usize> = (0..g.len()).filter(|&i| g[i].abs() < cfg.significant).collect();
    if significant.len() < cfg.samples {
        return Err(Error::Precondition(format!("{name}: only {} significant gradients", significant.len())));
    }
    let mut rng = rng_for(cfg.seed, &format!("gradcheck/{name}"));
    significant.shuffle(&mut rng);
    small.shuffle(&mut rng);

    let numeric = |i: usize| -> Result<f64> {
        let mut p = params.clone();
        p.as_mut_slice()[i] += cfg.step;
        let up = f(&p)?.0;
        p.as_mut_slice()[i] -= 2.0 * cfg.step;
        let down = f(&p)?.0;
        Ok((up - down) / (2.0 * cfg.step))
    };

    let mut report =
        FdReport { name: name.to_string(), checked: 0, worst_rel: 0.0, small_checked: 0, worst_small_abs: 0.0, failures: Vec::new() };
    for &i in significant.iter().take(cfg.samples) {
        let (a, n) = (g[i], numeric(i)?);
        let rel = (a - n).abs() / a.abs().max(n.abs());
        report.worst_rel = report.worst_rel.max(rel);
        report.checked += 1;
        if rel.is_nan() || rel > cfg.tol {
            report.failures.push(format!("param {i}: analytic {a:e} numeric {n:e} rel {rel:e}"));
        }
    }
    for &i in small.iter().take(cfg.small_samples) {
        let (a, n) = (g[i], numeric(i)?);
        let abs = (a - n).abs();
        report.worst_small_abs = report.worst_small_abs.max(abs);
        report.small_checked += 1;
        if abs.is_nan() || abs > cfg.abs_tol {
            report.failures.push(format!("small param {i}: analytic {a:e} numeric {n:e}"));
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradLoss {
    Sft,
    Midalign,
    Clo,
}

/// Reference model over the default world with a widened init scale, which
/// keeps gradients well away from zero; the CLO reference model uses seed 7.
pub fn reference_check(loss: GradLoss, cfg: &FdConfig) -> Result<FdReport> {
    let world = generate_world(&WorldSpec::default())?;
    let data = TrainData::from_corpora(&emit_training_corpora(&world), &world.vocab)?;
    let mc = ModelConfig::reference(world.vocab_size(), 42);
    let mut params = init_model(&mc)?;
    for (i, w) in params.as_mut_slice().iter_mut().enumerate() {
        *w *= 1.0 + 4.0 * ((i % 7) as f64 / 7.0);
    }
    match loss {
        GradLoss::Sft => {
            let batch: Vec<_> = data.sft.iter().step_by(11).take(4).cloned().collect();
            check_gradients("sft", &params, cfg, |p| loss_sft(p, &batch))
        }
        GradLoss::Midalign => {
            let batch: Vec<_> = data.parallel.iter().step_by(13).take(4).cloned().collect();
            check_gradients("midalign", &params, cfg, |p| loss_midalign(p, &batch, 6))
        }
        GradLoss::Clo => {
            let reference = init_model(&ModelConfig { seed: 7, ..mc })?;
            let mut batch: Vec<_> = data.preferences.iter().filter(|t| t.lang != PIVOT).step_by(7).take(2).cloned().collect();
            batch.extend(data.preferences.iter().filter(|t| t.lang == PIVOT).step_by(5).take(2).cloned());
            check_gradients("clo", &params, cfg, |p| loss_clo(p, &reference, &batch, 0.5, 1.0))
        }
    }
}
