//! Central finite differences as an oracle for reverse-mode gradients.

use std::fmt;
use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::data::{stack, ShadowSample};
use crate::error::{Error, Result};
use crate::model::{forward, init_model, training_loss, ModelConfig};
use crate::params::ModelParams;
use crate::synth::synth_dataset;
use crate::tensor::Tensor;

pub const MIN_STEP: f64 = 1e-6;
pub const MAX_STEP: f64 = 1e-3;

fn check_step(h: f64) -> Result<()> {
    if (MIN_STEP..=MAX_STEP).contains(&h) {
        Ok(())
    } else {
        Err(Error::Parameter(format!(
            "finite-difference step {h} outside [{MIN_STEP}, {MAX_STEP}]"
        )))
    }
}

/// `(f(theta + h e_i) - f(theta - h e_i)) / 2h` for the listed coordinates
/// of parameter `name`.
pub fn finite_diff_coords<F>(mut f: F, params: &ModelParams, name: &str, coords: &[usize], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&ModelParams) -> Result<f64>,
{
    check_step(h)?;
    let numel = params.get(name)?.numel();
    let mut work = params.clone();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        if i >= numel {
            return Err(Error::Lookup(format!("{name}[{i}]")));
        }
        let orig = work.get(name)?.data()[i];
        work.get_mut(name)?.data_mut()[i] = orig + h;
        let plus = f(&work)?;
        work.get_mut(name)?.data_mut()[i] = orig - h;
        let minus = f(&work)?;
        work.get_mut(name)?.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// Central-difference gradient of `f` with respect to every coordinate of
/// parameter `name`.
pub fn finite_diff_gradient<F>(f: F, params: &ModelParams, name: &str, h: f64) -> Result<Tensor>
where
    F: FnMut(&ModelParams) -> Result<f64>,
{
    let t = params.get(name)?;
    let shape = t.shape().to_vec();
    let coords: Vec<usize> = (0..t.numel()).collect();
    Tensor::new(shape, finite_diff_coords(f, params, name, &coords, h)?)
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Up to `count` distinct coordinates of a tensor with `numel` entries; all
/// of them when `numel <= count`.
pub fn sample_coords(numel: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if numel <= count {
        return (0..numel).collect();
    }
    let mut v = sample(rng, numel, count).into_vec();
    v.sort_unstable();
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    pub coords_per_tensor: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of [`relative_error`], as a fraction of the
    /// largest analytic gradient entry of the whole model.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            coords_per_tensor: 200,
            step: 1e-4,
            tolerance: 1e-4,
            floor: 1e-5,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checks: Vec<TensorCheck>,
    pub tolerance: f64,
    /// Absolute denominator floor that was applied.
    pub floor: f64,
    pub loss: f64,
    pub elapsed: Duration,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn coords(&self) -> usize {
        self.checks.iter().map(|c| c.coords).sum()
    }

    pub fn failures(&self) -> impl Iterator<Item = &TensorCheck> {
        self.checks.iter().filter(|c| !(c.max_rel_error < self.tolerance))
    }

    pub fn passed(&self) -> bool {
        self.failures().next().is_none()
    }
}

impl fmt::Display for GradCheckReport {
    /// Deterministic text: no timings.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "loss = {:.12e}", self.loss)?;
        writeln!(f, "floor = {:.3e}", self.floor)?;
        for c in &self.checks {
            writeln!(
                f,
                "{:<60} coords={:<4} max_rel={:.3e} at {} (analytic {:.6e}, numeric {:.6e})",
                c.name, c.coords, c.max_rel_error, c.worst_coord, c.analytic, c.numeric
            )?;
        }
        writeln!(
            f,
            "tensors={} coords={} max_rel_error={:.3e} tolerance={:.0e} {}",
            self.checks.len(),
            self.coords(),
            self.max_rel_error(),
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// Compares back-propagated gradients of the training loss with central
/// differences on sampled coordinates of every parameter tensor.
///
/// The forward pass is recorded once; each perturbed evaluation re-runs
/// only the operations downstream of the perturbed parameter.
pub fn check_model_gradients(
    cfg: &ModelConfig,
    params: &ModelParams,
    images: &Tensor,
    masks: &Tensor,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    check_step(opts.step)?;
    let start = Instant::now();
    let tape = Tape::new();
    let vars = params.register(&tape);
    let out = forward(tape.constant(images.clone()), &vars, cfg)?;
    let loss = training_loss(&out, tape.constant(masks.clone()))?;
    let loss_value = loss.value().item()?;
    let grads = vars.gradients(&tape.backward(loss)?);

    let scale = grads.values().map(Tensor::max_abs).fold(0.0, f64::max);
    let floor = opts.floor * scale;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut checks = Vec::with_capacity(params.len());
    for (name, var) in vars.iter() {
        let base = params.get(name)?;
        let analytic = &grads[name];
        let plan = tape.replay_plan(var, loss)?;
        let coords = sample_coords(base.numel(), opts.coords_per_tensor, &mut rng);
        let mut work = base.clone();
        let mut worst = TensorCheck {
            name: name.to_string(),
            coords: coords.len(),
            max_rel_error: 0.0,
            worst_coord: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &i in &coords {
            let orig = base.data()[i];
            work.data_mut()[i] = orig + opts.step;
            let plus = tape.replay(&plan, &work)?.item()?;
            work.data_mut()[i] = orig - opts.step;
            let minus = tape.replay(&plan, &work)?.item()?;
            work.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.data()[i];
            let err = relative_error(a, numeric, floor);
            if !(err <= worst.max_rel_error) {
                worst.max_rel_error = err;
                worst.worst_coord = i;
                worst.analytic = a;
                worst.numeric = numeric;
            }
        }
        checks.push(worst);
    }
    Ok(GradCheckReport {
        checks,
        tolerance: opts.tolerance,
        floor,
        loss: loss_value,
        elapsed: start.elapsed(),
    })
}

/// Gradient check of a freshly initialized model on a seeded synthetic
/// batch of `batch` images.
pub fn check_synthetic(cfg: &ModelConfig, seed: u64, batch: usize, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let params = init_model(cfg, seed)?;
    let data = synth_dataset(seed, 0, batch, cfg.encoder.img_size);
    let refs: Vec<&ShadowSample> = data.iter().collect();
    let (images, masks) = stack(&refs)?;
    check_model_gradients(cfg, &params, &images, &masks, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> ModelParams {
        let mut p = ModelParams::new();
        p.insert("theta", Tensor::scalar(v));
        p
    }

    #[test]
    fn square_at_three() {
        let p = scalar_param(3.0);
        let g = finite_diff_gradient(|q| Ok(q.get("theta")?.item()?.powi(2)), &p, "theta", 1e-4).unwrap();
        assert!((g.item().unwrap() - 6.0).abs() < 1e-7);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut p = ModelParams::new();
        p.insert("w", Tensor::from_fn([2, 3], |i| i as f64));
        let g = finite_diff_gradient(|_| Ok(1.5), &p, "w", 1e-5).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn rejects_bad_step_and_unknown_name() {
        let p = scalar_param(1.0);
        let f = |q: &ModelParams| q.get("theta")?.item();
        assert!(matches!(finite_diff_gradient(f, &p, "theta", 1e-2), Err(Error::Parameter(_))));
        assert!(matches!(finite_diff_gradient(f, &p, "theta", 1e-7), Err(Error::Parameter(_))));
        assert!(matches!(finite_diff_gradient(f, &p, "nope", 1e-4), Err(Error::Lookup(_))));
    }

    #[test]
    fn sampling_is_seeded_distinct_and_complete_for_small_tensors() {
        let mut a = ChaCha8Rng::seed_from_u64(1);
        let mut b = ChaCha8Rng::seed_from_u64(1);
        let s = sample_coords(1000, 200, &mut a);
        assert_eq!(s, sample_coords(1000, 200, &mut b));
        let mut d = s.clone();
        d.dedup();
        assert_eq!(d.len(), 200);
        assert_eq!(sample_coords(5, 200, &mut a), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(1.0, 1.0, 1e-7), 0.0);
        assert!((relative_error(2.0, 1.0, 1e-7) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-12, 0.0, 1e-7) - 1e-5).abs() < 1e-18);
    }
}
