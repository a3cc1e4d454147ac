//! Central finite-difference verification of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Settings for [`check_gradients`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Central-difference half step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Relative error denominator floor, as a fraction of `max(1, |f|)`.
    /// Keeps round-off in near-zero gradients from reading as failures.
    pub floor: f64,
    /// How many times a failing coordinate is re-tested after moving the
    /// evaluation point, to step off a kink of `relu`/`abs`.
    pub max_nudges: usize,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-4,
            floor: 1e-6,
            max_nudges: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradFailure {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Coordinates that passed only after moving off a kink.
    pub nudged: usize,
    pub failures: Vec<GradFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.nudged += other.nudged;
        self.failures.extend(other.failures);
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = f(&mut tape, &vars)?;
    Ok(tape.value(root).item())
}

fn analytic<F>(f: &F, inputs: &[Tensor]) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;
    let value = tape.value(root).item();
    let g = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
        .collect();
    Ok((value, g))
}

/// Compares the reverse-mode gradient of `f` at `inputs` with central
/// differences, coordinate by coordinate, over every element of every
/// input.
pub fn check_gradients<F>(cfg: &GradCheck, inputs: &[Tensor], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (value, grads) = analytic(&f, inputs)?;
    let mut report = GradCheckReport::default();
    let mut point = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            report.checked += 1;
            let numeric = central_difference(&f, &mut point, i, j, cfg.step)?;
            let mut a = grads[i].data()[j];
            let mut n = numeric;
            let mut rel = rel_error(a, n, cfg.floor * value.abs().max(1.0));
            let mut attempts = 0;
            while rel > cfg.tolerance && attempts < cfg.max_nudges {
                attempts += 1;
                let mut moved = inputs.to_vec();
                let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                moved[i].data_mut()[j] += sign * (2.0 + 3.0 * attempts as f64) * cfg.step;
                let (v, g) = analytic(&f, &moved)?;
                a = g[i].data()[j];
                n = central_difference(&f, &mut moved, i, j, cfg.step)?;
                rel = rel_error(a, n, cfg.floor * v.abs().max(1.0));
            }
            if attempts > 0 && rel <= cfg.tolerance {
                report.nudged += 1;
            }
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel > cfg.tolerance {
                report.failures.push(GradFailure {
                    input: i,
                    element: j,
                    analytic: a,
                    numeric: n,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}

fn central_difference<F>(f: &F, point: &mut [Tensor], i: usize, j: usize, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let orig = point[i].data()[j];
    point[i].data_mut()[j] = orig + h;
    let plus = evaluate(f, point);
    point[i].data_mut()[j] = orig - h;
    let minus = evaluate(f, point);
    point[i].data_mut()[j] = orig;
    Ok((plus? - minus?) / (2.0 * h))
}

fn rel_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}
