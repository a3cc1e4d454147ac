use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_photo: f64,
    pub lambda_perc: f64,
    pub lambda_s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_photo: 1.0,
            lambda_perc: 4.0,
            lambda_s: 1000.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda_photo, self.lambda_perc, self.lambda_s]
            .iter()
            .any(|w| !(*w >= 0.0))
        {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be non-negative: {self:?}"
            )));
        }
        Ok(())
    }
}

pub const STACK_WIDTHS: [usize; 4] = [3, 8, 16, 32];
pub const DEFAULT_LEVELS: usize = 3;

/// Frozen random convolutional feature extractor: three stride-2 3×3
/// convolutions (3→8→16→32 channels) with `tanh`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    layers: Vec<(Tensor, Tensor)>,
}

impl FeatureStack {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = STACK_WIDTHS
            .windows(2)
            .map(|w| {
                let (cin, cout) = (w[0], w[1]);
                let bound = (6.0 / (9 * (cin + cout)) as f64).sqrt();
                let k = Tensor::from_fn(&[cout, cin, 3, 3], |_| rng.gen_range(-bound..bound));
                let b = Tensor::from_fn(&[cout], |_| rng.gen_range(-0.1..0.1));
                (k, b)
            })
            .collect();
        Self { layers }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Activations of every layer for a `[3, H, W]` image.
    pub fn features_on(&self, tape: &mut Tape, image: Var) -> Result<Vec<Var>> {
        let mut x = image;
        let mut out = Vec::with_capacity(self.layers.len());
        for (k, b) in &self.layers {
            let (k, b) = (tape.leaf(k.clone()), tape.leaf(b.clone()));
            let y = tape.conv2d(x, k, Some(b), 2, 1)?;
            x = tape.tanh(y);
            out.push(x);
        }
        Ok(out)
    }
}

fn same_shape(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa != sb || sa.len() != 3 {
        return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
    }
    Ok(())
}

fn mean_abs_diff(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let d = tape.abs(d);
    tape.mean(d)
}

/// Mean absolute error over all pixels and channels.
pub fn photometric_loss_on(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    same_shape(tape, "photometric_loss", pred, target)?;
    mean_abs_diff(tape, pred, target)
}

/// Level 0 is the input; each further level is a 2×2 box-filtered half.
pub fn pyramid_on(tape: &mut Tape, image: Var, levels: usize) -> Result<Vec<Var>> {
    if levels == 0 {
        return Err(Error::InvalidArgument("pyramid needs at least one level".into()));
    }
    let mut out = vec![image];
    for _ in 1..levels {
        let last = *out.last().expect("non-empty");
        out.push(tape.avg_pool2x(last)?);
    }
    Ok(out)
}

/// Sum over pyramid levels and stack layers of mean absolute feature
/// differences.
pub fn perceptual_loss_on(tape: &mut Tape, pred: Var, target: Var, stack: &FeatureStack, levels: usize) -> Result<Var> {
    same_shape(tape, "perceptual_loss", pred, target)?;
    let (pp, pt) = (pyramid_on(tape, pred, levels)?, pyramid_on(tape, target, levels)?);
    let mut terms = Vec::new();
    for (a, b) in pp.into_iter().zip(pt) {
        let (fa, fb) = (stack.features_on(tape, a)?, stack.features_on(tape, b)?);
        for (x, y) in fa.into_iter().zip(fb) {
            terms.push(mean_abs_diff(tape, x, y)?);
        }
    }
    sum_vars(tape, &terms)
}

/// `F·Fᵀ / (C·H·W)` for a `[C, H, W]` map flattened to `F = [C, H·W]`.
pub fn gram_on(tape: &mut Tape, features: Var) -> Result<Var> {
    let shape = tape.value(features).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::shape(
            "gram_matrix",
            format!("expected [C, H, W], got {shape:?}"),
        ));
    }
    let (c, hw) = (shape[0], shape[1] * shape[2]);
    let f = tape.reshape(features, &[c, hw])?;
    let ft = tape.transpose(f)?;
    let g = tape.matmul(f, ft)?;
    Ok(tape.scale(g, 1.0 / (c * hw) as f64))
}

/// Sum over stack layers of mean absolute Gram differences, at full
/// resolution.
pub fn style_loss_on(tape: &mut Tape, pred: Var, target: Var, stack: &FeatureStack) -> Result<Var> {
    same_shape(tape, "style_loss", pred, target)?;
    let (fa, fb) = (stack.features_on(tape, pred)?, stack.features_on(tape, target)?);
    let mut terms = Vec::new();
    for (x, y) in fa.into_iter().zip(fb) {
        let (gx, gy) = (gram_on(tape, x)?, gram_on(tape, y)?);
        terms.push(mean_abs_diff(tape, gx, gy)?);
    }
    sum_vars(tape, &terms)
}

fn sum_vars(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut it = terms.iter().copied();
    let first = it.next().ok_or(Error::Empty("loss terms"))?;
    it.try_fold(first, |acc, t| tape.add(acc, t))
}

/// Composite loss configuration: weights, the frozen feature stack and
/// the number of pyramid levels.
#[derive(Clone, Debug, PartialEq)]
pub struct TaftLoss {
    pub weights: LossWeights,
    pub stack: FeatureStack,
    pub levels: usize,
}

impl TaftLoss {
    pub fn new(weights: LossWeights, stack_seed: u64, levels: usize) -> Result<Self> {
        weights.validate()?;
        if levels == 0 {
            return Err(Error::InvalidArgument("pyramid needs at least one level".into()));
        }
        Ok(Self {
            weights,
            stack: FeatureStack::new(stack_seed),
            levels,
        })
    }

    /// `λ_photo·L_photo + λ_perc·L_perc + λ_s·L_s`.
    pub fn total_on(&self, tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
        let w = self.weights;
        let photo = photometric_loss_on(tape, pred, target)?;
        let perc = perceptual_loss_on(tape, pred, target, &self.stack, self.levels)?;
        let style = style_loss_on(tape, pred, target, &self.stack)?;
        let photo = tape.scale(photo, w.lambda_photo);
        let perc = tape.scale(perc, w.lambda_perc);
        let style = tape.scale(style, w.lambda_s);
        sum_vars(tape, &[photo, perc, style])
    }
}

/// Evaluates a tape loss on two plain tensors.
fn eval2(a: &Tensor, b: &Tensor, f: impl FnOnce(&mut Tape, Var, Var) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let (x, y) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
    let out = f(&mut tape, x, y)?;
    Ok(tape.value(out).item())
}

pub fn photometric_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    eval2(pred, target, photometric_loss_on)
}

pub fn perceptual_loss(pred: &Tensor, target: &Tensor, stack: &FeatureStack, levels: usize) -> Result<f64> {
    eval2(pred, target, |t, a, b| perceptual_loss_on(t, a, b, stack, levels))
}

pub fn style_loss(pred: &Tensor, target: &Tensor, stack: &FeatureStack) -> Result<f64> {
    eval2(pred, target, |t, a, b| style_loss_on(t, a, b, stack))
}

pub fn total_loss(pred: &Tensor, target: &Tensor, loss: &TaftLoss) -> Result<f64> {
    eval2(pred, target, |t, a, b| loss.total_on(t, a, b))
}

pub fn gram_matrix(features: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let f = tape.leaf(features.clone());
    let g = gram_on(&mut tape, f)?;
    Ok(tape.value(g).clone())
}

pub fn pyramid_downsample(image: &Tensor, levels: usize) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let x = tape.leaf(image.clone());
    Ok(pyramid_on(&mut tape, x, levels)?
        .into_iter()
        .map(|v| tape.value(v).clone())
        .collect())
}

pub fn stack_features(stack: &FeatureStack, image: &Tensor) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let x = tape.leaf(image.clone());
    Ok(stack
        .features_on(&mut tape, x)?
        .into_iter()
        .map(|v| tape.value(v).clone())
        .collect())
}
