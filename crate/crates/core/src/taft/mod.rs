//! Target-adaptive face translation: a skip-connected encoder-decoder
//! generator and its photometric, perceptual and style training loss.

mod generator;
mod loss;

pub use generator::{Generator, GeneratorConfig};
pub use loss::{
    gram_matrix, gram_on, perceptual_loss, perceptual_loss_on, photometric_loss, photometric_loss_on,
    pyramid_downsample, pyramid_on, stack_features, style_loss, style_loss_on, total_loss, FeatureStack, LossWeights,
    TaftLoss, DEFAULT_LEVELS, STACK_WIDTHS,
};

use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamState, Tape, Tensor, TrainLog, Var};
use crate::error::{Error, Result};
use crate::image::RasterImage;

/// One training example: blended frame, reference frame, real frame.
#[derive(Clone, Debug, PartialEq)]
pub struct TaftTriple {
    pub blended: RasterImage,
    pub reference: RasterImage,
    pub target: RasterImage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaftTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub stack_seed: u64,
    pub levels: usize,
    pub weights: LossWeights,
}

impl Default for TaftTrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 1e-4,
            seed: 0,
            stack_seed: 1,
            levels: DEFAULT_LEVELS,
            weights: LossWeights::default(),
        }
    }
}

/// Network inputs and targets as tensors.
#[derive(Clone, Debug)]
pub struct PreparedTriple {
    pub input: Tensor,
    pub target: Tensor,
}

impl PreparedTriple {
    pub fn new(t: &TaftTriple) -> Result<Self> {
        if !t.target.same_size(&t.blended) {
            return Err(Error::shape("taft_triple", "target and blended sizes differ"));
        }
        Ok(Self {
            input: Generator::input_tensor(&t.blended, &t.reference)?,
            target: t.target.to_chw(),
        })
    }
}

/// Records the mean total loss over `batch` with `vars` as the generator
/// parameters.
pub fn batch_loss_on(
    tape: &mut Tape,
    generator: &Generator,
    vars: &[Var],
    batch: &[PreparedTriple],
    loss: &TaftLoss,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for s in batch {
        let x = tape.leaf(s.input.clone());
        let pred = generator.forward_on(tape, vars, x)?;
        let target = tape.leaf(s.target.clone());
        let l = loss.total_on(tape, pred, target)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    let total = total.ok_or(Error::Empty("TAFT batch"))?;
    Ok(tape.scale(total, 1.0 / batch.len() as f64))
}

fn loss_and_gradients(generator: &Generator, batch: &[PreparedTriple], loss: &TaftLoss) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let params = generator.params().tensors();
    let vars: Vec<Var> = params.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = batch_loss_on(&mut tape, generator, &vars, batch, loss)?;
    let grads = tape.backward(root)?;
    let value = tape.value(root).item();
    Ok((
        value,
        vars.iter()
            .zip(params)
            .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
            .collect(),
    ))
}

/// Full-batch Adam training of a fresh generator.
pub fn train_taft(
    dataset: &[TaftTriple],
    config: &GeneratorConfig,
    train: &TaftTrainConfig,
) -> Result<(Generator, TrainLog)> {
    if dataset.is_empty() {
        return Err(Error::Empty("TAFT training set"));
    }
    let loss = TaftLoss::new(train.weights, train.stack_seed, train.levels)?;
    let batch = dataset.iter().map(PreparedTriple::new).collect::<Result<Vec<_>>>()?;
    let mut generator = Generator::new(config.clone(), train.seed)?;
    let mut adam = AdamState::new(generator.params().tensors(), train.lr);
    let mut log = TrainLog::default();
    for _ in 0..train.steps {
        let (value, grads) = loss_and_gradients(&generator, &batch, &loss)?;
        log.losses.push(value);
        adam_step(generator.params_mut().tensors_mut(), &grads, &mut adam)?;
    }
    let (value, _) = loss_and_gradients(&generator, &batch, &loss)?;
    log.losses.push(value);
    Ok((generator, log))
}
