use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attention::{
    alibi_bias_matrix, biased_cross_attention, causal_mask, multi_head_attention, positional_encoding,
};
use super::frontend::{resample_linear, AudioFeatures, N_MELS};
use crate::autodiff::{adam_step, AdamState, ParamStore, Tape, Tensor, TrainLog, Var};
use crate::error::{Error, Result};
use crate::face3dmm::{FaceBasis, MouthMask, VertexLoss};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct A2epConfig {
    pub d_model: usize,
    pub cross_heads: usize,
    pub ffn_width: usize,
    pub self_heads: usize,
    pub sigma1: usize,
    pub sigma2: usize,
    pub k_exp: usize,
    pub n_identities: usize,
    pub max_t: usize,
    pub n_mels: usize,
}

impl Default for A2epConfig {
    /// Toy sizes. The reference model uses `d_model = 1024` and a
    /// feed-forward width of 2048.
    fn default() -> Self {
        Self {
            d_model: 64,
            cross_heads: 4,
            ffn_width: 256,
            self_heads: 4,
            sigma1: 0,
            sigma2: 1,
            k_exp: 64,
            n_identities: 1,
            max_t: 512,
            n_mels: N_MELS,
        }
    }
}

impl A2epConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("cross_heads", self.cross_heads),
            ("self_heads", self.self_heads),
            ("ffn_width", self.ffn_width),
            ("k_exp", self.k_exp),
            ("n_identities", self.n_identities),
            ("max_t", self.max_t),
            ("n_mels", self.n_mels),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{name} must be > 0")));
        }
        for heads in [self.cross_heads, self.self_heads] {
            if self.d_model % heads != 0 {
                return Err(Error::InvalidArgument(format!(
                    "d_model {} not divisible by {heads} heads",
                    self.d_model
                )));
            }
        }
        if self.sigma2 == 0 {
            return Err(Error::InvalidArgument(
                "sigma2 must be >= 1 so every frame sees audio".into(),
            ));
        }
        Ok(())
    }

    fn to_tensor(&self) -> Tensor {
        let v = [
            self.d_model,
            self.cross_heads,
            self.ffn_width,
            self.self_heads,
            self.sigma1,
            self.sigma2,
            self.k_exp,
            self.n_identities,
            self.max_t,
            self.n_mels,
        ];
        Tensor::from_fn(&[v.len()], |i| v[i] as f64)
    }

    fn from_tensor(t: &Tensor) -> Result<Self> {
        let d = t.data();
        if d.len() != 10 || d.iter().any(|v| v.fract() != 0.0 || *v < 0.0) {
            return Err(Error::InvalidArgument("malformed A2EP config record".into()));
        }
        let u = |i: usize| d[i] as usize;
        Ok(Self {
            d_model: u(0),
            cross_heads: u(1),
            ffn_width: u(2),
            self_heads: u(3),
            sigma1: u(4),
            sigma2: u(5),
            k_exp: u(6),
            n_identities: u(7),
            max_t: u(8),
            n_mels: u(9),
        })
    }
}

/// Audio-to-expression transformer: audio projection, expression encoder
/// with identity and positional embeddings, one causal self-attention
/// block, one biased cross-attention block, a feed-forward block and a
/// zero-initialised output head. All blocks are post-norm residual.
#[derive(Clone, Debug, PartialEq)]
pub struct A2epModel {
    config: A2epConfig,
    params: ParamStore,
    /// Per-channel audio standardisation, fitted on training data.
    audio_mean: Vec<f64>,
    audio_std: Vec<f64>,
}

pub(crate) const META_CONFIG: &str = "meta.config";
const NORM_MEAN: &str = "norm.mean";
const NORM_STD: &str = "norm.std";

impl A2epModel {
    pub fn new(config: A2epConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, f, k, n) = (config.d_model, config.ffn_width, config.k_exp, config.n_identities);
        let mut p = ParamStore::new();
        p.insert_xavier("audio.w", &[config.n_mels, d], config.n_mels, d, &mut rng);
        p.insert("audio.b", Tensor::zeros(&[d]));
        p.insert_xavier("expr.w", &[k, d], k, d, &mut rng);
        p.insert("expr.b", Tensor::zeros(&[d]));
        p.insert_xavier("id.embed", &[n, d], 1, d, &mut rng);
        for block in ["self", "cross"] {
            for m in ["wq", "wk", "wv", "wo"] {
                p.insert_xavier(&format!("{block}.{m}"), &[d, d], d, d, &mut rng);
            }
        }
        p.insert_xavier("ffn.w1", &[d, f], d, f, &mut rng);
        p.insert("ffn.b1", Tensor::zeros(&[f]));
        p.insert_xavier("ffn.w2", &[f, d], f, d, &mut rng);
        p.insert("ffn.b2", Tensor::zeros(&[d]));
        p.insert("head.w", Tensor::zeros(&[d, k]));
        p.insert("head.b", Tensor::zeros(&[k]));
        Ok(Self {
            audio_mean: vec![0.0; config.n_mels],
            audio_std: vec![1.0; config.n_mels],
            config,
            params: p,
        })
    }

    pub fn config(&self) -> &A2epConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn audio_normalization(&self) -> (&[f64], &[f64]) {
        (&self.audio_mean, &self.audio_std)
    }

    /// Fits the audio standardisation to all frames of `features`.
    pub fn fit_audio_normalization<'a>(&mut self, features: impl IntoIterator<Item = &'a AudioFeatures>) -> Result<()> {
        let c = self.config.n_mels;
        let (mut sum, mut sq, mut count) = (vec![0.0; c], vec![0.0; c], 0usize);
        for f in features {
            self.check_features(f)?;
            for r in 0..f.frames.rows() {
                for (j, &v) in f.frames.row(r).iter().enumerate() {
                    sum[j] += v;
                    sq[j] += v * v;
                }
            }
            count += f.frames.rows();
        }
        if count == 0 {
            return Err(Error::Empty("audio features"));
        }
        let n = count as f64;
        self.audio_mean = sum.iter().map(|s| s / n).collect();
        self.audio_std = sq
            .iter()
            .zip(&self.audio_mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        Ok(())
    }

    fn check_features(&self, f: &AudioFeatures) -> Result<()> {
        if f.frames.rank() != 2 || f.frames.cols() != self.config.n_mels || f.frames.rows() == 0 {
            return Err(Error::shape(
                "a2ep_audio",
                format!("expected [T_a, {}], got {:?}", self.config.n_mels, f.frames.shape()),
            ));
        }
        Ok(())
    }

    /// Standardised audio features resampled to `t` video frames.
    pub fn prepare_audio(&self, features: &AudioFeatures, t: usize) -> Result<Tensor> {
        self.check_features(features)?;
        let c = self.config.n_mels;
        let norm = Tensor::from_fn(features.frames.shape(), |i| {
            (features.frames.data()[i] - self.audio_mean[i % c]) / self.audio_std[i % c]
        });
        resample_linear(&norm, t)
    }

    fn check_sequence(&self, history: &Tensor, identity: usize) -> Result<()> {
        if history.rank() != 2 || history.cols() != self.config.k_exp || history.rows() == 0 {
            return Err(Error::shape(
                "a2ep_history",
                format!("expected [T, {}], got {:?}", self.config.k_exp, history.shape()),
            ));
        }
        if history.rows() > self.config.max_t {
            return Err(Error::InvalidArgument(format!(
                "sequence length {} exceeds max_t {}",
                history.rows(),
                self.config.max_t
            )));
        }
        if identity >= self.config.n_identities {
            return Err(Error::InvalidArgument(format!(
                "identity {identity} out of range for {} identities",
                self.config.n_identities
            )));
        }
        Ok(())
    }

    fn var(&self, vars: &[Var], name: &str) -> Var {
        vars[self
            .params
            .position(name)
            .expect("parameter names are fixed at construction")]
    }

    fn linear(&self, tape: &mut Tape, vars: &[Var], x: Var, w: &str, b: Option<&str>) -> Result<Var> {
        let y = tape.matmul(x, self.var(vars, w))?;
        match b {
            Some(b) => tape.add_row(y, self.var(vars, b)),
            None => Ok(y),
        }
    }

    /// `FC(β̂_{t−1}) + v_n + PE(t)` on the tape.
    fn expression_input_on(&self, tape: &mut Tape, vars: &[Var], history: &Tensor, identity: usize) -> Result<Var> {
        let (t, d) = (history.rows(), self.config.d_model);
        let h = tape.leaf(history.clone());
        let e = self.linear(tape, vars, h, "expr.w", Some("expr.b"))?;
        let onehot = Tensor::from_fn(
            &[1, self.config.n_identities],
            |i| if i == identity { 1.0 } else { 0.0 },
        );
        let onehot = tape.leaf(onehot);
        let v_n = tape.matmul(onehot, self.var(vars, "id.embed"))?;
        let v_n = tape.reshape(v_n, &[d])?;
        let e = tape.add_row(e, v_n)?;
        let pe = tape.leaf(positional_encoding(t, d));
        tape.add(e, pe)
    }

    /// Expression encoder output `F_e` (after causal self-attention).
    fn encode_on(&self, tape: &mut Tape, vars: &[Var], history: &Tensor, identity: usize) -> Result<Var> {
        let t = history.rows();
        let e = self.expression_input_on(tape, vars, history, identity)?;
        let q = self.linear(tape, vars, e, "self.wq", None)?;
        let k = self.linear(tape, vars, e, "self.wk", None)?;
        let v = self.linear(tape, vars, e, "self.wv", None)?;
        let causal = Tensor::new(
            vec![t, t],
            causal_mask(t)
                .into_iter()
                .map(|m| if m { f64::NEG_INFINITY } else { 0.0 })
                .collect(),
        )?;
        let sa = multi_head_attention(tape, q, k, v, &causal, self.config.self_heads)?.output;
        let sa = self.linear(tape, vars, sa, "self.wo", None)?;
        let r = tape.add(e, sa)?;
        tape.layer_norm_rows(r, LN_EPS)
    }

    /// Teacher-forced forward pass over prepared audio (`[T, n_mels]`).
    fn forward_on(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        audio: &Tensor,
        history: &Tensor,
        identity: usize,
    ) -> Result<Var> {
        self.check_sequence(history, identity)?;
        let t = history.rows();
        if audio.shape() != [t, self.config.n_mels] {
            return Err(Error::shape(
                "a2ep_forward",
                format!("audio {:?} for {t} frames", audio.shape()),
            ));
        }
        let a = tape.leaf(audio.clone());
        let a = self.linear(tape, vars, a, "audio.w", Some("audio.b"))?;
        let x1 = self.encode_on(tape, vars, history, identity)?;

        let q = self.linear(tape, vars, x1, "cross.wq", None)?;
        let k = self.linear(tape, vars, a, "cross.wk", None)?;
        let v = self.linear(tape, vars, a, "cross.wv", None)?;
        let bias = alibi_bias_matrix(t, self.config.sigma1, self.config.sigma2)?;
        let ca = biased_cross_attention(
            tape,
            q,
            k,
            v,
            &bias,
            self.config.cross_heads,
            self.var(vars, "cross.wo"),
        )?;
        let r = tape.add(x1, ca)?;
        let x2 = tape.layer_norm_rows(r, LN_EPS)?;

        let f = self.linear(tape, vars, x2, "ffn.w1", Some("ffn.b1"))?;
        let f = tape.tanh(f);
        let f = self.linear(tape, vars, f, "ffn.w2", Some("ffn.b2"))?;
        let r = tape.add(x2, f)?;
        let x3 = tape.layer_norm_rows(r, LN_EPS)?;
        self.linear(tape, vars, x3, "head.w", Some("head.b"))
    }

    fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.tensors().iter().map(|t| tape.leaf(t.clone())).collect()
    }

    /// Expression input before self-attention, `[T, d_model]`.
    pub fn expression_input(&self, history: &Tensor, identity: usize) -> Result<Tensor> {
        self.check_sequence(history, identity)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let out = self.expression_input_on(&mut tape, &vars, history, identity)?;
        Ok(tape.value(out).clone())
    }

    /// Encoded expressions `F_e`, `[T, d_model]`.
    pub fn encode_expressions(&self, history: &Tensor, identity: usize) -> Result<Tensor> {
        self.check_sequence(history, identity)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let out = self.encode_on(&mut tape, &vars, history, identity)?;
        Ok(tape.value(out).clone())
    }

    /// Teacher-forced prediction from already prepared audio.
    pub fn forward_prepared(&self, audio: &Tensor, history: &Tensor, identity: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let out = self.forward_on(&mut tape, &vars, audio, history, identity)?;
        Ok(tape.value(out).clone())
    }

    /// Teacher-forced prediction, `[T, k_exp]` with `T = history.rows()`.
    pub fn forward(&self, features: &AudioFeatures, history: &Tensor, identity: usize) -> Result<Tensor> {
        self.check_sequence(history, identity)?;
        let audio = self.prepare_audio(features, history.rows())?;
        self.forward_prepared(&audio, history, identity)
    }

    /// Generates `t` frames, feeding each prediction back as the next
    /// history row, starting from the zero vector.
    pub fn infer_autoregressive(&self, features: &AudioFeatures, identity: usize, t: usize) -> Result<Tensor> {
        if t == 0 {
            return Err(Error::InvalidArgument("cannot generate 0 frames".into()));
        }
        let k = self.config.k_exp;
        let mut history = Tensor::zeros(&[t, k]);
        self.check_sequence(&history, identity)?;
        let audio = self.prepare_audio(features, t)?;
        let mut out = Tensor::zeros(&[t, k]);
        for step in 0..t {
            let pred = self.forward_prepared(&audio, &history, identity)?;
            out.data_mut()[step * k..(step + 1) * k].copy_from_slice(pred.row(step));
            if step + 1 < t {
                history.data_mut()[(step + 1) * k..(step + 2) * k].copy_from_slice(pred.row(step));
            }
        }
        Ok(out)
    }

    /// Mean vertex loss over `batch` and its gradient per parameter.
    pub fn loss_and_gradients(&self, batch: &[PreparedSample], loss: &VertexLoss) -> Result<(f64, Vec<Tensor>)> {
        self.loss_and_gradients_with(self.params.tensors(), batch, loss)
    }

    fn loss_and_gradients_with(
        &self,
        params: &[Tensor],
        batch: &[PreparedSample],
        loss: &VertexLoss,
    ) -> Result<(f64, Vec<Tensor>)> {
        if batch.is_empty() {
            return Err(Error::Empty("training batch"));
        }
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = self.batch_loss_on(&mut tape, &vars, batch, loss)?;
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

    /// Records the mean loss over `batch` using `vars` as parameters, for
    /// gradient checking of the full graph.
    pub fn batch_loss_on(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        batch: &[PreparedSample],
        loss: &VertexLoss,
    ) -> Result<Var> {
        let mut total: Option<Var> = None;
        for s in batch {
            let pred = self.forward_on(tape, vars, &s.audio, &s.history, s.identity)?;
            let l = loss.on_tape(tape, pred, &s.betas)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, l)?,
                None => l,
            });
        }
        let total = total.ok_or(Error::Empty("training batch"))?;
        Ok(tape.scale(total, 1.0 / batch.len() as f64))
    }

    pub fn prepare(&self, sample: &A2epSample) -> Result<PreparedSample> {
        self.check_sequence(&sample.betas, sample.identity)?;
        Ok(PreparedSample {
            audio: self.prepare_audio(&sample.features, sample.betas.rows())?,
            history: teacher_history(&sample.betas),
            betas: sample.betas.clone(),
            identity: sample.identity,
        })
    }

    /// Parameters plus normalisation and configuration records, for
    /// checkpointing.
    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        let c = self.config.n_mels;
        let mut out: Vec<(String, Tensor)> = self
            .params
            .names()
            .iter()
            .cloned()
            .zip(self.params.tensors().iter().cloned())
            .collect();
        out.push((NORM_MEAN.into(), Tensor::from_fn(&[c], |i| self.audio_mean[i])));
        out.push((NORM_STD.into(), Tensor::from_fn(&[c], |i| self.audio_std[i])));
        out.push((META_CONFIG.into(), self.config.to_tensor()));
        out
    }

    pub fn from_named(records: &[(String, Tensor)]) -> Result<Self> {
        let find = |name: &str| {
            records
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::InvalidArgument(format!("checkpoint lacks `{name}`")))
        };
        let config = A2epConfig::from_tensor(find(META_CONFIG)?)?;
        let mut model = Self::new(config, 0)?;
        let mut store = ParamStore::new();
        for (name, t) in records {
            if name != META_CONFIG && name != NORM_MEAN && name != NORM_STD {
                store.insert(name.clone(), t.clone());
            }
        }
        model.params.assign_from(&store)?;
        let (mean, std) = (find(NORM_MEAN)?, find(NORM_STD)?);
        if mean.len() != model.config.n_mels || std.len() != model.config.n_mels {
            return Err(Error::shape(
                "a2ep_checkpoint",
                "normalisation length differs from n_mels",
            ));
        }
        model.audio_mean = mean.data().to_vec();
        model.audio_std = std.data().to_vec();
        Ok(model)
    }
}

/// History fed under teacher forcing: the zero start vector followed by
/// the ground truth shifted right by one frame.
pub fn teacher_history(betas: &Tensor) -> Tensor {
    let k = betas.cols();
    let mut data = vec![0.0; betas.len()];
    if betas.rows() > 1 {
        data[k..].copy_from_slice(&betas.data()[..betas.len() - k]);
    }
    Tensor::new(betas.shape().to_vec(), data).expect("same element count")
}

/// One training utterance: raw features, aligned ground-truth expression
/// coefficients `[T, k_exp]` and the speaker's identity index.
#[derive(Clone, Debug)]
pub struct A2epSample {
    pub features: AudioFeatures,
    pub betas: Tensor,
    pub identity: usize,
}

/// A sample with audio standardised and resampled to the video rate.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub audio: Tensor,
    pub history: Tensor,
    pub betas: Tensor,
    pub identity: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct A2epTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub lambda_m: f64,
    pub seed: u64,
}

impl Default for A2epTrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 1e-4,
            lambda_m: 1.8,
            seed: 0,
        }
    }
}

/// Full-batch teacher-forced training with Adam on the mouth-weighted
/// vertex loss.
pub fn train_a2ep(
    samples: &[A2epSample],
    basis: &FaceBasis,
    mouth: &MouthMask,
    config: &A2epConfig,
    train: &A2epTrainConfig,
) -> Result<(A2epModel, TrainLog)> {
    if samples.is_empty() {
        return Err(Error::Empty("A2EP training set"));
    }
    if basis.k_exp() != config.k_exp {
        return Err(Error::Dimension {
            param: "k_exp",
            expected: basis.k_exp(),
            actual: config.k_exp,
        });
    }
    let mut model = A2epModel::new(config.clone(), train.seed)?;
    model.fit_audio_normalization(samples.iter().map(|s| &s.features))?;
    let batch = samples.iter().map(|s| model.prepare(s)).collect::<Result<Vec<_>>>()?;
    let loss = VertexLoss::new(basis, mouth, train.lambda_m)?;
    let mut adam = AdamState::new(model.params.tensors(), train.lr);
    let mut log = TrainLog::default();
    for _ in 0..train.steps {
        let (value, grads) = model.loss_and_gradients(&batch, &loss)?;
        log.losses.push(value);
        adam_step(model.params.tensors_mut(), &grads, &mut adam)?;
    }
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let final_loss = model.batch_loss_on(&mut tape, &vars, &batch, &loss)?;
    log.losses.push(tape.value(final_loss).item());
    Ok((model, log))
}
