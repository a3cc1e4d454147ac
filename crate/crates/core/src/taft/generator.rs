use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::image::RasterImage;

/// Channel widths stop doubling here.
const MAX_WIDTH: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    /// Blended and reference images stacked along channels.
    pub in_channels: usize,
    pub base_width: usize,
    /// Number of stride-2 encoder stages.
    pub depth: usize,
    pub out_channels: usize,
    pub skip_connections: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            in_channels: 6,
            base_width: 8,
            depth: 3,
            out_channels: 3,
            skip_connections: true,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_width == 0 || self.out_channels == 0 || self.depth == 0 {
            return Err(Error::InvalidArgument("generator sizes must be positive".into()));
        }
        Ok(())
    }

    /// Encoder width at each resolution level `0..=depth`.
    pub fn widths(&self) -> Vec<usize> {
        (0..=self.depth)
            .map(|l| (self.base_width << l.min(16)).min(MAX_WIDTH.max(self.base_width)))
            .collect()
    }

    fn check_size(&self, width: usize, height: usize) -> Result<()> {
        let m = 1usize << self.depth;
        if width == 0 || height == 0 || width % m != 0 || height % m != 0 {
            return Err(Error::InvalidArgument(format!(
                "image size {width}x{height} is not divisible by {m} (depth {})",
                self.depth
            )));
        }
        Ok(())
    }

    fn to_tensor(&self) -> Tensor {
        let v = [
            self.in_channels,
            self.base_width,
            self.depth,
            self.out_channels,
            usize::from(self.skip_connections),
        ];
        Tensor::from_fn(&[v.len()], |i| v[i] as f64)
    }

    fn from_tensor(t: &Tensor) -> Result<Self> {
        let d = t.data();
        if d.len() != 5 || d.iter().any(|v| v.fract() != 0.0 || *v < 0.0) {
            return Err(Error::InvalidArgument("malformed generator config record".into()));
        }
        Ok(Self {
            in_channels: d[0] as usize,
            base_width: d[1] as usize,
            depth: d[2] as usize,
            out_channels: d[3] as usize,
            skip_connections: d[4] != 0.0,
        })
    }
}

pub(crate) const META_CONFIG: &str = "meta.generator";

/// Encoder-decoder with optional skip connections. The encoder is a 3×3
/// stem followed by `depth` stride-2 3×3 convolutions; each decoder stage
/// upsamples, concatenates the matching encoder map and applies a 3×3
/// convolution. Hidden activations are `tanh`; the output is a sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    config: GeneratorConfig,
    params: ParamStore,
}

impl Generator {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = config.widths();
        let mut p = ParamStore::new();
        let mut conv = |p: &mut ParamStore, name: &str, cin: usize, cout: usize| {
            p.insert_xavier(&format!("{name}.w"), &[cout, cin, 3, 3], cin * 9, cout * 9, &mut rng);
            p.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
        };
        conv(&mut p, "enc0", config.in_channels, w[0]);
        for l in 1..=config.depth {
            conv(&mut p, &format!("enc{l}"), w[l - 1], w[l]);
        }
        for l in (1..=config.depth).rev() {
            let cin = w[l] + if config.skip_connections { w[l - 1] } else { 0 };
            let cout = if l == 1 { config.out_channels } else { w[l - 1] };
            conv(&mut p, &format!("dec{l}"), cin, cout);
        }
        Ok(Self { config, params: p })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn conv(&self, tape: &mut Tape, vars: &[Var], x: Var, name: &str, stride: usize) -> Result<Var> {
        let pos = |suffix: &str| {
            self.params
                .position(&format!("{name}.{suffix}"))
                .expect("parameter names are fixed at construction")
        };
        tape.conv2d(x, vars[pos("w")], Some(vars[pos("b")]), stride, 1)
    }

    /// Records the forward pass on `[in_channels, H, W]` input.
    pub fn forward_on(&self, tape: &mut Tape, vars: &[Var], input: Var) -> Result<Var> {
        let shape = tape.value(input).shape().to_vec();
        if shape.len() != 3 || shape[0] != self.config.in_channels {
            return Err(Error::shape(
                "generator",
                format!("expected [{}, H, W], got {shape:?}", self.config.in_channels),
            ));
        }
        self.config.check_size(shape[2], shape[1])?;
        let mut skips = Vec::with_capacity(self.config.depth + 1);
        let x = self.conv(tape, vars, input, "enc0", 1)?;
        let mut x = tape.tanh(x);
        skips.push(x);
        for l in 1..=self.config.depth {
            let y = self.conv(tape, vars, x, &format!("enc{l}"), 2)?;
            x = tape.tanh(y);
            skips.push(x);
        }
        for l in (1..=self.config.depth).rev() {
            let up = tape.upsample2x(x)?;
            let cat = if self.config.skip_connections {
                tape.concat_axis0(&[up, skips[l - 1]])?
            } else {
                up
            };
            let y = self.conv(tape, vars, cat, &format!("dec{l}"), 1)?;
            x = if l == 1 { tape.sigmoid(y) } else { tape.tanh(y) };
        }
        Ok(x)
    }

    /// Stacks blended and reference images into the network input.
    pub fn input_tensor(blended: &RasterImage, reference: &RasterImage) -> Result<Tensor> {
        if !blended.same_size(reference) {
            return Err(Error::shape(
                "generator",
                format!(
                    "blended {}x{} vs reference {}x{}",
                    blended.width(),
                    blended.height(),
                    reference.width(),
                    reference.height()
                ),
            ));
        }
        // centred to [-1, 1]
        let mut data = blended.to_chw().into_data();
        data.extend(reference.to_chw().into_data());
        data.iter_mut().for_each(|v| *v = 2.0 * *v - 1.0);
        Tensor::new(vec![6, blended.height(), blended.width()], data)
    }

    pub fn forward(&self, blended: &RasterImage, reference: &RasterImage) -> Result<RasterImage> {
        let input = Self::input_tensor(blended, reference)?;
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.tensors().iter().map(|t| tape.leaf(t.clone())).collect();
        let x = tape.leaf(input);
        let out = self.forward_on(&mut tape, &vars, x)?;
        RasterImage::from_chw(tape.value(out))
    }

    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .params
            .names()
            .iter()
            .cloned()
            .zip(self.params.tensors().iter().cloned())
            .collect();
        out.push((META_CONFIG.into(), self.config.to_tensor()));
        out
    }

    pub fn from_named(records: &[(String, Tensor)]) -> Result<Self> {
        let meta = records
            .iter()
            .find(|(n, _)| n == META_CONFIG)
            .ok_or_else(|| Error::InvalidArgument(format!("checkpoint lacks `{META_CONFIG}`")))?;
        let mut g = Self::new(GeneratorConfig::from_tensor(&meta.1)?, 0)?;
        let mut store = ParamStore::new();
        for (name, t) in records.iter().filter(|(n, _)| n != META_CONFIG) {
            store.insert(name.clone(), t.clone());
        }
        g.params.assign_from(&store)?;
        Ok(g)
    }
}
