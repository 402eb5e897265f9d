use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tape::{BatchStats, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::RandomStream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Identity,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub width: usize,
    pub activation: Activation,
}

/// Layer stack `input → layers[0] → … → layers[n−1]`.
///
/// Batch normalization and dropout apply to every layer except the last,
/// in the order linear → batch norm → activation → dropout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input: usize,
    pub layers: Vec<LayerSpec>,
    pub batch_norm: bool,
    pub dropout: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const BN_MOMENTUM: f64 = 0.9;

pub struct MlpOutput {
    pub out: Var,
    /// `(layer, stats)` for every batch-normalized layer in train mode.
    pub batch_stats: Vec<(usize, BatchStats)>,
}

impl MlpSpec {
    /// `depth` hidden ReLU layers of `hidden` units followed by a linear output.
    pub fn relu_stack(input: usize, hidden: usize, depth: usize, output: usize) -> Self {
        let mut layers = vec![
            LayerSpec {
                width: hidden,
                activation: Activation::Relu,
            };
            depth
        ];
        layers.push(LayerSpec {
            width: output,
            activation: Activation::Identity,
        });
        Self {
            input,
            layers,
            batch_norm: false,
            dropout: 0.0,
        }
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(self.input, |l| l.width)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("MLP needs at least one layer".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout rate must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.input == 0 || self.layers.iter().any(|l| l.width == 0) {
            return Err(Error::Config("MLP widths must be positive".into()));
        }
        Ok(())
    }

    fn is_hidden(&self, l: usize) -> bool {
        l + 1 < self.layers.len()
    }

    /// Inserts seeded parameters under `prefix`; fan-in uniform scaling,
    /// He-style for ReLU layers and LeCun-style otherwise.
    pub fn init(&self, prefix: &str, store: &mut ParamStore, rng: &mut RandomStream) -> Result<()> {
        self.validate()?;
        let mut fan_in = self.input;
        for (l, layer) in self.layers.iter().enumerate() {
            let gain = match layer.activation {
                Activation::Relu => 6.0,
                _ => 3.0,
            };
            let bound = (gain / fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * layer.width)
                .map(|_| (2.0 * rng.uniform() - 1.0) * bound)
                .collect();
            store.insert(key(prefix, l, "w"), Tensor::from_vec(fan_in, layer.width, w), true);
            store.insert(key(prefix, l, "b"), Tensor::zeros(1, layer.width), true);
            if self.batch_norm && self.is_hidden(l) {
                store.insert(key(prefix, l, "bn_gamma"), Tensor::filled(1, layer.width, 1.0), true);
                store.insert(key(prefix, l, "bn_beta"), Tensor::zeros(1, layer.width), true);
                store.insert(key(prefix, l, "bn_mean"), Tensor::zeros(1, layer.width), false);
                store.insert(key(prefix, l, "bn_var"), Tensor::filled(1, layer.width, 1.0), false);
            }
            fan_in = layer.width;
        }
        Ok(())
    }

    /// Records the forward pass on `tape`. Dropout masks are drawn from `rng`
    /// in train mode only.
    pub fn forward(
        &self,
        tape: &mut Tape,
        prefix: &str,
        store: &ParamStore,
        x: Var,
        mode: Mode,
        rng: &mut RandomStream,
    ) -> Result<MlpOutput> {
        let width = tape.value(x).cols();
        if width != self.input {
            return Err(Error::Config(format!(
                "MLP {prefix} expects input width {}, got {width}",
                self.input
            )));
        }
        let mut h = x;
        let mut batch_stats = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let w = tape.param(store, &key(prefix, l, "w"))?;
            let b = tape.param(store, &key(prefix, l, "b"))?;
            let z = tape.matmul(h, w)?;
            h = tape.add_bias(z, b)?;
            let hidden = self.is_hidden(l);
            if self.batch_norm && hidden {
                let gamma = tape.param(store, &key(prefix, l, "bn_gamma"))?;
                let beta = tape.param(store, &key(prefix, l, "bn_beta"))?;
                h = match mode {
                    Mode::Train => {
                        let (v, stats) = tape.batch_norm(h, gamma, beta)?;
                        batch_stats.push((l, stats));
                        v
                    }
                    Mode::Eval => {
                        let rm = store.get(&key(prefix, l, "bn_mean")).unwrap().data().to_vec();
                        let rv = store.get(&key(prefix, l, "bn_var")).unwrap().data().to_vec();
                        tape.batch_norm_eval(h, gamma, beta, &rm, &rv)?
                    }
                };
            }
            h = match layer.activation {
                Activation::Relu => tape.relu(h),
                Activation::Sigmoid => tape.sigmoid(h),
                Activation::Identity => h,
            };
            if hidden && mode == Mode::Train && self.dropout > 0.0 {
                let keep = 1.0 - self.dropout;
                let (r, c) = tape.value(h).shape();
                let mask: Vec<f64> = (0..r * c)
                    .map(|_| if rng.uniform() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                h = tape.mul_const(h, Tensor::from_vec(r, c, mask))?;
            }
        }
        Ok(MlpOutput {
            out: h,
            batch_stats,
        })
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn update_running_stats(
        &self,
        prefix: &str,
        store: &mut ParamStore,
        stats: &[(usize, BatchStats)],
    ) -> Result<()> {
        for (l, s) in stats {
            for (name, batch) in [("bn_mean", &s.mean), ("bn_var", &s.var)] {
                let id = store.require(&key(prefix, *l, name))?;
                for (r, b) in store.value_mut(id).data_mut().iter_mut().zip(batch) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
                }
            }
        }
        Ok(())
    }

    /// Eval-mode forward returning a plain tensor.
    pub fn predict(&self, prefix: &str, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        // Eval mode draws nothing from the stream.
        let mut rng = RandomStream::new(0);
        let out = self.forward(&mut tape, prefix, store, xv, Mode::Eval, &mut rng)?;
        Ok(tape.value(out.out).clone())
    }
}

fn key(prefix: &str, layer: usize, name: &str) -> String {
    format!("{prefix}.{layer}.{name}")
}
