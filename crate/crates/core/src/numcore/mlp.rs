use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::graph::{relu, sigmoid, Graph, Var};
use super::params::{ParamSet, ParamVars};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => relu(x),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }

    fn apply_graph(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Sigmoid => g.sigmoid(x),
            Activation::Identity => x,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub width: usize,
    pub activation: Activation,
    #[serde(default)]
    pub dropout: f64,
}

/// Fully connected network: `input_dim -> layers[0].width -> ...`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub layers: Vec<LayerSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub fn kernel_name(layer: usize) -> String {
    format!("l{layer:02}.kernel")
}

pub fn offset_name(layer: usize) -> String {
    format!("l{layer:02}.offset")
}

impl MlpSpec {
    /// Hidden layers with one activation, then a single sigmoid output unit.
    pub fn classifier(input_dim: usize, hidden: &[usize], activation: Activation) -> Self {
        let mut layers: Vec<LayerSpec> = hidden
            .iter()
            .map(|&width| LayerSpec {
                width,
                activation,
                dropout: 0.0,
            })
            .collect();
        layers.push(LayerSpec {
            width: 1,
            activation: Activation::Sigmoid,
            dropout: 0.0,
        });
        Self { input_dim, layers }
    }

    /// Hidden layers followed by a linear layer of width `out_dim`.
    pub fn encoder(input_dim: usize, hidden: &[usize], out_dim: usize, activation: Activation) -> Self {
        let mut layers: Vec<LayerSpec> = hidden
            .iter()
            .map(|&width| LayerSpec {
                width,
                activation,
                dropout: 0.0,
            })
            .collect();
        layers.push(LayerSpec {
            width: out_dim,
            activation: Activation::Identity,
            dropout: 0.0,
        });
        Self { input_dim, layers }
    }

    /// Sets the dropout rate on every hidden (non-final) layer.
    pub fn with_hidden_dropout(mut self, rate: f64) -> Self {
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            if i < last {
                layer.dropout = rate;
            }
        }
        self
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim, |l| l.width)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("network input width must be positive".into()));
        }
        if self.layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.width == 0 {
                return Err(Error::Config(format!("layer {i} has zero width")));
            }
            if !(0.0..1.0).contains(&layer.dropout) {
                return Err(Error::Config(format!(
                    "layer {i} dropout {} outside [0, 1)",
                    layer.dropout
                )));
            }
        }
        Ok(())
    }

    fn fan_in(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_dim
        } else {
            self.layers[layer - 1].width
        }
    }

    pub fn num_params(&self) -> usize {
        (0..self.layers.len())
            .map(|i| (self.fan_in(i) + 1) * self.layers[i].width)
            .sum()
    }

    /// Glorot-uniform kernels, zero offsets.
    pub fn init_params(&self, rng: &mut impl Rng) -> ParamSet {
        let mut params = ParamSet::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let fan_in = self.fan_in(i);
            let limit = (6.0 / (fan_in + layer.width) as f64).sqrt();
            let data = (0..fan_in * layer.width)
                .map(|_| rng.gen_range(-limit..=limit))
                .collect();
            params
                .insert(
                    kernel_name(i),
                    Tensor::from_vec(fan_in, layer.width, data).expect("sized above"),
                )
                .expect("finite init");
            params
                .insert(offset_name(i), Tensor::zeros(1, layer.width))
                .expect("finite init");
        }
        params
    }

    /// Checks that `params` holds exactly this network's arrays.
    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        if params.len() != 2 * self.layers.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter arrays, found {}",
                2 * self.layers.len(),
                params.len()
            )));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let expect = [
                (kernel_name(i), (self.fan_in(i), layer.width)),
                (offset_name(i), (1, layer.width)),
            ];
            for (name, shape) in expect {
                match params.get(&name) {
                    Some(t) if t.shape() == shape => {}
                    Some(t) => {
                        return Err(Error::LayerShape {
                            layer: i,
                            expected: format!("{name} {}x{}", shape.0, shape.1),
                            got: format!("{}x{}", t.rows(), t.cols()),
                        })
                    }
                    None => {
                        return Err(Error::LayerShape {
                            layer: i,
                            expected: format!("{name} {}x{}", shape.0, shape.1),
                            got: "missing".into(),
                        })
                    }
                }
            }
        }
        Ok(())
    }

    /// Differentiable forward pass over a batch (`rows = samples`).
    ///
    /// With `Mode::Train` an inverted-dropout mask is drawn from `rng` for
    /// every layer with a positive rate.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        params: &ParamVars,
        input: Var,
        mode: Mode,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        if g.shape(input).1 != self.input_dim {
            return Err(Error::LayerShape {
                layer: 0,
                expected: format!("input width {}", self.input_dim),
                got: format!("{}", g.shape(input).1),
            });
        }
        let mut rng = rng;
        let mut h = input;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = params.get(&kernel_name(i)).ok_or_else(|| Error::LayerShape {
                layer: i,
                expected: kernel_name(i),
                got: "missing".into(),
            })?;
            let b = params.get(&offset_name(i)).ok_or_else(|| Error::LayerShape {
                layer: i,
                expected: offset_name(i),
                got: "missing".into(),
            })?;
            if g.shape(w) != (self.fan_in(i), layer.width) || g.shape(b) != (1, layer.width) {
                return Err(Error::LayerShape {
                    layer: i,
                    expected: format!("{}x{}", self.fan_in(i), layer.width),
                    got: format!("{:?}", g.shape(w)),
                });
            }
            let z = g.matmul(h, w);
            let z = g.add_row(z, b);
            h = layer.activation.apply_graph(g, z);
            if mode == Mode::Train && layer.dropout > 0.0 {
                let rng = rng
                    .as_deref_mut()
                    .ok_or_else(|| Error::Config("dropout in train mode needs an rng".into()))?;
                let keep = 1.0 - layer.dropout;
                let (r, c) = g.shape(h);
                let mask: Vec<f64> = (0..r * c)
                    .map(|_| {
                        if rng.gen::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let mask = g.constant(Tensor::from_vec(r, c, mask)?);
                h = g.mul(h, mask);
            }
        }
        Ok(h)
    }

    /// Eval-mode forward pass without any graph bookkeeping.
    ///
    /// Uses the same kernels as [`MlpSpec::forward_graph`], so the outputs
    /// are bit-identical to the graph's eval-mode values.
    pub fn infer(&self, params: &ParamSet, input: &Tensor) -> Result<Tensor> {
        if input.cols() != self.input_dim {
            return Err(Error::LayerShape {
                layer: 0,
                expected: format!("input width {}", self.input_dim),
                got: format!("{}", input.cols()),
            });
        }
        let mut h = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (w, b) = match (params.get(&kernel_name(i)), params.get(&offset_name(i))) {
                (Some(w), Some(b)) => (w, b),
                _ => {
                    return Err(Error::LayerShape {
                        layer: i,
                        expected: format!("{} and {}", kernel_name(i), offset_name(i)),
                        got: "missing".into(),
                    })
                }
            };
            if w.shape() != (self.fan_in(i), layer.width) || b.shape() != (1, layer.width) {
                return Err(Error::LayerShape {
                    layer: i,
                    expected: format!("{}x{}", self.fan_in(i), layer.width),
                    got: format!("{}x{}", w.rows(), w.cols()),
                });
            }
            h = h.matmul(w).add_row(b).map(|x| layer.activation.apply(x));
        }
        Ok(h)
    }
}

/// Single-input forward pass returning the output and the graph that produced it.
pub fn forward_mlp(
    spec: &MlpSpec,
    params: &ParamSet,
    input: &[f64],
    mode: Mode,
    rng: Option<&mut dyn RngCore>,
) -> Result<(Vec<f64>, Graph)> {
    if input.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("network input".into()));
    }
    spec.check_params(params)?;
    let mut g = Graph::new();
    let vars = params.to_leaves(&mut g);
    let x = g.constant(Tensor::row(input.to_vec()));
    let out = spec.forward_graph(&mut g, &vars, x, mode, rng)?;
    let values = g.value(out).data().to_vec();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("network output".into()));
    }
    Ok((values, g))
}
