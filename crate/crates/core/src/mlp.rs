//! Fully-connected closure network and its reverse-mode gradients.
//!
//! Parameters live in one flat vector. Layers are stored in order from the
//! input side; each layer contributes its weight matrix `W` (`fan_out ×
//! fan_in`, row-major) followed by its bias vector (`fan_out`). Hidden
//! layers apply the configured activation, the output layer is linear.
//!
//! Gradients are computed with a fixed-structure tape: a forward pass
//! records each layer's input activations and [`ClosureParams::backward`]
//! replays them in reverse. Every differentiated program in this crate is a
//! composition of such passes with RK4 stages, so no general graph is needed.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpArchitecture {
    pub input_dim: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl MlpArchitecture {
    pub fn new(input_dim: usize, hidden_layers: usize, hidden_width: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_layers,
            hidden_width,
            output_dim,
            activation: Activation::Tanh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::config("closure.arch", "input and output dims must be >= 1"));
        }
        if self.hidden_layers > 0 && self.hidden_width == 0 {
            return Err(Error::config("closure.arch.hidden_width", "must be >= 1"));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for every layer, input side first.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(std::iter::repeat_n(self.hidden_width, self.hidden_layers));
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| (i + 1) * o).sum()
    }

    /// Offset of each layer's weight block in the flat vector.
    fn layer_offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.layer_shapes()
            .iter()
            .map(|(i, o)| {
                let here = off;
                off += (i + 1) * o;
                here
            })
            .collect()
    }
}

/// Weights and biases of one dense layer, unflattened.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `[fan_out × fan_in]`
    pub weights: Array2<f64>,
    pub bias: Vec<f64>,
}

/// Flat parameter vector `θ` together with the architecture it encodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosureParams {
    pub arch: MlpArchitecture,
    pub flat: Vec<f64>,
}

/// Activations recorded by a taped forward pass: the input followed by the
/// output of every hidden layer.
#[derive(Debug, Clone)]
pub struct MlpTape {
    acts: Vec<Array2<f64>>,
}

impl ClosureParams {
    pub fn new(arch: MlpArchitecture, flat: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if flat.len() != arch.param_count() {
            return Err(Error::config(
                "closure.params",
                format!("expected {} parameters, got {}", arch.param_count(), flat.len()),
            ));
        }
        Ok(Self { arch, flat })
    }

    pub fn zeros(arch: MlpArchitecture) -> Self {
        Self {
            arch,
            flat: vec![0.0; arch.param_count()],
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot(arch: MlpArchitecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut flat = Vec::with_capacity(arch.param_count());
        for (fan_in, fan_out) in arch.layer_shapes() {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).unwrap();
            flat.extend((0..fan_in * fan_out).map(|_| dist.sample(&mut rng)));
            flat.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Self { arch, flat }
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    fn layer_views(&self) -> Vec<(ArrayView2<'_, f64>, ArrayView1<'_, f64>)> {
        self.arch
            .layer_shapes()
            .into_iter()
            .zip(self.arch.layer_offsets())
            .map(|((fi, fo), off)| {
                let w = ArrayView2::from_shape((fo, fi), &self.flat[off..off + fi * fo]).unwrap();
                let b = ArrayView1::from(&self.flat[off + fi * fo..off + fi * fo + fo]);
                (w, b)
            })
            .collect()
    }

    /// Splits the flat vector into per-layer weights and biases.
    pub fn unflatten(&self) -> Vec<DenseLayer> {
        self.layer_views()
            .into_iter()
            .map(|(w, b)| DenseLayer {
                weights: w.to_owned(),
                bias: b.to_vec(),
            })
            .collect()
    }

    /// Inverse of [`ClosureParams::unflatten`].
    pub fn flatten(arch: MlpArchitecture, layers: &[DenseLayer]) -> Result<Self> {
        let shapes = arch.layer_shapes();
        if shapes.len() != layers.len() {
            return Err(Error::config("closure.params", "layer count mismatch"));
        }
        let mut flat = Vec::with_capacity(arch.param_count());
        for ((fi, fo), layer) in shapes.into_iter().zip(layers) {
            if layer.weights.dim() != (fo, fi) || layer.bias.len() != fo {
                return Err(Error::config("closure.params", "layer shape mismatch"));
            }
            flat.extend(layer.weights.iter());
            flat.extend_from_slice(&layer.bias);
        }
        Self::new(arch, flat)
    }

    /// Single-input forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.arch.input_dim {
            return Err(Error::config(
                "input",
                format!("expected {} inputs, got {}", self.arch.input_dim, input.len()),
            ));
        }
        let x = ArrayView2::from_shape((1, input.len()), input).unwrap();
        Ok(self.forward_batch(x).into_raw_vec_and_offset().0)
    }

    /// Forward pass over the rows of `x` (`[rows × input_dim]`).
    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        self.run(x, None)
    }

    /// Forward pass that records what [`ClosureParams::backward`] needs.
    pub fn forward_taped(&self, x: ArrayView2<'_, f64>) -> (Array2<f64>, MlpTape) {
        let mut acts = Vec::with_capacity(self.arch.hidden_layers + 1);
        let out = self.run(x, Some(&mut acts));
        (out, MlpTape { acts })
    }

    fn run(&self, x: ArrayView2<'_, f64>, mut record: Option<&mut Vec<Array2<f64>>>) -> Array2<f64> {
        debug_assert_eq!(x.ncols(), self.arch.input_dim);
        let layers = self.layer_views();
        let last = layers.len() - 1;
        let mut a = x.to_owned();
        for (l, (w, b)) in layers.into_iter().enumerate() {
            let mut z = a.dot(&w.t());
            z += &b;
            if l < last {
                let act = self.arch.activation;
                z.mapv_inplace(|v| act.apply(v));
            }
            if let Some(rec) = record.as_deref_mut() {
                rec.push(a);
            }
            a = z;
        }
        a
    }

    /// Reverse pass: given `dout = ∂L/∂output` for the taped rows, adds
    /// `∂L/∂θ` into `grad` and returns `∂L/∂input`.
    pub fn backward(&self, tape: &MlpTape, dout: ArrayView2<'_, f64>, grad: &mut [f64]) -> Array2<f64> {
        assert_eq!(grad.len(), self.flat.len(), "gradient buffer length");
        let shapes = self.arch.layer_shapes();
        let offsets = self.arch.layer_offsets();
        let layers = self.layer_views();
        let act = self.arch.activation;
        let mut delta = dout.to_owned();
        for l in (0..layers.len()).rev() {
            let (fi, fo) = shapes[l];
            let off = offsets[l];
            let a_prev = &tape.acts[l];
            let (gw_slice, rest) = grad[off..off + (fi + 1) * fo].split_at_mut(fi * fo);
            let mut gw = ArrayViewMut2::from_shape((fo, fi), gw_slice).unwrap();
            general_mat_mul(1.0, &delta.t(), a_prev, 1.0, &mut gw);
            let mut gb = ArrayViewMut1::from(rest);
            gb += &delta.sum_axis(Axis(0));
            let mut da = delta.dot(&layers[l].0);
            if l == 0 {
                return da;
            }
            da.zip_mut_with(a_prev, |d, &a| *d *= act.derivative_from_output(a));
            delta = da;
        }
        unreachable!("network has at least one layer")
    }
}

/// A scalar function of a flat parameter vector with an exact gradient.
pub trait Objective {
    fn dim(&self) -> usize;

    /// Objective value and `∂/∂params`.
    fn value_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)>;

    fn value(&self, params: &[f64]) -> Result<f64> {
        Ok(self.value_and_grad(params)?.0)
    }
}

/// Evaluates `objective` and its reverse-mode gradient at `params`, failing
/// if any component is non-finite.
pub fn grad_through<O: Objective + ?Sized>(objective: &O, params: &[f64]) -> Result<(f64, Vec<f64>)> {
    if params.len() != objective.dim() {
        return Err(Error::config(
            "params",
            format!("objective expects {} parameters, got {}", objective.dim(), params.len()),
        ));
    }
    let (v, g) = objective.value_and_grad(params)?;
    if !v.is_finite() {
        return Err(Error::Gradient(format!("objective value {v}")));
    }
    if let Some(i) = g.iter().position(|x| !x.is_finite()) {
        return Err(Error::Gradient(format!("component {i} is {}", g[i])));
    }
    Ok((v, g))
}

/// `‖θ‖²/2`.
#[derive(Debug, Clone, Copy)]
pub struct HalfSquaredNorm {
    pub dim: usize,
}

impl Objective for HalfSquaredNorm {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        let v = 0.5 * params.iter().map(|x| x * x).sum::<f64>();
        Ok((v, params.to_vec()))
    }
}

/// One output component of the network at a fixed input.
#[derive(Debug, Clone)]
pub struct NetworkOutput {
    pub arch: MlpArchitecture,
    pub input: Vec<f64>,
    pub component: usize,
}

impl Objective for NetworkOutput {
    fn dim(&self) -> usize {
        self.arch.param_count()
    }

    fn value_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        let p = ClosureParams::new(self.arch, params.to_vec())?;
        if self.input.len() != self.arch.input_dim || self.component >= self.arch.output_dim {
            return Err(Error::config("input", "dimension mismatch"));
        }
        let x = ArrayView2::from_shape((1, self.input.len()), &self.input).unwrap();
        let (out, tape) = p.forward_taped(x);
        let mut dout = Array2::zeros(out.dim());
        dout[[0, self.component]] = 1.0;
        let mut grad = vec![0.0; p.len()];
        p.backward(&tape, dout.view(), &mut grad);
        Ok((out[[0, self.component]], grad))
    }
}
