use serde::{Deserialize, Serialize};

use crate::diffopt::sigmoid;
use crate::numerics::{gemm, Matrix, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Swish,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Swish => z * sigmoid(z),
        }
    }

    /// Derivative given the pre-activation `z` and the output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Swish => {
                let s = sigmoid(z);
                s * (1.0 + z * (1.0 - s))
            }
        }
    }
}

/// Fully connected network with a linear output layer. Parameters live in a
/// flat slice, layer by layer: weights (`out × in`, row-major) then biases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    widths: Vec<usize>,
    activation: Activation,
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    w: usize,
    b: usize,
    fan_in: usize,
    fan_out: usize,
}

/// Intermediate values of a batched forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Layer inputs, then the network output last.
    activations: Vec<Matrix>,
    /// Hidden pre-activations.
    pre: Vec<Matrix>,
}

impl MlpCache {
    pub fn output(&self) -> &Matrix {
        self.activations.last().expect("non-empty cache")
    }
}

impl Mlp {
    pub fn new(input: usize, hidden: &[usize], output: usize, activation: Activation) -> Mlp {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(output);
        Mlp { widths, activation }
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    fn layers(&self) -> Vec<Layer> {
        let mut off = 0;
        self.widths
            .windows(2)
            .map(|w| {
                let l = Layer { w: off, b: off + w[0] * w[1], fan_in: w[0], fan_out: w[1] };
                off += w[0] * w[1] + w[1];
                l
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Weights `~ N(0, 1/fan_in)`, zero biases; the output layer is further
    /// scaled by `output_scale`.
    pub fn init(&self, rng: &mut RngStream, output_scale: f64) -> Vec<f64> {
        let mut p = vec![0.0; self.param_count()];
        let layers = self.layers();
        let last = layers.len() - 1;
        for (li, l) in layers.iter().enumerate() {
            let scale = (1.0 / l.fan_in as f64).sqrt() * if li == last { output_scale } else { 1.0 };
            for v in &mut p[l.w..l.b] {
                *v = scale * rng.normal();
            }
        }
        p
    }

    /// Mutable view of the output-layer biases.
    pub fn output_bias_mut<'p>(&self, params: &'p mut [f64]) -> &'p mut [f64] {
        let l = *self.layers().last().unwrap();
        &mut params[l.b..l.b + l.fan_out]
    }

    /// Sum of squared weights (biases excluded).
    pub fn weight_sq_norm(&self, params: &[f64]) -> f64 {
        self.layers().iter().map(|l| params[l.w..l.b].iter().map(|v| v * v).sum::<f64>()).sum()
    }

    /// `grad += scale · ∂‖W‖²/∂params`.
    pub fn add_weight_decay_grad(&self, params: &[f64], scale: f64, grad: &mut [f64]) {
        for l in self.layers() {
            for i in l.w..l.b {
                grad[i] += 2.0 * scale * params[i];
            }
        }
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.input_dim());
        let layers = self.layers();
        let last = layers.len() - 1;
        let mut h = x.to_vec();
        for (li, l) in layers.iter().enumerate() {
            let mut next = params[l.b..l.b + l.fan_out].to_vec();
            for (o, n) in next.iter_mut().enumerate() {
                let row = &params[l.w + o * l.fan_in..l.w + (o + 1) * l.fan_in];
                *n += crate::numerics::dot(row, &h);
            }
            if li != last {
                next.iter_mut().for_each(|z| *z = self.activation.apply(*z));
            }
            h = next;
        }
        h
    }

    /// Output and its Jacobian with respect to the input (`out × in`),
    /// propagated in forward mode.
    pub fn forward_jacobian(&self, params: &[f64], x: &[f64]) -> (Vec<f64>, Matrix) {
        assert_eq!(x.len(), self.input_dim());
        let d = x.len();
        let layers = self.layers();
        let last = layers.len() - 1;
        let mut h = x.to_vec();
        // tangent[k][i] = ∂h_k / ∂x_i
        let mut tangent = Matrix::identity(d);
        for (li, l) in layers.iter().enumerate() {
            let w = Matrix::from_vec(l.fan_out, l.fan_in, params[l.w..l.b].to_vec()).expect("finite params");
            let mut z = params[l.b..l.b + l.fan_out].to_vec();
            for (o, zo) in z.iter_mut().enumerate() {
                *zo += crate::numerics::dot(w.row(o), &h);
            }
            let mut t = Matrix::zeros(l.fan_out, d);
            gemm(1.0, &w, false, &tangent, false, 0.0, &mut t);
            if li != last {
                for o in 0..l.fan_out {
                    let a = self.activation.apply(z[o]);
                    let g = self.activation.derivative(z[o], a);
                    t.row_mut(o).iter_mut().for_each(|v| *v *= g);
                    z[o] = a;
                }
            }
            h = z;
            tangent = t;
        }
        (h, tangent)
    }

    pub fn forward_batch(&self, params: &[f64], x: &Matrix) -> MlpCache {
        assert_eq!(x.cols(), self.input_dim());
        let layers = self.layers();
        let last = layers.len() - 1;
        let n = x.rows();
        let mut activations = vec![x.clone()];
        let mut pre = Vec::with_capacity(last);
        for (li, l) in layers.iter().enumerate() {
            let w = Matrix::from_vec(l.fan_out, l.fan_in, params[l.w..l.b].to_vec()).expect("finite params");
            let bias = &params[l.b..l.b + l.fan_out];
            let mut z = Matrix::zeros(n, l.fan_out);
            for r in 0..n {
                z.row_mut(r).copy_from_slice(bias);
            }
            gemm(1.0, activations.last().unwrap(), false, &w, true, 1.0, &mut z);
            if li != last {
                let mut a = z.clone();
                a.as_mut_slice().iter_mut().for_each(|v| *v = self.activation.apply(*v));
                pre.push(z);
                activations.push(a);
            } else {
                activations.push(z);
            }
        }
        MlpCache { activations, pre }
    }

    /// `grad += ∂(Σ d_out ⊙ output)/∂params` for the batch in `cache`.
    pub fn backward_batch(&self, params: &[f64], cache: &MlpCache, d_out: &Matrix, grad: &mut [f64]) {
        let layers = self.layers();
        let last = layers.len() - 1;
        let mut delta = d_out.clone();
        for li in (0..layers.len()).rev() {
            let l = layers[li];
            if li != last {
                let z = &cache.pre[li];
                let a = &cache.activations[li + 1];
                for ((d, zv), av) in delta.as_mut_slice().iter_mut().zip(z.as_slice()).zip(a.as_slice()) {
                    *d *= self.activation.derivative(*zv, *av);
                }
            }
            let input = &cache.activations[li];
            let mut gw = Matrix::zeros(l.fan_out, l.fan_in);
            gemm(1.0, &delta, true, input, false, 0.0, &mut gw);
            for (g, v) in grad[l.w..l.b].iter_mut().zip(gw.as_slice()) {
                *g += v;
            }
            for r in 0..delta.rows() {
                for (g, v) in grad[l.b..l.b + l.fan_out].iter_mut().zip(delta.row(r)) {
                    *g += v;
                }
            }
            if li > 0 {
                let w = Matrix::from_vec(l.fan_out, l.fan_in, params[l.w..l.b].to_vec()).expect("finite params");
                let mut prev = Matrix::zeros(delta.rows(), l.fan_in);
                gemm(1.0, &delta, false, &w, false, 0.0, &mut prev);
                delta = prev;
            }
        }
    }
}
