use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Layer widths including the input width; ReLU between layers, none after the last.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidShape(format!("mlp widths {widths:?}")));
        }
        Ok(Self { widths })
    }

    pub fn input(&self) -> usize {
        self.widths[0]
    }

    pub fn output(&self) -> usize {
        *self.widths.last().unwrap()
    }
}

/// `y = W x + b`, `w` is `out x in` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub inputs: usize,
    pub outputs: usize,
    pub w: Vec<T>,
    pub b: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads<T> {
    pub w: Vec<T>,
    pub b: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    layers: Vec<Linear<T>>,
}

/// Activations kept for the backward pass; `acts[0]` is the input.
#[derive(Debug, Clone)]
pub struct MlpTrace<T> {
    acts: Vec<Vec<T>>,
}

impl<T: Scalar> MlpTrace<T> {
    pub fn output(&self) -> &[T] {
        self.acts.last().unwrap()
    }
}

impl<T: Scalar> Mlp<T> {
    /// Glorot-normal weights, zero biases.
    pub fn init(spec: &MlpSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec
            .widths
            .windows(2)
            .map(|w| {
                let (inputs, outputs) = (w[0], w[1]);
                let std = (2.0 / (inputs + outputs) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                Linear {
                    inputs,
                    outputs,
                    w: (0..inputs * outputs).map(|_| T::from_f64(normal.sample(&mut rng))).collect(),
                    b: vec![T::zero(); outputs],
                }
            })
            .collect();
        Self { layers }
    }

    pub fn from_layers(layers: Vec<Linear<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidShape("mlp needs at least one layer".into()));
        }
        for (k, l) in layers.iter().enumerate() {
            if l.w.len() != l.inputs * l.outputs || l.b.len() != l.outputs {
                return Err(Error::InvalidShape(format!("layer {k} extents")));
            }
            if k > 0 && layers[k - 1].outputs != l.inputs {
                return Err(Error::InvalidShape(format!("layer {k} input width")));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Linear<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear<T>] {
        &mut self.layers
    }

    pub fn input(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output(&self) -> usize {
        self.layers.last().unwrap().outputs
    }

    pub fn zero_weights(&mut self) {
        for l in &mut self.layers {
            l.w.iter_mut().chain(l.b.iter_mut()).for_each(|v| *v = T::zero());
        }
    }

    /// Forward over `batch` rows of `input` (row-major `batch x inputs`).
    pub fn forward(&self, input: Vec<T>, batch: usize) -> MlpTrace<T> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input);
        let last = self.layers.len() - 1;
        for (k, l) in self.layers.iter().enumerate() {
            let x = &acts[k];
            let mut y = Vec::with_capacity(batch * l.outputs);
            for r in 0..batch {
                let xr = &x[r * l.inputs..(r + 1) * l.inputs];
                for o in 0..l.outputs {
                    let wr = &l.w[o * l.inputs..(o + 1) * l.inputs];
                    let mut s = l.b[o];
                    for (&a, &b) in wr.iter().zip(xr) {
                        s = s + a * b;
                    }
                    y.push(if k < last { s.max(T::zero()) } else { s });
                }
            }
            acts.push(y);
        }
        MlpTrace { acts }
    }

    /// Backpropagates `d_out` (`batch x outputs`); returns per-layer grads and `d_input`.
    pub fn backward(&self, trace: &MlpTrace<T>, mut d_out: Vec<T>, batch: usize) -> (Vec<LinearGrads<T>>, Vec<T>) {
        let mut grads: Vec<LinearGrads<T>> = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for k in (0..self.layers.len()).rev() {
            let l = &self.layers[k];
            if k < last {
                // ReLU: gradient passes where the activation is positive
                for (g, &a) in d_out.iter_mut().zip(&trace.acts[k + 1]) {
                    if a <= T::zero() {
                        *g = T::zero();
                    }
                }
            }
            let x = &trace.acts[k];
            let mut gw = vec![T::zero(); l.w.len()];
            let mut gb = vec![T::zero(); l.outputs];
            let mut d_in = vec![T::zero(); batch * l.inputs];
            for r in 0..batch {
                let xr = &x[r * l.inputs..(r + 1) * l.inputs];
                let dr = &d_out[r * l.outputs..(r + 1) * l.outputs];
                let dir = &mut d_in[r * l.inputs..(r + 1) * l.inputs];
                for (o, &g) in dr.iter().enumerate() {
                    gb[o] = gb[o] + g;
                    let wr = &l.w[o * l.inputs..(o + 1) * l.inputs];
                    let gwr = &mut gw[o * l.inputs..(o + 1) * l.inputs];
                    for i in 0..l.inputs {
                        gwr[i] = gwr[i] + g * xr[i];
                        dir[i] = dir[i] + g * wr[i];
                    }
                }
            }
            grads.push(LinearGrads { w: gw, b: gb });
            d_out = d_in;
        }
        grads.reverse();
        (grads, d_out)
    }
}

/// SGD-with-momentum state for one MLP, mirroring the TT fused rule.
#[derive(Debug, Clone)]
pub(crate) struct MlpVelocity<T> {
    layers: Option<Vec<LinearGrads<T>>>,
}

impl<T: Scalar> MlpVelocity<T> {
    pub(crate) fn new(mlp: &Mlp<T>, momentum: f64) -> Self {
        let layers = (momentum > 0.0).then(|| {
            mlp.layers
                .iter()
                .map(|l| LinearGrads { w: vec![T::zero(); l.w.len()], b: vec![T::zero(); l.b.len()] })
                .collect()
        });
        Self { layers }
    }

    pub(crate) fn apply(&mut self, mlp: &mut Mlp<T>, grads: &[LinearGrads<T>], lr: T, momentum: T) {
        let step = |w: &mut [T], g: &[T], v: Option<&mut [T]>| match v {
            Some(v) => {
                for ((wi, &gi), vi) in w.iter_mut().zip(g).zip(v) {
                    *vi = momentum * *vi + gi;
                    *wi = *wi - lr * *vi;
                }
            }
            None => {
                for (wi, &gi) in w.iter_mut().zip(g) {
                    *wi = *wi - lr * gi;
                }
            }
        };
        for (k, (l, g)) in mlp.layers.iter_mut().zip(grads).enumerate() {
            match self.layers.as_mut() {
                Some(vel) => {
                    let v = &mut vel[k];
                    step(&mut l.w, &g.w, Some(&mut v.w));
                    step(&mut l.b, &g.b, Some(&mut v.b));
                }
                None => {
                    step(&mut l.w, &g.w, None);
                    step(&mut l.b, &g.b, None);
                }
            }
        }
    }
}
