//! Small fully connected networks with rectifier hidden layers.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Glorot-uniform matrix of shape `fan_in x fan_out`.
pub fn init_glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Array2<f64> {
    assert!(fan_in >= 1 && fan_out >= 1, "Glorot init needs nonzero fans");
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-limit..limit))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `inputs x outputs`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Multilayer perceptron: rectifier on hidden layers, identity on the output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Array2<f64>>,
}

impl Mlp {
    /// Glorot-initialized weights, zero biases. `widths` includes input and output.
    pub fn glorot<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let layers = widths
            .windows(2)
            .map(|w| Dense {
                weights: init_glorot(w[0], w[1], rng),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        Self { layers }
    }

    pub fn zeros(widths: &[usize]) -> Self {
        let layers = widths
            .windows(2)
            .map(|w| Dense {
                weights: Array2::zeros((w[0], w[1])),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        Self { layers }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].weights.nrows()
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].weights.ncols()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Appends parameters layer by layer: weights (row-major), then bias.
    pub fn params_into(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend(l.weights.iter().copied());
            out.extend(l.bias.iter().copied());
        }
    }

    /// Reads parameters in the order of [`Mlp::params_into`]; returns the count consumed.
    pub fn set_params(&mut self, src: &[f64]) -> usize {
        let mut pos = 0;
        for l in &mut self.layers {
            for w in l.weights.iter_mut() {
                *w = src[pos];
                pos += 1;
            }
            for b in l.bias.iter_mut() {
                *b = src[pos];
                pos += 1;
            }
        }
        pos
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut a = x.to_owned();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            a = a.dot(&l.weights) + &l.bias;
            if i < last {
                a.mapv_inplace(|v| v.max(0.0));
            }
        }
        a
    }

    pub fn forward_single(&self, x: &[f64]) -> Vec<f64> {
        let x = ArrayView2::from_shape((1, x.len()), x).expect("input shape");
        self.forward(x).into_raw_vec_and_offset().0
    }

    pub fn forward_with_cache(&self, x: Array2<f64>) -> (Array2<f64>, MlpCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut a = x;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let next = a.dot(&l.weights) + &l.bias;
            inputs.push(a);
            a = next;
            if i < last {
                a.mapv_inplace(|v| v.max(0.0));
            }
        }
        (a, MlpCache { inputs })
    }

    /// Returns parameter gradients (flat, same order as the parameters) and
    /// the gradient w.r.t. the network input.
    pub fn backward(&self, cache: &MlpCache, grad_out: Array2<f64>) -> (Vec<f64>, Array2<f64>) {
        let mut grads: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(self.layers.len());
        let mut g = grad_out;
        for (i, l) in self.layers.iter().enumerate().rev() {
            let input = &cache.inputs[i];
            let gw = input.t().dot(&g);
            let gb = g.sum_axis(Axis(0));
            grads.push((gw, gb));
            let mut g_in = g.dot(&l.weights.t());
            if i > 0 {
                // The input of layer i is relu(pre-activation); its zeros mark the inactive units.
                ndarray::Zip::from(&mut g_in).and(input).for_each(|gi, &a| {
                    if a <= 0.0 {
                        *gi = 0.0;
                    }
                });
            }
            g = g_in;
        }
        grads.reverse();
        let mut flat = Vec::with_capacity(self.num_params());
        for (gw, gb) in grads {
            flat.extend(gw.iter().copied());
            flat.extend(gb.iter().copied());
        }
        (flat, g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};
    use ndarray::array;

    #[test]
    fn glorot_bounds_and_variance() {
        let mut rng = substream(1, Stream::Init, 0);
        let w = init_glorot(2, 2, &mut rng);
        assert!(w.iter().all(|v| v.abs() <= 1.224_744_871_391_589));
        let w = init_glorot(200, 500, &mut rng);
        let n = w.len() as f64;
        let mean = w.sum() / n;
        let var = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let expected = 2.0 / 700.0;
        assert!((var / expected - 1.0).abs() < 0.05, "{}", var / expected);
        let other = init_glorot(2, 2, &mut substream(2, Stream::Init, 0));
        assert_ne!(init_glorot(2, 2, &mut substream(1, Stream::Init, 0)), other);
    }

    #[test]
    fn params_round_trip() {
        let mut rng = substream(3, Stream::Init, 0);
        let net = Mlp::glorot(&[2, 4, 3], &mut rng);
        let mut p = Vec::new();
        net.params_into(&mut p);
        assert_eq!(p.len(), net.num_params());
        let mut other = Mlp::zeros(&[2, 4, 3]);
        assert_eq!(other.set_params(&p), p.len());
        assert_eq!(other, net);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = substream(4, Stream::Init, 0);
        let mut net = Mlp::glorot(&[2, 5, 5, 3], &mut rng);
        for l in &mut net.layers {
            l.bias.mapv_inplace(|_| 0.1);
        }
        let x = array![[0.3, -0.7], [1.1, 0.2], [-0.4, 0.9]];
        let coef = array![[1.0, -2.0, 0.5], [0.3, 0.3, -1.0], [2.0, 0.0, 1.0]];
        let loss = |net: &Mlp| (net.forward(x.view()) * &coef).sum();
        let (_, cache) = net.forward_with_cache(x.clone());
        let (g, gx) = net.backward(&cache, coef.clone());
        let mut p = Vec::new();
        net.params_into(&mut p);
        let h = 1e-6;
        for i in 0..p.len() {
            let mut q = p.clone();
            q[i] += h;
            let mut a = net.clone();
            a.set_params(&q);
            q[i] -= 2.0 * h;
            let mut b = net.clone();
            b.set_params(&q);
            let fd = (loss(&a) - loss(&b)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6, "param {i}: {fd} vs {}", g[i]);
        }
        for r in 0..3 {
            for c in 0..2 {
                let mut xp = x.clone();
                xp[[r, c]] += h;
                let mut xm = x.clone();
                xm[[r, c]] -= h;
                let fd = ((net.forward(xp.view()) * &coef).sum()
                    - (net.forward(xm.view()) * &coef).sum())
                    / (2.0 * h);
                assert!((fd - gx[[r, c]]).abs() < 1e-6);
            }
        }
    }
}
