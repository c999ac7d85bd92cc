use serde::{Deserialize, Serialize};

use crate::error::{AssimError, Result};
use crate::prob::SeededRng;

/// Fully connected network with `tanh` hidden layers and a linear output.
///
/// All weights live in one flat vector, layer by layer: the weight matrix
/// (row-major, `out × in`) followed by the bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Layer inputs recorded by a forward pass, for backpropagation.
pub struct Tape {
    /// `acts[l]` is the input to layer `l`; the last entry is the output.
    acts: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(|v| v.as_slice()).unwrap_or(&[])
    }
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    /// Glorot-style normal initialization; the output layer is scaled by
    /// `output_scale`.
    pub fn new(sizes: &[usize], output_scale: f64, rng: &mut SeededRng) -> Result<Self> {
        if sizes.len() < 2 || sizes.iter().any(|s| *s == 0) {
            return Err(AssimError::InvalidArgument(format!("bad layer sizes {sizes:?}")));
        }
        let mut params = Vec::with_capacity(param_count(sizes));
        let layers = sizes.len() - 1;
        for (l, w) in sizes.windows(2).enumerate() {
            let std = (2.0 / (w[0] + w[1]) as f64).sqrt();
            let scale = if l + 1 == layers { std * output_scale } else { std };
            for _ in 0..w[0] * w[1] {
                params.push(scale * rng.standard_normal());
            }
            params.extend(std::iter::repeat_n(0.0, w[1]));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            params,
        })
    }

    pub fn from_parts(sizes: Vec<usize>, params: Vec<f64>) -> Result<Self> {
        if sizes.len() < 2 || params.len() != param_count(&sizes) {
            return Err(AssimError::InvalidArgument(format!(
                "{} weights do not fit layer sizes {sizes:?}",
                params.len()
            )));
        }
        Ok(Self { sizes, params })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Offset of the output-layer bias in the flat parameter vector.
    pub fn output_bias_offset(&self) -> usize {
        self.params.len() - self.output_dim()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        self.run(&mut cur, |_| {});
        cur
    }

    pub fn forward_tape(&self, x: &[f64]) -> Tape {
        let mut acts = Vec::with_capacity(self.sizes.len());
        let mut cur = x.to_vec();
        self.run(&mut cur, |a| acts.push(a.to_vec()));
        acts.push(cur);
        Tape { acts }
    }

    fn run(&self, cur: &mut Vec<f64>, mut record: impl FnMut(&[f64])) {
        let layers = self.sizes.len() - 1;
        let mut off = 0;
        for l in 0..layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            record(cur);
            let w = &self.params[off..off + n_in * n_out];
            let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            let mut next = b.to_vec();
            for (o, row) in w.chunks_exact(n_in).enumerate() {
                next[o] += row.iter().zip(cur.iter()).map(|(a, c)| a * c).sum::<f64>();
            }
            if l + 1 < layers {
                for v in next.iter_mut() {
                    *v = v.tanh();
                }
            }
            *cur = next;
            off += n_in * n_out + n_out;
        }
    }

    /// Accumulates `∂(gᵀ·output)/∂params` into `grad`.
    pub fn backward(&self, tape: &Tape, grad_out: &[f64], grad: &mut [f64]) {
        let layers = self.sizes.len() - 1;
        let mut offsets = Vec::with_capacity(layers);
        let mut off = 0;
        for l in 0..layers {
            offsets.push(off);
            off += self.sizes[l] * self.sizes[l + 1] + self.sizes[l + 1];
        }
        let mut delta = grad_out.to_vec();
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = offsets[l];
            let input = &tape.acts[l];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &mut grad[off + o * n_in..off + (o + 1) * n_in];
                for (g, x) in row.iter_mut().zip(input) {
                    *g += d * x;
                }
                grad[off + n_in * n_out + o] += d;
            }
            if l == 0 {
                break;
            }
            let w = &self.params[off..off + n_in * n_out];
            let mut prev = vec![0.0; n_in];
            for (o, row) in w.chunks_exact(n_in).enumerate() {
                let d = delta[o];
                for (p, wv) in prev.iter_mut().zip(row) {
                    *p += d * wv;
                }
            }
            // tanh'(z) = 1 − a²
            for (p, a) in prev.iter_mut().zip(input) {
                *p *= 1.0 - a * a;
            }
            delta = prev;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = SeededRng::new(1, 0);
        let net = Mlp::new(&[2, 5, 4, 3], 1.0, &mut rng).unwrap();
        let x = [0.3, -0.7];
        let g = [0.5, -1.0, 2.0];
        let tape = net.forward_tape(&x);
        let mut grad = vec![0.0; net.params().len()];
        net.backward(&tape, &g, &mut grad);
        let f = |n: &Mlp| n.forward(&x).iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
        for k in 0..net.params().len() {
            let mut p = net.clone();
            p.params_mut()[k] += 1e-6;
            let mut m = net.clone();
            m.params_mut()[k] -= 1e-6;
            let fd = (f(&p) - f(&m)) / 2e-6;
            assert!((fd - grad[k]).abs() < 1e-7 * (1.0 + fd.abs()), "param {k}: {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn tape_output_equals_forward() {
        let mut rng = SeededRng::new(2, 0);
        let net = Mlp::new(&[2, 64, 64, 7], 0.1, &mut rng).unwrap();
        let x = [1.0, 2.0];
        assert_eq!(net.forward_tape(&x).output(), net.forward(&x).as_slice());
    }

    #[test]
    fn rejects_mismatched_parts() {
        assert!(Mlp::from_parts(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Mlp::from_parts(vec![2, 3], vec![0.0; 9]).is_ok());
    }
}
