//! Small ReLU perceptrons with sigmoid outputs, trained by binary
//! cross-entropy. Used for the ranking discriminator and the annotator.

use crate::autodiff::{ParamId, ParamSet};
use crate::optim::Adam;
use crate::tensor::{gemm, Matrix};
use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Debug)]
pub struct Mlp {
    pub params: ParamSet,
    widths: Vec<usize>,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

impl Mlp {
    /// Affine layers `widths[0] -> widths[1] -> ... -> widths[last]` with
    /// ReLU between them. He-initialised weights, zero biases.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Self {
        assert!(widths.len() >= 2 && widths.iter().all(|&w| w > 0), "need positive widths for at least one layer");
        let mut params = ParamSet::new();
        for (l, w) in widths.windows(2).enumerate() {
            let normal = Normal::new(0.0, (2.0 / w[0] as f64).sqrt()).expect("finite std");
            let data = (0..w[0] * w[1]).map(|_| normal.sample(rng)).collect();
            params.add(format!("layer{l}.w"), Matrix::from_vec(w[0], w[1], data));
            params.add(format!("layer{l}.b"), Matrix::zeros(1, w[1]));
        }
        Self {
            params,
            widths: widths.to_vec(),
        }
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("non-empty widths")
    }

    fn affine(&self, l: usize, x: &Matrix) -> Matrix {
        let w = self.params.get(ParamId(2 * l));
        let b = self.params.get(ParamId(2 * l + 1));
        let mut z = Matrix::zeros(x.rows(), w.cols());
        for r in 0..z.rows() {
            z.row_mut(r).copy_from_slice(b.as_slice());
        }
        gemm(1.0, x, false, w, false, 1.0, &mut z);
        z
    }

    /// Activations of every layer; the last entry holds the logits.
    fn activations(&self, x: &Matrix) -> Vec<Matrix> {
        let mut acts = Vec::with_capacity(self.num_layers());
        for l in 0..self.num_layers() {
            let mut z = self.affine(l, acts.last().unwrap_or(x));
            if l + 1 < self.num_layers() {
                z.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(z);
        }
        acts
    }

    pub fn logits(&self, x: &Matrix) -> Matrix {
        self.activations(x).pop().expect("at least one layer")
    }

    pub fn probabilities(&self, x: &Matrix) -> Matrix {
        let mut z = self.logits(x);
        z.as_mut_slice().iter_mut().for_each(|v| *v = sigmoid(*v));
        z
    }

    /// Mean binary cross-entropy over all entries, and its gradient.
    ///
    /// `row_weights` scales each row's contribution; the mean is taken over
    /// the weighted rows.
    pub fn bce_grad(&self, x: &Matrix, y: &Matrix, row_weights: Option<&[f64]>) -> (f64, Vec<Matrix>) {
        let acts = self.activations(x);
        let logits = acts.last().expect("at least one layer");
        let outs = logits.cols() as f64;
        let total_w: f64 = row_weights.map_or(x.rows() as f64, |w| w.iter().sum());
        let mut delta = Matrix::zeros(logits.rows(), logits.cols());
        let mut loss = 0.0;
        for r in 0..logits.rows() {
            let w = row_weights.map_or(1.0, |w| w[r]) / (total_w * outs);
            for ((d, &z), &t) in delta.row_mut(r).iter_mut().zip(logits.row(r)).zip(y.row(r)) {
                loss += w * (softplus(z) - t * z);
                *d = w * (sigmoid(z) - t);
            }
        }
        let mut grads = self.params.zeros_like();
        for l in (0..self.num_layers()).rev() {
            let input = if l == 0 { x } else { &acts[l - 1] };
            gemm(1.0, input, true, &delta, false, 0.0, &mut grads[2 * l]);
            let gb = grads[2 * l + 1].as_mut_slice();
            for r in 0..delta.rows() {
                for (g, d) in gb.iter_mut().zip(delta.row(r)) {
                    *g += d;
                }
            }
            if l > 0 {
                let w = self.params.get(ParamId(2 * l));
                let mut prev = Matrix::zeros(delta.rows(), w.rows());
                gemm(1.0, &delta, false, w, true, 0.0, &mut prev);
                for (p, a) in prev.as_mut_slice().iter_mut().zip(acts[l - 1].as_slice()) {
                    if *a <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
        (loss, grads)
    }

    /// One Adam step on a minibatch. Returns the loss before the step.
    pub fn train_step(&mut self, opt: &mut Adam, lr: f64, x: &Matrix, y: &Matrix, row_weights: Option<&[f64]>) -> f64 {
        let (loss, grads) = self.bce_grad(x, y, row_weights);
        opt.step(&mut self.params, &grads, lr);
        loss
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(800.0) == 1.0 && sigmoid(-800.0) == 0.0);
        assert!((softplus(-800.0)).abs() < 1e-300 && (softplus(800.0) - 800.0).abs() < 1e-9);
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mlp = Mlp::new(&[3, 5, 4, 2], &mut rng);
        let x = Matrix::randn(6, 3, 1.0, &mut rng);
        let y = Matrix::from_vec(6, 2, (0..12).map(|i| (i % 3 == 0) as u8 as f64).collect());
        let weights = [1.0, 2.0, 0.5, 1.0, 3.0, 1.0];
        let (_, grads) = mlp.bce_grad(&x, &y, Some(&weights));
        let h = 1e-6;
        for p in 0..mlp.params.len() {
            for i in 0..mlp.params.values()[p].len() {
                let orig = mlp.params.values()[p].as_slice()[i];
                mlp.params.values_mut()[p].as_mut_slice()[i] = orig + h;
                let up = mlp.bce_grad(&x, &y, Some(&weights)).0;
                mlp.params.values_mut()[p].as_mut_slice()[i] = orig - h;
                let down = mlp.bce_grad(&x, &y, Some(&weights)).0;
                mlp.params.values_mut()[p].as_mut_slice()[i] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = grads[p].as_slice()[i];
                assert!((a - numeric).abs() < 1e-7, "param {p} entry {i}: {a} vs {numeric}");
            }
        }
    }

    #[test]
    fn learns_xor() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut mlp = Mlp::new(&[2, 16, 1], &mut rng);
        let x = Matrix::from_rows(&[[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]]);
        let y = Matrix::from_rows(&[[0.0], [1.0], [1.0], [0.0]]);
        let mut opt = Adam::new(&mlp.params);
        for _ in 0..2000 {
            mlp.train_step(&mut opt, 0.02, &x, &y, None);
        }
        let p = mlp.probabilities(&x);
        for r in 0..4 {
            assert_eq!(p.get(r, 0) > 0.5, y.get(r, 0) > 0.5);
        }
    }
}
