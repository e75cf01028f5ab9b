//! Dense feed-forward building blocks with hand-written backpropagation.
//!
//! Everything is batched over matrix columns: an activation matrix holds one
//! sample per column, so a layer forward pass is a single matrix product.
//! Gradient containers reuse the same structs as the parameters themselves
//! ([`Mlp::zeros_like`]), which keeps the backward API down to "accumulate
//! into a mirror of the network".

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Numerically stable softplus, `ln(1 + exp(x))`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Derivative of softplus: the logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Affine layer `y = W x + b` with the bias stored as a column so it
/// broadcasts over the batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array2<f64>,
}

impl Linear {
    pub fn glorot(out_dim: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            weight: glorot_matrix(out_dim, in_dim, rng),
            bias: Array2::zeros((out_dim, 1)),
        }
    }

    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Linear {
            weight: Array2::zeros((out_dim, in_dim)),
            bias: Array2::zeros((out_dim, 1)),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        self.weight.dot(x) + &self.bias
    }
}

pub fn glorot_matrix(out_dim: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
    Array2::from_shape_fn((out_dim, in_dim), |_| rng.random_range(-limit..limit))
}

/// Residual hidden block: `softplus(W x + b) + P x`, where `P` is a learned
/// projection that carries the skip path across a dimension change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualBlock {
    pub lin: Linear,
    pub proj: Array2<f64>,
}

/// Multilayer perceptron: residual hidden blocks followed by an affine head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub blocks: Vec<ResidualBlock>,
    pub head: Linear,
}

/// Per-call forward state needed by the backward pass.
pub struct MlpCache {
    /// Input to each block.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each block's affine path.
    preacts: Vec<Array2<f64>>,
    /// Inverted-dropout multiplier applied to each block output, if any.
    masks: Vec<Option<Array2<f64>>>,
    /// Input to the head layer.
    head_input: Array2<f64>,
}

impl Mlp {
    pub fn new(in_dim: usize, hidden: &[usize], out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut blocks = Vec::with_capacity(hidden.len());
        let mut prev = in_dim;
        for &width in hidden {
            blocks.push(ResidualBlock {
                lin: Linear::glorot(width, prev, rng),
                proj: glorot_matrix(width, prev, rng),
            });
            prev = width;
        }
        Mlp { blocks, head: Linear::glorot(out_dim, prev, rng) }
    }

    /// Same shapes, all parameters zero; used both for structured test
    /// fixtures and as a gradient accumulator.
    pub fn zeros_like(&self) -> Mlp {
        Mlp {
            blocks: self
                .blocks
                .iter()
                .map(|b| ResidualBlock {
                    lin: Linear {
                        weight: Array2::zeros(b.lin.weight.dim()),
                        bias: Array2::zeros(b.lin.bias.dim()),
                    },
                    proj: Array2::zeros(b.proj.dim()),
                })
                .collect(),
            head: Linear {
                weight: Array2::zeros(self.head.weight.dim()),
                bias: Array2::zeros(self.head.bias.dim()),
            },
        }
    }

    /// Batched forward pass; `dropout = Some((p, rng))` applies inverted
    /// dropout with probability `p` after every residual block.
    pub fn forward(
        &self,
        x: &Array2<f64>,
        mut dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> (Array2<f64>, MlpCache) {
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(self.blocks.len()),
            preacts: Vec::with_capacity(self.blocks.len()),
            masks: Vec::with_capacity(self.blocks.len()),
            head_input: Array2::zeros((0, 0)),
        };
        let mut h = x.clone();
        for block in &self.blocks {
            let pre = block.lin.forward(&h);
            let mut out = pre.mapv(softplus) + block.proj.dot(&h);
            let mask = match dropout.as_mut() {
                Some((p, rng)) if *p > 0.0 => {
                    let keep = 1.0 - *p;
                    let m = Array2::from_shape_fn(out.dim(), |_| {
                        if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }
                    });
                    out *= &m;
                    Some(m)
                }
                _ => None,
            };
            cache.inputs.push(h);
            cache.preacts.push(pre);
            cache.masks.push(mask);
            h = out;
        }
        let y = self.head.forward(&h);
        cache.head_input = h;
        (y, cache)
    }

    /// Backpropagate `d_out` through the cached forward pass, accumulating
    /// parameter gradients into `grads` (a zeros-like mirror of `self`), and
    /// return the gradient with respect to the input.
    pub fn backward(&self, cache: &MlpCache, d_out: &Array2<f64>, grads: &mut Mlp) -> Array2<f64> {
        grads.head.weight += &d_out.dot(&cache.head_input.t());
        grads.head.bias += &d_out.sum_axis(Axis(1)).insert_axis(Axis(1));
        let mut d_h = self.head.weight.t().dot(d_out);
        for (idx, block) in self.blocks.iter().enumerate().rev() {
            if let Some(mask) = &cache.masks[idx] {
                d_h *= mask;
            }
            let x = &cache.inputs[idx];
            let d_pre = &d_h * &cache.preacts[idx].mapv(sigmoid);
            grads.blocks[idx].lin.weight += &d_pre.dot(&x.t());
            grads.blocks[idx].lin.bias += &d_pre.sum_axis(Axis(1)).insert_axis(Axis(1));
            grads.blocks[idx].proj += &d_h.dot(&x.t());
            d_h = block.lin.weight.t().dot(&d_pre) + block.proj.t().dot(&d_h);
        }
        d_h
    }

    /// Sum of squared entries of every weight matrix (affine weights and
    /// residual projections; biases excluded).
    pub fn weight_sq_sum(&self) -> f64 {
        let sq = |m: &Array2<f64>| m.iter().map(|v| v * v).sum::<f64>();
        self.blocks
            .iter()
            .map(|b| sq(&b.lin.weight) + sq(&b.proj))
            .sum::<f64>()
            + sq(&self.head.weight)
    }

    /// Accumulate `factor * W` into the gradient of every weight matrix
    /// (the derivative of the squared-norm penalty; biases excluded).
    pub fn add_weight_grads(&self, grads: &mut Mlp, factor: f64) {
        for (b, g) in self.blocks.iter().zip(&mut grads.blocks) {
            g.lin.weight.scaled_add(factor, &b.lin.weight);
            g.proj.scaled_add(factor, &b.proj);
        }
        grads.head.weight.scaled_add(factor, &self.head.weight);
    }

    pub fn param_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.lin.weight.len() + b.lin.bias.len() + b.proj.len())
            .sum::<usize>()
            + self.head.weight.len()
            + self.head.bias.len()
    }

    /// Append all parameters in a fixed order (per block: weight, bias,
    /// projection; then head weight, head bias).
    pub fn append_flat(&self, out: &mut Vec<f64>) {
        for b in &self.blocks {
            out.extend(b.lin.weight.iter());
            out.extend(b.lin.bias.iter());
            out.extend(b.proj.iter());
        }
        out.extend(self.head.weight.iter());
        out.extend(self.head.bias.iter());
    }

    /// Inverse of [`Mlp::append_flat`]; advances `pos` past the consumed
    /// entries.
    pub fn read_flat(&mut self, src: &[f64], pos: &mut usize) {
        let mut take = |arr: &mut Array2<f64>| {
            for v in arr.iter_mut() {
                *v = src[*pos];
                *pos += 1;
            }
        };
        for b in &mut self.blocks {
            take(&mut b.lin.weight);
            take(&mut b.lin.bias);
            take(&mut b.proj);
        }
        take(&mut self.head.weight);
        take(&mut self.head.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    #[test]
    fn softplus_and_sigmoid_are_stable_and_consistent() {
        for &x in &[-700.0, -30.0, -1.0, 0.0, 0.5, 30.0, 700.0] {
            let sp = softplus(x);
            assert!(sp.is_finite() && sp >= 0.0, "softplus({x}) = {sp}");
            let s = sigmoid(x);
            assert!((0.0..=1.0).contains(&s));
            // Central-difference check away from the extreme tails.
            if x.abs() < 100.0 {
                let h = 1e-6;
                let fd = (softplus(x + h) - softplus(x - h)) / (2.0 * h);
                assert_abs_diff_eq!(s, fd, epsilon = 1e-8);
            }
        }
        assert_abs_diff_eq!(softplus(0.0), std::f64::consts::LN_2, epsilon = 1e-15);
    }

    #[test]
    #[allow(clippy::needless_range_loop)] // deliberately index-based oracle
    fn forward_matches_manual_computation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::new(2, &[3], 2, &mut rng);
        let x = ndarray::array![[0.3], [-0.7]];
        let (y, _) = mlp.forward(&x, None);
        // Recompute with explicit loops.
        let mut h = [0.0; 3];
        for i in 0..3 {
            let mut pre = mlp.blocks[0].lin.bias[[i, 0]];
            let mut skip = 0.0;
            for j in 0..2 {
                pre += mlp.blocks[0].lin.weight[[i, j]] * x[[j, 0]];
                skip += mlp.blocks[0].proj[[i, j]] * x[[j, 0]];
            }
            h[i] = softplus(pre) + skip;
        }
        for i in 0..2 {
            let mut out = mlp.head.bias[[i, 0]];
            for j in 0..3 {
                out += mlp.head.weight[[i, j]] * h[j];
            }
            assert_abs_diff_eq!(y[[i, 0]], out, epsilon = 1e-14);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut mlp = Mlp::new(3, &[4, 3], 2, &mut rng);
        let x = Array2::from_shape_fn((3, 5), |_| rng.random_range(-1.0..1.0));
        let target = Array2::from_shape_fn((2, 5), |_| rng.random_range(-1.0..1.0));
        let loss = |m: &Mlp| {
            let (y, _) = m.forward(&x, None);
            (&y - &target).iter().map(|v| v * v).sum::<f64>()
        };
        let (y, cache) = mlp.forward(&x, None);
        let d_out = (&y - &target).mapv(|v| 2.0 * v);
        let mut grads = mlp.zeros_like();
        let d_x = mlp.backward(&cache, &d_out, &mut grads);

        // Parameter gradients.
        let mut flat = Vec::new();
        mlp.append_flat(&mut flat);
        let mut grad_flat = Vec::new();
        grads.append_flat(&mut grad_flat);
        let h = 1e-6;
        for k in 0..flat.len() {
            let orig = flat[k];
            flat[k] = orig + h;
            let mut pos = 0;
            mlp.read_flat(&flat, &mut pos);
            let up = loss(&mlp);
            flat[k] = orig - h;
            pos = 0;
            mlp.read_flat(&flat, &mut pos);
            let down = loss(&mlp);
            flat[k] = orig;
            pos = 0;
            mlp.read_flat(&flat, &mut pos);
            let fd = (up - down) / (2.0 * h);
            let denom = grad_flat[k].abs().max(fd.abs()).max(1e-6);
            assert!(
                (grad_flat[k] - fd).abs() / denom < 1e-5,
                "param {k}: analytic {} vs fd {fd}",
                grad_flat[k]
            );
        }

        // Input gradient.
        for i in 0..3 {
            for c in 0..5 {
                let mut xp = x.clone();
                xp[[i, c]] += h;
                let (yp, _) = mlp.forward(&xp, None);
                let up: f64 = (&yp - &target).iter().map(|v| v * v).sum();
                let mut xm = x.clone();
                xm[[i, c]] -= h;
                let (ym, _) = mlp.forward(&xm, None);
                let down: f64 = (&ym - &target).iter().map(|v| v * v).sum();
                let fd = (up - down) / (2.0 * h);
                assert_abs_diff_eq!(d_x[[i, c]], fd, epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn dropout_is_seed_deterministic_and_off_in_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = Mlp::new(4, &[8, 8], 3, &mut rng);
        let x = Array2::from_shape_fn((4, 6), |_| rng.random_range(-1.0..1.0));
        let (e1, _) = mlp.forward(&x, None);
        let (e2, _) = mlp.forward(&x, None);
        assert_eq!(e1, e2, "eval mode must be deterministic");
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let (t1, _) = mlp.forward(&x, Some((0.5, &mut r1)));
        let (t2, _) = mlp.forward(&x, Some((0.5, &mut r2)));
        assert_eq!(t1, t2, "same dropout seed must give same output");
        let mut r3 = ChaCha8Rng::seed_from_u64(10);
        let (t3, _) = mlp.forward(&x, Some((0.5, &mut r3)));
        assert_ne!(t1, t3, "different dropout seed should differ");
    }

    #[test]
    fn flat_round_trip_preserves_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mlp = Mlp::new(3, &[5, 4], 2, &mut rng);
        let mut flat = Vec::new();
        mlp.append_flat(&mut flat);
        assert_eq!(flat.len(), mlp.param_count());
        let mut copy = mlp.zeros_like();
        let mut pos = 0;
        copy.read_flat(&flat, &mut pos);
        assert_eq!(pos, flat.len());
        assert_eq!(copy, mlp);
    }
}
