//! Deep Koopman operator with control.
//!
//! The model lifts a reduced state `x` into `z = [encoder(x); x]` — learned
//! observables concatenated with the raw reduced state — and advances it with
//! a linear pair `z' = A z + B u`. Control inputs enter only through `B`;
//! they are never passed through a nonlinearity, which is what keeps the
//! downstream predictive controller a convex quadratic program.
//!
//! Submodules: [`net`] holds the dense network machinery and its manual
//! backward pass, [`loss`] the five-term training objective and its
//! gradients, [`train`] the Adam loop with scheduling and early stopping.

pub mod loss;
pub mod net;
pub mod train;

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{jacobi_svd, spectral_radius_estimate};
use crate::reduction::ReducedEpisode;
use net::Mlp;

/// Network dimensions: reduced state `r`, learned observables `d_e`, input
/// coefficients `p`, hidden widths. The lifted dimension is `d_e + r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetDims {
    pub reduced_dim: usize,
    pub observable_dim: usize,
    pub input_dim: usize,
    pub hidden: Vec<usize>,
}

impl NetDims {
    /// Default architecture: 256 learned observables over two width-48
    /// residual blocks.
    pub fn standard(reduced_dim: usize, input_dim: usize) -> Self {
        NetDims { reduced_dim, observable_dim: 256, input_dim, hidden: vec![48, 48] }
    }

    pub fn lifted_dim(&self) -> usize {
        self.observable_dim + self.reduced_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.reduced_dim == 0 || self.observable_dim == 0 || self.input_dim == 0 {
            return Err(Error::argument("network dimensions must be positive"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::argument("hidden widths must be non-empty and positive"));
        }
        Ok(())
    }
}

/// Per-coordinate affine normalization statistics, fitted on the training
/// split. States are standardized on the way into the networks and
/// destandardized on the way out; input statistics are recorded for
/// diagnostics but inputs reach `B` untransformed so that the lifted
/// dynamics stay linear in the physical input coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub state_mean: Array1<f64>,
    pub state_std: Array1<f64>,
    pub input_mean: Array1<f64>,
    pub input_std: Array1<f64>,
}

impl Standardizer {
    /// Fit per-row mean and standard deviation; rows are coordinates,
    /// columns samples. Degenerate coordinates get unit scale.
    pub fn fit(states: &Array2<f64>, inputs: &Array2<f64>) -> Self {
        let stats = |m: &Array2<f64>| {
            let n = m.ncols().max(1) as f64;
            let mean = m.sum_axis(Axis(1)) / n;
            let mut std = Array1::zeros(m.nrows());
            for (i, row) in m.axis_iter(Axis(0)).enumerate() {
                let mu = mean[i];
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
                let s = var.sqrt();
                std[i] = if s > 1e-12 { s } else { 1.0 };
            }
            (mean, std)
        };
        let (state_mean, state_std) = stats(states);
        let (input_mean, input_std) = stats(inputs);
        Standardizer { state_mean, state_std, input_mean, input_std }
    }

    /// No-op statistics (zero mean, unit scale).
    pub fn identity(reduced_dim: usize, input_dim: usize) -> Self {
        Standardizer {
            state_mean: Array1::zeros(reduced_dim),
            state_std: Array1::ones(reduced_dim),
            input_mean: Array1::zeros(input_dim),
            input_std: Array1::ones(input_dim),
        }
    }

    pub fn standardize_states(&self, x: &Array2<f64>) -> Array2<f64> {
        let mean = self.state_mean.view().insert_axis(Axis(1));
        let std = self.state_std.view().insert_axis(Axis(1));
        (x - &mean) / std
    }

    pub fn destandardize_states(&self, x: &Array2<f64>) -> Array2<f64> {
        let mean = self.state_mean.view().insert_axis(Axis(1));
        let std = self.state_std.view().insert_axis(Axis(1));
        x * &std + mean
    }
}

/// The trained surrogate: encoder/decoder networks, lifted dynamics, and the
/// normalization and provenance needed to apply it to new data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KoopmanModel {
    pub dims: NetDims,
    pub stats: Standardizer,
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub a: Array2<f64>,
    pub b: Array2<f64>,
    /// Fingerprint of the reduction bases this model was trained against;
    /// consumers refuse to mix a model with foreign bases.
    pub bases_fingerprint: String,
}

impl KoopmanModel {
    /// Fresh model: Glorot networks, `A = 0.99 I` (near-identity dynamics is
    /// the right prior for an incremental process), `B` small uniform.
    pub fn new(
        dims: NetDims,
        stats: Standardizer,
        bases_fingerprint: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        dims.validate()?;
        if stats.state_mean.len() != dims.reduced_dim || stats.input_mean.len() != dims.input_dim {
            return Err(Error::argument("standardizer dimensions do not match network dims"));
        }
        let d_z = dims.lifted_dim();
        let encoder = Mlp::new(dims.reduced_dim, &dims.hidden, dims.observable_dim, rng);
        let decoder = Mlp::new(d_z, &dims.hidden, dims.reduced_dim, rng);
        let a = Array2::eye(d_z) * 0.99;
        let b = Array2::from_shape_fn((d_z, dims.input_dim), |_| rng.random_range(-0.01..0.01));
        Ok(KoopmanModel {
            dims,
            stats,
            encoder,
            decoder,
            a,
            b,
            bases_fingerprint: bases_fingerprint.to_string(),
        })
    }

    // ---- batched internals (columns are samples) ----

    /// Encode raw reduced states; standardization happens inside.
    pub(crate) fn encode_batch(
        &self,
        x_raw: &Array2<f64>,
        dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> (Array2<f64>, net::MlpCache) {
        self.encoder.forward(&self.stats.standardize_states(x_raw), dropout)
    }

    /// Stack encoded observables on top of the raw states.
    pub(crate) fn stack_lift(encoded: &Array2<f64>, x_raw: &Array2<f64>) -> Array2<f64> {
        ndarray::concatenate(Axis(0), &[encoded.view(), x_raw.view()])
            .expect("lift concatenation: column counts must match")
    }

    /// Standardize the trailing `r` rows of a lifted batch — the decoder
    /// sees learned observables as-is but raw states in standardized form.
    pub(crate) fn decoder_input(&self, z: &Array2<f64>) -> Array2<f64> {
        let d_e = self.dims.observable_dim;
        let mut d_in = z.clone();
        let tail = self.stats.standardize_states(&z.slice(s![d_e.., ..]).to_owned());
        d_in.slice_mut(s![d_e.., ..]).assign(&tail);
        d_in
    }

    /// Decode a lifted batch back to raw reduced states.
    pub(crate) fn decode_batch(
        &self,
        z: &Array2<f64>,
        dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> (Array2<f64>, net::MlpCache) {
        let (head, cache) = self.decoder.forward(&self.decoder_input(z), dropout);
        (self.stats.destandardize_states(&head), cache)
    }

    /// Advance a lifted batch one cycle: `Z' = A Z + B U`.
    pub(crate) fn step_batch(&self, z: &Array2<f64>, u: &Array2<f64>) -> Array2<f64> {
        self.a.dot(z) + self.b.dot(u)
    }

    // ---- single-vector inference API ----

    /// Lift a reduced state into the observable space. The last `r` entries
    /// of the result are the input itself.
    pub fn lift(&self, x: &Array1<f64>) -> Array1<f64> {
        let xm = x.view().insert_axis(Axis(1)).to_owned();
        let (e, _) = self.encode_batch(&xm, None);
        let z = Self::stack_lift(&e, &xm);
        z.index_axis(Axis(1), 0).to_owned()
    }

    /// One linear step in the lifted space.
    pub fn step_lifted(&self, z: &Array1<f64>, u: &Array1<f64>) -> Array1<f64> {
        self.a.dot(z) + self.b.dot(u)
    }

    /// Decode a lifted vector back to the reduced space.
    pub fn decode(&self, z: &Array1<f64>) -> Array1<f64> {
        let zm = z.view().insert_axis(Axis(1)).to_owned();
        let (d, _) = self.decode_batch(&zm, None);
        d.index_axis(Axis(1), 0).to_owned()
    }

    /// Predicted next reduced state: `decode(A lift(x) + B u)`.
    pub fn predict_one_step(&self, x: &Array1<f64>, u: &Array1<f64>) -> Array1<f64> {
        self.decode(&self.step_lifted(&self.lift(x), u))
    }

    /// Roll the lifted dynamics forward through a sequence of inputs
    /// (columns of `inputs`), decoding after every step. Returns the
    /// predicted reduced states as columns, one per input.
    pub fn rollout(&self, x0: &Array1<f64>, inputs: &Array2<f64>) -> Result<Array2<f64>> {
        if inputs.nrows() != self.dims.input_dim {
            return Err(Error::argument(format!(
                "rollout inputs have {} rows, expected {}",
                inputs.nrows(),
                self.dims.input_dim
            )));
        }
        let steps = inputs.ncols();
        let mut z = self.lift(x0);
        let mut out = Array2::zeros((self.dims.reduced_dim, steps));
        for k in 0..steps {
            z = self.step_lifted(&z, &inputs.column(k).to_owned());
            out.column_mut(k).assign(&self.decode(&z));
        }
        Ok(out)
    }

    /// Largest singular value of `A` (the differentiable stability
    /// surrogate) and a spectral-radius estimate of the true eigenvalue
    /// moduli, for diagnostics.
    pub fn spectral_diagnostics(&self) -> Result<(f64, f64)> {
        let svd = jacobi_svd(&self.a)?;
        Ok((svd.sigma[0], spectral_radius_estimate(&self.a, 24)))
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.decoder.param_count() + self.a.len() + self.b.len()
    }

    /// Flatten all parameters (encoder, decoder, A, B) in a stable order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.encoder.append_flat(&mut out);
        self.decoder.append_flat(&mut out);
        out.extend(self.a.iter());
        out.extend(self.b.iter());
        out
    }

    /// Overwrite all parameters from a flat vector produced by
    /// [`KoopmanModel::to_flat`].
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::argument(format!(
                "flat parameter vector has {} entries, model needs {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut pos = 0;
        self.encoder.read_flat(flat, &mut pos);
        self.decoder.read_flat(flat, &mut pos);
        for v in self.a.iter_mut() {
            *v = flat[pos];
            pos += 1;
        }
        for v in self.b.iter_mut() {
            *v = flat[pos];
            pos += 1;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        serde_json::to_writer(BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        let model: KoopmanModel = serde_json::from_reader(BufReader::new(file))?;
        model.dims.validate()?;
        if model.a.dim() != (model.dims.lifted_dim(), model.dims.lifted_dim())
            || model.b.dim() != (model.dims.lifted_dim(), model.dims.input_dim)
        {
            return Err(Error::argument("model file has inconsistent matrix dimensions"));
        }
        Ok(model)
    }
}

/// A batch of training windows in structure-of-arrays form: `states[m]`
/// holds the m-th state of every window as columns (`m = 0..=S`), and
/// `inputs[m]` the m-th input (`m = 0..S`).
#[derive(Debug, Clone)]
pub struct WindowBatch {
    pub states: Vec<Array2<f64>>,
    pub inputs: Vec<Array2<f64>>,
}

impl WindowBatch {
    /// Slice every episode into overlapping windows of `s_p + 1` states and
    /// `s_p` inputs, stride one.
    pub fn from_episodes(episodes: &[ReducedEpisode], s_p: usize) -> Result<WindowBatch> {
        if s_p == 0 {
            return Err(Error::argument("rollout length must be at least 1"));
        }
        if episodes.is_empty() {
            return Err(Error::argument("window extraction needs at least one episode"));
        }
        let r = episodes[0].x.nrows();
        let p = episodes[0].u.nrows();
        let mut total = 0;
        for ep in episodes {
            let n = ep.u.ncols();
            if ep.x.ncols() != n + 1 || ep.x.nrows() != r || ep.u.nrows() != p {
                return Err(Error::argument(format!(
                    "episode {} has inconsistent reduced dimensions",
                    ep.id
                )));
            }
            if n < s_p {
                return Err(Error::argument(format!(
                    "episode {} has {n} cycles, shorter than the rollout window {s_p}",
                    ep.id
                )));
            }
            total += n - s_p + 1;
        }
        let mut states = vec![Array2::zeros((r, total)); s_p + 1];
        let mut inputs = vec![Array2::zeros((p, total)); s_p];
        let mut col = 0;
        for ep in episodes {
            let n = ep.u.ncols();
            for k in 0..=(n - s_p) {
                for (m, sm) in states.iter_mut().enumerate() {
                    sm.column_mut(col).assign(&ep.x.column(k + m));
                }
                for (m, um) in inputs.iter_mut().enumerate() {
                    um.column_mut(col).assign(&ep.u.column(k + m));
                }
                col += 1;
            }
        }
        Ok(WindowBatch { states, inputs })
    }

    /// Number of windows in the batch.
    pub fn len(&self) -> usize {
        self.states[0].ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rollout horizon S.
    pub fn horizon(&self) -> usize {
        self.inputs.len()
    }

    /// Gather a sub-batch by window index.
    pub fn select(&self, indices: &[usize]) -> WindowBatch {
        let gather = |m: &Array2<f64>| {
            let mut out = Array2::zeros((m.nrows(), indices.len()));
            for (dst, &src) in indices.iter().enumerate() {
                out.column_mut(dst).assign(&m.column(src));
            }
            out
        };
        WindowBatch {
            states: self.states.iter().map(&gather).collect(),
            inputs: self.inputs.iter().map(&gather).collect(),
        }
    }
}

/// Test-only model builders shared by the koopman submodule tests.
#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;
    use rand::SeedableRng;

    pub(crate) fn tiny_dims() -> NetDims {
        NetDims { reduced_dim: 2, observable_dim: 3, input_dim: 2, hidden: vec![4, 3] }
    }

    pub(crate) fn random_model(seed: u64) -> KoopmanModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = tiny_dims();
        let stats = Standardizer::identity(dims.reduced_dim, dims.input_dim);
        KoopmanModel::new(dims, stats, "test-fp", &mut rng).unwrap()
    }

    /// Decoder that reproduces the trailing raw state of any lifted vector
    /// (up to rounding): zero affine paths, identity-wired projections, and
    /// a head bias canceling the softplus(0) offsets. Requires exactly two
    /// hidden blocks, each at least `r` wide, and identity statistics.
    pub(crate) fn exact_tail_decoder(dims: &NetDims, template: &Mlp) -> Mlp {
        let mut dec = template.zeros_like();
        let d_e = dims.observable_dim;
        let r = dims.reduced_dim;
        let h0 = dec.blocks[0].proj.nrows();
        assert!(h0 >= r && dec.blocks.len() == 2, "fixture expects two blocks of width >= r");
        for i in 0..r {
            dec.blocks[0].proj[[i, d_e + i]] = 1.0;
        }
        let h1 = dec.blocks[1].proj.nrows();
        for i in 0..h1.min(h0) {
            dec.blocks[1].proj[[i, i]] = 1.0;
        }
        for i in 0..r {
            dec.head.weight[[i, i]] = 1.0;
            dec.head.bias[[i, 0]] = -2.0 * std::f64::consts::LN_2;
        }
        dec
    }

    /// A model that is exact on the linear system `x' = a_gain x + b_gain u`
    /// (per coordinate): zero encoder, tail-reading decoder, and block
    /// dynamics confined to the raw-state rows.
    pub(crate) fn exact_linear_model(seed: u64, a_gain: f64, b_gain: f64) -> KoopmanModel {
        let mut model = random_model(seed);
        model.encoder = model.encoder.zeros_like();
        model.decoder = exact_tail_decoder(&model.dims, &model.decoder);
        let d_z = model.dims.lifted_dim();
        let d_e = model.dims.observable_dim;
        let r = model.dims.reduced_dim;
        model.a = Array2::zeros((d_z, d_z));
        for i in 0..r {
            model.a[[d_e + i, d_e + i]] = a_gain;
        }
        model.b = Array2::zeros((d_z, model.dims.input_dim));
        for i in 0..r.min(model.dims.input_dim) {
            model.b[[d_e + i, i]] = b_gain;
        }
        model
    }
}
