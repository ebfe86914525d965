use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::spec::{LayerKind, LayerShape, ModelSpec, SpecError, Stage};
use crate::nn::{ConvLayer, ConvTransposeLayer, DenseLayer};
use crate::tensor::{Real, Tape, Tensor, TensorError, Var};

fn record<T: Real>(trace: &mut Option<&mut Vec<LayerShape>>, tape: &Tape<T>, kind: LayerKind, v: Var) {
    if let Some(t) = trace {
        let output = match *tape.shape(v) {
            [_, c, h, w] => vec![h, w, c],
            ref s => s[1..].to_vec(),
        };
        t.push(LayerShape { kind, output });
    }
}

/// Bounds applied to the log-variance head before it is exponentiated.
pub const LOG_VAR_CLAMP: (f64, f64) = (-10.0, 10.0);

#[derive(Clone, Debug, PartialEq)]
pub enum ModelError {
    Spec(SpecError),
    /// No padding up to 2 per side maps `from` onto `to`.
    UnreachableShape { layer: String, from: (usize, usize), to: (usize, usize) },
    Tensor(TensorError),
    /// `eps` given to a deterministic model, or missing for the variational one.
    Eps(&'static str),
    LatentIndex { index: usize, latent_dim: usize },
    Parameter(String),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Spec(e) => write!(f, "{e}"),
            ModelError::UnreachableShape { layer, from, to } => write!(
                f,
                "layer {layer}: no padding maps {}x{} onto {}x{}",
                from.0, from.1, to.0, to.1
            ),
            ModelError::Tensor(e) => write!(f, "{e}"),
            ModelError::Eps(msg) => f.write_str(msg),
            ModelError::LatentIndex { index, latent_dim } => {
                write!(f, "latent index {index} out of range for m = {latent_dim}")
            }
            ModelError::Parameter(msg) => write!(f, "parameter error: {msg}"),
        }
    }
}

impl core::error::Error for ModelError {}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Tensor(e)
    }
}

impl From<SpecError> for ModelError {
    fn from(e: SpecError) -> Self {
        ModelError::Spec(e)
    }
}

/// Final encoder layer.
#[derive(Clone, Debug, PartialEq)]
pub enum LatentHead<T> {
    Point(DenseLayer<T>),
    Gaussian { mu: DenseLayer<T>, log_var: DenseLayer<T> },
}

/// Encoder output on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentVars {
    Point(Var),
    Gaussian { mu: Var, log_var: Var },
}

impl LatentVars {
    /// `Z` for deterministic models, `μ` for the variational one.
    pub fn mean(self) -> Var {
        match self {
            LatentVars::Point(z) => z,
            LatentVars::Gaussian { mu, .. } => mu,
        }
    }
}

/// Encoder output as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub enum LatentOut<T> {
    Point(Tensor<T>),
    Gaussian { mu: Tensor<T>, log_var: Tensor<T> },
}

impl<T> LatentOut<T> {
    pub fn mean(&self) -> &Tensor<T> {
        match self {
            LatentOut::Point(z) => z,
            LatentOut::Gaussian { mu, .. } => mu,
        }
    }

    pub fn into_mean(self) -> Tensor<T> {
        match self {
            LatentOut::Point(z) => z,
            LatentOut::Gaussian { mu, .. } => mu,
        }
    }
}

/// Parameters bound to tape leaves, in [`Model::param_names`] order.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
}

/// Result of a full forward pass on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub reconstruction: Var,
    pub latent: LatentVars,
    /// The code fed to the decoder.
    pub z: Var,
}

/// An instantiated [`ModelSpec`].
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub spec: ModelSpec,
    pub seed: u64,
    pub encoder_convs: Vec<ConvLayer<T>>,
    pub encoder_dense: Vec<DenseLayer<T>>,
    pub head: LatentHead<T>,
    pub decoder_dense: Vec<DenseLayer<T>>,
    pub decoder_convs: Vec<ConvTransposeLayer<T>>,
    pruned: BTreeSet<usize>,
}

impl<T: Real> Model<T> {
    /// Allocates and initializes every layer, solving each convolution's
    /// padding against the declared shapes.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self, ModelError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let mut encoder_convs = Vec::with_capacity(spec.encoder_convs.len());
        let mut prev = spec.input;
        for (i, st) in spec.encoder_convs.iter().enumerate() {
            let layer = ConvLayer::new(&mut rng, prev.channels, st.channels, prev.hw(), st.hw())
                .ok_or_else(|| unreachable_shape(format!("encoder.conv{i}"), prev, *st))?;
            encoder_convs.push(layer);
            prev = *st;
        }

        let mut encoder_dense = Vec::with_capacity(spec.encoder_hidden.len());
        let mut width = spec.flat_len();
        for &w in &spec.encoder_hidden {
            encoder_dense.push(DenseLayer::new(&mut rng, width, w));
            width = w;
        }
        let head = if spec.variant.is_variational() {
            LatentHead::Gaussian {
                mu: DenseLayer::new(&mut rng, width, spec.latent_dim),
                log_var: DenseLayer::new(&mut rng, width, spec.latent_dim),
            }
        } else {
            LatentHead::Point(DenseLayer::new(&mut rng, width, spec.latent_dim))
        };

        let mut decoder_dense = Vec::new();
        let mut width = spec.latent_dim;
        for w in spec.decoder_hidden() {
            decoder_dense.push(DenseLayer::new(&mut rng, width, w));
            width = w;
        }

        let mut decoder_convs = Vec::new();
        let mut prev = spec.bottleneck();
        for (i, st) in spec.decoder_convs().iter().enumerate() {
            let layer = ConvTransposeLayer::new(&mut rng, prev.channels, st.channels, prev.hw(), st.hw())
                .ok_or_else(|| unreachable_shape(format!("decoder.deconv{i}"), prev, *st))?;
            decoder_convs.push(layer);
            prev = *st;
        }

        Ok(Self {
            spec: spec.clone(),
            seed,
            encoder_convs,
            encoder_dense,
            head,
            decoder_dense,
            decoder_convs,
            pruned: BTreeSet::new(),
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    pub fn is_variational(&self) -> bool {
        self.spec.variant.is_variational()
    }

    // ---- parameters ---------------------------------------------------

    /// Parameter names in binding order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.encoder_convs.len() {
            names.push(format!("encoder.conv{i}.kernel"));
            names.push(format!("encoder.conv{i}.bias"));
        }
        for i in 0..self.encoder_dense.len() {
            names.push(format!("encoder.dense{i}.weight"));
            names.push(format!("encoder.dense{i}.bias"));
        }
        match self.head {
            LatentHead::Point(_) => {
                names.push("encoder.head.weight".into());
                names.push("encoder.head.bias".into());
            }
            LatentHead::Gaussian { .. } => {
                names.push("encoder.mu.weight".into());
                names.push("encoder.mu.bias".into());
                names.push("encoder.log_var.weight".into());
                names.push("encoder.log_var.bias".into());
            }
        }
        for i in 0..self.decoder_dense.len() {
            names.push(format!("decoder.dense{i}.weight"));
            names.push(format!("decoder.dense{i}.bias"));
        }
        for i in 0..self.decoder_convs.len() {
            names.push(format!("decoder.deconv{i}.kernel"));
            names.push(format!("decoder.deconv{i}.bias"));
        }
        names
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for l in &self.encoder_convs {
            out.extend([&l.kernel, &l.bias]);
        }
        for l in &self.encoder_dense {
            out.extend([&l.weight, &l.bias]);
        }
        match &self.head {
            LatentHead::Point(l) => out.extend([&l.weight, &l.bias]),
            LatentHead::Gaussian { mu, log_var } => out.extend([&mu.weight, &mu.bias, &log_var.weight, &log_var.bias]),
        }
        for l in &self.decoder_dense {
            out.extend([&l.weight, &l.bias]);
        }
        for l in &self.decoder_convs {
            out.extend([&l.kernel, &l.bias]);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for l in &mut self.encoder_convs {
            out.extend([&mut l.kernel, &mut l.bias]);
        }
        for l in &mut self.encoder_dense {
            out.extend([&mut l.weight, &mut l.bias]);
        }
        match &mut self.head {
            LatentHead::Point(l) => out.extend([&mut l.weight, &mut l.bias]),
            LatentHead::Gaussian { mu, log_var } => {
                out.extend([&mut mu.weight, &mut mu.bias, &mut log_var.weight, &mut log_var.bias])
            }
        }
        for l in &mut self.decoder_dense {
            out.extend([&mut l.weight, &mut l.bias]);
        }
        for l in &mut self.decoder_convs {
            out.extend([&mut l.kernel, &mut l.bias]);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Index of the first head parameter in binding order.
    fn head_offset(&self) -> usize {
        2 * (self.encoder_convs.len() + self.encoder_dense.len())
    }

    /// Records every parameter as a gradient-carrying leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        let vars = self.params().into_iter().map(|p| tape.leaf(p.clone().requiring_grad())).collect();
        Bound { vars }
    }

    /// Records every parameter as a constant, for inference.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        let vars = self.params().into_iter().map(|p| tape.constant(p.clone())).collect();
        Bound { vars }
    }

    // ---- tape passes --------------------------------------------------

    pub fn encode_on(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<LatentVars, ModelError> {
        self.encode_traced(tape, p, x, None)
    }

    fn encode_traced(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        mut trace: Option<&mut Vec<LayerShape>>,
    ) -> Result<LatentVars, ModelError> {
        let shape = tape.shape(x);
        let input = self.spec.input;
        if shape.len() != 4 || shape[1..] != [input.channels, input.height, input.width] {
            return Err(TensorError::ShapeMismatch {
                op: "encode",
                left: shape.to_vec(),
                right: vec![input.channels, input.height, input.width],
            }
            .into());
        }
        let batch = shape[0];
        let act = self.spec.activation;
        let mut k = 0;
        let mut h = x;
        record(&mut trace, tape, LayerKind::Input, h);
        for layer in &self.encoder_convs {
            h = layer.forward(tape, h, p.vars[k], p.vars[k + 1])?;
            h = act.apply(tape, h)?;
            record(&mut trace, tape, LayerKind::Conv2d { out_channels: layer.out_channels() }, h);
            k += 2;
        }
        h = tape.reshape(h, &[batch, self.spec.flat_len()])?;
        record(&mut trace, tape, LayerKind::Flatten, h);
        for layer in &self.encoder_dense {
            h = layer.forward(tape, h, p.vars[k], p.vars[k + 1])?;
            h = act.apply(tape, h)?;
            record(&mut trace, tape, LayerKind::Linear { outputs: layer.outputs() }, h);
            k += 2;
        }
        let latent = match &self.head {
            LatentHead::Point(layer) => LatentVars::Point(layer.forward(tape, h, p.vars[k], p.vars[k + 1])?),
            LatentHead::Gaussian { mu, log_var } => {
                let m = mu.forward(tape, h, p.vars[k], p.vars[k + 1])?;
                let lv = log_var.forward(tape, h, p.vars[k + 2], p.vars[k + 3])?;
                let lv = tape.clamp(lv, T::of(LOG_VAR_CLAMP.0), T::of(LOG_VAR_CLAMP.1))?;
                LatentVars::Gaussian { mu: m, log_var: lv }
            }
        };
        record(&mut trace, tape, LayerKind::Linear { outputs: self.latent_dim() }, latent.mean());
        Ok(latent)
    }

    pub fn decode_on(&self, tape: &mut Tape<T>, p: &Bound, z: Var) -> Result<Var, ModelError> {
        self.decode_traced(tape, p, z, None)
    }

    fn decode_traced(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        z: Var,
        mut trace: Option<&mut Vec<LayerShape>>,
    ) -> Result<Var, ModelError> {
        let shape = tape.shape(z);
        if shape.len() != 2 || shape[1] != self.spec.latent_dim {
            return Err(TensorError::ShapeMismatch { op: "decode", left: shape.to_vec(), right: vec![self.spec.latent_dim] }
                .into());
        }
        let batch = shape[0];
        let act = self.spec.activation;
        let mut k = self.head_offset() + if self.is_variational() { 4 } else { 2 };
        let mut h = z;
        let n_dense = self.decoder_dense.len();
        let n_conv = self.decoder_convs.len();
        for (i, layer) in self.decoder_dense.iter().enumerate() {
            h = layer.forward(tape, h, p.vars[k], p.vars[k + 1])?;
            if i + 1 < n_dense || n_conv > 0 {
                h = act.apply(tape, h)?;
            }
            record(&mut trace, tape, LayerKind::Linear { outputs: layer.outputs() }, h);
            k += 2;
        }
        let b = self.spec.bottleneck();
        h = tape.reshape(h, &[batch, b.channels, b.height, b.width])?;
        if n_conv > 0 {
            record(&mut trace, tape, LayerKind::Unflatten, h);
        }
        for (i, layer) in self.decoder_convs.iter().enumerate() {
            h = layer.forward(tape, h, p.vars[k], p.vars[k + 1])?;
            if i + 1 < n_conv {
                h = act.apply(tape, h)?;
            }
            record(&mut trace, tape, LayerKind::ConvTranspose2d { out_channels: layer.out_channels() }, h);
            k += 2;
        }
        Ok(h)
    }

    /// Encode, sample (variational model only), decode.
    pub fn forward_on(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        eps: Option<Var>,
    ) -> Result<ForwardVars, ModelError> {
        let latent = self.encode_on(tape, p, x)?;
        let z = match (latent, eps) {
            (LatentVars::Point(z), None) => z,
            (LatentVars::Point(_), Some(_)) => return Err(ModelError::Eps("eps given to a deterministic model")),
            (LatentVars::Gaussian { .. }, None) => return Err(ModelError::Eps("variational model needs eps")),
            (LatentVars::Gaussian { mu, log_var }, Some(e)) => reparameterize_on(tape, mu, log_var, e)?,
        };
        let reconstruction = self.decode_on(tape, p, z)?;
        Ok(ForwardVars { reconstruction, latent, z })
    }

    // ---- inference ----------------------------------------------------

    pub fn encode(&self, x: &Tensor<T>) -> Result<LatentOut<T>, ModelError> {
        let mut tape = Tape::new();
        let p = self.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        Ok(match self.encode_on(&mut tape, &p, xv)? {
            LatentVars::Point(z) => LatentOut::Point(tape.value(z).clone()),
            LatentVars::Gaussian { mu, log_var } => {
                LatentOut::Gaussian { mu: tape.value(mu).clone(), log_var: tape.value(log_var).clone() }
            }
        })
    }

    /// Deterministic codes (`μ` for the variational model) for `x`, encoded
    /// `chunk` samples at a time.
    pub fn encode_mean(&self, x: &Tensor<T>, chunk: usize) -> Result<Tensor<T>, ModelError> {
        Ok(self.encode_chunked(x, chunk)?.into_mean())
    }

    pub fn encode_chunked(&self, x: &Tensor<T>, chunk: usize) -> Result<LatentOut<T>, ModelError> {
        let n = x.shape().first().copied().unwrap_or(0);
        let chunk = chunk.max(1);
        if n <= chunk {
            return self.encode(x);
        }
        let m = self.latent_dim();
        let mut mean = Vec::with_capacity(n * m);
        let mut lv = Vec::new();
        for start in (0..n).step_by(chunk) {
            match self.encode(&x.slice_outer(start, (start + chunk).min(n))?)? {
                LatentOut::Point(z) => mean.extend_from_slice(z.data()),
                LatentOut::Gaussian { mu, log_var } => {
                    mean.extend_from_slice(mu.data());
                    lv.extend_from_slice(log_var.data());
                }
            }
        }
        let mean = Tensor::new(&[n, m], mean)?;
        Ok(if self.is_variational() {
            LatentOut::Gaussian { mu: mean, log_var: Tensor::new(&[n, m], lv)? }
        } else {
            LatentOut::Point(mean)
        })
    }

    pub fn decode(&self, z: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let mut tape = Tape::new();
        let p = self.bind_frozen(&mut tape);
        let zv = tape.constant(z.clone());
        let y = self.decode_on(&mut tape, &p, zv)?;
        Ok(tape.value(y).clone())
    }

    pub fn forward(&self, x: &Tensor<T>, eps: Option<&Tensor<T>>) -> Result<(Tensor<T>, LatentOut<T>), ModelError> {
        let mut tape = Tape::new();
        let p = self.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let ev = eps.map(|e| tape.constant(e.clone()));
        let out = self.forward_on(&mut tape, &p, xv, ev)?;
        let latent = match out.latent {
            LatentVars::Point(z) => LatentOut::Point(tape.value(z).clone()),
            LatentVars::Gaussian { mu, log_var } => {
                LatentOut::Gaussian { mu: tape.value(mu).clone(), log_var: tape.value(log_var).clone() }
            }
        };
        Ok((tape.value(out.reconstruction).clone(), latent))
    }

    /// Runs one zero snapshot through the network and lists the shape every
    /// layer actually produced, in the layout of [`ModelSpec::layer_shapes`].
    pub fn trace_shapes(&self) -> Result<(Vec<LayerShape>, Vec<LayerShape>), ModelError> {
        let input = self.spec.input;
        let mut tape = Tape::new();
        let p = self.bind_frozen(&mut tape);
        let x = tape.constant(Tensor::zeros(&[1, input.channels, input.height, input.width]));
        let (mut enc, mut dec) = (Vec::new(), Vec::new());
        let z = self.encode_traced(&mut tape, &p, x, Some(&mut enc))?.mean();
        self.decode_traced(&mut tape, &p, z, Some(&mut dec))?;
        Ok((enc, dec))
    }

    /// Deterministic reconstruction; the variational model decodes `μ`.
    pub fn reconstruct(&self, x: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let mut tape = Tape::new();
        let p = self.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let z = self.encode_on(&mut tape, &p, xv)?.mean();
        let y = self.decode_on(&mut tape, &p, z)?;
        Ok(tape.value(y).clone())
    }

    // ---- pruning ------------------------------------------------------

    pub fn pruned(&self) -> &BTreeSet<usize> {
        &self.pruned
    }

    /// Zeroes the final encoder rows and bias entries of `indices` (both
    /// heads for the variational model) and freezes them for the optimizer.
    pub fn prune(&mut self, indices: &[usize]) -> Result<(), ModelError> {
        let m = self.latent_dim();
        if let Some(&index) = indices.iter().find(|&&i| i >= m) {
            return Err(ModelError::LatentIndex { index, latent_dim: m });
        }
        for &i in indices {
            match &mut self.head {
                LatentHead::Point(l) => l.zero_output(i),
                LatentHead::Gaussian { mu, log_var } => {
                    mu.zero_output(i);
                    log_var.zero_output(i);
                }
            }
            self.pruned.insert(i);
        }
        Ok(())
    }

    /// Per-parameter masks of entries the optimizer must leave alone.
    pub fn frozen_masks(&self) -> Vec<Option<Vec<bool>>> {
        let params = self.params();
        let mut masks: Vec<Option<Vec<bool>>> = vec![None; params.len()];
        if self.pruned.is_empty() {
            return masks;
        }
        let heads = if self.is_variational() { 2 } else { 1 };
        let off = self.head_offset();
        for h in 0..heads {
            let (wi, bi) = (off + 2 * h, off + 2 * h + 1);
            let inputs = params[wi].shape()[1];
            let mut wmask = vec![false; params[wi].len()];
            let mut bmask = vec![false; params[bi].len()];
            for &i in &self.pruned {
                wmask[i * inputs..(i + 1) * inputs].iter_mut().for_each(|f| *f = true);
                bmask[i] = true;
            }
            masks[wi] = Some(wmask);
            masks[bi] = Some(bmask);
        }
        masks
    }

    /// Overwrites parameter values by name, then re-applies `pruned`.
    pub fn load_params(&mut self, values: &[(String, Tensor<T>)], pruned: &[usize]) -> Result<(), ModelError> {
        let names = self.param_names();
        if values.len() != names.len() {
            return Err(ModelError::Parameter(format!("expected {} tensors, got {}", names.len(), values.len())));
        }
        for (slot, (name, (vname, value))) in self.params_mut().into_iter().zip(names.iter().zip(values)) {
            if name != vname || slot.shape() != value.shape() {
                return Err(ModelError::Parameter(format!(
                    "{vname} {:?} does not match {name} {:?}",
                    value.shape(),
                    slot.shape()
                )));
            }
            slot.data_mut().copy_from_slice(value.data());
        }
        self.prune(pruned)
    }
}

fn unreachable_shape(layer: String, from: Stage, to: Stage) -> ModelError {
    ModelError::UnreachableShape { layer, from: from.hw(), to: to.hw() }
}

/// `z = μ + exp(½·logσ²) ⊙ ε` on a tape; `eps` is treated as data.
pub fn reparameterize_on<T: Real>(tape: &mut Tape<T>, mu: Var, log_var: Var, eps: Var) -> Result<Var, TensorError> {
    let half = tape.scale(log_var, T::of(0.5))?;
    let sigma = tape.exp(half)?;
    let noise = tape.mul(sigma, eps)?;
    tape.add(mu, noise)
}

/// Tensor form of [`reparameterize_on`].
pub fn reparameterize<T: Real>(mu: &Tensor<T>, log_var: &Tensor<T>, eps: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    if mu.shape() != log_var.shape() || mu.shape() != eps.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "reparameterize",
            left: mu.shape().to_vec(),
            right: if mu.shape() != log_var.shape() { log_var.shape().to_vec() } else { eps.shape().to_vec() },
        });
    }
    let mut tape = Tape::new();
    let (m, l, e) = (tape.constant(mu.clone()), tape.constant(log_var.clone()), tape.constant(eps.clone()));
    let z = reparameterize_on(&mut tape, m, l, e)?;
    Ok(tape.value(z).clone())
}
