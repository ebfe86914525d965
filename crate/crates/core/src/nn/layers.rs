use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;

use crate::tensor::kernels::{conv_out_len, conv_transpose_out_len, KERNEL};
use crate::tensor::{Padding2d, Real, Tape, Tensor, TensorError, Var};

/// Largest padding tried on any side when solving for a target shape.
const MAX_PAD: usize = 2;

/// Uniform on `[-1/√fan_in, 1/√fan_in]`.
fn uniform<T: Real, R: Rng>(rng: &mut R, n: usize, fan_in: usize) -> Vec<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect()
}

fn solve_axis(candidates: impl Iterator<Item = (usize, usize, usize)>) -> Option<(usize, usize, usize)> {
    // Prefer symmetric padding, then no output padding, then the least padding.
    candidates.min_by_key(|&(lo, hi, op)| (lo.abs_diff(hi), op, lo + hi, lo))
}

fn pads() -> impl Iterator<Item = (usize, usize)> + Clone {
    (0..=MAX_PAD).flat_map(|lo| (0..=MAX_PAD).map(move |hi| (lo, hi)))
}

/// Per-side padding that makes a stride-2 3×3 convolution map `input` onto
/// `target` exactly, or `None` when no padding up to 2 per side does.
pub fn solve_conv_padding(input: (usize, usize), target: (usize, usize)) -> Option<Padding2d> {
    let axis = |inp: usize, tgt: usize| {
        solve_axis(pads().filter(|&(lo, hi)| conv_out_len(inp, lo, hi) == Some(tgt)).map(|(lo, hi)| (lo, hi, 0)))
    };
    let (top, bottom, _) = axis(input.0, target.0)?;
    let (left, right, _) = axis(input.1, target.1)?;
    Some(Padding2d { top, bottom, left, right })
}

/// Padding and output padding for a stride-2 3×3 transposed convolution
/// from `input` onto `target`.
pub fn solve_conv_transpose_padding(
    input: (usize, usize),
    target: (usize, usize),
) -> Option<(Padding2d, (usize, usize))> {
    let axis = |inp: usize, tgt: usize| {
        solve_axis(
            pads()
                .flat_map(|(lo, hi)| [(lo, hi, 0), (lo, hi, 1)])
                .filter(|&(lo, hi, op)| conv_transpose_out_len(inp, lo, hi, op) == Some(tgt)),
        )
    };
    let (top, bottom, oph) = axis(input.0, target.0)?;
    let (left, right, opw) = axis(input.1, target.1)?;
    Some((Padding2d { top, bottom, left, right }, (oph, opw)))
}

/// Stride-2, 3×3 convolution with explicit per-side padding.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    /// `[out_ch, in_ch, 3, 3]`
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    pub padding: Padding2d,
    pub target_hw: (usize, usize),
}

impl<T: Real> ConvLayer<T> {
    /// Builds a layer mapping `in_ch × input_hw` onto `out_ch × target_hw`,
    /// or `None` if the target extent is unreachable.
    pub fn new<R: Rng>(
        rng: &mut R,
        in_ch: usize,
        out_ch: usize,
        input_hw: (usize, usize),
        target_hw: (usize, usize),
    ) -> Option<Self> {
        let padding = solve_conv_padding(input_hw, target_hw)?;
        let fan_in = in_ch * KERNEL * KERNEL;
        let kernel = Tensor::new(&[out_ch, in_ch, KERNEL, KERNEL], uniform(rng, out_ch * fan_in, fan_in)).ok()?;
        let bias = Tensor::new(&[out_ch], uniform(rng, out_ch, fan_in)).ok()?;
        Some(Self { kernel, bias, padding, target_hw })
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var, kernel: Var, bias: Var) -> Result<Var, TensorError> {
        let y = tape.conv2d(x, kernel, bias, self.padding)?;
        check_target(tape.shape(y), self.target_hw, "conv2d")?;
        Ok(y)
    }
}

/// Stride-2, 3×3 transposed convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvTransposeLayer<T> {
    /// `[in_ch, out_ch, 3, 3]`
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    pub padding: Padding2d,
    pub output_padding: (usize, usize),
    pub target_hw: (usize, usize),
}

impl<T: Real> ConvTransposeLayer<T> {
    pub fn new<R: Rng>(
        rng: &mut R,
        in_ch: usize,
        out_ch: usize,
        input_hw: (usize, usize),
        target_hw: (usize, usize),
    ) -> Option<Self> {
        let (padding, output_padding) = solve_conv_transpose_padding(input_hw, target_hw)?;
        let fan_in = in_ch * KERNEL * KERNEL;
        let n = in_ch * out_ch * KERNEL * KERNEL;
        let kernel = Tensor::new(&[in_ch, out_ch, KERNEL, KERNEL], uniform(rng, n, fan_in)).ok()?;
        let bias = Tensor::new(&[out_ch], uniform(rng, out_ch, fan_in)).ok()?;
        Some(Self { kernel, bias, padding, output_padding, target_hw })
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var, kernel: Var, bias: Var) -> Result<Var, TensorError> {
        let y = tape.conv_transpose2d(x, kernel, bias, self.padding, self.output_padding)?;
        check_target(tape.shape(y), self.target_hw, "conv_transpose2d")?;
        Ok(y)
    }
}

fn check_target(shape: &[usize], target: (usize, usize), op: &'static str) -> Result<(), TensorError> {
    if (shape[2], shape[3]) != target {
        return Err(TensorError::ShapeMismatch {
            op,
            left: shape.to_vec(),
            right: alloc::vec![target.0, target.1],
        });
    }
    Ok(())
}

/// Fully connected layer `y = x·Wᵀ + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer<T> {
    /// `[out, in]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> DenseLayer<T> {
    pub fn new<R: Rng>(rng: &mut R, inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Tensor::new(&[outputs, inputs], uniform(rng, outputs * inputs, inputs)).expect("sized above"),
            bias: Tensor::new(&[outputs], uniform(rng, outputs, inputs)).expect("sized above"),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var, weight: Var, bias: Var) -> Result<Var, TensorError> {
        tape.linear(x, weight, bias)
    }

    /// Zeroes output row `i` of the weight and bias entry `i`.
    pub fn zero_output(&mut self, i: usize) {
        let inputs = self.inputs();
        self.weight.data_mut()[i * inputs..(i + 1) * inputs].iter_mut().for_each(|v| *v = T::zero());
        self.bias.data_mut()[i] = T::zero();
    }
}
