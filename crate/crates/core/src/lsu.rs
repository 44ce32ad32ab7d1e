//! Linear Span Unit: concatenate `m` input maps, take per-pixel linear
//! combinations with a 1x1 convolution, and slice the result into outputs.
//!
//! Output `i` at pixel `j` is `sum_k lambda[i, k] * c[k, j] + bias[i]`. The unit
//! is strictly linear; nonlinearities belong to the loss head.

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::span;
use crate::tensor::{kernels, Graph, NodeId, ParamSet, Tensor};

pub fn lambda_name(id: &str) -> String {
    format!("lsu.{id}.lambda")
}

pub fn bias_name(id: &str) -> String {
    format!("lsu.{id}.bias")
}

#[derive(Debug, Clone, PartialEq)]
pub struct LsuParams<T> {
    /// Reconstruction weights `[n, C_total, 1, 1]`.
    pub lambda: Tensor<T>,
    /// `[n, 1, 1, 1]`.
    pub bias: Tensor<T>,
    pub input_sizes: Vec<usize>,
    pub output_sizes: Vec<usize>,
}

impl<T: Scalar> LsuParams<T> {
    pub fn new(lambda: Tensor<T>, bias: Tensor<T>, input_sizes: Vec<usize>, output_sizes: Vec<usize>) -> Result<Self> {
        let total: usize = input_sizes.iter().sum();
        let n: usize = output_sizes.iter().sum();
        if input_sizes.is_empty() || input_sizes.contains(&0) || output_sizes.is_empty() || output_sizes.contains(&0) {
            return Err(Error::invalid("lsu", "input and output sizes must be non-empty and positive"));
        }
        if lambda.dims() != [n, total, 1, 1] {
            return Err(Error::ShapeMismatch {
                op: "lsu lambda",
                left: [n, total, 1, 1],
                right: lambda.dims(),
            });
        }
        if bias.dims() != [n, 1, 1, 1] {
            return Err(Error::ShapeMismatch {
                op: "lsu bias",
                left: [n, 1, 1, 1],
                right: bias.dims(),
            });
        }
        Ok(LsuParams {
            lambda,
            bias,
            input_sizes,
            output_sizes,
        })
    }

    /// Uniform weights in `[-1/C, 1/C)` and zero bias.
    pub fn init(input_sizes: Vec<usize>, output_sizes: Vec<usize>, rng: &mut impl Rng) -> Result<Self> {
        let total: usize = input_sizes.iter().sum();
        let n: usize = output_sizes.iter().sum();
        let scale = 1.0 / total.max(1) as f64;
        let lambda = Tensor::from_fn([n, total, 1, 1], |_, _, _, _| {
            T::from_f64_lossy(rng.gen_range(-scale..scale))
        });
        Self::new(lambda, Tensor::zeros([n, 1, 1, 1]), input_sizes, output_sizes)
    }

    pub fn input_channels(&self) -> usize {
        self.lambda.channels()
    }

    pub fn output_channels(&self) -> usize {
        self.lambda.batch()
    }

    pub fn insert_into(&self, params: &mut ParamSet<T>, id: &str) {
        params.insert(lambda_name(id), self.lambda.clone());
        params.insert(bias_name(id), self.bias.clone());
    }

    pub fn from_params(params: &ParamSet<T>, id: &str, input_sizes: Vec<usize>, output_sizes: Vec<usize>) -> Result<Self> {
        Self::new(
            params.require(&lambda_name(id))?.clone(),
            params.require(&bias_name(id))?.clone(),
            input_sizes,
            output_sizes,
        )
    }

    /// Weights as an `n x C_total` matrix.
    pub fn weight_matrix(&self) -> DMatrix<f64> {
        let (n, c) = (self.output_channels(), self.input_channels());
        DMatrix::from_fn(n, c, |i, k| self.lambda.data()[i * c + k].as_f64())
    }
}

fn check_inputs(dims: &[[usize; 4]], input_sizes: &[usize]) -> Result<()> {
    if dims.len() != input_sizes.len() {
        return Err(Error::invalid(
            "lsu",
            format!("expected {} inputs, got {}", input_sizes.len(), dims.len()),
        ));
    }
    let first = dims[0];
    for (i, (d, &size)) in dims.iter().zip(input_sizes).enumerate() {
        if d[1] != size {
            return Err(Error::invalid(
                "lsu",
                format!("input {i} has {} channels, expected {size}", d[1]),
            ));
        }
        if (d[0], d[2], d[3]) != (first[0], first[2], first[3]) {
            return Err(Error::invalid(
                "lsu",
                format!(
                    "input {i} has batch/spatial dims {:?}, input 0 has {:?}; align resolutions first",
                    [d[0], d[2], d[3]],
                    [first[0], first[2], first[3]]
                ),
            ));
        }
    }
    Ok(())
}

/// Evaluates the unit directly on tensors.
pub fn lsu_forward<T: Scalar>(inputs: &[&Tensor<T>], params: &LsuParams<T>) -> Result<Vec<Tensor<T>>> {
    if inputs.is_empty() {
        return Err(Error::invalid("lsu", "needs at least one input"));
    }
    let dims: Vec<_> = inputs.iter().map(|t| t.dims()).collect();
    check_inputs(&dims, &params.input_sizes)?;
    let c = kernels::concat(inputs)?;
    let s = kernels::conv2d(&c, &params.lambda, &params.bias, 1, 0)?;
    kernels::slice(&s, &params.output_sizes)
}

/// Records the unit `lsu.<id>` in a graph.
pub fn lsu_node<T: Scalar>(graph: &mut Graph<T>, id: &str, inputs: &[NodeId], output_sizes: &[usize]) -> Result<Vec<NodeId>> {
    if inputs.is_empty() {
        return Err(Error::invalid("lsu", "needs at least one input"));
    }
    let dims: Vec<_> = inputs.iter().map(|&i| graph.value(i).dims()).collect();
    let sizes: Vec<_> = dims.iter().map(|d| d[1]).collect();
    check_inputs(&dims, &sizes)?;
    let lambda = graph.param(&lambda_name(id))?;
    let bias = graph.param(&bias_name(id))?;
    let c = graph.concat(inputs)?;
    let s = graph.conv2d(c, lambda, bias, 1, 0)?;
    graph.slice(s, output_sizes)
}

/// Dimension of the space of channel combinations the unit can realise: the
/// numerical rank of its weight matrix.
pub fn lsu_span_dim<T: Scalar>(params: &LsuParams<T>, tol: f64) -> usize {
    span::matrix_rank(&params.weight_matrix(), tol)
}
