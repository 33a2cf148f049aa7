//! Value-level entry points for the primitive layers. Each runs the taped op
//! on a scratch graph of constants, so both APIs share one implementation.

use crate::error::{Error, Result};

use super::graph::{Graph, Var};
use super::ops::ConvGeometry;
use super::{Shape, Tensor};

/// Weights, optional bias and geometry of one convolution.
#[derive(Clone, Debug)]
pub struct LayerParams {
    pub weights: Tensor,
    pub bias: Option<Tensor>,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    /// Only used by transposed convolutions.
    pub output_padding: (usize, usize),
}

impl LayerParams {
    pub fn new(weights: Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> Self {
        LayerParams {
            weights,
            bias,
            stride: (stride, stride),
            padding: (padding, padding),
            output_padding: (0, 0),
        }
    }

    pub fn with_output_padding(mut self, output_padding: usize) -> Self {
        self.output_padding = (output_padding, output_padding);
        self
    }

    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry {
            stride: self.stride,
            padding: self.padding,
            output_padding: self.output_padding,
        }
    }

    /// Kernel size R of a square kernel.
    pub fn kernel_size(&self) -> usize {
        self.weights.shape().h
    }

    fn check_geometry(&self) -> Result<()> {
        if self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::Config("stride must be positive".into()));
        }
        Ok(())
    }
}

fn eval<F>(inputs: &[&Tensor], f: F) -> Result<Tensor>
where
    F: for<'g> FnOnce(&'g Graph, Vec<Var<'g>>) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let vars = inputs.iter().map(|t| g.constant((*t).clone())).collect();
    Ok(f(&g, vars)?.value())
}

fn bind_conv<'g>(g: &'g Graph, p: &LayerParams) -> (Var<'g>, Option<Var<'g>>) {
    (
        g.constant(p.weights.clone()),
        p.bias.as_ref().map(|b| g.constant(b.clone())),
    )
}

pub fn conv2d(input: &Tensor, params: &LayerParams) -> Result<Tensor> {
    params.check_geometry()?;
    eval(&[input], |g, v| {
        let (w, b) = bind_conv(g, params);
        v[0].conv2d(w, b, params.geometry())
    })
}

/// Transposed convolution with weights `(in, out, R, R)`: the adjoint of
/// [`conv2d`] run with the same parameters.
pub fn transposed_conv2d(input: &Tensor, params: &LayerParams) -> Result<Tensor> {
    params.check_geometry()?;
    eval(&[input], |g, v| {
        let (w, b) = bind_conv(g, params);
        v[0].transposed_conv2d(w, b, params.geometry())
    })
}

/// Depthwise `(C, 1, R, R)` convolution followed by a `(C_out, C, 1, 1)`
/// pointwise convolution.
pub fn depthwise_separable_conv(
    input: &Tensor,
    depthwise: &LayerParams,
    pointwise: &LayerParams,
) -> Result<Tensor> {
    let ps = pointwise.weights.shape();
    if ps.h != 1 || ps.w != 1 {
        return Err(Error::Config(format!(
            "pointwise kernel must be 1x1, got {}x{}",
            ps.h, ps.w
        )));
    }
    depthwise.check_geometry()?;
    eval(&[input], |g, v| {
        let (dw, db) = bind_conv(g, depthwise);
        let (pw, pb) = bind_conv(g, pointwise);
        v[0].depthwise_conv2d(dw, db, depthwise.geometry())?
            .conv2d(pw, pb, pointwise.geometry())
    })
}

pub fn global_avg_pool(input: &Tensor) -> Tensor {
    eval(&[input], |_, v| Ok(v[0].global_avg_pool())).expect("pooling cannot fail")
}

pub fn channel_softmax(input: &Tensor) -> Tensor {
    super::ops::softmax_channels(input)
}

pub fn channel_scale(input: &Tensor, filter: &Tensor) -> Result<Tensor> {
    eval(&[input, filter], |_, v| v[0].channel_scale(v[1]))
}

/// `mixer` is `(B, C_out, C_in, 1)`.
pub fn channel_mix(input: &Tensor, mixer: &Tensor) -> Result<Tensor> {
    eval(&[input, mixer], |_, v| v[0].channel_mix(v[1]))
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

pub fn concat_channels(inputs: &[Tensor]) -> Result<Tensor> {
    let refs: Vec<&Tensor> = inputs.iter().collect();
    eval(&refs, |_, v| Var::concat_channels(&v))
}

/// Per-channel affine parameters and running statistics of a batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    /// Use batch statistics (training) instead of the running ones.
    pub training: bool,
}

impl BatchNormParams {
    pub fn identity(channels: usize, training: bool) -> Self {
        BatchNormParams {
            scale: vec![1.0; channels],
            shift: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            training,
        }
    }
}

pub fn batch_norm(input: &Tensor, params: &BatchNormParams) -> Result<Tensor> {
    let cs = Shape::new(1, params.scale.len(), 1, 1);
    let gamma = Tensor::new(cs, params.scale.clone())?;
    let beta = Tensor::new(Shape::new(1, params.shift.len(), 1, 1), params.shift.clone())?;
    eval(&[input, &gamma, &beta], |_, v| {
        if params.training {
            Ok(v[0].batch_norm_train(v[1], v[2])?.0)
        } else {
            v[0].batch_norm_eval(v[1], v[2], &params.running_mean, &params.running_var)
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrimitiveKind {
    Relu,
    BatchNorm,
    ConcatChannels,
    Add,
}

impl PrimitiveKind {
    /// Applies the primitive; `bn` is required for [`PrimitiveKind::BatchNorm`].
    pub fn apply(self, inputs: &[Tensor], bn: Option<&BatchNormParams>) -> Result<Tensor> {
        let one = || {
            inputs
                .first()
                .ok_or_else(|| Error::Usage(format!("{self:?} needs an input")))
        };
        match self {
            PrimitiveKind::Relu => Ok(relu(one()?)),
            PrimitiveKind::BatchNorm => {
                let p = bn.ok_or_else(|| Error::Usage("batch_norm needs parameters".into()))?;
                batch_norm(one()?, p)
            }
            PrimitiveKind::ConcatChannels => concat_channels(inputs),
            PrimitiveKind::Add => {
                let refs: Vec<&Tensor> = inputs.iter().collect();
                eval(&refs, |_, v| Var::add_n(&v))
            }
        }
    }
}
