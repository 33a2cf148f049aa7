//! Differentiable operations on [`Var`]. Each op computes its forward value
//! eagerly and records a backward rule on the owning graph.

use std::sync::Arc;

use crate::error::{dim_err, Error, Result};

use super::graph::Var;
use super::kernels::{self, Plane};
use super::{Shape, Tensor};

pub(crate) const BN_EPS: f64 = 1e-5;

/// Stride, zero padding and (for transposed convolutions) extra output
/// padding, per axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct ConvGeometry {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub output_padding: (usize, usize),
}

impl ConvGeometry {
    pub const fn new(stride: usize, padding: usize) -> Self {
        ConvGeometry {
            stride: (stride, stride),
            padding: (padding, padding),
            output_padding: (0, 0),
        }
    }

    /// Stride 1 with `kernel / 2` padding: preserves spatial size for odd kernels.
    pub const fn same(kernel: usize) -> Self {
        ConvGeometry::new(1, kernel / 2)
    }

    /// Stride 2 halving of even-sized maps.
    pub const fn down(kernel: usize) -> Self {
        ConvGeometry::new(2, kernel / 2)
    }

    /// Transposed counterpart of [`ConvGeometry::down`]: exactly doubles.
    pub const fn up(kernel: usize) -> Self {
        ConvGeometry {
            stride: (2, 2),
            padding: (kernel / 2, kernel / 2),
            output_padding: (1, 1),
        }
    }
}

/// Per-channel batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

fn same_shape(op: &'static str, a: Shape, b: Shape) -> Result<()> {
    if a != b {
        return Err(dim_err(op, format!("shapes {a} and {b} differ")));
    }
    Ok(())
}

fn check_bias(op: &'static str, bias: Option<&Tensor>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.numel() != channels {
            return Err(dim_err(
                op,
                format!("bias has {} entries for {channels} output channels", b.numel()),
            ));
        }
    }
    Ok(())
}

fn add_bias(y: &mut [f64], bias: Option<&Tensor>, n: usize, c: usize, plane: usize) {
    if let Some(b) = bias {
        for i in 0..n {
            for (ch, &bv) in b.data().iter().enumerate().take(c) {
                let off = (i * c + ch) * plane;
                y[off..off + plane].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
}

fn bias_grad(dy: &Tensor, c: usize) -> Tensor {
    let s = dy.shape();
    let mut g = vec![0.0; c];
    for n in 0..s.n {
        for (ch, gv) in g.iter_mut().enumerate() {
            let off = (n * s.c + ch) * s.plane();
            *gv += dy.data()[off..off + s.plane()].iter().sum::<f64>();
        }
    }
    Tensor::from_parts(Shape::new(1, c, 1, 1), g)
}

// ---------------------------------------------------------------------------
// plain-tensor forward kernels
// ---------------------------------------------------------------------------

pub(crate) fn conv2d_value(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    g: &ConvGeometry,
) -> Result<Tensor> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.c != ws.c {
        return Err(dim_err(
            "conv2d",
            format!("input channels (axis 1 of {xs}) = {} but weight in_channels (axis 1 of {ws}) = {}", xs.c, ws.c),
        ));
    }
    check_bias("conv2d", bias, ws.n)?;
    let ho = kernels::conv_out_dim(xs.h, ws.h, g.stride.0, g.padding.0);
    let wo = kernels::conv_out_dim(xs.w, ws.w, g.stride.1, g.padding.1);
    let (Some(ho), Some(wo)) = (ho, wo) else {
        return Err(dim_err(
            "conv2d",
            format!("kernel {}x{} does not fit padded input {}x{} (height/width axes)", ws.h, ws.w, xs.h, xs.w),
        ));
    };
    let out_shape = Shape::new(xs.n, ws.n, ho, wo);
    let mut y = vec![0.0; out_shape.numel()];
    let src = Plane { c: xs.c, h: xs.h, w: xs.w };
    let per_in = xs.c * xs.plane();
    let per_out = ws.n * ho * wo;
    let mut scratch = Vec::new();
    for n in 0..xs.n {
        kernels::conv_forward_item(
            &x.data()[n * per_in..(n + 1) * per_in],
            &src,
            w.data(),
            ws.n,
            (ws.h, ws.w),
            g,
            (ho, wo),
            &mut y[n * per_out..(n + 1) * per_out],
            &mut scratch,
        );
    }
    add_bias(&mut y, bias, xs.n, ws.n, ho * wo);
    Ok(Tensor::from_parts(out_shape, y))
}

/// Transposed convolution; `w` is `(in_channels, out_channels, R, R)`, i.e.
/// the weights of the forward convolution it is the adjoint of.
pub(crate) fn transposed_conv2d_value(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    g: &ConvGeometry,
) -> Result<Tensor> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.c != ws.n {
        return Err(dim_err(
            "transposed_conv2d",
            format!("input channels (axis 1 of {xs}) = {} but weight axis 0 of {ws} = {}", xs.c, ws.n),
        ));
    }
    if g.output_padding.0 >= g.stride.0.max(1) || g.output_padding.1 >= g.stride.1.max(1) {
        return Err(Error::Config("output padding must be smaller than the stride".into()));
    }
    check_bias("transposed_conv2d", bias, ws.c)?;
    let ho = kernels::transposed_out_dim(xs.h, ws.h, g.stride.0, g.padding.0, g.output_padding.0);
    let wo = kernels::transposed_out_dim(xs.w, ws.w, g.stride.1, g.padding.1, g.output_padding.1);
    let (Some(ho), Some(wo)) = (ho, wo) else {
        return Err(dim_err("transposed_conv2d", "padding consumes the whole output (height/width axes)"));
    };
    let out_shape = Shape::new(xs.n, ws.c, ho, wo);
    let mut y = vec![0.0; out_shape.numel()];
    let dst = Plane { c: ws.c, h: ho, w: wo };
    let per_in = xs.c * xs.plane();
    let per_out = ws.c * ho * wo;
    let mut scratch = Vec::new();
    for n in 0..xs.n {
        kernels::conv_input_adjoint_item(
            &x.data()[n * per_in..(n + 1) * per_in],
            w.data(),
            ws.n,
            &dst,
            (ws.h, ws.w),
            g,
            (xs.h, xs.w),
            &mut y[n * per_out..(n + 1) * per_out],
            &mut scratch,
        );
    }
    add_bias(&mut y, bias, xs.n, ws.c, ho * wo);
    Ok(Tensor::from_parts(out_shape, y))
}

pub(crate) fn depthwise_value(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    g: &ConvGeometry,
) -> Result<Tensor> {
    let xs = x.shape();
    let ws = w.shape();
    if ws.n != xs.c || ws.c != 1 {
        return Err(dim_err(
            "depthwise_conv2d",
            format!("weights {ws} must be (C, 1, R, R) with C = {} (axis 1 of input)", xs.c),
        ));
    }
    check_bias("depthwise_conv2d", bias, xs.c)?;
    let ho = kernels::conv_out_dim(xs.h, ws.h, g.stride.0, g.padding.0);
    let wo = kernels::conv_out_dim(xs.w, ws.w, g.stride.1, g.padding.1);
    let (Some(ho), Some(wo)) = (ho, wo) else {
        return Err(dim_err("depthwise_conv2d", "kernel does not fit padded input (height/width axes)"));
    };
    let out_shape = Shape::new(xs.n, xs.c, ho, wo);
    let mut y = vec![0.0; out_shape.numel()];
    let kk = ws.h * ws.w;
    for n in 0..xs.n {
        for c in 0..xs.c {
            let xi = (n * xs.c + c) * xs.plane();
            let yi = (n * xs.c + c) * ho * wo;
            kernels::depthwise_plane(
                &x.data()[xi..xi + xs.plane()],
                xs.h,
                xs.w,
                &w.data()[c * kk..(c + 1) * kk],
                (ws.h, ws.w),
                g,
                (ho, wo),
                &mut y[yi..yi + ho * wo],
            );
        }
    }
    add_bias(&mut y, bias, xs.n, xs.c, ho * wo);
    Ok(Tensor::from_parts(out_shape, y))
}

fn conv2d_grads(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    g: &ConvGeometry,
) -> (Tensor, Tensor) {
    let xs = x.shape();
    let ws = w.shape();
    let ds = dy.shape();
    let src = Plane { c: xs.c, h: xs.h, w: xs.w };
    let mut dx = vec![0.0; xs.numel()];
    let mut dw = vec![0.0; ws.numel()];
    let per_in = xs.c * xs.plane();
    let per_out = ds.c * ds.plane();
    let mut scratch = Vec::new();
    for n in 0..xs.n {
        let dyn_ = &dy.data()[n * per_out..(n + 1) * per_out];
        kernels::conv_weight_grad_item(
            &x.data()[n * per_in..(n + 1) * per_in],
            &src,
            dyn_,
            ws.n,
            (ws.h, ws.w),
            g,
            (ds.h, ds.w),
            &mut dw,
            &mut scratch,
        );
        kernels::conv_input_adjoint_item(
            dyn_,
            w.data(),
            ws.n,
            &src,
            (ws.h, ws.w),
            g,
            (ds.h, ds.w),
            &mut dx[n * per_in..(n + 1) * per_in],
            &mut scratch,
        );
    }
    (Tensor::from_parts(xs, dx), Tensor::from_parts(ws, dw))
}

impl<'g> Var<'g> {
    pub(crate) fn check_graph(&self, other: &Var<'g>) -> Result<()> {
        if !std::ptr::eq(self.graph, other.graph) {
            return Err(Error::Usage("operands belong to different tapes".into()));
        }
        Ok(())
    }

    // -----------------------------------------------------------------------
    // convolutions
    // -----------------------------------------------------------------------

    /// Cross-correlation with weights `(out, in, R, R)` and optional bias
    /// `(1, out, 1, 1)`, zero padded.
    pub fn conv2d(self, w: Var<'g>, bias: Option<Var<'g>>, g: ConvGeometry) -> Result<Var<'g>> {
        self.check_graph(&w)?;
        let x = self.value();
        let wt = w.value();
        let bt = bias.map(|b| b.value());
        let y = conv2d_value(&x, &wt, bt.as_ref(), &g)?;
        let has_bias = bias.is_some();
        let mut inputs = vec![self, w];
        inputs.extend(bias);
        Ok(self.graph.record(
            "conv2d",
            y,
            &inputs,
            Box::new(move |dy| {
                let (dx, dw) = conv2d_grads(&x, &wt, dy, &g);
                let mut out = vec![Some(dx), Some(dw)];
                if has_bias {
                    out.push(Some(bias_grad(dy, wt.shape().n)));
                }
                out
            }),
        ))
    }

    /// Transposed convolution; weights `(in, out, R, R)`.
    pub fn transposed_conv2d(
        self,
        w: Var<'g>,
        bias: Option<Var<'g>>,
        g: ConvGeometry,
    ) -> Result<Var<'g>> {
        self.check_graph(&w)?;
        let x = self.value();
        let wt = w.value();
        let bt = bias.map(|b| b.value());
        let y = transposed_conv2d_value(&x, &wt, bt.as_ref(), &g)?;
        let has_bias = bias.is_some();
        let mut inputs = vec![self, w];
        inputs.extend(bias);
        Ok(self.graph.record(
            "transposed_conv2d",
            y,
            &inputs,
            Box::new(move |dy| {
                // the forward op is the input-adjoint of conv2d(dy-space -> x-space),
                // so its gradients are conv2d of dy and the swapped weight gradient.
                let dx = conv2d_value(dy, &wt, None, &g).expect("shapes validated in forward");
                let (_, dw) = conv2d_grads(dy, &wt, &x, &g);
                let mut out = vec![Some(dx), Some(dw)];
                if has_bias {
                    out.push(Some(bias_grad(dy, wt.shape().c)));
                }
                out
            }),
        ))
    }

    /// Per-channel convolution; weights `(C, 1, R, R)`.
    pub fn depthwise_conv2d(
        self,
        w: Var<'g>,
        bias: Option<Var<'g>>,
        g: ConvGeometry,
    ) -> Result<Var<'g>> {
        self.check_graph(&w)?;
        let x = self.value();
        let wt = w.value();
        let bt = bias.map(|b| b.value());
        let y = depthwise_value(&x, &wt, bt.as_ref(), &g)?;
        let has_bias = bias.is_some();
        let mut inputs = vec![self, w];
        inputs.extend(bias);
        Ok(self.graph.record(
            "depthwise_conv2d",
            y,
            &inputs,
            Box::new(move |dy| {
                let xs = x.shape();
                let ws = wt.shape();
                let ds = dy.shape();
                let kk = ws.h * ws.w;
                let mut dx = vec![0.0; xs.numel()];
                let mut dw = vec![0.0; ws.numel()];
                for n in 0..xs.n {
                    for c in 0..xs.c {
                        let xi = (n * xs.c + c) * xs.plane();
                        let yi = (n * xs.c + c) * ds.plane();
                        kernels::depthwise_plane_backward(
                            &x.data()[xi..xi + xs.plane()],
                            xs.h,
                            xs.w,
                            &wt.data()[c * kk..(c + 1) * kk],
                            (ws.h, ws.w),
                            &g,
                            (ds.h, ds.w),
                            &dy.data()[yi..yi + ds.plane()],
                            &mut dx[xi..xi + xs.plane()],
                            &mut dw[c * kk..(c + 1) * kk],
                        );
                    }
                }
                let mut out = vec![
                    Some(Tensor::from_parts(xs, dx)),
                    Some(Tensor::from_parts(ws, dw)),
                ];
                if has_bias {
                    out.push(Some(bias_grad(dy, xs.c)));
                }
                out
            }),
        ))
    }

    // -----------------------------------------------------------------------
    // elementwise
    // -----------------------------------------------------------------------

    pub fn relu(self) -> Var<'g> {
        let x = self.value();
        self.graph.note_kinks(x.data().iter().map(|&v| v > 0.0));
        let y = x.map(|v| v.max(0.0));
        self.graph.record(
            "relu",
            y,
            &[self],
            Box::new(move |dy| {
                vec![Some(
                    dy.zip_map(&x, |g, v| if v > 0.0 { g } else { 0.0 })
                        .expect("same shape"),
                )]
            }),
        )
    }

    pub fn sigmoid(self) -> Var<'g> {
        let y = self.value().map(|v| 1.0 / (1.0 + (-v).exp()));
        let yc = y.clone();
        self.graph.record(
            "sigmoid",
            y,
            &[self],
            Box::new(move |dy| vec![Some(dy.zip_map(&yc, |g, s| g * s * (1.0 - s)).expect("same shape"))]),
        )
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.check_graph(&other)?;
        same_shape("add", self.shape(), other.shape())?;
        let y = self.value().zip_map(&other.value(), |a, b| a + b)?;
        Ok(self.graph.record(
            "add",
            y,
            &[self, other],
            Box::new(|dy| vec![Some(dy.clone()), Some(dy.clone())]),
        ))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.check_graph(&other)?;
        same_shape("sub", self.shape(), other.shape())?;
        let y = self.value().zip_map(&other.value(), |a, b| a - b)?;
        Ok(self.graph.record(
            "sub",
            y,
            &[self, other],
            Box::new(|dy| vec![Some(dy.clone()), Some(dy.map(|v| -v))]),
        ))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.check_graph(&other)?;
        same_shape("mul", self.shape(), other.shape())?;
        let a = self.value();
        let b = other.value();
        let y = a.zip_map(&b, |x, y| x * y)?;
        Ok(self.graph.record(
            "mul",
            y,
            &[self, other],
            Box::new(move |dy| {
                vec![
                    Some(dy.zip_map(&b, |g, v| g * v).expect("same shape")),
                    Some(dy.zip_map(&a, |g, v| g * v).expect("same shape")),
                ]
            }),
        ))
    }

    pub fn scale(self, factor: f64) -> Var<'g> {
        let y = self.value().map(|v| v * factor);
        self.graph.record(
            "scale",
            y,
            &[self],
            Box::new(move |dy| vec![Some(dy.map(|v| v * factor))]),
        )
    }

    pub fn add_scalar(self, offset: f64) -> Var<'g> {
        let y = self.value().map(|v| v + offset);
        self.graph
            .record("add_scalar", y, &[self], Box::new(|dy| vec![Some(dy.clone())]))
    }

    /// Sum of equally shaped tensors, recorded as a single node.
    pub fn add_n(terms: &[Var<'g>]) -> Result<Var<'g>> {
        let first = *terms
            .first()
            .ok_or_else(|| Error::Usage("add_n of an empty list".into()))?;
        let shape = first.shape();
        let mut acc = vec![0.0; shape.numel()];
        for t in terms {
            first.check_graph(t)?;
            same_shape("add_n", shape, t.shape())?;
            acc.iter_mut().zip(t.value().data()).for_each(|(a, b)| *a += b);
        }
        let k = terms.len();
        Ok(first.graph.record(
            "add_n",
            Tensor::from_parts(shape, acc),
            terms,
            Box::new(move |dy| vec![Some(dy.clone()); k]),
        ))
    }

    /// Sum of all entries as a 1×1×1×1 tensor.
    pub fn sum(self) -> Var<'g> {
        let shape = self.shape();
        let y = Tensor::scalar(self.value().sum());
        self.graph.record(
            "sum",
            y,
            &[self],
            Box::new(move |dy| vec![Some(Tensor::full(shape, dy.data()[0]))]),
        )
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.shape().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn reshape(self, shape: Shape) -> Result<Var<'g>> {
        let old = self.shape();
        let y = self.value().reshape(shape)?;
        Ok(self.graph.record(
            "reshape",
            y,
            &[self],
            Box::new(move |dy| vec![Some(dy.reshape(old).expect("same numel"))]),
        ))
    }

    /// Stacks along the channel axis; all inputs share batch and spatial dims.
    pub fn concat_channels(parts: &[Var<'g>]) -> Result<Var<'g>> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Usage("concat of an empty list".into()))?;
        let s0 = first.shape();
        let mut channels = Vec::with_capacity(parts.len());
        for p in parts {
            first.check_graph(p)?;
            let s = p.shape();
            if (s.n, s.h, s.w) != (s0.n, s0.h, s0.w) {
                return Err(dim_err(
                    "concat_channels",
                    format!("batch/height/width of {s} differ from {s0}"),
                ));
            }
            channels.push(s.c);
        }
        let total: usize = channels.iter().sum();
        let out_shape = Shape::new(s0.n, total, s0.h, s0.w);
        let plane = s0.plane();
        let mut y = Vec::with_capacity(out_shape.numel());
        let values: Vec<Tensor> = parts.iter().map(|p| p.value()).collect();
        for n in 0..s0.n {
            for (v, &c) in values.iter().zip(&channels) {
                y.extend_from_slice(&v.data()[n * c * plane..(n + 1) * c * plane]);
            }
        }
        Ok(first.graph.record(
            "concat_channels",
            Tensor::from_parts(out_shape, y),
            parts,
            Box::new(move |dy| {
                let mut grads: Vec<Vec<f64>> = channels
                    .iter()
                    .map(|&c| Vec::with_capacity(s0.n * c * plane))
                    .collect();
                let mut off = 0;
                for _ in 0..s0.n {
                    for (gbuf, &c) in grads.iter_mut().zip(&channels) {
                        gbuf.extend_from_slice(&dy.data()[off..off + c * plane]);
                        off += c * plane;
                    }
                }
                grads
                    .into_iter()
                    .zip(&channels)
                    .map(|(g, &c)| Some(Tensor::from_parts(Shape::new(s0.n, c, s0.h, s0.w), g)))
                    .collect()
            }),
        ))
    }

    // -----------------------------------------------------------------------
    // pooling, attention-style channel ops
    // -----------------------------------------------------------------------

    pub fn global_avg_pool(self) -> Var<'g> {
        let s = self.shape();
        let x = self.value();
        let plane = s.plane();
        let y: Vec<f64> = x
            .data()
            .chunks(plane)
            .map(|c| c.iter().sum::<f64>() / plane as f64)
            .collect();
        self.graph.record(
            "global_avg_pool",
            Tensor::from_parts(Shape::new(s.n, s.c, 1, 1), y),
            &[self],
            Box::new(move |dy| {
                let mut dx = Vec::with_capacity(s.numel());
                for &g in dy.data() {
                    dx.extend(std::iter::repeat_n(g / plane as f64, plane));
                }
                vec![Some(Tensor::from_parts(s, dx))]
            }),
        )
    }

    /// Softmax across channels at every (batch, pixel).
    pub fn channel_softmax(self) -> Var<'g> {
        let s = self.shape();
        let y = softmax_channels(&self.value());
        let out = y.clone();
        self.graph.record(
            "channel_softmax",
            y,
            &[self],
            Box::new(move |dy| {
                let plane = s.plane();
                let mut dx = vec![0.0; s.numel()];
                for n in 0..s.n {
                    for p in 0..plane {
                        let idx = |c: usize| (n * s.c + c) * plane + p;
                        let dot: f64 = (0..s.c).map(|c| out.data()[idx(c)] * dy.data()[idx(c)]).sum();
                        for c in 0..s.c {
                            dx[idx(c)] = out.data()[idx(c)] * (dy.data()[idx(c)] - dot);
                        }
                    }
                }
                vec![Some(Tensor::from_parts(s, dx))]
            }),
        )
    }

    /// `out(b,c,h,w) = x(b,c,h,w) · filter(b,c)`. The filter is expanded to a
    /// per-pixel field before the product; that field is logged as a kernel
    /// allocation.
    pub fn channel_scale(self, filter: Var<'g>) -> Result<Var<'g>> {
        self.check_graph(&filter)?;
        let s = self.shape();
        let fs = filter.shape();
        if fs != Shape::new(s.n, s.c, 1, 1) {
            return Err(dim_err(
                "channel_scale",
                format!("filter {fs} must be (batch, channels, 1, 1) for input {s}"),
            ));
        }
        let x = self.value();
        let f = filter.value();
        let plane = s.plane();
        let field: Vec<f64> = f
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, plane))
            .collect();
        self.graph.log_kernel("channel_scale", field.len());
        let y: Vec<f64> = x.data().iter().zip(&field).map(|(a, b)| a * b).collect();
        Ok(self.graph.record(
            "channel_scale",
            Tensor::from_parts(s, y),
            &[self, filter],
            Box::new(move |dy| {
                let dx: Vec<f64> = dy
                    .data()
                    .chunks(plane)
                    .zip(f.data())
                    .flat_map(|(row, &fv)| row.iter().map(move |g| g * fv))
                    .collect();
                let df: Vec<f64> = dy
                    .data()
                    .chunks(plane)
                    .zip(x.data().chunks(plane))
                    .map(|(g, xv)| g.iter().zip(xv).map(|(a, b)| a * b).sum())
                    .collect();
                vec![
                    Some(Tensor::from_parts(s, dx)),
                    Some(Tensor::from_parts(fs, df)),
                ]
            }),
        ))
    }

    /// Per-sample channel mixing: `out(b,j) = Σ_i mixer(b,j,i) · x(b,i)`,
    /// with `mixer` shaped `(B, C_out, C_in, 1)`.
    pub fn channel_mix(self, mixer: Var<'g>) -> Result<Var<'g>> {
        self.check_graph(&mixer)?;
        let s = self.shape();
        let ms = mixer.shape();
        if ms.n != s.n || ms.h != s.c || ms.w != 1 {
            return Err(dim_err(
                "channel_mix",
                format!("mixer {ms} must be (batch={}, C_out, C_in={}, 1)", s.n, s.c),
            ));
        }
        let x = self.value();
        let m = mixer.value();
        self.graph.log_kernel("channel_mix", m.numel());
        let (co, ci, plane) = (ms.c, s.c, s.plane());
        let out_shape = Shape::new(s.n, co, s.h, s.w);
        let mut y = vec![0.0; out_shape.numel()];
        for n in 0..s.n {
            kernels::gemm(
                co,
                ci,
                plane,
                &m.data()[n * co * ci..(n + 1) * co * ci],
                false,
                &x.data()[n * ci * plane..(n + 1) * ci * plane],
                false,
                0.0,
                &mut y[n * co * plane..(n + 1) * co * plane],
            );
        }
        Ok(self.graph.record(
            "channel_mix",
            Tensor::from_parts(out_shape, y),
            &[self, mixer],
            Box::new(move |dy| {
                let mut dx = vec![0.0; s.numel()];
                let mut dm = vec![0.0; ms.numel()];
                for n in 0..s.n {
                    let dyn_ = &dy.data()[n * co * plane..(n + 1) * co * plane];
                    kernels::gemm(
                        ci,
                        co,
                        plane,
                        &m.data()[n * co * ci..(n + 1) * co * ci],
                        true,
                        dyn_,
                        false,
                        0.0,
                        &mut dx[n * ci * plane..(n + 1) * ci * plane],
                    );
                    kernels::gemm(
                        co,
                        plane,
                        ci,
                        dyn_,
                        false,
                        &x.data()[n * ci * plane..(n + 1) * ci * plane],
                        true,
                        0.0,
                        &mut dm[n * co * ci..(n + 1) * co * ci],
                    );
                }
                vec![
                    Some(Tensor::from_parts(s, dx)),
                    Some(Tensor::from_parts(ms, dm)),
                ]
            }),
        ))
    }

    /// `Σ_r alpha(b, r) · steps[r]`, with `alpha` shaped `(B, k, 1, 1)`.
    pub fn weighted_sum(steps: &[Var<'g>], alpha: Var<'g>) -> Result<Var<'g>> {
        let first = *steps
            .first()
            .ok_or_else(|| Error::Usage("weighted_sum of an empty list".into()))?;
        let s = first.shape();
        let k = steps.len();
        if alpha.shape() != Shape::new(s.n, k, 1, 1) {
            return Err(dim_err(
                "weighted_sum",
                format!("weights {} must be (batch={}, k={k}, 1, 1)", alpha.shape(), s.n),
            ));
        }
        let values: Vec<Tensor> = steps.iter().map(|v| v.value()).collect();
        for (v, st) in values.iter().zip(steps) {
            first.check_graph(st)?;
            same_shape("weighted_sum", s, v.shape())?;
        }
        let a = alpha.value();
        let per = s.c * s.plane();
        let mut y = vec![0.0; s.numel()];
        for n in 0..s.n {
            for (r, v) in values.iter().enumerate() {
                let w = a.data()[n * k + r];
                y[n * per..(n + 1) * per]
                    .iter_mut()
                    .zip(&v.data()[n * per..(n + 1) * per])
                    .for_each(|(o, x)| *o += w * x);
            }
        }
        let mut inputs = steps.to_vec();
        inputs.push(alpha);
        Ok(first.graph.record(
            "weighted_sum",
            Tensor::from_parts(s, y),
            &inputs,
            Box::new(move |dy| {
                let mut out = Vec::with_capacity(k + 1);
                let mut da = vec![0.0; s.n * k];
                for (r, v) in values.iter().enumerate() {
                    let mut dv = vec![0.0; s.numel()];
                    for n in 0..s.n {
                        let w = a.data()[n * k + r];
                        let gy = &dy.data()[n * per..(n + 1) * per];
                        let xv = &v.data()[n * per..(n + 1) * per];
                        dv[n * per..(n + 1) * per]
                            .iter_mut()
                            .zip(gy)
                            .for_each(|(d, g)| *d = w * g);
                        da[n * k + r] = gy.iter().zip(xv).map(|(g, x)| g * x).sum();
                    }
                    out.push(Some(Tensor::from_parts(s, dv)));
                }
                out.push(Some(Tensor::from_parts(Shape::new(s.n, k, 1, 1), da)));
                out
            }),
        ))
    }

    // -----------------------------------------------------------------------
    // normalisation
    // -----------------------------------------------------------------------

    /// Batch norm with batch statistics; `gamma`/`beta` are `(1, C, 1, 1)`.
    pub fn batch_norm_train(self, gamma: Var<'g>, beta: Var<'g>) -> Result<(Var<'g>, BnStats)> {
        self.check_graph(&gamma)?;
        self.check_graph(&beta)?;
        let s = self.shape();
        check_affine(s.c, gamma.shape(), beta.shape())?;
        let x = self.value();
        let gm = gamma.value();
        let bt = beta.value();
        let m = (s.n * s.plane()) as f64;
        let (mean, var) = channel_moments(&x);
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; s.numel()];
        let mut y = vec![0.0; s.numel()];
        for_each_channel(s, |c, range| {
            for i in range {
                xhat[i] = (x.data()[i] - mean[c]) * inv[c];
                y[i] = gm.data()[c] * xhat[i] + bt.data()[c];
            }
        });
        let unbiased = if m > 1.0 {
            var.iter().map(|v| v * m / (m - 1.0)).collect()
        } else {
            var.clone()
        };
        let stats = BnStats {
            mean: mean.clone(),
            var: unbiased,
        };
        let xhat = Arc::new(xhat);
        let out = self.graph.record(
            "batch_norm",
            Tensor::from_parts(s, y),
            &[self, gamma, beta],
            Box::new(move |dy| {
                let c_n = s.c;
                let mut sum_dy = vec![0.0; c_n];
                let mut sum_dy_xhat = vec![0.0; c_n];
                for_each_channel(s, |c, range| {
                    for i in range {
                        sum_dy[c] += dy.data()[i];
                        sum_dy_xhat[c] += dy.data()[i] * xhat[i];
                    }
                });
                let mut dx = vec![0.0; s.numel()];
                for_each_channel(s, |c, range| {
                    let gmc = gm.data()[c];
                    for i in range {
                        // dxhat = dy·γ, summed terms scale by γ as well
                        dx[i] = gmc * inv[c] / m
                            * (m * dy.data()[i] - sum_dy[c] - xhat[i] * sum_dy_xhat[c]);
                    }
                });
                let cs = Shape::new(1, c_n, 1, 1);
                vec![
                    Some(Tensor::from_parts(s, dx)),
                    Some(Tensor::from_parts(cs, sum_dy_xhat)),
                    Some(Tensor::from_parts(cs, sum_dy)),
                ]
            }),
        );
        Ok((out, stats))
    }

    /// Batch norm with frozen running statistics (an affine map).
    pub fn batch_norm_eval(
        self,
        gamma: Var<'g>,
        beta: Var<'g>,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<Var<'g>> {
        self.check_graph(&gamma)?;
        self.check_graph(&beta)?;
        let s = self.shape();
        check_affine(s.c, gamma.shape(), beta.shape())?;
        if running_mean.len() != s.c || running_var.len() != s.c {
            return Err(dim_err("batch_norm", "running statistics length differs from channel axis"));
        }
        let x = self.value();
        let gm = gamma.value();
        let bt = beta.value();
        let inv: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mean = running_mean.to_vec();
        let mut xhat = vec![0.0; s.numel()];
        let mut y = vec![0.0; s.numel()];
        for_each_channel(s, |c, range| {
            for i in range {
                xhat[i] = (x.data()[i] - mean[c]) * inv[c];
                y[i] = gm.data()[c] * xhat[i] + bt.data()[c];
            }
        });
        Ok(self.graph.record(
            "batch_norm",
            Tensor::from_parts(s, y),
            &[self, gamma, beta],
            Box::new(move |dy| {
                let mut dx = vec![0.0; s.numel()];
                let mut dg = vec![0.0; s.c];
                let mut db = vec![0.0; s.c];
                for_each_channel(s, |c, range| {
                    for i in range {
                        dx[i] = dy.data()[i] * gm.data()[c] * inv[c];
                        dg[c] += dy.data()[i] * xhat[i];
                        db[c] += dy.data()[i];
                    }
                });
                let cs = Shape::new(1, s.c, 1, 1);
                vec![
                    Some(Tensor::from_parts(s, dx)),
                    Some(Tensor::from_parts(cs, dg)),
                    Some(Tensor::from_parts(cs, db)),
                ]
            }),
        ))
    }

    // -----------------------------------------------------------------------
    // losses
    // -----------------------------------------------------------------------

    /// Mean squared error over the entries where `valid` is set.
    pub fn masked_mse(self, target: &Tensor, valid: &[bool]) -> Result<Var<'g>> {
        let s = self.shape();
        same_shape("masked_mse", s, target.shape())?;
        if valid.len() != s.numel() {
            return Err(dim_err("masked_mse", "validity mask length differs from prediction"));
        }
        let count = valid.iter().filter(|&&v| v).count();
        if count == 0 {
            return Err(Error::Evaluation(
                "ground truth has no valid pixels; the reconstruction loss is undefined".into(),
            ));
        }
        let p = self.value();
        let diff: Vec<f64> = p
            .data()
            .iter()
            .zip(target.data())
            .zip(valid)
            .map(|((a, b), &v)| if v { a - b } else { 0.0 })
            .collect();
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / count as f64;
        Ok(self.graph.record(
            "masked_mse",
            Tensor::scalar(loss),
            &[self],
            Box::new(move |dy| {
                let g = dy.data()[0] * 2.0 / count as f64;
                vec![Some(Tensor::from_parts(s, diff.iter().map(|d| g * d).collect()))]
            }),
        ))
    }
}

fn check_affine(c: usize, gs: Shape, bs: Shape) -> Result<()> {
    let want = Shape::new(1, c, 1, 1);
    if gs != want || bs != want {
        return Err(dim_err(
            "batch_norm",
            format!("scale {gs} / shift {bs} must be {want} (channel axis)"),
        ));
    }
    Ok(())
}

fn for_each_channel(s: Shape, mut f: impl FnMut(usize, std::ops::Range<usize>)) {
    let plane = s.plane();
    for n in 0..s.n {
        for c in 0..s.c {
            let off = (n * s.c + c) * plane;
            f(c, off..off + plane);
        }
    }
}

/// Per-channel mean and biased variance over batch and spatial axes.
pub(crate) fn channel_moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let m = (s.n * s.plane()) as f64;
    let mut mean = vec![0.0; s.c];
    for_each_channel(s, |c, r| mean[c] += x.data()[r].iter().sum::<f64>());
    mean.iter_mut().for_each(|v| *v /= m);
    let mut var = vec![0.0; s.c];
    for_each_channel(s, |c, r| {
        var[c] += x.data()[r].iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>()
    });
    var.iter_mut().for_each(|v| *v /= m);
    (mean, var)
}

pub(crate) fn softmax_channels(x: &Tensor) -> Tensor {
    let s = x.shape();
    let plane = s.plane();
    let mut y = vec![0.0; s.numel()];
    for n in 0..s.n {
        for p in 0..plane {
            let idx = |c: usize| (n * s.c + c) * plane + p;
            let max = (0..s.c).map(|c| x.data()[idx(c)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..s.c {
                let e = (x.data()[idx(c)] - max).exp();
                y[idx(c)] = e;
                z += e;
            }
            for c in 0..s.c {
                y[idx(c)] /= z;
            }
        }
    }
    Tensor::from_parts(s, y)
}
