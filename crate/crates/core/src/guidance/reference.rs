//! Dynamic-convolution baselines used to instrument kernel memory. They run on
//! plain tensors and are never trained.

use crate::error::{dim_err, Error, Result};
use crate::tensor::{conv2d, global_avg_pool, LayerParams, Shape, Tensor};

/// Output of a baseline together with the largest kernel buffer it held for
/// one sample.
#[derive(Clone, Debug)]
pub struct GuidedOutput {
    pub output: Tensor,
    pub kernel_elements: usize,
}

/// `predictor` is a 1×1 convolution C → C²·R² over the guidance feature.
#[derive(Clone, Debug)]
pub struct DcParams {
    pub predictor: LayerParams,
    pub r: usize,
}

/// `channelwise` is a 1×1 convolution C → C·R² over the guidance feature;
/// `mixer` is a 1×1 convolution C → C² on its global average.
#[derive(Clone, Debug)]
pub struct CfParams {
    pub channelwise: LayerParams,
    pub mixer: LayerParams,
    pub r: usize,
}

fn check_pair(op: &'static str, image: &Tensor, depth: &Tensor, r: usize) -> Result<()> {
    if image.shape() != depth.shape() {
        return Err(dim_err(
            op,
            format!("image {} and depth {} must share a shape", image.shape(), depth.shape()),
        ));
    }
    if r.is_multiple_of(2) {
        return Err(Error::Config(format!("kernel size R must be odd, got {r}")));
    }
    Ok(())
}

fn expect_channels(op: &'static str, t: &Tensor, c: usize) -> Result<()> {
    if t.shape().c != c {
        return Err(dim_err(op, format!("kernel predictor gives {} channels, need {c}", t.shape().c)));
    }
    Ok(())
}

/// Applies per-pixel full kernels laid out as `(1, C·C·R·R, H, W)` with index
/// order `[out][in][ky][kx]` to one `(1, C, H, W)` sample, zero padded.
fn apply_full(depth: &Tensor, kernels: &[f64], r: usize) -> Vec<f64> {
    let Shape { c, h, w, .. } = depth.shape();
    let d = depth.data();
    let hw = h * w;
    let half = (r / 2) as isize;
    let mut out = vec![0.0; c * hw];
    for co in 0..c {
        for ci in 0..c {
            for ky in 0..r {
                for kx in 0..r {
                    let kbase = (((co * c + ci) * r + ky) * r + kx) * hw;
                    for y in 0..h {
                        let sy = y as isize + ky as isize - half;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for x in 0..w {
                            let sx = x as isize + kx as isize - half;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            out[co * hw + y * w + x] +=
                                kernels[kbase + y * w + x] * d[ci * hw + sy as usize * w + sx as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Applies explicit per-pixel kernels `(B, C·C·R·R, H, W)` to `depth`.
pub fn apply_dynamic_kernels(depth: &Tensor, kernels: &Tensor, r: usize) -> Result<Tensor> {
    let s = depth.shape();
    let want = Shape::new(s.n, s.c * s.c * r * r, s.h, s.w);
    if kernels.shape() != want || r.is_multiple_of(2) {
        return Err(dim_err(
            "apply_dynamic_kernels",
            format!("kernels {} do not match {want} for depth {} and R={r}", kernels.shape(), s),
        ));
    }
    let items = (0..s.n)
        .map(|n| {
            let out = apply_full(&depth.batch_item(n), kernels.batch_item(n).data(), r);
            Tensor::new(Shape::new(1, s.c, s.h, s.w), out)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&items)
}

/// Full dynamic convolution guided by `image`.
pub fn dc_reference(image: &Tensor, depth: &Tensor, params: &DcParams) -> Result<GuidedOutput> {
    let r = params.r;
    check_pair("dc_reference", image, depth, r)?;
    let s = depth.shape();
    let mut peak = 0;
    let mut items = Vec::with_capacity(s.n);
    for n in 0..s.n {
        let kernels = conv2d(&image.batch_item(n), &params.predictor)?;
        expect_channels("dc_reference", &kernels, s.c * s.c * r * r)?;
        peak = peak.max(kernels.numel());
        let out = apply_full(&depth.batch_item(n), kernels.data(), r);
        items.push(Tensor::new(Shape::new(1, s.c, s.h, s.w), out)?);
    }
    Ok(GuidedOutput {
        output: Tensor::stack(&items)?,
        kernel_elements: peak,
    })
}

/// Channel-wise spatial kernels followed by a single cross-channel mixer.
pub fn cf_reference(image: &Tensor, depth: &Tensor, params: &CfParams) -> Result<GuidedOutput> {
    let r = params.r;
    check_pair("cf_reference", image, depth, r)?;
    let Shape { n: b, c, h, w } = depth.shape();
    let hw = h * w;
    let half = (r / 2) as isize;
    let mut peak = 0;
    let mut items = Vec::with_capacity(b);
    for n in 0..b {
        let guide = image.batch_item(n);
        let spatial = conv2d(&guide, &params.channelwise)?;
        expect_channels("cf_reference", &spatial, c * r * r)?;
        let mixer = conv2d(&global_avg_pool(&guide), &params.mixer)?;
        expect_channels("cf_reference", &mixer, c * c)?;
        peak = peak.max(spatial.numel() + mixer.numel());

        let d = depth.batch_item(n);
        let (d, k, m) = (d.data(), spatial.data(), mixer.data());
        let mut filtered = vec![0.0; c * hw];
        for ch in 0..c {
            for ky in 0..r {
                for kx in 0..r {
                    let kbase = ((ch * r + ky) * r + kx) * hw;
                    for y in 0..h {
                        let sy = y as isize + ky as isize - half;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for x in 0..w {
                            let sx = x as isize + kx as isize - half;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            filtered[ch * hw + y * w + x] +=
                                k[kbase + y * w + x] * d[ch * hw + sy as usize * w + sx as usize];
                        }
                    }
                }
            }
        }
        let mut out = vec![0.0; c * hw];
        for co in 0..c {
            for ci in 0..c {
                let mv = m[co * c + ci];
                for p in 0..hw {
                    out[co * hw + p] += mv * filtered[ci * hw + p];
                }
            }
        }
        items.push(Tensor::new(Shape::new(1, c, h, w), out)?);
    }
    Ok(GuidedOutput {
        output: Tensor::stack(&items)?,
        kernel_elements: peak,
    })
}
