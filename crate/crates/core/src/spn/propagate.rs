use std::sync::Arc;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Graph, Shape, Tensor, Var};

use super::neighbors::NeighborSet;

/// Largest map, in pixels, the dense oracle accepts.
pub const ORACLE_MAX_PIXELS: usize = 16 * 16;

/// One neighbor set shared by the batch, or one per batch item.
fn set_for(sets: &[NeighborSet], n: usize) -> &NeighborSet {
    if sets.len() == 1 {
        &sets[0]
    } else {
        &sets[n]
    }
}

fn check_sets(op: &'static str, sets: &[NeighborSet], batch: usize) -> Result<()> {
    if sets.is_empty() || (sets.len() != 1 && sets.len() != batch) {
        return Err(dim_err(op, format!("{} neighbor sets for a batch of {batch}", sets.len())));
    }
    let (dims, k) = (sets[0].dims(), sets[0].slots());
    if sets.iter().any(|s| s.dims() != dims || s.slots() != k) {
        return Err(dim_err(op, "neighbor sets differ in size or slot count"));
    }
    Ok(())
}

fn check_field(op: &'static str, field: Shape, affinity: Shape, sets: &[NeighborSet]) -> Result<()> {
    check_sets(op, sets, field.n)?;
    let nbrs = &sets[0];
    let (h, w) = nbrs.dims();
    if field.h != h || field.w != w {
        return Err(dim_err(op, format!("field {field} does not match {h}x{w} neighbors (height, width)")));
    }
    let want = Shape::new(field.n, nbrs.slots(), h, w);
    if affinity != want {
        return Err(dim_err(
            op,
            format!("affinity {affinity} must be {want}: one channel per neighbor slot"),
        ));
    }
    Ok(())
}

/// Zeroes non-neighbor slots and rescales each pixel's weights by
/// `gamma / Σ|ω|` whenever `Σ|ω| > gamma`.
pub fn normalize_affinity<'g>(raw: Var<'g>, nbrs: &NeighborSet, gamma: f64) -> Result<Var<'g>> {
    normalize_affinity_batch(raw, std::slice::from_ref(nbrs), gamma)
}

/// [`normalize_affinity`] with one neighbor set per batch item.
pub fn normalize_affinity_batch<'g>(raw: Var<'g>, sets: &[NeighborSet], gamma: f64) -> Result<Var<'g>> {
    let s = raw.shape();
    check_sets("normalize_affinity", sets, s.n)?;
    let (h, w) = sets[0].dims();
    let k = sets[0].slots();
    if s != Shape::new(s.n, k, h, w) {
        return Err(dim_err(
            "normalize_affinity",
            format!("raw affinity {s} must have {k} channels over {h}x{w}"),
        ));
    }
    if gamma <= 0.0 {
        return Err(Error::Config(format!("normalisation bound must be positive, got {gamma}")));
    }
    let hw = h * w;
    let valid: Vec<bool> = (0..s.n).flat_map(|n| set_for(sets, n).validity().iter().copied()).collect();
    let x = raw.value();
    let xd = x.data();
    let mut out = vec![0.0; x.numel()];
    let mut sums = vec![0.0; s.n * hw];
    let mut kinks = Vec::with_capacity(s.n * hw * (k + 1));
    for n in 0..s.n {
        for p in 0..hw {
            let mut total = 0.0;
            for j in 0..k {
                if valid[(n * k + j) * hw + p] {
                    let v = xd[(n * k + j) * hw + p];
                    total += v.abs();
                    kinks.push(v > 0.0);
                }
            }
            let scale = if total > gamma { gamma / total } else { 1.0 };
            kinks.push(total > gamma);
            sums[n * hw + p] = total;
            for j in 0..k {
                let i = (n * k + j) * hw + p;
                if valid[i] {
                    out[i] = xd[i] * scale;
                }
            }
        }
    }
    raw.graph().note_kinks(kinks);
    let y = Tensor::new(s, out)?;
    Ok(raw.graph().record(
        "normalize_affinity",
        y,
        &[raw],
        Box::new(move |dy| {
            let (xr, gd) = (x.data(), dy.data());
            let mut dx = vec![0.0; xr.len()];
            for n in 0..s.n {
                for p in 0..hw {
                    let total = sums[n * hw + p];
                    if total > gamma {
                        let mut dot = 0.0;
                        for j in 0..k {
                            let i = (n * k + j) * hw + p;
                            if valid[i] {
                                dot += gd[i] * xr[i];
                            }
                        }
                        for j in 0..k {
                            let i = (n * k + j) * hw + p;
                            if valid[i] {
                                let sign = if xr[i] > 0.0 {
                                    1.0
                                } else if xr[i] < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                };
                                dx[i] = gamma * (gd[i] / total - sign * dot / (total * total));
                            }
                        }
                    } else {
                        for j in 0..k {
                            let i = (n * k + j) * hw + p;
                            if valid[i] {
                                dx[i] = gd[i];
                            }
                        }
                    }
                }
            }
            vec![Some(Tensor::new(s, dx).expect("same shape"))]
        }),
    ))
}

/// One simultaneous update `X'_p = (1 − Σ_q ω_pq) X_p + Σ_q ω_pq X_q` over the
/// neighbors `q` of `p`. Every channel of `x` shares the affinity.
pub fn spn_step<'g>(x: Var<'g>, nbrs: &NeighborSet, affinity: Var<'g>) -> Result<Var<'g>> {
    spn_step_batch(x, std::slice::from_ref(nbrs), affinity)
}

/// [`spn_step`] with one neighbor set per batch item.
pub fn spn_step_batch<'g>(x: Var<'g>, sets: &[NeighborSet], affinity: Var<'g>) -> Result<Var<'g>> {
    x.check_graph(&affinity)?;
    let xs = x.shape();
    check_field("spn_step", xs, affinity.shape(), sets)?;
    let (h, w) = sets[0].dims();
    let hw = h * w;
    let k = sets[0].slots();
    // targets[(n * k + j) * hw + p]
    let targets: Arc<Vec<Option<usize>>> = Arc::new(
        (0..xs.n)
            .flat_map(|n| (0..k).flat_map(move |j| (0..hw).map(move |p| (n, j, p))))
            .map(|(n, j, p)| set_for(sets, n).target(j, p))
            .collect(),
    );
    let xv = x.value();
    let av = affinity.value();
    let (xd, ad) = (xv.data(), av.data());
    let mut out = vec![0.0; xv.numel()];
    for n in 0..xs.n {
        for c in 0..xs.c {
            let base = (n * xs.c + c) * hw;
            for p in 0..hw {
                let xp = xd[base + p];
                let mut acc = xp;
                for j in 0..k {
                    if let Some(q) = targets[(n * k + j) * hw + p] {
                        acc += ad[(n * k + j) * hw + p] * (xd[base + q] - xp);
                    }
                }
                out[base + p] = acc;
            }
        }
    }
    let y = Tensor::new(xs, out)?;
    Ok(x.graph().record(
        "spn_step",
        y,
        &[x, affinity],
        Box::new(move |dy| {
            let (xd, ad, gd) = (xv.data(), av.data(), dy.data());
            let mut dx = vec![0.0; xd.len()];
            let mut da = vec![0.0; ad.len()];
            for n in 0..xs.n {
                for c in 0..xs.c {
                    let base = (n * xs.c + c) * hw;
                    for p in 0..hw {
                        let g = gd[base + p];
                        let xp = xd[base + p];
                        let mut keep = 1.0;
                        for j in 0..k {
                            let ai = (n * k + j) * hw + p;
                            if let Some(q) = targets[ai] {
                                keep -= ad[ai];
                                dx[base + q] += ad[ai] * g;
                                da[ai] += g * (xd[base + q] - xp);
                            }
                        }
                        dx[base + p] += keep * g;
                    }
                }
            }
            vec![
                Some(Tensor::new(xs, dx).expect("same shape")),
                Some(Tensor::new(av.shape(), da).expect("same shape")),
            ]
        }),
    ))
}

/// `T` propagation steps with a shared affinity; `T = 0` returns `x0`.
pub fn propagate<'g>(x0: Var<'g>, nbrs: &NeighborSet, affinity: Var<'g>, steps: usize) -> Result<Var<'g>> {
    propagate_batch(x0, std::slice::from_ref(nbrs), affinity, steps)
}

/// [`propagate`] with one neighbor set per batch item.
pub fn propagate_batch<'g>(x0: Var<'g>, sets: &[NeighborSet], affinity: Var<'g>, steps: usize) -> Result<Var<'g>> {
    check_field("propagate", x0.shape(), affinity.shape(), sets)?;
    let mut x = x0;
    for _ in 0..steps {
        x = spn_step_batch(x, sets, affinity)?;
    }
    Ok(x)
}

/// [`propagate`] on plain tensors.
pub fn propagate_values(x0: &Tensor, nbrs: &NeighborSet, affinity: &Tensor, steps: usize) -> Result<Tensor> {
    let g = Graph::new();
    Ok(propagate(g.constant(x0.clone()), nbrs, g.constant(affinity.clone()), steps)?.value())
}

/// The `HW × HW` row-major matrix of one update for batch item `n`.
pub fn update_matrix(nbrs: &NeighborSet, affinity: &Tensor, n: usize) -> Result<Vec<f64>> {
    let (h, w) = nbrs.dims();
    let hw = h * w;
    let k = nbrs.slots();
    let a = affinity.shape();
    if a.c != k || a.h != h || a.w != w || n >= a.n {
        return Err(dim_err("update_matrix", format!("affinity {a} does not fit {k} slots over {h}x{w}")));
    }
    let mut m = vec![0.0; hw * hw];
    for p in 0..hw {
        m[p * hw + p] = 1.0;
        for j in 0..k {
            if let Some(q) = nbrs.target(j, p) {
                let wgt = affinity.data()[(n * k + j) * hw + p];
                m[p * hw + p] -= wgt;
                m[p * hw + q] += wgt;
            }
        }
    }
    Ok(m)
}

/// Reference propagation by repeated dense matrix-vector products.
pub fn oracle_propagate(x0: &Tensor, nbrs: &NeighborSet, affinity: &Tensor, steps: usize) -> Result<Tensor> {
    let (h, w) = nbrs.dims();
    let hw = h * w;
    if hw > ORACLE_MAX_PIXELS {
        return Err(Error::Usage(format!(
            "dense oracle is capped at {ORACLE_MAX_PIXELS} pixels, got {h}x{w}"
        )));
    }
    let xs = x0.shape();
    check_field("oracle_propagate", xs, affinity.shape(), std::slice::from_ref(nbrs))?;
    let mut out = x0.to_vec();
    for n in 0..xs.n {
        let m = update_matrix(nbrs, affinity, n)?;
        for c in 0..xs.c {
            let base = (n * xs.c + c) * hw;
            let mut v = out[base..base + hw].to_vec();
            for _ in 0..steps {
                v = (0..hw).map(|r| (0..hw).map(|q| m[r * hw + q] * v[q]).sum()).collect();
            }
            out[base..base + hw].copy_from_slice(&v);
        }
    }
    Tensor::new(xs, out)
}
