use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::graph::{Graph, Var};
use super::params::{Mode, ParamStore, Session};
use super::{Shape, Tensor};

/// Which coordinates of each input are perturbed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CoordSelection {
    All,
    /// At most `per_input` coordinates per input, drawn without replacement.
    Sample { per_input: usize, seed: u64 },
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step h.
    pub step: f64,
    pub tol: f64,
    /// Coordinates whose branch pattern changes within `kink_radius·h` are
    /// flagged instead of compared.
    pub kink_radius: f64,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
    pub selection: CoordSelection,
    /// Use the fourth-order stencil `(8(f₊₁ − f₋₁) − (f₊₂ − f₋₂)) / 12h`.
    pub five_point: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tol: 1e-5,
            kink_radius: 10.0,
            floor: 1e-6,
            selection: CoordSelection::All,
            five_point: false,
        }
    }
}

impl GradCheckOptions {
    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_step(mut self, step: f64) -> Self {
        self.step = step;
        self
    }

    pub fn five_point(mut self) -> Self {
        self.five_point = true;
        self
    }

    pub fn sampled(mut self, per_input: usize, seed: u64) -> Self {
        self.selection = CoordSelection::Sample { per_input, seed };
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over compared coordinates of `|a − n| / max(|a|, |n|, floor)`.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because a non-smooth op switched branch nearby.
    pub flagged: usize,
    /// (input index, flat coordinate) of the worst error.
    pub worst: Option<(usize, usize)>,
    pub tol: f64,
    pub passed: bool,
}

/// Checks the taped gradient of a scalar function of one tensor against
/// central differences.
pub fn grad_check<F>(f: F, x: &Tensor, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    grad_check_inputs(|g, v| f(g, v[0]), std::slice::from_ref(x), opts)
}

/// Multi-input form of [`grad_check`].
pub fn grad_check_inputs<F>(f: F, inputs: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    if opts.step <= 0.0 {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let evaluate = |xs: &[Tensor]| -> Result<(f64, u64)> {
        let g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&g, &vars)?;
        if out.shape() != Shape::scalar() {
            return Err(Error::Usage(format!(
                "grad_check needs a scalar function, got output {}",
                out.shape()
            )));
        }
        Ok((out.value().data()[0], g.kink_signature()))
    };

    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&g, &vars)?;
    if out.shape() != Shape::scalar() {
        return Err(Error::Usage(format!(
            "grad_check needs a scalar function, got output {}",
            out.shape()
        )));
    }
    let base_sig = g.kink_signature();
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.wrt(*v)).collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        flagged: 0,
        worst: None,
        tol: opts.tol,
        passed: true,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, x) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match opts.selection {
            CoordSelection::All => (0..x.numel()).collect(),
            CoordSelection::Sample { per_input, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9e37_79b9));
                let mut c = sample(&mut rng, x.numel(), per_input.min(x.numel())).into_vec();
                c.sort_unstable();
                c
            }
        };
        let base = x.to_vec();
        for j in coords {
            let mut at = |delta: f64| -> Result<(f64, u64)> {
                let mut d = base.clone();
                d[j] += delta;
                work[i] = Tensor::from_parts(x.shape(), d);
                evaluate(&work)
            };
            let h = opts.step;
            let far = opts.kink_radius * h;
            let (_, s_far_p) = at(far)?;
            let (_, s_far_m) = at(-far)?;
            let (fp, s_p) = at(h)?;
            let (fm, s_m) = at(-h)?;
            let mut sigs = vec![s_far_p, s_far_m, s_p, s_m];
            let numeric = if opts.five_point {
                let (fp2, s_p2) = at(2.0 * h)?;
                let (fm2, s_m2) = at(-2.0 * h)?;
                sigs.extend([s_p2, s_m2]);
                (8.0 * (fp - fm) - (fp2 - fm2)) / (12.0 * h)
            } else {
                (fp - fm) / (2.0 * h)
            };
            if sigs.iter().any(|&s| s != base_sig) {
                report.flagged += 1;
                continue;
            }
            let a = analytic[i].data()[j];
            let denom = a.abs().max(numeric.abs()).max(opts.floor);
            let err = (a - numeric).abs() / denom;
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((i, j));
                }
            }
        }
        work[i] = x.clone();
    }
    report.passed = report.max_rel_error <= opts.tol && !report.max_rel_error.is_nan();
    Ok(report)
}

/// Checks the gradient of a scalar loss with respect to `inputs` and every
/// parameter in `store`. `f` builds the loss from a training-mode session
/// whose parameters are bound to the perturbed leaves.
pub fn grad_check_params<F>(store: &ParamStore, inputs: &[Tensor], f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&Session<'g>, &[Var<'g>]) -> Result<Var<'g>>,
{
    let names = store.param_names();
    let mut all = inputs.to_vec();
    for n in &names {
        all.push(store.get(n)?.clone());
    }
    let k = inputs.len();
    grad_check_inputs(
        |g, vars| {
            let s = Session::new(g, store, Mode::Train);
            for (name, v) in names.iter().zip(&vars[k..]) {
                s.bind(name, *v);
            }
            f(&s, &vars[..k])
        },
        &all,
        opts,
    )
}
