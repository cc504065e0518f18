use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Array, Graph, Tensor};
use crate::{Error, Real, Result};

/// Which parameter elements to probe. Full sweeps suit small blocks;
/// large composites subsample deterministically.
#[derive(Debug, Clone, Copy)]
pub enum Sample {
    All,
    Random { count: usize, seed: u64 },
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: Real,
    /// (param index, element index) of the worst relative error.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub tol: Real,
    pub pass: bool,
    /// Set when a non-finite value was encountered; always fails.
    pub non_finite: Option<String>,
}

/// Central-difference gradient check: builds the graph once for analytic
/// gradients, then probes chosen elements with two forward passes each.
/// Relative error is |analytic - numeric| / max(1, |analytic|).
pub fn gradient_check<F>(f: F, params: &[Array], h: Real, tol: Real, sample: Sample) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Tensor]) -> Result<Tensor>,
{
    if !(1e-6..=1e-3).contains(&h) {
        return Err(Error::invalid("gradient_check", format!("h = {h} outside [1e-6, 1e-3]")));
    }
    let fail = |loc: String| GradCheckReport {
        max_rel_err: Real::INFINITY,
        worst: None,
        checked: 0,
        tol,
        pass: false,
        non_finite: Some(loc),
    };

    let mut g = Graph::new();
    let leaves: Vec<Tensor> = params.iter().map(|p| g.leaf(p, true)).collect();
    let loss_t = f(&mut g, &leaves)?;
    let loss = g.scalar(&loss_t)?;
    if !loss.is_finite() {
        return Ok(fail("loss value".into()));
    }
    g.backward(&loss_t)?;
    let analytic: Vec<Vec<Real>> = leaves
        .iter()
        .zip(params)
        .map(|(l, p)| g.grad(l).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    for (pi, a) in analytic.iter().enumerate() {
        if let Some(ei) = a.iter().position(|v| !v.is_finite()) {
            return Ok(fail(format!("analytic gradient of param {pi} element {ei}")));
        }
    }

    let elems = pick_elements(params, sample);
    let mut max_rel: Real = 0.0;
    let mut worst = None;
    for &(pi, ei) in &elems {
        let numeric = central_diff(&f, params, pi, ei, h)?;
        if !numeric.is_finite() {
            return Ok(fail(format!("numeric gradient of param {pi} element {ei}")));
        }
        let a = analytic[pi][ei];
        let rel = (a - numeric).abs() / a.abs().max(1.0);
        if rel > max_rel {
            max_rel = rel;
            worst = Some((pi, ei));
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        worst,
        checked: elems.len(),
        tol,
        pass: max_rel <= tol,
        non_finite: None,
    })
}

/// Two-sided difference quotient for one parameter element.
pub fn central_diff<F>(f: &F, params: &[Array], pi: usize, ei: usize, h: Real) -> Result<Real>
where
    F: Fn(&mut Graph, &[Tensor]) -> Result<Tensor>,
{
    let eval = |delta: Real| -> Result<Real> {
        let mut g = Graph::new();
        let leaves: Vec<Tensor> = params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if i == pi {
                    let mut q = p.clone();
                    q.data[ei] += delta;
                    g.leaf(&q, false)
                } else {
                    g.leaf(p, false)
                }
            })
            .collect();
        let t = f(&mut g, &leaves)?;
        g.scalar(&t)
    };
    Ok((eval(h)? - eval(-h)?) / (2.0 * h))
}

fn pick_elements(params: &[Array], sample: Sample) -> Vec<(usize, usize)> {
    let all: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| (0..p.numel()).map(move |ei| (pi, ei)))
        .collect();
    match sample {
        Sample::All => all,
        Sample::Random { count, seed } => {
            if count >= all.len() {
                return all;
            }
            // partial Fisher-Yates over the flat element list
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pool = all;
            for i in 0..count {
                let j = rng.gen_range(i..pool.len());
                pool.swap(i, j);
            }
            pool.truncate(count);
            pool
        }
    }
}
