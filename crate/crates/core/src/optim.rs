//! AdamW with decoupled weight decay, plus the linear-warmup cosine
//! learning-rate schedule. A step with any non-finite gradient is skipped
//! wholesale so one bad batch cannot poison the moments.

use crate::nn::{Grads, ParamStore};
use crate::tensor::Array;
use crate::Real;

#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    pub weight_decay: Real,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// Name of the first parameter whose gradient went non-finite.
    SkippedNonFinite(String),
}

pub struct AdamW {
    pub cfg: AdamWConfig,
    /// First/second moments, indexed like the ParamStore. Frozen params
    /// keep zero moments forever.
    pub m: Vec<Array>,
    pub v: Vec<Array>,
    /// Completed (applied) update count; bias correction uses t+1.
    pub t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: AdamWConfig) -> AdamW {
        let m = store.iter().map(|(_, e)| Array::zeros(&e.value.shape)).collect::<Vec<_>>();
        let v = m.clone();
        AdamW { cfg, m, v, t: 0 }
    }

    /// One AdamW update at learning rate `lr`. Gradients are inspected
    /// first; if any is non-finite the whole step is a no-op and the
    /// offending parameter's name is returned.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: Real) -> StepOutcome {
        for (id, g) in grads.by_id.iter().enumerate() {
            if let Some(g) = g {
                if g.data.iter().any(|x| !x.is_finite()) {
                    return StepOutcome::SkippedNonFinite(store.entry(id).name.clone());
                }
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for (id, g) in grads.by_id.iter().enumerate() {
            let Some(g) = g else { continue };
            if !store.entry(id).trainable {
                continue;
            }
            let m = &mut self.m[id];
            let v = &mut self.v[id];
            let p = store.value_mut(id);
            for e in 0..g.data.len() {
                let gd = g.data[e];
                m.data[e] = self.cfg.beta1 * m.data[e] + (1.0 - self.cfg.beta1) * gd;
                v.data[e] = self.cfg.beta2 * v.data[e] + (1.0 - self.cfg.beta2) * gd * gd;
                let mhat = m.data[e] / bc1;
                let vhat = v.data[e] / bc2;
                p.data[e] -=
                    lr * (mhat / (vhat.sqrt() + self.cfg.eps) + self.cfg.weight_decay * p.data[e]);
            }
        }
        StepOutcome::Applied
    }
}

/// Linear 0 -> peak over `warmup` steps, then cosine decay to `floor` at
/// `total`.
pub fn cosine_warmup_lr(step: u64, warmup: u64, total: u64, peak: Real, floor: Real) -> Real {
    assert!(warmup < total, "warmup must be shorter than the run");
    if step < warmup {
        return peak * step as Real / warmup as Real;
    }
    let step = step.min(total);
    let t = (step - warmup) as Real / (total - warmup) as Real;
    let ratio = floor / peak;
    peak * (ratio + (1.0 - ratio) * (1.0 + (std::f64::consts::PI as Real * t).cos()) / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;

    fn scalar_store(x: Real) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", Array::scalar(x), true);
        s
    }

    fn scalar_grads(store: &ParamStore, g: Real) -> Grads {
        let mut by_id: Vec<Option<Array>> = (0..store.len()).map(|_| None).collect();
        by_id[0] = Some(Array::scalar(g));
        Grads { by_id }
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut store = scalar_store(1.25);
        let mut opt = AdamW::new(&store, AdamWConfig::default());
        let grads = scalar_grads(&store, 0.0);
        for _ in 0..10 {
            assert_eq!(opt.step(&mut store, &grads, 0.1), StepOutcome::Applied);
        }
        assert_eq!(store.entry(0).value.data[0], 1.25);
    }

    #[test]
    fn first_step_is_minus_lr_times_sign() {
        for &g in &[3.0, -0.004] {
            let mut store = scalar_store(0.0);
            let mut opt = AdamW::new(&store, AdamWConfig::default());
            let grads = scalar_grads(&store, g);
            opt.step(&mut store, &grads, 0.1);
            // mhat = g, vhat = g^2 after correction, so dx = -lr*g/(|g|+eps).
            let x = store.entry(0).value.data[0];
            assert!((x + 0.1 * g.signum()).abs() < 1e-5, "g={g} x={x}");
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut store = scalar_store(5.0);
        let mut opt = AdamW::new(&store, AdamWConfig::default());
        for _ in 0..500 {
            let x = store.entry(0).value.data[0];
            let grads = scalar_grads(&store, 2.0 * x);
            opt.step(&mut store, &grads, 0.1);
        }
        assert!(store.entry(0).value.data[0].abs() < 1e-2);
    }

    #[test]
    fn non_finite_gradient_skips_the_whole_step() {
        let mut store = ParamStore::new();
        store.add("a", Array::scalar(1.0), true);
        store.add("b", Array::scalar(2.0), true);
        let mut opt = AdamW::new(&store, AdamWConfig::default());
        let mut by_id = vec![Some(Array::scalar(0.5)), Some(Array::scalar(Real::NAN))];
        let grads = Grads { by_id: by_id.clone() };
        let out = opt.step(&mut store, &grads, 0.1);
        assert_eq!(out, StepOutcome::SkippedNonFinite("b".into()));
        assert_eq!(store.entry(0).value.data[0], 1.0); // no partial update
        assert_eq!(opt.t, 0);
        assert!(opt.m[0].data[0] == 0.0 && opt.v[0].data[0] == 0.0);

        by_id[1] = Some(Array::scalar(Real::INFINITY));
        assert!(matches!(
            opt.step(&mut store, &Grads { by_id }, 0.1),
            StepOutcome::SkippedNonFinite(_)
        ));
    }

    #[test]
    fn decoupled_weight_decay_shrinks_without_gradient_signal() {
        let mut store = scalar_store(2.0);
        let cfg = AdamWConfig { weight_decay: 0.01, ..Default::default() };
        let mut opt = AdamW::new(&store, cfg);
        let grads = scalar_grads(&store, 0.0);
        opt.step(&mut store, &grads, 0.1);
        // zero grad => mhat = 0, so the update is exactly -lr*wd*p.
        assert!((store.entry(0).value.data[0] - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-15);
    }

    #[test]
    fn frozen_parameters_never_move() {
        let mut store = ParamStore::new();
        store.add("frozen", Array::scalar(7.0), false);
        let mut opt = AdamW::new(&store, AdamWConfig::default());
        let grads = Grads { by_id: vec![Some(Array::scalar(1.0))] };
        opt.step(&mut store, &grads, 0.1);
        assert_eq!(store.entry(0).value.data[0], 7.0);
    }

    #[test]
    fn schedule_hits_the_frozen_anchor_points() {
        let (w, t, peak) = (100u64, 1100u64, 3e-4 as Real);
        assert_eq!(cosine_warmup_lr(0, w, t, peak, 0.0), 0.0);
        assert!((cosine_warmup_lr(50, w, t, peak, 0.0) - peak / 2.0).abs() < 1e-18);
        assert_eq!(cosine_warmup_lr(w, w, t, peak, 0.0), peak);
        let mid = w + (t - w) / 2;
        assert!((cosine_warmup_lr(mid, w, t, peak, 0.0) - peak / 2.0).abs() < 1e-12);
        assert!(cosine_warmup_lr(t, w, t, peak, 0.0).abs() < 1e-19);

        // Nonzero floor: decay ends at the floor, never below it.
        let floor = 1e-5 as Real;
        assert!((cosine_warmup_lr(t, w, t, peak, floor) - floor).abs() < 1e-18);
        let mut prev = peak;
        for s in (w..=t).step_by(50) {
            let lr = cosine_warmup_lr(s, w, t, peak, floor);
            assert!(lr <= prev + 1e-18 && lr >= floor - 1e-18);
            prev = lr;
        }
    }
}
