//! Adam with bias correction and the linear-warmup / cosine-decay schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Learning rate at `step`: linear ramp from 0 to `peak` over `warmup`
/// steps, then half-cosine decay to 0 over `decay` steps, 0 afterwards.
pub fn lr_at(step: i64, peak: f64, warmup: u64, decay: u64) -> Result<f64> {
    if step < 0 {
        return Err(Error::InvalidArgument(format!("negative step {step}")));
    }
    if warmup == 0 || decay == 0 {
        return Err(Error::InvalidArgument(
            "warmup and decay must be at least 1".into(),
        ));
    }
    let step = step as u64;
    if step <= warmup {
        return Ok(peak * step as f64 / warmup as f64);
    }
    let t = (step - warmup) as f64 / decay as f64;
    if t >= 1.0 {
        return Ok(0.0);
    }
    Ok((peak * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())).max(0.0))
}

/// Schedule parameters as stored in the run config.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub peak: f64,
    pub warmup: u64,
    pub decay: u64,
}

impl Schedule {
    pub fn lr(&self, step: usize) -> f64 {
        lr_at(step as i64, self.peak, self.warmup, self.decay)
            .expect("schedule validated at construction")
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// Adam state: per-parameter first and second moments plus the step count.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new(0.9, 0.999, 1e-8)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// First and second moment for a parameter, zeros before its first update.
    pub fn moments(&self, name: &str) -> Option<(&[f32], &[f32])> {
        self.moments
            .get(name)
            .map(|m| (m.m.as_slice(), m.v.as_slice()))
    }

    /// One update over every `(name, grad)` pair. `lr_for` maps a parameter
    /// name to its learning rate so pretrained weights can use a smaller one.
    pub fn step<'a, I, F>(&mut self, params: &mut ParamStore, grads: I, lr_for: F) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a [f32])>,
        F: Fn(&str) -> f64,
    {
        let lr_ok = |lr: f64| lr >= 0.0 && lr.is_finite();
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let (c1, c2) = ((1.0 - self.beta1) as f32, (1.0 - self.beta2) as f32);
        for (name, grad) in grads {
            let lr = lr_for(name);
            if !lr_ok(lr) {
                return Err(Error::InvalidArgument(format!("learning rate {lr}")));
            }
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
            if p.numel() != grad.len() {
                return Err(Error::shape("adam_step", p.shape(), &[grad.len()]));
            }
            let mom = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| Moments {
                    m: vec![0.0; grad.len()],
                    v: vec![0.0; grad.len()],
                });
            let step_size = (lr / bc1) as f32;
            let denom_scale = (1.0 / bc2.sqrt()) as f32;
            let eps = self.eps as f32;
            for (((w, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(grad)
                .zip(mom.m.iter_mut())
                .zip(mom.v.iter_mut())
            {
                *m = b1 * *m + c1 * g;
                *v = b2 * *v + c2 * g * g;
                *w -= step_size * *m / (v.sqrt() * denom_scale + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_at(0, 3e-4, 2000, 2_000_000).unwrap(), 0.0);
        assert_eq!(lr_at(2000, 3e-4, 2000, 2_000_000).unwrap(), 3e-4);
        assert_eq!(lr_at(2000 + 500, 1.0, 2000, 500).unwrap(), 0.0);
        assert_eq!(lr_at(10_000, 1.0, 2000, 500).unwrap(), 0.0);
        assert!(lr_at(-1, 1.0, 10, 10).is_err());
        assert!(lr_at(1, 1.0, 0, 10).is_err());
    }

    #[test]
    fn schedule_is_continuous_at_warmup() {
        let (peak, w, d) = (3e-4, 2000, 2_000_000);
        let at = lr_at(w as i64, peak, w, d).unwrap();
        let after = lr_at(w as i64 + 1, peak, w, d).unwrap();
        let before = lr_at(w as i64 - 1, peak, w, d).unwrap();
        assert!((after - at).abs() < 1e-9);
        assert!((at - before).abs() < peak / w as f64 + 1e-12);
    }

    fn one_param(v: f32) -> ParamStore {
        let mut ps = ParamStore::default();
        ps.insert("w", Tensor::new(vec![1], vec![v]).unwrap()).unwrap();
        ps
    }

    #[test]
    fn zero_lr_moves_moments_only() {
        let mut ps = one_param(2.0);
        let mut opt = Adam::default();
        opt.step(&mut ps, [("w", &[0.5f32][..])], |_| 0.0).unwrap();
        assert_eq!(ps.get("w").unwrap().data(), &[2.0]);
        let (m, v) = opt.moments("w").unwrap();
        assert!((m[0] - 0.05).abs() < 1e-7);
        assert!((v[0] - 0.00025).abs() < 1e-9);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction, m_hat = g and v_hat = g^2, so the first
        // update is lr * g / (|g| + eps) ~= lr.
        let mut ps = one_param(1.0);
        let mut opt = Adam::default();
        opt.step(&mut ps, [("w", &[1.0f32][..])], |_| 1e-3).unwrap();
        let w = ps.get("w").unwrap().data()[0];
        assert!((1.0 - w - 1e-3).abs() < 1e-6, "{w}");
    }

    #[test]
    fn moments_start_empty() {
        let opt = Adam::default();
        assert!(opt.moments("w").is_none());
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut ps = one_param(1.0);
        let mut opt = Adam::default();
        let err = opt.step(&mut ps, [("w", &[1.0f32, 2.0][..])], |_| 1e-3);
        assert!(matches!(err, Err(Error::ShapeMismatch { .. })));
    }
}
