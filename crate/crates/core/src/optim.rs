//! AdamW with decoupled weight decay and a linear warmup/decay schedule.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParameterStore, Real};

pub const LORA_LR_CAP: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub warmup_frac: f64,
    pub clip_norm: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self::transformer()
    }
}

impl OptimConfig {
    pub fn transformer() -> Self {
        OptimConfig {
            base_lr: 1e-4,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            eps: 1e-8,
            warmup_frac: 0.1,
            clip_norm: 1.0,
            epochs: 20,
            batch_size: 64,
        }
    }

    pub fn regularized() -> Self {
        OptimConfig {
            weight_decay: 0.1,
            ..Self::transformer()
        }
    }

    pub fn mlp() -> Self {
        OptimConfig {
            base_lr: 1e-3,
            weight_decay: 0.0,
            epochs: 50,
            batch_size: 256,
            ..Self::transformer()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(Error::config("base_lr must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::config("warmup_frac must lie in [0, 1)"));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_examples: usize) -> usize {
        n_examples.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, n_examples: usize) -> usize {
        self.epochs * self.steps_per_epoch(n_examples)
    }
}

pub fn warmup_steps(total_steps: usize, warmup_frac: f64) -> usize {
    // 0.1 * 30 is 3.0000000000000004 in binary floating point
    let raw = warmup_frac * total_steps as f64;
    ((raw - 1e-9 * raw.max(1.0)).ceil().max(0.0) as usize).min(total_steps)
}

/// Linear ramp from 0 to `base_lr`, then linear decay to 0 at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &OptimConfig) -> f64 {
    let warm = warmup_steps(total_steps, cfg.warmup_frac);
    let step = step.min(total_steps);
    if step < warm {
        cfg.base_lr * step as f64 / warm as f64
    } else if step == warm {
        cfg.base_lr
    } else {
        cfg.base_lr * (total_steps - step) as f64 / (total_steps - warm) as f64
    }
}

pub fn lora_lr(base_lr: f64, rank: usize) -> f64 {
    (base_lr * rank as f64 / 8.0).min(LORA_LR_CAP)
}

#[derive(Debug, Clone)]
struct Moments<F> {
    m: Vec<F>,
    v: Vec<F>,
}

/// Adam moments for every trainable entry, created lazily on the first step.
#[derive(Debug, Clone)]
pub struct AdamW<F> {
    state: IndexMap<String, Moments<F>>,
    t: u64,
}

impl<F: Real> Default for AdamW<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> AdamW<F> {
    pub fn new() -> Self {
        AdamW {
            state: IndexMap::new(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update from the gradients currently in `params`. Decay is applied
    /// multiplicatively before the Adam step and only to entries tagged for it.
    pub fn step(&mut self, params: &mut ParameterStore<F>, lr: f64, cfg: &OptimConfig) {
        self.t += 1;
        let (b1, b2) = cfg.betas;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            if !p.trainable {
                continue;
            }
            let n = p.value.len();
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![F::ZERO; n],
                v: vec![F::ZERO; n],
            });
            let shrink = if p.decay { 1.0 - lr * cfg.weight_decay } else { 1.0 };
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for i in 0..n {
                let g = grad[i].to_f64();
                let m = b1 * st.m[i].to_f64() + (1.0 - b1) * g;
                let v = b2 * st.v[i].to_f64() + (1.0 - b2) * g * g;
                st.m[i] = F::from_f64(m);
                st.v[i] = F::from_f64(v);
                let update = (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
                value[i] = F::from_f64(value[i].to_f64() * shrink - lr * update);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::DenseArray;
    use approx::assert_relative_eq;

    fn scalar_store(theta: f64, decay: bool) -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        s.insert("theta", DenseArray::from_vec(&[1], vec![theta]).unwrap(), true, decay)
            .unwrap();
        s
    }

    fn theta(s: &ParameterStore<f64>) -> f64 {
        s.value("theta").unwrap().data()[0]
    }

    #[test]
    fn schedule_points() {
        let cfg = OptimConfig::transformer();
        assert_eq!(lr_at(0, 1000, &cfg), 0.0);
        assert_eq!(lr_at(100, 1000, &cfg), 1e-4);
        assert_relative_eq!(lr_at(550, 1000, &cfg), 5.0e-5, max_relative = 1e-12);
        assert_eq!(lr_at(1000, 1000, &cfg), 0.0);
        assert_relative_eq!(lr_at(50, 1000, &cfg), 5.0e-5, max_relative = 1e-12);
        assert_eq!(warmup_steps(1, 0.1), 1);
        assert_eq!(warmup_steps(30, 0.1), 3);
        assert_eq!(warmup_steps(1260, 0.1), 126);
        assert_eq!(warmup_steps(63, 0.1), 7);
        assert_eq!(warmup_steps(10, 0.0), 0);
        assert_eq!(lr_at(1, 1, &cfg), 1e-4);
    }

    #[test]
    fn schedule_is_piecewise_linear_with_peak_base() {
        let cfg = OptimConfig::transformer();
        for total in [1usize, 7, 63, 1260] {
            let lrs: Vec<f64> = (0..=total).map(|s| lr_at(s, total, &cfg)).collect();
            let peak = lrs.iter().cloned().fold(0.0, f64::max);
            assert_eq!(peak, cfg.base_lr);
            let max_jump = lrs.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);
            let warm = warmup_steps(total, cfg.warmup_frac);
            let up = cfg.base_lr / warm as f64;
            let down = if total > warm { cfg.base_lr / (total - warm) as f64 } else { 0.0 };
            assert!(max_jump <= up.max(down) * (1.0 + 1e-12), "total {total}");
        }
    }

    #[test]
    fn lora_lr_rule() {
        assert_relative_eq!(lora_lr(1e-4, 8), 1e-4, max_relative = 1e-15);
        assert_relative_eq!(lora_lr(1e-4, 64), 8e-4, max_relative = 1e-15);
        assert_eq!(lora_lr(1e-4, 256), 1e-3);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::transformer()
        };
        let mut s = scalar_store(1.0, true);
        s.get_mut("theta").unwrap().grad.data_mut()[0] = 1.0;
        let mut opt = AdamW::new();
        opt.step(&mut s, 0.1, &cfg);
        // m_hat = g and v_hat = g^2 on the first step
        assert_relative_eq!(theta(&s), 1.0 - 0.1 / (1.0 + 1e-8), max_relative = 1e-15);
        assert!(1.0 - theta(&s) <= 0.1);
    }

    #[test]
    fn pure_decay() {
        let cfg = OptimConfig {
            weight_decay: 0.1,
            ..OptimConfig::transformer()
        };
        let mut s = scalar_store(2.0, true);
        AdamW::new().step(&mut s, 0.1, &cfg);
        assert_relative_eq!(theta(&s), 2.0 * 0.99, max_relative = 1e-15);
        let mut exempt = scalar_store(2.0, false);
        AdamW::new().step(&mut exempt, 0.1, &cfg);
        assert_eq!(theta(&exempt), 2.0);
    }

    #[test]
    fn ten_step_scalar_trajectory() {
        // loss = theta^2 / 2, so the gradient is theta itself.
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::transformer()
        };
        let lr = 0.05;
        let mut s = scalar_store(1.0, true);
        let mut opt = AdamW::new();
        let (mut th, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=10 {
            let g = th;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            th -= lr * mh / (vh.sqrt() + 1e-8);

            let cur = theta(&s);
            s.get_mut("theta").unwrap().grad.data_mut()[0] = cur;
            opt.step(&mut s, lr, &cfg);
            assert!((theta(&s) - th).abs() <= 1e-10, "step {t}: {} vs {th}", theta(&s));
        }
        assert!(th < 1.0 && th > 0.4);
    }

    #[test]
    fn frozen_entries_untouched_and_runs_repeat() {
        let cfg = OptimConfig::transformer();
        let run = || {
            let mut s = scalar_store(0.5, true);
            s.insert("frozen", DenseArray::filled(&[2], 3.0), false, true).unwrap();
            let mut opt = AdamW::new();
            let mut traj = Vec::new();
            for i in 0..5 {
                let cur = theta(&s);
                s.get_mut("theta").unwrap().grad.data_mut()[0] = cur + i as f64;
                s.get_mut("frozen").unwrap().grad.data_mut()[0] = 1.0;
                opt.step(&mut s, 0.01, &cfg);
                traj.push(theta(&s));
            }
            assert_eq!(s.value("frozen").unwrap().data(), &[3.0, 3.0]);
            traj
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn presets() {
        let m = OptimConfig::mlp();
        assert_eq!((m.base_lr, m.weight_decay, m.batch_size, m.epochs), (1e-3, 0.0, 256, 50));
        assert_eq!(OptimConfig::regularized().weight_decay, 0.1);
        assert_eq!(OptimConfig::transformer().total_steps(4000), 20 * 63);
        let mut bad = OptimConfig::transformer();
        bad.warmup_frac = 1.0;
        assert!(bad.validate().is_err());
    }

    proptest::proptest! {
        #[test]
        fn schedule_stays_in_range(total in 1usize..5000, frac in 0.0f64..0.5, lr in 1e-6f64..1e-2) {
            let cfg = OptimConfig { base_lr: lr, warmup_frac: frac, ..OptimConfig::transformer() };
            let warm = warmup_steps(total, frac);
            proptest::prop_assert!(warm <= total);
            let mut prev = 0.0;
            for step in 0..=total {
                let v = lr_at(step, total, &cfg);
                proptest::prop_assert!((0.0..=lr * (1.0 + 1e-12)).contains(&v));
                if step <= warm {
                    proptest::prop_assert!(v >= prev);
                } else {
                    proptest::prop_assert!(v <= prev);
                }
                prev = v;
            }
            proptest::prop_assert_eq!(lr_at(total, total, &cfg), 0.0);
        }
    }
}
