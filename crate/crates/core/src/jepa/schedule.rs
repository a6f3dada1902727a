use core::f64::consts::PI;

use super::OptimizerConfig;

/// Learning rate at `step`: linear warmup from `init_lr` to `peak_lr`, then
/// cosine decay to zero at `total_steps`.
pub fn lr_schedule(step: u64, cfg: &OptimizerConfig) -> f64 {
    let warmup = cfg.warmup_steps;
    if step < warmup {
        let frac = step as f64 / warmup as f64;
        return cfg.init_lr + (cfg.peak_lr - cfg.init_lr) * frac;
    }
    let span = cfg.total_steps.saturating_sub(warmup);
    if span == 0 {
        return 0.0;
    }
    let frac = (step.min(cfg.total_steps) - warmup) as f64 / span as f64;
    0.5 * cfg.peak_lr * (1.0 + libm::cos(PI * frac))
}

/// EMA decay at `step`, rising from `tau_base` to 1 along a half cosine and
/// held at 1 past `total_steps`.
pub fn tau_schedule(step: u64, cfg: &OptimizerConfig) -> f64 {
    if cfg.total_steps == 0 {
        return 1.0;
    }
    let frac = step.min(cfg.total_steps) as f64 / cfg.total_steps as f64;
    1.0 - (1.0 - cfg.tau_base) * (libm::cos(PI * frac) + 1.0) / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * b.abs().max(1e-12)
    }

    #[test]
    fn lr_landmarks() {
        let cfg = OptimizerConfig::default();
        assert!(close(lr_schedule(0, &cfg), 1e-6));
        assert!(close(lr_schedule(500, &cfg), 1e-6 + 0.5 * (3e-4 - 1e-6)));
        assert!(close(lr_schedule(1000, &cfg), 3e-4));
        assert!(close(lr_schedule(50_500, &cfg), 1.5e-4));
        assert!(lr_schedule(100_000, &cfg).abs() < 1e-18);
        assert!(lr_schedule(200_000, &cfg).abs() < 1e-18);
    }

    #[test]
    fn lr_monotone_phases() {
        let cfg = OptimizerConfig::default();
        let mut prev = 0.0;
        for s in 0..=1000 {
            let lr = lr_schedule(s, &cfg);
            assert!(lr >= prev);
            prev = lr;
        }
        for s in (1000..=100_000).step_by(97) {
            let lr = lr_schedule(s, &cfg);
            assert!(lr <= prev + 1e-18);
            prev = lr;
        }
    }

    #[test]
    fn tau_landmarks() {
        let cfg = OptimizerConfig::default();
        assert!(close(tau_schedule(0, &cfg), 0.996));
        assert!(close(tau_schedule(50_000, &cfg), 0.998));
        assert_eq!(tau_schedule(100_000, &cfg), 1.0);
        assert_eq!(tau_schedule(150_000, &cfg), 1.0);
        let mut prev = 0.0;
        for s in (0..=100_000).step_by(101) {
            let t = tau_schedule(s, &cfg);
            assert!(t >= prev && t <= 1.0);
            prev = t;
        }
    }
}
