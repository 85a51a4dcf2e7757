use super::TrainConfig;

/// Linear warm-up to `base_lr`, then polynomial decay to zero at `max_iters`.
pub fn poly_lr(iter: usize, cfg: &TrainConfig) -> f64 {
    let (warm, max) = (cfg.warmup_iters, cfg.max_iters);
    if iter < warm {
        return cfg.base_lr * iter as f64 / warm as f64;
    }
    if iter >= max {
        return 0.0;
    }
    let frac = (iter - warm) as f64 / (max - warm) as f64;
    cfg.base_lr * (1.0 - frac).powf(cfg.poly_power)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(warm: usize, max: usize) -> TrainConfig {
        TrainConfig {
            warmup_iters: warm,
            max_iters: max,
            ..Default::default()
        }
    }

    #[test]
    fn anchor_points() {
        let c = cfg(100, 2100);
        assert_eq!(poly_lr(0, &c), 0.0);
        assert_eq!(poly_lr(50, &c), 0.005);
        assert_eq!(poly_lr(100, &c), 0.01);
        assert_eq!(poly_lr(2100, &c), 0.0);
        // 0.5^0.9 = exp(0.9 ln 0.5)
        let half = (-0.9 * std::f64::consts::LN_2).exp();
        assert!((poly_lr(1100, &c) - 0.01 * half).abs() < 1e-15);
        assert!((half - 0.535887).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn continuous_then_non_increasing(warm in 1usize..50, span in 2usize..500, it in 0usize..600) {
            let c = cfg(warm, warm + span);
            let lr = poly_lr(it, &c);
            prop_assert!((0.0..=c.base_lr).contains(&lr));
            if it >= warm {
                prop_assert!(poly_lr(it + 1, &c) <= lr);
            }
            let before = poly_lr(warm - 1, &c);
            prop_assert!((poly_lr(warm, &c) - before) <= c.base_lr / warm as f64 + 1e-15);
        }
    }
}
