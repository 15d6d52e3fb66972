/// Geometric interpolation from `initial` to `final_` over `anneal_steps`,
/// held at `final_` afterwards.
pub fn anneal_schedule(step: usize, initial: f64, final_: f64, anneal_steps: usize) -> f64 {
    if anneal_steps == 0 || step >= anneal_steps {
        return final_;
    }
    let frac = step as f64 / anneal_steps as f64;
    initial * (final_ / initial).powf(frac)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        assert_eq!(anneal_schedule(0, 1.0, 0.1, 1500), 1.0);
        assert_eq!(anneal_schedule(1500, 1.0, 0.1, 1500), 0.1);
        assert_eq!(anneal_schedule(4000, 1.0, 0.1, 1500), 0.1);
        assert!((anneal_schedule(750, 1.0, 0.1, 1500) - 0.1f64.sqrt()).abs() < 1e-12);
        assert!((0.1f64.sqrt() - 0.316228).abs() < 5e-7);
    }

    #[test]
    fn constant_when_endpoints_agree() {
        for s in [0, 3, 10] {
            assert_eq!(anneal_schedule(s, 1.0, 1.0, 10), 1.0);
        }
    }
}
