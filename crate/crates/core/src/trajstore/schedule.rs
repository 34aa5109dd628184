use std::fmt;

use rand::Rng;

use crate::{Error, Result};

/// Start-epoch window `[lower, T(it)]` whose upper bound floats from
/// `initial` to `upper`, one epoch every `interval` iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchingRangeSchedule {
    pub lower: usize,
    pub initial: usize,
    pub upper: usize,
    pub interval: usize,
}

impl MatchingRangeSchedule {
    pub fn new(lower: usize, initial: usize, upper: usize, interval: usize) -> Self {
        Self {
            lower,
            initial,
            upper,
            interval,
        }
    }

    /// Check `lower ≤ initial ≤ upper ≤ epochs − m` and `interval ≥ 1`.
    pub fn validate(&self, epochs: usize, m: usize) -> Result<()> {
        if self.interval == 0 {
            return Err(Error::Validation("schedule interval must be ≥ 1".into()));
        }
        if !(self.lower <= self.initial && self.initial <= self.upper) {
            return Err(Error::Validation(format!(
                "matching range needs T- ≤ T_init ≤ T+, got {self}"
            )));
        }
        if self.upper + m > epochs {
            return Err(Error::Validation(format!(
                "T+ + M = {} + {m} exceeds the {epochs} expert epochs",
                self.upper
            )));
        }
        Ok(())
    }

    /// `min(initial + ⌊it / interval⌋, upper)`.
    pub fn bound(&self, iteration: usize) -> usize {
        self.initial
            .saturating_add(iteration / self.interval.max(1))
            .min(self.upper)
    }

    /// Uniform draw from `lower ..= bound(iteration)`.
    pub fn sample_start<R: Rng + ?Sized>(&self, iteration: usize, rng: &mut R) -> usize {
        rng.random_range(self.lower..=self.bound(iteration))
    }
}

impl fmt::Display for MatchingRangeSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.lower, self.initial, self.upper)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::rng_from;

    #[test]
    fn bound_follows_interval_rule() {
        let s = MatchingRangeSchedule::new(0, 15, 20, 100);
        assert_eq!(s.bound(0), 15);
        assert_eq!(s.bound(99), 15);
        assert_eq!(s.bound(100), 16);
        assert_eq!(s.bound(500), 20);
        assert_eq!(s.bound(600), 20);
        assert_eq!(s.bound(usize::MAX), 20);
    }

    #[test]
    fn degenerate_range_is_constant() {
        let s = MatchingRangeSchedule::new(5, 5, 5, 1);
        let mut rng = rng_from(0);
        assert!((0..1000).all(|it| s.sample_start(it, &mut rng) == 5));
    }

    #[test]
    fn starting_window_is_uniform_within_three_sigma() {
        let s = MatchingRangeSchedule::new(0, 15, 20, 100);
        let mut rng = rng_from(42);
        let draws = 100_000;
        let mut counts = [0usize; 21];
        for _ in 0..draws {
            counts[s.sample_start(0, &mut rng)] += 1;
        }
        assert!(counts[16..].iter().all(|&c| c == 0));
        let p = 1.0 / 16.0;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for &c in &counts[..16] {
            assert!((c as f64 - draws as f64 * p).abs() <= 3.0 * sigma, "count {c}");
        }
    }

    #[test]
    fn validation() {
        assert!(MatchingRangeSchedule::new(0, 15, 20, 100).validate(40, 2).is_ok());
        assert!(MatchingRangeSchedule::new(0, 30, 20, 100).validate(40, 2).is_err());
        assert!(MatchingRangeSchedule::new(0, 15, 39, 100).validate(40, 2).is_err());
        assert!(MatchingRangeSchedule::new(0, 15, 20, 0).validate(40, 2).is_err());
        assert!(MatchingRangeSchedule::new(3, 2, 20, 1).validate(40, 2).is_err());
    }
}
