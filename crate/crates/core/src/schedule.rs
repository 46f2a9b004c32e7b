//! Per-token sampling temperatures.
//!
//! An [`AnnealSchedule`] starts each rollout at `tau_max` and cools
//! exponentially toward a floor `tau_min`:
//!
//! ```text
//! tau(t) = 1.0                                    if t < c
//! tau(t) = max(1 + tau_max - exp(t' / d), tau_min) otherwise
//! ```
//!
//! where `t'` is the annealing position (`t - c` by default, see
//! [`AnnealOrigin`]) and `d` is the decay rate for the current optimizer
//! step, `d_s = min(d0 + step_slope * s, d_cap)`. Because `exp(0) = 1`,
//! `tau_max` is the literal temperature of the first annealed token.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_STEP_SLOPE: f64 = 5.0;
pub const DEFAULT_DECAY_CAP: f64 = 40_000.0;

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("temperature must be finite and > 0, got {0}")]
    NonPositiveTemperature(f64),
    #[error("tau_min ({tau_min}) exceeds tau_max ({tau_max})")]
    InvertedBounds { tau_min: f64, tau_max: f64 },
    #[error("initial decay rate must be >= 1, got {0}")]
    DecayTooSmall(f64),
    #[error("step slope must be finite and >= 0, got {0}")]
    BadSlope(f64),
    #[error("decay cap ({cap}) must be >= d0 ({d0})")]
    BadCap { cap: f64, d0: f64 },
}

/// Where the exponential clock starts counting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnealOrigin {
    /// `t' = t - c`: the decay starts fresh at `tau_max` once warm-up ends.
    #[default]
    AtC,
    /// `t' = t`: the warm-up window eats into the decay.
    AtZero,
}

fn default_slope() -> f64 {
    DEFAULT_STEP_SLOPE
}

fn default_cap() -> f64 {
    DEFAULT_DECAY_CAP
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub tau_max: f64,
    pub tau_min: f64,
    /// Decay rate at optimizer step 0, in tokens.
    pub d0: f64,
    /// Number of leading generated tokens sampled at exactly 1.0.
    #[serde(default)]
    pub c: usize,
    #[serde(default = "default_slope")]
    pub step_slope: f64,
    #[serde(default = "default_cap")]
    pub d_cap: f64,
    #[serde(default)]
    pub anneal_origin: AnnealOrigin,
}

impl AnnealSchedule {
    pub fn new(tau_max: f64, tau_min: f64, d0: f64, c: usize) -> Result<Self, ScheduleError> {
        let sched = Self {
            tau_max,
            tau_min,
            d0,
            c,
            step_slope: DEFAULT_STEP_SLOPE,
            d_cap: DEFAULT_DECAY_CAP,
            anneal_origin: AnnealOrigin::AtC,
        };
        sched.validate()?;
        Ok(sched)
    }

    pub fn with_origin(mut self, origin: AnnealOrigin) -> Self {
        self.anneal_origin = origin;
        self
    }

    pub fn with_step_law(mut self, step_slope: f64, d_cap: f64) -> Result<Self, ScheduleError> {
        self.step_slope = step_slope;
        self.d_cap = d_cap;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        for tau in [self.tau_max, self.tau_min] {
            if !(tau.is_finite() && tau > 0.0) {
                return Err(ScheduleError::NonPositiveTemperature(tau));
            }
        }
        if self.tau_min > self.tau_max {
            return Err(ScheduleError::InvertedBounds {
                tau_min: self.tau_min,
                tau_max: self.tau_max,
            });
        }
        if !(self.d0 >= 1.0 && self.d0.is_finite()) {
            return Err(ScheduleError::DecayTooSmall(self.d0));
        }
        if !(self.step_slope >= 0.0 && self.step_slope.is_finite()) {
            return Err(ScheduleError::BadSlope(self.step_slope));
        }
        if !(self.d_cap >= self.d0) {
            return Err(ScheduleError::BadCap {
                cap: self.d_cap,
                d0: self.d0,
            });
        }
        Ok(())
    }

    /// `d_s = min(d0 + step_slope * s, d_cap)`.
    pub fn decay_rate(&self, step: u64) -> f64 {
        (self.d0 + self.step_slope * step as f64).min(self.d_cap)
    }

    pub fn temperature_at(&self, t: usize, d: f64) -> f64 {
        if t < self.c {
            return 1.0;
        }
        let pos = match self.anneal_origin {
            AnnealOrigin::AtC => (t - self.c) as f64,
            AnnealOrigin::AtZero => t as f64,
        };
        (self.tau_max + (1.0 - (pos / d).exp())).max(self.tau_min)
    }

    /// First annealing position at which the floor binds, `d * ln(1 + tau_max - tau_min)`.
    pub fn floor_position(&self, d: f64) -> f64 {
        d * (1.0 + self.tau_max - self.tau_min).ln()
    }

    /// Annealing position where the temperature drops through 1.0, `d * ln(tau_max)`.
    /// Zero when `tau_max <= 1`.
    pub fn unit_crossing(&self, d: f64) -> f64 {
        d * self.tau_max.ln().max(0.0)
    }

    pub fn trace(&self, d: f64, horizon: usize) -> Vec<f64> {
        (0..horizon).map(|t| self.temperature_at(t, d)).collect()
    }
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self {
            tau_max: 1.2,
            tau_min: 0.1,
            d0: 25.0,
            c: 0,
            step_slope: DEFAULT_STEP_SLOPE,
            d_cap: DEFAULT_DECAY_CAP,
            anneal_origin: AnnealOrigin::AtC,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedSchedule {
    pub tau: f64,
}

impl FixedSchedule {
    pub fn new(tau: f64) -> Result<Self, ScheduleError> {
        if !(tau.is_finite() && tau > 0.0) {
            return Err(ScheduleError::NonPositiveTemperature(tau));
        }
        Ok(Self { tau })
    }
}

/// Either an annealed or a fixed-temperature decoding policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Annealed(AnnealSchedule),
    Fixed(FixedSchedule),
}

impl Schedule {
    pub fn fixed(tau: f64) -> Result<Self, ScheduleError> {
        FixedSchedule::new(tau).map(Schedule::Fixed)
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        match self {
            Schedule::Annealed(s) => s.validate(),
            Schedule::Fixed(f) => FixedSchedule::new(f.tau).map(|_| ()),
        }
    }

    /// Decay rate for optimizer step `step`. Fixed schedules ignore it; 1.0 is returned.
    pub fn decay_rate(&self, step: u64) -> f64 {
        match self {
            Schedule::Annealed(s) => s.decay_rate(step),
            Schedule::Fixed(_) => 1.0,
        }
    }

    pub fn temperature_at(&self, t: usize, d: f64) -> f64 {
        match self {
            Schedule::Annealed(s) => s.temperature_at(t, d),
            Schedule::Fixed(f) => f.tau,
        }
    }

    pub fn trace(&self, d: f64, horizon: usize) -> Vec<f64> {
        (0..horizon).map(|t| self.temperature_at(t, d)).collect()
    }

    pub fn is_unit(&self) -> bool {
        matches!(self, Schedule::Fixed(f) if f.tau == 1.0)
    }

    /// Short label used in tables, e.g. `ead` or `tau=0.6`.
    pub fn label(&self) -> String {
        match self {
            Schedule::Annealed(_) => "ead".to_string(),
            Schedule::Fixed(f) => format!("tau={}", f.tau),
        }
    }
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::Annealed(AnnealSchedule::default())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fig5() -> AnnealSchedule {
        AnnealSchedule::new(1.2, 0.1, 25.0, 10).unwrap()
    }

    #[test]
    fn decay_rate_examples() {
        let s = AnnealSchedule::new(1.2, 0.1, 25.0, 0).unwrap();
        assert_eq!(s.decay_rate(0), 25.0);
        assert_eq!(s.decay_rate(10), 75.0);
        assert_eq!(s.decay_rate(1_000_000), 40_000.0);
    }

    #[test]
    fn temperature_examples() {
        let s = AnnealSchedule::new(1.2, 0.1, 25.0, 0).unwrap();
        assert_eq!(s.temperature_at(0, 25.0), 1.2);
        // 1 + 1.2 - e^4 is far below the floor
        assert!(1.0 + 1.2 - 4.0f64.exp() < 0.1);
        assert_eq!(s.temperature_at(100, 25.0), 0.1);
        assert_eq!(fig5().temperature_at(5, 25.0), 1.0);
    }

    #[test]
    fn floor_crossing_is_at_d_ln_2_1() {
        let s = AnnealSchedule::new(1.2, 0.1, 25.0, 0).unwrap();
        let cross = s.floor_position(25.0);
        assert!((cross - 25.0 * 2.1f64.ln()).abs() < 1e-12);
        assert!((cross - 18.548).abs() < 1e-3);
        assert!(s.temperature_at(18, 25.0) > 0.1);
        assert_eq!(s.temperature_at(19, 25.0), 0.1);
    }

    #[test]
    fn trace_examples() {
        let s = AnnealSchedule::new(1.2, 0.1, 25.0, 0).unwrap();
        assert_eq!(s.trace(25.0, 1), vec![1.2]);
        let tr = fig5().trace(25.0, 12);
        assert!(tr[..10].iter().all(|&t| t == 1.0));
        assert_eq!(tr[10], 1.2);
        assert!(tr[11] < 1.2);
    }

    #[test]
    fn origin_at_zero_resumes_mid_decay() {
        let s = fig5().with_origin(AnnealOrigin::AtZero);
        let expected = 1.0 + 1.2 - (10.0f64 / 25.0).exp();
        assert!((s.temperature_at(10, 25.0) - expected).abs() < 1e-15);
        assert_eq!(s.temperature_at(9, 25.0), 1.0);
    }

    #[test]
    fn rejects_invalid_parameters() {
        assert!(matches!(
            AnnealSchedule::new(1.2, 0.0, 25.0, 0),
            Err(ScheduleError::NonPositiveTemperature(_))
        ));
        assert!(matches!(
            AnnealSchedule::new(0.5, 0.6, 25.0, 0),
            Err(ScheduleError::InvertedBounds { .. })
        ));
        assert!(matches!(
            AnnealSchedule::new(1.2, 0.1, 0.5, 0),
            Err(ScheduleError::DecayTooSmall(_))
        ));
        assert!(FixedSchedule::new(0.0).is_err());
        assert!(FixedSchedule::new(f64::NAN).is_err());
    }

    #[test]
    fn schedule_serde_round_trip() {
        let s = Schedule::Annealed(fig5());
        let json = serde_json::to_string(&s).unwrap();
        assert!(json.contains("\"kind\":\"annealed\""));
        let back: Schedule = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
        // step law fields default when omitted
        let minimal: Schedule =
            serde_json::from_str(r#"{"kind":"annealed","tau_max":1.2,"tau_min":0.1,"d0":25}"#)
                .unwrap();
        assert_eq!(minimal.decay_rate(7), 60.0);
    }

    proptest! {
        #[test]
        fn non_increasing_after_warmup(
            tau_max in 0.5f64..3.0,
            frac in 0.01f64..1.0,
            d0 in 1.0f64..200.0,
            c in 0usize..20,
        ) {
            let s = AnnealSchedule::new(tau_max, tau_max * frac, d0, c).unwrap();
            let tr = s.trace(d0, c + 400);
            for w in tr[c..].windows(2) {
                prop_assert!(w[1] <= w[0]);
            }
            for &t in &tr[c..] {
                prop_assert!(t >= s.tau_min && t <= tau_max);
            }
            // warm-up pins 1.0 even when the floor sits above it
            for &t in &tr[..c] {
                prop_assert_eq!(t, 1.0);
            }
        }

        #[test]
        fn larger_decay_is_pointwise_warmer(
            d_small in 1.0f64..100.0,
            extra in 0.0f64..1000.0,
            t in 0usize..500,
        ) {
            let s = AnnealSchedule::new(1.2, 0.1, 1.0, 0).unwrap();
            prop_assert!(s.temperature_at(t, d_small + extra) >= s.temperature_at(t, d_small));
        }

        #[test]
        fn decay_rate_monotone_and_capped(d0 in 1.0f64..1000.0, s in 0u64..100_000) {
            let sched = AnnealSchedule::new(1.2, 0.1, d0, 0).unwrap();
            prop_assert!(sched.decay_rate(s + 1) >= sched.decay_rate(s));
            prop_assert!(sched.decay_rate(s) <= DEFAULT_DECAY_CAP);
        }
    }
}
