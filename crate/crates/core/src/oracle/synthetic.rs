use serde::{Deserialize, Serialize};

use super::QoRRecord;
use crate::flowspace::Flow;
use crate::hashing::{mix_all, unit_symmetric};

/// Lower clamp applied to every surrogate metric.
pub const METRIC_FLOOR: f64 = 1e-6;

/// Deterministic order-dependent QoR surrogate.
///
/// Each metric is `base + sum_j w(pass_j, j) + sum_j u(pass_{j-k}, pass_j) + noise(flow)`:
/// per-(pass, position) weights, pairwise terms between steps `k` apart, and a
/// hash of the whole flow. Every term is derived from `seed`; delay and area
/// use independent weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticOracleConfig {
    pub seed: u64,
    pub base_delay: f64,
    pub base_area: f64,
    /// Half-width of the uniform per-(pass, position) weights.
    pub position_scale: f64,
    /// Lag `k` between the two steps of an interaction term.
    pub interaction_lag: usize,
    /// Half-width of the uniform pairwise interaction weights.
    pub interaction_scale: f64,
    /// Half-width of the per-flow hash noise.
    pub noise_amplitude: f64,
}

impl Default for SyntheticOracleConfig {
    fn default() -> Self {
        SyntheticOracleConfig {
            seed: 42,
            base_delay: 1000.0,
            base_area: 5000.0,
            position_scale: 10.0,
            interaction_lag: 2,
            interaction_scale: 10.0,
            noise_amplitude: 1.0,
        }
    }
}

#[derive(Clone, Copy)]
enum Channel {
    Delay = 1,
    Area = 2,
}

const POSITION: u64 = 0x10;
const INTERACTION: u64 = 0x20;
const NOISE: u64 = 0x30;

impl SyntheticOracleConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.interaction_lag == 0 {
            return Err("interaction_lag must be at least 1".into());
        }
        for (name, v) in [
            ("position_scale", self.position_scale),
            ("interaction_scale", self.interaction_scale),
            ("noise_amplitude", self.noise_amplitude),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(format!("{name} must be finite and non-negative"));
            }
        }
        if !(self.base_delay.is_finite() && self.base_area.is_finite()) {
            return Err("base values must be finite".into());
        }
        Ok(())
    }

    fn position_weight(&self, channel: Channel, pass: u16, position: usize) -> f64 {
        let h = mix_all([
            self.seed,
            channel as u64 | POSITION,
            u64::from(pass),
            position as u64,
        ]);
        self.position_scale * unit_symmetric(h)
    }

    fn interaction_weight(&self, channel: Channel, earlier: u16, later: u16) -> f64 {
        let h = mix_all([
            self.seed,
            channel as u64 | INTERACTION,
            u64::from(earlier),
            u64::from(later),
        ]);
        self.interaction_scale * unit_symmetric(h)
    }

    fn noise(&self, channel: Channel, flow: &Flow) -> f64 {
        if self.noise_amplitude == 0.0 {
            return 0.0;
        }
        let h = mix_all(
            [self.seed, channel as u64 | NOISE]
                .into_iter()
                .chain(flow.steps().iter().map(|&s| u64::from(s))),
        );
        self.noise_amplitude * unit_symmetric(h)
    }

    fn metric(&self, channel: Channel, base: f64, flow: &Flow) -> f64 {
        let steps = flow.steps();
        let mut value = steps
            .iter()
            .enumerate()
            .fold(base, |acc, (j, &p)| acc + self.position_weight(channel, p, j));
        if self.interaction_scale != 0.0 {
            value = steps
                .iter()
                .zip(steps.iter().skip(self.interaction_lag))
                .fold(value, |acc, (&a, &b)| acc + self.interaction_weight(channel, a, b));
        }
        (value + self.noise(channel, flow)).max(METRIC_FLOOR)
    }

    /// Delay contribution of `pass` at step `position`.
    pub fn delay_position_weight(&self, pass: u16, position: usize) -> f64 {
        self.position_weight(Channel::Delay, pass, position)
    }

    /// Area contribution of `pass` at step `position`.
    pub fn area_position_weight(&self, pass: u16, position: usize) -> f64 {
        self.position_weight(Channel::Area, pass, position)
    }
}

pub fn evaluate_synthetic(flow: &Flow, cfg: &SyntheticOracleConfig) -> QoRRecord {
    QoRRecord {
        delay: cfg.metric(Channel::Delay, cfg.base_delay, flow),
        area: cfg.metric(Channel::Area, cfg.base_area, flow),
        extras: Default::default(),
    }
}
