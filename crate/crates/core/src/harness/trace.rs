//! Seeded synthetic request traces.
//!
//! Generator: ChaCha8 seeded with `seed`. A uniform draw is
//! `((next_u64 >> 11) + 1) * 2^-53`, which lies in (0, 1]. Gamma draws with
//! an integer shape `k` are Erlang sums `theta * sum(-ln u_i)` over `k`
//! uniforms; other shapes fall back to `rand_distr::Gamma`.
//!
//! Per request, in order: raw period, raw deadline, category index
//! `floor(u * pool_len)`, non-real-time flag `u < nonrt_fraction`, then for
//! every request after the first the arrival gap. Raw periods and deadlines
//! are scaled separately so their sample means equal the configured means,
//! then rounded (periods at least 1 us, deadlines at least 2 us).

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::model::{Category, Duration, Request, Shape, Time};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ArrivalModel {
    Fixed { interval_us: Duration },
    Exponential { mean_us: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceConfig {
    pub seed: u64,
    pub num_requests: usize,
    pub mean_period_us: f64,
    pub mean_deadline_us: f64,
    pub gamma_shape: f64,
    pub gamma_scale: f64,
    pub arrival: ArrivalModel,
    pub categories: Vec<Category>,
    pub frames_per_request: u32,
    pub nonrt_fraction: f64,
    pub start_us: Time,
}

/// The six desktop models at 3x224x224.
pub fn default_pool() -> Vec<Category> {
    let shape = Shape::new(3, 224, 224).expect("valid shape");
    ["rn50", "rn101", "rn152", "vgg16", "vgg19", "inception"]
        .into_iter()
        .map(|m| Category::new(m, shape))
        .collect()
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_requests: 25,
            mean_period_us: 50_000.0,
            mean_deadline_us: 50_000.0,
            gamma_shape: 2.0,
            gamma_scale: 5.0,
            arrival: ArrivalModel::Exponential { mean_us: 1_000_000.0 },
            categories: default_pool(),
            frames_per_request: 200,
            nonrt_fraction: 0.0,
            start_us: 0,
        }
    }
}

impl TraceConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.mean_period_us.is_finite() && self.mean_period_us >= 1.0) {
            return bad("mean period must be at least 1 us");
        }
        if !(self.mean_deadline_us.is_finite() && self.mean_deadline_us >= 2.0) {
            return bad("mean deadline must be at least 2 us");
        }
        if !(self.gamma_shape > 0.0 && self.gamma_scale > 0.0) {
            return bad("gamma shape and scale must be positive");
        }
        if self.num_requests > 0 && self.categories.is_empty() {
            return bad("category pool is empty");
        }
        if self.frames_per_request == 0 {
            return bad("frames per request must be positive");
        }
        if !(0.0..=1.0).contains(&self.nonrt_fraction) {
            return bad("non-real-time fraction must lie in [0, 1]");
        }
        if let ArrivalModel::Exponential { mean_us } = self.arrival {
            if !(mean_us.is_finite() && mean_us >= 0.0) {
                return bad("arrival mean must be non-negative");
            }
        }
        Ok(())
    }
}

/// Uniform and Gamma draws in the documented order.
pub struct TraceRng {
    rng: ChaCha8Rng,
}

impl TraceRng {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform in (0, 1].
    pub fn uniform(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn gamma(&mut self, shape: f64, scale: f64) -> f64 {
        if shape.fract() == 0.0 && shape <= 64.0 {
            let k = shape as u32;
            scale * (0..k).map(|_| -self.uniform().ln()).sum::<f64>()
        } else {
            Gamma::new(shape, scale)
                .expect("validated parameters")
                .sample(&mut self.rng)
        }
    }

    pub fn exponential(&mut self, mean: f64) -> f64 {
        -mean * self.uniform().ln()
    }
}

/// Raw (unscaled) draws of one request.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawDraw {
    pub period: f64,
    pub deadline: f64,
    pub category: usize,
    pub real_time: bool,
    pub gap_us: Duration,
}

pub fn raw_draws(config: &TraceConfig) -> Vec<RawDraw> {
    let mut rng = TraceRng::new(config.seed);
    (0..config.num_requests)
        .map(|i| {
            let period = rng.gamma(config.gamma_shape, config.gamma_scale);
            let deadline = rng.gamma(config.gamma_shape, config.gamma_scale);
            let len = config.categories.len();
            let category = ((rng.uniform() * len as f64) as usize).min(len - 1);
            let real_time = rng.uniform() >= config.nonrt_fraction;
            let gap_us = if i == 0 {
                0
            } else {
                match config.arrival {
                    ArrivalModel::Fixed { interval_us } => interval_us,
                    ArrivalModel::Exponential { mean_us } => rng.exponential(mean_us).round() as u64,
                }
            };
            RawDraw {
                period,
                deadline,
                category,
                real_time,
                gap_us,
            }
        })
        .collect()
}

pub fn gen_trace(config: &TraceConfig) -> Result<Vec<Request>> {
    config.validate()?;
    let draws = raw_draws(config);
    if draws.is_empty() {
        return Ok(Vec::new());
    }
    let n = draws.len() as f64;
    let period_scale = config.mean_period_us / (draws.iter().map(|d| d.period).sum::<f64>() / n);
    let deadline_scale =
        config.mean_deadline_us / (draws.iter().map(|d| d.deadline).sum::<f64>() / n);
    let mut arrival = config.start_us;
    Ok(draws
        .iter()
        .enumerate()
        .map(|(i, d)| {
            arrival += d.gap_us;
            Request {
                id: i as u64,
                category: config.categories[d.category].clone(),
                period_us: ((d.period * period_scale).round() as u64).max(1),
                relative_deadline_us: ((d.deadline * deadline_scale).round() as u64).max(2),
                num_frames: config.frames_per_request,
                first_release_us: arrival,
                real_time: d.real_time,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_trace() {
        let c = TraceConfig {
            seed: 7,
            ..TraceConfig::default()
        };
        assert_eq!(gen_trace(&c).unwrap(), gen_trace(&c).unwrap());
    }

    #[test]
    fn scaled_means_match() {
        let c = TraceConfig {
            seed: 3,
            num_requests: 25,
            mean_period_us: 50_000.0,
            mean_deadline_us: 150_000.0,
            ..TraceConfig::default()
        };
        let t = gen_trace(&c).unwrap();
        let mp = t.iter().map(|r| r.period_us as f64).sum::<f64>() / 25.0;
        let md = t.iter().map(|r| r.relative_deadline_us as f64).sum::<f64>() / 25.0;
        assert!((mp / 50_000.0 - 1.0).abs() < 0.01);
        assert!((md / 150_000.0 - 1.0).abs() < 0.01);
    }

    #[test]
    fn raw_gamma_mean_is_k_theta() {
        let mut rng = TraceRng::new(11);
        let n = 200_000;
        let mean = (0..n).map(|_| rng.gamma(2.0, 5.0)).sum::<f64>() / n as f64;
        assert!((mean - 10.0).abs() < 0.1, "{mean}");
    }

    #[test]
    fn non_integer_shape_mean() {
        let mut rng = TraceRng::new(5);
        let n = 200_000;
        let mean = (0..n).map(|_| rng.gamma(1.5, 2.0)).sum::<f64>() / n as f64;
        assert!((mean - 3.0).abs() < 0.05, "{mean}");
    }

    #[test]
    fn empty_trace() {
        let c = TraceConfig {
            num_requests: 0,
            ..TraceConfig::default()
        };
        assert!(gen_trace(&c).unwrap().is_empty());
    }

    #[test]
    fn fixed_arrivals() {
        let c = TraceConfig {
            num_requests: 3,
            arrival: ArrivalModel::Fixed { interval_us: 1_000 },
            start_us: 10,
            ..TraceConfig::default()
        };
        let t = gen_trace(&c).unwrap();
        let arrivals: Vec<_> = t.iter().map(|r| r.first_release_us).collect();
        assert_eq!(arrivals, vec![10, 1_010, 2_010]);
    }

    #[test]
    fn rejects_bad_config() {
        let c = TraceConfig {
            nonrt_fraction: 1.5,
            ..TraceConfig::default()
        };
        assert!(matches!(gen_trace(&c), Err(Error::InvalidConfig(_))));
    }
}
