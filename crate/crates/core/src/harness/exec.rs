//! Execution-time models beyond the profiled WCET.

use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::edf::ExecModel;
use crate::error::{Error, Result};
use crate::model::{Duration, JobInstance};

/// Adds `extra_us` to `count` consecutive jobs starting at dispatch index `start`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Injection {
    pub start: u64,
    pub count: u64,
    pub extra_us: Duration,
}

impl Injection {
    pub fn covers(&self, index: u64) -> bool {
        index >= self.start && index - self.start < self.count
    }
}

/// Parses `start:count:extra_us`.
impl FromStr for Injection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<_> = s.split(':').collect();
        let bad = || Error::InvalidConfig(format!("injection {s:?} is not start:count:extra_us"));
        let [start, count, extra] = parts.as_slice() else {
            return Err(bad());
        };
        Ok(Self {
            start: start.trim().parse().map_err(|_| bad())?,
            count: count.trim().parse().map_err(|_| bad())?,
            extra_us: extra.trim().parse().map_err(|_| bad())?,
        })
    }
}

/// Wraps another model and applies an [`Injection`].
pub struct InjectOverruns<M> {
    pub inner: M,
    pub injection: Injection,
}

pub fn inject_overruns<M: ExecModel>(inner: M, injection: Injection) -> InjectOverruns<M> {
    InjectOverruns { inner, injection }
}

impl<M: ExecModel> ExecModel for InjectOverruns<M> {
    fn exec_time(&mut self, job: &JobInstance, index: u64) -> Duration {
        let base = self.inner.exec_time(job, index);
        if self.injection.covers(index) {
            base + self.injection.extra_us
        } else {
            base
        }
    }
}

/// Scales each WCET by a uniform factor in `[1 - below, 1]`: jobs finish at
/// or before their profiled bound.
pub struct Jitter {
    rng: ChaCha8Rng,
    below: f64,
}

impl Jitter {
    pub fn new(seed: u64, below: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&below) {
            return Err(Error::InvalidConfig(format!("jitter fraction {below} outside [0, 1]")));
        }
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            below,
        })
    }
}

impl ExecModel for Jitter {
    fn exec_time(&mut self, job: &JobInstance, _index: u64) -> Duration {
        let u = (self.rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        let cut = (job.wcet_us as f64 * self.below * u) as u64;
        job.wcet_us - cut.min(job.wcet_us)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edf::ProfiledExec;
    use crate::model::{Category, QueueKey, Shape};

    fn job(wcet: u64) -> JobInstance {
        let shape = Shape::new(3, 8, 8).unwrap();
        JobInstance {
            id: 0,
            key: QueueKey::new(Category::new("m", shape), true),
            frames: Vec::new(),
            release_us: 0,
            relative_deadline_us: 10,
            wcet_us: wcet,
            planned_wcet_us: wcet,
            exec_shape: shape,
        }
    }

    #[test]
    fn parses_injection() {
        let i: Injection = "10:5:100000".parse().unwrap();
        assert_eq!(
            i,
            Injection {
                start: 10,
                count: 5,
                extra_us: 100_000
            }
        );
        assert!("10:5".parse::<Injection>().is_err());
        assert!("a:5:1".parse::<Injection>().is_err());
    }

    #[test]
    fn exactly_the_window_is_injected() {
        let mut m = inject_overruns(ProfiledExec, "10:5:100000".parse().unwrap());
        let extra: Vec<_> = (0..20).map(|i| m.exec_time(&job(1_000), i) - 1_000).collect();
        let hit: Vec<_> = (0..20).filter(|&i| extra[i as usize] == 100_000).collect();
        assert_eq!(hit, vec![10, 11, 12, 13, 14]);
        assert_eq!(extra.iter().filter(|&&e| e == 0).count(), 15);
    }

    #[test]
    fn zero_extra_is_identity() {
        let mut m = inject_overruns(ProfiledExec, "0:5:0".parse().unwrap());
        assert!((0..10).all(|i| m.exec_time(&job(700), i) == 700));
    }

    #[test]
    fn jitter_stays_under_wcet() {
        let mut j = Jitter::new(1, 0.2).unwrap();
        for i in 0..1_000 {
            let t = j.exec_time(&job(10_000), i);
            assert!((8_000..=10_000).contains(&t));
        }
    }
}
