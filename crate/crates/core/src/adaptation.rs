//! Overrun penalties and resolution downgrade.
//!
//! An overrun adds its excess to the queue's penalty and switches the queue
//! to half-resolution batches. Each downgraded job then pays the penalty
//! back with the time it saved against the original-shape plan; once the
//! penalty is non-positive the original shape is restored.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{QueueKey, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaptAction {
    None,
    Downgrade,
    Restore,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PenaltyState {
    pub penalty_us: i64,
    pub downgraded: bool,
    pub original_shape: Shape,
    pub downgraded_shape: Shape,
}

impl PenaltyState {
    pub fn new(original_shape: Shape) -> Self {
        Self {
            penalty_us: 0,
            downgraded: false,
            original_shape,
            downgraded_shape: original_shape.halved(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Adaptation {
    states: BTreeMap<QueueKey, PenaltyState>,
}

impl Adaptation {
    pub fn new() -> Self {
        Self::default()
    }

    /// Starts tracking `key`; a no-op if already tracked.
    pub fn track(&mut self, key: &QueueKey) {
        self.states
            .entry(key.clone())
            .or_insert_with(|| PenaltyState::new(key.category.shape));
    }

    pub fn state(&self, key: &QueueKey) -> Option<&PenaltyState> {
        self.states.get(key)
    }

    pub fn states(&self) -> impl Iterator<Item = (&QueueKey, &PenaltyState)> {
        self.states.iter()
    }

    /// True when no queue carries a penalty.
    pub fn is_settled(&self) -> bool {
        self.states
            .values()
            .all(|s| s.penalty_us == 0 && !s.downgraded)
    }

    /// Applies a completion outcome: a positive `delta_us` is an overrun
    /// excess, a negative one the saving of a downgraded job.
    pub fn on_completion(&mut self, key: &QueueKey, delta_us: i64) -> Result<AdaptAction> {
        let state = self
            .states
            .get_mut(key)
            .ok_or_else(|| Error::UnknownCategory(key.category.clone()))?;
        if delta_us > 0 {
            state.penalty_us += delta_us;
            if !state.downgraded {
                state.downgraded = true;
                return Ok(AdaptAction::Downgrade);
            }
            return Ok(AdaptAction::None);
        }
        if delta_us < 0 && state.downgraded {
            state.penalty_us += delta_us;
            if state.penalty_us <= 0 {
                state.penalty_us = 0;
                state.downgraded = false;
                return Ok(AdaptAction::Restore);
            }
        }
        Ok(AdaptAction::None)
    }

    /// Shape new batches of `key` should execute at.
    pub fn effective_shape(&self, key: &QueueKey) -> Shape {
        match self.states.get(key) {
            Some(s) if s.downgraded => s.downgraded_shape,
            Some(s) => s.original_shape,
            None => key.category.shape,
        }
    }
}
