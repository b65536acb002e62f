//! Wall-clock budget with an aggregator reserve and injectable clocks.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::agents::BudgetView;

pub const MIN_AGGREGATOR_RESERVE: Duration = Duration::from_secs(60);
pub const RESERVE_FRACTION: f64 = 0.05;

/// Elapsed time since an arbitrary origin.
pub trait Clock: Send + Sync {
    fn now(&self) -> Duration;
}

pub struct SystemClock {
    origin: Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        Self { origin: Instant::now() }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }
}

/// Manually driven clock for tests. It may be set backwards; budget views
/// stay monotone regardless.
#[derive(Default)]
pub struct FakeClock {
    now: Mutex<Duration>,
}

impl FakeClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn advance(&self, by: Duration) {
        *self.now.lock().expect("clock poisoned") += by;
    }

    pub fn set(&self, to: Duration) {
        *self.now.lock().expect("clock poisoned") = to;
    }
}

impl Clock for FakeClock {
    fn now(&self) -> Duration {
        *self.now.lock().expect("clock poisoned")
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BudgetError {
    #[error("{0} must be positive")]
    NotPositive(&'static str),
    #[error("aggregator reserve {reserve:?} must be shorter than the wall-clock budget {wall_clock:?}")]
    ReserveTooLarge { reserve: Duration, wall_clock: Duration },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunBudget {
    #[serde(with = "crate::llm::secs_f64")]
    pub wall_clock: Duration,
    #[serde(with = "crate::llm::secs_f64")]
    pub aggregator_reserve: Duration,
    /// Ceiling for a single execute call; calls are further cut to the
    /// phase's remaining time.
    #[serde(with = "crate::llm::secs_f64")]
    pub per_execute_timeout: Duration,
}

/// `max(5% of budget, 60s)`, or a quarter of the budget when that default
/// would swallow the whole budget.
pub fn default_reserve(wall_clock: Duration) -> Duration {
    let reserve = wall_clock.mul_f64(RESERVE_FRACTION).max(MIN_AGGREGATOR_RESERVE);
    if reserve >= wall_clock {
        wall_clock / 4
    } else {
        reserve
    }
}

impl RunBudget {
    pub fn new(
        wall_clock: Duration,
        aggregator_reserve: Option<Duration>,
        per_execute_timeout: Duration,
    ) -> Result<Self, BudgetError> {
        let budget = Self {
            wall_clock,
            aggregator_reserve: aggregator_reserve.unwrap_or_else(|| default_reserve(wall_clock)),
            per_execute_timeout,
        };
        budget.validate()?;
        Ok(budget)
    }

    pub fn validate(&self) -> Result<(), BudgetError> {
        if self.wall_clock.is_zero() {
            return Err(BudgetError::NotPositive("wall-clock budget"));
        }
        if self.aggregator_reserve.is_zero() {
            return Err(BudgetError::NotPositive("aggregator reserve"));
        }
        if self.per_execute_timeout.is_zero() {
            return Err(BudgetError::NotPositive("execute timeout"));
        }
        if self.aggregator_reserve >= self.wall_clock {
            return Err(BudgetError::ReserveTooLarge {
                reserve: self.aggregator_reserve,
                wall_clock: self.wall_clock,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Setup and manager share the search deadline.
    Search,
    Aggregator,
}

/// Monotone view of one run's budget. Time only moves forward: the latest
/// clock reading seen so far is what every answer is based on.
pub struct BudgetTracker {
    budget: RunBudget,
    clock: Arc<dyn Clock>,
    start: Duration,
    latest_nanos: AtomicU64,
}

fn nanos(d: Duration) -> u64 {
    u64::try_from(d.as_nanos()).unwrap_or(u64::MAX)
}

pub fn enforce_budget(budget: RunBudget, clock: Arc<dyn Clock>) -> Result<Arc<BudgetTracker>, BudgetError> {
    budget.validate()?;
    let start = clock.now();
    Ok(Arc::new(BudgetTracker {
        budget,
        clock,
        start,
        latest_nanos: AtomicU64::new(nanos(start)),
    }))
}

impl BudgetTracker {
    pub fn budget(&self) -> RunBudget {
        self.budget
    }

    /// Time since the run started.
    pub fn elapsed(&self) -> Duration {
        let reading = nanos(self.clock.now());
        let seen = self.latest_nanos.fetch_max(reading, Ordering::SeqCst);
        Duration::from_nanos(seen.max(reading)).saturating_sub(self.start)
    }

    /// Offset from the start at which a phase must stop.
    pub fn deadline(&self, phase: Phase) -> Duration {
        match phase {
            Phase::Search => self.budget.wall_clock - self.budget.aggregator_reserve,
            Phase::Aggregator => self.budget.wall_clock,
        }
    }

    pub fn remaining(&self) -> Duration {
        self.remaining_in(Phase::Aggregator)
    }

    pub fn exhausted(&self) -> bool {
        self.remaining().is_zero()
    }

    pub fn remaining_in(&self, phase: Phase) -> Duration {
        self.deadline(phase).saturating_sub(self.elapsed())
    }

    pub fn phase(self: &Arc<Self>, phase: Phase) -> PhaseBudget {
        PhaseBudget {
            tracker: Arc::clone(self),
            phase,
        }
    }
}

/// What an agent sees: its phase's deadline.
#[derive(Clone)]
pub struct PhaseBudget {
    tracker: Arc<BudgetTracker>,
    phase: Phase,
}

impl BudgetView for PhaseBudget {
    fn exhausted(&self) -> bool {
        self.tracker.remaining_in(self.phase).is_zero()
    }

    fn remaining(&self) -> Option<Duration> {
        Some(self.tracker.remaining_in(self.phase))
    }
}
