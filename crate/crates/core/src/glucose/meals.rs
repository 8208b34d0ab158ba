use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ode::{Disturbance, Exogenous, InputSignal, Side};

/// Length of the insulin window that follows each training meal, minutes.
pub const DOSE_WINDOW: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Meal {
    /// Minutes relative to the start of the control horizon.
    pub time: f64,
    /// Meal size, mg/dL.
    pub size: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MealError {
    #[error("meal times must be strictly increasing")]
    Unordered,
    #[error("meal size must be positive, got {0}")]
    NonPositiveSize(f64),
    #[error("decay rate must be positive, got {0}")]
    NonPositiveDecay(f64),
}

/// Meals with an exponential glucose appearance profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MealSchedule {
    pub meals: Vec<Meal>,
    /// Decay rate `B`, 1/min.
    pub decay: f64,
}

impl MealSchedule {
    pub fn new(meals: Vec<Meal>, decay: f64) -> Result<Self, MealError> {
        let s = Self { meals, decay };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), MealError> {
        if !(self.decay > 0.0) {
            return Err(MealError::NonPositiveDecay(self.decay));
        }
        if let Some(m) = self.meals.iter().find(|m| !(m.size > 0.0)) {
            return Err(MealError::NonPositiveSize(m.size));
        }
        if self.meals.windows(2).any(|w| w[0].time >= w[1].time) {
            return Err(MealError::Unordered);
        }
        Ok(())
    }

    /// Three meals of the 6 am – 12 am day: 8 am, 1 pm and 7 pm, with
    /// `t = 0` at 6 pm.
    pub fn standard_day() -> Self {
        Self {
            meals: vec![
                Meal { time: -600.0, size: 60.0 },
                Meal { time: -300.0, size: 90.0 },
                Meal { time: 60.0, size: 80.0 },
            ],
            decay: 0.5,
        }
    }

    /// `D(t)` in mg/dL/min, evaluated from the given side.
    pub fn rate(&self, t: f64, side: Side) -> f64 {
        let mut d = 0.0;
        for m in &self.meals {
            let started = match side {
                Side::Right => m.time <= t,
                Side::Left => m.time < t,
            };
            if started {
                d += m.size * self.decay * (-self.decay * (t - m.time)).exp();
            }
        }
        d
    }

    /// Meals whose onset lies in `[start, end)`.
    pub fn within(&self, start: f64, end: f64) -> Self {
        Self { meals: self.meals.iter().copied().filter(|m| m.time >= start && m.time < end).collect(), decay: self.decay }
    }
}

impl Disturbance for MealSchedule {
    fn value(&self, t: f64, side: Side) -> f64 {
        self.rate(t, side)
    }
}

/// Glucose appearance rate `D(t)` (right-continuous).
pub fn meal_profile(t: f64, schedule: &MealSchedule) -> f64 {
    schedule.rate(t, Side::Right)
}

fn dose_rate(t: f64, schedule: &MealSchedule, gain: f64, side: Side) -> f64 {
    let mut u = 0.0;
    for m in &schedule.meals {
        let inside = match side {
            Side::Right => t >= m.time && t < m.time + DOSE_WINDOW,
            Side::Left => t > m.time && t <= m.time + DOSE_WINDOW,
        };
        if inside {
            u += gain * m.size / DOSE_WINDOW;
        }
    }
    u
}

/// Insulin infusion of the training period: every meal triggers
/// `gain · S_meal` mU spread evenly over the following hour. Returns mU/min.
pub fn training_input(t: f64, schedule: &MealSchedule, gain: f64) -> f64 {
    dose_rate(t, schedule, gain, Side::Right)
}

/// Known exogenous signal of the training window: meal-proportional insulin
/// plus the meal disturbance.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingInput {
    pub schedule: MealSchedule,
    /// Insulin per unit meal size, mU per (mg/dL).
    pub gain: f64,
    pub start: f64,
    pub end: f64,
}

impl InputSignal<1> for TrainingInput {
    fn domain(&self) -> (f64, f64) {
        (self.start, self.end)
    }

    fn sample(&self, t: f64, side: Side) -> Exogenous<1> {
        Exogenous { input: [dose_rate(t, &self.schedule, self.gain, side)], disturbance: self.schedule.rate(t, side) }
    }
}
