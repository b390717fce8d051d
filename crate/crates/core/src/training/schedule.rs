use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Learning rate as a function of the global inner-step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant { lr: f64 },
    /// Half-cosine from `start` to `end` over `steps`, then flat.
    Cosine { start: f64, end: f64, steps: usize },
    /// Linear interpolation between `(step, lr)` knots, flat outside them.
    Piecewise { knots: Vec<(usize, f64)> },
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self::four_phase()
    }
}

impl LrSchedule {
    /// 1e-4 down to 1e-5 by step 3000, flat to 6000, down to 1e-6 by 10000.
    pub fn four_phase() -> Self {
        Self::Piecewise {
            knots: vec![(0, 1e-4), (3000, 1e-5), (6000, 1e-5), (10000, 1e-6)],
        }
    }

    /// Cosine annealing 1e-4 to 1e-5 over `steps`.
    pub fn cosine(steps: usize) -> Self {
        Self::Cosine {
            start: 1e-4,
            end: 1e-5,
            steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |x: f64| x > 0.0 && x.is_finite();
        match self {
            Self::Constant { lr } if pos(*lr) => Ok(()),
            Self::Cosine { start, end, steps } if pos(*start) && pos(*end) && *steps > 0 => Ok(()),
            Self::Piecewise { knots }
                if !knots.is_empty()
                    && knots.iter().all(|k| pos(k.1))
                    && knots.windows(2).all(|w| w[0].0 < w[1].0) =>
            {
                Ok(())
            }
            other => Err(Error::config(format!("invalid learning-rate schedule {other:?}"))),
        }
    }
}

pub fn lr_at(schedule: &LrSchedule, step: usize) -> f64 {
    match schedule {
        LrSchedule::Constant { lr } => *lr,
        LrSchedule::Cosine { start, end, steps } => {
            let frac = step.min(*steps) as f64 / *steps as f64;
            end + 0.5 * (start - end) * (1.0 + (std::f64::consts::PI * frac).cos())
        }
        LrSchedule::Piecewise { knots } => {
            let first = knots[0];
            if step <= first.0 {
                return first.1;
            }
            for w in knots.windows(2) {
                let ((s0, l0), (s1, l1)) = (w[0], w[1]);
                if step == s1 {
                    return l1;
                }
                if step < s1 {
                    let f = (step - s0) as f64 / (s1 - s0) as f64;
                    return l0 + f * (l1 - l0);
                }
            }
            knots[knots.len() - 1].1
        }
    }
}
