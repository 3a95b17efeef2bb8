use alloc::format;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use super::SacaError;

/// λ for steps `from..=to` (1-indexed, inclusive).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlendRange {
    pub from: usize,
    pub to: usize,
    pub lambda: f64,
}

/// Piecewise-constant global blend weight over the denoising steps.
///
/// Ranges tile `1..=total_steps` in order and λ never decreases, so the
/// global prompt gains influence as denoising proceeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<BlendRange>", into = "Vec<BlendRange>")]
pub struct GlobalBlendSchedule {
    ranges: Vec<BlendRange>,
}

impl GlobalBlendSchedule {
    pub fn new(ranges: Vec<BlendRange>) -> Result<Self, SacaError> {
        let bad = |m: alloc::string::String| Err(SacaError::InvalidSchedule(m));
        let Some(first) = ranges.first() else {
            return bad("schedule has no ranges".into());
        };
        if first.from != 1 {
            return bad(format!("first range starts at {} instead of 1", first.from));
        }
        for (i, r) in ranges.iter().enumerate() {
            if r.from > r.to {
                return bad(format!("range {i} runs backwards ({}..={})", r.from, r.to));
            }
            if !(0.0..=1.0).contains(&r.lambda) {
                return bad(format!("range {i} has lambda {} outside [0, 1]", r.lambda));
            }
            if i > 0 {
                let prev = ranges[i - 1];
                if r.from != prev.to + 1 {
                    return bad(format!("range {i} starts at {} but the previous one ends at {}", r.from, prev.to));
                }
                if r.lambda < prev.lambda {
                    return bad(format!("lambda decreases at range {i}"));
                }
            }
        }
        Ok(Self { ranges })
    }

    /// 0.1 for steps 1-10, 0.3 for 11-20, 0.5 for 21-30.
    pub fn default_30() -> Self {
        Self::thirds(30, [0.1, 0.3, 0.5]).expect("valid")
    }

    /// Splits `steps` into three contiguous blocks as evenly as possible,
    /// earlier blocks taking the remainder.
    pub fn thirds(steps: usize, lambdas: [f64; 3]) -> Result<Self, SacaError> {
        if steps < 3 {
            return Self::constant(steps, lambdas[0]);
        }
        let mut ranges = Vec::with_capacity(3);
        let mut from = 1;
        for (k, lambda) in lambdas.iter().enumerate() {
            let len = steps / 3 + usize::from(k < steps % 3);
            ranges.push(BlendRange { from, to: from + len - 1, lambda: *lambda });
            from += len;
        }
        Self::new(ranges)
    }

    pub fn constant(steps: usize, lambda: f64) -> Result<Self, SacaError> {
        if steps == 0 {
            return Err(SacaError::InvalidSchedule("schedule needs at least one step".into()));
        }
        Self::new(alloc::vec![BlendRange { from: 1, to: steps, lambda }])
    }

    pub fn total_steps(&self) -> usize {
        self.ranges.last().map_or(0, |r| r.to)
    }

    pub fn ranges(&self) -> &[BlendRange] {
        &self.ranges
    }

    /// λ for 1-indexed `step`.
    pub fn lambda_at(&self, step: usize) -> Result<f64, SacaError> {
        self.ranges
            .iter()
            .find(|r| (r.from..=r.to).contains(&step))
            .map(|r| r.lambda)
            .ok_or(SacaError::StepOutOfRange { step, total: self.total_steps() })
    }
}

impl Default for GlobalBlendSchedule {
    fn default() -> Self {
        Self::default_30()
    }
}

impl TryFrom<Vec<BlendRange>> for GlobalBlendSchedule {
    type Error = SacaError;
    fn try_from(v: Vec<BlendRange>) -> Result<Self, SacaError> {
        Self::new(v)
    }
}

impl From<GlobalBlendSchedule> for Vec<BlendRange> {
    fn from(s: GlobalBlendSchedule) -> Self {
        s.ranges
    }
}
