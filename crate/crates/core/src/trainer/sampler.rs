//! Ratio-driven mixing of the four task pools.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize};

use crate::task::TaskGroup;

use super::TrainError;

/// Relative sampling weights, written `EG:RG:SR:TR`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TaskRatio {
    pub eg: u32,
    pub rg: u32,
    pub sr: u32,
    pub tr: u32,
}

impl Default for TaskRatio {
    fn default() -> Self {
        Self {
            eg: 1,
            rg: 1,
            sr: 1,
            tr: 3,
        }
    }
}

impl TaskRatio {
    pub fn weight(&self, g: TaskGroup) -> u32 {
        match g {
            TaskGroup::Eg => self.eg,
            TaskGroup::Rg => self.rg,
            TaskGroup::Sr => self.sr,
            TaskGroup::Tr => self.tr,
        }
    }

    pub fn total(&self) -> u32 {
        self.eg + self.rg + self.sr + self.tr
    }

    pub fn validate(&self) -> Result<(), String> {
        if [self.eg, self.rg, self.sr, self.tr].contains(&0) {
            return Err(format!("every ratio must be at least 1, got {self}"));
        }
        Ok(())
    }
}

impl fmt::Display for TaskRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}:{}", self.eg, self.rg, self.sr, self.tr)
    }
}

impl FromStr for TaskRatio {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(':').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(format!("expected EG:RG:SR:TR, got '{s}'"));
        }
        let n: Result<Vec<u32>, _> = parts.iter().map(|p| p.parse::<u32>()).collect();
        let n = n.map_err(|e| format!("bad ratio '{s}': {e}"))?;
        let r = TaskRatio {
            eg: n[0],
            rg: n[1],
            sr: n[2],
            tr: n[3],
        };
        r.validate()?;
        Ok(r)
    }
}

impl<'de> Deserialize<'de> for TaskRatio {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Fields {
            eg: u32,
            rg: u32,
            sr: u32,
            tr: u32,
        }
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Text(String),
            Fields(Fields),
        }
        let r = match Repr::deserialize(d)? {
            Repr::Text(s) => s.parse().map_err(serde::de::Error::custom)?,
            Repr::Fields(f) => TaskRatio {
                eg: f.eg,
                rg: f.rg,
                sr: f.sr,
                tr: f.tr,
            },
        };
        r.validate().map_err(serde::de::Error::custom)?;
        Ok(r)
    }
}

/// Draws (task group, pool index) pairs. The group is categorical in the
/// ratio weights; within a group, indices come from a shuffled pass over the
/// pool, reshuffled whenever a pass is exhausted.
#[derive(Debug, Clone)]
pub struct TaskSampler {
    weights: [u32; 4],
    orders: [Vec<usize>; 4],
    cursors: [usize; 4],
}

impl TaskSampler {
    pub fn new(ratio: TaskRatio, pool_sizes: [usize; 4]) -> Result<Self, TrainError> {
        Self::with_enabled(ratio, pool_sizes, [true; 4])
    }

    /// Disabled groups are never drawn and may have empty pools.
    pub fn with_enabled(ratio: TaskRatio, pool_sizes: [usize; 4], enabled: [bool; 4]) -> Result<Self, TrainError> {
        ratio.validate().map_err(TrainError::Config)?;
        for g in TaskGroup::ALL {
            if enabled[g as usize] && pool_sizes[g as usize] == 0 {
                return Err(TrainError::EmptyPool(g));
            }
        }
        if !enabled.contains(&true) {
            return Err(TrainError::Config("no task group enabled".into()));
        }
        let weights = TaskGroup::ALL.map(|g| if enabled[g as usize] { ratio.weight(g) } else { 0 });
        Ok(Self {
            weights,
            orders: pool_sizes.map(|n| (0..n).collect()),
            cursors: [usize::MAX; 4],
        })
    }

    pub fn draw(&mut self, rng: &mut impl Rng) -> (TaskGroup, usize) {
        let mut u = rng.random_range(0..self.weights.iter().sum::<u32>());
        let mut group = TaskGroup::Tr;
        for g in TaskGroup::ALL {
            let w = self.weights[g as usize];
            if u < w {
                group = g;
                break;
            }
            u -= w;
        }
        let gi = group as usize;
        if self.cursors[gi] >= self.orders[gi].len() {
            self.orders[gi].shuffle(rng);
            self.cursors[gi] = 0;
        }
        let idx = self.orders[gi][self.cursors[gi]];
        self.cursors[gi] += 1;
        (group, idx)
    }

    /// `steps` batches of `batch_size` draws.
    pub fn sample_epoch(&mut self, steps: usize, batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<(TaskGroup, usize)>> {
        (0..steps)
            .map(|_| (0..batch_size).map(|_| self.draw(rng)).collect())
            .collect()
    }
}
