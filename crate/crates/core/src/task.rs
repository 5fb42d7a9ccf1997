//! Task tags shared by the codec, model, trainer and inference.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// One of the five text-to-text tasks. The two rationale sub-tasks get their
/// own prompt blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Sequential,
    TopN,
    Explanation,
    Preference,
    Attribute,
}

impl Task {
    pub const ALL: [Task; 5] = [
        Task::Sequential,
        Task::TopN,
        Task::Explanation,
        Task::Preference,
        Task::Attribute,
    ];

    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        match self {
            Task::Sequential => 0,
            Task::TopN => 1,
            Task::Explanation => 2,
            Task::Preference => 3,
            Task::Attribute => 4,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Task::Sequential => "sr",
            Task::TopN => "tr",
            Task::Explanation => "eg",
            Task::Preference => "rg_pref",
            Task::Attribute => "rg_attr",
        }
    }

    /// Sampling group; both rationale sub-tasks share the RG share of the mix.
    pub fn group(self) -> TaskGroup {
        match self {
            Task::Sequential => TaskGroup::Sr,
            Task::TopN => TaskGroup::Tr,
            Task::Explanation => TaskGroup::Eg,
            Task::Preference | Task::Attribute => TaskGroup::Rg,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownTask(pub String);

impl fmt::Display for UnknownTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "unknown task tag '{}'", self.0)
    }
}

impl std::error::Error for UnknownTask {}

impl FromStr for Task {
    type Err = UnknownTask;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sr" | "seq" | "sequential" => Ok(Task::Sequential),
            "tr" | "topn" | "top_n" => Ok(Task::TopN),
            "eg" | "explanation" => Ok(Task::Explanation),
            "rg_pref" | "pref" | "preference" => Ok(Task::Preference),
            "rg_attr" | "attr" | "attribute" => Ok(Task::Attribute),
            _ => Err(UnknownTask(s.to_string())),
        }
    }
}

/// The four mixing groups of the `EG:RG:SR:TR` sample ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskGroup {
    Eg,
    Rg,
    Sr,
    Tr,
}

impl TaskGroup {
    pub const ALL: [TaskGroup; 4] = [TaskGroup::Eg, TaskGroup::Rg, TaskGroup::Sr, TaskGroup::Tr];

    pub fn tag(self) -> &'static str {
        match self {
            TaskGroup::Eg => "eg",
            TaskGroup::Rg => "rg",
            TaskGroup::Sr => "sr",
            TaskGroup::Tr => "tr",
        }
    }
}
