//! Prompt construction and the frozen text encoder.
//!
//! Prompts come from a [`TemplateBank`] indexed by task and quality tier.
//! A [`PromptGroup`] holds K distinct prompts that all resolve to one
//! ground-truth mask. [`TextEncoder`] maps a prompt to a fixed unit-norm
//! embedding through hashed bag-of-words counts and a frozen projection.

mod bank;
mod encoder;
mod group;

use serde::{Deserialize, Serialize};

pub use bank::{TemplateBank, TierTemplates, CLASS_SLOT};
pub use encoder::{encode_prompt, fnv1a64, splitmix64, TextEncoder, EMBED_DIM, HASH_BUCKETS, PROJECTION_SEED};
pub use group::{build_prompt_group, shuffle_group, MaskId, Prompt, PromptGroup, TierPolicy};

/// Synthetic nucleus categories targeted by category-specific prompts.
pub const CLASS_NAMES: [&str; 3] = ["epithelial-like", "inflammatory-like", "stromal-like"];

pub const NUM_CLASSES: usize = CLASS_NAMES.len();

/// Task setting of a prompt group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    /// All nuclei.
    T1,
    /// Nuclei of one category.
    T2,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::T1 => "T1",
            Task::T2 => "T2",
        })
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "T1" => Ok(Task::T1),
            "T2" => Ok(Task::T2),
            _ => Err(format!("unknown task `{s}` (expected T1 or T2)")),
        }
    }
}

/// Linguistic specificity level of a prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Low,
    Medium,
    High,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Low, Tier::Medium, Tier::High];

    pub fn name(self) -> &'static str {
        match self {
            Tier::Low => "low",
            Tier::Medium => "medium",
            Tier::High => "high",
        }
    }
}

impl std::fmt::Display for Tier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Tier {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "low" => Ok(Tier::Low),
            "medium" => Ok(Tier::Medium),
            "high" => Ok(Tier::High),
            _ => Err(format!("unknown tier `{s}`")),
        }
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum PromptError {
    #[error("prompt text is empty after normalization")]
    EmptyText,
    #[error("group size K={0} is below 2")]
    GroupTooSmall(usize),
    #[error("task {task} requires class id: {expected}")]
    ClassId { task: Task, expected: &'static str },
    #[error("unknown class id {0}")]
    UnknownClass(usize),
    #[error("requested {requested} distinct prompts but only {available} templates are available")]
    NotEnoughTemplates { requested: usize, available: usize },
    #[error("template bank invalid: {0}")]
    InvalidBank(String),
    #[error("template bank I/O: {0}")]
    Io(String),
}

/// Checks the class id against the task: present iff T2, and in range.
pub fn check_class(task: Task, class_id: Option<usize>) -> Result<(), PromptError> {
    match (task, class_id) {
        (Task::T1, None) => Ok(()),
        (Task::T1, Some(_)) => Err(PromptError::ClassId {
            task,
            expected: "none for T1",
        }),
        (Task::T2, None) => Err(PromptError::ClassId {
            task,
            expected: "exactly one for T2",
        }),
        (Task::T2, Some(c)) if c >= NUM_CLASSES => Err(PromptError::UnknownClass(c)),
        (Task::T2, Some(_)) => Ok(()),
    }
}
