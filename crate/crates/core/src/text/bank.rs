use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PromptError, Task, Tier, CLASS_NAMES};

/// Placeholder replaced by the class name in category-specific templates.
pub const CLASS_SLOT: &str = "{class}";

/// Words that mark a spatial constraint or an exclusion clause.
const CLAUSE_MARKERS: &[&str] = &[
    "excluding",
    "except",
    "ignoring",
    "ignore",
    "not",
    "only",
    "within",
    "throughout",
    "across",
    "inside",
    "including",
    "along",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TierTemplates {
    pub low: Vec<String>,
    pub medium: Vec<String>,
    pub high: Vec<String>,
}

impl TierTemplates {
    pub fn get(&self, tier: Tier) -> &[String] {
        match tier {
            Tier::Low => &self.low,
            Tier::Medium => &self.medium,
            Tier::High => &self.high,
        }
    }
}

/// Prompt templates per task and tier. Serialized as
/// `{"T1": {"low": [...], "medium": [...], "high": [...]}, "T2": {...}}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateBank {
    #[serde(rename = "T1")]
    pub t1: TierTemplates,
    #[serde(rename = "T2")]
    pub t2: TierTemplates,
}

fn owned(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

impl Default for TemplateBank {
    fn default() -> Self {
        Self {
            t1: TierTemplates {
                low: owned(&["nuclei", "all nuclei", "segment nuclei", "cell nuclei", "find nuclei"]),
                medium: owned(&[
                    "segment all the nuclei in this image",
                    "outline every cell nucleus you can see",
                    "highlight the nuclei present in the tissue",
                    "mark all of the cell nuclei here",
                    "please find each nucleus in the picture",
                ]),
                high: owned(&[
                    "delineate every cell nucleus throughout the entire tissue section, excluding background stroma",
                    "precisely segment all nuclei within the image, including those touching the borders",
                    "outline each individual nucleus across the whole field of view while ignoring debris",
                    "identify and segment every nucleus in the tissue but not the surrounding background",
                    "carefully mask all visible nuclei inside the field, excluding any empty background regions",
                ]),
            },
            t2: TierTemplates {
                low: owned(&[
                    "{class} nuclei",
                    "{class} cells",
                    "segment {class}",
                    "find {class} nuclei",
                    "{class}",
                ]),
                medium: owned(&[
                    "segment the {class} nuclei in this image",
                    "outline all of the {class} cell nuclei",
                    "highlight nuclei of {class} cells in the tissue",
                    "mark every {class} nucleus that is visible",
                    "please find each {class} nucleus here",
                ]),
                high: owned(&[
                    "delineate every {class} nucleus throughout the tissue section, excluding all other cell types",
                    "precisely segment only the {class} nuclei within the image and ignore the background",
                    "outline each {class} cell nucleus across the whole field while excluding other nuclei",
                    "identify all nuclei belonging to {class} cells in the tissue, but not any other category",
                    "carefully mask the {class} nuclei inside the field of view, except nuclei of other kinds",
                ]),
            },
        }
    }
}

/// Whitespace word count.
pub(crate) fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

fn has_clause(text: &str) -> bool {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .any(|w| CLAUSE_MARKERS.contains(&w.as_str()))
}

impl TemplateBank {
    pub fn templates(&self, task: Task) -> &TierTemplates {
        match task {
            Task::T1 => &self.t1,
            Task::T2 => &self.t2,
        }
    }

    /// Instantiates a template; T2 templates get the class name.
    pub fn fill(template: &str, class_id: Option<usize>) -> String {
        match class_id {
            Some(c) => template.replace(CLASS_SLOT, CLASS_NAMES[c]),
            None => template.to_string(),
        }
    }

    /// All instantiated prompts for one cell, deduplicated, in bank order.
    pub fn prompts(&self, task: Task, tier: Tier, class_id: Option<usize>) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for t in self.templates(task).get(tier) {
            let p = Self::fill(t, class_id);
            if !out.contains(&p) {
                out.push(p);
            }
        }
        out
    }

    /// Checks cell sizes, slot usage and the per-tier length and clause rules
    /// on every instantiated prompt.
    pub fn audit(&self) -> Result<(), PromptError> {
        let bad = |msg: String| Err(PromptError::InvalidBank(msg));
        for task in [Task::T1, Task::T2] {
            let classes: Vec<Option<usize>> = match task {
                Task::T1 => vec![None],
                Task::T2 => (0..CLASS_NAMES.len()).map(Some).collect(),
            };
            for tier in Tier::ALL {
                let cell = self.templates(task).get(tier);
                if cell.len() < 4 {
                    return bad(format!("{task}/{tier} has {} templates, need at least 4", cell.len()));
                }
                for template in cell {
                    let slotted = template.contains(CLASS_SLOT);
                    if task == Task::T2 && !slotted {
                        return bad(format!("T2 template `{template}` lacks {CLASS_SLOT}"));
                    }
                    if task == Task::T1 && slotted {
                        return bad(format!("T1 template `{template}` has a class slot"));
                    }
                    for &c in &classes {
                        let p = Self::fill(template, c);
                        let n = word_count(&p);
                        if p.trim().is_empty() {
                            return bad(format!("{task}/{tier} template `{template}` is empty"));
                        }
                        match tier {
                            Tier::Low if n > 3 => return bad(format!("low-tier `{p}` has {n} words (max 3)")),
                            Tier::High if n < 8 => return bad(format!("high-tier `{p}` has {n} words (min 8)")),
                            Tier::High if !has_clause(&p) => {
                                return bad(format!("high-tier `{p}` has no spatial or exclusion clause"))
                            }
                            _ => {}
                        }
                    }
                }
                for &c in &classes {
                    if self.prompts(task, tier, c).len() != cell.len() {
                        return bad(format!("{task}/{tier} templates are not distinct"));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, PromptError> {
        let bank: Self = serde_json::from_str(text).map_err(|e| PromptError::InvalidBank(e.to_string()))?;
        bank.audit()?;
        Ok(bank)
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(path).map_err(|e| PromptError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("template bank serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_bank_passes_audit() {
        TemplateBank::default().audit().unwrap();
    }

    #[test]
    fn audit_rejects_long_low_tier() {
        let mut bank = TemplateBank::default();
        bank.t1.low[0] = "segment all the nuclei".into();
        assert!(matches!(bank.audit(), Err(PromptError::InvalidBank(_))));
    }

    #[test]
    fn audit_rejects_high_tier_without_clause() {
        let mut bank = TemplateBank::default();
        bank.t1.high[0] = "please segment all of the big round nuclei here".into();
        let err = bank.audit().unwrap_err().to_string();
        assert!(err.contains("clause"), "{err}");
    }

    #[test]
    fn audit_rejects_small_cells() {
        let mut bank = TemplateBank::default();
        bank.t2.medium.truncate(3);
        assert!(bank.audit().is_err());
    }

    #[test]
    fn json_round_trip() {
        let bank = TemplateBank::default();
        let back = TemplateBank::from_json(&bank.to_json()).unwrap();
        assert_eq!(bank, back);
        assert!(bank.to_json().contains("\"T2\""));
    }
}
