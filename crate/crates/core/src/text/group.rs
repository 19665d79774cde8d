use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_class, PromptError, Task, TemplateBank, Tier};

/// Reference to a ground-truth target: `"<scene>/T1"` or `"<scene>/T2/<class>"`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MaskId(pub String);

impl MaskId {
    pub fn new(scene_id: &str, task: Task, class_id: Option<usize>) -> Self {
        match class_id {
            Some(c) => MaskId(format!("{scene_id}/{task}/{c}")),
            None => MaskId(format!("{scene_id}/{task}")),
        }
    }

    /// Splits back into `(scene, task, class)`.
    pub fn parse(&self) -> Option<(&str, Task, Option<usize>)> {
        let mut parts = self.0.split('/');
        let scene = parts.next()?;
        let task: Task = parts.next()?.parse().ok()?;
        let class = match parts.next() {
            Some(c) => Some(c.parse().ok()?),
            None => None,
        };
        if parts.next().is_some() {
            return None;
        }
        Some((scene, task, class))
    }
}

impl std::fmt::Display for MaskId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub text: String,
    pub tier: Tier,
}

/// K prompts sharing one ground-truth mask.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptGroup {
    pub image_id: String,
    pub task: Task,
    pub class_id: Option<usize>,
    pub prompts: Vec<Prompt>,
    pub mask_id: MaskId,
    /// Policy the prompts were drawn under.
    pub policy: TierPolicy,
}

impl PromptGroup {
    pub fn k(&self) -> usize {
        self.prompts.len()
    }

    /// `Some(t)` when every prompt has tier `t`.
    pub fn single_tier(&self) -> Option<Tier> {
        let first = self.prompts.first()?.tier;
        self.prompts.iter().all(|p| p.tier == first).then_some(first)
    }

    /// The tier of a group built under a single-tier policy.
    pub fn policy_tier(&self) -> Option<Tier> {
        match self.policy {
            TierPolicy::SingleTier(t) => Some(t),
            TierPolicy::Mixed => None,
        }
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        if self.k() < 2 {
            return Err(PromptError::GroupTooSmall(self.k()));
        }
        check_class(self.task, self.class_id)?;
        for (i, a) in self.prompts.iter().enumerate() {
            if self.prompts[..i].iter().any(|b| b.text == a.text) {
                return Err(PromptError::InvalidBank(format!(
                    "duplicate prompt `{}` in group",
                    a.text
                )));
            }
        }
        if let Some(t) = self.policy_tier() {
            if self.single_tier() != Some(t) {
                return Err(PromptError::InvalidBank(format!(
                    "group {} mixes tiers under a single-tier policy",
                    self.mask_id
                )));
            }
        }
        if self.mask_id != MaskId::new(&self.image_id, self.task, self.class_id) {
            return Err(PromptError::InvalidBank(format!(
                "mask id {} does not match group",
                self.mask_id
            )));
        }
        Ok(())
    }
}

/// How tiers are chosen when building a group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "tier")]
pub enum TierPolicy {
    SingleTier(Tier),
    /// Each prompt's tier is drawn uniformly from the tiers with unused templates.
    Mixed,
}

/// Samples `k` distinct prompts for one target. Deterministic in `seed`.
pub fn build_prompt_group(
    bank: &TemplateBank,
    scene_id: &str,
    task: Task,
    class_id: Option<usize>,
    k: usize,
    policy: TierPolicy,
    seed: u64,
) -> Result<PromptGroup, PromptError> {
    if k < 2 {
        return Err(PromptError::GroupTooSmall(k));
    }
    check_class(task, class_id)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tiers: Vec<Tier> = match policy {
        TierPolicy::SingleTier(t) => vec![t],
        TierPolicy::Mixed => Tier::ALL.to_vec(),
    };
    let mut pools: Vec<(Tier, Vec<String>)> = tiers
        .iter()
        .map(|&t| {
            let mut p = bank.prompts(task, t, class_id);
            p.shuffle(&mut rng);
            (t, p)
        })
        .collect();
    let available: usize = pools.iter().map(|(_, p)| p.len()).sum();
    if k > available {
        return Err(PromptError::NotEnoughTemplates {
            requested: k,
            available,
        });
    }
    let mut prompts: Vec<Prompt> = Vec::with_capacity(k);
    while prompts.len() < k {
        let open: Vec<usize> = (0..pools.len()).filter(|&i| !pools[i].1.is_empty()).collect();
        let pick = open[rng.gen_range(0..open.len())];
        let (tier, pool) = &mut pools[pick];
        let text = pool.pop().expect("non-empty pool");
        // identical fills across tiers are skipped
        if prompts.iter().all(|p| p.text != text) {
            prompts.push(Prompt { text, tier: *tier });
        } else if pools.iter().all(|(_, p)| p.is_empty()) {
            return Err(PromptError::NotEnoughTemplates {
                requested: k,
                available: prompts.len(),
            });
        }
    }
    Ok(PromptGroup {
        image_id: scene_id.to_string(),
        task,
        class_id,
        prompts,
        mask_id: MaskId::new(scene_id, task, class_id),
        policy,
    })
}

/// Fisher–Yates permutation of the prompt order. The first prompt of the
/// result serves as the consistency reference.
pub fn shuffle_group(group: &PromptGroup, seed: u64) -> PromptGroup {
    let mut out = group.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    out.prompts.shuffle(&mut rng);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::bank::word_count;

    fn bank() -> TemplateBank {
        TemplateBank::default()
    }

    #[test]
    fn deterministic_given_seed() {
        let a = build_prompt_group(&bank(), "s0", Task::T1, None, 3, TierPolicy::Mixed, 7).unwrap();
        let b = build_prompt_group(&bank(), "s0", Task::T1, None, 3, TierPolicy::Mixed, 7).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
    }

    #[test]
    fn t2_without_class_rejected() {
        let r = build_prompt_group(&bank(), "s0", Task::T2, None, 3, TierPolicy::Mixed, 1);
        assert!(matches!(r, Err(PromptError::ClassId { .. })));
        let r = build_prompt_group(&bank(), "s0", Task::T1, Some(0), 3, TierPolicy::Mixed, 1);
        assert!(matches!(r, Err(PromptError::ClassId { .. })));
        let r = build_prompt_group(&bank(), "s0", Task::T2, Some(5), 3, TierPolicy::Mixed, 1);
        assert_eq!(r.unwrap_err(), PromptError::UnknownClass(5));
    }

    #[test]
    fn low_tier_prompts_are_short() {
        for seed in 0..20 {
            let g =
                build_prompt_group(&bank(), "s", Task::T1, None, 3, TierPolicy::SingleTier(Tier::Low), seed).unwrap();
            assert!(g
                .prompts
                .iter()
                .all(|p| word_count(&p.text) <= 3 && p.tier == Tier::Low));
        }
    }

    #[test]
    fn too_many_prompts_rejected_with_count() {
        let r = build_prompt_group(&bank(), "s", Task::T1, None, 6, TierPolicy::SingleTier(Tier::Low), 0);
        assert_eq!(
            r.unwrap_err(),
            PromptError::NotEnoughTemplates {
                requested: 6,
                available: 5
            }
        );
        assert!(build_prompt_group(&bank(), "s", Task::T1, None, 1, TierPolicy::Mixed, 0).is_err());
    }

    #[test]
    fn large_mixed_groups_are_distinct() {
        let g = build_prompt_group(&bank(), "s", Task::T2, Some(2), 15, TierPolicy::Mixed, 3).unwrap();
        g.validate().unwrap();
        assert_eq!(g.k(), 15);
    }

    #[test]
    fn shuffle_preserves_fields() {
        let g = build_prompt_group(&bank(), "s", Task::T2, Some(1), 4, TierPolicy::Mixed, 11).unwrap();
        let s = shuffle_group(&g, 5);
        assert_eq!(s.mask_id, g.mask_id);
        assert_eq!(s.image_id, g.image_id);
        assert_eq!(s, shuffle_group(&g, 5));
        let mut a: Vec<_> = g.prompts.iter().map(|p| p.text.clone()).collect();
        let mut b: Vec<_> = s.prompts.iter().map(|p| p.text.clone()).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn mask_id_parse() {
        let id = MaskId::new("scene-0003", Task::T2, Some(2));
        assert_eq!(id.0, "scene-0003/T2/2");
        assert_eq!(id.parse(), Some(("scene-0003", Task::T2, Some(2))));
        assert_eq!(MaskId::new("a", Task::T1, None).parse(), Some(("a", Task::T1, None)));
    }
}
