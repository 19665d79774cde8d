//! Dice metrics, per-tier robustness reports, ablation and domain-shift studies.
//!
//! Dice convention: an empty prediction on an empty target scores 1.0; an
//! empty prediction on a non-empty target scores 0.0.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{build_dataset, Dataset, DatasetError, DatasetPlan};
use crate::losses::{ConsistencyKind, LossConfig};
use crate::model::{predict_mask, Model, ModelError};
use crate::synth::{DomainShiftSpec, Mask, SceneSpec, SynthError};
use crate::text::{splitmix64, PromptGroup, Task, TemplateBank, TextEncoder, Tier};
use crate::trainer::{train_on, TrainConfig, TrainError, TrainOptions};

pub const DICE_CONVENTION: &str = "dice: both-empty = 1.0, empty prediction on non-empty target = 0.0";

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("mask is not binary")]
    NonBinary,
    #[error("mask shapes differ: {0:?} vs {1:?}")]
    Shape((usize, usize), (usize, usize)),
    #[error("tier {tier} has no single-tier groups for task {task}")]
    MissingTier { task: Task, tier: Tier },
    #[error("evaluation item {item} used {calls} prompt encodings, expected exactly 1")]
    PromptCount { item: String, calls: u64 },
    #[error("unknown ablation axis `{0}` (loss-design, beta, k)")]
    UnknownAxis(String),
    #[error("no seeds configured")]
    NoSeeds,
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

type Result<T, E = EvalError> = std::result::Result<T, E>;

/// `2|P∩T| / (|P|+|T|)`.
pub fn dice_score(pred: &Mask, gt: &Mask) -> Result<f64> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(EvalError::Shape((pred.height, pred.width), (gt.height, gt.width)));
    }
    if !pred.is_binary() || !gt.is_binary() {
        return Err(EvalError::NonBinary);
    }
    let inter = pred
        .bits
        .iter()
        .zip(&gt.bits)
        .filter(|(a, b)| **a == 1 && **b == 1)
        .count();
    let total = pred.popcount() + gt.popcount();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Single-prompt inference as seen by the harness.
pub trait Segmenter {
    fn segment(&self, image_id: &str, image: &[f64], prompt: &str) -> Result<Mask>;
    /// Prompt encodings performed so far.
    fn encode_calls(&self) -> u64;
}

pub struct ModelSegmenter<'a> {
    pub model: &'a Model,
    pub threshold: f64,
    encoder: TextEncoder,
}

impl<'a> ModelSegmenter<'a> {
    pub fn new(model: &'a Model) -> Self {
        Self {
            model,
            threshold: 0.5,
            encoder: TextEncoder::new(),
        }
    }
}

impl Segmenter for ModelSegmenter<'_> {
    fn segment(&self, _image_id: &str, image: &[f64], prompt: &str) -> Result<Mask> {
        let pred = self.model.predict_group(image, &[prompt], &self.encoder)?.remove(0);
        Ok(predict_mask(
            &pred.aggregated_logits,
            self.model.config.height,
            self.model.config.width,
            self.threshold,
        ))
    }

    fn encode_calls(&self) -> u64 {
        self.encoder.calls()
    }
}

/// Score of one evaluation item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemScore {
    pub image_id: String,
    pub mask_id: String,
    pub task: Task,
    pub tier: Tier,
    pub prompt: String,
    pub dice: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TierStats {
    pub task: Task,
    pub tier: Tier,
    pub n: usize,
    pub mean: f64,
    /// Population standard deviation over items.
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskStats {
    pub task: Task,
    pub n: usize,
    pub mean: f64,
    /// Population standard deviation of the tier means.
    pub cross_tier_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub convention: String,
    pub tiers: Vec<TierStats>,
    pub tasks: Vec<TaskStats>,
    pub items: Vec<ItemScore>,
}

impl RobustnessReport {
    pub fn tier(&self, task: Task, tier: Tier) -> Option<&TierStats> {
        self.tiers.iter().find(|s| s.task == task && s.tier == tier)
    }

    pub fn task(&self, task: Task) -> Option<&TaskStats> {
        self.tasks.iter().find(|s| s.task == task)
    }

    /// Mean over every item.
    pub fn overall_mean(&self) -> f64 {
        mean(&self.items.iter().map(|i| i.dice).collect::<Vec<_>>())
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("# {DICE_CONVENTION}\ntask,tier,n,mean_dice,std_dice\n");
        for s in &self.tiers {
            let _ = writeln!(out, "{},{},{},{:.6},{:.6}", s.task, s.tier.name(), s.n, s.mean, s.std);
        }
        for t in &self.tasks {
            let _ = writeln!(out, "{},all,{},{:.6},{:.6}", t.task, t.n, t.mean, t.cross_tier_std);
        }
        out
    }
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population standard deviation.
pub fn std_dev(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Aggregates item scores. Items are sorted first so the result does not
/// depend on dataset order.
pub fn summarize(mut items: Vec<ItemScore>) -> RobustnessReport {
    items.sort_by(|a, b| (a.task, a.tier, &a.mask_id, &a.prompt).cmp(&(b.task, b.tier, &b.mask_id, &b.prompt)));
    let mut by: BTreeMap<(Task, Tier), Vec<f64>> = BTreeMap::new();
    for it in &items {
        by.entry((it.task, it.tier)).or_default().push(it.dice);
    }
    let tiers: Vec<TierStats> = by
        .iter()
        .map(|(&(task, tier), v)| TierStats {
            task,
            tier,
            n: v.len(),
            mean: mean(v),
            std: std_dev(v),
        })
        .collect();
    let mut tasks = Vec::new();
    for task in [Task::T1, Task::T2] {
        let means: Vec<f64> = tiers.iter().filter(|s| s.task == task).map(|s| s.mean).collect();
        if means.is_empty() {
            continue;
        }
        tasks.push(TaskStats {
            task,
            n: tiers.iter().filter(|s| s.task == task).map(|s| s.n).sum(),
            mean: mean(&means),
            cross_tier_std: std_dev(&means),
        });
    }
    RobustnessReport {
        convention: DICE_CONVENTION.to_string(),
        tiers,
        tasks,
        items,
    }
}

fn score_groups(seg: &dyn Segmenter, dataset: &Dataset, groups: &[&PromptGroup]) -> Result<Vec<ItemScore>> {
    let mut items = Vec::with_capacity(groups.len());
    for group in groups {
        let Some(tier) = group.policy_tier() else { continue };
        let scene = dataset
            .scene(&group.image_id)
            .ok_or_else(|| DatasetError::UnknownMask(group.mask_id.clone()))?;
        let target = dataset.resolve(&group.mask_id)?;
        let prompt = &group.prompts[0].text;
        let before = seg.encode_calls();
        let pred = seg.segment(&scene.id, &scene.image_f64(), prompt)?;
        let calls = seg.encode_calls() - before;
        if calls != 1 {
            return Err(EvalError::PromptCount {
                item: group.mask_id.0.clone(),
                calls,
            });
        }
        items.push(ItemScore {
            image_id: group.image_id.clone(),
            mask_id: group.mask_id.0.clone(),
            task: group.task,
            tier,
            prompt: prompt.clone(),
            dice: dice_score(&pred, &target)?,
        });
    }
    Ok(items)
}

fn finish(items: Vec<ItemScore>) -> Result<RobustnessReport> {
    for task in [Task::T1, Task::T2] {
        if items.iter().any(|i| i.task == task) {
            for tier in Tier::ALL {
                if !items.iter().any(|i| i.task == task && i.tier == tier) {
                    return Err(EvalError::MissingTier { task, tier });
                }
            }
        }
    }
    Ok(summarize(items))
}

/// One prompt per single-tier group; every tier must be present for each
/// task that appears.
pub fn evaluate_by_tier(seg: &dyn Segmenter, dataset: &Dataset) -> Result<RobustnessReport> {
    let groups: Vec<&PromptGroup> = dataset.groups.iter().collect();
    finish(score_groups(seg, dataset, &groups)?)
}

/// [`evaluate_by_tier`] for a model with groups split across `workers`
/// threads, each with its own prompt encoder.
pub fn evaluate_model_by_tier(model: &Model, dataset: &Dataset, workers: usize) -> Result<RobustnessReport> {
    let groups: Vec<&PromptGroup> = dataset.groups.iter().collect();
    let chunk = groups.len().div_ceil(workers.max(1)).max(1);
    let parts: Vec<Result<Vec<ItemScore>>> = std::thread::scope(|s| {
        let handles: Vec<_> = groups
            .chunks(chunk)
            .map(|c| s.spawn(move || score_groups(&ModelSegmenter::new(model), dataset, c)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    let mut items = Vec::new();
    for p in parts {
        items.extend(p?);
    }
    finish(items)
}

/// Rows of the loss-design part of the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossVariant {
    Full,
    NoRegularizers,
    NoConsistency,
    FullPairwise,
}

impl LossVariant {
    pub const ALL: [LossVariant; 4] = [
        LossVariant::Full,
        LossVariant::NoRegularizers,
        LossVariant::NoConsistency,
        LossVariant::FullPairwise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::Full => "full",
            LossVariant::NoRegularizers => "no-group-no-cons",
            LossVariant::NoConsistency => "no-cons",
            LossVariant::FullPairwise => "full-pairwise",
        }
    }

    pub fn apply(self, base: &LossConfig) -> LossConfig {
        let mut c = base.clone();
        match self {
            LossVariant::Full => {}
            LossVariant::NoRegularizers => {
                c.lambda = 0.0;
                c.beta = 0.0;
            }
            LossVariant::NoConsistency => c.beta = 0.0,
            LossVariant::FullPairwise => c.consistency = ConsistencyKind::FullPairwise,
        }
        c
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    LossDesign,
    Beta,
    K,
}

impl std::str::FromStr for AblationAxis {
    type Err = EvalError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loss-design" => Ok(Self::LossDesign),
            "beta" => Ok(Self::Beta),
            "k" | "K" => Ok(Self::K),
            _ => Err(EvalError::UnknownAxis(s.to_string())),
        }
    }
}

/// Shared settings of every multi-seed study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub train: TrainConfig,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub scene: SceneSpec,
    pub seeds: Vec<u64>,
}

impl StudyConfig {
    /// Seed-paired training and evaluation data.
    pub fn datasets(&self, seed: u64, bank: &TemplateBank) -> Result<(Dataset, Dataset)> {
        Ok((
            self.dataset(seed, self.train_scenes, 0, None, bank)?,
            self.dataset(seed, self.eval_scenes, 1, None, bank)?,
        ))
    }

    pub fn dataset(
        &self,
        seed: u64,
        n_scenes: usize,
        split: u64,
        shift: Option<DomainShiftSpec>,
        bank: &TemplateBank,
    ) -> Result<Dataset> {
        let plan = DatasetPlan {
            n_scenes,
            spec: self.scene.clone(),
            shift,
            seed: splitmix64(seed ^ (split << 40)),
            k: self.train.k,
        };
        Ok(build_dataset(&plan, bank)?)
    }

    /// Training config for one seed: the seed drives sampling and init.
    pub fn seeded(&self, seed: u64) -> TrainConfig {
        let mut c = self.train.clone();
        c.seed = seed;
        c.model.init_seed = splitmix64(seed ^ 0x5EED);
        c
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))[..16].to_string()
    }
}

/// One (variant, seed) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub report: RobustnessReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub label: String,
    pub loss: LossConfig,
    pub k: usize,
    pub runs: Vec<SeedResult>,
    /// Per-seed low-tier mean Dice for T1 and T2.
    pub low_t1: Vec<f64>,
    pub low_t2: Vec<f64>,
    pub cross_tier_std_t2: Vec<f64>,
}

impl Cell {
    fn from_runs(label: String, loss: LossConfig, k: usize, runs: Vec<SeedResult>) -> Self {
        let pick = |task, tier| -> Vec<f64> {
            runs.iter()
                .map(|r| r.report.tier(task, tier).map_or(f64::NAN, |s| s.mean))
                .collect()
        };
        let low_t1 = pick(Task::T1, Tier::Low);
        let low_t2 = pick(Task::T2, Tier::Low);
        let cross_tier_std_t2 = runs
            .iter()
            .map(|r| r.report.task(Task::T2).map_or(f64::NAN, |s| s.cross_tier_std))
            .collect();
        Self {
            label,
            loss,
            k,
            runs,
            low_t1,
            low_t2,
            cross_tier_std_t2,
        }
    }

    /// Mean over seeds of a tier's mean Dice.
    pub fn tier_mean(&self, task: Task, tier: Tier) -> f64 {
        mean(
            &self
                .runs
                .iter()
                .map(|r| r.report.tier(task, tier).map_or(f64::NAN, |s| s.mean))
                .collect::<Vec<_>>(),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub convention: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub cells: Vec<Cell>,
}

impl AblationTable {
    pub fn cell(&self, label: &str) -> Option<&Cell> {
        self.cells.iter().find(|c| c.label == label)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# {DICE_CONVENTION}; config {}; seeds {:?}\ncell,lambda,beta,k,consistency,low_t1_mean,low_t1_std,low_t2_mean,low_t2_std,t2_cross_tier_std\n",
            self.config_hash, self.seeds
        );
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{:?},{:.6},{:.6},{:.6},{:.6},{:.6}",
                c.label,
                c.loss.lambda,
                c.loss.beta,
                c.k,
                c.loss.consistency,
                mean(&c.low_t1),
                std_dev(&c.low_t1),
                mean(&c.low_t2),
                std_dev(&c.low_t2),
                mean(&c.cross_tier_std_t2),
            );
        }
        out
    }
}

/// Trains one model per seed and evaluates it on the paired held-out set.
pub fn run_cell(
    study: &StudyConfig,
    label: &str,
    loss: &LossConfig,
    k: usize,
    bank: &TemplateBank,
    mut on_model: impl FnMut(u64, &Model) -> Result<()>,
) -> Result<Cell> {
    if study.seeds.is_empty() {
        return Err(EvalError::NoSeeds);
    }
    let mut runs = Vec::new();
    for &seed in &study.seeds {
        let mut cfg = study.seeded(seed);
        cfg.loss = loss.clone();
        cfg.k = k;
        let (train, eval) = study.datasets(seed, bank)?;
        let out = train_on(
            &cfg,
            &train,
            TrainOptions {
                bank: bank.clone(),
                ..TrainOptions::default()
            },
        )?;
        let report = evaluate_by_tier(&ModelSegmenter::new(&out.model), &eval)?;
        on_model(seed, &out.model)?;
        runs.push(SeedResult { seed, report });
    }
    Ok(Cell::from_runs(label.to_string(), loss.clone(), k, runs))
}

pub fn run_ablation(study: &StudyConfig, axis: AblationAxis, bank: &TemplateBank) -> Result<AblationTable> {
    let base = &study.train.loss;
    let k = study.train.k;
    let mut cells = Vec::new();
    match axis {
        AblationAxis::LossDesign => {
            for v in LossVariant::ALL {
                cells.push(run_cell(study, v.name(), &v.apply(base), k, bank, |_, _| Ok(()))?);
            }
        }
        AblationAxis::Beta => {
            for beta in [0.05, 0.2] {
                let loss = LossConfig { beta, ..base.clone() };
                cells.push(run_cell(study, &format!("beta={beta}"), &loss, k, bank, |_, _| Ok(()))?);
            }
        }
        AblationAxis::K => {
            for kk in 2..=6 {
                cells.push(run_cell(study, &format!("K={kk}"), base, kk, bank, |_, _| Ok(()))?);
            }
        }
    }
    Ok(AblationTable {
        convention: DICE_CONVENTION.to_string(),
        config_hash: study.hash(),
        seeds: study.seeds.clone(),
        cells,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftRow {
    pub method: String,
    pub preset: String,
    /// Per-seed mean Dice over every evaluation item.
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotTable {
    pub convention: String,
    pub rows: Vec<ShiftRow>,
    /// Per-seed, per-item scores for recomputation.
    pub dumps: Vec<(String, String, u64, Vec<ItemScore>)>,
}

impl ZeroShotTable {
    pub fn row(&self, method: &str, preset: &str) -> Option<&ShiftRow> {
        self.rows.iter().find(|r| r.method == method && r.preset == preset)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("# {DICE_CONVENTION}\nmethod,preset,mean_dice,std_dice,seeds\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{}",
                r.method,
                r.preset,
                r.mean,
                r.std,
                r.per_seed.len()
            );
        }
        out
    }
}

/// Evaluates `model` on a shifted copy of the study distribution.
pub fn evaluate_shift(
    study: &StudyConfig,
    model: &Model,
    seed: u64,
    preset: &str,
    bank: &TemplateBank,
) -> Result<RobustnessReport> {
    let shift = DomainShiftSpec::preset(preset)?;
    let ds = study.dataset(seed, study.eval_scenes, 2, Some(shift), bank)?;
    evaluate_by_tier(&ModelSegmenter::new(model), &ds)
}

/// Trains the baseline and the full method per seed and scores both on each
/// shift preset.
pub fn zero_shot_eval(study: &StudyConfig, presets: &[&str], bank: &TemplateBank) -> Result<ZeroShotTable> {
    let variants = [LossVariant::NoRegularizers, LossVariant::Full];
    Ok(run_variants(study, &variants, presets, bank)?.1)
}

/// Loss-design cells plus the shift table, training every variant once.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionalStudy {
    pub table: AblationTable,
    pub zero_shot: ZeroShotTable,
}

pub fn run_directional_study(study: &StudyConfig, presets: &[&str], bank: &TemplateBank) -> Result<DirectionalStudy> {
    let (table, zero_shot) = run_variants(study, &LossVariant::ALL, presets, bank)?;
    Ok(DirectionalStudy { table, zero_shot })
}

fn shift_method(v: LossVariant) -> Option<&'static str> {
    match v {
        LossVariant::NoRegularizers => Some("baseline"),
        LossVariant::Full => Some("full"),
        _ => None,
    }
}

fn run_variants(
    study: &StudyConfig,
    variants: &[LossVariant],
    presets: &[&str],
    bank: &TemplateBank,
) -> Result<(AblationTable, ZeroShotTable)> {
    for p in presets {
        DomainShiftSpec::preset(p)?;
    }
    let mut cells = Vec::new();
    let mut rows = Vec::new();
    let mut dumps = Vec::new();
    for &v in variants {
        let method = shift_method(v);
        let mut per: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        let cell = run_cell(
            study,
            v.name(),
            &v.apply(&study.train.loss),
            study.train.k,
            bank,
            |seed, model| {
                if let Some(m) = method {
                    for &p in presets {
                        let r = evaluate_shift(study, model, seed, p, bank)?;
                        per.entry(p).or_default().push(r.overall_mean());
                        dumps.push((m.to_string(), p.to_string(), seed, r.items));
                    }
                }
                Ok(())
            },
        )?;
        cells.push(cell);
        if let Some(m) = method {
            for &p in presets {
                let v = per.remove(p).unwrap_or_default();
                rows.push(ShiftRow {
                    method: m.to_string(),
                    preset: p.to_string(),
                    mean: mean(&v),
                    std: std_dev(&v),
                    per_seed: v,
                });
            }
        }
    }
    let table = AblationTable {
        convention: DICE_CONVENTION.to_string(),
        config_hash: study.hash(),
        seeds: study.seeds.clone(),
        cells,
    };
    let zero_shot = ZeroShotTable {
        convention: DICE_CONVENTION.to_string(),
        rows,
        dumps,
    };
    Ok((table, zero_shot))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::DatasetPlan;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    fn m(bits: &[u8]) -> Mask {
        Mask {
            height: 1,
            width: bits.len(),
            bits: bits.to_vec(),
        }
    }

    #[test]
    fn dice_cases() {
        assert_eq!(dice_score(&m(&[1, 1, 0]), &m(&[1, 1, 0])).unwrap(), 1.0);
        assert_eq!(dice_score(&m(&[1, 0, 0]), &m(&[0, 1, 0])).unwrap(), 0.0);
        assert_eq!(dice_score(&m(&[0, 0]), &m(&[0, 0])).unwrap(), 1.0);
        assert_eq!(dice_score(&m(&[0, 0]), &m(&[0, 1])).unwrap(), 0.0);
        let p = m(&[1, 1, 1, 1, 0, 0]);
        let t = m(&[0, 0, 1, 1, 1, 1]);
        assert_eq!(dice_score(&p, &t).unwrap(), 0.5);
        assert!(matches!(dice_score(&m(&[2]), &m(&[1])), Err(EvalError::NonBinary)));
    }

    struct Oracle<'a> {
        ds: &'a Dataset,
        enc: TextEncoder,
    }

    impl Segmenter for Oracle<'_> {
        fn segment(&self, image_id: &str, _image: &[f64], prompt: &str) -> Result<Mask> {
            self.enc.encode(prompt).map_err(ModelError::from)?;
            let g = self
                .ds
                .groups
                .iter()
                .find(|g| g.image_id == image_id && g.prompts.iter().any(|p| p.text == prompt))
                .unwrap();
            Ok(self.ds.resolve(&g.mask_id)?)
        }
        fn encode_calls(&self) -> u64 {
            self.enc.calls()
        }
    }

    fn small_ds() -> Dataset {
        let plan = DatasetPlan {
            n_scenes: 3,
            spec: SceneSpec {
                n_blobs: [1, 3],
                radius_range: [2.0, 3.0],
                ..SceneSpec::with_size(16)
            },
            shift: None,
            seed: 9,
            k: 3,
        };
        build_dataset(&plan, &TemplateBank::default()).unwrap()
    }

    #[test]
    fn oracle_scores_perfectly() {
        let ds = small_ds();
        let r = evaluate_by_tier(
            &Oracle {
                ds: &ds,
                enc: TextEncoder::new(),
            },
            &ds,
        )
        .unwrap();
        assert!(r.tiers.iter().all(|s| s.mean == 1.0 && s.std == 0.0));
        assert!(r.tasks.iter().all(|t| t.cross_tier_std == 0.0));
        assert_eq!(r.tiers.len(), 6);
    }

    #[test]
    fn report_is_order_invariant_and_recomputable() {
        let ds = small_ds();
        let cfg = crate::model::ModelConfig {
            channels: 4,
            ..crate::model::ModelConfig::with_size(16)
        };
        let model = Model::new(cfg).unwrap();
        let a = evaluate_by_tier(&ModelSegmenter::new(&model), &ds).unwrap();
        let mut shuffled = ds.clone();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        shuffled.groups.shuffle(&mut rng);
        shuffled.scenes.shuffle(&mut rng);
        let b = evaluate_by_tier(&ModelSegmenter::new(&model), &shuffled).unwrap();
        assert_eq!(a, b);
        assert_eq!(evaluate_model_by_tier(&model, &ds, 3).unwrap(), a);
        for s in &a.tiers {
            let v: Vec<f64> = a
                .items
                .iter()
                .filter(|i| i.task == s.task && i.tier == s.tier)
                .map(|i| i.dice)
                .collect();
            assert_eq!(s.n, v.len());
            assert!((s.mean - v.iter().sum::<f64>() / v.len() as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_tier_rejected() {
        let mut ds = small_ds();
        ds.groups.retain(|g| g.policy_tier() != Some(Tier::High));
        let model = Model::new(crate::model::ModelConfig {
            channels: 2,
            ..crate::model::ModelConfig::with_size(16)
        })
        .unwrap();
        assert!(matches!(
            evaluate_by_tier(&ModelSegmenter::new(&model), &ds),
            Err(EvalError::MissingTier { .. })
        ));
    }

    #[test]
    fn ensembling_segmenter_rejected() {
        struct Twice(TextEncoder);
        impl Segmenter for Twice {
            fn segment(&self, _: &str, image: &[f64], prompt: &str) -> Result<Mask> {
                self.0.encode(prompt).unwrap();
                self.0.encode(prompt).unwrap();
                Ok(Mask::empty(16, image.len() / 16))
            }
            fn encode_calls(&self) -> u64 {
                self.0.calls()
            }
        }
        assert!(matches!(
            evaluate_by_tier(&Twice(TextEncoder::new()), &small_ds()),
            Err(EvalError::PromptCount { calls: 2, .. })
        ));
    }

    #[test]
    fn loss_variants() {
        let base = LossConfig::default();
        assert_eq!(LossVariant::NoRegularizers.apply(&base), LossConfig::baseline());
        assert_eq!(LossVariant::NoConsistency.apply(&base).beta, 0.0);
        assert_eq!(
            LossVariant::FullPairwise.apply(&base).consistency,
            ConsistencyKind::FullPairwise
        );
        assert!("bogus".parse::<AblationAxis>().is_err());
    }
}
