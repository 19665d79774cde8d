use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, Tape};
use crate::dataset::{read_dataset, Dataset, DatasetError};
use crate::losses::{seg_loss, total_loss, LossBreakdown, LossConfig, LossError};
use crate::model::{save_checkpoint, Model, ModelConfig, ModelError};
use crate::synth::{target_mask, Mask, Scene};
use crate::text::{
    build_prompt_group, shuffle_group, splitmix64, PromptError, PromptGroup, Task, TemplateBank, TextEncoder,
    TierPolicy, NUM_CLASSES,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite gradient for parameter tensor {0}")]
    NonFiniteGradient(usize),
    #[error("training diverged at step {step}: {reason}")]
    Diverged {
        step: usize,
        reason: String,
        breakdown: Option<Box<LossBreakdown>>,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with bias correction; decoupled decay is applied after the adaptive
/// step as `θ ← θ·(1 − lr·decay)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    pub fn new(n: usize, config: AdamConfig) -> Self {
        Self {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<(), TrainError> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(TrainError::Config(format!(
                "optimizer sized for {} values, got params {} and grads {}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFiniteGradient(0));
        }
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let decay = 1.0 - lr * weight_decay;
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            params[i] *= decay;
        }
        Ok(())
    }
}

/// Which targets each scene contributes per epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskSelection {
    T1,
    T2,
    Both,
}

impl TaskSelection {
    pub fn targets(self) -> Vec<(Task, Option<usize>)> {
        let t2 = (0..NUM_CLASSES).map(|c| (Task::T2, Some(c)));
        match self {
            TaskSelection::T1 => vec![(Task::T1, None)],
            TaskSelection::T2 => t2.collect(),
            TaskSelection::Both => std::iter::once((Task::T1, None)).chain(t2).collect(),
        }
    }
}

impl std::str::FromStr for TaskSelection {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "t1" => Ok(Self::T1),
            "t2" => Ok(Self::T2),
            "both" => Ok(Self::Both),
            _ => Err(format!("unknown task selection `{s}` (t1, t2, both)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Groups whose gradients are averaged into one optimizer step.
    pub batch_size: usize,
    pub epochs: usize,
    /// Prompts per group.
    pub k: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub model: ModelConfig,
    pub adam: AdamConfig,
    pub tasks: TaskSelection,
    pub tier_policy: TierPolicy,
    pub dataset: Option<PathBuf>,
    /// Write an intermediate checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 1,
            epochs: 5,
            k: 3,
            seed: 0,
            loss: LossConfig::default(),
            model: ModelConfig::default(),
            adam: AdamConfig::default(),
            tasks: TaskSelection::T1,
            tier_policy: TierPolicy::Mixed,
            dataset: None,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.loss.validate()?;
        self.model.validate()?;
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.k < 2 {
            return bad("k must be at least 2");
        }
        Ok(())
    }
}

/// How the prompts of one unit are turned into an objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// The full group objective over all K prompts.
    Group,
    /// Segmentation loss of the first (post-shuffle) prompt only.
    FirstPrompt,
}

/// One group with its resolved target.
#[derive(Clone, Debug)]
pub struct Unit {
    pub epoch: usize,
    pub group: PromptGroup,
    pub target: Mask,
    scene_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRecord {
    pub image_id: String,
    pub mask_id: String,
    pub prompts: Vec<String>,
    pub breakdown: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    /// Mean total loss over the groups of this step.
    pub loss: f64,
    pub grad_norm: f64,
    pub groups: Vec<GroupRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub epochs: usize,
    pub groups_seen: usize,
    pub first_loss: f64,
    pub final_loss: f64,
    pub mean_seg_first_epoch: f64,
    pub mean_seg_last_epoch: f64,
    pub num_params: usize,
}

fn mix(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix64(seed), |h, &p| splitmix64(h ^ p))
}

/// The shuffled groups of one epoch, in manifest order.
pub fn epoch_units(
    config: &TrainConfig,
    bank: &TemplateBank,
    scenes: &[Scene],
    epoch: usize,
) -> Result<Vec<Unit>, TrainError> {
    let targets = config.tasks.targets();
    let mut out = Vec::with_capacity(scenes.len() * targets.len());
    for (si, scene) in scenes.iter().enumerate() {
        for (ti, &(task, class)) in targets.iter().enumerate() {
            let s = mix(config.seed, &[epoch as u64, si as u64, ti as u64]);
            let group = build_prompt_group(bank, &scene.id, task, class, config.k, config.tier_policy, s)?;
            let group = shuffle_group(&group, splitmix64(s));
            let target = target_mask(scene, task, class).map_err(|e| TrainError::Config(e.to_string()))?;
            out.push(Unit {
                epoch,
                group,
                target,
                scene_index: si,
            });
        }
    }
    Ok(out)
}

/// Model, optimizer and step counter.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: AdamW,
    pub step: usize,
    encoder: TextEncoder,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let model = Model::new(config.model.clone())?;
        let optimizer = AdamW::new(model.num_params(), config.adam.clone());
        Ok(Self {
            config,
            model,
            optimizer,
            step: 0,
            encoder: TextEncoder::new(),
        })
    }

    /// Forward, loss and backward for one group; returns flat parameter
    /// gradients and the breakdown.
    pub fn group_gradients(
        &self,
        image: &[f64],
        group: &PromptGroup,
        target: &Mask,
        objective: Objective,
    ) -> Result<(Vec<f64>, LossBreakdown), TrainError> {
        let mut tape = Tape::<f64>::new();
        let bound = self.model.bind(&mut tape);
        let (root, breakdown) = match objective {
            Objective::Group => {
                let texts: Vec<&str> = group.prompts.iter().map(|p| p.text.as_str()).collect();
                let outs = self
                    .model
                    .forward_group(&mut tape, &bound, image, &texts, &self.encoder)?;
                total_loss(&mut tape, &outs, target, &self.config.loss)?
            }
            Objective::FirstPrompt => {
                let text = &group.prompts[0].text;
                let outs = self
                    .model
                    .forward_group(&mut tape, &bound, image, &[text], &self.encoder)?;
                let t = seg_loss(&mut tape, &outs[0], target, self.config.loss.dice_eps)?;
                let seg = tape.item(t.seg);
                let breakdown = LossBreakdown {
                    prompts: vec![crate::losses::PromptLoss {
                        mask: tape.item(t.mask),
                        dice: tape.item(t.dice),
                        presence: tape.item(t.presence),
                        seg,
                    }],
                    q: vec![-seg],
                    q_tilde: vec![0.0],
                    w: vec![1.0],
                    mean_seg: seg,
                    group: 0.0,
                    cons: 0.0,
                    total: seg,
                };
                (t.seg, breakdown)
            }
        };
        let grads = tape.backward(root).map_err(ModelError::from)?;
        let mut flat = vec![0.0; self.model.num_params()];
        let offsets = self.offsets();
        for (ParamId(i), g) in grads.into_params() {
            flat[offsets[i]..offsets[i] + g.len()].copy_from_slice(&g);
        }
        Ok((flat, breakdown))
    }

    fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.model
            .params
            .iter()
            .map(|p| {
                let o = acc;
                acc += p.data.len();
                o
            })
            .collect()
    }

    /// One optimizer step over a batch of units.
    pub fn train_step(
        &mut self,
        scenes: &[Scene],
        units: &[Unit],
        objective: Objective,
    ) -> Result<StepRecord, TrainError> {
        let step = self.step;
        let mut sum = vec![0.0; self.model.num_params()];
        let mut groups = Vec::with_capacity(units.len());
        for u in units {
            let image = scenes[u.scene_index].image_f64();
            let (g, breakdown) = self
                .group_gradients(&image, &u.group, &u.target, objective)
                .map_err(|e| diverged(step, e))?;
            if !breakdown.total.is_finite() {
                return Err(TrainError::Diverged {
                    step,
                    reason: "non-finite total loss".into(),
                    breakdown: Some(Box::new(breakdown)),
                });
            }
            for (s, v) in sum.iter_mut().zip(&g) {
                *s += v;
            }
            groups.push(GroupRecord {
                image_id: u.group.image_id.clone(),
                mask_id: u.group.mask_id.0.clone(),
                prompts: u.group.prompts.iter().map(|p| p.text.clone()).collect(),
                breakdown,
            });
        }
        let n = units.len() as f64;
        if units.len() > 1 {
            sum.iter_mut().for_each(|v| *v /= n);
        }
        let grad_norm = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !grad_norm.is_finite() {
            return Err(TrainError::Diverged {
                step,
                reason: "non-finite gradient".into(),
                breakdown: groups.pop().map(|g| Box::new(g.breakdown)),
            });
        }
        let mut flat = self.model.flat_params();
        self.optimizer.step(&mut flat, &sum, self.config.lr)?;
        let mut off = 0;
        for p in &mut self.model.params {
            let n = p.data.len();
            p.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        self.step += 1;
        let loss = groups.iter().map(|g| g.breakdown.total).sum::<f64>() / n;
        Ok(StepRecord {
            step,
            epoch: units[0].epoch,
            loss,
            grad_norm,
            groups,
        })
    }
}

fn diverged(step: usize, e: TrainError) -> TrainError {
    match e {
        TrainError::Loss(LossError::NonFinite(i)) => TrainError::Diverged {
            step,
            reason: format!("non-finite segmentation loss for prompt {i}"),
            breakdown: None,
        },
        TrainError::Model(ModelError::Autodiff(a)) | TrainError::Loss(LossError::Autodiff(a)) => TrainError::Diverged {
            step,
            reason: a.to_string(),
            breakdown: None,
        },
        other => other,
    }
}

/// Options beyond the persisted config.
pub struct TrainOptions<'a> {
    pub objective: Objective,
    /// Replace every group by K copies of its first prompt.
    pub duplicate_first_prompt: bool,
    pub out_dir: Option<&'a Path>,
    pub bank: TemplateBank,
    /// Called after every optimizer step.
    pub observer: Option<&'a mut dyn FnMut(&StepRecord, &Model)>,
}

impl Default for TrainOptions<'_> {
    fn default() -> Self {
        Self {
            objective: Objective::Group,
            duplicate_first_prompt: false,
            out_dir: None,
            bank: TemplateBank::default(),
            observer: None,
        }
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub summary: TrainSummary,
    pub records: Vec<StepRecord>,
}

/// Runs the full loop. With an output directory this writes `config.json`,
/// `steps.jsonl`, periodic `checkpoints/step-NNNNNN.ckpt`, `model.ckpt` and
/// `summary.json`.
pub fn train_on(
    config: &TrainConfig,
    dataset: &Dataset,
    mut opts: TrainOptions<'_>,
) -> Result<TrainOutcome, TrainError> {
    let mut trainer = Trainer::new(config.clone())?;
    if let Some(scene) = dataset.scenes.first() {
        if scene.height() != config.model.height || scene.width() != config.model.width {
            return Err(TrainError::Config(format!(
                "dataset images are {}x{}, model expects {}x{}",
                scene.height(),
                scene.width(),
                config.model.height,
                config.model.width
            )));
        }
    }
    let mut log = match opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir.join("checkpoints")).map_err(io_err(dir))?;
            let cfg_path = dir.join("config.json");
            std::fs::write(
                &cfg_path,
                serde_json::to_string_pretty(config).expect("config serializes"),
            )
            .map_err(io_err(&cfg_path))?;
            let p = dir.join("steps.jsonl");
            Some((BufWriter::new(File::create(&p).map_err(io_err(&p))?), p))
        }
        None => None,
    };

    let mut records = Vec::new();
    let result = (|| -> Result<(), TrainError> {
        for epoch in 0..config.epochs {
            let mut units = epoch_units(config, &opts.bank, &dataset.scenes, epoch)?;
            if opts.duplicate_first_prompt {
                for u in &mut units {
                    let first = u.group.prompts[0].clone();
                    u.group.prompts = vec![first; config.k];
                }
            }
            for batch in units.chunks(config.batch_size) {
                let rec = trainer.train_step(&dataset.scenes, batch, opts.objective)?;
                if let Some((w, p)) = log.as_mut() {
                    let line = serde_json::to_string(&rec).expect("record serializes");
                    writeln!(w, "{line}").map_err(io_err(p))?;
                }
                if let (Some(dir), true) = (opts.out_dir, config.checkpoint_every > 0) {
                    if trainer.step % config.checkpoint_every == 0 {
                        let p = dir.join("checkpoints").join(format!("step-{:06}.ckpt", trainer.step));
                        save_checkpoint(&p, &trainer.model)?;
                    }
                }
                if let Some(obs) = opts.observer.as_mut() {
                    obs(&rec, &trainer.model);
                }
                records.push(rec);
            }
        }
        Ok(())
    })();
    if let Some((w, p)) = log.as_mut() {
        let flushed = w.flush().map_err(io_err(p));
        result?;
        flushed?;
    } else {
        result?;
    }

    let epoch_seg = |e: usize| {
        let v: Vec<f64> = records
            .iter()
            .filter(|r| r.epoch == e)
            .flat_map(|r| r.groups.iter().map(|g| g.breakdown.mean_seg))
            .collect();
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let summary = TrainSummary {
        steps: records.len(),
        epochs: config.epochs,
        groups_seen: records.iter().map(|r| r.groups.len()).sum(),
        first_loss: records.first().map_or(f64::NAN, |r| r.loss),
        final_loss: records.last().map_or(f64::NAN, |r| r.loss),
        mean_seg_first_epoch: epoch_seg(0),
        mean_seg_last_epoch: epoch_seg(config.epochs.saturating_sub(1)),
        num_params: trainer.model.num_params(),
    };
    if let Some(dir) = opts.out_dir {
        save_checkpoint(&dir.join("model.ckpt"), &trainer.model)?;
        let p = dir.join("summary.json");
        std::fs::write(&p, serde_json::to_string_pretty(&summary).expect("summary serializes")).map_err(io_err(&p))?;
    }
    Ok(TrainOutcome {
        model: trainer.model,
        summary,
        records,
    })
}

/// Reads the dataset named in the config and trains.
pub fn train(config: &TrainConfig, out_dir: &Path) -> Result<TrainOutcome, TrainError> {
    let path = config
        .dataset
        .as_ref()
        .ok_or_else(|| TrainError::Config("config has no dataset path".into()))?;
    let dataset = read_dataset(path)?;
    train_on(
        config,
        &dataset,
        TrainOptions {
            out_dir: Some(out_dir),
            ..TrainOptions::default()
        },
    )
}

/// Segmentation-only reference loop: one prompt per unit, no group terms.
pub fn train_per_prompt_baseline(config: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome, TrainError> {
    train_on(
        config,
        dataset,
        TrainOptions {
            objective: Objective::FirstPrompt,
            ..TrainOptions::default()
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_dataset, DatasetPlan};
    use crate::synth::SceneSpec;

    #[test]
    fn adamw_zero_grad_no_decay_is_identity() {
        let mut opt = AdamW::new(
            3,
            AdamConfig {
                weight_decay: 0.0,
                ..AdamConfig::default()
            },
        );
        let mut p = vec![0.5, -1.0, 2.0];
        opt.step(&mut p, &[0.0; 3], 0.1).unwrap();
        assert_eq!(p, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn adamw_first_step_is_minus_lr() {
        let mut opt = AdamW::new(
            1,
            AdamConfig {
                weight_decay: 0.0,
                ..AdamConfig::default()
            },
        );
        let mut p = vec![1.0];
        opt.step(&mut p, &[1.0], 1e-3).unwrap();
        assert!((p[0] - (1.0 - 1e-3)).abs() < 1e-10);
    }

    #[test]
    fn adamw_decay_shrinks_geometrically() {
        let mut opt = AdamW::new(1, AdamConfig::default());
        let mut p = vec![2.0];
        for _ in 0..5 {
            opt.step(&mut p, &[0.0], 0.1).unwrap();
        }
        assert!((p[0] - 2.0 * (1.0f64 - 0.1 * 0.01).powi(5)).abs() < 1e-12);
    }

    #[test]
    fn adamw_rejects_non_finite() {
        let mut opt = AdamW::new(1, AdamConfig::default());
        assert!(opt.step(&mut [0.0], &[f64::NAN], 0.1).is_err());
    }

    fn tiny() -> (TrainConfig, Dataset) {
        let cfg = TrainConfig {
            epochs: 1,
            lr: 1e-3,
            model: ModelConfig {
                channels: 4,
                ..ModelConfig::with_size(16)
            },
            ..TrainConfig::default()
        };
        let plan = DatasetPlan {
            n_scenes: 3,
            spec: SceneSpec {
                n_blobs: [1, 3],
                radius_range: [2.0, 3.0],
                ..SceneSpec::with_size(16)
            },
            shift: None,
            seed: 4,
            k: 3,
        };
        (cfg, build_dataset(&plan, &TemplateBank::default()).unwrap())
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let (mut cfg, ds) = tiny();
        cfg.lr = 0.0;
        let out = train_on(&cfg, &ds, TrainOptions::default()).unwrap();
        assert_eq!(out.model.params, Model::new(cfg.model.clone()).unwrap().params);
        assert_eq!(out.records.len(), 3);
    }

    #[test]
    fn logged_total_recomposes() {
        let (cfg, ds) = tiny();
        let out = train_on(&cfg, &ds, TrainOptions::default()).unwrap();
        for r in &out.records {
            for g in &r.groups {
                assert!((g.breakdown.recompose(&cfg.loss) - g.breakdown.total).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn writes_run_directory() {
        let (mut cfg, ds) = tiny();
        cfg.checkpoint_every = 2;
        let dir = tempfile::tempdir().unwrap();
        train_on(
            &cfg,
            &ds,
            TrainOptions {
                out_dir: Some(dir.path()),
                ..TrainOptions::default()
            },
        )
        .unwrap();
        for f in [
            "config.json",
            "steps.jsonl",
            "summary.json",
            "model.ckpt",
            "checkpoints/step-000002.ckpt",
        ] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let lines = std::fs::read_to_string(dir.path().join("steps.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), 3);
        let back: TrainConfig =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("config.json")).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn units_are_deterministic_and_cover_targets() {
        let (mut cfg, ds) = tiny();
        cfg.tasks = TaskSelection::Both;
        let a = epoch_units(&cfg, &TemplateBank::default(), &ds.scenes, 1).unwrap();
        let b = epoch_units(&cfg, &TemplateBank::default(), &ds.scenes, 1).unwrap();
        assert_eq!(a.len(), 12);
        assert_eq!(
            a.iter().map(|u| &u.group).collect::<Vec<_>>(),
            b.iter().map(|u| &u.group).collect::<Vec<_>>()
        );
        let c = epoch_units(&cfg, &TemplateBank::default(), &ds.scenes, 2).unwrap();
        assert_ne!(a[0].group, c[0].group);
    }
}
