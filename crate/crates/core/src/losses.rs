//! Segmentation, quality-weighting and consistency objectives.
//!
//! All tape-level losses are built from the autodiff primitives so that
//! every term can be gradient-checked. Plain-value mirrors of the group
//! terms live alongside for oracles and reporting.

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Real, Tape, Tensor, Var};
use crate::model::PromptOutput;
use crate::synth::Mask;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("invalid loss config: {0}")]
    Config(String),
    #[error("target is not binary")]
    NonBinaryTarget,
    #[error("shape mismatch: logits {logits:?}, target {target:?}")]
    Shape { logits: Vec<usize>, target: Vec<usize> },
    #[error("group has {0} prompts, at least 2 required")]
    GroupTooSmall(usize),
    #[error("non-finite segmentation loss at prompt {0}")]
    NonFinite(usize),
    #[error("quality weight {index} is zero")]
    ZeroWeight { index: usize },
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

type Result<T, E = LossError> = std::result::Result<T, E>;

/// Gradient path through the quality weights of the group term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupGradMode {
    /// `q̃` detached, `log w` carries gradient.
    #[default]
    WDifferentiable,
    /// Both `q̃` and `w` detached; the group term is a constant.
    FullyDetached,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConsNorm {
    /// Squared norms divided by `H·W`.
    #[default]
    MeanPerPixel,
    Sum,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConsistencyKind {
    /// Every prompt is pulled toward the detached logits of the first prompt.
    #[default]
    StopGradReference,
    /// Mean over all unordered pairs, no detachment.
    FullPairwise,
}

impl std::str::FromStr for GroupGradMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "w-differentiable" => Ok(Self::WDifferentiable),
            "fully-detached" => Ok(Self::FullyDetached),
            _ => Err(format!("unknown group grad mode `{s}`")),
        }
    }
}

impl std::str::FromStr for ConsistencyKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "stop-grad-reference" => Ok(Self::StopGradReference),
            "full-pairwise" => Ok(Self::FullPairwise),
            _ => Err(format!("unknown consistency kind `{s}`")),
        }
    }
}

impl std::str::FromStr for ConsNorm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mean-per-pixel" => Ok(Self::MeanPerPixel),
            "sum" => Ok(Self::Sum),
            _ => Err(format!("unknown consistency norm `{s}`")),
        }
    }
}

/// Persisted with every field explicit; deserialization rejects missing fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda: f64,
    pub beta: f64,
    pub dice_eps: f64,
    pub group_grad_mode: GroupGradMode,
    pub cons_norm: ConsNorm,
    pub consistency: ConsistencyKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            lambda: 1.0,
            beta: 0.1,
            dice_eps: 1.0,
            group_grad_mode: GroupGradMode::default(),
            cons_norm: ConsNorm::default(),
            consistency: ConsistencyKind::default(),
        }
    }
}

impl LossConfig {
    /// Segmentation loss only.
    pub fn baseline() -> Self {
        Self {
            lambda: 0.0,
            beta: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.tau > 0.0
            && self.tau.is_finite()
            && self.lambda >= 0.0
            && self.beta >= 0.0
            && self.dice_eps > 0.0
            && self.lambda.is_finite()
            && self.beta.is_finite();
        if ok {
            Ok(())
        } else {
            Err(LossError::Config(format!(
                "need tau > 0, lambda >= 0, beta >= 0, dice_eps > 0 (got {self:?})"
            )))
        }
    }
}

fn target_tensor<T: Real>(tape: &Tape<T>, z: Var, target: &Mask) -> Result<Tensor<T>> {
    if !target.is_binary() {
        return Err(LossError::NonBinaryTarget);
    }
    let shape = tape.shape(z);
    if shape != [target.height, target.width] {
        return Err(LossError::Shape {
            logits: shape.to_vec(),
            target: vec![target.height, target.width],
        });
    }
    Ok(Tensor::new(
        vec![target.height, target.width],
        target.bits.iter().map(|&b| T::of(b as f64)).collect(),
    )?)
}

/// `log(1 + exp(z))` as `m + log(exp(-m) + exp(z - m))` with `m = sg(relu(z))`.
/// The shift only affects rounding, so the derivative is exactly `sigmoid(z)`
/// everywhere and nothing overflows.
pub fn softplus<T: Real>(tape: &mut Tape<T>, z: Var) -> Result<Var> {
    let r = tape.relu(z)?;
    let m = tape.stop_gradient(r)?;
    let neg_m = tape.neg(m)?;
    let a = tape.exp(neg_m)?;
    let zm = tape.sub(z, m)?;
    let b = tape.exp(zm)?;
    let s = tape.add(a, b)?;
    let l = tape.log(s)?;
    Ok(tape.add(m, l)?)
}

/// Mean per-pixel binary cross-entropy on `sigmoid(z)`.
pub fn mask_loss<T: Real>(tape: &mut Tape<T>, z: Var, target: &Mask) -> Result<Var> {
    let t = target_tensor(tape, z, target)?;
    let t = tape.constant(t);
    let sp = softplus(tape, z)?;
    let zt = tape.mul(z, t)?;
    let per_pixel = tape.sub(sp, zt)?;
    Ok(tape.mean(per_pixel)?)
}

/// `1 − (2·Σ p·t + eps) / (Σ p + Σ t + eps)` with `p = sigmoid(z)`.
pub fn dice_loss<T: Real>(tape: &mut Tape<T>, z: Var, target: &Mask, eps: f64) -> Result<Var> {
    if eps < 0.0 {
        return Err(LossError::Config("dice eps must be non-negative".into()));
    }
    let t = target_tensor(tape, z, target)?;
    let t_sum = target.popcount() as f64;
    let t = tape.constant(t);
    let p = tape.sigmoid(z)?;
    let pt = tape.mul(p, t)?;
    let inter = tape.sum(pt)?;
    let num = tape.scale(inter, 2.0)?;
    let num = tape.offset(num, eps)?;
    let p_sum = tape.sum(p)?;
    let den = tape.offset(p_sum, t_sum + eps)?;
    let ratio = tape.div(num, den)?;
    let neg = tape.neg(ratio)?;
    Ok(tape.offset(neg, 1.0)?)
}

/// Binary cross-entropy of `sigmoid(logit)` against target non-emptiness.
pub fn presence_loss<T: Real>(tape: &mut Tape<T>, logit: Var, target: &Mask) -> Result<Var> {
    let present = if target.popcount() > 0 { 1.0 } else { 0.0 };
    let sp = softplus(tape, logit)?;
    let zt = tape.scale(logit, present)?;
    Ok(tape.sub(sp, zt)?)
}

/// Tape handles of one prompt's segmentation terms.
#[derive(Clone, Copy, Debug)]
pub struct SegTerms {
    pub mask: Var,
    pub dice: Var,
    pub presence: Var,
    pub seg: Var,
}

pub fn seg_loss<T: Real>(tape: &mut Tape<T>, out: &PromptOutput, target: &Mask, dice_eps: f64) -> Result<SegTerms> {
    let mask = mask_loss(tape, out.z, target)?;
    let dice = dice_loss(tape, out.z, target, dice_eps)?;
    let presence = presence_loss(tape, out.presence, target)?;
    let md = tape.add(mask, dice)?;
    let seg = tape.add(md, presence)?;
    Ok(SegTerms {
        mask,
        dice,
        presence,
        seg,
    })
}

/// `q_i = −L_i` and `q̃_i = q_i − mean(q)`.
pub fn prompt_quality(losses: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if losses.len() < 2 {
        return Err(LossError::GroupTooSmall(losses.len()));
    }
    if let Some(i) = losses.iter().position(|l| !l.is_finite()) {
        return Err(LossError::NonFinite(i));
    }
    let q: Vec<f64> = losses.iter().map(|l| -l).collect();
    // centred about q_0 first so that equal inputs give exactly zero
    let d: Vec<f64> = q.iter().map(|v| v - q[0]).collect();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let qt = d.iter().map(|v| v - mean).collect();
    Ok((q, qt))
}

/// `log softmax(−L/τ)` with max subtraction.
pub fn log_quality_weights(losses: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(LossError::Config(format!("tau must be positive, got {tau}")));
    }
    let x: Vec<f64> = losses.iter().map(|l| -l / tau).collect();
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    Ok(x.iter().map(|v| v - m - lse).collect())
}

/// `w_i = softmax(−L/τ)_i`.
pub fn quality_weights(losses: &[f64], tau: f64) -> Result<Vec<f64>> {
    Ok(log_quality_weights(losses, tau)?.into_iter().map(f64::exp).collect())
}

/// `−Σ q̃_i · log w_i`.
pub fn group_loss(q_tilde: &[f64], w: &[f64]) -> Result<f64> {
    if q_tilde.len() != w.len() {
        return Err(LossError::Length(q_tilde.len(), w.len()));
    }
    if let Some(index) = w.iter().position(|&v| !(v > 0.0)) {
        return Err(LossError::ZeroWeight { index });
    }
    Ok(-q_tilde.iter().zip(w).map(|(q, w)| q * w.ln()).sum::<f64>())
}

/// Group term evaluated from log-weights, which avoids underflow of `w`.
pub fn group_loss_from_log_weights(q_tilde: &[f64], log_w: &[f64]) -> Result<f64> {
    if q_tilde.len() != log_w.len() {
        return Err(LossError::Length(q_tilde.len(), log_w.len()));
    }
    Ok(-q_tilde.iter().zip(log_w).map(|(q, l)| q * l).sum::<f64>())
}

/// Handles of the group term on a tape.
#[derive(Clone, Copy, Debug)]
pub struct GroupTerms {
    pub q: Var,
    pub q_tilde: Var,
    pub log_w: Var,
    pub w: Var,
    pub group: Var,
}

/// Group term over the `[K]` vector of per-prompt segmentation losses.
pub fn group_loss_tape<T: Real>(
    tape: &mut Tape<T>,
    seg_losses: Var,
    tau: f64,
    mode: GroupGradMode,
) -> Result<GroupTerms> {
    if !(tau > 0.0) {
        return Err(LossError::Config(format!("tau must be positive, got {tau}")));
    }
    let k = tape.value(seg_losses).numel();
    if k < 2 {
        return Err(LossError::GroupTooSmall(k));
    }
    let detached = tape.stop_gradient(seg_losses)?;
    let q = tape.neg(detached)?;
    let row = tape.reshape(q, &[1, k])?;
    let mut pick = Tensor::zeros(vec![k, 1]);
    pick.data_mut()[0] = T::one();
    let pick = tape.constant(pick);
    let q0 = tape.matmul(row, pick)?;
    let q0 = tape.reshape(q0, &[])?;
    let d = tape.sub(q, q0)?;
    let d_mean = tape.mean(d)?;
    let q_tilde = tape.sub(d, d_mean)?;

    let x = tape.scale(seg_losses, -1.0 / tau)?;
    let mx = tape.max_reduce(x)?;
    let mx = tape.stop_gradient(mx)?;
    let shifted = tape.sub(x, mx)?;
    let e = tape.exp(shifted)?;
    let z = tape.sum(e)?;
    let lse = tape.log(z)?;
    let mut log_w = tape.sub(shifted, lse)?;
    if mode == GroupGradMode::FullyDetached {
        log_w = tape.stop_gradient(log_w)?;
    }
    let w = tape.exp(log_w)?;
    if let Some(index) = tape.value(log_w).data().iter().position(|v| !v.as_f64().is_finite()) {
        return Err(LossError::ZeroWeight { index });
    }
    let prod = tape.mul(q_tilde, log_w)?;
    let s = tape.sum(prod)?;
    let group = tape.neg(s)?;
    Ok(GroupTerms {
        q,
        q_tilde,
        log_w,
        w,
        group,
    })
}

/// Consistency between aggregated logits; `zs[0]` is the reference.
pub fn consistency_loss<T: Real>(tape: &mut Tape<T>, zs: &[Var], norm: ConsNorm, kind: ConsistencyKind) -> Result<Var> {
    let k = zs.len();
    if k < 2 {
        return Err(LossError::GroupTooSmall(k));
    }
    let shape = tape.shape(zs[0]).to_vec();
    for z in &zs[1..] {
        if tape.shape(*z) != shape.as_slice() {
            return Err(LossError::Shape {
                logits: tape.shape(*z).to_vec(),
                target: shape,
            });
        }
    }
    let pixels: usize = shape.iter().product();
    let per_pixel = match norm {
        ConsNorm::MeanPerPixel => 1.0 / pixels as f64,
        ConsNorm::Sum => 1.0,
    };
    let mut terms = Vec::new();
    let coef = match kind {
        ConsistencyKind::StopGradReference => {
            let reference = tape.stop_gradient(zs[0])?;
            for &z in &zs[1..] {
                let d = tape.sub(z, reference)?;
                terms.push(tape.squared_l2(d)?);
            }
            1.0 / (k - 1) as f64
        }
        ConsistencyKind::FullPairwise => {
            for i in 0..k {
                for j in i + 1..k {
                    let d = tape.sub(zs[i], zs[j])?;
                    terms.push(tape.squared_l2(d)?);
                }
            }
            2.0 / (k * (k - 1)) as f64
        }
    };
    let all = tape.concat(&terms)?;
    let s = tape.sum(all)?;
    Ok(tape.scale(s, coef * per_pixel)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptLoss {
    pub mask: f64,
    pub dice: f64,
    pub presence: f64,
    pub seg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub prompts: Vec<PromptLoss>,
    pub q: Vec<f64>,
    pub q_tilde: Vec<f64>,
    pub w: Vec<f64>,
    pub mean_seg: f64,
    pub group: f64,
    pub cons: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `mean_seg + λ·group + β·cons` from the stored scalars.
    pub fn recompose(&self, cfg: &LossConfig) -> f64 {
        self.mean_seg + cfg.lambda * self.group + cfg.beta * self.cons
    }
}

/// `(1/K)·Σ L_seg + λ·L_group + β·L_cons` for one group sharing `target`.
/// Group and consistency nodes are only built when their weight is non-zero;
/// their values are still reported.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    outputs: &[PromptOutput],
    target: &Mask,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    cfg.validate()?;
    let k = outputs.len();
    if k < 2 {
        return Err(LossError::GroupTooSmall(k));
    }
    let terms: Vec<SegTerms> = outputs
        .iter()
        .map(|o| seg_loss(tape, o, target, cfg.dice_eps))
        .collect::<Result<_>>()?;
    let prompts: Vec<PromptLoss> = terms
        .iter()
        .map(|t| PromptLoss {
            mask: tape.item(t.mask),
            dice: tape.item(t.dice),
            presence: tape.item(t.presence),
            seg: tape.item(t.seg),
        })
        .collect();
    if let Some(i) = prompts.iter().position(|p| !p.seg.is_finite()) {
        return Err(LossError::NonFinite(i));
    }
    let seg_vec = tape.concat(&terms.iter().map(|t| t.seg).collect::<Vec<_>>())?;
    let mean_seg = tape.mean(seg_vec)?;
    let mut total = mean_seg;

    let seg_values: Vec<f64> = prompts.iter().map(|p| p.seg).collect();
    let (q, q_tilde) = prompt_quality(&seg_values)?;
    let log_w = log_quality_weights(&seg_values, cfg.tau)?;
    let w: Vec<f64> = log_w.iter().map(|l| l.exp()).collect();
    let mut group_value = group_loss_from_log_weights(&q_tilde, &log_w)?;
    if cfg.lambda != 0.0 {
        let g = group_loss_tape(tape, seg_vec, cfg.tau, cfg.group_grad_mode)?;
        group_value = tape.item(g.group);
        let scaled = tape.scale(g.group, cfg.lambda)?;
        total = tape.add(total, scaled)?;
    }

    let zs: Vec<Var> = outputs.iter().map(|o| o.z).collect();
    let cons_value = if cfg.beta != 0.0 {
        let c = consistency_loss(tape, &zs, cfg.cons_norm, cfg.consistency)?;
        let scaled = tape.scale(c, cfg.beta)?;
        total = tape.add(total, scaled)?;
        tape.item(c)
    } else {
        consistency_value(
            &zs.iter().map(|z| tape.value(*z).to_f64_vec()).collect::<Vec<_>>(),
            cfg.cons_norm,
            cfg.consistency,
        )
    };

    let breakdown = LossBreakdown {
        prompts,
        q,
        q_tilde,
        w,
        mean_seg: tape.item(mean_seg),
        group: group_value,
        cons: cons_value,
        total: tape.item(total),
    };
    Ok((total, breakdown))
}

/// Plain-value consistency for reporting.
pub fn consistency_value(zs: &[Vec<f64>], norm: ConsNorm, kind: ConsistencyKind) -> f64 {
    let k = zs.len();
    if k < 2 {
        return 0.0;
    }
    let n = zs[0].len() as f64;
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let raw = match kind {
        ConsistencyKind::StopGradReference => zs[1..].iter().map(|z| sq(z, &zs[0])).sum::<f64>() / (k - 1) as f64,
        ConsistencyKind::FullPairwise => {
            let mut s = 0.0;
            for i in 0..k {
                for j in i + 1..k {
                    s += sq(&zs[i], &zs[j]);
                }
            }
            2.0 * s / (k * (k - 1)) as f64
        }
    };
    match norm {
        ConsNorm::MeanPerPixel => raw / n,
        ConsNorm::Sum => raw,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, bits: &[u8]) -> Mask {
        Mask {
            height: h,
            width: w,
            bits: bits.to_vec(),
        }
    }

    fn logits(tape: &mut Tape<f64>, h: usize, w: usize, v: &[f64]) -> Var {
        tape.var(Tensor::from_f64(vec![h, w], v).unwrap())
    }

    #[test]
    fn bce_at_zero_logits() {
        let mut tape = Tape::<f64>::new();
        let z = logits(&mut tape, 2, 2, &[0.0; 4]);
        let l = mask_loss(&mut tape, z, &mask(2, 2, &[1, 0, 0, 1])).unwrap();
        assert!((tape.item(l) - std::f64::consts::LN_2).abs() < 1e-12);
        let g = tape.backward(l).unwrap().wrt(&tape, z);
        assert!((g[0] - (0.5 - 1.0) / 4.0).abs() < 1e-12);
        assert!((g[1] - 0.5 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn bce_saturated_and_extreme() {
        let mut tape = Tape::<f64>::new();
        let t = mask(1, 4, &[1, 0, 1, 0]);
        let z = logits(&mut tape, 1, 4, &[100.0, -100.0, 100.0, -100.0]);
        let l = mask_loss(&mut tape, z, &t).unwrap();
        assert!(tape.item(l) <= 1e-6);
        let z = logits(&mut tape, 1, 4, &[-1000.0, 1000.0, -1000.0, 1000.0]);
        let l = mask_loss(&mut tape, z, &t).unwrap();
        assert!((tape.item(l) - 1000.0).abs() < 1e-9);
        let g = tape.backward(l).unwrap();
        assert!(g.wrt(&tape, z).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn bce_single_pixel_flip() {
        let n = 16;
        let mut tape = Tape::<f64>::new();
        let bits: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let zv: Vec<f64> = bits.iter().map(|&b| if b == 1 { 100.0 } else { -100.0 }).collect();
        let z = logits(&mut tape, 4, 4, &zv);
        let a = mask_loss(&mut tape, z, &mask(4, 4, &bits)).unwrap();
        let mut flipped = bits.clone();
        flipped[0] ^= 1;
        let b = mask_loss(&mut tape, z, &mask(4, 4, &flipped)).unwrap();
        assert!(((tape.item(b) - tape.item(a)) - 100.0 / n as f64).abs() < 1e-6);
    }

    #[test]
    fn dice_cases() {
        let mut tape = Tape::<f64>::new();
        let t = mask(1, 2, &[1, 0]);
        let z = logits(&mut tape, 1, 2, &[0.0, 0.0]);
        let d = dice_loss(&mut tape, z, &t, 0.0).unwrap();
        assert!((tape.item(d) - 0.5).abs() < 1e-12);
        let z = logits(&mut tape, 1, 2, &[100.0, -100.0]);
        let d = dice_loss(&mut tape, z, &t, 1.0).unwrap();
        assert!(tape.item(d) <= 1e-4);
        let z = logits(&mut tape, 1, 2, &[-100.0, 100.0]);
        let d = dice_loss(&mut tape, z, &t, 1e-6).unwrap();
        assert!(tape.item(d) >= 1.0 - 1e-3);
    }

    #[test]
    fn presence_cases() {
        let mut tape = Tape::<f64>::new();
        let l = tape.scalar(-100.0);
        let p = presence_loss(&mut tape, l, &Mask::empty(2, 2)).unwrap();
        assert!(tape.item(p) <= 1e-6);
        let l = tape.scalar(0.0);
        let a = presence_loss(&mut tape, l, &mask(2, 2, &[1, 0, 0, 0])).unwrap();
        let b = presence_loss(&mut tape, l, &mask(2, 2, &[0, 1, 1, 1])).unwrap();
        assert!((tape.item(a) - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(tape.item(a), tape.item(b));
    }

    #[test]
    fn non_binary_and_shape_rejected() {
        let mut tape = Tape::<f64>::new();
        let z = logits(&mut tape, 1, 2, &[0.0, 0.0]);
        assert!(matches!(
            mask_loss(&mut tape, z, &mask(1, 2, &[2, 0])),
            Err(LossError::NonBinaryTarget)
        ));
        assert!(matches!(
            dice_loss(&mut tape, z, &mask(2, 1, &[1, 0]), 1.0),
            Err(LossError::Shape { .. })
        ));
    }

    #[test]
    fn quality_and_weights() {
        let (_, qt) = prompt_quality(&[0.2, 0.4, 0.6]).unwrap();
        for (a, b) in qt.iter().zip([0.2, 0.0, -0.2]) {
            assert!((a - b).abs() < 1e-12);
        }
        let w = quality_weights(&[0.0, std::f64::consts::LN_2], 1.0).unwrap();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-12 && (w[1] - 1.0 / 3.0).abs() < 1e-12);
        let w = quality_weights(&[0.1, 0.9], 0.01).unwrap();
        assert!(w[0] >= 1.0 - 1e-9);
        assert!(quality_weights(&[0.1, 0.9], 0.0).is_err());
        assert!(prompt_quality(&[0.1, f64::NAN]).is_err());
    }

    #[test]
    fn group_loss_value() {
        let l = [0.2, 0.4, 0.6];
        let (_, qt) = prompt_quality(&l).unwrap();
        let w = quality_weights(&l, 1.0).unwrap();
        assert!((group_loss(&qt, &w).unwrap() + 0.08).abs() < 1e-12);
        assert!(group_loss(&qt, &[0.5, 0.5, 0.0]).is_err());
    }

    #[test]
    fn tape_group_matches_values() {
        let mut tape = Tape::<f64>::new();
        let l = tape.var(Tensor::from_f64(vec![3], &[0.2, 0.4, 0.6]).unwrap());
        let g = group_loss_tape(&mut tape, l, 1.0, GroupGradMode::WDifferentiable).unwrap();
        assert!((tape.item(g.group) + 0.08).abs() < 1e-12);
        let grads = tape.backward(g.group).unwrap().wrt(&tape, l);
        // with q̃ held fixed the gradient is q̃_j / τ because Σq̃ = 0
        for (a, b) in grads.iter().zip([0.2, 0.0, -0.2]) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        let g = group_loss_tape(&mut tape, l, 1.0, GroupGradMode::FullyDetached).unwrap();
        assert!(tape.backward(g.group).unwrap().wrt(&tape, l).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn consistency_cases() {
        let mut tape = Tape::<f64>::new();
        let a = logits(&mut tape, 1, 1, &[0.0]);
        let b = logits(&mut tape, 1, 1, &[2.0]);
        for norm in [ConsNorm::MeanPerPixel, ConsNorm::Sum] {
            let c = consistency_loss(&mut tape, &[a, b], norm, ConsistencyKind::StopGradReference).unwrap();
            assert_eq!(tape.item(c), 4.0);
        }
        let c = consistency_loss(&mut tape, &[a, a, a], ConsNorm::Sum, ConsistencyKind::FullPairwise).unwrap();
        assert_eq!(tape.item(c), 0.0);
    }

    #[test]
    fn consistency_gradients() {
        let mut tape = Tape::<f64>::new();
        let vals = [[0.3, -1.0, 0.5, 2.0], [1.0, 0.0, -0.5, 0.2], [0.1, 0.1, 0.1, 0.1]];
        let zs: Vec<Var> = vals.iter().map(|v| logits(&mut tape, 2, 2, v)).collect();
        let c = consistency_loss(
            &mut tape,
            &zs,
            ConsNorm::MeanPerPixel,
            ConsistencyKind::StopGradReference,
        )
        .unwrap();
        let g = tape.backward(c).unwrap();
        assert!(g.wrt(&tape, zs[0]).iter().all(|v| *v == 0.0));
        for i in 1..3 {
            let gi = g.wrt(&tape, zs[i]);
            for p in 0..4 {
                let expected = 2.0 * (vals[i][p] - vals[0][p]) / (2.0 * 4.0);
                assert!((gi[p] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn config_serde_requires_all_fields() {
        let cfg = LossConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<LossConfig>(&json).unwrap(), cfg);
        assert!(serde_json::from_str::<LossConfig>(r#"{"tau":1.0}"#).is_err());
    }
}
