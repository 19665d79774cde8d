//! Toy text-conditioned segmentation network.
//!
//! ```text
//! image [1,H,W] ─ conv3×3+relu ×L_enc ─► features [d,H,W]        (once per group)
//! prompt ─ frozen encoder ─► e [32] ─ linear ─► (γ, β) [d]        (per prompt)
//! features ⊙ (1+γ) + β ─ conv3×3+relu ×(L_dec-1) ─► hidden
//! hidden ─ conv3×3 ─► candidate logits [N_c,H,W]
//! mean-pool(hidden) ─ linear ─► candidate scores [N_c], presence logit
//! top-K_cand candidates by score ─ pixelwise max ─► aggregated logits Z [H,W]
//! ```

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{AutodiffError, ParamId, Real, Tape, Tensor, Var};
use crate::synth::Mask;
use crate::text::{PromptError, TextEncoder, EMBED_DIM};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input shape {got:?} does not match model input {expected:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    /// Encoder channel width.
    pub channels: usize,
    pub text_dim: usize,
    /// Mask candidates per prompt.
    pub candidates: usize,
    /// Candidates kept by the top-K selection.
    pub select: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            channels: 16,
            text_dim: EMBED_DIM,
            candidates: 3,
            select: 2,
            encoder_layers: 3,
            decoder_layers: 2,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn with_size(size: usize) -> Self {
        Self {
            height: size,
            width: size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.select == 0 || self.select > self.candidates {
            return bad("need 1 <= select <= candidates");
        }
        if self.text_dim != EMBED_DIM {
            return bad("text_dim must match the frozen encoder width (32)");
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 || self.channels == 0 {
            return bad("layer counts and channel width must be positive");
        }
        if self.height == 0 || self.width == 0 || self.height > 128 || self.width > 128 {
            return bad("image extent must be in 1..=128");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Parameter shapes in their fixed storage order.
fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, usize)> {
    let d = cfg.channels;
    let mut out = Vec::new();
    for l in 0..cfg.encoder_layers {
        let cin = if l == 0 { 1 } else { d };
        out.push((format!("enc{l}.w"), vec![d, cin, 3, 3], cin * 9));
        out.push((format!("enc{l}.b"), vec![d], cin * 9));
    }
    for part in ["scale", "shift"] {
        out.push((format!("film.{part}.w"), vec![d, cfg.text_dim], cfg.text_dim));
        out.push((format!("film.{part}.b"), vec![d, 1], cfg.text_dim));
    }
    for l in 0..cfg.decoder_layers {
        let cout = if l + 1 == cfg.decoder_layers { cfg.candidates } else { d };
        out.push((format!("dec{l}.w"), vec![cout, d, 3, 3], d * 9));
        out.push((format!("dec{l}.b"), vec![cout], d * 9));
    }
    out.push(("score.w".into(), vec![cfg.candidates, d], d));
    out.push(("score.b".into(), vec![cfg.candidates, 1], d));
    out.push(("presence.w".into(), vec![1, d], d));
    out.push(("presence.b".into(), vec![1, 1], d));
    out
}

/// Per-prompt outputs recorded on a tape.
#[derive(Clone, Debug)]
pub struct PromptOutput {
    /// `[N_c, H, W]`
    pub candidates: Var,
    /// `[N_c]`
    pub scores: Var,
    /// scalar
    pub presence: Var,
    /// Aggregated logits `[H, W]`.
    pub z: Var,
    /// Candidate indices kept by top-K selection, ascending.
    pub selected: Vec<usize>,
}

/// Plain-value prediction for one prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupPrediction {
    pub candidate_logits: Vec<f64>,
    pub candidate_scores: Vec<f64>,
    pub presence_logit: f64,
    pub aggregated_logits: Vec<f64>,
    pub selected: Vec<usize>,
}

/// Parameter vars bound onto one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Uses caller-provided vars as parameters, in storage order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }
}

#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Vec<ParamTensor>,
    image_encoder_calls: AtomicU64,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            image_encoder_calls: AtomicU64::new(0),
        }
    }
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl Model {
    /// Uniform `±1/√fan_in` initialization from `config.init_seed`.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let params = layout(&config)
            .into_iter()
            .map(|(name, shape, fan_in)| {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let n = shape.iter().product();
                let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                ParamTensor { name, shape, data }
            })
            .collect();
        Ok(Self {
            config,
            params,
            image_encoder_calls: AtomicU64::new(0),
        })
    }

    /// Rebuilds a model from a flat parameter vector in storage order.
    pub fn from_flat(config: ModelConfig, flat: &[f64]) -> Result<Self, ModelError> {
        config.validate()?;
        let lay = layout(&config);
        let total: usize = lay.iter().map(|(_, s, _)| s.iter().product::<usize>()).sum();
        if total != flat.len() {
            return Err(ModelError::Checkpoint(format!(
                "parameter count {} does not match config ({total})",
                flat.len()
            )));
        }
        let mut off = 0;
        let params = lay
            .into_iter()
            .map(|(name, shape, _)| {
                let n: usize = shape.iter().product();
                let data = flat[off..off + n].to_vec();
                off += n;
                ParamTensor { name, shape, data }
            })
            .collect();
        Ok(Self {
            config,
            params,
            image_encoder_calls: AtomicU64::new(0),
        })
    }

    /// Parameter tensors in storage order.
    pub fn param_tensors<T: Real>(&self) -> Vec<Tensor<T>> {
        self.params
            .iter()
            .map(|p| {
                Tensor::new(p.shape.clone(), p.data.iter().map(|&x| T::of(x)).collect())
                    .expect("parameter layout is consistent")
            })
            .collect()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.data.iter().copied()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Index of a parameter tensor by name.
    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// How many times the image encoder has run on this instance.
    pub fn image_encoder_calls(&self) -> u64 {
        self.image_encoder_calls.load(Ordering::Relaxed)
    }

    /// Registers every parameter as a leaf with `ParamId(index)`.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>) -> Bound {
        let vars = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let t = Tensor::new(p.shape.clone(), p.data.iter().map(|&x| T::of(x)).collect())
                    .expect("parameter layout is consistent");
                tape.param(ParamId(i), t)
            })
            .collect();
        Bound { vars }
    }

    fn p(&self, bound: &Bound, name: &str) -> Var {
        bound.vars[self.param_index(name).expect("known parameter")]
    }

    /// Shared image encoder.
    pub fn encode_image<T: Real>(&self, tape: &mut Tape<T>, bound: &Bound, image: &[f64]) -> Result<Var, ModelError> {
        let (h, w) = (self.config.height, self.config.width);
        if image.len() != h * w {
            return Err(ModelError::Shape {
                expected: vec![h, w],
                got: vec![image.len()],
            });
        }
        self.image_encoder_calls.fetch_add(1, Ordering::Relaxed);
        let x = tape.constant(Tensor::new(vec![1, h, w], image.iter().map(|&v| T::of(v)).collect())?);
        let mut f = x;
        for l in 0..self.config.encoder_layers {
            let wv = self.p(bound, &format!("enc{l}.w"));
            let bv = self.p(bound, &format!("enc{l}.b"));
            let c = tape.conv2d(f, wv, Some(bv))?;
            f = tape.relu(c)?;
        }
        Ok(f)
    }

    /// Prompt-specific decoder on shared features.
    pub fn decode_prompt<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        features: Var,
        embedding: &[f64],
    ) -> Result<PromptOutput, ModelError> {
        let cfg = &self.config;
        let (d, h, w) = (cfg.channels, cfg.height, cfg.width);
        let hw = h * w;
        if embedding.len() != cfg.text_dim {
            return Err(ModelError::Shape {
                expected: vec![cfg.text_dim],
                got: vec![embedding.len()],
            });
        }
        let e = tape.constant(Tensor::new(
            vec![cfg.text_dim, 1],
            embedding.iter().map(|&v| T::of(v)).collect(),
        )?);
        let ones_row = tape.constant(Tensor::filled(vec![1, hw], T::one()));
        let film = |tape: &mut Tape<T>, part: &str| -> Result<Var, ModelError> {
            let wv = self.p(bound, &format!("film.{part}.w"));
            let bv = self.p(bound, &format!("film.{part}.b"));
            let m = tape.matmul(wv, e)?;
            let v = tape.add(m, bv)?;
            let map = tape.matmul(v, ones_row)?;
            Ok(tape.reshape(map, &[d, h, w])?)
        };
        let gamma = film(tape, "scale")?;
        let beta = film(tape, "shift")?;
        let one_plus = tape.offset(gamma, 1.0)?;
        let scaled = tape.mul(features, one_plus)?;
        let mut hidden = tape.add(scaled, beta)?;

        let last = cfg.decoder_layers - 1;
        for l in 0..last {
            let wv = self.p(bound, &format!("dec{l}.w"));
            let bv = self.p(bound, &format!("dec{l}.b"));
            let c = tape.conv2d(hidden, wv, Some(bv))?;
            hidden = tape.relu(c)?;
        }
        let wv = self.p(bound, &format!("dec{last}.w"));
        let bv = self.p(bound, &format!("dec{last}.b"));
        let candidates = tape.conv2d(hidden, wv, Some(bv))?;

        let flat = tape.reshape(hidden, &[d, hw])?;
        let pool_vec = tape.constant(Tensor::filled(vec![hw, 1], T::of(1.0 / hw as f64)));
        let pooled = tape.matmul(flat, pool_vec)?;

        let sw = self.p(bound, "score.w");
        let sb = self.p(bound, "score.b");
        let s = tape.matmul(sw, pooled)?;
        let s = tape.add(s, sb)?;
        let scores = tape.reshape(s, &[cfg.candidates])?;

        let pw = self.p(bound, "presence.w");
        let pb = self.p(bound, "presence.b");
        let pr = tape.matmul(pw, pooled)?;
        let pr = tape.add(pr, pb)?;
        let presence = tape.reshape(pr, &[])?;

        let score_vals: Vec<f64> = tape.value(scores).to_f64_vec();
        let (z, selected) = aggregate_candidates(tape, candidates, &score_vals, cfg.select)?;
        Ok(PromptOutput {
            candidates,
            scores,
            presence,
            z,
            selected,
        })
    }

    /// Runs the encoder once and the decoder once per prompt.
    pub fn forward_group<T: Real, S: AsRef<str>>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        image: &[f64],
        prompts: &[S],
        encoder: &TextEncoder,
    ) -> Result<Vec<PromptOutput>, ModelError> {
        let features = self.encode_image(tape, bound, image)?;
        prompts
            .iter()
            .map(|p| {
                let e = encoder.encode(p.as_ref())?;
                self.decode_prompt(tape, bound, features, &e)
            })
            .collect()
    }

    /// Inference without gradients: one plain-value prediction per prompt.
    pub fn predict_group<S: AsRef<str>>(
        &self,
        image: &[f64],
        prompts: &[S],
        encoder: &TextEncoder,
    ) -> Result<Vec<GroupPrediction>, ModelError> {
        let mut tape = Tape::<f64>::new();
        let bound = self.bind_constants(&mut tape);
        let outs = self.forward_group(&mut tape, &bound, image, prompts, encoder)?;
        Ok(outs
            .into_iter()
            .map(|o| GroupPrediction {
                candidate_logits: tape.value(o.candidates).to_f64_vec(),
                candidate_scores: tape.value(o.scores).to_f64_vec(),
                presence_logit: tape.item(o.presence),
                aggregated_logits: tape.value(o.z).to_f64_vec(),
                selected: o.selected,
            })
            .collect())
    }

    fn bind_constants<T: Real>(&self, tape: &mut Tape<T>) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                tape.constant(
                    Tensor::new(p.shape.clone(), p.data.iter().map(|&x| T::of(x)).collect())
                        .expect("parameter layout is consistent"),
                )
            })
            .collect();
        Bound { vars }
    }

    /// Binary mask for one prompt.
    pub fn segment(
        &self,
        image: &[f64],
        prompt: &str,
        encoder: &TextEncoder,
        threshold: f64,
    ) -> Result<Mask, ModelError> {
        let pred = self.predict_group(image, &[prompt], encoder)?.remove(0);
        Ok(predict_mask(
            &pred.aggregated_logits,
            self.config.height,
            self.config.width,
            threshold,
        ))
    }
}

/// Indices of the `k` highest scores, ties to the lower index, returned ascending.
pub fn select_top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut top = idx[..k.min(scores.len())].to_vec();
    top.sort_unstable();
    top
}

/// Top-K selection by score followed by a pixelwise max over the kept
/// candidates. Selection is a one-hot matmul so gradients reach only the
/// selected candidate achieving the max (ties: lowest index).
pub fn aggregate_candidates<T: Real>(
    tape: &mut Tape<T>,
    candidates: Var,
    scores: &[f64],
    k: usize,
) -> Result<(Var, Vec<usize>), ModelError> {
    let shape = tape.shape(candidates).to_vec();
    if shape.len() != 3 || shape[0] != scores.len() {
        return Err(ModelError::Shape {
            expected: vec![scores.len(), 0, 0],
            got: shape,
        });
    }
    if k == 0 || k > scores.len() {
        return Err(ModelError::Config(format!("select {k} of {} candidates", scores.len())));
    }
    let (n, h, w) = (shape[0], shape[1], shape[2]);
    let selected = select_top_k(scores, k);
    let mut sel = vec![T::zero(); k * n];
    for (r, &c) in selected.iter().enumerate() {
        sel[r * n + c] = T::one();
    }
    let sel = tape.constant(Tensor::new(vec![k, n], sel)?);
    let flat = tape.reshape(candidates, &[n, h * w])?;
    let picked = tape.matmul(sel, flat)?;
    let maxed = tape.max_reduce(picked)?;
    let z = tape.reshape(maxed, &[h, w])?;
    Ok((z, selected))
}

/// `sigmoid(z) >= threshold`, evaluated as `z >= logit(threshold)`.
pub fn predict_mask(z: &[f64], height: usize, width: usize, threshold: f64) -> Mask {
    assert!(threshold > 0.0 && threshold < 1.0, "threshold must lie in (0, 1)");
    let cut = (threshold / (1.0 - threshold)).ln();
    Mask::from_bools(height, width, z.iter().map(|&v| v >= cut))
}

const MAGIC: &[u8; 8] = b"PGATCKPT";
const CKPT_VERSION: u32 = 1;

/// Serializes `MAGIC | version u32 | config_len u32 | config JSON |
/// n_params u64 | params f64 LE | SHA-256 of everything before`.
pub fn checkpoint_bytes(model: &Model) -> Vec<u8> {
    let cfg = serde_json::to_vec(&model.config).expect("config serializes");
    let flat = model.flat_params();
    let mut out = Vec::with_capacity(24 + cfg.len() + flat.len() * 8 + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(flat.len() as u64).to_le_bytes());
    for v in flat {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Parses a checkpoint; with `expected`, rejects any config mismatch.
pub fn model_from_checkpoint(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Model, ModelError> {
    let bad = |m: String| ModelError::Checkpoint(m);
    if bytes.len() < 8 + 4 + 4 + 8 + 32 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic or too short)".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checksum mismatch".into()));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let cfg_len = u32::from_le_bytes(body[12..16].try_into().unwrap()) as usize;
    let cfg_end = 16 + cfg_len;
    if body.len() < cfg_end + 8 {
        return Err(bad("truncated header".into()));
    }
    let config: ModelConfig = serde_json::from_slice(&body[16..cfg_end]).map_err(|e| bad(e.to_string()))?;
    if let Some(exp) = expected {
        if exp != &config {
            return Err(bad(format!("config mismatch: file has {config:?}, expected {exp:?}")));
        }
    }
    let n = u64::from_le_bytes(body[cfg_end..cfg_end + 8].try_into().unwrap()) as usize;
    let data = &body[cfg_end + 8..];
    if data.len() != n * 8 {
        return Err(bad(format!(
            "parameter block has {} bytes, expected {}",
            data.len(),
            n * 8
        )));
    }
    let flat: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Model::from_flat(config, &flat)
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<(), ModelError> {
    std::fs::write(path, checkpoint_bytes(model)).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Model, ModelError> {
    let bytes = std::fs::read(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    model_from_checkpoint(&bytes, expected)
}
