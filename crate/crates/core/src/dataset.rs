//! Dataset persistence.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! manifest.json          {"format": 1, "scenes": [...], "groups": [...], ...}
//! images/<scene>.pgm     P5, maxval 255
//! masks/<scene>_<j>.pgm  P5, values {0, 255}
//! ```
//!
//! Every file is listed in the manifest with its SHA-256; reading verifies
//! them all and fails on the first mismatch, naming the file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::synth::{
    apply_shift, generate_scene, target_mask, DomainShiftSpec, Instance, Mask, Scene, SceneSpec, SynthError,
};
use crate::text::{
    build_prompt_group, splitmix64, MaskId, PromptGroup, Task, TemplateBank, Tier, TierPolicy, NUM_CLASSES,
};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: {reason}")]
    Corrupt { file: String, reason: String },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("unknown mask id {0}")]
    UnknownMask(MaskId),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Scenes plus the prompt groups defined over them.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub scenes: Vec<Scene>,
    pub groups: Vec<PromptGroup>,
}

impl Dataset {
    pub fn scene(&self, id: &str) -> Option<&Scene> {
        self.scenes.iter().find(|s| s.id == id)
    }

    /// Resolves a group's mask reference to the ground-truth mask.
    pub fn resolve(&self, id: &MaskId) -> Result<Mask, DatasetError> {
        let (scene_id, task, class) = id.parse().ok_or_else(|| DatasetError::UnknownMask(id.clone()))?;
        let scene = self
            .scene(scene_id)
            .ok_or_else(|| DatasetError::UnknownMask(id.clone()))?;
        Ok(target_mask(scene, task, class)?)
    }
}

/// Parameters for [`build_dataset`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetPlan {
    pub n_scenes: usize,
    pub spec: SceneSpec,
    pub shift: Option<DomainShiftSpec>,
    pub seed: u64,
    /// Prompts per stored group.
    pub k: usize,
}

/// Generates scenes and, per scene, one mixed-tier group and one group per
/// tier for the T1 target and every T2 class target (empty ones included).
pub fn build_dataset(plan: &DatasetPlan, bank: &TemplateBank) -> Result<Dataset, DatasetError> {
    let mut scenes = Vec::with_capacity(plan.n_scenes);
    let mut groups = Vec::new();
    for i in 0..plan.n_scenes {
        let scene_seed = splitmix64(plan.seed.wrapping_add(i as u64));
        let mut spec = plan.spec.with_seed(scene_seed);
        if let Some(shift) = &plan.shift {
            spec = apply_shift(&spec, shift)?;
        }
        let id = format!("scene-{i:04}");
        let scene = generate_scene(&spec, id.clone())?;
        let targets = std::iter::once((Task::T1, None)).chain((0..NUM_CLASSES).map(|c| (Task::T2, Some(c))));
        for (t_idx, (task, class)) in targets.enumerate() {
            let policies = std::iter::once(TierPolicy::Mixed).chain(Tier::ALL.map(TierPolicy::SingleTier));
            for (p_idx, policy) in policies.enumerate() {
                let gseed = splitmix64(scene_seed ^ ((t_idx as u64) << 8 | p_idx as u64));
                let group =
                    build_prompt_group(bank, &id, task, class, plan.k, policy, gseed).map_err(SynthError::from)?;
                groups.push(group);
            }
        }
        scenes.push(scene);
    }
    Ok(Dataset { scenes, groups })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct FileEntry {
    file: String,
    sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct InstanceEntry {
    class_id: usize,
    #[serde(flatten)]
    mask: FileEntry,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SceneEntry {
    id: String,
    spec: SceneSpec,
    image: FileEntry,
    instances: Vec<InstanceEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Counts {
    scenes: usize,
    images: usize,
    masks: usize,
    groups: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: u32,
    counts: Counts,
    scenes: Vec<SceneEntry>,
    groups: Vec<PromptGroup>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Encodes a binary P5 PGM with maxval 255.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Decodes a binary P5 PGM with maxval 255 into `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), String> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    if fields[0] != "P5" {
        return Err(format!("magic `{}` is not P5", fields[0]));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header field `{s}`"));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(format!("maxval {maxval} is not 255"));
    }
    let body = bytes.get(pos..).unwrap_or(&[]);
    if body.len() != w * h {
        return Err(format!("raster has {} bytes, expected {}", body.len(), w * h));
    }
    Ok((w, h, body.to_vec()))
}

/// Writes `dataset` under `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<(), DatasetError> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    fs::create_dir_all(&images).map_err(io_err(&images))?;
    fs::create_dir_all(&masks).map_err(io_err(&masks))?;
    let mut entries = Vec::with_capacity(dataset.scenes.len());
    let mut n_masks = 0;
    for scene in &dataset.scenes {
        let (h, w) = (scene.height(), scene.width());
        let write = |rel: String, bytes: Vec<u8>| -> Result<FileEntry, DatasetError> {
            let path = dir.join(&rel);
            fs::write(&path, &bytes).map_err(io_err(&path))?;
            Ok(FileEntry {
                file: rel,
                sha256: sha256_hex(&bytes),
            })
        };
        let image = write(format!("images/{}.pgm", scene.id), encode_pgm(w, h, &scene.image))?;
        let mut instances = Vec::with_capacity(scene.instances.len());
        for (j, inst) in scene.instances.iter().enumerate() {
            let px: Vec<u8> = inst.mask.bits.iter().map(|&b| if b != 0 { 255 } else { 0 }).collect();
            let mask = write(format!("masks/{}_{j:03}.pgm", scene.id), encode_pgm(w, h, &px))?;
            instances.push(InstanceEntry {
                class_id: inst.class_id,
                mask,
            });
            n_masks += 1;
        }
        entries.push(SceneEntry {
            id: scene.id.clone(),
            spec: scene.spec.clone(),
            image,
            instances,
        });
    }
    let manifest = Manifest {
        format: FORMAT_VERSION,
        counts: Counts {
            scenes: dataset.scenes.len(),
            images: dataset.scenes.len(),
            masks: n_masks,
            groups: dataset.groups.len(),
        },
        scenes: entries,
        groups: dataset.groups.clone(),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| DatasetError::Manifest(e.to_string()))?;
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(())
}

fn read_checked(dir: &Path, entry: &FileEntry, h: usize, w: usize) -> Result<Vec<u8>, DatasetError> {
    let corrupt = |reason: String| DatasetError::Corrupt {
        file: entry.file.clone(),
        reason,
    };
    let path = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let digest = sha256_hex(&bytes);
    if digest != entry.sha256 {
        return Err(corrupt(format!(
            "checksum {digest} does not match manifest {}",
            entry.sha256
        )));
    }
    let (pw, ph, px) = decode_pgm(&bytes).map_err(corrupt)?;
    if (pw, ph) != (w, h) {
        return Err(corrupt(format!("size {pw}x{ph} does not match spec {w}x{h}")));
    }
    Ok(px)
}

/// Reads and verifies a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Dataset, DatasetError> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| DatasetError::Manifest(e.to_string()))?;
    if manifest.format != FORMAT_VERSION {
        return Err(DatasetError::Manifest(format!(
            "format {} is not supported (expected {FORMAT_VERSION})",
            manifest.format
        )));
    }
    let n_masks: usize = manifest.scenes.iter().map(|s| s.instances.len()).sum();
    if manifest.counts.scenes != manifest.scenes.len()
        || manifest.counts.images != manifest.scenes.len()
        || manifest.counts.masks != n_masks
        || manifest.counts.groups != manifest.groups.len()
    {
        return Err(DatasetError::Manifest("declared counts do not match entries".into()));
    }
    let mut scenes = Vec::with_capacity(manifest.scenes.len());
    for entry in &manifest.scenes {
        let (h, w) = (entry.spec.height, entry.spec.width);
        let image = read_checked(dir, &entry.image, h, w)?;
        let mut instances = Vec::with_capacity(entry.instances.len());
        for inst in &entry.instances {
            let px = read_checked(dir, &inst.mask, h, w)?;
            if px.iter().any(|&v| v != 0 && v != 255) {
                return Err(DatasetError::Corrupt {
                    file: inst.mask.file.clone(),
                    reason: "mask values outside {0, 255}".into(),
                });
            }
            instances.push(Instance {
                class_id: inst.class_id,
                mask: Mask {
                    height: h,
                    width: w,
                    bits: px.into_iter().map(|v| (v == 255) as u8).collect(),
                },
            });
        }
        scenes.push(Scene {
            id: entry.id.clone(),
            spec: entry.spec.clone(),
            image,
            instances,
        });
    }
    let dataset = Dataset {
        scenes,
        groups: manifest.groups,
    };
    for g in &dataset.groups {
        g.validate()
            .map_err(|e| DatasetError::Manifest(format!("group for {}: {e}", g.mask_id)))?;
        if dataset.scene(&g.image_id).is_none() {
            return Err(DatasetError::UnknownMask(g.mask_id.clone()));
        }
    }
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan(n: usize) -> DatasetPlan {
        DatasetPlan {
            n_scenes: n,
            spec: SceneSpec::with_size(32),
            shift: None,
            seed: 9,
            k: 3,
        }
    }

    #[test]
    fn pgm_round_trip() {
        let px: Vec<u8> = (0..=255).cycle().take(20 * 17).collect();
        let enc = encode_pgm(20, 17, &px);
        assert_eq!(decode_pgm(&enc).unwrap(), (20, 17, px));
        assert!(decode_pgm(&enc[..enc.len() - 1]).is_err());
        assert!(decode_pgm(b"P2\n1 1\n255\n\x00").is_err());
    }

    #[test]
    fn round_trip_and_counts() {
        let dir = tempfile::tempdir().unwrap();
        let ds = build_dataset(&plan(10), &TemplateBank::default()).unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
        let count = |d: &str| fs::read_dir(dir.path().join(d)).unwrap().count();
        assert_eq!(count("images"), ds.scenes.len());
        assert_eq!(
            count("masks"),
            ds.scenes.iter().map(|s| s.instances.len()).sum::<usize>()
        );
    }

    #[test]
    fn truncated_mask_rejected_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let ds = build_dataset(&plan(2), &TemplateBank::default()).unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        let victim = dir.path().join("masks/scene-0001_000.pgm");
        let bytes = fs::read(&victim).unwrap();
        fs::write(&victim, &bytes[..bytes.len() / 2]).unwrap();
        let err = read_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("masks/scene-0001_000.pgm"), "{err}");
    }

    #[test]
    fn group_masks_resolve_consistently() {
        let ds = build_dataset(&plan(3), &TemplateBank::default()).unwrap();
        for g in &ds.groups {
            let m = ds.resolve(&g.mask_id).unwrap();
            let scene = ds.scene(&g.image_id).unwrap();
            assert_eq!(m, target_mask(scene, g.task, g.class_id).unwrap());
            g.validate().unwrap();
        }
        // 4 targets × (mixed + 3 tiers) per scene
        assert_eq!(ds.groups.len(), 3 * 16);
    }
}
