//! On-disk object-contact-prediction dataset.
//!
//! Layout: `<root>/manifest.json`, `<root>/clips/<id>/frame_%03d.png`,
//! `<root>/clips/<id>/trajectory.json`. Labels come from the continued
//! simulation, never from rendered pixels.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ckpt::config_hash;
use crate::error::{Error, Result};
use crate::grid::VideoTensor;
use crate::render::render;
use crate::sim::{ocp_label, simulate, SceneConfig, Trajectory};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    /// Simulation seed; re-simulating (config, trajectory_id) reproduces the
    /// trajectory exactly.
    pub trajectory_id: u64,
    pub label: bool,
    pub pair: (usize, usize),
    pub split: Split,
    pub clip_dir: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub config: SceneConfig,
    pub config_hash: String,
    pub seed: u64,
    pub balance: f64,
    pub samples: Vec<SampleRecord>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.samples.iter().filter(move |s| s.split == split)
    }
}

fn attempt_seed(dataset_seed: u64, attempt: u64) -> u64 {
    // splitmix64 of (seed, attempt) so trajectory seeds are decorrelated
    let mut z = dataset_seed
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(attempt.wrapping_mul(0xbf58476d1ce4e5b9))
        .wrapping_add(0x94d049bb133111eb);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn pick_pair(rng: &mut ChaCha8Rng, num_balls: usize) -> (usize, usize) {
    let i = rng.gen_range(0..num_balls);
    let mut j = rng.gen_range(0..num_balls - 1);
    if j >= i {
        j += 1;
    }
    (i.min(j), i.max(j))
}

/// Assigns 80/10/10 train/val/test per label group, preserving accept order.
fn assign_splits(labels: &[bool]) -> Vec<Split> {
    let mut splits = vec![Split::Train; labels.len()];
    for class in [true, false] {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        let n = members.len();
        let n_train = (n as f64 * 0.8).round() as usize;
        let n_val = (n as f64 * 0.1).round() as usize;
        for (rank, &idx) in members.iter().enumerate() {
            splits[idx] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    splits
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_clip(dir: &Path, video: &VideoTensor) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (frames, _, h, w) = video.dim();
    for t in 0..frames {
        let mut img = RgbImage::new(w as u32, h as u32);
        for py in 0..h {
            for px in 0..w {
                img.put_pixel(
                    px as u32,
                    py as u32,
                    Rgb([
                        quantize(video.data()[[t, 0, py, px]]),
                        quantize(video.data()[[t, 1, py, px]]),
                        quantize(video.data()[[t, 2, py, px]]),
                    ]),
                );
            }
        }
        img.save(dir.join(format!("frame_{t:03}.png")))?;
    }
    Ok(())
}

pub fn load_clip(dir: &Path, frames: usize) -> Result<VideoTensor> {
    let mut data: Option<Array4<f32>> = None;
    for t in 0..frames {
        let img = image::open(dir.join(format!("frame_{t:03}.png")))?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let arr = data.get_or_insert_with(|| Array4::zeros((frames, 3, h, w)));
        for py in 0..h {
            for px in 0..w {
                let p = img.get_pixel(px as u32, py as u32);
                for ch in 0..3 {
                    arr[[t, ch, py, px]] = p[ch] as f32 / 255.0;
                }
            }
        }
    }
    VideoTensor::new(data.ok_or_else(|| Error::InvalidInput("clip has no frames".into()))?)
}

struct Accepted {
    trajectory_id: u64,
    traj: Trajectory,
    pair: (usize, usize),
    label: bool,
}

/// Builds a label-balanced dataset on disk; fully reproducible from
/// (config, seed).
pub fn build_dataset(
    cfg: &SceneConfig,
    n_samples: usize,
    seed: u64,
    balance: f64,
    out_dir: &Path,
) -> Result<Manifest> {
    cfg.validate()?;
    if !(balance > 0.0 && balance < 1.0) {
        return Err(Error::InvalidInput("balance must be in (0, 1)".into()));
    }
    let n_pos_target = (n_samples as f64 * balance).round() as usize;
    let n_neg_target = n_samples - n_pos_target;

    let mut accepted: Vec<Accepted> = Vec::with_capacity(n_samples);
    let (mut n_pos, mut n_neg) = (0usize, 0usize);
    let budget = (n_samples as u64) * 400;
    let mut attempt = 0u64;
    while accepted.len() < n_samples {
        if attempt >= budget {
            return Err(Error::Generation(format!(
                "could not reach balance {balance} within {budget} attempts \
                 ({n_pos} positive / {n_neg} negative so far)"
            )));
        }
        let traj_seed = attempt_seed(seed, attempt);
        attempt += 1;
        let traj = match simulate(cfg, traj_seed) {
            Ok(t) => t,
            Err(Error::Generation(_)) => continue,
            Err(e) => return Err(e),
        };
        let mut pair_rng = ChaCha8Rng::seed_from_u64(traj_seed ^ 0xa5a5_5a5a_1234_8765);
        let pair = pick_pair(&mut pair_rng, cfg.num_balls);
        let label = ocp_label(&traj, pair, cfg.frames_context, cfg.frames_horizon)?;
        let room = if label {
            n_pos < n_pos_target
        } else {
            n_neg < n_neg_target
        };
        if !room {
            continue;
        }
        if label {
            n_pos += 1;
        } else {
            n_neg += 1;
        }
        accepted.push(Accepted {
            trajectory_id: traj_seed,
            traj,
            pair,
            label,
        });
    }

    let labels: Vec<bool> = accepted.iter().map(|a| a.label).collect();
    let splits = assign_splits(&labels);

    std::fs::create_dir_all(out_dir)?;
    let mut samples = Vec::with_capacity(n_samples);
    for (idx, item) in accepted.iter().enumerate() {
        let id = format!("{idx:05}");
        let clip_dir = format!("clips/{id}");
        let abs_clip = out_dir.join(&clip_dir);
        let video = render(&item.traj, cfg)?;
        write_clip(&abs_clip, &video)?;
        let traj_json = serde_json::to_vec_pretty(&item.traj)?;
        std::fs::write(abs_clip.join("trajectory.json"), traj_json)?;
        samples.push(SampleRecord {
            id,
            trajectory_id: item.trajectory_id,
            label: item.label,
            pair: item.pair,
            split: splits[idx],
            clip_dir,
        });
    }

    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        config: cfg.clone(),
        config_hash: config_hash(cfg),
        seed,
        balance,
        samples,
    };
    // manifest is written last and atomically: a crash mid-build leaves no
    // partial manifest behind
    let bytes = serde_json::to_vec_pretty(&manifest)?;
    let tmp = out_dir.join("manifest.json.tmp");
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, out_dir.join("manifest.json"))?;
    Ok(manifest)
}

pub fn load_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join("manifest.json");
    if !path.exists() {
        return Err(Error::InvalidInput(format!(
            "no manifest at {}",
            path.display()
        )));
    }
    let bytes = std::fs::read(&path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Hash of the manifest file bytes; identifies a dataset build.
pub fn manifest_hash(root: &Path) -> Result<String> {
    let bytes = std::fs::read(root.join("manifest.json"))?;
    Ok(crate::ckpt::sha256_hex(&bytes))
}

pub fn clip_path(root: &Path, sample: &SampleRecord) -> PathBuf {
    root.join(&sample.clip_dir)
}

/// Re-simulates every sample at doubled substep resolution and checks the
/// stored label. Returns the number of mismatches.
pub fn audit_labels(root: &Path, manifest: &Manifest, limit: usize) -> Result<usize> {
    let _ = root;
    let cfg = &manifest.config;
    let mut mismatches = 0;
    for sample in manifest.samples.iter().take(limit) {
        let traj = crate::sim::simulate_with_substeps(
            cfg,
            sample.trajectory_id,
            2 * crate::sim::SUBSTEPS_PER_FRAME,
        )?;
        let label = ocp_label(&traj, sample.pair, cfg.frames_context, cfg.frames_horizon)?;
        if label != sample.label {
            mismatches += 1;
        }
    }
    Ok(mismatches)
}
