//! Rasterizes trajectories into video tensors: anti-aliased discs on a plain
//! background, one fixed color per ball index.

use ndarray::Array4;

use crate::error::Result;
use crate::grid::VideoTensor;
use crate::sim::{SceneConfig, Trajectory};

pub const BACKGROUND: [f32; 3] = [0.08, 0.08, 0.08];

// every color peaks at PEAK in some channel so per-pixel coverage can be
// recovered from the brightest channel
const PEAK: f32 = 0.95;
const PALETTE: [[f32; 3]; 6] = [
    [0.95, 0.25, 0.20],
    [0.20, 0.95, 0.25],
    [0.25, 0.45, 0.95],
    [0.95, 0.85, 0.20],
    [0.95, 0.25, 0.95],
    [0.20, 0.95, 0.95],
];

pub fn ball_color(index: usize) -> [f32; 3] {
    PALETTE[index % PALETTE.len()]
}

const AA_SAMPLES: usize = 4; // 4x4 supersampling per pixel

/// Fraction of the pixel covered by a disc, by supersampling.
fn coverage(px: usize, py: usize, cx: f64, cy: f64, radius: f64, res: (usize, usize)) -> f64 {
    let (h, w) = res;
    let mut hits = 0;
    for sy in 0..AA_SAMPLES {
        for sx in 0..AA_SAMPLES {
            // sample position in box units; row 0 is the top of the box (y = 1)
            let x = (px as f64 + (sx as f64 + 0.5) / AA_SAMPLES as f64) / w as f64;
            let y = 1.0 - (py as f64 + (sy as f64 + 0.5) / AA_SAMPLES as f64) / h as f64;
            let dx = x - cx;
            let dy = y - cy;
            if dx * dx + dy * dy <= radius * radius {
                hits += 1;
            }
        }
    }
    hits as f64 / (AA_SAMPLES * AA_SAMPLES) as f64
}

/// Renders the context frames of a trajectory.
pub fn render(traj: &Trajectory, cfg: &SceneConfig) -> Result<VideoTensor> {
    render_frames(traj, cfg, cfg.frames_context)
}

/// Renders the first `n_frames` stored frames.
pub fn render_frames(traj: &Trajectory, cfg: &SceneConfig, n_frames: usize) -> Result<VideoTensor> {
    let (h, w) = cfg.resolution;
    let n_frames = n_frames.min(traj.frames.len());
    let mut out = Array4::zeros((n_frames, 3, h, w));
    for (t, frame) in traj.frames.iter().take(n_frames).enumerate() {
        for py in 0..h {
            for px in 0..w {
                let mut rgb = BACKGROUND;
                for (b, state) in frame.iter().enumerate() {
                    let a = coverage(px, py, state.pos[0], state.pos[1], traj.radii[b], (h, w));
                    if a > 0.0 {
                        let color = ball_color(b);
                        for ch in 0..3 {
                            rgb[ch] = rgb[ch] * (1.0 - a as f32) + color[ch] * a as f32;
                        }
                    }
                }
                for ch in 0..3 {
                    out[[t, ch, py, px]] = rgb[ch];
                }
            }
        }
    }
    VideoTensor::new(out)
}

/// Sum over pixels of the per-pixel foreground fraction, estimated from the
/// deviation from the background color.
pub fn foreground_mass(video: &VideoTensor, frame: usize) -> f64 {
    let (_, _, h, w) = video.dim();
    let mut mass = 0.0;
    for py in 0..h {
        for px in 0..w {
            let mut dev: f32 = 0.0;
            for ch in 0..3 {
                let d = (video.data()[[frame, ch, py, px]] - BACKGROUND[ch]).abs()
                    / (PEAK - BACKGROUND[ch]);
                dev = dev.max(d);
            }
            mass += dev as f64;
        }
    }
    mass
}
