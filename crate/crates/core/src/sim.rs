//! Procedural physics clips: elastic balls in a unit box, with ground-truth
//! future-contact labels.
//!
//! The stepper advances a fixed substep per rendered frame but resolves wall
//! bounces and pairwise collisions at their exact continuous times inside a
//! substep, so trajectories and contact events do not depend on the substep
//! resolution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneConfig {
    pub num_balls: usize,
    /// Ball radius range, as a fraction of the unit box.
    pub radius_range: (f64, f64),
    /// Speed range in box units per frame.
    pub speed_range: (f64, f64),
    pub frames_context: usize,
    pub frames_horizon: usize,
    /// Normal-velocity retention on impact, in (0, 1].
    pub restitution: f64,
    pub resolution: (usize, usize),
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_balls: 3,
            // discs a few patches wide moving a couple of pixels per frame:
            // large and fast enough that masked regions correlate with what
            // stays visible, which masked pretraining depends on
            radius_range: (0.10, 0.16),
            speed_range: (0.04, 0.10),
            frames_context: 8,
            frames_horizon: 8,
            restitution: 1.0,
            resolution: (32, 32),
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_balls < 2 {
            return Err(Error::InvalidInput("need at least 2 balls".into()));
        }
        if self.frames_context < 2 {
            return Err(Error::InvalidInput("frames_context must be >= 2".into()));
        }
        if !(self.restitution > 0.0 && self.restitution <= 1.0) {
            return Err(Error::InvalidInput("restitution must be in (0, 1]".into()));
        }
        let (rmin, rmax) = self.radius_range;
        if !(rmin > 0.0 && rmax >= rmin && rmax < 0.5) {
            return Err(Error::InvalidInput("radius range must fit the box".into()));
        }
        Ok(())
    }

    pub fn total_frames(&self) -> usize {
        self.frames_context + self.frames_horizon
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BallState {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
}

/// A contact between two balls at a continuous time measured in frames.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ContactEvent {
    pub time: f64,
    pub pair: (usize, usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub radii: Vec<f64>,
    /// Ball states at each rendered frame time, `total_frames` entries.
    pub frames: Vec<Vec<BallState>>,
    pub contacts: Vec<ContactEvent>,
}

pub const SUBSTEPS_PER_FRAME: usize = 4;
const PLACEMENT_RETRIES: usize = 10_000;
const MAX_EVENTS_PER_SUBSTEP: usize = 10_000;

struct World {
    pos: Vec<[f64; 2]>,
    vel: Vec<[f64; 2]>,
    radii: Vec<f64>,
    restitution: f64,
}

enum Event {
    /// (ball, axis)
    Wall(usize, usize),
    Pair(usize, usize),
}

impl World {
    /// Earliest event strictly inside (0, dt], if any.
    fn next_event(&self, dt: f64) -> Option<(f64, Event)> {
        let n = self.pos.len();
        let mut best: Option<(f64, Event)> = None;
        let mut consider = |t: f64, ev: Event| {
            if t > 0.0 && t <= dt && best.as_ref().map_or(true, |(bt, _)| t < *bt) {
                best = Some((t, ev));
            }
        };
        for i in 0..n {
            for axis in 0..2 {
                let v = self.vel[i][axis];
                if v > 0.0 {
                    let t = (1.0 - self.radii[i] - self.pos[i][axis]) / v;
                    consider(t, Event::Wall(i, axis));
                } else if v < 0.0 {
                    let t = (self.radii[i] - self.pos[i][axis]) / v;
                    consider(t, Event::Wall(i, axis));
                }
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if let Some(t) = self.pair_contact_time(i, j) {
                    consider(t, Event::Pair(i, j));
                }
            }
        }
        best
    }

    /// Time until |p_i - p_j| = r_i + r_j for approaching balls.
    fn pair_contact_time(&self, i: usize, j: usize) -> Option<f64> {
        let dp = [
            self.pos[i][0] - self.pos[j][0],
            self.pos[i][1] - self.pos[j][1],
        ];
        let dv = [
            self.vel[i][0] - self.vel[j][0],
            self.vel[i][1] - self.vel[j][1],
        ];
        let r = self.radii[i] + self.radii[j];
        let b = dp[0] * dv[0] + dp[1] * dv[1];
        if b >= 0.0 {
            return None; // separating or parallel
        }
        let a = dv[0] * dv[0] + dv[1] * dv[1];
        let c0 = dp[0] * dp[0] + dp[1] * dp[1] - r * r;
        let disc = b * b - a * c0;
        if disc < 0.0 {
            return None;
        }
        let t = (-b - disc.sqrt()) / a;
        (t > 0.0).then_some(t)
    }

    fn drift(&mut self, t: f64) {
        for (p, v) in self.pos.iter_mut().zip(self.vel.iter()) {
            p[0] += v[0] * t;
            p[1] += v[1] * t;
        }
    }

    fn resolve_wall(&mut self, ball: usize, axis: usize) {
        self.vel[ball][axis] = -self.restitution * self.vel[ball][axis];
    }

    /// Equal-mass elastic collision with restitution along the contact
    /// normal.
    fn resolve_pair(&mut self, i: usize, j: usize) {
        let dp = [
            self.pos[i][0] - self.pos[j][0],
            self.pos[i][1] - self.pos[j][1],
        ];
        let dist = (dp[0] * dp[0] + dp[1] * dp[1]).sqrt();
        let n = [dp[0] / dist, dp[1] / dist];
        let dv = [
            self.vel[i][0] - self.vel[j][0],
            self.vel[i][1] - self.vel[j][1],
        ];
        let vn = dv[0] * n[0] + dv[1] * n[1];
        if vn >= 0.0 {
            return;
        }
        let impulse = (1.0 + self.restitution) * vn / 2.0;
        for axis in 0..2 {
            self.vel[i][axis] -= impulse * n[axis];
            self.vel[j][axis] += impulse * n[axis];
        }
    }

    /// Advances by `dt` (in frames), resolving events at exact times.
    /// Contact times are recorded relative to `t0`.
    fn advance(&mut self, dt: f64, t0: f64, contacts: &mut Vec<ContactEvent>) -> Result<()> {
        let mut remaining = dt;
        let mut elapsed = 0.0;
        for _ in 0..MAX_EVENTS_PER_SUBSTEP {
            match self.next_event(remaining) {
                Some((t, ev)) => {
                    self.drift(t);
                    elapsed += t;
                    remaining -= t;
                    match ev {
                        Event::Wall(ball, axis) => self.resolve_wall(ball, axis),
                        Event::Pair(i, j) => {
                            contacts.push(ContactEvent {
                                time: t0 + elapsed,
                                pair: (i, j),
                            });
                            self.resolve_pair(i, j);
                        }
                    }
                }
                None => {
                    self.drift(remaining);
                    return Ok(());
                }
            }
        }
        Err(Error::Generation(
            "event cascade did not terminate within the substep".into(),
        ))
    }

    fn states(&self) -> Vec<BallState> {
        self.pos
            .iter()
            .zip(self.vel.iter())
            .map(|(p, v)| BallState { pos: *p, vel: *v })
            .collect()
    }

}

fn place_balls(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Result<World> {
    let mut radii = Vec::with_capacity(cfg.num_balls);
    let mut pos: Vec<[f64; 2]> = Vec::with_capacity(cfg.num_balls);
    for _ in 0..cfg.num_balls {
        let r = rng.gen_range(cfg.radius_range.0..=cfg.radius_range.1);
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let p = [
                rng.gen_range(r..(1.0 - r)),
                rng.gen_range(r..(1.0 - r)),
            ];
            let ok = pos.iter().zip(radii.iter()).all(|(q, qr): (&[f64; 2], &f64)| {
                let dx = p[0] - q[0];
                let dy = p[1] - q[1];
                // small placement margin so nothing starts exactly in contact
                (dx * dx + dy * dy).sqrt() > r + qr + 0.01
            });
            if ok {
                pos.push(p);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(
                "could not place balls without overlap".into(),
            ));
        }
        radii.push(r);
    }
    let vel = (0..cfg.num_balls)
        .map(|_| {
            let speed = rng.gen_range(cfg.speed_range.0..=cfg.speed_range.1);
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            [speed * angle.cos(), speed * angle.sin()]
        })
        .collect();
    Ok(World {
        pos,
        vel,
        radii,
        restitution: cfg.restitution,
    })
}

/// Deterministic trajectory for (cfg, seed), covering context plus horizon
/// frames.
pub fn simulate(cfg: &SceneConfig, seed: u64) -> Result<Trajectory> {
    simulate_with_substeps(cfg, seed, SUBSTEPS_PER_FRAME)
}

/// Like [`simulate`] but with an explicit substep count; used by the label
/// soundness audit.
pub fn simulate_with_substeps(cfg: &SceneConfig, seed: u64, substeps: usize) -> Result<Trajectory> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ cfg.seed.rotate_left(17));
    let mut world = place_balls(cfg, &mut rng)?;
    let dt = 1.0 / substeps as f64;
    let mut frames = vec![world.states()];
    let mut contacts = Vec::new();
    for frame in 0..cfg.total_frames() - 1 {
        for sub in 0..substeps {
            let t0 = frame as f64 + sub as f64 * dt;
            world.advance(dt, t0, &mut contacts)?;
        }
        frames.push(world.states());
    }
    Ok(Trajectory {
        radii: world.radii,
        frames,
        contacts,
    })
}

/// True iff the designated pair makes contact at a time in
/// (frames_context, frames_context + frames_horizon].
pub fn ocp_label(
    traj: &Trajectory,
    pair: (usize, usize),
    frames_context: usize,
    frames_horizon: usize,
) -> Result<bool> {
    let n = traj.radii.len();
    let (i, j) = pair;
    if i >= n || j >= n || i == j {
        return Err(Error::InvalidInput(format!(
            "pair ({i},{j}) invalid for {n} balls"
        )));
    }
    let key = (i.min(j), i.max(j));
    let lo = frames_context as f64;
    let hi = (frames_context + frames_horizon) as f64;
    Ok(traj
        .contacts
        .iter()
        .any(|c| c.pair == key && c.time > lo && c.time <= hi))
}

/// Total kinetic energy at a stored frame (unit masses).
pub fn kinetic_energy(states: &[BallState]) -> f64 {
    states
        .iter()
        .map(|s| 0.5 * (s.vel[0] * s.vel[0] + s.vel[1] * s.vel[1]))
        .sum()
}
