//! Reproducible synthetic driving sequences: moving boxes around a moving
//! ego vehicle on a plane, rasterized observations, and on-disk datasets.

mod dataset;
mod raster;

pub use dataset::{read_dataset, read_sequence_file, write_dataset, Dataset, Manifest, SequenceEntry, DATASET_SCHEMA_VERSION};
pub use raster::{obs_channels, rasterize_boxes, rasterize_in_frame, NoiseConfig, ObservationGrid};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, pose_relative, transform_boxes, BevGridSpec};

/// One 3D object. Planar center `(x, y)`, height center `z`, sizes, yaw,
/// planar velocity, class and track identity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub yaw: f64,
    pub vx: f64,
    pub vy: f64,
    pub cls: usize,
    pub track_id: u32,
}

/// Ego pose in the world frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoPose {
    pub px: f64,
    pub py: f64,
    pub heading: f64,
    pub frame_index: usize,
}

/// Ego trajectory plus per-frame ground truth, each frame's boxes expressed
/// in that frame's ego coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSequence {
    pub poses: Vec<EgoPose>,
    pub gt: Vec<Vec<Box3D>>,
    pub dt: f64,
    pub seed: u64,
}

impl SceneSequence {
    pub fn frames(&self) -> usize {
        self.poses.len()
    }

    pub fn object_count(&self) -> usize {
        self.gt.iter().map(Vec::len).sum()
    }

    pub(crate) fn check_frame(&self, frame: usize) -> Result<()> {
        if frame >= self.frames() {
            return Err(Error::Index(format!(
                "frame {frame} outside sequence of {} frames",
                self.frames()
            )));
        }
        Ok(())
    }

    /// Ground truth of `source` re-expressed in `reference`'s ego frame.
    pub fn boxes_in_frame(&self, source: usize, reference: usize) -> Result<Vec<Box3D>> {
        self.check_frame(source)?;
        self.check_frame(reference)?;
        let t = pose_relative(&self.poses[reference], &self.poses[source]);
        Ok(transform_boxes(&self.gt[source], &t))
    }
}

/// Sequence generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    /// Frames per sequence.
    pub frames: usize,
    /// Seconds per frame.
    pub dt: f64,
    /// Side length (m) of the square region, centred on the frame-0 ego, in
    /// which objects are placed.
    pub extent: f64,
    pub objects_min: usize,
    pub objects_max: usize,
    /// Object speed range (m/s) before the per-class scale.
    pub speed_min: f64,
    pub speed_max: f64,
    pub ego_speed_min: f64,
    pub ego_speed_max: f64,
    /// Ego yaw-rate range (rad/s).
    pub ego_turn_min: f64,
    pub ego_turn_max: f64,
    pub classes: usize,
    /// Per-axis bound (m) of uniform position noise added at every step.
    pub process_noise: f64,
    /// Number of sequences `cmd generate` writes.
    pub sequences: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            frames: 6,
            dt: 0.5,
            extent: 44.0,
            objects_min: 4,
            objects_max: 10,
            speed_min: 0.0,
            speed_max: 8.0,
            ego_speed_min: 0.0,
            ego_speed_max: 8.0,
            ego_turn_min: -0.2,
            ego_turn_max: 0.2,
            classes: 3,
            process_noise: 0.05,
            sequences: 232,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.frames < 2 {
            return bad("frames must be >= 2 (at least one history frame)");
        }
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if !(self.extent > 0.0) {
            return bad("extent must be positive");
        }
        if self.objects_min > self.objects_max {
            return bad("objects_min > objects_max");
        }
        if self.classes == 0 {
            return bad("classes must be >= 1");
        }
        if !(self.speed_min >= 0.0 && self.speed_min <= self.speed_max) {
            return bad("speed range invalid");
        }
        if !(self.ego_speed_min >= 0.0 && self.ego_speed_min <= self.ego_speed_max) {
            return bad("ego speed range invalid");
        }
        if !(self.ego_turn_min <= self.ego_turn_max) {
            return bad("ego turn range invalid");
        }
        if !(self.process_noise >= 0.0) {
            return bad("process_noise must be >= 0");
        }
        Ok(())
    }

    /// Checks that the placement region fits the grid.
    pub fn validate_against(&self, grid: &BevGridSpec) -> Result<()> {
        if self.extent > grid.extent() {
            return Err(Error::Config(format!(
                "world extent {} m exceeds grid extent {} m",
                self.extent,
                grid.extent()
            )));
        }
        Ok(())
    }
}

/// Size template `(w, l, h)` and speed scale for a class.
fn class_template(cls: usize) -> ([f64; 3], f64) {
    const TEMPLATES: [([f64; 3], f64); 3] = [
        ([1.9, 4.5, 1.6], 1.0), // car
        ([0.7, 0.7, 1.75], 0.2), // pedestrian
        ([0.8, 1.8, 1.5], 0.6), // cyclist
    ];
    let (dims, speed) = TEMPLATES[cls % 3];
    let grow = 1.0 + 0.15 * (cls / 3) as f64;
    ([dims[0] * grow, dims[1] * grow, dims[2] * grow], speed)
}

/// Rounds through `f32` so that persisting as 32-bit floats is lossless.
pub(crate) fn q32(v: f64) -> f64 {
    v as f32 as f64
}

/// `q32` for angles, kept inside `(-pi, pi]` after rounding.
pub(crate) fn q32_angle(a: f64) -> f64 {
    let r = q32(normalize_angle(a));
    if r > std::f64::consts::PI {
        f64::from(f32::from_bits(std::f32::consts::PI.to_bits() - 1))
    } else if r <= -std::f64::consts::PI {
        -f64::from(f32::from_bits(std::f32::consts::PI.to_bits() - 1))
    } else {
        r
    }
}

/// Mixes several integers into one seed (splitmix64 finalizer chain).
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Generates one sequence. The ego starts at the world origin heading `+x`
/// and drives with constant speed and yaw rate; objects move with constant
/// velocity plus bounded position noise.
pub fn generate_scene(seed: u64, cfg: &WorldConfig) -> Result<SceneSequence> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let ego_speed = uniform(&mut rng, cfg.ego_speed_min, cfg.ego_speed_max);
    let ego_turn = uniform(&mut rng, cfg.ego_turn_min, cfg.ego_turn_max);
    let mut poses = Vec::with_capacity(cfg.frames);
    let (mut px, mut py, mut heading) = (0.0f64, 0.0f64, 0.0f64);
    for f in 0..cfg.frames {
        poses.push(EgoPose {
            px: q32(px),
            py: q32(py),
            heading: q32_angle(heading),
            frame_index: f,
        });
        px += ego_speed * cfg.dt * heading.cos();
        py += ego_speed * cfg.dt * heading.sin();
        heading += ego_turn * cfg.dt;
    }

    let n_obj = if cfg.objects_max > cfg.objects_min {
        rng.random_range(cfg.objects_min..=cfg.objects_max)
    } else {
        cfg.objects_min
    };
    let half = cfg.extent / 2.0;
    let margin = half.min(1.0);
    let mut world: Vec<Box3D> = Vec::with_capacity(n_obj);
    for id in 0..n_obj {
        let cls = rng.random_range(0..cfg.classes);
        let (dims, speed_scale) = class_template(cls);
        let mut placed = None;
        for _ in 0..100 {
            let x = uniform(&mut rng, -half + margin, half - margin);
            let y = uniform(&mut rng, -half + margin, half - margin);
            if world.iter().all(|b| (b.x - x).hypot(b.y - y) > 2.5) {
                placed = Some((x, y));
                break;
            }
        }
        let Some((x, y)) = placed else { continue };
        let size = |d: f64, rng: &mut ChaCha8Rng| d * uniform(rng, 0.9, 1.1);
        let (w, l, h) = (size(dims[0], &mut rng), size(dims[1], &mut rng), size(dims[2], &mut rng));
        let speed = uniform(&mut rng, cfg.speed_min, cfg.speed_max) * speed_scale;
        let dir = uniform(&mut rng, -std::f64::consts::PI, std::f64::consts::PI);
        let yaw = if speed > 0.0 {
            dir
        } else {
            uniform(&mut rng, -std::f64::consts::PI, std::f64::consts::PI)
        };
        world.push(Box3D {
            x,
            y,
            z: h / 2.0,
            w,
            l,
            h,
            yaw: normalize_angle(yaw),
            vx: speed * dir.cos(),
            vy: speed * dir.sin(),
            cls,
            track_id: id as u32,
        });
    }

    let mut gt = Vec::with_capacity(cfg.frames);
    let origin = EgoPose {
        px: 0.0,
        py: 0.0,
        heading: 0.0,
        frame_index: 0,
    };
    for (f, pose) in poses.iter().enumerate() {
        if f > 0 {
            for b in world.iter_mut() {
                let nx = uniform(&mut rng, -cfg.process_noise, cfg.process_noise);
                let ny = uniform(&mut rng, -cfg.process_noise, cfg.process_noise);
                b.x += b.vx * cfg.dt + nx;
                b.y += b.vy * cfg.dt + ny;
            }
        }
        let to_ego = pose_relative(pose, &origin);
        let boxes = transform_boxes(&world, &to_ego)
            .into_iter()
            .map(|b| Box3D {
                x: q32(b.x),
                y: q32(b.y),
                z: q32(b.z),
                w: q32(b.w),
                l: q32(b.l),
                h: q32(b.h),
                yaw: q32_angle(b.yaw),
                vx: q32(b.vx),
                vy: q32(b.vy),
                ..b
            })
            .collect();
        gt.push(boxes);
    }

    Ok(SceneSequence {
        poses,
        gt,
        dt: q32(cfg.dt),
        seed,
    })
}

/// Sequence seeds used by `cmd generate`: sequence `i` of a dataset seeded
/// with `seed` uses `mix_seed(&[seed, i])`.
pub fn sequence_seed(dataset_seed: u64, index: usize) -> u64 {
    mix_seed(&[dataset_seed, index as u64])
}

/// Generates `cfg.sequences` sequences.
pub fn generate_dataset(dataset_seed: u64, cfg: &WorldConfig) -> Result<Vec<SceneSequence>> {
    (0..cfg.sequences)
        .map(|i| generate_scene(sequence_seed(dataset_seed, i), cfg))
        .collect()
}
