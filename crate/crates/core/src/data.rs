//! Deterministic synthetic video: textured moving shapes with analytic
//! optical flow, distractor motion, and exact ground-truth masks.
//!
//! Velocities are integer pixels per frame and textures are attached to
//! object-local (or drift-shifted background) coordinates, so warping frame
//! `t` by the noise-free flow reproduces frame `t+1` exactly on object
//! pixels. Distractors move but are labeled background: their flow signature
//! is exactly the noise the mask-modulated attention is meant to suppress.

use crate::error::{SceneError, StorageError};
use crate::mask::BinaryMask;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rect,
    Disc,
}

/// One moving textured shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub kind: ShapeKind,
    /// Bounding-box side length in pixels.
    pub size: usize,
    /// Top-left corner at frame 0.
    pub start: (i32, i32),
    /// Pixels per frame, (vx, vy).
    pub velocity: (i32, i32),
    pub texture_seed: u64,
}

/// Full description of one synthetic sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// (height, width)
    pub canvas: (usize, usize),
    pub primary: ObjectSpec,
    pub distractors: Vec<ObjectSpec>,
    /// Background drift velocity (vx, vy).
    pub drift: (i32, i32),
    /// Additive Gaussian noise on (u, v), px/frame.
    pub flow_noise_std: f32,
    pub frames: usize,
    pub seed: u64,
}

/// One training/inference item.
#[derive(Debug, Clone)]
pub struct Sample {
    /// RGB frame in [0,1], `[3, H, W]`.
    pub image: Tensor,
    /// Flow field (u, v) in px/frame, `[2, H, W]`.
    pub flow: Tensor,
    /// Encoded flow image in [0,1], `[3, H, W]`.
    pub flow_rgb: Tensor,
    /// Primary-object footprint.
    pub gt: BinaryMask,
}

// --- texture hashing --------------------------------------------------------

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn hash01(seed: u64, a: u64, b: u64, c: u64) -> f32 {
    let h = splitmix64(seed ^ splitmix64(a ^ splitmix64(b ^ splitmix64(c))));
    (h >> 40) as f32 / (1u64 << 24) as f32
}

const BG_CELL: usize = 8;
const BG_BASE: f32 = 0.35;
const BG_AMP: f32 = 0.15;
/// Tone offset separating an object from the background it is camouflaged
/// against. Small on purpose: appearance alone should not be enough to pick
/// out objects reliably, motion has to contribute. The sign encodes the
/// label convention: the primary object is brighter than the background,
/// distractors are darker. Flow blobs look alike for both, so selecting the
/// target requires reading appearance at motion-salient locations.
const OBJ_TONE: f32 = 0.13;

/// Smooth wrapped value noise anchored to world coordinates.
fn background_color(seed: u64, h: usize, w: usize, y: i64, x: i64, ch: usize) -> f32 {
    let (lh, lw) = ((h / BG_CELL).max(1), (w / BG_CELL).max(1));
    let yw = y.rem_euclid(h as i64) as usize;
    let xw = x.rem_euclid(w as i64) as usize;
    let gy = yw as f32 / BG_CELL as f32;
    let gx = xw as f32 / BG_CELL as f32;
    let (gy0, gx0) = (gy.floor() as usize % lh, gx.floor() as usize % lw);
    let (gy1, gx1) = ((gy0 + 1) % lh, (gx0 + 1) % lw);
    let (ty, tx) = (gy.fract(), gx.fract());
    let v00 = hash01(seed, gy0 as u64, gx0 as u64, ch as u64);
    let v01 = hash01(seed, gy0 as u64, gx1 as u64, ch as u64);
    let v10 = hash01(seed, gy1 as u64, gx0 as u64, ch as u64);
    let v11 = hash01(seed, gy1 as u64, gx1 as u64, ch as u64);
    let top = v00 + (v01 - v00) * tx;
    let bot = v10 + (v11 - v10) * tx;
    BG_BASE + BG_AMP * (top + (bot - top) * ty)
}

/// Object color in object-local coordinates: the same smooth value-noise
/// family as the background (camouflage) shifted by the labeling tone,
/// anchored to the object so the texture translates rigidly with it.
fn object_color(tex_seed: u64, size: usize, primary: bool, ly: usize, lx: usize, ch: usize) -> f32 {
    let noise = background_color(tex_seed, size.max(BG_CELL), size.max(BG_CELL), ly as i64, lx as i64, ch);
    let tone = if primary { OBJ_TONE } else { -OBJ_TONE };
    (noise + tone).clamp(0.0, 1.0)
}

impl ObjectSpec {
    pub fn position(&self, t: usize) -> (i32, i32) {
        (
            self.start.0 + t as i32 * self.velocity.0,
            self.start.1 + t as i32 * self.velocity.1,
        )
    }

    fn covers(&self, ly: usize, lx: usize) -> bool {
        match self.kind {
            ShapeKind::Rect => true,
            ShapeKind::Disc => {
                let c = (self.size as f32 - 1.0) / 2.0;
                let r = self.size as f32 / 2.0;
                let (dy, dx) = (ly as f32 - c, lx as f32 - c);
                dy * dy + dx * dx <= r * r
            }
        }
    }
}

impl SceneSpec {
    /// Every object must stay at least one pixel inside the canvas for the
    /// whole sequence.
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.frames == 0 {
            return Err(SceneError::InvalidSpec {
                msg: "frames must be >= 1".into(),
            });
        }
        let (h, w) = self.canvas;
        if h < 16 || w < 16 {
            return Err(SceneError::InvalidSpec {
                msg: format!("canvas {h}x{w} too small"),
            });
        }
        for (label, obj) in std::iter::once(("primary", &self.primary))
            .chain(self.distractors.iter().map(|d| ("distractor", d)))
        {
            if obj.size < 2 {
                return Err(SceneError::InvalidSpec {
                    msg: format!("{label} size {} too small", obj.size),
                });
            }
            for t in [0, self.frames - 1] {
                let (x, y) = obj.position(t);
                let fits = x >= 1
                    && y >= 1
                    && x + obj.size as i32 <= w as i32 - 1
                    && y + obj.size as i32 <= h as i32 - 1;
                if !fits {
                    return Err(SceneError::OutOfBounds {
                        msg: format!("{label} at frame {t} occupies x={x} y={y} size={}", obj.size),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Renders every frame of a scene with its analytic flow and ground truth.
pub fn generate_sequence(spec: &SceneSpec) -> Result<Vec<Sample>, SceneError> {
    spec.validate()?;
    let (h, w) = spec.canvas;
    let plane = h * w;
    let bg_seed = splitmix64(spec.seed ^ 0xB6E1_5C83_97F0_41A3);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(splitmix64(spec.seed ^ 0x517C_C1B7_2722_0A95));
    let normal = Normal::new(0.0f32, 1.0).expect("valid");

    let mut samples = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let mut image = vec![0.0f32; 3 * plane];
        let mut flow = vec![0.0f32; 2 * plane];
        let mut gt = vec![0u8; plane];

        // background, drifting with the scene
        for y in 0..h {
            for x in 0..w {
                let wy = y as i64 - (t as i64) * spec.drift.1 as i64;
                let wx = x as i64 - (t as i64) * spec.drift.0 as i64;
                for ch in 0..3 {
                    image[ch * plane + y * w + x] = background_color(bg_seed, h, w, wy, wx, ch);
                }
                flow[y * w + x] = spec.drift.0 as f32;
                flow[plane + y * w + x] = spec.drift.1 as f32;
            }
        }

        // distractors first, primary last so it is never occluded
        let stamp = |obj: &ObjectSpec,
                     primary: bool,
                     image: &mut [f32],
                     flow: &mut [f32],
                     gt: &mut Option<&mut [u8]>| {
            let (px, py) = obj.position(t);
            for ly in 0..obj.size {
                for lx in 0..obj.size {
                    if !obj.covers(ly, lx) {
                        continue;
                    }
                    let (y, x) = ((py + ly as i32) as usize, (px + lx as i32) as usize);
                    for ch in 0..3 {
                        image[ch * plane + y * w + x] =
                            object_color(obj.texture_seed, obj.size, primary, ly, lx, ch);
                    }
                    flow[y * w + x] = obj.velocity.0 as f32;
                    flow[plane + y * w + x] = obj.velocity.1 as f32;
                    if let Some(g) = gt {
                        g[y * w + x] = 1;
                    }
                }
            }
        };
        for d in &spec.distractors {
            stamp(d, false, &mut image, &mut flow, &mut None);
        }
        stamp(&spec.primary, true, &mut image, &mut flow, &mut Some(&mut gt));

        if spec.flow_noise_std > 0.0 {
            for v in flow.iter_mut() {
                *v += normal.sample(&mut noise_rng) * spec.flow_noise_std;
            }
        }

        let flow = Tensor::new(vec![2, h, w], flow).expect("dims agree");
        let flow_rgb = flow_to_rgb(&flow);
        samples.push(Sample {
            image: Tensor::new(vec![3, h, w], image).expect("dims agree"),
            flow_rgb,
            flow,
            gt: BinaryMask::new(h, w, gt),
        });
    }
    Ok(samples)
}

/// Encodes a flow field into a 3-channel [0,1] image. With `m` the field
/// maximum of `max(|u|, |v|)` (floored at epsilon): channel 0 is
/// `0.5 + u/2m`, channel 1 is `0.5 + v/2m`, channel 2 is the normalized
/// magnitude `sqrt(u^2+v^2)/(sqrt(2) m)`. Invariant to positive global flow
/// scaling.
pub fn flow_to_rgb(flow: &Tensor) -> Tensor {
    let [two, h, w] = *flow.shape() else {
        panic!("flow_to_rgb expects [2,H,W], got {:?}", flow.shape());
    };
    assert_eq!(two, 2);
    let plane = h * w;
    let d = flow.data();
    let mut m = 1e-6f32;
    for &v in d {
        m = m.max(v.abs());
    }
    let mut out = vec![0.0f32; 3 * plane];
    for p in 0..plane {
        let (u, v) = (d[p], d[plane + p]);
        out[p] = (0.5 + u / (2.0 * m)).clamp(0.0, 1.0);
        out[plane + p] = (0.5 + v / (2.0 * m)).clamp(0.0, 1.0);
        out[2 * plane + p] = ((u * u + v * v).sqrt() / (std::f32::consts::SQRT_2 * m)).clamp(0.0, 1.0);
    }
    Tensor::new(vec![3, h, w], out).expect("dims agree")
}

// --- split construction ------------------------------------------------------

/// Knobs for scene sampling shared by a whole split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    /// Square canvas side.
    pub size: usize,
    pub frames: usize,
    pub distractors: usize,
    pub noise_std: f32,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            size: 64,
            frames: 8,
            distractors: 2,
            noise_std: 0.5,
        }
    }
}

const PRIMARY_SIZES: std::ops::RangeInclusive<usize> = 16..=24;
const DISTRACTOR_SIZES: std::ops::RangeInclusive<usize> = 10..=16;

fn random_velocity(rng: &mut ChaCha8Rng, forbid: (i32, i32)) -> (i32, i32) {
    loop {
        let v = (rng.gen_range(-2..=2), rng.gen_range(-2..=2));
        if v != (0, 0) && v != forbid {
            return v;
        }
    }
}

fn random_object(
    rng: &mut ChaCha8Rng,
    sizes: std::ops::RangeInclusive<usize>,
    canvas: (usize, usize),
    frames: usize,
    drift: (i32, i32),
) -> Result<ObjectSpec, SceneError> {
    let (h, w) = canvas;
    let span = frames.saturating_sub(1) as i32;
    for _ in 0..200 {
        let size = rng.gen_range(sizes.clone());
        let velocity = random_velocity(rng, drift);
        let range = |extent: usize, v: i32| -> Option<(i32, i32)> {
            let lo = 1 + 0.max(-v * span);
            let hi = extent as i32 - 1 - size as i32 - 0.max(v * span);
            (hi >= lo).then_some((lo, hi))
        };
        let (Some((lx, hx)), Some((ly, hy))) = (range(w, velocity.0), range(h, velocity.1)) else {
            continue;
        };
        return Ok(ObjectSpec {
            kind: if rng.gen_bool(0.5) { ShapeKind::Disc } else { ShapeKind::Rect },
            size,
            start: (rng.gen_range(lx..=hx), rng.gen_range(ly..=hy)),
            velocity,
            texture_seed: rng.gen(),
        });
    }
    Err(SceneError::InvalidSpec {
        msg: format!("no feasible trajectory on a {h}x{w} canvas over {frames} frames"),
    })
}

/// Builds one scene deterministically from its seed.
pub fn random_scene(seed: u64, params: &SynthParams) -> Result<SceneSpec, SceneError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let canvas = (params.size, params.size);
    let drift = (rng.gen_range(-1..=1), rng.gen_range(-1..=1));
    let primary = random_object(&mut rng, PRIMARY_SIZES, canvas, params.frames, drift)?;
    let distractors = (0..params.distractors)
        .map(|_| random_object(&mut rng, DISTRACTOR_SIZES, canvas, params.frames, drift))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SceneSpec {
        canvas,
        primary,
        distractors,
        drift,
        flow_noise_std: params.noise_std,
        frames: params.frames,
        seed,
    })
}

/// Deterministic, disjoint train/val scene lists. Every third validation
/// scene gets an extra distractor and every third gets 1.5x the flow
/// noise, so the held-out set stresses both failure modes.
pub fn make_splits(
    n_train: usize,
    n_val: usize,
    base_seed: u64,
    params: &SynthParams,
) -> Result<(Vec<SceneSpec>, Vec<SceneSpec>), SceneError> {
    let total = n_train + n_val;
    let mut seeds = Vec::with_capacity(total);
    let mut seen = std::collections::HashSet::with_capacity(total);
    let mut i = 0u64;
    while seeds.len() < total {
        let s = splitmix64(base_seed.wrapping_add(i.wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        if seen.insert(s) {
            seeds.push(s);
        }
        i += 1;
    }
    let train = seeds[..n_train]
        .iter()
        .map(|&s| random_scene(s, params))
        .collect::<Result<Vec<_>, _>>()?;
    let val = seeds[n_train..]
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let p = match i % 3 {
                1 => SynthParams {
                    distractors: params.distractors + 1,
                    ..*params
                },
                2 => SynthParams {
                    noise_std: params.noise_std * 1.5,
                    ..*params
                },
                _ => *params,
            };
            random_scene(s, &p)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((train, val))
}

// --- on-disk dataset ----------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub split: String,
    pub name: String,
    pub seed: u64,
    pub distractors: usize,
    pub noise_std: f32,
    pub frames: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub size: usize,
    pub frames: usize,
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub distractors: usize,
    pub noise_std: f32,
    pub sequences: Vec<SequenceMeta>,
}

/// Writes a dataset tree: `dir/{train,val}/seq_XXX/frame_XXX.{ppm,tsr,pgm}`
/// plus `manifest.json`. Encoded flow images are regenerated on load rather
/// than stored.
pub fn write_dataset(
    dir: &Path,
    train: &[SceneSpec],
    val: &[SceneSpec],
    params: &SynthParams,
    seed: u64,
) -> Result<DatasetManifest, StorageError> {
    let mut sequences = Vec::new();
    for (split, specs) in [("train", train), ("val", val)] {
        for (i, spec) in specs.iter().enumerate() {
            let name = format!("seq_{i:03}");
            let seq_dir = dir.join(split).join(&name);
            std::fs::create_dir_all(&seq_dir).map_err(|e| StorageError::Io {
                path: seq_dir.display().to_string(),
                source: e,
            })?;
            let samples = generate_sequence(spec).map_err(|e| StorageError::Other {
                path: seq_dir.display().to_string(),
                msg: e.to_string(),
            })?;
            for (t, s) in samples.iter().enumerate() {
                let stem = format!("frame_{t:03}");
                crate::io::write_ppm(&seq_dir.join(format!("{stem}.ppm")), &s.image)?;
                crate::io::write_tsr(&seq_dir.join(format!("{stem}.tsr")), &s.flow)?;
                crate::io::write_pgm_mask(&seq_dir.join(format!("{stem}.pgm")), &s.gt)?;
            }
            sequences.push(SequenceMeta {
                split: split.to_string(),
                name,
                seed: spec.seed,
                distractors: spec.distractors.len(),
                noise_std: spec.flow_noise_std,
                frames: spec.frames,
            });
        }
    }
    let manifest = DatasetManifest {
        size: params.size,
        frames: params.frames,
        seed,
        n_train: train.len(),
        n_val: val.len(),
        distractors: params.distractors,
        noise_std: params.noise_std,
        sequences,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    crate::io::atomic_write(&dir.join("manifest.json"), &json)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest, StorageError> {
    let path = dir.join("manifest.json");
    let bytes = std::fs::read(&path).map_err(|e| StorageError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    serde_json::from_slice(&bytes).map_err(|e| StorageError::Other {
        path: path.display().to_string(),
        msg: format!("invalid manifest: {e}"),
    })
}

/// Loads one sequence directory back into samples.
pub fn read_sequence(seq_dir: &Path) -> Result<Vec<Sample>, StorageError> {
    let mut stems: Vec<String> = std::fs::read_dir(seq_dir)
        .map_err(|e| StorageError::Io {
            path: seq_dir.display().to_string(),
            source: e,
        })?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_suffix(".ppm").map(str::to_string)
        })
        .collect();
    stems.sort();
    let mut samples = Vec::with_capacity(stems.len());
    for stem in stems {
        let image = crate::io::read_ppm(&seq_dir.join(format!("{stem}.ppm")))?;
        let flow = crate::io::read_tsr(&seq_dir.join(format!("{stem}.tsr")))?;
        let gt = crate::io::read_pgm_mask(&seq_dir.join(format!("{stem}.pgm")))?;
        let flow_rgb = flow_to_rgb(&flow);
        samples.push(Sample {
            image,
            flow,
            flow_rgb,
            gt,
        });
    }
    Ok(samples)
}

/// Loads every sample of a split, flattened over sequences.
pub fn read_split(dir: &Path, split: &str) -> Result<Vec<Sample>, StorageError> {
    let split_dir = dir.join(split);
    let mut seq_dirs: Vec<std::path::PathBuf> = std::fs::read_dir(&split_dir)
        .map_err(|e| StorageError::Io {
            path: split_dir.display().to_string(),
            source: e,
        })?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    seq_dirs.sort();
    let mut out = Vec::new();
    for d in seq_dirs {
        out.extend(read_sequence(&d)?);
    }
    Ok(out)
}
