//! Moving textured blobs whose classes differ only in motion.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, Split, VideoClip};
use crate::error::{MooseError, Result};
use crate::tensor::Tensor;

/// Largest displacement per frame the flow solver's linearisation handles.
pub const MAX_SPEED: f64 = 2.0;

const BACKGROUND: f64 = 0.15;
const FOREGROUND: f64 = 0.5;
const TEXTURE_AMPLITUDE: f64 = 0.3;
/// Width of the blob's soft edge, in pixels.
const EDGE: f64 = 0.8;
const WAVES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MotionClass {
    MoveRight,
    MoveLeft,
    MoveUp,
    MoveDown,
    /// Upright bar sweeping left to right.
    SweepLr,
    /// Frame-order reversal of a [`MotionClass::SweepLr`] clip.
    SweepRl,
}

impl MotionClass {
    pub const ALL: [MotionClass; 6] = [
        MotionClass::MoveRight,
        MotionClass::MoveLeft,
        MotionClass::MoveUp,
        MotionClass::MoveDown,
        MotionClass::SweepLr,
        MotionClass::SweepRl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MotionClass::MoveRight => "move_right",
            MotionClass::MoveLeft => "move_left",
            MotionClass::MoveUp => "move_up",
            MotionClass::MoveDown => "move_down",
            MotionClass::SweepLr => "sweep_lr",
            MotionClass::SweepRl => "sweep_rl",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        MotionClass::ALL.into_iter().find(|c| c.name() == name)
    }

    /// Unit direction of motion in image coordinates (y grows downward).
    fn direction(self) -> (f64, f64) {
        match self {
            MotionClass::MoveRight | MotionClass::SweepLr => (1.0, 0.0),
            MotionClass::MoveLeft | MotionClass::SweepRl => (-1.0, 0.0),
            MotionClass::MoveUp => (0.0, -1.0),
            MotionClass::MoveDown => (0.0, 1.0),
        }
    }

    /// Class of the horizontally mirrored clip.
    pub fn mirrored(self) -> Self {
        match self {
            MotionClass::MoveRight => MotionClass::MoveLeft,
            MotionClass::MoveLeft => MotionClass::MoveRight,
            MotionClass::SweepLr => MotionClass::SweepRl,
            MotionClass::SweepRl => MotionClass::SweepLr,
            other => other,
        }
    }

    fn is_sweep(self) -> bool {
        matches!(self, MotionClass::SweepLr | MotionClass::SweepRl)
    }

    fn code(self) -> u64 {
        self as u64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassSet {
    /// The four translation directions.
    Directions,
    /// `sweep_lr` / `sweep_rl`, separable only by frame order.
    Reversal,
    /// Both of the above.
    All,
}

impl ClassSet {
    pub fn classes(self) -> Vec<MotionClass> {
        let all = MotionClass::ALL;
        match self {
            ClassSet::Directions => all[..4].to_vec(),
            ClassSet::Reversal => all[4..].to_vec(),
            ClassSet::All => all.to_vec(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassSet::Directions => "directions",
            ClassSet::Reversal => "reversal",
            ClassSet::All => "all",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [ClassSet::Directions, ClassSet::Reversal, ClassSet::All]
            .into_iter()
            .find(|c| c.name() == name)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub classes: ClassSet,
    /// Number of fused units `T`; clips carry `T + 1` frames.
    pub frames: usize,
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    /// Blob radius in pixels. Sweep bars are narrower and taller.
    pub blob_radius: f64,
    /// Pixels per frame.
    pub speed: f64,
    pub noise_sigma: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: ClassSet::Directions,
            frames: 8,
            channels: 1,
            width: 32,
            height: 32,
            blob_radius: 6.0,
            speed: 1.5,
            noise_sigma: 0.02,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.speed > 0.0 && self.speed <= MAX_SPEED) {
            return Err(MooseError::invalid(format!(
                "speed must lie in (0, {MAX_SPEED}] px/frame, got {}",
                self.speed
            )));
        }
        if self.frames == 0 || self.width < 3 || self.height < 3 {
            return Err(MooseError::invalid(
                "clip needs T >= 1 and frames of at least 3x3",
            ));
        }
        if !matches!(self.channels, 1 | 3) {
            return Err(MooseError::invalid(format!(
                "channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        if !(self.blob_radius > 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(MooseError::invalid(
                "blob radius must be > 0 and noise sigma >= 0",
            ));
        }
        Ok(())
    }

    fn radii(&self, class: MotionClass) -> (f64, f64) {
        if class.is_sweep() {
            (0.6 * self.blob_radius, 1.4 * self.blob_radius)
        } else {
            (self.blob_radius, self.blob_radius)
        }
    }
}

/// Smooth random field in `[-1, 1]`: a normalised sum of plane waves with
/// wavelengths between 10 and 20 pixels, long enough for
/// the linearised flow solver to follow 2 px shifts.
#[derive(Clone, Debug)]
pub struct Texture {
    waves: Vec<(f64, f64, f64, f64)>,
    norm: f64,
}

impl Texture {
    pub fn random(rng: &mut impl Rng) -> Self {
        let mut waves = Vec::with_capacity(WAVES);
        for _ in 0..WAVES {
            let wavelength = rng.random_range(10.0..20.0);
            let angle = rng.random_range(0.0..PI);
            let k = 2.0 * PI / wavelength;
            let amp = rng.random_range(0.5..1.0);
            let phase = rng.random_range(0.0..2.0 * PI);
            waves.push((k * angle.cos(), k * angle.sin(), phase, amp));
        }
        let norm = waves.iter().map(|w| w.3).sum();
        Texture { waves, norm }
    }

    pub fn at(&self, x: f64, y: f64) -> f64 {
        self.waves
            .iter()
            .map(|&(kx, ky, phase, amp)| amp * (kx * x + ky * y + phase).sin())
            .sum::<f64>()
            / self.norm
    }
}

/// Renders a full-frame texture translated by `(dx, dy)`; used for flow
/// checks with exact ground-truth displacement.
pub fn textured_frame(texture: &Texture, width: usize, height: usize, dx: f64, dy: f64) -> Tensor {
    Tensor::from_fn(&[1, height, width], |k| {
        let (x, y) = ((k % width) as f64 - dx, (k / width) as f64 - dy);
        0.5 + 0.35 * texture.at(x, y)
    })
}

/// Mixes a master seed and a per-clip key into an independent stream seed.
pub fn derive_seed(master: u64, key: u64) -> u64 {
    let mut z = master ^ key.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn clip_key(class: MotionClass, index: usize) -> u64 {
    (class.code() << 32) | index as u64
}

fn start_range(lo: f64, hi: f64, travel: f64) -> Option<(f64, f64)> {
    // `travel` may be negative; the start must keep every position in range.
    let (a, b) = if travel >= 0.0 {
        (lo, hi - travel)
    } else {
        (lo - travel, hi)
    };
    (a <= b).then_some((a, b))
}

/// Renders the `T + 1` frames of one clip from its seed.
pub fn render_clip(spec: &SyntheticSpec, class: MotionClass, seed: u64) -> Result<Tensor> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // reversed sweeps are rendered as their forward counterpart
    let drawn = if class == MotionClass::SweepRl {
        MotionClass::SweepLr
    } else {
        class
    };
    let (rx, ry) = spec.radii(drawn);
    let (dir_x, dir_y) = drawn.direction();
    let steps = spec.frames as f64;
    let (w, h) = (spec.width as f64, spec.height as f64);
    let range_x = start_range(rx + 1.0, w - 2.0 - rx, dir_x * spec.speed * steps);
    let range_y = start_range(ry + 1.0, h - 2.0 - ry, dir_y * spec.speed * steps);
    let (Some((x0, x1)), Some((y0, y1))) = (range_x, range_y) else {
        return Err(MooseError::invalid(format!(
            "blob of radius {:.1}x{:.1} cannot travel {} frames at {} px/frame inside {}x{}",
            rx, ry, spec.frames, spec.speed, spec.width, spec.height
        )));
    };
    let cx0 = if x1 > x0 {
        rng.random_range(x0..=x1)
    } else {
        x0
    };
    let cy0 = if y1 > y0 {
        rng.random_range(y0..=y1)
    } else {
        y0
    };
    let texture = Texture::random(&mut rng);
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let gains: Vec<f64> = (0..spec.channels)
        .map(|c| {
            if c == 0 {
                1.0
            } else {
                rng.random_range(0.7..1.0)
            }
        })
        .collect();

    let (fw, fh) = (spec.width, spec.height);
    let plane = fw * fh;
    let count = spec.frames + 1;
    let mut data = Vec::with_capacity(count * spec.channels * plane);
    for t in 0..count {
        let cx = cx0 + dir_x * spec.speed * t as f64;
        let cy = cy0 + dir_y * spec.speed * t as f64;
        let mut intensity = vec![0.0; plane];
        for (p, value) in intensity.iter_mut().enumerate() {
            let (dx, dy) = ((p % fw) as f64 - cx, (p / fw) as f64 - cy);
            let dist = ((dx / rx).powi(2) + (dy / ry).powi(2)).sqrt();
            let window = 1.0 / (1.0 + ((dist - 1.0) * rx.min(ry) / EDGE).exp());
            *value = BACKGROUND + window * (FOREGROUND + TEXTURE_AMPLITUDE * texture.at(dx, dy));
        }
        for &g in &gains {
            for &v in &intensity {
                let n = if spec.noise_sigma > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                data.push((g * v + n).clamp(0.0, 1.0));
            }
        }
    }
    let mut frames = Tensor::new(&[count, spec.channels, fh, fw], data)?;
    if class == MotionClass::SweepRl {
        frames = reverse_frames(&frames)?;
    }
    Ok(frames)
}

/// Reverses the leading (time) axis.
pub fn reverse_frames(frames: &Tensor) -> Result<Tensor> {
    let count = frames.shape()[0];
    let slabs = (0..count)
        .rev()
        .map(|t| frames.slab(t))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&slabs)
}

/// Mirrors every image of a `[... × H × W]` stack left to right.
pub fn flip_horizontal(frames: &Tensor) -> Tensor {
    let w = *frames.shape().last().expect("image stack");
    let mut data = frames.data().to_vec();
    data.chunks_exact_mut(w).for_each(<[f64]>::reverse);
    Tensor::new(frames.shape(), data).expect("same shape")
}

fn split_sizes(count: usize) -> (usize, usize) {
    let train = (0.70 * count as f64).round() as usize;
    let val = (0.15 * count as f64).round() as usize;
    (train.min(count), val.min(count - train.min(count)))
}

/// Generates `count` clips per class with a seeded 70/15/15 split per class.
/// A reversed sweep clip shares its forward partner's seed and split.
pub fn generate(spec: &SyntheticSpec, count: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if count == 0 {
        return Err(MooseError::invalid("need at least one clip per class"));
    }
    let classes = spec.classes.classes();
    let mut split_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX));
    let mut dataset = Dataset::new(classes.clone());
    let mut sweep_assignment: Option<Vec<Split>> = None;
    for (label, &class) in classes.iter().enumerate() {
        let assignment = match (class, &sweep_assignment) {
            (MotionClass::SweepRl, Some(a)) => a.clone(),
            _ => {
                let mut order: Vec<usize> = (0..count).collect();
                for i in (1..count).rev() {
                    order.swap(i, split_rng.random_range(0..=i));
                }
                let (n_train, n_val) = split_sizes(count);
                let mut a = vec![Split::Test; count];
                for (rank, &i) in order.iter().enumerate() {
                    a[i] = if rank < n_train {
                        Split::Train
                    } else if rank < n_train + n_val {
                        Split::Val
                    } else {
                        Split::Test
                    };
                }
                if class == MotionClass::SweepLr {
                    sweep_assignment = Some(a.clone());
                }
                a
            }
        };
        let key_class = if class == MotionClass::SweepRl {
            MotionClass::SweepLr
        } else {
            class
        };
        for (i, &split) in assignment.iter().enumerate() {
            let clip_seed = derive_seed(seed, clip_key(key_class, i));
            let frames = render_clip(spec, class, clip_seed)?;
            dataset.push(
                split,
                VideoClip {
                    id: format!("{}_{i:05}", class.name()),
                    label,
                    class,
                    frames,
                    frame_interval: 1.0,
                    seed: clip_seed,
                },
            );
        }
    }
    Ok(dataset)
}
