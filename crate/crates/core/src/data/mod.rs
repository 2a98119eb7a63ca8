//! Clips, dataset splits and their on-disk layout.
//!
//! A saved dataset looks like
//!
//! ```text
//! <root>/manifest.csv            id,class,split,seed
//! <root>/<split>/<class>/<id>.mtsr
//! ```

pub mod synthetic;
pub mod tensor_file;

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

pub use synthetic::{flip_horizontal, generate, ClassSet, MotionClass, SyntheticSpec};
pub use tensor_file::{read_tensor, write_tensor};

use crate::error::{MooseError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = MooseError;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| MooseError::invalid(format!("unknown split `{s}` (train|val|test)")))
    }
}

/// `T + 1` frames `[(T+1) × C × H × W]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub id: String,
    /// Index into the dataset's class list.
    pub label: usize,
    pub class: MotionClass,
    pub frames: Tensor,
    /// Time between consecutive frames; the clip spans `T · frame_interval`.
    pub frame_interval: f64,
    pub seed: u64,
}

impl VideoClip {
    /// Number of video units `T` (one fewer than the frame count).
    pub fn units(&self) -> usize {
        self.frames.shape()[0] - 1
    }

    /// Left-right mirror image with its label remapped within `classes`;
    /// `None` when the mirrored class is not among them.
    pub fn mirrored(&self, classes: &[MotionClass]) -> Option<VideoClip> {
        let class = self.class.mirrored();
        let label = classes.iter().position(|&c| c == class)?;
        Some(VideoClip {
            id: format!("{}_flip", self.id),
            label,
            class,
            frames: flip_horizontal(&self.frames),
            frame_interval: self.frame_interval,
            seed: self.seed,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub classes: Vec<MotionClass>,
    pub train: Vec<VideoClip>,
    pub val: Vec<VideoClip>,
    pub test: Vec<VideoClip>,
}

impl Dataset {
    pub fn new(classes: Vec<MotionClass>) -> Self {
        Dataset {
            classes,
            ..Dataset::default()
        }
    }

    pub fn push(&mut self, split: Split, clip: VideoClip) {
        self.split_mut(split).push(clip);
    }

    pub fn split(&self, split: Split) -> &[VideoClip] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, split: Split) -> &mut Vec<VideoClip> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn find(&self, id: &str) -> Option<(Split, &VideoClip)> {
        Split::ALL
            .into_iter()
            .find_map(|s| self.split(s).iter().find(|c| c.id == id).map(|c| (s, c)))
    }

    pub fn save(&self, root: impl AsRef<Path>) -> Result<()> {
        let root = root.as_ref();
        let mut manifest = String::from("id,class,split,seed\n");
        for split in Split::ALL {
            for clip in self.split(split) {
                let dir = root.join(split.name()).join(clip.class.name());
                fs::create_dir_all(&dir)?;
                write_tensor(dir.join(format!("{}.mtsr", clip.id)), &clip.frames)?;
                manifest.push_str(&format!(
                    "{},{},{},{}\n",
                    clip.id,
                    clip.class.name(),
                    split,
                    clip.seed
                ));
            }
        }
        fs::create_dir_all(root)?;
        fs::write(root.join("manifest.csv"), manifest)?;
        Ok(())
    }

    /// Loads a saved dataset. Class order follows the canonical class order
    /// restricted to the classes present in the manifest.
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let text = fs::read_to_string(root.join("manifest.csv")).map_err(|e| {
            MooseError::Dataset(format!("{}: {e}", root.join("manifest.csv").display()))
        })?;
        let mut rows = Vec::new();
        for (n, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            let bad = |what: &str| MooseError::Dataset(format!("manifest line {}: {what}", n + 1));
            let [id, class, split, seed] = fields[..] else {
                return Err(bad("expected 4 fields"));
            };
            let class = MotionClass::from_name(class).ok_or_else(|| bad("unknown class"))?;
            let split: Split = split.parse().map_err(|_| bad("unknown split"))?;
            let seed: u64 = seed.parse().map_err(|_| bad("bad seed"))?;
            rows.push((id.to_string(), class, split, seed));
        }
        let classes: Vec<MotionClass> = MotionClass::ALL
            .into_iter()
            .filter(|c| rows.iter().any(|r| r.1 == *c))
            .collect();
        let mut ds = Dataset::new(classes.clone());
        for (id, class, split, seed) in rows {
            let path = root
                .join(split.name())
                .join(class.name())
                .join(format!("{id}.mtsr"));
            let frames = read_tensor(&path)?;
            if frames.ndim() != 4 || frames.shape()[0] < 2 {
                return Err(MooseError::Dataset(format!(
                    "{}: expected [(T+1) x C x H x W] frames, got {:?}",
                    path.display(),
                    frames.shape()
                )));
            }
            let label = classes
                .iter()
                .position(|c| *c == class)
                .expect("class listed");
            ds.push(
                split,
                VideoClip {
                    id,
                    label,
                    class,
                    frames,
                    frame_interval: 1.0,
                    seed,
                },
            );
        }
        Ok(ds)
    }
}
