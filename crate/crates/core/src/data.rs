//! Deterministic "moving sprites" videos.
//!
//! Every sprite is a randomly textured square whose appearance is drawn
//! from the same distribution for every class; classes differ only in how
//! the sprite moves. Pixel values are quantized to multiples of 1/255 so
//! datasets round-trip bit-exactly through `u8` SCPT files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::scpt::{self, Payload, ScptTensor};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotionClass {
    MoveLeft,
    MoveRight,
    MoveUp,
    MoveDown,
    CircleCw,
    CircleCcw,
    Expand,
    Still,
}

impl MotionClass {
    pub const ALL: [MotionClass; 8] = [
        MotionClass::MoveLeft,
        MotionClass::MoveRight,
        MotionClass::MoveUp,
        MotionClass::MoveDown,
        MotionClass::CircleCw,
        MotionClass::CircleCcw,
        MotionClass::Expand,
        MotionClass::Still,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Background {
    Flat,
    /// Static per-clip Gaussian texture with this standard deviation.
    Noise { sigma: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenSpec {
    pub train_clips: usize,
    pub val_clips: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub classes: Vec<MotionClass>,
    /// 1 for single-agent data; 2 or 3 for multi-agent.
    pub agents: usize,
    pub background: Background,
    /// Base gray level of the background.
    pub background_level: f64,
    pub sprite_size: usize,
    /// Peak-to-peak range of the sprite's per-pixel texture.
    pub contrast: f64,
    /// Translation speed in pixels per frame (also the arc speed of circles).
    pub speed: f64,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            train_clips: 200,
            val_clips: 100,
            frames: 8,
            height: 32,
            width: 32,
            classes: MotionClass::ALL.to_vec(),
            agents: 1,
            background: Background::Noise { sigma: 0.05 },
            background_level: 0.2,
            sprite_size: 6,
            contrast: 0.8,
            speed: 2.0,
            seed: 0,
        }
    }
}

/// One rendered video.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub id: usize,
    pub split: Split,
    /// `T × H × W × 3`, values in [0, 1].
    pub frames: Tensor,
    /// Class index per agent (into [`VideoClipSet::classes`]).
    pub labels: Vec<usize>,
    /// `T × A × 4` normalized `[x0, y0, x1, y1]`.
    pub boxes: Tensor,
    /// `T × H × W` binary union of sprite occupancy.
    pub masks: Tensor,
}

impl VideoClip {
    pub fn frame_count(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn agents(&self) -> usize {
        self.labels.len()
    }

    /// Box of `agent` at frame `t`.
    pub fn bbox(&self, t: usize, agent: usize) -> [f64; 4] {
        let a = self.agents();
        let off = (t * a + agent) * 4;
        self.boxes.data()[off..off + 4].try_into().unwrap()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoClipSet {
    pub spec: GenSpec,
    pub classes: Vec<MotionClass>,
    pub clips: Vec<VideoClip>,
}

impl VideoClipSet {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &VideoClip> {
        self.clips.iter().filter(move |c| c.split == split)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn get(&self, id: usize) -> Option<&VideoClip> {
        self.clips.iter().find(|c| c.id == id)
    }
}

/// Sprite placement for one frame: top-left corner and edge length.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Placement {
    y: i64,
    x: i64,
    size: usize,
}

impl GenSpec {
    fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Infeasible("frames, height and width must be >= 1".into()));
        }
        if self.classes.is_empty() {
            return Err(Error::Infeasible("class vocabulary is empty".into()));
        }
        let mut seen = self.classes.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.classes.len() {
            return Err(Error::Infeasible("duplicate classes".into()));
        }
        if self.agents == 0 || self.agents > 3 {
            return Err(Error::Infeasible(format!("agents must be 1..=3, got {}", self.agents)));
        }
        if self.sprite_size == 0 || !(self.speed > 0.0) {
            return Err(Error::Infeasible("sprite size and speed must be positive".into()));
        }
        for &class in &self.classes {
            let (need_h, need_w) = self.extent(class);
            if need_h + 2.0 > self.height as f64 || need_w + 2.0 > self.width as f64 {
                return Err(Error::Infeasible(format!(
                    "{class:?} needs {need_h}x{need_w} px plus a 1 px margin inside {}x{}",
                    self.height, self.width
                )));
            }
        }
        Ok(())
    }

    fn travel(&self) -> f64 {
        self.speed * (self.frames.saturating_sub(1)) as f64
    }

    fn radius(&self) -> f64 {
        self.height.min(self.width) as f64 / 6.0
    }

    fn max_expanded(&self) -> usize {
        (self.sprite_size as f64 * 1.5).round() as usize
    }

    /// Bounding extent (h, w) of the whole trajectory of a class.
    fn extent(&self, class: MotionClass) -> (f64, f64) {
        let s = self.sprite_size as f64;
        match class {
            MotionClass::MoveLeft | MotionClass::MoveRight => (s, s + self.travel()),
            MotionClass::MoveUp | MotionClass::MoveDown => (s + self.travel(), s),
            MotionClass::CircleCw | MotionClass::CircleCcw => {
                let d = s + 2.0 * self.radius().ceil();
                (d, d)
            }
            MotionClass::Expand => {
                let m = self.max_expanded() as f64;
                (m, m)
            }
            MotionClass::Still => (s, s),
        }
    }

    /// Sprite placement for every frame, with the trajectory's bounding box
    /// placed uniformly at random inside the 1 px margin.
    fn trajectory(&self, class: MotionClass, rng: &mut RngStream) -> Vec<Placement> {
        let s = self.sprite_size;
        let (eh, ew) = self.extent(class);
        let (eh, ew) = (eh.ceil() as i64, ew.ceil() as i64);
        let pick = |rng: &mut RngStream, span: i64, limit: usize| {
            let slots = (limit as i64 - 2 - span + 1).max(1) as usize;
            1 + rng.below(slots) as i64
        };
        let oy = pick(rng, eh, self.height);
        let ox = pick(rng, ew, self.width);
        let phase0 = match class {
            MotionClass::CircleCw | MotionClass::CircleCcw => 2.0 * std::f64::consts::PI * rng.uniform(),
            _ => 0.0,
        };
        let step = |t: usize| (self.speed * t as f64).round() as i64;
        let last = self.frames - 1;
        (0..self.frames)
            .map(|t| match class {
                MotionClass::MoveRight => Placement { y: oy, x: ox + step(t), size: s },
                MotionClass::MoveLeft => Placement { y: oy, x: ox + step(last) - step(t), size: s },
                MotionClass::MoveDown => Placement { y: oy + step(t), x: ox, size: s },
                MotionClass::MoveUp => Placement { y: oy + step(last) - step(t), x: ox, size: s },
                MotionClass::Still => Placement { y: oy, x: ox, size: s },
                MotionClass::CircleCw | MotionClass::CircleCcw => {
                    let r = self.radius();
                    let c = r.ceil();
                    let dir = if class == MotionClass::CircleCw { 1.0 } else { -1.0 };
                    let theta = phase0 + dir * self.speed * t as f64 / r;
                    // With y pointing down, increasing theta runs clockwise on screen.
                    Placement {
                        y: oy + (c + r * libm::sin(theta)).round() as i64,
                        x: ox + (c + r * libm::cos(theta)).round() as i64,
                        size: s,
                    }
                }
                MotionClass::Expand => {
                    let m = self.max_expanded() as i64;
                    let frac = if last == 0 { 0.0 } else { t as f64 / last as f64 };
                    let size = (s as f64 * (1.0 + 0.5 * frac)).round() as usize;
                    let off = (m - size as i64) / 2;
                    Placement { y: oy + off, x: ox + off, size }
                }
            })
            .collect()
    }
}

struct Sprite {
    texture: Vec<[f64; 3]>,
    size: usize,
}

impl Sprite {
    fn random(size: usize, contrast: f64, rng: &mut RngStream) -> Sprite {
        let texture = (0..size * size)
            .map(|_| {
                let mut px = [0.0; 3];
                for v in &mut px {
                    *v = 0.5 + contrast * (rng.uniform() - 0.5);
                }
                px
            })
            .collect();
        Sprite { texture, size }
    }

    /// Nearest-neighbour resample of the base texture to `size × size`.
    fn texel(&self, size: usize, i: usize, j: usize) -> [f64; 3] {
        let si = i * self.size / size;
        let sj = j * self.size / size;
        self.texture[si * self.size + sj]
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn render_clip(spec: &GenSpec, id: usize, split: Split, labels: Vec<usize>, rng: &mut RngStream) -> VideoClip {
    let (t_len, h, w) = (spec.frames, spec.height, spec.width);
    let agents = labels.len();

    let mut bg_rng = rng.split(1);
    let background: Vec<f64> = (0..h * w * 3)
        .map(|_| match spec.background {
            Background::Flat => spec.background_level,
            Background::Noise { sigma } => spec.background_level + sigma * bg_rng.normal(),
        })
        .collect();

    let mut sprites = Vec::with_capacity(agents);
    let mut paths = Vec::with_capacity(agents);
    for (a, &label) in labels.iter().enumerate() {
        let mut arng = rng.split(100 + a as u64);
        sprites.push(Sprite::random(spec.sprite_size, spec.contrast, &mut arng));
        paths.push(spec.trajectory(spec.classes[label], &mut arng));
    }

    let mut frames = vec![0.0; t_len * h * w * 3];
    let mut masks = vec![0.0; t_len * h * w];
    let mut boxes = vec![0.0; t_len * agents * 4];
    for t in 0..t_len {
        let frame = &mut frames[t * h * w * 3..(t + 1) * h * w * 3];
        frame.copy_from_slice(&background);
        let mask = &mut masks[t * h * w..(t + 1) * h * w];
        for a in 0..agents {
            let p = paths[a][t];
            for i in 0..p.size {
                for j in 0..p.size {
                    let (y, x) = ((p.y + i as i64) as usize, (p.x + j as i64) as usize);
                    let px = sprites[a].texel(p.size, i, j);
                    frame[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&px);
                    mask[y * w + x] = 1.0;
                }
            }
            let b = &mut boxes[(t * agents + a) * 4..(t * agents + a) * 4 + 4];
            b[0] = p.x as f64 / w as f64;
            b[1] = p.y as f64 / h as f64;
            b[2] = (p.x as f64 + p.size as f64) / w as f64;
            b[3] = (p.y as f64 + p.size as f64) / h as f64;
        }
        frame.iter_mut().for_each(|v| *v = quantize(*v));
    }

    VideoClip {
        id,
        split,
        frames: Tensor::new(vec![t_len, h, w, 3], frames).expect("consistent dims"),
        labels,
        boxes: Tensor::new(vec![t_len, agents, 4], boxes).expect("consistent dims"),
        masks: Tensor::new(vec![t_len, h, w], masks).expect("consistent dims"),
    }
}

/// Render a dataset. Clip `i` of a split carries primary label `i mod C`
/// (so splits are class-balanced) and clips are then shuffled; every clip
/// draws from its own child stream of `spec.seed`.
pub fn generate(spec: &GenSpec) -> Result<VideoClipSet> {
    spec.validate()?;
    let root = RngStream::new(spec.seed);
    let n_classes = spec.classes.len();
    let mut clips = Vec::with_capacity(spec.train_clips + spec.val_clips);
    let mut next_id = 0;
    for (split, count, tag) in [(Split::Train, spec.train_clips, 1u64), (Split::Val, spec.val_clips, 2u64)] {
        let split_rng = root.split(tag);
        let mut order: Vec<usize> = (0..count).collect();
        split_rng.split(0).shuffle(&mut order);
        for &slot in &order {
            let mut rng = split_rng.split(1 + slot as u64);
            let mut labels = vec![slot % n_classes];
            let mut extra = rng.split(2);
            for _ in 1..spec.agents {
                labels.push(extra.below(n_classes));
            }
            clips.push(render_clip(spec, next_id, split, labels, &mut rng));
            next_id += 1;
        }
    }
    Ok(VideoClipSet {
        spec: spec.clone(),
        classes: spec.classes.clone(),
        clips,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileEntry {
    file: String,
    shape: Vec<usize>,
    checksum: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClipEntry {
    id: usize,
    split: Split,
    labels: Vec<usize>,
    frames: FileEntry,
    masks: FileEntry,
    boxes: FileEntry,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    generator: GenSpec,
    classes: Vec<MotionClass>,
    clips: Vec<ClipEntry>,
}

fn to_u8(t: &Tensor, scale: f64) -> Vec<u8> {
    t.data().iter().map(|&v| (v * scale).round() as u8).collect()
}

fn write_entry(dir: &Path, name: String, t: &ScptTensor) -> Result<FileEntry> {
    let sum = scpt::write_file(&dir.join(&name), t)?;
    Ok(FileEntry {
        file: name,
        shape: t.shape.clone(),
        checksum: format!("{sum:016x}"),
    })
}

pub fn save_set(set: &VideoClipSet, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut clips = Vec::with_capacity(set.clips.len());
    for c in &set.clips {
        let frames = ScptTensor::from_u8(c.frames.shape().to_vec(), to_u8(&c.frames, 255.0));
        let masks = ScptTensor::from_u8(c.masks.shape().to_vec(), to_u8(&c.masks, 1.0));
        let boxes = ScptTensor::from_tensor(&c.boxes);
        clips.push(ClipEntry {
            id: c.id,
            split: c.split,
            labels: c.labels.clone(),
            frames: write_entry(dir, format!("clip_{}.scpt", c.id), &frames)?,
            masks: write_entry(dir, format!("masks_{}.scpt", c.id), &masks)?,
            boxes: write_entry(dir, format!("boxes_{}.scpt", c.id), &boxes)?,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        generator: set.spec.clone(),
        classes: set.classes.clone(),
        clips,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

fn read_entry(dir: &Path, entry: &FileEntry) -> Result<ScptTensor> {
    let path = dir.join(&entry.file);
    let expected = u64::from_str_radix(&entry.checksum, 16)
        .map_err(|_| Error::corrupt(dir.join(MANIFEST_FILE), format!("bad checksum for {}", entry.file)))?;
    let t = scpt::read_file_checked(&path, expected)?;
    if t.shape != entry.shape {
        return Err(Error::corrupt(
            &path,
            format!("shape {:?} differs from manifest {:?}", t.shape, entry.shape),
        ));
    }
    Ok(t)
}

fn u8_tensor(t: ScptTensor, scale: f64, path: PathBuf) -> Result<Tensor> {
    let Payload::U8(bytes) = t.payload else {
        return Err(Error::corrupt(path, "expected u8 payload"));
    };
    Tensor::new(t.shape, bytes.iter().map(|&b| b as f64 / scale).collect())
}

pub fn load_set(dir: &Path) -> Result<VideoClipSet> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    let version = raw.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            path,
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let manifest: Manifest = serde_json::from_value(raw).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;

    let n_classes = manifest.classes.len();
    let mut ids = BTreeMap::new();
    let mut clips = Vec::with_capacity(manifest.clips.len());
    for e in &manifest.clips {
        if ids.insert(e.id, ()).is_some() {
            return Err(Error::corrupt(&path, format!("duplicate clip id {}", e.id)));
        }
        if let Some(&label) = e.labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::LabelOutOfRange { label, classes: n_classes });
        }
        let frames = u8_tensor(read_entry(dir, &e.frames)?, 255.0, dir.join(&e.frames.file))?;
        let masks = u8_tensor(read_entry(dir, &e.masks)?, 1.0, dir.join(&e.masks.file))?;
        if let Some(&value) = masks.data().iter().find(|&&v| v > 1.0) {
            return Err(Error::NonBinary {
                value,
                context: dir.join(&e.masks.file).display().to_string(),
            });
        }
        let boxes = read_entry(dir, &e.boxes)?.to_tensor()?;
        let (t, h, w) = (frames.shape()[0], frames.shape()[1], frames.shape()[2]);
        if frames.ndim() != 4 || masks.shape() != [t, h, w] || boxes.shape() != [t, e.labels.len(), 4] {
            return Err(Error::corrupt(
                dir.join(&e.frames.file),
                format!("inconsistent shapes for clip {}", e.id),
            ));
        }
        clips.push(VideoClip {
            id: e.id,
            split: e.split,
            frames,
            labels: e.labels.clone(),
            boxes,
            masks,
        });
    }
    Ok(VideoClipSet {
        spec: manifest.generator,
        classes: manifest.classes,
        clips,
    })
}
