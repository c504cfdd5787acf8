//! Non-learnable visual prompts: clip-level optical-flow emphasis and
//! binary mask prompts.
//!
//! Flow is integer block matching. For each `block × block` tile of the
//! first frame we search every displacement `(dx, dy)` with
//! `|dx|, |dy| <= radius` whose displaced tile lies fully inside the second
//! frame, and keep the one with the smallest sum of absolute differences of
//! luma (`0.299 R + 0.587 G + 0.114 B`). Ties go to the smaller `dx² + dy²`,
//! then to the earlier candidate in row-major `(dy, dx)` order.

use std::path::{Path, PathBuf};

use crate::data::VideoClip;
use crate::error::{Error, Result};
use crate::scpt::{self, Payload};
use crate::tensor::Tensor;

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];
/// Below this maximum block magnitude a clip's flow prompt is a pass-through.
pub const MIN_FLOW_MAGNITUDE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    /// Per-block horizontal displacement, `Hb × Wb`.
    pub dx: Tensor,
    /// Per-block vertical displacement, `Hb × Wb`.
    pub dy: Tensor,
    pub block_size: usize,
    pub search_radius: usize,
    /// Set when either frame was constant; the field is then all zeros.
    pub degenerate: bool,
}

impl FlowField {
    pub fn zeros(blocks_h: usize, blocks_w: usize, block_size: usize, search_radius: usize) -> Self {
        FlowField {
            dx: Tensor::zeros(&[blocks_h, blocks_w]),
            dy: Tensor::zeros(&[blocks_h, blocks_w]),
            block_size,
            search_radius,
            degenerate: false,
        }
    }

    pub fn blocks(&self) -> (usize, usize) {
        (self.dx.shape()[0], self.dx.shape()[1])
    }

    /// Per-block `sqrt(dx² + dy²)`.
    pub fn magnitude(&self) -> Tensor {
        let data = self
            .dx
            .data()
            .iter()
            .zip(self.dy.data())
            .map(|(x, y)| (x * x + y * y).sqrt())
            .collect();
        Tensor::new(self.dx.shape().to_vec(), data).expect("same shape as dx")
    }

    /// Pixel-resolution magnitude map normalized to `[0, 1]` by its maximum
    /// (nearest-neighbour upsampling from blocks). All ones if the maximum
    /// is below [`MIN_FLOW_MAGNITUDE`].
    pub fn prompt_map(&self) -> Tensor {
        let (bh, bw) = self.blocks();
        let bs = self.block_size;
        let mag = self.magnitude();
        let max = mag.data().iter().copied().fold(0.0, f64::max);
        let (h, w) = (bh * bs, bw * bs);
        if max < MIN_FLOW_MAGNITUDE {
            return Tensor::ones(&[h, w]);
        }
        let mut out = Tensor::zeros(&[h, w]);
        for y in 0..h {
            for x in 0..w {
                out.data_mut()[y * w + x] = mag.data()[(y / bs) * bw + x / bs] / max;
            }
        }
        out
    }
}

fn frame_dims(frame: &Tensor) -> Result<(usize, usize, usize)> {
    match frame.shape() {
        &[h, w, c] if c == 1 || c == 3 => Ok((h, w, c)),
        s => Err(Error::InvalidShape(format!(
            "frame must be H x W x 1 or H x W x 3, got {s:?}"
        ))),
    }
}

/// Luma plane of an `H × W × {1,3}` frame.
pub fn grayscale(frame: &Tensor) -> Result<Vec<f64>> {
    let (_, _, c) = frame_dims(frame)?;
    if c == 1 {
        return Ok(frame.data().to_vec());
    }
    Ok(frame
        .data()
        .chunks_exact(3)
        .map(|p| LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2])
        .collect())
}

/// Sum of absolute differences between the `bs × bs` tile of `a` at
/// `(y0, x0)` and the tile of `b` at `(y1, x1)`, accumulated row-major.
pub(crate) fn block_sad(
    a: &[f64],
    b: &[f64],
    width: usize,
    bs: usize,
    (y0, x0): (usize, usize),
    (y1, x1): (usize, usize),
) -> f64 {
    let mut sad = 0.0;
    for i in 0..bs {
        let ra = &a[(y0 + i) * width + x0..(y0 + i) * width + x0 + bs];
        let rb = &b[(y1 + i) * width + x1..(y1 + i) * width + x1 + bs];
        for (p, q) in ra.iter().zip(rb) {
            sad += (p - q).abs();
        }
    }
    sad
}

/// Candidate displacements `(dy, dx)` sorted by the tie-break rule.
fn candidates(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut c: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .collect();
    // Stable sort keeps row-major order among equal magnitudes.
    c.sort_by_key(|&(dy, dx)| dy * dy + dx * dx);
    c
}

pub fn estimate_flow(
    frame_a: &Tensor,
    frame_b: &Tensor,
    block_size: usize,
    search_radius: usize,
) -> Result<FlowField> {
    let (h, w, _) = frame_dims(frame_a)?;
    if frame_a.shape() != frame_b.shape() {
        return Err(Error::InvalidShape(format!(
            "flow between {:?} and {:?}",
            frame_a.shape(),
            frame_b.shape()
        )));
    }
    if block_size == 0 || h % block_size != 0 || w % block_size != 0 {
        return Err(Error::NotDivisible {
            height: h,
            width: w,
            block: block_size,
        });
    }
    if search_radius == 0 {
        return Err(Error::InvalidArgument("search radius must be >= 1".into()));
    }
    let (bh, bw) = (h / block_size, w / block_size);
    let mut field = FlowField::zeros(bh, bw, block_size, search_radius);

    let ga = grayscale(frame_a)?;
    let gb = grayscale(frame_b)?;
    let constant = |g: &[f64]| g.iter().all(|&v| v == g[0]);
    if constant(&ga) || constant(&gb) {
        field.degenerate = true;
        return Ok(field);
    }

    let cands = candidates(search_radius);
    for by in 0..bh {
        for bx in 0..bw {
            let (y0, x0) = (by * block_size, bx * block_size);
            let mut best: Option<(f64, isize, isize)> = None;
            for &(dy, dx) in &cands {
                let (y1, x1) = (y0 as isize + dy, x0 as isize + dx);
                if y1 < 0 || x1 < 0 || y1 as usize + block_size > h || x1 as usize + block_size > w {
                    continue;
                }
                let sad = block_sad(&ga, &gb, w, block_size, (y0, x0), (y1 as usize, x1 as usize));
                if best.is_none_or(|(b, _, _)| sad < b) {
                    best = Some((sad, dy, dx));
                }
            }
            let (_, dy, dx) = best.expect("zero displacement is always in bounds");
            field.dx.data_mut()[by * bw + bx] = dx as f64;
            field.dy.data_mut()[by * bw + bx] = dy as f64;
        }
    }
    Ok(field)
}

/// Multiply every frame of a clip by the flow's normalized magnitude map,
/// broadcast over channels.
pub fn flow_prompt_clip(clip_frames: &[Tensor], flow: &FlowField) -> Result<Vec<Tensor>> {
    let (bh, bw) = flow.blocks();
    let map = flow.prompt_map();
    clip_frames
        .iter()
        .map(|f| {
            let (h, w, _) = frame_dims(f)?;
            if h != bh * flow.block_size || w != bw * flow.block_size {
                return Err(Error::InvalidShape(format!(
                    "flow grid {bh}x{bw} of {} px blocks does not cover a {h}x{w} frame",
                    flow.block_size
                )));
            }
            Ok(apply_plane(f, &map))
        })
        .collect()
}

fn apply_plane(frame: &Tensor, plane: &Tensor) -> Tensor {
    let c = frame.shape()[2];
    let data = frame
        .data()
        .chunks_exact(c)
        .zip(plane.data())
        .flat_map(|(px, &m)| px.iter().map(move |v| v * m))
        .collect();
    Tensor::new(frame.shape().to_vec(), data).expect("shape preserved")
}

/// Division of a `T`-frame video into `m` clips of `k` frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClipPartition {
    pub clips: usize,
    pub frames_per_clip: usize,
    /// Index within each clip of the frame used for flow estimation.
    pub representative: usize,
}

impl ClipPartition {
    pub fn new(total_frames: usize, clips: usize) -> Result<Self> {
        if clips == 0 || total_frames % clips != 0 {
            return Err(Error::InvalidArgument(format!(
                "{total_frames} frames cannot be split into {clips} equal clips"
            )));
        }
        Ok(ClipPartition {
            clips,
            frames_per_clip: total_frames / clips,
            representative: 0,
        })
    }

    pub fn validate(&self, total_frames: usize) -> Result<()> {
        if self.clips * self.frames_per_clip != total_frames || self.representative >= self.frames_per_clip {
            return Err(Error::InvalidArgument(format!(
                "partition {self:?} does not fit {total_frames} frames"
            )));
        }
        Ok(())
    }
}

/// Flow-prompt a whole `T × H × W × C` video. Clip `i` uses the flow from
/// its representative frame to clip `i + 1`'s; the last clip reuses the
/// previous field (a single-clip video gets zero flow, i.e. pass-through).
pub fn flow_prompt_video(
    frames: &Tensor,
    partition: ClipPartition,
    block_size: usize,
    search_radius: usize,
) -> Result<(Tensor, Vec<FlowField>)> {
    let t = frames.shape()[0];
    partition.validate(t)?;
    let frame = |i: usize| frames.index_axis0(i);
    let k = partition.frames_per_clip;
    let rep = |clip: usize| frame(clip * k + partition.representative);

    let mut fields = Vec::with_capacity(partition.clips);
    for clip in 0..partition.clips.saturating_sub(1) {
        fields.push(estimate_flow(&rep(clip), &rep(clip + 1), block_size, search_radius)?);
    }
    match fields.last().cloned() {
        Some(last) => fields.push(last),
        None => {
            let (h, w, _) = frame_dims(&frame(0))?;
            if h % block_size != 0 || w % block_size != 0 {
                return Err(Error::NotDivisible {
                    height: h,
                    width: w,
                    block: block_size,
                });
            }
            fields.push(FlowField::zeros(h / block_size, w / block_size, block_size, search_radius));
        }
    }

    let mut out = Vec::with_capacity(t);
    for (clip, field) in fields.iter().enumerate() {
        let clip_frames: Vec<Tensor> = (0..k).map(|j| frame(clip * k + j)).collect();
        out.extend(flow_prompt_clip(&clip_frames, field)?);
    }
    Ok((Tensor::stack(&out)?, fields))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskSource {
    Oracle,
    File,
}

/// A binary `H × W` mask used as a multiplicative prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPrompt {
    mask: Tensor,
    pub source: MaskSource,
}

impl MaskPrompt {
    pub fn new(mask: Tensor, source: MaskSource) -> Result<Self> {
        if mask.ndim() != 2 {
            return Err(Error::InvalidShape(format!("mask must be H x W, got {:?}", mask.shape())));
        }
        if let Some(&value) = mask.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::NonBinary {
                value,
                context: "mask".into(),
            });
        }
        Ok(MaskPrompt { mask, source })
    }

    pub fn mask(&self) -> &Tensor {
        &self.mask
    }
}

/// `frame ⊙ mask`, mask broadcast over channels.
pub fn mask_prompt(frame: &Tensor, mask: &MaskPrompt) -> Result<Tensor> {
    let (h, w, _) = frame_dims(frame)?;
    if mask.mask.shape() != [h, w] {
        return Err(Error::InvalidShape(format!(
            "mask {:?} does not match frame {h}x{w}",
            mask.mask.shape()
        )));
    }
    Ok(apply_plane(frame, &mask.mask))
}

/// Where masks come from: the generator's occupancy maps, or an SCPT `u8`
/// tensor of shape `T × H × W` (or `H × W`, replicated over frames).
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MaskProvider {
    Oracle,
    File(PathBuf),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskGranularity {
    PerFrame,
    /// One mask per clip of this many frames (the clip's first frame),
    /// replicated over the clip.
    PerClip(usize),
}

pub fn provide_masks(
    clip: &VideoClip,
    provider: &MaskProvider,
    granularity: MaskGranularity,
) -> Result<Vec<MaskPrompt>> {
    let (t, h, w) = (clip.frames.shape()[0], clip.frames.shape()[1], clip.frames.shape()[2]);
    let (planes, source) = match provider {
        MaskProvider::Oracle => (clip.masks.clone(), MaskSource::Oracle),
        MaskProvider::File(path) => (load_mask_file(path, t, h, w)?, MaskSource::File),
    };
    if planes.shape() != [t, h, w] {
        return Err(Error::InvalidShape(format!(
            "masks {:?} do not match video {t}x{h}x{w}",
            planes.shape()
        )));
    }
    (0..t)
        .map(|i| {
            let src = match granularity {
                MaskGranularity::PerFrame => i,
                MaskGranularity::PerClip(k) if k > 0 => (i / k) * k,
                MaskGranularity::PerClip(_) => {
                    return Err(Error::InvalidArgument("clip length must be >= 1".into()))
                }
            };
            MaskPrompt::new(planes.index_axis0(src), source)
        })
        .collect()
}

fn load_mask_file(path: &Path, t: usize, h: usize, w: usize) -> Result<Tensor> {
    let raw = scpt::read_file(path)?;
    let Payload::U8(bytes) = &raw.payload else {
        return Err(Error::corrupt(path, format!("masks must be u8, got {:?}", raw.dtype())));
    };
    if let Some(&v) = bytes.iter().find(|&&v| v > 1) {
        return Err(Error::NonBinary {
            value: v as f64,
            context: path.display().to_string(),
        });
    }
    let plane = raw.to_tensor()?;
    match raw.shape.as_slice() {
        [tt, hh, ww] if (*tt, *hh, *ww) == (t, h, w) => Ok(plane),
        [hh, ww] if (*hh, *ww) == (h, w) => Tensor::stack(&vec![plane; t]),
        s => Err(Error::InvalidShape(format!(
            "{}: mask shape {s:?} does not match video {t}x{h}x{w}",
            path.display()
        ))),
    }
}

/// Apply per-frame masks to a `T × H × W × C` video.
pub fn mask_prompt_video(frames: &Tensor, masks: &[MaskPrompt]) -> Result<Tensor> {
    let t = frames.shape()[0];
    if masks.len() != t {
        return Err(Error::InvalidArgument(format!("{} masks for {t} frames", masks.len())));
    }
    let out = masks
        .iter()
        .enumerate()
        .map(|(i, m)| mask_prompt(&frames.index_axis0(i), m))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&out)
}
