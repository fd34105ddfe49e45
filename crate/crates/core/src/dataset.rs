//! On-disk sequence layout.
//!
//! ```text
//! <root>/manifest.json
//! <root>/<sequence>/frames/%06d.png   8-bit RGB
//! <root>/<sequence>/depth/%06d.png    16-bit gray, depth * 256 (optional)
//! <root>/<sequence>/boxes.txt         "idx x y w h" per frame
//! <root>/<sequence>/meta.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, RgbImage};
use serde::{Deserialize, Serialize};

use crate::bbox::BoxXywh;
use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose6DoF};
use crate::tensor::{Role, Tensor};

pub const DEPTH_PNG_SCALE: f64 = 256.0;

/// 8-bit RGB frame, interleaved row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Frame {
    pub fn from_tensor(img: &Tensor) -> Result<Frame> {
        let (c, h, w) = img.chw()?;
        if c != 3 {
            return Err(Error::InvalidArgument(format!("frame needs 3 channels, got {c}")));
        }
        let mut rgb = vec![0u8; h * w * 3];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    rgb[(y * w + x) * 3 + ch] = to_u8(img.at3(ch, y, x));
                }
            }
        }
        Ok(Frame {
            width: w,
            height: h,
            rgb,
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        let (h, w) = (self.height, self.width);
        let mut t = Tensor::zeros(&[3, h, w]).with_role(Role::Image);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    t.set3(ch, y, x, self.at(ch, x, y));
                }
            }
        }
        t
    }

    /// Channel value in `[0, 1]` at integer pixel `(x, y)`.
    pub fn at(&self, ch: usize, x: usize, y: usize) -> f64 {
        f64::from(self.rgb[(y * self.width + x) * 3 + ch]) / 255.0
    }
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Depth map stored as fixed-point `depth * 256`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthFrame {
    pub width: usize,
    pub height: usize,
    pub raw: Vec<u16>,
}

impl DepthFrame {
    pub fn from_tensor(d: &Tensor) -> Result<DepthFrame> {
        let (c, h, w) = d.chw()?;
        if c != 1 {
            return Err(Error::InvalidArgument("depth needs one channel".into()));
        }
        let raw = d
            .data()
            .iter()
            .map(|&v| (v * DEPTH_PNG_SCALE).round().clamp(0.0, 65535.0) as u16)
            .collect();
        Ok(DepthFrame {
            width: w,
            height: h,
            raw,
        })
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        f64::from(self.raw[y * self.width + x]) / DEPTH_PNG_SCALE
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![1, self.height, self.width],
            self.raw.iter().map(|&v| f64::from(v) / DEPTH_PNG_SCALE).collect(),
        )
        .unwrap()
        .with_role(Role::Depth)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceMeta {
    /// Frames usable for training and evaluation.
    pub valid_frames: Vec<usize>,
    pub n_frames: usize,
    pub width: usize,
    pub height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intrinsics: Option<Intrinsics>,
    /// Camera-to-world pose per frame.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera_poses: Option<Vec<Pose6DoF>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub seed: u64,
    pub n_frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub camera_mode: String,
    pub width: usize,
    pub height: usize,
    pub sequences: Vec<ManifestEntry>,
}

/// One sequence held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub name: String,
    pub meta: SequenceMeta,
    pub frames: Vec<Frame>,
    pub depth: Option<Vec<DepthFrame>>,
    pub boxes: Vec<BoxXywh>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn has_depth(&self) -> bool {
        self.depth.is_some()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub sequences: Vec<Sequence>,
}

impl Dataset {
    pub fn has_depth(&self) -> bool {
        !self.sequences.is_empty() && self.sequences.iter().all(Sequence::has_depth)
    }

    pub fn has_poses(&self) -> bool {
        !self.sequences.is_empty()
            && self
                .sequences
                .iter()
                .all(|s| s.meta.camera_poses.is_some())
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, data: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, data).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn image_err(path: &Path, e: image::ImageError) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

pub fn frame_path(seq_dir: &Path, idx: usize) -> PathBuf {
    seq_dir.join("frames").join(format!("{idx:06}.png"))
}

pub fn depth_path(seq_dir: &Path, idx: usize) -> PathBuf {
    seq_dir.join("depth").join(format!("{idx:06}.png"))
}

pub fn save_png_rgb(path: &Path, f: &Frame) -> Result<()> {
    let img = RgbImage::from_raw(f.width as u32, f.height as u32, f.rgb.clone())
        .ok_or_else(|| Error::Format("frame buffer size".into()))?;
    img.save(path).map_err(|e| image_err(path, e))
}

pub fn load_png_rgb(path: &Path) -> Result<Frame> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    Ok(Frame {
        width: img.width() as usize,
        height: img.height() as usize,
        rgb: img.into_raw(),
    })
}

pub fn save_png_gray(path: &Path, width: usize, height: usize, data: Vec<u8>) -> Result<()> {
    let img = GrayImage::from_raw(width as u32, height as u32, data)
        .ok_or_else(|| Error::Format("gray buffer size".into()))?;
    img.save(path).map_err(|e| image_err(path, e))
}

pub fn save_png_depth(path: &Path, d: &DepthFrame) -> Result<()> {
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(d.width as u32, d.height as u32, d.raw.clone())
            .ok_or_else(|| Error::Format("depth buffer size".into()))?;
    img.save(path).map_err(|e| image_err(path, e))
}

pub fn load_png_depth(path: &Path) -> Result<DepthFrame> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma16();
    Ok(DepthFrame {
        width: img.width() as usize,
        height: img.height() as usize,
        raw: img.into_raw(),
    })
}

pub fn format_boxes(boxes: &[BoxXywh]) -> String {
    boxes
        .iter()
        .enumerate()
        .map(|(i, b)| format!("{i} {} {} {} {}\n", b.x, b.y, b.w, b.h))
        .collect()
}

pub fn parse_boxes(text: &str) -> Result<Vec<BoxXywh>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("boxes.txt line {}: {e}", ln + 1)))?;
        if v.len() != 5 || v[0] as usize != out.len() {
            return Err(Error::Format(format!(
                "boxes.txt line {}: expected `idx x y w h` with idx {}",
                ln + 1,
                out.len()
            )));
        }
        out.push(BoxXywh::new(v[1], v[2], v[3], v[4]));
    }
    Ok(out)
}

/// Writes one sequence; `depth` may be absent.
pub fn save_sequence(root: &Path, seq: &Sequence) -> Result<()> {
    let dir = root.join(&seq.name);
    mkdir(&dir.join("frames"))?;
    for (i, f) in seq.frames.iter().enumerate() {
        save_png_rgb(&frame_path(&dir, i), f)?;
    }
    if let Some(depth) = &seq.depth {
        mkdir(&dir.join("depth"))?;
        for (i, d) in depth.iter().enumerate() {
            save_png_depth(&depth_path(&dir, i), d)?;
        }
    }
    write(&dir.join("boxes.txt"), format_boxes(&seq.boxes))?;
    let meta = serde_json::to_string_pretty(&seq.meta).map_err(|e| Error::Format(e.to_string()))?;
    write(&dir.join("meta.json"), meta + "\n")
}

pub fn load_sequence(dir: &Path) -> Result<Sequence> {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let meta: SequenceMeta = serde_json::from_str(&read(&dir.join("meta.json"))?)
        .map_err(|e| Error::Format(format!("{}: {e}", dir.join("meta.json").display())))?;
    let boxes = parse_boxes(&read(&dir.join("boxes.txt"))?)?;
    if boxes.len() != meta.n_frames {
        return Err(Error::Format(format!(
            "{name}: {} boxes for {} frames",
            boxes.len(),
            meta.n_frames
        )));
    }
    if let Some(bad) = meta.valid_frames.iter().find(|&&i| i >= meta.n_frames) {
        return Err(Error::Format(format!("{name}: valid frame {bad} out of range")));
    }
    if let Some(p) = &meta.camera_poses {
        if p.len() != meta.n_frames {
            return Err(Error::Format(format!("{name}: {} poses for {} frames", p.len(), meta.n_frames)));
        }
    }
    let frames = (0..meta.n_frames)
        .map(|i| load_png_rgb(&frame_path(dir, i)))
        .collect::<Result<Vec<_>>>()?;
    for f in &frames {
        if (f.width, f.height) != (meta.width, meta.height) {
            return Err(Error::Format(format!("{name}: frame size differs from meta.json")));
        }
    }
    let depth = if dir.join("depth").is_dir() {
        Some(
            (0..meta.n_frames)
                .map(|i| load_png_depth(&depth_path(dir, i)))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    Ok(Sequence {
        name,
        meta,
        frames,
        depth,
        boxes,
    })
}

pub fn write_manifest(root: &Path, m: &Manifest) -> Result<PathBuf> {
    let path = root.join("manifest.json");
    let text = serde_json::to_string_pretty(m).map_err(|e| Error::Format(e.to_string()))?;
    write(&path, text + "\n")?;
    Ok(path)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join("manifest.json");
    serde_json::from_str(&read(&path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Loads every sequence listed in the manifest, or every subdirectory with
/// a `meta.json` when there is no manifest.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let names: Vec<String> = if root.join("manifest.json").is_file() {
        read_manifest(root)?
            .sequences
            .into_iter()
            .map(|e| e.name)
            .collect()
    } else {
        let mut v: Vec<String> = fs::read_dir(root)
            .map_err(|e| Error::io(root, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join("meta.json").is_file())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        v.sort();
        v
    };
    if names.is_empty() {
        return Err(Error::Format(format!("{}: no sequences", root.display())));
    }
    let sequences = names
        .iter()
        .map(|n| load_sequence(&root.join(n)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        root: root.to_path_buf(),
        sequences,
    })
}
