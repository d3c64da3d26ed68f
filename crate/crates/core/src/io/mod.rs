//! File formats: PPM frames, PGM masks, keypoint CSV, synthetic clips and
//! the training checkpoint.
//!
//! Sequence layout on disk is `frames/%05d.ppm`, `masks/%05d.pgm` and
//! `keypoints.csv`.

mod checkpoint;
mod netpbm;
mod synthetic;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use netpbm::{decode_pnm, encode_pnm, read_pnm, write_pnm, Pnm};
pub use synthetic::{generate_clip, write_clip, SyntheticClip, SyntheticSpec};

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::colour::Frame;
use crate::error::{Error, Result};
use crate::propagation::{Keypoint, MaskAnnotation};

/// Files in `dir` whose extension is one of `exts`, ordered by the integer
/// index in their stem.
pub fn indexed_files(dir: &Path, exts: &[&str]) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !ext.is_some_and(|e| exts.contains(&e.as_str())) {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let index: u64 = stem
            .parse()
            .map_err(|_| Error::format(&path, "file name is not a zero-padded frame index"))?;
        files.push((index, path));
    }
    files.sort();
    if let Some(w) = files.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::format(&w[1].1, format!("duplicate frame index {}", w[0].0)));
    }
    Ok(files.into_iter().map(|(_, p)| p).collect())
}

fn frame_exts() -> &'static [&'static str] {
    if cfg!(feature = "png") {
        &["ppm", "png"]
    } else {
        &["ppm"]
    }
}

fn mask_exts() -> &'static [&'static str] {
    if cfg!(feature = "png") {
        &["pgm", "png"]
    } else {
        &["pgm"]
    }
}

#[cfg(feature = "png")]
fn read_png(path: &Path, grey: bool) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = if grey { img.into_luma8().into_raw() } else { img.into_rgb8().into_raw() };
    Ok((h, w, data))
}

fn is_png(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

pub fn read_frame(path: &Path) -> Result<Frame> {
    #[cfg(feature = "png")]
    if is_png(path) {
        let (h, w, data) = read_png(path, false)?;
        return Frame::from_u8(h, w, &data);
    }
    if is_png(path) {
        return Err(Error::format(path, "PNG input requires the `png` feature"));
    }
    let p = read_pnm(path)?;
    if p.channels != 3 {
        return Err(Error::format(path, "frames must be colour (P6) images"));
    }
    let scale = 1.0 / p.maxval as f32;
    Frame::new(p.height, p.width, p.data.iter().map(|&b| (b as f32 * scale).min(1.0)).collect())
}

pub fn write_frame(path: &Path, frame: &Frame) -> Result<()> {
    write_pnm(path, frame.width(), frame.height(), 3, &frame.to_u8())
}

/// Reads every frame of a directory in index order; all frames must share
/// one extent.
pub fn read_frames(dir: &Path) -> Result<Vec<Frame>> {
    let files = indexed_files(dir, frame_exts())?;
    if files.is_empty() {
        return Err(Error::format(dir, "no frames found"));
    }
    let frames = files.iter().map(|p| read_frame(p)).collect::<Result<Vec<_>>>()?;
    check_extents(&frames, |f| (f.height(), f.width()), &files)?;
    Ok(frames)
}

fn check_extents<T>(items: &[T], ext: impl Fn(&T) -> (usize, usize), files: &[PathBuf]) -> Result<()> {
    let (h, w) = ext(&items[0]);
    for (item, path) in items.iter().zip(files) {
        let (fh, fw) = ext(item);
        if (fh, fw) != (h, w) {
            return Err(Error::ExtentMismatch {
                what: path.display().to_string(),
                want_h: h,
                want_w: w,
                found_h: fh,
                found_w: fw,
            });
        }
    }
    Ok(())
}

pub fn write_frames(dir: &Path, frames: &[Frame]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in frames.iter().enumerate() {
        write_frame(&dir.join(format!("{i:05}.ppm")), f)?;
    }
    Ok(())
}

/// Reads a mask as stored: pixel value = object id.
pub fn read_mask(path: &Path) -> Result<MaskAnnotation> {
    #[cfg(feature = "png")]
    if is_png(path) {
        let (h, w, data) = read_png(path, true)?;
        return MaskAnnotation::new(h, w, data);
    }
    if is_png(path) {
        return Err(Error::format(path, "PNG input requires the `png` feature"));
    }
    let p = read_pnm(path)?;
    if p.channels != 1 {
        return Err(Error::format(path, "masks must be greyscale (P5) images"));
    }
    MaskAnnotation::new(p.height, p.width, p.data)
}

pub fn write_mask(path: &Path, mask: &MaskAnnotation) -> Result<()> {
    write_pnm(path, mask.width(), mask.height(), 1, mask.ids())
}

pub fn read_masks(dir: &Path) -> Result<Vec<MaskAnnotation>> {
    let files = indexed_files(dir, mask_exts())?;
    if files.is_empty() {
        return Err(Error::format(dir, "no masks found"));
    }
    let masks = files.iter().map(|p| read_mask(p)).collect::<Result<Vec<_>>>()?;
    check_extents(&masks, |m| (m.height(), m.width()), &files)?;
    Ok(masks)
}

pub fn write_masks(dir: &Path, masks: &[MaskAnnotation]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, m) in masks.iter().enumerate() {
        write_mask(&dir.join(format!("{i:05}.pgm")), m)?;
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct KeypointRow {
    frame: usize,
    keypoint_id: usize,
    x: f64,
    y: f64,
    visible: u8,
}

const KEYPOINT_HEADER: [&str; 5] = ["frame", "keypoint_id", "x", "y", "visible"];

/// Parses `frame,keypoint_id,x,y,visible` lines; a header line is optional.
pub fn parse_keypoints(text: &str, path: &Path) -> Result<Vec<Keypoint>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::format(path, e.to_string()))?;
        if line == 0 && record.iter().eq(KEYPOINT_HEADER) {
            continue;
        }
        let row: KeypointRow = record
            .deserialize(None)
            .map_err(|e| Error::format(path, format!("record {}: {e}", line + 1)))?;
        if row.visible > 1 {
            return Err(Error::format(path, format!("record {}: visible must be 0 or 1", line + 1)));
        }
        out.push(Keypoint {
            frame: row.frame,
            id: row.keypoint_id,
            x: row.x,
            y: row.y,
            visible: row.visible == 1,
        });
    }
    Ok(out)
}

pub fn read_keypoints(path: &Path) -> Result<Vec<Keypoint>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_keypoints(&text, path)
}

pub fn format_keypoints(points: &[Keypoint]) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(KEYPOINT_HEADER).expect("in-memory write");
    for p in points {
        w.serialize(KeypointRow {
            frame: p.frame,
            keypoint_id: p.id,
            x: p.x,
            y: p.y,
            visible: u8::from(p.visible),
        })
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
}

pub fn write_keypoints(path: &Path, points: &[Keypoint]) -> Result<()> {
    fs::write(path, format_keypoints(points)).map_err(|e| Error::io(path, e))
}

/// Frame sequences of a dataset directory: every subdirectory holding a
/// `frames/` folder, in name order.
pub fn read_dataset(dir: &Path) -> Result<Vec<Vec<Frame>>> {
    let mut clips: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("frames").is_dir())
        .collect();
    clips.sort();
    if clips.is_empty() {
        return Err(Error::format(dir, "no clip directories with a frames/ folder"));
    }
    clips.iter().map(|c| read_frames(&c.join("frames"))).collect()
}
