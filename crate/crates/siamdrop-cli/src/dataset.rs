//! On-disk dataset trees in the layout tracking toolchains expect:
//! `img/%04d.png` frames, `groundtruth_rect.txt` with one `x,y,w,h` line per
//! frame, and an `occlusion.txt` sidecar with one real per line.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use siamdrop_core::patch::Frame;
use siamdrop_core::synth::{MotionModel, SceneSpec, SequenceDataset};
use siamdrop_core::BBox;

pub fn sequence_dir_name(index: usize) -> String {
    format!("seq-{index:03}")
}

fn frame_to_png(frame: &Frame) -> Result<Vec<u8>> {
    let img = image::RgbImage::from_raw(
        frame.width as u32,
        frame.height as u32,
        frame.data.clone(),
    )
    .context("frame buffer does not match its dimensions")?;
    let mut bytes = Vec::new();
    img.write_to(&mut Cursor::new(&mut bytes), image::ImageFormat::Png)
        .context("png encode")?;
    Ok(bytes)
}

fn png_to_frame(path: &Path) -> Result<Frame> {
    let img = image::open(path)
        .with_context(|| format!("reading {}", path.display()))?
        .to_rgb8();
    Ok(Frame {
        width: img.width() as usize,
        height: img.height() as usize,
        data: img.into_raw(),
    })
}

/// Writes one rendered sequence under `dir`.
pub fn save_sequence(dir: &Path, ds: &SequenceDataset) -> Result<()> {
    let img_dir = dir.join("img");
    std::fs::create_dir_all(&img_dir)
        .with_context(|| format!("creating {}", img_dir.display()))?;
    for (i, frame) in ds.frames.iter().enumerate() {
        let path = img_dir.join(format!("{:04}.png", i + 1));
        crate::write_atomic(&path, &frame_to_png(frame)?)?;
    }
    let gt: String = ds
        .gt
        .iter()
        .map(|b| format!("{},{},{},{}\n", b.x, b.y, b.w, b.h))
        .collect();
    crate::write_atomic(&dir.join("groundtruth_rect.txt"), gt.as_bytes())?;
    let occ: String = ds.occ_fraction.iter().map(|v| format!("{v}\n")).collect();
    crate::write_atomic(&dir.join("occlusion.txt"), occ.as_bytes())?;
    Ok(())
}

/// Sequence directories under a suite root, sorted by name.
pub fn sequence_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .with_context(|| format!("reading {}", root.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.join("groundtruth_rect.txt").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        bail!("no sequences under {} (no groundtruth_rect.txt found)", root.display());
    }
    Ok(dirs)
}

fn parse_gt_line(line: &str, path: &Path, no: usize) -> Result<BBox> {
    let parts: Vec<&str> = line.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        bail!("{}:{}: want x,y,w,h, got {line:?}", path.display(), no + 1);
    }
    let mut vals = [0.0f32; 4];
    for (v, p) in vals.iter_mut().zip(&parts) {
        *v = p
            .parse()
            .with_context(|| format!("{}:{}: bad number {p:?}", path.display(), no + 1))?;
    }
    Ok(BBox::new(vals[0], vals[1], vals[2], vals[3]))
}

/// Ground-truth boxes and occlusion fractions only, without decoding any
/// frame. Enough for evaluating stored results.
pub fn load_annotations(dir: &Path) -> Result<(Vec<BBox>, Vec<f64>)> {
    let gt_path = dir.join("groundtruth_rect.txt");
    let gt_text = std::fs::read_to_string(&gt_path)
        .with_context(|| format!("reading {}", gt_path.display()))?;
    let gt: Vec<BBox> = gt_text
        .lines()
        .enumerate()
        .map(|(i, l)| parse_gt_line(l, &gt_path, i))
        .collect::<Result<_>>()?;
    if gt.is_empty() {
        bail!("{}: empty sequence", dir.display());
    }
    let occ_path = dir.join("occlusion.txt");
    let occ: Vec<f64> = if occ_path.is_file() {
        std::fs::read_to_string(&occ_path)
            .with_context(|| format!("reading {}", occ_path.display()))?
            .lines()
            .enumerate()
            .map(|(i, l)| {
                l.trim().parse().with_context(|| {
                    format!("{}:{}: bad number {l:?}", occ_path.display(), i + 1)
                })
            })
            .collect::<Result<_>>()?
    } else {
        vec![0.0; gt.len()]
    };
    if occ.len() != gt.len() {
        bail!(
            "{}: {} occlusion rows for {} frames",
            dir.display(),
            occ.len(),
            gt.len()
        );
    }
    Ok((gt, occ))
}

/// Loads one sequence directory back into the in-memory form the tracker
/// consumes. The embedded scene description only records geometry; the
/// rendering parameters are not recoverable from pixels.
pub fn load_sequence(dir: &Path) -> Result<(String, SequenceDataset)> {
    let id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sequence".into());
    let (gt, occ) = load_annotations(dir)?;
    let mut frames = Vec::with_capacity(gt.len());
    for i in 0..gt.len() {
        frames.push(png_to_frame(&dir.join("img").join(format!("{:04}.png", i + 1)))?);
    }
    let (w, h) = (frames[0].width, frames[0].height);
    let spec = SceneSpec {
        width: w,
        height: h,
        frames: frames.len(),
        radii: (gt[0].w / 2.0, gt[0].h / 2.0),
        start_center: {
            let (cx, cy) = gt[0].center();
            (cx as f32, cy as f32)
        },
        motion: MotionModel::Linear { velocity: (0.0, 0.0) },
        events: Vec::new(),
        clutter: 0.0,
        target_seed: 0,
        seed: 0,
    };
    Ok((
        id,
        SequenceDataset {
            frames,
            gt,
            occ_fraction: occ,
            spec,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use siamdrop_core::synth::render;

    fn tiny() -> SequenceDataset {
        render(&SceneSpec {
            width: 64,
            height: 48,
            frames: 3,
            radii: (7.0, 5.0),
            start_center: (30.0, 24.0),
            motion: MotionModel::Linear { velocity: (1.0, 0.0) },
            events: Vec::new(),
            clutter: 0.5,
            target_seed: 3,
            seed: 4,
        })
        .unwrap()
    }

    #[test]
    fn sequence_round_trips_losslessly() {
        let ds = tiny();
        let dir = tempfile::tempdir().unwrap();
        let seq_dir = dir.path().join("seq-000");
        save_sequence(&seq_dir, &ds).unwrap();
        let (id, back) = load_sequence(&seq_dir).unwrap();
        assert_eq!(id, "seq-000");
        assert_eq!(back.frames.len(), 3);
        for (a, b) in ds.frames.iter().zip(&back.frames) {
            assert_eq!(a.data, b.data);
        }
        assert_eq!(ds.gt, back.gt);
        assert_eq!(ds.occ_fraction, back.occ_fraction);
    }

    #[test]
    fn suite_listing_finds_only_sequences() {
        let ds = tiny();
        let dir = tempfile::tempdir().unwrap();
        save_sequence(&dir.path().join("seq-001"), &ds).unwrap();
        save_sequence(&dir.path().join("seq-000"), &ds).unwrap();
        std::fs::create_dir(dir.path().join("not-a-sequence")).unwrap();
        let dirs = sequence_dirs(dir.path()).unwrap();
        assert_eq!(dirs.len(), 2);
        assert!(dirs[0].ends_with("seq-000"));
        assert!(dirs[1].ends_with("seq-001"));
    }
}
