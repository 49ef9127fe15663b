//! Result and report files. Both are plain text with `#`-prefixed comment
//! headers that echo the resolved configuration, so a result can always be
//! traced back to the settings that produced it. Numbers are written with
//! the shortest representation that parses back to the identical value.

use std::path::Path;

use anyhow::{bail, Context, Result};

use siamdrop_core::combine::Prediction;
use siamdrop_core::BBox;

/// One tracked sequence: `frame,x,y,w,h,score,degenerate` per line after the
/// comment header. Frame 0 is the init frame and repeats the ground truth.
pub fn write_results(
    path: &Path,
    sequence_id: &str,
    config_lines: &[String],
    preds: &[Prediction],
) -> Result<()> {
    let mut out = String::new();
    out.push_str("# config-begin\n");
    for line in config_lines {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    out.push_str("# config-end\n");
    out.push_str(&format!("# sequence = {sequence_id}\n"));
    out.push_str("frame,x,y,w,h,score,degenerate\n");
    for (i, p) in preds.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            i,
            p.bbox.x,
            p.bbox.y,
            p.bbox.w,
            p.bbox.h,
            p.score,
            u8::from(p.degenerate)
        ));
    }
    crate::write_atomic(path, out.as_bytes())
}

/// Reads a results file back: (sequence id, per-frame predictions).
pub fn read_results(path: &Path) -> Result<(String, Vec<Prediction>)> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut sequence_id = None;
    let mut preds = Vec::new();
    let mut seen_header = false;
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(rest) = comment.trim().strip_prefix("sequence") {
                if let Some(id) = rest.trim().strip_prefix('=') {
                    sequence_id = Some(id.trim().to_string());
                }
            }
            continue;
        }
        if !seen_header {
            if line != "frame,x,y,w,h,score,degenerate" {
                bail!("{}:{}: unexpected column header {line:?}", path.display(), no + 1);
            }
            seen_header = true;
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 7 {
            bail!("{}:{}: want 7 fields, got {}", path.display(), no + 1, parts.len());
        }
        let frame: usize = parts[0]
            .parse()
            .with_context(|| format!("{}:{}: bad frame index", path.display(), no + 1))?;
        if frame != preds.len() {
            bail!(
                "{}:{}: frame {} out of order (expected {})",
                path.display(),
                no + 1,
                frame,
                preds.len()
            );
        }
        let mut nums = [0.0f32; 5];
        for (v, p) in nums.iter_mut().zip(&parts[1..6]) {
            *v = p
                .parse()
                .with_context(|| format!("{}:{}: bad number {p:?}", path.display(), no + 1))?;
        }
        let degenerate = match parts[6] {
            "0" => false,
            "1" => true,
            other => bail!("{}:{}: degenerate flag must be 0 or 1, got {other:?}", path.display(), no + 1),
        };
        preds.push(Prediction {
            bbox: BBox::new(nums[0], nums[1], nums[2], nums[3]),
            score: nums[4],
            degenerate,
        });
    }
    let Some(sequence_id) = sequence_id else {
        bail!("{}: missing '# sequence = ...' line", path.display());
    };
    if preds.is_empty() {
        bail!("{}: no result rows", path.display());
    }
    Ok((sequence_id, preds))
}

/// Key-value report: `key = value` lines under the same comment header.
pub fn write_report(
    path: &Path,
    config_lines: &[String],
    entries: &[(String, String)],
) -> Result<()> {
    let mut out = String::new();
    out.push_str("# config-begin\n");
    for line in config_lines {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    out.push_str("# config-end\n");
    for (k, v) in entries {
        out.push_str(&format!("{k} = {v}\n"));
    }
    crate::write_atomic(path, out.as_bytes())
}

/// Non-comment `key = value` pairs from a report, in file order.
pub fn read_report(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut entries = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("{}:{}: want 'key = value', got {line:?}", path.display(), no + 1);
        };
        entries.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<Prediction> {
        vec![
            Prediction {
                bbox: BBox::new(10.0, 20.0, 30.0, 40.0),
                score: 1.0,
                degenerate: false,
            },
            Prediction {
                bbox: BBox::new(10.25, 20.5, 30.0, 40.0),
                score: 0.37218913,
                degenerate: false,
            },
            Prediction {
                bbox: BBox::new(11.0, 21.0, 30.0, 40.0),
                score: -0.125,
                degenerate: true,
            },
        ]
    }

    #[test]
    fn results_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seq-000.csv");
        let preds = sample();
        let cfg = vec!["seed = 7".to_string(), "dropout = slice".to_string()];
        write_results(&path, "seq-000", &cfg, &preds).unwrap();
        let (id, back) = read_results(&path).unwrap();
        assert_eq!(id, "seq-000");
        assert_eq!(back.len(), preds.len());
        for (a, b) in preds.iter().zip(&back) {
            assert_eq!(a.bbox, b.bbox);
            assert_eq!(a.score, b.score);
            assert_eq!(a.degenerate, b.degenerate);
        }
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# config-begin\n# seed = 7\n"));
    }

    #[test]
    fn out_of_order_rows_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(
            &path,
            "# sequence = s\nframe,x,y,w,h,score,degenerate\n1,0,0,1,1,0,0\n",
        )
        .unwrap();
        assert!(read_results(&path).is_err());
    }

    #[test]
    fn report_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.txt");
        let entries = vec![
            ("auc".to_string(), "0.5517".to_string()),
            ("sequences".to_string(), "20".to_string()),
        ];
        write_report(&path, &["profile = easy".into()], &entries).unwrap();
        assert_eq!(read_report(&path).unwrap(), entries);
    }
}
