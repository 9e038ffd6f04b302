use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::imaging::{load_image, resize_bilinear, save_png};
use super::{AttributeSchema, BoundingBox, Dataset, Keypoint, Sample, Split, NUM_KEYPOINTS};
use crate::error::{Error, Result};

/// One line of a JSON-lines manifest. Keypoint rows are `[x, y]` or
/// `[x, y, flag]` where `flag = 0` marks an out-of-frame point.
#[derive(Debug, Serialize, Deserialize)]
struct Record {
    image: String,
    labels: Vec<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    keypoints: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    boxes: BTreeMap<String, [i64; 4]>,
}

fn split_from_path(path: &Path) -> Split {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_ascii_lowercase();
    if stem.contains("train") {
        Split::Train
    } else if stem.contains("val") {
        Split::Val
    } else {
        Split::Test
    }
}

/// Loads a JSON-lines manifest. Image paths are relative to the manifest's
/// directory; images are resized to the schema input size and keypoints and
/// boxes are rescaled with them. The split is taken from the file name
/// (`train`/`val`, otherwise test).
pub fn load_manifest(path: impl AsRef<Path>, schema: &AttributeSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: line_no,
            reason: e.to_string(),
        })?;
        samples.push(parse_record(record, &root, schema, line_no)?);
    }
    Dataset::new(samples, schema.clone(), split_from_path(path))
}

fn parse_record(
    record: Record,
    root: &Path,
    schema: &AttributeSchema,
    line: usize,
) -> Result<Sample> {
    let m = schema.num_attributes();
    if record.labels.len() != m {
        return Err(Error::SchemaMismatch(format!(
            "line {line}: {} labels, schema declares {m}",
            record.labels.len()
        )));
    }
    let labels = record
        .labels
        .iter()
        .map(|&l| match l {
            0 | 1 => Ok(l as u8),
            other => Err(Error::Parse {
                line,
                reason: format!("label {other} is not binary"),
            }),
        })
        .collect::<Result<Vec<u8>>>()?;

    let image_path: PathBuf = root.join(&record.image);
    if !image_path.exists() {
        return Err(Error::Load {
            path: image_path,
            reason: "image file not found".into(),
        });
    }
    let raw = load_image(&image_path)?;
    let (h0, w0, _) = raw.dim();
    let [h, w] = schema.input_size;
    let sx = w as f64 / w0 as f64;
    let sy = h as f64 / h0 as f64;

    let keypoints = match record.keypoints {
        None => None,
        Some(rows) => {
            if rows.len() != NUM_KEYPOINTS {
                return Err(Error::Parse {
                    line,
                    reason: format!("expected {NUM_KEYPOINTS} keypoints, found {}", rows.len()),
                });
            }
            let mut kps = Vec::with_capacity(NUM_KEYPOINTS);
            for (k, row) in rows.iter().enumerate() {
                let (x, y, in_frame) = match row.as_slice() {
                    [x, y] => (*x, *y, true),
                    [x, y, flag] => (*x, *y, *flag != 0.0),
                    _ => {
                        return Err(Error::Parse {
                            line,
                            reason: format!("keypoint {k} must be [x, y] or [x, y, flag]"),
                        })
                    }
                };
                if !x.is_finite() || !y.is_finite() {
                    return Err(Error::Parse {
                        line,
                        reason: format!("keypoint {k} is not finite"),
                    });
                }
                let inside = (0.0..=w0 as f64).contains(&x) && (0.0..=h0 as f64).contains(&y);
                if in_frame && !inside {
                    return Err(Error::Parse {
                        line,
                        reason: format!(
                            "keypoint {k} at ({x}, {y}) lies outside the {w0}x{h0} image without an out-of-frame flag"
                        ),
                    });
                }
                kps.push(Keypoint {
                    x: x * sx,
                    y: y * sy,
                    in_frame,
                });
            }
            Some(kps)
        }
    };

    let mut gt_boxes = BTreeMap::new();
    for (key, coords) in record.boxes {
        let attr: usize = key.parse().map_err(|_| Error::Parse {
            line,
            reason: format!("box key {key:?} is not an attribute index"),
        })?;
        if attr >= m {
            return Err(Error::Parse {
                line,
                reason: format!("box for attribute {attr} but schema has {m}"),
            });
        }
        if coords.iter().any(|&c| c < 0) {
            return Err(Error::Parse {
                line,
                reason: format!("box for attribute {attr} has a negative coordinate"),
            });
        }
        let b = BoundingBox::new(
            coords[0] as usize,
            coords[1] as usize,
            coords[2] as usize,
            coords[3] as usize,
        );
        if !b.is_valid_within(h0, w0) {
            return Err(Error::Parse {
                line,
                reason: format!("box for attribute {attr} is empty or outside the image"),
            });
        }
        let scaled = if (h0, w0) == (h, w) {
            b
        } else {
            let lo = |v: usize, s: f64| ((v as f64) * s).floor() as usize;
            let hi = |v: usize, s: f64, lim: usize| (((v as f64) * s).ceil() as usize).min(lim);
            BoundingBox::new(lo(b.x_min, sx), lo(b.y_min, sy), hi(b.x_max, sx, w), hi(b.y_max, sy, h))
        };
        gt_boxes.insert(attr, scaled);
    }

    let image = resize_bilinear(&raw.view(), h, w);
    Ok(Sample {
        image,
        labels,
        keypoints,
        gt_boxes,
    })
}

/// Writes `dataset` as PNG images under `dir/images/` plus a JSON-lines
/// manifest `dir/<name>`; returns the manifest path.
pub fn save_manifest(dataset: &Dataset, dir: impl AsRef<Path>, name: &str) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let stem = Path::new(name)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("manifest")
        .to_string();
    let image_dir = dir.join("images").join(&stem);
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    let manifest_path = dir.join(name);
    let mut out = String::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        let rel = format!("images/{stem}/{i:05}.png");
        save_png(&s.image.view(), &dir.join(&rel))?;
        let record = Record {
            image: rel,
            labels: s.labels.iter().map(|&l| l as i64).collect(),
            keypoints: s.keypoints.as_ref().map(|kps| {
                kps.iter()
                    .map(|k| {
                        if k.in_frame {
                            vec![k.x, k.y]
                        } else {
                            vec![k.x, k.y, 0.0]
                        }
                    })
                    .collect()
            }),
            boxes: s
                .gt_boxes
                .iter()
                .map(|(a, b)| {
                    (
                        a.to_string(),
                        [b.x_min as i64, b.y_min as i64, b.x_max as i64, b.y_max as i64],
                    )
                })
                .collect(),
        };
        out.push_str(&serde_json::to_string(&record).expect("record serializes"));
        out.push('\n');
    }
    let mut f = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    f.write_all(out.as_bytes())
        .map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}
