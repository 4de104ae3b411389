//! Annotation, configuration, offset and prediction file formats.
//!
//! Annotations are DOTA text: one object per line, `x1 y1 x2 y2 x3 y3 x4 y4
//! class [difficult]`. Offsets are either `OFF1` binary (little-endian header
//! `num_priors: u32, n: u32`, then `num_priors * n * 2` f32 values in flat
//! prior order) or a JSON array of shape `[num_priors][n][2]`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::assign::{AssignmentResult, DcflConfig, GtInstance, PredictionField};
use crate::error::{Error, Result};
use crate::eval::{default_iou_thresholds, Detection, DEFAULT_SIZE_EDGES};
use crate::gaussian::Measure;
use crate::geom::{box_from_quad, quad_from_box, OBox, Point};
use crate::prior::{
    OffsetField, PriorField, DEFAULT_N_OFFSETS, DEFAULT_SCALE_FACTOR, DEFAULT_STRIDES,
};

pub const AI_TOD_R_CLASSES: [&str; 8] = [
    "airplane",
    "bridge",
    "storage-tank",
    "ship",
    "swimming-pool",
    "vehicle",
    "person",
    "wind-mill",
];

fn is_metadata(line: &str) -> bool {
    line.starts_with("imagesource:") || line.starts_with("gsd:")
}

/// Whitespace-split tokens with their 1-based character column.
fn tokens(line: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start = None;
    for (col, (byte, ch)) in line.char_indices().enumerate() {
        match (ch.is_whitespace(), start) {
            (false, None) => start = Some((col + 1, byte)),
            (true, Some((c, b))) => {
                out.push((c, &line[b..byte]));
                start = None;
            }
            _ => {}
        }
    }
    if let Some((c, b)) = start {
        out.push((c, &line[b..]));
    }
    out
}

pub fn parse_dota(text: &str, classes: &[String]) -> Result<Vec<GtInstance>> {
    let mut gts = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || is_metadata(line.trim_start()) {
            continue;
        }
        let toks = tokens(line);
        if toks.len() != 9 && toks.len() != 10 {
            return Err(Error::Parse {
                line: line_no,
                column: 1,
                message: format!("expected 9 or 10 fields, found {}", toks.len()),
            });
        }
        let mut coords = [0.0f64; 8];
        for (k, (col, tok)) in toks[..8].iter().enumerate() {
            let v: f64 = tok.parse().map_err(|_| Error::Parse {
                line: line_no,
                column: *col,
                message: format!("malformed coordinate {tok:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    column: *col,
                    message: format!("non-finite coordinate {tok:?}"),
                });
            }
            coords[k] = v;
        }
        let name = toks[8].1;
        let class_id =
            classes
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::UnknownClass {
                    name: name.to_string(),
                    line: line_no,
                })?;
        let difficult = match toks.get(9) {
            None | Some((_, "0")) => false,
            Some((_, "1")) => true,
            Some((col, tok)) => {
                return Err(Error::Parse {
                    line: line_no,
                    column: *col,
                    message: format!("difficulty must be 0 or 1, found {tok:?}"),
                })
            }
        };
        let pts = [
            Point::new(coords[0], coords[1]),
            Point::new(coords[2], coords[3]),
            Point::new(coords[4], coords[5]),
            Point::new(coords[6], coords[7]),
        ];
        let obox = box_from_quad(&pts).map_err(|e| Error::Parse {
            line: line_no,
            column: 1,
            message: e.to_string(),
        })?;
        gts.push(GtInstance {
            obox,
            class_id,
            difficult,
        });
    }
    Ok(gts)
}

pub fn serialize_dota(gts: &[GtInstance], classes: &[String]) -> Result<String> {
    let mut out = String::new();
    for g in gts {
        let name = classes
            .get(g.class_id)
            .ok_or_else(|| Error::Config(format!("class id {} has no name", g.class_id)))?;
        for p in quad_from_box(&g.obox).vertices() {
            out.push_str(&format!("{} {} ", p.x, p.y));
        }
        out.push_str(&format!("{} {}\n", name, u8::from(g.difficult)));
    }
    Ok(out)
}

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// `.txt` files directly inside `dir`, sorted by file name.
pub fn list_annotation_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|x| x == "txt") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Image id of an annotation file: its stem.
pub fn image_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Parses every annotation file in `dir`, keyed by image id.
pub fn load_annotation_dir(
    dir: &Path,
    classes: &[String],
) -> Result<BTreeMap<String, Vec<GtInstance>>> {
    let mut out = BTreeMap::new();
    for path in list_annotation_files(dir)? {
        let gts = parse_dota(&read_to_string(&path)?, classes).map_err(|e| in_file(&path, e))?;
        out.insert(image_id(&path), gts);
    }
    Ok(out)
}

/// Prefixes parse errors with the offending file.
pub fn in_file(path: &Path, e: Error) -> Error {
    match e {
        Error::Parse {
            line,
            column,
            message,
        } => Error::Parse {
            line,
            column,
            message: format!("{}: {message}", path.display()),
        },
        Error::UnknownClass { name, line } => Error::UnknownClass {
            name: format!("{name} (in {})", path.display()),
            line,
        },
        other => other,
    }
}

fn default_classes() -> Vec<String> {
    AI_TOD_R_CLASSES.iter().map(|s| s.to_string()).collect()
}

/// Everything a run needs: assignment parameters, class list, image size,
/// evaluation thresholds, bucket edges and the MaxIoU baseline thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(alias = "K")]
    pub k: usize,
    #[serde(alias = "Q")]
    pub q: usize,
    pub g: f64,
    pub w1: f64,
    pub alpha: f64,
    pub strides: Vec<f64>,
    pub scale_factor: f64,
    pub n_offsets: usize,
    pub measure: Measure,
    pub classes: Vec<String>,
    pub image_width: f64,
    pub image_height: f64,
    pub iou_thrs: Vec<f64>,
    pub scale_edges: Vec<f64>,
    pub angle_edges: Vec<f64>,
    pub pos_thr: f64,
    pub neg_thr: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            k: 16,
            q: 12,
            g: 0.8,
            w1: 0.7,
            alpha: 0.5,
            strides: DEFAULT_STRIDES.to_vec(),
            scale_factor: DEFAULT_SCALE_FACTOR,
            n_offsets: DEFAULT_N_OFFSETS,
            measure: Measure::Gjsd,
            classes: default_classes(),
            image_width: 800.0,
            image_height: 800.0,
            iou_thrs: default_iou_thresholds(),
            scale_edges: DEFAULT_SIZE_EDGES.to_vec(),
            angle_edges: crate::bias::default_angle_edges(),
            pos_thr: 0.5,
            neg_thr: 0.4,
        }
    }
}

impl RunConfig {
    pub fn dcfl(&self) -> DcflConfig {
        DcflConfig {
            k: self.k,
            q: self.q,
            g: self.g,
            w1: self.w1,
            alpha: self.alpha,
            strides: self.strides.clone(),
            scale_factor: self.scale_factor,
            n_offsets: self.n_offsets,
            measure: self.measure,
        }
    }

    pub fn image_size(&self) -> (f64, f64) {
        (self.image_width, self.image_height)
    }

    pub fn validate(&self) -> Result<()> {
        self.dcfl().validate()?;
        if self.classes.is_empty() {
            return Err(Error::Config("class list is empty".into()));
        }
        if !(self.image_width > 0.0 && self.image_height > 0.0) {
            return Err(Error::Config("image size must be positive".into()));
        }
        let ascending = |v: &[f64]| v.windows(2).all(|w| w[0] < w[1]);
        if !ascending(&self.scale_edges) || !ascending(&self.angle_edges) {
            return Err(Error::Config("bucket edges must be ascending".into()));
        }
        if self.iou_thrs.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Config("iou thresholds must lie in [0, 1]".into()));
        }
        if !(self.neg_thr <= self.pos_thr) {
            return Err(Error::Config("neg_thr must not exceed pos_thr".into()));
        }
        Ok(())
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    parse_config(&read_to_string(path)?)
}

const OFFSET_MAGIC: &[u8; 4] = b"OFF1";

pub fn encode_offsets(field: &OffsetField) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + field.vectors().len() * 8);
    out.extend_from_slice(OFFSET_MAGIC);
    out.extend_from_slice(&(field.num_priors() as u32).to_le_bytes());
    out.extend_from_slice(&(field.n() as u32).to_le_bytes());
    for v in field.vectors() {
        out.extend_from_slice(&(v[0] as f32).to_le_bytes());
        out.extend_from_slice(&(v[1] as f32).to_le_bytes());
    }
    out
}

/// Decodes either offset layout, picked by the leading magic bytes.
pub fn decode_offsets(bytes: &[u8]) -> Result<OffsetField> {
    if bytes.starts_with(OFFSET_MAGIC) {
        let word = |at: usize| -> Result<u32> {
            bytes
                .get(at..at + 4)
                .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
                .ok_or_else(|| Error::Shape("truncated offset header".into()))
        };
        let num_priors = word(4)? as usize;
        let n = word(8)? as usize;
        let body = &bytes[12..];
        let expected = num_priors * n * 2 * 4;
        if body.len() != expected {
            return Err(Error::Shape(format!(
                "offset body has {} bytes, header implies {expected}",
                body.len()
            )));
        }
        let vals: Vec<f64> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let vectors = vals.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
        OffsetField::new(n, vectors)
    } else {
        let nested: Vec<Vec<[f64; 2]>> = serde_json::from_slice(bytes)?;
        let n = nested.first().map_or(1, Vec::len);
        if nested.iter().any(|p| p.len() != n) {
            return Err(Error::Shape("ragged offset array".into()));
        }
        OffsetField::new(n, nested.into_iter().flatten().collect())
    }
}

pub fn load_offsets(path: &Path) -> Result<OffsetField> {
    decode_offsets(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// One line of a predictions file: the detector output at one prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub image_id: String,
    pub prior: usize,
    pub scores: Vec<f64>,
    #[serde(rename = "box")]
    pub obox: OBox,
}

fn jsonl<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<(usize, T)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            column: e.column(),
            message: e.to_string(),
        })?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

pub fn parse_predictions(text: &str) -> Result<BTreeMap<String, Vec<PredictionRecord>>> {
    let mut out: BTreeMap<String, Vec<PredictionRecord>> = BTreeMap::new();
    for (_, rec) in jsonl::<PredictionRecord>(text)? {
        out.entry(rec.image_id.clone()).or_default().push(rec);
    }
    Ok(out)
}

/// Dense field from sparse records. Priors without a record score 0 for every
/// class and predict their own box; a prior listed twice is an error.
pub fn prediction_field(
    records: &[PredictionRecord],
    priors: &PriorField,
    num_classes: usize,
) -> Result<PredictionField> {
    let mut scores = vec![0.0; priors.len() * num_classes];
    let mut boxes: Vec<Option<OBox>> = vec![None; priors.len()];
    for r in records {
        if r.prior >= priors.len() {
            return Err(Error::Shape(format!(
                "prediction for prior {} but the field has {}",
                r.prior,
                priors.len()
            )));
        }
        if r.scores.len() != num_classes {
            return Err(Error::Shape(format!(
                "prior {} has {} scores, expected {num_classes}",
                r.prior,
                r.scores.len()
            )));
        }
        if boxes[r.prior].replace(r.obox).is_some() {
            return Err(Error::Shape(format!("prior {} predicted twice", r.prior)));
        }
        scores[r.prior * num_classes..(r.prior + 1) * num_classes].copy_from_slice(&r.scores);
    }
    let boxes = boxes
        .into_iter()
        .enumerate()
        .map(|(i, b)| b.unwrap_or_else(|| priors.prior_box(i)))
        .collect();
    PredictionField::dense(num_classes, scores, boxes)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionRecord {
    image_id: String,
    class: String,
    #[serde(alias = "confidence")]
    score: f64,
    #[serde(rename = "box")]
    obox: OBox,
}

/// Detections JSONL, one `{image_id, class, score, box}` object per line with
/// the class given by name.
pub fn parse_detections(text: &str, classes: &[String]) -> Result<Vec<Detection>> {
    jsonl::<DetectionRecord>(text)?
        .into_iter()
        .map(|(line, r)| {
            let class_id =
                classes
                    .iter()
                    .position(|c| *c == r.class)
                    .ok_or(Error::UnknownClass {
                        name: r.class.clone(),
                        line,
                    })?;
            Ok(Detection {
                image_id: r.image_id,
                class_id,
                confidence: r.score,
                obox: r.obox,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageAssignment {
    pub image_id: String,
    pub num_priors: usize,
    #[serde(flatten)]
    pub result: AssignmentResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentDocument {
    pub config: DcflConfig,
    pub images: Vec<ImageAssignment>,
}

impl AssignmentDocument {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<AssignmentDocument> {
        Ok(serde_json::from_str(text)?)
    }
}
