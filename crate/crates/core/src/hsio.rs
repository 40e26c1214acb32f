//! File formats, rendering and accuracy.
//!
//! Cube and probability files share one framing: a single-line JSON header
//! terminated by `\n`, then `H * W * C` little-endian `f32` values, channel
//! by channel, each channel in row-major pixel order.
//!
//! ```text
//! {"magic":"HSC1","height":H,"width":W,"bands":d,"dtype":"f32"}\n<payload>
//! {"magic":"HSP1","height":H,"width":W,"classes":K,"dtype":"f32"}\n<payload>
//! ```
//!
//! Label files are headerless CSV lines `row,col,label` with 0-based
//! coordinates. Pixels that are not listed are unlabeled (label 0).

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{HiddenField, HyperCube, ImageGrid, LabelMap, ProbabilityMap};
use crate::mlr::MlrModel;

pub const CUBE_MAGIC: &str = "HSC1";
pub const PROB_MAGIC: &str = "HSP1";

#[derive(Serialize)]
struct CubeHeader<'a> {
    magic: &'a str,
    height: usize,
    width: usize,
    bands: usize,
    dtype: &'a str,
}

#[derive(Serialize)]
struct ProbHeader<'a> {
    magic: &'a str,
    height: usize,
    width: usize,
    classes: usize,
    dtype: &'a str,
}

#[derive(Deserialize)]
struct RawHeader {
    magic: String,
    height: usize,
    width: usize,
    bands: Option<usize>,
    classes: Option<usize>,
    dtype: String,
}

fn frame(header: &impl Serialize, values: &Array2<f64>) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec(header)?;
    out.push(b'\n');
    out.reserve(values.len() * 4);
    for v in values.as_standard_layout().iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Parses a framed file; returns the grid and the `C x n` payload.
fn unframe(bytes: &[u8], magic: &'static str) -> Result<(ImageGrid, Array2<f64>)> {
    let newline = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::InvalidHeader {
        offset: bytes.len(),
        reason: "no newline terminating the header".into(),
    })?;
    let header: RawHeader = serde_json::from_slice(&bytes[..newline]).map_err(|e| Error::InvalidHeader {
        offset: e.column().saturating_sub(1),
        reason: e.to_string(),
    })?;
    if header.magic != magic {
        return Err(Error::MagicMismatch {
            offset: 0,
            expected: magic,
            found: header.magic,
        });
    }
    if header.dtype != "f32" {
        return Err(Error::InvalidHeader {
            offset: 0,
            reason: format!("unsupported dtype {:?}", header.dtype),
        });
    }
    let (key, channels) = if magic == CUBE_MAGIC {
        ("bands", header.bands)
    } else {
        ("classes", header.classes)
    };
    let channels = channels.ok_or_else(|| Error::InvalidHeader {
        offset: 0,
        reason: format!("missing {key:?}"),
    })?;
    if header.height == 0 || header.width == 0 || channels == 0 {
        return Err(Error::InvalidHeader {
            offset: 0,
            reason: format!(
                "height, width and {key} must be positive, got {}x{}x{channels}",
                header.height, header.width
            ),
        });
    }
    let grid = ImageGrid::new(header.height, header.width)?;
    let offset = newline + 1;
    let expected = 4 * grid.len() * channels;
    let payload = &bytes[offset..];
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            offset,
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::TrailingData {
            offset: offset + expected,
        });
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let values = Array2::from_shape_vec((channels, grid.len()), values).expect("payload length checked");
    Ok((grid, values))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Values are stored as `f32`; anything not representable is rounded.
pub fn encode_cube(cube: &HyperCube) -> Result<Vec<u8>> {
    let grid = cube.grid();
    let header = CubeHeader {
        magic: CUBE_MAGIC,
        height: grid.height(),
        width: grid.width(),
        bands: cube.bands(),
        dtype: "f32",
    };
    frame(&header, cube.values())
}

pub fn decode_cube(bytes: &[u8]) -> Result<HyperCube> {
    let (grid, values) = unframe(bytes, CUBE_MAGIC)?;
    HyperCube::new(grid, values)
}

pub fn encode_probs(probs: &ProbabilityMap) -> Result<Vec<u8>> {
    encode_prob_values(probs.grid(), probs.values())
}

fn encode_prob_values(grid: ImageGrid, values: &Array2<f64>) -> Result<Vec<u8>> {
    let header = ProbHeader {
        magic: PROB_MAGIC,
        height: grid.height(),
        width: grid.width(),
        classes: values.nrows(),
        dtype: "f32",
    };
    frame(&header, values)
}

pub fn decode_probs(bytes: &[u8]) -> Result<ProbabilityMap> {
    let (grid, values) = unframe(bytes, PROB_MAGIC)?;
    ProbabilityMap::new(grid, values)
}

pub fn read_cube(path: impl AsRef<Path>) -> Result<HyperCube> {
    decode_cube(&read_bytes(path.as_ref())?)
}

pub fn write_cube(path: impl AsRef<Path>, cube: &HyperCube) -> Result<()> {
    write_bytes(path.as_ref(), &encode_cube(cube)?)
}

pub fn read_probs(path: impl AsRef<Path>) -> Result<ProbabilityMap> {
    decode_probs(&read_bytes(path.as_ref())?)
}

pub fn write_probs(path: impl AsRef<Path>, probs: &ProbabilityMap) -> Result<()> {
    write_bytes(path.as_ref(), &encode_probs(probs)?)
}

/// Writes a hidden field in the probability-file framing.
pub fn write_field(path: impl AsRef<Path>, field: &HiddenField) -> Result<()> {
    write_bytes(path.as_ref(), &encode_prob_values(field.grid(), field.values())?)
}

/// One `row,col,label` line of a label file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelEntry {
    pub line: u64,
    pub row: usize,
    pub col: usize,
    pub label: u32,
}

pub fn parse_label_entries(text: &str) -> Result<Vec<LabelEntry>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut entries = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 3 {
            return Err(Error::Parse {
                line,
                reason: format!("expected 3 fields row,col,label, found {}", record.len()),
            });
        }
        let field = |idx: usize, name: &str| -> Result<u64> {
            record[idx].parse::<u64>().map_err(|e| Error::Parse {
                line,
                reason: format!("{name} {:?}: {e}", &record[idx]),
            })
        };
        let row = field(0, "row")? as usize;
        let col = field(1, "col")? as usize;
        let label = u32::try_from(field(2, "label")?).map_err(|_| Error::Parse {
            line,
            reason: "label out of range".into(),
        })?;
        entries.push(LabelEntry { line, row, col, label });
    }
    Ok(entries)
}

/// Builds a label map from file entries, rejecting out-of-grid and repeated
/// pixels.
pub fn label_map_from_entries(grid: ImageGrid, entries: &[LabelEntry]) -> Result<LabelMap> {
    let mut map = LabelMap::unlabeled(grid);
    let mut seen = HashSet::new();
    for e in entries {
        if e.row >= grid.height() || e.col >= grid.width() {
            return Err(Error::IndexOutOfRange {
                line: e.line,
                row: e.row,
                col: e.col,
                height: grid.height(),
                width: grid.width(),
            });
        }
        if !seen.insert((e.row, e.col)) {
            return Err(Error::Parse {
                line: e.line,
                reason: format!("pixel ({}, {}) listed twice", e.row, e.col),
            });
        }
        map.set(e.row, e.col, e.label);
    }
    Ok(map)
}

pub fn read_labels(path: impl AsRef<Path>, grid: ImageGrid) -> Result<LabelMap> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    label_map_from_entries(grid, &parse_label_entries(&text)?)
}

/// CSV text for every labeled (nonzero) pixel, in row-major order.
pub fn format_labels(labels: &LabelMap) -> String {
    let grid = labels.grid();
    let mut out = String::new();
    for (i, &l) in labels.labels().iter().enumerate() {
        if l != 0 {
            let (r, c) = grid.coords(i);
            out.push_str(&format!("{r},{c},{l}\n"));
        }
    }
    out
}

pub fn write_labels(path: impl AsRef<Path>, labels: &LabelMap) -> Result<()> {
    write_bytes(path.as_ref(), format_labels(labels).as_bytes())
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    classes: usize,
    bands: usize,
    ridge: f64,
    feature_mean: Vec<f64>,
    feature_scale: Vec<f64>,
    /// One row per class, bias last.
    weights: Vec<Vec<f64>>,
}

const MODEL_FORMAT: &str = "mlr-v1";

pub fn write_model(path: impl AsRef<Path>, model: &MlrModel) -> Result<()> {
    let file = ModelFile {
        format: MODEL_FORMAT.into(),
        classes: model.classes(),
        bands: model.bands(),
        ridge: model.ridge,
        feature_mean: model.feature_mean.to_vec(),
        feature_scale: model.feature_scale.to_vec(),
        weights: model.weights.rows().into_iter().map(|r| r.to_vec()).collect(),
    };
    let mut text = serde_json::to_string_pretty(&file)?;
    text.push('\n');
    write_bytes(path.as_ref(), text.as_bytes())
}

pub fn read_model(path: impl AsRef<Path>) -> Result<MlrModel> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ModelFile = serde_json::from_str(&text)?;
    let bad = |reason: String| Error::Parse { line: 1, reason };
    if file.format != MODEL_FORMAT {
        return Err(bad(format!("unknown model format {:?}", file.format)));
    }
    if file.classes == 0
        || file.weights.len() != file.classes
        || file.weights.iter().any(|r| r.len() != file.bands + 1)
        || file.feature_mean.len() != file.bands
        || file.feature_scale.len() != file.bands
    {
        return Err(bad("model dimensions are inconsistent".into()));
    }
    let flat: Vec<f64> = file.weights.into_iter().flatten().collect();
    if flat.iter().any(|w| !w.is_finite()) {
        return Err(bad("non-finite model weight".into()));
    }
    Ok(MlrModel {
        weights: Array2::from_shape_vec((file.classes, file.bands + 1), flat).expect("shape checked"),
        ridge: file.ridge,
        feature_mean: Array1::from(file.feature_mean),
        feature_scale: Array1::from(file.feature_scale),
    })
}

/// Sixteen distinct class colors; label 0 is always black.
pub const DEFAULT_PALETTE: [[u8; 3]; 16] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
    [170, 255, 195],
];

/// Binary PPM (P6) of a label map; label `k` takes `palette[k - 1]`.
pub fn render_label_map(labels: &LabelMap, palette: Option<&[[u8; 3]]>) -> Result<Vec<u8>> {
    let palette = palette.unwrap_or(&DEFAULT_PALETTE);
    let max = labels.max_label() as usize;
    if max > palette.len() {
        return Err(Error::PaletteTooSmall(max, palette.len()));
    }
    let grid = labels.grid();
    let mut out = format!("P6\n{} {}\n255\n", grid.width(), grid.height()).into_bytes();
    for &l in labels.labels() {
        let rgb = if l == 0 { [0, 0, 0] } else { palette[l as usize - 1] };
        out.extend_from_slice(&rgb);
    }
    Ok(out)
}

/// Binary PGM (P5) of field channel `class` (0-based), `[0, 1] -> [0, 255]`
/// rounding half up; values outside `[0, 1]` are clamped.
pub fn render_field_channel(field: &HiddenField, class: usize) -> Result<Vec<u8>> {
    if class >= field.classes() {
        return Err(Error::InvalidParameter(format!(
            "class channel {class} out of range for {} classes",
            field.classes()
        )));
    }
    let grid = field.grid();
    let mut out = format!("P5\n{} {}\n255\n", grid.width(), grid.height()).into_bytes();
    out.extend(
        field
            .values()
            .row(class)
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8),
    );
    Ok(out)
}

pub fn write_image(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Fraction of labeled ground-truth pixels predicted correctly. Pixel
/// indices in `exclude` (usually the training samples) are left out.
pub fn overall_accuracy(pred: &LabelMap, truth: &LabelMap, exclude: &[usize]) -> Result<f64> {
    if pred.grid() != truth.grid() {
        return Err(Error::mismatch(
            "overall_accuracy",
            format!("{}x{}", truth.grid().height(), truth.grid().width()),
            format!("{}x{}", pred.grid().height(), pred.grid().width()),
        ));
    }
    let excluded: HashSet<usize> = exclude.iter().copied().collect();
    let (mut total, mut correct) = (0usize, 0usize);
    for (i, (&p, &t)) in pred.labels().iter().zip(truth.labels()).enumerate() {
        if t == 0 || excluded.contains(&i) {
            continue;
        }
        total += 1;
        correct += usize::from(p == t);
    }
    if total == 0 {
        return Err(Error::EmptyEvaluation);
    }
    Ok(correct as f64 / total as f64)
}
