//! Ground-truth and detection I/O.
//!
//! * Pascal-VOC XML annotations, one file per image.
//! * `submission` detections: one CSV-ish line per image,
//!   `image.jpg,label xmin ymin xmax ymax [label xmin ymin xmax ymax ...]`
//!   with labels `1..=4` for `D00, D10, D20, D40` and no confidences.
//! * `scored` detections: one whitespace-separated line per box,
//!   `image_id class confidence xmin ymin xmax ymax`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use quick_xml::events::Event;
use rayon::prelude::*;
use serde::Deserialize;
use thiserror::Error;
use walkdir::WalkDir;

use crate::geometry::{BBox, BoxError};

/// Road damage categories scored by the challenge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DamageClass {
    /// Longitudinal linear crack.
    D00,
    /// Lateral linear crack.
    D10,
    /// Alligator crack.
    D20,
    /// Pothole.
    D40,
}

impl DamageClass {
    pub const ALL: [DamageClass; 4] = [Self::D00, Self::D10, Self::D20, Self::D40];

    pub fn code(self) -> &'static str {
        match self {
            Self::D00 => "D00",
            Self::D10 => "D10",
            Self::D20 => "D20",
            Self::D40 => "D40",
        }
    }

    /// Numeric label used in submission files.
    pub fn submission_id(self) -> u8 {
        match self {
            Self::D00 => 1,
            Self::D10 => 2,
            Self::D20 => 3,
            Self::D40 => 4,
        }
    }

    pub fn from_submission_id(id: u8) -> Option<Self> {
        match id {
            1 => Some(Self::D00),
            2 => Some(Self::D10),
            3 => Some(Self::D20),
            4 => Some(Self::D40),
            _ => None,
        }
    }
}

impl fmt::Display for DamageClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown damage class `{0}`")]
pub struct UnknownClass(pub String);

impl FromStr for DamageClass {
    type Err = UnknownClass;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "D00" => Ok(Self::D00),
            "D10" => Ok(Self::D10),
            "D20" => Ok(Self::D20),
            "D40" => Ok(Self::D40),
            other => Err(UnknownClass(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Country {
    Czech,
    India,
    Japan,
    Unknown,
}

impl Country {
    pub const ALL: [Country; 4] = [Self::Czech, Self::India, Self::Japan, Self::Unknown];

    pub fn name(self) -> &'static str {
        match self {
            Self::Czech => "Czech",
            Self::India => "India",
            Self::Japan => "Japan",
            Self::Unknown => "Unknown",
        }
    }
}

impl fmt::Display for Country {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Country encoded in an image id's prefix (case-sensitive), e.g.
/// `Japan_013772` → `Japan`.
pub fn country_of(image_id: &str) -> Country {
    [Country::Czech, Country::India, Country::Japan]
        .into_iter()
        .filter(|c| image_id.starts_with(c.name()))
        .max_by_key(|c| c.name().len())
        .unwrap_or(Country::Unknown)
}

/// Strips a trailing image-file extension (`.jpg`, `.jpeg`, `.png`, `.bmp`,
/// case-insensitive). Other dots are part of the id.
pub fn image_stem(name: &str) -> &str {
    if let Some((stem, ext)) = name.rsplit_once('.') {
        if !stem.is_empty()
            && ["jpg", "jpeg", "png", "bmp"]
                .iter()
                .any(|e| ext.eq_ignore_ascii_case(e))
        {
            return stem;
        }
    }
    name
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthBox {
    pub image_id: String,
    pub class: DamageClass,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image_id: String,
    pub class: DamageClass,
    pub bbox: BBox,
    /// In `[0, 1]`.
    pub confidence: f64,
    pub model_id: String,
}

pub const DEFAULT_MODEL_ID: &str = "m0";

impl Detection {
    pub fn new(
        image_id: impl Into<String>,
        class: DamageClass,
        bbox: BBox,
        confidence: f64,
    ) -> Result<Self, DatasetError> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(DatasetError::ConfidenceOutOfRange {
                line: 0,
                value: confidence,
            });
        }
        Ok(Self {
            image_id: image_id.into(),
            class,
            bbox,
            confidence,
            model_id: DEFAULT_MODEL_ID.to_string(),
        })
    }

    pub fn with_model(mut self, model_id: impl Into<String>) -> Self {
        self.model_id = model_id.into();
        self
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("malformed annotation XML: {0}")]
    MalformedXml(String),
    #[error("line {line}: unknown damage class `{label}`")]
    UnknownClass { line: usize, label: String },
    #[error("line {line}: invalid box for image `{image_id}`: {source}")]
    InvalidBox {
        image_id: String,
        line: usize,
        source: BoxError,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: confidence {value} outside [0, 1]")]
    ConfidenceOutOfRange { line: usize, value: f64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    InFile {
        path: PathBuf,
        source: Box<DatasetError>,
    },
}

impl DatasetError {
    pub fn in_file(self, path: &Path) -> Self {
        DatasetError::InFile {
            path: path.to_path_buf(),
            source: Box::new(self),
        }
    }
}

/// Non-fatal input problem. Renders as `WARN <file>:<line> <message>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Warning {
    pub file: Option<String>,
    pub line: usize,
    pub message: String,
}

impl fmt::Display for Warning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let file = self.file.as_deref().unwrap_or("<input>");
        write!(f, "WARN {}:{} {}", file, self.line, self.message)
    }
}

/// What to do with damage codes outside the four scored classes
/// (the raw dataset also carries D43, D44, D50, ...).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParseMode {
    Strict,
    #[default]
    Lenient,
}

/// A parsed value plus the warnings raised while producing it.
#[derive(Debug, Clone, PartialEq)]
pub struct Parsed<T> {
    pub value: T,
    pub warnings: Vec<Warning>,
}

impl<T> Parsed<T> {
    /// Attach a file name to every warning.
    pub fn from_file(mut self, file: &str) -> Self {
        for w in &mut self.warnings {
            w.file = Some(file.to_string());
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VocAnnotation {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub boxes: Vec<GroundTruthBox>,
}

#[derive(Deserialize)]
struct XmlAnnotation {
    filename: String,
    size: XmlSize,
    #[serde(rename = "object", default)]
    objects: Vec<XmlObject>,
}

#[derive(Deserialize)]
struct XmlSize {
    width: String,
    height: String,
}

#[derive(Deserialize)]
struct XmlObject {
    name: String,
    bndbox: XmlBndBox,
}

#[derive(Deserialize)]
struct XmlBndBox {
    xmin: String,
    ymin: String,
    xmax: String,
    ymax: String,
}

fn root_element(xml: &str) -> Result<String, DatasetError> {
    let mut reader = quick_xml::Reader::from_str(xml);
    loop {
        match reader.read_event() {
            Ok(Event::Start(e)) | Ok(Event::Empty(e)) => {
                return Ok(String::from_utf8_lossy(e.name().as_ref()).into_owned())
            }
            Ok(Event::Eof) => return Err(DatasetError::MalformedXml("no root element".into())),
            Ok(_) => {}
            Err(e) => return Err(DatasetError::MalformedXml(e.to_string())),
        }
    }
}

/// 1-based line of each `<object>` start tag, in document order.
fn object_lines(xml: &str) -> Vec<usize> {
    let bytes = xml.as_bytes();
    let mut lines = Vec::new();
    let mut line = 1;
    for (i, &b) in bytes.iter().enumerate() {
        if b == b'\n' {
            line += 1;
        } else if b == b'<'
            && bytes[i..].starts_with(b"<object")
            && matches!(bytes.get(i + 7), Some(b'>' | b' ' | b'\t' | b'\r' | b'\n'))
        {
            lines.push(line);
        }
    }
    lines
}

fn parse_number<T: FromStr>(field: &str, text: &str) -> Result<T, DatasetError> {
    text.trim().parse().map_err(|_| {
        DatasetError::MalformedXml(format!("<{field}> is not a number: `{}`", text.trim()))
    })
}

/// Parse one Pascal-VOC annotation document.
///
/// Objects whose `<name>` is not a scored damage class are an error in
/// [`ParseMode::Strict`] and dropped with a warning in
/// [`ParseMode::Lenient`]. Boxes are never repaired: an empty or inverted
/// box fails the whole document.
pub fn parse_voc_annotation(
    xml: &str,
    mode: ParseMode,
) -> Result<Parsed<VocAnnotation>, DatasetError> {
    let root = root_element(xml)?;
    if root != "annotation" {
        return Err(DatasetError::MalformedXml(format!(
            "expected <annotation> root, found <{root}>"
        )));
    }
    let doc: XmlAnnotation =
        quick_xml::de::from_str(xml).map_err(|e| DatasetError::MalformedXml(e.to_string()))?;
    let image_id = image_stem(doc.filename.trim()).to_string();
    if image_id.is_empty() {
        return Err(DatasetError::MalformedXml("empty <filename>".into()));
    }
    let width = parse_number("width", &doc.size.width)?;
    let height = parse_number("height", &doc.size.height)?;
    let lines = object_lines(xml);

    let mut boxes = Vec::with_capacity(doc.objects.len());
    let mut warnings = Vec::new();
    for (k, obj) in doc.objects.iter().enumerate() {
        let line = lines.get(k).copied().unwrap_or(0);
        let label = obj.name.trim();
        let class = match label.parse::<DamageClass>() {
            Ok(c) => c,
            Err(_) if mode == ParseMode::Lenient => {
                warnings.push(Warning {
                    file: None,
                    line,
                    message: format!(
                        "dropping object with unscored class `{label}` in `{image_id}`"
                    ),
                });
                continue;
            }
            Err(_) => {
                return Err(DatasetError::UnknownClass {
                    line,
                    label: label.to_string(),
                })
            }
        };
        let bb = &obj.bndbox;
        let bbox = BBox::new(
            parse_number("xmin", &bb.xmin)?,
            parse_number("ymin", &bb.ymin)?,
            parse_number("xmax", &bb.xmax)?,
            parse_number("ymax", &bb.ymax)?,
        )
        .map_err(|source| DatasetError::InvalidBox {
            image_id: image_id.clone(),
            line,
            source,
        })?;
        boxes.push(GroundTruthBox {
            image_id: image_id.clone(),
            class,
            bbox,
        });
    }

    Ok(Parsed {
        value: VocAnnotation {
            image_id,
            width,
            height,
            boxes,
        },
        warnings,
    })
}

/// Read annotations from a directory tree (every `*.xml`, sorted by path),
/// a single `.xml` file, or a list file naming one XML path per line
/// (relative paths resolve against the list's directory).
///
/// Files are parsed in parallel; the result order follows the sorted path
/// order regardless of scheduling.
pub fn load_annotations(
    path: &Path,
    mode: ParseMode,
) -> Result<Parsed<Vec<VocAnnotation>>, DatasetError> {
    let files = annotation_files(path)?;
    let parsed: Vec<Result<Parsed<VocAnnotation>, DatasetError>> = files
        .par_iter()
        .map(|file| {
            let text = fs::read_to_string(file).map_err(|source| DatasetError::Io {
                path: file.clone(),
                source,
            })?;
            let p = parse_voc_annotation(&text, mode).map_err(|e| e.in_file(file))?;
            Ok(p.from_file(&file.display().to_string()))
        })
        .collect();

    let mut value = Vec::with_capacity(parsed.len());
    let mut warnings = Vec::new();
    for p in parsed {
        let p = p?;
        value.push(p.value);
        warnings.extend(p.warnings);
    }
    Ok(Parsed { value, warnings })
}

fn annotation_files(path: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    let io_err = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let meta = fs::metadata(path).map_err(io_err)?;
    if meta.is_dir() {
        let mut files = Vec::new();
        for entry in WalkDir::new(path) {
            let entry = entry.map_err(|e| DatasetError::Io {
                path: path.to_path_buf(),
                source: e.into(),
            })?;
            let p = entry.path();
            if entry.file_type().is_file()
                && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("xml"))
            {
                files.push(p.to_path_buf());
            }
        }
        files.sort();
        return Ok(files);
    }
    if path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("xml"))
    {
        return Ok(vec![path.to_path_buf()]);
    }
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let list = fs::read_to_string(path).map_err(io_err)?;
    Ok(list
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| base.join(l))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetectionFormat {
    Submission,
    Scored,
}

impl FromStr for DetectionFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "submission" => Ok(Self::Submission),
            "scored" => Ok(Self::Scored),
            other => Err(format!(
                "unknown detection format `{other}` (expected submission|scored)"
            )),
        }
    }
}

fn parse_coord(tok: &str, line: usize) -> Result<f64, DatasetError> {
    tok.parse::<f64>().map_err(|_| DatasetError::Parse {
        line,
        message: format!("bad coordinate `{tok}`"),
    })
}

fn make_box(image_id: &str, c: [f64; 4], line: usize) -> Result<BBox, DatasetError> {
    BBox::new(c[0], c[1], c[2], c[3]).map_err(|source| DatasetError::InvalidBox {
        image_id: image_id.to_string(),
        line,
        source,
    })
}

/// Parse a detection file. Blank lines are skipped; LF and CRLF endings are
/// both accepted. Detections come back in input order.
pub fn parse_detections(
    text: &str,
    format: DetectionFormat,
    mode: ParseMode,
) -> Result<Parsed<Vec<Detection>>, DatasetError> {
    let mut dets = Vec::new();
    let mut warnings = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let raw = raw.trim();
        if raw.is_empty() {
            continue;
        }
        match format {
            DetectionFormat::Submission => {
                parse_submission_line(raw, line, mode, &mut dets, &mut warnings)?
            }
            DetectionFormat::Scored => {
                if let Some(d) = parse_scored_line(raw, line, mode, &mut warnings)? {
                    dets.push(d);
                }
            }
        }
    }
    Ok(Parsed {
        value: dets,
        warnings,
    })
}

fn parse_submission_line(
    raw: &str,
    line: usize,
    mode: ParseMode,
    dets: &mut Vec<Detection>,
    warnings: &mut Vec<Warning>,
) -> Result<(), DatasetError> {
    let (name, preds) = raw.split_once(',').ok_or_else(|| DatasetError::Parse {
        line,
        message: "expected `image_name,predictions`".into(),
    })?;
    let image_id = image_stem(name.trim());
    if image_id.is_empty() {
        return Err(DatasetError::Parse {
            line,
            message: "empty image name".into(),
        });
    }
    let toks: Vec<&str> = preds.split_whitespace().collect();
    if !toks.len().is_multiple_of(5) {
        return Err(DatasetError::Parse {
            line,
            message: format!(
                "prediction string has {} tokens, expected groups of 5 (label xmin ymin xmax ymax)",
                toks.len()
            ),
        });
    }
    for group in toks.chunks_exact(5) {
        let class = group[0]
            .parse::<u8>()
            .ok()
            .and_then(DamageClass::from_submission_id);
        let Some(class) = class else {
            if mode == ParseMode::Lenient {
                warnings.push(Warning {
                    file: None,
                    line,
                    message: format!("dropping prediction with unknown label `{}`", group[0]),
                });
                continue;
            }
            return Err(DatasetError::UnknownClass {
                line,
                label: group[0].to_string(),
            });
        };
        let mut c = [0.0; 4];
        for (slot, tok) in c.iter_mut().zip(&group[1..]) {
            *slot = parse_coord(tok, line)?;
        }
        dets.push(Detection {
            image_id: image_id.to_string(),
            class,
            bbox: make_box(image_id, c, line)?,
            confidence: 1.0,
            model_id: DEFAULT_MODEL_ID.to_string(),
        });
    }
    Ok(())
}

fn parse_scored_line(
    raw: &str,
    line: usize,
    mode: ParseMode,
    warnings: &mut Vec<Warning>,
) -> Result<Option<Detection>, DatasetError> {
    let toks: Vec<&str> = raw.split_whitespace().collect();
    if toks.len() != 7 {
        return Err(DatasetError::Parse {
            line,
            message: format!(
                "expected 7 fields (image_id class confidence xmin ymin xmax ymax), found {}",
                toks.len()
            ),
        });
    }
    let image_id = image_stem(toks[0]);
    let class = match toks[1].parse::<DamageClass>() {
        Ok(c) => c,
        Err(_) if mode == ParseMode::Lenient => {
            warnings.push(Warning {
                file: None,
                line,
                message: format!("dropping detection with unscored class `{}`", toks[1]),
            });
            return Ok(None);
        }
        Err(_) => {
            return Err(DatasetError::UnknownClass {
                line,
                label: toks[1].to_string(),
            })
        }
    };
    let confidence = toks[2].parse::<f64>().map_err(|_| DatasetError::Parse {
        line,
        message: format!("bad confidence `{}`", toks[2]),
    })?;
    if !(0.0..=1.0).contains(&confidence) {
        return Err(DatasetError::ConfidenceOutOfRange {
            line,
            value: confidence,
        });
    }
    let mut c = [0.0; 4];
    for (slot, tok) in c.iter_mut().zip(&toks[3..]) {
        *slot = parse_coord(tok, line)?;
    }
    Ok(Some(Detection {
        image_id: image_id.to_string(),
        class,
        bbox: make_box(image_id, c, line)?,
        confidence,
        model_id: DEFAULT_MODEL_ID.to_string(),
    }))
}

/// Groups detections by image (first-appearance order), drops those below
/// `conf_threshold`, orders each group by descending confidence (stable) and
/// keeps at most `max_per_image`.
pub fn select_per_image(
    dets: &[Detection],
    conf_threshold: f64,
    max_per_image: Option<usize>,
) -> Vec<(&str, Vec<&Detection>)> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&Detection>> = BTreeMap::new();
    for d in dets {
        let g = groups.entry(d.image_id.as_str()).or_insert_with(|| {
            order.push(d.image_id.as_str());
            Vec::new()
        });
        if d.confidence >= conf_threshold {
            g.push(d);
        }
    }
    order
        .into_iter()
        .map(|id| {
            let mut g = groups.remove(id).unwrap_or_default();
            g.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
            if let Some(max) = max_per_image {
                g.truncate(max);
            }
            (id, g)
        })
        .collect()
}

fn round_half_up(v: f64) -> i64 {
    (v + 0.5).floor() as i64
}

/// Integer box as written to a submission file. A box narrower than one
/// pixel can round to zero width; its max edge is then pushed out by one
/// pixel so the written box stays valid.
pub fn submission_box(b: &BBox) -> [i64; 4] {
    let [x0, y0, x1, y1] = b.to_array().map(round_half_up);
    [x0, y0, x1.max(x0 + 1), y1.max(y0 + 1)]
}

/// Serialize detections in the challenge `submission` format, one line per
/// image present in `dets` (images whose detections are all filtered still
/// get an empty `image.jpg,` line).
pub fn write_submission(
    dets: &[Detection],
    conf_threshold: f64,
    max_per_image: Option<usize>,
) -> String {
    let mut out = String::new();
    for (image_id, group) in select_per_image(dets, conf_threshold, max_per_image) {
        out.push_str(image_id);
        out.push_str(".jpg,");
        let preds: Vec<String> = group
            .iter()
            .map(|d| {
                let [x0, y0, x1, y1] = submission_box(&d.bbox);
                format!("{} {x0} {y0} {x1} {y1}", d.class.submission_id())
            })
            .collect();
        out.push_str(&preds.join(" "));
        out.push('\n');
    }
    out
}

/// Serialize detections in the `scored` format. Numbers use the shortest
/// representation that parses back to the same `f64`.
pub fn write_scored(
    dets: &[Detection],
    conf_threshold: f64,
    max_per_image: Option<usize>,
) -> String {
    let mut out = String::new();
    for (_, group) in select_per_image(dets, conf_threshold, max_per_image) {
        for d in group {
            let [x0, y0, x1, y1] = d.bbox.to_array();
            out.push_str(&format!(
                "{} {} {} {x0} {y0} {x1} {y1}\n",
                d.image_id, d.class, d.confidence
            ));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetStats {
    pub images_per_country: BTreeMap<Country, usize>,
    pub boxes_per_class: BTreeMap<DamageClass, usize>,
    pub total_images: usize,
    pub total_boxes: usize,
}

/// Image and box counts. Every country and class appears in the maps, with
/// zero where absent.
pub fn dataset_stats(annotations: &[VocAnnotation]) -> DatasetStats {
    let mut images_per_country: BTreeMap<Country, usize> =
        Country::ALL.iter().map(|&c| (c, 0)).collect();
    let mut boxes_per_class: BTreeMap<DamageClass, usize> =
        DamageClass::ALL.iter().map(|&c| (c, 0)).collect();
    for ann in annotations {
        *images_per_country
            .entry(country_of(&ann.image_id))
            .or_default() += 1;
        for b in &ann.boxes {
            *boxes_per_class.entry(b.class).or_default() += 1;
        }
    }
    DatasetStats {
        total_images: images_per_country.values().sum(),
        total_boxes: boxes_per_class.values().sum(),
        images_per_country,
        boxes_per_class,
    }
}
