use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::RetrievalError;

/// Coordinate frame of a place's geotag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frame {
    /// Planar easting/northing in meters.
    Utm,
    /// Longitude/latitude in degrees.
    Wgs84,
}

impl Frame {
    pub fn parse(value: &str) -> Option<Self> {
        match value {
            "utm" => Some(Frame::Utm),
            "wgs84" => Some(Frame::Wgs84),
            _ => None,
        }
    }
}

impl fmt::Display for Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Frame::Utm => f.write_str("utm"),
            Frame::Wgs84 => f.write_str("wgs84"),
        }
    }
}

/// One geotagged image.
///
/// For [`Frame::Utm`] `x`/`y` are easting/northing in meters; for
/// [`Frame::Wgs84`] they are longitude/latitude in degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaceRecord {
    pub id: String,
    #[serde(rename = "image")]
    pub image_path: PathBuf,
    pub frame: Frame,
    pub x: f64,
    pub y: f64,
}

impl PlaceRecord {
    pub fn utm(id: impl Into<String>, image_path: impl Into<PathBuf>, x: f64, y: f64) -> Self {
        PlaceRecord {
            id: id.into(),
            image_path: image_path.into(),
            frame: Frame::Utm,
            x,
            y,
        }
    }

    pub fn wgs84(
        id: impl Into<String>,
        image_path: impl Into<PathBuf>,
        lon: f64,
        lat: f64,
    ) -> Self {
        PlaceRecord {
            id: id.into(),
            image_path: image_path.into(),
            frame: Frame::Wgs84,
            x: lon,
            y: lat,
        }
    }

    fn check(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        if !self.x.is_finite() || !self.y.is_finite() {
            return Err(format!("non-finite coordinates for {}", self.id));
        }
        if self.frame == Frame::Wgs84
            && (!(-180.0..=180.0).contains(&self.x) || !(-90.0..=90.0).contains(&self.y))
        {
            return Err(format!(
                "wgs84 coordinates out of range for {}: lon {}, lat {}",
                self.id, self.x, self.y
            ));
        }
        Ok(())
    }
}

// Wire shape of one manifest line; the frame is kept as a string so an
// unknown value maps to its own error instead of a generic parse failure.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    id: String,
    image: PathBuf,
    frame: String,
    x: f64,
    y: f64,
}

/// Reads a JSON-lines manifest. Blank lines are skipped; any other
/// malformed line rejects the whole file. Relative image paths are taken
/// relative to the manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<PlaceRecord>, RetrievalError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| RetrievalError::io(path, e))?;
    let mut records = parse_manifest(&text)?;
    if let Some(base) = path.parent() {
        for r in &mut records {
            if r.image_path.is_relative() {
                r.image_path = base.join(&r.image_path);
            }
        }
    }
    Ok(records)
}

pub fn parse_manifest(text: &str) -> Result<Vec<PlaceRecord>, RetrievalError> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: ManifestLine =
            serde_json::from_str(line).map_err(|e| RetrievalError::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
        let frame = Frame::parse(&raw.frame).ok_or(RetrievalError::UnknownFrame(raw.frame))?;
        let record = PlaceRecord {
            id: raw.id,
            image_path: raw.image,
            frame,
            x: raw.x,
            y: raw.y,
        };
        record.check().map_err(|message| RetrievalError::Parse {
            line: line_no,
            message,
        })?;
        if !seen.insert(record.id.clone()) {
            return Err(RetrievalError::DuplicateId(record.id));
        }
        records.push(record);
    }
    Ok(records)
}

/// Serializes records in the manifest line format.
pub fn write_manifest(path: impl AsRef<Path>, records: &[PlaceRecord]) -> Result<(), RetrievalError> {
    let path = path.as_ref();
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("place record serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| RetrievalError::io(path, e))
}

/// Id-indexed view over one or more manifests.
#[derive(Debug, Clone, Default)]
pub struct Manifest {
    records: Vec<PlaceRecord>,
    index: HashMap<String, usize>,
}

impl Manifest {
    pub fn new(records: Vec<PlaceRecord>) -> Result<Self, RetrievalError> {
        let mut manifest = Manifest::default();
        manifest.extend(records)?;
        Ok(manifest)
    }

    pub fn extend(&mut self, records: Vec<PlaceRecord>) -> Result<(), RetrievalError> {
        for r in records {
            if self.index.contains_key(&r.id) {
                return Err(RetrievalError::DuplicateId(r.id));
            }
            self.index.insert(r.id.clone(), self.records.len());
            self.records.push(r);
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&PlaceRecord> {
        self.index.get(id).map(|&i| &self.records[i])
    }

    pub fn records(&self) -> &[PlaceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_lines_in_order() {
        let text = r#"{"id":"q1","image":"q1.png","frame":"utm","x":1.0,"y":2.0}
{"id":"d1","image":"imgs/d1.jpg","frame":"wgs84","x":139.7,"y":35.6}
"#;
        let recs = parse_manifest(text).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].id, "q1");
        assert_eq!(recs[0].frame, Frame::Utm);
        assert_eq!(recs[1].image_path, PathBuf::from("imgs/d1.jpg"));
        assert_eq!(recs[1].frame, Frame::Wgs84);
    }

    #[test]
    fn duplicate_id_rejected() {
        let text = r#"{"id":"q1","image":"a.png","frame":"utm","x":0,"y":0}
{"id":"q1","image":"b.png","frame":"utm","x":1,"y":1}"#;
        assert!(matches!(
            parse_manifest(text),
            Err(RetrievalError::DuplicateId(id)) if id == "q1"
        ));
    }

    #[test]
    fn unknown_frame_rejected() {
        let text = r#"{"id":"q1","image":"a.png","frame":"ecef","x":0,"y":0}"#;
        assert!(matches!(
            parse_manifest(text),
            Err(RetrievalError::UnknownFrame(f)) if f == "ecef"
        ));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "{\"id\":\"a\",\"image\":\"a.png\",\"frame\":\"utm\",\"x\":0,\"y\":0}\nnot json\n";
        assert!(matches!(
            parse_manifest(text),
            Err(RetrievalError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn wgs84_range_enforced() {
        let text = r#"{"id":"a","image":"a.png","frame":"wgs84","x":200.0,"y":0}"#;
        assert!(matches!(parse_manifest(text), Err(RetrievalError::Parse { line: 1, .. })));
        let text = r#"{"id":"","image":"a.png","frame":"utm","x":0,"y":0}"#;
        assert!(matches!(parse_manifest(text), Err(RetrievalError::Parse { line: 1, .. })));
    }

    #[test]
    fn missing_file() {
        assert!(matches!(
            load_manifest("/definitely/not/here.jsonl"),
            Err(RetrievalError::MissingFile(_))
        ));
    }

    #[test]
    fn manifest_write_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let recs = vec![
            PlaceRecord::utm("a", "a.png", 1.5, -2.0),
            PlaceRecord::wgs84("b", "b.jpg", 139.7, 35.6),
        ];
        write_manifest(&path, &recs).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded[0].image_path, dir.path().join("a.png"));
        assert_eq!(parse_manifest(&fs::read_to_string(&path).unwrap()).unwrap(), recs);

        let abs = vec![PlaceRecord::utm("c", dir.path().join("c.png"), 0.0, 0.0)];
        write_manifest(&path, &abs).unwrap();
        assert_eq!(load_manifest(&path).unwrap(), abs);
    }

    #[test]
    fn manifest_index_rejects_cross_file_duplicates() {
        let mut m = Manifest::new(vec![PlaceRecord::utm("a", "a.png", 0.0, 0.0)]).unwrap();
        assert!(m.extend(vec![PlaceRecord::utm("a", "b.png", 0.0, 0.0)]).is_err());
        assert_eq!(m.get("a").unwrap().image_path, PathBuf::from("a.png"));
        assert!(m.get("zz").is_none());
    }
}
