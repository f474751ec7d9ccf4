use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `(x1, y1, x2, y2)`: upper-left and lower-right corners.
pub type BBox = [f64; 4];

/// Class id assigned to labels outside the vocabulary when labels are ignored.
pub const UNLABELED: usize = usize::MAX;

/// One pedestrian track.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub id: String,
    pub fps: f64,
    pub boxes: Vec<BBox>,
    /// Per-frame class ids.
    pub actions: Vec<usize>,
}

impl TrajectoryRecord {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Data(format!("record `{}`: {msg}", self.id)));
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return fail(format!("fps must be positive, got {}", self.fps));
        }
        if self.boxes.is_empty() {
            return fail("no frames".into());
        }
        if self.boxes.len() != self.actions.len() {
            return fail(format!(
                "boxes has {} entries but actions has {}",
                self.boxes.len(),
                self.actions.len()
            ));
        }
        for (t, b) in self.boxes.iter().enumerate() {
            if b.iter().any(|v| !v.is_finite()) {
                return fail(format!("frame {t}: non-finite coordinate"));
            }
            if !(b[0] < b[2] && b[1] < b[3]) {
                return fail(format!("frame {t}: box {b:?} violates x1 < x2, y1 < y2"));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Class-name ↔ id mapping; ids follow line order of the vocabulary file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Vocabulary {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new<S: AsRef<str>>(labels: &[S]) -> Result<Self> {
        let mut v = Vocabulary::default();
        for l in labels {
            v.push(l.as_ref())?;
        }
        Ok(v)
    }

    fn push(&mut self, label: &str) -> Result<usize> {
        if self.index.contains_key(label) {
            return Err(Error::Data(format!("duplicate action label `{label}`")));
        }
        self.labels.push(label.to_string());
        self.index.insert(label.to_string(), self.labels.len() - 1);
        Ok(self.labels.len() - 1)
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn label(&self, id: usize) -> Option<&str> {
        self.labels.get(id).map(String::as_str)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading vocabulary {}", path.display()), e))?;
        let labels: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        Vocabulary::new(&labels)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = self.labels.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    /// Sorted unique labels of a JSONL dataset, for datasets shipped without a
    /// vocabulary file.
    pub fn infer(path: &Path) -> Result<Self> {
        let mut seen = HashSet::new();
        for (lineno, line) in read_lines(path)? {
            let raw: RawRecord = parse_line(&line, lineno)?;
            seen.extend(raw.actions);
        }
        let mut labels: Vec<String> = seen.into_iter().collect();
        labels.sort();
        Vocabulary::new(&labels)
    }
}

/// How `read_jsonl` treats action labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelPolicy {
    /// Unknown labels are a data error.
    Strict,
    /// Known labels map to their ids, anything else to [`UNLABELED`].
    Lenient,
}

#[derive(Serialize, Deserialize)]
struct RawRecord {
    id: String,
    fps: f64,
    boxes: Vec<BBox>,
    actions: Vec<String>,
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let f = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

fn parse_line(line: &str, lineno: usize) -> Result<RawRecord> {
    serde_json::from_str(line).map_err(|e| Error::Data(format!("line {lineno}: malformed record: {e}")))
}

/// Parses a JSONL dataset, validating every record.
pub fn read_jsonl(path: &Path, vocab: &Vocabulary, policy: LabelPolicy) -> Result<Vec<TrajectoryRecord>> {
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for (lineno, line) in read_lines(path)? {
        let raw = parse_line(&line, lineno)?;
        let actions = raw
            .actions
            .iter()
            .map(|a| match (vocab.id(a), policy) {
                (Some(id), _) => Ok(id),
                (None, LabelPolicy::Lenient) => Ok(UNLABELED),
                (None, LabelPolicy::Strict) => Err(Error::Data(format!(
                    "line {lineno} (record `{}`): unknown action `{a}`",
                    raw.id
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        let rec = TrajectoryRecord {
            id: raw.id,
            fps: raw.fps,
            boxes: raw.boxes,
            actions,
        };
        rec.validate()
            .map_err(|e| Error::Data(format!("line {lineno}: {}", e.to_string().trim_start_matches("data: "))))?;
        if !ids.insert(rec.id.clone()) {
            return Err(Error::Data(format!("line {lineno}: duplicate record id `{}`", rec.id)));
        }
        records.push(rec);
    }
    Ok(records)
}

pub fn write_jsonl(path: &Path, records: &[TrajectoryRecord], vocab: &Vocabulary) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        let actions = r
            .actions
            .iter()
            .map(|&a| {
                vocab
                    .label(a)
                    .map(str::to_string)
                    .ok_or_else(|| Error::Data(format!("record `{}`: class id {a} not in vocabulary", r.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        let raw = RawRecord {
            id: r.id.clone(),
            fps: r.fps,
            boxes: r.boxes.clone(),
            actions,
        };
        let line = serde_json::to_string(&raw).expect("records always serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}
