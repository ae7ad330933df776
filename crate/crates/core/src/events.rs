//! Timestamped event labels and their tab-separated file formats.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Event {
    pub label: String,
    pub onset: Real,
    pub offset: Real,
}

impl Event {
    pub fn new(label: impl Into<String>, onset: Real, offset: Real) -> Self {
        Event { label: label.into(), onset, offset }
    }

    pub fn duration(&self) -> Real {
        self.offset - self.onset
    }
}

/// Events of one clip.
pub type EventList = Vec<Event>;

/// Events keyed by clip filename; iteration order is the sorted filename.
pub type EventTable = BTreeMap<String, EventList>;

/// An event with a detection score, as written to prediction files.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredEvent {
    pub event: Event,
    pub score: Real,
}

pub const STRONG_HEADER: &str = "filename\tonset\toffset\tevent_label";
pub const PREDICTION_HEADER: &str = "filename\tonset\toffset\tevent_label\tscore";
pub const WEAK_HEADER: &str = "filename\tevent_labels";

pub fn check_event(e: &Event, clip_length: Option<Real>) -> Result<()> {
    if !(e.onset >= 0.0 && e.offset > e.onset) {
        return Err(Error::Input(format!("event {} has onset {} and offset {}", e.label, e.onset, e.offset)));
    }
    if let Some(len) = clip_length {
        if e.offset > len + 1e-9 {
            return Err(Error::Input(format!("event {} ends at {} beyond clip length {len}", e.label, e.offset)));
        }
    }
    Ok(())
}

/// Strong labels, one row per event, sorted by filename then onset.
pub fn format_strong(table: &EventTable) -> String {
    let mut out = String::from(STRONG_HEADER);
    out.push('\n');
    for (file, events) in table {
        for e in events {
            writeln!(out, "{file}\t{:.3}\t{:.3}\t{}", e.onset, e.offset, e.label).unwrap();
        }
    }
    out
}

pub fn format_predictions(rows: &BTreeMap<String, Vec<ScoredEvent>>) -> String {
    let mut out = String::from(PREDICTION_HEADER);
    out.push('\n');
    for (file, events) in rows {
        for s in events {
            writeln!(out, "{file}\t{:.3}\t{:.3}\t{}\t{:.6}", s.event.onset, s.event.offset, s.event.label, s.score)
                .unwrap();
        }
    }
    out
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_real(path: &Path, line: usize, field: &str) -> Result<Real> {
    field.trim().parse().map_err(|_| Error::format(path, format!("line {line}: `{field}` is not a number")))
}

/// Reads a strong-label or prediction file. A fifth `score` column is
/// returned when present; rows without one score 1.
pub fn read_scored(path: &Path) -> Result<BTreeMap<String, Vec<ScoredEvent>>> {
    let text = read_text(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.starts_with(STRONG_HEADER) => {}
        _ => return Err(Error::format(path, format!("expected header `{STRONG_HEADER}`"))),
    }
    let mut out: BTreeMap<String, Vec<ScoredEvent>> = BTreeMap::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 4 {
            return Err(Error::format(path, format!("line {}: expected at least 4 columns", i + 1)));
        }
        let event = Event::new(cols[3], parse_real(path, i + 1, cols[1])?, parse_real(path, i + 1, cols[2])?);
        check_event(&event, None).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
        let score = match cols.get(4) {
            Some(s) => parse_real(path, i + 1, s)?,
            None => 1.0,
        };
        out.entry(cols[0].to_string()).or_default().push(ScoredEvent { event, score });
    }
    Ok(out)
}

pub fn read_strong(path: &Path) -> Result<EventTable> {
    Ok(read_scored(path)?
        .into_iter()
        .map(|(k, v)| (k, v.into_iter().map(|s| s.event).collect()))
        .collect())
}

pub fn format_weak(rows: &BTreeMap<String, Vec<String>>) -> String {
    let mut out = String::from(WEAK_HEADER);
    out.push('\n');
    for (file, labels) in rows {
        writeln!(out, "{file}\t{}", labels.join(",")).unwrap();
    }
    out
}

pub fn read_weak(path: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    let text = read_text(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(WEAK_HEADER) {
        return Err(Error::format(path, format!("expected header `{WEAK_HEADER}`")));
    }
    let mut out = BTreeMap::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (file, labels) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(path, format!("line {}: expected 2 columns", i + 2)))?;
        let labels = labels.split(',').filter(|l| !l.is_empty()).map(str::to_string).collect();
        out.insert(file.to_string(), labels);
    }
    Ok(out)
}

pub fn read_list(path: &Path) -> Result<Vec<String>> {
    Ok(read_text(path)?.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strong_file_round_trip_at_millisecond_precision() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.tsv");
        let mut t = EventTable::new();
        t.insert("a.wav".into(), vec![Event::new("beep", 0.125, 0.5), Event::new("hum", 1.0, 2.0)]);
        t.insert("b.wav".into(), vec![Event::new("hum", 0.0, 0.001)]);
        std::fs::write(&p, format_strong(&t)).unwrap();
        assert_eq!(read_strong(&p).unwrap(), t);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("filename\tonset\toffset\tevent_label\na.wav\t0.125\t0.500\tbeep\n"));
    }

    #[test]
    fn prediction_scores_parsed_and_defaulted() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.tsv");
        std::fs::write(&p, "filename\tonset\toffset\tevent_label\tscore\nx.wav\t0.000\t1.000\tbeep\t0.25\n").unwrap();
        assert_eq!(read_scored(&p).unwrap()["x.wav"][0].score, 0.25);
        std::fs::write(&p, "filename\tonset\toffset\tevent_label\nx.wav\t0.000\t1.000\tbeep\n").unwrap();
        assert_eq!(read_scored(&p).unwrap()["x.wav"][0].score, 1.0);
    }

    #[test]
    fn malformed_rows_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.tsv");
        std::fs::write(&p, "filename\tonset\toffset\tevent_label\nx.wav\t1.0\t0.5\tbeep\n").unwrap();
        assert!(read_strong(&p).is_err());
        std::fs::write(&p, "nope\n").unwrap();
        assert!(read_strong(&p).is_err());
    }

    #[test]
    fn weak_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.tsv");
        let mut rows = BTreeMap::new();
        rows.insert("a.wav".to_string(), vec!["beep".to_string(), "hum".to_string()]);
        std::fs::write(&p, format_weak(&rows)).unwrap();
        assert_eq!(read_weak(&p).unwrap(), rows);
    }
}
