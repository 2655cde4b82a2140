//! On-disk data model: signal records, annotation/prediction event lists,
//! 1 Hz label timelines, manifests and JSON documents.
//!
//! Signal files are a single UTF-8 JSON header line followed by
//! `n_samples` little-endian IEEE-754 `f32` values. Annotations are NDJSON,
//! one `{"start_s":..,"dur_s":..,"class":..}` object per line, sorted by start.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Respiratory event class with stable integer codes.
///
/// Mixed apneas are folded into [`EventClass::ObstructiveOrMixedApnea`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum EventClass {
    NoEvent = 0,
    ObstructiveOrMixedApnea = 1,
    CentralApnea = 2,
    Rera = 3,
    Hypopnea = 4,
}

impl EventClass {
    pub const ALL: [EventClass; 5] = [
        EventClass::NoEvent,
        EventClass::ObstructiveOrMixedApnea,
        EventClass::CentralApnea,
        EventClass::Rera,
        EventClass::Hypopnea,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn is_event(self) -> bool {
        self != EventClass::NoEvent
    }

    /// Counted in the apnea-hypopnea index (RERAs are not).
    pub fn is_apnea_hypopnea(self) -> bool {
        matches!(
            self,
            EventClass::ObstructiveOrMixedApnea | EventClass::CentralApnea | EventClass::Hypopnea
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            EventClass::NoEvent => "no_event",
            EventClass::ObstructiveOrMixedApnea => "obstructive_apnea",
            EventClass::CentralApnea => "central_apnea",
            EventClass::Rera => "rera",
            EventClass::Hypopnea => "hypopnea",
        }
    }
}

impl fmt::Display for EventClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl TryFrom<u8> for EventClass {
    type Error = String;

    fn try_from(code: u8) -> std::result::Result<Self, Self::Error> {
        EventClass::from_code(code).ok_or_else(|| format!("class code {code} not in 0..=4"))
    }
}

impl From<EventClass> for u8 {
    fn from(c: EventClass) -> u8 {
        c.code()
    }
}

/// One patient's effort-belt recording.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalRecord {
    pub record_id: String,
    pub sample_rate_hz: f64,
    pub samples: Vec<f32>,
    pub sleep_hours: f64,
}

impl SignalRecord {
    pub fn new(
        record_id: impl Into<String>,
        sample_rate_hz: f64,
        samples: Vec<f32>,
        sleep_hours: f64,
    ) -> Result<Self> {
        let rec = SignalRecord {
            record_id: record_id.into(),
            sample_rate_hz,
            samples,
            sleep_hours,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate_hz > 0.0) || !self.sample_rate_hz.is_finite() {
            return Err(Error::NonPositiveSampleRate(self.sample_rate_hz));
        }
        if self.samples.is_empty() {
            return Err(Error::InvalidRecord(format!(
                "{}: no samples",
                self.record_id
            )));
        }
        if !(self.sleep_hours >= 0.0) || !self.sleep_hours.is_finite() {
            return Err(Error::InvalidRecord(format!(
                "{}: sleep_hours {} is negative",
                self.record_id, self.sleep_hours
            )));
        }
        Ok(())
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SignalHeader {
    record_id: String,
    sample_rate_hz: f64,
    n_samples: usize,
    sleep_hours: f64,
}

/// Reads a JSON header line terminated by `\n`.
pub(crate) fn read_header_line<R: BufRead>(reader: &mut R) -> Result<Vec<u8>> {
    let mut line = Vec::new();
    reader
        .read_until(b'\n', &mut line)
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;
    if line.last() != Some(&b'\n') {
        return Err(Error::MalformedHeader(
            "missing header line terminator".into(),
        ));
    }
    line.pop();
    Ok(line)
}

/// Reads exactly `n` little-endian f32 values, reporting how many were present on shortfall.
pub(crate) fn read_f32_payload<R: Read>(reader: &mut R, n: usize) -> Result<Vec<f32>> {
    let mut bytes = Vec::with_capacity(n * 4);
    reader
        .read_to_end(&mut bytes)
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;
    if bytes.len() != n * 4 {
        return Err(Error::TruncatedPayload {
            expected: n,
            found: bytes.len() / 4,
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub(crate) fn write_f32_payload<W: Write>(writer: &mut W, values: &[f32]) -> std::io::Result<()> {
    for v in values {
        writer.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_record<R: BufRead>(mut reader: R) -> Result<SignalRecord> {
    let line = read_header_line(&mut reader)?;
    let header: SignalHeader =
        serde_json::from_slice(&line).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    if !(header.sample_rate_hz > 0.0) {
        return Err(Error::NonPositiveSampleRate(header.sample_rate_hz));
    }
    let samples = read_f32_payload(&mut reader, header.n_samples)?;
    SignalRecord::new(
        header.record_id,
        header.sample_rate_hz,
        samples,
        header.sleep_hours,
    )
}

pub fn write_record<W: Write>(mut writer: W, record: &SignalRecord) -> Result<()> {
    let header = SignalHeader {
        record_id: record.record_id.clone(),
        sample_rate_hz: record.sample_rate_hz,
        n_samples: record.samples.len(),
        sleep_hours: record.sleep_hours,
    };
    let mut line = serde_json::to_vec(&header)?;
    line.push(b'\n');
    let io = |e| Error::io("<signal stream>", e);
    writer.write_all(&line).map_err(io)?;
    write_f32_payload(&mut writer, &record.samples).map_err(io)?;
    writer.flush().map_err(io)
}

pub fn load_record(path: impl AsRef<Path>) -> Result<SignalRecord> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_record(BufReader::new(file))
}

pub fn save_record(path: impl AsRef<Path>, record: &SignalRecord) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_record(BufWriter::new(file), record)
}

/// An expert-scored or predicted respiratory event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotationEvent {
    pub start_s: f64,
    #[serde(rename = "dur_s")]
    pub duration_s: f64,
    pub class: EventClass,
}

impl AnnotationEvent {
    pub fn new(start_s: f64, duration_s: f64, class: EventClass) -> Self {
        AnnotationEvent {
            start_s,
            duration_s,
            class,
        }
    }

    pub fn end_s(&self) -> f64 {
        self.start_s + self.duration_s
    }

    /// Length of the intersection with `other`, in seconds.
    pub fn overlap_s(&self, other: &AnnotationEvent) -> f64 {
        (self.end_s().min(other.end_s()) - self.start_s.max(other.start_s)).max(0.0)
    }
}

pub fn read_annotations<R: BufRead>(reader: R) -> Result<Vec<AnnotationEvent>> {
    let mut events: Vec<AnnotationEvent> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io("<annotation stream>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ev: AnnotationEvent =
            serde_json::from_str(&line).map_err(|e| Error::InvalidAnnotation {
                line: line_no,
                reason: e.to_string(),
            })?;
        let bad = |reason: &str| Error::InvalidAnnotation {
            line: line_no,
            reason: reason.to_string(),
        };
        if ev.class == EventClass::NoEvent {
            return Err(bad("class 0 (no event) is not an event"));
        }
        if !(ev.start_s >= 0.0) || !ev.start_s.is_finite() {
            return Err(bad("start_s must be nonnegative"));
        }
        if !(ev.duration_s > 0.0) || !ev.duration_s.is_finite() {
            return Err(bad("dur_s must be positive"));
        }
        if let Some(prev) = events.last() {
            if ev.start_s < prev.start_s {
                return Err(bad("events are not sorted by start_s"));
            }
        }
        events.push(ev);
    }
    Ok(events)
}

pub fn write_annotations<W: Write>(mut writer: W, events: &[AnnotationEvent]) -> Result<()> {
    let io = |e| Error::io("<annotation stream>", e);
    for ev in events {
        serde_json::to_writer(&mut writer, ev)?;
        writer.write_all(b"\n").map_err(io)?;
    }
    writer.flush().map_err(io)
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<AnnotationEvent>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_annotations(BufReader::new(file))
}

pub fn save_annotations(path: impl AsRef<Path>, events: &[AnnotationEvent]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_annotations(BufWriter::new(file), events)
}

/// Checks that expert events are sorted, in bounds and mutually disjoint.
pub fn validate_reference(events: &[AnnotationEvent], duration_s: f64) -> Result<()> {
    for (i, ev) in events.iter().enumerate() {
        check_bounds(ev, duration_s)?;
        if i > 0 && ev.start_s < events[i - 1].end_s() {
            return Err(Error::InvalidAnnotation {
                line: i + 1,
                reason: "reference events overlap".into(),
            });
        }
    }
    Ok(())
}

fn check_bounds(ev: &AnnotationEvent, duration_s: f64) -> Result<()> {
    // 1 ms slack for start/duration values that went through decimal text.
    if ev.start_s < 0.0 || ev.end_s() > duration_s + 1e-3 {
        return Err(Error::EventOutOfBounds {
            start_s: ev.start_s,
            duration_s: ev.duration_s,
            record_s: duration_s,
        });
    }
    Ok(())
}

/// Per-second class labels anchored at record start.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelTimeline {
    pub classes: Vec<EventClass>,
}

impl LabelTimeline {
    pub const RESOLUTION_HZ: f64 = 1.0;

    pub fn new(classes: Vec<EventClass>) -> Self {
        LabelTimeline { classes }
    }

    pub fn no_events(len: usize) -> Self {
        LabelTimeline {
            classes: vec![EventClass::NoEvent; len],
        }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// Second `i` takes the class of the event covering `i + 0.5`; later events win on overlap.
pub fn events_to_timeline(events: &[AnnotationEvent], duration_s: f64) -> Result<LabelTimeline> {
    let len = duration_s.max(0.0).floor() as usize;
    let mut classes = vec![EventClass::NoEvent; len];
    for ev in events {
        check_bounds(ev, duration_s)?;
        // first second whose midpoint is >= start, last whose midpoint is < end
        let first = (ev.start_s - 0.5).ceil().max(0.0) as usize;
        let end = ((ev.end_s() - 0.5).ceil().max(0.0) as usize).min(len);
        for c in classes.iter_mut().take(end).skip(first) {
            *c = ev.class;
        }
    }
    Ok(LabelTimeline { classes })
}

/// Maximal runs of one event class become one event each.
pub fn timeline_to_events(timeline: &LabelTimeline) -> Vec<AnnotationEvent> {
    let mut events = Vec::new();
    let classes = &timeline.classes;
    let mut i = 0;
    while i < classes.len() {
        let c = classes[i];
        let mut j = i + 1;
        while j < classes.len() && classes[j] == c {
            j += 1;
        }
        if c.is_event() {
            events.push(AnnotationEvent::new(i as f64, (j - i) as f64, c));
        }
        i = j;
    }
    events
}

/// Annotation file that sits next to a signal file: `x.sig` -> `x.events.ndjson`.
pub fn annotation_path_for(record_path: &Path) -> PathBuf {
    record_path.with_extension("events.ndjson")
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let p = PathBuf::from(l);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        })
        .collect())
}

/// Writes one path per line, relative to the manifest's directory when possible.
pub fn write_manifest(path: impl AsRef<Path>, records: &[PathBuf]) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    let mut text = String::new();
    for r in records {
        let shown = r.strip_prefix(base).unwrap_or(r);
        text.push_str(&shown.to_string_lossy());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

pub fn save_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Per-second class probabilities as CSV: `second,p0,p1,...`.
pub fn write_probabilities<W: Write>(mut writer: W, rows: &[Vec<f64>]) -> Result<()> {
    let io = |e| Error::io("<probability stream>", e);
    let n_classes = rows.first().map_or(0, Vec::len);
    let mut header = String::from("second");
    for c in 0..n_classes {
        header.push_str(&format!(",p{c}"));
    }
    writeln!(writer, "{header}").map_err(io)?;
    for (t, row) in rows.iter().enumerate() {
        write!(writer, "{t}").map_err(io)?;
        for p in row {
            write!(writer, ",{p}").map_err(io)?;
        }
        writeln!(writer).map_err(io)?;
    }
    writer.flush().map_err(io)
}

pub fn read_probabilities<R: BufRead>(reader: R) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate().skip(1) {
        let line = line.map_err(|e| Error::io("<probability stream>", e))?;
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .skip(1)
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|e| Error::InvalidRecord(format!("probability row {}: {e}", i + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Cursor;

    fn encoded(record_id: &str, rate: f64, n: usize, sleep_hours: f64, present: usize) -> Vec<u8> {
        let mut buf = format!(
            "{{\"record_id\":\"{record_id}\",\"sample_rate_hz\":{rate},\"n_samples\":{n},\"sleep_hours\":{sleep_hours}}}\n"
        )
        .into_bytes();
        for i in 0..present {
            buf.extend_from_slice(&(i as f32 * 0.5).to_le_bytes());
        }
        buf
    }

    #[test]
    fn loads_header_and_samples() {
        let rec = read_record(Cursor::new(encoded("p1", 200.0, 1200, 6.0, 1200))).unwrap();
        assert_eq!(rec.record_id, "p1");
        assert_eq!(rec.samples.len(), 1200);
        assert_eq!(rec.duration_s(), 6.0);
        assert_eq!(rec.sleep_hours, 6.0);
        assert_eq!(rec.samples[3], 1.5);
    }

    #[test]
    fn short_payload_is_truncated() {
        let err = read_record(Cursor::new(encoded("p1", 200.0, 1200, 6.0, 1100))).unwrap_err();
        assert!(matches!(
            err,
            Error::TruncatedPayload {
                expected: 1200,
                found: 1100
            }
        ));
    }

    #[test]
    fn header_errors() {
        let err = read_record(Cursor::new(b"{not json}\n".to_vec())).unwrap_err();
        assert!(matches!(err, Error::MalformedHeader(_)));
        let err = read_record(Cursor::new(b"{\"record_id\":\"a\"".to_vec())).unwrap_err();
        assert!(matches!(err, Error::MalformedHeader(_)));
        let err = read_record(Cursor::new(encoded("p", 0.0, 2, 1.0, 2))).unwrap_err();
        assert!(matches!(err, Error::NonPositiveSampleRate(_)));
        let err = read_record(Cursor::new(encoded("p", -5.0, 2, 1.0, 2))).unwrap_err();
        assert!(matches!(err, Error::NonPositiveSampleRate(_)));
    }

    #[test]
    fn timeline_from_single_event() {
        let ev = [AnnotationEvent::new(2.0, 3.0, EventClass::CentralApnea)];
        let tl = events_to_timeline(&ev, 10.0).unwrap();
        let codes: Vec<u8> = tl.classes.iter().map(|c| c.code()).collect();
        assert_eq!(codes, vec![0, 0, 2, 2, 2, 0, 0, 0, 0, 0]);
        assert_eq!(
            events_to_timeline(&[], 10.0).unwrap(),
            LabelTimeline::no_events(10)
        );
    }

    #[test]
    fn out_of_bounds_event_rejected() {
        let ev = [AnnotationEvent::new(8.0, 5.0, EventClass::Hypopnea)];
        assert!(matches!(
            events_to_timeline(&ev, 10.0),
            Err(Error::EventOutOfBounds { .. })
        ));
    }

    #[test]
    fn run_length_encoding() {
        assert!(timeline_to_events(&LabelTimeline::no_events(3)).is_empty());
        let tl = LabelTimeline::new(
            [1u8, 1, 0, 2, 2, 2]
                .iter()
                .map(|&c| EventClass::from_code(c).unwrap())
                .collect(),
        );
        assert_eq!(
            timeline_to_events(&tl),
            vec![
                AnnotationEvent::new(0.0, 2.0, EventClass::ObstructiveOrMixedApnea),
                AnnotationEvent::new(3.0, 3.0, EventClass::CentralApnea),
            ]
        );
    }

    #[test]
    fn annotation_loader_rejects_bad_codes() {
        let text = "{\"start_s\":1.0,\"dur_s\":10.0,\"class\":7}\n";
        assert!(read_annotations(Cursor::new(text)).is_err());
        let text = "{\"start_s\":1.0,\"dur_s\":10.0,\"class\":0}\n";
        assert!(read_annotations(Cursor::new(text)).is_err());
        let text = "{\"start_s\":20.0,\"dur_s\":10.0,\"class\":1}\n{\"start_s\":1.0,\"dur_s\":10.0,\"class\":1}\n";
        assert!(read_annotations(Cursor::new(text)).is_err());
    }

    #[test]
    fn overlapping_reference_rejected() {
        let ev = [
            AnnotationEvent::new(0.0, 15.0, EventClass::Hypopnea),
            AnnotationEvent::new(10.0, 15.0, EventClass::Hypopnea),
        ];
        assert!(validate_reference(&ev, 100.0).is_err());
        assert!(validate_reference(&ev[..1], 100.0).is_ok());
    }

    fn arb_class() -> impl Strategy<Value = EventClass> {
        (0u8..5).prop_map(|c| EventClass::from_code(c).unwrap())
    }

    proptest! {
        #[test]
        fn signal_round_trip_is_bit_exact(
            samples in prop::collection::vec(any::<u32>().prop_map(f32::from_bits), 1..300),
            rate in 1.0f64..1000.0,
            hours in 0.0f64..12.0,
        ) {
            let rec = SignalRecord::new("r", rate, samples, hours).unwrap();
            let mut buf = Vec::new();
            write_record(&mut buf, &rec).unwrap();
            let back = read_record(Cursor::new(buf)).unwrap();
            prop_assert_eq!(back.sample_rate_hz.to_bits(), rec.sample_rate_hz.to_bits());
            prop_assert_eq!(back.sleep_hours.to_bits(), rec.sleep_hours.to_bits());
            let a: Vec<u32> = back.samples.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = rec.samples.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn timeline_round_trip(classes in prop::collection::vec(arb_class(), 0..200)) {
            let tl = LabelTimeline::new(classes);
            let events = timeline_to_events(&tl);
            let mut buf = Vec::new();
            write_annotations(&mut buf, &events).unwrap();
            let reread = read_annotations(Cursor::new(buf)).unwrap();
            prop_assert_eq!(&reread, &events);
            let back = events_to_timeline(&reread, tl.len() as f64).unwrap();
            prop_assert_eq!(back, tl);
        }

        #[test]
        fn events_round_trip(gaps in prop::collection::vec((1u32..20, 1u32..30, 1u8..5), 0..20)) {
            let mut t = 0u32;
            let mut events = Vec::new();
            for (gap, dur, code) in gaps {
                t += gap;
                events.push(AnnotationEvent::new(t as f64, dur as f64, EventClass::from_code(code).unwrap()));
                t += dur;
            }
            let duration = (t + 5) as f64;
            let back = timeline_to_events(&events_to_timeline(&events, duration).unwrap());
            // adjacent same-class events separated by a gap never merge
            prop_assert_eq!(back, events);
        }
    }
}
