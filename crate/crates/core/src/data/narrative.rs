//! Narrative records: captions with per-utterance timing and a mouse trace.
//!
//! The on-disk form is one JSON object per line:
//!
//! ```text
//! {"image_id":"img1","caption":"a dog, grass.",
//!  "utterances":[{"span":[0,5],"time":[0.0,1.0]}],
//!  "trace":[{"x":0.1,"y":0.2,"t":0.5}]}
//! ```
//!
//! `span` is a half-open range of character (not byte) offsets into the
//! caption, `time` a half-open interval in seconds.

use std::io::BufRead;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{sample_points_in_bbox, BBox, Point2D, Scribble};
use crate::data::RegionCaptionPair;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Utterance {
    pub span: [usize; 2],
    pub time: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TracePoint {
    pub x: f64,
    pub y: f64,
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NarrativeRecord {
    pub image_id: String,
    pub caption: String,
    pub utterances: Vec<Utterance>,
    pub trace: Vec<TracePoint>,
}

impl NarrativeRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let len = self.caption.chars().count();
        let mut prev_end = 0usize;
        let mut prev_time = f64::NEG_INFINITY;
        for (i, u) in self.utterances.iter().enumerate() {
            let [s, e] = u.span;
            if s > e || e > len {
                return Err(format!("utterance {i} span [{s},{e}) outside caption of {len} chars"));
            }
            if s < prev_end {
                return Err(format!("utterance {i} span overlaps or precedes the previous one"));
            }
            let [t0, t1] = u.time;
            if !(t0.is_finite() && t1.is_finite()) || t0 > t1 {
                return Err(format!("utterance {i} has invalid time interval"));
            }
            if t0 < prev_time {
                return Err(format!("utterance {i} time overlaps or precedes the previous one"));
            }
            prev_end = e;
            prev_time = t1;
        }
        let mut prev_t = f64::NEG_INFINITY;
        for (i, p) in self.trace.iter().enumerate() {
            if !(0.0..=1.0).contains(&p.x) || !(0.0..=1.0).contains(&p.y) {
                return Err(format!("trace point {i} outside the unit square"));
            }
            if !p.t.is_finite() || p.t < prev_t {
                return Err(format!("trace timestamps decrease at point {i}"));
            }
            prev_t = p.t;
        }
        Ok(())
    }
}

/// Result of reading a record stream.
#[derive(Debug, Default)]
pub struct ParsedNarratives {
    pub records: Vec<NarrativeRecord>,
    /// Lenient mode only: rejected lines with their reasons.
    pub rejected: Vec<Error>,
}

/// Reads line-delimited narrative records. Blank lines are ignored. In
/// strict mode the first invalid line is an error; otherwise invalid lines
/// are collected in [`ParsedNarratives::rejected`].
pub fn parse_narratives<R: BufRead>(input: R, strict: bool) -> Result<ParsedNarratives> {
    let mut out = ParsedNarratives::default();
    for (idx, line) in input.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::Record {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<NarrativeRecord>(&line)
            .map_err(|e| e.to_string())
            .and_then(|r| r.validate().map(|_| r));
        match parsed {
            Ok(r) => out.records.push(r),
            Err(message) => {
                let err = Error::Record { line: line_no, message };
                if strict {
                    return Err(err);
                }
                warn!("skipping narrative record: {err}");
                out.rejected.push(err);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionSegment {
    pub text: String,
    /// Half-open character range of `text` within the caption.
    pub span: (usize, usize),
}

/// Splits a caption on `.` and `,`, trimming whitespace and dropping empty
/// pieces.
pub fn split_caption(caption: &str) -> Vec<CaptionSegment> {
    let chars: Vec<char> = caption.chars().collect();
    let mut out = Vec::new();
    let mut start = 0;
    for end in 0..=chars.len() {
        if end < chars.len() && chars[end] != '.' && chars[end] != ',' {
            continue;
        }
        let mut s = start;
        let mut e = end;
        while s < e && chars[s].is_whitespace() {
            s += 1;
        }
        while e > s && chars[e - 1].is_whitespace() {
            e -= 1;
        }
        if s < e {
            out.push(CaptionSegment {
                text: chars[s..e].iter().collect(),
                span: (s, e),
            });
        }
        start = end + 1;
    }
    out
}

#[derive(Debug, Default)]
pub struct Alignment {
    pub pairs: Vec<RegionCaptionPair>,
    /// Segments dropped because no trace point fell in their time interval.
    pub dropped: usize,
}

fn overlap(a: (usize, usize), b: [usize; 2]) -> usize {
    a.1.min(b[1]).saturating_sub(a.0.max(b[0]))
}

/// Pairs each caption segment with the trace points recorded while it was
/// being spoken.
///
/// Each utterance belongs to the segment it overlaps most (earliest segment on
/// ties), so no trace point is emitted twice.
pub fn align_segments_to_trace(record: &NarrativeRecord) -> Alignment {
    let segments = split_caption(&record.caption);
    let mut intervals: Vec<Vec<[f64; 2]>> = vec![Vec::new(); segments.len()];
    for u in &record.utterances {
        let best = segments
            .iter()
            .enumerate()
            .map(|(i, s)| (overlap(s.span, u.span), i))
            .filter(|(o, _)| *o > 0)
            .max_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)));
        if let Some((_, i)) = best {
            intervals[i].push(u.time);
        }
    }
    let mut out = Alignment::default();
    for (seg, ivs) in segments.into_iter().zip(intervals) {
        let (points, times): (Vec<Point2D>, Vec<f64>) = record
            .trace
            .iter()
            .filter(|p| ivs.iter().any(|[t0, t1]| p.t >= *t0 && p.t < *t1))
            .map(|p| (Point2D { x: p.x, y: p.y }, p.t))
            .unzip();
        if points.is_empty() {
            out.dropped += 1;
            continue;
        }
        let scribble = Scribble::with_timestamps(points, times).expect("validated record");
        out.pairs.push(RegionCaptionPair {
            image_id: record.image_id.clone(),
            scribble,
            text: seg.text,
        });
    }
    out
}

/// One line of a box-caption file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxCaption {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub text: String,
}

pub fn parse_box_captions<R: BufRead>(input: R) -> Result<Vec<BoxCaption>> {
    let mut out = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::Record {
            line: idx + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: BoxCaption = serde_json::from_str(&line).map_err(|e| Error::Record {
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Builds one pair per box with `k` points sampled inside it. Degenerate
/// boxes are skipped; the second value counts them.
pub fn pairs_from_bboxes<R: Rng + ?Sized>(
    image_id: &str,
    boxes: &[(BBox, String)],
    k: usize,
    rng: &mut R,
) -> (Vec<RegionCaptionPair>, usize) {
    let mut pairs = Vec::with_capacity(boxes.len());
    let mut skipped = 0;
    for (bbox, text) in boxes {
        match sample_points_in_bbox(bbox, k, rng).and_then(Scribble::new) {
            Ok(scribble) => pairs.push(RegionCaptionPair {
                image_id: image_id.to_string(),
                scribble,
                text: text.clone(),
            }),
            Err(e) => {
                warn!("skipping box {bbox:?} for {image_id}: {e}");
                skipped += 1;
            }
        }
    }
    (pairs, skipped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seg_texts(c: &str) -> Vec<String> {
        split_caption(c).into_iter().map(|s| s.text).collect()
    }

    #[test]
    fn split_examples() {
        assert_eq!(
            seg_texts("In this image we can see a dog. There is grass."),
            vec!["In this image we can see a dog", "There is grass"]
        );
        assert_eq!(seg_texts("a, b."), vec!["a", "b"]);
        assert!(seg_texts("").is_empty());
        assert_eq!(seg_texts("Mr. Smith"), vec!["Mr", "Smith"]);
        assert_eq!(seg_texts(",,  ,."), Vec::<String>::new());
    }

    #[test]
    fn split_spans_index_original_caption() {
        let c = "  héllo wörld ,second. third";
        let chars: Vec<char> = c.chars().collect();
        for s in split_caption(c) {
            let t: String = chars[s.span.0..s.span.1].iter().collect();
            assert_eq!(t, s.text);
        }
    }

    fn record(caption: &str, utterances: Vec<([usize; 2], [f64; 2])>, trace: &[(f64, f64, f64)]) -> NarrativeRecord {
        NarrativeRecord {
            image_id: "img".into(),
            caption: caption.into(),
            utterances: utterances
                .into_iter()
                .map(|(span, time)| Utterance { span, time })
                .collect(),
            trace: trace.iter().map(|&(x, y, t)| TracePoint { x, y, t }).collect(),
        }
    }

    #[test]
    fn alignment_uses_utterance_time_interval() {
        let r = record(
            "a big dog. grass",
            vec![([0, 5], [1.0, 2.0]), ([6, 9], [2.0, 3.0]), ([11, 16], [3.5, 5.0])],
            &[(0.1, 0.1, 1.5), (0.2, 0.2, 2.5), (0.3, 0.3, 4.0)],
        );
        let a = align_segments_to_trace(&r);
        assert_eq!(a.dropped, 0);
        assert_eq!(a.pairs.len(), 2);
        assert_eq!(a.pairs[0].text, "a big dog");
        assert_eq!(a.pairs[0].scribble.timestamps().unwrap(), &[1.5, 2.5]);
        assert_eq!(a.pairs[1].scribble.timestamps().unwrap(), &[4.0]);
    }

    #[test]
    fn segment_without_points_is_dropped() {
        let r = record(
            "a dog, a cat",
            vec![([0, 5], [0.0, 1.0]), ([7, 12], [5.0, 6.0])],
            &[(0.5, 0.5, 0.5)],
        );
        let a = align_segments_to_trace(&r);
        assert_eq!(a.pairs.len(), 1);
        assert_eq!(a.dropped, 1);
    }

    #[test]
    fn single_segment_covering_whole_trace_gets_all_points() {
        let r = record(
            "everything",
            vec![([0, 10], [0.0, 10.0])],
            &[(0.1, 0.1, 0.0), (0.2, 0.2, 5.0), (0.9, 0.9, 9.9)],
        );
        let a = align_segments_to_trace(&r);
        assert_eq!(a.pairs.len(), 1);
        assert_eq!(a.pairs[0].scribble.len(), 3);
    }

    #[test]
    fn no_trace_point_is_emitted_twice() {
        // the middle utterance straddles the comma
        let r = record(
            "red ball, blue box",
            vec![([0, 3], [0.0, 1.0]), ([4, 12], [1.0, 2.0]), ([13, 18], [2.0, 3.0])],
            &[(0.1, 0.1, 0.5), (0.2, 0.2, 1.5), (0.3, 0.3, 2.5)],
        );
        let a = align_segments_to_trace(&r);
        let total: usize = a.pairs.iter().map(|p| p.scribble.len()).sum();
        assert_eq!(total, 3);
    }

    #[test]
    fn parse_strict_and_lenient() {
        let good = r#"{"image_id":"a","caption":"a dog","utterances":[{"span":[0,5],"time":[0.0,1.0]}],"trace":[{"x":0.1,"y":0.1,"t":0.5}]}"#;
        let overlapping = r#"{"image_id":"b","caption":"a dog","utterances":[{"span":[0,3],"time":[0.0,1.0]},{"span":[2,5],"time":[1.0,2.0]}],"trace":[]}"#;
        let two = format!("{good}\n{good}\n");
        assert_eq!(parse_narratives(two.as_bytes(), true).unwrap().records.len(), 2);
        assert!(parse_narratives("".as_bytes(), true).unwrap().records.is_empty());

        let mixed = format!("{good}\n{overlapping}\n");
        match parse_narratives(mixed.as_bytes(), true) {
            Err(Error::Record { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected line error, got {other:?}"),
        }
        let lenient = parse_narratives(mixed.as_bytes(), false).unwrap();
        assert_eq!(lenient.records.len(), 1);
        assert_eq!(lenient.rejected.len(), 1);
    }

    #[test]
    fn pairs_from_boxes() {
        let boxes: Vec<(BBox, String)> = (0..3)
            .map(|i| {
                (
                    BBox::new(0.1 * i as f64, 0.1, 0.1 * i as f64 + 0.2, 0.5).unwrap(),
                    format!("thing {i}"),
                )
            })
            .collect();
        let (pairs, skipped) = pairs_from_bboxes("img", &boxes, 10, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!((pairs.len(), skipped), (3, 0));
        for (p, (b, _)) in pairs.iter().zip(&boxes) {
            assert_eq!(p.scribble.len(), 10);
            assert!(p.scribble.points().iter().all(|q| b.contains(*q)));
        }
        let (again, _) = pairs_from_bboxes("img", &boxes, 10, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(pairs, again);
        let (none, _) = pairs_from_bboxes("img", &[], 10, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(none.is_empty());
        let degenerate = vec![(
            BBox {
                x0: 0.3,
                y0: 0.3,
                x1: 0.3,
                y1: 0.6,
            },
            "flat".to_string(),
        )];
        let (p, skipped) = pairs_from_bboxes("img", &degenerate, 10, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(p.is_empty());
        assert_eq!(skipped, 1);
    }
}
