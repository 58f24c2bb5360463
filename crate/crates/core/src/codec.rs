//! Point-token codec.
//!
//! Region indications travel through the model as text: each normalized point
//! is quantized to integer percent coordinates and written as a bracketed
//! pair, e.g. `[32 64] [37 62]`. Brackets and the integer literals `0..=100`
//! are atomic tokens.

use std::fmt;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;

/// Token id type shared by the point vocabulary and the caption vocabulary.
pub type TokenId = u32;

/// Number of integer literals, `0..=100`.
pub const QUANT_LEVELS: u32 = 101;

/// A point in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2D {
    pub x: f64,
    pub y: f64,
}

impl Point2D {
    pub fn new(x: f64, y: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
            return Err(Error::Domain(format!("point ({x}, {y}) outside the unit square")));
        }
        Ok(Self { x, y })
    }

    pub(crate) fn new_unchecked(x: f64, y: f64) -> Self {
        debug_assert!((0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y));
        Self { x, y }
    }

    pub fn validate(&self) -> Result<()> {
        Self::new(self.x, self.y).map(|_| ())
    }
}

/// An ordered trajectory of points; an empty scribble indicates the whole
/// image.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Scribble {
    points: Vec<Point2D>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    timestamps: Option<Vec<f64>>,
}

impl Scribble {
    pub fn new(points: Vec<Point2D>) -> Result<Self> {
        for p in &points {
            p.validate()?;
        }
        Ok(Self {
            points,
            timestamps: None,
        })
    }

    pub fn with_timestamps(points: Vec<Point2D>, timestamps: Vec<f64>) -> Result<Self> {
        if points.len() != timestamps.len() {
            return Err(Error::Domain(format!(
                "{} points but {} timestamps",
                points.len(),
                timestamps.len()
            )));
        }
        if timestamps.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Domain("timestamps must be non-decreasing".into()));
        }
        let mut s = Self::new(points)?;
        s.timestamps = Some(timestamps);
        Ok(s)
    }

    /// The global (whole-image) indication.
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn points(&self) -> &[Point2D] {
        &self.points
    }

    pub fn timestamps(&self) -> Option<&[f64]> {
        self.timestamps.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// A point after quantization to integer percent coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantizedPoint {
    pub xq: u8,
    pub yq: u8,
}

impl QuantizedPoint {
    pub fn new(xq: u8, yq: u8) -> Result<Self> {
        if u32::from(xq) >= QUANT_LEVELS || u32::from(yq) >= QUANT_LEVELS {
            return Err(Error::Domain(format!("quantized coordinate ({xq}, {yq}) exceeds 100")));
        }
        Ok(Self { xq, yq })
    }

    pub fn quantize(p: Point2D) -> Result<Self> {
        Ok(Self {
            xq: quantize_coord(p.x)?,
            yq: quantize_coord(p.y)?,
        })
    }
}

impl fmt::Display for QuantizedPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{} {}]", self.xq, self.yq)
    }
}

/// An axis-aligned rectangle in normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = Self { x0, y0, x1, y1 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let coords = [self.x0, self.y0, self.x1, self.y1];
        if coords.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Domain(format!("box {self:?} outside the unit square")));
        }
        if self.x1 <= self.x0 || self.y1 <= self.y0 {
            return Err(Error::Domain(format!("box {self:?} has zero area")));
        }
        Ok(())
    }

    pub fn contains(&self, p: Point2D) -> bool {
        (self.x0..=self.x1).contains(&p.x) && (self.y0..=self.y1).contains(&p.y)
    }
}

/// Fixed layout of the special and point tokens.
///
/// Ids `0..4` are pad/bos/eos/unk, `4` and `5` are the brackets and
/// `6..=106` are the literals `"0"..="100"`. Caption words start at
/// [`PointTokenVocab::FIRST_WORD_ID`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PointTokenVocab;

impl PointTokenVocab {
    pub const PAD: TokenId = 0;
    pub const BOS: TokenId = 1;
    pub const EOS: TokenId = 2;
    pub const UNK: TokenId = 3;
    pub const OPEN: TokenId = 4;
    pub const CLOSE: TokenId = 5;
    pub const FIRST_LITERAL: TokenId = 6;
    pub const FIRST_WORD_ID: TokenId = Self::FIRST_LITERAL + QUANT_LEVELS;

    pub const SPECIAL_STRS: [&'static str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

    pub fn standard() -> Self {
        Self
    }

    /// Number of ids reserved by this vocabulary.
    pub fn len(&self) -> usize {
        Self::FIRST_WORD_ID as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn literal(&self, value: u8) -> TokenId {
        debug_assert!(u32::from(value) < QUANT_LEVELS);
        Self::FIRST_LITERAL + TokenId::from(value)
    }

    pub fn literal_value(&self, id: TokenId) -> Option<u8> {
        (Self::FIRST_LITERAL..Self::FIRST_WORD_ID)
            .contains(&id)
            .then(|| (id - Self::FIRST_LITERAL) as u8)
    }

    pub fn contains(&self, id: TokenId) -> bool {
        id < Self::FIRST_WORD_ID
    }

    /// Whether `id` may appear in a point-token sequence.
    pub fn is_point_token(&self, id: TokenId) -> bool {
        (Self::OPEN..Self::FIRST_WORD_ID).contains(&id)
    }

    pub fn token_str(&self, id: TokenId) -> Option<String> {
        match id {
            0..=3 => Some(Self::SPECIAL_STRS[id as usize].to_string()),
            Self::OPEN => Some("[".into()),
            Self::CLOSE => Some("]".into()),
            _ => self.literal_value(id).map(|v| v.to_string()),
        }
    }

    pub fn id_of(&self, token: &str) -> Option<TokenId> {
        match token {
            "[" => Some(Self::OPEN),
            "]" => Some(Self::CLOSE),
            _ => {
                if let Some(i) = Self::SPECIAL_STRS.iter().position(|s| *s == token) {
                    return Some(i as TokenId);
                }
                parse_literal(token).map(|v| self.literal(v))
            }
        }
    }
}

/// Parses a canonical integer literal `0..=100` (no sign, no leading zeros).
fn parse_literal(s: &str) -> Option<u8> {
    if s.is_empty() || s.len() > 3 || !s.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    if s.len() > 1 && s.starts_with('0') {
        return None;
    }
    let v: u32 = s.parse().ok()?;
    (v < QUANT_LEVELS).then_some(v as u8)
}

/// Quantizes a normalized coordinate to `round(100 c)`, ties away from zero.
pub fn quantize_coord(c: f64) -> Result<u8> {
    if !(0.0..=1.0).contains(&c) {
        return Err(Error::Domain(format!("coordinate {c} outside [0, 1]")));
    }
    Ok((c * 100.0).round() as u8)
}

pub fn encode_points(points: &[Point2D]) -> Result<String> {
    let groups = points
        .iter()
        .map(|&p| QuantizedPoint::quantize(p).map(|q| q.to_string()))
        .collect::<Result<Vec<_>>>()?;
    Ok(groups.join(" "))
}

/// Parses a point string back into quantized points.
pub fn decode_point_string(s: &str) -> Result<Vec<QuantizedPoint>> {
    let groups = parse_groups(s)?;
    Ok(groups.into_iter().map(|(q, _)| q).collect())
}

/// Parses the group grammar, returning each point with the byte offset of its
/// opening bracket.
fn parse_groups(s: &str) -> Result<Vec<(QuantizedPoint, usize)>> {
    let bytes = s.as_bytes();
    let mut pos = 0;
    let mut out = Vec::new();
    let err = |offset: usize, message: &str| Error::Parse {
        offset,
        message: message.to_string(),
    };
    while pos < bytes.len() {
        if !out.is_empty() {
            if bytes[pos] != b' ' {
                return Err(err(pos, "expected a single space between groups"));
            }
            pos += 1;
        }
        let start = pos;
        if bytes.get(pos) != Some(&b'[') {
            return Err(err(pos, "expected '['"));
        }
        pos += 1;
        let (xq, next) = parse_number(bytes, pos)?;
        pos = next;
        if bytes.get(pos) != Some(&b' ') {
            return Err(err(pos, "expected ' ' between coordinates"));
        }
        pos += 1;
        let (yq, next) = parse_number(bytes, pos)?;
        pos = next;
        if bytes.get(pos) != Some(&b']') {
            return Err(err(pos, "expected ']'"));
        }
        pos += 1;
        out.push((QuantizedPoint { xq, yq }, start));
    }
    Ok(out)
}

fn parse_number(bytes: &[u8], start: usize) -> Result<(u8, usize)> {
    let end = bytes[start..]
        .iter()
        .position(|b| !b.is_ascii_digit())
        .map_or(bytes.len(), |n| start + n);
    if end == start {
        return Err(Error::Parse {
            offset: start,
            message: "expected an integer literal".into(),
        });
    }
    // The slice is ASCII digits, so it is valid UTF-8.
    let text = std::str::from_utf8(&bytes[start..end]).expect("ascii digits");
    match parse_literal(text) {
        Some(v) => Ok((v, end)),
        None => Err(Error::Parse {
            offset: start,
            message: format!("coordinate literal {text:?} not in 0..=100"),
        }),
    }
}

/// Converts a point string into token ids: one per bracket and per literal.
pub fn tokenize_points(s: &str, vocab: &PointTokenVocab) -> Result<Vec<TokenId>> {
    let groups = parse_groups(s)?;
    let mut ids = Vec::with_capacity(groups.len() * 4);
    for (q, _) in groups {
        ids.extend([
            PointTokenVocab::OPEN,
            vocab.literal(q.xq),
            vocab.literal(q.yq),
            PointTokenVocab::CLOSE,
        ]);
    }
    Ok(ids)
}

/// Inverse of [`tokenize_points`].
pub fn detokenize_points(ids: &[TokenId], vocab: &PointTokenVocab) -> Result<String> {
    if !ids.len().is_multiple_of(4) {
        return Err(Error::Parse {
            offset: ids.len(),
            message: "point token sequence length is not a multiple of 4".into(),
        });
    }
    let mut groups = Vec::with_capacity(ids.len() / 4);
    for (g, chunk) in ids.chunks(4).enumerate() {
        let bad = |i: usize| Error::Parse {
            offset: g * 4 + i,
            message: format!("unexpected token id {}", chunk[i]),
        };
        if chunk[0] != PointTokenVocab::OPEN {
            return Err(bad(0));
        }
        let xq = vocab.literal_value(chunk[1]).ok_or_else(|| bad(1))?;
        let yq = vocab.literal_value(chunk[2]).ok_or_else(|| bad(2))?;
        if chunk[3] != PointTokenVocab::CLOSE {
            return Err(bad(3));
        }
        groups.push(QuantizedPoint { xq, yq }.to_string());
    }
    Ok(groups.join(" "))
}

/// Samples `k` points from a scribble, keeping trajectory order. Scribbles
/// with fewer than `k` points are sampled with replacement.
pub fn sample_points<R: Rng + ?Sized>(scribble: &Scribble, k: usize, rng: &mut R) -> Result<Vec<Point2D>> {
    if scribble.is_empty() {
        return Err(Error::Domain("cannot sample points from an empty scribble".into()));
    }
    if k == 0 {
        return Err(Error::Domain("K must be positive".into()));
    }
    let n = scribble.len();
    let mut picks: Vec<usize> = if n >= k {
        index::sample(rng, n, k).into_vec()
    } else {
        (0..k).map(|_| rng.random_range(0..n)).collect()
    };
    picks.sort_unstable();
    Ok(picks.into_iter().map(|i| scribble.points()[i]).collect())
}

/// Samples `k` cell centers uniformly (with replacement) over the set cells of
/// a mask.
pub fn sample_points_in_mask<R: Rng + ?Sized>(mask: &Mask, k: usize, rng: &mut R) -> Result<Vec<Point2D>> {
    let cells = mask.set_indices();
    if cells.is_empty() {
        return Err(Error::Domain("cannot sample points from an empty mask".into()));
    }
    if k == 0 {
        return Err(Error::Domain("K must be positive".into()));
    }
    Ok((0..k)
        .map(|_| mask.cell_center(cells[rng.random_range(0..cells.len())]))
        .collect())
}

/// Samples `k` points uniformly inside a box.
pub fn sample_points_in_bbox<R: Rng + ?Sized>(bbox: &BBox, k: usize, rng: &mut R) -> Result<Vec<Point2D>> {
    bbox.validate()?;
    if k == 0 {
        return Err(Error::Domain("K must be positive".into()));
    }
    Ok((0..k)
        .map(|_| {
            let x = rng.random_range(bbox.x0..=bbox.x1);
            let y = rng.random_range(bbox.y0..=bbox.y1);
            Point2D::new_unchecked(x, y)
        })
        .collect())
}
