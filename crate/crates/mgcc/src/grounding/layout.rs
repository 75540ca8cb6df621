//! Layout types, the bounding-box list grammar, and validation.
//!
//! The grammar accepted by [`parse_layout`]:
//!
//! ```text
//! Objects: [ (label, [x, y, w, h]) {, (label, [x, y, w, h])}* ]
//! ```
//!
//! Labels are quoted with `'` (a backtick opening quote is also accepted,
//! matching common model typography) and support backslash escapes.
//! Whitespace is free-form and anything after the closing `]` is ignored.
//! Parse errors carry the byte offset of the offending input.

use crate::error::{MgccError, Result};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Axis-aligned box in canvas pixels: [x, y, w, h] with the origin at the
/// top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
}

impl BoundingBox {
    pub fn new(x: i64, y: i64, w: i64, h: i64) -> Self {
        Self { x, y, w, h }
    }
}

impl Serialize for BoundingBox {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        [self.x, self.y, self.w, self.h].serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BoundingBox {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let v = <[i64; 4]>::deserialize(deserializer)
            .map_err(|e| D::Error::custom(format!("bbox must be [x, y, w, h]: {e}")))?;
        Ok(Self::new(v[0], v[1], v[2], v[3]))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutObject {
    pub label: String,
    pub bbox: BoundingBox,
}

/// Ordered labeled boxes on a fixed canvas.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub canvas: (u32, u32),
    pub objects: Vec<LayoutObject>,
}

impl Layout {
    pub fn empty(canvas: (u32, u32)) -> Self {
        Self {
            canvas,
            objects: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("layout serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

// ── Canonical text form ────────────────────────────────────────────────

fn escape_label(label: &str) -> String {
    let mut out = String::with_capacity(label.len());
    for ch in label.chars() {
        match ch {
            '\'' | '\\' | '`' => {
                out.push('\\');
                out.push(ch);
            }
            _ => out.push(ch),
        }
    }
    out
}

/// Canonical object-list text: `[('a car', [482, 100, 27, 18]), ...]`.
pub fn serialize_objects(objects: &[LayoutObject]) -> String {
    let mut out = String::from("[");
    for (i, obj) in objects.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        out.push_str(&format!(
            "('{}', [{}, {}, {}, {}])",
            escape_label(&obj.label),
            obj.bbox.x,
            obj.bbox.y,
            obj.bbox.w,
            obj.bbox.h
        ));
    }
    out.push(']');
    out
}

// ── Parser ─────────────────────────────────────────────────────────────

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            bytes: text.as_bytes(),
            pos: 0,
        }
    }

    fn err(&self, message: impl Into<String>) -> MgccError {
        MgccError::LayoutParse {
            offset: self.pos,
            message: message.into(),
        }
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn bump(&mut self) -> Option<u8> {
        let b = self.peek();
        if b.is_some() {
            self.pos += 1;
        }
        b
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(b' ' | b'\t' | b'\n' | b'\r')) {
            self.pos += 1;
        }
    }

    fn expect(&mut self, byte: u8) -> Result<()> {
        match self.peek() {
            Some(b) if b == byte => {
                self.pos += 1;
                Ok(())
            }
            Some(b) => Err(self.err(format!(
                "expected {:?}, found {:?}",
                byte as char, b as char
            ))),
            None => Err(self.err(format!("expected {:?}, found end of input", byte as char))),
        }
    }

    fn parse_label(&mut self) -> Result<String> {
        let open = match self.peek() {
            Some(q @ (b'\'' | b'`')) => q,
            _ => return Err(self.err("expected a quoted label")),
        };
        self.pos += 1;
        let mut label = String::new();
        loop {
            match self.bump() {
                Some(b'\\') => match self.bump() {
                    Some(escaped) => label.push(escaped as char),
                    None => return Err(self.err("unterminated escape in label")),
                },
                Some(b'\'') => break,
                Some(b) => label.push(b as char),
                None => {
                    return Err(self.err(format!(
                        "label opened with {:?} never closed",
                        open as char
                    )))
                }
            }
        }
        Ok(label)
    }

    fn parse_int(&mut self) -> Result<i64> {
        let start = self.pos;
        if self.peek() == Some(b'-') {
            self.pos += 1;
        }
        let digits_start = self.pos;
        while matches!(self.peek(), Some(b'0'..=b'9')) {
            self.pos += 1;
        }
        if self.pos == digits_start {
            self.pos = start;
            return Err(self.err("expected an integer coordinate"));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        text.parse::<i64>().map_err(|_| {
            self.pos = start;
            self.err("integer coordinate out of range")
        })
    }

    fn parse_box(&mut self) -> Result<BoundingBox> {
        self.expect(b'[')?;
        let mut coords = [0i64; 4];
        for (i, slot) in coords.iter_mut().enumerate() {
            self.skip_ws();
            *slot = self.parse_int()?;
            self.skip_ws();
            if i < 3 {
                self.expect(b',')?;
            }
        }
        self.expect(b']')?;
        Ok(BoundingBox::new(coords[0], coords[1], coords[2], coords[3]))
    }

    fn parse_object(&mut self) -> Result<LayoutObject> {
        self.expect(b'(')?;
        self.skip_ws();
        let label = self.parse_label()?;
        self.skip_ws();
        self.expect(b',')?;
        self.skip_ws();
        let bbox = self.parse_box()?;
        self.skip_ws();
        self.expect(b')')?;
        Ok(LayoutObject { label, bbox })
    }

    fn parse_object_list(&mut self) -> Result<Vec<LayoutObject>> {
        self.skip_ws();
        self.expect(b'[')?;
        self.skip_ws();
        let mut objects = Vec::new();
        if self.peek() == Some(b']') {
            self.pos += 1;
            return Ok(objects);
        }
        loop {
            self.skip_ws();
            objects.push(self.parse_object()?);
            self.skip_ws();
            match self.bump() {
                Some(b',') => continue,
                Some(b']') => break,
                Some(b) => {
                    self.pos -= 1;
                    return Err(self.err(format!(
                        "expected ',' or ']' after object, found {:?}",
                        b as char
                    )));
                }
                None => return Err(self.err("object list never closed")),
            }
        }
        Ok(objects)
    }
}

/// Parse a completion into a [`Layout`]. The text before the first
/// `Objects:` marker and anything after the closing bracket are ignored.
pub fn parse_layout(completion: &str, canvas: (u32, u32)) -> Result<Layout> {
    const MARKER: &str = "Objects:";
    let at = completion.find(MARKER).ok_or(MgccError::LayoutParse {
        offset: 0,
        message: format!("completion has no {MARKER:?} marker"),
    })?;
    let mut parser = Parser::new(completion);
    parser.pos = at + MARKER.len();
    let objects = parser.parse_object_list()?;
    Ok(Layout { canvas, objects })
}

// ── Validation ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ViolationRule {
    NonPositiveWidth,
    NonPositiveHeight,
    NegativeOrigin,
    ExceedsCanvasWidth,
    ExceedsCanvasHeight,
    EmptyLabel,
}

/// One invariant failure: which object, which rule, and the values seen.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub object_index: usize,
    pub rule: ViolationRule,
    pub detail: String,
}

/// Check every box against the canvas. Violations are data, not failures:
/// an empty result means the layout is valid.
pub fn validate_layout(layout: &Layout) -> Vec<Violation> {
    let (cw, ch) = (layout.canvas.0 as i64, layout.canvas.1 as i64);
    let mut violations = Vec::new();
    for (i, obj) in layout.objects.iter().enumerate() {
        let b = obj.bbox;
        let mut push = |rule: ViolationRule, detail: String| {
            violations.push(Violation {
                object_index: i,
                rule,
                detail,
            });
        };
        if obj.label.is_empty() {
            push(ViolationRule::EmptyLabel, "label is empty".into());
        }
        if b.w <= 0 {
            push(ViolationRule::NonPositiveWidth, format!("w = {}", b.w));
        }
        if b.h <= 0 {
            push(ViolationRule::NonPositiveHeight, format!("h = {}", b.h));
        }
        if b.x < 0 || b.y < 0 {
            push(
                ViolationRule::NegativeOrigin,
                format!("origin = [{}, {}]", b.x, b.y),
            );
        }
        if b.x + b.w > cw {
            push(
                ViolationRule::ExceedsCanvasWidth,
                format!("x + w = {} > {cw}", b.x + b.w),
            );
        }
        if b.y + b.h > ch {
            push(
                ViolationRule::ExceedsCanvasHeight,
                format!("y + h = {} > {ch}", b.y + b.h),
            );
        }
    }
    violations
}
