//! System-prompt span detection over decoded token strings.
//!
//! The span is half-open: `[s, e)` runs from the opening delimiter through
//! the closing delimiter inclusive. `(0, 0)` means "no system prompt".

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IM_START: &str = "<|im_start|>";
pub const IM_END: &str = "<|im_end|>";
pub const START_HEADER: &str = "<|start_header_id|>";
pub const END_HEADER: &str = "<|end_header_id|>";
pub const EOT: &str = "<|eot_id|>";

const SYSTEM: &str = "system";
const CLOSERS: [&str; 2] = [IM_END, EOT];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Hash, Serialize, Deserialize)]
pub enum Dialect {
    /// `<|im_start|>system ... <|im_end|>`
    #[default]
    ChatMl,
    /// `<|start_header_id|>system<|end_header_id|> ... <|eot_id|>`
    Llama3Header,
}

impl Dialect {
    pub fn opening_delimiter(self) -> &'static str {
        match self {
            Dialect::ChatMl => IM_START,
            Dialect::Llama3Header => START_HEADER,
        }
    }
}

impl std::str::FromStr for Dialect {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "chatml" => Ok(Dialect::ChatMl),
            "llama3" | "llama3header" | "llama3-header" => Ok(Dialect::Llama3Header),
            other => Err(Error::Config(format!("unknown dialect `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Hash, Serialize, Deserialize)]
pub struct SpanBounds {
    pub s: usize,
    pub e: usize,
}

impl SpanBounds {
    pub const NONE: SpanBounds = SpanBounds { s: 0, e: 0 };

    pub fn new(s: usize, e: usize) -> Result<Self> {
        if s > e {
            return Err(Error::Bounds { s, e, len: e });
        }
        Ok(Self { s, e })
    }

    pub fn len(&self) -> usize {
        self.e - self.s
    }

    pub fn is_empty(&self) -> bool {
        self.e == self.s
    }

    pub fn check_within(&self, len: usize) -> Result<()> {
        if self.s > self.e || self.e > len {
            return Err(Error::Bounds {
                s: self.s,
                e: self.e,
                len,
            });
        }
        Ok(())
    }
}

/// Per-row span bounds for a batch, fixed after prefill.
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BatchBounds {
    rows: Vec<SpanBounds>,
}

impl BatchBounds {
    pub fn new(rows: Vec<SpanBounds>) -> Self {
        Self { rows }
    }

    /// `n` rows of `(0, 0)`.
    pub fn none(n: usize) -> Self {
        Self {
            rows: vec![SpanBounds::NONE; n],
        }
    }

    pub fn rows(&self) -> &[SpanBounds] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, b: usize) -> SpanBounds {
        self.rows[b]
    }

    /// Longest span in the batch.
    pub fn ell_max(&self) -> usize {
        self.rows.iter().map(SpanBounds::len).max().unwrap_or(0)
    }

    /// The `(B, 2)` integer table.
    pub fn table(&self) -> Vec<[usize; 2]> {
        self.rows.iter().map(|r| [r.s, r.e]).collect()
    }
}

/// Detects the first system-prompt span in `tokens`.
///
/// A start is a token containing `"system"` whose predecessor equals the
/// dialect's opening delimiter; the span ends at the first following token
/// containing `<|im_end|>` or `<|eot_id|>`. A start with no closer is
/// malformed and yields `(0, 0)`.
pub fn detect_span<S: AsRef<str>>(tokens: &[S], dialect: Dialect) -> SpanBounds {
    let open = dialect.opening_delimiter();
    let mut start = None;
    for (i, tok) in tokens.iter().enumerate() {
        let tok = tok.as_ref();
        match start {
            None => {
                if i > 0 && tok.contains(SYSTEM) && tokens[i - 1].as_ref() == open {
                    start = Some(i - 1);
                }
            }
            Some(s) => {
                if CLOSERS.iter().any(|c| tok.contains(c)) {
                    return SpanBounds { s, e: i + 1 };
                }
            }
        }
    }
    if let Some(s) = start {
        log::warn!("system span opened at token {s} is never closed; treating as absent");
    }
    SpanBounds::NONE
}

/// Applies [`detect_span`] to every row.
pub fn batch_bounds<S: AsRef<str>>(batch: &[Vec<S>], dialect: Dialect) -> BatchBounds {
    BatchBounds::new(batch.iter().map(|row| detect_span(row, dialect)).collect())
}
