//! Deterministic JSON and CSV emission.
//!
//! Output files must be byte-identical across runs and thread counts, so
//! every float is printed with exactly 17 significant digits (which also
//! round-trips f64 exactly) and object keys are written in a fixed order.
//! Parsing uses serde_json; only the writers live here.

use std::fmt::Write as _;

/// 17 significant digits, exponent form; round-trips any finite f64.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Minimal JSON builder with explicit key order.
#[derive(Default)]
pub struct JsonWriter {
    buf: String,
    needs_comma: Vec<bool>,
}

impl JsonWriter {
    pub fn new() -> Self {
        Self::default()
    }

    fn pre_value(&mut self) {
        if let Some(last) = self.needs_comma.last_mut() {
            if *last {
                self.buf.push(',');
            }
            *last = true;
        }
    }

    pub fn begin_object(&mut self) -> &mut Self {
        self.pre_value();
        self.buf.push('{');
        self.needs_comma.push(false);
        self
    }

    pub fn end_object(&mut self) -> &mut Self {
        self.needs_comma.pop();
        self.buf.push('}');
        self
    }

    pub fn begin_array(&mut self) -> &mut Self {
        self.pre_value();
        self.buf.push('[');
        self.needs_comma.push(false);
        self
    }

    pub fn end_array(&mut self) -> &mut Self {
        self.needs_comma.pop();
        self.buf.push(']');
        self
    }

    pub fn key(&mut self, key: &str) -> &mut Self {
        if let Some(last) = self.needs_comma.last_mut() {
            if *last {
                self.buf.push(',');
            }
            *last = false;
        }
        let _ = write!(self.buf, "\"{key}\":");
        self
    }

    pub fn value_f64(&mut self, x: f64) -> &mut Self {
        self.pre_value();
        let _ = write!(self.buf, "{x:.16e}");
        self
    }

    pub fn value_usize(&mut self, x: usize) -> &mut Self {
        self.pre_value();
        let _ = write!(self.buf, "{x}");
        self
    }

    pub fn value_u64(&mut self, x: u64) -> &mut Self {
        self.pre_value();
        let _ = write!(self.buf, "{x}");
        self
    }

    pub fn value_bool(&mut self, x: bool) -> &mut Self {
        self.pre_value();
        let _ = write!(self.buf, "{x}");
        self
    }

    pub fn value_str(&mut self, x: &str) -> &mut Self {
        self.pre_value();
        self.buf.push('"');
        for ch in x.chars() {
            match ch {
                '"' => self.buf.push_str("\\\""),
                '\\' => self.buf.push_str("\\\\"),
                '\n' => self.buf.push_str("\\n"),
                c if (c as u32) < 0x20 => {
                    let _ = write!(self.buf, "\\u{:04x}", c as u32);
                }
                c => self.buf.push(c),
            }
        }
        self.buf.push('"');
        self
    }

    pub fn array_f64(&mut self, xs: impl IntoIterator<Item = f64>) -> &mut Self {
        self.begin_array();
        for x in xs {
            self.value_f64(x);
        }
        self.end_array()
    }

    pub fn array_usize(&mut self, xs: impl IntoIterator<Item = usize>) -> &mut Self {
        self.begin_array();
        for x in xs {
            self.value_usize(x);
        }
        self.end_array()
    }

    /// Finished document with a trailing newline.
    pub fn finish(mut self) -> String {
        self.buf.push('\n');
        self.buf
    }
}
