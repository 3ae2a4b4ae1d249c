//! Byte-stable event trace.
//!
//! One line per event: `t=<ms> ev=<name> k=v ...` with `t` and `ev` first
//! and the remaining keys in sorted order. Floats are printed with six
//! decimal places. Two runs that behave identically produce identical
//! bytes, which is what the determinism checks diff.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use crate::domain::SimTime;

/// A trace field value. Strings must be token-like (no spaces or '=') so
/// lines stay machine-splittable.
#[derive(Debug, Clone)]
pub enum Value {
    U(u64),
    I(i64),
    F(f64),
    S(String),
}

impl Value {
    fn render(&self, out: &mut String) {
        match self {
            Value::U(v) => {
                let _ = write!(out, "{v}");
            }
            Value::I(v) => {
                let _ = write!(out, "{v}");
            }
            Value::F(v) => {
                let _ = write!(out, "{v:.6}");
            }
            Value::S(v) => {
                debug_assert!(
                    !v.contains([' ', '=', '\n']),
                    "trace string value must be token-like: {v:?}"
                );
                out.push_str(v);
            }
        }
    }
}

impl From<u64> for Value {
    fn from(v: u64) -> Self {
        Value::U(v)
    }
}

impl From<u32> for Value {
    fn from(v: u32) -> Self {
        Value::U(v as u64)
    }
}

impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::I(v)
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::F(v)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::S(v.to_string())
    }
}

impl From<String> for Value {
    fn from(v: String) -> Self {
        Value::S(v)
    }
}

/// Event sink. `Null` costs nothing, `Buffer` is for tests, `File` for runs.
pub enum Trace {
    Null,
    Buffer(Vec<u8>),
    File(BufWriter<File>),
}

impl Trace {
    pub fn null() -> Self {
        Trace::Null
    }

    pub fn buffer() -> Self {
        Trace::Buffer(Vec::new())
    }

    pub fn to_file(path: &Path) -> io::Result<Self> {
        Ok(Trace::File(BufWriter::new(File::create(path)?)))
    }

    pub fn enabled(&self) -> bool {
        !matches!(self, Trace::Null)
    }

    /// Emit one event line. Field keys are sorted; `t` and `ev` always lead.
    pub fn emit(&mut self, t: SimTime, ev: &str, fields: &[(&str, Value)]) {
        if let Trace::Null = self {
            return;
        }
        let mut line = String::with_capacity(64);
        let _ = write!(line, "t={} ev={ev}", t.as_millis());
        let mut sorted: Vec<&(&str, Value)> = fields.iter().collect();
        sorted.sort_by_key(|(k, _)| *k);
        for (k, v) in sorted {
            debug_assert!(!k.contains([' ', '=']), "bad key");
            line.push(' ');
            line.push_str(k);
            line.push('=');
            v.render(&mut line);
        }
        line.push('\n');
        match self {
            Trace::Null => {}
            Trace::Buffer(buf) => buf.extend_from_slice(line.as_bytes()),
            Trace::File(w) => {
                // Trace IO failure would silently fork determinism checks;
                // fail loudly instead.
                w.write_all(line.as_bytes()).expect("trace write failed");
            }
        }
    }

    /// Buffered bytes, for tests.
    pub fn bytes(&self) -> &[u8] {
        match self {
            Trace::Buffer(buf) => buf,
            _ => &[],
        }
    }

    pub fn finish(&mut self) {
        if let Trace::File(w) = self {
            w.flush().expect("trace flush failed");
        }
    }
}
