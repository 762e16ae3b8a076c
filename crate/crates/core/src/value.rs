//! Tool argument values and their canonical forms.
//!
//! Canonicalization rules: map keys sorted (maps are `BTreeMap`), integral
//! reals unify with integers (`1.0 == 1`), strings never coerce to numbers.
//! Integers render without leading zeros and reals with 17 significant digits.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Bool(bool),
    Int(i64),
    Real(f64),
    Str(String),
    List(Vec<Value>),
    Map(BTreeMap<String, Value>),
}

/// Declared parameter type of a tool argument.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueType {
    String,
    Int,
    Real,
    Bool,
    List,
    Map,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ValueError {
    #[error("cannot parse {ty:?} argument from {text:?}")]
    Unparseable { ty: ValueType, text: String },
    #[error("value does not have declared type {0:?}")]
    TypeMismatch(ValueType),
}

const I64_BOUND: f64 = 9_223_372_036_854_775_808.0;

impl Value {
    pub fn str(s: impl Into<String>) -> Self {
        Value::Str(s.into())
    }

    /// Canonical representative of this value's equivalence class.
    pub fn canonical(&self) -> Value {
        match self {
            Value::Real(x) if x.is_finite() && x.fract() == 0.0 && x.abs() < I64_BOUND => {
                Value::Int(*x as i64)
            }
            Value::List(items) => Value::List(items.iter().map(Value::canonical).collect()),
            Value::Map(m) => {
                Value::Map(m.iter().map(|(k, v)| (k.clone(), v.canonical())).collect())
            }
            other => other.clone(),
        }
    }

    pub fn is_canonical(&self) -> bool {
        *self == self.canonical()
    }

    /// Every real inside is finite.
    pub fn is_finite(&self) -> bool {
        match self {
            Value::Real(x) => x.is_finite(),
            Value::List(items) => items.iter().all(Value::is_finite),
            Value::Map(m) => m.values().all(Value::is_finite),
            _ => true,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self.canonical() {
            Value::Int(i) => Some(i),
            _ => None,
        }
    }

    /// JSON text of the value with ASCII-only escapes and 17-digit reals.
    pub fn canonical_text(&self) -> String {
        let mut out = String::new();
        write_canonical(&self.canonical(), &mut out);
        out
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Str(s.to_owned())
    }
}

impl From<i64> for Value {
    fn from(i: i64) -> Self {
        Value::Int(i)
    }
}

impl From<bool> for Value {
    fn from(b: bool) -> Self {
        Value::Bool(b)
    }
}

impl ValueType {
    pub fn admits(self, v: &Value) -> bool {
        matches!(
            (self, v),
            (ValueType::String, Value::Str(_))
                | (ValueType::Int, Value::Int(_))
                | (ValueType::Real, Value::Int(_) | Value::Real(_))
                | (ValueType::Bool, Value::Bool(_))
                | (ValueType::List, Value::List(_))
                | (ValueType::Map, Value::Map(_))
        )
    }
}

fn real_text(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_json_string(s: &str, out: &mut String) {
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            ' '..='~' => out.push(c),
            _ => {
                let mut buf = [0u16; 2];
                for unit in c.encode_utf16(&mut buf) {
                    let _ = write!(out, "\\u{unit:04x}");
                }
            }
        }
    }
    out.push('"');
}

fn write_canonical(v: &Value, out: &mut String) {
    match v {
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Int(i) => {
            let _ = write!(out, "{i}");
        }
        Value::Real(x) => out.push_str(&real_text(*x)),
        Value::Str(s) => write_json_string(s, out),
        Value::List(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        Value::Map(m) => {
            out.push('{');
            for (i, (k, item)) in m.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_json_string(k, out);
                out.push(':');
                write_canonical(item, out);
            }
            out.push('}');
        }
    }
}

/// Raw (unquoted) rendering of a top-level string argument: `\` doubles,
/// characters outside printable ASCII become `\u{hex}`.
fn escape_raw(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            ' '..='~' => out.push(c),
            _ => {
                let _ = write!(out, "\\u{{{:x}}}", c as u32);
            }
        }
    }
    out
}

fn unescape_raw(text: &str) -> Option<String> {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next()? {
            '\\' => out.push('\\'),
            'u' => {
                if chars.next()? != '{' {
                    return None;
                }
                let mut hex = String::new();
                loop {
                    let h = chars.next()?;
                    if h == '}' {
                        break;
                    }
                    hex.push(h);
                }
                out.push(char::from_u32(u32::from_str_radix(&hex, 16).ok()?)?);
            }
            _ => return None,
        }
    }
    Some(out)
}

/// Renders a canonical argument under its declared type.
pub fn render_arg(v: &Value, ty: ValueType) -> Result<String, ValueError> {
    let v = v.canonical();
    if !ty.admits(&v) {
        return Err(ValueError::TypeMismatch(ty));
    }
    Ok(match (ty, &v) {
        (ValueType::String, Value::Str(s)) => escape_raw(s),
        (ValueType::Real, Value::Int(i)) => real_text(*i as f64),
        _ => v.canonical_text(),
    })
}

/// Inverse of [`render_arg`]; the result is canonical.
pub fn parse_arg(text: &str, ty: ValueType) -> Result<Value, ValueError> {
    let bad = || ValueError::Unparseable {
        ty,
        text: text.to_owned(),
    };
    let v = match ty {
        ValueType::String => Value::Str(unescape_raw(text).ok_or_else(bad)?),
        ValueType::Int => Value::Int(text.parse().map_err(|_| bad())?),
        ValueType::Real => Value::Real(text.parse::<f64>().map_err(|_| bad())?),
        ValueType::Bool => match text {
            "true" => Value::Bool(true),
            "false" => Value::Bool(false),
            _ => return Err(bad()),
        },
        ValueType::List | ValueType::Map => serde_json::from_str(text).map_err(|_| bad())?,
    };
    let v = v.canonical();
    if !v.is_finite() || !ty.admits(&v) {
        return Err(bad());
    }
    // Only the canonical rendering is accepted, so token streams stay unique.
    if render_arg(&v, ty).as_deref() != Ok(text) {
        return Err(bad());
    }
    Ok(v)
}
