//! Typed values shared by sitemap arguments, policy parameters and conditions.
//!
//! Numbers are fixed-point with two fractional digits so that currency
//! comparisons are exact. Anything finer than a cent is rejected rather than
//! rounded.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Name → value bindings handed to a condition program.
pub type ValueMap = BTreeMap<String, Value>;

/// A decimal amount stored as hundredths.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct Amount(i64);

impl Amount {
    pub const SCALE: i64 = 100;

    pub const fn from_hundredths(h: i64) -> Self {
        Amount(h)
    }

    pub fn from_units(units: i64) -> Option<Self> {
        units.checked_mul(Self::SCALE).map(Amount)
    }

    pub const fn hundredths(self) -> i64 {
        self.0
    }

    /// Parses `-?digits(.digits)?`. Fractional digits past the second must be zero.
    pub fn parse_decimal(s: &str) -> Option<Self> {
        let (neg, body) = match s.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, s),
        };
        let (int_part, frac_part) = match body.split_once('.') {
            Some((i, f)) => (i, f),
            None => (body, ""),
        };
        if int_part.is_empty() || !int_part.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        if body.contains('.') && frac_part.is_empty() {
            return None;
        }
        if !frac_part.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        if frac_part.len() > 2 && frac_part[2..].bytes().any(|b| b != b'0') {
            return None;
        }
        let int: i64 = int_part.parse().ok()?;
        let mut frac = 0i64;
        for (i, b) in frac_part.bytes().take(2).enumerate() {
            frac += i64::from(b - b'0') * if i == 0 { 10 } else { 1 };
        }
        let h = int.checked_mul(Self::SCALE)?.checked_add(frac)?;
        Some(Amount(if neg { -h } else { h }))
    }

    /// Reads a JSON number. Floats are accepted only when their shortest
    /// decimal rendering has at most two significant fractional digits.
    pub fn from_json_number(n: &serde_json::Number) -> Option<Self> {
        if let Some(i) = n.as_i64() {
            return Self::from_units(i);
        }
        let f = n.as_f64()?;
        if !f.is_finite() {
            return None;
        }
        let rendered = f.to_string();
        if rendered.contains(['e', 'E']) {
            return None;
        }
        Self::parse_decimal(&rendered)
    }

    /// Parses text scraped from a page, e.g. `"$1,234.50"`.
    pub fn parse_lenient(s: &str) -> Option<Self> {
        let t = s.trim();
        let (neg, t) = match t.strip_prefix('-') {
            Some(rest) => (true, rest.trim_start()),
            None => (false, t),
        };
        let t = t.trim_start_matches(['$', '€', '£', '¥']).trim();
        let cleaned: String = t.chars().filter(|c| *c != ',').collect();
        if cleaned.starts_with('-') {
            return None;
        }
        let a = Self::parse_decimal(&cleaned)?;
        Some(if neg { Amount(-a.0) } else { a })
    }

    pub fn to_json(self) -> serde_json::Value {
        if self.0 % Self::SCALE == 0 {
            serde_json::Value::from(self.0 / Self::SCALE)
        } else {
            // The decimal rendering has at most two fractional digits, so the
            // shortest f64 round-trip prints it back unchanged.
            let f: f64 = self.to_string().parse().unwrap_or(0.0);
            serde_json::Number::from_f64(f)
                .map(serde_json::Value::Number)
                .unwrap_or(serde_json::Value::Null)
        }
    }
}

impl fmt::Display for Amount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        let int = abs / Self::SCALE as u64;
        let frac = abs % Self::SCALE as u64;
        if frac == 0 {
            write!(f, "{sign}{int}")
        } else if frac % 10 == 0 {
            write!(f, "{sign}{int}.{}", frac / 10)
        } else {
            write!(f, "{sign}{int}.{frac:02}")
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueType {
    Number,
    String,
    Boolean,
    StringList,
}

impl fmt::Display for ValueType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ValueType::Number => "number",
            ValueType::String => "string",
            ValueType::Boolean => "boolean",
            ValueType::StringList => "string_list",
        })
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Value {
    Number(Amount),
    String(String),
    Bool(bool),
    StringList(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("expected {expected}, got {found}")]
pub struct ValueError {
    pub expected: ValueType,
    pub found: String,
}

fn describe(v: &serde_json::Value) -> String {
    let s = v.to_string();
    if s.chars().count() > 40 {
        format!("{}...", s.chars().take(40).collect::<String>())
    } else {
        s
    }
}

impl Value {
    pub fn value_type(&self) -> ValueType {
        match self {
            Value::Number(_) => ValueType::Number,
            Value::String(_) => ValueType::String,
            Value::Bool(_) => ValueType::Boolean,
            Value::StringList(_) => ValueType::StringList,
        }
    }

    /// Strict conversion used for instantiation parameters: the JSON type must
    /// already be the declared one.
    pub fn from_json_strict(v: &serde_json::Value, ty: ValueType) -> Result<Value, ValueError> {
        let err = || ValueError {
            expected: ty,
            found: describe(v),
        };
        match (ty, v) {
            (ValueType::Number, serde_json::Value::Number(n)) => {
                Amount::from_json_number(n).map(Value::Number).ok_or_else(err)
            }
            (ValueType::String, serde_json::Value::String(s)) => Ok(Value::String(s.clone())),
            (ValueType::Boolean, serde_json::Value::Bool(b)) => Ok(Value::Bool(*b)),
            (ValueType::StringList, serde_json::Value::Array(items)) => items
                .iter()
                .map(|i| i.as_str().map(str::to_owned))
                .collect::<Option<Vec<_>>>()
                .map(Value::StringList)
                .ok_or_else(err),
            _ => Err(err()),
        }
    }

    /// Lenient conversion used for values observed at runtime (form fields,
    /// query strings, DOM text), where everything may arrive as a string.
    pub fn from_json_lenient(v: &serde_json::Value, ty: ValueType) -> Result<Value, ValueError> {
        if let Ok(val) = Self::from_json_strict(v, ty) {
            return Ok(val);
        }
        let err = || ValueError {
            expected: ty,
            found: describe(v),
        };
        match (ty, v) {
            (ValueType::Number, serde_json::Value::String(s)) => {
                Amount::parse_lenient(s).map(Value::Number).ok_or_else(err)
            }
            (ValueType::Boolean, serde_json::Value::String(s)) => match s.trim() {
                "true" => Ok(Value::Bool(true)),
                "false" => Ok(Value::Bool(false)),
                _ => Err(err()),
            },
            (ValueType::String, serde_json::Value::Number(n)) => Ok(Value::String(n.to_string())),
            (ValueType::StringList, serde_json::Value::String(s)) => {
                Ok(Value::StringList(vec![s.clone()]))
            }
            _ => Err(err()),
        }
    }

    /// Infers a value from JSON without a declared type. Nested objects and
    /// mixed arrays have no representation.
    pub fn from_json_untyped(v: &serde_json::Value) -> Option<Value> {
        match v {
            serde_json::Value::Number(n) => Amount::from_json_number(n).map(Value::Number),
            serde_json::Value::String(s) => Some(Value::String(s.clone())),
            serde_json::Value::Bool(b) => Some(Value::Bool(*b)),
            serde_json::Value::Array(_) => {
                Self::from_json_strict(v, ValueType::StringList).ok()
            }
            _ => None,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        match self {
            Value::Number(a) => a.to_json(),
            Value::String(s) => serde_json::Value::String(s.clone()),
            Value::Bool(b) => serde_json::Value::Bool(*b),
            Value::StringList(l) => {
                serde_json::Value::Array(l.iter().cloned().map(serde_json::Value::String).collect())
            }
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Number(a) => write!(f, "{a}"),
            Value::String(s) => write!(f, "{s:?}"),
            Value::Bool(b) => write!(f, "{b}"),
            Value::StringList(l) => write!(f, "{l:?}"),
        }
    }
}

impl Serialize for Value {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_json().serialize(serializer)
    }
}

/// Converts a map of JSON values to typed values without a schema.
pub fn value_map_from_json(
    map: &serde_json::Map<String, serde_json::Value>,
) -> Result<ValueMap, String> {
    map.iter()
        .map(|(k, v)| {
            Value::from_json_untyped(v)
                .map(|val| (k.clone(), val))
                .ok_or_else(|| format!("unsupported value for {k}: {v}"))
        })
        .collect()
}

pub fn value_map_to_json(map: &ValueMap) -> serde_json::Map<String, serde_json::Value> {
    map.iter().map(|(k, v)| (k.clone(), v.to_json())).collect()
}
