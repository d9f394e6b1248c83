// SPDX-License-Identifier: MIT OR Apache-2.0

//! Number formatting for artifacts: 12 significant digits, shortest form.

use serde::Serialize;
use serde_json::Value;

use crate::error::Result;

pub const SIGNIFICANT_DIGITS: usize = 12;

/// `x` rounded to 12 significant digits.
pub fn round_sig(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{:.*e}", SIGNIFICANT_DIGITS - 1, x).parse().unwrap_or(x)
}

/// Shortest decimal that reads back as `round_sig(x)`; `inf`, `-inf`, `nan`
/// for non-finite values.
pub fn num(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        let r = round_sig(x);
        // normalise negative zero
        if r == 0.0 { "0".into() } else { format!("{r}") }
    }
}

pub fn opt_num(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

fn round_value(v: &mut Value) {
    match v {
        Value::Number(n) => {
            if n.is_f64() {
                if let Some(r) = n.as_f64().map(round_sig).and_then(serde_json::Number::from_f64) {
                    *n = r;
                }
            }
        }
        Value::Array(a) => a.iter_mut().for_each(round_value),
        Value::Object(o) => o.values_mut().for_each(round_value),
        _ => {}
    }
}

/// Pretty JSON with every float rounded to 12 significant digits.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut v = serde_json::to_value(value)?;
    round_value(&mut v);
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}
