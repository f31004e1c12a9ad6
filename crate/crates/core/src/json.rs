//! Serde helpers writing floats with 17 significant digits.

use serde::ser::{Serialize, SerializeSeq, Serializer};
use serde_json::value::RawValue;

fn raw(v: f64) -> Box<RawValue> {
    if v.is_finite() {
        RawValue::from_string(format!("{v:.16e}")).expect("formatted float is valid JSON")
    } else {
        RawValue::from_string("null".into()).expect("null is valid JSON")
    }
}

pub fn f64_17<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    raw(*v).serialize(s)
}

pub fn vec_f64_17<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
    let mut seq = s.serialize_seq(Some(v.len()))?;
    for x in v {
        seq.serialize_element(&raw(*x))?;
    }
    seq.end()
}

pub fn pair_f64_17<S: Serializer>(v: &(f64, f64), s: S) -> Result<S::Ok, S::Error> {
    vec_f64_17(&[v.0, v.1], s)
}

/// CSV cell with 17 significant digits.
pub fn cell(v: f64) -> String {
    format!("{v:.16e}")
}
