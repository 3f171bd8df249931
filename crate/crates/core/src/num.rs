//! Serde helpers for extended reals: non-finite values become the strings
//! `"+inf"`, `"-inf"` and `"nan"` instead of JSON `null`.

use serde::ser::SerializeSeq;
use serde::Serializer;

pub fn ext<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str(label(*v))
    }
}

pub fn ext_vec<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
    let mut seq = s.serialize_seq(Some(v.len()))?;
    for x in v {
        seq.serialize_element(&Ext(*x))?;
    }
    seq.end()
}

pub fn label(v: f64) -> &'static str {
    if v.is_nan() {
        "nan"
    } else if v > 0.0 {
        "+inf"
    } else {
        "-inf"
    }
}

/// Wrapper that serializes through [`ext`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ext(pub f64);

impl serde::Serialize for Ext {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        ext(&self.0, s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn non_finite_as_strings() {
        let v = vec![Ext(1.5), Ext(f64::INFINITY), Ext(f64::NEG_INFINITY)];
        assert_eq!(serde_json::to_string(&v).unwrap(), r#"[1.5,"+inf","-inf"]"#);
    }
}
