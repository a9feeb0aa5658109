//! Config files: JSON, or plain `key = value` lines with dotted keys for
//! nested fields. Values are merged over the defaults of the target type.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::{Error, Result};

/// Parses config text into a JSON object. Text starting with `{` is JSON;
/// anything else is read as `key = value` lines, `#` starting a comment.
pub fn parse_config_text(text: &str) -> Result<Value> {
    if text.trim_start().starts_with('{') {
        return serde_json::from_str(text).map_err(|e| Error::config(format!("invalid JSON config: {e}")));
    }
    let mut root = Value::Object(Map::new());
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, val) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected key = value, got {raw:?}", lineno + 1)))?;
        let key = key.trim();
        if key.is_empty() || key.split('.').any(str::is_empty) {
            return Err(Error::config(format!("line {}: malformed key {key:?}", lineno + 1)));
        }
        let val = val.trim();
        let val = serde_json::from_str(val).unwrap_or_else(|_| Value::String(val.to_string()));
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let obj = node
                .as_object_mut()
                .ok_or_else(|| Error::config(format!("line {}: {key:?} nests under a scalar", lineno + 1)))?;
            if i + 1 == parts.len() {
                obj.insert(part.to_string(), val.clone());
                break;
            }
            node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
        }
    }
    Ok(root)
}

/// Recursively overlays `patch` onto `base`; keys absent from `base` are
/// rejected so typos surface as errors.
pub fn merge_into(base: &mut Value, patch: &Value, path: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge_into(slot, v, &sub)?,
                    Some(slot) => *slot = v.clone(),
                    None => return Err(Error::config(format!("unknown config key {sub:?}"))),
                }
            }
            Ok(())
        }
        (b, p) => {
            *b = p.clone();
            Ok(())
        }
    }
}

/// `T::default()` with the values from `patch` applied.
pub fn apply<T: Serialize + DeserializeOwned + Default>(patch: &Value) -> Result<T> {
    let mut base = serde_json::to_value(T::default())?;
    merge_into(&mut base, patch, "")?;
    serde_json::from_value(base).map_err(|e| Error::config(format!("invalid config value: {e}")))
}

pub fn load_config<T: Serialize + DeserializeOwned + Default>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    apply(&parse_config_text(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(default)]
    struct Inner {
        k: usize,
        name: String,
    }

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(default)]
    struct Outer {
        lr: f64,
        flag: bool,
        inner: Inner,
    }

    #[test]
    fn key_value_and_json_agree() {
        let kv = "lr = 0.5  # step size\nflag=true\n\ninner.k = 8\ninner.name = co4\n";
        let js = r#"{"lr": 0.5, "flag": true, "inner": {"k": 8, "name": "co4"}}"#;
        let a: Outer = apply(&parse_config_text(kv).unwrap()).unwrap();
        let b: Outer = apply(&parse_config_text(js).unwrap()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.inner.name, "co4");
    }

    #[test]
    fn partial_config_keeps_defaults() {
        let a: Outer = apply(&parse_config_text("inner.k = 3").unwrap()).unwrap();
        assert_eq!(
            a,
            Outer {
                inner: Inner { k: 3, ..Inner::default() },
                ..Outer::default()
            }
        );
    }

    #[test]
    fn errors_are_config_errors() {
        for bad in ["nonsense", "lr = 1\nlr.x = 2", "inner..k = 1"] {
            assert!(matches!(parse_config_text(bad), Err(Error::Config(_))), "{bad}");
        }
        assert!(matches!(
            apply::<Outer>(&parse_config_text("lrr = 1").unwrap()),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            apply::<Outer>(&parse_config_text("lr = fast").unwrap()),
            Err(Error::Config(_))
        ));
        assert!(matches!(parse_config_text("{ not json"), Err(Error::Config(_))));
    }
}
