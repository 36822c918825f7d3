//! JSON configuration files. Precedence: built-in defaults, then the file,
//! then command-line flags.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::failure::Failure;

pub const CONFIG_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub format_version: u32,
    #[serde(default)]
    pub seed: Option<u64>,
    /// `desk` or `full`.
    #[serde(default)]
    pub preset: Option<String>,
    /// Ablation row slug: `caae`, `dage_ls`, `sa` or `bapgan`.
    #[serde(default)]
    pub row: Option<String>,
    /// Partial training configuration merged over the preset.
    #[serde(default)]
    pub train: Option<Value>,
    #[serde(default)]
    pub phantom: Option<Value>,
    #[serde(default)]
    pub tsne: Option<Value>,
}

pub fn load(path: &Path) -> Result<FileConfig, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::new("config-file", format!("cannot read {}: {e}", path.display())))?;
    let cfg: FileConfig = serde_json::from_str(&text)
        .map_err(|e| Failure::new("config-file", format!("{}: {e}", path.display())))?;
    if cfg.format_version != CONFIG_FORMAT_VERSION {
        return Err(Failure::new(
            "config-file",
            format!(
                "{}: format_version {} is not supported (expected {CONFIG_FORMAT_VERSION})",
                path.display(),
                cfg.format_version
            ),
        ));
    }
    Ok(cfg)
}

/// Overlay `patch` on `base`. Objects merge key by key; a key absent from
/// `base` is rejected so typos do not pass silently.
pub fn merge(base: &mut Value, patch: &Value, at: &str) -> Result<(), Failure> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let here = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                let slot = b
                    .get_mut(k)
                    .ok_or_else(|| Failure::new("config", format!("unknown configuration field {here}")))?;
                merge(slot, v, &here)?;
            }
            Ok(())
        }
        (b, p) => {
            *b = p.clone();
            Ok(())
        }
    }
}

/// `base` with an optional JSON patch applied.
pub fn overlay<T: Serialize + DeserializeOwned>(base: &T, patch: Option<&Value>, at: &str) -> Result<T, Failure> {
    let Some(patch) = patch else {
        return Ok(serde_json::from_value(serde_json::to_value(base).expect("serializable")).expect("round trip"));
    };
    let mut v = serde_json::to_value(base).expect("serializable");
    merge(&mut v, patch, at)?;
    serde_json::from_value(v).map_err(|e| Failure::new("config", format!("{at}: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn nested_merge_and_unknown_keys() {
        let mut base = json!({"a": 1, "b": {"c": 2, "d": null}});
        merge(&mut base, &json!({"b": {"c": 5, "d": [1, 2]}}), "").unwrap();
        assert_eq!(base, json!({"a": 1, "b": {"c": 5, "d": [1, 2]}}));
        let err = merge(&mut base, &json!({"b": {"e": 1}}), "train").unwrap_err();
        assert!(err.message.contains("train.b.e"));
    }
}
