//! `--set key=value` overrides applied to a serialized config.

use serde_json::Value;

use crate::UsageError;

/// Applies dotted `key=value` pairs to `config`. Keys must already exist in
/// the serialized form; values are parsed as JSON and fall back to strings.
pub fn apply(config: &mut Value, pairs: &[String]) -> Result<(), UsageError> {
    for pair in pairs {
        let (key, raw) = pair
            .split_once('=')
            .ok_or_else(|| UsageError(format!("--set expects key=value, got `{pair}`")))?;
        let key = key.trim();
        let slot = lookup(config, key).ok_or_else(|| UsageError(format!("unknown config key `{key}`")))?;
        *slot = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.to_string()));
    }
    Ok(())
}

fn lookup<'a>(mut v: &'a mut Value, key: &str) -> Option<&'a mut Value> {
    if key.is_empty() {
        return None;
    }
    for part in key.split('.') {
        v = v.as_object_mut()?.get_mut(part)?;
    }
    Some(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn nested_keys_and_value_types() {
        let mut v = json!({"seed": 0, "arch": {"d_shared": 600, "head_channels": null}, "strategy": "mil"});
        apply(
            &mut v,
            &[
                "seed=7".into(),
                "arch.d_shared=12".into(),
                "arch.head_channels=4".into(),
                "strategy=cross".into(),
            ],
        )
        .unwrap();
        assert_eq!(
            v,
            json!({"seed": 7, "arch": {"d_shared": 12, "head_channels": 4}, "strategy": "cross"})
        );
    }

    #[test]
    fn unknown_or_malformed_keys_are_rejected() {
        let mut v = json!({"seed": 0, "arch": {"d_shared": 600}});
        for bad in ["nope=1", "arch.nope=1", "seed.x=1", "seed", "=3"] {
            assert!(apply(&mut v, &[bad.into()]).is_err(), "{bad}");
        }
    }
}
