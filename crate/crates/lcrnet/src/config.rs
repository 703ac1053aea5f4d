//! Plain-text configuration: one `key = value` per line, `#` comments.
//! Every network and trainer field is addressable; unknown keys are hard
//! errors.

use crate::error::{Error, Result};
use crate::train::TrainConfig;

/// Parse configuration text over the defaults.
pub fn parse_config_text(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected 'key = value', got '{line}'", lineno + 1))
        })?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || value.is_empty() {
            return Err(Error::Config(format!(
                "line {}: empty key or value in '{line}'",
                lineno + 1
            )));
        }
        let known = cfg.net.apply_kv(key, value)? || cfg.apply_kv(key, value)?;
        if !known {
            return Err(Error::Config(format!("line {}: unknown key '{key}'", lineno + 1)));
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Canonical serialization covering every addressable field.
pub fn format_config(cfg: &TrainConfig) -> String {
    let mut out = String::new();
    for line in cfg.net.to_kv_lines() {
        out.push_str(&line);
        out.push('\n');
    }
    for line in cfg.to_kv_lines() {
        out.push_str(&line);
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block::LayerScaleMode;

    #[test]
    fn defaults_when_empty() {
        let cfg = parse_config_text("").unwrap();
        assert_eq!(cfg, TrainConfig::default());
    }

    #[test]
    fn full_roundtrip() {
        let mut cfg = TrainConfig::default();
        cfg.net.channels = [16, 16, 32, 32];
        cfg.net.depths = [1, 1, 1, 1];
        cfg.net.ls_mode = LayerScaleMode::None;
        cfg.base_lr = 5e-4;
        cfg.max_epochs = 50;
        cfg.seed = 7;
        let text = format_config(&cfg);
        let back = parse_config_text(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn comments_and_spacing_tolerated() {
        let text = "# full line comment\n  c1 = 32   # trailing comment\n\nmax_epochs=10\n";
        let cfg = parse_config_text(text).unwrap();
        assert_eq!(cfg.net.channels[0], 32);
        assert_eq!(cfg.max_epochs, 10);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_hard_errors() {
        match parse_config_text("not_a_key = 3\n") {
            Err(Error::Config(msg)) => assert!(msg.contains("not_a_key") && msg.contains("line 1")),
            other => panic!("expected config error, got {other:?}"),
        }
        assert!(parse_config_text("c1 = many\n").is_err());
        assert!(parse_config_text("just a line\n").is_err());
        // validation runs after parsing
        assert!(parse_config_text("base_lr = 0\n").is_err());
        assert!(parse_config_text("c1 = 10\n").is_err()); // 16 does not divide 10
    }
}
