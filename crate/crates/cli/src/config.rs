//! Flat `key=value` run files.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Keys are the long flag names with `_` in place of `-`.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

pub type Settings = BTreeMap<String, String>;

pub fn parse(text: &str, origin: &Path) -> Result<Settings, String> {
    let mut out = Settings::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("{}:{}: expected key=value", origin.display(), i + 1))?;
        let key = key.trim().replace('-', "_");
        if out.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(format!(
                "{}:{}: duplicate key {key}",
                origin.display(),
                i + 1
            ));
        }
    }
    Ok(out)
}

pub fn load(path: &Path) -> Result<Settings, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    parse(&text, path)
}

/// Takes `key` out of `settings` and parses it.
pub fn take<T>(settings: &mut Settings, key: &str) -> Result<Option<T>, String>
where
    T: FromStr,
    T::Err: Display,
{
    settings
        .remove(key)
        .map(|v| {
            v.parse()
                .map_err(|e| format!("config key {key}: cannot parse {v:?}: {e}"))
        })
        .transpose()
}

/// Errors on whatever is left after every known key was taken.
pub fn reject_unknown(settings: &Settings) -> Result<(), String> {
    match settings.keys().next() {
        None => Ok(()),
        Some(k) => Err(format!("unknown config key {k}")),
    }
}

/// Lines for a config echo; the output parses back with [`parse`].
pub fn render(entries: &[(&str, String)]) -> String {
    let mut out = String::new();
    for (k, v) in entries {
        out.push_str(k);
        out.push('=');
        out.push_str(v);
        out.push('\n');
    }
    out
}
