//! Flat key-value run configuration.
//!
//! A config file is a sequence of `[section]` headers followed by
//! `key = value` lines.  Blank lines and lines starting with `#` are
//! ignored.  Values are scalars or comma-separated lists; no quoting or
//! escaping is supported.  Parse errors carry the offending line number,
//! and validation errors name the field that failed.

use std::collections::BTreeMap;
use std::fmt::Write as _;

/// Error raised while reading or validating a configuration.
///
/// Everything in here is a usage problem (exit code 2), as opposed to an
/// engine failure while running the experiment.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn err<T>(msg: String) -> Result<T, ConfigError> {
    Err(ConfigError(msg))
}

/// One `key = value` entry together with the line it came from and a
/// consumption mark used to report unknown keys after validation.
#[derive(Debug, Clone)]
struct Entry {
    value: String,
    line: usize,
    used: std::cell::Cell<bool>,
}

/// Parsed configuration: sections in file order, entries by key.
#[derive(Debug, Default)]
pub struct RawConfig {
    sections: BTreeMap<String, BTreeMap<String, Entry>>,
}

impl RawConfig {
    /// Parses the text of a config file, rejecting malformed lines and
    /// duplicate keys with the line number of the offence.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut sections: BTreeMap<String, BTreeMap<String, Entry>> = BTreeMap::new();
        let mut current: Option<String> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let Some(name) = name.strip_suffix(']') else {
                    return err(format!("line {line_no}: unterminated section header"));
                };
                let name = name.trim();
                if name.is_empty() {
                    return err(format!("line {line_no}: empty section name"));
                }
                sections.entry(name.to_string()).or_default();
                current = Some(name.to_string());
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return err(format!(
                    "line {line_no}: expected `key = value` or `[section]`, got `{line}`"
                ));
            };
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() {
                return err(format!("line {line_no}: empty key"));
            }
            let Some(section) = &current else {
                return err(format!(
                    "line {line_no}: `{key}` appears before any [section] header"
                ));
            };
            let entries = sections.get_mut(section).expect("section registered");
            if let Some(prev) = entries.get(key) {
                return err(format!(
                    "line {line_no}: duplicate key `{section}.{key}` (first set on line {})",
                    prev.line
                ));
            }
            entries.insert(
                key.to_string(),
                Entry {
                    value: value.to_string(),
                    line: line_no,
                    used: std::cell::Cell::new(false),
                },
            );
        }
        Ok(Self { sections })
    }

    /// Borrows a section; a missing section behaves as an empty one.
    pub fn section<'a>(&'a self, name: &'a str) -> SectionView<'a> {
        SectionView {
            name,
            entries: self.sections.get(name),
        }
    }

    /// Returns an error naming every key that no experiment consumed,
    /// so typos fail loudly instead of silently using a default.
    pub fn reject_unused(&self) -> Result<(), ConfigError> {
        let mut stray = String::new();
        for (section, entries) in &self.sections {
            for (key, entry) in entries {
                if !entry.used.get() {
                    let _ = write!(stray, "\n  {section}.{key} (line {})", entry.line);
                }
            }
        }
        if stray.is_empty() {
            Ok(())
        } else {
            err(format!("unrecognized fields:{stray}"))
        }
    }
}

/// Typed accessors over one section.  Every getter marks the key as
/// consumed and reports failures as `section.key`.
#[derive(Clone, Copy)]
pub struct SectionView<'a> {
    name: &'a str,
    entries: Option<&'a BTreeMap<String, Entry>>,
}

impl<'a> SectionView<'a> {
    fn fetch(&self, key: &str) -> Option<&'a Entry> {
        let entry = self.entries.and_then(|m| m.get(key));
        if let Some(e) = entry {
            e.used.set(true);
        }
        entry
    }

    fn field(&self, key: &str) -> String {
        format!("{}.{}", self.name, key)
    }

    pub fn str_opt(&self, key: &str) -> Option<&'a str> {
        self.fetch(key).map(|e| e.value.as_str())
    }

    pub fn str_or(&self, key: &str, default: &'a str) -> &'a str {
        self.str_opt(key).unwrap_or(default)
    }

    pub fn str_required(&self, key: &str) -> Result<&'a str, ConfigError> {
        self.str_opt(key)
            .ok_or_else(|| ConfigError(format!("missing required field `{}`", self.field(key))))
    }

    pub fn f64_opt(&self, key: &str) -> Result<Option<f64>, ConfigError> {
        let Some(entry) = self.fetch(key) else {
            return Ok(None);
        };
        match entry.value.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(Some(v)),
            _ => err(format!(
                "field `{}` (line {}): expected a finite number, got `{}`",
                self.field(key),
                entry.line,
                entry.value
            )),
        }
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        Ok(self.f64_opt(key)?.unwrap_or(default))
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize, ConfigError> {
        let Some(entry) = self.fetch(key) else {
            return Ok(default);
        };
        entry.value.parse::<usize>().map_err(|_| {
            ConfigError(format!(
                "field `{}` (line {}): expected a non-negative integer, got `{}`",
                self.field(key),
                entry.line,
                entry.value
            ))
        })
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64, ConfigError> {
        let Some(entry) = self.fetch(key) else {
            return Ok(default);
        };
        entry.value.parse::<u64>().map_err(|_| {
            ConfigError(format!(
                "field `{}` (line {}): expected an unsigned integer, got `{}`",
                self.field(key),
                entry.line,
                entry.value
            ))
        })
    }

    /// Comma-separated list of finite numbers; rejects empty lists so a
    /// sweep cannot silently degenerate.
    pub fn f64_list(&self, key: &str) -> Result<Option<Vec<f64>>, ConfigError> {
        let Some(entry) = self.fetch(key) else {
            return Ok(None);
        };
        let mut out = Vec::new();
        for piece in entry.value.split(',') {
            let piece = piece.trim();
            if piece.is_empty() {
                continue;
            }
            match piece.parse::<f64>() {
                Ok(v) if v.is_finite() => out.push(v),
                _ => {
                    return err(format!(
                        "field `{}` (line {}): `{piece}` is not a finite number",
                        self.field(key),
                        entry.line
                    ))
                }
            }
        }
        if out.is_empty() {
            return err(format!(
                "field `{}` (line {}): list must contain at least one value",
                self.field(key),
                entry.line
            ));
        }
        Ok(Some(out))
    }

    /// Integrability index: a number greater than the dimension, or `inf`.
    pub fn q_index(&self, key: &str, dim: usize) -> Result<parametrix::coefficients::QIndex, ConfigError> {
        let Some(entry) = self.fetch(key) else {
            return Ok(parametrix::coefficients::QIndex::Infinity);
        };
        if entry.value.eq_ignore_ascii_case("inf") {
            return Ok(parametrix::coefficients::QIndex::Infinity);
        }
        match entry.value.parse::<f64>() {
            Ok(q) if q.is_finite() && q > dim as f64 => Ok(parametrix::coefficients::QIndex::Finite(q)),
            _ => err(format!(
                "field `{}` (line {}): expected `inf` or a number greater than the dimension {dim}, got `{}`",
                self.field(key),
                entry.line,
                entry.value
            )),
        }
    }
}

/// Decreasing list of positive perturbation sizes for a sweep.
pub fn epsilon_list(section: SectionView<'_>, key: &str) -> Result<Vec<f64>, ConfigError> {
    let Some(eps) = section.f64_list(key)? else {
        return err(format!(
            "missing required field `{}.{key}`",
            section.name
        ));
    };
    if eps.iter().any(|&e| e <= 0.0) {
        return err(format!(
            "field `{}.{key}`: every epsilon must be positive",
            section.name
        ));
    }
    if eps.windows(2).any(|w| w[1] >= w[0]) {
        return err(format!(
            "field `{}.{key}`: epsilons must be strictly decreasing",
            section.name
        ));
    }
    Ok(eps)
}

/// Uniform probe grid described by `end_lo`, `end_hi`, `end_count`.
pub fn probe_ends(section: SectionView<'_>, x: f64) -> Result<Vec<f64>, ConfigError> {
    let lo = section.f64_or("end_lo", x - 3.0)?;
    let hi = section.f64_or("end_hi", x + 3.0)?;
    let count = section.usize_or("end_count", 21)?;
    if !(hi > lo) {
        return err(format!(
            "field `{}.end_hi`: must exceed end_lo (got [{lo}, {hi}])",
            section.name
        ));
    }
    if count < 2 {
        return err(format!(
            "field `{}.end_count`: need at least 2 probe points",
            section.name
        ));
    }
    let step = (hi - lo) / (count - 1) as f64;
    Ok((0..count).map(|i| lo + step * i as f64).collect())
}
