//! Flat `key = value` configuration text with `[section]` headers.
//!
//! Every key is validated against the known set; an unknown key is a
//! configuration error that names the nearest known key.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

/// A value type that can appear in a config file.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                <$t as FromStr>::from_str(s).map_err(|e| e.to_string())
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
plain_value!(usize, u64, i64, bool, String);

impl ConfigValue for f64 {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let v = f64::from_str(s).map_err(|e| e.to_string())?;
        if !v.is_finite() {
            return Err("value must be finite".into());
        }
        Ok(v)
    }
    fn render(&self) -> String {
        // `{:?}` always round-trips exactly
        format!("{self:?}")
    }
}

impl<T: ConfigValue> ConfigValue for Vec<T> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s.trim().is_empty() {
            return Ok(Vec::new());
        }
        s.split(',').map(|p| T::parse_value(p.trim())).collect()
    }
    fn render(&self) -> String {
        self.iter().map(|v| v.render()).collect::<Vec<_>>().join(",")
    }
}

/// A named group of settings.
pub trait Section: Default {
    const NAME: &'static str;
    fn keys() -> &'static [&'static str];
    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String>;
    fn entries(&self) -> Vec<(&'static str, String)>;
}

/// Declares a config section struct with per-field defaults.
#[macro_export]
macro_rules! config_section {
    (
        $(#[$meta:meta])*
        $name:ident, $section:literal {
            $( $(#[$fmeta:meta])* $field:ident : $ty:ty = $default:expr ),* $(,)?
        }
    ) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name {
            $( $(#[$fmeta])* pub $field: $ty ),*
        }

        impl Default for $name {
            fn default() -> Self {
                $name { $( $field: $default ),* }
            }
        }

        impl $crate::config::Section for $name {
            const NAME: &'static str = $section;
            fn keys() -> &'static [&'static str] {
                &[$( stringify!($field) ),*]
            }
            fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
                match key {
                    $( stringify!($field) => {
                        self.$field = <$ty as $crate::config::ConfigValue>::parse_value(value)?;
                        Ok(())
                    } )*
                    _ => Err(format!("unknown key {key}")),
                }
            }
            fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$( (stringify!($field), $crate::config::ConfigValue::render(&self.$field)) ),*]
            }
        }
    };
}

/// Parsed but not yet typed config text: `section -> key -> (line, value)`.
#[derive(Clone, Debug, Default)]
pub struct RawConfig {
    sections: BTreeMap<String, BTreeMap<String, (usize, String)>>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut sections: BTreeMap<String, BTreeMap<String, (usize, String)>> = BTreeMap::new();
        let mut current = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config(format!("line {line_no}: malformed section header")))?;
                current = name.trim().to_string();
                sections.entry(current.clone()).or_default();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line_no}: expected key = value")))?;
            let k = k.trim().to_string();
            if current.is_empty() {
                return Err(Error::Config(format!("line {line_no}: key {k} appears before any [section]")));
            }
            let sec = sections.entry(current.clone()).or_default();
            if sec.insert(k.clone(), (line_no, v.trim().to_string())).is_some() {
                return Err(Error::Config(format!("line {line_no}: duplicate key {current}.{k}")));
            }
        }
        Ok(RawConfig { sections })
    }

    /// Fills a section from the raw text, leaving unspecified keys at their
    /// defaults.
    pub fn take<S: Section>(&mut self) -> Result<S> {
        let mut s = S::default();
        if let Some(entries) = self.sections.remove(S::NAME) {
            for (k, (line, v)) in entries {
                if !S::keys().contains(&k.as_str()) {
                    return Err(Error::Config(format!(
                        "line {line}: unknown key {}.{k}; nearest known key is {}.{}",
                        S::NAME,
                        S::NAME,
                        nearest(&k, S::keys().iter().copied())
                    )));
                }
                s.set(&k, &v)
                    .map_err(|e| Error::Config(format!("line {line}: {}.{k}: {e}", S::NAME)))?;
            }
        }
        Ok(s)
    }

    /// Errors if anything was left untaken; `known` lists `section.key` names.
    pub fn finish(&self, known: &[String]) -> Result<()> {
        for (sec, entries) in &self.sections {
            if let Some((k, (line, _))) = entries.iter().next() {
                let full = format!("{sec}.{k}");
                return Err(Error::Config(format!(
                    "line {line}: unknown key {full}; nearest known key is {}",
                    nearest(&full, known.iter().map(|s| s.as_str()))
                )));
            }
            if entries.is_empty() && !known.iter().any(|k| k.starts_with(&format!("{sec}."))) {
                return Err(Error::Config(format!("unknown section [{sec}]")));
            }
        }
        Ok(())
    }
}

/// Canonical text for a section: header plus sorted-by-declaration entries.
pub fn render_section<S: Section>(s: &S) -> String {
    let mut out = format!("[{}]\n", S::NAME);
    for (k, v) in s.entries() {
        out.push_str(&format!("{k} = {v}\n"));
    }
    out
}

pub fn qualified_keys<S: Section>() -> Vec<String> {
    S::keys().iter().map(|k| format!("{}.{k}", S::NAME)).collect()
}

fn nearest<'a>(key: &str, known: impl Iterator<Item = &'a str>) -> String {
    known
        .map(|k| (levenshtein(key, k), k))
        .min()
        .map(|(_, k)| k.to_string())
        .unwrap_or_default()
}

fn levenshtein(a: &str, b: &str) -> usize {
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.chars().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != *cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}
