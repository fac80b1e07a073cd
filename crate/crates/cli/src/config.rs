//! Line-based configuration files: `[section]` headers and `key = value`
//! pairs, `#` comments. Every diagnostic carries file and line.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

#[derive(Debug)]
pub struct ConfigError {
    pub file: PathBuf,
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: {}", self.file.display(), self.line, self.message)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    line: usize,
}

/// Parsed config file with section-qualified lookups.
#[derive(Debug, Clone)]
pub struct Config {
    pub path: PathBuf,
    pub raw: Vec<u8>,
    sections: BTreeMap<String, BTreeMap<String, Entry>>,
}

impl Config {
    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let raw = std::fs::read(path).map_err(|e| ConfigError {
            file: path.to_path_buf(),
            line: 0,
            message: format!("cannot read config: {e}"),
        })?;
        let text = String::from_utf8_lossy(&raw).into_owned();
        let mut sections: BTreeMap<String, BTreeMap<String, Entry>> = BTreeMap::new();
        let mut current = String::new();
        for (idx, raw_line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = strip_comment(raw_line).trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| ConfigError {
                    file: path.to_path_buf(),
                    line: line_no,
                    message: "unterminated section header".into(),
                })?;
                current = name.trim().to_string();
                sections.entry(current.clone()).or_default();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError {
                    file: path.to_path_buf(),
                    line: line_no,
                    message: format!("expected `key = value`, got `{line}`"),
                });
            };
            if current.is_empty() {
                return Err(ConfigError {
                    file: path.to_path_buf(),
                    line: line_no,
                    message: "key appears before any [section] header".into(),
                });
            }
            let key = key.trim().to_string();
            let value = unquote(value.trim()).to_string();
            let section = sections.entry(current.clone()).or_default();
            if section
                .insert(
                    key.clone(),
                    Entry {
                        value,
                        line: line_no,
                    },
                )
                .is_some()
            {
                return Err(ConfigError {
                    file: path.to_path_buf(),
                    line: line_no,
                    message: format!("duplicate key `{key}` in section [{current}]"),
                });
            }
        }
        Ok(Config {
            path: path.to_path_buf(),
            raw,
            sections,
        })
    }

    fn err(&self, line: usize, message: String) -> ConfigError {
        ConfigError {
            file: self.path.clone(),
            line,
            message,
        }
    }

    pub fn missing(&self, section: &str, key: &str) -> ConfigError {
        self.err(
            0,
            format!("missing required key `{key}` in section [{section}]"),
        )
    }

    pub fn has(&self, section: &str, key: &str) -> bool {
        self.sections
            .get(section)
            .is_some_and(|s| s.contains_key(key))
    }

    pub fn get_str(&self, section: &str, key: &str) -> Result<&str, ConfigError> {
        self.sections
            .get(section)
            .and_then(|s| s.get(key))
            .map(|e| e.value.as_str())
            .ok_or_else(|| self.missing(section, key))
    }

    pub fn get_str_or<'a>(&'a self, section: &str, key: &str, default: &'a str) -> &'a str {
        self.sections
            .get(section)
            .and_then(|s| s.get(key))
            .map_or(default, |e| e.value.as_str())
    }

    fn parse<T: std::str::FromStr>(&self, section: &str, key: &str) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        let entry = self
            .sections
            .get(section)
            .and_then(|s| s.get(key))
            .ok_or_else(|| self.missing(section, key))?;
        entry.value.parse::<T>().map_err(|e| {
            self.err(
                entry.line,
                format!(
                    "key `{key}` in [{section}]: cannot parse `{}`: {e}",
                    entry.value
                ),
            )
        })
    }

    pub fn get_f64(&self, section: &str, key: &str) -> Result<f64, ConfigError> {
        self.parse(section, key)
    }

    pub fn get_f64_or(&self, section: &str, key: &str, default: f64) -> Result<f64, ConfigError> {
        if self.has(section, key) {
            self.parse(section, key)
        } else {
            Ok(default)
        }
    }

    pub fn get_usize(&self, section: &str, key: &str) -> Result<usize, ConfigError> {
        self.parse(section, key)
    }

    pub fn get_usize_or(
        &self,
        section: &str,
        key: &str,
        default: usize,
    ) -> Result<usize, ConfigError> {
        if self.has(section, key) {
            self.parse(section, key)
        } else {
            Ok(default)
        }
    }

    pub fn get_u64_or(&self, section: &str, key: &str, default: u64) -> Result<u64, ConfigError> {
        if self.has(section, key) {
            self.parse(section, key)
        } else {
            Ok(default)
        }
    }

    pub fn get_i64_or(&self, section: &str, key: &str, default: i64) -> Result<i64, ConfigError> {
        if self.has(section, key) {
            self.parse(section, key)
        } else {
            Ok(default)
        }
    }

    pub fn get_bool_or(
        &self,
        section: &str,
        key: &str,
        default: bool,
    ) -> Result<bool, ConfigError> {
        if !self.has(section, key) {
            return Ok(default);
        }
        let entry = &self.sections[section][key];
        match entry.value.as_str() {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            other => Err(self.err(
                entry.line,
                format!("key `{key}` in [{section}]: expected a boolean, got `{other}`"),
            )),
        }
    }

    /// Comma-separated list of numbers.
    pub fn get_f64_list(&self, section: &str, key: &str) -> Result<Vec<f64>, ConfigError> {
        let entry = self
            .sections
            .get(section)
            .and_then(|s| s.get(key))
            .ok_or_else(|| self.missing(section, key))?;
        entry
            .value
            .split(',')
            .map(|part| {
                part.trim().parse::<f64>().map_err(|e| {
                    self.err(
                        entry.line,
                        format!(
                            "key `{key}` in [{section}]: bad number `{}`: {e}",
                            part.trim()
                        ),
                    )
                })
            })
            .collect()
    }

    pub fn get_usize_list_or(
        &self,
        section: &str,
        key: &str,
        default: &[usize],
    ) -> Result<Vec<usize>, ConfigError> {
        if !self.has(section, key) {
            return Ok(default.to_vec());
        }
        let entry = &self.sections[section][key];
        entry
            .value
            .split(',')
            .map(|part| {
                part.trim().parse::<usize>().map_err(|e| {
                    self.err(
                        entry.line,
                        format!(
                            "key `{key}` in [{section}]: bad integer `{}`: {e}",
                            part.trim()
                        ),
                    )
                })
            })
            .collect()
    }

    pub fn line_of(&self, section: &str, key: &str) -> usize {
        self.sections
            .get(section)
            .and_then(|s| s.get(key))
            .map_or(0, |e| e.line)
    }
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(pos) => &line[..pos],
        None => line,
    }
}

fn unquote(value: &str) -> &str {
    let bytes = value.as_bytes();
    if bytes.len() >= 2 && (bytes[0] == b'"' && bytes[bytes.len() - 1] == b'"') {
        &value[1..value.len() - 1]
    } else {
        value
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_config(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn parses_sections_and_values() {
        let f = write_config(
            "[model]\nrate = \"min(k,3)\"\nalpha = 0.8 # comment\n[experiment]\ncheckpoints = 5, 10, 20\n",
        );
        let cfg = Config::load(f.path()).unwrap();
        assert_eq!(cfg.get_str("model", "rate").unwrap(), "min(k,3)");
        assert_eq!(cfg.get_f64("model", "alpha").unwrap(), 0.8);
        assert_eq!(
            cfg.get_f64_list("experiment", "checkpoints").unwrap(),
            vec![5.0, 10.0, 20.0]
        );
    }

    #[test]
    fn missing_key_names_section_and_key() {
        let f = write_config("[model]\nalpha = 1\n");
        let cfg = Config::load(f.path()).unwrap();
        let err = cfg.get_str("model", "rate").unwrap_err();
        let text = err.to_string();
        assert!(text.contains("rate") && text.contains("[model]"), "{text}");
    }

    #[test]
    fn bad_line_is_rejected_with_position() {
        let f = write_config("[model]\nrate min(k,3)\n");
        let err = Config::load(f.path()).unwrap_err();
        assert_eq!(err.line, 2);
    }

    #[test]
    fn duplicate_key_rejected() {
        let f = write_config("[model]\nalpha = 1\nalpha = 2\n");
        let err = Config::load(f.path()).unwrap_err();
        assert!(err.message.contains("duplicate"));
        assert_eq!(err.line, 3);
    }

    #[test]
    fn key_outside_section_rejected() {
        let f = write_config("alpha = 1\n");
        let err = Config::load(f.path()).unwrap_err();
        assert!(err.message.contains("before any"));
    }
}
