//! Settings resolution: defaults, then a flat `key = value` file, then
//! command-line flags. Every resolved value remembers where it came from.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::failure::Failure;

/// Keys a config file may set. They match the long flag names.
const KNOWN_KEYS: &[&str] = &[
    "attention",
    "batch-size",
    "break-frac",
    "checkpoint",
    "dropout",
    "edges",
    "embed-dim",
    "embeddings",
    "features",
    "fractions",
    "heads1",
    "heads2",
    "hidden",
    "k",
    "labels",
    "lr",
    "max-epochs",
    "methods",
    "out",
    "patience",
    "repeats",
    "sample-size",
    "seed",
    "split",
    "test-frac",
    "threads",
    "truth",
    "truth-kind",
    "val-frac",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Default,
    File,
    Flag,
}

impl Source {
    fn as_str(self) -> &'static str {
        match self {
            Source::Default => "default",
            Source::File => "file",
            Source::Flag => "flag",
        }
    }
}

#[derive(Debug, Default)]
pub struct Resolver {
    file: BTreeMap<String, String>,
    file_path: Option<PathBuf>,
    entries: BTreeMap<String, (String, Source)>,
}

impl Resolver {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let mut r = Resolver::default();
        let Some(path) = path else {
            return Ok(r);
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::input(format!("cannot read config {}: {e}", path.display())))?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = |msg: String| Failure::config(format!("{}:{}: {msg}", path.display(), i + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected key=value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if !KNOWN_KEYS.contains(&key) {
                return Err(at(format!("unknown key {key:?}")));
            }
            if r.file.insert(key.to_owned(), value.to_owned()).is_some() {
                return Err(at(format!("key {key:?} set twice")));
            }
        }
        r.file_path = Some(path.to_owned());
        Ok(r)
    }

    fn parse<T: FromStr>(&self, key: &str, raw: &str, source: Source) -> Result<T, Failure>
    where
        T::Err: Display,
    {
        raw.parse().map_err(|e| {
            Failure::config(format!("invalid {key} {raw:?} from {}: {e}", source.as_str()))
        })
    }

    fn file_value<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, Failure>
    where
        T::Err: Display,
    {
        match self.file.get(key).cloned() {
            Some(raw) => {
                let v = self.parse(key, &raw, Source::File)?;
                self.entries.insert(key.to_owned(), (raw, Source::File));
                Ok(Some(v))
            }
            None => Ok(None),
        }
    }

    /// A flag value wins over the file, which wins over the default.
    pub fn value<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, Failure>
    where
        T::Err: Display,
    {
        Ok(self.optional(key, flag)?.unwrap_or_else(|| {
            self.entries
                .insert(key.to_owned(), (default.to_string(), Source::Default));
            default
        }))
    }

    pub fn optional<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, Failure>
    where
        T::Err: Display,
    {
        if let Some(v) = flag {
            self.entries.insert(key.to_owned(), (v.to_string(), Source::Flag));
            return Ok(Some(v));
        }
        self.file_value(key)
    }

    pub fn path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<Option<PathBuf>, Failure> {
        let flag = flag.map(|p| p.to_string_lossy().into_owned());
        Ok(self.optional::<String>(key, flag)?.map(PathBuf::from))
    }

    pub fn required_path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<PathBuf, Failure> {
        self.path(key, flag)?
            .ok_or_else(|| Failure::usage(format!("--{key} is required (flag or config file)")))
    }

    /// The resolved settings as JSON: `{key: {value, source}}`.
    pub fn to_json(&self, command: &str) -> String {
        let mut settings = serde_json::Map::new();
        for (k, (v, s)) in &self.entries {
            settings.insert(
                k.clone(),
                serde_json::json!({ "value": v, "source": s.as_str() }),
            );
        }
        let doc = serde_json::json!({
            "command": command,
            "config_file": self.file_path.as_ref().map(|p| p.display().to_string()),
            "settings": settings,
        });
        serde_json::to_string_pretty(&doc).expect("json serializes") + "\n"
    }

    #[cfg(test)]
    pub fn source(&self, key: &str) -> Option<Source> {
        self.entries.get(key).map(|(_, s)| *s)
    }
}
