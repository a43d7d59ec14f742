//! Exit codes and the one-line error report.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use lip2speech::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Args,
    Io,
    Numeric,
    Config,
}

impl Category {
    pub fn exit_code(self) -> i32 {
        match self {
            Category::Args => 2,
            Category::Io => 3,
            Category::Numeric => 4,
            Category::Config => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Args => "args",
            Category::Io => "io",
            Category::Numeric => "numeric",
            Category::Config => "config",
        }
    }
}

#[derive(Debug)]
pub struct Failure {
    pub category: Category,
    pub message: String,
}

impl Failure {
    pub fn new(category: Category, message: impl Into<String>) -> Self {
        Self {
            category,
            message: message.into(),
        }
    }

    pub fn args(message: impl Into<String>) -> Self {
        Self::new(Category::Args, message)
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(Category::Config, message)
    }

    /// `error[<category>]: <message>` on a single line.
    pub fn report_line(&self) -> String {
        let flat: String = self.message.split_whitespace().collect::<Vec<_>>().join(" ");
        format!("error[{}]: {flat}", self.category.name())
    }

    /// Prefixes the message with the file it concerns.
    pub fn at(self, path: &Path) -> Self {
        Self {
            category: self.category,
            message: format!("{}: {}", path.display(), self.message),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.report_line())
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let category = match &e {
            Error::Io(_) | Error::Format { .. } | Error::Json(_) => Category::Io,
            Error::NonFinite { .. } => Category::Numeric,
            Error::Config(_) | Error::MissingParam(_) => Category::Config,
            Error::Shape { .. } | Error::InvalidInput(_) => Category::Args,
        };
        Self::new(category, e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::new(Category::Io, e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Self::new(Category::Io, e.to_string())
    }
}

pub type CliResult<T> = Result<T, Failure>;

/// Sibling path used while `dest` is being written. The extension is kept
/// because some writers pick the format from it.
fn staging_path(dest: &Path) -> PathBuf {
    let name = dest.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = match dest.extension() {
        Some(ext) => format!(".{name}.{}.tmp.{}", std::process::id(), ext.to_string_lossy()),
        None => format!(".{name}.{}.tmp", std::process::id()),
    };
    dest.with_file_name(tmp)
}

/// Writes through a staging file and renames it over `dest` on success.
pub fn persist<F>(dest: &Path, write: F) -> CliResult<()>
where
    F: FnOnce(&Path) -> lip2speech::Result<()>,
{
    let tmp = staging_path(dest);
    match write(&tmp) {
        Ok(()) => fs::rename(&tmp, dest).map_err(|e| Failure::from(e).at(dest)),
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            Err(Failure::from(e).at(dest))
        }
    }
}

pub fn persist_bytes(dest: &Path, bytes: &[u8]) -> CliResult<()> {
    persist(dest, |tmp| Ok(fs::write(tmp, bytes)?))
}

pub fn persist_json<T: serde::Serialize>(dest: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    persist_bytes(dest, text.as_bytes())
}
