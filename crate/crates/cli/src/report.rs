//! Line-oriented `key<TAB>value` run reports.

use std::fmt::Display;
use std::path::{Path, PathBuf};

use crate::error::CliError;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub entries: Vec<(String, String)>,
}

impl Report {
    pub fn push(&mut self, key: impl Into<String>, value: impl Display) {
        self.entries.push((key.into(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            s.push_str(k);
            s.push('\t');
            s.push_str(v);
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let entries = text
            .lines()
            .filter(|l| !l.is_empty())
            .map(|l| {
                l.split_once('\t')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| CliError::io(format!("report line without a tab: {l:?}")))
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { entries })
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)
                .map_err(|e| CliError::io(format!("{}: {e}", dir.display())))?;
        }
        std::fs::write(path, self.render())
            .map_err(|e| CliError::io(format!("{}: {e}", path.display())))
    }
}

/// `runs/out.tsv` + `lambda=0.1` -> `runs/out.lambda=0.1.tsv`.
pub fn sibling_path(path: &Path, label: &str) -> PathBuf {
    let stem = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    let name = match path.extension() {
        Some(ext) => format!("{stem}.{label}.{}", ext.to_string_lossy()),
        None => format!("{stem}.{label}"),
    };
    path.with_file_name(name)
}
