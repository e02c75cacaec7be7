use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};

/// Inserts `# key=value` lines after the version line of a CSV.
pub fn with_meta(csv: &str, meta: &[(String, String)]) -> String {
    let (first, rest) = csv.split_once('\n').unwrap_or((csv, ""));
    let mut s = format!("{first}\n");
    s.push_str(&comment_block(meta));
    s.push_str(rest);
    s
}

pub fn comment_block(meta: &[(String, String)]) -> String {
    let mut s = String::new();
    for (k, v) in meta {
        let _ = writeln!(s, "# {k}={v}");
    }
    s
}

/// Writes to `path`, or stdout without one.
pub fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn pair(k: &str, v: impl ToString) -> (String, String) {
    (k.to_string(), v.to_string())
}
