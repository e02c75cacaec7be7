//! Corpus ingestion. Tokens are plain integers: either whitespace or
//! newline separated ids in a text file, or one token per byte.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Encoding {
    /// Decimal ids separated by whitespace; `#` starts a comment line.
    Ids,
    /// Every byte is a token in `0..256`.
    Bytes,
}

impl std::str::FromStr for Encoding {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ids" => Ok(Encoding::Ids),
            "bytes" => Ok(Encoding::Bytes),
            _ => Err(Error::config(format!("unknown encoding `{s}` (expected ids or bytes)"))),
        }
    }
}

pub fn parse_ids(text: &str, vocab: usize) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim_start().starts_with('#') {
            continue;
        }
        for w in line.split_whitespace() {
            let t: usize =
                w.parse().map_err(|_| Error::Parse { line: i + 1, msg: format!("`{w}` is not a token id") })?;
            if t >= vocab {
                return Err(Error::Parse { line: i + 1, msg: format!("token {t} outside vocabulary of {vocab}") });
            }
            out.push(t);
        }
    }
    Ok(out)
}

pub fn load_tokens(path: &Path, encoding: Encoding, vocab: usize) -> Result<Vec<usize>> {
    match encoding {
        Encoding::Ids => parse_ids(&std::fs::read_to_string(path)?, vocab),
        Encoding::Bytes => {
            if vocab < 256 {
                return Err(Error::config(format!("byte tokens need a vocabulary of 256, model has {vocab}")));
            }
            Ok(std::fs::read(path)?.into_iter().map(usize::from).collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_and_bytes() {
        assert_eq!(parse_ids("# header\n1 2\n3\n\n 4 ", 8).unwrap(), [1, 2, 3, 4]);
        assert!(matches!(parse_ids("1\n9", 8), Err(Error::Parse { line: 2, .. })));
        assert!(parse_ids("x", 8).is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("raw");
        std::fs::write(&p, b"hi\n").unwrap();
        assert_eq!(load_tokens(&p, Encoding::Bytes, 256).unwrap(), [104, 105, 10]);
        assert!(load_tokens(&p, Encoding::Bytes, 32).is_err());
        assert!(load_tokens(&dir.path().join("missing"), Encoding::Ids, 32).is_err());
    }
}
