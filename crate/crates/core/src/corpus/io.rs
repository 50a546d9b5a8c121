//! Line-oriented corpus files. Every reader reports the 1-based line of the
//! first malformed record.

use std::fmt::Write as _;
use std::path::Path;

use crate::corpus::{tokenize, Item};
use crate::{Error, Result};

fn read(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: format!("invalid UTF-8: {e}"),
    })
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

pub fn parse_paired(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 2 {
                return Err(parse_err(path, i + 1, format!("expected 2 tab-separated fields, found {}", f.len())));
            }
            if tokenize(f[0]).is_empty() || tokenize(f[1]).is_empty() {
                return Err(parse_err(path, i + 1, "empty context or response"));
            }
            Ok((f[0].to_string(), f[1].to_string()))
        })
        .collect()
}

pub fn read_paired(path: &Path) -> Result<Vec<(String, String)>> {
    parse_paired(&read(path)?, path)
}

/// One utterance per line, optionally followed by `<TAB>likes`.
pub fn parse_mono(text: &str, path: &Path) -> Result<Vec<Item>> {
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let mut f = line.split('\t');
            let utt = f.next().unwrap_or_default();
            let likes = match f.next() {
                None => None,
                Some(l) => Some(
                    l.trim()
                        .parse::<u64>()
                        .map_err(|_| parse_err(path, i + 1, format!("bad like count {l:?}")))?,
                ),
            };
            if f.next().is_some() {
                return Err(parse_err(path, i + 1, "too many fields"));
            }
            let tokens = tokenize(utt);
            if tokens.is_empty() {
                return Err(parse_err(path, i + 1, "empty utterance"));
            }
            Ok(Item { tokens, likes })
        })
        .collect()
}

pub fn read_mono(path: &Path) -> Result<Vec<Item>> {
    parse_mono(&read(path)?, path)
}

pub fn parse_blocklist(text: &str, path: &Path) -> Result<Vec<String>> {
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            if tokenize(line).is_empty() {
                Err(parse_err(path, i + 1, "empty phrase"))
            } else {
                Ok(line.trim().to_string())
            }
        })
        .collect()
}

pub fn read_blocklist(path: &Path) -> Result<Vec<String>> {
    parse_blocklist(&read(path)?, path)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn clean(field: &str) -> Result<&str> {
    if field.contains(['\t', '\n', '\r']) {
        return Err(Error::invalid(format!("field contains a tab or newline: {field:?}")));
    }
    Ok(field)
}

pub fn write_paired(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut s = String::new();
    for (c, r) in pairs {
        writeln!(s, "{}\t{}", clean(c)?, clean(r)?).unwrap();
    }
    write(path, &s)
}

pub fn write_mono(path: &Path, utterances: &[String]) -> Result<()> {
    let mut s = String::new();
    for u in utterances {
        writeln!(s, "{}", clean(u)?).unwrap();
    }
    write(path, &s)
}

/// `context<TAB>response<TAB>logprob` rows.
pub fn write_decode_tsv(path: &Path, rows: &[(String, String, f64)]) -> Result<()> {
    let mut s = String::new();
    for (c, r, lp) in rows {
        writeln!(s, "{}\t{}\t{lp:.6}", clean(c)?, clean(r)?).unwrap();
    }
    write(path, &s)
}

/// Reads the first two columns of a decode or paired TSV.
pub fn read_decode_tsv(path: &Path) -> Result<Vec<(String, String)>> {
    let text = read(path)?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() < 2 || f.len() > 3 {
                return Err(parse_err(path, i + 1, "expected context<TAB>response[<TAB>logprob]"));
            }
            if f.len() == 3 && f[2].parse::<f64>().is_err() {
                return Err(parse_err(path, i + 1, format!("bad logprob {:?}", f[2])));
            }
            Ok((f[0].to_string(), f[1].to_string()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paired_errors_carry_line_numbers() {
        let p = Path::new("d.tsv");
        assert_eq!(parse_paired("a b\tc\n", p).unwrap(), vec![("a b".into(), "c".into())]);
        assert!(matches!(parse_paired("a\tb\nbad line\n", p), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_paired("a\t \n", p), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_paired("a\tb\tc\n", p), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn mono_with_optional_likes() {
        let p = Path::new("m.txt");
        let items = parse_mono("hello world\nfoo\t12\n", p).unwrap();
        assert_eq!(items[0].likes, None);
        assert_eq!(items[1].likes, Some(12));
        assert!(matches!(parse_mono("ok\n\n", p), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_mono("ok\tmany\n", p), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_blocklist("x\n  \n", p), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = vec![("a b".to_string(), "c d".to_string()), ("你好".into(), "e".into())];
        let p = dir.path().join("sub/pairs.tsv");
        write_paired(&p, &pairs).unwrap();
        assert_eq!(read_paired(&p).unwrap(), pairs);
        let d = dir.path().join("dec.tsv");
        write_decode_tsv(&d, &[("x".into(), "y z".into(), -1.25)]).unwrap();
        assert_eq!(std::fs::read_to_string(&d).unwrap(), "x\ty z\t-1.250000\n");
        assert_eq!(read_decode_tsv(&d).unwrap(), vec![("x".into(), "y z".into())]);
        assert!(write_paired(&p, &[("a\tb".into(), "c".into())]).is_err());
        assert!(matches!(read_paired(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
