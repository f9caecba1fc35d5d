use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ListPair;
use crate::{Error, ItemId, Result};

/// One line of a dataset file: `list_id<TAB>item item ...`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawList {
    pub id: String,
    pub items: Vec<u64>,
}

impl RawList {
    pub fn new(id: impl Into<String>, items: Vec<u64>) -> Self {
        RawList {
            id: id.into(),
            items,
        }
    }
}

fn open(path: &Path) -> Result<BufReader<fs::File>> {
    fs::File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// Yields `(line_number, line)` for every non-blank line, numbering from 1.
fn lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let mut out = Vec::new();
    for (idx, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push((idx + 1, line));
        }
    }
    Ok(out)
}

fn parse_ids<T: std::str::FromStr>(path: &Path, line: usize, field: &str) -> Result<Vec<T>> {
    field
        .split_whitespace()
        .map(|tok| {
            tok.parse::<T>().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("invalid item id `{tok}`"),
            })
        })
        .collect()
}

fn missing_tab(path: &Path, line: usize) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: "expected `id<TAB>items`".into(),
    }
}

/// Reads a dataset file, one list per line, preserving order.
pub fn load_raw_lists(path: impl AsRef<Path>) -> Result<Vec<RawList>> {
    let path = path.as_ref();
    lines(path)?
        .into_iter()
        .map(|(no, line)| {
            let (id, items) = line.split_once('\t').ok_or_else(|| missing_tab(path, no))?;
            Ok(RawList {
                id: id.to_string(),
                items: parse_ids(path, no, items)?,
            })
        })
        .collect()
}

pub fn write_raw_lists(path: impl AsRef<Path>, lists: &[RawList]) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    for list in lists {
        let items: Vec<String> = list.items.iter().map(u64::to_string).collect();
        writeln!(w, "{}\t{}", list.id, items.join(" ")).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads `item_id<TAB>category_id` lines.
pub fn read_category_map(path: impl AsRef<Path>) -> Result<Vec<(u64, u64)>> {
    let path = path.as_ref();
    lines(path)?
        .into_iter()
        .map(|(no, line)| {
            let (item, cat) = line.split_once('\t').ok_or_else(|| missing_tab(path, no))?;
            let parse = |s: &str| {
                s.trim().parse::<u64>().map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    line: no,
                    message: format!("invalid id `{s}`"),
                })
            };
            Ok((parse(item)?, parse(cat)?))
        })
        .collect()
}

pub fn write_category_map(path: impl AsRef<Path>, entries: &[(u64, u64)]) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    for (item, cat) in entries {
        writeln!(w, "{item}\t{cat}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Sidecar map from dense internal ids to the external ids of the source file.
pub fn write_item_index(path: impl AsRef<Path>, external: &[u64]) -> Result<()> {
    let entries: Vec<(u64, u64)> = external
        .iter()
        .enumerate()
        .map(|(i, &e)| (i as u64, e))
        .collect();
    write_category_map(path, &entries)
}

/// Inverse of [`write_item_index`]; returns external ids indexed by dense id.
pub fn read_item_index(path: impl AsRef<Path>) -> Result<Vec<u64>> {
    let path = path.as_ref();
    let entries = read_category_map(path)?;
    let mut external = vec![0u64; entries.len()];
    let mut seen = vec![false; entries.len()];
    for (dense, ext) in entries {
        let slot = dense as usize;
        if slot >= external.len() || seen[slot] {
            return Err(Error::Checkpoint(format!(
                "{}: item index is not a dense permutation",
                path.display()
            )));
        }
        external[slot] = ext;
        seen[slot] = true;
    }
    Ok(external)
}

/// Split file line: `id<TAB>input items<TAB>target items`.
pub fn write_split(path: impl AsRef<Path>, pairs: &[ListPair]) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let join = |v: &[ItemId]| v.iter().map(u32::to_string).collect::<Vec<_>>().join(" ");
    for pair in pairs {
        writeln!(w, "{}\t{}\t{}", pair.id, join(&pair.input), join(&pair.target))
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_split(path: impl AsRef<Path>) -> Result<Vec<ListPair>> {
    let path = path.as_ref();
    lines(path)?
        .into_iter()
        .map(|(no, line)| {
            let mut fields = line.splitn(3, '\t');
            let (Some(id), Some(x), Some(y)) = (fields.next(), fields.next(), fields.next())
            else {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: no,
                    message: "expected `id<TAB>input<TAB>target`".into(),
                });
            };
            Ok(ListPair {
                id: id.to_string(),
                input: parse_ids(path, no, x)?,
                target: parse_ids(path, no, y)?,
            })
        })
        .collect()
}

/// Written next to the three split files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub counts: [usize; 3],
    pub files: [PathBuf; 3],
    pub num_items: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn parses_one_list_per_line() {
        let f = write("L1\t4 7 7 9\nL2\t1\n");
        let lists = load_raw_lists(f.path()).unwrap();
        assert_eq!(lists.len(), 2);
        assert_eq!(lists[0].id, "L1");
        assert_eq!(lists[0].items, vec![4, 7, 7, 9]);
        assert_eq!(lists[1].items, vec![1]);
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let f = write("");
        assert!(load_raw_lists(f.path()).unwrap().is_empty());
    }

    #[test]
    fn bad_token_reports_line_number() {
        let f = write("L1\t1 2\nL2\t4 x 9\n");
        match load_raw_lists(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn split_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.tsv");
        let mut pair = ListPair::new(vec![3, 1, 4], vec![1, 5]);
        pair.id = "L7".into();
        write_split(&path, std::slice::from_ref(&pair)).unwrap();
        assert_eq!(read_split(&path).unwrap(), vec![pair]);
    }

    #[test]
    fn item_index_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("items.tsv");
        write_item_index(&path, &[40, 7, 1000]).unwrap();
        assert_eq!(read_item_index(&path).unwrap(), vec![40, 7, 1000]);
    }
}
