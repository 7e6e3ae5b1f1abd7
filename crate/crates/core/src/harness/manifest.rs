//! Sample lists: one `corrupted<TAB>mask<TAB>ground-truth` line per sample,
//! paths relative to the manifest's directory.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.tsv";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Triplet {
    pub corrupted: PathBuf,
    pub mask: PathBuf,
    pub gt: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<Triplet>,
}

impl Manifest {
    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let body = line.trim_end_matches(['\n', '\r']);
            if !body.is_empty() {
                let cols: Vec<&str> = body.split('\t').collect();
                let [c, m, g] = cols.as_slice() else {
                    return Err(Error::Parse {
                        offset,
                        msg: format!("expected 3 tab-separated paths, found {}", cols.len()),
                    });
                };
                entries.push(Triplet {
                    corrupted: PathBuf::from(c),
                    mask: PathBuf::from(m),
                    gt: PathBuf::from(g),
                });
            }
            offset += line.len();
        }
        Ok(Self {
            root: root.to_path_buf(),
            entries,
        })
    }

    /// Reads a manifest file, or `manifest.tsv` inside a directory.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_NAME) } else { path.to_path_buf() };
        let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &root)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&format!("{}\t{}\t{}\n", e.corrupted.display(), e.mask.display(), e.gt.display()));
        }
        s
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let text = "a/c0.ppm\ta/m0.pgm\ta/g0.ppm\nb\tc\td\n";
        let m = Manifest::parse(text, Path::new("/x")).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.resolve(&m.entries[1].gt), PathBuf::from("/x/d"));
        assert_eq!(m.to_text(), text);
        assert!(matches!(Manifest::parse("a\tb\n", Path::new(".")), Err(Error::Parse { offset: 0, .. })));
    }
}
