use std::fmt;
use std::path::{Path, PathBuf};

use crate::error::{CtsError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(CtsError::usage(format!("split must be train, val or test, got `{}`", other))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub split: Split,
    /// Relative to the manifest root unless absolute.
    pub image: PathBuf,
    pub mask: PathBuf,
}

/// Dataset description: class and channel counts plus one image/mask pair
/// per line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub classes: usize,
    pub channels: usize,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.txt";

impl DatasetManifest {
    pub fn render(&self) -> String {
        let mut s = format!("cts-manifest v1 classes={} channels={}\n", self.classes, self.channels);
        for e in &self.entries {
            s.push_str(&format!("{}\t{}\t{}\n", e.split, e.image.display(), e.mask.display()));
        }
        s
    }

    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let bad = |line: usize, msg: String| CtsError::data(format!("manifest line {}: {}", line, msg));
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| bad(1, "empty manifest".into()))?;
        let mut words = header.split_whitespace();
        if words.next() != Some("cts-manifest") || words.next() != Some("v1") {
            return Err(bad(1, format!("expected `cts-manifest v1 ...`, got `{}`", header)));
        }
        let (mut classes, mut channels) = (None, None);
        for w in words {
            let (k, v) = w.split_once('=').ok_or_else(|| bad(1, format!("bad header field `{}`", w)))?;
            let n: usize = v.parse().map_err(|_| bad(1, format!("bad number in `{}`", w)))?;
            match k {
                "classes" => classes = Some(n),
                "channels" => channels = Some(n),
                _ => return Err(bad(1, format!("unknown header field `{}`", k))),
            }
        }
        let classes = classes.ok_or_else(|| bad(1, "header lacks classes=".into()))?;
        let channels = channels.ok_or_else(|| bad(1, "header lacks channels=".into()))?;
        if classes < 2 || classes > 256 {
            return Err(bad(1, format!("classes must be in 2..=256, got {}", classes)));
        }
        if channels != 1 && channels != 3 {
            return Err(bad(1, format!("channels must be 1 or 3, got {}", channels)));
        }
        let mut entries = Vec::new();
        for (i, line) in lines {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(bad(i + 1, "expected `<split>\\t<image>\\t<mask>`".into()));
            }
            let split = Split::parse(f[0]).map_err(|e| bad(i + 1, e.to_string()))?;
            entries.push(ManifestEntry { split, image: f[1].into(), mask: f[2].into() });
        }
        Ok(DatasetManifest { root: root.to_path_buf(), classes, channels, entries })
    }

    /// Reads `path`, or `path/manifest.txt` when `path` is a directory.
    pub fn read(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = std::fs::read_to_string(&file).map_err(|e| CtsError::io(&file, e))?;
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        DatasetManifest::parse(&text, &root)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render()).map_err(|e| CtsError::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }
}
