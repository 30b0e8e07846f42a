//! Directory datasets: the manifest format, loading and identity splits.

pub mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cmft::CmftTensor;
use crate::error::{Error, Result};
use crate::model::Modality;

pub use synthetic::{generate_synthetic_dataset, GenerationSummary, SyntheticConfig, SyntheticIdentitySpec};

pub const MANIFEST: &str = "manifest.txt";

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageEntry {
    pub modality: Modality,
    pub identity: usize,
    /// Relative to the dataset root.
    pub path: PathBuf,
    /// `[h, w, c]`.
    pub shape: [usize; 3],
}

impl ImageEntry {
    pub fn manifest_line(&self) -> String {
        let [h, w, c] = self.shape;
        format!(
            "{}\t{}\t{}\t{h}\t{w}\t{c}\n",
            self.modality,
            self.identity,
            self.path.display()
        )
    }

    fn parse(line: &str) -> std::result::Result<Self, String> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(format!("expected 6 tab-separated fields, got {}", f.len()));
        }
        let modality = Modality::from_str(f[0]).map_err(|e| e.to_string())?;
        let num = |s: &str, what: &str| s.parse::<usize>().map_err(|_| format!("bad {what} {s:?}"));
        Ok(Self {
            modality,
            identity: num(f[1], "identity")?,
            path: PathBuf::from(f[2]),
            shape: [num(f[3], "height")?, num(f[4], "width")?, num(f[5], "channels")?],
        })
    }
}

/// Whether every identity must appear in both modalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairingMode {
    CrossModal,
    SingleModality,
}

/// Which identities a command works on. The first `train_identities`
/// identities in ascending order form the training split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    All,
}

/// Loaded manifest plus image contents, in manifest order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub entries: Vec<ImageEntry>,
    pub images: Vec<CmftTensor>,
}

/// Reads the manifest under `root` and every image it lists.
pub fn load_directory_dataset(root: impl AsRef<Path>, mode: PairingMode) -> Result<Dataset> {
    let root = root.as_ref();
    let mpath = root.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut entries = Vec::new();
    let mut images = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry = ImageEntry::parse(line).map_err(|detail| Error::Format {
            path: mpath.clone(),
            detail: format!("line {}: {detail}", i + 1),
        })?;
        let img = CmftTensor::read(root.join(&entry.path))?;
        if img.dims != entry.shape {
            return Err(Error::Dataset(format!(
                "{}: manifest shape {:?} but file holds {:?}",
                entry.path.display(),
                entry.shape,
                img.dims
            )));
        }
        entries.push(entry);
        images.push(img);
    }
    let ds = Dataset {
        root: root.to_path_buf(),
        entries,
        images,
    };
    if mode == PairingMode::CrossModal {
        for (id, [a, b]) in ds.counts() {
            if a == 0 || b == 0 {
                let only = if a == 0 { Modality::B } else { Modality::A };
                return Err(Error::Dataset(format!(
                    "identity {id} has images only in modality {only}; cross-modal use needs both"
                )));
            }
        }
    }
    Ok(ds)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Image counts per identity, `[A, B]`.
    pub fn counts(&self) -> BTreeMap<usize, [usize; 2]> {
        let mut out: BTreeMap<usize, [usize; 2]> = BTreeMap::new();
        for e in &self.entries {
            out.entry(e.identity).or_default()[e.modality as usize] += 1;
        }
        out
    }

    pub fn identities(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.identity).collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Identities of `split` given the training split size.
    pub fn split_identities(&self, split: Split, train_identities: usize) -> Result<Vec<usize>> {
        let ids = self.identities();
        if train_identities > ids.len() {
            return Err(Error::Config(format!(
                "train_identities = {train_identities} but the dataset has {} identities",
                ids.len()
            )));
        }
        Ok(match split {
            Split::Train => ids[..train_identities].to_vec(),
            Split::Test => ids[train_identities..].to_vec(),
            Split::All => ids,
        })
    }

    /// Entry indices of `modality` whose identity is in `ids`, in manifest order.
    pub fn indices(&self, modality: Modality, ids: &[usize]) -> Vec<usize> {
        let wanted: BTreeSet<usize> = ids.iter().copied().collect();
        (0..self.len())
            .filter(|&i| self.entries[i].modality == modality && wanted.contains(&self.entries[i].identity))
            .collect()
    }

    /// Image height and width, checked to be uniform.
    pub fn image_size(&self) -> Result<(usize, usize)> {
        let first = self
            .entries
            .first()
            .ok_or_else(|| Error::Dataset(format!("{} lists no images", self.root.display())))?;
        let [h, w, _] = first.shape;
        for e in &self.entries {
            if e.shape[0] != h || e.shape[1] != w {
                return Err(Error::Dataset(format!(
                    "{}: size {}x{} differs from {h}x{w}",
                    e.path.display(),
                    e.shape[0],
                    e.shape[1]
                )));
            }
        }
        Ok((h, w))
    }
}
