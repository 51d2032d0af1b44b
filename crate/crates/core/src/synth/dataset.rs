use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Hierarchical,
    Multilabel,
    Segmentation,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Hierarchical => "hierarchical",
            Self::Multilabel => "multilabel",
            Self::Segmentation => "segmentation",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hierarchical" => Ok(Self::Hierarchical),
            "multilabel" => Ok(Self::Multilabel),
            "segmentation" => Ok(Self::Segmentation),
            other => Err(Error::UnknownTaskKind(other.to_string())),
        }
    }
}

/// Coarse/fine structure of a hierarchical label space: fine class `f`
/// belongs to coarse group `f / fine_per_coarse`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hierarchy {
    pub coarse: usize,
    pub fine_per_coarse: usize,
}

impl Hierarchy {
    pub fn coarse_of(&self, fine: usize) -> usize {
        fine / self.fine_per_coarse
    }
}

/// Shapes and label partition shared by every split of a dataset.
///
/// Masks run over the last target dimension (labels or per-pixel classes).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskInfo {
    pub task: TaskKind,
    pub input_shape: Vec<usize>,
    pub pe_dim: usize,
    pub target_shape: Vec<usize>,
    pub known_mask: Vec<bool>,
    pub unknown_mask: Vec<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hierarchy: Option<Hierarchy>,
}

impl TaskInfo {
    pub fn classes(&self) -> usize {
        *self.target_shape.last().expect("target has rank >= 1")
    }

    /// Indices of the unknown labels.
    pub fn unknown_labels(&self) -> Vec<usize> {
        self.unknown_mask
            .iter()
            .enumerate()
            .filter_map(|(i, &u)| u.then_some(i))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub input: Tensor,
    pub pe: Tensor,
    pub target: Tensor,
}

/// A generated dataset with its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub info: TaskInfo,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
    /// Generator configuration, with every default filled in.
    pub generator: serde_json::Value,
    pub seed: u64,
}

pub const MAGIC: &[u8; 4] = b"PLDS";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    info: TaskInfo,
    generator: serde_json::Value,
    seed: u64,
    counts: [usize; 3],
}

impl Dataset {
    pub fn splits(&self) -> [&[Example]; 3] {
        [&self.train, &self.val, &self.test]
    }

    /// Provenance document: task layout, generator config, seed and split
    /// sizes.
    pub fn provenance(&self) -> serde_json::Value {
        serde_json::json!({
            "task_kind": self.info.task,
            "info": self.info,
            "generator": self.generator,
            "seed": self.seed,
            "counts": {"train": self.train.len(), "val": self.val.len(), "test": self.test.len()},
        })
    }

    /// `"PLDS" | version u32 | header_len u32 | JSON header | f32 values`,
    /// each example stored as input, partial evidence, target.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            info: self.info.clone(),
            generator: self.generator.clone(),
            seed: self.seed,
            counts: [self.train.len(), self.val.len(), self.test.len()],
        };
        let text = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(&text);
        for ex in self.splits().into_iter().flatten() {
            for t in [&ex.input, &ex.pe, &ex.target] {
                for v in t.values() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::NotDataset);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let text = bytes
            .get(12..12 + len)
            .ok_or_else(|| Error::Header("truncated header".into()))?;
        let header: Header = serde_json::from_slice(text).map_err(|e| Error::Header(e.to_string()))?;
        let info = header.info;
        let sizes = [
            info.input_shape.iter().product::<usize>(),
            info.pe_dim,
            info.target_shape.iter().product::<usize>(),
        ];
        let per_example: usize = sizes.iter().sum();
        let total: usize = header.counts.iter().sum();
        let payload = &bytes[12 + len..];
        if payload.len() != per_example * total * 4 {
            return Err(Error::PayloadLength {
                expected: per_example * total * 4,
                actual: payload.len(),
            });
        }
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let mut chunks = values.chunks_exact(per_example);
        let mut split = |n: usize| -> Result<Vec<Example>> {
            (0..n)
                .map(|_| {
                    let v = chunks.next().expect("length checked");
                    let (a, rest) = v.split_at(sizes[0]);
                    let (b, c) = rest.split_at(sizes[1]);
                    Ok(Example {
                        input: Tensor::new(&info.input_shape, a.to_vec())?,
                        pe: Tensor::new(&[info.pe_dim], b.to_vec())?,
                        target: Tensor::new(&info.target_shape, c.to_vec())?,
                    })
                })
                .collect()
        };
        let train = split(header.counts[0])?;
        let val = split(header.counts[1])?;
        let test = split(header.counts[2])?;
        Ok(Self {
            info,
            train,
            val,
            test,
            generator: header.generator,
            seed: header.seed,
        })
    }

    /// Writes `dataset.bin` and `dataset.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("dataset.bin"), self.to_bytes()?)?;
        fs::write(
            dir.join("dataset.json"),
            serde_json::to_string_pretty(&self.provenance())? + "\n",
        )?;
        Ok(())
    }

    /// Reads a dataset from a `dataset.bin` file or a directory holding one.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = if path.is_dir() {
            path.join("dataset.bin")
        } else {
            path.to_path_buf()
        };
        Self::from_bytes(&fs::read(file)?)
    }
}
