//! Single-file model container: a magic tag, a JSON metadata block, then
//! the raw little-endian bytes of every tensor in metadata order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dcgan::ArchConfig;
use crate::nn::ParamSet;
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"TRVCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} is not a checkpoint: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("checkpoint mismatch in `{field}`: expected {expected}, found {found}")]
    Mismatch {
        field: String,
        expected: String,
        found: String,
    },
    #[error("checkpoint has no parameter group `{0}`")]
    MissingGroup(String),
}

/// Training stage that produced a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Gan,
    Invgen,
    Head,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Gan => "gan",
            Stage::Invgen => "invgen",
            Stage::Head => "head",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Single,
    Temporal,
    StereoTemporal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMeta {
    pub name: String,
    /// Layer descriptions, empty for groups without a layer stack.
    pub layers: Vec<String>,
    pub tensors: Vec<TensorMeta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: u32,
    pub stage: Stage,
    pub dtype: String,
    pub arch: ArchConfig,
    pub seed: u64,
    pub epoch: usize,
    pub config: serde_json::Value,
    #[serde(default)]
    pub head_kind: Option<HeadKind>,
    #[serde(default)]
    pub feature_subset: Option<String>,
    #[serde(default)]
    pub lambda: Option<f64>,
    pub groups: Vec<GroupMeta>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    pub groups: Vec<(String, ParamSet<T>)>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(stage: Stage, arch: ArchConfig, seed: u64, epoch: usize, config: serde_json::Value) -> Self {
        Self {
            meta: CheckpointMeta {
                format: FORMAT_VERSION,
                stage,
                dtype: T::DTYPE.into(),
                arch,
                seed,
                epoch,
                config,
                head_kind: None,
                feature_subset: None,
                lambda: None,
                groups: Vec::new(),
            },
            groups: Vec::new(),
        }
    }

    pub fn add_group(&mut self, name: &str, layers: Vec<String>, params: &ParamSet<T>) {
        self.meta.groups.push(GroupMeta {
            name: name.into(),
            layers,
            tensors: params
                .iter()
                .map(|(n, t)| TensorMeta {
                    name: n.into(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        });
        self.groups.push((name.into(), params.clone()));
    }

    pub fn group(&self, name: &str) -> Result<&ParamSet<T>, CheckpointError> {
        self.groups
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p)
            .ok_or_else(|| CheckpointError::MissingGroup(name.into()))
    }

    /// Returns the named group after checking it matches `template` tensor
    /// for tensor (names and shapes).
    pub fn group_like(&self, name: &str, template: &ParamSet<T>) -> Result<ParamSet<T>, CheckpointError> {
        let g = self.group(name)?;
        if g.len() != template.len() {
            return Err(mismatch(format!("{name}.tensors"), template.len(), g.len()));
        }
        for ((tn, tt), (gn, gt)) in template.iter().zip(g.iter()) {
            if tn != gn {
                return Err(mismatch(format!("{name}.tensor"), tn, gn));
            }
            if tt.shape() != gt.shape() {
                return Err(mismatch(
                    format!("{name}.{tn}.shape"),
                    format!("{:?}", tt.shape()),
                    format!("{:?}", gt.shape()),
                ));
            }
        }
        Ok(g.clone())
    }

    pub fn expect_arch(&self, arch: &ArchConfig) -> Result<(), CheckpointError> {
        if &self.meta.arch != arch {
            return Err(mismatch(
                "arch",
                serde_json::to_string(arch).unwrap_or_default(),
                serde_json::to_string(&self.meta.arch).unwrap_or_default(),
            ));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |e| CheckpointError::Io {
            path: path.to_path_buf(),
            source: e,
        };
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        let mut buf = Vec::with_capacity(16 + meta.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        buf.extend_from_slice(&meta);
        for (_, params) in &self.groups {
            for t in params.tensors() {
                for v in t.iter() {
                    v.write_le(&mut buf);
                }
            }
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io)?;
        }
        // write-then-rename so a crash never leaves a truncated checkpoint
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(&buf).map_err(io)?;
        f.sync_all().map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|e| CheckpointError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let bad = |reason: &str| CheckpointError::Format {
            path: path.to_path_buf(),
            reason: reason.into(),
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic header"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated metadata"))?;
        let meta: CheckpointMeta =
            serde_json::from_slice(body).map_err(|e| bad(&format!("metadata: {e}")))?;
        if meta.format != FORMAT_VERSION {
            return Err(mismatch("format", FORMAT_VERSION, meta.format));
        }
        if meta.dtype != T::DTYPE {
            return Err(mismatch("dtype", T::DTYPE, &meta.dtype));
        }
        let mut pos = 16 + len;
        let mut groups = Vec::new();
        for g in &meta.groups {
            let mut params = ParamSet::new();
            for t in &g.tensors {
                let n: usize = t.shape.iter().product();
                let end = pos + n * T::BYTES;
                let raw = bytes.get(pos..end).ok_or_else(|| bad("truncated tensor data"))?;
                let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
                params.push(
                    t.name.clone(),
                    ArrayD::from_shape_vec(IxDyn(&t.shape), data).expect("length checked"),
                );
                pos = end;
            }
            groups.push((g.name.clone(), params));
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Self { meta, groups })
    }
}

fn mismatch(field: impl Into<String>, expected: impl ToString, found: impl ToString) -> CheckpointError {
    CheckpointError::Mismatch {
        field: field.into(),
        expected: expected.to_string(),
        found: found.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sample() -> Checkpoint<f32> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut p = ParamSet::new();
        p.push_normal("w", &[2, 3], 1.0, &mut rng);
        p.push_zeros("b", &[2]);
        let mut ck = Checkpoint::new(Stage::Gan, ArchConfig::reduced(3), 5, 2, serde_json::json!({"lr": 0.1}));
        ck.add_group("gen", vec!["linear 3->2".into()], &p);
        ck
    }

    #[test]
    fn roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        let back = Checkpoint::<f32>::load(&path).unwrap();
        assert_eq!(back.meta, ck.meta);
        assert_eq!(back.group("gen").unwrap(), ck.group("gen").unwrap());
    }

    #[test]
    fn rejects_dtype_and_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        sample().save(&path).unwrap();
        assert!(matches!(
            Checkpoint::<f64>::load(&path),
            Err(CheckpointError::Mismatch { field, .. }) if field == "dtype"
        ));
        let ck = Checkpoint::<f32>::load(&path).unwrap();
        let mut other = ParamSet::<f32>::new();
        other.push_zeros("w", &[3, 3]);
        other.push_zeros("b", &[2]);
        assert!(ck.group_like("gen", &other).is_err());
        assert!(ck.expect_arch(&ArchConfig::desk(3)).is_err());
        assert!(matches!(ck.group("dis"), Err(CheckpointError::MissingGroup(_))));
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(Checkpoint::<f32>::load(&path), Err(CheckpointError::Format { .. })));
    }
}
