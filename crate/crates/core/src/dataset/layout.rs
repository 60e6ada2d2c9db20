//! On-disk dataset layout.
//!
//! ```text
//! DIR/<env>/<session>/frames/NNNNNN.png      (mono)
//! DIR/<env>/<session>/left/NNNNNN.png        (stereo, shared indices)
//! DIR/<env>/<session>/right/NNNNNN.png
//! DIR/<env>/<session>/odometry.csv           frame_index,timestamp_s,velocity_mps
//! DIR/labels.csv                             env,session,frame_index,label,provenance
//! DIR/truth.csv                              env,session,frame_index,traversable
//! DIR/manifest.json
//! ```
//!
//! `truth.csv` is only written for generated data; it is never consulted by
//! the annotation pipeline.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{concatenate, Array3, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::preprocess::{preprocess, to_u8, RawImage};
use super::{DatasetError, Frame, OdometryEntry, Provenance, SessionLog, SplitAssignment};
use crate::nn::params::hex;

pub const MANIFEST: &str = "manifest.json";
pub const LABELS: &str = "labels.csv";
pub const TRUTH: &str = "truth.csv";
pub const ODOMETRY: &str = "odometry.csv";
const LABELS_HEADER: &str = "env,session,frame_index,label,provenance";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionKind {
    /// Independent hand-labeled snapshots (robot placed, not driving).
    Labeled,
    /// Continuous drive through traversable space.
    Drive,
    /// Approach toward an obstacle, slowing to a stop.
    Sequence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub env: String,
    pub session: String,
    pub kind: SessionKind,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub stereo: bool,
    pub frame_size: usize,
    /// Velocity used by auto-annotation: linear speed only.
    pub annotation_speed: String,
    pub counts: BTreeMap<String, usize>,
    pub split: SplitAssignment,
    pub sessions: Vec<SessionMeta>,
    /// SHA-256 per relative file path.
    pub checksums: BTreeMap<String, String>,
}

impl Manifest {
    pub fn read(root: &Path) -> Result<Self, DatasetError> {
        let path = root.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| DatasetError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| DatasetError::Malformed {
            file: path,
            reason: e.to_string(),
        })
    }

    /// Digest over all file checksums, a compact fingerprint of the dataset.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.checksums {
            h.update(k.as_bytes());
            h.update(v.as_bytes());
        }
        hex(&h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelRow {
    pub env: String,
    pub session: String,
    pub frame_index: usize,
    pub label: f64,
    pub provenance: Provenance,
}

impl LabelRow {
    fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{}\n",
            self.env,
            self.session,
            self.frame_index,
            self.label,
            self.provenance.as_str()
        )
    }
}

pub fn session_dir(root: &Path, env: &str, session: &str) -> PathBuf {
    root.join(env).join(session)
}

pub fn frame_file(index: usize) -> String {
    format!("{index:06}.png")
}

fn sha256_file(path: &Path) -> Result<String, DatasetError> {
    let bytes = fs::read(path).map_err(|e| DatasetError::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn write(path: &Path, text: &str) -> Result<(), DatasetError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| DatasetError::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| DatasetError::io(path, e))
}

fn malformed(file: &Path, reason: impl Into<String>) -> DatasetError {
    DatasetError::Malformed {
        file: file.to_path_buf(),
        reason: reason.into(),
    }
}

/// Single writer that accumulates labels and checksums and emits the
/// manifest last.
pub struct DatasetWriter {
    root: PathBuf,
    stereo: bool,
    labels: Vec<LabelRow>,
    truth: Vec<(String, String, usize, bool)>,
    sessions: Vec<SessionMeta>,
    checksums: BTreeMap<String, String>,
}

impl DatasetWriter {
    pub fn create(root: &Path, stereo: bool) -> Result<Self, DatasetError> {
        fs::create_dir_all(root).map_err(|e| DatasetError::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            stereo,
            labels: Vec::new(),
            truth: Vec::new(),
            sessions: Vec::new(),
            checksums: BTreeMap::new(),
        })
    }

    fn record(&mut self, path: &Path) -> Result<(), DatasetError> {
        let rel = path
            .strip_prefix(&self.root)
            .expect("inside root")
            .to_string_lossy()
            .replace('\\', "/");
        let sum = sha256_file(path)?;
        self.checksums.insert(rel, sum);
        Ok(())
    }

    /// Writes the frames and odometry of one session. Each frame has 3
    /// channels (mono) or 6 (stereo), normalized to [−1, 1].
    pub fn write_session(
        &mut self,
        env: &str,
        session: &str,
        kind: SessionKind,
        frames: &[Array3<f32>],
        odometry: &[OdometryEntry],
    ) -> Result<(), DatasetError> {
        let dir = session_dir(&self.root, env, session);
        let views: &[(&str, usize)] = if self.stereo {
            &[("left", 0), ("right", 3)]
        } else {
            &[("frames", 0)]
        };
        for (sub, _) in views {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| DatasetError::io(&d, e))?;
        }
        for (i, px) in frames.iter().enumerate() {
            for (sub, c0) in views {
                let path = dir.join(sub).join(frame_file(i));
                to_u8(px, *c0).write_png(&path)?;
                self.record(&path)?;
            }
        }
        let mut csv = String::from("frame_index,timestamp_s,velocity_mps\n");
        for e in odometry {
            let v = e.velocity_mps.map(|v| format!("{v}")).unwrap_or_default();
            let _ = writeln!(csv, "{},{},{}", e.frame_index, e.timestamp_s, v);
        }
        let path = dir.join(ODOMETRY);
        write(&path, &csv)?;
        self.record(&path)?;
        self.sessions.push(SessionMeta {
            env: env.into(),
            session: session.into(),
            kind,
            frames: frames.len(),
        });
        Ok(())
    }

    pub fn add_label(&mut self, row: LabelRow) {
        self.labels.push(row);
    }

    pub fn add_truth(&mut self, env: &str, session: &str, frame_index: usize, traversable: bool) {
        self.truth
            .push((env.into(), session.into(), frame_index, traversable));
    }

    pub fn finish(
        mut self,
        seed: u64,
        counts: BTreeMap<String, usize>,
        split: SplitAssignment,
    ) -> Result<Manifest, DatasetError> {
        let labels_path = self.root.join(LABELS);
        write_labels(&labels_path, &self.labels)?;
        self.record(&labels_path)?;
        let mut truth = String::from("env,session,frame_index,traversable\n");
        for (e, s, i, t) in &self.truth {
            let _ = writeln!(truth, "{e},{s},{i},{}", *t as u8);
        }
        let truth_path = self.root.join(TRUTH);
        write(&truth_path, &truth)?;
        self.record(&truth_path)?;
        let manifest = Manifest {
            version: 1,
            seed,
            stereo: self.stereo,
            frame_size: super::FRAME_SIZE,
            annotation_speed: "linear".into(),
            counts,
            split,
            sessions: self.sessions,
            checksums: self.checksums,
        };
        let path = self.root.join(MANIFEST);
        write(
            &path,
            &serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
        )?;
        Ok(manifest)
    }
}

pub fn write_labels(path: &Path, rows: &[LabelRow]) -> Result<(), DatasetError> {
    let mut text = String::from(LABELS_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.to_csv());
    }
    write(path, &text)
}

pub fn append_labels(path: &Path, rows: &[LabelRow]) -> Result<(), DatasetError> {
    use std::io::Write;
    if !path.exists() {
        return write_labels(path, rows);
    }
    let mut f = fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| DatasetError::io(path, e))?;
    for r in rows {
        f.write_all(r.to_csv().as_bytes())
            .map_err(|e| DatasetError::io(path, e))?;
    }
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<Vec<LabelRow>, DatasetError> {
    let text = fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(LABELS_HEADER) {
        return Err(malformed(path, "unexpected header"));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = |what: &str| malformed(path, format!("line {}: {what}", i + 2));
            if f.len() != 5 {
                return Err(bad("expected 5 columns"));
            }
            Ok(LabelRow {
                env: f[0].into(),
                session: f[1].into(),
                frame_index: f[2].parse().map_err(|_| bad("frame_index"))?,
                label: f[3].parse().map_err(|_| bad("label"))?,
                provenance: Provenance::parse(f[4]).ok_or_else(|| bad("provenance"))?,
            })
        })
        .collect()
}

/// `(env, session, frame_index) → traversable`.
pub fn read_truth(root: &Path) -> Result<BTreeMap<(String, String, usize), bool>, DatasetError> {
    let path = root.join(TRUTH);
    let text = fs::read_to_string(&path).map_err(|e| DatasetError::io(&path, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(malformed(&path, format!("bad row `{l}`")));
            }
            let idx = f[2]
                .parse()
                .map_err(|_| malformed(&path, format!("bad index `{l}`")))?;
            Ok(((f[0].to_string(), f[1].to_string(), idx), f[3] == "1"))
        })
        .collect()
}

pub fn read_odometry(root: &Path, env: &str, session: &str) -> Result<SessionLog, DatasetError> {
    let path = session_dir(root, env, session).join(ODOMETRY);
    let text = fs::read_to_string(&path).map_err(|e| DatasetError::io(&path, e))?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = || malformed(&path, format!("line {}", i + 1));
        if f.len() != 3 {
            return Err(bad());
        }
        entries.push(OdometryEntry {
            frame_index: f[0].parse().map_err(|_| bad())?,
            timestamp_s: f[1].parse().map_err(|_| bad())?,
            velocity_mps: if f[2].is_empty() {
                None
            } else {
                Some(f[2].parse().map_err(|_| bad())?)
            },
        });
    }
    SessionLog::new(env, session, entries)
}

/// Loads and normalizes one frame (both views for stereo datasets).
pub fn load_frame(
    root: &Path,
    stereo: bool,
    env: &str,
    session: &str,
    index: usize,
) -> Result<Frame, DatasetError> {
    let dir = session_dir(root, env, session);
    let file = frame_file(index);
    let mut frame = if stereo {
        let l = preprocess(&RawImage::read_png(&dir.join("left").join(&file))?)?;
        let r = preprocess(&RawImage::read_png(&dir.join("right").join(&file))?)?;
        let px = concatenate(Axis(0), &[l.pixels.view(), r.pixels.view()]).expect("3+3");
        Frame::new(px, env)
    } else {
        preprocess(&RawImage::read_png(&dir.join("frames").join(&file))?)?
    };
    frame.source_env = env.to_string();
    Ok(frame)
}

/// Verifies every checksum in the manifest against the files on disk.
pub fn verify(root: &Path) -> Result<Manifest, DatasetError> {
    let m = Manifest::read(root)?;
    for (rel, sum) in &m.checksums {
        if rel == LABELS {
            // labels.csv grows as annotation stages append to it
            continue;
        }
        let actual = sha256_file(&root.join(rel))?;
        if &actual != sum {
            return Err(malformed(&root.join(rel), "checksum mismatch"));
        }
    }
    for s in &m.sessions {
        if m.split.split_of(&s.env).is_none() {
            return Err(malformed(
                &root.join(MANIFEST),
                format!("environment `{}` has no split", s.env),
            ));
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Split;

    #[test]
    fn session_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = DatasetWriter::create(dir.path(), false).unwrap();
        let px = Array3::from_shape_fn((3, 128, 128), |(c, y, x)| ((c + y + x) % 255) as f32 / 127.5 - 1.0);
        let odo = vec![
            OdometryEntry { frame_index: 0, timestamp_s: 0.0, velocity_mps: Some(0.5) },
            OdometryEntry { frame_index: 1, timestamp_s: 0.5, velocity_mps: None },
        ];
        w.write_session("e0", "s0", SessionKind::Drive, &[px.clone(), px.clone()], &odo).unwrap();
        w.add_label(LabelRow {
            env: "e0".into(),
            session: "s0".into(),
            frame_index: 1,
            label: 1.0,
            provenance: Provenance::Hand,
        });
        let split = SplitAssignment::check_disjoint([("e0", Split::Train)]).unwrap();
        w.finish(1, BTreeMap::new(), split).unwrap();
        let m = verify(dir.path()).unwrap();
        assert_eq!(m.sessions.len(), 1);
        let log = read_odometry(dir.path(), "e0", "s0").unwrap();
        assert_eq!(log.entries, odo);
        let f = load_frame(dir.path(), false, "e0", "s0", 1).unwrap();
        let err = f.pixels.iter().zip(px.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(err <= 0.5 / 127.5 + 1e-6);
        let labels = read_labels(&dir.path().join(LABELS)).unwrap();
        assert_eq!(labels.len(), 1);
        append_labels(&dir.path().join(LABELS), &labels).unwrap();
        assert_eq!(read_labels(&dir.path().join(LABELS)).unwrap().len(), 2);
    }

    #[test]
    fn tampered_file_fails_verification() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = DatasetWriter::create(dir.path(), false).unwrap();
        let odo = vec![OdometryEntry { frame_index: 0, timestamp_s: 0.0, velocity_mps: Some(0.5) }];
        w.write_session("e0", "s0", SessionKind::Drive, &[Array3::zeros((3, 128, 128))], &odo).unwrap();
        let split = SplitAssignment::check_disjoint([("e0", Split::Train)]).unwrap();
        w.finish(1, BTreeMap::new(), split).unwrap();
        fs::write(dir.path().join("e0/s0/odometry.csv"), "garbage").unwrap();
        assert!(verify(dir.path()).is_err());
    }
}
