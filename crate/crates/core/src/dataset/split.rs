use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DatasetError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SplitRequest {
    /// Number of environments per split, drawn with a seeded shuffle.
    Counts { train: usize, val: usize, test: usize, seed: u64 },
    /// Explicit environment lists.
    Explicit { train: Vec<String>, val: Vec<String>, test: Vec<String> },
}

/// Environment → split map. Every environment belongs to exactly one split.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub envs: BTreeMap<String, Split>,
}

impl SplitAssignment {
    pub fn split_of(&self, env: &str) -> Option<Split> {
        self.envs.get(env).copied()
    }

    pub fn envs_in(&self, split: Split) -> Vec<&str> {
        self.envs
            .iter()
            .filter(|(_, s)| **s == split)
            .map(|(e, _)| e.as_str())
            .collect()
    }

    /// Rejects any `(env, split)` observation that contradicts the map, i.e.
    /// an environment seen in two splits.
    pub fn check_disjoint<'a>(
        observations: impl IntoIterator<Item = (&'a str, Split)>,
    ) -> Result<Self, DatasetError> {
        let mut envs = BTreeMap::new();
        for (env, split) in observations {
            match envs.insert(env.to_string(), split) {
                Some(prev) if prev != split => {
                    return Err(DatasetError::Config(format!(
                        "environment `{env}` appears in both {} and {}",
                        prev.as_str(),
                        split.as_str()
                    )))
                }
                _ => {}
            }
        }
        Ok(Self { envs })
    }
}

/// Partitions the distinct environments of `envs` into train/val/test.
pub fn split_by_environment<'a>(
    envs: impl IntoIterator<Item = &'a str>,
    request: &SplitRequest,
) -> Result<SplitAssignment, DatasetError> {
    let distinct: BTreeSet<&str> = envs.into_iter().collect();
    if distinct.len() < 3 {
        return Err(DatasetError::Config(format!(
            "need at least 3 environments to split, found {}",
            distinct.len()
        )));
    }
    match request {
        SplitRequest::Counts { train, val, test, seed } => {
            let want = train + val + test;
            if want > distinct.len() || *train == 0 || *val == 0 || *test == 0 {
                return Err(DatasetError::Config(format!(
                    "cannot split {} environments into {train}/{val}/{test}",
                    distinct.len()
                )));
            }
            let mut order: Vec<&str> = distinct.into_iter().collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(*seed));
            let mut envs = BTreeMap::new();
            for (i, env) in order.into_iter().take(want).enumerate() {
                let split = if i < *train {
                    Split::Train
                } else if i < train + val {
                    Split::Val
                } else {
                    Split::Test
                };
                envs.insert(env.to_string(), split);
            }
            Ok(SplitAssignment { envs })
        }
        SplitRequest::Explicit { train, val, test } => {
            let obs = train
                .iter()
                .map(|e| (e.as_str(), Split::Train))
                .chain(val.iter().map(|e| (e.as_str(), Split::Val)))
                .chain(test.iter().map(|e| (e.as_str(), Split::Test)));
            let a = SplitAssignment::check_disjoint(obs)?;
            if let Some(unknown) = a.envs.keys().find(|e| !distinct.contains(e.as_str())) {
                return Err(DatasetError::Config(format!("unknown environment `{unknown}`")));
            }
            Ok(a)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("env_{i:02}")).collect()
    }

    #[test]
    fn nine_three_three() {
        let envs = names(15);
        let a = split_by_environment(envs.iter().map(String::as_str), &SplitRequest::Counts {
            train: 9, val: 3, test: 3, seed: 4,
        })
        .unwrap();
        assert_eq!(a.envs_in(Split::Train).len(), 9);
        assert_eq!(a.envs_in(Split::Val).len(), 3);
        assert_eq!(a.envs_in(Split::Test).len(), 3);
        assert_eq!(a.envs.len(), 15);
    }

    #[test]
    fn one_each() {
        let envs = names(3);
        let a = split_by_environment(envs.iter().map(String::as_str), &SplitRequest::Counts {
            train: 1, val: 1, test: 1, seed: 0,
        })
        .unwrap();
        for s in Split::ALL {
            assert_eq!(a.envs_in(s).len(), 1);
        }
    }

    #[test]
    fn too_few_envs() {
        let envs = names(2);
        assert!(split_by_environment(envs.iter().map(String::as_str), &SplitRequest::Counts {
            train: 1, val: 1, test: 1, seed: 0,
        })
        .is_err());
        let envs = names(5);
        assert!(split_by_environment(envs.iter().map(String::as_str), &SplitRequest::Counts {
            train: 3, val: 2, test: 1, seed: 0,
        })
        .is_err());
    }

    #[test]
    fn overlapping_env_rejected() {
        let envs = names(4);
        let r = split_by_environment(envs.iter().map(String::as_str), &SplitRequest::Explicit {
            train: vec!["env_00".into(), "env_01".into()],
            val: vec!["env_02".into()],
            test: vec!["env_01".into()],
        });
        assert!(matches!(r, Err(DatasetError::Config(m)) if m.contains("env_01")));
    }
}
