use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use traverse_core::dcgan::{ArchConfig, GanConfig};
use traverse_core::heads::{FeatureSubset, HeadConfig, TemporalConfig};
use traverse_core::invgen::InvGenConfig;
use traverse_core::synthworld::{DatasetCounts, SequenceSpec};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub run: RunSection,
    pub synth: SynthSection,
    pub data: DataSection,
    pub gan: GanConfig,
    pub invgen: InvGenConfig,
    pub head: HeadSection,
    pub temporal: TemporalConfig,
    pub eval: EvalSection,
    pub stream: StreamSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub dir: PathBuf,
    /// Added to every stage seed, so one number reseeds the whole run.
    pub seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { dir: "runs/default".into(), seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub train_pos: usize,
    pub train_neg: usize,
    pub val_pos: usize,
    pub val_neg: usize,
    pub test_pos: usize,
    pub test_neg: usize,
    pub sequences: usize,
    pub sequence_length: usize,
    pub frame_period_s: f64,
    pub drive_frames: usize,
    /// Right-view offset in pixels; 0 writes a mono dataset.
    pub stereo_baseline_px: u32,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            train_pos: 400,
            train_neg: 400,
            val_pos: 100,
            val_neg: 100,
            test_pos: 200,
            test_neg: 200,
            sequences: 45,
            sequence_length: 30,
            frame_period_s: 1.0 / 3.0,
            drive_frames: 2300,
            stereo_baseline_px: 4,
        }
    }
}

impl SynthSection {
    pub fn counts(&self) -> DatasetCounts {
        DatasetCounts {
            train_pos: self.train_pos,
            train_neg: self.train_neg,
            val_pos: self.val_pos,
            val_neg: self.val_neg,
            test_pos: self.test_pos,
            test_neg: self.test_neg,
        }
    }

    pub fn sequence_spec(&self) -> SequenceSpec {
        SequenceSpec { count: self.sequences, length: self.sequence_length, frame_period_s: self.frame_period_s }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchName {
    /// 128 px, 100-dim latent.
    Paper,
    /// 32 px, 100-dim latent.
    Desk,
    /// 16 px, 8-dim latent.
    Reduced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub arch: ArchName,
    /// Automatically annotated positives used for the GAN and InvGen stages.
    pub gan_positives: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { arch: ArchName::Desk, gan_positives: 2000 }
    }
}

impl DataSection {
    pub fn arch(&self, channels: usize) -> ArchConfig {
        match self.arch {
            ArchName::Paper => ArchConfig::paper(channels),
            ArchName::Desk => ArchConfig::desk(channels),
            ArchName::Reduced => ArchConfig::reduced(channels),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadSection {
    pub subset: FeatureSubset,
    pub max_epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub patience: usize,
    pub seed: u64,
}

impl Default for HeadSection {
    fn default() -> Self {
        let h = HeadConfig::default();
        Self {
            subset: FeatureSubset::ALL,
            max_epochs: h.max_epochs,
            batch: h.batch,
            lr: h.lr,
            patience: h.patience,
            seed: h.seed,
        }
    }
}

impl HeadSection {
    pub fn config(&self, run_seed: u64) -> HeadConfig {
        HeadConfig {
            max_epochs: self.max_epochs,
            batch: self.batch,
            lr: self.lr,
            patience: self.patience,
            seed: self.seed.wrapping_add(run_seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Training-set sizes for the data-efficiency study; empty skips it.
    pub efficiency_counts: Vec<usize>,
    pub efficiency_seeds: Vec<u64>,
    /// Test frames averaged into the saliency map.
    pub saliency_frames: usize,
    pub bench_warmup: usize,
    pub bench_iters: usize,
    /// Latent-search steps for the iterative inversion benchmark.
    pub backprop_steps: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            efficiency_counts: vec![100, 200, 400, 800],
            efficiency_seeds: vec![1, 2, 3],
            saliency_frames: 100,
            bench_warmup: 5,
            bench_iters: 50,
            backprop_steps: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamSection {
    /// Inference rate cap; 0 disables the cap.
    pub rate_hz: f64,
    pub threshold: f64,
    pub hysteresis_k: usize,
}

impl Default for StreamSection {
    fn default() -> Self {
        Self { rate_hz: 3.0, threshold: 0.5, hysteresis_k: 2 }
    }
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let c: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    fn validate(&self) -> Result<(), CliError> {
        let bad = |key: &str, why: &str| Err(CliError::Config(format!("invalid value for `{key}`: {why}")));
        if self.stream.hysteresis_k == 0 {
            return bad("stream.hysteresis_k", "must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.stream.threshold) {
            return bad("stream.threshold", "must lie in [0, 1]");
        }
        if !(self.stream.rate_hz >= 0.0) {
            return bad("stream.rate_hz", "must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.temporal.lambda) {
            return bad("temporal.lambda", "must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.invgen.lambda) {
            return bad("invgen.lambda", "must lie in [0, 1]");
        }
        if !(self.synth.frame_period_s > 0.0) {
            return bad("synth.frame_period_s", "must be positive");
        }
        if self.data.gan_positives == 0 {
            return bad("data.gan_positives", "must be positive");
        }
        for (key, v) in [
            ("gan.batch", self.gan.batch),
            ("invgen.batch", self.invgen.batch),
            ("head.batch", self.head.batch),
            ("temporal.batch", self.temporal.batch),
            ("temporal.window", self.temporal.window),
            ("eval.bench_iters", self.eval.bench_iters),
            ("eval.backprop_steps", self.eval.backprop_steps),
        ] {
            if v == 0 {
                return bad(key, "must be positive");
            }
        }
        Ok(())
    }

    /// Stage configs with the run seed folded into their own seeds.
    pub fn gan_config(&self) -> GanConfig {
        GanConfig { seed: self.gan.seed.wrapping_add(self.run.seed), ..self.gan }
    }

    pub fn invgen_config(&self) -> InvGenConfig {
        InvGenConfig { seed: self.invgen.seed.wrapping_add(self.run.seed), ..self.invgen }
    }

    pub fn temporal_config(&self) -> TemporalConfig {
        TemporalConfig { seed: self.temporal.seed.wrapping_add(self.run.seed), ..self.temporal }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = Config::default();
        assert_eq!(Config::parse(&c.to_toml()).unwrap(), c);
        assert_eq!(Config::parse("").unwrap(), c);
    }

    #[test]
    fn errors_name_the_key() {
        let e = Config::parse("[gan]\nepochz = 3\n").unwrap_err().to_string();
        assert!(e.contains("epochz"), "{e}");
        let e = Config::parse("[stream]\nhysteresis_k = 0\n").unwrap_err().to_string();
        assert!(e.contains("stream.hysteresis_k"), "{e}");
        let e = Config::parse("[head]\nlr = \"fast\"\n").unwrap_err().to_string();
        assert!(e.contains("lr"), "{e}");
        let e = Config::parse("[head]\nsubset = \"R+Q\"\n").unwrap_err().to_string();
        assert!(e.contains("subset"), "{e}");
    }
}
