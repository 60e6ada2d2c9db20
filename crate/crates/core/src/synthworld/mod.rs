//! Deterministic synthetic fisheye-corridor scenes with known traversability.
//!
//! Scenes are layered 2-D renderings: a perspective floor and wall wedges, an
//! optional obstacle sprite, then a radial fisheye warp. Every pixel is a pure
//! function of the [`SceneSpec`], so re-rendering is bit-identical.
//!
//! The upper 32 bits of [`SceneSpec::seed`] select the environment style
//! (floor and wall colors, tiling, door layout) and the full seed selects
//! per-frame nuisance (texture, reflections, sensor noise).

mod generate;
mod scene;

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use generate::{
    approach_sequence, env_name, env_seed, make_dataset, random_scene, scripted_scenarios, DatasetCounts,
    DatasetPlan, PlannedSession, Scenario, SequenceSpec, SynthSequence, NUM_ENVS,
};

/// Rendered frame edge length in pixels.
pub const FRAME_SIZE: usize = 128;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("scene field `{field}` out of range: {value}")]
    OutOfRange { field: &'static str, value: f64 },
    #[error("dataset count `{0}` must be positive")]
    EmptyCount(&'static str),
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObstacleKind {
    Box,
    DropOff,
    GlassGlare,
    /// A dark band cast across the floor; never blocks the robot.
    ShadowBand,
}

impl ObstacleKind {
    pub const ALL: [ObstacleKind; 4] = [
        ObstacleKind::Box,
        ObstacleKind::DropOff,
        ObstacleKind::GlassGlare,
        ObstacleKind::ShadowBand,
    ];

    pub fn blocks(self) -> bool {
        !matches!(self, ObstacleKind::ShadowBand)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub kind: ObstacleKind,
    /// 0 is touching the robot, 1 is at the far end of the corridor.
    pub distance: f64,
    /// Horizontal offset as a fraction of the corridor width.
    pub lateral_offset: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    /// Corridor width as a fraction of the image width, in (0, 1].
    pub corridor_width: f64,
    pub obstacle: Option<Obstacle>,
    /// Global illumination gain in [0.3, 1.0].
    pub lighting: f64,
    pub stereo_baseline_px: u32,
}

impl SceneSpec {
    pub fn open(seed: u64) -> Self {
        Self {
            seed,
            corridor_width: 0.6,
            obstacle: None,
            lighting: 0.8,
            stereo_baseline_px: 0,
        }
    }

    pub fn with_obstacle(mut self, kind: ObstacleKind, distance: f64, lateral_offset: f64) -> Self {
        self.obstacle = Some(Obstacle {
            kind,
            distance,
            lateral_offset,
        });
        self
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let check = |field, value: f64, ok: bool| {
            if ok && value.is_finite() {
                Ok(())
            } else {
                Err(SynthError::OutOfRange { field, value })
            }
        };
        check(
            "corridor_width",
            self.corridor_width,
            self.corridor_width > 0.0 && self.corridor_width <= 1.0,
        )?;
        check(
            "lighting",
            self.lighting,
            (0.3..=1.0).contains(&self.lighting),
        )?;
        if let Some(o) = &self.obstacle {
            check("obstacle.distance", o.distance, (0.0..=1.0).contains(&o.distance))?;
            check(
                "obstacle.lateral_offset",
                o.lateral_offset,
                (-0.5..=0.5).contains(&o.lateral_offset),
            )?;
        }
        Ok(())
    }

    /// Traversable iff there is no blocking obstacle within half the corridor.
    pub fn traversable(&self) -> bool {
        match &self.obstacle {
            None => true,
            Some(o) => !o.kind.blocks() || o.distance > 0.5,
        }
    }

    pub fn environment(&self) -> u32 {
        (self.seed >> 32) as u32
    }
}

/// A rendered observation, channels first (`[n, H, W]`), values in [−1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub pixels: Array3<f32>,
    pub traversable: bool,
}

/// Renders the 3-channel left view.
pub fn render(spec: &SceneSpec) -> Result<Rendered, SynthError> {
    spec.validate()?;
    Ok(Rendered {
        pixels: scene::render_view(spec, 0.0),
        traversable: spec.traversable(),
    })
}

/// Renders a 6-channel stereo pair: left RGB then right RGB.
pub fn render_stereo(spec: &SceneSpec) -> Result<Rendered, SynthError> {
    spec.validate()?;
    let left = scene::render_view(spec, 0.0);
    let right = scene::render_view(spec, spec.stereo_baseline_px as f64 / FRAME_SIZE as f64);
    let pixels = ndarray::concatenate(ndarray::Axis(0), &[left.view(), right.view()])
        .expect("matching view shapes");
    Ok(Rendered {
        pixels,
        traversable: spec.traversable(),
    })
}

/// Pixel-space horizontal extent `[x0, x1)` and row range of the obstacle in
/// the unwarped scene, used by tests that need the ground-truth footprint.
pub fn obstacle_box(spec: &SceneSpec) -> Option<(f64, f64, f64, f64)> {
    scene::obstacle_extent(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn label_rule() {
        assert!(render(&SceneSpec::open(1)).unwrap().traversable);
        let near = SceneSpec::open(1).with_obstacle(ObstacleKind::Box, 0.1, 0.0);
        assert!(!render(&near).unwrap().traversable);
        let far = SceneSpec::open(1).with_obstacle(ObstacleKind::Box, 0.8, 0.0);
        assert!(far.traversable());
        let shadow = SceneSpec::open(1).with_obstacle(ObstacleKind::ShadowBand, 0.1, 0.0);
        assert!(shadow.traversable());
    }

    #[test]
    fn out_of_range_names_field() {
        let mut s = SceneSpec::open(0);
        s.lighting = 0.1;
        assert!(matches!(
            render(&s),
            Err(SynthError::OutOfRange { field: "lighting", value }) if value == 0.1
        ));
        let s = SceneSpec::open(0).with_obstacle(ObstacleKind::Box, 1.5, 0.0);
        assert!(matches!(
            render(&s),
            Err(SynthError::OutOfRange { field: "obstacle.distance", .. })
        ));
    }

    #[test]
    fn seed_renders_identically() {
        let s = SceneSpec::open(7).with_obstacle(ObstacleKind::GlassGlare, 0.3, 0.2);
        let a = render(&s).unwrap();
        let b = render(&s).unwrap();
        assert_eq!(a.pixels.shape(), &[3, FRAME_SIZE, FRAME_SIZE]);
        let bytes = |r: &Rendered| r.pixels.iter().flat_map(|v| v.to_bits().to_le_bytes()).collect::<Vec<_>>();
        assert_eq!(bytes(&a), bytes(&b));
    }

    #[test]
    fn zero_baseline_stereo_is_duplicated() {
        let s = SceneSpec::open(9).with_obstacle(ObstacleKind::Box, 0.2, 0.1);
        let r = render_stereo(&s).unwrap();
        assert_eq!(r.pixels.shape(), &[6, FRAME_SIZE, FRAME_SIZE]);
        let l = r.pixels.slice(ndarray::s![0..3, .., ..]);
        let rr = r.pixels.slice(ndarray::s![3..6, .., ..]);
        assert_eq!(l, rr);
    }

    /// Horizontal offset best matching `left[cols]` inside `right`.
    fn best_shift(left: &[f32], right: &[f32], cols: std::ops::Range<i64>, max: i64) -> i64 {
        let n = left.len() as i64;
        let mut best = (f64::NEG_INFINITY, 0);
        for s in -max..=max {
            let mut acc = 0.0;
            let mut cnt = 0.0;
            for x in cols.clone() {
                let xr = x - s;
                if xr >= 0 && xr < n {
                    let d = (left[x as usize] - right[xr as usize]) as f64;
                    acc -= d * d;
                    cnt += 1.0;
                }
            }
            let score = acc / cnt;
            if score > best.0 {
                best = (score, s);
            }
        }
        best.1
    }

    #[test]
    fn near_obstacle_has_more_parallax_than_background() {
        let mut s = SceneSpec::open(21).with_obstacle(ObstacleKind::Box, 0.1, 0.0);
        s.stereo_baseline_px = 4;
        let r = render_stereo(&s).unwrap();
        let (x0, x1, y0, y1) = obstacle_box(&s).unwrap();
        let row_band = |c0: usize, rows: std::ops::Range<usize>| -> Vec<f32> {
            let mut out = vec![0.0; FRAME_SIZE];
            for y in rows.clone() {
                for (x, o) in out.iter_mut().enumerate() {
                    for c in c0..c0 + 3 {
                        *o += r.pixels[[c, y, x]];
                    }
                }
            }
            out
        };
        let obj_rows = (y0 as usize + 2)..(y1 as usize).min(FRAME_SIZE - 2);
        let obj_cols = (x0 as i64 + 2)..(x1 as i64 - 2);
        let obs = best_shift(&row_band(0, obj_rows.clone()), &row_band(3, obj_rows), obj_cols, 24);
        let bg = best_shift(&row_band(0, 20..34), &row_band(3, 20..34), 30..98, 24);
        assert!(bg > 0, "background shift {bg}");
        assert!(obs > 2 * bg, "obstacle {obs} background {bg}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn rendering_is_pure_and_bounded(
            seed in any::<u64>(),
            width in 0.2f64..1.0,
            light in 0.3f64..1.0,
            kind in 0usize..5,
            dist in 0.0f64..1.0,
            lat in -0.5f64..0.5,
        ) {
            let mut s = SceneSpec::open(seed);
            s.corridor_width = width;
            s.lighting = light;
            if kind < 4 {
                s = s.with_obstacle(ObstacleKind::ALL[kind], dist, lat);
            }
            let a = render(&s).unwrap();
            let b = render(&s).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!(a.pixels.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }
}
