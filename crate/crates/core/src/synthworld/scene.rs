use ndarray::Array3;

use super::{ObstacleKind, SceneSpec, FRAME_SIZE};

type Rgb = [f64; 3];

/// Fisheye barrel strength: scene radius = r·(1 + K·r²).
const FISHEYE_K: f64 = 0.35;
/// Normalized radius outside which the lens circle is black.
const LENS_RADIUS: f64 = 1.12;
/// Extra disparity gain of the obstacle layer at distance 0.
const PARALLAX_GAIN: f64 = 3.0;

pub(crate) fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub(crate) fn unit(seed: u64, salt: u64) -> f64 {
    (splitmix(seed ^ splitmix(salt)) >> 11) as f64 / (1u64 << 53) as f64
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

fn mix(a: Rgb, b: Rgb, t: f64) -> Rgb {
    [lerp(a[0], b[0], t), lerp(a[1], b[1], t), lerp(a[2], b[2], t)]
}

fn scale(a: Rgb, s: f64) -> Rgb {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Environment appearance, shared by every frame of one environment.
struct Style {
    floor: Rgb,
    wall: Rgb,
    far: Rgb,
    horizon: f64,
    tile_freq: f64,
    doors: [f64; 3],
    door: Rgb,
}

impl Style {
    fn new(env: u64) -> Self {
        let u = |s| unit(env, s);
        let gray = 0.35 + 0.3 * u(1);
        let tint = |g: f64, s0, s1, s2| {
            [
                (g + 0.12 * (u(s0) - 0.5)).clamp(0.05, 0.95),
                (g + 0.12 * (u(s1) - 0.5)).clamp(0.05, 0.95),
                (g + 0.12 * (u(s2) - 0.5)).clamp(0.05, 0.95),
            ]
        };
        let wall_g = 0.55 + 0.3 * u(5);
        Self {
            floor: tint(gray, 2, 3, 4),
            wall: tint(wall_g, 6, 7, 8),
            far: tint(0.5 + 0.2 * u(9), 10, 11, 12),
            horizon: 0.42 + 0.06 * u(13),
            tile_freq: 3.0 + 4.0 * u(14),
            doors: [0.15 + 0.2 * u(15), 0.45 + 0.2 * u(16), 0.75 + 0.2 * u(17)],
            door: tint(0.25 + 0.2 * u(18), 19, 20, 21),
        }
    }
}

/// Per-frame nuisance drawn from the full seed.
struct Nuisance {
    yaw: f64,
    texture_amp: f64,
    texture_phase: f64,
    reflection: Option<(f64, f64)>,
    noise_amp: f64,
}

impl Nuisance {
    fn new(seed: u64) -> Self {
        let u = |s: u64| unit(seed, 100 + s);
        Self {
            yaw: 0.03 * (u(1) - 0.5),
            texture_amp: 0.02 + 0.1 * u(2) * u(2),
            texture_phase: 50.0 * u(3),
            reflection: (u(4) < 0.3).then(|| (0.3 + 0.4 * u(5), 0.55 + 0.35 * u(6))),
            noise_amp: 0.012,
        }
    }
}

fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let (xi, yi) = (x.floor(), y.floor());
    let (fx, fy) = (x - xi, y - yi);
    let h = |dx: f64, dy: f64| {
        let k = ((xi + dx) as i64 as u64).wrapping_mul(0x1F1F_1F1F) ^ ((yi + dy) as i64 as u64);
        unit(seed, k) - 0.5
    };
    let (sx, sy) = (fx * fx * (3.0 - 2.0 * fx), fy * fy * (3.0 - 2.0 * fy));
    lerp(lerp(h(0.0, 0.0), h(1.0, 0.0), sx), lerp(h(0.0, 1.0), h(1.0, 1.0), sx), sy)
}

struct Geometry {
    horizon: f64,
    half_width: f64,
}

impl Geometry {
    fn new(style: &Style, spec: &SceneSpec) -> Self {
        Self {
            horizon: style.horizon,
            half_width: 0.75 * spec.corridor_width,
        }
    }

    /// Perspective scale of ground-plane objects at row `v` (1 at the bottom).
    fn depth_scale(&self, v: f64) -> f64 {
        ((v - self.horizon) / (1.0 - self.horizon)).max(0.0)
    }

    fn floor_half_width(&self, v: f64) -> f64 {
        self.half_width * self.depth_scale(v)
    }

    /// Image row of the ground contact line at obstacle distance `d`.
    fn row_at(&self, d: f64) -> f64 {
        1.0 - d * (1.0 - self.horizon) * 0.92
    }
}

fn background(style: &Style, nui: &Nuisance, geo: &Geometry, seed: u64, u: f64, v: f64) -> Rgb {
    let x = u - 0.5;
    let s = geo.depth_scale(v);
    if v > geo.horizon && x.abs() < geo.floor_half_width(v) {
        // floor: brighter when near, tiled in perspective depth
        let depth = 1.0 / s.max(1e-3);
        let tile = ((depth * style.tile_freq * 0.5).fract() < 0.06) as i32 as f64;
        let lateral = x / s.max(1e-3);
        let tex = value_noise(seed, lateral * 6.0 + nui.texture_phase, depth * 3.0);
        let mut c = scale(style.floor, 0.75 + 0.35 * s - 0.12 * tile + nui.texture_amp * tex * 2.0);
        if let Some((ru, rv)) = nui.reflection {
            let dx = (u - ru) * 4.0;
            let dy = (v - rv) * 9.0;
            let g = (-(dx * dx + dy * dy)).exp();
            c = mix(c, [1.0, 1.0, 0.95], 0.55 * g);
        }
        return c;
    }
    // walls meet the floor edge and converge to the vanishing point
    let edge = geo.half_width * ((v - geo.horizon).abs() / (1.0 - geo.horizon));
    if x.abs() >= edge {
        let depth = (edge / x.abs().max(1e-3)).clamp(0.0, 1.0);
        let along = 1.0 - depth;
        let mut c = scale(style.wall, 0.65 + 0.35 * (x.abs() * 1.6).min(1.0));
        for (i, d) in style.doors.iter().enumerate() {
            let side = if i % 2 == 0 { 1.0 } else { -1.0 };
            if x * side > 0.0 && (along - d).abs() < 0.05 * (1.0 - along * 0.6) && v > geo.horizon - 0.25 * x.abs() {
                c = style.door;
            }
        }
        if v < geo.horizon {
            c = scale(c, 0.9);
        }
        return c;
    }
    // end of corridor and ceiling
    if v < geo.horizon {
        let lights = ((v * 14.0).fract() < 0.12 && x.abs() < 0.06 && v < geo.horizon - 0.05) as i32 as f64;
        mix(scale(style.far, 0.85 + 0.2 * (geo.horizon - v)), [1.0, 1.0, 1.0], 0.7 * lights)
    } else {
        style.far
    }
}

/// Obstacle footprint in unwarped scene coordinates: `(u0, u1, v0, v1)`.
fn footprint(geo: &Geometry, spec: &SceneSpec) -> Option<(f64, f64, f64, f64)> {
    let o = spec.obstacle.as_ref()?;
    let base = geo.row_at(o.distance);
    let s = geo.depth_scale(base);
    let hw = geo.floor_half_width(base);
    let cx = 0.5 + o.lateral_offset * 2.0 * hw;
    Some(match o.kind {
        ObstacleKind::Box => {
            let w = 0.6 * s.max(0.05);
            (cx - w * 0.5, cx + w * 0.5, base - 0.55 * s.max(0.05), base)
        }
        ObstacleKind::GlassGlare => (0.5 - hw, 0.5 + hw, base - 0.9 * s.max(0.05), base),
        ObstacleKind::DropOff => (0.5 - hw, 0.5 + hw, geo.horizon, base),
        ObstacleKind::ShadowBand => {
            (0.5 - hw, 0.5 + hw, base - 0.22 * s.max(0.05), base)
        }
    })
}

fn overlay(
    spec: &SceneSpec,
    geo: &Geometry,
    bg: Rgb,
    u: f64,
    v: f64,
    ub: f64,
) -> Rgb {
    let Some(o) = spec.obstacle.as_ref() else {
        return bg;
    };
    let Some((u0, u1, v0, v1)) = footprint(geo, spec) else {
        return bg;
    };
    let col = |salt: u64| unit(spec.seed >> 8, 300 + salt);
    let c = match o.kind {
        ObstacleKind::Box => {
            if u >= u0 && u <= u1 && v >= v0 && v <= v1 {
                let base = [0.35 + 0.65 * col(1), 0.1 + 0.5 * col(2), 0.05 + 0.4 * col(3)];
                let top = (v - v0) / (v1 - v0) < 0.18;
                let edge = ((u - u0).min(u1 - u) / (u1 - u0)) < 0.05;
                let seam = (((u - u0) / (u1 - u0)) * 5.0).fract() < 0.08;
                let shade = if top {
                    1.15
                } else if edge || seam {
                    0.7
                } else {
                    0.9
                };
                scale(base, shade)
            } else if v > v1 && v < v1 + 0.03 * (v1 - v0) / 0.42 && u > u0 && u < u1 {
                scale(bg, 0.55)
            } else {
                bg
            }
        }
        ObstacleKind::DropOff => {
            let x = ub - 0.5;
            if v > geo.horizon && v < v1 && x.abs() < geo.floor_half_width(v) {
                let steps = (((v1 - v) * 40.0).fract() < 0.15) as i32 as f64;
                scale([0.08, 0.08, 0.1], 1.0 + 1.5 * steps + 0.5 * (v - geo.horizon))
            } else if v >= v1 && v < v1 + 0.012 && x.abs() < geo.floor_half_width(v) {
                [0.9, 0.85, 0.3]
            } else {
                bg
            }
        }
        ObstacleKind::GlassGlare => {
            if u >= u0 && u <= u1 && v >= v0 && v <= v1 {
                let rel_u = (u - u0) / (u1 - u0);
                let rel_v = (v - v0) / (v1 - v0);
                // glare and frame fade out with distance
                let near = 1.0 - 0.8 * o.distance;
                let frame = rel_v > 0.95 || rel_u < 0.03 || rel_u > 0.97 || (rel_v - 0.55).abs() < 0.02;
                let mut c = mix(bg, [0.7, 0.85, 0.9], 0.3 * near);
                let streak = ((rel_u - 0.35 - 0.2 * col(4)) + 0.5 * (rel_v - 0.5)).abs();
                c = mix(c, [1.0, 1.0, 1.0], 0.8 * near * (1.0 - smoothstep(0.03, 0.1, streak)));
                if frame {
                    c = mix(c, [0.25, 0.25, 0.28], 0.8 * near);
                }
                c
            } else {
                bg
            }
        }
        ObstacleKind::ShadowBand => {
            let x = ub - 0.5;
            let soft = smoothstep(v0, v0 + 0.02, v) * (1.0 - smoothstep(v1 - 0.02, v1, v));
            let on_floor = v > geo.horizon && x.abs() < geo.floor_half_width(v);
            let wall = !on_floor && v > geo.horizon - 0.1;
            if on_floor || wall {
                scale(bg, 1.0 - 0.6 * soft * if wall { 0.6 } else { 1.0 })
            } else {
                bg
            }
        }
    };
    c.map(|c| c.clamp(0.0, 1.0))
}

/// Renders one view. `shift` is the stereo baseline as a fraction of the
/// image width (0 for the left camera).
pub(crate) fn render_view(spec: &SceneSpec, shift: f64) -> Array3<f32> {
    let env = spec.seed >> 32;
    let style = Style::new(splitmix(env ^ 0xE27));
    let nui = Nuisance::new(spec.seed);
    let geo = Geometry::new(&style, spec);
    let obstacle_shift = match &spec.obstacle {
        Some(o) if o.kind != ObstacleKind::ShadowBand => {
            shift * (1.0 + PARALLAX_GAIN * (1.0 - o.distance))
        }
        _ => shift,
    };
    let n = FRAME_SIZE;
    let mut out = Array3::<f32>::zeros((3, n, n));
    for py in 0..n {
        for px in 0..n {
            let cx = (px as f64 + 0.5) / n as f64 - 0.5;
            let cy = (py as f64 + 0.5) / n as f64 - 0.5;
            let r = (cx * cx + cy * cy).sqrt() / 0.5;
            let mut rgb = if r > LENS_RADIUS {
                [0.0; 3]
            } else {
                let f = 1.0 + FISHEYE_K * r * r;
                let u = 0.5 + cx * f + nui.yaw;
                let v = 0.5 + cy * f;
                let ub = u + shift;
                let bg = background(&style, &nui, &geo, spec.seed, ub, v);
                let c = overlay(spec, &geo, bg, u + obstacle_shift, v, ub);
                let vignette = 1.0 - 0.35 * smoothstep(0.7, LENS_RADIUS, r);
                scale(c, spec.lighting * vignette)
            };
            let salt = (py * n + px) as u64;
            for (ch, c) in rgb.iter_mut().enumerate() {
                *c += nui.noise_amp * (unit(spec.seed, salt * 3 + ch as u64) - 0.5) * 2.0;
                out[[ch, py, px]] = ((*c).clamp(0.0, 1.0) * 2.0 - 1.0) as f32;
            }
        }
    }
    out
}

/// Obstacle extent in unwarped pixel units: `(x0, x1, y0, y1)`.
pub(crate) fn obstacle_extent(spec: &SceneSpec) -> Option<(f64, f64, f64, f64)> {
    let style = Style::new(splitmix((spec.seed >> 32) ^ 0xE27));
    let geo = Geometry::new(&style, spec);
    let (u0, u1, v0, v1) = footprint(&geo, spec)?;
    // invert the radial warp approximately along the vertical axis through the
    // image center; adequate for row-band selection
    let unwarp = |v: f64| {
        let target = v - 0.5;
        let mut c = target;
        for _ in 0..20 {
            let r = (c.abs() / 0.5).min(LENS_RADIUS);
            c = target / (1.0 + FISHEYE_K * r * r);
        }
        ((c + 0.5) * FRAME_SIZE as f64).clamp(0.0, FRAME_SIZE as f64)
    };
    let n = FRAME_SIZE as f64;
    Some((u0 * n, u1 * n, unwarp(v0), unwarp(v1)))
}
