//! Constraint-based haptic rendering against the fused surface.
//!
//! The proxy is the surface-bound avatar of the haptic interaction point
//! (HIP). While in contact it is moved by force shading: the HIP is projected
//! onto the previous tangent plane, optionally adjusted by the friction cone,
//! and the result is snapped to the nearest ray-cast surface sample.

use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

use crate::geometry::{tangent_basis, Vec3};
use crate::tsdf::{SurfaceSample, TsdfVolume};

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

pub const DEFAULT_STIFFNESS: f64 = 500.0;
pub const DEFAULT_FORCE_MAX: f64 = 12.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum HapticError {
    #[error("point is outside the volume")]
    OutOfVolume,
    #[error("no valid surface sample in the current ray cast")]
    NoSurfaceVisible,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub enum ContactMode {
    #[default]
    Free,
    Contact,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub enum FrictionMode {
    #[default]
    None,
    Stick,
    Slip,
}

impl ContactMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ContactMode::Free => "free",
            ContactMode::Contact => "contact",
        }
    }
}

impl FrictionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            FrictionMode::None => "none",
            FrictionMode::Stick => "stick",
            FrictionMode::Slip => "slip",
        }
    }
}

/// Periodic height field over one `period × period` tile, values in units
/// of `amplitude`.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct BumpTexture {
    pub size: usize,
    pub heights: Vec<f64>,
    pub amplitude: f64,
    pub period: f64,
}

impl BumpTexture {
    /// Samples `f(s, t)` with `s, t ∈ [0, 1)` on a `size × size` grid.
    pub fn from_fn(size: usize, amplitude: f64, period: f64, f: impl Fn(f64, f64) -> f64) -> Self {
        let size = size.max(2);
        let mut heights = Vec::with_capacity(size * size);
        for j in 0..size {
            for i in 0..size {
                heights.push(f(i as f64 / size as f64, j as f64 / size as f64));
            }
        }
        Self {
            size,
            heights,
            amplitude: amplitude.max(0.0),
            period,
        }
    }

    /// Corrugation `sin(2π s/period)` along the first tangent direction.
    pub fn ridges(size: usize, amplitude: f64, period: f64) -> Self {
        Self::from_fn(size, amplitude, period, |s, _| (2.0 * core::f64::consts::PI * s).sin())
    }

    fn node(&self, i: isize, j: isize) -> f64 {
        let n = self.size as isize;
        self.heights[(j.rem_euclid(n) * n + i.rem_euclid(n)) as usize]
    }

    /// Node gradient in height units per grid cell.
    fn node_gradient(&self, i: isize, j: isize) -> (f64, f64) {
        (
            (self.node(i + 1, j) - self.node(i - 1, j)) * 0.5,
            (self.node(i, j + 1) - self.node(i, j - 1)) * 0.5,
        )
    }

    /// Gradient of the scaled height field (meters per meter) at surface
    /// coordinates `(s, t)` in meters, bilinearly interpolated from node
    /// gradients.
    pub fn gradient(&self, s: f64, t: f64) -> (f64, f64) {
        let cell = self.period / self.size as f64;
        let (gs, gt) = (s / cell, t / cell);
        let (i0, j0) = (gs.floor(), gt.floor());
        let (a, b) = (gs - i0, gt - j0);
        let (i0, j0) = (i0 as isize, j0 as isize);
        let mut out = (0.0, 0.0);
        for (di, dj, w) in [(0, 0, (1.0 - a) * (1.0 - b)), (1, 0, a * (1.0 - b)), (0, 1, (1.0 - a) * b), (1, 1, a * b)] {
            let g = self.node_gradient(i0 + di, j0 + dj);
            out.0 += w * g.0;
            out.1 += w * g.1;
        }
        let scale = self.amplitude / cell;
        (out.0 * scale, out.1 * scale)
    }
}

/// Tilts `normal` by the negative tangential gradient of the texture at
/// `contact` and renormalizes.
pub fn apply_texture(normal: &Vec3, contact: &Vec3, texture: &BumpTexture) -> Vec3 {
    if texture.amplitude == 0.0 {
        return *normal;
    }
    let (t1, t2) = tangent_basis(normal);
    let (hs, ht) = texture.gradient(contact.dot(&t1), contact.dot(&t2));
    let perturbed = normal - t1 * hs - t2 * ht;
    let len = perturbed.norm();
    if len > 0.0 {
        perturbed / len
    } else {
        *normal
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct HapticParams {
    /// Spring stiffness, N/m.
    pub stiffness: f64,
    pub force_max: f64,
    pub friction: f64,
    pub texture: Option<BumpTexture>,
}

impl Default for HapticParams {
    fn default() -> Self {
        Self {
            stiffness: DEFAULT_STIFFNESS,
            force_max: DEFAULT_FORCE_MAX,
            friction: 0.0,
            texture: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HapticState {
    pub hip: Vec3,
    pub proxy: Vec3,
    pub prev_normal: Vec3,
    pub mode: ContactMode,
    pub friction_mode: FrictionMode,
    pub params: HapticParams,
    /// Set when the last update could not find a surface and held the proxy.
    pub degraded: bool,
}

impl HapticState {
    pub fn new(params: HapticParams, hip: Vec3) -> Self {
        Self {
            hip,
            proxy: hip,
            prev_normal: Vec3::z(),
            mode: ContactMode::Free,
            friction_mode: FrictionMode::None,
            params,
            degraded: false,
        }
    }

    fn release(&mut self, hip: Vec3) {
        self.hip = hip;
        self.proxy = hip;
        self.mode = ContactMode::Free;
        self.friction_mode = FrictionMode::None;
    }

    fn textured(&self, s: &CloudPoint) -> Vec3 {
        match &self.params.texture {
            Some(t) => apply_texture(&s.normal, &s.position, t),
            None => s.normal,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct ForceSample {
    pub force: Vec3,
    pub proxy: Vec3,
    pub timestamp_ms: u64,
}

/// Spring force `k·(proxy − hip)`, rescaled to `force_max` when larger.
pub fn compute_force(state: &HapticState, timestamp_ms: u64) -> ForceSample {
    let mut force = (state.proxy - state.hip) * state.params.stiffness;
    let mag = force.norm();
    if mag > state.params.force_max {
        force *= state.params.force_max / mag;
    }
    ForceSample {
        force,
        proxy: state.proxy,
        timestamp_ms,
    }
}

/// Signed field the haptic loop tests penetration against.
pub trait SignedField {
    /// Field value at `p`, negative inside; `None` outside the sampled domain.
    fn field_value(&self, p: &Vec3) -> Option<f64>;
}

impl SignedField for TsdfVolume {
    fn field_value(&self, p: &Vec3) -> Option<f64> {
        self.sample_interior(p).ok()
    }
}

/// Sign test on the interpolated field; zero is not a penetration.
pub fn detect_collision<F: SignedField + ?Sized>(field: &F, h: &Vec3) -> Result<bool, HapticError> {
    field.field_value(h).map(|v| v < 0.0).ok_or(HapticError::OutOfVolume)
}

/// One valid ray-cast sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CloudPoint {
    pub position: Vec3,
    pub normal: Vec3,
    /// Row-major source pixel index.
    pub pixel: u32,
}

/// Valid samples of one ray cast in row-major pixel order: the search set
/// for nearest-surface queries until the next fusion step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SurfaceCloud {
    pub points: Vec<CloudPoint>,
    pub width: usize,
}

impl SurfaceCloud {
    pub fn from_samples(samples: &[SurfaceSample], width: usize) -> Self {
        let points = samples
            .iter()
            .filter(|s| s.valid)
            .map(|s| CloudPoint {
                position: s.position,
                normal: s.normal,
                pixel: s.pixel_index(width) as u32,
            })
            .collect();
        Self { points, width }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn to_sample(&self, p: &CloudPoint) -> SurfaceSample {
        let w = self.width.max(1) as u32;
        SurfaceSample {
            position: p.position,
            normal: p.normal,
            pixel: (p.pixel % w, p.pixel / w),
            valid: true,
        }
    }

    /// Nearest sample to `q` by a sequential fold of [`nearest_combine`].
    pub fn nearest(&self, q: &Vec3) -> Result<SurfaceSample, HapticError> {
        let best = self
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| Candidate::new(p, i, q))
            .fold(Candidate::NONE, nearest_combine);
        self.resolve(best)
    }

    /// Same result as [`SurfaceCloud::nearest`], computed as per-chunk
    /// minima followed by a reduction of the partial results, the shape of
    /// a parallel tree reduction.
    pub fn nearest_chunked(&self, q: &Vec3, chunk: usize) -> Result<SurfaceSample, HapticError> {
        let chunk = chunk.max(1);
        let partials: Vec<Candidate> = self
            .points
            .chunks(chunk)
            .enumerate()
            .map(|(c, pts)| {
                pts.iter()
                    .enumerate()
                    .map(|(i, p)| Candidate::new(p, c * chunk + i, q))
                    .fold(Candidate::NONE, nearest_combine)
            })
            .collect();
        let mut level = partials;
        while level.len() > 1 {
            level = level
                .chunks(2)
                .map(|pair| pair.iter().copied().fold(Candidate::NONE, nearest_combine))
                .collect();
        }
        self.resolve(level.first().copied().unwrap_or(Candidate::NONE))
    }

    fn resolve(&self, best: Candidate) -> Result<SurfaceSample, HapticError> {
        if best.slot == usize::MAX {
            return Err(HapticError::NoSurfaceVisible);
        }
        Ok(self.to_sample(&self.points[best.slot]))
    }

    fn point_for(&self, s: &SurfaceSample) -> CloudPoint {
        CloudPoint {
            position: s.position,
            normal: s.normal,
            pixel: s.pixel_index(self.width) as u32,
        }
    }
}

/// Partial result of the nearest-point reduction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub dist2: f64,
    pub pixel: u32,
    slot: usize,
}

impl Candidate {
    pub const NONE: Candidate = Candidate {
        dist2: f64::INFINITY,
        pixel: u32::MAX,
        slot: usize::MAX,
    };

    fn new(p: &CloudPoint, slot: usize, q: &Vec3) -> Self {
        Self {
            dist2: (p.position - q).norm_squared(),
            pixel: p.pixel,
            slot,
        }
    }
}

/// Associative, commutative min by `(distance², pixel index)`.
pub fn nearest_combine(a: Candidate, b: Candidate) -> Candidate {
    if b.dist2 < a.dist2 || (b.dist2 == a.dist2 && b.pixel < a.pixel) {
        b
    } else {
        a
    }
}

/// Friction cone at the HIP intersected with the tangent plane: a circle of
/// radius `μ·dist(h, T)` around `g`. Returns the adjusted goal.
pub fn apply_friction(prev_proxy: &Vec3, normal: &Vec3, g: &Vec3, h: &Vec3, mu: f64) -> (Vec3, FrictionMode) {
    let r = mu * (h - prev_proxy).dot(normal).abs();
    let offset = prev_proxy - g;
    let d = offset.norm();
    if r > 0.0 && d <= r {
        (*prev_proxy, FrictionMode::Stick)
    } else if r > 0.0 {
        (g + offset * (r / d), FrictionMode::Slip)
    } else {
        (*g, FrictionMode::Slip)
    }
}

/// Which contact update rule [`proxy_update_with`] applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateRule {
    /// Tangent-plane constrained goal, friction, then nearest sample.
    ForceShading,
    /// Nearest sample to the HIP itself.
    Nearest,
}

/// Force-shaded proxy update.
pub fn proxy_update<F: SignedField + ?Sized>(
    state: &mut HapticState,
    volume: &F,
    cloud: &SurfaceCloud,
    h_new: Vec3,
) -> Result<(), HapticError> {
    proxy_update_with(state, volume, cloud, h_new, UpdateRule::ForceShading)
}

/// Proxy update with the given contact rule. When no surface is visible the
/// previous proxy is held, `degraded` is set and the error is returned.
pub fn proxy_update_with<F: SignedField + ?Sized>(
    state: &mut HapticState,
    volume: &F,
    cloud: &SurfaceCloud,
    h_new: Vec3,
    rule: UpdateRule,
) -> Result<(), HapticError> {
    match state.mode {
        ContactMode::Free => {
            let colliding = detect_collision(volume, &h_new).unwrap_or(false);
            if !colliding {
                state.release(h_new);
                state.degraded = false;
                return Ok(());
            }
            let s = match cloud.nearest(&h_new) {
                Ok(s) => s,
                Err(e) => {
                    state.release(h_new);
                    state.degraded = true;
                    return Err(e);
                }
            };
            let p = cloud.point_for(&s);
            state.hip = h_new;
            state.proxy = s.position;
            state.prev_normal = state.textured(&p);
            state.mode = ContactMode::Contact;
            state.friction_mode = FrictionMode::None;
            state.degraded = false;
            Ok(())
        }
        ContactMode::Contact => {
            let n = state.prev_normal;
            let p_prev = state.proxy;
            let side = (h_new - p_prev).dot(&n);
            // outside the volume counts as free space
            let field = volume.field_value(&h_new).unwrap_or(1.0);
            if side > 0.0 && field >= 0.0 {
                state.release(h_new);
                state.degraded = false;
                return Ok(());
            }
            state.hip = h_new;
            let goal = match rule {
                UpdateRule::Nearest => h_new,
                UpdateRule::ForceShading => {
                    let g = h_new - n * side;
                    let (goal, fm) = apply_friction(&p_prev, &n, &g, &h_new, state.params.friction);
                    state.friction_mode = fm;
                    if fm == FrictionMode::Stick {
                        state.degraded = false;
                        return Ok(());
                    }
                    goal
                }
            };
            match cloud.nearest(&goal) {
                Ok(s) => {
                    let p = cloud.point_for(&s);
                    state.proxy = s.position;
                    state.prev_normal = state.textured(&p);
                    state.degraded = false;
                    Ok(())
                }
                Err(e) => {
                    state.degraded = true;
                    Err(e)
                }
            }
        }
    }
}

/// One haptic trace row.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct TraceRow {
    pub timestamp_ms: u64,
    pub hip: Vec3,
    pub proxy: Vec3,
    pub force: Vec3,
    pub mode: ContactMode,
    pub friction_mode: FrictionMode,
}

/// Drives the proxy along a HIP path, one update per point, `dt_ms` apart.
pub fn run_path<F: SignedField + ?Sized>(
    state: &mut HapticState,
    volume: &F,
    cloud: &SurfaceCloud,
    path: &[Vec3],
    dt_ms: u64,
    rule: UpdateRule,
) -> Vec<TraceRow> {
    let mut rows = Vec::with_capacity(path.len());
    for (i, h) in path.iter().enumerate() {
        // a missing surface is recorded through the held proxy
        let _ = proxy_update_with(state, volume, cloud, *h, rule);
        let t = i as u64 * dt_ms;
        let f = compute_force(state, t);
        rows.push(TraceRow {
            timestamp_ms: t,
            hip: state.hip,
            proxy: state.proxy,
            force: f.force,
            mode: state.mode,
            friction_mode: state.friction_mode,
        });
    }
    rows
}

/// Largest distance between consecutive proxies of a trace.
pub fn max_proxy_step(rows: &[TraceRow]) -> f64 {
    rows.windows(2).map(|w| (w[1].proxy - w[0].proxy).norm()).fold(0.0, f64::max)
}
