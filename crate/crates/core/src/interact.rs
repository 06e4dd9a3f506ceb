//! Haptic interfaces: floor path marking, object marking, virtual obstacle
//! placement and pushing virtual bodies.

#[allow(unused_imports)]
use num_traits::Float;
use alloc::vec::Vec;

use crate::camera::{CameraIntrinsics, RgbdFrame};
use crate::geometry::{Vec2, Vec3};
use crate::plan::{ObstacleShape, OccupancyGrid, VirtualObstacle};
use crate::segment::{next_label, LabelImage, region_grow, seed_from_mark, RegionParams};
use crate::tsdf::{GroundPlane, TsdfVolume};

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

/// Contacts farther than this from the ground are not floor touches.
pub const FLOOR_PROXIMITY: f64 = 0.02;
pub const DEFAULT_MARK_SPACING: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
pub enum InteractError {
    #[error("no floor contacts in the marking")]
    EmptyMarking,
    #[error("segmentation failed")]
    SegmentationFailed,
    #[error("obstacle overlaps the robot")]
    OverlapsRobot,
    #[error("no obstacle with id {0}")]
    UnknownObstacle(u32),
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct MarkingPath {
    pub points: Vec<Vec3>,
    pub min_spacing: f64,
    pub created_at_ms: u64,
}

/// Keeps floor contacts in touch order, dropping any closer than
/// `min_spacing` to the previously kept point.
pub fn mark_path(
    contacts: &[Vec3],
    ground: &GroundPlane,
    min_spacing: f64,
    now_ms: u64,
) -> Result<MarkingPath, InteractError> {
    let mut points: Vec<Vec3> = Vec::new();
    for c in contacts {
        if ground.height_of(c).abs() > FLOOR_PROXIMITY {
            continue;
        }
        if points.last().is_none_or(|last| (c - last).norm() >= min_spacing) {
            points.push(*c);
        }
    }
    if points.is_empty() {
        return Err(InteractError::EmptyMarking);
    }
    Ok(MarkingPath {
        points,
        min_spacing,
        created_at_ms: now_ms,
    })
}

/// Label of the labeled voxel nearest to `p` within one voxel, if any.
pub fn label_at(volume: &TsdfVolume, p: &Vec3) -> Option<u16> {
    let (ci, cj, ck) = volume.voxel_of(p)?;
    let r = volume.resolution() as isize;
    let mut best: Option<(f64, u16)> = None;
    for dk in -1..=1isize {
        for dj in -1..=1isize {
            for di in -1..=1isize {
                let (i, j, k) = (ci as isize + di, cj as isize + dj, ck as isize + dk);
                if i < 0 || j < 0 || k < 0 || i >= r || j >= r || k >= r {
                    continue;
                }
                let (i, j, k) = (i as usize, j as usize, k as usize);
                let l = volume.labels()[volume.index(i, j, k)];
                if l == 0 {
                    continue;
                }
                let d = (volume.voxel_center(i, j, k) - p).norm_squared();
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, l));
                }
            }
        }
    }
    best.map(|(_, l)| l)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MarkedObject {
    pub label: u16,
    /// Pixel mask of a fresh segmentation; `None` when the label was found.
    pub mask: Option<LabelImage>,
}

/// Resolves a contact to an object label, segmenting the current frame
/// and fusing the new label when the contact is unlabeled.
pub fn mark_object(
    contact: Option<Vec3>,
    volume: &mut TsdfVolume,
    frame: &RgbdFrame,
    intrinsics: &CameraIntrinsics,
    params: &RegionParams,
) -> Result<MarkedObject, InteractError> {
    let contact = contact.ok_or(InteractError::SegmentationFailed)?;
    if let Some(label) = label_at(volume, &contact) {
        return Ok(MarkedObject {
            label,
            mask: None,
        });
    }
    let seed = seed_from_mark(&contact, &frame.pose, intrinsics).map_err(|_| InteractError::SegmentationFailed)?;
    let label = next_label(volume);
    let (img, _) =
        region_grow(frame, intrinsics, seed, params, label).map_err(|_| InteractError::SegmentationFailed)?;
    volume
        .fuse_labels(&img.labels, frame, intrinsics)
        .map_err(|_| InteractError::SegmentationFailed)?;
    if label_at(volume, &contact).is_none() {
        return Err(InteractError::SegmentationFailed);
    }
    Ok(MarkedObject {
        label,
        mask: Some(img),
    })
}

/// Registered virtual obstacles; ids are never reused.
#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct ObstacleSet {
    pub obstacles: Vec<VirtualObstacle>,
    next_id: u32,
}

impl ObstacleSet {
    /// Projects `cursor` vertically onto the ground and registers an
    /// obstacle there unless its footprint meets the robot disc.
    pub fn place(
        &mut self,
        cursor: &Vec3,
        ground: &GroundPlane,
        shape: ObstacleShape,
        robot: Vec2,
        robot_radius: f64,
    ) -> Result<VirtualObstacle, InteractError> {
        let foot = ground.project_vertically(cursor);
        let ob = VirtualObstacle {
            id: self.next_id + 1,
            shape,
            position: Vec2::new(foot.x, foot.y),
        };
        if ob.distance(&robot) < robot_radius {
            return Err(InteractError::OverlapsRobot);
        }
        self.next_id += 1;
        self.obstacles.push(ob);
        Ok(ob)
    }

    pub fn remove(&mut self, id: u32) -> Result<VirtualObstacle, InteractError> {
        let i = self
            .obstacles
            .iter()
            .position(|o| o.id == id)
            .ok_or(InteractError::UnknownObstacle(id))?;
        Ok(self.obstacles.remove(i))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub enum BodyShape {
    Sphere { radius: f64 },
    Box { half_extents: Vec3 },
}

/// A planar rigid body resting on the ground.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct VirtualBody {
    pub id: u32,
    pub shape: BodyShape,
    /// Center; z stays at the resting height.
    pub position: Vec3,
    pub velocity: Vec2,
    pub mass: f64,
    pub stiffness: f64,
    /// Linear damping, N·s/m.
    pub damping: f64,
}

impl VirtualBody {
    /// Body resting on `ground` with its footprint centered at `at`.
    pub fn resting(id: u32, shape: BodyShape, at: Vec2, ground: &GroundPlane, mass: f64, stiffness: f64, damping: f64) -> Self {
        let lift = match shape {
            BodyShape::Sphere { radius } => radius,
            BodyShape::Box { half_extents } => half_extents.z,
        };
        let floor = ground.project_vertically(&Vec3::new(at.x, at.y, 0.0));
        Self {
            id,
            shape,
            position: Vec3::new(at.x, at.y, floor.z + lift),
            velocity: Vec2::zeros(),
            mass,
            stiffness,
            damping,
        }
    }

    /// Penetration depth of `p` and the outward normal at the contact.
    pub fn penetration(&self, p: &Vec3) -> Option<(f64, Vec3)> {
        let d = p - self.position;
        match self.shape {
            BodyShape::Sphere { radius } => {
                let n = d.norm();
                let depth = radius - n;
                (depth > 0.0).then(|| (depth, if n > 1e-12 { d / n } else { Vec3::z() }))
            }
            BodyShape::Box { half_extents } => {
                let gaps = half_extents - d.abs();
                if gaps.min() <= 0.0 {
                    return None;
                }
                let axis = gaps.imin();
                let mut n = Vec3::zeros();
                n[axis] = if d[axis] >= 0.0 { 1.0 } else { -1.0 };
                Some((gaps[axis], n))
            }
        }
    }

    pub fn as_obstacle(&self) -> VirtualObstacle {
        let position = Vec2::new(self.position.x, self.position.y);
        let shape = match self.shape {
            BodyShape::Sphere { radius } => ObstacleShape::Sphere { radius },
            BodyShape::Box { half_extents } => ObstacleShape::Box {
                half_extents: Vec2::new(half_extents.x, half_extents.y),
            },
        };
        VirtualObstacle {
            id: self.id,
            shape,
            position,
        }
    }
}

/// Bisection steps used to find the contact point of a blocked move.
const CLAMP_ITERS: usize = 40;

/// One semi-implicit Euler step of a body pushed by the HIP. Motion that
/// would overlap an occupied cell of `statics` stops at first contact and
/// zeroes the velocity.
pub fn push_body(body: &VirtualBody, hip: &Vec3, dt: f64, statics: Option<&OccupancyGrid>) -> VirtualBody {
    let mut next = *body;
    let mut force = Vec2::zeros();
    if let Some((depth, n)) = body.penetration(hip) {
        let f = -n * (body.stiffness * depth);
        force = Vec2::new(f.x, f.y);
    }
    next.velocity += (force - body.velocity * body.damping) * (dt / body.mass);
    let step = next.velocity * dt;
    let at = |s: f64| {
        let mut b = *body;
        b.position.x += step.x * s;
        b.position.y += step.y * s;
        b
    };
    let blocked = |s: f64| statics.is_some_and(|g| g.footprint_hits_occupied(&at(s).as_obstacle()));
    if step.norm() > 0.0 && blocked(1.0) {
        let (mut lo, mut hi) = (0.0, 1.0);
        if blocked(0.0) {
            hi = 0.0;
        }
        for _ in 0..CLAMP_ITERS {
            let mid = 0.5 * (lo + hi);
            if blocked(mid) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        next.position = at(lo).position;
        next.velocity = Vec2::zeros();
    } else {
        next.position = at(1.0).position;
    }
    next
}

/// Interface events exchanged with the operator console.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "type", rename_all = "snake_case"))]
pub enum InterfaceEvent {
    MarkPath {
        points: Vec<[f64; 3]>,
    },
    MarkObject {
        point: [f64; 3],
    },
    PlaceObstacle {
        pos: [f64; 2],
        #[cfg_attr(feature = "serde", serde(default = "default_shape"))]
        shape: ShapeName,
        #[cfg_attr(feature = "serde", serde(default = "default_radius"))]
        radius: f64,
        #[cfg_attr(feature = "serde", serde(default))]
        half_extents: Option<[f64; 2]>,
    },
    RemoveObstacle {
        id: u32,
    },
    Push {
        body: u32,
        hip: [f64; 3],
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ShapeName {
    Sphere,
    Box,
}

#[cfg(feature = "serde")]
fn default_shape() -> ShapeName {
    ShapeName::Sphere
}

#[cfg(feature = "serde")]
fn default_radius() -> f64 {
    0.2
}

impl InterfaceEvent {
    /// Footprint of a `place_obstacle` event.
    pub fn obstacle_shape(&self) -> Option<ObstacleShape> {
        match self {
            InterfaceEvent::PlaceObstacle {
                shape, radius, half_extents, ..
            } => Some(match (shape, half_extents) {
                (ShapeName::Box, Some(h)) => ObstacleShape::Box {
                    half_extents: Vec2::new(h[0], h[1]),
                },
                (ShapeName::Box, None) => ObstacleShape::Box {
                    half_extents: Vec2::repeat(*radius),
                },
                (ShapeName::Sphere, _) => ObstacleShape::Sphere { radius: *radius },
            }),
            _ => None,
        }
    }
}
