//! Interactive region growing on RGBD frames, label fusion support and the
//! PRI / BDE / GCE segmentation metrics.

#[allow(unused_imports)]
use num_traits::Float;
use alloc::collections::{BTreeMap, VecDeque};
use alloc::vec;
use alloc::vec::Vec;

use crate::camera::{CameraIntrinsics, RgbdFrame};
use crate::geometry::{Aabb, RigidTransform, Vec3};
use crate::tsdf::TsdfVolume;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
pub enum SegmentError {
    #[error("mark is behind the camera")]
    BehindCamera,
    #[error("mark projects outside the image")]
    OutsideImage,
    #[error("seed pixel has no valid depth")]
    InvalidSeed,
    #[error("label {0} is not present in the volume")]
    UnknownLabel(u16),
    #[error("image dimensions differ")]
    DimensionMismatch,
    #[error("invalid region parameters")]
    InvalidParams,
}

/// How the cluster center evolves while growing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub enum ClusterUpdate {
    /// Means are refreshed after every admitted pixel.
    #[default]
    Incremental,
    /// Means stay at the seed values.
    Frozen,
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct RegionParams {
    /// Compactness `m`, in `[1, 20]`.
    pub compactness: f64,
    /// Grid interval `g` in pixels.
    pub grid_interval: f64,
    pub threshold: f64,
    pub update: ClusterUpdate,
}

impl Default for RegionParams {
    fn default() -> Self {
        Self {
            compactness: 10.0,
            grid_interval: 10.0,
            threshold: 12.0,
            update: ClusterUpdate::Incremental,
        }
    }
}

impl RegionParams {
    pub fn beta(&self) -> f64 {
        self.compactness / self.grid_interval
    }

    pub fn validate(&self) -> Result<(), SegmentError> {
        let ok = (1.0..=20.0).contains(&self.compactness)
            && self.grid_interval > 0.0
            && self.threshold.is_finite()
            && self.threshold >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(SegmentError::InvalidParams)
        }
    }
}

/// Running center of a grown region.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct ClusterStats {
    pub color: Vec3,
    pub position: Vec3,
    pub count: usize,
}

/// Per-pixel object ids, row-major; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct LabelImage {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u16>,
}

impl LabelImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            labels: vec![0; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, labels: Vec<u16>) -> Result<Self, SegmentError> {
        if labels.len() != width * height {
            return Err(SegmentError::DimensionMismatch);
        }
        Ok(Self { width, height, labels })
    }

    pub fn get(&self, u: usize, v: usize) -> u16 {
        self.labels[v * self.width + u]
    }

    pub fn count(&self, label: u16) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct SegMetrics {
    pub pri: f64,
    pub bde: f64,
    pub gce: f64,
}

/// 8-bit sRGB to CIELAB under the D65 white point.
pub fn srgb_to_lab(rgb: [u8; 3]) -> Vec3 {
    fn linear(c: u8) -> f64 {
        let c = c as f64 / 255.0;
        if c <= 0.04045 {
            c / 12.92
        } else {
            ((c + 0.055) / 1.055).powf(2.4)
        }
    }
    fn f(t: f64) -> f64 {
        const D: f64 = 6.0 / 29.0;
        if t > D * D * D {
            t.cbrt()
        } else {
            t / (3.0 * D * D) + 4.0 / 29.0
        }
    }
    let (r, g, b) = (linear(rgb[0]), linear(rgb[1]), linear(rgb[2]));
    let x = 0.412_456_4 * r + 0.357_576_1 * g + 0.180_437_5 * b;
    let y = 0.212_672_9 * r + 0.715_152_2 * g + 0.072_175_0 * b;
    let z = 0.019_333_9 * r + 0.119_192_0 * g + 0.950_304_1 * b;
    let (fx, fy, fz) = (f(x / 0.950_47), f(y), f(z / 1.088_83));
    Vec3::new(116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz))
}

/// Pixel hit by a world-space mark.
pub fn seed_from_mark(
    mark: &Vec3,
    pose: &RigidTransform,
    intrinsics: &CameraIntrinsics,
) -> Result<(usize, usize), SegmentError> {
    let p = pose.inverse_apply(mark);
    if p.z <= 0.0 {
        return Err(SegmentError::BehindCamera);
    }
    intrinsics.project_to_pixel(&p).ok_or(SegmentError::OutsideImage)
}

/// Eq. 1 style distance of a pixel to a cluster center.
pub fn cluster_distance(color: &Vec3, position: &Vec3, center: &ClusterStats, beta: f64) -> f64 {
    (color - center.color).norm() + beta * (position - center.position).norm()
}

/// Breadth-first growth from `seed` over 4-neighbours, labelling admitted
/// pixels with `label`.
pub fn region_grow(
    frame: &RgbdFrame,
    intrinsics: &CameraIntrinsics,
    seed: (usize, usize),
    params: &RegionParams,
    label: u16,
) -> Result<(LabelImage, ClusterStats), SegmentError> {
    params.validate()?;
    let (w, h) = (frame.width, frame.height);
    if w != intrinsics.width || h != intrinsics.height || frame.color.len() != w * h || frame.depth.len() != w * h {
        return Err(SegmentError::DimensionMismatch);
    }
    if seed.0 >= w || seed.1 >= h {
        return Err(SegmentError::InvalidSeed);
    }
    let seed_pos = frame.world_point(seed.0, seed.1, intrinsics).ok_or(SegmentError::InvalidSeed)?;
    let seed_lab = srgb_to_lab(frame.color[frame.index(seed.0, seed.1)]);
    let beta = params.beta();

    let mut out = LabelImage::new(w, h);
    let mut visited = vec![false; w * h];
    let mut stats = ClusterStats {
        color: seed_lab,
        position: seed_pos,
        count: 1,
    };
    let (mut sum_c, mut sum_p) = (seed_lab, seed_pos);
    let seed_idx = seed.1 * w + seed.0;
    out.labels[seed_idx] = label;
    visited[seed_idx] = true;
    let mut queue = VecDeque::from([seed]);

    while let Some((u, v)) = queue.pop_front() {
        let neighbours = [
            (u.wrapping_sub(1), v),
            (u + 1, v),
            (u, v.wrapping_sub(1)),
            (u, v + 1),
        ];
        for (nu, nv) in neighbours {
            if nu >= w || nv >= h {
                continue;
            }
            let idx = nv * w + nu;
            if visited[idx] {
                continue;
            }
            let Some(p) = frame.world_point(nu, nv, intrinsics) else {
                continue;
            };
            let c = srgb_to_lab(frame.color[idx]);
            if cluster_distance(&c, &p, &stats, beta) > params.threshold {
                continue;
            }
            visited[idx] = true;
            out.labels[idx] = label;
            queue.push_back((nu, nv));
            sum_c += c;
            sum_p += p;
            let n = stats.count + 1;
            stats.count = n;
            if params.update == ClusterUpdate::Incremental {
                stats.color = sum_c / n as f64;
                stats.position = sum_p / n as f64;
            }
        }
    }
    if params.update == ClusterUpdate::Frozen {
        stats.color = sum_c / stats.count as f64;
        stats.position = sum_p / stats.count as f64;
    }
    Ok((out, stats))
}

/// Centroid and bounds of the voxels carrying a label.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct ObjectExtent {
    pub label: u16,
    pub centroid: Vec3,
    pub bounds: Aabb,
    pub voxels: usize,
}

pub fn object_extent(volume: &TsdfVolume, label: u16) -> Result<ObjectExtent, SegmentError> {
    if label == 0 {
        return Err(SegmentError::UnknownLabel(label));
    }
    let mut sum = Vec3::zeros();
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    let mut n = 0usize;
    for (idx, &l) in volume.labels().iter().enumerate() {
        if l != label {
            continue;
        }
        let (i, j, k) = volume.coords(idx);
        let c = volume.voxel_center(i, j, k);
        sum += c;
        lo = lo.inf(&c);
        hi = hi.sup(&c);
        n += 1;
    }
    if n == 0 {
        return Err(SegmentError::UnknownLabel(label));
    }
    Ok(ObjectExtent {
        label,
        centroid: sum / n as f64,
        bounds: Aabb::new(lo, hi),
        voxels: n,
    })
}

/// Smallest nonzero label id not yet used in the volume.
pub fn next_label(volume: &TsdfVolume) -> u16 {
    volume.labels().iter().copied().max().unwrap_or(0).saturating_add(1).max(1)
}

/// Joint label counts of two equally sized segmentations.
struct Contingency {
    n: u64,
    joint: BTreeMap<(u16, u16), u64>,
    rows: BTreeMap<u16, u64>,
    cols: BTreeMap<u16, u64>,
}

impl Contingency {
    fn new(a: &[u16], b: &[u16]) -> Self {
        let mut joint = BTreeMap::new();
        let mut rows = BTreeMap::new();
        let mut cols = BTreeMap::new();
        for (&x, &y) in a.iter().zip(b) {
            *joint.entry((x, y)).or_insert(0u64) += 1;
            *rows.entry(x).or_insert(0u64) += 1;
            *cols.entry(y).or_insert(0u64) += 1;
        }
        Self {
            n: a.len() as u64,
            joint,
            rows,
            cols,
        }
    }
}

fn pairs(n: u64) -> u128 {
    n as u128 * n.saturating_sub(1) as u128 / 2
}

/// Rand index: fraction of unordered pixel pairs on which both
/// segmentations agree (same/same or different/different).
pub fn rand_index(a: &[u16], b: &[u16]) -> f64 {
    let t = Contingency::new(a, b);
    let total = pairs(t.n);
    if total == 0 {
        return 1.0;
    }
    let same_both: u128 = t.joint.values().map(|&c| pairs(c)).sum();
    let same_a: u128 = t.rows.values().map(|&c| pairs(c)).sum();
    let same_b: u128 = t.cols.values().map(|&c| pairs(c)).sum();
    let agree = total + 2 * same_both - same_a - same_b;
    agree as f64 / total as f64
}

/// Global consistency error.
pub fn global_consistency_error(a: &[u16], b: &[u16]) -> f64 {
    let t = Contingency::new(a, b);
    if t.n == 0 {
        return 0.0;
    }
    let (mut ab, mut ba) = (0.0, 0.0);
    for (&(x, y), &c) in &t.joint {
        let c = c as f64;
        let ra = t.rows[&x] as f64;
        let rb = t.cols[&y] as f64;
        ab += c * (ra - c) / ra;
        ba += c * (rb - c) / rb;
    }
    ab.min(ba) / t.n as f64
}

/// Pixels whose label differs from a 4-neighbour.
pub fn boundary_mask(img: &LabelImage) -> Vec<bool> {
    let (w, h) = (img.width, img.height);
    let mut m = vec![false; w * h];
    for v in 0..h {
        for u in 0..w {
            let l = img.get(u, v);
            let differs = (u > 0 && img.get(u - 1, v) != l)
                || (u + 1 < w && img.get(u + 1, v) != l)
                || (v > 0 && img.get(u, v - 1) != l)
                || (v + 1 < h && img.get(u, v + 1) != l);
            m[v * w + u] = differs;
        }
    }
    m
}

fn edt_1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        if f[q].is_infinite() {
            continue;
        }
        if f[v[0]].is_infinite() {
            v[0] = q;
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    if f[v[0]].is_infinite() {
        d.iter_mut().for_each(|x| *x = f64::INFINITY);
        return;
    }
    k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let dq = q as f64 - v[k] as f64;
        *out = dq * dq + f[v[k]];
    }
}

/// Exact squared Euclidean distance to the nearest `true` cell.
pub fn squared_distance_transform(mask: &[bool], width: usize, height: usize) -> Vec<f64> {
    let n = width.max(height);
    let mut d = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    let mut grid: Vec<f64> = mask.iter().map(|&b| if b { 0.0 } else { f64::INFINITY }).collect();
    let mut col = vec![0.0; height];
    for x in 0..width {
        for y in 0..height {
            col[y] = grid[y * width + x];
        }
        edt_1d(&col, &mut d[..height], &mut v, &mut z);
        for y in 0..height {
            grid[y * width + x] = d[y];
        }
    }
    for y in 0..height {
        let row = grid[y * width..(y + 1) * width].to_vec();
        edt_1d(&row, &mut d[..width], &mut v, &mut z);
        grid[y * width..(y + 1) * width].copy_from_slice(&d[..width]);
    }
    grid
}

/// Boundary displacement error in pixels: the mean of the two directed
/// mean nearest-boundary distances.
pub fn boundary_displacement_error(a: &LabelImage, b: &LabelImage) -> f64 {
    let (w, h) = (a.width, a.height);
    let ma = boundary_mask(a);
    let mb = boundary_mask(b);
    let na = ma.iter().filter(|&&x| x).count();
    let nb = mb.iter().filter(|&&x| x).count();
    match (na, nb) {
        (0, 0) => return 0.0,
        (0, _) | (_, 0) => return ((w * w + h * h) as f64).sqrt(),
        _ => {}
    }
    let da = squared_distance_transform(&ma, w, h);
    let db = squared_distance_transform(&mb, w, h);
    let directed = |from: &[bool], to: &[f64], n: usize| {
        from.iter().zip(to).filter(|(&m, _)| m).map(|(_, &d)| d.sqrt()).sum::<f64>() / n as f64
    };
    0.5 * (directed(&ma, &db, na) + directed(&mb, &da, nb))
}

pub fn evaluate(seg: &LabelImage, truth: &LabelImage) -> Result<SegMetrics, SegmentError> {
    if seg.width != truth.width || seg.height != truth.height || seg.labels.len() != truth.labels.len() {
        return Err(SegmentError::DimensionMismatch);
    }
    Ok(SegMetrics {
        pri: rand_index(&seg.labels, &truth.labels),
        bde: boundary_displacement_error(seg, truth),
        gce: global_consistency_error(&seg.labels, &truth.labels),
    })
}

/// Intersection over union of the pixels carrying `la` in `a` and `lb` in `b`.
pub fn iou(a: &LabelImage, la: u16, b: &LabelImage, lb: u16) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.labels.iter().zip(&b.labels) {
        let (p, q) = (x == la, y == lb);
        inter += (p && q) as usize;
        union += (p || q) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lab_reference_colors() {
        let white = srgb_to_lab([255, 255, 255]);
        assert!((white.x - 100.0).abs() < 1e-3 && white.y.abs() < 1e-2 && white.z.abs() < 1e-2);
        let black = srgb_to_lab([0, 0, 0]);
        assert!(black.norm() < 1e-9);
        // sRGB red in D65 Lab is about (53.24, 80.09, 67.20)
        let red = srgb_to_lab([255, 0, 0]);
        assert!((red - Vec3::new(53.24, 80.09, 67.20)).norm() < 0.05, "{red:?}");
    }

    #[test]
    fn seeds_from_pinhole_marks() {
        let intr = CameraIntrinsics {
            fx: 500.0,
            fy: 500.0,
            cx: 320.0,
            cy: 240.0,
            width: 640,
            height: 480,
            ..CameraIntrinsics::default()
        };
        let id = RigidTransform::identity();
        assert_eq!(seed_from_mark(&Vec3::new(0.0, 0.0, 1.0), &id, &intr), Ok((320, 240)));
        assert_eq!(seed_from_mark(&Vec3::new(0.1, 0.0, 1.0), &id, &intr), Ok((370, 240)));
        assert_eq!(seed_from_mark(&Vec3::new(0.0, 0.0, -1.0), &id, &intr), Err(SegmentError::BehindCamera));
        assert_eq!(seed_from_mark(&Vec3::new(5.0, 0.0, 1.0), &id, &intr), Err(SegmentError::OutsideImage));
    }

    #[test]
    fn identical_segmentations_are_perfect() {
        let a = LabelImage::from_vec(4, 2, vec![1, 1, 2, 2, 1, 1, 2, 2]).unwrap();
        let m = evaluate(&a, &a).unwrap();
        assert_eq!(m, SegMetrics { pri: 1.0, bde: 0.0, gce: 0.0 });
    }

    #[test]
    fn refinement_has_zero_gce() {
        let coarse = LabelImage::from_vec(4, 1, vec![1, 1, 2, 2]).unwrap();
        let fine = LabelImage::from_vec(4, 1, vec![1, 3, 2, 2]).unwrap();
        assert_eq!(evaluate(&fine, &coarse).unwrap().gce, 0.0);
        assert_eq!(evaluate(&coarse, &fine).unwrap().gce, 0.0);
    }

    #[test]
    fn dimension_mismatch() {
        let a = LabelImage::new(2, 2);
        let b = LabelImage::new(4, 1);
        assert_eq!(evaluate(&a, &b), Err(SegmentError::DimensionMismatch));
    }

    #[test]
    fn distance_transform_of_single_point() {
        let mut m = vec![false; 25];
        m[12] = true;
        let d = squared_distance_transform(&m, 5, 5);
        assert_eq!(d[0], 8.0);
        assert_eq!(d[12], 0.0);
        assert_eq!(d[14], 4.0);
    }
}
