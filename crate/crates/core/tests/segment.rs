use proptest::prelude::*;
use telehaptic_core::camera::{CameraIntrinsics, RgbdFrame};
use telehaptic_core::geometry::{Aabb, RigidTransform, Vec3};
use telehaptic_core::segment::*;
use telehaptic_core::sim::{render_frame, Scene};
use telehaptic_core::tsdf::{fuse_label, TsdfParams, TsdfVolume, Voxel};

fn small_intrinsics(w: usize, h: usize) -> CameraIntrinsics {
    CameraIntrinsics {
        fx: 40.0,
        fy: 40.0,
        cx: w as f64 / 2.0,
        cy: h as f64 / 2.0,
        width: w,
        height: h,
        ..CameraIntrinsics::default()
    }
}

/// Flat 1 m deep image; color chosen per pixel.
fn flat_frame(w: usize, h: usize, color: impl Fn(usize, usize) -> [u8; 3]) -> RgbdFrame {
    let mut f = RgbdFrame::blank(w, h, RigidTransform::identity());
    for v in 0..h {
        for u in 0..w {
            let i = f.index(u, v);
            f.depth[i] = 1000;
            f.color[i] = color(u, v);
        }
    }
    f
}

/// Independent region grower: same admission rule and BFS order, but the
/// cluster center is recomputed from the member list at every test.
fn oracle_grow(frame: &RgbdFrame, intr: &CameraIntrinsics, seed: (usize, usize), p: &RegionParams) -> Vec<bool> {
    let (w, h) = (frame.width, frame.height);
    let point = |u: usize, v: usize| frame.world_point(u, v, intr);
    let lab = |u: usize, v: usize| srgb_to_lab(frame.color[v * w + u]);
    let mut members = vec![seed];
    let mut inside = vec![false; w * h];
    inside[seed.1 * w + seed.0] = true;
    let mut head = 0;
    while head < members.len() {
        let (u, v) = members[head];
        head += 1;
        let cand = [(u as i64 - 1, v as i64), (u as i64 + 1, v as i64), (u as i64, v as i64 - 1), (u as i64, v as i64 + 1)];
        for (cu, cv) in cand {
            if cu < 0 || cv < 0 || cu >= w as i64 || cv >= h as i64 {
                continue;
            }
            let (cu, cv) = (cu as usize, cv as usize);
            if inside[cv * w + cu] {
                continue;
            }
            let Some(pos) = point(cu, cv) else { continue };
            let n = members.len() as f64;
            let (mc, mp) = match p.update {
                ClusterUpdate::Incremental => members.iter().fold((Vec3::zeros(), Vec3::zeros()), |(c, q), &(a, b)| {
                    (c + lab(a, b) / n, q + point(a, b).unwrap() / n)
                }),
                ClusterUpdate::Frozen => (lab(seed.0, seed.1), point(seed.0, seed.1).unwrap()),
            };
            let d = (lab(cu, cv) - mc).norm() + p.beta() * (pos - mp).norm();
            if d <= p.threshold {
                inside[cv * w + cu] = true;
                members.push((cu, cv));
            }
        }
    }
    inside
}

fn two_region(u: usize, _v: usize) -> [u8; 3] {
    if u < 16 {
        [200, 40, 40]
    } else {
        [40, 40, 200]
    }
}

#[test]
fn uniform_image_is_fully_labeled() {
    let intr = small_intrinsics(32, 32);
    let f = flat_frame(32, 32, |_, _| [120, 120, 120]);
    // β times the spatial spread of the image stays below the threshold
    let p = RegionParams {
        threshold: 1.0,
        ..RegionParams::default()
    };
    let (img, stats) = region_grow(&f, &intr, (5, 5), &p, 1).unwrap();
    assert_eq!(img.count(1), 32 * 32);
    assert_eq!(stats.count, 32 * 32);
}

#[test]
fn two_flat_regions_match_the_flood_oracle() {
    let intr = small_intrinsics(32, 32);
    let f = flat_frame(32, 32, two_region);
    let p = RegionParams::default();
    let (img, _) = region_grow(&f, &intr, (3, 10), &p, 7).unwrap();
    let oracle = oracle_grow(&f, &intr, (3, 10), &p);
    for (i, &l) in img.labels.iter().enumerate() {
        assert_eq!(l == 7, oracle[i]);
        assert_eq!(l == 7, i % 32 < 16);
    }
}

#[test]
fn noisy_images_match_the_flood_oracle() {
    let intr = small_intrinsics(32, 32);
    let mut state = 0x1234_5678u32;
    let mut noise = || {
        state ^= state << 13;
        state ^= state >> 17;
        state ^= state << 5;
        (state % 24) as u8
    };
    let colors: Vec<[u8; 3]> = (0..32 * 32)
        .map(|i| {
            let base = two_region(i % 32, i / 32);
            [base[0] + noise(), base[1] + noise(), base[2] + noise()]
        })
        .collect();
    let f = flat_frame(32, 32, |u, v| colors[v * 32 + u]);
    for update in [ClusterUpdate::Incremental, ClusterUpdate::Frozen] {
        for threshold in [4.0, 8.0, 12.0, 20.0] {
            let p = RegionParams {
                threshold,
                update,
                ..RegionParams::default()
            };
            let (img, _) = region_grow(&f, &intr, (20, 20), &p, 1).unwrap();
            let oracle = oracle_grow(&f, &intr, (20, 20), &p);
            let got: Vec<bool> = img.labels.iter().map(|&l| l == 1).collect();
            assert_eq!(got, oracle, "threshold {threshold} {update:?}");
        }
    }
}

#[test]
fn zero_threshold_keeps_only_the_seed() {
    let intr = small_intrinsics(32, 32);
    let f = flat_frame(32, 32, |_, _| [10, 200, 10]);
    let p = RegionParams {
        threshold: 0.0,
        ..RegionParams::default()
    };
    let (img, _) = region_grow(&f, &intr, (16, 16), &p, 1).unwrap();
    assert_eq!(img.count(1), 1);
    assert_eq!(img.get(16, 16), 1);
}

#[test]
fn seed_without_depth_is_rejected() {
    let intr = small_intrinsics(8, 8);
    let mut f = flat_frame(8, 8, |_, _| [0, 0, 0]);
    f.depth[0] = 0;
    assert_eq!(
        region_grow(&f, &intr, (0, 0), &RegionParams::default(), 1).unwrap_err(),
        SegmentError::InvalidSeed
    );
}

/// Box on a floor seen from above; truth is the set of pixels whose ray
/// hits the box.
pub fn box_top_frame() -> (RgbdFrame, CameraIntrinsics, LabelImage, (usize, usize)) {
    let intr = CameraIntrinsics::default();
    let lo = Vec3::new(0.2, -0.3, 0.0);
    let hi = Vec3::new(0.8, 0.3, 0.3);
    let scene = Scene::flat(Aabb::new(Vec3::new(-5.0, -5.0, -1.0), Vec3::new(5.0, 5.0, 3.0))).with_box(lo, hi, [190, 60, 30]);
    let pose = RigidTransform::look_at(Vec3::new(0.0, 0.0, 1.4), Vec3::new(0.5, 0.0, 0.0));
    let frame = render_frame(&scene, &pose, &intr);
    let mut truth = LabelImage::new(intr.width, intr.height);
    for v in 0..intr.height {
        for u in 0..intr.width {
            let dir = pose.apply_vector(&intr.pixel_ray(u as f64, v as f64));
            if let Some(hit) = scene.intersect(&pose.translation, &dir) {
                let p = pose.translation + dir * hit.t;
                let e = 1e-9;
                if (0..3).all(|k| p[k] >= lo[k] - e && p[k] <= hi[k] + e) {
                    truth.labels[v * intr.width + u] = 1;
                }
            }
        }
    }
    let seed = seed_from_mark(&Vec3::new(0.5, 0.0, 0.3), &pose, &intr).unwrap();
    (frame, intr, truth, seed)
}

#[test]
fn box_scene_segments_with_high_iou() {
    let (frame, intr, truth, seed) = box_top_frame();
    let (img, _) = region_grow(&frame, &intr, seed, &RegionParams::default(), 1).unwrap();
    let score = iou(&img, 1, &truth, 1);
    assert!(score >= 0.99, "iou {score}");
}

#[test]
fn object_extent_of_labeled_box() {
    let mut vol = TsdfVolume::new(TsdfParams::with_resolution(64), Vec3::zeros()).unwrap();
    assert_eq!(object_extent(&vol, 3), Err(SegmentError::UnknownLabel(3)));
    // voxels 10..=19 in each axis: centers 0.105..0.195
    for k in 10..20 {
        for j in 10..20 {
            for i in 10..20 {
                let idx = vol.index(i, j, k);
                vol.set_voxel(idx, Voxel { label: 3, label_weight: 1, ..vol.voxel(idx) });
            }
        }
    }
    let e = object_extent(&vol, 3).unwrap();
    assert!((e.centroid - Vec3::repeat(0.15)).norm() < 1e-9);
    assert_eq!(e.voxels, 1000);
    assert!((e.bounds.min - Vec3::repeat(0.105)).norm() < 1e-9);

    let idx = vol.index(40, 41, 42);
    vol.set_voxel(idx, Voxel { label: 9, label_weight: 1, ..vol.voxel(idx) });
    let single = object_extent(&vol, 9).unwrap();
    assert_eq!(single.centroid, vol.voxel_center(40, 41, 42));
    assert_eq!(single.bounds.min, single.bounds.max);
    assert_eq!(next_label(&vol), 10);
}

// Brute-force metric oracles over pixel pairs.

fn brute_pri(a: &[u16], b: &[u16]) -> f64 {
    let n = a.len();
    let (mut agree, mut total) = (0u64, 0u64);
    for i in 0..n {
        for j in i + 1..n {
            total += 1;
            if (a[i] == a[j]) == (b[i] == b[j]) {
                agree += 1;
            }
        }
    }
    agree as f64 / total as f64
}

fn brute_gce(a: &[u16], b: &[u16]) -> f64 {
    let n = a.len();
    let lre = |x: &[u16], y: &[u16], p: usize| {
        let region: Vec<usize> = (0..n).filter(|&q| x[q] == x[p]).collect();
        let outside = region.iter().filter(|&&q| y[q] != y[p]).count();
        outside as f64 / region.len() as f64
    };
    let e1: f64 = (0..n).map(|p| lre(a, b, p)).sum();
    let e2: f64 = (0..n).map(|p| lre(b, a, p)).sum();
    e1.min(e2) / n as f64
}

fn brute_boundary(l: &[u16], w: usize, h: usize) -> Vec<(i64, i64)> {
    let mut out = Vec::new();
    for v in 0..h as i64 {
        for u in 0..w as i64 {
            let me = l[(v * w as i64 + u) as usize];
            let differs = [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(du, dv)| {
                let (x, y) = (u + du, v + dv);
                x >= 0 && y >= 0 && x < w as i64 && y < h as i64 && l[(y * w as i64 + x) as usize] != me
            });
            if differs {
                out.push((u, v));
            }
        }
    }
    out
}

fn brute_bde(a: &[u16], b: &[u16], w: usize, h: usize) -> f64 {
    let ba = brute_boundary(a, w, h);
    let bb = brute_boundary(b, w, h);
    if ba.is_empty() && bb.is_empty() {
        return 0.0;
    }
    if ba.is_empty() || bb.is_empty() {
        return ((w * w + h * h) as f64).sqrt();
    }
    let directed = |from: &[(i64, i64)], to: &[(i64, i64)]| {
        from.iter()
            .map(|p| to.iter().map(|q| (((p.0 - q.0).pow(2) + (p.1 - q.1).pow(2)) as f64).sqrt()).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / from.len() as f64
    };
    0.5 * (directed(&ba, &bb) + directed(&bb, &ba))
}

fn image_from_bits(bits: u32) -> Vec<u16> {
    (0..16).map(|i| ((bits >> i) & 1) as u16 + 1).collect()
}

#[test]
fn metrics_match_brute_force_on_all_two_label_4x4_images() {
    let truths = [0x0000u32, 0x00ff, 0x3333, 0x0f0f, 0x8421, 0xa5a5, 0x0660, 0xfff0];
    for &t in &truths {
        let truth = LabelImage::from_vec(4, 4, image_from_bits(t)).unwrap();
        for bits in 0..(1u32 << 16) {
            let seg = LabelImage::from_vec(4, 4, image_from_bits(bits)).unwrap();
            let m = evaluate(&seg, &truth).unwrap();
            assert!((m.pri - brute_pri(&seg.labels, &truth.labels)).abs() <= 1e-12);
            assert!((m.gce - brute_gce(&seg.labels, &truth.labels)).abs() <= 1e-12);
            assert!((m.bde - brute_bde(&seg.labels, &truth.labels, 4, 4)).abs() <= 1e-12);
        }
    }
}

#[test]
fn label_fusion_rules() {
    assert_eq!(fuse_label(0, 0, 1), (1, 1));
    assert_eq!(fuse_label(1, 2, 2), (1, 1));
    assert_eq!(fuse_label(1, 1, 2), (2, 1));
    assert_eq!(fuse_label(1, 1, 1), (1, 2));
    assert_eq!(fuse_label(4, 3, 0), (4, 3));
}

fn labels_strategy(w: usize, h: usize, k: u16) -> impl Strategy<Value = LabelImage> {
    prop::collection::vec(0..k, w * h).prop_map(move |l| LabelImage::from_vec(w, h, l).unwrap())
}

fn is_four_connected(img: &LabelImage, label: u16, seed: (usize, usize)) -> bool {
    let (w, h) = (img.width, img.height);
    let mut seen = vec![false; w * h];
    let mut stack = vec![seed];
    seen[seed.1 * w + seed.0] = true;
    let mut n = 0;
    while let Some((u, v)) = stack.pop() {
        n += 1;
        for (du, dv) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
            let (x, y) = (u as i64 + du, v as i64 + dv);
            if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                continue;
            }
            let i = y as usize * w + x as usize;
            if !seen[i] && img.labels[i] == label {
                seen[i] = true;
                stack.push((x as usize, y as usize));
            }
        }
    }
    n == img.count(label)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn grown_region_is_connected_and_holds_the_seed(
        colors in prop::collection::vec(prop::array::uniform3(0u8..255), 16 * 16),
        depths in prop::collection::vec(prop::option::weighted(0.9, 800u16..1200), 16 * 16),
        su in 0usize..16, sv in 0usize..16,
        threshold in 0.0f64..60.0,
    ) {
        let intr = small_intrinsics(16, 16);
        let mut f = flat_frame(16, 16, |u, v| colors[v * 16 + u]);
        for (d, o) in f.depth.iter_mut().zip(&depths) {
            *d = o.unwrap_or(0);
        }
        let seed_idx = sv * 16 + su;
        f.depth[seed_idx] = 1000;
        let p = RegionParams { threshold, ..RegionParams::default() };
        let (img, stats) = region_grow(&f, &intr, (su, sv), &p, 5).unwrap();
        prop_assert_eq!(img.labels[seed_idx], 5);
        prop_assert_eq!(stats.count, img.count(5));
        prop_assert!(is_four_connected(&img, 5, (su, sv)));
    }

    #[test]
    fn frozen_growth_is_monotone_in_threshold(
        colors in prop::collection::vec(prop::array::uniform3(0u8..255), 16 * 16),
        t1 in 0.0f64..60.0, dt in 0.0f64..30.0,
    ) {
        let intr = small_intrinsics(16, 16);
        let f = flat_frame(16, 16, |u, v| colors[v * 16 + u]);
        let grow = |t| {
            let p = RegionParams { threshold: t, update: ClusterUpdate::Frozen, ..RegionParams::default() };
            region_grow(&f, &intr, (8, 8), &p, 1).unwrap().0
        };
        let small = grow(t1);
        let large = grow(t1 + dt);
        for (a, b) in small.labels.iter().zip(&large.labels) {
            prop_assert!(*a == 0 || *b == 1);
        }
    }

    #[test]
    fn metric_ranges_and_symmetry(a in labels_strategy(8, 6, 4), b in labels_strategy(8, 6, 4)) {
        let m = evaluate(&a, &b).unwrap();
        let r = evaluate(&b, &a).unwrap();
        prop_assert!((0.0..=1.0).contains(&m.pri));
        prop_assert!((0.0..=1.0).contains(&m.gce));
        prop_assert!(m.bde >= 0.0);
        prop_assert_eq!(m.bde, r.bde);
        prop_assert_eq!(m.pri, r.pri);
        prop_assert!((m.gce - r.gce).abs() <= 1e-12);
    }

    #[test]
    fn label_fusion_keeps_weights_positive(
        obs in prop::collection::vec(0u16..4, 1..40)
    ) {
        let (mut l, mut w) = (0u16, 0u16);
        for o in obs {
            (l, w) = fuse_label(l, w, o);
            prop_assert!(l == 0 || w > 0);
        }
    }
}
