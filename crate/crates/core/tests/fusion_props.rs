use proptest::prelude::*;
use telehaptic_core::camera::{CameraIntrinsics, RgbdFrame};
use telehaptic_core::geometry::{RigidTransform, Vec3};
use telehaptic_core::tsdf::{TsdfParams, TsdfVolume};

fn intrinsics() -> CameraIntrinsics {
    CameraIntrinsics {
        fx: 12.0,
        fy: 12.0,
        cx: 8.0,
        cy: 8.0,
        width: 16,
        height: 16,
        ..CameraIntrinsics::default()
    }
}

fn frame(depth: Vec<u16>, shift: f64) -> RgbdFrame {
    RgbdFrame {
        seq: 0,
        timestamp_ms: 0,
        width: 16,
        height: 16,
        color: vec![[100, 100, 100]; depth.len()],
        depth,
        pose: RigidTransform::from_translation(Vec3::new(shift, 0.0, 0.0)),
    }
}

fn params(max_weight: u8) -> TsdfParams {
    TsdfParams {
        resolution: 64,
        voxel_size: 0.0125,
        truncation: 0.1,
        max_weight,
    }
}

fn depth_image() -> impl Strategy<Value = Vec<u16>> {
    prop::collection::vec(prop_oneof![1 => Just(0u16), 6 => 500u16..1200], 256)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fused_values_stay_bounded(
        frames in prop::collection::vec((depth_image(), -0.05f64..0.05), 1..6),
        cap in 1u8..4,
    ) {
        let intr = intrinsics();
        let mut vol = TsdfVolume::new(params(cap), Vec3::new(-0.4, -0.4, 0.3)).unwrap();
        for (d, s) in frames {
            vol.integrate_frame(&frame(d, s), &intr).unwrap();
        }
        prop_assert!(vol.tsdf_values().iter().all(|t| t.abs() <= 1.0));
        prop_assert!(vol.weights().iter().all(|&w| w <= cap));
    }

    #[test]
    fn two_frame_fusion_is_order_insensitive(a in depth_image(), b in depth_image(), s in -0.05f64..0.05) {
        let intr = intrinsics();
        let origin = Vec3::new(-0.4, -0.4, 0.3);
        let mut ab = TsdfVolume::new(params(128), origin).unwrap();
        let mut ba = TsdfVolume::new(params(128), origin).unwrap();
        let (fa, fb) = (frame(a, 0.0), frame(b, s));
        ab.integrate_frame(&fa, &intr).unwrap();
        ab.integrate_frame(&fb, &intr).unwrap();
        ba.integrate_frame(&fb, &intr).unwrap();
        ba.integrate_frame(&fa, &intr).unwrap();
        prop_assert_eq!(ab.weights(), ba.weights());
        for (x, y) in ab.tsdf_values().iter().zip(ba.tsdf_values()) {
            prop_assert!((x - y).abs() <= 1e-6);
        }
    }
}
