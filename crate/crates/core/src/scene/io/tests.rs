use super::*;
use crate::experts::{ExpertConfig, ParamGroup};
use crate::scene::{synth_scene, SceneSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn micro() -> crate::scene::SynthScene {
    synth_scene(3, &SceneSpec::micro()).unwrap()
}

#[test]
fn scene_round_trip_is_exact_for_f32_values() {
    let s = micro();
    let cams: Vec<Camera> = s.dataset.views().iter().map(|v| v.camera.clone()).collect();
    let bytes = encode_scene(&s.init, &cams).unwrap();
    let (g, c) = decode_scene(&bytes).unwrap();
    assert_eq!(c, cams);
    assert_eq!(g.len(), s.init.len());
    for (a, b) in g.iter().zip(&s.init) {
        assert_eq!(a.mean(), b.mean());
        assert_eq!(a.opacity(), b.opacity());
        assert_eq!(a.color(), b.color());
        assert!((a.rotation().angle_to(b.rotation())).abs() < 1e-6);
    }
}

#[test]
fn dataset_round_trip_is_exact() {
    let s = micro();
    let bytes = encode_dataset(&s.dataset).unwrap();
    assert_eq!(decode_dataset(&bytes).unwrap(), s.dataset);
}

#[test]
fn ground_truth_round_trip_rerenders_identically() {
    let s = micro();
    let gt = decode_ground_truth(&encode_ground_truth(&s.ground_truth).unwrap()).unwrap();
    assert_eq!(gt.regimes, s.ground_truth.regimes);
    for v in s.dataset.views() {
        assert!(gt.render(v).unwrap().max_abs_diff(v.gt().unwrap()) <= 1e-6);
    }
}

#[test]
fn expert_round_trip_keeps_motion_exactly() {
    let s = micro();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for kind in ExpertKind::ALL {
        let mut e = ExpertModel::init(kind, &s.init, &ExpertConfig::default(), &mut rng).unwrap();
        e.params_mut(ParamGroup::Motion)[0] += 1.0 / 3.0;
        e.freeze();
        let d = decode_expert(&encode_expert(&e).unwrap()).unwrap();
        assert_eq!(d.kind(), kind);
        assert_eq!(d.params(ParamGroup::Motion), e.params(ParamGroup::Motion));
        assert_eq!(d.params(ParamGroup::Network), e.params(ParamGroup::Network));
        assert!(d.is_frozen());
        for (a, b) in d.params(ParamGroup::Color).iter().zip(e.params(ParamGroup::Color)) {
            assert!((a - b).abs() < 1e-7);
        }
    }
}

#[test]
fn router_round_trip_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for kind in RouterKind::ALL {
        let mut r = Router::init(kind, &[4, 7], &mut rng).unwrap();
        for g in crate::router::RouterGroup::ALL {
            for (i, v) in r.params_mut(g).iter_mut().enumerate() {
                *v += (i as f64).sin() / 7.0;
            }
        }
        assert_eq!(decode_router(&encode_router(&r).unwrap()).unwrap(), r);
    }
}

#[test]
fn image_sidecar_round_trip() {
    let img = ImageBuffer::from_fn(3, 5, 2, |y, x, c| (y * 10 + x * 2 + c) as f64 / 64.0);
    assert_eq!(decode_image(&encode_image(&img).unwrap()).unwrap(), img);
}

#[test]
fn corrupt_files_are_rejected() {
    let img = ImageBuffer::filled(2, 2, 1, 0.5);
    let bytes = encode_image(&img).unwrap();
    assert!(matches!(decode_image(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(decode_image(&extra), Err(Error::Format(_))));
    assert!(matches!(decode_router(&bytes), Err(Error::Format(_))));
    let text = String::from_utf8_lossy(&bytes).replace("\"version\":1", "\"version\":9");
    assert!(matches!(decode_image(text.as_bytes()), Err(Error::Format(_))));
    assert!(matches!(decode_image(b"no header"), Err(Error::Format(_))));
}

#[test]
fn motion_kind_tag_must_match_header() {
    let s = micro();
    let e = ExpertModel::init(ExpertKind::Keyframe, &s.init, &ExpertConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut bytes = encode_expert(&e).unwrap();
    let header_end = bytes.iter().position(|&b| b == b'\n').unwrap() + 1;
    let floats = 4 * e.len() * (GAUSSIAN_STRIDE + 4 + 3 + 3 + 1);
    assert_eq!(bytes[header_end + floats], 1);
    bytes[header_end + floats] = 0;
    assert!(matches!(decode_expert(&bytes), Err(Error::Format(_))));
}
