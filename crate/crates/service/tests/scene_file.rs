mod common;

use dmiso_core::deform::DeformFieldParams;
use dmiso_core::edit::{EditOp, EditSession, Selection};
use dmiso_core::multigauss::SoupScene;
use dmiso_service::scene_file::*;

fn edited(seed: u64) -> SceneFile {
    let mut file = common::scene_file(seed, 4, 3);
    let mut session = EditSession::freeze(&file.scene, &file.params, 0.3).unwrap();
    session.apply(&EditOp::Remove { selection: Selection::Indices(vec![1, 5]) }).unwrap();
    file.session = Some(session);
    file.time_range = [0.1, 0.9];
    file
}

#[test]
fn empty_scene_round_trips() {
    let file = SceneFile::new(SoupScene::new(0, [0.0; 3]), DeformFieldParams::new(Default::default(), 0));
    let bytes = encode_scene(&file).unwrap();
    let back = decode_scene(&bytes).unwrap();
    assert_eq!(back, file);
    let (header, _) = decode_header(&bytes).unwrap();
    assert_eq!(header.p, 0);
    assert_eq!(header.version, VERSION);
}

#[test]
fn random_scenes_round_trip_bit_exactly() {
    for seed in 0..5 {
        let file = if seed % 2 == 0 { common::scene_file(seed, 6, 4) } else { edited(seed) };
        let bytes = encode_scene(&file).unwrap();
        let back = decode_scene(&bytes).unwrap();
        assert_eq!(back, file);
        assert_eq!(encode_scene(&back).unwrap(), bytes);
    }
}

#[test]
fn save_and_load_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scene.dms");
    let file = edited(9);
    save_scene(&path, &file).unwrap();
    assert_eq!(load_scene(&path).unwrap(), file);
}

#[test]
fn truncation_is_reported() {
    let bytes = encode_scene(&common::scene_file(1, 3, 2)).unwrap();
    let cut = &bytes[..bytes.len() - 1];
    assert!(matches!(decode_scene(cut), Err(SceneFileError::TruncatedPayload { .. })));
    let mut long = bytes.clone();
    long.extend_from_slice(&[0; 8]);
    assert!(matches!(decode_scene(&long), Err(SceneFileError::TrailingPayload(8))));
    assert!(matches!(decode_scene(&bytes[..6]), Err(SceneFileError::BadMagic)));
}

#[test]
fn version_is_checked() {
    let bytes = encode_scene(&common::scene_file(2, 2, 1)).unwrap();
    let (_, payload) = decode_header(&bytes).unwrap();
    let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let mut header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + len]).unwrap();
    header["version"] = 99.into();
    let json = serde_json::to_vec(&header).unwrap();
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(payload);
    assert!(matches!(decode_scene(&out), Err(SceneFileError::VersionMismatch { found: 99, .. })));
}

#[test]
fn mixed_sh_degrees_are_rejected() {
    let mut file = common::scene_file(3, 2, 1);
    file.scene.multis[0].subs[0].appearance.sh.truncate(3);
    assert!(matches!(encode_scene(&file), Err(SceneFileError::MixedShDegree(1))));
}
