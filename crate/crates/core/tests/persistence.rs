use sspnet::checkpoint::{self, FORMAT_VERSION};
use sspnet::datamodel::{generate_synthetic, load_manifest, save_manifest, Split, SyntheticSpec};
use sspnet::trainer::{train, Checkpoint, TrainConfig};
use sspnet::Error;

fn tiny_checkpoint() -> Checkpoint {
    let data = generate_synthetic(&SyntheticSpec::standard(48), 2).unwrap();
    let (train_set, val) = data.split_at(32, Split::Train, Split::Val);
    let config = TrainConfig {
        epochs: 2,
        search_epochs: 1,
        batch_size: 16,
        channels: 4,
        feature_dim: 8,
        stage_widths: [4, 4, 4, 4],
        ..TrainConfig::default()
    };
    train(&config, &train_set, &val).unwrap()
}

#[test]
fn checkpoint_round_trips_bytes() {
    let ck = tiny_checkpoint();
    let bytes = checkpoint::to_bytes(&ck);
    let back = checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.config, ck.config);
    assert_eq!(back.epoch, ck.epoch);
    assert_eq!(back.history, ck.history);
    assert_eq!(back.weights, ck.weights);
    assert_eq!(back.model.selection, ck.model.selection);
    for (name, value) in ck.model.store.iter() {
        assert_eq!(back.model.store.get(name), value, "{name}");
    }
    assert_eq!(checkpoint::to_bytes(&back), bytes);
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let bytes = checkpoint::to_bytes(&tiny_checkpoint());

    let truncated = &bytes[..bytes.len() / 2];
    assert!(matches!(checkpoint::from_bytes(truncated), Err(Error::Integrity(_))));

    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x40;
    assert!(matches!(checkpoint::from_bytes(&flipped), Err(Error::Integrity(_))));

    let mut future = bytes.clone();
    future[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    assert!(matches!(
        checkpoint::from_bytes(&future),
        Err(Error::Version { found, .. }) if found == FORMAT_VERSION + 1
    ));

    assert!(matches!(checkpoint::from_bytes(b"not a model"), Err(Error::Integrity(_))));
}

#[test]
fn checkpoint_file_round_trip() {
    let ck = tiny_checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.sspnet");
    checkpoint::save(&ck, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(checkpoint::to_bytes(&back), checkpoint::to_bytes(&ck));
    assert!(checkpoint::load(dir.path().join("missing.sspnet")).is_err());
}

#[test]
fn manifest_round_trip_keeps_labels_boxes_and_keypoints() {
    let data = generate_synthetic(&SyntheticSpec::standard(12), 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = save_manifest(&data, dir.path(), "val.jsonl").unwrap();
    let back = load_manifest(&path, &data.schema).unwrap();
    assert_eq!(back.split, Split::Val);
    assert_eq!(back.len(), data.len());
    for (a, b) in data.samples.iter().zip(&back.samples) {
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.gt_boxes, b.gt_boxes);
        let (ka, kb) = (a.keypoints.as_ref().unwrap(), b.keypoints.as_ref().unwrap());
        for (p, q) in ka.iter().zip(kb) {
            assert!((p.x - q.x).abs() < 1e-9 && (p.y - q.y).abs() < 1e-9);
            assert_eq!(p.in_frame, q.in_frame);
        }
        // 8-bit PNG quantization
        let err = (&a.image - &b.image).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        assert!(err <= 0.5 / 255.0 + 1e-9, "pixel error {err}");
    }
}

#[test]
fn manifest_errors_name_the_line() {
    let data = generate_synthetic(&SyntheticSpec::standard(2), 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("test.jsonl");
    std::fs::write(&path, "{\"image\": \"a.png\", \"labels\": [0]}\nnot json\n").unwrap();
    assert!(load_manifest(&path, &data.schema).is_err());
    std::fs::write(&path, "\n{bad\n").unwrap();
    assert!(matches!(load_manifest(&path, &data.schema), Err(Error::Parse { line: 2, .. })));
}
