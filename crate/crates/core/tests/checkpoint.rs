use std::collections::BTreeMap;

use candle_core::{Device, Tensor};

use llfer::model::ModelConfig;
use llfer::training::{Checkpoint, CheckpointMeta, TrainConfig};

fn sample() -> Checkpoint {
    let names: Vec<String> = ["fear", "surprise"].iter().map(|s| s.to_string()).collect();
    let mut tensors = BTreeMap::new();
    for (i, name) in ["b/w", "a/bias", "c/x/y"].iter().enumerate() {
        let v: Vec<f32> = (0..6).map(|j| (i * 6 + j) as f32 * 0.25 - 1.0).collect();
        tensors.insert(name.to_string(), Tensor::from_vec(v, (2, 3), &Device::Cpu).unwrap());
    }
    Checkpoint {
        meta: CheckpointMeta {
            stage: 1,
            model: ModelConfig::desk(&names, 5),
            train: TrainConfig::desk(),
            toggles: None,
        },
        tensors,
    }
}

#[test]
fn equal_checkpoints_serialize_to_equal_bytes() {
    // The header metadata goes through a hash map; repeated serialization
    // must still be byte-identical.
    let a = sample().to_bytes().unwrap();
    for _ in 0..8 {
        assert_eq!(a, sample().to_bytes().unwrap());
    }
}

#[test]
fn round_trip_preserves_meta_and_arrays() {
    let ckpt = sample();
    let back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
    assert_eq!(back.meta, ckpt.meta);
    assert_eq!(back.tensors.keys().collect::<Vec<_>>(), ckpt.tensors.keys().collect::<Vec<_>>());
    for (k, t) in &ckpt.tensors {
        let a = t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = back.tensors[k].flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b, "{k}");
        assert_eq!(t.dims(), back.tensors[k].dims());
    }
}

#[test]
fn corrupted_or_wrong_stage_files_are_rejected() {
    let ckpt = sample();
    let bytes = ckpt.to_bytes().unwrap();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() / 2]).is_err());
    assert!(Checkpoint::from_bytes(b"not a checkpoint").is_err());
    let mut s2 = ckpt.clone();
    s2.meta.stage = 2;
    assert!(s2.validate_stage1(None).is_err());
}

#[test]
fn save_and_load_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/ck.safetensors");
    let ckpt = sample();
    ckpt.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), ckpt.to_bytes().unwrap());
    assert_eq!(Checkpoint::load(&path).unwrap().meta, ckpt.meta);
    assert!(Checkpoint::load(&dir.path().join("missing.safetensors")).is_err());
}
