use perceiver_vl::checkpoint::*;
use perceiver_vl::encoder::EncoderConfig;
use perceiver_vl::model::{ModelConfig, PerceiverVl};
use perceiver_vl::tensor::{ParamStore, Tensor};
use perceiver_vl::Error;
use sha2::{Digest, Sha256};

fn cfg(n: usize) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            d: 16,
            heads: 2,
            k: 2,
            l: 1,
            n_latents: n,
            ..EncoderConfig::toy()
        },
        ..ModelConfig::default()
    }
}

fn bytes_of(cfg: &ModelConfig, store: &ParamStore<f32>, step: u64) -> Vec<u8> {
    checkpoint_container(cfg, store, 9, step).unwrap().to_bytes().unwrap()
}

/// Re-seals a modified body with a fresh trailing digest.
fn reseal(mut body: Vec<u8>) -> Vec<u8> {
    let d = Sha256::digest(&body);
    body.extend_from_slice(&d);
    body
}

#[test]
fn round_trip_is_bit_exact() {
    let c = cfg(4);
    let (_, store) = PerceiverVl::init::<f32>(&c, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    save_checkpoint(&a, &c, &store, 9, 12).unwrap();
    let ck = load_checkpoint(&a).unwrap();
    assert_eq!(ck.header.model, c);
    assert_eq!((ck.header.seed, ck.header.step), (9, 12));
    assert_eq!(ck.header.vocab, VocabSpec::default());

    let (_, mut fresh) = PerceiverVl::init::<f32>(&c, 2).unwrap();
    assert_ne!(fresh.digest(), store.digest());
    ck.restore(&mut fresh).unwrap();
    for id in store.ids() {
        assert!(store.tensor(id).bit_eq(fresh.tensor(id)));
    }
    save_checkpoint(&b, &c, &fresh, 9, 12).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn same_seed_same_bytes() {
    let c = cfg(4);
    let (_, s1) = PerceiverVl::init::<f32>(&c, 3).unwrap();
    let (_, s2) = PerceiverVl::init::<f32>(&c, 3).unwrap();
    assert_eq!(bytes_of(&c, &s1, 0), bytes_of(&c, &s2, 0));
}

#[test]
fn corruption_is_caught_by_checksum() {
    let c = cfg(4);
    let (_, store) = PerceiverVl::init::<f32>(&c, 1).unwrap();
    let bytes = bytes_of(&c, &store, 0);
    for cut in [0, 7, 40, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(Container::from_bytes(&bytes[..cut]), Err(Error::Checksum)), "cut {cut}");
    }
    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x10;
    assert!(matches!(Container::from_bytes(&flipped), Err(Error::Checksum)));
}

#[test]
fn version_and_magic_are_checked() {
    let c = cfg(4);
    let (_, store) = PerceiverVl::init::<f32>(&c, 1).unwrap();
    let bytes = bytes_of(&c, &store, 0);
    let body = bytes[..bytes.len() - 32].to_vec();

    let mut v2 = body.clone();
    v2[8..12].copy_from_slice(&2u32.to_le_bytes());
    assert!(matches!(
        Container::from_bytes(&reseal(v2)),
        Err(Error::Version { found: 2, expected: 1 })
    ));

    let mut magic = body;
    magic[0] = b'X';
    assert!(matches!(Container::from_bytes(&reseal(magic)), Err(Error::Format(_))));
}

#[test]
fn missing_tensor_and_shape_errors_are_distinct() {
    let c = cfg(4);
    let (_, store) = PerceiverVl::init::<f32>(&c, 1).unwrap();
    let mut container = checkpoint_container(&c, &store, 0, 0).unwrap();
    let dropped = container.tensors.remove(3).0;
    let ck = checkpoint_from_container(container).unwrap();
    let mut target = store.clone();
    match ck.restore(&mut target) {
        Err(Error::MissingTensor(name)) => assert_eq!(name, dropped),
        other => panic!("{other:?}"),
    }

    // A checkpoint for N=4 loaded into an N=6 model names the latent table.
    let ck = checkpoint_from_container(checkpoint_container(&c, &store, 0, 0).unwrap()).unwrap();
    let (_, mut bigger) = PerceiverVl::init::<f32>(&cfg(6), 1).unwrap();
    match ck.restore(&mut bigger) {
        Err(Error::TensorShape { name, found, expected }) => {
            assert!(name.starts_with("latent."), "{name}");
            assert_eq!(found[0], 4);
            assert_eq!(expected[0], 6);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn duplicate_names_and_extra_tensors_are_rejected() {
    let t = Tensor::<f32>::zeros(&[2, 2]);
    let dup = Container {
        header: serde_json::json!({}),
        tensors: vec![("a".into(), t.clone()), ("a".into(), t.clone())],
    };
    assert!(matches!(Container::from_bytes(&dup.to_bytes().unwrap()), Err(Error::Format(_))));

    let c = cfg(4);
    let (_, store) = PerceiverVl::init::<f32>(&c, 1).unwrap();
    let mut container = checkpoint_container(&c, &store, 0, 0).unwrap();
    container.tensors.push(("extra".into(), t));
    let ck = checkpoint_from_container(container).unwrap();
    let mut target = store.clone();
    assert!(matches!(ck.restore(&mut target), Err(Error::Format(_))));
}

#[test]
fn header_rejects_unknown_fields() {
    let c = cfg(4);
    let (_, store) = PerceiverVl::init::<f32>(&c, 1).unwrap();
    let mut container = checkpoint_container(&c, &store, 0, 0).unwrap();
    container.header["surprise"] = serde_json::json!(1);
    assert!(matches!(checkpoint_from_container(container), Err(Error::Json(_))));
}
