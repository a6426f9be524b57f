use std::collections::HashSet;

use perceiver_vl::corpus::*;
use perceiver_vl::embedding::{vocab, TextInput};
use perceiver_vl::model::{ModelConfig, PerceiverVl};
use perceiver_vl::tensor::{Tape, Tensor};
use perceiver_vl::Error;

fn small(seed: u64) -> CorpusConfig {
    CorpusConfig {
        seed,
        train: 40,
        val: 12,
        test: 12,
        image_size: 32,
        ..CorpusConfig::default()
    }
}

#[test]
fn same_seed_gives_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate(&small(3)).unwrap().save(a.path()).unwrap();
    generate(&small(3)).unwrap().save(b.path()).unwrap();
    for f in [INDEX_FILE, PIXELS_FILE] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
    }
    let c = tempfile::tempdir().unwrap();
    generate(&small(4)).unwrap().save(c.path()).unwrap();
    assert_ne!(
        std::fs::read(a.path().join(PIXELS_FILE)).unwrap(),
        std::fs::read(c.path().join(PIXELS_FILE)).unwrap()
    );
}

#[test]
fn save_load_round_trip() {
    let corpus = generate(&small(5)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    corpus.save(dir.path()).unwrap();
    let back = Corpus::load(dir.path()).unwrap();
    assert_eq!(back, corpus);
}

#[test]
fn truncated_pixels_are_rejected() {
    let corpus = generate(&small(5)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    corpus.save(dir.path()).unwrap();
    let p = dir.path().join(PIXELS_FILE);
    let bytes = std::fs::read(&p).unwrap();
    std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(Corpus::load(dir.path()), Err(Error::Format(_))));
}

#[test]
fn splits_ids_and_captions() {
    let corpus = generate(&small(6)).unwrap();
    let ids: HashSet<u64> = corpus.items.iter().map(|i| i.id).collect();
    assert_eq!(ids.len(), corpus.items.len());
    for split in [Split::Train, Split::Val, Split::Test] {
        let items = corpus.split(split);
        assert_eq!(items.len(), match split { Split::Train => 40, _ => 12 });
        if split != Split::Train {
            let caps: HashSet<&str> = items.iter().map(|i| i.caption.as_str()).collect();
            assert_eq!(caps.len(), items.len());
        }
    }
    for item in &corpus.items {
        assert_eq!(item.caption, item.scene.caption());
        assert!(item.caption.is_ascii());
        let t = TextInput::from_str(&item.caption, 64, None);
        assert!(t.token_ids.iter().all(|&id| id < 256 && !vocab::is_special(id)));
        assert!(item.caption.starts_with("a "));
    }
}

#[test]
fn qa_answers_are_in_vocabulary() {
    let corpus = generate(&small(7)).unwrap();
    let vocab = answer_vocab();
    assert_eq!(vocab.len(), 11);
    for item in &corpus.items {
        assert!(!item.qa.is_empty());
        for qa in &item.qa {
            assert!(vocab.contains(&qa.answer), "{}", qa.answer);
            assert!(answer_index(&qa.answer).is_some());
        }
        let count = &item.qa[0];
        assert_eq!(count.question, "how many shapes are there");
        assert_eq!(count.answer, item.scene.objects.len().to_string());
    }
}

#[test]
fn videos_move_and_say_so() {
    let cfg = CorpusConfig {
        video_fraction: 1.0,
        ..small(8)
    };
    let corpus = generate(&cfg).unwrap();
    for item in &corpus.items {
        assert!(item.is_video());
        assert_eq!(item.vision.frames, 4);
        assert!(item.caption.contains(" moving "));
        let frame = 32 * 32 * 3;
        let px = &item.vision.pixels;
        assert_ne!(&px[..frame], &px[3 * frame..], "frames identical for {}", item.caption);
    }
}

#[test]
fn pixels_are_unit_interval_and_background_is_black() {
    let corpus = generate(&small(9)).unwrap();
    for item in &corpus.items {
        assert!(item.vision.pixels.iter().all(|&p| (0.0..=1.0).contains(&p)));
        assert_eq!(&item.vision.pixels[..3], &[0.0, 0.0, 0.0]);
    }
}

#[test]
fn invalid_configs() {
    for cfg in [
        CorpusConfig { train: 1, ..small(0) },
        CorpusConfig { video_fraction: 1.5, ..small(0) },
        CorpusConfig { image_size: 8, ..small(0) },
    ] {
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
    }
    // Far more distinct captions than the grammar can produce.
    let too_many = CorpusConfig { val: 100_000, ..small(0) };
    assert!(generate(&too_many).is_err());
}

#[test]
fn temporal_embedding_carries_signal() {
    let cfg = CorpusConfig {
        video_fraction: 1.0,
        ..small(10)
    };
    let corpus = generate(&cfg).unwrap();
    let item = &corpus.items[0];
    let (m, store) = PerceiverVl::init::<f32>(&ModelConfig::default(), 1).unwrap();
    let mut ablated = store.clone();
    let t = store.tensor(m.tables.temporal);
    ablated.set(m.tables.temporal, Tensor::zeros(t.shape())).unwrap();
    let run = |s| {
        let mut g = Tape::with_params(s);
        let z = m.encode_pair(&mut g, Some((&item.vision, true)), None, &m.full_depth()).unwrap();
        g.value(z.z).clone()
    };
    assert!(!run(&store).bit_eq(&run(&ablated)));
}
