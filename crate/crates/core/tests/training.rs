use perceiver_vl::corpus::{generate, CorpusConfig, CorpusItem, Split};
use perceiver_vl::embedding::{vocab, TextInput};
use perceiver_vl::encoder::EncoderConfig;
use perceiver_vl::model::{ModelConfig, PerceiverVl};
use perceiver_vl::tensor::{ParamStore, Rng, Tape, Tensor};
use perceiver_vl::training::*;
use perceiver_vl::Error;

fn tiny_corpus() -> Vec<CorpusItem> {
    generate(&CorpusConfig {
        train: 24,
        val: 4,
        test: 4,
        image_size: 16,
        ..CorpusConfig::default()
    })
    .unwrap()
    .items
    .into_iter()
    .filter(|i| i.split == Split::Train)
    .collect()
}

fn tiny_model() -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.encoder = EncoderConfig {
        d: 16,
        heads: 2,
        k: 2,
        l: 1,
        n_latents: 4,
        ..EncoderConfig::toy()
    };
    cfg.embed.max_text_len = 48;
    cfg
}

fn tiny_train(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn vtm_batch_probabilities_and_rejection() {
    let items = tiny_corpus();
    let refs: Vec<&CorpusItem> = items.iter().collect();
    let mut rng = Rng::new(1);
    let all = make_vtm_batch(&refs, 500, 0.0, &mut rng).unwrap();
    assert!(all.iter().all(|p| p.is_match && p.text == p.vision));

    let draws = make_vtm_batch(&refs, 100_000, 0.5, &mut rng).unwrap();
    let neg = draws.iter().filter(|p| !p.is_match).count() as f64 / draws.len() as f64;
    assert!((0.495..=0.505).contains(&neg), "{neg}");
    for p in draws.iter().filter(|p| !p.is_match) {
        assert_ne!(p.text, p.vision);
        assert_ne!(refs[p.text].caption, refs[p.vision].caption);
    }

    assert!(matches!(
        make_vtm_batch(&refs[..1], 4, 0.5, &mut rng),
        Err(Error::Contract(_))
    ));
}

#[test]
fn mask_tokens_rates_and_pads() {
    let mut rng = Rng::new(2);
    let text = TextInput::from_str("a red circle", 16, Some(16));
    let mut selected = 0usize;
    let mut real = 0usize;
    let (mut masked, mut random, mut kept) = (0usize, 0usize, 0usize);
    while real < 100_000 {
        let m = mask_tokens(&text, &MaskSpec::default(), &mut rng);
        for i in 0..text.len() {
            if !text.attention_mask[i] {
                assert!(!m.flags[i]);
                assert_eq!(m.input.token_ids[i], vocab::PAD);
                continue;
            }
            real += 1;
            assert_eq!(m.flags[i], m.targets[i].is_some());
            if m.flags[i] {
                selected += 1;
                assert_eq!(m.targets[i], Some(text.token_ids[i]));
                match m.input.token_ids[i] {
                    vocab::MASK => masked += 1,
                    id if id == text.token_ids[i] => kept += 1,
                    id => {
                        assert!(id < 256);
                        random += 1
                    }
                }
            } else {
                assert_eq!(m.input.token_ids[i], text.token_ids[i]);
            }
        }
    }
    let rate = selected as f64 / real as f64;
    assert!((0.148..=0.152).contains(&rate), "{rate}");
    let mf = masked as f64 / selected as f64;
    assert!((0.78..=0.82).contains(&mf), "{mf}");
    // A random byte can coincide with the original, so "kept" absorbs a little of "random".
    assert!(random + kept > selected / 6);

    let all = MaskSpec { select: 1.0, mask: 1.0, random: 0.0 };
    let m = mask_tokens(&text, &all, &mut rng);
    for i in 0..text.len() {
        if text.attention_mask[i] {
            assert_eq!(m.input.token_ids[i], vocab::MASK);
        }
    }
}

#[test]
fn loss_values() {
    let mut g = Tape::<f64>::new();
    let zero = g.leaf(Tensor::zeros(&[3, 2]));
    let l = loss_vtm(&mut g, zero, &[true, false, true]).unwrap();
    assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-12);

    let sharp = g.leaf(Tensor::from_rows(&[vec![-40.0, 40.0], vec![40.0, -40.0]]).unwrap());
    let l = loss_vtm(&mut g, sharp, &[true, false]).unwrap();
    assert!(g.value(l).item() < 1e-12);

    let logits = g.leaf(Tensor::zeros(&[2, 5]));
    let l = loss_mlm(&mut g, logits, &[None, None]).unwrap();
    assert_eq!(g.value(l).item(), 0.0);

    let b = 6;
    let sim = Tensor::from_fn(&[b, b], |i| if i / b == i % b { 8.0 } else { 0.0 });
    let s = g.leaf(sim);
    let l = loss_contrastive(&mut g, s).unwrap();
    assert!(g.value(l).item() < (b as f64).ln());

    let flat = g.leaf(Tensor::zeros(&[b, b]));
    let l = loss_contrastive(&mut g, flat).unwrap();
    assert!((g.value(l).item() - (b as f64).ln()).abs() < 1e-12);

    let wide = g.leaf(Tensor::zeros(&[2, 3]));
    assert!(loss_contrastive(&mut g, wide).is_err());
}

#[test]
fn contrastive_is_symmetric_average() {
    let mut rng = Rng::new(3);
    let t = Tensor::from_fn(&[4, 4], |_| rng.normal());
    let mut g = Tape::<f64>::new();
    let s = g.leaf(t.clone());
    let l = loss_contrastive(&mut g, s).unwrap();
    let l = g.value(l).item();
    let diag: Vec<Option<usize>> = (0..4).map(Some).collect();
    let a = g.leaf(t.clone());
    let ra = g.cross_entropy(a, &diag).unwrap();
    let tt = g.transpose(a).unwrap();
    let rb = g.cross_entropy(tt, &diag).unwrap();
    let want = 0.5 * (g.value(ra).item() + g.value(rb).item());
    assert!((l - want).abs() < 1e-12);
}

fn scalar_store(w: f64, decay: bool) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.register("w", Tensor::new(&[1, 1], vec![w]).unwrap(), decay).unwrap();
    s
}

fn grads_of(store: &ParamStore<f64>, coef: f64) -> perceiver_vl::tensor::Gradients<f64> {
    let mut g = Tape::with_params(store);
    let w = g.param(store.id("w").unwrap());
    let l = g.scale(w, coef);
    let l = g.sum(l);
    g.backward(l).unwrap()
}

#[test]
fn adam_hand_step() {
    let mut store = scalar_store(1.0, false);
    let grads = grads_of(&store, 1.0);
    let mut st = OptimState::new(AdamConfig { lr: 0.1, weight_decay: 0.0, ..AdamConfig::default() });
    adam_step(&mut store, &grads, &mut st).unwrap();
    // m̂ = 1, v̂ = 1, so the step is lr / (1 + eps).
    let want = 1.0 - 0.1 / (1.0 + 1e-8);
    assert!((store.get("w").unwrap().item() - want).abs() < 1e-15);

    // Second step with the same gradient: m̂ = v̂ = 1 again.
    let grads = grads_of(&store, 1.0);
    adam_step(&mut store, &grads, &mut st).unwrap();
    assert!((store.get("w").unwrap().item() - (want - 0.1 / (1.0 + 1e-8))).abs() < 1e-12);
}

#[test]
fn adam_zero_grad_and_decay() {
    let mut store = scalar_store(2.0, false);
    let grads = grads_of(&store, 0.0);
    let mut st = OptimState::new(AdamConfig { lr: 0.1, weight_decay: 0.0, ..AdamConfig::default() });
    adam_step(&mut store, &grads, &mut st).unwrap();
    assert_eq!(store.get("w").unwrap().item(), 2.0);

    let mut store = scalar_store(2.0, true);
    let mut st = OptimState::new(AdamConfig { lr: 0.1, weight_decay: 0.5, ..AdamConfig::default() });
    adam_step(&mut store, &grads, &mut st).unwrap();
    assert!((store.get("w").unwrap().item() - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);

    let mut store = scalar_store(2.0, false);
    adam_step(&mut store, &grads, &mut st).unwrap();
    assert_eq!(store.get("w").unwrap().item(), 2.0);
}

#[test]
fn adam_respects_freeze_and_rejects_nan() {
    let mut store = scalar_store(1.0, true);
    let grads = grads_of(&store, 3.0);
    store.freeze_where(|_| true);
    let mut st = OptimState::new(AdamConfig::default());
    adam_step(&mut store, &grads, &mut st).unwrap();
    assert_eq!(store.get("w").unwrap().item(), 1.0);

    let store2 = scalar_store(1.0, true);
    let bad = {
        let mut g = Tape::with_params(&store2);
        let w = g.param(store2.id("w").unwrap());
        let x = g.leaf(Tensor::new(&[1, 1], vec![f64::NAN]).unwrap());
        let y = g.matmul(w, x).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap()
    };
    let mut s3 = scalar_store(1.0, true);
    let err = adam_step(&mut s3, &bad, &mut st).unwrap_err();
    match err {
        Error::Numeric(msg) => assert!(msg.contains('w')),
        e => panic!("{e:?}"),
    }
    assert_eq!(s3.get("w").unwrap().item(), 1.0);
}

#[test]
fn schedule_stages() {
    let s = Schedule::two_stage(3, 10);
    assert_eq!(s.total(), 10);
    assert_eq!(s.stage_at(0).unwrap().0, 0);
    assert_eq!(s.stage_at(2).unwrap().0, 0);
    assert_eq!(s.stage_at(3).unwrap().0, 1);
    assert!(s.stage_at(10).is_none());
    let f = &s.stages[0].freeze;
    assert!(!f.is_frozen("encoder.block0.cross0.q.w"));
    assert!(!f.is_frozen("decoder.cross.k.w"));
    assert!(f.is_frozen("encoder.block0.self0.q.w"));
    assert!(f.is_frozen("embed.token"));
    assert_eq!(Schedule::two_stage(0, 5).stages.len(), 1);
}

fn model_and_store() -> (PerceiverVl, ParamStore<f32>) {
    PerceiverVl::init(&tiny_model(), 11).unwrap()
}

#[test]
fn zero_steps_leave_initialization() {
    let items = tiny_corpus();
    let refs: Vec<&CorpusItem> = items.iter().collect();
    let (m, mut store) = model_and_store();
    let before = store.digest();
    let hist = pretrain(&m, &mut store, &refs, &tiny_train(0), 0, None).unwrap();
    assert!(hist.is_empty());
    assert_eq!(store.digest(), before);
}

#[test]
fn pretraining_is_deterministic() {
    let items = tiny_corpus();
    let refs: Vec<&CorpusItem> = items.iter().collect();
    let run = || {
        let (m, mut store) = model_and_store();
        let mut log = Vec::new();
        pretrain(&m, &mut store, &refs, &tiny_train(3), 5, Some(&mut log)).unwrap();
        (log, store.digest())
    };
    let (a, da) = run();
    let (b, db) = run();
    assert_eq!(a, b);
    assert_eq!(da, db);
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 3);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["step", "loss_vtm", "loss_mlm", "acc_vtm", "acc_mlm"] {
            assert!(v.get(key).is_some(), "{key} missing in {line}");
        }
    }
}

#[test]
fn cross_only_stage_keeps_other_params_fixed() {
    let items = tiny_corpus();
    let refs: Vec<&CorpusItem> = items.iter().collect();
    let (m, mut store) = model_and_store();
    let not_cross = |n: &str| !n.contains(CROSS_ATTENTION);
    let frozen_before = store.digest_where(not_cross);
    let cross_before = store.digest_where(|n| n.contains(CROSS_ATTENTION));
    let cfg = TrainConfig { cross_only_steps: 3, ..tiny_train(3) };
    pretrain(&m, &mut store, &refs, &cfg, 1, None).unwrap();
    assert_eq!(store.digest_where(not_cross), frozen_before);
    assert_ne!(store.digest_where(|n| n.contains(CROSS_ATTENTION)), cross_before);

    let cfg = TrainConfig { cross_only_steps: 2, ..tiny_train(3) };
    pretrain(&m, &mut store, &refs, &cfg, 1, None).unwrap();
    assert_ne!(store.digest_where(not_cross), frozen_before);
}

#[test]
fn first_cross_attention_runs_every_step() {
    let items = tiny_corpus();
    let refs: Vec<&CorpusItem> = items.iter().collect();
    let mut cfg = tiny_model();
    cfg.encoder.p_ld = 0.9;
    let (m, mut store) = PerceiverVl::init::<f32>(&cfg, 2).unwrap();
    let hist = pretrain(&m, &mut store, &refs, &tiny_train(8), 3, None).unwrap();
    assert!(hist.iter().all(|h| h["active_cross"] >= 1.0));
}

#[test]
fn divergence_is_reported_without_touching_weights() {
    let items = tiny_corpus();
    let refs: Vec<&CorpusItem> = items.iter().collect();
    let (_, mut store) = model_and_store();
    let before = store.digest();
    let mut opt = OptimState::new(AdamConfig::default());
    let lc = tiny_train(2).loop_config();
    let err = run_loop(&mut store, &mut opt, &lc, &Rng::new(0), None, |s, _, _| {
        let mut g = Tape::with_params(s);
        let id = s.ids().next().unwrap();
        let p = g.param(id);
        let l = g.sum(p);
        let grads = g.backward(l)?;
        let mut m = Metrics::new();
        m.insert("loss".into(), f64::NAN);
        Ok((grads, m))
    })
    .unwrap_err();
    assert!(matches!(err, Error::Numeric(_)));
    assert_eq!(store.digest(), before);
    let _ = refs;
}

#[test]
fn finetune_modes_run() {
    let items = tiny_corpus();
    let refs: Vec<&CorpusItem> = items.iter().collect();
    for mode in [
        perceiver_vl::retrieval::StreamMode::Single,
        perceiver_vl::retrieval::StreamMode::Mixed,
        perceiver_vl::retrieval::StreamMode::Multi,
    ] {
        let (m, mut store) = model_and_store();
        let before = store.digest();
        let hist = finetune_retrieval(&m, &mut store, &refs, mode, &tiny_train(2), 0, None).unwrap();
        assert_eq!(hist.len(), 2);
        assert!(hist.iter().all(|h| h["loss"].is_finite()));
        assert_ne!(store.digest(), before, "{mode}");
    }
    let (m, mut store) = model_and_store();
    let hist = finetune_qa(&m, &mut store, &refs, &tiny_train(2), 0, None).unwrap();
    assert_eq!(hist.len(), 2);
    let eval = evaluate_qa(&m, &store, &refs[..4], &m.full_depth()).unwrap();
    assert!(eval["questions"] >= 4.0);
    assert!((0.0..=1.0).contains(&eval["acc_qa"]));
}

#[test]
fn constant_lr_by_default_when_warmup_off() {
    let s = LrSchedule::constant(0.3);
    assert_eq!(s.at(0), 0.3);
    assert_eq!(s.at(1000), 0.3);
}
