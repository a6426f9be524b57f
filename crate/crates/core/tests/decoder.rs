use perceiver_vl::cost::decoder_macs;
use perceiver_vl::decoder::{concat_queries, TaskTag};
use perceiver_vl::encoder::EncoderConfig;
use perceiver_vl::model::{ModelConfig, PerceiverVl};
use perceiver_vl::tensor::{ParamStore, Rng, Tape, Tensor};
use perceiver_vl::Error;

fn model(d: usize) -> (PerceiverVl, ParamStore<f64>) {
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            d,
            heads: 2,
            k: 2,
            l: 1,
            n_latents: 4,
            ..EncoderConfig::toy()
        },
        ..ModelConfig::default()
    };
    PerceiverVl::init(&cfg, 3).unwrap()
}

fn random(rng: &mut Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::from_fn(&[rows, cols], |_| rng.normal())
}

#[test]
fn cls_queries_have_one_row() {
    let (m, store) = model(16);
    let mut g = Tape::with_params(&store);
    for q in [
        m.decoder.build_vtm_query(&mut g),
        m.decoder.build_qa_query(&mut g),
        m.decoder.build_ret_query(&mut g),
    ] {
        assert_eq!(q.len(), 1);
        assert_eq!(q.segments.len(), 1);
        assert_eq!(q.segments[0].1, 0..1);
        assert_eq!(g.shape(q.rows), &[1, 16]);
    }
    let a = m.decoder.build_vtm_query(&mut g);
    let b = m.decoder.build_vtm_query(&mut g);
    assert!(g.value(a.rows).bit_eq(g.value(b.rows)));
    assert_eq!(a.segments[0].0, TaskTag::Vtm);
    assert_eq!(m.decoder.build_qa_query(&mut g).segments[0].0, TaskTag::Qa);
}

#[test]
fn mlm_query_is_position_plus_mask() {
    let (m, store) = model(8);
    let mut g = Tape::with_params(&store);
    let flags = [false, true, false, true, true];
    let q = m.decoder.build_mlm_query(&mut g, &flags).unwrap();
    assert_eq!(q.len(), 5);
    let rows = g.value(q.rows).clone();
    let pos = store.tensor(m.tables.token_pos);
    for j in 0..8 {
        let diff = rows.at(2, j) - rows.at(0, j);
        assert!((diff - (pos.at(2, j) - pos.at(0, j))).abs() < 1e-15);
    }

    let off = m.decoder.build_mlm_query(&mut g, &[false; 4]).unwrap();
    let on = m.decoder.build_mlm_query(&mut g, &[true; 4]).unwrap();
    let (off, on) = (g.value(off.rows).clone(), g.value(on.rows).clone());
    let mask = store.tensor(m.decoder.mask_emb);
    for i in 0..4 {
        for j in 0..8 {
            let want = mask.at(1, j) - mask.at(0, j);
            assert!((on.at(i, j) - off.at(i, j) - want).abs() < 1e-15);
        }
    }
    assert!(matches!(
        m.decoder.build_mlm_query(&mut g, &[]),
        Err(Error::Contract(_))
    ));
}

#[test]
fn concat_offsets_segments() {
    let (m, store) = model(8);
    let mut g = Tape::with_params(&store);
    let vtm = m.decoder.build_vtm_query(&mut g);
    let mlm = m.decoder.build_mlm_query(&mut g, &[true; 5]).unwrap();
    let both = concat_queries(&mut g, &[vtm.clone(), mlm.clone()]).unwrap();
    assert_eq!(both.len(), 6);
    assert_eq!(both.segments, vec![(TaskTag::Vtm, 0..1), (TaskTag::Mlm, 1..6)]);

    let one = concat_queries(&mut g, std::slice::from_ref(&vtm)).unwrap();
    assert!(g.value(one.rows).bit_eq(g.value(vtm.rows)));
    assert_eq!(one.segments, vtm.segments);

    let qa = m.decoder.build_qa_query(&mut g);
    let ab = concat_queries(&mut g, &[vtm.clone(), mlm.clone()]).unwrap();
    let left = concat_queries(&mut g, &[ab, qa.clone()]).unwrap();
    let bc = concat_queries(&mut g, &[mlm, qa]).unwrap();
    let right = concat_queries(&mut g, &[vtm, bc]).unwrap();
    assert!(g.value(left.rows).bit_eq(g.value(right.rows)));
    assert_eq!(left.segments, right.segments);
    assert!(concat_queries::<f64>(&mut g, &[]).is_err());
}

#[test]
fn decode_macs_and_shape() {
    let (m, store) = model(16);
    let mut rng = Rng::new(1);
    let mut g = Tape::with_params(&store);
    let z = g.leaf(random(&mut rng, 4, 16));
    let q = m.decoder.build_mlm_query(&mut g, &[false, true, false]).unwrap();
    let before = g.macs();
    let out = m.decode(&mut g, z, &q).unwrap();
    assert_eq!(g.macs() - before, decoder_macs(3, 4, 16, 4));
    assert_eq!(g.shape(out), &[3, 16]);
}

#[test]
fn single_latent_gives_every_query_the_same_context() {
    let (m, store) = model(8);
    let mut rng = Rng::new(2);
    let mut g = Tape::with_params(&store);
    let z = g.leaf(random(&mut rng, 1, 8));
    let zero = g.leaf(Tensor::zeros(&[3, 8]));
    let q = perceiver_vl::decoder::QuerySpec {
        rows: zero,
        segments: vec![(TaskTag::Mlm, 0..3)],
    };
    let out = m.decode(&mut g, z, &q).unwrap();
    let out = g.value(out);
    assert!(out.row(0) == out.row(1) && out.row(0) == out.row(2));
}

#[test]
fn permuting_queries_permutes_outputs() {
    let (m, store) = model(8);
    let mut rng = Rng::new(3);
    let zt = random(&mut rng, 4, 8);
    let qt = random(&mut rng, 3, 8);
    let perm = [2, 0, 1];
    let pq = Tensor::from_rows(&perm.iter().map(|&i| qt.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
    let mut g = Tape::with_params(&store);
    let z = g.leaf(zt);
    let mk = |g: &mut Tape<'_, f64>, t: Tensor<f64>| perceiver_vl::decoder::QuerySpec {
        rows: g.leaf(t),
        segments: vec![(TaskTag::Mlm, 0..3)],
    };
    let (a, b) = (mk(&mut g, qt), mk(&mut g, pq));
    let ya = m.decode(&mut g, z, &a).unwrap();
    let yb = m.decode(&mut g, z, &b).unwrap();
    for (r, &i) in perm.iter().enumerate() {
        assert_eq!(g.value(yb).row(r), g.value(ya).row(i));
    }
}

#[test]
fn multitask_decode_restricts_to_single_task_bit_exactly() {
    let (m, store) = model(16);
    let mut rng = Rng::new(4);
    let mut g = Tape::with_params(&store);
    let z = g.leaf(random(&mut rng, 4, 16));
    let vtm = m.decoder.build_vtm_query(&mut g);
    let mlm = m.decoder.build_mlm_query(&mut g, &[true, false, true, false]).unwrap();
    let both = concat_queries(&mut g, &[vtm.clone(), mlm.clone()]).unwrap();
    let joint = m.decode(&mut g, z, &both).unwrap();
    let alone_v = m.decode(&mut g, z, &vtm).unwrap();
    let alone_m = m.decode(&mut g, z, &mlm).unwrap();
    let joint = g.value(joint).clone();
    assert_eq!(joint.row(0), g.value(alone_v).row(0));
    for i in 0..4 {
        assert_eq!(joint.row(1 + i), g.value(alone_m).row(i));
    }
}

#[test]
fn head_shapes_and_contracts() {
    let (m, store) = model(16);
    let mut rng = Rng::new(5);
    let mut g = Tape::with_params(&store);
    let z = g.leaf(random(&mut rng, 4, 16));
    let vtm = m.decoder.build_vtm_query(&mut g);
    let mlm = m.decoder.build_mlm_query(&mut g, &[true; 7]).unwrap();
    let both = concat_queries(&mut g, &[vtm, mlm]).unwrap();
    let out = m.decode(&mut g, z, &both).unwrap();
    let v = m.decoder.head(&mut g, out, &both, TaskTag::Vtm).unwrap();
    let w = m.decoder.head(&mut g, out, &both, TaskTag::Mlm).unwrap();
    assert_eq!(g.shape(v), &[1, 2]);
    assert_eq!(g.shape(w), &[7, m.cfg.embed.vocab_size]);
    assert!(matches!(
        m.decoder.head(&mut g, out, &both, TaskTag::Qa),
        Err(Error::Contract(_))
    ));
}

#[test]
fn zero_head_gives_uniform_logits() {
    let (m, mut store) = model(8);
    for id in [m.decoder.vtm_head.w, m.decoder.vtm_head.b.unwrap()] {
        let shape = store.tensor(id).shape().to_vec();
        store.set(id, Tensor::zeros(&shape)).unwrap();
    }
    let mut rng = Rng::new(6);
    let mut g = Tape::with_params(&store);
    let z = g.leaf(random(&mut rng, 4, 8));
    let logits = m.vtm_logits(&mut g, z).unwrap();
    assert!(g.value(logits).data().iter().all(|&x| x == 0.0));
    let loss = g.cross_entropy(logits, &[Some(1)]).unwrap();
    assert!((g.value(loss).item() - 2f64.ln()).abs() < 1e-12);
}
