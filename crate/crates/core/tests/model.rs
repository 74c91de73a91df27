use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use dslu::autodiff::{GradStore, ParamId, Scope, Tensor};
use dslu::model::{checkpoint_bytes, checkpoint_from_bytes, prefix, ModelConfig, TwoPassModel, Vocabulary, BOS, EOS};
use dslu::train::stage2_loss;

// ids: intents 4..6, words 6..11
fn vocab() -> Vocabulary {
    Vocabulary::new(
        vec!["play".into(), "stop".into()],
        ["the", "music", "now", "please", "lights"].iter().map(|s| s.to_string()).collect(),
    )
    .unwrap()
}

fn model(sem_dim: usize, d_model: usize) -> TwoPassModel {
    let cfg = ModelConfig {
        feat_dim: 4,
        d_model,
        n_heads: 2,
        ffn_dim: 16,
        encoder_layers: 1,
        pass1_layers: 2,
        sem_dim,
        sem_heads: 2,
        sem_ffn_dim: 16,
        sem_layers: 1,
        deliberation_layers: 2,
        pass2_layers: 2,
        subsample: 2,
        ..Default::default()
    };
    let mut m = TwoPassModel::new(cfg, vocab(), 5).unwrap();
    // zero-initialized heads would make every row uniform
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let noise = Normal::new(0.0, 0.5).unwrap();
    let ids: Vec<ParamId> = m.store.ids().collect();
    for id in ids {
        for v in m.store.value_mut(id).iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    m
}

fn frames(t: usize, salt: usize) -> Vec<f64> {
    (0..t * 4).map(|i| (((i + salt) * 7919) % 31) as f64 / 15.0 - 1.0).collect()
}

fn zero(m: &mut TwoPassModel, name: &str) {
    let id = m.store.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    m.store.value_mut(id).iter_mut().for_each(|v| *v = 0.0);
}

fn rows(t: &Tensor, upto: usize) -> Vec<f64> {
    let w = t.shape()[1];
    t.data()[..upto * w].to_vec()
}

#[test]
fn first_pass_rows_ignore_later_tokens() {
    let m = model(8, 8);
    let s = Scope::eval(&m.store);
    let c = m.encode_acoustic(&s, &frames(20, 0), None).unwrap();
    let a = m.first_pass_logits(&s, &c.tensor, &[BOS, 4, 6, 7, 8]).unwrap();
    let b = m.first_pass_logits(&s, &c.tensor, &[BOS, 4, 6, 10, 9]).unwrap();
    assert_eq!(rows(&a, 3), rows(&b, 3));
    assert_ne!(a.data(), b.data());
}

#[test]
fn second_pass_rows_ignore_later_tokens() {
    let m = model(8, 8);
    let s = Scope::eval(&m.store);
    let c = m.encode_acoustic(&s, &frames(20, 0), None).unwrap();
    let sem = m.encode_semantic(&s, &[6, 7]).unwrap();
    let (del, _) = m.deliberate(&s, &c.tensor, &sem.projected).unwrap();
    let a = m.second_pass_logits(&s, &del, &[BOS, 5, 8, 9]).unwrap();
    let b = m.second_pass_logits(&s, &del, &[BOS, 5, 8, EOS]).unwrap();
    assert_eq!(rows(&a, 3), rows(&b, 3));
    assert_ne!(a.data(), b.data());
}

#[test]
fn zeroed_semantic_path_with_pass_through_deliberation() {
    let mut m = model(8, 8);
    let x = frames(16, 3);
    let (semantic_a, semantic_b) = ([6, 7, 8], [10, 9, 9]);
    let target = [BOS, 4, 6, 7];

    let before = {
        let s = Scope::eval(&m.store);
        let c = m.encode_acoustic(&s, &x, None).unwrap();
        let go = |t: &[usize]| {
            let sem = m.encode_semantic(&s, t).unwrap();
            let (del, _) = m.deliberate(&s, &c.tensor, &sem.projected).unwrap();
            m.second_pass_logits(&s, &del, &target).unwrap().data().to_vec()
        };
        (go(&semantic_a), go(&semantic_b))
    };
    assert_ne!(before.0, before.1, "control: the semantic input matters before zeroing");

    let proj = m.projection_param();
    m.store.value_mut(proj).iter_mut().for_each(|v| *v = 0.0);
    for l in 0..2 {
        for p in ["att.o.w", "att.o.b", "ffn.down.w", "ffn.down.b"] {
            zero(&mut m, &format!("del.l{l}.{p}"));
        }
    }
    let s = Scope::eval(&m.store);
    let c = m.encode_acoustic(&s, &x, None).unwrap();
    let ta = c.len();
    let gain = m.store.get(m.store.find("del.ln.g").unwrap()).value.clone();
    let bias = m.store.get(m.store.find("del.ln.b").unwrap()).value.clone();

    let mut logits = Vec::new();
    for t in [&semantic_a, &semantic_b] {
        let sem = m.encode_semantic(&s, t).unwrap();
        assert!(sem.projected.data().iter().all(|v| *v == 0.0));
        let (del, _) = m.deliberate(&s, &c.tensor, &sem.projected).unwrap();
        assert_eq!(del.shape(), &[ta + 3, 8]);
        // pass-through: each row is just the final norm of its input row
        for r in 0..ta + 3 {
            let input: Vec<f64> = if r < ta { c.tensor.data()[r * 8..(r + 1) * 8].to_vec() } else { vec![0.0; 8] };
            let mean = input.iter().sum::<f64>() / 8.0;
            let var = input.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            for k in 0..8 {
                let want = (input[k] - mean) / (var + 1e-5).sqrt() * gain[k] + bias[k];
                assert!((del.data()[r * 8 + k] - want).abs() < 1e-12);
            }
        }
        logits.push(m.second_pass_logits(&s, &del, &target).unwrap().data().to_vec());
    }
    assert_eq!(logits[0], logits[1]);

    let other = m.encode_acoustic(&s, &frames(16, 9), None).unwrap();
    let sem = m.encode_semantic(&s, &semantic_a).unwrap();
    let (del, _) = m.deliberate(&s, &other.tensor, &sem.projected).unwrap();
    assert_ne!(m.second_pass_logits(&s, &del, &target).unwrap().data(), &logits[0][..]);
}

#[test]
fn second_pass_loss_reaches_projection_and_semantic_encoder() {
    let m = model(8, 8);
    let all = m.params(&[prefix::ACOUSTIC, prefix::SEMANTIC, prefix::PROJECTION, prefix::DELIBERATION, prefix::PASS2]);
    let s = Scope::frozen_eval(&m.store, &all);
    let c = m.encode_acoustic(&Scope::eval(&m.store), &frames(14, 1), None).unwrap();
    stage2_loss(&m, &s, &c.tensor, &[6, 7, 8], &[BOS, 4, 6, 7, 8, EOS], 0.1).unwrap().backward().unwrap();
    let mut g = GradStore::new(&m.store);
    s.collect_grads(&mut g);
    let norm = |p: &str| -> f64 {
        m.store
            .iter()
            .filter(|(_, q)| q.name.starts_with(p))
            .filter_map(|(id, _)| g.get(id))
            .flat_map(|v| v.iter().map(|x| x * x))
            .sum::<f64>()
            .sqrt()
    };
    for p in [prefix::PROJECTION, prefix::SEMANTIC, prefix::DELIBERATION, prefix::PASS2] {
        assert!(norm(p) > 1e-8, "{p} got no gradient");
    }
    // c_aco was computed outside the graph
    assert_eq!(norm(prefix::ACOUSTIC), 0.0);
    assert_eq!(norm(prefix::PASS1), 0.0);
}

#[test]
fn projection_from_24_to_32_matches_matrix_product() {
    let m = model(24, 32);
    let s = Scope::eval(&m.store);
    let e = m.encode_semantic(&s, &[6, 9, 7, 10]).unwrap();
    assert_eq!(e.raw.shape(), &[4, 24]);
    assert_eq!(e.projected.shape(), &[4, 32]);
    let raw = DMatrix::from_row_slice(4, 24, e.raw.data());
    let w = DMatrix::from_row_slice(24, 32, &m.store.get(m.projection_param()).value);
    let want = raw * w;
    for r in 0..4 {
        for c in 0..32 {
            assert!((e.projected.data()[r * 32 + c] - want[(r, c)]).abs() < 1e-12);
        }
    }
    let c = m.encode_acoustic(&s, &frames(10, 2), None).unwrap();
    let (del, _) = m.deliberate(&s, &c.tensor, &e.projected).unwrap();
    assert_eq!(del.shape(), &[c.len() + 4, 32]);
    assert!(m.deliberate(&s, &c.tensor, &e.raw).is_err());
}

#[test]
fn intent_and_special_tokens_are_not_text() {
    let m = model(8, 8);
    let s = Scope::eval(&m.store);
    for bad in [vec![6, 4], vec![5], vec![BOS, 6], vec![6, EOS], vec![42]] {
        assert!(m.encode_semantic(&s, &bad).is_err(), "{bad:?}");
    }
}

#[test]
fn corrupted_checkpoint_is_rejected_and_clean_one_round_trips() {
    let m = model(8, 8);
    let bytes = checkpoint_bytes(&m, None).unwrap();
    let back = checkpoint_from_bytes(&bytes).unwrap().0;
    assert_eq!(back.checksum(), m.checksum());
    for at in [0, bytes.len() / 3, bytes.len() / 2, bytes.len() - 1] {
        let mut bad = bytes.clone();
        bad[at] ^= 0x10;
        assert!(checkpoint_from_bytes(&bad).is_err(), "flip at {at}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn logits_rows_are_causal_and_finite(
        tail_a in proptest::collection::vec(6usize..11, 1..5),
        tail_b in proptest::collection::vec(6usize..11, 1..5),
        cut in 0usize..3,
        n_frames in 4usize..30,
    ) {
        let m = model(8, 8);
        let s = Scope::eval(&m.store);
        let c = m.encode_acoustic(&s, &frames(n_frames, n_frames), None).unwrap();
        let head = [BOS, 4, 6, 7];
        let keep = cut + 1;
        let mut pa = head[..keep].to_vec();
        pa.extend(&tail_a);
        let mut pb = head[..keep].to_vec();
        pb.extend(&tail_b);
        let a = m.first_pass_logits(&s, &c.tensor, &pa).unwrap();
        let b = m.first_pass_logits(&s, &c.tensor, &pb).unwrap();
        prop_assert_eq!(a.shape(), &[pa.len(), m.vocab.size()][..]);
        prop_assert!(a.data().iter().all(|v| v.is_finite()));
        prop_assert_eq!(rows(&a, keep), rows(&b, keep));
    }
}
