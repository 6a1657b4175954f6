use std::collections::BTreeMap;

use mocha_latency::data::{batch_pad, Sample};
use mocha_latency::decode::{beam_stream_decode, greedy_stream_decode, BeamOptions, Stream};
use mocha_latency::metrics::{corpus_latency, deltas, evaluate, token_error_rate, utterance_latency, LatencyReport};
use mocha_latency::mocha::{
    chunkwise_attention, decot_alignment, energy_keys, energy_from_keys, expected_alignment, normalized_gain, Recursion,
};
use mocha_latency::model::{Model, ModelConfig};
use mocha_latency::objectives::{batch_loss, mean_loss, minlt_loss, quantity_loss, ObjectiveConfig, ObjectiveMode};
use mocha_latency::tensor::{Graph, Tensor, Var};
use mocha_latency::training::{clip_global_norm, global_norm, TrainConfig, Trainer};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn prob_matrix(max_l: usize, max_t: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1..=max_l, 1..=max_t).prop_flat_map(|(l, t)| prop::collection::vec(prop::collection::vec(0.0..=1.0f64, t), l))
}

fn rows(g: &mut Graph, p: &[Vec<f64>]) -> Vec<Var> {
    p.iter().map(|r| g.constant(Tensor::vector(r.clone()))).collect()
}

fn gold_for(rng_seed: u64, l: usize, t: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut b: Vec<usize> = (0..l).map(|_| rng.gen_range(1..=t)).collect();
    b.sort_unstable();
    b
}

fn tiny_config(offset: f64) -> ModelConfig {
    let mut c = ModelConfig::desk(4, 4, 6);
    c.encoder.layers = 1;
    c.encoder.hidden = 8;
    c.encoder.dropout = 0.0;
    c.decoder.hidden = 8;
    c.decoder.embed_dim = 4;
    c.decoder.dropout = 0.0;
    c.attention.attn_dim = 6;
    c.attention.chunk_width = 2;
    c.attention.init_offset = offset;
    c
}

fn random_frames(seed: u64, t: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::matrix(t, 4, (0..t * 4).map(|_| rng.gen_range(-2.0..2.0)).collect())
}

fn random_sample(seed: u64, t: usize, l: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
    let mut tokens: Vec<usize> = (0..l - 1).map(|_| rng.gen_range(2..6)).collect();
    tokens.push(1);
    let mut boundaries = gold_for(seed, l, t);
    *boundaries.last_mut().unwrap() = t;
    Sample {
        id: format!("s{seed}"),
        frames: random_frames(seed, t),
        align: (0..t).map(|_| rng.gen_range(0..4)).collect(),
        tokens,
        boundaries,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn chunk_mass_equals_alignment_mass(p in prob_matrix(4, 10), w in 1usize..5, seed in any::<u64>()) {
        let mut g = Graph::new();
        let pr = rows(&mut g, &p);
        let alpha = expected_alignment(&mut g, &pr, Recursion::Sequential, 1e-6);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut prev = f64::INFINITY;
        for &a in &alpha {
            let u: Vec<f64> = (0..p[0].len()).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let uv = g.constant(Tensor::vector(u));
            let beta = chunkwise_attention(&mut g, a, uv, w);
            let sa: f64 = g.data(a).iter().sum();
            let sb: f64 = g.data(beta).iter().sum();
            prop_assert!((sa - sb).abs() < 1e-8);
            prop_assert!(sa <= prev + 1e-12);
            prev = sa;
        }
    }

    #[test]
    fn decot_mask_is_exact(p in prob_matrix(4, 10), delta in 0usize..4, seed in any::<u64>()) {
        let (l, t) = (p.len(), p[0].len());
        let gold = gold_for(seed, l, t);
        let mut g = Graph::new();
        let pr = rows(&mut g, &p);
        let free = expected_alignment(&mut g, &pr, Recursion::Sequential, 1e-6);
        let masked = decot_alignment(&mut g, &pr, &gold, delta, Recursion::Sequential, 1e-6);
        for i in 0..l {
            for j in 1..=t {
                if j > gold[i] + delta {
                    prop_assert_eq!(g.data(masked[i])[j - 1], 0.0);
                }
            }
            let (sm, sf): (f64, f64) = (g.data(masked[i]).iter().sum(), g.data(free[i]).iter().sum());
            prop_assert!(sm <= sf + 1e-12);
        }
        let wide = decot_alignment(&mut g, &pr, &gold, usize::MAX, Recursion::Sequential, 1e-6);
        for i in 0..l {
            prop_assert_eq!(g.data(wide[i]), g.data(free[i]));
        }
    }

    #[test]
    fn objective_terms_are_non_negative(p in prob_matrix(4, 10), seed in any::<u64>()) {
        let (l, t) = (p.len(), p[0].len());
        let mut g = Graph::new();
        let pr = rows(&mut g, &p);
        let alpha = expected_alignment(&mut g, &pr, Recursion::Sequential, 1e-6);
        let q = quantity_loss(&mut g, &alpha);
        let m = minlt_loss(&mut g, &alpha, &gold_for(seed, l, t));
        prop_assert!(g.scalar(q) >= 0.0);
        prop_assert!(g.scalar(m) >= 0.0);
    }

    #[test]
    fn shifting_predictions_shifts_every_statistic(
        d in prop::collection::vec(prop::collection::vec(-20i64..20, 1..6), 1..8),
        c in 0i64..10,
    ) {
        let gold: Vec<Vec<usize>> = d.iter().map(|u| u.iter().map(|_| 40).collect()).collect();
        let pred = |shift: i64| -> Vec<Vec<usize>> {
            d.iter().map(|u| u.iter().map(|&x| (40 + x + shift) as usize).collect()).collect()
        };
        let base = LatencyReport::from_deltas(deltas(&pred(0), &gold).unwrap(), 30.0).unwrap();
        let moved = LatencyReport::from_deltas(deltas(&pred(c), &gold).unwrap(), 30.0).unwrap();
        let cf = c as f64;
        prop_assert!((moved.avg - base.avg - cf).abs() < 1e-9);
        prop_assert!((moved.utterance_avg - base.utterance_avg - cf).abs() < 1e-9);
        prop_assert_eq!(moved.median, base.median + c);
        prop_assert_eq!(moved.p90, base.p90 + c);
        prop_assert_eq!(moved.p99, base.p99 + c);
    }

    #[test]
    fn equal_token_counts_give_equal_averages(n in 1usize..6, d in prop::collection::vec(-30i64..30, 1..40)) {
        let utts: Vec<Vec<i64>> = d.chunks(n).filter(|c| c.len() == n).map(<[i64]>::to_vec).collect();
        prop_assume!(!utts.is_empty());
        let a = corpus_latency(&utts).unwrap();
        let b = utterance_latency(&utts).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn ter_is_symmetric_in_edit_distance(a in prop::collection::vec(0u8..4, 1..10), b in prop::collection::vec(0u8..4, 1..10)) {
        let lhs = token_error_rate(&a, &b) * b.len() as f64;
        let rhs = token_error_rate(&b, &a) * a.len() as f64;
        prop_assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn clipped_norm_is_bounded(g in prop::collection::vec(prop::collection::vec(-100.0..100.0f64, 1..20), 1..5), max in 0.01..10.0f64) {
        let mut grads: BTreeMap<String, Vec<f64>> = g.into_iter().enumerate().map(|(i, v)| (format!("p{i}"), v)).collect();
        clip_global_norm(&mut grads, max);
        prop_assert!(global_norm(&grads) <= max + 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn future_frames_do_not_reach_past_decisions(seed in any::<u64>(), t in 6usize..12, j in 1usize..6, offset in -1.0..1.0f64) {
        prop_assume!(j + 2 < t);
        let model = Model::init(tiny_config(offset), seed);
        let frames = random_frames(seed ^ 1, t);
        let mut moved = frames.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        for r in j + 2..t {
            for x in &mut moved.data_mut()[r * 4..(r + 1) * 4] {
                *x += rng.gen_range(-3.0..3.0);
            }
        }
        let energy = |f: &Tensor| {
            let mut g = Graph::new();
            let vars = model.bind(&mut g, false);
            let enc = model.encode(&mut g, &vars, f, None);
            let keys = energy_keys(&mut g, enc.features, &vars.mono);
            let gain = normalized_gain(&mut g, &vars.mono);
            let s = g.constant(Tensor::vector(vec![0.3; 8]));
            let e = energy_from_keys(&mut g, keys, s, &vars.mono, gain);
            g.data(e)[..j].to_vec()
        };
        prop_assert_eq!(energy(&frames), energy(&moved));

        let probe = |f: &Tensor| {
            let mut st = Stream::new(&model, f);
            let s = vec![0.1; 8];
            let fire = st.fire(&s, j);
            fire.probs[0]
        };
        prop_assert_eq!(probe(&frames).to_bits(), probe(&moved).to_bits());

        let (h0, log0) = greedy_stream_decode(&model, &frames, 8);
        let (h1, _) = greedy_stream_decode(&model, &moved, 8);
        for (i, &b) in h0.boundaries.iter().enumerate() {
            prop_assert!(log0.max_read[i] <= (b + 2).min(t));
        }
        for i in 0..h0.tokens.len() {
            if log0.max_read[i] > j + 2 {
                break;
            }
            prop_assert_eq!(h0.tokens[i], h1.tokens[i]);
            prop_assert_eq!(h0.boundaries[i], h1.boundaries[i]);
        }
    }

    #[test]
    fn decoding_invariants(seed in any::<u64>(), t in 3usize..12, offset in -1.0..2.0f64) {
        let model = Model::init(tiny_config(offset), seed);
        let frames = random_frames(seed ^ 3, t);
        let (h, log) = greedy_stream_decode(&model, &frames, 10);
        let (again, log2) = greedy_stream_decode(&model, &frames, 10);
        prop_assert_eq!(&h.tokens, &again.tokens);
        prop_assert_eq!(h.log_prob.to_bits(), again.log_prob.to_bits());
        prop_assert_eq!(log, log2);
        prop_assert!(h.boundaries.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(h.log_prob.is_finite());
        if h.complete {
            prop_assert_eq!(h.tokens.last(), Some(&1));
        }
        let mut last = f64::NEG_INFINITY;
        for beam in [1usize, 2, 3, 4, 8] {
            let hyps = beam_stream_decode(&model, &frames, &BeamOptions { beam, max_len: 10, length_penalty: 0.0 });
            let best = hyps[0].score(0.0);
            if beam == 1 {
                prop_assert_eq!(&hyps[0].tokens, &h.tokens);
                prop_assert_eq!(&hyps[0].boundaries, &h.boundaries);
            }
            prop_assert!(best >= last - 1e-12, "beam {} score {} below {}", beam, best, last);
            for hyp in &hyps {
                prop_assert!(hyp.boundaries.windows(2).all(|w| w[0] <= w[1]));
            }
            last = best;
        }
    }

    #[test]
    fn padding_changes_nothing(seed in any::<u64>(), lens in prop::collection::vec((3usize..10, 2usize..4), 2..4)) {
        let model = Model::init(tiny_config(0.0), seed);
        let samples: Vec<Sample> = lens.iter().enumerate().map(|(k, &(t, l))| random_sample(seed.wrapping_add(k as u64), t, l.min(t))).collect();
        let batch = batch_pad(&samples);
        for (b, s) in samples.iter().enumerate() {
            prop_assert_eq!(&batch.item(b), s);
        }
        let cfg = ObjectiveConfig { mode: ObjectiveMode::DecotMinlt, delta: 2, ..ObjectiveConfig::default() };
        let padded = batch_loss(&model, &batch, &cfg).unwrap();
        let plain = mean_loss(&model, &samples, &cfg).unwrap();
        prop_assert_eq!(padded.to_bits(), plain.to_bits());
        let items: Vec<Sample> = (0..batch.len()).map(|b| batch.item(b)).collect();
        prop_assert_eq!(evaluate(&model, &items, true, 30.0).unwrap(), evaluate(&model, &samples, true, 30.0).unwrap());
    }
}

#[test]
fn frozen_parameters_never_move() {
    let model = Model::init(tiny_config(0.0), 5);
    let samples: Vec<Sample> = (0..6).map(|k| random_sample(100 + k, 8, 3)).collect();
    let cfg = TrainConfig {
        learning_rate: 1e-2,
        batch_size: 2,
        freeze: vec!["att.mono.".into(), "dec.embed".into()],
        ..TrainConfig::default()
    };
    let mut m = model.clone();
    let mut tr = Trainer::new(cfg);
    for _ in 0..3 {
        tr.run_epoch(&mut m, &samples).unwrap();
    }
    for (name, t) in model.params.iter() {
        let after = m.params.get(name).unwrap();
        let same = t.data().iter().zip(after.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        if name.starts_with("att.mono.") || name == "dec.embed" {
            assert!(same, "{name} moved");
        } else if name.ends_with(".w_hh") {
            assert!(!same, "{name} did not train");
        }
    }
}
