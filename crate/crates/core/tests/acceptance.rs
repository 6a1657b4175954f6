//! Acceptance report: one PASS/FAIL line per criterion, with the measured
//! values alongside.

use std::time::Instant;

use mocha_latency::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use mocha_latency::data::{gen_lookahead_task, prepare, Sample, TaskConfig};
use mocha_latency::decode::{greedy_stream_decode, Stream};
use mocha_latency::experiment::{
    corpora, desk_config, final_quarter_mass, mean_segment_length, objective, train_to_accuracy, warm_start,
};
use mocha_latency::metrics::{corpus_latency, deltas, latency_percentiles, utterance_latency};
use mocha_latency::mocha::{
    chunkwise_attention, decot_alignment, energy_from_keys, energy_keys, expected_alignment, normalized_gain, Recursion,
};
use mocha_latency::model::{Model, ModelConfig, SoftOptions};
use mocha_latency::objectives::{utterance_loss, ObjectiveConfig, ObjectiveMode};
use mocha_latency::tensor::{Graph, Tensor, Var};
use mocha_latency::training::{train, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = (bool, String);

fn report(name: &str, (ok, detail): &Outcome) {
    println!("{} {name}: {detail}", if *ok { "PASS" } else { "FAIL" });
}

fn probs(rng: &mut ChaCha8Rng, l: usize, t: usize, lo: f64, hi: f64) -> Vec<Vec<f64>> {
    (0..l).map(|_| (0..t).map(|_| rng.gen_range(lo..hi)).collect()).collect()
}

fn sorted_gold(rng: &mut ChaCha8Rng, l: usize, t: usize) -> Vec<usize> {
    let mut b: Vec<usize> = (0..l).map(|_| rng.gen_range(1..=t)).collect();
    b.sort_unstable();
    b
}

fn constants(g: &mut Graph, p: &[Vec<f64>]) -> Vec<Var> {
    p.iter().map(|r| g.constant(Tensor::vector(r.clone()))).collect()
}

fn enumerate(p: &[Vec<f64>], limit: Option<&[usize]>) -> Vec<Vec<f64>> {
    fn walk(p: &[Vec<f64>], limit: Option<&[usize]>, i: usize, start: usize, prob: f64, alpha: &mut [Vec<f64>]) {
        if i == p.len() {
            return;
        }
        let mut stay = 1.0;
        for j in start..p[i].len() {
            let fire = prob * stay * p[i][j];
            stay *= 1.0 - p[i][j];
            if limit.is_some_and(|lim| j + 1 > lim[i]) {
                continue;
            }
            alpha[i][j] += fire;
            walk(p, limit, i + 1, j, fire, alpha);
        }
    }
    let mut alpha = vec![vec![0.0; p[0].len()]; p.len()];
    walk(p, limit, 0, 0, 1.0, &mut alpha);
    alpha
}

fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn alignment_oracle() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (l, t) = (rng.gen_range(1..=3), rng.gen_range(1..=8));
        let p = probs(&mut rng, l, t, 0.05, 0.95);
        let gold = sorted_gold(&mut rng, l, t);
        let delta = rng.gen_range(0..=3);
        let limit: Vec<usize> = gold.iter().map(|b| b + delta).collect();
        let (free, capped) = (enumerate(&p, None), enumerate(&p, Some(&limit)));
        for form in [Recursion::Parallel, Recursion::Sequential] {
            let mut g = Graph::new();
            let rows = constants(&mut g, &p);
            let a = expected_alignment(&mut g, &rows, form, 1e-10);
            let d = decot_alignment(&mut g, &rows, &gold, delta, form, 1e-10);
            let a: Vec<Vec<f64>> = a.iter().map(|&v| g.data(v).to_vec()).collect();
            let d: Vec<Vec<f64>> = d.iter().map(|&v| g.data(v).to_vec()).collect();
            worst = worst.max(max_diff(&a, &free)).max(max_diff(&d, &capped));
        }
    }
    let secs = started.elapsed().as_secs_f64();
    (worst <= 1e-10 && secs < 5.0, format!("200 instances, max error {worst:.2e}, {secs:.2}s"))
}

fn gradient_model() -> (Model, Sample) {
    let mut c = ModelConfig::desk(6, 5, 7);
    c.encoder.layers = 2;
    c.encoder.hidden = 16;
    c.encoder.ce_head = true;
    c.encoder.dropout = 0.0;
    c.decoder.layers = 1;
    c.decoder.hidden = 16;
    c.decoder.embed_dim = 8;
    c.decoder.dropout = 0.0;
    c.decoder.label_smoothing = 0.1;
    c.attention.attn_dim = 8;
    c.attention.chunk_width = 3;
    c.attention.init_offset = -0.5;
    let mut m = Model::init(c, 31);
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for (_, t) in m.params.iter_mut() {
        for x in t.data_mut() {
            *x += rng.gen_range(-0.1..0.1);
        }
    }
    let sample = Sample {
        id: "toy".into(),
        frames: Tensor::matrix(10, 6, (0..60).map(|_| rng.gen_range(-1.0..1.0)).collect()),
        align: vec![0, 0, 1, 1, 2, 2, 2, 3, 3, 4],
        tokens: vec![3, 5, 2, 1],
        boundaries: vec![2, 5, 8, 10],
    };
    (m, sample)
}

fn gradient_suite() -> Outcome {
    const STEP: f64 = 1e-5;
    let (model, sample) = gradient_model();
    let loss = |m: &Model, cfg: &ObjectiveConfig| {
        let mut g = Graph::new();
        let vars = m.bind(&mut g, false);
        utterance_loss(&mut g, m, &vars, &sample, cfg, None).unwrap().report.total
    };
    let mut details = Vec::new();
    let mut ok = true;
    for mode in [ObjectiveMode::Baseline, ObjectiveMode::Decot, ObjectiveMode::Minlt, ObjectiveMode::MtlCe] {
        let cfg = ObjectiveConfig { mode, delta: 2, ..ObjectiveConfig::default() };
        let mut g = Graph::new();
        let vars = model.bind(&mut g, true);
        let out = utterance_loss(&mut g, &model, &vars, &sample, &cfg, None).unwrap();
        g.backward(out.loss).unwrap();
        let grads = vars.bound.grads(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut work = model.clone();
        let (mut worst, mut n) = (0.0f64, 0);
        let names: Vec<String> = model.params.names().cloned().collect();
        for name in names {
            let len = model.params.get(&name).unwrap().len();
            for _ in 0..3 {
                let e = rng.gen_range(0..len);
                let orig = model.params.get(&name).unwrap().data()[e];
                work.params.get_mut(&name).unwrap().data_mut()[e] = orig + STEP;
                let up = loss(&work, &cfg);
                work.params.get_mut(&name).unwrap().data_mut()[e] = orig - STEP;
                let down = loss(&work, &cfg);
                work.params.get_mut(&name).unwrap().data_mut()[e] = orig;
                let num = (up - down) / (2.0 * STEP);
                let ana = grads[&name][e];
                worst = worst.max((ana - num).abs() / ana.abs().max(num.abs()).max(1e-6));
                n += 1;
            }
        }
        ok &= worst < 1e-4;
        details.push(format!("{mode:?} {n} entries max rel {worst:.1e}"));
    }
    (ok, details.join(", "))
}

fn mass_conservation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let (mut worst, mut monotone) = (0.0f64, true);
    for _ in 0..100 {
        let (l, t, w) = (rng.gen_range(1..=4), rng.gen_range(1..=10), rng.gen_range(1..=4));
        let p = probs(&mut rng, l, t, 0.0, 1.0);
        let mut g = Graph::new();
        let rows = constants(&mut g, &p);
        let alpha = expected_alignment(&mut g, &rows, Recursion::Sequential, 1e-6);
        let mut prev = f64::INFINITY;
        for &a in &alpha {
            let u = g.constant(Tensor::vector((0..t).map(|_| rng.gen_range(-5.0..5.0)).collect()));
            let beta = chunkwise_attention(&mut g, a, u, w);
            let sa: f64 = g.data(a).iter().sum();
            let sb: f64 = g.data(beta).iter().sum();
            worst = worst.max((sa - sb).abs());
            monotone &= sa <= prev + 1e-12;
            prev = sa;
        }
    }
    (worst <= 1e-8 && monotone, format!("100 cases, max |sum beta - sum alpha| {worst:.2e}, rows non-increasing: {monotone}"))
}

fn decot_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let (mut leaks, mut mismatches) = (0, 0);
    for _ in 0..100 {
        let (l, t) = (rng.gen_range(1..=4), rng.gen_range(1..=10));
        let p = probs(&mut rng, l, t, 0.0, 1.0);
        let gold = sorted_gold(&mut rng, l, t);
        let delta = rng.gen_range(0..4);
        let mut g = Graph::new();
        let rows = constants(&mut g, &p);
        let free = expected_alignment(&mut g, &rows, Recursion::Sequential, 1e-6);
        let masked = decot_alignment(&mut g, &rows, &gold, delta, Recursion::Sequential, 1e-6);
        let wide = decot_alignment(&mut g, &rows, &gold, usize::MAX, Recursion::Sequential, 1e-6);
        for i in 0..l {
            leaks += g.data(masked[i]).iter().enumerate().filter(|&(j, &a)| j + 1 > gold[i] + delta && a != 0.0).count();
            mismatches += usize::from(g.data(wide[i]) != g.data(free[i]));
        }
    }
    (leaks == 0 && mismatches == 0, format!("100 cases, nonzero masked entries {leaks}, unbounded delta mismatches {mismatches}"))
}

fn lookahead_bound() -> Outcome {
    let mut c = ModelConfig::desk(4, 4, 6);
    c.encoder.layers = 1;
    c.encoder.hidden = 8;
    c.decoder.hidden = 8;
    c.decoder.embed_dim = 4;
    c.attention.attn_dim = 6;
    c.attention.chunk_width = 2;
    let mut violations = 0;
    let mut checked = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    for seed in 0..40u64 {
        c.attention.init_offset = rng.gen_range(-1.0..1.0);
        let model = Model::init(c.clone(), seed);
        let t = rng.gen_range(6..12);
        let j = rng.gen_range(1..t - 2);
        let frames = Tensor::matrix(t, 4, (0..t * 4).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let mut moved = frames.clone();
        for x in &mut moved.data_mut()[(j + 2) * 4..] {
            *x += rng.gen_range(-3.0..3.0);
        }
        let energy = |f: &Tensor| {
            let mut g = Graph::new();
            let vars = model.bind(&mut g, false);
            let enc = model.encode(&mut g, &vars, f, None);
            let keys = energy_keys(&mut g, enc.features, &vars.mono);
            let gain = normalized_gain(&mut g, &vars.mono);
            let s = g.constant(Tensor::vector(vec![0.3; 8]));
            let e = energy_from_keys(&mut g, keys, s, &vars.mono, gain);
            g.data(e)[..j].iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        };
        let fire = |f: &Tensor| Stream::new(&model, f).fire(&[0.1; 8], j).probs[0].to_bits();
        violations += usize::from(energy(&frames) != energy(&moved)) + usize::from(fire(&frames) != fire(&moved));
        let (h0, log) = greedy_stream_decode(&model, &frames, 8);
        let (h1, _) = greedy_stream_decode(&model, &moved, 8);
        for (i, &b) in h0.boundaries.iter().enumerate() {
            violations += usize::from(log.max_read[i] > b + 2);
            if log.max_read[i] <= j + 2 {
                violations += usize::from(h0.tokens[i] != h1.tokens[i] || h0.boundaries[i] != h1.boundaries[i]);
            }
            checked += 1;
        }
    }
    (violations == 0, format!("40 models, {checked} emitted tokens, {violations} violations"))
}

fn metric_fixtures() -> Outcome {
    let d = deltas(&[vec![5, 9], vec![4]], &[vec![3, 8], vec![4]]).unwrap();
    let mut ok = corpus_latency(&d) == Ok(1.0) && utterance_latency(&d) == Ok(0.75);
    let p = latency_percentiles(&[3, -2, 12, 0, 7, 1, 3]).unwrap();
    ok &= (p.median, p.p90, p.p99) == (3, 12, 12);
    let hundred = latency_percentiles(&(1..=100).collect::<Vec<i64>>()).unwrap();
    ok &= (hundred.median, hundred.p90, hundred.p99) == (50, 90, 99);
    let even = vec![vec![2, -1, 4], vec![0, 0, 7], vec![3, 3, 3]];
    ok &= corpus_latency(&even) == utterance_latency(&even);
    (ok, format!("corpus {:?} utterance {:?} percentiles {:?}", corpus_latency(&d), utterance_latency(&d), (p.median, p.p90, p.p99)))
}

fn determinism() -> Outcome {
    let task = TaskConfig { n: 24, vocab: 5, min_duration: 2, max_duration: 4, min_tokens: 2, max_tokens: 4, seed: 1, ..TaskConfig::default() };
    let train_set = prepare(&gen_lookahead_task(&task), 1).unwrap();
    let dev = prepare(&gen_lookahead_task(&TaskConfig { n: 6, seed: 2, ..task }), 1).unwrap();
    let mut c = ModelConfig::desk(5, 5, 7);
    c.encoder.layers = 1;
    c.encoder.hidden = 8;
    c.decoder.hidden = 8;
    c.decoder.embed_dim = 4;
    c.attention.attn_dim = 6;
    let cfg = TrainConfig { learning_rate: 3e-3, batch_size: 4, epochs: 3, seed: 7, ..TrainConfig::default() };
    let run = || {
        let mut m = Model::init(c.clone(), 3);
        let mut losses = Vec::new();
        train(&mut m, &cfg, &train_set, &dev, |l| losses.push(l.loss.to_bits())).unwrap();
        (m, losses)
    };
    let ((m1, l1), (_, l2)) = (run(), run());
    let forward = |m: &Model| {
        let mut g = Graph::new();
        let vars = m.bind(&mut g, false);
        let f = m.forward_soft(&mut g, &vars, &dev[0].frames, &dev[0].tokens, &SoftOptions::default(), None);
        g.data(f.logits).iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &Checkpoint::new(m1.clone())).unwrap();
    let loaded = load_checkpoint(&path).unwrap().model;
    let same_losses = l1 == l2;
    let same_forward = forward(&loaded) == forward(&m1.rounded_to_f32());
    (same_losses && same_forward, format!("per-epoch losses identical: {same_losses}, reloaded forward identical: {same_forward}"))
}

struct Desk {
    minlt: Outcome,
    decot: Outcome,
    ablation: Outcome,
}

fn desk() -> Desk {
    let started = Instant::now();
    let cfg = desk_config();
    let (train_set, dev) = corpora(&cfg);
    let mut base = Model::init(cfg.model_config(), cfg.train.seed);
    let b = train_to_accuracy(&mut base, &cfg.train, &train_set, &dev, 0.9, 0, |_| {}).expect("baseline trains");
    let fine = 10;
    let (_, m) = warm_start(&base, &cfg.train, objective(ObjectiveMode::Minlt), fine, &train_set, &dev, |_| {}).expect("minlt");
    let minlt_secs = started.elapsed().as_secs_f64();
    let minlt = (
        b.token_acc >= 0.9
            && (m.median as f64) <= 0.75 * b.median as f64
            && m.token_acc >= b.token_acc - 0.03
            && minlt_secs <= 900.0,
        format!(
            "baseline acc {:.4} median {} after {} epochs; minlt acc {:.4} median {}; {:.0}s",
            b.token_acc,
            b.median,
            b.logs.len(),
            m.token_acc,
            m.median,
            minlt_secs
        ),
    );

    let mut zero = objective(ObjectiveMode::Minlt);
    zero.minlt_zero_boundaries = true;
    let (_, z) = warm_start(&base, &cfg.train, zero, fine, &train_set, &dev, |_| {}).expect("ablation");
    let ablation = (
        (z.median - b.median).abs() as f64 <= 0.15 * b.median as f64,
        format!("baseline median {}, zeroed-boundary minlt median {} (acc {:.4})", b.median, z.median, z.token_acc),
    );

    let seg = mean_segment_length(&dev);
    let delta = (2.0 * seg).round() as usize;
    let mut dq = objective(ObjectiveMode::Decot);
    dq.delta = delta;
    let (mq, dec) = warm_start(&base, &cfg.train, dq.clone(), fine, &train_set, &dev, |_| {}).expect("decot");
    dq.quantity_loss = false;
    let (mn, _) = warm_start(&base, &cfg.train, dq, fine, &train_set, &dev, |_| {}).expect("decot without quantity");
    let (with_q, without_q) = (final_quarter_mass(&mq, &dev, Some(delta)), final_quarter_mass(&mn, &dev, Some(delta)));
    let decot = (
        (dec.p99 as f64) <= 0.7 * b.p99 as f64 && without_q < with_q,
        format!(
            "delta {delta} (segment {seg:.2}); p99 baseline {} decot {} (acc {:.4}); final-quarter mass quantity {with_q:.4} none {without_q:.4}; total {:.0}s",
            b.p99,
            dec.p99,
            dec.token_acc,
            started.elapsed().as_secs_f64()
        ),
    );
    Desk { minlt, decot, ablation }
}

fn main() {
    report("alignment oracle equivalence", &alignment_oracle());
    report("gradient suite", &gradient_suite());
    report("mass conservation", &mass_conservation());
    report("delay mask exactness", &decot_exactness());
    report("lookahead bound", &lookahead_bound());
    report("metric fixtures", &metric_fixtures());
    let d = desk();
    report("desk minimum latency training", &d.minlt);
    report("desk delay-constrained tail reduction", &d.decot);
    report("zeroed-boundary ablation", &d.ablation);
    report("determinism and persistence", &determinism());
}
