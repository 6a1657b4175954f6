use mocha_latency::data::Sample;
use mocha_latency::model::{Model, ModelConfig};
use mocha_latency::objectives::{utterance_loss, ObjectiveConfig, ObjectiveMode};
use mocha_latency::tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
const FLOOR: f64 = 1e-6;
const PER_TENSOR: usize = 4;

fn toy_model(ce_head: bool) -> Model {
    let mut c = ModelConfig::desk(6, 5, 7);
    c.encoder.layers = 2;
    c.encoder.hidden = 16;
    c.encoder.ce_head = ce_head;
    c.encoder.dropout = 0.0;
    c.decoder.layers = 1;
    c.decoder.hidden = 16;
    c.decoder.embed_dim = 8;
    c.decoder.dropout = 0.0;
    c.decoder.label_smoothing = 0.1;
    c.attention.attn_dim = 8;
    c.attention.chunk_width = 3;
    c.attention.init_offset = -0.5;
    let mut m = Model::init(c, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for (_, t) in m.params.iter_mut() {
        for x in t.data_mut() {
            *x += rng.gen_range(-0.1..0.1);
        }
    }
    m
}

fn toy_sample() -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let t = 10;
    let frames: Vec<f64> = (0..t * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Sample {
        id: "toy".into(),
        frames: Tensor::matrix(t, 6, frames),
        align: vec![0, 0, 1, 1, 2, 2, 2, 3, 3, 4],
        tokens: vec![3, 5, 2, 1],
        boundaries: vec![2, 5, 8, 10],
    }
}

fn loss_value(model: &Model, sample: &Sample, cfg: &ObjectiveConfig) -> f64 {
    let mut g = Graph::new();
    let vars = model.bind(&mut g, false);
    utterance_loss(&mut g, model, &vars, sample, cfg, None).unwrap().report.total
}

/// Compares analytic gradients with central differences on a fixed sample
/// of entries from every parameter tensor; returns the entries checked.
fn check(model: &Model, cfg: &ObjectiveConfig) -> usize {
    let sample = toy_sample();
    let mut g = Graph::new();
    let vars = model.bind(&mut g, true);
    let out = utterance_loss(&mut g, model, &vars, &sample, cfg, None).unwrap();
    g.backward(out.loss).unwrap();
    let grads = vars.bound.grads(&g);

    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let mut work = model.clone();
    let mut checked = 0;
    let names: Vec<String> = model.params.names().cloned().collect();
    for name in names {
        let n = model.params.get(&name).unwrap().len();
        let picks: Vec<usize> = if n <= PER_TENSOR { (0..n).collect() } else { (0..PER_TENSOR).map(|_| rng.gen_range(0..n)).collect() };
        for e in picks {
            let orig = model.params.get(&name).unwrap().data()[e];
            work.params.get_mut(&name).unwrap().data_mut()[e] = orig + STEP;
            let up = loss_value(&work, &sample, cfg);
            work.params.get_mut(&name).unwrap().data_mut()[e] = orig - STEP;
            let down = loss_value(&work, &sample, cfg);
            work.params.get_mut(&name).unwrap().data_mut()[e] = orig;
            let num = (up - down) / (2.0 * STEP);
            let ana = grads[&name][e];
            let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(FLOOR);
            assert!(rel < REL_TOL, "{:?} {name}[{e}]: analytic {ana:e} numeric {num:e}", cfg.mode);
            checked += 1;
        }
    }
    checked
}

fn cfg(mode: ObjectiveMode) -> ObjectiveConfig {
    ObjectiveConfig { mode, delta: 2, ..ObjectiveConfig::default() }
}

#[test]
fn s2s_loss_gradients() {
    assert!(check(&toy_model(false), &cfg(ObjectiveMode::Baseline)) > 50);
}

#[test]
fn decot_with_quantity_loss_gradients() {
    let c = cfg(ObjectiveMode::Decot);
    let m = toy_model(false);
    let mut g = Graph::new();
    let vars = m.bind(&mut g, false);
    let q = utterance_loss(&mut g, &m, &vars, &toy_sample(), &c, None).unwrap().report.quantity.unwrap();
    assert!(q > 1e-3, "quantity term should be active, got {q}");
    check(&m, &c);
}

#[test]
fn minlt_loss_gradients() {
    check(&toy_model(false), &cfg(ObjectiveMode::Minlt));
}

#[test]
fn mtl_loss_gradients() {
    let m = toy_model(true);
    let checked = check(&m, &cfg(ObjectiveMode::MtlCe));
    assert!(checked > 50);
}
