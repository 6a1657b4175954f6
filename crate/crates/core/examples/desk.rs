//! Runs the desk-scale latency comparison and prints one line per run.

use std::time::Instant;

use mocha_latency::experiment::*;
use mocha_latency::model::Model;
use mocha_latency::objectives::ObjectiveMode;
use mocha_latency::training::EpochLog;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let extra: usize = args.get(1).map_or(2, |s| s.parse().expect("extra epochs"));
    let fine: usize = args.get(2).map_or(10, |s| s.parse().expect("fine-tune epochs"));
    let cfg = desk_config();
    let t0 = Instant::now();
    let (train, dev) = corpora(&cfg);
    let seg = mean_segment_length(&dev);
    let mut model = Model::init(cfg.model_config(), cfg.train.seed);
    let show = |tag: &str, r: &RunResult| {
        println!(
            "{tag:<10} acc {:.4} median {} p99 {} avg {:.3} epochs {} t={:.0}s",
            r.token_acc,
            r.median,
            r.p99,
            r.avg,
            r.logs.len(),
            t0.elapsed().as_secs_f64()
        )
    };
    let log = |tag: &'static str| {
        move |l: &EpochLog| {
            eprintln!("{tag} {} loss {:.4} acc {:.4} median {} p99 {:?}", l.epoch, l.loss, l.token_acc, l.latency_median, l.latency_p99)
        }
    };
    let base = train_to_accuracy(&mut model, &cfg.train, &train, &dev, 0.9, extra, log("base")).expect("baseline");
    show("baseline", &base);
    let (_, minlt) = warm_start(&model, &cfg.train, objective(ObjectiveMode::Minlt), fine, &train, &dev, log("minlt")).unwrap();
    show("minlt", &minlt);
    let mut zero = objective(ObjectiveMode::Minlt);
    zero.minlt_zero_boundaries = true;
    let (_, abl) = warm_start(&model, &cfg.train, zero, fine, &train, &dev, log("b0")).unwrap();
    show("minlt-b0", &abl);
    let delta = (2.0 * seg).round() as usize;
    println!("segment {seg:.2} delta {delta}");
    let mut dq = objective(ObjectiveMode::Decot);
    dq.delta = delta;
    let (mq, decot) = warm_start(&model, &cfg.train, dq.clone(), fine, &train, &dev, log("decot")).unwrap();
    show("decot", &decot);
    dq.quantity_loss = false;
    let (mn, decot_nq) = warm_start(&model, &cfg.train, dq, fine, &train, &dev, log("decot-nq")).unwrap();
    show("decot-noq", &decot_nq);
    println!(
        "final-quarter mass: quantity {:.4} none {:.4} baseline {:.4}",
        final_quarter_mass(&mq, &dev, Some(delta)),
        final_quarter_mass(&mn, &dev, Some(delta)),
        final_quarter_mass(&model, &dev, Some(delta))
    );
}
