//! Quick desk-scale comparison of training methods; prints the mean
//! forgetting rate and final accuracy per method.
//!
//! Usage: compare [steps] [seeds] [method ...]

use softmask_lm::config::{Method, RunConfig};
use softmask_lm::harness::{format_report, run_methods};

fn main() {
    env_logger::init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut cfg = RunConfig::desk_scale();
    if let Some(s) = args.first() {
        cfg.train.steps = s.parse().expect("steps");
    }
    if let Ok(lr) = std::env::var("LR") {
        cfg.train.lr = lr.parse().expect("LR");
    }
    if let Ok(pp) = std::env::var("PAIR_PROB") {
        cfg.pair_prob = pp.parse().expect("PAIR_PROB");
    }
    let n_seeds: u64 = args.get(1).map(|s| s.parse().expect("seeds")).unwrap_or(2);
    let methods: Vec<Method> = if args.len() > 2 {
        args[2..].iter().map(|s| Method::parse(s).expect("method")).collect()
    } else {
        vec![Method::Das, Method::Ncl]
    };
    let seeds: Vec<u64> = (0..n_seeds).map(|i| 100 + i).collect();
    let t0 = std::time::Instant::now();
    let report = run_methods(&cfg, &methods, &seeds, None).unwrap();
    println!("{}", format_report(&report));
    for (name, m) in &report.methods {
        for sr in &m.per_seed {
            println!(
                "{name} seed={} forgetting={:?} acc={:?}",
                sr.seed, sr.forgetting, sr.accuracy.acc
            );
        }
    }
    println!("elapsed: {:.1}s", t0.elapsed().as_secs_f64());
}
