//! Quick step-time measurement at the desk-scale defaults.

use std::time::Instant;

use moelab::config::parse_config_str;
use moelab::corpus::synthetic_corpus;
use moelab_core::model::{build_model, train_step, OptimizerConfig, OptimizerState};
use moelab_core::rng::SeededRng;

fn main() {
    let corpus: Vec<u16> = synthetic_corpus(1, 300_000).into_iter().map(u16::from).collect();
    for (label, variant, heads) in [("smoe", "smoe", 4), ("mhmoe-h4", "mhmoe", 4), ("mhmoe-h8", "mhmoe", 8)] {
        let cfg = parse_config_str(&format!(
            "variant = {variant}\nheads = {heads}\nbeta = auto\nsteps = 3000\nwarmup = 100\n"
        ))
        .unwrap();
        let t0 = Instant::now();
        let mut model = build_model(&cfg.model).unwrap();
        let build = t0.elapsed().as_secs_f64();
        let mut opt = OptimizerState::new(&model, OptimizerConfig::new(cfg.max_lr, cfg.warmup, cfg.steps));
        let mut rng = SeededRng::new(0);
        let window = cfg.model.context + 1;
        let mut step_time = 0.0;
        for i in 0..4 {
            let batch: Vec<Vec<u16>> = (0..cfg.batch_size)
                .map(|_| {
                    let s = rng.below(corpus.len() - window);
                    corpus[s..s + window].to_vec()
                })
                .collect();
            let t = Instant::now();
            train_step(&mut model, &batch, &mut opt).unwrap();
            let dt = t.elapsed().as_secs_f64();
            if i >= 1 {
                step_time += dt / 3.0;
            }
        }
        let t = Instant::now();
        let out = model.evaluate(&corpus[..30_000], cfg.batch_size).unwrap();
        let eval30k = t.elapsed().as_secs_f64();
        println!(
            "{label}: beta={:.3} build={build:.2}s step={step_time:.2}s eval(30k tokens)={eval30k:.1}s ppl0={:.1} -> 3000 steps ~ {:.0} min",
            model.beta,
            out.perplexity,
            (3000.0 * step_time) / 60.0
        );
    }
}
