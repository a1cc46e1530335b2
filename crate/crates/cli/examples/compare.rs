//! Reduced-scale directional comparison of the three variants.
//!
//! Trains dense-free baselines (top-2 over 8 experts) against the multi-head
//! variant at h=4 and h=8 with parameter-matched experts, over several seeds,
//! and prints final validation perplexity and expert-activation percentages.
//!
//!     cargo run -p moelab --example compare --release [steps] [seeds]
//!
//! At the default 1200 steps / 5 seeds this takes a few CPU-hours.

use std::time::Instant;

use moelab::commands::cmd_train;
use moelab::config::parse_config_str;
use moelab::corpus::synthetic_corpus;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1200);
    let seeds: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5);

    let root = std::env::temp_dir().join(format!("moelab-compare-{}", std::process::id()));
    std::fs::create_dir_all(&root).expect("create work dir");
    let corpus_path = root.join("corpus.txt");
    std::fs::write(&corpus_path, synthetic_corpus(2024, 1_200_000)).expect("write corpus");

    let variants: [(&str, &str, usize); 3] =
        [("baseline", "smoe", 4), ("multihead-h4", "mhmoe", 4), ("multihead-h8", "mhmoe", 8)];

    println!("steps = {steps}, seeds = {seeds}, corpus = 1.2 MB synthetic text");
    println!(
        "{:<14} {:>4} {:>10} {:>12} {:>10} {:>8}",
        "variant", "seed", "val_ppl", "activation%", "beta", "minutes"
    );

    let mut results: Vec<(usize, u64, f64, f64)> = Vec::new();
    for seed in 0..seeds {
        for (vi, (label, variant, heads)) in variants.iter().enumerate() {
            let cfg = parse_config_str(&format!(
                "variant = {variant}\nvocab_size = 256\nd = 64\nn_blocks = 4\nn_attn_heads = 4\n\
                 context = 64\nmoe_every = 2\nn_experts = 8\nk = 2\nheads = {heads}\nbeta = auto\n\
                 alpha = 0.01\nseed = {seed}\ncorpus = {}\nsplit = 0.05\nsteps = {steps}\n\
                 warmup = 50\nmax_lr = 0.0003\nbatch_size = 8\neval_interval = {}\nout_dir = {}\n",
                corpus_path.display(),
                (steps / 2).max(1),
                root.join(format!("{label}-s{seed}")).display(),
            ))
            .expect("config");
            let t = Instant::now();
            let summary = cmd_train(&cfg, None).expect("train");
            println!(
                "{:<14} {:>4} {:>10.3} {:>12.1} {:>10.3} {:>8.1}",
                label,
                seed,
                summary.final_val_ppl,
                summary.final_activation_overall * 100.0,
                summary.beta,
                t.elapsed().as_secs_f64() / 60.0
            );
            results.push((vi, seed, summary.final_val_ppl, summary.final_activation_overall));
        }
    }

    let per_seed = |vi: usize| -> Vec<(f64, f64)> {
        (0..seeds)
            .map(|s| {
                let r = results.iter().find(|r| r.0 == vi && r.1 == s).unwrap();
                (r.2, r.3)
            })
            .collect()
    };
    let base = per_seed(0);
    let h4 = per_seed(1);
    let h8 = per_seed(2);
    let a = (0..seeds as usize).filter(|&s| h4[s].0 <= base[s].0).count();
    let b = (0..seeds as usize).filter(|&s| h4[s].1 >= 1.5 * base[s].1).count();
    let c = (0..seeds as usize).filter(|&s| h8[s].1 >= h4[s].1).count();
    println!("\nmultihead-h4 ppl <= baseline:        {a}/{seeds} seeds");
    println!("multihead-h4 activation >= 1.5x:     {b}/{seeds} seeds");
    println!("multihead-h8 activation >= h4:       {c}/{seeds} seeds");
    println!("(outputs under {})", root.display());
}
