//! Runs the synthetic FT vs debiased comparison over a few seeds and prints
//! per-split accuracy and per-position curves.
//!
//! Optional env overrides: EPOCHS, LR, BATCH, VOCAB, FACTS, UTTS, NOISE, ALPHA, SEEDS.

use std::time::Instant;

use posdebias::objective::LossConfig;
use posdebias::toy_model::{run_experiment, ExperimentConfig};

fn env<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> posdebias::Result<()> {
    let seeds: u64 = env("SEEDS", 5);
    let alpha: f64 = env("ALPHA", 0.2);
    let start = Instant::now();
    for (name, a) in [("ft", 0.0), ("debiased", alpha)] {
        let (mut b, mut n, mut spread) = (0.0, 0.0, 0.0);
        for seed in 0..seeds {
            let mut cfg = ExperimentConfig::default();
            cfg.synth.seed = seed;
            cfg.synth.vocab_size = env("VOCAB", cfg.synth.vocab_size);
            cfg.synth.n_facts = env("FACTS", cfg.synth.n_facts);
            cfg.synth.n_utterances = env("UTTS", cfg.synth.n_utterances);
            cfg.noise_rate = env("NOISE", cfg.noise_rate);
            cfg.train.seed = seed;
            cfg.train.loss = LossConfig::new(a)?;
            cfg.train.epochs = env("EPOCHS", cfg.train.epochs);
            cfg.train.learning_rate = env("LR", cfg.train.learning_rate);
            cfg.train.batch_size = env("BATCH", cfg.train.batch_size);
            let out = run_experiment(&cfg)?;
            let e = &out.eval;
            let curve: Vec<String> = e
                .by_relpos
                .rows
                .iter()
                .map(|r| format!("{}:{:.2}", r.relpos, r.mean))
                .collect();
            println!(
                "{name} seed {seed}: biased {:.3} non-biased {:.3} best_epoch {:?} spread {:.3} [{}]",
                e.biased.unwrap_or(f64::NAN),
                e.non_biased.unwrap_or(f64::NAN),
                out.train.best_epoch,
                e.by_relpos.spread(),
                curve.join(" ")
            );
            b += e.biased.unwrap_or(0.0);
            n += e.non_biased.unwrap_or(0.0);
            spread += e.by_relpos.spread();
        }
        let k = seeds as f64;
        println!("{name} mean: biased {:.4} non-biased {:.4} spread {:.4}", b / k, n / k, spread / k);
    }
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
