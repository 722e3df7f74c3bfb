use cec_core::config::RunConfig;
use cec_core::harness::{train_run, EvalOptions};
use cec_core::synth::{mix_seed, Catalog, SynthDataset};
use std::time::Instant;

fn bench_cfg(attention: &str, metric: &str, seed: u64) -> RunConfig {
    RunConfig {
        dataset_seed: 7,
        n_way: 5,
        k_shot: 1,
        queries_per_class: 1,
        train_episodes: 3000,
        eval_episodes: 500,
        attention: attention.into(),
        metric: metric.into(),
        lambda: 1.0,
        encoder_channels: 8,
        items_per_class: 50,
        precision: "f32".into(),
        seed,
        ..RunConfig::default()
    }
}

fn run_one(attention: &str, metric: &str, seed: u64) -> (f64, f64) {
    let cfg = bench_cfg(attention, metric, seed);
    let t0 = Instant::now();
    let (state, records) = train_run::<f32>(&cfg).unwrap();
    let t_train = t0.elapsed().as_secs_f64();
    let catalog = Catalog::parse("v1").unwrap();
    let ds = SynthDataset::new(cfg.dataset_seed, catalog.clone(), cfg.items_per_class);
    let opts = EvalOptions {
        episodes: cfg.eval_episodes, n_way: 5, k_shot: 1, queries_per_class: 3,
        seed: mix_seed(&[cfg.seed, 0xe7a1]), finetune: None,
    };
    let t1 = Instant::now();
    let out = state.evaluate(&ds, catalog.novel_classes(), &opts).unwrap();
    eprintln!(
        "{attention}+{metric} seed={seed}: acc={:.2}±{:.2} train={:.0}s eval={:.0}s last_loss={:.2}",
        out.metric.mean_accuracy, out.metric.ci95, t_train, t1.elapsed().as_secs_f64(),
        records.last().unwrap().metric
    );
    (out.metric.mean_accuracy, out.metric.ci95)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(101);
    run_one("none", "cosine", seed);
    run_one("cross", "cosine", seed);
    run_one("cecm-matmul", "cecd-cosine", seed);
}
