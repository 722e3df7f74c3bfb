use cec_core::config::RunConfig;
use cec_core::harness::{train_run, EvalOptions};
use cec_core::synth::{mix_seed, Catalog, SynthDataset};

fn run_one(attention: &str, metric: &str, seed: u64, channels: usize) -> f64 {
    let cfg = RunConfig {
        dataset_seed: 7, n_way: 5, k_shot: 1, queries_per_class: 1,
        train_episodes: 3000, eval_episodes: 500,
        attention: attention.into(), metric: metric.into(),
        lambda: 1.0, learning_rate: 1e-3, encoder_channels: channels, items_per_class: 50,
        precision: "f32".into(), seed,
        ..RunConfig::default()
    };
    let t0 = std::time::Instant::now();
    let (state, _) = train_run::<f32>(&cfg).unwrap();
    let catalog = Catalog::parse("v1").unwrap();
    let ds = SynthDataset::new(cfg.dataset_seed, catalog.clone(), cfg.items_per_class);
    let opts = EvalOptions {
        episodes: 500, n_way: 5, k_shot: 1, queries_per_class: 3,
        seed: mix_seed(&[cfg.seed, 0xe7a1]), finetune: None,
    };
    let out = state.evaluate(&ds, catalog.novel_classes(), &opts).unwrap();
    eprintln!("  {attention}+{metric} c={channels} seed={seed}: {:.2} ({:.0}s)",
        out.metric.mean_accuracy, t0.elapsed().as_secs_f64());
    out.metric.mean_accuracy
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let channels: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(16);
    for seed in [103u64, 102] {
        let base = run_one("none", "cosine", seed, channels);
        let cec = run_one("cecm-matmul", "cecd-cosine", seed, channels);
        eprintln!("c={channels} seed={seed}: baseline={base:.2} cec={cec:.2} gap={:+.2}", cec - base);
    }
}
