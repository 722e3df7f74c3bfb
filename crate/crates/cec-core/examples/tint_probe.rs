use cec_core::config::RunConfig;
use cec_core::harness::{train_run, EvalOptions};
use cec_core::synth::{mix_seed, Catalog, SynthDataset};

fn run_one(attention: &str, metric: &str, seed: u64, lr: f64) -> f64 {
    let cfg = RunConfig {
        dataset_seed: 7, n_way: 5, k_shot: 1, queries_per_class: 1,
        train_episodes: 3000, eval_episodes: 500,
        attention: attention.into(), metric: metric.into(),
        lambda: 1.0, learning_rate: lr, encoder_channels: 8, items_per_class: 50,
        precision: "f32".into(), seed,
        ..RunConfig::default()
    };
    let (state, _) = train_run::<f32>(&cfg).unwrap();
    let catalog = Catalog::parse("v1").unwrap();
    let ds = SynthDataset::new(cfg.dataset_seed, catalog.clone(), cfg.items_per_class);
    let opts = EvalOptions {
        episodes: 500, n_way: 5, k_shot: 1, queries_per_class: 3,
        seed: mix_seed(&[cfg.seed, 0xe7a1]), finetune: None,
    };
    let out = state.evaluate(&ds, catalog.novel_classes(), &opts).unwrap();
    out.metric.mean_accuracy
}

fn main() {
    for (seed, lr) in [(103u64, 1e-3), (102, 1e-3), (103, 2e-3)] {
        let base = run_one("none", "cosine", seed, lr);
        let cec = run_one("cecm-matmul", "cecd-cosine", seed, lr);
        eprintln!("tint seed={seed} lr={lr}: baseline={base:.2} cec={cec:.2} gap={:+.2}", cec - base);
    }
}
