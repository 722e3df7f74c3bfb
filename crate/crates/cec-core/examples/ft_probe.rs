use cec_core::config::RunConfig;
use cec_core::harness::{train_run, EvalOptions, FinetuneOptions};
use cec_core::synth::{mix_seed, Catalog, SynthDataset};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(101);
    let cfg = RunConfig {
        dataset_seed: 7, n_way: 5, k_shot: 5, queries_per_class: 1,
        train_episodes: 1500, eval_episodes: 300,
        attention: "cecm-matmul".into(), metric: "cecd-cosine".into(),
        lambda: 1.0, encoder_channels: 8, items_per_class: 50,
        precision: "f32".into(), seed,
        ..RunConfig::default()
    };
    let (state, _) = train_run::<f32>(&cfg).unwrap();
    let catalog = Catalog::parse("v1").unwrap();
    let ds = SynthDataset::new(cfg.dataset_seed, catalog.clone(), cfg.items_per_class);
    for (steps, lr) in [(50usize, 1e-2), (50, 3e-2), (100, 3e-2), (50, 1e-1), (25, 1e-2)] {
        let opts = EvalOptions {
            episodes: 300, n_way: 5, k_shot: 5, queries_per_class: 3,
            seed: mix_seed(&[cfg.seed, 0xe7a1]),
            finetune: Some(FinetuneOptions { steps, learning_rate: lr, seed: mix_seed(&[cfg.seed, 0xf17e]) }),
        };
        let out = state.evaluate(&ds, catalog.novel_classes(), &opts).unwrap();
        let comb = out.combined.unwrap();
        eprintln!(
            "steps={steps} lr={lr}: metric={:.2} combined={:.2} diff={:+.2}",
            out.metric.mean_accuracy, comb.mean_accuracy,
            comb.mean_accuracy - out.metric.mean_accuracy
        );
    }
}
