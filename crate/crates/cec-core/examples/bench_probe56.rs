use cec_core::config::RunConfig;
use cec_core::encoder::encode;
use cec_core::episode::{compute_prototypes, sample_episode};
use cec_core::export::mask_contrast;
use cec_core::harness::{train_run, EvalOptions, FinetuneOptions};
use cec_core::scalar::Scalar;
use cec_core::synth::{mix_seed, Catalog, SynthDataset};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(201);
    let cfg = RunConfig {
        dataset_seed: 7,
        n_way: 5,
        k_shot: 5,
        queries_per_class: 1,
        train_episodes: 1500,
        eval_episodes: 500,
        attention: "cecm-matmul".into(),
        metric: "cecd-cosine".into(),
        lambda: 1.0,
        encoder_channels: 8,
        items_per_class: 50,
        precision: "f32".into(),
        seed,
        ..RunConfig::default()
    };
    let t0 = Instant::now();
    let (state, _) = train_run::<f32>(&cfg).unwrap();
    eprintln!("train 5-shot: {:.0}s", t0.elapsed().as_secs_f64());
    let catalog = Catalog::parse("v1").unwrap();
    let ds = SynthDataset::new(cfg.dataset_seed, catalog.clone(), cfg.items_per_class);
    let opts = EvalOptions {
        episodes: 500,
        n_way: 5,
        k_shot: 5,
        queries_per_class: 3,
        seed: mix_seed(&[cfg.seed, 0xe7a1]),
        finetune: Some(FinetuneOptions { steps: 50, learning_rate: 1e-2, seed: mix_seed(&[cfg.seed, 0xf17e]) }),
    };
    let t1 = Instant::now();
    let out = state.evaluate(&ds, catalog.novel_classes(), &opts).unwrap();
    let comb = out.combined.unwrap();
    eprintln!(
        "5-shot eval: metric={:.2}±{:.2} combined={:.2}±{:.2} diff={:+.2} ({:.0}s)",
        out.metric.mean_accuracy, out.metric.ci95, comb.mean_accuracy, comb.ci95,
        comb.mean_accuracy - out.metric.mean_accuracy, t1.elapsed().as_secs_f64()
    );

    // localization: relation map vs object mask over 100 fresh episodes
    let view = state.inference_view();
    let mut hits = 0;
    for i in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[4242, i]));
        let ep = sample_episode(&ds, &catalog.novel_classes().to_vec(), 5, 1, 5, &mut rng).unwrap();
        let mut feats = Vec::new();
        for shots in &ep.support {
            feats.push(
                shots.iter().map(|img| encode(&img.to_tensor(), &view.encoder).unwrap()).collect::<Vec<_>>(),
            );
        }
        let protos = compute_prototypes(&feats).unwrap();
        let (query, labels) = &ep.queries[0];
        let q = encode(&query.to_tensor(), &view.encoder).unwrap();
        let relation = view.relation_map_for(&q, &protos[labels.fewshot]).unwrap();
        let scores: Vec<f64> = relation.scores().iter().map(|v| v.to_f64_c()).collect();
        let (inside, outside) = mask_contrast(&scores, &query.object_mask).unwrap();
        if inside > outside {
            hits += 1;
        }
    }
    eprintln!("localization: {hits}/100 episodes with inside > outside");
}
