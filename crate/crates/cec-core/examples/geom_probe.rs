use cec_core::config::{AttentionKind, MetricKind, RunConfig};
use cec_core::harness::{train_run, EvalOptions};
use cec_core::synth::{mix_seed, Catalog, SynthDataset};
use cec_core::cluster::ClusterMode;
use cec_core::encoder::encode;
use cec_core::episode::{compute_prototypes, sample_episode};
use cec_core::export::mask_contrast;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let channels: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(8);
    let episodes: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(3000);
    let cfg = RunConfig {
        dataset_seed: 7, n_way: 5, k_shot: 1, queries_per_class: 1,
        train_episodes: episodes, eval_episodes: 300,
        attention: "cecm-matmul".into(), metric: "cecd-cosine".into(),
        lambda: 1.0, encoder_channels: channels, items_per_class: 50,
        precision: "f32".into(), seed: 101,
        ..RunConfig::default()
    };
    let t0 = std::time::Instant::now();
    let (state, _) = train_run::<f32>(&cfg).unwrap();
    eprintln!("trained c={channels} in {:.0}s", t0.elapsed().as_secs_f64());
    let catalog = Catalog::parse("v1").unwrap();
    let ds = SynthDataset::new(cfg.dataset_seed, catalog.clone(), cfg.items_per_class);

    // relation statistics: correct-class vs wrong-class scores, split by
    // object vs background patches; and mask contrast hit rate
    let view = state.inference_view();
    let mut hits = 0;
    let (mut obj_gap, mut bg_gap, mut count) = (0.0f64, 0.0f64, 0);
    for i in 0..60u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[991, i]));
        let ep = sample_episode(&ds, &catalog.novel_classes().to_vec(), 5, 1, 5, &mut rng).unwrap();
        let mut feats = Vec::new();
        for shots in &ep.support {
            feats.push(shots.iter().map(|im| encode(&im.to_tensor(), &view.encoder).unwrap()).collect::<Vec<_>>());
        }
        let protos = compute_prototypes(&feats).unwrap();
        let (query, labels) = &ep.queries[0];
        let q = encode(&query.to_tensor(), &view.encoder).unwrap();
        let rel = view.relation_map_for(&q, &protos[labels.fewshot]).unwrap();
        let scores: Vec<f64> = rel.scores().iter().map(|v| *v as f64).collect();
        let (inside, outside) = mask_contrast(&scores, &query.object_mask).unwrap();
        if inside > outside { hits += 1; }

        // per-patch relation separation through the metric
        let wrong_k = (labels.fewshot + 1) % 5;
        use cec_core::blocks::{cecd, cecm};
        let params = cec_core::cluster::ClusterParams::matmul(1.0);
        let cosp = cec_core::cluster::ClusterParams::cosine(1.0);
        let (qb_r, pb_r) = cecm(&q, &protos[labels.fewshot], &params).unwrap();
        let (qb_w, pb_w) = cecm(&q, &protos[wrong_k], &params).unwrap();
        let r_right = cecd(&qb_r, &pb_r, &cosp).unwrap();
        let r_wrong = cecd(&qb_w, &pb_w, &cosp).unwrap();
        // patch owns object if >30% of its pixel block is masked
        for n in 0..25 {
            let (py, px) = (n / 5, n % 5);
            let mut inside_px = 0;
            for yy in 0..7 { for xx in 0..7 {
                let y = (py * 32) / 5 + yy; let x = (px * 32) / 5 + xx;
                if y < 32 && x < 32 && query.object_mask[y * 32 + x] { inside_px += 1; }
            }}
            let gap = (r_right.scores()[n] - r_wrong.scores()[n]) as f64;
            if inside_px > 15 { obj_gap += gap; count += 1; } else { bg_gap += gap / 24.0; }
        }
    }
    eprintln!("mask-contrast hits: {hits}/60; mean relation gap right-vs-wrong: object={:.4} background={:.4}",
        obj_gap / count.max(1) as f64, bg_gap / 60.0);

    let opts = EvalOptions { episodes: 300, n_way: 5, k_shot: 1, queries_per_class: 3,
        seed: mix_seed(&[cfg.seed, 0xe7a1]), finetune: None };
    for (attn, metric, name) in [
        (AttentionKind::None, MetricKind::Cosine, "none+cosine"),
        (AttentionKind::Cecm(ClusterMode::MatMul), MetricKind::Cecd(ClusterMode::Cosine), "cecm+cecd"),
    ] {
        let mut v = state.inference_view();
        v.attention = attn; v.metric = metric;
        if v.cecm_params.is_none() { v.cecm_params = Some(cec_core::cluster::ClusterParams::matmul(1.0)); }
        if v.cecd_params.is_none() { v.cecd_params = Some(cec_core::cluster::ClusterParams::cosine(1.0)); }
        let out = v.evaluate(&ds, catalog.novel_classes(), &opts).unwrap();
        eprintln!("{name}: {:.2}±{:.2}", out.metric.mean_accuracy, out.metric.ci95);
    }
}
