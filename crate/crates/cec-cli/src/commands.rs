//! Implementations behind the CLI subcommands, generic over the runtime
//! precision switch.

use std::fs;
use std::path::{Path, PathBuf};

use cec_core::checkpoint::Snapshot;
use cec_core::config::{LossBalance, RunConfig};
use cec_core::connect::FeatureMap;
use cec_core::encoder::encode;
use cec_core::episode::{compute_prototypes, sample_episode};
use cec_core::error::{CecError, Result};
use cec_core::export::{mask_contrast, relation_to_csv, relation_to_pgm};
use cec_core::harness::{
    train_run_with_balance, EvalOptions, FinetuneOptions, TrainState, METRICS_CSV_HEADER,
};
use cec_core::scalar::Scalar;
use cec_core::synth::{mix_seed, Catalog, SynthDataset};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::CommonArgsExport as CommonArgs;

/// Stream id separating evaluation sampling from training sampling.
const EVAL_STREAM: u64 = 0xe7a1;
/// Stream id for per-episode fine-tune head initialization.
const FINETUNE_STREAM: u64 = 0xf17e;

fn load_config(common: &CommonArgs, episodes_for_training: bool) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.to_string_lossy().into_owned();
    }
    if let Some(episodes) = common.episodes {
        if episodes_for_training {
            cfg.train_episodes = episodes;
        } else {
            cfg.eval_episodes = episodes;
        }
    }
    if let Some(precision) = &common.precision {
        cfg.precision = precision.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dataset_of(cfg: &RunConfig) -> Result<(SynthDataset, Catalog)> {
    let catalog = Catalog::parse(&cfg.catalog_version)?;
    Ok((
        SynthDataset::new(cfg.dataset_seed, catalog.clone(), cfg.items_per_class),
        catalog,
    ))
}

fn checkpoint_path(cfg: &RunConfig, explicit: Option<&Path>) -> PathBuf {
    match explicit {
        Some(p) => p.to_path_buf(),
        None => Path::new(&cfg.out_dir).join("ckpt.cec1"),
    }
}

fn eval_options(cfg: &RunConfig, finetune: bool) -> EvalOptions {
    EvalOptions {
        episodes: cfg.eval_episodes,
        n_way: cfg.n_way,
        k_shot: cfg.k_shot,
        queries_per_class: cfg.queries_per_class,
        seed: mix_seed(&[cfg.seed, EVAL_STREAM]),
        finetune: finetune.then_some(FinetuneOptions {
            steps: cfg.finetune_steps,
            learning_rate: cfg.finetune_learning_rate,
            seed: mix_seed(&[cfg.seed, FINETUNE_STREAM]),
        }),
    }
}

// -- train -------------------------------------------------------------

pub fn train(common: &CommonArgs) -> Result<()> {
    let cfg = load_config(common, true)?;
    match cfg.precision.as_str() {
        "f32" => train_impl::<f32>(&cfg),
        _ => train_impl::<f64>(&cfg),
    }
}

fn train_impl<S: Scalar>(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir)?;
    let (dataset, catalog) = dataset_of(cfg)?;
    let base = catalog.base_classes().to_vec();
    let mut state = TrainState::<S>::new(cfg)?;
    let mut csv = String::from(METRICS_CSV_HEADER);
    csv.push('\n');
    let mut last_loss = f64::NAN;
    for _ in 0..cfg.train_episodes {
        let episode = sample_episode(
            &dataset,
            &base,
            cfg.n_way,
            cfg.k_shot,
            cfg.n_way * cfg.queries_per_class,
            &mut state.rng,
        )?;
        match state.base_train_step(&episode) {
            Ok(stats) => {
                csv.push_str(&stats.csv_line());
                csv.push('\n');
                last_loss = stats.total;
            }
            Err(err @ CecError::Training(_)) => {
                // leave the evidence behind before bailing out
                let dump = Path::new(&cfg.out_dir).join("dump.cec1");
                state.snapshot().save(&dump)?;
                fs::write(Path::new(&cfg.out_dir).join("metrics.csv"), &csv)?;
                return Err(err);
            }
            Err(err) => return Err(err),
        }
    }
    fs::write(Path::new(&cfg.out_dir).join("metrics.csv"), &csv)?;
    let ckpt = Path::new(&cfg.out_dir).join("ckpt.cec1");
    state.snapshot().save(&ckpt)?;
    println!(
        "trained episodes={} params={} final_loss={} ckpt={}",
        cfg.train_episodes,
        state.param_count(),
        if last_loss.is_nan() { "-".to_string() } else { format!("{last_loss:.4}") },
        ckpt.display()
    );
    Ok(())
}

// -- eval --------------------------------------------------------------

pub fn eval(common: &CommonArgs, checkpoint: Option<&Path>, finetune: bool) -> Result<()> {
    let cfg = load_config(common, false)?;
    match cfg.precision.as_str() {
        "f32" => eval_impl::<f32>(&cfg, checkpoint, finetune),
        _ => eval_impl::<f64>(&cfg, checkpoint, finetune),
    }
}

fn eval_impl<S: Scalar>(cfg: &RunConfig, checkpoint: Option<&Path>, finetune: bool) -> Result<()> {
    let path = checkpoint_path(cfg, checkpoint);
    let snap = Snapshot::load(&path)?;
    let state = TrainState::<S>::restore(cfg, &snap)?;
    let (dataset, catalog) = dataset_of(cfg)?;
    let opts = eval_options(cfg, finetune);
    let outcome = state.evaluate(&dataset, catalog.novel_classes(), &opts)?;
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(Path::new(&cfg.out_dir).join("eval.csv"), outcome.metric.csv())?;
    if let Some(combined) = &outcome.combined {
        fs::write(
            Path::new(&cfg.out_dir).join("eval_combined.csv"),
            combined.csv(),
        )?;
    }
    if let Some(combined) = &outcome.combined {
        println!(
            "acc={:.2} ci95={:.2} episodes={} head=metric",
            outcome.metric.mean_accuracy, outcome.metric.ci95, outcome.metric.episodes
        );
        println!(
            "acc={:.2} ci95={:.2} episodes={} head=combined",
            combined.mean_accuracy, combined.ci95, combined.episodes
        );
    } else {
        println!(
            "acc={:.2} ci95={:.2} episodes={}",
            outcome.metric.mean_accuracy, outcome.metric.ci95, outcome.metric.episodes
        );
    }
    Ok(())
}

// -- ablate ------------------------------------------------------------

const ATTENTION_GRID: [&str; 6] =
    ["none", "cross", "cecm-matmul", "cecm-cosine", "cecm-metagcn", "cecm-transformer"];
const METRIC_GRID: [&str; 5] =
    ["cosine", "cecd-matmul", "cecd-cosine", "cecd-metagcn", "cecd-transformer"];

pub fn ablate(common: &CommonArgs) -> Result<()> {
    let cfg = load_config(common, true)?;
    match cfg.precision.as_str() {
        "f32" => ablate_impl::<f32>(&cfg),
        _ => ablate_impl::<f64>(&cfg),
    }
}

fn train_and_score<S: Scalar>(cfg: &RunConfig, balance: LossBalance) -> Result<(f64, f64, usize)> {
    let (state, _) = train_run_with_balance::<S>(cfg, balance)?;
    let (dataset, catalog) = dataset_of(cfg)?;
    let opts = eval_options(cfg, false);
    let outcome = state.evaluate(&dataset, catalog.novel_classes(), &opts)?;
    Ok((outcome.metric.mean_accuracy, outcome.metric.ci95, state.param_count()))
}

fn ablate_impl<S: Scalar>(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir)?;

    let mut modules_csv = String::from("attn,metric,acc,ci95,params\n");
    for attn in ATTENTION_GRID {
        for metric in METRIC_GRID {
            let cell = RunConfig {
                attention: attn.to_string(),
                metric: metric.to_string(),
                ..cfg.clone()
            };
            let (acc, ci, params) =
                train_and_score::<S>(&cell, LossBalance::Uncertainty { lambda: cell.lambda })?;
            modules_csv.push_str(&format!("{attn},{metric},{acc:.2},{ci:.2},{params}\n"));
        }
    }
    let modules_path = Path::new(&cfg.out_dir).join("ablate.csv");
    fs::write(&modules_path, &modules_csv)?;

    let mut loss_csv = String::from("lambda,weight_global,weight_rotation,acc,ci95\n");
    for (wg, wr) in [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)] {
        let (acc, ci, _) =
            train_and_score::<S>(cfg, LossBalance::Fixed { global: wg, rotation: wr })?;
        let fmt_w = |w: f64| if w == 0.0 { "-".to_string() } else { format!("{w:.1}") };
        loss_csv.push_str(&format!("-,{},{},{acc:.2},{ci:.2}\n", fmt_w(wg), fmt_w(wr)));
    }
    for lambda in [0.5, 1.0, 1.5, 2.0] {
        let cell = RunConfig { lambda, ..cfg.clone() };
        let (acc, ci, _) = train_and_score::<S>(&cell, LossBalance::Uncertainty { lambda })?;
        loss_csv.push_str(&format!("{lambda:.1},w,w,{acc:.2},{ci:.2}\n"));
    }
    let loss_path = Path::new(&cfg.out_dir).join("ablate_loss.csv");
    fs::write(&loss_path, &loss_csv)?;

    println!(
        "ablate cells={} loss_rows=8 out={} and {}",
        ATTENTION_GRID.len() * METRIC_GRID.len(),
        modules_path.display(),
        loss_path.display()
    );
    Ok(())
}

// -- export-relation ---------------------------------------------------

pub fn export_relation(
    common: &CommonArgs,
    checkpoint: Option<&Path>,
    episode_seed: u64,
) -> Result<()> {
    let cfg = load_config(common, false)?;
    match cfg.precision.as_str() {
        "f32" => export_relation_impl::<f32>(&cfg, checkpoint, episode_seed),
        _ => export_relation_impl::<f64>(&cfg, checkpoint, episode_seed),
    }
}

fn export_relation_impl<S: Scalar>(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    episode_seed: u64,
) -> Result<()> {
    let path = checkpoint_path(cfg, checkpoint);
    let snap = Snapshot::load(&path)?;
    let state = TrainState::<S>::restore(cfg, &snap)?.inference_view();
    let (dataset, catalog) = dataset_of(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed);
    let episode = sample_episode(
        &dataset,
        &catalog.novel_classes().to_vec(),
        cfg.n_way,
        cfg.k_shot,
        cfg.n_way,
        &mut rng,
    )?;

    let mut support_features = Vec::new();
    for shots in &episode.support {
        let feats = shots
            .iter()
            .map(|img| encode(&img.to_tensor(), &state.encoder))
            .collect::<Result<Vec<FeatureMap<S>>>>()?;
        support_features.push(feats);
    }
    let prototypes = compute_prototypes(&support_features)?;
    let (query, labels) = &episode.queries[0];
    let q = encode(&query.to_tensor(), &state.encoder)?;
    let relation = state.relation_map_for(&q, &prototypes[labels.fewshot])?;
    let scores: Vec<f64> = relation.scores().iter().map(|v| v.to_f64_c()).collect();

    fs::create_dir_all(&cfg.out_dir)?;
    let out = Path::new(&cfg.out_dir);
    fs::write(out.join("relation.pgm"), relation_to_pgm(&scores)?)?;
    fs::write(out.join("relation.csv"), relation_to_csv(&scores)?)?;

    let side = cec_core::synth::IMAGE_SIZE as u32;
    let rgb = image::RgbImage::from_raw(side, side, query.to_rgb8())
        .ok_or_else(|| CecError::Format("query pixel buffer has wrong size".into()))?;
    rgb.save(out.join("query.png"))
        .map_err(|e| CecError::Format(format!("png write: {e}")))?;
    let mask_px: Vec<u8> = query.object_mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    let mask = image::GrayImage::from_raw(side, side, mask_px)
        .ok_or_else(|| CecError::Format("mask buffer has wrong size".into()))?;
    mask.save(out.join("query_mask.png"))
        .map_err(|e| CecError::Format(format!("png write: {e}")))?;

    let (inside, outside) = mask_contrast(&scores, &query.object_mask)?;
    println!(
        "exported relation.pgm relation.csv query.png query_mask.png to {} (mask mean inside={inside:.4} outside={outside:.4})",
        out.display()
    );
    Ok(())
}
