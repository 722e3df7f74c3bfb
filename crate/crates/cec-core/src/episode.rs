//! Episode construction: N-way K-shot sampling with disjoint support and
//! query items, rotation expansion for the auxiliary task, and class
//! prototypes.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::connect::FeatureMap;
use crate::error::{CecError, Result};
use crate::loss::LabelBundle;
use crate::scalar::Scalar;
use crate::synth::{rotate_image, SynthDataset, SynthImage};
use crate::tensor::mean_of_scalars;

/// One N-way K-shot task. `support[k]` holds the K shots of episode class
/// k; each query carries its full label bundle. `class_ids[k]` maps the
/// episode class back to the dataset class, and `global_ids[k]` to the index
/// used by the global auxiliary classifier.
#[derive(Debug, Clone)]
pub struct Episode {
    pub n_way: usize,
    pub k_shot: usize,
    pub support: Vec<Vec<SynthImage>>,
    pub queries: Vec<(SynthImage, LabelBundle)>,
    pub class_ids: Vec<usize>,
    pub global_ids: Vec<usize>,
}

impl Episode {
    pub fn support_size(&self) -> usize {
        self.n_way * self.k_shot
    }
}

/// Sample an episode from the given class pool. Classes are drawn without
/// replacement, and for each class K + queries-per-class distinct items are
/// drawn so support and query sets never overlap. The global label of a
/// query is the class position inside `class_pool`.
pub fn sample_episode<R: Rng>(
    dataset: &SynthDataset,
    class_pool: &[usize],
    n_way: usize,
    k_shot: usize,
    n_queries: usize,
    rng: &mut R,
) -> Result<Episode> {
    if n_way < 2 || class_pool.len() < n_way {
        return Err(CecError::Data(format!(
            "cannot sample {n_way} ways from {} classes",
            class_pool.len()
        )));
    }
    if n_queries % n_way != 0 {
        return Err(CecError::Data(format!(
            "query count {n_queries} must split evenly over {n_way} ways"
        )));
    }
    let per_class_q = n_queries / n_way;
    if dataset.items_per_class < k_shot + per_class_q {
        return Err(CecError::Data(format!(
            "dataset has {} items per class, need {}",
            dataset.items_per_class,
            k_shot + per_class_q
        )));
    }

    let mut pool_indices: Vec<usize> = (0..class_pool.len()).collect();
    pool_indices.shuffle(rng);
    let chosen = &pool_indices[..n_way];

    let mut support = Vec::with_capacity(n_way);
    let mut queries = Vec::new();
    let mut class_ids = Vec::with_capacity(n_way);
    let mut global_ids = Vec::with_capacity(n_way);
    for (episode_class, &pool_pos) in chosen.iter().enumerate() {
        let class_id = class_pool[pool_pos];
        class_ids.push(class_id);
        global_ids.push(pool_pos);
        let mut items: Vec<usize> = (0..dataset.items_per_class).collect();
        items.shuffle(rng);
        let shots = items[..k_shot]
            .iter()
            .map(|&i| dataset.item(class_id, i))
            .collect::<Result<Vec<_>>>()?;
        support.push(shots);
        for &i in &items[k_shot..k_shot + per_class_q] {
            let img = dataset.item(class_id, i)?;
            queries.push((
                img,
                LabelBundle { fewshot: episode_class, global: pool_pos, rotation: 0 },
            ));
        }
    }
    Ok(Episode { n_way, k_shot, support, queries, class_ids, global_ids })
}

/// Expand every query into its four quarter-turn rotations, labeling each
/// copy. The zero-turn copy is bit-identical to the original.
pub fn rotate_queries(
    queries: &[(SynthImage, LabelBundle)],
) -> Vec<(SynthImage, LabelBundle)> {
    let mut out = Vec::with_capacity(queries.len() * 4);
    for (img, labels) in queries {
        for turns in 0..4u8 {
            let rotated = if turns == 0 { img.clone() } else { rotate_image(img, turns) };
            out.push((rotated, LabelBundle { rotation: turns, ..*labels }));
        }
    }
    out
}

/// Arithmetic mean of each class's support features.
pub fn compute_prototypes<S: Scalar>(
    support_features: &[Vec<FeatureMap<S>>],
) -> Result<Vec<FeatureMap<S>>> {
    support_features
        .iter()
        .map(|shots| {
            if shots.is_empty() {
                return Err(CecError::Data("class with no support features".into()));
            }
            let tensors: Vec<_> = shots.iter().map(|f| f.tensor().clone()).collect();
            FeatureMap::new(mean_of_scalars(&tensors)?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::Catalog;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dataset() -> SynthDataset {
        SynthDataset::new(99, Catalog::v1(), 20)
    }

    #[test]
    fn support_sizes() {
        let ds = dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base = ds.catalog.base_classes().to_vec();
        let ep = sample_episode(&ds, &base, 5, 1, 5, &mut rng).unwrap();
        assert_eq!(ep.support_size(), 5);
        let ep = sample_episode(&ds, &base, 5, 5, 5, &mut rng).unwrap();
        assert_eq!(ep.support_size(), 25);
        assert_eq!(ep.queries.len(), 5);
    }

    #[test]
    fn supports_and_queries_disjoint_same_classes() {
        let ds = dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base = ds.catalog.base_classes().to_vec();
        let ep = sample_episode(&ds, &base, 5, 2, 10, &mut rng).unwrap();
        for (k, shots) in ep.support.iter().enumerate() {
            for s in shots {
                assert_eq!(s.class_id, ep.class_ids[k]);
                for (q, l) in &ep.queries {
                    if l.fewshot == k {
                        assert_eq!(q.class_id, s.class_id);
                        assert_ne!(q.pixels, s.pixels, "support and query share an item");
                    }
                }
            }
        }
    }

    #[test]
    fn class_histogram_is_roughly_uniform() {
        let ds = dataset();
        let base = ds.catalog.base_classes().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts = vec![0usize; base.len()];
        let episodes = 10_000;
        for _ in 0..episodes {
            let ep = sample_episode(&ds, &base, 5, 1, 5, &mut rng).unwrap();
            for &c in &ep.global_ids {
                counts[c] += 1;
            }
        }
        // each class appears in an episode with probability 5/20
        let expect = episodes as f64 * 5.0 / base.len() as f64;
        let sigma = (episodes as f64 * (5.0 / 20.0) * (15.0 / 20.0)).sqrt();
        for (c, &got) in counts.iter().enumerate() {
            assert!(
                (got as f64 - expect).abs() <= 3.0 * sigma,
                "class {c} drawn {got} times, expected {expect:.0} +- {:.0}",
                3.0 * sigma
            );
        }
    }

    #[test]
    fn rotation_expansion_counts_and_labels() {
        let ds = dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = ds.catalog.base_classes().to_vec();
        let ep = sample_episode(&ds, &base, 5, 1, 15, &mut rng).unwrap();
        let rotated = rotate_queries(&ep.queries);
        assert_eq!(rotated.len(), 60);
        let mut hist = [0usize; 4];
        for (_, l) in &rotated {
            hist[l.rotation as usize] += 1;
        }
        assert_eq!(hist, [15, 15, 15, 15]);
        // zero-rotation copies are bit-identical to the originals
        for (i, (img, _)) in ep.queries.iter().enumerate() {
            assert_eq!(rotated[i * 4].0.pixels, img.pixels);
        }
    }

    #[test]
    fn prototypes_are_means() {
        let one = FeatureMap::from_rows(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let protos = compute_prototypes(&[vec![one.clone()]]).unwrap();
        assert_eq!(protos[0].tensor().data(), one.tensor().data());

        let twice = compute_prototypes(&[vec![one.clone(), one.clone()]]).unwrap();
        assert_eq!(twice[0].tensor().data(), one.tensor().data());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shots: Vec<FeatureMap<f64>> = (0..5)
            .map(|_| {
                let data = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
                FeatureMap::from_rows(3, 2, data).unwrap()
            })
            .collect();
        let protos = compute_prototypes(&[shots.clone()]).unwrap();
        for j in 0..6 {
            let want: f64 =
                shots.iter().map(|s| s.tensor().data()[j]).sum::<f64>() / 5.0;
            assert!((protos[0].tensor().data()[j] - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn insufficient_data_is_an_error() {
        let ds = SynthDataset::new(1, Catalog::v1(), 2);
        let base = ds.catalog.base_classes().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        assert!(matches!(
            sample_episode(&ds, &base, 5, 2, 5, &mut rng),
            Err(CecError::Data(_))
        ));
    }
}
