//! Synthetic datasets with planted structure for end-to-end checks.
//!
//! Videos are built from per-cluster concept pools: each shot's frames sit
//! near one concept centroid, adjacent shots use different concepts, and
//! exactly one shot per video carries its cluster's shared "important"
//! concept. Ground-truth frame scores are 1 on that shot and 0 elsewhere.
//! The important shot's length is the 15% selection budget, with one decoy
//! shot just under it, so a summarizer must rank shots to recover it.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{write_column, write_matrix, DataError, DatasetManifest, ManifestEntry};
use crate::autodiff::Tensor;

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_videos: usize,
    /// Frames per video.
    pub frames: usize,
    pub d_f: usize,
    pub n_clusters: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { seed: 7, n_videos: 8, frames: 64, d_f: 32, n_clusters: 4 }
    }
}

/// What was planted in one generated video.
#[derive(Clone, Debug)]
pub struct PlantedVideo {
    pub id: String,
    pub cluster: usize,
    pub cuts: Vec<usize>,
    pub important_shot: usize,
}

const FILLER_CONCEPTS: usize = 5;
const NOISE: f64 = 0.05;

fn concept_frame(centroid: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    centroid.iter().map(|&c| c + rng.gen_range(-NOISE..NOISE)).collect()
}

/// Shot lengths: one important shot of floor(0.15 * M) frames, one decoy
/// one frame shorter, and filler shots too long to fit the budget.
fn plan_shots(frames: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, usize) {
    let important = ((0.15 * frames as f64).floor() as usize).max(2);
    let decoy = important - 1;
    let mut fillers = Vec::new();
    let mut remaining = frames - important - decoy;
    let min_filler = important + 1;
    while remaining > 0 {
        let len = if remaining < 2 * min_filler {
            remaining
        } else {
            rng.gen_range(min_filler..=(remaining - min_filler).min(2 * min_filler))
        };
        fillers.push(len.max(min_filler).min(remaining));
        remaining -= fillers.last().unwrap();
    }
    let mut lengths = vec![important, decoy];
    lengths.extend(fillers);
    lengths.shuffle(rng);
    let important_shot = lengths.iter().position(|&l| l == important).unwrap();
    (lengths, important_shot)
}

/// Generate a dataset under `out_dir` and return its manifest (also written
/// to `out_dir/manifest.json`) plus the planted structure per video.
/// Byte-identical for a given config.
pub fn synth_dataset(out_dir: &Path, cfg: &SynthConfig) -> Result<(DatasetManifest, Vec<PlantedVideo>), DataError> {
    assert!(cfg.n_videos > 0 && cfg.frames >= 16 && cfg.d_f > 0 && cfg.n_clusters > 0);
    let mk = |sub: &str| -> Result<(), DataError> {
        fs::create_dir_all(out_dir.join(sub))
            .map_err(|e| DataError::Io { path: out_dir.join(sub).display().to_string(), source: e })
    };
    mk("features")?;
    mk("gt")?;
    mk("summaries")?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // concept centroids: a shared offset per cluster keeps clusters apart,
    // concepts within a cluster differ in direction
    let mut concepts = Vec::with_capacity(cfg.n_clusters);
    for c in 0..cfg.n_clusters {
        let mut pool = Vec::with_capacity(FILLER_CONCEPTS + 1);
        let mut offset = vec![0.0; cfg.d_f];
        offset[c % cfg.d_f] = 20.0;
        for _ in 0..=FILLER_CONCEPTS {
            let centroid: Vec<f64> = offset.iter().map(|&o| o + rng.gen_range(-1.0..1.0)).collect();
            pool.push(centroid);
        }
        concepts.push(pool);
    }

    let mut manifest = DatasetManifest::default();
    let mut planted = Vec::with_capacity(cfg.n_videos);
    for v in 0..cfg.n_videos {
        let id = format!("video_{v:02}");
        let cluster = v % cfg.n_clusters;
        let (lengths, important_shot) = plan_shots(cfg.frames, &mut rng);

        // concept 0 of the pool is the cluster's important concept; fillers
        // are drawn without immediate repeats
        let mut shot_concepts = vec![0usize; lengths.len()];
        let mut prev = 0usize;
        for (i, sc) in shot_concepts.iter_mut().enumerate() {
            if i == important_shot {
                *sc = 0;
                prev = 0;
                continue;
            }
            let mut pick = rng.gen_range(1..=FILLER_CONCEPTS);
            while pick == prev {
                pick = rng.gen_range(1..=FILLER_CONCEPTS);
            }
            *sc = pick;
            prev = pick;
        }

        let mut frames = Vec::with_capacity(cfg.frames * cfg.d_f);
        let mut gt = Vec::with_capacity(cfg.frames);
        let mut cuts = vec![0usize];
        for (shot, (&len, &concept)) in lengths.iter().zip(&shot_concepts).enumerate() {
            for _ in 0..len {
                frames.extend(concept_frame(&concepts[cluster][concept], &mut rng));
                gt.push(if shot == important_shot { 1.0 } else { 0.0 });
            }
            cuts.push(cuts.last().unwrap() + len);
        }
        let features = Tensor::new(cfg.frames, cfg.d_f, frames)?;
        write_matrix(&out_dir.join(format!("features/{id}.vjmf")), &features)?;
        write_column(&out_dir.join(format!("gt/{id}.vjmf")), &gt)?;
        let sums = out_dir.join(format!("summaries/{id}"));
        fs::create_dir_all(&sums).map_err(|e| DataError::Io { path: sums.display().to_string(), source: e })?;
        write_column(&sums.join("annotator_00.vjmf"), &gt)?;

        manifest.videos.push(ManifestEntry {
            video_id: id.clone(),
            features_path: format!("features/{id}.vjmf"),
            gt_scores_path: Some(format!("gt/{id}.vjmf")),
            user_summaries_path: Some(format!("summaries/{id}")),
            fps_after_subsample: 2.0,
            cluster_id: None,
        });
        planted.push(PlantedVideo { id, cluster, cuts, important_shot });
    }
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok((manifest, planted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_dataset;
    use crate::kts::{kts_fixed, Kernel};
    use tempfile::tempdir;

    #[test]
    fn gt_is_piecewise_constant_on_planted_shots() {
        let dir = tempdir().unwrap();
        let (manifest, planted) = synth_dataset(dir.path(), &SynthConfig::default()).unwrap();
        let (_, records) = load_dataset(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(manifest.videos.len(), records.len());
        for (record, plant) in records.iter().zip(&planted) {
            let gt = record.gt_scores.as_ref().unwrap();
            for w in plant.cuts.windows(2) {
                let first = gt[w[0]];
                assert!(gt[w[0]..w[1]].iter().all(|&g| g == first));
            }
            // exactly one shot carries score 1
            let ones: f64 = gt.iter().sum();
            let (a, b) = (plant.cuts[plant.important_shot], plant.cuts[plant.important_shot + 1]);
            assert_eq!(ones as usize, b - a);
        }
    }

    #[test]
    fn kts_recovers_planted_cuts() {
        let dir = tempdir().unwrap();
        let (_, planted) = synth_dataset(dir.path(), &SynthConfig::default()).unwrap();
        let (_, records) = load_dataset(&dir.path().join("manifest.json")).unwrap();
        for (record, plant) in records.iter().zip(&planted) {
            let m = plant.cuts.len() - 1;
            let (bounds, _) = kts_fixed(&record.features, m, &Kernel::Linear).unwrap();
            for (got, want) in bounds.cuts().iter().zip(&plant.cuts) {
                assert!(
                    got.abs_diff(*want) <= 1,
                    "{}: cuts {:?} vs planted {:?}",
                    record.id,
                    bounds.cuts(),
                    plant.cuts
                );
            }
        }
    }

    #[test]
    fn same_seed_gives_byte_identical_datasets() {
        let a = tempdir().unwrap();
        let b = tempdir().unwrap();
        synth_dataset(a.path(), &SynthConfig::default()).unwrap();
        synth_dataset(b.path(), &SynthConfig::default()).unwrap();
        for sub in ["manifest.json", "features/video_00.vjmf", "gt/video_03.vjmf", "summaries/video_05/annotator_00.vjmf"] {
            assert_eq!(
                fs::read(a.path().join(sub)).unwrap(),
                fs::read(b.path().join(sub)).unwrap(),
                "{sub} differs between runs"
            );
        }
    }

    #[test]
    fn videos_in_one_cluster_share_the_important_concept() {
        let dir = tempdir().unwrap();
        let (_, planted) = synth_dataset(dir.path(), &SynthConfig::default()).unwrap();
        let (_, records) = load_dataset(&dir.path().join("manifest.json")).unwrap();
        // mean important-frame feature should agree within clusters far more
        // than across them
        let rep = |i: usize| -> Vec<f64> {
            let gt = records[i].gt_scores.as_ref().unwrap();
            let d = records[i].features.cols();
            let mut mean = vec![0.0; d];
            let mut count = 0.0;
            for (j, &g) in gt.iter().enumerate() {
                if g == 1.0 {
                    count += 1.0;
                    for (t, v) in mean.iter_mut().enumerate() {
                        *v += records[i].features.get(j, t);
                    }
                }
            }
            mean.iter().map(|v| v / count).collect()
        };
        let dist = |a: &[f64], b: &[f64]| -> f64 {
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
        };
        // videos 0 and 4 share cluster 0; video 1 is cluster 1
        assert_eq!(planted[0].cluster, planted[4].cluster);
        assert!(dist(&rep(0), &rep(4)) < 1.0);
        assert!(dist(&rep(0), &rep(1)) > 5.0);
    }
}
