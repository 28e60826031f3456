//! Per-fold pipeline execution: stage sequencing, leakage guarding,
//! artifact hashing, and caching of the expensive middle stages.
//!
//! A `PreparedFold` owns everything the classifier arms need: the segmented
//! train split, the held-out test split, the anomaly-weight table, and a
//! synthetic pool generated once at the full per-class deficit. Filtering is
//! a pure re-ranking of stored scores, and classifier training is cheap, so
//! both are recomputed on demand instead of cached.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::classifier::Classifier;
use crate::config::PipelineConfig;
use crate::container;
use crate::dataset::{
    compute_budget, stratified_kfold, LabeledSample, LongTailDataset, SyntheticBudget,
};
use crate::diffusion::{finetune, generate_for_class, LatentCodec};
use crate::error::{Error, Result};
use crate::metrics::EvaluationReport;
use crate::nn::Tensor;
use crate::oodfilter::{keep_lowest, FilterReport, FilterReportRow};
use crate::segmentation::{prepare_dataset, SegmenterParams};
use crate::selection::{build_weight_table, AnomalyScorer, ClassWeightTable, WeightRow};

use super::hashing::ArtifactHasher;
use super::seeds::{stage_rng, stage_seed};

const CACHE_KIND: &str = "prepared-fold";
/// How many images go through the reverse sampler at once.
const GENERATE_BATCH: usize = 8;

/// Fails with a fatal error if any training-stage input id belongs to the
/// held-out test split.
pub fn guard_no_leakage<'a, I>(
    stage: &str,
    fold: usize,
    train_ids: I,
    test_ids: &BTreeSet<String>,
) -> Result<()>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut count = 0;
    let mut first: Option<String> = None;
    for id in train_ids {
        if test_ids.contains(id) {
            count += 1;
            if first.is_none() {
                first = Some(id.to_string());
            }
        }
    }
    match first {
        Some(first) => Err(Error::LeakageGuard {
            stage: stage.to_string(),
            fold,
            count,
            first,
        }),
        None => Ok(()),
    }
}

/// One generated image together with its provenance and anomaly score.
#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub sample_id: String,
    pub image: Tensor,
    pub label: usize,
    /// Id of the real training sample whose background was inpainted.
    pub source_id: String,
    /// Anomaly score under the scorer of this sample's class.
    pub score: f64,
}

/// Everything produced by the fold's training stages, ready for the
/// classifier arms.
pub struct PreparedFold {
    pub fold: usize,
    pub run_seed: u64,
    pub config: PipelineConfig,
    /// Training split with masks and backgrounds filled in.
    pub train: LongTailDataset,
    pub test: LongTailDataset,
    pub test_ids: BTreeSet<String>,
    pub budget: SyntheticBudget,
    pub weights: ClassWeightTable,
    /// Unfiltered synthetic pool, one entry per raw-deficit slot, ordered by
    /// class then generation index.
    pub pool: Vec<SyntheticSample>,
    pub finetune_first_loss: Option<f64>,
    pub finetune_final_loss: Option<f64>,
    /// Content hash of each stage's output, keyed by stage name.
    pub hashes: BTreeMap<String, String>,
    leakage_checks: AtomicUsize,
    pub from_cache: bool,
}

impl PreparedFold {
    /// Runs the training stages for one fold: segmentation, codec
    /// pre-training, per-class scorers, the weight table, the diffusion
    /// fine-tune, and generation of the full raw-deficit pool.
    ///
    /// When `cache_dir` is given the result is stored there keyed by a hash
    /// of (config, seed, fold, dataset content); a later call with the same
    /// inputs loads it back unless `no_cache` is set.
    pub fn prepare(
        dataset: &LongTailDataset,
        fold_index: usize,
        config: &PipelineConfig,
        run_seed: u64,
        cache_dir: Option<&Path>,
        no_cache: bool,
    ) -> Result<Self> {
        config.validate()?;
        if fold_index >= config.folds {
            return Err(Error::validation(format!(
                "fold index {} out of range for {} folds",
                fold_index, config.folds
            )));
        }

        // The split seed ignores the fold index so every fold of a run sees
        // the same partition.
        let split_seed = stage_seed(run_seed, 0, "fold-split");
        let splits = stratified_kfold(dataset, config.folds, split_seed)?;
        let (train_idx, test_idx) = &splits[fold_index];
        let train = dataset.subset(train_idx)?;
        let test = dataset.subset(test_idx)?;
        let test_ids: BTreeSet<String> =
            test.samples.iter().map(|s| s.sample_id.clone()).collect();

        let cache_path = cache_dir.map(|dir| {
            let key = cache_key(config, run_seed, fold_index, dataset);
            dir.join(format!("fold-{}.ck", &key[..32]))
        });
        if !no_cache {
            if let Some(path) = &cache_path {
                if path.exists() {
                    return Self::load_cached(path, train, test, test_ids, fold_index);
                }
            }
        }

        let prepared = Self::run_stages(train, test, test_ids, fold_index, config, run_seed)?;
        if let Some(path) = &cache_path {
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            prepared.save_cached(path)?;
        }
        Ok(prepared)
    }

    fn run_stages(
        mut train: LongTailDataset,
        test: LongTailDataset,
        test_ids: BTreeSet<String>,
        fold: usize,
        config: &PipelineConfig,
        run_seed: u64,
    ) -> Result<Self> {
        fn guard<'a, I: IntoIterator<Item = &'a str>>(
            checks: &AtomicUsize,
            stage: &str,
            fold: usize,
            ids: I,
            test_ids: &BTreeSet<String>,
        ) -> Result<()> {
            checks.fetch_add(1, Ordering::Relaxed);
            guard_no_leakage(stage, fold, ids, test_ids)
        }

        let checks = AtomicUsize::new(0);
        let mut hashes = BTreeMap::new();
        let ids: Vec<String> = train.samples.iter().map(|s| s.sample_id.clone()).collect();

        let mut split_hash = ArtifactHasher::new();
        for s in &train.samples {
            split_hash = split_hash.text(&s.sample_id).text("\n");
        }
        split_hash = split_hash.text("|");
        for id in &test_ids {
            split_hash = split_hash.text(id).text("\n");
        }
        hashes.insert("fold-split".to_string(), split_hash.finish());

        guard(&checks, "segment", fold, ids.iter().map(|s| s.as_str()), &test_ids)?;
        prepare_dataset(&mut train, &SegmenterParams::default())
            .map_err(|e| e.in_stage("segment", fold))?;
        let mut seg_hash = ArtifactHasher::new();
        for s in &train.samples {
            seg_hash = seg_hash
                .text(&s.sample_id)
                .tensor(s.mask.as_ref().expect("segmented").as_tensor())
                .tensor(s.background.as_ref().expect("segmented"));
        }
        hashes.insert("segment".to_string(), seg_hash.finish());
        log::info!("fold {fold}: segmented {} training images", train.total());

        guard(&checks, "codec", fold, ids.iter().map(|s| s.as_str()), &test_ids)?;
        let mut rng = stage_rng(run_seed, fold, "codec");
        let mut codec = LatentCodec::new(
            config.codec_channels,
            config.latent_channels,
            config.latent_downscale_factor,
            &mut rng,
        )
        .map_err(|e| e.in_stage("codec", fold))?;
        let images: Vec<&Tensor> = train.samples.iter().map(|s| &s.image).collect();
        let codec_loss = codec
            .pretrain(
                &images,
                config.codec_train_steps,
                config.batch_size,
                config.learning_rate,
                &mut rng,
            )
            .map_err(|e| e.in_stage("codec", fold))?;
        let mut codec_hash = ArtifactHasher::new();
        for block in codec.param_values() {
            codec_hash = codec_hash.floats(block);
        }
        hashes.insert("codec".to_string(), codec_hash.finish());
        log::info!("fold {fold}: codec pre-trained, tail loss {codec_loss:.5}");

        let mut scorers: BTreeMap<usize, AnomalyScorer> = BTreeMap::new();
        for class in 1..train.num_classes {
            let stage = format!("scorer-{class}");
            let class_idx = train.indices_of_class(class);
            guard(
                &checks,
                &stage,
                fold,
                class_idx.iter().map(|&i| train.samples[i].sample_id.as_str()),
                &test_ids,
            )?;
            let mut rng = stage_rng(run_seed, fold, &stage);
            let mut scorer = AnomalyScorer::new(class, config.scorer_channels, &mut rng);
            let class_images: Vec<&Tensor> =
                class_idx.iter().map(|&i| &train.samples[i].image).collect();
            scorer
                .train(
                    &class_images,
                    config.scorer_train_steps,
                    config.batch_size,
                    config.learning_rate,
                    &mut rng,
                )
                .map_err(|e| e.in_stage(&stage, fold))?;
            let mut hash = ArtifactHasher::new();
            for block in scorer.param_values() {
                hash = hash.floats(block);
            }
            hashes.insert(stage, hash.finish());
            scorers.insert(class, scorer);
        }

        let weights = build_weight_table(&train, &scorers, config.score_standardize)
            .map_err(|e| e.in_stage("weights", fold))?;
        let mut weights_hash = ArtifactHasher::new().bytes(&(weights.target as u64).to_le_bytes());
        for row in &weights.rows {
            weights_hash = weights_hash
                .text(&row.sample_id)
                .bytes(&(row.class as u64).to_le_bytes())
                .floats(&[row.score, row.weight]);
        }
        hashes.insert("weights".to_string(), weights_hash.finish());

        guard(&checks, "finetune", fold, ids.iter().map(|s| s.as_str()), &test_ids)?;
        let mut rng = stage_rng(run_seed, fold, "finetune");
        let outcome = finetune(&train, &weights, &codec, config, &mut rng)
            .map_err(|e| e.in_stage("finetune", fold))?;
        let mut ft_hash = ArtifactHasher::new();
        for (_, p) in outcome.denoiser.param_blocks() {
            ft_hash = ft_hash.floats(&p.value);
        }
        for (_, p) in outcome.embedder.param_blocks() {
            ft_hash = ft_hash.floats(&p.value);
        }
        ft_hash = ft_hash.floats(outcome.schedule.betas());
        hashes.insert("finetune".to_string(), ft_hash.finish());
        let show = |loss: Option<f64>| loss.map_or("n/a".to_string(), |l| format!("{l:.4}"));
        log::info!(
            "fold {fold}: fine-tune loss {} -> {}",
            show(outcome.first_window_loss),
            show(outcome.final_window_loss)
        );

        let budget =
            compute_budget(&train, config.gamma).map_err(|e| e.in_stage("generate", fold))?;
        guard(&checks, "generate", fold, ids.iter().map(|s| s.as_str()), &test_ids)?;
        let mut rng = stage_rng(run_seed, fold, "generate");
        let mut pool: Vec<SyntheticSample> = Vec::new();
        for class in 1..train.num_classes {
            let wanted = budget.per_class_raw[class];
            if wanted == 0 {
                continue;
            }
            let class_idx = train.indices_of_class(class);
            if class_idx.is_empty() {
                return Err(Error::State(format!(
                    "class {class} has no training samples to draw backgrounds from"
                ))
                .in_stage("generate", fold));
            }
            let sources: Vec<&LabeledSample> =
                class_idx.iter().map(|&i| &train.samples[i]).collect();
            let scorer = &scorers[&class];
            let generated = generate_for_class(
                &sources,
                class,
                wanted,
                GENERATE_BATCH,
                &outcome.denoiser,
                &outcome.embedder,
                &codec,
                &outcome.schedule,
                &mut rng,
            )
            .map_err(|e| e.in_stage("generate", fold))?;
            for (i, g) in generated.into_iter().enumerate() {
                let score = scorer
                    .score(&g.image)
                    .map_err(|e| e.in_stage("generate", fold))?;
                pool.push(SyntheticSample {
                    sample_id: format!("syn-f{fold}-c{class}-{i:05}"),
                    image: g.image,
                    label: class,
                    source_id: sources[g.source_index].sample_id.clone(),
                    score,
                });
            }
            log::info!("fold {fold}: generated {wanted} samples for class {class}");
        }
        let mut pool_hash = ArtifactHasher::new();
        for s in &pool {
            pool_hash = pool_hash
                .text(&s.sample_id)
                .bytes(&(s.label as u64).to_le_bytes())
                .text(&s.source_id)
                .tensor(&s.image)
                .floats(&[s.score]);
        }
        hashes.insert("generate".to_string(), pool_hash.finish());

        Ok(Self {
            fold,
            run_seed,
            config: config.clone(),
            train,
            test,
            test_ids,
            budget,
            weights,
            pool,
            finetune_first_loss: outcome.first_window_loss,
            finetune_final_loss: outcome.final_window_loss,
            hashes,
            leakage_checks: checks,
            from_cache: false,
        })
    }

    /// Number of leakage-guard checks that have passed so far.
    pub fn leakage_checks(&self) -> usize {
        self.leakage_checks.load(Ordering::Relaxed)
    }

    /// Applies the retention filter to the stored pool: per class, the
    /// floor(gamma * generated) lowest-scoring samples survive.
    pub fn filtered_pool(&self, gamma: f64) -> Result<(Vec<&SyntheticSample>, FilterReport)> {
        let mut rows = Vec::new();
        let mut kept_ids: BTreeSet<&str> = BTreeSet::new();
        for class in 1..self.train.num_classes {
            let scored: Vec<(String, f64)> = self
                .pool
                .iter()
                .filter(|s| s.label == class)
                .map(|s| (s.sample_id.clone(), s.score))
                .collect();
            let (kept, kept_count, threshold) = keep_lowest(&scored, gamma)?;
            rows.push(FilterReportRow {
                class,
                generated: scored.len(),
                kept: kept_count,
                discarded: scored.len() - kept_count,
                threshold,
            });
            for id in &kept {
                kept_ids.insert(
                    self.pool
                        .iter()
                        .find(|s| &s.sample_id == id)
                        .expect("kept id comes from the pool")
                        .sample_id
                        .as_str(),
                );
            }
        }
        let kept: Vec<&SyntheticSample> = self
            .pool
            .iter()
            .filter(|s| kept_ids.contains(s.sample_id.as_str()))
            .collect();
        Ok((kept, FilterReport { gamma, rows }))
    }

    /// Trains and evaluates one classifier arm on the real training split
    /// plus the given synthetic samples. Both arms of a fold share the
    /// "classifier" stage rng, so an empty pool reproduces the baseline
    /// exactly.
    pub fn classifier_arm(&self, synthetic: &[&SyntheticSample]) -> Result<EvaluationReport> {
        let stage = "classifier";
        self.leakage_checks.fetch_add(1, Ordering::Relaxed);
        guard_no_leakage(
            stage,
            self.fold,
            self.train
                .samples
                .iter()
                .map(|s| s.sample_id.as_str())
                .chain(synthetic.iter().map(|s| s.sample_id.as_str())),
            &self.test_ids,
        )?;

        let owned: Vec<LabeledSample> = synthetic
            .iter()
            .map(|s| LabeledSample {
                sample_id: s.sample_id.clone(),
                image: s.image.clone(),
                label: s.label,
                mask: None,
                background: None,
            })
            .collect();
        let mut training: Vec<&LabeledSample> = self.train.samples.iter().collect();
        training.extend(owned.iter());

        let mut rng = stage_rng(self.run_seed, self.fold, stage);
        let mut classifier =
            Classifier::new(self.train.num_classes, self.config.classifier_channels, &mut rng);
        classifier
            .train(
                &training,
                self.config.classifier_train_steps,
                self.config.batch_size,
                self.config.learning_rate,
                &mut rng,
            )
            .map_err(|e| e.in_stage(stage, self.fold))?;

        let test_refs: Vec<&LabeledSample> = self.test.samples.iter().collect();
        let predicted = classifier
            .predict_samples(&test_refs)
            .map_err(|e| e.in_stage(stage, self.fold))?;
        let truth: Vec<usize> = self.test.samples.iter().map(|s| s.label).collect();
        EvaluationReport::from_labels(&truth, &predicted, self.train.num_classes, Some(self.fold))
    }

    /// Classifier trained on real data only.
    pub fn baseline_report(&self) -> Result<EvaluationReport> {
        self.classifier_arm(&[])
    }

    /// Classifier trained on real data plus the pool filtered at `gamma`.
    pub fn augmented_report(&self, gamma: f64) -> Result<(EvaluationReport, FilterReport)> {
        let (kept, filter) = self.filtered_pool(gamma)?;
        let report = self.classifier_arm(&kept)?;
        Ok((report, filter))
    }

    fn save_cached(&self, path: &Path) -> Result<()> {
        let meta = CacheMeta {
            fold: self.fold,
            run_seed: self.run_seed,
            config: self.config.clone(),
            image_shape: self
                .pool
                .first()
                .map(|s| [s.image.c, s.image.h, s.image.w])
                .unwrap_or([0, 0, 0]),
            pool: self
                .pool
                .iter()
                .map(|s| CachePoolEntry {
                    sample_id: s.sample_id.clone(),
                    label: s.label,
                    source_id: s.source_id.clone(),
                })
                .collect(),
            weights_target: self.weights.target,
            weights_rows: self
                .weights
                .rows
                .iter()
                .map(|r| CacheWeightRow {
                    sample_id: r.sample_id.clone(),
                    class: r.class,
                })
                .collect(),
            finetune_first_loss: self.finetune_first_loss,
            finetune_final_loss: self.finetune_final_loss,
            hashes: self.hashes.clone(),
            leakage_checks: self.leakage_checks(),
        };
        let mut pool_images = Vec::new();
        let mut pool_scores = Vec::with_capacity(self.pool.len());
        for s in &self.pool {
            pool_images.extend_from_slice(&s.image.data);
            pool_scores.push(s.score);
        }
        let weight_scores: Vec<f64> = self.weights.rows.iter().map(|r| r.score).collect();
        let weight_values: Vec<f64> = self.weights.rows.iter().map(|r| r.weight).collect();
        container::save_checkpoint(
            path,
            CACHE_KIND,
            serde_json::to_value(&meta).expect("cache meta serializes"),
            &[
                ("pool.images", &pool_images),
                ("pool.scores", &pool_scores),
                ("weights.scores", &weight_scores),
                ("weights.weights", &weight_values),
            ],
        )
    }

    fn load_cached(
        path: &Path,
        train: LongTailDataset,
        test: LongTailDataset,
        test_ids: BTreeSet<String>,
        fold: usize,
    ) -> Result<Self> {
        let ck = container::load_checkpoint(path)?;
        ck.expect_kind(CACHE_KIND)?;
        let meta: CacheMeta = serde_json::from_value(ck.meta.clone()).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            msg: format!("bad cache metadata: {e}"),
        })?;
        if meta.fold != fold {
            return Err(Error::Load {
                path: path.to_path_buf(),
                msg: format!("cache holds fold {}, expected {}", meta.fold, fold),
            });
        }
        let [c, h, w] = meta.image_shape;
        let images = ck.block("pool.images")?;
        let scores = ck.block("pool.scores")?;
        let plane = c * h * w;
        if images.len() != meta.pool.len() * plane || scores.len() != meta.pool.len() {
            return Err(Error::Load {
                path: path.to_path_buf(),
                msg: "pool blocks do not match the recorded pool".into(),
            });
        }
        let pool: Vec<SyntheticSample> = meta
            .pool
            .iter()
            .enumerate()
            .map(|(i, entry)| SyntheticSample {
                sample_id: entry.sample_id.clone(),
                image: Tensor::from_vec(1, c, h, w, images[i * plane..(i + 1) * plane].to_vec()),
                label: entry.label,
                source_id: entry.source_id.clone(),
                score: scores[i],
            })
            .collect();
        let weight_scores = ck.block("weights.scores")?;
        let weight_values = ck.block("weights.weights")?;
        if weight_scores.len() != meta.weights_rows.len()
            || weight_values.len() != meta.weights_rows.len()
        {
            return Err(Error::Load {
                path: path.to_path_buf(),
                msg: "weight blocks do not match the recorded rows".into(),
            });
        }
        let weights = ClassWeightTable {
            target: meta.weights_target,
            rows: meta
                .weights_rows
                .iter()
                .enumerate()
                .map(|(i, r)| WeightRow {
                    sample_id: r.sample_id.clone(),
                    class: r.class,
                    score: weight_scores[i],
                    weight: weight_values[i],
                })
                .collect(),
        };
        let budget = compute_budget(&train, meta.config.gamma)?;
        Ok(Self {
            fold,
            run_seed: meta.run_seed,
            config: meta.config,
            train,
            test,
            test_ids,
            budget,
            weights,
            pool,
            finetune_first_loss: meta.finetune_first_loss,
            finetune_final_loss: meta.finetune_final_loss,
            hashes: meta.hashes,
            leakage_checks: AtomicUsize::new(meta.leakage_checks),
            from_cache: true,
        })
    }
}

/// Key for the per-fold cache: configuration, seed, fold index, and the full
/// dataset content, so any input change misses.
fn cache_key(
    config: &PipelineConfig,
    run_seed: u64,
    fold: usize,
    dataset: &LongTailDataset,
) -> String {
    let config_json =
        serde_json::to_string(&json!(config)).expect("config serializes");
    let mut hasher = ArtifactHasher::new()
        .text("prepared-fold-v2")
        .text(&config_json)
        .bytes(&run_seed.to_le_bytes())
        .bytes(&(fold as u64).to_le_bytes());
    for s in &dataset.samples {
        hasher = hasher
            .text(&s.sample_id)
            .bytes(&(s.label as u64).to_le_bytes())
            .tensor(&s.image);
        if let Some(mask) = &s.mask {
            hasher = hasher.text("mask").tensor(mask.as_tensor());
        }
        if let Some(bg) = &s.background {
            hasher = hasher.text("background").tensor(bg);
        }
    }
    hasher.finish()
}

#[derive(Serialize, Deserialize)]
struct CacheMeta {
    fold: usize,
    run_seed: u64,
    config: PipelineConfig,
    image_shape: [usize; 3],
    pool: Vec<CachePoolEntry>,
    weights_target: usize,
    weights_rows: Vec<CacheWeightRow>,
    finetune_first_loss: Option<f64>,
    finetune_final_loss: Option<f64>,
    hashes: BTreeMap<String, String>,
    leakage_checks: usize,
}

#[derive(Serialize, Deserialize)]
struct CachePoolEntry {
    sample_id: String,
    label: usize,
    source_id: String,
}

#[derive(Serialize, Deserialize)]
struct CacheWeightRow {
    sample_id: String,
    class: usize,
}

/// Cache file path that `prepare` would use, exposed for cleanup tooling.
pub fn cache_file(
    cache_dir: &Path,
    config: &PipelineConfig,
    run_seed: u64,
    fold: usize,
    dataset: &LongTailDataset,
) -> PathBuf {
    let key = cache_key(config, run_seed, fold, dataset);
    cache_dir.join(format!("fold-{}.ck", &key[..32]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toydata::make_toy_dataset;

    fn micro_config() -> PipelineConfig {
        PipelineConfig {
            image_size: 8,
            latent_downscale_factor: 2,
            diffusion_steps: 4,
            beta_start: 4e-3,
            beta_end: 0.3,
            class_embedding_dim: 4,
            train_steps: 8,
            learning_rate: 2e-3,
            batch_size: 4,
            gamma: 0.5,
            folds: 2,
            rng_seed: 11,
            latent_channels: 2,
            denoiser_channels: 4,
            codec_channels: 4,
            scorer_channels: 4,
            classifier_channels: 4,
            codec_train_steps: 8,
            scorer_train_steps: 8,
            classifier_train_steps: 4,
            score_standardize: false,
        }
    }

    fn micro_fold(cache_dir: Option<&Path>, no_cache: bool) -> PreparedFold {
        let dataset = make_toy_dataset(&[6, 4, 3, 3], 8, 5).unwrap();
        let config = micro_config();
        PreparedFold::prepare(&dataset, 0, &config, config.rng_seed, cache_dir, no_cache).unwrap()
    }

    #[test]
    fn guard_passes_disjoint_and_rejects_overlap() {
        let test_ids: BTreeSet<String> = ["t1", "t2"].iter().map(|s| s.to_string()).collect();
        guard_no_leakage("codec", 0, ["a", "b"], &test_ids).unwrap();
        let err = guard_no_leakage("codec", 3, ["a", "t2", "t1"], &test_ids).unwrap_err();
        match err {
            Error::LeakageGuard {
                stage,
                fold,
                count,
                first,
            } => {
                assert_eq!(stage, "codec");
                assert_eq!(fold, 3);
                assert_eq!(count, 2);
                assert_eq!(first, "t2");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn prepare_builds_full_raw_pool() {
        let prepared = micro_fold(None, false);
        let head = prepared.train.head_count();
        let expected: usize = prepared
            .train
            .class_counts
            .iter()
            .map(|&c| head - c)
            .sum();
        assert_eq!(prepared.pool.len(), expected);
        assert_eq!(prepared.budget.per_class_raw[0], 0);
        for s in &prepared.pool {
            assert!(s.label > 0 && s.label < prepared.train.num_classes);
            assert!(s.score.is_finite());
            assert!(prepared
                .train
                .samples
                .iter()
                .any(|t| t.sample_id == s.source_id && t.label == s.label));
        }
        let ids: BTreeSet<&str> = prepared.pool.iter().map(|s| s.sample_id.as_str()).collect();
        assert_eq!(ids.len(), prepared.pool.len());
        for stage in ["fold-split", "segment", "codec", "weights", "finetune", "generate"] {
            assert!(prepared.hashes.contains_key(stage), "missing hash for {stage}");
        }
        assert!(prepared.leakage_checks() > 0);
        assert!(!prepared.from_cache);
    }

    #[test]
    fn gamma_zero_arm_matches_baseline_exactly() {
        let prepared = micro_fold(None, false);
        let baseline = prepared.baseline_report().unwrap();
        let (augmented, filter) = prepared.augmented_report(0.0).unwrap();
        assert_eq!(baseline, augmented);
        assert!(filter.rows.iter().all(|r| r.kept == 0));
    }

    #[test]
    fn filtered_pool_counts_follow_the_floor_rule() {
        let prepared = micro_fold(None, false);
        for gamma in [0.0, 0.3, 0.5, 1.0] {
            let (kept, report) = prepared.filtered_pool(gamma).unwrap();
            for row in &report.rows {
                assert_eq!(row.kept, crate::dataset::scaled_floor(gamma, row.generated));
                assert_eq!(row.generated, row.kept + row.discarded);
            }
            let total: usize = report.rows.iter().map(|r| r.kept).sum();
            assert_eq!(kept.len(), total);
        }
    }

    #[test]
    fn cache_roundtrip_reproduces_the_fold() {
        let dir = tempfile::tempdir().unwrap();
        let first = micro_fold(Some(dir.path()), false);
        assert!(!first.from_cache);
        let second = micro_fold(Some(dir.path()), false);
        assert!(second.from_cache);

        assert_eq!(first.hashes, second.hashes);
        assert_eq!(first.pool.len(), second.pool.len());
        for (a, b) in first.pool.iter().zip(&second.pool) {
            assert_eq!(a.sample_id, b.sample_id);
            assert_eq!(a.image.data, b.image.data);
            assert_eq!(a.score, b.score);
            assert_eq!(a.source_id, b.source_id);
        }
        assert_eq!(first.weights, second.weights);
        assert_eq!(first.finetune_final_loss, second.finetune_final_loss);

        let from_scratch = micro_fold(Some(dir.path()), true);
        assert!(!from_scratch.from_cache);
        assert_eq!(first.hashes, from_scratch.hashes);
    }

    #[test]
    fn arms_are_deterministic_across_calls() {
        let prepared = micro_fold(None, false);
        let a = prepared.baseline_report().unwrap();
        let b = prepared.baseline_report().unwrap();
        assert_eq!(a, b);
        let (x, _) = prepared.augmented_report(1.0).unwrap();
        let (y, _) = prepared.augmented_report(1.0).unwrap();
        assert_eq!(x, y);
    }
}
