//! Cross-validated comparison of three classifier arms: real data only,
//! real plus the full synthetic pool, and real plus the filtered pool.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::dataset::{LongTailDataset, SyntheticBudget};
use crate::error::{Error, Result};
use crate::metrics::EvaluationReport;
use crate::oodfilter::FilterReport;

use super::fold::PreparedFold;
use super::grid::write_class_grids;
use super::hashing::ArtifactHasher;

/// Where a run reads and writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Directory for the manifest, tables, and grids; nothing is written
    /// when unset.
    pub out_dir: Option<std::path::PathBuf>,
    /// Directory for cached fold preparations; stages rerun when unset.
    pub cache_dir: Option<std::path::PathBuf>,
    /// Recompute even when a cached preparation exists.
    pub no_cache: bool,
    /// Render per-class grids of real versus synthetic images.
    pub write_grids: bool,
}

/// Reports and bookkeeping for one fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub fold: usize,
    pub baseline: EvaluationReport,
    /// Arm trained with the pool filtered at the configured gamma.
    pub filtered: EvaluationReport,
    /// Arm trained with the whole pool (gamma = 1).
    pub unfiltered: EvaluationReport,
    pub filter: FilterReport,
    pub budget: SyntheticBudget,
    pub finetune_first_loss: Option<f64>,
    pub finetune_final_loss: Option<f64>,
    pub leakage_checks: usize,
    pub test_ids: Vec<String>,
    /// Content hash per stage of this fold.
    pub hashes: BTreeMap<String, String>,
}

/// Trains and evaluates the three arms on an already prepared fold.
pub fn run_fold(prepared: &PreparedFold) -> Result<FoldOutcome> {
    let baseline = prepared.baseline_report()?;
    let (filtered, filter) = prepared.augmented_report(prepared.config.gamma)?;
    let (unfiltered, _) = prepared.augmented_report(1.0)?;

    let mut hashes = prepared.hashes.clone();
    for (name, report) in [
        ("report-baseline", &baseline),
        ("report-filtered", &filtered),
        ("report-unfiltered", &unfiltered),
    ] {
        let json = serde_json::to_string(report).expect("report serializes");
        hashes.insert(name.to_string(), ArtifactHasher::new().text(&json).finish());
    }

    Ok(FoldOutcome {
        fold: prepared.fold,
        baseline,
        filtered,
        unfiltered,
        filter,
        budget: prepared.budget.clone(),
        finetune_first_loss: prepared.finetune_first_loss,
        finetune_final_loss: prepared.finetune_final_loss,
        leakage_checks: prepared.leakage_checks(),
        test_ids: prepared.test_ids.iter().cloned().collect(),
        hashes,
    })
}

/// Everything a full cross-validated run produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub seed: u64,
    pub config: PipelineConfig,
    pub folds: Vec<FoldOutcome>,
    /// Mean of the per-fold reports, arm by arm.
    pub aggregate_baseline: EvaluationReport,
    pub aggregate_filtered: EvaluationReport,
    pub aggregate_unfiltered: EvaluationReport,
    /// Per-stage content hashes keyed "fold{N}/{stage}".
    pub artifact_hashes: BTreeMap<String, String>,
    /// Total leakage-guard checks passed across folds and arms.
    pub leakage_checks: usize,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    /// Arms-by-metrics summary table.
    pub fn comparison_table(&self) -> String {
        let mut out =
            String::from("arm\tbma\tmacro_sensitivity\tmacro_specificity\tmacro_f1\n");
        for (name, report) in [
            ("baseline", &self.aggregate_baseline),
            ("augmented-unfiltered", &self.aggregate_unfiltered),
            ("augmented-filtered", &self.aggregate_filtered),
        ] {
            out.push_str(&format!(
                "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
                name,
                report.bma,
                report.macro_sensitivity,
                report.macro_specificity,
                report.macro_f1
            ));
        }
        out
    }

    /// Per-class recall for each arm, classes as rows.
    pub fn per_class_table(&self) -> String {
        let mut out = String::from("class\tbaseline\taugmented_unfiltered\taugmented_filtered\n");
        for class in 0..self.aggregate_baseline.per_class_recall.len() {
            out.push_str(&format!(
                "{}\t{:.6}\t{:.6}\t{:.6}\n",
                class,
                self.aggregate_baseline.per_class_recall[class],
                self.aggregate_unfiltered.per_class_recall[class],
                self.aggregate_filtered.per_class_recall[class]
            ));
        }
        out
    }
}

/// Runs every fold end to end and aggregates the three arms by averaging
/// fold reports. Writes the manifest and summary tables to the output
/// directory when one is configured.
pub fn run_cv(
    dataset: &LongTailDataset,
    config: &PipelineConfig,
    run_seed: u64,
    options: &RunOptions,
) -> Result<RunManifest> {
    config.validate()?;
    let mut folds = Vec::with_capacity(config.folds);
    let mut artifact_hashes = BTreeMap::new();
    for fold_index in 0..config.folds {
        let prepared = PreparedFold::prepare(
            dataset,
            fold_index,
            config,
            run_seed,
            options.cache_dir.as_deref(),
            options.no_cache,
        )?;
        let outcome = run_fold(&prepared)?;
        for (stage, hash) in &outcome.hashes {
            artifact_hashes.insert(format!("fold{fold_index}/{stage}"), hash.clone());
        }
        if options.write_grids {
            if let Some(out_dir) = &options.out_dir {
                let grid_dir = out_dir.join(format!("fold{fold_index}"));
                write_class_grids(&prepared, &grid_dir, 8)?;
            }
        }
        log::info!(
            "fold {fold_index}: bma baseline {:.4}, unfiltered {:.4}, filtered {:.4}",
            outcome.baseline.bma,
            outcome.unfiltered.bma,
            outcome.filtered.bma
        );
        folds.push(outcome);
    }

    let aggregate = |pick: fn(&FoldOutcome) -> &EvaluationReport| -> Result<EvaluationReport> {
        let reports: Vec<EvaluationReport> = folds.iter().map(|f| pick(f).clone()).collect();
        EvaluationReport::mean_of(&reports)
    };
    let manifest = RunManifest {
        run_id: run_id(config, run_seed, dataset),
        seed: run_seed,
        config: config.clone(),
        aggregate_baseline: aggregate(|f| &f.baseline)?,
        aggregate_filtered: aggregate(|f| &f.filtered)?,
        aggregate_unfiltered: aggregate(|f| &f.unfiltered)?,
        leakage_checks: folds.iter().map(|f| f.leakage_checks).sum(),
        folds,
        artifact_hashes,
    };

    if let Some(out_dir) = &options.out_dir {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        manifest.save(&out_dir.join("manifest.json"))?;
        let comparison = out_dir.join("comparison.tsv");
        fs::write(&comparison, manifest.comparison_table())
            .map_err(|e| Error::io(&comparison, e))?;
        let per_class = out_dir.join("per_class_recall.tsv");
        fs::write(&per_class, manifest.per_class_table()).map_err(|e| Error::io(&per_class, e))?;
    }
    Ok(manifest)
}

/// Stable identifier derived from the run inputs.
fn run_id(config: &PipelineConfig, run_seed: u64, dataset: &LongTailDataset) -> String {
    let config_json = serde_json::to_string(config).expect("config serializes");
    let mut hasher = ArtifactHasher::new()
        .text(&config_json)
        .bytes(&run_seed.to_le_bytes());
    for s in &dataset.samples {
        hasher = hasher.text(&s.sample_id);
    }
    format!("run-{}", &hasher.finish()[..12])
}
