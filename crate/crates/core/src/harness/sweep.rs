//! Retention-fraction sweep: generate each fold's pool once, then re-filter
//! and retrain only the classifier for every gamma.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::dataset::LongTailDataset;
use crate::error::{Error, Result};
use crate::metrics::EvaluationReport;

use super::fold::PreparedFold;

/// One sweep point: the retention fraction, how many synthetic samples
/// survived it across the swept folds, and the aggregated evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaRow {
    pub gamma: f64,
    pub kept_total: usize,
    pub report: EvaluationReport,
}

/// Sweep outcome across the requested folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaSweep {
    pub seed: u64,
    pub folds: Vec<usize>,
    /// Real-data-only arm on the same folds, for reference.
    pub baseline: EvaluationReport,
    pub rows: Vec<GammaRow>,
    /// Leakage assertions that ran (and passed) across all folds and arms.
    #[serde(default)]
    pub leakage_checks: usize,
}

impl GammaSweep {
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

    /// Plot-ready table: one row per gamma, metrics and per-class recall as
    /// columns.
    pub fn to_tsv(&self) -> String {
        let classes = self.baseline.per_class_recall.len();
        let mut out = String::from("gamma\tkept\tbma\tmacro_sensitivity\tmacro_specificity\tmacro_f1");
        for class in 0..classes {
            out.push_str(&format!("\trecall_c{class}"));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                row.gamma,
                row.kept_total,
                row.report.bma,
                row.report.macro_sensitivity,
                row.report.macro_specificity,
                row.report.macro_f1
            ));
            for r in &row.report.per_class_recall {
                out.push_str(&format!("\t{r:.6}"));
            }
            out.push('\n');
        }
        out
    }

    /// The gamma whose aggregated balanced accuracy is highest; earlier
    /// rows win ties.
    pub fn best_row(&self) -> Option<&GammaRow> {
        self.rows
            .iter()
            .fold(None, |best: Option<&GammaRow>, row| match best {
                Some(b) if b.report.bma >= row.report.bma => Some(b),
                _ => Some(row),
            })
    }
}

/// Prepares the listed folds once, then evaluates the augmented arm at
/// every gamma by re-filtering the stored pools.
pub fn sweep_gamma(
    dataset: &LongTailDataset,
    gammas: &[f64],
    config: &PipelineConfig,
    run_seed: u64,
    folds: &[usize],
    cache_dir: Option<&Path>,
    no_cache: bool,
) -> Result<GammaSweep> {
    if gammas.is_empty() {
        return Err(Error::validation("sweep needs at least one gamma"));
    }
    if folds.is_empty() {
        return Err(Error::validation("sweep needs at least one fold"));
    }
    for &g in gammas {
        if !(0.0..=1.0).contains(&g) {
            return Err(Error::validation(format!(
                "gamma must be in [0, 1], got {g}"
            )));
        }
    }

    let mut prepared = Vec::with_capacity(folds.len());
    for &fold in folds {
        prepared.push(PreparedFold::prepare(
            dataset, fold, config, run_seed, cache_dir, no_cache,
        )?);
    }

    let baselines: Vec<EvaluationReport> = prepared
        .iter()
        .map(|p| p.baseline_report())
        .collect::<Result<_>>()?;
    let baseline = EvaluationReport::mean_of(&baselines)?;

    let mut rows = Vec::with_capacity(gammas.len());
    for &gamma in gammas {
        let mut reports = Vec::with_capacity(prepared.len());
        let mut kept_total = 0;
        for fold in &prepared {
            let (report, filter) = fold.augmented_report(gamma)?;
            kept_total += filter.rows.iter().map(|r| r.kept).sum::<usize>();
            reports.push(report);
        }
        let report = EvaluationReport::mean_of(&reports)?;
        log::info!(
            "gamma {gamma}: kept {kept_total}, bma {:.4}, specificity {:.4}",
            report.bma,
            report.macro_specificity
        );
        rows.push(GammaRow {
            gamma,
            kept_total,
            report,
        });
    }

    let leakage_checks = prepared.iter().map(|p| p.leakage_checks()).sum();
    Ok(GammaSweep {
        seed: run_seed,
        folds: folds.to_vec(),
        baseline,
        rows,
        leakage_checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toydata::make_toy_dataset;

    fn micro_config() -> PipelineConfig {
        PipelineConfig {
            image_size: 8,
            diffusion_steps: 4,
            beta_start: 4e-3,
            beta_end: 0.3,
            class_embedding_dim: 4,
            train_steps: 8,
            batch_size: 4,
            gamma: 0.5,
            folds: 2,
            latent_channels: 2,
            denoiser_channels: 4,
            codec_channels: 4,
            scorer_channels: 4,
            classifier_channels: 4,
            codec_train_steps: 8,
            scorer_train_steps: 8,
            classifier_train_steps: 4,
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn kept_counts_grow_with_gamma_and_zero_matches_baseline() {
        let dataset = make_toy_dataset(&[6, 4, 3, 3], 8, 5).unwrap();
        let config = micro_config();
        let gammas = [0.0, 0.25, 0.5, 0.75, 1.0];
        let sweep = sweep_gamma(&dataset, &gammas, &config, 11, &[0], None, false).unwrap();

        assert_eq!(sweep.rows.len(), gammas.len());
        for pair in sweep.rows.windows(2) {
            assert!(pair[0].kept_total <= pair[1].kept_total);
        }
        assert_eq!(sweep.rows[0].kept_total, 0);
        assert_eq!(sweep.rows[0].report, sweep.baseline);
        assert!(sweep.best_row().is_some());
    }

    #[test]
    fn sweep_tsv_and_json_roundtrip() {
        let dataset = make_toy_dataset(&[6, 4, 3, 3], 8, 5).unwrap();
        let config = micro_config();
        let sweep = sweep_gamma(&dataset, &[0.0, 1.0], &config, 11, &[0], None, false).unwrap();

        let tsv = sweep.to_tsv();
        assert_eq!(tsv.lines().count(), 3);
        assert!(tsv.starts_with("gamma\tkept\t"));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweep.json");
        sweep.save(&path).unwrap();
        assert_eq!(GammaSweep::load(&path).unwrap(), sweep);
    }

    #[test]
    fn rejects_empty_and_out_of_range_inputs() {
        let dataset = make_toy_dataset(&[6, 4, 3, 3], 8, 5).unwrap();
        let config = micro_config();
        assert!(sweep_gamma(&dataset, &[], &config, 11, &[0], None, false).is_err());
        assert!(sweep_gamma(&dataset, &[0.5], &config, 11, &[], None, false).is_err());
        assert!(sweep_gamma(&dataset, &[1.5], &config, 11, &[0], None, false).is_err());
    }
}
