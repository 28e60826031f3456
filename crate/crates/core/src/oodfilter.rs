//! Out-of-distribution filtering of generated samples.
//!
//! Generated images for a class are ranked by the same per-class anomaly
//! scorer used for sample weighting, and the gamma fraction with the lowest
//! scores survives. Real samples are never touched; this only prunes the
//! synthetic pool down to the clean budget.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{scaled_floor, LabeledSample};
use crate::error::{Error, Result};
use crate::selection::AnomalyScorer;

/// Per-class outcome of one filtering pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReportRow {
    pub class: usize,
    pub generated: usize,
    pub kept: usize,
    pub discarded: usize,
    /// Anomaly score of the worst sample that was still kept.
    pub threshold: Option<f64>,
}

/// Filtering outcome across classes for one gamma.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub gamma: f64,
    pub rows: Vec<FilterReportRow>,
}

impl FilterReport {
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
}

/// Keeps the floor(gamma * n) lowest-scoring ids, ties broken by id.
///
/// This is the pure ranking core of the filter, usable when scores are
/// already known.
pub fn keep_lowest(
    scored: &[(String, f64)],
    gamma: f64,
) -> Result<(Vec<String>, usize, Option<f64>)> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::validation(format!(
            "gamma must be in [0, 1], got {}",
            gamma
        )));
    }
    if scored.iter().any(|(_, s)| !s.is_finite()) {
        return Err(Error::validation("anomaly scores must be finite"));
    }
    let mut ranked: Vec<&(String, f64)> = scored.iter().collect();
    ranked.sort_by(|a, b| {
        a.1.partial_cmp(&b.1)
            .expect("scores are finite")
            .then_with(|| a.0.cmp(&b.0))
    });
    let kept = scaled_floor(gamma, scored.len());
    let ids: Vec<String> = ranked[..kept].iter().map(|(id, _)| id.clone()).collect();
    let threshold = if kept > 0 { Some(ranked[kept - 1].1) } else { None };
    Ok((ids, kept, threshold))
}

/// Scores one class's generated samples and keeps the cleanest fraction.
pub fn filter_class(
    generated: &[&LabeledSample],
    scorer: &AnomalyScorer,
    gamma: f64,
) -> Result<(Vec<String>, FilterReportRow)> {
    for sample in generated {
        if sample.label != scorer.class {
            return Err(Error::validation(format!(
                "sample {} has class {} but the scorer is for class {}",
                sample.sample_id, sample.label, scorer.class
            )));
        }
    }
    let scored: Vec<(String, f64)> = generated
        .iter()
        .map(|s| Ok((s.sample_id.clone(), scorer.score(&s.image)?)))
        .collect::<Result<_>>()?;
    let (ids, kept, threshold) = keep_lowest(&scored, gamma)?;
    let row = FilterReportRow {
        class: scorer.class,
        generated: generated.len(),
        kept,
        discarded: generated.len() - kept,
        threshold,
    };
    Ok((ids, row))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::nn::Tensor;

    fn scored(n: usize) -> Vec<(String, f64)> {
        (0..n)
            .map(|i| (format!("g{:02}", i), (i + 1) as f64))
            .collect()
    }

    #[test]
    fn keeps_lowest_third() {
        let (ids, kept, threshold) = keep_lowest(&scored(10), 0.3).unwrap();
        assert_eq!(kept, 3);
        assert_eq!(ids, vec!["g00", "g01", "g02"]);
        assert_eq!(threshold, Some(3.0));
    }

    #[test]
    fn gamma_one_keeps_everything() {
        let (ids, kept, _) = keep_lowest(&scored(7), 1.0).unwrap();
        assert_eq!(kept, 7);
        assert_eq!(ids.len(), 7);
    }

    #[test]
    fn gamma_zero_keeps_nothing() {
        let (ids, kept, threshold) = keep_lowest(&scored(7), 0.0).unwrap();
        assert!(ids.is_empty());
        assert_eq!(kept, 0);
        assert_eq!(threshold, None);
    }

    #[test]
    fn ties_break_by_sample_id() {
        let tied = vec![
            ("b".to_string(), 1.0),
            ("a".to_string(), 1.0),
            ("c".to_string(), 1.0),
        ];
        let (ids, _, _) = keep_lowest(&tied, 0.67).unwrap();
        assert_eq!(ids, vec!["a", "b"]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(keep_lowest(&scored(3), 1.5).is_err());
        assert!(keep_lowest(&scored(3), -0.1).is_err());
        let bad = vec![("a".to_string(), f64::NAN)];
        assert!(keep_lowest(&bad, 0.5).is_err());
    }

    fn noisy_image(rng: &mut ChaCha8Rng) -> Tensor {
        let mut t = Tensor::zeros(1, 3, 8, 8);
        for v in &mut t.data {
            *v = rng.random_range(0.3..0.7);
        }
        t
    }

    fn generated_pool(class: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<LabeledSample> {
        (0..n)
            .map(|i| LabeledSample {
                sample_id: format!("gen_c{}_{:03}", class, i),
                image: noisy_image(rng),
                label: class,
                mask: None,
                background: None,
            })
            .collect()
    }

    #[test]
    fn filter_class_counts_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let train: Vec<Tensor> = (0..8).map(|_| noisy_image(&mut rng)).collect();
        let refs: Vec<&Tensor> = train.iter().collect();
        let mut scorer = AnomalyScorer::new(1, 4, &mut rng);
        scorer.train(&refs, 60, 4, 2e-3, &mut rng).unwrap();

        let pool = generated_pool(1, 9, &mut rng);
        let refs: Vec<&LabeledSample> = pool.iter().collect();
        let (ids, row) = filter_class(&refs, &scorer, 0.5).unwrap();
        assert_eq!(row.generated, 9);
        assert_eq!(row.kept, 4);
        assert_eq!(row.discarded, 5);
        assert_eq!(ids.len(), 4);
        let (again, row2) = filter_class(&refs, &scorer, 0.5).unwrap();
        assert_eq!(ids, again);
        assert_eq!(row, row2);
    }

    #[test]
    fn filter_class_rejects_wrong_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let train: Vec<Tensor> = (0..6).map(|_| noisy_image(&mut rng)).collect();
        let refs: Vec<&Tensor> = train.iter().collect();
        let mut scorer = AnomalyScorer::new(2, 4, &mut rng);
        scorer.train(&refs, 30, 4, 2e-3, &mut rng).unwrap();
        let pool = generated_pool(1, 3, &mut rng);
        let refs: Vec<&LabeledSample> = pool.iter().collect();
        assert!(filter_class(&refs, &scorer, 0.5).is_err());
    }

    #[test]
    fn report_roundtrips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let report = FilterReport {
            gamma: 0.4,
            rows: vec![FilterReportRow {
                class: 1,
                generated: 10,
                kept: 4,
                discarded: 6,
                threshold: Some(0.125),
            }],
        };
        let path = dir.path().join("filter.json");
        report.save(&path).unwrap();
        assert_eq!(FilterReport::load(&path).unwrap(), report);
    }

    proptest! {
        #[test]
        fn kept_sets_nest_as_gamma_grows(seed in 0u64..300, n in 1usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scored: Vec<(String, f64)> = (0..n)
                .map(|i| (format!("s{:03}", i), rng.random_range(0.0..3.0)))
                .collect();
            let grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
            let mut prev: Vec<String> = Vec::new();
            for &g in &grid {
                let (ids, kept, _) = keep_lowest(&scored, g).unwrap();
                prop_assert_eq!(kept, scaled_floor(g, n));
                prop_assert_eq!(ids.len(), kept);
                for id in &prev {
                    prop_assert!(ids.contains(id));
                }
                prev = ids;
            }
        }
    }
}
