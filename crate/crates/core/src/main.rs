//! Command-line front end for the augmentation pipeline.
//!
//! Every stage is a subcommand so runs can be scripted piecemeal, and
//! `pipeline` drives the cross-validated experiment end to end. Stage
//! randomness is derived from the run seed, so repeating a command with the
//! same inputs reproduces its outputs bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use tailgen::classifier::Classifier;
use tailgen::dataset::{
    compute_budget, load_image_tensor, load_manifest, save_image_tensor, save_mask,
    write_manifest, LabeledSample, LongTailDataset, ManifestRecord, SyntheticBudget,
};
use tailgen::diffusion::{finetune, generate_for_class, DiffusionModel, LatentCodec};
use tailgen::harness::{run_cv, run_fold, stage_rng, PreparedFold, RunOptions};
use tailgen::metrics::EvaluationReport;
use tailgen::oodfilter::{keep_lowest, FilterReport, FilterReportRow};
use tailgen::segmentation::{prepare_dataset, segment, SegmenterParams};
use tailgen::selection::{build_weight_table, AnomalyScorer, ClassWeightTable};
use tailgen::toydata::{make_toy_dataset, write_toy_corpus, DEFAULT_COUNTS};
use tailgen::{Error, PipelineConfig, Result};

#[derive(Parser)]
#[command(
    name = "tailgen",
    about = "Synthetic data augmentation for long-tailed image classification",
    version
)]
struct Cli {
    /// TOML configuration file; omitted fields use built-in defaults.
    #[arg(long, global = true, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named configuration preset.
    #[arg(long, global = true, value_parser = ["default", "toy"])]
    preset: Option<String>,
    /// Run seed; defaults to the configured rng_seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for everything this command writes.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Recompute cached fold preparations.
    #[arg(long, global = true)]
    no_cache: bool,
    #[command(flatten)]
    overrides: ConfigOverrides,
    #[command(subcommand)]
    command: Command,
}

/// One optional flag per configuration field; set flags win over the file.
#[derive(Args, Debug, Clone)]
struct ConfigOverrides {
    /// Side length of the (square) working images.
    #[arg(long, global = true)]
    image_size: Option<usize>,
    /// Spatial downscale factor of the latent codec.
    #[arg(long, global = true)]
    latent_downscale_factor: Option<usize>,
    /// Number of diffusion timesteps T.
    #[arg(long, global = true)]
    diffusion_steps: Option<usize>,
    /// First value of the linear noise schedule.
    #[arg(long, global = true)]
    beta_start: Option<f64>,
    /// Last value of the linear noise schedule.
    #[arg(long, global = true)]
    beta_end: Option<f64>,
    /// Dimension of the learned class embedding.
    #[arg(long, global = true)]
    class_embedding_dim: Option<usize>,
    /// Optimizer steps for the diffusion fine-tune.
    #[arg(long, global = true)]
    train_steps: Option<usize>,
    /// Adam learning rate for every training stage.
    #[arg(long, global = true)]
    learning_rate: Option<f64>,
    /// Mini-batch size for every training stage.
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    /// Fraction of generated samples kept per class by the OOD filter.
    #[arg(long, global = true)]
    gamma: Option<f64>,
    /// Number of cross-validation folds.
    #[arg(long, global = true)]
    folds: Option<usize>,
    /// Base seed recorded in the configuration.
    #[arg(long, global = true)]
    rng_seed: Option<u64>,
    /// Channels of the image latent produced by the codec.
    #[arg(long, global = true)]
    latent_channels: Option<usize>,
    /// Base channel width of the denoiser.
    #[arg(long, global = true)]
    denoiser_channels: Option<usize>,
    /// Base channel width of the latent codec.
    #[arg(long, global = true)]
    codec_channels: Option<usize>,
    /// Base channel width of the per-class anomaly scorers.
    #[arg(long, global = true)]
    scorer_channels: Option<usize>,
    /// Base channel width of the classifier.
    #[arg(long, global = true)]
    classifier_channels: Option<usize>,
    /// Optimizer steps for codec pre-training.
    #[arg(long, global = true)]
    codec_train_steps: Option<usize>,
    /// Optimizer steps per anomaly scorer.
    #[arg(long, global = true)]
    scorer_train_steps: Option<usize>,
    /// Optimizer steps for the classifier.
    #[arg(long, global = true)]
    classifier_train_steps: Option<usize>,
    /// Standardize anomaly scores per class before the weight formula.
    #[arg(long, global = true)]
    score_standardize: Option<bool>,
}

impl ConfigOverrides {
    fn apply(&self, cfg: &mut PipelineConfig) {
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field.clone() { cfg.$field = v; })*
            };
        }
        set!(
            image_size,
            latent_downscale_factor,
            diffusion_steps,
            beta_start,
            beta_end,
            class_embedding_dim,
            train_steps,
            learning_rate,
            batch_size,
            gamma,
            folds,
            rng_seed,
            latent_channels,
            denoiser_channels,
            codec_channels,
            scorer_channels,
            classifier_channels,
            codec_train_steps,
            scorer_train_steps,
            classifier_train_steps,
            score_standardize
        );
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a procedural long-tailed toy corpus (images plus manifest).
    MakeToy {
        /// Per-class sample counts, head class first.
        #[arg(long, value_delimiter = ',')]
        counts: Option<Vec<usize>>,
    },
    /// Segment region-of-interest masks for a manifest.
    Segment {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Pre-train the latent codec on a manifest's images.
    PretrainCodec {
        #[arg(long)]
        manifest: PathBuf,
        /// Where to write the codec checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train per-class anomaly scorers and emit the sampling-weight table.
    Weights {
        #[arg(long)]
        manifest: PathBuf,
        /// Where to write the weight table (TSV).
        #[arg(long)]
        table: PathBuf,
        /// Directory for per-class scorer checkpoints (scorer-N.ck).
        #[arg(long)]
        scorer_dir: Option<PathBuf>,
    },
    /// Fine-tune the conditioned denoiser against a pre-trained codec.
    Finetune {
        #[arg(long)]
        manifest: PathBuf,
        /// Weight table produced by `weights`.
        #[arg(long)]
        weights: PathBuf,
        /// Codec checkpoint produced by `pretrain-codec`.
        #[arg(long)]
        codec: PathBuf,
        /// Where to write the diffusion checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Sample synthetic images from a diffusion checkpoint.
    Generate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Generate this many samples for every non-head class.
        #[arg(long, conflicts_with = "budget")]
        per_class: Option<usize>,
        /// JSON budget file; its raw per-class deficits are generated.
        #[arg(long)]
        budget: Option<PathBuf>,
    },
    /// Keep the most in-distribution fraction of a generated manifest.
    Filter {
        /// Manifest written by `generate`.
        #[arg(long)]
        generated: PathBuf,
        /// Directory holding scorer-N.ck checkpoints from `weights`.
        #[arg(long)]
        scorer_dir: PathBuf,
    },
    /// Train the classifier on real data, optionally plus synthetic data.
    TrainClassifier {
        #[arg(long)]
        manifest: PathBuf,
        /// Generated or filtered manifest to append to the training set.
        #[arg(long)]
        synthetic: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Predict labels for a manifest with a trained classifier.
    Predict {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output TSV; defaults to predictions.tsv in the output directory.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Score prediction files (one per fold) and report the mean.
    Evaluate {
        /// Prediction TSVs written by `predict`.
        #[arg(long, required = true, num_args = 1..)]
        predictions: Vec<PathBuf>,
    },
    /// End-to-end experiment orchestration.
    Pipeline {
        #[command(subcommand)]
        command: PipelineCommand,
    },
}

#[derive(Args, Debug, Clone)]
struct DatasetArgs {
    /// Manifest of a real dataset.
    #[arg(long, conflicts_with = "toy_counts")]
    manifest: Option<PathBuf>,
    /// Build the procedural toy dataset with these per-class counts instead.
    #[arg(long, value_delimiter = ',')]
    toy_counts: Option<Vec<usize>>,
}

#[derive(Subcommand)]
enum PipelineCommand {
    /// Full cross-validated run: every fold, three classifier arms.
    Cv {
        #[command(flatten)]
        dataset: DatasetArgs,
        /// Render per-class real-versus-synthetic image grids.
        #[arg(long)]
        grids: bool,
    },
    /// Run a single fold and write its outcome.
    Fold {
        #[command(flatten)]
        dataset: DatasetArgs,
        /// Fold index to run.
        #[arg(long)]
        fold: usize,
    },
    /// Sweep the retention fraction over prepared folds.
    SweepGamma {
        #[command(flatten)]
        dataset: DatasetArgs,
        #[arg(long, value_delimiter = ',', default_value = "0.0,0.2,0.4,0.6,0.8,1.0")]
        gammas: Vec<f64>,
        /// Folds to sweep; defaults to all of them.
        #[arg(long, value_delimiter = ',')]
        fold_subset: Option<Vec<usize>>,
    },
}

/// Record in a generated-sample manifest: paths are relative to the
/// manifest, `class` is the head-first class index of the source dataset.
#[derive(Debug, Serialize, Deserialize)]
struct GeneratedRecord {
    sample_id: String,
    image_path: String,
    class: usize,
    /// Real sample whose background was inpainted.
    source_id: String,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        let mut source = std::error::Error::source(&e);
        while let Some(s) = source {
            eprintln!("  caused by: {s}");
            source = s.source();
        }
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match (&cli.config, cli.preset.as_deref()) {
        (Some(path), _) => PipelineConfig::load(path)?,
        (None, Some("toy")) => PipelineConfig::toy(),
        _ => PipelineConfig::default(),
    };
    cli.overrides.apply(&mut config);
    config.validate()?;
    let seed = cli.seed.unwrap_or(config.rng_seed);
    let out_dir = cli.out_dir.as_deref();

    match &cli.command {
        Command::MakeToy { counts } => {
            let out = require_out(out_dir)?;
            let counts = counts.clone().unwrap_or_else(|| DEFAULT_COUNTS.to_vec());
            let dataset = make_toy_dataset(&counts, config.image_size, seed)?;
            write_toy_corpus(&dataset, out)?;
            println!(
                "wrote {} images across {} classes to {}",
                dataset.total(),
                dataset.num_classes,
                out.display()
            );
        }
        Command::Segment { manifest } => {
            let out = require_out(out_dir)?;
            cmd_segment(manifest, out)?;
        }
        Command::PretrainCodec {
            manifest,
            checkpoint,
        } => {
            let dataset = load_manifest(manifest)?;
            let mut rng = stage_rng(seed, 0, "codec");
            let mut codec = LatentCodec::new(
                config.codec_channels,
                config.latent_channels,
                config.latent_downscale_factor,
                &mut rng,
            )?;
            let images: Vec<_> = dataset.samples.iter().map(|s| &s.image).collect();
            let loss = codec.pretrain(
                &images,
                config.codec_train_steps,
                config.batch_size,
                config.learning_rate,
                &mut rng,
            )?;
            ensure_parent(checkpoint)?;
            codec.save(checkpoint)?;
            println!(
                "codec trained on {} images, tail loss {loss:.6}, saved to {}",
                dataset.total(),
                checkpoint.display()
            );
        }
        Command::Weights {
            manifest,
            table,
            scorer_dir,
        } => {
            let dataset = load_manifest(manifest)?;
            let scorers = train_scorers(&dataset, &config, seed, scorer_dir.as_deref())?;
            let weights = build_weight_table(&dataset, &scorers, config.score_standardize)?;
            ensure_parent(table)?;
            weights.save_tsv(table)?;
            println!(
                "weight table with {} rows (target {}) saved to {}",
                weights.rows.len(),
                weights.target,
                table.display()
            );
        }
        Command::Finetune {
            manifest,
            weights,
            codec,
            checkpoint,
        } => {
            let mut dataset = load_manifest(manifest)?;
            prepare_dataset(&mut dataset, &SegmenterParams::default())?;
            let codec = LatentCodec::load(codec)?;
            let weights = ClassWeightTable::load_tsv(weights, &dataset)?;
            let mut rng = stage_rng(seed, 0, "finetune");
            let outcome = finetune(&dataset, &weights, &codec, &config, &mut rng)?;
            let (model_first, model_final) = (outcome.first_window_loss, outcome.final_window_loss);
            let mut model = DiffusionModel {
                denoiser: outcome.denoiser,
                embedder: outcome.embedder,
                codec,
                schedule: outcome.schedule,
                config: config.clone(),
                num_classes: dataset.num_classes,
            };
            ensure_parent(checkpoint)?;
            model.save(
                checkpoint,
                json!({
                    "first_window_loss": model_first,
                    "final_window_loss": model_final,
                }),
            )?;
            let show = |loss: Option<f64>| match loss {
                Some(l) => format!("{l:.4}"),
                None => "n/a".to_string(),
            };
            println!(
                "fine-tuned for {} steps (loss {} -> {}), saved to {}",
                config.train_steps,
                show(model_first),
                show(model_final),
                checkpoint.display()
            );
        }
        Command::Generate {
            manifest,
            checkpoint,
            per_class,
            budget,
        } => {
            let out = require_out(out_dir)?;
            cmd_generate(
                manifest,
                checkpoint,
                *per_class,
                budget.as_deref(),
                &config,
                seed,
                out,
            )?;
        }
        Command::Filter {
            generated,
            scorer_dir,
        } => {
            let out = require_out(out_dir)?;
            cmd_filter(generated, scorer_dir, config.gamma, out)?;
        }
        Command::TrainClassifier {
            manifest,
            synthetic,
            checkpoint,
        } => {
            let dataset = load_manifest(manifest)?;
            let extra = match synthetic {
                Some(path) => load_generated(path)?,
                None => Vec::new(),
            };
            let mut samples: Vec<&LabeledSample> = dataset.samples.iter().collect();
            samples.extend(extra.iter());
            let mut rng = stage_rng(seed, 0, "classifier");
            let mut classifier =
                Classifier::new(dataset.num_classes, config.classifier_channels, &mut rng);
            let accuracy = classifier.train(
                &samples,
                config.classifier_train_steps,
                config.batch_size,
                config.learning_rate,
                &mut rng,
            )?;
            ensure_parent(checkpoint)?;
            classifier.save(checkpoint)?;
            println!(
                "classifier trained on {} samples ({} synthetic), final accuracy {accuracy:.4}, saved to {}",
                samples.len(),
                extra.len(),
                checkpoint.display()
            );
        }
        Command::Predict {
            manifest,
            checkpoint,
            predictions,
        } => {
            let dataset = load_manifest(manifest)?;
            let classifier = Classifier::load(checkpoint)?;
            let refs: Vec<&LabeledSample> = dataset.samples.iter().collect();
            let predicted = classifier.predict_samples(&refs)?;
            let mut tsv = String::from("sample_id\tlabel\tpredicted\n");
            for (s, &p) in dataset.samples.iter().zip(&predicted) {
                tsv.push_str(&format!("{}\t{}\t{}\n", s.sample_id, s.label, p));
            }
            let path = match predictions {
                Some(p) => p.clone(),
                None => require_out(out_dir)?.join("predictions.tsv"),
            };
            ensure_parent(&path)?;
            fs::write(&path, tsv).map_err(|e| Error::io(&path, e))?;
            let hits = dataset
                .samples
                .iter()
                .zip(&predicted)
                .filter(|(s, &p)| s.label == p)
                .count();
            println!(
                "predicted {} samples, accuracy {:.4}, wrote {}",
                dataset.total(),
                hits as f64 / dataset.total() as f64,
                path.display()
            );
        }
        Command::Evaluate { predictions } => {
            cmd_evaluate(predictions, out_dir)?;
        }
        Command::Pipeline { command } => {
            cmd_pipeline(command, &config, seed, out_dir, cli.no_cache)?;
        }
    }
    Ok(())
}

fn require_out(out_dir: Option<&Path>) -> Result<&Path> {
    let dir = out_dir.ok_or_else(|| Error::validation("this command needs --out-dir"))?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(())
}

fn absolute(path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        std::env::current_dir()
            .map(|cwd| cwd.join(path))
            .unwrap_or_else(|_| path.to_path_buf())
    }
}

fn cmd_segment(manifest: &Path, out: &Path) -> Result<()> {
    let records = tailgen::dataset::read_manifest(manifest)?;
    let dataset = load_manifest(manifest)?;
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    let mask_dir = out.join("masks");
    fs::create_dir_all(&mask_dir).map_err(|e| Error::io(&mask_dir, e))?;
    let params = SegmenterParams::default();

    let mut updated = Vec::with_capacity(records.len());
    let mut fresh = 0;
    for (record, sample) in records.iter().zip(&dataset.samples) {
        let mask = match &sample.mask {
            Some(m) => m.clone(),
            None => {
                fresh += 1;
                segment(&sample.image, &params)?
            }
        };
        let mask_rel = format!("masks/{}.png", sample.sample_id);
        save_mask(&out.join(&mask_rel), &mask)?;
        let image_abs = absolute(&base.join(&record.image_path));
        updated.push(ManifestRecord {
            sample_id: record.sample_id.clone(),
            image_path: image_abs.to_string_lossy().into_owned(),
            mask_path: Some(mask_rel),
            label: record.label,
        });
    }
    let manifest_out = out.join("manifest.jsonl");
    write_manifest(&manifest_out, &updated)?;
    println!(
        "segmented {} of {} images, wrote {}",
        fresh,
        records.len(),
        manifest_out.display()
    );
    Ok(())
}

fn train_scorers(
    dataset: &LongTailDataset,
    config: &PipelineConfig,
    seed: u64,
    scorer_dir: Option<&Path>,
) -> Result<BTreeMap<usize, AnomalyScorer>> {
    if let Some(dir) = scorer_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut scorers = BTreeMap::new();
    for class in 1..dataset.num_classes {
        let mut rng = stage_rng(seed, 0, &format!("scorer-{class}"));
        let mut scorer = AnomalyScorer::new(class, config.scorer_channels, &mut rng);
        let images: Vec<_> = dataset
            .indices_of_class(class)
            .into_iter()
            .map(|i| &dataset.samples[i].image)
            .collect();
        let loss = scorer.train(
            &images,
            config.scorer_train_steps,
            config.batch_size,
            config.learning_rate,
            &mut rng,
        )?;
        log::info!(
            "scorer {class}: {} images, tail loss {loss:.6}",
            images.len()
        );
        if let Some(dir) = scorer_dir {
            scorer.save(&dir.join(format!("scorer-{class}.ck")))?;
        }
        scorers.insert(class, scorer);
    }
    Ok(scorers)
}

fn cmd_generate(
    manifest: &Path,
    checkpoint: &Path,
    per_class: Option<usize>,
    budget: Option<&Path>,
    config: &PipelineConfig,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let mut dataset = load_manifest(manifest)?;
    prepare_dataset(&mut dataset, &SegmenterParams::default())?;
    let model = DiffusionModel::load(checkpoint)?;
    if model.num_classes != dataset.num_classes {
        return Err(Error::State(format!(
            "checkpoint was trained with {} classes, manifest has {}",
            model.num_classes, dataset.num_classes
        )));
    }

    let counts: Vec<usize> = match (budget, per_class) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let budget: SyntheticBudget = serde_json::from_str(&text).map_err(|e| Error::Load {
                path: path.to_path_buf(),
                msg: e.to_string(),
            })?;
            if budget.per_class_raw.len() != dataset.num_classes {
                return Err(Error::validation(format!(
                    "budget covers {} classes, manifest has {}",
                    budget.per_class_raw.len(),
                    dataset.num_classes
                )));
            }
            budget.per_class_raw
        }
        (None, Some(n)) => {
            let mut counts = vec![n; dataset.num_classes];
            counts[0] = 0;
            counts
        }
        (None, None) => compute_budget(&dataset, config.gamma)?.per_class_raw,
    };

    let image_dir = out.join("images");
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    let mut rng = stage_rng(seed, 0, "generate");
    let mut records = Vec::new();
    for class in 1..dataset.num_classes {
        let count = counts[class];
        if count == 0 {
            continue;
        }
        let sources: Vec<&LabeledSample> = dataset
            .indices_of_class(class)
            .into_iter()
            .map(|i| &dataset.samples[i])
            .collect();
        let generated = generate_for_class(
            &sources,
            class,
            count,
            config.batch_size.max(1),
            &model.denoiser,
            &model.embedder,
            &model.codec,
            &model.schedule,
            &mut rng,
        )?;
        for (i, g) in generated.into_iter().enumerate() {
            let sample_id = format!("syn-c{class}-{i:05}");
            let image_rel = format!("images/{sample_id}.png");
            save_image_tensor(&out.join(&image_rel), &g.image)?;
            records.push(GeneratedRecord {
                sample_id,
                image_path: image_rel,
                class,
                source_id: sources[g.source_index].sample_id.clone(),
            });
        }
        log::info!("class {class}: generated {count} samples");
    }
    let manifest_out = out.join("generated.jsonl");
    write_jsonl(&manifest_out, &records)?;
    println!(
        "generated {} samples, wrote {}",
        records.len(),
        manifest_out.display()
    );
    Ok(())
}

fn cmd_filter(generated: &Path, scorer_dir: &Path, gamma: f64, out: &Path) -> Result<()> {
    let records: Vec<GeneratedRecord> = read_jsonl(generated)?;
    let base = generated.parent().unwrap_or_else(|| Path::new("."));
    let mut by_class: BTreeMap<usize, Vec<(String, f64)>> = BTreeMap::new();
    let mut scorers: BTreeMap<usize, AnomalyScorer> = BTreeMap::new();
    for record in &records {
        if !scorers.contains_key(&record.class) {
            let path = scorer_dir.join(format!("scorer-{}.ck", record.class));
            scorers.insert(record.class, AnomalyScorer::load(&path)?);
        }
        let scorer = &scorers[&record.class];
        let image = load_image_tensor(&base.join(&record.image_path))?;
        let score = scorer.score(&image)?;
        by_class
            .entry(record.class)
            .or_default()
            .push((record.sample_id.clone(), score));
    }

    let mut kept_ids: std::collections::BTreeSet<String> = Default::default();
    let mut rows = Vec::new();
    for (&class, scored) in &by_class {
        let (kept, kept_count, threshold) = keep_lowest(scored, gamma)?;
        rows.push(FilterReportRow {
            class,
            generated: scored.len(),
            kept: kept_count,
            discarded: scored.len() - kept_count,
            threshold,
        });
        kept_ids.extend(kept);
    }
    let report = FilterReport { gamma, rows };

    let clean: Vec<&GeneratedRecord> = records
        .iter()
        .filter(|r| kept_ids.contains(&r.sample_id))
        .collect();
    // Keep image paths valid from the new manifest's location.
    let rebased: Vec<GeneratedRecord> = clean
        .iter()
        .map(|r| GeneratedRecord {
            sample_id: r.sample_id.clone(),
            image_path: absolute(&base.join(&r.image_path))
                .to_string_lossy()
                .into_owned(),
            class: r.class,
            source_id: r.source_id.clone(),
        })
        .collect();
    let clean_path = out.join("clean.jsonl");
    write_jsonl(&clean_path, &rebased)?;
    let report_path = out.join("filter_report.json");
    report.save(&report_path)?;
    println!(
        "kept {} of {} generated samples at gamma {gamma}, wrote {} and {}",
        rebased.len(),
        records.len(),
        clean_path.display(),
        report_path.display()
    );
    Ok(())
}

/// Loads a generated manifest as labelled samples (class index is already
/// in the head-first space of the real dataset it came from).
fn load_generated(path: &Path) -> Result<Vec<LabeledSample>> {
    let records: Vec<GeneratedRecord> = read_jsonl(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    records
        .iter()
        .map(|r| {
            Ok(LabeledSample {
                sample_id: r.sample_id.clone(),
                image: load_image_tensor(&base.join(&r.image_path))?,
                label: r.class,
                mask: None,
                background: None,
            })
        })
        .collect()
}

fn cmd_evaluate(predictions: &[PathBuf], out_dir: Option<&Path>) -> Result<()> {
    let mut folds: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
    let mut max_label = 0;
    for path in predictions {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut truth = Vec::new();
        let mut predicted = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if lineno == 0 || line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::Load {
                    path: path.clone(),
                    msg: format!("line {}: expected 3 tab-separated fields", lineno + 1),
                });
            }
            let parse = |s: &str| -> Result<usize> {
                s.parse().map_err(|_| Error::Load {
                    path: path.clone(),
                    msg: format!("line {}: bad label '{}'", lineno + 1, s),
                })
            };
            let t = parse(fields[1])?;
            let p = parse(fields[2])?;
            max_label = max_label.max(t).max(p);
            truth.push(t);
            predicted.push(p);
        }
        folds.push((truth, predicted));
    }

    let m = max_label + 1;
    let mut reports = Vec::new();
    for (fold, (truth, predicted)) in folds.iter().enumerate() {
        reports.push(EvaluationReport::from_labels(
            truth,
            predicted,
            m,
            Some(fold),
        )?);
    }
    let mean = EvaluationReport::mean_of(&reports)?;

    println!("fold\tbma\tmacro_sensitivity\tmacro_specificity\tmacro_f1");
    for report in &reports {
        println!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            report.fold.expect("per-fold report"),
            report.bma,
            report.macro_sensitivity,
            report.macro_specificity,
            report.macro_f1
        );
    }
    println!(
        "mean\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
        mean.bma, mean.macro_sensitivity, mean.macro_specificity, mean.macro_f1
    );

    if let Some(out) = out_dir {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        for report in &reports {
            report.save(&out.join(format!(
                "report-fold{}.json",
                report.fold.expect("per-fold report")
            )))?;
        }
        mean.save(&out.join("report-mean.json"))?;
    }
    Ok(())
}

fn load_cli_dataset(
    args: &DatasetArgs,
    config: &PipelineConfig,
    seed: u64,
) -> Result<LongTailDataset> {
    match (&args.manifest, &args.toy_counts) {
        (Some(path), None) => load_manifest(path),
        (None, Some(counts)) => make_toy_dataset(counts, config.image_size, seed),
        (None, None) => Err(Error::validation(
            "provide either --manifest or --toy-counts",
        )),
        (Some(_), Some(_)) => unreachable!("clap enforces the conflict"),
    }
}

fn cmd_pipeline(
    command: &PipelineCommand,
    config: &PipelineConfig,
    seed: u64,
    out_dir: Option<&Path>,
    no_cache: bool,
) -> Result<()> {
    let cache_dir = out_dir.map(|d| d.join(".cache"));
    match command {
        PipelineCommand::Cv { dataset, grids } => {
            let data = load_cli_dataset(dataset, config, seed)?;
            let options = RunOptions {
                out_dir: out_dir.map(Path::to_path_buf),
                cache_dir,
                no_cache,
                write_grids: *grids,
            };
            let manifest = run_cv(&data, config, seed, &options)?;
            print!("{}", manifest.comparison_table());
            if let Some(out) = out_dir {
                println!("run {} written to {}", manifest.run_id, out.display());
            }
        }
        PipelineCommand::Fold { dataset, fold } => {
            let data = load_cli_dataset(dataset, config, seed)?;
            let prepared =
                PreparedFold::prepare(&data, *fold, config, seed, cache_dir.as_deref(), no_cache)?;
            let outcome = run_fold(&prepared)?;
            println!(
                "fold {}: bma baseline {:.4}, unfiltered {:.4}, filtered {:.4} (gamma {})",
                fold, outcome.baseline.bma, outcome.unfiltered.bma, outcome.filtered.bma,
                config.gamma
            );
            if let Some(out) = out_dir {
                let path = out.join(format!("fold{fold}.json"));
                let json = serde_json::to_string_pretty(&outcome).map_err(|e| Error::Load {
                    path: path.clone(),
                    msg: e.to_string(),
                })?;
                fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
                println!("outcome written to {}", path.display());
            }
        }
        PipelineCommand::SweepGamma {
            dataset,
            gammas,
            fold_subset,
        } => {
            let data = load_cli_dataset(dataset, config, seed)?;
            let folds: Vec<usize> = match fold_subset {
                Some(folds) => folds.clone(),
                None => (0..config.folds).collect(),
            };
            let sweep = tailgen::harness::sweep_gamma(
                &data,
                gammas,
                config,
                seed,
                &folds,
                cache_dir.as_deref(),
                no_cache,
            )?;
            print!("{}", sweep.to_tsv());
            if let Some(out) = out_dir {
                fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
                sweep.save(&out.join("sweep.json"))?;
                let tsv_path = out.join("sweep.tsv");
                fs::write(&tsv_path, sweep.to_tsv()).map_err(|e| Error::io(&tsv_path, e))?;
                println!("sweep written to {}", out.display());
            }
        }
    }
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for record in records {
        serde_json::to_writer(&mut out, record).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(line).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            msg: format!("line {}: {}", lineno + 1, e),
        })?);
    }
    Ok(records)
}
