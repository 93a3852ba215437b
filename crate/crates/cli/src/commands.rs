use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use akt_core::attention::AttentionTrace;
use akt_core::data::{
    apply_filters, expand_multi_concept, index_with_maps, kfold_split, parse_csv, question_concepts, read_raw, truncate,
    write_csv, Dataset, DatasetProfile, Interaction, InteractionSequence, DatasetMeta,
};
use akt_core::evaluation::{ablation_suite, PredictionSet};
use akt_core::model::{AktConfig, AktModel, Checkpoint, Variant};
use akt_core::synthetic::{generate, SimSpec};
use akt_core::training::{cross_validate, grid_search, prepare_sequences, run_fold, RunRecord};
use akt_core::{AktError, Scalar};
use anyhow::{Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{ConfigArgs, Precision, RunConfig};
use crate::manifest::{fingerprint_bytes, fingerprint_file, RunManifest};

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let file = File::create(path).with_context(|| format!("writing {}", path.display()))?;
    serde_json::to_writer_pretty(BufWriter::new(file), value)?;
    Ok(())
}

fn name(path: &Path) -> String {
    path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn load_dataset(path: &Path, profile: DatasetProfile) -> Result<(Dataset, String)> {
    let fingerprint = fingerprint_file(path).map_err(|e| AktError::Data(format!("{}: {e:#}", path.display())))?;
    Ok((parse_csv(path, profile)?, fingerprint))
}

#[derive(Serialize)]
struct DatasetReport<'a> {
    source: String,
    profile: &'a str,
    fingerprint: &'a str,
    learners: usize,
    concepts: usize,
    questions: usize,
    responses: usize,
}

pub fn print_statistics(label: &str, meta: &DatasetMeta) {
    println!("{:<20} {:>9} {:>9} {:>10} {:>11}", "dataset", "learners", "concepts", "questions", "responses");
    println!("{:<20} {:>9} {:>9} {:>10} {:>11}", label, meta.learners, meta.concepts, meta.questions, meta.responses);
}

pub fn prepare(input: &Path, profile_name: &str, output: &Path) -> Result<()> {
    let profile = DatasetProfile::parse(profile_name)?;
    let (dataset, fingerprint) = load_dataset(input, profile)?;
    create_dir(output)?;
    let csv_path = output.join("dataset.csv");
    write_csv(&dataset, BufWriter::new(File::create(&csv_path)?))?;
    let report = DatasetReport {
        source: input.display().to_string(),
        profile: profile_name,
        fingerprint: &fingerprint,
        learners: dataset.meta.learners,
        concepts: dataset.meta.concepts,
        questions: dataset.meta.questions,
        responses: dataset.meta.responses,
    };
    let report_path = output.join("meta.json");
    write_json(&report_path, &report)?;
    let mut manifest = RunManifest::new("prepare", &serde_json::json!({ "input": report.source, "profile": profile_name }))?;
    manifest.dataset_fingerprint = Some(fingerprint);
    manifest.artifacts = vec![name(&csv_path), name(&report_path)];
    manifest.write(output)?;
    print_statistics(&name(input), &dataset.meta);
    Ok(())
}

fn diverged(records: &[RunRecord]) -> Result<()> {
    let bad: Vec<String> = records.iter().filter(|r| r.diverged()).map(|r| format!("fold {}: {:?}", r.fold, r.status)).collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(AktError::Numerical(format!("training diverged ({}); records were written", bad.join("; "))).into())
    }
}

fn fmt_auc(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |a| format!("{a:.4}"))
}

fn train_typed<S: Scalar>(data: &Path, cfg: &RunConfig, output: &Path) -> Result<()> {
    let (dataset, fingerprint) = load_dataset(data, cfg.profile()?)?;
    create_dir(output)?;
    let mut artifacts = Vec::new();
    let (model, record) = match &cfg.grid {
        Some(grid) => {
            let (model, result) = grid_search::<S>(&dataset, &cfg.model, &cfg.train, grid)?;
            let path = output.join("grid.json");
            write_json(&path, &result)?;
            artifacts.push(name(&path));
            println!("grid: {} trials, selected dim={} dropout={} lr={} max_grad_norm={:?}",
                result.trials.len(), result.selected.model_config.dim, result.selected.model_config.dropout,
                result.selected.train_config.learning_rate, result.selected.train_config.max_grad_norm);
            (model, result.selected)
        }
        None => run_fold::<S>(&dataset, &cfg.model, &cfg.train)?,
    };

    let checkpoint = Checkpoint::from_model(&model, &dataset.maps)
        .with_question_concepts(question_concepts(&dataset.sequences, dataset.meta.questions));
    let ck_path = output.join("checkpoint.json");
    checkpoint.save(&ck_path)?;
    let record_path = output.join("run_record.json");
    write_json(&record_path, &record)?;
    artifacts.extend([name(&ck_path), name(&record_path)]);

    let sequences = prepare_sequences(&dataset, &model.config);
    let test = kfold_split(&sequences, cfg.train.folds, cfg.train.seed)?[cfg.train.fold].select(&sequences).test;
    if !test.is_empty() {
        let preds = PredictionSet::from_model(&model, &test)?;
        let path = output.join("test_predictions.csv");
        preds.write_csv(&dataset.maps, BufWriter::new(File::create(&path)?))?;
        artifacts.push(name(&path));
    }

    let mut manifest = RunManifest::new("train", cfg)?;
    manifest.dataset_fingerprint = Some(fingerprint);
    manifest.seed = Some(cfg.train.seed);
    manifest.artifacts = artifacts;
    manifest.write(output)?;
    println!(
        "fold {} {}: {} epochs, best epoch {}, val AUC {}, test AUC {}",
        record.fold,
        record.model_config.variant,
        record.epochs.len(),
        record.best_epoch.map_or_else(|| "n/a".into(), |e| e.to_string()),
        fmt_auc(record.best_val_auc),
        fmt_auc(record.test_auc)
    );
    diverged(std::slice::from_ref(&record))
}

pub fn train(data: &Path, args: &ConfigArgs, output: &Path) -> Result<()> {
    let cfg = args.resolve()?;
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(data, &cfg, output),
        Precision::F64 => train_typed::<f64>(data, &cfg, output),
    }
}

pub fn cv(data: &Path, args: &ConfigArgs, output: &Path) -> Result<()> {
    let cfg = args.resolve()?;
    let (dataset, fingerprint) = load_dataset(data, cfg.profile()?)?;
    let summary = match cfg.precision {
        Precision::F32 => cross_validate::<f32>(&dataset, &cfg.model, &cfg.train)?,
        Precision::F64 => cross_validate::<f64>(&dataset, &cfg.model, &cfg.train)?,
    };
    create_dir(output)?;
    let path = output.join("cv_summary.json");
    write_json(&path, &summary)?;
    let mut manifest = RunManifest::new("cv", &cfg)?;
    manifest.dataset_fingerprint = Some(fingerprint);
    manifest.seed = Some(cfg.train.seed);
    manifest.artifacts = vec![name(&path)];
    manifest.write(output)?;
    for r in &summary.records {
        println!("fold {}: test AUC {} (best epoch {})", r.fold, fmt_auc(r.test_auc), r.best_epoch.unwrap_or(0));
    }
    println!("{}: test AUC {:.4} ± {:.4} over {} folds", cfg.model.variant, summary.mean_test_auc, summary.std_test_auc, summary.records.len());
    diverged(&summary.records)
}

pub fn ablate(data: &Path, variants: &[String], args: &ConfigArgs, output: &Path) -> Result<()> {
    let cfg = args.resolve()?;
    let variants: Vec<Variant> = if variants.is_empty() {
        Variant::ALL.to_vec()
    } else {
        variants.iter().map(|v| Variant::parse(v)).collect::<akt_core::Result<_>>()?
    };
    let (dataset, fingerprint) = load_dataset(data, cfg.profile()?)?;
    let table = match cfg.precision {
        Precision::F32 => ablation_suite::<f32>(&dataset, &variants, &cfg.model, &cfg.train)?,
        Precision::F64 => ablation_suite::<f64>(&dataset, &variants, &cfg.model, &cfg.train)?,
    };
    create_dir(output)?;
    let csv_path = output.join("ablation.csv");
    table.write_csv(BufWriter::new(File::create(&csv_path)?))?;
    let txt_path = output.join("ablation.txt");
    std::fs::write(&txt_path, table.to_string())?;
    let json_path = output.join("ablation.json");
    write_json(&json_path, &table)?;
    let mut manifest = RunManifest::new("ablate", &serde_json::json!({ "run": cfg, "variants": variants }))?;
    manifest.dataset_fingerprint = Some(fingerprint);
    manifest.seed = Some(cfg.train.seed);
    manifest.artifacts = vec![name(&csv_path), name(&txt_path), name(&json_path)];
    manifest.write(output)?;
    print!("{table}");
    let records: Vec<RunRecord> = table.runs.into_iter().flat_map(|r| r.records).collect();
    diverged(&records)
}

#[derive(clap::Args, Debug, Clone, Default)]
pub struct SynthArgs {
    /// TOML simulator spec; flags override its fields
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub learners: Option<usize>,
    #[arg(long)]
    pub concepts: Option<usize>,
    #[arg(long)]
    pub questions_per_concept: Option<usize>,
    #[arg(long)]
    pub difficulty_spread: Option<f64>,
    #[arg(long)]
    pub length: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl SynthArgs {
    pub fn resolve(&self) -> Result<SimSpec> {
        let mut spec = match &self.spec {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| AktError::config(format!("reading spec {}: {e}", path.display())))?;
                toml::from_str(&text).map_err(|e| AktError::config(format!("spec: {e}")))?
            }
            None => SimSpec::default(),
        };
        if let Some(v) = self.learners {
            spec.learners = v;
        }
        if let Some(v) = self.concepts {
            spec.concepts = v;
        }
        if let Some(v) = self.questions_per_concept {
            spec.questions_per_concept = v;
        }
        if let Some(v) = self.difficulty_spread {
            spec.difficulty_spread = v;
        }
        if let Some(v) = self.length {
            spec.length = v;
        }
        if let Some(v) = self.seed {
            spec.seed = v;
        }
        spec.validate()?;
        Ok(spec)
    }
}

pub fn synth(args: &SynthArgs, output: &Path) -> Result<()> {
    let spec = args.resolve()?;
    let (dataset, truth) = generate(&spec)?;
    create_dir(output)?;
    let mut csv = Vec::new();
    write_csv(&dataset, &mut csv)?;
    let csv_path = output.join("data.csv");
    std::fs::write(&csv_path, &csv)?;
    let truth_path = output.join("ground_truth.json");
    truth.save(&truth_path)?;
    let mut manifest = RunManifest::new("synth", &spec)?;
    manifest.dataset_fingerprint = Some(fingerprint_bytes(&csv));
    manifest.seed = Some(spec.seed);
    manifest.artifacts = vec![name(&csv_path), name(&truth_path)];
    manifest.write(output)?;
    print_statistics(&name(&csv_path), &dataset.meta);
    Ok(())
}

fn with_checkpoint<T>(
    path: &Path,
    f32_fn: impl FnOnce(AktModel<f32>, &Checkpoint) -> Result<T>,
    f64_fn: impl FnOnce(AktModel<f64>, &Checkpoint) -> Result<T>,
) -> Result<T> {
    let ck = Checkpoint::load(path).map_err(|e| AktError::Data(format!("checkpoint {}: {e}", path.display())))?;
    match ck.scalar.as_str() {
        "f32" => f32_fn(ck.to_model()?, &ck),
        "f64" => f64_fn(ck.to_model()?, &ck),
        other => Err(AktError::Data(format!("checkpoint scalar type {other:?} is not f32 or f64")).into()),
    }
}

#[derive(Serialize)]
struct LayerTrace {
    layer: String,
    heads: Vec<AttentionTrace>,
}

#[derive(Serialize)]
struct ChunkTrace {
    start: usize,
    length: usize,
    layers: Vec<LayerTrace>,
}

#[derive(Serialize)]
struct LearnerTrace {
    learner_id: String,
    variant: Variant,
    chunks: Vec<ChunkTrace>,
}

fn learner_sequence(data: &Path, profile: DatasetProfile, learner: &str, ck: &Checkpoint) -> Result<Vec<InteractionSequence>> {
    let raw = read_raw(File::open(data).map_err(|e| AktError::Data(format!("{}: {e}", data.display())))?)?;
    let raw: Vec<_> = raw.into_iter().filter(|s| s.learner_id == learner).collect();
    if raw.is_empty() {
        return Err(AktError::Data(format!("learner {learner:?} not found in {}", data.display())).into());
    }
    let seqs = index_with_maps(apply_filters(raw, profile.rules()), &ck.maps)?;
    if seqs.is_empty() {
        return Err(AktError::Data(format!("learner {learner:?} has no usable interactions")).into());
    }
    Ok(truncate(expand_multi_concept(seqs, ck.config.multi_concept), ck.config.max_len))
}

fn traces<S: Scalar>(model: &AktModel<S>, learner: &str, chunks: &[InteractionSequence]) -> Result<LearnerTrace> {
    let mut out = LearnerTrace { learner_id: learner.into(), variant: model.config.variant, chunks: Vec::new() };
    let mut start = 0;
    for chunk in chunks {
        let layers =
            model.attention_traces(chunk)?.into_iter().map(|(layer, heads)| LayerTrace { layer, heads }).collect();
        out.chunks.push(ChunkTrace { start, length: chunk.len(), layers });
        start += chunk.len();
    }
    Ok(out)
}

pub fn export_attention(checkpoint: &Path, data: &Path, profile: &str, learner: &str, output: &Path) -> Result<()> {
    let profile = DatasetProfile::parse(profile)?;
    let trace = with_checkpoint(
        checkpoint,
        |m, ck| traces(&m, learner, &learner_sequence(data, profile, learner, ck)?),
        |m, ck| traces(&m, learner, &learner_sequence(data, profile, learner, ck)?),
    )?;
    write_json(output, &trace)?;
    println!("wrote {} chunk(s) of attention weights for {learner} to {}", trace.chunks.len(), output.display());
    Ok(())
}

fn difficulty_rows<S: Scalar>(model: &AktModel<S>, ck: &Checkpoint) -> Result<Vec<(String, String, f64)>> {
    let mu = model.difficulties().ok_or_else(|| {
        AktError::config(format!("variant {} has no difficulty parameters (plain embeddings)", model.config.variant))
    })?;
    Ok(mu
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let q = i as u32 + 1;
            let question = ck.maps.question_name(q).map_or_else(|| q.to_string(), str::to_string);
            let concepts = ck
                .question_concepts
                .get(i)
                .map(|cs| cs.iter().map(|&c| ck.maps.concept_name(c).unwrap_or_default().to_string()).collect::<Vec<_>>().join(";"))
                .unwrap_or_default();
            (question, concepts, m.to_f64_lossless())
        })
        .collect())
}

pub fn export_difficulty(checkpoint: &Path, output: &Path) -> Result<()> {
    let rows = with_checkpoint(checkpoint, |m, ck| difficulty_rows(&m, ck), |m, ck| difficulty_rows(&m, ck))?;
    let mut text = String::from("question_id,concept_id,mu\n");
    for (q, c, mu) in &rows {
        text.push_str(&format!("{q},{c},{mu}\n"));
    }
    std::fs::write(output, text).with_context(|| format!("writing {}", output.display()))?;
    println!("wrote {} difficulty values to {}", rows.len(), output.display());
    Ok(())
}

pub fn grad_check(variant: &str, seed: u64, epsilon: f64, tolerance: f64) -> Result<()> {
    let variant = Variant::parse(variant)?;
    let meta = DatasetMeta { concepts: 3, questions: 6, learners: 2, responses: 16 };
    let cfg = AktConfig { variant, dim: 8, heads: 2, head_widths: vec![16, 8], dropout: 0.0, max_len: 8, ..AktConfig::default() };
    let model = AktModel::<f64>::build(cfg, meta, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch: Vec<InteractionSequence> = ["a", "b"]
        .iter()
        .map(|id| InteractionSequence {
            learner_id: (*id).into(),
            interactions: (0..8)
                .map(|_| Interaction::single(Some(rng.random_range(1..=6)), rng.random_range(1..=3), rng.random_range(0..=1)))
                .collect(),
        })
        .collect();
    let err = model.check_gradients(&batch, epsilon)?;
    println!("{variant}: max relative gradient error {err:.3e} (B=2, T=8, D=8, H=2, f64, tolerance {tolerance:e})");
    if err < tolerance {
        Ok(())
    } else {
        Err(AktError::Numerical(format!("gradient check failed: {err:.3e} >= {tolerance:e}")).into())
    }
}
