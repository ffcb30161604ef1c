//! Artifact-level pipeline stages behind the CLI subcommands.
//!
//! Every stage writes its outputs plus an `config.json` echo of the effective
//! configuration into the output directory, and every stage is a pure
//! function of `(config, seeds, inputs)` — reruns reproduce identical bytes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::corpus::{
    attribute_stats, read_corpus, write_corpus, AnomalyType, CaptionedSample, Generator,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricReport};
use crate::rng;
use crate::sampler::{sample, SampleRequest};
use crate::train::{loss_log_csv, train};

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn echo_config(config: &RunConfig, dir: &Path) -> Result<()> {
    write_text(&dir.join("config.json"), &config.to_json_pretty())
}

/// Largest-remainder allocation of `total` slots to weighted keys; counts are
/// within one of the exact proportional share and sum to `total`.
pub fn allocate_counts<K: Ord + Clone>(weights: &BTreeMap<K, f64>, total: usize) -> BTreeMap<K, usize> {
    let weight_sum: f64 = weights.values().sum();
    let mut counts: BTreeMap<K, usize> = BTreeMap::new();
    let mut remainders: Vec<(K, f64)> = Vec::new();
    let mut assigned = 0usize;
    for (key, w) in weights {
        let share = total as f64 * w / weight_sum;
        let floor = share.floor() as usize;
        counts.insert(key.clone(), floor);
        assigned += floor;
        remainders.push((key.clone(), share - share.floor()));
    }
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite weights"));
    for (key, _) in remainders.into_iter().take(total - assigned) {
        *counts.get_mut(&key).expect("key present") += 1;
    }
    counts
}

#[derive(Debug)]
pub struct GenCorpusOutput {
    pub manifest: PathBuf,
    pub stats: BTreeMap<String, usize>,
    pub count: usize,
}

/// Generate the configured corpus into `out_dir`.
pub fn gen_corpus(config: &RunConfig, out_dir: &Path) -> Result<GenCorpusOutput> {
    config.validate()?;
    let generator = Generator::new(config.image.height, config.image.width);
    let counts = allocate_counts(&config.corpus.anomaly_mix, config.corpus.size);

    // Deterministic plan: type-major order, categories round-robin.
    let mut plan: Vec<(AnomalyType, String)> = Vec::with_capacity(config.corpus.size);
    for (t, count) in &counts {
        for _ in 0..*count {
            let category = &config.corpus.categories[plan.len() % config.corpus.categories.len()];
            plan.push((*t, category.clone()));
        }
    }

    let samples: Vec<Result<CaptionedSample>> = plan
        .par_iter()
        .enumerate()
        .map(|(i, (anomaly_type, category))| {
            let mut spec_rng = rng::stream(config.seeds.corpus, rng::ns::CORPUS_SPEC, i as u64);
            let mut spec = generator.sample_spec(category, *anomaly_type, &mut spec_rng)?;
            spec.category = category.clone();
            let seed = rng::derive_seed(config.seeds.corpus, rng::ns::CORPUS, i as u64);
            let mut sample = generator.generate(&spec, seed)?;
            sample.id = format!("{category}-{anomaly_type}-{i:05}");
            Ok(sample)
        })
        .collect();
    let samples: Vec<CaptionedSample> = samples.into_iter().collect::<Result<_>>()?;

    let manifest = write_corpus(&samples, out_dir)?;
    echo_config(config, out_dir)?;
    Ok(GenCorpusOutput {
        manifest,
        stats: attribute_stats(&samples),
        count: samples.len(),
    })
}

#[derive(Debug)]
pub struct TrainOutput {
    pub checkpoint_path: PathBuf,
    pub loss_log_path: PathBuf,
    pub first_window_mean: f64,
    pub last_window_mean: f64,
}

/// Train on a corpus directory and write `model.ckpt` + `loss.csv`.
pub fn train_cmd(config: &RunConfig, corpus_dir: &Path, out_dir: &Path) -> Result<TrainOutput> {
    config.validate()?;
    let corpus = read_corpus(corpus_dir)?;
    let outcome = train(&corpus, config)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let checkpoint_path = out_dir.join("model.ckpt");
    outcome.checkpoint.save(&checkpoint_path)?;
    let loss_log_path = out_dir.join("loss.csv");
    write_text(&loss_log_path, &loss_log_csv(&outcome.loss_log))?;
    echo_config(config, out_dir)?;

    let window = 100.min(outcome.loss_log.len());
    let mean_of = |slice: &[(usize, f64)]| {
        if slice.is_empty() {
            f64::NAN
        } else {
            slice.iter().map(|(_, l)| l).sum::<f64>() / slice.len() as f64
        }
    };
    Ok(TrainOutput {
        checkpoint_path,
        loss_log_path,
        first_window_mean: mean_of(&outcome.loss_log[..window]),
        last_window_mean: mean_of(&outcome.loss_log[outcome.loss_log.len() - window..]),
    })
}

/// Deterministic conditions for `n` generated samples: defect types drawn
/// from the configured mix (normals excluded — there is nothing to
/// synthesize for them), categories round-robin, geometry seeded per slot.
pub fn build_sample_requests(config: &RunConfig, n: usize) -> Result<Vec<SampleRequest>> {
    let generator = Generator::new(config.image.height, config.image.width);
    let mut defect_mix: BTreeMap<AnomalyType, f64> = BTreeMap::new();
    for (t, w) in &config.corpus.anomaly_mix {
        if *t != AnomalyType::None && *w > 0.0 {
            defect_mix.insert(*t, *w);
        }
    }
    if defect_mix.is_empty() {
        return Err(Error::config(
            "corpus.anomaly_mix",
            "needs at least one defect type with positive weight to sample",
        ));
    }
    let counts = allocate_counts(&defect_mix, n);
    let mut requests = Vec::with_capacity(n);
    for (t, count) in &counts {
        for _ in 0..*count {
            let slot = requests.len();
            let category = &config.corpus.categories[slot % config.corpus.categories.len()];
            let mut spec_rng = rng::stream(config.seeds.sample, rng::ns::SAMPLE_SPEC, slot as u64);
            let mut spec = generator.sample_spec(category, *t, &mut spec_rng)?;
            spec.category = category.clone();
            requests.push(SampleRequest {
                id: format!("gen-{t}-{slot:05}"),
                caption: generator.caption_for(&spec),
                mask: generator.defect_mask(&spec)?,
                category: category.clone(),
                anomaly_type: *t,
            });
        }
    }
    Ok(requests)
}

#[derive(Debug)]
pub struct SampleOutput {
    pub manifest: PathBuf,
    pub count: usize,
}

/// Sample `n` defect images from a checkpoint into `out_dir`.
pub fn sample_cmd(
    config: &RunConfig,
    checkpoint_path: &Path,
    n: usize,
    out_dir: &Path,
) -> Result<SampleOutput> {
    config.validate()?;
    let checkpoint = Checkpoint::load(checkpoint_path)?;
    if checkpoint.config.compat_hash() != config.compat_hash() {
        return Err(Error::data(format!(
            "checkpoint is incompatible with the current config (checkpoint {}, config {})",
            checkpoint.config.compat_hash(),
            config.compat_hash()
        )));
    }
    let model = checkpoint.model()?;
    let generator = Generator::new(config.image.height, config.image.width);
    let requests = build_sample_requests(config, n)?;

    let samples: Vec<Result<CaptionedSample>> = requests
        .par_iter()
        .enumerate()
        .map(|(i, request)| {
            let base = generator.base_image(&request.category)?;
            let seed = rng::derive_seed(config.seeds.sample, rng::ns::SAMPLE_SEED, i as u64);
            sample(&model, &checkpoint.store, &base, request, seed)
        })
        .collect();
    let samples: Vec<CaptionedSample> = samples.into_iter().collect::<Result<_>>()?;

    let manifest = write_corpus(&samples, out_dir)?;
    echo_config(config, out_dir)?;
    Ok(SampleOutput {
        manifest,
        count: samples.len(),
    })
}

pub struct EvalOutput {
    pub report_path: PathBuf,
    pub report: MetricReport,
}

/// Evaluate a generated corpus against a held-out corpus; writes
/// `report.json` into `out_dir`.
pub fn eval_cmd(
    config: &RunConfig,
    generated_dir: &Path,
    heldout_dir: &Path,
    out_dir: &Path,
) -> Result<EvalOutput> {
    config.validate()?;
    let generated = read_corpus(generated_dir)?;
    let heldout = read_corpus(heldout_dir)?;
    let report = evaluate(&generated, &heldout, config)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let report_path = out_dir.join("report.json");
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Json {
        context: "metric report".into(),
        message: e.to_string(),
    })?;
    write_text(&report_path, &json)?;
    echo_config(config, out_dir)?;
    Ok(EvalOutput {
        report_path,
        report,
    })
}
