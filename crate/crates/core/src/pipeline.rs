//! Run-level operations behind the command-line tool: dataset generation,
//! training, inference and evaluation, each writing a self-describing
//! output directory.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::codec::LatentCodec;
use crate::config::RunConfig;
use crate::dataset::{self, Quadruplet, Split};
use crate::error::{Error, Result};
use crate::gmf::{Ablation, DiffusionExample, GmfModel, LossParts, TryOnInputs};
use crate::image_io::{read_mask, read_rgb, write_mask, write_rgb};
use crate::metrics::{self, CorpusReport, EvalConfig, EvalItem};
use crate::parallel::{self, Execution};
use crate::param::ParamStore;

/// Version string baked in at build time (`git describe` when available).
pub const VERSION: &str = match option_env!("LAYERFIT_VERSION") {
    Some(v) => v,
    None => env!("CARGO_PKG_VERSION"),
};

pub const CONFIG_FILE: &str = "config.json";
pub const RUN_FILE: &str = "run.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.lft";
pub const LOSS_FILE: &str = "loss.csv";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";

/// Provenance record written into every output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub command: String,
    pub version: String,
    pub seed: u64,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_run_info(dir: &Path, command: &str, seed: u64) -> Result<()> {
    write_json(
        &dir.join(RUN_FILE),
        &RunInfo {
            command: command.to_string(),
            version: VERSION.to_string(),
            seed,
        },
    )
}

/// Generate `count` quadruplets and save them under `out`.
pub fn gen_data(config: &RunConfig, out: &Path, count: usize, exec: Execution) -> Result<usize> {
    if count == 0 {
        return Err(Error::Usage("--count must be positive".into()));
    }
    let samples = dataset::generate(&config.data, count, exec)?;
    create_dir(out)?;
    dataset::save(out, &config.data, &samples)?;
    write_json(&out.join(CONFIG_FILE), config)?;
    write_run_info(out, "gen-data", config.data.seed)?;
    Ok(samples.len())
}

/// Samples of `split`, failing when the dataset has none usable.
pub fn load_split(data: &Path, split: Split) -> Result<Vec<Quadruplet>> {
    let report = dataset::load(data, Some(split))?;
    if report.samples.is_empty() {
        let detail = report.errors.first().map_or(String::new(), |e| format!(" (first error: {})", e.message));
        return Err(Error::Data(format!(
            "{} has no usable {} samples{detail}",
            data.display(),
            split.dir_name()
        )));
    }
    Ok(report.samples)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub samples: usize,
    pub steps: usize,
    pub first_loss: f64,
    pub final_loss: f64,
}

/// Train on the `train` split of `data` and write a run directory.
pub fn train<F>(config: &RunConfig, data: &Path, out: &Path, exec: Execution, mut progress: F) -> Result<TrainSummary>
where
    F: FnMut(usize, &LossParts),
{
    config.validate()?;
    let samples = load_split(data, Split::Train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    let persons: Vec<_> = samples.iter().map(|q| q.person.clone()).collect();
    let (codec, _) = LatentCodec::build(&config.model.codec, &persons, &mut rng)?;
    let examples: Vec<DiffusionExample> = samples
        .iter()
        .map(|q| DiffusionExample::from_sample(&codec, q))
        .collect::<Result<_>>()?;
    let mut model = GmfModel::new(config.model.gmf.clone(), codec)?;
    let mut store = model.init(&mut rng)?;
    let history = model.train(&mut store, &examples, &config.train, exec, &mut progress)?;

    create_dir(out)?;
    let mut effective = config.clone();
    effective.model.gmf = model.config.clone();
    write_json(&out.join(CONFIG_FILE), &effective)?;
    write_run_info(out, "train", config.train.seed)?;
    let mut all = store;
    all.extend(model.codec.to_params()?)?;
    checkpoint::save(&all, &out.join(CHECKPOINT_FILE))?;
    let mut csv = String::from("step,total,denoise,occlusion\n");
    for (i, p) in history.iter().enumerate() {
        csv.push_str(&format!("{i},{},{},{}\n", p.total, p.denoise, p.occlusion));
    }
    let loss_path = out.join(LOSS_FILE);
    fs::write(&loss_path, csv).map_err(|e| Error::io(&loss_path, e))?;
    Ok(TrainSummary {
        samples: examples.len(),
        steps: history.len(),
        first_loss: history.first().map_or(0.0, |p| p.total),
        final_loss: history.last().map_or(0.0, |p| p.total),
    })
}

/// A trained model restored from a checkpoint and its run config.
pub struct LoadedModel {
    pub config: RunConfig,
    pub model: GmfModel,
    pub params: ParamStore,
    pub checkpoint_sha256: String,
}

/// Load `checkpoint` with `config`, or with the `config.json` beside it.
pub fn load_model(checkpoint_path: &Path, config: Option<RunConfig>) -> Result<LoadedModel> {
    let config = match config {
        Some(c) => c,
        None => {
            let beside = checkpoint_path.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE);
            if !beside.is_file() {
                return Err(Error::Checkpoint(format!(
                    "no run config at {}; pass --config",
                    beside.display()
                )));
            }
            RunConfig::load(&beside)?
        }
    };
    let bytes = fs::read(checkpoint_path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Checkpoint(format!("checkpoint {} not found", checkpoint_path.display())),
        _ => Error::io(checkpoint_path, e),
    })?;
    let checkpoint_sha256 = hex::encode(Sha256::digest(&bytes));
    let all = checkpoint::decode(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", checkpoint_path.display())))?;
    let codec = LatentCodec::from_params(config.model.codec.mode, &all)?;
    let model = GmfModel::new(config.model.gmf.clone(), codec)?;
    let mut params = all.filter_prefix("gmf.");
    params.extend(all.filter_prefix("gol."))?;
    model.check_params(&params)?;
    Ok(LoadedModel {
        config,
        model,
        params,
        checkpoint_sha256,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferEntry {
    pub id: String,
    pub seed: u64,
    pub generated: String,
    pub ground_truth: String,
    pub masks: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferManifest {
    pub version: String,
    pub checkpoint: String,
    pub checkpoint_sha256: String,
    pub guidance_scale: f64,
    pub seed: u64,
    pub samples: Vec<InferEntry>,
}

pub fn mask_file(id: &str, layer: usize) -> String {
    format!("{id}_layer{}.png", layer + 1)
}

/// Sample every `test`-split input and write `gen/`, `gt/`, `masks/` and a manifest.
pub fn infer(loaded: &LoadedModel, checkpoint_path: &Path, data: &Path, out: &Path, exec: Execution) -> Result<InferManifest> {
    let samples = load_split(data, Split::Test)?;
    let sample_cfg = &loaded.config.sample;
    let inputs: Vec<TryOnInputs> = samples.iter().map(TryOnInputs::from_sample).collect();
    let generated = loaded.model.sample_batch(&loaded.params, &inputs, sample_cfg, exec)?;
    let (gen_dir, gt_dir, mask_dir) = (out.join("gen"), out.join("gt"), out.join("masks"));
    for d in [&gen_dir, &gt_dir, &mask_dir] {
        create_dir(d)?;
    }
    let mut entries = Vec::with_capacity(samples.len());
    for (i, (q, img)) in samples.iter().zip(&generated).enumerate() {
        let file = format!("{}.png", q.id);
        write_rgb(&gen_dir.join(&file), img)?;
        write_rgb(&gt_dir.join(&file), &q.person)?;
        let mut masks = Vec::new();
        for (k, m) in q.visible_layers().iter().enumerate() {
            let name = mask_file(&q.id, k);
            write_mask(&mask_dir.join(&name), m)?;
            masks.push(format!("masks/{name}"));
        }
        entries.push(InferEntry {
            id: q.id.clone(),
            seed: sample_cfg.seed.wrapping_add(i as u64),
            generated: format!("gen/{file}"),
            ground_truth: format!("gt/{file}"),
            masks,
        });
    }
    let manifest = InferManifest {
        version: VERSION.to_string(),
        checkpoint: checkpoint_path.display().to_string(),
        checkpoint_sha256: loaded.checkpoint_sha256.clone(),
        guidance_scale: sample_cfg.guidance_scale,
        seed: sample_cfg.seed,
        samples: entries,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    write_json(&out.join(CONFIG_FILE), &loaded.config)?;
    write_run_info(out, "infer", sample_cfg.seed)?;
    Ok(manifest)
}

fn png_stems(dir: &Path) -> Result<Vec<String>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut stems = Vec::new();
    for entry in rd {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == "png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

/// Layer masks of `id` in `dir`: `<id>_layer1.png`, `<id>_layer2.png`, … until one is missing.
fn read_layer_masks(dir: &Path, id: &str) -> Result<Vec<crate::mask::Mask>> {
    let mut layers = Vec::new();
    loop {
        let path = dir.join(mask_file(id, layers.len()));
        if !path.is_file() {
            break;
        }
        layers.push(read_mask(&path)?);
    }
    if layers.is_empty() {
        return Err(Error::Input(format!(
            "sample {id}: no layer masks ({}) in {}",
            mask_file(id, 0),
            dir.display()
        )));
    }
    Ok(layers)
}

/// Score every generated PNG against its ground truth and write JSON and CSV reports.
pub fn eval(gen: &Path, gt: &Path, masks: &Path, out: &Path, config: &EvalConfig) -> Result<CorpusReport> {
    config.validate()?;
    let ids = png_stems(gen)?;
    if ids.is_empty() {
        return Err(Error::Input(format!("no PNG files in {}", gen.display())));
    }
    let items: Vec<EvalItem> = ids
        .iter()
        .map(|id| {
            let gt_path = gt.join(format!("{id}.png"));
            if !gt_path.is_file() {
                return Err(Error::Input(format!("sample {id}: ground truth {} missing", gt_path.display())));
            }
            Ok(EvalItem {
                id: id.clone(),
                generated: read_rgb(&gen.join(format!("{id}.png")))?,
                ground_truth: read_rgb(&gt_path)?,
                layers: read_layer_masks(masks, id)?,
            })
        })
        .collect::<Result<_>>()?;
    let report = parallel::with_thread_cap(parallel::thread_cap_from_env(), || {
        metrics::evaluate(&items, config, Execution::Parallel)
    })?;
    create_dir(out)?;
    write_json(&out.join(REPORT_JSON), &report)?;
    let csv_path = out.join(REPORT_CSV);
    fs::write(&csv_path, report.to_csv()).map_err(|e| Error::io(&csv_path, e))?;
    write_run_info(out, "eval", 0)?;
    Ok(report)
}

/// Resolve the effective config of a training run with an optional ablation override.
pub fn with_ablation(mut config: RunConfig, ablation: Option<Ablation>) -> RunConfig {
    if let Some(a) = ablation {
        config.model.gmf.ablation = a;
    }
    config
}
