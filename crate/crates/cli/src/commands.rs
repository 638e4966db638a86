//! The `train`, `encode`, `eval` and `synth` subcommands.
//!
//! Every file a command writes goes under the configured output directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fisherlda_core::dataset::{synth_generate, synth_split};
use fisherlda_core::evalrank::{cmc_evaluate, cross_camera_split, embed, RankingResult};
use fisherlda_core::trainer::Trainer;
use fisherlda_core::Error as CoreError;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::manifest::{Entry, Manifest, SplitName};
use crate::{checkpoint, descfile, runlog};

pub const CHECKPOINT_FILE: &str = "checkpoint.dlfc";
pub const DIVERGED_FILE: &str = "diverged.dlfc";
pub const LOG_FILE: &str = "train_log.ndjson";
pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";
pub const CMC_FILE: &str = "cmc.csv";
pub const REPORT_FILE: &str = "eval_report.json";
pub const EMBEDDING_DIR: &str = "embeddings";

/// A parsed config together with what is needed to reproduce the run.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: RunConfig,
    pub config_path: PathBuf,
    pub config_sha256: String,
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
}

pub fn load_context(config_path: &Path, overrides: &Overrides) -> Result<Context> {
    let (mut config, bytes) = RunConfig::read(config_path)?;
    // the default manifest belongs to the configured output directory, not
    // to an overriding one
    config.manifest = Some(config.manifest_path());
    if let Some(out) = &overrides.out {
        config.out_dir = out.clone();
    }
    if let Some(seed) = overrides.seed {
        config.seed = seed;
    }
    if overrides.threads.is_some() {
        config.threads = overrides.threads;
    }
    config.validate()?;
    if let Some(n) = config.threads {
        log::debug!("thread cap {n}; the pipeline runs on one thread");
    }
    Ok(Context {
        config,
        config_path: config_path.to_path_buf(),
        config_sha256: hex(&Sha256::digest(&bytes)),
    })
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(2 * bytes.len()), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn default_checkpoint(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join(CHECKPOINT_FILE)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub epochs: usize,
    pub first_loss: f64,
    pub last_loss: f64,
}

/// Fits the pipeline on the manifest's train split, optionally continuing
/// from `resume`, and writes checkpoint, log and run manifest.
pub fn train(ctx: &Context, resume: Option<&Path>) -> Result<TrainSummary> {
    let cfg = &ctx.config;
    let manifest = Manifest::read(&cfg.manifest_path())?;
    let images = manifest.load_split(SplitName::Train)?;
    create_dir(&cfg.out_dir)?;

    let tc = cfg.train_config();
    let mut trainer = match resume {
        Some(path) => Trainer::resume(tc, &images, checkpoint::read(path)?)?,
        None => Trainer::new(tc, &images)?,
    };
    log::info!(
        "training on {} images, {} identities, fisher vector dim {}",
        images.len(),
        trainer.state.classes.len(),
        trainer.state.fv_dim()
    );
    if let Err(e) = trainer.run() {
        if matches!(e, CoreError::Divergence(_)) {
            // the trainer rejects a step before applying it, so this is the
            // last finite state
            let dump = cfg.out_dir.join(DIVERGED_FILE);
            checkpoint::write(&dump, &trainer.state)?;
            log::error!("state before the failing step written to {}", dump.display());
        }
        return Err(e.into());
    }
    let state = trainer.into_state();
    for r in &state.log {
        log::info!("epoch {:>3}  loss {:.6}  lr {:.3e}", r.epoch, r.loss, r.lr);
    }

    let ckpt = default_checkpoint(cfg);
    checkpoint::write(&ckpt, &state)?;
    runlog::write(&cfg.out_dir.join(LOG_FILE), &state.log)?;
    let run_manifest = json!({
        "command": "train",
        "config_path": ctx.config_path,
        "config_sha256": ctx.config_sha256,
        "seed": cfg.seed,
        "resumed_from": resume,
        "versions": {
            "fisherlda": env!("CARGO_PKG_VERSION"),
            "fisherlda-core": fisherlda_core::VERSION,
        },
        "config": cfg,
    });
    write_text(
        &cfg.out_dir.join(RUN_MANIFEST_FILE),
        &(serde_json::to_string_pretty(&run_manifest).expect("run manifest serializes") + "\n"),
    )?;
    Ok(TrainSummary {
        checkpoint: ckpt,
        epochs: state.epoch,
        first_loss: state.log.first().map_or(f64::NAN, |r| r.loss),
        last_loss: state.log.last().map_or(f64::NAN, |r| r.loss),
    })
}

/// File name for an image id, with anything outside `[A-Za-z0-9._-]`
/// replaced so the result stays inside the embedding directory.
pub fn embedding_file_name(id: &str) -> String {
    let mut s: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') { c } else { '_' })
        .collect();
    if s.is_empty() || s.starts_with('.') {
        s.insert(0, '_');
    }
    s + ".dfv"
}

/// Writes one `M = 1` descriptor file per requested id. Ids are checked
/// before anything is written; an empty list writes nothing.
pub fn encode(ctx: &Context, checkpoint_path: Option<&Path>, ids: &[String]) -> Result<Vec<PathBuf>> {
    if ids.is_empty() {
        return Ok(Vec::new());
    }
    let cfg = &ctx.config;
    let manifest = Manifest::read(&cfg.manifest_path())?;
    let entries: Vec<&Entry> = ids
        .iter()
        .map(|id| manifest.find(id).ok_or_else(|| CliError::Lookup(id.clone())))
        .collect::<Result<_>>()?;
    let state = checkpoint::read(&checkpoint_path.map_or_else(|| default_checkpoint(cfg), Path::to_path_buf))?;
    let images = entries.iter().map(|e| manifest.load(e)).collect::<Result<Vec<_>>>()?;
    let emb = embed(&state, &images)?;

    let dir = cfg.out_dir.join(EMBEDDING_DIR);
    create_dir(&dir)?;
    let mut written = Vec::with_capacity(ids.len());
    for (row, id) in ids.iter().enumerate() {
        let path = dir.join(embedding_file_name(id));
        descfile::write(&path, &emb.rows(row, 1).into_owned())?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub rank20: f64,
    pub map: f64,
}

impl EvalSummary {
    pub fn from_result(r: &RankingResult) -> Self {
        Self {
            rank1: r.rank(1),
            rank5: r.rank(5),
            rank10: r.rank(10),
            rank20: r.rank(20),
            map: r.map,
        }
    }
}

/// Embeds the test split, matches probes against the gallery and writes
/// the CMC curve and a JSON report.
///
/// Probes come from one camera and the gallery from the others. With
/// `self_gallery` every test image is both a probe and a gallery item of an
/// identity of its own, so each probe's only match is itself.
pub fn eval(ctx: &Context, checkpoint_path: Option<&Path>, self_gallery: bool) -> Result<(EvalSummary, RankingResult)> {
    let cfg = &ctx.config;
    let manifest = Manifest::read(&cfg.manifest_path())?;
    let images = manifest.load_split(SplitName::Test)?;
    let state = checkpoint::read(&checkpoint_path.map_or_else(|| default_checkpoint(cfg), Path::to_path_buf))?;
    let emb = embed(&state, &images)?;
    let labels: Vec<usize> = images.iter().map(|i| i.label).collect();
    let cameras: Vec<u32> = images.iter().map(|i| i.camera_id).collect();

    let (probe, gallery) = if self_gallery {
        let all: Vec<usize> = (0..images.len()).collect();
        (all.clone(), all)
    } else {
        cross_camera_split(&cameras, &labels, cfg.seed)?
    };
    let match_labels: Vec<usize> = if self_gallery { (0..images.len()).collect() } else { labels.clone() };
    let pick = |idx: &[usize]| -> Vec<usize> { idx.iter().map(|&i| match_labels[i]).collect() };
    let result = cmc_evaluate(
        &emb.select_rows(probe.iter()),
        &pick(&probe),
        &emb.select_rows(gallery.iter()),
        &pick(&gallery),
        cfg.trials,
        cfg.seed,
        cfg.metric(),
    )?;
    let summary = EvalSummary::from_result(&result);

    create_dir(&cfg.out_dir)?;
    let mut csv = String::from("rank,rate\n");
    for (k, rate) in result.cmc.iter().enumerate() {
        let _ = writeln!(csv, "{},{}", k + 1, rate);
    }
    write_text(&cfg.out_dir.join(CMC_FILE), &csv)?;

    let rankings: Vec<_> = result
        .rankings
        .iter()
        .map(|r| {
            let p = probe[r.probe];
            json!({
                "probe": images[p].image_id,
                "label": labels[p],
                "gallery": r.gallery_order.iter().zip(&r.distances).map(|(&g, &d)| {
                    let g = gallery[g];
                    json!({ "id": images[g].image_id, "label": labels[g], "distance": d })
                }).collect::<Vec<_>>(),
            })
        })
        .collect();
    let report = json!({
        "rank1": summary.rank1,
        "rank5": summary.rank5,
        "rank10": summary.rank10,
        "rank20": summary.rank20,
        "map": summary.map,
        "cmc": result.cmc,
        "trials": result.trials,
        "seed": cfg.seed,
        "metric": cfg.metric,
        "self_gallery": self_gallery,
        "probes": probe.len(),
        "gallery_size": gallery.len(),
        "rankings": rankings,
    });
    write_text(
        &cfg.out_dir.join(REPORT_FILE),
        &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"),
    )?;
    Ok((summary, result))
}

/// Generates the synthetic dataset into `<out_dir>/data` and returns the
/// manifest path.
pub fn synth(ctx: &Context) -> Result<PathBuf> {
    let cfg = &ctx.config;
    let per_id = cfg.synth_per_identity;
    let images = synth_generate(cfg.synth_identities, per_id, cfg.synth_dim, cfg.seed)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let dir = cfg.synth_dir();
    let desc_dir = dir.join("descriptors");
    create_dir(&desc_dir)?;
    let mut entries = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let file = format!("descriptors/{}.dfv", img.image_id);
        descfile::write(&dir.join(&file), &img.descriptors)?;
        entries.push(Entry {
            id: img.image_id.clone(),
            label: img.label,
            camera: img.camera_id,
            file,
            split: synth_split(i % per_id, per_id).into(),
        });
    }
    let path = dir.join("manifest.json");
    Manifest {
        entries,
        base_dir: dir.clone(),
    }
    .write(&path)?;
    if cfg.manifest_path() != path {
        log::warn!(
            "config reads its manifest from {}, synthetic data went to {}",
            cfg.manifest_path().display(),
            path.display()
        );
    }
    Ok(path)
}
