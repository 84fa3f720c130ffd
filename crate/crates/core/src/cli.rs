//! The `ptloss` command line: one JSON experiment config drives `dataset`,
//! `train`, `evaluate` and `report`.
//!
//! Output layout under `output_dir`:
//!
//! ```text
//! corpus/manifest.json        S/R/D records, payloads beside it
//! dataset.json                counts and manifest hash
//! pairs/train_windows.jsonl   labeled training windows
//! pairs/held_out_windows.jsonl
//! pairs/stage1.jsonl          ranked pairs (indices into train windows)
//! pairs/stage2.jsonl
//! pairs/held_out.jsonl        ranked pairs (indices into held-out windows)
//! checkpoints/stage{n}_epoch{e:03}.ckpt
//! model.ckpt                  final quality net
//! train_report.json
//! evaluate/rd/<group>__<clip>.csv   RD points per α, vs R and vs S
//! evaluate/bd_rate.csv, complexity.csv, rd_<group>.svg
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::codec::{self, BaseLoss, EncodeSettings, InrConfig, LossMixer, RdSweep, METRIC_VS_SOURCE};
use crate::degrade::{
    build_corpus, manifest_hash, read_manifest, write_manifest, DegraderKind, DegraderSpec, ExternalEncoderConfig,
    Role, TranscodeRecord, MAX_QP, STAGE1_QPS, STAGE2_QPS,
};
use crate::eval::{bd_rate, emit_report, BdRow, ComplexityRow, RDCurve, RefGroup, ReportInputs};
use crate::media_io::{load_clip_as, ClipFormat, ColorRequest, PatchShape, VideoClip};
use crate::net::{count_complexity, NetConfig, QualityNet};
use crate::sampler::{
    build_ranking_data, load_chains, materialize, ranked_descriptors, read_jsonl, rebuild_ranked, write_jsonl,
    PairDescriptor, ProxyMetric, RankedDescriptor, SamplerConfig, VmafAdapter,
};
use crate::synth::{synthetic_sources, SynthSpec};
use crate::train::{evaluate_ranking, train_stage, EpochProgress, Stage, TrainConfig, TrainReport};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MISSING: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

pub const LOCK_FILE: &str = ".ptloss.lock";

/// Named seeds. Every random draw in a run descends from one of these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub corpus: u64,
    pub sampler: u64,
    pub net_init: u64,
    pub train: u64,
    pub codec: u64,
}

impl Seeds {
    fn all(n: u64) -> Seeds {
        Seeds {
            corpus: n,
            sampler: n,
            net_init: n,
            train: n,
            codec: n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSources {
    pub count: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2Grid {
    pub kind: DegraderKind,
    pub qps: Vec<u8>,
    #[serde(default)]
    pub encoder_name: Option<String>,
}

impl Default for Stage2Grid {
    fn default() -> Self {
        Stage2Grid {
            kind: DegraderKind::SyntheticDct,
            qps: STAGE2_QPS.to_vec(),
            encoder_name: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Procedural sources; ignored when `source_paths` is nonempty.
    pub synthetic: Option<SyntheticSources>,
    /// Y4M files or PNG frame directories.
    pub source_paths: Vec<PathBuf>,
    pub stage1_qps: Vec<u8>,
    pub stage2: Stage2Grid,
    pub external: ExternalEncoderConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            synthetic: Some(SyntheticSources {
                count: 8,
                frames: 8,
                height: 96,
                width: 96,
            }),
            source_paths: Vec::new(),
            stage1_qps: STAGE1_QPS.to_vec(),
            stage2: Stage2Grid::default(),
            external: ExternalEncoderConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    pub grid: Vec<InrConfig>,
    pub alphas: Vec<f64>,
    pub base_loss: BaseLoss,
    pub encode: EncodeSettings,
    /// Encode seeds; quality is averaged over them.
    pub seeds: Vec<u64>,
    /// Sources evaluated (the last ones in sorted id order).
    pub eval_sources: usize,
    /// Stage-1 QPs whose references are encoded; empty means all.
    pub reference_qps: Vec<u8>,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            grid: codec::default_size_grid(),
            alphas: codec::ALPHA_GRID.to_vec(),
            base_loss: BaseLoss::Mse,
            encode: EncodeSettings::default(),
            seeds: vec![0],
            eval_sources: 3,
            reference_qps: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub seeds: Seeds,
    #[serde(default)]
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub net: NetConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub codec: CodecConfig,
    /// Proxy metrics; the first one labels training pairs.
    #[serde(default = "default_metrics")]
    pub metrics: Vec<String>,
    #[serde(default)]
    pub vmaf: Option<VmafAdapter>,
}

fn default_metrics() -> Vec<String> {
    vec!["psnr".into()]
}

fn field_err(path: &str, msg: impl std::fmt::Display) -> Error {
    Error::InvalidArgument(format!("{path}: {msg}"))
}

impl ExperimentConfig {
    /// Checks values and referenced paths; the message names the field.
    pub fn validate(&self) -> Result<()> {
        if self.output_dir.as_os_str().is_empty() {
            return Err(field_err("output_dir", "must not be empty"));
        }
        let c = &self.corpus;
        if c.stage1_qps.is_empty() {
            return Err(field_err("corpus.stage1_qps", "must not be empty"));
        }
        for (i, &qp) in c.stage1_qps.iter().enumerate() {
            if qp > MAX_QP {
                return Err(field_err(&format!("corpus.stage1_qps[{i}]"), format!("qp {qp} exceeds {MAX_QP}")));
            }
        }
        if c.stage2.qps.is_empty() {
            return Err(field_err("corpus.stage2.qps", "must not be empty"));
        }
        for (i, &qp) in c.stage2.qps.iter().enumerate() {
            if qp > MAX_QP {
                return Err(field_err(&format!("corpus.stage2.qps[{i}]"), format!("qp {qp} exceeds {MAX_QP}")));
            }
        }
        if c.stage2.kind == DegraderKind::ExternalEncoder && c.stage2.encoder_name.is_none() {
            return Err(field_err("corpus.stage2.encoder_name", "required for external-encoder"));
        }
        if c.source_paths.is_empty() {
            match &c.synthetic {
                None => return Err(field_err("corpus", "needs `synthetic` or `source_paths`")),
                Some(s) if s.count == 0 || s.frames == 0 || s.height < 8 || s.width < 8 => {
                    return Err(field_err("corpus.synthetic", "count/frames must be positive and frames at least 8x8"))
                }
                _ => {}
            }
        }
        for (i, p) in c.source_paths.iter().enumerate() {
            if !p.exists() {
                return Err(field_err(&format!("corpus.source_paths[{i}]"), format!("{} does not exist", p.display())));
            }
        }
        self.sampler
            .patch_shape
            .validate()
            .map_err(|e| field_err("sampler.patch_shape", e))?;
        if self.sampler.tau < 0.0 {
            return Err(field_err("sampler.tau", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.sampler.cross_ratio) {
            return Err(field_err("sampler.cross_ratio", "must lie in [0, 1]"));
        }
        if self.sampler.held_out_frames > 0 && self.sampler.held_out_sources > 0 {
            return Err(field_err("sampler.held_out_frames", "cannot be combined with held_out_sources"));
        }
        if self.sampler.windows_per_chain == 0 {
            return Err(field_err("sampler.windows_per_chain", "must be positive"));
        }
        self.net.validate().map_err(|e| field_err("net", e))?;
        let div = 1usize << self.net.levels();
        let ps = self.sampler.patch_shape;
        if ps.h % div != 0 || ps.w % div != 0 {
            return Err(field_err("sampler.patch_shape", format!("height and width must be divisible by {div}")));
        }
        self.train.validate().map_err(|e| field_err("train", e))?;
        if self.metrics.is_empty() {
            return Err(field_err("metrics", "must name at least one metric"));
        }
        for (i, m) in self.metrics.iter().enumerate() {
            if !["psnr", "vmaf"].contains(&m.as_str()) {
                return Err(field_err(&format!("metrics[{i}]"), format!("unknown metric `{m}`")));
            }
            if m == "vmaf" && self.vmaf.is_none() {
                return Err(field_err(&format!("metrics[{i}]"), "vmaf needs the `vmaf` adapter block"));
            }
        }
        let k = &self.codec;
        if k.grid.len() < 3 {
            return Err(field_err("codec.grid", "needs at least 3 sizes"));
        }
        for (i, g) in k.grid.iter().enumerate() {
            g.validate().map_err(|e| field_err(&format!("codec.grid[{i}]"), e))?;
        }
        if k.alphas.is_empty() || k.alphas[0] != 0.0 {
            return Err(field_err("codec.alphas", "must start with the 0.0 anchor"));
        }
        for (i, a) in k.alphas.iter().enumerate() {
            if !(0.0..=1.0).contains(a) {
                return Err(field_err(&format!("codec.alphas[{i}]"), "must lie in [0, 1]"));
            }
        }
        if k.seeds.is_empty() {
            return Err(field_err("codec.seeds", "must not be empty"));
        }
        if k.eval_sources == 0 {
            return Err(field_err("codec.eval_sources", "must be positive"));
        }
        for (i, qp) in k.reference_qps.iter().enumerate() {
            if !c.stage1_qps.contains(qp) {
                return Err(field_err(&format!("codec.reference_qps[{i}]"), format!("{qp} is not a stage-1 QP")));
            }
        }
        if k.encode.steps == 0 || !(k.encode.learning_rate > 0.0) {
            return Err(field_err("codec.encode", "steps and learning_rate must be positive"));
        }
        Ok(())
    }

    /// Per-module configs with the named seeds filled in.
    fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            seed: self.seeds.sampler,
            metric: self.metrics[0].clone(),
            ..self.sampler.clone()
        }
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seeds.train,
            checkpoint_dir: Some(self.output_dir.join("checkpoints")),
            tau: self.sampler.tau,
            cross_ratio: self.sampler.cross_ratio,
            ..self.train.clone()
        }
    }
}

/// Applies a dotted `key=value` override to a JSON tree. Segments may carry
/// one index (`corpus.stage1_qps[0]=30`). Values parse as JSON, falling back
/// to a plain string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::InvalidArgument(format!("--set expects key=value, got `{assignment}`")))?;
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let segments: Vec<&str> = key.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        let (name, index) = match seg.split_once('[') {
            Some((n, rest)) => {
                let idx: usize = rest
                    .strip_suffix(']')
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::InvalidArgument(format!("bad index in `{key}`")))?;
                (n, Some(idx))
            }
            None => (*seg, None),
        };
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::InvalidArgument(format!("`{key}`: `{name}` is not inside an object")))?;
        if last && index.is_none() {
            obj.insert(name.to_string(), value);
            return Ok(());
        }
        let child = obj
            .entry(name.to_string())
            .or_insert_with(|| if index.is_some() { Value::Array(Vec::new()) } else { Value::Object(Default::default()) });
        node = match index {
            Some(idx) => {
                let arr = child
                    .as_array_mut()
                    .ok_or_else(|| Error::InvalidArgument(format!("`{key}`: `{name}` is not an array")))?;
                let len = arr.len();
                let slot = arr
                    .get_mut(idx)
                    .ok_or_else(|| Error::InvalidArgument(format!("`{key}`: index {idx} outside array of {len}")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            None => child,
        };
    }
    Ok(())
}

/// Reads, overrides and validates a config.
pub fn load_config(path: &Path, sets: &[String], seed_override: Option<u64>) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut tree: Value = serde_json::from_str(&text)?;
    for s in sets {
        apply_override(&mut tree, s)?;
    }
    let mut cfg: ExperimentConfig = serde_json::from_value(tree)?;
    if let Some(n) = seed_override {
        cfg.seeds = Seeds::all(n);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Held for the duration of a command; rejects a second process on the
/// same output directory.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<RunLock> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Precondition(format!(
                "{} exists; another ptloss run is using this output directory",
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// A failure with its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub error: Error,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error.fmt(f)
    }
}

fn classify(error: Error) -> CliError {
    let code = match &error {
        Error::InvalidArgument(_) | Error::Json(_) | Error::Precondition(_) | Error::UnknownMetric(_) => EXIT_CONFIG,
        Error::Numerical(_) => EXIT_NUMERICAL,
        _ => EXIT_FAILURE,
    };
    CliError { code, error }
}

fn missing(path: &Path, what: &str) -> CliError {
    CliError {
        code: EXIT_MISSING,
        error: Error::Precondition(format!("{what} not found at {}; run the earlier command first", path.display())),
    }
}

fn require(path: PathBuf, what: &str) -> std::result::Result<PathBuf, CliError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(missing(&path, what))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn corpus_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("corpus")
}

fn manifest_path(cfg: &ExperimentConfig) -> PathBuf {
    corpus_dir(cfg).join("manifest.json")
}

fn pairs_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("pairs")
}

fn model_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("model.ckpt")
}

fn eval_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("evaluate")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub records: usize,
    pub manifest_sha256: String,
    pub metric: String,
    pub train_windows: usize,
    pub held_out_windows: usize,
    pub stage1_pairs: usize,
    pub stage2_pairs: usize,
    pub held_out_pairs: usize,
}

fn load_sources(cfg: &ExperimentConfig) -> Result<Vec<VideoClip>> {
    let c = &cfg.corpus;
    if c.source_paths.is_empty() {
        let s = c.synthetic.as_ref().expect("validated");
        let spec = SynthSpec {
            frames: s.frames,
            height: s.height,
            width: s.width,
            detail: None,
        };
        return synthetic_sources("src", s.count, &spec, cfg.seeds.corpus);
    }
    c.source_paths
        .iter()
        .map(|p| load_clip_as(p, ClipFormat::infer(p), ColorRequest::Luma))
        .collect()
}

fn proxy_metric(cfg: &ExperimentConfig) -> Result<ProxyMetric> {
    ProxyMetric::from_id(&cfg.metrics[0], cfg.vmaf.clone())
}

/// S → R → D corpus, labeled windows and ranked pairs.
pub fn cmd_dataset(cfg: &ExperimentConfig) -> Result<DatasetSummary> {
    let sources = load_sources(cfg)?;
    let specs: Vec<DegraderSpec> = cfg
        .corpus
        .stage2
        .qps
        .iter()
        .map(|&qp| match cfg.corpus.stage2.kind {
            DegraderKind::SyntheticDct => DegraderSpec::synthetic(qp),
            DegraderKind::ExternalEncoder => {
                DegraderSpec::external(cfg.corpus.stage2.encoder_name.clone().expect("validated"), qp)
            }
        })
        .collect();
    let dir = corpus_dir(cfg);
    let records = build_corpus(&sources, &cfg.corpus.stage1_qps, &specs, &dir, &cfg.corpus.external)?;
    write_manifest(&records, &manifest_path(cfg))?;

    let chains = load_chains(&records, &dir)?;
    let data = build_ranking_data(&chains, &cfg.sampler_config(), &proxy_metric(cfg)?)?;
    let pdir = pairs_dir(cfg);
    fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
    write_jsonl(&pdir.join("train_windows.jsonl"), data.train_pool.iter().map(|p| p.descriptor()))?;
    write_jsonl(&pdir.join("held_out_windows.jsonl"), data.held_out_pool.iter().map(|p| p.descriptor()))?;
    write_jsonl(&pdir.join("stage1.jsonl"), ranked_descriptors(&data.stage1))?;
    write_jsonl(&pdir.join("stage2.jsonl"), ranked_descriptors(&data.stage2))?;
    write_jsonl(&pdir.join("held_out.jsonl"), ranked_descriptors(&data.held_out))?;

    let summary = DatasetSummary {
        records: records.len(),
        manifest_sha256: manifest_hash(&records),
        metric: cfg.metrics[0].clone(),
        train_windows: data.train_pool.len(),
        held_out_windows: data.held_out_pool.len(),
        stage1_pairs: data.stage1.len(),
        stage2_pairs: data.stage2.len(),
        held_out_pairs: data.held_out.len(),
    };
    write_json(&cfg.output_dir.join("dataset.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub stage1: Option<TrainReport>,
    pub stage2: TrainReport,
    pub untrained_held_out_accuracy: Option<f64>,
    pub checkpoint: PathBuf,
}

/// Training pairs rebuilt from the dataset files.
pub struct LoadedPairs {
    pub stage1: Vec<crate::sampler::RankedPair>,
    pub stage2: Vec<crate::sampler::RankedPair>,
    pub held_out: Vec<crate::sampler::RankedPair>,
}

fn load_pairs(cfg: &ExperimentConfig) -> std::result::Result<LoadedPairs, CliError> {
    let manifest = require(manifest_path(cfg), "corpus manifest")?;
    let pdir = pairs_dir(cfg);
    let files = ["train_windows", "held_out_windows", "stage1", "stage2", "held_out"]
        .map(|n| pdir.join(format!("{n}.jsonl")));
    for f in &files {
        require(f.clone(), "pair file")?;
    }
    let go = || -> Result<LoadedPairs> {
        let records = read_manifest(&manifest)?;
        let base = corpus_dir(cfg);
        let train: Vec<PairDescriptor> = read_jsonl(&files[0])?;
        let held: Vec<PairDescriptor> = read_jsonl(&files[1])?;
        let train_pool = materialize(&train, &records, &base)?;
        let held_pool = materialize(&held, &records, &base)?;
        let ranked = |i: usize| -> Result<Vec<RankedDescriptor>> { read_jsonl(&files[i]) };
        let held_src = if held_pool.is_empty() { &train_pool } else { &held_pool };
        Ok(LoadedPairs {
            stage1: rebuild_ranked(&ranked(2)?, &train_pool)?,
            stage2: rebuild_ranked(&ranked(3)?, &train_pool)?,
            held_out: rebuild_ranked(&ranked(4)?, held_src)?,
        })
    };
    go().map_err(classify)
}

/// Stage 1 then stage 2, or stage 2 alone from `resume_stage2`. Progress is
/// passed to `on_epoch` once per epoch.
pub fn cmd_train(
    cfg: &ExperimentConfig,
    resume_stage2: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochProgress),
) -> std::result::Result<TrainSummary, CliError> {
    let pairs = load_pairs(cfg)?;
    if let Some(p) = resume_stage2 {
        require(p.to_path_buf(), "stage-1 checkpoint")?;
    }
    let mut go = || -> Result<TrainSummary> {
        let tcfg = train_config_checked(cfg)?;
        let held = (!pairs.held_out.is_empty()).then_some(pairs.held_out.as_slice());
        let (net, stage1, untrained) = match resume_stage2 {
            Some(p) => (QualityNet::load(p)?.0, None, None),
            None => {
                let net = QualityNet::new(&cfg.net, cfg.seeds.net_init)?;
                let untrained = match held {
                    Some(h) => Some(evaluate_ranking(&net, h, None)?.accuracy),
                    None => None,
                };
                let (net, r) = train_stage(net, &pairs.stage1, &tcfg, Stage::One, held, on_epoch)?;
                (net, Some(r), untrained)
            }
        };
        let (net, stage2) = train_stage(net, &pairs.stage2, &tcfg, Stage::Two, held, on_epoch)?;
        let checkpoint = model_path(cfg);
        net.save(&checkpoint, serde_json::json!({ "seeds": cfg.seeds, "train": tcfg }))?;
        let summary = TrainSummary {
            stage1,
            stage2,
            untrained_held_out_accuracy: untrained,
            checkpoint,
        };
        write_json(&cfg.output_dir.join("train_report.json"), &summary)?;
        Ok(summary)
    };
    go().map_err(classify)
}

fn train_config_checked(cfg: &ExperimentConfig) -> Result<TrainConfig> {
    let t = cfg.train_config();
    t.validate()?;
    Ok(t)
}

/// One encoded reference inside `evaluate`.
#[derive(Debug, Clone)]
pub struct ClipSweeps {
    pub group: RefGroup,
    pub clip_id: String,
    pub sweeps: Vec<RdSweep>,
}

fn rd_file_name(group: RefGroup, clip_id: &str) -> String {
    format!("{}__{clip_id}.csv", group.as_str().to_lowercase())
}

/// References to encode: stage-1 outputs of the last `eval_sources` sources.
fn eval_references(cfg: &ExperimentConfig, records: &[TranscodeRecord]) -> Vec<(TranscodeRecord, TranscodeRecord, u8)> {
    let mut sources: Vec<&TranscodeRecord> = records.iter().filter(|r| r.role == Role::S).collect();
    sources.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
    let keep = sources.len().saturating_sub(cfg.codec.eval_sources);
    let qps = if cfg.codec.reference_qps.is_empty() {
        &cfg.corpus.stage1_qps
    } else {
        &cfg.codec.reference_qps
    };
    let mut out = Vec::new();
    for s in &sources[keep..] {
        for r in records.iter().filter(|r| r.role == Role::R && r.parent_id.as_deref() == Some(&s.clip_id)) {
            let qp = r.spec.as_ref().map(|x| x.qp).unwrap_or(0);
            if qps.contains(&qp) {
                out.push(((*s).clone(), r.clone(), qp));
            }
        }
    }
    out
}

/// RD sweeps for every evaluated reference and every α, then the report.
pub fn cmd_evaluate(cfg: &ExperimentConfig) -> std::result::Result<Vec<PathBuf>, CliError> {
    let manifest = require(manifest_path(cfg), "corpus manifest")?;
    let model = require(model_path(cfg), "trained model checkpoint")?;
    let go = || -> Result<Vec<PathBuf>> {
        let records = read_manifest(&manifest)?;
        let (net, _) = QualityNet::load(&model)?;
        let base = corpus_dir(cfg);
        let rd_dir = eval_dir(cfg).join("rd");
        fs::create_dir_all(&rd_dir).map_err(|e| Error::io(&rd_dir, e))?;
        let encode = EncodeSettings {
            seed: cfg.seeds.codec,
            ..cfg.codec.encode.clone()
        };
        for (s, r, qp) in eval_references(cfg, &records) {
            let load = |rec: &TranscodeRecord| {
                let p = base.join(&rec.path);
                load_clip_as(&p, ClipFormat::infer(&p), ColorRequest::Luma)
            };
            let (src, reference) = (load(&s)?, load(&r)?);
            let mut curves = Vec::new();
            for &alpha in &cfg.codec.alphas {
                let mixer = LossMixer::new(alpha, cfg.codec.base_loss)?;
                let seeds: Vec<u64> = cfg.codec.seeds.iter().map(|k| k ^ cfg.seeds.codec).collect();
                let sweep = codec::rd_sweep(&reference, Some(&src), &cfg.codec.grid, &mixer, &encode, Some(&net), &seeds)?;
                log::info!("encoded {} at alpha {alpha}", r.clip_id);
                curves.push(sweep.vs_reference);
                curves.extend(sweep.vs_source);
            }
            codec::write_rd_csv(&rd_dir.join(rd_file_name(RefGroup::from_stage1_qp(qp), &r.clip_id)), &curves)?;
        }
        build_report(cfg)
    };
    go().map_err(classify)
}

/// Rebuilds BD-rate rows, complexity rows and plots from stored RD files.
pub fn build_report(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let rd_dir = eval_dir(cfg).join("rd");
    let mut files: Vec<PathBuf> = fs::read_dir(&rd_dir)
        .map_err(|e| Error::io(&rd_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    let mut inputs = ReportInputs::default();
    let mut per_group: std::collections::BTreeMap<(RefGroup, String), Vec<f64>> = Default::default();
    for f in &files {
        let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let (g, clip) = stem
            .split_once("__")
            .ok_or_else(|| Error::InvalidArgument(format!("unexpected RD file name {}", f.display())))?;
        let group = RefGroup::parse(&capitalize(g))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown group `{g}` in {}", f.display())))?;
        let curves: Vec<RDCurve> = codec::read_rd_csv(f)?
            .into_iter()
            .filter(|c| c.metric_id() == METRIC_VS_SOURCE)
            .collect();
        let Some(anchor) = curves.iter().find(|c| c.points[0].alpha == 0.0) else {
            continue;
        };
        for c in &curves {
            let alpha = c.points[0].alpha;
            inputs.curves.push((
                group,
                RDCurve {
                    label: format!("{clip} a={alpha:.2}"),
                    points: c.points.clone(),
                },
            ));
            if alpha == 0.0 {
                continue;
            }
            match bd_rate(anchor, c) {
                Ok(r) => {
                    let label = format!("{}@{alpha:.2}", codec::CODEC_ID);
                    per_group.entry((group, label.clone())).or_default().push(r.bd_rate_percent);
                    per_group.entry((RefGroup::Overall, label.clone())).or_default().push(r.bd_rate_percent);
                    inputs.bd_rows.push(BdRow::new(group, format!("{label} {clip}"), format!("{}@0.00", codec::CODEC_ID), &r));
                }
                Err(e) => log::warn!("{clip} alpha {alpha}: BD-rate skipped: {e}"),
            }
        }
    }
    for ((group, label), v) in per_group {
        inputs.bd_rows.push(BdRow {
            group,
            label: format!("{label} mean"),
            anchor: format!("{}@0.00", codec::CODEC_ID),
            metric_id: METRIC_VS_SOURCE.into(),
            bd_rate_percent: v.iter().sum::<f64>() / v.len() as f64,
            overlap_lo: f64::NAN,
            overlap_hi: f64::NAN,
        });
    }
    inputs.complexity = complexity_rows(cfg);
    emit_report(&inputs, &eval_dir(cfg))
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default()
}

/// Encoder cost with and without the PT term, counted in MACs per step.
pub fn complexity_rows(cfg: &ExperimentConfig) -> Vec<ComplexityRow> {
    let e = &cfg.codec.encode;
    let (t, h, w) = match &cfg.corpus.synthetic {
        Some(s) if cfg.corpus.source_paths.is_empty() => (s.frames, s.height, s.width),
        _ => (e.pt_window.t, e.pt_window.h, e.pt_window.w),
    };
    let pixels = (t * h * w) as u64;
    let pt = count_complexity(&cfg.net, PatchShape::new(e.pt_window.t, e.pt_window.h, e.pt_window.w));
    let full = count_complexity(&cfg.net, PatchShape::FULL);
    let mut rows = vec![ComplexityRow {
        name: "pt_net@256x256x12".into(),
        macs: full.macs,
        params: full.params,
        relative_encode_time: f64::NAN,
    }];
    for g in &cfg.codec.grid {
        let mlp: u64 = {
            let dims = [(g.input_dim(), g.hidden)]
                .into_iter()
                .chain((1..g.depth).map(|_| (g.hidden, g.hidden)))
                .chain([(g.hidden, 1)]);
            dims.map(|(i, o)| (i * o) as u64).sum()
        };
        // Forward plus two backward products per layer.
        let base = 3 * pixels * mlp;
        // Distorted branch forward and backward; the reference side is cached.
        let extra = e.pt_windows as u64 * 3 * (pt.macs / 2);
        rows.push(ComplexityRow {
            name: format!("{}+pt h{}", codec::CODEC_ID, g.hidden),
            macs: base + extra,
            params: pt.params,
            relative_encode_time: 100.0 * (base + extra) as f64 / base as f64,
        });
    }
    rows
}

#[derive(Parser, Debug)]
#[command(name = "ptloss", about = "Perceptual transcoding loss toolkit", version)]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct CommonArgs {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `train.learning_rate=0.001`. Repeatable.
    #[arg(long = "set", value_name = "K=V", global = true)]
    pub sets: Vec<String>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Replaces every named seed with this value.
    #[arg(long, global = true)]
    pub seed_override: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build the S/R/D corpus, label windows and draw ranked pairs.
    Dataset,
    /// Train the quality net (stage 1 then stage 2).
    Train {
        /// Skip stage 1 and fine-tune this checkpoint.
        #[arg(long, value_name = "CKPT")]
        resume_stage2: Option<PathBuf>,
    },
    /// Run RD sweeps over the α grid and write the report.
    Evaluate,
    /// Rebuild the report from stored RD files.
    Report,
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

fn dispatch(cli: Cli) -> std::result::Result<(), CliError> {
    let config_path = cli.common.config.clone().ok_or_else(|| CliError {
        code: EXIT_CONFIG,
        error: Error::InvalidArgument("--config is required".into()),
    })?;
    if !config_path.exists() {
        return Err(CliError {
            code: EXIT_CONFIG,
            error: Error::InvalidArgument(format!("config {} does not exist", config_path.display())),
        });
    }
    let cfg = load_config(&config_path, &cli.common.sets, cli.common.seed_override).map_err(|e| CliError {
        code: EXIT_CONFIG,
        error: e,
    })?;
    if let Some(n) = cli.common.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| classify(Error::InvalidArgument(format!("--jobs: {e}"))))?;
    }
    let _lock = RunLock::acquire(&cfg.output_dir).map_err(classify)?;
    match cli.command {
        Command::Dataset => {
            let s = cmd_dataset(&cfg).map_err(classify)?;
            println!(
                "{} records, {} + {} windows, {} stage-1 / {} stage-2 / {} held-out pairs, manifest {}",
                s.records,
                s.train_windows,
                s.held_out_windows,
                s.stage1_pairs,
                s.stage2_pairs,
                s.held_out_pairs,
                &s.manifest_sha256[..16]
            );
        }
        Command::Train { resume_stage2 } => {
            let mut progress = |e: &EpochProgress| {
                println!("{}", serde_json::to_string(e).expect("progress serializes"));
            };
            let s = cmd_train(&cfg, resume_stage2.as_deref(), &mut progress)?;
            if let Some(h) = &s.stage2.held_out {
                println!("held-out accuracy {:.4}", h.accuracy);
            }
            println!("{}", s.checkpoint.display());
        }
        Command::Evaluate => {
            for p in cmd_evaluate(&cfg)? {
                println!("{}", p.display());
            }
        }
        Command::Report => {
            require(eval_dir(&cfg).join("rd"), "RD files")?;
            for p in build_report(&cfg).map_err(classify)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

/// Entry point for the binary.
pub fn main_from_args() -> i32 {
    match Cli::try_parse() {
        Ok(cli) => run(cli),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                EXIT_CONFIG
            } else {
                EXIT_OK
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn minimal(dir: &Path) -> Value {
        json!({
            "output_dir": dir,
            "seeds": {"corpus": 1, "sampler": 2, "net_init": 3, "train": 4, "codec": 5},
            "corpus": {"synthetic": {"count": 3, "frames": 4, "height": 32, "width": 32},
                       "stage1_qps": [30, 42], "stage2": {"kind": "synthetic-dct", "qps": [32, 40]}},
            "sampler": {"patch_shape": {"t": 2, "h": 16, "w": 16}, "windows_per_chain": 3,
                        "stage1_pairs": 30, "stage2_pairs": 10, "held_out_pairs": 10, "held_out_sources": 1},
            "net": {"channels": [2, 3], "state_dim": 2, "head_hidden": 4},
            "train": {"epochs_stage1": 1, "epochs_stage2": 1, "learning_rate": 0.001},
            "codec": {"grid": [{"hidden": 4, "depth": 1, "freqs": 2, "weight_bits": 8},
                               {"hidden": 8, "depth": 1, "freqs": 2, "weight_bits": 8},
                               {"hidden": 12, "depth": 1, "freqs": 2, "weight_bits": 8}],
                      "alphas": [0.0, 0.2], "eval_sources": 1, "reference_qps": [42],
                      "encode": {"steps": 30, "pt_windows": 1, "pt_window": {"t": 2, "h": 16, "w": 16}}}
        })
    }

    fn write_cfg(dir: &Path, name: &str, v: &Value) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, serde_json::to_vec(v).unwrap()).unwrap();
        p
    }

    #[test]
    fn overrides_follow_dotted_paths() {
        let mut v = json!({"a": {"b": [1, 2]}, "c": 1});
        apply_override(&mut v, "a.b[1]=7").unwrap();
        apply_override(&mut v, "c=\"x\"").unwrap();
        apply_override(&mut v, "d.e=0.5").unwrap();
        apply_override(&mut v, "f=plain").unwrap();
        assert_eq!(v, json!({"a": {"b": [1, 7]}, "c": "x", "d": {"e": 0.5}, "f": "plain"}));
        assert!(apply_override(&mut v, "a.b[5]=1").is_err());
        assert!(apply_override(&mut v, "novalue").is_err());
    }

    #[test]
    fn validation_names_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_cfg(dir.path(), "cfg.json", &minimal(&dir.path().join("out")));
        let err = load_config(&p, &["corpus.stage1_qps[0]=99".into()], None).unwrap_err();
        assert!(err.to_string().contains("corpus.stage1_qps[0]"), "{err}");
        let err = load_config(&p, &["codec.alphas=[0.2]".into()], None).unwrap_err();
        assert!(err.to_string().contains("codec.alphas"), "{err}");
        let mut v = minimal(dir.path());
        v.as_object_mut().unwrap().remove("seeds");
        let p2 = write_cfg(dir.path(), "no_seeds.json", &v);
        assert!(load_config(&p2, &[], None).is_err());
        let cfg = load_config(&p, &[], Some(9)).unwrap();
        assert_eq!(cfg.seeds, Seeds::all(9));
    }

    #[test]
    fn lock_rejects_a_second_holder() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunLock::acquire(dir.path()).unwrap();
        assert!(matches!(RunLock::acquire(dir.path()), Err(Error::Precondition(_))));
        drop(a);
        assert!(RunLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn commands_chain_and_report_missing_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let cfg: ExperimentConfig = serde_json::from_value(minimal(&out)).unwrap();
        cfg.validate().unwrap();

        assert_eq!(cmd_train(&cfg, None, &mut |_| {}).unwrap_err().code, EXIT_MISSING);
        assert_eq!(cmd_evaluate(&cfg).unwrap_err().code, EXIT_MISSING);

        let s = cmd_dataset(&cfg).unwrap();
        assert_eq!(s.records, crate::degrade::expected_record_count(3, 2, 2));
        assert_eq!(s.stage1_pairs, 30);

        let mut epochs = 0;
        let t = cmd_train(&cfg, None, &mut |_| epochs += 1).unwrap();
        assert_eq!(epochs, 2);
        assert!(QualityNet::load(&t.checkpoint).is_ok());

        let ckpt = out.join("checkpoints").join("stage1_epoch000.ckpt");
        let resumed = cmd_train(&cfg, Some(&ckpt), &mut |_| {}).unwrap();
        assert!(resumed.stage1.is_none());

        let written = cmd_evaluate(&cfg).unwrap();
        assert!(written.iter().any(|p| p.ends_with("bd_rate.csv")));
        let rows = crate::eval::read_bd_csv(&eval_dir(&cfg).join("bd_rate.csv")).unwrap();
        // One clip (a Low reference), one non-anchor α, plus the Low and Overall means.
        assert_eq!(rows.len(), 3, "{rows:?}");
    }
}
