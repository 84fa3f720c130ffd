//! Co-located R/D/S patch triples, proxy labels measured against the
//! pristine source, and ranked pair assembly.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::degrade::{hex_digest, Role, TranscodeRecord};
use crate::error::{Error, Result};
use crate::eval::psnr_u8;
use crate::media_io::{self, ClipFormat, ColorRequest, Patch, PatchShape, VideoClip};

/// Default confidence threshold on label differences.
pub const DEFAULT_TAU: f64 = 6.0;
pub const DEFAULT_CROSS_RATIO: f64 = 0.2;
/// PSNR range mapped onto `[0, 100]`.
pub const PSNR_FLOOR_DB: f64 = 20.0;
pub const PSNR_CEIL_DB: f64 = 50.0;

/// Mixes a base seed with a label so independent streams stay reproducible.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let digest = hex_digest(format!("{seed}:{label}").as_bytes());
    u64::from_str_radix(&digest[..16], 16).expect("hex digest")
}

/// One S → R → D lineage with all three clips loaded.
#[derive(Debug, Clone)]
pub struct ClipChain {
    pub source: Arc<VideoClip>,
    pub reference: Arc<VideoClip>,
    pub distorted: Arc<VideoClip>,
    /// Stage-1 QP of the reference, when known.
    pub reference_qp: Option<u8>,
}

impl ClipChain {
    pub fn new(source: VideoClip, reference: VideoClip, distorted: VideoClip) -> Self {
        ClipChain {
            source: Arc::new(source),
            reference: Arc::new(reference),
            distorted: Arc::new(distorted),
            reference_qp: None,
        }
    }

    pub fn source_id(&self) -> &str {
        &self.source.clip_id
    }
}

/// Every (S, R, D) lineage in a manifest, in manifest order of the D records.
pub fn manifest_chains(records: &[TranscodeRecord]) -> Result<Vec<(TranscodeRecord, TranscodeRecord, TranscodeRecord)>> {
    let by_id: HashMap<&str, &TranscodeRecord> = records.iter().map(|r| (r.clip_id.as_str(), r)).collect();
    let mut out = Vec::new();
    for d in records.iter().filter(|r| r.role == Role::D) {
        let r = d
            .parent_id
            .as_deref()
            .and_then(|p| by_id.get(p))
            .filter(|r| r.role == Role::R)
            .ok_or_else(|| Error::Lineage(format!("`{}` has no R parent", d.clip_id)))?;
        let s = by_id
            .get(d.source_id.as_str())
            .filter(|s| s.role == Role::S)
            .ok_or_else(|| Error::Lineage(format!("`{}` has no source", d.clip_id)))?;
        out.push(((*s).clone(), (*r).clone(), d.clone()));
    }
    Ok(out)
}

/// Loads every chain of a manifest as luma clips, sharing S and R clips
/// between chains.
pub fn load_chains(records: &[TranscodeRecord], base_dir: &Path) -> Result<Vec<ClipChain>> {
    let mut cache: HashMap<String, Arc<VideoClip>> = HashMap::new();
    let mut load = |rec: &TranscodeRecord| -> Result<Arc<VideoClip>> {
        if let Some(c) = cache.get(&rec.clip_id) {
            return Ok(c.clone());
        }
        let path = base_dir.join(&rec.path);
        let clip = Arc::new(media_io::load_clip_as(&path, ClipFormat::infer(&path), ColorRequest::Luma)?.with_id(rec.clip_id.clone()));
        cache.insert(rec.clip_id.clone(), clip.clone());
        Ok(clip)
    };
    let mut out = Vec::new();
    for (s, r, d) in manifest_chains(records)? {
        out.push(ClipChain {
            source: load(&s)?,
            reference: load(&r)?,
            distorted: load(&d)?,
            reference_qp: r.spec.as_ref().map(|sp| sp.qp),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub ref_patch: Patch,
    pub dist_patch: Patch,
    /// Pristine window; only needed for labeling.
    pub src_patch: Option<Patch>,
    pub q: Option<f64>,
    pub source_id: String,
}

impl PatchPair {
    pub fn label(&self) -> Result<f64> {
        self.q
            .ok_or_else(|| Error::Precondition(format!("pair from `{}` is unlabeled", self.dist_patch.origin.clip_id)))
    }

    /// Stable identity of the window, independent of labels.
    pub fn origin_hash(&self) -> String {
        let o = &self.dist_patch.origin;
        let s = self.dist_patch.shape;
        hex_digest(
            format!(
                "{}|{}|{}|{}|{}|{}|{}|{}",
                self.ref_patch.origin.clip_id, o.clip_id, o.x, o.y, o.t0, s.t, s.h, s.w
            )
            .as_bytes(),
        )
    }

    pub fn descriptor(&self) -> PairDescriptor {
        let o = &self.dist_patch.origin;
        PairDescriptor {
            source_id: self.source_id.clone(),
            ref_id: self.ref_patch.origin.clip_id.clone(),
            dist_id: o.clip_id.clone(),
            x: o.x,
            y: o.y,
            t0: o.t0,
            shape: self.dist_patch.shape,
            q: self.q,
        }
    }
}

/// Uniform in-bounds `(x, y, t0)` origins for `shape` inside a `(t, h, w)`
/// clip. The caller guarantees the shape fits.
pub fn draw_origins(dims: (usize, usize, usize), shape: PatchShape, n: usize, seed: u64) -> Vec<(usize, usize, usize)> {
    let (t, h, w) = dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let x = rng.gen_range(0..=w - shape.w);
            let y = rng.gen_range(0..=h - shape.h);
            let t0 = rng.gen_range(0..=t - shape.t);
            (x, y, t0)
        })
        .collect()
}

/// Draws `n` co-located windows uniformly over all in-bounds origins.
pub fn extract_pairs(chain: &ClipChain, n: usize, shape: PatchShape, seed: u64) -> Result<Vec<PatchPair>> {
    let t = chain.distorted.frames();
    extract_pairs_in_frames(chain, n, shape, 0..t, seed)
}

/// Like [`extract_pairs`], with every window inside the frame range `frames`.
pub fn extract_pairs_in_frames(
    chain: &ClipChain,
    n: usize,
    shape: PatchShape,
    frames: std::ops::Range<usize>,
    seed: u64,
) -> Result<Vec<PatchPair>> {
    let (_, h, w, _) = chain.distorted.dims();
    if frames.end > chain.distorted.frames() || frames.start >= frames.end {
        return Err(Error::OutOfBounds(format!(
            "frame range {frames:?} outside clip of {} frames",
            chain.distorted.frames()
        )));
    }
    let t = frames.len();
    for c in [&chain.source, &chain.reference] {
        if c.dims() != chain.distorted.dims() {
            return Err(Error::ShapeMismatch(format!(
                "chain clips `{}` and `{}` differ in size",
                c.clip_id, chain.distorted.clip_id
            )));
        }
    }
    shape.validate()?;
    if shape.t > t || shape.h > h || shape.w > w {
        return Err(Error::OutOfBounds(format!(
            "patch {}x{}x{} does not fit clip {w}x{h}x{t}",
            shape.w, shape.h, shape.t
        )));
    }
    let mut out = Vec::with_capacity(n);
    for (x, y, t0) in draw_origins((t, h, w), shape, n, seed) {
        let t0 = t0 + frames.start;
        out.push(PatchPair {
            ref_patch: Patch::crop(&chain.reference, x, y, t0, shape)?,
            dist_patch: Patch::crop(&chain.distorted, x, y, t0, shape)?,
            src_patch: Some(Patch::crop(&chain.source, x, y, t0, shape)?),
            q: None,
            source_id: chain.source_id().to_string(),
        });
    }
    Ok(out)
}

/// Maps PSNR in dB onto `[0, 100]` via the clamped affine rule.
pub fn psnr_to_label(db: f64) -> f64 {
    (db.clamp(PSNR_FLOOR_DB, PSNR_CEIL_DB) - PSNR_FLOOR_DB) / (PSNR_CEIL_DB - PSNR_FLOOR_DB) * 100.0
}

/// Runs an external VMAF tool. The template goes through `sh -c` with
/// `{ref}` and `{dist}` replaced by Y4M paths; the last number printed on
/// stdout is taken as the score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmafAdapter {
    pub command_template: String,
    pub work_dir: PathBuf,
}

impl VmafAdapter {
    fn score(&self, src: &Patch, dist: &Patch, tag: &str) -> Result<f64> {
        let as_clip = |p: &Patch, id: &str| {
            VideoClip::new(
                id,
                p.shape.t,
                p.shape.h,
                p.shape.w,
                if p.channels == 1 { media_io::ColorSpace::Luma } else { media_io::ColorSpace::Rgb },
                Default::default(),
                p.samples().to_vec(),
            )
        };
        fs::create_dir_all(&self.work_dir).map_err(|e| Error::io(&self.work_dir, e))?;
        let rp = media_io::save_clip(&as_clip(src, "src")?, &self.work_dir.join(format!("{tag}_src.y4m")), ClipFormat::Y4m)?;
        let dp = media_io::save_clip(&as_clip(dist, "dist")?, &self.work_dir.join(format!("{tag}_dist.y4m")), ClipFormat::Y4m)?;
        let cmd = self
            .command_template
            .replace("{ref}", &rp.to_string_lossy())
            .replace("{dist}", &dp.to_string_lossy());
        let out = Command::new("sh")
            .arg("-c")
            .arg(&cmd)
            .output()
            .map_err(|e| Error::EncoderUnavailable(format!("vmaf: {e}")))?;
        let _ = fs::remove_file(&rp);
        let _ = fs::remove_file(&dp);
        if !out.status.success() {
            return Err(Error::ExternalCommand(format!(
                "`{cmd}` exited with {}: {}",
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        String::from_utf8_lossy(&out.stdout)
            .split(|c: char| !(c.is_ascii_digit() || c == '.' || c == '-'))
            .filter_map(|s| s.parse::<f64>().ok())
            .last()
            .map(|v| v.clamp(0.0, 100.0))
            .ok_or_else(|| Error::ExternalCommand(format!("`{cmd}` printed no score")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProxyMetric {
    Psnr,
    Vmaf(VmafAdapter),
}

impl ProxyMetric {
    /// Resolves a metric id; `vmaf` needs an adapter.
    pub fn from_id(id: &str, vmaf: Option<VmafAdapter>) -> Result<Self> {
        match (id, vmaf) {
            ("psnr", _) => Ok(ProxyMetric::Psnr),
            ("vmaf", Some(a)) => Ok(ProxyMetric::Vmaf(a)),
            ("vmaf", None) => Err(Error::EncoderUnavailable("vmaf metric requested without a command template".into())),
            (other, _) => Err(Error::UnknownMetric(other.to_string())),
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            ProxyMetric::Psnr => "psnr",
            ProxyMetric::Vmaf(_) => "vmaf",
        }
    }
}

/// Labels every pair by comparing its distorted window with the source
/// window. The reference window is never consulted.
pub fn label_with_proxy(mut pairs: Vec<PatchPair>, metric: &ProxyMetric) -> Result<Vec<PatchPair>> {
    pairs.par_iter_mut().enumerate().try_for_each(|(i, p)| -> Result<()> {
        let src = p
            .src_patch
            .as_ref()
            .ok_or_else(|| Error::Precondition("labeling needs the source window".into()))?;
        p.q = Some(match metric {
            ProxyMetric::Psnr => psnr_to_label(psnr_u8(src.samples(), p.dist_patch.samples())),
            ProxyMetric::Vmaf(a) => a.score(src, &p.dist_patch, &format!("p{i}"))?,
        });
        Ok(())
    })?;
    Ok(pairs)
}

#[derive(Debug, Clone)]
pub struct RankedPair {
    pub a: Arc<PatchPair>,
    pub b: Arc<PatchPair>,
    /// `+1` when `a` is better.
    pub rank_label: i8,
    pub cross_source: bool,
    /// Indices of `a` and `b` in the pool they were drawn from.
    pub indices: (usize, usize),
}

impl RankedPair {
    pub fn swapped(&self) -> RankedPair {
        RankedPair {
            a: self.b.clone(),
            b: self.a.clone(),
            rank_label: -self.rank_label,
            cross_source: self.cross_source,
            indices: (self.indices.1, self.indices.0),
        }
    }
}

/// Draw budget per requested pair before giving up.
const DRAWS_PER_PAIR: usize = 200;

/// Assembles `count` distinct ranked pairs. Each slot is cross-source with
/// probability `cross_ratio`; candidates of the chosen kind are drawn until
/// one clears `tau`.
pub fn make_ranked_pairs(
    pool: &[Arc<PatchPair>],
    tau: f64,
    cross_ratio: f64,
    count: usize,
    seed: u64,
) -> Result<Vec<RankedPair>> {
    if !(0.0..=1.0).contains(&cross_ratio) {
        return Err(Error::InvalidArgument(format!("cross_ratio {cross_ratio} outside [0, 1]")));
    }
    if !(tau >= 0.0) {
        return Err(Error::InvalidArgument(format!("tau {tau} must be >= 0")));
    }
    let labels: Vec<f64> = pool.iter().map(|p| p.label()).collect::<Result<_>>()?;
    let mut by_source: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, p) in pool.iter().enumerate() {
        by_source.entry(p.source_id.as_str()).or_default().push(i);
    }
    let single_ok = by_source.values().any(|v| v.len() >= 2);
    let cross_ok = by_source.len() >= 2;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used: HashSet<(usize, usize)> = HashSet::new();
    let mut out = Vec::with_capacity(count);
    let budget = DRAWS_PER_PAIR * count.max(1) + 10_000;
    let mut draws = 0usize;
    while out.len() < count {
        let cross = rng.gen_bool(cross_ratio);
        if (cross && !cross_ok) || (!cross && !single_ok) {
            return Err(Error::InsufficientCandidates(format!(
                "pool cannot supply {} pairs",
                if cross { "cross-source" } else { "single-source" }
            )));
        }
        loop {
            draws += 1;
            if draws > budget {
                return Err(Error::InsufficientCandidates(format!(
                    "only {} of {count} pairs cleared tau = {tau} after {budget} draws",
                    out.len()
                )));
            }
            let i = rng.gen_range(0..pool.len());
            let same = &by_source[pool[i].source_id.as_str()];
            let j = if cross {
                let j = rng.gen_range(0..pool.len() - same.len());
                // Skip over the indices of i's own source.
                nth_outside(j, pool, &pool[i].source_id)
            } else {
                if same.len() < 2 {
                    continue;
                }
                let j = same[rng.gen_range(0..same.len())];
                if j == i {
                    continue;
                }
                j
            };
            let dq = labels[i] - labels[j];
            if dq.abs() < tau || dq == 0.0 {
                continue;
            }
            if !used.insert((i.min(j), i.max(j))) {
                continue;
            }
            out.push(RankedPair {
                a: pool[i].clone(),
                b: pool[j].clone(),
                rank_label: if dq > 0.0 { 1 } else { -1 },
                cross_source: cross,
                indices: (i, j),
            });
            break;
        }
    }
    Ok(out)
}

fn nth_outside(n: usize, pool: &[Arc<PatchPair>], source: &str) -> usize {
    pool.iter()
        .enumerate()
        .filter(|(_, p)| p.source_id != source)
        .nth(n)
        .map(|(i, _)| i)
        .expect("index within the other-source count")
}

/// Stage-2 pairs: single-source only.
pub fn make_finetune_pairs(pool: &[Arc<PatchPair>], tau: f64, count: usize, seed: u64) -> Result<Vec<RankedPair>> {
    make_ranked_pairs(pool, tau, 0.0, count, seed)
}

/// One labeled window, stored without pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDescriptor {
    pub source_id: String,
    pub ref_id: String,
    pub dist_id: String,
    pub x: usize,
    pub y: usize,
    pub t0: usize,
    pub shape: PatchShape,
    pub q: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedDescriptor {
    pub a: usize,
    pub b: usize,
    pub rank_label: i8,
    pub cross_source: bool,
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut buf = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut buf, &row)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn ranked_descriptors(pairs: &[RankedPair]) -> Vec<RankedDescriptor> {
    pairs
        .iter()
        .map(|p| RankedDescriptor {
            a: p.indices.0,
            b: p.indices.1,
            rank_label: p.rank_label,
            cross_source: p.cross_source,
        })
        .collect()
}

/// Re-crops labeled windows from the clips named in a manifest. Source
/// windows are not re-cut.
pub fn materialize(descs: &[PairDescriptor], records: &[TranscodeRecord], base_dir: &Path) -> Result<Vec<Arc<PatchPair>>> {
    let by_id: HashMap<&str, &TranscodeRecord> = records.iter().map(|r| (r.clip_id.as_str(), r)).collect();
    let mut cache: HashMap<String, Arc<VideoClip>> = HashMap::new();
    let mut clip = |id: &str| -> Result<Arc<VideoClip>> {
        if let Some(c) = cache.get(id) {
            return Ok(c.clone());
        }
        let rec = by_id
            .get(id)
            .ok_or_else(|| Error::Lineage(format!("descriptor names `{id}`, absent from manifest")))?;
        let path = base_dir.join(&rec.path);
        let c = Arc::new(media_io::load_clip_as(&path, ClipFormat::infer(&path), ColorRequest::Luma)?.with_id(id));
        cache.insert(id.to_string(), c.clone());
        Ok(c)
    };
    descs
        .iter()
        .map(|d| -> Result<Arc<PatchPair>> {
            Ok(Arc::new(PatchPair {
                ref_patch: Patch::crop(&*clip(&d.ref_id)?, d.x, d.y, d.t0, d.shape)?,
                dist_patch: Patch::crop(&*clip(&d.dist_id)?, d.x, d.y, d.t0, d.shape)?,
                src_patch: None,
                q: d.q,
                source_id: d.source_id.clone(),
            }))
        })
        .collect()
}

/// Rebuilds ranked pairs from descriptors over a materialized pool.
pub fn rebuild_ranked(descs: &[RankedDescriptor], pool: &[Arc<PatchPair>]) -> Result<Vec<RankedPair>> {
    descs
        .iter()
        .map(|d| {
            let get = |i: usize| {
                pool.get(i)
                    .cloned()
                    .ok_or_else(|| Error::InvalidArgument(format!("ranked pair index {i} outside pool of {}", pool.len())))
            };
            Ok(RankedPair {
                a: get(d.a)?,
                b: get(d.b)?,
                rank_label: d.rank_label,
                cross_source: d.cross_source,
                indices: (d.a, d.b),
            })
        })
        .collect()
}

/// Builds S → R → D chains in memory with the synthetic degrader, in the
/// same order as the corpus builder.
pub fn synthetic_chains(sources: &[VideoClip], stage1_qps: &[u8], stage2_qps: &[u8]) -> Result<Vec<ClipChain>> {
    let per_source: Vec<Vec<ClipChain>> = sources
        .par_iter()
        .map(|s| {
            let src = Arc::new(s.clone());
            let mut out = Vec::new();
            for &q1 in stage1_qps {
                let r_id = format!("{}__r{q1}", s.clip_id);
                let r = Arc::new(crate::degrade::synthetic_dct_degrade(s, q1)?.with_id(r_id.clone()));
                for &q2 in stage2_qps {
                    let d = crate::degrade::synthetic_dct_degrade(&r, q2)?.with_id(format!("{r_id}__dct{q2}"));
                    out.push(ClipChain {
                        source: src.clone(),
                        reference: r.clone(),
                        distorted: Arc::new(d),
                        reference_qp: Some(q1),
                    });
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(per_source.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub patch_shape: PatchShape,
    pub windows_per_chain: usize,
    pub tau: f64,
    pub cross_ratio: f64,
    pub stage1_pairs: usize,
    pub stage2_pairs: usize,
    pub held_out_pairs: usize,
    /// Sources whose windows are only used for held-out evaluation. They are
    /// picked at evenly spaced interior ranks of the per-source mean label,
    /// so held-out content stays inside the training range of difficulty.
    pub held_out_sources: usize,
    /// When nonzero, held-out windows come from the last `held_out_frames`
    /// frames of every clip and training windows from the frames before;
    /// `held_out_sources` must then be 0.
    pub held_out_frames: usize,
    pub metric: String,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            patch_shape: PatchShape::DESK,
            windows_per_chain: 8,
            tau: DEFAULT_TAU,
            cross_ratio: DEFAULT_CROSS_RATIO,
            stage1_pairs: 2000,
            stage2_pairs: 1000,
            held_out_pairs: 500,
            held_out_sources: 2,
            held_out_frames: 0,
            metric: "psnr".into(),
            seed: 0,
        }
    }
}

/// Labeled window pools and ranked pairs for both stages plus held-out.
#[derive(Debug, Clone)]
pub struct RankingData {
    pub train_pool: Vec<Arc<PatchPair>>,
    pub held_out_pool: Vec<Arc<PatchPair>>,
    pub stage1: Vec<RankedPair>,
    pub stage2: Vec<RankedPair>,
    pub held_out: Vec<RankedPair>,
}

/// Ranks sources by mean window label (ties by id) and returns the ones at
/// ranks `round((k + 1)·n / (count + 1)) − 1`.
fn held_out_sources(sources: &[&str], labeled: &[PatchPair], count: usize) -> Result<HashSet<String>> {
    let mut ranked: Vec<(f64, &str)> = Vec::new();
    for &id in sources {
        let labels: Vec<f64> = labeled
            .iter()
            .filter(|p| p.source_id == id)
            .map(|p| p.label())
            .collect::<Result<_>>()?;
        let mean = labels.iter().sum::<f64>() / labels.len().max(1) as f64;
        ranked.push((mean, id));
    }
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)));
    let n = ranked.len() as f64;
    Ok((0..count)
        .map(|k| {
            let r = (((k + 1) as f64 * n / (count + 1) as f64).round() as usize).clamp(1, ranked.len()) - 1;
            ranked[r].1.to_string()
        })
        .collect())
}

/// Extracts, labels and pairs windows from every chain.
pub fn build_ranking_data(chains: &[ClipChain], cfg: &SamplerConfig, metric: &ProxyMetric) -> Result<RankingData> {
    let mut sources: Vec<&str> = chains.iter().map(|c| c.source_id()).collect();
    sources.sort_unstable();
    sources.dedup();
    if cfg.held_out_sources >= sources.len() {
        return Err(Error::InvalidArgument(format!(
            "held_out_sources = {} leaves no training source out of {}",
            cfg.held_out_sources,
            sources.len()
        )));
    }
    if cfg.held_out_frames > 0 {
        return build_frame_split(chains, cfg, metric);
    }
    let mut windows = Vec::new();
    for c in chains {
        let seed = derive_seed(cfg.seed, &c.distorted.clip_id);
        windows.extend(extract_pairs(c, cfg.windows_per_chain, cfg.patch_shape, seed)?);
    }
    let labeled = label_with_proxy(windows, metric)?;
    let held = held_out_sources(&sources, &labeled, cfg.held_out_sources)?;
    let (mut train_pool, mut held_out_pool) = (Vec::new(), Vec::new());
    for mut p in labeled {
        p.src_patch = None;
        if held.contains(p.source_id.as_str()) {
            held_out_pool.push(Arc::new(p));
        } else {
            train_pool.push(Arc::new(p));
        }
    }
    finish_ranking_data(train_pool, held_out_pool, cfg)
}

fn build_frame_split(chains: &[ClipChain], cfg: &SamplerConfig, metric: &ProxyMetric) -> Result<RankingData> {
    if cfg.held_out_sources != 0 {
        return Err(Error::InvalidArgument(
            "held_out_frames and held_out_sources are mutually exclusive".into(),
        ));
    }
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for c in chains {
        let t = c.distorted.frames();
        let split = t.checked_sub(cfg.held_out_frames).unwrap_or(0);
        if split < cfg.patch_shape.t || cfg.held_out_frames < cfg.patch_shape.t {
            return Err(Error::InvalidArgument(format!(
                "{} frames cannot hold a {}-frame window on both sides of a {}-frame held-out tail",
                t, cfg.patch_shape.t, cfg.held_out_frames
            )));
        }
        let seed = derive_seed(cfg.seed, &c.distorted.clip_id);
        train.extend(extract_pairs_in_frames(c, cfg.windows_per_chain, cfg.patch_shape, 0..split, seed)?);
        let seed = derive_seed(seed, "tail");
        held.extend(extract_pairs_in_frames(c, cfg.windows_per_chain, cfg.patch_shape, split..t, seed)?);
    }
    let strip = |v: Vec<PatchPair>| -> Vec<Arc<PatchPair>> {
        v.into_iter()
            .map(|mut p| {
                p.src_patch = None;
                Arc::new(p)
            })
            .collect()
    };
    let train_pool = strip(label_with_proxy(train, metric)?);
    let held_out_pool = strip(label_with_proxy(held, metric)?);
    finish_ranking_data(train_pool, held_out_pool, cfg)
}

fn finish_ranking_data(
    train_pool: Vec<Arc<PatchPair>>,
    held_out_pool: Vec<Arc<PatchPair>>,
    cfg: &SamplerConfig,
) -> Result<RankingData> {
    let stage1 = make_ranked_pairs(&train_pool, cfg.tau, cfg.cross_ratio, cfg.stage1_pairs, derive_seed(cfg.seed, "stage1"))?;
    let stage2 = make_finetune_pairs(&train_pool, cfg.tau, cfg.stage2_pairs, derive_seed(cfg.seed, "stage2"))?;
    let held_out = if cfg.held_out_pairs > 0 {
        let src = if held_out_pool.is_empty() { &train_pool } else { &held_out_pool };
        // A single held-out source cannot supply cross-source pairs.
        let cross = if cfg.held_out_sources == 1 { 0.0 } else { cfg.cross_ratio };
        make_ranked_pairs(src, cfg.tau, cross, cfg.held_out_pairs, derive_seed(cfg.seed, "held_out"))?
    } else {
        Vec::new()
    };
    Ok(RankingData {
        train_pool,
        held_out_pool,
        stage1,
        stage2,
        held_out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::synthetic_dct_degrade;
    use crate::media_io::{ColorSpace, FrameRate};
    use crate::synth::{synthetic_clip, SynthSpec};
    use proptest::{prop_assert, prop_assert_eq, proptest};

    fn chain(id: &str, seed: u64, t: usize, h: usize, w: usize) -> ClipChain {
        let s = synthetic_clip(id, &SynthSpec { frames: t, height: h, width: w, detail: None }, seed).unwrap();
        let r = synthetic_dct_degrade(&s, 30).unwrap().with_id(format!("{id}__r30"));
        let d = synthetic_dct_degrade(&r, 40).unwrap().with_id(format!("{id}__r30__dct40"));
        ClipChain::new(s, r, d)
    }

    fn labeled(id: &str, q: f64) -> Arc<PatchPair> {
        let clip = VideoClip::new(id, 2, 16, 16, ColorSpace::Luma, FrameRate::default(), vec![0; 512]).unwrap();
        let p = Patch::crop(&clip, 0, 0, 0, PatchShape::new(2, 16, 16)).unwrap();
        Arc::new(PatchPair {
            ref_patch: p.clone(),
            dist_patch: p,
            src_patch: None,
            q: Some(q),
            source_id: id.to_string(),
        })
    }

    #[test]
    fn extraction_is_seeded_and_in_bounds() {
        let c = chain("a", 1, 6, 48, 64);
        let shape = PatchShape::new(4, 16, 32);
        let a = extract_pairs(&c, 50, shape, 9).unwrap();
        let b = extract_pairs(&c, 50, shape, 9).unwrap();
        assert_eq!(a, b);
        for p in &a {
            let o = &p.dist_patch.origin;
            assert!(o.x <= 32 && o.y <= 32 && o.t0 <= 2);
            assert_eq!(p.ref_patch.origin.x, o.x);
            assert_eq!(p.src_patch.as_ref().unwrap().origin.t0, o.t0);
        }
    }

    #[test]
    fn whole_clip_shape_repeats_the_clip() {
        let c = chain("a", 2, 4, 32, 32);
        let pairs = extract_pairs(&c, 5, PatchShape::new(4, 32, 32), 0).unwrap();
        assert!(pairs.iter().all(|p| p == &pairs[0]));
        assert_eq!(pairs[0].dist_patch.samples(), c.distorted.samples());
        assert!(matches!(extract_pairs(&c, 1, PatchShape::new(5, 16, 16), 0), Err(Error::OutOfBounds(_))));
    }

    #[test]
    fn origins_stay_in_bounds_on_a_large_chain() {
        let origins = draw_origins((60, 720, 1280), PatchShape::FULL, 1000, 3);
        assert_eq!(origins.len(), 1000);
        let (max_x, max_y, max_t) = (1280 - 256, 720 - 256, 60 - 12);
        assert_eq!((max_x, max_y, max_t), (1024, 464, 48));
        assert!(origins.iter().all(|&(x, y, t0)| x <= max_x && y <= max_y && t0 <= max_t));
        assert!(origins.iter().any(|&(x, _, _)| x > 900));
        assert_eq!(origins, draw_origins((60, 720, 1280), PatchShape::FULL, 1000, 3));
    }

    #[test]
    fn proxy_labels() {
        assert_eq!(psnr_to_label(35.0), 50.0);
        assert_eq!(psnr_to_label(10.0), 0.0);
        let c = chain("a", 4, 4, 32, 32);
        let mut pairs = extract_pairs(&c, 6, PatchShape::new(2, 16, 16), 1).unwrap();
        pairs[0].dist_patch = pairs[0].src_patch.clone().unwrap();
        let labeled = label_with_proxy(pairs.clone(), &ProxyMetric::Psnr).unwrap();
        assert_eq!(labeled[0].q, Some(100.0));
        for p in &labeled[1..] {
            let (a, b) = (p.src_patch.as_ref().unwrap().samples(), p.dist_patch.samples());
            let mse = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.len() as f64;
            let db = 10.0 * (255.0f64 * 255.0 / mse).log10();
            let want = ((db.clamp(20.0, 50.0) - 20.0) / 30.0) * 100.0;
            assert!((p.q.unwrap() - want).abs() < 1e-9);
        }
        // The reference window never influences the label.
        let mut corrupted = pairs;
        for p in corrupted.iter_mut() {
            p.ref_patch.samples_mut().iter_mut().for_each(|v| *v = 255 - *v);
        }
        let again = label_with_proxy(corrupted, &ProxyMetric::Psnr).unwrap();
        for (a, b) in again.iter().zip(&labeled) {
            assert_eq!(a.q, b.q);
        }
        assert!(matches!(ProxyMetric::from_id("lpips", None), Err(Error::UnknownMetric(_))));
        assert!(ProxyMetric::from_id("vmaf", None).is_err());
    }

    #[test]
    fn random_noise_labels_match_scalar_psnr() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mk = |rng: &mut ChaCha8Rng, id: &str| {
            VideoClip::new(id, 2, 16, 16, ColorSpace::Luma, FrameRate::default(), (0..512).map(|_| rng.gen()).collect()).unwrap()
        };
        let s = mk(&mut rng, "s");
        let d = mk(&mut rng, "d");
        let c = ClipChain::new(s.clone(), s.clone(), d.clone());
        let p = label_with_proxy(extract_pairs(&c, 1, PatchShape::new(2, 16, 16), 0).unwrap(), &ProxyMetric::Psnr).unwrap();
        let mse: f64 = s.samples().iter().zip(d.samples()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>() / 512.0;
        let db = 10.0 * (65025.0 / mse).log10();
        assert!((p[0].q.unwrap() - psnr_to_label(db)).abs() < 1e-9);
    }

    #[test]
    fn sign_rule_and_threshold() {
        let pool = vec![labeled("s", 80.0), labeled("s", 70.0)];
        let r = make_ranked_pairs(&pool, 6.0, 0.0, 1, 0).unwrap();
        let want = if r[0].indices.0 == 0 { 1 } else { -1 };
        assert_eq!(r[0].rank_label, want);
        let pool = vec![labeled("s", 72.0), labeled("s", 70.0)];
        assert!(matches!(make_ranked_pairs(&pool, 6.0, 0.0, 1, 0), Err(Error::InsufficientCandidates(_))));
    }

    #[test]
    fn cross_fraction_concentrates() {
        let pool: Vec<_> = (0..400).map(|i| labeled(&format!("src{}", i % 8), (i * 37 % 100) as f64)).collect();
        let pairs = make_ranked_pairs(&pool, 6.0, 0.2, 10_000, 5).unwrap();
        let frac = pairs.iter().filter(|p| p.cross_source).count() as f64 / pairs.len() as f64;
        assert!((0.18..=0.22).contains(&frac), "{frac}");
        for p in &pairs {
            assert_eq!(p.cross_source, p.a.source_id != p.b.source_id);
            assert!((p.a.q.unwrap() - p.b.q.unwrap()).abs() >= 6.0);
            assert_eq!(p.rank_label as f64, (p.a.q.unwrap() - p.b.q.unwrap()).signum());
            let s = p.swapped();
            assert_eq!(s.rank_label, -p.rank_label);
            assert_eq!(s.rank_label as f64, (s.a.q.unwrap() - s.b.q.unwrap()).signum());
        }
    }

    #[test]
    fn frame_split_keeps_windows_apart_in_time() {
        let chains: Vec<_> = (0..3).map(|i| chain(&format!("s{i}"), i, 8, 32, 32)).collect();
        let cfg = SamplerConfig {
            patch_shape: PatchShape::new(2, 16, 16),
            windows_per_chain: 20,
            stage1_pairs: 40,
            stage2_pairs: 10,
            held_out_pairs: 20,
            held_out_sources: 0,
            held_out_frames: 3,
            tau: 0.5,
            ..SamplerConfig::default()
        };
        let data = build_ranking_data(&chains, &cfg, &ProxyMetric::Psnr).unwrap();
        // Training windows end by frame 5, held-out windows start there.
        assert!(data.train_pool.iter().all(|p| p.dist_patch.origin.t0 + 2 <= 5));
        assert!(data.held_out_pool.iter().all(|p| p.dist_patch.origin.t0 >= 5));
        assert!(data.held_out.iter().any(|p| p.cross_source));
        let both = SamplerConfig { held_out_sources: 1, ..cfg.clone() };
        assert!(build_ranking_data(&chains, &both, &ProxyMetric::Psnr).is_err());
        let too_long = SamplerConfig { held_out_frames: 7, ..cfg };
        assert!(build_ranking_data(&chains, &too_long, &ProxyMetric::Psnr).is_err());
    }

    #[test]
    fn finetune_pairs_are_single_source() {
        let pool: Vec<_> = (0..60).map(|i| labeled(&format!("src{}", i % 3), (i * 13 % 90) as f64)).collect();
        let ft = make_finetune_pairs(&pool, 6.0, 200, 8).unwrap();
        assert!(ft.iter().all(|p| !p.cross_source && p.a.source_id == p.b.source_id));
        let same = make_ranked_pairs(&pool, 6.0, 0.0, 200, 8).unwrap();
        assert_eq!(ranked_descriptors(&ft), ranked_descriptors(&same));
        assert!(matches!(make_finetune_pairs(&pool, 6.0, 100_000, 8), Err(Error::InsufficientCandidates(_))));
    }

    #[test]
    fn descriptors_round_trip_through_a_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let s = synthetic_clip("src0", &SynthSpec { frames: 4, height: 32, width: 32, detail: None }, 0).unwrap();
        let records = crate::degrade::build_corpus(
            &[s],
            &[30],
            &[crate::degrade::DegraderSpec::synthetic(40)],
            dir.path(),
            &Default::default(),
        )
        .unwrap();
        let chains = load_chains(&records, dir.path()).unwrap();
        assert_eq!(chains.len(), 1);
        assert_eq!(chains[0].reference_qp, Some(30));
        let pairs = label_with_proxy(extract_pairs(&chains[0], 4, PatchShape::new(2, 16, 16), 2).unwrap(), &ProxyMetric::Psnr).unwrap();
        let path = dir.path().join("pairs.jsonl");
        write_jsonl(&path, pairs.iter().map(|p| p.descriptor())).unwrap();
        let descs: Vec<PairDescriptor> = read_jsonl(&path).unwrap();
        let back = materialize(&descs, &records, dir.path()).unwrap();
        for (a, b) in back.iter().zip(&pairs) {
            assert_eq!(a.dist_patch, b.dist_patch);
            assert_eq!(a.ref_patch, b.ref_patch);
            assert_eq!(a.q, b.q);
            assert_eq!(a.origin_hash(), b.origin_hash());
        }
    }

    proptest! {
        #[test]
        fn every_emitted_pair_respects_tau(seed in 0u64..500, tau in 0.5f64..20.0) {
            let pool: Vec<_> = (0..30).map(|i| labeled(&format!("s{}", i % 4), ((i as u64 * 7919 + seed) % 100) as f64)).collect();
            if let Ok(pairs) = make_ranked_pairs(&pool, tau, 0.2, 20, seed) {
                for p in pairs {
                    prop_assert!((p.a.q.unwrap() - p.b.q.unwrap()).abs() >= tau);
                    prop_assert_eq!(p.swapped().rank_label, -p.rank_label);
                }
            }
        }
    }
}
