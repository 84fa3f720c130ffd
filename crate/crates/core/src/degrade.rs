//! Two-stage delivery chain: pristine source S, first-stage compressed
//! reference R, second-stage transcode D. Corpus payloads are written as Y4M
//! next to a JSON manifest of [`TranscodeRecord`]s.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::media_io::{self, ClipFormat, VideoClip};

pub const MAX_QP: u8 = 63;
/// First-stage QPs producing high, medium and low quality references.
pub const STAGE1_QPS: [u8; 3] = [30, 37, 42];
/// Default second-stage grid.
pub const STAGE2_QPS: [u8; 4] = [32, 36, 40, 44];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DegraderKind {
    SyntheticDct,
    ExternalEncoder,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DegraderSpec {
    pub kind: DegraderKind,
    pub qp: u8,
    #[serde(default)]
    pub encoder_name: Option<String>,
    #[serde(default)]
    pub extra_args: Option<Vec<String>>,
}

impl DegraderSpec {
    pub fn synthetic(qp: u8) -> Self {
        DegraderSpec {
            kind: DegraderKind::SyntheticDct,
            qp,
            encoder_name: None,
            extra_args: None,
        }
    }

    pub fn external(encoder_name: impl Into<String>, qp: u8) -> Self {
        DegraderSpec {
            kind: DegraderKind::ExternalEncoder,
            qp,
            encoder_name: Some(encoder_name.into()),
            extra_args: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.qp > MAX_QP {
            return Err(Error::InvalidArgument(format!("qp {} outside [0, {MAX_QP}]", self.qp)));
        }
        if self.kind == DegraderKind::ExternalEncoder && self.encoder_name.is_none() {
            return Err(Error::InvalidArgument("external encoder needs encoder_name".into()));
        }
        Ok(())
    }

    fn tag(&self) -> String {
        match (&self.kind, &self.encoder_name) {
            (DegraderKind::ExternalEncoder, Some(name)) => format!("{name}{}", self.qp),
            _ => format!("dct{}", self.qp),
        }
    }
}

/// Quantizer step for a QP: doubles every 6 QP, 1.0 at QP 4.
pub fn qp_step(qp: u8) -> f64 {
    ((qp as f64 - 4.0) / 6.0).exp2()
}

fn dct_basis() -> &'static [[f64; 8]; 8] {
    static BASIS: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut m = [[0.0; 8]; 8];
        for (k, row) in m.iter_mut().enumerate() {
            let scale = if k == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
            for (n, v) in row.iter_mut().enumerate() {
                *v = scale * (((2 * n + 1) * k) as f64 * std::f64::consts::PI / 16.0).cos();
            }
        }
        m
    })
}

/// Orthonormal 8×8 type-II DCT, `C = M X Mᵀ`.
pub fn dct8x8(block: &[f64; 64]) -> [f64; 64] {
    let m = dct_basis();
    let mut tmp = [0.0; 64];
    for k in 0..8 {
        for x in 0..8 {
            tmp[k * 8 + x] = (0..8).map(|n| m[k][n] * block[n * 8 + x]).sum();
        }
    }
    let mut out = [0.0; 64];
    for k in 0..8 {
        for l in 0..8 {
            out[k * 8 + l] = (0..8).map(|x| tmp[k * 8 + x] * m[l][x]).sum();
        }
    }
    out
}

/// Inverse of [`dct8x8`], `X = Mᵀ C M`.
pub fn idct8x8(coeffs: &[f64; 64]) -> [f64; 64] {
    let m = dct_basis();
    let mut tmp = [0.0; 64];
    for n in 0..8 {
        for l in 0..8 {
            tmp[n * 8 + l] = (0..8).map(|k| m[k][n] * coeffs[k * 8 + l]).sum();
        }
    }
    let mut out = [0.0; 64];
    for n in 0..8 {
        for x in 0..8 {
            out[n * 8 + x] = (0..8).map(|l| tmp[n * 8 + l] * m[l][x]).sum();
        }
    }
    out
}

/// Blockwise DCT quantization of every channel of every frame.
///
/// Rounding is half-away-from-zero throughout, so output is reproducible on
/// any platform with IEEE doubles.
pub fn synthetic_dct_degrade(clip: &VideoClip, qp: u8) -> Result<VideoClip> {
    if qp > MAX_QP {
        return Err(Error::InvalidArgument(format!("qp {qp} outside [0, {MAX_QP}]")));
    }
    let step = qp_step(qp);
    let (frames, h, w, c) = clip.dims();
    let src = clip.samples();
    let mut out = vec![0u8; src.len()];
    let idx = |t: usize, y: usize, x: usize, ch: usize| ((t * h + y) * w + x) * c + ch;
    for t in 0..frames {
        for ch in 0..c {
            for by in (0..h).step_by(8) {
                for bx in (0..w).step_by(8) {
                    let mut block = [0.0; 64];
                    for yy in 0..8 {
                        for xx in 0..8 {
                            let y = (by + yy).min(h - 1);
                            let x = (bx + xx).min(w - 1);
                            block[yy * 8 + xx] = src[idx(t, y, x, ch)] as f64;
                        }
                    }
                    let mut coeffs = dct8x8(&block);
                    for v in coeffs.iter_mut() {
                        *v = (*v / step).round() * step;
                    }
                    let recon = idct8x8(&coeffs);
                    for yy in 0..8.min(h - by) {
                        for xx in 0..8.min(w - bx) {
                            out[idx(t, by + yy, bx + xx, ch)] =
                                recon[yy * 8 + xx].round().clamp(0.0, 255.0) as u8;
                        }
                    }
                }
            }
        }
    }
    let mut clip = clip.clone();
    clip.samples_mut().copy_from_slice(&out);
    Ok(clip)
}

/// Configuration for piping clips through host encoder binaries.
///
/// Templates are run through `sh -c` after substituting `{input}` (Y4M written
/// by us), `{output}` (decoded Y4M read back), `{qp}` and, optionally,
/// `{bitstream}` (whose size is reported).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExternalEncoderConfig {
    pub templates: HashMap<String, String>,
    /// Use the synthetic DCT degrader when the binary is missing.
    #[serde(default)]
    pub fallback_to_synthetic: bool,
    #[serde(default)]
    pub work_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct ExternalOutput {
    pub clip: VideoClip,
    pub bitstream_bytes: Option<u64>,
    pub used_fallback: bool,
}

fn binary_available(program: &str) -> bool {
    if program.contains('/') {
        return Path::new(program).is_file();
    }
    std::env::var_os("PATH")
        .map(|paths| std::env::split_paths(&paths).any(|dir| dir.join(program).is_file()))
        .unwrap_or(false)
}

pub fn external_encode(clip: &VideoClip, spec: &DegraderSpec, cfg: &ExternalEncoderConfig) -> Result<VideoClip> {
    external_encode_with_stats(clip, spec, cfg).map(|o| o.clip)
}

pub fn external_encode_with_stats(
    clip: &VideoClip,
    spec: &DegraderSpec,
    cfg: &ExternalEncoderConfig,
) -> Result<ExternalOutput> {
    spec.validate()?;
    let name = spec.encoder_name.as_deref().unwrap_or("");
    let template = cfg.templates.get(name);
    let program = template.and_then(|t| t.split_whitespace().next());
    if !program.is_some_and(binary_available) {
        if cfg.fallback_to_synthetic {
            log::warn!("encoder `{name}` unavailable, using synthetic DCT degrader");
            return Ok(ExternalOutput {
                clip: synthetic_dct_degrade(clip, spec.qp)?,
                bitstream_bytes: None,
                used_fallback: true,
            });
        }
        return Err(Error::EncoderUnavailable(name.to_string()));
    }
    let template = template.expect("checked above");

    let scratch = tempdir_in(cfg.work_dir.as_deref())?;
    let input = scratch.join("input.y4m");
    let output = scratch.join("output.y4m");
    let bitstream = scratch.join("bitstream.bin");
    media_io::save_clip(clip, &input, ClipFormat::Y4m)?;
    let mut command = template
        .replace("{input}", &input.to_string_lossy())
        .replace("{output}", &output.to_string_lossy())
        .replace("{bitstream}", &bitstream.to_string_lossy())
        .replace("{qp}", &spec.qp.to_string());
    for arg in spec.extra_args.iter().flatten() {
        command.push(' ');
        command.push_str(arg);
    }
    let status = Command::new("sh")
        .arg("-c")
        .arg(&command)
        .output()
        .map_err(|e| Error::io(&scratch, e))?;
    let result = if !status.status.success() {
        Err(Error::ExternalCommand(format!(
            "`{command}` exited with {}: {}",
            status.status,
            String::from_utf8_lossy(&status.stderr).trim()
        )))
    } else {
        media_io::load_clip_as(&output, ClipFormat::Y4m, color_request(clip)).and_then(|decoded| {
            if decoded.dims() != clip.dims() {
                return Err(Error::ShapeMismatch(format!(
                    "encoder changed dims {:?} -> {:?}",
                    clip.dims(),
                    decoded.dims()
                )));
            }
            Ok(ExternalOutput {
                clip: decoded.with_id(clip.clip_id.clone()),
                bitstream_bytes: fs::metadata(&bitstream).ok().map(|m| m.len()),
                used_fallback: false,
            })
        })
    };
    let _ = fs::remove_dir_all(&scratch);
    result
}

fn color_request(clip: &VideoClip) -> media_io::ColorRequest {
    match clip.color() {
        media_io::ColorSpace::Luma => media_io::ColorRequest::Luma,
        media_io::ColorSpace::Rgb => media_io::ColorRequest::Rgb,
    }
}

fn tempdir_in(base: Option<&Path>) -> Result<PathBuf> {
    use std::sync::atomic::{AtomicU64, Ordering};
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let base = base.map(Path::to_path_buf).unwrap_or_else(std::env::temp_dir);
    let dir = base.join(format!(
        "ptloss-enc-{}-{}",
        std::process::id(),
        COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

/// Applies a degrader spec, dispatching on its kind.
pub fn apply_degrader(clip: &VideoClip, spec: &DegraderSpec, external: &ExternalEncoderConfig) -> Result<VideoClip> {
    spec.validate()?;
    match spec.kind {
        DegraderKind::SyntheticDct => synthetic_dct_degrade(clip, spec.qp),
        DegraderKind::ExternalEncoder => external_encode(clip, spec, external),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    S,
    R,
    D,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscodeRecord {
    pub clip_id: String,
    pub role: Role,
    pub source_id: String,
    /// Immediate input; `None` for sources.
    pub parent_id: Option<String>,
    pub stage: u8,
    pub spec: Option<DegraderSpec>,
    /// Payload path relative to the manifest directory.
    pub path: PathBuf,
}

/// Rows produced by [`build_corpus`] for the given grid sizes.
pub fn expected_record_count(sources: usize, stage1: usize, stage2: usize) -> usize {
    sources * (1 + stage1 + stage1 * stage2)
}

/// Synthesizes S → R → D chains for every source and writes the payloads
/// under `out_dir`. The manifest itself is written by [`write_manifest`].
pub fn build_corpus(
    sources: &[VideoClip],
    stage1_qps: &[u8],
    stage2_specs: &[DegraderSpec],
    out_dir: &Path,
    external: &ExternalEncoderConfig,
) -> Result<Vec<TranscodeRecord>> {
    if sources.is_empty() || stage1_qps.is_empty() {
        return Err(Error::InvalidArgument("sources and stage-1 QPs must be nonempty".into()));
    }
    for qp in stage1_qps {
        DegraderSpec::synthetic(*qp).validate()?;
    }
    for spec in stage2_specs {
        spec.validate()?;
    }

    // Plan every record first so id collisions surface before any I/O.
    let mut plan: Vec<Vec<TranscodeRecord>> = Vec::with_capacity(sources.len());
    let mut seen = HashSet::new();
    for src in sources {
        let mut chain = Vec::new();
        let s_id = src.clip_id.clone();
        chain.push(TranscodeRecord {
            clip_id: s_id.clone(),
            role: Role::S,
            source_id: s_id.clone(),
            parent_id: None,
            stage: 0,
            spec: None,
            path: PathBuf::from(format!("{s_id}.y4m")),
        });
        for &qp in stage1_qps {
            let r_spec = DegraderSpec::synthetic(qp);
            let r_id = format!("{s_id}__r{qp}");
            chain.push(TranscodeRecord {
                clip_id: r_id.clone(),
                role: Role::R,
                source_id: s_id.clone(),
                parent_id: Some(s_id.clone()),
                stage: 1,
                spec: Some(r_spec),
                path: PathBuf::from(format!("{r_id}.y4m")),
            });
            for spec in stage2_specs {
                let d_id = format!("{r_id}__{}", spec.tag());
                chain.push(TranscodeRecord {
                    clip_id: d_id.clone(),
                    role: Role::D,
                    source_id: s_id.clone(),
                    parent_id: Some(r_id.clone()),
                    stage: 2,
                    spec: Some(spec.clone()),
                    path: PathBuf::from(format!("{d_id}.y4m")),
                });
            }
        }
        for rec in &chain {
            if !seen.insert(rec.clip_id.clone()) {
                return Err(Error::DuplicateClipId(rec.clip_id.clone()));
            }
        }
        plan.push(chain);
    }

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let outcome: Result<()> = sources
        .par_iter()
        .zip(plan.par_iter())
        .try_for_each(|(src, chain)| write_chain(src, chain, out_dir, external));
    if let Err(e) = outcome {
        for rec in plan.iter().flatten() {
            let _ = fs::remove_file(out_dir.join(&rec.path));
        }
        return Err(e);
    }
    Ok(plan.into_iter().flatten().collect())
}

fn write_chain(src: &VideoClip, chain: &[TranscodeRecord], out_dir: &Path, external: &ExternalEncoderConfig) -> Result<()> {
    let mut refs: HashMap<&str, VideoClip> = HashMap::new();
    for rec in chain {
        let clip = match rec.role {
            Role::S => src.clone().with_id(rec.clip_id.clone()),
            Role::R | Role::D => {
                let parent = rec.parent_id.as_deref().expect("planned with parent");
                let input = if rec.role == Role::R { src } else { &refs[parent] };
                let spec = rec.spec.as_ref().expect("planned with spec");
                apply_degrader(input, spec, external)?.with_id(rec.clip_id.clone())
            }
        };
        media_io::save_clip(&clip, &out_dir.join(&rec.path), ClipFormat::Y4m)?;
        if rec.role == Role::R {
            refs.insert(rec.clip_id.as_str(), clip);
        }
    }
    Ok(())
}

pub fn write_manifest(records: &[TranscodeRecord], path: &Path) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(records)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<TranscodeRecord>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// SHA-256 of the canonical JSON serialization, hex encoded.
pub fn manifest_hash(records: &[TranscodeRecord]) -> String {
    let bytes = serde_json::to_vec(records).expect("records serialize");
    hex_digest(&bytes)
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub clip_id: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ManifestReport {
    pub records: usize,
    pub violations: Vec<Violation>,
}

impl ManifestReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks lineage rules, payload presence and dimension agreement along each
/// chain. Payload paths are resolved against `base_dir`.
pub fn verify_manifest(records: &[TranscodeRecord], base_dir: &Path) -> ManifestReport {
    let mut report = ManifestReport {
        records: records.len(),
        violations: Vec::new(),
    };
    let mut flag = |id: &str, msg: String| {
        report.violations.push(Violation {
            clip_id: id.to_string(),
            message: msg,
        })
    };
    let by_id: HashMap<&str, &TranscodeRecord> = records.iter().map(|r| (r.clip_id.as_str(), r)).collect();
    if by_id.len() != records.len() {
        flag("*", "duplicate clip ids".into());
    }
    let mut dims = HashMap::new();
    for rec in records {
        let path = base_dir.join(&rec.path);
        if !path.exists() {
            flag(&rec.clip_id, format!("missing payload {}", path.display()));
        } else {
            match media_io::probe_dims(&path, ClipFormat::infer(&path)) {
                Ok(d) => {
                    dims.insert(rec.clip_id.as_str(), d);
                }
                Err(e) => flag(&rec.clip_id, format!("unreadable payload: {e}")),
            }
        }
        let expected_stage = match rec.role {
            Role::S => 0,
            Role::R => 1,
            Role::D => 2,
        };
        if rec.stage != expected_stage {
            flag(&rec.clip_id, format!("role {:?} must have stage {expected_stage}", rec.role));
        }
        if (rec.role == Role::S) != rec.spec.is_none() {
            flag(&rec.clip_id, "spec must be absent exactly for sources".into());
        }
        match rec.role {
            Role::S => {
                if rec.parent_id.is_some() || rec.source_id != rec.clip_id {
                    flag(&rec.clip_id, "source must be its own lineage root".into());
                }
            }
            Role::R | Role::D => {
                let want = if rec.role == Role::R { Role::S } else { Role::R };
                match rec.parent_id.as_deref().and_then(|p| by_id.get(p)) {
                    None => flag(&rec.clip_id, "parent not found in manifest".into()),
                    Some(parent) => {
                        if parent.role != want {
                            flag(&rec.clip_id, "chain must be S→R→D".into());
                        }
                        if parent.source_id != rec.source_id {
                            flag(&rec.clip_id, "source_id disagrees with parent".into());
                        }
                    }
                }
            }
        }
    }
    for rec in records {
        if let (Some(parent), Some(d)) = (rec.parent_id.as_deref(), dims.get(rec.clip_id.as_str())) {
            if let Some(pd) = dims.get(parent) {
                if pd != d {
                    flag(&rec.clip_id, format!("dims {d:?} differ from parent {pd:?}"));
                }
            }
        }
    }
    report
}
