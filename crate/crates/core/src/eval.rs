//! Quality metrics against the pristine source, Bjøntegaard delta rate,
//! and CSV/SVG report emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::degrade::{Role, TranscodeRecord};
use crate::error::{Error, Result};
use crate::media_io::{self, ClipFormat, ColorRequest, VideoClip};

/// PSNR reported for identical inputs.
pub const PSNR_CAP_DB: f64 = 99.0;

fn check_dims(a: &VideoClip, b: &VideoClip) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

pub fn mse_u8(a: &[u8], b: &[u8]) -> f64 {
    let sse: u64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as i64 - y as i64;
            (d * d) as u64
        })
        .sum();
    sse as f64 / a.len() as f64
}

/// PSNR in dB for 8-bit samples, capped at [`PSNR_CAP_DB`].
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (255.0 * 255.0 / mse).log10()).min(PSNR_CAP_DB)
}

pub fn psnr_u8(a: &[u8], b: &[u8]) -> f64 {
    psnr_from_mse(mse_u8(a, b))
}

/// PSNR over all samples of two equally shaped clips.
pub fn psnr(a: &VideoClip, b: &VideoClip) -> Result<f64> {
    check_dims(a, b)?;
    Ok(psnr_u8(a.samples(), b.samples()))
}

const SSIM_WINDOW: usize = 8;
const SSIM_STRIDE: usize = 4;

/// Mean structural similarity on luma over 8×8 windows (stride 4) with
/// k1 = 0.01, k2 = 0.03.
pub fn ssim_proxy(a: &VideoClip, b: &VideoClip) -> Result<f64> {
    check_dims(a, b)?;
    let a = media_io::to_luma_quiet(a);
    let b = media_io::to_luma_quiet(b);
    let (frames, h, w, _) = a.dims();
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    let starts = |len: usize| {
        let mut v: Vec<usize> = (0..=len - SSIM_WINDOW).step_by(SSIM_STRIDE).collect();
        if *v.last().unwrap() != len - SSIM_WINDOW {
            v.push(len - SSIM_WINDOW);
        }
        v
    };
    let (ys, xs) = (starts(h), starts(w));
    for t in 0..frames {
        let (fa, fb) = (a.frame(t), b.frame(t));
        for &y0 in &ys {
            for &x0 in &xs {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + SSIM_WINDOW {
                    for x in x0..x0 + SSIM_WINDOW {
                        let (va, vb) = (fa[y * w + x] as f64, fb[y * w + x] as f64);
                        sa += va;
                        sb += vb;
                        saa += va * va;
                        sbb += vb * vb;
                        sab += va * vb;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = saa / n - ma * ma;
                let vb = sbb / n - mb * mb;
                let cov = sab / n - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RDPoint {
    pub bpp: f64,
    pub quality: f64,
    pub metric_id: String,
    pub codec_id: String,
    pub alpha: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RDCurve {
    pub label: String,
    pub points: Vec<RDPoint>,
}

impl RDCurve {
    /// Sorts points by rate and checks the curve invariants.
    pub fn new(label: impl Into<String>, mut points: Vec<RDPoint>) -> Result<Self> {
        points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        let curve = RDCurve {
            label: label.into(),
            points,
        };
        curve.validate()?;
        Ok(curve)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() < 3 {
            return Err(Error::InvalidArgument(format!(
                "curve `{}` has {} points, need at least 3",
                self.label,
                self.points.len()
            )));
        }
        let first = &self.points[0];
        for p in &self.points {
            if !(p.bpp > 0.0) || !p.quality.is_finite() {
                return Err(Error::InvalidArgument(format!("curve `{}`: bad point {p:?}", self.label)));
            }
            if p.metric_id != first.metric_id || p.codec_id != first.codec_id {
                return Err(Error::InvalidArgument(format!("curve `{}` mixes metrics or codecs", self.label)));
            }
        }
        if self.points.windows(2).any(|w| w[1].bpp <= w[0].bpp) {
            return Err(Error::InvalidArgument(format!("curve `{}`: bpp not strictly increasing", self.label)));
        }
        Ok(())
    }

    pub fn metric_id(&self) -> &str {
        &self.points[0].metric_id
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BDResult {
    pub bd_rate_percent: f64,
    /// Quality interval `[lo, hi]` the integral ran over.
    pub overlap: (f64, f64),
    pub metric_id: String,
}

/// Least-squares polynomial `log10(bpp) = p(u)` with `u = (q - center) / scale`.
struct LogRateFit {
    coeffs: Vec<f64>,
    center: f64,
    scale: f64,
}

impl LogRateFit {
    fn new(curve: &RDCurve) -> Result<Self> {
        let q: Vec<f64> = curve.points.iter().map(|p| p.quality).collect();
        let (lo, hi) = (q[0], q[q.len() - 1]);
        let center = 0.5 * (lo + hi);
        let scale = 0.5 * (hi - lo);
        let degree = (q.len() - 1).min(3);
        let a = DMatrix::from_fn(q.len(), degree + 1, |i, j| ((q[i] - center) / scale).powi(j as i32));
        let b = DVector::from_iterator(q.len(), curve.points.iter().map(|p| p.bpp.log10()));
        let svd = a.svd(true, true);
        let x = svd
            .solve(&b, 1e-14)
            .map_err(|e| Error::Numerical(format!("polynomial fit failed: {e}")))?;
        Ok(LogRateFit {
            coeffs: x.iter().copied().collect(),
            center,
            scale,
        })
    }

    /// `∫ p(u(q)) dq` over `[lo, hi]`.
    fn integral(&self, lo: f64, hi: f64) -> f64 {
        let anti = |q: f64| {
            let u = (q - self.center) / self.scale;
            self.coeffs
                .iter()
                .enumerate()
                .map(|(j, c)| c * u.powi(j as i32 + 1) / (j as f64 + 1.0))
                .sum::<f64>()
                * self.scale
        };
        anti(hi) - anti(lo)
    }
}

/// Classic cubic-fit Bjøntegaard delta rate of `test` relative to `anchor`.
/// Negative values mean `test` needs fewer bits for the same quality.
pub fn bd_rate(anchor: &RDCurve, test: &RDCurve) -> Result<BDResult> {
    anchor.validate()?;
    test.validate()?;
    if anchor.metric_id() != test.metric_id() {
        return Err(Error::InvalidArgument(format!(
            "metric mismatch: {} vs {}",
            anchor.metric_id(),
            test.metric_id()
        )));
    }
    for c in [anchor, test] {
        if c.points.windows(2).any(|w| w[1].quality <= w[0].quality) {
            return Err(Error::InvalidArgument(format!(
                "curve `{}` has non-monotone quality; BD-rate undefined",
                c.label
            )));
        }
    }
    let range = |c: &RDCurve| (c.points[0].quality, c.points[c.points.len() - 1].quality);
    let (alo, ahi) = range(anchor);
    let (tlo, thi) = range(test);
    let (lo, hi) = (alo.max(tlo), ahi.min(thi));
    if !(hi > lo) {
        return Err(Error::InvalidArgument("quality ranges do not overlap".into()));
    }
    let fa = LogRateFit::new(anchor)?;
    let ft = LogRateFit::new(test)?;
    let mean_diff = (ft.integral(lo, hi) - fa.integral(lo, hi)) / (hi - lo);
    Ok(BDResult {
        bd_rate_percent: (10f64.powf(mean_diff) - 1.0) * 100.0,
        overlap: (lo, hi),
        metric_id: anchor.metric_id().to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RefGroup {
    Low,
    Medium,
    High,
    Overall,
}

impl RefGroup {
    /// Reference-quality group of a first-stage QP (42 → Low, 37 → Medium, 30 → High).
    pub fn from_stage1_qp(qp: u8) -> RefGroup {
        match qp {
            40.. => RefGroup::Low,
            34..=39 => RefGroup::Medium,
            _ => RefGroup::High,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RefGroup::Low => "Low",
            RefGroup::Medium => "Medium",
            RefGroup::High => "High",
            RefGroup::Overall => "Overall",
        }
    }

    pub fn parse(s: &str) -> Option<RefGroup> {
        [RefGroup::Low, RefGroup::Medium, RefGroup::High, RefGroup::Overall]
            .into_iter()
            .find(|g| g.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SourceQuality {
    pub psnr_vs_source: f64,
    pub ssim_vs_source: f64,
    pub psnr_vs_reference: Option<f64>,
    pub ssim_vs_reference: Option<f64>,
}

/// Metrics of a D record against its pristine S ancestor. With
/// `include_reference`, the same metrics against the R parent are added for
/// comparison.
pub fn quality_vs_source(
    record: &TranscodeRecord,
    manifest: &[TranscodeRecord],
    base_dir: &Path,
    include_reference: bool,
) -> Result<SourceQuality> {
    let find = |id: &str| manifest.iter().find(|r| r.clip_id == id);
    let source = find(&record.source_id)
        .filter(|s| s.role == Role::S)
        .ok_or_else(|| Error::Lineage(format!("no source `{}` for `{}`", record.source_id, record.clip_id)))?;
    let load = |r: &TranscodeRecord| {
        let path = base_dir.join(&r.path);
        media_io::load_clip_as(&path, ClipFormat::infer(&path), ColorRequest::Luma)
    };
    let d = load(record)?;
    let s = load(source)?;
    let (mut pr, mut sr) = (None, None);
    if include_reference {
        let parent = record
            .parent_id
            .as_deref()
            .and_then(find)
            .ok_or_else(|| Error::Lineage(format!("no parent for `{}`", record.clip_id)))?;
        let r = load(parent)?;
        pr = Some(psnr(&r, &d)?);
        sr = Some(ssim_proxy(&r, &d)?);
    }
    Ok(SourceQuality {
        psnr_vs_source: psnr(&s, &d)?,
        ssim_vs_source: ssim_proxy(&s, &d)?,
        psnr_vs_reference: pr,
        ssim_vs_reference: sr,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BdRow {
    pub group: RefGroup,
    pub label: String,
    pub anchor: String,
    pub metric_id: String,
    pub bd_rate_percent: f64,
    pub overlap_lo: f64,
    pub overlap_hi: f64,
}

impl BdRow {
    pub fn new(group: RefGroup, label: impl Into<String>, anchor: impl Into<String>, r: &BDResult) -> Self {
        BdRow {
            group,
            label: label.into(),
            anchor: anchor.into(),
            metric_id: r.metric_id.clone(),
            bd_rate_percent: r.bd_rate_percent,
            overlap_lo: r.overlap.0,
            overlap_hi: r.overlap.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityRow {
    pub name: String,
    pub macs: u64,
    pub params: u64,
    /// Encoder cost relative to the baseline codec, in percent.
    pub relative_encode_time: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ReportInputs {
    pub curves: Vec<(RefGroup, RDCurve)>,
    pub bd_rows: Vec<BdRow>,
    pub complexity: Vec<ComplexityRow>,
}

pub const BD_CSV: &str = "bd_rate.csv";
pub const COMPLEXITY_CSV: &str = "complexity.csv";

/// Writes `bd_rate.csv`, `complexity.csv` (when rows are given) and one
/// `rd_<group>.svg` per group that has curves. Returns the written paths.
pub fn emit_report(inputs: &ReportInputs, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if inputs.curves.is_empty() && inputs.bd_rows.is_empty() {
        return Err(Error::InvalidArgument("nothing to report".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();

    let path = out_dir.join(BD_CSV);
    let mut w = csv::Writer::from_path(&path)?;
    for row in &inputs.bd_rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    written.push(path);

    if !inputs.complexity.is_empty() {
        let path = out_dir.join(COMPLEXITY_CSV);
        let mut w = csv::Writer::from_path(&path)?;
        for row in &inputs.complexity {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }

    let mut groups: BTreeMap<RefGroup, Vec<&RDCurve>> = BTreeMap::new();
    for (g, c) in &inputs.curves {
        groups.entry(*g).or_default().push(c);
    }
    for (group, curves) in groups {
        let path = out_dir.join(format!("rd_{}.svg", group.as_str().to_lowercase()));
        fs::write(&path, rd_svg(group.as_str(), &curves)).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

pub fn read_bd_csv(path: &Path) -> Result<Vec<BdRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn read_complexity_csv(path: &Path) -> Result<Vec<ComplexityRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn rd_svg(title: &str, curves: &[&RDCurve]) -> String {
    let (w, h, m) = (640.0, 420.0, 56.0);
    let pts = curves.iter().flat_map(|c| c.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in pts {
        x0 = x0.min(p.bpp);
        x1 = x1.max(p.bpp);
        y0 = y0.min(p.quality);
        y1 = y1.max(p.quality);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let sx = |v: f64| m + (v - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |v: f64| h - m - (v - y0) / (y1 - y0) * (h - 2.0 * m);
    let metric = curves.first().map(|c| c.metric_id()).unwrap_or("quality");

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{title}</text>"#, w / 2.0);
    let _ = writeln!(s, r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - m, w - m, h - m);
    let _ = writeln!(s, r#"<line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="black"/>"#, h - m);
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{fx:.4}</text>"#, sx(fx), h - m + 16.0);
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{fy:.2}</text>"#, m - 4.0, sy(fy) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">bits per pixel</text>"#, w / 2.0, h - 12.0);
    let _ = writeln!(s, r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">{metric}</text>"#, h / 2.0, h / 2.0);
    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = c.points.iter().map(|p| format!("{:.2},{:.2}", sx(p.bpp), sy(p.quality))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, path.join(" "));
        for p in &c.points {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, sx(p.bpp), sy(p.quality));
        }
        let ly = m + 16.0 * i as f64;
        let _ = writeln!(s, r#"<text x="{}" y="{ly:.1}" fill="{color}">{}</text>"#, w - m - 150.0, xml_escape(&c.label));
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::media_io::{ColorSpace, FrameRate};
    use rand::{Rng, SeedableRng};

    fn clip(data: Vec<u8>, t: usize, h: usize, w: usize) -> VideoClip {
        VideoClip::new("c", t, h, w, ColorSpace::Luma, FrameRate::default(), data).unwrap()
    }

    fn curve(label: &str, pts: &[(f64, f64)]) -> RDCurve {
        RDCurve::new(
            label,
            pts.iter()
                .map(|&(bpp, quality)| RDPoint {
                    bpp,
                    quality,
                    metric_id: "psnr".into(),
                    codec_id: "toy".into(),
                    alpha: 0.0,
                    seed: 0,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn psnr_cases() {
        let a = clip(vec![100; 128], 2, 8, 8);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        let b = clip(vec![116; 128], 2, 8, 8);
        let expected = 20.0 * (255.0f64 / 16.0).log10();
        assert!((psnr(&a, &b).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 24.048404).abs() < 1e-6);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!(psnr(&a, &clip(vec![0; 64], 1, 8, 8)).is_err());
    }

    #[test]
    fn psnr_decreases_with_noise_variance() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let base: Vec<u8> = (0..4096).map(|i| (64 + i % 128) as u8).collect();
        let a = clip(base.clone(), 1, 64, 64);
        let unit: Vec<f64> = (0..4096).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut prev = f64::INFINITY;
        for sigma in [1.0, 2.0, 4.0, 8.0, 16.0, 32.0] {
            let noisy = base.iter().zip(&unit).map(|(&v, &n)| (v as f64 + sigma * n).round().clamp(0.0, 255.0) as u8).collect();
            let p = psnr(&a, &clip(noisy, 1, 64, 64)).unwrap();
            assert!(p < prev);
            prev = p;
        }
    }

    #[test]
    fn ssim_cases() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let noise = clip((0..2048).map(|_| rng.gen()).collect(), 2, 32, 32);
        let flat = clip(vec![128; 2048], 2, 32, 32);
        assert!((ssim_proxy(&noise, &noise).unwrap() - 1.0).abs() < 1e-12);
        let s = ssim_proxy(&noise, &flat).unwrap();
        assert!(s < 0.2, "{s}");
        assert!((s - ssim_proxy(&flat, &noise).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn bd_rate_identity_and_scaling() {
        let a = curve("a", &[(0.1, 30.0), (0.2, 33.0), (0.4, 36.0), (0.8, 38.5)]);
        assert_eq!(bd_rate(&a, &a).unwrap().bd_rate_percent, 0.0);
        let scaled: Vec<(f64, f64)> = a.points.iter().map(|p| (p.bpp * 0.9, p.quality)).collect();
        let b = curve("b", &scaled);
        let r = bd_rate(&a, &b).unwrap();
        assert!((r.bd_rate_percent + 10.0).abs() < 1e-6, "{}", r.bd_rate_percent);
        assert_eq!(r.overlap, (30.0, 38.5));
    }

    #[test]
    fn bd_rate_three_point_curves() {
        let a = curve("a", &[(0.1, 30.0), (0.2, 33.0), (0.4, 36.0)]);
        let b = curve("b", &[(0.09, 30.0), (0.18, 33.0), (0.36, 36.0)]);
        assert!((bd_rate(&a, &b).unwrap().bd_rate_percent + 10.0).abs() < 1e-6);
    }

    #[test]
    fn bd_rate_rejections() {
        let a = curve("a", &[(0.1, 30.0), (0.2, 33.0), (0.4, 36.0)]);
        let far = curve("f", &[(0.1, 40.0), (0.2, 43.0), (0.4, 46.0)]);
        assert!(bd_rate(&a, &far).is_err());
        let bumpy = curve("n", &[(0.1, 30.0), (0.2, 35.0), (0.4, 34.0)]);
        let err = bd_rate(&a, &bumpy).unwrap_err();
        assert!(err.to_string().contains("non-monotone"));
        assert!(RDCurve::new("x", a.points[..2].to_vec()).is_err());
    }

    #[test]
    fn bd_rate_shift_invariance_and_inverse() {
        let a = curve("a", &[(0.1, 30.0), (0.2, 33.2), (0.4, 36.1), (0.8, 38.4)]);
        let b = curve("b", &[(0.11, 30.5), (0.21, 33.9), (0.39, 36.6), (0.75, 38.9)]);
        let r = bd_rate(&a, &b).unwrap().bd_rate_percent;
        let shift = |c: &RDCurve, d: f64| curve(&c.label, &c.points.iter().map(|p| (p.bpp, p.quality + d)).collect::<Vec<_>>());
        let rs = bd_rate(&shift(&a, 7.5), &shift(&b, 7.5)).unwrap().bd_rate_percent;
        assert!((r - rs).abs() < 1e-9);
        let back = bd_rate(&b, &a).unwrap().bd_rate_percent;
        let prod = (1.0 + r / 100.0) * (1.0 + back / 100.0);
        assert!((prod - 1.0).abs() < 0.005, "{prod}");
    }

    #[test]
    fn groups_from_qp() {
        assert_eq!(RefGroup::from_stage1_qp(42), RefGroup::Low);
        assert_eq!(RefGroup::from_stage1_qp(37), RefGroup::Medium);
        assert_eq!(RefGroup::from_stage1_qp(30), RefGroup::High);
        for g in [RefGroup::Low, RefGroup::Medium, RefGroup::High, RefGroup::Overall] {
            assert_eq!(RefGroup::parse(g.as_str()), Some(g));
        }
        assert_eq!(RefGroup::parse("Ultra"), None);
    }

    #[test]
    fn report_files_and_round_trip() {
        let a = curve("alpha=0", &[(0.1, 30.0), (0.2, 33.0), (0.4, 36.0), (0.8, 38.5)]);
        let b = curve("alpha=0.2", &[(0.1, 30.2), (0.2, 33.3), (0.4, 36.1), (0.8, 38.6)]);
        let r = bd_rate(&a, &b).unwrap();
        let inputs = ReportInputs {
            curves: vec![(RefGroup::Low, a), (RefGroup::Low, b)],
            bd_rows: vec![BdRow::new(RefGroup::Low, "alpha=0.2", "alpha=0", &r)],
            complexity: vec![],
        };
        let dir = tempfile::tempdir().unwrap();
        let files = emit_report(&inputs, dir.path()).unwrap();
        assert_eq!(files.len(), 2);
        assert!(files.iter().any(|f| f.extension().unwrap() == "svg"));
        let first: Vec<Vec<u8>> = files.iter().map(|f| fs::read(f).unwrap()).collect();
        emit_report(&inputs, dir.path()).unwrap();
        let second: Vec<Vec<u8>> = files.iter().map(|f| fs::read(f).unwrap()).collect();
        assert_eq!(first, second);
        assert_eq!(read_bd_csv(&dir.path().join(BD_CSV)).unwrap(), inputs.bd_rows);

        let cx = vec![ComplexityRow { name: "pt".into(), macs: 1_400_000_000, params: 800_000, relative_encode_time: 121.3 }];
        let inputs = ReportInputs { complexity: cx.clone(), ..inputs };
        emit_report(&inputs, dir.path()).unwrap();
        assert_eq!(read_complexity_csv(&dir.path().join(COMPLEXITY_CSV)).unwrap(), cx);
    }
}
