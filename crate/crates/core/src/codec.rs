//! Loss mixing with magnitude alignment, and a toy overfitted codec: a
//! coordinate MLP fitted to one clip whose quantized weights are the
//! bitstream.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eval::{psnr, RDCurve, RDPoint};
use crate::media_io::{ColorSpace, PatchShape, VideoClip};
use crate::net::linalg::{gemm, silu, silu_grad, Op};
use crate::net::{pool_clip, read_archive, write_archive, BranchFeatures, InputColor, QualityNet, QualityScore, Volume};
use crate::optim::Adam;
use crate::sampler::{derive_seed, draw_origins};
use crate::{Error, Result};

pub const ALIGNMENT_WINDOW: usize = 5;
pub const DEFAULT_ALPHA: f64 = 0.2;
pub const ALPHA_GRID: [f64; 5] = [0.0, 0.1, 0.2, 0.3, 0.4];
pub const CODEC_ID: &str = "toy_inr";
pub const ARCHIVE_KIND: &str = "toy_inr";

/// Luma weights used when a luma quality net scores an RGB reconstruction.
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseLoss {
    Mse,
    L1,
}

impl BaseLoss {
    /// Mean loss over `out` against `target` and its gradient.
    fn eval(self, out: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
        let n = out.len() as f64;
        match self {
            BaseLoss::Mse => {
                let v = out.iter().zip(target).map(|(o, r)| (o - r) * (o - r)).sum::<f64>() / n;
                (v, out.iter().zip(target).map(|(o, r)| 2.0 * (o - r) / n).collect())
            }
            BaseLoss::L1 => {
                let v = out.iter().zip(target).map(|(o, r)| (o - r).abs()).sum::<f64>() / n;
                let g = out
                    .iter()
                    .zip(target)
                    .map(|(o, r)| {
                        let d = o - r;
                        if d > 0.0 {
                            1.0 / n
                        } else if d < 0.0 {
                            -1.0 / n
                        } else {
                            0.0
                        }
                    })
                    .collect();
                (v, g)
            }
        }
    }
}

/// `total = (1 − α)·base + α·s·pt`, where `s` aligns the PT magnitude to the
/// base loss over the first `window` iterations and is then frozen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossMixer {
    pub alpha: f64,
    pub base_kind: BaseLoss,
    pub window: usize,
    scale: Option<f64>,
    base_sum: f64,
    pt_sum: f64,
    seen: usize,
    last_scale: f64,
}

impl LossMixer {
    pub fn new(alpha: f64, base_kind: BaseLoss) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidArgument(format!("alpha {alpha} is outside [0, 1]")));
        }
        Ok(LossMixer {
            alpha,
            base_kind,
            window: ALIGNMENT_WINDOW,
            scale: None,
            base_sum: 0.0,
            pt_sum: 0.0,
            seen: 0,
            last_scale: 0.0,
        })
    }

    pub fn with_window(mut self, window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::InvalidArgument("alignment window must be at least 1".into()));
        }
        self.window = window;
        Ok(self)
    }

    /// Starts from an already known scale; no alignment takes place.
    pub fn with_fixed_scale(mut self, s: f64) -> Result<Self> {
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::InvalidArgument(format!("alignment scale {s} must be positive")));
        }
        self.scale = Some(s);
        self.last_scale = s;
        Ok(self)
    }

    /// The frozen scale, once the window has passed.
    pub fn scale(&self) -> Option<f64> {
        self.scale
    }

    /// Fresh copy with the same settings and no alignment state.
    pub fn reset(&self) -> Self {
        LossMixer {
            scale: None,
            base_sum: 0.0,
            pt_sum: 0.0,
            seen: 0,
            last_scale: 0.0,
            ..self.clone()
        }
    }

    /// `(∂total/∂base, ∂total/∂pt)` for the most recent call.
    pub fn coefficients(&self) -> (f64, f64) {
        (1.0 - self.alpha, self.alpha * self.last_scale)
    }

    fn running_ratio(&self) -> Result<f64> {
        if self.seen == 0 {
            return Err(Error::Precondition("no iterations observed inside the alignment window".into()));
        }
        let pt_mean = self.pt_sum / self.seen as f64;
        if pt_mean == 0.0 {
            return Err(Error::Numerical(
                "PT mean is zero over the alignment window; the quality net output is degenerate".into(),
            ));
        }
        // Magnitude only: PT values are negated scores and may be negative.
        Ok((self.base_sum / self.seen as f64) / pt_mean.abs())
    }

    pub fn mix_loss(&mut self, base: f64, pt: f64, iteration: usize) -> Result<f64> {
        if !base.is_finite() || !pt.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss input (base {base}, pt {pt})")));
        }
        if self.alpha == 0.0 {
            self.last_scale = self.scale.unwrap_or(0.0);
            return Ok(base);
        }
        let s = match self.scale {
            Some(s) => s,
            None if iteration < self.window => {
                self.base_sum += base;
                self.pt_sum += pt;
                self.seen += 1;
                let s = self.running_ratio()?;
                if iteration + 1 == self.window {
                    self.scale = Some(s);
                }
                s
            }
            None => {
                let s = self.running_ratio()?;
                self.scale = Some(s);
                s
            }
        };
        self.last_scale = s;
        Ok((1.0 - self.alpha) * base + self.alpha * s * pt)
    }
}

/// Size and precision of one coordinate network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InrConfig {
    pub hidden: usize,
    /// Number of hidden layers.
    pub depth: usize,
    /// Positional-encoding octaves per coordinate.
    pub freqs: usize,
    pub weight_bits: u8,
}

impl Default for InrConfig {
    fn default() -> Self {
        InrConfig {
            hidden: 32,
            depth: 2,
            freqs: 6,
            weight_bits: 8,
        }
    }
}

impl InrConfig {
    pub fn input_dim(&self) -> usize {
        3 + 6 * self.freqs
    }

    fn layer_dims(&self, channels: usize) -> Vec<(usize, usize)> {
        let mut dims = vec![(self.input_dim(), self.hidden)];
        for _ in 1..self.depth {
            dims.push((self.hidden, self.hidden));
        }
        dims.push((self.hidden, channels));
        dims
    }

    pub fn param_count(&self, channels: usize) -> usize {
        self.layer_dims(channels).iter().map(|(i, o)| i * o + o).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.depth == 0 {
            return Err(Error::InvalidArgument("codec hidden width and depth must be positive".into()));
        }
        if !(2..=16).contains(&self.weight_bits) {
            return Err(Error::InvalidArgument(format!(
                "weight_bits {} is outside [2, 16]",
                self.weight_bits
            )));
        }
        Ok(())
    }
}

/// The default rate ladder: four widths at 8 bits.
pub fn default_size_grid() -> Vec<InrConfig> {
    [12, 20, 32, 48]
        .into_iter()
        .map(|hidden| InrConfig {
            hidden,
            ..InrConfig::default()
        })
        .collect()
}

pub fn bits_per_pixel(params: usize, bits: u8, frames: usize, height: usize, width: usize) -> f64 {
    (params as f64 * bits as f64) / (frames * height * width) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// `[outputs][inputs]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InrWeights {
    pub config: InrConfig,
    pub channels: usize,
    pub layers: Vec<Dense>,
}

impl InrWeights {
    pub fn zeros(config: &InrConfig, channels: usize) -> Result<Self> {
        config.validate()?;
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!("codec supports 1 or 3 channels, got {channels}")));
        }
        let layers = config
            .layer_dims(channels)
            .into_iter()
            .map(|(i, o)| Dense {
                inputs: i,
                outputs: o,
                weight: vec![0.0; i * o],
                bias: vec![0.0; o],
            })
            .collect();
        Ok(InrWeights {
            config: *config,
            channels,
            layers,
        })
    }

    /// He-uniform hidden layers; the output layer starts small with a
    /// mid-gray bias.
    pub fn init(config: &InrConfig, channels: usize, seed: u64) -> Result<Self> {
        let mut w = InrWeights::zeros(config, channels)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = w.layers.len() - 1;
        for (k, layer) in w.layers.iter_mut().enumerate() {
            let bound = if k == last {
                0.1 / (layer.inputs as f64).sqrt()
            } else {
                (6.0 / layer.inputs as f64).sqrt()
            };
            for v in layer.weight.iter_mut() {
                *v = rng.gen_range(-bound..bound);
            }
            if k == last {
                layer.bias.fill(0.5);
            }
        }
        Ok(w)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    fn named_tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (k, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{k}.weight"), l.weight.as_slice()));
            out.push((format!("layer{k}.bias"), l.bias.as_slice()));
        }
        out
    }

    /// Uniform per-tensor quantization to `weight_bits` over each tensor's
    /// [min, max] range.
    pub fn quantized(&self) -> InrWeights {
        let levels = ((1u32 << self.config.weight_bits) - 1) as f64;
        let mut q = self.clone();
        for t in q.tensors_mut() {
            let lo = t.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !(hi > lo) {
                continue;
            }
            let step = (hi - lo) / levels;
            for v in t.iter_mut() {
                *v = lo + ((*v - lo) / step).round() * step;
            }
        }
        q
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        let header = serde_json::json!({ "inr": self.config, "channels": self.channels });
        write_archive(path, ARCHIVE_KIND, header, meta, &self.named_tensors())
    }

    pub fn load(path: &Path) -> Result<(InrWeights, serde_json::Value)> {
        let archive = read_archive(path)?;
        if archive.kind != ARCHIVE_KIND {
            return Err(Error::Checkpoint(format!(
                "{}: archive holds `{}`, expected `{ARCHIVE_KIND}`",
                path.display(),
                archive.kind
            )));
        }
        let config: InrConfig = serde_json::from_value(archive.config["inr"].clone())?;
        let channels = archive.config["channels"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("archive header lacks `channels`".into()))? as usize;
        let mut w = InrWeights::zeros(&config, channels)?;
        for (k, layer) in w.layers.iter_mut().enumerate() {
            for (name, dst) in [("weight", &mut layer.weight), ("bias", &mut layer.bias)] {
                let src = archive.tensor(&format!("layer{k}.{name}"))?;
                if src.len() != dst.len() {
                    return Err(Error::Checkpoint(format!("layer{k}.{name}: length {} != {}", src.len(), dst.len())));
                }
                dst.copy_from_slice(src);
            }
        }
        Ok((w, archive.meta))
    }
}

fn unit_coord(i: usize, n: usize) -> f64 {
    if n > 1 {
        2.0 * i as f64 / (n - 1) as f64 - 1.0
    } else {
        0.0
    }
}

/// Encoded coordinates, `[T·H·W][input_dim]`, pixel order `(t, y, x)`.
pub fn coordinate_grid(config: &InrConfig, frames: usize, height: usize, width: usize) -> Vec<f64> {
    let dim = config.input_dim();
    let mut out = Vec::with_capacity(frames * height * width * dim);
    for t in 0..frames {
        for y in 0..height {
            for x in 0..width {
                let v = [unit_coord(x, width), unit_coord(y, height), unit_coord(t, frames)];
                out.extend_from_slice(&v);
                for k in 0..config.freqs {
                    let f = (1u64 << k) as f64 * std::f64::consts::PI;
                    for c in v {
                        out.push((f * c).sin());
                        out.push((f * c).cos());
                    }
                }
            }
        }
    }
    out
}

struct MlpTrace {
    /// Inputs to every layer (the grid, then post-activation hiddens).
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Vec<f64>>,
}

/// Runs the MLP over `p` rows of `x`; returns `[p][channels]`.
fn mlp_forward(w: &InrWeights, x: &[f64], p: usize, keep: bool) -> (Vec<f64>, Option<MlpTrace>) {
    let mut inputs = Vec::new();
    let mut pre = Vec::new();
    let mut cur = x.to_vec();
    let last = w.layers.len() - 1;
    for (k, l) in w.layers.iter().enumerate() {
        let mut z = Vec::with_capacity(p * l.outputs);
        for _ in 0..p {
            z.extend_from_slice(&l.bias);
        }
        gemm(p, l.inputs, l.outputs, 1.0, &cur, Op::N, &l.weight, Op::T, 1.0, &mut z);
        let next = if k == last { z.clone() } else { z.iter().map(|&v| silu(v)).collect() };
        if keep {
            inputs.push(std::mem::replace(&mut cur, next));
            if k != last {
                pre.push(z);
            }
        } else {
            cur = next;
        }
    }
    (cur, keep.then_some(MlpTrace { inputs, pre }))
}

fn mlp_backward(w: &InrWeights, trace: &MlpTrace, dout: &[f64], p: usize, grad: &mut InrWeights) {
    let mut d = dout.to_vec();
    for k in (0..w.layers.len()).rev() {
        let l = &w.layers[k];
        let g = &mut grad.layers[k];
        for row in d.chunks_exact(l.outputs) {
            for (b, v) in g.bias.iter_mut().zip(row) {
                *b += v;
            }
        }
        gemm(l.outputs, p, l.inputs, 1.0, &d, Op::T, &trace.inputs[k], Op::N, 1.0, &mut g.weight);
        if k == 0 {
            break;
        }
        let mut dx = vec![0.0; p * l.inputs];
        gemm(p, l.outputs, l.inputs, 1.0, &d, Op::N, &l.weight, Op::N, 0.0, &mut dx);
        for (v, &z) in dx.iter_mut().zip(&trace.pre[k - 1]) {
            *v *= silu_grad(z);
        }
        d = dx;
    }
}

fn check_dims(w: &InrWeights, color: ColorSpace) -> Result<()> {
    if w.channels != color.channels() {
        return Err(Error::ShapeMismatch(format!(
            "weights produce {} channels, clip expects {}",
            w.channels,
            color.channels()
        )));
    }
    Ok(())
}

fn clip_from_output(out: &[f64], dims: (usize, usize, usize), color: ColorSpace, id: &str) -> Result<VideoClip> {
    let (t, h, w) = dims;
    let data = out.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    VideoClip::new(id, t, h, w, color, Default::default(), data)
}

/// Evaluates the network on the `(t, y, x)` grid at double precision.
pub fn decode(weights: &InrWeights, dims: (usize, usize, usize), color: ColorSpace) -> Result<VideoClip> {
    check_dims(weights, color)?;
    let (t, h, w) = dims;
    let grid = coordinate_grid(&weights.config, t, h, w);
    let (out, _) = mlp_forward(weights, &grid, t * h * w, false);
    clip_from_output(&out, dims, color, "decoded")
}

/// Single-precision decode, for checking that the bitstream does not depend
/// on f64 arithmetic.
pub fn decode_f32(weights: &InrWeights, dims: (usize, usize, usize), color: ColorSpace) -> Result<VideoClip> {
    check_dims(weights, color)?;
    let (t, h, w) = dims;
    let grid: Vec<f32> = coordinate_grid(&weights.config, t, h, w).into_iter().map(|v| v as f32).collect();
    let dim = weights.config.input_dim();
    let last = weights.layers.len() - 1;
    let mut out = Vec::with_capacity(t * h * w * weights.channels);
    for row in grid.chunks_exact(dim) {
        let mut cur: Vec<f32> = row.to_vec();
        for (k, l) in weights.layers.iter().enumerate() {
            let next: Vec<f32> = (0..l.outputs)
                .map(|o| {
                    let wrow = &l.weight[o * l.inputs..(o + 1) * l.inputs];
                    let z = cur.iter().zip(wrow).fold(l.bias[o] as f32, |acc, (a, b)| acc + a * *b as f32);
                    if k == last {
                        z
                    } else {
                        z / (1.0 + (-z).exp())
                    }
                })
                .collect();
            cur = next;
        }
        out.extend(cur.into_iter().map(f64::from));
    }
    clip_from_output(&out, dims, color, "decoded")
}

/// Encoder settings that are not part of the bitstream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncodeSettings {
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Fixed windows scored by the quality net at every step.
    pub pt_windows: usize,
    pub pt_window: PatchShape,
}

impl Default for EncodeSettings {
    fn default() -> Self {
        EncodeSettings {
            steps: 600,
            learning_rate: 5e-3,
            seed: 0,
            pt_windows: 4,
            pt_window: PatchShape::new(4, 32, 32),
        }
    }
}

/// Loss growth over the first iteration that aborts an encode.
const DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Debug, Clone)]
pub struct Encoded {
    /// Quantized weights; `decode(&weights, ..)` reproduces `decoded`.
    pub weights: InrWeights,
    pub bpp: f64,
    pub decoded: VideoClip,
    pub final_loss: f64,
    pub alignment_scale: Option<f64>,
}

/// Quality net plus reference features over the fixed PT windows.
struct PtContext<'a> {
    net: &'a QualityNet,
    origins: Vec<(usize, usize, usize)>,
    shape: PatchShape,
    refs: Vec<BranchFeatures>,
}

/// Copies one window of `[P][C]` values into a network volume. A luma network
/// fed an RGB clip sees a weighted sum of the channels.
fn window_volume(
    values: &[f64],
    dims: (usize, usize, usize, usize),
    origin: (usize, usize, usize),
    shape: PatchShape,
    input: InputColor,
) -> Result<Volume> {
    let (_, h, w, c) = dims;
    let (x0, y0, t0) = origin;
    let nc = input.channels();
    let mut data = vec![0.0; nc * shape.volume()];
    let plane = shape.volume();
    for tt in 0..shape.t {
        for yy in 0..shape.h {
            for xx in 0..shape.w {
                let p = ((t0 + tt) * h + y0 + yy) * w + x0 + xx;
                let q = (tt * shape.h + yy) * shape.w + xx;
                if nc == c {
                    for ch in 0..c {
                        data[ch * plane + q] = values[p * c + ch];
                    }
                } else {
                    data[q] = (0..3).map(|ch| LUMA[ch] * values[p * 3 + ch]).sum();
                }
            }
        }
    }
    Volume::new(nc, shape.t, shape.h, shape.w, data)
}

/// Scatters a window gradient back onto `[P][C]`.
fn scatter_window(
    grad: &mut [f64],
    dvol: &[f64],
    dims: (usize, usize, usize, usize),
    origin: (usize, usize, usize),
    shape: PatchShape,
    scale: f64,
) {
    let (_, h, w, c) = dims;
    let (x0, y0, t0) = origin;
    let plane = shape.volume();
    let nc = dvol.len() / plane;
    for tt in 0..shape.t {
        for yy in 0..shape.h {
            for xx in 0..shape.w {
                let p = ((t0 + tt) * h + y0 + yy) * w + x0 + xx;
                let q = (tt * shape.h + yy) * shape.w + xx;
                if nc == c {
                    for ch in 0..c {
                        grad[p * c + ch] += scale * dvol[ch * plane + q];
                    }
                } else {
                    for ch in 0..3 {
                        grad[p * 3 + ch] += scale * LUMA[ch] * dvol[q];
                    }
                }
            }
        }
    }
}

impl<'a> PtContext<'a> {
    fn new(net: &'a QualityNet, reference: &[f64], dims: (usize, usize, usize, usize), s: &EncodeSettings) -> Result<Self> {
        let (t, h, w, c) = dims;
        let input = net.config.input;
        if !(input.channels() == c || (input == InputColor::Luma && c == 3)) {
            return Err(Error::ShapeMismatch(format!(
                "a {:?} quality net cannot score a {c}-channel clip",
                input
            )));
        }
        let shape = s.pt_window;
        if shape.t > t || shape.h > h || shape.w > w {
            return Err(Error::ShapeMismatch(format!(
                "PT window {}x{}x{} exceeds the clip {t}x{h}x{w}",
                shape.t, shape.h, shape.w
            )));
        }
        if s.pt_windows == 0 {
            return Err(Error::InvalidArgument("pt_windows must be positive when alpha > 0".into()));
        }
        let origins = draw_origins((t, h, w), shape, s.pt_windows, derive_seed(s.seed, "pt_windows"));
        let refs = origins
            .iter()
            .map(|&o| net.features(&window_volume(reference, dims, o, shape, input)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(PtContext { net, origins, shape, refs })
    }

    /// PT value (negated pooled score) and its gradient on `[P][C]`. The net
    /// sees the output clamped to the displayable range; clamped samples get
    /// no gradient.
    fn eval(&self, out: &[f64], dims: (usize, usize, usize, usize)) -> Result<(f64, Vec<f64>)> {
        let input = self.net.config.input;
        let clamped: Vec<f64> = out.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let mut scores = Vec::new();
        let mut dvols = Vec::new();
        for (o, rf) in self.origins.iter().zip(&self.refs) {
            let vol = window_volume(&clamped, dims, *o, self.shape, input)?;
            let (s, dx) = self.net.score_against(rf, &vol, true)?;
            scores.push(QualityScore {
                value: s,
                grad_enabled: true,
            });
            dvols.push(dx.expect("input gradient requested"));
        }
        let (pooled, weights) = pool_clip(&scores, self.net.config.pooling)?;
        let mut grad = vec![0.0; out.len()];
        for ((o, dv), wgt) in self.origins.iter().zip(&dvols).zip(&weights) {
            scatter_window(&mut grad, dv, dims, *o, self.shape, -wgt);
        }
        for (g, v) in grad.iter_mut().zip(out) {
            if !(0.0..=1.0).contains(v) {
                *g = 0.0;
            }
        }
        Ok((-pooled.value, grad))
    }
}

/// Overfits a coordinate network to `reference` under the mixed loss, then
/// quantizes it. `pt_net` is required when `mixer.alpha > 0`.
pub fn overfit_encode(
    reference: &VideoClip,
    config: &InrConfig,
    mixer: &LossMixer,
    settings: &EncodeSettings,
    pt_net: Option<&QualityNet>,
) -> Result<Encoded> {
    config.validate()?;
    if settings.steps == 0 || !(settings.learning_rate > 0.0) {
        return Err(Error::InvalidArgument("encode needs positive steps and learning rate".into()));
    }
    let dims = reference.dims();
    let (t, h, w, c) = dims;
    let p = t * h * w;
    let target: Vec<f64> = reference.samples().iter().map(|&v| v as f64 / 255.0).collect();
    let mut mixer = mixer.reset();
    let pt = if mixer.alpha > 0.0 {
        let net = pt_net.ok_or_else(|| Error::Precondition("alpha > 0 needs a quality net".into()))?;
        Some(PtContext::new(net, &target, dims, settings)?)
    } else {
        None
    };

    let grid = coordinate_grid(config, t, h, w);
    let mut weights = InrWeights::init(config, c, derive_seed(settings.seed, "inr_init"))?;
    let mut opt = Adam::new(settings.learning_rate);
    let mut first_base = None;
    let mut final_loss = f64::NAN;
    for step in 0..settings.steps {
        let (out, trace) = mlp_forward(&weights, &grid, p, true);
        let (base, dbase) = mixer.base_kind.eval(&out, &target);
        let (ptv, dpt) = match &pt {
            Some(ctx) => {
                let (v, g) = ctx.eval(&out, dims)?;
                (v, Some(g))
            }
            None => (0.0, None),
        };
        let total = mixer.mix_loss(base, ptv, step)?;
        if !total.is_finite() {
            return Err(Error::Numerical(format!("non-finite codec loss at step {step}")));
        }
        let reference_base = *first_base.get_or_insert(base);
        if base > DIVERGENCE_FACTOR * reference_base.max(1e-6) {
            return Err(Error::Numerical(format!(
                "encode diverged at step {step}: base loss {base:.4e} vs initial {reference_base:.4e}"
            )));
        }
        final_loss = total;

        let (cb, cp) = mixer.coefficients();
        let mut dout: Vec<f64> = dbase.iter().map(|g| cb * g).collect();
        if let Some(g) = dpt {
            for (d, v) in dout.iter_mut().zip(g) {
                *d += cp * v;
            }
        }
        let mut grad = InrWeights::zeros(config, c)?;
        mlp_backward(&weights, trace.as_ref().expect("trace"), &dout, p, &mut grad);
        // Cosine decay to a tenth of the initial rate.
        let progress = step as f64 / settings.steps as f64;
        opt.lr = settings.learning_rate * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        let grads: Vec<Vec<f64>> = grad.layers.into_iter().flat_map(|l| [l.weight, l.bias]).collect();
        opt.step(weights.tensors_mut(), grads.iter().collect());
        if !weights.is_finite() {
            return Err(Error::Numerical(format!("non-finite codec weights after step {step}")));
        }
    }

    let weights = weights.quantized();
    let decoded = decode(&weights, (t, h, w), reference.color())?.with_id(format!("{}__inr", reference.clip_id));
    Ok(Encoded {
        bpp: bits_per_pixel(weights.param_count(), config.weight_bits, t, h, w),
        weights,
        decoded,
        final_loss,
        alignment_scale: mixer.scale(),
    })
}

/// One encode inside a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodeSummary {
    pub config: InrConfig,
    pub seed: u64,
    pub bpp: f64,
    pub psnr_vs_reference: f64,
    pub psnr_vs_source: Option<f64>,
    pub alignment_scale: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RdSweep {
    pub vs_reference: RDCurve,
    pub vs_source: Option<RDCurve>,
    pub encodes: Vec<EncodeSummary>,
}

pub const METRIC_VS_REFERENCE: &str = "psnr_vs_reference";
pub const METRIC_VS_SOURCE: &str = "psnr_vs_source";

/// Encodes `reference` at every size in `grid` and every seed. Quality is
/// averaged over seeds per size; a point's `seed` field is the first seed.
pub fn rd_sweep(
    reference: &VideoClip,
    source: Option<&VideoClip>,
    grid: &[InrConfig],
    mixer: &LossMixer,
    settings: &EncodeSettings,
    pt_net: Option<&QualityNet>,
    seeds: &[u64],
) -> Result<RdSweep> {
    if grid.len() < 3 {
        return Err(Error::InvalidArgument(format!("rd sweep needs at least 3 sizes, got {}", grid.len())));
    }
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("rd sweep needs at least one seed".into()));
    }
    if let Some(s) = source {
        if s.dims() != reference.dims() {
            return Err(Error::ShapeMismatch("source and reference dimensions differ".into()));
        }
    }
    let channels = reference.channels();
    if grid
        .windows(2)
        .any(|w| w[1].param_count(channels) * w[1].weight_bits as usize <= w[0].param_count(channels) * w[0].weight_bits as usize)
    {
        return Err(Error::InvalidArgument("size grid must be strictly increasing in bits".into()));
    }
    let jobs: Vec<(usize, u64)> = (0..grid.len()).flat_map(|i| seeds.iter().map(move |&s| (i, s))).collect();
    let results: Vec<(usize, Result<EncodeSummary>)> = jobs
        .par_iter()
        .map(|&(i, seed)| {
            let s = EncodeSettings {
                seed,
                ..settings.clone()
            };
            let r = overfit_encode(reference, &grid[i], mixer, &s, pt_net).and_then(|e| {
                Ok(EncodeSummary {
                    config: grid[i],
                    seed,
                    bpp: e.bpp,
                    psnr_vs_reference: psnr(&e.decoded, reference)?,
                    psnr_vs_source: source.map(|s| psnr(&e.decoded, s)).transpose()?,
                    alignment_scale: e.alignment_scale,
                })
            });
            (i, r)
        })
        .collect();

    let mut by_size: BTreeMap<usize, Vec<EncodeSummary>> = BTreeMap::new();
    let mut encodes = Vec::new();
    for (i, r) in results {
        match r {
            Ok(s) => {
                by_size.entry(i).or_default().push(s.clone());
                encodes.push(s);
            }
            Err(e) => log::warn!("encode at size {i} failed: {e}"),
        }
    }
    if by_size.len() < 3 {
        return Err(Error::Numerical(format!(
            "only {} of {} sizes encoded successfully",
            by_size.len(),
            grid.len()
        )));
    }
    let point = |runs: &[EncodeSummary], metric: &str, q: &dyn Fn(&EncodeSummary) -> f64| RDPoint {
        bpp: runs[0].bpp,
        quality: runs.iter().map(q).sum::<f64>() / runs.len() as f64,
        metric_id: metric.into(),
        codec_id: CODEC_ID.into(),
        alpha: mixer.alpha,
        seed: seeds[0],
    };
    let label = |metric: &str| format!("{CODEC_ID}@{:.2}/{metric}", mixer.alpha);
    let vs_reference = RDCurve::new(
        label(METRIC_VS_REFERENCE),
        by_size.values().map(|r| point(r, METRIC_VS_REFERENCE, &|s| s.psnr_vs_reference)).collect(),
    )?;
    let vs_source = match source {
        Some(_) => Some(RDCurve::new(
            label(METRIC_VS_SOURCE),
            by_size
                .values()
                .map(|r| point(r, METRIC_VS_SOURCE, &|s| s.psnr_vs_source.expect("source given")))
                .collect(),
        )?),
        None => None,
    };
    Ok(RdSweep {
        vs_reference,
        vs_source,
        encodes,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct RdRow {
    codec_id: String,
    alpha: f64,
    bpp: f64,
    metric_id: String,
    quality: f64,
    seed: u64,
}

/// Writes curves as rows of `codec_id, alpha, bpp, metric_id, quality, seed`.
pub fn write_rd_csv(path: &Path, curves: &[RDCurve]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for c in curves {
        for p in &c.points {
            w.serialize(RdRow {
                codec_id: p.codec_id.clone(),
                alpha: p.alpha,
                bpp: p.bpp,
                metric_id: p.metric_id.clone(),
                quality: p.quality,
                seed: p.seed,
            })?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads curves back, one per `(codec_id, alpha, metric_id)` group in order
/// of first appearance.
pub fn read_rd_csv(path: &Path) -> Result<Vec<RDCurve>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut groups: Vec<((String, u64, String), Vec<RDPoint>)> = Vec::new();
    for row in r.deserialize() {
        let row: RdRow = row?;
        let key = (row.codec_id.clone(), row.alpha.to_bits(), row.metric_id.clone());
        let point = RDPoint {
            bpp: row.bpp,
            quality: row.quality,
            metric_id: row.metric_id,
            codec_id: row.codec_id,
            alpha: row.alpha,
            seed: row.seed,
        };
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, pts)) => pts.push(point),
            None => groups.push((key, vec![point])),
        }
    }
    groups
        .into_iter()
        .map(|((codec, _, metric), pts)| {
            let alpha = pts[0].alpha;
            RDCurve::new(format!("{codec}@{alpha:.2}/{metric}"), pts)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetConfig;
    use crate::synth::{synthetic_clip, SynthSpec};
    use proptest::prelude::{prop_assert, proptest};

    fn smooth_clip(t: usize, h: usize, w: usize) -> VideoClip {
        let mut data = Vec::new();
        for f in 0..t {
            for y in 0..h {
                for x in 0..w {
                    let v = 0.5
                        + 0.3 * (x as f64 / w as f64 * 3.0 + f as f64 * 0.2).sin()
                        + 0.15 * (y as f64 / h as f64 * 2.0).cos();
                    data.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        VideoClip::new("smooth", t, h, w, ColorSpace::Luma, Default::default(), data).unwrap()
    }

    fn mixed(mixer: &mut LossMixer, seq: &[(f64, f64)]) -> Vec<f64> {
        seq.iter().enumerate().map(|(i, &(b, p))| mixer.mix_loss(b, p, i).unwrap()).collect()
    }

    #[test]
    fn alpha_endpoints() {
        let mut m = LossMixer::new(0.0, BaseLoss::Mse).unwrap();
        for (i, b) in [0.3, 0.1, 7.0, 0.02, 1.0, 5.0, 0.4].into_iter().enumerate() {
            assert_eq!(m.mix_loss(b, 123.0 + i as f64, i).unwrap(), b);
        }
        let mut m = LossMixer::new(1.0, BaseLoss::Mse).unwrap().with_fixed_scale(1.0).unwrap();
        for (i, p) in [0.3, -2.0, 5.5].into_iter().enumerate() {
            assert_eq!(m.mix_loss(9.0, p, i).unwrap(), p);
        }
        assert!(LossMixer::new(1.2, BaseLoss::L1).is_err());
        assert!(LossMixer::new(-0.1, BaseLoss::L1).is_err());
    }

    #[test]
    fn alignment_window_example() {
        let mut m = LossMixer::new(0.2, BaseLoss::Mse).unwrap();
        mixed(&mut m, &[(0.01, 2.0); 5]);
        assert!((m.scale().unwrap() - 0.005).abs() < 1e-15);
        let total = m.mix_loss(0.008, 1.5, 5).unwrap();
        let expected = 0.8 * 0.008 + 0.2 * (0.01 / 2.0) * 1.5;
        assert!((total - expected).abs() < 1e-15);
        assert!((total - 0.0079).abs() < 1e-12);
    }

    #[test]
    fn scale_uses_exactly_the_window() {
        let seq = [(0.5, 1.0), (0.3, 2.0), (0.2, 4.0), (0.1, 1.0), (0.4, 2.0), (90.0, 0.001), (80.0, 0.002)];
        let mut m = LossMixer::new(0.3, BaseLoss::L1).unwrap();
        let totals = mixed(&mut m, &seq);
        let base_mean = (0.5 + 0.3 + 0.2 + 0.1 + 0.4) / 5.0;
        let pt_mean = (1.0 + 2.0 + 4.0 + 1.0 + 2.0) / 5.0;
        let s = base_mean / pt_mean;
        assert!((m.scale().unwrap() - s).abs() < 1e-15);
        // Provisional ratio inside the window.
        let s2 = ((0.5 + 0.3) / 2.0) / ((1.0 + 2.0) / 2.0);
        assert!((totals[1] - (0.7 * 0.3 + 0.3 * s2 * 2.0)).abs() < 1e-15);
        assert!((totals[6] - (0.7 * 80.0 + 0.3 * s * 0.002)).abs() < 1e-12);
    }

    #[test]
    fn zero_pt_mean_is_an_error() {
        let mut m = LossMixer::new(0.2, BaseLoss::Mse).unwrap();
        assert!(matches!(m.mix_loss(0.1, 0.0, 0), Err(Error::Numerical(_))));
        assert!(matches!(m.mix_loss(f64::NAN, 1.0, 1), Err(Error::Numerical(_))));
    }

    proptest! {
        #[test]
        fn pt_rescaling_leaves_weighted_pt_unchanged(
            base in proptest::collection::vec(0.001f64..1.0, 8),
            pt in proptest::collection::vec(0.1f64..10.0, 8),
            c in 0.01f64..100.0,
            alpha in 0.05f64..1.0,
        ) {
            let mut m1 = LossMixer::new(alpha, BaseLoss::Mse).unwrap();
            let mut m2 = m1.clone();
            for i in 0..8 {
                m1.mix_loss(base[i], pt[i], i).unwrap();
                m2.mix_loss(base[i], c * pt[i], i).unwrap();
                if i >= 5 {
                    let a = m1.coefficients().1 * pt[i];
                    let b = m2.coefficients().1 * c * pt[i];
                    prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
                }
            }
        }

        #[test]
        fn mixing_is_homogeneous_once_aligned(b in 0.0f64..10.0, p in -10.0f64..10.0, l in 0.0f64..5.0) {
            let m = LossMixer::new(0.2, BaseLoss::Mse).unwrap().with_fixed_scale(0.37).unwrap();
            let t1 = m.clone().mix_loss(l * b, l * p, 9).unwrap();
            let t2 = m.clone().mix_loss(b, p, 9).unwrap();
            prop_assert!((t1 - l * t2).abs() <= 1e-12 * (1.0 + t1.abs()));
        }
    }

    #[test]
    fn bpp_formula() {
        assert!((bits_per_pixel(1000, 8, 12, 64, 64) - 8000.0 / 49152.0).abs() < 1e-15);
        assert!((bits_per_pixel(1000, 8, 12, 64, 64) - 0.16276).abs() < 1e-5);
        let cfg = InrConfig::default();
        let w = InrWeights::init(&cfg, 1, 0).unwrap();
        assert_eq!(w.param_count(), cfg.param_count(1));
        assert_eq!(cfg.param_count(1), 39 * 32 + 32 + 32 * 32 + 32 + 32 + 1);
    }

    #[test]
    fn zero_weights_decode_to_zero() {
        let w = InrWeights::zeros(&InrConfig::default(), 1).unwrap();
        let clip = decode(&w, (2, 8, 8), ColorSpace::Luma).unwrap();
        assert!(clip.samples().iter().all(|&v| v == 0));
        assert!(decode(&w, (2, 8, 8), ColorSpace::Rgb).is_err());
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let cfg = InrConfig {
            hidden: 5,
            depth: 2,
            freqs: 1,
            weight_bits: 8,
        };
        let w = InrWeights::init(&cfg, 3, 4).unwrap();
        let p = 6;
        let grid = coordinate_grid(&cfg, 1, 2, 3);
        let target: Vec<f64> = (0..p * 3).map(|i| (i as f64 * 0.37).sin() * 0.5 + 0.5).collect();
        let loss = |w: &InrWeights| BaseLoss::Mse.eval(&mlp_forward(w, &grid, p, false).0, &target).0;
        let (out, trace) = mlp_forward(&w, &grid, p, true);
        let (_, dout) = BaseLoss::Mse.eval(&out, &target);
        let mut g = InrWeights::zeros(&cfg, 3).unwrap();
        mlp_backward(&w, &trace.unwrap(), &dout, p, &mut g);
        let eps = 1e-6;
        for k in 0..w.layers.len() {
            for idx in 0..w.layers[k].weight.len() {
                let mut a = w.clone();
                a.layers[k].weight[idx] += eps;
                let mut b = w.clone();
                b.layers[k].weight[idx] -= eps;
                let fd = (loss(&a) - loss(&b)) / (2.0 * eps);
                let an = g.layers[k].weight[idx];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "layer {k} w{idx}: {fd} vs {an}");
            }
            for idx in 0..w.layers[k].bias.len() {
                let mut a = w.clone();
                a.layers[k].bias[idx] += eps;
                let mut b = w.clone();
                b.layers[k].bias[idx] -= eps;
                let fd = (loss(&a) - loss(&b)) / (2.0 * eps);
                assert!((fd - g.layers[k].bias[idx]).abs() <= 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn quantization_keeps_range_and_level_count() {
        let cfg = InrConfig {
            weight_bits: 3,
            ..InrConfig::default()
        };
        let w = InrWeights::init(&cfg, 1, 9).unwrap();
        let q = w.quantized();
        for (a, b) in w.layers.iter().zip(&q.layers) {
            let lo = a.weight.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = a.weight.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let step = (hi - lo) / 7.0;
            for (x, y) in a.weight.iter().zip(&b.weight) {
                assert!((x - y).abs() <= step / 2.0 + 1e-12);
                let k = (y - lo) / step;
                assert!((k - k.round()).abs() < 1e-9 && (-1e-9..=7.0 + 1e-9).contains(&k));
            }
        }
    }

    #[test]
    fn fidelity_overfit_converges_and_is_deterministic() {
        let clip = smooth_clip(4, 16, 16);
        let cfg = InrConfig {
            hidden: 32,
            depth: 2,
            freqs: 4,
            weight_bits: 12,
        };
        let mixer = LossMixer::new(0.0, BaseLoss::Mse).unwrap();
        let s = EncodeSettings {
            steps: 800,
            learning_rate: 1e-2,
            seed: 3,
            ..EncodeSettings::default()
        };
        let e = overfit_encode(&clip, &cfg, &mixer, &s, None).unwrap();
        let mse = crate::eval::mse_u8(e.decoded.samples(), clip.samples()) / (255.0 * 255.0);
        assert!(mse < 1e-3, "mse {mse}");
        assert_eq!(e.bpp, bits_per_pixel(cfg.param_count(1), 12, 4, 16, 16));
        let again = overfit_encode(&clip, &cfg, &mixer, &s, None).unwrap();
        assert_eq!(again.bpp, e.bpp);
        assert_eq!(again.decoded, e.decoded);

        let redecoded = decode(&e.weights, (4, 16, 16), ColorSpace::Luma).unwrap();
        assert_eq!(redecoded.samples(), e.decoded.samples());
        let single = decode_f32(&e.weights, (4, 16, 16), ColorSpace::Luma).unwrap();
        let planar = |c: &VideoClip| c.samples().iter().map(|&v| v as i32).collect::<Vec<_>>();
        let worst = planar(&single).iter().zip(planar(&redecoded)).map(|(a, b)| (a - b).abs()).max().unwrap();
        assert!(worst <= 1, "f32 decode differs by {worst} levels");
    }

    #[test]
    fn pt_term_requires_a_net_and_runs_with_one() {
        let clip = synthetic_clip("c", &SynthSpec { frames: 4, height: 16, width: 16, detail: None }, 2).unwrap();
        let cfg = InrConfig {
            hidden: 8,
            depth: 1,
            freqs: 2,
            weight_bits: 8,
        };
        let mixer = LossMixer::new(0.2, BaseLoss::Mse).unwrap();
        let s = EncodeSettings {
            steps: 12,
            pt_windows: 2,
            pt_window: PatchShape::new(2, 8, 8),
            ..EncodeSettings::default()
        };
        assert!(matches!(overfit_encode(&clip, &cfg, &mixer, &s, None), Err(Error::Precondition(_))));
        let net = QualityNet::new(&NetConfig { channels: vec![2, 3], state_dim: 2, head_hidden: 4, ..NetConfig::default() }, 1).unwrap();
        let e = overfit_encode(&clip, &cfg, &mixer, &s, Some(&net)).unwrap();
        assert!(e.alignment_scale.unwrap() > 0.0);
        assert!(e.final_loss.is_finite());
    }

    #[test]
    fn pt_gradient_matches_finite_differences() {
        let clip = synthetic_clip("c", &SynthSpec { frames: 2, height: 8, width: 8, detail: None }, 5)
            .unwrap();
        let net = QualityNet::new(&NetConfig { channels: vec![2, 3], state_dim: 2, head_hidden: 4, ..NetConfig::default() }, 2).unwrap();
        let dims = clip.dims();
        let target: Vec<f64> = clip.samples().iter().map(|&v| v as f64 / 255.0).collect();
        let s = EncodeSettings {
            pt_windows: 3,
            pt_window: PatchShape::new(2, 4, 4),
            ..EncodeSettings::default()
        };
        let ctx = PtContext::new(&net, &target, dims, &s).unwrap();
        let out: Vec<f64> = target.iter().enumerate().map(|(i, v)| v + 0.05 * (i as f64).cos()).collect();
        let (_, g) = ctx.eval(&out, dims).unwrap();
        let eps = 1e-6;
        let mut checked = 0;
        for i in (0..out.len()).step_by(3) {
            let mut a = out.clone();
            a[i] += eps;
            let mut b = out.clone();
            b[i] -= eps;
            let fd = (ctx.eval(&a, dims).unwrap().0 - ctx.eval(&b, dims).unwrap().0) / (2.0 * eps);
            assert!((fd - g[i]).abs() <= 1e-5 * (1.0 + fd.abs()), "sample {i}: {fd} vs {}", g[i]);
            checked += 1;
        }
        assert!(checked > 10);
    }

    #[test]
    fn sweep_gives_one_point_per_size_and_round_trips_csv() {
        let clip = smooth_clip(2, 16, 16);
        let grid: Vec<InrConfig> = [2, 6, 16, 40]
            .into_iter()
            .map(|hidden| InrConfig {
                hidden,
                depth: 1,
                freqs: 3,
                weight_bits: 8,
            })
            .collect();
        let mixer = LossMixer::new(0.0, BaseLoss::Mse).unwrap();
        let s = EncodeSettings {
            steps: 300,
            learning_rate: 1e-2,
            ..EncodeSettings::default()
        };
        let sweep = rd_sweep(&clip, Some(&clip), &grid, &mixer, &s, None, &[1]).unwrap();
        let r = &sweep.vs_reference;
        assert_eq!(r.points.len(), 4);
        assert!(r.points.windows(2).all(|w| w[1].bpp > w[0].bpp));
        for (p, cfg) in r.points.iter().zip(&grid) {
            assert_eq!(p.bpp, bits_per_pixel(cfg.param_count(1), 8, 2, 16, 16));
        }
        assert!(r.points.windows(2).all(|w| w[1].quality >= w[0].quality), "{:?}", r.points);
        let vs = sweep.vs_source.unwrap();
        assert_eq!(vs.metric_id(), METRIC_VS_SOURCE);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rd.csv");
        write_rd_csv(&path, &[r.clone(), vs.clone()]).unwrap();
        let back = read_rd_csv(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].points, r.points);
        assert_eq!(back[1].points, vs.points);
        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("codec_id,alpha,bpp,metric_id,quality,seed"));

        assert!(rd_sweep(&clip, None, &grid[..2], &mixer, &s, None, &[1]).is_err());
    }

    #[test]
    fn weights_archive_round_trip() {
        let w = InrWeights::init(&InrConfig::default(), 3, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.ckpt");
        w.save(&p, serde_json::json!({"clip": "x"})).unwrap();
        let (back, meta) = InrWeights::load(&p).unwrap();
        assert_eq!(back, w);
        assert_eq!(meta["clip"], "x");
        let net = QualityNet::new(&NetConfig::small(), 0).unwrap();
        let q = dir.path().join("q.ckpt");
        net.save(&q, serde_json::Value::Null).unwrap();
        assert!(matches!(InrWeights::load(&q), Err(Error::Checkpoint(_))));
    }
}
