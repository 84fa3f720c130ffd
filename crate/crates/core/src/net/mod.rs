//! Siamese quality network: per-frame convolutional pyramid, a selective scan
//! over time at every level, pooled fusion of reference and distorted
//! features, and an MLP head that emits one unbounded score (higher is
//! better). Forward and backward passes are written out by hand in f64.

mod checkpoint;
mod complexity;
mod conv;
pub(crate) mod linalg;
mod scan;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{read_archive, write_archive, Archive, ARCHIVE_MAGIC, ARCHIVE_SCHEMA};
pub use complexity::{conv_macs, conv_params, count_complexity, Complexity};
pub use conv::Conv2d;
pub use scan::{selective_scan, Sequence, SsmParams};

use crate::error::{Error, Result};
use crate::media_io::{rgb_to_luma, Patch};
use conv::Geometry;
use linalg::{gemm, silu, silu_grad, Op};
use scan::{scan_backward, scan_forward, ScanTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InputColor {
    #[default]
    Luma,
    Rgb,
}

impl InputColor {
    pub fn channels(self) -> usize {
        match self {
            InputColor::Luma => 1,
            InputColor::Rgb => 3,
        }
    }
}

/// How patch scores are combined into a clip score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum PoolingMode {
    #[default]
    Mean,
    /// Softmax weights on `-score / temperature`, so weak patches dominate.
    Softmin { temperature: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub channels: Vec<usize>,
    pub state_dim: usize,
    pub head_hidden: usize,
    pub input: InputColor,
    pub pooling: PoolingMode,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            channels: vec![16, 32, 64, 96],
            state_dim: 8,
            head_hidden: 768,
            input: InputColor::Luma,
            pooling: PoolingMode::Mean,
        }
    }
}

impl NetConfig {
    /// A narrow configuration for quick experiments and tests.
    pub fn small() -> Self {
        NetConfig {
            channels: vec![8, 16, 24],
            state_dim: 4,
            head_hidden: 32,
            ..NetConfig::default()
        }
    }

    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    /// Fused head input length: four pooled statistics per channel per level.
    pub fn feature_len(&self) -> usize {
        4 * self.channels.iter().sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() < 2 {
            return Err(Error::InvalidArgument("net.channels needs at least 2 levels".into()));
        }
        if self.channels.iter().any(|&c| c == 0) || self.state_dim == 0 || self.head_hidden == 0 {
            return Err(Error::InvalidArgument("net widths must be positive".into()));
        }
        if let PoolingMode::Softmin { temperature } = self.pooling {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(Error::InvalidArgument("net.pooling.temperature must be > 0".into()));
            }
        }
        Ok(())
    }
}

/// Normalized input volume, planar `[c][t][h][w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub channels: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Volume {
    pub fn new(channels: usize, t: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * t * h * w || t == 0 {
            return Err(Error::ShapeMismatch(format!(
                "volume {channels}x{t}x{h}x{w} cannot hold {} values",
                data.len()
            )));
        }
        Ok(Volume { channels, t, h, w, data })
    }

    /// Converts a patch to the network's input color mode.
    pub fn from_patch(patch: &Patch, color: InputColor) -> Result<Self> {
        let s = patch.shape;
        match (color, patch.channels) {
            (InputColor::Luma, 1) | (InputColor::Rgb, 3) => {
                Volume::new(patch.channels, s.t, s.h, s.w, patch.planar_f64())
            }
            (InputColor::Luma, 3) => {
                let data = patch
                    .samples()
                    .chunks_exact(3)
                    .map(|p| rgb_to_luma(p[0], p[1], p[2]) as f64 / 255.0)
                    .collect();
                Volume::new(1, s.t, s.h, s.w, data)
            }
            (c, n) => Err(Error::ShapeMismatch(format!("{n}-channel patch given to a {c:?} network"))),
        }
    }

    fn dims(&self) -> (usize, usize, usize, usize) {
        (self.channels, self.t, self.h, self.w)
    }
}

/// One level of a feature pyramid, stored `[c][t][h][w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLevel {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl FeatureLevel {
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.t, self.h, self.w, self.c)
    }

    pub fn at(&self, t: usize, y: usize, x: usize, c: usize) -> f64 {
        self.data[((c * self.t + t) * self.h + y) * self.w + x]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<FeatureLevel>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityScore {
    pub value: f64,
    pub grad_enabled: bool,
}

/// Network weights. The same type doubles as a gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityNet {
    pub config: NetConfig,
    pub convs: Vec<Conv2d>,
    pub ssms: Vec<SsmParams>,
    /// `[hidden][features]`.
    pub head_w1: Vec<f64>,
    pub head_b1: Vec<f64>,
    pub head_w2: Vec<f64>,
    pub head_b2: Vec<f64>,
}

struct LevelCache {
    geom: Geometry,
    cols: Vec<f64>,
    z: Vec<f64>,
    a: Vec<f64>,
    trace: ScanTrace,
}

struct BranchCache {
    levels: Vec<LevelCache>,
}

/// Scan outputs of one level with their per-channel statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelFeatures {
    /// `[C][T·P]`.
    pub y: Vec<f64>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl LevelFeatures {
    fn from_output(y: Vec<f64>, channels: usize) -> Self {
        let n = y.len() / channels;
        let (means, stds) = channel_stats(&y, n);
        LevelFeatures { y, means, stds }
    }

    fn len_per_channel(&self) -> usize {
        self.y.len() / self.means.len()
    }
}

/// Everything one branch contributes to the fused head input. Computing it
/// once for a reference lets many distorted candidates be scored against it.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchFeatures {
    pub levels: Vec<LevelFeatures>,
}

/// A recorded forward pass over one (reference, distorted) pair.
pub struct PairPass {
    pub score: f64,
    fr: BranchFeatures,
    fd: BranchFeatures,
    cr: BranchCache,
    cd: BranchCache,
    hc: HeadCache,
}

struct HeadCache {
    fused: Vec<f64>,
    u: Vec<f64>,
}

impl QualityNet {
    pub fn zeros(config: &NetConfig) -> Result<Self> {
        config.validate()?;
        let mut convs = Vec::new();
        let mut ssms = Vec::new();
        let mut cin = config.input.channels();
        for &c in &config.channels {
            convs.push(Conv2d::zeros(cin, c, 2));
            ssms.push(SsmParams::zeros(c, config.state_dim));
            cin = c;
        }
        let f = config.feature_len();
        let h = config.head_hidden;
        Ok(QualityNet {
            config: config.clone(),
            convs,
            ssms,
            head_w1: vec![0.0; h * f],
            head_b1: vec![0.0; h],
            head_w2: vec![0.0; h],
            head_b2: vec![0.0],
        })
    }

    /// Seeded initialization: He-uniform convolutions, zero biases, scan
    /// parameters from [`SsmParams::init`].
    pub fn new(config: &NetConfig, seed: u64) -> Result<Self> {
        let mut net = QualityNet::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (conv, ssm) in net.convs.iter_mut().zip(net.ssms.iter_mut()) {
            let bound = (6.0 / (conv.in_channels * 9) as f64).sqrt();
            for w in conv.weight.iter_mut() {
                *w = rng.gen_range(-bound..bound);
            }
            *ssm = SsmParams::init(ssm.channels, ssm.state_dim, &mut rng);
        }
        let f = config.feature_len();
        let b1 = (3.0 / f as f64).sqrt();
        for w in net.head_w1.iter_mut() {
            *w = rng.gen_range(-b1..b1);
        }
        let b2 = 1.0 / (config.head_hidden as f64).sqrt();
        for w in net.head_w2.iter_mut() {
            *w = rng.gen_range(-b2..b2);
        }
        Ok(net)
    }

    pub fn zeros_like(&self) -> Self {
        QualityNet::zeros(&self.config).expect("config already validated")
    }

    /// Named tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Vec<f64>)> {
        let mut out = Vec::new();
        for (l, (conv, ssm)) in self.convs.iter().zip(&self.ssms).enumerate() {
            out.push((format!("level{l}.conv.weight"), &conv.weight));
            out.push((format!("level{l}.conv.bias"), &conv.bias));
            for (name, t) in ssm.tensors() {
                out.push((format!("level{l}.ssm.{name}"), t));
            }
        }
        out.push(("head.w1".into(), &self.head_w1));
        out.push(("head.b1".into(), &self.head_b1));
        out.push(("head.w2".into(), &self.head_w2));
        out.push(("head.b2".into(), &self.head_b2));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out = Vec::new();
        for (l, (conv, ssm)) in self.convs.iter_mut().zip(self.ssms.iter_mut()).enumerate() {
            out.push((format!("level{l}.conv.weight"), &mut conv.weight));
            out.push((format!("level{l}.conv.bias"), &mut conv.bias));
            for (name, t) in ssm.tensors_mut() {
                out.push((format!("level{l}.ssm.{name}"), t));
            }
        }
        out.push(("head.w1".into(), &mut self.head_w1));
        out.push(("head.b1".into(), &mut self.head_b1));
        out.push(("head.w2".into(), &mut self.head_w2));
        out.push(("head.b2".into(), &mut self.head_b2));
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += scale · other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &QualityNet, scale: f64) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    fn check_input(&self, v: &Volume) -> Result<()> {
        let levels = self.config.levels();
        let div = 1usize << levels;
        if v.channels != self.config.input.channels() {
            return Err(Error::ShapeMismatch(format!(
                "network expects {} input channels, got {}",
                self.config.input.channels(),
                v.channels
            )));
        }
        if v.h % div != 0 || v.w % div != 0 {
            return Err(Error::ShapeMismatch(format!(
                "spatial size {}x{} is not divisible by 2^{levels}",
                v.w, v.h
            )));
        }
        Ok(())
    }

    fn branch_forward(&self, v: &Volume, keep: bool) -> Result<(BranchFeatures, Option<BranchCache>)> {
        self.check_input(v)?;
        let mut features = Vec::with_capacity(self.config.levels());
        let mut caches = Vec::new();
        let (mut h, mut w) = (v.h, v.w);
        let mut owned: Option<Vec<f64>> = None;
        for (conv, ssm) in self.convs.iter().zip(&self.ssms) {
            let input = owned.as_deref().unwrap_or(&v.data);
            let geom = Geometry::new(v.t, h, w, 2);
            let (z, cols) = conv.forward(input, &geom);
            let a: Vec<f64> = z.iter().map(|&x| silu(x)).collect();
            let positions = geom.ho * geom.wo;
            let out = scan_forward(ssm, &a, v.t, positions, keep);
            features.push(LevelFeatures::from_output(out.y, conv.out_channels));
            h = geom.ho;
            w = geom.wo;
            if keep {
                caches.push(LevelCache {
                    geom,
                    cols,
                    z,
                    a: a.clone(),
                    trace: out.trace.expect("trace kept"),
                });
            }
            owned = Some(a);
        }
        Ok((BranchFeatures { levels: features }, keep.then_some(BranchCache { levels: caches })))
    }

    /// Backpropagates per-level gradients on the scan outputs through a branch.
    fn branch_backward(
        &self,
        cache: &BranchCache,
        dys: &[Vec<f64>],
        mut grad: Option<&mut QualityNet>,
        want_input: bool,
    ) -> Option<Vec<f64>> {
        let mut carried: Option<Vec<f64>> = None;
        let mut dinput = None;
        for l in (0..self.config.levels()).rev() {
            let lc = &cache.levels[l];
            let dy = &dys[l];
            let mut da = scan_backward(
                &self.ssms[l],
                &lc.a,
                lc.geom.frames,
                lc.geom.ho * lc.geom.wo,
                &lc.trace,
                dy,
                grad.as_deref_mut().map(|g| &mut g.ssms[l]),
            );
            if let Some(next) = carried.take() {
                for (x, y) in da.iter_mut().zip(next) {
                    *x += y;
                }
            }
            let dz: Vec<f64> = da.iter().zip(&lc.z).map(|(g, &z)| g * silu_grad(z)).collect();
            let need_input = l > 0 || want_input;
            let din = self.convs[l].backward(
                &dz,
                &lc.cols,
                &lc.geom,
                grad.as_deref_mut().map(|g| &mut g.convs[l]),
                need_input,
            );
            if l > 0 {
                carried = din;
            } else {
                dinput = din;
            }
        }
        dinput
    }

    /// Per level and channel: mean |y_r − y_d|, |std_r − std_d|, mean_d, std_d.
    fn fuse(fr: &BranchFeatures, fd: &BranchFeatures) -> Vec<f64> {
        let mut fused = Vec::new();
        for (lr, ld) in fr.levels.iter().zip(&fd.levels) {
            let n = ld.len_per_channel();
            for (yr, yd) in lr.y.chunks_exact(n).zip(ld.y.chunks_exact(n)) {
                fused.push(yr.iter().zip(yd).map(|(a, b)| (a - b).abs()).sum::<f64>() / n as f64);
            }
            fused.extend(lr.stds.iter().zip(&ld.stds).map(|(a, b)| (a - b).abs()));
            fused.extend_from_slice(&lr.means);
            fused.extend_from_slice(&lr.stds);
        }
        fused
    }

    fn head_forward(&self, fr: &BranchFeatures, fd: &BranchFeatures) -> (f64, HeadCache) {
        let fused = QualityNet::fuse(fr, fd);
        let hdim = self.config.head_hidden;
        let mut u = self.head_b1.clone();
        gemm(hdim, fused.len(), 1, 1.0, &self.head_w1, Op::N, &fused, Op::N, 1.0, &mut u);
        let score = self.head_b2[0] + u.iter().zip(&self.head_w2).map(|(&x, w)| silu(x) * w).sum::<f64>();
        (score, HeadCache { fused, u })
    }

    /// Returns gradients on the scan outputs of each branch, per level,
    /// scaled by `ds`.
    fn head_backward(
        &self,
        fr: &BranchFeatures,
        fd: &BranchFeatures,
        hc: &HeadCache,
        ds: f64,
        grad: Option<&mut QualityNet>,
    ) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let hdim = self.config.head_hidden;
        let f = hc.fused.len();
        let du: Vec<f64> = hc.u.iter().zip(&self.head_w2).map(|(&u, w)| ds * w * silu_grad(u)).collect();
        if let Some(g) = grad {
            g.head_b2[0] += ds;
            for (gw, &u) in g.head_w2.iter_mut().zip(&hc.u) {
                *gw += ds * silu(u);
            }
            for (gb, d) in g.head_b1.iter_mut().zip(&du) {
                *gb += d;
            }
            gemm(hdim, 1, f, 1.0, &du, Op::N, &hc.fused, Op::N, 1.0, &mut g.head_w1);
        }
        let mut dv = vec![0.0; f];
        gemm(f, hdim, 1, 1.0, &self.head_w1, Op::T, &du, Op::N, 0.0, &mut dv);

        let mut dyr = Vec::new();
        let mut dyd = Vec::new();
        let mut off = 0;
        for (lr, ld) in fr.levels.iter().zip(&fd.levels) {
            let c = ld.means.len();
            let n = ld.len_per_channel();
            let g = &dv[off..off + 4 * c];
            off += 4 * c;
            let mut gr = vec![0.0; c * n];
            let mut gd = vec![0.0; c * n];
            for ch in 0..c {
                let (yr, yd) = (&lr.y[ch * n..(ch + 1) * n], &ld.y[ch * n..(ch + 1) * n]);
                let gmap = g[ch] / n as f64;
                let sd = signum0(lr.stds[ch] - ld.stds[ch]) * g[c + ch];
                let dmean_r = g[2 * c + ch] / n as f64;
                let dstd_r = (sd + g[3 * c + ch]) / (n as f64 * lr.stds[ch]);
                let dstd_d = -sd / (n as f64 * ld.stds[ch]);
                let (mr, md) = (lr.means[ch], ld.means[ch]);
                for i in 0..n {
                    let s = gmap * signum0(yr[i] - yd[i]);
                    gr[ch * n + i] = s + dmean_r + dstd_r * (yr[i] - mr);
                    gd[ch * n + i] = -s + dstd_d * (yd[i] - md);
                }
            }
            dyr.push(gr);
            dyd.push(gd);
        }
        (dyr, dyd)
    }

    fn check_pair(r: &Volume, d: &Volume) -> Result<()> {
        if r.dims() != d.dims() {
            return Err(Error::ShapeMismatch(format!(
                "reference {:?} and distorted {:?} differ",
                r.dims(),
                d.dims()
            )));
        }
        Ok(())
    }

    /// Branch features of one volume, e.g. a reference scored repeatedly.
    pub fn features(&self, v: &Volume) -> Result<BranchFeatures> {
        Ok(self.branch_forward(v, false)?.0)
    }

    pub fn score_volumes(&self, r: &Volume, d: &Volume) -> Result<f64> {
        QualityNet::check_pair(r, d)?;
        let fr = self.features(r)?;
        let fd = self.features(d)?;
        Ok(self.head_forward(&fr, &fd).0)
    }

    pub fn score_pair(&self, reference: &Patch, distorted: &Patch) -> Result<QualityScore> {
        if reference.shape != distorted.shape || reference.channels != distorted.channels {
            return Err(Error::ShapeMismatch("reference and distorted patches differ in shape".into()));
        }
        let r = Volume::from_patch(reference, self.config.input)?;
        let d = Volume::from_patch(distorted, self.config.input)?;
        let value = self.score_volumes(&r, &d)?;
        if !value.is_finite() {
            return Err(Error::Numerical("non-finite patch score".into()));
        }
        Ok(QualityScore {
            value,
            grad_enabled: false,
        })
    }

    /// Forward pass that keeps everything needed for [`QualityNet::backward`].
    pub fn forward(&self, r: &Volume, d: &Volume) -> Result<PairPass> {
        QualityNet::check_pair(r, d)?;
        let (fr, cr) = self.branch_forward(r, true)?;
        let (fd, cd) = self.branch_forward(d, true)?;
        let (score, hc) = self.head_forward(&fr, &fd);
        Ok(PairPass {
            score,
            fr,
            fd,
            cr: cr.expect("cache"),
            cd: cd.expect("cache"),
            hc,
        })
    }

    /// Adds `dscore · ∂score/∂θ` for a recorded pass into `grad`.
    pub fn backward(&self, pass: &PairPass, dscore: f64, grad: &mut QualityNet) {
        let (dfr, dfd) = self.head_backward(&pass.fr, &pass.fd, &pass.hc, dscore, Some(grad));
        self.branch_backward(&pass.cr, &dfr, Some(grad), false);
        self.branch_backward(&pass.cd, &dfd, Some(grad), false);
    }

    /// Scores the pair and adds `dscore · ∂score/∂θ` into `grad`.
    pub fn score_and_backward(&self, r: &Volume, d: &Volume, dscore: f64, grad: &mut QualityNet) -> Result<f64> {
        let pass = self.forward(r, d)?;
        self.backward(&pass, dscore, grad);
        Ok(pass.score)
    }

    /// Scores `d` against precomputed reference features. With `want_input`
    /// also returns `∂score/∂d.data`; parameters receive no gradient.
    pub fn score_against(
        &self,
        ref_features: &BranchFeatures,
        d: &Volume,
        want_input: bool,
    ) -> Result<(f64, Option<Vec<f64>>)> {
        let (fd, cd) = self.branch_forward(d, want_input)?;
        let same = ref_features.levels.len() == fd.levels.len()
            && ref_features.levels.iter().zip(&fd.levels).all(|(a, b)| a.y.len() == b.y.len());
        if !same {
            return Err(Error::ShapeMismatch("reference features do not match the distorted volume".into()));
        }
        let (score, hc) = self.head_forward(ref_features, &fd);
        if !want_input {
            return Ok((score, None));
        }
        let (_, dfd) = self.head_backward(ref_features, &fd, &hc, 1.0, None);
        let dx = self.branch_backward(&cd.expect("cache"), &dfd, None, true);
        Ok((score, dx))
    }

    /// Per-frame convolutional pyramid (post-activation), temporal axis untouched.
    pub fn spatial_encode(&self, v: &Volume) -> Result<FeaturePyramid> {
        self.check_input(v)?;
        let mut levels: Vec<FeatureLevel> = Vec::new();
        let (mut h, mut w) = (v.h, v.w);
        for conv in &self.convs {
            let input = levels.last().map(|l| l.data.as_slice()).unwrap_or(&v.data);
            let geom = Geometry::new(v.t, h, w, 2);
            let (z, _) = conv.forward(input, &geom);
            h = geom.ho;
            w = geom.wo;
            levels.push(FeatureLevel {
                t: v.t,
                h,
                w,
                c: conv.out_channels,
                data: z.into_iter().map(silu).collect(),
            });
        }
        Ok(FeaturePyramid { levels })
    }
}

/// Floor added to the variance so the std pooling stays differentiable on
/// flat inputs.
const STD_EPS: f64 = 1e-10;

/// Per-channel mean and standard deviation of `[C][n]` rows.
fn channel_stats(y: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut means = Vec::new();
    let mut stds = Vec::new();
    for row in y.chunks_exact(n) {
        let m = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
        means.push(m);
        stds.push((var + STD_EPS).sqrt());
    }
    (means, stds)
}

fn signum0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Runs the selective scan along time at every spatial position of every level.
pub fn temporal_encode(pyramid: &FeaturePyramid, params: &[SsmParams]) -> Result<FeaturePyramid> {
    if pyramid.levels.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} pyramid levels but {} scan parameter sets",
            pyramid.levels.len(),
            params.len()
        )));
    }
    let mut levels = Vec::new();
    for (lvl, p) in pyramid.levels.iter().zip(params) {
        if lvl.c != p.channels {
            return Err(Error::ShapeMismatch(format!(
                "level has {} channels, scan expects {}",
                lvl.c, p.channels
            )));
        }
        let out = scan_forward(p, &lvl.data, lvl.t, lvl.h * lvl.w, false);
        levels.push(FeatureLevel { data: out.y, ..lvl.clone() });
    }
    Ok(FeaturePyramid { levels })
}

/// Combines patch scores into one clip score and returns `∂clip/∂score_i`.
pub fn pool_clip(scores: &[QualityScore], mode: PoolingMode) -> Result<(QualityScore, Vec<f64>)> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("cannot pool an empty score list".into()));
    }
    let n = scores.len() as f64;
    let grad_enabled = scores.iter().any(|s| s.grad_enabled);
    let (value, grads) = match mode {
        PoolingMode::Mean => (scores.iter().map(|s| s.value).sum::<f64>() / n, vec![1.0 / n; scores.len()]),
        PoolingMode::Softmin { temperature } => {
            let lo = scores.iter().map(|s| s.value).fold(f64::INFINITY, f64::min);
            let e: Vec<f64> = scores.iter().map(|s| (-(s.value - lo) / temperature).exp()).collect();
            let z: f64 = e.iter().sum();
            let w: Vec<f64> = e.iter().map(|v| v / z).collect();
            let value: f64 = w.iter().zip(scores).map(|(w, s)| w * s.value).sum();
            let grads = w
                .iter()
                .zip(scores)
                .map(|(w, s)| w * (1.0 - (s.value - value) / temperature))
                .collect();
            (value, grads)
        }
    };
    Ok((QualityScore { value, grad_enabled }, grads))
}
