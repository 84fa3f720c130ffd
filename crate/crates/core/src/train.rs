//! Siamese hinge ranking training in two stages and held-out ranking
//! evaluation.

use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{QualityNet, Volume};
use crate::optim::Adam;
use crate::sampler::{derive_seed, PatchPair, RankedPair, DEFAULT_CROSS_RATIO, DEFAULT_TAU};

/// Abort when an epoch's mean loss exceeds this multiple of the first epoch's.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Stage-2 step size as a fraction of `learning_rate`.
    pub stage2_lr_scale: f64,
    pub batch_size: usize,
    pub margin: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub seed: u64,
    pub tau: f64,
    pub cross_ratio: f64,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            stage2_lr_scale: 0.1,
            batch_size: 16,
            margin: 1.0,
            epochs_stage1: 4,
            epochs_stage2: 2,
            seed: 0,
            tau: DEFAULT_TAU,
            cross_ratio: DEFAULT_CROSS_RATIO,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::InvalidArgument("train.margin must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.cross_ratio) {
            return Err(Error::InvalidArgument("train.cross_ratio must lie in [0, 1]".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("train.learning_rate must be > 0".into()));
        }
        if !(self.stage2_lr_scale > 0.0 && self.stage2_lr_scale <= 1.0) {
            return Err(Error::InvalidArgument("train.stage2_lr_scale must lie in (0, 1]".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("train.batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn epochs(&self, stage: Stage) -> usize {
        match stage {
            Stage::One => self.epochs_stage1,
            Stage::Two => self.epochs_stage2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Mixed single- and cross-source pairs.
    One,
    /// Single-source fine-tuning.
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

/// `max(0, m − ℓ(s_a − s_b))` with its gradient `(∂/∂s_a, ∂/∂s_b)`. The
/// subgradient at the hinge point is zero.
pub fn ranking_loss(s_a: f64, s_b: f64, rank_label: i8, margin: f64) -> Result<(f64, f64, f64)> {
    if rank_label != 1 && rank_label != -1 {
        return Err(Error::InvalidArgument(format!("rank label {rank_label} is not ±1")));
    }
    if !(margin > 0.0) {
        return Err(Error::InvalidArgument(format!("margin {margin} must be > 0")));
    }
    let l = rank_label as f64;
    let slack = margin - l * (s_a - s_b);
    if slack > 0.0 {
        Ok((slack, -l, l))
    } else {
        Ok((0.0, 0.0, 0.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochProgress {
    pub stage: u8,
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: u64,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingEval {
    pub pairs: usize,
    /// Fraction with `sign(s_a − s_b) = rank_label`; ties count as wrong.
    pub accuracy: f64,
    pub ties: usize,
    /// Spearman correlation of per-window scores against proxy labels.
    pub spearman: f64,
    /// Set when every score was identical.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: u8,
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
    pub held_out: Option<RankingEval>,
}

fn volumes(net: &QualityNet, p: &PatchPair) -> Result<(Volume, Volume)> {
    Ok((
        Volume::from_patch(&p.ref_patch, net.config.input)?,
        Volume::from_patch(&p.dist_patch, net.config.input)?,
    ))
}

/// Loss and parameter gradient of one ranked pair.
fn pair_gradient(net: &QualityNet, pair: &RankedPair, margin: f64) -> Result<(f64, Option<QualityNet>)> {
    let (ra, da) = volumes(net, &pair.a)?;
    let (rb, db) = volumes(net, &pair.b)?;
    let pa = net.forward(&ra, &da)?;
    let pb = net.forward(&rb, &db)?;
    let (loss, ga, gb) = ranking_loss(pa.score, pb.score, pair.rank_label, margin)?;
    if loss == 0.0 {
        return Ok((0.0, None));
    }
    let mut grad = net.zeros_like();
    net.backward(&pa, ga, &mut grad);
    net.backward(&pb, gb, &mut grad);
    Ok((loss, Some(grad)))
}

/// Mean hinge loss over `pairs` without updating anything.
pub fn mean_loss(net: &QualityNet, pairs: &[RankedPair], margin: f64) -> Result<f64> {
    let losses: Vec<f64> = pairs
        .par_iter()
        .map(|p| {
            let (ra, da) = volumes(net, &p.a)?;
            let (rb, db) = volumes(net, &p.b)?;
            Ok(ranking_loss(net.score_volumes(&ra, &da)?, net.score_volumes(&rb, &db)?, p.rank_label, margin)?.0)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Runs one training stage. Batch order is fixed by `(cfg.seed, stage)`;
/// per-pair gradients are computed in parallel and summed in batch order.
pub fn train_stage(
    mut net: QualityNet,
    pairs: &[RankedPair],
    cfg: &TrainConfig,
    stage: Stage,
    held_out: Option<&[RankedPair]>,
    on_epoch: &mut dyn FnMut(&EpochProgress),
) -> Result<(QualityNet, TrainReport)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Precondition("no training pairs".into()));
    }
    if stage == Stage::Two {
        if let Some(p) = pairs.iter().find(|p| p.cross_source || p.a.source_id != p.b.source_id) {
            return Err(Error::Precondition(format!(
                "stage 2 needs single-source pairs; got `{}` vs `{}`",
                p.a.source_id, p.b.source_id
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("stage{}", stage.number())));
    let lr = match stage {
        Stage::One => cfg.learning_rate,
        Stage::Two => cfg.learning_rate * cfg.stage2_lr_scale,
    };
    let mut opt = Adam::new(lr);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut losses = Vec::new();
    let mut first: Option<f64> = None;
    for epoch in 0..cfg.epochs(stage) {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<(f64, Option<QualityNet>)> = batch
                .par_iter()
                .map(|&i| pair_gradient(&net, &pairs[i], cfg.margin))
                .collect::<Result<_>>()?;
            let mut grad = net.zeros_like();
            for (loss, g) in &results {
                total += loss;
                if let Some(g) = g {
                    grad.add_scaled(g, 1.0 / batch.len() as f64);
                }
            }
            if !grad.is_finite() {
                return Err(Error::Numerical(format!("non-finite gradient in stage {} epoch {epoch}", stage.number())));
            }
            let grads: Vec<&Vec<f64>> = grad.tensors().into_iter().map(|(_, t)| t).collect();
            let params: Vec<&mut Vec<f64>> = net.tensors_mut().into_iter().map(|(_, t)| t).collect();
            opt.step(params, grads);
        }
        let mean = total / pairs.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss in stage {} epoch {epoch}", stage.number())));
        }
        let base = *first.get_or_insert(mean);
        if base > 0.0 && mean > DIVERGENCE_FACTOR * base {
            return Err(Error::Numerical(format!(
                "stage {} diverged: epoch {epoch} loss {mean} exceeds {DIVERGENCE_FACTOR}× initial {base}",
                stage.number()
            )));
        }
        losses.push(mean);
        let checkpoint = match &cfg.checkpoint_dir {
            Some(dir) => {
                let path = dir.join(format!("stage{}_epoch{:03}.ckpt", stage.number(), epoch));
                net.save(
                    &path,
                    serde_json::json!({"stage": stage.number(), "epoch": epoch, "mean_loss": mean}),
                )?;
                Some(path)
            }
            None => None,
        };
        on_epoch(&EpochProgress {
            stage: stage.number(),
            epoch,
            mean_loss: mean,
            steps: opt.steps_taken(),
            checkpoint,
        });
    }
    let held_out = match held_out {
        Some(h) => Some(evaluate_ranking(&net, h, Some(pairs))?),
        None => None,
    };
    let steps = opt.steps_taken();
    Ok((
        net,
        TrainReport {
            stage: stage.number(),
            epoch_losses: losses,
            steps,
            held_out,
        },
    ))
}

/// Anything that maps a labeled window to a score.
pub trait PairScorer: Sync {
    fn score(&self, pair: &PatchPair) -> Result<f64>;
}

impl PairScorer for QualityNet {
    fn score(&self, pair: &PatchPair) -> Result<f64> {
        let (r, d) = volumes(self, pair)?;
        self.score_volumes(&r, &d)
    }
}

impl<F: Fn(&PatchPair) -> Result<f64> + Sync> PairScorer for F {
    fn score(&self, pair: &PatchPair) -> Result<f64> {
        self(pair)
    }
}

/// Origin hashes of every window referenced by `pairs`.
pub fn origin_hashes(pairs: &[RankedPair]) -> HashSet<String> {
    pairs.iter().flat_map(|p| [p.a.origin_hash(), p.b.origin_hash()]).collect()
}

/// Scores held-out pairs. With `training`, rejects any held-out window that
/// also appears in training.
pub fn evaluate_ranking(scorer: &dyn PairScorer, held_out: &[RankedPair], training: Option<&[RankedPair]>) -> Result<RankingEval> {
    if held_out.is_empty() {
        return Err(Error::Precondition("no held-out pairs".into()));
    }
    if let Some(train) = training {
        let seen = origin_hashes(train);
        if let Some(p) = held_out.iter().find(|p| seen.contains(&p.a.origin_hash()) || seen.contains(&p.b.origin_hash())) {
            return Err(Error::Precondition(format!(
                "held-out window from `{}` also appears in training",
                p.a.dist_patch.origin.clip_id
            )));
        }
    }
    let mut windows: BTreeMap<String, &PatchPair> = BTreeMap::new();
    for p in held_out {
        windows.insert(p.a.origin_hash(), &p.a);
        windows.insert(p.b.origin_hash(), &p.b);
    }
    let keys: Vec<&String> = windows.keys().collect();
    let scores: Vec<f64> = keys.par_iter().map(|k| scorer.score(windows[*k])).collect::<Result<_>>()?;
    let index: BTreeMap<&String, usize> = keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();

    let (mut correct, mut ties) = (0usize, 0usize);
    for p in held_out {
        let d = scores[index[&p.a.origin_hash()]] - scores[index[&p.b.origin_hash()]];
        if d == 0.0 {
            ties += 1;
        } else if (d > 0.0) == (p.rank_label > 0) {
            correct += 1;
        }
    }
    let labels: Vec<f64> = keys.iter().map(|k| windows[*k].label()).collect::<Result<_>>()?;
    let degenerate = scores.iter().all(|&s| s == scores[0]);
    Ok(RankingEval {
        pairs: held_out.len(),
        accuracy: correct as f64 / held_out.len() as f64,
        ties,
        spearman: spearman(&scores, &labels),
        degenerate,
    })
}

/// Average ranks, 1-based; ties share the mean rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; 0 when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
    }
}
