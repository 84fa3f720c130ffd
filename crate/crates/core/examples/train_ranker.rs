//! Trains a small quality net on synthetic S → R → D chains and reports
//! held-out pairwise ranking accuracy before and after each stage.
//!
//! cargo run --release --example train_ranker -- [stage1_pairs] [epochs1] [epochs2] [lr_micro]

use std::time::Instant;

use ptloss::degrade::{STAGE1_QPS, STAGE2_QPS};
use ptloss::net::{NetConfig, QualityNet};
use ptloss::sampler::{build_ranking_data, synthetic_chains, ProxyMetric, SamplerConfig};
use ptloss::synth::{synthetic_sources, SynthSpec};
use ptloss::train::{evaluate_ranking, train_stage, Stage, TrainConfig};

fn main() -> ptloss::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let arg = |i: usize, d: usize| args.get(i).copied().unwrap_or(d);
    let start = Instant::now();

    let spec = SynthSpec { frames: 12, height: 96, width: 96, detail: None };
    let sources = synthetic_sources("src", 8, &spec, 7)?;
    let chains = synthetic_chains(&sources, &STAGE1_QPS, &STAGE2_QPS)?;
    let scfg = SamplerConfig {
        stage1_pairs: arg(0, 2000),
        stage2_pairs: arg(0, 2000) / 2,
        held_out_pairs: 500,
        held_out_sources: 0,
        held_out_frames: 4,
        seed: 1,
        ..SamplerConfig::default()
    };
    let data = build_ranking_data(&chains, &scfg, &ProxyMetric::Psnr)?;
    println!(
        "{} chains, {} train windows, {} held-out windows, {:.1}s",
        chains.len(),
        data.train_pool.len(),
        data.held_out_pool.len(),
        start.elapsed().as_secs_f64()
    );

    let net = QualityNet::new(&NetConfig::small(), 3)?;
    let base = evaluate_ranking(&net, &data.held_out, None)?;
    println!("untrained: accuracy {:.3}, spearman {:.3}", base.accuracy, base.spearman);

    let cfg = TrainConfig {
        learning_rate: arg(3, 3000) as f64 * 1e-6,
        batch_size: 16,
        epochs_stage1: arg(1, 6),
        epochs_stage2: arg(2, 2),
        seed: 5,
        ..TrainConfig::default()
    };
    let mut log = |e: &ptloss::train::EpochProgress| {
        println!("stage {} epoch {} loss {:.4} ({:.0}s)", e.stage, e.epoch, e.mean_loss, start.elapsed().as_secs_f64())
    };
    let (net, r1) = train_stage(net, &data.stage1, &cfg, Stage::One, Some(&data.held_out), &mut log)?;
    let e1 = r1.held_out.unwrap();
    let fit = evaluate_ranking(&net, &data.stage1, None)?;
    println!("stage 1 training pairs: accuracy {:.3}", fit.accuracy);
    println!("after stage 1: accuracy {:.3}, spearman {:.3}", e1.accuracy, e1.spearman);
    let (net2, r2) = train_stage(net, &data.stage2, &cfg, Stage::Two, Some(&data.held_out), &mut log)?;
    let e2 = r2.held_out.unwrap();
    println!("after stage 2: accuracy {:.3}, spearman {:.3}", e2.accuracy, e2.spearman);
    let (cross, within): (Vec<_>, Vec<_>) = data.held_out.iter().cloned().partition(|p| p.cross_source);
    println!(
        "held-out within-source {:.3} ({}), cross-source {:.3} ({})",
        evaluate_ranking(&net2, &within, None)?.accuracy,
        within.len(),
        evaluate_ranking(&net2, &cross, None)?.accuracy,
        cross.len()
    );
    println!("total {:.0}s", start.elapsed().as_secs_f64());
    Ok(())
}
