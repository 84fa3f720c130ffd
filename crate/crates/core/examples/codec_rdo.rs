//! Overfits the toy coordinate codec to a degraded reference at α = 0 and
//! α = 0.2 and compares both against the pristine source. A quality net is
//! trained briefly first so the PT term carries some signal.
//!
//! cargo run --release --example codec_rdo

use ptloss::codec::{overfit_encode, BaseLoss, EncodeSettings, InrConfig, LossMixer};
use ptloss::degrade::{synthetic_dct_degrade, STAGE1_QPS, STAGE2_QPS};
use ptloss::eval::psnr;
use ptloss::media_io::PatchShape;
use ptloss::net::{NetConfig, QualityNet};
use ptloss::sampler::{build_ranking_data, synthetic_chains, ProxyMetric, SamplerConfig};
use ptloss::synth::{synthetic_clip, synthetic_sources, SynthSpec};
use ptloss::train::{train_stage, Stage, TrainConfig};

fn main() -> ptloss::Result<()> {
    let spec = SynthSpec { frames: 4, height: 64, width: 64, detail: None };
    let sources = synthetic_sources("src", 6, &spec, 7)?;
    let chains = synthetic_chains(&sources, &STAGE1_QPS, &STAGE2_QPS)?;
    let scfg = SamplerConfig {
        stage1_pairs: 600,
        stage2_pairs: 300,
        held_out_pairs: 0,
        held_out_sources: 1,
        seed: 1,
        ..SamplerConfig::default()
    };
    let data = build_ranking_data(&chains, &scfg, &ProxyMetric::Psnr)?;
    let tcfg = TrainConfig { learning_rate: 1e-2, epochs_stage1: 2, epochs_stage2: 1, seed: 2, ..TrainConfig::default() };
    let net = QualityNet::new(&NetConfig::small(), 3)?;
    let (net, _) = train_stage(net, &data.stage1, &tcfg, Stage::One, None, &mut |_| {})?;
    let (net, _) = train_stage(net, &data.stage2, &tcfg, Stage::Two, None, &mut |_| {})?;

    let source = synthetic_clip("probe", &spec, 99)?;
    let reference = synthetic_dct_degrade(&source, 42)?;
    println!("reference vs source: {:.2} dB", psnr(&reference, &source)?);
    let cfg = InrConfig { hidden: 24, depth: 2, freqs: 6, weight_bits: 8 };
    let settings = EncodeSettings { steps: 400, learning_rate: 5e-3, pt_windows: 4, pt_window: PatchShape::new(4, 32, 32), ..EncodeSettings::default() };
    for alpha in [0.0, 0.2] {
        let mixer = LossMixer::new(alpha, BaseLoss::Mse)?;
        let e = overfit_encode(&reference, &cfg, &mixer, &settings, Some(&net))?;
        println!(
            "alpha {alpha:.1}: {:.4} bpp, vs R {:.2} dB, vs S {:.2} dB, alignment scale {:?}",
            e.bpp,
            psnr(&e.decoded, &reference)?,
            psnr(&e.decoded, &source)?,
            e.alignment_scale
        );
    }
    Ok(())
}
