//! Builds a small S → R → D corpus with the synthetic DCT degrader, writes
//! the manifest and prints the PSNR of every transcode against its source.
//!
//! cargo run --release --example degrade_corpus -- [out_dir]

use std::path::PathBuf;

use ptloss::degrade::{build_corpus, manifest_hash, verify_manifest, write_manifest, DegraderSpec, ExternalEncoderConfig, Role};
use ptloss::eval::quality_vs_source;
use ptloss::synth::{synthetic_sources, SynthSpec};

fn main() -> ptloss::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("ptloss_corpus"));
    let sources = synthetic_sources("src", 2, &SynthSpec { frames: 4, height: 64, width: 64, detail: None }, 3)?;
    let stage2: Vec<DegraderSpec> = [32, 40].into_iter().map(DegraderSpec::synthetic).collect();
    let records = build_corpus(&sources, &[30, 42], &stage2, &out, &ExternalEncoderConfig::default())?;
    write_manifest(&records, &out.join("manifest.json"))?;
    println!("{} records, manifest sha256 {}", records.len(), &manifest_hash(&records)[..16]);
    println!("lineage check passed: {}", verify_manifest(&records, &out).passed());

    for r in records.iter().filter(|r| r.role == Role::D) {
        let q = quality_vs_source(r, &records, &out, true)?;
        println!(
            "{:<28} PSNR vs S {:6.2} dB, vs R {:6.2} dB",
            r.clip_id,
            q.psnr_vs_source,
            q.psnr_vs_reference.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
