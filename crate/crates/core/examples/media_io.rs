//! Writes a synthetic clip as Y4M and as a PNG frame directory, reads both
//! back and crops one co-located window.
//!
//! cargo run --release --example media_io -- [out_dir]

use std::path::PathBuf;

use ptloss::media_io::{load_clip, save_clip, ClipFormat, Patch, PatchShape};
use ptloss::synth::{synthetic_clip, SynthSpec};

fn main() -> ptloss::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("ptloss_media_io"));
    let clip = synthetic_clip("demo", &SynthSpec { frames: 6, height: 48, width: 64, detail: Some(0.6) }, 11)?;

    let y4m = save_clip(&clip, &out.join("demo.y4m"), ClipFormat::Y4m)?;
    let frames = save_clip(&clip, &out.join("demo_frames"), ClipFormat::FrameDirectory)?;
    for path in [&y4m, &frames] {
        let back = load_clip(path, ClipFormat::infer(path))?;
        println!(
            "{}: {}x{}x{} {:?}, identical samples: {}",
            path.display(),
            back.frames(),
            back.height(),
            back.width(),
            back.color(),
            back.samples() == clip.samples()
        );
    }

    let patch = Patch::crop(&clip, 16, 8, 1, PatchShape::new(4, 32, 32))?;
    let mean = patch.samples().iter().map(|&v| v as f64).sum::<f64>() / patch.samples().len() as f64;
    println!("window at (16, 8, 1): {} samples, mean level {mean:.1}", patch.samples().len());
    Ok(())
}
