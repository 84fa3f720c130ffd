//! BD-rate between two RD curves, with the report files it feeds.
//!
//! cargo run --release --example bd_rate -- [out_dir]

use std::path::PathBuf;

use ptloss::eval::{bd_rate, emit_report, BdRow, RDCurve, RDPoint, RefGroup, ReportInputs};

fn curve(label: &str, rate_scale: f64) -> ptloss::Result<RDCurve> {
    let points = [(0.05, 30.1), (0.1, 33.0), (0.2, 35.6), (0.4, 37.9)]
        .into_iter()
        .map(|(bpp, q)| RDPoint {
            bpp: bpp * rate_scale,
            quality: q,
            metric_id: "psnr".into(),
            codec_id: "demo".into(),
            alpha: 0.0,
            seed: 0,
        })
        .collect();
    RDCurve::new(label, points)
}

fn main() -> ptloss::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("ptloss_bd"));
    let anchor = curve("anchor", 1.0)?;
    let test = curve("test", 0.9)?;
    let r = bd_rate(&anchor, &test)?;
    println!("BD-rate {:+.4}% over quality [{:.2}, {:.2}]", r.bd_rate_percent, r.overlap.0, r.overlap.1);
    println!("identical curves: {:+.4}%", bd_rate(&anchor, &anchor)?.bd_rate_percent);

    let inputs = ReportInputs {
        curves: vec![(RefGroup::Low, anchor.clone()), (RefGroup::Low, test.clone())],
        bd_rows: vec![BdRow::new(RefGroup::Low, "test", "anchor", &r)],
        complexity: Vec::new(),
    };
    for p in emit_report(&inputs, &out)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}
