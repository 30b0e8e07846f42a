//! Full objective against ID-only and co-attention-off training on the
//! synthetic benchmark.
//!
//! ```text
//! cargo run --release --example ablation -- [epochs] [seeds]
//! ```

use cmalign::ablation::{run_ablation, AblationConfig, Variant};

fn main() -> cmalign::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut cfg = AblationConfig::default();
    if let Some(e) = args.next() {
        cfg.epochs = e.parse().expect("epochs must be an integer");
    }
    if let Some(n) = args.next() {
        cfg.seeds = (0..n.parse().expect("seeds must be an integer")).collect();
    }
    let dir = tempfile_dir();
    let report = run_ablation(&cfg, &dir, |r| {
        println!("seed {} {:<16} mAP {:6.2}  rank-1 {:6.2}", r.seed, r.variant, 100.0 * r.m_ap, 100.0 * r.rank1);
    })?;
    for v in Variant::ALL {
        println!("mean {:<16} mAP {:6.2}", v, report.mean_map(v));
    }
    let _ = std::fs::remove_dir_all(&dir);
    Ok(())
}

fn tempfile_dir() -> std::path::PathBuf {
    std::env::temp_dir().join(format!("cmalign-ablation-{}", std::process::id()))
}
