//! Finite-difference gradient check of every differentiable block.
//!
//! ```text
//! cargo run --release --example gradcheck -- [ops]
//! ```

use cmalign::gradsuite::{format_table, run_suite, SuiteConfig};

fn main() -> cmalign::Result<()> {
    let filter = std::env::args().nth(1).unwrap_or_else(|| "all".into());
    let reports = run_suite(&filter, &SuiteConfig::default())?;
    print!("{}", format_table(&reports));
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("{} of {} ops passed", reports.len() - failed, reports.len());
    if failed > 0 {
        std::process::exit(1);
    }
    Ok(())
}
