//! Writes a small synthetic two-modality dataset and reads it back.
//!
//! ```text
//! cargo run --release --example generate -- [out-dir]
//! ```

use cmalign::data::{generate_synthetic_dataset, load_directory_dataset, PairingMode, SyntheticConfig};

fn main() -> cmalign::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("cmalign-generate"));
    let cfg = SyntheticConfig {
        n_identities: 6,
        images_per_identity: 3,
        ..SyntheticConfig::default()
    };
    let summary = generate_synthetic_dataset(&dir, &cfg, true)?;
    println!("{summary:?}");
    let ds = load_directory_dataset(&dir, PairingMode::CrossModal)?;
    let (h, w) = ds.image_size()?;
    println!("{} images of {h}x{w}", ds.len());
    for (id, [a, b]) in ds.counts() {
        println!("identity {id}: {a} A, {b} B");
    }
    Ok(())
}
