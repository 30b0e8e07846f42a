//! Trains the two-stream model on a small synthetic set and saves a
//! checkpoint.
//!
//! ```text
//! cargo run --release --example train -- [epochs]
//! ```

use cmalign::data::{generate_synthetic_dataset, load_directory_dataset, PairingMode, Split, SyntheticConfig};
use cmalign::model::ModelConfig;
use cmalign::train::{fit, TrainConfig};

fn main() -> cmalign::Result<()> {
    let epochs = std::env::args().nth(1).map_or(3, |s| s.parse().expect("epochs must be an integer"));
    let dir = std::env::temp_dir().join("cmalign-train");
    let syn = SyntheticConfig {
        n_identities: 16,
        images_per_identity: 4,
        ..SyntheticConfig::default()
    };
    generate_synthetic_dataset(dir.join("data"), &syn, true)?;
    let ds = load_directory_dataset(dir.join("data"), PairingMode::CrossModal)?;
    let ids = ds.split_identities(Split::Train, 12)?;

    let model_cfg = ModelConfig {
        height: syn.height,
        width: syn.width,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        epochs,
        identities_per_modality: 4,
        ..TrainConfig::default()
    };
    let out = dir.join("run");
    let result = fit(&ds, &ids, model_cfg, &cfg, Some(&out))?;
    for r in &result.log {
        println!(
            "epoch {} step {:3}  L_ID {:.3}  L_IC {:.3}  L_DT {:.3}  total {:.3}",
            r.epoch, r.step, r.l_id, r.l_ic, r.l_dt, r.l_total
        );
    }
    println!("checkpoint in {}", out.join("checkpoint").display());
    Ok(())
}
