//! Exports masks, co-attention and top-k matches for one A/B image pair.

use cmalign::data::{generate_synthetic_dataset, load_directory_dataset, PairingMode, SyntheticConfig};
use cmalign::export::{export_artifacts, MatchSettings};
use cmalign::model::{Modality, Model, ModelConfig};

fn main() -> cmalign::Result<()> {
    let dir = std::env::temp_dir().join("cmalign-match");
    let syn = SyntheticConfig {
        n_identities: 2,
        images_per_identity: 1,
        ..SyntheticConfig::default()
    };
    generate_synthetic_dataset(dir.join("data"), &syn, true)?;
    let ds = load_directory_dataset(dir.join("data"), PairingMode::CrossModal)?;
    let a = ds.indices(Modality::A, &[0])[0];
    let b = ds.indices(Modality::B, &[0])[0];
    let mc = ModelConfig {
        height: syn.height,
        width: syn.width,
        ..ModelConfig::default()
    };
    let model = Model::new(mc, 2, 0)?;
    let settings = MatchSettings {
        k: 3,
        ..MatchSettings::default()
    };
    let art = export_artifacts(&model.extractor, &ds.images[a], &ds.images[b], &settings, dir.join("out"))?;
    println!("wrote {} and {} matches", art.co_attention.display(), art.match_list.len());
    for m in art.match_list.iter().take(6) {
        println!("({},{}) -> ({},{})  {:.3}", m.p_row, m.p_col, m.q_row, m.q_col, m.prob);
    }
    Ok(())
}
