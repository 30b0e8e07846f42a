//! Cross-modal retrieval metrics: a hand-made ranking, then an untrained
//! extractor on held-out synthetic identities.

use cmalign::data::{generate_synthetic_dataset, load_directory_dataset, PairingMode, Split, SyntheticConfig};
use cmalign::eval::{average_precision, evaluate_retrieval, extract_descriptors, Direction};
use cmalign::model::{Model, ModelConfig};

fn main() -> cmalign::Result<()> {
    // positives at ranks 1 and 3
    println!("AP of [+, -, +, -] = {:?}", average_precision(&[true, false, true, false]));

    let dir = std::env::temp_dir().join("cmalign-evaluate");
    let syn = SyntheticConfig {
        n_identities: 10,
        images_per_identity: 4,
        ..SyntheticConfig::default()
    };
    generate_synthetic_dataset(&dir, &syn, true)?;
    let ds = load_directory_dataset(&dir, PairingMode::CrossModal)?;
    let ids = ds.split_identities(Split::Test, 5)?;
    let mc = ModelConfig {
        height: syn.height,
        width: syn.width,
        ..ModelConfig::default()
    };
    let model = Model::new(mc, 5, 0)?;
    let (qm, gm) = Direction::B2a.modalities();
    let q = extract_descriptors(&model.extractor, &ds, qm, &ids)?;
    let g = extract_descriptors(&model.extractor, &ds, gm, &ids)?;
    let r = evaluate_retrieval(&q, &g)?;
    println!("untrained: mAP {:.2}%  rank-1 {:.2}%", 100.0 * r.m_ap, 100.0 * r.cmc[0]);
    Ok(())
}
