//! Dense alignment of two random feature maps: similarities, matching
//! probabilities, the blended reconstruction and co-attention.

use cmalign::cmalign::{align, co_attention, cosine_similarity, matching_probability, top_k_matches, DEFAULT_TEMPERATURE};
use cmalign::field::person_mask;
use cmalign::FeatureMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> cmalign::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (h, w, d) = (4, 3, 8);
    let f_a = FeatureMap::from_fn(h, w, d, |_, _, _| rng.gen_range(0.0..1.0));
    // B is A shifted down one row plus noise
    let f_b = FeatureMap::from_fn(h, w, d, |r, c, k| f_a.get(r.saturating_sub(1), c, k) + rng.gen_range(-0.05..0.05));

    let c = cosine_similarity(&f_a, &f_b)?;
    let p = matching_probability(&c, DEFAULT_TEMPERATURE)?;
    for pos in 0..p.positions() {
        let q = p.argmax(pos);
        println!("A({},{}) -> B({},{})  p = {:.3}", pos / w, pos % w, q / w, q % w, p.get(pos, q));
    }

    let m_a = person_mask(&f_a);
    let m_b = person_mask(&f_b);
    let recon = align(&f_a, &f_b, &m_a, &p)?;
    let err: f64 = recon.data().iter().zip(f_a.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / recon.data().len() as f64;
    println!("mean |aligned - A| = {err:.4}");

    let att = co_attention(&m_a, &m_b, &p)?;
    println!("co-attention range [{:.3}, {:.3}]", att.min(), att.max());
    for m in top_k_matches(&p, 2).iter().take(4) {
        println!("{m:?}");
    }
    Ok(())
}
