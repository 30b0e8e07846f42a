//! Seeded two-modality person renderings.
//!
//! A person is a head, a patterned torso, two legs and an optional bag,
//! each part coloured from a per-identity latent. Every image index draws
//! one set of nuisances (shift, scale, occlusion band, background clutter)
//! shared by its modality A and modality B rendering. Modality A keeps the
//! three colour channels; modality B collapses them to one grey channel and
//! inverts the contrast curve.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::cmft::CmftTensor;
use crate::data::{ImageEntry, MANIFEST};
use crate::error::{Error, Result};
use crate::model::Modality;

/// Grey weights of the modality-B channel collapse.
pub const GRAY_WEIGHTS: [f64; 3] = [0.2, 0.5, 0.3];
/// Exponent of the modality-B contrast remap `1 - g^γ`.
pub const CONTRAST_GAMMA: f64 = 0.7;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n_identities: usize,
    pub images_per_identity: usize,
    pub height: usize,
    pub width: usize,
    /// Chance that an image carries an occlusion band.
    pub occlusion_prob: f64,
    /// Tallest occlusion band in rows; 0 disables occlusion.
    pub occlusion_max_rows: usize,
    /// Largest translation in pixels along each axis.
    pub max_shift: f64,
    /// Scale factor drawn from `[1 - s, 1 + s]`.
    pub scale_jitter: f64,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    /// Random rectangles drawn over each background.
    pub clutter: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_identities: 80,
            images_per_identity: 8,
            height: 36,
            width: 18,
            occlusion_prob: 0.3,
            occlusion_max_rows: 8,
            max_shift: 2.0,
            scale_jitter: 0.1,
            noise: 0.03,
            clutter: 3,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_identities == 0 || self.images_per_identity == 0 {
            return Err(Error::Config("identity and image counts must be >= 1".into()));
        }
        if self.height < 4 || self.width < 4 {
            return Err(Error::Config("images must be at least 4x4".into()));
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return Err(Error::Config(format!("occlusion_prob must lie in [0, 1], got {}", self.occlusion_prob)));
        }
        // keeps the person at least 40% inside the frame
        if !(0.0..=0.25).contains(&self.scale_jitter) {
            return Err(Error::Config(format!("scale_jitter must lie in [0, 0.25], got {}", self.scale_jitter)));
        }
        let max_shift_allowed = 0.25 * self.width.min(self.height) as f64;
        if !(0.0..=max_shift_allowed).contains(&self.max_shift) {
            return Err(Error::Config(format!(
                "max_shift must lie in [0, {max_shift_allowed}], got {}",
                self.max_shift
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise must be >= 0, got {}", self.noise)));
        }
        Ok(())
    }
}

type Rgb = [f64; 3];

/// Appearance shared by all images of one identity.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityLatent {
    pub skin: Rgb,
    pub hair: Rgb,
    pub torso: Rgb,
    pub torso_alt: Rgb,
    /// 0 plain, 1 horizontal stripes, 2 left/right split.
    pub torso_pattern: u8,
    pub stripe_period: f64,
    pub legs: Rgb,
    pub shoes: Rgb,
    /// Torso half-width as a fraction of the frame width.
    pub half_width: f64,
    /// Bag side (-1 or 1) and top, if present.
    pub bag: Option<(f64, f64, Rgb)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Occlusion {
    pub top: usize,
    pub rows: usize,
    pub color: Rgb,
}

/// Per-image variation, identical for both modality renderings.
#[derive(Debug, Clone, PartialEq)]
pub struct Nuisance {
    pub shift: (f64, f64),
    pub scale: f64,
    pub occlusion: Option<Occlusion>,
    pub background_seed: u64,
}

/// Latent plus the nuisances of each image index.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticIdentitySpec {
    pub identity: usize,
    pub latent: IdentityLatent,
    pub nuisances: Vec<Nuisance>,
}

fn color(rng: &mut ChaCha8Rng) -> Rgb {
    [rng.gen(), rng.gen(), rng.gen()]
}

fn identity_rng(seed: u64, identity: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(identity as u64);
    rng
}

impl SyntheticIdentitySpec {
    pub fn draw(cfg: &SyntheticConfig, identity: usize) -> Self {
        let mut rng = identity_rng(cfg.seed, identity);
        let latent = IdentityLatent {
            skin: color(&mut rng),
            hair: color(&mut rng),
            torso: color(&mut rng),
            torso_alt: color(&mut rng),
            torso_pattern: rng.gen_range(0..3),
            stripe_period: rng.gen_range(0.05..0.12),
            legs: color(&mut rng),
            shoes: color(&mut rng),
            half_width: rng.gen_range(0.2..0.3),
            bag: rng
                .gen_bool(0.5)
                .then(|| (if rng.gen_bool(0.5) { -1.0 } else { 1.0 }, rng.gen_range(0.28..0.45), color(&mut rng))),
        };
        let nuisances = (0..cfg.images_per_identity)
            .map(|_| {
                let shift = (
                    rng.gen_range(-1.0..=1.0) * cfg.max_shift,
                    rng.gen_range(-1.0..=1.0) * cfg.max_shift,
                );
                let scale = 1.0 + rng.gen_range(-1.0..=1.0) * cfg.scale_jitter;
                let occluded = cfg.occlusion_max_rows > 0 && rng.gen_bool(cfg.occlusion_prob);
                let occlusion = occluded.then(|| {
                    let rows = rng.gen_range(1..=cfg.occlusion_max_rows.min(cfg.height));
                    // bands sit over the body, below the head
                    let lo = cfg.height / 5;
                    let top = rng.gen_range(lo..=cfg.height - rows.min(cfg.height - lo));
                    Occlusion {
                        top,
                        rows,
                        color: color(&mut rng),
                    }
                });
                Nuisance {
                    shift,
                    scale,
                    occlusion,
                    background_seed: rng.gen(),
                }
            })
            .collect();
        Self {
            identity,
            latent,
            nuisances,
        }
    }
}

/// Colour of the person at normalized body coordinates, if any part covers it.
/// `y` runs 0..1 top to bottom, `x` is centred on 0 in frame widths.
/// `aspect` is frame height over width.
fn body_color(l: &IdentityLatent, y: f64, x: f64, aspect: f64) -> Option<Rgb> {
    let hw = l.half_width;
    // head ellipse, circular in pixels
    let (hy, hx) = ((y - 0.13) / 0.085, x / (0.085 * aspect));
    if hy * hy + hx * hx <= 1.0 {
        return Some(if y < 0.09 { l.hair } else { l.skin });
    }
    if (0.22..0.56).contains(&y) && x.abs() < hw {
        return Some(match l.torso_pattern {
            1 if ((y - 0.22) / l.stripe_period).floor() as i64 % 2 == 1 => l.torso_alt,
            2 if x > 0.0 => l.torso_alt,
            _ => l.torso,
        });
    }
    if (0.56..0.95).contains(&y) && x.abs() > 0.03 && x.abs() < 0.9 * hw {
        return Some(if y > 0.9 { l.shoes } else { l.legs });
    }
    if let Some((side, top, c)) = l.bag {
        if (top..top + 0.12).contains(&y) && (side * x - hw) >= 0.0 && (side * x - hw) < 0.12 {
            return Some(c);
        }
    }
    None
}

fn background(h: usize, w: usize, clutter: usize, seed: u64) -> Vec<Rgb> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = color(&mut rng);
    let mut px = vec![base; h * w];
    for _ in 0..clutter {
        let c = color(&mut rng);
        let (r0, c0) = (rng.gen_range(0..h), rng.gen_range(0..w));
        let (rh, cw) = (rng.gen_range(2..=h / 3), rng.gen_range(2..=w / 2));
        for r in r0..(r0 + rh).min(h) {
            for col in c0..(c0 + cw).min(w) {
                px[r * w + col] = c;
            }
        }
    }
    px
}

/// Shared pre-transform colour image `[h, w, 3]` of one image index.
pub fn render_base(cfg: &SyntheticConfig, latent: &IdentityLatent, n: &Nuisance) -> Vec<f64> {
    let (h, w) = (cfg.height, cfg.width);
    let mut px = background(h, w, cfg.clutter, n.background_seed);
    let aspect = h as f64 / w as f64;
    for r in 0..h {
        for c in 0..w {
            let yn = (r as f64 + 0.5 - n.shift.0) / h as f64;
            let xn = (c as f64 + 0.5 - n.shift.1) / w as f64 - 0.5;
            let y = (yn - 0.5) / n.scale + 0.5;
            let x = xn / n.scale;
            if let Some(col) = body_color(latent, y, x, aspect) {
                px[r * w + c] = col;
            }
        }
    }
    if let Some(o) = &n.occlusion {
        for r in o.top..(o.top + o.rows).min(h) {
            for c in 0..w {
                px[r * w + c] = o.color;
            }
        }
    }
    px.into_iter().flatten().collect()
}

/// Applies the modality transform to a base image, giving `[h, w, c]` values.
pub fn modality_transform(base: &[f64], modality: Modality) -> Vec<f64> {
    match modality {
        Modality::A => base.to_vec(),
        Modality::B => base
            .chunks_exact(3)
            .map(|p| {
                let g: f64 = p.iter().zip(GRAY_WEIGHTS).map(|(v, w)| v * w).sum();
                1.0 - g.clamp(0.0, 1.0).powf(CONTRAST_GAMMA)
            })
            .collect(),
    }
}

/// Renders one image of `spec` in `modality`, with its pixel noise.
pub fn render(cfg: &SyntheticConfig, spec: &SyntheticIdentitySpec, index: usize, modality: Modality) -> Result<CmftTensor> {
    let n = spec
        .nuisances
        .get(index)
        .ok_or(Error::Index {
            op: "render",
            index,
            limit: spec.nuisances.len(),
        })?;
    let mut values = modality_transform(&render_base(cfg, &spec.latent, n), modality);
    if cfg.noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(n.background_seed);
        rng.set_stream(1 + modality as u64);
        let normal = Normal::new(0.0, cfg.noise).map_err(|e| Error::Config(e.to_string()))?;
        for v in &mut values {
            *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    let channels = values.len() / (cfg.height * cfg.width);
    CmftTensor::from_f64(vec![cfg.height, cfg.width, channels], &values)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerationSummary {
    pub root: PathBuf,
    pub identities: usize,
    pub images_per_identity: usize,
    pub files: usize,
}

/// Writes the dataset under `root`. A non-empty `root` is refused unless
/// `overwrite` is set, in which case it is cleared first.
pub fn generate_synthetic_dataset(root: impl AsRef<Path>, cfg: &SyntheticConfig, overwrite: bool) -> Result<GenerationSummary> {
    cfg.validate()?;
    let root = root.as_ref();
    if root.exists() {
        let non_empty = fs::read_dir(root).map_err(|e| Error::io(root, e))?.next().is_some();
        if non_empty {
            if !overwrite {
                return Err(Error::Usage(format!(
                    "{} is not empty; pass the overwrite flag to replace it",
                    root.display()
                )));
            }
            fs::remove_dir_all(root).map_err(|e| Error::io(root, e))?;
        }
    }
    let mut entries = Vec::new();
    let specs: Vec<SyntheticIdentitySpec> = (0..cfg.n_identities).map(|i| SyntheticIdentitySpec::draw(cfg, i)).collect();
    for modality in Modality::BOTH {
        for spec in &specs {
            let dir = root.join(modality.as_str()).join(spec.identity.to_string());
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for index in 0..cfg.images_per_identity {
                let img = render(cfg, spec, index, modality)?;
                let rel = PathBuf::from(modality.as_str())
                    .join(spec.identity.to_string())
                    .join(format!("{index}.cmft"));
                img.write(root.join(&rel))?;
                entries.push(ImageEntry {
                    modality,
                    identity: spec.identity,
                    path: rel,
                    shape: [img.dims[0], img.dims[1], img.dims[2]],
                });
            }
        }
    }
    let manifest: String = entries.iter().map(ImageEntry::manifest_line).collect();
    let mpath = root.join(MANIFEST);
    fs::write(&mpath, manifest).map_err(|e| Error::io(mpath, e))?;
    Ok(GenerationSummary {
        root: root.to_path_buf(),
        identities: cfg.n_identities,
        images_per_identity: cfg.images_per_identity,
        files: entries.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            n_identities: 2,
            images_per_identity: 1,
            ..SyntheticConfig::default()
        }
    }

    fn tree_bytes(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn two_ids_one_image_replays() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let s = generate_synthetic_dataset(a.path(), &small(), false).unwrap();
        assert_eq!(s.files, 4);
        generate_synthetic_dataset(b.path(), &small(), false).unwrap();
        let ta = tree_bytes(a.path());
        assert_eq!(ta.len(), 5);
        assert_eq!(ta, tree_bytes(b.path()));
    }

    #[test]
    fn refuses_non_empty_target() {
        let a = tempfile::tempdir().unwrap();
        fs::write(a.path().join("x"), b"1").unwrap();
        assert!(matches!(generate_synthetic_dataset(a.path(), &small(), false), Err(Error::Usage(_))));
        generate_synthetic_dataset(a.path(), &small(), true).unwrap();
        assert!(!a.path().join("x").exists());
    }

    #[test]
    fn zero_occlusion_range_has_no_band() {
        let cfg = SyntheticConfig {
            occlusion_prob: 1.0,
            occlusion_max_rows: 0,
            ..SyntheticConfig::default()
        };
        for i in 0..10 {
            assert!(SyntheticIdentitySpec::draw(&cfg, i).nuisances.iter().all(|n| n.occlusion.is_none()));
        }
    }

    #[test]
    fn modalities_differ_only_by_transform() {
        let cfg = SyntheticConfig {
            max_shift: 0.0,
            scale_jitter: 0.0,
            occlusion_prob: 0.0,
            noise: 0.0,
            ..SyntheticConfig::default()
        };
        let spec = SyntheticIdentitySpec::draw(&cfg, 3);
        let a = render(&cfg, &spec, 0, Modality::A).unwrap();
        let b = render(&cfg, &spec, 0, Modality::B).unwrap();
        assert_eq!(a.dims, vec![36, 18, 3]);
        assert_eq!(b.dims, vec![36, 18, 1]);
        let want = modality_transform(&a.to_f64(), Modality::B);
        let base = render_base(&cfg, &spec.latent, &spec.nuisances[0]);
        let exact = CmftTensor::from_f64(vec![36, 18, 1], &modality_transform(&base, Modality::B)).unwrap();
        assert_eq!(b, exact);
        for (x, y) in b.to_f64().iter().zip(&want) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn person_stays_mostly_in_frame() {
        let cfg = SyntheticConfig {
            max_shift: 4.5,
            scale_jitter: 0.25,
            occlusion_prob: 0.0,
            ..SyntheticConfig::default()
        };
        let h = cfg.height;
        let w = cfg.width;
        let count = |n: &Nuisance, latent: &IdentityLatent| {
            (0..h * w)
                .filter(|&i| {
                    let (r, c) = (i / w, i % w);
                    let yn = (r as f64 + 0.5 - n.shift.0) / h as f64;
                    let xn = (c as f64 + 0.5 - n.shift.1) / w as f64 - 0.5;
                    body_color(latent, (yn - 0.5) / n.scale + 0.5, xn / n.scale, h as f64 / w as f64).is_some()
                })
                .count() as f64
        };
        for i in 0..20 {
            let spec = SyntheticIdentitySpec::draw(&cfg, i);
            let centred = Nuisance {
                shift: (0.0, 0.0),
                scale: 1.0,
                occlusion: None,
                background_seed: 0,
            };
            let full = count(&centred, &spec.latent);
            for n in &spec.nuisances {
                let frac = count(n, &spec.latent) / (full * n.scale * n.scale);
                assert!(frac >= 0.4, "identity {i}: {frac}");
            }
        }
    }
}
