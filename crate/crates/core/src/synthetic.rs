//! Procedural stand-ins for leaf photographs, used by tests, the smoke
//! experiment and anyone without the real corpora at hand.
//!
//! Every class gets a deterministic style derived from its crop and label:
//! the crop fixes leaf shape and base colour, the label fixes lesion colour,
//! size, density, halo and mottling. Per-image nuisance (pose, scale,
//! lighting, background clutter, noise) keeps one example from describing a
//! whole class.

use std::f32::consts::PI;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Background, CorpusError, DatasetManifest, ImageRecord};
use crate::reference::PLANT_VILLAGE;
use crate::seeds::{derive_seed, rng_for};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthClass {
    pub crop: String,
    pub label: String,
    pub count: usize,
    pub background: Background,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub name: String,
    pub classes: Vec<SynthClass>,
    /// Square image side in pixels.
    pub image_size: u32,
    pub seed: u64,
}

fn class(crop: &str, label: &str, count: usize, background: Background) -> SynthClass {
    SynthClass {
        crop: crop.into(),
        label: label.into(),
        count,
        background,
    }
}

impl SynthSpec {
    /// All 38 PlantVillage-style classes, `fraction` of the reference counts
    /// each (at least `min_per_class`).
    pub fn plant_village(fraction: f64, min_per_class: usize, image_size: u32, seed: u64) -> Self {
        let classes = PLANT_VILLAGE
            .iter()
            .map(|&(crop, label, n)| class(crop, label, ((n as f64 * fraction).round() as usize).max(min_per_class), Background::Lab))
            .collect();
        Self {
            name: "synthetic-plantvillage".into(),
            classes,
            image_size,
            seed,
        }
    }

    /// The five rice classes photographed in the field.
    pub fn rice(per_class: usize, image_size: u32, seed: u64) -> Self {
        let classes = crate::corpus::RICE_CLASSES
            .iter()
            .map(|&l| class("Rice", l, per_class, Background::Field))
            .collect();
        Self {
            name: "synthetic-rice".into(),
            classes,
            image_size,
            seed,
        }
    }

    /// A generic source corpus whose crops and disease patterns occur in no
    /// roster, used to pretrain starting weights when no ImageNet weights are
    /// available. Every third class is healthy; every fourth is photographed
    /// in the field.
    pub fn surrogate(n_classes: usize, per_class: usize, image_size: u32, seed: u64) -> Self {
        let classes = (0..n_classes)
            .map(|i| {
                let crop = format!("Source{}", i / 3);
                let label = if i % 3 == 2 {
                    format!("{crop}___healthy")
                } else {
                    format!("{crop}___pattern{}", i % 3)
                };
                let bg = if i % 4 == 3 { Background::Field } else { Background::Lab };
                class(&crop, &label, per_class, bg)
            })
            .collect();
        Self {
            name: "synthetic-source".into(),
            classes,
            image_size,
            seed,
        }
    }

    /// Ten classes: four non-tomato classes for adaptation and six tomato
    /// classes for evaluation.
    pub fn smoke(per_class: usize, image_size: u32, seed: u64) -> Self {
        let pick = [
            "Apple___Apple_scab",
            "Corn_(maize)___Common_rust_",
            "Grape___Black_rot",
            "Potato___Early_blight",
            "Tomato___Bacterial_spot",
            "Tomato___Early_blight",
            "Tomato___Late_blight",
            "Tomato___Leaf_Mold",
            "Tomato___Septoria_leaf_spot",
            "Tomato___healthy",
        ];
        let classes = pick
            .iter()
            .map(|&l| {
                let crop = PLANT_VILLAGE.iter().find(|c| c.1 == l).expect("roster class").0;
                class(crop, l, per_class, Background::Lab)
            })
            .collect();
        Self {
            name: "synthetic-smoke".into(),
            classes,
            image_size,
            seed,
        }
    }
}

/// Appearance parameters of one class.
#[derive(Clone, Debug, PartialEq)]
pub struct LeafStyle {
    pub leaf_rgb: [f32; 3],
    pub aspect: f32,
    pub tip: f32,
    pub lesion_rgb: [f32; 3],
    pub halo_rgb: [f32; 3],
    pub halo_width: f32,
    pub lesions: (usize, usize),
    pub lesion_radius: f32,
    pub mottle_freq: f32,
    pub mottle_amp: f32,
    pub yellowing: f32,
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

pub fn style_for(crop: &str, label: &str) -> LeafStyle {
    let mut crng = rng_for("synth-crop", &[crop.into()]);
    let mut lrng = rng_for("synth-class", &[crop.into(), label.into()]);
    let leaf_rgb = hsv(crng.random_range(0.22..0.38), crng.random_range(0.5..0.85), crng.random_range(0.45..0.75));
    let aspect = crng.random_range(0.35..0.75);
    let tip = crng.random_range(0.0..0.5);
    let healthy = label.to_ascii_lowercase().contains("healthy");
    let lesion_rgb = hsv(lrng.random_range(0.0..1.0), lrng.random_range(0.4..1.0), lrng.random_range(0.15..0.9));
    let halo_rgb = hsv(lrng.random_range(0.08..0.2), lrng.random_range(0.5..1.0), lrng.random_range(0.6..1.0));
    LeafStyle {
        leaf_rgb,
        aspect,
        tip,
        lesion_rgb,
        halo_rgb,
        halo_width: if lrng.random_bool(0.5) { lrng.random_range(0.3..0.9) } else { 0.0 },
        lesions: if healthy {
            (0, 0)
        } else {
            let lo = lrng.random_range(2..14);
            (lo, lo + lrng.random_range(2..10))
        },
        lesion_radius: lrng.random_range(0.025..0.09),
        mottle_freq: lrng.random_range(3.0..18.0),
        mottle_amp: if healthy { 0.02 } else { lrng.random_range(0.0..0.18) },
        yellowing: if healthy { 0.0 } else { lrng.random_range(0.0..0.5) },
    }
}

fn mix(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

/// Renders one image. All randomness comes from `rng`.
pub fn render_leaf(style: &LeafStyle, background: Background, size: u32, rng: &mut ChaCha8Rng) -> RgbImage {
    let s = size as f32;
    let noise = Normal::new(0.0f32, 0.02).expect("valid");
    // background
    let (bg_a, bg_b, clutter) = match background {
        Background::Lab => {
            let g = rng.random_range(0.75..0.95);
            ([g, g, g * 0.98], [g * 0.9, g * 0.9, g * 0.9], 0)
        }
        Background::Field => (
            hsv(rng.random_range(0.05..0.12), 0.5, rng.random_range(0.25..0.45)),
            hsv(rng.random_range(0.2..0.33), 0.6, rng.random_range(0.2..0.45)),
            rng.random_range(6..14),
        ),
    };
    let blobs: Vec<(f32, f32, f32, [f32; 3])> = (0..clutter)
        .map(|_| {
            (
                rng.random_range(0.0..s),
                rng.random_range(0.0..s),
                rng.random_range(0.05..0.2) * s,
                hsv(rng.random_range(0.05..0.35), 0.5, rng.random_range(0.2..0.6)),
            )
        })
        .collect();
    // leaf pose
    let cx = s * (0.5 + rng.random_range(-0.08..0.08));
    let cy = s * (0.5 + rng.random_range(-0.08..0.08));
    let a = s * rng.random_range(0.34..0.46);
    let b = a * style.aspect * rng.random_range(0.9..1.1);
    let theta = rng.random_range(0.0..PI);
    let (ct, st) = (theta.cos(), theta.sin());
    let light = rng.random_range(0.85..1.15);
    let leaf_rgb = mix(style.leaf_rgb, [0.75, 0.7, 0.2], style.yellowing * rng.random_range(0.5..1.0));
    let phase = rng.random_range(0.0..2.0 * PI);
    // lesions in leaf coordinates (u along the midrib, v across)
    let n_les = if style.lesions.1 > 0 {
        rng.random_range(style.lesions.0..=style.lesions.1)
    } else {
        0
    };
    let lesions: Vec<(f32, f32, f32)> = (0..n_les)
        .map(|_| {
            let r = rng.random_range(0.0f32..0.8).sqrt();
            let ang = rng.random_range(0.0..2.0 * PI);
            (r * ang.cos(), r * ang.sin(), style.lesion_radius * rng.random_range(0.6..1.4))
        })
        .collect();
    let mut img = RgbImage::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let t = (px + py) / (2.0 * s);
            let mut c = mix(bg_a, bg_b, t);
            for &(bx, by, br, bc) in &blobs {
                let d = ((px - bx).powi(2) + (py - by).powi(2)).sqrt() / br;
                if d < 1.0 {
                    c = mix(c, bc, 0.7 * (1.0 - d));
                }
            }
            let dx = px - cx;
            let dy = py - cy;
            let u = (dx * ct + dy * st) / a;
            let v = (-dx * st + dy * ct) / b;
            // narrower toward the tip (u > 0)
            let width = 1.0 - style.tip * u.max(0.0);
            let r = u * u + (v / width.max(0.05)).powi(2);
            if r < 1.0 {
                let mut leaf = leaf_rgb;
                let mottle = style.mottle_amp * ((u * style.mottle_freq + phase).sin() * (v * style.mottle_freq * 0.7).cos());
                leaf = [leaf[0] + mottle, leaf[1] + mottle * 0.5, leaf[2]];
                // midrib and side veins
                let vein = (-(v * b / s * 60.0).powi(2)).exp()
                    + 0.5 * (-(((u * 6.0 + v.abs() * 3.0).fract() - 0.5) * 8.0).powi(2)).exp() * (1.0 - r);
                leaf = mix(leaf, [leaf[0] * 1.25, leaf[1] * 1.25, leaf[2] * 1.1], vein.min(1.0) * 0.5);
                for &(lu, lv, lr) in &lesions {
                    let d = (((u - lu) * a).powi(2) + ((v - lv) * b).powi(2)).sqrt() / (lr * s);
                    if d < 1.0 {
                        leaf = mix(leaf, style.lesion_rgb, (1.2 * (1.0 - d)).min(1.0));
                    } else if style.halo_width > 0.0 && d < 1.0 + style.halo_width {
                        leaf = mix(leaf, style.halo_rgb, 0.6 * (1.0 - (d - 1.0) / style.halo_width));
                    }
                }
                // soft edge
                let edge = ((1.0 - r) * 12.0).min(1.0);
                c = mix(c, leaf, edge);
            }
            let out = [0, 1, 2].map(|k| ((c[k] * light + noise.sample(rng)).clamp(0.0, 1.0) * 255.0).round() as u8);
            img.put_pixel(x, y, Rgb(out));
        }
    }
    img
}

fn safe_dir(label: &str) -> String {
    label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' }).collect()
}

/// Writes the images under `out/images/` and the manifest to
/// `out/manifest.csv`. Image `i` of a class depends only on
/// (seed, crop, label, i), so regenerating is reproducible.
pub fn generate(spec: &SynthSpec, out: &Path) -> Result<DatasetManifest, CorpusError> {
    let io = |p: &Path| {
        let path = p.to_path_buf();
        move |source| CorpusError::Io { path, source }
    };
    let mut records = Vec::new();
    for c in &spec.classes {
        let style = style_for(&c.crop, &c.label);
        let dir = out.join("images").join(safe_dir(&c.label));
        fs::create_dir_all(&dir).map_err(io(&dir))?;
        for i in 0..c.count {
            let id = format!("{}_{i:04}", safe_dir(&c.label));
            let rel = format!("images/{}/{id}.png", safe_dir(&c.label));
            let path = out.join(&rel);
            if !path.exists() {
                let seed = derive_seed("synth-image", &[spec.seed.into(), c.crop.as_str().into(), c.label.as_str().into(), i.into()]);
                let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
                let img = render_leaf(&style, c.background, spec.image_size, &mut rng);
                img.save(&path).map_err(|e| CorpusError::Io {
                    path: path.clone(),
                    source: std::io::Error::other(e.to_string()),
                })?;
            }
            records.push(ImageRecord {
                image_id: id,
                path,
                class_label: c.label.clone(),
                crop: c.crop.clone(),
                background: c.background,
            });
        }
    }
    let manifest = DatasetManifest::from_records(&spec.name, out, records, None)?;
    manifest.write(&out.join("manifest.csv"))?;
    Ok(manifest)
}

/// Colour-coded toy set: class `c` is a blob of a fixed saturated colour on a
/// dark background, with random position and radius.
pub fn color_blobs(out: &Path, n_classes: usize, per_class: usize, size: u32, seed: u64) -> Result<DatasetManifest, CorpusError> {
    const COLORS: [[u8; 3]; 8] = [
        [230, 40, 40],
        [40, 200, 60],
        [50, 80, 230],
        [240, 220, 40],
        [200, 60, 220],
        [40, 220, 220],
        [250, 140, 30],
        [250, 250, 250],
    ];
    assert!(n_classes <= COLORS.len(), "at most {} toy classes", COLORS.len());
    let dir = out.join("images");
    fs::create_dir_all(&dir).map_err(|source| CorpusError::Io {
        path: dir.clone(),
        source,
    })?;
    let mut records = Vec::new();
    for (c, col) in COLORS.iter().enumerate().take(n_classes) {
        for i in 0..per_class {
            let mut rng = rng_for("blob", &[seed.into(), c.into(), i.into()]);
            let s = size as f32;
            let (cx, cy) = (rng.random_range(0.3..0.7) * s, rng.random_range(0.3..0.7) * s);
            let r = rng.random_range(0.2..0.35) * s;
            let img = RgbImage::from_fn(size, size, |x, y| {
                let d = ((x as f32 - cx).powi(2) + (y as f32 - cy).powi(2)).sqrt();
                if d < r {
                    Rgb(*col)
                } else {
                    let g = rng.random_range(10..40);
                    Rgb([g, g, g])
                }
            });
            let id = format!("blob{c}_{i:03}");
            let path = dir.join(format!("{id}.png"));
            img.save(&path).map_err(|e| CorpusError::Io {
                path: path.clone(),
                source: std::io::Error::other(e.to_string()),
            })?;
            records.push(ImageRecord {
                image_id: id,
                path,
                class_label: format!("color{c}"),
                crop: "Toy".into(),
                background: Background::Lab,
            });
        }
    }
    let manifest = DatasetManifest::from_records("toy-blobs", out, records, None)?;
    manifest.write(&out.join("manifest.csv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn styles_are_deterministic_and_distinct() {
        assert_eq!(style_for("Tomato", "Tomato___Leaf_Mold"), style_for("Tomato", "Tomato___Leaf_Mold"));
        let a = style_for("Tomato", "Tomato___Leaf_Mold");
        let b = style_for("Tomato", "Tomato___Late_blight");
        assert_eq!(a.leaf_rgb, b.leaf_rgb);
        assert_ne!(a.lesion_rgb, b.lesion_rgb);
        assert_eq!(style_for("Tomato", "Tomato___healthy").lesions, (0, 0));
    }

    #[test]
    fn generation_is_reproducible() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            classes: vec![class("Rice", "Brown Spot", 2, Background::Field)],
            ..SynthSpec::rice(2, 24, 7)
        };
        let m1 = generate(&spec, d1.path()).unwrap();
        let m2 = generate(&spec, d2.path()).unwrap();
        assert_eq!(m1.digest(), m2.digest());
        for (a, b) in m1.records.iter().zip(&m2.records) {
            assert_eq!(fs::read(&a.path).unwrap(), fs::read(&b.path).unwrap());
        }
        let back = crate::corpus::load_manifest(&d1.path().join("manifest.csv")).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.records[0].background, Background::Field);
    }

    #[test]
    fn smoke_roster_has_ten_classes() {
        let s = SynthSpec::smoke(3, 16, 0);
        assert_eq!(s.classes.len(), 10);
        assert_eq!(s.classes.iter().filter(|c| c.crop == "Tomato").count(), 6);
    }
}
