//! Published reference values: the PlantVillage class roster with per-class
//! image counts, the rice-disease roster, cited model footprints and the
//! reported few-shot accuracies that result tables print beside measured ones.

use crate::corpus::SetupId;
use crate::heads::HeadKind;

/// (crop, class folder name, images). Labels are the dataset's own
/// `Crop___Disease` folder names.
pub const PLANT_VILLAGE: [(&str, &str, usize); 38] = [
    ("Apple", "Apple___Apple_scab", 630),
    ("Apple", "Apple___Black_rot", 621),
    ("Apple", "Apple___Cedar_apple_rust", 275),
    ("Apple", "Apple___healthy", 1645),
    ("Blueberry", "Blueberry___healthy", 700),
    ("Cherry_(including_sour)", "Cherry_(including_sour)___Powdery_mildew", 441),
    ("Cherry_(including_sour)", "Cherry_(including_sour)___healthy", 854),
    ("Corn_(maize)", "Corn_(maize)___Cercospora_leaf_spot Gray_leaf_spot", 1191),
    ("Corn_(maize)", "Corn_(maize)___Common_rust_", 1192),
    ("Corn_(maize)", "Corn_(maize)___Northern_Leaf_Blight", 985),
    ("Corn_(maize)", "Corn_(maize)___healthy", 1187),
    ("Grape", "Grape___Black_rot", 1084),
    ("Grape", "Grape___Esca_(Black_Measles)", 696),
    ("Grape", "Grape___Leaf_blight_(Isariopsis_Leaf_Spot)", 1204),
    ("Grape", "Grape___healthy", 1082),
    ("Orange", "Orange___Haunglongbing_(Citrus_greening)", 550),
    ("Peach", "Peach___Bacterial_spot", 265),
    ("Peach", "Peach___healthy", 492),
    ("Pepper,_bell", "Pepper,_bell___Bacterial_spot", 984),
    ("Pepper,_bell", "Pepper,_bell___healthy", 1476),
    ("Potato", "Potato___Early_blight", 1000),
    ("Potato", "Potato___Late_blight", 1000),
    ("Potato", "Potato___healthy", 1528),
    ("Raspberry", "Raspberry___healthy", 613),
    ("Soybean", "Soybean___healthy", 509),
    ("Squash", "Squash___Powdery_mildew", 825),
    ("Strawberry", "Strawberry___Leaf_scorch", 684),
    ("Strawberry", "Strawberry___healthy", 1117),
    ("Tomato", "Tomato___Bacterial_spot", 940),
    ("Tomato", "Tomato___Early_blight", 1000),
    ("Tomato", "Tomato___Late_blight", 1000),
    ("Tomato", "Tomato___Leaf_Mold", 952),
    ("Tomato", "Tomato___Septoria_leaf_spot", 1771),
    ("Tomato", "Tomato___Spider_mites Two-spotted_spider_mite", 1740),
    ("Tomato", "Tomato___Target_Spot", 1404),
    ("Tomato", "Tomato___Tomato_Yellow_Leaf_Curl_Virus", 535),
    ("Tomato", "Tomato___Tomato_mosaic_virus", 373),
    ("Tomato", "Tomato___healthy", 1591),
];

/// Total stated in the dataset description. The per-class table sums to
/// [`plant_village_table_total`] instead.
pub const PLANT_VILLAGE_STATED_TOTAL: usize = 54_303;

pub fn plant_village_table_total() -> usize {
    PLANT_VILLAGE.iter().map(|c| c.2).sum()
}

/// Total images across both background variants of the rice corpus.
pub const RICE_TOTAL_IMAGES: usize = 1_106;

/// Cited per-backbone footprints.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CitedBackbone {
    pub name: &'static str,
    pub params_millions: f64,
    /// Size used in the ensemble-size comparison.
    pub size_mb: f64,
    /// Size listed with the per-model GFLOPs.
    pub size_mb_alt: f64,
    pub gflops: f64,
}

pub const CITED_BACKBONES: [CitedBackbone; 3] = [
    CitedBackbone {
        name: "mnv2",
        params_millions: 3.5,
        size_mb: 13.37,
        size_mb_alt: 13.6,
        gflops: 0.3,
    },
    CitedBackbone {
        name: "mnv3_small",
        params_millions: 2.54,
        size_mb: 6.08,
        size_mb_alt: 9.8,
        gflops: 0.06,
    },
    CitedBackbone {
        name: "mnv3_large",
        params_millions: 5.48,
        size_mb: 20.92,
        size_mb_alt: 21.1,
        gflops: 0.22,
    },
];

pub const CITED_ENSEMBLE_SIZE_MB: f64 = 40.37;
pub const CITED_PIPELINE_GFLOPS: f64 = 1.12;

/// One reported cell: mean accuracy and ± half-width, in percent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Published {
    pub setup: SetupId,
    pub head: HeadKind,
    pub k_shot: usize,
    pub mean: f64,
    pub ci95: f64,
}

const fn p(setup: SetupId, head: HeadKind, k_shot: usize, mean: f64, ci95: f64) -> Published {
    Published {
        setup,
        head,
        k_shot,
        mean,
        ci95,
    }
}

use HeadKind::*;
use SetupId::*;

/// Reported accuracies of the three-MobileNet ensemble.
pub const PUBLISHED: [Published; 48] = [
    p(S1, Dense, 1, 43.96, 1.0),
    p(S1, Dense, 5, 70.46, 0.57),
    p(S1, Dense, 10, 79.27, 0.45),
    p(S1, Dense, 15, 82.76, 0.37),
    p(S1, Lstm, 1, 51.66, 1.2),
    p(S1, Lstm, 5, 84.04, 0.92),
    p(S1, Lstm, 10, 91.83, 0.67),
    p(S1, Lstm, 15, 95.31, 0.42),
    p(S1, Bilstm, 1, 55.91, 1.34),
    p(S1, Bilstm, 5, 87.8, 1.3),
    p(S1, Bilstm, 10, 98.44, 0.21),
    p(S1, Bilstm, 15, 98.44, 0.21),
    p(S1, SelfAttn, 1, 46.09, 1.03),
    p(S1, SelfAttn, 5, 72.19, 0.71),
    p(S1, SelfAttn, 10, 96.04, 0.59),
    p(S1, SelfAttn, 15, 83.77, 0.35),
    p(S1, BilstmSelfAttn, 1, 56.91, 1.32),
    p(S1, BilstmSelfAttn, 5, 87.18, 1.57),
    p(S1, BilstmSelfAttn, 10, 95.45, 0.62),
    p(S1, BilstmSelfAttn, 15, 98.23, 0.33),
    p(S1, BilstmMha, 1, 56.46, 1.43),
    p(S1, BilstmMha, 5, 85.1, 1.88),
    p(S1, BilstmMha, 10, 89.22, 2.55),
    p(S1, BilstmMha, 15, 89.78, 2.0),
    p(S2, Bilstm, 1, 78.93, 3.81),
    p(S2, Bilstm, 10, 99.7, 0.15),
    p(S2, Bilstm, 15, 99.72, 0.12),
    p(S2, Bilstm, 80, 99.68, 0.12),
    p(S2, BilstmSelfAttn, 1, 78.92, 3.12),
    p(S2, BilstmSelfAttn, 10, 99.7, 0.19),
    p(S2, BilstmSelfAttn, 15, 99.62, 0.12),
    p(S2, BilstmSelfAttn, 80, 99.68, 0.16),
    p(S2, BilstmMha, 1, 76.75, 3.75),
    p(S2, BilstmMha, 10, 99.7, 0.18),
    p(S2, BilstmMha, 15, 99.65, 0.25),
    p(S2, BilstmMha, 80, 99.73, 0.13),
    p(S3, Bilstm, 1, 32.88, 2.14),
    p(S3, Bilstm, 5, 51.62, 2.06),
    p(S3, Bilstm, 10, 59.64, 1.64),
    p(S3, Bilstm, 15, 63.97, 1.69),
    p(S3, BilstmSelfAttn, 1, 33.32, 2.41),
    p(S3, BilstmSelfAttn, 5, 54.23, 1.83),
    p(S3, BilstmSelfAttn, 10, 60.97, 1.92),
    p(S3, BilstmSelfAttn, 15, 68.2, 1.82),
    p(S3, BilstmMha, 1, 33.01, 2.31),
    p(S3, BilstmMha, 5, 55.68, 2.18),
    p(S3, BilstmMha, 10, 63.97, 1.66),
    p(S3, BilstmMha, 15, 69.28, 1.49),
];

pub fn published(setup: SetupId, head: HeadKind, k_shot: usize) -> Option<Published> {
    PUBLISHED
        .iter()
        .copied()
        .find(|r| r.setup == setup && r.head == head && r.k_shot == k_shot)
}

/// The K values reported for a setup.
pub fn published_shots(setup: SetupId) -> &'static [usize] {
    match setup {
        S1 | S3 => &[1, 5, 10, 15],
        S2 => &[1, 10, 15, 80],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roster_shape() {
        assert_eq!(PLANT_VILLAGE.len(), 38);
        assert_eq!(PLANT_VILLAGE.iter().filter(|c| c.0 == "Tomato").count(), 10);
        let mut names: Vec<_> = PLANT_VILLAGE.iter().map(|c| c.1).collect();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
        assert_eq!(plant_village_table_total(), 36_136);
    }

    #[test]
    fn cited_sizes_sum_to_ensemble_figure() {
        let total: f64 = CITED_BACKBONES.iter().map(|b| b.size_mb).sum();
        assert!((total - CITED_ENSEMBLE_SIZE_MB).abs() < 1e-9);
    }

    #[test]
    fn lookups() {
        assert_eq!(published(S1, BilstmSelfAttn, 15).unwrap().mean, 98.23);
        assert_eq!(published(S3, BilstmMha, 15).unwrap().ci95, 1.49);
        assert_eq!(published(S2, Bilstm, 15).unwrap().mean, 99.72);
        assert!(published(S2, Dense, 1).is_none());
    }
}
