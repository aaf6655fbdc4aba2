//! Synthetic fixture cities.
//!
//! Real census and street-view data are not shipped; these generators give
//! deterministic stand-ins with plausible feature ranges.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{CityEnvironment, CrimeDistribution, FeatureBundle, GridCell};
use crate::geo::LatLon;
use crate::ids::CellId;
use crate::rng;

/// Feature bundle with neutral values and the given population.
pub fn plain_features(population: u64) -> FeatureBundle {
    FeatureBundle {
        population,
        average_income: 50_000.0,
        poverty_ratio: 0.15,
        housing_value: 200_000.0,
        race_composition: BTreeMap::from([("white".into(), 0.5), ("black".into(), 0.3), ("hispanic".into(), 0.2)]),
        gender_ratio: 0.5,
        poi_count: 10,
        poi_categories: BTreeMap::from([("retail".into(), 10)]),
        safety_score: 0.5,
        semantic_description: "mixed residential and retail blocks".into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCity {
    pub rows: usize,
    pub cols: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Grid spacing in degrees.
    #[serde(default = "default_spacing")]
    pub spacing_deg: f64,
    #[serde(default = "default_origin")]
    pub origin: LatLon,
    /// When false, every cell gets identical features.
    #[serde(default = "default_true")]
    pub heterogeneous: bool,
}

fn default_seed() -> u64 {
    1
}
fn default_spacing() -> f64 {
    0.005
}
fn default_origin() -> LatLon {
    LatLon::new(41.80, -87.70)
}
fn default_true() -> bool {
    true
}

impl SyntheticCity {
    pub fn grid(rows: usize, cols: usize, seed: u64) -> Self {
        SyntheticCity { rows, cols, seed, spacing_deg: default_spacing(), origin: default_origin(), heterogeneous: true }
    }

    pub fn cell_id(&self, r: usize, c: usize) -> CellId {
        let w = (self.rows * self.cols).to_string().len().max(4);
        CellId::new(format!("g{:0w$}", r * self.cols + c, w = w))
    }

    /// Builds the environment. Neighbors are the 4-connected grid neighbors.
    ///
    /// Heterogeneous cities have a few dense, poorer, less safe districts;
    /// income, housing value and safety co-vary as they do in real data.
    pub fn build(&self) -> CityEnvironment {
        let mut rng = rng::seeded(self.seed ^ 0x5eed_c17e);
        let n_centers = ((self.rows * self.cols) as f64).sqrt().ceil() as usize / 4 + 1;
        let centers: Vec<(f64, f64)> =
            (0..n_centers).map(|_| (rng.random::<f64>() * self.rows as f64, rng.random::<f64>() * self.cols as f64)).collect();
        let scale = (self.rows.max(self.cols) as f64 / 6.0).max(1.0);

        let mut cells = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                let id = self.cell_id(r, c);
                let centroid =
                    LatLon::new(self.origin.lat + r as f64 * self.spacing_deg, self.origin.lon + c as f64 * self.spacing_deg);
                let mut neighbors = BTreeSet::new();
                if r > 0 {
                    neighbors.insert(self.cell_id(r - 1, c));
                }
                if r + 1 < self.rows {
                    neighbors.insert(self.cell_id(r + 1, c));
                }
                if c > 0 {
                    neighbors.insert(self.cell_id(r, c - 1));
                }
                if c + 1 < self.cols {
                    neighbors.insert(self.cell_id(r, c + 1));
                }
                let features = if self.heterogeneous {
                    // Deprivation in [0,1]: proximity to the nearest district centre.
                    let dep = centers
                        .iter()
                        .map(|&(cr, cc)| {
                            let d2 = (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2);
                            (-d2 / (2.0 * scale * scale)).exp()
                        })
                        .fold(0.0, f64::max);
                    let noise = |rng: &mut rand_chacha::ChaCha8Rng, amp: f64| 1.0 + amp * (rng.random::<f64>() - 0.5);
                    let population = (400.0 + 2600.0 * dep * noise(&mut rng, 0.6)).round().max(50.0) as u64;
                    let poverty = (0.05 + 0.45 * dep * noise(&mut rng, 0.4)).clamp(0.0, 1.0);
                    let income = 95_000.0 * (1.0 - 0.7 * dep) * noise(&mut rng, 0.3);
                    let housing = 420_000.0 * (1.0 - 0.75 * dep) * noise(&mut rng, 0.3);
                    let safety = (0.85 - 0.6 * dep + 0.1 * (rng.random::<f64>() - 0.5)).clamp(0.0, 1.0);
                    let black = (0.1 + 0.6 * dep).min(0.9);
                    let hispanic = 0.2 * noise(&mut rng, 0.5).min(1.0 - black);
                    let hispanic = hispanic.min(1.0 - black);
                    let white = 1.0 - black - hispanic;
                    let pois = (5.0 + 40.0 * rng.random::<f64>()).round() as u64;
                    let desc = if safety < 0.35 {
                        "vacant lots, graffiti, dim lighting, sparse foot traffic"
                    } else if safety < 0.6 {
                        "mixed storefronts, moderate foot traffic, some litter"
                    } else {
                        "well-maintained homes, good lighting, active sidewalks"
                    };
                    FeatureBundle {
                        population,
                        average_income: income.round(),
                        poverty_ratio: (poverty * 1000.0).round() / 1000.0,
                        housing_value: housing.round(),
                        race_composition: BTreeMap::from([
                            ("white".into(), white),
                            ("black".into(), black),
                            ("hispanic".into(), hispanic),
                        ]),
                        gender_ratio: 0.48 + 0.04 * rng.random::<f64>(),
                        poi_count: pois,
                        poi_categories: BTreeMap::from([("food".into(), pois / 3), ("retail".into(), pois - pois / 3)]),
                        safety_score: (safety * 1000.0).round() / 1000.0,
                        semantic_description: desc.into(),
                    }
                } else {
                    plain_features(1000)
                };
                cells.push((GridCell { id, centroid, boundary: None, neighbors }, features));
            }
        }
        let metadata = BTreeMap::from([
            ("city".to_owned(), "Synthetic City".to_owned()),
            ("mayor".to_owned(), "Jordan Doe".to_owned()),
            ("party".to_owned(), "Independent".to_owned()),
            ("strategy".to_owned(), "community policing with targeted patrols".to_owned()),
        ]);
        CityEnvironment::new(format!("synthetic-{}x{}", self.rows, self.cols), cells, metadata)
            .expect("synthetic city is well-formed")
    }
}

/// Counts proportional to `scale / rank^s` (rank 1-based), rounded, over
/// cells `z0000..`.
pub fn zipf_counts(n: usize, s: f64, scale: f64) -> CrimeDistribution {
    let w = n.to_string().len();
    CrimeDistribution::from_counts(
        (0..n).map(|i| (format!("z{:0w$}", i, w = w), (scale / ((i + 1) as f64).powf(s)).round() as u64)),
    )
}
