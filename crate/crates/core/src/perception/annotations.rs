use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;

use serde::{Deserialize, Serialize};

use super::PerceptionError;

/// Number of discrete score levels in `[0, 1]`.
pub const LEVELS: u32 = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rating {
    pub annotator_id: String,
    pub image_id: String,
    pub rating: u8,
}

/// Three images ranked most to least safe. `order` is a permutation of
/// `abc` naming `images[0..3]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub images: [String; 3],
    pub order: String,
}

impl Triplet {
    /// Images from most to least safe.
    pub fn ranked(&self) -> Result<[&str; 3], PerceptionError> {
        let bytes = self.order.as_bytes();
        let mut sorted = bytes.to_vec();
        sorted.sort_unstable();
        if sorted != b"abc" {
            return Err(PerceptionError::Annotations(format!("triplet order `{}` is not a permutation of abc", self.order)));
        }
        Ok([0, 1, 2].map(|i| self.images[(bytes[i] - b'a') as usize].as_str()))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub ratings: Vec<Rating>,
    #[serde(default)]
    pub triplets: Vec<Triplet>,
}

impl AnnotationSet {
    /// Reads `annotator_id,image_id,rating` and optionally
    /// `image_a,image_b,image_c,order`.
    pub fn from_csv<R: Read, T: Read>(ratings: R, triplets: Option<T>) -> Result<Self, PerceptionError> {
        let mut set = AnnotationSet::default();
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(ratings);
        for rec in rdr.deserialize::<Rating>() {
            set.ratings.push(rec?);
        }
        if let Some(t) = triplets {
            let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(t);
            for rec in rdr.records() {
                let rec = rec?;
                let f = |i| rec.get(i).unwrap_or("").to_owned();
                set.triplets.push(Triplet { images: [f(0), f(1), f(2)], order: f(3) });
            }
        }
        set.validate()?;
        Ok(set)
    }

    pub fn image_ids(&self) -> BTreeSet<&str> {
        self.ratings.iter().map(|r| r.image_id.as_str()).collect()
    }

    pub fn annotator_ids(&self) -> BTreeSet<&str> {
        self.ratings.iter().map(|r| r.annotator_id.as_str()).collect()
    }

    pub fn validate(&self) -> Result<(), PerceptionError> {
        if let Some(r) = self.ratings.iter().find(|r| !(1..=3).contains(&r.rating)) {
            return Err(PerceptionError::Annotations(format!(
                "rating {} by `{}` for `{}` is outside 1..=3",
                r.rating, r.annotator_id, r.image_id
            )));
        }
        for t in &self.triplets {
            t.ranked()?;
        }
        Ok(())
    }

    /// Annotator-by-image matrix over sorted ids. Every annotator must rate
    /// every image.
    pub fn matrix(&self) -> Result<Vec<Vec<f64>>, PerceptionError> {
        let images: Vec<&str> = self.image_ids().into_iter().collect();
        let annotators: Vec<&str> = self.annotator_ids().into_iter().collect();
        let mut m = vec![vec![f64::NAN; images.len()]; annotators.len()];
        for r in &self.ratings {
            let a = annotators.binary_search(&r.annotator_id.as_str()).expect("annotator id collected above");
            let i = images.binary_search(&r.image_id.as_str()).expect("image id collected above");
            m[a][i] = f64::from(r.rating);
        }
        if let Some((a, row)) = m.iter().enumerate().find(|(_, row)| row.iter().any(|x| x.is_nan())) {
            let i = row.iter().position(|x| x.is_nan()).unwrap_or(0);
            return Err(PerceptionError::Annotations(format!("`{}` did not rate `{}`", annotators[a], images[i])));
        }
        Ok(m)
    }
}

/// Rounds `x` in `[0, 1]` half-up to the nearest of the [`LEVELS`] levels.
pub fn quantize(x: f64) -> f64 {
    let steps = f64::from(LEVELS - 1);
    (x.clamp(0.0, 1.0) * steps + 0.5).floor() / steps
}

fn min_max(values: &BTreeMap<&str, f64>, what: &str) -> Result<BTreeMap<String, f64>, PerceptionError> {
    let lo = values.values().copied().fold(f64::INFINITY, f64::min);
    let hi = values.values().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(PerceptionError::Annotations(format!("{what} are constant across images; cannot normalise")));
    }
    Ok(values.iter().map(|(k, v)| ((*k).to_owned(), (v - lo) / (hi - lo))).collect())
}

/// Human reference score per image on the 20-level grid.
///
/// Mean ratings are min-max normalised. When triplets are present, each
/// ranking gives 2, 1 and 0 points, summed per image and min-max
/// normalised; images with both signals take the average of the two.
pub fn aggregate_annotations(set: &AnnotationSet) -> Result<BTreeMap<String, f64>, PerceptionError> {
    set.validate()?;
    let mut sums: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for r in &set.ratings {
        let e = sums.entry(r.image_id.as_str()).or_default();
        e.0 += f64::from(r.rating);
        e.1 += 1;
    }
    if let Some((id, _)) = sums.iter().find(|(_, (_, n))| *n < 2) {
        return Err(PerceptionError::Annotations(format!("image `{id}` has fewer than two ratings")));
    }
    let means: BTreeMap<&str, f64> = sums.iter().map(|(k, (s, n))| (*k, s / *n as f64)).collect();
    let mut merged = min_max(&means, "mean ratings")?;

    if !set.triplets.is_empty() {
        let mut points: BTreeMap<&str, f64> = BTreeMap::new();
        for t in &set.triplets {
            for (rank, img) in t.ranked()?.into_iter().enumerate() {
                *points.entry(img).or_default() += (2 - rank) as f64;
            }
        }
        let triplet_scores = min_max(&points, "triplet points")?;
        for (img, t) in triplet_scores {
            merged.entry(img).and_modify(|r| *r = 0.5 * (*r + t)).or_insert(t);
        }
    }
    Ok(merged.into_iter().map(|(k, v)| (k, quantize(v))).collect())
}
