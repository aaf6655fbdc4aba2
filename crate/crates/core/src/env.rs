//! Gridded urban environment.
//!
//! A [`CityEnvironment`] is immutable once built. Cells are kept sorted by id
//! so that the dense [`CellIdx`] order matches lexicographic id order, which
//! is what every tie rule in the crate relies on.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDate, NaiveDateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::geo::{self, LatLon};
use crate::ids::{CellId, CellIdx};

pub const DEFAULT_ASSIGN_CUTOFF_KM: f64 = 2.0;
pub const KNN_NEIGHBORS: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("row {row}: field `{field}`: {reason}")]
    MalformedRow { row: u64, field: String, reason: String },
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("duplicate cell id `{0}`")]
    DuplicateCell(CellId),
    #[error("cell `{id}`: invalid boundary: {reason}")]
    InvalidBoundary { id: CellId, reason: String },
    #[error("invalid GeoJSON: {0}")]
    GeoJson(String),
    #[error("invalid coordinates ({lat}, {lon})")]
    InvalidCoordinates { lat: f64, lon: f64 },
    #[error("unknown cell `{0}`")]
    UnknownCell(CellId),
    #[error("environment has no cells")]
    EmptyEnvironment,
    #[error("crime distribution is empty")]
    EmptyDistribution,
    #[error("alpha must lie in (0, 1], got {0}")]
    InvalidAlpha(f64),
    #[error("distribution total {declared} does not match sum of counts {actual}")]
    TotalMismatch { declared: u64, actual: u64 },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = EnvError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub id: CellId,
    pub centroid: LatLon,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundary: Option<Vec<LatLon>>,
    #[serde(default)]
    pub neighbors: BTreeSet<CellId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBundle {
    pub population: u64,
    pub average_income: f64,
    pub poverty_ratio: f64,
    pub housing_value: f64,
    pub race_composition: BTreeMap<String, f64>,
    pub gender_ratio: f64,
    pub poi_count: u64,
    pub poi_categories: BTreeMap<String, u64>,
    pub safety_score: f64,
    pub semantic_description: String,
}

impl FeatureBundle {
    fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        let frac = |name: &'static str, v: f64| {
            if v.is_finite() && (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err((name, format!("{v} is not a fraction in [0,1]")))
            }
        };
        frac("poverty_ratio", self.poverty_ratio)?;
        frac("gender_ratio", self.gender_ratio)?;
        frac("safety_score", self.safety_score)?;
        if !(self.average_income.is_finite() && self.average_income >= 0.0) {
            return Err(("average_income", format!("{} must be >= 0", self.average_income)));
        }
        if !(self.housing_value.is_finite() && self.housing_value >= 0.0) {
            return Err(("housing_value", format!("{} must be >= 0", self.housing_value)));
        }
        if !self.race_composition.is_empty() {
            for v in self.race_composition.values() {
                frac("race_json", *v)?;
            }
            let sum: f64 = self.race_composition.values().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(("race_json", format!("fractions sum to {sum}, expected 1")));
            }
        }
        Ok(())
    }
}

/// Serialized form of a city: what `ingest` writes and the service loads.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CityBundle {
    pub name: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    pub cells: Vec<BundleCell>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BundleCell {
    #[serde(flatten)]
    pub cell: GridCell,
    pub features: FeatureBundle,
}

#[derive(Debug, Clone)]
pub struct CityEnvironment {
    name: String,
    metadata: BTreeMap<String, String>,
    cells: Vec<GridCell>,
    features: Vec<FeatureBundle>,
    index: HashMap<CellId, CellIdx>,
    units: Vec<[f64; 3]>,
    adjacency: Vec<Vec<CellIdx>>,
    bboxes: Vec<Option<(LatLon, LatLon)>>,
    has_boundaries: bool,
    assign_cutoff_km: f64,
}

impl CityEnvironment {
    /// Builds an environment. Explicit neighbor sets are kept (and
    /// symmetrized); when none are given, adjacency comes from shared boundary
    /// edges, or from the 8 nearest centroids for cells without a polygon.
    pub fn new(
        name: impl Into<String>,
        cells: Vec<(GridCell, FeatureBundle)>,
        metadata: BTreeMap<String, String>,
    ) -> Result<Self> {
        let recompute = cells.iter().all(|(c, _)| c.neighbors.is_empty());
        Self::build(name.into(), cells, metadata, recompute)
    }

    fn build(
        name: String,
        mut cells: Vec<(GridCell, FeatureBundle)>,
        metadata: BTreeMap<String, String>,
        compute_adjacency: bool,
    ) -> Result<Self> {
        if cells.is_empty() {
            return Err(EnvError::EmptyEnvironment);
        }
        cells.sort_by(|a, b| a.0.id.cmp(&b.0.id));
        for w in cells.windows(2) {
            if w[0].0.id == w[1].0.id {
                return Err(EnvError::DuplicateCell(w[0].0.id.clone()));
            }
        }
        for (cell, _) in cells.iter_mut() {
            if !cell.centroid.is_valid() {
                return Err(EnvError::InvalidCoordinates { lat: cell.centroid.lat, lon: cell.centroid.lon });
            }
            if let Some(ring) = cell.boundary.as_mut() {
                close_ring(&cell.id, ring)?;
            }
        }
        let (cells, features): (Vec<_>, Vec<_>) = cells.into_iter().unzip();
        let index = cells.iter().enumerate().map(|(i, c)| (c.id.clone(), CellIdx::from(i))).collect();
        let units = cells.iter().map(|c| c.centroid.to_unit()).collect();
        let bboxes = cells.iter().map(|c| c.boundary.as_deref().map(geo::ring_bbox)).collect();
        let has_boundaries = cells.iter().any(|c| c.boundary.is_some());
        let mut env = CityEnvironment {
            name,
            metadata,
            cells,
            features,
            index,
            units,
            adjacency: Vec::new(),
            bboxes,
            has_boundaries,
            assign_cutoff_km: DEFAULT_ASSIGN_CUTOFF_KM,
        };
        if compute_adjacency {
            env.compute_adjacency();
        }
        env.rebuild_adjacency_index()?;
        Ok(env)
    }

    pub fn from_bundle(bundle: CityBundle) -> Result<Self> {
        let cells = bundle.cells.into_iter().map(|c| (c.cell, c.features)).collect();
        Self::new(bundle.name, cells, bundle.metadata)
    }

    pub fn to_bundle(&self) -> CityBundle {
        CityBundle {
            name: self.name.clone(),
            metadata: self.metadata.clone(),
            cells: self
                .cells
                .iter()
                .zip(&self.features)
                .map(|(c, f)| BundleCell { cell: c.clone(), features: f.clone() })
                .collect(),
        }
    }

    pub fn load_bundle(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        Self::from_bundle(serde_json::from_str(&text)?)
    }

    fn compute_adjacency(&mut self) {
        let n = self.cells.len();
        let mut sets: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];

        // Shared polygon edges.
        let mut edges: HashMap<((i64, i64), (i64, i64)), Vec<usize>> = HashMap::new();
        for (i, c) in self.cells.iter().enumerate() {
            if let Some(ring) = &c.boundary {
                for w in ring.windows(2) {
                    let (a, b) = (quantize(w[0]), quantize(w[1]));
                    if a == b {
                        continue;
                    }
                    let key = if a < b { (a, b) } else { (b, a) };
                    edges.entry(key).or_default().push(i);
                }
            }
        }
        for owners in edges.values() {
            for &a in owners {
                for &b in owners {
                    if a != b {
                        sets[a].insert(b);
                    }
                }
            }
        }

        // k nearest centroids for polygon-less cells.
        let k = KNN_NEIGHBORS.min(n.saturating_sub(1));
        if k > 0 {
            for i in 0..n {
                if self.cells[i].boundary.is_some() {
                    continue;
                }
                let mut others: Vec<(f64, usize)> =
                    (0..n).filter(|&j| j != i).map(|j| (geo::unit_distance_km(&self.units[i], &self.units[j]), j)).collect();
                let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
                if others.len() > k {
                    others.select_nth_unstable_by(k - 1, cmp);
                    others.truncate(k);
                }
                for (_, j) in others {
                    sets[i].insert(j);
                    sets[j].insert(i);
                }
            }
        }

        for (i, set) in sets.into_iter().enumerate() {
            self.cells[i].neighbors = set.into_iter().map(|j| self.cells[j].id.clone()).collect();
        }
    }

    fn rebuild_adjacency_index(&mut self) -> Result<()> {
        let mut adjacency = Vec::with_capacity(self.cells.len());
        for c in &self.cells {
            let mut row = Vec::with_capacity(c.neighbors.len());
            for nb in &c.neighbors {
                let j = *self.index.get(nb).ok_or_else(|| EnvError::UnknownCell(nb.clone()))?;
                row.push(j);
            }
            adjacency.push(row);
        }
        // Symmetrize explicit neighbor lists as well.
        let n = self.cells.len();
        let mut sym: Vec<BTreeSet<CellIdx>> = adjacency.iter().map(|r| r.iter().copied().collect()).collect();
        for i in 0..n {
            for &j in &adjacency[i] {
                sym[j.get()].insert(CellIdx::from(i));
            }
        }
        for i in 0..n {
            sym[i].remove(&CellIdx::from(i));
            self.cells[i].neighbors = sym[i].iter().map(|j| self.cells[j.get()].id.clone()).collect();
        }
        self.adjacency = sym.into_iter().map(|s| s.into_iter().collect()).collect();
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cells(&self) -> &[GridCell] {
        &self.cells
    }

    pub fn cell(&self, idx: CellIdx) -> &GridCell {
        &self.cells[idx.get()]
    }

    pub fn cell_id(&self, idx: CellIdx) -> &CellId {
        &self.cells[idx.get()].id
    }

    pub fn features(&self, idx: CellIdx) -> &FeatureBundle {
        &self.features[idx.get()]
    }

    pub fn features_mut(&mut self, idx: CellIdx) -> &mut FeatureBundle {
        &mut self.features[idx.get()]
    }

    pub fn features_of(&self, id: &str) -> Option<&FeatureBundle> {
        self.index(id).map(|i| self.features(i))
    }

    pub fn index(&self, id: &str) -> Option<CellIdx> {
        self.index.get(id).copied()
    }

    pub fn require(&self, id: &str) -> Result<CellIdx> {
        self.index(id).ok_or_else(|| EnvError::UnknownCell(CellId::from(id)))
    }

    pub fn neighbors(&self, idx: CellIdx) -> &[CellIdx] {
        &self.adjacency[idx.get()]
    }

    pub fn unit(&self, idx: CellIdx) -> &[f64; 3] {
        &self.units[idx.get()]
    }

    pub fn distance_km(&self, a: CellIdx, b: CellIdx) -> f64 {
        geo::unit_distance_km(&self.units[a.get()], &self.units[b.get()])
    }

    pub fn indices(&self) -> impl Iterator<Item = CellIdx> + '_ {
        (0..self.cells.len()).map(CellIdx::from)
    }

    pub fn total_population(&self) -> u64 {
        self.features.iter().map(|f| f.population).sum()
    }

    pub fn has_boundaries(&self) -> bool {
        self.has_boundaries
    }

    pub fn assign_cutoff_km(&self) -> f64 {
        self.assign_cutoff_km
    }

    pub fn with_assign_cutoff_km(mut self, km: f64) -> Self {
        self.assign_cutoff_km = km;
        self
    }

    /// Maps a coordinate to the cell containing it.
    ///
    /// With boundaries: ray casting, boundary points inclusive, first match in
    /// id order. Without: nearest centroid within the cutoff radius, ties to
    /// the smaller id.
    pub fn assign_point(&self, lat: f64, lon: f64) -> Result<Option<CellIdx>> {
        let p = LatLon::new(lat, lon);
        if !p.is_valid() {
            return Err(EnvError::InvalidCoordinates { lat, lon });
        }
        if self.has_boundaries {
            for (i, cell) in self.cells.iter().enumerate() {
                let (Some(ring), Some((lo, hi))) = (&cell.boundary, self.bboxes[i]) else {
                    continue;
                };
                if p.lat < lo.lat || p.lat > hi.lat || p.lon < lo.lon || p.lon > hi.lon {
                    continue;
                }
                if geo::ring_contains(ring, p) {
                    return Ok(Some(CellIdx::from(i)));
                }
            }
            return Ok(None);
        }
        let u = p.to_unit();
        let mut best: Option<(f64, usize)> = None;
        for (i, cu) in self.units.iter().enumerate() {
            let d = geo::unit_distance_km(&u, cu);
            if best.is_none_or(|(bd, _)| d < bd - 1e-9) {
                best = Some((d, i));
            }
        }
        Ok(best.filter(|(d, _)| *d <= self.assign_cutoff_km).map(|(_, i)| CellIdx::from(i)))
    }
}

fn quantize(p: LatLon) -> (i64, i64) {
    ((p.lat * 1e7).round() as i64, (p.lon * 1e7).round() as i64)
}

fn close_ring(id: &CellId, ring: &mut Vec<LatLon>) -> Result<()> {
    if ring.first() != ring.last() {
        if let Some(&first) = ring.first() {
            ring.push(first);
        }
    }
    if ring.len() < 4 {
        return Err(EnvError::InvalidBoundary {
            id: id.clone(),
            reason: format!("ring has {} vertices, need at least 4", ring.len()),
        });
    }
    if let Some(v) = ring.iter().find(|v| !v.is_valid()) {
        return Err(EnvError::InvalidBoundary { id: id.clone(), reason: format!("vertex ({}, {}) out of range", v.lat, v.lon) });
    }
    Ok(())
}

fn read_to_string(path: &Path) -> Result<String> {
    let mut s = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut s))
        .map_err(|source| EnvError::Io { path: path.to_owned(), source })?;
    Ok(s)
}

// ---------------------------------------------------------------------------
// Loading

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    pub rows: usize,
    /// Cells dropped for lacking a safety score.
    pub dropped_missing_safety: Vec<CellId>,
    pub warnings: Vec<String>,
}

pub const FEATURE_COLUMNS: [&str; 13] = [
    "cell_id",
    "lat",
    "lon",
    "population",
    "average_income",
    "poverty_ratio",
    "housing_value",
    "race_json",
    "gender_ratio",
    "poi_count",
    "poi_categories_json",
    "safety_score",
    "semantic_description",
];

/// Loads a features CSV and an optional GeoJSON boundary file.
pub fn load_city(features: &Path, boundaries: Option<&Path>) -> Result<(CityEnvironment, LoadReport)> {
    let name = features.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "city".into());
    let file = File::open(features).map_err(|source| EnvError::Io { path: features.to_owned(), source })?;
    let geojson = boundaries.map(read_to_string).transpose()?;
    load_city_from(name, file, geojson.as_deref())
}

pub fn load_city_from<R: Read>(
    name: impl Into<String>,
    features: R,
    boundaries_geojson: Option<&str>,
) -> Result<(CityEnvironment, LoadReport)> {
    let mut report = LoadReport::default();
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(features);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name).ok_or_else(|| EnvError::MissingColumn(name.to_owned()));
    let cols: Vec<usize> = FEATURE_COLUMNS.iter().map(|c| col(c)).collect::<Result<_>>()?;

    let mut rows: Vec<(GridCell, FeatureBundle)> = Vec::new();
    let mut seen: BTreeSet<CellId> = BTreeSet::new();
    for rec in rdr.records() {
        let rec = rec?;
        report.rows += 1;
        let row = rec.position().map(|p| p.line()).unwrap_or(report.rows as u64 + 1);
        let get = |k: usize| rec.get(cols[k]).unwrap_or("");
        let bad = |field: &str, reason: String| EnvError::MalformedRow { row, field: field.to_owned(), reason };

        let id = get(0);
        if id.is_empty() {
            return Err(bad("cell_id", "empty".into()));
        }
        let id = CellId::from(id);
        if !seen.insert(id.clone()) {
            return Err(EnvError::DuplicateCell(id));
        }
        let float = |k: usize| -> Result<f64> {
            get(k)
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad(FEATURE_COLUMNS[k], format!("`{}` is not a number", get(k))))
        };
        let count = |k: usize| -> Result<u64> {
            let s = get(k);
            s.parse::<u64>()
                .ok()
                .or_else(|| s.parse::<f64>().ok().filter(|v| *v >= 0.0 && v.fract() == 0.0).map(|v| v as u64))
                .ok_or_else(|| bad(FEATURE_COLUMNS[k], format!("`{s}` is not a non-negative count")))
        };

        let safety_raw = get(11);
        if safety_raw.is_empty() {
            report.dropped_missing_safety.push(id);
            continue;
        }
        let lat = float(1)?;
        let lon = float(2)?;
        let centroid = LatLon::new(lat, lon);
        if !centroid.is_valid() {
            return Err(bad("lat", format!("({lat}, {lon}) is not a valid WGS84 coordinate")));
        }
        let race_composition: BTreeMap<String, f64> = parse_json_map(get(7)).map_err(|e| bad("race_json", e))?;
        let poi_categories: BTreeMap<String, u64> = parse_json_map(get(10)).map_err(|e| bad("poi_categories_json", e))?;
        let features = FeatureBundle {
            population: count(3)?,
            average_income: float(4)?,
            poverty_ratio: float(5)?,
            housing_value: float(6)?,
            race_composition,
            gender_ratio: float(8)?,
            poi_count: count(9)?,
            poi_categories,
            safety_score: float(11)?,
            semantic_description: get(12).to_owned(),
        };
        features.validate().map_err(|(field, reason)| bad(field, reason))?;
        rows.push((GridCell { id, centroid, boundary: None, neighbors: BTreeSet::new() }, features));
    }

    if let Some(text) = boundaries_geojson {
        let polygons = parse_boundaries(text)?;
        let mut by_id: HashMap<CellId, usize> = rows.iter().enumerate().map(|(i, (c, _))| (c.id.clone(), i)).collect();
        for (id, ring) in polygons {
            match by_id.remove(&id) {
                Some(i) => rows[i].0.boundary = Some(ring),
                None if report.dropped_missing_safety.contains(&id) => {}
                None => {
                    tracing::warn!(cell = %id, "boundary without feature row");
                    report.warnings.push(format!("boundary `{id}` has no feature row; skipped"));
                }
            }
        }
    }

    let env = CityEnvironment::new(name, rows, BTreeMap::new())?;
    Ok((env, report))
}

fn parse_json_map<V: serde::de::DeserializeOwned>(s: &str) -> std::result::Result<BTreeMap<String, V>, String> {
    if s.is_empty() {
        return Ok(BTreeMap::new());
    }
    serde_json::from_str(s).map_err(|e| e.to_string())
}

/// Extracts `cell_id → outer ring` from a GeoJSON FeatureCollection.
/// MultiPolygons contribute their first polygon.
pub fn parse_boundaries(text: &str) -> Result<Vec<(CellId, Vec<LatLon>)>> {
    let doc: serde_json::Value = serde_json::from_str(text)?;
    let features = doc
        .get("features")
        .and_then(|f| f.as_array())
        .ok_or_else(|| EnvError::GeoJson("expected a FeatureCollection with `features`".into()))?;
    let mut out = Vec::with_capacity(features.len());
    for (i, feat) in features.iter().enumerate() {
        let id = match feat.pointer("/properties/cell_id") {
            Some(serde_json::Value::String(s)) => s.clone(),
            Some(serde_json::Value::Number(n)) => n.to_string(),
            _ => return Err(EnvError::GeoJson(format!("feature {i} lacks property `cell_id`"))),
        };
        let geom = feat.get("geometry").ok_or_else(|| EnvError::GeoJson(format!("feature `{id}` has no geometry")))?;
        let coords = geom.get("coordinates");
        let ring = match geom.get("type").and_then(|t| t.as_str()) {
            Some("Polygon") => coords.and_then(|c| c.get(0)),
            Some("MultiPolygon") => coords.and_then(|c| c.get(0)).and_then(|p| p.get(0)),
            other => {
                return Err(EnvError::GeoJson(format!("feature `{id}`: unsupported geometry {other:?}")));
            }
        }
        .and_then(|r| r.as_array())
        .ok_or_else(|| EnvError::GeoJson(format!("feature `{id}`: malformed coordinates")))?;
        let mut pts = Vec::with_capacity(ring.len());
        for v in ring {
            let lon = v.get(0).and_then(|x| x.as_f64());
            let lat = v.get(1).and_then(|x| x.as_f64());
            match (lat, lon) {
                (Some(lat), Some(lon)) => pts.push(LatLon::new(lat, lon)),
                _ => return Err(EnvError::GeoJson(format!("feature `{id}`: bad vertex"))),
            }
        }
        out.push((CellId::from(id), pts));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Crime distributions

/// Inclusive time window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Period {
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
}

impl Period {
    pub fn contains(&self, t: DateTime<Utc>) -> bool {
        self.start <= t && t <= self.end
    }
}

/// Per-cell event counts. `total` always equals the sum of `counts`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDistribution")]
pub struct CrimeDistribution {
    counts: BTreeMap<CellId, u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    period: Option<Period>,
    total: u64,
}

#[derive(Deserialize)]
struct RawDistribution {
    counts: BTreeMap<CellId, u64>,
    #[serde(default)]
    period: Option<Period>,
    #[serde(default)]
    total: Option<u64>,
}

impl TryFrom<RawDistribution> for CrimeDistribution {
    type Error = EnvError;

    fn try_from(raw: RawDistribution) -> Result<Self> {
        let actual = raw.counts.values().sum();
        if let Some(declared) = raw.total {
            if declared != actual {
                return Err(EnvError::TotalMismatch { declared, actual });
            }
        }
        Ok(CrimeDistribution { counts: raw.counts, period: raw.period, total: actual })
    }
}

impl CrimeDistribution {
    pub fn from_counts<I, K>(counts: I) -> Self
    where
        I: IntoIterator<Item = (K, u64)>,
        K: Into<CellId>,
    {
        let mut map = BTreeMap::new();
        for (k, v) in counts {
            *map.entry(k.into()).or_insert(0) += v;
        }
        let total = map.values().sum();
        CrimeDistribution { counts: map, period: None, total }
    }

    /// All cells of `env` with zero counts.
    pub fn zeros(env: &CityEnvironment) -> Self {
        Self::from_counts(env.cells().iter().map(|c| (c.id.clone(), 0)))
    }

    /// Counts aligned with `env` cell order.
    pub fn from_dense(env: &CityEnvironment, dense: &[u64]) -> Self {
        Self::from_counts(env.cells().iter().zip(dense).map(|(c, &n)| (c.id.clone(), n)))
    }

    pub fn with_period(mut self, period: Option<Period>) -> Self {
        self.period = period;
        self
    }

    pub fn counts(&self) -> &BTreeMap<CellId, u64> {
        &self.counts
    }

    pub fn count(&self, id: &str) -> u64 {
        self.counts.get(id).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn period(&self) -> Option<&Period> {
        self.period.as_ref()
    }

    pub fn num_cells(&self) -> usize {
        self.counts.len()
    }

    pub fn add(&mut self, id: &CellId, n: u64) {
        *self.counts.entry(id.clone()).or_insert(0) += n;
        self.total += n;
    }

    /// Ensures every cell of the support is present (with zero if absent).
    pub fn extend_support<'a>(&mut self, support: impl IntoIterator<Item = &'a CellId>) {
        for id in support {
            self.counts.entry(id.clone()).or_insert(0);
        }
    }

    /// Checks every cell id exists in `env`.
    pub fn check_against(&self, env: &CityEnvironment) -> Result<()> {
        match self.counts.keys().find(|k| env.index(k.as_str()).is_none()) {
            Some(k) => Err(EnvError::UnknownCell(k.clone())),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub records: u64,
    pub assigned: u64,
    pub unassigned: u64,
    pub out_of_period: u64,
}

/// Parses an ISO-8601 timestamp. Offsets are honoured; naive values are UTC.
pub fn parse_timestamp(s: &str) -> Option<DateTime<Utc>> {
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(t.and_utc());
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d").ok().and_then(|d| d.and_hms_opt(0, 0, 0)).map(|t| t.and_utc())
}

pub fn ingest_crimes(env: &CityEnvironment, records: &Path, period: Option<Period>) -> Result<(CrimeDistribution, IngestReport)> {
    let file = File::open(records).map_err(|source| EnvError::Io { path: records.to_owned(), source })?;
    ingest_crimes_from(env, file, period)
}

/// Assigns timestamped records to cells. The resulting distribution covers
/// every cell of `env`, zeros included.
pub fn ingest_crimes_from<R: Read>(
    env: &CityEnvironment,
    records: R,
    period: Option<Period>,
) -> Result<(CrimeDistribution, IngestReport)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).flexible(true).from_reader(records);
    let headers = rdr.headers()?.clone();
    let pos = |name: &str| headers.iter().position(|h| h == name);
    let ts_col = pos("timestamp_iso8601")
        .or_else(|| pos("timestamp"))
        .ok_or_else(|| EnvError::MissingColumn("timestamp_iso8601".into()))?;
    let (lat_col, lon_col, cell_col) = (pos("lat"), pos("lon"), pos("cell_id"));

    let mut dense = vec![0u64; env.len()];
    let mut report = IngestReport::default();
    for rec in rdr.records() {
        let rec = rec?;
        report.records += 1;
        let row = rec.position().map(|p| p.line()).unwrap_or(report.records + 1);
        let field = |c: Option<usize>| c.and_then(|c| rec.get(c)).unwrap_or("");
        let ts_raw = field(Some(ts_col));
        let ts = parse_timestamp(ts_raw).ok_or_else(|| EnvError::MalformedRow {
            row,
            field: "timestamp_iso8601".into(),
            reason: format!("`{ts_raw}` is not an ISO-8601 timestamp"),
        })?;
        if period.is_some_and(|p| !p.contains(ts)) {
            report.out_of_period += 1;
            continue;
        }
        let cell = field(cell_col);
        let idx = if !cell.is_empty() {
            env.index(cell)
        } else {
            let (lat, lon) = (field(lat_col), field(lon_col));
            match (lat.parse::<f64>(), lon.parse::<f64>()) {
                (Ok(lat), Ok(lon)) => match env.assign_point(lat, lon) {
                    Ok(idx) => idx,
                    Err(EnvError::InvalidCoordinates { .. }) => None,
                    Err(e) => return Err(e),
                },
                _ => None,
            }
        };
        match idx {
            Some(i) => {
                dense[i.get()] += 1;
                report.assigned += 1;
            }
            None => report.unassigned += 1,
        }
    }
    Ok((CrimeDistribution::from_dense(env, &dense).with_period(period), report))
}

// ---------------------------------------------------------------------------
// Hotspots

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HotspotSet {
    pub cell_ids: Vec<CellId>,
    pub alpha: f64,
    pub achieved_coverage: f64,
}

/// `ceil(x)` that ignores floating-point noise just above an integer.
pub fn ceil_count(x: f64) -> usize {
    (x - 1e-9).ceil().max(0.0) as usize
}

/// Cells sorted by count descending, ties by ascending id.
pub fn rank_cells(dist: &CrimeDistribution) -> Vec<(&CellId, u64)> {
    let mut v: Vec<(&CellId, u64)> = dist.counts().iter().map(|(k, &c)| (k, c)).collect();
    // BTreeMap iteration is already id-ascending; a stable sort keeps it.
    v.sort_by_key(|e| std::cmp::Reverse(e.1));
    v
}

/// Top `ceil(alpha * N)` cells, where N is the number of cells in the
/// distribution's support.
pub fn extract_hotspots(dist: &CrimeDistribution, alpha: f64) -> Result<HotspotSet> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(EnvError::InvalidAlpha(alpha));
    }
    if dist.total() == 0 || dist.num_cells() == 0 {
        return Err(EnvError::EmptyDistribution);
    }
    let n = ceil_count(alpha * dist.num_cells() as f64).min(dist.num_cells());
    let ranked = rank_cells(dist);
    let top = &ranked[..n];
    let covered: u64 = top.iter().map(|(_, c)| c).sum();
    Ok(HotspotSet {
        cell_ids: top.iter().map(|(k, _)| (*k).clone()).collect(),
        alpha,
        achieved_coverage: covered as f64 / dist.total() as f64,
    })
}
