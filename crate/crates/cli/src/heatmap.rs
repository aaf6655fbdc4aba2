//! GeoJSON export of per-cell crime counts.

use serde_json::{json, Value};

use crimesim_core::env::{CityEnvironment, CrimeDistribution, GridCell};

fn geometry(cell: &GridCell) -> Value {
    match &cell.boundary {
        Some(ring) if ring.len() >= 3 => {
            let mut coords: Vec<[f64; 2]> = ring.iter().map(|p| [p.lon, p.lat]).collect();
            if coords.first() != coords.last() {
                coords.push(coords[0]);
            }
            json!({ "type": "Polygon", "coordinates": [coords] })
        }
        _ => json!({ "type": "Point", "coordinates": [cell.centroid.lon, cell.centroid.lat] }),
    }
}

/// One feature per city cell with `count` and `share` properties. Shares
/// are zero everywhere when the distribution is empty.
pub fn feature_collection(env: &CityEnvironment, dist: &CrimeDistribution) -> Value {
    let total = dist.total();
    let features: Vec<Value> = env
        .cells()
        .iter()
        .map(|cell| {
            let count = dist.count(cell.id.as_str());
            let share = if total == 0 { 0.0 } else { count as f64 / total as f64 };
            json!({
                "type": "Feature",
                "geometry": geometry(cell),
                "properties": { "cell_id": cell.id, "count": count, "share": share },
            })
        })
        .collect();
    json!({ "type": "FeatureCollection", "features": features, "properties": { "total": total } })
}

/// Paired counts for two runs plus the per-cell difference `left - right`.
pub fn delta_collection(env: &CityEnvironment, left: &CrimeDistribution, right: &CrimeDistribution) -> Value {
    let features: Vec<Value> = env
        .cells()
        .iter()
        .map(|cell| {
            let (l, r) = (left.count(cell.id.as_str()), right.count(cell.id.as_str()));
            json!({
                "type": "Feature",
                "geometry": geometry(cell),
                "properties": { "cell_id": cell.id, "left": l, "right": r, "delta": l as i64 - r as i64 },
            })
        })
        .collect();
    json!({ "type": "FeatureCollection", "features": features })
}
