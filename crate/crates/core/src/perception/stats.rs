use super::PerceptionError;

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population variance.
fn pvar(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, PerceptionError> {
    if x.len() != y.len() {
        return Err(PerceptionError::Statistic(format!("length mismatch: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(PerceptionError::Statistic("pearson needs at least two points".into()));
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(PerceptionError::Statistic("pearson is undefined for a constant vector".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Cronbach's alpha with annotators as items. `ratings[a][i]` is annotator
/// `a`'s rating of image `i`.
pub fn cronbach_alpha(ratings: &[Vec<f64>]) -> Result<f64, PerceptionError> {
    let k = ratings.len();
    if k < 2 {
        return Err(PerceptionError::Statistic("cronbach_alpha needs at least two annotators".into()));
    }
    let n = ratings[0].len();
    if n < 2 {
        return Err(PerceptionError::Statistic("cronbach_alpha needs at least two images".into()));
    }
    if ratings.iter().any(|r| r.len() != n) {
        return Err(PerceptionError::Statistic("ratings matrix is ragged".into()));
    }
    let totals: Vec<f64> = (0..n).map(|i| ratings.iter().map(|r| r[i]).sum()).collect();
    let total_var = pvar(&totals);
    if total_var == 0.0 {
        return Err(PerceptionError::Statistic("total score variance is zero".into()));
    }
    let item_var: f64 = ratings.iter().map(|r| pvar(r)).sum();
    let k = k as f64;
    Ok(k / (k - 1.0) * (1.0 - item_var / total_var))
}
