use super::MmhError;

/// Normalized autocorrelation `ρ(ℓ)` for `ℓ = 0..=max_lag`, with the biased
/// autocovariance estimate (common denominator `Σ (s_i − s̄)²`).
pub fn acf(series: &[f64], max_lag: usize) -> Result<Vec<f64>, MmhError> {
    let n = series.len();
    if n <= max_lag {
        return Err(MmhError::SeriesTooShort { len: n, max_lag });
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let c: Vec<f64> = series.iter().map(|s| s - mean).collect();
    let denom: f64 = c.iter().map(|v| v * v).sum();
    if !(denom > 0.0) {
        return Err(MmhError::ConstantSeries);
    }
    Ok((0..=max_lag).map(|l| c[..n - l].iter().zip(&c[l..]).map(|(a, b)| a * b).sum::<f64>() / denom).collect())
}
