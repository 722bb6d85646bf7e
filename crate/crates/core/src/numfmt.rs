/// Decimal rendering with nine significant digits, used for every numeric CSV cell.
pub fn sig9(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    let decimals = (8 - exp).max(0) as usize;
    format!("{v:.decimals$}")
}

/// Optional metric cell; absent values print as `-`.
pub fn opt_sig9(v: Option<f64>) -> String {
    v.map(sig9).unwrap_or_else(|| "-".into())
}
