//! Locale-independent float formatting shared by every CSV writer.

/// 17 significant digits in scientific notation, `.` as decimal separator.
/// Infinities print as `inf` / `-inf`, NaN as `nan`.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{v:.16e}")
    }
}
