//! Number formatting shared by the CSV writers.

/// Formats `x` with 9 significant digits in plain decimal notation.
pub(crate) fn sig9(x: f64) -> String {
    if !x.is_finite() {
        return if x.is_nan() {
            "nan".into()
        } else if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    if x == 0.0 {
        return "0".into();
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (8 - magnitude).max(0) as usize;
    format!("{x:.decimals$}")
}

#[cfg(test)]
mod tests {
    use super::sig9;

    #[test]
    fn nine_significant_digits() {
        assert_eq!(sig9(21.0), "21.0000000");
        assert_eq!(sig9(-0.001234567891), "-0.00123456789");
        assert_eq!(sig9(123456789.4), "123456789");
        assert_eq!(sig9(0.0), "0");
        assert_eq!(sig9(f64::NAN), "nan");
    }
}
