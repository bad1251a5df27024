/// Formats `x` with nine significant digits in the style of C's `%.9g`.
pub fn sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{:.8e}", x);
    let (mantissa, exp) = sci
        .split_once('e')
        .expect("scientific format has an exponent");
    let exp: i32 = exp.parse().expect("exponent is an integer");
    if !(-5..9).contains(&exp) {
        let mantissa = trim_zeros(mantissa);
        return format!("{mantissa}e{exp}");
    }
    let decimals = (8 - exp).max(0) as usize;
    trim_zeros(&format!("{:.*}", decimals, x)).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Rounds `x` to the value that [`sig9`] writes.
pub fn round9(x: f64) -> f64 {
    sig9(x).parse().expect("sig9 output parses")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn formats_like_percent_g() {
        assert_eq!(sig9(0.0), "0");
        assert_eq!(sig9(1.0), "1");
        assert_eq!(sig9(-2665.0), "-2665");
        assert_eq!(sig9(0.667457627123), "0.667457627");
        assert_eq!(sig9(9.9999999999), "10");
        assert_eq!(sig9(1.23456789e-7), "1.23456789e-7");
        assert_eq!(sig9(123456789012.0), "1.23456789e11");
    }

    proptest! {
        #[test]
        fn rewrite_is_stable(x in -1e12f64..1e12) {
            let s = sig9(x);
            let y: f64 = s.parse().unwrap();
            prop_assert_eq!(sig9(y), s);
        }
    }
}
