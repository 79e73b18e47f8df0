use serde::Serialize;

/// `1234567` as `1,234,567`.
pub fn thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

/// Scientific notation with three significant digits.
pub fn sci(x: f64) -> String {
    format!("{x:.2e}")
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s
}

/// Rows of a matrix with fixed-width cells, each line indented and labelled.
pub fn matrix_block(labels: &[String], rows: &[Vec<f64>]) -> String {
    let width = labels.iter().map(|l| l.chars().count()).max().unwrap_or(0);
    let mut out = String::new();
    for (label, row) in labels.iter().zip(rows) {
        out.push_str(&format!("  {label:<width$}"));
        for v in row {
            out.push_str(&format!(" {v:>9.4}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separators() {
        assert_eq!(thousands(0), "0");
        assert_eq!(thousands(999), "999");
        assert_eq!(thousands(1000), "1,000");
        assert_eq!(thousands(2_684_354_560), "2,684,354,560");
    }

    #[test]
    fn three_significant_digits() {
        assert_eq!(sci(2.220446049250313e-16), "2.22e-16");
        assert_eq!(sci(0.0), "0.00e0");
    }
}
