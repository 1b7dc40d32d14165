//! CSV emission. Numbers are written with 17 significant digits so that a
//! value read back is bit-identical to the one written.

use std::io::{self, Write};

pub fn number(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes a header row followed by `rows`.
pub fn write_csv<W, R>(w: &mut W, header: &[String], rows: R) -> io::Result<()>
where
    W: Write,
    R: IntoIterator<Item = Vec<String>>,
{
    writeln!(w, "{}", header.join(","))?;
    for row in rows {
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_significant_digits_round_trip() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, 0.0] {
            let s = number(x);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), x.to_bits(), "{s}");
            let mantissa = s.split('e').next().unwrap().trim_start_matches('-');
            assert_eq!(mantissa.chars().filter(char::is_ascii_digit).count(), 17);
        }
    }

    #[test]
    fn writes_header_then_rows() {
        let mut buf = Vec::new();
        write_csv(&mut buf, &["a".into(), "b".into()], vec![vec![number(1.0), "x".into()]]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "a,b\n1.0000000000000000e0,x\n");
    }
}
