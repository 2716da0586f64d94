//! CSV output with a provenance preamble.

use std::io::Write;

/// `%.16e`: 17 significant digits, enough to round-trip an `f64`.
pub fn fmt_num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "nan".into()
    } else if x > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

/// A header row plus string cells, written in insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: Vec<String>) -> Self {
        Self {
            header,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn header(&self) -> &[String] {
        &self.header
    }

    pub fn rows(&self) -> &[Vec<String>] {
        &self.rows
    }

    /// `#`-prefixed provenance lines followed by the CSV body.
    pub fn render(&self, provenance: &[String]) -> std::io::Result<Vec<u8>> {
        let mut out = Vec::new();
        for line in provenance {
            writeln!(out, "# {line}")?;
        }
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row)?;
        }
        w.flush()?;
        drop(w);
        Ok(out)
    }
}

/// The part of a rendered file after the `#` preamble.
pub fn body(rendered: &str) -> &str {
    let mut rest = rendered;
    while rest.starts_with('#') {
        rest = rest.split_once('\n').map_or("", |(_, r)| r);
    }
    rest
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn number_format() {
        assert_eq!(fmt_num(1.0), "1.0000000000000000e0");
        assert_eq!(fmt_num(f64::INFINITY), "inf");
        let x = 0.1 + 0.2;
        assert_eq!(fmt_num(x).parse::<f64>().unwrap(), x);
    }

    #[test]
    fn render_and_strip_preamble() {
        let mut t = Table::new(vec!["a".into(), "b".into()]);
        t.push(vec!["1".into(), "x,y".into()]);
        let s = String::from_utf8(t.render(&["seed = 3".into()]).unwrap()).unwrap();
        assert_eq!(s, "# seed = 3\na,b\n1,\"x,y\"\n");
        assert_eq!(body(&s), "a,b\n1,\"x,y\"\n");
    }
}
