//! Plain CSV tables. Numbers use the shortest round-trip form (scientific
//! notation for very small or large magnitudes); NaN becomes an empty cell.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(f64),
    Int(i64),
    Text(String),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Num(x) if x.is_nan() => String::new(),
            Cell::Num(x) if *x != 0.0 && (x.abs() < 1e-6 || x.abs() >= 1e16) => format!("{x:e}"),
            Cell::Num(x) => format!("{x}"),
            Cell::Int(i) => i.to_string(),
            Cell::Text(s) => s.clone(),
        }
    }
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Num(x)
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.to_string())
    }
}

#[derive(Debug, Clone, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        Table {
            header: header.iter().map(|s| s.as_ref().to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn write_to<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        let map = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(&self.header).map_err(map)?;
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::render)).map_err(map)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv output is utf-8")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_numbers_and_gaps() {
        let mut t = Table::new(&["t", "x", "tag"]);
        t.push(vec![0.5.into(), f64::NAN.into(), "OL".into()]);
        t.push(vec![Cell::Int(3), 1e-20.into(), "UL".into()]);
        assert_eq!(t.to_csv_string(), "t,x,tag\n0.5,,OL\n3,1e-20,UL\n");
    }
}
