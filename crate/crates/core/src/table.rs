//! Delimiter-separated text tables with a header row.
//!
//! Readers look columns up by header name so optional trailing columns
//! (such as `road_class`) can be absent. Writers always emit `,` and the
//! shortest round-trip representation of floats, which keeps outputs
//! byte-identical across runs.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{AorError, Result};

#[derive(Debug, Clone)]
pub struct Table {
    name: String,
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
}

pub struct Row<'a> {
    table: &'a Table,
    line: usize,
    fields: &'a [String],
}

impl Table {
    pub fn read_path(path: &Path) -> Result<Table> {
        let file = File::open(path).map_err(|e| AorError::io(path, e))?;
        Table::read(file, &path.display().to_string())
    }

    pub fn read<R: Read>(reader: R, name: &str) -> Result<Table> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .flexible(true)
            .comment(Some(b'#'))
            .from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| AorError::parse(name, 1, e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect::<Vec<_>>();
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| AorError::parse(name, i + 2, e.to_string()))?;
            if rec.iter().all(str::is_empty) {
                continue;
            }
            rows.push(rec.iter().map(str::to_string).collect());
        }
        Ok(Table {
            name: name.to_string(),
            headers,
            rows,
        })
    }

    pub fn has_column(&self, column: &str) -> bool {
        self.headers.iter().any(|h| h == column)
    }

    pub fn require_columns(&self, columns: &[&str]) -> Result<()> {
        for c in columns {
            if !self.has_column(c) {
                return Err(AorError::parse(
                    &self.name,
                    1,
                    format!("missing column `{c}`"),
                ));
            }
        }
        Ok(())
    }

    pub fn rows(&self) -> impl Iterator<Item = Row<'_>> {
        self.rows.iter().enumerate().map(move |(i, fields)| Row {
            table: self,
            line: i + 2,
            fields,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

impl Row<'_> {
    pub fn line(&self) -> usize {
        self.line
    }

    pub fn error(&self, message: impl Into<String>) -> AorError {
        AorError::parse(&self.table.name, self.line, message)
    }

    /// Field by column name; `None` when the column is absent or the cell is empty.
    pub fn opt(&self, column: &str) -> Option<&str> {
        let idx = self.table.headers.iter().position(|h| h == column)?;
        self.fields
            .get(idx)
            .map(String::as_str)
            .filter(|s| !s.is_empty())
    }

    pub fn str(&self, column: &str) -> Result<&str> {
        self.opt(column)
            .ok_or_else(|| self.error(format!("missing value for `{column}`")))
    }

    pub fn parse<T: std::str::FromStr>(&self, column: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.str(column)?;
        raw.parse::<T>()
            .map_err(|e| self.error(format!("bad `{column}` value {raw:?}: {e}")))
    }
}

/// Buffered table writer. Rows are appended as already-formatted cells.
pub struct TableWriter {
    buf: String,
}

impl TableWriter {
    pub fn new(headers: &[&str]) -> Self {
        let mut buf = headers.join(",");
        buf.push('\n');
        TableWriter { buf }
    }

    pub fn row<I, S>(&mut self, cells: I)
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut first = true;
        for c in cells {
            if !first {
                self.buf.push(',');
            }
            first = false;
            self.buf.push_str(c.as_ref());
        }
        self.buf.push('\n');
    }

    pub fn finish(self) -> String {
        self.buf
    }

    pub fn write_to(self, path: &Path) -> Result<()> {
        write_text(path, &self.buf)
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = File::create(path).map_err(|e| AorError::io(path, e))?;
    f.write_all(text.as_bytes())
        .map_err(|e| AorError::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| AorError::io(path, e))
}

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_by_header_name_with_optional_column() {
        let t = Table::read("id, from ,to\n a,b,c\n".as_bytes(), "mem").unwrap();
        let row = t.rows().next().unwrap();
        assert_eq!(row.str("from").unwrap(), "b");
        assert!(row.opt("road_class").is_none());
    }

    #[test]
    fn parse_error_carries_line() {
        let t = Table::read("id,len\nx,abc\n".as_bytes(), "mem").unwrap();
        let err = t.rows().next().unwrap().parse::<f64>("len").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn float_format_round_trips() {
        for v in [0.1, 1.0 / 3.0, 1e-300, 12345.678, 0.0] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
    }
}
