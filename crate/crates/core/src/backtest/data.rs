//! Price tables: CSV ingestion, validation and output.

use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("cannot read {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("malformed CSV at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("column `{0}` not found in header")]
    MissingColumn(String),
    #[error("row {row}, column `{column}`: missing value")]
    MissingValue { row: usize, column: String },
    #[error("row {row}, column `{column}`: price {value} is not positive")]
    NonPositive { row: usize, column: String, value: f64 },
    #[error("row {row}: date {date} does not follow the previous date")]
    NonMonotoneDates { row: usize, date: NaiveDate },
    #[error("no data rows")]
    Empty,
    #[error("inconsistent table: {0}")]
    Shape(String),
}

/// What to do with empty cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MissingPolicy {
    #[default]
    Reject,
    /// Repeat the previous close and record the cell in [`PriceTable::filled`].
    ForwardFill,
}

/// Column mapping of an input file.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSchema {
    pub date_column: String,
    pub index_column: String,
    /// Asset columns in order; `None` takes every other column.
    pub asset_columns: Option<Vec<String>>,
    pub missing: MissingPolicy,
}

impl Default for DataSchema {
    fn default() -> Self {
        Self {
            date_column: "date".into(),
            index_column: "index".into(),
            asset_columns: None,
            missing: MissingPolicy::Reject,
        }
    }
}

/// Daily closes of `n` assets and one reference index.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceTable {
    dates: Vec<NaiveDate>,
    assets: Vec<String>,
    closes: DMatrix<f64>,
    index_name: String,
    index: Vec<f64>,
    filled: Vec<(usize, String)>,
}

impl PriceTable {
    pub fn new(
        dates: Vec<NaiveDate>,
        assets: Vec<String>,
        closes: DMatrix<f64>,
        index_name: impl Into<String>,
        index: Vec<f64>,
    ) -> Result<Self, DataError> {
        let t = dates.len();
        if t == 0 {
            return Err(DataError::Empty);
        }
        if assets.is_empty() {
            return Err(DataError::Shape("no asset columns".into()));
        }
        if closes.nrows() != t || closes.ncols() != assets.len() || index.len() != t {
            return Err(DataError::Shape(format!(
                "{t} dates, {}x{} closes, {} index values",
                closes.nrows(),
                closes.ncols(),
                index.len()
            )));
        }
        let index_name = index_name.into();
        for row in 0..t {
            if row > 0 && dates[row] <= dates[row - 1] {
                return Err(DataError::NonMonotoneDates { row: row + 1, date: dates[row] });
            }
            for (c, name) in assets.iter().enumerate() {
                check_price(row, name, closes[(row, c)])?;
            }
            check_price(row, &index_name, index[row])?;
        }
        Ok(Self {
            dates,
            assets,
            closes,
            index_name,
            index,
            filled: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn assets(&self) -> &[String] {
        &self.assets
    }

    /// `T x n` matrix of closes.
    pub fn closes(&self) -> &DMatrix<f64> {
        &self.closes
    }

    pub fn index_name(&self) -> &str {
        &self.index_name
    }

    pub fn index(&self) -> &[f64] {
        &self.index
    }

    /// Cells forward-filled while loading, as `(row, column)` with 1-based data rows.
    pub fn filled(&self) -> &[(usize, String)] {
        &self.filled
    }

    /// Simple returns of every asset from day `d - 1` to day `d`.
    pub fn asset_returns(&self, d: usize) -> nalgebra::DVector<f64> {
        nalgebra::DVector::from_fn(self.assets.len(), |i, _| self.closes[(d, i)] / self.closes[(d - 1, i)] - 1.0)
    }

    /// Writes the table with 12 significant digits.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), DataError> {
        let io = |e: csv::Error| DataError::Io { path: "<output>".into(), reason: e.to_string() };
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["date".to_string()];
        header.extend(self.assets.iter().cloned());
        header.push(self.index_name.clone());
        w.write_record(&header).map_err(io)?;
        for d in 0..self.len() {
            let mut rec = vec![self.dates[d].to_string()];
            rec.extend((0..self.assets.len()).map(|i| format_number(self.closes[(d, i)])));
            rec.push(format_number(self.index[d]));
            w.write_record(&rec).map_err(io)?;
        }
        w.flush().map_err(|e| DataError::Io { path: "<output>".into(), reason: e.to_string() })
    }
}

fn check_price(row: usize, column: &str, value: f64) -> Result<(), DataError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(DataError::NonPositive {
            row: row + 1,
            column: column.to_string(),
            value,
        })
    }
}

/// Twelve significant digits in scientific notation.
pub fn format_number(x: f64) -> String {
    format!("{x:.11e}")
}

pub fn load_prices(path: &Path, schema: &DataSchema) -> Result<PriceTable, DataError> {
    let file = std::fs::File::open(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    read_prices(file, schema)
}

pub fn read_prices<R: Read>(input: R, schema: &DataSchema) -> Result<PriceTable, DataError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let header = reader
        .headers()
        .map_err(|e| DataError::Malformed { line: 1, reason: e.to_string() })?
        .clone();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let date_col = find(&schema.date_column)?;
    let index_col = find(&schema.index_column)?;
    let asset_names: Vec<String> = match &schema.asset_columns {
        Some(cols) => cols.clone(),
        None => header
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != date_col && *i != index_col)
            .map(|(_, h)| h.to_string())
            .collect(),
    };
    let asset_cols = asset_names.iter().map(|n| find(n)).collect::<Result<Vec<_>, _>>()?;

    let mut dates = Vec::new();
    let mut values: Vec<Vec<f64>> = Vec::new();
    let mut filled = Vec::new();
    let price_cols: Vec<(usize, &str)> = asset_cols
        .iter()
        .zip(&asset_names)
        .map(|(c, n)| (*c, n.as_str()))
        .chain(std::iter::once((index_col, schema.index_column.as_str())))
        .collect();

    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let line = r + 2;
        let record = record.map_err(|e| DataError::Malformed { line, reason: e.to_string() })?;
        let date_text = record.get(date_col).unwrap_or("");
        let date = NaiveDate::parse_from_str(date_text, "%Y-%m-%d").map_err(|e| DataError::Malformed {
            line,
            reason: format!("date `{date_text}`: {e}"),
        })?;
        let mut row_values = Vec::with_capacity(price_cols.len());
        for (c, (col, name)) in price_cols.iter().enumerate() {
            let cell = record.get(*col).unwrap_or("");
            if cell.is_empty() {
                match (schema.missing, values.last()) {
                    (MissingPolicy::ForwardFill, Some(prev)) => {
                        row_values.push(prev[c]);
                        filled.push((row, name.to_string()));
                        continue;
                    }
                    _ => {
                        return Err(DataError::MissingValue {
                            row,
                            column: name.to_string(),
                        })
                    }
                }
            }
            let value: f64 = cell.parse().map_err(|_| DataError::Malformed {
                line,
                reason: format!("column `{name}`: `{cell}` is not a number"),
            })?;
            check_price(r, name, value)?;
            row_values.push(value);
        }
        dates.push(date);
        values.push(row_values);
    }
    if values.is_empty() {
        return Err(DataError::Empty);
    }
    let n = asset_cols.len();
    let closes = DMatrix::from_fn(values.len(), n, |d, i| values[d][i]);
    let index = values.iter().map(|v| v[n]).collect();
    let mut table = PriceTable::new(dates, asset_names, closes, schema.index_column.clone(), index)?;
    table.filled = filled;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = "date,AAA,BBB,index\n2020-01-02,10,20,100\n2020-01-03,11,19,101\n2020-01-06,12,18,99\n";

    #[test]
    fn reads_well_formed_file() {
        let t = read_prices(GOOD.as_bytes(), &DataSchema::default()).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.assets(), &["AAA".to_string(), "BBB".to_string()]);
        assert_eq!(t.closes()[(2, 1)], 18.0);
        assert_eq!(t.index(), &[100.0, 101.0, 99.0]);
        assert!((t.asset_returns(1)[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn zero_price_names_row_and_column() {
        let text = "date,AAA,index\n2020-01-02,10,100\n2020-01-03,0,101\n";
        let err = read_prices(text.as_bytes(), &DataSchema::default()).unwrap_err();
        assert_eq!(
            err,
            DataError::NonPositive {
                row: 2,
                column: "AAA".into(),
                value: 0.0
            }
        );
        assert!(err.to_string().contains("row 2") && err.to_string().contains("AAA"));
    }

    #[test]
    fn gaps_are_rejected_or_filled() {
        let text = "date,AAA,index\n2020-01-02,10,100\n2020-01-03,,101\n2020-01-06,12,\n";
        let strict = read_prices(text.as_bytes(), &DataSchema::default());
        assert!(matches!(strict, Err(DataError::MissingValue { row: 2, .. })));

        let schema = DataSchema { missing: MissingPolicy::ForwardFill, ..DataSchema::default() };
        let t = read_prices(text.as_bytes(), &schema).unwrap();
        assert_eq!(t.closes()[(1, 0)], 10.0);
        assert_eq!(t.index()[2], 101.0);
        assert_eq!(t.filled(), &[(2, "AAA".to_string()), (3, "index".to_string())]);
    }

    #[test]
    fn leading_gap_cannot_be_filled() {
        let text = "date,AAA,index\n2020-01-02,,100\n";
        let schema = DataSchema { missing: MissingPolicy::ForwardFill, ..DataSchema::default() };
        assert!(read_prices(text.as_bytes(), &schema).is_err());
    }

    #[test]
    fn dates_must_increase() {
        let text = "date,AAA,index\n2020-01-03,10,100\n2020-01-03,11,101\n";
        assert!(matches!(
            read_prices(text.as_bytes(), &DataSchema::default()),
            Err(DataError::NonMonotoneDates { row: 2, .. })
        ));
    }

    #[test]
    fn missing_index_column_and_empty_file() {
        let text = "date,AAA,idx\n2020-01-02,10,100\n";
        assert_eq!(
            read_prices(text.as_bytes(), &DataSchema::default()),
            Err(DataError::MissingColumn("index".into()))
        );
        assert_eq!(read_prices("date,AAA,index\n".as_bytes(), &DataSchema::default()), Err(DataError::Empty));
        assert!(read_prices("".as_bytes(), &DataSchema::default()).is_err());
    }

    #[test]
    fn explicit_asset_columns() {
        let schema = DataSchema { asset_columns: Some(vec!["BBB".into()]), ..DataSchema::default() };
        let t = read_prices(GOOD.as_bytes(), &schema).unwrap();
        assert_eq!(t.assets(), &["BBB".to_string()]);
        assert_eq!(t.closes().ncols(), 1);
    }

    #[test]
    fn write_then_read_round_trips() {
        let t = read_prices(GOOD.as_bytes(), &DataSchema::default()).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let back = read_prices(buf.as_slice(), &DataSchema::default()).unwrap();
        assert_eq!(back, t);
    }
}
