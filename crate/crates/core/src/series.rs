//! Uniformly sampled scalar time series and their CSV form.
//!
//! The on-disk format is `time_s,value` with LF line endings. Times must form a
//! uniform grid; the parser reports the first row that breaks uniformity.

use std::fmt::Write as _;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};

/// Relative tolerance (in units of the step) when checking grid uniformity.
const GRID_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    start: f64,
    step: f64,
    values: Vec<f64>,
}

impl TimeSeries {
    pub fn new(start: f64, step: f64, values: Vec<f64>) -> Result<Self> {
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::invalid(format!("time step must be positive, got {step}")));
        }
        if !start.is_finite() {
            return Err(Error::invalid("start time must be finite"));
        }
        if values.is_empty() {
            return Err(Error::invalid("time series must have at least one value"));
        }
        Ok(Self { start, step, values })
    }

    /// A series with the same grid as `self` and the given values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::invalid(format!(
                "expected {} values, got {}",
                self.values.len(),
                values.len()
            )));
        }
        Ok(Self {
            start: self.start,
            step: self.step,
            values,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            start: self.start,
            step: self.step,
            values: vec![0.0; self.values.len()],
        }
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn time(&self, i: usize) -> f64 {
        self.start + self.step * i as f64
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.time(i)).collect()
    }

    pub fn end(&self) -> f64 {
        self.time(self.len() - 1)
    }

    pub fn same_grid(&self, other: &TimeSeries) -> bool {
        self.len() == other.len()
            && (self.start - other.start).abs() <= GRID_TOLERANCE * self.step
            && (self.step - other.step).abs() <= GRID_TOLERANCE * self.step
    }

    pub fn check_same_grid(&self, other: &TimeSeries, what: &str) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "{what}: grid mismatch (start {}, step {}, {} points vs start {}, step {}, {} points)",
                other.start,
                other.step,
                other.len(),
                self.start,
                self.step,
                self.len()
            )))
        }
    }

    /// Value at an arbitrary time by linear interpolation between samples.
    ///
    /// Zero before the first sample; the last value is held after the end.
    pub fn interpolate(&self, t: f64) -> f64 {
        let x = (t - self.start) / self.step;
        if x < 0.0 {
            // ramp up from zero over the step preceding the first sample
            return if x > -1.0 { self.values[0] * (1.0 + x) } else { 0.0 };
        }
        let i = x.floor() as usize;
        if i + 1 >= self.values.len() {
            return *self.values.last().expect("non-empty");
        }
        let w = x - i as f64;
        self.values[i] * (1.0 - w) + self.values[i + 1] * w
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::with_capacity(self.len() * 24);
        out.push_str("time_s,value\n");
        for (i, v) in self.values.iter().enumerate() {
            writeln!(out, "{},{}", self.time(i), v).expect("write to string");
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(file).map_err(|msg| Error::parse(path, msg))
    }

    pub fn from_csv_str(text: &str) -> Result<Self, String> {
        Self::from_csv_reader(text.as_bytes())
    }

    fn from_csv_reader(reader: impl Read) -> Result<Self, String> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers().map_err(|e| e.to_string())?.clone();
        if headers.len() != 2 || headers[0].trim() != "time_s" || headers[1].trim() != "value" {
            return Err(format!(
                "expected header `time_s,value`, found `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            ));
        }
        let mut times = Vec::new();
        let mut values = Vec::new();
        for (row, record) in rdr.records().enumerate() {
            let record = record.map_err(|e| format!("row {}: {e}", row + 1))?;
            let parse = |field: &str| -> Result<f64, String> {
                field
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| format!("row {}: cannot parse `{field}`: {e}", row + 1))
            };
            let t = parse(&record[0])?;
            let v = parse(&record[1])?;
            if !t.is_finite() || !v.is_finite() {
                return Err(format!("row {}: non-finite value", row + 1));
            }
            times.push(t);
            values.push(v);
        }
        if times.is_empty() {
            return Err("no data rows".into());
        }
        let step = if times.len() > 1 { times[1] - times[0] } else { 1.0 };
        if step <= 0.0 {
            return Err("row 2: time column is not increasing".into());
        }
        for (i, &t) in times.iter().enumerate() {
            let expected = times[0] + step * i as f64;
            if (t - expected).abs() > GRID_TOLERANCE * step {
                return Err(format!(
                    "row {}: non-uniform time grid (expected {expected}, found {t})",
                    i + 1
                ));
            }
        }
        Self::new(times[0], step, values).map_err(|e| e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_exact() {
        let ts = TimeSeries::new(0.0, 120.0, vec![0.0, 0.1, 1.0 / 3.0, 2.5e-7]).unwrap();
        let back = TimeSeries::from_csv_str(&ts.to_csv_string()).unwrap();
        assert_eq!(ts, back);
    }

    #[test]
    fn rejects_non_uniform_grid_with_row_index() {
        let text = "time_s,value\n0,1\n120,2\n250,3\n";
        let err = TimeSeries::from_csv_str(text).unwrap_err();
        assert!(err.contains("row 3"), "{err}");
    }

    #[test]
    fn rejects_wrong_header() {
        let err = TimeSeries::from_csv_str("t,v\n0,1\n").unwrap_err();
        assert!(err.contains("time_s,value"));
    }

    #[test]
    fn interpolation() {
        let ts = TimeSeries::new(0.0, 10.0, vec![1.0, 3.0, 5.0]).unwrap();
        assert_eq!(ts.interpolate(0.0), 1.0);
        assert_eq!(ts.interpolate(5.0), 2.0);
        assert_eq!(ts.interpolate(20.0), 5.0);
        assert_eq!(ts.interpolate(30.0), 5.0);
        assert_eq!(ts.interpolate(-20.0), 0.0);
    }
}
