//! Percentile threshold quantization of numeric features into binary
//! indicator columns.
//!
//! Each feature is recoded as a staircase of indicators `value ≥ cutoff_j`
//! where the cutoffs are the deduplicated empirical percentiles of the
//! training column. Cutoffs equal to the column minimum would yield an
//! all-ones column and are dropped, so constant features vanish entirely.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Deciles.
pub const DEFAULT_PERCENTILES: [f64; 9] = [10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0];

/// Empirical percentile of an ascending slice: the value at 1-based rank
/// `⌊P·n/100⌋ + 1`, i.e. the smallest observation whose cumulative count
/// strictly exceeds `P` percent of the sample.
pub fn empirical_percentile<T: Scalar>(sorted: &[T], percentile: f64) -> T {
    let n = sorted.len();
    let rank = ((percentile / 100.0) * n as f64).floor() as usize + 1;
    sorted[rank.min(n) - 1]
}

/// Deduplicated, strictly increasing cutoffs for one column.
pub fn fit_cutoffs<T: Scalar>(column: &[T], percentiles: &[f64]) -> Result<Vec<T>> {
    if column.is_empty() {
        return Err(Error::invalid("cannot fit cutoffs on an empty column"));
    }
    if column.iter().any(|v| v.is_nan()) {
        return Err(Error::invalid("column contains NaN; impute before quantizing"));
    }
    if let Some(p) = percentiles.iter().find(|&&p| !(p > 0.0 && p < 100.0)) {
        return Err(Error::invalid(format!("percentile {p} outside (0, 100)")));
    }
    let mut sorted = column.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("no NaN"));
    let min = sorted[0];
    let mut cutoffs: Vec<T> = percentiles
        .iter()
        .map(|&p| empirical_percentile(&sorted, p))
        .filter(|&c| c > min)
        .collect();
    cutoffs.sort_by(|a, b| a.partial_cmp(b).expect("no NaN"));
    cutoffs.dedup();
    Ok(cutoffs)
}

/// Bit `j` is set iff `value ≥ cutoffs[j]`.
pub fn encode<T: Scalar>(value: T, cutoffs: &[T]) -> Vec<u8> {
    cutoffs.iter().map(|&c| u8::from(value >= c)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureCutoffs {
    pub name: String,
    pub cutoffs: Vec<f64>,
    pub columns: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QuantizationMap {
    pub features: Vec<FeatureCutoffs>,
    /// Features that produced no cutoffs (constant on the training data).
    #[serde(default)]
    pub dropped: Vec<String>,
}

impl QuantizationMap {
    pub fn n_columns(&self) -> usize {
        self.features.iter().map(|f| f.cutoffs.len()).sum()
    }

    pub fn column_names(&self) -> Vec<String> {
        self.features.iter().flat_map(|f| f.columns.iter().cloned()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

fn column_name(feature: &str, cutoff: f64) -> String {
    format!("{feature}>={cutoff}")
}

/// Named numeric columns of equal length.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NumericTable {
    pub names: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

impl NumericTable {
    pub fn n_rows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let names: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let mut columns = vec![Vec::new(); names.len()];
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            for (j, field) in rec.iter().enumerate() {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::invalid(format!("row {row}, column `{}`: not a number: `{field}`", names[j]))
                })?;
                columns[j].push(v);
            }
        }
        Ok(Self { names, columns })
    }
}

/// Binary design matrix produced by [`transform_table`].
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMatrix {
    pub column_names: Vec<String>,
    pub rows: Vec<Vec<u8>>,
}

impl BinaryMatrix {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.column_names)?;
        for r in &self.rows {
            w.write_record(r.iter().map(|b| if *b == 1 { "1" } else { "0" }))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Constant features and collapsed duplicate cutoffs found while fitting.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FitReport {
    pub dropped_constant: Vec<String>,
    /// `(feature, number of percentiles that collapsed onto another cutoff or the minimum)`
    pub collapsed: Vec<(String, usize)>,
}

/// Fit a map column by column.
pub fn fit_map(table: &NumericTable, percentiles: &[f64]) -> Result<(QuantizationMap, FitReport)> {
    let mut map = QuantizationMap::default();
    let mut report = FitReport::default();
    for (name, col) in table.names.iter().zip(&table.columns) {
        let cutoffs = fit_cutoffs(col, percentiles)
            .map_err(|e| Error::invalid(format!("feature `{name}`: {e}")))?;
        if cutoffs.is_empty() {
            log::info!("feature `{name}` is constant; dropped");
            map.dropped.push(name.clone());
            report.dropped_constant.push(name.clone());
            continue;
        }
        let lost = percentiles.len() - cutoffs.len();
        if lost > 0 {
            report.collapsed.push((name.clone(), lost));
        }
        map.features.push(FeatureCutoffs {
            name: name.clone(),
            columns: cutoffs.iter().map(|&c| column_name(name, c)).collect(),
            cutoffs,
        });
    }
    Ok((map, report))
}

/// Apply a fitted map. Every table column must be known to the map, and
/// every mapped feature must be present.
pub fn transform_table(table: &NumericTable, map: &QuantizationMap) -> Result<BinaryMatrix> {
    let known: HashSet<&str> = map
        .features
        .iter()
        .map(|f| f.name.as_str())
        .chain(map.dropped.iter().map(String::as_str))
        .collect();
    if let Some(unknown) = table.names.iter().find(|n| !known.contains(n.as_str())) {
        return Err(Error::UnknownFeature(unknown.clone()));
    }
    let mut sources = Vec::with_capacity(map.features.len());
    for f in &map.features {
        let j = table
            .names
            .iter()
            .position(|n| *n == f.name)
            .ok_or_else(|| Error::invalid(format!("table lacks mapped feature `{}`", f.name)))?;
        sources.push(j);
    }
    let n = table.n_rows();
    let rows = (0..n)
        .map(|i| {
            let mut row = Vec::with_capacity(map.n_columns());
            for (f, &j) in map.features.iter().zip(&sources) {
                row.extend(encode(table.columns[j][i], &f.cutoffs));
            }
            row
        })
        .collect();
    Ok(BinaryMatrix {
        column_names: map.column_names(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent percentile oracle: scan every candidate value and keep
    /// the smallest whose count of observations `≤ v` exceeds `P·n/100`.
    fn brute_percentile(column: &[f64], p: f64) -> f64 {
        let n = column.len() as f64;
        let mut candidates = column.to_vec();
        candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for v in candidates {
            let at_or_below = column.iter().filter(|&&x| x <= v).count() as f64;
            if at_or_below > p / 100.0 * n {
                return v;
            }
        }
        unreachable!()
    }

    fn brute_cutoffs(column: &[f64], grid: &[f64]) -> Vec<f64> {
        let min = column.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut out: Vec<f64> = Vec::new();
        for &p in grid {
            let v = brute_percentile(column, p);
            if v > min && !out.contains(&v) {
                out.push(v);
            }
        }
        out.sort_by(|a, b| a.partial_cmp(b).unwrap());
        out
    }

    #[test]
    fn constant_column_has_no_cutoffs() {
        assert!(fit_cutoffs(&[0.0; 12], &DEFAULT_PERCENTILES).unwrap().is_empty());
    }

    #[test]
    fn heavy_tied_column_matches_oracle() {
        let col = [0.0, 0.0, 0.0, 1.0, 2.0, 5.0, 100.0];
        let grid = [25.0, 50.0, 75.0];
        let fitted = fit_cutoffs(&col, &grid).unwrap();
        assert_eq!(fitted, brute_cutoffs(&col, &grid));
        assert_eq!(fitted, vec![1.0, 5.0]);
    }

    #[test]
    fn two_point_column_single_cutoff() {
        assert_eq!(fit_cutoffs(&[1.0, 2.0], &[50.0]).unwrap(), vec![2.0]);
    }

    #[test]
    fn nan_rejected() {
        assert!(fit_cutoffs(&[1.0, f64::NAN], &[50.0]).is_err());
        assert!(fit_cutoffs::<f64>(&[], &[50.0]).is_err());
        assert!(fit_cutoffs(&[1.0, 2.0], &[100.0]).is_err());
    }

    #[test]
    fn encode_examples() {
        assert_eq!(encode(2.0, &[1.0, 5.0]), vec![1, 0]);
        assert_eq!(encode(0.0, &[1.0, 5.0]), vec![0, 0]);
        assert_eq!(encode(9.0, &[1.0, 5.0]), vec![1, 1]);
        assert_eq!(encode(2.0_f32, &[1.0, 5.0]), vec![1, 0]);
    }

    fn table(cols: &[(&str, Vec<f64>)]) -> NumericTable {
        NumericTable {
            names: cols.iter().map(|(n, _)| n.to_string()).collect(),
            columns: cols.iter().map(|(_, c)| c.clone()).collect(),
        }
    }

    #[test]
    fn transform_round_trip_on_training_table() {
        let t = table(&[
            ("age", (0..50).map(|i| i as f64).collect()),
            ("flat", vec![3.0; 50]),
            ("visits", (0..50).map(|i| (i % 7) as f64).collect()),
        ]);
        let (map, report) = fit_map(&t, &DEFAULT_PERCENTILES).unwrap();
        assert_eq!(report.dropped_constant, vec!["flat".to_string()]);
        let m = transform_table(&t, &map).unwrap();
        assert_eq!(m.rows.len(), 50);
        assert_eq!(m.column_names.len(), map.n_columns());
        assert!(m.rows.iter().flatten().all(|&b| b <= 1));
        for j in 0..map.n_columns() {
            let ones = m.rows.iter().filter(|r| r[j] == 1).count();
            assert!(ones > 0 && ones < 50, "column {j} constant");
        }
    }

    #[test]
    fn monotone_pair_of_columns() {
        let x: Vec<f64> = (0..40).map(|i| (i * 7 % 13) as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| v + 2.0).collect();
        let cut = fit_cutoffs(&x, &DEFAULT_PERCENTILES).unwrap();
        for (a, b) in x.iter().zip(&y) {
            let (ea, eb) = (encode(*a, &cut), encode(*b, &cut));
            assert!(ea.iter().zip(&eb).all(|(p, q)| p <= q));
        }
    }

    #[test]
    fn unseen_feature_rejected() {
        let t = table(&[("a", vec![1.0, 2.0, 3.0])]);
        let (map, _) = fit_map(&t, &[50.0]).unwrap();
        let other = table(&[("a", vec![1.0]), ("b", vec![1.0])]);
        assert!(matches!(transform_table(&other, &map), Err(Error::UnknownFeature(n)) if n == "b"));
        let missing = table(&[]);
        assert!(transform_table(&missing, &map).is_err());
    }

    proptest! {
        #[test]
        fn fitted_cutoffs_match_oracle(col in prop::collection::vec(0u8..6, 1..40)) {
            let col: Vec<f64> = col.into_iter().map(f64::from).collect();
            let fitted = fit_cutoffs(&col, &DEFAULT_PERCENTILES).unwrap();
            prop_assert_eq!(fitted.clone(), brute_cutoffs(&col, &DEFAULT_PERCENTILES));
            prop_assert!(fitted.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
