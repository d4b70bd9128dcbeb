//! CSV loading with optional replicate columns and standardization, plus
//! synthetic error injection for real covariates.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::path::Path;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::eiv::{Dataset, ErrorCovariance, ReplicatedDataset};
use crate::error::{EivError, Result};
use crate::rng::{stage, Seed};

fn default_true() -> bool {
    true
}

/// Which columns make up the regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSpec {
    pub response: String,
    pub covariates: Vec<String>,
    /// Covariate name → columns holding its repeated measurements. Covariates
    /// absent from the map are read from the column of the same name.
    #[serde(default)]
    pub replicate_groups: BTreeMap<String, Vec<String>>,
    #[serde(default = "default_true")]
    pub standardize: bool,
}

impl ColumnSpec {
    pub fn new(response: impl Into<String>, covariates: &[&str]) -> Self {
        ColumnSpec {
            response: response.into(),
            covariates: covariates.iter().map(|s| s.to_string()).collect(),
            replicate_groups: BTreeMap::new(),
            standardize: false,
        }
    }

    fn validate(&self) -> Result<usize> {
        if self.covariates.is_empty() {
            return Err(EivError::Schema("at least one covariate is required".into()));
        }
        if self.covariates.contains(&self.response) {
            return Err(EivError::Schema(format!(
                "response {:?} is also listed as a covariate",
                self.response
            )));
        }
        if let Some(extra) = self.replicate_groups.keys().find(|k| !self.covariates.contains(k)) {
            return Err(EivError::Schema(format!(
                "replicate group {extra:?} does not name a covariate"
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for cols in self.replicate_groups.values() {
            for c in cols {
                if !seen.insert(c) || *c == self.response {
                    return Err(EivError::Schema(format!(
                        "column {c:?} is used by more than one replicate group or by the response"
                    )));
                }
            }
        }
        let mut sizes = self.replicate_groups.values().map(Vec::len);
        let j = sizes.next().unwrap_or(1);
        if j == 0 {
            return Err(EivError::Schema("replicate groups must be nonempty".into()));
        }
        if sizes.any(|s| s != j) {
            return Err(EivError::Schema(
                "all replicate groups must have the same number of columns".into(),
            ));
        }
        Ok(j)
    }

    fn columns_for(&self, cov: &str, j: usize) -> Vec<String> {
        match self.replicate_groups.get(cov) {
            Some(cols) => cols.clone(),
            None => vec![cov.to_string(); j],
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoadedCsv {
    pub data: ReplicatedDataset,
    /// Rows skipped because a referenced field was missing or not a finite number.
    pub dropped_rows: usize,
}

pub fn load_csv(path: impl AsRef<Path>, spec: &ColumnSpec) -> Result<LoadedCsv> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| EivError::io(path, e))?;
    load_csv_reader(file, spec)
}

pub fn load_csv_reader<R: Read>(reader: R, spec: &ColumnSpec) -> Result<LoadedCsv> {
    let j = spec.validate()?;
    let mut rdr = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(reader);
    let header: HashMap<String, usize> = rdr
        .headers()?
        .iter()
        .enumerate()
        .map(|(i, h)| (h.to_string(), i))
        .collect();
    let locate = |name: &str| header.get(name).copied().ok_or_else(|| EivError::MissingColumn(name.to_string()));

    let y_col = locate(&spec.response)?;
    // layout[c][k]: field index of replicate k of covariate c
    let layout: Vec<Vec<usize>> = spec
        .covariates
        .iter()
        .map(|c| spec.columns_for(c, j).iter().map(|name| locate(name)).collect::<Result<_>>())
        .collect::<Result<_>>()?;

    let p = layout.len();
    let mut y = Vec::new();
    // values[c] holds replicate values of covariate c, row-major over (record, replicate)
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); p];
    let mut dropped = 0;
    let field = |rec: &csv::StringRecord, idx: usize| -> Option<f64> {
        rec.get(idx).and_then(|s| s.parse::<f64>().ok()).filter(|v| v.is_finite())
    };
    for rec in rdr.records() {
        let rec = rec?;
        let Some(yi) = field(&rec, y_col) else {
            dropped += 1;
            continue;
        };
        let row: Option<Vec<Vec<f64>>> = layout
            .iter()
            .map(|cols| cols.iter().map(|&k| field(&rec, k)).collect())
            .collect();
        let Some(row) = row else {
            dropped += 1;
            continue;
        };
        y.push(yi);
        for (c, reps) in row.into_iter().enumerate() {
            values[c].extend(reps);
        }
    }
    let n = y.len();
    if n == 0 {
        return Err(EivError::EmptyDataset);
    }
    if dropped > 0 {
        log::info!("dropped {dropped} rows with missing or non-numeric fields");
    }

    if spec.standardize {
        standardize(&mut y, &spec.response)?;
        for (c, name) in spec.covariates.iter().enumerate() {
            standardize(&mut values[c], name)?;
        }
    }

    let reps: Vec<Vec<Vec<f64>>> = (0..n)
        .map(|i| {
            (0..j)
                .map(|k| (0..p).map(|c| values[c][i * j + k]).collect())
                .collect()
        })
        .collect();
    Ok(LoadedCsv {
        data: ReplicatedDataset::new(reps, y)?,
        dropped_rows: dropped,
    })
}

/// Centers and scales to unit sample variance (denominator N − 1).
fn standardize(v: &mut [f64], name: &str) -> Result<()> {
    let len = v.len() as f64;
    let mean = v.iter().sum::<f64>() / len;
    v.iter_mut().for_each(|x| *x -= mean);
    // second pass removes the rounding left in the first mean
    let resid_mean = v.iter().sum::<f64>() / len;
    v.iter_mut().for_each(|x| *x -= resid_mean);
    let var = if v.len() > 1 {
        v.iter().map(|x| x * x).sum::<f64>() / (len - 1.0)
    } else {
        0.0
    };
    if !(var > 0.0) {
        return Err(EivError::DegenerateColumn(name.to_string()));
    }
    let sd = var.sqrt();
    v.iter_mut().for_each(|x| *x /= sd);
    Ok(())
}

/// Adds N(0, σu²) noise to every covariate and returns the matching known
/// error covariance σu²·I.
pub fn inject_error(data: &Dataset, sigma_u2: f64, seed: Seed) -> Result<(Dataset, ErrorCovariance)> {
    let sigma = ErrorCovariance::isotropic(data.p(), sigma_u2)?;
    if sigma_u2 == 0.0 {
        return Ok((data.clone(), sigma));
    }
    let sd = sigma_u2.sqrt();
    let mut rng = seed.derive(stage::NOISE).rng();
    let (n, p) = (data.n(), data.p());
    let noise: Vec<f64> = (0..n * p)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sd * z
        })
        .collect();
    let w = data.w() + DMatrix::from_row_slice(n, p, &noise);
    Ok((Dataset::new(w, data.y().clone())?, sigma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eiv::estimate_sigma_uu;

    fn load(text: &str, spec: &ColumnSpec) -> Result<LoadedCsv> {
        load_csv_reader(text.as_bytes(), spec)
    }

    #[test]
    fn plain_file_round_trips() {
        let spec = ColumnSpec::new("y", &["a", "b"]);
        let got = load("a,y,b\n1,2,3\n4,5,6\n7,8,9.5\n", &spec).unwrap();
        let d = got.data.means().unwrap();
        assert_eq!(got.dropped_rows, 0);
        assert_eq!(d.w(), &DMatrix::from_row_slice(3, 2, &[1.0, 3.0, 4.0, 6.0, 7.0, 9.5]));
        assert_eq!(d.y().as_slice(), &[2.0, 5.0, 8.0]);
    }

    #[test]
    fn bad_rows_are_dropped() {
        let spec = ColumnSpec::new("y", &["a"]);
        let got = load("a,y\n1,2\nx,3\n4,5\n6,7\n", &spec).unwrap();
        assert_eq!(got.data.n(), 3);
        assert_eq!(got.dropped_rows, 1);
        let got = load("a,y\n1,2\n,3\n4\n6,7\n", &spec).unwrap();
        assert_eq!(got.data.n(), 2);
        assert_eq!(got.dropped_rows, 2);
    }

    #[test]
    fn missing_column_is_named() {
        let spec = ColumnSpec::new("y", &["a", "zzz"]);
        match load("a,y\n1,2\n", &spec) {
            Err(EivError::MissingColumn(c)) => assert_eq!(c, "zzz"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn replicate_columns_feed_sigma_estimate() {
        let mut spec = ColumnSpec::new("y", &["t", "d"]);
        spec.replicate_groups.insert("t".into(), vec!["t1".into(), "t2".into()]);
        let got = load("t1,t2,d,y\n1,3,10,0\n2,2.5,20,1\n", &spec).unwrap();
        assert_eq!(got.data.common_replication(), Some(2));
        let s = estimate_sigma_uu(&got.data).unwrap();
        // deviations ±1 and ±0.25 over 2 degrees of freedom
        let want = (1.0 + 1.0 + 0.0625 + 0.0625) / 2.0;
        assert!((s.matrix()[(0, 0)] - want).abs() < 1e-12);
        assert_eq!(s.matrix()[(1, 1)], 0.0);
        assert_eq!(s.matrix()[(0, 1)], 0.0);
    }

    #[test]
    fn unequal_groups_rejected() {
        let mut spec = ColumnSpec::new("y", &["a", "b"]);
        spec.replicate_groups.insert("a".into(), vec!["a1".into(), "a2".into()]);
        spec.replicate_groups.insert("b".into(), vec!["b1".into()]);
        assert!(matches!(load("a1,a2,b1,y\n1,2,3,4\n", &spec), Err(EivError::Schema(_))));
    }

    #[test]
    fn response_as_covariate_rejected() {
        let spec = ColumnSpec::new("y", &["y"]);
        assert!(matches!(load("y\n1\n", &spec), Err(EivError::Schema(_))));
    }

    #[test]
    fn standardization() {
        let mut spec = ColumnSpec::new("y", &["a", "b"]);
        spec.standardize = true;
        let text = "a,b,y\n1,10,3\n2,40,1\n4,20,8\n8,30,2\n";
        let d = load(text, &spec).unwrap().data.means().unwrap();
        for c in 0..2 {
            let col = d.w().column(c);
            let m = col.mean();
            let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 3.0;
            assert!(m.abs() <= 1e-12 && (v - 1.0).abs() <= 1e-12);
        }
        let bad = "a,b,y\n1,5,3\n2,5,1\n";
        assert!(matches!(load(bad, &spec), Err(EivError::DegenerateColumn(c)) if c == "b"));
    }

    #[test]
    fn injection() {
        let data = Dataset::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 7.0]], vec![1.0, 2.0, 3.0]).unwrap();
        let (same, s) = inject_error(&data, 0.0, Seed::new(1)).unwrap();
        assert_eq!(same, data);
        assert!(s.is_zero());
        let (a, s) = inject_error(&data, 0.5, Seed::new(2)).unwrap();
        let (b, _) = inject_error(&data, 0.5, Seed::new(2)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, data);
        assert_eq!(a.y(), data.y());
        assert_eq!(s.matrix()[(1, 1)], 0.5);
    }
}
