//! CSV ingestion of return/feature panels and coefficient export.
//!
//! Wide format: first column an ISO-8601 date, one column per series.
//! Feature columns are named `ASSET` (one feature) or `ASSET:name`.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};

use crate::error::{IpoError, Result};
use crate::model::{Coefficients, DesignMask};

#[derive(Debug, Clone, PartialEq)]
pub struct WideTable {
    pub dates: Vec<NaiveDate>,
    pub columns: Vec<String>,
    /// `dates.len() × columns.len()`.
    pub values: DMatrix<f64>,
}

pub fn read_wide_csv(path: &Path) -> Result<WideTable> {
    let name = path.display();
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let header = rdr.headers()?.clone();
    if header.len() < 2 {
        return Err(IpoError::Ingestion(format!("{name}: need a date column and at least one series")));
    }
    let columns: Vec<String> = header.iter().skip(1).map(str::to_owned).collect();
    let mut seen = BTreeSet::new();
    for c in &columns {
        if !seen.insert(c) {
            return Err(IpoError::Ingestion(format!("{name}: duplicate column {c:?}")));
        }
    }
    let mut dates = Vec::new();
    let mut flat = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = r + 2;
        let date = NaiveDate::parse_from_str(&rec[0], "%Y-%m-%d")
            .map_err(|e| IpoError::Ingestion(format!("{name}:{line}: bad date {:?}: {e}", &rec[0])))?;
        if let Some(prev) = dates.last() {
            if date <= *prev {
                return Err(IpoError::Ingestion(format!("{name}:{line}: dates must be strictly increasing ({date} after {prev})")));
            }
        }
        for (c, cell) in rec.iter().skip(1).enumerate() {
            let v: f64 = cell
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| IpoError::Ingestion(format!("{name}:{line}: column {:?}: not a finite number: {cell:?}", columns[c])))?;
            flat.push(v);
        }
        dates.push(date);
    }
    if dates.is_empty() {
        return Err(IpoError::Ingestion(format!("{name}: no data rows")));
    }
    let values = DMatrix::from_row_slice(dates.len(), columns.len(), &flat);
    Ok(WideTable { dates, columns, values })
}

pub fn write_wide_csv(table: &WideTable, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["date".to_owned()];
    header.extend(table.columns.iter().cloned());
    w.write_record(&header)?;
    for (r, d) in table.dates.iter().enumerate() {
        let mut rec = vec![d.format("%Y-%m-%d").to_string()];
        rec.extend(table.values.row(r).iter().map(|v| format!("{v:e}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Aligned returns and features with the mask implied by feature names.
#[derive(Debug, Clone)]
pub struct MarketData {
    pub dates: Vec<NaiveDate>,
    pub assets: Vec<String>,
    pub feature_names: Vec<String>,
    /// Return recorded on each date (close to close).
    pub returns: Vec<DVector<f64>>,
    /// Features known at each date's close.
    pub features: Vec<DVector<f64>>,
    pub mask: DesignMask,
}

impl MarketData {
    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    /// Rows with date ≤ `last`.
    pub fn truncate_after(&self, last: NaiveDate) -> MarketData {
        let n = self.dates.partition_point(|d| *d <= last);
        MarketData {
            dates: self.dates[..n].to_vec(),
            returns: self.returns[..n].to_vec(),
            features: self.features[..n].to_vec(),
            ..self.clone()
        }
    }

    pub fn from_tables(returns: &WideTable, features: &WideTable) -> Result<MarketData> {
        check_same_dates(returns, features)?;
        let assets = returns.columns.clone();
        let index: HashMap<&str, usize> = assets.iter().enumerate().map(|(i, a)| (a.as_str(), i)).collect();
        let mut sets = vec![Vec::new(); assets.len()];
        for (k, col) in features.columns.iter().enumerate() {
            let asset = col.split_once(':').map(|(a, _)| a).unwrap_or(col);
            let j = *index
                .get(asset)
                .ok_or_else(|| IpoError::Ingestion(format!("feature column {col:?} names unknown asset {asset:?}")))?;
            sets[j].push(k);
        }
        if let Some(j) = sets.iter().position(Vec::is_empty) {
            return Err(IpoError::Ingestion(format!("asset {:?} has no feature columns", assets[j])));
        }
        let mask = DesignMask::from_index_sets(sets, features.columns.len())?;
        let rows = |t: &WideTable| (0..t.dates.len()).map(|r| t.values.row(r).transpose()).collect::<Vec<_>>();
        Ok(MarketData {
            dates: returns.dates.clone(),
            assets,
            feature_names: features.columns.clone(),
            returns: rows(returns),
            features: rows(features),
            mask,
        })
    }

    pub fn load(returns: &Path, features: &Path) -> Result<MarketData> {
        Self::from_tables(&read_wide_csv(returns)?, &read_wide_csv(features)?)
    }

    /// Reads `returns.csv` and `features.csv` from `dir`.
    pub fn load_dir(dir: &Path) -> Result<MarketData> {
        if !dir.is_dir() {
            return Err(IpoError::Ingestion(format!("{}: not a directory", dir.display())));
        }
        Self::load(&dir.join("returns.csv"), &dir.join("features.csv"))
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let table = |cols: &[String], rows: &[DVector<f64>]| WideTable {
            dates: self.dates.clone(),
            columns: cols.to_vec(),
            values: DMatrix::from_fn(rows.len(), cols.len(), |r, c| rows[r][c]),
        };
        write_wide_csv(&table(&self.assets, &self.returns), &dir.join("returns.csv"))?;
        write_wide_csv(&table(&self.feature_names, &self.features), &dir.join("features.csv"))
    }
}

fn check_same_dates(a: &WideTable, b: &WideTable) -> Result<()> {
    if a.dates == b.dates {
        return Ok(());
    }
    let sa: BTreeSet<_> = a.dates.iter().collect();
    let sb: BTreeSet<_> = b.dates.iter().collect();
    let fmt = |v: Vec<&&NaiveDate>| {
        let shown: Vec<String> = v.iter().take(10).map(|d| d.to_string()).collect();
        let more = if v.len() > 10 { format!(" (+{} more)", v.len() - 10) } else { String::new() };
        format!("[{}]{more}", shown.join(", "))
    };
    Err(IpoError::Ingestion(format!(
        "returns and features dates differ; missing from features: {}; missing from returns: {}",
        fmt(sa.difference(&sb).collect()),
        fmt(sb.difference(&sa).collect())
    )))
}

/// Per-date covariance blocks: columns `date,asset,<asset…>`, `d_z` rows per
/// date in asset order.
pub fn read_covariance_blocks(path: &Path, assets: &[String]) -> Result<Vec<(NaiveDate, DMatrix<f64>)>> {
    let name = path.display();
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let header = rdr.headers()?.clone();
    let cols: Vec<&str> = header.iter().skip(2).collect();
    if cols != assets.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(IpoError::Ingestion(format!("{name}: covariance columns {cols:?} do not match assets {assets:?}")));
    }
    let d = assets.len();
    let mut out: Vec<(NaiveDate, DMatrix<f64>)> = Vec::new();
    let mut row_in_block = 0;
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = r + 2;
        let date = NaiveDate::parse_from_str(&rec[0], "%Y-%m-%d")
            .map_err(|e| IpoError::Ingestion(format!("{name}:{line}: bad date {:?}: {e}", &rec[0])))?;
        if row_in_block == 0 {
            out.push((date, DMatrix::zeros(d, d)));
        } else if out.last().map(|b| b.0) != Some(date) {
            return Err(IpoError::Ingestion(format!("{name}:{line}: block for {} ended after {row_in_block} rows", out.last().unwrap().0)));
        }
        if rec[1] != assets[row_in_block] {
            return Err(IpoError::Ingestion(format!("{name}:{line}: expected row {:?}, found {:?}", assets[row_in_block], &rec[1])));
        }
        let block = &mut out.last_mut().expect("pushed above").1;
        for (c, cell) in rec.iter().skip(2).enumerate() {
            block[(row_in_block, c)] = cell
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| IpoError::Ingestion(format!("{name}:{line}: not a finite number: {cell:?}")))?;
        }
        row_in_block = (row_in_block + 1) % d;
    }
    if row_in_block != 0 {
        return Err(IpoError::Ingestion(format!("{name}: last block is incomplete")));
    }
    Ok(out)
}

pub fn write_covariance_blocks(path: &Path, assets: &[String], blocks: &[(NaiveDate, DMatrix<f64>)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["date".to_owned(), "asset".to_owned()];
    header.extend(assets.iter().cloned());
    w.write_record(&header)?;
    for (date, m) in blocks {
        for (r, a) in assets.iter().enumerate() {
            let mut rec = vec![date.format("%Y-%m-%d").to_string(), a.clone()];
            rec.extend(m.row(r).iter().map(|v| format!("{v:e}")));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `feature,theta[,std_err]`.
pub fn write_coefficients_csv(path: &Path, coef: &Coefficients, feature_names: &[String]) -> Result<()> {
    if feature_names.len() != coef.theta.len() {
        return Err(IpoError::dim(format!("{} names for {} coefficients", feature_names.len(), coef.theta.len())));
    }
    let mut w = csv::Writer::from_path(path)?;
    match &coef.std_err {
        Some(_) => w.write_record(["feature", "theta", "std_err"])?,
        None => w.write_record(["feature", "theta"])?,
    }
    for (k, name) in feature_names.iter().enumerate() {
        let mut rec = vec![name.clone(), format!("{:e}", coef.theta[k])];
        if let Some(se) = &coef.std_err {
            rec.push(format!("{:e}", se[k]));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EstimatorTag;
    use std::io::Write;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn loads_univariate_and_multifeature_panels() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "returns.csv", "date,ES,TY\n2020-01-02,0.01,-0.002\n2020-01-03,0.003,0.001\n");
        write(dir.path(), "features.csv", "date,ES:carry,TY,ES:mom\n2020-01-02,1,2,3\n2020-01-03,4,5,6\n");
        let d = MarketData::load_dir(dir.path()).unwrap();
        assert_eq!(d.assets, vec!["ES", "TY"]);
        assert_eq!(d.mask.index_set(0), &[0, 2]);
        assert_eq!(d.mask.index_set(1), &[1]);
        assert_eq!(d.features[1][2], 6.0);
        assert_eq!(d.returns[0][1], -0.002);

        let out = tempfile::tempdir().unwrap();
        d.write_dir(out.path()).unwrap();
        let again = MarketData::load_dir(out.path()).unwrap();
        assert_eq!(again.returns, d.returns);
        assert_eq!(again.features, d.features);
    }

    #[test]
    fn ingestion_errors_are_specific() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "returns.csv", "date,A\n2020-01-02,0.01\n2020-01-03,0.02\n2020-01-06,0.0\n");
        write(dir.path(), "features.csv", "date,A\n2020-01-02,1\n2020-01-06,1\n");
        let e = MarketData::load_dir(dir.path()).unwrap_err().to_string();
        assert!(e.contains("2020-01-03"), "{e}");

        write(dir.path(), "features.csv", "date,B\n2020-01-02,1\n2020-01-03,1\n2020-01-06,1\n");
        assert!(MarketData::load_dir(dir.path()).unwrap_err().to_string().contains("unknown asset"));

        let bad = write(dir.path(), "bad.csv", "date,A\n2020-01-02,x\n");
        assert!(read_wide_csv(&bad).unwrap_err().to_string().contains("bad.csv:2"));
        let unsorted = write(dir.path(), "u.csv", "date,A\n2020-01-03,1\n2020-01-02,1\n");
        assert!(read_wide_csv(&unsorted).is_err());
        assert!(MarketData::load_dir(&dir.path().join("nope")).is_err());
    }

    #[test]
    fn covariance_blocks_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let assets = vec!["A".to_owned(), "B".to_owned()];
        let d0 = NaiveDate::from_ymd_opt(2021, 3, 1).unwrap();
        let blocks = vec![
            (d0, DMatrix::from_row_slice(2, 2, &[1e-4, 2e-5, 2e-5, 3e-4])),
            (d0.succ_opt().unwrap(), DMatrix::identity(2, 2)),
        ];
        let p = dir.path().join("cov.csv");
        write_covariance_blocks(&p, &assets, &blocks).unwrap();
        assert_eq!(read_covariance_blocks(&p, &assets).unwrap(), blocks);
        assert!(read_covariance_blocks(&p, &["B".to_owned(), "A".to_owned()]).is_err());
    }

    #[test]
    fn coefficient_csv_has_optional_std_err() {
        let dir = tempfile::tempdir().unwrap();
        let names = vec!["a".to_owned(), "b".to_owned()];
        let c = Coefficients::new(DVector::from_vec(vec![0.5, -1.0]), EstimatorTag::Ols).unwrap();
        let p = dir.path().join("c.csv");
        write_coefficients_csv(&p, &c, &names).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().starts_with("feature,theta\n"));
        let c = c.with_std_err(DVector::from_vec(vec![0.1, 0.2])).unwrap();
        write_coefficients_csv(&p, &c, &names).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().starts_with("feature,theta,std_err\n"));
    }
}
