//! Tabular ingestion, covariate binarization and dataset assembly.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major 0/1 matrix with named columns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMatrix {
    n_rows: usize,
    names: Vec<String>,
    data: Vec<u8>,
}

impl BinaryMatrix {
    pub fn new(n_rows: usize, names: Vec<String>, data: Vec<u8>) -> Result<Self> {
        if data.len() != n_rows * names.len() {
            return Err(Error::Dimension(format!(
                "binary matrix has {} cells, expected {} x {}",
                data.len(),
                n_rows,
                names.len()
            )));
        }
        if let Some(bad) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Parameter(format!("binary matrix entry {bad} not in {{0,1}}")));
        }
        Ok(Self {
            n_rows,
            names,
            data,
        })
    }

    /// Build from rows; columns are named `f0, f1, ...`.
    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let n_cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        let names = (0..n_cols).map(|j| format!("f{j}")).collect();
        Self::new(rows.len(), names, rows.concat())
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.n_cols() + col]
    }

    pub fn row(&self, row: usize) -> &[u8] {
        let k = self.n_cols();
        &self.data[row * k..(row + 1) * k]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u8]> {
        (0..self.n_rows).map(move |r| self.row(r))
    }

    pub fn column(&self, col: usize) -> Vec<u8> {
        (0..self.n_rows).map(|r| self.get(r, col)).collect()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// The same values as an `n_rows x n_cols` real matrix.
    pub fn to_real(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_rows, self.n_cols(), |r, c| f64::from(self.get(r, c)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Categorical,
    Binary,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Numeric(Vec<f64>),
    Categorical(Vec<String>),
    Binary(Vec<u8>),
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Numeric(v) => v.len(),
            Column::Categorical(v) => v.len(),
            Column::Binary(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> ColumnKind {
        match self {
            Column::Numeric(_) => ColumnKind::Numeric,
            Column::Categorical(_) => ColumnKind::Categorical,
            Column::Binary(_) => ColumnKind::Binary,
        }
    }
}

/// Typed table as loaded from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    names: Vec<String>,
    columns: Vec<Column>,
    n_rows: usize,
    dropped_rows: usize,
}

impl RawTable {
    pub fn new(names: Vec<String>, columns: Vec<Column>) -> Result<Self> {
        if names.len() != columns.len() {
            return Err(Error::Dimension("one name per column required".into()));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n) {
                return Err(Error::Schema(format!("duplicate column name `{n}`")));
            }
        }
        let n_rows = columns.first().map_or(0, Column::len);
        if columns.iter().any(|c| c.len() != n_rows) {
            return Err(Error::Dimension("columns differ in length".into()));
        }
        Ok(Self {
            names,
            columns,
            n_rows,
            dropped_rows: 0,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Rows dropped at load time because the outcome or treatment was missing.
    pub fn dropped_rows(&self) -> usize {
        self.dropped_rows
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.columns[i])
    }

    pub fn numeric(&self, name: &str) -> Result<&[f64]> {
        match self.column(name) {
            Some(Column::Numeric(v)) => Ok(v),
            Some(other) => Err(Error::Schema(format!(
                "column `{name}` is {:?}, expected numeric",
                other.kind()
            ))),
            None => Err(Error::Schema(format!("unknown column `{name}`"))),
        }
    }

    pub fn binary(&self, name: &str) -> Result<&[u8]> {
        match self.column(name) {
            Some(Column::Binary(v)) => Ok(v),
            Some(other) => Err(Error::Schema(format!(
                "column `{name}` is {:?}, expected binary",
                other.kind()
            ))),
            None => Err(Error::Schema(format!("unknown column `{name}`"))),
        }
    }
}

/// Column declarations plus the two roles that drive row dropping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub outcome: String,
    pub treatment: String,
    pub columns: Vec<(String, ColumnKind)>,
}

/// How one raw column becomes indicator columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Directive {
    /// Binary column copied through; `negate` additionally emits its complement.
    Binary {
        #[serde(default)]
        negate: bool,
    },
    /// Numeric column cut into `bins` empirical-quantile bins.
    Numeric { bins: usize },
    /// Categorical levels mapped onto groups; absent map means one group per level.
    Categorical {
        #[serde(default)]
        groups: Option<BTreeMap<String, String>>,
    },
}

impl Directive {
    fn kind(&self) -> ColumnKind {
        match self {
            Directive::Binary { .. } => ColumnKind::Binary,
            Directive::Numeric { .. } => ColumnKind::Numeric,
            Directive::Categorical { .. } => ColumnKind::Categorical,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub column: String,
    #[serde(flatten)]
    pub directive: Directive,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BinarizationSpec {
    pub columns: Vec<ColumnSpec>,
}

/// The JSON configuration document: outcome/treatment roles plus one
/// binarization directive per covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub outcome: String,
    pub treatment: String,
    pub columns: Vec<ColumnSpec>,
}

impl DataConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: DataConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for c in &self.columns {
            if c.column == self.outcome || c.column == self.treatment {
                return Err(Error::Schema(format!(
                    "column `{}` cannot be both a role and a covariate",
                    c.column
                )));
            }
            if !seen.insert(&c.column) {
                return Err(Error::Schema(format!(
                    "column `{}` has more than one directive",
                    c.column
                )));
            }
            if let Directive::Numeric { bins } = c.directive {
                if bins < 2 {
                    return Err(Error::Config(format!(
                        "column `{}`: quantile bin count must be >= 2",
                        c.column
                    )));
                }
            }
        }
        if self.outcome == self.treatment {
            return Err(Error::Schema("outcome and treatment must differ".into()));
        }
        Ok(())
    }

    pub fn schema(&self) -> Schema {
        let mut columns = vec![
            (self.outcome.clone(), ColumnKind::Numeric),
            (self.treatment.clone(), ColumnKind::Binary),
        ];
        columns.extend(
            self.columns
                .iter()
                .map(|c| (c.column.clone(), c.directive.kind())),
        );
        Schema {
            outcome: self.outcome.clone(),
            treatment: self.treatment.clone(),
            columns,
        }
    }

    pub fn binarization(&self) -> BinarizationSpec {
        BinarizationSpec {
            columns: self.columns.clone(),
        }
    }
}

fn is_missing(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty() || c.eq_ignore_ascii_case("na") || c.eq_ignore_ascii_case("nan")
}

fn parse_binary(cell: &str) -> Option<u8> {
    match cell.trim().to_ascii_lowercase().as_str() {
        "1" | "1.0" | "true" | "yes" | "t" | "y" => Some(1),
        "0" | "0.0" | "false" | "no" | "f" | "n" => Some(0),
        _ => None,
    }
}

/// Load a headered UTF-8 CSV according to `schema`. Rows with a missing
/// outcome or treatment cell are dropped and counted.
pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<RawTable> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    load_csv_reader(file, schema)
}

pub fn load_csv_reader<R: std::io::Read>(reader: R, schema: &Schema) -> Result<RawTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let index: HashMap<&str, usize> = header
        .iter()
        .enumerate()
        .map(|(i, h)| (h.as_str(), i))
        .collect();
    let mut positions = Vec::with_capacity(schema.columns.len());
    for (name, _) in &schema.columns {
        match index.get(name.as_str()) {
            Some(&i) => positions.push(i),
            None => return Err(Error::Schema(format!("unknown column `{name}` (not in header)"))),
        }
    }
    let outcome_pos = index
        .get(schema.outcome.as_str())
        .copied()
        .ok_or_else(|| Error::Schema(format!("unknown outcome column `{}`", schema.outcome)))?;
    let treatment_pos = index
        .get(schema.treatment.as_str())
        .copied()
        .ok_or_else(|| Error::Schema(format!("unknown treatment column `{}`", schema.treatment)))?;

    let mut columns: Vec<Column> = schema
        .columns
        .iter()
        .map(|(_, kind)| match kind {
            ColumnKind::Numeric => Column::Numeric(Vec::new()),
            ColumnKind::Categorical => Column::Categorical(Vec::new()),
            ColumnKind::Binary => Column::Binary(Vec::new()),
        })
        .collect();
    let mut dropped = 0;
    for (i, record) in rdr.records().enumerate() {
        // 1-based line number, header is line 1
        let line = i + 2;
        let record = record.map_err(|e| Error::Parse {
            row: line,
            column: String::new(),
            message: e.to_string(),
        })?;
        if record.len() != header.len() {
            return Err(Error::Parse {
                row: line,
                column: String::new(),
                message: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        if is_missing(&record[outcome_pos]) || is_missing(&record[treatment_pos]) {
            dropped += 1;
            continue;
        }
        for ((col, &pos), (name, _)) in columns.iter_mut().zip(&positions).zip(&schema.columns) {
            let cell = &record[pos];
            let err = |message: String| Error::Parse {
                row: line,
                column: name.clone(),
                message,
            };
            match col {
                Column::Numeric(v) => {
                    let x: f64 = cell
                        .trim()
                        .parse()
                        .map_err(|_| err(format!("`{cell}` is not a number")))?;
                    if !x.is_finite() {
                        return Err(err(format!("`{cell}` is not finite")));
                    }
                    v.push(x);
                }
                Column::Binary(v) => {
                    v.push(parse_binary(cell).ok_or_else(|| err(format!("`{cell}` is not binary")))?)
                }
                Column::Categorical(v) => {
                    let level = if is_missing(cell) { "NA" } else { cell.trim() };
                    v.push(level.to_owned());
                }
            }
        }
    }
    let names = schema.columns.iter().map(|(n, _)| n.clone()).collect();
    let mut table = RawTable::new(names, columns)?;
    if table.n_rows == 0 {
        return Err(Error::EmptyInput("no usable rows in CSV".into()));
    }
    table.dropped_rows = dropped;
    Ok(table)
}

/// Type-7 (linear interpolation) empirical quantile of sorted data.
pub(crate) fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Interior cut points for `bins` equal-probability bins.
pub fn quantile_cuts(values: &[f64], bins: usize) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    (1..bins)
        .map(|k| quantile_sorted(&sorted, k as f64 / bins as f64))
        .collect()
}

/// Bin index of `x`; values equal to a cut point fall in the lower bin.
pub fn bin_of(x: f64, cuts: &[f64]) -> usize {
    cuts.iter().filter(|&&c| x > c).count()
}

fn fmt_num(x: f64) -> String {
    let s = format!("{x:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.to_owned()
    }
}

fn bin_labels(cuts: &[f64]) -> Vec<String> {
    let b = cuts.len() + 1;
    (0..b)
        .map(|k| {
            if k == 0 {
                format!("<={}", fmt_num(cuts[0]))
            } else if k == b - 1 {
                format!(">{}", fmt_num(cuts[k - 1]))
            } else {
                format!("({},{}]", fmt_num(cuts[k - 1]), fmt_num(cuts[k]))
            }
        })
        .collect()
}

/// Expand every covariate named in `spec` into indicator columns named
/// `<column>=<bin-or-group>`. Row order is preserved.
pub fn binarize(table: &RawTable, spec: &BinarizationSpec) -> Result<BinaryMatrix> {
    let n = table.n_rows();
    let mut names = Vec::new();
    let mut cols: Vec<Vec<u8>> = Vec::new();
    let mut seen = HashSet::new();
    for cs in &spec.columns {
        let name = &cs.column;
        if !seen.insert(name) {
            return Err(Error::Schema(format!("column `{name}` has more than one directive")));
        }
        let column = table
            .column(name)
            .ok_or_else(|| Error::Schema(format!("unknown column `{name}`")))?;
        match (&cs.directive, column) {
            (Directive::Binary { negate }, Column::Binary(v)) => {
                names.push(format!("{name}=1"));
                cols.push(v.clone());
                if *negate {
                    names.push(format!("{name}=0"));
                    cols.push(v.iter().map(|&x| 1 - x).collect());
                }
            }
            (Directive::Numeric { bins }, Column::Numeric(v)) => {
                if *bins < 2 {
                    return Err(Error::Config(format!("column `{name}`: bin count must be >= 2")));
                }
                let (min, max) = v
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
                if min == max {
                    return Err(Error::DegenerateBinning {
                        column: name.clone(),
                        message: format!("constant column cannot be cut into {bins} bins"),
                    });
                }
                let cuts = quantile_cuts(v, *bins);
                let mut ind = vec![vec![0u8; n]; *bins];
                for (r, &x) in v.iter().enumerate() {
                    ind[bin_of(x, &cuts)][r] = 1;
                }
                for (label, col) in bin_labels(&cuts).into_iter().zip(ind) {
                    names.push(format!("{name}={label}"));
                    cols.push(col);
                }
            }
            (Directive::Categorical { groups }, Column::Categorical(v)) => {
                let group_of = |level: &str| -> Result<String> {
                    match groups {
                        None => Ok(level.to_owned()),
                        Some(map) => map.get(level).cloned().ok_or_else(|| {
                            Error::Schema(format!(
                                "column `{name}`: level `{level}` not covered by grouping map"
                            ))
                        }),
                    }
                };
                let assigned: Vec<String> = v.iter().map(|l| group_of(l)).collect::<Result<_>>()?;
                let distinct: std::collections::BTreeSet<&String> = assigned.iter().collect();
                for g in distinct {
                    names.push(format!("{name}={g}"));
                    cols.push(assigned.iter().map(|a| u8::from(a == g)).collect());
                }
            }
            (d, c) => {
                return Err(Error::Schema(format!(
                    "column `{name}`: directive {:?} does not apply to a {:?} column",
                    d.kind(),
                    c.kind()
                )))
            }
        }
    }
    let k = cols.len();
    let mut data = vec![0u8; n * k];
    for (j, col) in cols.iter().enumerate() {
        for (r, &x) in col.iter().enumerate() {
            data[r * k + j] = x;
        }
    }
    BinaryMatrix::new(n, names, data)
}

/// Model-ready data: rule features, confounders, outcomes and treatment.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub rule_features: BinaryMatrix,
    pub confounders: DMatrix<f64>,
    pub y: Vec<f64>,
    pub t: Vec<u8>,
}

impl Dataset {
    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    /// Number of confounder columns K.
    pub fn n_confounders(&self) -> usize {
        self.confounders.ncols()
    }

    pub fn confounder_row(&self, row: usize) -> nalgebra::DVector<f64> {
        self.confounders.row(row).transpose()
    }

    pub fn outcome_sd(&self) -> f64 {
        let n = self.y.len();
        if n < 2 {
            return 0.0;
        }
        let mean = self.y.iter().sum::<f64>() / n as f64;
        (self.y.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    }
}

pub fn assemble_dataset(
    binary: BinaryMatrix,
    confounders: DMatrix<f64>,
    y: Vec<f64>,
    t: Vec<u8>,
) -> Result<Dataset> {
    let n = binary.n_rows();
    if confounders.nrows() != n || y.len() != n || t.len() != n {
        return Err(Error::Dimension(format!(
            "row counts disagree: rule features {n}, confounders {}, Y {}, T {}",
            confounders.nrows(),
            y.len(),
            t.len()
        )));
    }
    if t.iter().any(|&v| v > 1) {
        return Err(Error::Parameter("treatment entries must be 0 or 1".into()));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Parameter("outcomes must be finite".into()));
    }
    Ok(Dataset {
        rule_features: binary,
        confounders,
        y,
        t,
    })
}

/// Load, binarize and assemble in one step, reusing the binarized features
/// as confounders.
pub fn load_dataset(path: impl AsRef<Path>, config: &DataConfig) -> Result<(Dataset, RawTable)> {
    config.validate()?;
    let table = load_csv(path, &config.schema())?;
    let dataset = dataset_from_table(&table, config)?;
    Ok((dataset, table))
}

pub fn dataset_from_table(table: &RawTable, config: &DataConfig) -> Result<Dataset> {
    let binary = binarize(table, &config.binarization())?;
    let y = table.numeric(&config.outcome)?.to_vec();
    let t = table.binary(&config.treatment)?.to_vec();
    let conf = binary.to_real();
    assemble_dataset(binary, conf, y, t)
}
