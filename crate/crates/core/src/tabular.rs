//! Data containers, fold planning and seeded random streams.
//!
//! Covariates are stored column-major and validated once at construction.
//! Folds follow the modular rule on 1-indexed rows: row `i` belongs to fold
//! `k` iff `i ≡ k − 1 (mod K)`. The only 1-based/0-based conversion lives in
//! [`FoldPlan::fold_of_row`].

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column-major covariate matrix with `n` rows and `d` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariates {
    n: usize,
    d: usize,
    data: Vec<f64>,
}

impl Covariates {
    pub fn from_columns(columns: Vec<Vec<f64>>) -> Result<Self> {
        let d = columns.len();
        if d == 0 {
            return Err(Error::invalid("covariates need at least one column"));
        }
        let n = columns[0].len();
        let mut data = Vec::with_capacity(n * d);
        for (j, col) in columns.into_iter().enumerate() {
            if col.len() != n {
                return Err(Error::invalid(format!(
                    "covariate column {j} has {} rows, expected {n}",
                    col.len()
                )));
            }
            data.extend(col);
        }
        Self::from_col_major(n, d, data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map(Vec::len).unwrap_or(0);
        if d == 0 {
            return Err(Error::invalid("covariates need at least one column"));
        }
        let mut data = vec![0.0; n * d];
        for (i, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(Error::invalid(format!(
                    "covariate row {i} has {} entries, expected {d}",
                    row.len()
                )));
            }
            for (j, &v) in row.iter().enumerate() {
                data[j * n + i] = v;
            }
        }
        Self::from_col_major(n, d, data)
    }

    pub fn from_col_major(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if d == 0 {
            return Err(Error::invalid("covariates need at least one column"));
        }
        if data.len() != n * d {
            return Err(Error::invalid(format!(
                "covariate buffer has {} entries, expected {}",
                data.len(),
                n * d
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite covariate at row {}, column {}",
                pos % n.max(1),
                pos / n.max(1)
            )));
        }
        Ok(Covariates { n, d, data })
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn n_cols(&self) -> usize {
        self.d
    }

    pub fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.n..(j + 1) * self.n]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[j * self.n + i]
    }

    pub fn row_into(&self, i: usize, buf: &mut Vec<f64>) {
        buf.clear();
        buf.extend((0..self.d).map(|j| self.data[j * self.n + i]));
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        let mut buf = Vec::with_capacity(self.d);
        self.row_into(i, &mut buf);
        buf
    }

    /// Iterates rows as freshly allocated vectors.
    pub fn rows(&self) -> impl Iterator<Item = Vec<f64>> + '_ {
        (0..self.n).map(move |i| self.row(i))
    }

    pub fn select(&self, idx: &[usize]) -> Covariates {
        let m = idx.len();
        let mut data = Vec::with_capacity(m * self.d);
        for j in 0..self.d {
            let col = self.col(j);
            data.extend(idx.iter().map(|&i| col[i]));
        }
        Covariates {
            n: m,
            d: self.d,
            data,
        }
    }
}

fn check_binary(name: &str, v: &[u8]) -> Result<()> {
    match v.iter().position(|&b| b > 1) {
        Some(i) => Err(Error::invalid(format!(
            "{name}[{i}] = {} is not a 0/1 code",
            v[i]
        ))),
        None => Ok(()),
    }
}

fn check_finite(name: &str, v: &[f64]) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::invalid(format!("{name}[{i}] is not finite"))),
        None => Ok(()),
    }
}

fn check_len(name: &str, len: usize, n: usize) -> Result<()> {
    if len != n {
        return Err(Error::invalid(format!(
            "{name} has {len} rows but covariates have {n}"
        )));
    }
    Ok(())
}

/// Observational sample `(X, A, Y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsDataset {
    x: Covariates,
    a: Vec<u8>,
    y: Vec<f64>,
}

impl ObsDataset {
    pub fn new(x: Covariates, a: Vec<u8>, y: Vec<f64>) -> Result<Self> {
        check_len("a", a.len(), x.n_rows())?;
        check_len("y", y.len(), x.n_rows())?;
        check_binary("a", &a)?;
        check_finite("y", &y)?;
        Ok(ObsDataset { x, a, y })
    }

    pub fn x(&self) -> &Covariates {
        &self.x
    }
    pub fn a(&self) -> &[u8] {
        &self.a
    }
    pub fn y(&self) -> &[f64] {
        &self.y
    }
    pub fn dim(&self) -> usize {
        self.x.n_cols()
    }

    /// Rows with `A == arm`, in original order.
    pub fn arm(&self, arm: u8) -> (Covariates, Vec<f64>) {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.a[i] == arm).collect();
        (
            self.x.select(&idx),
            idx.iter().map(|&i| self.y[i]).collect(),
        )
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let d = self.dim();
        let mut header: Vec<String> = (1..=d).map(|j| format!("x{j}")).collect();
        header.extend(["a".to_string(), "y".to_string()]);
        let rows = (0..self.len()).map(|i| {
            let mut r = self.x.row(i);
            r.push(self.a[i] as f64);
            r.push(self.y[i]);
            r
        });
        write_table(path, &header, rows)
    }

    /// Reads `x1..xd,a,y`; columns are matched by name, the covariates are every
    /// column other than `a` and `y` in file order.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let table = read_table(path)?;
        let a_col = table.require(path, "a")?;
        let y_col = table.require(path, "y")?;
        let x = table.covariates(path, &[a_col, y_col])?;
        let a = table.binary_column(path, a_col)?;
        ObsDataset::new(x, a, table.column(y_col))
    }
}

/// Intent-to-treat sample `(X, Z, A, Y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct IvDataset {
    x: Covariates,
    z: Vec<u8>,
    a: Vec<u8>,
    y: Vec<f64>,
}

impl IvDataset {
    pub fn new(x: Covariates, z: Vec<u8>, a: Vec<u8>, y: Vec<f64>) -> Result<Self> {
        check_len("z", z.len(), x.n_rows())?;
        check_len("a", a.len(), x.n_rows())?;
        check_len("y", y.len(), x.n_rows())?;
        check_binary("z", &z)?;
        check_binary("a", &a)?;
        check_finite("y", &y)?;
        Ok(IvDataset { x, z, a, y })
    }

    pub fn x(&self) -> &Covariates {
        &self.x
    }
    pub fn z(&self) -> &[u8] {
        &self.z
    }
    pub fn a(&self) -> &[u8] {
        &self.a
    }
    pub fn y(&self) -> &[f64] {
        &self.y
    }
    pub fn dim(&self) -> usize {
        self.x.n_cols()
    }

    /// Rows with `Z == arm`: covariates, treatment and outcome.
    pub fn instrument_arm(&self, arm: u8) -> (Covariates, Vec<u8>, Vec<f64>) {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.z[i] == arm).collect();
        (
            self.x.select(&idx),
            idx.iter().map(|&i| self.a[i]).collect(),
            idx.iter().map(|&i| self.y[i]).collect(),
        )
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let d = self.dim();
        let mut header: Vec<String> = (1..=d).map(|j| format!("x{j}")).collect();
        header.extend(["z".to_string(), "a".to_string(), "y".to_string()]);
        let rows = (0..self.len()).map(|i| {
            let mut r = self.x.row(i);
            r.push(self.z[i] as f64);
            r.push(self.a[i] as f64);
            r.push(self.y[i]);
            r
        });
        write_table(path, &header, rows)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let table = read_table(path)?;
        let z_col = table.require(path, "z")?;
        let a_col = table.require(path, "a")?;
        let y_col = table.require(path, "y")?;
        let x = table.covariates(path, &[z_col, a_col, y_col])?;
        let z = table.binary_column(path, z_col)?;
        let a = table.binary_column(path, a_col)?;
        IvDataset::new(x, z, a, table.column(y_col))
    }
}

/// A dataset whose rows can be subset by index.
pub trait RowData: Sized {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// Copies the given rows, in the given order.
    fn select_rows(&self, idx: &[usize]) -> Self;
}

impl RowData for ObsDataset {
    fn len(&self) -> usize {
        self.y.len()
    }
    fn select_rows(&self, idx: &[usize]) -> Self {
        ObsDataset {
            x: self.x.select(idx),
            a: idx.iter().map(|&i| self.a[i]).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }
}

impl RowData for IvDataset {
    fn len(&self) -> usize {
        self.y.len()
    }
    fn select_rows(&self, idx: &[usize]) -> Self {
        IvDataset {
            x: self.x.select(idx),
            z: idx.iter().map(|&i| self.z[i]).collect(),
            a: idx.iter().map(|&i| self.a[i]).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }
}

/// Deterministic K-fold assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    k: usize,
    /// Fold index in `1..=k` for each 0-based row.
    assignment: Vec<usize>,
}

impl FoldPlan {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_rows(&self) -> usize {
        self.assignment.len()
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    /// Fold of the 1-indexed row `i`: the unique `k ∈ 1..=K` with `i ≡ k − 1 (mod K)`.
    pub fn fold_of_row(row_1based: usize, k: usize) -> usize {
        row_1based % k + 1
    }

    /// 0-based row indices in fold `fold` (1-based), ascending.
    pub fn in_fold(&self, fold: usize) -> Result<Vec<usize>> {
        self.check_fold(fold)?;
        Ok((0..self.n_rows())
            .filter(|&i| self.assignment[i] == fold)
            .collect())
    }

    /// 0-based row indices outside fold `fold`, ascending.
    pub fn out_of_fold(&self, fold: usize) -> Result<Vec<usize>> {
        self.check_fold(fold)?;
        Ok((0..self.n_rows())
            .filter(|&i| self.assignment[i] != fold)
            .collect())
    }

    fn check_fold(&self, fold: usize) -> Result<()> {
        if fold == 0 || fold > self.k {
            return Err(Error::invalid(format!(
                "fold index {fold} outside 1..={}",
                self.k
            )));
        }
        Ok(())
    }
}

pub fn make_folds(n: usize, k: usize) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::invalid(format!("fold count {k} < 2")));
    }
    if n < k {
        return Err(Error::invalid(format!("{n} rows cannot fill {k} folds")));
    }
    let assignment = (1..=n).map(|i| FoldPlan::fold_of_row(i, k)).collect();
    Ok(FoldPlan { k, assignment })
}

/// Splits `data` into (rows in fold `fold`, rows outside it), preserving order.
pub fn split_dataset<D: RowData>(data: &D, plan: &FoldPlan, fold: usize) -> Result<(D, D)> {
    if data.len() != plan.n_rows() {
        return Err(Error::invalid(format!(
            "dataset has {} rows, fold plan covers {}",
            data.len(),
            plan.n_rows()
        )));
    }
    let inside = plan.in_fold(fold)?;
    let outside = plan.out_of_fold(fold)?;
    Ok((data.select_rows(&inside), data.select_rows(&outside)))
}

/// A named random stream: the pair `(master_seed, stream_id)` fully determines
/// the draw sequence. Streams are ChaCha12 instances sharing the seed and
/// differing in the 64-bit stream word, so distinct ids never overlap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub master_seed: u64,
    pub stream_id: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        RngStream {
            master_seed,
            stream_id,
        }
    }

    /// Derives a sub-stream identified by `tag`.
    pub fn child(&self, tag: u64) -> RngStream {
        RngStream {
            master_seed: self.master_seed,
            stream_id: splitmix64(self.stream_id ^ splitmix64(tag.wrapping_add(1))),
        }
    }

    pub fn rng(&self) -> ChaCha12Rng {
        let mut rng = ChaCha12Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

// ---- text format ------------------------------------------------------------

pub(crate) struct Table {
    pub header: Vec<String>,
    /// Column-major values.
    pub columns: Vec<Vec<f64>>,
}

impl Table {
    pub fn find(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    fn require(&self, path: &Path, name: &str) -> Result<usize> {
        self.find(name).ok_or_else(|| Error::Load {
            path: path.display().to_string(),
            message: format!("missing column `{name}`"),
        })
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.columns[j].clone()
    }

    pub fn n_rows(&self) -> usize {
        self.columns.first().map(Vec::len).unwrap_or(0)
    }

    pub fn binary_column(&self, path: &Path, j: usize) -> Result<Vec<u8>> {
        self.columns[j]
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if v == 0.0 {
                    Ok(0)
                } else if v == 1.0 {
                    Ok(1)
                } else {
                    Err(Error::Load {
                        path: path.display().to_string(),
                        message: format!(
                            "column `{}` row {} has value {v}, expected 0 or 1",
                            self.header[j],
                            i + 1
                        ),
                    })
                }
            })
            .collect()
    }

    fn covariates(&self, path: &Path, exclude: &[usize]) -> Result<Covariates> {
        let cols: Vec<Vec<f64>> = (0..self.columns.len())
            .filter(|j| !exclude.contains(j))
            .map(|j| self.columns[j].clone())
            .collect();
        Covariates::from_columns(cols).map_err(|e| Error::Load {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

pub(crate) fn read_table(path: &Path) -> Result<Table> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_table_from(BufReader::new(file), &path.display().to_string())
}

pub(crate) fn read_table_from<R: Read>(reader: R, label: &str) -> Result<Table> {
    let load_err = |message: String| Error::Load {
        path: label.to_string(),
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| load_err(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(load_err("empty file or missing header".into()));
    }
    let mut columns = vec![Vec::new(); header.len()];
    for (r, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| load_err(format!("row {}: {e}", r + 1)))?;
        for (j, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                load_err(format!(
                    "row {} column `{}`: cannot parse `{field}` as a number",
                    r + 1,
                    header[j]
                ))
            })?;
            if !v.is_finite() {
                return Err(load_err(format!(
                    "row {} column `{}` is not finite",
                    r + 1,
                    header[j]
                )));
            }
            columns[j].push(v);
        }
    }
    Ok(Table { header, columns })
}

pub(crate) fn write_table<I>(path: &Path, header: &[String], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<f64>>,
{
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| fmt_num(*v)).collect();
        writeln!(w, "{}", line.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Formats a number with 17 significant digits; integers print without exponent.
pub fn fmt_num(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v:.16e}")
    }
}
