//! CSV readers for the design, post-stratification and test subcommands.
//!
//! Stratum labels are arbitrary integers; they are mapped to dense indices in
//! increasing order and rows are regrouped so each stratum is contiguous.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use stratperm::designs::{Design, DesignKind, ExperimentDesign, PostStratSpec, SamplingDesign};
use stratperm::StratumLayout;

use crate::{CliError, CliResult};

/// Parsed CSV: header plus rows, each tagged with its 1-based file line.
struct Table {
    path: String,
    headers: Vec<String>,
    rows: Vec<(u64, csv::StringRecord)>,
}

impl Table {
    fn read(path: &Path) -> CliResult<Self> {
        let name = path.display().to_string();
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| CliError::Input(format!("{name}: {e}")))?;
        let headers: Vec<String> = reader
            .headers()
            .map_err(|e| CliError::Parse(format!("{name}: {e}")))?
            .iter()
            .map(|h| h.to_ascii_lowercase())
            .collect();
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                CliError::Parse(format!("{name}: line {line}: {e}"))
            })?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            rows.push((line, rec));
        }
        if rows.is_empty() {
            return Err(CliError::Parse(format!("{name}: no data rows")));
        }
        Ok(Self {
            path: name,
            headers,
            rows,
        })
    }

    fn has(&self, col: &str) -> bool {
        self.headers.iter().any(|h| h == col)
    }

    fn index(&self, col: &str) -> CliResult<usize> {
        self.headers
            .iter()
            .position(|h| h == col)
            .ok_or_else(|| CliError::Parse(format!("{}: missing column '{col}'", self.path)))
    }

    fn parse<T: std::str::FromStr>(&self, col: &str) -> CliResult<Vec<T>> {
        let idx = self.index(col)?;
        self.rows
            .iter()
            .map(|(line, rec)| {
                let raw = rec.get(idx).unwrap_or("");
                raw.parse::<T>().map_err(|_| {
                    CliError::Parse(format!(
                        "{}: line {line}, column '{col}': cannot parse '{raw}'",
                        self.path
                    ))
                })
            })
            .collect()
    }

    fn floats(&self, col: &str) -> CliResult<Vec<f64>> {
        let v: Vec<f64> = self.parse(col)?;
        if let Some(i) = v.iter().position(|x| !x.is_finite()) {
            return Err(CliError::Parse(format!(
                "{}: line {}, column '{col}': value is not finite",
                self.path, self.rows[i].0
            )));
        }
        Ok(v)
    }

    fn optional_floats(&self, col: &str) -> CliResult<Option<Vec<f64>>> {
        if self.has(col) {
            self.floats(col).map(Some)
        } else {
            Ok(None)
        }
    }

    fn line(&self, row: usize) -> u64 {
        self.rows[row].0
    }
}

/// Dense stratum indices from integer labels.
pub struct Strata {
    /// Dense stratum of each input row.
    pub index: Vec<usize>,
    /// Label of each dense stratum.
    pub labels: Vec<i64>,
    pub warnings: Vec<String>,
}

impl Strata {
    pub fn from_labels(labels: &[i64]) -> Self {
        let distinct: Vec<i64> = labels
            .iter()
            .copied()
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let map: HashMap<i64, usize> = distinct.iter().enumerate().map(|(i, &l)| (l, i)).collect();
        let mut warnings = Vec::new();
        let contiguous = distinct.windows(2).all(|w| w[1] == w[0] + 1);
        if !contiguous || distinct.first().is_some_and(|&l| l != 0 && l != 1) {
            warnings.push(format!(
                "stratum labels {} are not consecutive; re-indexed as 0..{}",
                summarize(&distinct),
                distinct.len()
            ));
        }
        Self {
            index: labels.iter().map(|l| map[l]).collect(),
            labels: distinct,
            warnings,
        }
    }

    pub fn num_strata(&self) -> usize {
        self.labels.len()
    }

    /// Stable order of rows with strata contiguous.
    pub fn order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.index.len()).collect();
        order.sort_by_key(|&i| self.index[i]);
        order
    }

    pub fn layout(&self) -> CliResult<StratumLayout> {
        let mut sizes = vec![0; self.num_strata()];
        for &k in &self.index {
            sizes[k] += 1;
        }
        Ok(StratumLayout::new(sizes)?)
    }
}

fn summarize(labels: &[i64]) -> String {
    if labels.len() <= 8 {
        format!("{labels:?}")
    } else {
        format!(
            "[{}, {}, ..., {}]",
            labels[0],
            labels[1],
            labels[labels.len() - 1]
        )
    }
}

fn permute<T: Clone>(v: &[T], order: &[usize]) -> Vec<T> {
    order.iter().map(|&i| v[i].clone()).collect()
}

/// One value per stratum from a column that must be constant within strata.
fn per_stratum<T: Clone + PartialEq + std::fmt::Debug>(
    table: &Table,
    col: &str,
    values: &[T],
    strata: &Strata,
) -> CliResult<Vec<T>> {
    let mut out: Vec<Option<T>> = vec![None; strata.num_strata()];
    for (row, v) in values.iter().enumerate() {
        let k = strata.index[row];
        match &out[k] {
            None => out[k] = Some(v.clone()),
            Some(prev) if prev != v => return Err(CliError::Invariant(format!(
                "{}: line {}, column '{col}': {v:?} differs from {prev:?} elsewhere in stratum {}",
                table.path,
                table.line(row),
                strata.labels[k]
            ))),
            Some(_) => {}
        }
    }
    Ok(out
        .into_iter()
        .map(|v| v.expect("every stratum has a row"))
        .collect())
}

fn indicator(table: &Table, col: &str) -> CliResult<Vec<bool>> {
    let raw: Vec<f64> = table.floats(col)?;
    raw.iter()
        .enumerate()
        .map(|(row, &x)| match x {
            1.0 => Ok(true),
            0.0 => Ok(false),
            _ => Err(CliError::Parse(format!(
                "{}: line {}, column '{col}': expected 0 or 1, found {x}",
                table.path,
                table.line(row)
            ))),
        })
        .collect()
}

fn check_unique_units(table: &Table) -> CliResult<()> {
    if !table.has("unit") {
        return Ok(());
    }
    let idx = table.index("unit")?;
    let mut seen: HashMap<&str, u64> = HashMap::new();
    for (line, rec) in &table.rows {
        let u = rec.get(idx).unwrap_or("");
        if let Some(first) = seen.insert(u, *line) {
            return Err(CliError::Invariant(format!(
                "{}: line {line}, column 'unit': '{u}' already appears on line {first}",
                table.path
            )));
        }
    }
    Ok(())
}

pub struct ParsedDesign {
    pub design: Design,
    /// Realized selection in regrouped unit order, when a `z` column is present.
    pub selected: Option<Vec<bool>>,
    pub warnings: Vec<String>,
}

/// Columns: `unit, stratum`, then `y` (sampling) or `y1, y0` (experiment),
/// optional `z` (0/1 realization), `n1` and `weight` (constant within strata).
/// Without `n1`, per-stratum counts come from `z`.
pub fn read_design_csv(path: &Path) -> CliResult<ParsedDesign> {
    let table = Table::read(path)?;
    check_unique_units(&table)?;
    let strata = Strata::from_labels(&table.parse::<i64>("stratum")?);
    let order = strata.order();
    let layout = strata.layout()?;
    let z = if table.has("z") {
        Some(indicator(&table, "z")?)
    } else {
        None
    };

    let counts: Vec<usize> = if table.has("n1") {
        per_stratum(&table, "n1", &table.parse::<usize>("n1")?, &strata)?
    } else if let Some(z) = &z {
        let mut c = vec![0; strata.num_strata()];
        for (row, &s) in z.iter().enumerate() {
            c[strata.index[row]] += s as usize;
        }
        c
    } else {
        return Err(CliError::Parse(format!(
            "{}: need an 'n1' or 'z' column",
            table.path
        )));
    };
    let weights = match table.optional_floats("weight")? {
        Some(w) => Some(per_stratum(&table, "weight", &w, &strata)?),
        None => None,
    };

    let design: Design = if table.has("y") {
        let y = permute(&table.floats("y")?, &order);
        SamplingDesign::new(layout, y, counts, weights)?.into()
    } else if table.has("y1") && table.has("y0") {
        let y1 = permute(&table.floats("y1")?, &order);
        let y0 = permute(&table.floats("y0")?, &order);
        ExperimentDesign::new(layout, y1, y0, counts, weights)?.into()
    } else {
        return Err(CliError::Parse(format!(
            "{}: need column 'y' or columns 'y1' and 'y0'",
            table.path
        )));
    };
    Ok(ParsedDesign {
        design,
        selected: z.map(|z| permute(&z, &order)),
        warnings: strata.warnings,
    })
}

pub struct ParsedPostStrat {
    pub spec: PostStratSpec,
    pub population: stratperm::designs::Population,
    pub warnings: Vec<String>,
}

/// Columns: `unit, x` (integer covariate level), then `y` or `y1, y0`.
pub fn read_poststrat_csv(path: &Path, n1: usize) -> CliResult<ParsedPostStrat> {
    let table = Table::read(path)?;
    check_unique_units(&table)?;
    let strata = Strata::from_labels(&table.parse::<i64>("x")?);
    let (population, kind) = if table.has("y") {
        (
            stratperm::designs::Population::Sampling {
                y: table.floats("y")?,
            },
            DesignKind::Sampling,
        )
    } else if table.has("y1") && table.has("y0") {
        (
            stratperm::designs::Population::Experiment {
                y1: table.floats("y1")?,
                y0: table.floats("y0")?,
            },
            DesignKind::Experiment,
        )
    } else {
        return Err(CliError::Parse(format!(
            "{}: need column 'y' or columns 'y1' and 'y0'",
            table.path
        )));
    };
    Ok(ParsedPostStrat {
        spec: PostStratSpec {
            covariate: strata.index.clone(),
            n1,
            kind,
        },
        population,
        warnings: strata.warnings,
    })
}

pub struct ParsedTest {
    pub layout: StratumLayout,
    pub z: Vec<f64>,
    pub y: Vec<f64>,
    pub d: Option<Vec<f64>>,
    pub labels: Vec<i64>,
    pub warnings: Vec<String>,
}

/// Columns: `stratum, z, y`, optional `d` (dose for the IV test).
pub fn read_test_csv(path: &Path) -> CliResult<ParsedTest> {
    let table = Table::read(path)?;
    let strata = Strata::from_labels(&table.parse::<i64>("stratum")?);
    let order = strata.order();
    let layout = strata.layout()?;
    let mut per_k: BTreeMap<usize, usize> = BTreeMap::new();
    for &k in &strata.index {
        *per_k.entry(k).or_default() += 1;
    }
    let mut warnings = strata.warnings.clone();
    for (k, c) in per_k {
        if c == 1 {
            warnings.push(format!(
                "stratum {} has a single unit and carries no randomness",
                strata.labels[k]
            ));
        }
    }
    Ok(ParsedTest {
        layout,
        z: permute(&table.floats("z")?, &order),
        y: permute(&table.floats("y")?, &order),
        d: table.optional_floats("d")?.map(|d| permute(&d, &order)),
        labels: strata.labels,
        warnings,
    })
}
