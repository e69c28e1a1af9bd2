//! CSV ingestion, JSON reports, plot-data emission and the command-line front end.

mod cli;
mod plotdata;
mod report;

pub use cli::{run_subcommand, CliOutcome};
pub use plotdata::{emit_plot_data, PlotKind, PlotOptions};
pub use report::{format_number, round_sig, untagged_numbers, ReportDocument, ReportNode, SIGNIFICANT_DIGITS};

use std::path::Path;

use crate::effects::{partial_correlation, partial_correlation_from_z, ClusteredDataset, EffectRecord, MetaDataset, Metric};
use crate::error::{MetaError, Result};

/// How `effect` and `se` are obtained for each row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Derive {
    /// Read directly from the `effect` and `se` columns.
    #[default]
    None,
    /// Partial correlation from `t_stat` and `df`.
    FromT,
    /// Partial correlation `z_stat / sqrt(n)`; `se` is read when present, else `1 / sqrt(n)`.
    FromZ,
}

impl std::str::FromStr for Derive {
    type Err = MetaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Derive::None),
            "from_t" | "from-t" => Ok(Derive::FromT),
            "from_z" | "from-z" => Ok(Derive::FromZ),
            other => Err(MetaError::Usage(format!("unknown derivation '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadOptions {
    pub metric: Metric,
    pub derive: Derive,
    /// Column whose values group records into clusters.
    pub cluster_col: Option<String>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { metric: Metric::Generic, derive: Derive::None, cluster_col: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LoadedData {
    Flat(MetaDataset),
    Clustered(ClusteredDataset),
}

impl LoadedData {
    pub fn flat(&self) -> &MetaDataset {
        match self {
            LoadedData::Flat(d) => d,
            LoadedData::Clustered(c) => c.data(),
        }
    }

    pub fn clustered(&self) -> Result<&ClusteredDataset> {
        match self {
            LoadedData::Clustered(c) => Ok(c),
            LoadedData::Flat(_) => Err(MetaError::Usage("this analysis needs --cluster-col".into())),
        }
    }
}

const RESERVED: [&str; 7] = ["effect", "se", "study_id", "n", "df", "t_stat", "z_stat"];

pub fn load_csv(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<LoadedData> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| MetaError::Io(format!("{}: {e}", path.display())))?;
    parse_csv(&bytes, opts)
}

/// Parses CSV bytes; reported row numbers are file line numbers, header on line 1.
pub fn parse_csv(bytes: &[u8], opts: &LoadOptions) -> Result<LoadedData> {
    let text = std::str::from_utf8(bytes).map_err(|e| MetaError::Parse {
        row: 0,
        column: String::new(),
        reason: format!("input is not UTF-8: {e}"),
    })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| MetaError::Parse { row: 1, column: String::new(), reason: e.to_string() })?
        .iter()
        .map(str::to_string)
        .collect();
    if header.iter().all(String::is_empty) {
        return Err(MetaError::Schema("missing header row".into()));
    }
    for (i, h) in header.iter().enumerate() {
        if h.is_empty() {
            return Err(MetaError::Schema(format!("column {} has an empty name", i + 1)));
        }
        if header[..i].contains(h) {
            return Err(MetaError::Schema(format!("duplicate column '{h}'")));
        }
    }
    let col = |name: &str| header.iter().position(|h| h == name);
    let require = |name: &str| col(name).ok_or_else(|| MetaError::Schema(format!("missing required column '{name}'")));
    let (effect_col, se_col) = match opts.derive {
        Derive::None => (Some(require("effect")?), Some(require("se")?)),
        Derive::FromT => {
            require("t_stat")?;
            require("df")?;
            (None, None)
        }
        Derive::FromZ => {
            require("z_stat")?;
            require("n")?;
            (None, col("se"))
        }
    };
    let cluster_col = match &opts.cluster_col {
        Some(name) => Some(col(name).ok_or_else(|| MetaError::Schema(format!("cluster column '{name}' not found")))?),
        None => None,
    };
    let id_col = cluster_col.or_else(|| col("study_id"));
    let moderator_cols: Vec<usize> =
        (0..header.len()).filter(|&j| !RESERVED.contains(&header[j].as_str()) && Some(j) != cluster_col).collect();

    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            MetaError::Parse { row: line, column: String::new(), reason: e.to_string() }
        })?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let cell = |j: usize| row.get(j).unwrap_or("");
        let number = |j: usize| -> Result<Option<f64>> {
            let s = cell(j);
            if s.is_empty() || s.eq_ignore_ascii_case("na") {
                return Ok(None);
            }
            let v: f64 = s.parse().map_err(|_| MetaError::Parse {
                row: line,
                column: header[j].clone(),
                reason: format!("'{s}' is not a number"),
            })?;
            if !v.is_finite() {
                return Err(MetaError::Parse { row: line, column: header[j].clone(), reason: format!("'{s}' is not finite") });
            }
            Ok(Some(v))
        };
        let required = |name: &str| -> Result<f64> {
            let j = col(name).expect("checked above");
            number(j)?.ok_or_else(|| MetaError::Parse { row: line, column: name.into(), reason: "missing value".into() })
        };
        let optional = |name: &str| -> Result<Option<f64>> { col(name).map_or(Ok(None), number) };

        let (effect, se, flagged) = match opts.derive {
            Derive::None => {
                let (e, s) = (effect_col.expect("set"), se_col.expect("set"));
                let effect = number(e)?.ok_or_else(|| MetaError::Parse { row: line, column: "effect".into(), reason: "missing value".into() })?;
                let se = number(s)?.ok_or_else(|| MetaError::Parse { row: line, column: "se".into(), reason: "missing value".into() })?;
                (effect, se, false)
            }
            Derive::FromT => {
                let (r, se) = partial_correlation(required("t_stat")?, required("df")?).map_err(|e| at_row(e, line))?;
                (r, se, false)
            }
            Derive::FromZ => {
                let n = required("n")?;
                let r = partial_correlation_from_z(required("z_stat")?, n).map_err(|e| at_row(e, line))?;
                let se = match se_col {
                    Some(j) => number(j)?.unwrap_or(1.0 / n.sqrt()),
                    None => 1.0 / n.sqrt(),
                };
                (r, se, r.abs() >= 1.0)
            }
        };
        if !(se > 0.0) {
            return Err(MetaError::InvalidRecord { record: line, reason: format!("se must be positive, got {se}") });
        }
        let mut rec = EffectRecord::new(effect, se);
        rec.out_of_range = flagged;
        rec.n = optional("n")?;
        rec.df = optional("df")?;
        if let Some(j) = id_col {
            let id = cell(j);
            if !id.is_empty() {
                rec.study_id = Some(id.to_string());
            } else if cluster_col.is_some() {
                return Err(MetaError::Parse { row: line, column: header[j].clone(), reason: "missing cluster identifier".into() });
            }
        }
        rec.moderators = moderator_cols.iter().map(|&j| number(j)).collect::<Result<_>>()?;
        records.push(rec);
    }
    let metric = if opts.derive != Derive::None && opts.metric == Metric::Generic { Metric::PartialR } else { opts.metric };
    let names = moderator_cols.iter().map(|&j| header[j].clone()).collect();
    let data = MetaDataset::new(records, metric, names, cluster_col.map(|j| header[j].clone())).map_err(|e| match e {
        // record positions become file lines
        MetaError::InvalidRecord { record, reason } => MetaError::InvalidRecord { record: record + 2, reason },
        other => other,
    })?;
    Ok(match cluster_col {
        Some(_) => LoadedData::Clustered(ClusteredDataset::from_dataset(&data)?),
        None => LoadedData::Flat(data),
    })
}

fn at_row(e: MetaError, line: usize) -> MetaError {
    match e {
        MetaError::Domain(reason) => MetaError::InvalidRecord { record: line, reason },
        other => other,
    }
}

/// CSV text that [`parse_csv`] reads back to the same dataset.
pub fn to_csv_string(data: &MetaDataset) -> Result<String> {
    let id_name = data.cluster_column().unwrap_or("study_id").to_string();
    let has_id = data.records().iter().any(|r| r.study_id.is_some());
    let has_n = data.records().iter().any(|r| r.n.is_some());
    let has_df = data.records().iter().any(|r| r.df.is_some());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = vec!["effect".into(), "se".into()];
    if has_id {
        header.push(id_name);
    }
    if has_n {
        header.push("n".into());
    }
    if has_df {
        header.push("df".into());
    }
    header.extend(data.moderator_schema().iter().cloned());
    let csv_err = |e: csv::Error| MetaError::Io(e.to_string());
    w.write_record(&header).map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:?}"));
    for r in data.records() {
        let mut row = vec![format!("{:?}", r.effect), format!("{:?}", r.se)];
        if has_id {
            row.push(r.study_id.clone().unwrap_or_default());
        }
        if has_n {
            row.push(opt(r.n));
        }
        if has_df {
            row.push(opt(r.df));
        }
        row.extend(r.moderators.iter().map(|m| opt(*m)));
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| MetaError::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| MetaError::Io(e.to_string()))
}

pub fn write_csv(data: &MetaDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_csv_string(data)?).map_err(|e| MetaError::Io(format!("{}: {e}", path.display())))
}
