//! Results and trajectory tables in CSV or JSON.

use std::io::Write;
use std::str::FromStr;

use csv::StringRecord;
use mtldyn_core::student::Trajectory;
use mtldyn_core::tadynamics::TaTrajectory;
use serde::Serialize;

use crate::config::Coordinates;
use crate::experiment::{ResultRow, RowStatus};
use crate::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Format {
    #[default]
    Csv,
    Json,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "jsonl",
        }
    }
}

impl FromStr for Format {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(HarnessError::Config(format!("unknown format {other:?}"))),
        }
    }
}

/// Shortest text that parses back to the same `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

fn opt<T: ToString>(x: Option<T>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

const MEASURES: [&str; 10] = [
    "seed",
    "mt_benefit",
    "min_loss_single",
    "min_loss_multi",
    "argmin_single",
    "argmin_multi",
    "bound_lower",
    "bound_upper",
    "loss_stderr",
    "status",
];

/// Coordinate columns, then the fixed measurement columns. `n_data_aux`
/// appears only when the config has its own auxiliary grid.
pub fn result_header(with_aux: bool) -> Vec<&'static str> {
    let mut h = vec!["relatedness", "s_bar_a", "s_bar_b", "n_data"];
    if with_aux {
        h.push("n_data_aux");
    }
    h.extend(MEASURES);
    h
}

pub fn result_record(row: &ResultRow, with_aux: bool) -> Vec<String> {
    let c = &row.coords;
    let mut r = vec![fmt_f64(c.relatedness), fmt_f64(c.s_bar_a), fmt_f64(c.s_bar_b), c.n_data.to_string()];
    if with_aux {
        r.push(c.n_data_aux.to_string());
    }
    r.extend([
        row.seed.to_string(),
        opt(row.mt_benefit),
        opt(row.min_loss_single),
        opt(row.min_loss_multi),
        opt(row.argmin_single),
        opt(row.argmin_multi),
        opt(row.bound_lower),
        opt(row.bound_upper),
        opt(row.loss_stderr),
        row.status.to_string(),
    ]);
    r
}

fn field<'a>(header: &StringRecord, rec: &'a StringRecord, name: &str) -> Result<&'a str> {
    let i = header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| HarnessError::Validation(format!("results table has no {name} column")))?;
    rec.get(i).ok_or_else(|| HarnessError::Validation(format!("short row, missing {name}")))
}

fn parse<T: FromStr>(s: &str, name: &str) -> Result<T> {
    s.parse().map_err(|_| HarnessError::Validation(format!("cannot parse {name} from {s:?}")))
}

fn parse_opt<T: FromStr>(s: &str, name: &str) -> Result<Option<T>> {
    if s.is_empty() {
        Ok(None)
    } else {
        parse(s, name).map(Some)
    }
}

pub fn parse_result(header: &StringRecord, rec: &StringRecord) -> Result<ResultRow> {
    if rec.len() != header.len() {
        return Err(HarnessError::Validation(format!("row has {} fields, header {}", rec.len(), header.len())));
    }
    let f = |n: &str| field(header, rec, n);
    let n_data: usize = parse(f("n_data")?, "n_data")?;
    let n_data_aux = match header.iter().any(|h| h == "n_data_aux") {
        true => parse(f("n_data_aux")?, "n_data_aux")?,
        false => n_data,
    };
    Ok(ResultRow {
        coords: Coordinates {
            relatedness: parse(f("relatedness")?, "relatedness")?,
            s_bar_a: parse(f("s_bar_a")?, "s_bar_a")?,
            s_bar_b: parse(f("s_bar_b")?, "s_bar_b")?,
            n_data,
            n_data_aux,
        },
        seed: parse(f("seed")?, "seed")?,
        mt_benefit: parse_opt(f("mt_benefit")?, "mt_benefit")?,
        min_loss_single: parse_opt(f("min_loss_single")?, "min_loss_single")?,
        min_loss_multi: parse_opt(f("min_loss_multi")?, "min_loss_multi")?,
        argmin_single: parse_opt(f("argmin_single")?, "argmin_single")?,
        argmin_multi: parse_opt(f("argmin_multi")?, "argmin_multi")?,
        bound_lower: parse_opt(f("bound_lower")?, "bound_lower")?,
        bound_upper: parse_opt(f("bound_upper")?, "bound_upper")?,
        loss_stderr: parse_opt(f("loss_stderr")?, "loss_stderr")?,
        status: f("status")?.parse::<RowStatus>()?,
    })
}

/// Read a results CSV. A truncated final line, as left by an interrupted
/// writer, is dropped.
pub fn read_results_csv(text: &str) -> Result<Vec<ResultRow>> {
    let mut rd = csv::ReaderBuilder::new().flexible(true).from_reader(text.as_bytes());
    let header = rd.headers()?.clone();
    let records: Vec<StringRecord> = rd.records().collect::<std::result::Result<_, _>>()?;
    let mut rows = Vec::with_capacity(records.len());
    let last = records.len().saturating_sub(1);
    for (i, rec) in records.iter().enumerate() {
        let tail = i == last;
        match parse_result(&header, rec) {
            Ok(_) if tail && !text.ends_with('\n') => {}
            Ok(r) => rows.push(r),
            Err(_) if tail => {}
            Err(e) => return Err(e),
        }
    }
    Ok(rows)
}

pub fn read_results_jsonl(text: &str) -> Result<Vec<ResultRow>> {
    let lines: Vec<&str> = text.split_inclusive('\n').collect();
    let mut rows = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if !line.ends_with('\n') {
            break;
        }
        match serde_json::from_str::<ResultRow>(line.trim_end()) {
            Ok(r) => rows.push(r),
            Err(_) if i + 1 == lines.len() => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(rows)
}

pub fn write_result_header<W: Write>(w: &mut W, format: Format, with_aux: bool) -> Result<()> {
    if format == Format::Csv {
        let mut cw = csv::Writer::from_writer(w);
        cw.write_record(result_header(with_aux))?;
        cw.flush()?;
    }
    Ok(())
}

pub fn write_result_row<W: Write>(w: &mut W, row: &ResultRow, format: Format, with_aux: bool) -> Result<()> {
    match format {
        Format::Csv => {
            let mut cw = csv::Writer::from_writer(&mut *w);
            cw.write_record(result_record(row, with_aux))?;
            cw.flush()?;
        }
        Format::Json => {
            serde_json::to_writer(&mut *w, row)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_results<W: Write>(w: &mut W, rows: &[ResultRow], format: Format, with_aux: bool) -> Result<()> {
    write_result_header(w, format, with_aux)?;
    for r in rows {
        write_result_row(w, r, format, with_aux)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Empirical,
    Theory,
}

impl Source {
    fn as_str(self) -> &'static str {
        match self {
            Source::Empirical => "empirical",
            Source::Theory => "theory",
        }
    }
}

/// One recorded step. Theory curves have no training loss.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryRow {
    pub step: usize,
    pub train_loss: Option<f64>,
    pub gen_loss: Option<f64>,
    pub gen_loss_stderr: Option<f64>,
    pub singular_values: Vec<f64>,
    pub source: Source,
}

pub fn empirical_rows(t: &Trajectory, k: usize) -> Vec<TrajectoryRow> {
    (0..t.len())
        .map(|i| TrajectoryRow {
            step: t.times[i],
            train_loss: Some(t.train_loss[i]),
            gen_loss: Some(t.gen_loss[i]),
            gen_loss_stderr: Some(t.gen_loss_stderr[i]),
            singular_values: t.singular_values[i].iter().take(k).copied().collect(),
            source: Source::Empirical,
        })
        .collect()
}

pub fn theory_rows(t: &TaTrajectory, k: usize) -> Vec<TrajectoryRow> {
    (0..t.len())
        .map(|i| TrajectoryRow {
            step: t.times[i],
            train_loss: None,
            gen_loss: t.gen_loss.get(i).copied(),
            gen_loss_stderr: t.gen_loss_stderr.get(i).copied(),
            singular_values: t.states[i].iter().take(k).copied().collect(),
            source: Source::Theory,
        })
        .collect()
}

/// `step, train_loss, gen_loss, gen_loss_stderr, s_1..s_k, source`.
pub fn write_trajectory<W: Write>(w: &mut W, rows: &[TrajectoryRow], format: Format) -> Result<()> {
    match format {
        Format::Csv => {
            let k = rows.iter().map(|r| r.singular_values.len()).max().unwrap_or(0);
            let mut cw = csv::Writer::from_writer(w);
            let mut header: Vec<String> = ["step", "train_loss", "gen_loss", "gen_loss_stderr"].map(String::from).to_vec();
            header.extend((1..=k).map(|i| format!("s_{i}")));
            header.push("source".into());
            cw.write_record(&header)?;
            for r in rows {
                let mut rec = vec![
                    r.step.to_string(),
                    opt(r.train_loss.map(fmt_f64)),
                    opt(r.gen_loss.map(fmt_f64)),
                    opt(r.gen_loss_stderr.map(fmt_f64)),
                ];
                rec.extend((0..k).map(|i| opt(r.singular_values.get(i).map(|&s| fmt_f64(s)))));
                rec.push(r.source.as_str().into());
                cw.write_record(&rec)?;
            }
            cw.flush()?;
        }
        Format::Json => {
            serde_json::to_writer_pretty(&mut *w, rows)?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}
