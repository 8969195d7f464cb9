//! Grid sweeps: every cell times every seed, run on a worker pool, appended
//! to one results file and resumable after interruption.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Coordinates, ExperimentConfig};
use crate::experiment::{run_single, ResultRow, RowStatus};
use crate::output::{read_results_csv, read_results_jsonl, write_result_row, write_results, Format};
use crate::{version_stamp, HarnessError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Default)]
pub struct SweepOptions {
    pub out_dir: PathBuf,
    pub format: Format,
    /// Worker threads; `None` uses every core.
    pub jobs: Option<usize>,
    /// Stop after this many new rows, leaving the sweep resumable.
    pub max_new_rows: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SweepCounts {
    pub expected: usize,
    pub rows: usize,
    pub ok: usize,
    pub diverged: usize,
    pub failed: usize,
    pub pending: usize,
    pub resumed: usize,
}

#[derive(Debug, Clone)]
pub struct SweepSummary {
    pub counts: SweepCounts,
    pub results_path: PathBuf,
    pub metadata_path: PathBuf,
}

#[derive(Serialize)]
struct Metadata<'a> {
    schema_version: u32,
    version: String,
    name: &'a str,
    master_seed: u64,
    seeds: &'a [u64],
    config: &'a ExperimentConfig,
    counts: &'a SweepCounts,
    started_unix: u64,
    elapsed_seconds: f64,
    record_every: usize,
    notes: Vec<&'static str>,
}

pub fn results_path(dir: &Path, format: Format) -> PathBuf {
    dir.join(format!("results.{}", format.extension()))
}

pub fn metadata_path(dir: &Path) -> PathBuf {
    dir.join("results.meta.json")
}

type Key = (u64, u64, u64, usize, usize, u64);

fn key(c: &Coordinates, seed: u64) -> Key {
    (c.relatedness.to_bits(), c.s_bar_a.to_bits(), c.s_bar_b.to_bits(), c.n_data, c.n_data_aux, seed)
}

fn read_existing(path: &Path, format: Format) -> Result<Vec<ResultRow>> {
    if !path.exists() {
        return Ok(vec![]);
    }
    let text = std::fs::read_to_string(path)?;
    if text.is_empty() {
        return Ok(vec![]);
    }
    match format {
        Format::Csv => read_results_csv(&text),
        Format::Json => read_results_jsonl(&text),
    }
}

fn write_atomic(path: &Path, rows: &[ResultRow], format: Format, with_aux: bool) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        write_results(&mut w, rows, format, with_aux)?;
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn run_sweep(cfg: &ExperimentConfig, opts: &SweepOptions) -> Result<SweepSummary> {
    cfg.validate()?;
    let started = Instant::now();
    let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    std::fs::create_dir_all(&opts.out_dir)?;
    let path = results_path(&opts.out_dir, opts.format);
    let with_aux = cfg.grid.n_data_aux.is_some();

    let cells = cfg.cells();
    let jobs: Vec<(usize, usize)> =
        (0..cells.len()).flat_map(|i| (0..cfg.seeds.len()).map(move |j| (i, j))).collect();
    let order: HashMap<Key, usize> =
        jobs.iter().enumerate().map(|(n, &(i, j))| (key(&cells[i], cfg.seeds[j]), n)).collect();

    // Keep only rows that belong to this grid, then start a clean append.
    let mut done: HashMap<Key, ResultRow> = HashMap::new();
    for row in read_existing(&path, opts.format)? {
        let k = key(&row.coords, row.seed);
        if order.contains_key(&k) {
            done.insert(k, row);
        }
    }
    let resumed = done.len();
    let mut kept: Vec<ResultRow> = done.values().cloned().collect();
    kept.sort_by_key(|r| order[&key(&r.coords, r.seed)]);
    write_atomic(&path, &kept, opts.format, with_aux)?;

    let mut todo: Vec<(usize, usize)> =
        jobs.iter().copied().filter(|&(i, j)| !done.contains_key(&key(&cells[i], cfg.seeds[j]))).collect();
    if let Some(m) = opts.max_new_rows {
        todo.truncate(m);
    }

    let file = OpenOptions::new().append(true).open(&path)?;
    let writer = Mutex::new(BufWriter::new(file));
    let new_rows: Mutex<Vec<ResultRow>> = Mutex::new(Vec::with_capacity(todo.len()));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.unwrap_or(0))
        .build()
        .map_err(|e| HarnessError::Config(format!("cannot start worker pool: {e}")))?;
    let write_err: Mutex<Option<HarnessError>> = Mutex::new(None);
    pool.install(|| {
        todo.par_iter().for_each(|&(i, j)| {
            let row = run_single(cfg, &cells[i], cfg.seeds[j]);
            let mut w = writer.lock().expect("writer lock");
            if let Err(e) = write_result_row(&mut *w, &row, opts.format, with_aux) {
                write_err.lock().expect("error lock").get_or_insert(e);
            }
            drop(w);
            new_rows.lock().expect("rows lock").push(row);
        })
    });
    writer.into_inner().expect("writer lock").flush()?;
    if let Some(e) = write_err.into_inner().expect("error lock") {
        return Err(e);
    }

    let mut all = kept;
    all.extend(new_rows.into_inner().expect("rows lock"));
    all.sort_by_key(|r| order[&key(&r.coords, r.seed)]);
    write_atomic(&path, &all, opts.format, with_aux)?;

    let count = |s: RowStatus| all.iter().filter(|r| r.status == s).count();
    let counts = SweepCounts {
        expected: jobs.len(),
        rows: all.len(),
        ok: count(RowStatus::Ok),
        diverged: count(RowStatus::Diverged),
        failed: count(RowStatus::Failed),
        pending: jobs.len() - all.len(),
        resumed,
    };
    let meta = Metadata {
        schema_version: SCHEMA_VERSION,
        version: version_stamp(),
        name: &cfg.name,
        master_seed: cfg.master_seed,
        seeds: &cfg.seeds,
        config: cfg,
        counts: &counts,
        started_unix,
        elapsed_seconds: started.elapsed().as_secs_f64(),
        record_every: cfg.train.record_every,
        notes: vec![
            "teacher noise and datasets are resampled for every seed",
            "minima are taken over recorded steps only",
            "ok rows = expected - diverged - failed - pending",
        ],
    };
    let metadata_path = metadata_path(&opts.out_dir);
    std::fs::write(&metadata_path, serde_json::to_vec_pretty(&meta)?)?;
    Ok(SweepSummary { counts, results_path: path, metadata_path })
}
