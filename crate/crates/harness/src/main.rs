use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mtldyn::cache::{cache_dir, cache_path};
use mtldyn::config::{Coordinates, ExperimentConfig};
use mtldyn::experiment::{build_tasks, gcache_for, run_single, theory_single_task, train_single_task};
use mtldyn::output::{empirical_rows, fmt_f64, theory_rows, write_results, write_trajectory, Format};
use mtldyn::sweep::{run_sweep, SweepOptions};
use mtldyn::validate::quick_suite;
use mtldyn::{HarnessError, Result};
use mtldyn_core::RngSeed;

#[derive(Parser)]
#[command(name = "mtldyn", version, about = "Teacher-student multitask learning dynamics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run only this seed instead of the config's list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = FormatArg::Csv)]
    format: FormatArg,
    /// Worker threads for sweeps.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Draw the teacher pairs and report their singular values.
    GenTeachers,
    /// Train single-task students and write their trajectories.
    Train,
    /// Integrate the aligned singular-value dynamics (theory curves).
    Integrate,
    /// Compute the multitask benefit for every cell and seed.
    Benefit,
    /// Run the full grid with resumable output.
    Sweep,
    /// Build the tabulated g curves into MTLDYN_CACHE_DIR.
    Gcache,
    /// Run the invariant checks.
    Validate,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

impl From<FormatArg> for Format {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => Format::Csv,
            FormatArg::Json => Format::Json,
        }
    }
}

fn load(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli.config.as_deref().ok_or_else(|| HarnessError::Config("--config is required".into()))?;
    ExperimentConfig::load(path)
}

fn seeds(cli: &Cli, cfg: &ExperimentConfig) -> Vec<u64> {
    cli.seed.map(|s| vec![s]).unwrap_or_else(|| cfg.seeds.clone())
}

fn jobs(cli: &Cli, cfg: &ExperimentConfig) -> Vec<(usize, Coordinates, u64)> {
    let seeds = seeds(cli, cfg);
    cfg.cells()
        .into_iter()
        .enumerate()
        .flat_map(|(i, c)| seeds.iter().map(move |&s| (i, c, s)))
        .collect()
}

fn sink(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            Box::new(BufWriter::new(File::create(p)?))
        }
        None => Box::new(BufWriter::new(std::io::stdout())),
    })
}

fn out_dir(cli: &Cli, default: &str) -> Result<PathBuf> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from(default));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn gen_teachers(cli: &Cli) -> Result<()> {
    let cfg = load(cli)?;
    let mut w = csv::Writer::from_writer(sink(cli.out.as_deref())?);
    if matches!(cli.format, FormatArg::Csv) {
        w.write_record(["relatedness", "s_bar_a", "s_bar_b", "seed", "task", "mode", "s_bar", "s_hat", "label_flip_rate"])?;
    }
    let mut json = Vec::new();
    for (_, c, seed) in jobs(cli, &cfg) {
        let tasks = build_tasks(&cfg, &c, seed)?;
        let pairs = [("a", &tasks.teacher_a, &tasks.noisy_a, &tasks.data_a), ("b", &tasks.teacher_b, &tasks.noisy_b, &tasks.data_b)];
        for (task, t, nt, d) in pairs {
            for (m, s_bar) in t.svd.s.iter().enumerate() {
                let s_hat = nt.aligned_svd.s[m];
                let rec = [
                    fmt_f64(c.relatedness),
                    fmt_f64(c.s_bar_a),
                    fmt_f64(c.s_bar_b),
                    seed.to_string(),
                    task.into(),
                    (m + 1).to_string(),
                    fmt_f64(*s_bar),
                    fmt_f64(s_hat),
                    fmt_f64(d.label_flip_rate()),
                ];
                json.push(serde_json::json!({
                    "coords": c, "seed": seed, "task": task, "mode": m + 1,
                    "s_bar": s_bar, "s_hat": s_hat, "label_flip_rate": d.label_flip_rate(),
                }));
                if matches!(cli.format, FormatArg::Csv) {
                    w.write_record(&rec)?;
                }
            }
        }
    }
    if matches!(cli.format, FormatArg::Json) {
        let mut inner = w.into_inner().map_err(|e| HarnessError::Io(e.into_error()))?;
        serde_json::to_writer_pretty(&mut inner, &json)?;
        inner.write_all(b"\n")?;
        inner.flush()?;
    } else {
        w.flush()?;
    }
    Ok(())
}

fn trajectories(cli: &Cli, theory: bool) -> Result<()> {
    let cfg = load(cli)?;
    let format = Format::from(cli.format);
    let dir = out_dir(cli, ".")?;
    let k = cfg.teacher.rank;
    let prefix = if theory { "integrate" } else { "train" };
    for (i, c, seed) in jobs(cli, &cfg) {
        let rows = if theory {
            theory_rows(&theory_single_task(&cfg, &c, seed)?, k)
        } else {
            empirical_rows(&train_single_task(&cfg, &c, seed)?, k)
        };
        let ext = if format == Format::Csv { "csv" } else { "json" };
        let path = dir.join(format!("{prefix}-cell{i}-seed{seed}.{ext}"));
        let mut w = BufWriter::new(File::create(&path)?);
        write_trajectory(&mut w, &rows, format)?;
        w.flush()?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn benefit(cli: &Cli) -> Result<()> {
    let cfg = load(cli)?;
    let rows: Vec<_> = jobs(cli, &cfg).into_iter().map(|(_, c, s)| run_single(&cfg, &c, s)).collect();
    let mut w = sink(cli.out.as_deref())?;
    write_results(&mut w, &rows, cli.format.into(), cfg.grid.n_data_aux.is_some())?;
    w.flush()?;
    Ok(())
}

fn sweep(cli: &Cli) -> Result<()> {
    let mut cfg = load(cli)?;
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    let opts = SweepOptions { out_dir: out_dir(cli, "results")?, format: cli.format.into(), jobs: cli.jobs, max_new_rows: None };
    let summary = run_sweep(&cfg, &opts)?;
    let c = &summary.counts;
    eprintln!(
        "{} rows ({} ok, {} diverged, {} failed, {} resumed) -> {}",
        c.rows,
        c.ok,
        c.diverged,
        c.failed,
        c.resumed,
        summary.results_path.display()
    );
    Ok(())
}

fn gcache(cli: &Cli) -> Result<()> {
    let cfg = load(cli)?;
    let dir = cache_dir().ok_or_else(|| HarnessError::Config("set MTLDYN_CACHE_DIR to build g caches".into()))?;
    let s0 = match cfg.student.init {
        mtldyn::config::InitSection::TrainingAligned { s0 } => s0,
        _ => return Err(HarnessError::Config("g caches need training-aligned init".into())),
    };
    for (_, c, seed) in jobs(cli, &cfg) {
        let tasks = build_tasks(&cfg, &c, seed)?;
        for nt in [&tasks.noisy_a, &tasks.noisy_b] {
            let g = gcache_for(&cfg, nt, s0, seed)?;
            println!("{}", cache_path(&dir, &g.key).display());
        }
    }
    Ok(())
}

fn validate(cli: &Cli) -> Result<()> {
    let checks = quick_suite(RngSeed(cli.seed.unwrap_or(0)))?;
    let mut failed = 0;
    for c in &checks {
        println!("{c}");
        failed += usize::from(!c.passed);
    }
    if failed > 0 {
        return Err(HarnessError::Validation(format!("{failed} of {} checks failed", checks.len())));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let res = match cli.command {
        Command::GenTeachers => gen_teachers(&cli),
        Command::Train => trajectories(&cli, false),
        Command::Integrate => trajectories(&cli, true),
        Command::Benefit => benefit(&cli),
        Command::Sweep => sweep(&cli),
        Command::Gcache => gcache(&cli),
        Command::Validate => validate(&cli),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
