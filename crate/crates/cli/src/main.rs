use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hibbo::benchmarks::{shape_dataset, Family, ShapeKind};
use hibbo::bo::{run_observed, Method};
use hibbo::config::{parse_seed_list, record_file_name, ExperimentConfig};
use hibbo::fig2::{fig2_rows, write_fig2_csv, DEFAULT_FIG2_ORDER};
use hibbo::pgm::{write_index, IndexEntry, PgmImage};
use hibbo::record::RecordLine;
use hibbo::report::write_report;
use hibbo::rng::SeededRng;
use hibbo::{selftest, Error};
use log::{error, info};
use rayon::prelude::*;

#[derive(Parser)]
#[command(name = "hibbo", version, about = "Latent-space Bayesian optimization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (method, seed) pair of an experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `out_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seeds, e.g. `0,1,2` or `0..5`; overrides `seeds` in the config.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Overwrite existing record files.
        #[arg(long)]
        force: bool,
    },
    /// Write sequence-pair demo data (sequences, memories, distance, kernels) as CSV.
    Fig2 {
        /// Family such as `sin-tanh`; repeat for several. Defaults to all six.
        #[arg(long)]
        family: Vec<String>,
        #[arg(long, default_value = "0")]
        seeds: String,
        #[arg(long, default_value_t = DEFAULT_FIG2_ORDER)]
        order: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Summarize a directory of run records into report.csv and summary.txt.
    Report { dir: PathBuf },
    /// Run the built-in invariant checks.
    Selftest,
    /// Save a generated shape dataset as PGM images plus index.csv.
    Shapes {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        side: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        force: bool,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::ConfigInvalid(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HIBBO_LOG_LEVEL", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            out,
            seeds,
            jobs,
            force,
        } => cmd_run(&config, out, seeds.as_deref(), jobs, force),
        Command::Fig2 {
            family,
            seeds,
            order,
            out,
            force,
        } => cmd_fig2(&family, &seeds, order, &out, force),
        Command::Report { dir } => cmd_report(&dir),
        Command::Selftest => cmd_selftest(),
        Command::Shapes {
            out,
            count,
            side,
            seed,
            force,
        } => cmd_shapes(&out, count, side, seed, force),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn refuse_existing(path: &Path, force: bool) -> Result<(), Error> {
    if !force && path.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::AlreadyExists,
            format!("{} exists; pass --force to overwrite", path.display()),
        )));
    }
    Ok(())
}

/// Writes `bytes` through a `.partial` sibling and renames it into place.
fn write_atomically(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    let partial = partial_path(path);
    fs::write(&partial, bytes)?;
    fs::rename(&partial, path)?;
    Ok(())
}

fn partial_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".partial");
    PathBuf::from(s)
}

fn cmd_run(
    config_path: &Path,
    out: Option<PathBuf>,
    seeds: Option<&str>,
    jobs: usize,
    force: bool,
) -> Result<u8, Error> {
    let text = fs::read_to_string(config_path)
        .map_err(|e| Error::ConfigInvalid(format!("cannot read {}: {e}", config_path.display())))?;
    let mut cfg = ExperimentConfig::from_toml(&text)?;
    if let Some(s) = seeds {
        cfg.seeds = parse_seed_list(s)?;
        cfg.validate()?;
    }
    let out = out
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| Error::ConfigInvalid("no output directory: pass --out or set `out_dir`".into()))?;
    if jobs == 0 {
        return Err(Error::ConfigInvalid("--jobs must be at least 1".into()));
    }
    fs::create_dir_all(&out)?;
    let runs = cfg.runs();
    for &(m, s) in &runs {
        let path = out.join(record_file_name(m, s));
        refuse_existing(&path, force)?;
        let partial = partial_path(&path);
        if partial.exists() {
            refuse_existing(&partial, force)?;
            fs::remove_file(&partial)?;
        }
    }
    let hash = cfg.hash();
    info!("config hash {hash}: {} runs into {}", runs.len(), out.display());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    let results: Vec<Result<(), Error>> = pool.install(|| {
        runs.par_iter()
            .map(|&(m, s)| run_one(&cfg, &hash, m, s, &out))
            .collect()
    });
    let mut failed = 0;
    for (&(m, s), r) in runs.iter().zip(&results) {
        if let Err(e) = r {
            error!("{m} seed {s}: {e}");
            failed += 1;
        }
    }
    if failed > 0 {
        error!("{failed} of {} runs failed; their .partial files were kept", runs.len());
        return Ok(1);
    }
    Ok(0)
}

fn run_one(cfg: &ExperimentConfig, hash: &str, method: Method, seed: u64, out: &Path) -> Result<(), Error> {
    let path = out.join(record_file_name(method, seed));
    let partial = partial_path(&path);
    let file = OpenOptions::new().write(true).create_new(true).open(&partial)?;
    let mut w = BufWriter::new(file);
    let problem = cfg.problem.build(seed)?;
    let bo = cfg.run_config(method, seed);
    info!("{method} seed {seed}: {} (dim {})", problem.name(), problem.dim());
    let mut observer = |line: &RecordLine| -> Result<(), Error> {
        let json = match line {
            RecordLine::Header(h) => {
                let mut h = h.clone();
                h.config_hash = hash.to_string();
                RecordLine::Header(h).to_json()
            }
            other => other.to_json(),
        };
        writeln!(w, "{json}")?;
        w.flush()?;
        Ok(())
    };
    let outcome = run_observed(&problem, &bo, &mut observer)?;
    w.into_inner().map_err(|e| Error::Io(e.into_error()))?.sync_all()?;
    fs::rename(&partial, &path)?;
    info!(
        "{method} seed {seed}: best {:.6} after {} evaluations",
        outcome.record.final_best(),
        outcome.record.queries.len()
    );
    Ok(())
}

fn cmd_fig2(families: &[String], seeds: &str, order: usize, out: &Path, force: bool) -> Result<u8, Error> {
    let families: Vec<Family> = if families.is_empty() {
        Family::ALL.iter().map(|f| f.parse()).collect::<Result<_, _>>()?
    } else {
        families.iter().map(|f| f.parse()).collect::<Result<_, _>>()?
    };
    if order == 0 {
        return Err(Error::ConfigInvalid("--order must be at least 1".into()));
    }
    let seeds = parse_seed_list(seeds)?;
    refuse_existing(out, force)?;
    let mut rows = Vec::new();
    for f in &families {
        for &s in &seeds {
            rows.extend(fig2_rows(*f, s, order)?);
        }
    }
    let mut buf = Vec::new();
    write_fig2_csv(&rows, &mut buf)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_atomically(out, &buf)?;
    info!("wrote {} rows to {}", rows.len(), out.display());
    Ok(0)
}

fn cmd_report(dir: &Path) -> Result<u8, Error> {
    let summary = write_report(dir)?;
    for m in &summary.methods {
        println!(
            "{:<10} runs {:>3}  final median {:.6}  IQR [{:.6}, {:.6}]",
            m.method, m.runs, m.final_best.median, m.final_best.q1, m.final_best.q3
        );
    }
    println!("best method: {}", summary.best_method);
    Ok(0)
}

fn cmd_selftest() -> Result<u8, Error> {
    let results = selftest::run_all();
    let mut failed = 0;
    for r in &results {
        let tag = if r.passed { "PASS" } else { "FAIL" };
        println!("{tag} {} ({}; {:.2}s)", r.name, r.detail, r.seconds);
        failed += usize::from(!r.passed);
    }
    println!("{} of {} checks passed", results.len() - failed, results.len());
    Ok(u8::from(failed > 0))
}

fn cmd_shapes(out: &Path, count: usize, side: usize, seed: u64, force: bool) -> Result<u8, Error> {
    if side < 8 || count == 0 {
        return Err(Error::ConfigInvalid("--side must be >= 8 and --count >= 1".into()));
    }
    fs::create_dir_all(out)?;
    let index_path = out.join("index.csv");
    refuse_existing(&index_path, force)?;
    let (images, kinds) = shape_dataset(side, count, &mut SeededRng::new(seed).split("shapes"));
    let mut entries = Vec::with_capacity(count);
    for (i, (row, kind)) in images.row_iter().zip(&kinds).enumerate() {
        let file = format!("shape_{i:04}.pgm");
        let img = PgmImage::from_unit(side, side, row)?;
        let path = out.join(&file);
        refuse_existing(&path, force)?;
        let mut w = BufWriter::new(File::create(&path)?);
        img.write_to(&mut w)?;
        w.flush()?;
        entries.push(IndexEntry {
            file,
            kind: ShapeKind::as_str(*kind).to_string(),
            area: hibbo::benchmarks::lit_fraction(row),
        });
    }
    write_atomically(&index_path, write_index(&entries).as_bytes())?;
    info!("wrote {count} shapes to {}", out.display());
    Ok(0)
}
