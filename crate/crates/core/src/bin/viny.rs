use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Parser;
use viny::exprunner::cli::{exit_code, Cli, Command, EXIT_CELLS_FAILED, EXIT_EMPTY};
use viny::exprunner::plan::data_root_from_env;
use viny::exprunner::{emit_plot, emit_table, plan_cells, run_grid, ExperimentPlan, GridOptions, Store};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            let typed = e.chain().find_map(|c| c.downcast_ref::<viny::Error>());
            let (category, code) = typed.map_or(("internal", 1), |t| (t.category(), exit_code(t)));
            eprintln!("error[{category}]: {e:#}");
            ExitCode::from(code)
        }
    }
}

fn reports_dir(store: &Path, out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| store.join("reports"))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn dispatch(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Run {
            plan,
            resume,
            data_root,
            out,
            seed,
            dry_run,
            jobs,
        } => {
            let mut p = ExperimentPlan::load(&plan)?;
            if let Some(s) = seed {
                p.seed = s;
            }
            if let Some(root) = data_root.or_else(data_root_from_env) {
                p.resolve_paths(&root);
            }
            let out = out.unwrap_or_else(|| PathBuf::from("runs").join(&p.name));
            if dry_run {
                let existing = Store::open_existing(&out).ok();
                let cells = plan_cells(&p);
                println!("{} cells", cells.len());
                for c in &cells {
                    let done = match &existing {
                        Some(s) => s.is_complete(&c.config_hash)?,
                        None => false,
                    };
                    let status = if done { "complete" } else { "pending" };
                    println!("{:<24} {} {status}", c.key.to_string(), &c.config_hash[..12]);
                }
                return Ok(0);
            }
            let store = Store::open(&out)?;
            write(
                &out.join("plan.toml"),
                &toml::to_string(&p).context("serializing plan")?,
            )?;
            let summary = run_grid(&p, &store, GridOptions { resume, jobs })?;
            println!(
                "trained {} skipped {} failed {} locked {} (pre-training runs {}, intermediate runs {})",
                summary.trained,
                summary.skipped,
                summary.failed,
                summary.locked,
                summary.pretrain_runs,
                summary.intermediate_runs
            );
            println!("store: {}", out.display());
            Ok(if summary.failed > 0 { EXIT_CELLS_FAILED } else { 0 })
        }
        Command::Table { store, select, out } => {
            let s = Store::open_existing(&store)?;
            let (md, csv) = emit_table(&s, select)?;
            print!("{md}");
            let dir = reports_dir(&store, out);
            let name = format!("table-{}", format!("{select:?}").to_lowercase());
            write(&dir.join(format!("{name}.md")), &md)?;
            write(&dir.join(format!("{name}.csv")), &csv)?;
            Ok(0)
        }
        Command::Plot { store, kind, out } => {
            let s = Store::open_existing(&store)?;
            let plot = emit_plot(&s, kind)?;
            for w in &plot.warnings {
                log::warn!("{w}");
            }
            if plot.is_empty() {
                eprintln!("warning[empty]: no {} series to plot", kind.as_str());
                return Ok(EXIT_EMPTY);
            }
            let dir = reports_dir(&store, out);
            let svg = dir.join(format!("{}.svg", kind.as_str()));
            let csv = dir.join(format!("{}.csv", kind.as_str()));
            write(&svg, &plot.to_svg())?;
            write(&csv, &plot.to_csv())?;
            println!("{}\n{}", svg.display(), csv.display());
            Ok(0)
        }
        Command::Inspect { store, cell } => {
            let s = Store::open_existing(&store)?;
            let records = s.records()?;
            let by_key = cell.parse::<viny::exprunner::CellKey>().ok();
            let hits: Vec<_> = records
                .iter()
                .filter(|r| by_key.map_or_else(|| r.config_hash.starts_with(&cell), |k| r.key == k))
                .collect();
            if hits.is_empty() {
                return Err(viny::Error::Empty(format!("no record matches `{cell}`")).into());
            }
            for r in hits {
                println!("{}", serde_json::to_string_pretty(r).context("serializing record")?);
            }
            Ok(0)
        }
    }
}
