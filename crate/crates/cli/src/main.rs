use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use semfeed_core::experiment::{self, batch_summary, paired_deltas, write_csv, write_jsonl, RunReport, ScenarioConfig};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "semfeed", version, about = "Closed-loop anticipatory navigation and furniture carrying experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Conditions {
    On,
    Off,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario once.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "on")]
        anticipation: Switch,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run every scenario in a directory over a seed range, both conditions.
    Batch {
        #[arg(long)]
        scenarios: PathBuf,
        /// `a..b` (exclusive) or `a..=b`.
        #[arg(long, value_parser = parse_seeds)]
        seeds: SeedRange,
        #[arg(long, default_value_t = 1)]
        reps: u32,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        anticipation: Conditions,
    },
    /// Re-run a trace file and compare it line by line.
    Replay {
        #[arg(long)]
        trace: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq)]
struct SeedRange(Vec<u64>);

fn parse_seeds(s: &str) -> Result<SeedRange, String> {
    let (a, b, inclusive) = if let Some((a, b)) = s.split_once("..=") {
        (a, b, true)
    } else if let Some((a, b)) = s.split_once("..") {
        (a, b, false)
    } else {
        let n = s.trim().parse::<u64>().map_err(|e| format!("seed `{s}`: {e}"))?;
        return Ok(SeedRange(vec![n]));
    };
    let a: u64 = a.trim().parse().map_err(|e| format!("seed range start `{a}`: {e}"))?;
    let b: u64 = b.trim().parse().map_err(|e| format!("seed range end `{b}`: {e}"))?;
    let seeds: Vec<u64> = if inclusive { (a..=b).collect() } else { (a..b).collect() };
    if seeds.is_empty() {
        return Err(format!("empty seed range `{s}`"));
    }
    Ok(SeedRange(seeds))
}

fn print_report(r: &RunReport) {
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
    println!(
        "{} seed={} rep={} anticipation={} completed={} duration={:.2}s min_dist={} avg_dist={} placements={} trans_err={} ang_err={} digest={}",
        r.scenario,
        r.seed,
        r.rep,
        r.condition(),
        r.completed,
        r.duration,
        opt(r.min_safety_distance),
        opt(r.avg_safety_distance),
        r.placements.len(),
        opt(r.mean_translation_error),
        opt(r.mean_angular_error_deg),
        &r.digest[..12],
    );
}

fn write_reports(out: &Path, reports: &[RunReport]) -> Result<()> {
    write_csv(&out.join("report.csv"), reports)?;
    write_jsonl(&out.join("report.jsonl"), reports)?;
    Ok(())
}

fn cmd_run(scenario: &Path, seed: u64, anticipation: bool, out: &Path) -> Result<bool> {
    let s = ScenarioConfig::load(scenario).with_context(|| format!("loading {}", scenario.display()))?;
    std::fs::create_dir_all(out)?;
    let o = experiment::run(&s, seed, anticipation)?;
    o.write_trace(&out.join(experiment::trace_file_name(&s.id, seed, anticipation, 0)))?;
    write_reports(out, std::slice::from_ref(&o.report))?;
    print_report(&o.report);
    Ok(o.report.completed)
}

fn cmd_batch(dir: &Path, seeds: &[u64], reps: u32, out: &Path, conditions: Conditions) -> Result<bool> {
    let files = experiment::scenario_files(dir)?;
    if files.is_empty() {
        bail!("no scenario files in {}", dir.display());
    }
    let scenarios = files
        .iter()
        .map(|f| ScenarioConfig::load(f).with_context(|| format!("loading {}", f.display())))
        .collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(out)?;
    let mut reports = experiment::batch(&scenarios, seeds, reps, Some(out))?;
    reports.retain(|r| match conditions {
        Conditions::Both => true,
        Conditions::On => r.anticipation,
        Conditions::Off => !r.anticipation,
    });
    write_reports(out, &reports)?;
    for r in &reports {
        print_report(r);
    }
    for s in batch_summary(&reports) {
        println!("summary {} {} {} n={} {:.3} ± {:.3}", s.scenario, s.condition, s.metric, s.n, s.mean, s.std);
    }
    for d in paired_deltas(&reports) {
        println!("delta {} {} n={} {:+.3} ± {:.3}", d.scenario, d.metric, d.n, d.mean_delta, d.std_delta);
    }
    Ok(reports.iter().all(|r| r.completed))
}

fn cmd_replay(trace: &Path) -> Result<bool> {
    let r = experiment::replay(trace).with_context(|| format!("replaying {}", trace.display()))?;
    print_report(&r.report);
    match r.first_mismatch {
        None => println!("replay ok: {}", r.replayed_digest),
        Some(k) => println!("replay mismatch at line {k}: recorded {} replayed {}", r.recorded_digest, r.replayed_digest),
    }
    Ok(r.matches())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            scenario,
            seed,
            anticipation,
            out,
        } => cmd_run(&scenario, seed, anticipation == Switch::On, &out),
        Command::Batch {
            scenarios,
            seeds,
            reps,
            out,
            anticipation,
        } => cmd_batch(&scenarios, &seeds.0, reps, &out, anticipation),
        Command::Replay { trace } => cmd_replay(&trace),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
