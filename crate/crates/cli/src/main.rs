use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use mmwave_mac::calibrate::{calibrate, CalibrationSpec};
use mmwave_mac::engine::{self, MacKind, RunConfig, RunOutput};
use mmwave_mac::golden::{run_golden, Script};
use mmwave_mac::metrics::{write_csv, ReplicationRow, ReportRow};
use mmwave_mac::presets;
use mmwave_mac::Error;

#[derive(Parser)]
#[command(name = "macsim", version, about = "Sub-6GHz-assisted mmWave MAC simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one (mac, r_tx) configuration with replications.
    Run(RunArgs),
    /// Run every combination of MACs and transmitter ratios.
    Sweep(SweepArgs),
    /// Replay a scripted example and diff it against the expected result.
    Golden(GoldenArgs),
    /// Calibrate the mmWave range to a mean LOS-neighbor count.
    Calibrate(CalibrateArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
    Ndjson,
}

#[derive(Args)]
struct Common {
    /// Preset name or path to a preset file.
    #[arg(long, default_value = "paper-highway-125")]
    preset: String,
    /// Base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Maximum number of replications.
    #[arg(long)]
    replications: Option<usize>,
    /// Target relative CI half-width.
    #[arg(long)]
    target_ci: Option<f64>,
    /// Override a preset key, e.g. --set scenario.road_length=1000.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [Format::Csv, Format::Json])]
    format: Vec<Format>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_parser = parse_mac)]
    mac: Option<MacKind>,
    #[arg(long)]
    rtx: Option<f64>,
    /// Cap on the ndjson trace of the first replication.
    #[arg(long, default_value_t = 100_000)]
    max_trace_events: usize,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_parser = parse_mac, value_delimiter = ',', default_value = "assisted,ref-ad")]
    mac: Vec<MacKind>,
    #[arg(long, value_delimiter = ',', default_value = "0.15,0.2,0.25,0.3,0.35,0.4")]
    rtx: Vec<f64>,
}

#[derive(Args)]
struct GoldenArgs {
    /// fig2 or fig3.
    name: String,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 100_000)]
    max_trace_events: usize,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long, default_value = "paper-highway-125")]
    preset: String,
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, default_value_t = 10)]
    seeds: usize,
    #[arg(long, default_value_t = 5.5)]
    target: f64,
    #[arg(long, default_value_t = 0.1)]
    tolerance: f64,
    /// Preset file to update; defaults to the preset's own file if it has one.
    #[arg(long)]
    write: Option<PathBuf>,
}

fn parse_mac(s: &str) -> Result<MacKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load_config(common: &Common, extra: Vec<String>) -> anyhow::Result<RunConfig> {
    let cfg = presets::load(&common.preset)?;
    let mut sets = common.overrides.clone();
    sets.extend(extra);
    if let Some(s) = common.seed {
        sets.push(format!("scenario.seed={s}"));
    }
    if let Some(r) = common.replications {
        sets.push(format!("run.replications={r}"));
        sets.push(format!("run.min_replications={}", cfg.run.min_replications.min(r)));
    }
    if let Some(t) = common.target_ci {
        sets.push(format!("run.target_ci={t}"));
    }
    Ok(presets::apply_overrides(&cfg, &sets)?)
}

fn create(dir: &Path, name: &str) -> anyhow::Result<BufWriter<File>> {
    let p = dir.join(name);
    Ok(BufWriter::new(
        File::create(&p).with_context(|| format!("cannot create {}", p.display()))?,
    ))
}

fn print_rows(rows: &[ReportRow]) {
    let f = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.1}"));
    println!(
        "{:<9} {:>5} {:>4} {:>14} {:>8} {:>8} {:>7} {:>7} {:>7} {:>9} {:>8} {:>7}",
        "mac", "r_tx", "reps", "sched_ratio", "d1_ms", "d5_ms", "k=0", "k=1", "k>=2", "ovh_B", "ctl_t", "dCBR"
    );
    for r in rows {
        println!(
            "{:<9} {:>5.2} {:>4} {:>7.3}±{:<6.3} {:>8} {:>8} {:>6.1}% {:>6.1}% {:>6.1}% {:>9.1} {:>7.2}% {:>7}",
            r.mac,
            r.r_tx,
            r.replications,
            r.scheduled_ratio.unwrap_or(f64::NAN),
            r.scheduled_ratio_ci.unwrap_or(f64::NAN),
            f(r.delay1_ms),
            f(r.delay5_ms),
            100.0 * r.share_k0,
            100.0 * r.share_k1,
            100.0 * (r.share_k2 + r.share_k3 + r.share_k4plus),
            r.overhead_round_bytes,
            100.0 * r.control_time_fraction,
            r.cbr_delta.map_or("-".to_string(), |d| format!("{:.2}%", 100.0 * d)),
        );
    }
}

fn write_run(out: &RunOutput, dir: &Path, formats: &[Format], tag: &str) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    if formats.contains(&Format::Json) {
        std::fs::write(dir.join(format!("report{tag}.json")), out.report.to_json()?)?;
    }
    if formats.contains(&Format::Csv) {
        let rows: Vec<ReplicationRow> = out
            .replications
            .iter()
            .enumerate()
            .map(|(k, m)| ReplicationRow::new(k, m))
            .collect();
        write_csv(create(dir, &format!("replications{tag}.csv"))?, &rows)?;
        out.first.ledger.write_csv(create(dir, &format!("ledger{tag}.csv"))?)?;
        if out.config.run.mac == MacKind::Assisted {
            out.first
                .ledger
                .beacon_log
                .write_csv(create(dir, &format!("beacons{tag}.csv"))?)?;
        }
    }
    if formats.contains(&Format::Ndjson) && out.first.log.is_enabled() {
        out.first
            .log
            .write_ndjson(create(dir, &format!("trace{tag}.ndjson"))?)?;
    }
    Ok(())
}

fn cmd_run(args: RunArgs) -> anyhow::Result<bool> {
    let mut extra = Vec::new();
    if let Some(m) = args.mac {
        extra.push(format!("run.mac=\"{}\"", m.as_str()));
    }
    if let Some(r) = args.rtx {
        extra.push(format!("run.r_tx={r}"));
    }
    let cfg = load_config(&args.common, extra)?;
    let trace = args
        .common
        .format
        .contains(&Format::Ndjson)
        .then_some(Some(args.max_trace_events));
    let out = engine::run(&cfg, trace)?;
    print_rows(&[out.report.table_row()]);
    if let Some(dir) = &args.common.out {
        write_run(&out, dir, &args.common.format, "")?;
        info!("results written to {}", dir.display());
    }
    Ok(true)
}

fn cmd_sweep(args: SweepArgs) -> anyhow::Result<bool> {
    let base = load_config(&args.common, Vec::new())?;
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for &mac in &args.mac {
        for &r_tx in &args.rtx {
            let mut cfg = base.clone();
            cfg.run.mac = mac;
            cfg.run.r_tx = r_tx;
            cfg.validate()?;
            let out = engine::run(&cfg, None)
                .with_context(|| format!("sweep cell mac={} r_tx={r_tx} failed", mac.as_str()))?;
            eprintln!("done {} r_tx={r_tx}", mac.as_str());
            rows.push(out.report.table_row());
            if let Some(dir) = &args.common.out {
                write_run(&out, dir, &args.common.format, &format!("-{}-{r_tx}", mac.as_str()))?;
            }
            reports.push(out.report);
        }
    }
    print_rows(&rows);
    if let Some(dir) = &args.common.out {
        std::fs::create_dir_all(dir)?;
        write_csv(create(dir, "sweep.csv")?, &rows)?;
        std::fs::write(dir.join("sweep.json"), serde_json_pretty(&reports)?)?;
    }
    Ok(true)
}

fn serde_json_pretty<T: serde::Serialize>(v: &T) -> anyhow::Result<String> {
    Ok(serde_json::to_string_pretty(v)?)
}

fn cmd_golden(args: GoldenArgs) -> anyhow::Result<bool> {
    let script: Script = args.name.parse()?;
    let started = std::time::Instant::now();
    let report = run_golden(script, Some(args.max_trace_events))?;
    println!("golden {} ({} ms)", script.name(), started.elapsed().as_millis());
    for c in &report.checks {
        println!("  {c}");
    }
    if !report.diff.is_empty() {
        print!("{}", report.diff);
    }
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)?;
        report
            .ledger
            .write_csv(create(dir, &format!("golden-{}-ledger.csv", script.name()))?)?;
        report
            .log
            .write_ndjson(create(dir, &format!("golden-{}-trace.ndjson", script.name()))?)?;
    }
    println!("{}", if report.passed { "PASS" } else { "FAIL" });
    Ok(report.passed)
}

fn cmd_calibrate(args: CalibrateArgs) -> anyhow::Result<bool> {
    let cfg = presets::apply_overrides(&presets::load(&args.preset)?, &args.overrides)?;
    let spec = CalibrationSpec {
        target: args.target,
        tolerance: args.tolerance,
        seeds: args.seeds,
        ..CalibrationSpec::default()
    };
    if spec.seeds < 10 {
        bail!("calibration needs at least 10 seeds");
    }
    let cal = calibrate(&cfg.scenario, &spec)?;
    for (r, m) in &cal.probes {
        println!("  range {r:>9.4} m -> {m:.4}");
    }
    println!(
        "mmwave_los_range = {:.4} (mean {:.4} LOS neighbors, {} probes)",
        cal.range, cal.mean_neighbors, cal.iterations
    );
    let target = args.write.or_else(|| presets::preset_path(&args.preset));
    match target {
        Some(p) => {
            if !p.exists() {
                std::fs::write(&p, presets::to_toml(&cfg)?)?;
            }
            presets::write_key(&p, "scenario", "mmwave_los_range", toml_float(cal.range))?;
            println!("updated {}", p.display());
        }
        None => println!("built-in preset not modified; pass --write <file> to save"),
    }
    Ok(true)
}

fn toml_float(x: f64) -> toml::Value {
    toml::Value::Float((x * 1e4).round() / 1e4)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Golden(a) => cmd_golden(a),
        Command::Calibrate(a) => cmd_calibrate(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Error>() {
                Some(Error::Config(_)) | Some(Error::Preset(_)) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
