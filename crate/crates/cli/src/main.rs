use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use oec_core::harness::{
    aggregate, run_seeds, write_breakdown_csv, write_csv, ExperimentResult, RunOptions, RunReport,
};
use oec_core::sim::ScenarioConfig;

/// Runs the latency / delivery experiment described by a scenario file.
#[derive(Debug, Parser)]
#[command(name = "oec-harness", version)]
struct Args {
    /// Scenario file (TOML).
    #[arg(long)]
    scenario: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Packets to publish.
    #[arg(long, default_value_t = 100)]
    packets: u32,
    /// Seconds between publishes.
    #[arg(long = "interval-s", default_value_t = 9.0)]
    interval_s: f64,
    /// Payload size per packet. Defaults to the scenario's value.
    #[arg(long = "message-bytes")]
    message_bytes: Option<usize>,
    /// Keep-alive period; 0 disables probing. Defaults to the scenario's value.
    #[arg(long = "keep-alive-s")]
    keep_alive_s: Option<f64>,
    /// Receiving node, by name. Defaults to the scenario's receiver.
    #[arg(long)]
    receiver: Option<String>,
    /// Per-packet CSV output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-packet latency decomposition CSV.
    #[arg(long)]
    breakdown: Option<PathBuf>,
    /// Independent runs with consecutive seeds, aggregated.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    runs: u32,
    /// Forward only to neighbors subscribed to the topic.
    #[arg(long = "strict-floodsub")]
    strict_floodsub: bool,
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn scenario(args: &Args) -> Result<ScenarioConfig, String> {
    let mut cfg = ScenarioConfig::load(&args.scenario).map_err(|e| e.to_string())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.packet_count = args.packets;
    cfg.send_interval_s = args.interval_s;
    if let Some(n) = args.message_bytes {
        cfg.message_size_bytes = n;
    }
    if let Some(k) = args.keep_alive_s {
        cfg.keep_alive_s = k;
    }
    if let Some(r) = &args.receiver {
        cfg.experiment.receiver = r.clone();
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

/// `out.csv` becomes `out-seed7.csv` when several runs share one path.
fn per_seed(path: &Path, seed: u64, runs: u32) -> PathBuf {
    if runs == 1 {
        return path.to_path_buf();
    }
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}-seed{seed}.{}", ext.to_string_lossy()),
        None => format!("{stem}-seed{seed}"),
    };
    path.with_file_name(name)
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<(), String> {
    let file = File::create(path).map_err(|e| format!("cannot write {}: {e}", path.display()))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(|e| format!("cannot write {}: {e}", path.display()))
}

fn fmt_ms(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.1} ms"))
}

fn summary(label: &str, seed: u64, r: &RunReport) {
    println!("{label} seed {seed}: sent {} delivered {} PDR {:.2}%", r.sent(), r.delivered, r.pdr);
    println!(
        "  mean latency {}  stddev {}  max {}{}",
        fmt_ms(r.mean_latency_ms),
        fmt_ms(r.final_stddev_ms()),
        fmt_ms(r.max_latency_ms),
        r.max_latency_index().map(|i| format!(" at packet {i}")).unwrap_or_default()
    );
}

fn run(args: &Args) -> Result<(), String> {
    let cfg = scenario(args)?;
    let opts = RunOptions { strict_floodsub: args.strict_floodsub };
    let seeds: Vec<u64> = (0..args.runs as u64).map(|i| cfg.seed.wrapping_add(i)).collect();
    // fail on an unwritable path before spending time on the runs
    for path in args.out.iter().chain(&args.breakdown) {
        let first = per_seed(path, seeds[0], args.runs);
        File::create(&first).map_err(|e| format!("cannot write {}: {e}", first.display()))?;
    }
    let results: Vec<ExperimentResult> =
        run_seeds(&cfg, &opts, &seeds).into_iter().collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    let label = if cfg.name.is_empty() { "scenario".to_string() } else { cfg.name.clone() };
    let label = format!("{label} [{}]", cfg.experiment.receiver);
    for (res, &seed) in results.iter().zip(&seeds) {
        summary(&label, seed, &res.report);
        if let Some(path) = &args.out {
            write_file(&per_seed(path, seed, args.runs), |w| write_csv(w, &res.report.records))?;
        }
        if let Some(path) = &args.breakdown {
            write_file(&per_seed(path, seed, args.runs), |w| write_breakdown_csv(w, &res.breakdown))?;
        }
    }
    if args.runs > 1 {
        let reports: Vec<RunReport> = results.into_iter().map(|r| r.report).collect();
        let agg = aggregate(&reports).expect("at least one run");
        println!(
            "{} runs: PDR {:.2}% (95% CI {:.2}-{:.2}%), median PDR {:.2}%, mean latency {}",
            agg.runs,
            agg.pdr,
            agg.pdr_ci.0,
            agg.pdr_ci.1,
            agg.median_pdr,
            fmt_ms(agg.mean_latency_ms)
        );
    }
    Ok(())
}
