//! Command-line front end.
//!
//! Exit codes: 0 success, 1 `verify` mismatch, 2 usage error, otherwise the
//! error class code from [`Error::exit_code`].

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::backend::sim::{LatencyModel, SimBackend, SimLayout};
use crate::backend::{MemoryBackend, PAGE_SIZE};
use crate::error::{Error, Result};
use crate::fixtures::{self, FIXTURES};
use crate::hammer::{self, FlipReport};
use crate::knowledge::{parse_system_info, DramConfig, SystemInfo};
use crate::mapping::{AddressMapping, BankFunction};
use crate::pipeline::{self, PipelineOptions, DEFAULT_SEED};
use crate::report::{format_functions, RunReport};

pub const EXIT_MISMATCH: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "dram-mapper", version, about = "Recover physical-address to DRAM bank/row/column mappings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the full recovery pipeline against a backend.
    Reverse(ReverseArgs),
    /// Run the pipeline on an embedded reference fixture, or list them.
    Simulate(SimulateArgs),
    /// Compare a recovered mapping (or report) with a ground-truth mapping.
    Verify(VerifyArgs),
    /// Emit double-sided hammer triples for a mapping; optionally hammer them.
    Pairs(PairsArgs),
    /// Re-render a saved JSON report.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    Sim,
    Hw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    Json,
}

#[derive(Debug, Clone, Args)]
pub struct PipelineArgs {
    #[arg(long, default_value_t = 0.2)]
    pub delta: f64,
    #[arg(long, default_value_t = 0.85)]
    pub per_threshold: f64,
    /// Base addresses per bit decision (majority vote).
    #[arg(long, default_value_t = 5)]
    pub votes: usize,
    /// Latency draws per measurement (median); defaults to 10 simulated, 100 on hardware.
    #[arg(long)]
    pub rounds: Option<u32>,
    #[arg(long, default_value_t = 1000)]
    pub calibration_samples: usize,
    /// Fresh tests a candidate must win by majority to join a pile.
    #[arg(long, default_value_t = 9)]
    pub confirm_votes: usize,
    #[arg(long, default_value_t = 8)]
    pub max_function_bits: usize,
    #[arg(long, env = "DRAM_MAPPER_SEED", default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Simulator: probability that a measurement lands in the wrong class.
    #[arg(long, default_value_t = 0.0)]
    pub flip_prob: f64,
    /// Simulator: per-draw latency noise in cycles.
    #[arg(long, default_value_t = 10.0)]
    pub noise_sigma: f64,
    /// Simulator: probability that a 2 MiB run of physical memory is withheld.
    #[arg(long, default_value_t = 0.0)]
    pub fragmentation: f64,
    /// Write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct ReverseArgs {
    #[arg(long, value_enum, default_value_t = BackendKind::Sim)]
    pub backend: BackendKind,
    /// Mapping installed in the simulator (file or embedded fixture name such as `no4`).
    #[arg(long)]
    pub ground_truth: Option<String>,
    /// System description: key = value config, dmidecode or decode-dimms output.
    /// Defaults to the `.cfg` next to the ground truth.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Additional system description; fields it lacks come from --config.
    #[arg(long)]
    pub system_info: Option<PathBuf>,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub list_fixtures: bool,
    /// Fixture name, e.g. `no6`.
    #[arg(required_unless_present = "list_fixtures")]
    pub fixture: Option<String>,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Recovered mapping file or JSON run report.
    pub recovered: String,
    /// Ground-truth mapping file or fixture name.
    pub truth: String,
}

#[derive(Debug, Args)]
pub struct PairsArgs {
    /// Mapping file (or fixture name).
    #[arg(long)]
    pub mapping: String,
    /// Size of the physical range to enumerate, e.g. `1MiB`.
    #[arg(long, default_value = "1MiB", value_parser = parse_size)]
    pub span: u64,
    /// First physical address of the range.
    #[arg(long, default_value = "0", value_parser = parse_size)]
    pub base: u64,
    #[arg(long, value_enum, default_value_t = BackendKind::Sim)]
    pub backend: BackendKind,
    /// Hammer every triple on the backend and report flips.
    #[arg(long)]
    pub hammer: bool,
    #[arg(long, default_value_t = 1_000_000)]
    pub iterations: u64,
    /// Stop hammering after this many seconds.
    #[arg(long)]
    pub duration: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    pub report: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    pub format: Format,
}

/// `1MiB`, `64K`, `0x100000`, `4096`.
pub fn parse_size(s: &str) -> std::result::Result<u64, String> {
    let s = s.trim();
    if let Some(hex) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        return u64::from_str_radix(&hex.replace('_', ""), 16).map_err(|e| e.to_string());
    }
    let split = s.find(|c: char| !c.is_ascii_digit() && c != '_').unwrap_or(s.len());
    let (num, unit) = s.split_at(split);
    let n: u64 = num.replace('_', "").parse().map_err(|_| format!("bad size `{s}`"))?;
    let shift = match unit.trim().to_ascii_lowercase().as_str() {
        "" | "b" => 0,
        "k" | "kb" | "kib" => 10,
        "m" | "mb" | "mib" => 20,
        "g" | "gb" | "gib" => 30,
        _ => return Err(format!("bad size unit in `{s}`")),
    };
    n.checked_mul(1 << shift).ok_or_else(|| format!("size `{s}` overflows"))
}

enum Failure {
    Usage(String),
    Error(i32, String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e.exit_code(), e.to_string())
    }
}

type Attempt<T> = std::result::Result<T, Failure>;
type CmdResult = Attempt<i32>;

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Reverse(a) => cmd_reverse(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Pairs(a) => cmd_pairs(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Error(code, msg)) => {
            eprintln!("error: {msg}");
            code
        }
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// A mapping from a file, or an embedded fixture when no such file exists.
fn load_mapping(spec: &str) -> Result<AddressMapping> {
    let path = Path::new(spec);
    if path.exists() {
        let text = read(path)?;
        if text.trim_start().starts_with('{') {
            return Ok(RunReport::from_json(&text)?.mapping);
        }
        return AddressMapping::parse(&text);
    }
    match fixtures::find(spec) {
        Some(f) => f.truth(),
        None => Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{spec}: no such file or fixture"),
        ))),
    }
}

fn load_config(explicit: Option<&Path>, ground_truth: Option<&str>, extra: Option<&Path>) -> Attempt<DramConfig> {
    let base_text = match (explicit, ground_truth) {
        (Some(p), _) => read(p)?,
        (None, Some(gt)) => {
            let sibling = Path::new(gt).with_extension("cfg");
            if sibling.exists() {
                read(&sibling)?
            } else if let Some(f) = fixtures::find(gt).filter(|_| !Path::new(gt).exists()) {
                f.config.to_string()
            } else {
                return Err(Failure::Usage(format!("no --config given and {} does not exist", sibling.display())));
            }
        }
        (None, None) => return Err(Failure::Usage("--config is required".into())),
    };
    let base = SystemInfo::parse(&base_text)?;
    let cfg = match extra {
        Some(p) => parse_system_info(&read(p)?, Some(&base))?,
        None => base.into_config()?,
    };
    Ok(cfg)
}

impl PipelineArgs {
    fn options(&self, hardware: bool) -> PipelineOptions {
        PipelineOptions {
            seed: self.seed,
            votes: self.votes,
            rounds: self.rounds.unwrap_or(if hardware { 100 } else { 10 }),
            calibration_samples: self.calibration_samples,
            delta: self.delta,
            per_threshold: self.per_threshold,
            max_function_bits: Some(self.max_function_bits),
            confirm_votes: self.confirm_votes,
            ..PipelineOptions::default()
        }
    }

    fn model(&self) -> LatencyModel {
        LatencyModel {
            noise_stddev: self.noise_sigma,
            flip_probability: self.flip_prob,
            ..LatencyModel::default()
        }
    }
}

fn sim_backend(truth: AddressMapping, cfg: &DramConfig, args: &PipelineArgs) -> Result<SimBackend> {
    SimBackend::new(
        truth,
        cfg.total_memory,
        args.model(),
        &SimLayout::fragmented(args.fragmentation),
        args.seed,
    )
}

#[cfg(all(target_os = "linux", target_arch = "x86_64"))]
fn hw_backend() -> Result<Box<dyn MemoryBackend>> {
    Ok(Box::new(crate::backend::hw::HwBackend::new()?))
}

#[cfg(not(all(target_os = "linux", target_arch = "x86_64")))]
fn hw_backend() -> Result<Box<dyn MemoryBackend>> {
    Err(Error::BackendUnsupported("hardware access on this platform"))
}

fn run_pipeline(backend: &mut dyn MemoryBackend, cfg: &DramConfig, args: &PipelineArgs, hardware: bool, label: &str) -> CmdResult {
    let started = Instant::now();
    let report = pipeline::run(backend, cfg, &args.options(hardware))
        .map_err(|e| Failure::Error(e.exit_code(), e.to_string()))?;
    log::info!("pipeline finished in {:.2?}", started.elapsed());
    let json = report.to_json();
    if let Some(out) = &args.out {
        fs::write(out, format!("{json}\n")).map_err(Error::from)?;
    }
    let mut stdout = std::io::stdout().lock();
    let text = match args.format {
        Format::Json => format!("{json}\n"),
        Format::Table => report.table(label),
    };
    stdout.write_all(text.as_bytes()).map_err(Error::from)?;
    Ok(0)
}

fn cmd_reverse(a: ReverseArgs) -> CmdResult {
    let hardware = a.backend == BackendKind::Hw;
    if !hardware && a.ground_truth.is_none() {
        return Err(Failure::Usage("the simulated backend needs --ground-truth".into()));
    }
    let cfg = load_config(a.config.as_deref(), a.ground_truth.as_deref(), a.system_info.as_deref())?;
    let label = a
        .ground_truth
        .as_deref()
        .and_then(fixtures::find)
        .map_or_else(|| "-".to_string(), |f| f.number.to_string());
    if hardware {
        let mut backend = hw_backend()?;
        run_pipeline(backend.as_mut(), &cfg, &a.pipeline, true, &label)
    } else {
        let truth = load_mapping(a.ground_truth.as_deref().expect("checked above"))?;
        let mut backend = sim_backend(truth, &cfg, &a.pipeline)?;
        run_pipeline(&mut backend, &cfg, &a.pipeline, false, &label)
    }
}

fn cmd_simulate(a: SimulateArgs) -> CmdResult {
    if a.list_fixtures {
        for f in &FIXTURES {
            let truth = f.truth()?;
            let cfg = f.dram_config()?;
            println!(
                "{}\t{}\t{},{},{},{}\t{}G\t{}",
                f.name,
                cfg.chip_type,
                cfg.channels,
                cfg.dimms_per_channel,
                cfg.ranks_per_dimm,
                cfg.banks_per_rank,
                cfg.total_memory >> 30,
                format_functions(&truth.bank_functions)
            );
        }
        return Ok(0);
    }
    let name = a.fixture.expect("required unless listing");
    let f = fixtures::find(&name).ok_or_else(|| Failure::Usage(format!("unknown fixture `{name}`")))?;
    let cfg = f.dram_config()?;
    let mut backend = sim_backend(f.truth()?, &cfg, &a.pipeline)?;
    run_pipeline(&mut backend, &cfg, &a.pipeline, false, &f.number.to_string())
}

fn bit_diff(label: &str, got: &[u32], want: &[u32]) -> Vec<String> {
    let missing: Vec<String> = want.iter().filter(|b| !got.contains(b)).map(u32::to_string).collect();
    let extra: Vec<String> = got.iter().filter(|b| !want.contains(b)).map(u32::to_string).collect();
    let mut out = Vec::new();
    if !missing.is_empty() {
        out.push(format!("{label}: missing bit(s) {}", missing.join(", ")));
    }
    if !extra.is_empty() {
        out.push(format!("{label}: unexpected bit(s) {}", extra.join(", ")));
    }
    out
}

fn function_diff(got: &[BankFunction], want: &[BankFunction]) -> Vec<String> {
    let mut out = Vec::new();
    for f in want.iter().filter(|f| !got.contains(f)) {
        out.push(format!("bank_functions: missing {f}"));
    }
    for f in got.iter().filter(|f| !want.contains(f)) {
        out.push(format!("bank_functions: unexpected {f}"));
    }
    out
}

fn cmd_verify(a: VerifyArgs) -> CmdResult {
    let got = load_mapping(&a.recovered)?;
    let want = load_mapping(&a.truth)?;
    let (gc, wc) = (got.canonical(), want.canonical());
    if gc == wc {
        if got.sorted() == want.sorted() {
            println!("identical");
        } else {
            println!("equivalent: bank functions span the same space (textual forms differ)");
            println!("  recovered: {}", format_functions(&got.sorted().bank_functions));
            println!("  truth:     {}", format_functions(&want.sorted().bank_functions));
        }
        return Ok(0);
    }
    let mut diff = function_diff(&gc.bank_functions, &wc.bank_functions);
    diff.extend(bit_diff("row_bits", &gc.row_bits, &wc.row_bits));
    diff.extend(bit_diff("column_bits", &gc.column_bits, &wc.column_bits));
    println!("mismatch");
    for line in diff {
        println!("  {line}");
    }
    Ok(EXIT_MISMATCH)
}

fn cmd_pairs(a: PairsArgs) -> CmdResult {
    let mapping = load_mapping(&a.mapping)?;
    if a.span < PAGE_SIZE {
        return Err(Failure::Usage("--span must cover at least one page".into()));
    }
    if a.hammer {
        return hammer_on_backend(&a, &mapping);
    }
    let alloc = crate::backend::Allocation::contiguous(a.base, a.span);
    let triples = hammer::generate_triples(&mapping, &alloc)?;
    let mut out = String::new();
    for t in &triples {
        out.push_str(&format!(
            "{} {} {:#x} {:#x} {:#x}\n",
            t.bank, t.row, t.aggressor_lo.0, t.victim.0, t.aggressor_hi.0
        ));
    }
    std::io::stdout().lock().write_all(out.as_bytes()).map_err(Error::from)?;
    Ok(0)
}

fn hammer_on_backend(a: &PairsArgs, mapping: &AddressMapping) -> CmdResult {
    let mut backend: Box<dyn MemoryBackend> = match a.backend {
        BackendKind::Sim => return Err(Error::BackendUnsupported("hammering (the simulator models no charge leakage)").into()),
        BackendKind::Hw => hw_backend()?,
    };
    let alloc = backend.allocate(a.span / PAGE_SIZE)?;
    let triples = hammer::generate_triples(mapping, &alloc)?;
    let deadline = a.duration.map(|s| Instant::now() + Duration::from_secs_f64(s));
    let mut report = FlipReport {
        iterations: a.iterations,
        ..FlipReport::default()
    };
    for t in &triples {
        if deadline.is_some_and(|d| Instant::now() >= d) {
            break;
        }
        let r = hammer::hammer(backend.as_mut(), mapping, std::slice::from_ref(t), a.iterations)?;
        report.triples_tested += r.triples_tested;
        report.flips.extend(r.flips);
    }
    println!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
    Ok(0)
}

fn cmd_report(a: ReportArgs) -> CmdResult {
    let report = RunReport::from_json(&read(&a.report)?)?;
    match a.format {
        Format::Json => println!("{}", report.to_json()),
        Format::Table => print!("{}", report.table("-")),
    }
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes() {
        assert_eq!(parse_size("1MiB"), Ok(1 << 20));
        assert_eq!(parse_size("64K"), Ok(64 << 10));
        assert_eq!(parse_size("0x1000"), Ok(4096));
        assert_eq!(parse_size("4096"), Ok(4096));
        assert!(parse_size("1 parsec").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
