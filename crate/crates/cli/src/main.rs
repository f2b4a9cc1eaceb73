use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ttlab::aes::{Block, Key128};
use ttlab::attack::{
    candidate_sets, collect_profile, correlate, missing_bytes, signature, CandidateSets, CollectOptions,
    TimingProfile,
};
use ttlab::channel::{EncryptionService, TimingClient, TimingServer};
use ttlab::harness::config::{parse_count, read_kv_file};
use ttlab::harness::report::{read_report_csv, reference_reports};
use ttlab::harness::{emit_report, run_experiment, ExperimentConfig, ReportFormat};
use ttlab::keysearch::{
    brute_force, fit_rate, measure_search_rate, r_squared, SearchOptions, SearchOrder, DEFAULT_FIT_MIN_SIZE,
};

const DEFAULT_PORT: u16 = 4000;

#[derive(Parser)]
#[command(name = "ttlab", version, about = "AES T-table cache-timing attack and countermeasure lab")]
struct Cli {
    /// Flat key=value file; each key sets the flag of the same name.
    /// Flags given on the command line take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

macro_rules! settings {
    ($($field:ident => $key:literal),* $(,)?) => {
        /// Server and experiment settings, one flag per config key.
        #[derive(Args, Debug, Default)]
        struct Settings {
            $(
                #[arg(long, value_name = "VALUE")]
                $field: Option<String>,
            )*
        }

        impl Settings {
            fn pairs(&self) -> Vec<(&'static str, &str)> {
                let mut out = Vec::new();
                $(if let Some(v) = &self.$field { out.push(($key, v.as_str())); })*
                out
            }
        }
    };
}

settings! {
    countermeasure => "countermeasure",
    backend => "backend",
    timing_scope => "timing_scope",
    packet_size => "packet_size",
    samples => "samples",
    samples_study => "samples_study",
    samples_attack => "samples_attack",
    retention => "retention",
    seed => "seed",
    runs => "runs",
    study_key => "study_key",
    attack_key => "attack_key",
    layout => "layout",
    cache_line_size => "cache.line_size",
    cache_sets => "cache.sets",
    cache_assoc => "cache.assoc",
    cache_hit_cycles => "cache.hit_cycles",
    cache_miss_cycles => "cache.miss_cycles",
    cache_cold_flush => "cache.cold_flush",
    cache_ambient_fraction => "cache.ambient_fraction",
    cache_ambient_seed => "cache.ambient_seed",
    rng_cycles => "rng_cycles",
    loop_iter_cycles => "loop_iter_cycles",
    div_cycles => "div_cycles",
    search => "search",
    search_limit => "search_limit",
    search_order => "search_order",
    threads => "threads",
    alpha => "alpha",
}

impl Settings {
    fn experiment(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        cfg.apply(self.pairs())?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the UDP timing server until interrupted.
    #[command(args_override_self = true)]
    Serve {
        #[arg(long)]
        listen: Option<SocketAddr>,
        /// Server key (hex); defaults to the attack key setting.
        #[arg(long)]
        key: Option<Key128>,
        #[command(flatten)]
        settings: Settings,
    },
    /// Collect a timing profile from a server, or in-process with --local.
    /// The sample count is taken from --samples (or --samples-attack).
    #[command(args_override_self = true)]
    Collect {
        #[arg(long, conflicts_with = "local")]
        server: Option<String>,
        /// Time an in-process server built from the settings.
        #[arg(long)]
        local: bool,
        #[arg(long)]
        key: Option<Key128>,
        #[arg(long, default_value_t = 500)]
        timeout_ms: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        settings: Settings,
    },
    /// Correlate a study profile against an attack profile.
    #[command(args_override_self = true)]
    Correlate {
        #[arg(long)]
        study: PathBuf,
        #[arg(long)]
        study_key: Key128,
        #[arg(long)]
        attack: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        retention: f64,
        #[arg(long)]
        out: PathBuf,
        /// Report missing bytes against this key.
        #[arg(long)]
        true_key: Option<Key128>,
    },
    /// Brute-force the candidate product against known pairs.
    #[command(args_override_self = true)]
    Search {
        #[arg(long)]
        candidates: PathBuf,
        /// Known pair as PT_HEX:CT_HEX; repeatable.
        #[arg(long = "pair", required = true, value_parser = pair_arg)]
        pairs: Vec<(Block, Block)>,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long, default_value = "score")]
        order: SearchOrder,
    },
    /// Full study/attack/search pipeline with metrics.
    #[command(args_override_self = true)]
    Experiment {
        #[arg(long, default_value = "table")]
        format: ReportFormat,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        settings: Settings,
    },
    /// Time worst-case searches and fit seconds per key.
    #[command(name = "bench-rate", args_override_self = true)]
    BenchRate {
        #[arg(long, value_delimiter = ',', default_value = "1e6,1e7,1e8", value_parser = size_arg)]
        sizes: Vec<u128>,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long, default_value_t = 0.0)]
        min_size: f64,
    },
    /// Re-emit a report csv, or the reference table, in another format.
    #[command(args_override_self = true)]
    Report {
        #[arg(long, required_unless_present = "reference")]
        input: Option<PathBuf>,
        /// Use the published reference rows as input.
        #[arg(long)]
        reference: bool,
        #[arg(long, default_value = "table")]
        format: ReportFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn size_arg(s: &str) -> Result<u128, String> {
    parse_count("size", s).map_err(|e| e.to_string())
}

fn pair_arg(s: &str) -> Result<(Block, Block), String> {
    let (pt, ct) = s.split_once(':').ok_or("expected PT_HEX:CT_HEX")?;
    Ok((
        pt.parse().map_err(|e| format!("plaintext: {e}"))?,
        ct.parse().map_err(|e| format!("ciphertext: {e}"))?,
    ))
}

fn default_endpoint() -> String {
    let port = std::env::var("TTLAB_PORT")
        .ok()
        .and_then(|p| p.parse::<u16>().ok())
        .unwrap_or(DEFAULT_PORT);
    format!("127.0.0.1:{port}")
}

fn sink(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn open(p: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(p).with_context(|| format!("opening {}", p.display()))?,
    ))
}

/// Splices `--config FILE` contents into argv right after the subcommand,
/// so explicit flags, which come later, override them.
fn expand_config(args: Vec<String>) -> Result<Vec<String>> {
    let mut path = None;
    let mut rest = Vec::with_capacity(args.len());
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            path = Some(it.next().context("--config needs a file")?);
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        } else {
            rest.push(a);
        }
    }
    let Some(path) = path else { return Ok(rest) };
    let kv = read_kv_file(Path::new(&path))?;
    let Some(sub) = rest.iter().skip(1).position(|a| !a.starts_with('-')) else {
        return Ok(rest);
    };
    let flags = kv
        .into_iter()
        .map(|(k, v)| format!("--{}={v}", k.replace(['.', '_'], "-")));
    rest.splice(sub + 2..sub + 2, flags);
    Ok(rest)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Serve { listen, key, settings } => {
            let cfg = settings.experiment()?;
            let mut channel = cfg.phase_config(key.unwrap_or(cfg.attack_key), cfg.countermeasure, cfg.seed);
            channel.listen = match listen {
                Some(a) => a,
                None => default_endpoint().parse()?,
            };
            let server = TimingServer::bind(channel)?;
            eprintln!("listening on {}", server.local_addr()?);
            let stop = AtomicBool::new(false);
            let mut server = server;
            server.serve(&stop)?;
            Ok(true)
        }
        Command::Collect {
            server,
            local,
            key,
            timeout_ms,
            out,
            settings,
        } => {
            let cfg = settings.experiment()?;
            let opts = CollectOptions::new(cfg.samples_attack, cfg.seed);
            let profile = if local {
                let channel = cfg.phase_config(key.unwrap_or(cfg.attack_key), cfg.countermeasure, cfg.seed);
                let mut svc = EncryptionService::new(channel)?;
                collect_profile(&mut svc, &opts)?
            } else {
                let endpoint = server.unwrap_or_else(default_endpoint);
                let mut client = TimingClient::connect(endpoint.as_str(), cfg.packet_size)?
                    .with_timeout(Duration::from_millis(timeout_ms));
                let p = collect_profile(&mut client, &opts)?;
                if client.timeouts() > 0 {
                    log::warn!("{} requests timed out", client.timeouts());
                }
                p
            };
            profile.write_csv(File::create(&out).with_context(|| format!("creating {}", out.display()))?)?;
            eprintln!("{} samples, mean {:.1} cycles", profile.total(), profile.mean_cycles());
            Ok(true)
        }
        Command::Correlate {
            study,
            study_key,
            attack,
            retention,
            out,
            true_key,
        } => {
            if !(retention >= 0.0) {
                bail!("retention must be non-negative");
            }
            let study = TimingProfile::read_csv(open(&study)?)?;
            let attack = TimingProfile::read_csv(open(&attack)?)?;
            let c = correlate(&signature(&study), &study_key, &signature(&attack));
            let cands = candidate_sets(&c, retention);
            cands.write_csv(File::create(&out).with_context(|| format!("creating {}", out.display()))?)?;
            println!("keyspace_log2 {:.3}", cands.keyspace_log2());
            println!("sizes {:?}", cands.sizes());
            if let Some(k) = true_key {
                println!("missing_bytes {}", missing_bytes(&cands, &k));
            }
            Ok(true)
        }
        Command::Search {
            candidates,
            pairs,
            threads,
            order,
        } => {
            let cands = CandidateSets::read_csv(open(&candidates)?)?;
            let mut opts = SearchOptions {
                order,
                ..SearchOptions::default()
            };
            if let Some(t) = threads {
                opts.threads = t;
            }
            let out = brute_force(&cands, &pairs, &opts)?;
            match out.found {
                Some(k) => println!("found {k}"),
                None => println!("found none"),
            }
            println!("keys_tested {}", out.keys_tested);
            println!("elapsed {:.6}", out.elapsed);
            Ok(out.found.is_some())
        }
        Command::Experiment { format, out, settings } => {
            let cfg = settings.experiment()?;
            let outcome = run_experiment(&cfg);
            if let Some(r) = &outcome.report {
                emit_report(std::slice::from_ref(r), format, sink(out.as_deref())?)?;
            }
            for r in &outcome.runs {
                let search = match &r.search {
                    Some(s) => match s.found {
                        Some(k) => format!("found {k} after {} keys", s.keys_tested),
                        None => format!("exhausted {} keys", s.keys_tested),
                    },
                    None => "not searched".into(),
                };
                eprintln!(
                    "run {}: m={} log2(keyspace)={:.1} {search}",
                    r.run,
                    r.m,
                    r.candidates.keyspace_log2()
                );
            }
            if let Some(f) = &outcome.failure {
                eprintln!("failed at stage {} (run {}): {}", f.stage, f.run, f.message);
            }
            Ok(outcome.succeeded())
        }
        Command::BenchRate {
            sizes,
            threads,
            min_size,
        } => {
            let threads = threads.unwrap_or(SearchOptions::default().threads);
            let points = measure_search_rate(&sizes, threads)?;
            let pts: Vec<(f64, f64)> = points.iter().map(|&(n, t)| (n as f64, t)).collect();
            println!("keyspace,seconds");
            for (n, t) in &points {
                println!("{n},{t:.6}");
            }
            let min = if min_size > 0.0 {
                min_size
            } else {
                DEFAULT_FIT_MIN_SIZE.min(pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min))
            };
            let alpha = fit_rate(&pts, min)?;
            let kept: Vec<_> = pts.iter().copied().filter(|p| p.0 >= min).collect();
            println!("alpha {alpha:.4e}");
            println!("r_squared {:.6}", r_squared(&kept, alpha));
            Ok(true)
        }
        Command::Report {
            input,
            reference,
            format,
            out,
        } => {
            let rows = if reference {
                reference_reports()
            } else {
                let p = input.expect("clap enforces input without --reference");
                read_report_csv(open(&p)?)?
            };
            emit_report(&rows, format, sink(out.as_deref())?)?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = match expand_config(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(args);
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
