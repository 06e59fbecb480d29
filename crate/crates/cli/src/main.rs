use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use ariadne::bench::{run_bench, BenchConfig, PacketKind, Role};
use ariadne::simnet::config::{NetConfig, SEED_ENV};
use ariadne::simnet::games::{run_standard_games, Expectation};
use ariadne::simnet::HopOutcome;
use ariadne::vectors::golden_vectors;
use ariadne::Error;
use clap::{Parser, Subcommand, ValueEnum};

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "ariadne", version, about = "Ariadne onion routing simulator and benchmarks")]
struct Cli {
    /// Overrides the configured seed.
    #[arg(long, global = true, env = SEED_ENV)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the setup and data phases over a configured topology.
    Run {
        config: PathBuf,
        /// Write every tapped frame as JSON lines.
        #[arg(long)]
        transcript: Option<PathBuf>,
        /// Print one line per hop instead of one per path.
        #[arg(long)]
        verbose: bool,
    },
    /// Measure creation and processing latency.
    Bench {
        #[arg(long, value_enum, default_value_t = KindArg::All)]
        kind: KindArg,
        #[arg(long, value_enum, default_value_t = RoleArg::All)]
        role: RoleArg,
        /// Hop counts, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 3, 4, 5])]
        hops: Vec<usize>,
        #[arg(long, default_value_t = 3000)]
        warmup_ms: u64,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 64)]
        batch: usize,
    },
    /// Play the unlinkability games configured in [games].
    Games {
        config: PathBuf,
        /// Overrides games.trials.
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Print golden test vectors as JSON lines.
    Vectors,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Data,
    Setup,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum RoleArg {
    Create,
    Process,
    All,
}

/// Failure category mapped onto the exit code.
enum Failure {
    Usage(String),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_)
            | Error::PathTooLong { .. }
            | Error::EmptyPath
            | Error::UnknownNode(_)
            | Error::InvalidWindow(_)
            | Error::NoLink { .. } => Failure::Usage(e.to_string()),
            other => Failure::Check(other.to_string()),
        }
    }
}

fn load(path: &std::path::Path, seed: Option<u64>) -> Result<NetConfig, Failure> {
    let mut cfg = NetConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn cmd_run(cfg: &NetConfig, transcript: Option<PathBuf>, verbose: bool) -> Result<(), Failure> {
    let mut net = cfg.build_network(cfg.seed)?;
    let mut failed = false;
    for (i, p) in cfg.paths.iter().enumerate() {
        let source = net.address_of(&p.source)?;
        let hops = p.hops.iter().map(|h| net.address_of(h)).collect::<Result<Vec<_>, _>>()?;
        let path = if p.setup {
            let (path, _, report) = net.provision_via_setup(source, &hops)?;
            if report.delivered.is_none() {
                println!("path {i}: setup failed at {:?}", report.drop_reason());
                failed = true;
                continue;
            }
            println!("path {i}: setup delivered over {} hops", report.hops.len());
            path
        } else {
            net.provision_direct(&hops)?
        };
        let payloads = net.random_payloads(p.payloads, 1024);
        let report = net.run_path(source, &path, &payloads, 0)?;
        let mut intact = 0;
        for (pkt, sent) in report.packets.iter().zip(&payloads) {
            if verbose {
                for h in &pkt.hops {
                    let what = match &h.outcome {
                        HopOutcome::Forwarded { to } => format!("forward -> {to}"),
                        HopOutcome::Delivered { len } => format!("deliver {len} bytes"),
                        HopOutcome::Dropped { reason } => format!("drop {reason:?}"),
                    };
                    println!("path {i} packet {} {}: {what}", pkt.packet, h.node);
                }
            }
            if pkt.delivered.as_ref() == Some(sent) {
                intact += 1;
            } else if let Some((node, reason)) = pkt.drop_reason() {
                println!("path {i} packet {}: unexpected drop at {node}: {reason:?}", pkt.packet);
            }
        }
        println!("path {i}: {intact}/{} payloads delivered", payloads.len());
        failed |= intact != payloads.len();
    }
    if let Some(file) = transcript {
        std::fs::write(&file, net.export_taps())
            .map_err(|e| Failure::Usage(format!("{}: {e}", file.display())))?;
    }
    if failed {
        return Err(Failure::Check("some payloads were not delivered".into()));
    }
    Ok(())
}

fn cmd_games(cfg: &NetConfig, trials: Option<usize>) -> Result<(), Failure> {
    let games = cfg.games.as_ref().ok_or_else(|| Failure::Usage("config has no [games] section".into()))?;
    let trials = trials.unwrap_or(games.trials);
    if trials == 0 {
        return Err(Failure::Usage("trials must be positive".into()));
    }
    let (mut net, setup) = cfg.game(cfg.seed)?;
    let verdicts = run_standard_games(&mut net, &setup, trials, cfg.seed)?;
    let mut failed = false;
    for v in &verdicts {
        let r = &v.result;
        let note = match (v.expectation, v.pass) {
            (Expectation::ExpectedLimitation, true) => "expected limitation",
            (_, true) => "ok",
            (_, false) => "VIOLATED",
        };
        eprintln!(
            "{:?} {:?} {:<17} advantage {:.4} +- {:.4} ({note})",
            r.game, r.class, r.adversary, r.advantage, r.std_err
        );
        println!("{}", serde_json::to_string(v).expect("verdicts serialize"));
        failed |= !v.pass;
    }
    if failed {
        return Err(Failure::Check("an advantage bound was violated".into()));
    }
    Ok(())
}

fn cmd_bench(
    kind: KindArg,
    role: RoleArg,
    hops: &[usize],
    cfg: BenchConfig,
) -> Result<(), Failure> {
    let kinds: &[PacketKind] = match kind {
        KindArg::Data => &[PacketKind::Data],
        KindArg::Setup => &[PacketKind::Setup],
        KindArg::All => &[PacketKind::Data, PacketKind::Setup],
    };
    let roles: &[Role] = match role {
        RoleArg::Create => &[Role::Create],
        RoleArg::Process => &[Role::Process],
        RoleArg::All => &[Role::Create, Role::Process],
    };
    for &k in kinds {
        for &r in roles {
            for &h in hops {
                let report = run_bench(&[(k, r, h)], &cfg)?;
                print!("{}", report.to_json_lines());
            }
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run { config, transcript, verbose } => cmd_run(&load(&config, cli.seed)?, transcript, verbose),
        Command::Games { config, trials } => cmd_games(&load(&config, cli.seed)?, trials),
        Command::Bench { kind, role, hops, warmup_ms, samples, batch } => {
            let cfg = BenchConfig {
                warmup: Duration::from_millis(warmup_ms),
                samples,
                batch,
                seed: cli.seed.unwrap_or(1),
            };
            cmd_bench(kind, role, &hops, cfg)
        }
        Command::Vectors => {
            for v in golden_vectors()? {
                println!("{}", serde_json::to_string(&v).expect("vectors serialize"));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("failed: {msg}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}
