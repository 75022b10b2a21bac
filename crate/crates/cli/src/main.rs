use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use tokio::net::TcpListener;
use tracing_subscriber::EnvFilter;

use xtalk_core::config::AppConfig;
use xtalk_core::corpus;
use xtalk_core::loopback::{mock_host, replay_blocking};
use xtalk_core::scenario::{Lang, Scenario};
use xtalk_core::server;
use xtalk_core::telemetry::bench::{run_bench, standard_combos, BenchGrid, RUNS_PER_CELL};

const LOG_ENV: &str = "XTALK_LOG_LEVEL";

#[derive(Debug, Parser)]
#[command(name = "xtalk", version, about = "Full-duplex speech dialogue orchestration server")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the WebSocket server.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the configured listen address.
        #[arg(long)]
        listen: Option<String>,
    },
    /// Run the latency bench over the corpus.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = [5u64, 10, 30, 60])]
        lengths: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_values_t = ["cn".to_string(), "en".to_string()])]
        langs: Vec<String>,
        /// Only bench the named combos.
        #[arg(long, value_delimiter = ',')]
        combos: Vec<String>,
        #[arg(long, default_value_t = RUNS_PER_CELL)]
        runs: usize,
        /// JSON-lines output path.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Use the wall clock instead of virtual time.
        #[arg(long)]
        realtime: bool,
    },
    /// Replay a scenario directory and write its normalized frame log.
    Replay {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the corpus and the shipped replay scenarios.
    GenScenarios {
        #[arg(long, default_value = "scenarios")]
        out: PathBuf,
    },
    /// Validate a config file and print it with defaults filled in.
    CheckConfig {
        #[arg(long)]
        config: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<AppConfig> {
    match path {
        Some(p) => AppConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(AppConfig::default()),
    }
}

fn load_scenario(config: &AppConfig, fallback: fn() -> Scenario) -> Result<Scenario> {
    match &config.scenario {
        Some(dir) => Scenario::load(dir).with_context(|| format!("loading scenario {}", dir.display())),
        None => Ok(fallback()),
    }
}

fn init_logging() {
    let filter = EnvFilter::try_from_env(LOG_ENV).unwrap_or_else(|_| EnvFilter::new("info"));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
}

async fn serve(config: AppConfig) -> Result<()> {
    let scenario = load_scenario(&config, corpus::default_scenario)?;
    let (host, _) = mock_host(&config, &scenario)?;
    let listener = TcpListener::bind(&config.listen)
        .await
        .with_context(|| format!("binding {}", config.listen))?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    let shutdown = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    server::serve(listener, host.clone(), shutdown).await?;
    tracing::info!(closed = host.sessions_closed(), "stopped");
    Ok(())
}

fn bench(
    config: AppConfig,
    lengths: Vec<u64>,
    langs: &[String],
    combos: &[String],
    runs: usize,
    out: Option<&Path>,
    realtime: bool,
) -> Result<()> {
    let langs = langs
        .iter()
        .map(|l| Lang::parse(l).with_context(|| format!("unknown language {l}")))
        .collect::<Result<Vec<_>>>()?;
    if runs == 0 {
        bail!("--runs must be at least 1");
    }
    let corpus = load_scenario(&config, corpus::generate_corpus)?;
    let mut selected = standard_combos(&config);
    if !combos.is_empty() {
        for c in combos {
            if !selected.iter().any(|s| &s.name == c) {
                bail!("unknown combo {c}");
            }
        }
        selected.retain(|s| combos.contains(&s.name));
    }
    let grid = BenchGrid { lengths_s: lengths, langs, runs };
    let rt = if realtime {
        tokio::runtime::Builder::new_multi_thread().enable_all().build()?
    } else {
        tokio::runtime::Builder::new_current_thread()
            .enable_all()
            .start_paused(true)
            .build()?
    };
    let report = rt.block_on(run_bench(&corpus, &selected, &grid))?;
    print!("{}", report.table());
    if let Some(out) = out {
        std::fs::write(out, report.jsonl()).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn replay(scenario: &Path, config: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let config = load_config(config)?;
    let scenario = Scenario::load(scenario).with_context(|| format!("loading scenario {}", scenario.display()))?;
    let log = replay_blocking(&config, &scenario)?;
    match out {
        Some(p) => std::fs::write(p, log).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{log}"),
    }
    Ok(())
}

fn gen_scenarios(out: &Path) -> Result<()> {
    corpus::generate_corpus().save(&out.join("corpus"))?;
    for (name, scenario) in corpus::replay_scenarios() {
        scenario.save(&out.join(name))?;
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    init_logging();
    match cli.command {
        Command::Serve { config, listen } => {
            let mut config = load_config(config.as_deref())?;
            if let Some(l) = listen {
                config.listen = l;
            }
            tokio::runtime::Runtime::new()?.block_on(serve(config))
        }
        Command::Bench {
            config,
            lengths,
            langs,
            combos,
            runs,
            out,
            realtime,
        } => bench(
            load_config(config.as_deref())?,
            lengths,
            &langs,
            &combos,
            runs,
            out.as_deref(),
            realtime,
        ),
        Command::Replay { scenario, config, out } => replay(&scenario, config.as_deref(), out.as_deref()),
        Command::GenScenarios { out } => gen_scenarios(&out),
        Command::CheckConfig { config } => {
            let config = load_config(Some(&config))?;
            print!("{}", config.to_toml_string());
            Ok(())
        }
    }
}
