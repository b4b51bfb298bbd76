use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use cfas_cli::bench::{self, Scenario, Targets};
use cfas_cli::launch::{healthy, launch, started_addrs, LaunchError};
use cfas_net::config::Config;
use cfas_net::runtime::{ephemeral_config, Parts, Stack};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cfas", version, about = "Family cybersafety proxy: services and benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start components and keep them running until interrupted.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        parts: PartFlags,
    },
    /// Print a one-time code an IWP can use to register with the back-end.
    Enroll {
        #[arg(long)]
        config: PathBuf,
    },
    /// Time platform actions with and without the proxy.
    Bench {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use services already running from this config instead of
        /// starting a throwaway stack.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args)]
struct PartFlags {
    #[arg(long)]
    all: bool,
    #[arg(long)]
    iwp: bool,
    #[arg(long)]
    backend: bool,
    #[arg(long)]
    mocks: bool,
}

impl PartFlags {
    fn parts(&self) -> Parts {
        if self.all || !(self.iwp || self.backend || self.mocks) {
            return Parts::ALL;
        }
        Parts {
            backend: self.backend,
            mocks: self.mocks,
            iwp: self.iwp,
        }
    }
}

fn load_config(path: &PathBuf) -> Result<Config, ExitCode> {
    Config::load(path).map_err(|err| {
        eprintln!("cfas: config {}: {err}", path.display());
        ExitCode::from(2)
    })
}

async fn run(config: PathBuf, parts: Parts) -> ExitCode {
    let cfg = match load_config(&config) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let launched = match launch(cfg, parts).await {
        Ok(l) => l,
        Err(err @ LaunchError::PortConflict { .. }) => {
            eprintln!("cfas: {err}");
            return ExitCode::from(1);
        }
        Err(LaunchError::Start(err)) => {
            eprintln!("cfas: {err:#}");
            return ExitCode::from(1);
        }
    };
    for c in &launched.already_running {
        println!("{} already running on {}; not started again", c.name(), c.health_addr(&launched.stack.config));
    }
    let mut ok = true;
    for (c, addr) in started_addrs(&launched.stack) {
        if healthy(addr).await {
            println!("{} healthy on http://{addr}", c.name());
        } else {
            eprintln!("cfas: {} did not become healthy on {addr}", c.name());
            ok = false;
        }
    }
    if let Some(m) = &launched.stack.mocks {
        println!("mock platforms serving TLS on {}", m.osn.addr);
    }
    if let Some(i) = &launched.stack.iwp {
        println!("proxy listening on {}", i.proxy.addr);
    }
    if !ok {
        launched.stack.stop().await;
        return ExitCode::from(1);
    }
    if launched.started.is_empty() {
        println!("nothing to start");
        return ExitCode::SUCCESS;
    }
    println!("ready");
    if let Err(err) = tokio::signal::ctrl_c().await {
        eprintln!("cfas: waiting for interrupt: {err}");
    }
    launched.stack.stop().await;
    ExitCode::SUCCESS
}

async fn enroll(config: PathBuf) -> anyhow::Result<String> {
    let cfg = Config::load(&config)?;
    let token = match &cfg.backend.publisher_token {
        Some(t) => t.clone(),
        None => {
            let path = cfg.backend.data_dir.join("publisher.token");
            std::fs::read_to_string(&path)
                .with_context(|| format!("reading {} (has the back-end run yet?)", path.display()))?
                .trim()
                .to_string()
        }
    };
    let url = cfg
        .iwp
        .backend_url
        .clone()
        .unwrap_or_else(|| format!("http://{}", cfg.backend.addr));
    let resp: serde_json::Value = reqwest::Client::builder()
        .no_proxy()
        .build()?
        .post(format!("{url}/enroll"))
        .bearer_auth(token)
        .json(&serde_json::json!({"household_id": cfg.household.id}))
        .send()
        .await?
        .error_for_status()?
        .json()
        .await?;
    resp["code"].as_str().map(String::from).context("back-end sent no code")
}

async fn bench_cmd(scenario: PathBuf, out: PathBuf, config: Option<PathBuf>) -> anyhow::Result<bool> {
    let scenario = Scenario::load(&scenario)?;
    let (targets, stack, _dir) = match config {
        Some(path) => {
            let cfg = Config::load(&path)?;
            (Targets::from_config(&cfg)?, None, None)
        }
        None => {
            let dir = tempfile::tempdir()?;
            let stack = Stack::start(ephemeral_config(dir.path()), Parts::ALL).await?;
            (Targets::from_stack(&stack)?, Some(stack), Some(dir))
        }
    };
    let report = bench::run(&scenario, &targets).await;
    if let Some(s) = stack {
        s.stop().await;
    }
    let report = report?;
    let file = std::fs::File::create(&out).with_context(|| format!("creating {}", out.display()))?;
    report.write_csv(file)?;
    if let Some(why) = &report.aborted {
        eprintln!("cfas: bench aborted, partial results in {}: {why}", out.display());
        return Ok(false);
    }
    for (action, ms) in report.overheads() {
        println!("{:<14} overhead {ms:>9.3} ms", action.as_str());
    }
    Ok(true)
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();
    match Cli::parse().command {
        Command::Run { config, parts } => run(config, parts.parts()).await,
        Command::Enroll { config } => match enroll(config).await {
            Ok(code) => {
                println!("{code}");
                ExitCode::SUCCESS
            }
            Err(err) => {
                eprintln!("cfas: {err:#}");
                ExitCode::from(1)
            }
        },
        Command::Bench { scenario, out, config } => match bench_cmd(scenario, out, config).await {
            Ok(true) => ExitCode::SUCCESS,
            Ok(false) => ExitCode::from(1),
            Err(err) => {
                eprintln!("cfas: {err:#}");
                ExitCode::from(1)
            }
        },
    }
}
