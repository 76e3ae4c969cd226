use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ramp_core::deploy::{publish, Endpoint, ResourceConfig, BANK_PORT, REGISTRY_PORT};
use ramp_core::harness::metrics::{median_offer_ratio, read_transcripts, winner_shares, write_transcript};
use ramp_core::harness::synth::{random_workload, RandomWorkload};
use ramp_core::harness::{compute_metrics, run_scenario, write_csvs, LiveMarket, LiveOptions, ScenarioConfig, Submission};
use ramp_core::ops::{OpsOptions, OpsServer, UserHandle};
use ramp_core::queuesim::serialize_swf;
use ramp_core::rfql::parse_rfq;
use ramp_core::signing::read_key_file;
use ramp_core::user::{ApprovalState, Decision};
use ramp_core::{
    AgentId, ApprovalMode, AuctionConfig, BankAgent, BankParams, Credential, Directory, KeyRing, Ledger, Money, Node,
    RegistryAgent, Timestamp, UserAgent, UserParams,
};

#[derive(Parser)]
#[command(name = "ramp", version, about = "Agents and tools for a decentralised compute-cycle market")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a resource agent from its configuration file.
    Resource {
        #[arg(long)]
        config: PathBuf,
        /// Append the agent's transcript to this file.
        #[arg(long)]
        transcript: Option<PathBuf>,
    },
    /// Run one auction as a user and print its transcript.
    User(UserCmd),
    /// Run the banking agent, or administer its ledger and keys.
    Bank(BankCmd),
    /// Run the registry.
    Registry {
        #[arg(long, default_value_t = format!("0.0.0.0:{REGISTRY_PORT}"))]
        listen: String,
        #[arg(long, default_value = "registry")]
        id: String,
        #[arg(long, default_value_t = 5000)]
        heartbeat_ms: i64,
    },
    /// Serve the operations API in front of a user agent.
    OpsApi(OpsApiCmd),
    /// Run a scenario and write its transcript and metric CSVs.
    Sim(SimCmd),
    /// Recompute metric CSVs from a directory of transcripts.
    Metrics {
        dir: PathBuf,
        /// Where to write the CSVs (default: the transcript directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Start a whole loopback market plus the operations API.
    Demo(DemoCmd),
    /// Write a synthetic SWF log.
    GenSwf(GenSwfCmd),
    /// Write a fresh random signing key.
    Keygen {
        principal: String,
        #[arg(long, default_value = "keys")]
        dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Approval {
    Auto,
    Manual,
    ManualAll,
}

impl From<Approval> for ApprovalMode {
    fn from(a: Approval) -> Self {
        match a {
            Approval::Auto => ApprovalMode::Auto,
            Approval::Manual => ApprovalMode::ManualBestOfferOnly,
            Approval::ManualAll => ApprovalMode::ManualAll,
        }
    }
}

/// Connection settings shared by everything that runs a user agent.
#[derive(Args)]
struct UserAgentArgs {
    #[arg(long, default_value = "user1")]
    user: String,
    /// Hex signing key registered with the bank.
    #[arg(long)]
    key: PathBuf,
    /// Bank as `host:port` or `id=host:port`.
    #[arg(long, default_value_t = format!("127.0.0.1:{BANK_PORT}"))]
    bank: String,
    /// Registry as `host:port` or `id=host:port`.
    #[arg(long)]
    registry: Option<String>,
    /// Resource to invite, as `id=host:port`; repeatable. Used when there is no registry.
    #[arg(long = "resource")]
    resources: Vec<String>,
    /// Address the user agent listens on for unsolicited notices.
    #[arg(long, default_value = "127.0.0.1:0")]
    agent_listen: String,
}

#[derive(Args)]
struct UserCmd {
    #[command(flatten)]
    agent: UserAgentArgs,
    /// RFQL request document.
    #[arg(long)]
    rfq: PathBuf,
    #[arg(long, default_value_t = 3)]
    rounds: u32,
    /// Seconds between rounds.
    #[arg(long, default_value_t = 15.0)]
    round_interval: f64,
    #[arg(long, value_enum, default_value = "auto")]
    approval: Approval,
    /// Write the transcript here instead of standard output.
    #[arg(long)]
    transcript: Option<PathBuf>,
}

#[derive(Args)]
#[command(args_conflicts_with_subcommands = true)]
struct BankCmd {
    #[command(subcommand)]
    admin: Option<BankAdmin>,
    #[arg(long, default_value = "ledger.jsonl", global = true)]
    ledger: PathBuf,
    #[arg(long, default_value = "keys", global = true)]
    keys: PathBuf,
    #[arg(long, default_value_t = format!("0.0.0.0:{BANK_PORT}"))]
    listen: String,
    #[arg(long, default_value = "bank")]
    id: String,
    /// Known agent as `id=host:port`, for notices to users; repeatable.
    #[arg(long = "peer")]
    peers: Vec<String>,
}

#[derive(Subcommand)]
enum BankAdmin {
    /// Deposit into an account. The bank must not be running.
    Credit { principal: String, amount: Money },
    /// Install a principal's verification key in the key directory.
    RegisterKey { principal: String, keyfile: PathBuf },
    /// Print an account's balance and recent entries.
    Statement {
        principal: String,
        #[arg(long, default_value_t = 20)]
        entries: usize,
    },
}

#[derive(Args)]
struct OpsApiCmd {
    #[arg(long, default_value = "127.0.0.1:8080")]
    listen: String,
    #[command(flatten)]
    agent: UserAgentArgs,
}

#[derive(Args)]
struct SimCmd {
    /// Scenario file; the built-in market when omitted.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Run on the simulated clock instead of real agents on loopback.
    #[arg(long)]
    virtual_time: bool,
    #[arg(long)]
    repetitions: Option<u32>,
    /// Override every workload's round count.
    #[arg(long)]
    rounds: Option<u32>,
    #[arg(long, default_value = "sim-out")]
    out: PathBuf,
}

#[derive(Args)]
struct DemoCmd {
    #[arg(long, default_value = "127.0.0.1:8080")]
    listen: String,
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Run without a registry; auctions invite every resource.
    #[arg(long)]
    no_registry: bool,
    #[arg(long)]
    transcripts: Option<PathBuf>,
}

#[derive(Args)]
struct GenSwfCmd {
    #[arg(long, default_value = "synthetic")]
    machine: String,
    #[arg(long, default_value_t = 1024)]
    cores: u64,
    #[arg(long, default_value_t = 0.7)]
    utilization: f64,
    #[arg(long, default_value_t = 14)]
    days: i64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(io::stderr)
        .init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Resource { config, transcript } => resource(&config, transcript.as_deref()),
        Command::User(cmd) => user(cmd),
        Command::Bank(cmd) => bank(cmd),
        Command::Registry { listen, id, heartbeat_ms } => {
            let node = Node::spawn(Box::new(RegistryAgent::new(id.as_str(), heartbeat_ms)), &listen, Directory::new(), None)?;
            tracing::info!("registry {id} on {}", node.addr());
            park()
        }
        Command::OpsApi(cmd) => ops_api(cmd),
        Command::Sim(cmd) => sim(cmd),
        Command::Metrics { dir, out } => metrics(&dir, out.as_deref().unwrap_or(&dir)),
        Command::Demo(cmd) => demo(cmd),
        Command::GenSwf(cmd) => gen_swf(cmd),
        Command::Keygen { principal, dir } => {
            fs::create_dir_all(&dir)?;
            let path = dir.join(format!("{principal}.key"));
            let mut f = OpenOptions::new()
                .write(true)
                .create_new(true)
                .open(&path)
                .with_context(|| format!("creating {}", path.display()))?;
            writeln!(f, "{}", hex_key(&rand::random::<[u8; 32]>()))?;
            println!("{}", path.display());
            Ok(())
        }
    }
}

fn hex_key(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn park() -> Result<()> {
    loop {
        thread::park();
    }
}

/// `host:port` or `id=host:port`.
fn endpoint(text: &str, default_id: &str) -> Result<Endpoint> {
    if text.contains('=') {
        return Ok(Endpoint::parse(text)?);
    }
    Ok(Endpoint::parse(&format!("{default_id}={text}"))?)
}

fn resource(config: &Path, transcript: Option<&Path>) -> Result<()> {
    let cfg = ResourceConfig::load(config)?;
    let base = config.parent().unwrap_or(Path::new("."));
    let agent = cfg.build(base, Timestamp::now())?;
    let directory = Directory::new();
    publish(&directory, &cfg.peers());
    let node = Node::spawn(Box::new(agent), &cfg.listen, directory, transcript)?;
    tracing::info!("resource {} on {} (advertised as {})", cfg.resource_id, node.addr(), cfg.advertised_address());
    park()
}

struct UserSetup {
    node: Node,
    user_id: AgentId,
    invite: Vec<AgentId>,
}

fn start_user(args: &UserAgentArgs, transcript: Option<&Path>) -> Result<UserSetup> {
    let credential = Credential::load(args.user.as_str(), &args.key)?;
    let directory = Directory::new();
    let bank = endpoint(&args.bank, "bank")?;
    let registry = args.registry.as_deref().map(|r| endpoint(r, "registry")).transpose()?;
    let resources = args.resources.iter().map(|r| Endpoint::parse(r)).collect::<Result<Vec<_>, _>>()?;
    if registry.is_none() && resources.is_empty() {
        bail!("give a --registry or at least one --resource");
    }
    publish(&directory, std::iter::once(&bank).chain(registry.as_ref()).chain(&resources));
    let mut params = UserParams::new(args.user.as_str(), bank.id.clone());
    params.registry = registry.map(|r| r.id);
    let node = Node::spawn(Box::new(UserAgent::new(params, credential)), &args.agent_listen, directory, transcript)?;
    Ok(UserSetup {
        node,
        user_id: AgentId::new(args.user.as_str()),
        invite: resources.into_iter().map(|r| r.id).collect(),
    })
}

fn user(cmd: UserCmd) -> Result<()> {
    let text = fs::read_to_string(&cmd.rfq).with_context(|| format!("reading {}", cmd.rfq.display()))?;
    let doc = parse_rfq(&text)?;
    if let Some(p) = &cmd.transcript {
        File::create(p).with_context(|| format!("creating {}", p.display()))?;
    }
    let setup = start_user(&cmd.agent, cmd.transcript.as_deref())?;
    let config = AuctionConfig::new(cmd.rounds, (cmd.round_interval * 1000.0).round() as i64).with_approval(cmd.approval.into());
    let invite = setup.invite.clone();
    let id = setup
        .node
        .call::<UserAgent, _>(move |u, now, out| u.start_auction(now, doc, config, invite, out))
        .ok_or_else(|| anyhow!("user agent stopped"))??;
    tracing::info!("auction {id} started");

    let limit = Duration::from_secs_f64(cmd.round_interval * (cmd.rounds as f64 + 2.0)) + Duration::from_secs(600);
    let until = Instant::now() + limit;
    let stdin = io::stdin();
    let phase = loop {
        let aid = id.clone();
        let (phase, pending) = setup
            .node
            .call::<UserAgent, _>(move |u, _, _| {
                u.auction(&aid).map(|a| {
                    let pending: Vec<(usize, String)> = a
                        .units
                        .iter()
                        .filter_map(|unit| match &unit.approval {
                            ApprovalState::Pending { offer } => Some((
                                unit.index,
                                format!(
                                    "unit {} ({}): {} offers {} (meets requirements: {})",
                                    unit.index, unit.original.id, offer.resource_id, offer.price, offer.meets_requirements
                                ),
                            )),
                            _ => None,
                        })
                        .collect();
                    (a.phase, pending)
                })
            })
            .flatten()
            .ok_or_else(|| anyhow!("auction {id} disappeared"))?;
        if phase.is_terminal() || Instant::now() >= until {
            break phase;
        }
        for (unit, prompt) in pending {
            eprint!("{prompt}. accept or reject? ");
            let mut line = String::new();
            stdin.lock().read_line(&mut line)?;
            let decision: Decision = line.trim().parse().map_err(|e: String| anyhow!(e))?;
            let aid = id.clone();
            setup
                .node
                .call::<UserAgent, _>(move |u, now, out| u.approve_best_offer(now, &aid, unit, decision, out))
                .ok_or_else(|| anyhow!("user agent stopped"))??;
        }
        thread::sleep(Duration::from_millis(100));
    };
    // Let confirmations and bank notices land in the transcript.
    thread::sleep(Duration::from_secs(1));
    eprintln!("auction {id}: {}", phase.name());
    if cmd.transcript.is_none() {
        let mut stdout = io::stdout().lock();
        for r in setup.node.transcript() {
            writeln!(stdout, "{}", serde_json::to_string(&r)?)?;
        }
    }
    setup.node.stop();
    Ok(())
}

fn lock_ledger(ledger: &Path) -> Result<File> {
    let path = ledger.with_extension("lock");
    let f = OpenOptions::new().create(true).truncate(false).write(true).open(&path)?;
    f.try_lock()
        .map_err(|_| anyhow!("{} is locked: is the bank running?", ledger.display()))?;
    Ok(f)
}

fn bank(cmd: BankCmd) -> Result<()> {
    match cmd.admin {
        Some(BankAdmin::Credit { principal, amount }) => {
            let _lock = lock_ledger(&cmd.ledger)?;
            let mut agent = BankAgent::new(BankParams::new(cmd.id.as_str()), Ledger::open(&cmd.ledger)?, KeyRing::new());
            let entry = agent.credit(Timestamp::now(), &principal, amount)?;
            let balance = agent.ledger().balance(&principal);
            println!("{} credited {} to {principal}; balance {balance}", entry.tx_id, entry.amount);
            Ok(())
        }
        Some(BankAdmin::RegisterKey { principal, keyfile }) => {
            let key = read_key_file(&keyfile)?;
            fs::create_dir_all(&cmd.keys)?;
            let dest = cmd.keys.join(format!("{principal}.key"));
            fs::write(&dest, format!("{}\n", hex_key(&key)))?;
            println!("{}", dest.display());
            Ok(())
        }
        Some(BankAdmin::Statement { principal, entries }) => {
            let _lock = lock_ledger(&cmd.ledger)?;
            let agent = BankAgent::new(BankParams::new(cmd.id.as_str()), Ledger::open(&cmd.ledger)?, KeyRing::new());
            println!("{}", serde_json::to_string_pretty(&agent.statement(&principal, entries))?);
            Ok(())
        }
        None => {
            let _lock = lock_ledger(&cmd.ledger)?;
            let ledger = Ledger::open(&cmd.ledger)?;
            let keys = if cmd.keys.exists() { KeyRing::load_dir(&cmd.keys)? } else { KeyRing::new() };
            let agent = BankAgent::new(BankParams::new(cmd.id.as_str()), ledger, keys);
            agent.audit_consistent().map_err(|e| anyhow!("ledger audit: {e}"))?;
            let directory = Directory::new();
            let peers = cmd.peers.iter().map(|p| Endpoint::parse(p)).collect::<Result<Vec<_>, _>>()?;
            publish(&directory, &peers);
            let node = Node::spawn(Box::new(agent), &cmd.listen, directory, None)?;
            tracing::info!("bank {} on {}", cmd.id, node.addr());
            park()
        }
    }
}

fn ops_api(cmd: OpsApiCmd) -> Result<()> {
    let setup = start_user(&cmd.agent, None)?;
    let opts = OpsOptions {
        resources: setup.invite.clone(),
        ..OpsOptions::default()
    };
    let handle: Arc<dyn UserHandle> = Arc::new(setup.node);
    let server = OpsServer::start(handle, setup.user_id, &cmd.listen, opts)?;
    tracing::info!("operations API on {}", server.url());
    park()
}

fn load_scenario(path: Option<&Path>) -> Result<(ScenarioConfig, PathBuf)> {
    match path {
        Some(p) => Ok((
            ScenarioConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            p.parent().unwrap_or(Path::new(".")).to_path_buf(),
        )),
        None => Ok((ScenarioConfig::builtin(), PathBuf::from("."))),
    }
}

fn sim(cmd: SimCmd) -> Result<()> {
    let (mut cfg, base) = load_scenario(cmd.scenario.as_deref())?;
    if let Some(k) = cmd.repetitions {
        cfg.repetitions = k;
    }
    fs::create_dir_all(&cmd.out)?;
    let (submissions, transcript) = if cmd.virtual_time {
        let run = run_scenario(&cfg, &base, cmd.rounds)?;
        (run.submissions, run.transcript)
    } else {
        let market = LiveMarket::start(&cfg, &base, &LiveOptions::default())?;
        let subs = market.run_workloads(&cfg, cmd.rounds);
        thread::sleep(Duration::from_secs(1));
        (subs, market.transcript())
    };
    write_transcript(&transcript, &cmd.out.join("transcript.jsonl"))?;
    fs::write(cmd.out.join("submissions.json"), serde_json::to_string_pretty(&submissions)?)?;
    report_submissions(&submissions);
    metrics(&cmd.out, &cmd.out)
}

fn report_submissions(subs: &[Submission]) {
    let done = subs.iter().filter(|s| s.phase.is_some_and(|p| p.name() == "done")).count();
    eprintln!("{done}/{} auctions completed", subs.len());
    for s in subs.iter().filter(|s| s.error.is_some()) {
        eprintln!("  {} (repetition {}): {}", s.workload, s.repetition, s.error.as_deref().unwrap_or(""));
    }
}

fn metrics(dir: &Path, out: &Path) -> Result<()> {
    let records = read_transcripts(dir).with_context(|| format!("reading transcripts in {}", dir.display()))?;
    if records.is_empty() {
        bail!("no transcript records in {}", dir.display());
    }
    let m = compute_metrics(&records);
    fs::create_dir_all(out)?;
    for f in write_csvs(&m, out)? {
        println!("{}", out.join(f).display());
    }
    if let Some(r) = median_offer_ratio(&m) {
        eprintln!("median offer/request ratio: {:.1}%", r * 100.0);
    }
    for (resource, wins, share) in winner_shares(&m).into_iter().take(5) {
        eprintln!("  {resource}: {wins} wins ({:.0}%)", share * 100.0);
    }
    Ok(())
}

fn demo(cmd: DemoCmd) -> Result<()> {
    let (cfg, base) = load_scenario(cmd.scenario.as_deref())?;
    let opts = LiveOptions {
        registry: !cmd.no_registry,
        transcript_dir: cmd.transcripts,
        ..LiveOptions::default()
    };
    let market = LiveMarket::start(&cfg, &base, &opts)?;
    let ops = OpsOptions {
        resources: if opts.registry { Vec::new() } else { market.resource_ids() },
        ..OpsOptions::default()
    };
    let handle: Arc<dyn UserHandle> = market.user.clone();
    let server = OpsServer::start(handle, market.user_id.clone(), &cmd.listen, ops)?;
    eprintln!(
        "{} resources, bank and {} on loopback; operations API for {} at {}",
        market.resources.len(),
        if opts.registry { "registry" } else { "no registry" },
        market.user_id,
        server.url()
    );
    park()
}

fn gen_swf(cmd: GenSwfCmd) -> Result<()> {
    if !(0.0..=1.0).contains(&cmd.utilization) {
        bail!("utilization must be in [0, 1]");
    }
    let log = random_workload(
        &cmd.machine,
        &RandomWorkload {
            total_cores: cmd.cores,
            utilization: cmd.utilization,
            from: 0,
            to: cmd.days * 24 * 3600,
            seed: cmd.seed,
        },
    );
    fs::write(&cmd.out, serialize_swf(&log))?;
    eprintln!("{} jobs written to {}", log.jobs.len(), cmd.out.display());
    Ok(())
}
