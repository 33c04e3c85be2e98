mod args;
mod export;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::net::{SocketAddr, SocketAddrV4};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, Context};
use clap::Parser;
use serde_json::json;
use zcsi_core::analysis::StatsAccumulator;
use zcsi_core::capture::{read_capture, replay_capture, CaptureError, CaptureWriter};
use zcsi_core::collector::{Collector, CollectorConfig};
use zcsi_core::controller::{check_availability, Controller, ControllerConfig, ControllerError, SessionPlan};
use zcsi_core::emulator::{Emulator, EmulatorConfig};
use zcsi_core::wire::{CommandFrame, MAX_STA_FILTERS};
use zcsi_service::{AppState, ServiceConfig};

use args::{ApArgs, CaptureArgs, Cli, Command, EmulateArgs, ParseArgs, ParseFormat, ProbeArgs, ReplayArgs, ServeArgs, StartArgs};

/// Exit status classes: 1 usage, 2 protocol or transport, 3 data.
#[derive(Debug)]
enum Failure {
    Usage(anyhow::Error),
    Protocol(anyhow::Error),
    Data(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Protocol(_) => 2,
            Failure::Data(_) => 3,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Failure::Usage(_) => "usage",
            Failure::Protocol(_) => "protocol",
            Failure::Data(_) => "data",
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Usage(e) | Failure::Protocol(e) | Failure::Data(e) => e,
        }
    }
}

impl From<ControllerError> for Failure {
    fn from(e: ControllerError) -> Self {
        match e {
            ControllerError::InvalidPlan(_) | ControllerError::InvalidConfig(_) => Failure::Usage(e.into()),
            _ => Failure::Protocol(e.into()),
        }
    }
}

impl From<CaptureError> for Failure {
    fn from(e: CaptureError) -> Self {
        Failure::Data(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(anyhow!(msg.into()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_logging(cli.verbose);
    let json = cli.json;
    let runtime = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return ExitCode::from(2);
        }
    };
    match runtime.block_on(run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            if json {
                let body = json!({
                    "error": format!("{:#}", failure.error()),
                    "kind": failure.kind(),
                    "exit_code": failure.code(),
                });
                eprintln!("{body}");
            } else {
                eprintln!("error: {:#}", failure.error());
            }
            ExitCode::from(failure.code())
        }
    }
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(io::stderr)
        .init();
}

async fn run(cli: Cli) -> Outcome {
    let json = cli.json;
    match cli.command {
        Command::Probe(a) => probe(a, json).await,
        Command::Start(a) => start(a, json).await,
        Command::Stop(a) => stop(a, json).await,
        Command::Capture(a) => capture(a, json).await,
        Command::Parse(a) => parse(a, json),
        Command::Stats(a) => stats(&a, json),
        Command::Replay(a) => replay(a, json).await,
        Command::Emulate(a) => emulate(a).await,
        Command::Serve(a) => serve(a).await,
    }
}

fn controller_config(ap: &ApArgs) -> ControllerConfig {
    let mut cfg = ControllerConfig::new(ap.ap);
    cfg.command_port = ap.port;
    cfg
}

fn print_json(value: &serde_json::Value) {
    println!("{value}");
}

async fn probe(a: ProbeArgs, json: bool) -> Outcome {
    let mut cfg = controller_config(&a.ap);
    cfg.availability_timeout = Duration::from_millis(a.timeout_ms);
    cfg.availability_retries = a.retries;
    let ready = check_availability(&cfg).await?;
    if json {
        print_json(&json!({ "ap": cfg.ap_endpoint().to_string(), "available": ready }));
    }
    if !ready {
        return Err(Failure::Protocol(anyhow!("no OK from {} after {} attempts", cfg.ap_endpoint(), a.retries.max(1))));
    }
    if !json {
        println!("OK");
    }
    Ok(())
}

async fn start(a: StartArgs, json: bool) -> Outcome {
    if a.filters.len() > MAX_STA_FILTERS {
        return Err(usage(format!("{} --filter values given, at most {MAX_STA_FILTERS} allowed", a.filters.len())));
    }
    let mut cfg = controller_config(&a.ap);
    cfg.inter_command_delay = Duration::from_millis(a.delay_ms);
    cfg.validate()?;
    let plan = SessionPlan {
        band: a.band,
        frame_type: a.frame_type,
        sta_filters: a.filters,
        report_target_ip: a.target_ip,
    };
    plan.validate()?;
    let controller = Controller::new(cfg).await?;
    let state = controller.start_session(&plan).await?;
    if json {
        print_json(&json!({ "ap": controller.config().ap_endpoint().to_string(), "state": state, "plan": plan }));
    } else {
        let sent: Vec<String> = plan.commands().iter().map(|(c, _)| c.cmd_type.to_string()).collect();
        println!(
            "reporting: band {} frame type {:#04x}, reports to {} (sent {})",
            plan.band,
            plan.frame_type,
            plan.report_target_ip,
            sent.join(",")
        );
    }
    Ok(())
}

/// A fresh process has no session state, so this sends ReportEnable(0) directly.
async fn stop(a: ApArgs, json: bool) -> Outcome {
    let controller = Controller::new(controller_config(&a)).await?;
    controller.send_raw(&CommandFrame::report_enable(false)).await?;
    if json {
        print_json(&json!({ "ap": controller.config().ap_endpoint().to_string(), "reporting": false }));
    } else {
        println!("stopped");
    }
    Ok(())
}

/// Ctrl-C listener, installed before any "ready" message is printed so an
/// early interrupt still shuts down cleanly.
struct Interrupt {
    #[cfg(unix)]
    signal: tokio::signal::unix::Signal,
}

impl Interrupt {
    fn install() -> Result<Self, Failure> {
        #[cfg(unix)]
        {
            let signal = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::interrupt())
                .context("installing the Ctrl-C handler")
                .map_err(Failure::Protocol)?;
            Ok(Self { signal })
        }
        #[cfg(not(unix))]
        Ok(Self {})
    }

    async fn wait(&mut self) -> Result<(), Failure> {
        #[cfg(unix)]
        {
            self.signal.recv().await;
            Ok(())
        }
        #[cfg(not(unix))]
        tokio::signal::ctrl_c()
            .await
            .context("waiting for Ctrl-C")
            .map_err(Failure::Protocol)
    }

    /// Waits for Ctrl-C, or for `limit` seconds if given.
    async fn wait_or(&mut self, limit: Option<f64>) -> Result<(), Failure> {
        match limit {
            Some(secs) => {
                tokio::select! {
                    r = self.wait() => r,
                    _ = tokio::time::sleep(Duration::from_secs_f64(secs)) => Ok(()),
                }
            }
            None => self.wait().await,
        }
    }
}

fn allowlist(filters: &[zcsi_core::wire::MacAddr]) -> Option<std::collections::HashSet<zcsi_core::wire::MacAddr>> {
    (!filters.is_empty()).then(|| filters.iter().copied().collect())
}

async fn capture(a: CaptureArgs, json: bool) -> Outcome {
    if let Some(d) = a.duration {
        if !(d.is_finite() && d >= 0.0) {
            return Err(usage(format!("bad --duration {d}")));
        }
    }
    let config = CollectorConfig {
        bind_address: a.bind,
        listen_port: a.port,
        mac_allowlist: allowlist(&a.filters),
        capture_path: Some(a.out.clone()),
        strict_source_port: a.strict_source_port,
        ..Default::default()
    };
    let mut interrupt = Interrupt::install()?;
    let collector = Collector::spawn(config)
        .await
        .map_err(|e| Failure::Protocol(e.into()))?;
    eprintln!("capturing on {} into {}", collector.local_addr(), a.out.display());
    let waited = interrupt.wait_or(a.duration).await;
    let counters = collector.counters();
    let stats = collector.stats();
    let warning = collector.capture_warning();
    collector.shutdown().await;
    waited?;

    if json {
        print_json(&json!({
            "out": a.out,
            "frames": counters.accepted,
            "counters": counters,
            "stats": stats,
            "capture_warning": warning,
        }));
    } else {
        println!("captured {} frames to {}", counters.accepted, a.out.display());
        if counters.decode_errors > 0 {
            println!("{} datagrams failed to decode", counters.decode_errors);
        }
    }
    match warning {
        Some(w) => Err(Failure::Data(anyhow!("capture file incomplete: {w}"))),
        None => Ok(()),
    }
}

fn output(path: &Option<std::path::PathBuf>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p)
                .with_context(|| format!("creating {}", p.display()))
                .map_err(Failure::Data)?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn parse(a: ParseArgs, json: bool) -> Outcome {
    let format = a.format.unwrap_or(if json { ParseFormat::Json } else { ParseFormat::Csv });
    let records = read_capture(&a.input.input)?;
    let mut out = output(&a.out)?;
    let write_err = |e: io::Error| Failure::Data(anyhow!(e).context("writing output"));
    let mut count = 0usize;
    match format {
        ParseFormat::Capture => {
            let mut writer = CaptureWriter::new(out).map_err(write_err)?;
            for record in records {
                writer.write_record(&record?).map_err(write_err)?;
                count += 1;
            }
            writer.flush().map_err(write_err)?;
        }
        ParseFormat::Csv => {
            writeln!(out, "{}", export::CSV_HEADER).map_err(write_err)?;
            for record in records {
                export::write_csv_rows(&mut out, count, &record?).map_err(write_err)?;
                count += 1;
            }
            out.flush().map_err(write_err)?;
        }
        ParseFormat::Json => {
            for record in records {
                writeln!(out, "{}", export::record_json(count, &record?)).map_err(write_err)?;
                count += 1;
            }
            out.flush().map_err(write_err)?;
        }
    }
    tracing::info!("parsed {count} records");
    Ok(())
}

fn stats(input: &args::InputArgs, json: bool) -> Outcome {
    let mut acc = StatsAccumulator::new();
    for record in read_capture(&input.input)? {
        acc.accumulate(&record?);
    }
    let snapshot = acc.snapshot();
    if json {
        println!("{}", snapshot.to_json());
    } else {
        print!("{}", export::stats_text(&snapshot));
    }
    Ok(())
}

async fn replay(a: ReplayArgs, json: bool) -> Outcome {
    if !(a.rate.is_finite() && a.rate > 0.0) {
        return Err(usage(format!("--rate must be positive, got {}", a.rate)));
    }
    let target = SocketAddrV4::new(a.target_ip, a.port);
    let sent = replay_capture(&a.input.input, target, a.rate).await.map_err(|e| match e {
        CaptureError::Io(io) if io.kind() != io::ErrorKind::NotFound => Failure::Protocol(io.into()),
        other => Failure::Data(other.into()),
    })?;
    if json {
        print_json(&json!({ "target": target.to_string(), "sent": sent }));
    } else {
        println!("replayed {sent} datagrams to {target}");
    }
    Ok(())
}

fn emulator_config(a: &EmulateArgs) -> Result<EmulatorConfig, Failure> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .map_err(Failure::Data)?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", path.display()))
                .map_err(Failure::Data)?
        }
        None => EmulatorConfig::default(),
    };
    cfg.bind_address = a.bind;
    cfg.command_port = a.port;
    cfg.report_target_port = a.report_port;
    cfg.report_source_port = a.report_source_port;
    if let Some(rate) = a.rate {
        cfg.frame_rate_hz = rate;
    }
    if let Some(seed) = a.seed {
        cfg.rng_seed = seed;
    }
    if !a.stations.is_empty() {
        cfg.stations = a.stations.clone();
    }
    if a.target_ip.is_some() {
        cfg.default_target = a.target_ip;
    }
    if a.lenient {
        cfg.strict_ordering = false;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

async fn emulate(a: EmulateArgs) -> Outcome {
    let cfg = emulator_config(&a)?;
    let mut interrupt = Interrupt::install()?;
    let emulator = Emulator::spawn(cfg)
        .await
        .map_err(|e| Failure::Protocol(anyhow!(e).context("starting emulator")))?;
    let mut events = emulator.subscribe_events();
    eprintln!(
        "emulating on {} (reports from {})",
        emulator.command_addr(),
        emulator.report_source_addr()
    );
    let printer = async {
        let mut stdout = io::stdout();
        loop {
            match events.recv().await {
                Ok(event) => {
                    let _ = writeln!(stdout, "{}", event.to_json_line());
                    let _ = stdout.flush();
                }
                Err(tokio::sync::broadcast::error::RecvError::Lagged(n)) => {
                    tracing::warn!("{n} events not printed");
                }
                Err(tokio::sync::broadcast::error::RecvError::Closed) => break,
            }
        }
    };
    tokio::select! {
        r = interrupt.wait() => r,
        _ = printer => Ok(()),
    }
}

async fn serve(a: ServeArgs) -> Outcome {
    if !(a.stream_rate.is_finite() && a.stream_rate > 0.0) {
        return Err(usage(format!("--stream-rate must be positive, got {}", a.stream_rate)));
    }
    let mut interrupt = Interrupt::install()?;
    let collector = Collector::spawn(CollectorConfig {
        listen_port: a.report_port,
        mac_allowlist: allowlist(&a.filters),
        capture_path: a.out.clone(),
        ..Default::default()
    })
    .await
    .map_err(|e| Failure::Protocol(e.into()))?;
    let collector = Arc::new(collector);
    let mut config = ServiceConfig::default();
    config.controller.command_port = a.command_port;
    config.stream_rate_hz = a.stream_rate;
    let state = AppState::new(config, collector.clone());
    let addr = SocketAddr::from((a.listen, a.http_port));
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .with_context(|| format!("binding {addr}"))
        .map_err(Failure::Protocol)?;
    eprintln!(
        "serving http://{} (reports on {})",
        listener.local_addr().map_err(|e| Failure::Protocol(e.into()))?,
        collector.local_addr()
    );
    let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(zcsi_service::serve(listener, state, async {
        let _ = stop_rx.await;
    }));
    let waited = interrupt.wait().await;
    let _ = stop_tx.send(());
    // open streams keep the server alive; give them a moment, then move on
    let _ = tokio::time::timeout(Duration::from_secs(2), server).await;
    collector.shutdown().await;
    waited
}
