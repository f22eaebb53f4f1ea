//! The `brickpad` command line.

pub mod config;
pub mod repl;

use std::fs;
use std::io::{self, BufRead, IsTerminal, Write};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use brickpad_core::emulator::{parse_trace_csv, BrickConfig, EmuServer, EventSink, VirtualBrick};
use brickpad_core::motorctl::{MotorHandle, MotorPort};
use brickpad_core::protocol::RunState;
use brickpad_core::schema::{parse_named, run_schema, turn_timeout_ms, RunEvent, RunOptions, RunReport};
use brickpad_core::session::{Session, SessionConfig, Telemetry};
use brickpad_service::{Service, ServiceOptions};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::config::CliConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "brickpad", version, about = "Drive a brick over Bluetooth serial, TCP or the emulator")]
pub struct Cli {
    /// Link endpoint: serial:<device>, tcp:<host>:<port> or emu:
    #[arg(long, global = true, value_name = "ENDPOINT")]
    pub link: Option<String>,
    /// Config file [default: ~/.config/brickpad/config.toml]
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// One motor command over a short-lived session
    Motor(MotorArgs),
    /// Raw hex console
    Repl,
    /// Link and brick status
    Status {
        #[arg(long)]
        json: bool,
    },
    /// Check or run a schema file
    #[command(subcommand)]
    Schema(SchemaCommand),
    /// Host the control pad API bound to one session
    Serve(ServeArgs),
    /// Host an emulated brick on TCP
    Emu(EmuArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MotorAction {
    Cw,
    Ccw,
    Stop,
    Relax,
    Turn,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct MotorArgs {
    /// A, B or C
    pub port: MotorPort,
    pub action: MotorAction,
    /// 1..100 for cw/ccw; -100..100 for turn
    #[arg(long)]
    pub power: Option<i32>,
    /// Turn this many degrees, then stop (turn only)
    #[arg(long, default_value_t = 0)]
    pub degrees: u32,
    /// Stop with a coast instead of a brake
    #[arg(long)]
    pub coast: bool,
    /// Keep the session open until interrupted
    #[arg(long)]
    pub hold: bool,
}

#[derive(Debug, Subcommand)]
pub enum SchemaCommand {
    /// Parse only
    Check { file: PathBuf },
    /// Run against the robot
    Run {
        file: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Bind address [default: 127.0.0.1:8080]
    #[arg(long, value_name = "ADDR")]
    pub http: Option<String>,
    /// Built pad to serve at /
    #[arg(long, value_name = "DIR")]
    pub assets: Option<PathBuf>,
    /// Allow cross-origin requests (pad dev server)
    #[arg(long)]
    pub dev_cors: bool,
}

#[derive(Debug, Args)]
pub struct EmuArgs {
    /// Port, or host:port
    #[arg(long, default_value = "7000")]
    pub listen: String,
    #[arg(long, value_name = "MS")]
    pub sleep_limit: Option<u32>,
    #[arg(long, value_name = "MV")]
    pub battery: Option<u16>,
    /// Sensor trace CSV for an input port, as PORT=FILE
    #[arg(long, value_name = "PORT=FILE")]
    pub trace: Vec<String>,
    /// Do not print brick events
    #[arg(long)]
    pub quiet: bool,
}

/// A failed command: what to print and the exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn usage(message: impl ToString) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.to_string(),
        }
    }

    fn failed(message: impl ToString) -> Self {
        Self {
            code: EXIT_FAILURE,
            message: message.to_string(),
        }
    }
}

type Outcome = Result<(), Failure>;

/// Terminal streams, swappable in tests.
pub struct Io<'a> {
    pub input: &'a mut dyn BufRead,
    pub out: &'a mut dyn Write,
    pub interactive: bool,
}

pub fn process_env(key: &str) -> Option<String> {
    std::env::var(key).ok()
}

/// Run a parsed command line; returns the exit code.
pub fn run(cli: Cli, env: &dyn Fn(&str) -> Option<String>, io: Io<'_>) -> i32 {
    match dispatch(cli, env, io) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("brickpad: {}", f.message);
            f.code
        }
    }
}

fn dispatch(cli: Cli, env: &dyn Fn(&str) -> Option<String>, io: Io<'_>) -> Outcome {
    let file = config::load_file(cli.config.as_deref(), env).map_err(Failure::usage)?;
    let http_flag = match &cli.command {
        Command::Serve(a) => a.http.clone(),
        _ => None,
    };
    let cfg = config::resolve(cli.link.as_deref(), http_flag.as_deref(), env, file).map_err(Failure::usage)?;
    match cli.command {
        Command::Motor(args) => cmd_motor(&cfg, &args, io.out),
        Command::Repl => cmd_repl(&cfg, io),
        Command::Status { json } => cmd_status(&cfg, json, io.out),
        Command::Schema(SchemaCommand::Check { file }) => cmd_schema_check(&file, io.out),
        Command::Schema(SchemaCommand::Run { file, json }) => cmd_schema_run(&cfg, &file, json, io.out),
        Command::Serve(args) => cmd_serve(&cfg, &args, io.out),
        Command::Emu(args) => cmd_emu(&args, io.out),
    }
}

fn write_out(out: &mut dyn Write, text: impl std::fmt::Display) -> Outcome {
    writeln!(out, "{text}")
        .and_then(|_| out.flush())
        .map_err(|e| Failure::failed(format!("write failed: {e}")))
}

/// Connect a session for a foreground command. Connection problems exit 1.
fn open_session(cfg: &CliConfig, session: SessionConfig) -> Result<Session, Failure> {
    let endpoint = cfg
        .endpoint
        .clone()
        .ok_or_else(|| Failure::usage("no link endpoint; pass --link, set BRICKPAD_LINK or add `link` to the config file"))?;
    Session::open(endpoint.clone(), session).map_err(|e| Failure::failed(format!("{endpoint}: {e}")))
}

/// Short-lived sessions poll nothing in the background.
fn oneshot(cfg: &CliConfig) -> SessionConfig {
    SessionConfig {
        polling: false,
        ..cfg.session.clone()
    }
}

/// Receives once on Ctrl-C.
fn interrupted() -> mpsc::Receiver<()> {
    let (tx, rx) = mpsc::channel();
    let tx = Mutex::new(Some(tx));
    let _ = ctrlc::set_handler(move || {
        if let Some(tx) = tx.lock().unwrap().take() {
            let _ = tx.send(());
        }
    });
    rx
}

fn cmd_motor(cfg: &CliConfig, args: &MotorArgs, out: &mut dyn Write) -> Outcome {
    let power = args.power.unwrap_or(cfg.power.into());
    match args.action {
        MotorAction::Cw | MotorAction::Ccw if !(1..=100).contains(&power) => {
            return Err(Failure::usage(format!("--power {power} out of range 1..100")))
        }
        MotorAction::Turn if !(-100..=100).contains(&power) => {
            return Err(Failure::usage(format!("--power {power} out of range -100..100")))
        }
        MotorAction::Turn => {}
        _ if args.degrees > 0 => return Err(Failure::usage("--degrees only applies to turn")),
        _ => {}
    }

    let session = open_session(cfg, SessionConfig {
        background: args.hold,
        ..oneshot(cfg)
    })?;
    let mut motor = MotorHandle::bound(args.port, session.clone());
    motor.label = cfg.labels[usize::from(args.port.index())].clone();
    motor.brake_on_stop = cfg.brake && !args.coast;

    let result = match args.action {
        MotorAction::Cw => motor.set_power(power).and_then(|_| motor.turn_cw()),
        MotorAction::Ccw => motor.set_power(power).and_then(|_| motor.turn_ccw()),
        MotorAction::Stop => motor.halt(),
        MotorAction::Relax => motor.relax(),
        MotorAction::Turn => motor.turn(power, args.degrees),
    };
    if let Err(e) = result {
        session.disconnect();
        return Err(Failure::failed(e));
    }
    write_out(out, format!("motor {} ({}): {:?}", args.port, motor.label, args.action).to_lowercase())?;

    if args.action == MotorAction::Turn && args.degrees > 0 && !args.hold {
        let limit = Duration::from_millis(turn_timeout_ms(args.degrees, power as i8, 9.0));
        if let Err(e) = wait_idle(&session, args.port, limit) {
            session.disconnect();
            return Err(e);
        }
    }
    if args.hold {
        write_out(out, "holding the link; Ctrl-C to release")?;
        let _ = interrupted().recv();
    }
    session.disconnect();
    Ok(())
}

fn wait_idle(session: &Session, port: MotorPort, limit: Duration) -> Outcome {
    let start = Instant::now();
    loop {
        let (state, _) = session.output_state(port.index()).map_err(Failure::failed)?;
        if state.run_state == RunState::Idle {
            return Ok(());
        }
        if start.elapsed() > limit {
            return Err(Failure::failed(format!("motor {port} did not finish its turn")));
        }
        std::thread::sleep(Duration::from_millis(50));
    }
}

fn cmd_repl(cfg: &CliConfig, io: Io<'_>) -> Outcome {
    let session = open_session(cfg, cfg.session.clone())?;
    if io.interactive {
        write_out(io.out, format!("connected to {}; hex telegrams, `quit` to leave", session.endpoint().unwrap()))?;
    }
    let connected = repl::run(&session, io.input, io.out, io.interactive).map_err(Failure::failed)?;
    session.disconnect();
    if connected {
        Ok(())
    } else {
        Err(Failure::failed("link lost"))
    }
}

pub fn status_json(session: &Session, telemetry: Option<&Telemetry>, labels: &[String; 3]) -> serde_json::Value {
    let status = session.status();
    let motors: Vec<_> = MotorPort::ALL
        .iter()
        .map(|&port| {
            let m = telemetry.map(|t| t.motors[usize::from(port.index())]);
            json!({
                "port": port,
                "label": labels[usize::from(port.index())],
                "power": m.map(|m| m.state.power),
                "run_state": m.map(|m| format!("{:?}", m.state.run_state)),
                "tacho": m.map(|m| m.counters.tacho_count),
                "block_tacho": m.map(|m| m.counters.block_tacho),
                "rotation": m.map(|m| m.counters.rotation_count),
            })
        })
        .collect();
    json!({
        "phase": status.phase,
        "endpoint": status.endpoint.map(|e| e.to_string()),
        "battery_mv": telemetry.map(|t| t.battery_mv),
        "motors": motors,
        "keepalive_ms": status.keepalive_interval_ms,
        "sleep_limit_ms": status.sleep_limit_ms,
    })
}

fn cmd_status(cfg: &CliConfig, as_json: bool, out: &mut dyn Write) -> Outcome {
    let Some(endpoint) = cfg.endpoint.clone() else {
        return Err(Failure::usage("no link endpoint; pass --link, set BRICKPAD_LINK or add `link` to the config file"));
    };
    let session = Session::new(oneshot(cfg));
    let connected = session.connect(endpoint);
    let telemetry = match &connected {
        Ok(()) => session.poll_telemetry().ok(),
        Err(_) => None,
    };
    let report = status_json(&session, telemetry.as_ref(), &cfg.labels);
    session.disconnect();

    if as_json {
        write_out(out, &report)?;
    } else {
        let mut text = format!("phase       {}\n", report["phase"].as_str().unwrap_or("?"));
        text += &format!("endpoint    {}\n", cfg.endpoint.as_ref().unwrap());
        if let Some(t) = &telemetry {
            text += &format!("battery     {} mV\n", t.battery_mv);
        }
        if let (Some(k), Some(l)) = (report["keepalive_ms"].as_u64(), report["sleep_limit_ms"].as_u64()) {
            text += &format!("keep-alive  every {k} ms (brick sleeps after {l} ms)\n");
        }
        if let Some(t) = &telemetry {
            for (port, m) in MotorPort::ALL.iter().zip(&t.motors) {
                text += &format!(
                    "motor {port} {:<8} tacho {:>6}  block {:>6}  rotation {:>6}  power {:>4}  {:?}\n",
                    cfg.labels[usize::from(port.index())],
                    m.counters.tacho_count,
                    m.counters.block_tacho,
                    m.counters.rotation_count,
                    m.state.power,
                    m.state.run_state,
                );
            }
        }
        if let Err(e) = &connected {
            text += &format!("error       {e}\n");
        }
        write!(out, "{text}").map_err(Failure::failed)?;
    }
    match connected {
        Ok(()) if telemetry.is_some() => Ok(()),
        Ok(()) => Err(Failure::failed("brick did not answer the status queries")),
        Err(e) => Err(Failure::failed(e)),
    }
}

fn read_schema(file: &PathBuf) -> Result<brickpad_core::schema::Schema, Failure> {
    let text = fs::read_to_string(file).map_err(|e| Failure::failed(format!("{}: {e}", file.display())))?;
    let name = file.file_stem().map_or("schema".into(), |s| s.to_string_lossy().into_owned());
    parse_named(&name, &text).map_err(|e| Failure::failed(format!("{}:{}: {}", file.display(), e.line, e.reason)))
}

fn cmd_schema_check(file: &PathBuf, out: &mut dyn Write) -> Outcome {
    let schema = read_schema(file)?;
    write_out(
        out,
        format!(
            "{}: ok, {} steps ({} when expanded)",
            file.display(),
            schema.steps.len(),
            schema.expanded_len()
        ),
    )
}

fn cmd_schema_run(cfg: &CliConfig, file: &PathBuf, as_json: bool, out: &mut dyn Write) -> Outcome {
    let schema = read_schema(file)?;
    let session = open_session(cfg, cfg.session.clone())?;
    let options = RunOptions::default();
    let stop = options.stop.clone();
    let stopper = interrupted();
    let watcher = std::thread::spawn(move || {
        if stopper.recv().is_ok() {
            stop.stop();
        }
    });
    drop(watcher);

    let clock = session.clock();
    let mut write_err = None;
    let report: RunReport = run_schema(&schema, &session, &*clock, &options, &mut |event| {
        if as_json {
            return;
        }
        let line = match event {
            RunEvent::StepStarted { .. } | RunEvent::Finished(_) => return,
            RunEvent::Started { total } => format!("running {} ({total} steps)", schema.name),
            RunEvent::StepFinished(o) => format!(
                "[{}] {} ... {}",
                o.index,
                o.step,
                o.reply_hex.as_deref().or(o.status.as_deref()).unwrap_or("sent")
            ),
        };
        if let Err(e) = writeln!(out, "{line}").and_then(|_| out.flush()) {
            write_err.get_or_insert(e);
        }
    });
    session.disconnect();
    if let Some(e) = write_err {
        return Err(Failure::failed(e));
    }

    if as_json {
        write_out(out, serde_json::to_string(&report).expect("report serializes"))?;
    } else {
        let elapsed = report.finished_ms - report.started_ms;
        match &report.aborted {
            None => write_out(out, format!("done: {} steps in {elapsed} ms", report.steps_executed))?,
            Some(reason) => write_out(
                out,
                format!("aborted after {} of {} steps: {reason}", report.steps_executed, report.total_steps),
            )?,
        }
    }
    match report.aborted {
        None => Ok(()),
        Some(reason) => Err(Failure::failed(reason)),
    }
}

fn cmd_serve(cfg: &CliConfig, args: &ServeArgs, out: &mut dyn Write) -> Outcome {
    let runtime = tokio::runtime::Runtime::new().map_err(Failure::failed)?;
    let listener = runtime
        .block_on(tokio::net::TcpListener::bind(&cfg.http))
        .map_err(|e| Failure::failed(format!("cannot bind {}: {e}", cfg.http)))?;
    let addr = listener.local_addr().map_err(Failure::failed)?;

    let session = Session::new(SessionConfig {
        polling: true,
        keepalive: true,
        background: true,
        ..cfg.session.clone()
    });
    if let Some(endpoint) = cfg.endpoint.clone() {
        if let Err(e) = session.connect(endpoint.clone()) {
            log::warn!("{endpoint}: {e}; serving disconnected");
        }
    }
    let service = Service::new(
        session.clone(),
        ServiceOptions {
            default_power: cfg.power,
            brake_on_stop: cfg.brake,
            labels: cfg.labels.clone(),
            dev_cors: args.dev_cors,
            assets: args.assets.clone(),
            ..ServiceOptions::default()
        },
    );
    write_out(out, format!("listening on http://{addr}"))?;
    let served = runtime.block_on(brickpad_service::serve(listener, service, async {
        let _ = tokio::signal::ctrl_c().await;
    }));
    session.disconnect();
    served.map_err(Failure::failed)
}

fn listen_addr(text: &str) -> Result<SocketAddr, Failure> {
    if let Ok(port) = text.parse::<u16>() {
        return Ok(SocketAddr::from(([127, 0, 0, 1], port)));
    }
    text.parse()
        .map_err(|_| Failure::usage(format!("--listen {text:?}: expected a port or host:port")))
}

fn cmd_emu(args: &EmuArgs, out: &mut dyn Write) -> Outcome {
    let addr = listen_addr(&args.listen)?;
    let defaults = BrickConfig::default();
    let mut brick = VirtualBrick::new(BrickConfig {
        sleep_limit_ms: args.sleep_limit.unwrap_or(defaults.sleep_limit_ms),
        battery_mv: args.battery.unwrap_or(defaults.battery_mv),
        ..defaults
    });
    for arg in &args.trace {
        let (port, path) = arg
            .split_once('=')
            .ok_or_else(|| Failure::usage(format!("--trace {arg:?}: expected PORT=FILE")))?;
        let port: u8 = port
            .parse()
            .map_err(|_| Failure::usage(format!("--trace {arg:?}: bad port")))?;
        let text = fs::read_to_string(path).map_err(|e| Failure::failed(format!("{path}: {e}")))?;
        let trace = parse_trace_csv(&text).map_err(|e| Failure::failed(format!("{path}: {e}")))?;
        brick
            .load_sensor_trace(port, trace)
            .map_err(|e| Failure::usage(format!("--trace {arg:?}: {e}")))?;
    }

    let sink: Option<EventSink> = if args.quiet {
        None
    } else {
        Some(Arc::new(|event| {
            let mut stdout = io::stdout().lock();
            let _ = writeln!(stdout, "{}", event.to_json_line());
            let _ = stdout.flush();
        }))
    };
    let server = EmuServer::bind(addr, brick.shared(), sink)
        .map_err(|e| Failure::failed(format!("cannot listen on {addr}: {e}")))?;
    // stdout carries the event log, so the address goes to stderr
    eprintln!("emulator listening on tcp:{}", server.local_addr());
    let _ = out.flush();
    let _ = interrupted().recv();
    drop(server);
    Ok(())
}

/// Entry point for the binary.
pub fn main_with_args(args: impl IntoIterator<Item = std::ffi::OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let stdin = io::stdin();
    let interactive = stdin.is_terminal();
    let mut input = stdin.lock();
    let mut out = io::stdout();
    run(
        cli,
        &process_env,
        Io {
            input: &mut input,
            out: &mut out,
            interactive,
        },
    )
}
