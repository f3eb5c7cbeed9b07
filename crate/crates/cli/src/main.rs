//! `thalamus` command-line front end.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thalamus_core::dsp::{apply_offline, validate_offline_pipeline, SeedContext};
use thalamus_core::ingest::{self, CsvMapping, IngestError, LoadReport, RecordedStream};
use thalamus_core::sync::{extract_epoch, Epoch};
use thalamus_core::wire::DataFrame;
use thalamus_core::{decode_frame, encode_frame, Message, Sample, SignalDescriptor, SignalKey, Timestamp, TransformSpec};
use thalamus_hub::{Client, HubConfig, HubError};

#[derive(Parser)]
#[command(name = "thalamus", version, about = "Multimodal sensing simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the hub.
    Serve {
        #[arg(long, env = "THALAMUS_CONFIG")]
        config: PathBuf,
        /// Override the configured listen address.
        #[arg(long)]
        listen: Option<String>,
    },
    /// Load a dataset and report what was found.
    Validate {
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        source: SourceArgs,
    },
    /// Apply a pipeline offline and write a JSON dataset.
    Transform {
        #[arg(long = "in")]
        input: PathBuf,
        #[command(flatten)]
        source: SourceArgs,
        /// JSON array of transform specs, or a path to a file holding one.
        #[arg(long)]
        pipeline: String,
        #[arg(long)]
        out: PathBuf,
        /// Seed for noise stages that do not set their own.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Subscribe to a running hub and record data frames as NDJSON.
    Probe {
        #[arg(long, default_value = "127.0.0.1:7331")]
        connect: String,
        /// Signal to subscribe to, as device/signal. Repeatable.
        #[arg(long = "subscribe", required = true)]
        subscribe: Vec<String>,
        #[arg(long)]
        pipeline: Option<String>,
        #[arg(long)]
        count: Option<u64>,
        /// Stop after this many seconds.
        #[arg(long)]
        duration: Option<f64>,
        /// Output file; standard output if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "probe")]
        id: String,
    },
    /// Cut an inclusive time window out of an NDJSON recording.
    Extract {
        #[arg(long, alias = "from")]
        recording: PathBuf,
        #[arg(long)]
        t0: u64,
        #[arg(long)]
        t1: u64,
        /// Tag every output frame with this epoch label.
        #[arg(long)]
        label: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a stats snapshot from a running hub.
    Stats {
        #[arg(long, default_value = "127.0.0.1:7331")]
        connect: String,
        #[arg(long, env = "THALAMUS_ADMIN_TOKEN")]
        token: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args)]
struct SourceArgs {
    /// Dataset format; guessed from the file extension if omitted.
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// CSV column mapping as JSON (or a path to one). Defaults to a `t`
    /// timestamp column with every other column as a channel.
    #[arg(long)]
    mapping: Option<String>,
    #[arg(long, default_value = "dataset")]
    device_id: String,
    /// Signal name; defaults to the file stem.
    #[arg(long)]
    signal: Option<String>,
}

/// A failed command: exit code plus a one-line `error[kind]: detail` reason.
struct Failure {
    code: u8,
    kind: String,
    detail: String,
}

fn fail(code: u8, kind: impl Into<String>, detail: impl Display) -> Failure {
    Failure {
        code,
        kind: kind.into(),
        detail: detail.to_string(),
    }
}

impl From<IngestError> for Failure {
    fn from(e: IngestError) -> Self {
        fail(1, e.kind(), e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Serve { config, listen } => serve(&config, listen),
        Command::Validate { dataset, source } => validate(&dataset, &source),
        Command::Transform {
            input,
            source,
            pipeline,
            out,
            seed,
        } => transform(&input, &source, &pipeline, &out, seed),
        Command::Probe {
            connect,
            subscribe,
            pipeline,
            count,
            duration,
            out,
            id,
        } => runtime().and_then(|rt| {
            rt.block_on(probe(
                &connect,
                &subscribe,
                pipeline.as_deref(),
                count,
                duration,
                out.as_deref(),
                &id,
            ))
        }),
        Command::Extract {
            recording,
            t0,
            t1,
            label,
            out,
        } => extract(&recording, t0, t1, label, out.as_deref()),
        Command::Stats { connect, token } => runtime().and_then(|rt| rt.block_on(stats(&connect, &token))),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let detail = f.detail.replace('\n', " ");
            eprintln!("error[{}]: {detail}", f.kind);
            ExitCode::from(f.code)
        }
    }
}

fn runtime() -> Result<tokio::runtime::Runtime, Failure> {
    tokio::runtime::Runtime::new().map_err(|e| fail(1, "io_error", e))
}

fn init_logging() {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_ansi(false)
        .init();
}

fn serve(config: &Path, listen: Option<String>) -> Result<(), Failure> {
    init_logging();
    let mut cfg = HubConfig::load(config).map_err(|e| fail(2, "config_error", e))?;
    if let Some(l) = listen {
        cfg.listen = l;
    }
    let rt = runtime()?;
    rt.block_on(async move {
        // Handlers go in before "listening" is logged, so an early signal
        // is never fatal.
        let stop = StopSignals::install().map_err(|e| fail(1, "io_error", e))?;
        let hub = thalamus_hub::start(cfg).await.map_err(|e| match e {
            HubError::Config(e) => fail(2, "config_error", e),
            e @ HubError::Bind { .. } => fail(3, "bind_error", e),
        })?;
        stop.wait(&hub).await;
        hub.shutdown().await;
        Ok(())
    })
}

#[cfg(unix)]
struct StopSignals {
    int: tokio::signal::unix::Signal,
    term: tokio::signal::unix::Signal,
    usr1: tokio::signal::unix::Signal,
}

#[cfg(unix)]
impl StopSignals {
    fn install() -> std::io::Result<Self> {
        use tokio::signal::unix::{signal, SignalKind};
        Ok(StopSignals {
            int: signal(SignalKind::interrupt())?,
            term: signal(SignalKind::terminate())?,
            usr1: signal(SignalKind::user_defined1())?,
        })
    }

    /// Returns on SIGINT or SIGTERM; SIGUSR1 logs a stats snapshot.
    async fn wait(mut self, hub: &thalamus_hub::HubHandle) {
        loop {
            tokio::select! {
                _ = self.int.recv() => return,
                _ = self.term.recv() => return,
                _ = self.usr1.recv() => {
                    let snap = serde_json::to_string(&hub.stats()).unwrap_or_default();
                    tracing::info!(stats = %snap, "stats");
                }
            }
        }
    }
}

#[cfg(not(unix))]
struct StopSignals;

#[cfg(not(unix))]
impl StopSignals {
    fn install() -> std::io::Result<Self> {
        Ok(StopSignals)
    }

    async fn wait(self, _hub: &thalamus_hub::HubHandle) {
        let _ = tokio::signal::ctrl_c().await;
    }
}

/// Reads `arg` as a file if it names one, otherwise as inline JSON.
fn json_arg<T: serde::de::DeserializeOwned>(arg: &str, what: &str) -> Result<T, Failure> {
    let text = if Path::new(arg).is_file() {
        std::fs::read_to_string(arg).map_err(|e| fail(1, "io_error", format_args!("{arg}: {e}")))?
    } else {
        arg.to_string()
    };
    serde_json::from_str(&text).map_err(|e| fail(1, "parse_error", format_args!("{what}: {e}")))
}

fn guess_format(path: &Path, explicit: Option<Format>) -> Result<Format, Failure> {
    if let Some(f) = explicit {
        return Ok(f);
    }
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("csv") => Ok(Format::Csv),
        Some("json") => Ok(Format::Json),
        _ => Err(fail(1, "usage", "cannot guess the format; pass --format csv|json")),
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|source| {
        IngestError::Io {
            path: path.display().to_string(),
            source,
        }
        .into()
    })
}

/// Header cells of a CSV file, with surrounding quotes removed.
fn csv_header(text: &str) -> Vec<String> {
    text.lines()
        .next()
        .unwrap_or("")
        .split(',')
        .map(|c| c.trim().trim_matches('"').to_string())
        .collect()
}

fn load_dataset(path: &Path, src: &SourceArgs) -> Result<(RecordedStream, LoadReport), Failure> {
    let format = guess_format(path, src.format)?;
    let text = read_text(path)?;
    let signal = src.signal.clone().unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "signal".into())
    });
    let mut descriptor = SignalDescriptor {
        device_id: src.device_id.clone(),
        signal,
        unit: String::new(),
        rate_hz: 1.0,
        channels: 1,
    };
    let (stream, report) = match format {
        Format::Csv => {
            let mapping: CsvMapping = match &src.mapping {
                Some(m) => json_arg(m, "mapping")?,
                None => {
                    let header = csv_header(&text);
                    CsvMapping {
                        timestamp_column: "t".into(),
                        value_columns: header.into_iter().filter(|c| c != "t").collect(),
                        na_tokens: ingest::default_na_tokens(),
                    }
                }
            };
            descriptor.channels = mapping.value_columns.len().max(1) as u32;
            ingest::read_csv(text.as_bytes(), &mapping, descriptor)?
        }
        Format::Json => {
            // Channel count comes from the first record.
            let channels = serde_json::from_str::<serde_json::Value>(&text)
                .ok()
                .and_then(|v| v.get(0)?.get("values")?.as_array().map(Vec::len))
                .unwrap_or(1);
            descriptor.channels = channels.max(1) as u32;
            ingest::parse_json_dataset(&text, descriptor)?
        }
    };
    Ok((stream, report))
}

fn validate(dataset: &Path, src: &SourceArgs) -> Result<(), Failure> {
    let (s, report) = load_dataset(dataset, src)?;
    let rate = s
        .estimated_rate_hz()
        .map(|r| format!("{r:.3}"))
        .unwrap_or_else(|| "NA".into());
    println!(
        "rows={} missing={} span_ms={} rate_hz={} reordered={}",
        s.len(),
        s.missing_count(),
        s.span_ms(),
        rate,
        report.reordered
    );
    Ok(())
}

fn transform(input: &Path, src: &SourceArgs, pipeline: &str, out: &Path, seed: u64) -> Result<(), Failure> {
    let specs: Vec<TransformSpec> = json_arg(pipeline, "pipeline")?;
    validate_offline_pipeline(&specs).map_err(|e| fail(1, "invalid_pipeline", e))?;
    let (s, _) = load_dataset(input, src)?;
    let ctx = SeedContext {
        global_seed: seed,
        device_id: &s.descriptor.device_id,
        signal: &s.descriptor.signal,
    };
    let outputs = apply_offline(s.samples(), &specs, ctx).map_err(|e| fail(1, "invalid_pipeline", e))?;
    let (ts, rows): (Vec<Timestamp>, Vec<_>) = outputs.into_iter().map(|o| (o.t, o.values)).unzip();
    let text = ingest::to_json_dataset(&ts, &rows).map_err(|e| fail(1, "encode_error", e))?;
    std::fs::write(out, text).map_err(|e| fail(1, "io_error", format_args!("{}: {e}", out.display())))
}

fn parse_key(s: &str) -> Result<SignalKey, Failure> {
    match s.split_once('/') {
        Some((d, sig)) if !d.is_empty() && !sig.is_empty() => Ok(SignalKey::new(d, sig)),
        _ => Err(fail(1, "usage", format_args!("expected device/signal, got {s:?}"))),
    }
}

fn open_out(out: Option<&Path>) -> Result<Box<dyn Write>, Failure> {
    Ok(match out {
        Some(p) => Box::new(std::io::BufWriter::new(
            std::fs::File::create(p).map_err(|e| fail(1, "io_error", format_args!("{}: {e}", p.display())))?,
        )),
        None => Box::new(std::io::BufWriter::new(std::io::stdout())),
    })
}

async fn probe(
    connect: &str,
    subscribe: &[String],
    pipeline: Option<&str>,
    count: Option<u64>,
    duration: Option<f64>,
    out: Option<&Path>,
    id: &str,
) -> Result<(), Failure> {
    let selection = subscribe.iter().map(|s| parse_key(s)).collect::<Result<Vec<_>, _>>()?;
    let transforms: Vec<TransformSpec> = match pipeline {
        Some(p) => json_arg(p, "pipeline")?,
        None => Vec::new(),
    };
    let hub_err = |e: thalamus_hub::ClientError| fail(1, e.code().to_string(), e);
    let mut client = Client::connect(connect).await.map_err(hub_err)?;
    client.hello(id).await.map_err(hub_err)?;
    client.subscribe(selection, transforms).await.map_err(hub_err)?;

    let mut w = open_out(out)?;
    let io_err = |e: std::io::Error| fail(1, "io_error", e);
    let deadline = duration.map(|d| tokio::time::Instant::now() + Duration::from_secs_f64(d.max(0.0)));
    let mut seen = 0u64;
    while count.is_none_or(|n| seen < n) {
        let next = match deadline {
            Some(d) => match tokio::time::timeout_at(d, client.next_frame()).await {
                Ok(r) => r,
                Err(_) => break,
            },
            None => client.next_frame().await,
        };
        let Some(frame) = next.map_err(hub_err)? else { break };
        match frame.message {
            Message::Data(_) => {
                w.write_all(&frame.line).map_err(io_err)?;
                w.write_all(b"\n").map_err(io_err)?;
                seen += 1;
            }
            Message::Error { code, message } => return Err(fail(1, code, message)),
            _ => {}
        }
    }
    w.flush().map_err(io_err)
}

fn extract(recording: &Path, t0: u64, t1: u64, label: Option<String>, out: Option<&Path>) -> Result<(), Failure> {
    let text = read_text(recording)?;
    let mut samples: Vec<Sample> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = |reason: String| {
            Failure::from(IngestError::Parse {
                line_no: i + 1,
                column: String::new(),
                reason,
            })
        };
        match decode_frame(line.as_bytes()).map_err(|e| at(e.to_string()))? {
            Message::Data(d) => samples.push(d.into_sample()),
            other => return Err(at(format!("expected a data frame, got {}", other.type_name()))),
        }
    }
    let epoch = Epoch::new(Timestamp(t0), Timestamp(t1), label.clone().unwrap_or_default())
        .map_err(|e| fail(1, "usage", e))?;
    let mut w = open_out(out)?;
    let io_err = |e: std::io::Error| fail(1, "io_error", e);
    for s in extract_epoch(&samples, &epoch) {
        let mut frame = DataFrame::from(s);
        frame.epoch = label.clone();
        let bytes = encode_frame(&Message::Data(frame)).map_err(|e| fail(1, "encode_error", e))?;
        w.write_all(&bytes).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

async fn stats(connect: &str, token: &str) -> Result<(), Failure> {
    let hub_err = |e: thalamus_hub::ClientError| fail(1, e.code().to_string(), e);
    let mut client = Client::connect(connect).await.map_err(hub_err)?;
    client.hello(&format!("stats#{token}")).await.map_err(hub_err)?;
    let detail = client.control("stats", BTreeMap::new()).await.map_err(hub_err)?;
    let value: serde_json::Value = serde_json::from_str(&detail).map_err(|e| fail(1, "decode_error", e))?;
    println!("{}", serde_json::to_string_pretty(&value).unwrap_or(detail));
    Ok(())
}
