//! Acceptance gate. Runs every primary criterion in order and prints one
//! `PASS`/`FAIL` line per criterion; exits non-zero if any fail.
//!
//! `cargo test -p thalamus-cli --test acceptance -- 7 9` runs a subset.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use thalamus_core::dsp::{
    add_noise, delay_admit, delay_flush, kalman_step, savgol_coefficients, DelaySpec, DelayState, KalmanParams,
    KalmanState, NoiseKind, NoiseRng, NoiseSpec, Pipeline, SavGolParams, SeedContext,
};
use thalamus_core::ingest::CsvMapping;
use thalamus_core::sync::{align, extract_epoch, pick, Epoch, Reference, Strategy};
use thalamus_core::wire::{DataFrame, Hello, Role, DEFAULT_MAX_FRAME_BYTES};
use thalamus_core::{
    decode_frame, encode_frame, FrameReader, Message, Sample, SampleValue, SignalDescriptor, SignalKey, Timestamp,
    TransformKind, TransformSpec,
};
use thalamus_hub::{start, Client, DeviceConfig, HubClock, HubConfig, HubHandle, ReplayConfig, SourceConfig};

type Outcome = Result<String, String>;
type Criterion = (u32, &'static str, fn(&tokio::runtime::Runtime) -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

const ADMIN: &str = "acc-token";

fn main() {
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .expect("tokio runtime");
    let criteria: [Criterion; 12] = [
        (1, "protocol round-trip", |_| protocol_round_trip()),
        (2, "savgol coefficients", |_| savgol_coefficients_match()),
        (3, "savgol polynomial reproduction", |_| savgol_reproduction()),
        (4, "kalman", |_| kalman()),
        (5, "gaussian noise", |_| gaussian_noise()),
        (6, "missing-value policy", |rt| rt.block_on(missing_policy())),
        (7, "delay", |rt| rt.block_on(delay())),
        (8, "sync", |_| sync()),
        (9, "fan-out", |rt| rt.block_on(fan_out())),
        (10, "loopback", |rt| rt.block_on(loopback())),
        (11, "stress and isolation", |rt| rt.block_on(stress())),
        (12, "control channel", |rt| rt.block_on(control_channel())),
    ];
    let mut failed = 0;
    for (id, name, run) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(|| run(&rt)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {id} ({name}): {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {id} ({name}): {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// Shared helpers

fn desc(device: &str, signal: &str, rate: f64, channels: u32) -> SignalDescriptor {
    SignalDescriptor {
        device_id: device.into(),
        signal: signal.into(),
        unit: "u".into(),
        rate_hz: rate,
        channels,
    }
}

fn num(x: f64) -> SampleValue {
    SampleValue::Number(x)
}

fn write_json_fixture(path: &Path, t0: u64, period_ms: u64, rows: &[Vec<SampleValue>]) {
    let rows: Vec<Value> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| json!({"t": t0 + i as u64 * period_ms, "values": r}))
        .collect();
    std::fs::write(path, serde_json::to_string(&rows).unwrap()).unwrap();
}

fn replayed(path: PathBuf, d: SignalDescriptor, start_delay_ms: u64, looped: bool) -> DeviceConfig {
    DeviceConfig {
        descriptor: d,
        source: SourceConfig::Json { path },
        replay: ReplayConfig {
            start_delay_ms,
            looped,
            ..ReplayConfig::default()
        },
    }
}

async fn hub(devices: Vec<DeviceConfig>) -> Result<HubHandle, String> {
    start(HubConfig {
        listen: "127.0.0.1:0".into(),
        admin_token: ADMIN.into(),
        devices,
        ..HubConfig::default()
    })
    .await
    .map_err(|e| e.to_string())
}

async fn connect(addr: SocketAddr, id: &str) -> Result<Client, String> {
    let mut c = Client::connect(addr).await.map_err(|e| e.to_string())?;
    c.hello(id).await.map_err(|e| e.to_string())?;
    Ok(c)
}

async fn subscriber(addr: SocketAddr, id: &str, keys: &[(&str, &str)], transforms: Vec<TransformSpec>) -> Result<Client, String> {
    let mut c = connect(addr, id).await?;
    let selection = keys.iter().map(|(d, s)| SignalKey::new(*d, *s)).collect();
    c.subscribe(selection, transforms).await.map_err(|e| e.to_string())?;
    Ok(c)
}

fn params(v: Value) -> BTreeMap<String, Value> {
    serde_json::from_value(v).unwrap()
}

/// A data frame with its arrival time on the hub clock.
#[derive(Debug, Clone)]
struct Received {
    at: Timestamp,
    sample: Sample,
}

impl Received {
    fn lag_ms(&self) -> i64 {
        self.at.0 as i64 - self.sample.t.0 as i64
    }
}

enum Event {
    Data(Received),
    Catalog(Vec<SignalDescriptor>),
}

async fn next_event(c: &mut Client, clock: HubClock, limit: Duration) -> Result<Event, String> {
    loop {
        let frame = tokio::time::timeout(limit, c.next_frame())
            .await
            .map_err(|_| format!("no frame within {limit:?}"))?
            .map_err(|e| e.to_string())?
            .ok_or("hub closed the connection")?;
        match frame.message {
            Message::Data(d) => {
                return Ok(Event::Data(Received {
                    at: clock.now(),
                    sample: d.into_sample(),
                }))
            }
            Message::Catalog { signals } => return Ok(Event::Catalog(signals)),
            Message::Error { code, message } => return Err(format!("hub error {code}: {message}")),
            _ => {}
        }
    }
}

async fn collect(c: &mut Client, clock: HubClock, n: usize, limit: Duration) -> Result<Vec<Received>, String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        if let Event::Data(r) = next_event(c, clock, limit).await? {
            out.push(r);
        }
    }
    Ok(out)
}

fn percentile(sorted: &[i64], p: f64) -> i64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn thalamus() -> Command {
    Command::new(env!("CARGO_BIN_EXE_thalamus"))
}

async fn wait_child(child: &mut Child, limit: Duration) -> Result<(), String> {
    let deadline = Instant::now() + limit;
    loop {
        if let Some(status) = child.try_wait().map_err(|e| e.to_string())? {
            ensure!(status.success(), "child exited with {status}");
            return Ok(());
        }
        if Instant::now() > deadline {
            let _ = child.kill();
            return Err(format!("child still running after {limit:?}"));
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

/// Waits until every named session holds a subscription.
async fn wait_subscribed(h: &HubHandle, ids: &[String], limit: Duration) -> Result<(), String> {
    let deadline = Instant::now() + limit;
    loop {
        let snap = h.stats();
        if ids.iter().all(|id| snap.session(id).is_some_and(|s| s.subscriptions > 0)) {
            return Ok(());
        }
        ensure!(Instant::now() < deadline, "subscribers {ids:?} not ready within {limit:?}");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

// ---------------------------------------------------------------------------
// 1. Protocol round-trip

const ALPHABET: &[char] = &['a', 'z', 'Q', '0', '9', '_', '-', '/', ' ', '\n', '\t', '"', '\\', 'µ', 'é', '\u{1}', '😀'];

fn rand_string(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(0..10);
    (0..n).map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())]).collect()
}

fn rand_f64(rng: &mut ChaCha8Rng) -> f64 {
    match rng.random_range(0..5) {
        0 => rng.random_range(-1e6..1e6),
        1 => rng.random_range(-1000..1000) as f64,
        2 => loop {
            let x = f64::from_bits(rng.random());
            if x.is_finite() {
                break x;
            }
        },
        3 => rng.random_range(-1e-300..1e-300),
        _ => 0.0,
    }
}

fn rand_value(rng: &mut ChaCha8Rng) -> SampleValue {
    if rng.random_bool(0.2) {
        SampleValue::Missing
    } else {
        num(rand_f64(rng))
    }
}

fn rand_json(rng: &mut ChaCha8Rng, depth: u32) -> Value {
    let top = if depth == 0 { 5 } else { 7 };
    match rng.random_range(0..top) {
        0 => Value::Null,
        1 => Value::Bool(rng.random()),
        2 => Value::from(rng.random::<u64>()),
        3 => Value::from(rand_f64(rng)),
        4 => Value::from(rand_string(rng)),
        5 => Value::Array((0..rng.random_range(0..4)).map(|_| rand_json(rng, depth - 1)).collect()),
        _ => Value::Object(rand_params(rng, depth - 1).into_iter().collect()),
    }
}

fn rand_params(rng: &mut ChaCha8Rng, depth: u32) -> BTreeMap<String, Value> {
    (0..rng.random_range(0..4))
        .map(|_| (rand_string(rng), rand_json(rng, depth)))
        .collect()
}

fn rand_descriptor(rng: &mut ChaCha8Rng) -> SignalDescriptor {
    SignalDescriptor {
        device_id: rand_string(rng),
        signal: rand_string(rng),
        unit: rand_string(rng),
        rate_hz: rng.random_range(0.001..10_000.0),
        channels: rng.random_range(1..64),
    }
}

fn rand_message(rng: &mut ChaCha8Rng) -> Message {
    const KINDS: [TransformKind; 5] = [
        TransformKind::MissingPolicy,
        TransformKind::Savgol,
        TransformKind::Kalman,
        TransformKind::Noise,
        TransformKind::Delay,
    ];
    let descriptors = |rng: &mut ChaCha8Rng| (0..rng.random_range(0..4)).map(|_| rand_descriptor(rng)).collect();
    match rng.random_range(0..7) {
        0 => Message::Hello(Hello {
            role: if rng.random() { Role::Device } else { Role::Client },
            id: rand_string(rng),
            signals: descriptors(rng),
        }),
        1 => Message::Catalog {
            signals: descriptors(rng),
        },
        2 => Message::Subscribe {
            selection: (0..rng.random_range(0..4))
                .map(|_| SignalKey::new(rand_string(rng), rand_string(rng)))
                .collect(),
            transforms: (0..rng.random_range(0..4))
                .map(|_| TransformSpec {
                    kind: KINDS[rng.random_range(0..KINDS.len())],
                    params: rand_params(rng, 1),
                })
                .collect(),
        },
        3 => Message::Ack {
            of: rand_string(rng),
            ok: rng.random(),
            detail: rand_string(rng),
        },
        4 => Message::Data(DataFrame {
            device_id: rand_string(rng),
            signal: rand_string(rng),
            t: Timestamp(rng.random()),
            values: (0..rng.random_range(1..9)).map(|_| rand_value(rng)).collect(),
            epoch: rng.random_bool(0.3).then(|| rand_string(rng)),
        }),
        5 => Message::Control {
            action: rand_string(rng),
            params: rand_params(rng, 2),
        },
        _ => Message::Error {
            code: rand_string(rng),
            message: rand_string(rng),
        },
    }
}

fn protocol_round_trip() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x7ea1);
    let messages: Vec<Message> = (0..1000).map(|_| rand_message(&mut rng)).collect();
    let mut stream = Vec::new();
    for (i, m) in messages.iter().enumerate() {
        let bytes = encode_frame(m).map_err(|e| format!("message {i}: encode failed: {e}"))?;
        ensure!(bytes.starts_with(b"{\"type\":"), "message {i}: type is not the first key");
        ensure!(bytes.ends_with(b"\n") && bytes.iter().filter(|&&b| b == b'\n').count() == 1, "message {i}: not one line");
        let back = decode_frame(&bytes[..bytes.len() - 1]).map_err(|e| format!("message {i}: decode failed: {e}"))?;
        ensure!(back == *m, "message {i}: decode(encode(m)) != m\n  m:    {m:?}\n  back: {back:?}");
        let again = encode_frame(&back).map_err(|e| e.to_string())?;
        ensure!(again == bytes, "message {i}: re-encoding is not byte-identical");
        stream.extend_from_slice(&bytes);
    }

    let trials = 20;
    for trial in 0..trials {
        let mut reader = FrameReader::new(DEFAULT_MAX_FRAME_BYTES);
        let mut got = Vec::with_capacity(messages.len());
        let mut rest = &stream[..];
        while !rest.is_empty() {
            let cut = rng.random_range(1..=rest.len().min(if trial % 2 == 0 { 7 } else { 4096 }));
            let (chunk, tail) = rest.split_at(cut);
            for r in reader.push(chunk) {
                got.push(r.map_err(|e| format!("trial {trial}: {e}"))?);
            }
            rest = tail;
        }
        ensure!(reader.pending() == 0, "trial {trial}: {} bytes left over", reader.pending());
        ensure!(got == messages, "trial {trial}: re-split sequence differs");
    }
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    Ok(format!(
        "1000 messages, {} bytes, {trials} re-split trials, {:.2}s",
        stream.len(),
        elapsed.as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------
// 2/3. Savitzky-Golay

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

/// Brute force: the smoothing weight of each window position is the fitted
/// value at the centre when the data is a unit impulse at that position.
fn least_squares_weights(window: usize, order: usize) -> Vec<f64> {
    let h = (window / 2) as i64;
    let xs: Vec<f64> = (-h..=h).map(|x| x as f64).collect();
    (0..window)
        .map(|impulse| {
            let y: Vec<f64> = (0..window).map(|i| if i == impulse { 1.0 } else { 0.0 }).collect();
            let m = order + 1;
            let mut ata = vec![vec![0.0; m]; m];
            let mut aty = vec![0.0; m];
            for (x, y) in xs.iter().zip(&y) {
                for r in 0..m {
                    aty[r] += x.powi(r as i32) * y;
                    for c in 0..m {
                        ata[r][c] += x.powi((r + c) as i32);
                    }
                }
            }
            solve(ata, aty)[0]
        })
        .collect()
}

fn savgol_coefficients_match() -> Outcome {
    let lib = savgol_coefficients(&SavGolParams::new(5, 2).map_err(|e| e.to_string())?);
    let oracle = least_squares_weights(5, 2);
    let worst = lib.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure!(lib.len() == 5, "expected 5 weights, got {}", lib.len());
    ensure!(worst <= 1e-12, "(5,2) weights {lib:?} differ from oracle {oracle:?} by {worst:e}");

    let (mut sym, mut sum, mut cases) = (0.0f64, 0.0f64, 0);
    for window in (3..=21).step_by(2) {
        for order in (0..=6).filter(|o| *o < window) {
            let c = savgol_coefficients(&SavGolParams::new(window, order).map_err(|e| e.to_string())?);
            for i in 0..window {
                sym = sym.max((c[i] - c[window - 1 - i]).abs());
            }
            sum = sum.max((c.iter().sum::<f64>() - 1.0).abs());
            cases += 1;
        }
    }
    ensure!(sym <= 1e-12, "symmetry violated by {sym:e}");
    ensure!(sum <= 1e-12, "sum-to-one violated by {sum:e}");
    Ok(format!(
        "(5,2) max |lib-oracle| = {worst:.1e}; {cases} (window, order) pairs, max asymmetry {sym:.1e}, max |sum-1| {sum:.1e}"
    ))
}

fn savgol_reproduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst = 0.0f64;
    let mut points = 0;
    for (window, order) in [(5, 2), (7, 3), (9, 4)] {
        let spec = TransformSpec::new(TransformKind::Savgol)
            .with("window", window as u64)
            .with("order", order as u64);
        for _ in 0..200 {
            let degree = rng.random_range(0..=order);
            let coef: Vec<f64> = (0..=degree).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = |i: u64| -1.0 + 0.05 * i as f64;
            let poly = |x: f64| coef.iter().rev().fold(0.0, |acc, c| acc * x + c);
            let ctx = SeedContext {
                global_seed: 0,
                device_id: "d",
                signal: "s",
            };
            let mut p = Pipeline::new(std::slice::from_ref(&spec), ctx).map_err(|e| e.to_string())?;
            let n = 41u64;
            let mut emitted = Vec::new();
            for i in 0..n {
                let s = Sample::new("d", "s", Timestamp(i), vec![num(poly(x(i)))]);
                emitted.extend(p.apply(s, Timestamp(i)));
            }
            ensure!(
                emitted.len() as u64 == n - window as u64 + 1,
                "({window},{order}): {} interior outputs, expected {}",
                emitted.len(),
                n - window as u64 + 1
            );
            for d in emitted {
                let i = d.sample.t.0;
                ensure!(i >= (window / 2) as u64 && i < n - (window / 2) as u64, "output at edge index {i}");
                let got = d.sample.values[0].as_number().ok_or("missing output")?;
                let err = (got - poly(x(i))).abs();
                worst = worst.max(err);
                ensure!(err <= 1e-9, "({window},{order}) degree {degree}: error {err:e} at index {i}");
                points += 1;
            }
        }
    }
    Ok(format!("600 polynomials, {points} interior points, max error {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// 4. Kalman

/// Textbook scalar random-walk filter.
fn kalman_oracle(q: f64, r: f64, x0: f64, p0: f64, zs: &[f64]) -> Vec<f64> {
    let (mut x, mut p) = (x0, p0);
    zs.iter()
        .map(|z| {
            p += q;
            let k = p / (p + r);
            x += k * (z - x);
            p *= 1.0 - k;
            x
        })
        .collect()
}

fn run_kalman(params: &KalmanParams, zs: &[f64]) -> Vec<f64> {
    let mut st = KalmanState::new(params);
    zs.iter()
        .map(|z| {
            let (next, out) = kalman_step(st, num(*z), params);
            st = next;
            out
        })
        .collect()
}

fn kalman() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let zs: Vec<f64> = (0..500).map(|_| rand_f64(&mut rng)).collect();
    for q in [1e-6, 1.0, 1e6] {
        let p = KalmanParams::new(q, 0.0, 7.0, 1.0).map_err(|e| e.to_string())?;
        let out = run_kalman(&p, &zs);
        ensure!(
            out.iter().zip(&zs).all(|(a, b)| a.to_bits() == b.to_bits()),
            "r=0, q={q}: output is not the measurement sequence"
        );
    }

    let p = KalmanParams::new(0.0, 1.0, 0.0, 1.0).map_err(|e| e.to_string())?;
    let lib = run_kalman(&p, &[1.0; 4]);
    let oracle = kalman_oracle(0.0, 1.0, 0.0, 1.0, &[1.0; 4]);
    let expected = [0.5, 0.6667, 0.75, 0.8];
    for i in 0..4 {
        ensure!((lib[i] - oracle[i]).abs() <= 1e-12, "step {i}: {} vs oracle {}", lib[i], oracle[i]);
        ensure!((lib[i] - expected[i]).abs() <= 1e-4, "step {i}: {} vs {}", lib[i], expected[i]);
    }

    for (q, r) in [(0.0, 1.0), (0.01, 1.0), (1.0, 0.5)] {
        let p = KalmanParams::new(q, r, 0.0, 1.0).map_err(|e| e.to_string())?;
        let errs: Vec<f64> = run_kalman(&p, &[5.0; 40]).iter().map(|x| (x - 5.0).abs()).collect();
        // Strict until the error reaches the resolution of f64 around 5.0.
        let floor = 8.0 * f64::EPSILON * 5.0;
        if let Some(i) = errs.windows(2).position(|w| w[0] > floor && w[1] >= w[0]) {
            return Err(format!("q={q} r={r}: error not strictly decreasing at step {}: {errs:?}", i + 1));
        }
    }
    Ok(format!(
        "r=0 exact over 500 measurements; sequence {:?}; constant-input error strictly decreasing for 3 (q, r) pairs",
        lib.iter().map(|x| (x * 1e4).round() / 1e4).collect::<Vec<_>>()
    ))
}

// ---------------------------------------------------------------------------
// 5. Gaussian noise

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn gaussian_noise() -> Outcome {
    const N: usize = 100_000;
    let spec = NoiseSpec::new(NoiseKind::Gaussian, 1.0, None).map_err(|e| e.to_string())?;
    let draw = |seed: u64| {
        let mut rng = NoiseRng::seeded(seed);
        (0..N)
            .map(|_| add_noise(num(0.0), &spec, &mut rng).as_number().unwrap())
            .collect::<Vec<f64>>()
    };
    let xs = draw(2024);
    let (mean, std) = mean_std(&xs);
    ensure!(mean.abs() < 0.02, "mean {mean}");
    ensure!(std > 0.99 && std < 1.01, "std {std}");

    // Two independent runs of the pipeline, compared as encoded frames.
    let noise = TransformSpec::new(TransformKind::Noise)
        .with("kind", "gaussian")
        .with("amplitude", 1.0)
        .with("seed", 99u64);
    let frames = || -> Result<Vec<u8>, String> {
        let ctx = SeedContext {
            global_seed: 0,
            device_id: "gen",
            signal: "zero",
        };
        let mut p = Pipeline::new(std::slice::from_ref(&noise), ctx).map_err(|e| e.to_string())?;
        let mut out = Vec::new();
        for i in 0..N as u64 {
            for d in p.apply(Sample::new("gen", "zero", Timestamp(i), vec![num(0.0)]), Timestamp(i)) {
                out.extend(encode_frame(&Message::data(d.sample)).map_err(|e| e.to_string())?);
            }
        }
        Ok(out)
    };
    let (a, b) = (frames()?, frames()?);
    ensure!(a == b, "two in-process runs differ");

    // The same through the offline CLI, twice in separate processes.
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let input = dir.path().join("zero.csv");
    let mut csv = String::from("t,x\n");
    for i in 0..N {
        csv.push_str(&format!("{},0\n", 1_000 + i));
    }
    std::fs::write(&input, csv).map_err(|e| e.to_string())?;
    let pipeline = serde_json::to_string(&[noise]).unwrap();
    let mut outputs = Vec::new();
    for run in 0..2 {
        let out = dir.path().join(format!("run{run}.json"));
        let st = thalamus()
            .args(["transform", "--in"])
            .arg(&input)
            .args(["--pipeline", &pipeline, "--out"])
            .arg(&out)
            .status()
            .map_err(|e| e.to_string())?;
        ensure!(st.success(), "thalamus transform exited with {st}");
        outputs.push(std::fs::read(&out).map_err(|e| e.to_string())?);
    }
    ensure!(outputs[0] == outputs[1], "two CLI runs differ");
    let rows: Vec<Value> = serde_json::from_slice(&outputs[0]).map_err(|e| e.to_string())?;
    let cli: Vec<f64> = rows.iter().filter_map(|r| r["values"][0].as_f64()).collect();
    ensure!(cli.len() == N, "CLI produced {} numeric rows", cli.len());
    let (cmean, cstd) = mean_std(&cli);
    ensure!(cmean.abs() < 0.02 && cstd > 0.99 && cstd < 1.01, "CLI output mean {cmean} std {cstd}");
    Ok(format!(
        "mean {mean:.4} std {std:.4} (CLI run: mean {cmean:.4} std {cstd:.4}); {} + {} bytes identical across runs",
        a.len(),
        outputs[0].len()
    ))
}

// ---------------------------------------------------------------------------
// 6. Missing values

async fn missing_policy() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let tokens = ["NA", "NaN", ""];
    let mut csv = String::from("t,left,right\n");
    let mut expected: Vec<Vec<SampleValue>> = Vec::new();
    for i in 0..60u64 {
        let mut row = Vec::new();
        let mut cells = Vec::new();
        for _ in 0..2 {
            match rng.random_range(0..5) {
                0 => {
                    cells.push(tokens[rng.random_range(0..3)].to_string());
                    row.push(SampleValue::Missing);
                }
                1 => {
                    cells.push("0".into());
                    row.push(num(0.0));
                }
                _ => {
                    let v = rng.random_range(-50..50) as f64 / 8.0;
                    cells.push(format!("{v}"));
                    row.push(num(v));
                }
            }
        }
        csv.push_str(&format!("{},{}\n", 1_000 + i * 10, cells.join(",")));
        expected.push(row);
    }
    let path = dir.path().join("pupil.csv");
    std::fs::write(&path, csv).map_err(|e| e.to_string())?;
    let missing = expected.iter().flatten().filter(|v| v.is_missing()).count();
    let zeros = expected.iter().flatten().filter(|v| **v == num(0.0)).count();

    let d = desc("eye", "pupil", 100.0, 2);
    let h = hub(vec![DeviceConfig {
        descriptor: d,
        source: SourceConfig::Csv {
            path,
            mapping: CsvMapping {
                timestamp_column: "t".into(),
                value_columns: vec!["left".into(), "right".into()],
                na_tokens: thalamus_core::ingest::default_na_tokens(),
            },
        },
        replay: ReplayConfig {
            start_delay_ms: 500,
            ..ReplayConfig::default()
        },
    }])
    .await?;
    let clock = h.clock();
    let zero_fill = TransformSpec::new(TransformKind::MissingPolicy).with("mode", "zero_fill");
    let mut raw = subscriber(h.local_addr(), "raw", &[("eye", "pupil")], vec![]).await?;
    let mut filled = subscriber(h.local_addr(), "filled", &[("eye", "pupil")], vec![zero_fill]).await?;
    let limit = Duration::from_secs(5);
    let got_raw = collect(&mut raw, clock, expected.len(), limit).await?;
    let got_filled = collect(&mut filled, clock, expected.len(), limit).await?;
    h.shutdown().await;

    for (i, (want, r)) in expected.iter().zip(&got_raw).enumerate() {
        ensure!(r.sample.values == *want, "row {i}: raw subscriber got {:?}, fixture {want:?}", r.sample.values);
    }
    for (i, (want, f)) in expected.iter().zip(&got_filled).enumerate() {
        let mapped: Vec<SampleValue> = want.iter().map(|v| if v.is_missing() { num(0.0) } else { *v }).collect();
        ensure!(f.sample.values == mapped, "row {i}: zero_fill got {:?}, expected {mapped:?}", f.sample.values);
        ensure!(f.sample.t == got_raw[i].sample.t, "row {i}: zero_fill changed the timestamp");
    }
    Ok(format!(
        "{} rows, {missing} NA cells arrive as Missing, {zeros} real zeros stay numeric; zero_fill maps only the NA cells",
        expected.len()
    ))
}

// ---------------------------------------------------------------------------
// 7. Delay

fn buffer_window_walk() -> Result<(), String> {
    let spec = DelaySpec::BufferWindow { window_ms: 500 };
    let mut st = DelayState::default();
    let s = |t: u64| Sample::new("d", "s", Timestamp(t), vec![num(t as f64)]);
    // Hand-walked: 0 opens the window; 100 and 400 join; 600 >= 0 + 500
    // releases the three at 600 and opens a new window with itself.
    for t in [0, 100, 400] {
        let out = delay_admit(s(t), &spec, Timestamp(t), &mut st);
        ensure!(out.is_empty(), "arrival at {t} released {} samples", out.len());
    }
    let out = delay_admit(s(600), &spec, Timestamp(600), &mut st);
    let released: Vec<(u64, u64)> = out.iter().map(|d| (d.sample.t.0, d.deliver_at.0)).collect();
    ensure!(released == [(0, 600), (100, 600), (400, 600)], "arrival at 600 released {released:?}");
    ensure!(st.buffered() == 1, "{} samples buffered after 600, expected 1", st.buffered());
    ensure!(delay_flush(&spec, Timestamp(1099), &mut st).is_empty(), "window starting at 600 flushed at 1099");
    let tail: Vec<u64> = delay_flush(&spec, Timestamp(1100), &mut st).iter().map(|d| d.sample.t.0).collect();
    ensure!(tail == [600], "flush at 1100 released {tail:?}");
    Ok(())
}

async fn delay() -> Outcome {
    buffer_window_walk()?;

    const N: usize = 1000;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("ecg.json");
    let rows: Vec<Vec<SampleValue>> = (0..N).map(|i| vec![num(i as f64)]).collect();
    write_json_fixture(&path, 5_000, 4, &rows);
    let h = hub(vec![replayed(path, desc("ecg", "lead1", 250.0, 1), 800, false)]).await?;
    let clock = h.clock();
    let fixed = TransformSpec::new(TransformKind::Delay)
        .with("mode", "fixed_latency")
        .with("latency_ms", 100u64);
    let mut delayed = subscriber(h.local_addr(), "delayed", &[("ecg", "lead1")], vec![fixed]).await?;
    let mut direct = subscriber(h.local_addr(), "direct", &[("ecg", "lead1")], vec![]).await?;
    let limit = Duration::from_secs(5);
    let (a, b) = tokio::join!(collect(&mut delayed, clock, N, limit), collect(&mut direct, clock, N, limit));
    let (got, reference) = (a?, b?);
    h.shutdown().await;

    let ts: Vec<u64> = got.iter().map(|r| r.sample.t.0).collect();
    let ref_ts: Vec<u64> = reference.iter().map(|r| r.sample.t.0).collect();
    ensure!(ts == ref_ts, "delayed timestamps differ from the undelayed subscription");
    ensure!(ts.windows(2).all(|w| w[1] - w[0] == 4), "timestamps lost the recorded 4 ms spacing");
    ensure!(
        got.iter().enumerate().all(|(i, r)| r.sample.values == [num(i as f64)]),
        "delayed frames out of order"
    );
    let mut lags: Vec<i64> = got.iter().map(Received::lag_ms).collect();
    lags.sort_unstable();
    let inside = lags.iter().filter(|l| (100..=125).contains(*l)).count();
    ensure!(
        inside * 100 >= N * 99,
        "{inside}/{N} lags in [100, 125] ms (min {} p50 {} p99 {} max {})",
        lags[0],
        percentile(&lags, 50.0),
        percentile(&lags, 99.0),
        lags[N - 1]
    );
    Ok(format!(
        "{inside}/{N} lags in [100, 125] ms (min {} p50 {} max {}); timestamps and order unchanged; 500 ms window walk 0,100,400,600 releases 3 at 600",
        lags[0],
        percentile(&lags, 50.0),
        lags[N - 1]
    ))
}

// ---------------------------------------------------------------------------
// 8. Sync

fn series(dev: &str, ts: &[u64], rng: &mut ChaCha8Rng) -> Vec<Sample> {
    ts.iter()
        .map(|&t| Sample::new(dev, "x", Timestamp(t), vec![num(rng.random_range(-1.0..1.0))]))
        .collect()
}

fn increasing(rng: &mut ChaCha8Rng, n: usize, start: u64, max_gap: u64) -> Vec<u64> {
    let mut t = start;
    (0..n)
        .map(|_| {
            t += rng.random_range(1..=max_gap);
            t
        })
        .collect()
}

/// Linear scan: closest sample within tolerance, ties to the earlier one.
fn nearest_scan(samples: &[Sample], r: u64, tol: u64) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in samples.iter().enumerate() {
        let d = s.t.0.abs_diff(r);
        if d <= tol && best.is_none_or(|b| d < samples[b].t.0.abs_diff(r)) {
            best = Some(i);
        }
    }
    best
}

fn shift(samples: &[Sample], delta: u64) -> Vec<Sample> {
    samples
        .iter()
        .map(|s| Sample {
            t: Timestamp(s.t.0 + delta),
            ..s.clone()
        })
        .collect()
}

fn sync() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let ten: Vec<u64> = (0..31).map(|i| 1_000 + i * 100).collect();
    let two: Vec<u64> = vec![1_000, 1_500, 2_000, 2_500, 3_000];
    let epoch = Epoch::new(Timestamp(1_000), Timestamp(2_000), "stim").map_err(|e| e.to_string())?;
    let n10 = extract_epoch(&series("a", &ten, &mut rng), &epoch).len();
    let n2 = extract_epoch(&series("b", &two, &mut rng), &epoch).len();
    ensure!((n10, n2) == (11, 3), "epoch counts {n10} and {n2}, expected 11 and 3");

    const DELTA: u64 = 86_400_000;
    let mut frames_checked = 0;
    for round in 0..20 {
        let streams: Vec<(SignalKey, Vec<Sample>)> = (0..3)
            .map(|k| {
                let dev = format!("d{k}");
                let ts = increasing(&mut rng, 200, 1_700_000_000_000 + k * 3, 15);
                (SignalKey::new(dev.as_str(), "x"), series(&dev, &ts, &mut rng))
            })
            .collect();
        let shifted: Vec<(SignalKey, Vec<Sample>)> = streams.iter().map(|(k, s)| (k.clone(), shift(s, DELTA))).collect();
        let a: Vec<(SignalKey, &[Sample])> = streams.iter().map(|(k, s)| (k.clone(), s.as_slice())).collect();
        let b: Vec<(SignalKey, &[Sample])> = shifted.iter().map(|(k, s)| (k.clone(), s.as_slice())).collect();
        let reference = if round % 2 == 0 {
            Reference::Stream(SignalKey::new("d0", "x"))
        } else {
            Reference::FixedRate(rng.random_range(5.0..500.0))
        };
        let strategy = if round % 4 < 2 { Strategy::Nearest } else { Strategy::LastBefore };
        let tol = rng.random_range(0..20);
        let fa = align(&a, &reference, tol, strategy).map_err(|e| e.to_string())?;
        let fb = align(&b, &reference, tol, strategy).map_err(|e| e.to_string())?;
        ensure!(fa.len() == fb.len(), "round {round}: {} vs {} frames after shift", fa.len(), fb.len());
        for (x, y) in fa.iter().zip(&fb) {
            ensure!(y.t.0 == x.t.0 + DELTA, "round {round}: frame at {} maps to {}", x.t.0, y.t.0);
            ensure!(x.cells.len() == y.cells.len(), "round {round}: cell sets differ at {}", x.t.0);
            for (k, c) in &x.cells {
                let d = y.cells.get(k).ok_or_else(|| format!("round {round}: {k} missing after shift"))?;
                ensure!(d.t.0 == c.t.0 + DELTA && d.values == c.values, "round {round}: {k} cell differs at {}", x.t.0);
            }
            frames_checked += 1;
        }
    }

    let mut queries = 0;
    for instance in 0..10 {
        let ts = increasing(&mut rng, 1000, 10_000, 30);
        let samples = series("n", &ts, &mut rng);
        let refs = increasing(&mut rng, 1000, 9_000, 32);
        let tol = [0, 3, 15, 1000][instance % 4];
        for r in &refs {
            let fast = pick(&samples, Timestamp(*r), tol, Strategy::Nearest);
            let slow = nearest_scan(&samples, *r, tol);
            ensure!(fast == slow, "instance {instance}: ref {r} tol {tol}: pick {fast:?}, scan {slow:?}");
            queries += 1;
        }
        // Through align, with the reference stream as the query instants.
        let other = series("r", &refs, &mut rng);
        let streams = [(SignalKey::new("n", "x"), samples.as_slice()), (SignalKey::new("r", "x"), other.as_slice())];
        let frames = align(&streams, &Reference::Stream(SignalKey::new("r", "x")), tol, Strategy::Nearest)
            .map_err(|e| e.to_string())?;
        for f in frames {
            let want = nearest_scan(&samples, f.t.0, tol).map(|i| samples[i].t);
            let got = f.cells.get(&SignalKey::new("n", "x")).map(|c| c.t);
            ensure!(want == got, "instance {instance}: align at {} picked {got:?}, scan {want:?}", f.t.0);
        }
    }
    Ok(format!(
        "epoch counts 11 and 3; {frames_checked} aligned frames shift-equivariant under {DELTA} ms; {queries} nearest queries match the scan"
    ))
}

// ---------------------------------------------------------------------------
// 9. Fan-out

async fn fan_out() -> Outcome {
    const N: usize = 2500;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("ecg.json");
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let rows: Vec<Vec<SampleValue>> = (0..N)
        .map(|i| {
            if i % 97 == 13 {
                vec![SampleValue::Missing]
            } else {
                vec![num((i as f64 * 0.05).sin() + rng.random_range(-0.05..0.05))]
            }
        })
        .collect();
    write_json_fixture(&path, 0, 4, &rows);
    let start_delay = 3_000;
    let h = hub(vec![replayed(path, desc("ecg", "lead1", 250.0, 1), start_delay, false)]).await?;
    let replay_at = h.clock().now().0 + start_delay;
    let pipeline = json!([
        {"kind": "missing_policy", "params": {"mode": "hold_last"}},
        {"kind": "kalman", "params": {"q": 0.01, "r": 0.1, "x0": 0.0, "p0": 1.0}},
        {"kind": "noise", "params": {"kind": "gaussian", "amplitude": 0.01}}
    ])
    .to_string();

    let addr = h.local_addr().to_string();
    let ids: Vec<String> = (0..3).map(|i| format!("probe-{i}")).collect();
    let mut children = Vec::new();
    for id in &ids {
        let child = thalamus()
            .args(["probe", "--connect", &addr, "--subscribe", "ecg/lead1", "--pipeline", &pipeline])
            .args(["--count", &N.to_string(), "--id", id, "--out"])
            .arg(dir.path().join(format!("{id}.ndjson")))
            .stdout(Stdio::null())
            .spawn()
            .map_err(|e| e.to_string())?;
        children.push(child);
    }
    wait_subscribed(&h, &ids, Duration::from_secs(10)).await?;
    let ready = h.clock().now().0;
    ensure!(ready < replay_at, "probes subscribed {} ms after replay started", ready - replay_at);
    for c in &mut children {
        wait_child(c, Duration::from_secs(30)).await?;
    }
    let stats = h.stats();
    h.shutdown().await;

    let files: Vec<Vec<u8>> = ids
        .iter()
        .map(|id| std::fs::read(dir.path().join(format!("{id}.ndjson"))).map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    for (id, f) in ids.iter().zip(&files) {
        let lines = f.split(|b| *b == b'\n').filter(|l| !l.is_empty()).count();
        ensure!(lines == N, "{id} recorded {lines} frames");
    }
    ensure!(files[0] == files[1] && files[1] == files[2], "recordings are not byte-identical");
    let ts: Vec<u64> = files[0]
        .split(|b| *b == b'\n')
        .filter(|l| !l.is_empty())
        .map(|l| match decode_frame(l) {
            Ok(Message::Data(d)) => Ok(d.t.0),
            _ => Err("recording holds a non-data line".to_string()),
        })
        .collect::<Result<_, _>>()?;
    ensure!(ts.windows(2).all(|w| w[1] - w[0] == 4), "recording has gaps or reordering");
    ensure!(stats.frames_dropped == 0, "{} frames dropped", stats.frames_dropped);
    ensure!(stats.frames_routed == 3 * N as u64, "{} frames routed, expected {}", stats.frames_routed, 3 * N);
    Ok(format!(
        "3 probes x {N} frames at 250 Hz, {} bytes each, byte-identical; 0 drops",
        files[0].len()
    ))
}

// ---------------------------------------------------------------------------
// 10. Loopback

async fn loopback() -> Outcome {
    const N: usize = 100;
    let h = hub(vec![]).await?;
    let clock = h.clock();
    let mouse = desc("mouse", "xy", 100.0, 2);
    let mut a = Client::connect(h.local_addr()).await.map_err(|e| e.to_string())?;
    a.register("probe-a", vec![mouse.clone()]).await.map_err(|e| format!("register: {e}"))?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = dir.path().join("b.ndjson");
    let mut b = thalamus()
        .args(["probe", "--connect", &h.local_addr().to_string(), "--subscribe", "mouse/xy"])
        .args(["--count", &N.to_string(), "--id", "probe-b", "--out"])
        .arg(&out)
        .stdout(Stdio::null())
        .spawn()
        .map_err(|e| e.to_string())?;
    wait_subscribed(&h, &["probe-b".to_string()], Duration::from_secs(10)).await?;

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut sent = Vec::with_capacity(N);
    let t0 = clock.now().0;
    for i in 0..N as u64 {
        let s = Sample::new(
            "mouse",
            "xy",
            Timestamp(t0 + i * 10),
            vec![num(rng.random_range(0..1920) as f64), num(rng.random_range(0..1080) as f64)],
        );
        a.publish(s.clone()).await.map_err(|e| e.to_string())?;
        sent.push(s);
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    wait_child(&mut b, Duration::from_secs(15)).await?;
    h.shutdown().await;

    let text = std::fs::read_to_string(&out).map_err(|e| e.to_string())?;
    let got: Vec<Sample> = text
        .lines()
        .map(|l| match decode_frame(l.as_bytes()) {
            Ok(Message::Data(d)) => Ok(d.into_sample()),
            other => Err(format!("unexpected line {other:?}")),
        })
        .collect::<Result<_, _>>()?;
    ensure!(got.len() == N, "probe B recorded {} samples", got.len());
    if let Some(i) = got.iter().zip(&sent).position(|(g, s)| g != s) {
        return Err(format!("sample {i}: sent {:?}, received {:?}", sent[i], got[i]));
    }
    Ok(format!("publish grant acquired; {N}/{N} samples received in order"))
}

// ---------------------------------------------------------------------------
// 11. Stress and isolation

async fn stress() -> Outcome {
    const DEVICES: usize = 4;
    const READERS: usize = 8;
    const RUN: Duration = Duration::from_secs(60);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut devices = Vec::new();
    for d in 0..DEVICES {
        let path = dir.path().join(format!("dev{d}.json"));
        // 10 s of data looped; the loop keeps the 4 ms spacing across laps.
        let rows: Vec<Vec<SampleValue>> = (0..2500).map(|i| vec![num((i * (d + 1)) as f64)]).collect();
        write_json_fixture(&path, 0, 4, &rows);
        devices.push(replayed(path, desc(&format!("dev{d}"), "sig", 250.0, 1), 1_500, true));
    }
    let h = hub(devices).await?;
    let clock = h.clock();
    let addr = h.local_addr();
    let names: Vec<String> = (0..DEVICES).map(|d| format!("dev{d}")).collect();
    let keys: Vec<(&str, &str)> = names.iter().map(|n| (n.as_str(), "sig")).collect();

    let socket = tokio::net::TcpSocket::new_v4().map_err(|e| e.to_string())?;
    socket.set_recv_buffer_size(4096).map_err(|e| e.to_string())?;
    let stream = socket.connect(addr).await.map_err(|e| e.to_string())?;
    let mut stalled = Client::from_stream(stream);
    stalled.hello("stalled").await.map_err(|e| e.to_string())?;
    stalled
        .subscribe(keys.iter().map(|(d, s)| SignalKey::new(*d, *s)).collect(), vec![])
        .await
        .map_err(|e| e.to_string())?;

    let mut readers = Vec::new();
    for r in 0..READERS {
        let mut c = subscriber(addr, &format!("reader-{r}"), &keys, vec![]).await?;
        readers.push(tokio::spawn(async move {
            let deadline = tokio::time::Instant::now() + RUN + Duration::from_millis(1_500);
            let mut lags = Vec::with_capacity(250_000);
            let mut last: BTreeMap<String, u64> = BTreeMap::new();
            let mut gaps = 0u64;
            loop {
                let ev = match tokio::time::timeout_at(deadline, next_event(&mut c, clock, Duration::from_secs(5))).await {
                    Err(_) => break,
                    Ok(ev) => ev?,
                };
                if let Event::Data(rx) = ev {
                    if let Some(prev) = last.insert(rx.sample.device_id.clone(), rx.sample.t.0) {
                        if rx.sample.t.0 != prev + 4 {
                            gaps += 1;
                        }
                    }
                    lags.push(rx.lag_ms());
                }
            }
            Ok::<_, String>((lags, gaps, c))
        }));
    }

    let mut results = Vec::new();
    for r in readers {
        results.push(r.await.map_err(|e| e.to_string())??);
    }
    let stats = h.stats();
    drop(stalled);
    h.shutdown().await;

    let mut worst_p99 = i64::MIN;
    let mut frames = 0usize;
    for (r, (lags, gaps, _)) in results.iter_mut().enumerate() {
        let id = format!("reader-{r}");
        let s = stats.session(&id).ok_or_else(|| format!("{id} missing from stats"))?;
        ensure!(s.drop_count == 0, "{id} dropped {} frames", s.drop_count);
        ensure!(*gaps == 0, "{id} saw {gaps} sequence gaps");
        ensure!(lags.len() >= 4 * 250 * 59, "{id} received only {} frames", lags.len());
        lags.sort_unstable();
        let p99 = percentile(lags, 99.0);
        worst_p99 = worst_p99.max(p99);
        frames += lags.len();
        ensure!(p99 < 50, "{id} p99 lag {p99} ms (max {})", lags[lags.len() - 1]);
    }
    let stalled_drops = stats.session("stalled").map(|s| s.drop_count).unwrap_or(0);
    ensure!(stalled_drops > 0, "stalled client has drop_count 0");
    Ok(format!(
        "{READERS} readers, {frames} frames, 0 drops, 0 gaps, worst p99 lag {worst_p99} ms; stalled client drop_count {stalled_drops}"
    ))
}

// ---------------------------------------------------------------------------
// 12. Control channel

async fn control_channel() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("eye.json");
    let rows: Vec<Vec<SampleValue>> = (0..1000).map(|i| vec![num(i as f64)]).collect();
    write_json_fixture(&path, 0, 10, &rows);
    let limit = Duration::from_secs(5);

    // Injected delay.
    let h = hub(vec![replayed(path.clone(), desc("eye", "pupil", 100.0, 1), 500, false)]).await?;
    let clock = h.clock();
    let mut sub = subscriber(h.local_addr(), "sub", &[("eye", "pupil")], vec![]).await?;
    let mut admin = connect(h.local_addr(), &format!("ops#{ADMIN}")).await?;
    let before = collect(&mut sub, clock, 100, limit).await?;
    admin
        .control("inject_delay", params(json!({"device_id": "eye", "latency_ms": 200})))
        .await
        .map_err(|e| format!("inject_delay: {e}"))?;
    let injected_at = clock.now().0;
    let after = collect(&mut sub, clock, 150, limit).await?;
    h.shutdown().await;

    let mut base: Vec<i64> = before.iter().map(Received::lag_ms).collect();
    base.sort_unstable();
    let later: Vec<&Received> = after.iter().filter(|r| r.sample.t.0 > injected_at).collect();
    ensure!(later.len() >= 100, "only {} frames stamped after the injection", later.len());
    let min_after = later.iter().map(|r| r.lag_ms()).min().unwrap();
    ensure!(min_after >= 200, "a frame stamped after inject_delay arrived {min_after} ms after its timestamp");
    let all: Vec<u64> = before.iter().chain(&after).map(|r| r.sample.t.0).collect();
    ensure!(all.windows(2).all(|w| w[1] == w[0] + 10), "injected delay reordered or lost frames");

    // Drop and resume.
    let h = hub(vec![replayed(path, desc("eye", "pupil", 100.0, 1), 500, false)]).await?;
    let clock = h.clock();
    let mut sub = subscriber(h.local_addr(), "sub", &[("eye", "pupil")], vec![]).await?;
    let mut admin = connect(h.local_addr(), &format!("ops#{ADMIN}")).await?;
    let mut data = collect(&mut sub, clock, 50, limit).await?;
    admin
        .control("drop_device", params(json!({"device_id": "eye"})))
        .await
        .map_err(|e| format!("drop_device: {e}"))?;
    let dropped_at = clock.now().0;
    tokio::time::sleep(Duration::from_millis(600)).await;
    admin
        .control("resume_device", params(json!({"device_id": "eye"})))
        .await
        .map_err(|e| format!("resume_device: {e}"))?;
    let resumed_at = clock.now().0;

    let mut catalogs = Vec::new();
    let mut between = Vec::new();
    let mut post = 0;
    while post < 50 {
        match next_event(&mut sub, clock, limit).await? {
            Event::Catalog(c) => catalogs.push(c),
            Event::Data(r) => {
                if catalogs.len() == 1 {
                    between.push(r.sample.t.0);
                }
                if catalogs.len() == 2 {
                    post += 1;
                }
                data.push(r);
            }
        }
    }
    let discarded = h.stats().samples_discarded;
    h.shutdown().await;

    ensure!(catalogs.len() == 2, "{} catalog updates", catalogs.len());
    ensure!(catalogs[0].is_empty(), "catalog after drop still lists {:?}", catalogs[0]);
    ensure!(catalogs[1].len() == 1 && catalogs[1][0].device_id == "eye", "catalog after resume is {:?}", catalogs[1]);
    ensure!(
        between.iter().all(|t| *t <= dropped_at),
        "data stamped after the drop arrived while the device was dropped: {between:?}"
    );
    let ts: Vec<u64> = data.iter().map(|r| r.sample.t.0).collect();
    let (gap_at, gap) = ts
        .windows(2)
        .map(|w| (w[0], w[1] - w[0]))
        .max_by_key(|(_, g)| *g)
        .ok_or("no data")?;
    ensure!(ts.windows(2).all(|w| w[1] > w[0]), "data out of order around the gap");
    ensure!(
        gap >= resumed_at.saturating_sub(dropped_at).saturating_sub(20),
        "largest gap {gap} ms, device was dropped for {} ms",
        resumed_at - dropped_at
    );
    ensure!(gap_at <= dropped_at && gap_at + gap >= resumed_at.saturating_sub(20), "gap at {gap_at}+{gap} does not cover the drop");
    ensure!(discarded > 0, "no samples counted as discarded while dropped");
    Ok(format!(
        "inject_delay: baseline p50 lag {} ms, every later frame >= {min_after} ms; drop/resume: 2 catalog updates, {gap} ms gap, {discarded} samples discarded",
        percentile(&base, 50.0)
    ))
}
