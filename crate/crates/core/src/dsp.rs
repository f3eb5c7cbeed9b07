//! Streaming signal transforms applied per subscription.
//!
//! Five stage kinds exist: missing-value policy, Savitzky-Golay smoothing,
//! scalar Kalman filtering, noise injection and delay. Value stages work per
//! channel; a delay stage, if present, must be the last stage and decides
//! when the resulting samples are delivered.

use std::collections::{BTreeMap, VecDeque};

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::Normal;
use serde_json::Value;
use thiserror::Error;

use crate::model::{Sample, SampleValue, Timestamp, TransformKind, TransformSpec};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DspError {
    #[error("invalid {kind} params: {reason}")]
    InvalidParams { kind: &'static str, reason: String },
    #[error("invalid pipeline: {0}")]
    InvalidPipeline(String),
}

fn invalid(kind: TransformKind, reason: impl Into<String>) -> DspError {
    DspError::InvalidParams {
        kind: kind.as_str(),
        reason: reason.into(),
    }
}

/// Typed view over a `TransformSpec` parameter map.
struct Params<'a> {
    kind: TransformKind,
    map: &'a BTreeMap<String, Value>,
}

impl<'a> Params<'a> {
    fn new(spec: &'a TransformSpec, allowed: &[&str]) -> Result<Self, DspError> {
        if let Some(unknown) = spec.params.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(invalid(spec.kind, format!("unknown parameter {unknown:?}")));
        }
        Ok(Params {
            kind: spec.kind,
            map: &spec.params,
        })
    }

    fn f64(&self, name: &str) -> Result<f64, DspError> {
        self.opt_f64(name)?
            .ok_or_else(|| invalid(self.kind, format!("missing {name}")))
    }

    fn opt_f64(&self, name: &str) -> Result<Option<f64>, DspError> {
        match self.map.get(name) {
            None => Ok(None),
            Some(v) => v
                .as_f64()
                .filter(|x| x.is_finite())
                .map(Some)
                .ok_or_else(|| invalid(self.kind, format!("{name} must be a finite number"))),
        }
    }

    fn opt_u64(&self, name: &str) -> Result<Option<u64>, DspError> {
        match self.map.get(name) {
            None => Ok(None),
            Some(v) => v
                .as_u64()
                .map(Some)
                .ok_or_else(|| invalid(self.kind, format!("{name} must be a non-negative integer"))),
        }
    }

    fn u64(&self, name: &str) -> Result<u64, DspError> {
        self.opt_u64(name)?
            .ok_or_else(|| invalid(self.kind, format!("missing {name}")))
    }

    fn str(&self, name: &str) -> Result<&'a str, DspError> {
        match self.map.get(name) {
            Some(Value::String(s)) => Ok(s),
            Some(_) => Err(invalid(self.kind, format!("{name} must be a string"))),
            None => Err(invalid(self.kind, format!("missing {name}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MissingPolicy {
    /// Missing stays Missing ("NA" on the wire).
    Passthrough,
    /// Missing becomes 0.
    ZeroFill,
    /// Missing becomes the last non-missing value of the channel.
    HoldLast,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SavGolParams {
    window: usize,
    order: usize,
}

impl SavGolParams {
    pub fn new(window: usize, order: usize) -> Result<Self, DspError> {
        if window < 3 || window % 2 == 0 {
            return Err(invalid(TransformKind::Savgol, format!("window must be odd and >= 3, got {window}")));
        }
        if order >= window {
            return Err(invalid(TransformKind::Savgol, format!("order {order} must be < window {window}")));
        }
        Ok(SavGolParams { window, order })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Half width; also the output latency in samples.
    pub fn half(&self) -> usize {
        (self.window - 1) / 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KalmanParams {
    pub q: f64,
    pub r: f64,
    pub x0: f64,
    pub p0: f64,
}

impl KalmanParams {
    pub fn new(q: f64, r: f64, x0: f64, p0: f64) -> Result<Self, DspError> {
        let bad = |reason: &str| Err(invalid(TransformKind::Kalman, reason));
        if ![q, r, x0, p0].iter().all(|v| v.is_finite()) {
            return bad("parameters must be finite");
        }
        if q < 0.0 || r < 0.0 {
            return bad("q and r must be >= 0");
        }
        if q == 0.0 && r == 0.0 {
            return bad("q and r must not both be 0");
        }
        if p0 <= 0.0 {
            return bad("p0 must be > 0");
        }
        Ok(KalmanParams { q, r, x0, p0 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    Constant,
    Uniform,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    /// Constant offset, uniform half-range, or gaussian sigma.
    pub amplitude: f64,
    /// Overrides the hub-wide seed for this stage.
    pub seed: Option<u64>,
}

impl NoiseSpec {
    pub fn new(kind: NoiseKind, amplitude: f64, seed: Option<u64>) -> Result<Self, DspError> {
        if !amplitude.is_finite() {
            return Err(invalid(TransformKind::Noise, "amplitude must be finite"));
        }
        if kind != NoiseKind::Constant && amplitude < 0.0 {
            return Err(invalid(TransformKind::Noise, "amplitude must be >= 0 for uniform/gaussian"));
        }
        Ok(NoiseSpec { kind, amplitude, seed })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DelaySpec {
    FixedLatency { latency_ms: u64 },
    BufferWindow { window_ms: u64 },
}

/// A validated pipeline stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Stage {
    Missing(MissingPolicy),
    Savgol(SavGolParams),
    Kalman(KalmanParams),
    Noise(NoiseSpec),
    Delay(DelaySpec),
}

impl Stage {
    pub fn from_spec(spec: &TransformSpec) -> Result<Stage, DspError> {
        let kind = spec.kind;
        match kind {
            TransformKind::MissingPolicy => {
                let p = Params::new(spec, &["mode"])?;
                let mode = match p.str("mode")? {
                    "passthrough" => MissingPolicy::Passthrough,
                    "zero_fill" => MissingPolicy::ZeroFill,
                    "hold_last" => MissingPolicy::HoldLast,
                    other => return Err(invalid(kind, format!("unknown mode {other:?}"))),
                };
                Ok(Stage::Missing(mode))
            }
            TransformKind::Savgol => {
                let p = Params::new(spec, &["window", "order"])?;
                Ok(Stage::Savgol(SavGolParams::new(
                    p.u64("window")? as usize,
                    p.u64("order")? as usize,
                )?))
            }
            TransformKind::Kalman => {
                let p = Params::new(spec, &["q", "r", "x0", "p0"])?;
                Ok(Stage::Kalman(KalmanParams::new(
                    p.f64("q")?,
                    p.f64("r")?,
                    p.f64("x0")?,
                    p.f64("p0")?,
                )?))
            }
            TransformKind::Noise => {
                let p = Params::new(spec, &["kind", "amplitude", "seed"])?;
                let noise_kind = match p.str("kind")? {
                    "constant" => NoiseKind::Constant,
                    "uniform" => NoiseKind::Uniform,
                    "gaussian" => NoiseKind::Gaussian,
                    other => return Err(invalid(kind, format!("unknown noise kind {other:?}"))),
                };
                Ok(Stage::Noise(NoiseSpec::new(
                    noise_kind,
                    p.f64("amplitude")?,
                    p.opt_u64("seed")?,
                )?))
            }
            TransformKind::Delay => {
                let p = Params::new(spec, &["mode", "latency_ms", "window_ms"])?;
                match p.str("mode")? {
                    "fixed_latency" => Ok(Stage::Delay(DelaySpec::FixedLatency {
                        latency_ms: p.u64("latency_ms")?,
                    })),
                    "buffer_window" => {
                        let window_ms = p.u64("window_ms")?;
                        if window_ms == 0 {
                            return Err(invalid(kind, "window_ms must be > 0"));
                        }
                        Ok(Stage::Delay(DelaySpec::BufferWindow { window_ms }))
                    }
                    other => Err(invalid(kind, format!("unknown mode {other:?}"))),
                }
            }
        }
    }

    pub fn to_spec(&self) -> TransformSpec {
        match self {
            Stage::Missing(policy) => TransformSpec::new(TransformKind::MissingPolicy).with(
                "mode",
                match policy {
                    MissingPolicy::Passthrough => "passthrough",
                    MissingPolicy::ZeroFill => "zero_fill",
                    MissingPolicy::HoldLast => "hold_last",
                },
            ),
            Stage::Savgol(p) => TransformSpec::new(TransformKind::Savgol)
                .with("window", p.window as u64)
                .with("order", p.order as u64),
            Stage::Kalman(p) => TransformSpec::new(TransformKind::Kalman)
                .with("q", p.q)
                .with("r", p.r)
                .with("x0", p.x0)
                .with("p0", p.p0),
            Stage::Noise(n) => {
                let kind = match n.kind {
                    NoiseKind::Constant => "constant",
                    NoiseKind::Uniform => "uniform",
                    NoiseKind::Gaussian => "gaussian",
                };
                let spec = TransformSpec::new(TransformKind::Noise)
                    .with("kind", kind)
                    .with("amplitude", n.amplitude);
                match n.seed {
                    Some(seed) => spec.with("seed", seed),
                    None => spec,
                }
            }
            Stage::Delay(DelaySpec::FixedLatency { latency_ms }) => TransformSpec::new(TransformKind::Delay)
                .with("mode", "fixed_latency")
                .with("latency_ms", *latency_ms),
            Stage::Delay(DelaySpec::BufferWindow { window_ms }) => TransformSpec::new(TransformKind::Delay)
                .with("mode", "buffer_window")
                .with("window_ms", *window_ms),
        }
    }
}

/// Validates a stage list: every stage parses, at most one delay stage, and
/// the delay stage (if any) is last.
pub fn validate_pipeline(specs: &[TransformSpec]) -> Result<Vec<Stage>, DspError> {
    let stages = specs.iter().map(Stage::from_spec).collect::<Result<Vec<_>, _>>()?;
    let delays: Vec<usize> = stages
        .iter()
        .enumerate()
        .filter(|(_, s)| matches!(s, Stage::Delay(_)))
        .map(|(i, _)| i)
        .collect();
    if delays.len() > 1 {
        return Err(DspError::InvalidPipeline("duplicate delay stage".into()));
    }
    if let Some(&i) = delays.first() {
        if i + 1 != stages.len() {
            return Err(DspError::InvalidPipeline("delay stage must be last".into()));
        }
    }
    Ok(stages)
}

/// Same as [`validate_pipeline`] but rejects delay stages, which have no
/// meaning for batch processing.
pub fn validate_offline_pipeline(specs: &[TransformSpec]) -> Result<Vec<Stage>, DspError> {
    let stages = validate_pipeline(specs)?;
    if stages.iter().any(|s| matches!(s, Stage::Delay(_))) {
        return Err(DspError::InvalidPipeline("delay stages are not allowed offline".into()));
    }
    Ok(stages)
}

// ---------------------------------------------------------------------------
// Missing-value policy

/// Per-channel memory for `hold_last`.
#[derive(Debug, Clone, Default)]
pub struct MissingState {
    last: Option<f64>,
}

pub fn apply_missing_policy(v: SampleValue, policy: MissingPolicy, state: &mut MissingState) -> SampleValue {
    if let SampleValue::Number(x) = v {
        state.last = Some(x);
        return v;
    }
    match policy {
        MissingPolicy::Passthrough => v,
        MissingPolicy::ZeroFill => SampleValue::Number(0.0),
        MissingPolicy::HoldLast => state.last.map_or(SampleValue::Missing, SampleValue::Number),
    }
}

// ---------------------------------------------------------------------------
// Savitzky-Golay

/// Smoothing weights of the centered least-squares polynomial fit.
///
/// The fit of degree `order` over abscissae `-h..=h` evaluated at 0 is the
/// projection onto the span of the discrete orthogonal (Gram) polynomials
/// `P_0..P_order` on those points, so `w_i = sum_k P_k(0) P_k(x_i) / |P_k|^2`.
/// The polynomials follow the three-term recurrence
/// `P_{k+1}(x) = x P_k(x) - (|P_k|^2 / |P_{k-1}|^2) P_{k-1}(x)`, which needs
/// no matrix inversion and keeps the weights exactly symmetric.
pub fn savgol_coefficients(p: &SavGolParams) -> Vec<f64> {
    let n = p.window;
    let h = p.half() as i64;
    let xs: Vec<f64> = (-h..=h).map(|x| x as f64).collect();
    let center = p.half();

    let mut prev = vec![0.0; n];
    let mut cur = vec![1.0; n];
    let mut prev_norm = 1.0;
    let mut weights = vec![0.0; n];
    for k in 0..=p.order {
        let norm: f64 = cur.iter().map(|v| v * v).sum();
        let at_center = cur[center];
        for (w, pk) in weights.iter_mut().zip(&cur) {
            *w += at_center * pk / norm;
        }
        let beta = if k == 0 { 0.0 } else { norm / prev_norm };
        let next: Vec<f64> = xs
            .iter()
            .zip(cur.iter().zip(&prev))
            .map(|(x, (c, pr))| x * c - beta * pr)
            .collect();
        prev = std::mem::replace(&mut cur, next);
        prev_norm = norm;
    }
    weights
}

/// Streaming state for one channel of a centered Savitzky-Golay filter.
#[derive(Debug, Clone)]
pub struct SavGolState {
    weights: Vec<f64>,
    ring: VecDeque<SampleValue>,
}

impl SavGolState {
    pub fn new(p: &SavGolParams) -> Self {
        SavGolState {
            weights: savgol_coefficients(p),
            ring: VecDeque::with_capacity(p.window),
        }
    }

    fn from_weights(weights: Vec<f64>) -> Self {
        let window = weights.len();
        SavGolState {
            weights,
            ring: VecDeque::with_capacity(window),
        }
    }
}

/// Pushes one value; returns the smoothed value of the window center once
/// the window is full (`None` while warming up). A Missing anywhere in the
/// window makes the output Missing.
pub fn savgol_apply(x: SampleValue, state: &mut SavGolState) -> Option<SampleValue> {
    let window = state.weights.len();
    if state.ring.len() == window {
        state.ring.pop_front();
    }
    state.ring.push_back(x);
    if state.ring.len() < window {
        return None;
    }
    let mut acc = 0.0;
    for (w, v) in state.weights.iter().zip(&state.ring) {
        match v {
            SampleValue::Number(v) => acc += w * v,
            SampleValue::Missing => return Some(SampleValue::Missing),
        }
    }
    Some(SampleValue::Number(acc))
}

// ---------------------------------------------------------------------------
// Kalman

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KalmanState {
    pub x: f64,
    pub p: f64,
}

impl KalmanState {
    pub fn new(params: &KalmanParams) -> Self {
        KalmanState {
            x: params.x0,
            p: params.p0,
        }
    }
}

/// One predict/update cycle of the scalar random-walk model. A Missing
/// measurement only runs the predict step and the prior estimate is emitted.
pub fn kalman_step(state: KalmanState, z: SampleValue, params: &KalmanParams) -> (KalmanState, f64) {
    let p_prior = state.p + params.q;
    match z {
        SampleValue::Number(z) => {
            let k = p_prior / (p_prior + params.r);
            // Same as x + k(z - x), but exact when k == 1.
            let x = (1.0 - k) * state.x + k * z;
            let p = (1.0 - k) * p_prior;
            (KalmanState { x, p }, x)
        }
        SampleValue::Missing => (
            KalmanState {
                x: state.x,
                p: p_prior,
            },
            state.x,
        ),
    }
}

// ---------------------------------------------------------------------------
// Noise

/// Deterministic generator owned by one noise stage.
#[derive(Debug, Clone)]
pub struct NoiseRng(ChaCha12Rng);

impl NoiseRng {
    pub fn seeded(seed: u64) -> Self {
        NoiseRng(ChaCha12Rng::seed_from_u64(seed))
    }
}

/// Derives the seed of one stage from the base seed and the stream identity.
pub fn stage_seed(base: u64, device_id: &str, signal: &str, stage_index: usize) -> u64 {
    // FNV-1a over the identity, then a splitmix64 finalizer.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |bytes: &[u8]| {
        for b in bytes {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    feed(&base.to_le_bytes());
    feed(device_id.as_bytes());
    feed(&[0xff]);
    feed(signal.as_bytes());
    feed(&[0xff]);
    feed(&(stage_index as u64).to_le_bytes());
    let mut z = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn add_noise(v: SampleValue, spec: &NoiseSpec, rng: &mut NoiseRng) -> SampleValue {
    let SampleValue::Number(x) = v else {
        return v;
    };
    let a = spec.amplitude;
    let offset = match spec.kind {
        NoiseKind::Constant => a,
        _ if a == 0.0 => 0.0,
        NoiseKind::Uniform => Uniform::new_inclusive(-a, a)
            .expect("amplitude validated finite and positive")
            .sample(&mut rng.0),
        NoiseKind::Gaussian => Normal::new(0.0, a)
            .expect("sigma validated finite and positive")
            .sample(&mut rng.0),
    };
    SampleValue::Number(x + offset)
}

// ---------------------------------------------------------------------------
// Delay

#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    pub deliver_at: Timestamp,
    pub sample: Sample,
}

#[derive(Debug, Clone, Default)]
pub struct DelayState {
    window_open: Option<Timestamp>,
    batch: Vec<Sample>,
}

impl DelayState {
    pub fn buffered(&self) -> usize {
        self.batch.len()
    }
}

/// Admits a sample arriving at `now`. Fixed latency schedules it at
/// `now + latency_ms` with its embedded timestamp untouched. Buffer windows
/// accumulate samples; the first arrival at or after `window_open +
/// window_ms` releases the batch (deliver_at = now) and opens a new window
/// with itself.
pub fn delay_admit(s: Sample, spec: &DelaySpec, now: Timestamp, state: &mut DelayState) -> Vec<Delivery> {
    match *spec {
        DelaySpec::FixedLatency { latency_ms } => vec![Delivery {
            deliver_at: now.saturating_add(latency_ms),
            sample: s,
        }],
        DelaySpec::BufferWindow { .. } => {
            let out = delay_flush(spec, now, state);
            if state.window_open.is_none() {
                state.window_open = Some(now);
            }
            state.batch.push(s);
            out
        }
    }
}

/// Releases an expired buffer window without a new arrival.
pub fn delay_flush(spec: &DelaySpec, now: Timestamp, state: &mut DelayState) -> Vec<Delivery> {
    let DelaySpec::BufferWindow { window_ms } = *spec else {
        return Vec::new();
    };
    match state.window_open {
        Some(open) if now >= open.saturating_add(window_ms) => {
            state.window_open = None;
            std::mem::take(&mut state.batch)
                .into_iter()
                .map(|sample| Delivery { deliver_at: now, sample })
                .collect()
        }
        _ => Vec::new(),
    }
}

// ---------------------------------------------------------------------------
// Pipeline

#[derive(Debug, Clone)]
enum StageState {
    Missing {
        policy: MissingPolicy,
        channels: Vec<MissingState>,
    },
    Savgol {
        weights: Vec<f64>,
        centers: VecDeque<Sample>,
        channels: Vec<SavGolState>,
    },
    Kalman {
        params: KalmanParams,
        channels: Vec<KalmanState>,
    },
    Noise {
        spec: NoiseSpec,
        rng: NoiseRng,
    },
    Delay {
        spec: DelaySpec,
        state: DelayState,
    },
}

/// Identity of the stream a pipeline runs on; feeds noise seeding.
#[derive(Debug, Clone, Copy)]
pub struct SeedContext<'a> {
    pub global_seed: u64,
    pub device_id: &'a str,
    pub signal: &'a str,
}

/// A pipeline with its running state, single-owner per subscribed stream.
#[derive(Debug, Clone)]
pub struct Pipeline {
    stages: Vec<StageState>,
}

fn resize_with<T>(v: &mut Vec<T>, n: usize, f: impl FnMut() -> T) {
    if v.len() != n {
        v.resize_with(n, f);
    }
}

impl Pipeline {
    pub fn new(specs: &[TransformSpec], ctx: SeedContext<'_>) -> Result<Self, DspError> {
        let stages = validate_pipeline(specs)?;
        Ok(Self::from_stages(&stages, ctx))
    }

    pub fn from_stages(stages: &[Stage], ctx: SeedContext<'_>) -> Self {
        let stages = stages
            .iter()
            .enumerate()
            .map(|(i, stage)| match *stage {
                Stage::Missing(policy) => StageState::Missing {
                    policy,
                    channels: Vec::new(),
                },
                Stage::Savgol(p) => StageState::Savgol {
                    weights: savgol_coefficients(&p),
                    centers: VecDeque::with_capacity(p.window),
                    channels: Vec::new(),
                },
                Stage::Kalman(params) => StageState::Kalman {
                    params,
                    channels: Vec::new(),
                },
                Stage::Noise(spec) => StageState::Noise {
                    spec,
                    rng: NoiseRng::seeded(stage_seed(
                        spec.seed.unwrap_or(ctx.global_seed),
                        ctx.device_id,
                        ctx.signal,
                        i,
                    )),
                },
                Stage::Delay(spec) => StageState::Delay {
                    spec,
                    state: DelayState::default(),
                },
            })
            .collect();
        Pipeline { stages }
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    /// True when the pipeline ends in a buffer-window delay that may need
    /// [`Pipeline::flush`] calls between arrivals.
    pub fn has_buffer_window(&self) -> bool {
        matches!(
            self.stages.last(),
            Some(StageState::Delay {
                spec: DelaySpec::BufferWindow { .. },
                ..
            })
        )
    }

    /// Runs one sample through every stage. Savgol warm-up yields nothing.
    pub fn apply(&mut self, sample: Sample, now: Timestamp) -> Vec<Delivery> {
        let mut batch = vec![sample];
        for stage in &mut self.stages {
            if let StageState::Delay { spec, state } = stage {
                return batch
                    .into_iter()
                    .flat_map(|s| delay_admit(s, spec, now, state))
                    .collect();
            }
            batch = batch
                .into_iter()
                .filter_map(|s| Self::value_stage(stage, s))
                .collect();
            if batch.is_empty() {
                break;
            }
        }
        batch
            .into_iter()
            .map(|sample| Delivery { deliver_at: now, sample })
            .collect()
    }

    /// Releases an expired buffer window, if any.
    pub fn flush(&mut self, now: Timestamp) -> Vec<Delivery> {
        match self.stages.last_mut() {
            Some(StageState::Delay { spec, state }) => delay_flush(spec, now, state),
            _ => Vec::new(),
        }
    }

    fn value_stage(stage: &mut StageState, mut s: Sample) -> Option<Sample> {
        let n = s.values.len();
        match stage {
            StageState::Missing { policy, channels } => {
                resize_with(channels, n, MissingState::default);
                for (v, st) in s.values.iter_mut().zip(channels.iter_mut()) {
                    *v = apply_missing_policy(*v, *policy, st);
                }
                Some(s)
            }
            StageState::Savgol {
                weights,
                centers,
                channels,
            } => {
                resize_with(channels, n, || SavGolState::from_weights(weights.clone()));
                let window = weights.len();
                let outputs: Vec<Option<SampleValue>> = s
                    .values
                    .iter()
                    .zip(channels.iter_mut())
                    .map(|(v, st)| savgol_apply(*v, st))
                    .collect();
                if centers.len() == window {
                    centers.pop_front();
                }
                centers.push_back(s);
                if centers.len() < window {
                    return None;
                }
                let mut center = centers[window / 2].clone();
                center.values = outputs.into_iter().map(|o| o.unwrap_or(SampleValue::Missing)).collect();
                Some(center)
            }
            StageState::Kalman { params, channels } => {
                resize_with(channels, n, || KalmanState::new(params));
                for (v, st) in s.values.iter_mut().zip(channels.iter_mut()) {
                    let (next, out) = kalman_step(*st, *v, params);
                    *st = next;
                    *v = SampleValue::Number(out);
                }
                Some(s)
            }
            StageState::Noise { spec, rng } => {
                for v in s.values.iter_mut() {
                    *v = add_noise(*v, spec, rng);
                }
                Some(s)
            }
            StageState::Delay { .. } => unreachable!("delay handled by Pipeline::apply"),
        }
    }
}

/// Batch application for offline use; delay stages are rejected.
pub fn apply_offline(samples: impl IntoIterator<Item = Sample>, specs: &[TransformSpec], ctx: SeedContext<'_>) -> Result<Vec<Sample>, DspError> {
    let stages = validate_offline_pipeline(specs)?;
    let mut pipeline = Pipeline::from_stages(&stages, ctx);
    Ok(samples
        .into_iter()
        .flat_map(|s| {
            let t = s.t;
            pipeline.apply(s, t)
        })
        .map(|d| d.sample)
        .collect())
}
