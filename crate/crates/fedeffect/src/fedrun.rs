//! Federated training runtime.
//!
//! One logical worker per source computes its share of the objective
//! gradient; the server sums the shares in ascending source order, takes an
//! ascent step, and broadcasts the new parameters. Only parameter vectors,
//! gradients, and seeds cross the source boundary; unit-level records never
//! leave their worker.
//!
//! Two transports carry the same messages: `inproc` uses channels between
//! threads, `tcp` serializes them as newline-delimited JSON over local
//! sockets.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::mpsc;
use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::mathcore::mix_seed;
use crate::model::{PriorConfig, SourceData, SourceSummary};
use crate::variational::{
    elbo_source, grad_fd, GlobalParams, NoiseBundle, SourceContext, VariationalConfig,
    DEFAULT_FD_EPS,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transport {
    Inproc,
    Tcp,
}

impl core::str::FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            other => Err(Error::InvalidConfig {
                detail: format!("unknown optimizer {other:?}, expected sgd or adam"),
            }),
        }
    }
}

impl core::str::FromStr for Transport {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inproc" => Ok(Transport::Inproc),
            "tcp" => Ok(Transport::Tcp),
            other => Err(Error::InvalidConfig {
                detail: format!("unknown transport {other:?}, expected inproc or tcp"),
            }),
        }
    }
}

/// Training hyperparameters and runtime switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub rounds: usize,
    /// Monte Carlo samples per round for the objective estimate.
    pub mc_samples: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
    /// Drop the cross-source offset machinery from the model.
    pub ablate_g: bool,
    pub transport: Transport,
    /// Relative step for finite-difference gradients.
    pub fd_eps: f64,
    /// Stop early once the aggregated gradient norm falls below this.
    pub stop_grad_norm: Option<f64>,
    /// Reuse one noise seed for every round, making the objective a fixed
    /// deterministic function across rounds.
    pub fixed_noise: bool,
    /// Record the parameter vector after every update.
    pub record_trajectory: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-2,
            rounds: 500,
            mc_samples: 5,
            optimizer: Optimizer::Sgd,
            seed: 0,
            ablate_g: false,
            transport: Transport::Inproc,
            fd_eps: DEFAULT_FD_EPS,
            stop_grad_norm: None,
            fixed_noise: false,
            record_trajectory: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig {
                detail: format!("learning_rate must be positive, got {}", self.learning_rate),
            });
        }
        if self.rounds == 0 || self.mc_samples == 0 {
            return Err(Error::InvalidConfig {
                detail: "rounds and mc_samples must be positive".into(),
            });
        }
        if !(self.fd_eps > 0.0) || !self.fd_eps.is_finite() {
            return Err(Error::InvalidConfig {
                detail: format!("fd_eps must be positive, got {}", self.fd_eps),
            });
        }
        Ok(())
    }

    fn round_noise_seed(&self, round: usize) -> u64 {
        let index = if self.fixed_noise {
            1
        } else {
            round as u64 + 1
        };
        mix_seed(self.seed, index)
    }
}

/// Server-to-worker message: the content is identical for every worker in a
/// round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBroadcast {
    pub round: usize,
    pub theta: Vec<f64>,
    pub noise_seed: u64,
}

/// Worker-to-server message carrying one source's gradient share.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub round: usize,
    pub source_id: usize,
    pub grad: Vec<f64>,
    #[serde(rename = "elbo")]
    pub elbo_value: f64,
}

/// Wire envelope; newline-delimited JSON, one message per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Message {
    Broadcast(ParamBroadcast),
    Grad(GradientReport),
}

pub fn write_message<T: Serialize>(out: &mut impl Write, msg: &T) -> Result<()> {
    let line = serde_json::to_string(msg).map_err(|e| Error::InvalidConfig {
        detail: format!("message serialization failed: {e}"),
    })?;
    out.write_all(line.as_bytes())
        .and_then(|_| out.write_all(b"\n"))
        .and_then(|_| out.flush())
        .map_err(|e| Error::io("<wire>", e))
}

/// Read one message; `None` on a clean end of stream.
pub fn read_message<T: serde::de::DeserializeOwned>(input: &mut impl BufRead) -> Result<Option<T>> {
    let mut line = String::new();
    let n = input
        .read_line(&mut line)
        .map_err(|e| Error::io("<wire>", e))?;
    if n == 0 {
        return Ok(None);
    }
    serde_json::from_str(line.trim_end())
        .map(Some)
        .map_err(|e| Error::InvalidConfig {
            detail: format!("malformed wire message: {e}"),
        })
}

/// One worker's compute state: its source context plus the gradient knobs.
pub struct WorkerSpec {
    pub ctx: SourceContext,
    pub mc_samples: usize,
    pub fd_eps: f64,
}

impl WorkerSpec {
    /// Handle one broadcast: rebuild the round's noise from the shared seed
    /// and return this source's gradient share.
    pub fn handle(&self, b: &ParamBroadcast) -> Result<GradientReport> {
        let d_x = self.ctx.src.d();
        let theta = GlobalParams::from_values(DVector::from_vec(b.theta.clone()), d_x)?;
        let bundles = NoiseBundle::round_bundles(
            b.noise_seed,
            self.mc_samples,
            self.ctx.m_total,
            &self.ctx.vcfg,
        )?;
        let (grad, elbo_value) =
            crate::variational::source_grad(&self.ctx, &theta, &bundles, self.fd_eps)?;
        Ok(GradientReport {
            round: b.round,
            source_id: self.ctx.src.source_id,
            grad: grad.iter().cloned().collect(),
            elbo_value,
        })
    }
}

/// Sum gradient shares in ascending source order.
///
/// Requires exactly one report per expected source, all for the same round;
/// arrival order does not matter.
pub fn aggregate_gradients(
    reports: &[GradientReport],
    expected_sources: &[usize],
    round: usize,
) -> Result<(DVector<f64>, f64)> {
    for r in reports {
        if r.round != round {
            return Err(Error::RoundMismatch {
                expected: round,
                got: r.round,
                source_id: r.source_id,
            });
        }
    }
    let mut sorted: Vec<&GradientReport> = Vec::with_capacity(expected_sources.len());
    let mut expected = expected_sources.to_vec();
    expected.sort_unstable();
    for sid in &expected {
        match reports.iter().filter(|r| r.source_id == *sid).count() {
            1 => sorted.push(reports.iter().find(|r| r.source_id == *sid).unwrap()),
            0 => {
                return Err(Error::MissingReport {
                    source_id: *sid,
                    round,
                })
            }
            _ => {
                return Err(Error::WorkerFailure {
                    source_id: *sid,
                    round,
                    detail: "duplicate gradient report".into(),
                })
            }
        }
    }
    if reports.len() != expected.len() {
        return Err(Error::WorkerFailure {
            source_id: reports
                .iter()
                .find(|r| !expected.contains(&r.source_id))
                .map(|r| r.source_id)
                .unwrap_or(0),
            round,
            detail: "gradient report from unknown source".into(),
        });
    }
    let dim = sorted[0].grad.len();
    let mut grad = DVector::zeros(dim);
    let mut elbo = 0.0;
    for r in sorted {
        if r.grad.len() != dim {
            return Err(Error::DimensionMismatch {
                context: "aggregate_gradients",
                expected: dim,
                got: r.grad.len(),
            });
        }
        for (acc, &g) in grad.iter_mut().zip(r.grad.iter()) {
            *acc += g;
        }
        elbo += r.elbo_value;
    }
    Ok((grad, elbo))
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Optimizer state carried across rounds.
#[derive(Debug, Clone)]
pub enum OptState {
    Sgd,
    Adam {
        m: DVector<f64>,
        v: DVector<f64>,
        t: usize,
    },
}

impl OptState {
    pub fn new(optimizer: Optimizer, dim: usize) -> Self {
        match optimizer {
            Optimizer::Sgd => OptState::Sgd,
            Optimizer::Adam => OptState::Adam {
                m: DVector::zeros(dim),
                v: DVector::zeros(dim),
                t: 0,
            },
        }
    }
}

/// One ascent step in place.
pub fn step(
    theta: &mut DVector<f64>,
    grad: &DVector<f64>,
    lr: f64,
    state: &mut OptState,
    round: usize,
) -> Result<()> {
    match state {
        OptState::Sgd => {
            *theta += grad * lr;
        }
        OptState::Adam { m, v, t } => {
            *t += 1;
            let t_f = *t as f64;
            let bc1 = 1.0 - ADAM_BETA1.powf(t_f);
            let bc2 = 1.0 - ADAM_BETA2.powf(t_f);
            for i in 0..theta.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * grad[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                theta[i] += lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
    if theta.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteParameters { round });
    }
    Ok(())
}

/// One completed round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub round: usize,
    pub elbo: f64,
    pub grad_norm: f64,
    pub wall_s: f64,
}

/// Per-round history of a training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
    /// Parameter vector after each update, when recording is enabled.
    pub trajectory: Option<Vec<Vec<f64>>>,
}

impl TrainTrace {
    pub fn write_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = std::io::BufWriter::new(
            std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?,
        );
        let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);
        writeln!(out, "round,elbo,grad_norm,wall_s").map_err(io_err)?;
        for row in &self.rows {
            writeln!(
                out,
                "{},{},{},{}",
                row.round, row.elbo, row.grad_norm, row.wall_s
            )
            .map_err(io_err)?;
        }
        out.flush().map_err(io_err)
    }
}

struct ServerLoop<'a> {
    cfg: &'a TrainConfig,
    expected_sources: Vec<usize>,
    theta: DVector<f64>,
    d_x: usize,
}

impl ServerLoop<'_> {
    /// Drive rounds to completion. `exchange` delivers one broadcast to all
    /// workers and returns their reports.
    fn run(
        &mut self,
        mut exchange: impl FnMut(&ParamBroadcast) -> Result<Vec<GradientReport>>,
    ) -> Result<TrainTrace> {
        let mut state = OptState::new(self.cfg.optimizer, self.theta.len());
        let mut trace = TrainTrace {
            rows: Vec::with_capacity(self.cfg.rounds),
            trajectory: self.cfg.record_trajectory.then(Vec::new),
        };
        for round in 0..self.cfg.rounds {
            let started = Instant::now();
            let broadcast = ParamBroadcast {
                round,
                theta: self.theta.iter().cloned().collect(),
                noise_seed: self.cfg.round_noise_seed(round),
            };
            let reports = exchange(&broadcast)?;
            let (grad, elbo) = aggregate_gradients(&reports, &self.expected_sources, round)?;
            let grad_norm = grad.norm();
            trace.rows.push(TraceRow {
                round,
                elbo,
                grad_norm,
                wall_s: started.elapsed().as_secs_f64(),
            });
            if round % 50 == 0 || round + 1 == self.cfg.rounds {
                log::info!("round {round}: elbo {elbo:.6}, grad norm {grad_norm:.3e}");
            }
            if let Some(tol) = self.cfg.stop_grad_norm {
                if grad_norm < tol {
                    log::info!("gradient norm below {tol:.1e}; stopping at round {round}");
                    break;
                }
            }
            step(
                &mut self.theta,
                &grad,
                self.cfg.learning_rate,
                &mut state,
                round,
            )?;
            if let Some(traj) = trace.trajectory.as_mut() {
                traj.push(self.theta.iter().cloned().collect());
            }
        }
        Ok(trace)
    }

    fn into_theta(self) -> Result<GlobalParams> {
        GlobalParams::from_values(self.theta, self.d_x)
    }
}

fn build_contexts(
    sources: Vec<SourceData>,
    summaries: &[SourceSummary],
    priors: &PriorConfig,
    vcfg: &VariationalConfig,
    ablate_g: bool,
) -> Result<Vec<SourceContext>> {
    if sources.is_empty() {
        return Err(Error::InvalidConfig {
            detail: "training requires at least one source".into(),
        });
    }
    if sources.len() != summaries.len() {
        return Err(Error::DimensionMismatch {
            context: "build_contexts summaries",
            expected: sources.len(),
            got: summaries.len(),
        });
    }
    let d = sources[0].d();
    for (i, (src, summary)) in sources.iter().zip(summaries).enumerate() {
        if src.source_id != summary.source_id {
            return Err(Error::InvalidConfig {
                detail: format!(
                    "source order mismatch at position {i}: data {} vs summary {}",
                    src.source_id, summary.source_id
                ),
            });
        }
        if src.d() != d {
            return Err(Error::DimensionMismatch {
                context: "build_contexts covariate dim",
                expected: d,
                got: src.d(),
            });
        }
        if src.n() == 0 {
            return Err(Error::InsufficientData {
                context: "build_contexts",
                need: 1,
                got: 0,
            });
        }
    }
    sources
        .into_iter()
        .enumerate()
        .map(|(i, src)| SourceContext::new(src, i, summaries, priors.clone(), *vcfg, ablate_g))
        .collect()
}

/// Federated training entry point; dispatches on the configured transport.
///
/// Sources must arrive ordered by ascending source id, matching their
/// summaries position for position.
pub fn train(
    sources: Vec<SourceData>,
    summaries: &[SourceSummary],
    priors: &PriorConfig,
    vcfg: &VariationalConfig,
    cfg: &TrainConfig,
) -> Result<(GlobalParams, TrainTrace)> {
    cfg.validate()?;
    let d_x = sources
        .first()
        .map(|s| s.d())
        .ok_or_else(|| Error::InvalidConfig {
            detail: "training requires at least one source".into(),
        })?;
    let theta0 = GlobalParams::init(d_x, vcfg);
    train_with_init(theta0, sources, summaries, priors, vcfg, cfg)
}

/// As [`train`], starting from a caller-supplied parameter vector.
pub fn train_with_init(
    theta0: GlobalParams,
    sources: Vec<SourceData>,
    summaries: &[SourceSummary],
    priors: &PriorConfig,
    vcfg: &VariationalConfig,
    cfg: &TrainConfig,
) -> Result<(GlobalParams, TrainTrace)> {
    cfg.validate()?;
    let contexts = build_contexts(sources, summaries, priors, vcfg, cfg.ablate_g)?;
    match cfg.transport {
        Transport::Inproc => train_inproc(theta0, contexts, cfg),
        Transport::Tcp => train_tcp(theta0, contexts, cfg),
    }
}

fn train_inproc(
    theta0: GlobalParams,
    contexts: Vec<SourceContext>,
    cfg: &TrainConfig,
) -> Result<(GlobalParams, TrainTrace)> {
    let expected_sources: Vec<usize> = contexts.iter().map(|c| c.src.source_id).collect();
    let d_x = theta0.layout.d_x;
    let m = contexts.len();
    let (report_tx, report_rx) = mpsc::channel::<(usize, Result<GradientReport>)>();
    let mut broadcast_txs = Vec::with_capacity(m);
    let mut handles = Vec::with_capacity(m);
    for ctx in contexts {
        let (tx, rx) = mpsc::channel::<ParamBroadcast>();
        broadcast_txs.push(tx);
        let report_tx = report_tx.clone();
        let spec = WorkerSpec {
            ctx,
            mc_samples: cfg.mc_samples,
            fd_eps: cfg.fd_eps,
        };
        handles.push(std::thread::spawn(move || {
            let sid = spec.ctx.src.source_id;
            for broadcast in rx.iter() {
                let result = spec.handle(&broadcast);
                let failed = result.is_err();
                if report_tx.send((sid, result)).is_err() || failed {
                    break;
                }
            }
        }));
    }
    drop(report_tx);

    let mut server = ServerLoop {
        cfg,
        expected_sources,
        theta: theta0.values,
        d_x,
    };
    let outcome = server.run(|broadcast| {
        for (i, tx) in broadcast_txs.iter().enumerate() {
            tx.send(broadcast.clone())
                .map_err(|_| Error::WorkerFailure {
                    source_id: i,
                    round: broadcast.round,
                    detail: "worker channel closed".into(),
                })?;
        }
        let mut reports = Vec::with_capacity(broadcast_txs.len());
        for _ in 0..broadcast_txs.len() {
            match report_rx.recv() {
                Ok((_, Ok(report))) => reports.push(report),
                Ok((sid, Err(e))) => {
                    return Err(Error::WorkerFailure {
                        source_id: sid,
                        round: broadcast.round,
                        detail: e.to_string(),
                    })
                }
                Err(_) => {
                    return Err(Error::WorkerFailure {
                        source_id: 0,
                        round: broadcast.round,
                        detail: "all workers disconnected".into(),
                    })
                }
            }
        }
        Ok(reports)
    });
    drop(broadcast_txs);
    for h in handles {
        let _ = h.join();
    }
    let trace = outcome?;
    Ok((server.into_theta()?, trace))
}

/// Serve one worker over an established stream: read broadcasts, answer
/// with gradient reports, exit on end of stream.
pub fn run_tcp_worker(stream: TcpStream, spec: &WorkerSpec) -> Result<()> {
    let mut reader = BufReader::new(stream.try_clone().map_err(|e| Error::io("<tcp>", e))?);
    let mut writer = stream;
    while let Some(msg) = read_message(&mut reader)? {
        let broadcast = match msg {
            Message::Broadcast(b) => b,
            Message::Grad(_) => {
                return Err(Error::InvalidConfig {
                    detail: "worker received a gradient message".into(),
                })
            }
        };
        let report = spec.handle(&broadcast)?;
        write_message(&mut writer, &Message::Grad(report))?;
    }
    Ok(())
}

fn train_tcp(
    theta0: GlobalParams,
    contexts: Vec<SourceContext>,
    cfg: &TrainConfig,
) -> Result<(GlobalParams, TrainTrace)> {
    let expected_sources: Vec<usize> = contexts.iter().map(|c| c.src.source_id).collect();
    let d_x = theta0.layout.d_x;
    let m = contexts.len();
    let listener = TcpListener::bind("127.0.0.1:0").map_err(|e| Error::io("127.0.0.1:0", e))?;
    let addr = listener.local_addr().map_err(|e| Error::io("<tcp>", e))?;
    let mut handles = Vec::with_capacity(m);
    for ctx in contexts {
        let spec = WorkerSpec {
            ctx,
            mc_samples: cfg.mc_samples,
            fd_eps: cfg.fd_eps,
        };
        handles.push(std::thread::spawn(move || -> Result<()> {
            let stream = TcpStream::connect(addr).map_err(|e| Error::io(addr.to_string(), e))?;
            run_tcp_worker(stream, &spec)
        }));
    }
    let mut conns = Vec::with_capacity(m);
    for _ in 0..m {
        let (stream, _) = listener.accept().map_err(|e| Error::io("<tcp>", e))?;
        let reader = BufReader::new(stream.try_clone().map_err(|e| Error::io("<tcp>", e))?);
        conns.push((stream, reader));
    }

    let mut server = ServerLoop {
        cfg,
        expected_sources,
        theta: theta0.values,
        d_x,
    };
    let outcome = server.run(|broadcast| {
        for (i, (stream, _)) in conns.iter_mut().enumerate() {
            write_message(stream, &Message::Broadcast(broadcast.clone())).map_err(|e| {
                Error::WorkerFailure {
                    source_id: i,
                    round: broadcast.round,
                    detail: format!("broadcast write failed: {e}"),
                }
            })?;
        }
        let mut reports = Vec::with_capacity(conns.len());
        for (i, (_, reader)) in conns.iter_mut().enumerate() {
            match read_message(reader) {
                Ok(Some(Message::Grad(report))) => reports.push(report),
                Ok(Some(Message::Broadcast(_))) => {
                    return Err(Error::WorkerFailure {
                        source_id: i,
                        round: broadcast.round,
                        detail: "server received a broadcast message".into(),
                    })
                }
                Ok(None) => {
                    return Err(Error::WorkerFailure {
                        source_id: i,
                        round: broadcast.round,
                        detail: "worker connection closed mid-round".into(),
                    })
                }
                Err(e) => {
                    return Err(Error::WorkerFailure {
                        source_id: i,
                        round: broadcast.round,
                        detail: format!("report read failed: {e}"),
                    })
                }
            }
        }
        Ok(reports)
    });
    drop(conns);
    let mut worker_error = None;
    for h in handles {
        match h.join() {
            Ok(Ok(())) => {}
            Ok(Err(e)) => worker_error = Some(e),
            Err(_) => {
                worker_error = Some(Error::WorkerFailure {
                    source_id: 0,
                    round: 0,
                    detail: "worker thread panicked".into(),
                })
            }
        }
    }
    let trace = outcome?;
    if let Some(e) = worker_error {
        return Err(e);
    }
    Ok((server.into_theta()?, trace))
}

/// Centralized twin of [`train`]: the same ascent loop, with the pooled
/// gradient computed in place by generic finite differences per source.
/// Serves as the equivalence oracle for the federated runtime.
pub fn train_centralized(
    sources: Vec<SourceData>,
    summaries: &[SourceSummary],
    priors: &PriorConfig,
    vcfg: &VariationalConfig,
    cfg: &TrainConfig,
) -> Result<(GlobalParams, TrainTrace)> {
    cfg.validate()?;
    let d_x = sources
        .first()
        .map(|s| s.d())
        .ok_or_else(|| Error::InvalidConfig {
            detail: "training requires at least one source".into(),
        })?;
    let contexts = build_contexts(sources, summaries, priors, vcfg, cfg.ablate_g)?;
    let theta0 = GlobalParams::init(d_x, vcfg);
    let mut server = ServerLoop {
        cfg,
        expected_sources: contexts.iter().map(|c| c.src.source_id).collect(),
        theta: theta0.values,
        d_x,
    };
    let outcome =
        server.run(|broadcast| centralized_round(&contexts, broadcast, cfg.mc_samples, cfg.fd_eps));
    let trace = outcome?;
    Ok((server.into_theta()?, trace))
}

/// One centralized round: per-source generic gradients at the broadcast
/// parameters, packaged in the same report form the workers use.
pub fn centralized_round(
    contexts: &[SourceContext],
    broadcast: &ParamBroadcast,
    mc_samples: usize,
    fd_eps: f64,
) -> Result<Vec<GradientReport>> {
    let mut reports = Vec::with_capacity(contexts.len());
    for ctx in contexts {
        let d_x = ctx.src.d();
        let bundles =
            NoiseBundle::round_bundles(broadcast.noise_seed, mc_samples, ctx.m_total, &ctx.vcfg)?;
        let theta_vec = DVector::from_vec(broadcast.theta.clone());
        let grad = grad_fd(
            |t| {
                let gp = GlobalParams::from_values(t.clone(), d_x)?;
                elbo_source(ctx, &gp, &bundles)
            },
            &theta_vec,
            fd_eps,
        )?;
        let theta = GlobalParams::from_values(theta_vec, d_x)?;
        let elbo_value = elbo_source(ctx, &theta, &bundles)?;
        reports.push(GradientReport {
            round: broadcast.round,
            source_id: ctx.src.source_id,
            grad: grad.iter().cloned().collect(),
            elbo_value,
        });
    }
    Ok(reports)
}
