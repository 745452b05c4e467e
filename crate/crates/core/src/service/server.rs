//! TCP front end: newline-delimited JSON over persistent connections.
//!
//! One task owns the engine and the decision sink; connections hand it
//! parsed messages over a channel and receive replies and published
//! commands through per-connection unbounded queues.

use std::net::SocketAddr;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinHandle;

use super::engine::{Engine, SensorReading, TickOutput};
use super::log::DecisionSink;
use super::messages::{Health, Message};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    /// Ticks follow reading timestamps; deterministic for a given stream.
    #[default]
    Event,
    /// Ticks follow the system clock every tick period.
    Wall,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServeConfig {
    pub host: String,
    pub port: u16,
    pub clock: ClockMode,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig {
            host: "127.0.0.1".into(),
            port: 7878,
            clock: ClockMode::Event,
        }
    }
}

type Outbox = mpsc::UnboundedSender<String>;

struct Request {
    message: Message,
    reply: Outbox,
}

/// A running service. Dropping the handle leaves the service running until
/// the runtime shuts down; call [`ServerHandle::shutdown`] to stop it cleanly.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    engine_task: JoinHandle<Result<Health>>,
    accept_task: JoinHandle<()>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting, ticks out buffered readings (event clock), flushes
    /// the log and returns the final health counters.
    pub async fn shutdown(mut self) -> Result<Health> {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        self.accept_task.abort();
        self.engine_task
            .await
            .map_err(|e| Error::Protocol(format!("engine task failed: {e}")))?
    }
}

/// Binds the endpoint and starts the decision loop.
pub async fn serve(engine: Engine, sink: Box<dyn DecisionSink>, config: ServeConfig) -> Result<ServerHandle> {
    let listener = TcpListener::bind((config.host.as_str(), config.port)).await?;
    let addr = listener.local_addr()?;
    let (req_tx, req_rx) = mpsc::unbounded_channel::<Request>();
    let (stop_tx, stop_rx) = oneshot::channel();
    let engine_task = tokio::spawn(run_engine(engine, sink, config.clock, req_rx, stop_rx));
    let accept_task = tokio::spawn(async move {
        loop {
            match listener.accept().await {
                Ok((stream, _)) => {
                    tokio::spawn(handle_connection(stream, req_tx.clone()));
                }
                Err(e) => tracing::warn!("accept failed: {e}"),
            }
        }
    });
    Ok(ServerHandle {
        addr,
        stop: Some(stop_tx),
        engine_task,
        accept_task,
    })
}

async fn handle_connection(stream: TcpStream, requests: mpsc::UnboundedSender<Request>) {
    let (read, mut write) = stream.into_split();
    let (out_tx, mut out_rx) = mpsc::unbounded_channel::<String>();
    let writer = tokio::spawn(async move {
        while let Some(mut line) = out_rx.recv().await {
            line.push('\n');
            if write.write_all(line.as_bytes()).await.is_err() {
                break;
            }
        }
    });
    let mut lines = BufReader::new(read).lines();
    while let Ok(Some(line)) = lines.next_line().await {
        if line.trim().is_empty() {
            continue;
        }
        match Message::decode(&line) {
            Ok(message) => {
                let req = Request {
                    message,
                    reply: out_tx.clone(),
                };
                if requests.send(req).is_err() {
                    break;
                }
            }
            Err(e) => {
                let _ = out_tx.send(Message::error(e.to_string()).encode());
            }
        }
    }
    // Let queued replies drain, then close; the engine drops this
    // connection's subscription on its next failed send.
    drop(out_tx);
    let _ = tokio::time::timeout(Duration::from_millis(200), writer).await;
}

struct Loop {
    engine: Engine,
    sink: Box<dyn DecisionSink>,
    subscribers: Vec<Outbox>,
}

impl Loop {
    fn publish(&mut self, tick: TickOutput) -> Result<()> {
        for r in &tick.records {
            self.sink.record(r)?;
        }
        self.sink.flush()?;
        let lines: Vec<String> = tick.commands().iter().map(Message::encode).collect();
        self.subscribers
            .retain(|s| lines.iter().all(|l| s.send(l.clone()).is_ok()));
        Ok(())
    }

    fn health(&mut self) -> Health {
        self.subscribers.retain(|s| !s.is_closed());
        Health {
            subscribers: self.subscribers.len(),
            ..self.engine.health()
        }
    }

    fn handle(&mut self, clock: ClockMode, message: Message, reply: &Outbox) -> Result<()> {
        let send = |m: Message| {
            let _ = reply.send(m.encode());
        };
        match message {
            Message::SensorUpdate {
                sensor_id,
                timestamp,
                speed,
                occupancy,
            } => {
                let reading = SensorReading {
                    sensor_id,
                    timestamp,
                    speed,
                    occupancy,
                };
                let result = match clock {
                    ClockMode::Event => self.engine.ingest(&reading),
                    ClockMode::Wall => self.engine.buffer_reading(&reading).map(|_| Vec::new()),
                };
                match result {
                    Ok(ticks) => {
                        for t in ticks {
                            self.publish(t)?;
                        }
                    }
                    Err(Error::Protocol(m)) => {
                        self.engine.note_error();
                        send(Message::error(m));
                    }
                    Err(e) => return Err(e),
                }
            }
            Message::CommandRejected {
                gantry_id,
                timestamp,
                reason,
            } => match self.engine.reject(&gantry_id, timestamp, &reason) {
                Ok(rec) => {
                    tracing::warn!(gantry = %gantry_id, timestamp, "command rejected: {reason}");
                    self.sink.rejection(&rec)?;
                    self.sink.flush()?;
                }
                Err(e) => send(Message::error(e.to_string())),
            },
            Message::HealthQuery => send(Message::HealthReply(self.health())),
            Message::Subscribe => {
                self.subscribers.push(reply.clone());
                send(Message::Subscribed);
            }
            Message::Flush => {
                let tick = match clock {
                    ClockMode::Event => self.engine.flush()?,
                    ClockMode::Wall => Some(self.engine.tick_at(wall_tick(self.engine.config().tick_seconds))?),
                };
                let ticks = u64::from(tick.is_some());
                if let Some(t) = tick {
                    self.publish(t)?;
                }
                send(Message::Flushed { ticks });
            }
            other => send(Message::error(format!("unexpected message type {}", other.kind()))),
        }
        Ok(())
    }
}

fn wall_tick(period: u32) -> i64 {
    let now = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs() as i64);
    let p = i64::from(period.max(1));
    now.div_euclid(p) * p
}

async fn run_engine(
    engine: Engine,
    sink: Box<dyn DecisionSink>,
    clock: ClockMode,
    mut requests: mpsc::UnboundedReceiver<Request>,
    mut stop: oneshot::Receiver<()>,
) -> Result<Health> {
    let period = Duration::from_secs(u64::from(engine.config().tick_seconds));
    let mut state = Loop {
        engine,
        sink,
        subscribers: Vec::new(),
    };
    let mut ticker = tokio::time::interval_at(tokio::time::Instant::now() + period, period);
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);
    loop {
        tokio::select! {
            biased;
            _ = &mut stop => break,
            req = requests.recv() => match req {
                Some(Request { message, reply }) => state.handle(clock, message, &reply)?,
                None => break,
            },
            _ = ticker.tick(), if clock == ClockMode::Wall => {
                let t = state.engine.tick_at(wall_tick(state.engine.config().tick_seconds))?;
                state.publish(t)?;
            }
        }
    }
    // Serve whatever was already queued before stopping.
    while let Ok(Request { message, reply }) = requests.try_recv() {
        state.handle(clock, message, &reply)?;
    }
    if clock == ClockMode::Event {
        if let Some(t) = state.engine.flush()? {
            state.publish(t)?;
        }
    }
    state.sink.flush()?;
    Ok(state.health())
}

/// Minimal line-oriented client, used by the mock peer and tests.
pub struct Client {
    lines: tokio::io::Lines<BufReader<tokio::net::tcp::OwnedReadHalf>>,
    write: tokio::net::tcp::OwnedWriteHalf,
}

impl Client {
    pub async fn connect(addr: SocketAddr) -> Result<Self> {
        let stream = TcpStream::connect(addr).await?;
        stream.set_nodelay(true)?;
        let (read, write) = stream.into_split();
        Ok(Client {
            lines: BufReader::new(read).lines(),
            write,
        })
    }

    pub async fn send(&mut self, message: &Message) -> Result<()> {
        self.send_raw(&message.encode()).await
    }

    pub async fn send_raw(&mut self, line: &str) -> Result<()> {
        self.write.write_all(line.as_bytes()).await?;
        self.write.write_all(b"\n").await?;
        Ok(())
    }

    /// Next message from the server; `None` once the connection closes.
    pub async fn recv(&mut self) -> Result<Option<Message>> {
        match self.lines.next_line().await? {
            Some(line) => Message::decode(&line).map(Some),
            None => Ok(None),
        }
    }

    /// Reads until a message satisfies `pred`, returning everything read.
    pub async fn recv_until(&mut self, mut pred: impl FnMut(&Message) -> bool) -> Result<Vec<Message>> {
        let mut out = Vec::new();
        while let Some(m) = self.recv().await? {
            let done = pred(&m);
            out.push(m);
            if done {
                return Ok(out);
            }
        }
        Err(Error::Protocol("connection closed".into()))
    }
}

/// Streams a recording to the service like a TMC peer would, then asks it
/// to tick out the remainder. Returns the number of ticks the flush ran.
pub async fn stream_recording(addr: SocketAddr, readings: &[SensorReading]) -> Result<u64> {
    let mut client = Client::connect(addr).await?;
    let mut batch = String::new();
    for r in readings {
        batch.push_str(&r.to_message().encode());
        batch.push('\n');
        if batch.len() > 64 * 1024 {
            client.write.write_all(batch.as_bytes()).await?;
            batch.clear();
        }
    }
    client.write.write_all(batch.as_bytes()).await?;
    client.send(&Message::Flush).await?;
    let replies = client.recv_until(|m| matches!(m, Message::Flushed { .. })).await?;
    if let Some(Message::Error { message }) = replies.iter().find(|m| matches!(m, Message::Error { .. })) {
        return Err(Error::Protocol(message.clone()));
    }
    match replies.last() {
        Some(Message::Flushed { ticks }) => Ok(*ticks),
        _ => Err(Error::Protocol("no flush reply".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corridor::{CorridorConfig, Direction, GantryConfig, SensorConfig, SpeedLimit};
    use crate::marl::policy::ConstantPolicy;
    use crate::service::engine::EngineConfig;
    use crate::service::log::MemorySink;
    use std::sync::Arc;

    fn engine() -> Engine {
        let c = CorridorConfig {
            direction: Direction::Decreasing,
            default_max: 70,
            sensor_radius_mi: 2.0,
            gantries: (0..3)
                .map(|i| GantryConfig {
                    id: format!("g{i}"),
                    milepost: 10.0 + i as f64,
                    max_limit: None,
                })
                .collect(),
            sensors: (0..3)
                .map(|i| SensorConfig {
                    id: format!("s{i}"),
                    milepost: 9.9 + i as f64,
                })
                .collect(),
        }
        .build()
        .unwrap();
        Engine::new(c, Arc::new(ConstantPolicy(SpeedLimit::MAX)), EngineConfig::default()).unwrap()
    }

    fn cfg() -> ServeConfig {
        ServeConfig {
            port: 0,
            ..ServeConfig::default()
        }
    }

    fn update(s: usize, ts: i64) -> Message {
        Message::SensorUpdate {
            sensor_id: format!("s{s}"),
            timestamp: ts,
            speed: Some(70.0),
            occupancy: Some(0.02),
        }
    }

    #[tokio::test]
    async fn health_and_errors_keep_connection() {
        let sink = MemorySink::new();
        let h = serve(engine(), Box::new(sink.clone()), cfg()).await.unwrap();
        let mut c = Client::connect(h.local_addr()).await.unwrap();
        c.send_raw("{garbage").await.unwrap();
        assert!(matches!(c.recv().await.unwrap(), Some(Message::Error { .. })));
        c.send(&update(9, 0)).await.unwrap();
        assert!(matches!(c.recv().await.unwrap(), Some(Message::Error { .. })));
        c.send(&Message::Subscribed).await.unwrap();
        assert!(matches!(c.recv().await.unwrap(), Some(Message::Error { .. })));
        c.send(&Message::HealthQuery).await.unwrap();
        match c.recv().await.unwrap() {
            Some(Message::HealthReply(health)) => {
                assert_eq!(health.ticks, 0);
                assert_eq!(health.errors, 1);
            }
            other => panic!("{other:?}"),
        }
        h.shutdown().await.unwrap();
    }

    #[tokio::test]
    async fn subscribers_receive_identical_commands() {
        let sink = MemorySink::new();
        let h = serve(engine(), Box::new(sink.clone()), cfg()).await.unwrap();
        let mut subs = Vec::new();
        for _ in 0..2 {
            let mut c = Client::connect(h.local_addr()).await.unwrap();
            c.send(&Message::Subscribe).await.unwrap();
            assert_eq!(c.recv().await.unwrap(), Some(Message::Subscribed));
            subs.push(c);
        }
        // A third subscriber that disconnects straight away.
        let mut gone = Client::connect(h.local_addr()).await.unwrap();
        gone.send(&Message::Subscribe).await.unwrap();
        gone.recv().await.unwrap();
        drop(gone);

        let mut peer = Client::connect(h.local_addr()).await.unwrap();
        for ts in [0, 30, 60] {
            for s in 0..3 {
                peer.send(&update(s, ts)).await.unwrap();
            }
        }
        peer.send(&Message::Flush).await.unwrap();
        assert_eq!(peer.recv().await.unwrap(), Some(Message::Flushed { ticks: 1 }));
        let mut seen = Vec::new();
        for c in &mut subs {
            let mut got = Vec::new();
            for _ in 0..9 {
                got.push(c.recv().await.unwrap().unwrap());
            }
            assert!(got.iter().all(|m| matches!(m, Message::SpeedLimitCommand { .. })));
            seen.push(got);
        }
        assert_eq!(seen[0], seen[1]);
        peer.send(&Message::HealthQuery).await.unwrap();
        match peer.recv().await.unwrap() {
            Some(Message::HealthReply(health)) => {
                assert_eq!(health.ticks, 3);
                assert_eq!(health.subscribers, 2);
            }
            other => panic!("{other:?}"),
        }
        let health = h.shutdown().await.unwrap();
        assert_eq!(health.ticks, 3);
        assert_eq!(sink.records().len(), 9);
    }

    #[tokio::test]
    async fn logs_without_subscribers() {
        let sink = MemorySink::new();
        let h = serve(engine(), Box::new(sink.clone()), cfg()).await.unwrap();
        let readings: Vec<SensorReading> = (0..3)
            .map(|s| SensorReading {
                sensor_id: format!("s{s}"),
                timestamp: 30,
                speed: Some(70.0),
                occupancy: Some(0.0),
            })
            .collect();
        assert_eq!(stream_recording(h.local_addr(), &readings).await.unwrap(), 1);
        h.shutdown().await.unwrap();
        assert_eq!(sink.records().len(), 3);
    }

    #[tokio::test]
    async fn bind_conflict_is_an_error() {
        let h = serve(engine(), Box::new(MemorySink::new()), cfg()).await.unwrap();
        let taken = ServeConfig {
            port: h.local_addr().port(),
            ..ServeConfig::default()
        };
        assert!(matches!(
            serve(engine(), Box::new(MemorySink::new()), taken).await,
            Err(Error::Io(_))
        ));
        h.shutdown().await.unwrap();
    }
}
