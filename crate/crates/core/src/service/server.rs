use std::collections::{BTreeMap, HashMap};
use std::io::{self, BufReader};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{sync_channel, TrySendError};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use super::protocol::{
    read_frame, read_message, write_message, ClientBody, ClientMessage, ErrorCode, ServerBody,
    ServerMessage, SessionSummary, TemplateInfo, MAX_MESSAGE_BYTES, PROTOCOL_VERSION,
};
use crate::error::{Error, Result};
use crate::feedback::{FeedbackConfig, FeedbackSession};
use crate::models::Pipeline;
use crate::skeleton::{
    Dataset, ExerciseId, Recording, SkeletonFrame, DEFAULT_RATE_HZ, MAX_CLINICAL_SCORE, NUM_JOINTS,
};

/// Templates, scoring pipelines and grading shared read-only by every
/// connection.
#[derive(Debug)]
pub struct ServiceState {
    templates: BTreeMap<ExerciseId, Arc<Recording>>,
    pipelines: BTreeMap<ExerciseId, Pipeline>,
    feedback: FeedbackConfig,
}

impl ServiceState {
    /// The first template given for an exercise wins.
    pub fn new(
        templates: Vec<Recording>,
        pipelines: Vec<Pipeline>,
        feedback: FeedbackConfig,
    ) -> Result<Self> {
        feedback.scale.validate()?;
        let mut map = BTreeMap::new();
        for t in templates {
            t.validate()?;
            if map.contains_key(&t.exercise) {
                log::warn!(
                    "ignoring extra template `{}` for {}",
                    t.subject_id,
                    t.exercise
                );
                continue;
            }
            map.insert(t.exercise, Arc::new(t));
        }
        if map.is_empty() {
            return Err(Error::EmptyInput("no templates loaded".into()));
        }
        let pipelines = pipelines.into_iter().map(|p| (p.exercise(), p)).collect();
        Ok(ServiceState {
            templates: map,
            pipelines,
            feedback,
        })
    }

    /// Loads `.rec` templates from a directory and every `*.json` pipeline
    /// checkpoint from an optional second directory.
    pub fn load(
        templates_dir: &Path,
        checkpoints_dir: Option<&Path>,
        feedback: FeedbackConfig,
    ) -> Result<Self> {
        let templates = Dataset::from_dir(templates_dir)?.recordings;
        let mut pipelines = Vec::new();
        if let Some(dir) = checkpoints_dir {
            let mut paths: Vec<_> = std::fs::read_dir(dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect();
            paths.sort();
            for p in paths {
                pipelines.push(Pipeline::load(&p)?);
            }
        }
        Self::new(templates, pipelines, feedback)
    }

    pub fn templates(&self) -> Vec<TemplateInfo> {
        self.templates
            .iter()
            .map(|(ex, t)| TemplateInfo {
                exercise: *ex,
                name: ex.name().into(),
                frames: t.len(),
                scoring: self.pipelines.contains_key(ex),
            })
            .collect()
    }

    pub fn template(&self, exercise: ExerciseId) -> Option<&Arc<Recording>> {
        self.templates.get(&exercise)
    }
}

#[derive(Clone, Debug)]
pub struct ServerConfig {
    /// Messages buffered per connection before live frames are dropped.
    pub queue_capacity: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            queue_capacity: 256,
        }
    }
}

struct Session {
    exercise: ExerciseId,
    feedback: FeedbackSession,
    last_seq: u64,
    frames: Vec<SkeletonFrame>,
}

type Writer = Arc<Mutex<TcpStream>>;

fn send(writer: &Writer, msg: &ServerMessage) -> io::Result<()> {
    let mut w = writer.lock().unwrap_or_else(|e| e.into_inner());
    write_message(&mut *w, msg)
}

/// Per-connection message handling; owns that connection's sessions.
struct Worker {
    state: Arc<ServiceState>,
    sessions: HashMap<String, Session>,
}

impl Worker {
    fn handle(&mut self, msg: ClientMessage) -> ServerMessage {
        let (sid, seq) = (msg.session_id.clone(), msg.seq);
        match msg.body {
            ClientBody::ListTemplates => ServerMessage::new(
                &sid,
                seq,
                ServerBody::Templates {
                    templates: self.state.templates(),
                },
            ),
            ClientBody::StartSession { exercise } => self.start(&sid, seq, &exercise),
            ClientBody::LiveFrame { frame } => self.frame(&sid, seq, frame),
            ClientBody::EndSession => self.end(&sid, seq),
        }
    }

    fn start(&mut self, sid: &str, seq: u64, exercise: &str) -> ServerMessage {
        if self.sessions.contains_key(sid) {
            return ServerMessage::error(
                sid,
                seq,
                ErrorCode::SessionExists,
                format!("session `{sid}` is already open"),
            );
        }
        let Some((ex, template)) = exercise
            .parse::<ExerciseId>()
            .ok()
            .and_then(|ex| self.state.template(ex).map(|t| (ex, Arc::clone(t))))
        else {
            return ServerMessage::error(
                sid,
                seq,
                ErrorCode::UnknownExercise,
                format!("no template for exercise `{exercise}`"),
            );
        };
        let template_frames = template.len();
        let feedback = match FeedbackSession::new(template, self.state.feedback.clone()) {
            Ok(f) => f,
            Err(e) => {
                return ServerMessage::error(sid, seq, ErrorCode::UnknownExercise, e.to_string())
            }
        };
        self.sessions.insert(
            sid.to_string(),
            Session {
                exercise: ex,
                feedback,
                last_seq: seq,
                frames: Vec::new(),
            },
        );
        ServerMessage::new(
            sid,
            seq,
            ServerBody::SessionStarted {
                exercise: ex,
                name: ex.name().into(),
                template_frames,
            },
        )
    }

    fn session(&mut self, sid: &str, seq: u64) -> std::result::Result<&mut Session, ServerMessage> {
        let Some(session) = self.sessions.get_mut(sid) else {
            return Err(ServerMessage::error(
                sid,
                seq,
                ErrorCode::UnknownSession,
                format!("no open session `{sid}`"),
            ));
        };
        if seq <= session.last_seq {
            return Err(ServerMessage::error(
                sid,
                seq,
                ErrorCode::BadSequence,
                format!("sequence number {seq} does not follow {}", session.last_seq),
            ));
        }
        session.last_seq = seq;
        Ok(session)
    }

    fn frame(&mut self, sid: &str, seq: u64, raw: serde_json::Value) -> ServerMessage {
        let session = match self.session(sid, seq) {
            Ok(s) => s,
            Err(reply) => return reply,
        };
        let frame: SkeletonFrame = match serde_json::from_value(raw) {
            Ok(f) => f,
            Err(e) => {
                return ServerMessage::error(
                    sid,
                    seq,
                    ErrorCode::BadFrame,
                    format!("invalid frame, expected {NUM_JOINTS} joints: {e}"),
                )
            }
        };
        match session.feedback.step(&frame) {
            Ok(feedback) => {
                session.frames.push(frame);
                ServerMessage::new(sid, seq, ServerBody::Feedback { feedback })
            }
            Err(e) => ServerMessage::error(sid, seq, ErrorCode::BadFrame, e.to_string()),
        }
    }

    fn end(&mut self, sid: &str, seq: u64) -> ServerMessage {
        if let Err(reply) = self.session(sid, seq) {
            return reply;
        }
        let mut session = self.sessions.remove(sid).expect("checked above");
        let template_frames = session.feedback.template().len();
        let stats = match session.feedback.close() {
            Ok(s) => s,
            Err(e) => {
                return ServerMessage::error(sid, seq, ErrorCode::UnknownSession, e.to_string())
            }
        };
        let predicted_score = self.predict(&session);
        let overall = if stats.frames == 0 {
            0.0
        } else {
            stats.mean_t.iter().sum::<f64>() / NUM_JOINTS as f64
        };
        ServerMessage::new(
            sid,
            seq,
            ServerBody::SessionSummary(SessionSummary {
                frames: stats.frames,
                mean_t: stats.mean_t,
                overall,
                predicted_score,
                partial: 2 * session.frames.len() < template_frames,
            }),
        )
    }

    fn predict(&self, session: &Session) -> Option<f64> {
        let pipeline = self.state.pipelines.get(&session.exercise)?;
        if session.frames.len() < 2 {
            return None;
        }
        // client frame numbering is not trusted; restamp at the nominal rate
        let frames = session
            .frames
            .iter()
            .enumerate()
            .map(|(i, f)| SkeletonFrame {
                frame_index: i as u64,
                timestamp_ms: i as f64 * 1000.0 / DEFAULT_RATE_HZ,
                ..f.clone()
            })
            .collect();
        let rec = Recording {
            subject_id: "live".into(),
            exercise: session.exercise,
            cohort: crate::skeleton::Cohort::Impaired,
            frames,
            clinical_score: None,
        };
        match pipeline.score_recording(&rec) {
            Ok(s) => Some(s.clamp(0.0, MAX_CLINICAL_SCORE)),
            Err(e) => {
                log::warn!("scoring failed for {}: {e}", session.exercise);
                None
            }
        }
    }
}

fn serve_connection(
    stream: TcpStream,
    state: Arc<ServiceState>,
    cfg: ServerConfig,
) -> io::Result<()> {
    stream.set_nodelay(true)?;
    let writer: Writer = Arc::new(Mutex::new(stream.try_clone()?));
    let (tx, rx) = sync_channel::<ClientMessage>(cfg.queue_capacity.max(1));
    let worker_writer = Arc::clone(&writer);
    let worker = thread::spawn(move || {
        let mut w = Worker {
            state,
            sessions: HashMap::new(),
        };
        for msg in rx {
            let reply = w.handle(msg);
            if send(&worker_writer, &reply).is_err() {
                break;
            }
        }
    });

    let mut reader = BufReader::new(stream);
    let result = loop {
        let bytes = match read_frame(&mut reader, MAX_MESSAGE_BYTES) {
            Ok(Some(b)) => b,
            Ok(None) => break Ok(()),
            Err(e) => break Err(e),
        };
        let msg: ClientMessage = match serde_json::from_slice(&bytes) {
            Ok(m) => m,
            Err(e) => {
                let (sid, seq) = envelope_ids(&bytes);
                send(
                    &writer,
                    &ServerMessage::error(&sid, seq, ErrorCode::BadMessage, e.to_string()),
                )?;
                continue;
            }
        };
        if msg.v != PROTOCOL_VERSION {
            let reply = ServerMessage::error(
                &msg.session_id,
                msg.seq,
                ErrorCode::UnsupportedVersion,
                format!(
                    "protocol version {} is not supported (expected {PROTOCOL_VERSION})",
                    msg.v
                ),
            );
            send(&writer, &reply)?;
            continue;
        }
        if matches!(msg.body, ClientBody::LiveFrame { .. }) {
            match tx.try_send(msg) {
                Ok(()) => {}
                Err(TrySendError::Full(m)) => {
                    let reply = ServerMessage::new(
                        &m.session_id,
                        m.seq,
                        ServerBody::Dropped {
                            text: "frame queue full; frame discarded".into(),
                        },
                    );
                    send(&writer, &reply)?;
                }
                Err(TrySendError::Disconnected(_)) => break Ok(()),
            }
        } else if tx.send(msg).is_err() {
            break Ok(());
        }
    };
    drop(tx);
    let _ = worker.join();
    result
}

/// Best-effort `session_id` and `seq` from a message that failed to decode.
fn envelope_ids(bytes: &[u8]) -> (String, u64) {
    let v: serde_json::Value = serde_json::from_slice(bytes).unwrap_or_default();
    (
        v.get("session_id")
            .and_then(|s| s.as_str())
            .unwrap_or_default()
            .to_string(),
        v.get("seq").and_then(|s| s.as_u64()).unwrap_or(0),
    )
}

pub struct Server {
    listener: TcpListener,
    state: Arc<ServiceState>,
    config: ServerConfig,
    stop: Arc<AtomicBool>,
}

impl Server {
    pub fn bind(
        addr: impl ToSocketAddrs,
        state: ServiceState,
        config: ServerConfig,
    ) -> Result<Self> {
        Ok(Server {
            listener: TcpListener::bind(addr)?,
            state: Arc::new(state),
            config,
            stop: Arc::new(AtomicBool::new(false)),
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    /// Accepts connections until shut down, one thread per connection.
    pub fn run(self) -> Result<()> {
        for stream in self.listener.incoming() {
            if self.stop.load(Ordering::SeqCst) {
                break;
            }
            let stream = match stream {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    continue;
                }
            };
            let state = Arc::clone(&self.state);
            let cfg = self.config.clone();
            thread::spawn(move || {
                let peer = stream.peer_addr().ok();
                if let Err(e) = serve_connection(stream, state, cfg) {
                    log::debug!("connection {peer:?} ended: {e}");
                }
            });
        }
        Ok(())
    }

    /// Runs the accept loop on a background thread.
    pub fn spawn(self) -> Result<ServerHandle> {
        let addr = self.local_addr()?;
        let stop = Arc::clone(&self.stop);
        let thread = thread::spawn(move || self.run());
        Ok(ServerHandle { addr, stop, thread })
    }
}

pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: JoinHandle<Result<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting new connections; open connections finish on their own.
    pub fn shutdown(self) -> Result<()> {
        self.stop.store(true, Ordering::SeqCst);
        // wake the blocking accept
        let _ = TcpStream::connect(self.addr);
        self.thread
            .join()
            .map_err(|_| Error::State("server thread panicked".into()))?
    }
}

/// Blocking client for the feedback protocol.
pub struct Client {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Client {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Client {
            writer: stream.try_clone()?,
            reader: BufReader::new(stream),
        })
    }

    pub fn send(&mut self, msg: &ClientMessage) -> Result<()> {
        Ok(write_message(&mut self.writer, msg)?)
    }

    /// Sends pre-encoded JSON, e.g. to exercise error paths.
    pub fn send_raw(&mut self, json: &[u8]) -> Result<()> {
        Ok(super::protocol::write_frame(&mut self.writer, json)?)
    }

    pub fn recv(&mut self) -> Result<ServerMessage> {
        read_message(&mut self.reader)?
            .ok_or_else(|| Error::Io(io::ErrorKind::UnexpectedEof.into()))
    }

    pub fn request(&mut self, msg: &ClientMessage) -> Result<ServerMessage> {
        self.send(msg)?;
        self.recv()
    }

    pub fn list_templates(&mut self) -> Result<Vec<TemplateInfo>> {
        let reply = self.request(&ClientMessage::new("", 0, ClientBody::ListTemplates))?;
        match reply.body {
            ServerBody::Templates { templates } => Ok(templates),
            other => Err(Error::State(format!("unexpected reply {other:?}"))),
        }
    }
}
