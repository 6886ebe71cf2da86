//! Blocking TCP client for a model host speaking the framed protocol.

use std::io::ErrorKind;
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use super::wire::{read_message, write_message, HelloInfo, Message};
use super::{Codec, DenoiseRequest, DenoiseResponse, NoiseBackend};
use crate::error::{Error, Result};
use crate::structure::ImageBuffer;
use crate::tensor::LatentTensor;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(300);

/// Keeps a pool of handshaken connections; concurrent callers each check one
/// out, so requests are multiplexed across connections and matched by id.
pub struct RemoteClient {
    endpoint: String,
    timeout: Duration,
    info: HelloInfo,
    idle: Mutex<Vec<TcpStream>>,
    next_id: AtomicU64,
}

fn io_error(e: std::io::Error, request_id: u64, timeout: Duration) -> Error {
    match e.kind() {
        ErrorKind::WouldBlock | ErrorKind::TimedOut => Error::Timeout { request_id, seconds: timeout.as_secs_f64() },
        _ => Error::Connection { request_id, message: e.to_string() },
    }
}

fn lift(e: Error, request_id: u64, timeout: Duration) -> Error {
    match e {
        Error::Io(io) => io_error(io, request_id, timeout),
        other => other,
    }
}

impl RemoteClient {
    pub fn connect(endpoint: &str, timeout: Duration) -> Result<Self> {
        let mut client = RemoteClient {
            endpoint: endpoint.to_string(),
            timeout,
            info: HelloInfo { latent_h: 0, latent_w: 0, channels: 0, spatial_factor: 1 },
            idle: Mutex::new(Vec::new()),
            next_id: AtomicU64::new(1),
        };
        let (stream, info) = client.open()?;
        client.info = info;
        client.idle.lock().unwrap().push(stream);
        Ok(client)
    }

    pub fn hello(&self) -> HelloInfo {
        self.info
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn open(&self) -> Result<(TcpStream, HelloInfo)> {
        let conn_err = |m: String| Error::Connection { request_id: 0, message: m };
        let addr = self
            .endpoint
            .to_socket_addrs()
            .map_err(|e| conn_err(format!("{}: {e}", self.endpoint)))?
            .next()
            .ok_or_else(|| conn_err(format!("{} resolved to no address", self.endpoint)))?;
        let mut stream = TcpStream::connect_timeout(&addr, self.timeout).map_err(|e| io_error(e, 0, self.timeout))?;
        stream.set_read_timeout(Some(self.timeout))?;
        stream.set_write_timeout(Some(self.timeout))?;
        stream.set_nodelay(true)?;
        write_message(&mut stream, &Message::Hello(None)).map_err(|e| lift(e, 0, self.timeout))?;
        match read_message(&mut stream).map_err(|e| lift(e, 0, self.timeout))? {
            Message::Hello(Some(info)) => Ok((stream, info)),
            Message::Hello(None) => Err(Error::Protocol("server hello carried no geometry".into())),
            Message::Error { message, .. } => Err(Error::Backend { request_id: 0, message }),
            other => Err(Error::Protocol(format!("expected hello, got {:?}", other.msg_type()))),
        }
    }

    pub fn next_request_id(&self) -> u64 {
        self.next_id.fetch_add(1, Ordering::Relaxed)
    }

    /// Sends one message and waits for the reply carrying the same id. A
    /// connection is returned to the pool only after a clean exchange.
    fn call(&self, request_id: u64, msg: &Message) -> Result<Message> {
        let pooled = self.idle.lock().unwrap().pop();
        let mut stream = match pooled {
            Some(s) => s,
            None => self.open().map_err(|e| match e {
                Error::Connection { message, .. } => Error::Connection { request_id, message },
                Error::Timeout { seconds, .. } => Error::Timeout { request_id, seconds },
                other => other,
            })?
            .0,
        };
        write_message(&mut stream, msg).map_err(|e| lift(e, request_id, self.timeout))?;
        let reply = read_message(&mut stream).map_err(|e| lift(e, request_id, self.timeout))?;
        if let Message::Error { request_id: rid, message } = reply {
            self.idle.lock().unwrap().push(stream);
            return Err(Error::Backend { request_id: rid, message });
        }
        if reply.request_id() != Some(request_id) {
            return Err(Error::Protocol(format!(
                "reply id {:?} does not match request {request_id}",
                reply.request_id()
            )));
        }
        self.idle.lock().unwrap().push(stream);
        Ok(reply)
    }
}

impl NoiseBackend for RemoteClient {
    fn predict(&self, req: &DenoiseRequest) -> Result<DenoiseResponse> {
        match self.call(req.request_id, &Message::DenoiseReq(req.clone()))? {
            Message::DenoiseResp(resp) => Ok(resp),
            other => Err(Error::Protocol(format!("expected denoise response, got {:?}", other.msg_type()))),
        }
    }
}

impl Codec for RemoteClient {
    fn spatial_factor(&self) -> usize {
        self.info.spatial_factor as usize
    }

    fn decode(&self, z: &LatentTensor) -> Result<ImageBuffer> {
        let id = self.next_request_id();
        match self.call(id, &Message::DecodeReq { request_id: id, latent: z.clone() })? {
            Message::DecodeResp { image, .. } => Ok(image),
            other => Err(Error::Protocol(format!("expected decode response, got {:?}", other.msg_type()))),
        }
    }

    fn encode(&self, img: &ImageBuffer) -> Result<LatentTensor> {
        let id = self.next_request_id();
        match self.call(id, &Message::EncodeReq { request_id: id, image: img.clone() })? {
            Message::EncodeResp { latent, .. } => Ok(latent),
            other => Err(Error::Protocol(format!("expected encode response, got {:?}", other.msg_type()))),
        }
    }
}

/// One-shot prediction against `endpoint` with the default timeout.
pub fn remote_predict(endpoint: &str, req: &DenoiseRequest) -> Result<DenoiseResponse> {
    let client = RemoteClient::connect(endpoint, DEFAULT_TIMEOUT)?;
    super::predict_noise(&client, req)
}
