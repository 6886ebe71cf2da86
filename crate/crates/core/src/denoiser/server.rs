//! Protocol server hosting any backend/codec pair; used for loopback testing.

use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use super::toy::{make_toy_backend, ToyKind, ToyParams};
use super::wire::{read_message, write_message, HelloInfo, Message};
use super::{predict_noise, toy_codec, Codec, NoiseBackend};
use crate::error::{Error, Result};

pub struct ServedModel {
    pub backend: Box<dyn NoiseBackend>,
    pub codec: Box<dyn Codec>,
    pub hello: HelloInfo,
}

impl ServedModel {
    fn answer(&self, msg: Message) -> Message {
        let id = msg.request_id().unwrap_or(0);
        let reply = match msg {
            Message::Hello(_) => Ok(Message::Hello(Some(self.hello))),
            Message::DenoiseReq(req) => predict_noise(self.backend.as_ref(), &req).map(Message::DenoiseResp),
            Message::DecodeReq { request_id, latent } => {
                self.codec.decode(&latent).map(|image| Message::DecodeResp { request_id, image })
            }
            Message::EncodeReq { request_id, image } => {
                self.codec.encode(&image).map(|latent| Message::EncodeResp { request_id, latent })
            }
            other => Err(Error::Protocol(format!("unexpected {:?} from client", other.msg_type()))),
        };
        reply.unwrap_or_else(|e| Message::Error { request_id: id, message: e.to_string() })
    }
}

fn handle(mut stream: TcpStream, model: &ServedModel) {
    let _ = stream.set_nodelay(true);
    loop {
        let msg = match read_message(&mut stream) {
            Ok(m) => m,
            Err(Error::Io(_)) => return,
            Err(e) => {
                let _ = write_message(&mut stream, &Message::Error { request_id: 0, message: e.to_string() });
                return;
            }
        };
        if write_message(&mut stream, &model.answer(msg)).is_err() {
            return;
        }
    }
}

/// Accepts connections until `stop` is set, one thread per connection.
pub fn serve(listener: TcpListener, model: Arc<ServedModel>, stop: Arc<AtomicBool>) -> Result<()> {
    for conn in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let stream = match conn {
            Ok(s) => s,
            Err(e) => {
                log::warn!("accept failed: {e}");
                continue;
            }
        };
        let model = Arc::clone(&model);
        std::thread::spawn(move || handle(stream, &model));
    }
    Ok(())
}

/// A loopback server whose backend returns the request latent as the noise.
pub struct EchoServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl EchoServer {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for EchoServer {
    fn drop(&mut self) {
        self.stop_now();
    }
}

/// Echo backend plus toy codec, matching an in-process echo backend built with
/// the same attention scale.
pub fn echo_model(hello: HelloInfo, attention_scale: Option<usize>) -> Result<ServedModel> {
    let backend = make_toy_backend(ToyKind::Echo, &ToyParams { attention_scale, ..Default::default() })?;
    let codec = toy_codec(hello.spatial_factor as usize).with_channels(hello.channels as usize);
    Ok(ServedModel { backend: Box::new(backend), codec: Box::new(codec), hello })
}

pub fn spawn_server(listen: &str, model: ServedModel) -> Result<EchoServer> {
    let listener = TcpListener::bind(listen)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let model = Arc::new(model);
    let flag = Arc::clone(&stop);
    let thread = std::thread::spawn(move || {
        let _ = serve(listener, model, flag);
    });
    Ok(EchoServer { addr, stop, thread: Some(thread) })
}

pub fn spawn_echo_server(listen: &str, hello: HelloInfo, attention_scale: Option<usize>) -> Result<EchoServer> {
    spawn_server(listen, echo_model(hello, attention_scale)?)
}
