//! Noise-predictor and codec contracts, toy realizations, and the wire protocol
//! used to reach a real model out of process.

mod codec;
pub mod remote;
pub mod server;
mod toy;
pub mod wire;

pub use codec::{toy_codec, Codec, ToyCodec};
pub use remote::{remote_predict, RemoteClient, DEFAULT_TIMEOUT};
pub use server::{echo_model, serve, spawn_echo_server, spawn_server, EchoServer, ServedModel};
pub use toy::{make_toy_backend, synthetic_attention, ToyBackend, ToyKind, ToyParams};

use crate::error::{Error, Result};
use crate::prompt::CrossAttentionMap;
use crate::structure::EdgeMap;
use crate::tensor::LatentTensor;

/// One noise-prediction call: latent, timestep, prompt tokens and an optional
/// structural condition.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseRequest {
    pub request_id: u64,
    pub latent: LatentTensor,
    pub timestep: u32,
    pub prompt_tokens: Vec<u32>,
    pub condition: Option<EdgeMap>,
    pub guidance_scale: f32,
    /// Ask the backend to return its averaged cross-attention map.
    pub capture_attention: bool,
}

impl DenoiseRequest {
    pub fn new(request_id: u64, latent: LatentTensor, timestep: u32, prompt_tokens: Vec<u32>) -> Self {
        DenoiseRequest {
            request_id,
            latent,
            timestep,
            prompt_tokens,
            condition: None,
            guidance_scale: 1.0,
            capture_attention: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseResponse {
    pub request_id: u64,
    pub eps_pred: LatentTensor,
    pub attention: Option<CrossAttentionMap>,
}

/// A realization of the noise predictor. Implementations must tolerate
/// concurrent calls and return identical responses for identical requests.
pub trait NoiseBackend: Send + Sync {
    fn predict(&self, req: &DenoiseRequest) -> Result<DenoiseResponse>;
}

impl<T: NoiseBackend + ?Sized> NoiseBackend for std::sync::Arc<T> {
    fn predict(&self, req: &DenoiseRequest) -> Result<DenoiseResponse> {
        (**self).predict(req)
    }
}

impl<T: NoiseBackend + ?Sized> NoiseBackend for &T {
    fn predict(&self, req: &DenoiseRequest) -> Result<DenoiseResponse> {
        (**self).predict(req)
    }
}

/// Calls the backend and enforces the response contract before the result
/// can reach any sampler arithmetic.
pub fn predict_noise(backend: &dyn NoiseBackend, req: &DenoiseRequest) -> Result<DenoiseResponse> {
    let resp = backend.predict(req).map_err(|e| match e {
        e @ (Error::Backend { .. } | Error::Connection { .. } | Error::Timeout { .. }) => e,
        other => Error::Backend { request_id: req.request_id, message: other.to_string() },
    })?;
    if resp.eps_pred.shape() != req.latent.shape() {
        return Err(Error::ShapeViolation {
            request_id: req.request_id,
            expected: req.latent.shape().to_string(),
            got: resp.eps_pred.shape().to_string(),
        });
    }
    if resp.request_id != req.request_id {
        return Err(Error::Protocol(format!(
            "response id {} does not match request {}",
            resp.request_id, req.request_id
        )));
    }
    Ok(resp)
}
