//! Framed binary protocol between the engine and a model host.
//!
//! ```text
//! frame   = "ADP2" | version u16 | type u16 | payload-length u32 | payload
//! tensor  = LTNS container
//! hello   = empty (client) | latent_h u32 | latent_w u32 | channels u32 | spatial_factor u32 (server)
//! den-req = request_id u64 | timestep u32 | guidance f32 | n u32 | n x token u32
//!           | flags u8 | [condition tensor] | latent tensor
//! den-resp= request_id u64 | eps tensor | has_attention u8 | [attention tensor]
//! dec-req = request_id u64 | latent tensor      dec-resp = request_id u64 | image tensor
//! enc-req = request_id u64 | image tensor       enc-resp = request_id u64 | latent tensor
//! error   = request_id u64 | UTF-8 message
//! ```
//!
//! All integers and floats are little-endian. In `flags`, bit 0 marks a
//! condition tensor and bit 1 asks for attention capture. Conditions travel as
//! three identical channels of 0.0/255.0, images as float channels in 0..=255,
//! attention maps with words as channels.

use std::io::{Read, Write};

use super::{DenoiseRequest, DenoiseResponse};
use crate::error::{Error, Result};
use crate::prompt::CrossAttentionMap;
use crate::structure::{EdgeMap, ImageBuffer};
use crate::tensor::LatentTensor;

pub const MAGIC: &[u8; 4] = b"ADP2";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 12;
/// Frames larger than this are rejected before allocation.
pub const MAX_PAYLOAD: u32 = 1 << 31;

const FLAG_CONDITION: u8 = 1;
const FLAG_CAPTURE: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u16)]
pub enum MsgType {
    Hello = 1,
    DenoiseReq = 2,
    DenoiseResp = 3,
    DecodeReq = 4,
    DecodeResp = 5,
    EncodeReq = 6,
    EncodeResp = 7,
    Error = 8,
}

impl TryFrom<u16> for MsgType {
    type Error = Error;

    fn try_from(v: u16) -> Result<Self> {
        Ok(match v {
            1 => MsgType::Hello,
            2 => MsgType::DenoiseReq,
            3 => MsgType::DenoiseResp,
            4 => MsgType::DecodeReq,
            5 => MsgType::DecodeResp,
            6 => MsgType::EncodeReq,
            7 => MsgType::EncodeResp,
            8 => MsgType::Error,
            other => return Err(Error::Protocol(format!("unknown message type {other}"))),
        })
    }
}

/// Geometry a model host announces in its hello reply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HelloInfo {
    pub latent_h: u32,
    pub latent_w: u32,
    pub channels: u32,
    pub spatial_factor: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello(Option<HelloInfo>),
    DenoiseReq(DenoiseRequest),
    DenoiseResp(DenoiseResponse),
    DecodeReq { request_id: u64, latent: LatentTensor },
    DecodeResp { request_id: u64, image: ImageBuffer },
    EncodeReq { request_id: u64, image: ImageBuffer },
    EncodeResp { request_id: u64, latent: LatentTensor },
    Error { request_id: u64, message: String },
}

impl Message {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Message::Hello(_) => MsgType::Hello,
            Message::DenoiseReq(_) => MsgType::DenoiseReq,
            Message::DenoiseResp(_) => MsgType::DenoiseResp,
            Message::DecodeReq { .. } => MsgType::DecodeReq,
            Message::DecodeResp { .. } => MsgType::DecodeResp,
            Message::EncodeReq { .. } => MsgType::EncodeReq,
            Message::EncodeResp { .. } => MsgType::EncodeResp,
            Message::Error { .. } => MsgType::Error,
        }
    }

    pub fn request_id(&self) -> Option<u64> {
        match self {
            Message::Hello(_) => None,
            Message::DenoiseReq(r) => Some(r.request_id),
            Message::DenoiseResp(r) => Some(r.request_id),
            Message::DecodeReq { request_id, .. }
            | Message::DecodeResp { request_id, .. }
            | Message::EncodeReq { request_id, .. }
            | Message::EncodeResp { request_id, .. }
            | Message::Error { request_id, .. } => Some(*request_id),
        }
    }

    pub fn encode_payload(&self) -> Vec<u8> {
        let mut p = Vec::new();
        match self {
            Message::Hello(None) => {}
            Message::Hello(Some(h)) => {
                for v in [h.latent_h, h.latent_w, h.channels, h.spatial_factor] {
                    p.extend_from_slice(&v.to_le_bytes());
                }
            }
            Message::DenoiseReq(r) => {
                p.extend_from_slice(&r.request_id.to_le_bytes());
                p.extend_from_slice(&r.timestep.to_le_bytes());
                p.extend_from_slice(&r.guidance_scale.to_le_bytes());
                p.extend_from_slice(&(r.prompt_tokens.len() as u32).to_le_bytes());
                for t in &r.prompt_tokens {
                    p.extend_from_slice(&t.to_le_bytes());
                }
                let mut flags = 0u8;
                if r.condition.is_some() {
                    flags |= FLAG_CONDITION;
                }
                if r.capture_attention {
                    flags |= FLAG_CAPTURE;
                }
                p.push(flags);
                if let Some(c) = &r.condition {
                    p.extend_from_slice(&c.to_tensor3().to_ltns_bytes());
                }
                p.extend_from_slice(&r.latent.to_ltns_bytes());
            }
            Message::DenoiseResp(r) => {
                p.extend_from_slice(&r.request_id.to_le_bytes());
                p.extend_from_slice(&r.eps_pred.to_ltns_bytes());
                match &r.attention {
                    None => p.push(0),
                    Some(a) => {
                        p.push(1);
                        p.extend_from_slice(&a.to_tensor().to_ltns_bytes());
                    }
                }
            }
            Message::DecodeReq { request_id, latent } | Message::EncodeResp { request_id, latent } => {
                p.extend_from_slice(&request_id.to_le_bytes());
                p.extend_from_slice(&latent.to_ltns_bytes());
            }
            Message::DecodeResp { request_id, image } | Message::EncodeReq { request_id, image } => {
                p.extend_from_slice(&request_id.to_le_bytes());
                p.extend_from_slice(&image.to_tensor().to_ltns_bytes());
            }
            Message::Error { request_id, message } => {
                p.extend_from_slice(&request_id.to_le_bytes());
                p.extend_from_slice(message.as_bytes());
            }
        }
        p
    }

    /// Complete frame: header plus payload.
    pub fn to_frame(&self) -> Vec<u8> {
        let payload = self.encode_payload();
        let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.msg_type() as u16).to_le_bytes());
        out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&payload);
        out
    }

    pub fn decode_payload(kind: MsgType, payload: &[u8]) -> Result<Message> {
        let mut r = Reader { buf: payload };
        let msg = match kind {
            MsgType::Hello => {
                if r.buf.is_empty() {
                    Message::Hello(None)
                } else {
                    Message::Hello(Some(HelloInfo {
                        latent_h: r.u32()?,
                        latent_w: r.u32()?,
                        channels: r.u32()?,
                        spatial_factor: r.u32()?,
                    }))
                }
            }
            MsgType::DenoiseReq => {
                let request_id = r.u64()?;
                let timestep = r.u32()?;
                let guidance_scale = f32::from_le_bytes(r.take::<4>()?);
                let n = r.u32()? as usize;
                if n > r.buf.len() / 4 {
                    return Err(Error::Protocol(format!("token count {n} exceeds payload")));
                }
                let prompt_tokens = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
                let flags = r.u8()?;
                if flags & !(FLAG_CONDITION | FLAG_CAPTURE) != 0 {
                    return Err(Error::Protocol(format!("unknown request flags {flags:#04x}")));
                }
                let condition = if flags & FLAG_CONDITION != 0 {
                    Some(EdgeMap::from_tensor(&r.tensor()?)?)
                } else {
                    None
                };
                let latent = r.tensor()?;
                Message::DenoiseReq(DenoiseRequest {
                    request_id,
                    latent,
                    timestep,
                    prompt_tokens,
                    condition,
                    guidance_scale,
                    capture_attention: flags & FLAG_CAPTURE != 0,
                })
            }
            MsgType::DenoiseResp => {
                let request_id = r.u64()?;
                let eps_pred = r.tensor()?;
                let attention = match r.u8()? {
                    0 => None,
                    1 => Some(CrossAttentionMap::from_tensor(&r.tensor()?)?),
                    v => return Err(Error::Protocol(format!("bad attention flag {v}"))),
                };
                Message::DenoiseResp(DenoiseResponse { request_id, eps_pred, attention })
            }
            MsgType::DecodeReq => Message::DecodeReq { request_id: r.u64()?, latent: r.tensor()? },
            MsgType::EncodeResp => Message::EncodeResp { request_id: r.u64()?, latent: r.tensor()? },
            MsgType::DecodeResp => Message::DecodeResp {
                request_id: r.u64()?,
                image: ImageBuffer::from_tensor(&r.tensor()?)?,
            },
            MsgType::EncodeReq => Message::EncodeReq {
                request_id: r.u64()?,
                image: ImageBuffer::from_tensor(&r.tensor()?)?,
            },
            MsgType::Error => {
                let request_id = r.u64()?;
                let message = String::from_utf8(std::mem::take(&mut r.buf).to_vec())
                    .map_err(|_| Error::Protocol("error message is not UTF-8".into()))?;
                Message::Error { request_id, message }
            }
        };
        if !r.buf.is_empty() {
            return Err(Error::Protocol(format!("{} trailing payload bytes", r.buf.len())));
        }
        Ok(msg)
    }

    pub fn from_frame(frame: &[u8]) -> Result<Message> {
        let mut cursor = frame;
        let msg = read_message(&mut cursor)?;
        if !cursor.is_empty() {
            return Err(Error::Protocol("trailing bytes after frame".into()));
        }
        Ok(msg)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        if self.buf.len() < N {
            return Err(Error::Protocol("payload truncated".into()));
        }
        let (head, rest) = self.buf.split_at(N);
        self.buf = rest;
        Ok(head.try_into().unwrap())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take::<1>()?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }

    fn tensor(&mut self) -> Result<LatentTensor> {
        LatentTensor::read_ltns(&mut self.buf).map_err(|e| match e {
            Error::Io(_) => Error::Protocol("tensor truncated".into()),
            other => other,
        })
    }
}

pub fn write_message<W: Write>(mut w: W, msg: &Message) -> Result<()> {
    w.write_all(&msg.to_frame())?;
    w.flush()?;
    Ok(())
}

/// Reads one frame. I/O failures surface as [`Error::Io`] so callers can tell
/// a dead peer from a malformed frame.
pub fn read_message<R: Read>(mut r: R) -> Result<Message> {
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header)?;
    if &header[..4] != MAGIC {
        return Err(Error::Protocol(format!("bad frame magic {:?}", &header[..4])));
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != VERSION {
        return Err(Error::VersionMismatch { ours: VERSION, theirs: version });
    }
    let kind = MsgType::try_from(u16::from_le_bytes([header[6], header[7]]))?;
    let len = u32::from_le_bytes([header[8], header[9], header[10], header[11]]);
    if len > MAX_PAYLOAD {
        return Err(Error::Protocol(format!("payload of {len} bytes exceeds limit")));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload)?;
    Message::decode_payload(kind, &payload)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_request_layout() {
        let latent = LatentTensor::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let req = DenoiseRequest::new(7, latent, 981, vec![]);
        let frame = Message::DenoiseReq(req.clone()).to_frame();
        // id 8 + timestep 4 + guidance 4 + count 4 + flags 1 + tensor (4 + 12 + 16)
        let payload_len = 8 + 4 + 4 + 4 + 1 + (4 + 12 + 16);
        assert_eq!(payload_len, 53);
        assert_eq!(frame.len(), HEADER_LEN + payload_len);
        assert_eq!(&frame[..4], b"ADP2");
        assert_eq!(&frame[4..6], &1u16.to_le_bytes());
        assert_eq!(&frame[6..8], &2u16.to_le_bytes());
        assert_eq!(&frame[8..12], &53u32.to_le_bytes());
        assert_eq!(&frame[12..20], &7u64.to_le_bytes());
        assert_eq!(&frame[20..24], &981u32.to_le_bytes());
        assert_eq!(&frame[24..28], &1.0f32.to_le_bytes());
        assert_eq!(&frame[28..32], &0u32.to_le_bytes());
        assert_eq!(frame[32], 0);
        assert_eq!(&frame[33..37], b"LTNS");
        assert_eq!(Message::from_frame(&frame).unwrap(), Message::DenoiseReq(req));
    }

    #[test]
    fn tokens_and_condition_layout() {
        let mut req = DenoiseRequest::new(1, LatentTensor::zeros(1, 1, 1), 3, vec![10, 20]);
        req.condition = Some(EdgeMap::from_fn(1, 1, |_, _| true));
        req.capture_attention = true;
        let frame = Message::DenoiseReq(req.clone()).to_frame();
        assert_eq!(&frame[28..32], &2u32.to_le_bytes());
        assert_eq!(&frame[32..36], &10u32.to_le_bytes());
        assert_eq!(&frame[36..40], &20u32.to_le_bytes());
        assert_eq!(frame[40], FLAG_CONDITION | FLAG_CAPTURE);
        // condition tensor: 1x1x3 of 255.0
        assert_eq!(&frame[41..45], b"LTNS");
        assert_eq!(&frame[53..57], &3u32.to_le_bytes());
        assert_eq!(&frame[57..61], &255.0f32.to_le_bytes());
        assert_eq!(Message::from_frame(&frame).unwrap(), Message::DenoiseReq(req));
    }

    #[test]
    fn error_frame_layout() {
        let frame = Message::Error { request_id: 5, message: "boom".into() }.to_frame();
        assert_eq!(&frame[6..8], &8u16.to_le_bytes());
        assert_eq!(&frame[8..12], &12u32.to_le_bytes());
        assert_eq!(&frame[20..], b"boom");
    }

    #[test]
    fn version_and_magic_checks() {
        let mut frame = Message::Hello(None).to_frame();
        frame[4] = 9;
        assert!(matches!(Message::from_frame(&frame), Err(Error::VersionMismatch { theirs: 9, .. })));
        frame[4] = 1;
        frame[0] = b'X';
        assert!(matches!(Message::from_frame(&frame), Err(Error::Protocol(_))));
    }

    #[test]
    fn truncated_frames() {
        let req = DenoiseRequest::new(1, LatentTensor::zeros(2, 2, 1), 3, vec![1]);
        let frame = Message::DenoiseReq(req).to_frame();
        assert!(matches!(Message::from_frame(&frame[..frame.len() - 1]), Err(Error::Io(_))));
        let mut short = frame.clone();
        let len = (frame.len() - HEADER_LEN - 1) as u32;
        short[8..12].copy_from_slice(&len.to_le_bytes());
        short.pop();
        assert!(matches!(Message::from_frame(&short), Err(Error::Protocol(_))));
    }

    #[test]
    fn hello_round_trip() {
        let info = HelloInfo { latent_h: 128, latent_w: 128, channels: 4, spatial_factor: 8 };
        for m in [Message::Hello(None), Message::Hello(Some(info))] {
            assert_eq!(Message::from_frame(&m.to_frame()).unwrap(), m);
        }
    }
}
