//! Analytic stand-ins for a neural noise predictor.

use super::{DenoiseRequest, DenoiseResponse, NoiseBackend};
use crate::error::{Error, Result};
use crate::prompt::CrossAttentionMap;
use crate::tensor::LatentTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyKind {
    /// Always predicts zero noise.
    Zero,
    /// Predicts `lambda * z_t`.
    Linear,
    /// Returns a stored true noise sample.
    Oracle,
    /// `lambda * z_t + context * (per-channel mean of z_t) - bias * (edge
    /// density of the condition per latent cell)`.
    EdgeBiased,
    /// Returns the request latent unchanged.
    Echo,
}

impl std::str::FromStr for ToyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "zero" => ToyKind::Zero,
            "linear" => ToyKind::Linear,
            "oracle" => ToyKind::Oracle,
            "edge-biased" => ToyKind::EdgeBiased,
            "echo" => ToyKind::Echo,
            other => return Err(Error::Config(format!("unknown toy backend '{other}'"))),
        })
    }
}

impl std::fmt::Display for ToyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ToyKind::Zero => "zero",
            ToyKind::Linear => "linear",
            ToyKind::Oracle => "oracle",
            ToyKind::EdgeBiased => "edge-biased",
            ToyKind::Echo => "echo",
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct ToyParams {
    pub lambda: Option<f64>,
    pub bias: Option<f64>,
    /// Weight of the per-channel latent mean in the edge-biased rule; absent means 0.
    pub context: Option<f64>,
    pub z0: Option<LatentTensor>,
    pub eps: Option<LatentTensor>,
    /// Down-sampling factor of synthesized attention maps; `None` disables them.
    pub attention_scale: Option<usize>,
}

#[derive(Debug, Clone)]
enum Rule {
    Zero,
    Linear(f64),
    Oracle(LatentTensor),
    EdgeBiased { lambda: f64, bias: f64, context: f64 },
    Echo,
}

#[derive(Debug, Clone)]
pub struct ToyBackend {
    kind: ToyKind,
    rule: Rule,
    attention_scale: Option<usize>,
}

pub fn make_toy_backend(kind: ToyKind, params: &ToyParams) -> Result<ToyBackend> {
    let need = |v: Option<f64>, name: &str| {
        v.ok_or_else(|| Error::MissingParams(format!("{kind} backend needs '{name}'")))
    };
    let rule = match kind {
        ToyKind::Zero => Rule::Zero,
        ToyKind::Linear => Rule::Linear(need(params.lambda, "lambda")?),
        ToyKind::EdgeBiased => Rule::EdgeBiased {
            lambda: need(params.lambda, "lambda")?,
            bias: need(params.bias, "bias")?,
            context: params.context.unwrap_or(0.0),
        },
        ToyKind::Oracle => {
            let (Some(z0), Some(eps)) = (&params.z0, &params.eps) else {
                return Err(Error::MissingParams("oracle backend needs 'z0' and 'eps'".into()));
            };
            z0.ensure_same_shape(eps)?;
            Rule::Oracle(eps.clone())
        }
        ToyKind::Echo => Rule::Echo,
    };
    if params.attention_scale == Some(0) {
        return Err(Error::Config("attention scale must be >= 1".into()));
    }
    Ok(ToyBackend { kind, rule, attention_scale: params.attention_scale })
}

impl ToyBackend {
    pub fn kind(&self) -> ToyKind {
        self.kind
    }

    fn eps(&self, req: &DenoiseRequest) -> Result<LatentTensor> {
        let z = &req.latent;
        let scaled = |lambda: f64| {
            LatentTensor::new(
                z.height(),
                z.width(),
                z.channels(),
                z.data().iter().map(|&v| (lambda * v as f64) as f32).collect(),
            )
        };
        match &self.rule {
            Rule::Zero => Ok(LatentTensor::zeros(z.height(), z.width(), z.channels())),
            Rule::Echo => Ok(z.clone()),
            Rule::Linear(lambda) => scaled(*lambda),
            Rule::Oracle(eps) => {
                z.ensure_same_shape(eps)?;
                Ok(eps.clone())
            }
            Rule::EdgeBiased { lambda, bias, context } => {
                let mut out = scaled(*lambda)?;
                if *context != 0.0 && !z.data().is_empty() {
                    let c = z.channels();
                    let mut mean = vec![0.0f64; c];
                    for (i, &v) in z.data().iter().enumerate() {
                        mean[i % c] += v as f64;
                    }
                    let n = (z.height() * z.width()) as f64;
                    for (i, v) in out.data_mut().iter_mut().enumerate() {
                        *v = (*v as f64 + context * mean[i % c] / n) as f32;
                    }
                }
                let Some(cond) = &req.condition else {
                    return Ok(out);
                };
                if *bias == 0.0 {
                    return Ok(out);
                }
                if cond.height % z.height() != 0 || cond.height / z.height() * z.width() != cond.width {
                    return Err(Error::Geometry(format!(
                        "condition {}x{} is not a whole multiple of latent {}x{}",
                        cond.height,
                        cond.width,
                        z.height(),
                        z.width()
                    )));
                }
                let density = cond.block_density(cond.height / z.height())?;
                for (cell, d) in density.iter().enumerate() {
                    for v in out.cell_mut(cell / z.width(), cell % z.width()) {
                        *v = (*v as f64 - bias * d) as f32;
                    }
                }
                Ok(out)
            }
        }
    }
}

impl NoiseBackend for ToyBackend {
    fn predict(&self, req: &DenoiseRequest) -> Result<DenoiseResponse> {
        let eps_pred = self.eps(req)?;
        let attention = match (req.capture_attention, self.attention_scale) {
            (true, Some(scale)) => synthetic_attention(&req.latent, req.prompt_tokens.len(), scale)?,
            _ => None,
        };
        Ok(DenoiseResponse { request_id: req.request_id, eps_pred, attention })
    }
}

/// Deterministic attention-like map derived from the latent itself: per cell a
/// softmax over words of the block-mean of channel `j mod c`, with alternating
/// sign so neighbouring words favour opposite regions.
pub fn synthetic_attention(z: &LatentTensor, words: usize, scale: usize) -> Result<Option<CrossAttentionMap>> {
    if words == 0 || z.channels() == 0 {
        return Ok(None);
    }
    if scale == 0 || z.height() % scale != 0 || z.width() % scale != 0 {
        return Err(Error::Indivisible(format!(
            "latent {}x{} by attention scale {scale}",
            z.height(),
            z.width()
        )));
    }
    let (h, w) = (z.height() / scale, z.width() / scale);
    let mut values = Vec::with_capacity(h * w * words);
    let mut logits = vec![0.0f64; words];
    for r in 0..h {
        for c in 0..w {
            for (j, l) in logits.iter_mut().enumerate() {
                let ch = j % z.channels();
                let mut acc = 0.0f64;
                for dr in 0..scale {
                    for dc in 0..scale {
                        acc += z.get(r * scale + dr, c * scale + dc, ch) as f64;
                    }
                }
                let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                *l = sign * acc / (scale * scale) as f64;
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            values.extend(logits.iter().map(|l| ((l - max).exp() / total) as f32));
        }
    }
    CrossAttentionMap::new(h, w, words, values).map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structure::EdgeMap;

    fn req(latent: LatentTensor) -> DenoiseRequest {
        DenoiseRequest::new(1, latent, 5, vec![3, 4])
    }

    #[test]
    fn zero_and_linear() {
        let z = LatentTensor::new(1, 2, 1, vec![2.0, 4.0]).unwrap();
        let zero = make_toy_backend(ToyKind::Zero, &ToyParams::default()).unwrap();
        assert_eq!(zero.predict(&req(z.clone())).unwrap().eps_pred.data(), &[0.0, 0.0]);
        let lin = make_toy_backend(ToyKind::Linear, &ToyParams { lambda: Some(0.5), ..Default::default() }).unwrap();
        assert_eq!(lin.predict(&req(z.clone())).unwrap().eps_pred.data(), &[1.0, 2.0]);
        let lin0 = make_toy_backend(ToyKind::Linear, &ToyParams { lambda: Some(0.0), ..Default::default() }).unwrap();
        assert_eq!(lin0.predict(&req(z.clone())).unwrap(), zero.predict(&req(z)).unwrap());
    }

    #[test]
    fn missing_params() {
        for kind in [ToyKind::Linear, ToyKind::EdgeBiased, ToyKind::Oracle] {
            assert!(matches!(make_toy_backend(kind, &ToyParams::default()), Err(Error::MissingParams(_))));
        }
    }

    #[test]
    fn edge_bias_follows_condition() {
        let z = LatentTensor::filled(2, 2, 2, 1.0);
        let p = ToyParams { lambda: Some(1.0), bias: Some(2.0), ..Default::default() };
        let b = make_toy_backend(ToyKind::EdgeBiased, &p).unwrap();
        let mut r = req(z.clone());
        r.condition = Some(EdgeMap::from_fn(4, 4, |row, col| row < 2 && col < 2));
        let out = b.predict(&r).unwrap().eps_pred;
        assert_eq!(out.cell(0, 0), &[-1.0, -1.0]);
        assert_eq!(out.cell(1, 1), &[1.0, 1.0]);

        let unbiased = make_toy_backend(ToyKind::EdgeBiased, &ToyParams { bias: Some(0.0), ..p }).unwrap();
        let lin = make_toy_backend(ToyKind::Linear, &ToyParams { lambda: Some(1.0), ..Default::default() }).unwrap();
        assert_eq!(unbiased.predict(&r).unwrap(), lin.predict(&r).unwrap());
    }

    #[test]
    fn context_adds_channel_mean() {
        let z = LatentTensor::new(1, 2, 2, vec![1.0, 10.0, 3.0, 20.0]).unwrap();
        let p = ToyParams { lambda: Some(0.0), bias: Some(0.0), context: Some(0.5), ..Default::default() };
        let out = make_toy_backend(ToyKind::EdgeBiased, &p).unwrap().predict(&req(z)).unwrap().eps_pred;
        assert_eq!(out.data(), &[1.0, 7.5, 1.0, 7.5]);
    }

    #[test]
    fn attention_only_when_requested() {
        let z = LatentTensor::from_fn(4, 4, 2, |r, c, ch| (r as f32 - c as f32) * (ch as f32 + 1.0));
        let b = make_toy_backend(ToyKind::Echo, &ToyParams { attention_scale: Some(2), ..Default::default() }).unwrap();
        let mut r = req(z);
        assert!(b.predict(&r).unwrap().attention.is_none());
        r.capture_attention = true;
        let att = b.predict(&r).unwrap().attention.unwrap();
        assert_eq!((att.map_h(), att.map_w(), att.cols()), (2, 2, 2));
        for cell in 0..4 {
            let s: f32 = (0..2).map(|j| att.get(cell, j)).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
}
