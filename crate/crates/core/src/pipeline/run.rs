use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use super::config::{BackendKind, EtaMode, GenerationConfig};
use crate::denoiser::{
    make_toy_backend, predict_noise, toy_codec, Codec, DenoiseRequest, NoiseBackend, RemoteClient, ToyParams,
};
use crate::dilated::{
    blend_global, dilate_extract, dilate_recombine, eta_schedule, shuffle_windows, DilationPlan, WindowBijection,
};
use crate::error::{Error, Location, Result};
use crate::patch::{extract_patch, fuse_patches, plan_patches, PatchPlan};
use crate::prompt::{
    binarize_attention, derive_patch_prompts, mean_combine, open_mask, upscale_mask, CrossAttentionMap,
    PatchPromptSet, WordMask,
};
use crate::rng::{derive_seed, gaussian_latent};
use crate::structure::{canny_with, sample_condition_patches, upscale_image, EdgeMap, ImageBuffer};
use crate::tensor::{ddim_step, forward_diffuse, lerp, make_schedule, LatentTensor, NoiseSchedule};

const TAG_BASE: u64 = 1;
const TAG_STAGE_NOISE: u64 = 0x100;
const TAG_BIJECTION: u64 = 0x200;

/// Evenly spaced step indices in `1..=steps`: `ceil(j * steps / count)` for
/// `j = 1..=count`. Consecutive gaps differ by at most one.
pub fn plan_conditioned_steps(steps: usize, count: usize) -> Result<BTreeSet<usize>> {
    if count > steps {
        return Err(Error::InvalidRange(format!("controlnet_steps {count} exceeds steps {steps}")));
    }
    Ok((1..=count).map(|j| (j * steps).div_ceil(count)).collect())
}

/// The noise used to re-enter the trajectory at the start of stage `stage`.
pub fn stage_noise(seed: u64, stage: usize, h: usize, w: usize, c: usize) -> LatentTensor {
    gaussian_latent(h, w, c, seed, TAG_STAGE_NOISE + stage as u64)
}

/// The initial latent of the base pass.
pub fn base_noise(seed: u64, h: usize, w: usize, c: usize) -> LatentTensor {
    gaussian_latent(h, w, c, seed, TAG_BASE)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageGeometry {
    /// 1-based; stage 0 is the base pass.
    pub index: usize,
    pub scale: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone)]
pub struct BaseArtifacts {
    pub latent: LatentTensor,
    pub attention: Option<CrossAttentionMap>,
}

#[derive(Debug, Clone)]
pub struct StageArtifacts {
    pub geometry: StageGeometry,
    /// The previous stage's latent resized to this stage.
    pub input_latent: LatentTensor,
    /// Noise used for the inversion at the first timestep and for residual injection.
    pub inversion_noise: LatentTensor,
    /// Opened word masks at attention resolution scaled to this stage; empty without attention.
    pub word_masks: Vec<WordMask>,
    pub prompts: PatchPromptSet,
    pub plan: PatchPlan,
    pub edge_map: Option<EdgeMap>,
    pub bijection: WindowBijection,
    pub conditioned_steps: BTreeSet<usize>,
    /// Set once the stage finished denoising.
    pub output_latent: Option<LatentTensor>,
}

#[derive(Debug, Clone, Default)]
pub struct RunArtifacts {
    pub base: Option<BaseArtifacts>,
    pub stages: Vec<StageArtifacts>,
    /// Wall-clock per finished stage, base pass first.
    pub timings: Vec<Duration>,
}

/// Builds the backend and codec named by the config.
pub fn backend_from_config(cfg: &GenerationConfig) -> Result<(Arc<dyn NoiseBackend>, Arc<dyn Codec>)> {
    let b = &cfg.backend;
    match b.kind {
        BackendKind::Remote => {
            let endpoint = b.endpoint.as_deref().ok_or_else(|| Error::Config("remote backend needs an endpoint".into()))?;
            let client = Arc::new(RemoteClient::connect(endpoint, Duration::from_secs_f64(b.timeout_secs))?);
            let hello = client.hello();
            if (hello.latent_h as usize, hello.latent_w as usize, hello.channels as usize)
                != (cfg.base_h, cfg.base_w, cfg.channels)
            {
                return Err(Error::Config(format!(
                    "server serves {}x{}x{} latents but the config expects {}x{}x{}",
                    hello.latent_h, hello.latent_w, hello.channels, cfg.base_h, cfg.base_w, cfg.channels
                )));
            }
            Ok((client.clone(), client))
        }
        BackendKind::Toy(kind) => {
            let load = |p: &Option<std::path::PathBuf>| p.as_ref().map(LatentTensor::load).transpose();
            let params = ToyParams {
                lambda: b.lambda,
                bias: b.bias,
                context: b.context,
                z0: load(&b.oracle_z0)?,
                eps: load(&b.oracle_eps)?,
                attention_scale: (b.attention_scale > 0).then_some(b.attention_scale),
            };
            let backend = make_toy_backend(kind, &params)?;
            let codec = toy_codec(cfg.spatial_factor).with_channels(cfg.channels);
            Ok((Arc::new(backend), Arc::new(codec)))
        }
    }
}

pub struct Pipeline<'a> {
    cfg: &'a GenerationConfig,
    backend: &'a dyn NoiseBackend,
    codec: &'a dyn Codec,
    sched: NoiseSchedule,
    /// `taus[i]` is the training timestep of inference step `i`; `taus[0] = 0`.
    taus: Vec<usize>,
    next_id: AtomicU64,
}

fn at(stage: usize, t: usize) -> Location {
    Location { stage: Some(stage), timestep: Some(t), ..Default::default() }
}

impl<'a> Pipeline<'a> {
    pub fn new(cfg: &'a GenerationConfig, backend: &'a dyn NoiseBackend, codec: &'a dyn Codec) -> Result<Self> {
        cfg.validate()?;
        let sched = make_schedule(cfg.train_steps, cfg.beta_start, cfg.beta_end)?;
        let mut taus = sched.inference_timesteps(cfg.steps)?;
        taus.push(0);
        taus.reverse();
        Ok(Pipeline { cfg, backend, codec, sched, taus, next_id: AtomicU64::new(1) })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.taus
    }

    fn ids(&self, n: usize) -> u64 {
        self.next_id.fetch_add(n as u64, Ordering::Relaxed)
    }

    fn request(&self, id: u64, latent: LatentTensor, t: usize, tokens: Vec<u32>) -> DenoiseRequest {
        let mut req = DenoiseRequest::new(id, latent, t as u32, tokens);
        req.guidance_scale = self.cfg.guidance_scale;
        req
    }

    /// Full-image denoising at the base resolution from seeded noise. The
    /// attention maps of the second half of the steps are averaged.
    pub fn base_pass(&self, tokens: &[u32]) -> Result<BaseArtifacts> {
        let cfg = self.cfg;
        let steps = cfg.steps;
        let mut z = base_noise(cfg.seed, cfg.base_h, cfg.base_w, cfg.channels);
        let mut maps = Vec::new();
        for i in (1..=steps).rev() {
            let (t, t_prev) = (self.taus[i], self.taus[i - 1]);
            let mut req = self.request(self.ids(1), z.clone(), t, tokens.to_vec());
            req.capture_attention = !tokens.is_empty() && i <= steps.div_ceil(2);
            let step = predict_noise(self.backend, &req).and_then(|resp| {
                maps.extend(resp.attention);
                ddim_step(&z, &resp.eps_pred, t, t_prev, &self.sched)
            });
            z = step.map_err(|e| e.at(at(0, t)))?;
        }
        let attention = if maps.is_empty() {
            log::info!("backend returned no attention maps; every patch will use the full prompt");
            None
        } else {
            Some(mean_combine(&maps).map_err(|e| e.at(Location { stage: Some(0), ..Default::default() }))?)
        };
        Ok(BaseArtifacts { latent: z, attention })
    }

    /// Everything a stage needs before its denoising loop: resized input,
    /// inversion noise, per-patch prompts, edge conditions and bijections.
    pub fn prepare_stage(
        &self,
        geometry: StageGeometry,
        z0_low: &LatentTensor,
        attention: Option<&CrossAttentionMap>,
        tokens: &[u32],
    ) -> Result<StageArtifacts> {
        let cfg = self.cfg;
        let k = geometry.index;
        let here = |e: Error| e.at(Location { stage: Some(k), ..Default::default() });
        let (h, w) = (geometry.height, geometry.width);
        let input_latent = crate::tensor::interpolate_latent(z0_low, h, w).map_err(here)?;
        let inversion_noise = stage_noise(cfg.seed, k, h, w, cfg.channels);
        let (sh, sw) = cfg.strides();
        let plan = plan_patches(h, w, cfg.base_h, cfg.base_w, sh, sw).map_err(here)?;

        let (word_masks, prompts) = match attention {
            Some(att) => {
                let s = att.scale_for(cfg.base_h, cfg.base_w).map_err(here)?;
                let masks = binarize_attention(att)
                    .and_then(|ms| {
                        ms.iter()
                            .map(|m| upscale_mask(&open_mask(m, cfg.mask_radius), h / s, w / s))
                            .collect::<Result<Vec<_>>>()
                    })
                    .map_err(here)?;
                let mask_plan = plan.scaled_down(s).map_err(here)?;
                let prompts = derive_patch_prompts(&masks, &mask_plan, cfg.c, tokens).map_err(here)?;
                (masks, prompts)
            }
            None => (Vec::new(), PatchPromptSet::full(plan.len(), tokens.to_vec())),
        };
        let fallback = prompts.fallback_patches();
        if !fallback.is_empty() {
            log::debug!("stage {k}: patches {fallback:?} fall back to the full prompt");
        }

        let conditioned_steps = plan_conditioned_steps(cfg.steps, cfg.conditioned_step_count()).map_err(here)?;
        let edge_map = if conditioned_steps.is_empty() {
            None
        } else {
            let f = self.codec.spatial_factor();
            let img = self.codec.decode(z0_low).map_err(here)?;
            let up = upscale_image(&img, h * f, w * f).map_err(here)?;
            Some(canny_with(&up, &cfg.canny).map_err(here)?)
        };

        let dil = DilationPlan::new(cfg.base_h, cfg.base_w, h, w).map_err(here)?;
        let ts = &self.taus[1..];
        let bijection = if cfg.window_interaction {
            let seed = derive_seed(cfg.seed, TAG_BIJECTION + k as u64);
            WindowBijection::random(seed, cfg.base_h, cfg.base_w, dil.samples(), ts)
        } else {
            WindowBijection::identity(cfg.base_h, cfg.base_w, dil.samples(), ts)
        };

        Ok(StageArtifacts {
            geometry,
            input_latent,
            inversion_noise,
            word_masks,
            prompts,
            plan,
            edge_map,
            bijection,
            conditioned_steps,
            output_latent: None,
        })
    }

    /// Runs the denoising loop of a prepared stage and records its output.
    pub fn denoise_stage(&self, st: &mut StageArtifacts) -> Result<LatentTensor> {
        let cfg = self.cfg;
        let k = st.geometry.index;
        let steps = cfg.steps;
        let big_t = self.taus[steps];
        let (h, w) = (st.geometry.height, st.geometry.width);
        let dil = DilationPlan::new(cfg.base_h, cfg.base_w, h, w).map_err(|e| e.at(at(k, big_t)))?;
        let conditions = match &st.edge_map {
            Some(edges) => {
                let f = self.codec.spatial_factor();
                sample_condition_patches(edges, &st.plan.scaled_up(f)).map_err(|e| e.at(at(k, big_t)))?
            }
            None => Vec::new(),
        };

        let mut z = forward_diffuse(&st.input_latent, big_t, &st.inversion_noise, &self.sched)
            .map_err(|e| e.at(at(k, big_t)))?;
        for i in (1..=steps).rev() {
            let (t, t_prev) = (self.taus[i], self.taus[i - 1]);
            let eta = match cfg.eta {
                EtaMode::Cosine => eta_schedule(i, steps),
                EtaMode::Zero => 0.0,
                EtaMode::One => 1.0,
            };
            let local = if eta < 1.0 {
                let conditioned = st.conditioned_steps.contains(&i);
                Some(self.patch_branch(st, &z, k, t, t_prev, conditioned.then_some(&conditions[..]))?)
            } else {
                None
            };
            let global = if eta > 0.0 { Some(self.dilated_branch(st, &dil, &z, k, t, t_prev)?) } else { None };
            z = match (local, global) {
                (Some(l), Some(g)) => blend_global(&l, &g, eta).map_err(|e| e.at(at(k, t)))?,
                (Some(l), None) => l,
                (None, Some(g)) => g,
                (None, None) => unreachable!("eta selects at least one branch"),
            };
            if cfg.residual && i > 1 {
                let weight = eta_schedule(i - 1, steps);
                let inverted = forward_diffuse(&st.input_latent, t_prev, &st.inversion_noise, &self.sched)
                    .and_then(|inv| lerp(&z, &inv, weight))
                    .map_err(|e| e.at(at(k, t)))?;
                z = inverted;
            }
        }
        st.output_latent = Some(z.clone());
        Ok(z)
    }

    fn patch_branch(
        &self,
        st: &StageArtifacts,
        z: &LatentTensor,
        stage: usize,
        t: usize,
        t_prev: usize,
        conditions: Option<&[EdgeMap]>,
    ) -> Result<LatentTensor> {
        let first = self.ids(st.plan.len());
        let stepped = st
            .plan
            .windows()
            .par_iter()
            .enumerate()
            .map(|(p, win)| {
                let run = || {
                    let patch = extract_patch(z, win)?;
                    let mut req = self.request(first + p as u64, patch.clone(), t, st.prompts.tokens_for(p));
                    req.condition = conditions.map(|c| c[p].clone());
                    let resp = predict_noise(self.backend, &req)?;
                    ddim_step(&patch, &resp.eps_pred, t, t_prev, &self.sched)
                };
                run().map_err(|e| e.at(Location { patch: Some(p), ..at(stage, t) }))
            })
            .collect::<Result<Vec<_>>>()?;
        fuse_patches(&stepped, &st.plan).map_err(|e| e.at(at(stage, t)))
    }

    fn dilated_branch(
        &self,
        st: &StageArtifacts,
        dil: &DilationPlan,
        z: &LatentTensor,
        stage: usize,
        t: usize,
        t_prev: usize,
    ) -> Result<LatentTensor> {
        let here = |e: Error| e.at(at(stage, t));
        let samples = dilate_extract(z, dil).and_then(|s| shuffle_windows(&s, &st.bijection, t, false)).map_err(here)?;
        let first = self.ids(samples.len());
        let stepped = samples
            .par_iter()
            .enumerate()
            .map(|(s, sample)| {
                let req = self.request(first + s as u64, sample.clone(), t, st.prompts.tokens.clone());
                predict_noise(self.backend, &req)
                    .and_then(|resp| ddim_step(sample, &resp.eps_pred, t, t_prev, &self.sched))
                    .map_err(|e| e.at(Location { sample: Some(s), ..at(stage, t) }))
            })
            .collect::<Result<Vec<_>>>()?;
        shuffle_windows(&stepped, &st.bijection, t, true)
            .and_then(|s| dilate_recombine(&s, dil))
            .map_err(here)
    }

    pub fn run_stage(
        &self,
        geometry: StageGeometry,
        z0_low: &LatentTensor,
        attention: Option<&CrossAttentionMap>,
        tokens: &[u32],
    ) -> Result<StageArtifacts> {
        let mut st = self.prepare_stage(geometry, z0_low, attention, tokens)?;
        self.denoise_stage(&mut st)?;
        Ok(st)
    }

    pub fn stage_geometries(&self) -> Vec<StageGeometry> {
        let cfg = self.cfg;
        cfg.scales
            .iter()
            .enumerate()
            .skip(1)
            .map(|(index, &scale)| StageGeometry { index, scale, height: cfg.base_h * scale, width: cfg.base_w * scale })
            .collect()
    }

    /// Base pass, every stage in order, then decode. Artifacts accumulate in
    /// `out` as they are produced so a failed run still leaves them behind.
    pub fn run(&self, tokens: &[u32], out: &mut RunArtifacts) -> Result<ImageBuffer> {
        let started = Instant::now();
        let base = self.base_pass(tokens)?;
        out.timings.push(started.elapsed());
        let mut z = base.latent.clone();
        let attention = base.attention.clone();
        out.base = Some(base);
        for g in self.stage_geometries() {
            let started = Instant::now();
            let st = self.prepare_stage(g, &z, attention.as_ref(), tokens)?;
            out.stages.push(st);
            z = self.denoise_stage(out.stages.last_mut().unwrap())?;
            out.timings.push(started.elapsed());
            log::info!("stage {} ({}x{}) done in {:.2?}", g.index, g.height, g.width, out.timings.last().unwrap());
        }
        self.codec.decode(&z).map_err(|e| e.at(Location { stage: Some(self.cfg.scales.len() - 1), ..Default::default() }))
    }
}

/// Runs a whole generation with the backend the config names.
pub fn run(cfg: &GenerationConfig, out: &mut RunArtifacts) -> Result<ImageBuffer> {
    let (backend, codec) = backend_from_config(cfg)?;
    Pipeline::new(cfg, backend.as_ref(), codec.as_ref())?.run(&cfg.prompt_tokens, out)
}
