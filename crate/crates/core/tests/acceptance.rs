//! Release gate. Each criterion prints one PASS/FAIL line with its wall time
//! and bound; the process exits nonzero if any criterion fails.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use adp2_core::denoiser::wire::{HelloInfo, Message};
use adp2_core::denoiser::{
    make_toy_backend, spawn_echo_server, DenoiseRequest, DenoiseResponse, NoiseBackend, ToyKind, ToyParams,
};
use adp2_core::dilated::{
    blend_global, dilate_extract, dilate_recombine, eta_schedule, shuffle_windows, DilationPlan, WindowBijection,
};
use adp2_core::patch::{extract_patch, fuse_patches, plan_patches};
use adp2_core::pipeline::{run, write_run_dir, GenerationConfig, RunArtifacts};
use adp2_core::prompt::{binarize_attention, derive_patch_prompts, open_mask, CrossAttentionMap, WordMask};
use adp2_core::rng::gaussian_latent;
use adp2_core::structure::{canny_edges, EdgeMap, ImageBuffer};
use adp2_core::tensor::{ddim_step, forward_diffuse, make_schedule};
use adp2_core::LatentTensor;
use common::{random_image, reference_canny, square_image};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn err<E: std::fmt::Debug>(e: E) -> String {
    format!("{e:?}")
}

fn bits(z: &LatentTensor) -> Vec<u32> {
    z.data().iter().map(|v| v.to_bits()).collect()
}

fn sorted(mut v: Vec<u32>) -> Vec<u32> {
    v.sort_unstable();
    v
}

fn patch_count_law() -> Check {
    let plan = plan_patches(128, 128, 64, 64, 32, 32).map_err(err)?;
    let law = ((128 - 64) / 32 + 1) * ((128 - 64) / 32 + 1);
    ensure!(plan.len() == 9 && law == 9, "got {} windows", plan.len());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..100 {
        let (ph, pw) = (rng.random_range(1..40usize), rng.random_range(1..40usize));
        let (h, w) = (rng.random_range(ph..ph * 4 + 10), rng.random_range(pw..pw * 4 + 10));
        let (dh, dw) = (rng.random_range(1..=ph), rng.random_range(1..=pw));
        let plan = plan_patches(h, w, ph, pw, dh, dw).map_err(err)?;
        let mut cover = vec![0u32; h * w];
        for win in plan.windows() {
            ensure!(win.top + win.height <= h && win.left + win.width <= w, "case {case}: window out of bounds");
            for r in win.top..win.top + win.height {
                for c in win.left..win.left + win.width {
                    cover[r * w + c] += 1;
                }
            }
        }
        ensure!(cover.iter().all(|&n| n > 0), "case {case}: {h}x{w} patch {ph}x{pw} stride {dh}x{dw} leaves a gap");
        if (h - ph) % dh == 0 && (w - pw) % dw == 0 {
            ensure!(plan.len() == ((h - ph) / dh + 1) * ((w - pw) / dw + 1), "case {case}: count law broken");
        }
    }
    Ok(())
}

fn fusion_equivalence() -> Check {
    let sched = make_schedule(1000, 0.00085, 0.012).map_err(err)?;
    let backend = make_toy_backend(ToyKind::Linear, &ToyParams { lambda: Some(0.5), ..Default::default() }).map_err(err)?;
    let eps = |z: &LatentTensor| backend.predict(&DenoiseRequest::new(0, z.clone(), 0, vec![])).map(|r| r.eps_pred);
    let plan = plan_patches(128, 128, 64, 64, 32, 32).map_err(err)?;
    let taus = sched.inference_timesteps(10).map_err(err)?;
    let mut full = gaussian_latent(128, 128, 4, 11, 0);
    let mut fused = full.clone();
    for (k, &t) in taus.iter().enumerate() {
        let t_prev = taus.get(k + 1).copied().unwrap_or(0);
        full = ddim_step(&full, &eps(&full).map_err(err)?, t, t_prev, &sched).map_err(err)?;
        let mut patches = Vec::with_capacity(plan.len());
        for win in plan.windows() {
            let p = extract_patch(&fused, win).map_err(err)?;
            patches.push(ddim_step(&p, &eps(&p).map_err(err)?, t, t_prev, &sched).map_err(err)?);
        }
        fused = fuse_patches(&patches, &plan).map_err(err)?;
    }
    let d = fused.max_abs_diff(&full).map_err(err)?;
    ensure!(d < 1e-6, "max abs diff {d:e}");
    Ok(())
}

fn ddim_inversion() -> Check {
    let sched = make_schedule(1000, 0.00085, 0.012).map_err(err)?;
    let taus = sched.inference_timesteps(50).map_err(err)?;
    for seed in 0..10 {
        let z0 = gaussian_latent(64, 64, 4, 100 + seed, 0);
        let noise = gaussian_latent(64, 64, 4, 100 + seed, 1);
        let oracle = make_toy_backend(
            ToyKind::Oracle,
            &ToyParams { z0: Some(z0.clone()), eps: Some(noise.clone()), ..Default::default() },
        )
        .map_err(err)?;
        let mut z = forward_diffuse(&z0, 1000, &noise, &sched).map_err(err)?;
        for (k, &t) in taus.iter().enumerate() {
            let t_prev = taus.get(k + 1).copied().unwrap_or(0);
            let e = oracle.predict(&DenoiseRequest::new(k as u64, z.clone(), t as u32, vec![])).map_err(err)?.eps_pred;
            z = ddim_step(&z, &e, t, t_prev, &sched).map_err(err)?;
        }
        let d = z.max_abs_diff(&z0).map_err(err)?;
        ensure!(d < 1e-4, "seed {seed}: max abs error {d:e}");
    }
    Ok(())
}

fn window_interaction() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..100u64 {
        let (h, w, t) = (rng.random_range(1..9usize), rng.random_range(1..9usize), rng.random_range(1..1000usize));
        let bij = WindowBijection::random(rng.random(), h, w, 16, &[t]);
        let s: Vec<LatentTensor> = (0..16).map(|k| gaussian_latent(h, w, 4, case, k)).collect();
        let fwd = shuffle_windows(&s, &bij, t, false).map_err(err)?;
        let back = shuffle_windows(&fwd, &bij, t, true).map_err(err)?;
        ensure!(back.iter().zip(&s).all(|(a, b)| bits(a) == bits(b)), "case {case}: inverse after forward is not identity");
        for r in 0..h {
            for c in 0..w {
                let a = sorted(s.iter().flat_map(|x| x.cell(r, c).iter().map(|v| v.to_bits())).collect());
                let b = sorted(fwd.iter().flat_map(|x| x.cell(r, c).iter().map(|v| v.to_bits())).collect());
                ensure!(a == b, "case {case}: multiset changed at ({r},{c})");
            }
        }
    }
    Ok(())
}

fn dilation_partition() -> Check {
    let mut seed = 0;
    for sh in 2..=4 {
        for sw in 2..=4 {
            for (h, w) in [(1, 1), (3, 5), (8, 8), (16, 9)] {
                seed += 1;
                let plan = DilationPlan::new(h, w, h * sh, w * sw).map_err(err)?;
                let z = gaussian_latent(h * sh, w * sw, 4, seed, 0);
                let samples = dilate_extract(&z, &plan).map_err(err)?;
                let again = dilate_recombine(&samples, &plan).map_err(err)?;
                ensure!(bits(&again) == bits(&z), "recombine after extract differs at strides {sh}x{sw}");
                let fresh: Vec<LatentTensor> = (0..sh * sw).map(|k| gaussian_latent(h, w, 4, seed, k as u64 + 1)).collect();
                let out = dilate_extract(&dilate_recombine(&fresh, &plan).map_err(err)?, &plan).map_err(err)?;
                ensure!(out.iter().zip(&fresh).all(|(a, b)| bits(a) == bits(b)), "extract after recombine differs at strides {sh}x{sw}");
            }
        }
    }
    Ok(())
}

fn prompt_masks() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for case in 0..1000 {
        let (h, w) = (rng.random_range(1..24usize), rng.random_range(1..24usize));
        let m = WordMask::from_fn(h, w, 0, |_, _| rng.random_bool(0.6));
        let once = open_mask(&m, 1);
        ensure!(open_mask(&once, 1) == once, "case {case}: opening not idempotent");
        ensure!(once.grid().iter().zip(m.grid()).all(|(a, b)| a <= b), "case {case}: opening added cells");
    }
    let plan = plan_patches(16, 16, 8, 8, 4, 4).map_err(err)?;
    let tokens = [1, 2, 3, 4];
    for case in 0..100 {
        let att = CrossAttentionMap::new(16, 16, 4, (0..16 * 16 * 4).map(|_| rng.random::<f32>()).collect()).map_err(err)?;
        let masks: Vec<WordMask> = binarize_attention(&att).map_err(err)?.iter().map(|m| open_mask(m, 1)).collect();
        let a = rng.random_range(0.01..0.99);
        let b = rng.random_range(0.01..0.99);
        let (c1, c2) = (f64::min(a, b), f64::max(a, b));
        let lo = derive_patch_prompts(&masks, &plan, c1, &tokens).map_err(err)?;
        let hi = derive_patch_prompts(&masks, &plan, c2, &tokens).map_err(err)?;
        for (sl, sh) in lo.selections.iter().zip(&hi.selections) {
            ensure!(sh.iter().all(|j| sl.contains(j)), "case {case}: selection at {c2} not within selection at {c1}");
        }
    }
    // 0.3 of 4096 cells is 1228.8: 1228 stays out, 1229 and 1230 get in
    let single = plan_patches(64, 64, 64, 64, 32, 32).map_err(err)?;
    for (ones, expect) in [(1228usize, false), (1229, true), (1230, true)] {
        let m = WordMask::from_fn(64, 64, 0, |r, c| r * 64 + c < ones);
        let set = derive_patch_prompts(&[m], &single, 0.3, &[7]).map_err(err)?;
        ensure!(!set.selections[0].is_empty() == expect, "{ones} of 4096 cells: selected = {}", !expect);
    }
    Ok(())
}

fn eta_and_blend() -> Check {
    ensure!(eta_schedule(1000, 1000) == 1.0, "eta(T) = {}", eta_schedule(1000, 1000));
    ensure!(eta_schedule(0, 1000) == 0.0, "eta(0) = {}", eta_schedule(0, 1000));
    ensure!((eta_schedule(500, 1000) - 0.5).abs() < 1e-12, "eta(T/2) = {}", eta_schedule(500, 1000));
    let v: Vec<f64> = (0..=1000).map(|i| eta_schedule(i, 1000)).collect();
    ensure!(v.windows(2).all(|p| p[0] <= p[1]), "eta is not monotone");
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..200u64 {
        let z = gaussian_latent(6, 5, 4, case, 0);
        let g = gaussian_latent(6, 5, 4, case, 1);
        let eta = if case < 2 { case as f64 } else { rng.random_range(0.0..=1.0) };
        let out = blend_global(&z, &g, eta).map_err(err)?;
        for ((x, a), b) in out.data().iter().zip(z.data()).zip(g.data()) {
            ensure!(*x >= a.min(*b) && *x <= a.max(*b), "case {case}: {x} outside [{a}, {b}] at eta {eta}");
        }
    }
    Ok(())
}

fn canny_oracle() -> Check {
    let img = square_image();
    let e = canny_edges(&img, 50.0, 150.0, 1.0).map_err(err)?;
    let n = e.count();
    ensure!((51..=76).contains(&n), "edge count {n} not within 20% of perimeter 64");
    for r in 0..32 {
        for c in 0..32 {
            if e.is_edge(r, c) {
                let d = (r as f64 + 0.5 - 16.0).abs().max((c as f64 + 0.5 - 16.0).abs());
                ensure!((d - 8.0).abs() <= 1.0, "edge at ({r},{c}) is {d} from the centre");
            }
        }
    }
    let mut seen = vec![false; 32 * 32];
    let mut stack = vec![(16usize, 16usize)];
    while let Some((r, c)) = stack.pop() {
        if seen[r * 32 + c] || e.is_edge(r, c) {
            continue;
        }
        seen[r * 32 + c] = true;
        ensure!(r > 0 && c > 0 && r < 31 && c < 31, "contour is open at ({r},{c})");
        stack.extend([(r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)]);
    }
    let as_bools = |e: &EdgeMap| e.data().iter().map(|&v| v == 255).collect::<Vec<_>>();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..20u64 {
        let a: f64 = rng.random_range(0.0..255.0f64).round();
        let b: f64 = rng.random_range(0.0..255.0f64).round();
        let (low, high) = (a.min(b), a.max(b));
        let probe: ImageBuffer = random_image(case, 28, 26, if case % 2 == 0 { 3 } else { 1 });
        for test in [&img, &probe] {
            let got = as_bools(&canny_edges(test, low, high, 1.0).map_err(err)?);
            ensure!(got == reference_canny(test, low, high, 1.0), "case {case}: low {low} high {high} differs from reference");
        }
    }
    Ok(())
}

fn random_latent(rng: &mut ChaCha8Rng) -> LatentTensor {
    let (h, w, c) = (rng.random_range(0..6usize), rng.random_range(0..6usize), rng.random_range(1..5usize));
    let data = (0..h * w * c)
        .map(|_| loop {
            let v = f32::from_bits(rng.random());
            if v.is_finite() {
                break v;
            }
        })
        .collect();
    LatentTensor::new(h, w, c, data).unwrap()
}

fn random_message(rng: &mut ChaCha8Rng, k: usize) -> Message {
    let id = rng.random();
    if k % 2 == 0 {
        let tokens = (0..rng.random_range(0..10)).map(|_| rng.random()).collect();
        let mut req = DenoiseRequest::new(id, random_latent(rng), rng.random(), tokens);
        if rng.random_bool(0.5) {
            let (h, w) = (rng.random_range(1..9), rng.random_range(1..9));
            req.condition = Some(EdgeMap::from_fn(h, w, |_, _| rng.random_bool(0.3)));
        }
        req.guidance_scale = rng.random_range(-20.0..20.0);
        req.capture_attention = rng.random_bool(0.5);
        Message::DenoiseReq(req)
    } else {
        let attention = rng.random_bool(0.5).then(|| {
            let (h, w, m) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..6));
            CrossAttentionMap::new(h, w, m, (0..h * w * m).map(|_| rng.random()).collect()).unwrap()
        });
        Message::DenoiseResp(DenoiseResponse { request_id: id, eps_pred: random_latent(rng), attention })
    }
}

fn protocol() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for k in 0..1000 {
        let msg = random_message(&mut rng, k);
        let frame = msg.to_frame();
        let back = Message::from_frame(&frame).map_err(err)?;
        ensure!(back == msg && back.to_frame() == frame, "message {k} did not round trip");
    }
    let mut cfg = GenerationConfig::parse(
        "base = 8x8\ntarget = 16x16\nscales = 1,2\nsteps = 6\nspatial_factor = 2\nprompt_tokens = 4,5,6\nbackend = echo\n",
    )
    .map_err(err)?;
    let local = run(&cfg, &mut RunArtifacts::default()).map_err(err)?;
    let hello = HelloInfo { latent_h: 8, latent_w: 8, channels: 4, spatial_factor: 2 };
    let server = spawn_echo_server("127.0.0.1:0", hello, Some(1)).map_err(err)?;
    cfg.set("backend", "remote").map_err(err)?;
    cfg.set("endpoint", &server.addr().to_string()).map_err(err)?;
    let remote = run(&cfg, &mut RunArtifacts::default());
    server.shutdown();
    ensure!(remote.map_err(err)? == local, "loopback image differs from in-process echo");
    Ok(())
}

fn e2e_config() -> GenerationConfig {
    let mut c = GenerationConfig::parse(
        "base = 8x8\ntarget = 16x16\nscales = 1,2\nsteps = 8\nspatial_factor = 4\nprompt_tokens = 3,1,4,1,5\n\
         seed = 42\ncanny_low = 20\ncanny_high = 60\nbackend = edge-biased\nbias = 0.5\ncontext = 0.3\nattention_scale = 2\n",
    )
    .unwrap();
    c.backend.lambda = Some(0.4);
    c
}

fn end_to_end() -> Check {
    let c = e2e_config();
    let dir = std::env::temp_dir().join(format!("adp2-acceptance-{}", std::process::id()));
    let mut outputs = Vec::new();
    for k in 0..2 {
        let mut art = RunArtifacts::default();
        let img = run(&c, &mut art).map_err(err)?;
        let d = dir.join(k.to_string());
        write_run_dir(&d, &c, &art, Some(&img)).map_err(err)?;
        let manifest = std::fs::read(d.join("manifest.txt")).map_err(err)?;
        let ppm = std::fs::read(d.join("image.ppm")).map_err(err)?;
        outputs.push((manifest, ppm, art.stages[0].output_latent.clone()));
    }
    let _ = std::fs::remove_dir_all(&dir);
    ensure!(outputs[0].0 == outputs[1].0, "manifests differ");
    ensure!(outputs[0].1 == outputs[1].1, "images differ");
    for (key, value) in [("eta", "zero"), ("window_interaction", "false"), ("controlnet_steps", "0")] {
        let mut degraded = c.clone();
        degraded.set(key, value).map_err(err)?;
        let mut art = RunArtifacts::default();
        run(&degraded, &mut art).map_err(err)?;
        ensure!(art.stages[0].output_latent != outputs[0].2, "{key} = {value} did not change the result");
    }
    Ok(())
}

fn main() -> ExitCode {
    let criteria: [(&str, u64, fn() -> Check); 10] = [
        ("patch count law and coverage", 1, patch_count_law),
        ("fusion equivalence", 5, fusion_equivalence),
        ("ddim inversion", 10, ddim_inversion),
        ("window interaction soundness", 5, window_interaction),
        ("dilation partition", 2, dilation_partition),
        ("prompt mask suite", 10, prompt_masks),
        ("eta schedule and blend", 1, eta_and_blend),
        ("canny oracle", 5, canny_oracle),
        ("protocol", 10, protocol),
        ("end-to-end determinism", 60, end_to_end),
    ];
    let mut failed = 0;
    for (name, limit, check) in criteria {
        let start = Instant::now();
        let outcome = check();
        let took = start.elapsed();
        let verdict = match outcome {
            Ok(()) if took <= Duration::from_secs(limit) => "PASS".to_string(),
            Ok(()) => format!("FAIL (over the {limit} s bound)"),
            Err(why) => format!("FAIL ({why})"),
        };
        if !verdict.starts_with("PASS") {
            failed += 1;
        }
        println!("{verdict:<4} {name} [{:.3} s / {limit} s]", took.as_secs_f64());
    }
    println!("{} of 10 criteria passed", 10 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
