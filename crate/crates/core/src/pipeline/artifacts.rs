//! Run directory layout and the manifest indexing it.
//!
//! ```text
//! manifest.txt          index of every file below plus the config echo
//! timings.txt           wall-clock seconds per stage
//! base/latent.ltns      base-pass output
//! base/attention.ltns   averaged attention, words as channels
//! stage1/input.ltns     ...per stage: input, noise, output latents,
//!                       mask_<j>.pgm, prompts.txt, plan.txt, edges.pgm,
//!                       bijection.txt, conditioned.txt
//! image.ppm             decoded result (image.pgm for gray)
//! ```
//!
//! Everything except `timings.txt` is a pure function of the config, so two
//! runs with the same seed produce byte-identical directories apart from it.

use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::Path;
use std::time::Duration;

use super::config::GenerationConfig;
use super::run::RunArtifacts;
use crate::error::{Error, Result};
use crate::structure::pnm::{save_image, write_edges, write_mask};
use crate::structure::ImageBuffer;

const HEADER: &str = "adp2-manifest 1";
const CONFIG_MARK: &str = "--- config";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// `None` for run-level files; 0 is the base pass.
    pub stage: Option<usize>,
    /// `None` when the file covers all timesteps.
    pub timestep: Option<usize>,
    pub kind: String,
    /// Relative to the run directory.
    pub path: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
    pub config: GenerationConfig,
    /// Not part of the rendered manifest; stored in `timings.txt`.
    pub stage_seconds: Vec<f64>,
}

fn dash(v: Option<usize>) -> String {
    v.map_or_else(|| "-".to_string(), |x| x.to_string())
}

impl RunManifest {
    pub fn render(&self) -> String {
        let mut s = format!("{HEADER}\nseed {}\n", self.seed);
        for e in &self.entries {
            let _ = writeln!(s, "file {} {} {} {}", dash(e.stage), dash(e.timestep), e.kind, e.path);
        }
        let _ = write!(s, "{CONFIG_MARK}\n{}", self.config.to_text());
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Format(format!("manifest: {m}"));
        let (head, config) = text
            .split_once(&format!("\n{CONFIG_MARK}\n"))
            .ok_or_else(|| bad("missing config section".into()))?;
        let mut lines = head.lines();
        if lines.next() != Some(HEADER) {
            return Err(bad("bad header".into()));
        }
        let seed = lines
            .next()
            .and_then(|l| l.strip_prefix("seed "))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("missing seed".into()))?;
        let opt = |v: &str| -> Result<Option<usize>> {
            if v == "-" {
                Ok(None)
            } else {
                v.parse().map(Some).map_err(|_| bad(format!("bad number '{v}'")))
            }
        };
        let mut entries = Vec::new();
        for line in lines {
            let f: Vec<&str> = line.splitn(5, ' ').collect();
            if f.len() != 5 || f[0] != "file" {
                return Err(bad(format!("bad line '{line}'")));
            }
            entries.push(ManifestEntry {
                stage: opt(f[1])?,
                timestep: opt(f[2])?,
                kind: f[3].to_string(),
                path: f[4].to_string(),
            });
        }
        let config = GenerationConfig::parse(config)?;
        Ok(RunManifest { seed, entries, config, stage_seconds: Vec::new() })
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut m = Self::parse(&fs::read_to_string(dir.join("manifest.txt"))?)?;
        if let Ok(t) = fs::read_to_string(dir.join("timings.txt")) {
            m.stage_seconds = t
                .lines()
                .filter_map(|l| l.split_whitespace().nth(1).and_then(|v| v.parse().ok()))
                .collect();
        }
        Ok(m)
    }
}

struct Writer<'a> {
    dir: &'a Path,
    entries: Vec<ManifestEntry>,
}

impl Writer<'_> {
    fn put(
        &mut self,
        stage: Option<usize>,
        timestep: Option<usize>,
        kind: &str,
        rel: String,
        write: impl FnOnce(&Path) -> Result<()>,
    ) -> Result<()> {
        let path = self.dir.join(&rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        write(&path)?;
        self.entries.push(ManifestEntry { stage, timestep, kind: kind.to_string(), path: rel });
        Ok(())
    }
}

fn text(s: String) -> impl FnOnce(&Path) -> Result<()> {
    move |p| Ok(fs::write(p, s)?)
}

/// Writes whatever `art` holds (complete or partial) plus the image if there
/// is one, then the manifest.
pub fn write_run_dir(
    dir: impl AsRef<Path>,
    cfg: &GenerationConfig,
    art: &RunArtifacts,
    image: Option<&ImageBuffer>,
) -> Result<RunManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut w = Writer { dir, entries: Vec::new() };

    if let Some(base) = &art.base {
        w.put(Some(0), None, "latent", "base/latent.ltns".into(), |p| base.latent.save(p))?;
        if let Some(att) = &base.attention {
            w.put(Some(0), None, "attention", "base/attention.ltns".into(), |p| att.to_tensor().save(p))?;
        }
    }
    for st in &art.stages {
        let k = st.geometry.index;
        let s = Some(k);
        let d = format!("stage{k}");
        w.put(s, None, "input", format!("{d}/input.ltns"), |p| st.input_latent.save(p))?;
        w.put(s, Some(st.bijection.timesteps().max().unwrap_or(0)), "noise", format!("{d}/noise.ltns"), |p| {
            st.inversion_noise.save(p)
        })?;
        for m in &st.word_masks {
            w.put(s, None, "mask", format!("{d}/mask_{}.pgm", m.word_index), |p| {
                write_mask(BufWriter::new(fs::File::create(p)?), m)
            })?;
        }
        w.put(s, None, "prompts", format!("{d}/prompts.txt"), text(st.prompts.dump()))?;
        w.put(s, None, "plan", format!("{d}/plan.txt"), text(st.plan.dump()))?;
        if let Some(e) = &st.edge_map {
            w.put(s, None, "edges", format!("{d}/edges.pgm"), |p| write_edges(BufWriter::new(fs::File::create(p)?), e))?;
        }
        w.put(s, None, "bijection", format!("{d}/bijection.txt"), text(st.bijection.dump()))?;
        let cond: String = st.conditioned_steps.iter().map(|i| format!("{i}\n")).collect();
        w.put(s, None, "conditioned", format!("{d}/conditioned.txt"), text(cond))?;
        if let Some(z) = &st.output_latent {
            w.put(s, None, "output", format!("{d}/output.ltns"), |p| z.save(p))?;
        }
    }
    if let Some(img) = image {
        let name = if img.channels == 3 { "image.ppm" } else { "image.pgm" };
        w.put(None, None, "image", name.into(), |p| save_image(p, img))?;
    }
    let stage_seconds: Vec<f64> = art.timings.iter().map(Duration::as_secs_f64).collect();
    let timings: String = stage_seconds.iter().enumerate().map(|(k, s)| format!("{k} {s:.6}\n")).collect();
    w.put(None, None, "timings", "timings.txt".into(), text(timings))?;

    let manifest = RunManifest { seed: cfg.seed, entries: w.entries, config: cfg.clone(), stage_seconds };
    fs::write(dir.join("manifest.txt"), manifest.render())?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let mut cfg = GenerationConfig::default();
        cfg.seed = 77;
        cfg.set("controlnet_steps", "25").unwrap();
        let m = RunManifest {
            seed: 77,
            entries: vec![
                ManifestEntry { stage: Some(1), timestep: None, kind: "plan".into(), path: "stage1/plan.txt".into() },
                ManifestEntry { stage: None, timestep: Some(981), kind: "x".into(), path: "dir with space/a".into() },
            ],
            config: cfg,
            stage_seconds: Vec::new(),
        };
        assert_eq!(RunManifest::parse(&m.render()).unwrap(), m);
        assert!(RunManifest::parse("nope").is_err());
    }
}
