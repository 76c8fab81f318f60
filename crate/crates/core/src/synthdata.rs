//! Procedural desk-scale corpus. "Real" videos are pink-noise backgrounds
//! with drifting Gaussian blobs under a global pan; "generated" videos are
//! the same scenes composited with parameterized generator artifacts whose
//! strength falls as the profile's quality score rises: an additive
//! periodic grid, per-frame Gaussian blur, frame-indexed luminance flicker,
//! and down-up resampling. Everything is a pure function of the seed.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::ingest::{
    resize_bilinear, save_manifest, save_nvt, DatasetManifest, Label, ManifestRecord, Split,
    VideoTensor, CHANNELS,
};
use crate::util::{hash_label, mix_seed};

// ---------------------------------------------------------------------------
// Infinite deterministic noise field
// ---------------------------------------------------------------------------

fn hash_lattice(seed: u64, ix: i64, iy: i64) -> f64 {
    let mut z = seed
        ^ (ix as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (iy as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    // to [-1, 1]
    (z >> 11) as f64 / (1u64 << 52) as f64 - 1.0
}

fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (ix, iy) = (x0 as i64, y0 as i64);
    let sx = fx * fx * (3.0 - 2.0 * fx);
    let sy = fy * fy * (3.0 - 2.0 * fy);
    let v00 = hash_lattice(seed, ix, iy);
    let v01 = hash_lattice(seed, ix, iy + 1);
    let v10 = hash_lattice(seed, ix + 1, iy);
    let v11 = hash_lattice(seed, ix + 1, iy + 1);
    let a = v00 * (1.0 - sx) + v10 * sx;
    let b = v01 * (1.0 - sx) + v11 * sx;
    a * (1.0 - sy) + b * sy
}

const OCTAVES: usize = 4;
const BASE_CELL: f64 = 24.0;

/// Multi-octave value noise approximating a 1/f^γ spectrum: octave o has
/// frequency 2^o and amplitude 2^(−γ·o).
fn background(seed: u64, gamma: f64, x: f64, y: f64) -> f64 {
    let mut total = 0.0;
    let mut norm = 0.0;
    for o in 0..OCTAVES {
        let freq = (1u64 << o) as f64;
        let amp = 2f64.powf(-gamma * o as f64);
        total += amp * value_noise(mix_seed(seed, o as u64), x * freq / BASE_CELL, y * freq / BASE_CELL);
        norm += amp;
    }
    total / norm
}

// ---------------------------------------------------------------------------
// Scenes
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Blob {
    pub x: f64,
    pub y: f64,
    /// px per second
    pub vx: f64,
    pub vy: f64,
    pub radius: f64,
    pub amplitude: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneParams {
    pub seed: u64,
    /// Spectral exponent of the pink-noise background.
    pub gamma: f64,
    pub blobs: Vec<Blob>,
    /// Global pan velocity, px per frame.
    pub pan: (f64, f64),
    pub tint: [f64; 3],
}

impl SceneParams {
    pub fn from_seed(seed: u64, height: usize, width: usize) -> Self {
        let mut s = mix_seed(seed, 0x5ce);
        let mut next = move || {
            s = mix_seed(s, 1);
            (s >> 11) as f64 / (1u64 << 53) as f64 // [0,1)
        };
        let gamma = 0.8 + 0.6 * next();
        let n_blobs = 2 + (next() * 4.0) as usize;
        let min_side = height.min(width) as f64;
        let blobs = (0..n_blobs)
            .map(|_| Blob {
                x: next() * width as f64,
                y: next() * height as f64,
                vx: (next() - 0.5) * 2.0 * min_side / 4.0,
                vy: (next() - 0.5) * 2.0 * min_side / 4.0,
                radius: min_side * (0.10 + 0.22 * next()),
                amplitude: (next() - 0.5) * 0.55,
            })
            .collect();
        let pan = ((next() - 0.5) * 4.0, (next() - 0.5) * 4.0);
        let tint = [
            (next() - 0.5) * 0.10,
            (next() - 0.5) * 0.10,
            (next() - 0.5) * 0.10,
        ];
        SceneParams {
            seed,
            gamma,
            blobs,
            pan,
            tint,
        }
    }
}

/// Pink-noise background + moving Gaussian blobs + global pan, clipped to
/// [0,1]. Bit-deterministic per scene.
pub fn gen_real(scene: &SceneParams, height: usize, width: usize, frames: usize, fps: f64) -> VideoTensor {
    let mut video = VideoTensor::zeros(frames, height, width);
    for t in 0..frames {
        let tf = t as f64;
        let pan_x = scene.pan.0 * tf;
        let pan_y = scene.pan.1 * tf;
        for y in 0..height {
            for x in 0..width {
                let field = background(
                    scene.seed,
                    scene.gamma,
                    x as f64 + pan_x,
                    y as f64 + pan_y,
                );
                let mut blob_sum = 0.0;
                for b in &scene.blobs {
                    // world position advances with velocity; the camera pan
                    // shifts everything the same way as the background
                    let bx = b.x + b.vx * tf / fps - pan_x;
                    let by = b.y + b.vy * tf / fps - pan_y;
                    let dx = x as f64 - bx;
                    let dy = y as f64 - by;
                    let d2 = (dx * dx + dy * dy) / (2.0 * b.radius * b.radius);
                    if d2 < 12.0 {
                        blob_sum += b.amplitude * (-d2).exp();
                    }
                }
                let base = 0.5 + 0.34 * field + blob_sum;
                for c in 0..CHANNELS {
                    let v = (base + scene.tint[c]).clamp(0.0, 1.0);
                    video.set(t, y, x, c, v as f32);
                }
            }
        }
    }
    video
}

// ---------------------------------------------------------------------------
// Generator profiles and artifacts
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeneratorProfile {
    pub name: String,
    /// Quality score in (0, 0.95]; artifact amplitudes scale as (1−q)·max.
    pub quality: f64,
    pub grid_period: usize,
    pub grid_amp_max: f64,
    pub blur_sigma_max: f64,
    pub flicker_amp_max: f64,
    /// Flicker period in seconds.
    pub flicker_period_s: f64,
    /// When set, the flicker follows the spatial artifact envelope instead
    /// of shifting the whole frame uniformly.
    #[serde(default)]
    pub flicker_regional: bool,
    pub ring_mix_max: f64,
    pub ring_factor: usize,
    pub resolutions: Vec<(usize, usize)>,
    /// Stored frame-count range (inclusive).
    pub frames: (usize, usize),
    pub fps: f64,
}

impl GeneratorProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.quality > 0.0 && self.quality <= 0.95) {
            return Err(CoreError::Config(format!(
                "profile {}: quality {} outside (0, 0.95]",
                self.name, self.quality
            )));
        }
        if self.resolutions.is_empty() || self.frames.0 == 0 || self.frames.0 > self.frames.1 {
            return Err(CoreError::Config(format!(
                "profile {}: bad resolutions/frames",
                self.name
            )));
        }
        Ok(())
    }

    fn strength(&self) -> f64 {
        1.0 - self.quality
    }
}

fn gaussian_blur(video: &mut VideoTensor, sigma: f64) {
    if sigma < 0.05 {
        return;
    }
    let radius = (2.5 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0.0;
    for i in -radius..=radius {
        let w = (-((i * i) as f64) / (2.0 * sigma * sigma)).exp();
        kernel.push(w);
        sum += w;
    }
    for w in kernel.iter_mut() {
        *w /= sum;
    }
    let (h, w) = (video.height, video.width);
    let mut tmp = vec![0.0f32; h * w * CHANNELS];
    for t in 0..video.frames {
        // horizontal
        for y in 0..h {
            for x in 0..w {
                for c in 0..CHANNELS {
                    let mut acc = 0.0f64;
                    for (ki, kw) in kernel.iter().enumerate() {
                        let xx = (x as isize + ki as isize - radius).clamp(0, w as isize - 1);
                        acc += kw * video.at(t, y, xx as usize, c) as f64;
                    }
                    tmp[(y * w + x) * CHANNELS + c] = acc as f32;
                }
            }
        }
        // vertical
        for y in 0..h {
            for x in 0..w {
                for c in 0..CHANNELS {
                    let mut acc = 0.0f64;
                    for (ki, kw) in kernel.iter().enumerate() {
                        let yy = (y as isize + ki as isize - radius).clamp(0, h as isize - 1);
                        acc += kw * tmp[(yy as usize * w + x) * CHANNELS + c] as f64;
                    }
                    video.set(t, y, x, c, acc as f32);
                }
            }
        }
    }
}

/// Smooth per-video field in [0,1] modulating where the local artifacts
/// land. Generator defects are not spatially uniform; this is also what
/// makes cropped views lose evidence.
fn artifact_envelope(scene: &SceneParams, height: usize, width: usize) -> Vec<f32> {
    let cell = height.min(width) as f64 / 1.8;
    let seed = mix_seed(scene.seed, 0xe47);
    let mut env = vec![0.0f32; height * width];
    for y in 0..height {
        for x in 0..width {
            let n = value_noise(seed, x as f64 / cell * BASE_CELL, y as f64 / cell * BASE_CELL);
            let u = (0.5 + 0.5 * n).clamp(0.0, 1.0);
            // sharpen toward on/off regions
            env[y * width + x] = (u * u * (3.0 - 2.0 * u)) as f32;
        }
    }
    env
}

/// Same scene as `gen_real`, composited with the profile's artifacts:
/// down-up resampling, Gaussian blur, additive grid (all modulated by the
/// spatial envelope), and global luminance flicker. Artifact energy is
/// strictly decreasing in the quality score.
pub fn gen_fake(
    scene: &SceneParams,
    profile: &GeneratorProfile,
    height: usize,
    width: usize,
    frames: usize,
    fps: f64,
) -> VideoTensor {
    let mut video = gen_real(scene, height, width, frames, fps);
    let s = profile.strength();
    let env = artifact_envelope(scene, height, width);

    // down-up resampling: removes top-band energy, adds resampling blur
    let ring_mix = profile.ring_mix_max * s;
    if ring_mix > 1e-3 && profile.ring_factor > 1 {
        let dh = (height / profile.ring_factor).max(1);
        let dw = (width / profile.ring_factor).max(1);
        let down = resize_bilinear(&video, dh, dw).expect("downscale");
        let up = resize_bilinear(&down, height, width).expect("upscale");
        let fz = height * width * CHANNELS;
        for (i, (v, u)) in video.data_mut().iter_mut().zip(up.data()).enumerate() {
            let w = ring_mix * env[(i % fz) / CHANNELS] as f64;
            *v = (*v as f64 * (1.0 - w) + *u as f64 * w) as f32;
        }
    }

    let sigma = profile.blur_sigma_max * s;
    if sigma >= 0.05 {
        let mut blurred = video.clone();
        gaussian_blur(&mut blurred, sigma);
        let fz = height * width * CHANNELS;
        for (i, (v, b)) in video.data_mut().iter_mut().zip(blurred.data()).enumerate() {
            let w = env[(i % fz) / CHANNELS];
            *v = *v * (1.0 - w) + *b * w;
        }
    }

    let grid_amp = profile.grid_amp_max * s;
    if grid_amp > 0.0 {
        let p = profile.grid_period as f64;
        for t in 0..frames {
            for y in 0..height {
                let gy = (2.0 * std::f64::consts::PI * y as f64 / p).cos();
                for x in 0..width {
                    let gx = (2.0 * std::f64::consts::PI * x as f64 / p).cos();
                    let add = (grid_amp * 0.5 * (gx + gy)) as f32 * env[y * width + x];
                    for c in 0..CHANNELS {
                        let v = video.at(t, y, x, c) + add;
                        video.set(t, y, x, c, v);
                    }
                }
            }
        }
    }

    let flicker_amp = profile.flicker_amp_max * s;
    if flicker_amp > 0.0 {
        let phase = (mix_seed(scene.seed, 0xf11c) >> 11) as f64 / (1u64 << 53) as f64
            * std::f64::consts::TAU;
        let fz = height * width * CHANNELS;
        for t in 0..frames {
            let offset =
                (flicker_amp * (std::f64::consts::TAU * t as f64 / fps / profile.flicker_period_s + phase).sin())
                    as f32;
            if profile.flicker_regional {
                let frame = &mut video.data_mut()[t * fz..(t + 1) * fz];
                for (i, v) in frame.iter_mut().enumerate() {
                    *v += offset * env[i / CHANNELS];
                }
            } else {
                for v in &mut video.data_mut()[t * fz..(t + 1) * fz] {
                    *v += offset;
                }
            }
        }
    }

    video.clamp_unit();
    video
}

// ---------------------------------------------------------------------------
// Corpus assembly
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub seed: u64,
    pub profiles: Vec<GeneratorProfile>,
    /// Real videos per split, shared across profiles.
    pub reals: SplitCounts,
    /// Fake videos per profile per split.
    pub fakes_per_profile: SplitCounts,
    pub real_resolutions: Vec<(usize, usize)>,
    pub real_frames: (usize, usize),
    pub real_fps: f64,
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.profiles.is_empty() || self.real_resolutions.is_empty() {
            return Err(CoreError::Config(
                "corpus needs ≥1 profile and ≥1 real resolution".into(),
            ));
        }
        for p in &self.profiles {
            p.validate()?;
        }
        Ok(())
    }
}

fn pick<T: Copy>(items: &[T], seed: u64) -> T {
    items[(seed % items.len() as u64) as usize]
}

fn frames_in(range: (usize, usize), seed: u64) -> usize {
    range.0 + (seed % (range.1 - range.0 + 1) as u64) as usize
}

struct VideoJob {
    record: ManifestRecord,
    scene_seed: u64,
    profile: Option<usize>,
}

/// Write the corpus (`videos/*.nvt` + `manifest.jsonl`) under `out_dir`.
/// Two builds with the same config produce identical bytes.
pub fn build_corpus(cfg: &CorpusConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let videos_dir = out_dir.join("videos");
    fs::create_dir_all(&videos_dir).map_err(|e| CoreError::io(&videos_dir, e))?;

    let mut jobs: Vec<VideoJob> = Vec::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        let split_name = match split {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        };
        for i in 0..cfg.reals.get(split) {
            let vid_seed = mix_seed(cfg.seed, hash_label(&format!("real/{split_name}/{i}")));
            let (h, w) = pick(&cfg.real_resolutions, mix_seed(vid_seed, 1));
            let frames = frames_in(cfg.real_frames, mix_seed(vid_seed, 2));
            let id = format!("{split_name}_real_{i:04}");
            jobs.push(VideoJob {
                record: ManifestRecord {
                    id: id.clone(),
                    path: format!("videos/{id}.nvt"),
                    label: Label::Real,
                    generator: "real".into(),
                    split,
                    width: w as u32,
                    height: h as u32,
                    fps: cfg.real_fps,
                    frames: frames as u32,
                    quality: None,
                },
                scene_seed: vid_seed,
                profile: None,
            });
        }
        for (pi, profile) in cfg.profiles.iter().enumerate() {
            for i in 0..cfg.fakes_per_profile.get(split) {
                let vid_seed = mix_seed(
                    cfg.seed,
                    hash_label(&format!("{}/{split_name}/{i}", profile.name)),
                );
                let (h, w) = pick(&profile.resolutions, mix_seed(vid_seed, 1));
                let frames = frames_in(profile.frames, mix_seed(vid_seed, 2));
                let id = format!("{split_name}_{}_{i:04}", profile.name);
                jobs.push(VideoJob {
                    record: ManifestRecord {
                        id: id.clone(),
                        path: format!("videos/{id}.nvt"),
                        label: Label::Generated,
                        generator: profile.name.clone(),
                        split,
                        width: w as u32,
                        height: h as u32,
                        fps: profile.fps,
                        frames: frames as u32,
                        quality: Some(profile.quality),
                    },
                    scene_seed: vid_seed,
                    profile: Some(pi),
                });
            }
        }
    }

    jobs.par_iter().try_for_each(|job| -> Result<()> {
        let r = &job.record;
        let scene = SceneParams::from_seed(job.scene_seed, r.height as usize, r.width as usize);
        let video = match job.profile {
            None => gen_real(
                &scene,
                r.height as usize,
                r.width as usize,
                r.frames as usize,
                r.fps,
            ),
            Some(pi) => gen_fake(
                &scene,
                &cfg.profiles[pi],
                r.height as usize,
                r.width as usize,
                r.frames as usize,
                r.fps,
            ),
        };
        save_nvt(&out_dir.join(&r.path), &video, r.fps)
    })?;

    let records: Vec<ManifestRecord> = jobs.into_iter().map(|j| j.record).collect();
    save_manifest(&out_dir.join("manifest.jsonl"), &records)?;
    Ok(DatasetManifest {
        records,
        base_dir: out_dir.to_path_buf(),
    })
}

// ---------------------------------------------------------------------------
// Preset corpora
// ---------------------------------------------------------------------------

fn low_res_mix() -> Vec<(usize, usize)> {
    vec![
        (112, 112),
        (96, 128),
        (128, 96),
        (112, 144),
        (144, 112),
        (128, 128),
        (96, 112),
        (160, 112),
    ]
}

fn profile_base(name: &str, quality: f64) -> GeneratorProfile {
    GeneratorProfile {
        name: name.into(),
        quality,
        grid_period: 4,
        grid_amp_max: 0.20,
        blur_sigma_max: 2.0,
        flicker_amp_max: 0.20,
        flicker_period_s: 2.5,
        flicker_regional: false,
        ring_mix_max: 0.9,
        ring_factor: 2,
        resolutions: low_res_mix(),
        frames: (9, 12),
        fps: 2.0,
    }
}

impl CorpusConfig {
    /// The default corpus: four artifact families at mixed qualities over
    /// mixed low resolutions; ≈400 train / ≈100 val / ≈100 test videos.
    pub fn default_desk(seed: u64) -> Self {
        let mut mosaic = profile_base("mosaic", 0.35);
        mosaic.blur_sigma_max = 0.6;
        mosaic.flicker_amp_max = 0.06;
        mosaic.ring_mix_max = 0.3;

        let mut softcast = profile_base("softcast", 0.5);
        softcast.grid_amp_max = 0.05;
        softcast.blur_sigma_max = 2.4;
        softcast.flicker_amp_max = 0.06;
        softcast.ring_mix_max = 0.3;

        let mut strobe = profile_base("strobe", 0.5);
        strobe.grid_amp_max = 0.05;
        strobe.blur_sigma_max = 0.5;
        strobe.flicker_amp_max = 0.30;
        strobe.ring_mix_max = 0.2;

        let mut alias = profile_base("alias", 0.6);
        alias.grid_amp_max = 0.06;
        alias.blur_sigma_max = 0.4;
        alias.flicker_amp_max = 0.05;
        alias.ring_mix_max = 0.95;

        CorpusConfig {
            seed,
            profiles: vec![mosaic, softcast, strobe, alias],
            reals: SplitCounts {
                train: 200,
                val: 52,
                test: 52,
            },
            fakes_per_profile: SplitCounts {
                train: 50,
                val: 13,
                test: 13,
            },
            real_resolutions: low_res_mix(),
            real_frames: (9, 12),
            real_fps: 2.0,
        }
    }

    /// High-resolution sources whose fakes carry fine-grained artifacts — a
    /// grid at a 4 px period plus down-up resampling — so downscaling
    /// preprocessing measurably hurts. Quality ladder gives a hardness
    /// spectrum.
    pub fn high_res_artifacts(seed: u64) -> Self {
        // wide aspect ratios make cropped pipelines discard real evidence;
        // one class sits above the 448² budget so the two dynamic ranges
        // can differ
        let resolutions = vec![
            (308, 616),
            (280, 560),
            (252, 560),
            (294, 588),
            (280, 616),
        ];
        let profiles = [0.40, 0.60, 0.75]
            .iter()
            .enumerate()
            .map(|(i, &q)| {
                let mut p = profile_base(&format!("finegrain{i}"), q);
                p.grid_amp_max = 0.16;
                p.blur_sigma_max = 0.8;
                p.flicker_amp_max = 0.18;
                p.flicker_regional = true;
                p.ring_mix_max = 0.9;
                p.ring_factor = 4;
                p.resolutions = resolutions.clone();
                p.frames = (5, 6);
                p
            })
            .collect();
        CorpusConfig {
            seed,
            profiles,
            reals: SplitCounts {
                train: 75,
                val: 21,
                test: 60,
            },
            fakes_per_profile: SplitCounts {
                train: 25,
                val: 7,
                test: 20,
            },
            real_resolutions: resolutions,
            real_frames: (5, 6),
            real_fps: 2.0,
        }
    }

    /// Flicker-dominant fakes on longer low-resolution clips; more sampled
    /// frames expose more of the luminance oscillation.
    pub fn flicker_dominant(seed: u64) -> Self {
        let profiles = [0.35, 0.55, 0.75]
            .iter()
            .enumerate()
            .map(|(i, &q)| {
                let mut p = profile_base(&format!("strobe{i}"), q);
                p.grid_amp_max = 0.0;
                p.blur_sigma_max = 0.0;
                p.ring_mix_max = 0.0;
                p.flicker_amp_max = 0.15;
                p.flicker_period_s = 2.5;
                p.frames = (18, 22);
                p
            })
            .collect();
        CorpusConfig {
            seed,
            profiles,
            reals: SplitCounts {
                train: 60,
                val: 21,
                test: 30,
            },
            fakes_per_profile: SplitCounts {
                train: 20,
                val: 7,
                test: 10,
            },
            real_resolutions: low_res_mix(),
            real_frames: (18, 22),
            real_fps: 2.0,
        }
    }

    /// Four profiles sharing one artifact family across a quality ladder,
    /// for the cross-generator recall/quality correlation study.
    pub fn quality_ladder(seed: u64) -> Self {
        let qualities = [0.35, 0.55, 0.70, 0.85];
        let grid_periods = [3usize, 4, 5, 6];
        let blur = [1.3, 1.5, 1.7, 1.9];
        let flick = [2.0, 2.5, 3.0, 3.5];
        let profiles = (0..4)
            .map(|i| {
                let mut p = profile_base(&format!("blend{}", (qualities[i] * 100.0) as u32), qualities[i]);
                p.grid_period = grid_periods[i];
                p.grid_amp_max = 0.16;
                p.blur_sigma_max = blur[i];
                p.flicker_amp_max = 0.14;
                p.flicker_period_s = flick[i];
                p.ring_mix_max = 0.5;
                p
            })
            .collect();
        CorpusConfig {
            seed,
            profiles,
            reals: SplitCounts {
                train: 60,
                val: 20,
                test: 40,
            },
            fakes_per_profile: SplitCounts {
                train: 60,
                val: 20,
                test: 40,
            },
            real_resolutions: low_res_mix(),
            real_frames: (9, 12),
            real_fps: 2.0,
        }
    }
}
