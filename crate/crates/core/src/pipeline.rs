//! The preprocessing chain shared by training, prediction, and evaluation:
//! temporal resampling at 2 fps, one of three spatial policies, temporal
//! padding, and identity patchification.

use nvf_tensor::{Real, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{forward_features, stage_params, ModelConfig, ModelParams};
use crate::checkpoint::{Checkpoint, ResolutionMode};
use crate::error::{CoreError, Result};
use crate::ingest::{
    resample_frames, resize_bilinear, smart_resize, ResolutionPolicy, SampleMode, VideoTensor,
};
use crate::packing::{pack, PackedBatch, SampleTag};
use crate::patchify::{patchify, temporal_pad, PatchEmbedder, PatchSequence, PatchSpec};
use crate::util::mix_seed;

#[derive(Clone, Debug)]
pub struct PreprocessSpec {
    pub resolution: ResolutionMode,
    pub frames_t: usize,
    pub target_fps: f64,
    pub patch: PatchSpec,
}

impl PreprocessSpec {
    pub fn new(resolution: ResolutionMode, frames_t: usize, patch: PatchSpec) -> Self {
        PreprocessSpec {
            resolution,
            frames_t,
            target_fps: 2.0,
            patch,
        }
    }
}

fn round_to_multiple_at_least(v: f64, factor: usize) -> usize {
    let m = ((v / factor as f64).round() as usize) * factor;
    m.max(factor)
}

/// Spatial step of the pipeline. Returns the frames to run the model on.
fn apply_resolution(
    video: &VideoTensor,
    mode: &ResolutionMode,
    patch: &PatchSpec,
    sample: SampleMode,
    seed: u64,
) -> Result<VideoTensor> {
    let (h, w) = (video.height, video.width);
    match mode {
        ResolutionMode::Crop224 => {
            let short = h.min(w) as f64;
            let scale = 224.0 / short;
            let nh = ((h as f64 * scale).round() as usize).max(224);
            let nw = ((w as f64 * scale).round() as usize).max(224);
            let resized = resize_bilinear(video, nh, nw)?;
            let (oy, ox) = match sample {
                SampleMode::Center => ((nh - 224) / 2, (nw - 224) / 2),
                SampleMode::Random => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    (
                        rng.random_range(0..=nh - 224),
                        rng.random_range(0..=nw - 224),
                    )
                }
            };
            let mut out = VideoTensor::zeros(resized.frames, 224, 224);
            for t in 0..resized.frames {
                for y in 0..224 {
                    for x in 0..224 {
                        for c in 0..3 {
                            out.set(t, y, x, c, resized.at(t, oy + y, ox + x, c));
                        }
                    }
                }
            }
            Ok(out)
        }
        ResolutionMode::Resize224 => {
            // aspect-preserving resize to the ~224² pixel budget
            let scale = (224.0 * 224.0 / (h * w) as f64).sqrt();
            let nh = round_to_multiple_at_least(h as f64 * scale, patch.ph);
            let nw = round_to_multiple_at_least(w as f64 * scale, patch.pw);
            resize_bilinear(video, nh, nw)
        }
        ResolutionMode::Dynamic {
            min_pixels,
            max_pixels,
        } => {
            if patch.ph != patch.pw {
                return Err(CoreError::Config(
                    "dynamic resolution requires square spatial patches".into(),
                ));
            }
            let policy = ResolutionPolicy::new(*min_pixels, *max_pixels, patch.ph)?;
            let (nh, nw) = smart_resize(h, w, &policy)?;
            if (nh, nw) == (h, w) {
                Ok(video.clone())
            } else {
                resize_bilinear(video, nh, nw)
            }
        }
    }
}

/// Full preprocessing: resample to `target_fps`, pick T frames (random
/// window in training, centered otherwise), apply the spatial policy, pad
/// the temporal axis to the patch size, and patchify with identity
/// embedding (the learned projection applies on the tape).
pub fn preprocess<R: Real>(
    video: &VideoTensor,
    source_fps: f64,
    spec: &PreprocessSpec,
    sample: SampleMode,
    seed: u64,
) -> Result<PatchSequence<R>> {
    let frames = resample_frames(
        video,
        source_fps,
        spec.target_fps,
        spec.frames_t,
        sample,
        mix_seed(seed, 1),
    )?;
    let spatial = apply_resolution(&frames, &spec.resolution, &spec.patch, sample, mix_seed(seed, 2))?;
    let padded = temporal_pad(&spatial, spec.patch.pt);
    patchify(&padded, &spec.patch, &PatchEmbedder::Identity)
}

/// Stable softmax probability of the "generated" logit.
pub fn generated_probability(logit_real: f64, logit_generated: f64) -> f64 {
    let mx = logit_real.max(logit_generated);
    let e0 = (logit_real - mx).exp();
    let e1 = (logit_generated - mx).exp();
    e1 / (e0 + e1)
}

/// Run the full packed forward for one batch and return per-sample
/// (logit_real, logit_generated).
pub fn forward_logits<R: Real>(
    packed: &PackedBatch<R>,
    cfg: &ModelConfig,
    params: &ModelParams<R>,
) -> Result<Vec<(f64, f64)>> {
    let mut tape = Tape::<R>::new();
    let staged = stage_params(&mut tape, params, &|_| false)?;
    let features = forward_features(&mut tape, packed, cfg, &staged)?;
    let mut out = Vec::with_capacity(packed.num_samples());
    for i in 0..packed.num_samples() {
        let logits = crate::train::classify(
            &mut tape,
            features,
            packed.sample_range(i),
            staged.head_w,
            staged.head_b,
        )?;
        let v = tape.value(logits).data();
        out.push((v[0].to_f64(), v[1].to_f64()));
    }
    Ok(out)
}

/// Score one video with a checkpoint: smart resize → central T frames →
/// patchify → backbone → head → P(generated) ∈ [0,1].
pub fn predict(
    video: &VideoTensor,
    source_fps: f64,
    ckpt: &Checkpoint,
    resolution_override: Option<&ResolutionMode>,
) -> Result<f64> {
    let params = ckpt.to_params()?;
    let resolution = resolution_override.unwrap_or(&ckpt.resolution).clone();
    let spec = PreprocessSpec::new(resolution, ckpt.frames_t, ckpt.patch);
    let seq = preprocess::<f32>(video, source_fps, &spec, SampleMode::Center, 0)?;
    let packed = pack(&[(seq, SampleTag::new("predict", None))])?;
    let logits = forward_logits(&packed, &ckpt.config, &params)?;
    Ok(generated_probability(logits[0].0, logits[0].1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;
    use rand::Rng;

    fn random_video(seed: u64, t: usize, h: usize, w: usize) -> VideoTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = VideoTensor::zeros(t, h, w);
        for x in v.data_mut() {
            *x = rng.random_range(0..256u32) as f32 / 255.0;
        }
        v
    }

    fn tiny_checkpoint(seed: u64) -> Checkpoint {
        let mut cfg = ModelConfig::sized(2, 16, 2);
        cfg.window_side = 4;
        let patch = PatchSpec::new(2, 7, 7).unwrap();
        let params = ModelParams::<f32>::init(&cfg, patch.flat_len(), seed).unwrap();
        Checkpoint::from_params(
            &params,
            &cfg,
            &patch,
            &ResolutionMode::Dynamic {
                min_pixels: 14 * 14,
                max_pixels: 128 * 128,
            },
            2,
        )
    }

    #[test]
    fn predict_is_deterministic_and_in_range() {
        let ckpt = tiny_checkpoint(5);
        let video = random_video(1, 6, 28, 42);
        let a = predict(&video, 2.0, &ckpt, None).unwrap();
        let b = predict(&video, 2.0, &ckpt, None).unwrap();
        assert_eq!(a, b);
        assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn random_head_scores_average_near_half() {
        // symmetric random initialization ⇒ scores centered on 0.5
        let ckpt = tiny_checkpoint(11);
        let mut sum = 0.0;
        for i in 0..100 {
            let video = random_video(100 + i, 4, 28, 28);
            sum += predict(&video, 2.0, &ckpt, None).unwrap();
        }
        let mean = sum / 100.0;
        assert!((mean - 0.5).abs() < 0.1, "mean score {mean}");
    }

    #[test]
    fn crop224_yields_exact_sides() {
        let video = random_video(3, 4, 300, 500);
        let spec = PreprocessSpec::new(ResolutionMode::Crop224, 4, PatchSpec::default());
        let seq = preprocess::<f32>(&video, 2.0, &spec, SampleMode::Random, 9).unwrap();
        assert_eq!(seq.source_dims, (4, 224, 224));
        assert_eq!(seq.grid, (2, 16, 16));
    }

    #[test]
    fn resize224_respects_aspect() {
        let video = random_video(4, 4, 300, 600);
        let spec = PreprocessSpec::new(ResolutionMode::Resize224, 4, PatchSpec::default());
        let seq = preprocess::<f32>(&video, 2.0, &spec, SampleMode::Center, 0).unwrap();
        let (_, h, w) = seq.source_dims;
        assert_eq!(h % 14, 0);
        assert_eq!(w % 14, 0);
        let area = (h * w) as f64;
        assert!((area - 224.0 * 224.0).abs() / (224.0 * 224.0) < 0.2);
        let aspect_in = 300.0 / 600.0;
        let aspect_out = h as f64 / w as f64;
        assert!((aspect_in - aspect_out).abs() < 0.1);
    }
}
