//! Perturbation study: degrade evaluation videos with JPEG-style block
//! compression, spatial rescaling, or center cropping, and report accuracy
//! relative to the clean run.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{CoreError, Result};
use crate::ingest::{load_nvt, resize_bilinear, DatasetManifest, Label, Split, VideoTensor, CHANNELS};
use crate::metrics::accuracy;
use crate::pipeline::predict;

/// ITU T.81 Annex K luminance quantization table.
const LUMA_QUANT: [f64; 64] = [
    16.0, 11.0, 10.0, 16.0, 24.0, 40.0, 51.0, 61.0, //
    12.0, 12.0, 14.0, 19.0, 26.0, 58.0, 60.0, 55.0, //
    14.0, 13.0, 16.0, 24.0, 40.0, 57.0, 69.0, 56.0, //
    14.0, 17.0, 22.0, 29.0, 51.0, 87.0, 80.0, 62.0, //
    18.0, 22.0, 37.0, 56.0, 68.0, 109.0, 103.0, 77.0, //
    24.0, 35.0, 55.0, 64.0, 81.0, 104.0, 113.0, 92.0, //
    49.0, 64.0, 78.0, 87.0, 103.0, 121.0, 120.0, 101.0, //
    72.0, 92.0, 95.0, 98.0, 112.0, 100.0, 103.0, 99.0,
];

/// Scaled table per the quality rule: S = 5000/q below 50, else 200 − 2q.
/// The DC step is pinned to 1 so constant blocks reconstruct exactly at
/// every quality.
fn scaled_quant_table(quality: u8) -> [f64; 64] {
    let q = quality.clamp(1, 100) as f64;
    let scale = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    let mut table = [1.0f64; 64];
    for (i, t) in table.iter_mut().enumerate() {
        *t = ((LUMA_QUANT[i] * scale + 50.0) / 100.0).floor().clamp(1.0, 255.0);
    }
    table[0] = 1.0;
    table
}

/// Orthonormal 8-point DCT-II basis, row u = C(u)·cos((2n+1)uπ/16).
fn dct_basis() -> [[f64; 8]; 8] {
    let mut b = [[0.0; 8]; 8];
    for (u, row) in b.iter_mut().enumerate() {
        let c = if u == 0 {
            (1.0f64 / 8.0).sqrt()
        } else {
            (2.0f64 / 8.0).sqrt()
        };
        for (n, v) in row.iter_mut().enumerate() {
            *v = c * ((2 * n + 1) as f64 * u as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    b
}

/// Per-channel 8×8 block DCT, quantize, dequantize, inverse DCT, clip.
/// Input values are snapped to the 8-bit grid first (JPEG operates on
/// 8-bit samples); edge blocks replicate border pixels. No chroma
/// subsampling.
pub fn jpeg_like_frame(frame: &mut [f32], height: usize, width: usize, quality: u8) {
    let table = scaled_quant_table(quality);
    let basis = dct_basis();
    let bh = height.div_ceil(8);
    let bw = width.div_ceil(8);
    let mut block = [0.0f64; 64];
    let mut coef = [0.0f64; 64];
    let mut tmp = [0.0f64; 64];
    for c in 0..CHANNELS {
        for by in 0..bh {
            for bx in 0..bw {
                for y in 0..8 {
                    let sy = (by * 8 + y).min(height - 1);
                    for x in 0..8 {
                        let sx = (bx * 8 + x).min(width - 1);
                        let v = frame[(sy * width + sx) * CHANNELS + c] as f64;
                        block[y * 8 + x] = (v * 255.0).round().clamp(0.0, 255.0) - 128.0;
                    }
                }
                // coef = B · block · Bᵀ
                for u in 0..8 {
                    for x in 0..8 {
                        let mut s = 0.0;
                        for y in 0..8 {
                            s += basis[u][y] * block[y * 8 + x];
                        }
                        tmp[u * 8 + x] = s;
                    }
                }
                for u in 0..8 {
                    for v in 0..8 {
                        let mut s = 0.0;
                        for x in 0..8 {
                            s += tmp[u * 8 + x] * basis[v][x];
                        }
                        let q = table[u * 8 + v];
                        coef[u * 8 + v] = (s / q).round() * q;
                    }
                }
                // block = Bᵀ · coef · B
                for y in 0..8 {
                    for v in 0..8 {
                        let mut s = 0.0;
                        for u in 0..8 {
                            s += basis[u][y] * coef[u * 8 + v];
                        }
                        tmp[y * 8 + v] = s;
                    }
                }
                for y in 0..8 {
                    let sy = by * 8 + y;
                    if sy >= height {
                        continue;
                    }
                    for x in 0..8 {
                        let sx = bx * 8 + x;
                        if sx >= width {
                            continue;
                        }
                        let mut s = 0.0;
                        for v in 0..8 {
                            s += tmp[y * 8 + v] * basis[v][x];
                        }
                        let val = ((s + 128.0) / 255.0).clamp(0.0, 1.0);
                        frame[(sy * width + sx) * CHANNELS + c] = val as f32;
                    }
                }
            }
        }
    }
}

pub fn jpeg_like(video: &VideoTensor, quality: u8) -> Result<VideoTensor> {
    if !(1..=100).contains(&quality) {
        return Err(CoreError::Config(format!(
            "jpeg quality {quality} outside [1,100]"
        )));
    }
    let mut out = video.clone();
    let (h, w) = (out.height, out.width);
    let fz = h * w * CHANNELS;
    let frames = out.frames;
    let data = out.data_mut();
    for t in 0..frames {
        jpeg_like_frame(&mut data[t * fz..(t + 1) * fz], h, w, quality);
    }
    Ok(out)
}

pub fn spatial_scale(video: &VideoTensor, scale: f64) -> Result<VideoTensor> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(CoreError::Config(format!("scale {scale} outside (0,1]")));
    }
    let nh = (video.height as f64 * scale).floor() as usize;
    let nw = (video.width as f64 * scale).floor() as usize;
    if nh < 32 || nw < 32 {
        return Err(CoreError::Config(format!(
            "scaled size {nh}x{nw} below the 32 px floor"
        )));
    }
    resize_bilinear(video, nh, nw)
}

pub fn center_crop(video: &VideoTensor, factor: f64) -> Result<VideoTensor> {
    if !(0.0..0.5).contains(&factor) {
        return Err(CoreError::Config(format!(
            "crop factor {factor} outside [0, 0.5)"
        )));
    }
    let dy = (video.height as f64 * factor).floor() as usize;
    let dx = (video.width as f64 * factor).floor() as usize;
    let nh = video.height - 2 * dy;
    let nw = video.width - 2 * dx;
    if nh < 32 || nw < 32 {
        return Err(CoreError::Config(format!(
            "cropped size {nh}x{nw} below the 32 px floor"
        )));
    }
    let mut out = VideoTensor::zeros(video.frames, nh, nw);
    for t in 0..video.frames {
        for y in 0..nh {
            for x in 0..nw {
                for c in 0..CHANNELS {
                    out.set(t, y, x, c, video.at(t, y + dy, x + dx, c));
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Perturbation {
    Identity,
    Jpeg { quality: u8 },
    Resize { scale: f64 },
    Crop { factor: f64 },
}

impl Perturbation {
    pub fn kind(&self) -> &'static str {
        match self {
            Perturbation::Identity => "identity",
            Perturbation::Jpeg { .. } => "jpeg",
            Perturbation::Resize { .. } => "resize",
            Perturbation::Crop { .. } => "crop",
        }
    }

    pub fn parameter(&self) -> f64 {
        match self {
            Perturbation::Identity => 1.0,
            Perturbation::Jpeg { quality } => *quality as f64,
            Perturbation::Resize { scale } => *scale,
            Perturbation::Crop { factor } => *factor,
        }
    }

    pub fn apply(&self, video: &VideoTensor) -> Result<VideoTensor> {
        match self {
            Perturbation::Identity => Ok(video.clone()),
            Perturbation::Jpeg { quality } => jpeg_like(video, *quality),
            Perturbation::Resize { scale } => spatial_scale(video, *scale),
            Perturbation::Crop { factor } => center_crop(video, *factor),
        }
    }
}

/// The documented sweep: identity, JPEG {90,70,50,30}, scales
/// {0.8,0.6,0.4,0.2}, crops {0.05,0.15,0.25,0.35}. H.264 is out of scope
/// (external codec); its column is deliberately absent.
pub fn default_grid() -> Vec<Perturbation> {
    let mut grid = vec![Perturbation::Identity];
    for quality in [90u8, 70, 50, 30] {
        grid.push(Perturbation::Jpeg { quality });
    }
    for scale in [0.8, 0.6, 0.4, 0.2] {
        grid.push(Perturbation::Resize { scale });
    }
    for factor in [0.05, 0.15, 0.25, 0.35] {
        grid.push(Perturbation::Crop { factor });
    }
    grid
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CurvePoint {
    pub kind: String,
    pub parameter: f64,
    pub clean_acc: f64,
    pub perturbed_acc: f64,
    pub relative_acc: f64,
}

pub fn curve_to_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("kind,parameter,clean_acc,perturbed_acc,relative_acc\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{:.4},{:.4},{:.6}\n",
            p.kind, p.parameter, p.clean_acc, p.perturbed_acc, p.relative_acc
        ));
    }
    out
}

/// Relative-accuracy sweep: each perturbed video re-enters the standard
/// prediction pipeline as a fresh input. The identity point reuses the
/// clean scores, so its relative accuracy is exactly 1.
pub fn robustness_curve(
    ckpt: &Checkpoint,
    manifest: &DatasetManifest,
    split: Split,
    grid: &[Perturbation],
    threshold: f64,
) -> Result<Vec<CurvePoint>> {
    let records: Vec<_> = manifest.split(split).collect();
    if records.is_empty() {
        return Err(CoreError::EmptySplit(format!("{split:?}")));
    }
    for p in grid {
        p.apply(&VideoTensor::zeros(1, 64, 64))?; // validate parameters up front
    }
    let labels: Vec<Label> = records.iter().map(|r| r.label).collect();
    let clean_scores: Vec<f64> = records
        .par_iter()
        .map(|r| {
            let (video, fps) = load_nvt(&manifest.resolve(r))?;
            predict(&video, fps, ckpt, None)
        })
        .collect::<Result<_>>()?;
    let clean_acc = accuracy(&clean_scores, &labels, threshold)?;
    if clean_acc == 0.0 {
        return Err(CoreError::Contract(
            "clean accuracy is 0; relative curves undefined".into(),
        ));
    }
    let mut points = Vec::with_capacity(grid.len());
    for p in grid {
        let perturbed_acc = if matches!(p, Perturbation::Identity) {
            clean_acc
        } else {
            let scores: Vec<f64> = records
                .par_iter()
                .map(|r| {
                    let (video, fps) = load_nvt(&manifest.resolve(r))?;
                    let degraded = p.apply(&video)?;
                    predict(&degraded, fps, ckpt, None)
                })
                .collect::<Result<_>>()?;
            accuracy(&scores, &labels, threshold)?
        };
        points.push(CurvePoint {
            kind: p.kind().to_string(),
            parameter: p.parameter(),
            clean_acc,
            perturbed_acc,
            relative_acc: perturbed_acc / clean_acc,
        });
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_video(seed: u64, t: usize, h: usize, w: usize) -> VideoTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = VideoTensor::zeros(t, h, w);
        for x in v.data_mut() {
            *x = rng.random_range(0..256u32) as f32 / 255.0;
        }
        v
    }

    #[test]
    fn constant_frames_round_trip_exactly_at_any_quality() {
        for quality in [1u8, 10, 50, 75, 100] {
            for value in [0.0f32, 37.0 / 255.0, 128.0 / 255.0, 1.0] {
                let v = VideoTensor::new(1, 16, 24, vec![value; 16 * 24 * 3]).unwrap();
                let out = jpeg_like(&v, quality).unwrap();
                assert_eq!(out, v, "q={quality} value={value}");
            }
        }
    }

    #[test]
    fn quality_100_is_near_lossless() {
        let v = random_video(3, 2, 24, 32);
        let out = jpeg_like(&v, 100).unwrap();
        let worst = v
            .data()
            .iter()
            .zip(out.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(worst <= 2.0 / 255.0, "worst pixel error {worst}");
    }

    /// Energy of value jumps across 8×8 block boundaries minus the energy
    /// of jumps inside blocks; grows as quantization gets coarser.
    fn blockiness(v: &VideoTensor) -> f64 {
        let mut boundary = 0.0;
        let mut interior = 0.0;
        let (mut nb, mut ni) = (0usize, 0usize);
        for y in 0..v.height {
            for x in 1..v.width {
                let d = (v.at(0, y, x, 0) - v.at(0, y, x - 1, 0)) as f64;
                if x % 8 == 0 {
                    boundary += d * d;
                    nb += 1;
                } else {
                    interior += d * d;
                    ni += 1;
                }
            }
        }
        boundary / nb as f64 - interior / ni as f64
    }

    #[test]
    fn block_artifacts_grow_as_quality_drops() {
        // smooth gradient input: blockiness emerges from quantization
        let mut v = VideoTensor::zeros(1, 64, 64);
        for y in 0..64 {
            for x in 0..64 {
                for c in 0..3 {
                    v.set(0, y, x, c, 0.2 + 0.6 * (x as f32 + y as f32) / 128.0);
                }
            }
        }
        let b90 = blockiness(&jpeg_like(&v, 90).unwrap());
        let b30 = blockiness(&jpeg_like(&v, 30).unwrap());
        assert!(
            b30 > b90,
            "blockiness should grow 90→30: q90 {b90}, q30 {b30}"
        );
    }

    #[test]
    fn second_application_changes_less_than_first() {
        let v = random_video(9, 1, 32, 32);
        for quality in [90u8, 50] {
            let once = jpeg_like(&v, quality).unwrap();
            let twice = jpeg_like(&once, quality).unwrap();
            let d1: f64 = v
                .data()
                .iter()
                .zip(once.data())
                .map(|(a, b)| (a - b).abs() as f64)
                .sum();
            let d2: f64 = once
                .data()
                .iter()
                .zip(twice.data())
                .map(|(a, b)| (a - b).abs() as f64)
                .sum();
            assert!(d2 <= d1, "q={quality}: second pass moved {d2} vs first {d1}");
        }
    }

    #[test]
    fn identity_parameters_leave_video_unchanged() {
        let v = random_video(4, 2, 40, 48);
        assert_eq!(spatial_scale(&v, 1.0).unwrap(), v);
        assert_eq!(center_crop(&v, 0.0).unwrap(), v);
        assert_eq!(Perturbation::Identity.apply(&v).unwrap(), v);
    }

    #[test]
    fn quarter_crop_takes_central_region() {
        let v = random_video(5, 1, 100, 200);
        let out = center_crop(&v, 0.25).unwrap();
        assert_eq!((out.height, out.width), (50, 100));
        for y in 0..50 {
            for x in 0..100 {
                assert_eq!(out.at(0, y, x, 1), v.at(0, y + 25, x + 50, 1));
            }
        }
    }

    #[test]
    fn undersized_outputs_are_parameter_errors() {
        let v = random_video(6, 1, 64, 64);
        assert!(spatial_scale(&v, 0.2).is_err()); // 12 px < 32
        assert!(center_crop(&v, 0.4).is_err()); // 12 px < 32
        assert!(jpeg_like(&v, 0).is_err());
    }

    #[test]
    fn perturbations_stay_in_unit_range() {
        let v = random_video(7, 2, 40, 40);
        for p in default_grid() {
            if let Ok(out) = p.apply(&v) {
                assert!(out.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
            }
        }
    }
}
