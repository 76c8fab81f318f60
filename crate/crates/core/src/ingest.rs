//! Video loading and preprocessing: aspect-preserving resolution selection,
//! 2 fps temporal sampling, bilinear resizing, and the on-disk formats
//! (`.nvt` raw video containers and JSON-Lines dataset manifests).

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const CHANNELS: usize = 3;

/// Raw decoded video: T×H×W×3 intensities in [0,1], frame-major.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTensor {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    data: Vec<f32>,
}

impl VideoTensor {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 {
            return Err(CoreError::Contract(format!(
                "video dimensions must be positive, got {frames}x{height}x{width}"
            )));
        }
        if data.len() != frames * height * width * CHANNELS {
            return Err(CoreError::Contract(format!(
                "video data length {} does not match {frames}x{height}x{width}x{CHANNELS}",
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(CoreError::Contract(
                "video intensities must lie in [0,1]".into(),
            ));
        }
        Ok(VideoTensor {
            frames,
            height,
            width,
            data,
        })
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        VideoTensor {
            frames,
            height,
            width,
            data: vec![0.0; frames * height * width * CHANNELS],
        }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, t: usize, y: usize, x: usize, c: usize) -> f32 {
        self.data[((t * self.height + y) * self.width + x) * CHANNELS + c]
    }

    #[inline]
    pub fn set(&mut self, t: usize, y: usize, x: usize, c: usize, v: f32) {
        self.data[((t * self.height + y) * self.width + x) * CHANNELS + c] = v;
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let fz = self.height * self.width * CHANNELS;
        &self.data[t * fz..(t + 1) * fz]
    }

    /// New video made of the given source frame indices (may repeat).
    pub fn select_frames(&self, indices: &[usize]) -> Self {
        let fz = self.height * self.width * CHANNELS;
        let mut data = Vec::with_capacity(indices.len() * fz);
        for &i in indices {
            data.extend_from_slice(&self.data[i * fz..(i + 1) * fz]);
        }
        VideoTensor {
            frames: indices.len(),
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn clamp_unit(&mut self) {
        for v in self.data.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

/// Per-frame pixel budget for native-scale resizing; sides snap to
/// multiples of `factor` (the spatial patch side).
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct ResolutionPolicy {
    pub min_pixels: usize,
    pub max_pixels: usize,
    pub factor: usize,
}

impl ResolutionPolicy {
    pub fn new(min_pixels: usize, max_pixels: usize, factor: usize) -> Result<Self> {
        if min_pixels == 0 || min_pixels > max_pixels || factor == 0 {
            return Err(CoreError::Config(format!(
                "invalid resolution policy (min={min_pixels}, max={max_pixels}, factor={factor})"
            )));
        }
        Ok(ResolutionPolicy {
            min_pixels,
            max_pixels,
            factor,
        })
    }

    /// The 224p–720p budget used for native-scale runs.
    pub fn paper_default() -> Self {
        ResolutionPolicy {
            min_pixels: 224 * 224,
            max_pixels: 720 * 720,
            factor: 14,
        }
    }
}

fn round_multiple(v: f64, factor: usize) -> usize {
    let f = factor as f64;
    ((v / f).round() as usize) * factor
}

fn floor_multiple(v: f64, factor: usize) -> usize {
    let f = factor as f64;
    ((v / f).floor() as usize) * factor
}

fn ceil_multiple(v: f64, factor: usize) -> usize {
    let f = factor as f64;
    ((v / f).ceil() as usize) * factor
}

/// Largest aspect-preserving resolution inside the pixel budget, with both
/// sides multiples of `policy.factor`. Rounds each side to the nearest
/// multiple first; if the product leaves the budget, rescales from the
/// original sides by β = √(h·w/max) (floor) or β = √(min/(h·w)) (ceil).
pub fn smart_resize(h: usize, w: usize, policy: &ResolutionPolicy) -> Result<(usize, usize)> {
    if h == 0 || w == 0 {
        return Err(CoreError::Contract("smart_resize: zero input side".into()));
    }
    let f = policy.factor;
    let infeasible = || CoreError::InfeasibleResize {
        height: h,
        width: w,
        min_pixels: policy.min_pixels,
        max_pixels: policy.max_pixels,
        factor: f,
    };
    let hb = round_multiple(h as f64, f).max(f);
    let wb = round_multiple(w as f64, f).max(f);
    let area = hb * wb;
    let (hh, ww) = if area > policy.max_pixels {
        let beta = ((h * w) as f64 / policy.max_pixels as f64).sqrt();
        let hh = floor_multiple(h as f64 / beta, f);
        let ww = floor_multiple(w as f64 / beta, f);
        if hh == 0 || ww == 0 {
            return Err(infeasible());
        }
        (hh, ww)
    } else if area < policy.min_pixels {
        let beta = (policy.min_pixels as f64 / (h * w) as f64).sqrt();
        (
            ceil_multiple(h as f64 * beta, f),
            ceil_multiple(w as f64 * beta, f),
        )
    } else {
        (hb, wb)
    };
    if hh * ww > policy.max_pixels || hh * ww < policy.min_pixels {
        return Err(infeasible());
    }
    Ok((hh, ww))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    /// Uniformly random start among the valid windows (training).
    Random,
    /// Centered window (evaluation).
    Center,
}

/// Decimate to `target_fps` by nearest-index selection, then take `t_out`
/// consecutive decimated frames. Short videos repeat their last frame.
pub fn resample_frames(
    video: &VideoTensor,
    source_fps: f64,
    target_fps: f64,
    t_out: usize,
    mode: SampleMode,
    seed: u64,
) -> Result<VideoTensor> {
    if target_fps <= 0.0 || source_fps <= 0.0 {
        return Err(CoreError::Config(format!(
            "fps must be positive (source {source_fps}, target {target_fps})"
        )));
    }
    if t_out == 0 {
        return Err(CoreError::Config("resample_frames: T must be ≥ 1".into()));
    }
    let ratio = source_fps / target_fps;
    let mut decimated = Vec::new();
    let mut k = 0usize;
    loop {
        let idx = (k as f64 * ratio).round() as usize;
        if idx >= video.frames {
            break;
        }
        decimated.push(idx);
        k += 1;
    }
    if decimated.is_empty() {
        decimated.push(video.frames - 1);
    }
    let m = decimated.len();
    let chosen: Vec<usize> = if m >= t_out {
        let start = match mode {
            SampleMode::Center => (m - t_out) / 2,
            SampleMode::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.random_range(0..=m - t_out)
            }
        };
        decimated[start..start + t_out].to_vec()
    } else {
        let mut v = decimated.clone();
        while v.len() < t_out {
            v.push(*v.last().unwrap());
        }
        v
    };
    Ok(video.select_frames(&chosen))
}

/// Per-axis triangle-filter taps at half-pixel centers. The support widens
/// by the downscale factor (antialiасed resize, as production bilinear
/// resizers do); at scale ≤ 1 it is exactly the classic two-tap bilinear.
fn triangle_taps(src: usize, dst: usize) -> Vec<(usize, Vec<f32>)> {
    let scale = src as f64 / dst as f64;
    let support = scale.max(1.0);
    let mut taps = Vec::with_capacity(dst);
    for o in 0..dst {
        let center = (o as f64 + 0.5) * scale - 0.5;
        let lo = (center - support).ceil() as isize;
        let hi = (center + support).floor() as isize;
        let mut start = usize::MAX;
        let mut weights: Vec<f64> = Vec::new();
        let mut sum = 0.0;
        for i in lo..=hi {
            let t = ((i as f64 - center) / support).abs();
            if t >= 1.0 {
                continue;
            }
            let w = 1.0 - t;
            let idx = i.clamp(0, src as isize - 1) as usize;
            if start == usize::MAX {
                start = idx;
                weights.push(w);
            } else if idx < start + weights.len() {
                // clamped edge pixels merge their weight
                *weights.last_mut().unwrap() += w;
            } else {
                weights.push(w);
            }
            sum += w;
        }
        let weights = weights.into_iter().map(|w| (w / sum) as f32).collect();
        taps.push((start, weights));
    }
    taps
}

/// Per-frame separable bilinear interpolation with half-pixel centers;
/// downscaling low-passes with a matched triangle kernel.
pub fn resize_bilinear(video: &VideoTensor, new_h: usize, new_w: usize) -> Result<VideoTensor> {
    if new_h == 0 || new_w == 0 {
        return Err(CoreError::Contract("resize to zero side".into()));
    }
    let (h, w) = (video.height, video.width);
    if (new_h, new_w) == (h, w) {
        return Ok(video.clone());
    }
    let x_taps = triangle_taps(w, new_w);
    let y_taps = triangle_taps(h, new_h);
    let mut out = VideoTensor::zeros(video.frames, new_h, new_w);
    let mut row_pass = vec![0.0f32; h * new_w * CHANNELS];
    for t in 0..video.frames {
        for y in 0..h {
            for (ox, (start, weights)) in x_taps.iter().enumerate() {
                for c in 0..CHANNELS {
                    let mut acc = 0.0f32;
                    for (k, &wt) in weights.iter().enumerate() {
                        let sx = (start + k).min(w - 1);
                        acc += wt * video.at(t, y, sx, c);
                    }
                    row_pass[(y * new_w + ox) * CHANNELS + c] = acc;
                }
            }
        }
        for (oy, (start, weights)) in y_taps.iter().enumerate() {
            for ox in 0..new_w {
                for c in 0..CHANNELS {
                    let mut acc = 0.0f32;
                    for (k, &wt) in weights.iter().enumerate() {
                        let sy = (start + k).min(h - 1);
                        acc += wt * row_pass[(sy * new_w + ox) * CHANNELS + c];
                    }
                    out.set(t, oy, ox, c, acc.clamp(0.0, 1.0));
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// .nvt raw video container
// ---------------------------------------------------------------------------

const NVT_MAGIC: &[u8; 4] = b"NVT1";

#[derive(Serialize, Deserialize)]
struct NvtHeader {
    #[serde(rename = "T")]
    t: usize,
    #[serde(rename = "H")]
    h: usize,
    #[serde(rename = "W")]
    w: usize,
    #[serde(rename = "C")]
    c: usize,
    fps: f64,
}

/// Write a video as magic + length-prefixed JSON header + raw 8-bit
/// intensities (÷255 on read). Little-endian throughout.
pub fn save_nvt(path: &Path, video: &VideoTensor, fps: f64) -> Result<()> {
    let header = serde_json::to_vec(&NvtHeader {
        t: video.frames,
        h: video.height,
        w: video.width,
        c: CHANNELS,
        fps,
    })?;
    let mut buf = Vec::with_capacity(8 + header.len() + video.data.len());
    buf.extend_from_slice(NVT_MAGIC);
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend(
        video
            .data
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    fs::write(path, buf).map_err(|e| CoreError::io(path, e))
}

pub fn load_nvt(path: &Path) -> Result<(VideoTensor, f64)> {
    let mut file = fs::File::open(path).map_err(|e| CoreError::io(path, e))?;
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)
        .map_err(|e| CoreError::io(path, e))?;
    if &magic != NVT_MAGIC {
        return Err(CoreError::Integrity {
            path: path.into(),
            message: format!("bad magic {magic:?}, expected NVT1"),
        });
    }
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes)
        .map_err(|e| CoreError::io(path, e))?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_buf = vec![0u8; header_len];
    file.read_exact(&mut header_buf)
        .map_err(|e| CoreError::io(path, e))?;
    let header: NvtHeader = serde_json::from_slice(&header_buf)?;
    if header.c != CHANNELS {
        return Err(CoreError::Integrity {
            path: path.into(),
            message: format!("unsupported channel count {}", header.c),
        });
    }
    let expected = header.t * header.h * header.w * header.c;
    let mut payload = Vec::with_capacity(expected);
    file.read_to_end(&mut payload)
        .map_err(|e| CoreError::io(path, e))?;
    if payload.len() != expected {
        return Err(CoreError::Integrity {
            path: path.into(),
            message: format!("payload is {} bytes, expected {expected}", payload.len()),
        });
    }
    let data = payload.iter().map(|&b| b as f32 / 255.0).collect();
    Ok((
        VideoTensor::new(header.t, header.h, header.w, data)?,
        header.fps,
    ))
}

// ---------------------------------------------------------------------------
// Dataset manifest (JSON Lines)
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Generated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub path: String,
    pub label: Label,
    pub generator: String,
    pub split: Split,
    pub width: u32,
    pub height: u32,
    pub fps: f64,
    pub frames: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    /// Directory record paths are resolved against.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn resolve(&self, record: &ManifestRecord) -> PathBuf {
        self.base_dir.join(&record.path)
    }
}

/// One JSON record per line; unknown fields are ignored, vocabulary and id
/// uniqueness are not.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    let base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut records = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord =
            serde_json::from_str(line).map_err(|e| CoreError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        if !seen.insert(record.id.clone()) {
            return Err(CoreError::Parse {
                line: i + 1,
                message: format!("duplicate id {:?}", record.id),
            });
        }
        if !base_dir.join(&record.path).exists() {
            return Err(CoreError::Parse {
                line: i + 1,
                message: format!("unresolvable path {:?}", record.path),
            });
        }
        records.push(record);
    }
    Ok(DatasetManifest { records, base_dir })
}

pub fn save_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| CoreError::io(path, e))?;
    }
    fs::write(path, out).map_err(|e| CoreError::io(path, e))
}

pub fn load_video(manifest: &DatasetManifest, record: &ManifestRecord) -> Result<VideoTensor> {
    let (video, _fps) = load_nvt(&manifest.resolve(record))?;
    Ok(video)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn policy() -> ResolutionPolicy {
        ResolutionPolicy::paper_default()
    }

    #[test]
    fn smart_resize_keeps_in_budget_input() {
        assert_eq!(smart_resize(224, 224, &policy()).unwrap(), (224, 224));
    }

    #[test]
    fn smart_resize_downscales_1080p_class() {
        let (h, w) = smart_resize(1088, 1920, &policy()).unwrap();
        assert_eq!((h, w), (532, 952));
        assert!(h * w <= 720 * 720);
        assert_eq!(h % 14, 0);
        assert_eq!(w % 14, 0);
    }

    #[test]
    fn smart_resize_rounds_480p_class() {
        assert_eq!(smart_resize(480, 832, &policy()).unwrap(), (476, 826));
    }

    #[test]
    fn smart_resize_infeasible_for_extreme_aspect() {
        let err = smart_resize(1, 4_000_000, &policy()).unwrap_err();
        assert!(matches!(err, CoreError::InfeasibleResize { .. }), "{err}");
    }

    #[test]
    fn resample_center_window() {
        // 16 frames at 2fps source, T=8, center → frames 4..11
        let mut v = VideoTensor::zeros(16, 2, 2);
        for t in 0..16 {
            v.set(t, 0, 0, 0, t as f32 / 255.0);
        }
        let out = resample_frames(&v, 2.0, 2.0, 8, SampleMode::Center, 0).unwrap();
        let picked: Vec<u32> = (0..8).map(|t| (out.at(t, 0, 0, 0) * 255.0).round() as u32).collect();
        assert_eq!(picked, vec![4, 5, 6, 7, 8, 9, 10, 11]);
    }

    #[test]
    fn resample_pads_short_videos_with_last_frame() {
        let mut v = VideoTensor::zeros(4, 2, 2);
        for t in 0..4 {
            v.set(t, 0, 0, 0, t as f32 / 255.0);
        }
        let out = resample_frames(&v, 2.0, 2.0, 8, SampleMode::Center, 0).unwrap();
        let picked: Vec<u32> = (0..8).map(|t| (out.at(t, 0, 0, 0) * 255.0).round() as u32).collect();
        assert_eq!(picked, vec![0, 1, 2, 3, 3, 3, 3, 3]);
    }

    #[test]
    fn resample_random_is_seed_deterministic() {
        let mut v = VideoTensor::zeros(20, 3, 3);
        for t in 0..20 {
            v.set(t, 1, 1, 1, t as f32 / 255.0);
        }
        let a = resample_frames(&v, 4.0, 2.0, 4, SampleMode::Random, 99).unwrap();
        let b = resample_frames(&v, 4.0, 2.0, 4, SampleMode::Random, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bilinear_identity_is_bitexact() {
        let mut v = VideoTensor::zeros(2, 5, 7);
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x = ((i * 37) % 256) as f32 / 255.0;
        }
        let out = resize_bilinear(&v, 5, 7).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn bilinear_preserves_constants() {
        let v = VideoTensor::new(1, 4, 4, vec![0.3125; 4 * 4 * 3]).unwrap();
        let out = resize_bilinear(&v, 9, 5).unwrap();
        for &x in out.data() {
            assert!((x - 0.3125).abs() < 1e-7);
        }
    }

    #[test]
    fn bilinear_checkerboard_center_values() {
        // 2×2 checkerboard upscaled 2×: the four central samples take the
        // closed-form values {0.375, 0.625} and average to exactly 0.5.
        let mut v = VideoTensor::zeros(1, 2, 2);
        for c in 0..3 {
            v.set(0, 0, 1, c, 1.0);
            v.set(0, 1, 0, c, 1.0);
        }
        let out = resize_bilinear(&v, 4, 4).unwrap();
        let center = [
            out.at(0, 1, 1, 0),
            out.at(0, 1, 2, 0),
            out.at(0, 2, 1, 0),
            out.at(0, 2, 2, 0),
        ];
        assert!((center[0] - 0.375).abs() < 1e-6);
        assert!((center[1] - 0.625).abs() < 1e-6);
        assert!((center[2] - 0.625).abs() < 1e-6);
        assert!((center[3] - 0.375).abs() < 1e-6);
        let mean: f32 = center.iter().sum::<f32>() / 4.0;
        assert!((mean - 0.5).abs() < 1e-6);
    }

    #[test]
    fn nvt_round_trip_is_bitexact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.nvt");
        let mut v = VideoTensor::zeros(3, 6, 4);
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x = ((i * 131 + 17) % 256) as f32 / 255.0;
        }
        save_nvt(&path, &v, 2.0).unwrap();
        let (loaded, fps) = load_nvt(&path).unwrap();
        assert_eq!(fps, 2.0);
        assert_eq!(loaded, v);
    }

    #[test]
    fn nvt_truncated_payload_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.nvt");
        let v = VideoTensor::zeros(2, 4, 4);
        save_nvt(&path, &v, 2.0).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let err = load_nvt(&path).unwrap_err();
        assert!(matches!(err, CoreError::Integrity { .. }), "{err}");
    }

    #[test]
    fn empty_manifest_loads_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        fs::write(&path, "").unwrap();
        let m = load_manifest(&path).unwrap();
        assert!(m.records.is_empty());
    }

    #[test]
    fn manifest_rejects_out_of_vocabulary_label() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        fs::write(
            &path,
            r#"{"id":"a","path":"a.nvt","label":"fake","generator":"x","split":"train","width":4,"height":4,"fps":2.0,"frames":2}"#,
        )
        .unwrap();
        let err = load_manifest(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 1") && msg.contains("fake"), "{msg}");
    }

    #[test]
    fn manifest_ignores_unknown_fields_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let video_path = dir.path().join("a.nvt");
        save_nvt(&video_path, &VideoTensor::zeros(2, 4, 4), 2.0).unwrap();
        let path = dir.path().join("manifest.jsonl");
        fs::write(
            &path,
            r#"{"id":"a","path":"a.nvt","label":"generated","generator":"x","split":"test","width":4,"height":4,"fps":2.0,"frames":2,"extra_field":123}"#,
        )
        .unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.records.len(), 1);
        assert_eq!(m.records[0].label, Label::Generated);
    }
}
