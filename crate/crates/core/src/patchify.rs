//! Native-scale 3D patch partitioning: a video becomes N tokens, each the
//! linear embedding of one non-overlapping Pt×Ph×Pw×C block, tagged with its
//! (t, h, w) patch-grid coordinate. The inverse exists for identity
//! embeddings and anchors the round-trip tests.

use nvf_tensor::{Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::ingest::{VideoTensor, CHANNELS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub pt: usize,
    pub ph: usize,
    pub pw: usize,
}

impl Default for PatchSpec {
    fn default() -> Self {
        PatchSpec {
            pt: 2,
            ph: 14,
            pw: 14,
        }
    }
}

impl PatchSpec {
    pub fn new(pt: usize, ph: usize, pw: usize) -> Result<Self> {
        if pt == 0 || ph == 0 || pw == 0 {
            return Err(CoreError::Config("patch sides must be ≥ 1".into()));
        }
        Ok(PatchSpec { pt, ph, pw })
    }

    /// Length of one flattened patch: Pt·Ph·Pw·C.
    pub fn flat_len(&self) -> usize {
        self.pt * self.ph * self.pw * CHANNELS
    }
}

/// Linear projection from flattened patches to the model dimension.
/// `Identity` keeps raw pixels (used by round-trip tests and by the
/// training path, which applies the learned matrix on the gradient tape).
#[derive(Clone, Debug)]
pub enum PatchEmbedder<R: Real> {
    Identity,
    Matrix(Tensor<R>),
}

impl<R: Real> PatchEmbedder<R> {
    pub fn matrix(e: Tensor<R>) -> Self {
        PatchEmbedder::Matrix(e)
    }
}

/// Tokenized video: N×D token block plus per-token patch-grid coordinates.
#[derive(Clone, Debug)]
pub struct PatchSequence<R: Real> {
    pub tokens: Tensor<R>,
    pub coords: Vec<(usize, usize, usize)>,
    /// Patch-grid extents (T/Pt, H/Ph, W/Pw).
    pub grid: (usize, usize, usize),
    /// Source video dimensions (T, H, W).
    pub source_dims: (usize, usize, usize),
}

impl<R: Real> PatchSequence<R> {
    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }
}

/// Repeat the final frame until T is divisible by Pt; a no-op when it
/// already is.
pub fn temporal_pad(video: &VideoTensor, pt: usize) -> VideoTensor {
    let rem = video.frames % pt;
    if rem == 0 {
        return video.clone();
    }
    let extra = pt - rem;
    let mut indices: Vec<usize> = (0..video.frames).collect();
    indices.extend(std::iter::repeat(video.frames - 1).take(extra));
    video.select_frames(&indices)
}

/// Eq: token_i = flatten(block at (tᵢ,hᵢ,wᵢ)) · E. Token order is t-major,
/// then h, then w; within a patch the flattening order is (t, h, w, c).
pub fn patchify<R: Real>(
    video: &VideoTensor,
    spec: &PatchSpec,
    embedder: &PatchEmbedder<R>,
) -> Result<PatchSequence<R>> {
    for (axis, len, p) in [
        ("T", video.frames, spec.pt),
        ("H", video.height, spec.ph),
        ("W", video.width, spec.pw),
    ] {
        if len % p != 0 {
            return Err(CoreError::Contract(format!(
                "patchify: axis {axis} ({len}) not divisible by patch side {p}"
            )));
        }
    }
    let (gt, gh, gw) = (
        video.frames / spec.pt,
        video.height / spec.ph,
        video.width / spec.pw,
    );
    let n = gt * gh * gw;
    let flat = spec.flat_len();
    let mut raw = Vec::with_capacity(n * flat);
    let mut coords = Vec::with_capacity(n);
    for t in 0..gt {
        for h in 0..gh {
            for w in 0..gw {
                coords.push((t, h, w));
                for dt in 0..spec.pt {
                    for dy in 0..spec.ph {
                        for dx in 0..spec.pw {
                            for c in 0..CHANNELS {
                                raw.push(R::from_f64(video.at(
                                    t * spec.pt + dt,
                                    h * spec.ph + dy,
                                    w * spec.pw + dx,
                                    c,
                                ) as f64));
                            }
                        }
                    }
                }
            }
        }
    }
    let raw = Tensor::new(vec![n, flat], raw)?;
    let tokens = match embedder {
        PatchEmbedder::Identity => raw,
        PatchEmbedder::Matrix(e) => {
            if e.rows() != flat {
                return Err(CoreError::Config(format!(
                    "embedding matrix has {} rows, expected {flat}",
                    e.rows()
                )));
            }
            let mut out = vec![R::ZERO; n * e.cols()];
            nvf_tensor::matmul_raw(raw.data(), e.data(), n, flat, e.cols(), &mut out);
            Tensor::new(vec![n, e.cols()], out)?
        }
    };
    Ok(PatchSequence {
        tokens,
        coords,
        grid: (gt, gh, gw),
        source_dims: (video.frames, video.height, video.width),
    })
}

/// Inverse of `patchify` for identity embeddings; tokens may arrive in any
/// order as long as their coordinates are attached.
pub fn unpatchify<R: Real>(seq: &PatchSequence<R>, spec: &PatchSpec) -> Result<VideoTensor> {
    let (gt, gh, gw) = seq.grid;
    let flat = spec.flat_len();
    if seq.dim() != flat {
        return Err(CoreError::Contract(format!(
            "unpatchify needs raw {flat}-length tokens (identity embedding), got {}",
            seq.dim()
        )));
    }
    if seq.len() != gt * gh * gw {
        return Err(CoreError::Contract(format!(
            "unpatchify: {} tokens for a {gt}x{gh}x{gw} grid",
            seq.len()
        )));
    }
    let (t_dim, h_dim, w_dim) = seq.source_dims;
    let mut video = VideoTensor::zeros(t_dim, h_dim, w_dim);
    let mut seen = vec![false; gt * gh * gw];
    for (i, &(t, h, w)) in seq.coords.iter().enumerate() {
        if t >= gt || h >= gh || w >= gw {
            return Err(CoreError::Contract(format!(
                "coordinate ({t},{h},{w}) outside grid {gt}x{gh}x{gw}"
            )));
        }
        let cell = (t * gh + h) * gw + w;
        if seen[cell] {
            return Err(CoreError::Contract(format!(
                "duplicate coordinate ({t},{h},{w})"
            )));
        }
        seen[cell] = true;
        let row = &seq.tokens.data()[i * flat..(i + 1) * flat];
        let mut k = 0;
        for dt in 0..spec.pt {
            for dy in 0..spec.ph {
                for dx in 0..spec.pw {
                    for c in 0..CHANNELS {
                        video.set(
                            t * spec.pt + dt,
                            h * spec.ph + dy,
                            w * spec.pw + dx,
                            c,
                            row[k].to_f64() as f32,
                        );
                        k += 1;
                    }
                }
            }
        }
    }
    if !seen.iter().all(|&s| s) {
        return Err(CoreError::Contract(
            "incomplete coordinate set for unpatchify".into(),
        ));
    }
    Ok(video)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_video(rng: &mut ChaCha8Rng, t: usize, h: usize, w: usize) -> VideoTensor {
        let mut v = VideoTensor::zeros(t, h, w);
        for x in v.data_mut() {
            *x = rng.random_range(0..256u32) as f32 / 255.0;
        }
        v
    }

    #[test]
    fn temporal_pad_cases() {
        let v8 = VideoTensor::zeros(8, 2, 2);
        assert_eq!(temporal_pad(&v8, 2).frames, 8);

        let mut v7 = VideoTensor::zeros(7, 2, 2);
        v7.set(6, 0, 0, 0, 1.0);
        let padded = temporal_pad(&v7, 2);
        assert_eq!(padded.frames, 8);
        assert_eq!(padded.at(7, 0, 0, 0), 1.0);

        let v1 = VideoTensor::zeros(1, 2, 2);
        assert_eq!(temporal_pad(&v1, 2).frames, 2);
    }

    #[test]
    fn patch_counts_and_flat_length() {
        let spec = PatchSpec::default();
        let v = VideoTensor::zeros(2, 28, 28);
        let seq = patchify::<f64>(&v, &spec, &PatchEmbedder::Identity).unwrap();
        assert_eq!(seq.len(), 4);
        assert_eq!(seq.dim(), 2 * 14 * 14 * 3);

        // token count for the 532×952 smart-resize example
        let (gt, gh, gw) = (8 / 2, 532 / 14, 952 / 14);
        assert_eq!(gt * gh * gw, 10336);
    }

    #[test]
    fn identity_embedding_yields_raw_pixels() {
        let spec = PatchSpec::new(1, 2, 2).unwrap();
        let mut v = VideoTensor::zeros(1, 2, 2);
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x = i as f32 / 16.0;
        }
        let seq = patchify::<f64>(&v, &spec, &PatchEmbedder::Identity).unwrap();
        // single patch, (t,h,w,c) flattening equals the frame-major layout here
        let expected: Vec<f64> = v.data().iter().map(|&x| x as f64).collect();
        assert_eq!(seq.tokens.data(), &expected[..]);

        let eye = PatchEmbedder::matrix(Tensor::<f64>::eye(spec.flat_len()));
        let seq2 = patchify::<f64>(&v, &spec, &eye).unwrap();
        assert_eq!(seq2.tokens.data(), seq.tokens.data());
    }

    #[test]
    fn divisibility_violation_names_axis() {
        let spec = PatchSpec::default();
        let v = VideoTensor::zeros(2, 30, 28);
        let err = patchify::<f64>(&v, &spec, &PatchEmbedder::Identity).unwrap_err();
        assert!(err.to_string().contains("axis H"), "{err}");
    }

    #[test]
    fn round_trip_is_bitexact_over_random_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let spec = PatchSpec::new(2, 7, 7).unwrap();
        for _ in 0..10 {
            let t = 2 * rng.random_range(1..4usize);
            let h = 7 * rng.random_range(1..5usize);
            let w = 7 * rng.random_range(1..5usize);
            let v = random_video(&mut rng, t, h, w);
            let seq = patchify::<f32>(&v, &spec, &PatchEmbedder::Identity).unwrap();
            let back = unpatchify(&seq, &spec).unwrap();
            assert_eq!(back, v);
        }
    }

    #[test]
    fn single_patch_round_trips() {
        let spec = PatchSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = random_video(&mut rng, 2, 14, 14);
        let seq = patchify::<f32>(&v, &spec, &PatchEmbedder::Identity).unwrap();
        assert_eq!(seq.len(), 1);
        assert_eq!(unpatchify(&seq, &spec).unwrap(), v);
    }

    #[test]
    fn permuted_tokens_still_reconstruct() {
        let spec = PatchSpec::new(2, 7, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v = random_video(&mut rng, 4, 21, 14);
        let seq = patchify::<f32>(&v, &spec, &PatchEmbedder::Identity).unwrap();
        // reverse the token order, keeping coords attached
        let n = seq.len();
        let flat = seq.dim();
        let mut data = Vec::with_capacity(n * flat);
        for i in (0..n).rev() {
            data.extend_from_slice(&seq.tokens.data()[i * flat..(i + 1) * flat]);
        }
        let permuted = PatchSequence {
            tokens: Tensor::new(vec![n, flat], data).unwrap(),
            coords: seq.coords.iter().rev().cloned().collect(),
            grid: seq.grid,
            source_dims: seq.source_dims,
        };
        assert_eq!(unpatchify(&permuted, &spec).unwrap(), v);
    }

    #[test]
    fn incomplete_coords_rejected() {
        let spec = PatchSpec::new(2, 7, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = random_video(&mut rng, 2, 14, 14);
        let mut seq = patchify::<f32>(&v, &spec, &PatchEmbedder::Identity).unwrap();
        seq.coords[1] = seq.coords[0]; // duplicate ⇒ another cell missing
        assert!(unpatchify(&seq, &spec).is_err());
    }

    #[test]
    fn patchify_is_linear_in_the_video() {
        // patchify(aV1 + bV2) = a·patchify(V1) + b·patchify(V2) for fixed E,
        // evaluated at 64-bit against 1e-10. Dyadic pixel values and dyadic
        // coefficients keep the f32 video mix exact, so only the 64-bit
        // embedding arithmetic is under test.
        let spec = PatchSpec::new(2, 7, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dyadic_video = |rng: &mut ChaCha8Rng| {
            let mut v = VideoTensor::zeros(2, 14, 21);
            for x in v.data_mut() {
                *x = rng.random_range(0..256u32) as f32 / 256.0;
            }
            v
        };
        let v1 = dyadic_video(&mut rng);
        let v2 = dyadic_video(&mut rng);
        let e = {
            let data = (0..spec.flat_len() * 6)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            Tensor::<f64>::new(vec![spec.flat_len(), 6], data).unwrap()
        };
        let (a, b) = (0.25, 0.5);
        let mut mixed = VideoTensor::zeros(2, 14, 21);
        for i in 0..mixed.data().len() {
            mixed.data_mut()[i] = (a as f32) * v1.data()[i] + (b as f32) * v2.data()[i];
        }
        let emb = PatchEmbedder::matrix(e);
        let sm = patchify::<f64>(&mixed, &spec, &emb).unwrap();
        let s1 = patchify::<f64>(&v1, &spec, &emb).unwrap();
        let s2 = patchify::<f64>(&v2, &spec, &emb).unwrap();
        for i in 0..sm.tokens.numel() {
            let lin = a * s1.tokens.data()[i] + b * s2.tokens.data()[i];
            let got = sm.tokens.data()[i];
            assert!((lin - got).abs() < 1e-10, "idx {i}: {lin} vs {got}");
        }
    }
}
