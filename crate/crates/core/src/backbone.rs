//! Pre-norm transformer encoder over packed token sequences: RMSNorm,
//! SwiGLU feed-forward, 2D rotary positions on queries/keys, and hybrid
//! windowed/full attention that never crosses sample boundaries.

use std::collections::BTreeMap;
use std::rc::Rc;

use nvf_tensor::{NodeId, Real, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::packing::PackedBatch;
use crate::util::randn_tensor;

/// Projection initialization: normal(0, 1/√fan_in). Variance-preserving,
/// which from-scratch CPU-scale training needs — at a flat 0.02 the
/// residual branches contribute nothing and gradients vanish.
pub fn init_std(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub dim: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    /// Attention window side, in patches.
    pub window_side: usize,
    /// Layer ids that attend over the whole sample instead of windows.
    pub full_attn_layers: Vec<usize>,
    pub rope_base: f64,
    pub rmsnorm_eps: f64,
}

impl ModelConfig {
    /// Small configuration sized for CPU experiments.
    pub fn desk_default() -> Self {
        ModelConfig::sized(4, 64, 4)
    }

    /// `layers`/`dim`/`heads` with the remaining fields at their defaults.
    pub fn sized(num_layers: usize, dim: usize, num_heads: usize) -> Self {
        let ffn = ((dim * 8 / 3) + 3) / 4 * 4;
        ModelConfig {
            num_layers,
            dim,
            num_heads,
            head_dim: dim / num_heads,
            ffn_dim: ffn,
            window_side: 8,
            full_attn_layers: default_full_attention_ids(num_layers),
            rope_base: 10000.0,
            rmsnorm_eps: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim != self.num_heads * self.head_dim {
            return Err(CoreError::Config(format!(
                "dim {} != heads {} × head_dim {}",
                self.dim, self.num_heads, self.head_dim
            )));
        }
        if self.head_dim % 4 != 0 {
            return Err(CoreError::Config(format!(
                "head_dim {} must be divisible by 4 (pair per rotary axis)",
                self.head_dim
            )));
        }
        if self.window_side == 0 || self.ffn_dim == 0 {
            return Err(CoreError::Config("window_side and ffn_dim must be ≥ 1".into()));
        }
        if let Some(&bad) = self.full_attn_layers.iter().find(|&&l| l >= self.num_layers) {
            return Err(CoreError::Config(format!(
                "full-attention layer id {bad} out of range for {} layers",
                self.num_layers
            )));
        }
        Ok(())
    }
}

/// Full attention at the last layer of each quarter for deep stacks
/// ({7,15,23,31} at 32 layers). Below 16 layers that rule would stop the
/// windowed path from being the majority, so only the final layer goes full.
pub fn default_full_attention_ids(num_layers: usize) -> Vec<usize> {
    if num_layers == 0 {
        return Vec::new();
    }
    if num_layers < 16 {
        return vec![num_layers - 1];
    }
    (1..=4).map(|q| num_layers * q / 4 - 1).collect()
}

#[derive(Clone, Debug)]
pub struct LayerWeights<R: Real> {
    pub wq: Tensor<R>,
    pub wk: Tensor<R>,
    pub wv: Tensor<R>,
    pub wo: Tensor<R>,
    pub w_gate: Tensor<R>,
    pub w_up: Tensor<R>,
    pub w_down: Tensor<R>,
    pub norm1: Tensor<R>,
    pub norm2: Tensor<R>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoraTarget {
    Query,
    Key,
    Value,
    Output,
}

impl LoraTarget {
    pub fn weight_name(self) -> &'static str {
        match self {
            LoraTarget::Query => "wq",
            LoraTarget::Key => "wk",
            LoraTarget::Value => "wv",
            LoraTarget::Output => "wo",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<LoraTarget>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 16,
            alpha: 16.0,
            targets: vec![LoraTarget::Query, LoraTarget::Value],
        }
    }
}

/// A and B as in W_eff = W + (α/r)·B·A, stored for the row convention
/// y = x·W (so the update applied to W is Aᵀ·Bᵀ).
#[derive(Clone, Debug)]
pub struct LoraPair<R: Real> {
    /// r × in
    pub a: Tensor<R>,
    /// out × r
    pub b: Tensor<R>,
}

#[derive(Clone, Debug)]
pub struct LoraAdapters<R: Real> {
    pub config: LoraConfig,
    /// Per layer, pairs in the order of `config.targets`.
    pub layers: Vec<Vec<LoraPair<R>>>,
}

/// Effective weight W + (α/r)·B·A, in the y = x·W row convention.
pub fn lora_effective<R: Real>(
    w: &Tensor<R>,
    a: &Tensor<R>,
    b: &Tensor<R>,
    alpha: f64,
    rank: usize,
) -> Result<Tensor<R>> {
    let (r, d_in) = (a.rows(), a.cols());
    let (d_out, rb) = (b.rows(), b.cols());
    if r != rank || rb != rank || w.rows() != d_in || w.cols() != d_out {
        return Err(CoreError::Config(format!(
            "lora shapes: W {:?}, A {:?}, B {:?}, rank {rank}",
            w.shape(),
            a.shape(),
            b.shape()
        )));
    }
    let scale = R::from_f64(alpha / rank as f64);
    let mut delta = vec![R::ZERO; d_in * d_out];
    // Aᵀ·Bᵀ accumulated directly
    for rr in 0..rank {
        for i in 0..d_in {
            let ai = a.data()[rr * d_in + i];
            for o in 0..d_out {
                delta[i * d_out + o] += ai * b.data()[o * rank + rr];
            }
        }
    }
    let data = w
        .data()
        .iter()
        .zip(delta)
        .map(|(&wv, dv)| wv + dv * scale)
        .collect();
    Ok(Tensor::new(vec![d_in, d_out], data)?)
}

#[derive(Clone, Debug)]
pub struct ModelParams<R: Real> {
    pub patch_dim: usize,
    pub embed: Tensor<R>,
    pub layers: Vec<LayerWeights<R>>,
    pub head_w: Tensor<R>,
    pub head_b: Tensor<R>,
    pub lora: Option<LoraAdapters<R>>,
}

impl<R: Real> ModelParams<R> {
    pub fn init(cfg: &ModelConfig, patch_dim: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.dim;
        let f = cfg.ffn_dim;
        let embed = randn_tensor(&mut rng, &[patch_dim, d], init_std(patch_dim));
        let layers = (0..cfg.num_layers)
            .map(|_| LayerWeights {
                wq: randn_tensor(&mut rng, &[d, d], init_std(d)),
                wk: randn_tensor(&mut rng, &[d, d], init_std(d)),
                wv: randn_tensor(&mut rng, &[d, d], init_std(d)),
                wo: randn_tensor(&mut rng, &[d, d], init_std(d)),
                w_gate: randn_tensor(&mut rng, &[d, f], init_std(d)),
                w_up: randn_tensor(&mut rng, &[d, f], init_std(d)),
                w_down: randn_tensor(&mut rng, &[f, d], init_std(f)),
                norm1: Tensor::full(&[d], R::ONE),
                norm2: Tensor::full(&[d], R::ONE),
            })
            .collect();
        let head_w = randn_tensor(&mut rng, &[d, 2], init_std(d));
        let head_b = Tensor::zeros(&[2]);
        Ok(ModelParams {
            patch_dim,
            embed,
            layers,
            head_w,
            head_b,
            lora: None,
        })
    }

    /// Attach fresh adapters: A ~ normal(0, 0.02), B = 0, so the effective
    /// function starts identical to the base model.
    pub fn attach_lora(&mut self, cfg: &ModelConfig, lora_cfg: LoraConfig, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.dim;
        let layers = (0..cfg.num_layers)
            .map(|_| {
                lora_cfg
                    .targets
                    .iter()
                    .map(|_| LoraPair {
                        a: randn_tensor(&mut rng, &[lora_cfg.rank, d], init_std(d)),
                        b: Tensor::zeros(&[d, lora_cfg.rank]),
                    })
                    .collect()
            })
            .collect();
        self.lora = Some(LoraAdapters {
            config: lora_cfg,
            layers,
        });
    }

    /// Stable name → tensor listing used by checkpoints and the optimizer.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<R>)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.wq"), &l.wq));
            out.push((format!("layers.{i}.wk"), &l.wk));
            out.push((format!("layers.{i}.wv"), &l.wv));
            out.push((format!("layers.{i}.wo"), &l.wo));
            out.push((format!("layers.{i}.w_gate"), &l.w_gate));
            out.push((format!("layers.{i}.w_up"), &l.w_up));
            out.push((format!("layers.{i}.w_down"), &l.w_down));
            out.push((format!("layers.{i}.norm1"), &l.norm1));
            out.push((format!("layers.{i}.norm2"), &l.norm2));
        }
        out.push(("head.w".to_string(), &self.head_w));
        out.push(("head.b".to_string(), &self.head_b));
        if let Some(lora) = &self.lora {
            for (i, layer) in lora.layers.iter().enumerate() {
                for (t, pair) in lora.config.targets.iter().zip(layer) {
                    let w = t.weight_name();
                    out.push((format!("layers.{i}.{w}.lora_a"), &pair.a));
                    out.push((format!("layers.{i}.{w}.lora_b"), &pair.b));
                }
            }
        }
        out
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<R>> {
        let mut parts = name.split('.');
        match parts.next()? {
            "embed" => Some(&mut self.embed),
            "head" => match parts.next()? {
                "w" => Some(&mut self.head_w),
                "b" => Some(&mut self.head_b),
                _ => None,
            },
            "layers" => {
                let i: usize = parts.next()?.parse().ok()?;
                let field = parts.next()?;
                match parts.next() {
                    None => {
                        let l = self.layers.get_mut(i)?;
                        Some(match field {
                            "wq" => &mut l.wq,
                            "wk" => &mut l.wk,
                            "wv" => &mut l.wv,
                            "wo" => &mut l.wo,
                            "w_gate" => &mut l.w_gate,
                            "w_up" => &mut l.w_up,
                            "w_down" => &mut l.w_down,
                            "norm1" => &mut l.norm1,
                            "norm2" => &mut l.norm2,
                            _ => return None,
                        })
                    }
                    Some(lora_part) => {
                        let lora = self.lora.as_mut()?;
                        let ti = lora
                            .config
                            .targets
                            .iter()
                            .position(|t| t.weight_name() == field)?;
                        let pair = lora.layers.get_mut(i)?.get_mut(ti)?;
                        match lora_part {
                            "lora_a" => Some(&mut pair.a),
                            "lora_b" => Some(&mut pair.b),
                            _ => None,
                        }
                    }
                }
            }
            _ => None,
        }
    }

    pub fn cast<S: Real>(&self) -> ModelParams<S> {
        ModelParams {
            patch_dim: self.patch_dim,
            embed: self.embed.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    w_gate: l.w_gate.cast(),
                    w_up: l.w_up.cast(),
                    w_down: l.w_down.cast(),
                    norm1: l.norm1.cast(),
                    norm2: l.norm2.cast(),
                })
                .collect(),
            head_w: self.head_w.cast(),
            head_b: self.head_b.cast(),
            lora: self.lora.as_ref().map(|lo| LoraAdapters {
                config: lo.config.clone(),
                layers: lo
                    .layers
                    .iter()
                    .map(|layer| {
                        layer
                            .iter()
                            .map(|p| LoraPair {
                                a: p.a.cast(),
                                b: p.b.cast(),
                            })
                            .collect()
                    })
                    .collect(),
            }),
        }
    }
}

// ---------------------------------------------------------------------------
// Attention grouping
// ---------------------------------------------------------------------------

/// Tile each sample's spatial patch grid, per temporal index, into
/// window_side×window_side blocks anchored at (0,0); edge windows may be
/// smaller. Returned groups never span a sample boundary.
pub fn window_partition(
    coords: &[(usize, usize, usize)],
    boundaries: &[usize],
    window_side: usize,
) -> Vec<Vec<usize>> {
    let mut map: BTreeMap<(usize, usize, usize, usize), Vec<usize>> = BTreeMap::new();
    for (sample, w) in boundaries.windows(2).enumerate() {
        for tok in w[0]..w[1] {
            let (t, h, wd) = coords[tok];
            map.entry((sample, t, h / window_side, wd / window_side))
                .or_default()
                .push(tok);
        }
    }
    map.into_values().collect()
}

/// One group per sample: whole-sample attention.
pub fn full_groups(boundaries: &[usize]) -> Vec<Vec<usize>> {
    boundaries
        .windows(2)
        .map(|w| (w[0]..w[1]).collect())
        .collect()
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

/// The model consumes unit-interval intensities mapped to [−1, 1]; raw
/// patch values stay untouched in the PatchSequence itself.
pub fn centered_tokens<R: Real>(tokens: &Tensor<R>) -> Tensor<R> {
    tokens.map(|v| v + v - R::ONE)
}

pub struct StagedLayer {
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub wo: NodeId,
    pub w_gate: NodeId,
    pub w_up: NodeId,
    pub w_down: NodeId,
    pub norm1: NodeId,
    pub norm2: NodeId,
}

pub struct StagedParams {
    pub embed: NodeId,
    pub layers: Vec<StagedLayer>,
    pub head_w: NodeId,
    pub head_b: NodeId,
    /// Trainable leaves by name, in a stable order.
    pub leaves: Vec<(String, NodeId)>,
}

/// Put parameters on the tape: trainable ones as leaves, frozen ones as
/// constants. LoRA adapters, when present, are composed into effective
/// projection weights on the tape so gradients reach A and B.
pub fn stage_params<R: Real>(
    tape: &mut Tape<R>,
    params: &ModelParams<R>,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<StagedParams> {
    fn put<R: Real>(
        tape: &mut Tape<R>,
        leaves: &mut Vec<(String, NodeId)>,
        trainable: &dyn Fn(&str) -> bool,
        name: String,
        value: &Tensor<R>,
    ) -> NodeId {
        if trainable(&name) {
            let id = tape.leaf(value.clone());
            leaves.push((name, id));
            id
        } else {
            tape.constant(value.clone())
        }
    }
    fn proj<R: Real>(
        tape: &mut Tape<R>,
        leaves: &mut Vec<(String, NodeId)>,
        trainable: &dyn Fn(&str) -> bool,
        params: &ModelParams<R>,
        layer: usize,
        field: &str,
        w: &Tensor<R>,
    ) -> Result<NodeId> {
        let base = put(tape, leaves, trainable, format!("layers.{layer}.{field}"), w);
        // fold in adapters if this projection is a LoRA target
        if let Some(lora) = &params.lora {
            if let Some(ti) = lora
                .config
                .targets
                .iter()
                .position(|t| t.weight_name() == field)
            {
                let pair = &lora.layers[layer][ti];
                let a = put(
                    tape,
                    leaves,
                    trainable,
                    format!("layers.{layer}.{field}.lora_a"),
                    &pair.a,
                );
                let b = put(
                    tape,
                    leaves,
                    trainable,
                    format!("layers.{layer}.{field}.lora_b"),
                    &pair.b,
                );
                let bt = tape.transpose(b)?;
                let delta = tape.matmul_tn(a, bt)?;
                let scaled =
                    tape.scale(delta, R::from_f64(lora.config.alpha / lora.config.rank as f64));
                return Ok(tape.add(base, scaled)?);
            }
        }
        Ok(base)
    }

    let mut leaves = Vec::new();
    let embed = put(tape, &mut leaves, trainable, "embed".into(), &params.embed);
    let mut layers = Vec::with_capacity(params.layers.len());
    for (i, l) in params.layers.iter().enumerate() {
        let wq = proj(tape, &mut leaves, trainable, params, i, "wq", &l.wq)?;
        let wk = proj(tape, &mut leaves, trainable, params, i, "wk", &l.wk)?;
        let wv = proj(tape, &mut leaves, trainable, params, i, "wv", &l.wv)?;
        let wo = proj(tape, &mut leaves, trainable, params, i, "wo", &l.wo)?;
        let w_gate = put(
            tape,
            &mut leaves,
            trainable,
            format!("layers.{i}.w_gate"),
            &l.w_gate,
        );
        let w_up = put(
            tape,
            &mut leaves,
            trainable,
            format!("layers.{i}.w_up"),
            &l.w_up,
        );
        let w_down = put(
            tape,
            &mut leaves,
            trainable,
            format!("layers.{i}.w_down"),
            &l.w_down,
        );
        let norm1 = put(
            tape,
            &mut leaves,
            trainable,
            format!("layers.{i}.norm1"),
            &l.norm1,
        );
        let norm2 = put(
            tape,
            &mut leaves,
            trainable,
            format!("layers.{i}.norm2"),
            &l.norm2,
        );
        layers.push(StagedLayer {
            wq,
            wk,
            wv,
            wo,
            w_gate,
            w_up,
            w_down,
            norm1,
            norm2,
        });
    }
    let head_w = put(tape, &mut leaves, trainable, "head.w".into(), &params.head_w);
    let head_b = put(tape, &mut leaves, trainable, "head.b".into(), &params.head_b);
    Ok(StagedParams {
        embed,
        layers,
        head_w,
        head_b,
        leaves,
    })
}

/// Sub-layer outputs of one transformer layer, kept for tests that verify
/// the residual decomposition.
pub struct LayerTrace {
    pub attn_out: NodeId,
    pub ffn_out: NodeId,
    pub output: NodeId,
}

/// X̂ = X + Attn(RMSNorm(X)); X′ = X̂ + FFN_SwiGLU(RMSNorm(X̂)).
pub fn transformer_layer<R: Real>(
    tape: &mut Tape<R>,
    x: NodeId,
    layer: &StagedLayer,
    cfg: &ModelConfig,
    groups: &Rc<Vec<Vec<usize>>>,
    rope_coords: &Rc<Vec<(usize, usize)>>,
) -> Result<LayerTrace> {
    let xn = tape.rmsnorm(x, layer.norm1, cfg.rmsnorm_eps)?;
    let q = tape.matmul(xn, layer.wq)?;
    let k = tape.matmul(xn, layer.wk)?;
    let v = tape.matmul(xn, layer.wv)?;
    let qr = tape.rope2d(q, rope_coords.clone(), cfg.num_heads, cfg.rope_base)?;
    let kr = tape.rope2d(k, rope_coords.clone(), cfg.num_heads, cfg.rope_base)?;
    let att = tape.grouped_sdpa(qr, kr, v, groups.clone(), cfg.num_heads)?;
    let attn_out = tape.matmul(att, layer.wo)?;
    let x_hat = tape.add(x, attn_out)?;
    let x2 = tape.rmsnorm(x_hat, layer.norm2, cfg.rmsnorm_eps)?;
    let g = tape.matmul(x2, layer.w_gate)?;
    let u = tape.matmul(x2, layer.w_up)?;
    let sg = tape.silu(g);
    let gated = tape.mul(sg, u)?;
    let ffn_out = tape.matmul(gated, layer.w_down)?;
    let output = tape.add(x_hat, ffn_out)?;
    Ok(LayerTrace {
        attn_out,
        ffn_out,
        output,
    })
}

/// Embed packed raw patches and run every layer. Layers listed in
/// `full_attn_layers` attend across their whole sample; the rest use the
/// windowed partition. Returns the packed N×D feature block.
pub fn forward_features<R: Real>(
    tape: &mut Tape<R>,
    packed: &PackedBatch<R>,
    cfg: &ModelConfig,
    staged: &StagedParams,
) -> Result<NodeId> {
    cfg.validate()?;
    let tokens = tape.constant(centered_tokens(&packed.tokens));
    let mut x = tape.matmul(tokens, staged.embed)?;
    let windowed: Rc<Vec<Vec<usize>>> = Rc::new(window_partition(
        &packed.coords,
        &packed.boundaries,
        cfg.window_side,
    ));
    let full: Rc<Vec<Vec<usize>>> = Rc::new(full_groups(&packed.boundaries));
    let rope_coords: Rc<Vec<(usize, usize)>> =
        Rc::new(packed.coords.iter().map(|&(_, h, w)| (h, w)).collect());
    for (l, layer) in staged.layers.iter().enumerate() {
        let groups = if cfg.full_attn_layers.contains(&l) {
            &full
        } else {
            &windowed
        };
        x = transformer_layer(tape, x, layer, cfg, groups, &rope_coords)?.output;
    }
    Ok(x)
}
