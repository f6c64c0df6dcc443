//! Pre-LN transformer built from `attn` and `mlp` blocks.
//!
//! Row-vector convention: a block weight stored `[out, in]` maps a feature
//! row `x` to `x Wᵀ`. Attention logits are the raw products `⟨q_n, k_i⟩`
//! (no `1/sqrt(d)` factor), LayerNorm has no affine parameters, and the
//! residual stream is `h ← h + attn(LN(h))`, `h ← h + mlp(LN(h))`.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::SequenceBatch;
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::{Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Attn,
    Mlp,
}

pub fn parse_arch(s: &str) -> Result<Vec<BlockKind>> {
    if s.trim().is_empty() {
        return Err(Error::config("empty architecture string"));
    }
    s.split('+')
        .map(|tag| match tag.trim() {
            "attn" => Ok(BlockKind::Attn),
            "mlp" => Ok(BlockKind::Mlp),
            other => Err(Error::config(format!("unknown block tag `{other}` in `{s}`"))),
        })
        .collect()
}

/// Layer index of each block: a layer opens at every `attn` and at an `mlp`
/// that follows another `mlp` (so `attn+mlp+attn+mlp+mlp` has 3 layers).
pub fn layer_of_blocks(blocks: &[BlockKind]) -> Vec<usize> {
    let mut out = Vec::with_capacity(blocks.len());
    let mut layer = 0;
    for (i, b) in blocks.iter().enumerate() {
        if i > 0 && (*b == BlockKind::Attn || blocks[i - 1] == BlockKind::Mlp) {
            layer += 1;
        }
        out.push(layer);
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttnActivation {
    #[default]
    Softmax,
    Relu,
}

impl FromStr for AttnActivation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Self::Softmax),
            "relu" => Ok(Self::Relu),
            other => Err(Error::config(format!("unknown attention activation `{other}`"))),
        }
    }
}

impl fmt::Display for AttnActivation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Softmax => "softmax",
            Self::Relu => "relu",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub arch: String,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    /// Real tokens plus the ⟨s⟩ id.
    pub vocab: usize,
    pub max_seq: usize,
    pub attn_activation: AttnActivation,
    pub ln_eps: f64,
    pub init_std: f64,
    /// Apply LayerNorm before the unembedding.
    pub final_norm: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: "attn+mlp".into(),
            d_model: 64,
            n_heads: 1,
            d_mlp: 256,
            vocab: 65,
            max_seq: 129,
            attn_activation: AttnActivation::Softmax,
            ln_eps: 1e-5,
            init_std: 0.02,
            final_norm: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn new(arch: &str, vocab: usize, max_seq: usize) -> Self {
        Self { arch: arch.into(), vocab, max_seq, ..Self::default() }
    }

    pub fn blocks(&self) -> Result<Vec<BlockKind>> {
        parse_arch(&self.arch)
    }

    pub fn validate(&self) -> Result<Vec<BlockKind>> {
        let blocks = self.blocks()?;
        if self.d_model == 0 || self.d_mlp == 0 || self.vocab < 2 || self.max_seq == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(Error::config("init_std must be finite and non-negative"));
        }
        if !(self.ln_eps > 0.0 && self.ln_eps.is_finite()) {
            return Err(Error::config("ln_eps must be positive"));
        }
        Ok(blocks)
    }

    /// Names and shapes of all parameters in optimizer order.
    pub fn param_layout(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let blocks = self.validate()?;
        let (d, m) = (self.d_model, self.d_mlp);
        let mut out = vec![
            ("tok_emb".to_string(), vec![self.vocab, d]),
            ("pos_emb".to_string(), vec![self.max_seq, d]),
        ];
        for (i, b) in blocks.iter().enumerate() {
            match b {
                BlockKind::Attn => {
                    for w in ["q", "k", "v", "o"] {
                        out.push((format!("blocks.{i}.attn.{w}"), vec![d, d]));
                    }
                }
                BlockKind::Mlp => {
                    out.push((format!("blocks.{i}.mlp.w1"), vec![m, d]));
                    out.push((format!("blocks.{i}.mlp.w2"), vec![d, m]));
                }
            }
        }
        out.push(("unembed".to_string(), vec![self.vocab, d]));
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T> {
    pub config: ModelConfig,
    blocks: Vec<BlockKind>,
    pub params: Vec<Param<T>>,
}

/// Every weight ~ Normal(0, init_std²); parameter `j` draws from stream `j`.
pub fn init_model<T: Scalar>(cfg: &ModelConfig) -> Result<ModelState<T>> {
    let blocks = cfg.validate()?;
    let seed = rng::mix(cfg.seed, rng::tag::INIT);
    let normal = Normal::new(0.0, cfg.init_std).map_err(|e| Error::config(e.to_string()))?;
    let params = cfg
        .param_layout()?
        .into_iter()
        .enumerate()
        .map(|(j, (name, shape))| {
            let mut r = rng::stream(seed, j as u64);
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| T::lit(normal.sample(&mut r))).collect();
            Param { name, shape, data }
        })
        .collect();
    Ok(ModelState { config: cfg.clone(), blocks, params })
}

/// Components whose residual contribution is replaced by zeros.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    pub blocks: BTreeSet<usize>,
    pub heads: BTreeSet<(usize, usize)>,
}

impl Ablation {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn blocks(ids: impl IntoIterator<Item = usize>) -> Self {
        Self { blocks: ids.into_iter().collect(), heads: BTreeSet::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty() && self.heads.is_empty()
    }
}

/// Activations of one attention block, all row-major.
#[derive(Clone, Debug)]
pub struct AttnCapture<T> {
    pub block: usize,
    pub heads: usize,
    /// `[B, H, L, L]` attention weights.
    pub attn: Vec<T>,
    /// `[B, H, L, L]` raw logits `⟨q_n, k_i⟩`, unmasked.
    pub logits: Vec<T>,
    /// `[B, H, L, dh]`.
    pub queries: Vec<T>,
    pub keys: Vec<T>,
    /// `[B, L, d]` value states `O V LN(h)` per position.
    pub values: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct ProbeCapture<T> {
    pub batch: usize,
    pub len: usize,
    pub d_model: usize,
    pub vocab: usize,
    pub attn: Vec<AttnCapture<T>>,
    /// `[B, L, d]` residual stream at the output of each layer.
    pub residuals: Vec<Vec<T>>,
    /// `[B, L, vocab]`.
    pub logits: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    pub loss: T,
    /// `[B, L]`; entry `(b, i)` is the NLL of token `i + 1`, zero for the last column.
    pub position_losses: Vec<T>,
    pub capture: Option<ProbeCapture<T>>,
}

struct AttnIds {
    block: usize,
    q: Var,
    k: Var,
    v: Var,
    logits: Var,
    attn: Var,
}

struct Built<T> {
    graph: Graph<T>,
    params: Vec<Var>,
    loss: Var,
    attn: Vec<AttnIds>,
    layer_out: Vec<Var>,
    logits: Var,
    /// Inputs of every ReLU, for locating kinks.
    relu_in: Vec<Var>,
}

impl<T: Scalar> ModelState<T> {
    pub fn block_kinds(&self) -> &[BlockKind] {
        &self.blocks
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    /// All parameters concatenated in layout order.
    pub fn flat(&self) -> Vec<T> {
        self.params.iter().flat_map(|p| p.data.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::arg("set_flat: wrong parameter count"));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.data.len();
            p.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    fn build(&self, batch: &SequenceBatch, ablation: &Ablation) -> Result<Built<T>> {
        let cfg = &self.config;
        let (b, l) = (batch.batch(), batch.len());
        if l > cfg.max_seq {
            return Err(Error::arg(format!("sequence length {l} exceeds max_seq {}", cfg.max_seq)));
        }
        for &blk in &ablation.blocks {
            if blk >= self.blocks.len() {
                return Err(Error::arg(format!("ablation block {blk} out of range")));
            }
        }
        for &(blk, h) in &ablation.heads {
            if blk >= self.blocks.len() || self.blocks[blk] != BlockKind::Attn || h >= cfg.n_heads {
                return Err(Error::arg(format!("ablation head ({blk}, {h}) out of range")));
            }
        }
        let (d, heads) = (cfg.d_model, cfg.n_heads);
        let eps = T::lit(cfg.ln_eps);

        let mut g = Graph::new();
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| g.param(p.data.clone(), &p.shape))
            .collect::<Result<_>>()?;
        let mut next = 2;

        let tok = g.embedding_gather(params[0], batch.tokens(), &[b, l])?;
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..l).collect();
        let pos = g.embedding_gather(params[1], &positions, &[b, l])?;
        let mut h = g.add(tok, pos)?;

        let layers = layer_of_blocks(&self.blocks);
        let mut attn_ids = Vec::new();
        let mut layer_out = Vec::new();
        let mut relu_in = Vec::new();
        for (i, kind) in self.blocks.iter().enumerate() {
            let x = g.layer_norm(h, eps)?;
            let out = match kind {
                BlockKind::Attn => {
                    let (wq, wk, wv, wo) = (params[next], params[next + 1], params[next + 2], params[next + 3]);
                    next += 4;
                    let q = g.matmul(x, wq)?;
                    let k = g.matmul(x, wk)?;
                    let v = g.matmul(x, wv)?;
                    let (qh, kh, vh) = (g.split_heads(q, heads)?, g.split_heads(k, heads)?, g.split_heads(v, heads)?);
                    let logits = g.bmm(qh, kh, true)?;
                    let attn = match cfg.attn_activation {
                        AttnActivation::Softmax => g.masked_softmax_rows(logits)?,
                        AttnActivation::Relu => {
                            relu_in.push(logits);
                            g.relu_rows(logits)?
                        }
                    };
                    let mixed = g.bmm(attn, vh, false)?;
                    let mut merged = g.merge_heads(mixed, heads)?;
                    let dropped: Vec<usize> =
                        ablation.heads.iter().filter(|(blk, _)| *blk == i).map(|&(_, hd)| hd).collect();
                    if !dropped.is_empty() {
                        let dh = d / heads;
                        let mask: Vec<T> = (0..d)
                            .map(|f| if dropped.contains(&(f / dh)) { T::zero() } else { T::one() })
                            .collect();
                        let m = g.constant(mask, &[d])?;
                        merged = g.mul(merged, m)?;
                    }
                    attn_ids.push(AttnIds { block: i, q: qh, k: kh, v, logits, attn });
                    g.matmul(merged, wo)?
                }
                BlockKind::Mlp => {
                    let (w1, w2) = (params[next], params[next + 1]);
                    next += 2;
                    let u = g.matmul(x, w1)?;
                    relu_in.push(u);
                    let a = g.relu(u)?;
                    g.matmul(a, w2)?
                }
            };
            if !ablation.blocks.contains(&i) {
                h = g.add(h, out)?;
            }
            if i + 1 == self.blocks.len() || layers[i + 1] != layers[i] {
                layer_out.push(h);
            }
        }

        let x = if cfg.final_norm { g.layer_norm(h, eps)? } else { h };
        let logits = g.matmul(x, params[next])?;

        let mut targets = vec![0usize; b * l];
        let mut mask = vec![false; b * l];
        for bi in 0..b {
            for i in 0..l - 1 {
                targets[bi * l + i] = batch.token(bi, i + 1);
                mask[bi * l + i] = true;
            }
        }
        let loss = g.cross_entropy_from_logits(logits, &targets, &mask)?;
        Ok(Built { graph: g, params, loss, attn: attn_ids, layer_out, logits, relu_in })
    }

    fn capture(&self, built: &Built<T>, batch: &SequenceBatch) -> Result<ProbeCapture<T>> {
        let g = &built.graph;
        let (b, l) = (batch.batch(), batch.len());
        let (d, heads) = (self.config.d_model, self.config.n_heads);
        let attn = built
            .attn
            .iter()
            .map(|ids| {
                let o = &self.params[self.param_index(&format!("blocks.{}.attn.o", ids.block))?].data;
                // Val = O V LN(h), computed from the captured V LN(h) rows.
                let mut values = vec![T::zero(); b * l * d];
                gemm(T::one(), MatRef::new(g.value(ids.v), b * l, d), MatRef::t(o, d, d), T::zero(), &mut values);
                Ok(AttnCapture {
                    block: ids.block,
                    heads,
                    attn: g.value(ids.attn).to_vec(),
                    logits: g.value(ids.logits).to_vec(),
                    queries: g.value(ids.q).to_vec(),
                    keys: g.value(ids.k).to_vec(),
                    values,
                })
            })
            .collect::<Result<_>>()?;
        Ok(ProbeCapture {
            batch: b,
            len: l,
            d_model: d,
            vocab: self.config.vocab,
            attn,
            residuals: built.layer_out.iter().map(|&v| g.value(v).to_vec()).collect(),
            logits: g.value(built.logits).to_vec(),
        })
    }

    fn param_index(&self, name: &str) -> Result<usize> {
        self.params
            .iter()
            .position(|p| p.name == name)
            .ok_or_else(|| Error::arg(format!("no parameter named {name}")))
    }

    pub fn forward(&self, batch: &SequenceBatch, capture: bool) -> Result<ForwardOutput<T>> {
        self.zero_out_forward_opt(batch, &Ablation::none(), capture)
    }

    /// Forward pass with the listed blocks/heads contributing zeros to the residual stream.
    pub fn zero_out_forward(&self, batch: &SequenceBatch, ablation: &Ablation) -> Result<ForwardOutput<T>> {
        self.zero_out_forward_opt(batch, ablation, true)
    }

    fn zero_out_forward_opt(&self, batch: &SequenceBatch, ablation: &Ablation, capture: bool) -> Result<ForwardOutput<T>> {
        let built = self.build(batch, ablation)?;
        let capture = if capture { Some(self.capture(&built, batch)?) } else { None };
        let g = &built.graph;
        Ok(ForwardOutput {
            loss: g.scalar(built.loss),
            position_losses: g.position_losses(built.loss).unwrap_or_default().to_vec(),
            capture,
        })
    }

    /// Loss and the sign of every ReLU input.
    fn loss_and_signs(&self, batch: &SequenceBatch) -> Result<(T, Vec<bool>)> {
        let built = self.build(batch, &Ablation::none())?;
        let g = &built.graph;
        let signs = built.relu_in.iter().flat_map(|&v| g.value(v).iter().map(|x| *x > T::zero())).collect();
        Ok((g.scalar(built.loss), signs))
    }

    /// Loss and gradients in parameter order.
    pub fn loss_and_grads(&self, batch: &SequenceBatch) -> Result<(T, Vec<Vec<T>>)> {
        let mut built = self.build(batch, &Ablation::none())?;
        built.graph.backward(built.loss)?;
        let grads = built
            .params
            .iter()
            .zip(&self.params)
            .map(|(&v, p)| built.graph.grad(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); p.data.len()]))
            .collect();
        Ok((built.graph.scalar(built.loss), grads))
    }

    pub fn to_checkpoint(&self, step: usize) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            scalar: T::NAME.into(),
            step,
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), shape: p.shape.clone(), data: p.data.iter().map(|x| x.as_f64()).collect() })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::config(format!("unsupported checkpoint format `{}`", ck.format)));
        }
        let mut state: ModelState<T> = init_model(&ModelConfig { init_std: 0.0, ..ck.config.clone() })?;
        if state.params.len() != ck.params.len() {
            return Err(Error::config("checkpoint parameter count does not match its config"));
        }
        for (p, q) in state.params.iter_mut().zip(&ck.params) {
            if p.name != q.name || p.shape != q.shape || q.data.len() != p.data.len() {
                return Err(Error::config(format!("checkpoint parameter `{}` does not match layout", q.name)));
            }
            p.data = q.data.iter().map(|&x| T::lit(x)).collect();
        }
        state.config = ck.config.clone();
        Ok(state)
    }
}

/// Finite-difference comparison of the backpropagated gradient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest relative error `|a - n| / max(|a|, |n|, 1e-8)` over probed coordinates
    /// with a nonzero gradient.
    pub max_rel: f64,
    /// Largest `|central difference|` over probed coordinates whose gradient is exactly zero
    /// (embedding rows of tokens absent from the batch); pure rounding when correct.
    pub zero_max_abs: f64,
    /// Coordinates passed over because `x ± h` flips the sign of some ReLU input,
    /// where a central difference does not estimate the derivative.
    pub kinks_skipped: usize,
    pub probed: usize,
}

/// Central differences on `probes` kink-free coordinates with a nonzero
/// gradient (relative error) and up to `probes` with a zero gradient (absolute).
pub fn gradient_fd_error<T: Scalar>(
    model: &ModelState<T>,
    batch: &SequenceBatch,
    probes: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheck> {
    let (_, grads) = model.loss_and_grads(batch)?;
    let analytic: Vec<f64> = grads.iter().flatten().map(|g| g.as_f64()).collect();
    let x0: Vec<T> = model.flat();
    let (_, signs0) = model.loss_and_signs(batch)?;
    let mut probe = model.clone();
    let mut x = x0.clone();
    // Loss at `x0 + t e_i`, and whether any ReLU input changed sign.
    let mut shifted = |i: usize, t: f64| -> Result<(f64, bool)> {
        x[i] = T::lit(x0[i].as_f64() + t);
        probe.set_flat(&x)?;
        x[i] = x0[i];
        let (l, s) = probe.loss_and_signs(batch)?;
        Ok((l.as_f64(), s != signs0))
    };

    let mut r = rng::stream(seed, rng::tag::PROBES);
    let order = rand::seq::index::sample(&mut r, x0.len(), x0.len());
    let (mut max_rel, mut zero_max_abs) = (0.0f64, 0.0f64);
    let (mut live, mut dead, mut kinks_skipped) = (0usize, 0usize, 0usize);
    for i in order.iter() {
        let zero = analytic[i] == 0.0;
        if (zero && dead >= probes) || (!zero && live >= probes) {
            if live >= probes && dead >= probes {
                break;
            }
            continue;
        }
        let (fp, kp) = shifted(i, h)?;
        let (fm, km) = shifted(i, -h)?;
        if kp || km {
            kinks_skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * h);
        if zero {
            dead += 1;
            zero_max_abs = zero_max_abs.max(numeric.abs());
        } else {
            live += 1;
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max((analytic[i] - numeric).abs() / denom);
        }
    }
    Ok(GradCheck { max_rel, zero_max_abs, kinks_skipped, probed: live })
}

pub const CHECKPOINT_FORMAT: &str = "sinklab-checkpoint-v1";

/// JSON checkpoint: config, step and named row-major parameter arrays (as f64).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub scalar: String,
    pub step: usize,
    pub config: ModelConfig,
    pub params: Vec<Param<f64>>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{default_spec, sample_batch, Variant};

    fn small_cfg(arch: &str) -> ModelConfig {
        ModelConfig { d_model: 8, d_mlp: 16, n_heads: 2, init_std: 0.3, ..ModelConfig::new(arch, 65, 17) }
    }

    #[test]
    fn arch_parsing() {
        assert_eq!(parse_arch("attn+mlp").unwrap(), vec![BlockKind::Attn, BlockKind::Mlp]);
        let five = parse_arch("attn+mlp+attn+mlp+mlp").unwrap();
        assert_eq!(five.len(), 5);
        assert_eq!(five.iter().filter(|b| **b == BlockKind::Attn).count(), 2);
        assert_eq!(layer_of_blocks(&five), vec![0, 0, 1, 1, 2]);
        assert!(matches!(parse_arch("attn++mlp"), Err(Error::Config(_))));
        assert!(matches!(parse_arch(""), Err(Error::Config(_))));
        assert!(matches!(parse_arch("attn+ffn"), Err(Error::Config(_))));
    }

    #[test]
    fn init_is_deterministic_and_centered() {
        let cfg = ModelConfig::default();
        let a: ModelState<f64> = init_model(&cfg).unwrap();
        assert_eq!(a, init_model(&cfg).unwrap());
        for p in &a.params {
            let n = p.data.len() as f64;
            let mean = p.data.iter().sum::<f64>() / n;
            assert!(mean.abs() < 5.0 * cfg.init_std / n.sqrt(), "{}: mean {mean}", p.name);
        }
        let zero: ModelState<f64> = init_model(&ModelConfig { init_std: 0.0, ..cfg.clone() }).unwrap();
        assert!(zero.flat().iter().all(|&x| x == 0.0));
        let bad = ModelConfig { n_heads: 3, ..cfg };
        assert!(init_model::<f64>(&bad).is_err());
    }

    #[test]
    fn zero_model_is_uniform() {
        let spec = default_spec();
        let cfg = ModelConfig { init_std: 0.0, ..ModelConfig::new("attn+mlp", 65, 17) };
        let m: ModelState<f64> = init_model(&cfg).unwrap();
        let batch = sample_batch(&spec, 2, 16, Variant::Bb, 0).unwrap();
        let out = m.forward(&batch, true).unwrap();
        assert!((out.loss - 65f64.ln()).abs() < 1e-12);
        let cap = out.capture.unwrap();
        assert!(cap.attn[0].values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn capture_does_not_change_loss_and_maps_normalize() {
        let spec = default_spec();
        let m: ModelState<f64> = init_model(&small_cfg("attn+mlp+attn+mlp+mlp")).unwrap();
        let batch = sample_batch(&spec, 3, 16, Variant::Bb, 5).unwrap();
        let a = m.forward(&batch, false).unwrap();
        let b = m.forward(&batch, true).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        let cap = b.capture.unwrap();
        assert_eq!(cap.attn.len(), 2);
        assert_eq!(cap.residuals.len(), 3);
        let l = 17;
        for ac in &cap.attn {
            for (r, row) in ac.attn.chunks(l).enumerate() {
                let i = r % l;
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
                assert!(row[i + 1..].iter().all(|&v| v == 0.0));
            }
        }
        assert_eq!(m.zero_out_forward(&batch, &Ablation::none()).unwrap().loss.to_bits(), a.loss.to_bits());
    }

    #[test]
    fn causal_perturbation() {
        let spec = default_spec();
        let m: ModelState<f64> = init_model(&small_cfg("attn+mlp+attn+mlp")).unwrap();
        let batch = sample_batch(&spec, 1, 16, Variant::Bb, 9).unwrap();
        let base = m.forward(&batch, true).unwrap().capture.unwrap().logits;
        let j = 9;
        let mut toks = batch.tokens().to_vec();
        toks[j] = (toks[j] + 1) % 64;
        let moved = batch.with_tokens(toks).unwrap();
        let pert = m.forward(&moved, true).unwrap().capture.unwrap().logits;
        let c = 65;
        assert_eq!(&base[..j * c], &pert[..j * c]);
        assert_ne!(&base[j * c..], &pert[j * c..]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let spec = default_spec();
        for act in [AttnActivation::Softmax, AttnActivation::Relu] {
            let cfg = ModelConfig { attn_activation: act, ..small_cfg("attn+mlp") };
            let m: ModelState<f64> = init_model(&cfg).unwrap();
            let batch = sample_batch(&spec, 2, 8, Variant::Bb, 3).unwrap();
            let err = gradient_fd_error(&m, &batch, 64, 1e-5, 11).unwrap().max_rel;
            assert!(err < 1e-5, "{act}: {err}");
        }
    }

    #[test]
    fn ablating_everything_leaves_embeddings() {
        let spec = default_spec();
        let m: ModelState<f64> = init_model(&small_cfg("attn+mlp")).unwrap();
        let batch = sample_batch(&spec, 2, 8, Variant::Bb, 3).unwrap();
        let out = m.zero_out_forward(&batch, &Ablation::blocks([0, 1])).unwrap();
        let cap = out.capture.unwrap();
        // Logits at a position depend only on its token and position.
        let mut other = batch.tokens().to_vec();
        other[3] = (other[3] + 5) % 64;
        let moved = batch.with_tokens(other).unwrap();
        let cap2 = m.zero_out_forward(&moved, &Ablation::blocks([0, 1])).unwrap().capture.unwrap();
        let c = 65;
        assert_eq!(&cap.logits[4 * c..9 * c], &cap2.logits[4 * c..9 * c]);
        assert!(m.zero_out_forward(&batch, &Ablation::blocks([2])).is_err());
        let heads = Ablation { blocks: BTreeSet::new(), heads: [(1, 0)].into() };
        assert!(m.zero_out_forward(&batch, &heads).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let m: ModelState<f64> = init_model(&small_cfg("attn+mlp")).unwrap();
        let ck = m.to_checkpoint(7);
        let back: ModelState<f64> = ModelState::from_checkpoint(&Checkpoint::from_json(&ck.to_json().unwrap()).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn too_long_sequence_is_rejected() {
        let spec = default_spec();
        let m: ModelState<f64> = init_model(&small_cfg("attn+mlp")).unwrap();
        let batch = sample_batch(&spec, 1, 20, Variant::Bb, 0).unwrap();
        assert!(matches!(m.forward(&batch, false), Err(Error::Argument(_))));
    }
}
