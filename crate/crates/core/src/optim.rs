//! Adam and SGD steppers and the training loop.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{sample_batch, BigramSpec, SequenceBatch, Variant};
use crate::error::{Error, Result};
use crate::model::{init_model, ModelConfig, ModelState};
use crate::probes::{self, ProbeRecord};
use crate::rng;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled: applied as `lr * wd * p`, outside the moment estimates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.99, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub hyper: AdamConfig,
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(n: usize, hyper: AdamConfig) -> Self {
        Self { hyper, m: vec![T::zero(); n], v: vec![T::zero(); n], t: 0 }
    }
}

fn check_grads<T: Scalar>(params: &[T], grads: &[T], op: &str) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::arg(format!("{op}: {} params but {} grads", params.len(), grads.len())));
    }
    if let Some(g) = grads.iter().find(|g| !g.is_finite()) {
        return Err(Error::numeric(op, format!("non-finite gradient {g}")));
    }
    Ok(())
}

/// One bias-corrected Adam update: `p ← p − lr·(m̂/(√v̂+ε) + wd·p)`.
pub fn adam_step<T: Scalar>(params: &mut [T], grads: &[T], state: &mut AdamState<T>) -> Result<()> {
    check_grads(params, grads, "adam_step")?;
    if state.m.len() != params.len() {
        return Err(Error::arg("adam_step: moment buffers do not match parameters"));
    }
    state.t += 1;
    let h = state.hyper;
    let (b1, b2) = (T::lit(h.beta1), T::lit(h.beta2));
    let one = T::one();
    let c1 = one - b1.powi(state.t as i32);
    let c2 = one - b2.powi(state.t as i32);
    let (lr, eps, wd) = (T::lit(h.lr), T::lit(h.eps), T::lit(h.weight_decay));
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let mhat = *m / c1;
        let vhat = *v / c2;
        *p = *p - lr * (mhat / (vhat.sqrt() + eps) + wd * *p);
    }
    Ok(())
}

pub fn sgd_step<T: Scalar>(params: &mut [T], grads: &[T], lr: f64) -> Result<()> {
    check_grads(params, grads, "sgd_step")?;
    let lr = T::lit(lr);
    for (p, &g) in params.iter_mut().zip(grads) {
        *p = *p - lr * g;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "tag", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    Adam(AdamConfig),
    Sgd { lr: f64 },
}

impl OptimizerConfig {
    pub fn adam() -> Self {
        Self::Adam(AdamConfig::default())
    }

    pub fn sgd() -> Self {
        Self::Sgd { lr: 0.03 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Adam(_) => "adam",
            Self::Sgd { .. } => "sgd",
        }
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::adam()
    }
}

/// Either optimizer behind one interface.
#[derive(Clone, Debug)]
pub enum Optimizer<T> {
    Adam(AdamState<T>),
    Sgd { lr: f64 },
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(cfg: &OptimizerConfig, n: usize) -> Self {
        match *cfg {
            OptimizerConfig::Adam(h) => Self::Adam(AdamState::new(n, h)),
            OptimizerConfig::Sgd { lr } => Self::Sgd { lr },
        }
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T]) -> Result<()> {
        match self {
            Self::Adam(s) => adam_step(params, grads, s),
            Self::Sgd { lr } => sgd_step(params, grads, *lr),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub steps: usize,
    pub batch: usize,
    /// Sequence length `N`; batches have `N + 1` columns.
    pub seq_len: usize,
    pub probe_every: usize,
    pub variant: Variant,
    /// Size of the fixed evaluation batch used for probes.
    pub eval_batch: usize,
    pub dormant_threshold: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::adam(),
            steps: 2000,
            batch: 64,
            seq_len: 128,
            probe_every: 50,
            variant: Variant::Bb,
            eval_batch: 64,
            dormant_threshold: probes::DORMANT_THRESHOLD,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Batch size 512, length 256, 10k steps.
    pub fn full_scale() -> Self {
        Self { steps: 10_000, batch: 512, seq_len: 256, eval_batch: 512, probe_every: 100, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.seq_len < 2 || self.probe_every == 0 || self.eval_batch == 0 {
            return Err(Error::config("batch, seq_len, probe_every and eval_batch must be positive (seq_len >= 2)"));
        }
        Ok(())
    }

    pub fn train_batch_seed(&self, step: usize) -> u64 {
        rng::mix(rng::mix(self.seed, rng::tag::TRAIN_BATCH), step as u64)
    }

    pub fn eval_batch_seed(&self) -> u64 {
        rng::mix(self.seed, rng::tag::EVAL_BATCH)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<ProbeRecord>,
    /// Training loss of every step, in order.
    pub losses: Vec<f64>,
    pub n_attn: usize,
    pub n_layers: usize,
}

pub const TRAIN_LOG_SCHEMA: &str = "train-log-v1";

impl TrainLog {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "#schema={TRAIN_LOG_SCHEMA}")?;
        writeln!(w, "{}", ProbeRecord::csv_header(self.n_attn, self.n_layers).join(","))?;
        for r in &self.records {
            writeln!(w, "{}", r.csv_row().join(","))?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("CSV is ASCII")
    }

    pub fn last(&self) -> Option<&ProbeRecord> {
        self.records.last()
    }
}

pub struct TrainOutcome<T> {
    pub log: TrainLog,
    pub model: ModelState<T>,
    pub eval_batch: SequenceBatch,
}

/// Probe record for `model` on `batch`.
pub fn probe<T: Scalar>(
    model: &ModelState<T>,
    batch: &SequenceBatch,
    spec: &BigramSpec,
    step: usize,
    train_loss: Option<f64>,
    dormant_threshold: f64,
) -> Result<ProbeRecord> {
    let out = model.forward(batch, true)?;
    let cap = out.capture.as_ref().expect("capture requested");
    Ok(probes::probe_record(step, train_loss, out.loss.as_f64(), &out.position_losses, cap, batch, spec, dormant_threshold))
}

/// Consecutive steps above `10·log V` that count as divergence.
pub const DIVERGENCE_PATIENCE: usize = 100;

/// Train from a fresh initialization of `model_cfg`.
pub fn train<T: Scalar>(spec: &BigramSpec, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    let model = init_model(model_cfg)?;
    train_from(spec, model, cfg)
}

/// Train an existing model. Each step draws a fresh batch from its own seed;
/// probes run on one fixed evaluation batch at step 0, every `probe_every`
/// steps, and after the last step.
pub fn train_from<T: Scalar>(spec: &BigramSpec, mut model: ModelState<T>, cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if model.config.vocab != spec.vocab_size() + 1 {
        return Err(Error::config(format!(
            "model vocab {} does not match task vocab {} + 1",
            model.config.vocab,
            spec.vocab_size()
        )));
    }
    let eval = sample_batch(spec, cfg.eval_batch, cfg.seq_len, cfg.variant, cfg.eval_batch_seed())?;
    let blocks = model.block_kinds();
    let mut log = TrainLog {
        n_attn: blocks.iter().filter(|b| **b == crate::model::BlockKind::Attn).count(),
        n_layers: crate::model::layer_of_blocks(blocks).last().map_or(0, |l| l + 1),
        ..TrainLog::default()
    };
    let mut opt = Optimizer::new(&cfg.optimizer, model.num_params());
    let limit = 10.0 * (spec.vocab_size() as f64).ln();
    let mut over = 0usize;
    let mut flat = model.flat();

    for step in 0..=cfg.steps {
        if step == cfg.steps {
            match probe(&model, &eval, spec, step, None, cfg.dormant_threshold) {
                Ok(r) => log.records.push(r),
                Err(e) => return Err(diverged(step, log, e)),
            }
            break;
        }
        let batch = sample_batch(spec, cfg.batch, cfg.seq_len, cfg.variant, cfg.train_batch_seed(step))?;
        let (loss, grads) = match model.loss_and_grads(&batch) {
            Ok(x) => x,
            Err(e) => return Err(diverged(step, log, e)),
        };
        let loss = loss.as_f64();
        log.losses.push(loss);
        if step % cfg.probe_every == 0 {
            match probe(&model, &eval, spec, step, Some(loss), cfg.dormant_threshold) {
                Ok(r) => log.records.push(r),
                Err(e) => return Err(diverged(step, log, e)),
            }
        }
        over = if loss > limit { over + 1 } else { 0 };
        if over >= DIVERGENCE_PATIENCE {
            return Err(Error::Diverged { step, log: Box::new(log) });
        }
        let g: Vec<T> = grads.concat();
        if let Err(e) = opt.step(&mut flat, &g) {
            return Err(diverged(step, log, e));
        }
        model.set_flat(&flat)?;
    }
    Ok(TrainOutcome { log, model, eval_batch: eval })
}

fn diverged(step: usize, log: TrainLog, e: Error) -> Error {
    match e {
        Error::Numeric { .. } => Error::Diverged { step, log: Box::new(log) },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::default_spec;

    #[test]
    fn adam_zero_grad_no_decay_is_identity() {
        let mut p = vec![1.0, -2.0, 3.0];
        let mut s = AdamState::new(3, AdamConfig { weight_decay: 0.0, ..AdamConfig::default() });
        for _ in 0..5 {
            adam_step(&mut p, &[0.0; 3], &mut s).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(s.t, 5);
    }

    #[test]
    fn adam_first_step_by_hand() {
        let h = AdamConfig { weight_decay: 0.0, ..AdamConfig::default() };
        let g = [0.5, -1e-3, 2.0];
        let mut p = vec![0.0; 3];
        let mut s = AdamState::new(3, h);
        adam_step(&mut p, &g, &mut s).unwrap();
        for (pi, gi) in p.iter().zip(g) {
            // m̂ = g, v̂ = g², so Δ = −lr·g/(|g|+ε).
            let want = -h.lr * gi / (gi.abs() + h.eps);
            assert!((pi - want).abs() < 1e-18);
        }
    }

    #[test]
    fn adam_constant_gradient_moves_by_lr() {
        let h = AdamConfig { weight_decay: 0.0, ..AdamConfig::default() };
        let mut p: Vec<f64> = vec![0.0, 0.0];
        let mut s = AdamState::new(2, h);
        let g = [3.0, 1e-4];
        let mut prev = p.clone();
        for _ in 0..200 {
            adam_step(&mut p, &g, &mut s).unwrap();
            // m̂ = g and v̂ = g² exactly under a constant gradient.
            for ((a, b), gi) in p.iter().zip(&prev).zip(g) {
                let step = (a - b).abs();
                assert!((step - h.lr * gi / (gi + h.eps)).abs() < 1e-15);
                assert!((step - h.lr).abs() < 1e-4 * h.lr);
            }
            prev = p.clone();
        }
    }

    #[test]
    fn adam_rejects_nan() {
        let mut s = AdamState::new(1, AdamConfig::default());
        assert!(matches!(adam_step(&mut [0.0], &[f64::NAN], &mut s), Err(Error::Numeric { .. })));
        assert!(matches!(sgd_step(&mut [0.0], &[f64::INFINITY], 0.1), Err(Error::Numeric { .. })));
    }

    #[test]
    fn sgd_contracts_quadratic_and_agrees_in_sign_with_adam() {
        let mut p: Vec<f64> = vec![3.0, -4.0];
        let mut prev = 5.0;
        for _ in 0..20 {
            let g = p.clone();
            sgd_step(&mut p, &g, 0.5).unwrap();
            let n = (p[0] * p[0] + p[1] * p[1]).sqrt();
            assert!(n < prev);
            prev = n;
        }
        let g = [0.3, -7.0, 1e-6];
        let (mut a, mut b) = (vec![0.0f64; 3], vec![0.0f64; 3]);
        sgd_step(&mut a, &g, 0.03).unwrap();
        adam_step(&mut b, &g, &mut AdamState::new(3, AdamConfig::default())).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.signum(), y.signum());
        }
    }

    #[test]
    fn training_is_deterministic_and_logs() {
        let spec = default_spec();
        let mcfg = ModelConfig { d_model: 16, d_mlp: 32, ..ModelConfig::new("attn+mlp", 65, 17) };
        let tcfg = TrainConfig { steps: 6, batch: 4, seq_len: 16, probe_every: 3, eval_batch: 4, ..TrainConfig::default() };
        let a = train::<f64>(&spec, &mcfg, &tcfg).unwrap();
        let b = train::<f64>(&spec, &mcfg, &tcfg).unwrap();
        assert_eq!(a.log.to_csv_string(), b.log.to_csv_string());
        assert_eq!(a.log.losses.len(), 6);
        assert_eq!(a.log.records.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 3, 6]);
        let csv = a.log.to_csv_string();
        assert!(csv.starts_with("#schema=train-log-v1\nstep,train_loss"));

        let zero = train::<f64>(&spec, &mcfg, &TrainConfig { steps: 0, ..tcfg.clone() }).unwrap();
        assert_eq!(zero.log.records.len(), 1);
        assert_eq!(zero.log.records[0].step, 0);
    }
}
