//! The simplified one-layer model: closed-form predictions, loss and gradient
//! flow over the sink logits `α` and the ⟨s⟩ value state `β`, plus the toy
//! residual-growth recursion and a self-checking verification suite.
//!
//! For a non-trigger query `v` in a context with token counts `M_k`
//! (`M = Σ M_k`), the predicted next-token law is
//!
//! ```text
//! l_vi ∝ p_vi · exp[(M_i ξ_i + e^{α_v} β_i) / (e^{α_v} + M)]
//! ```
//!
//! and the loss is `Σ_v π̃_v KL(p_v ‖ l_v)`. All mixing weights are evaluated
//! as logistic functions of `α − ln M` so that large logits stay finite.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{sample_batch, BigramSpec, SequenceBatch, Variant};
use crate::error::{Error, Result};
use crate::optim::{adam_step, sgd_step, AdamConfig, AdamState, DIVERGENCE_PATIENCE};
use crate::probes::{excess_risks, fmt_f64, ExcessRisks};
use crate::rng::{self, mix, tag};
use crate::scalar::Scalar;
use crate::stats;
use crate::tensor::finite_diff_check;

/// Context length used to instantiate the counts `M_k`.
pub const CONTEXT_LEN: usize = 256;

/// `round(π_k · m)`, then nudged by ±1 (largest remainders first) so the counts sum to `m`.
pub fn context_counts(pi: &[f64], m: usize) -> Vec<usize> {
    let exact: Vec<f64> = pi.iter().map(|p| p * m as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.round() as usize).collect();
    let mut total: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..pi.len()).collect();
    while total < m {
        order.sort_by(|&a, &b| {
            let (ra, rb) = (exact[a] - counts[a] as f64, exact[b] - counts[b] as f64);
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        counts[order[0]] += 1;
        total += 1;
    }
    while total > m {
        order.sort_by(|&a, &b| {
            let (ra, rb) = (counts[a] as f64 - exact[a], counts[b] as f64 - exact[b]);
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        let k = *order.iter().find(|&&k| counts[k] > 0).expect("positive total has a positive count");
        counts[k] -= 1;
        total -= 1;
    }
    counts
}

/// `|N(0, 1)| + 0.1` on non-triggers, `0` on triggers, times `scale`.
pub fn draw_xi(spec: &BigramSpec, seed: u64, scale: f64) -> Vec<f64> {
    let mut r = rng::stream(mix(seed, tag::THEORY), 0);
    (0..spec.vocab_size())
        .map(|v| {
            let z: f64 = r.sample(StandardNormal);
            if spec.is_trigger(v) {
                0.0
            } else {
                scale * (z.abs() + 0.1)
            }
        })
        .collect()
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn log_softmax<T: Scalar>(z: &[T]) -> Vec<T> {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = m + z.iter().map(|&x| (x - m).exp()).sum::<T>().ln();
    z.iter().map(|&x| x - lse).collect()
}

fn softmax<T: Scalar>(z: &[T]) -> Vec<T> {
    log_softmax(z).into_iter().map(T::exp).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimplifiedParams<T> {
    /// Sink logits; trigger entries are held at zero.
    pub alpha: Vec<T>,
    /// Value state of ⟨s⟩.
    pub beta: Vec<T>,
    /// Value-state scales of ordinary tokens; zero on triggers.
    pub xi: Vec<T>,
    /// Trigger attention logit on the previous position.
    pub lambda: T,
    pub counts: Vec<usize>,
    /// Row-major `V × V` transition matrix.
    pub p: Vec<T>,
    pub pi_tilde: Vec<T>,
    pub triggers: Vec<bool>,
}

impl<T: Scalar> SimplifiedParams<T> {
    /// `α = 0`, `β = 0`, `λ = 0`, counts from the stationary law at [`CONTEXT_LEN`].
    pub fn from_spec(spec: &BigramSpec, xi: &[f64]) -> Result<Self> {
        let v = spec.vocab_size();
        if xi.len() != v {
            return Err(Error::arg(format!("xi has {} entries for vocabulary {v}", xi.len())));
        }
        let sp = Self {
            alpha: vec![T::zero(); v],
            beta: vec![T::zero(); v],
            xi: xi.iter().map(|&x| T::lit(x)).collect(),
            lambda: T::zero(),
            counts: context_counts(spec.pi(), CONTEXT_LEN),
            p: spec.transition().iter().map(|&x| T::lit(x)).collect(),
            pi_tilde: spec.pi_tilde().iter().map(|&x| T::lit(x)).collect(),
            triggers: spec.trigger_flags().to_vec(),
        };
        sp.validate()?;
        Ok(sp)
    }

    pub fn vocab(&self) -> usize {
        self.alpha.len()
    }

    /// `M = Σ M_k`.
    pub fn context_len(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn row(&self, v: usize) -> &[T] {
        let n = self.vocab();
        &self.p[v * n..(v + 1) * n]
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.vocab();
        let lens = [self.beta.len(), self.xi.len(), self.counts.len(), self.pi_tilde.len(), self.triggers.len()];
        if v == 0 || lens.iter().any(|&l| l != v) || self.p.len() != v * v {
            return Err(Error::arg("simplified parameters have inconsistent lengths"));
        }
        if self.context_len() == 0 {
            return Err(Error::arg("context counts sum to zero"));
        }
        for k in 0..v {
            if self.xi[k] < T::zero() || (self.triggers[k] && self.xi[k] != T::zero()) {
                return Err(Error::arg(format!("xi[{k}] must be >= 0 and zero on triggers")));
            }
            if self.triggers[k] && self.alpha[k] != T::zero() {
                return Err(Error::arg(format!("alpha[{k}] must be zero on a trigger")));
            }
            if self.row(k).iter().any(|&x| x <= T::zero()) {
                return Err(Error::arg(format!("transition row {k} must be strictly positive")));
            }
        }
        Ok(())
    }

    /// The dynamics results assume the products `M_i ξ_i` are not all equal.
    pub fn dynamics_assumption_holds(&self) -> bool {
        let prods: Vec<T> = self.counts.iter().zip(&self.xi).map(|(&m, &x)| T::lit(m as f64) * x).collect();
        prods.iter().any(|&x| x != prods[0])
    }

    /// Move to the stationary family: `α = a` on non-triggers, `β = c·1 − e^{−a} M∘ξ`.
    pub fn set_stable_phase(&mut self, a: T, c: T) {
        let e = (-a).exp();
        for k in 0..self.vocab() {
            self.alpha[k] = if self.triggers[k] { T::zero() } else { a };
            self.beta[k] = c - e * T::lit(self.counts[k] as f64) * self.xi[k];
        }
    }

    /// Mixing weight `e^{α_v} / (e^{α_v} + M)` and its complement.
    fn weights(&self, v: usize) -> (T, T) {
        let x = self.alpha[v] - T::lit(self.context_len() as f64).ln();
        (sigmoid(x), sigmoid(-x))
    }

    /// Attention contribution `(M∘ξ + e^α β) / (e^α + M)` to a non-trigger query's logits.
    fn attn_logits(&self, v: usize) -> Vec<T> {
        let (w, wc) = self.weights(v);
        let m = T::lit(self.context_len() as f64);
        (0..self.vocab())
            .map(|i| w * self.beta[i] + wc * T::lit(self.counts[i] as f64) * self.xi[i] / m)
            .collect()
    }

    /// Output logits `ln p_v + (M∘ξ + e^α β) / (e^α + M)` of a non-trigger query.
    fn row_logits(&self, v: usize) -> Vec<T> {
        self.attn_logits(v).into_iter().zip(self.row(v)).map(|(a, &p)| p.ln() + a).collect()
    }
}

/// Next-token law `l_v` of a non-trigger query.
pub fn predicted_transition<T: Scalar>(sp: &SimplifiedParams<T>, v: usize) -> Result<Vec<T>> {
    if v >= sp.vocab() || sp.triggers[v] {
        return Err(Error::arg(format!("predicted_transition: {v} is not a non-trigger token")));
    }
    Ok(softmax(&sp.row_logits(v)))
}

/// `Σ_v π̃_v KL(p_v ‖ l_v)` over non-trigger `v`.
///
/// With `a` the attention part of the logits and `ā = Σ_i p_vi a_i`,
/// `KL = ln Σ_i p_vi e^{a_i − ā}`, evaluated through `ln_1p`/`exp_m1` so small
/// divergences keep full relative precision.
pub fn simplified_loss<T: Scalar>(sp: &SimplifiedParams<T>) -> T {
    let mut total = T::zero();
    for v in (0..sp.vocab()).filter(|&v| !sp.triggers[v]) {
        let a = sp.attn_logits(v);
        let p = sp.row(v);
        let abar: T = p.iter().zip(&a).map(|(&p, &a)| p * a).sum();
        let s: T = p.iter().zip(&a).map(|(&p, &a)| p * (a - abar).exp_m1()).sum();
        total = total + sp.pi_tilde[v] * s.ln_1p();
    }
    total
}

/// Negative gradient `(dα/dt, dβ/dt)` of [`simplified_loss`].
pub fn closed_gradients<T: Scalar>(sp: &SimplifiedParams<T>) -> (Vec<T>, Vec<T>) {
    let log_p: Vec<T> = sp.p.iter().map(|x| x.ln()).collect();
    closed_gradients_with(sp, &log_p)
}

fn closed_gradients_with<T: Scalar>(sp: &SimplifiedParams<T>, log_p: &[T]) -> (Vec<T>, Vec<T>) {
    let n = sp.vocab();
    let m = T::lit(sp.context_len() as f64);
    let mut da = vec![T::zero(); n];
    let mut db = vec![T::zero(); n];
    for v in (0..n).filter(|&v| !sp.triggers[v]) {
        let z: Vec<T> = sp.attn_logits(v).into_iter().zip(&log_p[v * n..(v + 1) * n]).map(|(a, &lp)| a + lp).collect();
        let l = softmax(&z);
        let (w, wc) = sp.weights(v);
        let p = sp.row(v);
        let mut s = T::zero();
        for i in 0..n {
            let r = p[i] - l[i];
            s = s + r * (m * sp.beta[i] - T::lit(sp.counts[i] as f64) * sp.xi[i]);
            db[i] = db[i] + sp.pi_tilde[v] * w * r;
        }
        da[v] = sp.pi_tilde[v] * w * wc / m * s;
    }
    (da, db)
}

/// `∂l_vk / ∂α_v` for every `k`.
pub fn dl_dalpha<T: Scalar>(sp: &SimplifiedParams<T>, v: usize) -> Result<Vec<T>> {
    let l = predicted_transition(sp, v)?;
    let (w, wc) = sp.weights(v);
    let m = T::lit(sp.context_len() as f64);
    let dz: Vec<T> = (0..sp.vocab())
        .map(|k| w * wc * (sp.beta[k] - T::lit(sp.counts[k] as f64) * sp.xi[k] / m))
        .collect();
    let mean: T = l.iter().zip(&dz).map(|(&a, &b)| a * b).sum();
    Ok(l.iter().zip(&dz).map(|(&lk, &dk)| lk * (dk - mean)).collect())
}

/// `∂l_vk / ∂β_j` as a row-major `V × V` matrix indexed `[k][j]`.
pub fn dl_dbeta<T: Scalar>(sp: &SimplifiedParams<T>, v: usize) -> Result<Vec<T>> {
    let l = predicted_transition(sp, v)?;
    let (w, _) = sp.weights(v);
    let n = sp.vocab();
    let mut out = vec![T::zero(); n * n];
    for k in 0..n {
        for j in 0..n {
            let delta = if k == j { T::one() } else { T::zero() };
            out[k * n + j] = w * l[k] * (delta - l[j]);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LemmaSums<T> {
    /// `Σ_k ∂l_vk/∂α_v`.
    pub alpha: T,
    /// `max_k |Σ_j ∂l_vk/∂β_j|`.
    pub beta: T,
}

pub fn lemma_sum_identities<T: Scalar>(sp: &SimplifiedParams<T>, v: usize) -> Result<LemmaSums<T>> {
    let alpha = dl_dalpha(sp, v)?.into_iter().sum();
    let n = sp.vocab();
    let db = dl_dbeta(sp, v)?;
    let beta = (0..n)
        .map(|k| db[k * n..(k + 1) * n].iter().copied().sum::<T>().abs())
        .fold(T::zero(), T::max);
    Ok(LemmaSums { alpha, beta })
}

/// `diag(q) − q qᵀ`.
pub fn gram_matrix(q: &[f64]) -> DMatrix<f64> {
    let n = q.len();
    DMatrix::from_fn(n, n, |i, j| if i == j { q[i] - q[i] * q[j] } else { -q[i] * q[j] })
}

/// Smallest eigenvalue of `diag(q) − q qᵀ`.
pub fn gram_psd_check(q: &[f64]) -> f64 {
    min_eigenvalue(gram_matrix(q))
}

fn min_eigenvalue(g: DMatrix<f64>) -> f64 {
    SymmetricEigen::new(g).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

/// `Σ_v π̃_v (diag(p_v) − p_v p_vᵀ)`, the loss curvature in `β` at any point where `l = p`.
pub fn stable_gram(sp: &SimplifiedParams<f64>) -> DMatrix<f64> {
    let n = sp.vocab();
    let mut g = DMatrix::zeros(n, n);
    for v in (0..n).filter(|&v| !sp.triggers[v]) {
        g += gram_matrix(sp.row(v)) * sp.pi_tilde[v];
    }
    g
}

/// Smallest eigenvalue of `g` restricted to the orthogonal complement of `1`.
pub fn projected_min_eigenvalue(g: &DMatrix<f64>) -> f64 {
    let n = g.nrows();
    let proj = DMatrix::<f64>::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64);
    let eig = SymmetricEigen::new(&proj * g * &proj);
    let ones = 1.0 / (n as f64).sqrt();
    // Drop the eigenvector that spans the all-ones direction.
    let skip = (0..n)
        .max_by(|&a, &b| {
            let ca = eig.eigenvectors.column(a).sum().abs() * ones;
            let cb = eig.eigenvectors.column(b).sum().abs() * ones;
            ca.total_cmp(&cb)
        })
        .unwrap_or(0);
    (0..n).filter(|&i| i != skip).map(|i| eig.eigenvalues[i]).fold(f64::INFINITY, f64::min)
}

/// `‖g · 1‖_∞`.
pub fn ones_residual(g: &DMatrix<f64>) -> f64 {
    (g * nalgebra::DVector::from_element(g.ncols(), 1.0)).amax()
}

// ---------------------------------------------------------------------------
// Gradient flow

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowMode {
    /// `β` frozen, `α` follows the flow.
    FixBeta,
    /// `α` frozen, `β` follows the flow.
    FixAlpha,
    #[default]
    Joint,
}

impl FlowMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FlowMode::FixBeta => "fix_beta",
            FlowMode::FixAlpha => "fix_alpha",
            FlowMode::Joint => "joint",
        }
    }
}

impl std::str::FromStr for FlowMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fix_beta" => Ok(FlowMode::FixBeta),
            "fix_alpha" => Ok(FlowMode::FixAlpha),
            "joint" => Ok(FlowMode::Joint),
            _ => Err(Error::config(format!("unknown flow mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub mode: FlowMode,
    pub t_end: f64,
    pub rtol: f64,
    pub atol: f64,
    /// Log-spaced snapshot count between `t_first` and `t_end` (plus `t = 0`).
    pub snapshots: usize,
    pub t_first: f64,
    pub max_steps: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self { mode: FlowMode::Joint, t_end: 1e5, rtol: 1e-8, atol: 1e-10, snapshots: 200, t_first: 1e-2, max_steps: 5_000_000 }
    }
}

impl FlowConfig {
    pub fn times(&self) -> Vec<f64> {
        let n = self.snapshots.max(2);
        let (a, b) = (self.t_first.ln(), self.t_end.ln());
        let mut t = vec![0.0];
        t.extend((0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()));
        *t.last_mut().unwrap() = self.t_end;
        t
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlowTrajectory {
    pub mode: FlowMode,
    pub method: String,
    pub rtol: f64,
    pub atol: f64,
    pub t: Vec<f64>,
    pub alpha: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    pub loss: Vec<f64>,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
}

pub const FLOW_SCHEMA: &str = "flow-v1";
const METHOD: &str = "dormand-prince 5(4), adaptive";

impl FlowTrajectory {
    /// Mean of the non-trigger sink logits at each snapshot.
    pub fn alpha_mean(&self, triggers: &[bool]) -> Vec<f64> {
        self.alpha.iter().map(|a| stats::mean(&non_trigger(a, triggers))).collect()
    }

    pub fn alpha_std(&self, triggers: &[bool]) -> Vec<f64> {
        self.alpha.iter().map(|a| stats::std_dev(&non_trigger(a, triggers))).collect()
    }

    /// Snapshots `k` where `loss` rises by more than `tol` per unit time.
    pub fn loss_increases(&self, tol: f64) -> Vec<usize> {
        (1..self.t.len())
            .filter(|&k| self.loss[k] > self.loss[k - 1] + tol * (self.t[k] - self.t[k - 1]))
            .collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let v = self.alpha.first().map_or(0, Vec::len);
        writeln!(w, "#schema={FLOW_SCHEMA} mode={} method={METHOD} rtol={} atol={}", self.mode.as_str(), self.rtol, self.atol)?;
        let mut head = vec!["t".to_string(), "loss".to_string()];
        head.extend((0..v).map(|k| format!("alpha_{k}")));
        head.extend((0..v).map(|k| format!("beta_{k}")));
        writeln!(w, "{}", head.join(","))?;
        for k in 0..self.t.len() {
            let mut row = vec![fmt_f64(self.t[k]), fmt_f64(self.loss[k])];
            row.extend(self.alpha[k].iter().map(|&x| fmt_f64(x)));
            row.extend(self.beta[k].iter().map(|&x| fmt_f64(x)));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

fn non_trigger(x: &[f64], triggers: &[bool]) -> Vec<f64> {
    x.iter().zip(triggers).filter(|(_, &t)| !t).map(|(&a, _)| a).collect()
}

// Dormand–Prince tableau (the flow is autonomous, so the nodes are not needed).
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// Fifth-order weights minus embedded fourth-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Result of [`integrate`]: the states at the requested times, or the failure
/// time, reason and the states reached so far.
pub type OdeResult = std::result::Result<(Vec<Vec<f64>>, usize, usize), (f64, String, Vec<Vec<f64>>)>;

/// Adaptive Dormand–Prince integration of `y' = f(y)` with output at `times`
/// (ascending, starting at the initial time).
pub fn integrate<F>(mut f: F, y0: &[f64], times: &[f64], rtol: f64, atol: f64, max_steps: usize) -> OdeResult
where
    F: FnMut(&[f64], &mut [f64]),
{
    let n = y0.len();
    let mut y = y0.to_vec();
    let mut out = vec![y.clone()];
    let mut k = vec![vec![0.0; n]; 7];
    let mut tmp = vec![0.0; n];
    f(&y, &mut k[0]);
    let mut t = times[0];
    let mut h = (times.get(1).copied().unwrap_or(t) - t).abs().max(1e-6) * 0.1;
    let (mut accepted, mut rejected) = (0usize, 0usize);
    for &target in &times[1..] {
        while t < target {
            if accepted + rejected >= max_steps {
                return Err((t, format!("step budget {max_steps} exhausted"), out));
            }
            let last = t + h >= target;
            let step = if last { target - t } else { h };
            if step <= 1e-14 * t.abs().max(1.0) {
                return Err((t, format!("step size underflow (h = {step:e})"), out));
            }
            for s in 1..7 {
                for i in 0..n {
                    let mut acc = 0.0;
                    for (j, kj) in k.iter().enumerate().take(s) {
                        acc += A[s][j] * kj[i];
                    }
                    tmp[i] = y[i] + step * acc;
                }
                f(&tmp, &mut k[s]);
            }
            // tmp holds the fifth-order solution (stage 7 is evaluated there).
            let mut err = 0.0;
            for i in 0..n {
                let e: f64 = (0..7).map(|j| E[j] * k[j][i]).sum::<f64>() * step;
                let sc = atol + rtol * y[i].abs().max(tmp[i].abs());
                err += (e / sc).powi(2);
            }
            let err = (err / n.max(1) as f64).sqrt();
            if !err.is_finite() {
                return Err((t, "non-finite state".into(), out));
            }
            if err <= 1.0 {
                t = if last { target } else { t + step };
                y.copy_from_slice(&tmp);
                k.swap(0, 6);
                accepted += 1;
                let grow = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
                if !last {
                    h = step * grow;
                } else {
                    h = h.max(step * grow);
                }
            } else {
                rejected += 1;
                h = step * (0.9 * err.powf(-0.2)).clamp(0.1, 1.0);
            }
        }
        out.push(y.clone());
    }
    Ok((out, accepted, rejected))
}

/// Integrate the gradient flow of [`simplified_loss`] from `sp0`.
pub fn flow_integrate(sp0: &SimplifiedParams<f64>, cfg: &FlowConfig) -> Result<FlowTrajectory> {
    sp0.validate()?;
    if !(cfg.t_end > cfg.t_first && cfg.t_first > 0.0) {
        return Err(Error::config("flow needs 0 < t_first < t_end"));
    }
    let v = sp0.vocab();
    let mode = cfg.mode;
    let mut work = sp0.clone();
    let log_p: Vec<f64> = sp0.p.iter().map(|x| x.ln()).collect();
    let rhs = |y: &[f64], dy: &mut [f64], sp: &mut SimplifiedParams<f64>| {
        sp.alpha.copy_from_slice(&y[..v]);
        sp.beta.copy_from_slice(&y[v..]);
        let (da, db) = closed_gradients_with(sp, &log_p);
        for k in 0..v {
            dy[k] = if mode == FlowMode::FixAlpha { 0.0 } else { da[k] };
            dy[v + k] = if mode == FlowMode::FixBeta { 0.0 } else { db[k] };
        }
    };
    let mut y0 = sp0.alpha.clone();
    y0.extend_from_slice(&sp0.beta);
    let times = cfg.times();
    let result = integrate(|y, dy| rhs(y, dy, &mut work), &y0, &times, cfg.rtol, cfg.atol, cfg.max_steps);
    let build = |states: &[Vec<f64>], acc: usize, rej: usize| {
        let mut sp = sp0.clone();
        let mut tr = FlowTrajectory {
            mode,
            method: METHOD.into(),
            rtol: cfg.rtol,
            atol: cfg.atol,
            accepted_steps: acc,
            rejected_steps: rej,
            ..FlowTrajectory::default()
        };
        for (y, &t) in states.iter().zip(&times) {
            sp.alpha.copy_from_slice(&y[..v]);
            sp.beta.copy_from_slice(&y[v..]);
            tr.t.push(t);
            tr.alpha.push(sp.alpha.clone());
            tr.beta.push(sp.beta.clone());
            tr.loss.push(simplified_loss(&sp));
        }
        tr
    };
    match result {
        Ok((states, acc, rej)) => Ok(build(&states, acc, rej)),
        Err((t, detail, states)) => Err(Error::Integrator { t, detail, partial: Box::new(build(&states, 0, 0)) }),
    }
}

/// Fixed point of the `β` flow at fixed `α`: `c·1 − e^{−α}∘M∘ξ`, with `c` chosen to keep `mean(β)`.
///
/// Every row's logits become `ln p_v` plus a per-row constant, so `l = p`.
pub fn beta_star(sp: &SimplifiedParams<f64>) -> Vec<f64> {
    // Requires a common α on non-triggers (the per-row constant is then shared).
    let a = sp.alpha.iter().zip(&sp.triggers).find(|(_, &t)| !t).map_or(0.0, |(&a, _)| a);
    let e = (-a).exp();
    let mx: Vec<f64> = sp.counts.iter().zip(&sp.xi).map(|(&m, &x)| m as f64 * x).collect();
    let c = stats::mean(&sp.beta) + e * stats::mean(&mx);
    mx.iter().map(|m| c - e * m).collect()
}

// ---------------------------------------------------------------------------
// Construction limit

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LadderPoint {
    pub alpha: f64,
    pub xi: f64,
    pub lambda: f64,
    /// Worst TV over non-trigger rows against `p_v`.
    pub tv_bigram: f64,
    /// Worst TV over trigger rows against the one-hot copy target.
    pub tv_copy: f64,
}

impl LadderPoint {
    pub fn tv(&self) -> f64 {
        self.tv_bigram.max(self.tv_copy)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstructionReport {
    pub points: Vec<LadderPoint>,
}

impl ConstructionReport {
    pub fn max_tv(&self) -> Vec<f64> {
        self.points.iter().map(LadderPoint::tv).collect()
    }

    pub fn strictly_decreasing(&self) -> bool {
        self.max_tv().windows(2).all(|w| w[1] < w[0])
    }
}

/// Next-token law of a trigger query whose previous token is `c`.
///
/// Attention logits over `(⟨s⟩, v_1, …, v_n)` are `(0, …, 0, λ, 0)`; values are
/// `β` for ⟨s⟩ and `ξ_{v_i} e_{v_i}` for tokens, and the feed-forward part is zero.
/// The context holds `counts` (forced to include `c` at least once).
pub fn trigger_transition<T: Scalar>(sp: &SimplifiedParams<T>, c: usize) -> Vec<T> {
    let mut counts = sp.counts.clone();
    counts[c] = counts[c].max(1);
    let n = T::lit(counts.iter().sum::<usize>() as f64);
    let x = sp.lambda - n.ln();
    let (u, uc) = (sigmoid(x), sigmoid(-x));
    let z: Vec<T> = (0..sp.vocab())
        .map(|k| {
            let others = T::lit((counts[k] - usize::from(k == c)) as f64);
            let base = uc / n * (sp.beta[k] + sp.xi[k] * others);
            if k == c {
                base + u * sp.xi[c]
            } else {
                base
            }
        })
        .collect();
    softmax(&z)
}

/// Evaluate `(α, ξ, λ)` scale triples with `β = 0`: `α = a·1`, `ξ = x·1` on
/// non-triggers, `λ = l`, counts from the stationary law.
pub fn construction_limit_check(spec: &BigramSpec, ladder: &[(f64, f64, f64)]) -> Result<ConstructionReport> {
    let v = spec.vocab_size();
    let mut points = Vec::with_capacity(ladder.len());
    for &(a, x, l) in ladder {
        let xi: Vec<f64> = (0..v).map(|k| if spec.is_trigger(k) { 0.0 } else { x }).collect();
        let mut sp = SimplifiedParams::<f64>::from_spec(spec, &xi)?;
        sp.lambda = l;
        for k in (0..v).filter(|&k| !spec.is_trigger(k)) {
            sp.alpha[k] = a;
        }
        let mut tv_bigram = 0.0f64;
        for k in (0..v).filter(|&k| !spec.is_trigger(k)) {
            let lk = predicted_transition(&sp, k)?;
            let tv = 0.5 * lk.iter().zip(sp.row(k)).map(|(a, b)| (a - b).abs()).sum::<f64>();
            tv_bigram = tv_bigram.max(tv);
        }
        // A trigger's ξ is zero, so only ordinary tokens can be copied.
        let tv_copy = (0..v)
            .filter(|&c| !spec.is_trigger(c))
            .map(|c| 1.0 - trigger_transition(&sp, c)[c])
            .fold(0.0f64, f64::max);
        points.push(LadderPoint { alpha: a, xi: x, lambda: l, tv_bigram, tv_copy });
    }
    Ok(ConstructionReport { points })
}

// ---------------------------------------------------------------------------
// Trained simplified model

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimplifiedTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub probe_every: usize,
    pub eval_batch: usize,
    /// When false `λ` stays at its initial value.
    pub train_lambda: bool,
    /// Standard deviation of the Gaussian feed-forward table and of `β`.
    pub init_std: f64,
    pub seed: u64,
}

impl Default for SimplifiedTrainConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            batch: 64,
            seq_len: 128,
            lr: 0.03,
            probe_every: 50,
            eval_batch: 64,
            train_lambda: true,
            init_std: 1.0,
            seed: 0,
        }
    }
}

/// Trainable state: `Val_⟨s⟩ = O β`, token values `ξ_v e_v`, and a full
/// feed-forward logit table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimplifiedModel {
    pub vocab: usize,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    /// Row-major `V × V`.
    pub o: Vec<f64>,
    pub xi: Vec<f64>,
    pub lambda: f64,
    /// Row-major `V × V`; row `v` is added to the logits of query `v`.
    pub mlp: Vec<f64>,
    pub triggers: Vec<bool>,
}

const N_SCALARS: usize = 1;

impl SimplifiedModel {
    pub fn init(spec: &BigramSpec, cfg: &SimplifiedTrainConfig) -> Self {
        let v = spec.vocab_size();
        let mut r = rng::stream(mix(cfg.seed, tag::INIT), 0);
        let mut normal = |s: f64| -> f64 { s * r.sample::<f64, _>(StandardNormal) };
        let beta = (0..v).map(|_| normal(cfg.init_std)).collect();
        let mlp = (0..v * v).map(|_| normal(cfg.init_std)).collect();
        let mut o = vec![0.0; v * v];
        for k in 0..v {
            o[k * v + k] = 1.0;
        }
        Self {
            vocab: v,
            alpha: vec![0.0; v],
            beta,
            o,
            xi: vec![0.0; v],
            lambda: 0.0,
            mlp,
            triggers: spec.trigger_flags().to_vec(),
        }
    }

    /// `O β`.
    pub fn sink_value(&self) -> Vec<f64> {
        let v = self.vocab;
        (0..v).map(|i| (0..v).map(|j| self.o[i * v + j] * self.beta[j]).sum()).collect()
    }

    fn flat(&self) -> Vec<f64> {
        let mut f = Vec::with_capacity(self.len());
        f.extend_from_slice(&self.alpha);
        f.extend_from_slice(&self.beta);
        f.extend_from_slice(&self.o);
        f.extend_from_slice(&self.xi);
        f.push(self.lambda);
        f.extend_from_slice(&self.mlp);
        f
    }

    fn len(&self) -> usize {
        let v = self.vocab;
        3 * v + 2 * v * v + N_SCALARS
    }

    fn set_flat(&mut self, f: &[f64]) {
        let v = self.vocab;
        let mut at = 0;
        let mut take = |n: usize| {
            let s = &f[at..at + n];
            at += n;
            s
        };
        self.alpha.copy_from_slice(take(v));
        self.beta.copy_from_slice(take(v));
        self.o.copy_from_slice(take(v * v));
        self.xi.copy_from_slice(take(v));
        self.lambda = take(1)[0];
        self.mlp.copy_from_slice(take(v * v));
    }

    /// Mean loss, per-position losses (`[B, L]`, zero where unscored) and,
    /// if requested, the flat gradient.
    pub fn loss(&self, batch: &SequenceBatch, with_grad: bool) -> Result<(f64, Vec<f64>, Option<Vec<f64>>)> {
        if batch.variant() != Variant::Bb {
            return Err(Error::arg("the simplified model is defined for the BB variant"));
        }
        let v = self.vocab;
        let l = batch.len();
        let ob = self.sink_value();
        let count = batch.batch() * (l - 2);
        let inv = 1.0 / count as f64;
        let mut losses = vec![0.0; batch.batch() * l];
        let mut g_alpha = vec![0.0; v];
        let mut g_ob = vec![0.0; v];
        let mut g_xi = vec![0.0; v];
        let mut g_lambda = 0.0;
        let mut g_mlp = vec![0.0; v * v];
        let mut cnt = vec![0.0; v];
        let mut out = vec![0.0; v];
        let mut z = vec![0.0; v];
        let mut total = 0.0;
        for b in 0..batch.batch() {
            cnt.iter_mut().for_each(|c| *c = 0.0);
            for n in 1..l - 1 {
                let tok = batch.token(b, n);
                cnt[tok] += 1.0;
                let target = batch.token(b, n + 1);
                let nf = n as f64;
                let copy = self.triggers[tok] && n >= 2;
                let (u, uc, c) = if copy {
                    let x = self.lambda - nf.ln();
                    (sigmoid(x), sigmoid(-x), batch.token(b, n - 1))
                } else {
                    let x = self.alpha[tok] - nf.ln();
                    (sigmoid(x), sigmoid(-x), usize::MAX)
                };
                for k in 0..v {
                    out[k] = if copy {
                        let others = cnt[k] - if k == c { 1.0 } else { 0.0 };
                        let mut o = uc / nf * (ob[k] + self.xi[k] * others);
                        if k == c {
                            o += u * self.xi[c];
                        }
                        o
                    } else {
                        u * ob[k] + uc / nf * self.xi[k] * cnt[k]
                    };
                    z[k] = self.mlp[tok * v + k] + out[k];
                }
                let ls = log_softmax(&z);
                let li = -ls[target];
                if !li.is_finite() {
                    return Err(Error::numeric("simplified_loss", "non-finite loss"));
                }
                losses[b * l + n] = li;
                total += li;
                if !with_grad {
                    continue;
                }
                for k in 0..v {
                    // d loss / d z_k
                    let dz = (ls[k].exp() - if k == target { 1.0 } else { 0.0 }) * inv;
                    g_mlp[tok * v + k] += dz;
                    if copy {
                        let others = cnt[k] - if k == c { 1.0 } else { 0.0 };
                        g_ob[k] += uc / nf * dz;
                        g_xi[k] += uc / nf * others * dz;
                        if k == c {
                            g_xi[k] += u * dz;
                        }
                        let sel = if k == c { self.xi[c] } else { 0.0 };
                        g_lambda += dz * u * (sel - out[k]);
                    } else {
                        g_ob[k] += u * dz;
                        g_xi[k] += uc / nf * cnt[k] * dz;
                        g_alpha[tok] += dz * u * (ob[k] - out[k]);
                    }
                }
            }
        }
        let mean = total * inv;
        if !with_grad {
            return Ok((mean, losses, None));
        }
        // O β: dO = g_ob βᵀ, dβ = Oᵀ g_ob.
        let mut g_o = vec![0.0; v * v];
        let mut g_beta = vec![0.0; v];
        for i in 0..v {
            for j in 0..v {
                g_o[i * v + j] = g_ob[i] * self.beta[j];
                g_beta[j] += self.o[i * v + j] * g_ob[i];
            }
        }
        for k in 0..v {
            if self.triggers[k] {
                g_alpha[k] = 0.0;
                g_xi[k] = 0.0;
            }
        }
        let mut g = Vec::with_capacity(self.len());
        g.extend_from_slice(&g_alpha);
        g.extend_from_slice(&g_beta);
        g.extend_from_slice(&g_o);
        g.extend_from_slice(&g_xi);
        g.push(g_lambda);
        g.extend_from_slice(&g_mlp);
        Ok((mean, losses, Some(g)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimplifiedRecord {
    pub step: usize,
    pub train_loss: Option<f64>,
    pub eval_loss: f64,
    pub excess: ExcessRisks,
    /// Mean over non-trigger queries of `α_v − mean_keys(logit)`.
    pub delta_logit: f64,
    pub attn_weight_bos: f64,
    /// `‖O β‖`.
    pub sink_value_norm: f64,
    /// Mean `|ξ_v|` over non-trigger tokens.
    pub token_value_norm: f64,
    pub lambda: f64,
}

pub const SIMPLIFIED_SCHEMA: &str = "simplified-log-v1";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimplifiedLog {
    pub records: Vec<SimplifiedRecord>,
    pub losses: Vec<f64>,
}

impl SimplifiedLog {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "#schema={SIMPLIFIED_SCHEMA}")?;
        writeln!(
            w,
            "step,train_loss,eval_loss,bigram_excess,backcopy_excess,delta_logit,attn_weight_bos,sink_value_norm,token_value_norm,lambda"
        )?;
        let opt = |x: Option<f64>| x.map_or(String::new(), fmt_f64);
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{}",
                r.step,
                opt(r.train_loss),
                fmt_f64(r.eval_loss),
                opt(r.excess.bigram),
                opt(r.excess.backcopy),
                fmt_f64(r.delta_logit),
                fmt_f64(r.attn_weight_bos),
                fmt_f64(r.sink_value_norm),
                fmt_f64(r.token_value_norm),
                fmt_f64(r.lambda)
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("csv is ascii")
    }
}

fn simplified_record(
    model: &SimplifiedModel,
    eval: &SequenceBatch,
    spec: &BigramSpec,
    step: usize,
    train_loss: Option<f64>,
) -> Result<SimplifiedRecord> {
    let (eval_loss, losses, _) = model.loss(eval, false)?;
    let (mut dl, mut aw, mut n) = (0.0, 0.0, 0usize);
    for b in 0..eval.batch() {
        for q in 1..eval.len() {
            let t = eval.token(b, q);
            if spec.is_trigger(t) {
                continue;
            }
            let a = model.alpha[t];
            dl += a - a / (q + 1) as f64;
            aw += sigmoid(a - (q as f64).ln());
            n += 1;
        }
    }
    let nt: Vec<f64> = non_trigger(&model.xi, &model.triggers).iter().map(|x| x.abs()).collect();
    Ok(SimplifiedRecord {
        step,
        train_loss,
        eval_loss,
        excess: excess_risks(&losses, eval, spec),
        delta_logit: dl / n.max(1) as f64,
        attn_weight_bos: aw / n.max(1) as f64,
        sink_value_norm: model.sink_value().iter().map(|x| x * x).sum::<f64>().sqrt(),
        token_value_norm: stats::mean(&nt),
        lambda: model.lambda,
    })
}

/// Adam on sampled BB batches; probes on a fixed evaluation batch.
pub fn train_simplified_adam(spec: &BigramSpec, cfg: &SimplifiedTrainConfig) -> Result<(SimplifiedModel, SimplifiedLog)> {
    if cfg.steps == 0 || cfg.batch == 0 || cfg.seq_len < 3 || cfg.probe_every == 0 || cfg.eval_batch == 0 {
        return Err(Error::config("simplified training needs positive steps, batches, probe_every and seq_len >= 3"));
    }
    let mut model = SimplifiedModel::init(spec, cfg);
    let eval = sample_batch(spec, cfg.eval_batch, cfg.seq_len, Variant::Bb, mix(cfg.seed, tag::EVAL_BATCH))?;
    let hyper = AdamConfig { lr: cfg.lr, weight_decay: 0.0, ..AdamConfig::default() };
    let mut state = AdamState::new(model.len(), hyper);
    let mut flat = model.flat();
    let lambda_at = 3 * model.vocab + model.vocab * model.vocab;
    let limit = 10.0 * (spec.vocab_size() as f64).ln();
    let mut over = 0usize;
    let mut log = SimplifiedLog::default();
    let batch_seed = mix(cfg.seed, tag::TRAIN_BATCH);
    for step in 0..cfg.steps {
        let batch = sample_batch(spec, cfg.batch, cfg.seq_len, Variant::Bb, mix(batch_seed, step as u64))?;
        let (loss, _, g) = model.loss(&batch, true)?;
        let mut g = g.expect("gradient requested");
        log.losses.push(loss);
        if step % cfg.probe_every == 0 {
            log.records.push(simplified_record(&model, &eval, spec, step, Some(loss))?);
        }
        over = if loss > limit { over + 1 } else { 0 };
        if over >= DIVERGENCE_PATIENCE {
            return Err(Error::numeric("train_simplified_adam", format!("diverged at step {step}")));
        }
        if !cfg.train_lambda {
            g[lambda_at] = 0.0;
        }
        adam_step(&mut flat, &g, &mut state)?;
        model.set_flat(&flat);
    }
    log.records.push(simplified_record(&model, &eval, spec, cfg.steps, None)?);
    Ok((model, log))
}

// ---------------------------------------------------------------------------
// Residual-growth recursion

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualOptimizer {
    #[default]
    Adam,
    Sgd,
}

impl std::str::FromStr for ResidualOptimizer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(ResidualOptimizer::Adam),
            "sgd" => Ok(ResidualOptimizer::Sgd),
            _ => Err(Error::config(format!("unknown optimizer {s:?}"))),
        }
    }
}

pub const RESIDUAL_LR: f64 = 0.3;

pub fn residual_adam_config() -> AdamConfig {
    AdamConfig { lr: RESIDUAL_LR, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-8 }
}

/// `m(t)` for `t = 1..=steps` driven by the ascent direction `g_t = ln t / (√t m³)`.
pub fn residual_growth_sim(opt: ResidualOptimizer, steps: usize, m0: f64) -> Result<Vec<f64>> {
    residual_growth_sim_with(opt, steps, m0, |t, m| (t as f64).ln() / ((t as f64).sqrt() * m.powi(3)))
}

/// As [`residual_growth_sim`] with a custom drive `g(t, m)`.
pub fn residual_growth_sim_with<G>(opt: ResidualOptimizer, steps: usize, m0: f64, g: G) -> Result<Vec<f64>>
where
    G: Fn(usize, f64) -> f64,
{
    if m0 <= 0.0 || !m0.is_finite() {
        return Err(Error::numeric("residual_growth_sim", format!("m0 = {m0} must be positive")));
    }
    let mut m = [m0];
    let mut state = AdamState::new(1, residual_adam_config());
    let mut out = Vec::with_capacity(steps);
    for t in 1..=steps {
        // The recursion ascends along g, i.e. descends along -g.
        let grad = [-g(t, m[0])];
        match opt {
            ResidualOptimizer::Adam => adam_step(&mut m, &grad, &mut state)?,
            ResidualOptimizer::Sgd => sgd_step(&mut m, &grad, RESIDUAL_LR)?,
        }
        if m[0] <= 0.0 || !m[0].is_finite() {
            return Err(Error::numeric("residual_growth_sim", format!("m = {} at step {t}", m[0])));
        }
        out.push(m[0]);
    }
    Ok(out)
}

/// Linear fit of `m` against `t` over the second half of the series.
pub fn second_half_fit(series: &[f64]) -> stats::LinearFit {
    let h = series.len() / 2;
    let t: Vec<f64> = (h + 1..=series.len()).map(|t| t as f64).collect();
    stats::linear_fit(&t, &series[h..])
}

// ---------------------------------------------------------------------------
// Verification suite

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub check_name: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl Verdict {
    fn below(name: &str, value: f64, threshold: f64) -> Self {
        Self { check_name: name.into(), value, threshold, pass: value < threshold }
    }

    fn above(name: &str, value: f64, threshold: f64) -> Self {
        Self { check_name: name.into(), value, threshold, pass: value > threshold }
    }

    /// `name_min` and `name_max` verdicts for `lo <= value <= hi`.
    fn within(name: &str, value: f64, lo: f64, hi: f64) -> [Self; 2] {
        [
            Self { check_name: format!("{name}_min"), value, threshold: lo, pass: value >= lo },
            Self { check_name: format!("{name}_max"), value, threshold: hi, pass: value <= hi },
        ]
    }
}

/// Knobs of the verification suite; the defaults are the calibrated values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub seed: u64,
    /// ξ scale for the log-growth flow.
    pub growth_xi_scale: f64,
    /// Initial common α of the log-growth flow.
    pub growth_alpha0: f64,
    /// Horizon of the β-convergence flow.
    pub beta_t_end: f64,
    /// Horizon of the joint flow; concentration of `α` sets in around `10⁸`.
    pub joint_t_end: f64,
    /// `(α, ξ, λ)` scale ladder.
    pub ladder: Vec<(f64, f64, f64)>,
    pub residual_steps: usize,
    pub residual_m0: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            growth_xi_scale: 1e4,
            growth_alpha0: 5.0,
            beta_t_end: 1e6,
            joint_t_end: 1e9,
            ladder: vec![(5.0, 5.0, 5.0), (7.5, 7.5, 7.5), (10.0, 10.0, 10.0), (12.5, 12.5, 12.5), (15.0, 15.0, 15.0)],
            residual_steps: 10_000,
            residual_m0: 5.0,
        }
    }
}

/// A `V`-token random instance: positive rows, random `π̃`, triggers `{0}` when `V > 2`.
pub fn random_instance(v: usize, seed: u64) -> SimplifiedParams<f64> {
    let mut r = rng::stream(mix(seed, tag::THEORY), v as u64);
    let triggers: Vec<bool> = (0..v).map(|k| v > 2 && k == 0).collect();
    let mut p = vec![0.0; v * v];
    for row in p.chunks_mut(v) {
        row.iter_mut().for_each(|x| *x = r.random::<f64>() + 0.05);
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
    let mut pi_tilde: Vec<f64> = triggers.iter().map(|&t| if t { 0.0 } else { r.random::<f64>() + 0.1 }).collect();
    let s: f64 = pi_tilde.iter().sum();
    pi_tilde.iter_mut().for_each(|x| *x /= s);
    let counts: Vec<usize> = (0..v).map(|_| r.random_range(1..20)).collect();
    let xi = triggers.iter().map(|&t| if t { 0.0 } else { r.random::<f64>() * 2.0 + 0.1 }).collect();
    let alpha = triggers.iter().map(|&t| if t { 0.0 } else { r.random::<f64>() * 4.0 - 2.0 }).collect();
    let beta = (0..v).map(|_| r.random::<f64>() * 2.0 - 1.0).collect();
    SimplifiedParams { alpha, beta, xi, lambda: 0.0, counts, p, pi_tilde, triggers }
}

/// Largest relative error of the hand-derived [`SimplifiedModel::loss`] gradient
/// against central differences, over `probes` trainable coordinates.
pub fn simplified_model_fd_error(m: &SimplifiedModel, batch: &SequenceBatch, probes: usize, h: f64, seed: u64) -> Result<f64> {
    let (_, _, g) = m.loss(batch, true)?;
    let g = g.expect("gradient requested");
    let x = m.flat();
    // Trigger α and ξ are frozen; pin their coordinates.
    let v = m.vocab;
    let frozen: Vec<usize> = (0..v).filter(|&k| m.triggers[k]).flat_map(|k| [k, 2 * v + v * v + k]).collect();
    let mut analytic = g;
    for &i in &frozen {
        analytic[i] = 0.0;
    }
    let mut work = m.clone();
    let mut failure = None;
    let err = finite_diff_check(
        |y| {
            let mut y = y.to_vec();
            for &i in &frozen {
                y[i] = x[i];
            }
            work.set_flat(&y);
            match work.loss(batch, false) {
                Ok((l, _, _)) => l,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        &x,
        &analytic,
        h,
        probes,
        seed,
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(err),
    }
}

/// Largest relative error of [`closed_gradients`] against central differences of the loss.
pub fn gradient_fd_error(sp: &SimplifiedParams<f64>, probes: usize, h: f64, seed: u64) -> f64 {
    let v = sp.vocab();
    let (da, db) = closed_gradients(sp);
    let mut x = sp.alpha.clone();
    x.extend_from_slice(&sp.beta);
    // Trigger α entries are fixed, so they are excluded from the probe set.
    let free: Vec<usize> = (0..2 * v).filter(|&i| i >= v || !sp.triggers[i]).collect();
    let xf: Vec<f64> = free.iter().map(|&i| x[i]).collect();
    let analytic: Vec<f64> = free.iter().map(|&i| if i < v { -da[i] } else { -db[i - v] }).collect();
    let mut work = sp.clone();
    finite_diff_check(
        |y| {
            for (&i, &yi) in free.iter().zip(y) {
                if i < v {
                    work.alpha[i] = yi;
                } else {
                    work.beta[i - v] = yi;
                }
            }
            simplified_loss(&work)
        },
        &xf,
        &analytic,
        h,
        probes,
        seed,
    )
}

/// Worst `(‖∇‖, loss)` over `n` random stable-phase points of `sp`.
pub fn stationarity_check(sp: &SimplifiedParams<f64>, n: usize, seed: u64) -> (f64, f64) {
    let mut r = rng::stream(mix(seed, tag::THEORY), 1 << 20);
    let mut work = sp.clone();
    let (mut gmax, mut lmax) = (0.0f64, 0.0f64);
    for _ in 0..n {
        let a = r.random::<f64>() * 20.0 - 5.0;
        let c = r.random::<f64>() * 10.0 - 5.0;
        work.set_stable_phase(a, c);
        let (da, db) = closed_gradients(&work);
        let norm = da.iter().chain(&db).map(|x| x * x).sum::<f64>().sqrt();
        gmax = gmax.max(norm);
        lmax = lmax.max(simplified_loss(&work).abs());
    }
    (gmax, lmax)
}

/// Slope of mean non-trigger `α` against `ln t` over `t ∈ [10², 10⁴]` for the `β`-frozen flow.
pub fn log_growth_slope(spec: &BigramSpec, cfg: &VerifyConfig) -> Result<f64> {
    let xi = draw_xi(spec, cfg.seed, cfg.growth_xi_scale);
    let mut sp = SimplifiedParams::<f64>::from_spec(spec, &xi)?;
    for k in (0..sp.vocab()).filter(|&k| !sp.triggers[k]) {
        sp.alpha[k] = cfg.growth_alpha0;
    }
    let fc = FlowConfig { mode: FlowMode::FixBeta, t_end: 1e4, ..FlowConfig::default() };
    let tr = flow_integrate(&sp, &fc)?;
    let mean = tr.alpha_mean(&sp.triggers);
    let (x, y): (Vec<f64>, Vec<f64>) = tr
        .t
        .iter()
        .zip(&mean)
        .filter(|(&t, _)| (1e2..=1e4).contains(&t))
        .map(|(&t, &a)| (t.ln(), a))
        .unzip();
    Ok(stats::linear_fit(&x, &y).slope)
}

/// L∞ distance to `β*` at the end of the `α`-frozen flow from `α = 5·1`, `β = 0`.
pub fn beta_convergence_error(spec: &BigramSpec, cfg: &VerifyConfig) -> Result<f64> {
    let xi = draw_xi(spec, cfg.seed, 1.0);
    let mut sp = SimplifiedParams::<f64>::from_spec(spec, &xi)?;
    for k in (0..sp.vocab()).filter(|&k| !sp.triggers[k]) {
        sp.alpha[k] = 5.0;
    }
    let star = beta_star(&sp);
    let fc = FlowConfig { mode: FlowMode::FixAlpha, t_end: cfg.beta_t_end, ..FlowConfig::default() };
    let tr = flow_integrate(&sp, &fc)?;
    let end = tr.beta.last().expect("trajectory has snapshots");
    Ok(end.iter().zip(&star).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

/// The default-`ξ` instance on `spec` that the stationarity, Gram and flow checks start from.
pub fn base_instance(spec: &BigramSpec, cfg: &VerifyConfig) -> Result<SimplifiedParams<f64>> {
    SimplifiedParams::<f64>::from_spec(spec, &draw_xi(spec, cfg.seed, 1.0))
}

/// Closed-form loss against brute force, and closed gradients against finite differences.
pub fn gradient_verdicts(cfg: &VerifyConfig) -> Vec<Verdict> {
    let mut out = Vec::new();
    let small = random_instance(3, cfg.seed);
    let mut brute = 0.0;
    for v in 0..3 {
        if small.triggers[v] {
            continue;
        }
        let m = small.context_len() as f64;
        let e = small.alpha[v].exp();
        let z: Vec<f64> = (0..3)
            .map(|i| small.row(v)[i] * ((small.counts[i] as f64 * small.xi[i] + e * small.beta[i]) / (e + m)).exp())
            .collect();
        let s: f64 = z.iter().sum();
        for i in 0..3 {
            let p = small.row(v)[i];
            brute += small.pi_tilde[v] * p * (p / (z[i] / s)).ln();
        }
    }
    out.push(Verdict::below("loss_bruteforce_v3", (simplified_loss(&small) - brute).abs(), 1e-13));

    for v in [3usize, 8, 64] {
        let mut worst = 0.0f64;
        for i in 0..10u64 {
            let sp = random_instance(v, cfg.seed ^ (i + 1));
            worst = worst.max(gradient_fd_error(&sp, 64, 1e-4, i));
        }
        out.push(Verdict::below(&format!("gradient_fd_v{v}"), worst, 1e-6));
    }
    out
}

/// Gradient norm and loss on 20 random members of the stable-phase family.
pub fn stationarity_verdicts(spec: &BigramSpec, cfg: &VerifyConfig) -> Result<Vec<Verdict>> {
    let (gmax, lmax) = stationarity_check(&base_instance(spec, cfg)?, 20, cfg.seed);
    Ok(vec![Verdict::below("stable_phase_gradient_norm", gmax, 1e-10), Verdict::below("stable_phase_loss", lmax, 1e-12)])
}

/// Gradient sum identities and the Gram-matrix spectrum at a stable-phase point.
pub fn lemma_verdicts(spec: &BigramSpec, cfg: &VerifyConfig) -> Result<Vec<Verdict>> {
    let mut out = Vec::new();
    let mass = (0..5u64)
        .map(|i| closed_gradients(&random_instance(8, cfg.seed + i)).1.iter().sum::<f64>().abs())
        .fold(0.0, f64::max);
    out.push(Verdict::below("beta_mass_conservation", mass, 1e-12));

    let (mut sa, mut sb) = (0.0f64, 0.0f64);
    for i in 0..5u64 {
        let sp = random_instance(8, cfg.seed + 100 + i);
        for v in (0..8).filter(|&v| !sp.triggers[v]) {
            let s = lemma_sum_identities(&sp, v)?;
            sa = sa.max(s.alpha.abs());
            sb = sb.max(s.beta);
        }
    }
    out.push(Verdict::below("lemma_alpha_sum", sa, 1e-12));
    out.push(Verdict::below("lemma_beta_sum", sb, 1e-12));

    let mut stable = base_instance(spec, cfg)?;
    stable.set_stable_phase(3.0, 0.5);
    let g = stable_gram(&stable);
    out.push(Verdict::above("gram_min_eigenvalue", min_eigenvalue(g.clone()), -1e-10));
    out.push(Verdict::above("gram_projected_min_eigenvalue", projected_min_eigenvalue(&g), 0.0));
    out.push(Verdict::below("gram_ones_residual", ones_residual(&g), 1e-12));
    Ok(out)
}

/// Stationary drift, loss monotonicity and sink-logit concentration of the joint flow.
pub fn joint_flow_verdicts(spec: &BigramSpec, cfg: &VerifyConfig) -> Result<Vec<Verdict>> {
    let mut out = Vec::new();
    let base = base_instance(spec, cfg)?;
    let mut stable = base.clone();
    stable.set_stable_phase(3.0, 0.5);
    let tr = flow_integrate(&stable, &FlowConfig::default())?;
    let drift = tr
        .alpha
        .iter()
        .zip(&tr.beta)
        .flat_map(|(a, b)| {
            a.iter().zip(&stable.alpha).chain(b.iter().zip(&stable.beta)).map(|(x, y)| (x - y).abs())
        })
        .fold(0.0, f64::max);
    out.push(Verdict::below("joint_flow_stationary_drift", drift, 1e-8));

    let fc = FlowConfig { mode: FlowMode::Joint, t_end: cfg.joint_t_end, ..FlowConfig::default() };
    let tr = flow_integrate(&base, &fc)?;
    let incr = tr
        .loss
        .windows(2)
        .zip(tr.t.windows(2))
        .map(|(l, t)| (l[1] - l[0]) / (t[1] - t[0]))
        .fold(f64::NEG_INFINITY, f64::max);
    out.push(Verdict::below("joint_flow_loss_increase_rate", incr, 5e-6));
    let a_end = non_trigger(tr.alpha.last().expect("snapshots"), &base.triggers);
    out.push(Verdict::below("sink_logit_concentration", stats::std_dev(&a_end) / stats::mean(&a_end).abs(), 1e-3));
    Ok(out)
}

pub fn construction_verdicts(spec: &BigramSpec, cfg: &VerifyConfig) -> Result<Vec<Verdict>> {
    let report = construction_limit_check(spec, &cfg.ladder)?;
    let tv = report.max_tv();
    Ok(vec![
        Verdict::below("construction_tv_final", *tv.last().unwrap_or(&f64::INFINITY), 1e-4),
        Verdict {
            check_name: "construction_tv_decreasing".into(),
            value: f64::from(u8::from(report.strictly_decreasing())),
            threshold: 1.0,
            pass: report.strictly_decreasing(),
        },
    ])
}

pub fn residual_verdicts(cfg: &VerifyConfig) -> Result<Vec<Verdict>> {
    let adam = residual_growth_sim(ResidualOptimizer::Adam, cfg.residual_steps, cfg.residual_m0)?;
    let sgd = residual_growth_sim(ResidualOptimizer::Sgd, cfg.residual_steps, cfg.residual_m0)?;
    let ratio = sgd.last().copied().unwrap_or(f64::NAN) / adam.last().copied().unwrap_or(f64::NAN);
    Ok(vec![
        Verdict::above("residual_adam_linear_r2", second_half_fit(&adam).r2, 0.99),
        Verdict::below("residual_sgd_over_adam", ratio, 0.1),
    ])
}

/// Run every check. The flows and the ladder use `spec`; the algebraic checks
/// also run on small random instances.
pub fn verify_suite(spec: &BigramSpec, cfg: &VerifyConfig) -> Result<Vec<Verdict>> {
    let mut out = gradient_verdicts(cfg);
    out.extend(stationarity_verdicts(spec, cfg)?);
    out.extend(lemma_verdicts(spec, cfg)?);
    out.extend(Verdict::within("log_growth_slope", log_growth_slope(spec, cfg)?, 0.40, 0.60));
    out.push(Verdict::below("beta_convergence_linf", beta_convergence_error(spec, cfg)?, 1e-4));
    out.extend(joint_flow_verdicts(spec, cfg)?);
    out.extend(construction_verdicts(spec, cfg)?);
    out.extend(residual_verdicts(cfg)?);
    Ok(out)
}
