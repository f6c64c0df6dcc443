//! Measurements taken on captured activations: excess risks, the Δlogit sink
//! measure, attention on ⟨s⟩, dormancy, and value/residual norms.
//!
//! Query positions used by the attention probes are the real, non-trigger
//! tokens at positions `n >= 1`.

use serde::{Deserialize, Serialize};

use crate::data::{entropy, BigramSpec, SequenceBatch, Variant};
use crate::model::{AttnCapture, ProbeCapture};
use crate::scalar::Scalar;
use crate::stats;

pub const DORMANT_THRESHOLD: f64 = 0.9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExcessRisks {
    pub bigram: Option<f64>,
    pub backcopy: Option<f64>,
}

/// Bayes cross-entropy of the token at `i + 1` given the prefix.
fn bayes_at(batch: &SequenceBatch, b: usize, i: usize, table: &[f64]) -> f64 {
    if batch.is_trigger_output(b, i) {
        match batch.variant() {
            Variant::Bs => table[batch.token(b, i - 1)],
            Variant::Bb | Variant::BbNoBos => 0.0,
        }
    } else {
        table[batch.token(b, i)]
    }
}

/// Mean CE minus Bayes CE, split by whether the target came from the trigger rule.
///
/// `losses` is `[B, L]` with entry `(b, i)` scoring token `i + 1`. The query at
/// the ⟨s⟩ position is excluded. A class with no positions is `None`.
pub fn excess_risks<T: Scalar>(losses: &[T], batch: &SequenceBatch, spec: &BigramSpec) -> ExcessRisks {
    let table = crate::data::bayes_entropy_table(spec);
    let l = batch.len();
    assert_eq!(losses.len(), batch.batch() * l, "losses must align with the batch");
    let first = usize::from(batch.variant().has_bos());
    let (mut sb, mut nb, mut sc, mut nc) = (0.0, 0usize, 0.0, 0usize);
    for b in 0..batch.batch() {
        for i in first..l - 1 {
            let excess = losses[b * l + i].as_f64() - bayes_at(batch, b, i, &table);
            if batch.is_trigger_output(b, i) {
                sc += excess;
                nc += 1;
            } else {
                sb += excess;
                nb += 1;
            }
        }
    }
    ExcessRisks {
        bigram: (nb > 0).then(|| sb / nb as f64),
        backcopy: (nc > 0).then(|| sc / nc as f64),
    }
}

/// Queries used by the attention probes: `(b, n)` with a real non-trigger token, `n >= 1`.
pub fn sink_queries(batch: &SequenceBatch, spec: &BigramSpec) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for b in 0..batch.batch() {
        for n in 1..batch.len() {
            let t = batch.token(b, n);
            if t != spec.bos_id() && !spec.is_trigger(t) {
                out.push((b, n));
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DeltaLogit {
    pub mean: f64,
    pub p5: f64,
    pub p95: f64,
    /// Set when the batch has no ⟨s⟩ column and position 0 stood in for it.
    pub substituted_reference: bool,
}

/// Per-query `logit[n, 0] - mean_{i in 0..=n} logit[n, i]` pooled over batch and heads.
pub fn delta_logit_samples<T: Scalar>(cap: &AttnCapture<T>, batch: &SequenceBatch, spec: &BigramSpec) -> Vec<f64> {
    let l = batch.len();
    let mut out = Vec::new();
    for (b, n) in sink_queries(batch, spec) {
        for h in 0..cap.heads {
            let row = &cap.logits[((b * cap.heads + h) * l + n) * l..][..=n];
            let m = row.iter().map(|x| x.as_f64()).sum::<f64>() / (n + 1) as f64;
            out.push(row[0].as_f64() - m);
        }
    }
    out
}

pub fn delta_logit<T: Scalar>(cap: &AttnCapture<T>, batch: &SequenceBatch, spec: &BigramSpec) -> DeltaLogit {
    let mut s = delta_logit_samples(cap, batch, spec);
    s.sort_by(f64::total_cmp);
    DeltaLogit {
        mean: if s.is_empty() { f64::NAN } else { stats::mean(&s) },
        p5: stats::percentile_sorted(&s, 5.0),
        p95: stats::percentile_sorted(&s, 95.0),
        substituted_reference: !batch.variant().has_bos(),
    }
}

fn bos_weights<T: Scalar>(cap: &AttnCapture<T>, batch: &SequenceBatch, spec: &BigramSpec) -> Vec<f64> {
    let l = batch.len();
    let mut out = Vec::new();
    for (b, n) in sink_queries(batch, spec) {
        for h in 0..cap.heads {
            out.push(cap.attn[((b * cap.heads + h) * l + n) * l].as_f64());
        }
    }
    out
}

pub fn attn_weight_bos_mean<T: Scalar>(cap: &AttnCapture<T>, batch: &SequenceBatch, spec: &BigramSpec) -> f64 {
    stats::mean(&bos_weights(cap, batch, spec))
}

/// Share of non-trigger queries putting more than `threshold` of their weight on position 0.
pub fn dormant_fraction<T: Scalar>(cap: &AttnCapture<T>, batch: &SequenceBatch, spec: &BigramSpec, threshold: f64) -> f64 {
    let w = bos_weights(cap, batch, spec);
    if w.is_empty() {
        return 0.0;
    }
    w.iter().filter(|&&x| x > threshold).count() as f64 / w.len() as f64
}

/// Variance across query token ids of their mean Δlogit (how concentrated the sink logit is).
pub fn logit_bos_variance<T: Scalar>(cap: &AttnCapture<T>, batch: &SequenceBatch, spec: &BigramSpec) -> f64 {
    let l = batch.len();
    let v = spec.vocab_size();
    let (mut sum, mut cnt) = (vec![0.0; v], vec![0usize; v]);
    for (b, n) in sink_queries(batch, spec) {
        let t = batch.token(b, n);
        for h in 0..cap.heads {
            let row = &cap.logits[((b * cap.heads + h) * l + n) * l..][..=n];
            let m = row.iter().map(|x| x.as_f64()).sum::<f64>() / (n + 1) as f64;
            sum[t] += row[0].as_f64() - m;
            cnt[t] += 1;
        }
    }
    let means: Vec<f64> = sum.iter().zip(&cnt).filter(|(_, &c)| c > 0).map(|(s, &c)| s / c as f64).collect();
    if means.is_empty() {
        return f64::NAN;
    }
    let m = stats::mean(&means);
    means.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / means.len() as f64
}

/// Norm summary of `[B, L, d]` states at position 0 versus the rest.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NormSummary {
    /// Mean norm at position 0 (the ⟨s⟩ column when the variant has one).
    pub bos: f64,
    pub others_mean: f64,
    pub others_std: f64,
    /// Smallest per-token-id mean norm among real tokens.
    pub others_min_token: f64,
}

impl NormSummary {
    pub fn gap(&self) -> f64 {
        self.bos - self.others_mean
    }
}

pub fn position_norms<T: Scalar>(states: &[T], batch: usize, len: usize, d: usize) -> Vec<f64> {
    assert_eq!(states.len(), batch * len * d);
    states.chunks(d).map(|r| r.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt()).collect()
}

pub fn summarize_norms<T: Scalar>(states: &[T], batch: &SequenceBatch, d: usize, vocab: usize) -> NormSummary {
    let l = batch.len();
    let norms = position_norms(states, batch.batch(), l, d);
    let mut bos = Vec::new();
    let mut others = Vec::new();
    let (mut tok_sum, mut tok_cnt) = (vec![0.0; vocab], vec![0usize; vocab]);
    for b in 0..batch.batch() {
        for i in 0..l {
            let n = norms[b * l + i];
            if i == 0 {
                bos.push(n);
            }
            if i > 0 || !batch.variant().has_bos() {
                others.push(n);
                let t = batch.token(b, i);
                tok_sum[t] += n;
                tok_cnt[t] += 1;
            }
        }
    }
    let others_min_token = tok_sum
        .iter()
        .zip(&tok_cnt)
        .filter(|(_, &c)| c > 0)
        .map(|(s, &c)| s / c as f64)
        .fold(f64::INFINITY, f64::min);
    NormSummary {
        bos: stats::mean(&bos),
        others_mean: stats::mean(&others),
        others_std: stats::std_dev(&others),
        others_min_token,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttnProbe {
    pub block: usize,
    pub delta_logit: DeltaLogit,
    pub attn_weight_bos: f64,
    pub dormant_fraction: f64,
    pub logit_bos_variance: f64,
    pub value_norms: NormSummary,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub step: usize,
    /// Training-batch loss at this step (`None` for the record after the last update).
    pub train_loss: Option<f64>,
    pub eval_loss: f64,
    pub excess: ExcessRisks,
    pub attn: Vec<AttnProbe>,
    /// One entry per layer output.
    pub residual_norms: Vec<NormSummary>,
}

/// Every probe on one captured forward pass.
pub fn probe_record<T: Scalar>(
    step: usize,
    train_loss: Option<f64>,
    eval_loss: f64,
    position_losses: &[T],
    cap: &ProbeCapture<T>,
    batch: &SequenceBatch,
    spec: &BigramSpec,
    dormant_threshold: f64,
) -> ProbeRecord {
    let attn = cap
        .attn
        .iter()
        .map(|a| AttnProbe {
            block: a.block,
            delta_logit: delta_logit(a, batch, spec),
            attn_weight_bos: attn_weight_bos_mean(a, batch, spec),
            dormant_fraction: dormant_fraction(a, batch, spec, dormant_threshold),
            logit_bos_variance: logit_bos_variance(a, batch, spec),
            value_norms: summarize_norms(&a.values, batch, cap.d_model, cap.vocab),
        })
        .collect();
    ProbeRecord {
        step,
        train_loss,
        eval_loss,
        excess: excess_risks(position_losses, batch, spec),
        attn,
        residual_norms: cap.residuals.iter().map(|r| summarize_norms(r, batch, cap.d_model, cap.vocab)).collect(),
    }
}

impl ProbeRecord {
    pub fn csv_header(n_attn: usize, n_layers: usize) -> Vec<String> {
        let mut h: Vec<String> =
            ["step", "train_loss", "eval_loss", "bigram_excess", "backcopy_excess"].iter().map(|s| s.to_string()).collect();
        for a in 0..n_attn {
            for f in [
                "delta_logit_mean",
                "delta_logit_p5",
                "delta_logit_p95",
                "attn_weight_bos_mean",
                "dormant_fraction",
                "logit_bos_variance",
                "val_norm_bos",
                "val_norm_others_mean",
                "val_norm_others_std",
                "val_norm_min_token",
            ] {
                h.push(format!("attn{a}_{f}"));
            }
        }
        for l in 0..n_layers {
            for f in ["res_norm_bos", "res_norm_others_mean", "res_norm_gap"] {
                h.push(format!("layer{l}_{f}"));
            }
        }
        h
    }

    pub fn csv_row(&self) -> Vec<String> {
        let opt = |x: Option<f64>| x.map(fmt_f64).unwrap_or_default();
        let mut r = vec![
            self.step.to_string(),
            opt(self.train_loss),
            fmt_f64(self.eval_loss),
            opt(self.excess.bigram),
            opt(self.excess.backcopy),
        ];
        for a in &self.attn {
            for x in [
                a.delta_logit.mean,
                a.delta_logit.p5,
                a.delta_logit.p95,
                a.attn_weight_bos,
                a.dormant_fraction,
                a.logit_bos_variance,
                a.value_norms.bos,
                a.value_norms.others_mean,
                a.value_norms.others_std,
                a.value_norms.others_min_token,
            ] {
                r.push(fmt_f64(x));
            }
        }
        for n in &self.residual_norms {
            for x in [n.bos, n.others_mean, n.gap()] {
                r.push(fmt_f64(x));
            }
        }
        r
    }
}

/// Shortest round-trip representation; stable across runs and platforms.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

/// Row-major attention map of one `(batch, head)` as CSV lines.
pub fn attention_map_csv<T: Scalar>(cap: &AttnCapture<T>, len: usize, b: usize, h: usize) -> String {
    let mut s = String::new();
    let base = (b * cap.heads + h) * len * len;
    for r in 0..len {
        let row: Vec<String> = cap.attn[base + r * len..base + (r + 1) * len].iter().map(|x| fmt_f64(x.as_f64())).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

/// Entropy of the renormalized non-trigger stationary law (the Bayes risk of the first real token).
pub fn start_entropy(spec: &BigramSpec) -> f64 {
    let s: f64 = spec.pi_tilde().iter().sum();
    let q: Vec<f64> = spec.pi_tilde().iter().map(|x| x / s).collect();
    entropy(&q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{default_spec, sample_batch};

    fn fake_capture(batch: &SequenceBatch, logit: impl Fn(usize, usize, usize) -> f64) -> AttnCapture<f64> {
        let l = batch.len();
        let mut logits = vec![0.0; batch.batch() * l * l];
        let mut attn = vec![0.0; batch.batch() * l * l];
        for b in 0..batch.batch() {
            for n in 0..l {
                let row = &mut logits[(b * l + n) * l..][..l];
                for (i, x) in row.iter_mut().enumerate() {
                    *x = logit(b, n, i);
                }
                let mx = row[..=n].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row[..=n].iter().map(|x| (x - mx).exp()).sum();
                for i in 0..=n {
                    attn[(b * l + n) * l + i] = (row[i] - mx).exp() / z;
                }
            }
        }
        AttnCapture { block: 0, heads: 1, attn, logits, queries: vec![], keys: vec![], values: vec![] }
    }

    #[test]
    fn delta_logit_constructions() {
        let spec = default_spec();
        let batch = sample_batch(&spec, 3, 16, Variant::Bb, 1).unwrap();
        let flat = fake_capture(&batch, |_, _, _| 0.7);
        assert!(delta_logit(&flat, &batch, &spec).mean.abs() < 1e-15);

        // ⟨s⟩ column = c, others 0: the subtracted mean includes the ⟨s⟩ key, so
        // each query gives c - c/(n+1).
        let c = 2.5;
        let sink = fake_capture(&batch, |_, _, i| if i == 0 { c } else { 0.0 });
        let want: Vec<f64> = sink_queries(&batch, &spec).iter().map(|&(_, n)| c - c / (n as f64 + 1.0)).collect();
        assert!((delta_logit(&sink, &batch, &spec).mean - stats::mean(&want)).abs() < 1e-12);
    }

    #[test]
    fn delta_logit_ignores_per_query_offsets() {
        let spec = default_spec();
        let batch = sample_batch(&spec, 2, 16, Variant::Bb, 2).unwrap();
        let base = fake_capture(&batch, |b, n, i| ((b * 31 + n * 7 + i) as f64).sin());
        let shifted = fake_capture(&batch, |b, n, i| ((b * 31 + n * 7 + i) as f64).sin() + 3.0 * (n as f64 + b as f64).cos());
        let (x, y) = (delta_logit_samples(&base, &batch, &spec), delta_logit_samples(&shifted, &batch, &spec));
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dormant_fraction_extremes() {
        let spec = default_spec();
        let batch = sample_batch(&spec, 2, 16, Variant::Bb, 3).unwrap();
        let selfish = fake_capture(&batch, |_, n, i| if i == n { 100.0 } else { 0.0 });
        assert_eq!(dormant_fraction(&selfish, &batch, &spec, 0.9), 0.0);
        let sink = fake_capture(&batch, |_, _, i| if i == 0 { 100.0 } else { 0.0 });
        assert_eq!(dormant_fraction(&sink, &batch, &spec, 0.9), 1.0);
        let random = fake_capture(&batch, |b, n, i| ((b + 3 * n + 11 * i) as f64).cos());
        assert_eq!(dormant_fraction(&random, &batch, &spec, 0.0), 1.0);
    }

    #[test]
    fn excess_risk_oracles() {
        let spec = default_spec();
        let batch = sample_batch(&spec, 4, 64, Variant::Bb, 4).unwrap();
        let l = batch.len();
        let v = spec.vocab_size();
        let h = crate::data::bayes_entropy_table(&spec);
        // Expected loss of the Bayes predictor: H(p_v) on bigram targets, 0 on copies.
        let mut bayes = vec![0.0; 4 * l];
        let mut uniform = vec![0.0; 4 * l];
        for b in 0..4 {
            for i in 1..l - 1 {
                bayes[b * l + i] = if batch.is_trigger_output(b, i) { 0.0 } else { h[batch.token(b, i)] };
                uniform[b * l + i] = (v as f64).ln();
            }
        }
        let e = excess_risks(&bayes, &batch, &spec);
        assert!(e.backcopy.unwrap().abs() < 1e-6);
        assert!(e.bigram.unwrap().abs() < 1e-6);
        let u = excess_risks(&uniform, &batch, &spec);
        assert!((u.backcopy.unwrap() - (v as f64).ln()).abs() < 1e-12);
        assert!(u.bigram.unwrap() > 0.0);
    }

    #[test]
    fn empty_class_is_missing() {
        let spec = default_spec();
        // The only scored query is the first real token, which is never a trigger.
        let batch = sample_batch(&spec, 1, 2, Variant::Bb, 0).unwrap();
        let e = excess_risks(&[0.0; 3], &batch, &spec);
        assert!(e.backcopy.is_none());
        assert!(e.bigram.is_some());
    }

    #[test]
    fn norm_summary_matches_direct_computation() {
        let spec = default_spec();
        let batch = sample_batch(&spec, 2, 8, Variant::Bb, 5).unwrap();
        let d = 3;
        let states: Vec<f64> = (0..2 * 9 * d).map(|i| (i as f64 * 0.37).sin()).collect();
        let s = summarize_norms(&states, &batch, d, 65);
        let direct = |b: usize, i: usize| {
            let r = &states[(b * 9 + i) * d..][..d];
            (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt()
        };
        assert!((s.bos - (direct(0, 0) + direct(1, 0)) / 2.0).abs() < 1e-12);
        let others: Vec<f64> = (0..2).flat_map(|b| (1..9).map(move |i| (b, i))).map(|(b, i)| direct(b, i)).collect();
        assert!((s.others_mean - stats::mean(&others)).abs() < 1e-12);
        assert!(s.others_min_token >= others.iter().copied().fold(f64::INFINITY, f64::min) - 1e-12);
    }
}
