//! One function per command. Each writes its artifacts through [`Outputs`]
//! as it goes, so a failure still leaves the partial results on disk.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;
use serde_json::{json, Map, Value};
use sinklab::data::{estimate_bigram, sample_batch, BigramSpec, DEFAULT_CORPUS};
use sinklab::model::{self, layer_of_blocks, Ablation, BlockKind, Checkpoint, ModelConfig, ModelState};
use sinklab::optim::{self, TrainConfig, TrainLog};
use sinklab::probes::{fmt_f64, probe_record, ProbeRecord};
use sinklab::rng::{self, mix, tag};
use sinklab::theory::{self, FlowConfig, FlowMode, SimplifiedModel, SimplifiedParams, SimplifiedTrainConfig, VerifyConfig};
use sinklab::Error;

use crate::config::{Command, RunConfig, Target};
use crate::manifest::Outputs;

/// How a command ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Ok,
    ChecksFailed,
    ConfigError,
    NumericError,
    IoError,
}

impl Status {
    pub fn exit_code(self) -> i32 {
        match self {
            Status::Ok => 0,
            Status::ChecksFailed | Status::IoError => 1,
            Status::ConfigError => 2,
            Status::NumericError => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Status::Ok => "ok",
            Status::ChecksFailed => "checks_failed",
            Status::ConfigError => "config_error",
            Status::NumericError => "numeric_error",
            Status::IoError => "io_error",
        }
    }

    pub fn of_error(e: &Error) -> Self {
        match e {
            Error::Config(_) | Error::Argument(_) | Error::Json(_) => Status::ConfigError,
            Error::Numeric { .. } | Error::Diverged { .. } | Error::Integrator { .. } => Status::NumericError,
            Error::Io(_) => Status::IoError,
        }
    }
}

/// Metrics for the manifest plus the final status.
#[derive(Debug, Default)]
pub struct Report {
    pub metrics: Map<String, Value>,
    pub checks_failed: bool,
    pub task: Option<Value>,
}

pub fn execute(cfg: &RunConfig, out: &mut Outputs, report: &mut Report) -> sinklab::Result<()> {
    let spec = load_spec(cfg)?;
    report.task = Some(json!({
        "source_hash": spec.source_hash(),
        "vocab": spec.vocab_size(),
        "variant": cfg.task.variant.as_str(),
        "triggers": spec.triggers(),
    }));
    match cfg.command {
        Command::Train => match cfg.optim.target {
            Target::Transformer => train_transformer(cfg, &spec, out, report),
            Target::Simplified => train_simplified(cfg, &spec, out, report),
        },
        Command::Flow => flow(cfg, &spec, out, report),
        Command::SimResidual => sim_residual(cfg, out, report),
        Command::Intervene => intervene(cfg, &spec, out, report),
        Command::Verify => verify(cfg, &spec, out, report),
        Command::Gradcheck => gradcheck(cfg, &spec, out, report),
        Command::ExportSpec => export_spec(&spec, out, report),
    }
}

pub fn load_spec(cfg: &RunConfig) -> sinklab::Result<BigramSpec> {
    let t = &cfg.task;
    if let Some(p) = &t.spec_path {
        return BigramSpec::from_json(&std::fs::read_to_string(p)?);
    }
    match &t.corpus_path {
        Some(p) => estimate_bigram(&std::fs::read(p)?, t.vocab, t.smoothing),
        None => estimate_bigram(DEFAULT_CORPUS.as_bytes(), t.vocab, t.smoothing),
    }
}

/// The configured model with `vocab` and `max_seq` fitted to the task.
pub fn model_config(cfg: &RunConfig, spec: &BigramSpec, seq_len: usize) -> ModelConfig {
    ModelConfig {
        vocab: spec.vocab_size() + 1,
        max_seq: cfg.model.max_seq.max(seq_len + 1),
        seed: cfg.seed,
        ..cfg.model.clone()
    }
}

pub fn train_config(cfg: &RunConfig) -> TrainConfig {
    let o = &cfg.optim;
    TrainConfig {
        optimizer: o.optimizer,
        steps: o.steps,
        batch: o.batch,
        seq_len: o.seq_len,
        probe_every: o.probe_every,
        variant: cfg.task.variant,
        eval_batch: o.eval_batch,
        dormant_threshold: o.dormant_threshold,
        seed: cfg.seed,
    }
}

fn write_train_log(out: &mut Outputs, log: &TrainLog) -> sinklab::Result<()> {
    out.write("metrics.csv", log.to_csv_string().as_bytes())?;
    let mut s = String::from("#schema=train-losses-v1\nstep,loss\n");
    for (i, l) in log.losses.iter().enumerate() {
        writeln!(s, "{i},{}", fmt_f64(*l)).unwrap();
    }
    out.write("losses.csv", s.as_bytes())?;
    Ok(())
}

fn record_metrics(r: &ProbeRecord) -> Value {
    serde_json::to_value(r).unwrap_or(Value::Null)
}

fn train_transformer(cfg: &RunConfig, spec: &BigramSpec, out: &mut Outputs, report: &mut Report) -> sinklab::Result<()> {
    let tc = train_config(cfg);
    let mc = model_config(cfg, spec, tc.seq_len);
    report.metrics.insert("optimizer".into(), json!(tc.optimizer.name()));
    match optim::train::<f64>(spec, &mc, &tc) {
        Ok(res) => {
            write_train_log(out, &res.log)?;
            out.write("checkpoint.json", res.model.to_checkpoint(tc.steps).to_json()?.as_bytes())?;
            out.write("spec.json", spec.to_json()?.as_bytes())?;
            report.metrics.insert("num_params".into(), json!(res.model.num_params()));
            if let Some(r) = res.log.last() {
                report.metrics.insert("final".into(), record_metrics(r));
            }
            Ok(())
        }
        Err(Error::Diverged { step, log }) => {
            write_train_log(out, &log)?;
            report.metrics.insert("diverged_at".into(), json!(step));
            Err(Error::Diverged { step, log })
        }
        Err(e) => Err(e),
    }
}

fn train_simplified(cfg: &RunConfig, spec: &BigramSpec, out: &mut Outputs, report: &mut Report) -> sinklab::Result<()> {
    let o = &cfg.optim;
    let sc = SimplifiedTrainConfig {
        steps: o.steps,
        batch: o.batch,
        seq_len: o.seq_len,
        lr: o.simplified_lr,
        probe_every: o.probe_every,
        eval_batch: o.eval_batch,
        train_lambda: o.train_lambda,
        init_std: o.simplified_init_std,
        seed: cfg.seed,
    };
    report.metrics.insert("train_lambda".into(), json!(sc.train_lambda));
    let (model, log) = theory::train_simplified_adam(spec, &sc)?;
    out.write("metrics.csv", log.to_csv_string().as_bytes())?;
    out.write_json("simplified_model.json", &model)?;
    if let Some(r) = log.records.last() {
        report.metrics.insert("final".into(), serde_json::to_value(r).unwrap_or(Value::Null));
    }
    Ok(())
}

fn flow_start(cfg: &RunConfig, spec: &BigramSpec) -> sinklab::Result<SimplifiedParams<f64>> {
    let t = &cfg.theory;
    let xi = theory::draw_xi(spec, cfg.seed, t.xi_scale);
    let mut sp = SimplifiedParams::<f64>::from_spec(spec, &xi)?;
    for (a, &trig) in sp.alpha.iter_mut().zip(&sp.triggers) {
        *a = if trig { 0.0 } else { t.alpha0 };
    }
    sp.beta.iter_mut().for_each(|b| *b = t.beta0);
    sp.lambda = t.lambda;
    Ok(sp)
}

fn flow(cfg: &RunConfig, spec: &BigramSpec, out: &mut Outputs, report: &mut Report) -> sinklab::Result<()> {
    let t = &cfg.theory;
    let sp = flow_start(cfg, spec)?;
    report.metrics.insert("xi".into(), json!(sp.xi));
    report.metrics.insert("mode".into(), json!(t.mode.as_str()));
    let fc = FlowConfig { mode: t.mode, t_end: t.t_end, rtol: t.rtol, atol: t.atol, snapshots: t.snapshots, ..FlowConfig::default() };
    let traj = match theory::flow_integrate(&sp, &fc) {
        Ok(traj) => traj,
        Err(Error::Integrator { t, detail, partial }) => {
            let mut buf = Vec::new();
            partial.write_csv(&mut buf)?;
            out.write("metrics.csv", &buf)?;
            report.metrics.insert("failed_at_t".into(), json!(t));
            return Err(Error::Integrator { t, detail, partial });
        }
        Err(e) => return Err(e),
    };
    let mut buf = Vec::new();
    traj.write_csv(&mut buf)?;
    out.write("metrics.csv", &buf)?;
    let m = &mut report.metrics;
    m.insert("final_loss".into(), json!(traj.loss.last()));
    m.insert("final_alpha_mean".into(), json!(traj.alpha_mean(&sp.triggers).last()));
    m.insert("final_alpha_std".into(), json!(traj.alpha_std(&sp.triggers).last()));
    m.insert("accepted_steps".into(), json!(traj.accepted_steps));
    m.insert("rejected_steps".into(), json!(traj.rejected_steps));
    if t.mode == FlowMode::FixAlpha {
        let star = theory::beta_star(&sp);
        let last = traj.beta.last().expect("trajectory has a start point");
        let linf = last.iter().zip(&star).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        m.insert("beta_star_linf".into(), json!(linf));
    }
    Ok(())
}

fn sim_residual(cfg: &RunConfig, out: &mut Outputs, report: &mut Report) -> sinklab::Result<()> {
    let t = &cfg.theory;
    let series = theory::residual_growth_sim(t.sim_optimizer, t.sim_steps, t.m0)?;
    let mut s = String::from("#schema=residual-sim-v1\nstep,m\n");
    writeln!(s, "0,{}", fmt_f64(t.m0)).unwrap();
    for (i, m) in series.iter().enumerate() {
        writeln!(s, "{},{}", i + 1, fmt_f64(*m)).unwrap();
    }
    out.write("metrics.csv", s.as_bytes())?;
    let fit = theory::second_half_fit(&series);
    let m = &mut report.metrics;
    m.insert("optimizer".into(), serde_json::to_value(t.sim_optimizer).unwrap_or(Value::Null));
    m.insert("final_m".into(), json!(series.last()));
    m.insert("second_half_slope".into(), json!(fit.slope));
    m.insert("second_half_r2".into(), json!(fit.r2));
    Ok(())
}

/// `none`, `mlp`, `attn`, `layer:L`, `block:I`, `head:I:H`.
pub fn parse_ablation(s: &str, blocks: &[BlockKind]) -> sinklab::Result<Ablation> {
    let layers = layer_of_blocks(blocks);
    let kind = |k: BlockKind| Ablation::blocks((0..blocks.len()).filter(move |&i| blocks[i] == k));
    let num = |x: &str| x.parse::<usize>().map_err(|_| Error::config(format!("bad index in ablation {s:?}")));
    let parts: Vec<&str> = s.split(':').collect();
    let a = match parts.as_slice() {
        ["none"] => Ablation::none(),
        ["mlp"] => kind(BlockKind::Mlp),
        ["attn"] => kind(BlockKind::Attn),
        ["layer", l] => {
            let l = num(l)?;
            Ablation::blocks((0..blocks.len()).filter(|&i| layers[i] == l))
        }
        ["block", i] => Ablation::blocks([num(i)?]),
        ["head", i, h] => Ablation { heads: [(num(i)?, num(h)?)].into(), ..Ablation::none() },
        _ => return Err(Error::config(format!("unknown ablation {s:?}"))),
    };
    if a.is_empty() && s != "none" {
        return Err(Error::config(format!("ablation {s:?} selects nothing in this architecture")));
    }
    Ok(a)
}

fn intervene(cfg: &RunConfig, spec: &BigramSpec, out: &mut Outputs, report: &mut Report) -> sinklab::Result<()> {
    let iv = &cfg.intervene;
    let path = iv.checkpoint.as_deref().ok_or_else(|| Error::config("intervene.checkpoint is required"))?;
    let ck = Checkpoint::from_json(&std::fs::read_to_string(path)?)?;
    let model = ModelState::<f64>::from_checkpoint(&ck)?;
    if model.config.vocab != spec.vocab_size() + 1 {
        return Err(Error::config("checkpoint vocabulary does not match the task"));
    }
    let tc = TrainConfig { eval_batch: iv.batch, seq_len: iv.seq_len, ..train_config(cfg) };
    let batch = sample_batch(spec, iv.batch, iv.seq_len, cfg.task.variant, tc.eval_batch_seed())?;
    let rows = intervention_table(&model, &batch, spec, &iv.ablations, ck.step, cfg.optim.dormant_threshold)?;

    let n_attn = model.block_kinds().iter().filter(|b| **b == BlockKind::Attn).count();
    let n_layers = layer_of_blocks(model.block_kinds()).last().map_or(0, |l| l + 1);
    let mut s = String::from("#schema=intervene-v1\n");
    writeln!(s, "ablation,{}", ProbeRecord::csv_header(n_attn, n_layers).join(",")).unwrap();
    let mut table = Map::new();
    for (name, r) in &rows {
        writeln!(s, "{name},{}", r.csv_row().join(",")).unwrap();
        table.insert(name.clone(), json!({"bigram_excess": r.excess.bigram, "backcopy_excess": r.excess.backcopy, "eval_loss": r.eval_loss}));
    }
    out.write("metrics.csv", s.as_bytes())?;
    report.metrics.insert("log_vocab".into(), json!((spec.vocab_size() as f64).ln()));
    report.metrics.insert("checkpoint_step".into(), json!(ck.step));
    report.metrics.insert("ablations".into(), Value::Object(table));
    Ok(())
}

/// Probe record of each named ablation on `batch`.
pub fn intervention_table(
    model: &ModelState<f64>,
    batch: &sinklab::data::SequenceBatch,
    spec: &BigramSpec,
    ablations: &[String],
    step: usize,
    dormant_threshold: f64,
) -> sinklab::Result<Vec<(String, ProbeRecord)>> {
    ablations
        .iter()
        .map(|name| {
            let a = parse_ablation(name, model.block_kinds())?;
            let fwd = model.zero_out_forward(batch, &a)?;
            let cap = fwd.capture.as_ref().expect("capture requested");
            let r = probe_record(step, None, fwd.loss, &fwd.position_losses, cap, batch, spec, dormant_threshold);
            Ok((name.clone(), r))
        })
        .collect()
}

pub fn verify_config(cfg: &RunConfig) -> VerifyConfig {
    let t = &cfg.theory;
    VerifyConfig {
        seed: cfg.seed,
        growth_xi_scale: t.growth_xi_scale,
        growth_alpha0: t.growth_alpha0,
        beta_t_end: t.beta_t_end,
        joint_t_end: t.joint_t_end,
        ladder: t.scales.clone(),
        residual_steps: t.sim_steps,
        residual_m0: t.m0,
    }
}

fn verify(cfg: &RunConfig, spec: &BigramSpec, out: &mut Outputs, report: &mut Report) -> sinklab::Result<()> {
    let verdicts = theory::verify_suite(spec, &verify_config(cfg))?;
    out.write_json("verdicts.json", &verdicts)?;
    let mut s = String::from("#schema=verdicts-v1\ncheck_name,value,threshold,pass\n");
    for v in &verdicts {
        writeln!(s, "{},{},{},{}", v.check_name, fmt_f64(v.value), fmt_f64(v.threshold), v.pass).unwrap();
    }
    out.write("metrics.csv", s.as_bytes())?;
    let failed: Vec<&str> = verdicts.iter().filter(|v| !v.pass).map(|v| v.check_name.as_str()).collect();
    report.metrics.insert("checks".into(), json!(verdicts.len()));
    report.metrics.insert("failed".into(), json!(failed));
    report.checks_failed = !failed.is_empty();
    Ok(())
}

/// `(name, error, threshold)` for the transformer, the closed-form simplified
/// gradients and the trainable simplified model, plus the number of transformer
/// coordinates skipped at ReLU kinks. Transformer coordinates with an exactly
/// zero gradient are checked separately against an absolute bound.
pub fn gradcheck_errors(cfg: &RunConfig, spec: &BigramSpec) -> sinklab::Result<(Vec<(String, f64, f64)>, usize)> {
    let g = &cfg.gradcheck;
    // At the small training init, attention-score gradients sit near the rounding floor of a central difference.
    let mc = ModelConfig { init_std: g.init_std, ..model_config(cfg, spec, g.seq_len) };
    let m: ModelState<f64> = model::init_model(&mc)?;
    let batch = sample_batch(spec, g.batch, g.seq_len, cfg.task.variant, mix(cfg.seed, tag::PROBES))?;
    let transformer = model::gradient_fd_error(&m, &batch, g.probes, g.h, cfg.seed)?;

    let mut r = rng::stream(mix(cfg.seed, tag::THEORY), 1);
    let mut sp = SimplifiedParams::<f64>::from_spec(spec, &theory::draw_xi(spec, cfg.seed, 1.0))?;
    for (a, &t) in sp.alpha.iter_mut().zip(&sp.triggers) {
        *a = if t { 0.0 } else { r.sample::<f64, _>(StandardNormal) };
    }
    sp.beta.iter_mut().for_each(|b| *b = r.sample::<f64, _>(StandardNormal));
    let closed = theory::gradient_fd_error(&sp, g.probes, g.h, cfg.seed);

    let sc = SimplifiedTrainConfig { seed: cfg.seed, ..SimplifiedTrainConfig::default() };
    let mut sm = SimplifiedModel::init(spec, &sc);
    for ((a, x), &t) in sm.alpha.iter_mut().zip(sm.xi.iter_mut()).zip(&sm.triggers) {
        if !t {
            *a = 3.0 * r.random::<f64>();
            *x = r.random::<f64>();
        }
    }
    sm.lambda = 1.0 + r.random::<f64>();
    let sbatch = sample_batch(spec, g.batch, g.seq_len, sinklab::data::Variant::Bb, mix(cfg.seed, tag::PROBES))?;
    let trainable = theory::simplified_model_fd_error(&sm, &sbatch, g.probes, g.h, cfg.seed)?;

    let rows = vec![
        ("transformer".into(), transformer.max_rel, g.threshold),
        ("transformer_zero_coords".into(), transformer.zero_max_abs, g.zero_abs),
        ("simplified_closed_form".into(), closed, g.threshold),
        ("simplified_model".into(), trainable, g.threshold),
    ];
    Ok((rows, transformer.kinks_skipped))
}

fn gradcheck(cfg: &RunConfig, spec: &BigramSpec, out: &mut Outputs, report: &mut Report) -> sinklab::Result<()> {
    let (errs, kinks) = gradcheck_errors(cfg, spec)?;
    report.metrics.insert("transformer_kinks_skipped".into(), json!(kinks));
    let mut s = String::from("#schema=gradcheck-v1\ncheck,error,threshold,pass\n");
    for (name, e, threshold) in &errs {
        let pass = *e < *threshold;
        writeln!(s, "{name},{},{},{pass}", fmt_f64(*e), fmt_f64(*threshold)).unwrap();
        report.metrics.insert(name.clone(), json!(e));
        report.checks_failed |= !pass;
    }
    out.write("metrics.csv", s.as_bytes())?;
    Ok(())
}

fn export_spec(spec: &BigramSpec, out: &mut Outputs, report: &mut Report) -> sinklab::Result<()> {
    out.write("spec.json", spec.to_json()?.as_bytes())?;
    let mut s = String::from("#schema=spec-tokens-v1\nid,label,pi,pi_tilde,trigger\n");
    for v in 0..spec.vocab_size() {
        let label = spec.labels()[v].replace('"', "\"\"");
        writeln!(s, "{v},\"{label}\",{},{},{}", fmt_f64(spec.pi()[v]), fmt_f64(spec.pi_tilde()[v]), spec.is_trigger(v)).unwrap();
    }
    out.write("metrics.csv", s.as_bytes())?;
    report.metrics.insert("vocab".into(), json!(spec.vocab_size()));
    report.metrics.insert("source_hash".into(), json!(spec.source_hash()));
    Ok(())
}
