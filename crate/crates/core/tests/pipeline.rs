use sinklab::data::{default_spec, sample_batch, BigramSpec, Variant};
use sinklab::model::{init_model, Checkpoint, ModelConfig};
use sinklab::optim::{train, TrainConfig};
use sinklab::{Transformer32, Transformer64};

fn small() -> (ModelConfig, TrainConfig) {
    let m = ModelConfig { d_model: 16, d_mlp: 32, max_seq: 33, init_std: 0.05, ..ModelConfig::default() };
    let t = TrainConfig { steps: 60, batch: 8, seq_len: 32, probe_every: 20, eval_batch: 8, ..TrainConfig::default() };
    (m, t)
}

#[test]
fn short_training_lowers_eval_loss_and_checkpoints_roundtrip() {
    let spec = default_spec();
    let (mc, tc) = small();
    let out = train::<f64>(&spec, &mc, &tc).unwrap();
    let first = &out.log.records[0];
    let last = out.log.last().unwrap();
    assert_eq!(out.log.records.len(), 4);
    assert_eq!(out.log.losses.len(), 60);
    assert!(last.eval_loss < first.eval_loss - 0.2, "{} -> {}", first.eval_loss, last.eval_loss);

    let json = out.model.to_checkpoint(tc.steps).to_json().unwrap();
    let back = Transformer64::from_checkpoint(&Checkpoint::from_json(&json).unwrap()).unwrap();
    let a = out.model.forward(&out.eval_batch, false).unwrap().loss;
    let b = back.forward(&out.eval_batch, false).unwrap().loss;
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn spec_json_roundtrip_preserves_sampling() {
    let spec = default_spec();
    let back = BigramSpec::from_json(&spec.to_json().unwrap()).unwrap();
    assert_eq!(back.source_hash(), spec.source_hash());
    for v in [Variant::Bb, Variant::BbNoBos, Variant::Bs] {
        assert_eq!(sample_batch(&spec, 3, 40, v, 7).unwrap(), sample_batch(&back, 3, 40, v, 7).unwrap());
    }
}

#[test]
fn single_precision_model_tracks_double() {
    let spec = default_spec();
    let (mc, _) = small();
    let batch = sample_batch(&spec, 4, 32, Variant::Bb, 1).unwrap();
    let m64: Transformer64 = init_model(&mc).unwrap();
    let m32: Transformer32 = init_model(&mc).unwrap();
    let (l64, l32) = (m64.forward(&batch, false).unwrap().loss, m32.forward(&batch, false).unwrap().loss);
    assert!((l64 - f64::from(l32)).abs() < 1e-4, "{l64} vs {l32}");
}

#[test]
fn every_variant_trains_without_error() {
    let spec = default_spec();
    let (mc, tc) = small();
    for variant in [Variant::BbNoBos, Variant::Bs] {
        let tc = TrainConfig { steps: 5, variant, ..tc.clone() };
        let out = train::<f64>(&spec, &mc, &tc).unwrap();
        assert!(out.log.last().unwrap().eval_loss.is_finite());
    }
}
