//! Training schedule contracts on a small model over the default world.

use clalab::model::{init_model, ModelConfig, Parameters};
use clalab::objectives::{loss_clo, loss_sft, train, LossKind, Objective, TrainConfig, TrainData};
use clalab::worldgen::{emit_training_corpora, generate_world, Statement, WorldSpec, PIVOT};

fn setup() -> (Parameters, TrainData) {
    let world = generate_world(&WorldSpec::default()).unwrap();
    let data = TrainData::from_corpora(&emit_training_corpora(&world), &world.vocab).unwrap();
    let cfg = ModelConfig { vocab_size: world.vocab_size(), n_layers: 2, d_model: 8, n_heads: 2, d_ff: 16, max_seq_len: 16, seed: 42 };
    (init_model(&cfg).unwrap(), data)
}

#[test]
fn zero_epochs_return_the_input() {
    let (p, data) = setup();
    let cfg = TrainConfig { epochs: 0, midalign_layer: 1, ..TrainConfig::default() };
    let (out, log) = train(&p, &data, &cfg).unwrap();
    assert_eq!(out, p);
    assert!(log.entries.is_empty());
}

#[test]
fn training_is_deterministic() {
    let (p, data) = setup();
    for objective in [Objective::Mist, Objective::Midalign, Objective::Clo] {
        let cfg = TrainConfig { objective, midalign_layer: 1, ..TrainConfig::default() };
        let a = train(&p, &data, &cfg).unwrap();
        let b = train(&p, &data, &cfg).unwrap();
        assert_eq!(a, b, "{objective:?}");
        assert_eq!(a.0.revision(), a.1.entries.len() as u64);
    }
}

#[test]
fn midalign_alternates_strictly() {
    let (p, data) = setup();
    let cfg = TrainConfig { objective: Objective::Midalign, midalign_layer: 2, ..TrainConfig::default() };
    let (_, log) = train(&p, &data, &cfg).unwrap();
    assert!(log.entries.len() >= 4);
    for (i, e) in log.entries.iter().enumerate() {
        let want = if i % 2 == 0 { LossKind::Sft } else { LossKind::Align };
        assert_eq!(e.loss_kind, want, "step {i}");
    }
}

#[test]
fn clo_with_lambda_one_is_local_sft() {
    let (p, data) = setup();
    let mut policy = p.clone();
    for v in policy.as_mut_slice().iter_mut() {
        *v *= 1.3;
    }
    let local: Vec<_> = data.preferences.iter().filter(|t| t.lang != PIVOT).take(3).cloned().collect();
    let pivot: Vec<_> = data.preferences.iter().filter(|t| t.lang == PIVOT).take(2).cloned().collect();
    let batch: Vec<_> = local.iter().chain(&pivot).cloned().collect();
    let (clo, _) = loss_clo(&policy, &p, &batch, 1.0, 1.0).unwrap();
    let sft_batch: Vec<Statement> = local.iter().map(|t| Statement { query: t.x.clone(), response: t.y_pref.clone() }).collect();
    let (sft, _) = loss_sft(&policy, &sft_batch).unwrap();
    assert_eq!(clo, sft);
}

#[test]
fn every_objective_lowers_its_own_loss() {
    let (p, data) = setup();
    for objective in [Objective::Pretrain, Objective::Mist, Objective::Clo] {
        let cfg = TrainConfig { objective, midalign_layer: 1, epochs: 3, lr: 0.1, ..TrainConfig::default() };
        let (_, log) = train(&p, &data, &cfg).unwrap();
        let n = log.entries.len() / 3;
        let first: f64 = log.entries[..n].iter().map(|e| e.loss).sum::<f64>() / n as f64;
        let last: f64 = log.entries[2 * n..].iter().map(|e| e.loss).sum::<f64>() / (log.entries.len() - 2 * n) as f64;
        assert!(last < first, "{objective:?}: {first} -> {last}");
    }
}
