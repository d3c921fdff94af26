use breen::model::{BreenModel, Group};
use breen::numcore::Array;
use breen::sequence::Stage;
use breen::trainpipe::{
    decode_checkpoint, encode_checkpoint, example_gradients, freeze_policy, load_checkpoint, load_for_resume,
    periodic_path, run_stage, train_step, AdamW, Example, Moments, RunOptions, Schedule, StageSpec, TrainState,
};
use breen::verify::{groups_changed_by_step, tiny_fixture};
use breen::Error;

fn tiny_data(stage: Stage, n: u64) -> (BreenModel, Vec<Example>) {
    let model = tiny_fixture(0, stage, 0.0).unwrap().model;
    let data = (0..n).map(|i| tiny_fixture(100 + i, stage, 0.0).unwrap().example()).collect();
    (model, data)
}

fn spec(stage: Stage, steps: u64) -> StageSpec {
    StageSpec {
        batch_size: 4,
        steps,
        lr: 5e-3,
        ..StageSpec::desk(stage)
    }
}

fn bits(b: &[breen::losses::LossBreakdown]) -> Vec<u64> {
    b.iter().map(|x| x.total.to_bits()).collect()
}

#[test]
fn freeze_policy_sets() {
    let pre = freeze_policy(Stage::Prealign);
    assert_eq!(
        pre.into_iter().collect::<Vec<_>>(),
        vec![Group::PatchMlp, Group::Queries, Group::ImageFfn, Group::QueryProj]
    );
    assert_eq!(freeze_policy(Stage::Pretrain).len(), Group::ALL.len());
    assert_eq!(freeze_policy(Stage::Sft).len(), Group::ALL.len());
    assert_eq!(StageSpec::paper(Stage::Sft).alpha, 0.5);
}

#[test]
fn one_step_changes_exactly_the_trainable_groups() {
    for stage in [Stage::Prealign, Stage::Pretrain] {
        let mut changed = groups_changed_by_step(7, stage).unwrap();
        changed.sort();
        let want: Vec<Group> = freeze_policy(stage).into_iter().collect();
        assert_eq!(changed, want, "{stage}");
    }
}

#[test]
fn adamw_converges_on_a_quadratic() {
    let opt = AdamW::default();
    let target = [1.5f32, -0.75, 0.2, 3.0, -2.0, 0.0];
    for shape in [vec![6], vec![2, 3]] {
        let c = Array::new(shape.clone(), target.to_vec()).unwrap();
        let mut theta = Array::<f32>::zeros(&shape);
        let mut mom = Moments::zeros(&shape);
        let mut steps = 0;
        while steps < 2000 {
            let grad = Array::new(
                shape.clone(),
                theta.data().iter().zip(c.data()).map(|(t, c)| 2.0 * (t - c)).collect(),
            )
            .unwrap();
            opt.update(&mut theta, &grad, &mut mom, 1e-2);
            steps += 1;
        }
        let err = theta.data().iter().zip(c.data()).fold(0.0f32, |m, (t, c)| m.max((t - c).abs()));
        assert!(err < 1e-3, "shape {shape:?}: err {err} after {steps} steps");
    }
}

#[test]
fn linear_decay_reaches_zero() {
    let s = StageSpec {
        schedule: Schedule::LinearDecay,
        ..spec(Stage::Pretrain, 10)
    };
    assert_eq!(s.lr_at(0), s.lr);
    assert!((s.lr_at(5) - s.lr / 2.0).abs() < 1e-15);
    assert_eq!(s.lr_at(10), 0.0);
}

#[test]
fn same_seed_gives_bit_identical_trajectories() {
    let (model, data) = tiny_data(Stage::Pretrain, 6);
    let run = || {
        let mut m = model.clone();
        let mut st = TrainState::new(&m, spec(Stage::Pretrain, 50), 9);
        let losses = run_stage(&mut m, &mut st, &data, &RunOptions::default()).unwrap();
        (m, losses)
    };
    let (m1, l1) = run();
    let (m2, l2) = run();
    assert_eq!(l1.len(), 50);
    assert_eq!(bits(&l1), bits(&l2));
    assert_eq!(m1.params, m2.params);
}

#[test]
fn thread_count_does_not_change_the_step() {
    let (model, data) = tiny_data(Stage::Pretrain, 4);
    let batch: Vec<&Example> = data.iter().collect();
    let step = |threads| {
        let mut m = model.clone();
        let mut st = TrainState::new(&m, spec(Stage::Pretrain, 1), 0);
        let b = train_step(&mut m, &mut st, &batch, threads).unwrap();
        (m.params, b.total.to_bits())
    };
    assert_eq!(step(1), step(3));
}

#[test]
fn resume_matches_the_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let (model, data) = tiny_data(Stage::Pretrain, 6);
    let full_spec = spec(Stage::Pretrain, 20);

    let mut m = model.clone();
    let mut st = TrainState::new(&m, full_spec.clone(), 3);
    let full = run_stage(&mut m, &mut st, &data, &RunOptions::default()).unwrap();

    let ck = dir.path().join("run.brck");
    let mut a = model.clone();
    let mut sa = TrainState::new(&a, full_spec, 3);
    let opts = RunOptions {
        checkpoint: Some(ck.clone()),
        stop_after: Some(12),
        ..RunOptions::default()
    };
    let first = run_stage(&mut a, &mut sa, &data, &opts).unwrap();
    let (mut b, mut sb) = load_for_resume(&ck, &model.config).unwrap();
    assert_eq!(sb.step, 12);
    let rest = run_stage(&mut b, &mut sb, &data, &RunOptions::default()).unwrap();

    let joined: Vec<_> = first.into_iter().chain(rest).collect();
    assert_eq!(bits(&joined), bits(&full));
    assert_eq!(b.params, m.params);
    assert_eq!(sb.moments, st.moments);
}

#[test]
fn zero_steps_change_nothing_but_write_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (model, data) = tiny_data(Stage::Prealign, 2);
    let mut m = model.clone();
    let mut st = TrainState::new(&m, spec(Stage::Prealign, 0), 0);
    let ck = dir.path().join("zero.brck");
    let out = run_stage(
        &mut m,
        &mut st,
        &data,
        &RunOptions {
            checkpoint: Some(ck.clone()),
            ..RunOptions::default()
        },
    )
    .unwrap();
    assert!(out.is_empty());
    assert_eq!(m.params, model.params);
    let (back, s) = load_checkpoint(&ck).unwrap();
    assert_eq!(back.params, model.params);
    assert_eq!(s.step, 0);
}

#[test]
fn periodic_checkpoints_and_metrics_log() {
    let dir = tempfile::tempdir().unwrap();
    let (mut m, data) = tiny_data(Stage::Prealign, 4);
    let mut st = TrainState::new(&m, spec(Stage::Prealign, 5), 1);
    let ck = dir.path().join("pa.brck");
    let metrics = dir.path().join("metrics.jsonl");
    run_stage(
        &mut m,
        &mut st,
        &data,
        &RunOptions {
            checkpoint: Some(ck.clone()),
            checkpoint_every: Some(2),
            metrics: Some(metrics.clone()),
            ..RunOptions::default()
        },
    )
    .unwrap();
    assert!(periodic_path(&ck, 2).exists() && periodic_path(&ck, 4).exists());
    assert!(!periodic_path(&ck, 5).exists());
    assert!(ck.exists());
    let text = std::fs::read_to_string(&metrics).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 5);
    for (i, rec) in lines.iter().enumerate() {
        assert_eq!(rec["step"], i as u64);
        assert_eq!(rec["stage"], "prealign");
        for k in ["align_fine", "align_coarse", "lm", "total"] {
            assert!(rec[k].is_number(), "{k}");
        }
    }
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let (mut m, data) = tiny_data(Stage::Pretrain, 4);
    let mut st = TrainState::new(&m, spec(Stage::Pretrain, 3), 5);
    run_stage(&mut m, &mut st, &data, &RunOptions::default()).unwrap();
    let bytes = encode_checkpoint(&m, &st).unwrap();
    let (m2, st2) = decode_checkpoint(&bytes).unwrap();
    assert_eq!(m2.params, m.params);
    assert_eq!(st2, st);

    let mut bad = bytes.clone();
    let k = bad.len() - 3;
    bad[k] ^= 0x40;
    assert!(matches!(decode_checkpoint(&bad), Err(Error::Checksum { .. })));
    assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(decode_checkpoint(&magic).is_err());
}

#[test]
fn resume_refuses_a_different_config() {
    let dir = tempfile::tempdir().unwrap();
    let (m, _) = tiny_data(Stage::Pretrain, 1);
    let st = TrainState::new(&m, spec(Stage::Pretrain, 1), 0);
    let ck = dir.path().join("c.brck");
    breen::trainpipe::save_checkpoint(&m, &st, &ck).unwrap();
    let mut other = m.config.clone();
    other.d_model = 32;
    match load_for_resume(&ck, &other) {
        Err(Error::ConfigHashMismatch { expected, found }) => {
            assert_eq!(found, m.config.hash());
            assert_eq!(expected, other.hash());
        }
        other => panic!("expected hash mismatch, got {other:?}"),
    }
}

#[test]
fn next_stage_carries_moments_and_zeroes_new_ones() {
    let dir = tempfile::tempdir().unwrap();
    let (mut m, data) = tiny_data(Stage::Prealign, 4);
    let mut st = TrainState::new(&m, spec(Stage::Prealign, 2), 0);
    let ck = dir.path().join("pa.brck");
    run_stage(
        &mut m,
        &mut st,
        &data,
        &RunOptions {
            checkpoint: Some(ck.clone()),
            ..RunOptions::default()
        },
    )
    .unwrap();
    let (m, st) = load_checkpoint(&ck).unwrap();
    let next = st.next_stage(&m, spec(Stage::Pretrain, 1));
    assert_eq!(next.step, 0);
    assert_eq!(next.moments.len(), m.params.len());
    for p in m.params.iter() {
        let mom = &next.moments[&p.name];
        assert_eq!(mom.m.shape(), p.value.shape());
        if freeze_policy(Stage::Prealign).contains(&p.group) {
            assert_eq!(mom, &st.moments[&p.name]);
            assert_eq!(mom.t, 2);
        } else {
            assert_eq!(mom, &Moments::zeros(p.value.shape()), "{}", p.name);
        }
    }
}

#[test]
fn zero_alpha_gives_no_alignment_gradient() {
    let (m, data) = tiny_data(Stage::Pretrain, 1);
    let s = StageSpec {
        alpha: 0.0,
        ..spec(Stage::Pretrain, 1)
    };
    let (b, grads) = example_gradients(&m, &data[0], &s, 1.0).unwrap();
    assert_eq!(b.total, b.lm);
    for (p, g) in m.params.iter().zip(&grads) {
        if p.group == Group::QueryProj {
            assert!(g.as_ref().unwrap().data().iter().all(|&v| v == 0.0), "{}", p.name);
        }
    }
    // Queries still feel the language-model path.
    let q = m.params.position("queries.s3").unwrap();
    assert!(grads[q].as_ref().unwrap().max_abs() > 0.0);
}

#[test]
fn nan_parameters_abort_with_a_named_component() {
    let (mut m, data) = tiny_data(Stage::Pretrain, 2);
    m.params.get_mut("lm_head").unwrap().value.data_mut()[0] = f32::NAN;
    let mut st = TrainState::new(&m, spec(Stage::Pretrain, 1), 0);
    let batch: Vec<&Example> = data.iter().collect();
    match train_step(&mut m, &mut st, &batch, 1) {
        Err(Error::NonFinite { step: 0, component }) => assert_eq!(component, "lm"),
        other => panic!("expected NonFinite, got {other:?}"),
    }
}

#[test]
fn wrong_stage_data_is_rejected() {
    let (mut m, data) = tiny_data(Stage::Pretrain, 2);
    let mut st = TrainState::new(&m, spec(Stage::Prealign, 1), 0);
    assert!(matches!(
        run_stage(&mut m, &mut st, &data, &RunOptions::default()),
        Err(Error::Contract(_))
    ));
}
