use super::*;
use crate::losses::LossMode;

fn tiny() -> TrainConfig {
    TrainConfig {
        total_env_steps: 240,
        seed: 3,
        eval_every: 100,
        eval_episodes: 2,
        augment_pad: 1,
        batch_size: 8,
        warmup_steps: 60,
        replay_capacity: 500,
        q_target_sync_interval: 50,
        network: NetworkConfig {
            encoder_widths: vec![16],
            latent_dim: 8,
            dynamics_widths: vec![8],
            projector_widths: vec![8],
            projection_dim: 4,
            predictor_widths: vec![4],
            num_predictors: 2,
            q_head_widths: vec![8],
        },
        env: MdpSpec {
            grid_size: 4,
            margin: 1,
            max_episode_steps: 30,
            ..MdpSpec::default()
        },
        ..TrainConfig::default()
    }
}

fn params(stack: &NetworkStack) -> Vec<Vec<f64>> {
    stack
        .online
        .named()
        .into_iter()
        .chain(stack.target.named())
        .map(|(_, t)| t.data().to_vec())
        .collect()
}

#[test]
fn defaults_round_trip_through_toml() {
    let c = TrainConfig::default();
    assert_eq!(toml::from_str::<TrainConfig>(&c.to_toml()).unwrap(), c);
    assert_eq!(toml::from_str::<TrainConfig>("").unwrap(), c);
    let partial: TrainConfig = toml::from_str("seed = 9\n[loss]\nmode = \"base\"\n").unwrap();
    assert_eq!((partial.seed, partial.loss.mode), (9, LossMode::Base));
    let err = toml::from_str::<TrainConfig>("seed = 1\nlamda = 0.5\n").unwrap_err();
    assert!(err.to_string().contains("lamda"), "{err}");
}

#[test]
fn validation_rejects_bad_values() {
    assert!(TrainConfig::default().validate().is_ok());
    let cases: Vec<fn(&mut TrainConfig)> = vec![
        |c| c.eval_every = 0,
        |c| c.ema_tau = 1.5,
        |c| c.learning_rate = 0.0,
        |c| c.batch_size = 0,
        |c| c.epsilon_end = 2.0,
        |c| c.loss.pred_steps = 0,
        |c| c.network.num_predictors = 3,
        |c| c.env.grid_size = 1,
    ];
    for f in cases {
        let mut c = TrainConfig::default();
        f(&mut c);
        assert!(c.validate().is_err(), "{c:?}");
    }
}

#[test]
fn runs_are_reproducible() {
    let a = train(&tiny(), None).unwrap();
    let b = train(&tiny(), None).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(params(&a.stack), params(&b.stack));
    assert!(a.updates > 0);
    assert_eq!(learning_curve(&a.log).len(), 3);
}

#[test]
fn zero_steps_leave_the_initialization() {
    let cfg = TrainConfig {
        total_env_steps: 0,
        ..tiny()
    };
    let dir = tempfile::tempdir().unwrap();
    let out = train(&cfg, Some(dir.path())).unwrap();
    assert!(out.log.is_empty() && out.final_score.is_none());
    assert_eq!(fs::read_to_string(dir.path().join(RUN_LOG)).unwrap(), "");
    let init = NetworkStack::new(
        cfg.network.clone(),
        cfg.env.observation_len(),
        &mut Stream::Initialization.rng(cfg.seed),
    )
    .unwrap();
    let ckpt = Checkpoint::load(&dir.path().join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(params(&ckpt.to_stack().unwrap()), params(&init));
}

#[test]
fn modes_share_the_pre_warmup_interaction_stream() {
    let episodes = |mode| {
        let mut cfg = tiny();
        cfg.loss.mode = mode;
        train(&cfg, None)
            .unwrap()
            .log
            .into_iter()
            .filter(|r| r.step <= cfg.warmup_steps && matches!(r.event, LogEvent::Episode { .. }))
            .collect::<Vec<_>>()
    };
    let vcd = episodes(LossMode::Vcd);
    assert!(vcd.len() >= 2);
    assert_eq!(vcd, episodes(LossMode::Base));
}

#[test]
fn evaluation_frequency_does_not_perturb_training() {
    let updates = |every| {
        let cfg = TrainConfig {
            eval_every: every,
            ..tiny()
        };
        let out = train(&cfg, None).unwrap();
        let recs: Vec<_> = out
            .log
            .into_iter()
            .filter(|r| !matches!(r.event, LogEvent::Eval { .. }))
            .collect();
        (recs, params(&out.stack))
    };
    assert_eq!(updates(100), updates(37));
}

#[test]
fn artifacts_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(&tiny(), Some(dir.path())).unwrap();
    let logged = read_run_log(&dir.path().join(RUN_LOG)).unwrap();
    assert_eq!(logged, out.log);
    assert!(logged.windows(2).all(|w| w[0].step <= w[1].step));
    assert!(logged.iter().all(|r| r.seed == 3));
    let cfg: TrainConfig = toml::from_str(&fs::read_to_string(dir.path().join(EFFECTIVE_CONFIG)).unwrap()).unwrap();
    assert_eq!(cfg, tiny());
    let ckpt = Checkpoint::load(&dir.path().join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!((ckpt.seed, ckpt.step), (Some(3), 240));
    assert_eq!(params(&ckpt.to_stack().unwrap()), params(&out.stack));
    assert!(dir.path().join(EVAL_CHECKPOINT).exists());
    assert_eq!(fs::read_to_string(dir.path().join(TIMING_LOG)).unwrap().lines().count(), 3);
}

#[test]
fn update_records_decompose() {
    let out = train(&tiny(), None).unwrap();
    let mut seen = 0;
    for r in &out.log {
        if let LogEvent::Update { losses, .. } = r.event {
            let again = (losses.l_rl + losses.l_pre) + losses.l_con * losses.lambda;
            assert_eq!(again, losses.l_total);
            seen += 1;
        }
    }
    assert_eq!(seen as u64, out.updates);
}

#[test]
fn log_lines_round_trip() {
    let out = train(&tiny(), None).unwrap();
    for r in out.log.iter().take(50) {
        let line = serde_json::to_string(r).unwrap();
        assert_eq!(&serde_json::from_str::<LogRecord>(&line).unwrap(), r);
    }
    let upd = out.log.iter().find(|r| matches!(r.event, LogEvent::Update { .. })).unwrap();
    let v: serde_json::Value = serde_json::to_value(upd).unwrap();
    for key in ["step", "seed", "event", "l_rl", "l_pre", "l_con", "l_total", "lambda", "mode"] {
        assert!(v.get(key).is_some(), "{key} missing from {v}");
    }
}

#[test]
fn exploding_updates_abort_with_a_dump() {
    let cfg = TrainConfig {
        learning_rate: 1e300,
        ..tiny()
    };
    let dir = tempfile::tempdir().unwrap();
    match train(&cfg, Some(dir.path())) {
        Err(TrainError::NonFinite { dump: Some(p), .. }) => {
            let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap();
            assert!(doc["rewards"].as_array().unwrap().len() == 8);
        }
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}

#[test]
fn evaluation_contracts() {
    let cfg = tiny();
    let stack = NetworkStack::new(cfg.network.clone(), cfg.env.observation_len(), &mut SplitMix64::new(1)).unwrap();
    let a = evaluate(&stack, &cfg.env, 3, 5).unwrap();
    assert_eq!(a, evaluate(&stack, &cfg.env, 3, 5).unwrap());
    assert!(evaluate(&stack, &cfg.env, 0, 5).is_err());

    // One episode equals a hand-rolled greedy rollout.
    let mut resets = SplitMix64::new(8);
    let (mut state, mut obs, mut rng) = env::reset(&cfg.env, resets.next_u64());
    let mut ret = 0.0;
    loop {
        let q = stack.q_values(obs.data(), false).unwrap();
        let out = env::step(&cfg.env, &state, Action::from_index(greedy_action(&q)).unwrap(), &mut rng).unwrap();
        ret += out.reward;
        if out.done {
            break;
        }
        (state, obs) = (out.state, out.observation);
    }
    assert_eq!(evaluate(&stack, &cfg.env, 1, 8).unwrap(), ret);

    let (lo, hi) = cfg.env.return_range();
    let random = random_policy_return(&cfg.env, 200, 1).unwrap();
    assert!(random > lo && random < hi);
    let untrained = evaluate(&stack, &cfg.env, 50, 2).unwrap();
    assert!((untrained - random).abs() <= 0.5 * (hi - lo), "{untrained} vs {random}");
}

#[test]
fn ablation_plans_cross_products() {
    let base = tiny();
    let plan = plan_ablation(
        &base,
        &[(AblationAxis::Lambda, vec!["0".into(), "0.5".into()])],
        &[0, 1, 2, 3, 4],
    )
    .unwrap();
    assert_eq!(plan.len(), 10);
    let table1 = plan_ablation(
        &base,
        &[
            (AblationAxis::Lambda, vec!["0".into(), "0.5".into()]),
            (AblationAxis::KSteps, vec!["1".into(), "2".into(), "3".into()]),
        ],
        &[0],
    )
    .unwrap();
    let labels: Vec<&str> = table1.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(
        labels,
        [
            "lambda=0;k_steps=1",
            "lambda=0;k_steps=2",
            "lambda=0;k_steps=3",
            "lambda=0.5;k_steps=1",
            "lambda=0.5;k_steps=2",
            "lambda=0.5;k_steps=3"
        ]
    );
    assert_eq!(table1[4].config.loss.pred_steps, 2);
    let ids: std::collections::HashSet<_> = table1.iter().map(|r| r.run_id.clone()).collect();
    assert_eq!(ids.len(), 6);

    for (axis, bad) in [
        (AblationAxis::Lambda, "-1"),
        (AblationAxis::KSteps, "0"),
        (AblationAxis::Mode, "vcd-pne"),
        (AblationAxis::Predictors, "3"),
        (AblationAxis::Tau, "abc"),
    ] {
        assert!(plan_ablation(&base, &[(axis, vec!["1".into(), bad.into()])], &[0]).is_err());
    }
    assert!(plan_ablation(&base, &[(AblationAxis::Tau, vec!["0.5".into()])], &[]).is_err());
    assert!("momentum".parse::<AblationAxis>().is_err());
}

#[test]
fn ablation_is_parallel_safe_and_resumable() {
    let base = TrainConfig {
        total_env_steps: 120,
        warmup_steps: 40,
        eval_every: 60,
        ..tiny()
    };
    let axes = [(AblationAxis::Predictors, vec!["0".into(), "2".into()])];
    let serial = tempfile::tempdir().unwrap();
    let parallel = tempfile::tempdir().unwrap();
    let a = run_ablation(&base, &axes, &[0, 1], serial.path(), 1).unwrap();
    let b = run_ablation(&base, &axes, &[0, 1], parallel.path(), 2).unwrap();
    assert_eq!(a, b);
    let csv = |d: &Path| fs::read_to_string(d.join("scores.csv")).unwrap();
    assert_eq!(csv(serial.path()), csv(parallel.path()));
    assert_eq!(a.scores.num_tasks(), 2);
    assert_eq!(a.scores.num_runs(), 2);
    assert!(csv(serial.path()).starts_with("config,seed,score\npredictors=0,0,"));

    let log_path = serial.path().join("runs").join(&a.runs[0].run_id).join(RUN_LOG);
    let before = fs::metadata(&log_path).unwrap().modified().unwrap();
    let again = run_ablation(&base, &axes, &[0, 1], serial.path(), 1).unwrap();
    assert_eq!(again, a);
    assert_eq!(fs::metadata(&log_path).unwrap().modified().unwrap(), before);
}
