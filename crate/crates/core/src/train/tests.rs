use super::*;

fn tiny_run(objective: Objective, schedule: NoiseSchedule, steps: u64) -> RunConfig {
    RunConfig {
        data: DataConfig {
            tokenizer: TokenizerMode::Char,
            window: 8,
            val_fraction: 0.25,
        },
        model: ModelSection {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            dropout_p: 0.0,
        },
        train: TrainConfig {
            objective,
            schedule,
            learning_rate: 1e-2,
            batch_tokens: 32,
            total_steps: steps,
            eval_interval: 5,
            warmup_steps: 2,
            seed: 3,
            ..TrainConfig::default()
        },
    }
}

fn docs() -> Vec<String> {
    vec!["abcabcabdabcabcabdabcabcabdabcab".into(), "cabbacabbacabbac".into()]
}

#[test]
fn zero_steps_is_rejected() {
    let mut cfg = tiny_run(Objective::Film, NoiseSchedule::Uniform, 1);
    cfg.train.total_steps = 0;
    let data = TrainData::prepare(&docs(), &cfg.data, 0).unwrap();
    assert!(matches!(train(&cfg, &data), Err(Error::InvalidConfig(_))));
}

#[test]
fn bad_learning_rate_is_rejected() {
    let mut cfg = tiny_run(Objective::Film, NoiseSchedule::Uniform, 1);
    cfg.train.learning_rate = 0.0;
    assert!(cfg.validate().is_err());
}

#[test]
fn toml_round_trip_and_defaults() {
    let cfg = RunConfig::from_toml(
        r#"
        [data]
        window = 16
        [train]
        objective = "clm"
        schedule = "beta-mode:0.5"
        total_steps = 7
        "#,
    )
    .unwrap();
    assert_eq!(cfg.data.window, 16);
    assert_eq!(cfg.train.objective, Objective::Clm);
    assert_eq!(cfg.train.schedule, NoiseSchedule::Beta { alpha: 2.5, beta: 2.5 });
    assert_eq!(cfg.model, ModelSection::default());
    let again = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
    assert_eq!(again, cfg);
    assert!(RunConfig::from_toml("[train]\nlearning_rat = 1.0\n").is_err());
}

#[test]
fn objective_shapes() {
    assert_eq!(Objective::Film.n_max(32), 32);
    assert_eq!(Objective::Clm.n_max(32), 33);
    assert_eq!(Objective::Cm.n_max(32), 43);
    assert_eq!(Objective::Cm.vocab_size(20), 30);
    assert_eq!("cm".parse::<Objective>().unwrap(), Objective::Cm);
    assert!("mlm".parse::<Objective>().is_err());
}

#[test]
fn split_keeps_every_sequence_once() {
    let cfg = tiny_run(Objective::Film, NoiseSchedule::Uniform, 1);
    let data = TrainData::prepare(&docs(), &cfg.data, 9).unwrap();
    let all = corpus::load_sequences(&docs(), &data.vocab, 8).unwrap();
    assert_eq!(data.train.len() + data.validation.len(), all.len());
    assert_eq!(data.validation.len(), all.len() / 4);
    let mut seen: Vec<_> = data.train.iter().chain(&data.validation).cloned().collect();
    let mut expected = all;
    seen.sort_by(|a, b| a.ids().cmp(b.ids()));
    expected.sort_by(|a, b| a.ids().cmp(b.ids()));
    assert_eq!(seen, expected);
}

#[test]
fn same_seed_gives_identical_metrics() {
    for objective in [Objective::Film, Objective::Clm, Objective::Cm] {
        let cfg = tiny_run(objective, NoiseSchedule::Uniform, 6);
        let data = TrainData::prepare(&docs(), &cfg.data, 1).unwrap();
        let a = train(&cfg, &data).unwrap();
        let b = train(&cfg, &data).unwrap();
        assert_eq!(metrics_jsonl(&a.metrics).unwrap(), metrics_jsonl(&b.metrics).unwrap());
        assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
        let mut other = cfg.clone();
        other.train.seed += 1;
        let c = train(&other, &data).unwrap();
        assert_ne!(metrics_jsonl(&a.metrics).unwrap(), metrics_jsonl(&c.metrics).unwrap());
    }
}

#[test]
fn fixed_schedule_is_the_mlm_objective() {
    // Fixed(0.15) draws p = 0.15 for every sequence and masks with the same
    // per-token law as any other schedule.
    let cfg = tiny_run(Objective::Film, NoiseSchedule::Fixed(0.15), 4);
    let data = TrainData::prepare(&docs(), &cfg.data, 1).unwrap();
    let out = train(&cfg, &data).unwrap();
    for m in &out.metrics {
        assert_eq!(m.p_mean, Some(0.15));
        assert_eq!((m.p_min, m.p_max), (Some(0.15), Some(0.15)));
        let hist = m.p_hist.unwrap();
        assert_eq!(hist[1], 4);
        assert_eq!(hist.iter().sum::<u32>(), 4);
    }
    let builder = ExampleBuilder {
        objective: Objective::Film,
        schedule: NoiseSchedule::Fixed(0.15),
        sentinels: Sentinels::for_vocab(&data.vocab),
    };
    let x = &data.train[0];
    let mut a = rng::stream(5, 0);
    let mut b = rng::stream(5, 0);
    let mut spans = rng::stream(5, 1);
    let (ex, p) = builder.build(x, &mut a, &mut spans).unwrap();
    let direct = mask_sequence(x, 0.15, &mut b).unwrap();
    assert_eq!(p, Some(0.15));
    assert_eq!(ex.input, direct.ids());
}

#[test]
fn causal_objectives_log_no_mask_probability() {
    let cfg = tiny_run(Objective::Clm, NoiseSchedule::Uniform, 2);
    let data = TrainData::prepare(&docs(), &cfg.data, 1).unwrap();
    let out = train(&cfg, &data).unwrap();
    assert!(out.metrics.iter().all(|m| m.p_hist.is_none()));
    // 4 sequences of 8 tokens, each scoring 9 positions
    assert!(out.metrics.iter().all(|m| m.masked_tokens == 36));
}

#[test]
fn loss_goes_down() {
    let cfg = tiny_run(Objective::Film, NoiseSchedule::Uniform, 60);
    let data = TrainData::prepare(&docs(), &cfg.data, 1).unwrap();
    let out = train(&cfg, &data).unwrap();
    let first = out.metrics[..5].iter().map(|m| m.train_loss).sum::<f64>();
    let last = out.metrics[55..].iter().map(|m| m.train_loss).sum::<f64>();
    assert!(last < first, "{first} -> {last}");
    assert!(out.metrics.last().unwrap().val_loss.is_some());
    assert!(out.metrics[0].val_loss.is_none());
}

#[test]
fn writes_checkpoints_and_logs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_run(Objective::Film, NoiseSchedule::Uniform, 12);
    cfg.train.checkpoint_dir = Some(dir.path().to_path_buf());
    let data = TrainData::prepare(&docs(), &cfg.data, 1).unwrap();
    let out = train(&cfg, &data).unwrap();
    for name in ["step-000005.ckpt", "step-000010.ckpt", "step-000012.ckpt", "model.ckpt"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let log = fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(log, metrics_jsonl(&out.metrics).unwrap());
    assert_eq!(log.lines().count(), 12);
    let ck = Checkpoint::load(&dir.path().join("model.ckpt")).unwrap();
    assert_eq!(ck.meta::<Vocab>("vocab").unwrap().unwrap(), data.vocab);
    assert_eq!(ck.meta::<u64>("step").unwrap(), Some(12));
    assert_eq!(ck.meta::<Objective>("objective").unwrap(), Some(Objective::Film));
    let restored: Transformer<f32> = ck.to_model().unwrap();
    assert_eq!(restored.params(), out.model.params());
}
