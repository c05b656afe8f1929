use card::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use card::data::{
    generate_synthetic, labels_to_string, load_dataset, parse_labels, save_dataset, split_leave_one_out, Sample,
    SyntheticSpec,
};
use card::evaluator::{evaluate_model, EvalSettings};
use card::rng::seeded_rng;
use card::trainer::{run_training, train_step, TrainOptions, TrainState};
use card::{CardModel, ModelConfig, Variant};

fn small_spec(users: usize) -> SyntheticSpec {
    SyntheticSpec {
        n_users: users,
        n_items: 128,
        min_len: 6,
        max_len: 12,
        ..SyntheticSpec::default()
    }
}

fn small_config() -> ModelConfig {
    ModelConfig {
        d: 32,
        layers: 1,
        heads: 2,
        ffn_hidden: 64,
        denoiser_hidden: 64,
        diffusion_steps: 50,
        batch_size: 64,
        ..ModelConfig::default()
    }
}

#[test]
fn total_loss_halves_over_two_hundred_epochs() {
    let config = ModelConfig {
        epochs: 200,
        ..small_config()
    };
    let seeds = [1u64, 2, 3];
    let mut mean_curve = vec![0.0; config.epochs];
    for &seed in &seeds {
        let corpus = generate_synthetic(&small_spec(50), &mut seeded_rng(seed, "synth")).unwrap();
        let data = corpus.dataset();
        let split = split_leave_one_out(&data.sequences);
        let cfg = ModelConfig { seed, ..config.clone() };
        let mut model = CardModel::new(cfg.clone(), data.vocab.len(), &mut seeded_rng(seed, "init"));
        let opts = TrainOptions {
            skip_validation: true,
            ..TrainOptions::default()
        };
        let report = run_training(&mut model, &data, &split, opts).unwrap();
        for (acc, v) in mean_curve.iter_mut().zip(report.total_losses(cfg.lambda_aux)) {
            *acc += v / seeds.len() as f64;
        }
    }
    let (first, last) = (mean_curve[0], mean_curve[mean_curve.len() - 1]);
    assert!(last <= 0.5 * first, "total loss {first:.4} -> {last:.4}");
    // single epochs are noisy; 20-epoch block means must fall monotonically
    let blocks: Vec<f64> = mean_curve.chunks(20).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    for w in blocks.windows(2) {
        assert!(w[1] < w[0], "block means not decreasing: {blocks:?}");
    }
}

#[test]
fn zero_threshold_without_removal_matches_no_routing() {
    let corpus = generate_synthetic(&small_spec(60), &mut seeded_rng(4, "synth")).unwrap();
    let data = corpus.dataset();
    // single-pair histories have zero entropy and would still route as stable
    let samples: Vec<Sample> = split_leave_one_out(&data.sequences)
        .train
        .into_iter()
        .filter(|s| s.history.len() >= 3)
        .collect();
    let config = ModelConfig {
        lambda_stb: 0.0,
        dts_max_removal_frac: 0.0,
        ..small_config()
    };
    let run = |variant| {
        let mut model = CardModel::new(config.clone(), data.vocab.len(), &mut seeded_rng(4, "init"));
        let mut state = TrainState::new(&model, 4);
        let mut losses = Vec::new();
        for batch in samples.chunks(32).take(6) {
            let batch: Vec<&Sample> = batch.iter().collect();
            losses.push(train_step(&mut model, &mut state, &batch, variant).unwrap());
        }
        (model, state.counters, losses)
    };
    let (full, full_counters, full_losses) = run(Variant::Full);
    let (plain, plain_counters, plain_losses) = run(Variant::NoRouting);
    assert_eq!(full_losses, plain_losses);
    assert_eq!(full_counters.per_passes, plain_counters.per_passes);
    assert_eq!(full_counters.dts_calls, 0);
    for ((_, a), (_, b)) in full.params.iter().zip(plain.params.iter()) {
        assert_eq!(a, b);
    }
}

#[test]
fn variant_counters_follow_their_routes() {
    let corpus = generate_synthetic(&small_spec(40), &mut seeded_rng(5, "synth")).unwrap();
    let data = corpus.dataset();
    let split = split_leave_one_out(&data.sequences);
    let config = ModelConfig {
        epochs: 1,
        ..small_config()
    };
    let opts = |variant| TrainOptions {
        variant,
        skip_validation: true,
        ..TrainOptions::default()
    };
    let mut model = CardModel::new(config.clone(), data.vocab.len(), &mut seeded_rng(5, "init"));
    let all = run_training(&mut model, &data, &split, opts(Variant::NoRouting)).unwrap();
    assert_eq!(all.counters.per_passes, split.train.len());
    assert_eq!(all.counters.sequences, split.train.len());

    let mut model = CardModel::new(config.clone(), data.vocab.len(), &mut seeded_rng(5, "init"));
    let none = run_training(&mut model, &data, &split, opts(Variant::NoAttention)).unwrap();
    assert_eq!(none.counters.per_passes, 0);

    let mut model = CardModel::new(config, data.vocab.len(), &mut seeded_rng(5, "init"));
    let full = run_training(&mut model, &data, &split, opts(Variant::Full)).unwrap();
    assert_eq!(full.counters.per_passes, full.counters.low_stability);
    assert!(full.counters.per_passes <= split.train.len());
}

#[test]
fn corpus_labels_and_checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_synthetic(&small_spec(30), &mut seeded_rng(6, "synth")).unwrap();
    let data = corpus.dataset();
    save_dataset(&data, dir.path()).unwrap();
    let loaded = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded.sequences, data.sequences);
    assert_eq!(loaded.vocab.hash(), data.vocab.hash());

    let labels = parse_labels(&labels_to_string(&corpus.sequences, &corpus.labels)).unwrap();
    for (s, l) in corpus.sequences.iter().zip(&corpus.labels) {
        assert_eq!(&labels[&s.user_id], l);
    }

    let split = split_leave_one_out(&data.sequences);
    let config = ModelConfig {
        epochs: 2,
        ..small_config()
    };
    let mut model = CardModel::new(config.clone(), data.vocab.len(), &mut seeded_rng(6, "init"));
    let report = run_training(&mut model, &data, &split, TrainOptions::default()).unwrap();
    let meta = CheckpointMeta {
        config: config.clone(),
        vocab_hash: data.vocab.hash(),
        n_items: data.vocab.len(),
        epoch: report.best_epoch,
        val_hr: report.best_val_hr,
        val_ndcg: report.best_val_ndcg,
        seed: config.seed,
        variant: Variant::Full,
    };
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&model, &meta, &path).unwrap();
    let (restored, meta2) = load_checkpoint(&path, Some(&data.vocab.hash())).unwrap();
    assert_eq!(meta2, meta);

    let settings = EvalSettings::from_config(&config);
    let a = evaluate_model(&model, &split.test, &data.sequences, Variant::Full, &settings, 3).unwrap();
    let b = evaluate_model(&restored, &split.test, &data.sequences, Variant::Full, &settings, 3).unwrap();
    assert_eq!(a.results, b.results);
}
