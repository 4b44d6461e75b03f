use persrec::datakit::{generate_synthetic, split, SplitSpec, SyntheticConfig};
use persrec::evalkit::{evaluate, score_history};
use persrec::inference::{compress_segments, read_cache, recommend, top_k, write_cache_with_width};
use persrec::tinyformer::{init_model, read_checkpoint, write_checkpoint, ModelConfig};
use persrec::trainer::{train, TrainConfig};

fn setup() -> (persrec::datakit::Split, SyntheticConfig) {
    let cfg = SyntheticConfig {
        num_users: 40,
        vocab_size: 64,
        num_clusters: 4,
        seq_len: 30,
        ..SyntheticConfig::default()
    };
    let data = generate_synthetic(&cfg).unwrap();
    (split(&data, &SplitSpec::new(24, 6, 16, 8).unwrap()).unwrap(), cfg)
}

#[test]
fn train_checkpoint_cache_recommend() {
    let (parts, data_cfg) = setup();
    let plan = parts.spec.plan(2).unwrap();
    let cfg = ModelConfig {
        num_layers: 2,
        model_dim: 8,
        num_heads: 2,
        ffn_dim: 16,
        vocab_size: data_cfg.vocab_size,
        max_positions: plan.flat_len(),
        num_expert_slots: plan.total_experts(),
        seed: 1,
    };
    let tc = TrainConfig {
        epochs: 2,
        learning_rate: 3e-3,
        ..TrainConfig::default()
    };
    let (model, stats) = train(init_model(&cfg).unwrap(), &parts.train, &plan, &tc).unwrap();
    let (again, _) = train(init_model(&cfg).unwrap(), &parts.train, &plan, &tc).unwrap();
    assert_eq!(model.params, again.params);
    assert_eq!(stats.epochs.len(), 2);

    let mut bytes = Vec::new();
    let crc = write_checkpoint(&model, &mut bytes).unwrap();
    let (loaded, crc2) = read_checkpoint(bytes.as_slice()).unwrap();
    assert_eq!(crc, crc2);

    let cache = compress_segments(&loaded, parts.pretrain(0), &plan, crc).unwrap();
    let mut file = Vec::new();
    write_cache_with_width(&cache, 8, &mut file).unwrap();
    let cache = read_cache(file.as_slice(), &plan).unwrap();
    let rec = recommend(&loaded, &cache, parts.recent(0), 5).unwrap();
    let direct = top_k(&score_history(&loaded, &parts.train[0], &plan).unwrap(), 5).unwrap();
    assert_eq!(rec.item_ids(), direct.item_ids());

    let targets: Vec<u32> = parts.test.iter().map(|t| t[0]).collect();
    let m = evaluate(&loaded, &parts.train, &targets, &plan, &[10, 64]).unwrap();
    assert!((m.recall(64) - 1.0).abs() < 1e-12);
    assert!(m.recall(10) <= m.recall(64));
}
