//! Trains recent-only, full-sequence and personalized models on the default
//! synthetic dataset and prints Recall@10 / NDCG@10 for each.
//!
//! Usage: `cargo run --release --example synthetic_benchmark [epochs] [lr] [dim]`

use std::time::Instant;

use persrec::datakit::{generate_synthetic, split, SplitSpec, SyntheticConfig};
use persrec::evalkit::evaluate;
use persrec::seqcore::SegmentationPlan;
use persrec::tinyformer::{init_model, ModelConfig};
use persrec::trainer::{train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map_or(16, |s| s.parse().unwrap());
    let lr: f64 = args.get(2).map_or(3e-3, |s| s.parse().unwrap());
    let dim: usize = args.get(3).map_or(32, |s| s.parse().unwrap());

    let data = generate_synthetic(&SyntheticConfig::default()).unwrap();
    let spec = SplitSpec::new(80, 20, 64, 16).unwrap();
    let parts = split(&data, &spec).unwrap();
    let targets: Vec<u32> = parts.test.iter().map(|t| t[0]).collect();

    let runs = [
        ("recent", SegmentationPlan::single(16).unwrap()),
        ("full", SegmentationPlan::single(80).unwrap()),
        ("personalized", spec.plan(4).unwrap()),
    ];
    for (name, plan) in runs {
        let cfg = ModelConfig {
            num_layers: 2,
            model_dim: dim,
            num_heads: 2,
            ffn_dim: 2 * dim,
            vocab_size: data.vocab_size,
            max_positions: plan.flat_len(),
            num_expert_slots: plan.total_experts(),
            seed: 7,
        };
        let tc = TrainConfig {
            learning_rate: lr,
            epochs,
            seed: 11,
            ..TrainConfig::default()
        };
        let started = Instant::now();
        let (model, stats) = train(init_model(&cfg).unwrap(), &parts.train, &plan, &tc).unwrap();
        let m = evaluate(&model, &parts.train, &targets, &plan, &[10, 50]).unwrap();
        println!(
            "{name:<13} loss {:.4}  R@10 {:.4}  N@10 {:.4}  R@50 {:.4}  {:.1}s",
            stats.final_loss().unwrap(),
            m.recall(10),
            m.ndcg(10),
            m.recall(50),
            started.elapsed().as_secs_f64()
        );
    }
}
