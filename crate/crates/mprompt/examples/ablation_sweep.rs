//! The five-condition ablation harness at toy scale: full method, without
//! domain prompts, without context prompts, without the independence loss,
//! and without the prompt generator.
//!
//! ```bash
//! cargo run --release --example ablation_sweep
//! ```

use mprompt::cluster::cluster_contexts;
use mprompt::config::TrainConfig;
use mprompt::corpus::{generate_corpus, CorpusSpec};
use mprompt::data::build_training_vocab;
use mprompt::model::{TransformerConfig, TransformerParams};
use mprompt::trainer::{ablate, prepare_split, pretrain, Models};

fn main() {
    let corpus = generate_corpus(
        &CorpusSpec {
            examples_per_domain: 200,
            ..CorpusSpec::default()
        },
        3,
    )
    .unwrap();


    let vocab = build_training_vocab(&corpus.train, 512).unwrap();

    let mut backbone = TransformerParams::init(
        TransformerConfig {
            vocab_size: vocab.size(),
            d_model: 64,
            heads: 4,
            layers: 2,
            max_input_len: 64,
            max_target_len: 8,
            dropout: 0.0,
        },
        7,
    )
    .unwrap();
    let generator = TransformerParams::init(
        TransformerConfig {
            vocab_size: vocab.size(),
            d_model: 32,
            heads: 2,
            layers: 1,
            max_input_len: 64,
            max_target_len: 128,
            dropout: 0.0,
        },
        8,
    )
    .unwrap();

    let dummy = mprompt::cluster::DomainModel {
        n: 1,
        seed: 0,
        e: 1,
        centroids: vec![vec![0.0]],
        assignments: Default::default(),
    };
    let pre_train = prepare_split(&corpus.train, &vocab, &dummy, 64, 8).unwrap();
    let pre_val = prepare_split(&corpus.val, &vocab, &dummy, 64, 8).unwrap();
    pretrain(&mut backbone, &vocab, &pre_train, &pre_val, 12, 3e-3, 16, 7, Some(0.95)).unwrap();
    let models = Models {
        backbone,
        generator,
    };

    let cfg = TrainConfig {
        n: 4,
        lr: 2e-3,
        epochs: 3,
        max_ans_length: 8,
        seed: 1,
        ..TrainConfig::default()
    };
    let domains = cluster_contexts(&corpus.train, cfg.n, cfg.seed).unwrap();
    let tune_train = prepare_split(&corpus.train, &vocab, &domains, 64, 8).unwrap();
    let tune_val = prepare_split(&corpus.val, &vocab, &domains, 64, 8).unwrap();

    let rows = ablate(&models, &vocab, &tune_train, &tune_val, &cfg, None).unwrap();
    println!("{:<8} {:>12} {:>10} {:>8}", "variant", "val_metric", "mean_cka", "best_ep");
    for r in &rows {
        println!(
            "{:<8} {:>12.4} {:>10.4} {:>8}",
            r.name, r.val_metric, r.mean_cka, r.best_epoch
        );
    }
}
