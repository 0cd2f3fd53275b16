//! The whole pipeline at toy scale: generate a corpus, pretrain a tiny
//! backbone, freeze it, cluster contexts, prompt-tune, and score the test
//! split. Takes a couple of minutes on one core.
//!
//! ```bash
//! cargo run --release --example train_pipeline
//! ```

use mprompt::cluster::cluster_contexts;
use mprompt::config::TrainConfig;
use mprompt::corpus::{generate_corpus, CorpusSpec};
use mprompt::data::build_training_vocab;
use mprompt::model::{TransformerConfig, TransformerParams};
use mprompt::trainer::{evaluate, prepare_split, pretrain, train, Models};

fn main() {
    // two corpora: a broad one to pretrain the backbone, a small one to tune
    let pretrain_corpus = generate_corpus(
        &CorpusSpec {
            examples_per_domain: 800,
            ..CorpusSpec::default()
        },
        999,
    )
    .unwrap();
    let task_corpus = generate_corpus(
        &CorpusSpec {
            examples_per_domain: 150,
            ..CorpusSpec::default()
        },
        11,
    )
    .unwrap();


    let vocab = build_training_vocab(&pretrain_corpus.train, 512).unwrap();
    println!("vocabulary: {} tokens", vocab.size());

    let backbone_cfg = TransformerConfig {
        vocab_size: vocab.size(),
        d_model: 64,
        heads: 4,
        layers: 2,
        max_input_len: 64,
        max_target_len: 8,
        dropout: 0.0,
    };
    let generator_cfg = TransformerConfig {
        vocab_size: vocab.size(),
        d_model: 32,
        heads: 2,
        layers: 1,
        max_input_len: 64,
        max_target_len: 128,
        dropout: 0.0,
    };
    let mut backbone = TransformerParams::init(backbone_cfg, 7).unwrap();
    let generator = TransformerParams::init(generator_cfg, 8).unwrap();

    // phase 1: pretrain the backbone alone, then freeze it
    let dummy = mprompt::cluster::DomainModel {
        n: 1,
        seed: 0,
        e: 1,
        centroids: vec![vec![0.0]],
        assignments: Default::default(),
    };
    let pre_train = prepare_split(&pretrain_corpus.train, &vocab, &dummy, 64, 8).unwrap();
    let pre_val = prepare_split(&pretrain_corpus.val, &vocab, &dummy, 64, 8).unwrap();
    println!("\npretraining the backbone:");
    let log = pretrain(&mut backbone, &vocab, &pre_train, &pre_val, 10, 3e-3, 16, 7, Some(0.99))
        .unwrap();
    for line in &log {
        println!("  {line}");
    }
    let models = Models {
        backbone,
        generator,
    };

    // phase 2: cluster contexts and tune the prompts
    let cfg = TrainConfig {
        n: 4,
        lr: 2e-3,
        epochs: 10,
        max_ans_length: 8,
        seed: 1,
        ..TrainConfig::default()
    };
    let domains = cluster_contexts(&task_corpus.train, cfg.n, cfg.seed).unwrap();
    let tune_train =
        prepare_split(&task_corpus.train, &vocab, &domains, 64, cfg.max_ans_length).unwrap();
    let tune_val =
        prepare_split(&task_corpus.val, &vocab, &domains, 64, cfg.max_ans_length).unwrap();
    let tune_test =
        prepare_split(&task_corpus.test, &vocab, &domains, 64, cfg.max_ans_length).unwrap();

    println!("\nprompt tuning (backbone and generator frozen):");
    let outcome = train(&models, &vocab, &tune_train, &tune_val, &cfg, Some(0.99)).unwrap();
    for line in &outcome.log_lines {
        println!("  {line}");
    }
    println!(
        "\nbest epoch {} | validation metric {:.4}",
        outcome.best_epoch, outcome.best_metric
    );
    println!(
        "trainable prompt parameters: {} | frozen transformer parameters: {}",
        outcome.trainable_params, outcome.frozen_params
    );

    let report = evaluate(
        &models,
        Some(&outcome.best_bank),
        cfg.ablations(),
        &tune_test,
        &vocab,
        cfg.max_ans_length,
    )
    .unwrap();
    println!(
        "\ntest split: exact match {:.4} | token F1 {:.4} | ROUGE-L {:.4} ({} examples)",
        report.exact_match, report.token_f1, report.rouge_l, report.n_examples
    );
}
