//! Check analytic gradients of the composite loss against central finite
//! differences, end to end through prompts, generator and backbone.
//!
//! ```bash
//! cargo run --release --example gradient_check
//! ```

use mprompt::cluster::cluster_contexts;
use mprompt::config::TrainConfig;
use mprompt::corpus::{generate_corpus, CorpusSpec};
use mprompt::data::build_training_vocab;
use mprompt::independence::PairSample;
use mprompt::model::{TransformerConfig, TransformerParams};
use mprompt::prompts::{init_prompts, PromptBank, PromptDims};
use mprompt::tensor::{gradient_close, relative_error};
use mprompt::trainer::{loss_gradients, loss_value, prepare_split, Models};

fn set_entry(bank: &mut PromptBank, cfg: &TrainConfig, name: &str, r: usize, c: usize, x: f64) {
    let m = bank
        .named_matrices_mut(cfg.ablations())
        .into_iter()
        .find(|(n, _)| n == name)
        .unwrap()
        .1;
    m[[r, c]] = x;
}

fn main() {
    let corpus = generate_corpus(
        &CorpusSpec {
            examples_per_domain: 12,
            ..CorpusSpec::default()
        },
        5,
    )
    .unwrap();


    let vocab = build_training_vocab(&corpus.train, 256).unwrap();

    let backbone = TransformerParams::init(
        TransformerConfig {
            vocab_size: vocab.size(),
            d_model: 16,
            heads: 4,
            layers: 2,
            max_input_len: 32,
            max_target_len: 8,
            dropout: 0.0,
        },
        1,
    )
    .unwrap();
    let generator = TransformerParams::init(
        TransformerConfig {
            vocab_size: vocab.size(),
            d_model: 8,
            heads: 2,
            layers: 1,
            max_input_len: 32,
            max_target_len: 32,
            dropout: 0.0,
        },
        2,
    )
    .unwrap();
    let models = Models {
        backbone,
        generator,
    };

    let cfg = TrainConfig {
        n: 3,
        max_ans_length: 6,
        ..TrainConfig::default()
    };
    let domains = cluster_contexts(&corpus.train, 3, 0).unwrap();
    let split = prepare_split(&corpus.train, &vocab, &domains, 32, 6).unwrap();

    let dims = PromptDims {
        t: 4,
        rho: 3,
        kappa: 4,
        n: 3,
        d_p: 8,
        d: 16,
        layers: 2,
        hidden: 8,
    };
    let mut bank = init_prompts(dims, &models.generator, 9).unwrap();

    let batch = [0usize, 13, 26];
    let pairs = PairSample {
        pairs: vec![(0, 1), (0, 2), (1, 2)],
    };
    let (grads, report) = loss_gradients(&bank, &models, &split, &batch, &pairs, &cfg).unwrap();
    println!(
        "loss = {:.6} (nll {:.6}, idp {:.6})\n",
        report.total, report.nll, report.idp
    );

    let step = 1e-5;
    let mut worst: f64 = 0.0;
    let names: Vec<String> = grads.keys().cloned().collect();
    for name in &names {
        let g = &grads[name];
        let (r, c) = (g.nrows() / 2, g.ncols() / 2);
        let analytic = g[[r, c]];
        let base = bank
            .named_matrices_mut(cfg.ablations())
            .into_iter()
            .find(|(n, _)| n == name)
            .unwrap()
            .1[[r, c]];

        set_entry(&mut bank, &cfg, name, r, c, base + step);
        let hi = loss_value(&bank, &models, &split, &batch, &pairs, &cfg).unwrap();
        set_entry(&mut bank, &cfg, name, r, c, base - step);
        let lo = loss_value(&bank, &models, &split, &batch, &pairs, &cfg).unwrap();
        set_entry(&mut bank, &cfg, name, r, c, base);

        let fd = (hi - lo) / (2.0 * step);
        let err = relative_error(analytic, fd);
        assert!(gradient_close(analytic, fd), "{name} gradient mismatch");
        worst = worst.max(err);
        println!("{name:<34} analytic {analytic:>12.3e}  fd {fd:>12.3e}  rel err {err:.2e}");
    }
    println!("\nchecked {} parameter groups, worst relative error {worst:.2e}", names.len());
}
