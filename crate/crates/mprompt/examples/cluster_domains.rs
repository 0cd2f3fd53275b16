//! Embed contexts, cluster them into domains, and check the clustering
//! against the generator's planted labels.
//!
//! ```bash
//! cargo run --release --example cluster_domains
//! ```

use mprompt::cluster::{adjusted_rand_index, assign_domain, cluster_contexts, embed_context};
use mprompt::corpus::{generate_corpus, CorpusSpec};

fn main() {
    let spec = CorpusSpec {
        examples_per_domain: 100,
        ..CorpusSpec::default()
    };
    let corpus = generate_corpus(&spec, 7).unwrap();

    let model = cluster_contexts(&corpus.train, 4, 0).unwrap();
    let got: Vec<usize> = corpus
        .train
        .iter()
        .map(|e| model.assignments[&e.id])
        .collect();
    let planted: Vec<usize> = corpus.train.iter().map(|e| corpus.planted[&e.id]).collect();
    println!(
        "adjusted Rand index vs planted domains: {}",
        adjusted_rand_index(&got, &planted)
    );

    // unseen contexts are routed to the nearest centroid
    let mut hits = 0;
    for ex in &corpus.test {
        let domain = assign_domain(&embed_context(&ex.context), &model);
        // planted labels and cluster ids may be permuted; count agreement
        // with the majority mapping instead
        let mate = corpus
            .train
            .iter()
            .find(|t| corpus.planted[&t.id] == corpus.planted[&ex.id])
            .unwrap();
        if domain == model.assignments[&mate.id] {
            hits += 1;
        }
    }
    println!(
        "test contexts routed to their domain's cluster: {hits}/{}",
        corpus.test.len()
    );
}
