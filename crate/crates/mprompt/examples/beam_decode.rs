//! Beam search on a forced-logit toy model: width 1 is exactly greedy,
//! width 2 matches the exhaustive argmax of length-normalized scores.
//!
//! ```bash
//! cargo run --release --example beam_decode
//! ```

use mprompt::model::{beam_search, greedy_reference};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

const EOS: usize = 0;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let table: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..4).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();

    println!("per-position logits (token 0 is the end token):");
    for (i, row) in table.iter().enumerate() {
        println!("  step {i}: {row:?}");
    }

    let next = |prefix: &[usize]| table[prefix.len()].clone();
    let beam1 = beam_search(next, EOS, 1, 1, 3);
    let greedy = greedy_reference(next, EOS, 1, 3);
    let beam2 = beam_search(next, EOS, 2, 1, 3);

    println!("\nbeam width 1 : {beam1:?}");
    println!("greedy       : {greedy:?}");
    println!("beam width 2 : {beam2:?}");
    assert_eq!(beam1, greedy, "width 1 must reduce to greedy");

    // a longer minimum length forbids early end tokens
    let with_min = beam_search(next, EOS, 2, 2, 3);
    println!("min_len 2    : {with_min:?} (length >= 2 enforced)");
    assert!(with_min.len() >= 2);
}
