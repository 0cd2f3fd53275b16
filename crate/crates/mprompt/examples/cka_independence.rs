//! HSIC and CKA between prompt matrices, and the independence loss in
//! action: gradient descent on L_idp pushes prompts apart.
//!
//! ```bash
//! cargo run --release --example cka_independence
//! ```

use mprompt::independence::{
    cka_value, l_idp, mean_pairwise_cka, sample_pairs, Kernel, PairSample,
};
use mprompt::tensor::{Matrix, Tape, Var};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let random = |rng: &mut ChaCha8Rng| Matrix::from_shape_fn((8, 16), |_| rng.random_range(-1.0..1.0));

    let a = random(&mut rng);
    let b = random(&mut rng);
    println!("cka(A, A)      = {:.6}", cka_value(&a, &a, Kernel::Linear).unwrap());
    println!("cka(A, B)      = {:.6}", cka_value(&a, &b, Kernel::Linear).unwrap());
    println!("cka(10A, B)    = {:.6}  (scale invariant)", {
        let scaled = a.mapv(|v| 10.0 * v);
        cka_value(&scaled, &b, Kernel::Linear).unwrap()
    });
    println!("cka rbf(A, B)  = {:.6}", cka_value(&a, &b, Kernel::Rbf).unwrap());

    // fresh random pair sample per iteration, like one training run
    let mut prompts: Vec<Matrix> = (0..4).map(|_| &a + &random(&mut rng).mapv(|v| 0.05 * v)).collect();
    println!(
        "\nstart mean pairwise CKA: {:.4}",
        mean_pairwise_cka(&prompts, Kernel::Linear).unwrap()
    );
    for step in 1..=60 {
        let sample: PairSample = sample_pairs(prompts.len(), 3, &mut rng);
        let mut tape = Tape::new();
        let vars: Vec<Var> = prompts.iter().map(|p| tape.param(p.clone())).collect();
        let out = l_idp(&mut tape, &vars, &sample, Kernel::Linear).unwrap();
        let grads = tape.backward(out.value);
        for (p, v) in prompts.iter_mut().zip(&vars) {
            if let Some(g) = grads.wrt(*v) {
                *p -= &(g * 0.05);
            }
        }
        if step % 20 == 0 {
            println!(
                "after {step:>3} steps:      {:.4}",
                mean_pairwise_cka(&prompts, Kernel::Linear).unwrap()
            );
        }
    }
}
