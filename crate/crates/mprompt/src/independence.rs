//! Independence regularization between domain prompts.
//!
//! HSIC between two prompt matrices is computed from Gram matrices over
//! their rows; CKA normalizes it into [0,1] so it is invariant to isotropic
//! scaling. The training loss sums CKA over a fresh random sample of domain
//! pairs each iteration.
//!
//! The differentiable route uses the expansion
//! `tr(KL) - (2/rho) 1'KL1 + (1/rho^2)(1'K1)(1'L1)` rather than explicitly
//! multiplying by the centering matrix H; the test suite checks both routes
//! against each other.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Tape, Var};

/// Kernel for the Gram matrices. The RBF bandwidth is the median pairwise
/// row distance, treated as a constant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Kernel {
    #[default]
    Linear,
    Rbf,
}

/// `H = I - (1/rho) 11'`.
pub fn centering_matrix(rho: usize) -> Result<Matrix> {
    if rho == 0 {
        return Err(Error::Config("centering matrix undefined for rho = 0".into()));
    }
    let mut h = Matrix::from_elem((rho, rho), -1.0 / rho as f64);
    for i in 0..rho {
        h[[i, i]] += 1.0;
    }
    Ok(h)
}

fn median_pairwise_distance(a: &Matrix) -> f64 {
    let rows = a.nrows();
    let mut dists = Vec::with_capacity(rows * (rows - 1) / 2);
    for i in 0..rows {
        for j in i + 1..rows {
            let d2: f64 = a
                .row(i)
                .iter()
                .zip(a.row(j).iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            dists.push(d2.sqrt());
        }
    }
    dists.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let median = if dists.is_empty() {
        0.0
    } else {
        dists[dists.len() / 2]
    };
    if median > 0.0 {
        median
    } else {
        1.0
    }
}

/// Gram matrix over the rows of `a`.
pub fn gram(tape: &mut Tape, a: Var, kernel: Kernel) -> Var {
    match kernel {
        Kernel::Linear => {
            let at = tape.transpose(a);
            tape.matmul(a, at)
        }
        Kernel::Rbf => {
            let sigma = median_pairwise_distance(tape.value(a));
            tape.rbf_gram(a, sigma)
        }
    }
}

/// HSIC from two rho x rho Gram matrices, by the expansion formula.
fn hsic_from_grams(tape: &mut Tape, k: Var, l: Var) -> Var {
    let rho = tape.shape(k).0;
    let ones = tape.constant(Matrix::from_elem((rho, 1), 1.0));

    let kl = tape.mul(k, l);
    let tr_kl = tape.sum_all(kl); // tr(KL) for symmetric Gram matrices

    let k1 = tape.matmul(k, ones);
    let l1 = tape.matmul(l, ones);
    let k1t = tape.transpose(k1);
    let cross = tape.matmul(k1t, l1); // 1'KL1

    let sum_k = tape.sum_all(k);
    let sum_l = tape.sum_all(l);
    let sums = tape.mul(sum_k, sum_l); // (1'K1)(1'L1)

    let r = rho as f64;
    let c1 = tape.scale(cross, 2.0 / r);
    let c2 = tape.scale(sums, 1.0 / (r * r));
    let t1 = tape.sub(tr_kl, c1);
    let t2 = tape.add(t1, c2);
    tape.scale(t2, 1.0 / ((r - 1.0) * (r - 1.0)))
}

fn check_pair(tape: &Tape, a: Var, b: Var) -> Result<usize> {
    let (ra, _) = tape.shape(a);
    let (rb, _) = tape.shape(b);
    if ra != rb {
        return Err(Error::Shape(format!(
            "prompt row counts differ: {ra} vs {rb}"
        )));
    }
    if ra < 2 {
        return Err(Error::Shape(format!(
            "HSIC centering needs at least 2 rows, got {ra}"
        )));
    }
    Ok(ra)
}

/// Differentiable HSIC between two prompt matrices on the tape.
pub fn hsic(tape: &mut Tape, a: Var, b: Var, kernel: Kernel) -> Result<Var> {
    check_pair(tape, a, b)?;
    let k = gram(tape, a, kernel);
    let l = gram(tape, b, kernel);
    Ok(hsic_from_grams(tape, k, l))
}

/// CKA value node plus a degeneracy flag. A constant prompt has zero
/// self-HSIC; its CKA is defined as 0 so training never divides by zero.
pub struct CkaOutcome {
    pub value: Var,
    pub degenerate: bool,
}

const DEGENERACY_EPS: f64 = 1e-12;

fn clamp01(tape: &mut Tape, x: Var) -> Var {
    let one = tape.scalar(1.0);
    let lo = tape.relu(x);
    let shifted = tape.sub(lo, one);
    let over = tape.relu(shifted);
    tape.sub(lo, over)
}

/// Differentiable CKA between two prompt matrices on the tape.
pub fn cka(tape: &mut Tape, a: Var, b: Var, kernel: Kernel) -> Result<CkaOutcome> {
    check_pair(tape, a, b)?;
    let ka = gram(tape, a, kernel);
    let kb = gram(tape, b, kernel);
    let haa = hsic_from_grams(tape, ka, ka);
    let hbb = hsic_from_grams(tape, kb, kb);
    if tape.scalar_value(haa) <= DEGENERACY_EPS || tape.scalar_value(hbb) <= DEGENERACY_EPS {
        return Ok(CkaOutcome {
            value: tape.scalar(0.0),
            degenerate: true,
        });
    }
    let hab = hsic_from_grams(tape, ka, kb);
    let prod = tape.mul(haa, hbb);
    let denom = tape.sqrt(prod);
    let ratio = tape.div(hab, denom);
    Ok(CkaOutcome {
        value: clamp01(tape, ratio),
        degenerate: false,
    })
}

/// Unordered domain-index pairs for one training iteration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairSample {
    pub pairs: Vec<(usize, usize)>,
}

/// Sample `m` distinct unordered pairs of `n` domains uniformly without
/// replacement. Fewer than 2 domains yields an empty sample.
pub fn sample_pairs(n: usize, m: usize, rng: &mut ChaCha8Rng) -> PairSample {
    if n < 2 {
        return PairSample { pairs: Vec::new() };
    }
    let mut all: Vec<(usize, usize)> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            all.push((i, j));
        }
    }
    if m < all.len() {
        let (sampled, _) = all.partial_shuffle(rng, m);
        let mut pairs = sampled.to_vec();
        pairs.sort_unstable();
        return PairSample { pairs };
    }
    PairSample { pairs: all }
}

/// L_idp plus the number of terms that hit the CKA degeneracy guard.
pub struct LidpOutcome {
    pub value: Var,
    pub degenerate_pairs: usize,
}

/// Sum of CKA over the sampled pairs, differentiable w.r.t. every prompt.
pub fn l_idp(
    tape: &mut Tape,
    domain_prompts: &[Var],
    sample: &PairSample,
    kernel: Kernel,
) -> Result<LidpOutcome> {
    let mut total: Option<Var> = None;
    let mut degenerate_pairs = 0;
    for &(i, j) in &sample.pairs {
        let a = *domain_prompts.get(i).ok_or_else(|| {
            Error::Index(format!("pair domain {i} out of range {}", domain_prompts.len()))
        })?;
        let b = *domain_prompts.get(j).ok_or_else(|| {
            Error::Index(format!("pair domain {j} out of range {}", domain_prompts.len()))
        })?;
        let outcome = cka(tape, a, b, kernel)?;
        if outcome.degenerate {
            degenerate_pairs += 1;
        }
        total = Some(match total {
            Some(t) => tape.add(t, outcome.value),
            None => outcome.value,
        });
    }
    let value = total.unwrap_or_else(|| tape.scalar(0.0));
    Ok(LidpOutcome {
        value,
        degenerate_pairs,
    })
}

/// CKA as a plain value, without keeping a graph around.
pub fn cka_value(a: &Matrix, b: &Matrix, kernel: Kernel) -> Result<f64> {
    let mut tape = Tape::new();
    let va = tape.constant(a.clone());
    let vb = tape.constant(b.clone());
    let out = cka(&mut tape, va, vb, kernel)?;
    Ok(tape.scalar_value(out.value))
}

/// Full n x n CKA matrix of a set of prompts.
pub fn cka_matrix(prompts: &[Matrix], kernel: Kernel) -> Result<Matrix> {
    let n = prompts.len();
    let mut out = Matrix::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            out[[i, j]] = cka_value(&prompts[i], &prompts[j], kernel)?;
        }
    }
    Ok(out)
}

/// Mean CKA over all unordered pairs; 0 when fewer than two prompts exist.
pub fn mean_pairwise_cka(prompts: &[Matrix], kernel: Kernel) -> Result<f64> {
    let n = prompts.len();
    if n < 2 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            sum += cka_value(&prompts[i], &prompts[j], kernel)?;
        }
    }
    Ok(sum / (n * (n - 1) / 2) as f64)
}
