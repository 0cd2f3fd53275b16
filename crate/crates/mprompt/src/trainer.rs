//! Prompt-tuning orchestration: the composite loss, AdamW over exactly the
//! trainable set, the warmup-then-decay schedule, ablations and sweeps.
//!
//! Backbone pretraining reuses the same machinery with the backbone as the
//! trainable set and no prompt paths.

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::TensorArchive;
use crate::cluster::{assign_domain, embed_context, DomainModel};
use crate::config::TrainConfig;
use crate::data::{context_tokens, encode_example, EncodedExample, QAExample, Vocabulary};
use crate::error::{Error, Result};
use crate::independence::{l_idp, mean_pairwise_cka, sample_pairs, Kernel, PairSample};
use crate::metrics::{dataset_metric, MetricKind, ScoredPrediction};
use crate::model::{
    forward_nll, generate, Augmentation, ForwardCtx, ModelVars, ShapeTrace, TransformerParams,
};
use crate::prompts::{
    compose_decoder_input, generate_prompt_kv, init_prompts, reparam_prompt_kv, task_prefix_kv,
    Ablations, BankVars, PromptBank, PromptDims,
};
use crate::tensor::{Matrix, Tape, Var};

/// Default reparametrization-MLP hidden width at desk scale.
pub const MLP_HIDDEN: usize = 64;
/// Beam width for answer generation.
pub const BEAM_WIDTH: usize = 2;
/// Global L2 norm ceiling for prompt gradients.
pub const GRAD_CLIP: f64 = 1.0;

/// The two frozen transformers.
pub struct Models {
    pub backbone: TransformerParams,
    pub generator: TransformerParams,
}

impl Models {
    pub fn frozen_param_count(&self) -> usize {
        self.backbone.param_count() + self.generator.param_count()
    }

    pub fn to_archive(&self, archive: &mut TensorArchive) {
        self.backbone.to_archive("backbone", archive);
        self.generator.to_archive("generator", archive);
    }
}

/// One dataset split in raw and tokenized form, with generator context ids.
pub struct Split {
    pub raw: Vec<QAExample>,
    pub encoded: Vec<EncodedExample>,
    pub context_ids: Vec<Vec<usize>>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.encoded.len()
    }

    pub fn is_empty(&self) -> bool {
        self.encoded.is_empty()
    }
}

/// Render, tokenize and attach domain ids. Training examples use the stored
/// clustering assignment; others fall back to the nearest centroid.
pub fn prepare_split(
    examples: &[QAExample],
    vocab: &Vocabulary,
    domains: &DomainModel,
    max_input_len: usize,
    max_ans_length: usize,
) -> Result<Split> {
    let mut raw = Vec::with_capacity(examples.len());
    let mut encoded = Vec::with_capacity(examples.len());
    let mut context_ids = Vec::with_capacity(examples.len());
    for ex in examples {
        let domain_id = match domains.assignments.get(&ex.id) {
            Some(&d) => d,
            None => assign_domain(&embed_context(&ex.context), domains),
        };
        if domain_id >= domains.n {
            return Err(Error::Data(format!(
                "{}: domain {domain_id} out of range {}",
                ex.id, domains.n
            )));
        }
        encoded.push(encode_example(ex, vocab, max_input_len, max_ans_length, domain_id)?);
        context_ids.push(context_tokens(ex, vocab));
        let mut ex = ex.clone();
        ex.domain_id = Some(domain_id);
        raw.push(ex);
    }
    Ok(Split {
        raw,
        encoded,
        context_ids,
    })
}

/// Eq.-8 composite loss.
pub fn total_loss(nll: f64, l_idp: f64, lambda: f64) -> f64 {
    nll + lambda * l_idp
}

/// Linear warmup to `lr` over the first `warmup_ratio` of steps, then linear
/// decay to zero.
pub fn lr_at(step: usize, total_steps: usize, lr: f64, warmup_ratio: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("schedule needs total_steps >= 1".into()));
    }
    let warmup = (warmup_ratio * total_steps as f64).ceil() as usize;
    let step = step.min(total_steps);
    if step < warmup {
        return Ok(lr * (step as f64 / warmup as f64));
    }
    if total_steps == warmup {
        return Ok(lr);
    }
    Ok(lr * ((total_steps - step) as f64 / (total_steps - warmup) as f64))
}

/// Decoupled-weight-decay Adam. Moment buffers exist only for parameters
/// that have received gradients, i.e. the trainable set.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: BTreeMap<String, (Matrix, Matrix)>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn tracked_params(&self) -> usize {
        self.moments.len()
    }

    /// One decoupled update over named parameters:
    /// theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta).
    pub fn step(
        &mut self,
        lr: f64,
        params: &mut [(String, &mut Matrix)],
        grads: &BTreeMap<String, Matrix>,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, theta) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Matrix::zeros(g.dim()), Matrix::zeros(g.dim())));
            for ((m, v), (th, g)) in m
                .iter_mut()
                .zip(v.iter_mut())
                .zip(theta.iter_mut().zip(g.iter()))
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *th -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *th);
            }
        }
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Matrix>, max_norm: f64) -> f64 {
    let sq: f64 = grads.values().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            *g *= scale;
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, Default)]
pub struct StepReport {
    /// Batch-mean NLL (per-example sums averaged over the batch).
    pub nll: f64,
    /// Raw independence loss (sum of sampled CKA terms); 0 when disabled.
    pub idp: f64,
    pub total: f64,
    pub degenerate_cka: usize,
    pub grad_norm: f64,
}

struct LossGraph {
    tape: Tape,
    bank_vars: BankVars,
    total: Var,
    report: StepReport,
}

/// Build the full differentiable loss for one batch: batch-mean NLL through
/// every prompt path plus `lambda * L_idp` over the sampled pairs.
fn build_loss(
    bank: &PromptBank,
    models: &Models,
    split: &Split,
    batch: &[usize],
    pairs: &PairSample,
    cfg: &TrainConfig,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
    trace: Option<&mut ShapeTrace>,
) -> Result<LossGraph> {
    assert!(!batch.is_empty(), "empty batch");
    let ablations = cfg.ablations();
    let mut tape = Tape::new();
    let backbone_vars = models.backbone.register(&mut tape, false);
    let generator_vars = models.generator.register(&mut tape, false);
    let bank_vars = bank.register(&mut tape, ablations);

    // input-independent task prefixes, shared by the whole batch
    let task_stacks: Vec<_> = crate::model::AttnClass::ALL
        .iter()
        .map(|cls| task_prefix_kv(&mut tape, &bank_vars, &bank.dims, *cls))
        .collect();

    let mut trace = trace;
    let mut nll_sum: Option<Var> = None;
    for &idx in batch {
        let encoded = &split.encoded[idx];
        let prompt_stack = match compose_decoder_input(
            &mut tape,
            &bank_vars,
            encoded.domain_id,
            ablations,
        )? {
            Some(x) => {
                let mlp = bank_vars.gen_mlp.as_ref().expect("gen mlp missing");
                Some(if ablations.no_generator {
                    reparam_prompt_kv(&mut tape, x, mlp, &bank.dims)
                } else {
                    generate_prompt_kv(
                        &mut tape,
                        &generator_vars,
                        &models.generator.cfg,
                        &split.context_ids[idx],
                        x,
                        mlp,
                        &bank.dims,
                    )
                })
            }
            None => None,
        };
        let aug = Augmentation {
            encoder_task: Some(&task_stacks[0]),
            encoder_generated: prompt_stack.as_ref(),
            decoder_self: Some(&task_stacks[1]),
            decoder_cross: Some(&task_stacks[2]),
        };
        let mut ctx = ForwardCtx {
            dropout: dropout_rng
                .as_deref_mut()
                .map(|rng| (rng, models.backbone.cfg.dropout)),
            trace: trace.as_deref_mut(),
        };
        let nll = forward_nll(
            &mut tape,
            &backbone_vars,
            &models.backbone.cfg,
            encoded,
            &aug,
            &mut ctx,
        );
        nll_sum = Some(match nll_sum {
            Some(acc) => tape.add(acc, nll),
            None => nll,
        });
    }
    let nll_mean = {
        let sum = nll_sum.expect("batch produced no loss");
        tape.scale(sum, 1.0 / batch.len() as f64)
    };

    let mut report = StepReport {
        nll: tape.scalar_value(nll_mean),
        ..StepReport::default()
    };

    let use_idp = !ablations.no_idp
        && cfg.lambda > 0.0
        && !ablations.no_domain
        && bank_vars.domain_prompts.len() >= 2
        && !pairs.pairs.is_empty();
    let total = if use_idp {
        let idp = l_idp(&mut tape, &bank_vars.domain_prompts, pairs, Kernel::Linear)?;
        report.idp = tape.scalar_value(idp.value);
        report.degenerate_cka = idp.degenerate_pairs;
        let weighted = tape.scale(idp.value, cfg.lambda);
        tape.add(nll_mean, weighted)
    } else {
        nll_mean
    };
    report.total = tape.scalar_value(total);

    Ok(LossGraph {
        tape,
        bank_vars,
        total,
        report,
    })
}

/// One example's forward pass recording every attention key length, for the
/// Eq.-6/7 shape-law checks.
pub fn traced_forward(
    bank: &PromptBank,
    models: &Models,
    split: &Split,
    idx: usize,
    cfg: &TrainConfig,
) -> Result<ShapeTrace> {
    let mut trace = ShapeTrace::default();
    let pairs = PairSample { pairs: Vec::new() };
    build_loss(
        bank,
        models,
        split,
        &[idx],
        &pairs,
        cfg,
        None,
        Some(&mut trace),
    )?;
    Ok(trace)
}

/// Composite-loss value for one batch; the finite-difference side of the
/// end-to-end gradient checks.
pub fn loss_value(
    bank: &PromptBank,
    models: &Models,
    split: &Split,
    batch: &[usize],
    pairs: &PairSample,
    cfg: &TrainConfig,
) -> Result<f64> {
    let graph = build_loss(bank, models, split, batch, pairs, cfg, None, None)?;
    Ok(graph.report.total)
}

/// Analytic gradients of the composite loss for the whole trainable set.
pub fn loss_gradients(
    bank: &PromptBank,
    models: &Models,
    split: &Split,
    batch: &[usize],
    pairs: &PairSample,
    cfg: &TrainConfig,
) -> Result<(BTreeMap<String, Matrix>, StepReport)> {
    let graph = build_loss(bank, models, split, batch, pairs, cfg, None, None)?;
    let grads = graph.tape.backward(graph.total);
    let named = collect_gradients(&graph.tape, &graph.bank_vars, &grads);
    Ok((named, graph.report))
}

fn collect_gradients(
    tape: &Tape,
    bank_vars: &BankVars,
    grads: &crate::tensor::Gradients,
) -> BTreeMap<String, Matrix> {
    bank_vars
        .named_vars()
        .into_iter()
        .map(|(name, var)| {
            let g = grads
                .wrt(var)
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(tape.shape(var)));
            (name, g)
        })
        .collect()
}

/// One optimizer step over the trainable set. Frozen parameters are never
/// touched; a non-finite loss aborts the step.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    bank: &mut PromptBank,
    models: &Models,
    split: &Split,
    batch: &[usize],
    pairs: &PairSample,
    cfg: &TrainConfig,
    opt: &mut AdamW,
    lr: f64,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<StepReport> {
    let graph = build_loss(
        bank,
        models,
        split,
        batch,
        pairs,
        cfg,
        Some(dropout_rng),
        None,
    )?;
    if !graph.report.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "step aborted: nll={} idp={} lambda={}",
            graph.report.nll, graph.report.idp, cfg.lambda
        )));
    }
    let grads = graph.tape.backward(graph.total);
    let mut named = collect_gradients(&graph.tape, &graph.bank_vars, &grads);
    let mut report = graph.report;
    report.grad_norm = clip_global_norm(&mut named, GRAD_CLIP);
    let mut params = bank.named_matrices_mut(cfg.ablations());
    opt.step(lr, &mut params, &named);
    Ok(report)
}

/// Scores plus per-example detail for one split.
pub struct EvalReport {
    pub token_f1: f64,
    pub rouge_l: f64,
    pub exact_match: f64,
    /// The dataset's primary metric value.
    pub primary: f64,
    pub metric: MetricKind,
    pub n_examples: usize,
    pub predictions: Vec<ScoredPrediction>,
}

fn worker_count() -> usize {
    std::env::var("MPROMPT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

fn predict_one(
    models: &Models,
    bank: Option<&PromptBank>,
    ablations: Ablations,
    split: &Split,
    idx: usize,
    vocab: &Vocabulary,
    max_ans_length: usize,
) -> Result<ScoredPrediction> {
    let mut tape = Tape::new();
    let backbone_vars = models.backbone.register(&mut tape, false);
    let encoded = &split.encoded[idx];

    let mut task_stacks = Vec::new();
    let mut prompt_stack = None;
    if let Some(bank) = bank {
        let generator_vars = models.generator.register(&mut tape, false);
        let bank_vars = bank.register(&mut tape, ablations);
        for cls in crate::model::AttnClass::ALL {
            task_stacks.push(task_prefix_kv(&mut tape, &bank_vars, &bank.dims, cls));
        }
        prompt_stack =
            match compose_decoder_input(&mut tape, &bank_vars, encoded.domain_id, ablations)? {
                Some(x) => {
                    let mlp = bank_vars.gen_mlp.as_ref().expect("gen mlp missing");
                    Some(if ablations.no_generator {
                        reparam_prompt_kv(&mut tape, x, mlp, &bank.dims)
                    } else {
                        generate_prompt_kv(
                            &mut tape,
                            &generator_vars,
                            &models.generator.cfg,
                            &split.context_ids[idx],
                            x,
                            mlp,
                            &bank.dims,
                        )
                    })
                }
                None => None,
            };
    }
    let aug = if bank.is_some() {
        Augmentation {
            encoder_task: Some(&task_stacks[0]),
            encoder_generated: prompt_stack.as_ref(),
            decoder_self: Some(&task_stacks[1]),
            decoder_cross: Some(&task_stacks[2]),
        }
    } else {
        Augmentation::none()
    };

    let max_content = max_ans_length.saturating_sub(1).max(1);
    let ids = generate(
        &mut tape,
        &backbone_vars,
        &models.backbone.cfg,
        &encoded.input_ids,
        &aug,
        BEAM_WIDTH,
        1,
        max_content,
    );
    let prediction = crate::data::detokenize(&ids, vocab);
    let example = &split.raw[idx];
    Ok(ScoredPrediction::new(
        &example.id,
        &prediction,
        &example.gold_answers,
    ))
}

/// Generate an answer for every example with beam search and score it.
/// `bank: None` evaluates the bare backbone (pretraining). Workers are
/// capped by the MPROMPT_THREADS environment variable (default 1); chunk
/// results are concatenated in order so the output is identical either way.
pub fn evaluate(
    models: &Models,
    bank: Option<&PromptBank>,
    ablations: Ablations,
    split: &Split,
    vocab: &Vocabulary,
    max_ans_length: usize,
) -> Result<EvalReport> {
    if split.is_empty() {
        return Err(Error::Config("evaluation split is empty".into()));
    }
    let indices: Vec<usize> = (0..split.len()).collect();
    let workers = worker_count().min(indices.len());
    let predictions: Vec<ScoredPrediction> = if workers <= 1 {
        indices
            .iter()
            .map(|&i| predict_one(models, bank, ablations, split, i, vocab, max_ans_length))
            .collect::<Result<_>>()?
    } else {
        let chunk = indices.len().div_ceil(workers);
        let chunks: Vec<&[usize]> = indices.chunks(chunk).collect();
        std::thread::scope(|scope| {
            let handles: Vec<_> = chunks
                .into_iter()
                .map(|c| {
                    scope.spawn(move || {
                        c.iter()
                            .map(|&i| {
                                predict_one(models, bank, ablations, split, i, vocab, max_ans_length)
                            })
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            let mut all = Vec::with_capacity(indices.len());
            for h in handles {
                all.extend(h.join().expect("eval worker panicked")?);
            }
            Ok::<_, Error>(all)
        })?
    };

    let n = predictions.len();
    let mean = |f: fn(&ScoredPrediction) -> f64| {
        predictions.iter().map(f).sum::<f64>() / n as f64
    };
    let token_f1 = mean(|p| p.token_f1);
    let rouge_l = mean(|p| p.rouge_l);
    let exact_match = mean(|p| p.exact_match);
    let metric = dataset_metric(split.raw.iter().map(|e| e.format));
    let primary = match metric {
        MetricKind::TokenF1 => token_f1,
        MetricKind::RougeL => rouge_l,
        MetricKind::ExactMatch => exact_match,
    };
    Ok(EvalReport {
        token_f1,
        rouge_l,
        exact_match,
        primary,
        metric,
        n_examples: n,
        predictions,
    })
}

/// One line of the per-epoch metrics log.
#[derive(Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_nll: f64,
    pub train_idp: f64,
    pub val_metric: f64,
    pub mean_cka: f64,
}

pub struct TrainOutcome {
    pub best_bank: PromptBank,
    pub best_epoch: usize,
    pub best_metric: f64,
    /// JSONL metrics log, one line per epoch.
    pub log_lines: Vec<String>,
    pub trainable_params: usize,
    pub frozen_params: usize,
}

/// Full prompt-tuning run: epochs of AdamW steps with fresh pair samples
/// each iteration, per-epoch validation, best-checkpoint selection.
/// `stop_at` ends training early once the best validation metric reaches
/// the target.
pub fn train(
    models: &Models,
    vocab: &Vocabulary,
    train_split: &Split,
    val_split: &Split,
    cfg: &TrainConfig,
    stop_at: Option<f64>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dims = PromptDims {
        t: cfg.t,
        rho: cfg.rho.max(1),
        kappa: cfg.kappa.max(1),
        n: cfg.n,
        d_p: models.generator.cfg.d_model,
        d: models.backbone.cfg.d_model,
        layers: models.backbone.cfg.layers,
        hidden: MLP_HIDDEN,
    };
    let bank = init_prompts(dims, &models.generator, cfg.seed)?;
    train_with_bank(models, vocab, train_split, val_split, cfg, bank, stop_at)
}

/// As [`train`] but with a caller-built bank (custom dims for small tests).
pub fn train_with_bank(
    models: &Models,
    vocab: &Vocabulary,
    train_split: &Split,
    val_split: &Split,
    cfg: &TrainConfig,
    mut bank: PromptBank,
    stop_at: Option<f64>,
) -> Result<TrainOutcome> {
    if train_split.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if val_split.is_empty() {
        return Err(Error::Config("missing validation split".into()));
    }
    let ablations = cfg.ablations();
    let batches_per_epoch = train_split.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;

    let mut opt = AdamW::new(cfg.beta1, cfg.beta2, cfg.weight_decay);
    let mut pair_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5041_4952);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x44524f50);

    let trainable_params = bank.census(ablations);
    let frozen_params = models.frozen_param_count();

    let mut best: Option<(f64, usize, PromptBank)> = None;
    let mut log_lines = Vec::with_capacity(cfg.epochs);
    let mut global_step = 0usize;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_split.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64) ^ 0x53485546);
        order.shuffle(&mut shuffle_rng);

        let mut nll_acc = 0.0;
        let mut idp_acc = 0.0;
        let mut steps = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let pairs = sample_pairs(cfg.n, cfg.m, &mut pair_rng);
            let lr = lr_at(global_step, total_steps, cfg.lr, cfg.warmup_ratio)?;
            let report = train_step(
                &mut bank,
                models,
                train_split,
                batch,
                &pairs,
                cfg,
                &mut opt,
                lr,
                &mut dropout_rng,
            )?;
            nll_acc += report.nll;
            idp_acc += report.idp;
            steps += 1;
            global_step += 1;
        }

        let eval = evaluate(models, Some(&bank), ablations, val_split, vocab, cfg.max_ans_length)?;
        let mean_cka = if ablations.no_domain || bank.domain_prompts.len() < 2 {
            0.0
        } else {
            mean_pairwise_cka(&bank.domain_prompts, Kernel::Linear)?
        };
        let line = EpochLog {
            epoch,
            train_nll: nll_acc / steps as f64,
            train_idp: idp_acc / steps as f64,
            val_metric: eval.primary,
            mean_cka,
        };
        log_lines.push(serde_json::to_string(&line)?);

        let is_better = best.as_ref().map_or(true, |(b, _, _)| eval.primary > *b);
        if is_better {
            best = Some((eval.primary, epoch, bank.clone()));
        }
        if let Some(target) = stop_at {
            if best.as_ref().is_some_and(|(b, _, _)| *b >= target) {
                break;
            }
        }
    }

    let (best_metric, best_epoch, best_bank) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best_bank,
        best_epoch,
        best_metric,
        log_lines,
        trainable_params,
        frozen_params,
    })
}

/// Backbone pretraining on the synthetic corpus: plain teacher-forced NLL,
/// AdamW over all backbone parameters, best-validation selection. The model
/// is left at its best-validation weights and frozen by the caller.
#[allow(clippy::too_many_arguments)]
pub fn pretrain(
    backbone: &mut TransformerParams,
    vocab: &Vocabulary,
    train_split: &Split,
    val_split: &Split,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
    stop_at: Option<f64>,
) -> Result<Vec<String>> {
    if train_split.is_empty() || val_split.is_empty() {
        return Err(Error::Config("pretraining needs train and val splits".into()));
    }
    let batches_per_epoch = train_split.len().div_ceil(batch_size);
    let total_steps = epochs * batches_per_epoch;
    let mut opt = AdamW::new(0.9, 0.999, 0.01);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x44524f50);
    let mut global_step = 0usize;
    let mut best: Option<(f64, TransformerParams)> = None;
    let mut log_lines = Vec::new();

    for epoch in 1..=epochs {
        let mut order: Vec<usize> = (0..train_split.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(seed.wrapping_add(epoch as u64) ^ 0x53485546);
        order.shuffle(&mut shuffle_rng);

        let mut nll_acc = 0.0;
        let mut steps = 0usize;
        for batch in order.chunks(batch_size) {
            let lr_now = lr_at(global_step, total_steps, lr, 0.1)?;
            let mut tape = Tape::new();
            let vars = backbone.register(&mut tape, true);
            let mut nll_sum: Option<Var> = None;
            for &idx in batch {
                let mut ctx = ForwardCtx {
                    dropout: Some((&mut dropout_rng, backbone.cfg.dropout)),
                    trace: None,
                };
                let nll = forward_nll(
                    &mut tape,
                    &vars,
                    &backbone.cfg,
                    &train_split.encoded[idx],
                    &Augmentation::none(),
                    &mut ctx,
                );
                nll_sum = Some(match nll_sum {
                    Some(acc) => tape.add(acc, nll),
                    None => nll,
                });
            }
            let mean = {
                let sum = nll_sum.expect("batch produced no loss");
                tape.scale(sum, 1.0 / batch.len() as f64)
            };
            let loss = tape.scalar_value(mean);
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("pretraining step {global_step}")));
            }
            nll_acc += loss;
            steps += 1;

            let grads = tape.backward(mean);
            let mut named: BTreeMap<String, Matrix> = BTreeMap::new();
            {
                let named_vars: Vec<(String, Var)> = {
                    // re-walk the registration order to pair names with vars
                    let names: Vec<String> =
                        backbone.named_matrices().into_iter().map(|(n, _)| n).collect();
                    let vars = vars_in_registration_order(&vars);
                    names.into_iter().zip(vars).collect()
                };
                for (name, var) in named_vars {
                    if let Some(g) = grads.wrt(var) {
                        named.insert(name, g.clone());
                    }
                }
            }
            clip_global_norm(&mut named, GRAD_CLIP);
            let mut params = backbone.named_matrices_mut();
            opt.step(lr_now, &mut params, &named);
            global_step += 1;
        }

        let models_view = ModelsView { backbone };
        let eval = models_view.evaluate_bare(val_split, vocab)?;
        log_lines.push(format!(
            "{{\"epoch\":{epoch},\"train_nll\":{},\"val_metric\":{}}}",
            serde_json::to_string(&(nll_acc / steps as f64))?,
            serde_json::to_string(&eval)?
        ));
        let is_better = best.as_ref().map_or(true, |(b, _)| eval > *b);
        if is_better {
            best = Some((eval, backbone.clone()));
        }
        if let Some(target) = stop_at {
            if best.as_ref().is_some_and(|(b, _)| *b >= target) {
                break;
            }
        }
    }

    if let Some((_, best_params)) = best {
        *backbone = best_params;
    }
    Ok(log_lines)
}

/// Tape handles in the same order as [`TransformerParams::named_matrices`],
/// so pretraining can map gradients back to parameter names.
fn vars_in_registration_order(vars: &ModelVars) -> Vec<Var> {
    let mut out = vec![vars.embed];
    for l in &vars.enc {
        out.extend([l.ln1.0, l.ln1.1]);
        out.extend([l.attn.wq, l.attn.wk, l.attn.wv, l.attn.wo]);
        out.extend([l.ln2.0, l.ln2.1]);
        out.extend([l.ffn.0, l.ffn.1, l.ffn.2, l.ffn.3]);
    }
    for l in &vars.dec {
        out.extend([l.ln1.0, l.ln1.1]);
        out.extend([l.self_attn.wq, l.self_attn.wk, l.self_attn.wv, l.self_attn.wo]);
        out.extend([l.ln2.0, l.ln2.1]);
        out.extend([l.cross_attn.wq, l.cross_attn.wk, l.cross_attn.wv, l.cross_attn.wo]);
        out.extend([l.ln3.0, l.ln3.1]);
        out.extend([l.ffn.0, l.ffn.1, l.ffn.2, l.ffn.3]);
    }
    out.extend([vars.enc_final_ln.0, vars.enc_final_ln.1]);
    out.extend([vars.dec_final_ln.0, vars.dec_final_ln.1]);
    out
}

struct ModelsView<'a> {
    backbone: &'a TransformerParams,
}

impl ModelsView<'_> {
    fn evaluate_bare(&self, split: &Split, vocab: &Vocabulary) -> Result<f64> {
        let max_ans = self.backbone.cfg.max_target_len;
        let mut correct = 0.0;
        for idx in 0..split.len() {
            let mut tape = Tape::new();
            let vars = self.backbone.register(&mut tape, false);
            let ids = generate(
                &mut tape,
                &vars,
                &self.backbone.cfg,
                &split.encoded[idx].input_ids,
                &Augmentation::none(),
                BEAM_WIDTH,
                1,
                max_ans.saturating_sub(1).max(1),
            );
            let pred = crate::data::detokenize(&ids, vocab);
            correct += crate::metrics::exact_match(&pred, &split.raw[idx].gold_answers);
        }
        Ok(correct / split.len() as f64)
    }
}

/// The five ablation conditions reported by the harness.
pub const ABLATION_NAMES: [&str; 5] = ["full", "w/o d", "w/o c", "w/o idp", "w/o PG"];

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub val_metric: f64,
    pub mean_cka: f64,
    pub best_epoch: usize,
}

/// Train the five Figure-2-style configurations (the last one is the
/// generator-off "None" condition) and report one row each.
pub fn ablate(
    models: &Models,
    vocab: &Vocabulary,
    train_split: &Split,
    val_split: &Split,
    cfg: &TrainConfig,
    stop_at: Option<f64>,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(ABLATION_NAMES.len());
    for name in ABLATION_NAMES {
        let mut c = cfg.clone();
        match name {
            "full" => {}
            "w/o d" => c.no_domain = true,
            "w/o c" => c.no_context = true,
            "w/o idp" => c.no_idp = true,
            "w/o PG" => c.no_generator = true,
            _ => unreachable!(),
        }
        let outcome = train(models, vocab, train_split, val_split, &c, stop_at)?;
        let mean_cka = if c.no_domain || outcome.best_bank.domain_prompts.len() < 2 {
            0.0
        } else {
            mean_pairwise_cka(&outcome.best_bank.domain_prompts, Kernel::Linear)?
        };
        rows.push(AblationRow {
            name: name.to_string(),
            val_metric: outcome.best_metric,
            mean_cka,
            best_epoch: outcome.best_epoch,
        });
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Lambda,
    M,
    N,
    Rho,
    Kappa,
}

impl SweepParam {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(SweepParam::Lambda),
            "m" => Ok(SweepParam::M),
            "n" => Ok(SweepParam::N),
            "rho" => Ok(SweepParam::Rho),
            "kappa" => Ok(SweepParam::Kappa),
            other => Err(Error::Config(format!(
                "unknown sweep parameter {other:?} (lambda|m|n|rho|kappa)"
            ))),
        }
    }

    pub fn grid(self) -> Vec<f64> {
        match self {
            SweepParam::Lambda => vec![1.0, 0.1, 0.01, 0.001, 0.0001, 0.00001],
            SweepParam::M => vec![1.0, 3.0, 5.0, 10.0, 15.0],
            SweepParam::N => vec![3.0, 6.0, 9.0],
            SweepParam::Rho | SweepParam::Kappa => {
                vec![5.0, 10.0, 15.0, 20.0, 30.0, 40.0, 50.0, 60.0]
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Lambda => "lambda",
            SweepParam::M => "m",
            SweepParam::N => "n",
            SweepParam::Rho => "rho",
            SweepParam::Kappa => "kappa",
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub val_metric: f64,
    pub mean_cka: f64,
}

/// Sensitivity sweep over one knob. Sweeping `n` re-clusters the training
/// contexts per value; other knobs reuse one clustering.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    models: &Models,
    vocab: &Vocabulary,
    raw_train: &[QAExample],
    raw_val: &[QAExample],
    cfg: &TrainConfig,
    param: SweepParam,
    stop_at: Option<f64>,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for value in param.grid() {
        let mut c = cfg.clone();
        match param {
            SweepParam::Lambda => c.lambda = value,
            SweepParam::M => c.m = value as usize,
            SweepParam::N => c.n = value as usize,
            SweepParam::Rho => c.rho = value as usize,
            SweepParam::Kappa => c.kappa = value as usize,
        }
        let domains = crate::cluster::cluster_contexts(raw_train, c.n, c.seed)?;
        let max_in = models.backbone.cfg.max_input_len;
        let train_split = prepare_split(raw_train, vocab, &domains, max_in, c.max_ans_length)?;
        let val_split = prepare_split(raw_val, vocab, &domains, max_in, c.max_ans_length)?;
        let outcome = train(models, vocab, &train_split, &val_split, &c, stop_at)?;
        let mean_cka = if outcome.best_bank.domain_prompts.len() < 2 {
            0.0
        } else {
            mean_pairwise_cka(&outcome.best_bank.domain_prompts, Kernel::Linear)?
        };
        rows.push(SweepRow {
            param: param.name().to_string(),
            value,
            val_metric: outcome.best_metric,
            mean_cka,
        });
    }
    Ok(rows)
}
