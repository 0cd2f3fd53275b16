//! All trainable prompt state and the two paths that turn it into per-layer
//! KV prefixes.
//!
//! The task path reparametrizes one prefix matrix per attention class
//! through a two-layer tanh MLP into `L` layer pairs `(T_K, T_V)`. The
//! generator path concatenates the example's domain prompt with the shared
//! context prompt, feeds the rows straight into the frozen generator's
//! decoder (its embedding layer is bypassed), and maps the decoder states
//! through an output MLP into `(P_K, P_V)` pairs. With the generator
//! disabled, the output MLP reparametrizes the concatenation directly, the
//! same way task prompts are trained.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::TensorArchive;
use crate::error::{Error, Result};
use crate::model::{
    decode_states, encode, AttnClass, Augmentation, ForwardCtx, ModelVars, PromptKvStack,
    TransformerConfig, TransformerParams,
};
use crate::tensor::{Matrix, Tape, Var};

/// Two affine maps with an elementwise tanh between them.
#[derive(Clone)]
pub struct MlpParams {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

const MLP_INIT_RANGE: f64 = 0.08;

impl MlpParams {
    pub fn init(input: usize, hidden: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut uniform = |r: usize, c: usize| {
            Matrix::from_shape_fn((r, c), |_| rng.random_range(-MLP_INIT_RANGE..MLP_INIT_RANGE))
        };
        Self {
            w1: uniform(input, hidden),
            b1: Matrix::zeros((1, hidden)),
            w2: uniform(hidden, output),
            b2: Matrix::zeros((1, output)),
        }
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }
}

pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub fn mlp_forward(tape: &mut Tape, mlp: &MlpVars, x: Var) -> Var {
    let h = tape.matmul(x, mlp.w1);
    let h = tape.add_row(h, mlp.b1);
    let h = tape.tanh(h);
    let y = tape.matmul(h, mlp.w2);
    tape.add_row(y, mlp.b2)
}

/// One task-prefix parameter group: the prefix matrix and its MLP.
#[derive(Clone)]
pub struct TaskPrefix {
    pub p: Matrix,
    pub mlp: MlpParams,
}

/// Ablation switches affecting which prompt parameters exist and train.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablations {
    pub no_domain: bool,
    pub no_context: bool,
    pub no_idp: bool,
    pub no_generator: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PromptDims {
    /// task prefix length
    pub t: usize,
    /// domain prompt length
    pub rho: usize,
    /// context prompt length
    pub kappa: usize,
    /// number of domains
    pub n: usize,
    /// generator model width
    pub d_p: usize,
    /// backbone model width
    pub d: usize,
    /// backbone layer count
    pub layers: usize,
    /// MLP hidden width
    pub hidden: usize,
}

impl PromptDims {
    pub fn kv_width(&self) -> usize {
        2 * self.d * self.layers
    }
}

/// Every trainable parameter of the method.
#[derive(Clone)]
pub struct PromptBank {
    pub dims: PromptDims,
    /// Indexed in [`AttnClass::ALL`] order.
    pub task: Vec<TaskPrefix>,
    pub domain_prompts: Vec<Matrix>,
    pub context_prompt: Matrix,
    /// Output MLP of the generator path (Eq.-5 role); doubles as the direct
    /// reparametrization MLP when the generator is ablated.
    pub gen_mlp: MlpParams,
}

/// Copy a generator vocabulary embedding row, fitted to width `d` by
/// truncation or tiling.
fn fit_row(row: &[f64], d: usize) -> Vec<f64> {
    (0..d).map(|i| row[i % row.len()]).collect()
}

/// Initialize every prompt token as an embedded vector sampled from the
/// generator's vocabulary table; MLP weights uniform in [-0.08, 0.08].
pub fn init_prompts(
    dims: PromptDims,
    generator: &TransformerParams,
    seed: u64,
) -> Result<PromptBank> {
    if dims.t == 0 {
        return Err(Error::Config("task prefix length must be >= 1".into()));
    }
    if dims.rho == 0 || dims.kappa == 0 {
        return Err(Error::Config(
            "prompt lengths must be >= 1 (ablate instead of zeroing)".into(),
        ));
    }
    let max_dec = generator.cfg.max_target_len;
    if dims.rho > max_dec || dims.kappa > max_dec || dims.rho + dims.kappa > max_dec {
        return Err(Error::Config(format!(
            "prompt rows rho={} kappa={} exceed generator decoder length {max_dec}",
            dims.rho, dims.kappa
        )));
    }
    if dims.d_p != generator.cfg.d_model {
        return Err(Error::Config(format!(
            "d_p {} does not match generator width {}",
            dims.d_p, generator.cfg.d_model
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = generator.cfg.vocab_size;
    let embed_row = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let idx = rng.random_range(0..vocab);
        generator.embed.row(idx).to_vec()
    };

    let task = AttnClass::ALL
        .iter()
        .map(|_| {
            let mut p = Matrix::zeros((dims.t, dims.d));
            for mut row in p.rows_mut() {
                let src = fit_row(&embed_row(&mut rng), dims.d);
                for (dst, v) in row.iter_mut().zip(src) {
                    *dst = v;
                }
            }
            TaskPrefix {
                p,
                mlp: MlpParams::init(dims.d, dims.hidden, dims.kv_width(), &mut rng),
            }
        })
        .collect();

    let prompt_matrix = |rows: usize, rng: &mut ChaCha8Rng| {
        let mut m = Matrix::zeros((rows, dims.d_p));
        for mut row in m.rows_mut() {
            let src = embed_row(rng);
            for (dst, v) in row.iter_mut().zip(src) {
                *dst = v;
            }
        }
        m
    };
    let domain_prompts = (0..dims.n)
        .map(|_| prompt_matrix(dims.rho, &mut rng))
        .collect();
    let context_prompt = prompt_matrix(dims.kappa, &mut rng);
    let gen_mlp = MlpParams::init(dims.d_p, dims.hidden, dims.kv_width(), &mut rng);

    Ok(PromptBank {
        dims,
        task,
        domain_prompts,
        context_prompt,
        gen_mlp,
    })
}

/// Tape handles for the bank's trainable parameters. Ablated parts are not
/// registered: the trainable set is closed over what is actually in use.
pub struct BankVars {
    pub task: Vec<(Var, MlpVars)>,
    pub domain_prompts: Vec<Var>,
    pub context_prompt: Option<Var>,
    pub gen_mlp: Option<MlpVars>,
}

impl PromptBank {
    pub fn register(&self, tape: &mut Tape, ablations: Ablations) -> BankVars {
        let task = self
            .task
            .iter()
            .map(|tp| {
                (
                    tape.param(tp.p.clone()),
                    MlpVars {
                        w1: tape.param(tp.mlp.w1.clone()),
                        b1: tape.param(tp.mlp.b1.clone()),
                        w2: tape.param(tp.mlp.w2.clone()),
                        b2: tape.param(tp.mlp.b2.clone()),
                    },
                )
            })
            .collect();
        let domain_prompts = if ablations.no_domain {
            Vec::new()
        } else {
            self.domain_prompts
                .iter()
                .map(|d| tape.param(d.clone()))
                .collect()
        };
        let context_prompt = if ablations.no_context {
            None
        } else {
            Some(tape.param(self.context_prompt.clone()))
        };
        let gen_mlp = if ablations.no_domain && ablations.no_context {
            None
        } else {
            Some(MlpVars {
                w1: tape.param(self.gen_mlp.w1.clone()),
                b1: tape.param(self.gen_mlp.b1.clone()),
                w2: tape.param(self.gen_mlp.w2.clone()),
                b2: tape.param(self.gen_mlp.b2.clone()),
            })
        };
        BankVars {
            task,
            domain_prompts,
            context_prompt,
            gen_mlp,
        }
    }

    /// Closed-form count of trainable parameters under the given ablations.
    pub fn census(&self, ablations: Ablations) -> usize {
        let mut total: usize = self
            .task
            .iter()
            .map(|tp| tp.p.len() + tp.mlp.param_count())
            .sum();
        if !ablations.no_domain {
            total += self.dims.n * self.dims.rho * self.dims.d_p;
        }
        if !ablations.no_context {
            total += self.dims.kappa * self.dims.d_p;
        }
        if !(ablations.no_domain && ablations.no_context) {
            total += self.gen_mlp.param_count();
        }
        total
    }

    /// Mutable name -> matrix view of the trainable set under `ablations`,
    /// mirroring [`BankVars::named_vars`] exactly.
    pub fn named_matrices_mut(&mut self, ablations: Ablations) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::new();
        for (cls, tp) in AttnClass::ALL.iter().zip(&mut self.task) {
            let ns = format!("task_prefix.{}", cls.key());
            out.push((format!("{ns}.p"), &mut tp.p));
            out.push((format!("{ns}.mlp.w1"), &mut tp.mlp.w1));
            out.push((format!("{ns}.mlp.b1"), &mut tp.mlp.b1));
            out.push((format!("{ns}.mlp.w2"), &mut tp.mlp.w2));
            out.push((format!("{ns}.mlp.b2"), &mut tp.mlp.b2));
        }
        if !ablations.no_domain {
            for (i, d) in self.domain_prompts.iter_mut().enumerate() {
                out.push((format!("domain_prompt.{i}"), d));
            }
        }
        if !ablations.no_context {
            out.push(("context_prompt".into(), &mut self.context_prompt));
        }
        if !(ablations.no_domain && ablations.no_context) {
            out.push(("gen_mlp.w1".into(), &mut self.gen_mlp.w1));
            out.push(("gen_mlp.b1".into(), &mut self.gen_mlp.b1));
            out.push(("gen_mlp.w2".into(), &mut self.gen_mlp.w2));
            out.push(("gen_mlp.b2".into(), &mut self.gen_mlp.b2));
        }
        out
    }

    pub fn to_archive(&self, archive: &mut TensorArchive) {
        for (cls, tp) in AttnClass::ALL.iter().zip(&self.task) {
            let ns = format!("task_prefix.{}", cls.key());
            archive.insert_matrix(&format!("{ns}.p"), &tp.p);
            archive.insert_matrix(&format!("{ns}.mlp.w1"), &tp.mlp.w1);
            archive.insert_matrix(&format!("{ns}.mlp.b1"), &tp.mlp.b1);
            archive.insert_matrix(&format!("{ns}.mlp.w2"), &tp.mlp.w2);
            archive.insert_matrix(&format!("{ns}.mlp.b2"), &tp.mlp.b2);
        }
        for (i, d) in self.domain_prompts.iter().enumerate() {
            archive.insert_matrix(&format!("domain_prompt.{i}"), d);
        }
        archive.insert_matrix("context_prompt", &self.context_prompt);
        archive.insert_matrix("gen_mlp.w1", &self.gen_mlp.w1);
        archive.insert_matrix("gen_mlp.b1", &self.gen_mlp.b1);
        archive.insert_matrix("gen_mlp.w2", &self.gen_mlp.w2);
        archive.insert_matrix("gen_mlp.b2", &self.gen_mlp.b2);
    }

    pub fn from_archive(dims: PromptDims, archive: &TensorArchive) -> Result<Self> {
        let task = AttnClass::ALL
            .iter()
            .map(|cls| {
                let ns = format!("task_prefix.{}", cls.key());
                Ok(TaskPrefix {
                    p: archive.matrix(&format!("{ns}.p"))?,
                    mlp: MlpParams {
                        w1: archive.matrix(&format!("{ns}.mlp.w1"))?,
                        b1: archive.matrix(&format!("{ns}.mlp.b1"))?,
                        w2: archive.matrix(&format!("{ns}.mlp.w2"))?,
                        b2: archive.matrix(&format!("{ns}.mlp.b2"))?,
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let domain_prompts = (0..dims.n)
            .map(|i| archive.matrix(&format!("domain_prompt.{i}")))
            .collect::<Result<Vec<_>>>()?;
        Ok(PromptBank {
            dims,
            task,
            domain_prompts,
            context_prompt: archive.matrix("context_prompt")?,
            gen_mlp: MlpParams {
                w1: archive.matrix("gen_mlp.w1")?,
                b1: archive.matrix("gen_mlp.b1")?,
                w2: archive.matrix("gen_mlp.w2")?,
                b2: archive.matrix("gen_mlp.b2")?,
            },
        })
    }
}

impl BankVars {
    /// Name -> tape handle for every registered trainable parameter.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        for (cls, (p, mlp)) in AttnClass::ALL.iter().zip(&self.task) {
            let ns = format!("task_prefix.{}", cls.key());
            out.push((format!("{ns}.p"), *p));
            out.push((format!("{ns}.mlp.w1"), mlp.w1));
            out.push((format!("{ns}.mlp.b1"), mlp.b1));
            out.push((format!("{ns}.mlp.w2"), mlp.w2));
            out.push((format!("{ns}.mlp.b2"), mlp.b2));
        }
        for (i, d) in self.domain_prompts.iter().enumerate() {
            out.push((format!("domain_prompt.{i}"), *d));
        }
        if let Some(c) = self.context_prompt {
            out.push(("context_prompt".into(), c));
        }
        if let Some(mlp) = &self.gen_mlp {
            out.push(("gen_mlp.w1".into(), mlp.w1));
            out.push(("gen_mlp.b1".into(), mlp.b1));
            out.push(("gen_mlp.w2".into(), mlp.w2));
            out.push(("gen_mlp.b2".into(), mlp.b2));
        }
        out
    }
}

/// Slice one flat `len x 2dL` matrix into `L` layer pairs of `len x d`.
pub fn kv_stack_from_flat(tape: &mut Tape, flat: Var, d: usize, layers: usize) -> PromptKvStack {
    let pairs = (0..layers)
        .map(|l| {
            let k = tape.slice_cols(flat, l * 2 * d, d);
            let v = tape.slice_cols(flat, l * 2 * d + d, d);
            (k, v)
        })
        .collect();
    PromptKvStack { pairs }
}

/// Task-specific prefix KV for one attention class: `MLP_cls(P_cls)`
/// reshaped into `L` layer pairs.
pub fn task_prefix_kv(
    tape: &mut Tape,
    bank: &BankVars,
    dims: &PromptDims,
    cls: AttnClass,
) -> PromptKvStack {
    let idx = AttnClass::ALL.iter().position(|c| *c == cls).unwrap();
    let (p, mlp) = &bank.task[idx];
    let flat = mlp_forward(tape, mlp, *p);
    kv_stack_from_flat(tape, flat, dims.d, dims.layers)
}

/// Decoder input for the prompt generator: `X = [D_j ; C]`, or a single part
/// under ablation, or `None` when both parts are ablated.
pub fn compose_decoder_input(
    tape: &mut Tape,
    bank: &BankVars,
    domain_id: usize,
    ablations: Ablations,
) -> Result<Option<Var>> {
    let domain = if ablations.no_domain {
        None
    } else {
        Some(*bank.domain_prompts.get(domain_id).ok_or_else(|| {
            Error::Index(format!(
                "domain {domain_id} out of range {}",
                bank.domain_prompts.len()
            ))
        })?)
    };
    let context = if ablations.no_context {
        None
    } else {
        bank.context_prompt
    };
    Ok(match (domain, context) {
        (Some(d), Some(c)) => Some(tape.concat_rows(&[d, c])),
        (Some(d), None) => Some(d),
        (None, Some(c)) => Some(c),
        (None, None) => None,
    })
}

/// Generator path of Eq.-5 shape: encoder reads the context, decoder
/// consumes `X` directly (no embedding lookup, full self-attention), and the
/// output MLP maps the decoder states to KV pairs. Gradients flow to `X` and
/// the MLP; generator weights are registered frozen by the caller.
pub fn generate_prompt_kv(
    tape: &mut Tape,
    generator: &ModelVars,
    gen_cfg: &TransformerConfig,
    context_ids: &[usize],
    x: Var,
    output_mlp: &MlpVars,
    dims: &PromptDims,
) -> PromptKvStack {
    let ids: &[usize] = if context_ids.len() > gen_cfg.max_input_len {
        eprintln!(
            "warning: context of {} tokens truncated to generator max {}",
            context_ids.len(),
            gen_cfg.max_input_len
        );
        &context_ids[..gen_cfg.max_input_len]
    } else {
        context_ids
    };
    let mut ctx = ForwardCtx::inference();
    let enc_out = encode(tape, generator, gen_cfg, ids, &Augmentation::none(), &mut ctx);
    let states = decode_states(
        tape,
        generator,
        gen_cfg,
        x,
        enc_out,
        &Augmentation::none(),
        false,
        &mut ctx,
    );
    let flat = mlp_forward(tape, output_mlp, states);
    kv_stack_from_flat(tape, flat, dims.d, dims.layers)
}

/// Generator-off path: the output MLP reparametrizes `X` directly.
pub fn reparam_prompt_kv(
    tape: &mut Tape,
    x: Var,
    output_mlp: &MlpVars,
    dims: &PromptDims,
) -> PromptKvStack {
    let flat = mlp_forward(tape, output_mlp, x);
    kv_stack_from_flat(tape, flat, dims.d, dims.layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{central_difference, relative_error};

    fn gen_cfg() -> TransformerConfig {
        TransformerConfig {
            vocab_size: 20,
            d_model: 8,
            heads: 2,
            layers: 1,
            max_input_len: 16,
            max_target_len: 64,
            dropout: 0.0,
        }
    }

    fn dims() -> PromptDims {
        PromptDims {
            t: 4,
            rho: 3,
            kappa: 5,
            n: 3,
            d_p: 8,
            d: 16,
            layers: 2,
            hidden: 8,
        }
    }

    fn bank_and_generator(seed: u64) -> (PromptBank, TransformerParams) {
        let generator = TransformerParams::init(gen_cfg(), 100 + seed).unwrap();
        let bank = init_prompts(dims(), &generator, seed).unwrap();
        (bank, generator)
    }

    #[test]
    fn prompt_rows_come_from_generator_vocabulary() {
        let (bank, generator) = bank_and_generator(1);
        for row in bank.context_prompt.rows() {
            let found = generator
                .embed
                .rows()
                .into_iter()
                .any(|er| er.iter().zip(row.iter()).all(|(a, b)| a == b));
            assert!(found, "context prompt row is not a vocabulary embedding");
        }
        for d in &bank.domain_prompts {
            assert_eq!(d.dim(), (3, 8));
        }
    }

    #[test]
    fn init_is_deterministic() {
        let (a, _) = bank_and_generator(2);
        let (b, _) = bank_and_generator(2);
        assert_eq!(a.context_prompt, b.context_prompt);
        assert_eq!(a.task[0].p, b.task[0].p);
        assert_eq!(a.gen_mlp.w1, b.gen_mlp.w1);
        for (x, y) in a.domain_prompts.iter().zip(&b.domain_prompts) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn oversized_prompts_are_a_config_error() {
        let generator = TransformerParams::init(gen_cfg(), 0).unwrap();
        let mut d = dims();
        d.rho = 100;
        assert!(matches!(
            init_prompts(d, &generator, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn task_prefix_kv_shapes_and_zero_mlp() {
        let (mut bank, _) = bank_and_generator(3);
        let mut tape = Tape::new();
        let vars = bank.register(&mut tape, Ablations::default());
        let stack = task_prefix_kv(&mut tape, &vars, &bank.dims, AttnClass::EncoderSelf);
        assert_eq!(stack.len_layers(), 2);
        for l in 0..2 {
            let (k, v) = stack.layer(l);
            assert_eq!(tape.shape(k), (4, 16));
            assert_eq!(tape.shape(v), (4, 16));
        }

        // zero weights and biases -> all-zero prefixes
        for tp in &mut bank.task {
            tp.mlp.w1.fill(0.0);
            tp.mlp.b1.fill(0.0);
            tp.mlp.w2.fill(0.0);
            tp.mlp.b2.fill(0.0);
        }
        let mut tape = Tape::new();
        let vars = bank.register(&mut tape, Ablations::default());
        let stack = task_prefix_kv(&mut tape, &vars, &bank.dims, AttnClass::DecoderCross);
        let (k, _) = stack.layer(0);
        assert!(tape.value(k).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn task_prefix_gradient_matches_finite_differences() {
        let (mut bank, _) = bank_and_generator(4);
        let loss_of = |bank: &PromptBank| {
            let mut tape = Tape::new();
            let vars = bank.register(&mut tape, Ablations::default());
            let stack = task_prefix_kv(&mut tape, &vars, &bank.dims, AttnClass::EncoderSelf);
            let (k, v) = stack.layer(1);
            let kk = tape.tanh(k);
            let prod = tape.mul(kk, v);
            let s = tape.sum_all(prod);
            (tape, vars, s)
        };
        let (tape, vars, loss) = loss_of(&bank);
        let grads = tape.backward(loss);
        let analytic = grads.wrt(vars.task[0].0).unwrap().clone();

        for &(r, c) in &[(0usize, 0usize), (1, 7), (3, 15)] {
            let base = bank.task[0].p[[r, c]];
            let fd = central_difference(
                |x| {
                    bank.task[0].p[[r, c]] = x;
                    let (t, _, l) = loss_of(&bank);
                    t.scalar_value(l)
                },
                base,
                1e-5,
            );
            bank.task[0].p[[r, c]] = base;
            assert!(relative_error(analytic[[r, c]], fd) <= 1e-4);
        }
    }

    #[test]
    fn compose_concatenates_in_order() {
        let (bank, _) = bank_and_generator(5);
        let mut tape = Tape::new();
        let vars = bank.register(&mut tape, Ablations::default());
        let x = compose_decoder_input(&mut tape, &vars, 1, Ablations::default())
            .unwrap()
            .unwrap();
        assert_eq!(tape.shape(x), (3 + 5, 8));
        // first rho rows equal D_1 exactly
        let xv = tape.value(x);
        for r in 0..3 {
            for c in 0..8 {
                assert_eq!(xv[[r, c]], bank.domain_prompts[1][[r, c]]);
            }
        }

        let abl = Ablations {
            no_domain: true,
            ..Ablations::default()
        };
        let mut tape = Tape::new();
        let vars = bank.register(&mut tape, abl);
        let x = compose_decoder_input(&mut tape, &vars, 0, abl).unwrap().unwrap();
        assert_eq!(tape.shape(x), (5, 8));

        let abl = Ablations {
            no_context: true,
            ..Ablations::default()
        };
        let mut tape = Tape::new();
        let vars = bank.register(&mut tape, abl);
        let x = compose_decoder_input(&mut tape, &vars, 2, abl).unwrap().unwrap();
        assert_eq!(tape.shape(x), (3, 8));

        // out-of-range domain
        let mut tape = Tape::new();
        let vars = bank.register(&mut tape, Ablations::default());
        assert!(matches!(
            compose_decoder_input(&mut tape, &vars, 9, Ablations::default()),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn generator_path_shapes_and_context_sensitivity() {
        let (bank, generator) = bank_and_generator(6);
        let mut tape = Tape::new();
        let gvars = generator.register(&mut tape, false);
        let bvars = bank.register(&mut tape, Ablations::default());
        let x = compose_decoder_input(&mut tape, &bvars, 0, Ablations::default())
            .unwrap()
            .unwrap();
        let mlp = bvars.gen_mlp.as_ref().unwrap();

        let stack_a = generate_prompt_kv(
            &mut tape,
            &gvars,
            &generator.cfg,
            &[4, 5, 6],
            x,
            mlp,
            &bank.dims,
        );
        assert_eq!(stack_a.len_layers(), 2);
        let (k, v) = stack_a.layer(0);
        assert_eq!(tape.shape(k), (8, 16));
        assert_eq!(tape.shape(v), (8, 16));

        // a different context must produce a different stack
        let stack_b = generate_prompt_kv(
            &mut tape,
            &gvars,
            &generator.cfg,
            &[7, 8, 9],
            x,
            mlp,
            &bank.dims,
        );
        let (kb, _) = stack_b.layer(0);
        let max_abs = tape
            .value(k)
            .iter()
            .zip(tape.value(kb).iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_abs > 1e-6, "stacks identical across contexts");
    }

    #[test]
    fn generator_receives_no_gradient() {
        let (bank, generator) = bank_and_generator(7);
        let mut tape = Tape::new();
        let gvars = generator.register(&mut tape, false);
        let bvars = bank.register(&mut tape, Ablations::default());
        let x = compose_decoder_input(&mut tape, &bvars, 0, Ablations::default())
            .unwrap()
            .unwrap();
        let mlp = bvars.gen_mlp.as_ref().unwrap();
        let stack = generate_prompt_kv(
            &mut tape,
            &gvars,
            &generator.cfg,
            &[4, 5, 6],
            x,
            mlp,
            &bank.dims,
        );
        let (k, _) = stack.layer(0);
        let sq = tape.mul(k, k);
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss);
        assert!(grads.wrt(gvars.embed).is_none());
        // but domain prompts and the output MLP do get gradients
        assert!(grads.wrt(bvars.domain_prompts[0]).is_some());
        assert!(grads.wrt(mlp.w2).is_some());
    }

    #[test]
    fn census_matches_registered_elements() {
        let (bank, _) = bank_and_generator(8);
        for abl in [
            Ablations::default(),
            Ablations {
                no_domain: true,
                ..Ablations::default()
            },
            Ablations {
                no_context: true,
                ..Ablations::default()
            },
            Ablations {
                no_domain: true,
                no_context: true,
                ..Ablations::default()
            },
        ] {
            let mut tape = Tape::new();
            let vars = bank.register(&mut tape, abl);
            let registered: usize = vars
                .named_vars()
                .iter()
                .map(|(_, v)| tape.value(*v).len())
                .sum();
            assert_eq!(bank.census(abl), registered, "ablation {abl:?}");
        }
    }

    #[test]
    fn archive_roundtrip() {
        let (bank, _) = bank_and_generator(9);
        let mut archive = TensorArchive::new();
        bank.to_archive(&mut archive);
        let back = PromptBank::from_archive(bank.dims, &archive).unwrap();
        assert_eq!(back.domain_prompts.len(), 3);
        for (a, b) in bank.domain_prompts.iter().zip(&back.domain_prompts) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
    }
}
