//! Command-line entry point: corpus generation, backbone pretraining,
//! context clustering, prompt tuning, evaluation, generation, ablations and
//! CKA inspection.
//!
//! A pretrained checkpoint directory holds `model.ckpt` (tensor archive),
//! `vocab.json` and `model.json`; a tuned checkpoint adds the prompt
//! tensors, `domains.json`, `metrics.jsonl` and a `config.cfg` echo.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::TensorArchive;
use crate::cluster::{cluster_contexts, embed_context, kmeans, random_domain_model, DomainModel};
use crate::config::TrainConfig;
use crate::corpus::{generate_corpus, write_corpus, CorpusSpec, DomainKind};
use crate::data::{build_training_vocab, load_jsonl, QAExample, Vocabulary};
use crate::error::{Error, Result};
use crate::independence::{cka_matrix, Kernel};
use crate::model::{TransformerConfig, TransformerParams};
use crate::prompts::{PromptBank, PromptDims};
use crate::trainer::{
    ablate, evaluate, prepare_split, pretrain, sweep, train, Models, Split, SweepParam,
};

#[derive(Parser)]
#[command(
    name = "mprompt",
    about = "Multi-level prompt tuning for generative QA on a frozen miniature transformer",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic multi-domain synthetic QA corpus.
    GenCorpus(GenCorpusArgs),
    /// Train the backbone alone on a corpus, then freeze it for tuning.
    Pretrain(PretrainArgs),
    /// Embed contexts and cluster them into domains.
    Cluster(ClusterArgs),
    /// Prompt-tune on a frozen pretrained backbone.
    Train(TrainArgs),
    /// Score a tuned checkpoint on a dataset.
    Eval(EvalArgs),
    /// Decode answers for a dataset.
    Generate(GenerateArgs),
    /// Run the five-condition ablation or a sensitivity sweep.
    Ablate(AblateArgs),
    /// Print the pairwise CKA matrix of a checkpoint's domain prompts.
    InspectCka(InspectCkaArgs),
}

#[derive(Args)]
struct GenCorpusArgs {
    /// Output directory for train/val/test JSONL and the label sidecar.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 400)]
    per_domain: usize,
    #[arg(long, default_value_t = 0.75)]
    train_ratio: f64,
    #[arg(long, default_value_t = 0.125)]
    val_ratio: f64,
    /// Comma-separated generator kinds.
    #[arg(long, default_value = "lookup,arithmetic,choice,boolean")]
    domains: String,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    val: PathBuf,
    /// Output checkpoint directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    d: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    /// Prompt generator width d_p.
    #[arg(long, default_value_t = 32)]
    gen_d: usize,
    #[arg(long, default_value_t = 1)]
    gen_layers: usize,
    #[arg(long, default_value_t = 2)]
    gen_heads: usize,
    #[arg(long, default_value_t = 512)]
    vocab_size: usize,
    #[arg(long, default_value_t = 64)]
    max_input_len: usize,
    #[arg(long, default_value_t = 16)]
    max_ans_length: usize,
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Stop once validation exact match reaches this value.
    #[arg(long)]
    target_metric: Option<f64>,
}

#[derive(Args)]
struct ClusterArgs {
    #[arg(long)]
    data: PathBuf,
    /// Output domain-model JSON.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    n: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Assign labels uniformly at random instead of clustering.
    #[arg(long, default_value_t = false)]
    random: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    val: PathBuf,
    /// Pretrained checkpoint directory.
    #[arg(long)]
    backbone: PathBuf,
    /// Existing domain model; omitted = cluster now with the config's n.
    #[arg(long)]
    domains: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Override the config file's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Stop once validation reaches this value.
    #[arg(long)]
    target_metric: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Tuned checkpoint directory.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Optional per-example scores JSONL.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Predictions JSONL; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    val: PathBuf,
    #[arg(long)]
    backbone: PathBuf,
    /// Sweep one knob (lambda|m|n|rho|kappa) instead of the ablation grid.
    #[arg(long)]
    sweep: Option<String>,
    /// Optional results JSONL.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    target_metric: Option<f64>,
}

#[derive(Args)]
struct InspectCkaArgs {
    #[arg(long)]
    ckpt: PathBuf,
}

/// Sidecar describing the tensors in `model.ckpt`.
#[derive(Serialize, Deserialize)]
pub struct ModelMeta {
    pub backbone: TransformerConfig,
    pub generator: TransformerConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<PromptMeta>,
}

#[derive(Clone, Copy, Serialize, Deserialize)]
pub struct PromptMeta {
    pub t: usize,
    pub rho: usize,
    pub kappa: usize,
    pub n: usize,
    pub hidden: usize,
}

impl PromptMeta {
    fn dims(&self, meta: &ModelMeta) -> PromptDims {
        PromptDims {
            t: self.t,
            rho: self.rho,
            kappa: self.kappa,
            n: self.n,
            d_p: meta.generator.d_model,
            d: meta.backbone.d_model,
            layers: meta.backbone.layers,
            hidden: self.hidden,
        }
    }
}

fn write_meta(dir: &Path, meta: &ModelMeta) -> Result<()> {
    let f = std::fs::File::create(dir.join("model.json"))?;
    serde_json::to_writer(f, meta)?;
    Ok(())
}

fn read_meta(dir: &Path) -> Result<ModelMeta> {
    let path = dir.join("model.json");
    let f = std::fs::File::open(&path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_reader(f)?)
}

struct LoadedCheckpoint {
    models: Models,
    vocab: Vocabulary,
    meta: ModelMeta,
    bank: Option<PromptBank>,
    domains: Option<DomainModel>,
}

fn load_checkpoint_dir(dir: &Path) -> Result<LoadedCheckpoint> {
    let meta = read_meta(dir)?;
    let archive = TensorArchive::read(&dir.join("model.ckpt"))?;
    let backbone = TransformerParams::from_archive("backbone", &archive, meta.backbone)?;
    let generator = TransformerParams::from_archive("generator", &archive, meta.generator)?;
    let vocab = Vocabulary::load(&dir.join("vocab.json"))?;
    let bank = match &meta.prompt {
        Some(pm) => Some(PromptBank::from_archive(pm.dims(&meta), &archive)?),
        None => None,
    };
    let domains_path = dir.join("domains.json");
    let domains = if domains_path.exists() {
        Some(DomainModel::load(&domains_path)?)
    } else {
        None
    };
    Ok(LoadedCheckpoint {
        models: Models {
            backbone,
            generator,
        },
        vocab,
        meta,
        bank,
        domains,
    })
}

fn load_tuned(dir: &Path) -> Result<(LoadedCheckpoint, PromptBank, DomainModel)> {
    let loaded = load_checkpoint_dir(dir)?;
    let bank = loaded
        .bank
        .as_ref()
        .ok_or_else(|| Error::Checkpoint(format!("{}: no prompt tensors", dir.display())))?
        .clone();
    let domains = loaded
        .domains
        .as_ref()
        .ok_or_else(|| Error::Checkpoint(format!("{}: no domains.json", dir.display())))?
        .clone();
    Ok((loaded, bank, domains))
}

fn run_gen_corpus(args: &GenCorpusArgs) -> Result<()> {
    let domains = args
        .domains
        .split(',')
        .map(|s| DomainKind::parse(s.trim()))
        .collect::<Result<Vec<_>>>()?;
    let spec = CorpusSpec {
        domains,
        examples_per_domain: args.per_domain,
        train_ratio: args.train_ratio,
        val_ratio: args.val_ratio,
    };
    let corpus = generate_corpus(&spec, args.seed)?;
    write_corpus(&corpus, &args.out)?;
    println!(
        "wrote {} train / {} val / {} test examples to {}",
        corpus.train.len(),
        corpus.val.len(),
        corpus.test.len(),
        args.out.display()
    );
    Ok(())
}

fn run_pretrain(args: &PretrainArgs) -> Result<()> {
    let train_raw = load_jsonl(&args.data)?;
    let val_raw = load_jsonl(&args.val)?;
    let vocab = build_training_vocab(&train_raw, args.vocab_size)?;

    let backbone_cfg = TransformerConfig {
        vocab_size: vocab.size(),
        d_model: args.d,
        heads: args.heads,
        layers: args.layers,
        max_input_len: args.max_input_len,
        max_target_len: args.max_ans_length,
        dropout: args.dropout,
    };
    let generator_cfg = TransformerConfig {
        vocab_size: vocab.size(),
        d_model: args.gen_d,
        heads: args.gen_heads,
        layers: args.gen_layers,
        max_input_len: args.max_input_len,
        max_target_len: 128,
        dropout: 0.0,
    };
    let mut backbone = TransformerParams::init(backbone_cfg, args.seed)?;
    // the generator stands in for a small pretrained LM: seeded, never trained
    let generator = TransformerParams::init(generator_cfg, args.seed ^ 0x47454e)?;

    let train_split = prepare_one_domain(&train_raw, &vocab, backbone_cfg)?;
    let val_split = prepare_one_domain(&val_raw, &vocab, backbone_cfg)?;
    let log = pretrain(
        &mut backbone,
        &vocab,
        &train_split,
        &val_split,
        args.epochs,
        args.lr,
        args.batch_size,
        args.seed,
        args.target_metric,
    )?;
    for line in &log {
        println!("{line}");
    }

    std::fs::create_dir_all(&args.out)?;
    let mut archive = TensorArchive::new();
    backbone.to_archive("backbone", &mut archive);
    generator.to_archive("generator", &mut archive);
    archive.write(&args.out.join("model.ckpt"))?;
    vocab.save(&args.out.join("vocab.json"))?;
    write_meta(
        &args.out,
        &ModelMeta {
            backbone: backbone_cfg,
            generator: generator_cfg,
            prompt: None,
        },
    )?;
    println!("pretrained checkpoint written to {}", args.out.display());
    Ok(())
}

/// Split preparation when domains are irrelevant (pretraining).
fn prepare_one_domain(
    examples: &[QAExample],
    vocab: &Vocabulary,
    cfg: TransformerConfig,
) -> Result<Split> {
    let dummy = DomainModel {
        n: 1,
        seed: 0,
        e: 1,
        centroids: vec![vec![0.0]],
        assignments: Default::default(),
    };
    prepare_split(examples, vocab, &dummy, cfg.max_input_len, cfg.max_target_len)
}

fn run_cluster(args: &ClusterArgs) -> Result<()> {
    let examples = load_jsonl(&args.data)?;
    let model = if args.random {
        let ids: Vec<String> = examples.iter().map(|e| e.id.clone()).collect();
        let points: Vec<Vec<f64>> = examples
            .iter()
            .map(|e| embed_context(&e.context))
            .collect();
        random_domain_model(&ids, &points, args.n, args.seed)?
    } else {
        let ids: Vec<String> = examples.iter().map(|e| e.id.clone()).collect();
        let points: Vec<Vec<f64>> = examples
            .iter()
            .map(|e| embed_context(&e.context))
            .collect();
        kmeans(&ids, &points, args.n, args.seed)?
    };
    model.save(&args.out)?;
    println!(
        "clustered {} contexts into {} domains -> {}",
        examples.len(),
        args.n,
        args.out.display()
    );
    Ok(())
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = TrainConfig::from_file(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let loaded = load_checkpoint_dir(&args.backbone)?;
    let train_raw = load_jsonl(&args.data)?;
    let val_raw = load_jsonl(&args.val)?;

    let domains = match &args.domains {
        Some(path) => {
            let model = DomainModel::load(path)?;
            if model.n != cfg.n {
                return Err(Error::Config(format!(
                    "domain model has n={} but config says n={}",
                    model.n, cfg.n
                )));
            }
            model
        }
        None => cluster_contexts(&train_raw, cfg.n, cfg.seed)?,
    };

    let max_in = loaded.meta.backbone.max_input_len;
    let train_split = prepare_split(&train_raw, &loaded.vocab, &domains, max_in, cfg.max_ans_length)?;
    let val_split = prepare_split(&val_raw, &loaded.vocab, &domains, max_in, cfg.max_ans_length)?;

    let outcome = train(
        &loaded.models,
        &loaded.vocab,
        &train_split,
        &val_split,
        &cfg,
        args.target_metric,
    )?;

    std::fs::create_dir_all(&args.out)?;
    let mut archive = TensorArchive::new();
    loaded.models.to_archive(&mut archive);
    outcome.best_bank.to_archive(&mut archive);
    archive.write(&args.out.join("model.ckpt"))?;
    loaded.vocab.save(&args.out.join("vocab.json"))?;
    domains.save(&args.out.join("domains.json"))?;
    write_meta(
        &args.out,
        &ModelMeta {
            backbone: loaded.meta.backbone,
            generator: loaded.meta.generator,
            prompt: Some(PromptMeta {
                t: outcome.best_bank.dims.t,
                rho: outcome.best_bank.dims.rho,
                kappa: outcome.best_bank.dims.kappa,
                n: outcome.best_bank.dims.n,
                hidden: outcome.best_bank.dims.hidden,
            }),
        },
    )?;
    std::fs::write(args.out.join("config.cfg"), cfg.to_key_values())?;
    std::fs::write(
        args.out.join("metrics.jsonl"),
        outcome.log_lines.join("\n") + "\n",
    )?;

    println!(
        "best epoch {} with validation metric {}",
        outcome.best_epoch, outcome.best_metric
    );
    println!(
        "trainable parameters: {} | frozen parameters: {}",
        outcome.trainable_params, outcome.frozen_params
    );
    println!("checkpoint written to {}", args.out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalJson {
    token_f1: f64,
    rouge_l: f64,
    exact_match: f64,
    n_examples: usize,
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let (loaded, bank, domains) = load_tuned(&args.ckpt)?;
    let examples = load_jsonl(&args.data)?;
    let cfg_path = args.ckpt.join("config.cfg");
    let cfg = TrainConfig::from_file(&cfg_path)?;
    let split = prepare_split(
        &examples,
        &loaded.vocab,
        &domains,
        loaded.meta.backbone.max_input_len,
        cfg.max_ans_length,
    )?;
    let report = evaluate(
        &loaded.models,
        Some(&bank),
        cfg.ablations(),
        &split,
        &loaded.vocab,
        cfg.max_ans_length,
    )?;
    let json = EvalJson {
        token_f1: report.token_f1,
        rouge_l: report.rouge_l,
        exact_match: report.exact_match,
        n_examples: report.n_examples,
    };
    println!("{}", serde_json::to_string(&json)?);
    if let Some(out) = &args.out {
        let mut f = std::fs::File::create(out)?;
        for p in &report.predictions {
            serde_json::to_writer(&mut f, p)?;
            f.write_all(b"\n")?;
        }
    }
    Ok(())
}

fn run_generate(args: &GenerateArgs) -> Result<()> {
    let (loaded, bank, domains) = load_tuned(&args.ckpt)?;
    let examples = load_jsonl(&args.data)?;
    let cfg = TrainConfig::from_file(&args.ckpt.join("config.cfg"))?;
    let split = prepare_split(
        &examples,
        &loaded.vocab,
        &domains,
        loaded.meta.backbone.max_input_len,
        cfg.max_ans_length,
    )?;
    let report = evaluate(
        &loaded.models,
        Some(&bank),
        cfg.ablations(),
        &split,
        &loaded.vocab,
        cfg.max_ans_length,
    )?;
    #[derive(Serialize)]
    struct Pred<'a> {
        id: &'a str,
        prediction: &'a str,
    }
    let mut out: Box<dyn Write> = match &args.out {
        Some(path) => Box::new(std::fs::File::create(path)?),
        None => Box::new(std::io::stdout()),
    };
    for p in &report.predictions {
        serde_json::to_writer(
            &mut out,
            &Pred {
                id: &p.id,
                prediction: &p.prediction,
            },
        )?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

fn run_ablate(args: &AblateArgs) -> Result<()> {
    let mut cfg = TrainConfig::from_file(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let loaded = load_checkpoint_dir(&args.backbone)?;
    let train_raw = load_jsonl(&args.data)?;
    let val_raw = load_jsonl(&args.val)?;

    if let Some(param) = &args.sweep {
        let param = SweepParam::parse(param)?;
        let rows = sweep(
            &loaded.models,
            &loaded.vocab,
            &train_raw,
            &val_raw,
            &cfg,
            param,
            args.target_metric,
        )?;
        println!("{:<8} {:>10} {:>12} {:>10}", "param", "value", "val_metric", "mean_cka");
        for r in &rows {
            println!(
                "{:<8} {:>10} {:>12.4} {:>10.4}",
                r.param, r.value, r.val_metric, r.mean_cka
            );
        }
        if let Some(out) = &args.out {
            write_jsonl(out, &rows)?;
        }
        return Ok(());
    }

    let domains = cluster_contexts(&train_raw, cfg.n, cfg.seed)?;
    let max_in = loaded.meta.backbone.max_input_len;
    let train_split = prepare_split(&train_raw, &loaded.vocab, &domains, max_in, cfg.max_ans_length)?;
    let val_split = prepare_split(&val_raw, &loaded.vocab, &domains, max_in, cfg.max_ans_length)?;
    let rows = ablate(
        &loaded.models,
        &loaded.vocab,
        &train_split,
        &val_split,
        &cfg,
        args.target_metric,
    )?;
    println!("{:<8} {:>12} {:>10} {:>10}", "variant", "val_metric", "mean_cka", "best_ep");
    for r in &rows {
        println!(
            "{:<8} {:>12.4} {:>10.4} {:>10}",
            r.name, r.val_metric, r.mean_cka, r.best_epoch
        );
    }
    if let Some(out) = &args.out {
        write_jsonl(out, &rows)?;
    }
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for r in rows {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

fn run_inspect_cka(args: &InspectCkaArgs) -> Result<()> {
    let (_, bank, _) = load_tuned(&args.ckpt)?;
    let matrix = cka_matrix(&bank.domain_prompts, Kernel::Linear)?;
    #[derive(Serialize)]
    struct CkaJson {
        n: usize,
        kernel: &'static str,
        cka: Vec<Vec<f64>>,
    }
    let rows: Vec<Vec<f64>> = matrix.rows().into_iter().map(|r| r.to_vec()).collect();
    println!(
        "{}",
        serde_json::to_string(&CkaJson {
            n: bank.domain_prompts.len(),
            kernel: "linear",
            cka: rows,
        })?
    );
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenCorpus(args) => run_gen_corpus(args),
        Command::Pretrain(args) => run_pretrain(args),
        Command::Cluster(args) => run_cluster(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Generate(args) => run_generate(args),
        Command::Ablate(args) => run_ablate(args),
        Command::InspectCka(args) => run_inspect_cka(args),
    }
}

/// Binary entry point. Usage errors exit 2 (clap); data/config/runtime
/// failures exit 3 with a one-line diagnostic.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

