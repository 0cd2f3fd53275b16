//! Training configuration and its flat `key = value` file format.
//!
//! Keys match the field names exactly; unknown keys are errors. Lines that
//! are blank or start with `#` are skipped.

use std::path::Path;

use crate::error::{Error, Result};
use crate::prompts::Ablations;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// task prefix length
    pub t: usize,
    /// domain prompt length
    pub rho: usize,
    /// context prompt length
    pub kappa: usize,
    /// number of domains (clusters)
    pub n: usize,
    /// sampled domain pairs per iteration
    pub m: usize,
    /// independence loss weight
    pub lambda: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub max_ans_length: usize,
    pub no_domain: bool,
    pub no_context: bool,
    pub no_idp: bool,
    pub no_generator: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            t: 10,
            rho: 10,
            kappa: 10,
            n: 3,
            m: 3,
            lambda: 1e-4,
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            warmup_ratio: 0.1,
            epochs: 50,
            batch_size: 16,
            seed: 42,
            max_ans_length: 16,
            no_domain: false,
            no_context: false,
            no_idp: false,
            no_generator: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config("warmup_ratio must be in [0, 1)".into()));
        }
        if self.t == 0 {
            return Err(Error::Config("t must be >= 1".into()));
        }
        if self.rho == 0 && !self.no_domain {
            return Err(Error::Config("rho must be >= 1 unless no_domain".into()));
        }
        if self.kappa == 0 && !self.no_context {
            return Err(Error::Config("kappa must be >= 1 unless no_context".into()));
        }
        if self.n == 0 || self.epochs == 0 || self.batch_size == 0 || self.max_ans_length == 0 {
            return Err(Error::Config(
                "n, epochs, batch_size and max_ans_length must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn ablations(&self) -> Ablations {
        Ablations {
            no_domain: self.no_domain,
            no_context: self.no_context,
            no_idp: self.no_idp,
            no_generator: self.no_generator,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
        }
        match key {
            "t" => self.t = p(key, value)?,
            "rho" => self.rho = p(key, value)?,
            "kappa" => self.kappa = p(key, value)?,
            "n" => self.n = p(key, value)?,
            "m" => self.m = p(key, value)?,
            "lambda" => self.lambda = p(key, value)?,
            "lr" => self.lr = p(key, value)?,
            "beta1" => self.beta1 = p(key, value)?,
            "beta2" => self.beta2 = p(key, value)?,
            "weight_decay" => self.weight_decay = p(key, value)?,
            "warmup_ratio" => self.warmup_ratio = p(key, value)?,
            "epochs" => self.epochs = p(key, value)?,
            "batch_size" => self.batch_size = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            "max_ans_length" => self.max_ans_length = p(key, value)?,
            "no_domain" => self.no_domain = p(key, value)?,
            "no_context" => self.no_context = p(key, value)?,
            "no_idp" => self.no_idp = p(key, value)?,
            "no_generator" => self.no_generator = p(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Render back into the file format (round-trips through [`parse`]).
    pub fn to_key_values(&self) -> String {
        format!(
            "t = {}\nrho = {}\nkappa = {}\nn = {}\nm = {}\nlambda = {}\nlr = {}\nbeta1 = {}\nbeta2 = {}\nweight_decay = {}\nwarmup_ratio = {}\nepochs = {}\nbatch_size = {}\nseed = {}\nmax_ans_length = {}\nno_domain = {}\nno_context = {}\nno_idp = {}\nno_generator = {}\n",
            self.t,
            self.rho,
            self.kappa,
            self.n,
            self.m,
            self.lambda,
            self.lr,
            self.beta1,
            self.beta2,
            self.weight_decay,
            self.warmup_ratio,
            self.epochs,
            self.batch_size,
            self.seed,
            self.max_ans_length,
            self.no_domain,
            self.no_context,
            self.no_idp,
            self.no_generator,
        )
    }
}
