//! Run settings: a `key = value` file merged with command-line flags
//! (flags win).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ssvi_core::ctm::CovMode;
use ssvi_core::likelihoods::{Likelihood, DEFAULT_RATE_MAX};
use ssvi_core::optim::{Engine, StepSchedule, TrainConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{}: {source}", path.display())]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{}:{line}: {msg}", path.display())]
    Syntax { path: PathBuf, line: usize, msg: String },
    #[error("missing required setting `{0}`")]
    Missing(&'static str),
    #[error("invalid value {value:?} for `{key}`: {msg}")]
    Invalid { key: String, value: String, msg: String },
}

macro_rules! flags {
    ($($field:ident => $key:literal : $help:literal),* $(,)?) => {
        /// Settings accepted on the command line and in config files.
        #[derive(clap::Args, Debug, Default, Clone)]
        pub struct Flags {
            /// key = value settings file; flags override it
            #[arg(long)]
            pub config: Option<PathBuf>,
            $(
                #[arg(long = $key, value_name = "VALUE", help = $help)]
                pub $field: Option<String>,
            )*
        }

        impl Flags {
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            fn entries(&self) -> Vec<(&'static str, String)> {
                let mut v = Vec::new();
                $(
                    if let Some(x) = &self.$field {
                        v.push(($key, x.clone()));
                    }
                )*
                v
            }
        }
    };
}

flags! {
    seed => "seed": "random seed (required for train and synth)",
    engine => "engine": "mcssvi | sdsvi | hmcssvi",
    batch_size => "batch-size": "examples per minibatch; at least N gives batch updates",
    mc_samples => "mc-samples": "Monte Carlo samples per gradient estimate",
    schedule => "schedule": "natural step size: 1/t, 1/t:OFFSET or const:RHO",
    learning_rate => "learning-rate": "ADAGRAD learning rate",
    out => "out": "output path (trace CSV for train, dataset for synth)",
    data => "data": "training data file",
    test_data => "test-data": "held-out data file; default is an 80/20 split of --data",
    model => "model": "saved model JSON (eval)",
    save => "save": "write the trained model as JSON",
    iters => "iters": "number of update steps",
    eval_every => "eval-every": "steps between trace rows",
    eval_seed => "eval-seed": "seed for Monte Carlo bound estimates in the trace",
    clock => "clock": "wall | off (off writes 0 for wall_time_s)",
    likelihood => "likelihood": "gaussian[:VAR] | logistic | poisson[:RATE_MAX] | ordinal[:LEVELS]",
    dim => "dim": "feature dimension (synth)",
    n => "n": "number of examples (synth)",
    rows => "rows": "matrix rows (pmf synth)",
    cols => "cols": "matrix columns (pmf synth)",
    rank => "rank": "latent dimension (pmf)",
    density => "density": "observed fraction of cells (pmf synth)",
    bound => "bound": "optimal | suboptimal | meanfield (gme)",
    inner_samples => "inner-samples": "inner Monte Carlo samples (gme)",
    tau => "tau": "Rayleigh prior scale (gme)",
    terms => "terms": "mc | exact (pmf)",
    method => "method": "comma list of suboptimal, optimal, v1, v2, or all (sgp)",
    inducing => "inducing": "number of inducing inputs, or `all` (sgp)",
    kernel => "kernel": "LENGTH,SIGNAL_VAR,NOISE_VAR; default is a grid search (sgp)",
    topics => "topics": "number of topics (ctm)",
    vocab => "vocab": "vocabulary size (ctm synth)",
    docs => "docs": "number of documents (ctm synth)",
    words => "words": "words per document (ctm synth)",
    concentration => "concentration": "Dirichlet concentration of synthetic topics (ctm synth)",
    approx => "approx": "optimal | simple | both (ctm)",
    cov_mode => "cov-mode": "full | diag (ctm)",
    nll_scheme => "nll-scheme": "prior | posterior | posterior+0.1I | posterior+I (ctm)",
    nll_samples => "nll-samples": "importance samples per batch (ctm)",
    nll_batches => "nll-batches": "importance-sampling batches (ctm)",
}

/// Merged settings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

fn normalize_key(k: &str) -> String {
    k.trim().replace('_', "-")
}

impl Settings {
    pub fn parse_file(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let mut values = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let syntax = |msg: String| ConfigError::Syntax { path: path.to_path_buf(), line: i + 1, msg };
            let (k, v) = t.split_once('=').ok_or_else(|| syntax("expected key = value".into()))?;
            let k = normalize_key(k);
            if !Flags::KEYS.contains(&k.as_str()) {
                return Err(syntax(format!("unknown setting `{k}`")));
            }
            values.insert(k, v.trim().to_string());
        }
        Ok(Settings { values })
    }

    pub fn from_flags(flags: &Flags) -> Result<Self, ConfigError> {
        let mut s = match &flags.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read { path: p.clone(), source })?;
                Self::parse_file(&text, p)?
            }
            None => Settings::default(),
        };
        for (k, v) in flags.entries() {
            s.values.insert(k.to_string(), v);
        }
        Ok(s)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.values.insert(normalize_key(key), value.into());
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .map(|v| v.parse::<T>().map_err(|e| ConfigError::Invalid { key: key.into(), value: v.into(), msg: e.to_string() }))
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &'static str) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)?.ok_or(ConfigError::Missing(key))
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.raw(key).map(PathBuf::from)
    }

    pub fn require_path(&self, key: &'static str) -> Result<PathBuf, ConfigError> {
        self.path(key).ok_or(ConfigError::Missing(key))
    }

    fn invalid(&self, key: &str, msg: &str) -> ConfigError {
        ConfigError::Invalid { key: key.into(), value: self.raw(key).unwrap_or("").into(), msg: msg.into() }
    }

    pub fn seed(&self) -> Result<u64, ConfigError> {
        self.require("seed")
    }

    pub fn engine(&self) -> Result<Engine, ConfigError> {
        match self.raw("engine") {
            None => Ok(Engine::HMcSsvi),
            Some(s) => Engine::parse(s).ok_or_else(|| self.invalid("engine", "expected mcssvi, sdsvi or hmcssvi")),
        }
    }

    pub fn schedule(&self) -> Result<StepSchedule, ConfigError> {
        let Some(s) = self.raw("schedule") else {
            return Ok(StepSchedule::default());
        };
        let bad = |msg: &str| self.invalid("schedule", msg);
        let parsed = if s == "1/t" {
            StepSchedule::one_over_t(0.0)
        } else if let Some(o) = s.strip_prefix("1/t:") {
            StepSchedule::one_over_t(o.parse().map_err(|_| bad("bad offset"))?)
        } else if let Some(r) = s.strip_prefix("const:") {
            StepSchedule::constant(r.parse().map_err(|_| bad("bad step size"))?)
        } else {
            return Err(bad("expected 1/t, 1/t:OFFSET or const:RHO"));
        };
        parsed.map_err(|e| bad(&e.to_string()))
    }

    pub fn train_config(&self) -> Result<TrainConfig, ConfigError> {
        let mut c = TrainConfig::new(self.engine()?, self.get_or("batch-size", usize::MAX)?, self.seed()?);
        c.mc_samples = self.get_or("mc-samples", c.mc_samples)?;
        c.schedule = self.schedule()?;
        c.learning_rate = self.get_or("learning-rate", c.learning_rate)?;
        if c.mc_samples == 0 || c.batch_size == 0 {
            return Err(ConfigError::Invalid { key: "mc-samples/batch-size".into(), value: "0".into(), msg: "must be positive".into() });
        }
        Ok(c)
    }

    pub fn likelihood(&self, default: Likelihood) -> Result<Likelihood, ConfigError> {
        let Some(s) = self.raw("likelihood") else {
            return Ok(default);
        };
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let num = |a: &str| a.parse::<f64>().map_err(|_| self.invalid("likelihood", "bad parameter"));
        let lik = match (name, arg) {
            ("gaussian", None) => Likelihood::Gaussian { variance: 1.0 },
            ("gaussian", Some(a)) => Likelihood::Gaussian { variance: num(a)? },
            ("logistic", None) => Likelihood::Logistic,
            ("poisson", None) => Likelihood::PoissonLogistic { rate_max: DEFAULT_RATE_MAX },
            ("poisson", Some(a)) => Likelihood::PoissonLogistic { rate_max: num(a)? },
            ("ordinal", None) => Likelihood::ordinal_default(),
            ("ordinal", Some(a)) => match Likelihood::ordinal_default() {
                Likelihood::Ordinal { slope, delta, .. } => Likelihood::Ordinal {
                    levels: a.parse().map_err(|_| self.invalid("likelihood", "bad level count"))?,
                    slope,
                    delta,
                },
                other => other,
            },
            _ => return Err(self.invalid("likelihood", "unknown likelihood")),
        };
        lik.check_params().map_err(|e| self.invalid("likelihood", &e.to_string()))?;
        Ok(lik)
    }

    pub fn cov_mode(&self) -> Result<CovMode, ConfigError> {
        match self.raw("cov-mode").unwrap_or("diag") {
            "full" => Ok(CovMode::Full),
            "diag" => Ok(CovMode::Diagonal),
            _ => Err(self.invalid("cov-mode", "expected full or diag")),
        }
    }

    pub fn clock(&self) -> Result<bool, ConfigError> {
        match self.raw("clock").unwrap_or("wall") {
            "wall" => Ok(true),
            "off" => Ok(false),
            _ => Err(self.invalid("clock", "expected wall or off")),
        }
    }

    /// `(iters, eval_every)`; the trace gets about ten rows by default.
    pub fn cadence(&self, default_iters: u64) -> Result<(u64, u64), ConfigError> {
        let iters = self.get_or("iters", default_iters)?;
        let every = self.get_or("eval-every", (iters / 10).max(1))?;
        if every == 0 {
            return Err(self.invalid("eval-every", "must be positive"));
        }
        Ok((iters, every))
    }
}
