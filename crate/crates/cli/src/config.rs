//! Flat key-value run and comparison configs.
//!
//! `key = value` lines, `#` comments. Unknown keys are rejected; missing
//! keys take the documented defaults. The resolved configuration is echoed
//! into the output directory and parsing the echo reproduces it exactly.

use std::collections::HashSet;
use std::path::PathBuf;

use psgd_core::error::{Error, Result};
use psgd_core::harness::ProblemSpec;
use psgd_core::kv::KvDoc;
use psgd_core::lie_groups::GroupKind;
use psgd_core::optimizers::{OptimizerConfig, OptimizerKind};

/// A parsed document plus the set of keys consumed so far; whatever is left
/// at the end is unknown and rejected.
struct Reader {
    doc: KvDoc,
    used: HashSet<String>,
}

impl Reader {
    fn new(doc: KvDoc) -> Self {
        Reader { doc, used: HashSet::new() }
    }

    fn get(&mut self, key: &str) -> Option<String> {
        let v = self.doc.get(key).map(str::to_string);
        if v.is_some() {
            self.used.insert(key.to_string());
        }
        v
    }

    fn get_f64(&mut self, key: &str, default: f64) -> Result<f64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::BadConfig { field: "config", message: format!("key `{key}`: bad number `{v}`") }),
        }
    }

    fn get_u64(&mut self, key: &str, default: u64) -> Result<u64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::BadConfig { field: "config", message: format!("key `{key}`: bad integer `{v}`") }),
        }
    }

    fn get_usize(&mut self, key: &str, default: usize) -> Result<usize> {
        Ok(self.get_u64(key, default as u64)? as usize)
    }

    fn get_bool(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => match v.as_str() {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                other => Err(Error::BadConfig {
                    field: "config",
                    message: format!("key `{key}`: expected true/false, got `{other}`"),
                }),
            },
        }
    }

    fn finish(self) -> Result<()> {
        for key in self.doc.keys() {
            if !self.used.contains(key) {
                return Err(Error::BadConfig {
                    field: "config",
                    message: format!("unknown key `{key}`"),
                });
            }
        }
        Ok(())
    }
}

/// One experiment: a problem, one optimizer, and run settings.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub problem: ProblemSpec,
    pub optimizer: OptimizerConfig,
    pub n_iters: u64,
    pub seed: u64,
    pub out_dir: PathBuf,
}

/// A comparison grid: one problem, several named optimizers, several seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareConfig {
    pub problem: ProblemSpec,
    pub optimizers: Vec<(String, OptimizerConfig)>,
    pub seeds: Vec<u64>,
    pub n_iters: u64,
    pub loss_threshold: f64,
    pub out_dir: PathBuf,
}

fn parse_problem(r: &mut Reader) -> Result<ProblemSpec> {
    let kind = r.get("problem.kind").unwrap_or_else(|| "rosenbrock".into());
    Ok(match kind.as_str() {
        "rosenbrock" => ProblemSpec::Rosenbrock,
        "quadratic" => ProblemSpec::NoisyQuadratic {
            dim: r.get_usize("problem.dim", 16)?,
            sigma: r.get_f64("problem.sigma", 0.0)?,
            seed: r.get_u64("problem.seed", 7)?,
        },
        "mlp" => {
            let layers = match r.get("problem.layers") {
                None => vec![2, 16, 16, 2],
                Some(v) => v
                    .split(',')
                    .map(|t| {
                        t.trim().parse::<usize>().map_err(|_| Error::BadConfig {
                            field: "config",
                            message: format!("key `problem.layers`: bad list `{v}`"),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?,
            };
            ProblemSpec::MlpClassifier {
                layers,
                n_samples: r.get_usize("problem.n_samples", 200)?,
                seed: r.get_u64("problem.seed", 7)?,
            }
        }
        "lstm" => ProblemSpec::TinyLstmLm {
            vocab: r.get_usize("problem.vocab", 32)?,
            hidden: r.get_usize("problem.hidden", 16)?,
            seq_len: r.get_usize("problem.seq_len", 20)?,
            seed: r.get_u64("problem.seed", 7)?,
        },
        other => {
            return Err(Error::BadConfig {
                field: "config",
                message: format!("key `problem.kind`: unknown problem `{other}`"),
            })
        }
    })
}

/// Reads the optimizer section under `prefix` (e.g. `optimizer` or a grid
/// name), falling back to built-in defaults.
fn parse_optimizer(r: &mut Reader, prefix: &str) -> Result<OptimizerConfig> {
    let kind_key = format!("{prefix}.kind");
    let kind = match r.get(&kind_key) {
        None => OptimizerKind::NewtonPsgd,
        Some(v) => OptimizerKind::parse(&v)?,
    };
    let mut c = OptimizerConfig::new(kind);
    c.mu = r.get_f64(&format!("{prefix}.mu"), c.mu)?;
    c.mu0 = r.get_f64(&format!("{prefix}.mu0"), c.mu0)?;
    c.lambda = r.get_f64(&format!("{prefix}.lambda"), c.lambda)?;
    c.update_probability = r.get_f64(&format!("{prefix}.update_probability"), c.update_probability)?;
    c.clip_threshold = match r.get(&format!("{prefix}.clip_threshold")) {
        None => None,
        Some(v) if v == "none" => None,
        Some(v) => Some(v.parse().map_err(|_| Error::BadConfig {
            field: "config",
            message: format!("key `{prefix}.clip_threshold`: bad number `{v}`"),
        })?),
    };
    c.momentum_beta = r.get_f64(&format!("{prefix}.momentum_beta"), c.momentum_beta)?;
    c.adam.beta1 = r.get_f64(&format!("{prefix}.adam.beta1"), c.adam.beta1)?;
    c.adam.beta2 = r.get_f64(&format!("{prefix}.adam.beta2"), c.adam.beta2)?;
    c.adam.epsilon = r.get_f64(&format!("{prefix}.adam.epsilon"), c.adam.epsilon)?;
    c.batch_size = r.get_usize(&format!("{prefix}.batch_size"), c.batch_size)?;
    c.unbiased_fisher = r.get_bool(&format!("{prefix}.unbiased_fisher"), c.unbiased_fisher)?;
    c.ema_factor_s = r.get_f64(&format!("{prefix}.ema_factor_s"), c.ema_factor_s)?;
    c.ema_factor_moment = r.get_f64(&format!("{prefix}.ema_factor_moment"), c.ema_factor_moment)?;
    c.group = match r.get(&format!("{prefix}.group")) {
        None => c.group,
        Some(v) => GroupKind::parse(&v)?,
    };
    c.q_init = r.get_f64(&format!("{prefix}.q_init"), c.q_init)?;
    c.momentum_on_precond = r.get_bool(&format!("{prefix}.momentum_on_precond"), c.momentum_on_precond)?;
    Ok(c)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut r = Reader::new(KvDoc::parse(text)?);
        let problem = parse_problem(&mut r)?;
        let mut optimizer = parse_optimizer(&mut r, "optimizer")?;
        let n_iters = r.get_u64("n_iters", 500)?;
        let seed = r.get_u64("seed", 0)?;
        optimizer.seed = seed;
        let out_dir = PathBuf::from(r.get("out_dir").unwrap_or_else(|| "psgd_out".into()));
        r.finish()?;
        optimizer.validate()?;
        Ok(RunConfig { problem, optimizer, n_iters, seed, out_dir })
    }

    /// The fully resolved configuration as a key-value document; parsing it
    /// back yields an identical `RunConfig`.
    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        push_problem(&mut doc, &self.problem);
        push_optimizer(&mut doc, "optimizer", &self.optimizer);
        doc.push_u64("n_iters", self.n_iters);
        doc.push_u64("seed", self.seed);
        doc.push("out_dir", self.out_dir.display().to_string());
        doc
    }
}

impl CompareConfig {
    pub fn parse(text: &str) -> Result<CompareConfig> {
        let mut r = Reader::new(KvDoc::parse(text)?);
        let problem = parse_problem(&mut r)?;
        let raw_names = r.get("compare.optimizers").unwrap_or_default();
        let names: Vec<String> = raw_names
            .split(',')
            .map(|t| t.trim().to_string())
            .filter(|t| !t.is_empty())
            .collect();
        if names.is_empty() {
            return Err(Error::BadConfig {
                field: "config",
                message: "key `compare.optimizers`: the grid needs at least one optimizer".into(),
            });
        }
        let seeds: Vec<u64> = match r.get("compare.seeds") {
            None => vec![0],
            Some(v) => v
                .split(',')
                .map(|t| {
                    t.trim().parse::<u64>().map_err(|_| Error::BadConfig {
                        field: "config",
                        message: format!("key `compare.seeds`: bad list `{v}`"),
                    })
                })
                .collect::<Result<Vec<_>>>()?,
        };
        if seeds.is_empty() {
            return Err(Error::BadConfig {
                field: "config",
                message: "key `compare.seeds`: need at least one seed".into(),
            });
        }
        let mut optimizers = Vec::with_capacity(names.len());
        for name in &names {
            if name == "compare" || name == "problem" {
                return Err(Error::BadConfig {
                    field: "config",
                    message: format!("key `compare.optimizers`: reserved name `{name}`"),
                });
            }
            optimizers.push((name.clone(), parse_optimizer(&mut r, name)?));
        }
        let n_iters = r.get_u64("n_iters", 500)?;
        let loss_threshold = r.get_f64("compare.loss_threshold", 1e-2)?;
        let out_dir = PathBuf::from(r.get("out_dir").unwrap_or_else(|| "psgd_out".into()));
        r.finish()?;
        for (_, c) in &optimizers {
            c.validate()?;
        }
        Ok(CompareConfig { problem, optimizers, seeds, n_iters, loss_threshold, out_dir })
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        push_problem(&mut doc, &self.problem);
        let names: Vec<&str> = self.optimizers.iter().map(|(n, _)| n.as_str()).collect();
        doc.push("compare.optimizers", names.join(","));
        doc.push(
            "compare.seeds",
            self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
        );
        doc.push_f64("compare.loss_threshold", self.loss_threshold);
        for (name, c) in &self.optimizers {
            push_optimizer(&mut doc, name, c);
        }
        doc.push_u64("n_iters", self.n_iters);
        doc.push("out_dir", self.out_dir.display().to_string());
        doc
    }
}

fn push_problem(doc: &mut KvDoc, p: &ProblemSpec) {
    match p {
        ProblemSpec::Rosenbrock => doc.push("problem.kind", "rosenbrock"),
        ProblemSpec::NoisyQuadratic { dim, sigma, seed } => {
            doc.push("problem.kind", "quadratic");
            doc.push_usize("problem.dim", *dim);
            doc.push_f64("problem.sigma", *sigma);
            doc.push_u64("problem.seed", *seed);
        }
        ProblemSpec::MlpClassifier { layers, n_samples, seed } => {
            doc.push("problem.kind", "mlp");
            doc.push(
                "problem.layers",
                layers.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
            );
            doc.push_usize("problem.n_samples", *n_samples);
            doc.push_u64("problem.seed", *seed);
        }
        ProblemSpec::TinyLstmLm { vocab, hidden, seq_len, seed } => {
            doc.push("problem.kind", "lstm");
            doc.push_usize("problem.vocab", *vocab);
            doc.push_usize("problem.hidden", *hidden);
            doc.push_usize("problem.seq_len", *seq_len);
            doc.push_u64("problem.seed", *seed);
        }
    }
}

fn push_optimizer(doc: &mut KvDoc, prefix: &str, c: &OptimizerConfig) {
    doc.push(format!("{prefix}.kind"), c.kind.name());
    doc.push_f64(format!("{prefix}.mu"), c.mu);
    doc.push_f64(format!("{prefix}.mu0"), c.mu0);
    doc.push_f64(format!("{prefix}.lambda"), c.lambda);
    doc.push_f64(format!("{prefix}.update_probability"), c.update_probability);
    match c.clip_threshold {
        None => doc.push(format!("{prefix}.clip_threshold"), "none"),
        Some(t) => doc.push_f64(format!("{prefix}.clip_threshold"), t),
    }
    doc.push_f64(format!("{prefix}.momentum_beta"), c.momentum_beta);
    doc.push_f64(format!("{prefix}.adam.beta1"), c.adam.beta1);
    doc.push_f64(format!("{prefix}.adam.beta2"), c.adam.beta2);
    doc.push_f64(format!("{prefix}.adam.epsilon"), c.adam.epsilon);
    doc.push_usize(format!("{prefix}.batch_size"), c.batch_size);
    doc.push(format!("{prefix}.unbiased_fisher"), if c.unbiased_fisher { "true" } else { "false" });
    doc.push_f64(format!("{prefix}.ema_factor_s"), c.ema_factor_s);
    doc.push_f64(format!("{prefix}.ema_factor_moment"), c.ema_factor_moment);
    doc.push(format!("{prefix}.group"), c.group.name());
    doc.push_f64(format!("{prefix}.q_init"), c.q_init);
    doc.push(
        format!("{prefix}.momentum_on_precond"),
        if c.momentum_on_precond { "true" } else { "false" },
    );
}
