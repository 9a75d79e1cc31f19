//! Optimizer loops: Newton-type and Fisher-type preconditioned SGD, their
//! closed-form diagonal special cases, and plain baselines.
//!
//! One iteration of the Newton-type loop evaluates the stochastic gradient,
//! draws `v ~ N(0, I)` and the Hessian-vector product `Ĥv`, steps the
//! parameters with the current `P = QᵀQ`, then updates `Q` by a normalized
//! relative-gradient step with `u = Ĥv`. The Fisher-type loop is the same
//! with `u = ĝ + λv`; nothing else differs. Parameters step before the
//! preconditioner updates. With `update_probability < 1` the `Q` step (and
//! the Newton type's HVP evaluation) runs only on gated iterations, trading
//! preconditioner freshness for per-iteration cost. Each parameter tensor
//! owns its `QFactor`; gradients of distinct tensors never mix.
//!
//! Any non-finite loss, gradient, or HVP aborts the step with the offending
//! iteration in the error. All randomness comes from one seeded stream per
//! optimizer instance, so runs replay bit for bit and checkpoints resume
//! exactly.
//!
//! One optimizer state is strictly sequential: steps never overlap, and the
//! preconditioner always updates after the parameters it just stepped.
//! Independent runs may execute concurrently; their streams never alias.

use crate::error::{Error, Result};
use crate::kv::KvDoc;
use crate::lie_groups::{GroupKind, QFactor};
use crate::matrix::Matrix;
use crate::problem::Problem;
use crate::rng::SeedStream;

/// Which update rule drives the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    Nesterov,
    Adam,
    /// Preconditioned SGD, `u = Ĥv` (needs Hessian-vector products).
    NewtonPsgd,
    /// Preconditioned SGD, `u = ĝ + λv` (gradients only).
    FisherPsgd,
    /// Closed-form diagonal Fisher preconditioner (Adam family without
    /// momentum): `P = diag(1 ⊘ √(ema(ĝ⊙ĝ) + λ²))`.
    DiagFisherClosed,
    /// Equilibration preconditioner from EMAs of `v⊙v` and `Ĥv⊙Ĥv`.
    EsgdDiag,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Momentum => "momentum",
            OptimizerKind::Nesterov => "nesterov",
            OptimizerKind::Adam => "adam",
            OptimizerKind::NewtonPsgd => "newton",
            OptimizerKind::FisherPsgd => "fisher",
            OptimizerKind::DiagFisherClosed => "diagfisher",
            OptimizerKind::EsgdDiag => "esgd",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "sgd" => OptimizerKind::Sgd,
            "momentum" => OptimizerKind::Momentum,
            "nesterov" => OptimizerKind::Nesterov,
            "adam" => OptimizerKind::Adam,
            "newton" => OptimizerKind::NewtonPsgd,
            "fisher" => OptimizerKind::FisherPsgd,
            "diagfisher" => OptimizerKind::DiagFisherClosed,
            "esgd" => OptimizerKind::EsgdDiag,
            other => {
                return Err(Error::BadConfig {
                    field: "optimizer.kind",
                    message: format!("unknown optimizer `{other}`"),
                })
            }
        })
    }

    /// True for the kinds that learn a `QFactor` per tensor.
    pub fn is_psgd(self) -> bool {
        matches!(self, OptimizerKind::NewtonPsgd | OptimizerKind::FisherPsgd)
    }
}

/// Adam moment settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// All step sizes, damping, clipping, update-probability, and seed settings
/// of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    /// Parameter step size μ. Normalized to (0, 1] for the Newton type.
    pub mu: f64,
    /// Preconditioner step size μ₀ in (0, 1).
    pub mu0: f64,
    /// Damping λ ≥ 0 (Fisher criterion and closed-form denominators).
    pub lambda: f64,
    /// Probability of running the preconditioner update on an iteration;
    /// 0 freezes the preconditioner.
    pub update_probability: f64,
    /// Global L2 clip for the step direction, if set.
    pub clip_threshold: Option<f64>,
    /// Momentum factor β for the momentum/nesterov baselines.
    pub momentum_beta: f64,
    pub adam: AdamParams,
    /// Samples per stochastic gradient, B.
    pub batch_size: usize,
    pub seed: u64,
    /// Fisher variant: replace ĝ with ĝ − s + s/√B and force λ = 0, making
    /// P²/B an unbiased inverse-Fisher estimate.
    pub unbiased_fisher: bool,
    /// EMA factor for the gradient mean s.
    pub ema_factor_s: f64,
    /// EMA factor for second-moment accumulators.
    pub ema_factor_moment: f64,
    /// Lie group for the PSGD kinds.
    pub group: GroupKind,
    /// Initial preconditioner scale: Q starts at q_init·I.
    pub q_init: f64,
    /// Apply the momentum EMA to the preconditioned gradient. Optional
    /// combination the PSGD loops accept; no convergence claim attached.
    pub momentum_on_precond: bool,
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind) -> Self {
        OptimizerConfig {
            kind,
            mu: 0.01,
            mu0: 0.01,
            lambda: 0.0,
            update_probability: 1.0,
            clip_threshold: None,
            momentum_beta: 0.9,
            adam: AdamParams::default(),
            batch_size: 32,
            seed: 0,
            unbiased_fisher: false,
            ema_factor_s: 0.9,
            ema_factor_moment: 0.99,
            group: GroupKind::UpperTriangular,
            q_init: 1.0,
            momentum_on_precond: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        fn bad(field: &'static str, message: String) -> Error {
            Error::BadConfig { field, message }
        }
        if !(self.mu > 0.0) {
            return Err(bad("optimizer.mu", format!("must be > 0, got {}", self.mu)));
        }
        if self.kind == OptimizerKind::NewtonPsgd && self.mu > 1.0 {
            return Err(bad("optimizer.mu", format!("Newton-type step size is normalized to (0,1], got {}", self.mu)));
        }
        if !(self.mu0 > 0.0 && self.mu0 < 1.0) {
            return Err(bad("optimizer.mu0", format!("must be in (0,1), got {}", self.mu0)));
        }
        if !(self.lambda >= 0.0) {
            return Err(bad("optimizer.lambda", format!("must be >= 0, got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.update_probability) {
            return Err(bad(
                "optimizer.update_probability",
                format!("must be in [0,1], got {}", self.update_probability),
            ));
        }
        if let Some(c) = self.clip_threshold {
            if !(c > 0.0) {
                return Err(bad("optimizer.clip_threshold", format!("must be > 0, got {c}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum_beta) {
            return Err(bad("optimizer.momentum_beta", format!("must be in [0,1), got {}", self.momentum_beta)));
        }
        for (name, b) in [("beta1", self.adam.beta1), ("beta2", self.adam.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(bad("optimizer.adam", format!("{name} must be in [0,1), got {b}")));
            }
        }
        if !(self.adam.epsilon > 0.0) {
            return Err(bad("optimizer.adam", format!("epsilon must be > 0, got {}", self.adam.epsilon)));
        }
        if self.batch_size == 0 {
            return Err(bad("optimizer.batch_size", "must be >= 1".into()));
        }
        for (name, e) in [("ema_factor_s", self.ema_factor_s), ("ema_factor_moment", self.ema_factor_moment)] {
            if !(e > 0.0 && e < 1.0) {
                return Err(bad("optimizer.ema", format!("{name} must be in (0,1), got {e}")));
            }
        }
        if !(self.q_init > 0.0) {
            return Err(bad("optimizer.q_init", format!("must be > 0, got {}", self.q_init)));
        }
        Ok(())
    }
}

/// Per-kind accumulator slots.
#[derive(Debug, Clone, PartialEq)]
enum StateSlots {
    Plain,
    Velocity(Vec<Matrix>),
    Adam { m: Vec<Matrix>, v: Vec<Matrix> },
    Psgd { q: Vec<QFactor>, momentum: Option<Vec<Matrix>> },
    DiagFisher { second: Vec<Matrix> },
    Esgd { num: Vec<Matrix>, den: Vec<Matrix> },
}

/// Mutable state of one optimizer run.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub theta: Vec<Matrix>,
    slots: StateSlots,
    /// EMA of the stochastic gradient (unbiased Fisher mode).
    s_ema: Option<Vec<Matrix>>,
    pub iteration: u64,
    precond_updates: u64,
    rng: SeedStream,
}

/// What one step reports to the trace.
#[derive(Debug, Clone, Copy)]
pub struct StepReport {
    pub loss: f64,
    pub grad_norm: f64,
    pub updated_precond: bool,
}

impl OptimizerState {
    /// Fresh state for a problem: initial parameters from the run seed,
    /// accumulators at zero, Q at `q_init·I`.
    pub fn init(problem: &dyn Problem, config: &OptimizerConfig) -> Result<Self> {
        config.validate()?;
        let theta = problem.init_params(config.seed);
        let shapes = problem.param_shapes();
        let zeros = || -> Vec<Matrix> { shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect() };
        let slots = match config.kind {
            OptimizerKind::Sgd => StateSlots::Plain,
            OptimizerKind::Momentum | OptimizerKind::Nesterov => StateSlots::Velocity(zeros()),
            OptimizerKind::Adam => StateSlots::Adam { m: zeros(), v: zeros() },
            OptimizerKind::NewtonPsgd | OptimizerKind::FisherPsgd => {
                let q = shapes
                    .iter()
                    .map(|&s| QFactor::init(config.group, s, config.q_init))
                    .collect::<Result<Vec<_>>>()?;
                let momentum = config.momentum_on_precond.then(zeros);
                StateSlots::Psgd { q, momentum }
            }
            OptimizerKind::DiagFisherClosed => StateSlots::DiagFisher { second: zeros() },
            OptimizerKind::EsgdDiag => StateSlots::Esgd { num: zeros(), den: zeros() },
        };
        let s_ema = (config.kind == OptimizerKind::FisherPsgd && config.unbiased_fisher).then(zeros);
        Ok(OptimizerState {
            theta,
            slots,
            s_ema,
            iteration: 0,
            precond_updates: 0,
            rng: SeedStream::new(config.seed, "optimizer"),
        })
    }

    pub fn precond_updates(&self) -> u64 {
        self.precond_updates
    }

    /// The per-tensor preconditioner factors, when the kind learns them.
    pub fn q_factors(&self) -> Option<&[QFactor]> {
        match &self.slots {
            StateSlots::Psgd { q, .. } => Some(q),
            _ => None,
        }
    }

    /// Diagonal of the effective preconditioner for the closed-form kinds.
    pub fn closed_form_diag(&self, config: &OptimizerConfig) -> Option<Vec<Matrix>> {
        match &self.slots {
            StateSlots::DiagFisher { second } => Some(
                second
                    .iter()
                    .map(|m| m.map(|x| 1.0 / (x + config.lambda * config.lambda).sqrt()))
                    .collect(),
            ),
            StateSlots::Esgd { num, den } => Some(
                num.iter()
                    .zip(den)
                    .map(|(n, d)| n.zip_map(d, |a, b| (a / b.max(ESGD_FLOOR)).sqrt()))
                    .collect(),
            ),
            _ => None,
        }
    }

    /// Executes one optimizer step, advancing parameters, accumulators, and
    /// the iteration counter.
    pub fn step(&mut self, problem: &dyn Problem, config: &OptimizerConfig) -> Result<StepReport> {
        match config.kind {
            OptimizerKind::Sgd | OptimizerKind::Momentum | OptimizerKind::Nesterov | OptimizerKind::Adam => {
                self.baseline_step(problem, config)
            }
            OptimizerKind::NewtonPsgd => self.psgd_step(problem, config, USource::Newton),
            OptimizerKind::FisherPsgd => self.psgd_step(problem, config, USource::Fisher),
            OptimizerKind::DiagFisherClosed => self.diag_fisher_step(problem, config),
            OptimizerKind::EsgdDiag => self.esgd_step(problem, config),
        }
    }

    fn draw_v(&mut self, shapes: &[(usize, usize)]) -> Vec<Matrix> {
        shapes
            .iter()
            .map(|&(r, c)| {
                let mut m = Matrix::zeros(r, c);
                self.rng.fill_standard_normal(m.as_mut_slice());
                m
            })
            .collect()
    }

    fn apply_step(&mut self, mut direction: Vec<Matrix>, config: &OptimizerConfig) {
        if let Some(tau) = config.clip_threshold {
            direction = clip_preconditioned(direction, tau);
        }
        for (t, d) in self.theta.iter_mut().zip(&direction) {
            *t = t.sub(&d.scale(config.mu));
        }
        self.iteration += 1;
    }

    fn baseline_step(&mut self, problem: &dyn Problem, config: &OptimizerConfig) -> Result<StepReport> {
        let batch = problem.make_batch(self.iteration, config.batch_size);
        let (loss, grads) = problem.loss_and_gradient(&self.theta, &batch)?;
        self.guard_finite(loss, &grads, "gradient")?;
        let grad_norm = global_norm(&grads);
        let beta = config.momentum_beta;
        let direction = match &mut self.slots {
            StateSlots::Plain => grads,
            StateSlots::Velocity(m) => {
                for (mi, gi) in m.iter_mut().zip(&grads) {
                    *mi = mi.scale(beta).add(&gi.scale(1.0 - beta));
                }
                match config.kind {
                    OptimizerKind::Momentum => m.clone(),
                    // Nesterov look-ahead on the averaged velocity.
                    _ => m
                        .iter()
                        .zip(&grads)
                        .map(|(mi, gi)| mi.scale(beta).add(&gi.scale(1.0 - beta)))
                        .collect(),
                }
            }
            StateSlots::Adam { m, v } => {
                let t = (self.iteration + 1) as i32;
                let (b1, b2, eps) = (config.adam.beta1, config.adam.beta2, config.adam.epsilon);
                let mc = 1.0 - b1.powi(t);
                let vc = 1.0 - b2.powi(t);
                let mut dir = Vec::with_capacity(grads.len());
                for ((mi, vi), gi) in m.iter_mut().zip(v.iter_mut()).zip(&grads) {
                    *mi = mi.scale(b1).add(&gi.scale(1.0 - b1));
                    *vi = vi.scale(b2).add(&gi.map(|x| x * x).scale(1.0 - b2));
                    dir.push(mi.zip_map(vi, |mh, vh| (mh / mc) / ((vh / vc).sqrt() + eps)));
                }
                dir
            }
            _ => unreachable!("baseline kinds only"),
        };
        self.apply_step(direction, config);
        Ok(StepReport { loss, grad_norm, updated_precond: false })
    }

    fn psgd_step(&mut self, problem: &dyn Problem, config: &OptimizerConfig, source: USource) -> Result<StepReport> {
        let batch = problem.make_batch(self.iteration, config.batch_size);
        // v and the update gate are drawn every iteration, before any
        // evaluation, so the random stream never depends on what the step
        // ends up computing.
        let v = self.draw_v(problem.param_shapes());
        let gate = self.rng.uniform();
        let updated = gate < config.update_probability;

        // The Hessian-vector product is only evaluated on iterations that
        // update the preconditioner; skipped updates cost one gradient.
        let (loss, grads, u) = match source {
            USource::Newton => {
                if updated {
                    let (loss, grads, hv) = problem.loss_grad_hvp(&self.theta, &batch, &v)?;
                    self.guard_finite(loss, &hv, "hessian-vector product")?;
                    (loss, grads, Some(hv))
                } else {
                    let (loss, grads) = problem.loss_and_gradient(&self.theta, &batch)?;
                    (loss, grads, None)
                }
            }
            USource::Fisher => {
                let (loss, grads) = problem.loss_and_gradient(&self.theta, &batch)?;
                let u = if !updated {
                    None
                } else if config.unbiased_fisher {
                    // u = ĝ − s + s/√B with the pre-update s; λ is forced to
                    // zero in this mode.
                    let s_prev = self.s_ema.as_ref().expect("unbiased fisher state");
                    let scale = 1.0 / (config.batch_size as f64).sqrt() - 1.0;
                    Some(grads.iter().zip(s_prev).map(|(g, s)| g.add(&s.scale(scale))).collect())
                } else {
                    Some(
                        grads
                            .iter()
                            .zip(&v)
                            .map(|(g, vi)| g.add(&vi.scale(config.lambda)))
                            .collect::<Vec<Matrix>>(),
                    )
                };
                // s tracks the gradient every step regardless of the gate.
                if let Some(s) = self.s_ema.as_mut() {
                    let rho = config.ema_factor_s;
                    for (si, gi) in s.iter_mut().zip(&grads) {
                        *si = si.scale(rho).add(&gi.scale(1.0 - rho));
                    }
                }
                (loss, grads, u)
            }
        };
        self.guard_finite(loss, &grads, "gradient")?;
        let grad_norm = global_norm(&grads);

        // Parameters move under the current Q; the preconditioner update
        // comes after.
        let StateSlots::Psgd { q, momentum } = &mut self.slots else {
            unreachable!("psgd kinds only")
        };
        let mut direction = Vec::with_capacity(grads.len());
        for (qf, g) in q.iter().zip(&grads) {
            direction.push(qf.precondition(g)?);
        }
        if let Some(m) = momentum {
            let beta = config.momentum_beta;
            for (mi, di) in m.iter_mut().zip(&direction) {
                *mi = mi.scale(beta).add(&di.scale(1.0 - beta));
            }
            direction = m.clone();
        }

        if let Some(u) = u {
            self.guard_finite(loss, &u, "preconditioner input")?;
            let StateSlots::Psgd { q, .. } = &mut self.slots else { unreachable!() };
            for ((qf, ut), vt) in q.iter_mut().zip(&u).zip(&v) {
                let r = qf.relative_gradient(ut, vt)?;
                qf.update_q(&r, config.mu0)?;
            }
            self.precond_updates += 1;
        }

        self.apply_step(direction, config);
        Ok(StepReport { loss, grad_norm, updated_precond: updated })
    }

    fn diag_fisher_step(&mut self, problem: &dyn Problem, config: &OptimizerConfig) -> Result<StepReport> {
        let batch = problem.make_batch(self.iteration, config.batch_size);
        let (loss, grads) = problem.loss_and_gradient(&self.theta, &batch)?;
        self.guard_finite(loss, &grads, "gradient")?;
        let grad_norm = global_norm(&grads);
        let StateSlots::DiagFisher { second } = &mut self.slots else {
            unreachable!("diag fisher only")
        };
        let rho = config.ema_factor_moment;
        let lam2 = config.lambda * config.lambda;
        let mut direction = Vec::with_capacity(grads.len());
        for (acc, g) in second.iter_mut().zip(&grads) {
            *acc = acc.scale(rho).add(&g.map(|x| x * x).scale(1.0 - rho));
            direction.push(g.zip_map(acc, |gi, ai| gi / (ai + lam2).sqrt()));
        }
        self.apply_step(direction, config);
        Ok(StepReport { loss, grad_norm, updated_precond: true })
    }

    fn esgd_step(&mut self, problem: &dyn Problem, config: &OptimizerConfig) -> Result<StepReport> {
        let batch = problem.make_batch(self.iteration, config.batch_size);
        let v = self.draw_v(problem.param_shapes());
        let (loss, grads, hv) = problem.loss_grad_hvp(&self.theta, &batch, &v)?;
        self.guard_finite(loss, &grads, "gradient")?;
        self.guard_finite(loss, &hv, "hessian-vector product")?;
        let grad_norm = global_norm(&grads);
        let StateSlots::Esgd { num, den } = &mut self.slots else { unreachable!("esgd only") };
        let rho = config.ema_factor_moment;
        let mut direction = Vec::with_capacity(grads.len());
        for (((n, d), vi), (hvi, g)) in num.iter_mut().zip(den.iter_mut()).zip(&v).zip(hv.iter().zip(&grads)) {
            *n = n.scale(rho).add(&vi.map(|x| x * x).scale(1.0 - rho));
            *d = d.scale(rho).add(&hvi.map(|x| x * x).scale(1.0 - rho));
            let p = n.zip_map(d, |a, b| (a / b.max(ESGD_FLOOR)).sqrt());
            direction.push(p.zip_map(g, |pi, gi| pi * gi));
        }
        self.apply_step(direction, config);
        Ok(StepReport { loss, grad_norm, updated_precond: true })
    }

    fn guard_finite(&self, loss: f64, tensors: &[Matrix], what: &'static str) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::NonFiniteAbort { iteration: self.iteration, what: "loss" });
        }
        if tensors.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFiniteAbort { iteration: self.iteration, what });
        }
        Ok(())
    }

    /// Serializes the full state (θ, Q factors, accumulators, iteration,
    /// RNG position) for exact resume.
    pub fn to_kv(&self, doc: &mut KvDoc) {
        doc.push_u64("state.iteration", self.iteration);
        doc.push_u64("state.precond_updates", self.precond_updates);
        doc.push("state.rng.seed", hex_encode(&self.rng.seed_bytes()));
        doc.push("state.rng.pos", self.rng.word_pos().to_string());
        push_tensors(doc, "state.theta", &self.theta);
        if let Some(s) = &self.s_ema {
            push_tensors(doc, "state.s_ema", s);
        }
        match &self.slots {
            StateSlots::Plain => doc.push("state.slots", "plain"),
            StateSlots::Velocity(m) => {
                doc.push("state.slots", "velocity");
                push_tensors(doc, "state.velocity", m);
            }
            StateSlots::Adam { m, v } => {
                doc.push("state.slots", "adam");
                push_tensors(doc, "state.adam_m", m);
                push_tensors(doc, "state.adam_v", v);
            }
            StateSlots::Psgd { q, momentum } => {
                doc.push("state.slots", "psgd");
                doc.push_usize("state.q.count", q.len());
                for (i, qf) in q.iter().enumerate() {
                    qf.to_kv(&format!("state.q.{i}"), doc);
                }
                if let Some(m) = momentum {
                    push_tensors(doc, "state.momentum", m);
                }
            }
            StateSlots::DiagFisher { second } => {
                doc.push("state.slots", "diagfisher");
                push_tensors(doc, "state.second", second);
            }
            StateSlots::Esgd { num, den } => {
                doc.push("state.slots", "esgd");
                push_tensors(doc, "state.num", num);
                push_tensors(doc, "state.den", den);
            }
        }
    }

    /// Restores a state written by [`OptimizerState::to_kv`].
    pub fn from_kv(doc: &KvDoc) -> Result<Self> {
        let iteration = doc.get_u64("state.iteration")?;
        let precond_updates = doc.get_u64("state.precond_updates")?;
        let seed = hex_decode(doc.require("state.rng.seed")?)?;
        let pos: u128 = doc
            .require("state.rng.pos")?
            .parse()
            .map_err(|_| Error::Parse { line: 0, message: "bad rng position".into() })?;
        let theta = get_tensors(doc, "state.theta")?;
        let s_ema = if doc.get("state.s_ema.count").is_some() {
            Some(get_tensors(doc, "state.s_ema")?)
        } else {
            None
        };
        let slots = match doc.require("state.slots")? {
            "plain" => StateSlots::Plain,
            "velocity" => StateSlots::Velocity(get_tensors(doc, "state.velocity")?),
            "adam" => StateSlots::Adam {
                m: get_tensors(doc, "state.adam_m")?,
                v: get_tensors(doc, "state.adam_v")?,
            },
            "psgd" => {
                let count = doc.get_usize("state.q.count")?;
                let q = (0..count)
                    .map(|i| QFactor::from_kv(&format!("state.q.{i}"), doc))
                    .collect::<Result<Vec<_>>>()?;
                let momentum = if doc.get("state.momentum.count").is_some() {
                    Some(get_tensors(doc, "state.momentum")?)
                } else {
                    None
                };
                StateSlots::Psgd { q, momentum }
            }
            "diagfisher" => StateSlots::DiagFisher { second: get_tensors(doc, "state.second")? },
            "esgd" => StateSlots::Esgd {
                num: get_tensors(doc, "state.num")?,
                den: get_tensors(doc, "state.den")?,
            },
            other => {
                return Err(Error::Parse { line: 0, message: format!("unknown slots kind `{other}`") })
            }
        };
        Ok(OptimizerState {
            theta,
            slots,
            s_ema,
            iteration,
            precond_updates,
            rng: SeedStream::restore(seed, pos),
        })
    }
}

enum USource {
    Newton,
    Fisher,
}

/// Denominator floor for the equilibration preconditioner; only exactly flat
/// directions ever reach it.
const ESGD_FLOOR: f64 = 1e-30;

/// Scales the step direction so its global L2 norm is at most `tau`:
/// `g · min(1, τ/‖g‖₂)`.
pub fn clip_preconditioned(g: Vec<Matrix>, tau: f64) -> Vec<Matrix> {
    let norm = global_norm(&g);
    if norm <= tau || norm == 0.0 {
        return g;
    }
    let scale = tau / norm;
    g.into_iter().map(|m| m.scale(scale)).collect()
}

/// L2 norm over all entries of all tensors.
pub fn global_norm(tensors: &[Matrix]) -> f64 {
    tensors
        .iter()
        .map(|m| m.as_slice().iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

fn push_tensors(doc: &mut KvDoc, prefix: &str, tensors: &[Matrix]) {
    doc.push_usize(format!("{prefix}.count"), tensors.len());
    for (i, t) in tensors.iter().enumerate() {
        doc.push(format!("{prefix}.{i}.shape"), format!("{},{}", t.rows(), t.cols()));
        doc.push_f64_list(format!("{prefix}.{i}.data"), t.as_slice());
    }
}

fn get_tensors(doc: &KvDoc, prefix: &str) -> Result<Vec<Matrix>> {
    let count = doc.get_usize(&format!("{prefix}.count"))?;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let shape = doc.require(&format!("{prefix}.{i}.shape"))?;
        let mut it = shape.split(',');
        let parse = |t: Option<&str>| -> Result<usize> {
            t.and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::Parse { line: 0, message: format!("bad shape `{shape}`") })
        };
        let (r, c) = (parse(it.next())?, parse(it.next())?);
        let data = doc.get_f64_list(&format!("{prefix}.{i}.data"))?;
        if data.len() != r * c {
            return Err(Error::InvalidData { expected: r * c, got: data.len() });
        }
        out.push(Matrix::from_vec_unchecked(r, c, data));
    }
    Ok(out)
}

fn hex_encode(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

fn hex_decode(s: &str) -> Result<[u8; 32]> {
    if s.len() != 64 {
        return Err(Error::Parse { line: 0, message: "rng seed must be 64 hex chars".into() });
    }
    let mut out = [0u8; 32];
    for (i, chunk) in s.as_bytes().chunks_exact(2).enumerate() {
        let hi = (chunk[0] as char).to_digit(16);
        let lo = (chunk[1] as char).to_digit(16);
        match (hi, lo) {
            (Some(h), Some(l)) => out[i] = (h * 16 + l) as u8,
            _ => return Err(Error::Parse { line: 0, message: "bad hex in rng seed".into() }),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::Batch;

    /// f = 0.5·θᵀθ, exact gradient θ and Hessian I. Deterministic.
    struct Quad {
        shape: [(usize, usize); 1],
        theta0: Vec<f64>,
    }

    impl Quad {
        fn new(theta0: &[f64]) -> Self {
            Quad { shape: [(theta0.len(), 1)], theta0: theta0.to_vec() }
        }
    }

    impl Problem for Quad {
        fn name(&self) -> &str {
            "quad"
        }
        fn param_shapes(&self) -> &[(usize, usize)] {
            &self.shape
        }
        fn init_params(&self, _seed: u64) -> Vec<Matrix> {
            vec![Matrix::from_vec_unchecked(self.theta0.len(), 1, self.theta0.clone())]
        }
        fn make_batch(&self, _iteration: u64, _batch_size: usize) -> Batch {
            Vec::new()
        }
        fn loss(&self, params: &[Matrix], _batch: &Batch) -> crate::error::Result<f64> {
            Ok(0.5 * params[0].as_slice().iter().map(|x| x * x).sum::<f64>())
        }
        fn loss_and_gradient(
            &self,
            params: &[Matrix],
            batch: &Batch,
        ) -> crate::error::Result<(f64, Vec<Matrix>)> {
            Ok((self.loss(params, batch)?, vec![params[0].clone()]))
        }
        fn hvp(&self, _p: &[Matrix], _b: &Batch, v: &[Matrix]) -> crate::error::Result<Vec<Matrix>> {
            Ok(v.to_vec())
        }
        fn full_loss(&self, params: &[Matrix]) -> crate::error::Result<f64> {
            self.loss(params, &Vec::new())
        }
    }

    /// Fixed diagonal Hessian, loss 0.5·θᵀHθ; used for preconditioner
    /// fixed-point checks with a tiny μ.
    struct DiagQuad {
        shape: [(usize, usize); 1],
        h: Vec<f64>,
    }

    impl Problem for DiagQuad {
        fn name(&self) -> &str {
            "diagquad"
        }
        fn param_shapes(&self) -> &[(usize, usize)] {
            &self.shape
        }
        fn init_params(&self, _seed: u64) -> Vec<Matrix> {
            vec![Matrix::zeros(self.h.len(), 1)]
        }
        fn make_batch(&self, _i: u64, _b: usize) -> Batch {
            Vec::new()
        }
        fn loss(&self, params: &[Matrix], _batch: &Batch) -> crate::error::Result<f64> {
            Ok(0.5
                * params[0]
                    .as_slice()
                    .iter()
                    .zip(&self.h)
                    .map(|(x, h)| h * x * x)
                    .sum::<f64>())
        }
        fn loss_and_gradient(
            &self,
            params: &[Matrix],
            batch: &Batch,
        ) -> crate::error::Result<(f64, Vec<Matrix>)> {
            let g = Matrix::from_fn(self.h.len(), 1, |i, _| self.h[i] * params[0].get(i, 0));
            Ok((self.loss(params, batch)?, vec![g]))
        }
        fn hvp(&self, _p: &[Matrix], _b: &Batch, v: &[Matrix]) -> crate::error::Result<Vec<Matrix>> {
            Ok(vec![Matrix::from_fn(self.h.len(), 1, |i, _| self.h[i] * v[0].get(i, 0))])
        }
        fn full_loss(&self, params: &[Matrix]) -> crate::error::Result<f64> {
            self.loss(params, &Vec::new())
        }
    }

    /// Gradient fixed at `g` for iterations < switch, zero afterwards.
    struct PhasedGrad {
        shape: [(usize, usize); 1],
        g: Vec<f64>,
        switch: u64,
    }

    impl Problem for PhasedGrad {
        fn name(&self) -> &str {
            "phased"
        }
        fn param_shapes(&self) -> &[(usize, usize)] {
            &self.shape
        }
        fn init_params(&self, _seed: u64) -> Vec<Matrix> {
            vec![Matrix::zeros(self.g.len(), 1)]
        }
        fn make_batch(&self, iteration: u64, _b: usize) -> Batch {
            vec![Matrix::from_vec_unchecked(1, 1, vec![iteration as f64])]
        }
        fn loss(&self, _p: &[Matrix], _batch: &Batch) -> crate::error::Result<f64> {
            Ok(0.0)
        }
        fn loss_and_gradient(
            &self,
            _params: &[Matrix],
            batch: &Batch,
        ) -> crate::error::Result<(f64, Vec<Matrix>)> {
            let iter = batch[0].get(0, 0) as u64;
            let on = iter < self.switch;
            let g = Matrix::from_fn(self.g.len(), 1, |i, _| if on { self.g[i] } else { 0.0 });
            Ok((0.0, vec![g]))
        }
        fn hvp(&self, _p: &[Matrix], _b: &Batch, v: &[Matrix]) -> crate::error::Result<Vec<Matrix>> {
            Ok(vec![Matrix::zeros(v[0].rows(), 1)])
        }
        fn full_loss(&self, _params: &[Matrix]) -> crate::error::Result<f64> {
            Ok(0.0)
        }
    }

    /// Wraps a problem, overriding the HVP with `ĝ + λ·v`; for the
    /// Newton-vs-Fisher structural identity.
    struct RiggedHvp<P: Problem> {
        inner: P,
        lambda: f64,
    }

    impl<P: Problem> Problem for RiggedHvp<P> {
        fn name(&self) -> &str {
            "rigged"
        }
        fn param_shapes(&self) -> &[(usize, usize)] {
            self.inner.param_shapes()
        }
        fn init_params(&self, seed: u64) -> Vec<Matrix> {
            self.inner.init_params(seed)
        }
        fn make_batch(&self, i: u64, b: usize) -> Batch {
            self.inner.make_batch(i, b)
        }
        fn loss(&self, p: &[Matrix], batch: &Batch) -> crate::error::Result<f64> {
            self.inner.loss(p, batch)
        }
        fn loss_and_gradient(&self, p: &[Matrix], batch: &Batch) -> crate::error::Result<(f64, Vec<Matrix>)> {
            self.inner.loss_and_gradient(p, batch)
        }
        fn hvp(&self, p: &[Matrix], batch: &Batch, v: &[Matrix]) -> crate::error::Result<Vec<Matrix>> {
            let (_, g) = self.inner.loss_and_gradient(p, batch)?;
            Ok(g.iter().zip(v).map(|(gi, vi)| gi.add(&vi.scale(self.lambda))).collect())
        }
        fn full_loss(&self, p: &[Matrix]) -> crate::error::Result<f64> {
            self.inner.full_loss(p)
        }
    }

    fn theta_flat(state: &OptimizerState) -> Vec<f64> {
        state.theta.iter().flat_map(|m| m.as_slice().to_vec()).collect()
    }

    #[test]
    fn newton_step_on_identity_hessian_reaches_zero_in_one_step() {
        let problem = Quad::new(&[3.0, -4.0]);
        let mut config = OptimizerConfig::new(OptimizerKind::NewtonPsgd);
        config.group = GroupKind::Diagonal;
        config.q_init = 1.0;
        config.mu = 1.0;
        config.mu0 = 0.01;
        let mut state = OptimizerState::init(&problem, &config).unwrap();
        state.step(&problem, &config).unwrap();
        assert_eq!(theta_flat(&state), vec![0.0, 0.0]);
    }

    #[test]
    fn zero_update_probability_freezes_q() {
        let problem = Quad::new(&[1.0, 2.0, 3.0]);
        let mut config = OptimizerConfig::new(OptimizerKind::NewtonPsgd);
        config.group = GroupKind::UpperTriangular;
        config.update_probability = 0.0;
        config.mu = 0.1;
        let mut state = OptimizerState::init(&problem, &config).unwrap();
        let q0 = state.q_factors().unwrap().to_vec();
        for _ in 0..20 {
            state.step(&problem, &config).unwrap();
        }
        assert_eq!(state.q_factors().unwrap(), &q0[..]);
        assert_eq!(state.precond_updates(), 0);
    }

    /// Zero-mean stationary gradients with per-entry scales `scale`.
    struct GaussianGrad {
        shape: [(usize, usize); 1],
        scale: Vec<f64>,
        seed: u64,
    }

    impl Problem for GaussianGrad {
        fn name(&self) -> &str {
            "gaussgrad"
        }
        fn param_shapes(&self) -> &[(usize, usize)] {
            &self.shape
        }
        fn init_params(&self, _s: u64) -> Vec<Matrix> {
            vec![Matrix::zeros(self.scale.len(), 1)]
        }
        fn make_batch(&self, iteration: u64, _b: usize) -> Batch {
            let mut s = crate::rng::SeedStream::new(self.seed ^ iteration.wrapping_mul(0x9e37_79b9_7f4a_7c15), "batch");
            vec![Matrix::from_fn(self.scale.len(), 1, |i, _| self.scale[i] * s.standard_normal())]
        }
        fn loss(&self, _p: &[Matrix], _b: &Batch) -> crate::error::Result<f64> {
            Ok(0.0)
        }
        fn loss_and_gradient(&self, _p: &[Matrix], batch: &Batch) -> crate::error::Result<(f64, Vec<Matrix>)> {
            Ok((0.0, vec![batch[0].clone()]))
        }
        fn hvp(&self, _p: &[Matrix], _b: &Batch, v: &[Matrix]) -> crate::error::Result<Vec<Matrix>> {
            Ok(v.to_vec())
        }
        fn full_loss(&self, _p: &[Matrix]) -> crate::error::Result<f64> {
            Ok(0.0)
        }
    }

    #[test]
    fn fisher_reciprocal_magnitudes_on_stationary_gradients() {
        // ĝ stationary with E[ĝĝᵀ] = diag(9, 16), λ = 0: the diagonal
        // fixed point is P = diag(1/3, 1/4), and preconditioning the
        // representative gradient (3, 4) yields (1, 1).
        let problem = GaussianGrad { shape: [(2, 1)], scale: vec![3.0, 4.0], seed: 19 };
        let mut config = OptimizerConfig::new(OptimizerKind::FisherPsgd);
        config.group = GroupKind::Diagonal;
        config.mu = 1e-9;
        config.lambda = 0.0;
        config.seed = 11;
        let mut state = OptimizerState::init(&problem, &config).unwrap();
        for i in 0..40_000u32 {
            // μ₀ decays 0.1 → 0.001 for a tight final estimate.
            config.mu0 = 0.1 * (0.01f64).powf(i as f64 / 40_000.0);
            state.step(&problem, &config).unwrap();
        }
        let p = state.q_factors().unwrap()[0].dense_p().unwrap();
        assert!((p.get(0, 0) - 1.0 / 3.0).abs() <= 0.05 / 3.0, "p00 {}", p.get(0, 0));
        assert!((p.get(1, 1) - 1.0 / 4.0).abs() <= 0.05 / 4.0, "p11 {}", p.get(1, 1));
        let g = Matrix::from_vec_unchecked(2, 1, vec![3.0, 4.0]);
        let pg = state.q_factors().unwrap()[0].precondition(&g).unwrap();
        assert!((pg.get(0, 0) - 1.0).abs() < 0.06 && (pg.get(1, 0) - 1.0).abs() < 0.06);
    }

    #[test]
    fn fisher_at_stationary_point_converges_to_identity_over_lambda() {
        // ĝ = 0 and λ > 0: u = λv, so P converges to (λ²I)^{-1/2} = I/λ.
        let lambda = 2.0;
        let problem = PhasedGrad { shape: [(2, 1)], g: vec![0.0, 0.0], switch: 0 };
        let mut config = OptimizerConfig::new(OptimizerKind::FisherPsgd);
        config.group = GroupKind::Diagonal;
        config.mu = 1e-9;
        config.lambda = lambda;
        config.seed = 3;
        let mut state = OptimizerState::init(&problem, &config).unwrap();
        for i in 0..30_000u32 {
            config.mu0 = 0.1 * (0.01f64).powf(i as f64 / 30_000.0);
            state.step(&problem, &config).unwrap();
        }
        let p = state.q_factors().unwrap()[0].dense_p().unwrap();
        for i in 0..2 {
            assert!((p.get(i, i) - 0.5).abs() <= 0.015, "p{i}{i} = {}", p.get(i, i));
        }
    }

    #[test]
    fn newton_and_fisher_steps_are_identical_with_injected_u() {
        // A problem whose HVP returns ĝ + λv makes the Newton loop compute
        // exactly the Fisher u; the trajectories must then be bit-identical.
        let lambda = 0.7;
        let problem = RiggedHvp { inner: Quad::new(&[1.0, -2.0, 0.5]), lambda };
        let mut config = OptimizerConfig::new(OptimizerKind::NewtonPsgd);
        config.group = GroupKind::UpperTriangular;
        config.mu = 0.05;
        config.mu0 = 0.05;
        config.lambda = lambda;
        config.seed = 42;
        let mut newton = OptimizerState::init(&problem, &config).unwrap();
        let mut fisher_cfg = config.clone();
        fisher_cfg.kind = OptimizerKind::FisherPsgd;
        let mut fisher = OptimizerState::init(&problem, &fisher_cfg).unwrap();
        for _ in 0..50 {
            newton.step(&problem, &config).unwrap();
            fisher.step(&problem, &fisher_cfg).unwrap();
        }
        assert_eq!(theta_flat(&newton), theta_flat(&fisher));
        assert_eq!(newton.q_factors().unwrap(), fisher.q_factors().unwrap());
    }

    #[test]
    fn closed_form_diag_fisher_reaches_reciprocal_magnitudes() {
        let problem = PhasedGrad { shape: [(2, 1)], g: vec![3.0, 4.0], switch: u64::MAX };
        let mut config = OptimizerConfig::new(OptimizerKind::DiagFisherClosed);
        config.mu = 1e-9;
        config.lambda = 0.0;
        config.ema_factor_moment = 0.99;
        let mut state = OptimizerState::init(&problem, &config).unwrap();
        for _ in 0..2000 {
            state.step(&problem, &config).unwrap();
        }
        let p = &state.closed_form_diag(&config).unwrap()[0];
        assert!((p.get(0, 0) - 1.0 / 3.0).abs() <= 1e-4);
        assert!((p.get(1, 0) - 1.0 / 4.0).abs() <= 1e-4);
    }

    #[test]
    fn large_lambda_kills_the_closed_form_step() {
        let problem = PhasedGrad { shape: [(2, 1)], g: vec![3.0, 4.0], switch: u64::MAX };
        let mut config = OptimizerConfig::new(OptimizerKind::DiagFisherClosed);
        config.mu = 0.1;
        config.lambda = 1e9;
        let mut state = OptimizerState::init(&problem, &config).unwrap();
        state.step(&problem, &config).unwrap();
        let moved: f64 = theta_flat(&state).iter().map(|x| x.abs()).sum();
        assert!(moved <= 1e-9, "step should vanish under huge damping, moved {moved}");
    }

    #[test]
    fn esgd_matches_absolute_curvature_on_diagonal_hessian() {
        // H = diag(2, −3): E[Ĥv⊙Ĥv] = (4, 9), so P → diag(1/2, 1/3).
        let problem = DiagQuad { shape: [(2, 1)], h: vec![2.0, -3.0] };
        let mut config = OptimizerConfig::new(OptimizerKind::EsgdDiag);
        config.mu = 1e-9;
        config.ema_factor_moment = 0.999;
        config.seed = 7;
        let mut state = OptimizerState::init(&problem, &config).unwrap();
        for _ in 0..20_000 {
            state.step(&problem, &config).unwrap();
        }
        let p = &state.closed_form_diag(&config).unwrap()[0];
        assert!((p.get(0, 0) - 0.5).abs() <= 0.02, "p0 {}", p.get(0, 0));
        assert!((p.get(1, 0) - 1.0 / 3.0).abs() <= 0.015, "p1 {}", p.get(1, 0));

        // H = I gives P = I.
        let problem = DiagQuad { shape: [(2, 1)], h: vec![1.0, 1.0] };
        let mut state = OptimizerState::init(&problem, &config).unwrap();
        for _ in 0..20_000 {
            state.step(&problem, &config).unwrap();
        }
        let p = &state.closed_form_diag(&config).unwrap()[0];
        assert!((p.get(0, 0) - 1.0).abs() <= 0.03 && (p.get(1, 0) - 1.0).abs() <= 0.03);
    }

    #[test]
    fn sgd_hand_step() {
        let problem = Quad::new(&[1.0]);
        let mut config = OptimizerConfig::new(OptimizerKind::Sgd);
        config.mu = 0.002;
        let mut state = OptimizerState::init(&problem, &config).unwrap();
        state.step(&problem, &config).unwrap();
        assert_eq!(theta_flat(&state), vec![0.998]);
    }

    #[test]
    fn momentum_velocity_decays_geometrically_under_zero_gradient() {
        let problem = PhasedGrad { shape: [(1, 1)], g: vec![1.0], switch: 5 };
        let mut config = OptimizerConfig::new(OptimizerKind::Momentum);
        config.mu = 0.01;
        config.momentum_beta = 0.9;
        let mut state = OptimizerState::init(&problem, &config).unwrap();
        for _ in 0..5 {
            state.step(&problem, &config).unwrap();
        }
        let v5 = match &state.slots {
            StateSlots::Velocity(m) => m[0].get(0, 0),
            _ => unreachable!(),
        };
        assert!(v5 > 0.0);
        for k in 1..=10 {
            state.step(&problem, &config).unwrap();
            let v = match &state.slots {
                StateSlots::Velocity(m) => m[0].get(0, 0),
                _ => unreachable!(),
            };
            let expect = v5 * 0.9f64.powi(k);
            assert!((v - expect).abs() <= 1e-12 * expect.abs().max(1.0));
        }
    }

    #[test]
    fn adam_first_step_magnitude_is_mu() {
        for scale in [1e-6, 1.0, 1e6] {
            let problem = PhasedGrad { shape: [(2, 1)], g: vec![scale, -scale], switch: u64::MAX };
            let mut config = OptimizerConfig::new(OptimizerKind::Adam);
            config.mu = 0.003;
            let mut state = OptimizerState::init(&problem, &config).unwrap();
            state.step(&problem, &config).unwrap();
            for x in theta_flat(&state) {
                assert!((x.abs() - 0.003).abs() <= 0.003 * 1e-1, "got {x}");
            }
        }
    }

    #[test]
    fn clip_examples() {
        let g = vec![Matrix::from_vec_unchecked(2, 1, vec![3.0, 4.0])];
        let same = clip_preconditioned(g.clone(), 10.0);
        assert_eq!(same[0].as_slice(), &[3.0, 4.0]);
        let halved = clip_preconditioned(g.clone(), 2.5);
        assert_eq!(halved[0].as_slice(), &[1.5, 2.0]);
        let zero = clip_preconditioned(vec![Matrix::zeros(2, 1)], 1.0);
        assert_eq!(zero[0].as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn clipped_steps_are_bounded() {
        let problem = Quad::new(&[100.0, -200.0]);
        let mut config = OptimizerConfig::new(OptimizerKind::NewtonPsgd);
        config.group = GroupKind::Diagonal;
        config.mu = 0.5;
        config.clip_threshold = Some(1.5);
        let mut state = OptimizerState::init(&problem, &config).unwrap();
        let before = theta_flat(&state);
        state.step(&problem, &config).unwrap();
        let after = theta_flat(&state);
        let delta: f64 = before
            .iter()
            .zip(&after)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(delta <= 0.5 * 1.5 + 1e-12, "step {delta}");
    }

    #[test]
    fn non_finite_gradient_aborts_with_iteration() {
        struct Bad;
        impl Problem for Bad {
            fn name(&self) -> &str {
                "bad"
            }
            fn param_shapes(&self) -> &[(usize, usize)] {
                &[(1, 1)]
            }
            fn init_params(&self, _s: u64) -> Vec<Matrix> {
                vec![Matrix::zeros(1, 1)]
            }
            fn make_batch(&self, _i: u64, _b: usize) -> Batch {
                Vec::new()
            }
            fn loss(&self, _p: &[Matrix], _b: &Batch) -> crate::error::Result<f64> {
                Ok(f64::INFINITY)
            }
            fn loss_and_gradient(&self, _p: &[Matrix], _b: &Batch) -> crate::error::Result<(f64, Vec<Matrix>)> {
                Ok((f64::INFINITY, vec![Matrix::zeros(1, 1)]))
            }
            fn hvp(&self, _p: &[Matrix], _b: &Batch, v: &[Matrix]) -> crate::error::Result<Vec<Matrix>> {
                Ok(v.to_vec())
            }
            fn full_loss(&self, _p: &[Matrix]) -> crate::error::Result<f64> {
                Ok(f64::INFINITY)
            }
        }
        let config = OptimizerConfig::new(OptimizerKind::Sgd);
        let mut state = OptimizerState::init(&Bad, &config).unwrap();
        state.iteration = 3;
        match state.step(&Bad, &config) {
            Err(Error::NonFiniteAbort { iteration: 3, .. }) => {}
            other => panic!("expected abort at iteration 3, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_resume_is_bit_exact() {
        let problem = Quad::new(&[2.0, -1.0, 0.7]);
        let mut config = OptimizerConfig::new(OptimizerKind::NewtonPsgd);
        config.group = GroupKind::UpperTriangular;
        config.mu = 0.2;
        config.mu0 = 0.05;
        config.seed = 77;

        let mut straight = OptimizerState::init(&problem, &config).unwrap();
        for _ in 0..10 {
            straight.step(&problem, &config).unwrap();
        }
        let mut doc = KvDoc::new();
        straight.to_kv(&mut doc);
        let mut resumed = OptimizerState::from_kv(&KvDoc::parse(&doc.to_text()).unwrap()).unwrap();
        assert_eq!(straight, resumed);
        for _ in 0..10 {
            straight.step(&problem, &config).unwrap();
            resumed.step(&problem, &config).unwrap();
        }
        assert_eq!(theta_flat(&straight), theta_flat(&resumed));
        assert_eq!(straight.rng.word_pos(), resumed.rng.word_pos());
    }

    #[test]
    fn full_run_is_deterministic() {
        let problem = Quad::new(&[1.0, 1.0]);
        let mut config = OptimizerConfig::new(OptimizerKind::NewtonPsgd);
        config.group = GroupKind::UpperTriangular;
        config.mu = 0.3;
        config.mu0 = 0.1;
        config.update_probability = 0.7;
        config.seed = 5;
        let run = |config: &OptimizerConfig| -> Vec<f64> {
            let mut state = OptimizerState::init(&problem, config).unwrap();
            let mut out = Vec::new();
            for _ in 0..30 {
                let rep = state.step(&problem, config).unwrap();
                out.push(rep.loss);
                out.push(rep.grad_norm);
            }
            out.extend(theta_flat(&state));
            out
        };
        let a = run(&config);
        let b = run(&config);
        assert_eq!(a, b);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn nesterov_differs_from_momentum_and_descends() {
        let problem = Quad::new(&[4.0, -2.0]);
        let mut cm = OptimizerConfig::new(OptimizerKind::Momentum);
        cm.mu = 0.1;
        let mut cn = cm.clone();
        cn.kind = OptimizerKind::Nesterov;
        let mut sm = OptimizerState::init(&problem, &cm).unwrap();
        let mut sn = OptimizerState::init(&problem, &cn).unwrap();
        for _ in 0..20 {
            sm.step(&problem, &cm).unwrap();
            sn.step(&problem, &cn).unwrap();
        }
        let lm = problem.full_loss(&sm.theta).unwrap();
        let ln = problem.full_loss(&sn.theta).unwrap();
        assert!(lm < 10.0 && ln < 10.0, "both descend from 10.0: {lm}, {ln}");
        assert_ne!(theta_flat(&sm), theta_flat(&sn), "look-ahead must change the path");
    }

    #[test]
    fn momentum_on_preconditioned_gradient_respects_clip() {
        let problem = Quad::new(&[50.0, -80.0]);
        let mut config = OptimizerConfig::new(OptimizerKind::NewtonPsgd);
        config.group = GroupKind::Diagonal;
        config.mu = 0.5;
        config.momentum_on_precond = true;
        config.momentum_beta = 0.9;
        config.clip_threshold = Some(2.0);
        let mut state = OptimizerState::init(&problem, &config).unwrap();
        for _ in 0..10 {
            let before = theta_flat(&state);
            state.step(&problem, &config).unwrap();
            let after = theta_flat(&state);
            let delta: f64 =
                before.iter().zip(&after).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            assert!(delta <= 0.5 * 2.0 + 1e-12, "clipped step {delta}");
        }
    }

    #[test]
    fn converged_preconditioner_normalizes_system_eigenvalues() {
        // Noise-free SPD quadratic: after Q converges, the eigenvalues of
        // P^{1/2} H P^{1/2} (similar to PH) sit near 1, so the local linear
        // system I − μPH has spectral radius near |1 − μ|.
        use crate::matrix::{principal_sqrt, random_spd, sym_eig};
        let mut s = crate::rng::SeedStream::new(71, "spectral");
        let h = random_spd(6, &mut s);
        let problem = crate::harness::make_noisy_quadratic(h.clone(), crate::matrix::Vector::zeros(6), 0.0, 3).unwrap();
        let mut config = OptimizerConfig::new(OptimizerKind::NewtonPsgd);
        config.group = GroupKind::UpperTriangular;
        config.mu = 0.5;
        config.seed = 2;
        let mut state = OptimizerState::init(&problem, &config).unwrap();
        let total = 20_000;
        for i in 0..total {
            config.mu0 = 0.1 * (0.01f64).powf(i as f64 / total as f64);
            state.step(&problem, &config).unwrap();
        }
        let p = state.q_factors().unwrap()[0].dense_p().unwrap();
        let p_half = principal_sqrt(&p).unwrap();
        let m = p_half.matmul(&h).matmul(&p_half);
        let (w, _) = sym_eig(&m).unwrap();
        let tol = 0.1;
        for &lam in w.as_slice() {
            assert!((lam - 1.0).abs() <= tol, "eigenvalue of PH drifted: {lam}");
        }
        let spectral_radius = w
            .as_slice()
            .iter()
            .map(|lam| (1.0 - config.mu * lam).abs())
            .fold(0.0, f64::max);
        assert!(
            spectral_radius <= (1.0 - config.mu).abs() + config.mu * tol,
            "spectral radius {spectral_radius}"
        );
    }

    #[test]
    fn config_validation_rejects_bad_ranges() {
        let mut c = OptimizerConfig::new(OptimizerKind::NewtonPsgd);
        c.mu = 1.5;
        assert!(c.validate().is_err());
        let mut c = OptimizerConfig::new(OptimizerKind::FisherPsgd);
        c.mu = 1.5;
        assert!(c.validate().is_ok());
        c.mu0 = 1.0;
        assert!(c.validate().is_err());
        let mut c = OptimizerConfig::new(OptimizerKind::Sgd);
        c.update_probability = 1.5;
        assert!(c.validate().is_err());
        let mut c = OptimizerConfig::new(OptimizerKind::Sgd);
        c.clip_threshold = Some(0.0);
        assert!(c.validate().is_err());
    }

    #[test]
    fn unbiased_fisher_tracks_scaled_fisher_inverse() {
        // ĝ ~ N(g, (F − ggᵀ)/B) with diagonal F: at the fixed point
        // E[uuᵀ] = F/B, so P²/B ≈ F⁻¹.
        use crate::rng::SeedStream;
        struct NoisyMean {
            shape: [(usize, usize); 1],
            g: Vec<f64>,
            std: Vec<f64>,
            seed: u64,
        }
        impl Problem for NoisyMean {
            fn name(&self) -> &str {
                "noisymean"
            }
            fn param_shapes(&self) -> &[(usize, usize)] {
                &self.shape
            }
            fn init_params(&self, _s: u64) -> Vec<Matrix> {
                vec![Matrix::zeros(self.g.len(), 1)]
            }
            fn make_batch(&self, iteration: u64, _b: usize) -> Batch {
                let mut s = SeedStream::new(self.seed ^ iteration.wrapping_mul(0x9e3779b97f4a7c15), "batch");
                vec![Matrix::from_fn(self.g.len(), 1, |i, _| {
                    self.g[i] + self.std[i] * s.standard_normal()
                })]
            }
            fn loss(&self, _p: &[Matrix], _b: &Batch) -> crate::error::Result<f64> {
                Ok(0.0)
            }
            fn loss_and_gradient(&self, _p: &[Matrix], batch: &Batch) -> crate::error::Result<(f64, Vec<Matrix>)> {
                Ok((0.0, vec![batch[0].clone()]))
            }
            fn hvp(&self, _p: &[Matrix], _b: &Batch, v: &[Matrix]) -> crate::error::Result<Vec<Matrix>> {
                Ok(v.to_vec())
            }
            fn full_loss(&self, _p: &[Matrix]) -> crate::error::Result<f64> {
                Ok(0.0)
            }
        }

        // F = diag(f); cov = (F − ggᵀ)/B restricted to diagonal needs
        // f_i = g_i² + B·std_i². g is kept small next to the noise so the
        // centered-Gaussian fixed point applies.
        let b = 4usize;
        let g = vec![0.2, -0.15];
        let std = vec![0.6, 0.9];
        let f: Vec<f64> = g.iter().zip(&std).map(|(gi, si)| gi * gi + b as f64 * si * si).collect();
        let problem = NoisyMean { shape: [(2, 1)], g: g.clone(), std, seed: 99 };

        let mut config = OptimizerConfig::new(OptimizerKind::FisherPsgd);
        config.group = GroupKind::Diagonal;
        config.unbiased_fisher = true;
        config.batch_size = b;
        config.mu = 1e-12;
        config.ema_factor_s = 0.995;
        config.seed = 13;
        let mut state = OptimizerState::init(&problem, &config).unwrap();
        // Warm up s toward the true mean, decay μ₀, then average the final
        // stretch to read the fixed point through the residual jitter.
        let total = 60_000u32;
        let tail = 10_000u32;
        let mut p_acc = [0.0f64; 2];
        for i in 0..total {
            config.mu0 = 0.05 * (0.02f64).powf(i as f64 / total as f64);
            state.step(&problem, &config).unwrap();
            if i >= total - tail {
                let p = state.q_factors().unwrap()[0].dense_p().unwrap();
                p_acc[0] += p.get(0, 0) / tail as f64;
                p_acc[1] += p.get(1, 1) / tail as f64;
            }
        }
        for i in 0..2 {
            let got = p_acc[i] * p_acc[i] / b as f64;
            let want = 1.0 / f[i];
            assert!(
                (got - want).abs() <= 0.05 * want,
                "P²/B should estimate F⁻¹: dim {i}, got {got}, want {want}"
            );
        }
    }
}
