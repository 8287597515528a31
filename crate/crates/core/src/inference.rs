//! Guided sampling over latent/solution pairs.
//!
//! The target on `(z, y)` is proportional to
//! `p_φ(z | x) p_θ(y | x, z) exp(-λ C(y, x))`. Each particle proposes a new
//! latent, decodes a fresh solution there with the current decoder and
//! accepts the pair with probability
//! `min(1, p_φ(z̃) / p_φ(z) · exp(-λ (C(ỹ) - C(y))))`; the decoder factor
//! cancels because the candidate solution is drawn from it. On rejection the
//! old pair is kept as a whole.
//!
//! The interacting proposal shifts each particle by `γ (z_{I1} - z_{I2})`
//! drawn from the previous cloud. Stochastic-approximation steps move the
//! decoder parameters along `-(1/K) Σ_k (C_k - b) ∇_θ log p_θ(y_k | x, z_k)`
//! at scheduled iterations; the encoder is evaluated once and frozen.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffnum::{Array, Gradients, Tape};
use crate::error::{Error, Result};
use crate::model::{DecodeMode, DecoderCache, Encoded, Model};
use crate::problems::{self, ProblemInstance, ProblemKind, Solution};
use crate::rng::{self, Purpose, Rng};
use crate::training::Adam;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Sampling,
    SingleMcmc,
    ParallelMcmc,
    InteractingMcmc,
    Lgs,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Sampling,
        Method::SingleMcmc,
        Method::ParallelMcmc,
        Method::InteractingMcmc,
        Method::Lgs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Sampling => "sampling",
            Method::SingleMcmc => "single_mcmc",
            Method::ParallelMcmc => "parallel_mcmc",
            Method::InteractingMcmc => "interacting_mcmc",
            Method::Lgs => "lgs",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_").to_ascii_lowercase();
        Method::ALL
            .into_iter()
            .find(|m| m.name() == norm || (norm == "parallel" && *m == Method::ParallelMcmc)
                || (norm == "interacting" && *m == Method::InteractingMcmc)
                || (norm == "single" && *m == Method::SingleMcmc))
            .ok_or_else(|| {
                Error::Argument(format!(
                    "unknown method `{s}` (expected one of {})",
                    Method::ALL.map(Method::name).join(", ")
                ))
            })
    }
}

/// Optimiser used for the decoder updates during search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SaOptimizer {
    /// `θ ← θ - γ_u H` with `γ_u = step0 / sqrt(u)`.
    Sgd,
    /// Adam with learning rate `step0` (the schedule decay is not applied).
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub method: Method,
    /// Particles per iteration.
    pub particles: usize,
    /// Iteration budget.
    pub iterations: usize,
    /// Cost temperature of the target.
    pub lambda: f64,
    /// Proposal variance σ².
    pub proposal_var: f64,
    /// Interacting drift coefficient γ.
    pub drift: f64,
    pub sa_step0: f64,
    pub sa_optimizer: SaOptimizer,
    /// Successive gaps between parameter updates; the last one repeats.
    pub schedule: Vec<usize>,
    pub augment: bool,
    pub seed: u64,
    /// Record the first two latent coordinates of every particle.
    pub record_latents: bool,
}

pub const DEFAULT_SCHEDULE: [usize; 7] = [1, 1, 5, 15, 25, 100, 150];

impl InferenceConfig {
    pub fn new(method: Method, kind: ProblemKind) -> Self {
        InferenceConfig {
            method,
            particles: 32,
            iterations: 200,
            lambda: 2.0,
            proposal_var: 0.01,
            drift: match kind {
                ProblemKind::Tsp => 0.319,
                ProblemKind::Cvrp => 0.379,
            },
            sa_step0: 1e-4,
            sa_optimizer: SaOptimizer::Sgd,
            schedule: DEFAULT_SCHEDULE.to_vec(),
            augment: false,
            seed: 0,
            record_latents: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.particles == 0 {
            return fail("particles must be >= 1");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail("lambda must be finite and >= 0");
        }
        if !(self.proposal_var > 0.0) {
            return fail("proposal_var must be > 0");
        }
        if !(self.drift >= 0.0) {
            return fail("drift must be >= 0");
        }
        if !(self.sa_step0 >= 0.0) {
            return fail("sa_step0 must be >= 0");
        }
        if self.schedule.is_empty() || self.schedule.contains(&0) {
            return fail("schedule intervals must be positive");
        }
        Ok(())
    }
}

/// Parameter-update iterations generated from successive gaps.
#[derive(Debug, Clone, PartialEq)]
pub struct SaSchedule {
    gaps: Vec<usize>,
    next: usize,
    used: usize,
}

impl SaSchedule {
    pub fn new(gaps: &[usize]) -> Self {
        SaSchedule {
            gaps: gaps.to_vec(),
            next: gaps[0],
            used: 0,
        }
    }

    /// Whether an update is due once iteration `m` (1-based) has completed.
    /// Must be called with increasing `m`.
    pub fn due(&mut self, m: usize) -> bool {
        if m < self.next {
            return false;
        }
        self.used += 1;
        self.next += self.gaps[self.used.min(self.gaps.len() - 1)];
        true
    }

    /// The first `count` update iterations.
    pub fn points(gaps: &[usize], count: usize) -> Vec<usize> {
        let mut s = SaSchedule::new(gaps);
        (1..)
            .filter(|&m| s.due(m))
            .take(count)
            .collect()
    }
}

/// `log p_φ(z | x) - λ C(y, x)`, the target up to the decoder factor.
pub fn target_logweight(prior_logdensity: f64, cost: f64, lambda: f64) -> f64 {
    prior_logdensity - lambda * cost
}

#[derive(Debug, Clone, PartialEq)]
pub struct Particle {
    pub z: Vec<f64>,
    pub solution: Solution,
    pub prior_logdensity: f64,
}

impl Particle {
    pub fn cost(&self) -> f64 {
        self.solution.cost
    }
}

/// Metropolis–Hastings acceptance probability for a symmetric proposal.
pub fn acceptance(current: &Particle, candidate: &Particle, lambda: f64) -> f64 {
    let log_ratio = target_logweight(candidate.prior_logdensity, candidate.cost(), lambda)
        - target_logweight(current.prior_logdensity, current.cost(), lambda);
    if log_ratio >= 0.0 {
        1.0
    } else {
        log_ratio.exp()
    }
}

/// Latent proposal given the previous particle cloud. `None` means the move
/// leaves the state space and is rejected outright.
pub trait Proposal {
    fn propose(&self, cloud: &[Vec<f64>], k: usize, rng: &mut Rng) -> Option<Vec<f64>>;
}

/// `N(z_k + γ (z_{I1} - z_{I2}), σ² I)` with `I1, I2` uniform over the cloud.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianDrift {
    pub var: f64,
    pub drift: f64,
}

impl GaussianDrift {
    /// Draws the candidate and reports the two cloud indices used.
    pub fn propose_with_indices(
        &self,
        cloud: &[Vec<f64>],
        k: usize,
        rng: &mut Rng,
    ) -> (Vec<f64>, usize, usize) {
        let kk = cloud.len();
        let (i1, i2) = if kk > 1 && self.drift > 0.0 {
            (rng.gen_range(0..kk), rng.gen_range(0..kk))
        } else {
            (k, k)
        };
        let sd = self.var.sqrt();
        let z = cloud[k]
            .iter()
            .enumerate()
            .map(|(j, zj)| {
                let e: f64 = rng.sample(StandardNormal);
                zj + self.drift * (cloud[i1][j] - cloud[i2][j]) + sd * e
            })
            .collect();
        (z, i1, i2)
    }
}

impl Proposal for GaussianDrift {
    fn propose(&self, cloud: &[Vec<f64>], k: usize, rng: &mut Rng) -> Option<Vec<f64>> {
        Some(self.propose_with_indices(cloud, k, rng).0)
    }
}

/// Frozen encoder outputs and the current decoder for one instance.
#[derive(Debug, Clone)]
pub struct SearchContext {
    pub instance: ProblemInstance,
    pub encoded: Encoded,
    pub model: Model,
    pub cache: DecoderCache,
}

impl SearchContext {
    pub fn new(model: &Model, instance: &ProblemInstance) -> Result<Self> {
        let encoded = model.encode(instance)?;
        let cache = model.decoder_cache(&encoded)?;
        Ok(SearchContext {
            instance: instance.clone(),
            encoded,
            model: model.clone(),
            cache,
        })
    }

    /// Decodes at `z` and wraps the result as a particle.
    pub fn particle_at(&self, z: Vec<f64>, rng: &mut Rng) -> Result<Particle> {
        let r = self
            .cache
            .rollout(&z, &self.instance, rng, DecodeMode::Sample)?;
        Ok(Particle {
            prior_logdensity: self.encoded.prior_logdensity(&z),
            z,
            solution: r.solution,
        })
    }

    fn refresh(&mut self) -> Result<()> {
        self.cache = self.model.decoder_cache(&self.encoded)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub particles: Vec<Particle>,
    /// Completed iterations.
    pub m: usize,
    pub best: Solution,
    pub sa_updates: usize,
    pub seed: u64,
}

/// Outcome of one iteration for each particle.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub accepted: Vec<bool>,
}

impl StepReport {
    pub fn rate(&self) -> f64 {
        self.accepted.iter().filter(|&&a| a).count() as f64 / self.accepted.len() as f64
    }
}

impl ChainState {
    /// `K` initial latents from the prior, each decoded once.
    pub fn init(ctx: &SearchContext, k: usize, seed: u64) -> Result<Self> {
        let mut particles = Vec::with_capacity(k);
        for i in 0..k {
            let mut r = rng::stream(seed, Purpose::Latent, i as u64, 0);
            let z = ctx.encoded.sample(&mut r).z;
            particles.push(ctx.particle_at(z, &mut r)?);
        }
        Self::from_particles(particles, seed)
    }

    pub fn from_particles(particles: Vec<Particle>, seed: u64) -> Result<Self> {
        let best = particles
            .iter()
            .min_by(|a, b| a.cost().total_cmp(&b.cost()))
            .ok_or_else(|| Error::Config("no particles".into()))?
            .solution
            .clone();
        Ok(ChainState {
            particles,
            m: 0,
            best,
            sa_updates: 0,
            seed,
        })
    }

    pub fn mean_cost(&self) -> f64 {
        self.particles.iter().map(Particle::cost).sum::<f64>() / self.particles.len() as f64
    }

    fn observe(&mut self, s: &Solution) {
        if s.cost < self.best.cost {
            self.best = s.clone();
        }
    }

    /// One propagate/decode/accept sweep over every particle against the
    /// cloud as it stood before the sweep.
    pub fn lgs_step(
        &mut self,
        ctx: &SearchContext,
        proposal: &dyn Proposal,
        lambda: f64,
    ) -> Result<StepReport> {
        let cloud: Vec<Vec<f64>> = self.particles.iter().map(|p| p.z.clone()).collect();
        let mut accepted = Vec::with_capacity(cloud.len());
        for k in 0..cloud.len() {
            let mut r = rng::stream(self.seed, Purpose::Particle, k as u64, self.m as u64);
            let Some(z) = proposal.propose(&cloud, k, &mut r) else {
                accepted.push(false);
                continue;
            };
            let cand = ctx.particle_at(z, &mut r)?;
            self.observe(&cand.solution);
            let alpha = acceptance(&self.particles[k], &cand, lambda);
            let u: f64 = r.gen();
            let take = u < alpha;
            if take {
                self.particles[k] = cand;
            }
            accepted.push(take);
        }
        self.m += 1;
        Ok(StepReport { accepted })
    }

    /// Replaces every particle with an independent prior draw.
    pub fn resample_step(&mut self, ctx: &SearchContext) -> Result<StepReport> {
        for k in 0..self.particles.len() {
            let mut r = rng::stream(self.seed, Purpose::Particle, k as u64, self.m as u64);
            let z = ctx.encoded.sample(&mut r).z;
            let p = ctx.particle_at(z, &mut r)?;
            self.observe(&p.solution);
            self.particles[k] = p;
        }
        self.m += 1;
        Ok(StepReport {
            accepted: vec![true; self.particles.len()],
        })
    }
}

/// `(1/K) Σ_k (C_k - b) ∇_θ log p_θ(y_k | x, z_k)` with `b` the mean
/// particle cost, restricted to decoder parameters.
pub fn sa_gradient(ctx: &SearchContext, particles: &[Particle]) -> Result<Gradients> {
    let model = &ctx.model;
    let mut tape = Tape::new();
    let nodes = tape.constant(ctx.encoded.nodes.clone());
    let dec = model.decoder_on(&mut tape, nodes)?;
    let k = particles.len() as f64;
    let baseline = particles.iter().map(Particle::cost).sum::<f64>() / k;
    let mut parts = Vec::with_capacity(particles.len());
    for p in particles {
        let z = tape.constant(Array::row_vector(p.z.clone()));
        let lp = model.log_prob_on(&mut tape, &dec, z, &ctx.instance, &p.solution.visits)?;
        parts.push(tape.scale(lp, (p.cost() - baseline) / k));
    }
    let all = tape.concat_cols(&parts)?;
    let s = tape.sum(all);
    let mut g = tape.gradient(s)?;
    g.retain(|id| model.is_decoder(id));
    if !g.is_finite() {
        return Err(Error::NonFinite("search-time decoder gradient".into()));
    }
    Ok(g)
}

/// Decoder update state carried across scheduled steps.
#[derive(Debug, Clone)]
pub struct SaState {
    optimizer: SaOptimizer,
    step0: f64,
    adam: Option<Adam>,
}

impl SaState {
    pub fn new(optimizer: SaOptimizer, step0: f64) -> Self {
        let adam = matches!(optimizer, SaOptimizer::Adam).then(|| Adam::new(step0, 0.9, 0.999, 0.0));
        SaState {
            optimizer,
            step0,
            adam,
        }
    }

    /// Applies one update to `ctx.model` from the chain's current pairs.
    pub fn update(&mut self, ctx: &mut SearchContext, chain: &mut ChainState) -> Result<()> {
        let g = sa_gradient(ctx, &chain.particles)?;
        chain.sa_updates += 1;
        match self.optimizer {
            SaOptimizer::Sgd => {
                let gamma = self.step0 / (chain.sa_updates as f64).sqrt();
                sa_update(&mut ctx.model, &g, gamma);
            }
            SaOptimizer::Adam => {
                self.adam
                    .as_mut()
                    .expect("adam state")
                    .step(&mut ctx.model.params, &g);
            }
        }
        ctx.refresh()
    }
}

/// `θ ← θ - γ H`.
pub fn sa_update(model: &mut Model, h: &Gradients, gamma: f64) {
    if gamma == 0.0 {
        return;
    }
    for (id, g) in h.iter() {
        let p = model.params.get_mut(id).data_mut();
        for (p, g) in p.iter_mut().zip(g.data()) {
            *p -= gamma * g;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub m: usize,
    pub best_cost: f64,
    pub mean_cost: f64,
    pub acceptance_rate: f64,
    pub theta_update_flag: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentRow {
    pub m: usize,
    pub k: usize,
    pub z1: f64,
    pub z2: f64,
    pub cost: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    /// Best solution, evaluated on the original instance.
    pub best: Solution,
    pub trace: Vec<TraceRow>,
    pub latents: Vec<LatentRow>,
    /// Decoder draws consumed.
    pub draws: usize,
}

fn latent_rows(chain: &ChainState, accepted: Option<&[bool]>) -> Vec<LatentRow> {
    chain
        .particles
        .iter()
        .enumerate()
        .map(|(k, p)| LatentRow {
            m: chain.m,
            k,
            z1: p.z.first().copied().unwrap_or(0.0),
            z2: p.z.get(1).copied().unwrap_or(0.0),
            cost: p.cost(),
            accepted: accepted.is_none_or(|a| a[k]),
        })
        .collect()
}

fn run_single(model: &Model, instance: &ProblemInstance, cfg: &InferenceConfig) -> Result<RunOutput> {
    let mut ctx = SearchContext::new(model, instance)?;
    let (k, iters) = match cfg.method {
        Method::SingleMcmc => (1, cfg.iterations * cfg.particles),
        _ => (cfg.particles, cfg.iterations),
    };
    let drift = match cfg.method {
        Method::InteractingMcmc | Method::Lgs => cfg.drift,
        _ => 0.0,
    };
    let proposal = GaussianDrift {
        var: cfg.proposal_var,
        drift,
    };
    let mut chain = ChainState::init(&ctx, k, cfg.seed)?;
    let mut schedule = SaSchedule::new(&cfg.schedule);
    let mut sa = SaState::new(cfg.sa_optimizer.clone(), cfg.sa_step0);
    let mut trace = Vec::with_capacity(iters + 1);
    let mut latents = Vec::new();
    trace.push(TraceRow {
        m: 0,
        best_cost: chain.best.cost,
        mean_cost: chain.mean_cost(),
        acceptance_rate: 0.0,
        theta_update_flag: false,
    });
    if cfg.record_latents {
        latents.extend(latent_rows(&chain, None));
    }
    for _ in 0..iters {
        let report = match cfg.method {
            Method::Sampling => chain.resample_step(&ctx)?,
            _ => chain.lgs_step(&ctx, &proposal, cfg.lambda)?,
        };
        let mut updated = false;
        if cfg.method == Method::Lgs && schedule.due(chain.m) {
            sa.update(&mut ctx, &mut chain)?;
            updated = true;
        }
        if cfg.record_latents {
            latents.extend(latent_rows(&chain, Some(&report.accepted)));
        }
        trace.push(TraceRow {
            m: chain.m,
            best_cost: chain.best.cost,
            mean_cost: chain.mean_cost(),
            acceptance_rate: report.rate(),
            theta_update_flag: updated,
        });
    }
    Ok(RunOutput {
        best: chain.best,
        trace,
        latents,
        draws: k * (iters + 1),
    })
}

/// Runs the configured method. With augmentation the eight dihedral variants
/// each get `ceil(K / 8)` particles and their own seed stream; the best
/// solution is re-costed on the original instance.
pub fn run(model: &Model, instance: &ProblemInstance, cfg: &InferenceConfig) -> Result<RunOutput> {
    cfg.validate()?;
    if model.config.kind != instance.kind {
        return Err(Error::Config(format!(
            "model for {} applied to a {} instance",
            model.config.kind, instance.kind
        )));
    }
    if !cfg.augment {
        return run_single(model, instance, cfg);
    }
    let outputs = augmented_variant_configs(cfg)
        .into_iter()
        .zip(problems::augment(instance))
        .map(|(c, v)| run_single(model, &v, &c))
        .collect::<Result<Vec<_>>>()?;
    let best_visits = outputs
        .iter()
        .min_by(|a, b| a.best.cost.total_cmp(&b.best.cost))
        .expect("eight variants")
        .best
        .visits
        .clone();
    let best = Solution::new(instance, best_visits)?;
    let rows = outputs[0].trace.len();
    let trace = (0..rows)
        .map(|i| {
            let rs: Vec<&TraceRow> = outputs.iter().map(|o| &o.trace[i]).collect();
            let n = rs.len() as f64;
            TraceRow {
                m: rs[0].m,
                best_cost: rs.iter().map(|r| r.best_cost).fold(f64::INFINITY, f64::min),
                mean_cost: rs.iter().map(|r| r.mean_cost).sum::<f64>() / n,
                acceptance_rate: rs.iter().map(|r| r.acceptance_rate).sum::<f64>() / n,
                theta_update_flag: rs.iter().any(|r| r.theta_update_flag),
            }
        })
        .collect();
    Ok(RunOutput {
        best,
        trace,
        latents: Vec::new(),
        draws: outputs.iter().map(|o| o.draws).sum(),
    })
}

/// Per-variant configurations used by augmented runs, identity first.
pub fn augmented_variant_configs(cfg: &InferenceConfig) -> Vec<InferenceConfig> {
    (0..8u64)
        .map(|j| InferenceConfig {
            particles: cfg.particles.div_ceil(8),
            augment: false,
            record_latents: false,
            seed: rng::derive(cfg.seed, Purpose::Augment, j, 0),
            ..cfg.clone()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::problems::generate_instance;

    fn ctx(kind: ProblemKind, n: usize, d_z: usize, seed: u64) -> SearchContext {
        let model = Model::init(ModelConfig::tiny(kind, d_z), seed).unwrap();
        let inst = generate_instance(kind, n, seed).unwrap();
        SearchContext::new(&model, &inst).unwrap()
    }

    fn particle(prior: f64, cost: f64) -> Particle {
        Particle {
            z: vec![0.0],
            solution: Solution {
                visits: vec![],
                cost,
            },
            prior_logdensity: prior,
        }
    }

    #[test]
    fn target_and_acceptance_closed_forms() {
        assert_eq!(target_logweight(-1.3, 7.0, 0.0), -1.3);
        let d = target_logweight(-1.0, 3.0, 2.5) - target_logweight(-1.0, 4.0, 2.5);
        assert!((d - 2.5).abs() < 1e-12);
        assert_eq!(acceptance(&particle(-2.0, 3.0), &particle(-2.0, 3.0), 2.0), 1.0);
        let a = acceptance(&particle(-2.0, 3.0), &particle(-2.0, 3.5), 2.0);
        assert!((a - (-1.0f64).exp()).abs() < 1e-12);
        assert_eq!(acceptance(&particle(-2.0, 3.0), &particle(-1.0, 2.0), 2.0), 1.0);
    }

    #[test]
    fn schedule_points_repeat_last_gap() {
        assert_eq!(
            SaSchedule::points(&DEFAULT_SCHEDULE, 9),
            vec![1, 2, 7, 22, 47, 147, 297, 447, 597]
        );
        assert_eq!(SaSchedule::points(&[3], 3), vec![3, 6, 9]);
    }

    #[test]
    fn method_names_parse() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert_eq!("parallel".parse::<Method>().unwrap(), Method::ParallelMcmc);
        assert!(matches!("beam".parse::<Method>(), Err(Error::Argument(_))));
    }

    #[test]
    fn proposal_collapses_without_noise() {
        let cloud = vec![vec![0.5, -0.25, 1.0]];
        let p = GaussianDrift {
            var: 1e-12,
            drift: 0.0,
        };
        let mut r = rng::stream(0, Purpose::Proposal, 0, 0);
        let z = p.propose(&cloud, 0, &mut r).unwrap();
        let dist: f64 = z.iter().zip(&cloud[0]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(dist < 1e-5);
        // A single particle never drifts.
        let p = GaussianDrift { var: 1e-12, drift: 5.0 };
        let (_, i1, i2) = p.propose_with_indices(&cloud, 0, &mut r);
        assert_eq!((i1, i2), (0, 0));
    }

    #[test]
    fn drift_free_proposal_is_centred() {
        let cloud = vec![vec![0.3, -1.2]];
        let p = GaussianDrift { var: 0.01, drift: 0.0 };
        let mut r = rng::stream(1, Purpose::Proposal, 0, 0);
        let n = 100_000;
        let mut sum = [0.0; 2];
        for _ in 0..n {
            let z = p.propose(&cloud, 0, &mut r).unwrap();
            sum[0] += z[0] - cloud[0][0];
            sum[1] += z[1] - cloud[0][1];
        }
        let se = (0.01f64 / n as f64).sqrt();
        for s in sum {
            assert!((s / n as f64).abs() < 4.0 * se);
        }
    }

    #[test]
    fn interacting_proposal_covariance() {
        // I1, I2 iid uniform: Cov(z_I1 - z_I2) = 2 Cov_pop(cloud).
        let cloud = vec![vec![0.0, 1.0], vec![2.0, -1.0], vec![-1.0, 0.5], vec![0.5, 3.0]];
        let (gamma, var) = (0.319, 0.01);
        let p = GaussianDrift { var, drift: gamma };
        let mean: Vec<f64> = (0..2).map(|j| cloud.iter().map(|z| z[j]).sum::<f64>() / 4.0).collect();
        let pop = |a: usize, b: usize| {
            cloud.iter().map(|z| (z[a] - mean[a]) * (z[b] - mean[b])).sum::<f64>() / 4.0
        };
        let expect = |a: usize, b: usize| {
            2.0 * gamma * gamma * pop(a, b) + if a == b { var } else { 0.0 }
        };
        let mut r = rng::stream(2, Purpose::Proposal, 0, 0);
        let n = 100_000;
        let mut m2 = [[0.0; 2]; 2];
        let mut m1 = [0.0; 2];
        for _ in 0..n {
            let z = p.propose(&cloud, 1, &mut r).unwrap();
            let d = [z[0] - cloud[1][0], z[1] - cloud[1][1]];
            for a in 0..2 {
                m1[a] += d[a] / n as f64;
                for b in 0..2 {
                    m2[a][b] += d[a] * d[b] / n as f64;
                }
            }
        }
        for a in 0..2 {
            for b in 0..2 {
                let got = m2[a][b] - m1[a] * m1[b];
                let want = expect(a, b);
                assert!((got - want).abs() < 0.05 * want.abs(), "{a}{b}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn acceptance_rate_matches_gaussian_random_walk() {
        // λ = 0 and γ = 0: the latent marginal is random-walk MH on the prior,
        // whose stationary acceptance rate is (2/π) atan(2s/σ) in one dimension.
        let c = ctx(ProblemKind::Tsp, 5, 1, 4);
        let sd = (0.5 * c.encoded.logvar[0]).exp();
        let var = (1.5 * sd).powi(2);
        let prop = GaussianDrift { var, drift: 0.0 };
        let k = 2000;
        let mut chain = ChainState::init(&c, k, 7).unwrap();
        let mut per = vec![0.0; k];
        let steps = 40;
        for _ in 0..steps {
            let rep = chain.lgs_step(&c, &prop, 0.0).unwrap();
            for (a, acc) in per.iter_mut().zip(&rep.accepted) {
                *a += f64::from(u8::from(*acc)) / steps as f64;
            }
        }
        let mean = per.iter().sum::<f64>() / k as f64;
        let sdev = (per.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (k - 1) as f64).sqrt();
        let want = 2.0 / std::f64::consts::PI * (2.0 * sd / var.sqrt()).atan();
        assert!((mean - want).abs() < 4.0 * sdev / (k as f64).sqrt(), "{mean} vs {want}");
    }

    #[test]
    fn forced_acceptance_and_rejection() {
        let c = ctx(ProblemKind::Tsp, 5, 2, 1);
        let chain0 = ChainState::init(&c, 6, 3).unwrap();
        // λ = 0 and a flat prior: every candidate is accepted.
        let mut flat = chain0.clone();
        let mut cflat = c.clone();
        cflat.encoded.logvar = vec![1e6; 2];
        for p in &mut flat.particles {
            p.prior_logdensity = cflat.encoded.prior_logdensity(&p.z);
        }
        let prop = GaussianDrift { var: 0.01, drift: 0.3 };
        let rep = flat.lgs_step(&cflat, &prop, 0.0).unwrap();
        assert!(rep.accepted.iter().all(|&a| a));
        // Candidates that always leave the space are always rejected.
        struct Never;
        impl Proposal for Never {
            fn propose(&self, _: &[Vec<f64>], _: usize, _: &mut Rng) -> Option<Vec<f64>> {
                None
            }
        }
        let mut frozen = chain0.clone();
        frozen.lgs_step(&c, &Never, 2.0).unwrap();
        assert_eq!(frozen.m, 1);
        assert_eq!(frozen.particles, chain0.particles);
    }

    #[test]
    fn rejected_particles_keep_their_pair() {
        let c = ctx(ProblemKind::Cvrp, 5, 2, 2);
        let mut chain = ChainState::init(&c, 8, 4).unwrap();
        let prop = GaussianDrift { var: 0.5, drift: 0.3 };
        for _ in 0..10 {
            let before = chain.particles.clone();
            let rep = chain.lgs_step(&c, &prop, 50.0).unwrap();
            for (k, acc) in rep.accepted.iter().enumerate() {
                if !acc {
                    assert_eq!(chain.particles[k], before[k]);
                }
                let p = &chain.particles[k];
                p.solution.verify(&c.instance).unwrap();
                assert!((p.prior_logdensity - c.encoded.prior_logdensity(&p.z)).abs() < 1e-10);
                assert!(chain.best.cost <= p.cost());
            }
        }
    }

    #[test]
    fn sa_update_edge_cases() {
        let c = ctx(ProblemKind::Tsp, 5, 2, 3);
        let chain = ChainState::init(&c, 4, 1).unwrap();
        let g = sa_gradient(&c, &chain.particles).unwrap();
        let mut m = c.model.clone();
        sa_update(&mut m, &g, 0.0);
        assert_eq!(m, c.model);
        let mut equal = chain.particles.clone();
        for p in &mut equal {
            p.solution.cost = 1.0;
        }
        let g = sa_gradient(&c, &equal).unwrap();
        assert_eq!(g.max_abs(), 0.0);
        assert!(g.iter().all(|(id, _)| c.model.is_decoder(id)));
    }

    #[test]
    fn theta_changes_only_at_scheduled_iterations() {
        let model = Model::init(ModelConfig::tiny(ProblemKind::Tsp, 2), 5).unwrap();
        let inst = generate_instance(ProblemKind::Tsp, 6, 5).unwrap();
        let cfg = InferenceConfig {
            particles: 4,
            iterations: 30,
            sa_step0: 0.05,
            ..InferenceConfig::new(Method::Lgs, ProblemKind::Tsp)
        };
        let out = run(&model, &inst, &cfg).unwrap();
        let flagged: Vec<usize> = out.trace.iter().filter(|r| r.theta_update_flag).map(|r| r.m).collect();
        assert_eq!(flagged, vec![1, 2, 7, 22]);
        let mut ctx = SearchContext::new(&model, &inst).unwrap();
        let mut chain = ChainState::init(&ctx, 4, 0).unwrap();
        let mut sa = SaState::new(SaOptimizer::Sgd, 0.05);
        let prop = GaussianDrift { var: 0.01, drift: 0.3 };
        chain.lgs_step(&ctx, &prop, 2.0).unwrap();
        let before = ctx.model.clone();
        chain.lgs_step(&ctx, &prop, 2.0).unwrap();
        assert_eq!(ctx.model, before);
        sa.update(&mut ctx, &mut chain).unwrap();
        assert_ne!(ctx.model, before);
    }

    #[test]
    fn runs_are_deterministic_and_monotone() {
        let model = Model::init(ModelConfig::tiny(ProblemKind::Cvrp, 2), 6).unwrap();
        let inst = generate_instance(ProblemKind::Cvrp, 6, 6).unwrap();
        for method in Method::ALL {
            let cfg = InferenceConfig {
                particles: 4,
                iterations: 12,
                seed: 11,
                ..InferenceConfig::new(method, ProblemKind::Cvrp)
            };
            let a = run(&model, &inst, &cfg).unwrap();
            let b = run(&model, &inst, &cfg).unwrap();
            assert_eq!(a, b, "{method}");
            a.best.verify(&inst).unwrap();
            for w in a.trace.windows(2) {
                assert!(w[1].best_cost <= w[0].best_cost);
            }
            let expected = if method == Method::SingleMcmc { 48 + 1 } else { 4 * 13 };
            assert_eq!(a.draws, expected);
        }
    }

    #[test]
    fn zero_iterations_returns_best_initial_draw() {
        let model = Model::init(ModelConfig::tiny(ProblemKind::Tsp, 2), 8).unwrap();
        let inst = generate_instance(ProblemKind::Tsp, 7, 8).unwrap();
        let cfg = InferenceConfig {
            particles: 5,
            iterations: 0,
            ..InferenceConfig::new(Method::Lgs, ProblemKind::Tsp)
        };
        let out = run(&model, &inst, &cfg).unwrap();
        let c = SearchContext::new(&model, &inst).unwrap();
        let init = ChainState::init(&c, 5, cfg.seed).unwrap();
        let min = init.particles.iter().map(Particle::cost).fold(f64::INFINITY, f64::min);
        assert_eq!(out.best.cost, min);
        assert_eq!(out.trace.len(), 1);
    }

    #[test]
    fn sampling_best_is_min_over_draws() {
        let model = Model::init(ModelConfig::tiny(ProblemKind::Tsp, 2), 9).unwrap();
        let inst = generate_instance(ProblemKind::Tsp, 6, 9).unwrap();
        let cfg = InferenceConfig {
            particles: 3,
            iterations: 5,
            record_latents: true,
            ..InferenceConfig::new(Method::Sampling, ProblemKind::Tsp)
        };
        let out = run(&model, &inst, &cfg).unwrap();
        assert_eq!(out.latents.len(), 3 * 6);
        let min = out.latents.iter().map(|r| r.cost).fold(f64::INFINITY, f64::min);
        assert_eq!(out.best.cost, min);
    }

    #[test]
    fn augmented_run_dominates_its_identity_variant() {
        let model = Model::init(ModelConfig::tiny(ProblemKind::Tsp, 2), 10).unwrap();
        let inst = generate_instance(ProblemKind::Tsp, 7, 10).unwrap();
        let cfg = InferenceConfig {
            particles: 16,
            iterations: 6,
            augment: true,
            ..InferenceConfig::new(Method::InteractingMcmc, ProblemKind::Tsp)
        };
        let aug = run(&model, &inst, &cfg).unwrap();
        let identity = run(&model, &inst, &augmented_variant_configs(&cfg)[0]).unwrap();
        assert!(aug.best.cost <= identity.best.cost);
        aug.best.verify(&inst).unwrap();
    }

    #[test]
    fn kind_mismatch_is_a_config_error() {
        let model = Model::init(ModelConfig::tiny(ProblemKind::Tsp, 2), 1).unwrap();
        let inst = generate_instance(ProblemKind::Cvrp, 4, 1).unwrap();
        let cfg = InferenceConfig::new(Method::Lgs, ProblemKind::Tsp);
        assert!(matches!(run(&model, &inst, &cfg), Err(Error::Config(_))));
    }
}
