//! Brute-force references for small instances.
//!
//! Everything here is exhaustive and exponential; each entry point enforces a
//! size limit and returns [`Error::Size`] beyond it.

use rand::Rng as _;

use crate::diffnum::{rel_err, Array, Gradients, Tape};
use crate::error::{Error, Result};
use crate::inference::{ChainState, GaussianDrift, Proposal, SaOptimizer, SaSchedule, SaState, SearchContext};
use crate::model::{DecoderCache, Encoded, Model};
use crate::problems::{self, ProblemInstance, ProblemKind, RouteState, Solution};
use crate::rng::{self, Purpose, Rng};

/// Bumped whenever an oracle's output for a fixed input may change.
pub const ORACLE_VERSION: u32 = 1;

pub const MAX_BRUTE_TSP: usize = 10;
pub const MAX_BRUTE_CVRP: usize = 8;
pub const MAX_ENUM_TSP: usize = 7;
pub const MAX_ENUM_CVRP: usize = 5;
pub const MAX_GRADCHECK: usize = 5;
pub const MAX_GRID_STATES: usize = 100_000;

/// Guard in the denominator of the detailed-balance ratio.
pub const TINY: f64 = 1e-300;

/// A finite distribution; `probabilities[i]` is the mass of `support[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnumeratedDistribution<S> {
    pub support: Vec<S>,
    pub probabilities: Vec<f64>,
}

impl<S: PartialEq> EnumeratedDistribution<S> {
    pub fn total(&self) -> f64 {
        self.probabilities.iter().sum()
    }

    pub fn prob_of(&self, s: &S) -> Option<f64> {
        self.support
            .iter()
            .position(|x| x == s)
            .map(|i| self.probabilities[i])
    }

    /// Normalises unnormalised log-weights with a max shift.
    pub fn from_log_weights(support: Vec<S>, logw: &[f64]) -> Self {
        let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = w.iter().sum();
        EnumeratedDistribution {
            support,
            probabilities: w.into_iter().map(|x| x / total).collect(),
        }
    }
}

fn size(what: &'static str, got: usize, limit: usize) -> Result<()> {
    if got > limit {
        Err(Error::Size { what, got, limit })
    } else {
        Ok(())
    }
}

/// Exact TSP optimum over tours starting at node 0, one direction per cycle.
pub fn brute_force_tsp(instance: &ProblemInstance) -> Result<Solution> {
    if instance.kind != ProblemKind::Tsp {
        return Err(Error::Argument("brute_force_tsp needs a TSP instance".into()));
    }
    let n = instance.n;
    size("tsp nodes", n, MAX_BRUTE_TSP)?;
    struct Search<'a> {
        inst: &'a ProblemInstance,
        path: Vec<usize>,
        used: Vec<bool>,
        best: f64,
        best_path: Vec<usize>,
    }
    impl Search<'_> {
        fn go(&mut self, len: f64) {
            let n = self.inst.n;
            if len >= self.best {
                return;
            }
            let last = *self.path.last().expect("non-empty path");
            if self.path.len() == n {
                if n > 2 && self.path[1] > self.path[n - 1] {
                    return;
                }
                let total = len + self.inst.dist(last, 0);
                if total < self.best {
                    self.best = total;
                    self.best_path.clone_from(&self.path);
                }
                return;
            }
            for v in 1..n {
                if !self.used[v] {
                    self.used[v] = true;
                    self.path.push(v);
                    self.go(len + self.inst.dist(last, v));
                    self.path.pop();
                    self.used[v] = false;
                }
            }
        }
    }
    let mut s = Search {
        inst: instance,
        path: vec![0],
        used: vec![false; n],
        best: f64::INFINITY,
        best_path: Vec::new(),
    };
    s.used[0] = true;
    s.go(0.0);
    Solution::new(instance, s.best_path)
}

/// Exact CVRP optimum: Held–Karp costs for every capacity-feasible customer
/// subset, then a set-partition dynamic programme over subsets.
pub fn brute_force_cvrp(instance: &ProblemInstance) -> Result<Solution> {
    if instance.kind != ProblemKind::Cvrp {
        return Err(Error::Argument("brute_force_cvrp needs a CVRP instance".into()));
    }
    let n = instance.n;
    size("cvrp customers", n, MAX_BRUTE_CVRP)?;
    let full = (1usize << n) - 1;
    let cap = instance.capacity();
    // path[S][j]: shortest depot → S path ending at customer j + 1.
    let mut path = vec![vec![f64::INFINITY; n]; full + 1];
    let mut pred = vec![vec![usize::MAX; n]; full + 1];
    for j in 0..n {
        path[1 << j][j] = instance.dist(0, j + 1);
    }
    for s in 1..=full {
        for j in 0..n {
            let base = path[s][j];
            if s & (1 << j) == 0 || !base.is_finite() {
                continue;
            }
            for k in 0..n {
                if s & (1 << k) != 0 {
                    continue;
                }
                let t = s | (1 << k);
                let c = base + instance.dist(j + 1, k + 1);
                if c < path[t][k] {
                    path[t][k] = c;
                    pred[t][k] = j;
                }
            }
        }
    }
    let demand = |s: usize| -> f64 {
        (0..n)
            .filter(|j| s & (1 << j) != 0)
            .map(|j| instance.demands[j + 1])
            .sum()
    };
    let mut route = vec![(f64::INFINITY, usize::MAX); full + 1];
    for (s, r) in route.iter_mut().enumerate().skip(1) {
        if demand(s) <= cap + problems::COST_TOL {
            for j in 0..n {
                let c = path[s][j] + instance.dist(j + 1, 0);
                if c < r.0 {
                    *r = (c, j);
                }
            }
        }
    }
    let mut best = vec![(f64::INFINITY, 0usize); full + 1];
    best[0] = (0.0, 0);
    for s in 1..=full {
        let low = s & s.wrapping_neg();
        let rest = s ^ low;
        // Enumerate subsets of `rest`, each joined with the lowest customer.
        let mut sub = rest;
        loop {
            let r = sub | low;
            let c = route[r].0 + best[s ^ r].0;
            if c < best[s].0 {
                best[s] = (c, r);
            }
            if sub == 0 {
                break;
            }
            sub = (sub - 1) & rest;
        }
    }
    if !best[full].0.is_finite() {
        return Err(Error::Contract("no capacity-feasible partition".into()));
    }
    let mut visits = Vec::new();
    let mut s = full;
    while s != 0 {
        let r = best[s].1;
        let mut order = Vec::new();
        let (mut set, mut j) = (r, route[r].1);
        while j != usize::MAX {
            order.push(j + 1);
            let p = pred[set][j];
            set ^= 1 << j;
            j = p;
        }
        order.reverse();
        visits.extend(order);
        visits.push(0);
        s ^= r;
    }
    Solution::new(instance, visits)
}

/// Exact optimum for either problem kind.
pub fn brute_force(instance: &ProblemInstance) -> Result<Solution> {
    match instance.kind {
        ProblemKind::Tsp => brute_force_tsp(instance),
        ProblemKind::Cvrp => brute_force_cvrp(instance),
    }
}

/// TSP tours rotated to start at node 0; CVRP sequences are returned as is.
pub fn canonical_tour(kind: ProblemKind, visits: &[usize]) -> Vec<usize> {
    match kind {
        ProblemKind::Tsp => {
            let start = visits.iter().position(|&v| v == 0).unwrap_or(0);
            visits[start..].iter().chain(&visits[..start]).copied().collect()
        }
        ProblemKind::Cvrp => visits.to_vec(),
    }
}

fn enum_limit(instance: &ProblemInstance) -> Result<()> {
    match instance.kind {
        ProblemKind::Tsp => size("tsp nodes", instance.n, MAX_ENUM_TSP),
        ProblemKind::Cvrp => size("cvrp customers", instance.n, MAX_ENUM_CVRP),
    }
}

/// Every feasible decoding sequence with its exact probability, in
/// depth-first order.
pub fn enumerate_sequences(
    cache: &DecoderCache,
    z: &[f64],
    instance: &ProblemInstance,
) -> Result<Vec<(Vec<usize>, f64)>> {
    enum_limit(instance)?;
    let lq = cache.latent_query(z)?;
    let mut out = Vec::new();
    let mut prefix = Vec::new();
    fn go(
        cache: &DecoderCache,
        lq: &[f64],
        inst: &ProblemInstance,
        state: &RouteState,
        prob: f64,
        prefix: &mut Vec<usize>,
        out: &mut Vec<(Vec<usize>, f64)>,
    ) -> Result<()> {
        if state.is_complete() {
            out.push((prefix.clone(), prob));
            return Ok(());
        }
        let p = cache.decode_step(lq, inst, state)?;
        for (v, &pv) in p.iter().enumerate() {
            if pv == 0.0 && !state.mask(inst)[v] {
                continue;
            }
            if pv <= 0.0 {
                return Err(Error::Contract(format!(
                    "admissible node {v} has zero probability after {:?}",
                    prefix
                )));
            }
            let mut next = state.clone();
            next.step(inst, v)?;
            prefix.push(v);
            go(cache, lq, inst, &next, prob * pv, prefix, out)?;
            prefix.pop();
        }
        Ok(())
    }
    go(
        cache,
        &lq,
        instance,
        &RouteState::new(instance),
        1.0,
        &mut prefix,
        &mut out,
    )?;
    Ok(out)
}

/// Exact `p_θ(y | x, z)` over canonical solutions, sorted by visit sequence.
pub fn enumerate_policy(
    cache: &DecoderCache,
    z: &[f64],
    instance: &ProblemInstance,
) -> Result<EnumeratedDistribution<Vec<usize>>> {
    let mut seqs: Vec<(Vec<usize>, f64)> = enumerate_sequences(cache, z, instance)?
        .into_iter()
        .map(|(v, p)| (canonical_tour(instance.kind, &v), p))
        .collect();
    seqs.sort_by(|a, b| a.0.cmp(&b.0));
    let mut support: Vec<Vec<usize>> = Vec::new();
    let mut probabilities: Vec<f64> = Vec::new();
    for (v, p) in seqs {
        if support.last() == Some(&v) {
            *probabilities.last_mut().expect("parallel vectors") += p;
        } else {
            support.push(v);
            probabilities.push(p);
        }
    }
    Ok(EnumeratedDistribution {
        support,
        probabilities,
    })
}

/// `π(z_g, y) ∝ p_φ(z_g | x) p_θ(y | x, z_g) exp(-λ C(y, x))` over a finite
/// latent set and every feasible canonical solution.
pub fn exact_target_grid(
    cache: &DecoderCache,
    encoded: &Encoded,
    instance: &ProblemInstance,
    grid: &[Vec<f64>],
    lambda: f64,
) -> Result<EnumeratedDistribution<(usize, Vec<usize>)>> {
    let mut support = Vec::new();
    let mut logw = Vec::new();
    for (g, z) in grid.iter().enumerate() {
        let pol = enumerate_policy(cache, z, instance)?;
        size("grid states", grid.len() * pol.support.len(), MAX_GRID_STATES)?;
        let prior = encoded.prior_logdensity(z);
        for (y, p) in pol.support.into_iter().zip(pol.probabilities) {
            let c = problems::route_length(instance, &y);
            logw.push(prior + p.ln() - lambda * c);
            support.push((g, y));
        }
    }
    Ok(EnumeratedDistribution::from_log_weights(support, &logw))
}

/// `½ Σ |p - q|` over a common support.
pub fn tv_distance<S: PartialEq>(
    a: &EnumeratedDistribution<S>,
    b: &EnumeratedDistribution<S>,
) -> Result<f64> {
    if a.support != b.support {
        return Err(Error::Contract("tv_distance: supports differ".into()));
    }
    Ok(tv_probs(&a.probabilities, &b.probabilities))
}

fn tv_probs(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// A Markov kernel on states `0..states()` that can be evaluated pointwise.
pub trait Kernel {
    fn states(&self) -> usize;
    fn prob(&self, from: usize, to: usize) -> f64;
    /// States with possibly positive transition probability, `from` included.
    fn reachable(&self, from: usize) -> Vec<usize>;
}

/// Largest `|π(s)P(s,s') - π(s')P(s',s)| / max(π(s)P(s,s'), tiny)` over
/// sampled pairs with `s'` drawn from the states reachable from `s`.
pub fn detailed_balance_check(kernel: &dyn Kernel, target: &[f64], pairs: usize, seed: u64) -> f64 {
    let mut r = rng::stream(seed, Purpose::Harness, 0, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let s = r.gen_range(0..kernel.states());
        let reach = kernel.reachable(s);
        let t = reach[r.gen_range(0..reach.len())];
        worst = worst.max(balance_violation(kernel, target, s, t));
    }
    worst
}

pub fn balance_violation(kernel: &dyn Kernel, target: &[f64], s: usize, t: usize) -> f64 {
    let fwd = target[s] * kernel.prob(s, t);
    let back = target[t] * kernel.prob(t, s);
    (fwd - back).abs() / fwd.max(TINY)
}

/// `TV(πP, π)`.
pub fn stationarity_tv(kernel: &dyn Kernel, target: &[f64]) -> f64 {
    tv_probs(&push_forward(kernel, target), target)
}

/// `μP` for a row vector `μ`.
pub fn push_forward(kernel: &dyn Kernel, mu: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; mu.len()];
    for (s, &ms) in mu.iter().enumerate() {
        if ms != 0.0 {
            for t in kernel.reachable(s) {
                out[t] += ms * kernel.prob(s, t);
            }
        }
    }
    out
}

/// Least-squares slope of `ln y` against the index, over positive entries.
pub fn log_slope(ys: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = ys
        .iter()
        .enumerate()
        .filter(|(_, &y)| y > 0.0)
        .map(|(i, &y)| (i as f64, y.ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Finite test harness: a `side × side` latent grid around the prior mean,
/// spaced in prior standard deviations, with a nearest-neighbour random walk
/// proposal whose off-grid moves are rejected.
#[derive(Debug, Clone)]
pub struct GridHarness {
    pub ctx: SearchContext,
    pub side: usize,
    pub lambda: f64,
    pub grid: Vec<Vec<f64>>,
    pub tours: Vec<Vec<usize>>,
    pub costs: Vec<f64>,
    pub prior: Vec<f64>,
    /// `policy[g][t] = p_θ(tours[t] | x, grid[g])`.
    pub policy: Vec<Vec<f64>>,
    pub target: EnumeratedDistribution<(usize, Vec<usize>)>,
}

impl GridHarness {
    pub fn new(ctx: SearchContext, side: usize, spacing: f64, lambda: f64) -> Result<Self> {
        let enc = &ctx.encoded;
        if enc.mu.len() != 2 {
            return Err(Error::Config("grid harness needs d_z = 2".into()));
        }
        let c = (side as f64 - 1.0) / 2.0;
        let sd: Vec<f64> = enc.logvar.iter().map(|l| (0.5 * l).exp()).collect();
        let grid: Vec<Vec<f64>> = (0..side * side)
            .map(|g| {
                let (i, j) = ((g / side) as f64, (g % side) as f64);
                vec![
                    enc.mu[0] + spacing * sd[0] * (i - c),
                    enc.mu[1] + spacing * sd[1] * (j - c),
                ]
            })
            .collect();
        Self::with_grid(ctx, side, grid, lambda)
    }

    pub fn with_grid(ctx: SearchContext, side: usize, grid: Vec<Vec<f64>>, lambda: f64) -> Result<Self> {
        let target = exact_target_grid(&ctx.cache, &ctx.encoded, &ctx.instance, &grid, lambda)?;
        let mut policy = Vec::with_capacity(grid.len());
        let mut tours: Vec<Vec<usize>> = Vec::new();
        for z in &grid {
            let pol = enumerate_policy(&ctx.cache, z, &ctx.instance)?;
            if tours.is_empty() {
                tours = pol.support.clone();
            } else if tours != pol.support {
                return Err(Error::Contract("policy support varies across the grid".into()));
            }
            policy.push(pol.probabilities);
        }
        let costs = tours
            .iter()
            .map(|t| problems::route_length(&ctx.instance, t))
            .collect();
        let prior = grid.iter().map(|z| ctx.encoded.prior_logdensity(z)).collect();
        Ok(GridHarness {
            ctx,
            side,
            lambda,
            grid,
            tours,
            costs,
            prior,
            policy,
            target,
        })
    }

    pub fn states(&self) -> usize {
        self.grid.len() * self.tours.len()
    }

    pub fn state(&self, g: usize, t: usize) -> usize {
        g * self.tours.len() + t
    }

    pub fn split(&self, s: usize) -> (usize, usize) {
        (s / self.tours.len(), s % self.tours.len())
    }

    /// Grid neighbours in the order up, down, left, right.
    pub fn neighbours(&self, g: usize) -> [Option<usize>; 4] {
        let (i, j, n) = (g / self.side, g % self.side, self.side);
        [
            (i > 0).then(|| g - n),
            (i + 1 < n).then(|| g + n),
            (j > 0).then(|| g - 1),
            (j + 1 < n).then(|| g + 1),
        ]
    }

    pub fn nearest(&self, z: &[f64]) -> usize {
        let d = |g: &Vec<f64>| g.iter().zip(z).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        (0..self.grid.len())
            .min_by(|&a, &b| d(&self.grid[a]).total_cmp(&d(&self.grid[b])))
            .expect("non-empty grid")
    }

    /// Harness state of a particle.
    pub fn locate(&self, z: &[f64], visits: &[usize]) -> Result<usize> {
        let t = self
            .tours
            .binary_search(&canonical_tour(self.ctx.instance.kind, visits))
            .map_err(|_| Error::Contract(format!("solution {visits:?} outside the harness")))?;
        Ok(self.state(self.nearest(z), t))
    }

    pub fn kernel(&self) -> HarnessKernel<'_> {
        HarnessKernel {
            h: self,
            corrupt: false,
        }
    }

    /// Kernel whose acceptance drops the prior density ratio.
    pub fn corrupted_kernel(&self) -> HarnessKernel<'_> {
        HarnessKernel {
            h: self,
            corrupt: true,
        }
    }

    pub fn proposal(&self) -> GridProposal<'_> {
        GridProposal { h: self }
    }

    fn alpha(&self, from: (usize, usize), to: (usize, usize), corrupt: bool) -> f64 {
        let mut log = -self.lambda * (self.costs[to.1] - self.costs[from.1]);
        if !corrupt {
            log += self.prior[to.0] - self.prior[from.0];
        }
        log.min(0.0).exp()
    }

    /// Empirical laws of `chains` independent chains started at grid point
    /// `start`; returns `TV(law_m, π)` for `m = 0..=steps`.
    pub fn empirical_tv_curve(&self, chains: usize, steps: usize, start: usize, seed: u64) -> Result<Vec<f64>> {
        let mut chain = self.start_chain(chains, start, seed)?;
        let proposal = self.proposal();
        let mut curve = vec![self.empirical_tv(&chain)?];
        for _ in 0..steps {
            chain.lgs_step(&self.ctx, &proposal, self.lambda)?;
            curve.push(self.empirical_tv(&chain)?);
        }
        Ok(curve)
    }

    fn start_chain(&self, chains: usize, start: usize, seed: u64) -> Result<ChainState> {
        let particles = (0..chains)
            .map(|k| {
                let mut r = rng::stream(seed, Purpose::Latent, k as u64, 0);
                self.ctx.particle_at(self.grid[start].clone(), &mut r)
            })
            .collect::<Result<Vec<_>>>()?;
        ChainState::from_particles(particles, seed)
    }

    pub fn empirical_law(&self, chain: &ChainState) -> Result<Vec<f64>> {
        let mut counts = vec![0.0; self.states()];
        let w = 1.0 / chain.particles.len() as f64;
        for p in &chain.particles {
            counts[self.locate(&p.z, &p.solution.visits)?] += w;
        }
        Ok(counts)
    }

    fn empirical_tv(&self, chain: &ChainState) -> Result<f64> {
        Ok(tv_probs(&self.empirical_law(chain)?, &self.target.probabilities))
    }

    /// Runs the full guided search on the grid with decoder updates and
    /// returns `TV(law_M, π_{θ_M})` with the target rebuilt at the final
    /// decoder parameters.
    pub fn lgs_final_tv(
        &self,
        chains: usize,
        steps: usize,
        start: usize,
        schedule: &[usize],
        step0: f64,
        seed: u64,
    ) -> Result<(f64, usize)> {
        let mut ctx = self.ctx.clone();
        let mut chain = self.start_chain(chains, start, seed)?;
        let mut sched = SaSchedule::new(schedule);
        let mut sa = SaState::new(SaOptimizer::Sgd, step0);
        for _ in 0..steps {
            let proposal = GridProposal { h: self };
            chain.lgs_step(&ctx, &proposal, self.lambda)?;
            if sched.due(chain.m) {
                sa.update(&mut ctx, &mut chain)?;
            }
        }
        let updates = chain.sa_updates;
        let final_h = GridHarness::with_grid(ctx, self.side, self.grid.clone(), self.lambda)?;
        Ok((final_h.empirical_tv(&chain)?, updates))
    }
}

/// The harness transition kernel with `γ_prop = 0`.
#[derive(Debug, Clone, Copy)]
pub struct HarnessKernel<'a> {
    h: &'a GridHarness,
    corrupt: bool,
}

impl Kernel for HarnessKernel<'_> {
    fn states(&self) -> usize {
        self.h.states()
    }

    fn prob(&self, from: usize, to: usize) -> f64 {
        let h = self.h;
        let (g, t) = h.split(from);
        let step = |g2: usize, t2: usize| 0.25 * h.policy[g2][t2] * h.alpha((g, t), (g2, t2), self.corrupt);
        if from == to {
            let moved: f64 = h
                .neighbours(g)
                .into_iter()
                .flatten()
                .map(|g2| (0..h.tours.len()).map(|t2| step(g2, t2)).sum::<f64>())
                .sum();
            return 1.0 - moved;
        }
        let (g2, t2) = h.split(to);
        if h.neighbours(g).contains(&Some(g2)) {
            step(g2, t2)
        } else {
            0.0
        }
    }

    fn reachable(&self, from: usize) -> Vec<usize> {
        let h = self.h;
        let (g, _) = h.split(from);
        let mut out = vec![from];
        for g2 in h.neighbours(g).into_iter().flatten() {
            out.extend((0..h.tours.len()).map(|t| h.state(g2, t)));
        }
        out
    }
}

/// Uniform move to one of the four grid neighbours; `None` off the grid.
#[derive(Debug, Clone, Copy)]
pub struct GridProposal<'a> {
    h: &'a GridHarness,
}

impl Proposal for GridProposal<'_> {
    fn propose(&self, cloud: &[Vec<f64>], k: usize, rng: &mut Rng) -> Option<Vec<f64>> {
        let g = self.h.nearest(&cloud[k]);
        let dir = rng.gen_range(0..4);
        self.h.neighbours(g)[dir].map(|g2| self.h.grid[g2].clone())
    }
}

/// `Σ_y p_θ(y) (C(y) - b) ∇_θ log p_θ(y | x, z)` by enumeration, over decoder
/// parameters.
pub fn exact_score_expectation(
    model: &Model,
    encoded: &Encoded,
    instance: &ProblemInstance,
    z: &[f64],
    baseline: f64,
) -> Result<Gradients> {
    size("gradient-check nodes", instance.n, MAX_GRADCHECK)?;
    let cache = model.decoder_cache(encoded)?;
    let seqs = enumerate_sequences(&cache, z, instance)?;
    let mut tape = Tape::new();
    let nodes = tape.constant(encoded.nodes.clone());
    let dec = model.decoder_on(&mut tape, nodes)?;
    let zv = tape.constant(Array::row_vector(z.to_vec()));
    let mut parts = Vec::with_capacity(seqs.len());
    for (y, p) in &seqs {
        let lp = model.log_prob_on(&mut tape, &dec, zv, instance, y)?;
        let c = problems::route_length(instance, y);
        parts.push(tape.scale(lp, p * (c - baseline)));
    }
    let all = tape.concat_cols(&parts)?;
    let s = tape.sum(all);
    let mut g = tape.gradient(s)?;
    g.retain(|id| model.is_decoder(id));
    Ok(g)
}

/// `E_{p_θ}[C]` by enumeration.
pub fn expected_cost(cache: &DecoderCache, z: &[f64], instance: &ProblemInstance) -> Result<f64> {
    Ok(enumerate_sequences(cache, z, instance)?
        .iter()
        .map(|(y, p)| p * problems::route_length(instance, y))
        .sum())
}

/// Largest relative error (floor `1e-3`) between the exact score-function
/// expectation and central differences of `E[C]` over every decoder
/// parameter component.
pub fn policy_gradient_check(
    model: &Model,
    encoded: &Encoded,
    instance: &ProblemInstance,
    z: &[f64],
    baseline: f64,
) -> Result<f64> {
    const H: f64 = 1e-5;
    let exact = exact_score_expectation(model, encoded, instance, z, baseline)?;
    let mut m = model.clone();
    let mut worst: f64 = 0.0;
    for (id, g) in exact.iter() {
        for i in 0..g.data().len() {
            let orig = m.params.get(id).data()[i];
            m.params.get_mut(id).data_mut()[i] = orig + H;
            let up = expected_cost(&m.decoder_cache(encoded)?, z, instance)?;
            m.params.get_mut(id).data_mut()[i] = orig - H;
            let down = expected_cost(&m.decoder_cache(encoded)?, z, instance)?;
            m.params.get_mut(id).data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * H);
            worst = worst.max(rel_err(g.data()[i], fd, 1e-3));
        }
    }
    Ok(worst)
}

/// Convenience: a drift-free Gaussian proposal, the theory-exact setting.
pub fn symmetric_proposal(var: f64) -> GaussianDrift {
    GaussianDrift { var, drift: 0.0 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::problems::generate_instance;

    fn square() -> ProblemInstance {
        let mut inst = generate_instance(ProblemKind::Tsp, 4, 0).unwrap();
        inst.coords = vec![[0.0, 0.0], [1.0, 1.0], [0.0, 1.0], [1.0, 0.0]];
        inst
    }

    fn perm_min(inst: &ProblemInstance) -> f64 {
        fn go(inst: &ProblemInstance, rest: &mut Vec<usize>, path: &mut Vec<usize>, best: &mut f64) {
            if rest.is_empty() {
                *best = best.min(problems::route_length(inst, path));
                return;
            }
            for i in 0..rest.len() {
                let v = rest.remove(i);
                path.push(v);
                go(inst, rest, path, best);
                path.pop();
                rest.insert(i, v);
            }
        }
        let mut best = f64::INFINITY;
        go(inst, &mut (0..inst.n).collect(), &mut Vec::new(), &mut best);
        best
    }

    #[test]
    fn tsp_trivial_cases() {
        let sq = brute_force_tsp(&square()).unwrap();
        assert!((sq.cost - 4.0).abs() < 1e-12);
        let tri = generate_instance(ProblemKind::Tsp, 3, 5).unwrap();
        let t = brute_force_tsp(&tri).unwrap();
        let per = tri.dist(0, 1) + tri.dist(1, 2) + tri.dist(2, 0);
        assert!((t.cost - per).abs() < 1e-12);
        let big = generate_instance(ProblemKind::Tsp, 11, 1).unwrap();
        assert!(matches!(brute_force_tsp(&big), Err(Error::Size { .. })));
    }

    #[test]
    fn tsp_matches_all_permutations() {
        for seed in 0..5 {
            let inst = generate_instance(ProblemKind::Tsp, 7, seed).unwrap();
            let b = brute_force_tsp(&inst).unwrap();
            assert!((b.cost - perm_min(&inst)).abs() < 1e-12);
            b.verify(&inst).unwrap();
        }
    }

    #[test]
    fn tsp_optimum_is_augmentation_invariant() {
        let inst = generate_instance(ProblemKind::Tsp, 7, 7).unwrap();
        let base = brute_force_tsp(&inst).unwrap().cost;
        for v in problems::augment(&inst) {
            assert!((brute_force_tsp(&v).unwrap().cost - base).abs() < 1e-9);
        }
    }

    #[test]
    fn cvrp_trivial_cases() {
        let one = generate_instance(ProblemKind::Cvrp, 1, 3).unwrap();
        let s = brute_force_cvrp(&one).unwrap();
        assert_eq!(s.visits, vec![1, 0]);
        assert!((s.cost - 2.0 * one.dist(0, 1)).abs() < 1e-12);
        let mut two = generate_instance(ProblemKind::Cvrp, 2, 4).unwrap();
        two.demands = vec![0.0, 6.0, 6.0];
        two.capacity = Some(10.0);
        let s = brute_force_cvrp(&two).unwrap();
        assert_eq!(s.visits.iter().filter(|&&v| v == 0).count(), 2);
        assert!((s.cost - 2.0 * (two.dist(0, 1) + two.dist(0, 2))).abs() < 1e-12);
        let big = generate_instance(ProblemKind::Cvrp, 9, 1).unwrap();
        assert!(matches!(brute_force_cvrp(&big), Err(Error::Size { .. })));
    }

    #[test]
    fn cvrp_with_loose_capacity_is_a_tsp() {
        for seed in 0..4 {
            let mut inst = generate_instance(ProblemKind::Cvrp, 6, seed).unwrap();
            inst.capacity = Some(1e3);
            let s = brute_force_cvrp(&inst).unwrap();
            let mut tsp = generate_instance(ProblemKind::Tsp, 7, 0).unwrap();
            tsp.coords.clone_from(&inst.coords);
            assert!((s.cost - brute_force_tsp(&tsp).unwrap().cost).abs() < 1e-9);
        }
    }

    #[test]
    fn cvrp_optimum_never_beaten_by_sampled_rollouts() {
        let model = Model::init(ModelConfig::tiny(ProblemKind::Cvrp, 2), 2).unwrap();
        for seed in 0..4 {
            let mut inst = generate_instance(ProblemKind::Cvrp, 5, seed).unwrap();
            inst.capacity = Some(12.0);
            let best = brute_force_cvrp(&inst).unwrap();
            best.verify(&inst).unwrap();
            let enc = model.encode(&inst).unwrap();
            let cache = model.decoder_cache(&enc).unwrap();
            for (y, _) in enumerate_sequences(&cache, &enc.mu, &inst).unwrap() {
                assert!(problems::route_length(&inst, &y) >= best.cost - 1e-12);
            }
        }
    }

    #[test]
    fn policy_enumeration_laws() {
        let model = Model::init(ModelConfig::tiny(ProblemKind::Tsp, 2), 4).unwrap();
        let inst = generate_instance(ProblemKind::Tsp, 3, 1).unwrap();
        let enc = model.encode(&inst).unwrap();
        let cache = model.decoder_cache(&enc).unwrap();
        let pol = enumerate_policy(&cache, &[0.3, -0.2], &inst).unwrap();
        assert_eq!(pol.support.len(), 2);
        assert!((pol.total() - 1.0).abs() < 1e-12);
        let inst6 = generate_instance(ProblemKind::Tsp, 6, 1).unwrap();
        let enc6 = model.encode(&inst6).unwrap();
        let c6 = model.decoder_cache(&enc6).unwrap();
        let pol = enumerate_policy(&c6, &[1.0, 0.5], &inst6).unwrap();
        assert_eq!(pol.support.len(), 120);
        assert!((pol.total() - 1.0).abs() < 1e-8);
        assert!(pol.probabilities.iter().all(|&p| p > 0.0));
        let big = generate_instance(ProblemKind::Tsp, 8, 1).unwrap();
        let encb = model.encode(&big).unwrap();
        let cb = model.decoder_cache(&encb).unwrap();
        assert!(matches!(enumerate_policy(&cb, &[0.0, 0.0], &big), Err(Error::Size { .. })));
    }

    #[test]
    fn sharpened_policy_concentrates_on_greedy() {
        let build = |inst: &ProblemInstance, omega: f64| {
            let mut cfg = ModelConfig::tiny(ProblemKind::Tsp, 2);
            cfg.omega = omega;
            let model = Model::init(cfg, 9).unwrap();
            let enc = model.encode(inst).unwrap();
            (model.decoder_cache(&enc).unwrap(), enc.mu)
        };
        // Smallest greedy-vs-runner-up logit gap at unit scale.
        let greedy_gap = |inst: &ProblemInstance| {
            let (unit, z) = build(inst, 1.0);
            let lq = unit.latent_query(&z).unwrap();
            let mut state = RouteState::new(inst);
            let mut gap = f64::INFINITY;
            while !state.is_complete() {
                let p = unit.decode_step(&lq, inst, &state).unwrap();
                let mut logits: Vec<f64> = p.iter().filter(|&&x| x > 0.0).map(|x| x.ln()).collect();
                logits.sort_by(|a, b| b.total_cmp(a));
                if logits.len() > 1 {
                    gap = gap.min(logits[0] - logits[1]);
                }
                state.step(inst, crate::model::argmax(&p, &state.mask(inst))).unwrap();
            }
            gap
        };
        let inst = generate_instance(ProblemKind::Tsp, 5, 9).unwrap();
        let gap = greedy_gap(&inst);
        assert!(gap > 0.0);
        let (cache, z) = build(&inst, 12.0 / gap);
        let pol = enumerate_policy(&cache, &z, &inst).unwrap();
        let (i, &pmax) = pol
            .probabilities
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        assert!(pmax > 0.999, "{pmax}");
        let mut r = rng::stream(0, Purpose::Rollout, 0, 0);
        let greedy = cache
            .rollout(&z, &inst, &mut r, crate::model::DecodeMode::Greedy)
            .unwrap();
        assert_eq!(canonical_tour(ProblemKind::Tsp, &greedy.solution.visits), pol.support[i]);
    }

    #[test]
    fn tv_closed_forms() {
        let d = |p: Vec<f64>| EnumeratedDistribution {
            support: vec![0, 1],
            probabilities: p,
        };
        assert_eq!(tv_distance(&d(vec![0.7, 0.3]), &d(vec![0.7, 0.3])).unwrap(), 0.0);
        assert!((tv_distance(&d(vec![1.0, 0.0]), &d(vec![0.0, 1.0])).unwrap() - 1.0).abs() < 1e-15);
        assert!((tv_distance(&d(vec![0.7, 0.3]), &d(vec![0.5, 0.5])).unwrap() - 0.2).abs() < 1e-15);
        let other = EnumeratedDistribution {
            support: vec![0, 2],
            probabilities: vec![0.5, 0.5],
        };
        assert!(matches!(tv_distance(&d(vec![0.5, 0.5]), &other), Err(Error::Contract(_))));
    }

    fn harness(side: usize, seed: u64) -> GridHarness {
        let model = Model::init(ModelConfig::tiny(ProblemKind::Tsp, 2), seed).unwrap();
        let inst = generate_instance(ProblemKind::Tsp, 4, seed).unwrap();
        GridHarness::new(SearchContext::new(&model, &inst).unwrap(), side, 0.75, 1.0).unwrap()
    }

    #[test]
    fn grid_target_factorises() {
        let model = Model::init(ModelConfig::tiny(ProblemKind::Tsp, 2), 3).unwrap();
        let inst = generate_instance(ProblemKind::Tsp, 4, 3).unwrap();
        let ctx = SearchContext::new(&model, &inst).unwrap();
        let grid = vec![vec![0.1, 0.2], vec![-0.4, 0.3], vec![0.0, -1.0]];
        let t = exact_target_grid(&ctx.cache, &ctx.encoded, &inst, &grid, 0.0).unwrap();
        assert!((t.total() - 1.0).abs() < 1e-12);
        let w: Vec<f64> = grid.iter().map(|z| ctx.encoded.prior_logdensity(z).exp()).collect();
        let wsum: f64 = w.iter().sum();
        for (g, z) in grid.iter().enumerate() {
            let pol = enumerate_policy(&ctx.cache, z, &inst).unwrap();
            for (y, p) in pol.support.iter().zip(&pol.probabilities) {
                let got = t.prob_of(&(g, y.clone())).unwrap();
                assert!((got - p * w[g] / wsum).abs() < 1e-12);
            }
        }
        let single = exact_target_grid(&ctx.cache, &ctx.encoded, &inst, &grid[..1], 1.5).unwrap();
        let pol = enumerate_policy(&ctx.cache, &grid[0], &inst).unwrap();
        let tilted: Vec<f64> = pol
            .support
            .iter()
            .zip(&pol.probabilities)
            .map(|(y, p)| p * (-1.5 * problems::route_length(&inst, y)).exp())
            .collect();
        let z: f64 = tilted.iter().sum();
        for (a, b) in single.probabilities.iter().zip(&tilted) {
            assert!((a - b / z).abs() < 1e-12);
        }
    }

    #[test]
    fn harness_kernel_balance_and_stationarity() {
        let h = harness(3, 1);
        let k = h.kernel();
        for s in 0..h.states() {
            let row: f64 = k.reachable(s).iter().map(|&t| k.prob(s, t)).sum();
            assert!((row - 1.0).abs() < 1e-12);
            assert_eq!(balance_violation(&k, &h.target.probabilities, s, s), 0.0);
        }
        assert!(detailed_balance_check(&k, &h.target.probabilities, 2000, 1) < 1e-10);
        assert!(stationarity_tv(&k, &h.target.probabilities) < 1e-10);
        let bad = h.corrupted_kernel();
        assert!(detailed_balance_check(&bad, &h.target.probabilities, 2000, 1) > 1e-3);
    }

    #[test]
    fn target_logweight_matches_grid_target() {
        let h = harness(3, 2);
        let logw: Vec<f64> = (0..h.states())
            .map(|s| {
                let (g, t) = h.split(s);
                crate::inference::target_logweight(h.prior[g], h.costs[t], h.lambda) + h.policy[g][t].ln()
            })
            .collect();
        let rebuilt = EnumeratedDistribution::from_log_weights(h.target.support.clone(), &logw);
        assert!(tv_distance(&rebuilt, &h.target).unwrap() < 1e-10);
    }

    #[test]
    fn score_expectation_laws() {
        let model = Model::init(ModelConfig::tiny(ProblemKind::Tsp, 2), 6).unwrap();
        let inst = generate_instance(ProblemKind::Tsp, 4, 6).unwrap();
        let enc = model.encode(&inst).unwrap();
        let z = [0.2, -0.1];
        let a = exact_score_expectation(&model, &enc, &inst, &z, 0.0).unwrap();
        let b = exact_score_expectation(&model, &enc, &inst, &z, 10.0).unwrap();
        let mut d = a.clone();
        d.add_scaled(&b, -1.0);
        assert!(d.max_abs() < 1e-10);
        let err = policy_gradient_check(&model, &enc, &inst, &z, 1.0).unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn score_expectation_vanishes_for_constant_cost() {
        // Every 3-node tour has the triangle's perimeter as its cost.
        let model = Model::init(ModelConfig::tiny(ProblemKind::Tsp, 2), 7).unwrap();
        let inst = generate_instance(ProblemKind::Tsp, 3, 7).unwrap();
        let enc = model.encode(&inst).unwrap();
        for b in [0.0, 5.0] {
            let g = exact_score_expectation(&model, &enc, &inst, &[0.1, 0.4], b).unwrap();
            assert!(g.max_abs() < 1e-10);
        }
    }

    #[test]
    fn log_slope_of_geometric_decay() {
        let ys: Vec<f64> = (0..20).map(|i| 0.8f64.powi(i)).collect();
        assert!((log_slope(&ys) - 0.8f64.ln()).abs() < 1e-12);
    }
}
