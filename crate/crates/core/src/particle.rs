//! Exact-in-law simulation of the branching OU particle system.
//!
//! Each particle proposes events at the constant rate `B ≥ sup β`, moves by
//! the exact OU transition between proposals, and branches with probability
//! `β(x)/B`. Particles are processed depth first; every particle evolves
//! independently once born, so the processing order does not change the law.

use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{ModelSpec, OffspringLaw};
use crate::spectral::OUParams;

/// Default population cap per replicate.
pub const DEFAULT_POP_CAP: usize = 2_000_000;

/// Positions of the particles alive at time `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Configuration {
    pub t: f64,
    dim: usize,
    coords: Vec<f64>,
}

impl Configuration {
    pub fn empty(t: f64, dim: usize) -> Self {
        Self { t, dim, coords: Vec::new() }
    }

    pub fn single(x: &[f64]) -> Self {
        Self { t: 0.0, dim: x.len(), coords: x.to_vec() }
    }

    pub fn from_positions(t: f64, dim: usize, positions: &[Vec<f64>]) -> Result<Self> {
        let mut c = Self::empty(t, dim);
        for p in positions {
            if p.len() != dim {
                return Err(invalid("positions", format!("expected {dim} coordinates, got {}", p.len())));
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(invalid("positions", format!("non-finite coordinate in {p:?}")));
            }
            c.coords.extend_from_slice(p);
        }
        Ok(c)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.coords.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn positions(&self) -> impl Iterator<Item = &[f64]> {
        self.coords.chunks_exact(self.dim.max(1))
    }

    fn push(&mut self, x: &[f64]) {
        self.coords.extend_from_slice(x);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub horizon: f64,
    /// Ascending, within `[0, horizon]`; the horizon itself is always the
    /// last snapshot.
    pub snapshot_times: Vec<f64>,
    pub pop_cap: usize,
    pub rng_seed: u64,
    pub thinning_bound: f64,
}

impl SimConfig {
    /// Validates the times and checks the thinning bound against `β` on the
    /// model's quadrature grid.
    pub fn new(model: &ModelSpec, horizon: f64, snapshot_times: &[f64], pop_cap: usize, rng_seed: u64) -> Result<Self> {
        Self::with_bound(model, horizon, snapshot_times, pop_cap, rng_seed, model.beta().sup())
    }

    pub fn with_bound(
        model: &ModelSpec,
        horizon: f64,
        snapshot_times: &[f64],
        pop_cap: usize,
        rng_seed: u64,
        thinning_bound: f64,
    ) -> Result<Self> {
        if !(horizon >= 0.0 && horizon.is_finite()) {
            return Err(invalid("horizon", format!("must be finite and nonnegative, got {horizon}")));
        }
        if pop_cap < 1 {
            return Err(invalid("pop_cap", "must be at least 1"));
        }
        let mut times = snapshot_times.to_vec();
        if times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(invalid("snapshot_times", "must be strictly ascending"));
        }
        if times.iter().any(|&t| !(0.0..=horizon).contains(&t)) {
            return Err(invalid("snapshot_times", format!("must lie in [0, {horizon}]")));
        }
        if times.last() != Some(&horizon) {
            times.push(horizon);
        }
        if !(thinning_bound >= 0.0 && thinning_bound.is_finite()) {
            return Err(invalid("thinning_bound", format!("must be finite and nonnegative, got {thinning_bound}")));
        }
        for x in model.basis().grid().nodes() {
            let beta = model.beta().eval(x);
            if beta > thinning_bound {
                return Err(Error::ThinningBoundViolated { position: x.to_vec(), beta, bound: thinning_bound });
            }
        }
        Ok(Self { horizon, snapshot_times: times, pop_cap, rng_seed, thinning_bound })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// One configuration per entry of `SimConfig::snapshot_times`. A capped
    /// trajectory holds the partial state reached before the cap tripped.
    pub snapshots: Vec<Configuration>,
    pub extinct: bool,
    pub capped: bool,
    pub event_count: u64,
}

impl Trajectory {
    pub fn snapshot(&self, t: f64) -> Option<&Configuration> {
        self.snapshots.iter().find(|c| c.t == t)
    }

    pub fn final_snapshot(&self) -> &Configuration {
        self.snapshots.last().expect("trajectories always carry the horizon snapshot")
    }
}

/// Counter-based stream for replicate `replicate`: the same `(seed,
/// replicate)` always yields the same draws, independent of scheduling.
pub fn replicate_rng(seed: u64, replicate: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate);
    rng
}

/// Exact OU step: mean `x e^{−b dt}`, variance `σ²(1 − e^{−2b dt})/(2b)`
/// per coordinate.
pub fn ou_transition<R: Rng + ?Sized>(x: &[f64], dt: f64, params: &OUParams, rng: &mut R) -> Vec<f64> {
    let mut out = x.to_vec();
    ou_step(&mut out, dt, params, rng);
    out
}

fn ou_step<R: Rng + ?Sized>(x: &mut [f64], dt: f64, params: &OUParams, rng: &mut R) {
    if dt == 0.0 {
        return;
    }
    let decay = (-params.b() * dt).exp();
    let sd = params.transition_variance(dt).sqrt();
    for xi in x.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *xi = *xi * decay + sd * z;
    }
}

enum OffspringSampler<'a> {
    Fixed(Vec<f64>),
    Spatial(&'a OffspringLaw),
}

impl OffspringSampler<'_> {
    fn sample<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> usize {
        let u: f64 = rng.random();
        match self {
            OffspringSampler::Fixed(cdf) => cdf.iter().position(|&c| u < c).unwrap_or(cdf.len() - 1),
            OffspringSampler::Spatial(law) => {
                let pmf = law.pmf(x);
                let mut acc = 0.0;
                for (n, p) in pmf.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return n;
                    }
                }
                pmf.len() - 1
            }
        }
    }
}

/// Simulates one trajectory from `init` (at time 0) to `cfg.horizon`.
pub fn simulate<R: Rng + ?Sized>(model: &ModelSpec, init: &Configuration, cfg: &SimConfig, rng: &mut R) -> Result<Trajectory> {
    let dim = model.ou().d();
    if init.dim() != dim && !init.is_empty() {
        return Err(invalid("init", format!("configuration has dimension {}, model has {dim}", init.dim())));
    }
    let times = &cfg.snapshot_times;
    let mut snapshots: Vec<Configuration> = times.iter().map(|&t| Configuration::empty(t, dim)).collect();
    let sampler = match model.offspring().as_fixed() {
        Some(p) => OffspringSampler::Fixed(
            p.iter()
                .scan(0.0, |acc, q| {
                    *acc += q;
                    Some(*acc)
                })
                .collect(),
        ),
        None => OffspringSampler::Spatial(model.offspring()),
    };
    let bound = cfg.thinning_bound;
    let ou = model.ou();

    // (position, birth time)
    let mut stack: Vec<(Vec<f64>, f64)> = init.positions().map(|p| (p.to_vec(), 0.0)).collect();
    let mut events = 0u64;
    let mut capped = false;

    'particles: while let Some((mut x, mut s)) = stack.pop() {
        let mut next = times.partition_point(|&t| t < s);
        loop {
            let tau = if bound > 0.0 { rng.sample::<f64, _>(Exp1) / bound } else { f64::INFINITY };
            let proposal = s + tau;
            while next < times.len() && times[next] < proposal {
                ou_step(&mut x, times[next] - s, ou, rng);
                s = times[next];
                snapshots[next].push(&x);
                if snapshots[next].len() > cfg.pop_cap {
                    capped = true;
                    break 'particles;
                }
                next += 1;
            }
            if next == times.len() {
                break;
            }
            ou_step(&mut x, proposal - s, ou, rng);
            s = proposal;
            events += 1;
            let beta = model.beta().eval(&x);
            if beta > bound {
                return Err(Error::ThinningBoundViolated { position: x, beta, bound });
            }
            let u: f64 = rng.random();
            if u * bound < beta {
                let n = sampler.sample(&x, rng);
                if stack.len() + n > cfg.pop_cap {
                    capped = true;
                    break 'particles;
                }
                for _ in 0..n {
                    stack.push((x.clone(), s));
                }
                break;
            }
        }
    }
    let extinct = !capped && snapshots.last().is_some_and(|c| c.is_empty());
    Ok(Trajectory { snapshots, extinct, capped, event_count: events })
}

/// `⟨f, X⟩ = Σ f(x_i)`.
pub fn functional<F: Fn(&[f64]) -> f64 + ?Sized>(config: &Configuration, f: &F) -> Result<f64> {
    let mut total = 0.0;
    for x in config.positions() {
        let v = f(x);
        if !v.is_finite() {
            return Err(Error::NonFiniteFunctional { position: x.to_vec(), value: v });
        }
        total += v;
    }
    Ok(total)
}

/// `W_t = e^{λ_1 t}⟨φ_1, X_t⟩`.
pub fn martingale_w(config: &Configuration, model: &ModelSpec) -> f64 {
    let basis = model.basis();
    let sum: f64 = config.positions().map(|x| basis.eval(0, 0, x)).sum();
    (basis.lambda1() * config.t).exp() * sum
}

/// `H_t^{k,j} = e^{λ_k t}⟨φ_j^{(k)}, X_t⟩` with zero-based `(level, index)`.
pub fn martingale_h(config: &Configuration, model: &ModelSpec, level: usize, index: usize) -> Result<f64> {
    let basis = model.basis();
    basis.eigenfunction(level, index)?;
    let sum: f64 = config.positions().map(|x| basis.eval(level, index, x)).sum();
    Ok((basis.eigenvalue(level) * config.t).exp() * sum)
}

/// Finite-horizon proxy for survival: alive at the horizon with terminal
/// `W ≥ threshold`. `None` for capped trajectories.
pub fn survival_indicator(traj: &Trajectory, model: &ModelSpec, threshold: f64) -> Option<bool> {
    if traj.capped {
        return None;
    }
    let last = traj.final_snapshot();
    Some(!last.is_empty() && martingale_w(last, model) >= threshold)
}

/// Runs `n` independent replicates in parallel and maps each trajectory
/// through `summarize`. Output order is the replicate order.
pub fn simulate_ensemble<T, S>(
    model: &ModelSpec,
    init: &Configuration,
    cfg: &SimConfig,
    n: usize,
    summarize: S,
) -> Result<Vec<T>>
where
    T: Send,
    S: Fn(usize, Trajectory) -> Result<T> + Sync,
{
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = replicate_rng(cfg.rng_seed, i as u64);
            let traj = simulate(model, init, cfg, &mut rng)?;
            summarize(i, traj)
        })
        .collect()
}

pub fn write_trajectory_header<W: Write>(out: &mut W, dim: usize) -> io::Result<()> {
    write!(out, "replicate,snapshot_time,particle_index")?;
    for r in 0..dim {
        write!(out, ",x{r}")?;
    }
    writeln!(out)
}

/// One row per `(replicate, snapshot_time, particle_index, coordinates…)`.
pub fn write_trajectory_rows<W: Write>(out: &mut W, replicate: usize, traj: &Trajectory) -> io::Result<()> {
    for snap in &traj.snapshots {
        for (i, x) in snap.positions().enumerate() {
            write!(out, "{replicate},{},{i}", snap.t)?;
            for v in x {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}
