//! Exact discrete-event simulation with replication statistics.
//!
//! Replications run in parallel but are folded into the statistics in seed
//! order, so estimates do not depend on the number of threads.

mod arrivals;
mod engine;
mod stats;

pub use arrivals::{gen_arrivals, scaled_rate, staffing_epochs, staffing_level, Thinning};
pub use engine::{run_replication, Counts, SamplePath};
pub use stats::RunningStats;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::table::{Cell, Table};

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub spec: ModelSpec,
    /// Scale `n`.
    pub n: f64,
    pub reps: usize,
    pub seed: u64,
    /// Observation grid step.
    pub obs_step: f64,
    pub horizon: f64,
    /// Worker threads for replications.
    pub parallel: usize,
}

impl SimConfig {
    pub fn new(spec: ModelSpec, n: f64, reps: usize, seed: u64, obs_step: f64) -> Result<Self> {
        let horizon = spec.horizon;
        let cfg = SimConfig {
            spec,
            n,
            reps,
            seed,
            obs_step,
            horizon,
            parallel: 1,
        };
        cfg.check()?;
        Ok(cfg)
    }

    pub fn check(&self) -> Result<()> {
        if !(self.n >= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "n must be at least 1 (got {})",
                self.n
            )));
        }
        if self.reps < 1 {
            return Err(Error::InvalidArgument(
                "need at least one replication".into(),
            ));
        }
        if !(self.obs_step > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "observation step must be positive (got {})",
                self.obs_step
            )));
        }
        if self.horizon > self.spec.horizon * (1.0 + 1e-12) {
            return Err(Error::InvalidArgument(format!(
                "observation horizon {} exceeds the model horizon {}",
                self.horizon, self.spec.horizon
            )));
        }
        if self.spec.c_lambda != 1.0 {
            return Err(Error::InvalidArgument(
                "the simulator generates Poisson arrivals only (c_lambda = 1)".into(),
            ));
        }
        let spec = &self.spec;
        if !(spec.mu > 0.0) || !(spec.x0 >= 0.0) || !(spec.horizon > 0.0) {
            return Err(Error::InvalidArgument(
                "simulation needs mu > 0, x0 >= 0 and a positive horizon".into(),
            ));
        }
        let steps = 1000;
        for k in 0..=steps {
            let t = spec.horizon * k as f64 / steps as f64;
            if scaled_rate(spec, self.n, t) < 0.0 || spec.staffing.value(t) < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "negative arrival rate or staffing at t = {t}"
                )));
            }
        }
        Ok(())
    }

    /// Observation times `k · step` on `[0, horizon]`, plus the horizon itself if it is off-grid.
    pub fn grid(&self) -> Vec<f64> {
        let m = (self.horizon / self.obs_step + 1e-9).floor() as usize;
        let mut g: Vec<f64> = (0..=m).map(|k| k as f64 * self.obs_step).collect();
        if *g.last().unwrap() < self.horizon - 1e-9 * self.obs_step {
            g.push(self.horizon);
        }
        g
    }
}

/// Replication statistics per observation time.
#[derive(Debug, Clone)]
pub struct SimEstimate {
    pub n: f64,
    pub reps: usize,
    pub t: Vec<f64>,
    pub x: Vec<RunningStats>,
    pub q: Vec<RunningStats>,
    pub b: Vec<RunningStats>,
    pub w: Vec<RunningStats>,
    pub v: Vec<RunningStats>,
    pub a: Vec<RunningStats>,
    /// Largest conservation gap seen at the horizon (0 when exact).
    pub conservation_gap: i64,
}

impl SimEstimate {
    fn empty(n: f64, t: Vec<f64>) -> Self {
        let m = t.len();
        SimEstimate {
            n,
            reps: 0,
            t,
            x: vec![RunningStats::default(); m],
            q: vec![RunningStats::default(); m],
            b: vec![RunningStats::default(); m],
            w: vec![RunningStats::default(); m],
            v: vec![RunningStats::default(); m],
            a: vec![RunningStats::default(); m],
            conservation_gap: 0,
        }
    }

    fn add(&mut self, p: &SamplePath) {
        self.reps += 1;
        for k in 0..self.t.len() {
            self.x[k].push(p.x[k] as f64);
            self.q[k].push(p.q[k] as f64);
            self.b[k].push(p.b[k] as f64);
            self.w[k].push(p.w[k]);
            if p.v[k].is_finite() {
                self.v[k].push(p.v[k]);
            }
            self.a[k].push(p.a[k] as f64);
        }
        let gap = p.at_horizon.conservation_gap().abs();
        self.conservation_gap = self.conservation_gap.max(gap);
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new(&[
            "t",
            "mean_X",
            "se_X",
            "var_X",
            "mean_Q",
            "var_Q",
            "mean_B",
            "var_B",
            "mean_W",
            "var_W",
            "mean_V",
            "var_V",
            "mean_A",
            "var_A",
            "scaled_mean_X",
            "scaled_var_X",
            "scaled_var_W",
            "scaled_var_V",
            "count_V",
        ]);
        let n = self.n;
        for k in 0..self.t.len() {
            t.push(vec![
                self.t[k].into(),
                self.x[k].mean().into(),
                self.x[k].se().into(),
                self.x[k].variance().into(),
                self.q[k].mean().into(),
                self.q[k].variance().into(),
                self.b[k].mean().into(),
                self.b[k].variance().into(),
                self.w[k].mean().into(),
                self.w[k].variance().into(),
                self.v[k].mean().into(),
                self.v[k].variance().into(),
                self.a[k].mean().into(),
                self.a[k].variance().into(),
                (self.x[k].mean() / n).into(),
                (self.x[k].variance() / n).into(),
                (self.w[k].variance() * n).into(),
                (self.v[k].variance() * n).into(),
                Cell::Int(self.v[k].count as i64),
            ]);
        }
        t
    }
}

/// Runs replications with seeds `seed, seed + 1, …` on `parallel` threads.
pub fn estimate(cfg: &SimConfig) -> Result<SimEstimate> {
    cfg.check()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallel.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let mut est = SimEstimate::empty(cfg.n, cfg.grid());
    // bounded batches keep memory flat for large R
    let batch = 64 * cfg.parallel.max(1);
    let mut next = 0usize;
    while next < cfg.reps {
        let end = (next + batch).min(cfg.reps);
        let paths: Vec<SamplePath> = pool.install(|| {
            (next..end)
                .into_par_iter()
                .map(|r| run_replication(cfg, cfg.seed.wrapping_add(r as u64)))
                .collect()
        });
        for p in &paths {
            est.add(p);
        }
        next = end;
    }
    Ok(est)
}
