//! Bayesian optimisation over `[0, 1]^K` for transform hyperparameters.
//!
//! A Gaussian process with a Matérn-5/2 kernel models the objective; new
//! points maximise expected improvement over random and local candidates.
//! Trials run in small batches on worker threads (kriging-believer
//! batching), and results are recorded in proposal order so a seeded run is
//! reproducible regardless of which worker finishes first.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TunerConfig {
    pub budget: usize,
    pub patience: usize,
    pub min_trials: usize,
    /// Random trials before the surrogate takes over.
    pub initial_random: usize,
    /// Trials evaluated concurrently.
    pub workers: usize,
    pub candidates: usize,
    /// Expected-improvement margin.
    pub xi: f64,
}

impl Default for TunerConfig {
    fn default() -> Self {
        TunerConfig {
            budget: 160,
            patience: 40,
            min_trials: 80,
            initial_random: 10,
            workers: 2,
            candidates: 2000,
            xi: 0.001,
        }
    }
}

impl TunerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 || self.workers == 0 || self.candidates == 0 || self.patience == 0 {
            return Err(Error::Config(format!("invalid tuner configuration {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialPoint {
    pub trial_id: usize,
    pub values: Vec<f64>,
    /// `None` for a failed evaluation.
    pub objective: Option<f64>,
    pub wall_time: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TunerState {
    pub k: usize,
    pub history: Vec<TrialPoint>,
    /// Index into `history` of the best successful trial.
    best: Option<usize>,
    /// Trial count at the last improvement.
    last_improvement: usize,
    pub budget: usize,
    pub patience: usize,
    pub min_trials: usize,
}

impl TunerState {
    pub fn new(k: usize, cfg: &TunerConfig) -> Self {
        TunerState {
            k,
            history: Vec::new(),
            best: None,
            last_improvement: 0,
            budget: cfg.budget,
            patience: cfg.patience,
            min_trials: cfg.min_trials,
        }
    }

    pub fn best(&self) -> Option<&TrialPoint> {
        self.best.map(|i| &self.history[i])
    }

    pub fn best_objective(&self) -> Option<f64> {
        self.best().and_then(|b| b.objective)
    }

    /// Appends a trial, tracking the best-so-far and the improvement clock.
    pub fn record(&mut self, point: TrialPoint) {
        self.history.push(point);
        let idx = self.history.len() - 1;
        if let Some(obj) = self.history[idx].objective {
            if self.best_objective().map_or(true, |b| obj > b) {
                self.best = Some(idx);
                self.last_improvement = self.history.len();
            }
        }
    }

    /// Stop on budget, or once past `min_trials` with no improvement for
    /// `patience` trials.
    pub fn should_stop(&self) -> bool {
        let n = self.history.len();
        n >= self.budget || (n >= self.min_trials && n - self.last_improvement >= self.patience)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "# rtgauntlet tuning history v1")?;
        let mut w = csv::Writer::from_writer(f);
        let mut header = vec!["trial_id".to_string()];
        header.extend((0..self.k).map(|i| format!("v{i}")));
        header.extend(["objective".to_string(), "wall_time".to_string()]);
        w.write_record(&header)?;
        for p in &self.history {
            let mut row = vec![p.trial_id.to_string()];
            row.extend(p.values.iter().map(|v| format!("{v:?}")));
            row.push(p.objective.map(|o| format!("{o:?}")).unwrap_or_default());
            row.push(format!("{:.3}", p.wall_time));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path, cfg: &TunerConfig) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let body: String = text.lines().filter(|l| !l.starts_with('#')).map(|l| format!("{l}\n")).collect();
        let mut r = csv::Reader::from_reader(body.as_bytes());
        let k = r.headers()?.len().checked_sub(3).ok_or_else(|| Error::Artifact {
            path: path.to_path_buf(),
            reason: "tuning history needs trial_id, values, objective, wall_time".into(),
        })?;
        let mut state = TunerState::new(k, cfg);
        for rec in r.records() {
            let rec = rec?;
            let parse = |s: &str| -> Result<f64> {
                s.parse().map_err(|_| Error::Artifact { path: path.to_path_buf(), reason: format!("bad number `{s}`") })
            };
            let values = (1..=k).map(|i| parse(&rec[i])).collect::<Result<Vec<_>>>()?;
            let objective = if rec[k + 1].is_empty() { None } else { Some(parse(&rec[k + 1])?) };
            state.record(TrialPoint {
                trial_id: parse(&rec[0])? as usize,
                values,
                objective,
                wall_time: parse(&rec[k + 2])?,
            });
        }
        Ok(state)
    }
}

fn matern52(a: &[f64], b: &[f64], ls: f64) -> f64 {
    let r = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt() / ls;
    let s5 = 5f64.sqrt() * r;
    (1.0 + s5 + 5.0 * r * r / 3.0) * (-s5).exp()
}

/// Zero-mean GP on standardised targets.
pub struct Gp {
    xs: Vec<Vec<f64>>,
    alpha: DVector<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    ls: f64,
    mean: f64,
    scale: f64,
}

const NOISE: f64 = 1e-6;

impl Gp {
    /// Fits with the length scale maximising the marginal likelihood over a
    /// small grid.
    pub fn fit(xs: &[Vec<f64>], ys: &[f64]) -> Option<Gp> {
        let n = ys.len();
        if n == 0 {
            return None;
        }
        let mean = ys.iter().sum::<f64>() / n as f64;
        let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n as f64;
        let scale = if var > 1e-24 { var.sqrt() } else { 1.0 };
        let z = DVector::from_iterator(n, ys.iter().map(|y| (y - mean) / scale));
        let mut best: Option<(f64, Gp)> = None;
        for &ls in &[0.05, 0.1, 0.2, 0.3, 0.5, 0.8, 1.2, 2.0] {
            let k = DMatrix::from_fn(n, n, |i, j| matern52(&xs[i], &xs[j], ls) + if i == j { NOISE } else { 0.0 });
            let Some(chol) = k.cholesky() else { continue };
            let alpha = chol.solve(&z);
            let logdet: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
            let lml = -0.5 * z.dot(&alpha) - 0.5 * logdet;
            if best.as_ref().map_or(true, |(b, _)| lml > *b) {
                best = Some((lml, Gp { xs: xs.to_vec(), alpha, chol, ls, mean, scale }));
            }
        }
        best.map(|(_, g)| g)
    }

    /// Posterior mean and standard deviation at `x`.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let kx = DVector::from_iterator(self.xs.len(), self.xs.iter().map(|p| matern52(p, x, self.ls)));
        let mu = kx.dot(&self.alpha);
        let v = self.chol.solve(&kx);
        let var = (1.0 + NOISE - kx.dot(&v)).max(1e-12);
        (self.mean + self.scale * mu, self.scale * var.sqrt())
    }
}

/// Expected improvement over `best` for maximisation.
pub fn expected_improvement(mu: f64, sigma: f64, best: f64, xi: f64) -> f64 {
    if sigma <= 0.0 {
        return (mu - best - xi).max(0.0);
    }
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    let imp = mu - best - xi;
    let z = imp / sigma;
    imp * n.cdf(z) + sigma * n.pdf(z)
}

fn propose(state: &TunerState, pending: &[Vec<f64>], cfg: &TunerConfig, seed: u64) -> Vec<f64> {
    let k = state.k;
    let slot = (state.history.len() + pending.len()) as u64;
    let mut r = rng::stream(seed, &[rng::tag("propose"), slot]);
    let done: Vec<&TrialPoint> = state.history.iter().filter(|p| p.objective.is_some()).collect();
    if done.len() + pending.len() < cfg.initial_random.max(1) {
        return (0..k).map(|_| r.gen::<f64>()).collect();
    }
    let mut xs: Vec<Vec<f64>> = done.iter().map(|p| p.values.clone()).collect();
    let mut ys: Vec<f64> = done.iter().map(|p| p.objective.expect("filtered")).collect();
    // Kriging believer: pending points take the current posterior mean.
    for p in pending {
        let believed = Gp::fit(&xs, &ys).map_or(0.0, |g| g.predict(p).0);
        xs.push(p.clone());
        ys.push(believed);
    }
    let Some(gp) = Gp::fit(&xs, &ys) else {
        return (0..k).map(|_| r.gen::<f64>()).collect();
    };
    let incumbent = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let best_x = xs[ys.iter().position(|&y| y == incumbent).expect("max exists")].clone();
    let normal = rand_distr::Normal::new(0.0, 0.05).expect("finite");
    let mut top: Option<(f64, Vec<f64>)> = None;
    for c in 0..cfg.candidates {
        let cand: Vec<f64> = if c % 4 == 3 {
            best_x.iter().map(|&v| (v + r.sample(normal)).clamp(0.0, 1.0)).collect()
        } else {
            (0..k).map(|_| r.gen::<f64>()).collect()
        };
        let (mu, sd) = gp.predict(&cand);
        let ei = expected_improvement(mu, sd, incumbent, cfg.xi);
        if top.as_ref().map_or(true, |(b, _)| ei > *b) {
            top = Some((ei, cand));
        }
    }
    top.expect("candidates > 0").1
}

/// Runs the optimisation loop, maximising `objective` over `[0, 1]^k`.
/// `resume` continues an earlier history; with `history_path` the CSV is
/// rewritten after every batch.
pub fn tune<F>(
    k: usize,
    cfg: &TunerConfig,
    objective: F,
    seed: u64,
    resume: Option<TunerState>,
    history_path: Option<&Path>,
) -> Result<TunerState>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    cfg.validate()?;
    if k == 0 {
        return Err(Error::Config("nothing to tune (K = 0)".into()));
    }
    let mut state = match resume {
        Some(s) if s.k != k => {
            return Err(Error::Config(format!("resumed history has K={}, expected {k}", s.k)));
        }
        Some(mut s) => {
            s.budget = cfg.budget;
            s.patience = cfg.patience;
            s.min_trials = cfg.min_trials;
            s
        }
        None => TunerState::new(k, cfg),
    };
    while !state.should_stop() {
        let room = state.budget - state.history.len();
        let batch = cfg.workers.min(room);
        let mut points: Vec<Vec<f64>> = Vec::with_capacity(batch);
        for _ in 0..batch {
            let p = propose(&state, &points, cfg, seed);
            points.push(p);
        }
        let results: Vec<(Option<f64>, f64)> = std::thread::scope(|s| {
            let handles: Vec<_> = points
                .iter()
                .map(|p| {
                    let f = &objective;
                    s.spawn(move || {
                        let start = Instant::now();
                        let v = match f(p) {
                            Ok(v) if v.is_finite() => Some(v),
                            Ok(v) => {
                                log::warn!("trial returned non-finite objective {v}");
                                None
                            }
                            Err(e) => {
                                log::warn!("trial failed: {e}");
                                None
                            }
                        };
                        (v, start.elapsed().as_secs_f64())
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap_or((None, 0.0))).collect()
        });
        for (values, (obj, wall)) in points.into_iter().zip(results) {
            let trial_id = state.history.len();
            state.record(TrialPoint { trial_id, values, objective: obj, wall_time: wall });
        }
        if let Some(path) = history_path {
            state.write_csv(path)?;
        }
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(v: &[f64]) -> Result<f64> {
        Ok(1.0 - v.iter().map(|x| (x - 0.5).powi(2)).sum::<f64>())
    }

    fn scripted(objs: &[f64], cfg: &TunerConfig) -> usize {
        let mut s = TunerState::new(1, cfg);
        for (i, &o) in objs.iter().enumerate() {
            if s.should_stop() {
                return i;
            }
            s.record(TrialPoint { trial_id: i, values: vec![0.0], objective: Some(o), wall_time: 0.0 });
        }
        objs.len()
    }

    #[test]
    fn patience_and_budget_on_scripted_sequences() {
        let cfg = TunerConfig { budget: 50, patience: 5, min_trials: 20, ..Default::default() };
        // Improvement only at the start: runs to min_trials, not earlier.
        assert_eq!(scripted(&[1.0; 100], &cfg), 20);
        // Improvement at trial 18 (count 19): stop 5 trials later, at 24.
        let mut seq = vec![0.0; 100];
        seq[18] = 1.0;
        assert_eq!(scripted(&seq, &cfg), 24);
        // Always improving: budget bound.
        let rising: Vec<f64> = (0..100).map(|i| i as f64).collect();
        assert_eq!(scripted(&rising, &cfg), 50);
    }

    #[test]
    fn best_is_monotone() {
        let cfg = TunerConfig::default();
        let mut s = TunerState::new(1, &cfg);
        let mut prev = f64::NEG_INFINITY;
        for (i, o) in [0.3, 0.1, 0.5, 0.4, 0.9, 0.2].into_iter().enumerate() {
            s.record(TrialPoint { trial_id: i, values: vec![0.0], objective: Some(o), wall_time: 0.0 });
            let b = s.best_objective().unwrap();
            assert!(b >= prev);
            prev = b;
        }
        assert_eq!(prev, 0.9);
    }

    #[test]
    fn failed_trials_do_not_count_as_best() {
        let cfg = TunerConfig { budget: 6, patience: 10, min_trials: 0, initial_random: 2, candidates: 50, ..Default::default() };
        let state = tune(2, &cfg, |v| if v[0] < 0.5 { Err(Error::Diverged("x".into())) } else { Ok(v[0]) }, 1, None, None).unwrap();
        assert_eq!(state.history.len(), 6);
        let best = state.best().unwrap();
        assert!(best.values[0] >= 0.5);
    }

    #[test]
    fn boundary_optimum_in_one_dimension() {
        let cfg = TunerConfig { budget: 20, patience: 40, min_trials: 20, initial_random: 4, ..Default::default() };
        let state = tune(1, &cfg, |v| Ok(v[0]), 3, None, None).unwrap();
        assert!(state.history.len() <= 20);
        assert!(state.best().unwrap().values[0] > 0.95);
    }

    #[test]
    fn quadratic_optimum_recovered() {
        let cfg = TunerConfig { budget: 60, patience: 60, min_trials: 60, ..Default::default() };
        let state = tune(4, &cfg, quadratic, 7, None, None).unwrap();
        let best = state.best().unwrap();
        for v in &best.values {
            assert!((v - 0.5).abs() < 0.1, "{:?}", best.values);
        }
    }

    #[test]
    fn history_round_trips_and_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tuning.csv");
        let cfg = TunerConfig { budget: 6, patience: 40, min_trials: 0, initial_random: 3, candidates: 100, ..Default::default() };
        let first = tune(2, &cfg, quadratic, 5, None, Some(&path)).unwrap();
        let back = TunerState::read_csv(&path, &cfg).unwrap();
        assert_eq!(back.history.len(), 6);
        assert_eq!(back.best_objective(), first.best_objective());
        let more = TunerConfig { budget: 10, ..cfg.clone() };
        let resumed = tune(2, &more, quadratic, 5, Some(back), None).unwrap();
        assert_eq!(resumed.history.len(), 10);
        assert_eq!(resumed.history[..6].iter().map(|p| &p.values).collect::<Vec<_>>(), first.history.iter().map(|p| &p.values).collect::<Vec<_>>());
    }

    #[test]
    fn gp_interpolates_observations() {
        let xs = vec![vec![0.1], vec![0.5], vec![0.9]];
        let ys = vec![1.0, -1.0, 0.5];
        let gp = Gp::fit(&xs, &ys).unwrap();
        for (x, y) in xs.iter().zip(&ys) {
            let (m, s) = gp.predict(x);
            assert!((m - y).abs() < 1e-3 && s < 1e-2);
        }
    }

    #[test]
    fn expected_improvement_basics() {
        assert_eq!(expected_improvement(1.0, 0.0, 0.5, 0.0), 0.5);
        assert!(expected_improvement(0.0, 1.0, 0.0, 0.0) > 0.39);
        assert!(expected_improvement(0.0, 1.0, 0.0, 0.0) < expected_improvement(0.0, 2.0, 0.0, 0.0));
    }
}
