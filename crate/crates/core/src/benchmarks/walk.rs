//! Random-walk model of unit death: each coordinate of `v` is a feature
//! pre-activation, and `v_i ≤ 0` marks a dead unit.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{NapError, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WalkProcess {
    /// `v += relu(v) ⊙ z`
    Gd,
    /// `v += sign(relu(v) ⊙ z)`
    Sign,
    /// `v += Jᵀ(m ⊙ z)` with `J` the Jacobian of `v/‖v‖` and `m` the relu
    /// mask at `v/‖v‖`.
    NormGd,
    /// Elementwise sign of the `NormGd` increment.
    NormSign,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WalkInit {
    #[default]
    Gaussian,
    Ones,
    NegativeOnes,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WalkState {
    pub v: Vec<f64>,
    pub process: WalkProcess,
    pub steps: u64,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl WalkState {
    pub fn new(v: Vec<f64>, process: WalkProcess) -> Self {
        Self {
            v,
            process,
            steps: 0,
        }
    }

    pub fn dead_count(&self) -> usize {
        self.v.iter().filter(|&&x| x <= 0.0).count()
    }

    pub fn increment(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.v.len() {
            return Err(NapError::shape("walk_step", &[self.v.len()], &[z.len()]));
        }
        let v = &self.v;
        Ok(match self.process {
            WalkProcess::Gd => v.iter().zip(z).map(|(&vi, &zi)| vi.max(0.0) * zi).collect(),
            WalkProcess::Sign => v.iter().zip(z).map(|(&vi, &zi)| sign(vi.max(0.0) * zi)).collect(),
            WalkProcess::NormGd | WalkProcess::NormSign => {
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(NapError::Degenerate("walk state has zero norm".into()));
                }
                let u: Vec<f64> = v.iter().map(|x| x / norm).collect();
                let mz: Vec<f64> = u.iter().zip(z).map(|(&ui, &zi)| if ui > 0.0 { zi } else { 0.0 }).collect();
                let proj: f64 = u.iter().zip(&mz).map(|(a, b)| a * b).sum();
                let inc = mz.iter().zip(&u).map(|(&m, &ui)| (m - ui * proj) / norm);
                if self.process == WalkProcess::NormSign {
                    inc.map(sign).collect()
                } else {
                    inc.collect()
                }
            }
        })
    }
}

/// Advances the walk by one increment driven by `z`.
pub fn walk_step(state: &mut WalkState, z: &[f64]) -> Result<()> {
    let inc = state.increment(z)?;
    for (v, d) in state.v.iter_mut().zip(inc) {
        *v += d;
    }
    state.steps += 1;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WalkStats {
    pub d: usize,
    /// `per_trial[k][t]`: dead count of trial k after t steps (t = 0 is the
    /// initial state).
    pub per_trial: Vec<Vec<usize>>,
    pub mean_dead: Vec<f64>,
}

impl WalkStats {
    pub fn final_dead_fraction(&self) -> f64 {
        self.mean_dead.last().copied().unwrap_or(0.0) / self.d as f64
    }

    /// Number of steps at which a trial's dead count went down.
    pub fn decreases(&self, trial: usize) -> usize {
        self.per_trial[trial].windows(2).filter(|w| w[1] < w[0]).count()
    }

    pub fn mean_decreases(&self) -> f64 {
        let n = self.per_trial.len();
        (0..n).map(|k| self.decreases(k) as f64).sum::<f64>() / n as f64
    }
}

pub fn run_walk(
    d: usize,
    steps: usize,
    process: WalkProcess,
    trials: usize,
    init: WalkInit,
    seed: u64,
) -> Result<WalkStats> {
    if steps == 0 || d == 0 || trials == 0 {
        return Err(NapError::Config("random walk needs d, steps, trials >= 1".into()));
    }
    let mut per_trial = Vec::with_capacity(trials);
    for trial in 0..trials {
        let mut rng = rng::stream(seed, trial as u64);
        let v: Vec<f64> = match init {
            WalkInit::Gaussian => (0..d).map(|_| rng.sample(StandardNormal)).collect(),
            WalkInit::Ones => vec![1.0; d],
            WalkInit::NegativeOnes => vec![-1.0; d],
        };
        let mut state = WalkState::new(v, process);
        let mut counts = Vec::with_capacity(steps + 1);
        counts.push(state.dead_count());
        let mut z = vec![0.0; d];
        for _ in 0..steps {
            for zi in z.iter_mut() {
                *zi = rng.sample(StandardNormal);
            }
            walk_step(&mut state, &z)?;
            counts.push(state.dead_count());
        }
        per_trial.push(counts);
    }
    let mean_dead = (0..=steps)
        .map(|t| per_trial.iter().map(|c| c[t] as f64).sum::<f64>() / trials as f64)
        .collect();
    Ok(WalkStats {
        d,
        per_trial,
        mean_dead,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gd_dead_coordinate_is_absorbing() {
        let mut s = WalkState::new(vec![-0.5], WalkProcess::Gd);
        let mut r = rng::seeded(0);
        for _ in 0..100 {
            let z = [r.sample(StandardNormal)];
            assert_eq!(s.increment(&z).unwrap(), vec![0.0]);
            walk_step(&mut s, &z).unwrap();
        }
        assert_eq!(s.v, vec![-0.5]);
    }

    #[test]
    fn sign_of_zero_freezes() {
        let mut s = WalkState::new(vec![0.0], WalkProcess::Sign);
        walk_step(&mut s, &[1.3]).unwrap();
        assert_eq!(s.v, vec![0.0]);
    }

    #[test]
    fn norm_processes_reject_zero_state() {
        let s = WalkState::new(vec![0.0, 0.0], WalkProcess::NormGd);
        assert!(matches!(s.increment(&[1.0, 1.0]), Err(NapError::Degenerate(_))));
    }

    #[test]
    fn norm_gd_revives_dead_coordinate() {
        let s = WalkState::new(vec![1.0, -1.0], WalkProcess::NormGd);
        let mut r = rng::seeded(9);
        let n = 10_000;
        let mut sq = 0.0;
        for _ in 0..n {
            let z = [r.sample(StandardNormal), r.sample(StandardNormal)];
            let inc = s.increment(&z).unwrap();
            // cross term: ∂ relu(u_0)/∂v_1 = −v_0 v_1/‖v‖³
            let expected = -(1.0 * -1.0) / 2f64.powf(1.5) * z[0];
            assert!((inc[1] - expected).abs() < 1e-15);
            sq += inc[1] * inc[1];
        }
        assert!(sq / n as f64 > 0.05);
    }

    #[test]
    fn all_negative_gd_and_sign_stay_dead() {
        for p in [WalkProcess::Gd, WalkProcess::Sign] {
            let stats = run_walk(16, 50, p, 3, WalkInit::NegativeOnes, 1).unwrap();
            assert!(stats.per_trial.iter().all(|c| c.iter().all(|&k| k == 16)));
        }
    }

    #[test]
    fn sign_dead_count_never_decreases() {
        let stats = run_walk(64, 300, WalkProcess::Sign, 4, WalkInit::Gaussian, 2).unwrap();
        for k in 0..4 {
            assert_eq!(stats.decreases(k), 0);
        }
    }
}
