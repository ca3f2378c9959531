//! Policy-gradient training: reward shaping, entropy bonus, baseline and
//! Adam updates, shared by every learned search policy.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{ControllerError, ControllerParams, MutationController, TraceScore};
use crate::nn::{Adam, AdamConfig, NnError, Parameters};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReinforceError {
    #[error("fitness must be a non-negative finite number, got {0}")]
    BadFitness(f64),
    #[error("invalid reward config: {0}")]
    Config(String),
    #[error("non-finite gradient at step {step} (reward {reward}, advantage {advantage})")]
    NonFiniteGradient { step: u64, reward: f64, advantage: f64 },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Baseline {
    None,
    Ema { decay: f64 },
}

impl Default for Baseline {
    fn default() -> Self {
        Baseline::Ema { decay: 0.95 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub entropy_weight: f64,
    /// Fitness is clipped here before shaping so the reward stays finite.
    pub fitness_clip: f64,
    pub baseline: Baseline,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            entropy_weight: 0.1,
            fitness_clip: 0.999,
            baseline: Baseline::default(),
        }
    }
}

impl RewardConfig {
    pub fn check(&self) -> Result<(), ReinforceError> {
        if !(self.fitness_clip > 0.0 && self.fitness_clip < 1.0) {
            return Err(ReinforceError::Config(format!(
                "fitness clip {} outside (0, 1)",
                self.fitness_clip
            )));
        }
        if !self.entropy_weight.is_finite() {
            return Err(ReinforceError::Config("entropy weight must be finite".into()));
        }
        if let Baseline::Ema { decay } = self.baseline {
            if !(0.0..1.0).contains(&decay) {
                return Err(ReinforceError::Config(format!("baseline decay {decay} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// `tan(f * pi / 2)` for `f` in `[0, 1)`.
///
/// Evaluated through the half-angle form `sin(pi f) / (1 + cos(pi f))`,
/// which is exact at `f = 0.5`; above one half it uses
/// `tan(pi/2 - x) = 1 / tan(x)` on the exactly representable `1 - f`.
fn tan_half_pi(f: f64) -> f64 {
    if f <= 0.5 {
        let x = std::f64::consts::PI * f;
        x.sin() / (1.0 + x.cos())
    } else {
        1.0 / tan_half_pi(1.0 - f)
    }
}

/// Reward for a child with observed fitness `fitness`: `tan(min(f, clip) * pi / 2)`.
pub fn shaped_reward(fitness: f64, clip: f64) -> Result<f64, ReinforceError> {
    if !(fitness >= 0.0 && fitness.is_finite()) {
        return Err(ReinforceError::BadFitness(fitness));
    }
    Ok(tan_half_pi(fitness.min(clip)))
}

/// A policy whose sampled episodes can be scored and differentiated.
pub trait Policy {
    type Params: Parameters;
    type Episode;

    /// `(log-probability, entropy)` of the episode.
    fn episode_stats(&self, episode: &Self::Episode) -> (f64, f64);

    /// Gradient of `w_lp * logprob + w_ent * entropy`.
    fn episode_grad(&self, episode: &Self::Episode, w_lp: f64, w_ent: f64) -> Self::Params;

    fn params_mut(&mut self) -> &mut Self::Params;
}

impl Policy for MutationController {
    type Params = ControllerParams;
    type Episode = TraceScore;

    fn episode_stats(&self, episode: &TraceScore) -> (f64, f64) {
        (episode.logprob, episode.entropy)
    }

    fn episode_grad(&self, episode: &TraceScore, w_lp: f64, w_ent: f64) -> ControllerParams {
        self.score_backward(episode, w_lp, w_ent)
    }

    fn params_mut(&mut self) -> &mut ControllerParams {
        &mut self.params
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub step: u64,
    pub reward: f64,
    pub advantage: f64,
    pub logprob: f64,
    pub entropy: f64,
    pub grad_norm: f64,
}

/// Owns the optimizer and baseline state for one policy.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: RewardConfig,
    adam: Adam,
    baseline: Option<f64>,
    steps: u64,
}

impl Trainer {
    pub fn new(config: RewardConfig, adam: AdamConfig) -> Result<Trainer, ReinforceError> {
        config.check()?;
        Ok(Trainer {
            config,
            adam: Adam::new(adam),
            baseline: None,
            steps: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn baseline_value(&self) -> Option<f64> {
        self.baseline
    }

    /// Total reward: shaped fitness plus the weighted episode entropy.
    pub fn reward(&self, fitness: f64, entropy: f64) -> Result<f64, ReinforceError> {
        Ok(shaped_reward(fitness, self.config.fitness_clip)? + self.config.entropy_weight * entropy)
    }

    fn current_baseline(&self, reward: f64) -> f64 {
        match self.config.baseline {
            Baseline::None => 0.0,
            // The first reward seeds the average.
            Baseline::Ema { .. } => self.baseline.unwrap_or(reward),
        }
    }

    /// Gradient of the surrogate objective `A * logprob + w * entropy`
    /// for one episode, without touching any state. The entropy term is
    /// differentiated directly, in addition to its contribution to `A`.
    pub fn objective_grad<P: Policy>(
        &self,
        policy: &P,
        episode: &P::Episode,
        fitness: f64,
    ) -> Result<(P::Params, Diagnostics), ReinforceError> {
        let (logprob, entropy) = policy.episode_stats(episode);
        let reward = self.reward(fitness, entropy)?;
        let advantage = reward - self.current_baseline(reward);
        let grad = policy.episode_grad(episode, advantage, self.config.entropy_weight);
        let diag = Diagnostics {
            step: self.steps + 1,
            reward,
            advantage,
            logprob,
            entropy,
            grad_norm: grad.l2_norm(),
        };
        if !grad.all_finite() {
            return Err(ReinforceError::NonFiniteGradient {
                step: diag.step,
                reward,
                advantage,
            });
        }
        Ok((grad, diag))
    }

    /// One Adam ascent step on the surrogate objective, then a baseline
    /// update with this episode's reward.
    pub fn update<P: Policy>(
        &mut self,
        policy: &mut P,
        episode: &P::Episode,
        fitness: f64,
    ) -> Result<Diagnostics, ReinforceError> {
        let (mut grad, diag) = self.objective_grad(policy, episode, fitness)?;
        grad.visit_mut(&mut |_, t| t.as_mut_slice().iter_mut().for_each(|v| *v = -*v));
        self.adam.step(policy.params_mut(), &grad)?;
        if let Baseline::Ema { decay } = self.config.baseline {
            let prev = self.baseline.unwrap_or(diag.reward);
            self.baseline = Some(decay * prev + (1.0 - decay) * diag.reward);
        }
        self.steps += 1;
        Ok(diag)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::{apply_mutation, ControllerConfig};
    use crate::space::{BlockSpec, CellSpec, InputRef, OpChoice, Slot, SpaceConfig};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(space: SpaceConfig, std: f64, seed: u64) -> MutationController {
        let cfg = ControllerConfig {
            embed_dim: 4,
            hidden: 4,
            init_std: std,
            ..ControllerConfig::default()
        };
        MutationController::new(space, cfg, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn parent(num_blocks: usize, num_ops: usize) -> CellSpec {
        let blocks = (1..=num_blocks)
            .map(|b| BlockSpec {
                i1: InputRef::PrevCell,
                i2: if b > 1 {
                    InputRef::Block(b - 1)
                } else {
                    InputRef::PrevPrevCell
                },
                o1: OpChoice::Sep3,
                o2: OpChoice::ALL[num_ops - 1],
            })
            .collect();
        CellSpec::new(blocks, num_ops)
    }

    #[test]
    fn reward_reference_values() {
        assert_eq!(shaped_reward(0.0, 0.999).unwrap(), 0.0);
        assert_eq!(shaped_reward(0.5, 0.999).unwrap(), 1.0);
        assert!((shaped_reward(0.9, 0.999).unwrap() - 6.313_751_514_675_04).abs() < 1e-10);
        let clipped = shaped_reward(0.9995, 0.999).unwrap();
        assert_eq!(clipped, shaped_reward(0.999, 0.999).unwrap());
        assert!(clipped.is_finite());
        assert!(shaped_reward(-0.1, 0.999).is_err());
        assert!(shaped_reward(f64::NAN, 0.999).is_err());
    }

    #[test]
    fn reward_matches_library_tan() {
        for i in 0..=999 {
            let f = i as f64 / 1000.0;
            let want = (f * std::f64::consts::FRAC_PI_2).tan();
            let got = shaped_reward(f, 0.999).unwrap();
            assert!((got - want).abs() <= 1e-12 * want.max(1.0), "f={f}: {got} vs {want}");
        }
    }

    proptest! {
        #[test]
        fn reward_is_strictly_increasing(a in 0.0..0.999f64, b in 0.0..0.999f64) {
            prop_assume!(a != b);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(shaped_reward(lo, 0.999).unwrap() < shaped_reward(hi, 0.999).unwrap());
        }
    }

    #[test]
    fn config_is_validated() {
        let bad_clip = RewardConfig {
            fitness_clip: 1.0,
            ..RewardConfig::default()
        };
        assert!(bad_clip.check().is_err());
        let bad_decay = RewardConfig {
            baseline: Baseline::Ema { decay: 1.0 },
            ..RewardConfig::default()
        };
        assert!(bad_decay.check().is_err());
        assert!(RewardConfig::default().check().is_ok());
    }

    #[test]
    fn zero_advantage_leaves_params_unchanged() {
        let space = SpaceConfig::new(2, 4);
        let mut ctl = tiny(space, 0.3, 0);
        let cell = parent(2, 4);
        let cfg = RewardConfig {
            entropy_weight: 0.0,
            ..RewardConfig::default()
        };
        let mut trainer = Trainer::new(cfg, AdamConfig::default()).unwrap();
        let (_, score) = ctl.sample_scored(&cell, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let before = ctl.params.clone();
        // The first reward seeds the baseline, so the advantage is zero.
        let diag = trainer.update(&mut ctl, &score, 0.7).unwrap();
        assert_eq!(diag.advantage, 0.0);
        assert_eq!(ctl.params, before);
        assert!(trainer.baseline_value().is_some());
    }

    #[test]
    fn positive_advantage_raises_trace_probability() {
        let space = SpaceConfig::new(2, 4);
        let mut ctl = tiny(space, 0.3, 2);
        let cell = parent(2, 4);
        let cfg = RewardConfig {
            entropy_weight: 0.0,
            baseline: Baseline::None,
            ..RewardConfig::default()
        };
        let mut trainer = Trainer::new(cfg, AdamConfig::default()).unwrap();
        let (trace, _) = ctl.sample_scored(&cell, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut last = ctl.trace_logprob(&cell, &trace).unwrap().0;
        for _ in 0..2 {
            let score = ctl.score_forward(&cell, &trace).unwrap();
            let diag = trainer.update(&mut ctl, &score, 0.8).unwrap();
            assert!(diag.advantage > 0.0);
            let now = ctl.trace_logprob(&cell, &trace).unwrap().0;
            assert!(now > last);
            last = now;
        }
    }

    #[test]
    fn surrogate_gradient_matches_finite_differences() {
        let space = SpaceConfig::new(2, 3);
        let ctl = tiny(space, 0.5, 4);
        let cell = parent(2, 3);
        let cfg = RewardConfig {
            entropy_weight: 0.3,
            baseline: Baseline::None,
            ..RewardConfig::default()
        };
        let trainer = Trainer::new(cfg, AdamConfig::default()).unwrap();
        let (trace, score) = ctl.sample_scored(&cell, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let (grad, diag) = trainer.objective_grad(&ctl, &score, 0.6).unwrap();
        let a = diag.advantage;
        let report = crate::nn::gradcheck(&ctl.params, &grad, 1e-5, |p| {
            let probe = MutationController {
                params: p.clone(),
                ..ctl.clone()
            };
            let (lp, ent) = probe.trace_logprob(&cell, &trace).unwrap();
            a * lp + 0.3 * ent
        });
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    fn kl_to_uniform(probs: &[f64]) -> f64 {
        let n = probs.len() as f64;
        probs.iter().map(|p| p * (p * n).ln()).sum()
    }

    #[test]
    fn large_entropy_weight_drives_policy_to_uniform() {
        // One block and two ops: every replacement set has two members, so the
        // maximum-entropy policy is uniform at both stages.
        let space = SpaceConfig::new(1, 2);
        let mut ctl = tiny(space, 3.0, 6);
        let cell = parent(1, 2);
        let cfg = RewardConfig {
            entropy_weight: 10.0,
            ..RewardConfig::default()
        };
        let mut trainer = Trainer::new(cfg, AdamConfig::default()).unwrap();
        let worst_kl = |ctl: &MutationController| {
            let mut kl = kl_to_uniform(&ctl.router_probs(&cell).unwrap()[0]);
            for slot in Slot::ALL {
                kl = kl.max(kl_to_uniform(&ctl.replacement_probs(&cell, 1, slot).unwrap()));
            }
            kl
        };
        let start = worst_kl(&ctl);
        assert!(start > 0.05, "perturbed start is already uniform: {start}");
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5000 {
            let (_, score) = ctl.sample_scored(&cell, &mut rng).unwrap();
            trainer.update(&mut ctl, &score, 0.5).unwrap();
        }
        let end = worst_kl(&ctl);
        assert!(end < 0.05, "KL to uniform {start} -> {end}");
    }

    #[test]
    fn baseline_preserves_expected_gradient_sign() {
        let space = SpaceConfig::new(1, 3);
        let ctl = tiny(space, 0.5, 8);
        let cell = parent(1, 3);
        // Fixed reward landscape over children.
        let fitness = |child: &CellSpec| match child.blocks[0].o1 {
            OpChoice::Sep5 => 0.8,
            OpChoice::Sep7 => 0.4,
            _ => 0.2,
        };
        let plain = Trainer::new(
            RewardConfig {
                entropy_weight: 0.0,
                baseline: Baseline::None,
                ..RewardConfig::default()
            },
            AdamConfig::default(),
        )
        .unwrap();
        let mut with_baseline = plain.clone();
        with_baseline.config.baseline = Baseline::Ema { decay: 0.95 };
        with_baseline.baseline = Some(shaped_reward(0.3, 0.999).unwrap());

        let n = 10_000;
        let dim = ctl.params.num_params();
        let mut sums = [vec![0.0; dim], vec![0.0; dim]];
        let mut sq = [vec![0.0; dim], vec![0.0; dim]];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..n {
            let (trace, score) = ctl.sample_scored(&cell, &mut rng).unwrap();
            let f = fitness(&apply_mutation(&cell, &trace, &space).unwrap());
            for (k, trainer) in [&plain, &with_baseline].into_iter().enumerate() {
                let g = trainer.objective_grad(&ctl, &score, f).unwrap().0.flatten();
                for i in 0..dim {
                    sums[k][i] += g[i];
                    sq[k][i] += g[i] * g[i];
                }
            }
        }
        let mut compared = 0;
        for i in 0..dim {
            let stats = |k: usize| {
                let mean = sums[k][i] / n as f64;
                let var = (sq[k][i] / n as f64 - mean * mean).max(0.0);
                (mean, (var / n as f64).sqrt())
            };
            let (m0, s0) = stats(0);
            let (m1, s1) = stats(1);
            if m0.abs() > 4.0 * s0 && m1.abs() > 4.0 * s1 {
                assert_eq!(m0.signum(), m1.signum(), "coordinate {i}: {m0} vs {m1}");
                compared += 1;
            }
        }
        assert!(compared > 0);
    }

    #[test]
    fn bandit_learns_rewarded_mutation() {
        let space = SpaceConfig::new(1, 6);
        let cell = parent(1, 6);
        let mut ctl = tiny(space, 0.01, 10);
        let mut trainer = Trainer::new(RewardConfig::default(), AdamConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..2000 {
            let (trace, score) = ctl.sample_scored(&cell, &mut rng).unwrap();
            let child = apply_mutation(&cell, &trace, &space).unwrap();
            let f = if child.blocks[0].o1 == OpChoice::Sep5 { 0.9 } else { 0.1 };
            trainer.update(&mut ctl, &score, f).unwrap();
        }
        let p_router = ctl.router_probs(&cell).unwrap()[0][Slot::O1.index()];
        let p_op = ctl.replacement_probs(&cell, 1, Slot::O1).unwrap()[OpChoice::Sep5.code()];
        assert!(p_router * p_op > 0.6, "{p_router} * {p_op}");
    }
}
