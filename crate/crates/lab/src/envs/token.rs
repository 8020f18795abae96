//! Sequence tasks over a `V`-token alphabet: the completion must reproduce a
//! fixed transformation of the prompt, scored under one of three reward
//! structures.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetLogic {
    Copy,
    Flip,
    ReverseCopy,
    ReverseFlip,
}

impl TargetLogic {
    pub const ALL: [TargetLogic; 4] =
        [TargetLogic::Copy, TargetLogic::Flip, TargetLogic::ReverseCopy, TargetLogic::ReverseFlip];

    pub fn name(self) -> &'static str {
        match self {
            TargetLogic::Copy => "copy",
            TargetLogic::Flip => "flip",
            TargetLogic::ReverseCopy => "reverse_copy",
            TargetLogic::ReverseFlip => "reverse_flip",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    /// Fraction of positions that match.
    BagOfTokens,
    /// Length of the correct prefix, as a fraction of `H`.
    Sequential,
    /// 1 on an exact match, else 0.
    Terminal,
}

impl RewardKind {
    pub fn name(self) -> &'static str {
        match self {
            RewardKind::BagOfTokens => "bag_of_tokens",
            RewardKind::Sequential => "sequential",
            RewardKind::Terminal => "terminal",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenTaskSpec {
    pub horizon: usize,
    pub vocab: usize,
    pub logic: TargetLogic,
    pub reward: RewardKind,
}

impl TokenTaskSpec {
    pub fn new(horizon: usize, vocab: usize, logic: TargetLogic, reward: RewardKind) -> Result<Self> {
        let s = Self { horizon, vocab, logic, reward };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(LabError::config("horizon", "must be at least 1"));
        }
        if self.vocab < 2 {
            return Err(LabError::config("vocab", "must be at least 2"));
        }
        Ok(())
    }

    pub fn sample_prompt(&self, rng: &mut impl Rng) -> Vec<usize> {
        (0..self.horizon).map(|_| rng.random_range(0..self.vocab)).collect()
    }

    /// `(1/V)^H`, the exact-match probability of a uniform policy.
    pub fn uniform_success_rate(&self) -> f64 {
        (1.0 / self.vocab as f64).powi(self.horizon as i32)
    }
}

fn flip(v: usize, vocab: usize) -> usize {
    (v + 1) % vocab
}

pub fn token_target(spec: &TokenTaskSpec, prompt: &[usize]) -> Vec<usize> {
    let v = spec.vocab;
    match spec.logic {
        TargetLogic::Copy => prompt.to_vec(),
        TargetLogic::Flip => prompt.iter().map(|&t| flip(t, v)).collect(),
        TargetLogic::ReverseCopy => prompt.iter().rev().copied().collect(),
        TargetLogic::ReverseFlip => prompt.iter().rev().map(|&t| flip(t, v)).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub prompt: Vec<usize>,
    pub completion: Vec<usize>,
    pub reward: f64,
    pub per_position_correct: Vec<bool>,
}

impl Rollout {
    pub fn token_error(&self) -> f64 {
        let wrong = self.per_position_correct.iter().filter(|c| !**c).count();
        wrong as f64 / self.per_position_correct.len() as f64
    }

    pub fn exact(&self) -> bool {
        self.per_position_correct.iter().all(|&c| c)
    }
}

pub fn reward_from_correct(kind: RewardKind, correct: &[bool]) -> f64 {
    let h = correct.len() as f64;
    match kind {
        RewardKind::BagOfTokens => correct.iter().filter(|&&c| c).count() as f64 / h,
        RewardKind::Sequential => correct.iter().take_while(|&&c| c).count() as f64 / h,
        RewardKind::Terminal => {
            if correct.iter().all(|&c| c) {
                1.0
            } else {
                0.0
            }
        }
    }
}

pub fn score_rollout(spec: &TokenTaskSpec, prompt: &[usize], completion: &[usize]) -> Rollout {
    let target = token_target(spec, prompt);
    let per_position_correct: Vec<bool> = target.iter().zip(completion).map(|(a, b)| a == b).collect();
    Rollout {
        prompt: prompt.to_vec(),
        completion: completion.to_vec(),
        reward: reward_from_correct(spec.reward, &per_position_correct),
        per_position_correct,
    }
}

/// Immediate score of `candidate` at `position` given whether the behavior
/// tokens before it were correct.
pub fn score_token_candidate(
    spec: &TokenTaskSpec,
    prefix_correct: &[bool],
    position: usize,
    candidate: usize,
    target: &[usize],
) -> Result<f64> {
    if position >= spec.horizon {
        return Err(LabError::InvalidInput(format!("position {position} outside horizon {}", spec.horizon)));
    }
    let hit = candidate == target[position];
    match spec.reward {
        RewardKind::BagOfTokens => Ok(hit as u8 as f64),
        RewardKind::Sequential => Ok((hit && prefix_correct[..position].iter().all(|&c| c)) as u8 as f64),
        RewardKind::Terminal => Err(LabError::config(
            "grouping",
            "terminal reward has no per-token score; use sequence-level grouping",
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(logic: TargetLogic, reward: RewardKind, h: usize, v: usize) -> TokenTaskSpec {
        TokenTaskSpec::new(h, v, logic, reward).unwrap()
    }

    #[test]
    fn targets() {
        let s = spec(TargetLogic::ReverseCopy, RewardKind::BagOfTokens, 4, 2);
        assert_eq!(token_target(&s, &[0, 1, 1, 0, 1][..4]), vec![0, 1, 1, 0]);
        assert_eq!(token_target(&s, &[0, 0, 1, 1]), vec![1, 1, 0, 0]);
        let f = spec(TargetLogic::Flip, RewardKind::BagOfTokens, 3, 2);
        assert_eq!(token_target(&f, &[0, 1, 0]), vec![1, 0, 1]);
        let f3 = spec(TargetLogic::Flip, RewardKind::BagOfTokens, 3, 3);
        assert_eq!(token_target(&f3, &[0, 1, 2]), vec![1, 2, 0]);
    }

    #[test]
    fn reverse_flip_composes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for v in [2, 5] {
            let rf = spec(TargetLogic::ReverseFlip, RewardKind::BagOfTokens, 9, v);
            let f = spec(TargetLogic::Flip, RewardKind::BagOfTokens, 9, v);
            let r = spec(TargetLogic::ReverseCopy, RewardKind::BagOfTokens, 9, v);
            for _ in 0..1000 {
                let p = rf.sample_prompt(&mut rng);
                assert_eq!(token_target(&rf, &p), token_target(&f, &token_target(&r, &p)));
            }
        }
    }

    #[test]
    fn reward_rules() {
        let correct: Vec<bool> = (0..10).map(|i| i % 2 == 1).collect();
        assert_eq!(reward_from_correct(RewardKind::BagOfTokens, &correct), 0.5);
        assert_eq!(reward_from_correct(RewardKind::Sequential, &correct), 0.0);
        assert_eq!(reward_from_correct(RewardKind::Terminal, &correct), 0.0);
        let c = [true, true, false, true];
        assert_eq!(reward_from_correct(RewardKind::BagOfTokens, &c), 0.75);
        assert_eq!(reward_from_correct(RewardKind::Sequential, &c), 0.5);
        assert_eq!(reward_from_correct(RewardKind::Terminal, &c), 0.0);
        for k in [RewardKind::BagOfTokens, RewardKind::Sequential, RewardKind::Terminal] {
            assert_eq!(reward_from_correct(k, &[true; 6]), 1.0);
        }
    }

    #[test]
    fn candidate_scores() {
        let s = spec(TargetLogic::Copy, RewardKind::Sequential, 4, 2);
        let target = [1, 0, 1, 1];
        assert_eq!(score_token_candidate(&s, &[true, false, true, true], 2, 1, &target).unwrap(), 0.0);
        assert_eq!(score_token_candidate(&s, &[true, true, true, true], 2, 0, &target).unwrap(), 0.0);
        assert_eq!(score_token_candidate(&s, &[true, true, false, false], 2, 1, &target).unwrap(), 1.0);
        let b = spec(TargetLogic::Copy, RewardKind::BagOfTokens, 4, 2);
        assert_eq!(score_token_candidate(&b, &[false; 4], 3, 1, &target).unwrap(), 1.0);
        let t = spec(TargetLogic::Copy, RewardKind::Terminal, 4, 2);
        assert!(matches!(score_token_candidate(&t, &[true; 4], 0, 1, &target), Err(LabError::Config { .. })));
        assert!(score_token_candidate(&b, &[true; 4], 4, 1, &target).is_err());
    }
}
