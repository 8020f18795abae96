//! Environments: the MNIST contextual bandit and the token-task family.

pub mod mnist;
pub mod token;

pub use mnist::{load_mnist, mnist_bandit_reward, resolve_mnist_dir, MnistDataset, MnistSplit, CLASSES, MNIST_DIR_ENV, PIXELS};
pub use token::{
    score_rollout, score_token_candidate, token_target, RewardKind, Rollout, TargetLogic, TokenTaskSpec,
};
