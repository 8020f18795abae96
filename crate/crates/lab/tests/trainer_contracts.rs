use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tpo_lab::config::{Grouping, Method, TokenTrainConfig};
use tpo_lab::envs::{RewardKind, TargetLogic, TokenTaskSpec};
use tpo_lab::trainers::token::{train_token, z_scores, Batch, TokenTrainer};

fn small(method: Method, grouping: Grouping, reward: RewardKind) -> TokenTrainConfig {
    let task = TokenTaskSpec::new(4, 2, TargetLogic::ReverseCopy, reward).unwrap();
    let mut cfg = TokenTrainConfig::new(task, method, grouping);
    cfg.k = 4;
    cfg.batch = 6;
    cfg.episodes = 3;
    cfg.model.d_model = 16;
    cfg.model.heads = 2;
    cfg.model.layers = 1;
    cfg
}

fn batch(trainer: &TokenTrainer, seed: u64) -> Batch {
    trainer.collect(&mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn flat(trainer: &TokenTrainer, grads: &tpo_nn::ParamGrads) -> Vec<f64> {
    trainer.store.ids().flat_map(|id| grads.get(id).data().to_vec()).collect()
}

fn descend(trainer: &mut TokenTrainer, grads: &tpo_nn::ParamGrads, lr: f64) {
    let ids: Vec<_> = trainer.store.ids().collect();
    for id in ids {
        let g = grads.get(id).data().to_vec();
        for (p, gi) in trainer.store.get_mut(id).data_mut().iter_mut().zip(g) {
            *p -= lr * gi;
        }
    }
}

#[test]
fn same_seed_gives_bit_identical_parameters() {
    for method in [Method::Tpo, Method::Ppo, Method::Dg] {
        let grouping = if method.is_grouped() { Grouping::Sequence } else { Grouping::Token };
        let cfg = small(method, grouping, RewardKind::BagOfTokens);
        let a = train_token(&cfg, "a", 7, &mut |_| {}).unwrap().store;
        let b = train_token(&cfg, "b", 7, &mut |_| {}).unwrap().store;
        let c = train_token(&cfg, "c", 8, &mut |_| {}).unwrap().store;
        for id in a.ids() {
            assert_eq!(a.get(id).data(), b.get(id).data());
        }
        assert!(a.ids().any(|id| a.get(id).data() != c.get(id).data()));
    }
}

#[test]
fn all_fail_batch_gives_exactly_zero_first_epoch_tpo_gradient() {
    for (grouping, reward) in [(Grouping::Sequence, RewardKind::Terminal), (Grouping::Token, RewardKind::BagOfTokens)] {
        let trainer = TokenTrainer::new(small(Method::Tpo, grouping, reward), 3).unwrap();
        let mut b = batch(&trainer, 11);
        b.scores.iter_mut().for_each(|s| *s = 0.0);
        let mut frozen = None;
        let res = trainer.epoch(&b, &mut frozen).unwrap();
        assert!(frozen.unwrap().zero_variance.iter().all(|z| *z));
        assert!(flat(&trainer, &res.grads).iter().all(|g| *g == 0.0));
    }
}

#[test]
fn frozen_targets_are_bit_identical_across_epochs() {
    for method in [Method::Tpo, Method::Grpo] {
        let mut trainer = TokenTrainer::new(small(method, Grouping::Sequence, RewardKind::BagOfTokens), 5).unwrap();
        let b = batch(&trainer, 2);
        let mut frozen = None;
        let first = trainer.epoch(&b, &mut frozen).unwrap();
        let snapshot = frozen.clone().unwrap();
        for _ in 0..3 {
            descend(&mut trainer, &first.grads, 0.05);
            let res = trainer.epoch(&b, &mut frozen).unwrap();
            let now = frozen.as_ref().unwrap();
            assert_eq!(now.targets, snapshot.targets);
            assert_eq!(now.weights, snapshot.weights);
            assert_eq!(now.unit_logp_old, snapshot.unit_logp_old);
            assert_ne!(res.loss, first.loss);
        }
    }
}

#[test]
fn first_epoch_clipped_surrogate_equals_unclipped() {
    let clipped = TokenTrainer::new(small(Method::Grpo, Grouping::Sequence, RewardKind::BagOfTokens), 4).unwrap();
    let mut cfg = small(Method::Grpo, Grouping::Sequence, RewardKind::BagOfTokens);
    cfg.clip_eps = 0.999;
    let open = TokenTrainer::new(cfg, 4).unwrap();
    let b = batch(&clipped, 9);
    let (mut fa, mut fb) = (None, None);
    let a = clipped.epoch(&b, &mut fa).unwrap();
    let o = open.epoch(&b, &mut fb).unwrap();
    assert_eq!(flat(&clipped, &a.grads), flat(&open, &o.grads));
    assert!(flat(&clipped, &a.grads).iter().any(|g| *g != 0.0));
}

#[test]
fn tpo_loss_does_not_increase_over_small_epochs() {
    let mut trainer = TokenTrainer::new(small(Method::Tpo, Grouping::Sequence, RewardKind::BagOfTokens), 6).unwrap();
    let b = batch(&trainer, 1);
    let mut frozen = None;
    let mut prev = f64::INFINITY;
    for _ in 0..8 {
        let res = trainer.epoch(&b, &mut frozen).unwrap();
        assert!(res.loss <= prev, "{} > {prev}", res.loss);
        prev = res.loss;
        descend(&mut trainer, &res.grads, 1e-4);
    }
}

#[test]
fn binary_z_scores_are_exact() {
    assert_eq!(z_scores(&[1.0, 0.0]).unwrap(), vec![1.0, -1.0]);
    let mut s = vec![0.0; 32];
    s[5] = 1.0;
    let u = z_scores(&s).unwrap();
    assert_eq!(u[5], 31f64.sqrt());
    assert!(u.iter().enumerate().filter(|(i, _)| *i != 5).all(|(_, x)| *x == -1.0 / 31f64.sqrt()));
}
