//! Min-max regularizers on unlabeled batches: each runs PGD to maximize its
//! inner objective for the live model, then scores the found perturbation.
//!
//! Snapshot outputs and, for the consistency term, the live model's clean
//! predictions are computed once on the clean batch and held constant.

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;

use super::attack::pgd_attack;
use super::losses::{cross_entropy, ft_loss, kd_loss, kl_divergence, LossGrad};
use crate::config::AttackConfig;
use crate::error::{Error, Result};
use crate::model::{HeadKind, ModelState, Snapshot};

/// Gradient of `objective(logits[:, ..block])` with respect to the images.
pub(crate) fn head_input_grad<F>(model: &ModelState, head: HeadKind, images: &Array2<f64>, block: usize, objective: F) -> Result<Array2<f64>>
where
    F: Fn(&ArrayView2<f64>) -> Result<LossGrad>,
{
    let cache = model.forward_features_cached(&images.view())?;
    let logits = model.forward_head(head, &cache.features().view())?;
    let lg = objective(&logits.slice(s![.., ..block]))?;
    let d_features = model.head(head).backward(&cache.features().view(), &lg.grad.view(), None);
    Ok(model.extractor().backward(&cache, &d_features.view(), None, true).expect("input gradient requested"))
}

fn snapshot_block(model: &ModelState, snapshot: &Snapshot) -> Result<usize> {
    let k = snapshot.seen_class_count();
    if k == 0 {
        return Err(Error::usage("snapshot has no classes to distil"));
    }
    if model.seen_class_count() < k {
        return Err(Error::usage(format!(
            "live model covers {} classes, fewer than the snapshot's {k}",
            model.seen_class_count()
        )));
    }
    Ok(k)
}

fn non_empty(images: &Array2<f64>) -> Result<()> {
    if images.nrows() == 0 {
        return Err(Error::usage("unlabeled batch is empty"));
    }
    Ok(())
}

/// PGD maximizing the cross-entropy of `head` on labeled data.
pub fn adversarial_labeled<R: Rng + ?Sized>(
    model: &ModelState,
    head: HeadKind,
    images: &Array2<f64>,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let k = model.seen_class_count();
    pgd_attack(images, cfg, rng, |x| head_input_grad(model, head, x, k, |z| cross_entropy(z, labels)))
}

/// KD of `head` against the snapshot's matching head on the same images.
/// Only the snapshot's class block of the live logits takes part.
pub fn kd_on_batch(model: &ModelState, snapshot: &Snapshot, head: HeadKind, images: &Array2<f64>, temperature: f64) -> Result<f64> {
    non_empty(images)?;
    let k = snapshot_block(model, snapshot)?;
    let target = snapshot.model().logits(head, &images.view())?;
    let live = model.logits(head, &images.view())?;
    Ok(kd_loss(&live.slice(s![.., ..k]), &target.view(), temperature)?.value)
}

pub fn ft_on_batch(model: &ModelState, snapshot: &Snapshot, images: &Array2<f64>) -> Result<f64> {
    non_empty(images)?;
    let target = snapshot.model().forward_features(&images.view())?;
    let live = model.forward_features(&images.view())?;
    Ok(ft_loss(&live.view(), &target.view())?.value)
}

/// Perturbation maximizing KD between the live head on `x + delta` and the
/// snapshot head on clean `x`.
pub fn rkd_attack<R: Rng + ?Sized>(
    model: &ModelState,
    snapshot: &Snapshot,
    head: HeadKind,
    images: &Array2<f64>,
    cfg: &AttackConfig,
    temperature: f64,
    rng: &mut R,
) -> Result<Array2<f64>> {
    non_empty(images)?;
    let k = snapshot_block(model, snapshot)?;
    let target = snapshot.model().logits(head, &images.view())?;
    pgd_attack(images, cfg, rng, |x| head_input_grad(model, head, x, k, |z| kd_loss(z, &target.view(), temperature)))
}

pub fn rkd_loss<R: Rng + ?Sized>(
    model: &ModelState,
    snapshot: &Snapshot,
    head: HeadKind,
    images: &Array2<f64>,
    cfg: &AttackConfig,
    temperature: f64,
    rng: &mut R,
) -> Result<f64> {
    let adv = rkd_attack(model, snapshot, head, images, cfg, temperature, rng)?;
    let k = snapshot_block(model, snapshot)?;
    let target = snapshot.model().logits(head, &images.view())?;
    let live = model.logits(head, &adv.view())?;
    Ok(kd_loss(&live.slice(s![.., ..k]), &target.view(), temperature)?.value)
}

/// Perturbation maximizing the l1 gap between live features on `x + delta`
/// and snapshot features on clean `x`.
pub fn rft_attack<R: Rng + ?Sized>(
    model: &ModelState,
    snapshot: &Snapshot,
    images: &Array2<f64>,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<Array2<f64>> {
    non_empty(images)?;
    let target = snapshot.model().forward_features(&images.view())?;
    pgd_attack(images, cfg, rng, |x| {
        let cache = model.forward_features_cached(&x.view())?;
        let lg = ft_loss(&cache.features().view(), &target.view())?;
        Ok(model.extractor().backward(&cache, &lg.grad.view(), None, true).expect("input gradient requested"))
    })
}

pub fn rft_loss<R: Rng + ?Sized>(
    model: &ModelState,
    snapshot: &Snapshot,
    images: &Array2<f64>,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<f64> {
    let adv = rft_attack(model, snapshot, images, cfg, rng)?;
    let target = snapshot.model().forward_features(&images.view())?;
    let live = model.forward_features(&adv.view())?;
    Ok(ft_loss(&live.view(), &target.view())?.value)
}

/// Perturbation maximizing `KL(rho(x + delta) || rho(x))` for the live head.
pub fn rtc_attack<R: Rng + ?Sized>(model: &ModelState, head: HeadKind, images: &Array2<f64>, cfg: &AttackConfig, rng: &mut R) -> Result<Array2<f64>> {
    non_empty(images)?;
    let k = model.seen_class_count();
    let clean = model.logits(head, &images.view())?;
    pgd_attack(images, cfg, rng, |x| head_input_grad(model, head, x, k, |z| kl_divergence(z, &clean.view())))
}

pub fn rtc_loss<R: Rng + ?Sized>(model: &ModelState, head: HeadKind, images: &Array2<f64>, cfg: &AttackConfig, rng: &mut R) -> Result<f64> {
    let adv = rtc_attack(model, head, images, cfg, rng)?;
    let clean = model.logits(head, &images.view())?;
    let perturbed = model.logits(head, &adv.view())?;
    Ok(kl_divergence(&perturbed.view(), &clean.view())?.value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{BackboneConfig, ImageShape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ModelState, Snapshot, Array2<f64>, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cfg = BackboneConfig { input: ImageShape::new(8, 8, 1), conv_channels: vec![4, 6], feature_dim: 8 };
        let mut m = ModelState::new(cfg, &mut rng).unwrap();
        m.grow_heads(2, &mut rng).unwrap();
        let snap = m.take_snapshot();
        m.grow_heads(2, &mut rng).unwrap();
        for t in m.tensors_mut() {
            t.iter_mut().for_each(|v| *v += rng.random_range(-0.05..0.05));
        }
        let x = Array2::from_shape_fn((6, 64), |_| rng.random_range(0.0..1.0));
        (m, snap, x, rng)
    }

    #[test]
    fn zero_steps_reduce_to_clean_terms() {
        let (m, snap, x, mut rng) = setup();
        let cfg = AttackConfig { steps: 0, random_start: false, ..AttackConfig::training() };
        for head in HeadKind::BOTH {
            let clean = kd_on_batch(&m, &snap, head, &x, 2.0).unwrap();
            assert_eq!(rkd_loss(&m, &snap, head, &x, &cfg, 2.0, &mut rng).unwrap(), clean);
        }
        assert_eq!(rft_loss(&m, &snap, &x, &cfg, &mut rng).unwrap(), ft_on_batch(&m, &snap, &x).unwrap());
        assert_eq!(rtc_loss(&m, HeadKind::Primary, &x, &cfg, &mut rng).unwrap(), 0.0);
    }

    #[test]
    fn zero_epsilon_reduces_to_clean_terms() {
        let (m, snap, x, mut rng) = setup();
        let cfg = AttackConfig { epsilon: 0.0, ..AttackConfig::training() };
        let clean = kd_on_batch(&m, &snap, HeadKind::Primary, &x, 2.0).unwrap();
        assert_eq!(rkd_loss(&m, &snap, HeadKind::Primary, &x, &cfg, 2.0, &mut rng).unwrap(), clean);
        assert_eq!(rtc_loss(&m, HeadKind::Primary, &x, &cfg, &mut rng).unwrap(), 0.0);
    }

    #[test]
    fn identical_models_have_zero_rft_at_zero_epsilon() {
        let (m, _, x, mut rng) = setup();
        let snap = m.take_snapshot();
        let cfg = AttackConfig { epsilon: 0.0, ..AttackConfig::training() };
        assert_eq!(rft_loss(&m, &snap, &x, &cfg, &mut rng).unwrap(), 0.0);
    }

    #[test]
    fn constant_model_has_zero_rtc() {
        let (mut m, _, x, mut rng) = setup();
        for t in m.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        let v = rtc_loss(&m, HeadKind::Primary, &x, &AttackConfig::training(), &mut rng).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let (m, snap, _, mut rng) = setup();
        let empty = Array2::zeros((0, 64));
        assert!(rkd_loss(&m, &snap, HeadKind::Primary, &empty, &AttackConfig::training(), 2.0, &mut rng).is_err());
    }
}
