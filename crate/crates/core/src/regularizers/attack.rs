//! l-infinity projected gradient ascent on image batches.

use ndarray::Array2;
use rand::Rng;

use crate::config::AttackConfig;
use crate::error::{Error, Result};

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Maximizes a loss over `x + delta` with `|delta|_inf <= epsilon` and
/// `x + delta` inside `[0, 1]`.
///
/// `loss_grad` returns the gradient of the objective with respect to its
/// input batch. Each step moves by `alpha * sign(grad)` and projects back
/// onto the ball and the pixel box. With `epsilon == 0` or `steps == 0`
/// (and no random start) the clean batch is returned unchanged.
pub fn pgd_attack<R, F>(images: &Array2<f64>, cfg: &AttackConfig, rng: &mut R, mut loss_grad: F) -> Result<Array2<f64>>
where
    R: Rng + ?Sized,
    F: FnMut(&Array2<f64>) -> Result<Array2<f64>>,
{
    cfg.validate()?;
    if cfg.epsilon == 0.0 || (cfg.steps == 0 && !cfg.random_start) {
        return Ok(images.clone());
    }
    let eps = cfg.epsilon;
    let mut adv = images.clone();
    if cfg.random_start {
        adv.zip_mut_with(images, |a, &x| *a = (x + rng.random_range(-eps..=eps)).clamp(0.0, 1.0));
    }
    for step in 0..cfg.steps {
        let grad = loss_grad(&adv)?;
        if grad.dim() != adv.dim() {
            return Err(Error::usage(format!("attack gradient has shape {:?}, batch is {:?}", grad.dim(), adv.dim())));
        }
        if let Some((index, &value)) = grad.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { step, index, value });
        }
        ndarray::Zip::from(&mut adv).and(images).and(&grad).for_each(|a, &x, &g| {
            let moved = *a + cfg.alpha * sign(g);
            *a = (x + (moved - x).clamp(-eps, eps)).clamp(0.0, 1.0);
        });
    }
    debug_assert!(adv.iter().zip(images).all(|(&a, &x)| (0.0..=1.0).contains(&a) && (a - x).abs() <= eps + 1e-12));
    Ok(adv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_budget_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = array![[0.2, 0.9, 0.0, 1.0]];
        let cfg = AttackConfig { epsilon: 0.0, alpha: 0.1, steps: 5, random_start: true };
        let adv = pgd_attack(&x, &cfg, &mut rng, |b| Ok(b.mapv(|_| 1.0))).unwrap();
        assert_eq!(adv, x);
    }

    #[test]
    fn linear_scorer_reaches_the_sign_corner() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = Array1::from(vec![0.5, -2.0, 0.0, 1e-3]);
        let y = -1.0;
        let x = Array2::from_elem((1, 4), 0.5);
        let cfg = AttackConfig { epsilon: 0.03, alpha: 0.05, steps: 3, random_start: false };
        let adv = pgd_attack(&x, &cfg, &mut rng, |b| Ok(Array2::from_shape_fn(b.dim(), |(_, j)| -y * w[j]))).unwrap();
        let expected = [0.53, 0.47, 0.5, 0.53];
        for (a, e) in adv.iter().zip(expected) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn stays_in_box_and_ball() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = array![[0.0, 1.0, 0.5, 0.99]];
        let cfg = AttackConfig { epsilon: 0.1, alpha: 0.07, steps: 4, random_start: true };
        let adv = pgd_attack(&x, &cfg, &mut rng, |b| Ok(b.mapv(|v| v - 0.4))).unwrap();
        for (&a, &o) in adv.iter().zip(&x) {
            assert!((0.0..=1.0).contains(&a) && (a - o).abs() <= 0.1 + 1e-12);
        }
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = array![[0.5, 0.5]];
        let err = pgd_attack(&x, &AttackConfig::training(), &mut rng, |b| Ok(b.mapv(|_| f64::NAN))).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { step: 0, .. }));
    }
}
