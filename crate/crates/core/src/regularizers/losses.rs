//! Clean loss terms on logits and features, each returning its value and
//! the gradient with respect to its first argument.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Probability floor used inside the KL divergence.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Array2<f64>,
}

impl LossGrad {
    pub fn scaled(mut self, weight: f64) -> Self {
        self.value *= weight;
        self.grad *= weight;
        self
    }
}

fn check_batch(a: &ArrayView2<f64>, b_dim: (usize, usize), what: &str) -> Result<()> {
    if a.dim() != b_dim {
        return Err(Error::usage(format!("{what}: shapes {:?} and {:?} differ", a.dim(), b_dim)));
    }
    if a.nrows() == 0 {
        return Err(Error::usage(format!("{what}: empty batch")));
    }
    Ok(())
}

/// Row-wise `log softmax(logits / temperature)`.
pub fn log_softmax(logits: &ArrayView2<f64>, temperature: f64) -> Array2<f64> {
    let mut out = logits.mapv(|v| v / temperature);
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

pub fn softmax(logits: &ArrayView2<f64>, temperature: f64) -> Array2<f64> {
    log_softmax(logits, temperature).mapv(f64::exp)
}

/// Row entropies of a probability matrix.
pub fn entropy(probs: &ArrayView2<f64>) -> Array1<f64> {
    probs.map_axis(Axis(1), |row| -row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>())
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn cross_entropy(logits: &ArrayView2<f64>, labels: &[usize]) -> Result<LossGrad> {
    let (n, k) = logits.dim();
    if labels.len() != n {
        return Err(Error::usage(format!("cross_entropy: {} labels for {n} rows", labels.len())));
    }
    if n == 0 {
        return Err(Error::usage("cross_entropy: empty batch"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::usage(format!("cross_entropy: label {bad} outside the {k} seen classes")));
    }
    let logp = log_softmax(logits, 1.0);
    let mut grad = logp.mapv(f64::exp);
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        total -= logp[[i, y]];
        grad[[i, y]] -= 1.0;
    }
    grad /= n as f64;
    Ok(LossGrad { value: total / n as f64, grad })
}

/// Soft cross-entropy `-sum p_hat log p` with both distributions taken at
/// `temperature`; the snapshot side is a constant.
pub fn kd_loss(current: &ArrayView2<f64>, snapshot: &ArrayView2<f64>, temperature: f64) -> Result<LossGrad> {
    check_batch(current, snapshot.dim(), "kd_loss")?;
    if !(temperature > 0.0) {
        return Err(Error::usage(format!("kd_loss: temperature must be > 0, got {temperature}")));
    }
    let n = current.nrows() as f64;
    let target = softmax(snapshot, temperature);
    let logp = log_softmax(current, temperature);
    let value = -(&target * &logp).sum() / n;
    let grad = (logp.mapv(f64::exp) - &target) / (temperature * n);
    Ok(LossGrad { value, grad })
}

/// Mean l1 distance between feature rows. The gradient uses `sign(0) = 0`.
pub fn ft_loss(current: &ArrayView2<f64>, snapshot: &ArrayView2<f64>) -> Result<LossGrad> {
    check_batch(current, snapshot.dim(), "ft_loss")?;
    let n = current.nrows() as f64;
    let diff = current - snapshot;
    let value = diff.iter().map(|v| v.abs()).sum::<f64>() / n;
    let grad = diff.mapv(|v| if v > 0.0 { 1.0 / n } else if v < 0.0 { -1.0 / n } else { 0.0 });
    Ok(LossGrad { value, grad })
}

/// Mean `KL(softmax(perturbed) || softmax(reference))`; the gradient is
/// taken with respect to `perturbed` only.
pub fn kl_divergence(perturbed: &ArrayView2<f64>, reference: &ArrayView2<f64>) -> Result<LossGrad> {
    check_batch(perturbed, reference.dim(), "kl_divergence")?;
    let n = perturbed.nrows() as f64;
    let floor = PROBABILITY_FLOOR.ln();
    let logp = log_softmax(perturbed, 1.0).mapv(|v| v.max(floor));
    let logq = log_softmax(reference, 1.0).mapv(|v| v.max(floor));
    let p = log_softmax(perturbed, 1.0).mapv(f64::exp);
    let ratio = &logp - &logq;
    let per_row = (&p * &ratio).sum_axis(Axis(1));
    let mut grad = ratio;
    for ((mut g, p_row), kl) in grad.rows_mut().into_iter().zip(p.rows()).zip(per_row.iter()) {
        g.zip_mut_with(&p_row, |r, &pj| *r = pj * (*r - kl) / n);
    }
    Ok(LossGrad { value: per_row.sum() / n, grad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn ce_saturated_and_uniform() {
        let v = cross_entropy(&array![[1000.0, -1000.0]].view(), &[0]).unwrap().value;
        assert!(v.abs() < 1e-12);
        let v = cross_entropy(&array![[0.3, 0.3]].view(), &[1]).unwrap().value;
        assert!((v - 2f64.ln()).abs() < 1e-12);
        let v = cross_entropy(&Array2::from_elem((3, 10), -1.5).view(), &[0, 4, 9]).unwrap().value;
        assert!((v - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_rejects_out_of_range_label() {
        assert!(matches!(cross_entropy(&array![[0.0, 1.0]].view(), &[2]), Err(Error::Usage(_))));
    }

    #[test]
    fn kd_hand_value() {
        let snap = array![[0.7f64.ln(), 0.3f64.ln()]];
        let cur = array![[0.0, 0.0]];
        let v = kd_loss(&cur.view(), &snap.view(), 1.0).unwrap();
        assert!((v.value - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn kd_gradient_vanishes_at_target() {
        let z = array![[1.0, -2.0, 0.5], [0.1, 0.2, 0.3]];
        let g = kd_loss(&z.view(), &z.view(), 2.0).unwrap().grad;
        assert!(g.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn kd_mismatched_blocks_rejected() {
        assert!(kd_loss(&Array2::zeros((1, 2)).view(), &Array2::zeros((1, 3)).view(), 1.0).is_err());
    }

    #[test]
    fn ft_values() {
        assert_eq!(ft_loss(&array![[1.0, 2.0]].view(), &array![[0.0, 0.0]].view()).unwrap().value, 3.0);
        assert_eq!(ft_loss(&array![[1.0, 2.0]].view(), &array![[1.0, 2.0]].view()).unwrap().value, 0.0);
        assert!(ft_loss(&array![[1.0]].view(), &array![[1.0, 2.0]].view()).is_err());
    }

    #[test]
    fn kl_zero_on_identical() {
        let z = array![[1.0, 2.0, -1.0]];
        assert!(kl_divergence(&z.view(), &z.view()).unwrap().value.abs() < 1e-15);
    }
}
