use cil_qud::regularizers::{cross_entropy, ft_loss, kd_loss, kl_divergence};
use ndarray::Array2;
use proptest::prelude::*;

fn softmax_row(row: &[f64], t: f64) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| ((v - m) / t).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn batch(rows: usize, cols: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-8.0..8.0f64, cols), rows)
}

fn to_array(rows: &[Vec<f64>]) -> Array2<f64> {
    let cols = rows[0].len();
    Array2::from_shape_vec((rows.len(), cols), rows.concat()).unwrap()
}

fn shapes() -> impl Strategy<Value = (usize, usize)> {
    (1usize..6, 2usize..8)
}

proptest! {
    #[test]
    fn ce_matches_naive((n, k) in shapes(), seed in any::<u64>()) {
        let rows: Vec<Vec<f64>> = (0..n).map(|i| (0..k).map(|j| (((seed >> (i + j) % 60) & 15) as f64 - 7.5) * 0.7).collect()).collect();
        let labels: Vec<usize> = (0..n).map(|i| (seed as usize + i * 7) % k).collect();
        let expected = rows.iter().zip(&labels).map(|(r, &y)| -softmax_row(r, 1.0)[y].ln()).sum::<f64>() / n as f64;
        let got = cross_entropy(&to_array(&rows).view(), &labels).unwrap();
        prop_assert!((got.value - expected).abs() < 1e-9);
        for (i, r) in rows.iter().enumerate() {
            let p = softmax_row(r, 1.0);
            for j in 0..k {
                let g = (p[j] - if j == labels[i] { 1.0 } else { 0.0 }) / n as f64;
                prop_assert!((got.grad[[i, j]] - g).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn kd_matches_naive(cur in batch(3, 4), snap in batch(3, 4), t in 0.5..5.0f64) {
        let expected = cur.iter().zip(&snap).map(|(c, s)| {
            let p = softmax_row(c, t);
            let q = softmax_row(s, t);
            -q.iter().zip(&p).map(|(a, b)| a * b.ln()).sum::<f64>()
        }).sum::<f64>() / 3.0;
        let got = kd_loss(&to_array(&cur).view(), &to_array(&snap).view(), t).unwrap();
        prop_assert!((got.value - expected).abs() < 1e-9);
    }

    #[test]
    fn kd_is_minimized_by_matching_logits(snap in batch(2, 5), other in batch(2, 5), t in 0.5..4.0f64) {
        let s = to_array(&snap);
        let at_target = kd_loss(&s.view(), &s.view(), t).unwrap();
        let elsewhere = kd_loss(&to_array(&other).view(), &s.view(), t).unwrap();
        prop_assert!(at_target.value <= elsewhere.value + 1e-12);
        prop_assert!(at_target.grad.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn ft_is_mean_l1(cur in batch(4, 6), snap in batch(4, 6)) {
        let expected = cur.iter().zip(&snap).map(|(c, s)| c.iter().zip(s).map(|(a, b)| (a - b).abs()).sum::<f64>()).sum::<f64>() / 4.0;
        let got = ft_loss(&to_array(&cur).view(), &to_array(&snap).view()).unwrap();
        prop_assert!((got.value - expected).abs() < 1e-9);
    }

    #[test]
    fn kl_is_nonnegative_and_matches_naive(a in batch(3, 4), b in batch(3, 4)) {
        let expected = a.iter().zip(&b).map(|(x, y)| {
            let p = softmax_row(x, 1.0);
            let q = softmax_row(y, 1.0);
            p.iter().zip(&q).map(|(pi, qi)| pi * (pi.ln() - qi.ln())).sum::<f64>()
        }).sum::<f64>() / 3.0;
        let got = kl_divergence(&to_array(&a).view(), &to_array(&b).view()).unwrap();
        prop_assert!(got.value >= -1e-12);
        prop_assert!((got.value - expected).abs() < 1e-9);
    }
}

#[test]
fn mismatched_shapes_are_rejected() {
    let a = Array2::<f64>::zeros((2, 3));
    let b = Array2::<f64>::zeros((2, 4));
    assert!(kd_loss(&a.view(), &b.view(), 2.0).is_err());
    assert!(ft_loss(&a.view(), &b.view()).is_err());
    assert!(kl_divergence(&a.view(), &b.view()).is_err());
    assert!(kd_loss(&a.view(), &a.view(), 0.0).is_err());
}
