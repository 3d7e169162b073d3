#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use spectra_core::tensor_io::TensorView;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> TensorView {
    let values = (0..rows * cols)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    TensorView::new("g", rows, cols, values, "mem").unwrap()
}

pub fn log_uniform(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    let (a, b) = ((lo as f64).ln(), (hi as f64).ln());
    (rng.random_range(a..=b).exp().round() as usize).clamp(lo, hi)
}

/// Row-major product `a (m x k) * b (k x n)`.
pub fn matmul(a: &TensorView, b: &TensorView) -> TensorView {
    assert_eq!(a.cols(), b.rows());
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    let (av, bv) = (a.values(), b.values());
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = av[i * k + p];
            for (o, y) in row.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                *o += x * y;
            }
        }
    }
    TensorView::new("prod", m, n, out, "mem").unwrap()
}

pub fn scaled(a: &TensorView, c: f64) -> TensorView {
    TensorView::new(
        "scaled",
        a.rows(),
        a.cols(),
        a.values().iter().map(|v| v * c).collect(),
        "mem",
    )
    .unwrap()
}

/// One-sided Jacobi (Hestenes) singular values, descending.
pub fn jacobi_singular_values(t: &TensorView) -> Vec<f64> {
    let t = if t.rows() >= t.cols() {
        t.clone()
    } else {
        t.transposed()
    };
    let (m, n) = (t.rows(), t.cols());
    // column-major working copy
    let mut cols: Vec<Vec<f64>> = (0..n)
        .map(|c| (0..m).map(|r| t.get(r, c)).collect())
        .collect();
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = cols[p]
                    .iter()
                    .zip(&cols[q])
                    .fold((0.0, 0.0, 0.0), |(a, b, g), (x, y)| {
                        (a + x * x, b + y * y, g + x * y)
                    });
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (left, right) = cols.split_at_mut(q);
                for (x, y) in left[p].iter_mut().zip(right[0].iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sigma: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    sigma.sort_by(|a, b| b.total_cmp(a));
    sigma
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}
