//! Direct-formula CKA and exhaustive forgetting.

use rand::Rng;
use sril_core::metrics::{forgetting_measure, linear_cka, AccuracyMatrix};
use sril_core::rng::{SeedTree, Stream};
use sril_core::Tensor;

use crate::Check;

type Mat = Vec<Vec<f64>>;

fn center(x: &Mat) -> Mat {
    let (n, p) = (x.len(), x[0].len());
    let means: Vec<f64> = (0..p).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    x.iter()
        .map(|r| r.iter().zip(&means).map(|(v, m)| v - m).collect())
        .collect()
}

/// `AᵀB`.
fn at_b(a: &Mat, b: &Mat) -> Mat {
    let (p, q) = (a[0].len(), b[0].len());
    (0..p)
        .map(|i| {
            (0..q)
                .map(|j| a.iter().zip(b).map(|(ra, rb)| ra[i] * rb[j]).sum())
                .collect()
        })
        .collect()
}

fn frob(m: &Mat) -> f64 {
    m.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

/// `‖YcᵀXc‖²_F / (‖XcᵀXc‖_F · ‖YcᵀYc‖_F)`.
pub fn direct_cka(x: &Mat, y: &Mat) -> f64 {
    let (xc, yc) = (center(x), center(y));
    frob(&at_b(&yc, &xc)).powi(2) / (frob(&at_b(&xc, &xc)) * frob(&at_b(&yc, &yc)))
}

pub fn check_cka(count: u64) -> Vec<Check> {
    let mut rng = SeedTree::new(3).rng(Stream::Data, 600);
    let mut worst: f64 = 0.0;
    for i in 0..count {
        // The first instance is the 5×3 case; later ones also cover n < p.
        let n = if i == 0 { 5 } else { rng.random_range(2..9) };
        let (p, q) = if i == 0 {
            (3, 3)
        } else {
            (rng.random_range(1..12), rng.random_range(1..12))
        };
        let x: Mat = (0..n)
            .map(|_| (0..p).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let y: Mat = (0..n)
            .map(|_| (0..q).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let tx = Tensor::new(vec![n, p], x.concat()).unwrap();
        let ty = Tensor::new(vec![n, q], y.concat()).unwrap();
        worst = worst.max((linear_cka(&tx, &ty).unwrap() - direct_cka(&x, &y)).abs());
    }
    vec![Check::new(
        "metrics/cka-vs-direct-formula",
        worst < 1e-12,
        format!("{count} instances, max abs diff {worst:.1e}"),
    )]
}

/// `mean_{j<K} (max_{k<K} a[k][j] − a[K][j])` by scanning every entry.
pub fn brute_force_forgetting(rows: &Mat) -> f64 {
    let last = rows.len() - 1;
    let mut total = 0.0;
    for j in 0..last {
        let mut best = f64::NEG_INFINITY;
        for (k, row) in rows.iter().enumerate().take(last) {
            if j <= k && row[j] > best {
                best = row[j];
            }
        }
        total += best - rows[last][j];
    }
    total / last as f64
}

pub fn check_forgetting(count: u64) -> Vec<Check> {
    let mut rng = SeedTree::new(4).rng(Stream::Data, 700);
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let tasks = rng.random_range(2..7);
        let rows: Mat = (0..tasks)
            .map(|k| (0..=k).map(|_| rng.random::<f64>()).collect())
            .collect();
        let m = AccuracyMatrix::from_rows(rows.clone(), vec![1.0; tasks]).unwrap();
        worst = worst.max((forgetting_measure(&m).unwrap() - brute_force_forgetting(&rows)).abs());
    }
    vec![Check::new(
        "metrics/forgetting-vs-brute-force",
        worst < 1e-12,
        format!("{count} instances, max abs diff {worst:.1e}"),
    )]
}
