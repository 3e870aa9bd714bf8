//! Multi-class RBF support vector machine (one-vs-one, SMO solver) and the
//! log-grid candidate pool built from it.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::CandidateModel;

const TAU: f64 = 1e-12;
const STOP_TOL: f64 = 1e-3;
const MAX_ITER: usize = 100_000;

/// Dual solution of one binary problem.
#[derive(Debug, Clone)]
struct BinarySvm {
    /// `(training row, α_i y_i)` for every support vector.
    support: Vec<(usize, f64)>,
    rho: f64,
}

/// Solve `min ½αᵀQα − Σα` s.t. `0 ≤ α ≤ C`, `yᵀα = 0` with `Q_ij = y_i y_j K_ij`,
/// using maximal-gain working-set selection.
fn solve_binary(kernel: &DMatrix<f64>, rows: &[usize], y: &[f64], c: f64) -> BinarySvm {
    let n = rows.len();
    let k = |a: usize, b: usize| kernel[(rows[a], rows[b])];
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let upper = |a: f64| a >= c;
    let lower = |a: f64| a <= 0.0;
    for _ in 0..MAX_ITER {
        let mut gmax = f64::NEG_INFINITY;
        let mut i = usize::MAX;
        for t in 0..n {
            let v = if y[t] > 0.0 {
                (!upper(alpha[t])).then_some(-grad[t])
            } else {
                (!lower(alpha[t])).then_some(grad[t])
            };
            if let Some(v) = v {
                if v >= gmax {
                    gmax = v;
                    i = t;
                }
            }
        }
        if i == usize::MAX {
            break;
        }
        let mut gmax2 = f64::NEG_INFINITY;
        let mut j = usize::MAX;
        let mut best = f64::INFINITY;
        for t in 0..n {
            let (eligible, g, sign) = if y[t] > 0.0 {
                (!lower(alpha[t]), grad[t], -1.0)
            } else {
                (!upper(alpha[t]), -grad[t], 1.0)
            };
            if !eligible {
                continue;
            }
            gmax2 = gmax2.max(g);
            let diff = gmax + g;
            if diff > 0.0 {
                let quad = k(i, i) + k(t, t) + 2.0 * sign * y[i] * k(i, t);
                let obj = -(diff * diff) / if quad > 0.0 { quad } else { TAU };
                if obj <= best {
                    best = obj;
                    j = t;
                }
            }
        }
        if gmax + gmax2 < STOP_TOL || j == usize::MAX {
            break;
        }
        let q_ij = y[i] * y[j] * k(i, j);
        let (old_i, old_j) = (alpha[i], alpha[j]);
        if y[i] != y[j] {
            let quad = (k(i, i) + k(j, j) + 2.0 * q_ij).max(TAU);
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let quad = (k(i, i) + k(j, j) - 2.0 * q_ij).max(TAU);
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = sum;
                }
                if alpha[i] < 0.0 {
                    alpha[i] = 0.0;
                    alpha[j] = sum;
                }
            }
        }
        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for t in 0..n {
            grad[t] += y[t] * (y[i] * k(i, t) * di + y[j] * k(j, t) * dj);
        }
    }

    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut sum_free, mut n_free) = (0.0, 0usize);
    for t in 0..n {
        let yg = y[t] * grad[t];
        if upper(alpha[t]) {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if lower(alpha[t]) {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            n_free += 1;
            sum_free += yg;
        }
    }
    let rho = if n_free > 0 { sum_free / n_free as f64 } else { 0.5 * (ub + lb) };
    BinarySvm {
        support: (0..n)
            .filter(|&t| alpha[t] > 0.0)
            .map(|t| (rows[t], alpha[t] * y[t]))
            .collect(),
        rho,
    }
}

/// One-vs-one multi-class SVM over a precomputed training kernel.
#[derive(Debug, Clone)]
pub struct MultiClassSvm {
    /// `(class a, class b, machine)`; a positive decision votes for `a`.
    machines: Vec<(u32, u32, BinarySvm)>,
    n_classes: usize,
}

impl MultiClassSvm {
    pub fn train(kernel: &DMatrix<f64>, labels: &[u32], n_classes: usize, c: f64) -> Result<Self> {
        if kernel.nrows() != labels.len() || kernel.ncols() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: labels.len(),
                got: kernel.nrows(),
            });
        }
        if !(c > 0.0) {
            return Err(Error::InvalidHyperparameter(format!("C must be positive, got {c}")));
        }
        let mut present: Vec<u32> = labels.to_vec();
        present.sort_unstable();
        present.dedup();
        if present.len() < 2 {
            return Err(Error::Data("SVM training data has a single class".into()));
        }
        let mut machines = Vec::new();
        for (ai, &a) in present.iter().enumerate() {
            for &b in &present[ai + 1..] {
                let rows: Vec<usize> = (0..labels.len()).filter(|&r| labels[r] == a || labels[r] == b).collect();
                let y: Vec<f64> = rows.iter().map(|&r| if labels[r] == a { 1.0 } else { -1.0 }).collect();
                machines.push((a, b, solve_binary(kernel, &rows, &y, c)));
            }
        }
        Ok(Self { machines, n_classes })
    }

    /// Predict from the kernel between query rows and training rows.
    pub fn predict(&self, cross_kernel: &DMatrix<f64>) -> Vec<u32> {
        let mut votes = vec![0u32; self.n_classes];
        (0..cross_kernel.nrows())
            .map(|q| {
                votes.iter_mut().for_each(|v| *v = 0);
                for (a, b, m) in &self.machines {
                    let f: f64 = m.support.iter().map(|&(r, w)| w * cross_kernel[(q, r)]).sum::<f64>() - m.rho;
                    votes[if f > 0.0 { *a } else { *b } as usize] += 1;
                }
                let mut best = 0;
                for (c, v) in votes.iter().enumerate() {
                    if *v > votes[best] {
                        best = c;
                    }
                }
                best as u32
            })
            .collect()
    }
}

/// Pairwise squared Euclidean distances between rows.
pub fn sq_distances(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
        (0..a.ncols()).map(|d| (a[(i, d)] - b[(j, d)]).powi(2)).sum()
    })
}

/// Log2-uniform grid over `C` and `γ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvmGrid {
    pub n_c: usize,
    pub n_gamma: usize,
    pub log2_c: (f64, f64),
    pub log2_gamma: (f64, f64),
}

impl Default for SvmGrid {
    fn default() -> Self {
        Self {
            n_c: 20,
            n_gamma: 20,
            log2_c: (-5.0, 15.0),
            log2_gamma: (-15.0, 3.0),
        }
    }
}

fn axis(n: usize, (lo, hi): (f64, f64)) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

impl SvmGrid {
    /// `(log2 C, log2 γ)` for every grid point, C-major.
    pub fn points(&self) -> Vec<(f64, f64)> {
        let cs = axis(self.n_c, self.log2_c);
        let gs = axis(self.n_gamma, self.log2_gamma);
        cs.iter().flat_map(|c| gs.iter().map(move |g| (*c, *g))).collect()
    }
}

/// One ε-greedy candidate per grid point, all trained on the same rows and
/// evaluated on every pool row. Candidate params are `(log2 C, log2 γ)`.
pub fn build_svm_candidates(
    train_x: &DMatrix<f64>,
    train_y: &[u32],
    n_classes: usize,
    pool_x: &DMatrix<f64>,
    grid: &SvmGrid,
    epsilon: f64,
) -> Result<Vec<CandidateModel>> {
    if grid.n_c == 0 || grid.n_gamma == 0 {
        return Err(Error::Config("SVM grid must have at least one point per axis".into()));
    }
    let d_train = sq_distances(train_x, train_x);
    let d_pool = sq_distances(pool_x, train_x);
    let gammas = axis(grid.n_gamma, grid.log2_gamma);
    let cs = axis(grid.n_c, grid.log2_c);
    // Predictions indexed [gamma][c].
    let predictions: Vec<Vec<Vec<u32>>> = gammas
        .par_iter()
        .map(|lg| {
            let g = lg.exp2();
            let k_train = d_train.map(|d| (-g * d).exp());
            let k_pool = d_pool.map(|d| (-g * d).exp());
            cs.iter()
                .map(|lc| Ok(MultiClassSvm::train(&k_train, train_y, n_classes, lc.exp2())?.predict(&k_pool)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(cs.len() * gammas.len());
    for (ci, lc) in cs.iter().enumerate() {
        for (gi, lg) in gammas.iter().enumerate() {
            let proposals = predictions[gi][ci].iter().map(|&p| vec![p]).collect();
            let name = format!("svm(log2C={lc:.3},log2g={lg:.3})");
            out.push(CandidateModel::new(name, n_classes, epsilon, proposals)?.with_params(vec![*lc, *lg]));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn blobs(n_per: usize, seed: u64) -> (DMatrix<f64>, Vec<u32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers = [(0.0, 0.0), (4.0, 0.0), (0.0, 4.0)];
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (c, (cx, cy)) in centers.iter().enumerate() {
            for _ in 0..n_per {
                rows.push(cx + rng.random_range(-1.0..1.0));
                rows.push(cy + rng.random_range(-1.0..1.0));
                labels.push(c as u32);
            }
        }
        (DMatrix::from_row_slice(labels.len(), 2, &rows), labels)
    }

    #[test]
    fn separates_blobs() {
        let (x, y) = blobs(15, 1);
        let (xt, yt) = blobs(20, 2);
        let k = sq_distances(&x, &x).map(|d| (-0.5 * d).exp());
        let kc = sq_distances(&xt, &x).map(|d| (-0.5 * d).exp());
        let svm = MultiClassSvm::train(&k, &y, 3, 10.0).unwrap();
        let pred = svm.predict(&kc);
        let acc = pred.iter().zip(&yt).filter(|(a, b)| a == b).count() as f64 / yt.len() as f64;
        assert!(acc > 0.95, "accuracy {acc}");
    }

    #[test]
    fn dual_solution_is_feasible() {
        let (x, y) = blobs(10, 3);
        let k = sq_distances(&x, &x).map(|d| (-0.3 * d).exp());
        let rows: Vec<usize> = (0..20).collect();
        let yy: Vec<f64> = rows.iter().map(|&r| if y[r] == 0 { 1.0 } else { -1.0 }).collect();
        let m = solve_binary(&k, &rows, &yy, 2.0);
        let balance: f64 = m.support.iter().map(|s| s.1).sum();
        assert!(balance.abs() < 1e-9);
        assert!(m.support.iter().all(|s| s.1.abs() <= 2.0 + 1e-12));
    }

    #[test]
    fn single_class_rejected() {
        let k = DMatrix::identity(3, 3);
        assert!(MultiClassSvm::train(&k, &[1, 1, 1], 3, 1.0).is_err());
    }

    #[test]
    fn grid_corners_and_determinism() {
        let grid = SvmGrid {
            n_c: 2,
            n_gamma: 2,
            ..Default::default()
        };
        assert_eq!(grid.points(), vec![(-5.0, -15.0), (-5.0, 3.0), (15.0, -15.0), (15.0, 3.0)]);
        let (x, y) = blobs(5, 4);
        let a = build_svm_candidates(&x, &y, 3, &x, &grid, 0.05).unwrap();
        let b = build_svm_candidates(&x, &y, 3, &x, &grid, 0.05).unwrap();
        assert_eq!(a.len(), 4);
        assert_eq!(a, b);
    }
}
