//! Stationary covariance functions with ARD lengthscales, and the latent
//! embedding tables used to turn categorical IDs into kernel inputs.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative jitter added to kernel diagonals before factorization.
pub const RELATIVE_JITTER: f64 = 1e-6;

const SQRT3: f64 = 1.732_050_807_568_877_2;
const SQRT5: f64 = 2.236_067_977_499_79;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelFamily {
    Rbf,
    Matern32,
    Matern52,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub family: KernelFamily,
    pub variance: f64,
    pub lengthscales: Vec<f64>,
}

/// Gradients of `Σ_ij W_ij k(x1_i, x2_j)` for a weight matrix `W`.
#[derive(Debug, Clone)]
pub struct KernelGrads {
    pub log_variance: f64,
    pub log_lengthscales: DVector<f64>,
    pub x1: Option<DMatrix<f64>>,
    pub x2: Option<DMatrix<f64>>,
}

impl KernelParams {
    pub fn new(family: KernelFamily, variance: f64, lengthscales: Vec<f64>) -> Result<Self> {
        let p = Self {
            family,
            variance,
            lengthscales,
        };
        p.validate()?;
        Ok(p)
    }

    /// Isotropic parameters: every lengthscale tied to `lengthscale`.
    pub fn isotropic(family: KernelFamily, variance: f64, lengthscale: f64, dim: usize) -> Result<Self> {
        Self::new(family, variance, vec![lengthscale; dim])
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.variance > 0.0 && self.variance.is_finite()) {
            return Err(Error::InvalidHyperparameter(format!(
                "kernel variance must be positive, got {}",
                self.variance
            )));
        }
        if self.lengthscales.is_empty() {
            return Err(Error::InvalidHyperparameter("no lengthscales".into()));
        }
        if let Some(l) = self
            .lengthscales
            .iter()
            .find(|l| !(**l > 0.0 && l.is_finite()))
        {
            return Err(Error::InvalidHyperparameter(format!(
                "lengthscale must be positive, got {l}"
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn jitter(&self) -> f64 {
        RELATIVE_JITTER * self.variance
    }

    fn check_points(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.nrows() > 0 && x.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.ncols(),
            });
        }
        Ok(())
    }

    /// Points as contiguous columns, each divided elementwise by the lengthscales.
    fn scaled_columns(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut t = x.transpose();
        for (d, l) in self.lengthscales.iter().enumerate() {
            t.row_mut(d).apply(|v| *v /= l);
        }
        t
    }

    /// Kernel value as a function of the scaled squared distance.
    #[inline]
    pub fn value_from_sq_dist(&self, r2: f64) -> f64 {
        let v = self.variance;
        match self.family {
            KernelFamily::Rbf => v * (-0.5 * r2).exp(),
            KernelFamily::Matern32 => {
                let r = SQRT3 * r2.max(0.0).sqrt();
                v * (1.0 + r) * (-r).exp()
            }
            KernelFamily::Matern52 => {
                let r = r2.max(0.0).sqrt();
                let s = SQRT5 * r;
                v * (1.0 + s + 5.0 * r2 / 3.0) * (-s).exp()
            }
        }
    }

    /// Derivative of the kernel with respect to the scaled squared distance.
    #[inline]
    fn d_value_d_sq_dist(&self, r2: f64) -> f64 {
        let v = self.variance;
        match self.family {
            KernelFamily::Rbf => -0.5 * v * (-0.5 * r2).exp(),
            KernelFamily::Matern32 => -1.5 * v * (-SQRT3 * r2.max(0.0).sqrt()).exp(),
            KernelFamily::Matern52 => {
                let s = SQRT5 * r2.max(0.0).sqrt();
                -(5.0 / 6.0) * v * (1.0 + s) * (-s).exp()
            }
        }
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let r2: f64 = x
            .iter()
            .zip(y)
            .zip(&self.lengthscales)
            .map(|((a, b), l)| ((a - b) / l).powi(2))
            .sum();
        self.value_from_sq_dist(r2)
    }

    /// Cross-covariance matrix with entry `(i, j) = k(x1_i, x2_j)`; points are rows.
    pub fn kernel_matrix(&self, x1: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.validate()?;
        self.check_points(x1)?;
        self.check_points(x2)?;
        let same = std::ptr::eq(x1, x2);
        let (n1, n2) = (x1.nrows(), x2.nrows());
        let s1 = self.scaled_columns(x1);
        let s2 = if same { s1.clone() } else { self.scaled_columns(x2) };
        let mut k = DMatrix::<f64>::zeros(n1, n2);
        for j in 0..n2 {
            let b = s2.column(j);
            let lo = if same { j } else { 0 };
            for i in lo..n1 {
                let v = self.value_from_sq_dist(sq_dist(s1.column(i).as_slice(), b.as_slice()));
                k[(i, j)] = v;
                if same {
                    k[(j, i)] = v;
                }
            }
        }
        Ok(k)
    }

    /// Symmetric Gram matrix of `x` with the configured relative jitter on the diagonal.
    pub fn gram(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut k = self.kernel_matrix(x, x)?;
        let j = self.jitter();
        for i in 0..k.nrows() {
            k[(i, i)] += j;
        }
        Ok(k)
    }

    /// `k(x_i, x_i)` for every row; constant for stationary kernels.
    pub fn diag(&self, x: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_element(x.nrows(), self.variance)
    }

    /// Gradient of `Σ_ij W_ij k(x1_i, x2_j)` with respect to the log-variance,
    /// the log-lengthscales and (optionally) the points themselves.
    pub fn weighted_grads(
        &self,
        x1: &DMatrix<f64>,
        x2: &DMatrix<f64>,
        w: &DMatrix<f64>,
        want_x1: bool,
        want_x2: bool,
    ) -> KernelGrads {
        let dim = self.dim();
        let (n1, n2) = (x1.nrows(), x2.nrows());
        debug_assert_eq!((w.nrows(), w.ncols()), (n1, n2));
        let s1 = self.scaled_columns(x1);
        let s2 = self.scaled_columns(x2);
        let mut log_variance = 0.0;
        let mut log_ls = vec![0.0; dim];
        // dK/dr² weighted by W; the point gradients follow from it by matrix products.
        let mut dk = DMatrix::<f64>::zeros(n1, n2);
        for j in 0..n2 {
            let b = s2.column(j);
            let b = b.as_slice();
            for i in 0..n1 {
                let wij = w[(i, j)];
                if wij == 0.0 {
                    continue;
                }
                let a = s1.column(i);
                let a = a.as_slice();
                let r2 = sq_dist(a, b);
                log_variance += wij * self.value_from_sq_dist(r2);
                let g = wij * self.d_value_d_sq_dist(r2);
                dk[(i, j)] = g;
                for d in 0..dim {
                    let df = a[d] - b[d];
                    log_ls[d] -= 2.0 * g * df * df;
                }
            }
        }
        let inv_l2: Vec<f64> = self.lengthscales.iter().map(|l| 1.0 / (l * l)).collect();
        // Σ_j dk_ij (x1_i − x2_j) = x1_i r_i − (dk x2)_i, and symmetrically for x2.
        let gx1 = want_x1.then(|| {
            let r: Vec<f64> = dk.row_iter().map(|row| row.sum()).collect();
            let mut g = &dk * x2;
            for d in 0..dim {
                for i in 0..n1 {
                    g[(i, d)] = 2.0 * inv_l2[d] * (x1[(i, d)] * r[i] - g[(i, d)]);
                }
            }
            g
        });
        let gx2 = want_x2.then(|| {
            let c: Vec<f64> = dk.column_iter().map(|col| col.sum()).collect();
            let mut g = dk.transpose() * x1;
            for d in 0..dim {
                for j in 0..n2 {
                    g[(j, d)] = 2.0 * inv_l2[d] * (x2[(j, d)] * c[j] - g[(j, d)]);
                }
            }
            g
        });
        KernelGrads {
            log_variance,
            log_lengthscales: DVector::from_vec(log_ls),
            x1: gx1,
            x2: gx2,
        }
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Trainable coordinates for one vocabulary of categorical IDs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub name: String,
    ids: Vec<usize>,
    #[serde(skip)]
    index: HashMap<usize, usize>,
    /// One row per ID.
    #[serde(with = "crate::serial::b64_matrix")]
    pub coords: DMatrix<f64>,
}

impl EmbeddingTable {
    pub fn from_coords(name: impl Into<String>, ids: Vec<usize>, coords: DMatrix<f64>) -> Result<Self> {
        if ids.len() != coords.nrows() {
            return Err(Error::DimensionMismatch {
                expected: ids.len(),
                got: coords.nrows(),
            });
        }
        let mut t = Self {
            name: name.into(),
            ids,
            index: HashMap::new(),
            coords,
        };
        t.rebuild_index()?;
        Ok(t)
    }

    /// Coordinates drawn i.i.d. from the standard normal prior.
    pub fn standard_normal<R: Rng + ?Sized>(
        name: impl Into<String>,
        ids: Vec<usize>,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let coords = DMatrix::from_fn(ids.len(), dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        Self::from_coords(name, ids, coords)
    }

    /// Rebuild the ID lookup; needed after deserialization.
    pub fn rebuild_index(&mut self) -> Result<()> {
        self.index.clear();
        for (row, id) in self.ids.iter().enumerate() {
            if self.index.insert(*id, row).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate id {id} in vocabulary `{}`",
                    self.name
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.coords.ncols()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn row(&self, id: usize) -> Result<usize> {
        self.index.get(&id).copied().ok_or_else(|| Error::UnknownId {
            vocabulary: self.name.clone(),
            id,
        })
    }
}

/// Concatenate the user and item coordinates of every `(user, item)` pair.
pub fn embed(user: &EmbeddingTable, item: &EmbeddingTable, ids: &[(usize, usize)]) -> Result<DMatrix<f64>> {
    let (qu, qi) = (user.dim(), item.dim());
    let mut out = DMatrix::<f64>::zeros(ids.len(), qu + qi);
    for (r, &(u, i)) in ids.iter().enumerate() {
        let ur = user.row(u)?;
        let ir = item.row(i)?;
        for d in 0..qu {
            out[(r, d)] = user.coords[(ur, d)];
        }
        for d in 0..qi {
            out[(r, qu + d)] = item.coords[(ir, d)];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Cholesky;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn families() -> [KernelFamily; 3] {
        [KernelFamily::Rbf, KernelFamily::Matern32, KernelFamily::Matern52]
    }

    #[test]
    fn zero_distance_returns_variance() {
        let p = KernelParams::isotropic(KernelFamily::Rbf, 2.0, 0.7, 3).unwrap();
        assert_relative_eq!(p.eval(&[0.3, -1.0, 2.0], &[0.3, -1.0, 2.0]), 2.0);
        let m = KernelParams::isotropic(KernelFamily::Matern32, 1.0, 1.0, 1).unwrap();
        assert_relative_eq!(m.eval(&[4.0], &[4.0]), 1.0);
    }

    #[test]
    fn rbf_unit_distance() {
        // exp(-1/2) = 0.6065306597126334
        let p = KernelParams::isotropic(KernelFamily::Rbf, 1.0, 1.0, 1).unwrap();
        assert_relative_eq!(p.eval(&[0.0], &[1.0]), 0.606_530_659_712_633_4, epsilon = 1e-14);
    }

    #[test]
    fn matern_closed_forms_at_unit_distance() {
        // (1 + √3) e^{-√3} and (1 + √5 + 5/3) e^{-√5}
        let m32 = KernelParams::isotropic(KernelFamily::Matern32, 1.0, 1.0, 1).unwrap();
        assert_relative_eq!(m32.eval(&[0.0], &[1.0]), 0.483_357_724_596_507_7, epsilon = 1e-12);
        let m52 = KernelParams::isotropic(KernelFamily::Matern52, 1.0, 1.0, 1).unwrap();
        assert_relative_eq!(m52.eval(&[0.0], &[1.0]), 0.523_994_108_831_820_3, epsilon = 1e-12);
    }

    #[test]
    fn rejects_bad_hyperparameters_and_dimensions() {
        assert!(KernelParams::new(KernelFamily::Rbf, 0.0, vec![1.0]).is_err());
        assert!(KernelParams::new(KernelFamily::Rbf, 1.0, vec![1.0, -2.0]).is_err());
        let p = KernelParams::isotropic(KernelFamily::Rbf, 1.0, 1.0, 2).unwrap();
        let x = DMatrix::<f64>::zeros(3, 3);
        assert!(matches!(
            p.kernel_matrix(&x, &x),
            Err(Error::DimensionMismatch { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn weighted_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for family in families() {
            let p = KernelParams::new(family, 1.3, vec![0.7, 1.9]).unwrap();
            let x1 = DMatrix::from_fn(4, 2, |_, _| rng.random_range(-2.0..2.0));
            let x2 = DMatrix::from_fn(3, 2, |_, _| rng.random_range(-2.0..2.0));
            let w = DMatrix::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0));
            let f = |p: &KernelParams, a: &DMatrix<f64>, b: &DMatrix<f64>| {
                p.kernel_matrix(a, b).unwrap().component_mul(&w).sum()
            };
            let g = p.weighted_grads(&x1, &x2, &w, true, true);
            let h: f64 = 1e-6;
            let mut pp = p.clone();
            pp.variance *= h.exp();
            let mut pm = p.clone();
            pm.variance *= (-h).exp();
            let fd = (f(&pp, &x1, &x2) - f(&pm, &x1, &x2)) / (2.0 * h);
            assert_relative_eq!(g.log_variance, fd, epsilon = 1e-6);
            for d in 0..2 {
                let mut pp = p.clone();
                pp.lengthscales[d] *= h.exp();
                let mut pm = p.clone();
                pm.lengthscales[d] *= (-h).exp();
                let fd = (f(&pp, &x1, &x2) - f(&pm, &x1, &x2)) / (2.0 * h);
                assert_relative_eq!(g.log_lengthscales[d], fd, epsilon = 1e-6);
            }
            let (gx1, gx2) = (g.x1.unwrap(), g.x2.unwrap());
            for i in 0..4 {
                for d in 0..2 {
                    let mut a = x1.clone();
                    a[(i, d)] += h;
                    let mut b = x1.clone();
                    b[(i, d)] -= h;
                    let fd = (f(&p, &a, &x2) - f(&p, &b, &x2)) / (2.0 * h);
                    assert_relative_eq!(gx1[(i, d)], fd, epsilon = 1e-6);
                }
            }
            for j in 0..3 {
                for d in 0..2 {
                    let mut a = x2.clone();
                    a[(j, d)] += h;
                    let mut b = x2.clone();
                    b[(j, d)] -= h;
                    let fd = (f(&p, &x1, &a) - f(&p, &x1, &b)) / (2.0 * h);
                    assert_relative_eq!(gx2[(j, d)], fd, epsilon = 1e-6);
                }
            }
        }
    }

    #[test]
    fn embed_concatenates_coordinates() {
        let user = EmbeddingTable::from_coords("user", vec![7], DMatrix::zeros(1, 5)).unwrap();
        let item =
            EmbeddingTable::from_coords("item", vec![3], DMatrix::from_element(1, 5, 1.0)).unwrap();
        let pts = embed(&user, &item, &[(7, 3)]).unwrap();
        assert_eq!(pts.ncols(), 10);
        let row: Vec<f64> = pts.row(0).iter().copied().collect();
        assert_eq!(row, vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(embed(&user, &item, &[]).unwrap().nrows(), 0);
        assert!(matches!(
            embed(&user, &item, &[(8, 3)]),
            Err(Error::UnknownId { id: 8, .. })
        ));
    }

    #[test]
    fn standard_normal_init_is_seeded() {
        let mut a = ChaCha8Rng::seed_from_u64(1);
        let mut b = ChaCha8Rng::seed_from_u64(1);
        let t1 = EmbeddingTable::standard_normal("u", (0..4).collect(), 3, &mut a).unwrap();
        let t2 = EmbeddingTable::standard_normal("u", (0..4).collect(), 3, &mut b).unwrap();
        assert_eq!(t1, t2);
        assert!(EmbeddingTable::from_coords("u", vec![1, 1], DMatrix::zeros(2, 2)).is_err());
    }

    fn points(n: usize, d: usize) -> impl Strategy<Value = DMatrix<f64>> {
        prop::collection::vec(-3.0f64..3.0, n * d).prop_map(move |v| DMatrix::from_vec(n, d, v))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn gram_is_symmetric_and_factorizable(
            x in (1usize..50).prop_flat_map(|n| points(n, 3)),
            fam in 0usize..3,
            ls in prop::collection::vec(0.2f64..3.0, 3),
            var in 0.1f64..5.0,
        ) {
            let p = KernelParams::new(families()[fam], var, ls).unwrap();
            let k = p.kernel_matrix(&x, &x).unwrap();
            prop_assert_eq!(&k, &k.transpose());
            let g = p.gram(&x).unwrap();
            prop_assert!(Cholesky::new(g).is_some());
        }

        #[test]
        fn stationary_under_shift(
            x in points(6, 2),
            shift in prop::collection::vec(-10.0f64..10.0, 2),
            fam in 0usize..3,
        ) {
            let p = KernelParams::new(families()[fam], 1.7, vec![0.8, 1.4]).unwrap();
            let mut y = x.clone();
            for mut row in y.row_iter_mut() {
                row[0] += shift[0];
                row[1] += shift[1];
            }
            let a = p.kernel_matrix(&x, &x).unwrap();
            let b = p.kernel_matrix(&y, &y).unwrap();
            prop_assert!((a - b).amax() < 1e-12);
        }

        #[test]
        fn decays_with_distance(d1 in 0.0f64..5.0, delta in 1e-3f64..5.0, fam in 0usize..3) {
            let p = KernelParams::isotropic(families()[fam], 1.0, 1.0, 1).unwrap();
            prop_assert!(p.eval(&[0.0], &[d1 + delta]) < p.eval(&[0.0], &[d1]));
        }
    }
}
