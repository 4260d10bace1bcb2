use crate::error::{Error, Result};
use crate::numkernel::matrix::{dot, Matrix};
use crate::numkernel::SeededRng;
use crate::scalar::Scalar;

const MAX_ITERATIONS: usize = 1000;
const TOLERANCE: f64 = 1e-10;
const RESTART_SEED: u64 = 0x5_eed0_f9ca;

/// Top-two principal components and the centered projections of every sample.
#[derive(Clone, Debug)]
pub struct Pca2<T> {
    pub components: [Vec<T>; 2],
    pub eigenvalues: [T; 2],
    pub mean: Vec<T>,
    pub coordinates: Vec<[T; 2]>,
}

/// Covariance (divided by `n - 1`) of equal-length samples, with their mean.
pub fn covariance<T: Scalar>(samples: &[Vec<T>]) -> Result<(Matrix<T>, Vec<T>)> {
    let n = samples.len();
    let dim = samples.first().map_or(0, Vec::len);
    if samples.iter().any(|s| s.len() != dim) {
        return Err(Error::Shape("samples of unequal length".into()));
    }
    let mut mean = vec![T::zero(); dim];
    for s in samples {
        for (m, &x) in mean.iter_mut().zip(s) {
            *m = *m + x;
        }
    }
    for m in &mut mean {
        *m = *m / T::count(n);
    }
    let mut cov = Matrix::zeros(dim, dim);
    for s in samples {
        for i in 0..dim {
            let di = s[i] - mean[i];
            for j in i..dim {
                cov[(i, j)] = cov[(i, j)] + di * (s[j] - mean[j]);
            }
        }
    }
    let denom = T::count(n.saturating_sub(1).max(1));
    for i in 0..dim {
        for j in i..dim {
            let v = cov[(i, j)] / denom;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok((cov, mean))
}

fn normalize<T: Scalar>(v: &mut [T]) -> T {
    let norm = dot(v, v).sqrt();
    if norm > T::zero() {
        for x in v.iter_mut() {
            *x = *x / norm;
        }
    }
    norm
}

fn orthogonalize<T: Scalar>(v: &mut [T], against: &[Vec<T>]) {
    for u in against {
        let proj = dot(v, u);
        for (x, &y) in v.iter_mut().zip(u) {
            *x = *x - proj * y;
        }
    }
}

/// Dominant eigenvector of a symmetric PSD matrix restricted to the complement of
/// `against`. Returns `None` when the restricted operator is numerically zero.
fn power_iteration<T: Scalar>(
    cov: &Matrix<T>,
    against: &[Vec<T>],
    scale: T,
    rng: &mut SeededRng,
) -> Result<Option<(Vec<T>, T)>> {
    let dim = cov.rows();
    let tiny = scale * T::lit(1e-12);
    let mut v = vec![T::zero(); dim];
    v[0] = T::one();
    orthogonalize(&mut v, against);
    let mut restarts = 0;
    let mut iter = 0;
    while iter < MAX_ITERATIONS {
        iter += 1;
        if normalize(&mut v) <= T::lit(1e-8) {
            // Start vector collapsed onto an excluded or null direction: draw a new one.
            restarts += 1;
            if restarts > 8 {
                return Ok(None);
            }
            v = (0..dim).map(|_| T::lit(rng.uniform(-1.0, 1.0))).collect();
            orthogonalize(&mut v, against);
            continue;
        }
        let mut next = cov.vecmul(&v)?;
        orthogonalize(&mut next, against);
        let growth = dot(&next, &next).sqrt();
        if growth <= tiny {
            restarts += 1;
            if restarts > 8 {
                return Ok(None);
            }
            v = (0..dim).map(|_| T::lit(rng.uniform(-1.0, 1.0))).collect();
            orthogonalize(&mut v, against);
            continue;
        }
        for x in next.iter_mut() {
            *x = *x / growth;
        }
        let delta = next
            .iter()
            .zip(&v)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>()
            .sqrt();
        v = next;
        if delta < T::lit(TOLERANCE) {
            break;
        }
    }
    let av = cov.vecmul(&v)?;
    let eigenvalue = dot(&v, &av);
    Ok(Some((v, eigenvalue)))
}

fn any_orthogonal_unit<T: Scalar>(dim: usize, against: &[Vec<T>]) -> Vec<T> {
    for axis in 0..dim {
        let mut v = vec![T::zero(); dim];
        v[axis] = T::one();
        orthogonalize(&mut v, against);
        orthogonalize(&mut v, against);
        if normalize(&mut v) > T::lit(1e-3) {
            return v;
        }
    }
    unreachable!("dimension >= 2 always admits an orthogonal direction")
}

/// Top-two principal components by power iteration with deflation.
///
/// Deflation is done by projecting out earlier components inside each iteration, which
/// keeps the components orthogonal to working precision. Component signs are fixed so
/// that the largest-magnitude entry is positive.
pub fn pca_top2<T: Scalar>(samples: &[Vec<T>]) -> Result<Pca2<T>> {
    if samples.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "pca needs at least 3 samples, got {}",
            samples.len()
        )));
    }
    let dim = samples[0].len();
    if dim < 2 {
        return Err(Error::InvalidArgument("pca needs dimension >= 2".into()));
    }
    let (cov, mean) = covariance(samples)?;
    let trace: T = (0..dim).map(|i| cov[(i, i)]).sum();
    if !(trace > T::zero()) {
        return Err(Error::DegenerateCovariance);
    }
    let mut rng = SeededRng::new(RESTART_SEED);
    let (mut c1, l1) =
        power_iteration(&cov, &[], trace, &mut rng)?.ok_or(Error::DegenerateCovariance)?;
    canonical_sign(&mut c1);
    let (mut c2, l2) = match power_iteration(&cov, std::slice::from_ref(&c1), trace, &mut rng)? {
        Some(found) => found,
        None => (any_orthogonal_unit(dim, std::slice::from_ref(&c1)), T::zero()),
    };
    orthogonalize(&mut c2, std::slice::from_ref(&c1));
    normalize(&mut c2);
    canonical_sign(&mut c2);

    let coordinates = samples
        .iter()
        .map(|s| {
            let centered: Vec<T> = s.iter().zip(&mean).map(|(&x, &m)| x - m).collect();
            [dot(&centered, &c1), dot(&centered, &c2)]
        })
        .collect();
    Ok(Pca2 {
        components: [c1, c2],
        eigenvalues: [l1, l2],
        mean,
        coordinates,
    })
}

fn canonical_sign<T: Scalar>(v: &mut [T]) {
    let pivot = v
        .iter()
        .copied()
        .fold(T::zero(), |best, x| if x.abs() > best.abs() { x } else { best });
    if pivot < T::zero() {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, SymmetricEigen};

    #[test]
    fn collinear_points_along_first_axis() {
        let samples: Vec<Vec<f64>> = [-2.0, -1.0, 0.5, 3.0]
            .iter()
            .map(|&t| vec![t, 0.0, 0.0])
            .collect();
        let pca = pca_top2(&samples).unwrap();
        assert!((pca.components[0][0].abs() - 1.0).abs() < 1e-9);
        for c in &pca.coordinates {
            assert!(c[1].abs() < 1e-6);
        }
        assert!(super::dot(&pca.components[0], &pca.components[1]).abs() < 1e-6);
    }

    #[test]
    fn antipodal_pair_direction() {
        let v = [0.6f64, -0.8, 0.0];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        let samples = vec![v.to_vec(), neg, vec![0.0; 3]];
        let pca = pca_top2(&samples).unwrap();
        let cos = super::dot(&pca.components[0], &v);
        assert!((cos.abs() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_inputs() {
        let same = vec![vec![1.0f64, 2.0]; 4];
        assert!(matches!(pca_top2(&same), Err(Error::DegenerateCovariance)));
        assert!(pca_top2(&[vec![1.0f64, 2.0], vec![3.0, 1.0]]).is_err());
        assert!(pca_top2(&[vec![1.0f64], vec![2.0], vec![3.0]]).is_err());
    }

    #[test]
    fn matches_dense_eigensolver() {
        let mut rng = SeededRng::new(2024);
        let samples: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .collect();
        let pca = pca_top2(&samples).unwrap();

        let (cov, mean) = covariance(&samples).unwrap();
        let dense = DMatrix::from_row_slice(8, 8, cov.data());
        let eig = SymmetricEigen::new(dense);
        let mut order: Vec<usize> = (0..8).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

        for (k, &idx) in order.iter().take(2).enumerate() {
            let reference: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
            assert!((pca.eigenvalues[k] - eig.eigenvalues[idx]).abs() < 1e-8);
            let sign = super::dot(&reference, &pca.components[k]).signum();
            for (s, coords) in samples.iter().zip(&pca.coordinates) {
                let centered: Vec<f64> = s.iter().zip(&mean).map(|(x, m)| x - m).collect();
                let want = sign * super::dot(&centered, &reference);
                assert!((coords[k] - want).abs() < 1e-6, "{} vs {want}", coords[k]);
            }
        }
    }

    #[test]
    fn components_are_orthonormal() {
        let mut rng = SeededRng::new(77);
        for _ in 0..20 {
            let samples: Vec<Vec<f64>> = (0..6)
                .map(|_| (0..5).map(|_| rng.normal(1.0)).collect())
                .collect();
            let pca = pca_top2(&samples).unwrap();
            let [c1, c2] = &pca.components;
            assert!((super::dot(c1, c1) - 1.0).abs() < 1e-6);
            assert!((super::dot(c2, c2) - 1.0).abs() < 1e-6);
            assert!(super::dot(c1, c2).abs() < 1e-6);
        }
    }
}
