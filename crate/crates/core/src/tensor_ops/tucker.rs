use nalgebra::{SymmetricEigen, SVD};

use super::{mode_n_product, unfold, Tensor4};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Core size used for reanalysis cubes; flattens to 135 features.
pub const VISION_RANKS: [usize; 4] = [3, 5, 3, 3];
const CUBE_DIMS: [usize; 4] = [8, 9, 25, 25];
/// Mode sizes up to this use the Gram-matrix eigendecomposition.
const GRAM_MAX_ROWS: usize = 64;
const EIGEN_EPS: f64 = 1e-15;
const MAX_SWEEPS: usize = 10_000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LeadingVectorMethod {
    /// Gram eigendecomposition for small modes, thin SVD otherwise.
    #[default]
    Auto,
    Gram,
    Svd,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TuckerFactorization {
    pub core: Tensor4,
    /// `Iₙ × kₙ` factors with orthonormal columns.
    pub factors: [Matrix; 4],
    /// All singular values of each mode-n unfolding, descending.
    pub singular_values: [Vec<f64>; 4],
}

impl TuckerFactorization {
    pub fn ranks(&self) -> [usize; 4] {
        self.core.dims()
    }
}

/// Make the largest-magnitude entry of every column positive (first such
/// entry on ties).
fn fix_signs(u: &mut Matrix) {
    for c in 0..u.cols() {
        let mut best = 0;
        for r in 1..u.rows() {
            if u.get(r, c).abs() > u.get(best, c).abs() {
                best = r;
            }
        }
        if u.get(best, c) < 0.0 {
            for r in 0..u.rows() {
                u.set(r, c, -u.get(r, c));
            }
        }
    }
}

/// Leading `k` left singular vectors of `m` together with all of its
/// singular values in descending order.
pub fn leading_left_singular_vectors(
    m: &Matrix,
    k: usize,
    method: LeadingVectorMethod,
) -> Result<(Matrix, Vec<f64>)> {
    let rows = m.rows();
    if k == 0 || k > rows {
        return Err(Error::Dimension(format!("rank {k} outside 1..={rows}")));
    }
    let use_gram = match method {
        LeadingVectorMethod::Gram => true,
        LeadingVectorMethod::Svd => false,
        LeadingVectorMethod::Auto => rows <= GRAM_MAX_ROWS,
    } || k > m.cols();

    let (mut u, sv) = if use_gram {
        let eig = SymmetricEigen::try_new(m.gram().to_nalgebra(), EIGEN_EPS, MAX_SWEEPS)
            .ok_or_else(|| Error::Numerical("Gram eigendecomposition did not converge".into()))?;
        let mut order: Vec<usize> = (0..rows).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let mut u = Matrix::zeros(rows, k);
        for (c, &src) in order.iter().take(k).enumerate() {
            for r in 0..rows {
                u.set(r, c, eig.eigenvectors[(r, src)]);
            }
        }
        let sv = order.iter().map(|&i| eig.eigenvalues[i].max(0.0).sqrt()).collect();
        (u, sv)
    } else {
        let svd = SVD::try_new(m.to_nalgebra(), true, false, EIGEN_EPS, MAX_SWEEPS)
            .ok_or_else(|| Error::Numerical("SVD did not converge".into()))?;
        let full_u = svd.u.expect("requested U");
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| {
            svd.singular_values[b]
                .total_cmp(&svd.singular_values[a])
                .then(a.cmp(&b))
        });
        let mut u = Matrix::zeros(rows, k);
        for (c, &src) in order.iter().take(k).enumerate() {
            for r in 0..rows {
                u.set(r, c, full_u[(r, src)]);
            }
        }
        let mut sv: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
        sv.resize(rows, 0.0);
        (u, sv)
    };
    fix_signs(&mut u);
    Ok((u, sv))
}

pub fn tucker(t: &Tensor4, ranks: [usize; 4]) -> Result<TuckerFactorization> {
    tucker_with(t, ranks, LeadingVectorMethod::Auto)
}

/// Truncated higher-order SVD: each factor holds the leading left singular
/// vectors of the matching unfolding and the core is the projection of `t`
/// onto them.
pub fn tucker_with(
    t: &Tensor4,
    ranks: [usize; 4],
    method: LeadingVectorMethod,
) -> Result<TuckerFactorization> {
    let dims = t.dims();
    for n in 0..4 {
        if ranks[n] == 0 || ranks[n] > dims[n] {
            return Err(Error::Dimension(format!(
                "rank {} for mode {} outside 1..={}",
                ranks[n],
                n + 1,
                dims[n]
            )));
        }
    }
    let mut factors = Vec::with_capacity(4);
    let mut singular_values = Vec::with_capacity(4);
    for n in 0..4 {
        let (u, sv) = leading_left_singular_vectors(&unfold(t, n + 1)?, ranks[n], method)
            .map_err(|e| match e {
                Error::Numerical(msg) => Error::Numerical(format!("mode {}: {msg}", n + 1)),
                other => other,
            })?;
        factors.push(u);
        singular_values.push(sv);
    }
    // project the modes that shrink the most first
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| {
        let ra = ranks[a] as f64 / dims[a] as f64;
        let rb = ranks[b] as f64 / dims[b] as f64;
        ra.total_cmp(&rb).then(a.cmp(&b))
    });
    let mut core = t.clone();
    for &n in &order {
        core = mode_n_product(&core, &factors[n].transpose(), n + 1)?;
    }
    let factors: [Matrix; 4] = factors.try_into().expect("four factors");
    let singular_values: [Vec<f64>; 4] = singular_values.try_into().expect("four modes");
    Ok(TuckerFactorization {
        core,
        factors,
        singular_values,
    })
}

/// `core ×₁ U⁽¹⁾ ×₂ U⁽²⁾ ×₃ U⁽³⁾ ×₄ U⁽⁴⁾`.
pub fn reconstruct(f: &TuckerFactorization) -> Result<Tensor4> {
    let mut out = f.core.clone();
    for (n, u) in f.factors.iter().enumerate() {
        out = mode_n_product(&out, u, n + 1)?;
    }
    Ok(out)
}

/// Flattened `3×5×3×3` core of an `(8, 9, 25, 25)` cube, C order.
pub fn extract_vision_features(cube: &Tensor4) -> Result<Vec<f64>> {
    if cube.dims() != CUBE_DIMS {
        return Err(Error::Dimension(format!(
            "vision cube must be {CUBE_DIMS:?}, got {:?}",
            cube.dims()
        )));
    }
    Ok(tucker(cube, VISION_RANKS)?.core.into_data())
}
