//! Dense 4-way tensors, mode-n algebra and the truncated multilinear SVD
//! used to compress reanalysis cubes.

mod cube_store;
mod hcub;
mod tucker;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub use cube_store::{CubeScaler, CubeStore, FrameSource, CUBE_CHANNELS, CUBE_SIDE};
pub(crate) use cube_store::window_from;
pub use hcub::{read_hcub, read_hcub_from, write_hcub, write_hcub_to, HCUB_MAGIC, HCUB_VERSION};
pub use tucker::{
    extract_vision_features, leading_left_singular_vectors, reconstruct, tucker, tucker_with,
    LeadingVectorMethod, TuckerFactorization, VISION_RANKS,
};

/// A dense `(T, C, H, W)` tensor stored in C order (last index fastest).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    dims: [usize; 4],
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Dimension(format!("tensor dims {dims:?} must be positive")));
        }
        let n: usize = dims.iter().product();
        if data.len() != n {
            return Err(Error::Dimension(format!(
                "tensor {dims:?} needs {n} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("tensor entries must be finite".into()));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    fn strides(dims: [usize; 4]) -> [usize; 4] {
        [dims[1] * dims[2] * dims[3], dims[2] * dims[3], dims[3], 1]
    }

    pub fn get(&self, idx: [usize; 4]) -> f64 {
        let s = Self::strides(self.dims);
        self.data[idx[0] * s[0] + idx[1] * s[1] + idx[2] * s[2] + idx[3]]
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&self, k: f64) -> Tensor4 {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|v| v * k).collect(),
        }
    }

    pub fn sub(&self, other: &Tensor4) -> Result<Tensor4> {
        if self.dims != other.dims {
            return Err(Error::Dimension(format!(
                "cannot subtract {:?} from {:?}",
                other.dims, self.dims
            )));
        }
        Ok(Tensor4 {
            dims: self.dims,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }
}

fn check_mode(mode: usize) -> Result<usize> {
    if !(1..=4).contains(&mode) {
        return Err(Error::Dimension(format!("mode {mode} outside 1..=4")));
    }
    Ok(mode - 1)
}

/// Split a flat C-order index space into (outer, mode, inner) extents.
fn mode_blocks(dims: [usize; 4], m: usize) -> (usize, usize, usize) {
    let outer: usize = dims[..m].iter().product();
    let inner: usize = dims[m + 1..].iter().product();
    (outer, dims[m], inner)
}

/// Mode-n unfolding: row `i` holds every entry with index `i` along `mode`;
/// columns enumerate the remaining indices in C order.
pub fn unfold(t: &Tensor4, mode: usize) -> Result<Matrix> {
    let m = check_mode(mode)?;
    let (outer, len, inner) = mode_blocks(t.dims, m);
    let cols = outer * inner;
    let mut out = vec![0.0; len * cols];
    for o in 0..outer {
        for i in 0..len {
            let src = &t.data[(o * len + i) * inner..(o * len + i + 1) * inner];
            out[i * cols + o * inner..i * cols + (o + 1) * inner].copy_from_slice(src);
        }
    }
    Matrix::from_vec(len, cols, out)
}

/// Inverse of [`unfold`].
pub fn fold(mat: &Matrix, mode: usize, dims: [usize; 4]) -> Result<Tensor4> {
    let m = check_mode(mode)?;
    let (outer, len, inner) = mode_blocks(dims, m);
    if mat.rows() != len || mat.cols() != outer * inner {
        return Err(Error::Dimension(format!(
            "matrix {}x{} cannot fold into {dims:?} along mode {mode}",
            mat.rows(),
            mat.cols()
        )));
    }
    let cols = outer * inner;
    let src = mat.as_slice();
    let mut data = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..len {
            data[(o * len + i) * inner..(o * len + i + 1) * inner]
                .copy_from_slice(&src[i * cols + o * inner..i * cols + (o + 1) * inner]);
        }
    }
    Tensor4::from_vec(dims, data)
}

/// `t ×ₙ m` for a `(J × Iₙ)` matrix: the result replaces `Iₙ` with `J`.
pub fn mode_n_product(t: &Tensor4, mat: &Matrix, mode: usize) -> Result<Tensor4> {
    let m = check_mode(mode)?;
    let (outer, len, inner) = mode_blocks(t.dims, m);
    if mat.cols() != len {
        return Err(Error::Dimension(format!(
            "mode-{mode} product needs a matrix with {len} columns, got {}x{}",
            mat.rows(),
            mat.cols()
        )));
    }
    let j = mat.rows();
    let mut dims = t.dims;
    dims[m] = j;
    let mut data = vec![0.0; outer * j * inner];
    for o in 0..outer {
        for r in 0..j {
            let dst = &mut data[(o * j + r) * inner..(o * j + r + 1) * inner];
            for i in 0..len {
                let w = mat.get(r, i);
                if w == 0.0 {
                    continue;
                }
                let src = &t.data[(o * len + i) * inner..(o * len + i + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
    }
    Ok(Tensor4 { dims, data })
}
