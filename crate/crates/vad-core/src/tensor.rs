use crate::error::TensorError;
use crate::scalar::Scalar;
use rand::Rng;
use rand_distr::StandardNormal;

/// Dense row-major array. Reshapes and slices copy; there are no strided views.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<S>) -> Result<Self, TensorError> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::ZERO; n],
        }
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Uniform values in [-bound, bound]. Sampling is done at f64 so the RNG
    /// stream is identical across precisions.
    pub fn rand_uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| S::from_f64(rng.gen_range(-bound..=bound)))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn rand_normal(shape: &[usize], mean: f64, std: f64, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                S::from_f64(mean + std * z)
            })
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self, TensorError> {
        Tensor::from_vec(shape, self.data.clone())
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.to_f32()).collect(),
        }
    }

    pub fn from_f32_tensor(t: &Tensor<f32>) -> Self {
        Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| S::from_f32(v)).collect(),
        }
    }
}

/// Permute axes with a copy. `axes` must be a permutation of 0..rank.
pub fn permute<S: Scalar>(t: &Tensor<S>, axes: &[usize]) -> Result<Tensor<S>, TensorError> {
    let rank = t.shape.len();
    if axes.len() != rank || {
        let mut seen = vec![false; rank];
        axes.iter().any(|&a| {
            if a >= rank || seen[a] {
                true
            } else {
                seen[a] = true;
                false
            }
        })
    } {
        return Err(TensorError::AxisOutOfRange {
            axis: *axes.iter().max().unwrap_or(&0),
            rank,
        });
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| t.shape[a]).collect();
    let in_strides = row_major_strides(&t.shape);
    let out_strides = row_major_strides(&out_shape);
    let mut out = vec![S::ZERO; t.numel()];
    // For each output element, find the source index.
    let mut coords = vec![0usize; rank];
    for (out_idx, slot) in out.iter_mut().enumerate() {
        let mut rem = out_idx;
        for d in 0..rank {
            coords[d] = rem / out_strides[d];
            rem %= out_strides[d];
        }
        let mut src = 0;
        for d in 0..rank {
            src += coords[d] * in_strides[axes[d]];
        }
        *slot = t.data[src];
    }
    Ok(Tensor {
        shape: out_shape,
        data: out,
    })
}

pub fn invert_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

pub fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn permute_roundtrip() {
        let t = Tensor::<f64>::from_vec(vec![2, 3, 4], (0..24).map(|v| v as f64).collect()).unwrap();
        let p = permute(&t, &[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        let back = permute(&p, &invert_axes(&[2, 0, 1])).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn permute_moves_elements() {
        let t = Tensor::<f64>::from_vec(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let p = permute(&t, &[1, 0]).unwrap();
        assert_eq!(p.data(), &[1., 4., 2., 5., 3., 6.]);
    }

    #[test]
    fn rand_streams_match_across_precision() {
        use rand::SeedableRng;
        let mut r1 = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut r2 = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::<f32>::rand_uniform(&[8], 1.0, &mut r1);
        let b = Tensor::<f64>::rand_uniform(&[8], 1.0, &mut r2);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*x, *y as f32);
        }
    }
}
