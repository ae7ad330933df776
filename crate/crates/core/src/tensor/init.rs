use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::array::{NdArray, Real};

/// Parameter initialization schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with the given std, resampled outside two standard deviations.
    TruncNormal(Real),
    Zeros,
    Ones,
}

impl Init {
    pub fn sample<R: Rng + ?Sized>(self, shape: &[usize], rng: &mut R) -> NdArray {
        match self {
            Init::TruncNormal(std) => trunc_normal(shape, std, rng),
            Init::Zeros => NdArray::zeros(shape),
            Init::Ones => NdArray::ones(shape),
        }
    }
}

pub fn trunc_normal<R: Rng + ?Sized>(shape: &[usize], std: Real, rng: &mut R) -> NdArray {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z as Real * std;
            }
        })
        .collect();
    NdArray::from_parts(shape.to_vec(), data)
}
