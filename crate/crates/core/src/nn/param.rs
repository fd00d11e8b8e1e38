use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::{lit, Scalar};
use crate::seed::derive_seed;

/// How a parameter is (re)initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `N(0, 2 / fan_in)`, for layers followed by a rectifier.
    HeNormal { fan_in: usize },
    /// `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
    XavierUniform { fan_in: usize, fan_out: usize },
    Normal { std: f64 },
    Zeros,
    Ones,
}

/// A trainable 2-D tensor with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<T: Scalar> {
    pub value: Array2<T>,
    pub grad: Array2<T>,
    pub init: Init,
}

impl<T: Scalar> Param<T> {
    pub fn new(shape: (usize, usize), init: Init) -> Self {
        Self {
            value: Array2::zeros(shape),
            grad: Array2::zeros(shape),
            init,
        }
    }

    /// Fills `value` from a stream keyed by `(seed, name)`; the same pair
    /// always produces the same tensor.
    pub fn initialize(&mut self, seed: u64, name: &str) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, name));
        let normal = |std: f64, rng: &mut ChaCha8Rng| {
            let z: f64 = StandardNormal.sample(rng);
            lit::<T>(z * std)
        };
        match self.init {
            Init::HeNormal { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                self.value.mapv_inplace(|_| normal(std, &mut rng));
            }
            Init::Normal { std } => self.value.mapv_inplace(|_| normal(std, &mut rng)),
            Init::XavierUniform { fan_in, fan_out } => {
                let a = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
                self.value
                    .mapv_inplace(|_| lit(a * (2.0 * rng.random::<f64>() - 1.0)));
            }
            Init::Zeros => self.value.fill(T::zero()),
            Init::Ones => self.value.fill(T::one()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}
