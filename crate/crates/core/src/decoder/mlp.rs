use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

pub const LEAK: f64 = 0.01;

/// Fully-connected layer `y = x W^T + b` over a batch of rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `out x in`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    /// Kaiming-uniform weights for a leaky-rectifier fan-in, zero bias.
    pub fn kaiming(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let gain2 = 2.0 / (1.0 + LEAK * LEAK);
        let bound = (3.0 * gain2 / input as f64).sqrt();
        let mut l = Self::zeros(input, output);
        l.weight.mapv_inplace(|_| rng.gen_range(-bound..bound));
        l
    }

    pub fn input(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output(&self) -> usize {
        self.weight.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight.t());
        y += &self.bias;
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.weight += &dy.t().dot(&x);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight)
    }

    pub fn is_finite(&self) -> bool {
        self.weight.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

pub fn leaky(z: &Array2<f64>) -> Array2<f64> {
    z.mapv(|v| if v > 0.0 { v } else { LEAK * v })
}

/// `dL/dz` from `dL/da` where `a = leaky(z)`.
pub fn leaky_backward(z: &Array2<f64>, da: &Array2<f64>) -> Array2<f64> {
    let mut dz = da.clone();
    ndarray::Zip::from(&mut dz).and(z).for_each(|d, &v| {
        if v <= 0.0 {
            *d *= LEAK;
        }
    });
    dz
}

/// Concatenates two batches along the feature axis.
pub fn hconcat(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), a.ncols() + b.ncols()));
    out.slice_mut(s![.., ..a.ncols()]).assign(&a);
    out.slice_mut(s![.., a.ncols()..]).assign(&b);
    out
}
