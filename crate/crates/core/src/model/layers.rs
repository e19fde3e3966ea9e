use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::scalar::Real;

/// Fully connected layer `y = x W + b` with `W` stored `fan_in x fan_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> Dense<T> {
    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn init<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weight =
            Array2::from_shape_simple_fn((fan_in, fan_out), || T::of(rng.random_range(-limit..=limit)));
        Self { weight, bias: Array1::zeros(fan_out) }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { weight: Array2::zeros((fan_in, fan_out)), bias: Array1::zeros(fan_out) }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<T>, dy: ArrayView2<T>, grad: &mut Dense<T>) -> Array2<T> {
        ndarray::linalg::general_mat_mul(T::one(), &x.t(), &dy, T::one(), &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }
}

pub(crate) fn relu_inplace<T: Real>(x: &mut Array2<T>) {
    x.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
}

/// Zeroes `grad` wherever the ReLU output was not positive.
pub(crate) fn relu_backward_inplace<T: Real>(grad: &mut Array2<T>, output: &Array2<T>) {
    Zip::from(grad).and(output).for_each(|g, &o| {
        if o <= T::zero() {
            *g = T::zero();
        }
    });
}

/// Stack of dense layers with ReLU between them. The last layer is linear
/// unless `relu_last` is set.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Dense<T>>,
    pub relu_last: bool,
}

/// Hidden activations of one [`Mlp`] forward pass.
#[derive(Clone, Debug)]
pub struct MlpCache<T> {
    hidden: Vec<Array2<T>>,
}

impl<T: Real> Mlp<T> {
    pub fn init<R: Rng>(widths: &[usize], relu_last: bool, rng: &mut R) -> Self {
        let layers = widths.windows(2).map(|w| Dense::init(w[0], w[1], rng)).collect();
        Self { layers, relu_last }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(|l| Dense::zeros(l.fan_in(), l.fan_out())).collect(),
            relu_last: self.relu_last,
        }
    }

    pub fn in_width(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().expect("mlp has layers").fan_out()
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        self.forward_cached(x, false).0
    }

    pub fn forward_cached(&self, x: ArrayView2<T>, keep: bool) -> (Array2<T>, MlpCache<T>) {
        let mut hidden = Vec::new();
        let last = self.layers.len() - 1;
        let mut cur: Option<Array2<T>> = None;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut y = match &cur {
                None => layer.forward(x),
                Some(a) => layer.forward(a.view()),
            };
            if l < last || self.relu_last {
                relu_inplace(&mut y);
            }
            if let Some(a) = cur.take() {
                if keep {
                    hidden.push(a);
                }
            }
            cur = Some(y);
        }
        (cur.expect("mlp has layers"), MlpCache { hidden })
    }

    /// Backpropagates `d_out` (gradient w.r.t. the output) through the stack.
    pub fn backward(
        &self,
        x: ArrayView2<T>,
        cache: &MlpCache<T>,
        output: &Array2<T>,
        d_out: Array2<T>,
        grad: &mut Mlp<T>,
    ) -> Array2<T> {
        let mut d = d_out;
        if self.relu_last {
            relu_backward_inplace(&mut d, output);
        }
        for l in (0..self.layers.len()).rev() {
            let input = if l == 0 { x } else { cache.hidden[l - 1].view() };
            let dx = self.layers[l].backward(input, d.view(), &mut grad.layers[l]);
            d = dx;
            if l > 0 {
                relu_backward_inplace(&mut d, &cache.hidden[l - 1]);
            }
        }
        d
    }

    pub(crate) fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<super::TensorRef<'a, T>>) {
        for (l, layer) in self.layers.iter().enumerate() {
            out.push(super::TensorRef {
                name: format!("{prefix}.{l}.weight"),
                shape: vec![layer.fan_in(), layer.fan_out()],
                data: layer.weight.as_slice().expect("standard layout"),
            });
            out.push(super::TensorRef {
                name: format!("{prefix}.{l}.bias"),
                shape: vec![layer.fan_out()],
                data: layer.bias.as_slice().expect("standard layout"),
            });
        }
    }

    pub(crate) fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [T]>) {
        for layer in &mut self.layers {
            out.push(layer.weight.as_slice_mut().expect("standard layout"));
            out.push(layer.bias.as_slice_mut().expect("standard layout"));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn glorot_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d: Dense<f64> = Dense::init(10, 14, &mut rng);
        let limit = (6.0f64 / 24.0).sqrt();
        assert!(d.weight.iter().all(|w| w.abs() <= limit));
        assert!(d.bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn dense_backward_matches_hand_computation() {
        let layer = Dense { weight: array![[1.0, 2.0], [3.0, 4.0]], bias: array![0.5, -0.5] };
        let x = array![[1.0, -1.0]];
        assert_eq!(layer.forward(x.view()), array![[-1.5, -2.5]]);
        let mut g = Dense::zeros(2, 2);
        let dx = layer.backward(x.view(), array![[1.0, 0.0]].view(), &mut g);
        assert_eq!(dx, array![[1.0, 3.0]]);
        assert_eq!(g.weight, array![[1.0, 0.0], [-1.0, 0.0]]);
        assert_eq!(g.bias, array![1.0, 0.0]);
    }
}
