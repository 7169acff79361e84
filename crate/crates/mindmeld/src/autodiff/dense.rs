//! Fully-connected layer stacks.

use rand::Rng;

use super::{shape_mismatch, AutodiffError, Graph, NodeId, ParamTensors, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Linear,
    Relu,
    Tanh,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Tensor, // [in, out]
    pub bias: Tensor,   // [out]
    pub activation: Activation,
}

/// A chain of affine layers with per-layer activations.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    pub layers: Vec<DenseLayer>,
}

impl DenseParams {
    /// Build a stack from `widths` (input width first) and one activation
    /// per layer. Weights are uniform in `±1/sqrt(fan_in)`.
    pub fn new(widths: &[usize], activations: &[Activation], rng: &mut impl Rng) -> Self {
        assert_eq!(
            widths.len(),
            activations.len() + 1,
            "need one activation per layer"
        );
        let layers = widths
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let s = 1.0 / (fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-s..s)).collect();
                DenseLayer {
                    weight: Tensor::new(vec![fan_in, fan_out], data)
                        .expect("shape/data agree")
                        .with_grad(),
                    bias: Tensor::zeros(vec![fan_out]).with_grad(),
                    activation,
                }
            })
            .collect();
        Self { layers }
    }

    pub fn zeros(widths: &[usize], activations: &[Activation]) -> Self {
        assert_eq!(widths.len(), activations.len() + 1);
        let layers = widths
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| DenseLayer {
                weight: Tensor::zeros(vec![w[0], w[1]]).with_grad(),
                bias: Tensor::zeros(vec![w[1]]).with_grad(),
                activation,
            })
            .collect();
        Self { layers }
    }

    pub fn input_size(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.shape()[0])
    }

    pub fn output_size(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.shape()[1])
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                let DenseLayer { weight, bias, .. } = l;
                [weight, bias]
            })
            .collect()
    }

    pub fn bind(&self, g: &mut Graph) -> BoundDense {
        let layers = self
            .layers
            .iter()
            .map(|l| BoundDenseLayer {
                weight: g.leaf(&l.weight),
                bias: g.leaf(&l.bias),
                activation: l.activation,
            })
            .collect();
        BoundDense { layers }
    }
}

impl ParamTensors for DenseParams {
    fn param_tensors(&self) -> Vec<&Tensor> {
        self.tensors()
    }

    fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.tensors_mut()
    }
}

#[derive(Clone, Copy)]
struct BoundDenseLayer {
    weight: NodeId,
    bias: NodeId,
    activation: Activation,
}

/// Graph-resident handles to a bound [`DenseParams`].
#[derive(Clone)]
pub struct BoundDense {
    layers: Vec<BoundDenseLayer>,
}

impl BoundDense {
    pub fn ids(&self) -> Vec<NodeId> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight, l.bias])
            .collect()
    }

    /// Apply the stack to a `[batch, in]` node.
    pub fn forward(&self, g: &mut Graph, mut x: NodeId) -> Result<NodeId, AutodiffError> {
        for layer in &self.layers {
            let wx = g.matmul(x, layer.weight)?;
            let pre = g.add_bias(wx, layer.bias)?;
            x = match layer.activation {
                Activation::Linear => pre,
                Activation::Relu => g.relu(pre),
                Activation::Tanh => g.tanh(pre),
            };
        }
        Ok(x)
    }
}

/// Apply a dense stack to a single input vector, recording on the tape.
pub fn forward_dense(g: &mut Graph, params: &DenseParams, x: &Tensor) -> Result<NodeId, AutodiffError> {
    let (_, width) = x.dims2();
    if width != params.input_size() {
        return Err(shape_mismatch(
            "forward_dense",
            format!("input width {width}, expected {}", params.input_size()),
        ));
    }
    let bound = params.bind(g);
    let x_id = g.leaf(x);
    bound.forward(g, x_id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_layer_passes_input_through() {
        let params = DenseParams {
            layers: vec![DenseLayer {
                weight: Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap(),
                bias: Tensor::vector(vec![0.0; 3]),
                activation: Activation::Linear,
            }],
        };
        let x = Tensor::vector(vec![0.4, -1.7, 2.2]);
        let mut g = Graph::new();
        let out = forward_dense(&mut g, &params, &x).unwrap();
        assert_eq!(g.value(out), x.data());
    }

    #[test]
    fn one_by_one_affine_layer() {
        let params = DenseParams {
            layers: vec![DenseLayer {
                weight: Tensor::matrix(1, 1, vec![2.0]).unwrap(),
                bias: Tensor::vector(vec![1.0]),
                activation: Activation::Linear,
            }],
        };
        let mut g = Graph::new();
        let out = forward_dense(&mut g, &params, &Tensor::vector(vec![3.0])).unwrap();
        assert_eq!(g.value(out), &[7.0]);
    }

    #[test]
    fn matches_matrix_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = DenseParams::new(&[3, 5, 2], &[Activation::Relu, Activation::Linear], &mut rng);
        let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let out = forward_dense(&mut g, &params, &Tensor::vector(x.clone())).unwrap();
        let expected = reference::dense_eval(&params, &x);
        for (got, want) in g.value(out).iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn wrong_input_width_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = DenseParams::new(&[3, 2], &[Activation::Linear], &mut rng);
        let bad = Tensor::vector(vec![1.0, 2.0]);
        assert!(forward_dense(&mut Graph::new(), &params, &bad).is_err());
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut params =
            DenseParams::new(&[3, 4, 2], &[Activation::Tanh, Activation::Linear], &mut rng);
        let x = Tensor::vector((0..3).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let eval = |p: &DenseParams| {
            let mut g = Graph::new();
            let out = forward_dense(&mut g, p, &x).unwrap();
            let sq = g.square(out);
            let loss = g.sum_all(sq);
            g.value(loss)[0]
        };
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let x_id = g.leaf(&x);
        let out = bound.forward(&mut g, x_id).unwrap();
        let sq = g.square(out);
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        let analytic: Vec<Vec<f64>> = bound
            .ids()
            .iter()
            .map(|&id| g.grad(id).unwrap().to_vec())
            .collect();
        let worst = reference::fd_max_relative_error(&mut params, &analytic, 1e-4, eval);
        assert!(worst < 1e-4, "worst relative error {worst}");
    }
}
