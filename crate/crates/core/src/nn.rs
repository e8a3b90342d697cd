//! Feedforward approximators for the transformation map and its inverse.
//!
//! Inputs are standardized with dataset statistics before the affine/ReLU
//! stack and outputs are de-standardized after it, so the network itself
//! operates on unit-scale data.

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

/// Smallest standard deviation used for standardization.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    /// Five hidden layers of 50 ReLU units.
    pub fn new(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            hidden: vec![50; 5],
            activation: Activation::Relu,
        }
    }

    pub fn with_hidden(mut self, hidden: Vec<usize>) -> Self {
        self.hidden = hidden;
        self
    }

    /// `(out, in)` shape of every weight matrix.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.in_dim];
        dims.extend(&self.hidden);
        dims.push(self.out_dim);
        dims.windows(2).map(|w| (w[1], w[0])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(o, i)| o * i + o).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.out_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config(format!("degenerate network shape {self:?}")));
        }
        Ok(())
    }
}

/// Per-column affine standardization `(v - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Column means and population standard deviations, floored at [`STD_FLOOR`].
    pub fn fit(data: &Array2<f64>) -> Result<Self> {
        if data.nrows() < 2 {
            return Err(Error::InsufficientData(format!(
                "normalization needs at least 2 rows, got {}",
                data.nrows()
            )));
        }
        let mean = data.mean_axis(Axis(0)).expect("nonempty");
        let std = data.std_axis(Axis(0), 0.0);
        let std: Vec<f64> = std
            .iter()
            .enumerate()
            .map(|(j, s)| {
                if *s < STD_FLOOR {
                    log::warn!("column {j} has (near) zero variance; std floored at {STD_FLOOR}");
                    STD_FLOOR
                } else {
                    *s
                }
            })
            .collect();
        Ok(Self {
            mean: mean.to_vec(),
            std,
        })
    }

    pub fn standardize(&self, data: &Array2<f64>) -> Array2<f64> {
        (data - &Array1::from(self.mean.clone())) / &Array1::from(self.std.clone())
    }

    pub fn destandardize(&self, data: &Array2<f64>) -> Array2<f64> {
        data * &Array1::from(self.std.clone()) + &Array1::from(self.mean.clone())
    }

    fn forward_coeffs(&self) -> (Array1<f64>, Array1<f64>) {
        let mul: Array1<f64> = self.std.iter().map(|s| 1.0 / s).collect();
        let add: Array1<f64> = self.mean.iter().zip(&mul).map(|(m, k)| -m * k).collect();
        (mul, add)
    }

    fn inverse_coeffs(&self) -> (Array1<f64>, Array1<f64>) {
        (Array1::from(self.std.clone()), Array1::from(self.mean.clone()))
    }
}

/// Network parameters; weights are stored `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MapParams {
    pub spec: MlpSpec,
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub norm_in: Normalization,
    pub norm_out: Normalization,
}

/// He-uniform weights in `+-sqrt(6 / fan_in)`, zero biases, identity
/// normalization.
pub fn init_params(spec: &MlpSpec, seed: u64) -> Result<MapParams> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for (out, fan_in) in spec.layer_shapes() {
        let bound = (6.0 / fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
        weights.push(Array2::from_shape_fn((out, fan_in), |_| dist.sample(&mut rng)));
        biases.push(Array1::zeros(out));
    }
    Ok(MapParams {
        spec: spec.clone(),
        weights,
        biases,
        norm_in: Normalization::identity(spec.in_dim),
        norm_out: Normalization::identity(spec.out_dim),
    })
}

/// Sets the input and output standardization from training data.
pub fn fit_normalization(
    params: &MapParams,
    inputs: &Array2<f64>,
    outputs: &Array2<f64>,
) -> Result<MapParams> {
    if inputs.ncols() != params.spec.in_dim || outputs.ncols() != params.spec.out_dim {
        return Err(Error::shape(
            "fit_normalization",
            format!(
                "data {}/{} columns for a {}->{} network",
                inputs.ncols(),
                outputs.ncols(),
                params.spec.in_dim,
                params.spec.out_dim
            ),
        ));
    }
    let mut out = params.clone();
    out.norm_in = Normalization::fit(inputs)?;
    out.norm_out = Normalization::fit(outputs)?;
    Ok(out)
}

impl MapParams {
    /// Flat list `[w0, b0, w1, b1, ...]` with biases as `1 x m` rows.
    pub fn tensors(&self) -> Vec<Array2<f64>> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w.clone(), b.clone().insert_axis(Axis(0))])
            .collect()
    }

    /// Replaces weights and biases from a list shaped like [`tensors`](Self::tensors).
    pub fn with_tensors(&self, tensors: Vec<Array2<f64>>) -> Result<MapParams> {
        if tensors.len() != 2 * self.weights.len() {
            return Err(Error::shape(
                "with_tensors",
                format!("{} tensors for {} layers", tensors.len(), self.weights.len()),
            ));
        }
        let mut out = self.clone();
        for (l, pair) in tensors.chunks(2).enumerate() {
            if pair[0].dim() != self.weights[l].dim() || pair[1].dim() != (1, self.biases[l].len()) {
                return Err(Error::shape("with_tensors", format!("layer {l} shape changed")));
            }
            out.weights[l] = pair[0].clone();
            out.biases[l] = pair[1].row(0).to_owned();
        }
        Ok(out)
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Records all weights and biases as trainable leaves.
    pub fn bind<'g>(&self, graph: &'g Graph) -> BoundParams<'g> {
        BoundParams {
            tensors: self.tensors().into_iter().map(|t| graph.param(t)).collect(),
        }
    }

    /// Records the parameters as constants.
    pub fn bind_const<'g>(&self, graph: &'g Graph) -> BoundParams<'g> {
        BoundParams {
            tensors: self.tensors().into_iter().map(|t| graph.constant(t)).collect(),
        }
    }

    /// Evaluates the network on rows of `x` without keeping a graph.
    pub fn predict(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        let g = Graph::new();
        let bound = self.bind_const(&g);
        Ok(forward(self, &bound, g.constant(x.clone()))?.value())
    }
}

/// Parameters living on a graph, ordered `[w0, b0, w1, b1, ...]`.
#[derive(Debug, Clone)]
pub struct BoundParams<'g> {
    pub tensors: Vec<Var<'g>>,
}

impl<'g> BoundParams<'g> {
    pub fn layers(&self) -> usize {
        self.tensors.len() / 2
    }

    pub fn values(&self) -> Vec<Array2<f64>> {
        self.tensors.iter().map(|t| t.value()).collect()
    }
}

fn check_input(params: &MapParams, x: &Var<'_>) -> Result<()> {
    if x.shape().1 != params.spec.in_dim {
        return Err(Error::shape(
            "forward",
            format!("input has {} columns, network expects {}", x.shape().1, params.spec.in_dim),
        ));
    }
    Ok(())
}

/// Standardize, affine+ReLU stack, final affine, de-standardize.
///
/// `bound` supplies the weights (possibly adapted copies on the graph);
/// `params` supplies shapes and normalization statistics.
pub fn forward<'g>(params: &MapParams, bound: &BoundParams<'g>, x: Var<'g>) -> Result<Var<'g>> {
    check_input(params, &x)?;
    let (mul, add) = params.norm_in.forward_coeffs();
    let mut h = x.affine(&mul, &add)?;
    let layers = bound.layers();
    for l in 0..layers {
        let (w, b) = (bound.tensors[2 * l], bound.tensors[2 * l + 1]);
        h = h.matmul(w.t())?.add_row(b)?;
        if l + 1 < layers {
            h = h.relu();
        }
    }
    let (mul, add) = params.norm_out.inverse_coeffs();
    h.affine(&mul, &add)
}

/// Forward pass that also propagates a tangent direction `v` (same shape as
/// `x`), returning `(F(x), dF(x)[v])`. The tangent is built from recorded
/// operations, so it can be differentiated with respect to the parameters.
pub fn forward_with_tangent<'g>(
    params: &MapParams,
    bound: &BoundParams<'g>,
    x: Var<'g>,
    v: Var<'g>,
) -> Result<(Var<'g>, Var<'g>)> {
    check_input(params, &x)?;
    if v.shape() != x.shape() {
        return Err(Error::shape("forward_with_tangent", "tangent shape differs from input"));
    }
    let graph = x.graph();
    let (mul, add) = params.norm_in.forward_coeffs();
    let mut h = x.affine(&mul, &add)?;
    let mut t = v.affine(&mul, &Array1::zeros(mul.len()))?;
    let layers = bound.layers();
    for l in 0..layers {
        let (w, b) = (bound.tensors[2 * l], bound.tensors[2 * l + 1]);
        let wt = w.t();
        let pre = h.matmul(wt)?.add_row(b)?;
        t = t.matmul(wt)?;
        if l + 1 < layers {
            let mask = pre.with_value(|p| p.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
            t = t.mul(graph.constant(mask))?;
            h = pre.relu();
        } else {
            h = pre;
        }
    }
    let (mul, add) = params.norm_out.inverse_coeffs();
    let y = h.affine(&mul, &add)?;
    let jv = t.affine(&mul, &Array1::zeros(mul.len()))?;
    Ok((y, jv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn small_net(seed: u64) -> MapParams {
        let spec = MlpSpec::new(2, 3).with_hidden(vec![6, 5]);
        let mut p = init_params(&spec, seed).unwrap();
        p.biases.iter_mut().for_each(|b| b.fill(0.1));
        p.norm_in = Normalization { mean: vec![0.2, -0.1], std: vec![0.5, 2.0] };
        p.norm_out = Normalization { mean: vec![1.0, 0.0, -1.0], std: vec![2.0, 0.5, 1.5] };
        p
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let spec = MlpSpec::new(2, 5);
        let a = init_params(&spec, 3).unwrap();
        let b = init_params(&spec, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_params(&spec, 4).unwrap());
        let shapes: Vec<_> = a.weights.iter().map(|w| w.dim()).collect();
        assert_eq!(
            shapes,
            vec![(50, 2), (50, 50), (50, 50), (50, 50), (50, 50), (5, 50)]
        );
        for w in &a.weights {
            let bound = (6.0 / w.ncols() as f64).sqrt();
            assert!(w.iter().all(|v| v.abs() <= bound));
        }
        assert!(a.biases.iter().all(|b| b.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn default_parameter_count() {
        let spec = MlpSpec::new(2, 5);
        let expected = 2 * 50 + 50 + 4 * (50 * 50 + 50) + 50 * 5 + 5;
        assert_eq!(expected, 10_605);
        assert_eq!(spec.param_count(), expected);
        assert_eq!(init_params(&spec, 0).unwrap().param_count(), expected);
    }

    #[test]
    fn normalization_statistics() {
        let data = array![[0.0, 5.0], [2.0, 5.0]];
        let n = Normalization::fit(&data).unwrap();
        assert_eq!(n.mean, vec![1.0, 5.0]);
        assert_eq!(n.std, vec![1.0, STD_FLOOR]);
        let round = n.destandardize(&n.standardize(&array![[0.3, 5.0], [-7.0, 5.0]]));
        for (a, b) in round.iter().zip([0.3, 5.0, -7.0, 5.0]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
        assert!(Normalization::fit(&array![[1.0, 2.0]]).is_err());
    }

    #[test]
    fn fit_normalization_checks_columns() {
        let p = init_params(&MlpSpec::new(2, 1).with_hidden(vec![3]), 0).unwrap();
        let x = array![[0.0, 1.0], [2.0, 3.0]];
        let y = array![[1.0], [3.0]];
        let fitted = fit_normalization(&p, &x, &y).unwrap();
        assert_eq!(fitted.norm_in.mean, vec![1.0, 2.0]);
        assert_eq!(fitted.norm_out.std, vec![1.0]);
        assert!(fit_normalization(&p, &y, &x).is_err());
    }

    #[test]
    fn zero_hidden_layer_is_destandardized_affine() {
        let spec = MlpSpec::new(2, 1).with_hidden(vec![]);
        let mut p = init_params(&spec, 0).unwrap();
        p.weights[0] = array![[2.0, -1.0]];
        p.biases[0] = array![0.5];
        p.norm_in = Normalization { mean: vec![1.0, 0.0], std: vec![2.0, 1.0] };
        p.norm_out = Normalization { mean: vec![10.0], std: vec![3.0] };
        let out = p.predict(&array![[3.0, 4.0]]).unwrap();
        // standardized input [1, 4] -> 2 - 4 + 0.5 = -1.5 -> -4.5 + 10
        assert_abs_diff_eq!(out[[0, 0]], 5.5, epsilon = 1e-12);
    }

    #[test]
    fn rows_are_independent() {
        let p = small_net(1);
        let x = array![[0.1, 0.2], [1.0, -3.0], [0.5, 0.5]];
        let all = p.predict(&x).unwrap();
        for i in 0..3 {
            let one = p.predict(&x.slice(ndarray::s![i..i + 1, ..]).to_owned()).unwrap();
            assert_eq!(one.row(0), all.row(i));
        }
        let permuted = array![[0.5, 0.5], [0.1, 0.2], [1.0, -3.0]];
        let out = p.predict(&permuted).unwrap();
        assert_eq!(out.row(0), all.row(2));
        assert_eq!(out.row(1), all.row(0));
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let p = small_net(7);
        let report = finite_diff_check(
            |g, x| {
                let bound = p.bind_const(g);
                Ok(forward(&p, &bound, x)?.sum())
            },
            &array![[0.3, -0.7], [1.1, 0.4]],
            1e-5,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn tangent_matches_directional_difference() {
        let p = small_net(11);
        let x = array![[0.3, -0.7], [1.1, 0.4]];
        let v = array![[0.5, 2.0], [-1.0, 0.25]];
        let g = Graph::new();
        let bound = p.bind_const(&g);
        let (y, jv) = forward_with_tangent(&p, &bound, g.constant(x.clone()), g.constant(v.clone()))
            .unwrap();
        assert_eq!(y.value(), p.predict(&x).unwrap());
        let h = 1e-6;
        let fd = (p.predict(&(&x + &(&v * h))).unwrap() - p.predict(&(&x - &(&v * h))).unwrap())
            / (2.0 * h);
        for (a, b) in jv.value().iter().zip(fd.iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-6);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let p = small_net(0);
        assert!(p.predict(&array![[1.0, 2.0, 3.0]]).is_err());
    }
}
