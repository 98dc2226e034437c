//! Named parameter groups and layer initialisation.

use std::collections::BTreeMap;

use rand::Rng;

use crate::graph::{Gradients, Graph, Var};
use crate::{Scalar, Tensor};

/// An ordered set of named tensors that are optimised together.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamGroup<T> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamGroup<T> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Registers every tensor in `graph`, as leaves if `trainable` and as
    /// constants otherwise.
    pub fn bind(&self, graph: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| {
                let var = if trainable { graph.leaf(v.clone()) } else { graph.constant(v.clone()) };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    /// A group with the same names and shapes, filled with zeros.
    pub fn zeros_like(&self) -> Self {
        let params = self.params.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec()))).collect();
        Self { params }
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::all_finite)
    }
}

impl<T> IntoIterator for ParamGroup<T> {
    type Item = (String, Tensor<T>);
    type IntoIter = std::collections::btree_map::IntoIter<String, Tensor<T>>;

    fn into_iter(self) -> Self::IntoIter {
        self.params.into_iter()
    }
}

impl<T> FromIterator<(String, Tensor<T>)> for ParamGroup<T> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<T>)>>(iter: I) -> Self {
        Self { params: iter.into_iter().collect() }
    }
}

/// Graph handles for the tensors of one [`ParamGroup`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Panics if the group has no parameter called `name`.
    pub fn var(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("missing parameter {name:?}"),
        }
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Gradients for every bound parameter; parameters that did not take
    /// part in the loss get zeros.
    pub fn grads<T: Scalar>(&self, graph: &Graph<T>, grads: &Gradients<T>) -> ParamGroup<T> {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let g = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(graph.shape(v).to_vec()));
                (k.clone(), g)
            })
            .collect()
    }
}

/// Uniform initialisation with variance `gain^2 / fan_in`.
///
/// `gain = sqrt(2)` gives He initialisation for ReLU layers.
pub fn uniform_init<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize, gain: f64) -> Tensor<T> {
    let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
    let n = crate::tensor::numel(shape);
    let data = (0..n).map(|_| T::lit(rng.random_range(-bound..=bound))).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("shape")
}

/// Adds `{name}.w` `[out, in, k, k]` and a zero bias `{name}.b` `[out]`.
pub fn add_conv<T: Scalar, R: Rng + ?Sized>(
    group: &mut ParamGroup<T>,
    rng: &mut R,
    name: &str,
    (in_c, out_c, k): (usize, usize, usize),
    gain: f64,
) {
    let fan_in = in_c * k * k;
    group.insert(format!("{name}.w"), uniform_init(rng, &[out_c, in_c, k, k], fan_in, gain));
    group.insert(format!("{name}.b"), Tensor::zeros(vec![out_c]));
}

/// Adds `{name}.w` `[out, in]` and a zero bias `{name}.b` `[out]`.
pub fn add_linear<T: Scalar, R: Rng + ?Sized>(
    group: &mut ParamGroup<T>,
    rng: &mut R,
    name: &str,
    (fan_in, fan_out): (usize, usize),
    gain: f64,
) {
    group.insert(format!("{name}.w"), uniform_init(rng, &[fan_out, fan_in], fan_in, gain));
    group.insert(format!("{name}.b"), Tensor::zeros(vec![fan_out]));
}

/// Adds a per-channel affine `{name}.g` (ones) and `{name}.b` (zeros).
pub fn add_affine<T: Scalar>(group: &mut ParamGroup<T>, name: &str, channels: usize) {
    group.insert(format!("{name}.g"), Tensor::full(vec![channels], T::one()));
    group.insert(format!("{name}.b"), Tensor::zeros(vec![channels]));
}

/// Largest singular value of `w` viewed as `[rows, numel / rows]`, by power
/// iteration from a fixed start vector.
pub fn spectral_norm<T: Scalar>(w: &Tensor<T>, iters: usize) -> f64 {
    let rows = w.shape().first().copied().unwrap_or(1).max(1);
    let cols = w.numel() / rows;
    if cols == 0 {
        return 0.0;
    }
    let a: Vec<f64> = w.data().iter().map(|v| v.as_f64()).collect();
    let mut v = vec![1.0 / (cols as f64).sqrt(); cols];
    let mut u = vec![0.0; rows];
    let mut sigma = 0.0;
    for _ in 0..iters.max(1) {
        for (i, ui) in u.iter_mut().enumerate() {
            *ui = a[i * cols..(i + 1) * cols].iter().zip(&v).map(|(x, y)| x * y).sum();
        }
        let un = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if un == 0.0 {
            return 0.0;
        }
        u.iter_mut().for_each(|x| *x /= un);
        v.iter_mut().for_each(|x| *x = 0.0);
        for (i, ui) in u.iter().enumerate() {
            for (vj, aij) in v.iter_mut().zip(&a[i * cols..(i + 1) * cols]) {
                *vj += aij * ui;
            }
        }
        sigma = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if sigma == 0.0 {
            return 0.0;
        }
        v.iter_mut().for_each(|x| *x /= sigma);
    }
    sigma
}
