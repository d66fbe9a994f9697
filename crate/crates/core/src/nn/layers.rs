use std::sync::Arc;

use rand::Rng;

use super::graph::{Graph, Groups, Var};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Bound of the uniform init for attention vectors.
pub const ATTENTION_INIT: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = store.add_glorot(format!("{name}.w"), in_dim, out_dim, rng)?;
        let b = store.add_zeros(format!("{name}.b"), 1, out_dim)?;
        Ok(Self { w, b, in_dim, out_dim })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        if g.shape(x)[1] != self.in_dim {
            return Err(Error::Shape(format!("linear expects width {}, got {}", self.in_dim, g.shape(x)[1])));
        }
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

/// Stack of affine layers with ReLU between them.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub relu_last: bool,
}

impl Mlp {
    /// `dims` lists the input width followed by every layer's output width.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: &[usize],
        relu_last: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config(format!("mlp {name} needs at least one layer")));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers, relu_last })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, store, x)?;
            if i < last || self.relu_last {
                x = g.relu(x);
            }
        }
        Ok(x)
    }
}

/// Multi-head graph attention convolution: `gat(x·W) + b`, heads concatenated.
#[derive(Debug, Clone)]
pub struct GatLayer {
    pub w: ParamId,
    pub a_self: ParamId,
    pub a_nbr: ParamId,
    pub b: ParamId,
    pub heads: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl GatLayer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        heads: usize,
        head_width: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let out_dim = heads * head_width;
        Ok(Self {
            w: store.add_glorot(format!("{name}.w"), in_dim, out_dim, rng)?,
            a_self: store.add_uniform(format!("{name}.att_self"), 1, out_dim, ATTENTION_INIT, rng)?,
            a_nbr: store.add_uniform(format!("{name}.att_nbr"), 1, out_dim, ATTENTION_INIT, rng)?,
            b: store.add_zeros(format!("{name}.b"), 1, out_dim)?,
            heads,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, adj: &Arc<Groups>) -> Result<Var> {
        let w = g.param(store, self.w);
        let h = g.matmul(x, w)?;
        let a = g.param(store, self.a_self);
        let n = g.param(store, self.a_nbr);
        let y = g.gat(h, a, n, self.heads, adj.clone())?;
        let b = g.param(store, self.b);
        g.add_row(y, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let mlp = Mlp::new(&mut store, "m", &[3, 4, 2], false, &mut rng).unwrap();
        for l in &mlp.layers {
            store.get_mut(l.w).value.fill(0.0);
        }
        let mut g = Graph::new();
        let x = g.input(Tensor::from_rows(&[vec![1.0, -2.0, 3.0], vec![0.5, 0.5, 0.5]]).unwrap());
        let y = mlp.forward(&mut g, &store, x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let mlp = Mlp::new(&mut store, "m", &[3, 3], false, &mut rng).unwrap();
        let w = &mut store.get_mut(mlp.layers[0].w).value;
        w.fill(0.0);
        for i in 0..3 {
            w.row_mut(i)[i] = 1.0;
        }
        let input = Tensor::from_rows(&[vec![1.0, -2.0, 3.0]]).unwrap();
        let mut g = Graph::new();
        let x = g.input(input.clone());
        let y = mlp.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y), &input);
    }

    #[test]
    fn two_layer_net_matches_scalar_hand_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut store = ParamStore::<f64>::new();
        let mlp = Mlp::new(&mut store, "m", &[3, 4, 2], false, &mut rng).unwrap();
        for l in &mlp.layers {
            let b = &mut store.get_mut(l.b).value;
            for v in b.data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
        let xs = [0.3, -1.2, 0.7];
        let (w0, b0) = (store.value(mlp.layers[0].w).clone(), store.value(mlp.layers[0].b).clone());
        let (w1, b1) = (store.value(mlp.layers[1].w).clone(), store.value(mlp.layers[1].b).clone());
        let mut hidden = [0.0; 4];
        for (j, h) in hidden.iter_mut().enumerate() {
            let mut s = b0.at(0, j);
            for (i, &x) in xs.iter().enumerate() {
                s += x * w0.at(i, j);
            }
            *h = if s > 0.0 { s } else { 0.0 };
        }
        let mut want = [0.0; 2];
        for (k, o) in want.iter_mut().enumerate() {
            *o = b1.at(0, k) + (0..4).map(|j| hidden[j] * w1.at(j, k)).sum::<f64>();
        }
        let mut g = Graph::new();
        let x = g.input(Tensor::from_rows(&[xs.to_vec()]).unwrap());
        let y = mlp.forward(&mut g, &store, x).unwrap();
        for k in 0..2 {
            assert!((g.value(y).at(0, k) - want[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn width_mismatch_is_a_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let mlp = Mlp::new(&mut store, "m", &[3, 2], false, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(1, 4));
        assert!(matches!(mlp.forward(&mut g, &store, x), Err(Error::Shape(_))));
    }

    #[test]
    fn init_bounds_follow_fan_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let gat = GatLayer::new(&mut store, "g", 10, 4, 5, &mut rng).unwrap();
        let bound = (6.0f64 / 30.0).sqrt();
        assert!(store.value(gat.w).data().iter().all(|v| v.abs() <= bound));
        assert!(store.value(gat.a_self).data().iter().all(|v| v.abs() <= ATTENTION_INIT));
        assert!(store.value(gat.b).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn symmetric_nodes_get_identical_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let gat = GatLayer::new(&mut store, "g", 3, 2, 4, &mut rng).unwrap();
        let adj = Arc::new(Groups::from_lists(&[vec![0, 1], vec![0, 1]]));
        let mut g = Graph::new();
        let x = g.input(Tensor::from_rows(&[vec![0.2, 0.4, -0.1], vec![0.2, 0.4, -0.1]]).unwrap());
        let y = gat.forward(&mut g, &store, x, &adj).unwrap();
        assert_eq!(g.value(y).row(0), g.value(y).row(1));
    }
}
