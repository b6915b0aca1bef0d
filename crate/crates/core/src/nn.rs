//! Forward-pass session and parameter initialization shared by the model
//! modules.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numkit::{Graph, ParamId, ParamStore, Tensor, Var};

/// One forward pass: a fresh computation record over a parameter store.
/// Dropout is active only when an RNG is supplied.
pub struct Session<'a> {
    pub g: Graph,
    pub store: &'a ParamStore,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Session<'a> {
    pub fn eval(store: &'a ParamStore) -> Self {
        Session {
            g: Graph::new(),
            store,
            rng: None,
        }
    }

    pub fn train(store: &'a ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Session {
            g: Graph::new(),
            store,
            rng: Some(rng),
        }
    }

    pub fn with_graph(mut self, g: Graph) -> Self {
        self.g = g;
        self
    }

    pub fn training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.g.param(self.store, id)
    }

    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) => self.g.dropout(x, rate, true, rng),
            None if (0.0..1.0).contains(&rate) => Ok(x),
            None => Err(Error::Config(format!("dropout rate {rate} outside [0, 1)"))),
        }
    }
}

/// Seeded parameter factory: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for weights,
/// zeros for biases, ones/zeros for layer-norm gain/shift.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    pub fn uniform(&mut self, name: &str, dims: &[usize], fan_in: usize) -> Result<ParamId> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n = dims.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.store.add(name, Tensor::new(dims.to_vec(), data)?)
    }

    pub fn zeros(&mut self, name: &str, dims: &[usize]) -> Result<ParamId> {
        self.store.add(name, Tensor::zeros(dims.to_vec())?)
    }

    pub fn ones(&mut self, name: &str, dims: &[usize]) -> Result<ParamId> {
        self.store.add(name, Tensor::full(dims.to_vec(), 1.0)?)
    }
}

/// Affine map `x W + b` with weight `d_in x d_out`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn init(init: &mut Init, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Linear {
            w: init.uniform(&format!("{name}.w"), &[d_in, d_out], d_in)?,
            b: init.zeros(&format!("{name}.b"), &[d_out])?,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (w, b) = (s.p(self.w), s.p(self.b));
        s.g.affine(x, w, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNormParams {
    pub fn init(init: &mut Init, name: &str, n: usize) -> Result<Self> {
        Ok(LayerNormParams {
            gain: init.ones(&format!("{name}.gain"), &[n])?,
            shift: init.zeros(&format!("{name}.shift"), &[n])?,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (g, b) = (s.p(self.gain), s.p(self.shift));
        s.g.layer_norm(x, g, b)
    }
}

/// Replace exactly-zero parameter entries with small uniform noise.
/// Zero-initialized biases map all-zero rows onto relu kinks, where finite
/// differences disagree with the one-sided analytic derivative.
pub fn jitter_zeros(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) -> Result<()> {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let t = store.value(id);
        if !t.data().contains(&0.0) {
            continue;
        }
        let data = t
            .data()
            .iter()
            .map(|&v| if v == 0.0 { rng.random_range(-scale..scale) } else { v })
            .collect();
        let jittered = Tensor::new(t.dims().to_vec(), data)?;
        store.set_value(id, jittered)?;
    }
    Ok(())
}
