//! Parameter storage, initialization, the Adam optimizer, and the
//! spectrally normalizable convolution layer the networks are built from.

use ndarray::{Array1, Array4, ArrayD};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use std::collections::HashMap;

use crate::autodiff::{power_iteration, Graph, NodeId};
use crate::error::{Error, Result};

pub type ParamId = usize;
pub type BufferId = usize;

pub struct ParamEntry {
    pub name: String,
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
    pub adam_m: ArrayD<f64>,
    pub adam_v: ArrayD<f64>,
}

pub struct BufferEntry {
    pub name: String,
    pub value: Vec<f64>,
}

/// Named storage for trainable parameters and persistent (non-trainable)
/// buffers such as spectral-norm power-iteration vectors.
#[derive(Default)]
pub struct ParamStore {
    params: Vec<ParamEntry>,
    buffers: Vec<BufferEntry>,
    param_index: HashMap<String, ParamId>,
    buffer_index: HashMap<String, BufferId>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn add_param(&mut self, name: &str, value: ArrayD<f64>) -> Result<ParamId> {
        if self.param_index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let shape = value.raw_dim();
        let id = self.params.len();
        self.params.push(ParamEntry {
            name: name.to_string(),
            grad: ArrayD::zeros(shape.clone()),
            adam_m: ArrayD::zeros(shape.clone()),
            adam_v: ArrayD::zeros(shape),
            value,
        });
        self.param_index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn add_buffer(&mut self, name: &str, value: Vec<f64>) -> Result<BufferId> {
        if self.buffer_index.contains_key(name) {
            return Err(Error::Config(format!("duplicate buffer name `{name}`")));
        }
        let id = self.buffers.len();
        self.buffers.push(BufferEntry {
            name: name.to_string(),
            value,
        });
        self.buffer_index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.params[id].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.params[id].value
    }

    pub fn grad(&self, id: ParamId) -> &ArrayD<f64> {
        &self.params[id].grad
    }

    pub fn buffer(&self, id: BufferId) -> &[f64] {
        &self.buffers[id].value
    }

    pub fn set_buffer(&mut self, id: BufferId, value: Vec<f64>) {
        debug_assert_eq!(self.buffers[id].value.len(), value.len());
        self.buffers[id].value = value;
    }

    pub fn accumulate_grad(&mut self, id: ParamId, delta: &ArrayD<f64>) {
        self.params[id].grad += delta;
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.iter_mut() {
            p.grad.fill(0.0);
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Total number of trainable scalars.
    pub fn num_weights(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn params(&self) -> &[ParamEntry] {
        &self.params
    }

    pub fn buffers(&self) -> &[BufferEntry] {
        &self.buffers
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.param_index.get(name).copied()
    }

    pub fn buffer_id(&self, name: &str) -> Option<BufferId> {
        self.buffer_index.get(name).copied()
    }

    /// Ids of all parameters whose name starts with `prefix`, in creation
    /// order (the order optimizer updates are applied in).
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.name.starts_with(prefix))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.params[id]
    }
}

/// Adam with bias correction; one instance per network so the step counters
/// stay independent.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64) -> Adam {
        Adam {
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for &id in ids {
            let entry = store.entry_mut(id);
            let g = entry.grad.as_slice().unwrap();
            let m = entry.adam_m.as_slice_mut().unwrap();
            let v = entry.adam_v.as_slice_mut().unwrap();
            let mut updates = vec![0.0; g.len()];
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                updates[i] = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
            }
            let w = entry.value.as_slice_mut().unwrap();
            for i in 0..w.len() {
                w[i] -= updates[i];
            }
        }
    }
}

/// Normal(0, std) initialization.
pub fn init_normal(rng: &mut ChaCha20Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    ArrayD::from_shape_vec(ndarray::IxDyn(shape), data).unwrap()
}

/// Convolution layer with optional spectral weight normalization.
///
/// Weight init is N(0, 0.02); the power-iteration vector `u` persists as a
/// named buffer and advances by one iteration per training-mode forward.
pub struct Conv2dLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub sn_u: Option<BufferId>,
    pub stride: usize,
    pub pad: usize,
}

pub const WEIGHT_INIT_STD: f64 = 0.02;

#[allow(clippy::too_many_arguments)]
impl Conv2dLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha20Rng,
        name: &str,
        cin: usize,
        cout: usize,
        ksize: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        spectral: bool,
    ) -> Result<Conv2dLayer> {
        let weight = store.add_param(
            &format!("{name}.weight"),
            init_normal(rng, &[cout, cin, ksize, ksize], WEIGHT_INIT_STD),
        )?;
        let bias = if bias {
            Some(store.add_param(
                &format!("{name}.bias"),
                Array1::<f64>::zeros(cout).into_dyn(),
            )?)
        } else {
            None
        };
        let sn_u = if spectral {
            let raw: Vec<f64> = (0..cout)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    z
                })
                .collect();
            let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            let u: Vec<f64> = raw.iter().map(|x| x / norm).collect();
            Some(store.add_buffer(&format!("{name}.sn_u"), u)?)
        } else {
            None
        };
        Ok(Conv2dLayer {
            weight,
            bias,
            sn_u,
            stride,
            pad,
        })
    }

    /// Adds this layer's forward pass to the graph. With `frozen` the
    /// weights act as constants (no gradient export, no power iteration).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        x: NodeId,
        frozen: bool,
    ) -> NodeId {
        let w_node = if frozen {
            g.param_frozen(store, self.weight)
        } else {
            g.param(store, self.weight)
        };
        let w_node = match self.sn_u {
            Some(uid) => {
                if g.train_mode && !frozen {
                    let u_new = power_iteration(store.value(self.weight), store.buffer(uid));
                    store.set_buffer(uid, u_new);
                }
                let u = store.buffer(uid).to_vec();
                g.spectral_norm(w_node, &u)
            }
            None => w_node,
        };
        let b_node = self.bias.map(|b| {
            if frozen {
                g.param_frozen(store, b)
            } else {
                g.param(store, b)
            }
        });
        g.conv2d(x, w_node, b_node, self.stride, self.pad)
    }

    /// Sets the weight from a 4D array (used by tests to force specific
    /// modulations).
    pub fn set_weight(&self, store: &mut ParamStore, w: Array4<f64>) {
        *store.value_mut(self.weight) = w.into_dyn();
    }

    pub fn set_bias(&self, store: &mut ParamStore, b: Array1<f64>) {
        if let Some(bid) = self.bias {
            *store.value_mut(bid) = b.into_dyn();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn adam_moves_towards_minimum() {
        // Minimize (w - 3)^2 elementwise.
        let mut store = ParamStore::new();
        let id = store
            .add_param("w", ArrayD::from_elem(ndarray::IxDyn(&[4]), 0.0))
            .unwrap();
        let mut adam = Adam::new(0.85, 0.95);
        for _ in 0..4000 {
            let g = store.value(id).mapv(|w| 2.0 * (w - 3.0));
            store.accumulate_grad(id, &g);
            adam.step(&mut store, &[id], 1e-2);
            store.zero_grads();
        }
        for &w in store.value(id).iter() {
            assert!((w - 3.0).abs() < 1e-3, "w = {w}");
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store
            .add_param("a", ArrayD::zeros(ndarray::IxDyn(&[1])))
            .unwrap();
        assert!(store.add_param("a", ArrayD::zeros(ndarray::IxDyn(&[1]))).is_err());
    }

    #[test]
    fn spectral_layer_caps_gain() {
        // After many power iterations the effective weight has unit spectral
        // norm: applying it to the leading right singular vector yields a
        // unit-norm response.
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let layer = Conv2dLayer::new(&mut store, &mut rng, "c", 4, 3, 1, 1, 0, false, true)
            .unwrap();
        // 1x1 conv = plain matrix; run several training-mode forwards to
        // converge u.
        let x = ndarray::Array4::<f64>::zeros((1, 4, 1, 1));
        for _ in 0..100 {
            let mut g = Graph::new(true);
            let xn = g.constant4(x.clone());
            let _ = layer.forward(&mut g, &mut store, xn, false);
        }
        let mut g = Graph::new(false);
        let xn = g.constant4(x);
        let _ = layer.forward(&mut g, &mut store, xn, false);
        // sigma(W/sigma) == 1 within power-iteration accuracy.
        let w = store.value(layer.weight);
        let u = store.buffer(layer.sn_u.unwrap());
        let sigma_dir = {
            let wm = w.as_slice().unwrap();
            let mut v = vec![0.0; 4];
            for o in 0..3 {
                for j in 0..4 {
                    v[j] += u[o] * wm[o * 4 + j];
                }
            }
            v.iter().map(|x| x * x).sum::<f64>().sqrt()
        };
        // Largest singular value by dense power method on W^T W.
        let wm = w.as_slice().unwrap();
        let mut v = vec![1.0, 0.5, -0.25, 0.1];
        for _ in 0..500 {
            let mut wv = vec![0.0; 3];
            for o in 0..3 {
                wv[o] = (0..4).map(|j| wm[o * 4 + j] * v[j]).sum();
            }
            let mut wtwv = vec![0.0; 4];
            for j in 0..4 {
                wtwv[j] = (0..3).map(|o| wm[o * 4 + j] * wv[o]).sum();
            }
            let n = wtwv.iter().map(|x| x * x).sum::<f64>().sqrt();
            for (vi, wi) in v.iter_mut().zip(&wtwv) {
                *vi = wi / n;
            }
        }
        let mut wv = vec![0.0; 3];
        for o in 0..3 {
            wv[o] = (0..4).map(|j| wm[o * 4 + j] * v[j]).sum();
        }
        let sigma_true = wv.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(
            (sigma_dir - sigma_true).abs() / sigma_true < 1e-6,
            "power iteration off: {sigma_dir} vs {sigma_true}"
        );
    }
}
