//! Parameter store, initialization schemes and the SGD optimizer.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{GradientMap, Tape};
use crate::tensor::Tensor;

/// Initialization scheme for a parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`.
    KaimingUniform,
    Zeros,
    Constant(f64),
}

/// Deterministic tensor initialization. The same `(dims, scheme, seed)`
/// always yields the same bits.
pub fn init_tensor<T: Scalar>(dims: &[usize], scheme: Init, seed: u64) -> Tensor<T> {
    let numel: usize = dims.iter().product();
    let data: Vec<T> = match scheme {
        Init::Zeros => vec![T::zero(); numel],
        Init::Constant(c) => vec![T::from_f64_lossy(c); numel],
        Init::KaimingUniform => {
            let bound = (6.0 / fan_in(dims) as f64).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..numel)
                .map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
                .collect()
        }
    };
    Tensor::from_vec(dims.to_vec(), data).expect("init dims are consistent")
}

/// Fan-in by convention: conv `[out,in,kh,kw]` -> `in*kh*kw`, fc `[out,in]`
/// -> `in`, vectors -> their length.
pub fn fan_in(dims: &[usize]) -> usize {
    match dims.len() {
        0 => 1,
        1 => dims[0],
        _ => dims[1..].iter().product(),
    }
}

/// Named parameter tensors with deterministic registration.
pub struct ParamStore<T> {
    entries: BTreeMap<String, Tensor<T>>,
    seed: u64,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        Self { entries: BTreeMap::new(), seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Register a new parameter; the per-parameter seed mixes the store seed
    /// with a stable hash of the name, so counts and values depend only on
    /// the architecture config.
    pub fn register(&mut self, name: &str, dims: &[usize], scheme: Init) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Param(format!("duplicate parameter '{name}'")));
        }
        let t = init_tensor(dims, scheme, self.seed ^ fnv1a64(name.as_bytes()));
        self.entries.insert(name.to_string(), t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Param(format!("unknown parameter '{name}'")))
    }

    /// Replace the value of an existing parameter (dims must match).
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Param(format!("unknown parameter '{name}'")))?;
        if slot.dims() != value.dims() {
            return Err(Error::Shape(format!(
                "parameter '{name}' has dims {:?}, got {:?}",
                slot.dims(),
                value.dims()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Exact number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }

    /// Scalar count over parameters whose name starts with `prefix`.
    pub fn param_count_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.numel())
            .sum()
    }

    /// Register every parameter as a variable on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound<T> {
        let mut map = BTreeMap::new();
        for (name, t) in &self.entries {
            map.insert(name.clone(), tape.var(t));
        }
        Bound { map }
    }

    /// Read-only snapshot: parameters act as constants, so forward passes
    /// record nothing and no gradients exist.
    pub fn snapshot(&self) -> Bound<T> {
        Bound { map: self.entries.clone() }
    }
}

/// Parameters bound to one tape for a forward/backward pass.
pub struct Bound<T> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Bound<T> {
    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Param(format!("unbound parameter '{name}'")))
    }

    /// Extract per-name gradient buffers from a backward pass.
    pub fn named_grads(&self, grads: &GradientMap<T>) -> Result<BTreeMap<String, Vec<T>>> {
        let mut out = BTreeMap::new();
        for (name, t) in &self.map {
            let g = grads
                .get(t)
                .ok_or_else(|| Error::Param(format!("missing gradient for '{name}'")))?;
            out.insert(name.clone(), g.data().to_vec());
        }
        Ok(out)
    }
}

/// Learning-rate schedule and update hyperparameters.
///
/// `schedule` is a list of `(iteration_bound, lr)` with strictly increasing
/// bounds: the first entry whose bound exceeds the iteration supplies the
/// rate (piecewise constant, right-continuous at bounds). Iterations past
/// the last bound keep the last rate.
#[derive(Clone, Debug)]
pub struct SgdConfig<T> {
    pub schedule: Vec<(u64, T)>,
    pub momentum: T,
    pub weight_decay: T,
    pub batch_size: usize,
}

impl<T: Scalar> SgdConfig<T> {
    /// Three-phase decay mirroring a 60/30/10 split of the iteration budget.
    pub fn desk_default(iterations: u64) -> Self {
        Self {
            schedule: default_schedule(iterations),
            momentum: T::from_f64_lossy(0.9),
            weight_decay: T::from_f64_lossy(5e-4),
            batch_size: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schedule.is_empty() {
            return Err(Error::Config("empty lr schedule".into()));
        }
        let mut prev = None;
        for &(bound, lr) in &self.schedule {
            if lr <= T::zero() || !lr.is_finite() {
                return Err(Error::Config(format!("lr must be positive, got {lr}")));
            }
            if let Some(p) = prev {
                if bound <= p {
                    return Err(Error::Config("schedule bounds must be strictly increasing".into()));
                }
            }
            prev = Some(bound);
        }
        Ok(())
    }

    pub fn lr_at(&self, iter: u64) -> T {
        for &(bound, lr) in &self.schedule {
            if iter < bound {
                return lr;
            }
        }
        self.schedule.last().expect("validated non-empty").1
    }
}

/// The 60%/30%/10% bounds at rates 1e-2/1e-3/1e-4.
pub fn default_schedule<T: Scalar>(iterations: u64) -> Vec<(u64, T)> {
    let p60 = (iterations * 6 / 10).max(1);
    let p90 = (iterations * 9 / 10).max(p60 + 1);
    let end = iterations.max(p90 + 1);
    vec![
        (p60, T::from_f64_lossy(1e-2)),
        (p90, T::from_f64_lossy(1e-3)),
        (end, T::from_f64_lossy(1e-4)),
    ]
}

/// SGD with momentum and decoupled-into-gradient weight decay:
/// `v <- momentum*v + g + wd*p; p <- p - lr*v`.
pub struct Sgd<T> {
    cfg: SgdConfig<T>,
    velocity: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(cfg: SgdConfig<T>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, velocity: BTreeMap::new() })
    }

    pub fn config(&self) -> &SgdConfig<T> {
        &self.cfg
    }

    /// One update over every parameter in the store. Errors if a gradient
    /// is missing for any parameter.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &BTreeMap<String, Vec<T>>,
        iter: u64,
    ) -> Result<()> {
        let lr = self.cfg.lr_at(iter);
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for name in names {
            let g = grads
                .get(&name)
                .ok_or_else(|| Error::Param(format!("no gradient for parameter '{name}'")))?;
            let p = store.get(&name)?;
            if g.len() != p.numel() {
                return Err(Error::Shape(format!(
                    "gradient for '{name}' has {} elements, parameter has {}",
                    g.len(),
                    p.numel()
                )));
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![T::zero(); g.len()]);
            let mut data = p.data().to_vec();
            for ((pv, vv), gv) in data.iter_mut().zip(v.iter_mut()).zip(g) {
                *vv = self.cfg.momentum * *vv + *gv + self.cfg.weight_decay * *pv;
                *pv = *pv - lr * *vv;
            }
            store.set(&name, Tensor::from_vec(p.dims().to_vec(), data)?)?;
        }
        Ok(())
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
