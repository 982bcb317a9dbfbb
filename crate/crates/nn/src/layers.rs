//! Parameter store and the layer set used by the models in this workspace.

use crate::conv::{self, ConvGeom};
use crate::optim::GradMap;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::NnError;
use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::sync::Arc;

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Centered Gaussian with the given standard deviation.
    Normal { std: f64 },
    /// He/Kaiming normal: std = sqrt(2 / fan_in).
    HeNormal { fan_in: usize },
    Zeros,
    Ones,
}

pub fn init_array<S: Scalar>(shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> ArrayD<S> {
    match init {
        Init::Zeros => ArrayD::zeros(IxDyn(shape)),
        Init::Ones => ArrayD::from_elem(IxDyn(shape), S::one()),
        Init::Normal { std } => {
            let dist = Normal::new(0.0f64, std).expect("valid std");
            let n: usize = shape.iter().product();
            let data: Vec<S> = (0..n).map(|_| S::from_f64(dist.sample(rng))).collect();
            ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
        }
        Init::HeNormal { fan_in } => {
            let std = (2.0 / fan_in as f64).sqrt();
            init_array(shape, Init::Normal { std }, rng)
        }
    }
}

struct Entry<S: Scalar> {
    value: ArrayD<S>,
    trainable: bool,
}

/// Named parameter arrays for one model. Iteration order is registration
/// order, which keeps optimizer updates and checkpoints deterministic.
pub struct VarStore<S: Scalar> {
    entries: IndexMap<String, Entry<S>>,
}

impl<S: Scalar> Default for VarStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> VarStore<S> {
    pub fn new() -> Self {
        VarStore {
            entries: IndexMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, value: ArrayD<S>, trainable: bool) {
        let prev = self.entries.insert(
            name.to_string(),
            Entry {
                value,
                trainable,
            },
        );
        assert!(prev.is_none(), "duplicate parameter name: {name}");
    }

    pub fn get(&self, name: &str) -> &ArrayD<S> {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter: {name}"))
            .value
    }

    pub fn set(&mut self, name: &str, value: ArrayD<S>) {
        let entry = self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter: {name}"));
        assert_eq!(entry.value.shape(), value.shape(), "set {name}: shape mismatch");
        entry.value = value;
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Number of trainable scalars.
    pub fn trainable_param_count(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn iter_arrays(&self) -> impl Iterator<Item = (&str, &ArrayD<S>)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.value))
    }

    /// Bind every entry onto `tape`, honoring trainability flags.
    pub fn bind<'t>(&self, tape: &'t Tape<S>) -> BoundVars<'t, S> {
        self.bind_with(tape, true)
    }

    /// Bind every entry as a constant (used for the non-updated model in an
    /// adversarial step).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape<S>) -> BoundVars<'t, S> {
        self.bind_with(tape, false)
    }

    fn bind_with<'t>(&self, tape: &'t Tape<S>, trainable: bool) -> BoundVars<'t, S> {
        let map = self
            .entries
            .iter()
            .map(|(name, e)| {
                let var = if trainable && e.trainable {
                    tape.trainable(e.value.clone())
                } else {
                    tape.constant(e.value.clone())
                };
                (name.clone(), var)
            })
            .collect();
        BoundVars { map }
    }

    /// Gradients of `loss` w.r.t. every trainable entry bound in `vars`.
    /// Entries the loss does not reach are omitted.
    pub fn grads<'t>(
        &self,
        tape: &'t Tape<S>,
        loss: Var<'t, S>,
        vars: &BoundVars<'t, S>,
    ) -> GradMap<S> {
        let names: Vec<&str> = self
            .entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(k, _)| k.as_str())
            .collect();
        let wrt: Vec<Var<'t, S>> = names.iter().map(|n| vars.get(n)).collect();
        let grads = tape.grad(loss, &wrt);
        names
            .iter()
            .zip(grads)
            .filter_map(|(name, g)| g.map(|g| (name.to_string(), g.value())))
            .collect()
    }
}

/// Tape bindings of a store's entries for one forward/backward pass.
pub struct BoundVars<'t, S: Scalar> {
    map: IndexMap<String, Var<'t, S>>,
}

impl<'t, S: Scalar> BoundVars<'t, S> {
    pub fn get(&self, name: &str) -> Var<'t, S> {
        *self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter: {name}"))
    }
}

/// Per-pass forward context: training mode plus batch-norm statistics to fold
/// into the running estimates after the optimizer step.
pub struct Forward<S: Scalar> {
    pub train: bool,
    pub bn_updates: Vec<BnUpdate<S>>,
}

impl<S: Scalar> Forward<S> {
    pub fn train() -> Self {
        Forward {
            train: true,
            bn_updates: Vec::new(),
        }
    }
    pub fn eval() -> Self {
        Forward {
            train: false,
            bn_updates: Vec::new(),
        }
    }
}

pub struct BnUpdate<S: Scalar> {
    pub mean_key: String,
    pub var_key: String,
    pub mean: ArrayD<S>,
    pub var: ArrayD<S>,
    pub momentum: f64,
}

/// Fold captured batch statistics into the store's running estimates.
pub fn apply_bn_updates<S: Scalar>(store: &mut VarStore<S>, updates: Vec<BnUpdate<S>>) {
    for u in updates {
        let blend = |old: &ArrayD<S>, new: &ArrayD<S>| {
            let keep = S::from_f64(1.0 - u.momentum);
            let take = S::from_f64(u.momentum);
            old.mapv(|x| x * keep) + new.mapv(|x| x * take)
        };
        let m = blend(store.get(&u.mean_key), &u.mean);
        store.set(&u.mean_key, m);
        let v = blend(store.get(&u.var_key), &u.var);
        store.set(&u.var_key, v);
    }
}

/// 2-D convolution layer (NCHW, square kernel).
pub struct Conv2d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
}

impl Conv2d {
    pub fn new(name: &str, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Conv2d {
            name: name.to_string(),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            bias: true,
        }
    }

    pub fn weight_key(&self) -> String {
        format!("{}.weight", self.name)
    }
    pub fn bias_key(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<S: Scalar>(&self, store: &mut VarStore<S>, init: Init, rng: &mut ChaCha8Rng) {
        let shape = [self.out_ch, self.in_ch, self.kernel, self.kernel];
        store.register(&self.weight_key(), init_array(&shape, init, rng), true);
        if self.bias {
            store.register(&self.bias_key(), ArrayD::zeros(IxDyn(&[self.out_ch])), true);
        }
    }

    pub fn param_count(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel * self.kernel + if self.bias { self.out_ch } else { 0 }
    }

    pub fn forward<'t, S: Scalar>(&self, vars: &BoundVars<'t, S>, x: Var<'t, S>) -> Var<'t, S> {
        let w = vars.get(&self.weight_key());
        let b = self.bias.then(|| vars.get(&self.bias_key()));
        conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Functional convolution: `x` NCHW, `w` [out_ch, in_ch, kh, kw].
pub fn conv2d<'t, S: Scalar>(
    x: Var<'t, S>,
    w: Var<'t, S>,
    b: Option<Var<'t, S>>,
    stride: usize,
    pad: usize,
) -> Var<'t, S> {
    let xs = x.shape();
    let ws = w.shape();
    assert_eq!(xs.len(), 4, "conv2d: input must be NCHW");
    assert_eq!(ws.len(), 4, "conv2d: weight must be [oc, ic, kh, kw]");
    assert_eq!(xs[1], ws[1], "conv2d: channel mismatch");
    let geom = ConvGeom {
        batch: xs[0],
        in_ch: xs[1],
        in_h: xs[2],
        in_w: xs[3],
        kh: ws[2],
        kw: ws[3],
        stride,
        pad,
    };
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let cols = x.im2col(geom);
    let wmat = w.reshape(&[ws[0], ws[1] * ws[2] * ws[3]]);
    let y = cols.matmul(wmat.t());
    let y = y.reshape(&[xs[0], oh, ow, ws[0]]).permute(&[0, 3, 1, 2]);
    match b {
        Some(b) => {
            let shape = y.shape();
            y.add(b.reshape(&[1, ws[0], 1, 1]).broadcast_to(&shape))
        }
        None => y,
    }
}

/// Fully connected layer; weight is [out, in].
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(name: &str, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            name: name.to_string(),
            in_dim,
            out_dim,
            bias: true,
        }
    }

    pub fn weight_key(&self) -> String {
        format!("{}.weight", self.name)
    }
    pub fn bias_key(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<S: Scalar>(&self, store: &mut VarStore<S>, init: Init, rng: &mut ChaCha8Rng) {
        store.register(
            &self.weight_key(),
            init_array(&[self.out_dim, self.in_dim], init, rng),
            true,
        );
        if self.bias {
            store.register(&self.bias_key(), ArrayD::zeros(IxDyn(&[self.out_dim])), true);
        }
    }

    pub fn param_count(&self) -> usize {
        self.out_dim * self.in_dim + if self.bias { self.out_dim } else { 0 }
    }

    /// `x` is [batch, in_dim].
    pub fn forward<'t, S: Scalar>(&self, vars: &BoundVars<'t, S>, x: Var<'t, S>) -> Var<'t, S> {
        let w = vars.get(&self.weight_key());
        let y = x.matmul(w.t());
        if self.bias {
            let b = vars.get(&self.bias_key());
            let shape = y.shape();
            y.add(b.reshape(&[1, self.out_dim]).broadcast_to(&shape))
        } else {
            y
        }
    }
}

/// Learned lookup table mapping class indices to vectors.
pub struct Embedding {
    pub name: String,
    pub n_embeddings: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(name: &str, n_embeddings: usize, dim: usize) -> Self {
        Embedding {
            name: name.to_string(),
            n_embeddings,
            dim,
        }
    }

    pub fn table_key(&self) -> String {
        format!("{}.table", self.name)
    }

    pub fn init<S: Scalar>(&self, store: &mut VarStore<S>, init: Init, rng: &mut ChaCha8Rng) {
        store.register(
            &self.table_key(),
            init_array(&[self.n_embeddings, self.dim], init, rng),
            true,
        );
    }

    pub fn param_count(&self) -> usize {
        self.n_embeddings * self.dim
    }

    pub fn forward<'t, S: Scalar>(&self, vars: &BoundVars<'t, S>, rows: &[usize]) -> Var<'t, S> {
        let table = vars.get(&self.table_key());
        let map = conv::embedding_gather_map(rows, self.n_embeddings, self.dim);
        table.gather(Arc::new(map))
    }
}

/// Batch normalization over NCHW channels.
pub struct BatchNorm2d {
    pub name: String,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm2d {
            name: name.to_string(),
            channels,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    fn key(&self, part: &str) -> String {
        format!("{}.{}", self.name, part)
    }

    pub fn init<S: Scalar>(&self, store: &mut VarStore<S>) {
        let c = self.channels;
        store.register(&self.key("weight"), ArrayD::from_elem(IxDyn(&[c]), S::one()), true);
        store.register(&self.key("bias"), ArrayD::zeros(IxDyn(&[c])), true);
        store.register(&self.key("running_mean"), ArrayD::zeros(IxDyn(&[c])), false);
        store.register(
            &self.key("running_var"),
            ArrayD::from_elem(IxDyn(&[c]), S::one()),
            false,
        );
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }

    pub fn forward<'t, S: Scalar>(
        &self,
        ctx: &mut Forward<S>,
        vars: &BoundVars<'t, S>,
        x: Var<'t, S>,
    ) -> Var<'t, S> {
        let xs = x.shape();
        assert_eq!(xs.len(), 4, "batchnorm: expected NCHW");
        assert_eq!(xs[1], self.channels, "batchnorm: channel mismatch");
        let c_shape = [1, self.channels, 1, 1];
        let n = (xs[0] * xs[2] * xs[3]) as f64;

        let (mean, var) = if ctx.train {
            let mean = x
                .sum_to_shape(&c_shape)
                .affine(S::from_f64(1.0 / n), S::zero());
            let centered = x.sub(mean.broadcast_to(&xs));
            let var = centered
                .square()
                .sum_to_shape(&c_shape)
                .affine(S::from_f64(1.0 / n), S::zero());
            // Unbiased estimate goes into the running average, PyTorch-style.
            let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            ctx.bn_updates.push(BnUpdate {
                mean_key: self.key("running_mean"),
                var_key: self.key("running_var"),
                mean: crate::tape::reshape_std(mean.value(), &[self.channels]),
                var: crate::tape::reshape_std(var.value(), &[self.channels])
                    .mapv(|v| v * S::from_f64(unbiased)),
                momentum: self.momentum,
            });
            (mean, var)
        } else {
            let rm = vars.get(&self.key("running_mean")).reshape(&c_shape);
            let rv = vars.get(&self.key("running_var")).reshape(&c_shape);
            (rm, rv)
        };

        let inv_std = var.affine(S::one(), S::from_f64(self.eps)).powf(S::from_f64(-0.5));
        let normed = x.sub(mean.broadcast_to(&xs)).mul(inv_std.broadcast_to(&xs));
        let gamma = vars.get(&self.key("weight")).reshape(&c_shape);
        let beta = vars.get(&self.key("bias")).reshape(&c_shape);
        normed
            .mul(gamma.broadcast_to(&xs))
            .add(beta.broadcast_to(&xs))
    }
}

/// Max pooling (square window) over NCHW input.
pub fn max_pool2d<S: Scalar>(x: Var<'_, S>, k: usize, stride: usize, pad: usize) -> Var<'_, S> {
    let map = x.with_value(|v| conv::maxpool_gather_map(v, k, stride, pad));
    x.gather(Arc::new(map))
}

/// Global average pooling: NCHW -> [batch, channels].
pub fn global_avg_pool<S: Scalar>(x: Var<'_, S>) -> Var<'_, S> {
    let xs = x.shape();
    assert_eq!(xs.len(), 4, "gap: expected NCHW");
    let n = (xs[2] * xs[3]) as f64;
    x.sum_to_shape(&[xs[0], xs[1], 1, 1])
        .affine(S::from_f64(1.0 / n), S::zero())
        .reshape(&[xs[0], xs[1]])
}

/// One-hot encoding as a plain array.
pub fn one_hot<S: Scalar>(labels: &[usize], n_classes: usize) -> ArrayD<S> {
    let mut out = ArrayD::zeros(IxDyn(&[labels.len(), n_classes]));
    for (i, &l) in labels.iter().enumerate() {
        assert!(l < n_classes, "label {l} out of range {n_classes}");
        out[[i, l]] = S::one();
    }
    out
}

/// Mean categorical cross-entropy from logits ([batch, classes]).
pub fn softmax_cross_entropy<'t, S: Scalar>(
    logits: Var<'t, S>,
    labels: &[usize],
    n_classes: usize,
) -> Var<'t, S> {
    let shape = logits.shape();
    assert_eq!(shape.len(), 2, "cross entropy: logits must be [batch, classes]");
    assert_eq!(shape[0], labels.len(), "cross entropy: batch mismatch");
    assert_eq!(shape[1], n_classes, "cross entropy: class-count mismatch");
    let tape = logits.tape;
    // Row max, detached: shifting by a constant keeps log-sum-exp stable
    // without changing the gradient.
    let row_max = logits.with_value(|v| {
        let mut m = ArrayD::zeros(IxDyn(&[shape[0], 1]));
        for (i, row) in v.view().into_dimensionality::<Ix2>().unwrap().rows().into_iter().enumerate() {
            m[[i, 0]] = row.iter().cloned().fold(S::neg_infinity(), S::max);
        }
        m
    });
    let row_max = tape.constant(row_max);
    let shifted = logits.sub(row_max.broadcast_to(&shape));
    let lse = shifted.exp().sum_to_shape(&[shape[0], 1]).ln();
    let log_probs = shifted.sub(lse.broadcast_to(&shape));
    let picked = log_probs.mul(tape.constant(one_hot(labels, n_classes)));
    picked
        .sum_all()
        .affine(S::from_f64(-1.0 / labels.len() as f64), S::zero())
}
