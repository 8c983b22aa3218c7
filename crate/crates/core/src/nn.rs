//! Named parameters, forward sessions, and the basic layers built on them.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{NormStats, Tape, Tensor, Var};
use crate::error::{contract_err, shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

/// What a parameter is for; decides weight-decay eligibility.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
    Embedding,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::Bias)
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Non-trainable state such as running normalization statistics.
#[derive(Clone, Debug)]
pub struct Buffer {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    buffers: Vec<Buffer>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter {name}"
        );
        self.params.push(Param { name, kind, value });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> BufferId {
        self.buffers.push(Buffer {
            name: name.into(),
            value,
        });
        BufferId(self.buffers.len() - 1)
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer] {
        &mut self.buffers
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Applies running-statistics updates collected by a training session.
    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate]) {
        for u in updates {
            for (buf, fresh) in [(u.mean, &u.batch_mean), (u.var, &u.batch_var)] {
                let slot = self.buffers[buf.0].value.data_mut();
                for (r, b) in slot.iter_mut().zip(fresh) {
                    *r = (1.0 - u.momentum) * *r + u.momentum * b;
                }
            }
        }
    }
}

/// Xavier-uniform matrix for a `fan_in × fan_out` weight.
pub fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
    Tensor::from_parts(vec![fan_in, fan_out], data)
}

/// `rows × cols` table drawn from N(0, 1) and scaled by `scale`.
pub fn gaussian_table(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let data = (0..rows * cols)
        .map(|_| scale * normal.sample(rng))
        .collect();
    Tensor::from_parts(vec![rows, cols], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Pending running-statistics update from one batch-norm call.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    mean: BufferId,
    var: BufferId,
    momentum: f64,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

/// One forward pass: a fresh tape plus lazily bound parameters.
pub struct Session<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    mode: Mode,
    track_grads: bool,
    dropout_rng: Option<ChaCha8Rng>,
    stat_updates: Vec<StatUpdate>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode, track_grads: bool) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.params.len()],
            mode,
            track_grads,
            dropout_rng: None,
            stat_updates: Vec::new(),
        }
    }

    pub fn eval(store: &'a ParamStore) -> Self {
        Self::new(store, Mode::Eval, false)
    }

    pub fn with_dropout_rng(mut self, rng: ChaCha8Rng) -> Self {
        self.dropout_rng = Some(rng);
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self
            .tape
            .leaf(self.store.params[id.0].value.clone(), self.track_grads);
        self.bound[id.0] = Some(v);
        v
    }

    /// Inverted dropout; identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if self.mode == Mode::Eval || p <= 0.0 {
            return Ok(x);
        }
        let rng = self
            .dropout_rng
            .as_mut()
            .ok_or_else(|| contract_err!("dropout in training mode needs a seeded generator"))?;
        let n = self.tape.value(x).numel();
        let keep = 1.0 / (1.0 - p);
        let factors = (0..n)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        self.tape.mul_const(x, factors)
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.stat_updates)
    }

    /// Gradient for every parameter in store order; unbound ones are zero.
    pub fn param_grads(&self) -> Vec<Vec<f64>> {
        self.store
            .params
            .iter()
            .zip(&self.bound)
            .map(|(p, b)| match b.and_then(|v| self.tape.grad(v)) {
                Some(g) => g.to_vec(),
                None => vec![0.0; p.value.numel()],
            })
            .collect()
    }
}

/// Affine map `x·W + b` applied to each row.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::Weight,
            xavier(rng, fan_in, fan_out),
        );
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                ParamKind::Bias,
                Tensor::zeros(&[fan_out]),
            )
        });
        Self { weight, bias }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let y = s.tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = s.param(b);
                s.tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Statistics batch normalization uses in eval mode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalNorm {
    /// Momentum averages accumulated during training.
    #[default]
    Running,
    /// Statistics of the graph being normalized, as in training.
    Graph,
}

/// Per-feature batch normalization over the valid rows of a node matrix.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub momentum: f64,
    pub eps: f64,
    pub eval_norm: EvalNorm,
}

impl BatchNorm {
    pub const DEFAULT_EPS: f64 = 1e-5;
    pub const DEFAULT_MOMENTUM: f64 = 0.1;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize, eval_norm: EvalNorm) -> Self {
        Self {
            gamma: store.add(
                format!("{name}.gamma"),
                ParamKind::NormScale,
                Tensor::full(&[dim], 1.0),
            ),
            beta: store.add(
                format!("{name}.beta"),
                ParamKind::NormShift,
                Tensor::zeros(&[dim]),
            ),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[dim])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(&[dim], 1.0)),
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
            eval_norm,
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var, rows: &[bool]) -> Result<Var> {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        match (s.mode, self.eval_norm) {
            (Mode::Train, _) => {
                let out = s
                    .tape
                    .batch_norm(x, gamma, beta, rows, NormStats::Batch, self.eps)?;
                s.stat_updates.push(StatUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    momentum: self.momentum,
                    batch_mean: out.mean,
                    batch_var: out.var,
                });
                Ok(out.out)
            }
            (Mode::Eval, EvalNorm::Graph) => Ok(s
                .tape
                .batch_norm(x, gamma, beta, rows, NormStats::Batch, self.eps)?
                .out),
            (Mode::Eval, EvalNorm::Running) => {
                let store = s.store;
                let stats = NormStats::Fixed {
                    mean: store.buffer(self.running_mean).data(),
                    var: store.buffer(self.running_var).data(),
                };
                Ok(s.tape
                    .batch_norm(x, gamma, beta, rows, stats, self.eps)?
                    .out)
            }
        }
    }
}

/// Boolean mask over graph nodes; `true` marks a real node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeMask(Vec<bool>);

impl NodeMask {
    pub fn new(valid: Vec<bool>) -> Result<Self> {
        if !valid.iter().any(|&v| v) {
            return Err(contract_err!("node mask has no valid node"));
        }
        Ok(Self(valid))
    }

    pub fn all(n: usize) -> Self {
        Self(vec![true; n])
    }

    /// First `valid` of `len` nodes are real.
    pub fn prefix(valid: usize, len: usize) -> Result<Self> {
        if valid > len {
            return Err(shape_err!("{valid} valid nodes exceed length {len}"));
        }
        Self::new((0..len).map(|i| i < valid).collect())
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&v| v).count()
    }

    pub fn is_full(&self) -> bool {
        self.0.iter().all(|&v| v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn xavier_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = xavier(&mut rng, 10, 6);
        let bound = (6.0f64 / 16.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        assert_eq!(w.shape(), &[10, 6]);
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 1, EvalNorm::Running);
        let mut s = Session::new(&store, Mode::Train, true);
        let x = s
            .tape
            .constant(Tensor::matrix(2, 1, vec![0.0, 2.0]).unwrap());
        bn.forward(&mut s, x, &[true, true]).unwrap();
        let updates = s.take_stat_updates();
        store.apply_stat_updates(&updates);
        assert!((store.buffer(bn.running_mean).item() - 0.1).abs() < 1e-15);
        assert!((store.buffer(bn.running_var).item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn empty_mask_rejected() {
        assert!(NodeMask::new(vec![false, false]).is_err());
        assert_eq!(NodeMask::prefix(2, 4).unwrap().count(), 2);
    }

    #[test]
    fn dropout_needs_rng_in_training() {
        let store = ParamStore::new();
        let mut s = Session::new(&store, Mode::Train, false);
        let x = s.tape.constant(Tensor::zeros(&[2, 2]));
        assert!(s.dropout(x, 0.5).is_err());
        let mut e = Session::eval(&store);
        let x = e.tape.constant(Tensor::zeros(&[2, 2]));
        assert_eq!(e.dropout(x, 0.5).unwrap(), x);
    }
}

/// Outcome of [`param_grad_check`].
#[derive(Clone, Debug)]
pub struct ParamGradCheck {
    pub report: crate::autodiff::GradReport,
    /// Distance of the base point to the nearest non-smooth point on the tape.
    pub kink_margin: f64,
}

/// Flattens every parameter of `store` and compares the reverse-mode
/// gradient of the scalar built by `f` with central differences.
pub fn param_grad_check<F>(store: &ParamStore, mode: Mode, eps: f64, f: F) -> Result<ParamGradCheck>
where
    F: Fn(&mut Session<'_>) -> Result<Var>,
{
    let mut s = Session::new(store, mode, true);
    let out = f(&mut s)?;
    s.tape.backward(out)?;
    let analytic: Vec<f64> = s.param_grads().concat();
    let kink_margin = s.tape.kink_margin();
    let base: Vec<f64> = store
        .params
        .iter()
        .flat_map(|p| p.value.data().iter().copied())
        .collect();
    let mut probe = store.clone();
    let eval = |flat: &[f64]| -> Result<f64> {
        let mut offset = 0;
        for p in probe.params.iter_mut() {
            let n = p.value.numel();
            p.value
                .data_mut()
                .copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        let mut s = Session::new(&probe, mode, false);
        let out = f(&mut s)?;
        Ok(s.tape.value(out).item())
    };
    let report = crate::autodiff::compare_with_central_differences(&base, &analytic, eps, eval)?;
    Ok(ParamGradCheck {
        report,
        kink_margin,
    })
}
