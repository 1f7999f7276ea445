//! Persistent parameter storage and the Adam optimizer.
//!
//! A [`ParamSet`] owns the trainable buffers and batch-norm running
//! statistics of one model. Each forward pass copies parameter data into
//! graph leaves and returns the `(ParamId, TensorId)` bindings, which
//! [`Adam::step`] uses to pull gradients back out of the graph.

use rand::Rng;

use super::{Graph, Scalar, TensorError, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StatId(pub(crate) usize);

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Kaiming-style fan-in scaling: uniform on `[-sqrt(6/fan_in), +sqrt(6/fan_in)]`.
    KaimingUniform { fan_in: usize },
}

#[derive(Clone)]
struct ParamEntry<S> {
    name: String,
    shape: Vec<usize>,
    data: Vec<S>,
    m: Vec<S>,
    v: Vec<S>,
}

#[derive(Clone)]
struct StatEntry<S> {
    name: String,
    mean: Vec<S>,
    var: Vec<S>,
}

/// Named parameter and running-statistic store for one model.
#[derive(Clone)]
pub struct ParamSet<S> {
    params: Vec<ParamEntry<S>>,
    stats: Vec<StatEntry<S>>,
}

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet {
            params: Vec::new(),
            stats: Vec::new(),
        }
    }

    pub fn param(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut impl Rng,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data: Vec<S> = match init {
            Init::Zeros => vec![S::ZERO; n],
            Init::Ones => vec![S::ONE; n],
            Init::KaimingUniform { fan_in } => {
                let bound = (6.0 / fan_in as f64).sqrt();
                (0..n)
                    .map(|_| S::from_f64(rng.gen_range(-bound..bound)))
                    .collect()
            }
        };
        self.params.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
            m: vec![S::ZERO; n],
            v: vec![S::ZERO; n],
        });
        ParamId(self.params.len() - 1)
    }

    /// Register batch-norm running statistics for `channels` channels,
    /// initialized to mean 0 / var 1.
    pub fn stat(&mut self, name: &str, channels: usize) -> StatId {
        self.stats.push(StatEntry {
            name: name.to_string(),
            mean: vec![S::ZERO; channels],
            var: vec![S::ONE; channels],
        });
        StatId(self.stats.len() - 1)
    }

    pub fn data(&self, id: ParamId) -> &[S] {
        &self.params[id.0].data
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [S] {
        &mut self.params[id.0].data
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.params[id.0].shape
    }

    pub fn running(&self, id: StatId) -> (&[S], &[S]) {
        (&self.stats[id.0].mean, &self.stats[id.0].var)
    }

    /// Exponential-moving-average update of running statistics:
    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn update_stat(&mut self, id: StatId, batch_mean: &[S], batch_var: &[S], momentum: f64) {
        let e = &mut self.stats[id.0];
        let keep = S::from_f64(1.0 - momentum);
        let mom = S::from_f64(momentum);
        for (r, &b) in e.mean.iter_mut().zip(batch_mean) {
            *r = keep * *r + mom * b;
        }
        for (r, &b) in e.var.iter_mut().zip(batch_var) {
            *r = keep * *r + mom * b;
        }
    }

    /// Bind a parameter into a graph as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph<S>, id: ParamId) -> TensorId {
        let e = &self.params[id.0];
        g.leaf(&e.shape, e.data.clone(), true)
            .expect("stored parameter shape is consistent")
    }

    /// Bind a parameter as a constant (no gradient computed through it).
    pub fn bind_frozen(&self, g: &mut Graph<S>, id: ParamId) -> TensorId {
        let e = &self.params[id.0];
        g.leaf(&e.shape, e.data.clone(), false)
            .expect("stored parameter shape is consistent")
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn iter_named(&self) -> impl Iterator<Item = (&str, &[usize], &[S])> {
        self.params
            .iter()
            .map(|p| (p.name.as_str(), p.shape.as_slice(), p.data.as_slice()))
    }

    pub fn iter_stats_named(&self) -> impl Iterator<Item = (&str, &[S], &[S])> {
        self.stats
            .iter()
            .map(|s| (s.name.as_str(), s.mean.as_slice(), s.var.as_slice()))
    }

    /// FNV-1a hash over the exact bit patterns of all parameters and
    /// running statistics. Used to verify frozen-model contracts.
    pub fn checksum(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        let mut eat = |v: f64| {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for p in &self.params {
            for &x in &p.data {
                eat(x.to_f64());
            }
        }
        for s in &self.stats {
            for &x in &s.mean {
                eat(x.to_f64());
            }
            for &x in &s.var {
                eat(x.to_f64());
            }
        }
        h
    }

    /// Overwrite a named parameter's data (shape must match).
    pub fn set_named(&mut self, name: &str, data: &[S]) -> Result<(), TensorError> {
        let p = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| TensorError::InvalidArgument {
                op: "set_named",
                msg: format!("no parameter named {name}"),
            })?;
        if p.data.len() != data.len() {
            return Err(TensorError::DataLength {
                shape: p.shape.clone(),
                expected: p.data.len(),
                got: data.len(),
            });
        }
        p.data.copy_from_slice(data);
        Ok(())
    }

    pub fn set_stat_named(&mut self, name: &str, mean: &[S], var: &[S]) -> Result<(), TensorError> {
        let s = self
            .stats
            .iter_mut()
            .find(|s| s.name == name)
            .ok_or_else(|| TensorError::InvalidArgument {
                op: "set_stat_named",
                msg: format!("no running statistic named {name}"),
            })?;
        if s.mean.len() != mean.len() || s.var.len() != var.len() {
            return Err(TensorError::InvalidArgument {
                op: "set_stat_named",
                msg: format!("channel count mismatch for {name}"),
            });
        }
        s.mean.copy_from_slice(mean);
        s.var.copy_from_slice(var);
        Ok(())
    }
}

/// Adam with bias correction. One `step` call consumes the gradients of one
/// backward pass; the update is deterministic given identical inputs and
/// state.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
        }
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Apply one update to every bound parameter. Parameters whose graph
    /// leaf has no gradient (loss did not depend on them) are left alone.
    pub fn step<S: Scalar>(
        &mut self,
        params: &mut ParamSet<S>,
        g: &Graph<S>,
        binds: &[(ParamId, TensorId)],
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for &(pid, tid) in binds {
            let Some(grad) = g.grad(tid) else { continue };
            let e = &mut params.params[pid.0];
            debug_assert_eq!(grad.len(), e.data.len());
            for i in 0..e.data.len() {
                let gi = grad[i].to_f64();
                let m = self.beta1 * e.m[i].to_f64() + (1.0 - self.beta1) * gi;
                let v = self.beta2 * e.v[i].to_f64() + (1.0 - self.beta2) * gi * gi;
                e.m[i] = S::from_f64(m);
                e.v[i] = S::from_f64(v);
                let mhat = m / bc1;
                let vhat = v / bc2;
                let upd = self.lr * mhat / (vhat.sqrt() + self.eps);
                e.data[i] = S::from_f64(e.data[i].to_f64() - upd);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_param(value: f64) -> (ParamSet<f64>, ParamId) {
        let mut ps: ParamSet<f64> = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pid = ps.param("p", &[1], Init::Zeros, &mut rng);
        ps.data_mut(pid)[0] = value;
        (ps, pid)
    }

    #[test]
    fn adam_first_step_magnitude_equals_lr() {
        // p = 1 with gradient 1: the bias-corrected first step moves by ~lr.
        let (mut ps, pid) = single_param(1.0);
        let mut g: Graph<f64> = Graph::new();
        let t = ps.bind(&mut g, pid);
        let loss = g.scale(t, 1.0); // d loss / d p = 1
        g.backward(loss).unwrap();
        let mut adam = Adam::new(0.001);
        adam.step(&mut ps, &g, &[(pid, t)]);
        let p = ps.data(pid)[0];
        assert!((1.0 - p - 0.001).abs() < 1e-9, "step was {}", 1.0 - p);
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let (mut ps, pid) = single_param(0.5);
        let mut g: Graph<f64> = Graph::new();
        let t = ps.bind(&mut g, pid);
        let loss = g.scale(t, 0.0);
        g.backward(loss).unwrap();
        let mut adam = Adam::new(0.001);
        adam.step(&mut ps, &g, &[(pid, t)]);
        assert_eq!(ps.data(pid)[0], 0.5);
    }

    #[test]
    fn adam_converges_on_quadratic_bowl() {
        // f(p) = p^2 from p0 = 1, 200 steps at lr 0.01.
        let (mut ps, pid) = single_param(1.0);
        let mut adam = Adam::new(0.01);
        for _ in 0..200 {
            let mut g: Graph<f64> = Graph::new();
            let t = ps.bind(&mut g, pid);
            let loss = g.mul(t, t).unwrap();
            g.backward(loss).unwrap();
            adam.step(&mut ps, &g, &[(pid, t)]);
        }
        assert!(ps.data(pid)[0].abs() < 0.05, "p = {}", ps.data(pid)[0]);
    }

    #[test]
    fn checksum_changes_with_data() {
        let (ps, _) = single_param(1.0);
        let (ps2, _) = single_param(2.0);
        assert_ne!(ps.checksum(), ps2.checksum());
        assert_eq!(ps.checksum(), ps.clone().checksum());
    }
}
