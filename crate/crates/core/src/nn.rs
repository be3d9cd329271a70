//! Neural layers over the tape: dense, two-layer LSTM, multi-head graph
//! attention, MSE, and Adam. Parameters live in a [`ParamSet`] so the
//! optimizer, checkpoints, and gradient extraction all share one
//! canonical ordering.

use rand::Rng;

use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Handle into a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named, ordered parameter storage.
#[derive(Clone, Debug)]
pub struct ParamSet<F: Scalar> {
    entries: Vec<(String, Tensor<F>)>,
}

impl<F: Scalar> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: &str, t: Tensor<F>) -> ParamId {
        assert!(
            self.entries.iter().all(|(n, _)| n != name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name.to_string(), t));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    /// (name, shape) listing in storage order.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.entries
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect()
    }

    /// Copy all values from `other`; shapes must match entry-wise.
    pub fn copy_values_from(&mut self, other: &ParamSet<F>) -> Result<(), TensorError> {
        if self.len() != other.len() {
            return Err(TensorError::Contract("parameter sets differ in length"));
        }
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            if dst.1.shape() != src.1.shape() {
                return Err(TensorError::Shape {
                    expected: format!("{:?}", dst.1.shape()),
                    got: format!("{:?}", src.1.shape()),
                });
            }
            dst.1.data_mut().copy_from_slice(src.1.data());
        }
        Ok(())
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }
}

/// Per-tape cache that binds each parameter to a leaf at most once, so
/// repeated uses (the LSTM shared across sequences) accumulate into one
/// gradient slot.
pub struct TapeBinding {
    vars: Vec<Option<Var>>,
}

impl TapeBinding {
    pub fn for_params<F: Scalar>(params: &ParamSet<F>) -> Self {
        Self { vars: vec![None; params.len()] }
    }

    pub fn bind<F: Scalar>(&mut self, tape: &mut Tape<F>, params: &ParamSet<F>, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let v = tape.leaf(params.get(id));
        self.vars[id.0] = Some(v);
        v
    }

    /// Gradients aligned with the parameter set; `None` for parameters
    /// the recorded computation never touched.
    pub fn grads<F: Scalar>(
        &self,
        tape: &Tape<F>,
        params: &ParamSet<F>,
    ) -> Result<Vec<Option<Vec<F>>>, TensorError> {
        let mut out = Vec::with_capacity(params.len());
        for slot in &self.vars {
            match slot {
                Some(v) => out.push(Some(tape.grad(*v)?.to_vec())),
                None => out.push(None),
            }
        }
        Ok(out)
    }
}

/// Forward-pass mode. Training enables LSTM inter-layer dropout.
pub enum RunMode<'a> {
    Eval,
    Train { rng: &'a mut dyn rand::RngCore },
}

fn uniform_init<F: Scalar>(rng: &mut impl Rng, fan_in: usize, len: usize) -> Vec<F> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..len).map(|_| F::of(rng.random_range(-bound..=bound))).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    None,
}

/// Affine map `x W + b` with optional ReLU.
#[derive(Clone, Debug)]
pub struct DenseParams {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl DenseParams {
    pub fn init<F: Scalar>(
        params: &mut ParamSet<F>,
        prefix: &str,
        input: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = Tensor::matrix(input, output, uniform_init(rng, input, input * output)).unwrap();
        let b = Tensor::vector(vec![F::zero(); output]);
        Self {
            w: params.add(&format!("{prefix}.w"), w),
            b: params.add(&format!("{prefix}.b"), b),
            input,
            output,
        }
    }

    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bind: &mut TapeBinding,
        params: &ParamSet<F>,
        x: Var,
        activation: Activation,
    ) -> Result<Var, TensorError> {
        let w = bind.bind(tape, params, self.w);
        let b = bind.bind(tape, params, self.b);
        let xw = tape.vecmat(x, w)?;
        let affine = tape.add(xw, b)?;
        Ok(match activation {
            Activation::Relu => tape.relu(affine),
            Activation::None => affine,
        })
    }
}

/// One LSTM layer: gate order is input, forget, cell, output.
#[derive(Clone, Debug)]
pub struct LstmLayerIds {
    pub wx: [ParamId; 4],
    pub wh: [ParamId; 4],
    pub b: [ParamId; 4],
}

/// Stacked LSTM with inter-layer dropout on the hidden states feeding
/// the next layer.
#[derive(Clone, Debug)]
pub struct LstmParams {
    pub layers: Vec<LstmLayerIds>,
    pub input: usize,
    pub hidden: usize,
    pub dropout: f64,
}

const GATE_NAMES: [&str; 4] = ["i", "f", "g", "o"];

impl LstmParams {
    pub fn init<F: Scalar>(
        params: &mut ParamSet<F>,
        prefix: &str,
        input: usize,
        hidden: usize,
        num_layers: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let mut layers = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let d = if l == 0 { input } else { hidden };
            let mk = |params: &mut ParamSet<F>, rng: &mut _, kind: &str, g: &str, fan: usize, rows: usize| {
                let t = Tensor::matrix(rows, hidden, uniform_init(rng, fan, rows * hidden)).unwrap();
                params.add(&format!("{prefix}.l{l}.{kind}{g}"), t)
            };
            let wx = [
                mk(params, rng, "wx_", GATE_NAMES[0], d, d),
                mk(params, rng, "wx_", GATE_NAMES[1], d, d),
                mk(params, rng, "wx_", GATE_NAMES[2], d, d),
                mk(params, rng, "wx_", GATE_NAMES[3], d, d),
            ];
            let wh = [
                mk(params, rng, "wh_", GATE_NAMES[0], hidden, hidden),
                mk(params, rng, "wh_", GATE_NAMES[1], hidden, hidden),
                mk(params, rng, "wh_", GATE_NAMES[2], hidden, hidden),
                mk(params, rng, "wh_", GATE_NAMES[3], hidden, hidden),
            ];
            let b = [0, 1, 2, 3].map(|g| {
                params.add(
                    &format!("{prefix}.l{l}.b_{}", GATE_NAMES[g]),
                    Tensor::vector(vec![F::zero(); hidden]),
                )
            });
            layers.push(LstmLayerIds { wx, wh, b });
        }
        Self { layers, input, hidden, dropout }
    }

    /// Run the full recursion and return the last layer's final hidden state.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bind: &mut TapeBinding,
        params: &ParamSet<F>,
        sequence: &[Var],
        mode: &mut RunMode<'_>,
    ) -> Result<Var, TensorError> {
        if sequence.is_empty() {
            return Err(TensorError::Contract("lstm_forward requires a nonempty sequence"));
        }
        let zero = Tensor::vector(vec![F::zero(); self.hidden]);
        let mut hidden: Vec<Var> = (0..self.layers.len()).map(|_| tape.leaf(&zero)).collect();
        let mut cell: Vec<Var> = (0..self.layers.len()).map(|_| tape.leaf(&zero)).collect();

        for &x_t in sequence {
            let mut input = x_t;
            for (l, layer) in self.layers.iter().enumerate() {
                let mut pre = [input; 4];
                for g in 0..4 {
                    let wx = bind.bind(tape, params, layer.wx[g]);
                    let wh = bind.bind(tape, params, layer.wh[g]);
                    let b = bind.bind(tape, params, layer.b[g]);
                    let xw = tape.vecmat(input, wx)?;
                    let hw = tape.vecmat(hidden[l], wh)?;
                    let s = tape.add(xw, hw)?;
                    pre[g] = tape.add(s, b)?;
                }
                let gate_i = tape.sigmoid(pre[0]);
                let gate_f = tape.sigmoid(pre[1]);
                let gate_g = tape.tanh(pre[2]);
                let gate_o = tape.sigmoid(pre[3]);
                let fc = tape.mul(gate_f, cell[l])?;
                let ig = tape.mul(gate_i, gate_g)?;
                cell[l] = tape.add(fc, ig)?;
                let tc = tape.tanh(cell[l]);
                hidden[l] = tape.mul(gate_o, tc)?;

                input = hidden[l];
                if l + 1 < self.layers.len() {
                    if let RunMode::Train { rng } = mode {
                        if self.dropout > 0.0 {
                            let keep = 1.0 - self.dropout;
                            let mask: Vec<F> = (0..self.hidden)
                                .map(|_| {
                                    if rng.random::<f64>() < keep {
                                        F::of(1.0 / keep)
                                    } else {
                                        F::zero()
                                    }
                                })
                                .collect();
                            let m = tape.leaf_vector(&mask);
                            input = tape.mul(input, m)?;
                        }
                    }
                }
            }
        }
        Ok(*hidden.last().expect("at least one layer"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadCombine {
    Concat,
    Average,
}

#[derive(Clone, Debug)]
pub struct GatHeadIds {
    pub w_s: ParamId,
    pub w_t: ParamId,
    pub a_s: ParamId,
    pub a_t: ParamId,
}

/// One multi-head graph attention layer. `head_out` is the per-head
/// embedding width; the layer output is `heads * head_out` under
/// concatenation and `head_out` under averaging.
#[derive(Clone, Debug)]
pub struct GatLayerParams {
    pub heads: Vec<GatHeadIds>,
    pub combine: HeadCombine,
    pub input: usize,
    pub head_out: usize,
    /// LeakyReLU negative slope for attention scores.
    pub slope: f64,
}

impl GatLayerParams {
    pub fn init<F: Scalar>(
        params: &mut ParamSet<F>,
        prefix: &str,
        input: usize,
        head_out: usize,
        num_heads: usize,
        combine: HeadCombine,
        rng: &mut impl Rng,
    ) -> Self {
        let mut heads = Vec::with_capacity(num_heads);
        for m in 0..num_heads {
            let w_s = Tensor::matrix(input, head_out, uniform_init(rng, input, input * head_out)).unwrap();
            let w_t = Tensor::matrix(input, head_out, uniform_init(rng, input, input * head_out)).unwrap();
            let a_s = Tensor::vector(uniform_init(rng, head_out, head_out));
            let a_t = Tensor::vector(uniform_init(rng, head_out, head_out));
            heads.push(GatHeadIds {
                w_s: params.add(&format!("{prefix}.h{m}.w_s"), w_s),
                w_t: params.add(&format!("{prefix}.h{m}.w_t"), w_t),
                a_s: params.add(&format!("{prefix}.h{m}.a_s"), a_s),
                a_t: params.add(&format!("{prefix}.h{m}.a_t"), a_t),
            });
        }
        Self { heads, combine, input, head_out, slope: 0.2 }
    }

    pub fn output_dim(&self) -> usize {
        match self.combine {
            HeadCombine::Concat => self.heads.len() * self.head_out,
            HeadCombine::Average => self.head_out,
        }
    }

    /// Attention coefficients of one head for node `x_i` over `neighbors`
    /// (softmax-normalized in neighbor order).
    pub fn attention<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bind: &mut TapeBinding,
        params: &ParamSet<F>,
        head: usize,
        x_i: Var,
        neighbors: &[Var],
    ) -> Result<Var, TensorError> {
        if neighbors.is_empty() {
            return Err(TensorError::Contract("attention over an empty neighborhood"));
        }
        let h = &self.heads[head];
        let w_s = bind.bind(tape, params, h.w_s);
        let w_t = bind.bind(tape, params, h.w_t);
        let a_s = bind.bind(tape, params, h.a_s);
        let a_t = bind.bind(tape, params, h.a_t);

        let ws_xi = tape.vecmat(x_i, w_s)?;
        let s_i = tape.dot(a_s, ws_xi)?;
        let mut scores = Vec::with_capacity(neighbors.len());
        for &x_j in neighbors {
            let wt_xj = tape.vecmat(x_j, w_t)?;
            let t_j = tape.dot(a_t, wt_xj)?;
            let e = tape.add(s_i, t_j)?;
            scores.push(tape.leaky_relu(e, F::of(self.slope)));
        }
        let stacked = tape.stack(&scores)?;
        tape.softmax(stacked)
    }

    /// Full layer forward for the nodes listed in `targets`.
    /// `adjacency[i]` lists node `i`'s neighborhood and must include `i`.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bind: &mut TapeBinding,
        params: &ParamSet<F>,
        xs: &[Var],
        adjacency: &[Vec<usize>],
        targets: &[usize],
    ) -> Result<Vec<Var>, TensorError> {
        if adjacency.len() != xs.len() {
            return Err(TensorError::Shape {
                expected: format!("adjacency of {}", xs.len()),
                got: format!("{}", adjacency.len()),
            });
        }
        let mut outputs = Vec::with_capacity(targets.len());
        for &i in targets {
            let mut per_head = Vec::with_capacity(self.heads.len());
            for (m, h) in self.heads.iter().enumerate() {
                let w_t = bind.bind(tape, params, h.w_t);
                let neigh: Vec<Var> = adjacency[i].iter().map(|&j| xs[j]).collect();
                let alpha = self.attention(tape, bind, params, m, xs[i], &neigh)?;
                let mut agg: Option<Var> = None;
                for (jj, &x_j) in neigh.iter().enumerate() {
                    let a_j = tape.pick(alpha, jj)?;
                    let wt_xj = tape.vecmat(x_j, w_t)?;
                    let term = tape.smul(a_j, wt_xj)?;
                    agg = Some(match agg {
                        None => term,
                        Some(acc) => tape.add(acc, term)?,
                    });
                }
                per_head.push(agg.expect("nonempty neighborhood"));
            }
            let combined = match self.combine {
                HeadCombine::Concat => tape.concat(&per_head)?,
                HeadCombine::Average => {
                    let mut acc = per_head[0];
                    for &h in &per_head[1..] {
                        acc = tape.add(acc, h)?;
                    }
                    tape.scale(acc, F::of(1.0 / per_head.len() as f64))
                }
            };
            outputs.push(tape.relu(combined));
        }
        Ok(outputs)
    }
}

/// Mean squared error over plain slices (evaluation path).
pub fn mse_loss<F: Scalar>(pred: &[F], target: &[F]) -> Result<F, TensorError> {
    if pred.is_empty() {
        return Err(TensorError::Contract("mse_loss over zero elements"));
    }
    if pred.len() != target.len() {
        return Err(TensorError::Shape {
            expected: format!("{}", pred.len()),
            got: format!("{}", target.len()),
        });
    }
    let sum = pred
        .iter()
        .zip(target)
        .fold(F::zero(), |acc, (&p, &t)| acc + (p - t) * (p - t));
    Ok(sum / F::of(pred.len() as f64))
}

/// Adam with bias correction. Moment buffers align with the parameter set.
#[derive(Clone, Debug)]
pub struct AdamState<F: Scalar> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    pub step_count: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(lr: F, params: &ParamSet<F>) -> Self {
        let m = params.iter().map(|(_, t)| vec![F::zero(); t.len()]).collect();
        let v = params.iter().map(|(_, t)| vec![F::zero(); t.len()]).collect();
        Self {
            lr,
            beta1: F::of(0.9),
            beta2: F::of(0.999),
            eps: F::of(1e-8),
            step_count: 0,
            m,
            v,
        }
    }

    pub fn moments(&self, idx: usize) -> (&[F], &[F]) {
        (&self.m[idx], &self.v[idx])
    }

    pub fn moments_mut(&mut self, idx: usize) -> (&mut Vec<F>, &mut Vec<F>) {
        (&mut self.m[idx], &mut self.v[idx])
    }

    /// One Adam update. `grads` aligns with the parameter set; `None`
    /// entries are treated as zero gradient.
    pub fn step(
        &mut self,
        params: &mut ParamSet<F>,
        grads: &[Option<Vec<F>>],
    ) -> Result<(), TensorError> {
        if grads.len() != params.len() {
            return Err(TensorError::Shape {
                expected: format!("{}", params.len()),
                got: format!("{}", grads.len()),
            });
        }
        self.step_count += 1;
        let t = self.step_count;
        let bc1 = F::one() - self.beta1.powi(t as i32);
        let bc2 = F::one() - self.beta2.powi(t as i32);
        for (idx, (_, tensor)) in params.iter_mut().enumerate() {
            let g = match &grads[idx] {
                Some(g) => {
                    if g.len() != tensor.len() {
                        return Err(TensorError::Shape {
                            expected: format!("{}", tensor.len()),
                            got: format!("{}", g.len()),
                        });
                    }
                    Some(g)
                }
                None => None,
            };
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let data = tensor.data_mut();
            for k in 0..data.len() {
                let gk = g.map_or(F::zero(), |g| g[k]);
                m[k] = self.beta1 * m[k] + (F::one() - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (F::one() - self.beta2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                data[k] = data[k] - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Central finite difference of `loss` w.r.t. one parameter scalar.
/// Restores the parameter afterwards. This is the oracle side of the
/// gradient checks; it only ever calls the forward path.
pub fn central_difference<F: Scalar>(
    params: &mut ParamSet<F>,
    id: ParamId,
    index: usize,
    h: f64,
    mut loss: impl FnMut(&ParamSet<F>) -> F,
) -> F {
    let orig = params.get(id).data()[index];
    params.get_mut(id).data_mut()[index] = orig + F::of(h);
    let plus = loss(params);
    params.get_mut(id).data_mut()[index] = orig - F::of(h);
    let minus = loss(params);
    params.get_mut(id).data_mut()[index] = orig;
    (plus - minus) / F::of(2.0 * h)
}

/// Relative error with an absolute floor, for gradient comparisons.
pub fn relative_error<F: Scalar>(a: F, b: F) -> F {
    let denom = a.abs().max(b.abs()).max(F::of(1e-8));
    (a - b).abs() / denom
}
