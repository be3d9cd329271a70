//! Lane-agent policy: observation encoding, the Q-network (dense +
//! shared LSTM + two GAT layers + Q-head), epsilon-greedy action
//! selection, the shared replay buffer, and the DQN update with online
//! and target parameter sets. All lane agents share one policy
//! (centralized training, decentralized execution).

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{self, CheckpointError, Entry};
use crate::net::{LaneId, RoadNetwork};
use crate::nn::{
    Activation, AdamState, DenseParams, GatLayerParams, HeadCombine, LstmParams, ParamSet,
    RunMode, TapeBinding,
};
use crate::scalar::Scalar;
use crate::sim::{LaneIntervalStats, SimState};
use crate::tensor::{Tape, TensorError, Var};

/// Congestion-history window length fed to the LSTM.
pub const SEQ_LEN: usize = 10;
pub const NUM_ACTIONS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    Increase,
    Decrease,
    Keep,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::Increase, Action::Decrease, Action::Keep];

    pub fn index(self) -> usize {
        match self {
            Action::Increase => 0,
            Action::Decrease => 1,
            Action::Keep => 2,
        }
    }

    pub fn from_index(i: usize) -> Action {
        Action::ALL[i]
    }

    pub fn delta(self) -> i64 {
        match self {
            Action::Increase => 1,
            Action::Decrease => -1,
            Action::Keep => 0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Action::Increase => "increase",
            Action::Decrease => "decrease",
            Action::Keep => "keep",
        }
    }
}

/// Lane-agent observation: current configuration and congestion (o_c),
/// the own-lane congestion sequence (o_l), neighbor sequences, and the
/// induced adjacency among {lane} ∪ N(lane) with self-loops.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub o_c: [f64; 2],
    pub o_l: [f64; SEQ_LEN],
    pub neighbor_seqs: Vec<[f64; SEQ_LEN]>,
    /// Row-major (1+n)^2 adjacency; node 0 is the own lane.
    pub adjacency: Vec<bool>,
}

impl Observation {
    pub fn node_count(&self) -> usize {
        1 + self.neighbor_seqs.len()
    }

    pub fn neighbor_lists(&self) -> Vec<Vec<usize>> {
        let n = self.node_count();
        debug_assert_eq!(self.adjacency.len(), n * n);
        (0..n)
            .map(|i| (0..n).filter(|&j| self.adjacency[i * n + j]).collect())
            .collect()
    }
}

/// Per-lane congestion ring buffers, sampled every `period_s` seconds
/// and zero-padded at episode start.
#[derive(Clone, Debug)]
pub struct CongestionHistory {
    bufs: Vec<VecDeque<f64>>,
    pub period_s: u32,
}

impl CongestionHistory {
    pub fn new(net: &RoadNetwork, period_s: u32) -> Self {
        let bufs = net
            .lanes
            .iter()
            .map(|_| VecDeque::from(vec![0.0; SEQ_LEN]))
            .collect();
        Self { bufs, period_s }
    }

    pub fn push_all(&mut self, sim: &SimState) {
        for (idx, buf) in self.bufs.iter_mut().enumerate() {
            buf.pop_front();
            buf.push_back(sim.congestion(LaneId(idx as u32)));
        }
    }

    pub fn seq(&self, lane: LaneId) -> [f64; SEQ_LEN] {
        let mut out = [0.0; SEQ_LEN];
        for (slot, &v) in out.iter_mut().zip(self.bufs[lane.index()].iter()) {
            *slot = v;
        }
        out
    }
}

/// Deterministic observation snapshot for one lane agent.
pub fn encode_observation(
    net: &RoadNetwork,
    sim: &SimState,
    hist: &CongestionHistory,
    lane: LaneId,
) -> Observation {
    let lane_ref = net.lane(lane);
    let m = lane_ref.space_count().max(1) as f64;
    let cleared = sim.lanes[lane.index()].cleared as f64;
    let o_c = [cleared / m, sim.congestion(lane)];
    let o_l = hist.seq(lane);
    let neighbors = &lane_ref.neighbors;
    let neighbor_seqs: Vec<[f64; SEQ_LEN]> = neighbors.iter().map(|&l| hist.seq(l)).collect();

    let nodes: Vec<LaneId> = std::iter::once(lane).chain(neighbors.iter().copied()).collect();
    let n = nodes.len();
    let mut adjacency = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            let linked = i == j
                || net.lane(nodes[i]).neighbors.binary_search(&nodes[j]).is_ok();
            adjacency[i * n + j] = linked;
        }
    }
    Observation { o_c, o_l, neighbor_seqs, adjacency }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationFlags {
    pub use_lstm: bool,
    pub use_gat: bool,
}

impl AblationFlags {
    pub fn full() -> Self {
        Self { use_lstm: true, use_gat: true }
    }

    pub fn dqn_lstm() -> Self {
        Self { use_lstm: true, use_gat: false }
    }

    pub fn dqn_only() -> Self {
        Self { use_lstm: false, use_gat: false }
    }

    pub fn name(&self) -> &'static str {
        match (self.use_lstm, self.use_gat) {
            (true, true) => "full",
            (true, false) => "dqn_lstm",
            (false, false) => "dqn",
            (false, true) => "dqn_gat",
        }
    }
}

/// Layer widths of the Q-network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetDims {
    pub fcn_out: usize,
    pub lstm_hidden: usize,
    pub gat_heads: usize,
    pub gat_head_out: usize,
    pub q_hidden: usize,
}

impl Default for NetDims {
    fn default() -> Self {
        // FCN 2->32, LSTM 2x32, GAT 2 heads (concat 64, average 32),
        // Q-head 96 -> 128 -> 3.
        Self { fcn_out: 32, lstm_hidden: 32, gat_heads: 2, gat_head_out: 32, q_hidden: 128 }
    }
}

impl NetDims {
    /// Width of the concatenated state vector feeding the Q-head.
    pub fn state_width(&self) -> usize {
        self.fcn_out + self.lstm_hidden + self.gat_head_out
    }

    /// Small widths for exhaustive gradient tests.
    pub fn tiny() -> Self {
        Self { fcn_out: 3, lstm_hidden: 4, gat_heads: 2, gat_head_out: 3, q_hidden: 5 }
    }
}

#[derive(Clone, Debug)]
pub struct QNetwork<F: Scalar> {
    pub params: ParamSet<F>,
    pub dims: NetDims,
    fcn: DenseParams,
    lstm: LstmParams,
    gat1: GatLayerParams,
    gat2: GatLayerParams,
    q1: DenseParams,
    q2: DenseParams,
}

impl<F: Scalar> QNetwork<F> {
    pub fn new(dims: NetDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let fcn = DenseParams::init(&mut params, "fcn", 2, dims.fcn_out, &mut rng);
        let lstm = LstmParams::init(&mut params, "lstm", 1, dims.lstm_hidden, 2, 0.2, &mut rng);
        let gat1 = GatLayerParams::init(
            &mut params,
            "gat1",
            dims.lstm_hidden,
            dims.gat_head_out,
            dims.gat_heads,
            HeadCombine::Concat,
            &mut rng,
        );
        let gat2 = GatLayerParams::init(
            &mut params,
            "gat2",
            dims.gat_heads * dims.gat_head_out,
            dims.gat_head_out,
            dims.gat_heads,
            HeadCombine::Average,
            &mut rng,
        );
        let q1 = DenseParams::init(&mut params, "q1", dims.state_width(), dims.q_hidden, &mut rng);
        let q2 = DenseParams::init(&mut params, "q2", dims.q_hidden, NUM_ACTIONS, &mut rng);
        Self { params, dims, fcn, lstm, gat1, gat2, q1, q2 }
    }

    /// Record the Q-value computation for one observation. Disabled
    /// branches contribute zero vectors of the same width, so the
    /// Q-head input width never changes.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<F>,
        bind: &mut TapeBinding,
        obs: &Observation,
        flags: AblationFlags,
        mode: &mut RunMode<'_>,
    ) -> Result<Var, TensorError> {
        let oc: Vec<F> = obs.o_c.iter().map(|&v| F::of(v)).collect();
        let oc = tape.leaf_vector(&oc);
        let v_fcn = self.fcn.forward(tape, bind, &self.params, oc, Activation::Relu)?;

        let seq_vars = |tape: &mut Tape<F>, seq: &[f64; SEQ_LEN]| -> Vec<Var> {
            seq.iter().map(|&v| tape.leaf_vector(&[F::of(v)])).collect()
        };

        let zero_hidden = vec![F::zero(); self.dims.lstm_hidden];
        let v_lstm = if flags.use_lstm {
            let seq = seq_vars(tape, &obs.o_l);
            self.lstm.forward(tape, bind, &self.params, &seq, mode)?
        } else {
            tape.leaf_vector(&zero_hidden)
        };

        let v_gat = if flags.use_gat {
            // Neighbor sequences pass through the same LSTM, then two
            // attention layers; only the own lane's output is kept.
            let mut xs = Vec::with_capacity(obs.node_count());
            let own_seq = seq_vars(tape, &obs.o_l);
            xs.push(self.lstm.forward(tape, bind, &self.params, &own_seq, mode)?);
            for seq in &obs.neighbor_seqs {
                let sv = seq_vars(tape, seq);
                xs.push(self.lstm.forward(tape, bind, &self.params, &sv, mode)?);
            }
            let adj = obs.neighbor_lists();
            let all: Vec<usize> = (0..xs.len()).collect();
            let hs = self.gat1.forward(tape, bind, &self.params, &xs, &adj, &all)?;
            let out = self.gat2.forward(tape, bind, &self.params, &hs, &adj, &[0])?;
            out[0]
        } else {
            tape.leaf_vector(&zero_hidden)
        };

        let state = tape.concat(&[v_fcn, v_lstm, v_gat])?;
        let h = self.q1.forward(tape, bind, &self.params, state, Activation::Relu)?;
        self.q2.forward(tape, bind, &self.params, h, Activation::None)
    }

    /// Evaluation-mode Q-values (pure in params and observation).
    pub fn q_values(&self, obs: &Observation, flags: AblationFlags) -> Result<[F; 3], TensorError> {
        let mut tape = Tape::new();
        let mut bind = TapeBinding::for_params(&self.params);
        let q = self.forward_on_tape(&mut tape, &mut bind, obs, flags, &mut RunMode::Eval)?;
        let v = tape.value(q);
        Ok([v[0], v[1], v[2]])
    }
}

/// Online parameters (gradient updates) and target parameters
/// (bootstrap targets), hard-synced periodically.
#[derive(Clone, Debug)]
pub struct QNetworkPair<F: Scalar> {
    pub online: QNetwork<F>,
    pub target: QNetwork<F>,
}

impl<F: Scalar> QNetworkPair<F> {
    pub fn new(dims: NetDims, seed: u64) -> Self {
        let online = QNetwork::new(dims, seed);
        let target = online.clone();
        Self { online, target }
    }

    pub fn sync_target(&mut self) {
        self.target
            .params
            .copy_values_from(&self.online.params)
            .expect("online and target share shapes");
    }
}

/// Epsilon-greedy over three Q-values; greedy ties break to the lowest
/// action index.
pub fn select_action<F: Scalar>(q: &[F; 3], epsilon: f64, rng: &mut impl Rng) -> Action {
    debug_assert!((0.0..=1.0).contains(&epsilon));
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        return Action::from_index(rng.random_range(0..NUM_ACTIONS));
    }
    let mut best = 0;
    for i in 1..NUM_ACTIONS {
        if q[i] > q[best] {
            best = i;
        }
    }
    Action::from_index(best)
}

/// New cleared count after an action, clamped to [0, M_j].
pub fn apply_action(current: u32, m_j: u32, action: Action) -> u32 {
    let next = current as i64 + action.delta();
    next.clamp(0, m_j as i64) as u32
}

/// r = -alpha * mean lane time loss - beta * mean walking distance of
/// vehicles assigned parking on the lane during the interval. Either
/// term is zero when no vehicles qualify.
pub fn compute_reward(stats: &LaneIntervalStats, alpha: f64, beta: f64) -> f64 {
    let loss_term = if stats.vehicles.is_empty() {
        0.0
    } else {
        stats.loss_sum_s / stats.vehicles.len() as f64
    };
    let walk_term = if stats.walk_n == 0 { 0.0 } else { stats.walk_sum_m / stats.walk_n as f64 };
    -alpha * loss_term - beta * walk_term
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub s: Observation,
    pub a: Action,
    pub r: f64,
    pub s_next: Observation,
    pub terminal: bool,
}

/// Shared experience buffer; all lane agents write here.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    buf: VecDeque<Transition>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { buf: VecDeque::with_capacity(capacity.min(1 << 20)), capacity }
    }

    pub fn push(&mut self, t: Transition) {
        if self.buf.len() == self.capacity {
            self.buf.pop_front();
        }
        self.buf.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.buf[i]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TrainingConfig {
    /// Reward weight on lane time loss (s).
    pub alpha: f64,
    /// Reward weight on walking distance (m).
    pub beta: f64,
    pub gamma: f64,
    pub lr: f64,
    pub batch: usize,
    pub capacity: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    pub eps_decay_steps: u64,
    pub target_sync_every: u64,
    pub flags: AblationFlags,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.1,
            gamma: 0.95,
            lr: 1e-3,
            batch: 64,
            capacity: 50_000,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_decay_steps: 20_000,
            target_sync_every: 500,
            flags: AblationFlags::full(),
        }
    }
}

impl TrainingConfig {
    /// Linear epsilon schedule over agent decisions.
    pub fn epsilon_at(&self, decisions: u64) -> f64 {
        if decisions >= self.eps_decay_steps {
            return self.eps_end;
        }
        let frac = decisions as f64 / self.eps_decay_steps as f64;
        self.eps_start + (self.eps_end - self.eps_start) * frac
    }
}

/// Bootstrap targets: y = r + gamma * max_a Q(s', a; target) for
/// non-terminal transitions, y = r at episode end.
pub fn compute_targets<F: Scalar>(
    batch: &[&Transition],
    target_net: &QNetwork<F>,
    gamma: f64,
    flags: AblationFlags,
) -> Result<Vec<f64>, TensorError> {
    let mut out = Vec::with_capacity(batch.len());
    for tr in batch {
        let y = if tr.terminal {
            tr.r
        } else {
            let q = target_net.q_values(&tr.s_next, flags)?;
            let max = q
                .iter()
                .fold(F::neg_infinity(), |a, &b| if b > a { b } else { a })
                .to_f64_lossy();
            tr.r + gamma * max
        };
        out.push(y);
    }
    Ok(out)
}

/// One DQN gradient step on the online parameters; the target set is
/// untouched. Returns `None` when the replay holds fewer than a batch.
pub fn train_step<F: Scalar>(
    replay: &ReplayBuffer,
    pair: &mut QNetworkPair<F>,
    adam: &mut AdamState<F>,
    cfg: &TrainingConfig,
    rng: &mut (impl Rng + rand::RngCore),
) -> Result<Option<f64>, TensorError> {
    if replay.len() < cfg.batch {
        return Ok(None);
    }
    let batch: Vec<&Transition> = (0..cfg.batch)
        .map(|_| replay.get(rng.random_range(0..replay.len())))
        .collect();
    let targets = compute_targets(&batch, &pair.target, cfg.gamma, cfg.flags)?;

    let mut tape = Tape::new();
    let mut bind = TapeBinding::for_params(&pair.online.params);
    let mut preds = Vec::with_capacity(batch.len());
    for tr in &batch {
        let q = pair.online.forward_on_tape(
            &mut tape,
            &mut bind,
            &tr.s,
            cfg.flags,
            &mut RunMode::Train { rng: &mut *rng },
        )?;
        preds.push(tape.pick(q, tr.a.index())?);
    }
    let pred = tape.stack(&preds)?;
    let t_vals: Vec<F> = targets.iter().map(|&y| F::of(y)).collect();
    let loss = tape.mse(pred, &t_vals)?;
    tape.backward(loss)?;
    let grads = bind.grads(&tape, &pair.online.params)?;
    adam.step(&mut pair.online.params, &grads)?;
    Ok(Some(tape.value(loss)[0].to_f64_lossy()))
}

/// Everything a training run needs to resume: both parameter sets,
/// optimizer moments, and progress counters.
#[derive(Clone, Debug)]
pub struct TrainerState {
    pub pair: QNetworkPair<f64>,
    pub adam: AdamState<f64>,
    pub flags: AblationFlags,
    pub decisions: u64,
    pub grad_steps: u64,
    pub epochs: u64,
}

impl TrainerState {
    pub fn new(dims: NetDims, seed: u64, lr: f64, flags: AblationFlags) -> Self {
        let pair = QNetworkPair::new(dims, seed);
        let adam = AdamState::new(lr, &pair.online.params);
        Self { pair, adam, flags, decisions: 0, grad_steps: 0, epochs: 0 }
    }

    fn meta(&self) -> Vec<f64> {
        vec![
            self.adam.step_count as f64,
            self.decisions as f64,
            self.grad_steps as f64,
            self.epochs as f64,
            if self.flags.use_lstm { 1.0 } else { 0.0 },
            if self.flags.use_gat { 1.0 } else { 0.0 },
        ]
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), CheckpointError> {
        let mut entries = Vec::new();
        for (name, t) in self.pair.online.params.iter() {
            entries.push(Entry::new(
                format!("online/{name}"),
                t.shape().to_vec(),
                t.data().to_vec(),
            ));
        }
        for (name, t) in self.pair.target.params.iter() {
            entries.push(Entry::new(
                format!("target/{name}"),
                t.shape().to_vec(),
                t.data().to_vec(),
            ));
        }
        for (idx, (name, t)) in self.pair.online.params.iter().enumerate() {
            let (m, v) = self.adam.moments(idx);
            entries.push(Entry::new(format!("adam/m/{name}"), t.shape().to_vec(), m.to_vec()));
            entries.push(Entry::new(format!("adam/v/{name}"), t.shape().to_vec(), v.to_vec()));
        }
        entries.push(Entry::new("meta/counters", vec![6], self.meta()));
        checkpoint::save(path, &entries)
    }

    pub fn load(path: &std::path::Path, dims: NetDims, lr: f64) -> Result<Self, CheckpointError> {
        let entries = checkpoint::load(path)?;
        // Rebuild the architecture, then insist the manifest matches it.
        let mut state = Self::new(dims, 0, lr, AblationFlags::full());
        let mut expected: Vec<(String, Vec<usize>)> = Vec::new();
        for (name, t) in state.pair.online.params.iter() {
            expected.push((format!("online/{name}"), t.shape().to_vec()));
        }
        for (name, t) in state.pair.target.params.iter() {
            expected.push((format!("target/{name}"), t.shape().to_vec()));
        }
        for (name, t) in state.pair.online.params.iter() {
            expected.push((format!("adam/m/{name}"), t.shape().to_vec()));
            expected.push((format!("adam/v/{name}"), t.shape().to_vec()));
        }
        expected.push(("meta/counters".to_string(), vec![6]));
        checkpoint::expect_manifest(&entries, &expected)?;

        let n = state.pair.online.params.len();
        let ids: Vec<_> = state.pair.online.params.ids().collect();
        for idx in 0..n {
            state.pair.online.params.get_mut(ids[idx]).data_mut()
                .copy_from_slice(&entries[idx].data);
        }
        for idx in 0..n {
            state.pair.target.params.get_mut(ids[idx]).data_mut()
                .copy_from_slice(&entries[n + idx].data);
        }
        for idx in 0..n {
            let (m, v) = state.adam.moments_mut(idx);
            m.copy_from_slice(&entries[2 * n + 2 * idx].data);
            v.copy_from_slice(&entries[2 * n + 2 * idx + 1].data);
        }
        let meta = &entries[4 * n].data;
        state.adam.step_count = meta[0] as u64;
        state.decisions = meta[1] as u64;
        state.grad_steps = meta[2] as u64;
        state.epochs = meta[3] as u64;
        state.flags = AblationFlags {
            use_lstm: meta[4] != 0.0,
            use_gat: meta[5] != 0.0,
        };
        Ok(state)
    }
}
