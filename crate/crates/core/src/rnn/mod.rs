//! Per-timestep intention classifier: fully connected ReLU embedding, one LSTM or GRU
//! cell, and a linear projection to class logits at every step.
//!
//! Cell equations, with `e_t` the embedded input:
//!
//! ```text
//! LSTM  i = σ(W_i e + U_i h + b_i)   o = σ(W_o e + U_o h + b_o)   f = σ(W_f e + U_f h + b_f)
//!       g = tanh(W_g e + U_g h + b_g)   c_t = i⊙g + f⊙c_{t-1}   h_t = o⊙tanh(c_t)
//! GRU   z = σ(W_z e + U_z s)   r = σ(W_r e + U_r s)   h = tanh(W_h e + U_h (s⊙r))
//!       s_t = (1-z)⊙h + z⊙s_{t-1}
//! ```
//!
//! Gate blocks are stacked row-wise in `cell_w`/`cell_u`/`cell_b`: `[i, o, f, g]` for
//! LSTM and `[z, r, h]` for GRU. The GRU has no gate biases.

mod io;
mod train;

pub use io::{load_model, read_model, save_model, write_model, MODEL_MAGIC};
pub use train::{continue_training, train, Adam, EpochLog, TrainingLog};

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CellKind {
    Lstm,
    Gru,
}

impl CellKind {
    pub fn gates(self) -> usize {
        match self {
            CellKind::Lstm => 4,
            CellKind::Gru => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CellKind::Lstm => "LSTM",
            CellKind::Gru => "GRU",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RnnConfig {
    pub cell: CellKind,
    pub input_dim: usize,
    pub embed_dim: usize,
    /// Number of fully connected ReLU layers in the embedding.
    pub embed_layers: usize,
    pub hidden_dim: usize,
    pub classes: usize,
    pub seq_len: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    pub forget_bias: f64,
    pub seed: u64,
}

impl Default for RnnConfig {
    fn default() -> Self {
        RnnConfig {
            cell: CellKind::Lstm,
            input_dim: 3,
            embed_dim: 32,
            embed_layers: 1,
            hidden_dim: 128,
            classes: crate::planner::NUM_TRAINABLE,
            seq_len: 12,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 64,
            epochs: 30,
            clip_norm: 5.0,
            forget_bias: 1.0,
            seed: 1,
        }
    }
}

impl RnnConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("input_dim", self.input_dim),
            ("embed_dim", self.embed_dim),
            ("embed_layers", self.embed_layers),
            ("hidden_dim", self.hidden_dim),
            ("classes", self.classes),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be at least 1"));
            }
        }
        if !matches!(self.seq_len, 6 | 12) {
            return Err(Error::config("seq_len", "must be 6 or 12"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        Ok(())
    }

    /// Number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        let (i, e, h, c) = (self.input_dim, self.embed_dim, self.hidden_dim, self.classes);
        let embed = (i * e + e) + (self.embed_layers - 1) * (e * e + e);
        let gates = self.cell.gates();
        let bias = if self.cell == CellKind::Lstm { gates * h } else { 0 };
        embed + gates * h * (e + h) + bias + c * h + c
    }
}

/// All trainable tensors; gradients and optimiser moments use the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub embed_w: Vec<Array2<f64>>,
    pub embed_b: Vec<Array1<f64>>,
    pub cell_w: Array2<f64>,
    pub cell_u: Array2<f64>,
    pub cell_b: Array1<f64>,
    pub out_w: Array2<f64>,
    pub out_b: Array1<f64>,
}

impl Params {
    pub fn zeros(cfg: &RnnConfig) -> Self {
        let (i, e, h, c) = (cfg.input_dim, cfg.embed_dim, cfg.hidden_dim, cfg.classes);
        let g = cfg.cell.gates();
        Params {
            embed_w: (0..cfg.embed_layers).map(|l| Array2::zeros((e, if l == 0 { i } else { e }))).collect(),
            embed_b: (0..cfg.embed_layers).map(|_| Array1::zeros(e)).collect(),
            cell_w: Array2::zeros((g * h, e)),
            cell_u: Array2::zeros((g * h, h)),
            cell_b: Array1::zeros(if cfg.cell == CellKind::Lstm { g * h } else { 0 }),
            out_w: Array2::zeros((c, h)),
            out_b: Array1::zeros(c),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Params {
            embed_w: self.embed_w.iter().map(|a| Array2::zeros(a.raw_dim())).collect(),
            embed_b: self.embed_b.iter().map(|a| Array1::zeros(a.raw_dim())).collect(),
            cell_w: Array2::zeros(self.cell_w.raw_dim()),
            cell_u: Array2::zeros(self.cell_u.raw_dim()),
            cell_b: Array1::zeros(self.cell_b.raw_dim()),
            out_w: Array2::zeros(self.out_w.raw_dim()),
            out_b: Array1::zeros(self.out_b.raw_dim()),
        }
    }

    /// Named flat views in the fixed serialisation order.
    pub fn groups(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (l, (w, b)) in self.embed_w.iter().zip(&self.embed_b).enumerate() {
            out.push((format!("embed_w{l}"), w.as_slice().expect("standard layout")));
            out.push((format!("embed_b{l}"), b.as_slice().expect("standard layout")));
        }
        out.push(("cell_w".into(), self.cell_w.as_slice().expect("standard layout")));
        out.push(("cell_u".into(), self.cell_u.as_slice().expect("standard layout")));
        out.push(("cell_b".into(), self.cell_b.as_slice().expect("standard layout")));
        out.push(("out_w".into(), self.out_w.as_slice().expect("standard layout")));
        out.push(("out_b".into(), self.out_b.as_slice().expect("standard layout")));
        out
    }

    pub fn groups_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for (w, b) in self.embed_w.iter_mut().zip(self.embed_b.iter_mut()) {
            out.push(w.as_slice_mut().expect("standard layout"));
            out.push(b.as_slice_mut().expect("standard layout"));
        }
        out.push(self.cell_w.as_slice_mut().expect("standard layout"));
        out.push(self.cell_u.as_slice_mut().expect("standard layout"));
        out.push(self.cell_b.as_slice_mut().expect("standard layout"));
        out.push(self.out_w.as_slice_mut().expect("standard layout"));
        out.push(self.out_b.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn len(&self) -> usize {
        self.groups().iter().map(|(_, g)| g.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn norm(&self) -> f64 {
        self.groups().iter().flat_map(|(_, g)| g.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.groups_mut() {
            g.iter_mut().for_each(|v| *v *= k);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.groups().iter().all(|(_, g)| g.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RnnModel {
    pub config: RnnConfig,
    pub params: Params,
}

/// Recurrent state of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub enum CellState {
    Lstm { h: Array1<f64>, c: Array1<f64> },
    Gru { s: Array1<f64> },
}

impl CellState {
    pub fn zeros(kind: CellKind, hidden: usize) -> Self {
        match kind {
            CellKind::Lstm => CellState::Lstm { h: Array1::zeros(hidden), c: Array1::zeros(hidden) },
            CellKind::Gru => CellState::Gru { s: Array1::zeros(hidden) },
        }
    }

    /// The vector exposed to the output projection.
    pub fn output(&self) -> &Array1<f64> {
        match self {
            CellState::Lstm { h, .. } => h,
            CellState::Gru { s } => s,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn glorot(rng: &mut ChaCha8Rng, a: &mut Array2<f64>, rows: std::ops::Range<usize>, fan_in: usize, fan_out: usize) {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for r in rows {
        for v in a.row_mut(r) {
            *v = rng.random_range(-limit..limit);
        }
    }
}

/// Row-wise softmax.
pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    p
}

/// Mean cross-entropy over every (step, sequence) pair. `labels[t][b]` is the class of
/// sequence `b` at step `t`.
pub fn loss(logits: &[Array2<f64>], labels: &[Vec<usize>]) -> Result<f64> {
    if logits.len() != labels.len() {
        return Err(Error::Shape(format!("{} logit steps, {} label steps", logits.len(), labels.len())));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for (y, l) in logits.iter().zip(labels) {
        if y.nrows() != l.len() {
            return Err(Error::Shape("batch size mismatch between logits and labels".into()));
        }
        for (row, &c) in y.rows().into_iter().zip(l) {
            if c >= row.len() {
                return Err(Error::Data(format!("label {c} outside [0, {})", row.len())));
            }
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[c];
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    Ok(total / n as f64)
}

/// Intermediate values of one step of a batched forward pass.
struct StepTrace {
    /// Inputs to each embedding layer, then the embedding output.
    layer_in: Vec<Array2<f64>>,
    /// Pre-activations of each embedding layer.
    layer_pre: Vec<Array2<f64>>,
    /// Activated gates, `B × gates·H`.
    gates: Array2<f64>,
    /// LSTM: previous memory; GRU: unused.
    c_prev: Array2<f64>,
    /// LSTM: tanh(c_t); GRU: s_{t-1} ⊙ r.
    aux: Array2<f64>,
    /// Recurrent output of the previous step (h_{t-1} or s_{t-1}).
    out_prev: Array2<f64>,
    /// Recurrent output of this step.
    out: Array2<f64>,
    logits: Array2<f64>,
}

/// Cached forward pass over a batch.
pub struct ForwardTrace {
    steps: Vec<StepTrace>,
}

impl ForwardTrace {
    pub fn logits(&self) -> Vec<Array2<f64>> {
        self.steps.iter().map(|s| s.logits.clone()).collect()
    }

    /// Per-step argmax, `[t][b]`.
    pub fn predictions(&self) -> Vec<Vec<usize>> {
        self.steps.iter().map(|s| argmax_rows(&s.logits)).collect()
    }
}

pub fn argmax_rows(a: &Array2<f64>) -> Vec<usize> {
    a.rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for (k, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

impl RnnModel {
    /// Glorot-uniform weights (per gate block), zero biases, LSTM forget bias `forget_bias`.
    pub fn new(config: RnnConfig) -> Result<Self> {
        config.validate()?;
        let mut p = Params::zeros(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (e, h, c) = (config.embed_dim, config.hidden_dim, config.classes);
        for w in p.embed_w.iter_mut() {
            let (rows, cols) = w.dim();
            glorot(&mut rng, w, 0..rows, cols, rows);
        }
        for g in 0..config.cell.gates() {
            glorot(&mut rng, &mut p.cell_w, g * h..(g + 1) * h, e, h);
            glorot(&mut rng, &mut p.cell_u, g * h..(g + 1) * h, h, h);
        }
        if config.cell == CellKind::Lstm {
            p.cell_b.slice_mut(s![2 * h..3 * h]).fill(config.forget_bias);
        }
        glorot(&mut rng, &mut p.out_w, 0..c, h, c);
        Ok(RnnModel { config, params: p })
    }

    /// A model with every parameter zero.
    pub fn zeros(config: RnnConfig) -> Result<Self> {
        config.validate()?;
        let params = Params::zeros(&config);
        Ok(RnnModel { config, params })
    }

    fn check_input(&self, x: ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.config.input_dim {
            return Err(Error::Shape(format!("input dim {} != configured {}", x.ncols(), self.config.input_dim)));
        }
        Ok(())
    }

    /// `relu(W_e x + b_e)` through every embedding layer, for one input vector.
    pub fn embed(&self, x: &[f64]) -> Result<Array1<f64>> {
        let x = Array2::from_shape_vec((1, x.len()), x.to_vec()).map_err(|e| Error::Shape(e.to_string()))?;
        self.check_input(x.view())?;
        let mut a = x;
        for (w, b) in self.params.embed_w.iter().zip(&self.params.embed_b) {
            a = (a.dot(&w.t()) + b).mapv(|v| v.max(0.0));
        }
        Ok(a.row(0).to_owned())
    }

    /// One cell update for one embedded vector.
    pub fn cell_step(&self, x_emb: &Array1<f64>, prev: &CellState) -> Result<CellState> {
        let h = self.config.hidden_dim;
        if x_emb.len() != self.config.embed_dim || prev.output().len() != h {
            return Err(Error::Shape("cell input or state has the wrong size".into()));
        }
        let e = x_emb.view().insert_axis(Axis(0));
        match (self.config.cell, prev) {
            (CellKind::Lstm, CellState::Lstm { h: hp, c: cp }) => {
                let (gates, c, tc) = self.lstm_forward(e, hp.view().insert_axis(Axis(0)), cp.view().insert_axis(Axis(0)));
                let o = gates.slice(s![0, h..2 * h]).to_owned();
                let c = c.row(0).to_owned();
                let hn = &o * &tc.row(0);
                Ok(CellState::Lstm { h: hn, c })
            }
            (CellKind::Gru, CellState::Gru { s: sp }) => {
                let (_, _, out) = self.gru_forward(e, sp.view().insert_axis(Axis(0)));
                Ok(CellState::Gru { s: out.row(0).to_owned() })
            }
            _ => Err(Error::Shape("cell state kind does not match the model".into())),
        }
    }

    pub fn lstm_step(&self, x_emb: &Array1<f64>, prev: &CellState) -> Result<CellState> {
        if self.config.cell != CellKind::Lstm {
            return Err(Error::Shape("model is not an LSTM".into()));
        }
        self.cell_step(x_emb, prev)
    }

    pub fn gru_step(&self, x_emb: &Array1<f64>, prev: &CellState) -> Result<CellState> {
        if self.config.cell != CellKind::Gru {
            return Err(Error::Shape("model is not a GRU".into()));
        }
        self.cell_step(x_emb, prev)
    }

    /// Returns (activated gates, c_t, tanh(c_t)).
    fn lstm_forward(
        &self,
        e: ArrayView2<f64>,
        h_prev: ArrayView2<f64>,
        c_prev: ArrayView2<f64>,
    ) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let h = self.config.hidden_dim;
        let p = &self.params;
        let mut z = e.dot(&p.cell_w.t()) + h_prev.dot(&p.cell_u.t()) + &p.cell_b;
        z.slice_mut(s![.., 0..3 * h]).mapv_inplace(sigmoid);
        z.slice_mut(s![.., 3 * h..4 * h]).mapv_inplace(f64::tanh);
        let i = z.slice(s![.., 0..h]);
        let f = z.slice(s![.., 2 * h..3 * h]);
        let g = z.slice(s![.., 3 * h..4 * h]);
        let c = &i * &g + &f * &c_prev;
        let tc = c.mapv(f64::tanh);
        (z, c, tc)
    }

    /// Returns (activated gates, s_{t-1} ⊙ r, s_t).
    fn gru_forward(&self, e: ArrayView2<f64>, s_prev: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let h = self.config.hidden_dim;
        let p = &self.params;
        let mut a = e.dot(&p.cell_w.t());
        {
            let mut zr = a.slice_mut(s![.., 0..2 * h]);
            zr += &s_prev.dot(&p.cell_u.slice(s![0..2 * h, ..]).t());
            zr.mapv_inplace(sigmoid);
        }
        let rs = &a.slice(s![.., h..2 * h]) * &s_prev;
        {
            let mut hh = a.slice_mut(s![.., 2 * h..3 * h]);
            hh += &rs.dot(&p.cell_u.slice(s![2 * h..3 * h, ..]).t());
            hh.mapv_inplace(f64::tanh);
        }
        let z = a.slice(s![.., 0..h]);
        let hh = a.slice(s![.., 2 * h..3 * h]);
        let mut out = Array2::zeros(s_prev.raw_dim());
        Zip::from(&mut out).and(&z).and(&hh).and(&s_prev).for_each(|o, &z, &hh, &sp| *o = (1.0 - z) * hh + z * sp);
        (a, rs, out)
    }

    /// Batched forward pass from zero state. `xs[t]` is `B × input_dim`.
    pub fn forward_trace(&self, xs: &[Array2<f64>]) -> Result<ForwardTrace> {
        if xs.is_empty() {
            return Err(Error::Shape("empty sequence".into()));
        }
        let b = xs[0].nrows();
        let h = self.config.hidden_dim;
        let p = &self.params;
        let mut out_prev = Array2::<f64>::zeros((b, h));
        let mut c_prev = Array2::<f64>::zeros((b, h));
        let mut steps = Vec::with_capacity(xs.len());
        for x in xs {
            self.check_input(x.view())?;
            if x.nrows() != b {
                return Err(Error::Shape("batch size changes between steps".into()));
            }
            let mut layer_in = vec![x.clone()];
            let mut layer_pre = Vec::with_capacity(p.embed_w.len());
            for (w, bias) in p.embed_w.iter().zip(&p.embed_b) {
                let pre = layer_in.last().unwrap().dot(&w.t()) + bias;
                layer_in.push(pre.mapv(|v| v.max(0.0)));
                layer_pre.push(pre);
            }
            let e = layer_in.last().unwrap().view();
            let (gates, aux, out, c_next) = match self.config.cell {
                CellKind::Lstm => {
                    let (gates, c, tc) = self.lstm_forward(e, out_prev.view(), c_prev.view());
                    let out = &gates.slice(s![.., h..2 * h]) * &tc;
                    (gates, tc, out, c)
                }
                CellKind::Gru => {
                    let (gates, rs, out) = self.gru_forward(e, out_prev.view());
                    (gates, rs, out, Array2::zeros((0, 0)))
                }
            };
            let logits = out.dot(&p.out_w.t()) + &p.out_b;
            let step = StepTrace {
                layer_in,
                layer_pre,
                gates,
                c_prev: std::mem::replace(&mut c_prev, c_next),
                aux,
                out_prev: std::mem::replace(&mut out_prev, out.clone()),
                out,
                logits,
            };
            steps.push(step);
        }
        Ok(ForwardTrace { steps })
    }

    /// Per-step logits for one sequence of feature vectors (`T × input_dim`).
    pub fn forward(&self, seq: &Array2<f64>) -> Result<Array2<f64>> {
        let xs: Vec<Array2<f64>> = seq.rows().into_iter().map(|r| r.to_owned().insert_axis(Axis(0))).collect();
        let trace = self.forward_trace(&xs)?;
        let mut out = Array2::zeros((seq.nrows(), self.config.classes));
        for (t, st) in trace.steps.iter().enumerate() {
            out.row_mut(t).assign(&st.logits.row(0));
        }
        Ok(out)
    }

    pub fn loss(&self, xs: &[Array2<f64>], labels: &[Vec<usize>]) -> Result<f64> {
        let trace = self.forward_trace(xs)?;
        loss(&trace.logits(), labels)
    }

    /// Mean per-step cross-entropy and its gradient with respect to every parameter,
    /// by backpropagation through time.
    pub fn backward(&self, xs: &[Array2<f64>], labels: &[Vec<usize>]) -> Result<(f64, Params, ForwardTrace)> {
        let trace = self.forward_trace(xs)?;
        let loss_value = loss(&trace.logits(), labels)?;
        let grads = self.backward_from(&trace, labels);
        Ok((loss_value, grads, trace))
    }

    fn backward_from(&self, trace: &ForwardTrace, labels: &[Vec<usize>]) -> Params {
        let h = self.config.hidden_dim;
        let p = &self.params;
        let mut g = p.zeros_like();
        let b = trace.steps[0].logits.nrows();
        let norm = 1.0 / (b * trace.steps.len()) as f64;

        let mut d_out_next = Array2::<f64>::zeros((b, h));
        let mut dc_next = Array2::<f64>::zeros((b, h));

        for (st, lab) in trace.steps.iter().zip(labels).rev() {
            let mut dy = softmax(&st.logits);
            for (mut row, &c) in dy.rows_mut().into_iter().zip(lab) {
                row[c] -= 1.0;
            }
            dy *= norm;
            g.out_w += &dy.t().dot(&st.out);
            g.out_b += &dy.sum_axis(Axis(0));
            let d_out = dy.dot(&p.out_w) + &d_out_next;

            let mut dz = Array2::<f64>::zeros(st.gates.raw_dim());
            match self.config.cell {
                CellKind::Lstm => {
                    let gate = |k: usize| st.gates.slice(s![.., k * h..(k + 1) * h]);
                    let (i, o, f, gg) = (gate(0), gate(1), gate(2), gate(3));
                    let tc = &st.aux;
                    let mut dc = Array2::<f64>::zeros((b, h));
                    Zip::from(&mut dc)
                        .and(&d_out)
                        .and(&o)
                        .and(tc)
                        .and(&dc_next)
                        .for_each(|dc, &dh, &o, &tc, &dcn| *dc = dh * o * (1.0 - tc * tc) + dcn);
                    // c_{t-1} is needed for the forget-gate gradient.
                    Zip::from(dz.slice_mut(s![.., 0..h])).and(&dc).and(&gg).and(&i).for_each(|d, &dc, &g, &i| *d = dc * g * i * (1.0 - i));
                    Zip::from(dz.slice_mut(s![.., h..2 * h]))
                        .and(&d_out)
                        .and(tc)
                        .and(&o)
                        .for_each(|d, &dh, &tc, &o| *d = dh * tc * o * (1.0 - o));
                    Zip::from(dz.slice_mut(s![.., 2 * h..3 * h]))
                        .and(&dc)
                        .and(&st.c_prev)
                        .and(&f)
                        .for_each(|d, &dc, &cp, &f| *d = dc * cp * f * (1.0 - f));
                    Zip::from(dz.slice_mut(s![.., 3 * h..4 * h]))
                        .and(&dc)
                        .and(&i)
                        .and(&gg)
                        .for_each(|d, &dc, &i, &g| *d = dc * i * (1.0 - g * g));
                    dc_next = &dc * &f;
                    g.cell_u += &dz.t().dot(&st.out_prev);
                    g.cell_b += &dz.sum_axis(Axis(0));
                    d_out_next = dz.dot(&p.cell_u);
                }
                CellKind::Gru => {
                    let gate = |k: usize| st.gates.slice(s![.., k * h..(k + 1) * h]);
                    let (z, r, hh) = (gate(0), gate(1), gate(2));
                    let sp = &st.out_prev;
                    let mut ds_prev = &d_out * &z;
                    Zip::from(dz.slice_mut(s![.., 0..h]))
                        .and(&d_out)
                        .and(sp)
                        .and(&hh)
                        .and(&z)
                        .for_each(|d, &ds, &sp, &hh, &z| *d = ds * (sp - hh) * z * (1.0 - z));
                    Zip::from(dz.slice_mut(s![.., 2 * h..3 * h]))
                        .and(&d_out)
                        .and(&z)
                        .and(&hh)
                        .for_each(|d, &ds, &z, &hh| *d = ds * (1.0 - z) * (1.0 - hh * hh));
                    let dah = dz.slice(s![.., 2 * h..3 * h]).to_owned();
                    let d_rs = dah.dot(&p.cell_u.slice(s![2 * h..3 * h, ..]));
                    ds_prev += &(&d_rs * &r);
                    Zip::from(dz.slice_mut(s![.., h..2 * h]))
                        .and(&d_rs)
                        .and(sp)
                        .and(&r)
                        .for_each(|d, &drs, &sp, &r| *d = drs * sp * r * (1.0 - r));
                    let dzr = dz.slice(s![.., 0..2 * h]);
                    g.cell_u.slice_mut(s![0..2 * h, ..]).scaled_add(1.0, &dzr.t().dot(sp));
                    g.cell_u.slice_mut(s![2 * h..3 * h, ..]).scaled_add(1.0, &dah.t().dot(&st.aux));
                    ds_prev += &dzr.dot(&p.cell_u.slice(s![0..2 * h, ..]));
                    d_out_next = ds_prev;
                }
            }
            let e = st.layer_in.last().unwrap();
            g.cell_w += &dz.t().dot(e);
            let mut d_act = dz.dot(&p.cell_w);
            for l in (0..p.embed_w.len()).rev() {
                Zip::from(&mut d_act).and(&st.layer_pre[l]).for_each(|d, &pre| {
                    if pre <= 0.0 {
                        *d = 0.0
                    }
                });
                g.embed_w[l] += &d_act.t().dot(&st.layer_in[l]);
                g.embed_b[l] += &d_act.sum_axis(Axis(0));
                if l > 0 {
                    d_act = d_act.dot(&p.embed_w[l]);
                }
            }
        }
        g
    }

    /// Per-step class predictions for a batch (`[t][b]`).
    pub fn predict(&self, xs: &[Array2<f64>]) -> Result<Vec<Vec<usize>>> {
        Ok(self.forward_trace(xs)?.predictions())
    }
}

/// Packs sequences (each `T × input_dim`, row-major) into per-step batch matrices.
pub fn batch_steps(seqs: &[&[f64]], seq_len: usize, input_dim: usize) -> Vec<Array2<f64>> {
    (0..seq_len)
        .map(|t| {
            let mut m = Array2::zeros((seqs.len(), input_dim));
            for (b, seq) in seqs.iter().enumerate() {
                for k in 0..input_dim {
                    m[[b, k]] = seq[t * input_dim + k];
                }
            }
            m
        })
        .collect()
}
